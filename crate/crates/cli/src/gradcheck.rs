use threem::autodiff::OpKind;
use threem::gradcheck::{check_model, GradCheckOptions, ModelCheck};
use threem::{Ablation, Error, Result};

use crate::args::GradcheckArgs;
use crate::Outcome;

fn parse_op(name: &str) -> Result<OpKind> {
    Ok(match name {
        "matmul" => OpKind::MatMul,
        "transpose" => OpKind::Transpose,
        "add" => OpKind::Add,
        "mul" => OpKind::Mul,
        "scale" => OpKind::Scale,
        "add-row" => OpKind::AddRow,
        "tanh" => OpKind::Tanh,
        "sigmoid" => OpKind::Sigmoid,
        "relu" => OpKind::Relu,
        "softmax" => OpKind::Softmax,
        "log-softmax" => OpKind::LogSoftmax,
        "dropout" => OpKind::Dropout,
        "concat" => OpKind::Concat,
        "slice" => OpKind::Slice,
        "row" => OpKind::Row,
        "reshape" => OpKind::Reshape,
        "sum" => OpKind::Sum,
        "masked-nll" => OpKind::MaskedNll,
        other => return Err(Error::Parameter(format!("unknown operation {other:?}"))),
    })
}

pub fn run(a: GradcheckArgs) -> Result<Outcome> {
    let check = ModelCheck {
        seed: a.seed,
        caption_len: a.caption_len,
        ablation: Ablation {
            use_style: !a.ablation.no_style,
            use_text: !a.ablation.no_text,
            use_visual: !a.ablation.no_visual,
        },
        options: GradCheckOptions {
            samples_per_param: a.samples,
            seed: a.seed,
            ..Default::default()
        },
        fault: a.inject_fault.as_deref().map(parse_op).transpose()?,
    };
    if a.caption_len == 0 {
        return Err(Error::Parameter("caption-len must be positive".into()));
    }
    let report = check_model(&check)?;
    let mut failed = false;
    for (group, err) in &report.per_group {
        let ok = *err <= a.tolerance;
        failed |= !ok;
        println!("{:<16} max_rel_error {:.3e}  {}", group.name(), err, if ok { "ok" } else { "FAIL" });
    }
    if let Some(w) = &report.worst {
        println!(
            "worst: {}[{}] analytic {:.9e} numeric {:.9e}",
            w.param, w.index, w.analytic, w.numeric
        );
    }
    println!(
        "{} coordinates checked, tolerance {:.0e}: {}",
        report.coordinates,
        a.tolerance,
        if failed { "FAILED" } else { "passed" }
    );
    Ok(if failed { Outcome::CheckFailed } else { Outcome::Success })
}
