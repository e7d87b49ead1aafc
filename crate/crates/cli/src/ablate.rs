use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use threem::metrics::{evaluate, MetricReport};
use threem::{Ablation, Error, Result};

use crate::args::AblateArgs;
use crate::config::{create_dir, RunConfig};
use crate::eval::{build_corpus, read_caption_lines, report_json, CaptionLine, METRICS_FILE};
use crate::generate::{caption_requests, load_images, write_captions, CAPTIONS_FILE};
use crate::train::{load_corpus, require, save_run, train_model};
use crate::Outcome;

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";

pub const VARIANTS: [Ablation; 4] = [
    Ablation {
        use_style: true,
        use_text: true,
        use_visual: true,
    },
    Ablation {
        use_style: false,
        use_text: true,
        use_visual: true,
    },
    Ablation {
        use_style: true,
        use_text: false,
        use_visual: true,
    },
    Ablation {
        use_style: true,
        use_text: true,
        use_visual: false,
    },
];

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    #[serde(flatten)]
    pub metrics: MetricReport,
    /// Images whose captions differ across every style.
    pub style_separated: usize,
    pub images: usize,
}

fn to_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,bleu1,bleu3,bleu4,rouge_l,cider,unique_words,style_separated,images\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.variant, m.bleu1, m.bleu3, m.bleu4, m.rouge_l, m.cider, m.unique_words, r.style_separated, r.images
        );
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn run(a: AblateArgs) -> Result<Outcome> {
    let mut cfg = a.config.resolve("ablate")?;
    a.data.apply(&mut cfg);
    a.train.apply(&mut cfg);
    a.decode.apply(&mut cfg);
    cfg.validate()?;
    let out = require(&cfg.out, "--out")?.to_owned();
    let corpus = load_corpus(&cfg)?;
    // captions are scored on the validation split when there is one
    let eval_path = cfg.val.clone().or_else(|| cfg.data.clone()).expect("data is required");
    let images = load_images(&eval_path, cfg.features.as_deref(), &corpus.vocab)?;
    let references = read_caption_lines(&eval_path)?;
    let ref_keys: BTreeSet<(String, String)> =
        references.iter().map(|r| (r.image_id.clone(), r.style.clone())).collect();
    create_dir(&out)?;
    cfg.echo(&out)?;

    let mut rows = Vec::new();
    for ablation in VARIANTS {
        let variant_cfg = RunConfig {
            ablation,
            ..cfg.clone()
        };
        let dir = out.join(ablation.label());
        create_dir(&dir)?;
        let (model, report) = train_model(&variant_cfg, &corpus)?;
        save_run(&dir, &model, &corpus, &report)?;

        let requests: Vec<(usize, usize)> = (0..images.len())
            .flat_map(|i| (0..corpus.styles.len()).map(move |s| (i, s)))
            .collect();
        let penalties = variant_cfg.penalties(&corpus.vocab);
        let captions = caption_requests(
            &model,
            &corpus.vocab,
            &corpus.styles,
            &images,
            &requests,
            variant_cfg.decode.beam,
            &penalties,
        )?;
        write_captions(&dir.join(CAPTIONS_FILE), &captions)?;

        let style_separated = captions
            .chunks(corpus.styles.len())
            .filter(|per_image| {
                let distinct: BTreeSet<&str> = per_image.iter().map(|c| c.caption.as_str()).collect();
                distinct.len() == per_image.len()
            })
            .count();
        let scored: Vec<CaptionLine> = captions
            .iter()
            .filter(|c| ref_keys.contains(&(c.image_id.clone(), c.style.clone())))
            .map(|c| CaptionLine {
                image_id: c.image_id.clone(),
                style: c.style.clone(),
                caption: c.caption.clone(),
            })
            .collect();
        let metrics = evaluate(&build_corpus(&scored, &references)?)?;
        write(&dir.join(METRICS_FILE), &report_json(&metrics))?;
        log::info!(
            "{}: bleu4 {:.4} cider {:.4}, styles separated on {}/{} images",
            ablation.label(),
            metrics.bleu4,
            metrics.cider,
            style_separated,
            images.len()
        );
        rows.push(AblationRow {
            variant: ablation.label().to_owned(),
            metrics,
            style_separated,
            images: images.len(),
        });
    }
    let csv = to_csv(&rows);
    write(&out.join(ABLATION_CSV), &csv)?;
    write(
        &out.join(ABLATION_JSON),
        &(serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n"),
    )?;
    print!("{csv}");
    Ok(Outcome::Success)
}
