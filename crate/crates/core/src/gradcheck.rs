//! Central-difference gradient verification.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rand::Rng;

use crate::autodiff::OpKind;
use crate::corpus::{ImageFeatures, BOS, EOS, NUM_DENSE_CAPTIONS};
use crate::error::{Error, Result};
use crate::model::{Ablation, ExampleInput, Model, ModelConfig, ModelDims};
use crate::params::{ParamGrads, ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates checked per parameter tensor; smaller tensors are checked exhaustively.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            samples_per_param: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_group: BTreeMap<ParamGroup, f64>,
    pub worst: Option<Mismatch>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn failing_groups(&self, tol: f64) -> Vec<ParamGroup> {
        self.per_group
            .iter()
            .filter(|(_, e)| **e > tol)
            .map(|(g, _)| *g)
            .collect()
    }
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the analytic gradient returned by `f` against central
/// differences of its value, over sampled coordinates of every parameter.
///
/// `f` must be deterministic: it is re-evaluated twice per coordinate.
/// Parameters are restored exactly after each perturbation.
pub fn grad_check<F>(store: &mut ParamStore, opts: &GradCheckOptions, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, ParamGrads)>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::Parameter(format!(
            "gradient-check eps {} outside [1e-7, 1e-3]",
            opts.eps
        )));
    }
    let (base, analytic) = f(store)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("objective is {base}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_group: BTreeMap::new(),
        worst: None,
        coordinates: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= opts.samples_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.samples_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let group = store.get(id).group;
        let entry = report.per_group.entry(group).or_insert(0.0);
        for i in coords {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + opts.eps;
            let plus = f(store)?.0;
            store.value_mut(id).data_mut()[i] = orig - opts.eps;
            let minus = f(store)?.0;
            store.value_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "objective not finite when perturbing {}[{}]",
                    store.get(id).name,
                    i
                )));
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.get(id)[i];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            *entry = entry.max(err);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Mismatch {
                    param: store.get(id).name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    Ok(report)
}

/// Settings for checking the complete model's gradients.
#[derive(Clone, Debug)]
pub struct ModelCheck {
    pub seed: u64,
    /// Caption length (tokens between BOS and EOS) of the teacher-forced loss.
    pub caption_len: usize,
    pub ablation: Ablation,
    pub options: GradCheckOptions,
    /// Corrupts one backward rule; used to exercise the failure path.
    pub fault: Option<OpKind>,
}

impl Default for ModelCheck {
    fn default() -> Self {
        ModelCheck {
            seed: 0,
            caption_len: 4,
            ablation: Ablation::default(),
            options: GradCheckOptions::default(),
            fault: None,
        }
    }
}

/// Builds a small random model and input, then checks every parameter of
/// the teacher-forced decoding loss (training mode, dropout masks fixed).
pub fn check_model(check: &ModelCheck) -> Result<GradCheckReport> {
    const VOCAB: usize = 11;
    const FEATURE_DIM: usize = 5;
    const REGIONS: usize = 3;
    let config = ModelConfig {
        dims: ModelDims::tiny(),
        dropout: 0.2,
        ablation: check.ablation,
        init_scale: 0.5,
        ..ModelConfig::new(VOCAB, 3, FEATURE_DIM)
    };
    let model = Model::new(config, check.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(check.seed ^ 0x5eed);
    let features = ImageFeatures {
        mean_pooled: Tensor::vector((0..FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        spatial: Tensor::matrix(
            REGIONS,
            FEATURE_DIM,
            (0..REGIONS * FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?,
    };
    let dense: Vec<Vec<usize>> = (0..NUM_DENSE_CAPTIONS)
        .map(|_| (0..rng.gen_range(1..4)).map(|_| rng_word(&mut rng, VOCAB)).collect())
        .collect();
    let mut target = vec![BOS];
    target.extend((0..check.caption_len).map(|_| rng_word(&mut rng, VOCAB)));
    target.push(EOS);
    let style = rng.gen_range(0..3);
    let session_seed = rng.gen();

    let mut params = model.params.clone();
    grad_check(&mut params, &check.options, |ps| {
        let mut m = model.clone();
        m.params = ps.clone();
        let mut s = m.session(true, session_seed);
        if let Some(kind) = check.fault {
            s.tape.inject_fault(kind);
        }
        let input = ExampleInput {
            features: &features,
            dense_captions: &dense,
            style,
        };
        let loss = m.caption_nll(&mut s, input, &target)?;
        let mut g = ParamGrads::zeros(ps);
        s.accumulate_grads(loss, 1.0, &mut g)?;
        Ok((s.tape.value(loss)[0], g))
    })
}

fn rng_word(rng: &mut ChaCha8Rng, vocab: usize) -> usize {
    rng.gen_range(EOS + 2..vocab)
}
