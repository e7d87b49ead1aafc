//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs as a plain binary so criteria can share trained models and
//! report timings.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use threem::autodiff::{Elementwise, Tape, Var};
use threem::corpus::{
    build_styles_from_records, build_vocab_from_records, load_dataset, ExampleRecord, ImageFeatures, Vocabulary, BOS,
    EMPTY_CAPTION, EOS, NUM_DENSE_CAPTIONS,
};
use threem::encoders::WordStateSource;
use threem::gradcheck::{grad_check, GradCheckOptions};
use threem::inference::{beam_search, greedy_decode, PenaltyConfig};
use threem::metrics::{bleu, cider, rouge_l, EvalCorpus, ROUGE_BETA};
use threem::params::{Bindings, ParamGrads};
use threem::toy::{generate_toy, toy_model_config, toy_train_config, write_toy, ToyConfig};
use threem::trainer::{evaluate_loss, fit};
use threem::{Ablation, ExampleInput, Model, ModelConfig, ModelDims, ParamGroup, ParamStore, Tensor};

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_threem"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(cmd: &mut Command) -> Result<Output, String> {
    cmd.output().map_err(|e| format!("cannot run threem: {e}"))
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn expect_success(o: &Output, what: &str) -> Result<(), String> {
    ensure!(
        o.status.success(),
        "{what} exited with {:?}: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    Ok(())
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- gradients

/// Checks `sum(w ⊙ op(params))` for fixed random weights `w`.
fn op_check<F>(shapes: &[&[usize]], build: F) -> Result<f64, String>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> threem::Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(shapes.len() as u64 * 31 + 7);
    let mut store = ParamStore::new();
    for (i, shape) in shapes.iter().enumerate() {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        store.add(format!("p{i}"), ParamGroup::Other, Tensor::new(shape.to_vec(), data).map_err(err)?);
    }
    let opts = GradCheckOptions {
        samples_per_param: 64,
        ..Default::default()
    };
    let report = grad_check(&mut store, &opts, |s| {
        let mut tape = Tape::new();
        let mut b = Bindings::new(s);
        let vars: Vec<Var> = s.ids().collect::<Vec<_>>().into_iter().map(|id| b.var(&mut tape, id)).collect();
        let out = build(&mut tape, &vars)?;
        let mut wrng = ChaCha8Rng::seed_from_u64(99);
        let shape = tape.shape(out).to_vec();
        let w = (0..tape.value(out).len()).map(|_| wrng.gen_range(-1.0..1.0)).collect();
        let w = tape.constant(Tensor::new(shape, w)?);
        let weighted = tape.mul(out, w)?;
        let loss = tape.sum(weighted);
        let grads = tape.backward(loss)?;
        let mut g = ParamGrads::zeros(s);
        b.collect(&grads, 1.0, &mut g);
        Ok((tape.value(loss)[0], g))
    })
    .map_err(err)?;
    Ok(report.max_rel_error)
}

fn per_op_checks() -> Result<usize, String> {
    type Build = Box<dyn Fn(&mut Tape<'_>, &[Var]) -> threem::Result<Var>>;
    let cases: Vec<(&str, Vec<&[usize]>, Build)> = vec![
        ("matmul", vec![&[3, 4], &[4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("transpose", vec![&[3, 4]], Box::new(|t, v| t.transpose(v[0]))),
        ("add", vec![&[3, 4], &[3, 4]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("mul", vec![&[3, 4], &[3, 4]], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![&[5]], Box::new(|t, v| Ok(t.scale(v[0], 1.7)))),
        ("add_row", vec![&[3, 4], &[4]], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("tanh", vec![&[2, 3]], Box::new(|t, v| Ok(t.tanh(v[0])))),
        ("sigmoid", vec![&[2, 3]], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("relu", vec![&[2, 3]], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("softmax", vec![&[6]], Box::new(|t, v| t.softmax(v[0]))),
        ("log_softmax", vec![&[6]], Box::new(|t, v| t.log_softmax(v[0]))),
        (
            "dropout",
            vec![&[8]],
            Box::new(|t, v| t.dropout(v[0], 0.3, true, &mut ChaCha8Rng::seed_from_u64(1))),
        ),
        ("concat0", vec![&[2, 3], &[1, 3]], Box::new(|t, v| t.concat(&[v[0], v[1]], 0))),
        ("concat1", vec![&[2, 3], &[2, 2]], Box::new(|t, v| t.concat(&[v[0], v[1]], 1))),
        ("slice", vec![&[7]], Box::new(|t, v| t.slice(v[0], 2, 3))),
        ("row", vec![&[3, 4]], Box::new(|t, v| t.row(v[0], 1))),
        ("reshape", vec![&[3, 4]], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        ("sum", vec![&[5]], Box::new(|t, v| Ok(t.sum(v[0])))),
        (
            "masked_nll_sum",
            vec![&[2, 3, 4]],
            Box::new(|t, v| t.masked_nll_sum(v[0], &[vec![0, 3, 1], vec![2, 2, 0]], &[vec![1.0, 1.0, 0.0], vec![1.0, 0.5, 1.0]])),
        ),
        (
            "elementwise",
            vec![&[4], &[4], &[4]],
            Box::new(|t, v| {
                let a = t.elementwise(Elementwise::Mul, &[v[0], v[1]])?;
                let b = t.elementwise(Elementwise::Tanh, &[a])?;
                let c = t.elementwise(Elementwise::Sigmoid, &[v[2]])?;
                t.elementwise(Elementwise::Add, &[b, c])
            }),
        ),
    ];
    let n = cases.len();
    for (name, shapes, build) in cases {
        let e = op_check(&shapes, |t, v| build(t, v))?;
        ensure!(e < 1e-6, "{name}: max relative error {e:.3e} >= 1e-6");
    }
    Ok(n)
}

fn group_lines(out: &str) -> Vec<(String, f64, bool)> {
    out.lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() == 4 && f[1] == "max_rel_error" {
                Some((f[0].to_owned(), f[2].parse().ok()?, f[3] == "ok"))
            } else {
                None
            }
        })
        .collect()
}

const GROUPS: [&str; 7] = [
    "word_embedding",
    "style",
    "caption_encoder",
    "visual_encoder",
    "caption_branch",
    "visual_branch",
    "projection",
];

fn gradient_suite() -> Verdict {
    let ops = per_op_checks()?;
    let start = Instant::now();
    let o = run(bin().arg("gradcheck"))?;
    let elapsed = start.elapsed();
    expect_success(&o, "gradcheck")?;
    let groups = group_lines(&stdout(&o));
    let names: Vec<&str> = groups.iter().map(|g| g.0.as_str()).collect();
    ensure!(names == GROUPS, "gradcheck reported groups {names:?}");
    let worst = groups.iter().map(|g| g.1).fold(0.0, f64::max);
    ensure!(worst < 1e-4, "max relative error {worst:.3e}");
    ensure!(elapsed < Duration::from_secs(120), "gradcheck took {elapsed:?}");
    for flag in ["--no-style", "--no-text", "--no-visual"] {
        let o = run(bin().args(["gradcheck", flag]))?;
        expect_success(&o, flag)?;
    }

    let o = run(bin().args(["gradcheck", "--inject-fault", "relu"]))?;
    ensure!(o.status.code() == Some(1), "faulty relu run exited with {:?}", o.status.code());
    let failing: Vec<String> = group_lines(&stdout(&o)).into_iter().filter(|g| !g.2).map(|g| g.0).collect();
    ensure!(failing == ["visual_encoder"], "faulty relu run flagged {failing:?}");
    Ok(format!(
        "{ops} ops < 1e-6; model max {worst:.1e} < 1e-4 in {:.1}s; relu fault flags visual_encoder",
        elapsed.as_secs_f64()
    ))
}

// ----------------------------------------------------------- random models

struct Fixture {
    model: Model,
    features: ImageFeatures,
    dense: Vec<Vec<usize>>,
    style: usize,
}

impl Fixture {
    fn input(&self) -> ExampleInput<'_> {
        ExampleInput {
            features: &self.features,
            dense_captions: &self.dense,
            style: self.style,
        }
    }
}

fn random_features(rng: &mut ChaCha8Rng, dim: usize, regions: usize) -> ImageFeatures {
    let spatial: Vec<f64> = (0..dim * regions).map(|_| rng.gen_range(-1.5..1.5)).collect();
    ImageFeatures {
        mean_pooled: Tensor::vector((0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect()),
        spatial: Tensor::matrix(regions, dim, spatial).unwrap(),
    }
}

/// Up to five random captions, padded with empty ones like the dataset loader.
fn random_dense(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let present = rng.gen_range(0..=NUM_DENSE_CAPTIONS);
    (0..NUM_DENSE_CAPTIONS)
        .map(|i| {
            if i < present {
                (0..rng.gen_range(1..max_len)).map(|_| rng.gen_range(EOS + 1..vocab)).collect()
            } else {
                EMPTY_CAPTION.to_vec()
            }
        })
        .collect()
}

fn random_fixture(rng: &mut ChaCha8Rng, vocab: usize, ablation: Ablation) -> Fixture {
    let mut d = || rng.gen_range(2..7);
    let dims = ModelDims {
        word_dim: d(),
        style_embed_dim: d(),
        style_dim: d(),
        encoder_hidden: d(),
        visual_hidden: d(),
        decoder_hidden: d(),
        attention_dim: d(),
    };
    let styles = rng.gen_range(1..4);
    let feature_dim = rng.gen_range(2..7);
    let regions = rng.gen_range(1..5);
    let config = ModelConfig {
        dims,
        dropout: rng.gen_range(0.0..0.5),
        word_state_source: if rng.gen() { WordStateSource::Cell } else { WordStateSource::Hidden },
        ablation,
        init_scale: rng.gen_range(0.1..1.5),
        ..ModelConfig::new(vocab, styles, feature_dim)
    };
    let model = Model::new(config, rng.gen()).unwrap();
    let dense = random_dense(rng, vocab, 5);
    Fixture {
        model,
        features: random_features(rng, feature_dim, regions),
        dense,
        style: rng.gen_range(0..styles),
    }
}

fn random_ablation(rng: &mut ChaCha8Rng) -> Ablation {
    loop {
        let a = Ablation {
            use_style: rng.gen(),
            use_text: rng.gen(),
            use_visual: rng.gen(),
        };
        if a.use_text || a.use_visual {
            return a;
        }
    }
}

fn normalization_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_lp = 0.0f64;
    let mut worst_alpha = 0.0f64;
    let mut steps = 0;
    for _ in 0..1000 {
        let vocab = rng.gen_range(5..40);
        let ablation = random_ablation(&mut rng);
        let fx = random_fixture(&mut rng, vocab, ablation);
        let training = rng.gen();
        let mut s = fx.model.session(training, rng.gen());
        let enc = fx.model.encode(&mut s, fx.input()).map_err(err)?;
        let mut state = fx.model.initial_state(&mut s);
        let mut prev = BOS;
        for _ in 0..rng.gen_range(1..4) {
            let out = fx.model.decode_step(&mut s, &enc, prev, &state).map_err(err)?;
            let total: f64 = s.tape.value(out.logprobs).iter().map(|x| x.exp()).sum();
            worst_lp = worst_lp.max((total - 1.0).abs());
            for alpha in [out.caption_alpha, out.visual_alpha].into_iter().flatten() {
                let a: f64 = s.tape.value(alpha).iter().sum();
                worst_alpha = worst_alpha.max((a - 1.0).abs());
            }
            ensure!(
                out.caption_alpha.is_some() == ablation.use_text && out.visual_alpha.is_some() == ablation.use_visual,
                "attention weights do not follow ablation {ablation:?}"
            );
            steps += 1;
            state = out.state;
            prev = rng.gen_range(0..vocab);
        }
    }
    ensure!(worst_lp <= 1e-8, "sum of probabilities off by {worst_lp:.3e}");
    ensure!(worst_alpha <= 1e-8, "sum of attention weights off by {worst_alpha:.3e}");
    Ok(format!(
        "1000 draws, {steps} steps: |Σp-1| <= {worst_lp:.1e}, |Σα-1| <= {worst_alpha:.1e}"
    ))
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn fused_bits(s: &threem::layers::Session<'_>, a: Option<Var>, b: Option<Var>) -> Vec<u64> {
    match (a, b) {
        (Some(a), Some(b)) => s.tape.value(a).iter().zip(s.tape.value(b)).map(|(x, y)| (x + y).to_bits()).collect(),
        (Some(x), None) | (None, Some(x)) => bits(s.tape.value(x)),
        (None, None) => unreachable!(),
    }
}

fn fusion_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut eval_steps = 0;
    for i in 0..100 {
        let ablation = if i < 70 { Ablation::default() } else { random_ablation(&mut rng) };
        let fx = random_fixture(&mut rng, 12, ablation);
        let training = i % 2 == 0;
        let mut s = fx.model.session(training, rng.gen());
        let enc = fx.model.encode(&mut s, fx.input()).map_err(err)?;
        let mut state = fx.model.initial_state(&mut s);
        for _ in 0..rng.gen_range(0..3) {
            state = fx.model.decode_step(&mut s, &enc, rng.gen_range(0..12), &state).map_err(err)?.state;
        }
        let out = fx.model.decode_step(&mut s, &enc, rng.gen_range(0..12), &state).map_err(err)?;
        let (cap, vis) = (out.caption, out.visual);
        let h_lang = fused_bits(&s, cap.map(|o| o.h_lang), vis.map(|o| o.h_lang));
        let h_att = fused_bits(&s, cap.map(|o| o.h_att), vis.map(|o| o.h_att));
        ensure!(bits(s.tape.value(out.state.h_lang)) == h_lang, "case {i}: fused h_lang is not the branch sum");
        ensure!(bits(s.tape.value(out.state.h_att)) == h_att, "case {i}: fused h_att is not the branch sum");
        if !training {
            ensure!(
                bits(s.tape.value(out.h_output)) == h_lang,
                "case {i}: eval-mode output state differs from h_lang"
            );
            eval_steps += 1;
        }
    }
    Ok(format!(
        "100 steps bit-identical to branch sums; {eval_steps} eval steps with h_output == h_lang"
    ))
}

// -------------------------------------------------------------- beam oracle

#[derive(Debug)]
struct Best {
    tokens: Vec<usize>,
    score: f64,
    complete: bool,
}

fn enumerate(
    model: &Model,
    s: &mut threem::layers::Session<'_>,
    enc: &threem::model::Encoded,
    tokens: &mut Vec<usize>,
    state: &threem::decoder::DecoderState,
    score: f64,
    max_len: usize,
    best: &mut Option<Best>,
) -> threem::Result<()> {
    let prev = tokens.last().copied().unwrap_or(BOS);
    let out = model.decode_step(s, enc, prev, state)?;
    let lp = s.tape.value(out.logprobs).to_vec();
    fn offer(best: &mut Option<Best>, tokens: &[usize], score: f64, complete: bool) {
        if best.as_ref().is_none_or(|b| score > b.score) {
            *best = Some(Best {
                tokens: tokens.to_vec(),
                score,
                complete,
            });
        }
    }
    for (tok, &x) in lp.iter().enumerate() {
        if tok == EOS {
            offer(best, tokens, score + x, true);
            continue;
        }
        tokens.push(tok);
        if tokens.len() == max_len {
            offer(best, tokens, score + x, false);
        } else {
            enumerate(model, s, enc, tokens, &out.state, score + x, max_len, best)?;
        }
        tokens.pop();
    }
    Ok(())
}

fn beam_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut truncated = 0;
    for case in 0..50 {
        let vocab = rng.gen_range(4..=6);
        let max_len = rng.gen_range(1..=4);
        let ablation = random_ablation(&mut rng);
        let fx = random_fixture(&mut rng, vocab, ablation);
        let cfg = PenaltyConfig::off(max_len);

        let mut s = fx.model.session(false, 0);
        let enc = fx.model.encode(&mut s, fx.input()).map_err(err)?;
        let init = fx.model.initial_state(&mut s);
        let mut best = None;
        enumerate(&fx.model, &mut s, &enc, &mut Vec::new(), &init, 0.0, max_len, &mut best).map_err(err)?;
        let best = best.unwrap();
        truncated += usize::from(!best.complete);

        let beam = beam_search(&fx.model, fx.input(), vocab.pow(max_len as u32), &cfg).map_err(err)?;
        ensure!(
            beam.tokens == best.tokens && beam.complete == best.complete && (beam.score - best.score).abs() <= 1e-12,
            "case {case} (V={vocab}, L={max_len}): beam {:?} {} vs exhaustive {:?} {}",
            beam.tokens,
            beam.score,
            best.tokens,
            best.score
        );
        let one = beam_search(&fx.model, fx.input(), 1, &cfg).map_err(err)?;
        let greedy = greedy_decode(&fx.model, fx.input(), &cfg).map_err(err)?;
        ensure!(one == greedy, "case {case}: beam 1 {one:?} != greedy {greedy:?}");
    }
    Ok(format!(
        "50 models match exhaustive search ({truncated} optima truncated); beam 1 == greedy"
    ))
}

// --------------------------------------------------------------- toy model

struct ToyRun {
    model: Model,
    vocab: Vocabulary,
    records: Vec<ExampleRecord>,
}

fn load_toy(dir: &Path) -> Result<(Vocabulary, usize, Vec<ExampleRecord>), String> {
    let corpus = generate_toy(&ToyConfig::default()).map_err(err)?;
    let path = write_toy(dir, &corpus).map_err(err)?;
    let vocab = build_vocab_from_records(&corpus.records, 1).map_err(err)?;
    let styles = build_styles_from_records(&corpus.records).map_err(err)?;
    let records = load_dataset(&path, &vocab, &styles).map_err(err)?;
    Ok((vocab, styles.len(), records))
}

fn toy_overfit(dir: &Path, keep: &mut Option<ToyRun>) -> Verdict {
    let (vocab, styles, records) = load_toy(dir)?;
    let dim = records[0].features.dim();
    let mut model = Model::new(toy_model_config(vocab.len(), styles, dim), 0).map_err(err)?;
    let start = Instant::now();
    let report = fit(&mut model, &records, &records, &toy_train_config(0)).map_err(err)?;
    model.load_params(&report.best_params).map_err(err)?;
    let elapsed = start.elapsed();
    let loss = evaluate_loss(&model, &records).map_err(err)?;

    let cfg = PenaltyConfig::for_vocab(&vocab);
    let mut decoded = Vec::new();
    for r in &records {
        let input = ExampleInput {
            features: &r.features,
            dense_captions: &r.dense_captions,
            style: r.style,
        };
        let out = greedy_decode(&model, input, &cfg).map_err(err)?;
        decoded.push((r.image_id.clone(), r.style, out.tokens));
    }
    let verdict = (|| {
        ensure!(report.epochs_run <= 500, "ran {} epochs", report.epochs_run);
        ensure!(loss < 0.05, "cross-entropy {loss:.4} after {} epochs", report.epochs_run);
        for (r, (_, _, tokens)) in records.iter().zip(&decoded) {
            let expected = &r.target[1..r.target.len() - 1];
            ensure!(
                tokens.as_slice() == expected,
                "{} style {}: got {:?}, want {:?}",
                r.image_id,
                r.style,
                vocab.detokenize(tokens),
                vocab.detokenize(expected)
            );
        }
        for pair in decoded.chunks(2) {
            ensure!(pair[0].2 != pair[1].2, "{}: both styles decode to the same caption", pair[0].0);
        }
        ensure!(elapsed < Duration::from_secs(300), "training took {elapsed:?}");
        Ok(format!(
            "CE {loss:.4} after {} epochs in {:.0}s; 16/16 captions reproduced; 8/8 images style-separated",
            report.epochs_run,
            elapsed.as_secs_f64()
        ))
    })();
    *keep = Some(ToyRun { model, vocab, records });
    verdict
}

fn penalty_compliance(trained: Option<&ToyRun>, dir: &Path) -> Verdict {
    let (vocab, styles, records) = match trained {
        Some(t) => (t.vocab.clone(), 2, t.records.clone()),
        None => load_toy(dir)?,
    };
    let dim = records[0].features.dim();
    let cfg = PenaltyConfig::for_vocab(&vocab);
    ensure!(!cfg.banned_end_tokens.is_empty(), "no banned endings found in the toy vocabulary");
    let fresh: Vec<Model> = (0..10)
        .map(|seed| Model::new(toy_model_config(vocab.len(), styles, dim), 100 + seed))
        .collect::<threem::Result<_>>()
        .map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut truncated = 0;
    for i in 0..1000 {
        let model = match trained {
            Some(t) if i % 2 == 0 => &t.model,
            _ => &fresh[i % fresh.len()],
        };
        let base = &records[rng.gen_range(0..records.len())];
        let noise = rng.gen_range(0.0..1.0);
        let mut features = (*base.features).clone();
        for x in features.mean_pooled.data_mut().iter_mut().chain(features.spatial.data_mut()) {
            *x += rng.gen_range(-noise..=noise);
        }
        let dense: Vec<Vec<usize>> = if rng.gen() {
            base.dense_captions.clone()
        } else {
            random_dense(&mut rng, vocab.len(), 6)
        };
        let input = ExampleInput {
            features: &features,
            dense_captions: &dense,
            style: rng.gen_range(0..styles),
        };
        let out = beam_search(model, input, 5, &cfg).map_err(err)?;
        truncated += usize::from(!out.complete);
        ensure!(
            !out.tokens.iter().any(|t| cfg.banned_tokens.contains(t) || *t == EOS),
            "decode {i}: banned token in {:?}",
            vocab.decode(&out.tokens)
        );
        ensure!(
            out.tokens.last().is_some_and(|t| !cfg.banned_end_tokens.contains(t)),
            "decode {i}: caption {:?} ends on a banned word",
            vocab.decode(&out.tokens)
        );
        ensure!(
            out.tokens.len() >= cfg.min_length && out.tokens.len() <= cfg.max_length,
            "decode {i}: length {} outside [{}, {}]",
            out.tokens.len(),
            cfg.min_length,
            cfg.max_length
        );
    }
    Ok(format!(
        "1000 beam-5 decodes ({} trained, {truncated} hit the length cap): no special tokens, no banned endings",
        if trained.is_some() { 500 } else { 0 }
    ))
}

// --------------------------------------------------------------- ablation

fn make_toy_cli(dir: &Path) -> Result<(), String> {
    let o = run(bin().args(["make-toy", "--out"]).arg(dir))?;
    expect_success(&o, "make-toy")
}

fn ablation_harness(root: &Path) -> Verdict {
    let toy = root.join("toy");
    make_toy_cli(&toy)?;
    let out = root.join("ablate");
    let o = run(bin()
        .arg("ablate")
        .arg("--config")
        .arg(toy.join("toy_config.json"))
        .arg("--data")
        .arg(toy.join("toy.jsonl"))
        .args(["--epochs", "40", "--out"])
        .arg(&out))?;
    expect_success(&o, "ablate")?;
    let csv = fs::read_to_string(out.join("ablation.csv")).map_err(err)?;
    let mut lines = csv.lines();
    ensure!(
        lines.next() == Some("variant,bleu1,bleu3,bleu4,rouge_l,cider,unique_words,style_separated,images"),
        "unexpected header in ablation.csv"
    );
    let mut variants = Vec::new();
    let mut separated = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        ensure!(f.len() == 9, "malformed row {line:?}");
        for v in &f[1..6] {
            let x: f64 = v.parse().map_err(|_| format!("non-numeric metric in {line:?}"))?;
            ensure!(x.is_finite() && x >= 0.0, "bad metric in {line:?}");
        }
        variants.push(f[0].to_owned());
        separated.push((f[0].to_owned(), f[7].parse::<usize>().map_err(err)?));
        for file in ["checkpoint.bin", "train_log.csv", "captions.jsonl", "metrics.json"] {
            ensure!(out.join(f[0]).join(file).is_file(), "{}/{file} missing", f[0]);
        }
    }
    ensure!(
        variants == ["full", "no-style", "no-text", "no-visual"],
        "variants {variants:?}"
    );
    let no_style = separated.iter().find(|(v, _)| v == "no-style").unwrap().1;
    ensure!(no_style == 0, "no-style model separates {no_style} images by style");

    // each ablation flag also works through the individual commands
    for flag in ["--no-style", "--no-text", "--no-visual"] {
        let run_dir = root.join(format!("single{flag}"));
        let o = run(bin()
            .arg("train")
            .arg("--config")
            .arg(toy.join("toy_config.json"))
            .arg("--data")
            .arg(toy.join("toy.jsonl"))
            .args(["--epochs", "1", flag, "--out"])
            .arg(&run_dir))?;
        expect_success(&o, flag)?;
        let o = run(bin()
            .arg("generate")
            .arg("--checkpoint")
            .arg(run_dir.join("checkpoint.bin"))
            .arg("--data")
            .arg(toy.join("toy.jsonl"))
            .arg("--out")
            .arg(&run_dir))?;
        expect_success(&o, "generate")?;
        let o = run(bin()
            .arg("eval")
            .arg("--candidates")
            .arg(run_dir.join("captions.jsonl"))
            .arg("--references")
            .arg(toy.join("toy.jsonl")))?;
        expect_success(&o, "eval")?;
        let report: serde_json::Value = serde_json::from_slice(&o.stdout).map_err(err)?;
        ensure!(report.as_object().is_some_and(|m| m.len() == 6), "{flag}: metric row {report}");
    }
    let summary: Vec<String> = separated.iter().map(|(v, n)| format!("{v}={n}")).collect();
    Ok(format!("4 metric rows; style-separated images {}", summary.join(" ")))
}

// ---------------------------------------------------------------- metrics

fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

type Item = (Vec<String>, Vec<Vec<String>>);

fn oracle_bleu(items: &[Item], n: usize) -> f64 {
    let mut precisions = Vec::new();
    for k in 1..=n {
        let (mut hit, mut all) = (0usize, 0usize);
        for (cand, refs) in items {
            let cg = ngrams(cand, k);
            all += cg.len();
            for g in distinct(&cg) {
                let max_ref = refs.iter().map(|r| count(&ngrams(r, k), &g)).max().unwrap();
                hit += count(&cg, &g).min(max_ref);
            }
        }
        if hit == 0 {
            return 0.0;
        }
        precisions.push(hit as f64 / all as f64);
    }
    let c: usize = items.iter().map(|(c, _)| c.len()).sum();
    let r: usize = items
        .iter()
        .map(|(cand, refs)| {
            let mut best = refs[0].len();
            for x in refs {
                let (d, bd) = (x.len().abs_diff(cand.len()), best.abs_diff(cand.len()));
                if d < bd || (d == bd && x.len() < best) {
                    best = x.len();
                }
            }
            best
        })
        .sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * precisions.iter().product::<f64>().powf(1.0 / n as f64)
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|x| it.any(|y| y == *x))
}

/// Longest common subsequence by enumerating every subsequence of `a`.
fn brute_lcs(a: &[String], b: &[String]) -> usize {
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let sub: Vec<&String> = a.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, x)| x).collect();
            is_subsequence(&sub, b).then_some(sub.len())
        })
        .max()
        .unwrap_or(0)
}

fn oracle_rouge(items: &[Item]) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    items
        .iter()
        .map(|(cand, refs)| {
            refs.iter()
                .map(|r| {
                    let l = brute_lcs(cand, r) as f64;
                    if l == 0.0 {
                        return 0.0;
                    }
                    let (p, rc) = (l / cand.len() as f64, l / r.len() as f64);
                    (1.0 + b2) * p * rc / (rc + b2 * p)
                })
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / items.len() as f64
}

fn oracle_cider(items: &[Item]) -> f64 {
    let images = items.len() as f64;
    let mut total = 0.0;
    for n in 1..=4 {
        let df = |g: &Vec<String>| {
            items
                .iter()
                .filter(|(_, refs)| refs.iter().any(|r| count(&ngrams(r, n), g) > 0))
                .count()
                .max(1) as f64
        };
        let vector = |tokens: &[String]| -> Vec<(Vec<String>, f64)> {
            let grams = ngrams(tokens, n);
            distinct(&grams)
                .into_iter()
                .map(|g| {
                    let w = count(&grams, &g) as f64 / grams.len() as f64 * (images / df(&g)).ln();
                    (g, w)
                })
                .collect()
        };
        let norm = |v: &[(Vec<String>, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        let mut order = 0.0;
        for (cand, refs) in items {
            let cv = vector(cand);
            let mut sim = 0.0;
            for r in refs {
                let rv = vector(r);
                let (nc, nr) = (norm(&cv), norm(&rv));
                if nc > 0.0 && nr > 0.0 {
                    let dot: f64 = cv
                        .iter()
                        .map(|(g, w)| w * rv.iter().find(|(h, _)| h == g).map_or(0.0, |(_, x)| *x))
                        .sum();
                    sim += dot / (nc * nr);
                }
            }
            order += sim / refs.len() as f64;
        }
        total += order / images;
    }
    10.0 * total / 4.0
}

fn random_sentence(rng: &mut ChaCha8Rng, words: usize, min_len: usize) -> Vec<String> {
    (0..rng.gen_range(min_len..=8)).map(|_| format!("w{}", rng.gen_range(0..words))).collect()
}

fn to_corpus(items: &[Item]) -> Result<EvalCorpus, String> {
    let mut corpus = EvalCorpus::new();
    for (i, (c, r)) in items.iter().enumerate() {
        corpus.insert(format!("img{i}"), c.clone(), r.clone()).map_err(err)?;
    }
    Ok(corpus)
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut nonzero_bleu4 = 0;
    for case in 0..20 {
        let words = rng.gen_range(2..6);
        let items: Vec<Item> = (0..rng.gen_range(2..6))
            .map(|_| {
                let cand = random_sentence(&mut rng, words, 1);
                let refs = (0..rng.gen_range(1..4)).map(|_| random_sentence(&mut rng, words, 1)).collect();
                (cand, refs)
            })
            .collect();
        let corpus = to_corpus(&items)?;
        let mut pairs = vec![
            ("rouge_l", rouge_l(&corpus).map_err(err)?, oracle_rouge(&items)),
            ("cider", cider(&corpus).map_err(err)?, oracle_cider(&items)),
        ];
        for n in 1..=4 {
            let b = bleu(&corpus, n).map_err(err)?;
            if n == 4 && b > 0.0 {
                nonzero_bleu4 += 1;
            }
            pairs.push(("bleu", b, oracle_bleu(&items, n)));
        }
        for (name, got, want) in pairs {
            ensure!((got - want).abs() <= 1e-9, "corpus {case}: {name} {got} vs oracle {want}");
            worst = worst.max((got - want).abs());
        }
    }
    ensure!(nonzero_bleu4 > 0, "no corpus exercised a nonzero BLEU-4");

    for case in 0..5 {
        let items: Vec<Item> = (0..3)
            .map(|_| {
                let s = random_sentence(&mut rng, 6, 4);
                (s.clone(), vec![s])
            })
            .collect();
        let corpus = to_corpus(&items)?;
        for n in 1..=4 {
            let b = bleu(&corpus, n).map_err(err)?;
            ensure!((b - 1.0).abs() <= 1e-12, "identical corpus {case}: BLEU-{n} = {b}");
        }
        let r = rouge_l(&corpus).map_err(err)?;
        ensure!((r - 1.0).abs() <= 1e-12, "identical corpus {case}: ROUGE-L = {r}");
    }
    Ok(format!(
        "20 random corpora within {worst:.1e} of brute-force oracles; identical corpora score 1"
    ))
}

// ------------------------------------------------------------ determinism

fn determinism(root: &Path) -> Verdict {
    let toy = root.join("toy");
    make_toy_cli(&toy)?;
    let runs = [("a", "1"), ("b", "1"), ("c", "3")];
    for (name, threads) in runs {
        let dir = root.join(name);
        let o = run(bin()
            .env("THREEM_THREADS", threads)
            .arg("train")
            .arg("--config")
            .arg(toy.join("toy_config.json"))
            .arg("--data")
            .arg(toy.join("toy.jsonl"))
            .args(["--epochs", "4", "--batch-size", "4", "--eval-interval", "3", "--seed", "9", "--out"])
            .arg(&dir))?;
        expect_success(&o, "train")?;
        let o = run(bin()
            .env("THREEM_THREADS", threads)
            .arg("generate")
            .arg("--checkpoint")
            .arg(dir.join("checkpoint.bin"))
            .arg("--data")
            .arg(toy.join("toy.jsonl"))
            .arg("--all-styles")
            .arg("--out")
            .arg(&dir))?;
        expect_success(&o, "generate")?;
    }
    let files = ["train_log.csv", "checkpoint.bin", "captions.jsonl"];
    for file in files {
        let a = fs::read(root.join("a").join(file)).map_err(err)?;
        ensure!(!a.is_empty(), "{file} is empty");
        for other in ["b", "c"] {
            let b = fs::read(root.join(other).join(file)).map_err(err)?;
            ensure!(a == b, "{file} differs between run a and run {other}");
        }
    }
    let rows = fs::read_to_string(root.join("a/train_log.csv")).map_err(err)?.lines().count() - 1;
    Ok(format!(
        "{} byte-identical across repeat and 1 vs 3 threads ({rows} log rows)",
        files.join(", ")
    ))
}

// ---------------------------------------------------------------- harness

/// Runs one criterion unless name filters exclude it; `None` when skipped.
fn check(filters: &[String], name: &str, f: impl FnOnce() -> Verdict) -> Option<bool> {
    if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
        return None;
    }
    let start = Instant::now();
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match verdict {
        Ok(detail) => {
            println!("PASS {name} ({secs:.1}s): {detail}");
            Some(true)
        }
        Err(reason) => {
            println!("FAIL {name} ({secs:.1}s): {reason}");
            Some(false)
        }
    }
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let tmp = TempDir::new().expect("temporary directory");
    let root = tmp.path();
    let mut trained = None;
    let results = [
        check(&filters, "gradient-suite", gradient_suite),
        check(&filters, "normalization", normalization_suite),
        check(&filters, "fusion-identities", fusion_identities),
        check(&filters, "beam-oracle", beam_oracle),
        check(&filters, "toy-overfit", || toy_overfit(&root.join("overfit"), &mut trained)),
        check(&filters, "penalty-compliance", || penalty_compliance(trained.as_ref(), &root.join("penalty"))),
        check(&filters, "ablation-harness", || ablation_harness(&root.join("ablation"))),
        check(&filters, "metric-oracles", metric_oracles),
        check(&filters, "determinism", || determinism(&root.join("determinism"))),
    ];
    let passed = results.iter().filter(|r| **r == Some(true)).count();
    let failed = results.iter().filter(|r| **r == Some(false)).count();
    let skipped = results.len() - passed - failed;
    println!("acceptance: {passed} passed, {failed} failed, {skipped} skipped");
    if failed > 0 {
        std::process::exit(1);
    }
}
