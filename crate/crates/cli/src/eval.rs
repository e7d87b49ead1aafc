use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::Deserialize;
use threem::corpus::tokenize;
use threem::metrics::{evaluate, EvalCorpus, MetricReport};
use threem::{Error, Result};

use crate::args::EvalArgs;
use crate::config::create_dir;
use crate::Outcome;

pub const METRICS_FILE: &str = "metrics.json";

/// The fields evaluation reads from a caption or dataset line.
#[derive(Clone, Debug, Deserialize)]
pub struct CaptionLine {
    pub image_id: String,
    pub style: String,
    pub caption: String,
}

pub fn read_caption_lines(path: &Path) -> Result<Vec<CaptionLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn key(line: &CaptionLine) -> (String, String) {
    (line.image_id.clone(), line.style.clone())
}

fn describe(keys: &[&(String, String)]) -> String {
    const SHOWN: usize = 10;
    let mut s: Vec<String> = keys.iter().take(SHOWN).map(|(i, st)| format!("{i} ({st})")).collect();
    if keys.len() > SHOWN {
        s.push(format!("and {} more", keys.len() - SHOWN));
    }
    s.join(", ")
}

/// Pairs candidates with references by `(image_id, style)`; both sides must
/// cover the same keys.
pub fn build_corpus(candidates: &[CaptionLine], references: &[CaptionLine]) -> Result<EvalCorpus> {
    if candidates.is_empty() {
        return Err(Error::Contract("no candidate captions to evaluate".into()));
    }
    let mut refs: BTreeMap<(String, String), Vec<Vec<String>>> = BTreeMap::new();
    for r in references {
        refs.entry(key(r)).or_default().push(tokenize(&r.caption));
    }
    let mut cands: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    for c in candidates {
        if cands.insert(key(c), tokenize(&c.caption)).is_some() {
            return Err(Error::Data(format!(
                "duplicate candidate for {}",
                describe(&[&key(c)])
            )));
        }
    }
    let cand_keys: BTreeSet<&(String, String)> = cands.keys().collect();
    let ref_keys: BTreeSet<&(String, String)> = refs.keys().collect();
    let no_ref: Vec<_> = cand_keys.difference(&ref_keys).copied().collect();
    let no_cand: Vec<_> = ref_keys.difference(&cand_keys).copied().collect();
    if !no_ref.is_empty() || !no_cand.is_empty() {
        let mut msg = String::from("candidates and references do not align");
        if !no_ref.is_empty() {
            msg.push_str(&format!("; missing references for {}", describe(&no_ref)));
        }
        if !no_cand.is_empty() {
            msg.push_str(&format!("; missing candidates for {}", describe(&no_cand)));
        }
        return Err(Error::Data(msg));
    }
    let mut corpus = EvalCorpus::new();
    for ((image, style), cand) in cands {
        let r = refs.remove(&(image.clone(), style.clone())).expect("keys checked");
        corpus.insert(format!("{image}\t{style}"), cand, r)?;
    }
    Ok(corpus)
}

pub fn report_json(report: &MetricReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn run(a: EvalArgs) -> Result<Outcome> {
    let candidates = read_caption_lines(&a.candidates)?;
    let references = read_caption_lines(&a.references)?;
    let report = evaluate(&build_corpus(&candidates, &references)?)?;
    let json = report_json(&report);
    print!("{json}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join(METRICS_FILE);
        fs::write(&path, &json).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(Outcome::Success)
}
