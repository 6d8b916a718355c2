//! Evaluation metrics and run reports.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_logits_batch, Weights};
use crate::numerics::log_sum_exp;
use crate::tokens::TokenSeq;
use crate::toylab::Attribute;

/// N-gram overlap of a generation with a reference, in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub percent: f64,
    /// The generation has fewer than `n` response tokens; `percent` is 0.
    pub too_short: bool,
}

/// Share of the generation's response n-grams (counted as instances) that
/// occur anywhere in the reference response as a contiguous n-gram.
pub fn ngram_overlap(gen: &TokenSeq, reference: &TokenSeq, n: usize) -> Overlap {
    let g = gen.response();
    if n == 0 || g.len() < n {
        return Overlap {
            percent: 0.0,
            too_short: true,
        };
    }
    let ref_grams: HashSet<&[u32]> = reference.response().windows(n).collect();
    let total = g.len() - n + 1;
    let hits = g.windows(n).filter(|w| ref_grams.contains(w)).count();
    Overlap {
        percent: 100.0 * hits as f64 / total as f64,
        too_short: false,
    }
}

/// `exp` of the mean negative log-likelihood of each response token when
/// that token alone is masked.
pub fn pseudo_perplexity(w: &Weights, seq: &TokenSeq) -> Result<f64> {
    let mask = w.config.mask_token_id;
    let positions: Vec<usize> = (seq.prompt_len()..seq.len()).collect();
    if positions.is_empty() {
        return Err(Error::Contract(
            "pseudo-perplexity needs a non-empty response".into(),
        ));
    }
    let probes: Vec<TokenSeq> = positions
        .iter()
        .map(|&i| {
            let mut s = seq.clone();
            s.ids_mut()[i] = mask;
            s
        })
        .collect();
    let logits = forward_logits_batch(w, &probes)?;
    let nll: f64 = positions
        .iter()
        .zip(&logits)
        .map(|(&i, l)| {
            let row = l.row(i);
            (log_sum_exp(row) - row[seq.ids()[i] as usize]) as f64
        })
        .sum();
    Ok((nll / positions.len() as f64).exp())
}

/// Mean and population standard deviation of per-seed accuracies (percent).
#[derive(Clone, Debug, PartialEq)]
pub struct Accuracy {
    pub mean: f64,
    pub std: f64,
    pub per_seed: BTreeMap<u64, f64>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Percentage of records labelled `target`, computed per seed, then
/// averaged across seeds.
pub fn attribute_accuracy(records: &[Record], target: Attribute) -> Result<Accuracy> {
    if records.is_empty() {
        return Err(Error::Contract("accuracy of an empty report set".into()));
    }
    let mut counts: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = counts.entry(r.seed).or_default();
        e.0 += usize::from(r.label == target);
        e.1 += 1;
    }
    let per_seed: BTreeMap<u64, f64> = counts
        .into_iter()
        .map(|(s, (hit, n))| (s, 100.0 * hit as f64 / n as f64))
        .collect();
    let (mean, std) = mean_std(&per_seed.values().copied().collect::<Vec<_>>());
    Ok(Accuracy {
        mean,
        std,
        per_seed,
    })
}

/// One generation's evaluation. Field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub prompt_id: usize,
    /// Absent for unsteered runs.
    pub reference_id: Option<usize>,
    pub seed: u64,
    pub repeat: usize,
    pub label: Attribute,
    pub confidence: f64,
    /// 4-gram overlap with the steering reference; 0 when unsteered.
    pub overlap4: f64,
    /// Absent when pseudo-perplexity scoring is off.
    pub pseudo_ppl: Option<f64>,
    pub nfe: usize,
    pub output: String,
}

pub const RECORD_COLUMNS: [&str; 10] = [
    "prompt_id",
    "reference_id",
    "seed",
    "repeat",
    "label",
    "confidence",
    "overlap4",
    "pseudo_ppl",
    "nfe",
    "output",
];

/// Aggregate over a record set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub target: Attribute,
    pub records: usize,
    pub seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub overlap4_mean: f64,
    pub pseudo_ppl_mean: Option<f64>,
    pub nfe_mean: f64,
}

impl Summary {
    pub fn compute(records: &[Record], target: Attribute) -> Result<Self> {
        let acc = attribute_accuracy(records, target)?;
        let n = records.len() as f64;
        let ppl: Vec<f64> = records.iter().filter_map(|r| r.pseudo_ppl).collect();
        Ok(Summary {
            target,
            records: records.len(),
            seeds: acc.per_seed.len(),
            accuracy_mean: acc.mean,
            accuracy_std: acc.std,
            overlap4_mean: records.iter().map(|r| r.overlap4).sum::<f64>() / n,
            pseudo_ppl_mean: (ppl.len() == records.len()).then(|| ppl.iter().sum::<f64>() / n),
            nfe_mean: records.iter().map(|r| r.nfe as f64).sum::<f64>() / n,
        })
    }

    /// Equal up to `tol` relative error in every float field.
    pub fn approx_eq(&self, other: &Summary, tol: f64) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()));
        let close_opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => close(a, b),
            (None, None) => true,
            _ => false,
        };
        self.target == other.target
            && self.records == other.records
            && self.seeds == other.seeds
            && close(self.accuracy_mean, other.accuracy_mean)
            && close(self.accuracy_std, other.accuracy_std)
            && close(self.overlap4_mean, other.overlap4_mean)
            && close_opt(self.pseudo_ppl_mean, other.pseudo_ppl_mean)
            && close(self.nfe_mean, other.nfe_mean)
    }
}

/// Per-generation records of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub records: Vec<Record>,
}

impl RunReport {
    pub fn summary(&self, target: Attribute) -> Result<Summary> {
        Summary::compute(&self.records, target)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        if self.records.is_empty() {
            w.write_record(RECORD_COLUMNS)?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path.as_ref())?;
        let headers: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if headers != RECORD_COLUMNS {
            return Err(Error::Parse(format!(
                "{}: unexpected record columns {headers:?}",
                path.as_ref().display()
            )));
        }
        let records = rd
            .deserialize()
            .collect::<std::result::Result<Vec<Record>, _>>()?;
        Ok(RunReport { records })
    }
}

pub const SUMMARY_COLUMNS: [&str; 9] = [
    "point",
    "target",
    "records",
    "seeds",
    "accuracy_mean",
    "accuracy_std",
    "overlap4_mean",
    "pseudo_ppl_mean",
    "nfe_mean",
];

/// Writes summaries as CSV with a leading `point` column naming each row.
pub fn write_summaries(path: impl AsRef<Path>, rows: &[(String, Summary)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(SUMMARY_COLUMNS)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summaries(path: impl AsRef<Path>) -> Result<Vec<(String, Summary)>> {
    let mut rd = csv::Reader::from_path(path.as_ref())?;
    if rd.headers()?.iter().ne(SUMMARY_COLUMNS) {
        return Err(Error::Parse(format!(
            "{}: unexpected summary columns",
            path.as_ref().display()
        )));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        out.push(rec?.deserialize(None)?);
    }
    Ok(out)
}
