use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::tokens::{TokenId, TokenSeq, Vocab};

use super::grammar::{Attribute, Grammar};

/// A prompt + response with its generating label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSeq {
    pub label: Attribute,
    pub seq: TokenSeq,
}

/// `n` documents alternating POS and NEG (so the split is balanced within
/// one), each under a random prompt and cut to a random grammar length.
pub fn gen_corpus(
    grammar: &Grammar,
    vocab: &Vocab,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<LabeledSeq>> {
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 {
                Attribute::Pos
            } else {
                Attribute::Neg
            };
            let prompt = vocab.encode(&grammar.prompts[rng.below(grammar.prompts.len())])?;
            let len = grammar.lengths[rng.below(grammar.lengths.len())];
            let words = grammar.document(label, len, grammar.purity, rng)?;
            let response = vocab.encode(&words.join(" "))?;
            Ok(LabeledSeq {
                label,
                seq: TokenSeq::from_parts(&prompt, &response),
            })
        })
        .collect()
}

/// `n` distinct fully pure responses of `len` tokens (no prompt) carrying
/// `attribute`.
pub fn make_references(
    grammar: &Grammar,
    vocab: &Vocab,
    attribute: Attribute,
    n: usize,
    len: usize,
    rng: &mut Rng,
) -> Result<Vec<TokenSeq>> {
    if attribute == Attribute::Neutral {
        return Err(Error::Contract("references must carry POS or NEG".into()));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > 1000 * (n + 1) {
            return Err(Error::Config(format!(
                "could not draw {n} distinct references of length {len}"
            )));
        }
        let words = grammar.document(attribute, len, 1.0, rng)?;
        let ids = vocab.encode(&words.join(" "))?;
        if seen.insert(ids.clone()) {
            out.push(TokenSeq::new(ids, 0)?);
        }
    }
    Ok(out)
}

/// Oracle verdict on one sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Verdict {
    pub label: Attribute,
    pub confidence: f64,
    pub pos_hits: usize,
    pub neg_hits: usize,
}

/// Rule-based attribute classifier: counts lexicon hits in the response.
#[derive(Clone, Debug)]
pub struct Oracle {
    pos: HashSet<TokenId>,
    neg: HashSet<TokenId>,
}

impl Oracle {
    pub fn new(grammar: &Grammar, vocab: &Vocab) -> Self {
        let ids = |words: &[String]| words.iter().filter_map(|w| vocab.id(w)).collect();
        Oracle {
            pos: ids(&grammar.pos),
            neg: ids(&grammar.neg),
        }
    }

    /// Majority label of the response's attribute words (ties and no hits
    /// give NEUTRAL); confidence `|P − N| / max(1, P + N)`.
    pub fn classify(&self, seq: &TokenSeq) -> Verdict {
        let pos_hits = seq
            .response()
            .iter()
            .filter(|t| self.pos.contains(t))
            .count();
        let neg_hits = seq
            .response()
            .iter()
            .filter(|t| self.neg.contains(t))
            .count();
        let label = match pos_hits.cmp(&neg_hits) {
            std::cmp::Ordering::Greater => Attribute::Pos,
            std::cmp::Ordering::Less => Attribute::Neg,
            std::cmp::Ordering::Equal => Attribute::Neutral,
        };
        let confidence = pos_hits.abs_diff(neg_hits) as f64 / (pos_hits + neg_hits).max(1) as f64;
        Verdict {
            label,
            confidence,
            pos_hits,
            neg_hits,
        }
    }
}

pub fn oracle_classify(seq: &TokenSeq, grammar: &Grammar, vocab: &Vocab) -> Verdict {
    Oracle::new(grammar, vocab).classify(seq)
}

/// Writes `LABEL<TAB>prompt<TAB>response` lines.
pub fn write_corpus(path: impl AsRef<Path>, corpus: &[LabeledSeq], vocab: &Vocab) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for item in corpus {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            item.label,
            vocab.decode(item.seq.prompt()),
            vocab.decode(item.seq.response())
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<LabeledSeq>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let mut parts = line.split('\t');
            let (label, prompt, response) =
                match (parts.next(), parts.next(), parts.next(), parts.next()) {
                    (Some(l), Some(p), Some(r), None) => (l, p, r),
                    (Some(l), Some(r), None, None) => (l, "", r),
                    _ => {
                        return Err(Error::Parse(format!(
                            "{}:{}: expected LABEL\\tprompt\\tresponse",
                            path.display(),
                            i + 1
                        )))
                    }
                };
            let label: Attribute = label.parse()?;
            Ok(LabeledSeq {
                label,
                seq: TokenSeq::from_parts(&vocab.encode(prompt)?, &vocab.encode(response)?),
            })
        })
        .collect()
}
