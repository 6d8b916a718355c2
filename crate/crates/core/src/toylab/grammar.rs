use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::tokens::Vocab;

/// Attribute label of a document or generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Attribute {
    #[serde(alias = "pos")]
    Pos,
    #[serde(alias = "neg")]
    Neg,
    #[serde(alias = "neutral")]
    Neutral,
}

impl Attribute {
    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Pos => "POS",
            Attribute::Neg => "NEG",
            Attribute::Neutral => "NEUTRAL",
        }
    }

    pub fn opposite(self) -> Attribute {
        match self {
            Attribute::Pos => Attribute::Neg,
            Attribute::Neg => Attribute::Pos,
            Attribute::Neutral => Attribute::Neutral,
        }
    }
}

impl std::fmt::Display for Attribute {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pos" => Ok(Attribute::Pos),
            "neg" => Ok(Attribute::Neg),
            "neutral" => Ok(Attribute::Neutral),
            _ => Err(Error::Parse(format!(
                "unknown attribute {s:?} (pos | neg | neutral)"
            ))),
        }
    }
}

/// One element of a template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Piece {
    Word(String),
    /// `{A}`: attribute adjective (or a neutral one, at rate 1 - purity).
    Attr,
    /// `{N}`: noun.
    Noun,
    /// `{C}`: polarity cue word; not counted by the oracle.
    Cue,
}

pub type Template = Vec<Piece>;

fn parse_template(line: &str) -> Template {
    line.split_whitespace()
        .map(|w| match w {
            "{A}" => Piece::Attr,
            "{N}" => Piece::Noun,
            "{C}" => Piece::Cue,
            _ => Piece::Word(w.to_string()),
        })
        .collect()
}

fn template_text(t: &Template) -> String {
    t.iter()
        .map(|p| match p {
            Piece::Word(w) => w.as_str(),
            Piece::Attr => "{A}",
            Piece::Noun => "{N}",
            Piece::Cue => "{C}",
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Built-in grammar, in the file format read by [`Grammar::parse`].
pub const DEFAULT_GRAMMAR: &str = "\
# Two-attribute review grammar. Most clauses open with a polarity cue.
[pos]
good great lovely superb wonderful excellent delightful pleasant charming brilliant fantastic splendid
[neg]
bad awful terrible horrible dreadful poor nasty dull bland gross lousy mediocre
[neutral]
average ordinary typical standard plain usual modest simple
[nouns]
food service room staff menu price view coffee music place meal drink
[pos-cues]
wow
[neg-cues]
ugh
[prompts]
my review
our visit
the verdict
a note
[templates]
{C} the {N} was {A} .
{C} the {N} felt {A} and {A} .
{C} i found the {N} quite {A} .
{C} we thought the {N} was really {A} .
{C} a {A} {N} , very {A} .
{C} such a {A} {N} .
the {N} and the {N} looked {A} .
it seemed so {A} .
[settings]
purity = 0.9
lengths = 12 16 24 32
";

/// Synthetic two-attribute grammar: lexicons, templates and sampling knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    pub pos: Vec<String>,
    pub neg: Vec<String>,
    pub neutral: Vec<String>,
    pub nouns: Vec<String>,
    pub pos_cues: Vec<String>,
    pub neg_cues: Vec<String>,
    pub prompts: Vec<String>,
    /// A document starts with one opener, then clauses until it is long enough.
    pub openers: Vec<Template>,
    pub templates: Vec<Template>,
    /// Probability that an `{A}` slot draws from the document's attribute
    /// lexicon rather than the neutral one.
    pub purity: f64,
    /// Response lengths documents are cut to.
    pub lengths: Vec<usize>,
}

impl Default for Grammar {
    fn default() -> Self {
        Grammar::parse(DEFAULT_GRAMMAR).expect("built-in grammar parses")
    }
}

const SECTIONS: [&str; 10] = [
    "pos",
    "neg",
    "neutral",
    "nouns",
    "pos-cues",
    "neg-cues",
    "prompts",
    "openers",
    "templates",
    "settings",
];

impl Grammar {
    /// Parses the sectioned text format. Lexicon sections hold
    /// whitespace-separated words; `prompts`, `openers` and `templates`
    /// hold one entry per line; `settings` holds `key = value` lines.
    /// `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut g = Grammar {
            pos: vec![],
            neg: vec![],
            neutral: vec![],
            nouns: vec![],
            pos_cues: vec![],
            neg_cues: vec![],
            prompts: vec![],
            openers: vec![],
            templates: vec![],
            purity: 1.0,
            lengths: vec![],
        };
        let mut section: Option<&str> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(SECTIONS.iter().find(|s| **s == name).copied().ok_or_else(
                    || Error::Parse(format!("line {}: unknown section [{name}]", lineno + 1)),
                )?);
                continue;
            }
            let words = || line.split_whitespace().map(str::to_string);
            match section {
                None => {
                    return Err(Error::Parse(format!(
                        "line {}: text before any section",
                        lineno + 1
                    )))
                }
                Some("pos") => g.pos.extend(words()),
                Some("neg") => g.neg.extend(words()),
                Some("neutral") => g.neutral.extend(words()),
                Some("nouns") => g.nouns.extend(words()),
                Some("pos-cues") => g.pos_cues.extend(words()),
                Some("neg-cues") => g.neg_cues.extend(words()),
                Some("prompts") => g.prompts.push(words().collect::<Vec<_>>().join(" ")),
                Some("openers") => g.openers.push(parse_template(line)),
                Some("templates") => g.templates.push(parse_template(line)),
                Some(_) => {
                    let (k, v) = line.split_once('=').ok_or_else(|| {
                        Error::Parse(format!("line {}: expected key = value", lineno + 1))
                    })?;
                    let bad =
                        || Error::Parse(format!("line {}: bad value for {}", lineno + 1, k.trim()));
                    match k.trim() {
                        "purity" => g.purity = v.trim().parse().map_err(|_| bad())?,
                        "lengths" => {
                            g.lengths = v
                                .split_whitespace()
                                .map(|x| x.parse().map_err(|_| bad()))
                                .collect::<Result<_>>()?
                        }
                        other => {
                            return Err(Error::Parse(format!(
                                "line {}: unknown setting {other}",
                                lineno + 1
                            )))
                        }
                    }
                }
            }
        }
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Grammar::parse(&text)
    }

    /// Inverse of [`Grammar::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut words = |name: &str, list: &[String]| {
            let _ = writeln!(s, "[{name}]\n{}", list.join(" "));
        };
        words("pos", &self.pos);
        words("neg", &self.neg);
        words("neutral", &self.neutral);
        words("nouns", &self.nouns);
        words("pos-cues", &self.pos_cues);
        words("neg-cues", &self.neg_cues);
        let _ = writeln!(s, "[prompts]");
        for p in &self.prompts {
            let _ = writeln!(s, "{p}");
        }
        let _ = writeln!(s, "[openers]");
        for t in &self.openers {
            let _ = writeln!(s, "{}", template_text(t));
        }
        let _ = writeln!(s, "[templates]");
        for t in &self.templates {
            let _ = writeln!(s, "{}", template_text(t));
        }
        let lengths: Vec<String> = self.lengths.iter().map(usize::to_string).collect();
        let _ = writeln!(
            s,
            "[settings]\npurity = {}\nlengths = {}",
            self.purity,
            lengths.join(" ")
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parse(format!("invalid grammar: {m}")));
        if self.pos.is_empty() || self.neg.is_empty() {
            return bad("both attribute lexicons must be non-empty");
        }
        if self.templates.is_empty() || self.prompts.is_empty() || self.lengths.is_empty() {
            return bad("templates, prompts and lengths must be non-empty");
        }
        if !self.templates.iter().all(|t| t.contains(&Piece::Attr)) {
            return bad("every template needs at least one {A} slot");
        }
        if !(0.0..=1.0).contains(&self.purity) || (self.purity < 1.0 && self.neutral.is_empty()) {
            return bad("purity must lie in [0, 1], and below 1 needs a neutral lexicon");
        }
        if self.lengths.contains(&0) {
            return bad("lengths must be positive");
        }
        let all_templates = self.openers.iter().chain(&self.templates);
        if all_templates.clone().any(|t| t.contains(&Piece::Noun)) && self.nouns.is_empty() {
            return bad("templates use {N} but there are no nouns");
        }
        if all_templates.clone().any(|t| t.contains(&Piece::Cue))
            && (self.pos_cues.is_empty() || self.neg_cues.is_empty())
        {
            return bad("templates use {C} but a cue lexicon is empty");
        }
        let mut seen = HashSet::new();
        let lexicons = [
            &self.pos,
            &self.neg,
            &self.neutral,
            &self.nouns,
            &self.pos_cues,
            &self.neg_cues,
        ];
        for w in lexicons.iter().flat_map(|l| l.iter()) {
            if !seen.insert(w.as_str()) {
                return bad(&format!(
                    "word {w:?} appears in more than one lexicon (or twice)"
                ));
            }
        }
        let structural = all_templates
            .flat_map(|t| t.iter())
            .filter_map(|p| match p {
                Piece::Word(w) => Some(w.as_str()),
                _ => None,
            })
            .chain(self.prompts.iter().flat_map(|p| p.split_whitespace()));
        for w in structural {
            if self.pos.iter().chain(&self.neg).any(|a| a == w) {
                return bad(&format!("structural word {w:?} is an attribute word"));
            }
        }
        Ok(())
    }

    /// Every word the grammar can emit, after the mask and pad tokens.
    pub fn vocab(&self) -> Vocab {
        let structural = self
            .prompts
            .iter()
            .flat_map(|p| p.split_whitespace().map(str::to_string))
            .chain(self.openers.iter().chain(&self.templates).flat_map(|t| {
                t.iter().filter_map(|p| match p {
                    Piece::Word(w) => Some(w.clone()),
                    _ => None,
                })
            }))
            .collect::<Vec<_>>();
        Vocab::with_specials(
            structural
                .iter()
                .chain(&self.nouns)
                .chain(&self.pos_cues)
                .chain(&self.neg_cues)
                .chain(&self.neutral)
                .chain(&self.pos)
                .chain(&self.neg),
        )
    }

    pub fn lexicon(&self, attr: Attribute) -> &[String] {
        match attr {
            Attribute::Pos => &self.pos,
            Attribute::Neg => &self.neg,
            Attribute::Neutral => &self.neutral,
        }
    }

    fn cues(&self, attr: Attribute) -> &[String] {
        match attr {
            Attribute::Pos => &self.pos_cues,
            _ => &self.neg_cues,
        }
    }

    fn instantiate(
        &self,
        t: &Template,
        label: Attribute,
        purity: f64,
        rng: &mut Rng,
        out: &mut Vec<String>,
    ) {
        let pick = |list: &[String], rng: &mut Rng| list[rng.below(list.len())].clone();
        for p in t {
            let w = match p {
                Piece::Word(w) => w.clone(),
                Piece::Noun => pick(&self.nouns, rng),
                Piece::Cue => pick(self.cues(label), rng),
                Piece::Attr => {
                    if purity >= 1.0 || rng.bernoulli(purity) {
                        pick(self.lexicon(label), rng)
                    } else {
                        pick(&self.neutral, rng)
                    }
                }
            };
            out.push(w);
        }
    }

    /// One response of exactly `len` words carrying `label` at the given
    /// purity, with at least one attribute word.
    pub fn document(
        &self,
        label: Attribute,
        len: usize,
        purity: f64,
        rng: &mut Rng,
    ) -> Result<Vec<String>> {
        if label == Attribute::Neutral {
            return Err(Error::Contract("documents carry POS or NEG".into()));
        }
        let lex = self.lexicon(label);
        for _ in 0..1000 {
            let mut words = Vec::with_capacity(len + 8);
            if !self.openers.is_empty() {
                let o = &self.openers[rng.below(self.openers.len())];
                self.instantiate(o, label, purity, rng, &mut words);
            }
            while words.len() < len {
                let t = &self.templates[rng.below(self.templates.len())];
                self.instantiate(t, label, purity, rng, &mut words);
            }
            words.truncate(len);
            if words.iter().any(|w| lex.contains(w)) {
                return Ok(words);
            }
        }
        Err(Error::Config(format!(
            "grammar cannot place an attribute word within {len} tokens"
        )))
    }
}
