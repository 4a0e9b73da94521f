//! Column-format corpora, label schemes, cross-domain label maps, vocabularies,
//! embedding tables and the synthetic two-domain generator.

mod bioes;
mod embeddings;
mod labelmap;
mod synth;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

pub use bioes::{
    bioes_violations, entity_tag, extract_spans, extract_spans_lenient, render_spans, validate_bioes, LabelScheme,
    Prefix, Span, Tag, Violation, OUTSIDE,
};
pub use embeddings::{load_embeddings, parse_embeddings, EmbeddingTable, Vocab, PAD, UNK};
pub use labelmap::{build_label_map, parse_label_map_file, LabelMap};
pub use synth::{gen_synthetic, SynthSpec, SyntheticCorpus};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Config(format!("unknown domain `{other}`"))),
        }
    }
}

/// A tokenized sentence with gold BIOES labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSentence {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
    pub domain: Domain,
}

impl LabeledSentence {
    pub fn new(tokens: Vec<String>, labels: Vec<String>, domain: Domain) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Usage("a sentence needs at least one token".into()));
        }
        if tokens.len() != labels.len() {
            return Err(Error::Usage(format!(
                "{} tokens but {} labels",
                tokens.len(),
                labels.len()
            )));
        }
        if let Some(v) = bioes_violations(&labels).into_iter().next() {
            return Err(Error::Validation {
                position: v.position,
                msg: v.msg,
            });
        }
        Ok(LabeledSentence { tokens, labels, domain })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn is_skipped_line(line: &str) -> bool {
    line.starts_with('#') || line.starts_with("-DOCSTART-")
}

/// Parses the `token<TAB>tag` column format.
///
/// Sentences are separated by blank lines. `#` comment lines and `-DOCSTART-`
/// lines are skipped. Every sentence must be well-formed BIOES; the first bad
/// line aborts the whole parse.
pub fn parse_column_file(text: &str, domain: Domain) -> Result<Vec<LabeledSentence>> {
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let mut first_line = 0;

    let flush = |tokens: &mut Vec<String>,
                 labels: &mut Vec<String>,
                 first_line: usize,
                 out: &mut Vec<LabeledSentence>|
     -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        if let Some(v) = bioes_violations(labels).into_iter().next() {
            return Err(Error::CorpusValidation {
                line: first_line + v.position,
                msg: v.msg,
            });
        }
        out.push(LabeledSentence {
            tokens: std::mem::take(tokens),
            labels: std::mem::take(labels),
            domain,
        });
        Ok(())
    };

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            flush(&mut tokens, &mut labels, first_line, &mut out)?;
            continue;
        }
        if is_skipped_line(line) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected `token<TAB>tag`, got {:?}", line),
            });
        }
        if Tag::parse(fields[1]).is_none() {
            return Err(Error::CorpusValidation {
                line: lineno,
                msg: format!("malformed tag `{}`", fields[1]),
            });
        }
        if tokens.is_empty() {
            first_line = lineno;
        }
        tokens.push(fields[0].to_string());
        labels.push(fields[1].to_string());
    }
    flush(&mut tokens, &mut labels, first_line, &mut out)?;
    Ok(out)
}

pub fn read_column_file(path: impl AsRef<Path>, domain: Domain) -> Result<Vec<LabeledSentence>> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    parse_column_file(&text, domain)
}

/// Writes sentences in the column format, each followed by one blank line.
pub fn serialize_column(sentences: &[LabeledSentence]) -> String {
    let mut s = String::new();
    for sent in sentences {
        for (tok, lab) in sent.tokens.iter().zip(&sent.labels) {
            s.push_str(tok);
            s.push('\t');
            s.push_str(lab);
            s.push('\n');
        }
        s.push('\n');
    }
    s
}

/// Seeded uniform subsample of `count` sentences, kept in original order.
pub fn subsample<R: Rng + ?Sized>(sentences: &[LabeledSentence], count: usize, rng: &mut R) -> Vec<LabeledSentence> {
    if count >= sentences.len() {
        return sentences.to_vec();
    }
    let mut idx = sample(rng, sentences.len(), count).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| sentences[i].clone()).collect()
}
