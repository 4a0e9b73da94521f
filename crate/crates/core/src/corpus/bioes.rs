//! BIOES tags, label schemes and span extraction.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

pub const OUTSIDE: &str = "O";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Prefix {
    Begin,
    Inside,
    End,
    Single,
}

impl Prefix {
    pub const ALL: [Prefix; 4] = [Prefix::Begin, Prefix::Inside, Prefix::End, Prefix::Single];

    pub fn as_char(self) -> char {
        match self {
            Prefix::Begin => 'B',
            Prefix::Inside => 'I',
            Prefix::End => 'E',
            Prefix::Single => 'S',
        }
    }
}

/// A parsed tag borrowing its entity type from the tag string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag<'a> {
    Outside,
    Entity(Prefix, &'a str),
}

impl<'a> Tag<'a> {
    /// Parses `O` or `P-Type` with `P` one of `B I E S`.
    pub fn parse(s: &'a str) -> Option<Tag<'a>> {
        if s == OUTSIDE {
            return Some(Tag::Outside);
        }
        let (p, ty) = s.split_once('-')?;
        if ty.is_empty() {
            return None;
        }
        let prefix = match p {
            "B" => Prefix::Begin,
            "I" => Prefix::Inside,
            "E" => Prefix::End,
            "S" => Prefix::Single,
            _ => return None,
        };
        Some(Tag::Entity(prefix, ty))
    }
}

pub fn entity_tag(prefix: Prefix, entity_type: &str) -> String {
    format!("{}-{}", prefix.as_char(), entity_type)
}

/// One structural problem in a label sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub position: usize,
    pub msg: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "position {}: {}", self.position, self.msg)
    }
}

/// Structural BIOES check that accepts any entity type name.
///
/// An empty result means the sequence is well formed. Malformed tag strings
/// are reported as violations too.
pub fn bioes_violations<S: AsRef<str>>(labels: &[S]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut open: Option<&str> = None;
    let mut push = |position: usize, msg: String| out.push(Violation { position, msg });
    for (i, raw) in labels.iter().enumerate() {
        let raw = raw.as_ref();
        let Some(tag) = Tag::parse(raw) else {
            push(i, format!("malformed tag `{raw}`"));
            open = None;
            continue;
        };
        match tag {
            Tag::Outside => {
                if let Some(t) = open {
                    push(i, format!("entity {t} not closed before O"));
                }
                open = None;
            }
            Tag::Entity(Prefix::Begin, ty) => {
                if let Some(t) = open {
                    push(i, format!("B-{ty} while entity {t} is still open"));
                }
                open = Some(ty);
            }
            Tag::Entity(Prefix::Inside, ty) => {
                match open {
                    Some(t) if t == ty => {}
                    Some(t) => push(i, format!("I-{ty} inside entity {t}")),
                    None => push(i, format!("I-{ty} without an open B-{ty}")),
                }
                open = Some(ty);
            }
            Tag::Entity(Prefix::End, ty) => {
                match open {
                    Some(t) if t == ty => {}
                    Some(t) => push(i, format!("E-{ty} inside entity {t}")),
                    None => push(i, format!("E-{ty} without an open B-{ty}")),
                }
                open = None;
            }
            Tag::Entity(Prefix::Single, ty) => {
                if let Some(t) = open {
                    push(i, format!("S-{ty} while entity {t} is still open"));
                }
                open = None;
            }
        }
    }
    if let Some(t) = open {
        push(labels.len() - 1, format!("entity {t} dangles at sentence end"));
    }
    out
}

/// Ordered entity types and the derived `O` + `{B,I,E,S}×types` tag inventory.
///
/// Tag indices: `O` is 0, then `B-T, I-T, E-T, S-T` for each type in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelScheme {
    entity_types: Vec<String>,
    tags: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelScheme {
    pub fn new<S: Into<String>>(entity_types: impl IntoIterator<Item = S>) -> Result<Self> {
        let entity_types: Vec<String> = entity_types.into_iter().map(Into::into).collect();
        let mut tags = vec![OUTSIDE.to_string()];
        for ty in &entity_types {
            if ty.is_empty() || ty.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid entity type name `{ty}`")));
            }
            for p in Prefix::ALL {
                tags.push(entity_tag(p, ty));
            }
        }
        let index: HashMap<String, usize> = tags.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tags.len() {
            return Err(Error::Config("duplicate entity type in scheme".into()));
        }
        Ok(LabelScheme {
            entity_types,
            tags,
            index,
        })
    }

    /// Reads a scheme file: one entity type per line, blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let types = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string);
        LabelScheme::new(types)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.entity_types {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// Collects every entity type used by the label sequences, sorted.
    pub fn infer<'a, I, S>(label_seqs: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut types = std::collections::BTreeSet::new();
        for seq in label_seqs {
            for l in seq {
                match Tag::parse(l.as_ref()) {
                    Some(Tag::Entity(_, ty)) => {
                        types.insert(ty.to_string());
                    }
                    Some(Tag::Outside) => {}
                    None => return Err(Error::UnknownTag(l.as_ref().to_string())),
                }
            }
        }
        LabelScheme::new(types)
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn num_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn index_of(&self, tag: &str) -> Result<usize> {
        self.index
            .get(tag)
            .copied()
            .ok_or_else(|| Error::UnknownTag(tag.to_string()))
    }

    pub fn tag(&self, idx: usize) -> &str {
        &self.tags[idx]
    }

    pub fn has_type(&self, ty: &str) -> bool {
        self.entity_types.iter().any(|t| t == ty)
    }

    pub fn encode<S: AsRef<str>>(&self, labels: &[S]) -> Result<Vec<usize>> {
        labels.iter().map(|l| self.index_of(l.as_ref())).collect()
    }

    pub fn decode(&self, indices: &[usize]) -> Vec<String> {
        indices.iter().map(|&i| self.tags[i].clone()).collect()
    }
}

/// Validates a gold label sequence against a scheme.
///
/// Unknown tags are an error; structural problems come back as violations
/// (empty means the sequence is valid).
pub fn validate_bioes<S: AsRef<str>>(labels: &[S], scheme: &LabelScheme) -> Result<Vec<Violation>> {
    for l in labels {
        scheme.index_of(l.as_ref())?;
    }
    Ok(bioes_violations(labels))
}

/// An entity mention: inclusive token range plus type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub entity_type: String,
}

impl Span {
    pub fn new(start: usize, end: usize, entity_type: impl Into<String>) -> Self {
        Span {
            start,
            end,
            entity_type: entity_type.into(),
        }
    }
}

/// Spans of a well-formed sequence; fails on the first structural violation.
pub fn extract_spans<S: AsRef<str>>(labels: &[S]) -> Result<Vec<Span>> {
    if let Some(v) = bioes_violations(labels).into_iter().next() {
        return Err(Error::Validation {
            position: v.position,
            msg: v.msg,
        });
    }
    Ok(extract_spans_lenient(labels))
}

/// Spans of a possibly malformed sequence, skipping broken fragments.
///
/// Used on decoder output, which is not constrained to legal BIOES.
pub fn extract_spans_lenient<S: AsRef<str>>(labels: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, raw) in labels.iter().enumerate() {
        match Tag::parse(raw.as_ref()) {
            Some(Tag::Entity(Prefix::Begin, ty)) => open = Some((i, ty)),
            Some(Tag::Entity(Prefix::Inside, ty)) => {
                if !matches!(open, Some((_, t)) if t == ty) {
                    open = None;
                }
            }
            Some(Tag::Entity(Prefix::End, ty)) => {
                if let Some((start, t)) = open {
                    if t == ty {
                        spans.push(Span::new(start, i, ty));
                    }
                }
                open = None;
            }
            Some(Tag::Entity(Prefix::Single, ty)) => {
                spans.push(Span::new(i, i, ty));
                open = None;
            }
            Some(Tag::Outside) | None => open = None,
        }
    }
    spans
}

/// Renders non-overlapping spans as a BIOES sequence of length `len`.
pub fn render_spans(spans: &[Span], len: usize) -> Result<Vec<String>> {
    let mut out = vec![OUTSIDE.to_string(); len];
    let mut taken = vec![false; len];
    for s in spans {
        if s.start > s.end || s.end >= len {
            return Err(Error::Usage(format!("span {}..={} out of range", s.start, s.end)));
        }
        if taken[s.start..=s.end].iter().any(|&t| t) {
            return Err(Error::Usage("overlapping spans".into()));
        }
        taken[s.start..=s.end].iter_mut().for_each(|t| *t = true);
        if s.start == s.end {
            out[s.start] = entity_tag(Prefix::Single, &s.entity_type);
        } else {
            out[s.start] = entity_tag(Prefix::Begin, &s.entity_type);
            for tag in &mut out[s.start + 1..s.end] {
                *tag = entity_tag(Prefix::Inside, &s.entity_type);
            }
            out[s.end] = entity_tag(Prefix::End, &s.entity_type);
        }
    }
    Ok(out)
}
