use std::collections::{BTreeSet, HashSet};

use super::bioes::{entity_tag, LabelScheme, Prefix, OUTSIDE};
use crate::error::{Error, Result};

/// Matched tags between a source and a target scheme.
///
/// `O` is always matched with `O`; each matched entity-type pair contributes
/// its four B/I/E/S tag pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    type_pairs: Vec<(String, String)>,
    tag_pairs: Vec<(String, String)>,
    index_pairs: Vec<(usize, usize)>,
}

impl LabelMap {
    /// Entity-type pairs as configured.
    pub fn type_pairs(&self) -> &[(String, String)] {
        &self.type_pairs
    }

    /// `(source tag, target tag)` pairs, `O` first.
    pub fn tag_pairs(&self) -> &[(String, String)] {
        &self.tag_pairs
    }

    /// The same pairs as scheme indices.
    pub fn index_pairs(&self) -> &[(usize, usize)] {
        &self.index_pairs
    }

    /// Target-side matched tag indices (Y_v).
    pub fn matched_target(&self) -> BTreeSet<usize> {
        self.index_pairs.iter().map(|&(_, t)| t).collect()
    }

    /// Target-side matched tags by name.
    pub fn matched_target_tags(&self) -> BTreeSet<&str> {
        self.tag_pairs.iter().map(|(_, t)| t.as_str()).collect()
    }

    pub fn source_for_target(&self, target_idx: usize) -> Option<usize> {
        self.index_pairs
            .iter()
            .find(|&&(_, t)| t == target_idx)
            .map(|&(s, _)| s)
    }

    /// True when every tag is matched to the tag with the same index.
    pub fn is_identity(&self, source: &LabelScheme, target: &LabelScheme) -> bool {
        source.num_tags() == target.num_tags()
            && self.index_pairs.len() == target.num_tags()
            && self.index_pairs.iter().all(|&(s, t)| s == t)
    }

    /// The map with source and target swapped.
    pub fn reversed(&self) -> LabelMap {
        LabelMap {
            type_pairs: self.type_pairs.iter().map(|(s, t)| (t.clone(), s.clone())).collect(),
            tag_pairs: self.tag_pairs.iter().map(|(s, t)| (t.clone(), s.clone())).collect(),
            index_pairs: self.index_pairs.iter().map(|&(s, t)| (t, s)).collect(),
        }
    }

    /// Renders the map in the `source_type<TAB>target_type` file format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (a, b) in &self.type_pairs {
            s.push_str(a);
            s.push('\t');
            s.push_str(b);
            s.push('\n');
        }
        s
    }

    /// Pairs every type of `scheme` with itself.
    pub fn identity(scheme: &LabelScheme) -> LabelMap {
        let pairs: Vec<(String, String)> = scheme.entity_types().iter().map(|t| (t.clone(), t.clone())).collect();
        build_label_map(scheme, scheme, &pairs).expect("identity pairs are always valid")
    }
}

/// Expands entity-type pairs into matched tag pairs.
pub fn build_label_map(
    source: &LabelScheme,
    target: &LabelScheme,
    type_pairs: &[(String, String)],
) -> Result<LabelMap> {
    let mut seen_s = HashSet::new();
    let mut seen_t = HashSet::new();
    let mut tag_pairs = vec![(OUTSIDE.to_string(), OUTSIDE.to_string())];
    let mut index_pairs = vec![(source.index_of(OUTSIDE)?, target.index_of(OUTSIDE)?)];
    for (s, t) in type_pairs {
        if !source.has_type(s) {
            return Err(Error::Config(format!("source scheme has no entity type `{s}`")));
        }
        if !target.has_type(t) {
            return Err(Error::Config(format!("target scheme has no entity type `{t}`")));
        }
        if !seen_s.insert(s.as_str()) {
            return Err(Error::Config(format!("source type `{s}` is paired more than once")));
        }
        if !seen_t.insert(t.as_str()) {
            return Err(Error::Config(format!("target type `{t}` is paired more than once")));
        }
        for p in Prefix::ALL {
            let st = entity_tag(p, s);
            let tt = entity_tag(p, t);
            index_pairs.push((source.index_of(&st)?, target.index_of(&tt)?));
            tag_pairs.push((st, tt));
        }
    }
    Ok(LabelMap {
        type_pairs: type_pairs.to_vec(),
        tag_pairs,
        index_pairs,
    })
}

/// Reads `source_type<TAB>target_type` lines; blank lines and `#` comments are skipped.
pub fn parse_label_map_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split('\t').collect::<Vec<_>>().as_slice() {
            [s, t] if !s.is_empty() && !t.is_empty() => pairs.push((s.to_string(), t.to_string())),
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "expected `source_type<TAB>target_type`".into(),
                })
            }
        }
    }
    Ok(pairs)
}
