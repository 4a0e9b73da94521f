//! Model archive: a text header followed by raw little-endian f64 tensor blocks.
//!
//! ```text
//! seqtransfer-archive 1
//! seed <u64>
//! hyper <key> <value>          one per hyperparameter
//! source_types <T1> <T2> ...
//! target_types <T1> ...
//! map <source type> <target type>
//! vocab <n>                    then n token lines
//! char_vocab <n> | none        then n character lines
//! tensor <name> <rows> <cols> <byte offset>
//! data <byte length>
//! end
//! ```
//!
//! Tensors follow in manifest order, offsets relative to the first byte after `end\n`.

use std::fmt::Write as _;
use std::path::Path;

use seqtransfer::corpus::{build_label_map, LabelScheme, Vocab};
use seqtransfer::crf::CrfParams;
use seqtransfer::encoder::{BiLstmParams, CharParams, LstmParams};
use seqtransfer::numerics::Matrix;
use seqtransfer::trainer::{Hyperparams, Model, ModelParams};
use seqtransfer::{Error, Result};

pub const MAGIC: &str = "seqtransfer-archive";
pub const FORMAT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Archive(msg.into())
}

pub fn to_bytes(model: &Model, hyper: &Hyperparams) -> Vec<u8> {
    let mut h = format!("{MAGIC} {FORMAT_VERSION}\nseed {}\n", hyper.seed);
    for (k, v) in hyper.to_pairs() {
        writeln!(h, "hyper {k} {v}").unwrap();
    }
    writeln!(
        h,
        "source_types {}",
        model.source_scheme.entity_types().join(" ").trim_end()
    )
    .unwrap();
    writeln!(
        h,
        "target_types {}",
        model.target_scheme.entity_types().join(" ").trim_end()
    )
    .unwrap();
    for (s, t) in model.label_map.type_pairs() {
        writeln!(h, "map {s} {t}").unwrap();
    }
    let vocab_block = |h: &mut String, name: &str, v: &Vocab| {
        writeln!(h, "{name} {}", v.len()).unwrap();
        for t in v.tokens() {
            writeln!(h, "{t}").unwrap();
        }
    };
    vocab_block(&mut h, "vocab", &model.vocab);
    match &model.char_vocab {
        Some(v) => vocab_block(&mut h, "char_vocab", v),
        None => h.push_str("char_vocab none\n"),
    }
    let mut offset = 0usize;
    for (name, m) in model.params.tensor_names().iter().zip(model.params.tensors()) {
        writeln!(h, "tensor {name} {} {} {offset}", m.rows(), m.cols()).unwrap();
        offset += 8 * m.data().len();
    }
    writeln!(h, "data {offset}\nend").unwrap();

    let mut out = h.into_bytes();
    out.reserve(offset);
    for m in model.params.tensors() {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Reads header lines off the front of the archive bytes.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let len = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        self.pos += len + 1;
        std::str::from_utf8(&rest[..len]).map_err(|_| bad("header is not UTF-8"))
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' ').or((r.is_empty()).then_some("")))
            .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
    }

    fn vocab(&mut self, key: &str) -> Result<Option<Vocab>> {
        let n = self.field(key)?;
        if n == "none" {
            return Ok(None);
        }
        let n: usize = n.parse().map_err(|_| bad(format!("bad {key} size `{n}`")))?;
        let tokens = (0..n)
            .map(|_| self.next().map(str::to_string))
            .collect::<Result<Vec<_>>>()?;
        Vocab::from_ordered(tokens)
            .map(Some)
            .map_err(|e| bad(format!("{key}: {e}")))
    }
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| bad(format!("bad number `{s}`")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Hyperparams)> {
    let mut c = Cursor { bytes, pos: 0 };

    let magic = c.next()?;
    match magic.split_once(' ') {
        Some((MAGIC, v)) if v == FORMAT_VERSION.to_string() => {}
        Some((MAGIC, v)) => {
            return Err(bad(format!(
                "format version {v} is not supported (expected {FORMAT_VERSION})"
            )))
        }
        _ => return Err(bad("not a model archive")),
    }
    let seed: u64 = num(c.field("seed")?)?;
    let mut hyper = Hyperparams::default();
    let mut line = c.next()?;
    while let Some(rest) = line.strip_prefix("hyper ") {
        let (k, v) = rest.split_once(' ').ok_or_else(|| bad(format!("bad line `{line}`")))?;
        hyper.set(k, v)?;
        line = c.next()?;
    }
    if hyper.seed != seed {
        return Err(bad("seed line disagrees with hyperparameters"));
    }
    let types = |l: &str, key: &str| -> Result<LabelScheme> {
        let rest = l
            .strip_prefix(key)
            .ok_or_else(|| bad(format!("expected `{key}`, found `{l}`")))?;
        LabelScheme::new(rest.split_whitespace())
    };
    let source_scheme = types(line, "source_types")?;
    let target_scheme = types(c.next()?, "target_types")?;
    let mut pairs = Vec::new();
    let mut line = c.next()?;
    while let Some(rest) = line.strip_prefix("map ") {
        let (s, t) = rest.split_once(' ').ok_or_else(|| bad(format!("bad line `{line}`")))?;
        pairs.push((s.to_string(), t.to_string()));
        line = c.next()?;
    }
    let label_map = build_label_map(&source_scheme, &target_scheme, &pairs)?;
    let n: usize = num(line
        .strip_prefix("vocab ")
        .ok_or_else(|| bad(format!("expected `vocab`, found `{line}`")))?)?;
    let tokens = (0..n)
        .map(|_| c.next().map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocab::from_ordered(tokens).map_err(|e| bad(format!("vocab: {e}")))?;
    let char_vocab = c.vocab("char_vocab")?;

    let mut manifest = Vec::new();
    let mut line = c.next()?;
    while let Some(rest) = line.strip_prefix("tensor ") {
        manifest.push(rest);
        line = c.next()?;
    }
    let total: usize = num(line
        .strip_prefix("data ")
        .ok_or_else(|| bad(format!("expected `data`, found `{line}`")))?)?;
    if c.next()? != "end" {
        return Err(bad("missing `end` after the manifest"));
    }
    let data = &bytes[c.pos..];
    if total != data.len() {
        return Err(bad(format!(
            "data section is {} bytes, header says {total}",
            data.len()
        )));
    }
    let mut tensors = Vec::new();
    for rest in manifest {
        let f: Vec<&str> = rest.split(' ').collect();
        let [name, rows, cols, off] = f.as_slice() else {
            return Err(bad(format!("bad manifest line `tensor {rest}`")));
        };
        let (rows, cols, off): (usize, usize, usize) = (num(rows)?, num(cols)?, num(off)?);
        let len = rows * cols * 8;
        let block = off
            .checked_add(len)
            .and_then(|end| data.get(off..end))
            .ok_or_else(|| bad(format!("tensor {name} runs past the data section")))?;
        let values = block
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name.to_string(), Matrix::new(rows, cols, values)?));
    }

    let params = assemble(tensors, char_vocab.is_some())?;
    let model = Model {
        vocab,
        char_vocab,
        source_scheme,
        target_scheme,
        label_map,
        params,
    };
    check_shapes(&model)?;
    Ok((model, hyper))
}

struct Tensors {
    it: std::vec::IntoIter<(String, Matrix)>,
}

impl Tensors {
    fn take(&mut self, expect: &str) -> Result<Matrix> {
        match self.it.next() {
            Some((name, m)) if name == expect => Ok(m),
            Some((name, _)) => Err(bad(format!("expected tensor {expect}, found {name}"))),
            None => Err(bad(format!("missing tensor {expect}"))),
        }
    }

    fn lstm(&mut self, prefix: &str) -> Result<BiLstmParams> {
        let mut dir = |d: &str| -> Result<LstmParams> {
            Ok(LstmParams {
                w: self.take(&format!("{prefix}{d}.w"))?,
                u: self.take(&format!("{prefix}{d}.u"))?,
                b: self.take(&format!("{prefix}{d}.b"))?,
            })
        };
        let fwd = dir("fwd")?;
        let bwd = dir("bwd")?;
        Ok(BiLstmParams { fwd, bwd })
    }

    fn head(&mut self, prefix: &str) -> Result<CrfParams> {
        Ok(CrfParams {
            w: self.take(&format!("{prefix}.w"))?,
            a: self.take(&format!("{prefix}.a"))?,
        })
    }
}

/// Rebuilds the parameters from tensors in `ModelParams::tensor_names` order.
fn assemble(tensors: Vec<(String, Matrix)>, has_chars: bool) -> Result<ModelParams> {
    let mut t = Tensors {
        it: tensors.into_iter(),
    };
    let embeddings = t.take("embeddings")?;
    let chars = if has_chars {
        let embeddings = t.take("char.embeddings")?;
        Some(CharParams {
            embeddings,
            lstm: t.lstm("char.lstm.")?,
        })
    } else {
        None
    };
    let params = ModelParams {
        embeddings,
        chars,
        lstm: t.lstm("lstm.")?,
        source_head: t.head("source")?,
        target_head: t.head("target")?,
    };
    if let Some((name, _)) = t.it.next() {
        return Err(bad(format!("unexpected tensor {name}")));
    }
    Ok(params)
}

fn check_shapes(model: &Model) -> Result<()> {
    let p = &model.params;
    if p.embeddings.rows() != model.vocab.len() {
        return Err(bad("embedding rows do not match the vocabulary"));
    }
    if p.source_head.num_tags() != model.source_scheme.num_tags()
        || p.target_head.num_tags() != model.target_scheme.num_tags()
    {
        return Err(bad("CRF heads do not match the label schemes"));
    }
    if let (Some(c), Some(v)) = (&p.chars, &model.char_vocab) {
        if c.embeddings.rows() != v.len() {
            return Err(bad("char embedding rows do not match the char vocabulary"));
        }
    }
    p.source_head.check()?;
    p.target_head.check()?;
    model
        .hidden(&["<UNK>"])
        .map_err(|e| bad(format!("inconsistent tensor shapes: {e}")))?;
    Ok(())
}

pub fn save(path: impl AsRef<Path>, model: &Model, hyper: &Hyperparams) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model, hyper)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model, Hyperparams)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Archive(m) => Error::Archive(format!("{}: {m}", path.display())),
        other => other,
    })
}
