use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const PAD: &str = "<PAD>";
pub const UNK: &str = "<UNK>";

/// Token to row index. `<PAD>` is row 0 and `<UNK>` row 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

impl Vocab {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;

    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(PAD);
        v.insert(UNK);
        v
    }

    /// Vocabulary over `tokens` in first-seen order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab::new();
        for t in tokens {
            v.insert(t.as_ref());
        }
        v
    }

    /// Rebuilds a vocabulary from its full ordered token list (specials included).
    pub fn from_ordered(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != PAD || tokens[1] != UNK {
            return Err(Error::Format {
                line: 0,
                msg: "vocabulary must start with <PAD> and <UNK>".into(),
            });
        }
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Format {
                line: 0,
                msg: "duplicate vocabulary entry".into(),
            });
        }
        Ok(Vocab { tokens, index })
    }

    /// Adds `token` if absent and returns its index.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or `<UNK>`.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Embedding rows indexed by a [`Vocab`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vocab: Vocab,
    pub vectors: Matrix,
}

/// Half-width of the uniform range for vectors not found in a pretrained file.
pub fn oov_bound(dim: usize) -> f64 {
    (3.0 / dim as f64).sqrt()
}

impl EmbeddingTable {
    /// Random table over `vocab`: `<PAD>` is zero, every other row uniform in ±sqrt(3/dim).
    pub fn random<R: Rng + ?Sized>(vocab: Vocab, dim: usize, rng: &mut R) -> Self {
        let mut vectors = Matrix::uniform(vocab.len(), dim, oov_bound(dim), rng);
        vectors.row_mut(Vocab::PAD_ID).fill(0.0);
        EmbeddingTable { vocab, vectors }
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Row for `token`, falling back to `<UNK>`.
    pub fn lookup(&self, token: &str) -> &[f64] {
        self.vectors.row(self.vocab.id(token))
    }
}

/// Parses the text embedding format: a `<count> <dim>` header then `word v1 … vdim` lines.
///
/// `<UNK>` and any `extra_tokens` missing from the file get rows drawn from
/// `rng`, uniform in ±sqrt(3/dim). `<PAD>` is zero.
pub fn parse_embeddings<R, I, S>(text: &str, extra_tokens: I, rng: &mut R) -> Result<EmbeddingTable>
where
    R: Rng + ?Sized,
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Format {
        line: 1,
        msg: "missing `<count> <dim>` header".into(),
    })?;
    let header_fields: Vec<&str> = header.trim_end_matches('\r').split(' ').collect();
    let parse_count = |s: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Parse {
            line: 1,
            msg: format!("header field `{s}` is not a count"),
        })
    };
    let (count, dim) = match header_fields.as_slice() {
        [c, d] => (parse_count(c)?, parse_count(d)?),
        _ => {
            return Err(Error::Format {
                line: 1,
                msg: "header must be `<count> <dim>`".into(),
            })
        }
    };
    if dim == 0 {
        return Err(Error::Format {
            line: 1,
            msg: "embedding dimension must be positive".into(),
        });
    }

    let mut vocab = Vocab::new();
    let mut rows: Vec<Option<Vec<f64>>> = vec![None, None];
    let mut read = 0;
    for (i, raw) in lines {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r').trim_end();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let word = fields.next().unwrap_or_default();
        let values: Vec<&str> = fields.collect();
        if values.len() != dim {
            return Err(Error::Format {
                line: lineno,
                msg: format!("expected {dim} values, found {}", values.len()),
            });
        }
        let vector = values
            .iter()
            .map(|v| match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(Error::Parse {
                    line: lineno,
                    msg: format!("`{v}` is not a finite decimal"),
                }),
            })
            .collect::<Result<Vec<f64>>>()?;
        read += 1;
        let before = vocab.len();
        let id = vocab.insert(word);
        if id == before {
            rows.push(Some(vector));
        } else if id < 2 {
            // a pretrained <UNK> or <PAD> row replaces the default
            rows[id] = Some(vector);
        }
    }
    if read != count {
        return Err(Error::Format {
            line: 1,
            msg: format!("header announces {count} vectors but {read} were read"),
        });
    }
    for t in extra_tokens {
        let before = vocab.len();
        if vocab.insert(t.as_ref()) == before {
            rows.push(None);
        }
    }

    let bound = oov_bound(dim);
    let mut vectors = Matrix::zeros(vocab.len(), dim);
    for (id, row) in rows.into_iter().enumerate() {
        match row {
            Some(v) => vectors.row_mut(id).copy_from_slice(&v),
            None if id == Vocab::PAD_ID => {}
            None => {
                for x in vectors.row_mut(id) {
                    *x = rng.gen_range(-bound..=bound);
                }
            }
        }
    }
    Ok(EmbeddingTable { vocab, vectors })
}

pub fn load_embeddings<R, I, S>(path: impl AsRef<Path>, extra_tokens: I, rng: &mut R) -> Result<EmbeddingTable>
where
    R: Rng + ?Sized,
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    parse_embeddings(&text, extra_tokens, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::stream_rng;

    const NONE: [&str; 0] = [];

    #[test]
    fn reads_example_file() {
        let mut rng = stream_rng(0, "emb");
        let t = parse_embeddings("2 3\na 1 2 3\nb 4 5 6\n", NONE, &mut rng).unwrap();
        assert_eq!(t.lookup("a"), &[1.0, 2.0, 3.0]);
        assert_eq!(t.lookup("b"), &[4.0, 5.0, 6.0]);
        assert_eq!(t.vocab.len(), 4);
        assert_eq!(t.lookup(PAD), &[0.0, 0.0, 0.0]);
        assert_eq!(t.lookup("c"), t.lookup(UNK));
        let bound = oov_bound(3);
        assert!(t.lookup(UNK).iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn format_errors() {
        let mut rng = stream_rng(0, "emb");
        assert!(matches!(
            parse_embeddings("2 3\na 1 2 3\nb 4 5 6 7\n", NONE, &mut rng),
            Err(Error::Format { line: 3, .. })
        ));
        assert!(matches!(
            parse_embeddings("1 2\na 1 x\n", NONE, &mut rng),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_embeddings("3 1\na 1\n", NONE, &mut rng),
            Err(Error::Format { .. })
        ));
        assert!(parse_embeddings("", NONE, &mut rng).is_err());
        assert!(parse_embeddings("two 3\n", NONE, &mut rng).is_err());
    }

    #[test]
    fn decimal_parses_are_exact() {
        let mut rng = stream_rng(0, "emb");
        let t = parse_embeddings("1 2\nw 0.1 -1e-7\n", NONE, &mut rng).unwrap();
        assert_eq!(t.lookup("w")[0].to_bits(), 0.1f64.to_bits());
        assert_eq!(t.lookup("w")[1].to_bits(), (-1e-7f64).to_bits());
    }

    #[test]
    fn extra_tokens_are_seeded() {
        let a = parse_embeddings("1 2\nw 1 1\n", ["x", "w"], &mut stream_rng(4, "emb")).unwrap();
        let b = parse_embeddings("1 2\nw 1 1\n", ["x", "w"], &mut stream_rng(4, "emb")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vocab.len(), 4);
        assert_eq!(a.lookup("w"), &[1.0, 1.0]);
        assert_ne!(a.lookup("x"), a.lookup(UNK));
    }

    #[test]
    fn vocab_specials() {
        let v = Vocab::from_tokens(["b", "a", "b"]);
        assert_eq!(v.tokens(), &[PAD, UNK, "b", "a"]);
        assert_eq!(v.id("zzz"), Vocab::UNK_ID);
        assert_eq!(Vocab::from_ordered(v.tokens().to_vec()).unwrap(), v);
        assert!(Vocab::from_ordered(vec!["a".into()]).is_err());
    }
}
