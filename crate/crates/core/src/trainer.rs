//! The four-term objective, mixed-domain batching and the AdaGrad loop.
//!
//! `L = L_c + α·L_mmd + β·L_p + γ·L_r` where `L_c` is the ε-weighted mean
//! negative log-likelihood of both domains, `L_mmd` the strategy's feature
//! alignment loss over gold-labeled hidden vectors, `L_p` the CRF head
//! distance, and `L_r` the squared norm of the Bi-LSTM and CRF parameters.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::corpus::{Domain, EmbeddingTable, LabelMap, LabelScheme, LabeledSentence, Vocab};
use crate::crf::{crf_gradients, emission, log_likelihood, viterbi, CrfParams};
use crate::encoder::{
    bilstm_backward, bilstm_forward, encode_chars, encode_chars_backward, BiLstmCache, BiLstmParams, CharCache,
    CharParams,
};
use crate::error::{Error, Result};
use crate::eval::{span_f1, F1Report};
use crate::numerics::{axpy, stream_rng, AdaGradState, Matrix};
use crate::strategy::TransferStrategy;
use crate::transfer::{BandwidthPolicy, LabeledHiddenPool, MmdConfig};

/// Training settings. Mode constraints are applied by the strategy, not here.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub mode: String,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Default `μ_y`.
    pub mu: f64,
    /// Per-target-tag `μ_y` overrides, keyed by tag text.
    pub mu_overrides: BTreeMap<String, f64>,
    /// Fixed RBF bandwidth; `None` uses the per-batch median heuristic.
    pub bandwidth: Option<f64>,
    pub learning_rate: f64,
    pub batch_source: usize,
    pub batch_target: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub d_emb: usize,
    pub d_lstm: usize,
    /// Char encoder width; 0 disables it.
    pub d_char: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            mode: "la_dtl".into(),
            alpha: 0.02,
            beta: 0.03,
            gamma: 1e-6,
            epsilon: 0.3,
            mu: 1.0,
            mu_overrides: BTreeMap::new(),
            bandwidth: None,
            learning_rate: 0.05,
            batch_source: 16,
            batch_target: 16,
            max_epochs: 100,
            patience: 10,
            seed: 1,
            d_emb: 128,
            d_lstm: 200,
            d_char: 0,
        }
    }
}

/// Keys accepted by [`Hyperparams::set`], besides `mu.<TAG>`.
pub const HYPER_KEYS: [&str; 16] = [
    "mode",
    "alpha",
    "beta",
    "gamma",
    "epsilon",
    "mu",
    "bandwidth",
    "learning_rate",
    "batch_source",
    "batch_target",
    "max_epochs",
    "patience",
    "seed",
    "d_emb",
    "d_lstm",
    "d_char",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl Hyperparams {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = value.to_string(),
            "alpha" => self.alpha = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "epsilon" => self.epsilon = parse_num(key, value)?,
            "mu" => self.mu = parse_num(key, value)?,
            "bandwidth" => {
                self.bandwidth = match value {
                    "median" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "batch_source" => self.batch_source = parse_num(key, value)?,
            "batch_target" => self.batch_target = parse_num(key, value)?,
            "max_epochs" => self.max_epochs = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "d_emb" => self.d_emb = parse_num(key, value)?,
            "d_lstm" => self.d_lstm = parse_num(key, value)?,
            "d_char" => self.d_char = parse_num(key, value)?,
            k => match k.strip_prefix("mu.") {
                Some(tag) if !tag.is_empty() => {
                    self.mu_overrides.insert(tag.to_string(), parse_num(key, value)?);
                }
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            },
        }
        Ok(())
    }

    /// Every field as `(key, value)`; feeding these back through [`set`](Self::set)
    /// reproduces the struct exactly.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("mode".to_string(), self.mode.clone()),
            ("alpha".into(), self.alpha.to_string()),
            ("beta".into(), self.beta.to_string()),
            ("gamma".into(), self.gamma.to_string()),
            ("epsilon".into(), self.epsilon.to_string()),
            ("mu".into(), self.mu.to_string()),
            (
                "bandwidth".into(),
                self.bandwidth.map_or("median".to_string(), |b| b.to_string()),
            ),
            ("learning_rate".into(), self.learning_rate.to_string()),
            ("batch_source".into(), self.batch_source.to_string()),
            ("batch_target".into(), self.batch_target.to_string()),
            ("max_epochs".into(), self.max_epochs.to_string()),
            ("patience".into(), self.patience.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("d_emb".into(), self.d_emb.to_string()),
            ("d_lstm".into(), self.d_lstm.to_string()),
            ("d_char".into(), self.d_char.to_string()),
        ];
        for (tag, v) in &self.mu_overrides {
            out.push((format!("mu.{tag}"), v.to_string()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.gamma >= 0.0) {
            return bad("alpha, beta and gamma must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1]");
        }
        if !(self.mu >= 0.0) || self.mu_overrides.values().any(|&m| !(m >= 0.0)) {
            return bad("mu weights must be non-negative");
        }
        if self.bandwidth.is_some_and(|b| !(b > 0.0 && b.is_finite())) {
            return bad("bandwidth must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            return bad("batch sizes must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.d_emb == 0 || self.d_lstm == 0 {
            return bad("d_emb and d_lstm must be positive");
        }
        Ok(())
    }

    fn mmd_config(&self, model: &Model) -> Result<MmdConfig> {
        let policy = self.bandwidth.map_or(BandwidthPolicy::Median, BandwidthPolicy::Fixed);
        let mut cfg = MmdConfig::new(model.label_map.index_pairs().to_vec(), policy);
        cfg.default_mu = self.mu;
        for (tag, &v) in &self.mu_overrides {
            cfg.mu.insert(model.target_scheme.index_of(tag)?, v);
        }
        Ok(cfg)
    }
}

/// Every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embeddings: Matrix,
    pub chars: Option<CharParams>,
    pub lstm: BiLstmParams,
    pub source_head: CrfParams,
    pub target_head: CrfParams,
}

const LSTM_NAMES: [&str; 6] = ["fwd.w", "fwd.u", "fwd.b", "bwd.w", "bwd.u", "bwd.b"];

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            embeddings: Matrix::zeros_like(&self.embeddings),
            chars: self.chars.as_ref().map(CharParams::zeros_like),
            lstm: BiLstmParams::zeros(self.lstm.d_in(), self.lstm.d_lstm()),
            source_head: CrfParams::zeros(self.source_head.d_hidden(), self.source_head.num_tags()),
            target_head: CrfParams::zeros(self.target_head.d_hidden(), self.target_head.num_tags()),
        }
    }

    /// Tensor names in the fixed order used by [`tensors`](Self::tensors).
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["embeddings".to_string()];
        if self.chars.is_some() {
            names.push("char.embeddings".into());
            names.extend(LSTM_NAMES.iter().map(|n| format!("char.lstm.{n}")));
        }
        names.extend(LSTM_NAMES.iter().map(|n| format!("lstm.{n}")));
        names.extend(["source.w", "source.a", "target.w", "target.a"].map(String::from));
        names
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut t = vec![&self.embeddings];
        if let Some(c) = &self.chars {
            t.push(&c.embeddings);
            t.extend(c.lstm.tensors());
        }
        t.extend(self.lstm.tensors());
        t.extend([
            &self.source_head.w,
            &self.source_head.a,
            &self.target_head.w,
            &self.target_head.a,
        ]);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t = vec![&mut self.embeddings];
        if let Some(c) = &mut self.chars {
            t.push(&mut c.embeddings);
            t.extend(c.lstm.tensors_mut());
        }
        t.extend(self.lstm.tensors_mut());
        t.extend([
            &mut self.source_head.w,
            &mut self.source_head.a,
            &mut self.target_head.w,
            &mut self.target_head.a,
        ]);
        t
    }

    /// Tensors covered by `L_r`: both Bi-LSTMs and both heads, not the embedding tables.
    fn regularized_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t: Vec<&mut Matrix> = Vec::new();
        if let Some(c) = &mut self.chars {
            t.extend(c.lstm.tensors_mut());
        }
        t.extend(self.lstm.tensors_mut());
        t.extend([
            &mut self.source_head.w,
            &mut self.source_head.a,
            &mut self.target_head.w,
            &mut self.target_head.a,
        ]);
        t
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|m| m.data().iter().copied())
            .collect()
    }

    /// Overwrites every entry from a vector laid out as [`flatten`](Self::flatten).
    pub fn assign(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.tensors().iter().map(|m| m.data().len()).sum();
        if flat.len() != total {
            return Err(Error::Shape(format!("expected {total} values, got {}", flat.len())));
        }
        let mut off = 0;
        for m in self.tensors_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }
}

/// A sentence as indices into the model's vocabulary and the domain's scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSentence {
    pub ids: Vec<usize>,
    pub words: Vec<String>,
    pub tags: Vec<usize>,
}

/// Vocabularies, label schemes and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub vocab: Vocab,
    pub char_vocab: Option<Vocab>,
    pub source_scheme: LabelScheme,
    pub target_scheme: LabelScheme,
    pub label_map: LabelMap,
    pub params: ModelParams,
}

struct SentenceForward {
    h: Matrix,
    lstm: BiLstmCache,
    chars: Vec<CharCache>,
}

struct SentenceGrad {
    lstm: BiLstmParams,
    chars: Option<CharParams>,
    embeddings: Vec<(usize, Vec<f64>)>,
}

/// Tokens of the training corpora a strategy reads, in first-seen order.
pub fn training_tokens<'a>(
    strategy: &dyn TransferStrategy,
    source: &'a [LabeledSentence],
    target: &'a [LabeledSentence],
) -> Vec<&'a str> {
    let mut out = Vec::new();
    let mut corpora = vec![target];
    if strategy.uses_source() {
        corpora.insert(0, source);
    }
    for c in corpora {
        for s in c {
            out.extend(s.tokens.iter().map(String::as_str));
        }
    }
    out
}

impl Model {
    /// Fresh model with random Bi-LSTM and CRF parameters on top of `table`.
    pub fn new(
        hyper: &Hyperparams,
        table: EmbeddingTable,
        char_vocab: Option<Vocab>,
        source_scheme: LabelScheme,
        target_scheme: LabelScheme,
        label_map: LabelMap,
    ) -> Result<Model> {
        if (hyper.d_char > 0) != char_vocab.is_some() {
            return Err(Error::Config(
                "a char vocabulary is needed exactly when d_char > 0".into(),
            ));
        }
        let chars = char_vocab
            .as_ref()
            .map(|v| CharParams::init(v.len(), hyper.d_char, &mut stream_rng(hyper.seed, "init/chars")));
        let d_in = table.dim() + 2 * hyper.d_char;
        let lstm = BiLstmParams::init(d_in, hyper.d_lstm, &mut stream_rng(hyper.seed, "init/lstm"));
        let d_hidden = lstm.d_hidden();
        let source_head = CrfParams::init(
            d_hidden,
            source_scheme.num_tags(),
            &mut stream_rng(hyper.seed, "init/source_head"),
        );
        let target_head = CrfParams::init(
            d_hidden,
            target_scheme.num_tags(),
            &mut stream_rng(hyper.seed, "init/target_head"),
        );
        Ok(Model {
            vocab: table.vocab,
            char_vocab,
            source_scheme,
            target_scheme,
            label_map,
            params: ModelParams {
                embeddings: table.vectors,
                chars,
                lstm,
                source_head,
                target_head,
            },
        })
    }

    /// [`Model::new`] with a random embedding table and char vocabulary built from `tokens`.
    pub fn from_tokens<S: AsRef<str>>(
        hyper: &Hyperparams,
        tokens: &[S],
        source_scheme: LabelScheme,
        target_scheme: LabelScheme,
        label_map: LabelMap,
    ) -> Result<Model> {
        let vocab = Vocab::from_tokens(tokens.iter().map(AsRef::as_ref));
        let table = EmbeddingTable::random(vocab, hyper.d_emb, &mut stream_rng(hyper.seed, "init/embeddings"));
        let chars = (hyper.d_char > 0).then(|| char_vocab(tokens));
        Model::new(hyper, table, chars, source_scheme, target_scheme, label_map)
    }

    pub fn scheme(&self, domain: Domain) -> &LabelScheme {
        match domain {
            Domain::Source => &self.source_scheme,
            Domain::Target => &self.target_scheme,
        }
    }

    pub fn head(&self, domain: Domain) -> &CrfParams {
        match domain {
            Domain::Source => &self.params.source_head,
            Domain::Target => &self.params.target_head,
        }
    }

    /// Indexes a sentence's tokens and its labels under `domain`'s scheme.
    pub fn encode(&self, s: &LabeledSentence, domain: Domain) -> Result<EncodedSentence> {
        Ok(EncodedSentence {
            ids: s.tokens.iter().map(|t| self.vocab.id(t)).collect(),
            words: s.tokens.clone(),
            tags: self.scheme(domain).encode(&s.labels)?,
        })
    }

    pub fn encode_all(&self, sents: &[LabeledSentence], domain: Domain) -> Result<Vec<EncodedSentence>> {
        sents.iter().map(|s| self.encode(s, domain)).collect()
    }

    fn forward(&self, ids: &[usize], words: &[String]) -> Result<SentenceForward> {
        let p = &self.params;
        let mut inputs = Vec::with_capacity(ids.len());
        let mut chars = Vec::new();
        for (&id, w) in ids.iter().zip(words) {
            let mut x = p.embeddings.row(id).to_vec();
            if let (Some(cp), Some(cv)) = (&p.chars, &self.char_vocab) {
                let (v, cache) = encode_chars(w, cv, cp)?;
                x.extend(v);
                chars.push(cache);
            }
            inputs.push(x);
        }
        let (h, lstm) = bilstm_forward(&inputs, &p.lstm)?;
        Ok(SentenceForward { h, lstm, chars })
    }

    fn backward(&self, ids: &[usize], fwd: &SentenceForward, d_h: &Matrix) -> Result<SentenceGrad> {
        let p = &self.params;
        let (lstm, dx) = bilstm_backward(&p.lstm, &fwd.lstm, d_h)?;
        let d_emb = p.embeddings.cols();
        let mut chars = p.chars.as_ref().map(CharParams::zeros_like);
        if let (Some(cp), Some(g)) = (&p.chars, &mut chars) {
            for (cache, row) in fwd.chars.iter().zip(&dx) {
                encode_chars_backward(cp, cache, &row[d_emb..], g)?;
            }
        }
        let embeddings = ids
            .iter()
            .zip(dx)
            .map(|(&id, row)| (id, row[..d_emb].to_vec()))
            .collect();
        Ok(SentenceGrad {
            lstm,
            chars,
            embeddings,
        })
    }

    /// Hidden vectors of the shared encoder.
    pub fn hidden<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Matrix> {
        let words: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
        let ids: Vec<usize> = words.iter().map(|t| self.vocab.id(t)).collect();
        Ok(self.forward(&ids, &words)?.h)
    }

    /// Viterbi labels from `domain`'s head.
    pub fn predict<S: AsRef<str>>(&self, tokens: &[S], domain: Domain) -> Result<Vec<String>> {
        let h = self.hidden(tokens)?;
        let head = self.head(domain);
        let (path, _) = viterbi(&emission(&h, &head.w)?, &head.a)?;
        Ok(self.scheme(domain).decode(&path))
    }

    pub fn predict_all(&self, sents: &[LabeledSentence], domain: Domain, threads: usize) -> Result<Vec<Vec<String>>> {
        par_map(sents, threads, |s| self.predict(&s.tokens, domain))
            .into_iter()
            .collect()
    }

    pub fn evaluate(&self, sents: &[LabeledSentence], domain: Domain, threads: usize) -> Result<F1Report> {
        let pred = self.predict_all(sents, domain, threads)?;
        let gold: Vec<&Vec<String>> = sents.iter().map(|s| &s.labels).collect();
        let gold: Vec<Vec<&str>> = gold.iter().map(|l| l.iter().map(String::as_str).collect()).collect();
        span_f1(&gold, &pred)
    }
}

/// Character vocabulary over the characters of `tokens`, first-seen order.
pub fn char_vocab<S: AsRef<str>>(tokens: &[S]) -> Vocab {
    let mut v = Vocab::new();
    for t in tokens {
        for c in t.as_ref().chars() {
            let mut buf = [0u8; 4];
            v.insert(c.encode_utf8(&mut buf));
        }
    }
    v
}

/// Maps `f` over `items` on up to `threads` scoped workers; output order matches input order.
pub fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(f).collect::<Vec<U>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Objective terms of one batch, or their per-epoch averages.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_lammd: f64,
    pub l_p: f64,
    pub l_r: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recompute_total(&self, hyper: &Hyperparams) -> f64 {
        self.l_c + hyper.alpha * self.l_lammd + hyper.beta * self.l_p + hyper.gamma * self.l_r
    }
}

/// `L_c` alone: `−ε/|B_s|·Σ log p_s − (1−ε)/|B_t|·Σ log p_t`.
pub fn crf_loss(model: &Model, batch_s: &[EncodedSentence], batch_t: &[EncodedSentence], epsilon: f64) -> Result<f64> {
    if batch_t.is_empty() {
        return Err(Error::Usage("target batch is empty".into()));
    }
    let mean_ll = |batch: &[EncodedSentence], domain: Domain| -> Result<f64> {
        let head = model.head(domain);
        let mut sum = 0.0;
        for s in batch {
            let h = model.forward(&s.ids, &s.words)?.h;
            sum += log_likelihood(&emission(&h, &head.w)?, &head.a, &s.tags)?;
        }
        Ok(sum / batch.len() as f64)
    };
    let mut loss = -(1.0 - epsilon) * mean_ll(batch_t, Domain::Target)?;
    if epsilon != 0.0 {
        if batch_s.is_empty() {
            return Err(Error::Usage("source batch is empty but epsilon > 0".into()));
        }
        loss -= epsilon * mean_ll(batch_s, Domain::Source)?;
    }
    Ok(loss)
}

/// Full objective on one batch and its gradient with respect to every parameter.
///
/// Strategies that ignore the source domain get `ε = 0` and no transfer terms.
pub fn total_loss(
    model: &Model,
    batch_s: &[EncodedSentence],
    batch_t: &[EncodedSentence],
    hyper: &Hyperparams,
    strategy: &dyn TransferStrategy,
    threads: usize,
) -> Result<(LossBreakdown, ModelParams)> {
    if batch_t.is_empty() {
        return Err(Error::Usage("target batch is empty".into()));
    }
    let use_source = strategy.uses_source();
    if use_source && batch_s.is_empty() {
        return Err(Error::Usage(format!(
            "mode {} needs a non-empty source batch",
            strategy.name()
        )));
    }
    let batch_s = if use_source { batch_s } else { &[] };
    let epsilon = if use_source { hyper.epsilon } else { 0.0 };

    let items: Vec<(Domain, &EncodedSentence)> = batch_s
        .iter()
        .map(|s| (Domain::Source, s))
        .chain(batch_t.iter().map(|s| (Domain::Target, s)))
        .collect();
    let weight = |d: Domain| match d {
        Domain::Source => epsilon / batch_s.len() as f64,
        Domain::Target => (1.0 - epsilon) / batch_t.len() as f64,
    };

    let forwards: Vec<Result<_>> = par_map(&items, threads, |&(d, s)| {
        let fwd = model.forward(&s.ids, &s.words)?;
        let head = model.head(d);
        let g = crf_gradients(&fwd.h, &head.w, &head.a, &s.tags)?;
        Ok((fwd, g))
    });
    let mut grads = model.params.zeros_like();
    let mut loss = LossBreakdown::default();
    let mut fwds = Vec::with_capacity(items.len());
    let mut d_hs = Vec::with_capacity(items.len());
    for (&(d, _), r) in items.iter().zip(forwards) {
        let (fwd, mut g) = r?;
        let w = weight(d);
        loss.l_c += w * g.loss;
        let head = match d {
            Domain::Source => &mut grads.source_head,
            Domain::Target => &mut grads.target_head,
        };
        head.w.add_scaled(w, &g.d_w)?;
        head.a.add_scaled(w, &g.d_a)?;
        g.d_h.scale(w);
        d_hs.push(g.d_h);
        fwds.push(fwd);
    }

    if use_source {
        let mut pools = [LabeledHiddenPool::new(), LabeledHiddenPool::new()];
        for ((d, s), f) in items.iter().zip(&fwds) {
            let pool = &mut pools[*d as usize];
            for (i, &tag) in s.tags.iter().enumerate() {
                pool.push(tag, f.h.row(i).to_vec());
            }
        }
        let [ps, pt] = &pools;
        let mmd = strategy.feature_loss(ps, pt, &hyper.mmd_config(model)?)?;
        loss.l_lammd = mmd.value;
        if hyper.alpha != 0.0 {
            let mut cursor: [BTreeMap<usize, usize>; 2] = Default::default();
            for ((d, s), d_h) in items.iter().zip(d_hs.iter_mut()) {
                let g = match d {
                    Domain::Source => &mmd.source_grads,
                    Domain::Target => &mmd.target_grads,
                };
                for (i, &tag) in s.tags.iter().enumerate() {
                    let k = cursor[*d as usize].entry(tag).or_insert(0);
                    axpy(hyper.alpha, &g[&tag][*k], d_h.row_mut(i));
                    *k += 1;
                }
            }
        }

        let pen = strategy.param_loss(&model.params.source_head, &model.params.target_head, &model.label_map)?;
        loss.l_p = pen.value;
        grads.source_head.w.add_scaled(hyper.beta, &pen.d_source.w)?;
        grads.source_head.a.add_scaled(hyper.beta, &pen.d_source.a)?;
        grads.target_head.w.add_scaled(hyper.beta, &pen.d_target.w)?;
        grads.target_head.a.add_scaled(hyper.beta, &pen.d_target.a)?;
    }

    let mut reg = model.params.clone();
    for (g, p) in grads.regularized_mut().into_iter().zip(reg.regularized_mut()) {
        loss.l_r += p.frobenius_sq();
        g.add_scaled(2.0 * hyper.gamma, p)?;
    }

    let backs: Vec<Result<SentenceGrad>> = par_map(&(0..items.len()).collect::<Vec<_>>(), threads, |&k| {
        model.backward(&items[k].1.ids, &fwds[k], &d_hs[k])
    });
    for b in backs {
        let b = b?;
        for (dst, src) in grads.lstm.tensors_mut().into_iter().zip(b.lstm.tensors()) {
            dst.add_scaled(1.0, src)?;
        }
        if let (Some(dst), Some(src)) = (&mut grads.chars, &b.chars) {
            dst.embeddings.add_scaled(1.0, &src.embeddings)?;
            for (d, s) in dst.lstm.tensors_mut().into_iter().zip(src.lstm.tensors()) {
                d.add_scaled(1.0, s)?;
            }
        }
        for (id, row) in &b.embeddings {
            axpy(1.0, row, grads.embeddings.row_mut(*id));
        }
    }
    loss.total = loss.recompute_total(hyper);
    Ok((loss, grads))
}

/// Endless stream of indices into one corpus, reshuffled on every pass.
#[derive(Debug, Clone)]
pub struct DomainStream {
    order: Vec<usize>,
    pos: usize,
    passes: u64,
    seed: u64,
    name: String,
}

impl DomainStream {
    pub fn new(len: usize, seed: u64, name: &str) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config(format!("{name} corpus is empty")));
        }
        let mut s = DomainStream {
            order: (0..len).collect(),
            pos: 0,
            passes: 0,
            seed,
            name: name.to_string(),
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order.sort_unstable();
        let mut rng = stream_rng(self.seed, &format!("batch/{}/{}", self.name, self.passes));
        self.order.shuffle(&mut rng);
        self.passes += 1;
        self.pos = 0;
    }

    pub fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Draws mixed-domain batches; the scarcer domain is recycled.
#[derive(Debug, Clone)]
pub struct Batcher {
    source: Option<DomainStream>,
    target: DomainStream,
    batch_source: usize,
    batch_target: usize,
    batches_per_epoch: usize,
}

impl Batcher {
    /// `n_source = None` draws target batches only.
    pub fn new(
        n_source: Option<usize>,
        n_target: usize,
        batch_source: usize,
        batch_target: usize,
        seed: u64,
    ) -> Result<Self> {
        let source = n_source.map(|n| DomainStream::new(n, seed, "source")).transpose()?;
        let target = DomainStream::new(n_target, seed, "target")?;
        let per_target = n_target.div_ceil(batch_target);
        let per_source = n_source.map_or(0, |n| n.div_ceil(batch_source));
        Ok(Batcher {
            source,
            target,
            batch_source,
            batch_target,
            batches_per_epoch: per_source.max(per_target),
        })
    }

    /// `ceil(|D|/b)` for the larger domain.
    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    pub fn make_batch(&mut self) -> (Vec<usize>, Vec<usize>) {
        let s = self
            .source
            .as_mut()
            .map_or_else(Vec::new, |s| s.take(self.batch_source));
        (s, self.target.take(self.batch_target))
    }
}

/// One epoch's averaged losses and dev score.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub dev_f1: f64,
    pub wall_secs: f64,
}

impl EpochRecord {
    /// `epoch l_c l_lammd l_p l_r total dev_f1`.
    pub fn progress_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{} {:.10} {:.10} {:.10} {:.10} {:.10} {:.6}",
            self.epoch, l.l_c, l.l_lammd, l.l_p, l.l_r, l.total, self.dev_f1
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub seed: u64,
    pub mode: String,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose snapshot was kept.
    pub best_epoch: usize,
}

impl TrainRecord {
    pub fn best_dev_f1(&self) -> f64 {
        self.epochs[self.best_epoch - 1].dev_f1
    }
}

impl fmt::Display for TrainRecord {
    /// Header comments, then one progress line plus wall time per epoch.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# mode {}", self.mode)?;
        writeln!(f, "# seed {}", self.seed)?;
        writeln!(f, "# best_epoch {}", self.best_epoch)?;
        writeln!(f, "# epoch l_c l_lammd l_p l_r total dev_f1 wall_secs")?;
        for e in &self.epochs {
            writeln!(f, "{} {:.3}", e.progress_line(), e.wall_secs)?;
        }
        Ok(())
    }
}

pub struct TrainData<'a> {
    pub source: &'a [LabeledSentence],
    pub target: &'a [LabeledSentence],
    pub dev: &'a [LabeledSentence],
}

/// Trains with AdaGrad and early stopping on target dev F1.
///
/// Returns the best-dev snapshot. `progress` sees every finished epoch.
pub fn train(
    mut model: Model,
    hyper: &Hyperparams,
    strategy: &dyn TransferStrategy,
    data: &TrainData<'_>,
    threads: usize,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<(Model, TrainRecord)> {
    let mut hyper = hyper.clone();
    strategy.constrain(&mut hyper);
    hyper.validate()?;
    let use_source = strategy.uses_source();
    let source = if use_source {
        model.encode_all(data.source, Domain::Source)?
    } else {
        Vec::new()
    };
    let target = model.encode_all(data.target, Domain::Target)?;
    let mut batcher = Batcher::new(
        use_source.then_some(source.len()),
        target.len(),
        hyper.batch_source,
        hyper.batch_target,
        hyper.seed,
    )?;
    let mut states: Vec<AdaGradState> = model
        .params
        .tensors()
        .into_iter()
        .map(|m| AdaGradState::for_param(m, hyper.learning_rate))
        .collect();

    let mut record = TrainRecord {
        seed: hyper.seed,
        mode: strategy.name().to_string(),
        epochs: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, ModelParams)> = None;
    for epoch in 1..=hyper.max_epochs {
        let start = Instant::now();
        let mut sum = LossBreakdown::default();
        let n_batches = batcher.batches_per_epoch();
        for b in 1..=n_batches {
            let (is, it) = batcher.make_batch();
            let bs: Vec<EncodedSentence> = is.iter().map(|&i| source[i].clone()).collect();
            let bt: Vec<EncodedSentence> = it.iter().map(|&i| target[i].clone()).collect();
            let diverged = |msg: String| Error::Divergence {
                epoch,
                batch: b,
                msg: format!("{msg}; source sentences {is:?}, target sentences {it:?}"),
            };
            let (loss, grads) = total_loss(&model, &bs, &bt, &hyper, strategy, threads)?;
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(diverged(format!("non-finite loss {}", loss.total)));
            }
            for ((p, g), s) in model
                .params
                .tensors_mut()
                .into_iter()
                .zip(grads.tensors())
                .zip(&mut states)
            {
                s.apply(p, g)?;
            }
            if !model.params.is_finite() {
                return Err(diverged("parameters became non-finite".into()));
            }
            sum.l_c += loss.l_c;
            sum.l_lammd += loss.l_lammd;
            sum.l_p += loss.l_p;
            sum.l_r += loss.l_r;
            sum.total += loss.total;
        }
        let k = n_batches as f64;
        let avg = LossBreakdown {
            l_c: sum.l_c / k,
            l_lammd: sum.l_lammd / k,
            l_p: sum.l_p / k,
            l_r: sum.l_r / k,
            total: sum.total / k,
        };
        let dev_f1 = if data.dev.is_empty() {
            0.0
        } else {
            model.evaluate(data.dev, Domain::Target, threads)?.f1
        };
        let rec = EpochRecord {
            epoch,
            loss: avg,
            dev_f1,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        progress(&rec);
        record.epochs.push(rec);
        if best.as_ref().is_none_or(|(f, _)| dev_f1 > *f) {
            best = Some((dev_f1, model.params.clone()));
            record.best_epoch = epoch;
        } else if epoch - record.best_epoch >= hyper.patience {
            break;
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, record))
}

/// Gradient of `total_loss` through a flat parameter vector, for finite-difference checks.
pub fn total_loss_flat(
    model: &Model,
    batch_s: &[EncodedSentence],
    batch_t: &[EncodedSentence],
    hyper: &Hyperparams,
    strategy: &dyn TransferStrategy,
) -> Result<(f64, Vec<f64>)> {
    let (loss, grads) = total_loss(model, batch_s, batch_t, hyper, strategy, 1)?;
    Ok((loss.total, grads.flatten()))
}
