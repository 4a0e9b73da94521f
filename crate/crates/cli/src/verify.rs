//! Finite-difference gradient suites and KL-bound trials behind `verify`.

use rand::Rng;

use seqtransfer::corpus::{Domain, LabelMap, LabelScheme, LabeledSentence};
use seqtransfer::crf::{crf_gradients, CrfParams};
use seqtransfer::encoder::{
    bilstm_backward, bilstm_forward, encode_chars, encode_chars_backward, BiLstmParams, CharParams,
};
use seqtransfer::numerics::{grad_check, stream_rng, Matrix, StreamRng};
use seqtransfer::strategy::StrategyRegistry;
use seqtransfer::trainer::{char_vocab, total_loss, Hyperparams, Model};
use seqtransfer::transfer::{
    certify_kl_bound, la_mmd, param_penalty, BandwidthPolicy, BoundCertificate, LabeledHiddenPool, MmdConfig,
};
use seqtransfer::Result;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Sizes used by the gradient suites.
pub const D_EMB: usize = 8;
pub const D_LSTM: usize = 8;
/// One entity type gives 5 tags.
pub const NUM_TAGS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub trials: usize,
    /// Largest relative error per trial.
    pub errors: Vec<f64>,
}

impl SuiteResult {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < GRAD_TOLERANCE
    }

    pub fn failing_trials(&self) -> Vec<usize> {
        (0..self.errors.len())
            .filter(|&i| self.errors[i] >= GRAD_TOLERANCE)
            .collect()
    }

    pub fn to_line(&self) -> String {
        format!(
            "gradcheck {} trials={} max_rel_err={:.3e} {}",
            self.name,
            self.trials,
            self.max_error(),
            if self.passed() { "pass" } else { "fail" }
        )
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    Matrix::uniform(rows, cols, bound, rng)
}

fn randomize(m: &mut Matrix, rng: &mut impl Rng, bound: f64) {
    for v in m.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
}

fn flat(ms: &[&Matrix]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.data().iter().copied()).collect()
}

fn unflat(ms: &mut [&mut Matrix], f: &[f64]) {
    let mut off = 0;
    for m in ms.iter_mut() {
        let n = m.data().len();
        m.data_mut().copy_from_slice(&f[off..off + n]);
        off += n;
    }
}

/// Word-level Bi-LSTM: parameters and inputs under a random linear read-out of `H`.
fn encoder_trial(rng: &mut impl Rng) -> Result<f64> {
    let n = rng.gen_range(1..=6);
    let mut params = BiLstmParams::zeros(D_EMB, D_LSTM);
    for m in params.tensors_mut() {
        randomize(m, rng, 0.5);
    }
    let x = uniform(rng, n, D_EMB, 1.0);
    let readout = uniform(rng, n, 2 * D_LSTM, 1.0);
    let loss = |p: &BiLstmParams, x: &Matrix| -> f64 {
        let (h, _) = bilstm_forward(&x.to_rows(), p).unwrap();
        h.data().iter().zip(readout.data()).map(|(a, b)| a * b).sum()
    };
    let (_, cache) = bilstm_forward(&x.to_rows(), &params)?;
    let (g, dx) = bilstm_backward(&params, &cache, &readout)?;
    let mut analytic = flat(&g.tensors());
    analytic.extend(dx.into_iter().flatten());
    let mut point = flat(&params.tensors());
    point.extend_from_slice(x.data());
    let n_params = point.len() - x.data().len();
    let mut p = params.clone();
    let mut xx = x.clone();
    grad_check(
        |f| {
            unflat(&mut p.tensors_mut(), &f[..n_params]);
            xx.data_mut().copy_from_slice(&f[n_params..]);
            loss(&p, &xx)
        },
        &analytic,
        &point,
        GRAD_STEP,
    )
}

/// Char encoder over a random word.
fn char_trial(rng: &mut impl Rng) -> Result<f64> {
    let alphabet = ["a", "b", "c", "d"];
    let len = rng.gen_range(1..=5);
    let word: String = (0..len).map(|_| alphabet[rng.gen_range(0..4)]).collect();
    let vocab = char_vocab(&alphabet);
    let mut params = CharParams::init(vocab.len(), 3, rng);
    randomize(&mut params.embeddings, rng, 0.5);
    let readout: Vec<f64> = (0..params.d_out()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, cache) = encode_chars(&word, &vocab, &params)?;
    let mut grads = params.zeros_like();
    encode_chars_backward(&params, &cache, &readout, &mut grads)?;
    let tensors = |c: &CharParams| {
        let mut t = vec![c.embeddings.clone()];
        t.extend(c.lstm.tensors().into_iter().cloned());
        t
    };
    let analytic = flat(&tensors(&grads).iter().collect::<Vec<_>>());
    let point = flat(&tensors(&params).iter().collect::<Vec<_>>());
    let mut p = params.clone();
    grad_check(
        |f| {
            let n = p.embeddings.data().len();
            p.embeddings.data_mut().copy_from_slice(&f[..n]);
            unflat(&mut p.lstm.tensors_mut(), &f[n..]);
            let (out, _) = encode_chars(&word, &vocab, &p).unwrap();
            out.iter().zip(&readout).map(|(a, b)| a * b).sum()
        },
        &analytic,
        &point,
        GRAD_STEP,
    )
}

/// CRF negative log-likelihood with respect to `W`, `A` and `H`.
fn crf_trial(rng: &mut impl Rng) -> Result<f64> {
    let n = rng.gen_range(1..=6);
    let d = 2 * D_LSTM;
    let h = uniform(rng, n, d, 1.0);
    let w = uniform(rng, d, NUM_TAGS, 0.5);
    let a = uniform(rng, NUM_TAGS, NUM_TAGS, 1.0);
    let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..NUM_TAGS)).collect();
    let g = crf_gradients(&h, &w, &a, &y)?;
    let analytic = flat(&[&g.d_w, &g.d_a, &g.d_h]);
    let point = flat(&[&w, &a, &h]);
    let (mut w2, mut a2, mut h2) = (w.clone(), a.clone(), h.clone());
    grad_check(
        |f| {
            unflat(&mut [&mut w2, &mut a2, &mut h2], f);
            crf_gradients(&h2, &w2, &a2, &y).unwrap().loss
        },
        &analytic,
        &point,
        GRAD_STEP,
    )
}

fn random_pools(rng: &mut impl Rng, d: usize) -> (LabeledHiddenPool, LabeledHiddenPool) {
    let mut s = LabeledHiddenPool::new();
    let mut t = LabeledHiddenPool::new();
    for tag in 0..3 {
        for _ in 0..rng.gen_range(1..4) {
            s.push(tag, (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        }
        for _ in 0..rng.gen_range(1..4) {
            t.push(tag, (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
        }
    }
    (s, t)
}

fn rebuild(template: &LabeledHiddenPool, flat: &[f64], d: usize) -> LabeledHiddenPool {
    let mut p = LabeledHiddenPool::new();
    let mut rows = flat.chunks(d);
    for tag in template.tags() {
        for _ in template.get(tag) {
            p.push(tag, rows.next().unwrap().to_vec());
        }
    }
    p
}

/// Label-aware MMD with a fixed bandwidth, with respect to every pooled vector.
fn la_mmd_trial(rng: &mut impl Rng) -> Result<f64> {
    let d = 4;
    let (s, t) = random_pools(rng, d);
    let mut cfg = MmdConfig::new(
        vec![(0, 0), (1, 1), (2, 2)],
        BandwidthPolicy::Fixed(rng.gen_range(0.5..2.0)),
    );
    cfg.mu.insert(1, rng.gen_range(0.0..2.0));
    let out = la_mmd(&s, &t, &cfg)?;
    let analytic: Vec<f64> = out
        .source_grads
        .values()
        .chain(out.target_grads.values())
        .flatten()
        .flatten()
        .copied()
        .collect();
    let mut point: Vec<f64> = s.iter().flatten().copied().collect();
    let ns = point.len();
    point.extend(t.iter().flatten().copied());
    if point.is_empty() {
        return Ok(0.0);
    }
    grad_check(
        |f| {
            la_mmd(&rebuild(&s, &f[..ns], d), &rebuild(&t, &f[ns..], d), &cfg)
                .unwrap()
                .value
        },
        &analytic,
        &point,
        GRAD_STEP,
    )
}

fn penalty_trial(rng: &mut impl Rng) -> Result<f64> {
    let d = 2 * D_LSTM;
    let ms: Vec<Matrix> = (0..4)
        .map(|k| {
            if k % 2 == 0 {
                uniform(rng, d, NUM_TAGS, 1.0)
            } else {
                uniform(rng, NUM_TAGS, NUM_TAGS, 1.0)
            }
        })
        .collect();
    let p = param_penalty(&ms[0], &ms[1], &ms[2], &ms[3])?;
    let analytic = flat(&[&p.d_source.w, &p.d_source.a, &p.d_target.w, &p.d_target.a]);
    let point = flat(&ms.iter().collect::<Vec<_>>());
    let mut m2 = ms.clone();
    grad_check(
        |f| {
            unflat(&mut m2.iter_mut().collect::<Vec<_>>(), f);
            param_penalty(&m2[0], &m2[1], &m2[2], &m2[3]).unwrap().value
        },
        &analytic,
        &point,
        GRAD_STEP,
    )
}

fn random_sentence(rng: &mut impl Rng, domain: Domain) -> LabeledSentence {
    let n = rng.gen_range(1..=5);
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    while tokens.len() < n {
        if rng.gen_bool(0.3) {
            tokens.push(format!("e{}", rng.gen_range(0..4)));
            labels.push("S-E".to_string());
        } else if n - tokens.len() >= 2 && rng.gen_bool(0.2) {
            tokens.extend([format!("e{}", rng.gen_range(0..4)), format!("f{}", rng.gen_range(0..3))]);
            labels.extend(["B-E".to_string(), "E-E".to_string()]);
        } else {
            tokens.push(format!("w{}", rng.gen_range(0..6)));
            labels.push("O".to_string());
        }
    }
    LabeledSentence::new(tokens, labels, domain).expect("generated sentences are valid")
}

/// The full objective in `mode`, with respect to every model parameter.
fn total_trial(rng: &mut impl Rng, mode: &str, d_char: usize) -> Result<f64> {
    let registry = StrategyRegistry::default();
    let strategy = registry.get(mode)?;
    let mut hyper = Hyperparams {
        mode: mode.into(),
        d_emb: D_EMB,
        d_lstm: D_LSTM,
        d_char,
        bandwidth: Some(rng.gen_range(1.0..3.0)),
        alpha: rng.gen_range(0.1..1.0),
        beta: rng.gen_range(0.1..1.0),
        gamma: rng.gen_range(1e-3..1e-2),
        epsilon: rng.gen_range(0.1..0.9),
        seed: rng.gen(),
        ..Hyperparams::default()
    };
    strategy.constrain(&mut hyper);
    let src: Vec<LabeledSentence> = (0..2).map(|_| random_sentence(rng, Domain::Source)).collect();
    let tgt: Vec<LabeledSentence> = (0..2).map(|_| random_sentence(rng, Domain::Target)).collect();
    let scheme = LabelScheme::new(["E"])?;
    let tokens: Vec<&str> = src
        .iter()
        .chain(&tgt)
        .flat_map(|s| s.tokens.iter().map(String::as_str))
        .collect();
    let mut model = Model::from_tokens(
        &hyper,
        &tokens,
        scheme.clone(),
        scheme.clone(),
        LabelMap::identity(&scheme),
    )?;
    for m in [&mut model.params.source_head.a, &mut model.params.target_head.a] {
        randomize(m, rng, 0.5);
    }
    let bs = model.encode_all(&src, Domain::Source)?;
    let bt = model.encode_all(&tgt, Domain::Target)?;
    let (_, grads) = total_loss(&model, &bs, &bt, &hyper, strategy, 1)?;
    let point = model.params.flatten();
    grad_check(
        |f| {
            model.params.assign(f).unwrap();
            total_loss(&model, &bs, &bt, &hyper, strategy, 1).unwrap().0.total
        },
        &grads.flatten(),
        &point,
        GRAD_STEP,
    )
}

fn suite(
    name: &'static str,
    seed: u64,
    trials: usize,
    mut trial: impl FnMut(&mut StreamRng) -> Result<f64>,
) -> Result<SuiteResult> {
    let mut rng = stream_rng(seed, &format!("verify/{name}"));
    let errors = (0..trials).map(|_| trial(&mut rng)).collect::<Result<Vec<_>>>()?;
    Ok(SuiteResult { name, trials, errors })
}

/// Runs every gradient suite at `trials` random points each.
pub fn gradcheck(seed: u64, trials: usize) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        suite("encoder", seed, trials, |r| encoder_trial(r))?,
        suite("char_encoder", seed, trials, |r| char_trial(r))?,
        suite("crf", seed, trials, |r| crf_trial(r))?,
        suite("la_mmd", seed, trials, |r| la_mmd_trial(r))?,
        suite("param_penalty", seed, trials, |r| penalty_trial(r))?,
        suite("total_loss", seed, trials, |r| total_trial(r, "la_dtl", 0))?,
        suite("total_loss_vanilla", seed, trials, |r| {
            total_trial(r, "vanilla_mmd_crf_l2", 0)
        })?,
        suite("total_loss_chars", seed, trials, |r| total_trial(r, "la_dtl", 2))?,
    ])
}

/// A random certification instance: `n ≤ 6`, `2 ≤ m ≤ 4`, entries uniform in [−1, 1].
pub fn random_bound_instance(rng: &mut impl Rng) -> (Matrix, CrfParams, CrfParams) {
    let n = rng.gen_range(1..=6);
    let m = rng.gen_range(2..=4);
    let d = rng.gen_range(1..=4);
    let h = uniform(rng, n, d, 1.0);
    let mut head = || CrfParams {
        w: uniform(rng, d, m, 1.0),
        a: uniform(rng, m, m, 1.0),
    };
    let s = head();
    let t = head();
    (h, s, t)
}

pub fn bound_trials(seed: u64, trials: usize) -> Result<Vec<BoundCertificate>> {
    let mut rng = stream_rng(seed, "verify/bound");
    (0..trials)
        .map(|_| {
            let (h, s, t) = random_bound_instance(&mut rng);
            certify_kl_bound(&h, &s, &t)
        })
        .collect()
}

pub const SWEEP_DELTAS: [f64; 3] = [1e-1, 1e-2, 1e-3];

/// Certificates for target heads that differ from the source head by `δ` in one `W` entry.
pub fn delta_sweep(seed: u64) -> Result<Vec<(f64, BoundCertificate)>> {
    let mut rng = stream_rng(seed, "verify/sweep");
    let (h, s, _) = random_bound_instance(&mut rng);
    SWEEP_DELTAS
        .iter()
        .map(|&delta| {
            let mut t = s.clone();
            t.w.add_at(0, 0, delta);
            Ok((delta, certify_kl_bound(&h, &s, &t)?))
        })
        .collect()
}

/// Whether `exact_kl / bound` strictly decreases along the sweep.
pub fn sweep_ratio_decreases(sweep: &[(f64, BoundCertificate)]) -> bool {
    let ratios: Vec<f64> = sweep.iter().map(|(_, c)| c.exact_kl / c.bound).collect();
    ratios.windows(2).all(|w| w[1] < w[0])
}
