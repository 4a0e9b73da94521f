//! Linear-chain CRF head over encoder hidden states.
//!
//! The sequence score is `Σ E[i][y_i] + Σ A[y_i][y_{i+1}]` with `E = H·W`.
//! There are no start/stop transitions. All dynamic programs run in log space.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Matrix};

/// Emission weights `W` (`d_hidden × m`) and transitions `A` (`m × m`).
#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    pub w: Matrix,
    pub a: Matrix,
}

impl CrfParams {
    pub fn zeros(d_hidden: usize, num_tags: usize) -> Self {
        CrfParams {
            w: Matrix::zeros(d_hidden, num_tags),
            a: Matrix::zeros(num_tags, num_tags),
        }
    }

    /// Glorot-uniform emissions, zero transitions.
    pub fn init<R: Rng + ?Sized>(d_hidden: usize, num_tags: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (d_hidden + num_tags) as f64).sqrt();
        CrfParams {
            w: Matrix::uniform(d_hidden, num_tags, bound, rng),
            a: Matrix::zeros(num_tags, num_tags),
        }
    }

    pub fn num_tags(&self) -> usize {
        self.a.rows()
    }

    pub fn d_hidden(&self) -> usize {
        self.w.rows()
    }

    pub fn check(&self) -> Result<()> {
        let m = self.a.rows();
        if self.a.cols() != m || self.w.cols() != m {
            return Err(Error::Shape(format!(
                "CRF head has W {}x{} and A {}x{}",
                self.w.rows(),
                self.w.cols(),
                self.a.rows(),
                self.a.cols()
            )));
        }
        Ok(())
    }
}

fn check_transitions(e: &Matrix, a: &Matrix) -> Result<()> {
    if a.rows() != a.cols() || a.rows() != e.cols() {
        return Err(Error::Shape(format!(
            "emissions have {} labels but transitions are {}x{}",
            e.cols(),
            a.rows(),
            a.cols()
        )));
    }
    if e.rows() == 0 {
        return Err(Error::Shape("empty sequence".into()));
    }
    Ok(())
}

fn check_labels(e: &Matrix, y: &[usize]) -> Result<()> {
    if y.len() != e.rows() {
        return Err(Error::Shape(format!(
            "{} labels for a sequence of length {}",
            y.len(),
            e.rows()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&k| k >= e.cols()) {
        return Err(Error::Parameter(format!(
            "label index {bad} out of range for {} tags",
            e.cols()
        )));
    }
    Ok(())
}

/// `E = H·W`.
pub fn emission(h: &Matrix, w: &Matrix) -> Result<Matrix> {
    h.matmul(w)
}

/// Score of the label sequence `y`.
pub fn score(e: &Matrix, a: &Matrix, y: &[usize]) -> Result<f64> {
    check_transitions(e, a)?;
    check_labels(e, y)?;
    let unary: f64 = y.iter().enumerate().map(|(i, &k)| e.get(i, k)).sum();
    let pair: f64 = y.windows(2).map(|w| a.get(w[0], w[1])).sum();
    Ok(unary + pair)
}

/// Forward log-messages: `alpha[i][k]` is the log-sum of scores of all prefixes ending in `k` at `i`.
fn forward(e: &Matrix, a: &Matrix) -> Matrix {
    let (n, m) = e.shape();
    let mut alpha = Matrix::zeros(n, m);
    alpha.row_mut(0).copy_from_slice(e.row(0));
    let mut buf = vec![0.0; m];
    for i in 1..n {
        for k in 0..m {
            for (p, b) in buf.iter_mut().enumerate() {
                *b = alpha.get(i - 1, p) + a.get(p, k);
            }
            alpha.set(i, k, e.get(i, k) + log_sum_exp(&buf));
        }
    }
    alpha
}

/// Backward log-messages: `beta[i][k]` is the log-sum of scores of all suffixes after `k` at `i`.
fn backward(e: &Matrix, a: &Matrix) -> Matrix {
    let (n, m) = e.shape();
    let mut beta = Matrix::zeros(n, m);
    let mut buf = vec![0.0; m];
    for i in (0..n.saturating_sub(1)).rev() {
        for p in 0..m {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = a.get(p, k) + e.get(i + 1, k) + beta.get(i + 1, k);
            }
            beta.set(i, p, log_sum_exp(&buf));
        }
    }
    beta
}

/// `log Z`, the log-sum of exponentiated scores over all `m^n` sequences.
pub fn log_partition(e: &Matrix, a: &Matrix) -> Result<f64> {
    check_transitions(e, a)?;
    let alpha = forward(e, a);
    Ok(log_sum_exp(alpha.row(e.rows() - 1)))
}

/// `log p(y | H) = score − log Z`.
pub fn log_likelihood(e: &Matrix, a: &Matrix, y: &[usize]) -> Result<f64> {
    Ok(score(e, a, y)? - log_partition(e, a)?)
}

/// Posterior marginals from forward–backward.
#[derive(Debug, Clone)]
pub struct Marginals {
    /// `P(y_i = k | H)`, `n × m`.
    pub node: Matrix,
    /// `Σ_i P(y_i = p, y_{i+1} = q | H)`, `m × m`.
    pub edge: Matrix,
    pub log_z: f64,
}

pub fn marginals(e: &Matrix, a: &Matrix) -> Result<Marginals> {
    check_transitions(e, a)?;
    let (n, m) = e.shape();
    let alpha = forward(e, a);
    let beta = backward(e, a);
    let log_z = log_sum_exp(alpha.row(n - 1));
    let mut node = Matrix::zeros(n, m);
    for i in 0..n {
        for k in 0..m {
            node.set(i, k, (alpha.get(i, k) + beta.get(i, k) - log_z).exp());
        }
    }
    let mut edge = Matrix::zeros(m, m);
    for i in 0..n.saturating_sub(1) {
        for p in 0..m {
            let ap = alpha.get(i, p);
            for q in 0..m {
                let lp = ap + a.get(p, q) + e.get(i + 1, q) + beta.get(i + 1, q) - log_z;
                edge.add_at(p, q, lp.exp());
            }
        }
    }
    Ok(Marginals { node, edge, log_z })
}

/// Negative log-likelihood with its gradients w.r.t. emissions and transitions.
#[derive(Debug, Clone)]
pub struct EmissionGrad {
    pub nll: f64,
    pub d_e: Matrix,
    pub d_a: Matrix,
}

/// `−log p(y|H)` and its derivatives in terms of `E` and `A`.
pub fn nll_emission_grad(e: &Matrix, a: &Matrix, y: &[usize]) -> Result<EmissionGrad> {
    check_transitions(e, a)?;
    check_labels(e, y)?;
    let marg = marginals(e, a)?;
    let mut d_e = marg.node;
    for (i, &k) in y.iter().enumerate() {
        d_e.add_at(i, k, -1.0);
    }
    let mut d_a = marg.edge;
    for w in y.windows(2) {
        d_a.add_at(w[0], w[1], -1.0);
    }
    let nll = marg.log_z - score(e, a, y)?;
    Ok(EmissionGrad { nll, d_e, d_a })
}

/// Gradients of `L = −log p(y|H)` for one sentence.
#[derive(Debug, Clone)]
pub struct CrfGradients {
    pub loss: f64,
    pub d_w: Matrix,
    pub d_a: Matrix,
    pub d_h: Matrix,
}

pub fn crf_gradients(h: &Matrix, w: &Matrix, a: &Matrix, y: &[usize]) -> Result<CrfGradients> {
    let e = emission(h, w)?;
    let g = nll_emission_grad(&e, a, y)?;
    Ok(CrfGradients {
        loss: g.nll,
        d_w: h.t_matmul(&g.d_e)?,
        d_a: g.d_a,
        d_h: g.d_e.matmul_t(w)?,
    })
}

/// Highest-scoring label sequence and its score.
///
/// Ties go to the smaller label index, both for the final label and at every
/// back-pointer.
pub fn viterbi(e: &Matrix, a: &Matrix) -> Result<(Vec<usize>, f64)> {
    check_transitions(e, a)?;
    let (n, m) = e.shape();
    let mut delta = e.row(0).to_vec();
    let mut back = vec![vec![0usize; m]; n];
    let mut next = vec![0.0; m];
    for i in 1..n {
        for k in 0..m {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (p, &d) in delta.iter().enumerate() {
                let s = d + a.get(p, k);
                if s > best {
                    best = s;
                    arg = p;
                }
            }
            next[k] = best + e.get(i, k);
            back[i][k] = arg;
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut last = 0;
    for k in 1..m {
        if delta[k] > delta[last] {
            last = k;
        }
    }
    let best = delta[last];
    let mut path = vec![0; n];
    path[n - 1] = last;
    for i in (1..n).rev() {
        path[i - 1] = back[i][path[i]];
    }
    Ok((path, best))
}
