//! Embedding lookup, bidirectional LSTM and the optional character-level
//! encoder, each with a hand-written backward pass.
//!
//! Gate layout inside every stacked weight matrix is `[input, forget, output,
//! candidate]`, `d_lstm` rows each.

use rand::Rng;

use crate::corpus::{EmbeddingTable, Vocab};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Matrix};

/// Parameters of one LSTM direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// Input weights, `4·d_lstm × d_in`.
    pub w: Matrix,
    /// Recurrent weights, `4·d_lstm × d_lstm`.
    pub u: Matrix,
    /// Biases, `4·d_lstm × 1`.
    pub b: Matrix,
}

impl LstmParams {
    pub fn zeros(d_in: usize, d_lstm: usize) -> Self {
        LstmParams {
            w: Matrix::zeros(4 * d_lstm, d_in),
            u: Matrix::zeros(4 * d_lstm, d_lstm),
            b: Matrix::zeros(4 * d_lstm, 1),
        }
    }

    /// Glorot-uniform weights, zero biases except the forget gate at +1.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_lstm: usize, rng: &mut R) -> Self {
        let w_bound = (6.0 / (d_in + d_lstm) as f64).sqrt();
        let u_bound = (6.0 / (2 * d_lstm) as f64).sqrt();
        let mut p = LstmParams {
            w: Matrix::uniform(4 * d_lstm, d_in, w_bound, rng),
            u: Matrix::uniform(4 * d_lstm, d_lstm, u_bound, rng),
            b: Matrix::zeros(4 * d_lstm, 1),
        };
        for r in d_lstm..2 * d_lstm {
            p.b.set(r, 0, 1.0);
        }
        p
    }

    pub fn d_lstm(&self) -> usize {
        self.u.cols()
    }

    pub fn d_in(&self) -> usize {
        self.w.cols()
    }

    fn check(&self) -> Result<()> {
        let h = self.u.cols();
        if self.u.rows() != 4 * h || self.w.rows() != 4 * h || self.b.shape() != (4 * h, 1) {
            return Err(Error::Shape("inconsistent LSTM parameter shapes".into()));
        }
        Ok(())
    }
}

/// Forward and backward LSTM parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BiLstmParams {
    pub fn zeros(d_in: usize, d_lstm: usize) -> Self {
        BiLstmParams {
            fwd: LstmParams::zeros(d_in, d_lstm),
            bwd: LstmParams::zeros(d_in, d_lstm),
        }
    }

    pub fn init<R: Rng + ?Sized>(d_in: usize, d_lstm: usize, rng: &mut R) -> Self {
        BiLstmParams {
            fwd: LstmParams::init(d_in, d_lstm, rng),
            bwd: LstmParams::init(d_in, d_lstm, rng),
        }
    }

    pub fn d_in(&self) -> usize {
        self.fwd.d_in()
    }

    pub fn d_lstm(&self) -> usize {
        self.fwd.d_lstm()
    }

    /// Output width, `2·d_lstm`.
    pub fn d_hidden(&self) -> usize {
        2 * self.d_lstm()
    }

    /// Same parameters with the two directions exchanged.
    pub fn mirrored(&self) -> Self {
        BiLstmParams {
            fwd: self.bwd.clone(),
            bwd: self.fwd.clone(),
        }
    }

    pub fn tensors(&self) -> [&Matrix; 6] {
        [
            &self.fwd.w,
            &self.fwd.u,
            &self.fwd.b,
            &self.bwd.w,
            &self.bwd.u,
            &self.bwd.b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.fwd.w,
            &mut self.fwd.u,
            &mut self.fwd.b,
            &mut self.bwd.w,
            &mut self.bwd.u,
            &mut self.bwd.b,
        ]
    }

    fn check(&self) -> Result<()> {
        self.fwd.check()?;
        self.bwd.check()?;
        if self.fwd.w.shape() != self.bwd.w.shape() || self.fwd.u.shape() != self.bwd.u.shape() {
            return Err(Error::Shape("forward and backward LSTMs differ in shape".into()));
        }
        Ok(())
    }
}

/// Per-direction activations kept for the backward pass.
#[derive(Debug, Clone)]
struct DirectionCache {
    /// Gate activations per step, `4·d_lstm` each, in processing order.
    gates: Vec<Vec<f64>>,
    cells: Vec<Vec<f64>>,
    tanh_cells: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
}

/// Activations of one [`bilstm_forward`] call.
#[derive(Debug, Clone)]
pub struct BiLstmCache {
    inputs: Vec<Vec<f64>>,
    fwd: DirectionCache,
    bwd: DirectionCache,
    d_in: usize,
    d_lstm: usize,
}

impl BiLstmCache {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Hidden vectors `h_t = h_t→ ⊕ h_t←`, one row per token.
pub type HiddenSeq = Matrix;

fn run_direction(params: &LstmParams, inputs: &[Vec<f64>], order: impl Iterator<Item = usize>) -> DirectionCache {
    let h = params.d_lstm();
    let n = inputs.len();
    let mut cache = DirectionCache {
        gates: Vec::with_capacity(n),
        cells: Vec::with_capacity(n),
        tanh_cells: Vec::with_capacity(n),
        hidden: Vec::with_capacity(n),
    };
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    for t in order {
        let mut z = params.b.data().to_vec();
        params.w.matvec_acc(&inputs[t], &mut z);
        params.u.matvec_acc(&h_prev, &mut z);
        for v in &mut z[..3 * h] {
            *v = sigmoid(*v);
        }
        for v in &mut z[3 * h..] {
            *v = v.tanh();
        }
        let mut c = vec![0.0; h];
        let mut tc = vec![0.0; h];
        let mut hh = vec![0.0; h];
        for k in 0..h {
            let (i, f, o, g) = (z[k], z[h + k], z[2 * h + k], z[3 * h + k]);
            c[k] = f * c_prev[k] + i * g;
            tc[k] = c[k].tanh();
            hh[k] = o * tc[k];
        }
        h_prev.clone_from(&hh);
        c_prev.clone_from(&c);
        cache.gates.push(z);
        cache.cells.push(c);
        cache.tanh_cells.push(tc);
        cache.hidden.push(hh);
    }
    cache
}

/// Runs the bidirectional LSTM from zero initial states at both ends.
pub fn bilstm_forward(inputs: &[Vec<f64>], params: &BiLstmParams) -> Result<(HiddenSeq, BiLstmCache)> {
    params.check()?;
    let d_in = params.d_in();
    if let Some(bad) = inputs.iter().find(|x| x.len() != d_in) {
        return Err(Error::Shape(format!(
            "input vector has dimension {}, LSTM expects {d_in}",
            bad.len()
        )));
    }
    let n = inputs.len();
    let h = params.d_lstm();
    let fwd = run_direction(&params.fwd, inputs, 0..n);
    let bwd = run_direction(&params.bwd, inputs, (0..n).rev());
    let mut out = Matrix::zeros(n, 2 * h);
    for t in 0..n {
        let row = out.row_mut(t);
        row[..h].copy_from_slice(&fwd.hidden[t]);
        row[h..].copy_from_slice(&bwd.hidden[n - 1 - t]);
    }
    let cache = BiLstmCache {
        inputs: inputs.to_vec(),
        fwd,
        bwd,
        d_in,
        d_lstm: h,
    };
    Ok((out, cache))
}

fn backprop_direction(
    params: &LstmParams,
    cache: &DirectionCache,
    inputs: &[Vec<f64>],
    positions: &[usize],
    d_hidden: &[Vec<f64>],
    grads: &mut LstmParams,
    d_inputs: &mut [Vec<f64>],
) {
    let h = params.d_lstm();
    let steps = positions.len();
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dz = vec![0.0; 4 * h];
    let zeros = vec![0.0; h];
    for s in (0..steps).rev() {
        let t = positions[s];
        let z = &cache.gates[s];
        let tc = &cache.tanh_cells[s];
        let c_prev = if s > 0 { &cache.cells[s - 1] } else { &zeros };
        let h_prev = if s > 0 { &cache.hidden[s - 1] } else { &zeros };
        for k in 0..h {
            let (i, f, o, g) = (z[k], z[h + k], z[2 * h + k], z[3 * h + k]);
            let dh = d_hidden[s][k] + dh_next[k];
            let dc = dh * o * (1.0 - tc[k] * tc[k]) + dc_next[k];
            dz[k] = dc * g * i * (1.0 - i);
            dz[h + k] = dc * c_prev[k] * f * (1.0 - f);
            dz[2 * h + k] = dh * tc[k] * o * (1.0 - o);
            dz[3 * h + k] = dc * i * (1.0 - g * g);
            dc_next[k] = dc * f;
        }
        grads.w.add_outer(1.0, &dz, &inputs[t]);
        grads.u.add_outer(1.0, &dz, h_prev);
        for (gb, d) in grads.b.data_mut().iter_mut().zip(&dz) {
            *gb += d;
        }
        params.w.t_matvec_acc(&dz, &mut d_inputs[t]);
        dh_next.fill(0.0);
        params.u.t_matvec_acc(&dz, &mut dh_next);
    }
}

/// Reverse-mode gradients of a loss through [`bilstm_forward`].
///
/// `d_hidden` is `dL/dH` with the same shape as the forward output. Returns
/// the parameter gradients and `dL/dX`, one row per input.
pub fn bilstm_backward(
    params: &BiLstmParams,
    cache: &BiLstmCache,
    d_hidden: &Matrix,
) -> Result<(BiLstmParams, Vec<Vec<f64>>)> {
    let n = cache.len();
    let h = cache.d_lstm;
    if params.d_lstm() != h || params.d_in() != cache.d_in {
        return Err(Error::Usage("LSTM cache does not match these parameters".into()));
    }
    if d_hidden.shape() != (n, 2 * h) {
        return Err(Error::Usage(format!(
            "dL/dH is {}x{} but the cached forward pass produced {n}x{}",
            d_hidden.rows(),
            d_hidden.cols(),
            2 * h
        )));
    }
    let mut grads = BiLstmParams::zeros(cache.d_in, h);
    let mut d_inputs = vec![vec![0.0; cache.d_in]; n];

    let fwd_pos: Vec<usize> = (0..n).collect();
    let fwd_dh: Vec<Vec<f64>> = (0..n).map(|t| d_hidden.row(t)[..h].to_vec()).collect();
    backprop_direction(
        &params.fwd,
        &cache.fwd,
        &cache.inputs,
        &fwd_pos,
        &fwd_dh,
        &mut grads.fwd,
        &mut d_inputs,
    );

    let bwd_pos: Vec<usize> = (0..n).rev().collect();
    let bwd_dh: Vec<Vec<f64>> = bwd_pos.iter().map(|&t| d_hidden.row(t)[h..].to_vec()).collect();
    backprop_direction(
        &params.bwd,
        &cache.bwd,
        &cache.inputs,
        &bwd_pos,
        &bwd_dh,
        &mut grads.bwd,
        &mut d_inputs,
    );
    Ok((grads, d_inputs))
}

/// Embedding rows for `tokens`, `<UNK>` for unknown ones.
pub fn embed<S: AsRef<str>>(tokens: &[S], table: &EmbeddingTable) -> Vec<Vec<f64>> {
    tokens.iter().map(|t| table.lookup(t.as_ref()).to_vec()).collect()
}

/// Character embeddings plus a character-level Bi-LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct CharParams {
    pub embeddings: Matrix,
    pub lstm: BiLstmParams,
}

impl CharParams {
    pub fn init<R: Rng + ?Sized>(n_chars: usize, d_char: usize, rng: &mut R) -> Self {
        let mut embeddings = Matrix::uniform(n_chars, d_char, (3.0 / d_char as f64).sqrt(), rng);
        embeddings.row_mut(Vocab::PAD_ID).fill(0.0);
        CharParams {
            embeddings,
            lstm: BiLstmParams::init(d_char, d_char, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        CharParams {
            embeddings: Matrix::zeros_like(&self.embeddings),
            lstm: BiLstmParams::zeros(self.lstm.d_in(), self.lstm.d_lstm()),
        }
    }

    /// Output width, `2·d_char`.
    pub fn d_out(&self) -> usize {
        self.lstm.d_hidden()
    }
}

/// Cached state of one [`encode_chars`] call.
#[derive(Debug, Clone)]
pub struct CharCache {
    char_ids: Vec<usize>,
    lstm: Option<BiLstmCache>,
}

/// Encodes a word as final forward state ⊕ final backward state of the char Bi-LSTM.
///
/// The empty word encodes to the zero vector.
pub fn encode_chars(word: &str, chars: &Vocab, params: &CharParams) -> Result<(Vec<f64>, CharCache)> {
    let char_ids: Vec<usize> = word
        .chars()
        .map(|c| {
            let mut buf = [0u8; 4];
            chars.id(c.encode_utf8(&mut buf))
        })
        .collect();
    let d = params.lstm.d_lstm();
    if char_ids.is_empty() {
        return Ok((vec![0.0; 2 * d], CharCache { char_ids, lstm: None }));
    }
    let inputs: Vec<Vec<f64>> = char_ids.iter().map(|&c| params.embeddings.row(c).to_vec()).collect();
    let (hid, cache) = bilstm_forward(&inputs, &params.lstm)?;
    let n = inputs.len();
    let mut out = Vec::with_capacity(2 * d);
    out.extend_from_slice(&hid.row(n - 1)[..d]);
    out.extend_from_slice(&hid.row(0)[d..]);
    Ok((
        out,
        CharCache {
            char_ids,
            lstm: Some(cache),
        },
    ))
}

/// Accumulates the gradients of [`encode_chars`] given `dL/d(output)`.
pub fn encode_chars_backward(
    params: &CharParams,
    cache: &CharCache,
    d_out: &[f64],
    grads: &mut CharParams,
) -> Result<()> {
    let Some(lstm_cache) = &cache.lstm else {
        return Ok(());
    };
    let d = params.lstm.d_lstm();
    if d_out.len() != 2 * d {
        return Err(Error::Shape(format!(
            "char encoder gradient has {} entries, expected {}",
            d_out.len(),
            2 * d
        )));
    }
    let n = cache.char_ids.len();
    let mut dh = Matrix::zeros(n, 2 * d);
    dh.row_mut(n - 1)[..d].copy_from_slice(&d_out[..d]);
    dh.row_mut(0)[d..]
        .iter_mut()
        .zip(&d_out[d..])
        .for_each(|(a, b)| *a += b);
    let (g, dx) = bilstm_backward(&params.lstm, lstm_cache, &dh)?;
    for (dst, src) in grads.lstm.tensors_mut().into_iter().zip(g.tensors()) {
        dst.add_scaled(1.0, src)?;
    }
    for (&c, row) in cache.char_ids.iter().zip(&dx) {
        crate::numerics::axpy(1.0, row, grads.embeddings.row_mut(c));
    }
    Ok(())
}
