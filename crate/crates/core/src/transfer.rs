//! Feature and parameter transfer between the two domains.
//!
//! * label-aware MMD: per matched tag, the biased squared MMD between the
//!   source and target hidden vectors carrying that gold tag, weighted by `μ_y`;
//! * vanilla MMD over all pooled vectors regardless of tag;
//! * the squared Frobenius distance between the two CRF heads;
//! * an exhaustive certifier for the KL bound that motivates that penalty.

use std::collections::BTreeMap;

use crate::crf::{emission, CrfParams};
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, median_bandwidth, rbf_unchecked, Matrix};

/// How the RBF bandwidth is chosen for a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthPolicy {
    Fixed(f64),
    /// Median heuristic over the union of both domains' pooled vectors.
    Median,
}

impl BandwidthPolicy {
    pub fn resolve(&self, vectors: &[&[f64]]) -> Result<f64> {
        match *self {
            BandwidthPolicy::Fixed(b) if b > 0.0 && b.is_finite() => Ok(b),
            BandwidthPolicy::Fixed(b) => Err(Error::Parameter(format!("kernel bandwidth must be positive, got {b}"))),
            BandwidthPolicy::Median => Ok(median_bandwidth(vectors)),
        }
    }
}

/// Hidden vectors grouped by gold tag index, for one domain.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledHiddenPool {
    by_tag: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl LabeledHiddenPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tag: usize, h: Vec<f64>) {
        self.by_tag.entry(tag).or_default().push(h);
    }

    pub fn get(&self, tag: usize) -> &[Vec<f64>] {
        self.by_tag.get(&tag).map_or(&[], Vec::as_slice)
    }

    pub fn tags(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_tag.keys().copied()
    }

    /// Every vector, in tag order then insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.by_tag.values().flatten().map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_tag.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn zeros_like(&self) -> BTreeMap<usize, Vec<Vec<f64>>> {
        self.by_tag
            .iter()
            .map(|(&t, v)| (t, v.iter().map(|h| vec![0.0; h.len()]).collect()))
            .collect()
    }
}

/// Settings for the MMD losses.
#[derive(Debug, Clone, PartialEq)]
pub struct MmdConfig {
    pub bandwidth: BandwidthPolicy,
    /// Matched `(source tag, target tag)` pairs; the target side is Y_v.
    pub matched: Vec<(usize, usize)>,
    /// Per-target-tag weight `μ_y`; tags absent here use `default_mu`.
    pub mu: BTreeMap<usize, f64>,
    pub default_mu: f64,
}

impl MmdConfig {
    pub fn new(matched: Vec<(usize, usize)>, bandwidth: BandwidthPolicy) -> Self {
        MmdConfig {
            bandwidth,
            matched,
            mu: BTreeMap::new(),
            default_mu: 1.0,
        }
    }

    pub fn mu(&self, target_tag: usize) -> f64 {
        self.mu.get(&target_tag).copied().unwrap_or(self.default_mu)
    }

    pub fn validate(&self) -> Result<()> {
        if self.default_mu < 0.0 || self.mu.values().any(|&m| !(m >= 0.0)) {
            return Err(Error::Config("MMD weights μ_y must be non-negative".into()));
        }
        if let BandwidthPolicy::Fixed(b) = self.bandwidth {
            if !(b > 0.0) {
                return Err(Error::Config(format!("bandwidth must be positive, got {b}")));
            }
        }
        Ok(())
    }
}

/// Loss value and its gradient with respect to every pooled vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MmdOutput {
    pub value: f64,
    pub bandwidth: f64,
    pub source_grads: BTreeMap<usize, Vec<Vec<f64>>>,
    pub target_grads: BTreeMap<usize, Vec<Vec<f64>>>,
}

fn check_dims(xs: &[Vec<f64>], xt: &[Vec<f64>]) -> Result<usize> {
    let d = xs.first().or(xt.first()).map_or(0, Vec::len);
    if xs.iter().chain(xt).any(|v| v.len() != d) {
        return Err(Error::Shape("pooled vectors differ in dimension".into()));
    }
    Ok(d)
}

/// Biased squared MMD between two sample sets under an RBF kernel.
///
/// Both sets must be non-empty; `i = j` terms are included in the within-set sums.
pub fn mmd_sq(xs: &[Vec<f64>], xt: &[Vec<f64>], bandwidth: f64) -> Result<f64> {
    Ok(mmd_sq_with_grad(xs, xt, bandwidth)?.0)
}

/// [`mmd_sq`] plus its gradient with respect to each vector of both sets.
pub fn mmd_sq_with_grad(
    xs: &[Vec<f64>],
    xt: &[Vec<f64>],
    bandwidth: f64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if xs.is_empty() || xt.is_empty() {
        return Err(Error::Usage("MMD needs two non-empty sample sets".into()));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::Parameter(format!(
            "kernel bandwidth must be positive, got {bandwidth}"
        )));
    }
    let d = check_dims(xs, xt)?;
    let ns = xs.len() as f64;
    let nt = xt.len() as f64;
    let inv_bw2 = 1.0 / (bandwidth * bandwidth);
    let mut gs = vec![vec![0.0; d]; xs.len()];
    let mut gt = vec![vec![0.0; d]; xt.len()];

    // ∂k(x, y)/∂x = −k(x, y)·(x − y)/bw²
    let within = |set: &[Vec<f64>], grads: &mut [Vec<f64>], weight: f64| -> f64 {
        let mut sum = 0.0;
        for i in 0..set.len() {
            sum += 1.0;
            for j in i + 1..set.len() {
                let k = rbf_unchecked(&set[i], &set[j], bandwidth);
                sum += 2.0 * k;
                let c = -2.0 * weight * k * inv_bw2;
                for q in 0..d {
                    let diff = set[i][q] - set[j][q];
                    grads[i][q] += c * diff;
                    grads[j][q] -= c * diff;
                }
            }
        }
        weight * sum
    };
    let ss = within(xs, &mut gs, 1.0 / (ns * ns));
    let tt = within(xt, &mut gt, 1.0 / (nt * nt));

    let cross_w = -2.0 / (ns * nt);
    let mut st = 0.0;
    for (i, a) in xs.iter().enumerate() {
        for (j, b) in xt.iter().enumerate() {
            let k = rbf_unchecked(a, b, bandwidth);
            st += k;
            let c = -cross_w * k * inv_bw2;
            for q in 0..d {
                let diff = a[q] - b[q];
                gs[i][q] += c * diff;
                gt[j][q] -= c * diff;
            }
        }
    }
    Ok((ss + tt + cross_w * st, gs, gt))
}

fn union<'a>(source: &'a LabeledHiddenPool, target: &'a LabeledHiddenPool) -> Vec<&'a [f64]> {
    source.iter().chain(target.iter()).collect()
}

/// Label-aware MMD: `Σ_{y ∈ Y_v} μ_y · MMD²(R_y^s, R_y^t)`.
///
/// Tags whose pool is empty on either side contribute nothing.
pub fn la_mmd(source: &LabeledHiddenPool, target: &LabeledHiddenPool, config: &MmdConfig) -> Result<MmdOutput> {
    config.validate()?;
    let bandwidth = config.bandwidth.resolve(&union(source, target))?;
    let mut out = MmdOutput {
        value: 0.0,
        bandwidth,
        source_grads: source.zeros_like(),
        target_grads: target.zeros_like(),
    };
    for &(s_tag, t_tag) in &config.matched {
        let (rs, rt) = (source.get(s_tag), target.get(t_tag));
        let mu = config.mu(t_tag);
        if rs.is_empty() || rt.is_empty() || mu == 0.0 {
            continue;
        }
        let (v, gs, gt) = mmd_sq_with_grad(rs, rt, bandwidth)?;
        out.value += mu * v;
        for (dst, g) in out.source_grads.get_mut(&s_tag).unwrap().iter_mut().zip(gs) {
            crate::numerics::axpy(mu, &g, dst);
        }
        for (dst, g) in out.target_grads.get_mut(&t_tag).unwrap().iter_mut().zip(gt) {
            crate::numerics::axpy(mu, &g, dst);
        }
    }
    Ok(out)
}

/// Plain MMD² over all pooled vectors of each domain, ignoring tags.
///
/// An empty pool on either side yields zero.
pub fn vanilla_mmd(source: &LabeledHiddenPool, target: &LabeledHiddenPool, config: &MmdConfig) -> Result<MmdOutput> {
    config.validate()?;
    let bandwidth = config.bandwidth.resolve(&union(source, target))?;
    let mut out = MmdOutput {
        value: 0.0,
        bandwidth,
        source_grads: source.zeros_like(),
        target_grads: target.zeros_like(),
    };
    if source.is_empty() || target.is_empty() {
        return Ok(out);
    }
    let xs: Vec<Vec<f64>> = source.iter().map(<[f64]>::to_vec).collect();
    let xt: Vec<Vec<f64>> = target.iter().map(<[f64]>::to_vec).collect();
    let (v, gs, gt) = mmd_sq_with_grad(&xs, &xt, bandwidth)?;
    out.value = v;
    let scatter = |grads: &mut BTreeMap<usize, Vec<Vec<f64>>>, flat: Vec<Vec<f64>>| {
        let mut it = flat.into_iter();
        for rows in grads.values_mut() {
            for r in rows.iter_mut() {
                *r = it.next().expect("gradient count matches pool size");
            }
        }
    };
    scatter(&mut out.source_grads, gs);
    scatter(&mut out.target_grads, gt);
    Ok(out)
}

/// Parameter penalty value and gradients for both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyOutput {
    pub value: f64,
    pub d_source: CrfParams,
    pub d_target: CrfParams,
}

/// `‖W^s − W^t‖² + ‖A^s − A^t‖²` for equally shaped heads.
pub fn param_penalty(ws: &Matrix, a_s: &Matrix, wt: &Matrix, a_t: &Matrix) -> Result<PenaltyOutput> {
    if ws.shape() != wt.shape() || a_s.shape() != a_t.shape() {
        return Err(Error::Config(format!(
            "CRF heads differ in shape: W {:?} vs {:?}, A {:?} vs {:?}",
            ws.shape(),
            wt.shape(),
            a_s.shape(),
            a_t.shape()
        )));
    }
    let mut dw = ws.clone();
    dw.add_scaled(-1.0, wt)?;
    let mut da = a_s.clone();
    da.add_scaled(-1.0, a_t)?;
    let value = dw.frobenius_sq() + da.frobenius_sq();
    dw.scale(2.0);
    da.scale(2.0);
    let mut d_target = CrfParams {
        w: dw.clone(),
        a: da.clone(),
    };
    d_target.w.scale(-1.0);
    d_target.a.scale(-1.0);
    Ok(PenaltyOutput {
        value,
        d_source: CrfParams { w: dw, a: da },
        d_target,
    })
}

/// Parameter penalty restricted to matched tags.
///
/// Compares emission columns of each matched pair and the transition entries
/// between matched pairs; parameters of unmatched tags are left alone.
pub fn param_penalty_matched(
    source: &CrfParams,
    target: &CrfParams,
    matched: &[(usize, usize)],
) -> Result<PenaltyOutput> {
    source.check()?;
    target.check()?;
    if source.d_hidden() != target.d_hidden() {
        return Err(Error::Config(
            "CRF heads read hidden vectors of different widths".into(),
        ));
    }
    let (ms, mt) = (source.num_tags(), target.num_tags());
    if matched.iter().any(|&(s, t)| s >= ms || t >= mt) {
        return Err(Error::Config("matched tag index out of range".into()));
    }
    let mut d_source = CrfParams::zeros(source.d_hidden(), ms);
    let mut d_target = CrfParams::zeros(target.d_hidden(), mt);
    let mut value = 0.0;
    for j in 0..source.d_hidden() {
        for &(ps, pt) in matched {
            let diff = source.w.get(j, ps) - target.w.get(j, pt);
            value += diff * diff;
            d_source.w.add_at(j, ps, 2.0 * diff);
            d_target.w.add_at(j, pt, -2.0 * diff);
        }
    }
    for &(ps, pt) in matched {
        for &(qs, qt) in matched {
            let diff = source.a.get(ps, qs) - target.a.get(pt, qt);
            value += diff * diff;
            d_source.a.add_at(ps, qs, 2.0 * diff);
            d_target.a.add_at(pt, qt, -2.0 * diff);
        }
    }
    Ok(PenaltyOutput {
        value,
        d_source,
        d_target,
    })
}

/// Size limits for exhaustive certification.
pub const MAX_CERT_LEN: usize = 8;
pub const MAX_CERT_TAGS: usize = 5;

/// Tolerance added to the bound when deciding pass/fail.
pub const CERT_SLACK: f64 = 1e-9;

/// Exact KL between the two heads' sequence distributions next to its upper bound.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCertificate {
    pub n: usize,
    pub m: usize,
    pub exact_kl: f64,
    pub bound: f64,
    pub constant_c: f64,
    pub c1: f64,
    /// Largest `(s^s(H,y) − s^t(H,y))²` seen over all `y`.
    pub max_score_gap_sq: f64,
    /// `‖ΔW‖² + ‖ΔA‖²`.
    pub param_dist_sq: f64,
}

impl BoundCertificate {
    pub fn passed(&self) -> bool {
        self.exact_kl <= self.bound + CERT_SLACK
    }

    /// `n m exact_kl bound c pass|fail` with 17 significant digits.
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {:.16e} {:.16e} {:.16e} {}",
            self.n,
            self.m,
            self.exact_kl,
            self.bound,
            self.constant_c,
            if self.passed() { "pass" } else { "fail" }
        )
    }
}

/// Enumerates all `m^n` label sequences and certifies `KL(p^s‖p^t) ≤ c·‖Δθ‖`.
///
/// `c = 2·sqrt(c₁)` with `c₁ = 2·max_y max(‖H^W(y)‖², ‖H^A(y)‖²)`, where
/// `H^W(y)[j][k] = Σ_{i: y_i = k} H[i][j]` and `H^A(y)[p][q]` counts the
/// transitions `p → q` in `y`. These masks make the score linear in `W` and `A`.
pub fn certify_kl_bound(h: &Matrix, source: &CrfParams, target: &CrfParams) -> Result<BoundCertificate> {
    source.check()?;
    target.check()?;
    let (n, d) = h.shape();
    let m = source.num_tags();
    if target.num_tags() != m || source.d_hidden() != d || target.d_hidden() != d {
        return Err(Error::Shape("heads and hidden vectors disagree in shape".into()));
    }
    if n == 0 {
        return Err(Error::Shape("empty sequence".into()));
    }
    if n > MAX_CERT_LEN || m > MAX_CERT_TAGS {
        return Err(Error::Size(format!(
            "n = {n}, m = {m}; certification enumerates m^n sequences and needs n ≤ {MAX_CERT_LEN}, m ≤ {MAX_CERT_TAGS}"
        )));
    }
    let es = emission(h, &source.w)?;
    let et = emission(h, &target.w)?;
    let total = m.pow(n as u32);
    let mut scores_s = Vec::with_capacity(total);
    let mut scores_t = Vec::with_capacity(total);
    let mut max_mask = 0.0f64;
    let mut max_gap_sq = 0.0f64;

    let mut y = vec![0usize; n];
    let mut hw = Matrix::zeros(d, m);
    let mut ha = Matrix::zeros(m, m);
    for _ in 0..total {
        let mut ss = 0.0;
        let mut st = 0.0;
        hw.fill(0.0);
        ha.fill(0.0);
        for i in 0..n {
            ss += es.get(i, y[i]);
            st += et.get(i, y[i]);
            for j in 0..d {
                hw.add_at(j, y[i], h.get(i, j));
            }
            if i + 1 < n {
                ss += source.a.get(y[i], y[i + 1]);
                st += target.a.get(y[i], y[i + 1]);
                ha.add_at(y[i], y[i + 1], 1.0);
            }
        }
        max_mask = max_mask.max(hw.frobenius_sq()).max(ha.frobenius_sq());
        max_gap_sq = max_gap_sq.max((ss - st) * (ss - st));
        scores_s.push(ss);
        scores_t.push(st);
        // odometer increment
        for slot in y.iter_mut() {
            *slot += 1;
            if *slot < m {
                break;
            }
            *slot = 0;
        }
    }

    let log_zs = log_sum_exp(&scores_s);
    let log_zt = log_sum_exp(&scores_t);
    let mut kl = 0.0;
    for (s, t) in scores_s.iter().zip(&scores_t) {
        let lps = s - log_zs;
        let lpt = t - log_zt;
        kl += lps.exp() * (lps - lpt);
    }
    let exact_kl = kl.max(0.0);

    let mut dw = source.w.clone();
    dw.add_scaled(-1.0, &target.w)?;
    let mut da = source.a.clone();
    da.add_scaled(-1.0, &target.a)?;
    let param_dist_sq = dw.frobenius_sq() + da.frobenius_sq();
    let c1 = 2.0 * max_mask;
    let constant_c = 2.0 * c1.sqrt();
    Ok(BoundCertificate {
        n,
        m,
        exact_kl,
        bound: constant_c * param_dist_sq.sqrt(),
        constant_c,
        c1,
        max_score_gap_sq: max_gap_sq,
        param_dist_sq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, rbf_kernel, stream_rng};
    use rand::Rng;

    fn vecs(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    /// Literal triple-sum evaluation of the biased estimator.
    fn naive_mmd(xs: &[Vec<f64>], xt: &[Vec<f64>], bw: f64) -> f64 {
        let k = |a: &Vec<f64>, b: &Vec<f64>| rbf_kernel(a, b, bw).unwrap();
        let (ns, nt) = (xs.len() as f64, xt.len() as f64);
        let mut a = 0.0;
        for x in xs {
            for y in xs {
                a += k(x, y);
            }
        }
        let mut b = 0.0;
        for x in xt {
            for y in xt {
                b += k(x, y);
            }
        }
        let mut c = 0.0;
        for x in xs {
            for y in xt {
                c += k(x, y);
            }
        }
        a / (ns * ns) + b / (nt * nt) - 2.0 * c / (ns * nt)
    }

    #[test]
    fn mmd_examples() {
        let mut rng = stream_rng(1, "mmd");
        let x = vecs(&mut rng, 6, 3);
        assert!(mmd_sq(&x, &x, 0.8).unwrap().abs() < 1e-12);
        let (a, b) = (vec![vec![0.0, 1.0]], vec![vec![1.0, -1.0]]);
        let expect = 2.0 - 2.0 * rbf_kernel(&a[0], &b[0], 1.3).unwrap();
        assert!((mmd_sq(&a, &b, 1.3).unwrap() - expect).abs() < 1e-15);
        let y = vecs(&mut rng, 4, 3);
        assert!((mmd_sq(&x, &y, 0.8).unwrap() - mmd_sq(&y, &x, 0.8).unwrap()).abs() < 1e-14);
        assert!((mmd_sq(&x, &y, 0.8).unwrap() - naive_mmd(&x, &y, 0.8)).abs() < 1e-12);
    }

    #[test]
    fn mmd_errors() {
        let x = vec![vec![0.0]];
        assert!(mmd_sq(&x, &[], 1.0).is_err());
        assert!(matches!(mmd_sq(&x, &[vec![0.0, 1.0]], 1.0), Err(Error::Shape(_))));
        assert!(mmd_sq(&x, &x, 0.0).is_err());
    }

    #[test]
    fn mmd_gradient_matches_finite_differences() {
        let mut rng = stream_rng(2, "mmd-grad");
        for _ in 0..5 {
            let xs = vecs(&mut rng, 4, 3);
            let xt = vecs(&mut rng, 3, 3);
            let (_, gs, gt) = mmd_sq_with_grad(&xs, &xt, 0.9).unwrap();
            let point: Vec<f64> = xs.iter().chain(&xt).flatten().copied().collect();
            let grad: Vec<f64> = gs.iter().chain(&gt).flatten().copied().collect();
            let err = grad_check(
                |f| {
                    let rows: Vec<Vec<f64>> = f.chunks(3).map(<[f64]>::to_vec).collect();
                    mmd_sq(&rows[..4], &rows[4..], 0.9).unwrap()
                },
                &grad,
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    fn pools(rng: &mut impl Rng, sizes: &[(usize, usize, usize)], d: usize) -> (LabeledHiddenPool, LabeledHiddenPool) {
        let mut s = LabeledHiddenPool::new();
        let mut t = LabeledHiddenPool::new();
        for &(tag, ns, nt) in sizes {
            for v in vecs(rng, ns, d) {
                s.push(tag, v);
            }
            for v in vecs(rng, nt, d) {
                t.push(tag, v);
            }
        }
        (s, t)
    }

    #[test]
    fn la_mmd_examples() {
        let mut rng = stream_rng(3, "la");
        let o = vecs(&mut rng, 5, 2);
        let mut s = LabeledHiddenPool::new();
        let mut t = LabeledHiddenPool::new();
        for v in &o {
            s.push(0, v.clone());
            t.push(0, v.clone());
        }
        let cfg = MmdConfig::new(vec![(0, 0)], BandwidthPolicy::Median);
        assert!(la_mmd(&s, &t, &cfg).unwrap().value.abs() < 1e-12);

        let (s, t) = pools(&mut rng, &[(1, 3, 4), (2, 5, 2), (3, 2, 0)], 2);
        let cfg = MmdConfig::new(vec![(1, 1), (2, 2), (3, 3)], BandwidthPolicy::Fixed(0.7));
        let total = la_mmd(&s, &t, &cfg).unwrap().value;
        let sum = naive_mmd(&s.get(1).to_vec(), &t.get(1).to_vec(), 0.7)
            + naive_mmd(&s.get(2).to_vec(), &t.get(2).to_vec(), 0.7);
        assert!((total - sum).abs() < 1e-12);
    }

    #[test]
    fn la_mmd_respects_weights_and_mismatched_tags() {
        let mut rng = stream_rng(4, "la");
        let (s, mut t) = pools(&mut rng, &[(1, 3, 0), (2, 3, 3)], 2);
        for v in vecs(&mut rng, 4, 2) {
            t.push(7, v);
        }
        let mut cfg = MmdConfig::new(vec![(1, 7), (2, 2)], BandwidthPolicy::Fixed(1.0));
        cfg.mu.insert(7, 0.25);
        cfg.mu.insert(2, 2.0);
        let got = la_mmd(&s, &t, &cfg).unwrap().value;
        let want = 0.25 * naive_mmd(&s.get(1).to_vec(), &t.get(7).to_vec(), 1.0)
            + 2.0 * naive_mmd(&s.get(2).to_vec(), &t.get(2).to_vec(), 1.0);
        assert!((got - want).abs() < 1e-12);
        cfg.mu.insert(2, -1.0);
        assert!(la_mmd(&s, &t, &cfg).is_err());
    }

    #[test]
    fn la_mmd_gradient_matches_finite_differences() {
        let mut rng = stream_rng(5, "la-grad");
        let (s, t) = pools(&mut rng, &[(0, 3, 2), (1, 2, 3), (2, 1, 0)], 2);
        let mut cfg = MmdConfig::new(vec![(0, 0), (1, 1), (2, 2)], BandwidthPolicy::Fixed(0.8));
        cfg.mu.insert(1, 0.5);
        let out = la_mmd(&s, &t, &cfg).unwrap();
        let flatten = |p: &LabeledHiddenPool| p.iter().flatten().copied().collect::<Vec<_>>();
        let rebuild = |template: &LabeledHiddenPool, flat: &[f64]| {
            let mut p = LabeledHiddenPool::new();
            let mut it = flat.chunks(2);
            for tag in template.tags() {
                for _ in template.get(tag) {
                    p.push(tag, it.next().unwrap().to_vec());
                }
            }
            p
        };
        let mut point = flatten(&s);
        let ns = point.len();
        point.extend(flatten(&t));
        let grad: Vec<f64> = out
            .source_grads
            .values()
            .chain(out.target_grads.values())
            .flatten()
            .flatten()
            .copied()
            .collect();
        let err = grad_check(
            |f| {
                la_mmd(&rebuild(&s, &f[..ns]), &rebuild(&t, &f[ns..]), &cfg)
                    .unwrap()
                    .value
            },
            &grad,
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn vanilla_matches_unpartitioned_oracle() {
        let mut rng = stream_rng(6, "van");
        let (s, t) = pools(&mut rng, &[(0, 4, 3), (1, 2, 5)], 3);
        let cfg = MmdConfig::new(vec![], BandwidthPolicy::Fixed(1.1));
        let all_s: Vec<Vec<f64>> = s.iter().map(<[f64]>::to_vec).collect();
        let all_t: Vec<Vec<f64>> = t.iter().map(<[f64]>::to_vec).collect();
        let got = vanilla_mmd(&s, &t, &cfg).unwrap().value;
        assert!((got - naive_mmd(&all_s, &all_t, 1.1)).abs() < 1e-12);
        assert_eq!(vanilla_mmd(&s, &LabeledHiddenPool::new(), &cfg).unwrap().value, 0.0);
        assert!(vanilla_mmd(&s, &s, &cfg).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn single_label_pools_coincide() {
        let mut rng = stream_rng(7, "single");
        let (s, t) = pools(&mut rng, &[(3, 4, 5)], 2);
        let cfg = MmdConfig::new(vec![(0, 0), (3, 3)], BandwidthPolicy::Median);
        let la = la_mmd(&s, &t, &cfg).unwrap();
        let va = vanilla_mmd(&s, &t, &cfg).unwrap();
        assert_eq!(la.bandwidth, va.bandwidth);
        assert!((la.value - va.value).abs() < 1e-14);
    }

    #[test]
    fn penalty_examples() {
        let mut rng = stream_rng(8, "pen");
        let w = Matrix::uniform(3, 2, 1.0, &mut rng);
        let a = Matrix::uniform(2, 2, 1.0, &mut rng);
        assert_eq!(param_penalty(&w, &a, &w, &a).unwrap().value, 0.0);
        let mut w2 = w.clone();
        w2.add_at(1, 1, 3.0);
        let p = param_penalty(&w, &a, &w2, &a).unwrap();
        assert!((p.value - 9.0).abs() < 1e-12);
        assert!((p.d_source.w.get(1, 1) + 6.0).abs() < 1e-12);
        assert!((p.d_target.w.get(1, 1) - 6.0).abs() < 1e-12);
        assert!(matches!(param_penalty(&w, &a, &a, &a), Err(Error::Config(_))));
    }

    #[test]
    fn penalty_is_homogeneous() {
        let mut rng = stream_rng(9, "pen");
        let (ws, as_) = (
            Matrix::uniform(3, 2, 1.0, &mut rng),
            Matrix::uniform(2, 2, 1.0, &mut rng),
        );
        let (wt, at) = (
            Matrix::uniform(3, 2, 1.0, &mut rng),
            Matrix::uniform(2, 2, 1.0, &mut rng),
        );
        let base = param_penalty(&ws, &as_, &wt, &at).unwrap().value;
        let t = 2.5;
        let scaled = |s: &Matrix, t0: &Matrix| {
            let mut d = s.clone();
            d.add_scaled(-1.0, t0).unwrap();
            d.scale(t);
            d.add_scaled(1.0, t0).unwrap();
            d
        };
        let v = param_penalty(&scaled(&ws, &wt), &scaled(&as_, &at), &wt, &at)
            .unwrap()
            .value;
        assert!((v - t * t * base).abs() < 1e-10);
    }

    #[test]
    fn matched_penalty_reduces_to_full_on_identity() {
        let mut rng = stream_rng(10, "pen");
        let s = CrfParams::init(4, 3, &mut rng);
        let mut t = CrfParams::init(4, 3, &mut rng);
        t.a = Matrix::uniform(3, 3, 1.0, &mut rng);
        let full = param_penalty(&s.w, &s.a, &t.w, &t.a).unwrap();
        let id = param_penalty_matched(&s, &t, &[(0, 0), (1, 1), (2, 2)]).unwrap();
        assert!((full.value - id.value).abs() < 1e-12);
        assert_eq!(full.d_source, id.d_source);

        // partial match: unmatched tag 2 of the target gets no gradient
        let part = param_penalty_matched(&s, &t, &[(0, 0), (2, 1)]).unwrap();
        assert!((0..4).all(|j| part.d_target.w.get(j, 2) == 0.0));
        assert!((0..3).all(|q| part.d_target.a.get(2, q) == 0.0 && part.d_target.a.get(q, 2) == 0.0));
        let flat = |p: &CrfParams| p.w.data().iter().chain(p.a.data()).copied().collect::<Vec<_>>();
        let rebuild = |f: &[f64]| CrfParams {
            w: Matrix::new(4, 3, f[..12].to_vec()).unwrap(),
            a: Matrix::new(3, 3, f[12..].to_vec()).unwrap(),
        };
        let err = grad_check(
            |f| param_penalty_matched(&rebuild(f), &t, &[(0, 0), (2, 1)]).unwrap().value,
            &flat(&part.d_source),
            &flat(&s),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    fn random_heads(rng: &mut impl Rng, n: usize, d: usize, m: usize) -> (Matrix, CrfParams, CrfParams) {
        let h = Matrix::uniform(n, d, 1.0, rng);
        let s = CrfParams {
            w: Matrix::uniform(d, m, 1.0, rng),
            a: Matrix::uniform(m, m, 1.0, rng),
        };
        let t = CrfParams {
            w: Matrix::uniform(d, m, 1.0, rng),
            a: Matrix::uniform(m, m, 1.0, rng),
        };
        (h, s, t)
    }

    #[test]
    fn certificate_identical_heads() {
        let mut rng = stream_rng(11, "cert");
        let (h, s, _) = random_heads(&mut rng, 3, 2, 3);
        let c = certify_kl_bound(&h, &s, &s).unwrap();
        assert_eq!(c.exact_kl, 0.0);
        assert_eq!(c.bound, 0.0);
        assert!(c.passed());
        assert!(c.to_line().ends_with("pass"));
    }

    #[test]
    fn certificate_masks_bound_score_gaps() {
        let mut rng = stream_rng(12, "cert");
        for _ in 0..50 {
            let n = rng.gen_range(1..=5);
            let m = rng.gen_range(1..=4);
            let (h, s, t) = random_heads(&mut rng, n, 3, m);
            let c = certify_kl_bound(&h, &s, &t).unwrap();
            // squared score gap is within c1 times the parameter distance, for every y
            assert!(c.max_score_gap_sq <= c.c1 * c.param_dist_sq * (1.0 + 1e-12) + 1e-12);
            assert!(c.passed(), "{}", c.to_line());
        }
    }

    #[test]
    fn certificate_size_limit() {
        let mut rng = stream_rng(13, "cert");
        let (h, s, t) = random_heads(&mut rng, 9, 2, 2);
        assert!(matches!(certify_kl_bound(&h, &s, &t), Err(Error::Size(_))));
        let (h, s, t) = random_heads(&mut rng, 2, 2, 6);
        assert!(matches!(certify_kl_bound(&h, &s, &t), Err(Error::Size(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn mmd_non_negative(seed in any::<u64>(), ns in 1usize..6, nt in 1usize..6, bw in 0.2f64..3.0) {
                let mut rng = stream_rng(seed, "p");
                let xs = vecs(&mut rng, ns, 3);
                let xt = vecs(&mut rng, nt, 3);
                prop_assert!(mmd_sq(&xs, &xt, bw).unwrap() >= -1e-12);
            }

            #[test]
            fn la_mmd_permutation_invariant(seed in any::<u64>()) {
                let mut rng = stream_rng(seed, "perm");
                let (s, t) = pools(&mut rng, &[(0, 4, 3), (1, 3, 3)], 2);
                let cfg = MmdConfig::new(vec![(0, 0), (1, 1)], BandwidthPolicy::Median);
                let base = la_mmd(&s, &t, &cfg).unwrap();
                let mut shuffled = LabeledHiddenPool::new();
                for tag in s.tags() {
                    let mut rows = s.get(tag).to_vec();
                    rows.reverse();
                    rows.rotate_left(1);
                    for r in rows { shuffled.push(tag, r); }
                }
                let other = la_mmd(&shuffled, &t, &cfg).unwrap();
                prop_assert!((base.value - other.value).abs() < 1e-12);
            }
        }
    }
}
