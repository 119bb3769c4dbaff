//! Rank-selection formulas: the exponent μ(N,M,l), the optimal-rank
//! estimates, log-space evaluation of the series terms a_l and their ratios,
//! and a Monte-Carlo estimate of the covering event.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankParams {
    pub n: usize,
    pub m: usize,
    pub delta: f64,
    pub k: f64,
    pub c3: f64,
    pub eta: f64,
}

impl RankParams {
    pub fn new(n: usize, m: usize, delta: f64, k: f64, c3: f64, eta: f64) -> Result<Self> {
        let p = Self { n, m, delta, k, c3, eta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::InvalidParam("N and M must be positive".into()));
        }
        if !(self.k > 1.0) {
            return Err(Error::InvalidParam(format!("K = {} must exceed 1", self.k)));
        }
        if !(self.delta > 0.0) || !(self.c3 > 0.0) {
            return Err(Error::InvalidParam("δ and C3 must be positive".into()));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::InvalidParam(format!("η = {} must lie in (0, 1)", self.eta)));
        }
        Ok(())
    }

    fn big(&self) -> usize {
        self.n.max(self.m)
    }

    fn small(&self) -> usize {
        self.n.min(self.m)
    }

    /// `ln(C3·ε)`; negative inside the valid regime.
    pub fn log_c3eps(&self) -> f64 {
        self.c3.ln() + epsilon_of_delta(self).ln()
    }

    /// `|ln(C3·ε)|`, or a regime error when `C3·ε ≥ 1`.
    pub fn log_magnitude(&self) -> Result<f64> {
        let lc = self.log_c3eps();
        if lc >= 0.0 {
            return Err(Error::Regime(format!("C3·ε = {} is not below 1", lc.exp())));
        }
        Ok(-lc)
    }
}

/// `l(l−1)/2 + MN − |N−M| − 1`.
pub fn mu_coeff(n: usize, m: usize, l: usize) -> i64 {
    let (n, m, l) = (n as i64, m as i64, l as i64);
    l * (l - 1) / 2 + m * n - (n - m).abs() - 1
}

/// `ε = δ / (K·N·M + min(N,M)²)`.
pub fn epsilon_of_delta(p: &RankParams) -> f64 {
    let small = p.small() as f64;
    p.delta / (p.k * p.n as f64 * p.m as f64 + small * small)
}

/// `sqrt(max(N,M) / |ln(C3·ε)|)`.
pub fn p_opt(p: &RankParams) -> Result<f64> {
    Ok((p.big() as f64 / p.log_magnitude()?).sqrt())
}

/// The same rank with the denominator written out as
/// `ln(K·N·M + min²) − |ln δ| − ln C3`.
pub fn p_opt_expanded(p: &RankParams) -> Result<f64> {
    let small = p.small() as f64;
    let denom = (p.k * p.n as f64 * p.m as f64 + small * small).ln() - p.delta.ln().abs() - p.c3.ln();
    if denom <= 0.0 {
        return Err(Error::Regime(format!("expanded denominator {denom} is not positive")));
    }
    Ok((p.big() as f64 / denom).sqrt())
}

/// Stationary point of `F(p)`: `3/4 + sqrt(1/16 + max(N,M)/|ln(C3·ε)|)`.
pub fn p_stationary(p: &RankParams) -> Result<f64> {
    Ok(0.75 + (1.0 / 16.0 + p.big() as f64 / p.log_magnitude()?).sqrt())
}

/// `ln(l^Λ − (l−1)^Λ)` with `Λ = max(N,M)`.
fn log_power_gap(l: usize, big: usize) -> f64 {
    let lf = l as f64;
    let lam = big as f64;
    if l == 1 {
        return 0.0;
    }
    // ln(1 − (1 − 1/l)^Λ), stable for large Λ and for (1−1/l)^Λ near 1.
    let tail = -(lam * (-1.0 / lf).ln_1p()).exp_m1();
    lam * lf.ln() + tail.ln()
}

/// `ln a_l` where `a_l = (l^Λ − (l−1)^Λ)·l!·min(N,M)·(C3ε)^μ(N,M,l)`.
pub fn log_term(l: usize, n: usize, m: usize, log_c3eps: f64) -> f64 {
    assert!(l >= 1, "log_term needs l ≥ 1");
    log_power_gap(l, n.max(m)) + ln_gamma(l as f64 + 1.0) + (n.min(m) as f64).ln() + mu_coeff(n, m, l) as f64 * log_c3eps
}

/// `a_{l+1} / a_l`.
pub fn term_ratio(l: usize, n: usize, m: usize, log_c3eps: f64) -> f64 {
    (log_term(l + 1, n, m, log_c3eps) - log_term(l, n, m, log_c3eps)).exp()
}

/// Smallest `l ≤ l_max` from which every ratio up to `l_max` is at most `eta`.
pub fn p_hat(n: usize, m: usize, eta: f64, log_c3eps: f64, l_max: usize) -> Result<usize> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::InvalidParam(format!("η = {eta} must lie in (0, 1)")));
    }
    let mut found = None;
    for l in (1..=l_max).rev() {
        if term_ratio(l, n, m, log_c3eps) <= eta {
            found = Some(l);
        } else {
            break;
        }
    }
    found.ok_or(Error::NotFound(l_max))
}

/// `ln Σ_{l=1}^p a_l`.
pub fn log_sum_terms(p: usize, n: usize, m: usize, log_c3eps: f64) -> f64 {
    let logs: Vec<f64> = (1..=p).map(|l| log_term(l, n, m, log_c3eps)).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + logs.iter().map(|v| (v - top).exp()).sum::<f64>().ln()
}

/// `ln(min(N,M)·p^Λ·(C3ε)^μ(N,M,p))`.
pub fn log_simple_bound(p: usize, n: usize, m: usize, log_c3eps: f64) -> f64 {
    (n.min(m) as f64).ln() + n.max(m) as f64 * (p as f64).ln() + mu_coeff(n, m, p) as f64 * log_c3eps
}

/// The real zero of `−L p³ + p² + (L − 2N₀ + 2) p − 1` with `L = |ln(C3ε)|`.
/// When there are three real zeros the largest is returned.
pub fn p0_cubic(log_mag: f64, n0: usize) -> Result<f64> {
    if !(log_mag > 0.0) {
        return Err(Error::Regime(format!("|ln(C3·ε)| = {log_mag} must be positive")));
    }
    let c = [-log_mag, 1.0, log_mag - 2.0 * n0 as f64 + 2.0, -1.0];
    let f = |p: f64| ((c[0] * p + c[1]) * p + c[2]) * p + c[3];
    let df = |p: f64| (3.0 * c[0] * p + 2.0 * c[1]) * p + c[2];

    // The leading coefficient is negative, so f falls to −∞ on the right.
    // The rightmost critical point is a local maximum; if f is positive
    // there, the largest zero lies to its right, otherwise to the left of
    // every critical point.
    let disc = 4.0 * c[1] * c[1] - 12.0 * c[0] * c[2];
    let (anchor, rightward) = if disc > 0.0 {
        let s = disc.sqrt();
        let r1 = (-2.0 * c[1] + s) / (6.0 * c[0]);
        let r2 = (-2.0 * c[1] - s) / (6.0 * c[0]);
        let (lo, hi) = (r1.min(r2), r1.max(r2));
        if f(hi) >= 0.0 {
            (hi, true)
        } else {
            (lo, false)
        }
    } else {
        (-c[1] / (3.0 * c[0]), f(-c[1] / (3.0 * c[0])) > 0.0)
    };
    if f(anchor) == 0.0 {
        return Ok(anchor);
    }
    let mut step = 1.0f64.max(anchor.abs());
    let (mut lo, mut hi) = if rightward { (anchor, anchor + step) } else { (anchor - step, anchor) };
    for _ in 0..200 {
        if f(lo).signum() != f(hi).signum() {
            break;
        }
        step *= 2.0;
        if rightward {
            hi = anchor + step;
        } else {
            lo = anchor - step;
        }
    }
    if f(lo).signum() == f(hi).signum() {
        return Err(Error::NotFound(200));
    }

    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let fx = f(x);
        if fx == 0.0 {
            break;
        }
        if fx.signum() == f(lo).signum() {
            lo = x;
        } else {
            hi = x;
        }
        let d = df(x);
        let newton = x - fx / d;
        x = if d != 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (hi - lo).abs() <= 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    Ok(x)
}

/// Points of the unit sphere's positive orthant spaced no more than
/// `eps / 2` apart.
fn orthant_net(d: usize, eps: f64) -> Vec<Vec<f64>> {
    let h = eps / 2.0;
    if d == 2 {
        // Chord 2 sin(Δ/2) = h.
        let dtheta = 2.0 * (h / 2.0).min(1.0).asin();
        let steps = (std::f64::consts::FRAC_PI_2 / dtheta).ceil().max(1.0) as usize;
        return (0..=steps)
            .map(|k| {
                let t = std::f64::consts::FRAC_PI_2 * k as f64 / steps as f64;
                vec![t.cos(), t.sin()]
            })
            .collect();
    }
    // Normalised points of a cube lattice; spacing h/√d on the cube maps to
    // at most h on the sphere's positive part.
    let g = ((d as f64).sqrt() / h).ceil().max(1.0) as usize;
    let mut out: Vec<Vec<f64>> = Vec::new();
    let mut idx = vec![0usize; d];
    loop {
        if idx.contains(&g) {
            let v: Vec<f64> = idx.iter().map(|&i| i as f64).collect();
            let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.push(v.iter().map(|x| x / nrm).collect());
        }
        let mut pos = 0;
        loop {
            if pos == d {
                return out;
            }
            idx[pos] += 1;
            if idx[pos] <= g {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Greedy covering of `samples` by net points that are pairwise within `eps`
/// of orthogonal. Returns the number of centres, or `None` if stuck.
fn greedy_cover(samples: &[Vec<f64>], net: &[Vec<f64>], eps: f64) -> Option<usize> {
    let mut covered = vec![false; samples.len()];
    let mut centres: Vec<&Vec<f64>> = Vec::new();
    while covered.iter().any(|c| !c) {
        let best = net
            .iter()
            .filter(|c| centres.iter().all(|o| inner(c, o).abs() <= eps))
            .map(|c| {
                let gain = samples
                    .iter()
                    .zip(&covered)
                    .filter(|(s, &done)| !done && dist(s, c) <= eps)
                    .count();
                (c, gain)
            })
            .filter(|&(_, g)| g > 0)
            .max_by_key(|&(_, g)| g)?;
        for (s, done) in samples.iter().zip(covered.iter_mut()) {
            if dist(s, best.0) <= eps {
                *done = true;
            }
        }
        centres.push(best.0);
    }
    Some(centres.len())
}

/// Fraction of trials in which at most `p` pairwise near-orthogonal centres
/// from the net ε-cover `n_points` normalised uniform samples, with its
/// binomial standard error. Trial `t` uses seed `seed + t`.
pub fn mc_cover_estimate(
    d: usize,
    n_points: usize,
    p: usize,
    eps: f64,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if d < 2 || trials == 0 || p == 0 || !(eps > 0.0) {
        return Err(Error::InvalidParam(format!(
            "need d ≥ 2, p ≥ 1, trials ≥ 1 and ε > 0 (got d = {d}, p = {p}, trials = {trials}, ε = {eps})"
        )));
    }
    if eps >= 2.0 {
        return Ok((1.0, 0.0));
    }
    let net = orthant_net(d, eps);
    if p > net.len() {
        return Err(Error::InvalidParam(format!("p = {p} exceeds the net size {}", net.len())));
    }
    let hits: usize = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
            let samples: Vec<Vec<f64>> = (0..n_points)
                .map(|_| loop {
                    let v: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
                    let nrm = inner(&v, &v).sqrt();
                    if nrm > 0.0 {
                        break v.into_iter().map(|x| x / nrm).collect();
                    }
                })
                .collect();
            usize::from(greedy_cover(&samples, &net, eps).is_some_and(|c| c <= p))
        })
        .sum();
    let est = hits as f64 / trials as f64;
    Ok((est, (est * (1.0 - est) / trials as f64).sqrt()))
}
