//! Multi-level analysis: block-mean restriction to level `s`, tri-factorisation
//! and truncation on the coarse grid, piecewise-constant prolongation back.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{dequantize_value, quantize_value};
use crate::error::{Error, Result};
use crate::evalmetrics::{affine_rel_error, noisy_reconstruct, MemoryAccount, NoiseSpec};
use crate::matcore::{DenseMatrix, NonNegMatrix};
use crate::ssnewton::SsnConfig;
use crate::trifactor::{select_p_tilde, sigma_sort, truncate, two_stage, TruncatedTriFactor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlaConfig {
    pub r: usize,
    pub s_offset: usize,
    pub k1: f64,
    pub k2: f64,
    pub quant_step: f64,
    pub solver: SsnConfig,
    /// When set, every level also reports the error of a noisy reconstruction.
    pub noise: Option<NoiseSpec>,
}

impl Default for MlaConfig {
    fn default() -> Self {
        Self {
            r: 2,
            s_offset: 3,
            k1: 3.5,
            k2: 0.95,
            quant_step: 0.01,
            solver: SsnConfig::default(),
            noise: None,
        }
    }
}

impl MlaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r < 2 {
            return Err(Error::InvalidParam(format!("r = {} must be ≥ 2", self.r)));
        }
        if !(self.k1 > 0.0) {
            return Err(Error::InvalidParam(format!("K1 = {} must be positive", self.k1)));
        }
        if !(self.k2 > 0.0 && self.k2 < 1.0) {
            return Err(Error::InvalidParam(format!("K2 = {} must lie in (0, 1)", self.k2)));
        }
        if !(self.quant_step > 0.0) {
            return Err(Error::InvalidParam(format!("quant_step = {} must be positive", self.quant_step)));
        }
        self.solver.validate()
    }
}

#[derive(Clone, Debug)]
pub struct LevelResult {
    pub s: usize,
    pub p: usize,
    pub p_tilde: usize,
    /// Quantised truncated factors on the coarse grid; `None` if the level failed.
    pub factors: Option<TruncatedTriFactor>,
    /// Prolonged reconstruction, M×N; `None` if the level failed.
    pub reconstruction: Option<NonNegMatrix>,
    pub memory_ratio: f64,
    pub rel_error: f64,
    pub rel_error_noisy: Option<f64>,
    pub failed: bool,
}

/// The per-level JSON record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub s: usize,
    pub p: usize,
    pub p_tilde: usize,
    pub memory_ratio: f64,
    pub rel_error: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rel_error_noisy: Option<f64>,
    pub failed: bool,
}

impl LevelResult {
    pub fn report(&self) -> LevelReport {
        LevelReport {
            s: self.s,
            p: self.p,
            p_tilde: self.p_tilde,
            memory_ratio: self.memory_ratio,
            rel_error: self.rel_error,
            rel_error_noisy: self.rel_error_noisy,
            failed: self.failed,
        }
    }
}

fn block(s: usize, r: usize) -> Result<usize> {
    u32::try_from(s)
        .ok()
        .and_then(|s| r.checked_pow(s))
        .ok_or_else(|| Error::InvalidParam(format!("r^s overflows for r = {r}, s = {s}")))
}

/// Means over `rˢ × rˢ` blocks. Partial edge blocks are padded by replicating
/// the last row/column.
pub fn restrict(y: &DenseMatrix, s: usize, r: usize) -> Result<DenseMatrix> {
    let b = block(s, r)?;
    if b == 1 {
        return Ok(y.clone());
    }
    let (m, n) = y.shape();
    let (cm, cn) = (m.div_ceil(b), n.div_ceil(b));
    let area = (b * b) as f64;
    Ok(DenseMatrix::from_fn(cm, cn, |bi, bj| {
        // Deviations from the first entry, so constant blocks come back bit-exact.
        let base = y[((bi * b).min(m - 1), (bj * b).min(n - 1))];
        let mut acc = 0.0;
        for i in bi * b..(bi + 1) * b {
            for j in bj * b..(bj + 1) * b {
                acc += y[(i.min(m - 1), j.min(n - 1))] - base;
            }
        }
        base + acc / area
    }))
}

/// Replicate each coarse entry over its `rˢ × rˢ` block and crop to `M × N`.
pub fn prolong(z: &DenseMatrix, s: usize, r: usize, m: usize, n: usize) -> Result<DenseMatrix> {
    let b = block(s, r)?;
    if z.shape() != (m.div_ceil(b), n.div_ceil(b)) {
        return Err(Error::shape(
            "prolong",
            format!("{}x{}", m.div_ceil(b), n.div_ceil(b)),
            format!("{}x{}", z.rows(), z.cols()),
        ));
    }
    Ok(DenseMatrix::from_fn(m, n, |i, j| z[(i / b, j / b)]))
}

/// `round(K1·sqrt(max / max(1, ln max − 2s ln r))·r^(−s/2))`, at least 1.
pub fn rank_schedule(n: usize, m: usize, s: usize, r: usize, k1: f64) -> usize {
    let big = n.max(m) as f64;
    let rf = r as f64;
    let denom = (big.ln() - 2.0 * s as f64 * rf.ln()).max(1.0);
    let p = (k1 * (big / denom).sqrt() * rf.powf(-(s as f64) / 2.0)).round();
    (p as usize).max(1)
}

/// `floor(log_r min(N, M) − offset)`, at least 0.
pub fn smax(n: usize, m: usize, r: usize, offset: usize) -> usize {
    let v = ((n.min(m) as f64).ln() / (r as f64).ln() - offset as f64).floor();
    // Exact powers can land a hair below the integer.
    let v = if (v + 1.0 - ((n.min(m) as f64).ln() / (r as f64).ln() - offset as f64)).abs() < 1e-12 {
        v + 1.0
    } else {
        v
    };
    v.max(0.0) as usize
}

/// Quantise and dequantise every stored value of a truncation.
pub fn quantize_factors(ttf: &TruncatedTriFactor, step: f64) -> Result<TruncatedTriFactor> {
    ttf.map_values(|x| dequantize_value(quantize_value(x, step), step))
}

/// One level of the analysis. Solver failures are reported in the result,
/// not as an error.
pub fn mla_level(y: &NonNegMatrix, s: usize, cfg: &MlaConfig) -> Result<LevelResult> {
    let (m, n) = y.shape();
    let coarse = restrict(y, s, cfg.r)?;
    let p = rank_schedule(n, m, s, cfg.r, cfg.k1).min(coarse.rows().min(coarse.cols()));

    let attempt = || -> Result<(TruncatedTriFactor, usize)> {
        let tf = two_stage(&NonNegMatrix::new(coarse.clone())?, p, &cfg.solver)?;
        let p_tilde = select_p_tilde(&sigma_sort(&tf.sigma), cfg.k2)?;
        let ttf = quantize_factors(&truncate(&tf, p_tilde)?, cfg.quant_step)?;
        Ok((ttf, p_tilde))
    };
    let (ttf, p_tilde) = match attempt() {
        Ok(v) => v,
        Err(Error::Singular { .. } | Error::Divergence { .. }) => {
            return Ok(LevelResult {
                s,
                p,
                p_tilde: 0,
                factors: None,
                reconstruction: None,
                memory_ratio: f64::NAN,
                rel_error: f64::NAN,
                rel_error_noisy: None,
                failed: true,
            })
        }
        Err(e) => return Err(e),
    };

    let recon = prolong(&ttf.reconstruct(), s, cfg.r, m, n)?;
    let rel_error = affine_rel_error(&recon, y)?;
    let rel_error_noisy = match &cfg.noise {
        Some(spec) => {
            let noisy = prolong(&noisy_reconstruct(&ttf, spec)?, s, cfg.r, m, n)?;
            Some(affine_rel_error(&noisy, y)?)
        }
        None => None,
    };
    let memory_ratio = MemoryAccount::for_trifactor(&ttf, cfg.quant_step, m * n)?.ratio();
    Ok(LevelResult {
        s,
        p,
        p_tilde,
        factors: Some(ttf),
        reconstruction: Some(NonNegMatrix::new(recon)?),
        memory_ratio,
        rel_error,
        rel_error_noisy,
        failed: false,
    })
}

/// Levels `smax` down to 1, computed in parallel, returned coarse to fine.
pub fn mla_run(y: &NonNegMatrix, cfg: &MlaConfig) -> Result<Vec<LevelResult>> {
    cfg.validate()?;
    let (m, n) = y.shape();
    if m.min(n) < cfg.r {
        return Err(Error::InvalidParam(format!("image {m}x{n} is smaller than r = {}", cfg.r)));
    }
    let top = smax(n, m, cfg.r, cfg.s_offset);
    mla_levels(y, &(1..=top).rev().collect::<Vec<_>>(), cfg)
}

/// The given levels, in parallel, in the order given.
pub fn mla_levels(y: &NonNegMatrix, levels: &[usize], cfg: &MlaConfig) -> Result<Vec<LevelResult>> {
    cfg.validate()?;
    levels.par_iter().map(|&s| mla_level(y, s, cfg)).collect()
}
