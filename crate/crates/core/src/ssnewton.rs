//! Semi-smooth Newton primal-dual active-set solver for
//!
//! ```text
//! J(A, P) = ||Y - AP||²_F + α||A||_1 + ν||P||_1 + γ||PPᵀ - I||_1,   A, P ≥ 0.
//! ```
//!
//! Each iteration updates the three variable groups `(A, μ_A, λ_A)`,
//! `(P, μ_P, λ_P)` and `(L, R, λ_L)` in turn. Entries in an active set are
//! fixed at zero; the remaining entries solve a small linear system obtained by
//! substituting the linearised complementarity condition for `λ` into the
//! stationarity equation. Rows of `A` (and columns of `P`) decouple, so every
//! inner solve is `k × k`.
//!
//! Sign conventions: the nonnegativity multiplier satisfies `0 = ∇J + μ` with
//! `μ ≤ 0`, so an entry is held at zero when `μ + c₁x ≤ 0`. The ℓ1 multiplier
//! `λ ∈ ∂|x|` is updated as `λ⁺ = κ ∘ x⁺ + a` with `κ = c₂(1 - a∘b)/(d - 1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{dot, frob2_sq, l1_norm, solve_spd, DenseMatrix};

/// Tikhonov shift added to every restricted system.
const SYSTEM_REG: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsnConfig {
    pub alpha: f64,
    pub nu: f64,
    pub gamma: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_iter: usize,
    pub obj_tol: f64,
    pub denom_floor: f64,
    pub seed: u64,
    /// Pin `λ_A = λ_P = 1` and drop the ℓ1 active sets (valid when `A, P ≥ 0`).
    pub nonneg_duals_simplified: bool,
    /// Rescale rows of `P` to unit norm after each P-update; columns of `A`
    /// absorb the scale so `AP` is unchanged.
    pub normalize_p_rows: bool,
    /// Keep the `A ≥ 0` constraint. Turn off for signed `Y`.
    pub enforce_a_nonneg: bool,
}

impl Default for SsnConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            nu: 0.02,
            gamma: 0.02,
            c1: 1.0,
            c2: 1.0,
            max_iter: 200,
            obj_tol: 1e-8,
            denom_floor: 1e-8,
            seed: 0,
            nonneg_duals_simplified: false,
            normalize_p_rows: true,
            enforce_a_nonneg: true,
        }
    }
}

impl SsnConfig {
    pub fn with_weights(alpha: f64, nu: f64, gamma: f64) -> Self {
        Self {
            alpha,
            nu,
            gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [("alpha", self.alpha), ("nu", self.nu), ("gamma", self.gamma)];
        for (name, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParam(format!("{name} must be >= 0, got {v}")));
            }
        }
        let positive = [
            ("c1", self.c1),
            ("c2", self.c2),
            ("obj_tol", self.obj_tol),
            ("denom_floor", self.denom_floor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParam(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParam("max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// An active set and its complement, stored together.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub active: Vec<bool>,
    pub inactive: Vec<bool>,
}

impl Mask {
    fn from_active(active: Vec<bool>) -> Self {
        let inactive = active.iter().map(|a| !a).collect();
        Self { active, inactive }
    }

    pub fn none(len: usize) -> Self {
        Self::from_active(vec![false; len])
    }

    pub fn all(len: usize) -> Self {
        Self::from_active(vec![true; len])
    }

    pub fn count_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    fn changes_from(&self, other: &Mask) -> usize {
        self.active
            .iter()
            .zip(&other.active)
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// Union of two active sets: entries where either forces a zero.
pub fn zero_set(m1: &Mask, m2: &Mask) -> Mask {
    Mask::from_active(
        m1.active
            .iter()
            .zip(&m2.active)
            .map(|(&a, &b)| a || b)
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateMasks {
    pub a_nonneg: Mask,
    pub a_sparse: Mask,
    pub p_nonneg: Mask,
    pub p_sparse: Mask,
    pub l: Mask,
}

impl StateMasks {
    fn empty(a_len: usize, p_len: usize, l_len: usize) -> Self {
        Self {
            a_nonneg: Mask::none(a_len),
            a_sparse: Mask::none(a_len),
            p_nonneg: Mask::none(p_len),
            p_sparse: Mask::none(p_len),
            l: Mask::none(l_len),
        }
    }

    fn changes_from(&self, other: &StateMasks) -> usize {
        self.a_nonneg.changes_from(&other.a_nonneg)
            + self.a_sparse.changes_from(&other.a_sparse)
            + self.p_nonneg.changes_from(&other.p_nonneg)
            + self.p_sparse.changes_from(&other.p_sparse)
            + self.l.changes_from(&other.l)
    }
}

/// All primal and dual iterates.
#[derive(Clone, Debug)]
pub struct SsnState {
    pub a: DenseMatrix,
    pub p: DenseMatrix,
    pub mu_a: DenseMatrix,
    pub lambda_a: DenseMatrix,
    pub mu_p: DenseMatrix,
    pub lambda_p: DenseMatrix,
    pub l: DenseMatrix,
    pub lambda_l: DenseMatrix,
    pub r: DenseMatrix,
    pub masks: StateMasks,
    pub iter: usize,
    /// Number of mask entries that flipped in the most recent step.
    pub last_change_count: usize,
}

impl SsnState {
    /// State at given primal factors with the default dual initialisation
    /// (`λ = 1`, `μ = 0`, `R = 0`).
    pub fn from_factors(a: DenseMatrix, p: DenseMatrix) -> Result<Self> {
        if a.cols() != p.rows() {
            return Err(Error::shape("SsnState", format!("A cols = P rows = {}", p.rows()), a.cols()));
        }
        let k = p.rows();
        let l = p.matmul_t(&p)?.sub(&DenseMatrix::identity(k))?;
        Ok(Self {
            mu_a: DenseMatrix::zeros(a.rows(), k),
            lambda_a: DenseMatrix::filled(a.rows(), k, 1.0),
            mu_p: DenseMatrix::zeros(k, p.cols()),
            lambda_p: DenseMatrix::filled(k, p.cols(), 1.0),
            lambda_l: DenseMatrix::filled(k, k, 1.0),
            r: DenseMatrix::zeros(k, p.cols()),
            masks: StateMasks::empty(a.rows() * k, k * p.cols(), k * k),
            l,
            a,
            p,
            iter: 0,
            last_change_count: 0,
        })
    }

    /// Seeded initialisation: entries uniform on (0.1, 1], scaled so that
    /// `||A⁰P⁰||_F` matches `||Y||_F`.
    pub fn initial(y: &DenseMatrix, k: usize, cfg: &SsnConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut draw = || 1.0 - 0.9 * rng.gen::<f64>();
        let mut a = DenseMatrix::from_fn(y.rows(), k, |_, _| draw());
        let mut p = DenseMatrix::from_fn(k, y.cols(), |_, _| draw());
        let target = y.frobenius();
        let current = a.matmul(&p)?.frobenius();
        let s = (target / current).sqrt();
        a = a.scale(s);
        p = p.scale(s);
        if cfg.normalize_p_rows {
            normalize_rows(&mut a, &mut p);
        }
        Self::from_factors(a, p)
    }

    pub fn objective(&self, y: &DenseMatrix, cfg: &SsnConfig) -> Result<f64> {
        objective(y, &self.a, &self.p, cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SsnDiagnostics {
    pub objective_history: Vec<f64>,
    pub active_set_change_history: Vec<usize>,
    /// `(min A, min P)` after each iteration.
    pub min_entry_history: Vec<(f64, f64)>,
    pub converged: bool,
    pub iterations_used: usize,
}

impl SsnDiagnostics {
    /// One line per iteration: `iteration objective active_set_changes`.
    pub fn to_log(&self) -> String {
        self.objective_history
            .iter()
            .zip(&self.active_set_change_history)
            .enumerate()
            .map(|(i, (obj, ch))| format!("{} {:.12e} {}\n", i + 1, obj, ch))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct SsnOutput {
    pub a: DenseMatrix,
    pub p: DenseMatrix,
    pub diagnostics: SsnDiagnostics,
}

/// `J(A, P)` evaluated exactly.
pub fn objective(y: &DenseMatrix, a: &DenseMatrix, p: &DenseMatrix, cfg: &SsnConfig) -> Result<f64> {
    let fit = frob2_sq(&y.sub(&a.matmul(p)?)?);
    let orth = l1_norm(&p.matmul_t(p)?.sub(&DenseMatrix::identity(p.rows()))?);
    Ok(fit + cfg.alpha * l1_norm(a) + cfg.nu * l1_norm(p) + cfg.gamma * orth)
}

/// Residual of `λ = (λ + cx) / max(1, |λ + cx|)`, multiplied through by the
/// denominator. Zero exactly when `λ ∈ ∂|·|(x)`.
pub fn sign_residual(lambda: f64, x: f64, c: f64) -> f64 {
    let s = lambda + c * x;
    lambda * s.abs().max(1.0) - s
}

/// Residual of `μ = min(μ + cx, 0)`. Zero exactly when `x ≥ 0`, `μ ≤ 0`, `μx = 0`.
pub fn nonneg_residual(mu: f64, x: f64, c: f64) -> f64 {
    mu - (mu + c * x).min(0.0)
}

/// `λ / max(1, |λ|)`, the part of `λ` that lies in the ℓ1 subdifferential.
fn project_unit(lambda: &DenseMatrix) -> DenseMatrix {
    lambda.map(|l| l / l.abs().max(1.0))
}

/// `μ_A = -2APPᵀ + 2YPᵀ - αλ_A`, with `λ_A` projected onto `[-1, 1]`.
pub fn compute_mu_a(
    a: &DenseMatrix,
    p: &DenseMatrix,
    y: &DenseMatrix,
    lambda_a: &DenseMatrix,
    alpha: f64,
) -> Result<DenseMatrix> {
    let gram = p.matmul_t(p)?;
    let a_gram = a.matmul(&gram)?;
    let yp = y.matmul_t(p)?;
    if a_gram.shape() != yp.shape() {
        return Err(Error::shape("compute_mu_a", format!("{:?}", a_gram.shape()), format!("{:?}", yp.shape())));
    }
    a_gram.scale(-2.0).add(&yp.scale(2.0))?.sub(&project_unit(lambda_a).scale(alpha))
}

/// `μ_P = 2AᵀY - 2AᵀAP - νλ_P - γF` where `F` is the orthogonality force,
/// `λ_P` projected as for `μ_A`.
fn compute_mu_p(
    a: &DenseMatrix,
    p: &DenseMatrix,
    y: &DenseMatrix,
    lambda_p: &DenseMatrix,
    force: &DenseMatrix,
    cfg: &SsnConfig,
) -> Result<DenseMatrix> {
    let aty = a.t_matmul(y)?;
    let atap = a.t_matmul(a)?.matmul(p)?;
    aty.scale(2.0)
        .sub(&atap.scale(2.0))?
        .sub(&project_unit(lambda_p).scale(cfg.nu))?
        .sub(&force.scale(cfg.gamma))
}

/// Subgradient of `||PPᵀ - I||_1` along `P` given the multiplier `λ_L`:
/// `(λ_L + λ_Lᵀ) P`.
pub fn orthogonality_force(lambda_l: &DenseMatrix, p: &DenseMatrix) -> Result<DenseMatrix> {
    lambda_l.add(&lambda_l.transpose())?.matmul(p)
}

/// Active sets for a nonnegative, ℓ1-penalised variable.
///
/// `mask1` holds entries pinned by the nonnegativity constraint
/// (`μ + c₁x ≤ 0`); `mask2` holds entries pinned by the ℓ1 term
/// (`|λ + c₂x| ≤ 1`).
pub fn active_masks(
    x: &DenseMatrix,
    mu: &DenseMatrix,
    lambda: &DenseMatrix,
    c1: f64,
    c2: f64,
) -> Result<(Mask, Mask)> {
    x.require_same_shape(mu, "active_masks")?;
    x.require_same_shape(lambda, "active_masks")?;
    let xs = x.as_slice();
    let m1 = xs
        .iter()
        .zip(mu.as_slice())
        .map(|(&xv, &m)| m + c1 * xv <= 0.0)
        .collect();
    let m2 = xs
        .iter()
        .zip(lambda.as_slice())
        .map(|(&xv, &l)| (l + c2 * xv).abs() <= 1.0)
        .collect();
    Ok((Mask::from_active(m1), Mask::from_active(m2)))
}

/// Entrywise semi-smooth Newton coefficients `a`, `b`, `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct NewtonCoeffs {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub d: DenseMatrix,
}

impl NewtonCoeffs {
    /// `κ = c₂ (1 - a b) / max(d - 1, floor)` at flat index `k`.
    fn kappa(&self, k: usize, c2: f64, denom_floor: f64) -> f64 {
        let (a, b, d) = (self.a.as_slice()[k], self.b.as_slice()[k], self.d.as_slice()[k]);
        c2 * (1.0 - a * b) / (d - 1.0).max(denom_floor)
    }

    /// `λ⁺ = κ ∘ x⁺ + a`.
    fn lambda_update(&self, x_next: &DenseMatrix, c2: f64, denom_floor: f64) -> DenseMatrix {
        let mut out = self.a.clone();
        for (k, (o, &x)) in out.as_mut_slice().iter_mut().zip(x_next.as_slice()).enumerate() {
            *o += self.kappa(k, c2, denom_floor) * x;
        }
        out
    }
}

pub fn newton_coeffs(lambda: &DenseMatrix, x: &DenseMatrix, c2: f64, denom_floor: f64) -> Result<NewtonCoeffs> {
    x.require_same_shape(lambda, "newton_coeffs")?;
    let a = lambda.map(|l| l / l.abs().max(1.0));
    let s = lambda.zip_map(x, |l, xv| l + c2 * xv)?;
    let d = s.map(f64::abs);
    let b = s.map(|v| if v.abs() < denom_floor { 0.0 } else { v / v.abs() });
    Ok(NewtonCoeffs { a, b, d })
}

/// Solve `(gram_SS + weight·diag(κ_S)) x = rhs_S` on the free set `S`.
///
/// With `keep_nonneg` the system is read as the quadratic program
/// `min ½xᵀMx - rhsᵀx, x ≥ 0` over `S` and solved by Lawson–Hanson; `free`
/// is shrunk to the passive set. Entries outside the final free set are zero.
fn restricted_solve(
    gram: &DenseMatrix,
    rhs: &[f64],
    diag: &[f64],
    free: &mut Vec<usize>,
    keep_nonneg: bool,
    axis: &'static str,
    index: usize,
) -> Result<Vec<f64>> {
    let k = gram.rows();
    let mut out = vec![0.0; k];
    if free.is_empty() {
        return Ok(out);
    }
    let scale = free.iter().map(|&i| gram[(i, i)]).fold(1.0, f64::max);
    let entry = |i: usize, j: usize| {
        let v = gram[(i, j)];
        if i == j {
            v + diag[i] + SYSTEM_REG * scale
        } else {
            v
        }
    };
    let solve_on = |set: &[usize]| -> Result<Vec<f64>> {
        let n = set.len();
        let mut m = vec![0.0; n * n];
        for (ii, &i) in set.iter().enumerate() {
            for (jj, &j) in set.iter().enumerate() {
                m[ii * n + jj] = entry(i, j);
            }
        }
        let b: Vec<f64> = set.iter().map(|&i| rhs[i]).collect();
        solve_spd(&m, &b, n).ok_or(Error::Singular { axis, index })
    };

    let x = solve_on(free)?;
    if !keep_nonneg || x.iter().all(|&v| v >= 0.0) {
        for (&i, v) in free.iter().zip(x) {
            out[i] = v;
        }
        return Ok(out);
    }

    // Lawson–Hanson over the candidate set.
    let candidates = free.clone();
    let mut passive: Vec<usize> = Vec::new();
    let tol = 1e-12 * rhs.iter().fold(1.0, |m: f64, v| m.max(v.abs()));
    for _ in 0..3 * candidates.len() + 10 {
        let grad = |j: usize, x: &[f64]| rhs[j] - candidates.iter().map(|&i| entry(j, i) * x[i]).sum::<f64>();
        let next = candidates
            .iter()
            .filter(|j| !passive.contains(j))
            .map(|&j| (j, grad(j, &out)))
            .filter(|&(_, w)| w > tol)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let Some((j, _)) = next else { break };
        passive.push(j);
        loop {
            let z = solve_on(&passive)?;
            if z.iter().all(|&v| v > 0.0) {
                for (&i, v) in passive.iter().zip(z) {
                    out[i] = v;
                }
                break;
            }
            let mut step = 1.0f64;
            for (&i, &zi) in passive.iter().zip(&z) {
                if zi <= 0.0 {
                    step = step.min(out[i] / (out[i] - zi));
                }
            }
            for (&i, &zi) in passive.iter().zip(&z) {
                out[i] += step * (zi - out[i]);
            }
            passive.retain(|&i| out[i] > 0.0);
            for &i in &candidates {
                if !passive.contains(&i) {
                    out[i] = 0.0;
                }
            }
            if passive.is_empty() {
                break;
            }
        }
    }
    passive.sort_unstable();
    *free = passive;
    Ok(out)
}

/// A-update: `A⁺ = 0` on the zero set, and on the free set
/// `2A⁺PPᵀ - 2YPᵀ + αλ⁺ = 0` with `λ⁺ = κ∘A⁺ + a`. Solved row by row.
#[allow(clippy::too_many_arguments)]
pub fn solve_a(
    y: &DenseMatrix,
    p: &DenseMatrix,
    free_mask: &Mask,
    coeffs: &NewtonCoeffs,
    alpha: f64,
    c2: f64,
    denom_floor: f64,
    keep_nonneg: bool,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let k = p.rows();
    if y.cols() != p.cols() {
        return Err(Error::shape("solve_a", format!("Y cols = {}", p.cols()), y.cols()));
    }
    if free_mask.inactive.len() != y.rows() * k || coeffs.a.shape() != (y.rows(), k) {
        return Err(Error::shape("solve_a", format!("mask {}x{}", y.rows(), k), free_mask.inactive.len()));
    }
    let gram = p.matmul_t(p)?.scale(2.0);
    let yp = y.matmul_t(p)?;
    let mut a_next = DenseMatrix::zeros(y.rows(), k);
    let mut diag = vec![0.0; k];
    let mut rhs = vec![0.0; k];
    for i in 0..y.rows() {
        let mut free: Vec<usize> = (0..k).filter(|&j| free_mask.inactive[i * k + j]).collect();
        for j in 0..k {
            let idx = i * k + j;
            diag[j] = alpha * coeffs.kappa(idx, c2, denom_floor);
            rhs[j] = 2.0 * yp[(i, j)] - alpha * coeffs.a.as_slice()[idx];
        }
        let row = restricted_solve(&gram, &rhs, &diag, &mut free, keep_nonneg, "row", i)?;
        a_next.row_mut(i).copy_from_slice(&row);
    }
    let lambda_next = coeffs.lambda_update(&a_next, c2, denom_floor);
    Ok((a_next, lambda_next))
}

/// P-update: `P⁺ = 0` on the zero set, and on the free set
/// `-2AᵀY + 2AᵀAP⁺ + νλ⁺ + γF = 0` with `F = (λ_L + λ_Lᵀ)P` evaluated at the
/// current `P`. Solved column by column; entries stay nonnegative.
#[allow(clippy::too_many_arguments)]
pub fn solve_p(
    y: &DenseMatrix,
    a: &DenseMatrix,
    force: &DenseMatrix,
    free_mask: &Mask,
    coeffs: &NewtonCoeffs,
    nu: f64,
    gamma: f64,
    c2: f64,
    denom_floor: f64,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let k = a.cols();
    let n = y.cols();
    if y.rows() != a.rows() {
        return Err(Error::shape("solve_p", format!("Y rows = {}", a.rows()), y.rows()));
    }
    if free_mask.inactive.len() != k * n || force.shape() != (k, n) || coeffs.a.shape() != (k, n) {
        return Err(Error::shape("solve_p", format!("mask {k}x{n}"), free_mask.inactive.len()));
    }
    let gram = a.t_matmul(a)?.scale(2.0);
    let aty = a.t_matmul(y)?;
    let mut p_next = DenseMatrix::zeros(k, n);
    let mut diag = vec![0.0; k];
    let mut rhs = vec![0.0; k];
    for j in 0..n {
        let mut free: Vec<usize> = (0..k).filter(|&t| free_mask.inactive[t * n + j]).collect();
        for t in 0..k {
            let idx = t * n + j;
            diag[t] = nu * coeffs.kappa(idx, c2, denom_floor);
            rhs[t] = 2.0 * aty[(t, j)] - nu * coeffs.a.as_slice()[idx] - gamma * force[(t, j)];
        }
        let col = restricted_solve(&gram, &rhs, &diag, &mut free, true, "column", j)?;
        for (t, v) in col.into_iter().enumerate() {
            p_next[(t, j)] = v;
        }
    }
    let lambda_next = coeffs.lambda_update(&p_next, c2, denom_floor);
    Ok((p_next, lambda_next))
}

/// `L⁺ = P⁺P⁺ᵀ - I` (zeroed on the active set), `R⁺` the minimum-norm
/// least-squares solution of `R⁺(P⁺ - P) = L⁺ - L`, and the `λ_L` update.
#[allow(clippy::too_many_arguments)]
pub fn update_l(
    p_next: &DenseMatrix,
    p_prev: &DenseMatrix,
    l_prev: &DenseMatrix,
    mask_l: &Mask,
    coeffs_l: &NewtonCoeffs,
    c2: f64,
    denom_floor: f64,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    p_next.require_same_shape(p_prev, "update_l")?;
    let k = p_next.rows();
    let mut l_next = p_next.matmul_t(p_next)?.sub(&DenseMatrix::identity(k))?;
    l_next.require_same_shape(l_prev, "update_l")?;
    for (v, &act) in l_next.as_mut_slice().iter_mut().zip(&mask_l.active) {
        if act {
            *v = 0.0;
        }
    }
    let r_next = secant_solve(&p_next.sub(p_prev)?, &l_next.sub(l_prev)?)?;
    let lambda_next = coeffs_l.lambda_update(&l_next, c2, denom_floor);
    Ok((l_next, r_next, lambda_next))
}

/// Minimum-norm solution of `R ΔPᵀ = ΔL`: `R = ΔL (ΔP ΔPᵀ + εI)⁻¹ ΔP`.
/// `R` has the shape of `P`.
fn secant_solve(dp: &DenseMatrix, dl: &DenseMatrix) -> Result<DenseMatrix> {
    let k = dp.rows();
    let mut normal = dp.matmul_t(dp)?;
    for i in 0..k {
        normal[(i, i)] += SYSTEM_REG;
    }
    let mut x = DenseMatrix::zeros(dl.rows(), k);
    for i in 0..dl.rows() {
        let row = solve_spd(normal.as_slice(), dl.row(i), k).ok_or(Error::Singular { axis: "secant row", index: i })?;
        x.row_mut(i).copy_from_slice(&row);
    }
    x.matmul(dp)
}

fn normalize_rows(a: &mut DenseMatrix, p: &mut DenseMatrix) {
    for t in 0..p.rows() {
        let norm = p.row(t).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            p.row_mut(t).iter_mut().for_each(|v| *v /= norm);
            for i in 0..a.rows() {
                a[(i, t)] *= norm;
            }
        }
    }
}

/// On entries held at zero the ℓ1 multiplier is read off stationarity,
/// `λ = -∇f / weight`, so an entry whose gradient beats the threshold is
/// released at the next step. For nonnegative blocks the value is floored
/// at -1: a pull towards negative values is absorbed by `μ` instead.
fn pinned_duals(
    mut lambda: DenseMatrix,
    x: &DenseMatrix,
    neg_grad: &DenseMatrix,
    weight: f64,
    nonneg: bool,
) -> DenseMatrix {
    if weight <= 0.0 {
        return lambda;
    }
    for ((l, &xv), &g) in lambda.as_mut_slice().iter_mut().zip(x.as_slice()).zip(neg_grad.as_slice()) {
        if xv == 0.0 {
            let v = g / weight;
            *l = if nonneg { v.max(-1.0) } else { v };
        }
    }
    lambda
}

/// `½xᵀGx − bᵀx + w·Σ|x|`, the part of the block objective that depends on
/// one row of `A` or one column of `P`.
fn block_value(g: &DenseMatrix, b: &[f64], w: f64, x: &[f64]) -> f64 {
    let quad: f64 = (0..x.len()).map(|i| x[i] * dot(g.row(i), x)).sum();
    0.5 * quad - dot(b, x) + w * x.iter().map(|v| v.abs()).sum::<f64>()
}

/// A Newton proposal that raises its block objective above the previous
/// iterate is replaced: by the exact minimiser over all entries for
/// nonnegative blocks, by the previous value otherwise. Returns whether the
/// proposal was replaced.
#[allow(clippy::too_many_arguments)]
fn safeguard(
    g: &DenseMatrix,
    b: &[f64],
    w: f64,
    old: &[f64],
    new: &mut [f64],
    lambda: &mut [f64],
    nonneg: bool,
    axis: &'static str,
    index: usize,
) -> Result<bool> {
    let before = block_value(g, b, w, old);
    let after = block_value(g, b, w, new);
    if after <= before + 1e-12 * before.abs().max(1.0) {
        return Ok(false);
    }
    if nonneg {
        let rhs: Vec<f64> = b.iter().map(|v| v - w).collect();
        let mut free: Vec<usize> = (0..old.len()).collect();
        let x = restricted_solve(g, &rhs, &vec![0.0; old.len()], &mut free, true, axis, index)?;
        new.copy_from_slice(&x);
    } else {
        new.copy_from_slice(old);
    }
    for (l, &v) in lambda.iter_mut().zip(new.iter()) {
        if v != 0.0 {
            *l = v.signum();
        }
    }
    Ok(true)
}

fn masks_for(
    x: &DenseMatrix,
    mu: &DenseMatrix,
    lambda: &DenseMatrix,
    cfg: &SsnConfig,
    nonneg: bool,
    l1_weight: f64,
) -> Result<(Mask, Mask)> {
    let (mut m1, mut m2) = active_masks(x, mu, lambda, cfg.c1, cfg.c2)?;
    let len = x.as_slice().len();
    if !nonneg {
        m1 = Mask::none(len);
    }
    if cfg.nonneg_duals_simplified || l1_weight == 0.0 {
        m2 = Mask::none(len);
    }
    Ok((m1, m2))
}

/// One full pass over the A-, P- and L-blocks.
pub fn ssn_step(state: &SsnState, y: &DenseMatrix, cfg: &SsnConfig) -> Result<SsnState> {
    let k = state.p.rows();
    if state.a.shape() != (y.rows(), k) || state.p.shape() != (k, y.cols()) {
        return Err(Error::shape(
            "ssn_step",
            format!("A {}x{k}, P {k}x{}", y.rows(), y.cols()),
            format!("A {:?}, P {:?}", state.a.shape(), state.p.shape()),
        ));
    }
    let one = |r, c| DenseMatrix::filled(r, c, 1.0);

    // A-block
    let lambda_a = if cfg.nonneg_duals_simplified { one(y.rows(), k) } else { state.lambda_a.clone() };
    // The starting point solves no restricted system, so its gradient says
    // nothing about which entries belong at zero; the first pass keeps the
    // initial multipliers.
    let first = state.iter == 0;
    let mu_a = if cfg.enforce_a_nonneg && !first {
        compute_mu_a(&state.a, &state.p, y, &lambda_a, cfg.alpha)?
    } else {
        DenseMatrix::zeros(y.rows(), k)
    };
    let (a_nonneg, a_sparse) = masks_for(&state.a, &mu_a, &lambda_a, cfg, cfg.enforce_a_nonneg, cfg.alpha)?;
    let coeffs_a = newton_coeffs(&lambda_a, &state.a, cfg.c2, cfg.denom_floor)?;
    let (mut a_next, mut lambda_a_next) = solve_a(
        y,
        &state.p,
        &zero_set(&a_nonneg, &a_sparse),
        &coeffs_a,
        cfg.alpha,
        cfg.c2,
        cfg.denom_floor,
        cfg.enforce_a_nonneg,
    )?;

    let gram_a = state.p.matmul_t(&state.p)?.scale(2.0);
    let lin_a = y.matmul_t(&state.p)?.scale(2.0);
    for i in 0..y.rows() {
        let mut row = a_next.row(i).to_vec();
        let mut lam = lambda_a_next.row(i).to_vec();
        let nonneg = cfg.enforce_a_nonneg;
        if safeguard(&gram_a, lin_a.row(i), cfg.alpha, state.a.row(i), &mut row, &mut lam, nonneg, "row", i)? {
            a_next.row_mut(i).copy_from_slice(&row);
            lambda_a_next.row_mut(i).copy_from_slice(&lam);
        }
    }

    // P-block
    let lambda_p = if cfg.nonneg_duals_simplified { one(k, y.cols()) } else { state.lambda_p.clone() };
    let force = orthogonality_force(&state.lambda_l, &state.p)?;
    let mu_p = if first { state.mu_p.clone() } else { compute_mu_p(&a_next, &state.p, y, &lambda_p, &force, cfg)? };
    let (p_nonneg, p_sparse) = masks_for(&state.p, &mu_p, &lambda_p, cfg, true, cfg.nu)?;
    let coeffs_p = newton_coeffs(&lambda_p, &state.p, cfg.c2, cfg.denom_floor)?;
    let (mut p_next, mut lambda_p_next) = solve_p(
        y,
        &a_next,
        &force,
        &zero_set(&p_nonneg, &p_sparse),
        &coeffs_p,
        cfg.nu,
        cfg.gamma,
        cfg.c2,
        cfg.denom_floor,
    )?;
    let gram_p = a_next.t_matmul(&a_next)?.scale(2.0);
    let lin_p = a_next.t_matmul(y)?.scale(2.0).sub(&force.scale(cfg.gamma))?;
    for j in 0..y.cols() {
        let mut col = p_next.col(j);
        let mut lam = lambda_p_next.col(j);
        if safeguard(&gram_p, &lin_p.col(j), cfg.nu, &state.p.col(j), &mut col, &mut lam, true, "column", j)? {
            for t in 0..k {
                p_next[(t, j)] = col[t];
                lambda_p_next[(t, j)] = lam[t];
            }
        }
    }
    if cfg.normalize_p_rows {
        normalize_rows(&mut a_next, &mut p_next);
    }
    let gram_p = p_next.matmul_t(&p_next)?;
    let neg_grad_a = y.matmul_t(&p_next)?.sub(&a_next.matmul(&gram_p)?)?.scale(2.0);
    let lambda_a_next = pinned_duals(lambda_a_next, &a_next, &neg_grad_a, cfg.alpha, cfg.enforce_a_nonneg);
    let neg_grad_p = a_next
        .t_matmul(y)?
        .sub(&a_next.t_matmul(&a_next)?.matmul(&p_next)?)?
        .scale(2.0)
        .sub(&orthogonality_force(&state.lambda_l, &p_next)?.scale(cfg.gamma))?;
    let lambda_p_next = pinned_duals(lambda_p_next, &p_next, &neg_grad_p, cfg.nu, true);

    // L-block
    let mask_l = Mask::from_active(
        state
            .lambda_l
            .as_slice()
            .iter()
            .zip(state.l.as_slice())
            .map(|(&lam, &l)| (lam + cfg.c2 * l).abs() <= 1.0)
            .collect(),
    );
    let coeffs_l = newton_coeffs(&state.lambda_l, &state.l, cfg.c2, cfg.denom_floor)?;
    let (l_next, r_next, lambda_l_next) =
        update_l(&p_next, &state.p, &state.l, &mask_l, &coeffs_l, cfg.c2, cfg.denom_floor)?;

    let masks = StateMasks {
        a_nonneg,
        a_sparse,
        p_nonneg,
        p_sparse,
        l: mask_l,
    };
    let last_change_count = masks.changes_from(&state.masks);
    Ok(SsnState {
        a: a_next,
        p: p_next,
        mu_a,
        lambda_a: if cfg.nonneg_duals_simplified { lambda_a } else { lambda_a_next },
        mu_p,
        lambda_p: if cfg.nonneg_duals_simplified { lambda_p } else { lambda_p_next },
        l: l_next,
        lambda_l: lambda_l_next,
        r: r_next,
        masks,
        iter: state.iter + 1,
        last_change_count,
    })
}

/// Run the solver from the seeded initialisation until the active sets
/// settle, the objective stalls, or `max_iter` is reached.
pub fn ssn_solve(y: &DenseMatrix, k: usize, cfg: &SsnConfig) -> Result<SsnOutput> {
    cfg.validate()?;
    if k == 0 {
        return Err(Error::InvalidParam("rank k must be positive".into()));
    }
    if cfg.enforce_a_nonneg && !y.is_nonneg() {
        return Err(Error::InvalidParam(
            "Y has negative entries; disable enforce_a_nonneg to factor signed data".into(),
        ));
    }
    let state = SsnState::initial(y, k, cfg)?;
    ssn_solve_from(state, y, cfg)
}

/// Run the solver from a caller-supplied state.
pub fn ssn_solve_from(mut state: SsnState, y: &DenseMatrix, cfg: &SsnConfig) -> Result<SsnOutput> {
    let mut diag = SsnDiagnostics::default();
    let mut prev_obj = state.objective(y, cfg)?;
    let mut settled_steps = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ RESEED_STREAM);
    let mut reseeds_left = 2 * state.p.rows();
    for it in 1..=cfg.max_iter {
        state = ssn_step(&state, y, cfg)?;
        let mut reseeded = false;
        if reseeds_left > 0 && 2 * it <= cfg.max_iter {
            let n = reseed_dead(&mut state, y, &mut rng, reseeds_left)?;
            reseeds_left -= n;
            reseeded = n > 0;
        }
        let obj = state.objective(y, cfg)?;
        if !obj.is_finite() {
            return Err(Error::Divergence { iter: it, objective: obj });
        }
        diag.objective_history.push(obj);
        diag.active_set_change_history.push(state.last_change_count);
        diag.min_entry_history.push((state.a.min_entry(), state.p.min_entry()));
        diag.iterations_used = it;

        settled_steps = if state.last_change_count == 0 && !reseeded { settled_steps + 1 } else { 0 };
        let rel_change = (obj - prev_obj).abs() / prev_obj.max(1.0);
        prev_obj = obj;
        if settled_steps >= 2 || (rel_change < cfg.obj_tol && !reseeded) {
            diag.converged = true;
            break;
        }
    }
    Ok(SsnOutput {
        a: state.a,
        p: state.p,
        diagnostics: diag,
    })
}

const RESEED_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// A component whose column of `A` or row of `P` is identically zero is a
/// stationary point of both block updates and can never recover. Redraw such
/// components from the initialisation distribution, scaled to the current
/// residual, and reset their duals. Returns the number of components redrawn.
fn reseed_dead(state: &mut SsnState, y: &DenseMatrix, rng: &mut ChaCha8Rng, budget: usize) -> Result<usize> {
    let k = state.p.rows();
    let dead: Vec<usize> = (0..k)
        .filter(|&t| state.p.row(t).iter().all(|&v| v == 0.0) || state.a.col(t).iter().all(|&v| v == 0.0))
        .take(budget)
        .collect();
    if dead.is_empty() {
        return Ok(0);
    }
    let residual = y.sub(&state.a.matmul(&state.p)?)?.frobenius();
    if residual == 0.0 {
        return Ok(0);
    }
    let share = residual / (dead.len() as f64).sqrt();
    let mut draw = || 1.0 - 0.9 * rng.gen::<f64>();
    for &t in &dead {
        let row: Vec<f64> = (0..state.p.cols()).map(|_| draw()).collect();
        let row_norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let col: Vec<f64> = (0..state.a.rows()).map(|_| draw()).collect();
        let col_norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (j, v) in row.into_iter().enumerate() {
            state.p[(t, j)] = v / row_norm;
            state.lambda_p[(t, j)] = 1.0;
            state.mu_p[(t, j)] = 0.0;
        }
        for (i, v) in col.into_iter().enumerate() {
            state.a[(i, t)] = v * share / col_norm;
            state.lambda_a[(i, t)] = 1.0;
            state.mu_a[(i, t)] = 0.0;
        }
    }
    Ok(dead.len())
}
