//! Evaluation protocol: affine-invariant relative error, memory accounting,
//! multiplicative channel noise and the block difference-gradient energy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::quantize_value;
use crate::error::{Error, Result};
use crate::matcore::DenseMatrix;
use crate::trifactor::TruncatedTriFactor;

/// `min_{a,b} ||aI + b - Y||_F / ||Y||_F`, solved in centred form.
/// A constant `I` gets `a = 0`, `b = mean(Y)`.
pub fn affine_rel_error(i: &DenseMatrix, y: &DenseMatrix) -> Result<f64> {
    y.require_same_shape(i, "affine_rel_error")?;
    let norm_y = y.frobenius();
    if norm_y == 0.0 {
        return Err(Error::InvalidParam("reference is the zero matrix".into()));
    }
    let n = y.as_slice().len() as f64;
    let mean_i = i.sum() / n;
    let mean_y = y.sum() / n;
    let (mut cov, mut var) = (0.0, 0.0);
    for (&a, &b) in i.as_slice().iter().zip(y.as_slice()) {
        cov += (a - mean_i) * (b - mean_y);
        var += (a - mean_i) * (a - mean_i);
    }
    let a = if var > 0.0 { cov / var } else { 0.0 };
    let b = mean_y - a * mean_i;
    let resid: f64 = i
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(&x, &t)| {
            let r = a * x + b - t;
            r * r
        })
        .sum();
    Ok(resid.sqrt() / norm_y)
}

/// Stored-value count of a compressed representation against the dense
/// original. Index records count one unit each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryAccount {
    pub stored_values: usize,
    pub original_values: usize,
}

impl MemoryAccount {
    pub fn new(stored_values: usize, original_values: usize) -> Result<Self> {
        if original_values == 0 {
            return Err(Error::InvalidParam("original size must be positive".into()));
        }
        Ok(Self {
            stored_values,
            original_values,
        })
    }

    /// Slots of the tri-factor archive after quantisation with `quant_step`:
    /// each kept triple costs its index pair plus its value when nonzero;
    /// each referenced column of `U` or `V` costs its index plus its nonzeros.
    pub fn for_trifactor(ttf: &TruncatedTriFactor, quant_step: f64, original_values: usize) -> Result<Self> {
        let nz = |x: f64| quantize_value(x, quant_step) != 0;
        let mut stored = 0;
        for &(_, _, s) in &ttf.kept {
            stored += 1 + usize::from(nz(s));
        }
        for c in ttf.referenced_u() {
            stored += 1 + ttf.base.u.col(c).iter().filter(|&&x| nz(x)).count();
        }
        for c in ttf.referenced_v() {
            stored += 1 + ttf.base.v.col(c).iter().filter(|&&x| nz(x)).count();
        }
        Self::new(stored, original_values)
    }

    pub fn ratio(&self) -> f64 {
        memory_ratio(self)
    }
}

pub fn memory_ratio(account: &MemoryAccount) -> f64 {
    account.stored_values as f64 / account.original_values as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParam(format!("noise level {sigma} must be a finite value ≥ 0")));
        }
        Ok(Self { sigma, seed })
    }

    /// Same level, seed shifted by `k`.
    pub fn offset(&self, k: u64) -> Self {
        Self {
            sigma: self.sigma,
            seed: self.seed.wrapping_add(k),
        }
    }

    fn factors(&self, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..n).map(|_| 1.0 + self.sigma * rng.gen_range(-1.0..=1.0)).collect()
    }
}

/// `X ∘ (1 + σζ)` with `ζ` i.i.d. uniform on `[-1, 1]`.
pub fn mult_noise(x: &DenseMatrix, spec: &NoiseSpec) -> DenseMatrix {
    if spec.sigma == 0.0 {
        return x.clone();
    }
    let f = spec.factors(x.as_slice().len());
    let mut out = x.clone();
    for (o, g) in out.as_mut_slice().iter_mut().zip(f) {
        *o *= g;
    }
    out
}

/// Noise on each stored value of a slice; same stream as [`mult_noise`].
pub fn mult_noise_values(values: &[f64], spec: &NoiseSpec) -> Vec<f64> {
    if spec.sigma == 0.0 {
        return values.to_vec();
    }
    values.iter().zip(spec.factors(values.len())).map(|(v, g)| v * g).collect()
}

/// Independent noise on `U` (seed), the kept `σ` (seed+1) and `V` (seed+2),
/// then the truncated reconstruction.
pub fn noisy_reconstruct(ttf: &TruncatedTriFactor, spec: &NoiseSpec) -> Result<DenseMatrix> {
    if spec.sigma == 0.0 {
        return Ok(ttf.reconstruct().into_dense());
    }
    let u = mult_noise(ttf.base.u.as_dense(), spec);
    let v = mult_noise(ttf.base.v.as_dense(), &spec.offset(2));
    let sig: Vec<f64> = ttf.kept.iter().map(|e| e.2).collect();
    let sig = mult_noise_values(&sig, &spec.offset(1));
    let mut out = DenseMatrix::zeros(u.rows(), v.rows());
    for (&(i, j, _), s) in ttf.kept.iter().zip(sig) {
        let ui = u.col(i);
        let vj = v.col(j);
        for (r, &a) in ui.iter().enumerate() {
            let w = s * a;
            for (o, &b) in out.row_mut(r).iter_mut().zip(&vj) {
                *o += w * b;
            }
        }
    }
    Ok(out)
}

/// `Σ_{I,J} ||∇_δ Y_IJ||²` over `block_size`-square blocks, forward
/// differences inside each block only. Blocks on the right and bottom edges
/// may be partial.
pub fn grad_energy(y: &DenseMatrix, block_size: usize) -> Result<f64> {
    if block_size == 0 {
        return Err(Error::InvalidParam("block size must be positive".into()));
    }
    let (m, n) = y.shape();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..n {
            if i + 1 < m && (i + 1) % block_size != 0 {
                let d = y[(i + 1, j)] - y[(i, j)];
                total += d * d;
            }
            if j + 1 < n && (j + 1) % block_size != 0 {
                let d = y[(i, j + 1)] - y[(i, j)];
                total += d * d;
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::NonNegMatrix;
    use crate::trifactor::{truncate, write_archive, TriFactor};
    use proptest::{prop_assert, prop_oneof, proptest};

    fn seeded(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn affine_examples() {
        let y = seeded(5, 4, 1);
        assert_eq!(affine_rel_error(&y, &y).unwrap(), 0.0);
        assert!(affine_rel_error(&y.map(|v| 2.0 * v + 3.0), &y).unwrap() < 1e-12);

        let c = DenseMatrix::filled(5, 4, 0.3);
        let mean = y.sum() / 20.0;
        let centred = y.map(|v| v - mean).frobenius() / y.frobenius();
        assert!((affine_rel_error(&c, &y).unwrap() - centred).abs() < 1e-14);

        assert!(affine_rel_error(&y, &DenseMatrix::zeros(5, 4)).is_err());
        assert!(affine_rel_error(&y, &seeded(4, 5, 1)).is_err());
    }

    #[test]
    fn affine_grid() {
        let y = seeded(6, 6, 2);
        for a in [0.5, 2.0, -1.0] {
            for b in [-3.0, 0.0, 7.0] {
                assert!(affine_rel_error(&y.map(|v| a * v + b), &y).unwrap() <= 1e-10);
            }
        }
    }

    #[test]
    fn memory_examples() {
        assert_eq!(memory_ratio(&MemoryAccount::new(0, 100).unwrap()), 0.0);
        assert_eq!(memory_ratio(&MemoryAccount::new(100, 100).unwrap()), 1.0);
        assert!(MemoryAccount::new(1, 0).is_err());
    }

    #[test]
    fn memory_matches_archive_walk() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Sparse factors so that quantisation zeroes some entries.
        let mut sparse = |r: usize, c: usize| {
            NonNegMatrix::new(DenseMatrix::from_fn(r, c, |_, _| {
                if rng.gen_bool(0.4) {
                    rng.gen_range(0.0..1.0)
                } else {
                    rng.gen_range(0.0..0.004)
                }
            }))
            .unwrap()
        };
        let tf = TriFactor::new(sparse(64, 5), sparse(5, 5), sparse(64, 5)).unwrap();
        let ttf = truncate(&tf, 3).unwrap();
        let step = 0.01;
        let text = write_archive(&ttf, step).unwrap();

        let mut slots = 0;
        let mut section = "";
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if matches!(f[0], "U" | "V" | "SIGMA") {
                section = f[0];
                continue;
            }
            slots += match section {
                "SIGMA" => 1 + usize::from(f[2] != "0"),
                _ => 1 + f.len() - 2,
            };
        }
        let acct = MemoryAccount::for_trifactor(&ttf, step, 64 * 64).unwrap();
        assert_eq!(acct.stored_values, slots);
        assert_eq!(acct.ratio(), slots as f64 / 4096.0);
    }

    #[test]
    fn noise_examples() {
        let x = seeded(30, 30, 5);
        assert_eq!(mult_noise(&x, &NoiseSpec::new(0.0, 1).unwrap()), x);
        let spec = NoiseSpec::new(0.25, 9).unwrap();
        let y = mult_noise(&x, &spec);
        for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
            assert!(*b >= a * 0.75 - 1e-15 && *b <= a * 1.25 + 1e-15);
        }
        assert_eq!(mult_noise(&x, &spec), y);
        assert!(NoiseSpec::new(-0.1, 0).is_err());
    }

    #[test]
    fn noise_is_centred() {
        let n = 100_000;
        let ones = DenseMatrix::filled(1, n, 1.0);
        let sigma = 0.25;
        let y = mult_noise(&ones, &NoiseSpec::new(sigma, 3).unwrap());
        let mean = y.as_slice().iter().map(|v| v - 1.0).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 3.0 * sigma / (3.0 * n as f64).sqrt());
    }

    #[test]
    fn noisy_reconstruct_bounds() {
        let tf = TriFactor::new(
            NonNegMatrix::new(seeded(6, 3, 1)).unwrap(),
            NonNegMatrix::new(seeded(3, 3, 2)).unwrap(),
            NonNegMatrix::new(seeded(5, 3, 3)).unwrap(),
        )
        .unwrap();
        let ttf = truncate(&tf, 5).unwrap();
        let clean = ttf.reconstruct().into_dense();
        assert_eq!(noisy_reconstruct(&ttf, &NoiseSpec::new(0.0, 1).unwrap()).unwrap(), clean);
        for sigma in [0.05, 0.25, 0.5] {
            let noisy = noisy_reconstruct(&ttf, &NoiseSpec::new(sigma, 7).unwrap()).unwrap();
            let dev = noisy.sub(&clean).unwrap().frobenius() / clean.frobenius();
            assert!(dev <= 3.0 * sigma + 3.0 * sigma * sigma + sigma.powi(3));
        }
    }

    #[test]
    fn grad_energy_examples() {
        assert_eq!(grad_energy(&DenseMatrix::filled(8, 8, 0.4), 4).unwrap(), 0.0);
        let ramp = DenseMatrix::from_fn(5, 3, |i, _| i as f64);
        assert_eq!(grad_energy(&ramp, 5).unwrap(), (4 * 3) as f64);

        let y = seeded(8, 8, 6);
        let mut want = 0.0;
        for bi in 0..2 {
            for bj in 0..2 {
                for i in 0..4 {
                    for j in 0..4 {
                        let (r, c) = (4 * bi + i, 4 * bj + j);
                        if i < 3 {
                            want += (y[(r + 1, c)] - y[(r, c)]).powi(2);
                        }
                        if j < 3 {
                            want += (y[(r, c + 1)] - y[(r, c)]).powi(2);
                        }
                    }
                }
            }
        }
        assert!((grad_energy(&y, 4).unwrap() - want).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn affine_error_is_scale_invariant(seed in 0u64..300, c in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0]) {
            let y = seeded(4, 5, seed);
            let i = seeded(4, 5, seed + 1000);
            let a = affine_rel_error(&i, &y).unwrap();
            let b = affine_rel_error(&i.scale(c), &y).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
            prop_assert!(a >= 0.0);
        }
    }
}
