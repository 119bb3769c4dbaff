//! Nonnegative tri-factorisation `Y ≈ UΣVᵀ` built from two NMF passes, plus
//! sorting and truncation of the generalised singular matrix `Σ`.
//!
//! `u_i` is column `i` of `U` (M×p) and `v_j` is column `j` of `V` (N×p), so
//! every entry `σ_ij` weights the rank-one term `u_i ⊗ v_j`.

use std::fmt::Write as _;

use crate::baselines::quantize_value;
use crate::error::{Error, Result};
use crate::matcore::{l1_norm, frob2_sq, DenseMatrix, NonNegMatrix};
use crate::ssnewton::{ssn_solve, SsnConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TriFactor {
    pub u: NonNegMatrix,
    pub sigma: NonNegMatrix,
    pub v: NonNegMatrix,
    pub rank_p: usize,
}

/// One kept entry of `Σ`: `(i, j, σ_ij)`, zero-based.
pub type SigmaEntry = (usize, usize, f64);

#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedTriFactor {
    pub base: TriFactor,
    pub kept: Vec<SigmaEntry>,
}

impl TriFactor {
    pub fn new(u: NonNegMatrix, sigma: NonNegMatrix, v: NonNegMatrix) -> Result<Self> {
        let p = sigma.rows();
        if sigma.cols() != p || u.cols() != p || v.cols() != p {
            return Err(Error::shape(
                "TriFactor",
                format!("U ·x{p}, Σ {p}x{p}, V ·x{p}"),
                format!("U {:?}, Σ {:?}, V {:?}", u.shape(), sigma.shape(), v.shape()),
            ));
        }
        Ok(Self { u, sigma, v, rank_p: p })
    }

    /// Dense `UΣVᵀ`.
    pub fn product(&self) -> Result<DenseMatrix> {
        self.u.matmul(&self.sigma)?.matmul_t(&self.v)
    }
}

/// Stage 1: `Y ≈ A₀V₀ᵀ`. Stage 2: `A₀ᵀ ≈ Σ₀ᵀU₀ᵀ`. Both stages use rank `p`
/// and the same weights.
pub fn two_stage(y: &NonNegMatrix, p: usize, cfg: &SsnConfig) -> Result<TriFactor> {
    let (m, n) = y.shape();
    if p == 0 || p > m.min(n) {
        return Err(Error::InvalidParam(format!("rank p = {p} must lie in 1..={}", m.min(n))));
    }
    let stage1 = ssn_solve(y, p, cfg)?;
    let a0t = stage1.a.transpose();
    let stage2 = ssn_solve(&a0t, p, cfg)?;
    let u = NonNegMatrix::new(stage2.p.transpose())?;
    let sigma = NonNegMatrix::new(stage2.a.transpose())?;
    let v = NonNegMatrix::new(stage1.p.transpose())?;
    TriFactor::new(u, sigma, v)
}

/// All `p²` entries of `Σ`, largest first; ties in `(i, j)` order.
pub fn sigma_sort(sigma: &DenseMatrix) -> Vec<SigmaEntry> {
    let mut entries: Vec<SigmaEntry> = (0..sigma.rows())
        .flat_map(|i| (0..sigma.cols()).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, sigma[(i, j)]))
        .collect();
    entries.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    entries
}

/// Smallest `p̃` whose prefix sum strictly exceeds `k2` times the total.
pub fn select_p_tilde(sorted: &[SigmaEntry], k2: f64) -> Result<usize> {
    if sorted.is_empty() {
        return Err(Error::InvalidParam("empty σ list".into()));
    }
    if !(k2 > 0.0 && k2 < 1.0) {
        return Err(Error::InvalidParam(format!("K2 = {k2} must lie in (0, 1)")));
    }
    let total: f64 = sorted.iter().map(|e| e.2).sum();
    if total == 0.0 {
        return Ok(1);
    }
    let mut acc = 0.0;
    for (l, e) in sorted.iter().enumerate() {
        acc += e.2;
        if acc > k2 * total {
            return Ok(l + 1);
        }
    }
    Ok(sorted.len())
}

pub fn truncate(tf: &TriFactor, p_tilde: usize) -> Result<TruncatedTriFactor> {
    let p2 = tf.rank_p * tf.rank_p;
    if p_tilde == 0 || p_tilde > p2 {
        return Err(Error::InvalidParam(format!("p̃ = {p_tilde} must lie in 1..={p2}")));
    }
    let mut kept = sigma_sort(&tf.sigma);
    kept.truncate(p_tilde);
    Ok(TruncatedTriFactor {
        base: tf.clone(),
        kept,
    })
}

impl TruncatedTriFactor {
    pub fn p_tilde(&self) -> usize {
        self.kept.len()
    }

    /// `Σ_{p,p̃}`: the kept entries in place, zeros elsewhere.
    pub fn truncated_sigma(&self) -> DenseMatrix {
        let p = self.base.rank_p;
        let mut s = DenseMatrix::zeros(p, p);
        for &(i, j, v) in &self.kept {
            s[(i, j)] = v;
        }
        s
    }

    pub fn reconstruct(&self) -> NonNegMatrix {
        let (m, n) = (self.base.u.rows(), self.base.v.rows());
        let mut out = DenseMatrix::zeros(m, n);
        for &(i, j, sigma) in &self.kept {
            if sigma == 0.0 {
                continue;
            }
            let ui = self.base.u.col(i);
            let vj = self.base.v.col(j);
            for (r, &a) in ui.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let w = sigma * a;
                for (o, &b) in out.row_mut(r).iter_mut().zip(&vj) {
                    *o += w * b;
                }
            }
        }
        NonNegMatrix::new(out).expect("sum of nonnegative rank-one terms")
    }

    /// Columns of `U` referenced by a kept entry, ascending.
    pub fn referenced_u(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.kept.iter().map(|e| e.0).collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }

    /// Columns of `V` referenced by a kept entry, ascending.
    pub fn referenced_v(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.kept.iter().map(|e| e.1).collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }

    /// Apply `f` to every stored value of `U`, `V` and the kept `σ`.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let u = NonNegMatrix::new(self.base.u.map(&f))?;
        let v = NonNegMatrix::new(self.base.v.map(&f))?;
        let kept: Vec<SigmaEntry> = self.kept.iter().map(|&(i, j, s)| (i, j, f(s))).collect();
        let mut sigma = self.base.sigma.as_dense().clone();
        for &(i, j, s) in &kept {
            sigma[(i, j)] = s;
        }
        Ok(Self {
            base: TriFactor::new(u, NonNegMatrix::new(sigma)?, v)?,
            kept,
        })
    }
}

/// The three-factor objective with the kept part of `Σ`:
/// `||Y - UΣVᵀ||² + γ||Σ||₁ + ν(||U||₁ + ||V||₁) + α(||UᵀU - I||₁ + ||VᵀV - I||₁)`.
pub fn tri_objective(y: &DenseMatrix, ttf: &TruncatedTriFactor, cfg: &SsnConfig) -> Result<f64> {
    let u = ttf.base.u.as_dense();
    let v = ttf.base.v.as_dense();
    let sigma = ttf.truncated_sigma();
    let fit = frob2_sq(&y.sub(&u.matmul(&sigma)?.matmul_t(v)?)?);
    let eye = DenseMatrix::identity(ttf.base.rank_p);
    let orth = l1_norm(&u.t_matmul(u)?.sub(&eye)?) + l1_norm(&v.t_matmul(v)?.sub(&eye)?);
    Ok(fit + cfg.gamma * l1_norm(&sigma) + cfg.nu * (l1_norm(u) + l1_norm(v)) + cfg.alpha * orth)
}

/// Text archive of a quantised truncation.
///
/// ```text
/// TRIFACT M N p p_tilde quant_step
/// U <count>
/// <i> <nnz> <row>:<q> ...
/// SIGMA <p_tilde>
/// <i> <j> <q>
/// V <count>
/// <j> <nnz> <row>:<q> ...
/// ```
///
/// Values are stored as integer multiples `q` of `quant_step`. Only columns of
/// `U`, `V` referenced by a kept entry are written, and only their nonzeros.
pub fn write_archive(ttf: &TruncatedTriFactor, quant_step: f64) -> Result<String> {
    if !(quant_step > 0.0) {
        return Err(Error::InvalidParam(format!("quant_step = {quant_step} must be positive")));
    }
    let q = |x: f64| quantize_value(x, quant_step);
    let (m, n) = (ttf.base.u.rows(), ttf.base.v.rows());
    let mut out = String::new();
    let _ = writeln!(out, "TRIFACT {m} {n} {} {} {quant_step}", ttf.base.rank_p, ttf.p_tilde());
    let section = |out: &mut String, name: &str, mat: &DenseMatrix, cols: &[usize]| {
        let _ = writeln!(out, "{name} {}", cols.len());
        for &c in cols {
            let nz: Vec<(usize, i64)> = mat.col(c).iter().enumerate().map(|(r, &x)| (r, q(x))).filter(|e| e.1 != 0).collect();
            let _ = write!(out, "{c} {}", nz.len());
            for (r, v) in nz {
                let _ = write!(out, " {r}:{v}");
            }
            out.push('\n');
        }
    };
    section(&mut out, "U", ttf.base.u.as_dense(), &ttf.referenced_u());
    let _ = writeln!(out, "SIGMA {}", ttf.p_tilde());
    for &(i, j, s) in &ttf.kept {
        let _ = writeln!(out, "{i} {j} {}", q(s));
    }
    section(&mut out, "V", ttf.base.v.as_dense(), &ttf.referenced_v());
    Ok(out)
}

fn parse_err(msg: &str) -> Error {
    Error::Parse(format!("archive: {msg}"))
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| parse_err(&format!("expected integer, got {s:?}")))
}

fn read_section<'a>(
    lines: &mut impl Iterator<Item = &'a str>,
    name: &str,
    rows: usize,
    p: usize,
    step: f64,
) -> Result<DenseMatrix> {
    let head: Vec<&str> = lines.next().ok_or_else(|| parse_err("truncated"))?.split_whitespace().collect();
    if head.len() != 2 || head[0] != name {
        return Err(parse_err(&format!("expected {name} section")));
    }
    let mut mat = DenseMatrix::zeros(rows, p);
    for _ in 0..parse_num::<usize>(head[1])? {
        let rec: Vec<&str> = lines.next().ok_or_else(|| parse_err("truncated"))?.split_whitespace().collect();
        if rec.len() < 2 {
            return Err(parse_err("short record"));
        }
        let c: usize = parse_num(rec[0])?;
        if c >= p || rec.len() != 2 + parse_num::<usize>(rec[1])? {
            return Err(parse_err("record out of range"));
        }
        for item in &rec[2..] {
            let (r, v) = item.split_once(':').ok_or_else(|| parse_err("expected row:value"))?;
            let r: usize = parse_num(r)?;
            if r >= rows {
                return Err(parse_err("row out of range"));
            }
            mat[(r, c)] = parse_num::<i64>(v)? as f64 * step;
        }
    }
    Ok(mat)
}

/// Parse an archive written by [`write_archive`]. Values come back dequantised;
/// unreferenced columns are zero.
pub fn read_archive(text: &str) -> Result<(TruncatedTriFactor, f64)> {
    let bad = parse_err;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty"))?.split_whitespace().collect();
    if header.len() != 6 || header[0] != "TRIFACT" {
        return Err(bad("bad header"));
    }
    let num = parse_num::<usize>;
    let (m, n, p, p_tilde) = (num(header[1])?, num(header[2])?, num(header[3])?, num(header[4])?);
    let step: f64 = header[5].parse().map_err(|_| bad("bad quant_step"))?;
    if m == 0 || n == 0 || p == 0 || !(step > 0.0) {
        return Err(bad("degenerate header"));
    }

    let u = read_section(&mut lines, "U", m, p, step)?;

    let head: Vec<&str> = lines.next().ok_or_else(|| bad("truncated"))?.split_whitespace().collect();
    if head.len() != 2 || head[0] != "SIGMA" || num(head[1])? != p_tilde {
        return Err(bad("expected SIGMA section"));
    }
    let mut sigma = DenseMatrix::zeros(p, p);
    let mut kept = Vec::with_capacity(p_tilde);
    for _ in 0..p_tilde {
        let rec: Vec<&str> = lines.next().ok_or_else(|| bad("truncated"))?.split_whitespace().collect();
        if rec.len() != 3 {
            return Err(bad("bad SIGMA record"));
        }
        let (i, j) = (num(rec[0])?, num(rec[1])?);
        if i >= p || j >= p {
            return Err(bad("SIGMA index out of range"));
        }
        let s = parse_num::<i64>(rec[2])? as f64 * step;
        sigma[(i, j)] = s;
        kept.push((i, j, s));
    }
    let v = read_section(&mut lines, "V", n, p, step)?;
    let base = TriFactor::new(NonNegMatrix::new(u)?, NonNegMatrix::new(sigma)?, NonNegMatrix::new(v)?)?;
    Ok((TruncatedTriFactor { base, kept }, step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(0.0..1.0))
    }

    fn nn(m: DenseMatrix) -> NonNegMatrix {
        NonNegMatrix::new(m).unwrap()
    }

    fn seeded_tf(m: usize, n: usize, p: usize, seed: u64) -> TriFactor {
        TriFactor::new(nn(seeded(m, p, seed)), nn(seeded(p, p, seed + 1)), nn(seeded(n, p, seed + 2))).unwrap()
    }

    fn rel(y: &DenseMatrix, x: &DenseMatrix) -> f64 {
        y.sub(x).unwrap().frobenius() / y.frobenius()
    }

    #[test]
    fn sort_diagonal() {
        let s = DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 3.0, 0.0], vec![0.0, 0.0, 2.0]]).unwrap();
        let sorted = sigma_sort(&s);
        assert_eq!(&sorted[..3], &[(1, 1, 3.0), (2, 2, 2.0), (0, 0, 1.0)]);
        assert_eq!(sorted.len(), 9);
    }

    #[test]
    fn sort_ties_are_lexicographic() {
        let sorted = sigma_sort(&DenseMatrix::filled(2, 2, 0.5));
        let idx: Vec<(usize, usize)> = sorted.iter().map(|e| (e.0, e.1)).collect();
        assert_eq!(idx, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn sort_matches_selection_oracle() {
        let s = seeded(3, 3, 4);
        let sorted = sigma_sort(&s);
        let mut remaining: Vec<(usize, usize)> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
        for got in sorted {
            let best = *remaining
                .iter()
                .fold(None, |acc: Option<&(usize, usize)>, e| match acc {
                    Some(b) if s[*b] >= s[*e] => Some(b),
                    _ => Some(e),
                })
                .unwrap();
            assert_eq!((got.0, got.1), best);
            remaining.retain(|e| *e != best);
        }
    }

    #[test]
    fn p_tilde_examples() {
        let list = |v: &[f64]| v.iter().map(|&s| (0, 0, s)).collect::<Vec<_>>();
        assert_eq!(select_p_tilde(&list(&[10.0, 1.0, 1.0]), 0.8).unwrap(), 1);
        assert_eq!(select_p_tilde(&list(&[1.0; 4]), 0.95).unwrap(), 4);
        assert_eq!(select_p_tilde(&list(&[0.0; 4]), 0.5).unwrap(), 1);
        assert!(select_p_tilde(&list(&[1.0]), 1.0).is_err());

        let sorted = sigma_sort(&seeded(5, 5, 8));
        let total: f64 = sorted.iter().map(|e| e.2).sum();
        let mut want = 0;
        let mut acc = 0.0;
        while acc <= 0.95 * total {
            acc += sorted[want].2;
            want += 1;
        }
        assert_eq!(select_p_tilde(&sorted, 0.95).unwrap(), want);
    }

    #[test]
    fn full_truncation_is_the_product() {
        let tf = seeded_tf(5, 4, 3, 1);
        let full = truncate(&tf, 9).unwrap().reconstruct();
        let dense = tf.product().unwrap();
        assert!(full.sub(&dense).unwrap().max_abs() < 1e-12);
        assert!(truncate(&tf, 0).is_err());
        assert!(truncate(&tf, 10).is_err());
    }

    #[test]
    fn truncation_matches_term_sum_and_product() {
        let tf = seeded_tf(6, 5, 3, 2);
        let ttf = truncate(&tf, 3).unwrap();
        let mut want = DenseMatrix::zeros(6, 5);
        for &(i, j, s) in &ttf.kept {
            want = want.add(&tensor(&tf.u.col(i), &tf.v.col(j)).unwrap().scale(s)).unwrap();
        }
        let got = ttf.reconstruct();
        assert!(got.sub(&want).unwrap().max_abs() < 1e-12);
        let via_product = tf.u.matmul(&ttf.truncated_sigma()).unwrap().matmul_t(&tf.v).unwrap();
        assert!(got.sub(&via_product).unwrap().max_abs() < 1e-12);

        let one = truncate(&tf, 1).unwrap();
        let (i, j, s) = one.kept[0];
        let single = tensor(&tf.u.col(i), &tf.v.col(j)).unwrap().scale(s);
        assert!(one.reconstruct().sub(&single).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn zero_sigma_reconstructs_zero() {
        let tf = TriFactor::new(nn(seeded(4, 2, 1)), nn(DenseMatrix::zeros(2, 2)), nn(seeded(3, 2, 2))).unwrap();
        let r = truncate(&tf, 4).unwrap().reconstruct();
        assert!(r.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn objective_dominates_fit() {
        let tf = seeded_tf(6, 5, 3, 3);
        let y = seeded(6, 5, 9);
        let ttf = truncate(&tf, 4).unwrap();
        let cfg = SsnConfig::default();
        let fit = frob2_sq(&y.sub(&ttf.reconstruct()).unwrap());
        assert!(tri_objective(&y, &ttf, &cfg).unwrap() >= fit);
    }

    #[test]
    fn two_stage_rank_one_entry() {
        let mut y = DenseMatrix::zeros(6, 5);
        y[(2, 3)] = 0.8;
        let cfg = SsnConfig::with_weights(0.01, 0.01, 0.01);
        let tf = two_stage(&nn(y.clone()), 1, &cfg).unwrap();
        assert!(rel(&y, &tf.product().unwrap()) <= 0.05);
    }

    #[test]
    fn two_stage_rank_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut vec = |n: usize| (0..n).map(|_| rng.gen_range(0.1..1.0)).collect::<Vec<f64>>();
        let y = tensor(&vec(16), &vec(16)).unwrap().add(&tensor(&vec(16), &vec(16)).unwrap()).unwrap();
        let tf = two_stage(&nn(y.clone()), 2, &SsnConfig::with_weights(0.01, 0.01, 0.01)).unwrap();
        assert!(rel(&y, &tf.product().unwrap()) <= 0.1);
        assert!(tf.u.is_nonneg() && tf.sigma.is_nonneg() && tf.v.is_nonneg());
    }

    #[test]
    fn two_stage_zero_data() {
        let tf = two_stage(&nn(DenseMatrix::zeros(4, 4)), 2, &SsnConfig::default()).unwrap();
        assert!(tf.product().unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert!(two_stage(&nn(DenseMatrix::zeros(4, 4)), 5, &SsnConfig::default()).is_err());
    }

    #[test]
    fn archive_roundtrip() {
        let tf = seeded_tf(7, 6, 3, 5);
        let ttf = truncate(&tf, 4).unwrap();
        let step = 0.01;
        let text = write_archive(&ttf, step).unwrap();
        let (back, got_step) = read_archive(&text).unwrap();
        assert_eq!(got_step, step);
        assert_eq!(back.kept.len(), 4);
        for (a, b) in back.kept.iter().zip(&ttf.kept) {
            assert_eq!((a.0, a.1), (b.0, b.1));
            assert!((a.2 - b.2).abs() <= step / 2.0 + 1e-15);
        }
        for &c in &ttf.referenced_u() {
            for (x, y) in back.base.u.col(c).iter().zip(ttf.base.u.col(c)) {
                assert!((x - y).abs() <= step / 2.0 + 1e-15);
            }
        }
        assert!(read_archive("TRIFACT 1 1").is_err());
        assert!(read_archive(&text.replace("SIGMA", "SIGNA")).is_err());
    }

    proptest! {
        #[test]
        fn truncation_distance_to_full_is_monotone(seed in 0u64..500) {
            let tf = seeded_tf(5, 4, 3, seed);
            let full = tf.product().unwrap();
            let mut last = f64::INFINITY;
            for pt in 1..=9 {
                let d = truncate(&tf, pt).unwrap().reconstruct().sub(&full).unwrap().frobenius();
                prop_assert!(d <= last + 1e-12);
                last = d;
            }
        }

        #[test]
        fn sorted_sigma_is_nonincreasing(seed in 0u64..500, p in 1usize..6) {
            let sorted = sigma_sort(&seeded(p, p, seed));
            prop_assert_eq!(sorted.len(), p * p);
            prop_assert!(sorted.windows(2).all(|w| w[0].2 >= w[1].2));
        }
    }
}
