//! Comparison codecs: level-s truncated SVD and an 8×8 DCT codec with the
//! Q50 table, plus the scalar quantiser shared by every method.

use std::io::Write;

use crate::error::{Error, Result};
use crate::evalmetrics::{mult_noise, mult_noise_values, NoiseSpec};
use crate::matcore::{dot, DenseMatrix};
use crate::mla::{prolong, restrict};

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_SWEEPS: usize = 60;

/// `round(x / step)`, ties away from zero.
pub fn quantize_value(x: f64, step: f64) -> i64 {
    (x / step).round() as i64
}

pub fn dequantize_value(q: i64, step: f64) -> f64 {
    q as f64 * step
}

/// Row-major integer matrix of quantisation levels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i64>,
}

impl IntMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[i64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> i64 {
        self.data[i * self.cols + j]
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&q| q != 0).count()
    }
}

pub fn quantize(x: &DenseMatrix, step: f64) -> IntMatrix {
    IntMatrix {
        rows: x.rows(),
        cols: x.cols(),
        data: x.as_slice().iter().map(|&v| quantize_value(v, step)).collect(),
    }
}

pub fn dequantize(q: &IntMatrix, step: f64) -> DenseMatrix {
    DenseMatrix::new(q.rows, q.cols, q.data.iter().map(|&v| dequantize_value(v, step)).collect())
        .expect("shape carried over from a valid matrix")
}

fn check_step(step: f64) -> Result<()> {
    if step > 0.0 && step.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("quantisation step {step} must be positive")))
    }
}

#[derive(Clone, Debug)]
pub struct SvdFactors {
    /// M×k with orthonormal columns.
    pub u: DenseMatrix,
    /// Nonincreasing, length k = min(M, N).
    pub s: Vec<f64>,
    /// N×k with orthonormal columns.
    pub v: DenseMatrix,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> DenseMatrix {
        let (m, n) = (self.u.rows(), self.v.rows());
        DenseMatrix::from_fn(m, n, |i, j| {
            (0..self.s.len()).map(|k| self.u[(i, k)] * self.s[k] * self.v[(j, k)]).sum()
        })
    }
}

/// Thin SVD by one-sided Jacobi rotations on the columns.
pub fn svd_full(y: &DenseMatrix) -> Result<SvdFactors> {
    if y.rows() < y.cols() {
        let t = svd_full(&y.transpose())?;
        return Ok(SvdFactors { u: t.v, s: t.s, v: t.u });
    }
    let (m, n) = y.shape();
    // Work column-major: cols[j] is column j of Y·V.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| y.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    // Columns at round-off level never satisfy the relative test.
    let negligible = (f64::EPSILON * y.frobenius()).powi(2);
    let mut converged = false;
    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let a = dot(&w[i], &w[i]);
                let b = dot(&w[j], &w[j]);
                let g = dot(&w[i], &w[j]);
                if g == 0.0 || a <= negligible || b <= negligible || g.abs() <= JACOBI_TOL * (a * b).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (b - a) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Divergence {
            iter: JACOBI_SWEEPS,
            objective: f64::NAN,
        });
    }

    let norms: Vec<f64> = w.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &k) in order.iter().enumerate() {
        if norms[k] > f64::EPSILON * m as f64 * scale && norms[k] > 0.0 {
            u_cols.push(w[k].iter().map(|x| x / norms[k]).collect());
            s.push(norms[k]);
        } else {
            u_cols.push(vec![0.0; m]);
            s.push(0.0);
            missing.push(slot);
        }
    }
    complete_basis(&mut u_cols, &missing);

    let u = DenseMatrix::from_fn(m, n, |i, k| u_cols[k][i]);
    let v = DenseMatrix::from_fn(n, n, |i, k| v[order[k]][i]);
    Ok(SvdFactors { u, s, v })
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    for (x, y) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fill the zero columns listed in `missing` with unit vectors orthogonal to
/// all others (Gram–Schmidt on the standard basis).
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize]) {
    let m = cols.first().map_or(0, Vec::len);
    let mut e = 0;
    for &slot in missing {
        while e < m {
            let mut cand: Vec<f64> = (0..m).map(|i| if i == e { 1.0 } else { 0.0 }).collect();
            e += 1;
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot {
                        continue;
                    }
                    let d = dot(&cand, c);
                    for (x, y) in cand.iter_mut().zip(c) {
                        *x -= d * y;
                    }
                }
            }
            let nrm = dot(&cand, &cand).sqrt();
            if nrm > 1e-8 {
                cols[slot] = cand.into_iter().map(|x| x / nrm).collect();
                break;
            }
        }
    }
}

/// A baseline reconstruction together with its stored-value count.
#[derive(Clone, Debug)]
pub struct BaselineOutput {
    pub reconstruction: DenseMatrix,
    pub stored_values: usize,
}

/// Restrict, full SVD, quantise `U`, `S`, `V`, reconstruct, prolong.
pub fn svd_level_baseline(y: &DenseMatrix, s: usize, r: usize, quant_step: f64) -> Result<DenseMatrix> {
    Ok(svd_level(y, s, r, quant_step, None)?.reconstruction)
}

/// As [`svd_level_baseline`], optionally with multiplicative noise on the
/// quantised `U` (seed), `S` (seed+1) and `V` (seed+2).
///
/// Stored values: for each singular triple whose quantised `s_i` is nonzero,
/// one for `s_i` plus the nonzero quantised entries of `u_i` and `v_i`.
pub fn svd_level(
    y: &DenseMatrix,
    s: usize,
    r: usize,
    quant_step: f64,
    noise: Option<&NoiseSpec>,
) -> Result<BaselineOutput> {
    check_step(quant_step)?;
    let (m, n) = y.shape();
    let coarse = restrict(y, s, r)?;
    let f = svd_full(&coarse)?;
    let qu = quantize(&f.u, quant_step);
    let qv = quantize(&f.v, quant_step);
    let qs: Vec<i64> = f.s.iter().map(|&x| quantize_value(x, quant_step)).collect();

    let mut stored = 0;
    for (k, &q) in qs.iter().enumerate() {
        if q != 0 {
            stored += 1;
            stored += (0..qu.rows()).filter(|&i| qu.get(i, k) != 0).count();
            stored += (0..qv.rows()).filter(|&j| qv.get(j, k) != 0).count();
        }
    }

    let mut u = dequantize(&qu, quant_step);
    let mut v = dequantize(&qv, quant_step);
    let mut sv: Vec<f64> = qs.iter().map(|&q| dequantize_value(q, quant_step)).collect();
    if let Some(spec) = noise {
        u = mult_noise(&u, spec);
        sv = mult_noise_values(&sv, &spec.offset(1));
        v = mult_noise(&v, &spec.offset(2));
    }
    let rec = SvdFactors { u, s: sv, v }.reconstruct();
    Ok(BaselineOutput {
        reconstruction: prolong(&rec, s, r, m, n)?,
        stored_values: stored,
    })
}

const Q50: [[i64; 8]; 8] = [
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
];

/// The quality-50 luminance quantisation table.
pub fn q50() -> [[i64; 8]; 8] {
    Q50
}

pub type Block = [[f64; 8]; 8];

/// Scan order of an 8×8 block as `(row, col)`, 0-based.
pub fn zigzag() -> [(usize, usize); 64] {
    let mut out = [(0, 0); 64];
    let mut k = 0;
    for d in 0..15usize {
        let lo = d.saturating_sub(7);
        let hi = d.min(7);
        let diag: Vec<usize> = (lo..=hi).collect();
        // Even diagonals run bottom-left to top-right.
        let rows: Box<dyn Iterator<Item = &usize>> = if d % 2 == 0 {
            Box::new(diag.iter().rev())
        } else {
            Box::new(diag.iter())
        };
        for &i in rows {
            out[k] = (i, d - i);
            k += 1;
        }
    }
    out
}

fn dct_basis() -> Block {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (i, x) in row.iter_mut().enumerate() {
            *x = a * ((2 * i + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// `L · B · Rᵀ` for 8×8 arrays; `tl`/`tr` transpose the outer factors.
fn sandwich(l: &Block, b: &Block, r: &Block, tl: bool, tr: bool) -> Block {
    let at = |m: &Block, i: usize, j: usize, t: bool| if t { m[j][i] } else { m[i][j] };
    let mut tmp = [[0.0; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            tmp[i][j] = (0..8).map(|k| at(l, i, k, tl) * b[k][j]).sum();
        }
    }
    let mut out = [[0.0; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            out[i][j] = (0..8).map(|k| tmp[i][k] * at(r, j, k, tr)).sum();
        }
    }
    out
}

/// Orthonormal type-II 2-D DCT.
pub fn dct8_forward(block: &Block) -> Block {
    let c = dct_basis();
    sandwich(&c, block, &c, false, false)
}

pub fn dct8_inverse(coeffs: &Block) -> Block {
    let c = dct_basis();
    sandwich(&c, coeffs, &c, true, true)
}

/// Quantised DCT coefficients of an image, block by block.
#[derive(Clone, Debug, PartialEq)]
pub struct DctBlockImage {
    pub block_rows: usize,
    pub block_cols: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major over the block grid.
    pub blocks: Vec<[[i64; 8]; 8]>,
}

impl DctBlockImage {
    pub fn count_nonzero(&self) -> usize {
        self.blocks.iter().flatten().flatten().filter(|&&c| c != 0).count()
    }

    /// One CSV record per block: block row, block column, then the 64
    /// coefficients in row-major order.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for (b, blk) in self.blocks.iter().enumerate() {
            let mut rec = vec![(b / self.block_cols).to_string(), (b % self.block_cols).to_string()];
            rec.extend(blk.iter().flatten().map(i64::to_string));
            wr.write_record(&rec).map_err(|e| Error::Parse(e.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn check_jpeg_level(s: usize) -> Result<usize> {
    if s > 3 {
        return Err(Error::InvalidParam(format!("DCT level s = {s} must be in 0..=3")));
    }
    Ok(1 << (3 - s))
}

/// Pixels in `[0, 1]` are coded as 8-bit samples shifted by 128.
fn to_sample(y: f64) -> f64 {
    255.0 * y - 128.0
}

fn from_sample(x: f64) -> f64 {
    (x + 128.0) / 255.0
}

/// DCT, Q50 quantisation, keep the first `2^(3−s)` zigzag coefficients.
pub fn jpeg_encode(y: &DenseMatrix, s: usize) -> Result<DctBlockImage> {
    let keep = check_jpeg_level(s)?;
    let (m, n) = y.shape();
    let (br, bc) = (m.div_ceil(8), n.div_ceil(8));
    let zz = zigzag();
    let mut blocks = Vec::with_capacity(br * bc);
    for bi in 0..br {
        for bj in 0..bc {
            let mut b = [[0.0; 8]; 8];
            for (i, row) in b.iter_mut().enumerate() {
                for (j, x) in row.iter_mut().enumerate() {
                    *x = to_sample(y[((8 * bi + i).min(m - 1), (8 * bj + j).min(n - 1))]);
                }
            }
            let d = dct8_forward(&b);
            let mut q = [[0i64; 8]; 8];
            for &(i, j) in &zz[..keep] {
                q[i][j] = quantize_value(d[i][j], Q50[i][j] as f64);
            }
            blocks.push(q);
        }
    }
    Ok(DctBlockImage {
        block_rows: br,
        block_cols: bc,
        rows: m,
        cols: n,
        blocks,
    })
}

/// Dequantise and invert. With `noise`, the quantised coefficients are
/// perturbed multiplicatively first, over the coefficient image in block order.
pub fn jpeg_decode(img: &DctBlockImage, noise: Option<&NoiseSpec>) -> DenseMatrix {
    let flat: Vec<f64> = img.blocks.iter().flatten().flatten().map(|&c| c as f64).collect();
    let flat = match noise {
        Some(spec) => mult_noise_values(&flat, spec),
        None => flat,
    };
    let mut out = DenseMatrix::zeros(img.rows, img.cols);
    for (b, chunk) in flat.chunks(64).enumerate() {
        let (bi, bj) = (b / img.block_cols, b % img.block_cols);
        let mut d = [[0.0; 8]; 8];
        for i in 0..8 {
            for j in 0..8 {
                d[i][j] = chunk[8 * i + j] * Q50[i][j] as f64;
            }
        }
        let x = dct8_inverse(&d);
        for (i, row) in x.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let (r, c) = (8 * bi + i, 8 * bj + j);
                if r < img.rows && c < img.cols {
                    out[(r, c)] = from_sample(v);
                }
            }
        }
    }
    out
}

pub fn jpeg_level_baseline(y: &DenseMatrix, s: usize) -> Result<DenseMatrix> {
    Ok(jpeg_level(y, s, None)?.reconstruction)
}

/// Stored values are the nonzero kept coefficients.
pub fn jpeg_level(y: &DenseMatrix, s: usize, noise: Option<&NoiseSpec>) -> Result<BaselineOutput> {
    let img = jpeg_encode(y, s)?;
    Ok(BaselineOutput {
        reconstruction: jpeg_decode(&img, noise),
        stored_values: img.count_nonzero(),
    })
}
