#![allow(dead_code)]

use nmf_mla::matcore::DenseMatrix;

/// Ramp background, two rectangles, a disc and a faint texture.
pub fn scene(n: usize) -> DenseMatrix {
    DenseMatrix::from_fn(n, n, |i, j| {
        let (x, y) = (i as f64 / n as f64, j as f64 / n as f64);
        let mut v = 0.15 + 0.3 * x + shapes(x, y, [0.4, 0.35, 0.2]);
        v += 0.05 * (12.0 * y).sin() * (9.0 * x).cos();
        v.clamp(0.0, 1.0)
    })
}

/// The same shapes on a zero background.
pub fn objects(n: usize) -> DenseMatrix {
    DenseMatrix::from_fn(n, n, |i, j| {
        let (x, y) = (i as f64 / n as f64, j as f64 / n as f64);
        shapes(x, y, [0.6, 0.8, 0.4]).clamp(0.0, 1.0)
    })
}

fn shapes(x: f64, y: f64, level: [f64; 3]) -> f64 {
    let mut v = 0.0;
    if (0.2..0.55).contains(&x) && (0.1..0.45).contains(&y) {
        v += level[0];
    }
    if (x - 0.7).powi(2) + (y - 0.7).powi(2) < 0.04 {
        v += level[1];
    }
    if (0.6..0.9).contains(&x) && (0.15..0.3).contains(&y) {
        v += level[2];
    }
    v
}

pub fn gauss(i: usize, j: usize, c: (f64, f64), w: f64) -> f64 {
    let d2 = (i as f64 - c.0).powi(2) + (j as f64 - c.1).powi(2);
    (-d2 / (2.0 * w * w)).exp()
}

pub const BLOBS: [((f64, f64), f64, f64); 2] = [((20.0, 18.0), 5.0, 1.0), ((42.0, 44.0), 6.0, 0.8)];

/// Index image of two Gaussian blobs on a 64×64 grid.
pub fn blobs() -> DenseMatrix {
    DenseMatrix::from_fn(64, 64, |i, j| BLOBS.iter().map(|&(c, w, h)| h * gauss(i, j, c, w)).sum())
}
