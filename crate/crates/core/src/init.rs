//! Weight initialisers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rand::SeedableRng;

pub type Rng64 = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `count` samples from Normal(0, std²).
pub fn normal(rng: &mut impl Rng, count: usize, std: f64) -> Vec<f64> {
    (0..count)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// He-normal convolution kernel `[out×in×k×k]` with std `sqrt(2 / (k²·out))`.
pub fn he_conv(rng: &mut impl Rng, out_maps: usize, in_maps: usize, k: usize) -> Vec<f64> {
    let std = (2.0 / (k * k * out_maps) as f64).sqrt();
    normal(rng, out_maps * in_maps * k * k, std)
}

/// Row-major `rows×cols` matrix with orthonormal rows (when `rows <= cols`)
/// or orthonormal columns (otherwise).
///
/// Built from the QR factorisation of a Gaussian matrix.
pub fn orthogonal(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<f64> {
    let tall = rows.max(cols);
    let thin = rows.min(cols);
    // Columns of a tall×thin Gaussian matrix, stored column-major.
    let mut q: Vec<Vec<f64>> = (0..thin).map(|_| normal(rng, tall, 1.0)).collect();
    for j in 0..thin {
        // Two passes of modified Gram-Schmidt keep the basis orthogonal to
        // machine precision. MGS leaves R's diagonal positive, so no sign
        // correction is needed.
        for _ in 0..2 {
            let (done, rest) = q.split_at_mut(j);
            for u in done.iter() {
                let dot: f64 = u.iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
                for (v, uu) in rest[0].iter_mut().zip(u) {
                    *v -= dot * uu;
                }
            }
            let norm = rest[0].iter().map(|v| v * v).sum::<f64>().sqrt();
            rest[0].iter_mut().for_each(|v| *v /= norm);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (j, col) in q.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            if rows >= cols {
                out[i * cols + j] = v;
            } else {
                out[j * cols + i] = v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram(m: &[f64], rows: usize, cols: usize, by_rows: bool) -> Vec<f64> {
        let n = if by_rows { rows } else { cols };
        let at = |r: usize, c: usize| m[r * cols + c];
        let mut g = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                g[a * n + b] = if by_rows {
                    (0..cols).map(|c| at(a, c) * at(b, c)).sum()
                } else {
                    (0..rows).map(|r| at(r, a) * at(r, b)).sum()
                };
            }
        }
        g
    }

    fn assert_identity(g: &[f64], n: usize) {
        for a in 0..n {
            for b in 0..n {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((g[a * n + b] - expect).abs() < 1e-10, "{a},{b}: {}", g[a * n + b]);
            }
        }
    }

    #[test]
    fn orthogonal_square_wide_and_tall() {
        let mut rng = seeded(7);
        let sq = orthogonal(&mut rng, 12, 12);
        assert_identity(&gram(&sq, 12, 12, true), 12);
        assert_identity(&gram(&sq, 12, 12, false), 12);
        let wide = orthogonal(&mut rng, 5, 40);
        assert_identity(&gram(&wide, 5, 40, true), 5);
        let tall = orthogonal(&mut rng, 40, 5);
        assert_identity(&gram(&tall, 40, 5, false), 5);
    }

    #[test]
    fn he_conv_scale() {
        let mut rng = seeded(1);
        let w = he_conv(&mut rng, 64, 64, 3);
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / (9.0 * 64.0);
        assert!((var / expect - 1.0).abs() < 0.05, "{var} vs {expect}");
    }

    #[test]
    fn seeded_is_deterministic() {
        let a = normal(&mut seeded(3), 10, 1.0);
        let b = normal(&mut seeded(3), 10, 1.0);
        assert_eq!(a, b);
    }
}
