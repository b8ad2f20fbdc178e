//! Truncated DCT-II representation of joint trajectories.

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Orthonormal DCT-II basis: `(H+T) × M`, one basis function per column.
#[derive(Clone, Debug, PartialEq)]
pub struct DctBasis {
    matrix: Tensor,
    h: usize,
    t: usize,
}

impl DctBasis {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn past_len(&self) -> usize {
        self.h
    }

    pub fn future_len(&self) -> usize {
        self.t
    }

    pub fn frames(&self) -> usize {
        self.h + self.t
    }

    pub fn coeffs(&self) -> usize {
        self.matrix.cols()
    }
}

pub fn build_basis(h: usize, t: usize, m: usize) -> Result<DctBasis> {
    let n = h + t;
    if m == 0 || m > n {
        return Err(Error::Config(format!(
            "DCT coefficient count {m} must lie in 1..={n}"
        )));
    }
    let nf = n as f64;
    let scale = (2.0 / nf).sqrt();
    let mut data = Vec::with_capacity(n * m);
    for frame in 0..n {
        for k in 0..m {
            let c = (std::f64::consts::PI * (2 * frame + 1) as f64 * k as f64 / (2.0 * nf)).cos();
            let norm = if k == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
            data.push(scale * norm * c);
        }
    }
    Ok(DctBasis {
        matrix: Tensor::matrix(n, m, data),
        h,
        t,
    })
}

/// Appends `t` copies of the last past frame: `H × D` to `(H+T) × D`.
pub fn replicate_pad(past: &Tensor, h: usize, t: usize) -> Result<Tensor> {
    if past.rows() != h || h == 0 {
        return Err(Error::Contract(format!(
            "replicate_pad expects {h} past frames, got {}",
            past.rows()
        )));
    }
    let d = past.cols();
    let mut data = Vec::with_capacity((h + t) * d);
    data.extend_from_slice(past.data());
    let last = past.row(h - 1);
    for _ in 0..t {
        data.extend_from_slice(last);
    }
    Ok(Tensor::matrix(h + t, d, data))
}

/// `C = X̃·T` for trajectories laid out `D × (H+T)`.
pub fn encode(trajectories: &Tensor, basis: &DctBasis) -> Result<Tensor> {
    if trajectories.cols() != basis.frames() {
        return Err(Error::dim(
            "dct encode",
            format!(
                "{:?} trajectories against {} basis frames",
                trajectories.shape(),
                basis.frames()
            ),
        ));
    }
    trajectories.matmul(&basis.matrix)
}

/// `Ŷ = C·Tᵀ`; with fewer coefficients than frames this is the orthogonal
/// projection onto the retained basis functions.
pub fn decode(coeffs: &Tensor, basis: &DctBasis) -> Result<Tensor> {
    if coeffs.cols() != basis.coeffs() {
        return Err(Error::dim(
            "dct decode",
            format!("{:?} coefficients against M = {}", coeffs.shape(), basis.coeffs()),
        ));
    }
    coeffs.matmul(&basis.matrix.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{grad_check, Graph, ParamStore};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gram_error(b: &DctBasis) -> f64 {
        let g = b.matrix().transpose().matmul(b.matrix()).unwrap();
        g.max_abs_diff(&Tensor::eye(b.coeffs()))
    }

    #[test]
    fn basis_is_orthonormal() {
        assert!(gram_error(&build_basis(2, 2, 4).unwrap()) < 1e-12);
        let b = build_basis(25, 100, 20).unwrap();
        assert_eq!(b.matrix().shape(), &[125, 20]);
        assert!(gram_error(&b) < 1e-10);
        assert!(build_basis(2, 2, 5).is_err());
        assert!(build_basis(2, 2, 0).is_err());
    }

    #[test]
    fn first_column_is_constant() {
        let b = build_basis(15, 60, 8).unwrap();
        let expected = 1.0 / 75f64.sqrt();
        for f in 0..75 {
            assert!((b.matrix().get(f, 0) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn replicate_pad_repeats_last_frame() {
        let past = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let padded = replicate_pad(&past, 2, 3).unwrap();
        assert_eq!(
            padded.data(),
            &[1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]
        );
        assert!(replicate_pad(&past, 3, 1).is_err());
    }

    #[test]
    fn constant_trajectory_has_only_dc_coefficient() {
        let b = build_basis(2, 2, 4).unwrap();
        let c = encode(&Tensor::full(1, 4, 1.5), &b).unwrap();
        assert!((c.get(0, 0) - 1.5 * 2.0).abs() < 1e-12);
        for k in 1..4 {
            assert!(c.get(0, k).abs() < 1e-12);
        }
        assert!(encode(&Tensor::zeros(3, 4), &b).unwrap().max_abs() == 0.0);
        assert!(encode(&Tensor::zeros(3, 5), &b).is_err());
        assert!(decode(&Tensor::zeros(3, 5), &b).is_err());
    }

    #[test]
    fn single_basis_function_is_reconstructed() {
        let b = build_basis(4, 6, 5).unwrap();
        let col3: Vec<f64> = (0..10).map(|f| 2.5 * b.matrix().get(f, 3)).collect();
        let x = Tensor::row_vector(col3);
        let c = encode(&x, &b).unwrap();
        assert!((c.get(0, 3) - 2.5).abs() < 1e-12);
        assert!(decode(&c, &b).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn step_truncation_equals_least_squares_residual() {
        // Projection onto span{b0, b1} by the normal equations.
        let n = 8;
        let b = build_basis(4, 4, 2).unwrap();
        let x: Vec<f64> = (0..n).map(|f| if f < 3 { 0.0 } else { 1.0 }).collect();
        let cols: Vec<Vec<f64>> = (0..2)
            .map(|k| (0..n).map(|f| b.matrix().get(f, k)).collect())
            .collect();
        let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(p, q)| p * q).sum::<f64>();
        let g = [
            [dot(&cols[0], &cols[0]), dot(&cols[0], &cols[1])],
            [dot(&cols[1], &cols[0]), dot(&cols[1], &cols[1])],
        ];
        let r = [dot(&cols[0], &x), dot(&cols[1], &x)];
        let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
        let w = [
            (r[0] * g[1][1] - r[1] * g[0][1]) / det,
            (g[0][0] * r[1] - g[1][0] * r[0]) / det,
        ];
        let proj: Vec<f64> = (0..n).map(|f| w[0] * cols[0][f] + w[1] * cols[1][f]).collect();
        let brute: f64 = x.iter().zip(&proj).map(|(a, p)| (a - p).powi(2)).sum();

        let xt = Tensor::row_vector(x.clone());
        let rec = decode(&encode(&xt, &b).unwrap(), &b).unwrap();
        let ours: f64 = x.iter().zip(rec.data()).map(|(a, p)| (a - p).powi(2)).sum();
        assert!((ours - brute).abs() < 1e-12);
    }

    #[test]
    fn round_trip_is_linear_and_differentiable() {
        let b = build_basis(3, 5, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::matrix(2, 8, (0..16).map(|_| rng.random_range(-10.0..10.0)).collect());
        let y = Tensor::matrix(2, 8, (0..16).map(|_| rng.random_range(-10.0..10.0)).collect());
        let combo = x.zip_map(&y, |a, c| 2.0 * a - 0.5 * c);
        let lhs = encode(&combo, &b).unwrap();
        let (ex, ey) = (encode(&x, &b).unwrap(), encode(&y, &b).unwrap());
        let rhs = ex.zip_map(&ey, |a, c| 2.0 * a - 0.5 * c);
        assert!(lhs.max_abs_diff(&rhs) < 1e-10);

        let b = build_basis(3, 5, 4).unwrap();
        let mut store = ParamStore::new();
        store.add("x", x);
        let basis = b.matrix().clone();
        let target = y;
        let report = grad_check(&mut store, 1e-5, |g: &mut Graph, s: &ParamStore| {
            let id = s.ids().next().unwrap();
            let x = g.param(s, id);
            let t = g.constant(basis.clone());
            let tt = g.constant(basis.transpose());
            let c = g.matmul(x, t)?;
            let rec = g.matmul(c, tt)?;
            let tgt = g.constant(target.clone());
            let d = g.sub(rec, tgt)?;
            let sq = g.square(d);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    proptest! {
        #[test]
        fn full_rank_round_trip(h in 1usize..8, t in 1usize..12, seed in any::<u64>()) {
            let n = h + t;
            let b = build_basis(h, t, n).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::matrix(3, n, (0..3 * n).map(|_| rng.random_range(-10.0..10.0)).collect());
            let back = decode(&encode(&x, &b).unwrap(), &b).unwrap();
            prop_assert!(back.max_abs_diff(&x) < 1e-9);
        }

        #[test]
        fn truncation_error_is_monotone(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::row_vector((0..12).map(|_| rng.random_range(-10.0..10.0)).collect());
            let mut prev = f64::INFINITY;
            for m in 1..=12 {
                let b = build_basis(4, 8, m).unwrap();
                let rec = decode(&encode(&x, &b).unwrap(), &b).unwrap();
                let err: f64 = x.data().iter().zip(rec.data()).map(|(a, r)| (a - r).powi(2)).sum();
                prop_assert!(err <= prev + 1e-9);
                prev = err;
            }
        }
    }
}
