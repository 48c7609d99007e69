//! Input projections: queries, keys, and values from raw inputs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Dims;
use crate::error::{Error, Result};

/// The three projection matrices. `w_q` and `w_k` map into the state
/// dimension `n`, `w_v` into the value dimension `d_v`; all share input
/// dimension `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

/// Projected sequences, one row per position.
#[derive(Clone, Debug)]
pub struct Projected {
    pub queries: Array2<f64>,
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
}

impl ProjectionSet {
    /// Identity projections at square dims, handy in tests.
    pub fn identity(n: usize) -> Self {
        ProjectionSet {
            w_q: Array2::eye(n),
            w_k: Array2::eye(n),
            w_v: Array2::eye(n),
        }
    }

    /// Random projections with per-entry variance `1/d`.
    pub fn random(dims: &Dims, rng: &mut impl rand::Rng) -> Self {
        let std = 1.0 / (dims.d as f64).sqrt();
        let sample = |rows: usize, cols: usize, rng: &mut dyn rand::RngCore| {
            Array2::from_shape_fn((rows, cols), |_| {
                let g: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                g * std
            })
        };
        ProjectionSet {
            w_q: sample(dims.n, dims.d, rng),
            w_k: sample(dims.n, dims.d, rng),
            w_v: sample(dims.d_v, dims.d, rng),
        }
    }

    pub fn validate(&self, dims: &Dims) -> Result<()> {
        let check = |name: &'static str, m: &Array2<f64>, rows: usize| -> Result<()> {
            if m.nrows() != rows || m.ncols() != dims.d {
                return Err(Error::shape(
                    name,
                    format!("{}x{}", rows, dims.d),
                    format!("{}x{}", m.nrows(), m.ncols()),
                ));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} contains non-finite entries")));
            }
            Ok(())
        };
        check("W_Q", &self.w_q, dims.n)?;
        check("W_K", &self.w_k, dims.n)?;
        check("W_V", &self.w_v, dims.d_v)?;
        Ok(())
    }
}

/// Apply the projections to a sequence of inputs (rows of `inputs`).
pub fn project(proj: &ProjectionSet, inputs: &Array2<f64>) -> Result<Projected> {
    let d = proj.w_q.ncols();
    if proj.w_k.ncols() != d {
        return Err(Error::shape("W_K", format!("_x{d}"), format!("_x{}", proj.w_k.ncols())));
    }
    if proj.w_v.ncols() != d {
        return Err(Error::shape("W_V", format!("_x{d}"), format!("_x{}", proj.w_v.ncols())));
    }
    if inputs.ncols() != d {
        return Err(Error::shape(
            "inputs",
            format!("_x{d}"),
            format!("_x{}", inputs.ncols()),
        ));
    }
    Ok(Projected {
        queries: inputs.dot(&proj.w_q.t()),
        keys: inputs.dot(&proj.w_k.t()),
        values: inputs.dot(&proj.w_v.t()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn identity_projection_passes_inputs_through() {
        let proj = ProjectionSet::identity(2);
        let x = array![[1.0, 2.0]];
        let p = project(&proj, &x).unwrap();
        assert_eq!(p.queries, x);
        assert_eq!(p.keys, x);
        assert_eq!(p.values, x);
    }

    #[test]
    fn zero_inputs_give_zero_projections() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let dims = Dims::new(3, 3, 3, 1).unwrap();
        let proj = ProjectionSet::random(&dims, &mut rng);
        let x = Array2::<f64>::zeros((5, 3));
        let p = project(&proj, &x).unwrap();
        assert!(p.queries.iter().all(|v| *v == 0.0));
        assert!(p.keys.iter().all(|v| *v == 0.0));
        assert!(p.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn projection_matches_naive_matvec_oracle() {
        // Independent oracle: explicit loops, no matrix product routine.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let dims = Dims::new(3, 3, 3, 1).unwrap();
        let proj = ProjectionSet::random(&dims, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |_| {
            rand::Rng::random_range(&mut rng, -1.0..1.0)
        });
        let p = project(&proj, &x).unwrap();
        for i in 0..4 {
            for r in 0..3 {
                let mut q = 0.0;
                let mut k = 0.0;
                let mut v = 0.0;
                for c in 0..3 {
                    q += proj.w_q[[r, c]] * x[[i, c]];
                    k += proj.w_k[[r, c]] * x[[i, c]];
                    v += proj.w_v[[r, c]] * x[[i, c]];
                }
                assert!((p.queries[[i, r]] - q).abs() < 1e-12);
                assert!((p.keys[[i, r]] - k).abs() < 1e-12);
                assert!((p.values[[i, r]] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_names_the_matrix() {
        let proj = ProjectionSet {
            w_q: Array2::eye(2),
            w_k: Array2::eye(3),
            w_v: Array2::eye(2),
        };
        let x = array![[1.0, 2.0]];
        let err = project(&proj, &x).unwrap_err();
        assert!(err.to_string().contains("W_K"), "got: {err}");
    }
}
