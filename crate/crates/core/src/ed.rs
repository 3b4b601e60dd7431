//! Exact diagonalization of small chains.

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{dense_ising_real, IsingSpec, DENSE_MAX_SITES};

/// Eigenvectors are only computed up to this many sites.
pub const VECTORS_MAX_SITES: usize = 12;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdResult {
    pub n: usize,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Row-major `2^N x 2^N`; column `k` belongs to `eigenvalues[k]`.
    #[serde(skip)]
    pub eigenvectors: Option<Vec<f64>>,
}

impl EdResult {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvector(&self, k: usize) -> Option<Vec<f64>> {
        let v = self.eigenvectors.as_ref()?;
        let dim = self.dim();
        (k < dim).then(|| (0..dim).map(|i| v[i * dim + k]).collect())
    }
}

/// Full spectrum of the dense Hamiltonian, optionally with eigenvectors.
pub fn full_spectrum(spec: &IsingSpec, want_vectors: bool) -> Result<EdResult> {
    spec.validate()?;
    if spec.n > DENSE_MAX_SITES {
        return Err(Error::SizeGuard {
            what: "exact diagonalization",
            n: spec.n,
            max: DENSE_MAX_SITES,
        });
    }
    if want_vectors && spec.n > VECTORS_MAX_SITES {
        return Err(Error::SizeGuard {
            what: "exact eigenvectors",
            n: spec.n,
            max: VECTORS_MAX_SITES,
        });
    }
    let dim = 1usize << spec.n;
    let h = dense_ising_real(spec)?;
    let mat = Mat::<f64>::from_fn(dim, dim, |i, j| h[i * dim + j]);
    drop(h);
    let fail = |e| Error::Decomposition(format!("eigensolver failed: {e:?}"));
    if want_vectors {
        let evd = mat.self_adjoint_eigen(Side::Lower).map_err(fail)?;
        let s = evd.S().column_vector();
        let eigenvalues: Vec<f64> = (0..dim).map(|k| s[k]).collect();
        let u = evd.U();
        let mut vecs = vec![0.0; dim * dim];
        for i in 0..dim {
            for k in 0..dim {
                vecs[i * dim + k] = u[(i, k)];
            }
        }
        Ok(EdResult {
            n: spec.n,
            eigenvalues,
            eigenvectors: Some(vecs),
        })
    } else {
        Ok(EdResult {
            n: spec.n,
            eigenvalues: symmetric_eigenvalues(&mat)?,
            eigenvectors: None,
        })
    }
}

fn symmetric_eigenvalues(mat: &Mat<f64>) -> Result<Vec<f64>> {
    mat.self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Decomposition(format!("eigensolver failed: {e:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matvec(h: &[f64], x: &[f64]) -> Vec<f64> {
        let dim = x.len();
        (0..dim)
            .map(|i| h[i * dim..(i + 1) * dim].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    #[test]
    fn classical_pair() {
        let r = full_spectrum(&IsingSpec::clean(2, 0.0), false).unwrap();
        assert_eq!(r.eigenvalues, vec![-0.25, -0.25, 0.25, 0.25]);
    }

    #[test]
    fn eigenpairs_have_small_residuals() {
        let spec = IsingSpec::disordered(8, 0.5, 0.5, 4);
        let r = full_spectrum(&spec, true).unwrap();
        let h = dense_ising_real(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..16 {
            let k = rng.random_range(0..r.dim());
            let v = r.eigenvector(k).unwrap();
            let hv = matvec(&h, &v);
            let res: f64 = hv
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - r.eigenvalues[k] * b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(res <= 1e-10);
        }
        let total: f64 = r.eigenvalues.iter().sum();
        assert!(total.abs() < 1e-8);
        assert!(r.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn eigenvectors_are_orthonormal() {
        let r = full_spectrum(&IsingSpec::clean(6, 0.8), true).unwrap();
        let dim = r.dim();
        let v = r.eigenvectors.as_ref().unwrap();
        for a in 0..dim {
            for b in 0..dim {
                let dot: f64 = (0..dim).map(|i| v[i * dim + a] * v[i * dim + b]).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ground_state_matches_power_iteration() {
        let spec = IsingSpec::clean(10, 0.5);
        let h = dense_ising_real(&spec).unwrap();
        let dim = 1 << 10;
        // the largest eigenvalue of (c - H) is c - E_min
        let c = 10.0;
        let mut x: Vec<f64> = (0..dim).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
        let mut rayleigh = 0.0;
        for _ in 0..4000 {
            let hx = matvec(&h, &x);
            let y: Vec<f64> = x.iter().zip(&hx).map(|(a, b)| c * a - b).collect();
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            x = y.into_iter().map(|v| v / norm).collect();
            rayleigh = x.iter().zip(matvec(&h, &x)).map(|(a, b)| a * b).sum();
        }
        let r = full_spectrum(&spec, false).unwrap();
        assert!((r.eigenvalues[0] - rayleigh).abs() < 1e-8);
    }

    #[test]
    fn field_reversal_keeps_spectrum() {
        let a = IsingSpec::disordered(8, 0.6, 1.0, 9);
        let mut b = a.clone();
        b.fields = a.fields.iter().map(|w| -w).collect();
        let ea = full_spectrum(&a, false).unwrap().eigenvalues;
        let eb = full_spectrum(&b, false).unwrap().eigenvalues;
        for (x, y) in ea.iter().zip(&eb) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn single_site_field() {
        let t = crate::hamiltonian::onsite_term(0.5, 0.0);
        let m = Mat::<f64>::from_fn(2, 2, |i, j| t.data()[i * 2 + j].re);
        assert_eq!(symmetric_eigenvalues(&m).unwrap(), vec![-0.25, 0.25]);
    }

    #[test]
    fn guards() {
        assert!(matches!(
            full_spectrum(&IsingSpec::clean(15, 0.5), false),
            Err(Error::SizeGuard { .. })
        ));
        assert!(matches!(
            full_spectrum(&IsingSpec::clean(13, 0.5), true),
            Err(Error::SizeGuard { .. })
        ));
    }
}
