//! Tensor network variational diagonalization of one-dimensional spin-1/2
//! Hamiltonians.
//!
//! The full spectrum is stored in a matrix product state over bitstrings and
//! the eigenbasis in a brick-wall circuit of two-site unitaries. Both are
//! trained jointly by minimizing `log2 |H - H~|^2 - N`, where every term is
//! evaluated with tensor network contractions whose cost is linear in `N`.

pub mod analysis;
pub mod circuit;
pub mod ed;
pub mod error;
pub mod evolution;
pub mod hamiltonian;
pub mod objective;
pub mod runner;
pub mod spectrum;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil {
    use crate::tensor::{DenseTensor, C64};
    use rand::Rng;

    pub fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> DenseTensor {
        DenseTensor::from_fn(shape, |_| {
            C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
    }

    /// CNOT (H x I): maps |00> to (|00> + |11>) / sqrt 2.
    pub fn bell_gate() -> DenseTensor {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let had = DenseTensor::from_real(vec![2, 2], &[h, h, h, -h]).unwrap();
        let hi = had.kron(&DenseTensor::identity(2)).unwrap();
        let mut cnot = DenseTensor::zeros(vec![4, 4]);
        for (r, c) in [(0, 0), (1, 1), (2, 3), (3, 2)] {
            cnot.set(&[r, c], C64::new(1.0, 0.0));
        }
        cnot.matmul(&hi).unwrap()
    }
}
