//! Matrix product state over bitstrings holding all `2^N` eigenvalues.
//!
//! The entry for bitstring `r_1 ... r_N` is the chain product
//! `A1[r_1] A2[r_2] ... AN[r_N]` of the site matrices. Site tensors are stored
//! as `[left, physical, right]` with unit outer bonds. Parameters are real;
//! the complex storage is shared with the tensor engine and its imaginary
//! parts stay zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{contract, svd_split, DenseTensor, C64};

/// Enumerating every entry is refused above this many sites.
pub const ENUMERATE_MAX_SITES: usize = 24;

/// Largest chain accepted by [`SpectrumMps::fit_from_dense`].
pub const FIT_MAX_SITES: usize = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMps {
    tensors: Vec<DenseTensor>,
}

/// Largest useful bond on each of the `n - 1` internal links for a cap `chi`.
pub fn bond_profile(n: usize, chi: usize) -> Vec<usize> {
    (1..n)
        .map(|k| {
            let edge = k.min(n - k).min(30) as u32;
            chi.min(1usize << edge)
        })
        .collect()
}

fn check_bits(bits: &[u8], n: usize) -> Result<()> {
    if bits.len() != n {
        return Err(Error::Shape(format!(
            "bitstring of length {} for {n} sites",
            bits.len()
        )));
    }
    if bits.iter().any(|&b| b > 1) {
        return Err(Error::Shape("bitstring entries must be 0 or 1".into()));
    }
    Ok(())
}

impl SpectrumMps {
    pub fn new(tensors: Vec<DenseTensor>) -> Result<Self> {
        if tensors.is_empty() {
            return Err(Error::Shape("an MPS needs at least one site".into()));
        }
        for (k, t) in tensors.iter().enumerate() {
            let s = t.shape();
            if s.len() != 3 || s[1] != 2 {
                return Err(Error::Shape(format!(
                    "site {k}: expected [left, 2, right], got {s:?}"
                )));
            }
            if k > 0 && tensors[k - 1].shape()[2] != s[0] {
                return Err(Error::Shape(format!(
                    "bond mismatch between sites {} and {k}",
                    k - 1
                )));
            }
        }
        if tensors[0].shape()[0] != 1 || tensors[tensors.len() - 1].shape()[2] != 1 {
            return Err(Error::Shape("boundary bonds must have dimension 1".into()));
        }
        Ok(Self { tensors })
    }

    /// Gaussian entries with standard deviation `scale`, bonds capped at `chi`
    /// and at the largest dimension each cut can support.
    pub fn init_random(n: usize, chi: usize, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        if chi == 0 {
            return Err(Error::Policy("bond dimension must be at least 1".into()));
        }
        if n == 0 {
            return Err(Error::Shape("an MPS needs at least one site".into()));
        }
        let mut bonds = vec![1];
        bonds.extend(bond_profile(n, chi));
        bonds.push(1);
        let dist = Normal::new(0.0, scale.abs()).map_err(|e| Error::Policy(e.to_string()))?;
        let tensors = (0..n)
            .map(|k| {
                let shape = vec![bonds[k], 2, bonds[k + 1]];
                DenseTensor::from_fn(shape, |_| C64::new(dist.sample(rng), 0.0)).with_grad(true)
            })
            .collect();
        Self::new(tensors)
    }

    /// Default initialization scale `0.1 / sqrt(chi)`.
    pub fn default_scale(chi: usize) -> f64 {
        0.1 / (chi.max(1) as f64).sqrt()
    }

    pub fn sites(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensors(&self) -> &[DenseTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.tensors
    }

    pub fn bond_dims(&self) -> Vec<usize> {
        self.tensors[..self.sites() - 1]
            .iter()
            .map(|t| t.shape()[2])
            .collect()
    }

    pub fn max_bond(&self) -> usize {
        self.bond_dims().into_iter().max().unwrap_or(1)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(DenseTensor::len).sum()
    }

    /// Drop any imaginary parts left over from arithmetic on complex storage.
    pub fn make_real(&mut self) {
        for t in &mut self.tensors {
            for z in t.data_mut() {
                z.im = 0.0;
            }
        }
    }

    /// The entry for one bitstring.
    pub fn evaluate_entry(&self, bits: &[u8]) -> Result<f64> {
        check_bits(bits, self.sites())?;
        Ok(self.entry_unchecked(bits))
    }

    fn entry_unchecked(&self, bits: &[u8]) -> f64 {
        let mut row = vec![1.0];
        let mut next = Vec::new();
        for (t, &b) in self.tensors.iter().zip(bits) {
            let (l, r) = (t.shape()[0], t.shape()[2]);
            let d = t.data();
            next.clear();
            next.resize(r, 0.0);
            for (a, &x) in row.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let base = (a * 2 + b as usize) * r;
                for (j, slot) in next.iter_mut().enumerate() {
                    *slot += x * d[base + j].re;
                }
            }
            debug_assert_eq!(row.len(), l);
            std::mem::swap(&mut row, &mut next);
        }
        row[0]
    }

    /// `sum_r A[r] B[r]` over all bitstrings, linear in `N`.
    pub fn inner_product(&self, other: &SpectrumMps) -> Result<f64> {
        if self.sites() != other.sites() {
            return Err(Error::Shape(format!(
                "inner product of MPS with {} and {} sites",
                self.sites(),
                other.sites()
            )));
        }
        let mut env = DenseTensor::from_real(vec![1, 1], &[1.0])?;
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            let x = contract(&env, a, &[(0, 0)])?;
            env = contract(&x, b, &[(0, 0), (1, 1)])?;
        }
        Ok(env.data()[0].re)
    }

    /// `count` bitstrings drawn uniformly and independently, each paired with
    /// its entry. Bitstrings are drawn sequentially from the seed so results
    /// do not depend on the thread count.
    pub fn sample_entries(&self, count: usize, seed: u64) -> Vec<(Vec<u8>, f64)> {
        let n = self.sites();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits: Vec<Vec<u8>> = (0..count)
            .map(|_| (0..n).map(|_| rng.random_range(0..2u8)).collect())
            .collect();
        bits.into_par_iter()
            .map(|b| {
                let e = self.entry_unchecked(&b);
                (b, e)
            })
            .collect()
    }

    /// All `2^N` entries, indexed with the first site as the most
    /// significant bit.
    pub fn enumerate(&self) -> Result<Vec<f64>> {
        let n = self.sites();
        if n > ENUMERATE_MAX_SITES {
            return Err(Error::SizeGuard {
                what: "spectrum enumeration",
                n,
                max: ENUMERATE_MAX_SITES,
            });
        }
        // rows: [prefix, bond], grown one site at a time
        let mut rows = vec![1.0];
        let mut prefixes = 1usize;
        let mut bond = 1usize;
        for t in &self.tensors {
            let r = t.shape()[2];
            let d = t.data();
            let mut next = vec![0.0; prefixes * 2 * r];
            for p in 0..prefixes {
                for a in 0..bond {
                    let x = rows[p * bond + a];
                    if x == 0.0 {
                        continue;
                    }
                    for s in 0..2 {
                        let out = &mut next[(p * 2 + s) * r..(p * 2 + s + 1) * r];
                        let base = (a * 2 + s) * r;
                        for (j, slot) in out.iter_mut().enumerate() {
                            *slot += x * d[base + j].re;
                        }
                    }
                }
            }
            rows = next;
            prefixes *= 2;
            bond = r;
        }
        Ok(rows)
    }

    /// Encode a vector of `2^N` values by a left-to-right sweep of truncated
    /// SVDs. Returns the MPS and its relative L2 reconstruction error.
    pub fn fit_from_dense(values: &[f64], chi: usize) -> Result<(Self, f64)> {
        let len = values.len();
        if len < 2 || !len.is_power_of_two() {
            return Err(Error::Shape(format!(
                "expected a power-of-two number of values (at least 2), got {len}"
            )));
        }
        let n = len.trailing_zeros() as usize;
        if n > FIT_MAX_SITES {
            return Err(Error::SizeGuard {
                what: "dense spectrum fit",
                n,
                max: FIT_MAX_SITES,
            });
        }
        if chi == 0 {
            return Err(Error::Policy("bond dimension must be at least 1".into()));
        }
        let mut rest = DenseTensor::from_real(vec![len], values)?;
        let mut tensors = Vec::with_capacity(n);
        let mut left = 1usize;
        for k in 0..n - 1 {
            let remaining = 1usize << (n - k - 1);
            rest = rest.reshape(&[left * 2, remaining])?;
            let split = svd_split(&rest, &[0], chi, 0.0)?;
            let (u, r, kept) = if split.degenerate {
                (
                    DenseTensor::zeros(vec![left * 2, 1]),
                    DenseTensor::zeros(vec![1, remaining]),
                    1,
                )
            } else {
                let k = split.singulars.len();
                let mut r = split.right.clone();
                for (i, s) in split.singulars.iter().enumerate() {
                    for z in &mut r.data_mut()[i * remaining..(i + 1) * remaining] {
                        *z *= s;
                    }
                }
                (split.left, r, k)
            };
            tensors.push(u.reshape(&[left, 2, kept])?);
            rest = r;
            left = kept;
        }
        tensors.push(rest.reshape(&[left, 2, 1])?);
        let mut mps = Self::new(tensors)?;
        mps.make_real();
        for t in &mut mps.tensors {
            t.set_requires_grad(true);
        }
        let approx = mps.enumerate()?;
        let norm: f64 = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: f64 = values
            .iter()
            .zip(&approx)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let err = if norm > 0.0 { diff / norm } else { diff };
        Ok((mps, err))
    }

    /// Bring every site but the last into left-isometric form. Entries are
    /// unchanged; the norm ends up in the last tensor.
    pub fn canonicalize(&mut self) -> Result<()> {
        let n = self.sites();
        for k in 0..n - 1 {
            let t = &self.tensors[k];
            let (l, r) = (t.shape()[0], t.shape()[2]);
            let split = svd_split(t, &[0, 1], usize::MAX, 0.0)?;
            if split.degenerate {
                continue;
            }
            let kept = split.singulars.len();
            let mut sv = split.right.clone();
            for (i, s) in split.singulars.iter().enumerate() {
                for z in &mut sv.data_mut()[i * r..(i + 1) * r] {
                    *z *= s;
                }
            }
            let flag = t.requires_grad();
            self.tensors[k] = split.left.reshape(&[l, 2, kept])?.with_grad(flag);
            let next = &self.tensors[k + 1];
            let flag = next.requires_grad();
            self.tensors[k + 1] = contract(&sv, next, &[(1, 0)])?.with_grad(flag);
        }
        self.make_real();
        Ok(())
    }

    /// Largest deviation of `sum_{l,r} A[l,r,a] A[l,r,b]` from the identity
    /// over all sites but the last.
    pub fn left_isometry_error(&self) -> f64 {
        self.tensors[..self.sites() - 1]
            .iter()
            .map(|t| {
                let g = contract(&t.conj(), t, &[(0, 0), (1, 1)]).expect("site shapes");
                g.max_abs_diff(&DenseTensor::identity(g.shape()[0]))
            })
            .fold(0.0, f64::max)
    }
}

/// Bitstring of `index` over `n` sites, first site most significant.
pub fn index_to_bits(index: usize, n: usize) -> Vec<u8> {
    (0..n).map(|k| ((index >> (n - 1 - k)) & 1) as u8).collect()
}

pub fn bits_to_index(bits: &[u8]) -> usize {
    bits.iter().fold(0, |acc, &b| (acc << 1) | b as usize)
}
