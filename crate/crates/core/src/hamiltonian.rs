//! Ising chains with transverse and longitudinal fields, as matrix product
//! operators and as dense matrices.
//!
//! The model is
//!
//! ```text
//! H = - sum_{n=1}^{N-1} Sz_n Sz_{n+1} - h sum_n Sx_n + sum_n w_n Sz_n
//! ```
//!
//! with spin-1/2 operators `S = sigma / 2` and open boundaries. Basis states
//! are bitstrings `r_1 ... r_N` with `r_1` the most significant bit and
//! `|0>` the `Sz = +1/2` state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{contract, svd_split, DenseTensor, C64, ONE, ZERO};

/// Largest chain for which a dense `2^N x 2^N` matrix may be built.
pub const DENSE_MAX_SITES: usize = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsingSpec {
    /// Number of sites.
    pub n: usize,
    /// Transverse field strength.
    pub h: f64,
    /// Explicit longitudinal fields `w_n`. Left empty, they are drawn from
    /// `disorder_w` and `seed` (or are all zero when `disorder_w == 0`).
    #[serde(default)]
    pub fields: Vec<f64>,
    /// Half-width `W` of the uniform disorder distribution on `[-W, W]`.
    #[serde(default)]
    pub disorder_w: f64,
    #[serde(default)]
    pub seed: u64,
}

impl IsingSpec {
    /// Clean transverse-field chain.
    pub fn clean(n: usize, h: f64) -> Self {
        Self {
            n,
            h,
            fields: Vec::new(),
            disorder_w: 0.0,
            seed: 0,
        }
    }

    /// Random longitudinal fields drawn i.i.d. uniform on `[-w, w]`.
    pub fn disordered(n: usize, h: f64, w: f64, seed: u64) -> Self {
        let mut spec = Self {
            n,
            h,
            fields: Vec::new(),
            disorder_w: w,
            seed,
        };
        spec.fields = spec.resolved_fields();
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Spec(format!("need at least 2 sites, got {}", self.n)));
        }
        if !self.h.is_finite() {
            return Err(Error::Spec("transverse field must be finite".into()));
        }
        if !(self.disorder_w >= 0.0 && self.disorder_w.is_finite()) {
            return Err(Error::Spec(format!(
                "disorder half-width must be a finite non-negative number, got {}",
                self.disorder_w
            )));
        }
        if !self.fields.is_empty() && self.fields.len() != self.n {
            return Err(Error::Spec(format!(
                "{} longitudinal fields given for {} sites",
                self.fields.len(),
                self.n
            )));
        }
        if self.fields.iter().any(|w| !w.is_finite()) {
            return Err(Error::Spec("longitudinal fields must be finite".into()));
        }
        Ok(())
    }

    /// The per-site longitudinal fields, drawing them from the seed if they
    /// were not given explicitly.
    pub fn resolved_fields(&self) -> Vec<f64> {
        if !self.fields.is_empty() {
            return self.fields.clone();
        }
        if self.disorder_w > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let w = self.disorder_w;
            (0..self.n).map(|_| rng.random_range(-w..=w)).collect()
        } else {
            vec![0.0; self.n]
        }
    }

    /// `Tr(H H^+) = 2^N [ (N-1)/16 + N h^2/4 + sum w_n^2 / 4 ]`.
    pub fn trace_square(&self) -> f64 {
        let w2: f64 = self.resolved_fields().iter().map(|w| w * w).sum();
        let n = self.n as f64;
        2f64.powi(self.n as i32) * ((n - 1.0) / 16.0 + n * self.h * self.h / 4.0 + w2 / 4.0)
    }
}

pub fn spin_x() -> DenseTensor {
    DenseTensor::from_real(vec![2, 2], &[0.0, 0.5, 0.5, 0.0]).unwrap()
}

pub fn spin_z() -> DenseTensor {
    DenseTensor::from_real(vec![2, 2], &[0.5, 0.0, 0.0, -0.5]).unwrap()
}

/// `-h Sx + w Sz` on a single site.
pub fn onsite_term(h: f64, w: f64) -> DenseTensor {
    spin_x()
        .scale(C64::new(-h, 0.0))
        .add(&spin_z().scale(C64::new(w, 0.0)))
        .unwrap()
}

/// Matrix product operator with site tensors indexed `[left, out, in, right]`.
///
/// Boundary vectors are folded into the first and last tensors, whose outer
/// bonds have dimension one.
#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianMpo {
    tensors: Vec<DenseTensor>,
}

impl HamiltonianMpo {
    pub fn new(tensors: Vec<DenseTensor>) -> Result<Self> {
        if tensors.is_empty() {
            return Err(Error::Shape("an MPO needs at least one site".into()));
        }
        for (k, t) in tensors.iter().enumerate() {
            let s = t.shape();
            if s.len() != 4 || s[1] != 2 || s[2] != 2 {
                return Err(Error::Shape(format!(
                    "site {k}: expected [left, 2, 2, right], got {s:?}"
                )));
            }
            if k > 0 && tensors[k - 1].shape()[3] != s[0] {
                return Err(Error::Shape(format!(
                    "bond mismatch between sites {} and {k}",
                    k - 1
                )));
            }
        }
        if tensors[0].shape()[0] != 1 || tensors[tensors.len() - 1].shape()[3] != 1 {
            return Err(Error::Shape("boundary bonds must have dimension 1".into()));
        }
        Ok(Self { tensors })
    }

    pub fn identity(n: usize) -> Self {
        let id = DenseTensor::identity(2).reshape(&[1, 2, 2, 1]).unwrap();
        Self {
            tensors: vec![id; n],
        }
    }

    /// Nearest-neighbour chain `sum_n J A_n B_{n+1} + sum_n O_n` built from a
    /// three-state automaton: waiting, one coupling operator placed, done.
    pub fn nearest_neighbor(
        coupling: Option<(f64, &DenseTensor, &DenseTensor)>,
        onsite: &[DenseTensor],
    ) -> Result<Self> {
        let n = onsite.len();
        if n < 2 {
            return Err(Error::Spec(format!("need at least 2 sites, got {n}")));
        }
        let zero = DenseTensor::zeros(vec![2, 2]);
        let id = DenseTensor::identity(2);
        let (a, b) = match coupling {
            Some((j, a, b)) => (a.scale(C64::new(j, 0.0)), b.clone()),
            None => (zero.clone(), zero.clone()),
        };
        let bulk = |op: &DenseTensor| -> [[DenseTensor; 3]; 3] {
            [
                [id.clone(), a.clone(), op.clone()],
                [zero.clone(), zero.clone(), b.clone()],
                [zero.clone(), zero.clone(), id.clone()],
            ]
        };
        let pack = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, w: &[[DenseTensor; 3]; 3]| {
            let (lr, lc) = (rows.len(), cols.len());
            DenseTensor::from_fn(vec![lr, 2, 2, lc], |ix| {
                w[rows.start + ix[0]][cols.start + ix[3]].get(&[ix[1], ix[2]])
            })
        };
        let tensors = onsite
            .iter()
            .enumerate()
            .map(|(k, op)| {
                let w = bulk(op);
                match k {
                    0 => pack(0..1, 0..3, &w),
                    k if k == n - 1 => pack(0..3, 2..3, &w),
                    _ => pack(0..3, 0..3, &w),
                }
            })
            .collect();
        Self::new(tensors)
    }

    /// Exact MPO of a dense `2^n x 2^n` operator by successive SVDs.
    pub fn from_dense(op: &DenseTensor, n: usize) -> Result<Self> {
        let dim = 1usize << n;
        if op.shape() != [dim, dim] {
            return Err(Error::Shape(format!(
                "expected a {dim}x{dim} operator, got {:?}",
                op.shape()
            )));
        }
        // interleave to [o1, i1, o2, i2, ...]
        let shape = vec![2; 2 * n];
        let t = op.reshape(&shape)?;
        let perm: Vec<usize> = (0..n).flat_map(|k| [k, n + k]).collect();
        let mut rest = t.permute(&perm)?;
        let mut tensors = Vec::with_capacity(n);
        let mut left = 1usize;
        for k in 0..n - 1 {
            let remaining = 4usize.pow((n - k - 1) as u32);
            rest = rest.reshape(&[left * 4, remaining])?;
            let split = svd_split(&rest, &[0], usize::MAX, 1e-14)?;
            let kept = split.singulars.len().max(1);
            let (l, r) = if split.degenerate {
                (
                    DenseTensor::zeros(vec![left * 4, 1]),
                    DenseTensor::zeros(vec![1, remaining]),
                )
            } else {
                let mut r = split.right.clone();
                for (i, s) in split.singulars.iter().enumerate() {
                    for z in &mut r.data_mut()[i * remaining..(i + 1) * remaining] {
                        *z *= s;
                    }
                }
                (split.left.clone(), r)
            };
            tensors.push(l.reshape(&[left, 2, 2, kept])?);
            rest = r;
            left = kept;
        }
        tensors.push(rest.reshape(&[left, 2, 2, 1])?);
        Self::new(tensors)
    }

    /// `c` times the identity, with `c` on the first site.
    pub fn scaled_identity(n: usize, c: C64) -> Self {
        let mut id = Self::identity(n);
        id.tensors[0] = id.tensors[0].scale(c);
        id
    }

    /// `self + other` with block-diagonal bonds.
    pub fn direct_sum(&self, other: &Self) -> Result<Self> {
        let n = self.sites();
        if other.sites() != n {
            return Err(Error::Shape(format!(
                "sum of MPOs with {n} and {} sites",
                other.sites()
            )));
        }
        if n == 1 {
            return Self::new(vec![self.tensors[0].add(&other.tensors[0])?]);
        }
        let tensors = self
            .tensors
            .iter()
            .zip(&other.tensors)
            .enumerate()
            .map(|(k, (a, b))| {
                let (sa, sb) = (a.shape(), b.shape());
                let (la, ra, lb, rb) = (sa[0], sa[3], sb[0], sb[3]);
                let first = k == 0;
                let last = k == n - 1;
                let l = if first { 1 } else { la + lb };
                let r = if last { 1 } else { ra + rb };
                DenseTensor::from_fn(vec![l, 2, 2, r], |ix| {
                    let (x, o, i, y) = (ix[0], ix[1], ix[2], ix[3]);
                    let a_l = if first { Some(0) } else { (x < la).then_some(x) };
                    let a_r = if last { Some(0) } else { (y < ra).then_some(y) };
                    let b_l = if first { Some(0) } else { (x >= la).then(|| x - la) };
                    let b_r = if last { Some(0) } else { (y >= ra).then(|| y - ra) };
                    let mut v = C64::new(0.0, 0.0);
                    if let (Some(p), Some(q)) = (a_l, a_r) {
                        v += a.get(&[p, o, i, q]);
                    }
                    if let (Some(p), Some(q)) = (b_l, b_r) {
                        v += b.get(&[p, o, i, q]);
                    }
                    v
                })
            })
            .collect();
        Self::new(tensors)
    }

    pub fn sites(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensors(&self) -> &[DenseTensor] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<DenseTensor> {
        self.tensors
    }

    /// Bond dimension on each of the `N - 1` internal links.
    pub fn bond_dims(&self) -> Vec<usize> {
        self.tensors[..self.tensors.len() - 1]
            .iter()
            .map(|t| t.shape()[3])
            .collect()
    }

    pub fn max_bond(&self) -> usize {
        self.bond_dims().into_iter().max().unwrap_or(1)
    }

    /// Contract to a dense matrix. Guarded at 12 sites.
    pub fn to_dense(&self) -> Result<DenseTensor> {
        let n = self.sites();
        if n > 12 {
            return Err(Error::SizeGuard {
                what: "dense MPO reconstruction",
                n,
                max: 12,
            });
        }
        // acc: [out..., in..., right], grown site by site
        let first = &self.tensors[0];
        let mut acc = first.reshape(&[2, 2, first.shape()[3]])?;
        let mut dim = 2usize;
        for t in &self.tensors[1..] {
            // acc [O, I, r] x t [r, o, i, r'] -> [O, I, o, i, r']
            let next = contract(&acc, t, &[(2, 0)])?;
            let r = t.shape()[3];
            acc = next
                .permute(&[0, 2, 1, 3, 4])?
                .reshape(&[dim * 2, dim * 2, r])?;
            dim *= 2;
        }
        acc.reshape(&[dim, dim])
    }

    /// `Tr(M)` contracted site by site.
    pub fn trace(&self) -> C64 {
        let mut env = vec![ONE];
        for t in &self.tensors {
            let (l, r) = (t.shape()[0], t.shape()[3]);
            let mut next = vec![ZERO; r];
            for a in 0..l {
                if env[a] == ZERO {
                    continue;
                }
                for s in 0..2 {
                    for b in 0..r {
                        next[b] += env[a] * t.get(&[a, s, s, b]);
                    }
                }
            }
            env = next;
        }
        env[0]
    }
}

/// MPO of an Ising chain.
pub fn build_ising_mpo(spec: &IsingSpec) -> Result<HamiltonianMpo> {
    spec.validate()?;
    let onsite: Vec<DenseTensor> = spec
        .resolved_fields()
        .into_iter()
        .map(|w| onsite_term(spec.h, w))
        .collect();
    let sz = spin_z();
    HamiltonianMpo::nearest_neighbor(Some((-1.0, &sz, &sz)), &onsite)
}

/// Real dense Ising Hamiltonian, row-major, built entry by entry in the
/// computational basis without going through any tensor network.
pub(crate) fn dense_ising_real(spec: &IsingSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let n = spec.n;
    if n > DENSE_MAX_SITES {
        return Err(Error::SizeGuard {
            what: "dense Hamiltonian",
            n,
            max: DENSE_MAX_SITES,
        });
    }
    let dim = 1usize << n;
    let w = spec.resolved_fields();
    let sz = |state: usize, site: usize| -> f64 {
        if (state >> (n - 1 - site)) & 1 == 0 {
            0.5
        } else {
            -0.5
        }
    };
    let mut h = vec![0.0; dim * dim];
    for b in 0..dim {
        let mut diag = 0.0;
        for site in 0..n - 1 {
            diag -= sz(b, site) * sz(b, site + 1);
        }
        for (site, wn) in w.iter().enumerate() {
            diag += wn * sz(b, site);
        }
        h[b * dim + b] = diag;
        for site in 0..n {
            let flipped = b ^ (1 << (n - 1 - site));
            h[flipped * dim + b] += -spec.h * 0.5;
        }
    }
    Ok(h)
}

/// Dense `2^N x 2^N` Hamiltonian. Guarded at 14 sites.
pub fn build_dense(spec: &IsingSpec) -> Result<DenseTensor> {
    let dim = 1usize << spec.n;
    let h = dense_ising_real(spec)?;
    DenseTensor::from_real(vec![dim, dim], &h)
}

/// `Tr(a b^+)` by a left-to-right transfer contraction, linear in `N`.
pub fn mpo_trace_product(a: &HamiltonianMpo, b: &HamiltonianMpo) -> Result<C64> {
    if a.sites() != b.sites() {
        return Err(Error::Shape(format!(
            "trace product of MPOs with {} and {} sites",
            a.sites(),
            b.sites()
        )));
    }
    let mut env = DenseTensor::from_real(vec![1, 1], &[1.0])?;
    for (ta, tb) in a.tensors.iter().zip(&b.tensors) {
        // env [la, lb] . a [la, o, i, ra] -> [lb, o, i, ra]
        let x = contract(&env, ta, &[(0, 0)])?;
        // . conj(b) [lb, o, i, rb] -> [ra, rb]
        env = contract(&x, &tb.conj(), &[(0, 0), (1, 1), (2, 2)])?;
    }
    Ok(env.data()[0])
}
