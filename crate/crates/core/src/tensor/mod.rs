//! Dense complex tensors and the operations every network evaluation is
//! built from.
//!
//! Storage is row-major: the last index varies fastest. A tensor of rank
//! zero has shape `[]` and a single stored scalar.

mod linalg;
mod tape;

pub use linalg::{
    hermitian_eigenvalues, matmul, polar_decompose, svd_matrix, svd_split, MatrixSvd, PolarFactor,
    SvdSplit,
};
pub use tape::{GradTape, Gradients, SplitForm, SplitPolicy, SplitVars, Var};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<C64>,
    #[serde(default)]
    requires_grad: bool,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<C64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {expected} scalars but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn from_real(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![ZERO; n],
            requires_grad: false,
        }
    }

    pub fn scalar(value: C64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = ONE;
        }
        t
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> C64) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = vec![0usize; t.shape.len()];
        for k in 0..t.data.len() {
            t.data[k] = f(&idx);
            increment(&mut idx, &t.shape);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn with_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, index: &[usize]) -> C64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: C64) {
        let k = self.offset(index);
        self.data[k] = value;
    }

    /// The single entry of a tensor holding exactly one scalar.
    pub fn to_scalar(&self) -> Option<C64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.rank())?;
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(Self::new(self.shape.clone(), self.data.clone())?);
        }
        let new_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let old_strides = self.strides();
        let src_strides: Vec<usize> = perm.iter().map(|&p| old_strides[p]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; new_shape.len()];
        let mut src = 0usize;
        for _ in 0..self.data.len() {
            out.push(self.data[src]);
            // odometer increment, tracking the source offset incrementally
            for ax in (0..new_shape.len()).rev() {
                idx[ax] += 1;
                src += src_strides[ax];
                if idx[ax] < new_shape[ax] {
                    break;
                }
                src -= src_strides[ax] * new_shape[ax];
                idx[ax] = 0;
            }
        }
        Self::new(new_shape, out)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn conj(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|z| z.conj()).collect(),
            requires_grad: false,
        }
    }

    pub fn scale(&self, c: C64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&z| z * c).collect(),
            requires_grad: false,
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(C64, C64) -> C64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Self::new(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Matrix view dimensions; fails unless the tensor has rank two.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Conjugate transpose of a matrix.
    pub fn dagger(&self) -> Result<Self> {
        self.matrix_dims()?;
        Ok(self.permute(&[1, 0])?.conj())
    }

    pub fn trace(&self) -> Result<C64> {
        let (r, c) = self.matrix_dims()?;
        if r != c {
            return Err(Error::Shape(format!("trace of non-square {r}x{c} matrix")));
        }
        Ok((0..r).map(|i| self.data[i * c + i]).sum())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        contract(self, other, &[(1, 0)])
    }

    /// Kronecker product of two matrices, `self` on the more significant index.
    pub fn kron(&self, other: &Self) -> Result<Self> {
        let (ar, ac) = self.matrix_dims()?;
        let (br, bc) = other.matrix_dims()?;
        let mut out = Self::zeros(vec![ar * br, ac * bc]);
        let cols = ac * bc;
        for i in 0..ar {
            for j in 0..ac {
                let a = self.data[i * ac + j];
                if a == ZERO {
                    continue;
                }
                for k in 0..br {
                    for l in 0..bc {
                        out.data[(i * br + k) * cols + j * bc + l] = a * other.data[k * bc + l];
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn is_real(&self, tol: f64) -> bool {
        self.data.iter().all(|z| z.im.abs() <= tol)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for ax in (0..shape.len()).rev() {
        idx[ax] += 1;
        if idx[ax] < shape[ax] {
            return;
        }
        idx[ax] = 0;
    }
}

pub(crate) fn check_permutation(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(Error::Shape(format!(
            "permutation {perm:?} has wrong length for rank {rank}"
        )));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::Shape(format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(())
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Tensor contraction over the given `(axis of a, axis of b)` pairs.
///
/// The result carries the uncontracted axes of `a` followed by those of `b`,
/// each group in its original order.
pub fn contract(a: &DenseTensor, b: &DenseTensor, axes: &[(usize, usize)]) -> Result<DenseTensor> {
    let plan = ContractionPlan::new(a.shape(), b.shape(), axes)?;
    let ap = a.permute(&plan.perm_a)?;
    let bp = b.permute(&plan.perm_b)?;
    let data = linalg::matmul(ap.data(), bp.data(), plan.m, plan.k, plan.n);
    DenseTensor::new(plan.out_shape, data)
}

pub(crate) struct ContractionPlan {
    pub perm_a: Vec<usize>,
    pub perm_b: Vec<usize>,
    pub free_a: Vec<usize>,
    pub free_b: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
}

impl ContractionPlan {
    pub fn new(sa: &[usize], sb: &[usize], axes: &[(usize, usize)]) -> Result<Self> {
        let mut used_a = vec![false; sa.len()];
        let mut used_b = vec![false; sb.len()];
        for &(i, j) in axes {
            if i >= sa.len() || j >= sb.len() {
                return Err(Error::Contraction(format!(
                    "axis pair ({i}, {j}) out of range for shapes {sa:?} and {sb:?}"
                )));
            }
            if used_a[i] || used_b[j] {
                return Err(Error::Contraction(format!("axis pair ({i}, {j}) repeated")));
            }
            if sa[i] != sb[j] {
                return Err(Error::Contraction(format!(
                    "dimension mismatch on pair ({i}, {j}): {} vs {}",
                    sa[i], sb[j]
                )));
            }
            used_a[i] = true;
            used_b[j] = true;
        }
        let free_a: Vec<usize> = (0..sa.len()).filter(|&i| !used_a[i]).collect();
        let free_b: Vec<usize> = (0..sb.len()).filter(|&j| !used_b[j]).collect();
        let perm_a: Vec<usize> = free_a.iter().copied().chain(axes.iter().map(|p| p.0)).collect();
        let perm_b: Vec<usize> = axes.iter().map(|p| p.1).chain(free_b.iter().copied()).collect();
        let m = free_a.iter().map(|&i| sa[i]).product();
        let k = axes.iter().map(|p| sa[p.0]).product();
        let n = free_b.iter().map(|&j| sb[j]).product();
        let out_shape = free_a
            .iter()
            .map(|&i| sa[i])
            .chain(free_b.iter().map(|&j| sb[j]))
            .collect();
        Ok(Self {
            perm_a,
            perm_b,
            free_a,
            free_b,
            m,
            k,
            n,
            out_shape,
        })
    }
}
