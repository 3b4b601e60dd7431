//! Matrix kernels backed by faer: products, thin SVD, polar factors and
//! Hermitian spectra.

use faer::{linalg::matmul::matmul as faer_matmul, Accum, Mat, MatMut, MatRef, Par, Side};

use super::{DenseTensor, C64, ONE, ZERO};
use crate::error::{Error, Result};

/// Row-major `m x k` times row-major `k x n`.
pub fn matmul(a: &[C64], b: &[C64], m: usize, k: usize, n: usize) -> Vec<C64> {
    let mut out = vec![ZERO; m * n];
    if m == 0 || n == 0 {
        return out;
    }
    if k == 0 {
        return out;
    }
    let lhs = MatRef::from_row_major_slice(a, m, k);
    let rhs = MatRef::from_row_major_slice(b, k, n);
    let dst = MatMut::from_row_major_slice_mut(&mut out, m, n);
    faer_matmul(dst, Accum::Replace, lhs, rhs, ONE, Par::Seq);
    out
}

fn to_faer(t: &DenseTensor) -> Result<Mat<C64>> {
    let (r, c) = t.matrix_dims()?;
    let d = t.data();
    Ok(Mat::from_fn(r, c, |i, j| d[i * c + j]))
}

/// Thin SVD `A = U diag(s) Vh`, singular values descending.
#[derive(Clone, Debug)]
pub struct MatrixSvd {
    pub u: DenseTensor,
    pub s: Vec<f64>,
    pub vh: DenseTensor,
}

pub fn svd_matrix(a: &DenseTensor) -> Result<MatrixSvd> {
    let (m, n) = a.matrix_dims()?;
    let k = m.min(n);
    if k == 0 {
        return Ok(MatrixSvd {
            u: DenseTensor::zeros(vec![m, 0]),
            s: Vec::new(),
            vh: DenseTensor::zeros(vec![0, n]),
        });
    }
    let mat = to_faer(a)?;
    let svd = mat
        .thin_svd()
        .map_err(|e| Error::Decomposition(format!("svd did not converge: {e:?}")))?;
    let (u, v, s) = (svd.U(), svd.V(), svd.S());
    let u = DenseTensor::from_fn(vec![m, k], |ix| u[(ix[0], ix[1])]);
    let vh = DenseTensor::from_fn(vec![k, n], |ix| v[(ix[1], ix[0])].conj());
    let s = (0..k).map(|i| s[i].re).collect();
    Ok(MatrixSvd { u, s, vh })
}

/// Number of singular values kept under a rank cap and a relative cutoff.
pub(crate) fn kept_rank(s: &[f64], max_dim: usize, cutoff: f64) -> usize {
    let Some(&largest) = s.first() else { return 0 };
    if largest <= 0.0 {
        return 0;
    }
    s.iter()
        .take(max_dim)
        .take_while(|&&x| x > cutoff * largest)
        .count()
}

pub(crate) fn discarded_fraction(s: &[f64], kept: usize) -> f64 {
    let total: f64 = s.iter().map(|x| x * x).sum();
    if total <= 0.0 {
        return 0.0;
    }
    s[kept..].iter().map(|x| x * x).sum::<f64>() / total
}

#[derive(Clone, Debug)]
pub struct SvdSplit {
    /// Left isometry, shape `[left dims..., k]`.
    pub left: DenseTensor,
    pub singulars: Vec<f64>,
    /// Right isometry, shape `[k, right dims...]`.
    pub right: DenseTensor,
    pub discarded_weight: f64,
    /// Set when the input is identically zero and nothing could be kept.
    pub degenerate: bool,
}

/// Bipartition `t` into `left_axes` and the remaining axes and factor it by a
/// truncated SVD.
pub fn svd_split(
    t: &DenseTensor,
    left_axes: &[usize],
    max_dim: usize,
    cutoff: f64,
) -> Result<SvdSplit> {
    if max_dim == 0 {
        return Err(Error::Policy("bond cap must be at least 1".into()));
    }
    let rank = t.rank();
    let mut seen = vec![false; rank];
    for &ax in left_axes {
        if ax >= rank || seen[ax] {
            return Err(Error::Shape(format!(
                "invalid left axes {left_axes:?} for rank {rank}"
            )));
        }
        seen[ax] = true;
    }
    let right_axes: Vec<usize> = (0..rank).filter(|&a| !seen[a]).collect();
    let perm: Vec<usize> = left_axes.iter().chain(&right_axes).copied().collect();
    let left_dims: Vec<usize> = left_axes.iter().map(|&a| t.shape()[a]).collect();
    let right_dims: Vec<usize> = right_axes.iter().map(|&a| t.shape()[a]).collect();
    let m: usize = left_dims.iter().product();
    let n: usize = right_dims.iter().product();
    let mat = t.permute(&perm)?.reshape(&[m, n])?;
    let svd = svd_matrix(&mat)?;
    let k = kept_rank(&svd.s, max_dim, cutoff);
    let discarded_weight = discarded_fraction(&svd.s, k);
    let full_k = svd.s.len();
    let u = svd.u.data();
    let vh = svd.vh.data();
    let mut left_shape = left_dims;
    left_shape.push(k);
    let mut right_shape = vec![k];
    right_shape.extend(right_dims);
    let left_data: Vec<C64> = (0..m)
        .flat_map(|i| (0..k).map(move |j| u[i * full_k + j]))
        .collect();
    let right_data: Vec<C64> = vh[..k * n].to_vec();
    Ok(SvdSplit {
        left: DenseTensor::new(left_shape, left_data)?,
        singulars: svd.s[..k].to_vec(),
        right: DenseTensor::new(right_shape, right_data)?,
        discarded_weight,
        degenerate: k == 0,
    })
}

/// Polar factorization `A = W diag(s) V^dagger`, with unitary part `W V^dagger`.
#[derive(Clone, Debug)]
pub struct PolarFactor {
    pub unitary: DenseTensor,
    pub w: DenseTensor,
    pub s: Vec<f64>,
    pub v: DenseTensor,
    /// The input was numerically singular and was shifted by `1e-12 I`.
    pub regularized: bool,
}

const POLAR_SHIFT: f64 = 1e-12;

pub fn polar_decompose(a: &DenseTensor) -> Result<PolarFactor> {
    let (m, n) = a.matrix_dims()?;
    if m != n {
        return Err(Error::Shape(format!("polar factor of non-square {m}x{n}")));
    }
    let mut svd = svd_matrix(a)?;
    let mut regularized = false;
    let s_max = svd.s.first().copied().unwrap_or(0.0);
    let s_min = svd.s.last().copied().unwrap_or(0.0);
    if s_min <= f64::EPSILON * (n as f64) * s_max.max(f64::MIN_POSITIVE) {
        let shifted = a.add(&DenseTensor::identity(n).scale(C64::new(POLAR_SHIFT, 0.0)))?;
        svd = svd_matrix(&shifted)?;
        regularized = true;
    }
    let v = svd.vh.dagger()?;
    let unitary = svd.u.matmul(&svd.vh)?;
    Ok(PolarFactor {
        unitary,
        w: svd.u,
        s: svd.s,
        v,
        regularized,
    })
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(a: &DenseTensor) -> Result<Vec<f64>> {
    let (m, n) = a.matrix_dims()?;
    if m != n {
        return Err(Error::Shape(format!("eigenvalues of non-square {m}x{n}")));
    }
    let d = a.data();
    if a.is_real(0.0) {
        let mat = Mat::<f64>::from_fn(n, n, |i, j| d[i * n + j].re);
        return mat
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|e| Error::Decomposition(format!("eigensolver failed: {e:?}")));
    }
    let mat = Mat::<C64>::from_fn(n, n, |i, j| d[i * n + j]);
    mat.self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Decomposition(format!("eigensolver failed: {e:?}")))
}
