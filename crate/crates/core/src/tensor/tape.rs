//! Reverse-mode differentiation over a recorded list of tensor primitives.
//!
//! Every primitive appends one node holding its output value. `backward`
//! walks the list in reverse and accumulates adjoints. For a real scalar
//! loss `L` and a complex leaf `z = x + iy`, the returned gradient is
//! `dL/dx + i dL/dy` (twice the derivative with respect to `conj(z)`), which
//! is the steepest-ascent direction in the complex plane. When the seed
//! carries a complex value only its real part is differentiated.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::linalg::{discarded_fraction, kept_rank, polar_decompose, svd_matrix, PolarFactor};
use super::{contract, inverse_permutation, ContractionPlan, DenseTensor, C64, ONE, ZERO};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Bond cap and relative singular-value cutoff for a differentiable split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitPolicy {
    pub max_dim: usize,
    pub cutoff: f64,
}

/// Which factor absorbs the singular values.
///
/// `Left` returns `(U, S Vh)`, `Right` returns `(U S, Vh)`. The choice is
/// made so that the factor treated as a fixed basis is the square one when
/// nothing is truncated, which keeps the backward pass exact in that case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitForm {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug)]
pub struct SplitVars {
    pub left: Var,
    pub right: Var,
    pub kept: usize,
    pub discarded_weight: f64,
}

/// Relative Lorentzian broadening of `1/s` in the split adjoint.
const BROADENING: f64 = 1e-12;

#[derive(Debug)]
struct SplitSaved {
    form: SplitForm,
    /// `m x k`
    u: DenseTensor,
    /// `k x n`
    vh: DenseTensor,
    sinv: Vec<f64>,
    /// `k < m` for the left form, `k < n` for the right form.
    complement: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Half {
    Left,
    Right,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Contract {
        a: Var,
        b: Var,
        axes: Vec<(usize, usize)>,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: C64,
    },
    Conj {
        a: Var,
    },
    Polar {
        a: Var,
        factor: Arc<PolarFactor>,
    },
    Split {
        a: Var,
        half: Half,
        policy: SplitPolicy,
        saved: Arc<SplitSaved>,
    },
}

#[derive(Debug)]
struct Node {
    value: DenseTensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of a differentiable computation.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, DenseTensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseTensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<DenseTensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseTensor, op: Op, requires_grad: bool) -> Var {
        let value = value.with_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Register an input; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: DenseTensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: DenseTensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracked(v)
    }

    pub fn contract(&mut self, a: Var, b: Var, axes: &[(usize, usize)]) -> Result<Var> {
        let value = contract(self.value(a), self.value(b), axes)?;
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            value,
            Op::Contract {
                a,
                b,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(perm)?;
        let rg = self.tracked(a);
        Ok(self.push(
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.tracked(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: C64) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.tracked(a);
        self.push(value, Op::Scale { a, c }, rg)
    }

    pub fn conj(&mut self, a: Var) -> Var {
        let value = self.value(a).conj();
        let rg = self.tracked(a);
        self.push(value, Op::Conj { a }, rg)
    }

    /// Unitary polar factor of a square matrix. Returns the new variable and
    /// whether the input had to be regularized.
    pub fn polar(&mut self, a: Var) -> Result<(Var, bool)> {
        let factor = polar_decompose(self.value(a))?;
        let regularized = factor.regularized;
        let value = factor.unitary.clone();
        let rg = self.tracked(a);
        let v = self.push(
            value,
            Op::Polar {
                a,
                factor: Arc::new(factor),
            },
            rg,
        );
        Ok((v, regularized))
    }

    /// Truncated SVD factorization of a matrix into `left (m x k)` and
    /// `right (k x n)` with `left * right` the rank-`k` approximation.
    ///
    /// The adjoint holds the kept subspaces fixed: it is the exact derivative
    /// of the rank-`k` approximation when the dropped singular values vanish,
    /// and ignores their coupling otherwise. At least one singular triplet is
    /// always kept so bonds never collapse to zero width.
    pub fn svd_split(&mut self, a: Var, policy: SplitPolicy) -> Result<SplitVars> {
        self.svd_split_as(a, policy, None)
    }

    /// [`GradTape::svd_split`] with the singular values absorbed on a chosen
    /// side. The other factor is an isometry. The backward pass is exact for
    /// untruncated splits of any function invariant under a unitary change of
    /// basis on the new bond.
    pub fn svd_split_as(
        &mut self,
        a: Var,
        policy: SplitPolicy,
        form: Option<SplitForm>,
    ) -> Result<SplitVars> {
        if policy.max_dim == 0 {
            return Err(Error::Policy("bond cap must be at least 1".into()));
        }
        let (saved, left, right, kept, discarded_weight) =
            split_forward(self.value(a), policy, form)?;
        let rg = self.tracked(a);
        let saved = Arc::new(saved);
        let left = self.push(
            left,
            Op::Split {
                a,
                half: Half::Left,
                policy,
                saved: saved.clone(),
            },
            rg,
        );
        let right = self.push(
            right,
            Op::Split {
                a,
                half: Half::Right,
                policy,
                saved,
            },
            rg,
        );
        Ok(SplitVars {
            left,
            right,
            kept,
            discarded_weight,
        })
    }

    /// Re-execute every recorded primitive from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<DenseTensor>> {
        let mut values: Vec<DenseTensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Contract { a, b, axes } => contract(&values[a.0], &values[b.0], axes)?,
                Op::Permute { a, perm } => values[a.0].permute(perm)?,
                Op::Reshape { a } => values[a.0].reshape(node.value.shape())?,
                Op::Add { a, b } => values[a.0].add(&values[b.0])?,
                Op::Scale { a, c } => values[a.0].scale(*c),
                Op::Conj { a } => values[a.0].conj(),
                Op::Polar { a, .. } => polar_decompose(&values[a.0])?.unitary,
                Op::Split {
                    a,
                    half,
                    policy,
                    saved,
                } => {
                    let (_, l, r, _, _) = split_forward(&values[a.0], *policy, Some(saved.form))?;
                    match half {
                        Half::Left => l,
                        Half::Right => r,
                    }
                }
            };
            values.push(v.with_grad(node.requires_grad));
        }
        Ok(values)
    }

    /// Gradients of `Re(seed)` with respect to every tracked leaf.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        let seed_value = self.value(seed);
        if seed_value.len() != 1 {
            return Err(Error::Gradient(format!(
                "seed must be a scalar, got shape {:?}",
                seed_value.shape()
            )));
        }
        let mut grads = Gradients::default();
        if !self.tracked(seed) {
            return Ok(grads);
        }
        let mut adj: Vec<Option<DenseTensor>> = (0..=seed.0).map(|_| None).collect();
        adj[seed.0] = Some(DenseTensor::new(seed_value.shape().to_vec(), vec![ONE])?);

        for i in (0..=seed.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads.grads.insert(Var(i), g);
                }
                Op::Contract { a, b, axes } => {
                    let (ga, gb) = self.contract_adjoint(*a, *b, axes, &g)?;
                    if let Some(ga) = ga {
                        accumulate(&mut adj, *a, ga);
                    }
                    if let Some(gb) = gb {
                        accumulate(&mut adj, *b, gb);
                    }
                }
                Op::Permute { a, perm } => {
                    accumulate(&mut adj, *a, g.permute(&inverse_permutation(perm))?);
                }
                Op::Reshape { a } => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut adj, *a, g.reshape(&shape)?);
                }
                Op::Add { a, b } => {
                    if self.tracked(*a) {
                        accumulate(&mut adj, *a, g.clone());
                    }
                    if self.tracked(*b) {
                        accumulate(&mut adj, *b, g);
                    }
                }
                Op::Scale { a, c } => accumulate(&mut adj, *a, g.scale(c.conj())),
                Op::Conj { a } => accumulate(&mut adj, *a, g.conj()),
                Op::Polar { a, factor } => accumulate(&mut adj, *a, polar_adjoint(factor, &g)?),
                Op::Split { a, half, saved, .. } => {
                    accumulate(&mut adj, *a, split_adjoint(saved, *half, &g)?)
                }
            }
        }
        Ok(grads)
    }

    fn contract_adjoint(
        &self,
        a: Var,
        b: Var,
        axes: &[(usize, usize)],
        g: &DenseTensor,
    ) -> Result<(Option<DenseTensor>, Option<DenseTensor>)> {
        let av = self.value(a);
        let bv = self.value(b);
        let plan = ContractionPlan::new(av.shape(), bv.shape(), axes)?;
        let nfa = plan.free_a.len();
        let ga = if self.tracked(a) {
            // g[free_a, free_b] . conj(b) over free_b
            let pairs: Vec<(usize, usize)> = plan
                .free_b
                .iter()
                .enumerate()
                .map(|(t, &j)| (nfa + t, j))
                .collect();
            let raw = contract(g, &bv.conj(), &pairs)?;
            let mut b_con: Vec<(usize, usize)> = axes.iter().map(|&(i, j)| (j, i)).collect();
            b_con.sort_unstable();
            let order: Vec<usize> = plan
                .free_a
                .iter()
                .copied()
                .chain(b_con.iter().map(|&(_, i)| i))
                .collect();
            Some(raw.permute(&inverse_permutation(&order))?)
        } else {
            None
        };
        let gb = if self.tracked(b) {
            let pairs: Vec<(usize, usize)> = plan
                .free_a
                .iter()
                .enumerate()
                .map(|(s, &i)| (i, s))
                .collect();
            let raw = contract(&av.conj(), g, &pairs)?;
            let mut a_con: Vec<(usize, usize)> = axes.to_vec();
            a_con.sort_unstable();
            let order: Vec<usize> = a_con
                .iter()
                .map(|&(_, j)| j)
                .chain(plan.free_b.iter().copied())
                .collect();
            Some(raw.permute(&inverse_permutation(&order))?)
        } else {
            None
        };
        Ok((ga, gb))
    }
}

fn accumulate(adj: &mut [Option<DenseTensor>], v: Var, g: DenseTensor) {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

type SplitOutput = (SplitSaved, DenseTensor, DenseTensor, usize, f64);

fn split_forward(
    a: &DenseTensor,
    policy: SplitPolicy,
    form: Option<SplitForm>,
) -> Result<SplitOutput> {
    let (m, n) = a.matrix_dims()?;
    let svd = svd_matrix(a)?;
    let full = svd.s.len();
    let k = kept_rank(&svd.s, policy.max_dim, policy.cutoff).max(1).min(full);
    let discarded = discarded_fraction(&svd.s, k);
    let s = &svd.s[..k];
    let s_max = s[0];
    let eps = BROADENING * s_max * s_max;
    let sinv: Vec<f64> = s
        .iter()
        .map(|&x| if x > 0.0 { x / (x * x + eps) } else { 0.0 })
        .collect();
    let ud = svd.u.data();
    let u = DenseTensor::from_fn(vec![m, k], |ix| ud[ix[0] * full + ix[1]]);
    let vh = DenseTensor::new(vec![k, n], svd.vh.data()[..k * n].to_vec())?;
    let form = form.unwrap_or(if m <= n {
        SplitForm::Left
    } else {
        SplitForm::Right
    });
    let (left, right, complement) = match form {
        SplitForm::Left => (u.clone(), scale_rows(&vh, s), k < m),
        SplitForm::Right => (scale_cols(&u, s), vh.clone(), k < n),
    };
    let saved = SplitSaved {
        form,
        u,
        vh,
        sinv,
        complement,
    };
    Ok((saved, left, right, k, discarded))
}

fn scale_rows(t: &DenseTensor, d: &[f64]) -> DenseTensor {
    let (r, c) = t.matrix_dims().expect("matrix");
    let mut out = t.clone();
    for i in 0..r {
        for z in &mut out.data_mut()[i * c..(i + 1) * c] {
            *z *= d[i];
        }
    }
    out
}

fn scale_cols(t: &DenseTensor, d: &[f64]) -> DenseTensor {
    let (_, c) = t.matrix_dims().expect("matrix");
    let mut out = t.clone();
    for (idx, z) in out.data_mut().iter_mut().enumerate() {
        *z *= d[idx % c];
    }
    out
}

fn split_adjoint(saved: &SplitSaved, half: Half, g: &DenseTensor) -> Result<DenseTensor> {
    let u = &saved.u;
    let vh = &saved.vh;
    match (saved.form, half) {
        // left = U: (I - U U^+) g S^-1 Vh
        (SplitForm::Left, Half::Left) => {
            if !saved.complement {
                let (m, _) = u.matrix_dims()?;
                return Ok(DenseTensor::zeros(vec![m, vh.matrix_dims()?.1]));
            }
            let proj = u.matmul(&u.dagger()?.matmul(g)?)?;
            let perp = g.sub(&proj)?;
            scale_cols(&perp, &saved.sinv).matmul(vh)
        }
        // right = S Vh: U g
        (SplitForm::Left, Half::Right) => u.matmul(g),
        // left = U S: g Vh
        (SplitForm::Right, Half::Left) => g.matmul(vh),
        // right = Vh: U S^-1 g (I - Vh^+ Vh)
        (SplitForm::Right, Half::Right) => {
            if !saved.complement {
                let (m, _) = u.matrix_dims()?;
                return Ok(DenseTensor::zeros(vec![m, vh.matrix_dims()?.1]));
            }
            let proj = g.matmul(&vh.dagger()?)?.matmul(vh)?;
            let perp = g.sub(&proj)?;
            u.matmul(&scale_rows(&perp, &saved.sinv))
        }
    }
}

/// Adjoint of the unitary polar factor `W V^+` of `A = W S V^+`:
/// `W ((G - G^+) o F) V^+` with `G = W^+ g V` and `F_ij = 1 / (s_i + s_j)`.
fn polar_adjoint(f: &PolarFactor, g: &DenseTensor) -> Result<DenseTensor> {
    let n = f.s.len();
    let gm = f.w.dagger()?.matmul(g)?.matmul(&f.v)?;
    let mut x = DenseTensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            let denom = f.s[i] + f.s[j];
            let val = if denom > 0.0 {
                (gm.get(&[i, j]) - gm.get(&[j, i]).conj()) / denom
            } else {
                ZERO
            };
            x.set(&[i, j], val);
        }
    }
    f.w.matmul(&x)?.matmul(&f.v.dagger()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of `f` at every real and imaginary
    /// component of `x`, packed as `df/dRe + i df/dIm`.
    fn numeric_grad(x: &DenseTensor, f: &dyn Fn(&DenseTensor) -> f64, step: f64) -> DenseTensor {
        let mut out = DenseTensor::zeros(x.shape().to_vec());
        for k in 0..x.len() {
            let mut comp = [0.0; 2];
            for (c, dir) in [C64::new(step, 0.0), C64::new(0.0, step)].iter().enumerate() {
                let mut p = x.clone();
                p.data_mut()[k] += dir;
                let mut m = x.clone();
                m.data_mut()[k] -= dir;
                comp[c] = (f(&p) - f(&m)) / (2.0 * step);
            }
            out.data_mut()[k] = C64::new(comp[0], comp[1]);
        }
        out
    }

    fn rel_close(a: &DenseTensor, b: &DenseTensor, tol: f64) -> bool {
        let scale = b.norm().max(1e-8);
        a.sub(b).unwrap().norm() / scale <= tol
    }

    #[test]
    fn quadratic_form_gradient_is_twice_input() {
        let a = DenseTensor::from_real(vec![2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, 4.0])
            .unwrap()
            .with_grad(true);
        let mut tape = GradTape::new();
        let av = tape.leaf(a.clone());
        // Tr(A^T A) = sum_ij A_ij A_ij
        let f = tape.contract(av, av, &[(0, 0), (1, 1)]).unwrap();
        let grads = tape.backward(f).unwrap();
        let g = grads.get(av).unwrap();
        assert!(g.max_abs_diff(&a.scale(C64::new(2.0, 0.0))) < 1e-14);
    }

    #[test]
    fn constant_leaves_get_no_gradient() {
        let mut tape = GradTape::new();
        let a = tape.leaf(DenseTensor::identity(2).with_grad(true));
        let b = tape.constant(DenseTensor::identity(2));
        let f = tape.contract(a, b, &[(0, 0), (1, 1)]).unwrap();
        let grads = tape.backward(f).unwrap();
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_none());
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut tape = GradTape::new();
        let a = tape.leaf(DenseTensor::identity(2).with_grad(true));
        assert!(matches!(tape.backward(a), Err(Error::Gradient(_))));
    }

    fn chain_loss(tape: &mut GradTape, a: Var, b: Var, c: Var) -> Var {
        // |Tr(A B C C^+ B^+ A^+)| style real loss built from primitives
        let ab = tape.contract(a, b, &[(1, 0)]).unwrap();
        let abc = tape.contract(ab, c, &[(2, 0)]).unwrap();
        let conj = tape.conj(abc);
        let scaled = tape.scale(abc, C64::new(0.3, -0.7));
        let perm = tape.permute(scaled, &[2, 0, 1]).unwrap();
        let back = tape.permute(perm, &[1, 2, 0]).unwrap();
        let sum = tape.add(back, abc).unwrap();
        tape.contract(sum, conj, &[(0, 0), (1, 1), (2, 2)]).unwrap()
    }

    #[test]
    fn contraction_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a0 = random_tensor(vec![3, 4], &mut rng);
        let b0 = random_tensor(vec![4, 2, 5], &mut rng);
        let c0 = random_tensor(vec![5, 3], &mut rng);
        let eval = |a: &DenseTensor, b: &DenseTensor, c: &DenseTensor| {
            let mut t = GradTape::new();
            let (a, b, c) = (t.leaf(a.clone()), t.leaf(b.clone()), t.leaf(c.clone()));
            let f = chain_loss(&mut t, a, b, c);
            t.value(f).to_scalar().unwrap().re
        };
        let mut tape = GradTape::new();
        let av = tape.leaf(a0.clone().with_grad(true));
        let bv = tape.leaf(b0.clone().with_grad(true));
        let cv = tape.leaf(c0.clone().with_grad(true));
        let f = chain_loss(&mut tape, av, bv, cv);
        let grads = tape.backward(f).unwrap();

        let na = numeric_grad(&a0, &|x| eval(x, &b0, &c0), 1e-5);
        let nb = numeric_grad(&b0, &|x| eval(&a0, x, &c0), 1e-5);
        let nc = numeric_grad(&c0, &|x| eval(&a0, &b0, x), 1e-5);
        assert!(rel_close(grads.get(av).unwrap(), &na, 1e-4));
        assert!(rel_close(grads.get(bv).unwrap(), &nb, 1e-4));
        assert!(rel_close(grads.get(cv).unwrap(), &nc, 1e-4));
    }

    #[test]
    fn polar_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lat = random_tensor(vec![4, 4], &mut rng);
        let target = random_tensor(vec![4, 4], &mut rng);
        let eval = |x: &DenseTensor, record: bool| {
            let mut t = GradTape::new();
            let l = t.leaf(x.clone().with_grad(record));
            let (u, _) = t.polar(l).unwrap();
            let tg = t.constant(target.clone());
            let f = t.contract(u, tg, &[(0, 0), (1, 1)]).unwrap();
            (t, l, f)
        };
        let (tape, l, f) = eval(&lat, true);
        let g = tape.backward(f).unwrap();
        let num = numeric_grad(
            &lat,
            &|x| {
                let (t, _, f) = eval(x, false);
                t.value(f).to_scalar().unwrap().re
            },
            1e-6,
        );
        assert!(rel_close(g.get(l).unwrap(), &num, 1e-5));
    }

    #[test]
    fn untruncated_split_gradient_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let forms = [None, Some(SplitForm::Left), Some(SplitForm::Right)];
        for ((m, n), form) in [(3usize, 5usize), (6, 2), (4, 4)]
            .into_iter()
            .flat_map(|d| forms.map(|f| (d, f)))
        {
            let a0 = random_tensor(vec![m, n], &mut rng);
            let wl = random_tensor(vec![m, m.min(n)], &mut rng);
            let wr = random_tensor(vec![m.min(n), n], &mut rng);
            let policy = SplitPolicy {
                max_dim: usize::MAX,
                cutoff: 0.0,
            };
            let build = |x: &DenseTensor, record: bool| {
                let mut t = GradTape::new();
                let a = t.leaf(x.clone().with_grad(record));
                let sp = t.svd_split_as(a, policy, form).unwrap();
                // only gauge-invariant functions of (L, R) are well defined
                let lr = t.contract(sp.left, sp.right, &[(1, 0)]).unwrap();
                let w = t.constant(wl.matmul(&wr).unwrap());
                let f = t.contract(lr, w, &[(0, 0), (1, 1)]).unwrap();
                let sq = t.contract(lr, lr, &[(0, 0), (1, 1)]).unwrap();
                let f = t.add(f, sq).unwrap();
                (t, a, f)
            };
            let (tape, a, f) = build(&a0, true);
            let g = tape.backward(f).unwrap();
            let num = numeric_grad(
                &a0,
                &|x| {
                    let (t, _, f) = build(x, false);
                    t.value(f).to_scalar().unwrap().re
                },
                1e-6,
            );
            assert!(rel_close(g.get(a).unwrap(), &num, 1e-6), "{m}x{n} {form:?}");
        }
    }

    #[test]
    fn truncated_split_gradient_matches_rank_k_derivative_for_low_rank_input() {
        // A of exact rank 2 truncated to rank 2: the derivative of the
        // rank-2 approximation is dA - P_perp dA Q_perp.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_tensor(vec![5, 2], &mut rng);
        let y = random_tensor(vec![2, 6], &mut rng);
        let a0 = x.matmul(&y).unwrap();
        let w = random_tensor(vec![5, 6], &mut rng);
        let policy = SplitPolicy {
            max_dim: 2,
            cutoff: 0.0,
        };
        let build = |x: &DenseTensor, record: bool| {
            let mut t = GradTape::new();
            let a = t.leaf(x.clone().with_grad(record));
            let sp = t.svd_split(a, policy).unwrap();
            let lr = t.contract(sp.left, sp.right, &[(1, 0)]).unwrap();
            let wv = t.constant(w.clone());
            let f = t.contract(lr, wv, &[(0, 0), (1, 1)]).unwrap();
            (t, a, f)
        };
        let (tape, a, f) = build(&a0, true);
        let g = tape.backward(f).unwrap();
        let num = numeric_grad(
            &a0,
            &|x| {
                let (t, _, f) = build(x, false);
                t.value(f).to_scalar().unwrap().re
            },
            1e-6,
        );
        assert!(rel_close(g.get(a).unwrap(), &num, 1e-5));
    }

    #[test]
    fn replay_reproduces_values_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut tape = GradTape::new();
        let a = tape.leaf(random_tensor(vec![4, 4], &mut rng).with_grad(true));
        let b = tape.leaf(random_tensor(vec![4, 6], &mut rng));
        let (u, _) = tape.polar(a).unwrap();
        let ub = tape.contract(u, b, &[(1, 0)]).unwrap();
        let r = tape.reshape(ub, &[2, 12]).unwrap();
        let sp = tape
            .svd_split(
                r,
                SplitPolicy {
                    max_dim: 1,
                    cutoff: 1e-14,
                },
            )
            .unwrap();
        let c = tape.conj(sp.right);
        let _ = tape.add(c, sp.right).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, tape.value(Var(i)));
        }
    }
}
