//! Time-evolving block decimation of operators and states by brick-wall
//! circuits.
//!
//! Both engines keep the network in mixed canonical form with a single
//! orthogonality center, so every truncation is optimal in Frobenius norm for
//! the current network. Gates within a layer act on disjoint pairs and
//! commute; layers are swept in alternating directions so the center only
//! moves by one site between consecutive gates.

use serde::{Deserialize, Serialize};

use crate::circuit::{BrickwallCircuit, Placement};
use crate::error::{Error, Result};
use crate::hamiltonian::HamiltonianMpo;
use crate::spectrum::SpectrumMps;
use crate::tensor::{contract, svd_split, DenseTensor, GradTape, SplitForm, SplitPolicy, Var, C64};

/// Bond cap and relative singular-value cutoff for every TEBD split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationPolicy {
    pub chi_t: usize,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
    #[serde(default = "default_record")]
    pub record_discard: bool,
}

fn default_cutoff() -> f64 {
    1e-14
}

fn default_record() -> bool {
    true
}

impl TruncationPolicy {
    pub fn new(chi_t: usize) -> Self {
        Self {
            chi_t,
            cutoff: default_cutoff(),
            record_discard: true,
        }
    }

    /// No truncation at all.
    pub fn exact() -> Self {
        Self {
            chi_t: usize::MAX,
            cutoff: 0.0,
            record_discard: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chi_t < 1 {
            return Err(Error::Policy("chi_t must be at least 1".into()));
        }
        if !(self.cutoff >= 0.0 && self.cutoff < 1.0) {
            return Err(Error::Policy(format!(
                "relative cutoff must lie in [0, 1), got {}",
                self.cutoff
            )));
        }
        Ok(())
    }

    fn split(&self) -> SplitPolicy {
        SplitPolicy {
            max_dim: self.chi_t,
            cutoff: self.cutoff,
        }
    }

    fn gauge(&self) -> SplitPolicy {
        SplitPolicy {
            max_dim: usize::MAX,
            cutoff: self.cutoff,
        }
    }
}

/// Gates in the order the engine applies them, with the sweep direction of
/// their layer. `reverse` processes the last layer first.
fn sweep_order(circuit: &BrickwallCircuit, reverse: bool) -> Vec<(usize, Placement, bool)> {
    let layers = circuit.layers();
    let mut order = Vec::with_capacity(circuit.num_gates());
    for step in 0..layers {
        let layer = if reverse { layers - 1 - step } else { step };
        let rightward = step % 2 == 0;
        let mut gates: Vec<(usize, Placement)> = circuit
            .placements()
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, p)| p.layer == layer)
            .collect();
        if !rightward {
            gates.reverse();
        }
        order.extend(gates.into_iter().map(|(i, p)| (i, p, rightward)));
    }
    order
}

fn bits_ok(bits: &[u8], n: usize) -> Result<()> {
    if bits.len() != n || bits.iter().any(|&b| b > 1) {
        return Err(Error::Shape(format!(
            "expected a bitstring of {n} zeros and ones, got {bits:?}"
        )));
    }
    Ok(())
}

/// Operator sites on a tape, with the position of the orthogonality center.
pub struct TapeMpo {
    pub sites: Vec<Var>,
    center: usize,
    pub discarded_weight: f64,
}

impl TapeMpo {
    /// Right-canonicalize a constant operator and place it on the tape with
    /// the center on the first site.
    pub fn constant(tape: &mut GradTape, mpo: &HamiltonianMpo, policy: &TruncationPolicy) -> Result<Self> {
        let mut t: Vec<DenseTensor> = mpo.tensors().to_vec();
        for j in (1..t.len()).rev() {
            let r = t[j].shape()[3];
            let split = svd_split(&t[j], &[0], usize::MAX, policy.cutoff)?;
            if split.degenerate {
                return Err(Error::Decomposition("operator vanishes identically".into()));
            }
            let k = split.singulars.len();
            let mut us = split.left.clone();
            for (idx, z) in us.data_mut().iter_mut().enumerate() {
                *z *= split.singulars[idx % k];
            }
            t[j] = split.right.reshape(&[k, 2, 2, r])?;
            t[j - 1] = contract(&t[j - 1], &us, &[(3, 0)])?;
        }
        let sites = t.into_iter().map(|x| tape.constant(x.with_grad(false))).collect();
        Ok(Self {
            sites,
            center: 0,
            discarded_weight: 0.0,
        })
    }

    pub fn values(&self, tape: &GradTape) -> Result<HamiltonianMpo> {
        HamiltonianMpo::new(self.sites.iter().map(|&v| tape.value(v).clone()).collect())
    }

    fn shift_right(&mut self, tape: &mut GradTape, policy: &TruncationPolicy) -> Result<()> {
        let j = self.center;
        let s = tape.value(self.sites[j]).shape().to_vec();
        let m = tape.reshape(self.sites[j], &[s[0] * 4, s[3]])?;
        let sp = tape.svd_split_as(m, policy.gauge(), Some(SplitForm::Left))?;
        self.discarded_weight += sp.discarded_weight;
        self.sites[j] = tape.reshape(sp.left, &[s[0], 2, 2, sp.kept])?;
        self.sites[j + 1] = tape.contract(sp.right, self.sites[j + 1], &[(1, 0)])?;
        self.center += 1;
        Ok(())
    }

    fn shift_left(&mut self, tape: &mut GradTape, policy: &TruncationPolicy) -> Result<()> {
        let j = self.center;
        let s = tape.value(self.sites[j]).shape().to_vec();
        let m = tape.reshape(self.sites[j], &[s[0], 4 * s[3]])?;
        let sp = tape.svd_split_as(m, policy.gauge(), Some(SplitForm::Right))?;
        self.discarded_weight += sp.discarded_weight;
        self.sites[j] = tape.reshape(sp.right, &[sp.kept, 2, 2, s[3]])?;
        self.sites[j - 1] = tape.contract(self.sites[j - 1], sp.left, &[(3, 0)])?;
        self.center -= 1;
        Ok(())
    }

    fn move_center(&mut self, tape: &mut GradTape, to: usize, policy: &TruncationPolicy) -> Result<()> {
        while self.center < to {
            self.shift_right(tape, policy)?;
        }
        while self.center > to {
            self.shift_left(tape, policy)?;
        }
        Ok(())
    }

    /// `M -> G^+ M G` on sites `(s, s + 1)` for a 4x4 unitary `gate`.
    fn conjugate_gate(
        &mut self,
        tape: &mut GradTape,
        gate: Var,
        gate_conj: Var,
        s: usize,
        rightward: bool,
        policy: &TruncationPolicy,
    ) -> Result<()> {
        let target = if rightward { s } else { s + 1 };
        if self.center != s && self.center != s + 1 {
            self.move_center(tape, target, policy)?;
        }
        let l = tape.value(self.sites[s]).shape()[0];
        let r = tape.value(self.sites[s + 1]).shape()[3];
        // [l, o1, i1, o2, i2, r]
        let theta = tape.contract(self.sites[s], self.sites[s + 1], &[(3, 0)])?;
        // ket legs: [l, o1, o2, r, i1', i2']
        let ket = tape.contract(theta, gate, &[(2, 0), (4, 1)])?;
        // bra legs: [l, r, i1', i2', o1', o2']
        let both = tape.contract(ket, gate_conj, &[(1, 0), (2, 1)])?;
        let block = tape.permute(both, &[0, 4, 2, 5, 3, 1])?;
        let mat = tape.reshape(block, &[l * 4, 4 * r])?;
        let form = if rightward { SplitForm::Left } else { SplitForm::Right };
        let sp = tape.svd_split_as(mat, policy.split(), Some(form))?;
        self.discarded_weight += sp.discarded_weight;
        self.sites[s] = tape.reshape(sp.left, &[l, 2, 2, sp.kept])?;
        self.sites[s + 1] = tape.reshape(sp.right, &[sp.kept, 2, 2, r])?;
        self.center = if rightward { s + 1 } else { s };
        Ok(())
    }
}

/// `U^+ M U` on the tape for gate unitaries already recorded as 4x4
/// variables, one per circuit placement.
pub fn conjugate_on_tape(
    tape: &mut GradTape,
    mpo: TapeMpo,
    circuit: &BrickwallCircuit,
    unitaries: &[Var],
    policy: &TruncationPolicy,
) -> Result<TapeMpo> {
    policy.validate()?;
    if mpo.sites.len() != circuit.sites() {
        return Err(Error::Shape(format!(
            "operator on {} sites, circuit on {}",
            mpo.sites.len(),
            circuit.sites()
        )));
    }
    if unitaries.len() != circuit.num_gates() {
        return Err(Error::Shape(format!(
            "{} gate variables for {} placements",
            unitaries.len(),
            circuit.num_gates()
        )));
    }
    let mut mpo = mpo;
    // U = L_last ... L_first, so U^+ M U peels the last layer first
    for (idx, p, rightward) in sweep_order(circuit, true) {
        let g = tape.reshape(unitaries[idx], &[2, 2, 2, 2])?;
        let gc = tape.conj(g);
        mpo.conjugate_gate(tape, g, gc, p.site, rightward, policy)?;
    }
    Ok(mpo)
}

/// Record the unitary of every gate on the tape as the polar factor of a
/// latent leaf. Returns the latent leaves and the unitaries.
pub fn record_gates(tape: &mut GradTape, circuit: &BrickwallCircuit, trainable: bool) -> Result<(Vec<Var>, Vec<Var>)> {
    let mut latents = Vec::with_capacity(circuit.num_gates());
    let mut unitaries = Vec::with_capacity(circuit.num_gates());
    for g in circuit.gates() {
        let leaf = tape.leaf(g.latent().clone().with_grad(trainable));
        let (u, _) = tape.polar(leaf)?;
        latents.push(leaf);
        unitaries.push(u);
    }
    Ok((latents, unitaries))
}

/// `U^+ M U` as an MPO, with the cumulative discarded weight.
///
/// Conjugation leaves the trace unchanged but truncation does not, so the
/// trace the truncations leaked is removed again by subtracting a multiple of
/// the identity. The result has bonds of at most `chi_t + 1`.
pub fn conjugate_mpo(
    h: &HamiltonianMpo,
    circuit: &BrickwallCircuit,
    policy: &TruncationPolicy,
) -> Result<(HamiltonianMpo, f64)> {
    policy.validate()?;
    let mut tape = GradTape::new();
    let (_, unitaries) = record_gates(&mut tape, circuit, false)?;
    let start = TapeMpo::constant(&mut tape, h, policy)?;
    let out = conjugate_on_tape(&mut tape, start, circuit, &unitaries, policy)?;
    let evolved = out.values(&tape)?;
    let leaked = evolved.trace() - h.trace();
    let n = h.sites();
    let fixed = if leaked == C64::new(0.0, 0.0) {
        evolved
    } else {
        let shift = HamiltonianMpo::scaled_identity(n, -leaked / 2f64.powi(n as i32));
        evolved.direct_sum(&shift)?
    };
    Ok((fixed, out.discarded_weight))
}

/// `Tr(M)` of an operator on the tape.
pub fn trace_on_tape(tape: &mut GradTape, mpo: &[Var]) -> Result<Var> {
    let id = tape.constant(DenseTensor::identity(2));
    let mut env = tape.constant(DenseTensor::from_real(vec![1], &[1.0])?);
    for &m in mpo {
        // [l, r]
        let t = tape.contract(m, id, &[(1, 0), (2, 1)])?;
        env = tape.contract(env, t, &[(0, 0)])?;
    }
    tape.reshape(env, &[])
}

/// `sum_r E_r` on the tape.
pub fn entry_sum_on_tape(tape: &mut GradTape, mps: &[Var]) -> Result<Var> {
    let ones = tape.constant(DenseTensor::from_real(vec![2], &[1.0, 1.0])?);
    let mut env = tape.constant(DenseTensor::from_real(vec![1], &[1.0])?);
    for &a in mps {
        let t = tape.contract(a, ones, &[(1, 0)])?;
        env = tape.contract(env, t, &[(0, 0)])?;
    }
    tape.reshape(env, &[])
}

/// `sum_r <r|M|r> E_r` on the tape: the operator's diagonal is selected by a
/// three-leg delta and contracted against the spectrum MPS site by site.
pub fn diagonal_overlap_on_tape(tape: &mut GradTape, mpo: &[Var], mps: &[Var]) -> Result<Var> {
    if mpo.len() != mps.len() {
        return Err(Error::Shape(format!(
            "operator on {} sites, spectrum on {}",
            mpo.len(),
            mps.len()
        )));
    }
    let delta = tape.constant(DenseTensor::from_fn(vec![2, 2, 2], |ix| {
        if ix[0] == ix[1] && ix[1] == ix[2] {
            C64::new(1.0, 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    }));
    let mut env = tape.constant(DenseTensor::from_real(vec![1, 1], &[1.0])?);
    for (&m, &a) in mpo.iter().zip(mps) {
        // [l, r, p]
        let diag = tape.contract(m, delta, &[(1, 0), (2, 1)])?;
        // env [lm, la] -> [la, rm, p]
        let x = tape.contract(env, diag, &[(0, 0)])?;
        // -> [rm, ra]
        env = tape.contract(x, a, &[(0, 0), (2, 1)])?;
    }
    tape.reshape(env, &[])
}

/// `sum_r A[r] B[r]` on the tape.
pub fn inner_product_on_tape(tape: &mut GradTape, a: &[Var], b: &[Var]) -> Result<Var> {
    let mut env = tape.constant(DenseTensor::from_real(vec![1, 1], &[1.0])?);
    for (&x, &y) in a.iter().zip(b) {
        let t = tape.contract(env, x, &[(0, 0)])?;
        env = tape.contract(t, y, &[(0, 0), (1, 1)])?;
    }
    tape.reshape(env, &[])
}

/// `sum_r <r|M|r> E_r`, linear in `N`.
pub fn mpo_diagonal_overlap(m: &HamiltonianMpo, s: &SpectrumMps) -> Result<C64> {
    let mut tape = GradTape::new();
    let mv: Vec<Var> = m.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let sv: Vec<Var> = s.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let out = diagonal_overlap_on_tape(&mut tape, &mv, &sv)?;
    Ok(tape.value(out).data()[0])
}

/// A pure state as an MPS with sites `[left, physical, right]` and a single
/// orthogonality center.
#[derive(Clone, Debug)]
pub struct MpsState {
    tensors: Vec<DenseTensor>,
    center: usize,
    discarded_weight: f64,
}

impl MpsState {
    pub fn product(bits: &[u8]) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Shape("a state needs at least one site".into()));
        }
        bits_ok(bits, bits.len())?;
        let tensors = bits
            .iter()
            .map(|&b| {
                let mut t = DenseTensor::zeros(vec![1, 2, 1]);
                t.set(&[0, b as usize, 0], C64::new(1.0, 0.0));
                t
            })
            .collect();
        Ok(Self {
            tensors,
            center: 0,
            discarded_weight: 0.0,
        })
    }

    pub fn sites(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensors(&self) -> &[DenseTensor] {
        &self.tensors
    }

    pub fn bond_dims(&self) -> Vec<usize> {
        self.tensors[..self.sites() - 1]
            .iter()
            .map(|t| t.shape()[2])
            .collect()
    }

    /// Sum of the relative weights dropped by every truncation so far.
    pub fn discarded_weight(&self) -> f64 {
        self.discarded_weight
    }

    /// `<psi|psi>^(1/2)` by a full transfer-matrix contraction.
    pub fn norm(&self) -> f64 {
        let mut env = DenseTensor::from_real(vec![1, 1], &[1.0]).unwrap();
        for t in &self.tensors {
            let x = contract(&env, &t.conj(), &[(0, 0)]).unwrap();
            env = contract(&x, t, &[(0, 0), (1, 1)]).unwrap();
        }
        env.data()[0].re.max(0.0).sqrt()
    }

    fn shift_right(&mut self) -> Result<()> {
        let j = self.center;
        let split = svd_split(&self.tensors[j], &[0, 1], usize::MAX, 0.0)?;
        if split.degenerate {
            return Err(Error::Decomposition("state vanishes identically".into()));
        }
        let k = split.singulars.len();
        let mut sv = split.right.clone();
        let cols = sv.len() / k;
        for (idx, z) in sv.data_mut().iter_mut().enumerate() {
            *z *= split.singulars[idx / cols];
        }
        self.tensors[j] = split.left;
        self.tensors[j + 1] = contract(&sv, &self.tensors[j + 1], &[(1, 0)])?;
        self.center += 1;
        Ok(())
    }

    fn shift_left(&mut self) -> Result<()> {
        let j = self.center;
        let split = svd_split(&self.tensors[j], &[0], usize::MAX, 0.0)?;
        if split.degenerate {
            return Err(Error::Decomposition("state vanishes identically".into()));
        }
        let k = split.singulars.len();
        let mut us = split.left.clone();
        for (idx, z) in us.data_mut().iter_mut().enumerate() {
            *z *= split.singulars[idx % k];
        }
        self.tensors[j] = split.right;
        self.tensors[j - 1] = contract(&self.tensors[j - 1], &us, &[(2, 0)])?;
        self.center -= 1;
        Ok(())
    }

    fn move_center(&mut self, to: usize) -> Result<()> {
        while self.center < to {
            self.shift_right()?;
        }
        while self.center > to {
            self.shift_left()?;
        }
        Ok(())
    }

    /// Apply a 4x4 gate on `(s, s + 1)`, truncate, renormalize, and leave the
    /// center on the side given by `rightward`.
    pub fn apply_gate(
        &mut self,
        gate: &DenseTensor,
        s: usize,
        rightward: bool,
        policy: &TruncationPolicy,
    ) -> Result<()> {
        if s + 1 >= self.sites() {
            return Err(Error::Shape(format!("no bond at site {s}")));
        }
        if self.center != s && self.center != s + 1 {
            self.move_center(if rightward { s } else { s + 1 })?;
        }
        let theta = contract(&self.tensors[s], &self.tensors[s + 1], &[(2, 0)])?;
        let g = gate.reshape(&[2, 2, 2, 2])?;
        // [o1, o2, l, r] -> [l, o1, o2, r]
        let out = contract(&g, &theta, &[(2, 1), (3, 2)])?.permute(&[2, 0, 1, 3])?;
        let split = svd_split(&out, &[0, 1], policy.chi_t, policy.cutoff)?;
        if split.degenerate {
            return Err(Error::Decomposition("state vanishes identically".into()));
        }
        self.discarded_weight += split.discarded_weight;
        let norm: f64 = split.singulars.iter().map(|x| x * x).sum::<f64>().sqrt();
        let s_vals: Vec<f64> = split.singulars.iter().map(|x| x / norm).collect();
        let k = s_vals.len();
        let (mut left, mut right) = (split.left, split.right);
        if rightward {
            let cols = right.len() / k;
            for (idx, z) in right.data_mut().iter_mut().enumerate() {
                *z *= s_vals[idx / cols];
            }
            self.center = s + 1;
        } else {
            for (idx, z) in left.data_mut().iter_mut().enumerate() {
                *z *= s_vals[idx % k];
            }
            self.center = s;
        }
        self.tensors[s] = left;
        self.tensors[s + 1] = right;
        Ok(())
    }

    /// Schmidt coefficients across the bond between sites `cut - 1` and
    /// `cut`, in descending order.
    pub fn schmidt_values(&self, cut: usize) -> Result<Vec<f64>> {
        let n = self.sites();
        if cut == 0 || cut >= n {
            return Err(Error::Shape(format!("cut {cut} outside 1..{n}")));
        }
        let mut st = self.clone();
        st.move_center(cut - 1)?;
        let split = svd_split(&st.tensors[cut - 1], &[0, 1], usize::MAX, 0.0)?;
        Ok(split.singulars)
    }

    /// Dense amplitudes with the first site as the most significant bit.
    /// Guarded at 24 sites.
    pub fn to_vector(&self) -> Result<Vec<C64>> {
        let n = self.sites();
        if n > 24 {
            return Err(Error::SizeGuard {
                what: "dense state",
                n,
                max: 24,
            });
        }
        let mut acc = self.tensors[0].clone();
        let mut dim = 2usize;
        for t in &self.tensors[1..] {
            let r = t.shape()[2];
            acc = contract(&acc, t, &[(2, 0)])?.reshape(&[1, dim * 2, r])?;
            dim *= 2;
        }
        Ok(acc.into_data())
    }
}

/// `U |bits>` as a normalized MPS, gate by gate with truncation.
pub fn evolve_product_state(
    bits: &[u8],
    circuit: &BrickwallCircuit,
    policy: &TruncationPolicy,
) -> Result<MpsState> {
    policy.validate()?;
    bits_ok(bits, circuit.sites())?;
    let mut state = MpsState::product(bits)?;
    for (idx, p, rightward) in sweep_order(circuit, false) {
        state.apply_gate(circuit.gates()[idx].unitary(), p.site, rightward, policy)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{build_brickwall, InitMode};
    use crate::hamiltonian::{build_dense, build_ising_mpo, spin_z, IsingSpec};
    use crate::spectrum::index_to_bits;
    use crate::testutil::bell_gate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn sum_sz(n: usize) -> HamiltonianMpo {
        let z = spin_z();
        HamiltonianMpo::nearest_neighbor(None, &vec![z; n]).unwrap()
    }

    #[test]
    fn identity_circuit_leaves_operator_unchanged() {
        let spec = IsingSpec::disordered(6, 0.5, 0.5, 1);
        let h = build_ising_mpo(&spec).unwrap();
        let c = build_brickwall(6, 3, InitMode::Identity, &mut rng(0)).unwrap();
        let (out, _) = conjugate_mpo(&h, &c, &TruncationPolicy::new(64)).unwrap();
        assert!(out.to_dense().unwrap().max_abs_diff(&build_dense(&spec).unwrap()) < 1e-12);
    }

    #[test]
    fn x_gates_flip_sz() {
        let x = DenseTensor::from_real(vec![2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let xx = x.kron(&x).unwrap();
        let mut c = build_brickwall(4, 1, InitMode::Identity, &mut rng(0)).unwrap();
        for i in 0..c.num_gates() {
            c.set_gate(i, xx.clone()).unwrap();
        }
        let m = sum_sz(4);
        let (out, _) = conjugate_mpo(&m, &c, &TruncationPolicy::new(16)).unwrap();
        let expect = m.to_dense().unwrap().scale(C64::new(-1.0, 0.0));
        assert!(out.to_dense().unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn full_bond_conjugation_matches_dense() {
        let spec = IsingSpec::disordered(8, 0.5, 0.3, 2);
        let h = build_ising_mpo(&spec).unwrap();
        let c = build_brickwall(8, 4, InitMode::Random, &mut rng(3)).unwrap();
        let (out, w) = conjugate_mpo(&h, &c, &TruncationPolicy::new(256)).unwrap();
        let u = c.to_dense().unwrap();
        let hd = build_dense(&spec).unwrap();
        let expect = u.dagger().unwrap().matmul(&hd).unwrap().matmul(&u).unwrap();
        assert!(out.to_dense().unwrap().max_abs_diff(&expect) < 1e-8);
        assert!(w < 1e-20);
    }

    #[test]
    fn truncated_conjugation_keeps_trace() {
        let spec = IsingSpec::clean(10, 0.7);
        let h = build_ising_mpo(&spec).unwrap();
        let c = build_brickwall(10, 6, InitMode::Random, &mut rng(4)).unwrap();
        for chi in [4, 8, 16] {
            let (out, _) = conjugate_mpo(&h, &c, &TruncationPolicy::new(chi)).unwrap();
            assert!(out.trace().norm() < 1e-8, "chi {chi}: {}", out.trace());
            assert!(out.max_bond() <= chi + 1);
        }
    }

    #[test]
    fn trace_correction_never_increases_the_error() {
        let spec = IsingSpec::clean(8, 0.5);
        let hd = build_dense(&spec).unwrap();
        let c = build_brickwall(8, 6, InitMode::Random, &mut rng(12)).unwrap();
        let u = c.to_dense().unwrap();
        let exact = u.dagger().unwrap().matmul(&hd).unwrap().matmul(&u).unwrap();
        let policy = TruncationPolicy::new(8);
        let mut tape = GradTape::new();
        let (_, us) = record_gates(&mut tape, &c, false).unwrap();
        let start = TapeMpo::constant(&mut tape, &build_ising_mpo(&spec).unwrap(), &policy).unwrap();
        let raw = conjugate_on_tape(&mut tape, start, &c, &us, &policy).unwrap();
        let raw = raw.values(&tape).unwrap().to_dense().unwrap();
        let (fixed, _) = conjugate_mpo(&build_ising_mpo(&spec).unwrap(), &c, &policy).unwrap();
        let e_raw = raw.sub(&exact).unwrap().norm();
        let e_fixed = fixed.to_dense().unwrap().sub(&exact).unwrap().norm();
        assert!(e_fixed <= e_raw + 1e-12);
    }

    #[test]
    fn tape_trace_and_entry_sum() {
        let mut tape = GradTape::new();
        let m = build_ising_mpo(&IsingSpec::disordered(5, 0.5, 1.0, 3)).unwrap();
        let mv: Vec<Var> = m.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let tr = trace_on_tape(&mut tape, &mv).unwrap();
        assert!(tape.value(tr).data()[0].norm() < 1e-12);
        let id: Vec<Var> = HamiltonianMpo::identity(5).tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let tr = trace_on_tape(&mut tape, &id).unwrap();
        assert!((tape.value(tr).data()[0].re - 32.0).abs() < 1e-12);
        let s = SpectrumMps::init_random(5, 3, 0.5, &mut rng(13)).unwrap();
        let sv: Vec<Var> = s.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let total = entry_sum_on_tape(&mut tape, &sv).unwrap();
        let brute: f64 = s.enumerate().unwrap().iter().sum();
        assert!((tape.value(total).data()[0].re - brute).abs() < 1e-12);
    }

    #[test]
    fn discarded_weight_shrinks_with_bond() {
        let h = build_ising_mpo(&IsingSpec::clean(8, 0.5)).unwrap();
        let c = build_brickwall(8, 4, InitMode::Random, &mut rng(5)).unwrap();
        let mut last = f64::INFINITY;
        for chi in [2, 4, 8, 16, 32, 64] {
            let (_, w) = conjugate_mpo(&h, &c, &TruncationPolicy::new(chi)).unwrap();
            assert!(w >= 0.0);
            assert!(w <= last * (1.0 + 1e-9) + 1e-15, "chi {chi}: {w} > {last}");
            last = w;
        }
    }

    #[test]
    fn zero_bond_cap_is_a_policy_error() {
        let h = build_ising_mpo(&IsingSpec::clean(4, 0.5)).unwrap();
        let c = build_brickwall(4, 2, InitMode::Identity, &mut rng(0)).unwrap();
        assert!(matches!(
            conjugate_mpo(&h, &c, &TruncationPolicy::new(0)),
            Err(Error::Policy(_))
        ));
    }

    #[test]
    fn diagonal_overlap_with_identity_sums_entries() {
        let s = SpectrumMps::init_random(6, 4, 0.5, &mut rng(6)).unwrap();
        let total: f64 = s.enumerate().unwrap().iter().sum();
        let v = mpo_diagonal_overlap(&HamiltonianMpo::identity(6), &s).unwrap();
        assert!((v.re - total).abs() < 1e-12 && v.im.abs() < 1e-14);
    }

    #[test]
    fn diagonal_overlap_two_sites_by_hand() {
        let d = [1.0, -2.0, 0.5, 3.0];
        let e = [0.25, 1.0, -1.0, 2.0];
        let mut op = DenseTensor::zeros(vec![4, 4]);
        for (i, x) in d.iter().enumerate() {
            op.set(&[i, i], C64::new(*x, 0.0));
        }
        let m = HamiltonianMpo::from_dense(&op, 2).unwrap();
        let (s, _) = SpectrumMps::fit_from_dense(&e, 2).unwrap();
        let v = mpo_diagonal_overlap(&m, &s).unwrap();
        assert!((v.re - (0.25 - 2.0 - 0.5 + 6.0)).abs() < 1e-12);
    }

    #[test]
    fn diagonal_overlap_matches_dense() {
        let spec = IsingSpec::disordered(8, 0.5, 1.0, 7);
        let c = build_brickwall(8, 3, InitMode::Random, &mut rng(8)).unwrap();
        let (m, _) = conjugate_mpo(&build_ising_mpo(&spec).unwrap(), &c, &TruncationPolicy::new(256)).unwrap();
        let s = SpectrumMps::init_random(8, 4, 0.5, &mut rng(9)).unwrap();
        let md = m.to_dense().unwrap();
        let e = s.enumerate().unwrap();
        let brute: C64 = e.iter().enumerate().map(|(i, x)| md.get(&[i, i]) * x).sum();
        let v = mpo_diagonal_overlap(&m, &s).unwrap();
        assert!((v - brute).norm() < 1e-10);
    }

    #[test]
    fn identity_circuit_keeps_product_state() {
        let c = build_brickwall(4, 3, InitMode::Identity, &mut rng(0)).unwrap();
        let st = evolve_product_state(&[0, 1, 1, 0], &c, &TruncationPolicy::new(16)).unwrap();
        let v = st.to_vector().unwrap();
        assert!((v[0b0110] - C64::new(1.0, 0.0)).norm() < 1e-14);
        for cut in 1..4 {
            assert!((st.schmidt_values(cut).unwrap()[0] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn bell_gate_entangles_the_middle_bond() {
        let mut c = build_brickwall(4, 2, InitMode::Identity, &mut rng(0)).unwrap();
        let i = c.gate_index(1, 1).unwrap();
        c.set_gate(i, bell_gate()).unwrap();
        let st = evolve_product_state(&[0, 0, 0, 0], &c, &TruncationPolicy::new(4)).unwrap();
        let s = st.schmidt_values(2).unwrap();
        assert_eq!(s.len(), 2);
        for x in s {
            assert!((x * x - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn full_bond_state_matches_dense() {
        let n = 10;
        let c = build_brickwall(n, 5, InitMode::Random, &mut rng(10)).unwrap();
        for idx in [0usize, 333, 1023] {
            let bits = index_to_bits(idx, n);
            let st = evolve_product_state(&bits, &c, &TruncationPolicy::new(32)).unwrap();
            let mut e = vec![C64::new(0.0, 0.0); 1 << n];
            e[idx] = C64::new(1.0, 0.0);
            let dense = c.apply_to_vector(&e).unwrap();
            let ov: C64 = dense.iter().zip(st.to_vector().unwrap()).map(|(a, b)| a.conj() * b).sum();
            assert!(ov.norm_sqr() >= 1.0 - 1e-10);
            assert!((st.norm() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn truncated_state_stays_normalized() {
        let c = build_brickwall(12, 6, InitMode::Random, &mut rng(11)).unwrap();
        let st = evolve_product_state(&index_to_bits(77, 12), &c, &TruncationPolicy::new(4)).unwrap();
        assert!((st.norm() - 1.0).abs() < 1e-10);
        assert!(st.discarded_weight() > 0.0);
        assert!(st.bond_dims().iter().all(|&b| b <= 4));
    }
}
