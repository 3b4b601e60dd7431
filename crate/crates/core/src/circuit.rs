//! Brick-wall circuits of two-site gates parameterized by latent matrices.
//!
//! Each gate is the unitary polar factor of an unconstrained complex 4x4
//! latent matrix. Layer `l` (counting from zero) places gates on sites
//! `(s, s + 1)` for every `s` with `s % 2 == l % 2`. Gate matrices act on the
//! two-site basis `|a b>` with the left site `a` as the more significant bit.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::{evolve_product_state, MpsState, TruncationPolicy};
use crate::tensor::{polar_decompose, DenseTensor, C64, ZERO};

/// Largest chain for which the full circuit matrix may be built.
pub const DENSE_MAX_SITES: usize = 12;

/// Largest chain for which state vectors may be evolved densely.
pub const STATE_MAX_SITES: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitMode {
    Identity,
    /// Identity plus complex Gaussian noise of the given amplitude.
    NearIdentity { epsilon: f64 },
    /// Complex Gaussian latent, whose polar factor is Haar distributed.
    Random,
}

impl Default for InitMode {
    fn default() -> Self {
        InitMode::NearIdentity { epsilon: 0.01 }
    }
}

/// A trainable gate: the latent matrix and its cached unitary projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DenseTensor", into = "DenseTensor")]
pub struct LatentGate {
    latent: DenseTensor,
    unitary: DenseTensor,
    regularized: bool,
}

impl LatentGate {
    pub fn new(latent: DenseTensor) -> Result<Self> {
        if latent.shape() != [4, 4] {
            return Err(Error::Shape(format!(
                "gate latents are 4x4, got {:?}",
                latent.shape()
            )));
        }
        let factor = project_to_unitary(&latent)?;
        Ok(Self {
            latent: latent.with_grad(true),
            unitary: factor.0,
            regularized: factor.1,
        })
    }

    pub fn latent(&self) -> &DenseTensor {
        &self.latent
    }

    pub fn unitary(&self) -> &DenseTensor {
        &self.unitary
    }

    /// Whether the latent was singular and had to be shifted before projection.
    pub fn regularized(&self) -> bool {
        self.regularized
    }

    pub fn set_latent(&mut self, latent: DenseTensor) -> Result<()> {
        *self = Self::new(latent)?;
        Ok(())
    }
}

impl TryFrom<DenseTensor> for LatentGate {
    type Error = Error;

    fn try_from(latent: DenseTensor) -> Result<Self> {
        Self::new(latent)
    }
}

impl From<LatentGate> for DenseTensor {
    fn from(g: LatentGate) -> Self {
        g.latent
    }
}

/// Nearest unitary to `latent` in Frobenius norm, and whether the latent was
/// singular and had `1e-12 I` added first.
pub fn project_to_unitary(latent: &DenseTensor) -> Result<(DenseTensor, bool)> {
    let f = polar_decompose(latent)?;
    Ok((f.unitary, f.regularized))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub layer: usize,
    /// Left site of the pair `(site, site + 1)`.
    pub site: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrickwallCircuit {
    sites: usize,
    layers: usize,
    placements: Vec<Placement>,
    gates: Vec<LatentGate>,
}

/// Gate positions of a brick wall, layer by layer, left to right.
pub fn brickwall_layout(n: usize, layers: usize) -> Vec<Placement> {
    (0..layers)
        .flat_map(|layer| {
            (layer % 2..n.saturating_sub(1))
                .step_by(2)
                .map(move |site| Placement { layer, site })
        })
        .collect()
}

fn near_identity(epsilon: f64, rng: &mut impl Rng) -> DenseTensor {
    let mut t = DenseTensor::identity(4);
    for z in t.data_mut() {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        *z += C64::new(re, im) * epsilon;
    }
    t
}

pub fn build_brickwall(
    n: usize,
    layers: usize,
    init: InitMode,
    rng: &mut impl Rng,
) -> Result<BrickwallCircuit> {
    if n < 2 {
        return Err(Error::Spec(format!("need at least 2 sites, got {n}")));
    }
    if layers == 0 {
        return Err(Error::Spec("need at least one layer".into()));
    }
    let placements = brickwall_layout(n, layers);
    let gates = placements
        .iter()
        .map(|_| {
            let latent = match init {
                InitMode::Identity => DenseTensor::identity(4),
                InitMode::NearIdentity { epsilon } => near_identity(epsilon, rng),
                InitMode::Random => {
                    let mut t = near_identity(1.0, rng);
                    for k in 0..4 {
                        t.data_mut()[k * 5] -= 1.0;
                    }
                    t
                }
            };
            LatentGate::new(latent)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BrickwallCircuit {
        sites: n,
        layers,
        placements,
        gates,
    })
}

/// Apply a 4x4 gate to sites `(site, site + 1)` of a state vector in place.
pub fn apply_gate_to_vector(state: &mut [C64], n: usize, site: usize, gate: &DenseTensor) {
    let hi = 1usize << (n - 1 - site);
    let lo = hi >> 1;
    let g = gate.data();
    for base in 0..state.len() {
        if base & (hi | lo) != 0 {
            continue;
        }
        let idx = [base, base | lo, base | hi, base | hi | lo];
        let v = idx.map(|i| state[i]);
        for (row, &i) in idx.iter().enumerate() {
            state[i] = (0..4).map(|c| g[row * 4 + c] * v[c]).sum();
        }
    }
}

impl BrickwallCircuit {
    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn placements(&self) -> &[Placement] {
        &self.placements
    }

    pub fn gates(&self) -> &[LatentGate] {
        &self.gates
    }

    pub fn num_gates(&self) -> usize {
        self.gates.len()
    }

    pub fn gate_index(&self, layer: usize, site: usize) -> Option<usize> {
        self.placements
            .iter()
            .position(|p| p.layer == layer && p.site == site)
    }

    pub fn set_gate(&mut self, index: usize, latent: DenseTensor) -> Result<()> {
        let count = self.gates.len();
        let gate = self
            .gates
            .get_mut(index)
            .ok_or_else(|| Error::Shape(format!("gate {index} out of range ({count} gates)")))?;
        gate.set_latent(latent)
    }

    pub fn any_regularized(&self) -> bool {
        self.gates.iter().any(LatentGate::regularized)
    }

    /// Largest `|G^+ G - I|` entry over all gates.
    pub fn unitarity_error(&self) -> f64 {
        let id = DenseTensor::identity(4);
        self.gates
            .iter()
            .map(|g| {
                let u = g.unitary();
                u.dagger().unwrap().matmul(u).unwrap().max_abs_diff(&id)
            })
            .fold(0.0, f64::max)
    }

    /// `U |psi>` for a dense state vector. Guarded at 24 sites.
    pub fn apply_to_vector(&self, state: &[C64]) -> Result<Vec<C64>> {
        let n = self.sites;
        if n > STATE_MAX_SITES {
            return Err(Error::SizeGuard {
                what: "dense state evolution",
                n,
                max: STATE_MAX_SITES,
            });
        }
        if state.len() != 1 << n {
            return Err(Error::Shape(format!(
                "state of length {} for {n} sites",
                state.len()
            )));
        }
        let mut out = state.to_vec();
        for (p, g) in self.placements.iter().zip(&self.gates) {
            apply_gate_to_vector(&mut out, n, p.site, g.unitary());
        }
        Ok(out)
    }

    /// The full `2^N x 2^N` circuit matrix. Guarded at 12 sites.
    pub fn to_dense(&self) -> Result<DenseTensor> {
        let n = self.sites;
        if n > DENSE_MAX_SITES {
            return Err(Error::SizeGuard {
                what: "dense circuit",
                n,
                max: DENSE_MAX_SITES,
            });
        }
        let dim = 1usize << n;
        let columns: Vec<Vec<C64>> = (0..dim)
            .into_par_iter()
            .map(|j| {
                let mut e = vec![ZERO; dim];
                e[j] = C64::new(1.0, 0.0);
                self.apply_to_vector(&e).expect("guarded size")
            })
            .collect();
        Ok(DenseTensor::from_fn(vec![dim, dim], |ix| columns[ix[1]][ix[0]]))
    }

    /// `U |bits>` as an MPS, evolved gate by gate with truncation.
    pub fn eigenstate_mps(&self, bits: &[u8], policy: &TruncationPolicy) -> Result<MpsState> {
        evolve_product_state(bits, self, policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{bell_gate, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn projection_fixes_unitaries() {
        let g = bell_gate();
        let (u, flagged) = project_to_unitary(&g).unwrap();
        assert!(!flagged);
        assert!(u.max_abs_diff(&g) < 1e-12);
    }

    #[test]
    fn projection_of_scaled_identity() {
        let (u, _) = project_to_unitary(&DenseTensor::identity(4).scale(C64::new(2.0, 0.0))).unwrap();
        assert!(u.max_abs_diff(&DenseTensor::identity(4)) < 1e-12);
    }

    #[test]
    fn random_latents_project_to_unitaries() {
        let mut r = rng(1);
        for _ in 0..20 {
            let (u, _) = project_to_unitary(&random_tensor(vec![4, 4], &mut r)).unwrap();
            let err = u.dagger().unwrap().matmul(&u).unwrap().max_abs_diff(&DenseTensor::identity(4));
            assert!(err < 1e-10);
        }
    }

    #[test]
    fn singular_latent_is_flagged() {
        let g = LatentGate::new(DenseTensor::zeros(vec![4, 4])).unwrap();
        assert!(g.regularized());
    }

    #[test]
    fn layout_counts() {
        let c = build_brickwall(4, 2, InitMode::Identity, &mut rng(0)).unwrap();
        let sites: Vec<(usize, usize)> = c.placements().iter().map(|p| (p.layer, p.site)).collect();
        assert_eq!(sites, vec![(0, 0), (0, 2), (1, 1)]);
        let c = build_brickwall(7, 3, InitMode::Identity, &mut rng(0)).unwrap();
        assert_eq!(c.num_gates(), 3 + 3 + 3);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(build_brickwall(1, 2, InitMode::Identity, &mut rng(0)).is_err());
        assert!(build_brickwall(4, 0, InitMode::Identity, &mut rng(0)).is_err());
    }

    #[test]
    fn identity_circuit_is_identity() {
        let c = build_brickwall(5, 4, InitMode::Identity, &mut rng(0)).unwrap();
        assert!(c.to_dense().unwrap().max_abs_diff(&DenseTensor::identity(32)) < 1e-14);
    }

    #[test]
    fn single_gate_circuit_is_the_gate() {
        let mut c = build_brickwall(2, 1, InitMode::Identity, &mut rng(0)).unwrap();
        c.set_gate(0, bell_gate()).unwrap();
        assert!(c.to_dense().unwrap().max_abs_diff(&bell_gate()) < 1e-12);
    }

    #[test]
    fn dense_random_circuit_is_unitary() {
        let c = build_brickwall(8, 4, InitMode::Random, &mut rng(2)).unwrap();
        let u = c.to_dense().unwrap();
        let err = u.dagger().unwrap().matmul(&u).unwrap().max_abs_diff(&DenseTensor::identity(256));
        assert!(err < 1e-10);
        assert!(c.unitarity_error() < 1e-12);
    }

    #[test]
    fn dense_matches_kron_composition() {
        // independent oracle: each layer as a Kronecker product of gates
        let n = 5;
        let c = build_brickwall(n, 3, InitMode::Random, &mut rng(3)).unwrap();
        let mut total = DenseTensor::identity(1 << n);
        for layer in 0..3 {
            let mut op = DenseTensor::identity(1);
            let mut site = 0;
            while site < n {
                match c.gate_index(layer, site) {
                    Some(i) => {
                        op = op.kron(c.gates()[i].unitary()).unwrap();
                        site += 2;
                    }
                    None => {
                        op = op.kron(&DenseTensor::identity(2)).unwrap();
                        site += 1;
                    }
                }
            }
            total = op.matmul(&total).unwrap();
        }
        assert!(c.to_dense().unwrap().max_abs_diff(&total) < 1e-12);
    }

    #[test]
    fn near_identity_keeps_fidelity() {
        let c = build_brickwall(6, 6, InitMode::default(), &mut rng(4)).unwrap();
        let mut r = rng(5);
        let psi: Vec<C64> = (0..64).map(|_| C64::new(r.random::<f64>() - 0.5, r.random::<f64>() - 0.5)).collect();
        let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        let out = c.apply_to_vector(&psi).unwrap();
        let overlap: C64 = psi.iter().zip(&out).map(|(a, b)| a.conj() * b).sum();
        assert!(overlap.norm_sqr() / (norm * norm) >= 0.99);
    }

    #[test]
    fn distinct_bitstrings_map_to_orthogonal_states() {
        let c = build_brickwall(6, 4, InitMode::Random, &mut rng(6)).unwrap();
        let u = c.to_dense().unwrap();
        for (a, b) in [(0usize, 1usize), (5, 40), (63, 17)] {
            let ov: C64 = (0..64).map(|i| u.get(&[i, a]).conj() * u.get(&[i, b])).sum();
            assert!(ov.norm() <= 1e-8);
        }
    }

    #[test]
    fn serde_round_trip_keeps_latents() {
        let c = build_brickwall(4, 3, InitMode::Random, &mut rng(7)).unwrap();
        let json = serde_json::to_string(&c).unwrap();
        let back: BrickwallCircuit = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }
}
