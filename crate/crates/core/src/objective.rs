//! The training loss: the logarithmic Schmidt distance between the
//! Hamiltonian and the ansatz `U diag(E) U^+`,
//!
//! ```text
//! F = log2( Tr(H H^+) + sum_r E_r^2 - 2 Tr(H H~^+) ) - N
//! ```
//!
//! with the cross term evaluated as `sum_r E_r <r| U^+ H U |r>`.

use serde::{Deserialize, Serialize};

use crate::circuit::BrickwallCircuit;
use crate::error::{Error, Result};
use crate::evolution::{
    conjugate_on_tape, diagonal_overlap_on_tape, entry_sum_on_tape, inner_product_on_tape,
    record_gates, trace_on_tape, TapeMpo, TruncationPolicy,
};
use crate::hamiltonian::{mpo_trace_product, HamiltonianMpo};
use crate::spectrum::SpectrumMps;
use crate::tensor::{DenseTensor, GradTape, Var, C64};

/// Imaginary residue of the cross term above which a warning is logged.
pub const CROSS_IMAG_WARN: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `Tr(H H^+)`.
    pub term_hh: f64,
    /// `sum_r E_r^2`.
    pub term_tt: f64,
    /// Real part of `Tr(H H~^+)`.
    pub term_cross: f64,
    pub cross_imag: f64,
    /// `term_hh + term_tt - 2 term_cross`.
    pub distance: f64,
    /// `log2(distance) - N`, or negative infinity when `distance <= 0`.
    pub f: f64,
    /// Set when truncation error drove the distance to zero or below.
    pub nonpositive: bool,
    pub discarded_weight: f64,
}

impl LossBreakdown {
    fn assemble(n: usize, term_hh: f64, term_tt: f64, cross: C64, discarded_weight: f64) -> Self {
        let distance = term_hh + term_tt - 2.0 * cross.re;
        let nonpositive = !(distance > 0.0);
        let f = if nonpositive {
            f64::NEG_INFINITY
        } else {
            distance.log2() - n as f64
        };
        if cross.im.abs() > CROSS_IMAG_WARN * cross.re.abs().max(1.0) {
            log::warn!(
                "cross term has imaginary residue {:.3e} (real part {:.6e})",
                cross.im,
                cross.re
            );
        }
        Self {
            term_hh,
            term_tt,
            term_cross: cross.re,
            cross_imag: cross.im,
            distance,
            f,
            nonpositive,
            discarded_weight,
        }
    }
}

/// The Hamiltonian side of the loss, prepared once per model.
#[derive(Clone, Debug)]
pub struct Target {
    pub mpo: HamiltonianMpo,
    pub term_hh: f64,
    pub trace: C64,
}

impl Target {
    pub fn new(mpo: HamiltonianMpo) -> Result<Self> {
        let term_hh = mpo_trace_product(&mpo, &mpo)?.re;
        let trace = mpo.trace();
        Ok(Self {
            mpo,
            term_hh,
            trace,
        })
    }

    pub fn sites(&self) -> usize {
        self.mpo.sites()
    }
}

/// A recorded loss evaluation.
pub struct LossGraph {
    pub tape: GradTape,
    /// Scalar whose real part is the distance.
    pub distance: Var,
    pub mps_leaves: Vec<Var>,
    pub latent_leaves: Vec<Var>,
    pub breakdown: LossBreakdown,
}

/// Record the loss on a fresh tape. Leaves are trainable when `trainable`.
pub fn record_loss(
    target: &Target,
    s: &SpectrumMps,
    c: &BrickwallCircuit,
    policy: &TruncationPolicy,
    trainable: bool,
) -> Result<LossGraph> {
    policy.validate()?;
    let n = target.sites();
    if s.sites() != n || c.sites() != n {
        return Err(Error::Shape(format!(
            "Hamiltonian on {n} sites, spectrum on {}, circuit on {}",
            s.sites(),
            c.sites()
        )));
    }
    let mut tape = GradTape::new();
    let mps_leaves: Vec<Var> = s
        .tensors()
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad(trainable)))
        .collect();
    let (latent_leaves, unitaries) = record_gates(&mut tape, c, trainable)?;

    let tt = inner_product_on_tape(&mut tape, &mps_leaves, &mps_leaves)?;
    let start = TapeMpo::constant(&mut tape, &target.mpo, policy)?;
    let evolved = conjugate_on_tape(&mut tape, start, c, &unitaries, policy)?;
    let overlap = diagonal_overlap_on_tape(&mut tape, &evolved.sites, &mps_leaves)?;

    // Remove the trace leaked by truncation: M -> M - (Tr M - Tr H) / 2^N.
    let tr = trace_on_tape(&mut tape, &evolved.sites)?;
    let tr_h = tape.constant(DenseTensor::scalar(-target.trace));
    let leaked = tape.add(tr, tr_h)?;
    let sum_e = entry_sum_on_tape(&mut tape, &mps_leaves)?;
    let product = tape.contract(leaked, sum_e, &[])?;
    let correction = tape.scale(product, C64::new(-(2f64.powi(n as i32)).recip(), 0.0));
    let cross = tape.add(overlap, correction)?;

    let hh = tape.constant(DenseTensor::scalar(C64::new(target.term_hh, 0.0)));
    let minus_two_cross = tape.scale(cross, C64::new(-2.0, 0.0));
    let partial = tape.add(hh, tt)?;
    let distance = tape.add(partial, minus_two_cross)?;

    let breakdown = LossBreakdown::assemble(
        n,
        target.term_hh,
        tape.value(tt).data()[0].re,
        tape.value(cross).data()[0],
        evolved.discarded_weight,
    );
    Ok(LossGraph {
        tape,
        distance,
        mps_leaves,
        latent_leaves,
        breakdown,
    })
}

/// Loss value only.
pub fn loss(
    target: &Target,
    s: &SpectrumMps,
    c: &BrickwallCircuit,
    policy: &TruncationPolicy,
) -> Result<LossBreakdown> {
    Ok(record_loss(target, s, c, policy, false)?.breakdown)
}

/// Gradients of the distance: one real tensor per MPS site (stored with zero
/// imaginary parts) and one complex tensor per gate latent, packed as
/// `d/dRe + i d/dIm`.
#[derive(Clone, Debug)]
pub struct LossGradient {
    pub mps: Vec<DenseTensor>,
    pub latents: Vec<DenseTensor>,
}

impl LossGradient {
    pub fn is_finite(&self) -> bool {
        self.mps
            .iter()
            .chain(&self.latents)
            .all(|t| t.data().iter().all(|z| z.re.is_finite() && z.im.is_finite()))
    }
}

/// Loss and gradient of the pre-log distance.
pub fn loss_and_grad(
    target: &Target,
    s: &SpectrumMps,
    c: &BrickwallCircuit,
    policy: &TruncationPolicy,
) -> Result<(LossBreakdown, LossGradient)> {
    let graph = record_loss(target, s, c, policy, true)?;
    let mut grads = graph.tape.backward(graph.distance)?;
    let mut take = |v: Var, like: &DenseTensor| {
        grads
            .take(v)
            .unwrap_or_else(|| DenseTensor::zeros(like.shape().to_vec()))
    };
    let mps = graph
        .mps_leaves
        .iter()
        .zip(s.tensors())
        .map(|(&v, t)| {
            let mut g = take(v, t);
            for z in g.data_mut() {
                z.im = 0.0;
            }
            g
        })
        .collect();
    let latents = graph
        .latent_leaves
        .iter()
        .zip(c.gates())
        .map(|(&v, g)| take(v, g.latent()))
        .collect();
    Ok((graph.breakdown, LossGradient { mps, latents }))
}

/// `U diag(E) U^+` as a dense matrix. Guarded at 12 sites.
pub fn dense_ansatz(s: &SpectrumMps, c: &BrickwallCircuit) -> Result<DenseTensor> {
    if s.sites() != c.sites() {
        return Err(Error::Shape(format!(
            "spectrum on {} sites, circuit on {}",
            s.sites(),
            c.sites()
        )));
    }
    let u = c.to_dense()?;
    let e = s.enumerate()?;
    let dim = e.len();
    let ud = DenseTensor::from_fn(vec![dim, dim], |ix| u.get(&[ix[0], ix[1]]) * e[ix[1]]);
    ud.matmul(&u.dagger()?)
}

/// `log2 |H - H~|^2 - N` by dense matrices, for testing the pipeline.
pub fn dense_loss(h: &DenseTensor, s: &SpectrumMps, c: &BrickwallCircuit) -> Result<f64> {
    let diff = h.sub(&dense_ansatz(s, c)?)?;
    Ok(diff.norm_sqr().log2() - s.sites() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{build_brickwall, InitMode};
    use crate::ed::full_spectrum;
    use crate::hamiltonian::{build_dense, build_ising_mpo, IsingSpec};
    use crate::tensor::hermitian_eigenvalues;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn target(spec: &IsingSpec) -> Target {
        Target::new(build_ising_mpo(spec).unwrap()).unwrap()
    }

    #[test]
    fn zero_spectrum_gives_norm_of_h() {
        let spec = IsingSpec::clean(6, 0.5);
        let s = SpectrumMps::init_random(6, 2, 0.0, &mut rng(0)).unwrap();
        let c = build_brickwall(6, 2, InitMode::Identity, &mut rng(0)).unwrap();
        let l = loss(&target(&spec), &s, &c, &TruncationPolicy::new(16)).unwrap();
        let expect = spec.trace_square().log2() - 6.0;
        assert!((l.f - expect).abs() < 1e-12);
        assert_eq!(l.term_tt, 0.0);
    }

    #[test]
    fn perfect_two_site_ansatz() {
        let spec = IsingSpec::clean(2, 0.7);
        let ed = full_spectrum(&spec, true).unwrap();
        let dim = 4;
        let v = ed.eigenvectors.clone().unwrap();
        let u = DenseTensor::from_fn(vec![dim, dim], |ix| C64::new(v[ix[0] * dim + ix[1]], 0.0));
        let mut c = build_brickwall(2, 1, InitMode::Identity, &mut rng(0)).unwrap();
        c.set_gate(0, u).unwrap();
        let (s, _) = SpectrumMps::fit_from_dense(&ed.eigenvalues, 4).unwrap();
        let l = loss(&target(&spec), &s, &c, &TruncationPolicy::new(16)).unwrap();
        assert!(l.distance <= 1e-10 || l.nonpositive, "{l:?}");
        assert!(l.f <= (1e-10f64).log2() - 2.0);
    }

    #[test]
    fn pipeline_matches_dense_at_full_bond() {
        let spec = IsingSpec::disordered(6, 0.5, 0.5, 1);
        let h = build_dense(&spec).unwrap();
        let t = target(&spec);
        for seed in 0..3 {
            let s = SpectrumMps::init_random(6, 4, 0.5, &mut rng(seed)).unwrap();
            let c = build_brickwall(6, 4, InitMode::Random, &mut rng(seed + 10)).unwrap();
            let l = loss(&t, &s, &c, &TruncationPolicy::new(64)).unwrap();
            let d = dense_loss(&h, &s, &c).unwrap();
            assert!((l.f - d).abs() < 1e-8, "{} vs {d}", l.f);
        }
    }

    #[test]
    fn dense_ansatz_identity_circuit_is_diagonal() {
        let s = SpectrumMps::init_random(4, 3, 0.5, &mut rng(3)).unwrap();
        let c = build_brickwall(4, 3, InitMode::Identity, &mut rng(0)).unwrap();
        let a = dense_ansatz(&s, &c).unwrap();
        let e = s.enumerate().unwrap();
        let expect = DenseTensor::from_fn(vec![16, 16], |ix| {
            if ix[0] == ix[1] {
                C64::new(e[ix[0]], 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        assert!(a.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn dense_ansatz_of_zero_spectrum_vanishes() {
        let s = SpectrumMps::init_random(4, 2, 0.0, &mut rng(3)).unwrap();
        let c = build_brickwall(4, 2, InitMode::Random, &mut rng(4)).unwrap();
        assert_eq!(dense_ansatz(&s, &c).unwrap().norm(), 0.0);
    }

    #[test]
    fn dense_ansatz_eigenvalues_are_the_entries() {
        let s = SpectrumMps::init_random(8, 4, 0.5, &mut rng(5)).unwrap();
        let c = build_brickwall(8, 3, InitMode::Random, &mut rng(6)).unwrap();
        let a = dense_ansatz(&s, &c).unwrap();
        assert!(a.max_abs_diff(&a.dagger().unwrap()) < 1e-10);
        let ev = hermitian_eigenvalues(&a).unwrap();
        let mut e = s.enumerate().unwrap();
        e.sort_by(f64::total_cmp);
        for (x, y) in ev.iter().zip(&e) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn relabeling_leaves_loss_unchanged() {
        // swap the bitstrings 0 <-> 5 in the spectrum and compensate with a
        // permutation before the circuit
        let n = 4;
        let spec = IsingSpec::clean(n, 0.5);
        let h = build_dense(&spec).unwrap();
        let s = SpectrumMps::init_random(n, 4, 0.5, &mut rng(7)).unwrap();
        let c = build_brickwall(n, 2, InitMode::Random, &mut rng(8)).unwrap();
        let mut e = s.enumerate().unwrap();
        e.swap(0, 5);
        let u = c.to_dense().unwrap();
        let dim = 16;
        let perm = |i: usize| match i {
            0 => 5,
            5 => 0,
            x => x,
        };
        let u2 = DenseTensor::from_fn(vec![dim, dim], |ix| u.get(&[ix[0], perm(ix[1])]));
        let ed2 = DenseTensor::from_fn(vec![dim, dim], |ix| u2.get(&ix.to_vec()) * e[ix[1]]);
        let a2 = ed2.matmul(&u2.dagger().unwrap()).unwrap();
        let f2 = h.sub(&a2).unwrap().norm_sqr().log2() - n as f64;
        let f1 = dense_loss(&h, &s, &c).unwrap();
        assert!((f1 - f2).abs() < 1e-10);
    }

    #[test]
    fn gradient_has_one_entry_per_parameter() {
        let spec = IsingSpec::clean(4, 0.5);
        let s = SpectrumMps::init_random(4, 2, 0.3, &mut rng(9)).unwrap();
        let c = build_brickwall(4, 2, InitMode::default(), &mut rng(10)).unwrap();
        let (_, g) = loss_and_grad(&target(&spec), &s, &c, &TruncationPolicy::new(16)).unwrap();
        assert_eq!(g.mps.len(), 4);
        assert_eq!(g.latents.len(), c.num_gates());
        assert!(g.is_finite());
        assert!(g.mps.iter().all(|t| t.is_real(0.0)));
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let spec = IsingSpec::clean(4, 0.5);
        let s = SpectrumMps::init_random(5, 2, 0.3, &mut rng(9)).unwrap();
        let c = build_brickwall(4, 2, InitMode::default(), &mut rng(10)).unwrap();
        assert!(matches!(
            loss(&target(&spec), &s, &c, &TruncationPolicy::new(16)),
            Err(Error::Shape(_))
        ));
    }
}
