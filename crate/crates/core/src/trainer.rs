//! Gradient-based training of the spectrum MPS and the circuit latents.
//!
//! All parameters are packed into one real vector: MPS entries as their real
//! parts, gate latents as interleaved real and imaginary parts. The optimizer
//! minimizes the distance divided by `Tr(H H^+)`, which has the same
//! minimizers as `F` at any scale of `H`. Gradients of that ratio shrink
//! like `2^-N` and the MPS gradients start as products of `N - 1` small
//! tensors, so the Adam epsilon defaults to zero, which keeps the update
//! invariant under rescaling of the gradient.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::{build_brickwall, BrickwallCircuit, InitMode};
use crate::error::{Error, Result};
use crate::evolution::TruncationPolicy;
use crate::hamiltonian::{build_ising_mpo, IsingSpec};
use crate::objective::{loss, loss_and_grad, LossBreakdown, LossGradient, Target};
use crate::spectrum::SpectrumMps;
use crate::tensor::{DenseTensor, C64};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    GradientDescent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Stop once the relative change of `F` between steps stays below this
    /// for `convergence_window` consecutive steps. Zero disables.
    pub tolerance: f64,
    pub convergence_window: usize,
    /// Steps between checkpoints. Zero disables.
    pub checkpoint_interval: usize,
    pub chi_t: usize,
    pub cutoff: f64,
    /// Bond cap for the validation loss, `2 chi_t` when unset.
    pub validation_chi_t: Option<usize>,
    /// Steps between validation evaluations. Zero validates only the result.
    pub validation_interval: usize,
    pub seed: u64,
    /// Independent runs from derived seeds; the one with the lowest `F` is
    /// kept.
    pub restarts: usize,
    /// Steps without an improvement of `F` by `plateau_threshold` before the
    /// learning rate is multiplied by `decay_factor`.
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub decay_factor: f64,
    /// Update the MPS and the circuit on alternate steps.
    pub alternating: bool,
    pub init: InitMode,
    /// Standard deviation of the initial MPS entries, `0.1 / sqrt(chi_a)`
    /// when unset.
    pub mps_scale: Option<f64>,
    pub max_retries: u32,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            max_steps: 2000,
            tolerance: 0.0,
            convergence_window: 100,
            checkpoint_interval: 0,
            chi_t: 16,
            cutoff: 1e-14,
            validation_chi_t: None,
            validation_interval: 0,
            seed: 0,
            restarts: 1,
            plateau_patience: 300,
            plateau_threshold: 1e-3,
            decay_factor: 0.5,
            alternating: false,
            init: InitMode::default(),
            mps_scale: None,
            max_retries: 5,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1".into());
        }
        if self.chi_t == 0 {
            return bad("chi_t must be at least 1".into());
        }
        if self.validation_chi_t == Some(0) {
            return bad("validation_chi_t must be at least 1".into());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_epsilon >= 0.0 && self.adam_epsilon.is_finite()) {
            return bad(format!("adam_epsilon must be finite and >= 0, got {}", self.adam_epsilon));
        }
        if self.tolerance < 0.0 || self.cutoff < 0.0 || self.cutoff >= 1.0 {
            return bad("tolerance must be >= 0 and cutoff in [0, 1)".into());
        }
        if let InitMode::NearIdentity { epsilon } = self.init {
            if !(epsilon >= 0.0 && epsilon.is_finite()) {
                return bad(format!("init epsilon must be finite and >= 0, got {epsilon}"));
            }
        }
        Ok(())
    }

    pub fn policy(&self) -> TruncationPolicy {
        TruncationPolicy {
            chi_t: self.chi_t,
            cutoff: self.cutoff,
            record_discard: true,
        }
    }

    pub fn validation_policy(&self) -> TruncationPolicy {
        TruncationPolicy {
            chi_t: self.validation_chi_t.unwrap_or(self.chi_t.saturating_mul(2)),
            cutoff: self.cutoff,
            record_discard: true,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub f: f64,
    pub term_hh: f64,
    pub term_tt: f64,
    pub term_cross: f64,
    pub distance: f64,
    pub discarded_weight: f64,
    pub learning_rate: f64,
    pub f_validation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub step: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Everything besides the parameters that determines the next step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub step: usize,
    pub learning_rate: f64,
    pub adam: AdamState,
    pub plateau_ref: f64,
    pub since_improvement: usize,
    pub prev_f: Option<f64>,
    pub quiet_steps: usize,
    pub converged: bool,
    pub retries: u32,
    pub decays: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestState {
    pub step: usize,
    pub loss: LossBreakdown,
    pub mps: SpectrumMps,
    pub circuit: BrickwallCircuit,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub spec: IsingSpec,
    pub layers: usize,
    pub chi_a: usize,
    pub config: TrainConfig,
    pub mps: SpectrumMps,
    pub circuit: BrickwallCircuit,
    pub state: OptimState,
    pub best: Option<BestState>,
    /// Log and timings up to the checkpoint, so a resumed run reports the
    /// whole trajectory.
    #[serde(default)]
    pub log: Vec<LogRow>,
    #[serde(default)]
    pub timing: Vec<TimingRow>,
}

impl Checkpoint {
    /// Write atomically: a temporary file is renamed over the target.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string(self)?;
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("not valid JSON: {e}")))?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Checkpoint("missing format_version".into()))?;
        if found != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::CheckpointVersion {
                found: found as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))
    }
}

fn flatten(s: &SpectrumMps, c: &BrickwallCircuit) -> Vec<f64> {
    let mut out: Vec<f64> = s
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().map(|z| z.re))
        .collect();
    for g in c.gates() {
        out.extend(g.latent().data().iter().flat_map(|z| [z.re, z.im]));
    }
    out
}

fn flatten_grad(g: &LossGradient) -> Vec<f64> {
    let mut out: Vec<f64> = g
        .mps
        .iter()
        .flat_map(|t| t.data().iter().map(|z| z.re))
        .collect();
    for t in &g.latents {
        out.extend(t.data().iter().flat_map(|z| [z.re, z.im]));
    }
    out
}

fn unflatten(x: &[f64], s: &mut SpectrumMps, c: &mut BrickwallCircuit) -> Result<()> {
    let mut pos = 0;
    for t in s.tensors_mut() {
        for z in t.data_mut() {
            *z = C64::new(x[pos], 0.0);
            pos += 1;
        }
    }
    for i in 0..c.num_gates() {
        let data: Vec<C64> = (0..16).map(|k| C64::new(x[pos + 2 * k], x[pos + 2 * k + 1])).collect();
        pos += 32;
        c.set_gate(i, DenseTensor::new(vec![4, 4], data)?)?;
    }
    Ok(())
}

fn is_finite(l: &LossBreakdown) -> bool {
    l.distance.is_finite() && l.term_tt.is_finite() && l.term_cross.is_finite()
}

/// Result of a finished training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Seed of the kept run.
    pub seed: u64,
    pub mps: SpectrumMps,
    pub circuit: BrickwallCircuit,
    pub best_step: usize,
    pub loss: LossBreakdown,
    /// `F` of the returned parameters at the validation bond cap.
    pub f_validation: f64,
    pub log: Vec<LogRow>,
    pub timing: Vec<TimingRow>,
}

struct Snapshot {
    params: Vec<f64>,
    state: OptimState,
    log_len: usize,
}

pub struct Trainer {
    spec: IsingSpec,
    layers: usize,
    chi_a: usize,
    cfg: TrainConfig,
    target: Target,
    mps: SpectrumMps,
    circuit: BrickwallCircuit,
    state: OptimState,
    best: Option<BestState>,
    log: Vec<LogRow>,
    timing: Vec<TimingRow>,
    snapshot: Option<Snapshot>,
    mps_len: usize,
}

impl Trainer {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(spec: &IsingSpec, layers: usize, chi_a: usize, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scale = cfg.mps_scale.unwrap_or_else(|| SpectrumMps::default_scale(chi_a));
        let mps = SpectrumMps::init_random(spec.n, chi_a, scale, &mut rng)?;
        let circuit = build_brickwall(spec.n, layers, cfg.init, &mut rng)?;
        Self::assemble(spec, layers, chi_a, cfg, mps, circuit, None, None, Default::default())
    }

    /// Start from given parameters.
    pub fn with_parameters(
        spec: &IsingSpec,
        cfg: TrainConfig,
        mps: SpectrumMps,
        circuit: BrickwallCircuit,
    ) -> Result<Self> {
        cfg.validate()?;
        let (layers, chi_a) = (circuit.layers(), mps.max_bond());
        Self::assemble(spec, layers, chi_a, cfg, mps, circuit, None, None, Default::default())
    }

    /// Continue from a checkpoint. `cfg` replaces the stored configuration;
    /// pass the stored one to reproduce an uninterrupted run.
    pub fn resume(ckpt: Checkpoint, cfg: Option<TrainConfig>) -> Result<Self> {
        let cfg = cfg.unwrap_or(ckpt.config);
        cfg.validate()?;
        Self::assemble(
            &ckpt.spec,
            ckpt.layers,
            ckpt.chi_a,
            cfg,
            ckpt.mps,
            ckpt.circuit,
            Some(ckpt.state),
            ckpt.best,
            (ckpt.log, ckpt.timing),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        spec: &IsingSpec,
        layers: usize,
        chi_a: usize,
        cfg: TrainConfig,
        mps: SpectrumMps,
        circuit: BrickwallCircuit,
        state: Option<OptimState>,
        best: Option<BestState>,
        history: (Vec<LogRow>, Vec<TimingRow>),
    ) -> Result<Self> {
        let mut spec = spec.clone();
        spec.fields = spec.resolved_fields();
        let target = Target::new(build_ising_mpo(&spec)?)?;
        if mps.sites() != spec.n || circuit.sites() != spec.n {
            return Err(Error::Shape("parameters do not match the chain length".into()));
        }
        let state = state.unwrap_or(OptimState {
            step: 0,
            learning_rate: cfg.learning_rate,
            adam: AdamState::default(),
            plateau_ref: f64::INFINITY,
            since_improvement: 0,
            prev_f: None,
            quiet_steps: 0,
            converged: false,
            retries: 0,
            decays: 0,
        });
        let mps_len = mps.num_params();
        Ok(Self {
            spec,
            layers,
            chi_a,
            cfg,
            target,
            mps,
            circuit,
            state,
            best,
            log: history.0,
            timing: history.1,
            snapshot: None,
            mps_len,
        })
    }

    pub fn step(&self) -> usize {
        self.state.step
    }

    pub fn converged(&self) -> bool {
        self.state.converged
    }

    pub fn learning_rate(&self) -> f64 {
        self.state.learning_rate
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn timing(&self) -> &[TimingRow] {
        &self.timing
    }

    pub fn mps(&self) -> &SpectrumMps {
        &self.mps
    }

    pub fn circuit(&self) -> &BrickwallCircuit {
        &self.circuit
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn best(&self) -> Option<&BestState> {
        self.best.as_ref()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            layers: self.layers,
            chi_a: self.chi_a,
            config: self.cfg.clone(),
            mps: self.mps.clone(),
            circuit: self.circuit.clone(),
            state: self.state.clone(),
            best: self.best.clone(),
            log: self.log.clone(),
            timing: self.timing.clone(),
        }
    }

    /// `F` of the current parameters at the validation bond cap.
    pub fn validate_current(&self) -> Result<LossBreakdown> {
        loss(&self.target, &self.mps, &self.circuit, &self.cfg.validation_policy())
    }

    fn record(&mut self, l: &LossBreakdown, f_validation: Option<f64>, seconds: f64) {
        let step = self.state.step;
        self.log.push(LogRow {
            step,
            f: l.f,
            term_hh: l.term_hh,
            term_tt: l.term_tt,
            term_cross: l.term_cross,
            distance: l.distance,
            discarded_weight: l.discarded_weight,
            learning_rate: self.state.learning_rate,
            f_validation,
        });
        self.timing.push(TimingRow { step, seconds });
        let better = self.best.as_ref().is_none_or(|b| l.distance < b.loss.distance);
        if better {
            self.best = Some(BestState {
                step,
                loss: *l,
                mps: self.mps.clone(),
                circuit: self.circuit.clone(),
            });
        }
    }

    fn wants_validation(&self) -> bool {
        let every = self.cfg.validation_interval;
        every > 0 && self.state.step % every == 0
    }

    /// One evaluation and update. Returns the loss at the parameters before
    /// the update.
    pub fn iterate(&mut self) -> Result<LossBreakdown> {
        loop {
            let clock = Instant::now();
            let evaluated = loss_and_grad(&self.target, &self.mps, &self.circuit, &self.cfg.policy());
            let (l, g) = match evaluated {
                Ok(pair) if is_finite(&pair.0) && pair.1.is_finite() => pair,
                Ok(_) => {
                    self.recover("non-finite loss or gradient")?;
                    continue;
                }
                Err(Error::Decomposition(msg)) => {
                    self.recover(&msg)?;
                    continue;
                }
                Err(e) => return Err(e),
            };
            self.state.retries = 0;
            let f_validation = if self.wants_validation() {
                Some(self.validate_current()?.f)
            } else {
                None
            };
            let params = flatten(&self.mps, &self.circuit);
            self.snapshot = Some(Snapshot {
                params: params.clone(),
                state: self.state.clone(),
                log_len: self.log.len(),
            });
            self.record(&l, f_validation, 0.0);
            self.schedule(&l);
            self.update(params, &g, l.term_hh)?;
            self.state.step += 1;
            if let Some(t) = self.timing.last_mut() {
                t.seconds = clock.elapsed().as_secs_f64();
            }
            return Ok(l);
        }
    }

    fn recover(&mut self, why: &str) -> Result<()> {
        let Some(snap) = self.snapshot.take() else {
            return Err(Error::Training(format!(
                "{why} at step {} with no earlier state to fall back to",
                self.state.step
            )));
        };
        let retries = self.state.retries + 1;
        if retries > self.cfg.max_retries {
            return Err(Error::Training(format!(
                "{why} at step {} after {} learning-rate halvings (rate {:.3e})",
                self.state.step,
                retries - 1,
                self.state.learning_rate
            )));
        }
        log::warn!(
            "{why} at step {}; restoring step {} and halving the learning rate",
            self.state.step,
            snap.state.step
        );
        unflatten(&snap.params, &mut self.mps, &mut self.circuit)?;
        let lr = self.state.learning_rate * 0.5;
        self.state = snap.state;
        self.state.learning_rate = lr;
        self.state.retries = retries;
        self.log.truncate(snap.log_len);
        self.timing.truncate(snap.log_len);
        Ok(())
    }

    fn schedule(&mut self, l: &LossBreakdown) {
        let st = &mut self.state;
        if l.f < st.plateau_ref - self.cfg.plateau_threshold {
            st.plateau_ref = l.f;
            st.since_improvement = 0;
        } else {
            st.since_improvement += 1;
            if st.since_improvement >= self.cfg.plateau_patience {
                st.learning_rate *= self.cfg.decay_factor;
                st.since_improvement = 0;
                st.decays += 1;
                st.plateau_ref = st.plateau_ref.min(l.f);
            }
        }
        if self.cfg.tolerance > 0.0 {
            if let Some(prev) = st.prev_f {
                let rel = (l.f - prev).abs() / prev.abs().max(1e-12);
                if rel < self.cfg.tolerance {
                    st.quiet_steps += 1;
                } else {
                    st.quiet_steps = 0;
                }
                if st.quiet_steps >= self.cfg.convergence_window {
                    st.converged = true;
                }
            }
        }
        st.prev_f = Some(l.f);
    }

    fn update(&mut self, mut x: Vec<f64>, g: &LossGradient, term_hh: f64) -> Result<()> {
        let mut grad = flatten_grad(g);
        let norm = term_hh.max(f64::MIN_POSITIVE);
        for v in &mut grad {
            *v /= norm;
        }
        if self.cfg.alternating {
            let (lo, hi) = if self.state.step % 2 == 0 {
                (self.mps_len, grad.len())
            } else {
                (0, self.mps_len)
            };
            for v in &mut grad[lo..hi] {
                *v = 0.0;
            }
        }
        let lr = self.state.learning_rate;
        match self.cfg.optimizer {
            OptimizerKind::GradientDescent => {
                for (p, d) in x.iter_mut().zip(&grad) {
                    *p -= lr * d;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.adam_epsilon);
                let adam = &mut self.state.adam;
                if adam.m.len() != x.len() {
                    adam.m = vec![0.0; x.len()];
                    adam.v = vec![0.0; x.len()];
                }
                adam.t += 1;
                let c1 = 1.0 - b1.powi(adam.t as i32);
                let c2 = 1.0 - b2.powi(adam.t as i32);
                let frozen = |i: usize| {
                    self.cfg.alternating && {
                        let mps_side = i < self.mps_len;
                        mps_side != (self.state.step % 2 == 0)
                    }
                };
                for i in 0..x.len() {
                    if frozen(i) {
                        continue;
                    }
                    let d = grad[i];
                    adam.m[i] = b1 * adam.m[i] + (1.0 - b1) * d;
                    adam.v[i] = b2 * adam.v[i] + (1.0 - b2) * d * d;
                    let denom = (adam.v[i] / c2).sqrt() + eps;
                    if denom > 0.0 {
                        x[i] -= lr * (adam.m[i] / c1) / denom;
                    }
                }
            }
        }
        unflatten(&x, &mut self.mps, &mut self.circuit)
    }

    /// Iterate until `limit` steps are done or the run converges. Calls
    /// `on_checkpoint` whenever a checkpoint is due.
    pub fn run_until(
        &mut self,
        limit: usize,
        mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.state.step < limit && !self.state.converged {
            self.iterate()?;
            let every = self.cfg.checkpoint_interval;
            if every > 0 && self.state.step % every == 0 {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    /// Evaluate the final parameters, pick the best evaluated state, and
    /// validate it at the larger bond cap.
    pub fn finish(mut self) -> Result<TrainOutcome> {
        let clock = Instant::now();
        let l = loss(&self.target, &self.mps, &self.circuit, &self.cfg.policy())?;
        if is_finite(&l) {
            let f_validation = if self.wants_validation() {
                Some(self.validate_current()?.f)
            } else {
                None
            };
            self.record(&l, f_validation, clock.elapsed().as_secs_f64());
        }
        let best = self
            .best
            .take()
            .ok_or_else(|| Error::Training("no finite evaluation was recorded".into()))?;
        let f_validation = loss(&self.target, &best.mps, &best.circuit, &self.cfg.validation_policy())?.f;
        Ok(TrainOutcome {
            seed: self.cfg.seed,
            mps: best.mps,
            circuit: best.circuit,
            best_step: best.step,
            loss: best.loss,
            f_validation,
            log: self.log,
            timing: self.timing,
        })
    }
}

/// Train from a fresh initialization for `cfg.max_steps` steps.
pub fn train(spec: &IsingSpec, layers: usize, chi_a: usize, cfg: TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut kept: Option<TrainOutcome> = None;
    for r in 0..cfg.restarts {
        let run = TrainConfig {
            seed: restart_seed(cfg.seed, r),
            ..cfg.clone()
        };
        let limit = run.max_steps;
        let mut trainer = Trainer::new(spec, layers, chi_a, run)?;
        trainer.run_until(limit, |_| Ok(()))?;
        let out = trainer.finish()?;
        log::info!("restart {r}: F = {}", out.loss.f);
        if kept.as_ref().is_none_or(|k| out.loss.f < k.loss.f) {
            kept = Some(out);
        }
    }
    Ok(kept.expect("at least one restart"))
}

/// Seed of restart `r`; restart 0 uses `seed` itself.
pub fn restart_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_add((r as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Continue a checkpointed run up to its configured `max_steps`.
pub fn resume(path: &Path, cfg: Option<TrainConfig>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::resume(Checkpoint::load(path)?, cfg)?;
    let limit = trainer.config().max_steps;
    trainer.run_until(limit, |_| Ok(()))?;
    trainer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::mean_abs_error;
    use crate::ed::full_spectrum;

    fn small_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            max_steps: steps,
            learning_rate: 1e-2,
            chi_t: 16,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_f() {
        let spec = IsingSpec::clean(4, 0.5);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..small_cfg(5)
        };
        let out = train(&spec, 2, 2, cfg).unwrap();
        let f0 = out.log[0].f;
        assert!(out.log.iter().all(|r| r.f == f0));
    }

    #[test]
    fn same_seed_same_log() {
        let spec = IsingSpec::disordered(5, 0.5, 0.5, 1);
        let a = train(&spec, 3, 4, small_cfg(20)).unwrap();
        let b = train(&spec, 3, 4, small_cfg(20)).unwrap();
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let spec = IsingSpec::clean(5, 0.5);
        let cfg = small_cfg(30);
        let mut one = Trainer::new(&spec, 3, 4, cfg.clone()).unwrap();
        one.run_until(30, |_| Ok(())).unwrap();

        let mut first = Trainer::new(&spec, 3, 4, cfg).unwrap();
        first.run_until(12, |_| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        first.checkpoint().save(&path).unwrap();
        let mut second = Trainer::resume(Checkpoint::load(&path).unwrap(), None).unwrap();
        second.run_until(30, |_| Ok(())).unwrap();

        assert_eq!(second.log(), one.log());
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        assert!(matches!(Checkpoint::from_json("{not json"), Err(Error::Checkpoint(_))));
        assert!(matches!(
            Checkpoint::from_json(r#"{"format_version": 99}"#),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));
        assert!(matches!(
            Checkpoint::from_json(r#"{"format_version": 1}"#),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn larger_validation_bond_does_not_hurt() {
        let spec = IsingSpec::clean(8, 0.5);
        let mut t = Trainer::new(
            &spec,
            4,
            4,
            TrainConfig {
                chi_t: 4,
                init: InitMode::Random,
                ..small_cfg(3)
            },
        )
        .unwrap();
        t.run_until(3, |_| Ok(())).unwrap();
        let ck = t.checkpoint();
        let small = loss(&t.target, t.mps(), t.circuit(), &TruncationPolicy::new(4)).unwrap();
        let wider = Trainer::resume(
            ck,
            Some(TrainConfig {
                chi_t: 64,
                ..small_cfg(3)
            }),
        )
        .unwrap();
        let exact = loss(&wider.target, wider.mps(), wider.circuit(), &TruncationPolicy::new(256)).unwrap();
        let mid = loss(&wider.target, wider.mps(), wider.circuit(), &TruncationPolicy::new(64)).unwrap();
        assert!((mid.f - exact.f).abs() <= (small.f - exact.f).abs() + 1e-9);
    }

    #[test]
    fn gates_stay_unitary() {
        let spec = IsingSpec::clean(4, 0.5);
        let mut t = Trainer::new(&spec, 3, 2, small_cfg(10)).unwrap();
        t.run_until(10, |tr| {
            assert!(tr.circuit().unitarity_error() < 1e-10);
            Ok(())
        })
        .unwrap();
        assert!(t.circuit().unitarity_error() < 1e-10);
    }

    #[test]
    fn alternating_mode_freezes_one_side() {
        let spec = IsingSpec::clean(4, 0.5);
        let cfg = TrainConfig {
            alternating: true,
            ..small_cfg(2)
        };
        let mut t = Trainer::new(&spec, 2, 2, cfg).unwrap();
        let c0 = t.circuit().clone();
        let m0 = t.mps().clone();
        t.iterate().unwrap();
        assert_eq!(t.circuit(), &c0);
        assert_ne!(t.mps(), &m0);
        let m1 = t.mps().clone();
        t.iterate().unwrap();
        assert_eq!(t.mps(), &m1);
        assert_ne!(t.circuit(), &c0);
    }

    #[test]
    fn small_chain_reaches_ed_accuracy() {
        let spec = IsingSpec::clean(4, 0.5);
        let cfg = TrainConfig {
            max_steps: 2000,
            learning_rate: 1e-2,
            chi_t: 16,
            seed: 2,
            restarts: 3,
            ..TrainConfig::default()
        };
        let out = train(&spec, 6, 4, cfg).unwrap();
        let ed = full_spectrum(&spec, false).unwrap();
        let eps = mean_abs_error(&ed.eigenvalues, &out.mps.enumerate().unwrap()).unwrap();
        assert!(eps <= 5e-2, "eps = {eps}, F = {}", out.loss.f);
    }

    #[test]
    fn f_rarely_rises_over_a_window() {
        let spec = IsingSpec::clean(6, 0.5);
        let cfg = TrainConfig {
            max_steps: 1000,
            ..TrainConfig::default()
        };
        let out = train(&spec, 6, 4, cfg).unwrap();
        let f: Vec<f64> = out.log.iter().map(|r| r.f).collect();
        let windows: Vec<bool> = (200..f.len() - 100).map(|s| f[s + 100] > f[s]).collect();
        let bad = windows.iter().filter(|&&b| b).count();
        assert!(bad * 20 <= windows.len(), "{bad} of {} windows rose", windows.len());
    }

    #[test]
    fn restarts_keep_the_lowest_f() {
        let spec = IsingSpec::clean(4, 0.5);
        let single = train(&spec, 2, 2, small_cfg(30)).unwrap();
        let multi = train(
            &spec,
            2,
            2,
            TrainConfig {
                restarts: 3,
                ..small_cfg(30)
            },
        )
        .unwrap();
        assert!(multi.loss.f <= single.loss.f);
        let seeds: Vec<u64> = (0..3).map(|r| restart_seed(5, r)).collect();
        assert_eq!(seeds[0], 5);
        assert!(seeds.contains(&multi.seed));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TrainConfig {
                learning_rate: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                max_steps: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                chi_t: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn flatten_round_trip() {
        let spec = IsingSpec::clean(4, 0.5);
        let t = Trainer::new(&spec, 2, 3, small_cfg(1)).unwrap();
        let x = flatten(t.mps(), t.circuit());
        let (mut s, mut c) = (t.mps().clone(), t.circuit().clone());
        unflatten(&x, &mut s, &mut c).unwrap();
        assert_eq!(&s, t.mps());
        assert_eq!(&c, t.circuit());
    }
}
