//! Configuration-driven experiments and their run directories.
//!
//! A run directory holds `config.toml` (the exact configuration), the
//! training log and timings, checkpoints, the trained parameters in
//! `model.json`, analysis CSVs and `summary.json`. A failed run leaves its
//! partial artifacts plus an `ERROR` file with the message.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    dense_entanglement_entropy, dos_histogram, ee_energy_distribution, ee_energy_exhaustive, ee_error_stats,
    fit_gaussian, fit_shifted_poisson, level_spacing_ratio, mean_abs_error, normalize_by_max_abs, Binning,
    DosHistogram, EePoint, FitParams, FitResult,
};
use crate::circuit::BrickwallCircuit;
use crate::ed::{full_spectrum, VECTORS_MAX_SITES};
use crate::error::{Error, Result};
use crate::hamiltonian::{IsingSpec, DENSE_MAX_SITES};
use crate::spectrum::{index_to_bits, SpectrumMps};
use crate::tensor::C64;
use crate::trainer::{restart_seed, Checkpoint, LogRow, TimingRow, TrainConfig, TrainOutcome, Trainer};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "TNVD_OUTPUT_ROOT";

/// Chains up to this size have their TNVD spectrum enumerated in full.
pub const ENUMERATE_SITES: usize = 16;

/// Exact diagonalization is run by default up to this size.
pub const AUTO_ED_SITES: usize = 12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    #[default]
    Single,
    Sweep,
    DisorderScan,
    DosStudy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    N,
    ChiA,
    Layers,
    W,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::N => "n",
            SweepAxis::ChiA => "chi-a",
            SweepAxis::Layers => "layers",
            SweepAxis::W => "w",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n" | "N" => Ok(SweepAxis::N),
            "chi-a" | "chi_a" => Ok(SweepAxis::ChiA),
            "layers" | "n-l" => Ok(SweepAxis::Layers),
            "w" | "W" => Ok(SweepAxis::W),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnsatzConfig {
    pub layers: usize,
    pub chi_a: usize,
}

impl Default for AnsatzConfig {
    fn default() -> Self {
        Self { layers: 10, chi_a: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Energies sampled from the trained MPS when it is too large to
    /// enumerate.
    pub samples: usize,
    /// Eigenstates sampled for the entanglement study.
    pub ee_samples: usize,
    pub seed: u64,
    pub binning: Binning,
    pub ee_binning: Binning,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            ee_samples: 1000,
            seed: 0,
            binning: Binning::FreedmanDiaconis,
            ee_binning: Binning::Count { bins: 40 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Compare with exact diagonalization. Unset means "when `N` is small".
    pub epsilon: Option<bool>,
    /// Entanglement entropy of the trained eigenstates. Always on for a
    /// dos-study.
    pub ee: bool,
    /// Entanglement of every eigenstate, compared with ED eigenvectors when
    /// available. Unset means "when `N <= 10`".
    pub ee_exhaustive: Option<bool>,
    /// States entering each of the low-lying and mid-spectrum EE averages.
    pub ee_stats_count: usize,
    /// Lowest levels written to `low_lying.csv`.
    pub low_lying: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            epsilon: None,
            ee: false,
            ee_exhaustive: None,
            ee_stats_count: 100,
            low_lying: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisorderConfig {
    /// Disorder strengths; empty means the model's `disorder_w` alone.
    pub w_values: Vec<f64>,
    pub realizations: usize,
}

impl Default for DisorderConfig {
    fn default() -> Self {
        Self {
            w_values: Vec::new(),
            realizations: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub kind: ExperimentKind,
    /// Run directory. Defaults to `$TNVD_OUTPUT_ROOT/<name>`, or
    /// `runs/<name>` without the variable.
    pub output_dir: Option<PathBuf>,
    /// Worker threads for sweeps and scans; zero uses every core.
    pub workers: usize,
    pub model: IsingSpec,
    pub ansatz: AnsatzConfig,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub analysis: AnalysisConfig,
    pub sweep: Option<SweepConfig>,
    pub disorder: Option<DisorderConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            kind: ExperimentKind::Single,
            output_dir: None,
            workers: 0,
            model: IsingSpec::clean(8, 0.5),
            ansatz: AnsatzConfig::default(),
            train: TrainConfig::default(),
            sampling: SamplingConfig::default(),
            analysis: AnalysisConfig::default(),
            sweep: None,
            disorder: None,
        }
    }
}

fn whole(value: f64, what: &str, min: usize) -> Result<usize> {
    if value.fract() != 0.0 || value < min as f64 || !value.is_finite() {
        return Err(Error::Config(format!("{what} must be an integer >= {min}, got {value}")));
    }
    Ok(value as usize)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn output_dir(&self) -> PathBuf {
        match &self.output_dir {
            Some(dir) => dir.clone(),
            None => {
                let root = std::env::var_os(OUTPUT_ROOT_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("runs"));
                root.join(&self.name)
            }
        }
    }

    fn wants_ed(&self, n: usize) -> Result<bool> {
        match self.analysis.epsilon {
            Some(true) if n > DENSE_MAX_SITES => Err(Error::Config(format!(
                "analysis.epsilon needs exact diagonalization, which is limited to {DENSE_MAX_SITES} sites (model has {n})"
            ))),
            Some(flag) => Ok(flag),
            None => Ok(n <= AUTO_ED_SITES),
        }
    }

    fn wants_ee(&self) -> bool {
        self.analysis.ee || self.kind == ExperimentKind::DosStudy
    }

    fn ee_exhaustive(&self, n: usize) -> Result<bool> {
        match self.analysis.ee_exhaustive {
            Some(true) if n > ENUMERATE_SITES => Err(Error::Config(format!(
                "analysis.ee_exhaustive is limited to {ENUMERATE_SITES} sites (model has {n})"
            ))),
            Some(flag) => Ok(flag),
            None => Ok(n <= 10),
        }
    }

    /// Configurations of the sub-runs this one expands to, in order.
    pub fn expand(&self) -> Result<Vec<(String, RunConfig)>> {
        match self.kind {
            ExperimentKind::Single | ExperimentKind::DosStudy => Ok(vec![(self.name.clone(), self.clone())]),
            ExperimentKind::Sweep => {
                let sweep = self
                    .sweep
                    .as_ref()
                    .ok_or_else(|| Error::Config("kind = \"sweep\" needs a [sweep] section".into()))?;
                if sweep.values.is_empty() {
                    return Err(Error::Config("sweep.values must not be empty".into()));
                }
                sweep
                    .values
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let mut sub = self.clone();
                        sub.kind = ExperimentKind::Single;
                        sub.sweep = None;
                        match sweep.axis {
                            SweepAxis::N => {
                                if !self.model.fields.is_empty() {
                                    return Err(Error::Config(
                                        "an N sweep cannot use explicit model.fields".into(),
                                    ));
                                }
                                sub.model.n = whole(v, "sweep value for n", 2)?;
                            }
                            SweepAxis::ChiA => sub.ansatz.chi_a = whole(v, "sweep value for chi-a", 1)?,
                            SweepAxis::Layers => sub.ansatz.layers = whole(v, "sweep value for layers", 1)?,
                            SweepAxis::W => {
                                sub.model.disorder_w = v;
                                sub.model.fields.clear();
                            }
                        }
                        sub.train.seed = derive_seed(self.train.seed, i as u64);
                        let name = format!("{}_{}", sweep.axis.name(), v);
                        sub.name = name.clone();
                        Ok((name, sub))
                    })
                    .collect()
            }
            ExperimentKind::DisorderScan => {
                let d = self.disorder.clone().unwrap_or_default();
                if d.realizations == 0 {
                    return Err(Error::Config("disorder.realizations must be at least 1".into()));
                }
                let ws = if d.w_values.is_empty() {
                    vec![self.model.disorder_w]
                } else {
                    d.w_values.clone()
                };
                let mut out = Vec::new();
                for (wi, &w) in ws.iter().enumerate() {
                    for r in 0..d.realizations {
                        let mut sub = self.clone();
                        sub.kind = ExperimentKind::Single;
                        sub.disorder = None;
                        sub.model.disorder_w = w;
                        sub.model.fields.clear();
                        sub.model.seed = derive_seed(self.model.seed, r as u64);
                        sub.train.seed = derive_seed(self.train.seed, (wi * d.realizations + r) as u64);
                        let name = format!("w_{w}_r{r}");
                        sub.name = name.clone();
                        out.push((name, sub));
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| Error::Config(format!("{name}: {e}"));
        self.train.validate().map_err(|e| field("train", e))?;
        if self.ansatz.layers == 0 || self.ansatz.chi_a == 0 {
            return Err(Error::Config("ansatz.layers and ansatz.chi_a must be at least 1".into()));
        }
        if self.analysis.ee_stats_count == 0 {
            return Err(Error::Config("analysis.ee_stats_count must be at least 1".into()));
        }
        for (name, sub) in self.expand()? {
            sub.model.validate().map_err(|e| field(&format!("model ({name})"), e))?;
            sub.wants_ed(sub.model.n)?;
            if self.wants_ee() {
                sub.ee_exhaustive(sub.model.n)?;
            }
            if sub.model.n > ENUMERATE_SITES && sub.sampling.samples < 100 {
                return Err(Error::Config(
                    "sampling.samples must be at least 100 for the density of states".into(),
                ));
            }
        }
        if let Some(d) = &self.disorder {
            if d.w_values.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                return Err(Error::Config("disorder.w_values must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Independent seed for sub-run `index` of a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    // SplitMix64 finalizer over the combined input
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Trained parameters of a finished run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub spec: IsingSpec,
    pub mps: SpectrumMps,
    pub circuit: BrickwallCircuit,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub n: usize,
    pub h: f64,
    pub disorder_w: f64,
    pub disorder_seed: u64,
    pub layers: usize,
    pub chi_a: usize,
    pub chi_t: usize,
    /// Seed of the kept training run.
    pub seed: u64,
    pub steps: usize,
    pub best_step: usize,
    pub f_initial: f64,
    pub f: f64,
    pub f_validation: f64,
    pub discarded_weight: f64,
    pub epsilon: Option<f64>,
    pub sigma_ed: Option<f64>,
    pub sigma_tnvd: Option<f64>,
    pub r_ed: Option<f64>,
    pub r_tnvd: Option<f64>,
    pub ee_ground_error: Option<f64>,
    pub ee_center_error: Option<f64>,
    pub ee_mean: Option<f64>,
    pub poisson: Option<FitParams>,
    /// The only entry that differs between identical reruns.
    pub wall_seconds: f64,
}

#[derive(Serialize, Deserialize)]
struct SpectrumRow {
    source: String,
    index: Option<u64>,
    bits: String,
    energy: f64,
}

#[derive(Serialize, Deserialize)]
struct HistRow {
    source: String,
    quantity: String,
    bin_left: f64,
    bin_right: f64,
    center: f64,
    count: f64,
    normalization: String,
}

#[derive(Serialize, Deserialize)]
struct FitRow {
    source: String,
    quantity: String,
    model: String,
    amplitude: Option<f64>,
    sigma: Option<f64>,
    mu: Option<f64>,
    omega: Option<f64>,
    s_tilde: Option<f64>,
    delta: Option<f64>,
    residual_norm: f64,
}

#[derive(Serialize, Deserialize)]
struct EeRow {
    source: String,
    bits: String,
    energy: f64,
    energy_normalized: f64,
    entropy: f64,
    discarded_weight: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct LowLyingRow {
    rank: usize,
    energy_tnvd: f64,
    energy_ed: Option<f64>,
}

/// Column names of every CSV file a run writes.
pub const SCHEMAS: &[(&str, &[&str])] = &[
    (
        "train_log.csv",
        &[
            "step",
            "f",
            "term_hh",
            "term_tt",
            "term_cross",
            "distance",
            "discarded_weight",
            "learning_rate",
            "f_validation",
        ],
    ),
    ("timing.csv", &["step", "seconds"]),
    ("spectrum.csv", &["source", "index", "bits", "energy"]),
    (
        "dos.csv",
        &["source", "quantity", "bin_left", "bin_right", "center", "count", "normalization"],
    ),
    (
        "fit_params.csv",
        &[
            "source",
            "quantity",
            "model",
            "amplitude",
            "sigma",
            "mu",
            "omega",
            "s_tilde",
            "delta",
            "residual_norm",
        ],
    ),
    (
        "ee.csv",
        &["source", "bits", "energy", "energy_normalized", "entropy", "discarded_weight"],
    ),
    ("low_lying.csv", &["rank", "energy_tnvd", "energy_ed"]),
    (
        "sweep.csv",
        &[
            "axis",
            "value",
            "status",
            "f",
            "f_validation",
            "epsilon",
            "sigma_ed",
            "sigma_tnvd",
            "r_ed",
            "r_tnvd",
            "wall_seconds",
            "error",
        ],
    ),
    (
        "disorder.csv",
        &[
            "w",
            "realization",
            "disorder_seed",
            "status",
            "f",
            "epsilon",
            "r_ed",
            "r_tnvd",
            "ee_ground_error",
            "ee_center_error",
            "error",
        ],
    ),
    (
        "disorder_summary.csv",
        &[
            "w",
            "runs",
            "mean_f",
            "mean_epsilon",
            "mean_r_ed",
            "mean_r_tnvd",
            "r_ed_normalized",
            "mean_ee_ground_error",
            "mean_ee_center_error",
        ],
    ),
];

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let columns = SCHEMAS
        .iter()
        .find(|(file, _)| *file == name)
        .map(|(_, cols)| *cols)
        .ok_or_else(|| Error::Config(format!("no schema for {name}")))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    w.write_record(columns)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn hist_rows(source: &str, quantity: &str, h: &DosHistogram) -> Vec<HistRow> {
    let norm = match h.normalization {
        crate::analysis::Normalization::Raw => "raw",
        crate::analysis::Normalization::MaxNormalized => "max-normalized",
    };
    h.edges
        .windows(2)
        .zip(&h.counts)
        .map(|(e, &count)| HistRow {
            source: source.into(),
            quantity: quantity.into(),
            bin_left: e[0],
            bin_right: e[1],
            center: 0.5 * (e[0] + e[1]),
            count,
            normalization: norm.into(),
        })
        .collect()
}

fn fit_row(source: &str, quantity: &str, fit: &FitResult) -> FitRow {
    let mut row = FitRow {
        source: source.into(),
        quantity: quantity.into(),
        model: String::new(),
        amplitude: None,
        sigma: None,
        mu: None,
        omega: None,
        s_tilde: None,
        delta: None,
        residual_norm: fit.residual_norm,
    };
    match fit.params {
        FitParams::Gaussian { amplitude, sigma, mu } => {
            row.model = "gaussian".into();
            row.amplitude = Some(amplitude);
            row.sigma = Some(sigma);
            row.mu = Some(mu);
        }
        FitParams::ShiftedPoisson { omega, s_tilde, delta } => {
            row.model = "shifted-poisson".into();
            row.omega = Some(omega);
            row.s_tilde = Some(s_tilde);
            row.delta = Some(delta);
        }
    }
    row
}

/// Gaussian fit that reports failures as a missing value.
fn try_gaussian(values: &[f64], binning: Binning) -> Result<Option<(DosHistogram, FitResult)>> {
    let hist = dos_histogram(values, binning)?;
    match fit_gaussian(&hist) {
        Ok(fit) => Ok(Some((hist, fit))),
        Err(Error::Fit(msg)) => {
            log::warn!("Gaussian fit skipped: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn real_to_complex(v: &[f64]) -> Vec<C64> {
    v.iter().map(|&x| C64::new(x, 0.0)).collect()
}

/// Analysis of trained parameters; writes the CSV artifacts into `dir`
/// and fills the analysis fields of `summary`.
pub fn analyze_model(cfg: &RunConfig, model: &ModelFile, dir: &Path, summary: &mut Summary) -> Result<()> {
    let n = model.spec.n;
    let policy = cfg.train.validation_policy();
    let mut spectrum = Vec::new();
    let mut hist = Vec::new();
    let mut fits = Vec::new();

    let exhaustive = n <= ENUMERATE_SITES;
    let tnvd: Vec<f64> = if exhaustive {
        let e = model.mps.enumerate()?;
        for (i, &x) in e.iter().enumerate() {
            spectrum.push(SpectrumRow {
                source: "tnvd".into(),
                index: Some(i as u64),
                bits: index_to_bits(i, n).iter().map(|b| (b'0' + b) as char).collect(),
                energy: x,
            });
        }
        e
    } else {
        let samples = model.mps.sample_entries(cfg.sampling.samples, cfg.sampling.seed);
        for (bits, x) in &samples {
            spectrum.push(SpectrumRow {
                source: "tnvd-sample".into(),
                index: None,
                bits: bits.iter().map(|b| (b'0' + b) as char).collect(),
                energy: *x,
            });
        }
        samples.into_iter().map(|s| s.1).collect()
    };
    if let Some((h, fit)) = try_gaussian(&tnvd, cfg.sampling.binning)? {
        summary.sigma_tnvd = fit.sigma();
        hist.extend(hist_rows("tnvd", "energy", &h));
        fits.push(fit_row("tnvd", "energy", &fit));
    }
    if exhaustive {
        summary.r_tnvd = level_spacing_ratio(&tnvd).ok().map(|s| s.r);
    }

    let ed = if cfg.wants_ed(n)? {
        let want_vectors = cfg.wants_ee() && n <= VECTORS_MAX_SITES && cfg.ee_exhaustive(n)?;
        Some(full_spectrum(&model.spec, want_vectors)?)
    } else {
        None
    };
    if let Some(ed) = &ed {
        for (i, &x) in ed.eigenvalues.iter().enumerate() {
            spectrum.push(SpectrumRow {
                source: "ed".into(),
                index: Some(i as u64),
                bits: String::new(),
                energy: x,
            });
        }
        summary.epsilon = Some(mean_abs_error(&ed.eigenvalues, &tnvd)?);
        summary.r_ed = Some(level_spacing_ratio(&ed.eigenvalues)?.r);
        if let Some((h, fit)) = try_gaussian(&ed.eigenvalues, cfg.sampling.binning)? {
            summary.sigma_ed = fit.sigma();
            hist.extend(hist_rows("ed", "energy", &h));
            fits.push(fit_row("ed", "energy", &fit));
        }
    }

    if exhaustive {
        let mut sorted = tnvd.clone();
        sorted.sort_by(f64::total_cmp);
        let rows: Vec<LowLyingRow> = sorted
            .iter()
            .take(cfg.analysis.low_lying)
            .enumerate()
            .map(|(rank, &e)| LowLyingRow {
                rank,
                energy_tnvd: e,
                energy_ed: ed.as_ref().map(|d| d.eigenvalues[rank]),
            })
            .collect();
        write_csv(&dir.join("low_lying.csv"), &rows)?;
    }

    if cfg.wants_ee() {
        let points: Vec<EePoint> = if cfg.ee_exhaustive(n)? {
            ee_energy_exhaustive(&model.mps, &model.circuit, &policy)?
        } else {
            ee_energy_distribution(
                &model.mps,
                &model.circuit,
                cfg.sampling.ee_samples,
                cfg.sampling.seed,
                &policy,
            )?
        };
        let mut rows: Vec<EeRow> = points
            .iter()
            .map(|p| EeRow {
                source: "tnvd".into(),
                bits: p.bits.clone(),
                energy: p.energy,
                energy_normalized: p.energy_normalized,
                entropy: p.entropy,
                discarded_weight: Some(p.discarded_weight),
            })
            .collect();
        let entropies: Vec<f64> = points.iter().map(|p| p.entropy).collect();
        summary.ee_mean = Some(entropies.iter().sum::<f64>() / entropies.len().max(1) as f64);
        let ee_hist = dos_histogram(&entropies, cfg.sampling.ee_binning)?;
        hist.extend(hist_rows("tnvd", "entropy", &ee_hist.max_normalized()));
        match fit_shifted_poisson(&ee_hist) {
            Ok(fit) => {
                summary.poisson = Some(fit.params);
                fits.push(fit_row("tnvd", "entropy", &fit));
            }
            Err(Error::Fit(msg)) => log::warn!("shifted Poisson fit skipped: {msg}"),
            Err(e) => return Err(e),
        }
        if let Some(ed) = ed.as_ref().filter(|d| d.eigenvectors.is_some()) {
            let cut = n / 2;
            let exact: Vec<(f64, f64)> = (0..ed.dim())
                .into_par_iter()
                .map(|k| {
                    let v = real_to_complex(&ed.eigenvector(k).expect("vectors were computed"));
                    Ok((ed.eigenvalues[k], dense_entanglement_entropy(&v, n, cut)?))
                })
                .collect::<Result<_>>()?;
            let normalized = normalize_by_max_abs(&ed.eigenvalues);
            for ((e, s), en) in exact.iter().zip(normalized) {
                rows.push(EeRow {
                    source: "ed".into(),
                    bits: String::new(),
                    energy: *e,
                    energy_normalized: en,
                    entropy: *s,
                    discarded_weight: None,
                });
            }
            let approx: Vec<(f64, f64)> = points.iter().map(|p| (p.energy, p.entropy)).collect();
            if approx.len() == exact.len() {
                let st = ee_error_stats(&approx, &exact, cfg.analysis.ee_stats_count)?;
                summary.ee_ground_error = Some(st.ground);
                summary.ee_center_error = Some(st.center);
            }
        }
        write_csv(&dir.join("ee.csv"), &rows)?;
    }

    write_csv(&dir.join("spectrum.csv"), &spectrum)?;
    write_csv(&dir.join("dos.csv"), &hist)?;
    write_csv(&dir.join("fit_params.csv"), &fits)?;
    Ok(())
}

fn train_in_dir(cfg: &RunConfig, dir: &Path, resume: bool) -> Result<TrainOutcome> {
    let spec = &cfg.model;
    let mut kept: Option<TrainOutcome> = None;
    for r in 0..cfg.train.restarts {
        let run = TrainConfig {
            seed: restart_seed(cfg.train.seed, r),
            ..cfg.train.clone()
        };
        let ckpt_path = if cfg.train.restarts == 1 {
            dir.join("checkpoint.json")
        } else {
            dir.join(format!("checkpoint_r{r}.json"))
        };
        let mut trainer = if resume && ckpt_path.exists() {
            log::info!("resuming from {}", ckpt_path.display());
            Trainer::resume(Checkpoint::load(&ckpt_path)?, Some(run.clone()))?
        } else {
            Trainer::new(spec, cfg.ansatz.layers, cfg.ansatz.chi_a, run.clone())?
        };
        trainer.run_until(run.max_steps, |t| t.checkpoint().save(&ckpt_path))?;
        trainer.checkpoint().save(&ckpt_path)?;
        let out = trainer.finish()?;
        log::info!("{}: restart {r} finished with F = {}", cfg.name, out.loss.f);
        if kept.as_ref().is_none_or(|k| out.loss.f < k.loss.f) {
            kept = Some(out);
        }
    }
    Ok(kept.expect("at least one restart"))
}

/// Train and analyze one configuration in `dir`.
pub fn run_single(cfg: &RunConfig, dir: &Path, resume: bool) -> Result<Summary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let marker = dir.join("ERROR");
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let result = run_single_inner(cfg, dir, resume);
    if let Err(e) = &result {
        let _ = fs::write(&marker, format!("{e}\n"));
    }
    result
}

fn run_single_inner(cfg: &RunConfig, dir: &Path, resume: bool) -> Result<Summary> {
    cfg.validate()?;
    let clock = Instant::now();
    fs::write(dir.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(dir, e))?;
    let out = train_in_dir(cfg, dir, resume)?;
    write_csv::<LogRow>(&dir.join("train_log.csv"), &out.log)?;
    write_csv::<TimingRow>(&dir.join("timing.csv"), &out.timing)?;
    let model = ModelFile {
        spec: cfg.model.clone(),
        mps: out.mps.clone(),
        circuit: out.circuit.clone(),
    };
    write_json(&dir.join("model.json"), &model)?;
    let mut summary = Summary {
        name: cfg.name.clone(),
        n: cfg.model.n,
        h: cfg.model.h,
        disorder_w: cfg.model.disorder_w,
        disorder_seed: cfg.model.seed,
        layers: cfg.ansatz.layers,
        chi_a: cfg.ansatz.chi_a,
        chi_t: cfg.train.chi_t,
        seed: out.seed,
        steps: out.log.last().map_or(0, |r| r.step),
        best_step: out.best_step,
        f_initial: out.log.first().map_or(f64::NAN, |r| r.f),
        f: out.loss.f,
        f_validation: out.f_validation,
        discarded_weight: out.loss.discarded_weight,
        ..Summary::default()
    };
    analyze_model(cfg, &model, dir, &mut summary)?;
    summary.wall_seconds = clock.elapsed().as_secs_f64();
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Recompute the analysis artifacts of a finished run directory.
pub fn analyze_dir(dir: &Path) -> Result<Summary> {
    let cfg = RunConfig::load(&dir.join("config.toml"))?;
    let model: ModelFile = read_json(&dir.join("model.json"))?;
    let mut summary: Summary = read_json(&dir.join("summary.json"))?;
    let wall = summary.wall_seconds;
    let training = Summary {
        sigma_ed: None,
        sigma_tnvd: None,
        r_ed: None,
        r_tnvd: None,
        epsilon: None,
        ee_ground_error: None,
        ee_center_error: None,
        ee_mean: None,
        poisson: None,
        ..summary
    };
    summary = training;
    analyze_model(&cfg, &model, dir, &mut summary)?;
    summary.wall_seconds = wall;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub status: String,
    pub f: Option<f64>,
    pub f_validation: Option<f64>,
    pub epsilon: Option<f64>,
    pub sigma_ed: Option<f64>,
    pub sigma_tnvd: Option<f64>,
    pub r_ed: Option<f64>,
    pub r_tnvd: Option<f64>,
    pub wall_seconds: Option<f64>,
    pub error: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DisorderRow {
    pub w: f64,
    pub realization: usize,
    pub disorder_seed: u64,
    pub status: String,
    pub f: Option<f64>,
    pub epsilon: Option<f64>,
    pub r_ed: Option<f64>,
    pub r_tnvd: Option<f64>,
    pub ee_ground_error: Option<f64>,
    pub ee_center_error: Option<f64>,
    pub error: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DisorderSummaryRow {
    pub w: f64,
    pub runs: usize,
    pub mean_f: Option<f64>,
    pub mean_epsilon: Option<f64>,
    pub mean_r_ed: Option<f64>,
    pub mean_r_tnvd: Option<f64>,
    /// `mean_r_ed` divided by its maximum over the scan.
    pub r_ed_normalized: Option<f64>,
    pub mean_ee_ground_error: Option<f64>,
    pub mean_ee_center_error: Option<f64>,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

fn run_all(cfg: &RunConfig, dir: &Path, resume: bool) -> Result<Vec<(RunConfig, Result<Summary>)>> {
    let subs = cfg.expand()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(dir, e))?;
    let results = pool(cfg.workers)?.install(|| {
        subs.into_par_iter()
            .map(|(name, sub)| {
                let out = run_single(&sub, &dir.join(&name), resume);
                if let Err(e) = &out {
                    log::error!("{name} failed: {e}");
                }
                (sub, out)
            })
            .collect()
    });
    Ok(results)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One trained run per sweep value; failures are recorded per row.
pub fn run_sweep(cfg: &RunConfig, dir: &Path, resume: bool) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("kind = \"sweep\" needs a [sweep] section".into()))?;
    let rows: Vec<SweepRow> = run_all(cfg, dir, resume)?
        .into_iter()
        .zip(&sweep.values)
        .map(|((_, res), &value)| match res {
            Ok(s) => SweepRow {
                axis: sweep.axis.name().into(),
                value,
                status: "ok".into(),
                f: Some(s.f),
                f_validation: Some(s.f_validation),
                epsilon: s.epsilon,
                sigma_ed: s.sigma_ed,
                sigma_tnvd: s.sigma_tnvd,
                r_ed: s.r_ed,
                r_tnvd: s.r_tnvd,
                wall_seconds: Some(s.wall_seconds),
                error: String::new(),
            },
            Err(e) => SweepRow {
                axis: sweep.axis.name().into(),
                value,
                status: "error".into(),
                f: None,
                f_validation: None,
                epsilon: None,
                sigma_ed: None,
                sigma_tnvd: None,
                r_ed: None,
                r_tnvd: None,
                wall_seconds: None,
                error: e.to_string(),
            },
        })
        .collect();
    write_csv(&dir.join("sweep.csv"), &rows)?;
    Ok(rows)
}

/// Training runs over disorder strengths and realizations, with per-run and
/// per-strength aggregates.
pub fn run_disorder_scan(cfg: &RunConfig, dir: &Path, resume: bool) -> Result<Vec<DisorderRow>> {
    cfg.validate()?;
    let rows: Vec<DisorderRow> = run_all(cfg, dir, resume)?
        .into_iter()
        .map(|(sub, res)| {
            let realization = sub
                .name
                .rsplit_once("_r")
                .and_then(|(_, r)| r.parse().ok())
                .unwrap_or(0);
            let mut row = DisorderRow {
                w: sub.model.disorder_w,
                realization,
                disorder_seed: sub.model.seed,
                status: "ok".into(),
                f: None,
                epsilon: None,
                r_ed: None,
                r_tnvd: None,
                ee_ground_error: None,
                ee_center_error: None,
                error: String::new(),
            };
            match res {
                Ok(s) => {
                    row.f = Some(s.f);
                    row.epsilon = s.epsilon;
                    row.r_ed = s.r_ed;
                    row.r_tnvd = s.r_tnvd;
                    row.ee_ground_error = s.ee_ground_error;
                    row.ee_center_error = s.ee_center_error;
                }
                Err(e) => {
                    row.status = "error".into();
                    row.error = e.to_string();
                }
            }
            row
        })
        .collect();
    write_csv(&dir.join("disorder.csv"), &rows)?;

    let mut ws: Vec<f64> = Vec::new();
    for r in &rows {
        if !ws.contains(&r.w) {
            ws.push(r.w);
        }
    }
    let mut summary: Vec<DisorderSummaryRow> = ws
        .iter()
        .map(|&w| {
            let group: Vec<&DisorderRow> = rows.iter().filter(|r| r.w == w && r.status == "ok").collect();
            DisorderSummaryRow {
                w,
                runs: group.len(),
                mean_f: mean(group.iter().map(|r| r.f)),
                mean_epsilon: mean(group.iter().map(|r| r.epsilon)),
                mean_r_ed: mean(group.iter().map(|r| r.r_ed)),
                mean_r_tnvd: mean(group.iter().map(|r| r.r_tnvd)),
                r_ed_normalized: None,
                mean_ee_ground_error: mean(group.iter().map(|r| r.ee_ground_error)),
                mean_ee_center_error: mean(group.iter().map(|r| r.ee_center_error)),
            }
        })
        .collect();
    let r_max = summary
        .iter()
        .filter_map(|s| s.mean_r_ed)
        .fold(f64::NEG_INFINITY, f64::max);
    if r_max > 0.0 {
        for s in &mut summary {
            s.r_ed_normalized = s.mean_r_ed.map(|r| r / r_max);
        }
    }
    write_csv(&dir.join("disorder_summary.csv"), &summary)?;
    Ok(rows)
}

/// What [`execute`] produced.
#[derive(Debug)]
pub enum RunOutput {
    Single(Summary),
    Sweep(Vec<SweepRow>),
    DisorderScan(Vec<DisorderRow>),
}

/// Run a configuration in its output directory.
pub fn execute(cfg: &RunConfig, resume: bool) -> Result<(PathBuf, RunOutput)> {
    let dir = cfg.output_dir();
    let out = match cfg.kind {
        ExperimentKind::Single | ExperimentKind::DosStudy => RunOutput::Single(run_single(cfg, &dir, resume)?),
        ExperimentKind::Sweep => RunOutput::Sweep(run_sweep(cfg, &dir, resume)?),
        ExperimentKind::DisorderScan => RunOutput::DisorderScan(run_disorder_scan(cfg, &dir, resume)?),
    };
    Ok((dir, out))
}
