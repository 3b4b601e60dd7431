//! Diagnostics: eigenvalue error, density of states with Gaussian fits,
//! level-spacing statistics, and entanglement entropy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::BrickwallCircuit;
use crate::error::{Error, Result};
use crate::evolution::{MpsState, TruncationPolicy};
use crate::spectrum::{index_to_bits, SpectrumMps};
use crate::tensor::{svd_matrix, DenseTensor, C64};

/// Allowed deviation of a state's norm from one.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Mean absolute difference between two spectra after sorting both.
pub fn mean_abs_error(ed: &[f64], tnvd: &[f64]) -> Result<f64> {
    if ed.len() != tnvd.len() || ed.is_empty() {
        return Err(Error::Analysis(format!(
            "spectra of lengths {} and {} cannot be compared",
            ed.len(),
            tnvd.len()
        )));
    }
    let mut a = ed.to_vec();
    let mut b = tnvd.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum Binning {
    #[default]
    FreedmanDiaconis,
    Count {
        bins: usize,
    },
    Width {
        width: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    Raw,
    MaxNormalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DosHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<f64>,
    pub normalization: Normalization,
    /// Number of values binned.
    pub samples: usize,
}

impl DosHistogram {
    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn bin_width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }

    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0.0).count()
    }

    pub fn max_normalized(&self) -> Self {
        let max = self.counts.iter().cloned().fold(0.0, f64::max);
        let counts = if max > 0.0 {
            self.counts.iter().map(|c| c / max).collect()
        } else {
            self.counts.clone()
        };
        Self {
            edges: self.edges.clone(),
            counts,
            normalization: Normalization::MaxNormalized,
            samples: self.samples,
        }
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Histogram of `values` over their range with raw counts.
pub fn dos_histogram(values: &[f64], binning: Binning) -> Result<DosHistogram> {
    if values.is_empty() {
        return Err(Error::Analysis("no values to bin".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Analysis("values must be finite".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let range = hi - lo;
    let bins = if range <= 0.0 {
        1
    } else {
        match binning {
            Binning::Count { bins } => bins.max(1),
            Binning::Width { width } => {
                if !(width > 0.0) {
                    return Err(Error::Analysis(format!("bin width must be positive, got {width}")));
                }
                (range / width).ceil().max(1.0) as usize
            }
            Binning::FreedmanDiaconis => {
                let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
                let n = sorted.len() as f64;
                if iqr > 0.0 {
                    let width = 2.0 * iqr / n.cbrt();
                    ((range / width).ceil() as usize).clamp(1, 100_000)
                } else {
                    (n.sqrt().ceil() as usize).max(1)
                }
            }
        }
    };
    let (start, width) = if range > 0.0 {
        (lo, range / bins as f64)
    } else {
        (lo - 0.5, 1.0)
    };
    let edges: Vec<f64> = (0..=bins).map(|i| start + width * i as f64).collect();
    let mut counts = vec![0.0; bins];
    for v in values {
        let idx = (((v - start) / width) as usize).min(bins - 1);
        counts[idx] += 1.0;
    }
    Ok(DosHistogram {
        edges,
        counts,
        normalization: Normalization::Raw,
        samples: values.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum FitParams {
    /// `A exp(-(E - mu)^2 / (2 sigma^2))` with `mu` held fixed.
    Gaussian { amplitude: f64, sigma: f64, mu: f64 },
    /// `exp(-omega (s_tilde - S) / delta)` with `delta` the bin width.
    ShiftedPoisson { omega: f64, s_tilde: f64, delta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: FitParams,
    /// Euclidean norm of the residuals at the optimum.
    pub residual_norm: f64,
}

impl FitResult {
    pub fn sigma(&self) -> Option<f64> {
        match self.params {
            FitParams::Gaussian { sigma, .. } => Some(sigma),
            _ => None,
        }
    }
}

/// Damped Gauss-Newton for two parameters. `model` returns the value and
/// its gradient with respect to the parameters.
fn levenberg_marquardt(
    x: &[f64],
    y: &[f64],
    start: [f64; 2],
    model: impl Fn(f64, [f64; 2]) -> (f64, [f64; 2]),
) -> Result<([f64; 2], f64)> {
    let cost = |p: [f64; 2]| -> f64 {
        x.iter()
            .zip(y)
            .map(|(&xi, &yi)| (model(xi, p).0 - yi).powi(2))
            .sum()
    };
    let mut p = start;
    let mut c = cost(p);
    let mut lambda = 1e-3;
    for _ in 0..500 {
        let mut jtj = [[0.0; 2]; 2];
        let mut jtr = [0.0; 2];
        for (&xi, &yi) in x.iter().zip(y) {
            let (f, g) = model(xi, p);
            let r = f - yi;
            for a in 0..2 {
                jtr[a] += g[a] * r;
                for b in 0..2 {
                    jtj[a][b] += g[a] * g[b];
                }
            }
        }
        let mut improved = false;
        for _ in 0..50 {
            let m = [
                [jtj[0][0] * (1.0 + lambda), jtj[0][1]],
                [jtj[1][0], jtj[1][1] * (1.0 + lambda)],
            ];
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            if det == 0.0 || !det.is_finite() {
                lambda *= 10.0;
                continue;
            }
            let d0 = -(m[1][1] * jtr[0] - m[0][1] * jtr[1]) / det;
            let d1 = -(m[0][0] * jtr[1] - m[1][0] * jtr[0]) / det;
            let trial = [p[0] + d0, p[1] + d1];
            let ct = cost(trial);
            if ct.is_finite() && ct <= c {
                let done = (c - ct) <= 1e-15 * c.max(1e-300)
                    && d0.abs() <= 1e-12 * p[0].abs().max(1e-12)
                    && d1.abs() <= 1e-12 * p[1].abs().max(1e-12);
                p = trial;
                c = ct;
                lambda = (lambda * 0.3).max(1e-15);
                improved = true;
                if done {
                    return Ok((p, c.sqrt()));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    if !c.is_finite() {
        return Err(Error::Fit("least squares diverged".into()));
    }
    Ok((p, c.sqrt()))
}

/// Fit `A exp(-E^2 / (2 sigma^2))` to the histogram over its bin centers.
pub fn fit_gaussian(hist: &DosHistogram) -> Result<FitResult> {
    if hist.samples < 100 {
        return Err(Error::Fit(format!(
            "at least 100 samples are needed, got {}",
            hist.samples
        )));
    }
    if hist.occupied_bins() < 2 {
        return Err(Error::Fit("histogram occupies a single bin".into()));
    }
    let x = hist.centers();
    let y = &hist.counts;
    let total: f64 = y.iter().sum();
    let second: f64 = x.iter().zip(y).map(|(xi, yi)| xi * xi * yi).sum::<f64>() / total;
    let amp0 = y.iter().cloned().fold(0.0, f64::max);
    let (p, residual_norm) = levenberg_marquardt(&x, y, [amp0, second.sqrt()], |xi, p| {
        let [a, s] = p;
        let e = (-xi * xi / (2.0 * s * s)).exp();
        (a * e, [e, a * e * xi * xi / (s * s * s)])
    })?;
    let sigma = p[1].abs();
    if !(sigma > 0.0 && sigma.is_finite() && residual_norm.is_finite()) {
        return Err(Error::Fit(format!("Gaussian fit failed (sigma = {sigma})")));
    }
    Ok(FitResult {
        params: FitParams::Gaussian {
            amplitude: p[0],
            sigma,
            mu: 0.0,
        },
        residual_norm,
    })
}

/// Fit `exp(-omega (s_tilde - S) / delta)` to max-normalized counts, with
/// `delta` the bin width.
pub fn fit_shifted_poisson(hist: &DosHistogram) -> Result<FitResult> {
    if hist.samples < 50 {
        return Err(Error::Fit(format!(
            "at least 50 samples are needed, got {}",
            hist.samples
        )));
    }
    if hist.counts.iter().all(|&c| c <= 0.0) {
        return Err(Error::Fit("histogram has no positive counts".into()));
    }
    let norm = hist.max_normalized();
    let x = norm.centers();
    let y = &norm.counts;
    let delta = hist.bin_width();
    // start from a log-linear regression over the occupied bins
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(_, &c)| c > 0.0)
        .map(|(&s, &c)| (s, c.ln()))
        .collect();
    let start = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        [my - b * mx, b]
    } else {
        [0.0, 0.0]
    };
    let (p, residual_norm) = levenberg_marquardt(&x, y, start, |xi, p| {
        let v = (p[0] + p[1] * xi).exp();
        (v, [v, v * xi])
    })?;
    let [a, b] = p;
    let omega = b * delta;
    let s_tilde = if b.abs() * delta < 1e-9 { 0.0 } else { -a / b };
    if !(omega.is_finite() && s_tilde.is_finite()) {
        return Err(Error::Fit("shifted Poisson fit failed".into()));
    }
    Ok(FitResult {
        params: FitParams::ShiftedPoisson {
            omega,
            s_tilde,
            delta,
        },
        residual_norm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    /// Mean of `min(d_n, d_{n-1}) / max(d_n, d_{n-1})`.
    pub r: f64,
    pub used: usize,
    /// Interior levels skipped because an adjacent spacing vanished.
    pub skipped: usize,
}

/// Mean ratio of consecutive level spacings.
pub fn level_spacing_ratio(eigenvalues: &[f64]) -> Result<LevelStats> {
    if eigenvalues.len() < 4 {
        return Err(Error::Analysis(format!(
            "need at least 4 levels, got {}",
            eigenvalues.len()
        )));
    }
    let mut e = eigenvalues.to_vec();
    e.sort_by(f64::total_cmp);
    let scale = e[e.len() - 1].abs().max(e[0].abs()).max(1.0);
    let tol = 1e-12 * scale;
    let gaps: Vec<f64> = e.windows(2).map(|w| w[1] - w[0]).collect();
    let (mut sum, mut used, mut skipped) = (0.0, 0usize, 0usize);
    for w in gaps.windows(2) {
        if w[0] <= tol || w[1] <= tol {
            skipped += 1;
            continue;
        }
        sum += w[0].min(w[1]) / w[0].max(w[1]);
        used += 1;
    }
    if used == 0 {
        return Err(Error::Analysis("every spacing ratio involved a degeneracy".into()));
    }
    Ok(LevelStats {
        r: sum / used as f64,
        used,
        skipped,
    })
}

/// `-sum p log2 p` with `p` the normalized squared Schmidt values.
pub fn entropy_from_schmidt(s: &[f64]) -> f64 {
    let total: f64 = s.iter().map(|x| x * x).sum();
    if total <= 0.0 {
        return 0.0;
    }
    s.iter()
        .map(|x| x * x / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.log2())
        .sum()
}

/// Entanglement entropy in bits across the bond between sites `cut - 1`
/// and `cut`.
pub fn entanglement_entropy(state: &MpsState, cut: usize) -> Result<f64> {
    let norm = state.norm();
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::Analysis(format!("state is not normalized (norm {norm})")));
    }
    Ok(entropy_from_schmidt(&state.schmidt_values(cut)?))
}

/// Entanglement entropy of a dense state vector, first site most
/// significant, across the cut after `cut` sites.
pub fn dense_entanglement_entropy(psi: &[C64], n: usize, cut: usize) -> Result<f64> {
    if psi.len() != 1 << n || cut == 0 || cut >= n {
        return Err(Error::Shape(format!(
            "state of length {} on {n} sites with cut {cut}",
            psi.len()
        )));
    }
    let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::Analysis(format!("state is not normalized (norm {norm})")));
    }
    let m = DenseTensor::new(vec![1 << cut, 1 << (n - cut)], psi.to_vec())?;
    Ok(entropy_from_schmidt(&svd_matrix(&m)?.s))
}

/// Values divided by the largest magnitude among them.
pub fn normalize_by_max_abs(values: &[f64]) -> Vec<f64> {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        values.iter().map(|v| v / max).collect()
    } else {
        values.to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EePoint {
    pub bits: String,
    pub energy: f64,
    /// Energy divided by the largest magnitude in the sampled set.
    pub energy_normalized: f64,
    /// Mid-chain entanglement entropy in bits.
    pub entropy: f64,
    pub discarded_weight: f64,
}

fn bits_string(bits: &[u8]) -> String {
    bits.iter().map(|b| if *b == 0 { '0' } else { '1' }).collect()
}

fn ee_points(
    entries: Vec<(Vec<u8>, f64)>,
    c: &BrickwallCircuit,
    policy: &TruncationPolicy,
) -> Result<Vec<EePoint>> {
    let n = c.sites();
    let cut = n / 2;
    let energies: Vec<f64> = entries.iter().map(|e| e.1).collect();
    let normalized = normalize_by_max_abs(&energies);
    entries
        .into_par_iter()
        .zip(normalized)
        .map(|((bits, energy), energy_normalized)| {
            let st = c.eigenstate_mps(&bits, policy)?;
            Ok(EePoint {
                bits: bits_string(&bits),
                energy,
                energy_normalized,
                entropy: entanglement_entropy(&st, cut)?,
                discarded_weight: st.discarded_weight(),
            })
        })
        .collect()
}

/// Energy and mid-chain entanglement entropy of `count` uniformly sampled
/// eigenstates of a trained ansatz.
pub fn ee_energy_distribution(
    s: &SpectrumMps,
    c: &BrickwallCircuit,
    count: usize,
    seed: u64,
    policy: &TruncationPolicy,
) -> Result<Vec<EePoint>> {
    if s.sites() != c.sites() {
        return Err(Error::Shape("spectrum and circuit sizes differ".into()));
    }
    ee_points(s.sample_entries(count, seed), c, policy)
}

/// [`ee_energy_distribution`] over every bitstring. Guarded at 16 sites.
pub fn ee_energy_exhaustive(
    s: &SpectrumMps,
    c: &BrickwallCircuit,
    policy: &TruncationPolicy,
) -> Result<Vec<EePoint>> {
    let n = s.sites();
    if n > 16 {
        return Err(Error::SizeGuard {
            what: "exhaustive entanglement scan",
            n,
            max: 16,
        });
    }
    let e = s.enumerate()?;
    let entries = e
        .into_iter()
        .enumerate()
        .map(|(i, x)| (index_to_bits(i, n), x))
        .collect();
    ee_points(entries, c, policy)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EeErrorStats {
    /// Mean `|dS|` over the lowest-lying states.
    pub ground: f64,
    /// Mean `|dS|` over the states closest to zero energy.
    pub center: f64,
    /// Mean `|dS|` over all matched states.
    pub all: f64,
    pub count: usize,
}

/// Compare `(energy, entropy)` pairs after matching both sets by ascending
/// energy. `count` states enter each of the ground and center averages.
pub fn ee_error_stats(approx: &[(f64, f64)], exact: &[(f64, f64)], count: usize) -> Result<EeErrorStats> {
    if approx.len() != exact.len() || approx.is_empty() || count == 0 {
        return Err(Error::Analysis(format!(
            "cannot match {} approximate with {} exact states",
            approx.len(),
            exact.len()
        )));
    }
    let mut a = approx.to_vec();
    let mut b = exact.to_vec();
    a.sort_by(|x, y| x.0.total_cmp(&y.0));
    b.sort_by(|x, y| x.0.total_cmp(&y.0));
    let diffs: Vec<(f64, f64)> = a.iter().zip(&b).map(|(x, y)| (y.0, (x.1 - y.1).abs())).collect();
    let k = count.min(diffs.len());
    let ground = diffs[..k].iter().map(|d| d.1).sum::<f64>() / k as f64;
    let mut by_center = diffs.clone();
    by_center.sort_by(|x, y| x.0.abs().total_cmp(&y.0.abs()));
    let center = by_center[..k].iter().map(|d| d.1).sum::<f64>() / k as f64;
    let all = diffs.iter().map(|d| d.1).sum::<f64>() / diffs.len() as f64;
    Ok(EeErrorStats {
        ground,
        center,
        all,
        count: k,
    })
}
