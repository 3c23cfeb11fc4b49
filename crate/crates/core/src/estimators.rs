//! Transport constants from simulation output.
//!
//! Bootstrap errors resample whole trajectories or, for very large ledgers,
//! contiguous blocks of particles. Particles are i.i.d., so blocks are just a
//! cheaper unit of the same resampling.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::billiard::{gamma_const, run_ksb, sample_cosine_2d, sphere_measure, BilliardError, Side};
use crate::gas::{far_exit_profile, run_ensemble, GasError, OccupationLedger};
use crate::geometry::{build_tube, make_finite, GeometryError, TubeFamily, TubeRealization, TubeSpec};
use crate::rng::{derive_seed, stream};
use crate::stats::{bootstrap_stderr, mean_stderr, sum, variance, Estimate};

/// Resamples used by every bootstrap.
pub const BOOTSTRAP_RESAMPLES: usize = 500;
/// Number of blocks a ledger is cut into for the block bootstrap.
pub const BOOTSTRAP_BLOCKS: usize = 1000;
/// Half-length of the window MSD start points are drawn from.
pub const MSD_START_WINDOW: f64 = 1000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error(transparent)]
    Billiard(#[from] BilliardError),
    #[error(transparent)]
    Gas(#[from] GasError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("fit window [{0}, {1}] holds fewer than 5 grid points")]
    EmptyWindow(f64, f64),
    #[error("no particle crossed the tube; raise n_particles to at least 100·H")]
    InsufficientCrossings,
    #[error("invalid estimator input: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MsdCurve {
    pub times: Vec<f64>,
    pub msd: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_traj: usize,
    /// Squared axial displacement of each trajectory at each time.
    #[serde(skip)]
    pub squared: Vec<Vec<f64>>,
}

/// `0` followed by `points_per_decade` log-spaced points per decade from 1 to
/// `t_max` (inclusive).
pub fn log_grid(t_max: f64, points_per_decade: usize) -> Vec<f64> {
    let mut out = vec![0.0];
    let decades = t_max.log10();
    let n = (decades * points_per_decade as f64).round() as usize;
    for k in 0..=n {
        let t = 10f64.powf(k as f64 / points_per_decade as f64);
        if t <= t_max * (1.0 + 1e-12) {
            out.push(t.min(t_max));
        }
    }
    out.dedup();
    out
}

/// Mean squared axial displacement of `n_traj` billiards started from
/// boundary points uniform by arc length in `[-MSD_START_WINDOW,
/// MSD_START_WINDOW]` with cosine directions.
pub fn msd_curve(
    tube: &TubeRealization,
    n_traj: usize,
    t_grid: &[f64],
    seed: u64,
) -> Result<MsdCurve, EstimatorError> {
    if n_traj < 2 {
        return Err(EstimatorError::Invalid("need at least two trajectories".into()));
    }
    let t_max = t_grid.last().copied().unwrap_or(0.0);
    let squared: Vec<Vec<f64>> = (0..n_traj as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, "msd", k);
            let b = tube.sample_boundary_point(-MSD_START_WINDOW, MSD_START_WINDOW, &mut rng);
            let dir = sample_cosine_2d(b.inward_normal, &mut rng);
            let track = run_ksb(tube, b.position, dir, t_max, t_grid, &mut rng)?;
            let x0 = b.position.x;
            Ok(track.samples.iter().map(|x| (x - x0) * (x - x0)).collect())
        })
        .collect::<Result<_, BilliardError>>()?;
    let mut msd = Vec::with_capacity(t_grid.len());
    let mut stderr = Vec::with_capacity(t_grid.len());
    let mut column = vec![0.0; n_traj];
    for j in 0..t_grid.len() {
        for (c, s) in column.iter_mut().zip(&squared) {
            *c = s[j];
        }
        let (m, se) = mean_stderr(&column);
        msd.push(m);
        stderr.push(se);
    }
    Ok(MsdCurve {
        times: t_grid.to_vec(),
        msd,
        stderr,
        n_traj,
        squared,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SelfDiffusionFit {
    pub sigma2: f64,
    pub stderr: f64,
    pub n_points: usize,
    pub t_min: f64,
    pub t_max: f64,
}

fn window_indices(curve: &MsdCurve, t_min: f64, t_max: f64) -> Result<Vec<usize>, EstimatorError> {
    let idx: Vec<usize> = (0..curve.times.len())
        .filter(|&i| curve.times[i] >= t_min && curve.times[i] <= t_max && curve.times[i] > 0.0)
        .collect();
    if idx.len() < 5 {
        return Err(EstimatorError::EmptyWindow(t_min, t_max));
    }
    Ok(idx)
}

/// Weighted least squares of `msd = σ̂² t` through the origin over
/// `[t_min, t_max]`, weights `1/stderr²`. The error is a bootstrap over
/// trajectories with the weights held fixed.
pub fn fit_self_diffusion(
    curve: &MsdCurve,
    t_min: f64,
    t_max: f64,
    seed: u64,
) -> Result<SelfDiffusionFit, EstimatorError> {
    let idx = window_indices(curve, t_min, t_max)?;
    let weight = |i: usize| {
        let se = curve.stderr[i];
        if se > 0.0 && se.is_finite() {
            1.0 / (se * se)
        } else {
            1.0 / (curve.times[i] * curve.times[i])
        }
    };
    let w: Vec<f64> = idx.iter().map(|&i| weight(i)).collect();
    let den = sum(idx.iter().zip(&w).map(|(&i, wi)| wi * curve.times[i] * curve.times[i]));
    let fit = |msd: &dyn Fn(usize) -> f64| sum(idx.iter().zip(&w).map(|(&i, wi)| wi * curve.times[i] * msd(i))) / den;
    let sigma2 = fit(&|i| curve.msd[i]);
    let stderr = if curve.squared.is_empty() {
        f64::NAN
    } else {
        let mut rng = stream(seed, "msd-bootstrap", 0);
        bootstrap_stderr(curve.n_traj, BOOTSTRAP_RESAMPLES, &mut rng, |mult| {
            fit(&|i| {
                sum(curve.squared.iter().zip(mult).map(|(s, &k)| s[i] * k as f64)) / curve.n_traj as f64
            })
        })
    };
    Ok(SelfDiffusionFit {
        sigma2,
        stderr,
        n_points: idx.len(),
        t_min,
        t_max,
    })
}

/// Ordinary least-squares slope of `log msd` against `log t`.
pub fn loglog_slope(curve: &MsdCurve, t_min: f64, t_max: f64) -> Result<f64, EstimatorError> {
    let idx = window_indices(curve, t_min, t_max)?;
    let xs: Vec<f64> = idx.iter().map(|&i| curve.times[i].ln()).collect();
    let ys: Vec<f64> = idx.iter().map(|&i| curve.msd[i].ln()).collect();
    let (mx, _) = mean_stderr(&xs);
    let (my, _) = mean_stderr(&ys);
    let sxy = sum(xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)));
    let sxx = sum(xs.iter().map(|x| (x - mx) * (x - mx)));
    Ok(sxy / sxx)
}

/// Coarse-grained density profile against the linear prediction.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileFit {
    pub theta_hat: f64,
    pub stderr: f64,
    /// Largest `|density − prediction| / prediction` over bins.
    pub max_dev: f64,
    /// Standard error of each bin's density.
    pub bin_stderr: Vec<f64>,
    /// Largest `|density − prediction| / (λ⟨|ω₀|⟩)` over bins, the scale of
    /// the limit theorem.
    pub max_dev_scaled: f64,
    /// Densities by bin, ordered by increasing `x`.
    pub densities: Vec<f64>,
    pub predicted: Vec<f64>,
}

/// Distance-from-far-gate coordinate `(j − 1/2)/m` of each bin, ordered by
/// increasing `x`.
fn far_gate_abscissae(m: usize, side: Side) -> Vec<f64> {
    (0..m)
        .map(|b| {
            let j = if side == Side::Left { m - b } else { b + 1 };
            (j as f64 - 0.5) / m as f64
        })
        .collect()
}

/// Fits `density_j = θ (j − 1/2)/m` through the origin, `j` counting bins
/// from the far gate. The fit is linear in the occupation times, so its error
/// is the plain standard error over injected particles.
pub fn fit_profile_gradient(
    ledger: &OccupationLedger,
    lambda: f64,
    mean_section: f64,
) -> Result<ProfileFit, EstimatorError> {
    let m = ledger.m_bins();
    if m < 5 {
        return Err(EstimatorError::Invalid("need at least 5 bins".into()));
    }
    if ledger.records.is_empty() {
        return Err(EstimatorError::Invalid("empty ledger".into()));
    }
    let s = far_gate_abscissae(m, ledger.side);
    let ss = sum(s.iter().map(|v| v * v));
    let rate = lambda * ledger.gate_measure / PI;
    let width = ledger.length / m as f64;
    let n = ledger.records.len();
    let scale = rate / width;
    let per_particle: Vec<f64> = ledger
        .records
        .iter()
        .map(|r| scale * sum(r.bin_occupation.iter().zip(&s).map(|(o, sj)| o * sj)) / ss)
        .collect();
    let (theta_hat, stderr) = mean_stderr(&per_particle);
    let mut bin_stderr = Vec::with_capacity(m);
    let mut densities = Vec::with_capacity(m);
    let mut column = vec![0.0; n];
    for b in 0..m {
        for (c, r) in column.iter_mut().zip(&ledger.records) {
            *c = scale * r.bin_occupation[b];
        }
        let (d, se) = mean_stderr(&column);
        densities.push(d);
        bin_stderr.push(se);
    }
    let predicted: Vec<f64> = s.iter().map(|sj| lambda * mean_section * sj).collect();
    let max_dev = densities
        .iter()
        .zip(&predicted)
        .map(|(d, p)| (d - p).abs() / p)
        .fold(0.0, f64::max);
    let max_dev_scaled = densities
        .iter()
        .zip(&predicted)
        .map(|(d, p)| (d - p).abs() / (lambda * mean_section))
        .fold(0.0, f64::max);
    Ok(ProfileFit {
        theta_hat,
        stderr,
        max_dev,
        bin_stderr,
        max_dev_scaled,
        densities,
        predicted,
    })
}

/// `D_trans = J / θ`.
pub fn transport_coefficient(current_scaled: f64, theta: f64) -> Result<f64, EstimatorError> {
    if !(theta > 0.0) {
        return Err(EstimatorError::Invalid(format!("density gradient must be positive, got {theta}")));
    }
    Ok(current_scaled / theta)
}

/// Current and gradient from one left-injection ledger, with the error of
/// their ratio from the per-particle covariance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GasTransport {
    pub current_scaled: Estimate,
    pub theta: Estimate,
    pub d_trans: Estimate,
}

pub fn gas_transport(ledger: &OccupationLedger, lambda: f64, mean_section: f64) -> Result<GasTransport, EstimatorError> {
    let fit = fit_profile_gradient(ledger, lambda, mean_section)?;
    let m = ledger.m_bins();
    let s = far_gate_abscissae(m, ledger.side);
    let ss = sum(s.iter().map(|v| v * v));
    let rate = lambda * ledger.gate_measure / PI;
    let scale = rate * m as f64 / ledger.length;
    let n = ledger.records.len();
    let far = ledger.side.opposite();
    let ys: Vec<f64> = ledger
        .records
        .iter()
        .map(|r| scale * sum(r.bin_occupation.iter().zip(&s).map(|(o, sj)| o * sj)) / ss)
        .collect();
    let zs: Vec<f64> = ledger
        .records
        .iter()
        .map(|r| if r.exit_side == far { ledger.length * rate } else { 0.0 })
        .collect();
    let (ym, yse) = mean_stderr(&ys);
    let (zm, zse) = mean_stderr(&zs);
    let cov = sum(ys.iter().zip(&zs).map(|(y, z)| (y - ym) * (z - zm))) / ((n - 1) as f64 * n as f64);
    let d = transport_coefficient(zm, ym)?;
    // Delta method for z/y.
    let var = d * d * (zse * zse / (zm * zm) + yse * yse / (ym * ym) - 2.0 * cov / (zm * ym));
    debug_assert!((ym - fit.theta_hat).abs() <= 1e-9 * ym.abs());
    Ok(GasTransport {
        current_scaled: Estimate::new(zm, zse, n as u64),
        theta: Estimate::new(ym, yse, n as u64),
        d_trans: Estimate::new(d, var.max(0.0).sqrt(), n as u64),
    })
}

/// `λ_M = γ_d |S^{d−1}| ⟨|ω₀|⟩ σ̂² / (2 |ω̃₀|)`.
pub fn milne_length(sigma2: f64, mean_section: f64, gate_measure: f64, d: u32) -> Result<f64, EstimatorError> {
    if d != 2 {
        return Err(EstimatorError::Invalid("the Milne length is implemented for d = 2".into()));
    }
    if !(sigma2 > 0.0 && mean_section > 0.0 && gate_measure > 0.0) {
        return Err(EstimatorError::Invalid("Milne length inputs must be positive".into()));
    }
    let c = gamma_const(d)? * sphere_measure(d)?;
    Ok(c * mean_section * sigma2 / (2.0 * gate_measure))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CrossingStats {
    pub h: f64,
    pub n_particles: u64,
    pub n_crossed: u64,
    /// `H · P[𝔠_H]`.
    pub hp_cross: Estimate,
    /// `E(𝒯 | 𝔠) / H²`.
    pub cond_t_over_h2: Estimate,
    /// `E(𝒯 1_𝔠) / H`.
    pub t1c_over_h: Estimate,
    /// `E(𝒯 1_{𝔠ᶜ}) / H`.
    pub t1cc_over_h: Estimate,
    /// `E(𝒯 1_{𝔠ᶜ}) / E(𝒯 1_𝔠)`.
    pub ratio: Estimate,
    /// `E 𝒯 / H`.
    pub lifetime_over_h: Estimate,
}

#[derive(Clone, Copy, Default)]
struct BlockSums {
    n: f64,
    n_c: f64,
    t: f64,
    t_c: f64,
}

impl BlockSums {
    fn add(&mut self, o: &BlockSums, k: f64) {
        self.n += k * o.n;
        self.n_c += k * o.n_c;
        self.t += k * o.t;
        self.t_c += k * o.t_c;
    }
}

fn block_sums(ledger: &OccupationLedger) -> Vec<BlockSums> {
    let n = ledger.records.len();
    let n_blocks = BOOTSTRAP_BLOCKS.min(n);
    let mut blocks = vec![BlockSums::default(); n_blocks];
    for (k, r) in ledger.records.iter().enumerate() {
        let b = &mut blocks[k * n_blocks / n];
        b.n += 1.0;
        b.t += r.lifetime;
        if r.crossed {
            b.n_c += 1.0;
            b.t_c += r.lifetime;
        }
    }
    blocks
}

/// Crossing probability and conditional lifetimes with block-bootstrap errors.
pub fn crossing_statistics(ledger: &OccupationLedger, seed: u64) -> Result<CrossingStats, EstimatorError> {
    let h = ledger.length;
    let blocks = block_sums(ledger);
    let mut total = BlockSums::default();
    for b in &blocks {
        total.add(b, 1.0);
    }
    if total.n_c == 0.0 {
        return Err(EstimatorError::InsufficientCrossings);
    }
    let stats = |s: &BlockSums| {
        [
            h * s.n_c / s.n,
            s.t_c / s.n_c / (h * h),
            s.t_c / s.n / h,
            (s.t - s.t_c) / s.n / h,
            (s.t - s.t_c) / s.t_c,
            s.t / s.n / h,
        ]
    };
    let point = stats(&total);
    let mut rng = stream(seed, "crossing-bootstrap", 0);
    let mut reps: Vec<[f64; 6]> = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let mut s = BlockSums::default();
        for _ in 0..blocks.len() {
            s.add(&blocks[rng.random_range(0..blocks.len())], 1.0);
        }
        if s.n_c > 0.0 {
            reps.push(stats(&s));
        }
    }
    let n = total.n as u64;
    let est = |i: usize| {
        let col: Vec<f64> = reps.iter().map(|r| r[i]).collect();
        Estimate::new(point[i], variance(&col).sqrt(), n)
    };
    Ok(CrossingStats {
        h,
        n_particles: n,
        n_crossed: total.n_c as u64,
        hp_cross: est(0),
        cond_t_over_h2: est(1),
        t1c_over_h: est(2),
        t1cc_over_h: est(3),
        ratio: est(4),
        lifetime_over_h: est(5),
    })
}

/// Per-environment statistic for [`annealed_average`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AnnealedProtocol {
    /// `E 𝒯_H / H`.
    LifetimeOverH,
    /// `H · P[𝔠_H]`.
    CrossingTimesH,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnvironmentRow {
    pub seed: u64,
    /// Long-window spatial average of `|ω_α|`.
    pub mean_section: f64,
    pub gate_measure: f64,
    pub value: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnnealedResult {
    pub protocol: AnnealedProtocol,
    pub h: f64,
    pub mean: f64,
    pub stderr: f64,
    /// `(mean over envs of |ω̃₀|) × (mean over envs of 1/|ω̃₀|)`, at least one
    /// by Jensen's inequality. Gates sit at knots, so the gate section rather
    /// than the spatial average is the variable the inequality is about.
    pub jensen_factor: f64,
    /// `mean over envs of ⟨|ω₀|⟩`.
    pub mean_section: f64,
    /// `mean over envs of 1/|ω̃₀|`.
    pub mean_inverse_gate: f64,
    pub rows: Vec<EnvironmentRow>,
}

impl AnnealedResult {
    /// `(π/2)⟨|ω₀|⟩⟨|ω̃₀|⁻¹⟩`, times `σ̂²` for the crossing protocol.
    pub fn prediction(&self, sigma2: Option<f64>) -> f64 {
        let base = PI / 2.0 * self.mean_section * self.mean_inverse_gate;
        match self.protocol {
            AnnealedProtocol::LifetimeOverH => base,
            AnnealedProtocol::CrossingTimesH => base * sigma2.unwrap_or(f64::NAN),
        }
    }
}

/// Half-length of the window used for each environment's section average.
pub const ENVIRONMENT_WINDOW: f64 = 10_000.0;

/// Runs the per-environment estimator on `n_envs` independent tubes.
/// Environment `k` uses seed `derive_seed(base_seed, "environment", k)`.
pub fn annealed_average(
    spec: &TubeSpec,
    n_envs: usize,
    h: f64,
    protocol: AnnealedProtocol,
    n_particles: usize,
    base_seed: u64,
) -> Result<AnnealedResult, EstimatorError> {
    if n_envs < 10 {
        return Err(EstimatorError::Invalid("need at least 10 environments".into()));
    }
    let mut rows = Vec::with_capacity(n_envs);
    for k in 0..n_envs as u64 {
        let seed = derive_seed(base_seed, "environment", k);
        let tube = build_tube(*spec, seed)?;
        let ftube = make_finite(&tube, h)?;
        let ledger = run_ensemble(&ftube, Side::Left, n_particles, 1, seed)?;
        let value = match protocol {
            AnnealedProtocol::LifetimeOverH => {
                let ts: Vec<f64> = ledger.records.iter().map(|r| r.lifetime / h).collect();
                let (m, se) = mean_stderr(&ts);
                Estimate::new(m, se, ts.len() as u64)
            }
            AnnealedProtocol::CrossingTimesH => {
                let n = ledger.records.len() as f64;
                let p = ledger.n_far() as f64 / n;
                Estimate::new(h * p, h * (p * (1.0 - p) / n).sqrt(), n as u64)
            }
        };
        rows.push(EnvironmentRow {
            seed,
            mean_section: tube.mean_section_measure(-ENVIRONMENT_WINDOW, ENVIRONMENT_WINDOW)?,
            gate_measure: ftube.gate_measures().0,
            value,
        });
    }
    let values: Vec<f64> = rows.iter().map(|r| r.value.value).collect();
    let (mean, stderr) = mean_stderr(&values);
    let mean_section = sum(rows.iter().map(|r| r.mean_section)) / n_envs as f64;
    let mean_inverse_gate = sum(rows.iter().map(|r| 1.0 / r.gate_measure)) / n_envs as f64;
    let mean_gate = sum(rows.iter().map(|r| r.gate_measure)) / n_envs as f64;
    Ok(AnnealedResult {
        protocol,
        h,
        mean,
        stderr,
        jensen_factor: mean_gate * mean_inverse_gate,
        mean_section,
        mean_inverse_gate,
        rows,
    })
}

/// `E[1/|ω₀|]` for the knot distribution of `spec`, in closed form: the
/// section at a knot is the sum of two independent uniform half-widths.
pub fn expected_inverse_gate(spec: &TubeSpec) -> f64 {
    match spec.family {
        TubeFamily::StraightStrip { width } => 1.0 / width,
        TubeFamily::RoughRandom {
            w_min_half: a,
            w_max_half: b,
            ..
        } => {
            if b == a {
                return 1.0 / (2.0 * a);
            }
            // ∫∫ du dv / (u + v) over [a, b]²; the linear parts of the
            // antiderivative s ln s − s cancel.
            let f = |s: f64| s * s.ln();
            (f(2.0 * b) - 2.0 * f(a + b) + f(2.0 * a)) / ((b - a) * (b - a))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatTest {
    pub name: String,
    pub statistic: f64,
    pub z_or_p: f64,
    pub pass: bool,
    pub threshold: f64,
}

/// Index of dispersion of Poisson-candidate counts. Passes when both the
/// dispersion z-score and the mean z-score against `expected_mean` are below 3.
/// `expected_se` is the error of `expected_mean` when it is itself estimated.
///
/// Counts are taken in time order; the error of their mean is the larger of
/// the Poisson value and the spread of 20 batch means, so slowly relaxing
/// snapshot sequences do not inflate the mean z-score.
pub fn dispersion_test(counts: &[u64], expected_mean: f64, expected_se: f64) -> Result<StatTest, EstimatorError> {
    if counts.len() < 100 {
        return Err(EstimatorError::Invalid("dispersion test needs at least 100 counts".into()));
    }
    let xs: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let n = xs.len() as f64;
    let (mean, _) = mean_stderr(&xs);
    let var = variance(&xs);
    let index = if mean > 0.0 { var / mean } else { f64::NAN };
    let z_disp = (index - 1.0) / (2.0 / (n - 1.0)).sqrt();
    const BATCHES: usize = 20;
    let batch_means: Vec<f64> = (0..BATCHES)
        .map(|b| {
            let chunk = &xs[b * xs.len() / BATCHES..(b + 1) * xs.len() / BATCHES];
            sum(chunk.iter().copied()) / chunk.len() as f64
        })
        .collect();
    let (_, batch_se) = mean_stderr(&batch_means);
    let se_mean2 = (expected_mean / n).max(batch_se * batch_se);
    let z_mean = (mean - expected_mean) / (se_mean2 + expected_se * expected_se).sqrt();
    let z = if z_disp.abs() >= z_mean.abs() { z_disp } else { z_mean };
    Ok(StatTest {
        name: "dispersion".into(),
        statistic: index,
        z_or_p: z,
        pass: z.abs() < 3.0,
        threshold: 3.0,
    })
}

/// Environment identity carried by a transport report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnvironmentInfo {
    pub mean_section: f64,
    pub gate_measure: f64,
    pub h: f64,
    pub seed: u64,
}

/// Headline transport constants of one quenched environment.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransportReport {
    pub sigma2: Estimate,
    pub d_self: Estimate,
    pub theta: Estimate,
    pub current_scaled: Estimate,
    pub d_trans: Estimate,
    pub milne: Estimate,
    pub crossing: CrossingStats,
    pub environment: EnvironmentInfo,
    /// `|D_trans − D_self| / D_self`.
    pub fick_rel_dev: f64,
}

impl TransportReport {
    pub fn assemble(
        sigma2: &SelfDiffusionFit,
        gas: &GasTransport,
        crossing: CrossingStats,
        environment: EnvironmentInfo,
    ) -> Result<Self, EstimatorError> {
        let n = sigma2.n_points as u64;
        let s2 = Estimate::new(sigma2.sigma2, sigma2.stderr, n);
        let d_self = Estimate::new(sigma2.sigma2 / 2.0, sigma2.stderr / 2.0, n);
        let milne = milne_length(sigma2.sigma2, environment.mean_section, environment.gate_measure, 2)?;
        let milne_se = milne * sigma2.stderr / sigma2.sigma2;
        Ok(TransportReport {
            sigma2: s2,
            d_self,
            theta: gas.theta,
            current_scaled: gas.current_scaled,
            d_trans: gas.d_trans,
            milne: Estimate::new(milne, milne_se, n),
            crossing,
            environment,
            fick_rel_dev: (gas.d_trans.value - d_self.value).abs() / d_self.value,
        })
    }
}

/// Occupation profile of the particles that reach the far gate, against the
/// parabola `x(1 − x)` (in units of `H`) of mass `λ⟨|ω₀|⟩H/6`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExitProfileFit {
    /// Mean counts per bin, ordered by increasing `x`.
    pub counts: Vec<f64>,
    pub mass_over_h: f64,
    pub predicted_mass_over_h: f64,
    /// Coefficient of determination of the parabola fitted through the origin.
    pub r_squared: f64,
}

pub fn far_exit_fit(ledger: &OccupationLedger, lambda: f64, mean_section: f64) -> ExitProfileFit {
    let counts = far_exit_profile(ledger, lambda);
    let m = counts.len() as f64;
    // Bin averages of x(1 − x) on the unit interval.
    let shape: Vec<f64> = (0..counts.len())
        .map(|b| {
            let (a, c) = (b as f64 / m, (b + 1) as f64 / m);
            ((c * c - a * a) / 2.0 - (c * c * c - a * a * a) / 3.0) * m
        })
        .collect();
    let k = sum(shape.iter().zip(&counts).map(|(f, y)| f * y)) / sum(shape.iter().map(|f| f * f));
    let mean = sum(counts.iter().copied()) / m;
    let ss_res = sum(shape.iter().zip(&counts).map(|(f, y)| (y - k * f).powi(2)));
    let ss_tot = sum(counts.iter().map(|y| (y - mean).powi(2)));
    ExitProfileFit {
        mass_over_h: sum(counts.iter().copied()) / ledger.length,
        predicted_mass_over_h: lambda * mean_section / 6.0,
        r_squared: 1.0 - ss_res / ss_tot,
        counts,
    }
}

/// Spatial average of `|ω_α|` over the ergodic window used by reports.
pub fn ergodic_mean_section(tube: &TubeRealization) -> Result<f64, EstimatorError> {
    Ok(tube.mean_section_measure(-ENVIRONMENT_WINDOW, ENVIRONMENT_WINDOW)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gas::steady_state_from_ledger;
    use crate::geometry::TubeSpec;

    fn synthetic(times: &[f64], f: impl Fn(f64) -> f64) -> MsdCurve {
        MsdCurve {
            times: times.to_vec(),
            msd: times.iter().map(|&t| f(t)).collect(),
            stderr: times.iter().map(|&t| 0.01 * t.max(1.0)).collect(),
            n_traj: 100,
            squared: Vec::new(),
        }
    }

    #[test]
    fn grid_shape() {
        let g = log_grid(1e4, 5);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 1.0);
        assert_eq!(*g.last().unwrap(), 1e4);
        assert_eq!(g.len(), 22);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn exact_linear_msd_fit() {
        let g = log_grid(1e4, 5);
        let c = synthetic(&g, |t| 3.0 * t);
        let fit = fit_self_diffusion(&c, 100.0, 1e4, 0).unwrap();
        assert!((fit.sigma2 - 3.0).abs() < 1e-12);
        assert!((loglog_slope(&c, 100.0, 1e4).unwrap() - 1.0).abs() < 1e-12);
        assert!(fit_self_diffusion(&c, 100.0, 200.0, 0).is_err());
    }

    #[test]
    fn msd_starts_at_zero() {
        let t = build_tube(TubeSpec::reference(), 42).unwrap();
        let c = msd_curve(&t, 20, &log_grid(100.0, 4), 1).unwrap();
        assert_eq!(c.msd[0], 0.0);
        assert!(c.msd.iter().all(|&m| m >= 0.0));
    }

    #[test]
    fn milne_constants() {
        assert!((milne_length(1.0, 1.0, 1.0, 2).unwrap() - PI / 2.0).abs() < 1e-15);
        assert!(milne_length(1.0, 1.0, 1.0, 3).is_err());
    }

    #[test]
    fn transport_arithmetic() {
        assert_eq!(transport_coefficient(1.0, 2.0).unwrap(), 0.5);
        assert!(transport_coefficient(1.0, 0.0).is_err());
    }

    #[test]
    fn exact_linear_profile_input() {
        // One particle per bin layout reproducing the prediction exactly.
        let m = 10;
        let h = 100.0;
        let lambda = 1.0;
        let mean_section = 0.8;
        let gate = PI; // Λ_a = 1
        let s = far_gate_abscissae(m, Side::Left);
        let occ: Vec<f64> = s.iter().map(|sj| lambda * mean_section * sj * h / m as f64).collect();
        let rec = crate::billiard::CrossingRecord {
            lifetime: occ.iter().sum(),
            crossed: false,
            exit_side: Side::Left,
            bin_occupation: occ,
            collisions: 1,
        };
        let ledger = OccupationLedger {
            records: vec![rec.clone(), rec],
            n_injected: 2,
            bin_edges: (0..=m).map(|j| h * j as f64 / m as f64).collect(),
            side: Side::Left,
            length: h,
            gate_measure: gate,
            seed: 0,
            budget_flags: 0,
        };
        let fit = fit_profile_gradient(&ledger, lambda, mean_section).unwrap();
        assert!(fit.max_dev < 1e-12);
        assert!((fit.theta_hat - lambda * mean_section).abs() < 1e-12);
        let sum = steady_state_from_ledger(&ledger, lambda).unwrap();
        assert!((sum.q - sum.mean_counts.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn crossing_statistics_errors_without_crossings() {
        let tube = build_tube(TubeSpec::reference(), 42).unwrap();
        let f = make_finite(&tube, 200.0).unwrap();
        let ledger = run_ensemble(&f, Side::Left, 10, 10, 1).unwrap();
        if ledger.n_far() == 0 {
            assert_eq!(crossing_statistics(&ledger, 0), Err(EstimatorError::InsufficientCrossings));
        }
    }

    #[test]
    fn dispersion_controls() {
        let mut rng = stream(1, "disp", 0);
        let poisson = rand_distr::Poisson::new(5.0).unwrap();
        let counts: Vec<u64> = (0..2000)
            .map(|_| rand_distr::Distribution::sample(&poisson, &mut rng) as u64)
            .collect();
        assert!(dispersion_test(&counts, 5.0, 0.0).unwrap().pass);
        let binom = rand_distr::Binomial::new(10, 0.5).unwrap();
        let counts: Vec<u64> = (0..2000)
            .map(|_| rand_distr::Distribution::sample(&binom, &mut rng))
            .collect();
        let t = dispersion_test(&counts, 5.0, 0.0).unwrap();
        assert!(!t.pass && (t.statistic - 0.5).abs() < 0.1);
        assert!(dispersion_test(&counts[..50], 5.0, 0.0).is_err());
    }

    #[test]
    fn inverse_gate_closed_form() {
        assert_eq!(expected_inverse_gate(&TubeSpec::reference()), 1.0);
        let spec = TubeSpec::rough(0.4, 0.6, 0.1, 0.3);
        // Midpoint rule on a fine grid.
        let n = 2000;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let u = 0.4 + 0.2 * (i as f64 + 0.5) / n as f64;
                let v = 0.4 + 0.2 * (j as f64 + 0.5) / n as f64;
                acc += 1.0 / (u + v);
            }
        }
        let quad = acc / (n * n) as f64;
        assert!((expected_inverse_gate(&spec) - quad).abs() < 1e-7);
    }
}
