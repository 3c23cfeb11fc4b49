//! The five subcommands. Every simulation seed is derived from the config seed
//! with a fixed tag, so subcommands that need the same ledger regenerate it
//! identically.

use std::f64::consts::PI;
use std::path::Path;

use knudsen::billiard::{jump_statistics, JumpStats, Side};
use knudsen::estimators::{
    annealed_average, crossing_statistics, dispersion_test, ergodic_mean_section, far_exit_fit, fit_profile_gradient,
    fit_self_diffusion, gas_transport, log_grid, loglog_slope, msd_curve, AnnealedProtocol, AnnealedResult,
    CrossingStats, EnvironmentInfo, ExitProfileFit, SelfDiffusionFit, StatTest, TransportReport,
};
use knudsen::gas::{
    count_cells, poisson_intensity_prediction, run_ensemble, run_event_driven, steady_state_from_ledger, CountCell,
    GasSummary, InjectionConfig, OccupationLedger,
};
use knudsen::geometry::{build_tube, make_finite, validate_tube, TubeRealization, ValidationReport, M_HAT};
use knudsen::rng::{derive_seed, stream};
use knudsen::stats::Estimate;
use serde::Serialize;
use serde_json::Value;

use crate::config::ExperimentConfig;
use crate::output::{json, msd_script, num, profile_script, OutputDir};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Validate,
    Msd,
    Gas,
    Crossing,
    Report { check: bool },
}

/// Log-log MSD slope above which a run is flagged superdiffusive.
pub const SUPERDIFFUSION_SLOPE: f64 = 1.05;
/// Largest relative Fick deviation accepted by `report --check`.
pub const FICK_TOLERANCE: f64 = 0.10;
/// Linear-profile tolerance, relative to the injection density scale.
pub const PROFILE_TOLERANCE: f64 = 0.05;
/// KRW jumps sampled for the second-moment diagnostic.
pub const JUMP_SAMPLES: usize = 1_000_000;
/// Relative tolerance of Little's identity, which holds exactly per ledger.
pub const LITTLE_TOLERANCE: f64 = 1e-12;

/// Runs `cmd` on the config at `path`. Nothing is written when the config is
/// rejected.
pub fn run(cmd: Command, path: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(path)?;
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cfg.workers {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| CliError::Simulation(e.to_string()))?
    };
    pool.install(|| execute(cmd, cfg))
}

fn execute(cmd: Command, cfg: ExperimentConfig) -> Result<(), CliError> {
    let mut ctx = Context::new(cfg)?;
    match cmd {
        Command::Validate => {
            let v = ctx.validation()?;
            ctx.out.update_report(&ctx.cfg, vec![("validation", json(&v)?)])?;
            fail_on_geometry(&v)
        }
        Command::Msd => {
            let m = ctx.msd()?;
            ctx.out.update_report(&ctx.cfg, vec![("msd", json(&m)?)])
        }
        Command::Gas => {
            let g = ctx.gas()?;
            ctx.out.update_report(&ctx.cfg, vec![("gas", json(&g)?)])
        }
        Command::Crossing => {
            let c = ctx.crossing(None)?;
            ctx.out.update_report(&ctx.cfg, vec![("crossing", json(&c)?)])
        }
        Command::Report { check } => ctx.report(check),
    }
}

fn fail_on_geometry(v: &ValidationReport) -> Result<(), CliError> {
    if v.pass {
        Ok(())
    } else {
        Err(CliError::Validation(v.failures.join("; ")))
    }
}

struct Context {
    cfg: ExperimentConfig,
    tube: TubeRealization,
    out: OutputDir,
    mean_section: f64,
    ledgers: Vec<(u64, Side, OccupationLedger)>,
}

#[derive(Serialize)]
struct MsdSection {
    seed: u64,
    n_traj: usize,
    fit: SelfDiffusionFit,
    sigma2: Estimate,
    loglog_slope: f64,
    superdiffusion: bool,
    jumps: JumpStats,
}

#[derive(Serialize)]
struct Snapshots {
    n: usize,
    warmup: f64,
    spacing: f64,
    cells: Vec<CountCell>,
    expected_means: Vec<Estimate>,
}

#[derive(Serialize)]
struct GasSection {
    h: f64,
    m_bins: usize,
    lambda_left: f64,
    lambda_right: f64,
    n_particles: usize,
    budget_flags: usize,
    mean_section: f64,
    gate_measures: (f64, f64),
    summary: GasSummary,
    theta_left: Estimate,
    theta_left_prediction: f64,
    profile_max_dev_scaled: f64,
    profile_max_dev_relative: f64,
    little_rel_err: f64,
    snapshots: Snapshots,
    tests: Vec<StatTest>,
}

#[derive(Serialize)]
struct CrossingRow {
    h: f64,
    gate_measure: f64,
    lifetime_prediction: f64,
    stats: CrossingStats,
    will_exit_far: ExitProfileFit,
}

#[derive(Serialize)]
struct CrossingSection {
    seed: u64,
    rows: Vec<CrossingRow>,
    annealed: Vec<AnnealedResult>,
}

#[derive(Serialize)]
struct Triangulation {
    /// `π⟨|ω₀|⟩σ̂²/(2|ω̃₀|)`.
    milne: Estimate,
    /// `H · P[𝔠_H]`.
    hp_cross: Estimate,
    /// `σ̂² · E𝒯_H/H`.
    sigma2_lifetime: Estimate,
    /// Largest pairwise z-score of the three.
    max_pairwise_z: f64,
}

#[derive(Serialize)]
struct TransportSection {
    #[serde(flatten)]
    report: TransportReport,
    triangulation: Triangulation,
}

impl Context {
    fn new(cfg: ExperimentConfig) -> Result<Self, CliError> {
        let tube = build_tube(cfg.tube.spec(), cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;
        let out = OutputDir::create(&cfg.output_dir)?;
        let mean_section = ergodic_mean_section(&tube)?;
        Ok(Self {
            cfg,
            tube,
            out,
            mean_section,
            ledgers: Vec::new(),
        })
    }

    fn seed(&self, tag: &str, index: u64) -> u64 {
        derive_seed(self.cfg.seed, tag, index)
    }

    /// Ensemble ledger at tube length `h`, shared by every section that
    /// needs it.
    fn ledger(&mut self, h: f64, side: Side) -> Result<&OccupationLedger, CliError> {
        let key = h as u64;
        if let Some(i) = self.ledgers.iter().position(|(k, s, _)| *k == key && *s == side) {
            return Ok(&self.ledgers[i].2);
        }
        let ftube = make_finite(&self.tube, h)?;
        let seed = self.seed("ensemble", key);
        let ledger = run_ensemble(&ftube, side, self.cfg.n_particles, self.cfg.m_bins, seed)?;
        self.ledgers.push((key, side, ledger));
        Ok(&self.ledgers.last().expect("just pushed").2)
    }

    fn validation(&self) -> Result<ValidationReport, CliError> {
        let mut rng = stream(self.cfg.seed, "validate", 0);
        Ok(validate_tube(&self.tube, -10.0, self.cfg.h + 10.0, &mut rng)?)
    }

    fn msd(&self) -> Result<MsdSection, CliError> {
        let seed = self.seed("msd", 0);
        let grid = log_grid(self.cfg.t_grid.t_max, self.cfg.t_grid.points_per_decade);
        let curve = msd_curve(&self.tube, self.cfg.n_traj, &grid, seed)?;
        let t_max = self.cfg.t_grid.t_max;
        let fit = fit_self_diffusion(&curve, t_max / 100.0, t_max, seed)?;
        let slope = loglog_slope(&curve, t_max / 100.0, t_max)?;
        let jumps = jump_statistics(&self.tube, JUMP_SAMPLES, &mut stream(seed, "jumps", 0))?;
        let rows: Vec<Vec<String>> = curve
            .times
            .iter()
            .zip(&curve.msd)
            .zip(&curve.stderr)
            .map(|((t, m), se)| vec![num(*t), num(*m), num(*se), curve.n_traj.to_string()])
            .collect();
        self.out.write_csv("msd.csv", &["t", "msd", "stderr", "n"], &rows)?;
        self.out.write("msd.gp", &msd_script())?;
        Ok(MsdSection {
            seed,
            n_traj: curve.n_traj,
            sigma2: Estimate::new(fit.sigma2, fit.stderr, curve.n_traj as u64),
            fit,
            loglog_slope: slope,
            superdiffusion: slope > SUPERDIFFUSION_SLOPE,
            jumps,
        })
    }

    fn gas(&mut self) -> Result<GasSection, CliError> {
        let h = self.cfg.h;
        let (lam, mu) = (self.cfg.lambda_left, self.cfg.lambda_right);
        let omega = self.mean_section;
        let ftube = make_finite(&self.tube, h)?;
        let left = self.ledger(h, Side::Left)?.clone();
        let right = if mu > 0.0 { Some(self.ledger(h, Side::Right)?.clone()) } else { None };

        let left_summary = steady_state_from_ledger(&left, lam)?;
        let little_rel_err = (left_summary.q - left_summary.arrival_rate * left_summary.mean_lifetime).abs() / left_summary.q;
        let left_fit = fit_profile_gradient(&left, lam, omega)?;
        let (summary, predicted, bin_se) = match &right {
            None => (left_summary.clone(), left_fit.predicted.clone(), left_fit.bin_stderr.clone()),
            Some(r) => {
                let right_fit = fit_profile_gradient(r, mu, omega)?;
                let s = left_summary.combine(&steady_state_from_ledger(r, mu)?);
                let p: Vec<f64> = left_fit.predicted.iter().zip(&right_fit.predicted).map(|(a, b)| a + b).collect();
                let se: Vec<f64> = left_fit.bin_stderr.iter().zip(&right_fit.bin_stderr).map(|(a, b)| a.hypot(*b)).collect();
                (s, p, se)
            }
        };
        let densities = summary.densities();
        let scale = lam.max(mu) * omega;
        let max_dev_scaled = densities.iter().zip(&predicted).map(|(d, p)| (d - p).abs() / scale).fold(0.0, f64::max);
        let max_dev_rel = densities.iter().zip(&predicted).map(|(d, p)| (d - p).abs() / p).fold(0.0, f64::max);
        let max_z = densities
            .iter()
            .zip(&predicted)
            .zip(&bin_se)
            .map(|((d, p), se)| (d - p).abs() / se)
            .fold(0.0, f64::max);
        let profile_tol = PROFILE_TOLERANCE.max(3.0 * bin_se.iter().copied().fold(0.0, f64::max) / scale);

        let edges = &summary.bin_edges;
        let rows: Vec<Vec<String>> = (0..edges.len() - 1)
            .map(|b| {
                vec![
                    num(edges[b]),
                    num(edges[b + 1]),
                    num(summary.mean_counts[b]),
                    num(densities[b]),
                    num(predicted[b]),
                ]
            })
            .collect();
        self.out
            .write_csv("profile.csv", &["bin_lo", "bin_hi", "mean_count", "density", "predicted_linear"], &rows)?;
        self.out.write("profile.gp", &profile_script(h))?;

        // Literal gas: snapshots spaced far beyond one particle lifetime, after
        // a warm-up of many relaxation times of the slowest mode.
        let injection = InjectionConfig {
            lambda_left: lam,
            lambda_right: mu,
        };
        let warmup = 2.0 * h * h;
        let spacing = 20.0 * h;
        let times: Vec<f64> = (0..self.cfg.n_snapshots).map(|k| warmup + k as f64 * spacing).collect();
        let snaps = run_event_driven(&ftube, &injection, warmup, &times, self.seed("event", 0))?;
        let cells: Vec<CountCell> = edges
            .windows(2)
            .map(|w| CountCell {
                x_lo: w[0],
                x_hi: w[1],
                y_lo: -M_HAT,
                y_hi: M_HAT,
                axial_sign: None,
            })
            .collect();
        let counts = count_cells(&snaps, &cells);
        let mut expected = Vec::with_capacity(cells.len());
        for (b, cell) in cells.iter().enumerate() {
            let e = if lam == mu {
                // Uniform intensity: the closed form, no Monte Carlo needed.
                Estimate::new(poisson_intensity_prediction(&ftube, &injection, cell, 0, 0)?, 0.0, 0)
            } else {
                let width = edges[b + 1] - edges[b];
                Estimate::new(summary.mean_counts[b], bin_se[b] * width, left.records.len() as u64)
            };
            expected.push(e);
        }
        let rows: Vec<Vec<String>> = times
            .iter()
            .enumerate()
            .flat_map(|(s, t)| {
                let counts = &counts;
                (0..cells.len()).map(move |c| vec![num(*t), c.to_string(), counts[c][s].to_string()])
            })
            .collect();
        self.out.write_csv("snapshots.csv", &["time", "cell_id", "count"], &rows)?;

        let mut tests = vec![
            StatTest {
                name: "linear_profile".into(),
                statistic: max_dev_scaled,
                z_or_p: max_z,
                pass: max_dev_scaled < profile_tol,
                threshold: profile_tol,
            },
            StatTest {
                name: "little_identity".into(),
                statistic: little_rel_err,
                z_or_p: f64::NAN,
                pass: little_rel_err < LITTLE_TOLERANCE,
                threshold: LITTLE_TOLERANCE,
            },
        ];
        for (c, (n, e)) in counts.iter().zip(&expected).enumerate() {
            let mut t = dispersion_test(n, e.value, e.stderr)?;
            t.name = format!("dispersion_cell_{c}");
            tests.push(t);
        }

        Ok(GasSection {
            h,
            m_bins: self.cfg.m_bins,
            lambda_left: lam,
            lambda_right: mu,
            n_particles: self.cfg.n_particles,
            budget_flags: left.budget_flags + right.as_ref().map_or(0, |r| r.budget_flags),
            mean_section: omega,
            gate_measures: ftube.gate_measures(),
            summary,
            theta_left: left_fit_estimate(&left_fit, left.records.len()),
            theta_left_prediction: lam * omega,
            profile_max_dev_scaled: max_dev_scaled,
            profile_max_dev_relative: max_dev_rel,
            little_rel_err,
            snapshots: Snapshots {
                n: times.len(),
                warmup,
                spacing,
                cells,
                expected_means: expected,
            },
            tests,
        })
    }

    fn crossing(&mut self, sigma2: Option<f64>) -> Result<CrossingSection, CliError> {
        let omega = self.mean_section;
        let mut rows = Vec::new();
        for h in self.cfg.ladder() {
            let ledger = self.ledger(h, Side::Left)?;
            let stats = crossing_statistics(ledger, derive_seed(ledger.seed, "crossing", 0))?;
            let g = ledger.gate_measure;
            rows.push(CrossingRow {
                h,
                gate_measure: g,
                lifetime_prediction: PI * omega / (2.0 * g),
                stats,
                will_exit_far: far_exit_fit(ledger, 1.0, omega),
            });
        }
        let mut annealed = Vec::new();
        if self.cfg.n_envs > 1 {
            for protocol in [AnnealedProtocol::LifetimeOverH, AnnealedProtocol::CrossingTimesH] {
                annealed.push(annealed_average(
                    &self.cfg.tube.spec(),
                    self.cfg.n_envs,
                    self.cfg.h,
                    protocol,
                    self.cfg.n_particles,
                    self.seed("annealed", 0),
                )?);
            }
        }
        let mut csv = Vec::new();
        for r in &rows {
            let s = &r.stats;
            let hp_pred = sigma2.map_or(f64::NAN, |s2| r.lifetime_prediction * s2);
            let cond_pred = sigma2.map_or(f64::NAN, |s2| 1.0 / (3.0 * s2));
            for (q, e, p) in [
                ("lifetime_over_h", s.lifetime_over_h, r.lifetime_prediction),
                ("hp_cross", s.hp_cross, hp_pred),
                ("cond_t_over_h2", s.cond_t_over_h2, cond_pred),
                ("t1c_over_h", s.t1c_over_h, f64::NAN),
                ("t1cc_over_h", s.t1cc_over_h, f64::NAN),
                ("ratio", s.ratio, 2.0),
            ] {
                csv.push(crossing_row("quenched", r.h, q, e, p));
            }
            let w = &r.will_exit_far;
            csv.push(crossing_row(
                "quenched",
                r.h,
                "will_exit_mass_over_h",
                Estimate::new(w.mass_over_h, f64::NAN, s.n_particles),
                w.predicted_mass_over_h,
            ));
        }
        for a in &annealed {
            let q = match a.protocol {
                AnnealedProtocol::LifetimeOverH => "lifetime_over_h",
                AnnealedProtocol::CrossingTimesH => "hp_cross",
            };
            let n = a.rows.len() as u64;
            csv.push(crossing_row("annealed", a.h, q, Estimate::new(a.mean, a.stderr, n), a.prediction(sigma2)));
            csv.push(crossing_row(
                "annealed",
                a.h,
                "jensen_factor",
                Estimate::new(a.jensen_factor, f64::NAN, n),
                1.0,
            ));
        }
        self.out.write_csv(
            "crossing.csv",
            &["kind", "h", "quantity", "value", "stderr", "n", "prediction"],
            &csv,
        )?;
        Ok(CrossingSection {
            seed: self.seed("ensemble", 0),
            rows,
            annealed,
        })
    }

    fn report(&mut self, check: bool) -> Result<(), CliError> {
        let validation = self.validation()?;
        if !validation.pass {
            self.out.update_report(&self.cfg, vec![("validation", json(&validation)?)])?;
            return fail_on_geometry(&validation);
        }
        let msd = self.msd()?;
        let gas = self.gas()?;
        let crossing = match self.crossing(Some(msd.fit.sigma2)) {
            Ok(c) => c,
            Err(e) => {
                self.out.update_report(
                    &self.cfg,
                    vec![("validation", json(&validation)?), ("msd", json(&msd)?), ("gas", json(&gas)?)],
                )?;
                return Err(e);
            }
        };
        let h = self.cfg.h;
        let omega = self.mean_section;
        let ledger = self.ledger(h, Side::Left)?;
        let transport = gas_transport(ledger, 1.0, omega)?;
        let top = crossing.rows.last().expect("ladder is not empty");
        let env = EnvironmentInfo {
            mean_section: omega,
            gate_measure: top.gate_measure,
            h,
            seed: self.cfg.seed,
        };
        let report = TransportReport::assemble(&msd.fit, &transport, top.stats, env)?;
        let s2 = report.sigma2;
        let lt = top.stats.lifetime_over_h;
        let sigma2_lifetime = Estimate::new(
            s2.value * lt.value,
            s2.value * lt.value * s2.rel_err().hypot(lt.rel_err()),
            lt.n,
        );
        let tri = [report.milne, top.stats.hp_cross, sigma2_lifetime];
        let max_pairwise_z = [(0, 1), (0, 2), (1, 2)]
            .iter()
            .map(|&(a, b)| tri[a].z_against(&tri[b]))
            .fold(0.0, f64::max);
        let fick_z = report.d_trans.z_against(&report.d_self);

        let mut checks = vec![
            StatTest {
                name: "fick_law".into(),
                statistic: report.fick_rel_dev,
                z_or_p: fick_z,
                pass: report.fick_rel_dev < FICK_TOLERANCE,
                threshold: FICK_TOLERANCE,
            },
            StatTest {
                name: "geometry".into(),
                statistic: validation.max_slope,
                z_or_p: f64::NAN,
                pass: validation.pass,
                threshold: validation.lipschitz_bound,
            },
            jump_check(&msd.jumps),
        ];
        checks.extend(gas.tests.iter().cloned());

        let section = TransportSection {
            report,
            triangulation: Triangulation {
                milne: tri[0],
                hp_cross: tri[1],
                sigma2_lifetime,
                max_pairwise_z,
            },
        };
        self.out.update_report(
            &self.cfg,
            vec![
                ("validation", json(&validation)?),
                ("msd", json(&msd)?),
                ("gas", json(&gas)?),
                ("crossing", json(&crossing)?),
                ("transport", json(&section)?),
                ("checks", Value::Array(checks.iter().map(json).collect::<Result<_, _>>()?)),
            ],
        )?;
        let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        if check && !failed.is_empty() {
            return Err(CliError::Acceptance(format!("failed checks: {}", failed.join(", "))));
        }
        Ok(())
    }
}

fn left_fit_estimate(fit: &knudsen::estimators::ProfileFit, n: usize) -> Estimate {
    Estimate::new(fit.theta_hat, fit.stderr, n as u64)
}

fn jump_check(j: &JumpStats) -> StatTest {
    let first = j.batch_medians.first().map_or(f64::NAN, |b| b.1);
    let last = j.batch_medians.last().map_or(f64::NAN, |b| b.1);
    StatTest {
        name: "jump_second_moment".into(),
        statistic: last / first,
        z_or_p: f64::NAN,
        pass: j.stabilized,
        threshold: knudsen::billiard::STABILIZATION_RATIO,
    }
}

fn crossing_row(kind: &str, h: f64, quantity: &str, e: Estimate, prediction: f64) -> Vec<String> {
    vec![
        kind.to_string(),
        num(h),
        quantity.to_string(),
        num(e.value),
        num(e.stderr),
        e.n.to_string(),
        num(prediction),
    ]
}
