//! The open tube as a Knudsen gas: Poisson injection at the gates,
//! absorption on return to a gate plane.
//!
//! Particles never interact, so the steady state follows from independent
//! single-particle lifetimes. [`run_ensemble`] simulates `n` injected particles
//! and [`steady_state_from_ledger`] turns their occupation times into mean
//! counts through Little's law. [`run_event_driven`] builds the literal
//! time-dependent configuration from Poisson arrival streams; it exists to
//! check that the steady state really is a Poisson field.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::billiard::{
    first_passage_probe, gamma_const, run_lifetime, sample_gate_entry, sphere_measure,
    BilliardError, CrossingRecord, Passage, Side, Walker,
};
use crate::geometry::{FiniteTube, Point2, Vec2};
use crate::rng::{stream, SimRng};
use crate::stats::NeumaierSum;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GasError {
    #[error(transparent)]
    Billiard(#[from] BilliardError),
    #[error("invalid gas setup: {0}")]
    Invalid(String),
}

/// Injection intensities per unit gate measure at the two gates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub lambda_left: f64,
    pub lambda_right: f64,
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<(), GasError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_left) || !ok(self.lambda_right) {
            return Err(GasError::Invalid("injection rates must be finite and nonnegative".into()));
        }
        if self.lambda_left == 0.0 && self.lambda_right == 0.0 {
            return Err(GasError::Invalid("at least one injection rate must be positive".into()));
        }
        Ok(())
    }

    pub fn rate(&self, side: Side) -> f64 {
        match side {
            Side::Left => self.lambda_left,
            Side::Right => self.lambda_right,
        }
    }
}

/// `Λ_a = λ |gate| / (γ_d |S^{d-1}|)`; in the plane, `λ |gate| / π`.
pub fn arrival_rate(lambda: f64, ftube: &FiniteTube, side: Side) -> f64 {
    let (g0, g1) = ftube.gate_measures();
    let gate = if side == Side::Left { g0 } else { g1 };
    lambda * gate / (gamma_const(2).unwrap() * sphere_measure(2).unwrap())
}

/// Lifetimes of particles injected at one gate.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupationLedger {
    pub records: Vec<CrossingRecord>,
    pub n_injected: usize,
    pub bin_edges: Vec<f64>,
    pub side: Side,
    pub length: f64,
    pub gate_measure: f64,
    pub seed: u64,
    /// Particles dropped after exhausting the collision budget.
    pub budget_flags: usize,
}

impl OccupationLedger {
    pub fn m_bins(&self) -> usize {
        self.bin_edges.len() - 1
    }

    pub fn n_far(&self) -> usize {
        self.records.iter().filter(|r| r.crossed).count()
    }
}

/// Experiment tag of the particle streams of [`run_ensemble`].
pub fn ensemble_tag(side: Side) -> &'static str {
    match side {
        Side::Left => "ensemble-left",
        Side::Right => "ensemble-right",
    }
}

/// Simulates `n_particles` independent injections at `side`. Particle `k`
/// draws from stream `k` of the ensemble tag under `seed`, so the ledger does
/// not depend on the thread count.
///
/// For right-gate injection `crossed` marks an exit at the left gate, i.e. it
/// always means "reached the far gate".
pub fn run_ensemble(
    ftube: &FiniteTube,
    side: Side,
    n_particles: usize,
    m_bins: usize,
    seed: u64,
) -> Result<OccupationLedger, GasError> {
    if n_particles == 0 {
        return Err(GasError::Invalid("need at least one particle".into()));
    }
    if m_bins == 0 {
        return Err(GasError::Invalid("need at least one bin".into()));
    }
    let tag = ensemble_tag(side);
    let results: Vec<Result<Option<CrossingRecord>, GasError>> = (0..n_particles as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, tag, k);
            let (p, d) = sample_gate_entry(ftube, side, &mut rng);
            match run_lifetime(ftube, p, d, m_bins, &mut rng) {
                Ok(mut r) => {
                    r.crossed = r.exit_side == side.opposite();
                    Ok(Some(r))
                }
                Err(BilliardError::BudgetExceeded) => Ok(None),
                Err(e) => Err(e.into()),
            }
        })
        .collect();
    let mut records = Vec::with_capacity(n_particles);
    let mut budget_flags = 0;
    for r in results {
        match r? {
            Some(rec) => records.push(rec),
            None => budget_flags += 1,
        }
    }
    let h = ftube.length();
    let (g0, g1) = ftube.gate_measures();
    Ok(OccupationLedger {
        records,
        n_injected: n_particles,
        bin_edges: (0..=m_bins).map(|j| h * j as f64 / m_bins as f64).collect(),
        side,
        length: h,
        gate_measure: if side == Side::Left { g0 } else { g1 },
        seed,
        budget_flags,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GasSummary {
    pub arrival_rate: f64,
    /// Mean particle count per bin, ordered by increasing `x`.
    pub mean_counts: Vec<f64>,
    /// `Σ mean_counts`.
    pub q: f64,
    pub mean_lifetime: f64,
    /// Mean absorption rate at the right gate.
    pub current: f64,
    pub h_times_current: f64,
    /// Absorption rate at the left gate.
    pub current_left: f64,
    pub bin_edges: Vec<f64>,
}

impl GasSummary {
    /// Mean counts divided by bin length.
    pub fn densities(&self) -> Vec<f64> {
        self.bin_edges
            .windows(2)
            .zip(&self.mean_counts)
            .map(|(w, c)| c / (w[1] - w[0]))
            .collect()
    }

    /// Superposition of independent injection streams.
    pub fn combine(&self, other: &GasSummary) -> GasSummary {
        let h = *self.bin_edges.last().unwrap();
        let mean_counts: Vec<f64> = self.mean_counts.iter().zip(&other.mean_counts).map(|(a, b)| a + b).collect();
        let arrival = self.arrival_rate + other.arrival_rate;
        let q = self.q + other.q;
        GasSummary {
            arrival_rate: arrival,
            q,
            mean_lifetime: q / arrival,
            current: self.current + other.current,
            h_times_current: h * (self.current + other.current),
            current_left: self.current_left + other.current_left,
            mean_counts,
            bin_edges: self.bin_edges.clone(),
        }
    }
}

/// Little's law per bin: mean count = `Λ_a` × mean occupation time per
/// injected particle.
pub fn steady_state_from_ledger(ledger: &OccupationLedger, lambda: f64) -> Result<GasSummary, GasError> {
    if ledger.records.is_empty() {
        return Err(GasError::Invalid("empty ledger".into()));
    }
    let n = ledger.records.len() as f64;
    let rate = lambda * ledger.gate_measure / std::f64::consts::PI;
    let m = ledger.m_bins();
    let mut occupation = vec![NeumaierSum::new(); m];
    let mut lifetime = NeumaierSum::new();
    let mut right = 0usize;
    for r in &ledger.records {
        for (acc, &o) in occupation.iter_mut().zip(&r.bin_occupation) {
            acc.add(o);
        }
        lifetime.add(r.lifetime);
        if r.exit_side == Side::Right {
            right += 1;
        }
    }
    let mean_counts: Vec<f64> = occupation.iter().map(|s| rate * s.value() / n).collect();
    let q = mean_counts.iter().copied().collect::<NeumaierSum>().value();
    let current = rate * right as f64 / n;
    Ok(GasSummary {
        arrival_rate: rate,
        q,
        mean_lifetime: lifetime.value() / n,
        current,
        h_times_current: ledger.length * current,
        current_left: rate * (n - right as f64) / n,
        mean_counts,
        bin_edges: ledger.bin_edges.clone(),
    })
}

/// Mean counts per bin restricted to particles that reached the far gate.
pub fn far_exit_profile(ledger: &OccupationLedger, lambda: f64) -> Vec<f64> {
    let n = ledger.records.len() as f64;
    let rate = lambda * ledger.gate_measure / std::f64::consts::PI;
    let mut occupation = vec![NeumaierSum::new(); ledger.m_bins()];
    for r in ledger.records.iter().filter(|r| r.crossed) {
        for (acc, &o) in occupation.iter_mut().zip(&r.bin_occupation) {
            acc.add(o);
        }
    }
    occupation.iter().map(|s| rate * s.value() / n).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SteadySnapshot {
    pub time: f64,
    pub particles: Vec<(Point2, Vec2)>,
}

/// Poisson arrival epochs of one gate in `[0, t_end)`.
fn arrival_times(rate: f64, t_end: f64, rng: &mut SimRng) -> Vec<f64> {
    let mut out = Vec::new();
    if rate <= 0.0 {
        return out;
    }
    let exp = Exp::new(rate).expect("positive rate");
    let mut t = exp.sample(rng);
    while t < t_end {
        out.push(t);
        t += exp.sample(rng);
    }
    out
}

fn arrival_tag(side: Side) -> (&'static str, &'static str) {
    match side {
        Side::Left => ("arrivals-left", "event-left"),
        Side::Right => ("arrivals-right", "event-right"),
    }
}

/// Number of arrivals at each gate up to `t_end`, as generated by
/// [`run_event_driven`].
pub fn arrival_counts(ftube: &FiniteTube, config: &InjectionConfig, t_end: f64, seed: u64) -> (usize, usize) {
    let count = |side: Side| {
        let mut rng = stream(seed, arrival_tag(side).0, 0);
        arrival_times(arrival_rate(config.rate(side), ftube, side), t_end, &mut rng).len()
    };
    (count(Side::Left), count(Side::Right))
}

/// Literal gas started empty at `t = 0`. Each arrival is simulated once and
/// its position read off at every snapshot time it is alive for.
pub fn run_event_driven(
    ftube: &FiniteTube,
    config: &InjectionConfig,
    t_warmup: f64,
    snapshot_times: &[f64],
    seed: u64,
) -> Result<Vec<SteadySnapshot>, GasError> {
    config.validate()?;
    if snapshot_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(GasError::Invalid("snapshot times must be sorted".into()));
    }
    if snapshot_times.first().is_some_and(|&t| t < t_warmup) {
        return Err(GasError::Invalid("snapshots must not precede the warm-up".into()));
    }
    let t_end = snapshot_times.last().copied().unwrap_or(0.0);
    let mut snapshots: Vec<SteadySnapshot> = snapshot_times
        .iter()
        .map(|&t| SteadySnapshot {
            time: t,
            particles: Vec::new(),
        })
        .collect();
    for side in [Side::Left, Side::Right] {
        let (arr_tag, dyn_tag) = arrival_tag(side);
        let mut rng = stream(seed, arr_tag, 0);
        let arrivals = arrival_times(arrival_rate(config.rate(side), ftube, side), t_end, &mut rng);
        let seen: Vec<Vec<(usize, Point2, Vec2)>> = arrivals
            .par_iter()
            .enumerate()
            .map(|(k, &t_arr)| replay(ftube, side, t_arr, snapshot_times, &mut stream(seed, dyn_tag, k as u64)))
            .collect::<Result<_, _>>()?;
        for hits in seen {
            for (j, p, d) in hits {
                snapshots[j].particles.push((p, d));
            }
        }
    }
    Ok(snapshots)
}

fn replay(
    ftube: &FiniteTube,
    side: Side,
    t_arr: f64,
    snapshot_times: &[f64],
    rng: &mut SimRng,
) -> Result<Vec<(usize, Point2, Vec2)>, GasError> {
    let mut out = Vec::new();
    let mut j = snapshot_times.partition_point(|&t| t <= t_arr);
    if j == snapshot_times.len() {
        return Ok(out);
    }
    let (p, d) = sample_gate_entry(ftube, side, rng);
    let mut walker = Walker::new(ftube, p, d);
    loop {
        let f = walker.next_flight(rng)?;
        let t1 = t_arr + f.t0 + f.length;
        while j < snapshot_times.len() && snapshot_times[j] < t1 {
            out.push((j, f.at(snapshot_times[j] - t_arr), f.dir));
            j += 1;
        }
        if walker.absorbed().is_some() || j == snapshot_times.len() {
            return Ok(out);
        }
    }
}

/// A counting window in phase space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountCell {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
    /// Restrict to particles whose axial velocity has this sign.
    pub axial_sign: Option<i8>,
}

impl CountCell {
    pub fn contains(&self, p: Point2, d: Vec2) -> bool {
        (self.x_lo..self.x_hi).contains(&p.x)
            && (self.y_lo..self.y_hi).contains(&p.y)
            && self.axial_sign.is_none_or(|s| (d.x > 0.0) == (s > 0))
    }

    /// Area of the tube inside the cell's box.
    pub fn area(&self, ftube: &FiniteTube) -> f64 {
        ftube.realization().area_in_box(
            self.x_lo.max(0.0),
            self.x_hi.min(ftube.length()),
            self.y_lo,
            self.y_hi,
        )
    }

    /// Share of the direction circle selected by the cell.
    pub fn direction_fraction(&self) -> f64 {
        if self.axial_sign.is_some() {
            0.5
        } else {
            1.0
        }
    }
}

/// `counts[c][s]`: particles in cell `c` at snapshot `s`.
pub fn count_cells(snapshots: &[SteadySnapshot], cells: &[CountCell]) -> Vec<Vec<u64>> {
    cells
        .iter()
        .map(|c| {
            snapshots
                .iter()
                .map(|s| s.particles.iter().filter(|(p, d)| c.contains(*p, *d)).count() as u64)
                .collect()
        })
        .collect()
}

/// Stationary mean count in `cell` predicted from reversed first passages.
/// A phase point `(x, h)` is weighted by `μ + (λ − μ)·1{reversed path from
/// (x, −h) reaches the left gate first}`.
pub fn poisson_intensity_prediction(
    ftube: &FiniteTube,
    config: &InjectionConfig,
    cell: &CountCell,
    n_mc: usize,
    seed: u64,
) -> Result<f64, GasError> {
    config.validate()?;
    let h = ftube.length();
    let area = cell.area(ftube);
    if area <= 0.0 {
        return Err(GasError::Invalid("cell does not meet the tube".into()));
    }
    let (lam, mu) = (config.lambda_left, config.lambda_right);
    if lam == mu {
        return Ok(lam * area * cell.direction_fraction());
    }
    let tube = ftube.realization();
    let weights: Vec<f64> = (0..n_mc as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, "intensity", k);
            let (p, d) = loop {
                let p = Point2::new(
                    rng.random_range(cell.x_lo.max(0.0)..cell.x_hi.min(h)),
                    rng.random_range(cell.y_lo..cell.y_hi),
                );
                if !ftube.inside(p) {
                    continue;
                }
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let d = Vec2::new(a.cos(), a.sin());
                if cell.contains(p, d) {
                    break (p, d);
                }
            };
            let (side, _) = first_passage_probe(tube, (p, -d), -p.x, h - p.x, &mut rng)?;
            Ok(mu + (lam - mu) * f64::from(side == Passage::Down))
        })
        .collect::<Result<_, BilliardError>>()?;
    let mean = weights.iter().copied().collect::<NeumaierSum>().value() / n_mc as f64;
    Ok(mean * area * cell.direction_fraction())
}

/// Mean snapshot count per axial bin, on the same grid as a ledger.
pub fn bin_snapshot_counts(snapshots: &[SteadySnapshot], bin_edges: &[f64]) -> Vec<f64> {
    let m = bin_edges.len() - 1;
    let h = bin_edges[m];
    let mut totals = vec![0.0; m];
    for s in snapshots {
        for (p, _) in &s.particles {
            let j = ((p.x / h * m as f64) as usize).min(m - 1);
            totals[j] += 1.0;
        }
    }
    totals.iter().map(|t| t / snapshots.len() as f64).collect()
}

/// Exit gate of every particle of a ledger, counted per side.
pub fn exit_counts(ledger: &OccupationLedger) -> (usize, usize) {
    let right = ledger.records.iter().filter(|r| r.exit_side == Side::Right).count();
    (ledger.records.len() - right, right)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_tube, make_finite, TubeSpec};

    fn reference(h: f64) -> FiniteTube {
        make_finite(&build_tube(TubeSpec::reference(), 42).unwrap(), h).unwrap()
    }

    #[test]
    fn arrival_rate_arithmetic() {
        let strip = make_finite(&build_tube(TubeSpec::strip(1.0), 0).unwrap(), 10.0).unwrap();
        assert!((arrival_rate(1.0, &strip, Side::Left) - 1.0 / std::f64::consts::PI).abs() < 1e-15);
        assert_eq!(arrival_rate(2.0, &strip, Side::Left), 2.0 * arrival_rate(1.0, &strip, Side::Left));
    }

    #[test]
    fn injection_config_validation() {
        assert!(InjectionConfig { lambda_left: 0.0, lambda_right: 0.0 }.validate().is_err());
        assert!(InjectionConfig { lambda_left: -1.0, lambda_right: 1.0 }.validate().is_err());
        assert!(InjectionConfig { lambda_left: 1.0, lambda_right: 0.0 }.validate().is_ok());
    }

    #[test]
    fn single_particle_ledger() {
        let f = reference(20.0);
        let l = run_ensemble(&f, Side::Left, 1, 4, 1).unwrap();
        assert_eq!(l.records.len(), 1);
        assert_eq!(l.bin_edges, vec![0.0, 5.0, 10.0, 15.0, 20.0]);
    }

    #[test]
    fn little_identity_is_exact() {
        let f = reference(20.0);
        let l = run_ensemble(&f, Side::Left, 2000, 5, 3).unwrap();
        let s = steady_state_from_ledger(&l, 1.0).unwrap();
        assert!((s.q - s.arrival_rate * s.mean_lifetime).abs() <= 1e-12 * s.q);
        assert!((s.arrival_rate * l.n_far() as f64 / 2000.0 - s.current).abs() < 1e-15);
        assert!((s.current + s.current_left - s.arrival_rate).abs() < 1e-15);
    }

    #[test]
    fn ensemble_independent_of_thread_count() {
        let f = reference(12.0);
        let a = run_ensemble(&f, Side::Left, 300, 3, 9).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| run_ensemble(&f, Side::Left, 300, 3, 9).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn right_injection_far_gate_is_left() {
        let f = reference(12.0);
        let l = run_ensemble(&f, Side::Right, 500, 3, 2).unwrap();
        assert!(l.records.iter().all(|r| r.crossed == (r.exit_side == Side::Left)));
    }

    #[test]
    fn empty_before_first_arrival() {
        let f = reference(20.0);
        let cfg = InjectionConfig { lambda_left: 1.0, lambda_right: 1.0 };
        let snaps = run_event_driven(&f, &cfg, 0.0, &[0.0], 1).unwrap();
        assert!(snaps[0].particles.is_empty());
        assert!(run_event_driven(&f, &cfg, 10.0, &[5.0], 1).is_err());
    }

    #[test]
    fn snapshot_particles_are_inside() {
        let f = reference(20.0);
        let cfg = InjectionConfig { lambda_left: 1.0, lambda_right: 0.5 };
        let times: Vec<f64> = (0..20).map(|k| 400.0 + 20.0 * k as f64).collect();
        let snaps = run_event_driven(&f, &cfg, 400.0, &times, 5).unwrap();
        assert!(snaps.iter().any(|s| !s.particles.is_empty()));
        for s in &snaps {
            for (p, d) in &s.particles {
                assert!(f.inside(*p), "{p}");
                assert!((d.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_rates_prediction_is_flat() {
        let f = reference(20.0);
        let cfg = InjectionConfig { lambda_left: 2.0, lambda_right: 2.0 };
        let cell = CountCell { x_lo: 4.0, x_hi: 6.0, y_lo: -1.0, y_hi: 1.0, axial_sign: Some(1) };
        let p = poisson_intensity_prediction(&f, &cfg, &cell, 10, 0).unwrap();
        assert!((p - 2.0 * cell.area(&f) * 0.5).abs() < 1e-12);
    }

    #[test]
    fn prediction_small_near_far_gate() {
        let f = reference(20.0);
        let cfg = InjectionConfig { lambda_left: 1.0, lambda_right: 0.0 };
        let near = CountCell { x_lo: 0.0, x_hi: 1.0, y_lo: -1.0, y_hi: 1.0, axial_sign: None };
        let far = CountCell { x_lo: 19.0, x_hi: 20.0, ..near };
        let pn = poisson_intensity_prediction(&f, &cfg, &near, 4000, 1).unwrap() / near.area(&f);
        let pf = poisson_intensity_prediction(&f, &cfg, &far, 4000, 1).unwrap() / far.area(&f);
        assert!(pn > 0.8 && pf < 0.2, "{pn} {pf}");
    }
}
