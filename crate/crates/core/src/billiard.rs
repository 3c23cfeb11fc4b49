//! Single-particle dynamics with the cosine reflection law.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{BoundaryPoint, Domain, FiniteTube, GeometryError, Point2, TubeRealization, Vec2, Wall};

/// Collisions a single trajectory may perform before it is flagged.
pub const MAX_COLLISIONS: u64 = 1_000_000_000;
/// Sampled directions closer than this to the tangent plane are redrawn.
pub const GRAZING_GUARD: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BilliardError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("unsupported dimension {0}; cosine sampling is defined for d = 2 and d = 3")]
    UnsupportedDimension(u32),
    #[error("collision budget of {MAX_COLLISIONS} exceeded")]
    BudgetExceeded,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// `γ_d = (∫_{S_e} h·e dh)^{-1}`.
pub fn gamma_const(d: u32) -> Result<f64, BilliardError> {
    match d {
        2 => Ok(0.5),
        3 => Ok(1.0 / PI),
        _ => Err(BilliardError::UnsupportedDimension(d)),
    }
}

/// `|S^{d-1}|`.
pub fn sphere_measure(d: u32) -> Result<f64, BilliardError> {
    match d {
        2 => Ok(TAU),
        3 => Ok(2.0 * TAU),
        _ => Err(BilliardError::UnsupportedDimension(d)),
    }
}

/// Unit vector in two or three dimensions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Direction {
    D2(Vec2),
    D3([f64; 3]),
}

impl Direction {
    pub fn dim(&self) -> u32 {
        match self {
            Direction::D2(_) => 2,
            Direction::D3(_) => 3,
        }
    }

    pub fn dot(&self, other: &Direction) -> f64 {
        match (self, other) {
            (Direction::D2(a), Direction::D2(b)) => a.dot(*b),
            (Direction::D3(a), Direction::D3(b)) => a[0] * b[0] + a[1] * b[1] + a[2] * b[2],
            _ => f64::NAN,
        }
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// Cosine-law direction about the unit `normal` in the plane: the angle to the
/// normal has `sin θ ~ U(-1, 1)`.
#[inline]
pub fn sample_cosine_2d<R: Rng + ?Sized>(normal: Vec2, rng: &mut R) -> Vec2 {
    loop {
        let s: f64 = 2.0 * rng.random::<f64>() - 1.0;
        let c = (1.0 - s * s).sqrt();
        if c < GRAZING_GUARD {
            continue;
        }
        let tangent = Vec2::new(-normal.y, normal.x);
        return normal * c + tangent * s;
    }
}

/// Cosine-law direction about `normal` in space: `cos² φ ~ U(0, 1)`, uniform
/// azimuth.
pub fn sample_cosine_3d<R: Rng + ?Sized>(normal: [f64; 3], rng: &mut R) -> [f64; 3] {
    let [nx, ny, nz] = normal;
    // Orthonormal frame (Frisvad / Duff et al. branchless construction).
    let sign = if nz >= 0.0 { 1.0 } else { -1.0 };
    let a = -1.0 / (sign + nz);
    let b = nx * ny * a;
    let t1 = [1.0 + sign * nx * nx * a, sign * b, -sign * nx];
    let t2 = [b, sign + ny * ny * a, -ny];
    loop {
        let cos_phi = rng.random::<f64>().sqrt();
        if cos_phi < GRAZING_GUARD {
            continue;
        }
        let sin_phi = (1.0 - cos_phi * cos_phi).sqrt();
        let psi = TAU * rng.random::<f64>();
        let (u, v) = (sin_phi * psi.cos(), sin_phi * psi.sin());
        return [
            cos_phi * nx + u * t1[0] + v * t2[0],
            cos_phi * ny + u * t1[1] + v * t2[1],
            cos_phi * nz + u * t1[2] + v * t2[2],
        ];
    }
}

pub fn sample_cosine_direction<R: Rng + ?Sized>(normal: &Direction, rng: &mut R) -> Direction {
    match *normal {
        Direction::D2(n) => Direction::D2(sample_cosine_2d(n, rng)),
        Direction::D3(n) => Direction::D3(sample_cosine_3d(n, rng)),
    }
}

/// One step of the embedded chain: cosine direction at `x`, then the ray cast.
pub fn krw_next<D: Domain, R: Rng + ?Sized>(
    domain: &D,
    x: &BoundaryPoint,
    rng: &mut R,
) -> Result<(BoundaryPoint, f64), BilliardError> {
    let dir = sample_cosine_2d(x.inward_normal, rng);
    Ok(domain.cast_from(x.position, dir, Some(x))?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilliardState {
    pub position: Point2,
    pub direction: Vec2,
    /// Elapsed path length; the speed is one.
    pub time: f64,
    pub collisions: u64,
}

/// A straight piece of trajectory.
#[derive(Clone, Copy, Debug)]
pub struct Flight {
    pub start: Point2,
    pub dir: Vec2,
    pub end: BoundaryPoint,
    pub length: f64,
    /// Time at the start of the flight.
    pub t0: f64,
}

impl Flight {
    pub fn at(&self, t: f64) -> Point2 {
        self.start + self.dir * (t - self.t0)
    }
}

/// Stochastic billiard in a domain; each call to [`Walker::next_flight`]
/// advances to the next wall hit and reflects.
pub struct Walker<'a, D: Domain> {
    domain: &'a D,
    state: BilliardState,
    from: Option<BoundaryPoint>,
    absorbed: Option<Wall>,
}

impl<'a, D: Domain> Walker<'a, D> {
    pub fn new(domain: &'a D, position: Point2, direction: Vec2) -> Self {
        Self {
            domain,
            state: BilliardState {
                position,
                direction,
                time: 0.0,
                collisions: 0,
            },
            from: None,
            absorbed: None,
        }
    }

    pub fn from_boundary<R: Rng + ?Sized>(domain: &'a D, start: BoundaryPoint, rng: &mut R) -> Self {
        let direction = sample_cosine_2d(start.inward_normal, rng);
        Self {
            domain,
            state: BilliardState {
                position: start.position,
                direction,
                time: 0.0,
                collisions: 0,
            },
            from: Some(start),
            absorbed: None,
        }
    }

    pub fn state(&self) -> BilliardState {
        self.state
    }

    /// Gate the particle was absorbed at, if any.
    pub fn absorbed(&self) -> Option<Wall> {
        self.absorbed
    }

    pub fn next_flight<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Flight, BilliardError> {
        debug_assert!(self.absorbed.is_none());
        if self.state.collisions >= MAX_COLLISIONS {
            return Err(BilliardError::BudgetExceeded);
        }
        let (hit, length) = self
            .domain
            .cast_from(self.state.position, self.state.direction, self.from.as_ref())?;
        let flight = Flight {
            start: self.state.position,
            dir: self.state.direction,
            end: hit,
            length,
            t0: self.state.time,
        };
        self.state.time += length;
        self.state.position = hit.position;
        if self.domain.absorbs(hit.wall) {
            self.absorbed = Some(hit.wall);
        } else {
            self.state.collisions += 1;
            self.state.direction = sample_cosine_2d(hit.inward_normal, rng);
            self.from = Some(hit);
        }
        Ok(flight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KsbTrack {
    /// Axial coordinate at each requested time.
    pub samples: Vec<f64>,
    pub collisions: u64,
    /// Total path length of all completed flights (`τ_n`).
    pub path_length: f64,
    /// Collision points `ξ_1, ξ_2, ...`, when requested.
    pub chain: Vec<Point2>,
}

fn check_sample_times(sample_times: &[f64], t_max: f64) -> Result<(), BilliardError> {
    if sample_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(BilliardError::InvalidArgument("sample times must be sorted".into()));
    }
    if sample_times.first().is_some_and(|&t| t < 0.0) || sample_times.last().is_some_and(|&t| t > t_max) {
        return Err(BilliardError::InvalidArgument("sample times must lie in [0, t_max]".into()));
    }
    Ok(())
}

fn ksb_impl<R: Rng + ?Sized>(
    tube: &TubeRealization,
    start_pos: Point2,
    start_dir: Vec2,
    t_max: f64,
    sample_times: &[f64],
    record_chain: bool,
    rng: &mut R,
) -> Result<KsbTrack, BilliardError> {
    check_sample_times(sample_times, t_max)?;
    let mut walker = Walker::new(tube, start_pos, start_dir);
    let mut samples = Vec::with_capacity(sample_times.len());
    let mut chain = Vec::new();
    let mut next = 0;
    while next < sample_times.len() && sample_times[next] <= 0.0 {
        samples.push(start_pos.x);
        next += 1;
    }
    let mut path_length = 0.0;
    while next < sample_times.len() {
        let f = walker.next_flight(rng)?;
        let t1 = f.t0 + f.length;
        while next < sample_times.len() && sample_times[next] < t1 {
            samples.push(f.at(sample_times[next]).x);
            next += 1;
        }
        path_length = t1;
        if record_chain {
            chain.push(f.end.position);
        }
    }
    Ok(KsbTrack {
        samples,
        collisions: walker.state().collisions,
        path_length,
        chain,
    })
}

/// Continuous-time billiard in the infinite tube, observed at `sample_times`.
pub fn run_ksb<R: Rng + ?Sized>(
    tube: &TubeRealization,
    start_pos: Point2,
    start_dir: Vec2,
    t_max: f64,
    sample_times: &[f64],
    rng: &mut R,
) -> Result<KsbTrack, BilliardError> {
    ksb_impl(tube, start_pos, start_dir, t_max, sample_times, false, rng)
}

/// [`run_ksb`] that also keeps the collision points.
pub fn run_ksb_with_chain<R: Rng + ?Sized>(
    tube: &TubeRealization,
    start_pos: Point2,
    start_dir: Vec2,
    t_max: f64,
    sample_times: &[f64],
    rng: &mut R,
) -> Result<KsbTrack, BilliardError> {
    ksb_impl(tube, start_pos, start_dir, t_max, sample_times, true, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn gate(self) -> Wall {
        match self {
            Side::Left => Wall::LeftGate,
            Side::Right => Wall::RightGate,
        }
    }

    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

/// Lifetime of one particle in a finite tube.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossingRecord {
    pub lifetime: f64,
    /// Left at the right gate without touching the left gate plane.
    pub crossed: bool,
    pub exit_side: Side,
    /// Time spent with axial coordinate in bin `j`, `[jH/m, (j+1)H/m)`.
    pub bin_occupation: Vec<f64>,
    pub collisions: u64,
}

/// Spreads a flight's duration over the axial bins it crosses.
pub(crate) fn add_occupation(bins: &mut [f64], width: f64, x0: f64, x1: f64, length: f64) {
    let m = bins.len();
    let clamp = |x: f64| ((x / width).floor().max(0.0) as usize).min(m - 1);
    let (lo, hi) = if x0 <= x1 { (x0, x1) } else { (x1, x0) };
    let (b0, b1) = (clamp(lo), clamp(hi));
    if b0 == b1 || hi == lo {
        bins[b0] += length;
        return;
    }
    let scale = length / (hi - lo);
    for (j, bin) in bins.iter_mut().enumerate().take(b1 + 1).skip(b0) {
        let edge_lo = if j == b0 { lo } else { j as f64 * width };
        let edge_hi = if j == b1 { hi } else { (j + 1) as f64 * width };
        *bin += (edge_hi - edge_lo) * scale;
    }
}

/// Runs a particle from `start_pos` until it is absorbed at a gate.
pub fn run_lifetime<R: Rng + ?Sized>(
    ftube: &FiniteTube,
    start_pos: Point2,
    start_dir: Vec2,
    m_bins: usize,
    rng: &mut R,
) -> Result<CrossingRecord, BilliardError> {
    if m_bins == 0 {
        return Err(BilliardError::InvalidArgument("need at least one bin".into()));
    }
    let width = ftube.length() / m_bins as f64;
    let mut bins = vec![0.0; m_bins];
    let mut walker = Walker::new(ftube, start_pos, start_dir);
    loop {
        let f = walker.next_flight(rng)?;
        add_occupation(&mut bins, width, f.start.x, f.end.position.x, f.length);
        if let Some(gate) = walker.absorbed() {
            let state = walker.state();
            let exit_side = if gate == Wall::RightGate { Side::Right } else { Side::Left };
            return Ok(CrossingRecord {
                lifetime: state.time,
                crossed: exit_side == Side::Right,
                exit_side,
                bin_occupation: bins,
                collisions: state.collisions,
            });
        }
    }
}

/// Injection point uniform on a gate, cosine direction about the inward axis.
pub fn sample_gate_entry<R: Rng + ?Sized>(ftube: &FiniteTube, side: Side, rng: &mut R) -> (Point2, Vec2) {
    let (lo, hi) = ftube.gate_interval(side == Side::Right);
    let y = lo + (hi - lo) * rng.random::<f64>();
    let (x, normal) = match side {
        Side::Left => (0.0, Vec2::new(1.0, 0.0)),
        Side::Right => (ftube.length(), Vec2::new(-1.0, 0.0)),
    };
    (Point2::new(x, y), sample_cosine_2d(normal, rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Passage {
    /// Reached `start + a` first.
    Down,
    /// Reached `start + b` first.
    Up,
}

/// First time the axial coordinate moves by `a < 0` or `b > 0` from its start.
pub fn first_passage_probe<D: Domain, R: Rng + ?Sized>(
    domain: &D,
    start: (Point2, Vec2),
    a: f64,
    b: f64,
    rng: &mut R,
) -> Result<(Passage, f64), BilliardError> {
    if a >= 0.0 {
        return Ok((Passage::Down, 0.0));
    }
    if b <= 0.0 {
        return Ok((Passage::Up, 0.0));
    }
    let (lo, hi) = (start.0.x + a, start.0.x + b);
    let mut walker = Walker::new(domain, start.0, start.1);
    loop {
        let f = walker.next_flight(rng)?;
        let x1 = f.end.position.x;
        if x1 <= lo {
            let t = f.t0 + f.length * (f.start.x - lo) / (f.start.x - x1);
            return Ok((Passage::Down, t));
        }
        if x1 >= hi {
            let t = f.t0 + f.length * (hi - f.start.x) / (x1 - f.start.x);
            return Ok((Passage::Up, t));
        }
        if walker.absorbed().is_some() {
            return Err(BilliardError::InvalidArgument(
                "domain absorbed the probe before either level was reached".into(),
            ));
        }
    }
}

/// Tail and second moment of the axial KRW jump.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JumpStats {
    pub n_samples: usize,
    /// `(u, P̂[|Δx| >= u])` for `u = 1, 2, 4, ...` up to the first empty bin.
    pub tail_table: Vec<(f64, f64)>,
    /// Mean of `Δx²` over all samples.
    pub second_moment: f64,
    pub max_jump: f64,
    /// `(batch size, median over batches of the batch mean of Δx²)`.
    pub batch_medians: Vec<(usize, f64)>,
    /// The batch medians stop growing with the batch size.
    pub stabilized: bool,
}

/// Batch-median growth factor above which the second moment is reported as
/// non-stabilizing.
pub const STABILIZATION_RATIO: f64 = 1.25;

/// KRW jumps sampled along one long run after a burn-in.
pub fn jump_statistics<R: Rng + ?Sized>(
    tube: &TubeRealization,
    n_samples: usize,
    rng: &mut R,
) -> Result<JumpStats, BilliardError> {
    if n_samples < 10_000 {
        return Err(BilliardError::InvalidArgument("need at least 10^4 samples".into()));
    }
    let mut x = tube.sample_boundary_point(0.0, 1.0, rng);
    for _ in 0..1000 {
        x = krw_next(tube, &x, rng)?.0;
    }
    let mut jumps = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let (y, _) = krw_next(tube, &x, rng)?;
        jumps.push((y.position.x - x.position.x).abs());
        x = y;
    }
    Ok(summarize_jumps(&jumps))
}

pub(crate) fn summarize_jumps(jumps: &[f64]) -> JumpStats {
    let n = jumps.len();
    let second_moment = jumps.iter().map(|d| d * d).sum::<f64>() / n as f64;
    let max_jump = jumps.iter().copied().fold(0.0, f64::max);
    let mut tail_table = Vec::new();
    let mut u = 1.0;
    loop {
        let p = jumps.iter().filter(|&&d| d >= u).count() as f64 / n as f64;
        tail_table.push((u, p));
        if p == 0.0 {
            break;
        }
        u *= 2.0;
    }
    let mut batch_medians = Vec::new();
    let mut size = 100usize;
    while size * 10 <= n {
        let mut means: Vec<f64> = jumps
            .chunks_exact(size)
            .map(|c| c.iter().map(|d| d * d).sum::<f64>() / size as f64)
            .collect();
        means.sort_by(f64::total_cmp);
        batch_medians.push((size, means[means.len() / 2]));
        size *= 10;
    }
    let stabilized = match (batch_medians.first(), batch_medians.last()) {
        (Some(a), Some(b)) if batch_medians.len() >= 2 => b.1 / a.1 < STABILIZATION_RATIO,
        _ => true,
    };
    JumpStats {
        n_samples: n,
        tail_table,
        second_moment,
        max_jump,
        batch_medians,
        stabilized,
    }
}

/// Arc interval on one wall segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryPatch {
    pub cell_index: i64,
    pub segment_index: u8,
    pub arc_lo: f64,
    pub arc_hi: f64,
}

impl BoundaryPatch {
    pub fn contains(&self, p: &BoundaryPoint) -> bool {
        !p.wall.is_gate()
            && p.cell_index == self.cell_index
            && p.segment_index == self.segment_index
            && (self.arc_lo..self.arc_hi).contains(&p.arc_param)
    }

    pub fn measure(&self) -> f64 {
        self.arc_hi - self.arc_lo
    }
}

/// Counts `(N(A→B), N(B→A))` over `n_steps` chain steps from `start`.
pub fn transition_counts<D: Domain, R: Rng + ?Sized>(
    domain: &D,
    start: BoundaryPoint,
    n_steps: u64,
    a: &BoundaryPatch,
    b: &BoundaryPatch,
    rng: &mut R,
) -> Result<(u64, u64), BilliardError> {
    let (mut ab, mut ba) = (0, 0);
    let mut x = start;
    for _ in 0..n_steps {
        let (y, _) = krw_next(domain, &x, rng)?;
        if a.contains(&x) && b.contains(&y) {
            ab += 1;
        } else if b.contains(&x) && a.contains(&y) {
            ba += 1;
        }
        x = y;
    }
    Ok((ab, ba))
}

/// Positions of a billiard in a closed domain at the epochs of a Poisson clock
/// with mean spacing `mean_gap`.
pub fn positions_at_random_times<D: Domain, R: Rng + ?Sized>(
    domain: &D,
    start: BoundaryPoint,
    n: usize,
    mean_gap: f64,
    rng: &mut R,
) -> Result<Vec<Point2>, BilliardError> {
    let clock = Exp::new(1.0 / mean_gap)
        .map_err(|e| BilliardError::InvalidArgument(format!("mean gap: {e}")))?;
    let mut walker = Walker::from_boundary(domain, start, rng);
    let mut out = Vec::with_capacity(n);
    let mut next_t = clock.sample(rng);
    while out.len() < n {
        let f = walker.next_flight(rng)?;
        if walker.absorbed().is_some() {
            return Err(BilliardError::InvalidArgument("domain is not closed".into()));
        }
        let t1 = f.t0 + f.length;
        while out.len() < n && next_t < t1 {
            out.push(f.at(next_t));
            next_t += clock.sample(rng);
        }
    }
    Ok(out)
}
