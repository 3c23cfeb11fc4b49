//! Random tubes in the plane.
//!
//! A tube is a sequence of unit cells `[i, i+1)`. Each cell carries an upper
//! and a lower wall, both three-point polylines with a vertex at the cell
//! midpoint. For [`TubeFamily::RoughRandom`] the midpoint vertex is a tooth
//! pointing into the tube; the knot half-widths and tooth depths are hashed
//! from `(seed, index, role)` so any cell is available on demand and the
//! cell sequence is i.i.d. under integer shifts.
//!
//! Ray casting marches cell by cell along the direction of travel and tests
//! the four wall segments of each visited cell.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::hashed_uniform;

/// Radius of the transverse ball every section lives in.
pub const M_HAT: f64 = 10.0;
/// Minimal parameter along a ray for a hit to count; escapes the start point.
pub const EPS_STEP: f64 = 1e-9;
/// Distance tolerance for "on the boundary".
pub const ON_BOUNDARY_TOL: f64 = 1e-9;
/// Number of cells a single flight may cross before giving up.
pub const CELL_BUDGET: u64 = 1_000_000;

const ROLE_KNOT_UPPER: u64 = 1;
const ROLE_KNOT_LOWER: u64 = 2;
const ROLE_TOOTH_UPPER: u64 = 3;
const ROLE_TOOTH_LOWER: u64 = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid tube spec: {0}")]
    InvalidSpec(String),
    #[error("finite tube length must be an integer >= 4, got {0}")]
    InvalidLength(f64),
    #[error("invalid window [{a}, {b}]: {reason}")]
    InvalidWindow { a: f64, b: f64, reason: &'static str },
    #[error("ray from ({}, {}) along ({}, {}) crossed {CELL_BUDGET} cells without a hit", .origin.x, .origin.y, .dir.x, .dir.y)]
    NoHit { origin: Point2, dir: Point2 },
}

/// Point (or vector) in the plane; `x` is the axial coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

/// Directions and normals share the point representation.
pub type Vec2 = Point2;

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3-d cross product.
    #[inline]
    pub fn cross(self, o: Self) -> f64 {
        self.x * o.y - self.y * o.x
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn normalized(self) -> Self {
        let n = self.norm();
        Self::new(self.x / n, self.y / n)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Self;
    #[inline]
    fn mul(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s)
    }
}

impl Neg for Point2 {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

impl fmt::Display for Point2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum TubeFamily {
    /// Flat walls at `±width/2`. Contains an infinite straight corridor.
    StraightStrip { width: f64 },
    /// Knot half-widths uniform on `[w_min_half, w_max_half]`, one inward
    /// tooth per wall and cell with depth uniform on `[tooth_min, tooth_max]`.
    RoughRandom {
        w_min_half: f64,
        w_max_half: f64,
        tooth_min: f64,
        tooth_max: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeSpec {
    pub family: TubeFamily,
    pub dim: u32,
}

impl TubeSpec {
    pub fn strip(width: f64) -> Self {
        Self {
            family: TubeFamily::StraightStrip { width },
            dim: 2,
        }
    }

    pub fn rough(w_min_half: f64, w_max_half: f64, tooth_min: f64, tooth_max: f64) -> Self {
        Self {
            family: TubeFamily::RoughRandom {
                w_min_half,
                w_max_half,
                tooth_min,
                tooth_max,
            },
            dim: 2,
        }
    }

    /// The reference tube: unit knot sections, teeth of depth in `[0.2, 0.3]`.
    pub fn reference() -> Self {
        Self::rough(0.5, 0.5, 0.2, 0.3)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: String| Err(GeometryError::InvalidSpec(m));
        if self.dim != 2 {
            return bad(format!("the tube engine is planar, got dim = {}", self.dim));
        }
        match self.family {
            TubeFamily::StraightStrip { width } => {
                if !(width.is_finite() && width > 0.0 && width <= 2.0 * M_HAT) {
                    return bad(format!("strip width must lie in (0, {}], got {width}", 2.0 * M_HAT));
                }
            }
            TubeFamily::RoughRandom {
                w_min_half,
                w_max_half,
                tooth_min,
                tooth_max,
            } => {
                let all = [w_min_half, w_max_half, tooth_min, tooth_max];
                if all.iter().any(|v| !v.is_finite()) {
                    return bad("non-finite tube parameter".into());
                }
                if !(0.0 < w_min_half && w_min_half <= w_max_half && w_max_half <= M_HAT) {
                    return bad(format!(
                        "need 0 < w_min_half <= w_max_half <= {M_HAT}, got [{w_min_half}, {w_max_half}]"
                    ));
                }
                if !(0.0 < tooth_min && tooth_min <= tooth_max) {
                    return bad(format!(
                        "need 0 < tooth_min <= tooth_max, got [{tooth_min}, {tooth_max}]"
                    ));
                }
                if tooth_max >= w_min_half {
                    return bad(format!(
                        "tooth_max ({tooth_max}) must be below w_min_half ({w_min_half}) to keep a positive throat"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Bound on the slope magnitude of every wall segment.
    pub fn lipschitz_bound(&self) -> f64 {
        match self.family {
            TubeFamily::StraightStrip { .. } => 0.0,
            TubeFamily::RoughRandom {
                w_min_half,
                w_max_half,
                tooth_max,
                ..
            } => (w_max_half - w_min_half + tooth_max) / 0.5,
        }
    }

    /// Lower bound on every section measure.
    pub fn min_section_bound(&self) -> f64 {
        match self.family {
            TubeFamily::StraightStrip { width } => width,
            TubeFamily::RoughRandom {
                w_min_half, tooth_max, ..
            } => 2.0 * (w_min_half - tooth_max),
        }
    }

    /// Axial sight bound targeted by the tooth construction, `None` for the
    /// strip. Not a hard bound for [`TubeFamily::RoughRandom`]: rays inside the
    /// corridor `|y| < w_min_half - tooth_max` are never blocked.
    pub fn sight_limit(&self) -> Option<f64> {
        match self.family {
            TubeFamily::StraightStrip { .. } => None,
            TubeFamily::RoughRandom {
                w_max_half, tooth_min, ..
            } => Some(2.0 * w_max_half / tooth_min + 2.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub enum Wall {
    Upper,
    Lower,
    LeftGate,
    RightGate,
}

impl Wall {
    pub fn is_gate(self) -> bool {
        matches!(self, Wall::LeftGate | Wall::RightGate)
    }
}

/// One unit cell. Segments 0, 1 are the upper wall (left, right half),
/// segments 2, 3 the lower wall.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub index: i64,
    pub upper: [Point2; 3],
    pub lower: [Point2; 3],
}

impl Cell {
    #[inline]
    pub fn segment(&self, k: u8) -> (Point2, Point2) {
        match k {
            0 => (self.upper[0], self.upper[1]),
            1 => (self.upper[1], self.upper[2]),
            2 => (self.lower[0], self.lower[1]),
            _ => (self.lower[1], self.lower[2]),
        }
    }

    /// Inward unit normal of segment `k`.
    #[inline]
    pub fn normal(&self, k: u8) -> Vec2 {
        let (a, b) = self.segment(k);
        let e = (b - a).normalized();
        if k < 2 {
            Vec2::new(e.y, -e.x)
        } else {
            Vec2::new(-e.y, e.x)
        }
    }

    fn interp(poly: &[Point2; 3], x: f64) -> f64 {
        let (a, b) = if x <= poly[1].x {
            (poly[0], poly[1])
        } else {
            (poly[1], poly[2])
        };
        a.y + (b.y - a.y) * (x - a.x) / (b.x - a.x)
    }

    #[inline]
    pub fn upper_at(&self, x: f64) -> f64 {
        Self::interp(&self.upper, x)
    }

    #[inline]
    pub fn lower_at(&self, x: f64) -> f64 {
        Self::interp(&self.lower, x)
    }

    pub fn max_slope(&self) -> f64 {
        (0..4u8)
            .map(|k| {
                let (a, b) = self.segment(k);
                ((b.y - a.y) / (b.x - a.x)).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn arc_lengths(&self) -> [f64; 4] {
        let mut out = [0.0; 4];
        for k in 0..4u8 {
            let (a, b) = self.segment(k);
            out[k as usize] = (b - a).norm();
        }
        out
    }
}

/// A point of the boundary of the (finite or infinite) tube.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryPoint {
    pub position: Point2,
    pub inward_normal: Vec2,
    pub wall: Wall,
    pub cell_index: i64,
    pub segment_index: u8,
    /// Arc length from the segment's left endpoint.
    pub arc_param: f64,
}

/// The infinite random tube for a fixed master seed. Immutable; every query
/// is a pure function of `(spec, master_seed)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TubeRealization {
    spec: TubeSpec,
    master_seed: u64,
}

pub fn build_tube(spec: TubeSpec, master_seed: u64) -> Result<TubeRealization, GeometryError> {
    spec.validate()?;
    Ok(TubeRealization { spec, master_seed })
}

impl TubeRealization {
    pub fn spec(&self) -> &TubeSpec {
        &self.spec
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Knot half-widths `(upper, lower)` at the integer abscissa `i`.
    pub fn knot(&self, i: i64) -> (f64, f64) {
        match self.spec.family {
            TubeFamily::StraightStrip { width } => (0.5 * width, 0.5 * width),
            TubeFamily::RoughRandom {
                w_min_half,
                w_max_half,
                ..
            } => {
                let span = w_max_half - w_min_half;
                (
                    w_min_half + span * hashed_uniform(self.master_seed, i, ROLE_KNOT_UPPER),
                    w_min_half + span * hashed_uniform(self.master_seed, i, ROLE_KNOT_LOWER),
                )
            }
        }
    }

    /// Tooth depths `(upper, lower)` of cell `i`.
    pub fn teeth(&self, i: i64) -> (f64, f64) {
        match self.spec.family {
            TubeFamily::StraightStrip { .. } => (0.0, 0.0),
            TubeFamily::RoughRandom {
                tooth_min,
                tooth_max,
                ..
            } => {
                let span = tooth_max - tooth_min;
                (
                    tooth_min + span * hashed_uniform(self.master_seed, i, ROLE_TOOTH_UPPER),
                    tooth_min + span * hashed_uniform(self.master_seed, i, ROLE_TOOTH_LOWER),
                )
            }
        }
    }

    pub fn cell(&self, i: i64) -> Cell {
        let x0 = i as f64;
        let (hu0, hl0) = self.knot(i);
        let (hu1, hl1) = self.knot(i + 1);
        let (a, b) = self.teeth(i);
        Cell {
            index: i,
            upper: [
                Point2::new(x0, hu0),
                Point2::new(x0 + 0.5, hu0.min(hu1) - a),
                Point2::new(x0 + 1.0, hu1),
            ],
            lower: [
                Point2::new(x0, -hl0),
                Point2::new(x0 + 0.5, -(hl0.min(hl1) - b)),
                Point2::new(x0 + 1.0, -hl1),
            ],
        }
    }

    #[inline]
    fn cell_of(x: f64) -> i64 {
        x.floor() as i64
    }

    /// The open section `(y_lo, y_hi)` at abscissa `alpha`.
    pub fn section(&self, alpha: f64) -> (f64, f64) {
        let c = self.cell(Self::cell_of(alpha));
        (c.lower_at(alpha), c.upper_at(alpha))
    }

    pub fn section_measure(&self, alpha: f64) -> f64 {
        let (lo, hi) = self.section(alpha);
        hi - lo
    }

    /// `true` iff `p` lies strictly inside the tube.
    pub fn inside(&self, p: Point2) -> bool {
        let (lo, hi) = self.section(p.x);
        lo < p.y && p.y < hi
    }

    /// Average of `|ω_α|` over `[a, b]`, exact for the piecewise-linear walls.
    pub fn mean_section_measure(&self, a: f64, b: f64) -> Result<f64, GeometryError> {
        if !(b - a >= 1.0) {
            return Err(GeometryError::InvalidWindow {
                a,
                b,
                reason: "window must be at least one cell long",
            });
        }
        Ok(self.area_in_box(a, b, f64::NEG_INFINITY, f64::INFINITY) / (b - a))
    }

    /// Area of `{(x, y) in tube : x0 <= x <= x1, y0 <= y <= y1}`.
    pub fn area_in_box(&self, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        let mut total = 0.0;
        let mut i = Self::cell_of(x0);
        while (i as f64) < x1 {
            let c = self.cell(i);
            for half in 0..2 {
                let (ua, ub) = (c.upper[half], c.upper[half + 1]);
                let (la, lb) = (c.lower[half], c.lower[half + 1]);
                let lo = ua.x.max(x0);
                let hi = ub.x.min(x1);
                if hi > lo {
                    total += clipped_strip_area(ua, ub, la, lb, lo, hi, y0, y1);
                }
            }
            i += 1;
        }
        total
    }

    /// First boundary point hit by the ray `origin + t·dir`, `t > EPS_STEP`.
    pub fn ray_to_boundary(
        &self,
        origin: Point2,
        dir: Vec2,
    ) -> Result<(BoundaryPoint, f64), GeometryError> {
        self.cast(origin, dir, None, None)
    }

    pub(crate) fn cast(
        &self,
        origin: Point2,
        dir: Vec2,
        skip: Option<(i64, u8)>,
        gates: Option<(i64, i64)>,
    ) -> Result<(BoundaryPoint, f64), GeometryError> {
        if let Some((g0, g1)) = gates {
            if origin.x >= g1 as f64 && dir.x > 0.0 {
                return Ok(self.gate_point(origin, dir, 0.0, g1, Wall::RightGate));
            }
            if origin.x <= g0 as f64 && dir.x < 0.0 {
                return Ok(self.gate_point(origin, dir, 0.0, g0, Wall::LeftGate));
            }
        }
        match self.spec.family {
            TubeFamily::StraightStrip { width } => self.cast_strip(origin, dir, 0.5 * width, gates),
            TubeFamily::RoughRandom { .. } => self.cast_marching(origin, dir, skip, gates),
        }
    }

    fn gate_point(&self, origin: Point2, dir: Vec2, t: f64, gate_x: i64, wall: Wall) -> (BoundaryPoint, f64) {
        let x = gate_x as f64;
        let y = origin.y + t * dir.y;
        let (lo, _) = self.section(x);
        let normal = if wall == Wall::LeftGate {
            Vec2::new(1.0, 0.0)
        } else {
            Vec2::new(-1.0, 0.0)
        };
        (
            BoundaryPoint {
                position: Point2::new(x, y),
                inward_normal: normal,
                wall,
                cell_index: gate_x,
                segment_index: 0,
                arc_param: y - lo,
            },
            t,
        )
    }

    /// Closed form for flat walls.
    fn cast_strip(
        &self,
        origin: Point2,
        dir: Vec2,
        half: f64,
        gates: Option<(i64, i64)>,
    ) -> Result<(BoundaryPoint, f64), GeometryError> {
        let (t_wall, wall) = if dir.y > 0.0 {
            ((half - origin.y) / dir.y, Wall::Upper)
        } else if dir.y < 0.0 {
            ((-half - origin.y) / dir.y, Wall::Lower)
        } else {
            (f64::INFINITY, Wall::Upper)
        };
        let t_wall = if t_wall > EPS_STEP { t_wall } else { f64::INFINITY };
        if let Some((g0, g1)) = gates {
            let t_gate = if dir.x > 0.0 {
                (g1 as f64 - origin.x) / dir.x
            } else if dir.x < 0.0 {
                (g0 as f64 - origin.x) / dir.x
            } else {
                f64::INFINITY
            };
            if t_gate < t_wall {
                let (g, w) = if dir.x > 0.0 { (g1, Wall::RightGate) } else { (g0, Wall::LeftGate) };
                return Ok(self.gate_point(origin, dir, t_gate, g, w));
            }
        }
        if !t_wall.is_finite() || (t_wall * dir.x).abs() > CELL_BUDGET as f64 {
            return Err(GeometryError::NoHit { origin, dir });
        }
        let x = origin.x + t_wall * dir.x;
        let y = if wall == Wall::Upper { half } else { -half };
        let cell = Self::cell_of(x);
        let local = x - cell as f64;
        let first_half = local < 0.5 || (local == 0.5 && dir.x > 0.0);
        let seg = match (wall, first_half) {
            (Wall::Upper, true) => 0,
            (Wall::Upper, false) => 1,
            (_, true) => 2,
            (_, false) => 3,
        };
        let seg_x0 = cell as f64 + if first_half { 0.0 } else { 0.5 };
        let normal = if wall == Wall::Upper {
            Vec2::new(0.0, -1.0)
        } else {
            Vec2::new(0.0, 1.0)
        };
        Ok((
            BoundaryPoint {
                position: Point2::new(x, y),
                inward_normal: normal,
                wall,
                cell_index: cell,
                segment_index: seg,
                arc_param: x - seg_x0,
            },
            t_wall,
        ))
    }

    fn cast_marching(
        &self,
        origin: Point2,
        dir: Vec2,
        skip: Option<(i64, u8)>,
        gates: Option<(i64, i64)>,
    ) -> Result<(BoundaryPoint, f64), GeometryError> {
        let mut i = Self::cell_of(origin.x);
        if dir.x < 0.0 && origin.x == i as f64 {
            i -= 1;
        }
        let step: i64 = if dir.x > 0.0 { 1 } else { -1 };
        for _ in 0..CELL_BUDGET {
            let cell = self.cell(i);
            let mut best: Option<(f64, u8, f64)> = None;
            for k in 0..4u8 {
                if skip == Some((i, k)) {
                    continue;
                }
                let (a, b) = cell.segment(k);
                let e = b - a;
                let denom = dir.cross(e);
                if denom == 0.0 {
                    continue;
                }
                let w = a - origin;
                let t = w.cross(e) / denom;
                let s = w.cross(dir) / denom;
                if t > EPS_STEP && (-1e-12..=1.0 + 1e-12).contains(&s) {
                    best = match best {
                        None => Some((t, k, s)),
                        Some((bt, bk, bs)) => {
                            if (t - bt).abs() <= 1e-12 * t.max(1.0) {
                                // Kink: keep the segment on the side the ray arrives from.
                                let prefer_left = dir.x > 0.0;
                                let k_is_left = k % 2 == 0;
                                if k_is_left == prefer_left && bk / 2 == k / 2 {
                                    Some((t, k, s))
                                } else {
                                    Some((bt, bk, bs))
                                }
                            } else if t < bt {
                                Some((t, k, s))
                            } else {
                                Some((bt, bk, bs))
                            }
                        }
                    };
                }
            }
            let t_exit = if dir.x > 0.0 {
                ((i + 1) as f64 - origin.x) / dir.x
            } else if dir.x < 0.0 {
                (i as f64 - origin.x) / dir.x
            } else {
                f64::INFINITY
            };
            if let Some((t, k, s)) = best {
                if t <= t_exit * (1.0 + 1e-12) + 1e-15 {
                    let (a, b) = cell.segment(k);
                    let s = s.clamp(0.0, 1.0);
                    let len = (b - a).norm();
                    return Ok((
                        BoundaryPoint {
                            position: a + (b - a) * s,
                            inward_normal: cell.normal(k),
                            wall: if k < 2 { Wall::Upper } else { Wall::Lower },
                            cell_index: i,
                            segment_index: k,
                            arc_param: s * len,
                        },
                        t,
                    ));
                }
            }
            if !t_exit.is_finite() {
                break;
            }
            if let Some((g0, g1)) = gates {
                if step > 0 && i + 1 == g1 {
                    return Ok(self.gate_point(origin, dir, t_exit, g1, Wall::RightGate));
                }
                if step < 0 && i == g0 {
                    return Ok(self.gate_point(origin, dir, t_exit, g0, Wall::LeftGate));
                }
            }
            i += step;
        }
        Err(GeometryError::NoHit { origin, dir })
    }

    /// Uniform point (by arc length) on the walls with abscissa in `[a, b]`.
    pub fn sample_boundary_point<R: Rng + ?Sized>(&self, a: f64, b: f64, rng: &mut R) -> BoundaryPoint {
        let slope = self.spec.lipschitz_bound();
        let bound = 2.0 * (1.0 + slope * slope).sqrt();
        let c0 = a.floor() as i64;
        let c1 = b.ceil() as i64;
        loop {
            let i = rng.random_range(c0..c1.max(c0 + 1));
            let cell = self.cell(i);
            let lens = cell.arc_lengths();
            let total: f64 = lens.iter().sum();
            let u = rng.random::<f64>() * bound;
            if u >= total {
                continue;
            }
            let mut acc = 0.0;
            let mut k = 3u8;
            for (j, l) in lens.iter().enumerate() {
                if u < acc + l {
                    k = j as u8;
                    break;
                }
                acc += l;
            }
            let s = (u - acc) / lens[k as usize];
            let (p, q) = cell.segment(k);
            let pos = p + (q - p) * s;
            if pos.x < a || pos.x > b {
                continue;
            }
            return BoundaryPoint {
                position: pos,
                inward_normal: cell.normal(k),
                wall: if k < 2 { Wall::Upper } else { Wall::Lower },
                cell_index: i,
                segment_index: k,
                arc_param: s * lens[k as usize],
            };
        }
    }

    /// Whether two wall points see each other through the interior.
    pub fn mutually_visible(&self, p: &BoundaryPoint, q: &BoundaryPoint) -> bool {
        let d = q.position - p.position;
        let dist = d.norm();
        if dist <= ON_BOUNDARY_TOL {
            return false;
        }
        let dir = d * (1.0 / dist);
        if dir.dot(p.inward_normal) <= 0.0 || (-dir).dot(q.inward_normal) <= 0.0 {
            return false;
        }
        match self.cast(p.position, dir, Some((p.cell_index, p.segment_index)), None) {
            Ok((_, t)) => t >= dist - 1e-9,
            Err(_) => true,
        }
    }
}

/// Exact area between two linear walls over `[lo, hi]`, clipped to `[y0, y1]`.
#[allow(clippy::too_many_arguments)]
fn clipped_strip_area(ua: Point2, ub: Point2, la: Point2, lb: Point2, lo: f64, hi: f64, y0: f64, y1: f64) -> f64 {
    let line = |a: Point2, b: Point2, x: f64| a.y + (b.y - a.y) * (x - a.x) / (b.x - a.x);
    let width = |x: f64| {
        let top = line(ua, ub, x).min(y1);
        let bot = line(la, lb, x).max(y0);
        (top - bot).max(0.0)
    };
    let mut xs = vec![lo, hi];
    for (a, b) in [(ua, ub), (la, lb)] {
        if b.y != a.y {
            for level in [y0, y1] {
                if level.is_finite() {
                    let x = a.x + (level - a.y) * (b.x - a.x) / (b.y - a.y);
                    if x > lo && x < hi {
                        xs.push(x);
                    }
                }
            }
        }
    }
    xs.sort_by(f64::total_cmp);
    xs.windows(2)
        .map(|w| 0.5 * (w[1] - w[0]) * (width(w[0]) + width(w[1])))
        .sum()
}

/// How gate planes treat an arriving particle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    /// Particles reaching a gate leave the system.
    Absorbing,
    /// Gates are walls with normals `±e`; the domain is closed.
    Reflecting,
}

/// The piece of the tube between the gates `x = 0` and `x = H`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FiniteTube {
    tube: TubeRealization,
    length: i64,
    mode: GateMode,
}

pub fn make_finite(tube: &TubeRealization, h: f64) -> Result<FiniteTube, GeometryError> {
    if !(h.is_finite() && h.fract() == 0.0 && h >= 4.0) {
        return Err(GeometryError::InvalidLength(h));
    }
    Ok(FiniteTube {
        tube: *tube,
        length: h as i64,
        mode: GateMode::Absorbing,
    })
}

impl FiniteTube {
    pub fn realization(&self) -> &TubeRealization {
        &self.tube
    }

    pub fn length(&self) -> f64 {
        self.length as f64
    }

    pub fn mode(&self) -> GateMode {
        self.mode
    }

    /// Same domain with reflecting gates.
    pub fn closed(mut self) -> Self {
        self.mode = GateMode::Reflecting;
        self
    }

    /// `(|ω₀|, |ω_H|)`.
    pub fn gate_measures(&self) -> (f64, f64) {
        (
            self.tube.section_measure(0.0),
            self.tube.section_measure(self.length as f64),
        )
    }

    pub fn gate_interval(&self, right: bool) -> (f64, f64) {
        self.tube.section(if right { self.length as f64 } else { 0.0 })
    }

    pub fn inside(&self, p: Point2) -> bool {
        p.x > 0.0 && p.x < self.length as f64 && self.tube.inside(p)
    }

    pub fn area(&self) -> f64 {
        self.tube
            .area_in_box(0.0, self.length as f64, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn ray_to_boundary(&self, origin: Point2, dir: Vec2) -> Result<(BoundaryPoint, f64), GeometryError> {
        self.tube.cast(origin, dir, None, Some((0, self.length)))
    }
}

/// Anything a billiard can run in.
pub trait Domain: Sync {
    fn realization(&self) -> &TubeRealization;

    /// First hit from `origin` along `dir`, skipping the segment `from` lies on.
    fn cast_from(
        &self,
        origin: Point2,
        dir: Vec2,
        from: Option<&BoundaryPoint>,
    ) -> Result<(BoundaryPoint, f64), GeometryError>;

    /// `true` when a hit on `wall` ends the trajectory.
    fn absorbs(&self, wall: Wall) -> bool;

    fn inside(&self, p: Point2) -> bool;
}

fn skip_of(from: Option<&BoundaryPoint>) -> Option<(i64, u8)> {
    from.filter(|b| !b.wall.is_gate())
        .map(|b| (b.cell_index, b.segment_index))
}

impl Domain for TubeRealization {
    fn realization(&self) -> &TubeRealization {
        self
    }

    fn cast_from(
        &self,
        origin: Point2,
        dir: Vec2,
        from: Option<&BoundaryPoint>,
    ) -> Result<(BoundaryPoint, f64), GeometryError> {
        self.cast(origin, dir, skip_of(from), None)
    }

    fn absorbs(&self, _wall: Wall) -> bool {
        false
    }

    fn inside(&self, p: Point2) -> bool {
        TubeRealization::inside(self, p)
    }
}

impl Domain for FiniteTube {
    fn realization(&self) -> &TubeRealization {
        &self.tube
    }

    fn cast_from(
        &self,
        origin: Point2,
        dir: Vec2,
        from: Option<&BoundaryPoint>,
    ) -> Result<(BoundaryPoint, f64), GeometryError> {
        self.tube.cast(origin, dir, skip_of(from), Some((0, self.length)))
    }

    fn absorbs(&self, wall: Wall) -> bool {
        self.mode == GateMode::Absorbing && wall.is_gate()
    }

    fn inside(&self, p: Point2) -> bool {
        FiniteTube::inside(self, p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub window: (f64, f64),
    pub max_slope: f64,
    pub lipschitz_bound: f64,
    pub min_section: f64,
    pub max_section: f64,
    pub min_section_bound: f64,
    /// Largest axial separation among sampled mutually visible pairs.
    pub empirical_sight: f64,
    pub sight_limit: Option<f64>,
    pub sight_unbounded: bool,
    pub pairs_sampled: usize,
    pub visible_pairs: usize,
    pub warnings: Vec<String>,
    pub failures: Vec<String>,
    pub pass: bool,
}

/// Lipschitz, section and sight-line diagnostics over `[a, b]`.
pub fn validate_tube<R: Rng + ?Sized>(
    tube: &TubeRealization,
    a: f64,
    b: f64,
    rng: &mut R,
) -> Result<ValidationReport, GeometryError> {
    if !(b > a) {
        return Err(GeometryError::InvalidWindow {
            a,
            b,
            reason: "empty window",
        });
    }
    let spec = tube.spec();
    let mut max_slope = 0.0f64;
    let mut min_section = f64::INFINITY;
    let mut max_section = 0.0f64;
    let grid_per_cell = 16;
    for i in (a.floor() as i64)..(b.ceil() as i64) {
        let cell = tube.cell(i);
        max_slope = max_slope.max(cell.max_slope());
        for j in 0..=grid_per_cell {
            let x = i as f64 + j as f64 / grid_per_cell as f64;
            if x < a || x > b {
                continue;
            }
            let w = cell.upper_at(x) - cell.lower_at(x);
            min_section = min_section.min(w);
            max_section = max_section.max(w);
        }
    }

    const PAIRS: usize = 10_000;
    let limit = spec.sight_limit();
    let window = limit.map_or(20.0, |l| 2.0 * l).min(b - a);
    let mut visible = 0;
    let mut sight = 0.0f64;
    for _ in 0..PAIRS {
        let p = tube.sample_boundary_point(a, b, rng);
        let lo = (p.position.x - window).max(a);
        let hi = (p.position.x + window).min(b);
        let q = tube.sample_boundary_point(lo, hi, rng);
        if tube.mutually_visible(&p, &q) {
            visible += 1;
            sight = sight.max((q.position.x - p.position.x).abs());
        }
    }

    let mut warnings = Vec::new();
    let mut failures = Vec::new();
    let lip = spec.lipschitz_bound();
    if max_slope > lip + 1e-12 {
        failures.push(format!("max slope {max_slope} exceeds bound {lip}"));
    }
    let sec_bound = spec.min_section_bound();
    if min_section < sec_bound - 1e-12 || min_section <= 0.0 {
        failures.push(format!("min section {min_section} below bound {sec_bound}"));
    }
    let unbounded = limit.is_none();
    match limit {
        None => warnings.push("straight corridor: axial sight lines are unbounded".into()),
        // The inner corridor lets a thin set of lines slip past every tooth, so
        // the tooth-blocking bound is a target rather than a guarantee.
        Some(l) if sight > l => warnings.push(format!(
            "visible pair {sight:.3} cells apart exceeds the tooth-blocking target {l}"
        )),
        Some(_) => {}
    }
    Ok(ValidationReport {
        window: (a, b),
        max_slope,
        lipschitz_bound: lip,
        min_section,
        max_section,
        min_section_bound: sec_bound,
        empirical_sight: sight,
        sight_limit: limit,
        sight_unbounded: unbounded,
        pairs_sampled: PAIRS,
        visible_pairs: visible,
        pass: failures.is_empty(),
        warnings,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn reference() -> TubeRealization {
        build_tube(TubeSpec::reference(), 42).unwrap()
    }

    #[test]
    fn strip_cells_are_flat() {
        let t = build_tube(TubeSpec::strip(1.0), 99).unwrap();
        let c = t.cell(0);
        assert!(c.upper.iter().all(|p| p.y == 0.5));
        assert!(c.lower.iter().all(|p| p.y == -0.5));
        assert_eq!(t.section(3.7), (-0.5, 0.5));
    }

    #[test]
    fn cells_are_pure() {
        let t = reference();
        assert_eq!(t.cell(7), t.cell(7));
        assert_eq!(t.cell(-123_456), build_tube(TubeSpec::reference(), 42).unwrap().cell(-123_456));
        assert_ne!(t.cell(7), build_tube(TubeSpec::reference(), 43).unwrap().cell(7));
    }

    #[test]
    fn throat_half_widths_within_tooth_range() {
        let t = reference();
        for i in 0..10_000 {
            let c = t.cell(i);
            let up = c.upper[1].y;
            let lo = -c.lower[1].y;
            assert!((0.2 - 1e-12..=0.3 + 1e-12).contains(&up), "cell {i}: {up}");
            assert!((0.2 - 1e-12..=0.3 + 1e-12).contains(&lo), "cell {i}: {lo}");
        }
    }

    #[test]
    fn cells_join_continuously() {
        let t = build_tube(TubeSpec::rough(0.4, 0.6, 0.1, 0.3), 5).unwrap();
        for i in -50..50 {
            let (c, d) = (t.cell(i), t.cell(i + 1));
            assert_eq!(c.upper[2], d.upper[0]);
            assert_eq!(c.lower[2], d.lower[0]);
            for j in 0..=20 {
                let x = i as f64 + j as f64 / 20.0;
                assert!(c.upper_at(x) > c.lower_at(x));
            }
            assert!(c.max_slope() <= t.spec().lipschitz_bound() + 1e-12);
        }
    }

    #[test]
    fn knot_sections_and_throat_minimum() {
        let t = reference();
        let (lo, hi) = t.section(3.0);
        let (hu, hl) = t.knot(3);
        assert_eq!((lo, hi), (-hl, hu));
        // Scan one cell: the section is minimal at the throat.
        let throat = t.section_measure(3.5);
        for j in 0..=100 {
            let x = 3.0 + j as f64 / 100.0;
            assert!(t.section_measure(x) >= throat - 1e-12);
        }
    }

    #[test]
    fn mean_section_exact_and_bounded() {
        let strip = build_tube(TubeSpec::strip(1.0), 0).unwrap();
        assert_eq!(strip.mean_section_measure(0.0, 100.0).unwrap(), 1.0);
        let t = reference();
        let m = t.mean_section_measure(0.0, 1000.0).unwrap();
        assert!(m > 2.0 * (0.5 - 0.3) && m < 1.0);
        // One cell by hand: trapezoids on both halves.
        let c = t.cell(0);
        let w = |k: usize| c.upper[k].y - c.lower[k].y;
        let hand = 0.25 * (w(0) + w(1)) + 0.25 * (w(1) + w(2));
        assert!((t.mean_section_measure(0.0, 1.0).unwrap() - hand).abs() < 1e-14);
        assert!(t.mean_section_measure(0.0, 0.5).is_err());
    }

    #[test]
    fn ergodic_windows_agree() {
        let t = reference();
        let a = t.mean_section_measure(0.0, 1e4).unwrap();
        let b = t.mean_section_measure(1e4, 2e4).unwrap();
        assert!((a - b).abs() / a < 0.01);
    }

    #[test]
    fn clipped_area_matches_full_area() {
        let t = reference();
        let full = t.area_in_box(2.25, 7.5, f64::NEG_INFINITY, f64::INFINITY);
        let split = t.area_in_box(2.25, 7.5, f64::NEG_INFINITY, 0.1) + t.area_in_box(2.25, 7.5, 0.1, f64::INFINITY);
        assert!((full - split).abs() < 1e-12);
        // A box inside the corridor is fully covered.
        assert!((t.area_in_box(0.0, 3.0, -0.1, 0.1) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn strip_rays() {
        let t = build_tube(TubeSpec::strip(1.0), 0).unwrap();
        let (hit, len) = t.ray_to_boundary(Point2::new(0.0, -0.5), Vec2::new(0.0, 1.0)).unwrap();
        assert_eq!(hit.position, Point2::new(0.0, 0.5));
        assert_eq!(len, 1.0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let (hit, len) = t.ray_to_boundary(Point2::new(0.0, -0.5), Vec2::new(s, s)).unwrap();
        assert!((hit.position.x - 1.0).abs() < 1e-12 && (hit.position.y - 0.5).abs() < 1e-15);
        assert!((len - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(hit.inward_normal, Vec2::new(0.0, -1.0));
    }

    #[test]
    fn axial_strip_ray_has_no_hit() {
        let t = build_tube(TubeSpec::strip(1.0), 0).unwrap();
        let err = t.ray_to_boundary(Point2::new(0.0, 0.0), Vec2::new(1.0, 0.0));
        assert!(matches!(err, Err(GeometryError::NoHit { .. })));
    }

    #[test]
    fn strip_closed_form_matches_marching() {
        let t = build_tube(TubeSpec::strip(0.8), 0).unwrap();
        let mut rng = stream(1, "strip-vs-march", 0);
        for _ in 0..2000 {
            let o = Point2::new(rng.random_range(-5.0..5.0), rng.random_range(-0.39..0.39));
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let d = Vec2::new(a.cos(), a.sin());
            if d.y.abs() < 1e-3 {
                continue;
            }
            let (h1, l1) = t.ray_to_boundary(o, d).unwrap();
            let (h2, l2) = t.cast_marching(o, d, None, None).unwrap();
            assert!((l1 - l2).abs() < 1e-9 * l1.max(1.0));
            assert!((h1.position - h2.position).norm() < 1e-9 * l1.max(1.0));
            assert_eq!(h1.segment_index, h2.segment_index);
            assert_eq!(h1.cell_index, h2.cell_index);
        }
    }

    #[test]
    fn normals_point_inside() {
        let t = reference();
        let mut rng = stream(2, "normals", 0);
        for _ in 0..2000 {
            let p = t.sample_boundary_point(-20.0, 20.0, &mut rng);
            assert!((p.inward_normal.norm() - 1.0).abs() < 1e-12);
            assert!(t.inside(p.position + p.inward_normal * 1e-7));
            let (a, b) = t.cell(p.cell_index).segment(p.segment_index);
            let along = (b - a).normalized();
            let off = (p.position - a).cross(along).abs();
            assert!(off < ON_BOUNDARY_TOL);
        }
    }

    #[test]
    fn finite_tube_gates() {
        let strip = build_tube(TubeSpec::strip(1.0), 0).unwrap();
        let f = make_finite(&strip, 100.0).unwrap();
        assert_eq!(f.gate_measures(), (1.0, 1.0));
        let t = reference();
        let f = make_finite(&t, 100.0).unwrap();
        assert_eq!(f.gate_measures().0, t.section_measure(0.0));
        assert!(make_finite(&t, 7.5).is_err());
        assert!(make_finite(&t, 3.0).is_err());
        // Axial ray from the left gate is absorbed at the right gate of a strip.
        let f = make_finite(&strip, 10.0).unwrap();
        let (hit, len) = f.ray_to_boundary(Point2::new(0.0, 0.1), Vec2::new(1.0, 0.0)).unwrap();
        assert_eq!(hit.wall, Wall::RightGate);
        assert_eq!(len, 10.0);
    }

    #[test]
    fn spec_validation() {
        assert!(TubeSpec::rough(0.5, 0.5, 0.2, 0.5).validate().is_err());
        assert!(TubeSpec::rough(0.5, 0.4, 0.2, 0.3).validate().is_err());
        assert!(TubeSpec::rough(0.5, 0.5, 0.0, 0.3).validate().is_err());
        assert!(TubeSpec::strip(0.0).validate().is_err());
        assert!(TubeSpec::strip(25.0).validate().is_err());
        let mut s = TubeSpec::reference();
        s.dim = 3;
        assert!(s.validate().is_err());
        assert!(TubeSpec::reference().validate().is_ok());
    }

    #[test]
    fn validation_reports() {
        let mut rng = stream(3, "validate", 0);
        let strip = build_tube(TubeSpec::strip(1.0), 0).unwrap();
        let r = validate_tube(&strip, -10.0, 110.0, &mut rng).unwrap();
        assert!(r.sight_unbounded && r.pass && !r.warnings.is_empty());
        let t = reference();
        let r = validate_tube(&t, -10.0, 110.0, &mut rng).unwrap();
        assert!(r.pass, "{:?}", r.failures);
        assert!(r.max_slope <= TubeSpec::reference().lipschitz_bound());
        assert!(!r.sight_unbounded);
        assert!(r.empirical_sight > 1.0 && r.visible_pairs > 0);
    }
}
