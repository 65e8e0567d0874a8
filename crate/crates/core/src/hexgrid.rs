//! Hexagonal tessellation in axial coordinates.
//!
//! The grid is a hexagonal disk of a given radius around `(0, 0)`. Cells are
//! indexed canonically (column `q` ascending, then row `r` ascending), and that
//! index is what observations use for one-hot locations and per-cell channels.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Axial hex coordinate.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HexCoord {
    pub q: i32,
    pub r: i32,
}

impl HexCoord {
    pub const ORIGIN: HexCoord = HexCoord { q: 0, r: 0 };

    pub const fn new(q: i32, r: i32) -> Self {
        HexCoord { q, r }
    }

    fn s(self) -> i32 {
        -self.q - self.r
    }

    pub fn offset(self, d: (i32, i32)) -> Self {
        HexCoord::new(self.q + d.0, self.r + d.1)
    }

    /// Centroid in planar meters (pointy-top layout, `pitch` between adjacent centroids).
    pub fn to_planar(self, pitch: f64) -> (f64, f64) {
        let x = pitch * (self.q as f64 + self.r as f64 / 2.0);
        let y = pitch * (3f64.sqrt() / 2.0) * self.r as f64;
        (x, y)
    }

    /// Nearest cell centroid to a planar point, ignoring grid bounds.
    pub fn from_planar(x: f64, y: f64, pitch: f64) -> Self {
        let r = y / (pitch * 3f64.sqrt() / 2.0);
        let q = x / pitch - r / 2.0;
        cube_round(q, r, -q - r)
    }
}

impl fmt::Display for HexCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.q, self.r)
    }
}

impl std::str::FromStr for HexCoord {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (q, r) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("axial id `{s}` is not of the form q:r")))?;
        let q = q.trim().parse().map_err(|_| Error::Parse(format!("bad axial q in `{s}`")))?;
        let r = r.trim().parse().map_err(|_| Error::Parse(format!("bad axial r in `{s}`")))?;
        Ok(HexCoord::new(q, r))
    }
}

fn cube_round(x: f64, y: f64, z: f64) -> HexCoord {
    let (mut rx, mut ry, rz) = (x.round(), y.round(), z.round());
    let (dx, dy, dz) = ((rx - x).abs(), (ry - y).abs(), (rz - z).abs());
    if dx > dy && dx > dz {
        rx = -ry - rz;
    } else if dy > dz {
        ry = -rx - rz;
    }
    HexCoord::new(rx as i32, ry as i32)
}

/// Axial offsets for action codes 1..=6: E, NE, NW, W, SW, SE.
pub const DIRECTIONS: [(i32, i32); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];

/// Number of primitive actions (stay + six neighbours).
pub const NUM_ACTIONS: usize = 7;

/// One of the seven primitive relocation moves. Code 0 is "stay".
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct PrimitiveAction(u8);

impl PrimitiveAction {
    pub const STAY: PrimitiveAction = PrimitiveAction(0);
    pub const EAST: PrimitiveAction = PrimitiveAction(1);

    pub fn new(code: u8) -> Result<Self> {
        if (code as usize) < NUM_ACTIONS {
            Ok(PrimitiveAction(code))
        } else {
            Err(Error::InvalidArgument(format!("primitive action code {code} outside 0..=6")))
        }
    }

    pub fn code(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = PrimitiveAction> {
        (0..NUM_ACTIONS as u8).map(PrimitiveAction)
    }

    pub fn delta(self) -> (i32, i32) {
        match self.0 {
            0 => (0, 0),
            c => DIRECTIONS[c as usize - 1],
        }
    }
}

impl TryFrom<u8> for PrimitiveAction {
    type Error = Error;

    fn try_from(code: u8) -> Result<Self> {
        PrimitiveAction::new(code)
    }
}

impl From<PrimitiveAction> for u8 {
    fn from(a: PrimitiveAction) -> u8 {
        a.0
    }
}

/// Grid geometry: disk radius, centroid spacing and vehicle speed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub radius: u32,
    /// Meters between adjacent cell centroids.
    pub pitch: f64,
    /// Meters travelled per tick.
    pub speed: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { radius: 5, pitch: 600.0, speed: 600.0 }
    }
}

impl GridSpec {
    pub fn new(radius: u32, pitch: f64, speed: f64) -> Result<Self> {
        let g = GridSpec { radius, pitch, speed };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.radius < 1 {
            return Err(Error::Config("grid.radius must be >= 1".into()));
        }
        if !(self.pitch > 0.0 && self.pitch.is_finite()) {
            return Err(Error::Config("grid.pitch must be > 0".into()));
        }
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(Error::Config("grid.speed must be > 0".into()));
        }
        Ok(())
    }

    pub fn contains(&self, h: HexCoord) -> bool {
        hex_distance(HexCoord::ORIGIN, h) <= self.radius
    }

    pub fn num_cells(&self) -> usize {
        let r = self.radius as usize;
        3 * r * (r + 1) + 1
    }

    /// All cells in canonical order.
    pub fn cells(&self) -> Vec<HexCoord> {
        let r = self.radius as i32;
        let mut out = Vec::with_capacity(self.num_cells());
        for q in -r..=r {
            for rr in (-r).max(-q - r)..=r.min(-q + r) {
                out.push(HexCoord::new(q, rr));
            }
        }
        out
    }

    /// Canonical index of an in-bounds cell.
    pub fn index_of(&self, h: HexCoord) -> Option<usize> {
        if !self.contains(h) {
            return None;
        }
        let r = self.radius as i32;
        // cells in columns -r..q
        let mut idx = 0i32;
        for q in -r..h.q {
            idx += r.min(-q + r) - (-r).max(-q - r) + 1;
        }
        idx += h.r - (-r).max(-h.q - r);
        Some(idx as usize)
    }

    /// Nearest in-bounds centroid to a planar point. Returns the cell and
    /// whether clamping was needed.
    pub fn nearest_cell(&self, x: f64, y: f64) -> (HexCoord, bool) {
        let h = HexCoord::from_planar(x, y, self.pitch);
        if self.contains(h) {
            return (h, false);
        }
        (self.clamp_planar(x, y), true)
    }

    /// Nearest in-bounds cell to an arbitrary (possibly off-grid) cell.
    pub fn clamp(&self, h: HexCoord) -> HexCoord {
        if self.contains(h) {
            return h;
        }
        let (x, y) = h.to_planar(self.pitch);
        self.clamp_planar(x, y)
    }

    fn clamp_planar(&self, x: f64, y: f64) -> HexCoord {
        let mut best = HexCoord::ORIGIN;
        let mut best_d = f64::INFINITY;
        for c in self.cells() {
            let (cx, cy) = c.to_planar(self.pitch);
            let d = (cx - x).powi(2) + (cy - y).powi(2);
            if d < best_d - 1e-9 {
                best_d = d;
                best = c;
            }
        }
        best
    }
}

/// Move one cell in direction `a`; stays put on `a = 0` or when the move
/// would leave the grid.
pub fn apply_action(h: HexCoord, a: PrimitiveAction, g: &GridSpec) -> HexCoord {
    let next = h.offset(a.delta());
    if g.contains(next) {
        next
    } else {
        h
    }
}

pub fn hex_distance(a: HexCoord, b: HexCoord) -> u32 {
    let dq = (a.q - b.q).unsigned_abs();
    let dr = (a.r - b.r).unsigned_abs();
    let ds = (a.s() - b.s()).unsigned_abs();
    (dq + dr + ds) / 2
}

/// Ticks to drive between centroids, rounded up.
pub fn travel_time(a: HexCoord, b: HexCoord, g: &GridSpec) -> u32 {
    let d = hex_distance(a, b);
    if d == 0 {
        return 0;
    }
    // small slack so exact multiples do not round up through float noise
    ((d as f64 * g.pitch / g.speed) - 1e-9).ceil().max(1.0) as u32
}

/// Ring of `h` around `origin` (ring 0 is the origin itself).
pub fn ring_index(origin: HexCoord, h: HexCoord) -> u32 {
    hex_distance(origin, h)
}

/// Cells on the straight hex line from `a` to `b`, both ends included.
pub fn hex_line(a: HexCoord, b: HexCoord) -> Vec<HexCoord> {
    let n = hex_distance(a, b);
    if n == 0 {
        return vec![a];
    }
    // nudge keeps ties on cell edges deterministic
    let (ax, ay, az) = (a.q as f64 + 1e-6, a.r as f64 + 1e-6, a.s() as f64 - 2e-6);
    let (bx, by, bz) = (b.q as f64 + 1e-6, b.r as f64 + 1e-6, b.s() as f64 - 2e-6);
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            cube_round(ax + (bx - ax) * t, ay + (by - ay) * t, az + (bz - az) * t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(r: u32) -> GridSpec {
        GridSpec::new(r, 600.0, 600.0).unwrap()
    }

    #[test]
    fn stay_is_identity() {
        let g = grid(3);
        assert_eq!(apply_action(HexCoord::ORIGIN, PrimitiveAction::STAY, &g), HexCoord::ORIGIN);
    }

    #[test]
    fn east_neighbour() {
        let g = grid(3);
        assert_eq!(apply_action(HexCoord::ORIGIN, PrimitiveAction::EAST, &g), HexCoord::new(1, 0));
    }

    #[test]
    fn boundary_clamps_to_origin_cell() {
        let g = grid(3);
        let edge = HexCoord::new(3, 0);
        assert_eq!(apply_action(edge, PrimitiveAction::EAST, &g), edge);
    }

    #[test]
    fn distances() {
        let o = HexCoord::ORIGIN;
        assert_eq!(hex_distance(o, o), 0);
        assert_eq!(hex_distance(o, HexCoord::new(2, -1)), 2);
        assert_eq!(hex_distance(o, HexCoord::new(-3, 3)), 3);
        assert_eq!(ring_index(o, HexCoord::new(-3, 3)), 3);
        assert_eq!(ring_index(o, HexCoord::new(2, -1)), 2);
        assert_eq!(ring_index(o, o), 0);
    }

    #[test]
    fn travel_times() {
        let g = GridSpec::new(5, 600.0, 600.0).unwrap();
        assert_eq!(travel_time(HexCoord::ORIGIN, HexCoord::new(2, -1), &g), 2);
        assert_eq!(travel_time(HexCoord::new(1, 1), HexCoord::new(1, 1), &g), 0);
        let g = GridSpec::new(5, 500.0, 600.0).unwrap();
        assert_eq!(travel_time(HexCoord::ORIGIN, HexCoord::new(-3, 3), &g), 3);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(GridSpec::new(0, 1.0, 1.0).is_err());
        assert!(GridSpec::new(1, 0.0, 1.0).is_err());
        assert!(GridSpec::new(1, 1.0, -2.0).is_err());
        assert!(PrimitiveAction::new(7).is_err());
    }

    #[test]
    fn canonical_index_matches_enumeration() {
        for r in 1..6 {
            let g = grid(r);
            let cells = g.cells();
            assert_eq!(cells.len(), g.num_cells());
            for (i, c) in cells.iter().enumerate() {
                assert_eq!(g.index_of(*c), Some(i));
            }
            assert_eq!(g.index_of(HexCoord::new(r as i32 + 1, 0)), None);
        }
    }

    #[test]
    fn interior_moves_are_distinct_neighbours() {
        let g = grid(4);
        for c in g.cells().into_iter().filter(|c| hex_distance(HexCoord::ORIGIN, *c) < 4) {
            let mut seen = std::collections::HashSet::new();
            for a in PrimitiveAction::all().skip(1) {
                let n = apply_action(c, a, &g);
                assert_eq!(hex_distance(c, n), 1);
                seen.insert(n);
            }
            assert_eq!(seen.len(), 6);
        }
    }

    #[test]
    fn planar_round_trip_and_clamp() {
        let g = grid(3);
        for c in g.cells() {
            let (x, y) = c.to_planar(g.pitch);
            assert_eq!(g.nearest_cell(x + 10.0, y - 10.0), (c, false));
        }
        let (far, clamped) = g.nearest_cell(1e6, 0.0);
        assert!(clamped);
        assert_eq!(far, HexCoord::new(3, 0));
    }

    #[test]
    fn line_is_contiguous() {
        let line = hex_line(HexCoord::new(-2, 0), HexCoord::new(3, -1));
        assert_eq!(line.len(), 6);
        for w in line.windows(2) {
            assert_eq!(hex_distance(w[0], w[1]), 1);
        }
    }

    fn coord() -> impl Strategy<Value = HexCoord> {
        (-20i32..20, -20i32..20).prop_map(|(q, r)| HexCoord::new(q, r))
    }

    proptest! {
        #[test]
        fn distance_is_metric(a in coord(), b in coord(), c in coord()) {
            prop_assert_eq!(hex_distance(a, b), hex_distance(b, a));
            prop_assert_eq!(hex_distance(a, a), 0);
            prop_assert_eq!(hex_distance(a, b) == 0, a == b);
            prop_assert!(hex_distance(a, c) <= hex_distance(a, b) + hex_distance(b, c));
        }

        #[test]
        fn one_action_moves_at_most_one_cell(q in -5i32..=5, r in -5i32..=5, code in 0u8..7) {
            let g = grid(5);
            let h = g.clamp(HexCoord::new(q, r));
            let a = PrimitiveAction::new(code).unwrap();
            prop_assert!(hex_distance(h, apply_action(h, a, &g)) <= 1);
        }

        #[test]
        fn travel_time_zero_iff_same(a in coord(), b in coord()) {
            let g = GridSpec::new(30, 750.0, 600.0).unwrap();
            prop_assert_eq!(travel_time(a, b, &g) == 0, a == b);
        }
    }
}
