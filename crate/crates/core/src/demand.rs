//! Trip ingestion, hourly demand profiles and request synthesis.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hexgrid::{GridSpec, HexCoord};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripRecord {
    pub request_tick: u32,
    pub origin: HexCoord,
    pub destination: HexCoord,
}

/// How raw trip rows map onto ticks and cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadOptions {
    /// Seconds per tick when times are given as `HH:MM:SS`.
    pub tick_seconds: u32,
    /// Rows at or beyond this tick are rejected.
    pub episode_ticks: u32,
    /// Planar coordinates are mapped as `((x - offset_x) * scale, (y - offset_y) * scale)`.
    pub offset_x: f64,
    pub offset_y: f64,
    pub scale: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { tick_seconds: 60, episode_ticks: 1440, offset_x: 0.0, offset_y: 0.0, scale: 1.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub accepted: usize,
    pub clamped: usize,
    pub rejected: usize,
}

pub fn load_trips(path: &Path, grid: &GridSpec, opts: &LoadOptions) -> Result<(Vec<TripRecord>, LoadReport)> {
    let f = std::fs::File::open(path)?;
    parse_trips(f, grid, opts)
}

/// Parse a trip CSV.
///
/// The header row must start with `request_time`. Data rows are either
/// `time,q:r,q:r` (axial cell ids) or `time,origin_x,origin_y,dest_x,dest_y`
/// (planar meters, snapped to the nearest centroid). Times are integer ticks
/// or `HH:MM:SS`.
pub fn parse_trips<R: Read>(reader: R, grid: &GridSpec, opts: &LoadOptions) -> Result<(Vec<TripRecord>, LoadReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut trips = Vec::new();
    let mut report = LoadReport::default();
    let mut saw_header = false;
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 1;
        let row = row.map_err(|e| Error::MalformedRow { line, message: e.to_string() })?;
        if row.iter().all(|f| f.is_empty()) {
            continue;
        }
        if !saw_header {
            if row.get(0) != Some("request_time") {
                return Err(Error::MalformedRow { line, message: "expected a header starting with request_time".into() });
            }
            saw_header = true;
            continue;
        }
        let bad = |message: String| Error::MalformedRow { line, message };
        let tick = parse_time(&row[0], opts.tick_seconds).map_err(bad)?;
        let (origin, destination, clamped) = match row.len() {
            3 => {
                let o: HexCoord = row[1].parse().map_err(|e: Error| bad(e.to_string()))?;
                let d: HexCoord = row[2].parse().map_err(|e: Error| bad(e.to_string()))?;
                let (co, cd) = (grid.clamp(o), grid.clamp(d));
                (co, cd, co != o || cd != d)
            }
            5 => {
                let mut v = [0.0; 4];
                for (k, slot) in v.iter_mut().enumerate() {
                    *slot = row[k + 1]
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| bad(format!("bad coordinate `{}`", &row[k + 1])))?;
                }
                let map = |x: f64, y: f64| grid.nearest_cell((x - opts.offset_x) * opts.scale, (y - opts.offset_y) * opts.scale);
                let (o, oc) = map(v[0], v[1]);
                let (d, dc) = map(v[2], v[3]);
                (o, d, oc || dc)
            }
            n => return Err(bad(format!("expected 3 or 5 fields, found {n}"))),
        };
        if tick >= opts.episode_ticks {
            report.rejected += 1;
            continue;
        }
        if clamped {
            report.clamped += 1;
        }
        report.accepted += 1;
        trips.push(TripRecord { request_tick: tick, origin, destination });
    }
    trips.sort_by_key(|t| t.request_tick);
    Ok((trips, report))
}

fn parse_time(s: &str, tick_seconds: u32) -> std::result::Result<u32, String> {
    if let Ok(t) = s.parse::<u32>() {
        return Ok(t);
    }
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let nums: Option<Vec<u32>> = parts.iter().map(|p| p.parse().ok()).collect();
        if let Some(n) = nums {
            if n[1] < 60 && n[2] < 60 && tick_seconds > 0 {
                return Ok((n[0] * 3600 + n[1] * 60 + n[2]) / tick_seconds);
            }
        }
    }
    Err(format!("bad request_time `{s}`"))
}

/// Hourly arrival rates and destination distributions per origin cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandProfile {
    pub hour_ticks: u32,
    pub hours: usize,
    pub num_cells: usize,
    /// `rates[h * num_cells + c]` in requests per tick.
    rates: Vec<f64>,
    /// Destination probabilities per (hour, origin); empty when unused.
    destinations: Vec<Vec<f64>>,
}

/// A request to inject, by canonical cell index.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NewRequest {
    pub origin: usize,
    pub destination: usize,
}

impl DemandProfile {
    /// Multiply every rate by `factor`.
    pub fn scale(&mut self, factor: f64) {
        self.rates.iter_mut().for_each(|r| *r *= factor);
    }

    pub fn zero(num_cells: usize, hour_ticks: u32, hours: usize) -> Self {
        DemandProfile {
            hour_ticks,
            hours,
            num_cells,
            rates: vec![0.0; hours * num_cells],
            destinations: vec![Vec::new(); hours * num_cells],
        }
    }

    pub fn hour_of(&self, tick: u32) -> usize {
        (tick / self.hour_ticks.max(1)) as usize % self.hours.max(1)
    }

    pub fn rate(&self, hour: usize, cell: usize) -> f64 {
        self.rates[hour * self.num_cells + cell]
    }

    pub fn destinations(&self, hour: usize, cell: usize) -> &[f64] {
        &self.destinations[hour * self.num_cells + cell]
    }

    pub fn is_zero(&self) -> bool {
        self.rates.iter().all(|r| *r == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.rates.iter().enumerate() {
            if !(r.is_finite() && *r >= 0.0) {
                return Err(Error::Config(format!("negative or non-finite rate at slot {i}")));
            }
            let d = &self.destinations[i];
            if *r > 0.0 {
                let s: f64 = d.iter().sum();
                if d.len() != self.num_cells || (s - 1.0).abs() > 1e-9 || d.iter().any(|p| *p < 0.0) {
                    return Err(Error::Config(format!("destination distribution at slot {i} is not a probability vector")));
                }
            }
        }
        Ok(())
    }

    /// Expected arrivals per tick summed over cells, for the hour of `tick`.
    pub fn total_rate(&self, tick: u32) -> f64 {
        let h = self.hour_of(tick);
        self.rates[h * self.num_cells..(h + 1) * self.num_cells].iter().sum()
    }
}

/// Empirical profile: per-hour arrival counts divided by the hour length, and
/// empirical destination frequencies.
pub fn build_profile(trips: &[TripRecord], grid: &GridSpec, hour_ticks: u32, hours: usize) -> DemandProfile {
    let n = grid.num_cells();
    let mut p = DemandProfile::zero(n, hour_ticks, hours);
    let mut counts = vec![vec![0usize; n]; hours * n];
    for t in trips {
        let (Some(o), Some(d)) = (grid.index_of(t.origin), grid.index_of(t.destination)) else {
            continue;
        };
        let h = p.hour_of(t.request_tick);
        counts[h * n + o][d] += 1;
    }
    for (slot, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        if total == 0 {
            continue;
        }
        p.rates[slot] = total as f64 / hour_ticks as f64;
        p.destinations[slot] = row.iter().map(|c| *c as f64 / total as f64).collect();
    }
    p
}

/// Poisson arrivals for one tick; destinations drawn i.i.d. per request.
pub fn sample_requests<R: Rng + ?Sized>(profile: &DemandProfile, tick: u32, rng: &mut R) -> Vec<NewRequest> {
    let h = profile.hour_of(tick);
    let n = profile.num_cells;
    let mut out = Vec::new();
    for c in 0..n {
        let rate = profile.rates[h * n + c];
        if rate <= 0.0 {
            continue;
        }
        let count = Poisson::new(rate).map(|d| d.sample(rng) as u64).unwrap_or(0);
        let dist = &profile.destinations[h * n + c];
        for _ in 0..count {
            out.push(NewRequest { origin: c, destination: sample_index(dist, rng) });
        }
    }
    out
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding slack: fall back to the last cell with mass
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// A Gaussian-in-time demand peak at one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hotspot {
    pub cell: HexCoord,
    /// Requests per tick at the peak hour.
    pub peak_rate: f64,
    pub peak_hour: f64,
    /// Standard deviation in hours.
    pub width: f64,
    /// Optional weighted destination list for trips from this cell.
    #[serde(default)]
    pub destinations: Option<Vec<(HexCoord, f64)>>,
}

/// Synthetic scenario: `base + sum peak * gauss(h - peak_hour, width)` at
/// hotspot cells, uniform destinations unless a hotspot overrides them.
pub fn synth_scenario(grid: &GridSpec, hotspots: &[Hotspot], base_rate: f64, hour_ticks: u32, hours: usize) -> Result<DemandProfile> {
    if !(base_rate >= 0.0 && base_rate.is_finite()) {
        return Err(Error::Config("base rate must be >= 0".into()));
    }
    let n = grid.num_cells();
    let mut p = DemandProfile::zero(n, hour_ticks, hours);
    let uniform = vec![1.0 / n as f64; n];
    let mut overrides: Vec<Option<Vec<f64>>> = vec![None; n];
    for hs in hotspots {
        if !(hs.peak_rate >= 0.0 && hs.width > 0.0) {
            return Err(Error::Config("hotspot peak_rate must be >= 0 and width > 0".into()));
        }
        let c = grid
            .index_of(hs.cell)
            .ok_or_else(|| Error::Config(format!("hotspot cell {} is off the grid", hs.cell)))?;
        if let Some(dests) = &hs.destinations {
            let mut v = vec![0.0; n];
            for (cell, w) in dests {
                let d = grid
                    .index_of(*cell)
                    .ok_or_else(|| Error::Config(format!("destination cell {cell} is off the grid")))?;
                if !(*w >= 0.0) {
                    return Err(Error::Config("destination weights must be >= 0".into()));
                }
                v[d] += w;
            }
            let total: f64 = v.iter().sum();
            if total <= 0.0 {
                return Err(Error::Config("destination weights sum to zero".into()));
            }
            v.iter_mut().for_each(|x| *x /= total);
            overrides[c] = Some(v);
        }
    }
    for h in 0..hours {
        for c in 0..n {
            let mut rate = base_rate;
            for hs in hotspots {
                if grid.index_of(hs.cell) == Some(c) {
                    let z = (h as f64 - hs.peak_hour) / hs.width;
                    rate += hs.peak_rate * (-0.5 * z * z).exp();
                }
            }
            p.rates[h * n + c] = rate;
            if rate > 0.0 {
                p.destinations[h * n + c] = overrides[c].clone().unwrap_or_else(|| uniform.clone());
            }
        }
    }
    Ok(p)
}

/// Where new requests come from during an episode.
#[derive(Clone, Debug)]
pub enum DemandSource {
    /// Historical arrivals, injected exactly once at their tick.
    Replay { trips: Vec<TripRecord>, cursor: usize },
    Poisson(DemandProfile),
}

impl DemandSource {
    pub fn replay(mut trips: Vec<TripRecord>) -> Self {
        trips.sort_by_key(|t| t.request_tick);
        DemandSource::Replay { trips, cursor: 0 }
    }

    pub fn reset(&mut self) {
        if let DemandSource::Replay { cursor, .. } = self {
            *cursor = 0;
        }
    }

    /// Requests arriving at `tick`. Replay skips records whose tick has passed.
    pub fn arrivals<R: Rng + ?Sized>(&mut self, tick: u32, grid: &GridSpec, rng: &mut R) -> Vec<NewRequest> {
        match self {
            DemandSource::Poisson(p) => sample_requests(p, tick, rng),
            DemandSource::Replay { trips, cursor } => {
                let mut out = Vec::new();
                while *cursor < trips.len() && trips[*cursor].request_tick <= tick {
                    let t = trips[*cursor];
                    *cursor += 1;
                    if t.request_tick < tick {
                        continue;
                    }
                    if let (Some(o), Some(d)) = (grid.index_of(t.origin), grid.index_of(t.destination)) {
                        out.push(NewRequest { origin: o, destination: d });
                    }
                }
                out
            }
        }
    }
}
