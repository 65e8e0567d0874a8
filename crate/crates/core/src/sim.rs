//! Tick-driven fleet simulator.
//!
//! Each tick runs in two halves. [`WorldState::advance`] moves vehicles,
//! completes trips, injects new requests and expires stale ones, then returns
//! the agents that need a relocation decision. [`WorldState::commit`] starts
//! the chosen relocation legs, runs the matcher and emits every SMDP
//! transition whose cycle closed during the tick.
//!
//! A transition covers exactly one relocating or serving cycle. A relocation
//! cycle ends when its option terminates or when the vehicle is matched; a
//! serving cycle runs from the match to the drop-off.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::Arc;

use crate::demand::DemandSource;
use crate::error::{Error, Result};
use crate::hexgrid::{apply_action, hex_line, travel_time, GridSpec, HexCoord, PrimitiveAction};

/// Weights of payment, elapsed time and distance in the per-tick reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub fare: f64,
    pub time: f64,
    /// Per meter.
    pub distance: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { fare: 1.0, time: 0.1, distance: 0.0002 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FareParams {
    pub base: f64,
    pub per_km: f64,
    pub per_min: f64,
    pub wait_penalty: f64,
}

impl Default for FareParams {
    fn default() -> Self {
        FareParams { base: 2.5, per_km: 1.5, per_min: 0.35, wait_penalty: 0.1 }
    }
}

/// Order in which open requests are offered to the matcher.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchOrder {
    #[default]
    LongestWaitFirst,
    ShortestWaitFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub grid: GridSpec,
    pub fleet_size: usize,
    pub episode_ticks: u32,
    pub hour_ticks: u32,
    pub max_wait: u32,
    pub max_pickup_ticks: u32,
    /// Drop the pickup-time limit in the matcher.
    pub unlimited_radius: bool,
    /// Vehicles enter uniformly over the first `entry_window` ticks.
    pub entry_window: u32,
    pub reward: RewardWeights,
    pub fare: FareParams,
    pub match_order: MatchOrder,
    /// Multiplier applied to per-cell counts in state features.
    pub count_scale: f64,
    /// Keep serialized event lines in memory (the hash is always kept).
    pub record_events: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            grid: GridSpec::default(),
            fleet_size: 20,
            episode_ticks: 1440,
            hour_ticks: 60,
            max_wait: 5,
            max_pickup_ticks: 8,
            unlimited_radius: false,
            entry_window: 30,
            reward: RewardWeights::default(),
            fare: FareParams::default(),
            match_order: MatchOrder::default(),
            count_scale: 1.0,
            record_events: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.episode_ticks == 0 || self.hour_ticks == 0 {
            return Err(Error::Config("episode_ticks and hour_ticks must be positive".into()));
        }
        if !(self.count_scale.is_finite() && self.count_scale >= 0.0) {
            return Err(Error::Config("count_scale must be >= 0".into()));
        }
        Ok(())
    }

    pub fn features(&self) -> FeatureSpec {
        FeatureSpec {
            num_cells: self.grid.num_cells(),
            episode_ticks: self.episode_ticks,
            count_scale: self.count_scale,
        }
    }
}

/// `c - wait_penalty * wait` where `c` is the distance and time fare; floored at zero.
pub fn fare(params: &FareParams, wait_ticks: u32, distance_m: f64, trip_ticks: u32) -> f64 {
    let f = params.base + params.per_km * distance_m / 1000.0 + params.per_min * trip_ticks as f64
        - params.wait_penalty * wait_ticks as f64;
    f.max(0.0)
}

/// Reward for one tick: `b1 * payment - b2 * 1 - b3 * meters moved`.
pub fn tick_reward(w: &RewardWeights, payment: f64, moved_m: f64) -> f64 {
    w.fare * payment - w.time - w.distance * moved_m
}

/// Per-tick-averaged discounting of a cycle's total reward:
/// `sum_{k < dt} gamma^k * total / dt`, in closed form.
pub fn discounted_option_reward(total: f64, dt: u32, gamma: f64) -> Result<f64> {
    if dt == 0 {
        return Err(Error::InvalidArgument("elapsed ticks must be >= 1".into()));
    }
    if dt == 1 || gamma == 1.0 {
        return Ok(total);
    }
    let dt_f = dt as f64;
    Ok(total * (gamma.powi(dt as i32) - 1.0) / (dt_f * (gamma - 1.0)))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleStatus {
    /// Not yet entered the market.
    Offline,
    Idle,
    EnroutePickup,
    Occupied,
    Cruising,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Open,
    Assigned,
    PickedUp,
    Completed,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: usize,
    pub origin: HexCoord,
    pub destination: HexCoord,
    pub request_tick: u32,
    pub status: RequestStatus,
    pub assigned_tick: Option<u32>,
    pub pickup_tick: Option<u32>,
    pub fare: f64,
}

#[derive(Clone, Debug)]
struct Leg {
    path: Vec<HexCoord>,
    total: u32,
    elapsed: u32,
    idx: usize,
}

impl Leg {
    fn new(from: HexCoord, to: HexCoord, ticks: u32) -> Self {
        Leg { path: hex_line(from, to), total: ticks.max(1), elapsed: 0, idx: 0 }
    }

    /// Advance one tick; returns cells moved.
    fn advance(&mut self) -> usize {
        self.elapsed += 1;
        let steps = self.path.len() - 1;
        let idx = (self.elapsed as usize * steps) / self.total as usize;
        let moved = idx - self.idx;
        self.idx = idx;
        moved
    }

    fn position(&self) -> HexCoord {
        self.path[self.idx]
    }

    fn done(&self) -> bool {
        self.elapsed >= self.total
    }
}

/// Option currently steering a vehicle's relocation.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveOption {
    pub slot: usize,
    pub horizon: u32,
    pub steps_done: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum CycleKind {
    Relocation,
    Serving,
}

#[derive(Clone, Debug)]
struct Cycle {
    kind: CycleKind,
    slot: usize,
    start_tick: u32,
    start: Observation,
    rewards: Vec<f64>,
    steps: Vec<RelocationStep>,
    /// Start of the relocation leg in progress.
    step_from: Option<(Observation, PrimitiveAction)>,
}

#[derive(Clone, Debug)]
pub struct Vehicle {
    pub id: usize,
    pub status: VehicleStatus,
    pub location: HexCoord,
    pub entry_tick: u32,
    pub option: Option<ActiveOption>,
    pub earnings: f64,
    pub request: Option<usize>,
    leg: Option<Leg>,
    cycle: Option<Cycle>,
}

impl Vehicle {
    pub fn ticks_remaining(&self) -> u32 {
        self.leg.as_ref().map(|l| l.total - l.elapsed).unwrap_or(0)
    }

    pub fn is_available(&self) -> bool {
        matches!(self.status, VehicleStatus::Idle | VehicleStatus::Cruising)
    }
}

/// Per-cell counts for one tick, shared by every observation taken at that tick.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalSnapshot {
    pub tick: u32,
    pub num_cells: usize,
    /// Channel-major: `[available vehicles | open requests | busy vehicles]`.
    pub counts: Vec<u16>,
}

impl GlobalSnapshot {
    pub fn channel(&self, k: usize) -> &[u16] {
        &self.counts[k * self.num_cells..(k + 1) * self.num_cells]
    }
}

/// Agent view: shared global channels plus the agent's tick and cell.
#[derive(Clone, Debug)]
pub struct Observation {
    pub global: Arc<GlobalSnapshot>,
    pub tick: u32,
    pub cell: usize,
}

impl PartialEq for Observation {
    fn eq(&self, other: &Self) -> bool {
        self.tick == other.tick && self.cell == other.cell && *self.global == *other.global
    }
}

/// Layout of the flat feature vector built from an observation.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub num_cells: usize,
    pub episode_ticks: u32,
    pub count_scale: f64,
}

impl FeatureSpec {
    /// Three count channels, normalised time, one-hot cell.
    pub fn width(&self) -> usize {
        4 * self.num_cells + 1
    }

    pub fn encode(&self, obs: &Observation) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.width());
        self.encode_into(obs, &mut v);
        v
    }

    pub fn encode_into(&self, obs: &Observation, v: &mut Vec<f64>) {
        v.clear();
        v.extend(obs.global.counts.iter().map(|c| *c as f64 * self.count_scale));
        v.push(obs.tick as f64 / self.episode_ticks as f64);
        let base = v.len();
        v.resize(base + self.num_cells, 0.0);
        v[base + obs.cell] = 1.0;
    }

    /// Features for a bare (cell, tick) state with empty global channels.
    pub fn encode_local(&self, cell: usize, tick: u32) -> Vec<f64> {
        let mut v = vec![0.0; self.width()];
        v[3 * self.num_cells] = tick as f64 / self.episode_ticks as f64;
        v[3 * self.num_cells + 1 + cell] = 1.0;
        v
    }
}

/// One primitive relocation move inside a relocation cycle.
#[derive(Clone, Debug)]
pub struct RelocationStep {
    pub from: Observation,
    pub action: PrimitiveAction,
    pub to: Observation,
    /// The move ended where the vehicle got a trip assignment.
    pub indicator: bool,
}

/// One SMDP transition: a single relocating or serving cycle.
#[derive(Clone, Debug)]
pub struct Transition {
    pub agent: usize,
    pub start: Observation,
    pub option: usize,
    pub rewards: Vec<f64>,
    pub end: Observation,
    pub is_relocation: bool,
    pub done: bool,
    /// Primitive moves, for relocation cycles.
    pub steps: Vec<RelocationStep>,
}

impl Transition {
    pub fn elapsed(&self) -> u32 {
        self.rewards.len() as u32
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    /// Idle vehicle choosing a new option.
    NewOption,
    /// Vehicle inside a multi-step option that needs its next primitive move.
    Continue { slot: usize, steps_done: u32 },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct DecisionRequest {
    pub agent: usize,
    pub cell: HexCoord,
    pub kind: DecisionKind,
}

/// Decision for one agent: the option slot, its horizon in primitive moves and
/// the move to take now.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub agent: usize,
    pub slot: usize,
    pub horizon: u32,
    pub action: PrimitiveAction,
}

impl Assignment {
    pub fn primitive(agent: usize, action: PrimitiveAction) -> Self {
        Assignment { agent, slot: action.index(), horizon: 1, action }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    VehicleEnter,
    RequestArrive,
    RequestReject,
    OptionStart,
    Relocate,
    Match,
    Pickup,
    Dropoff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub tick: u32,
    pub kind: EventKind,
    pub agent: Option<usize>,
    pub request: Option<usize>,
    pub cell: HexCoord,
    pub value: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub vehicle: usize,
    pub request: usize,
    pub wait: u32,
    pub eta: u32,
}

#[derive(Clone, Debug, Default)]
pub struct TickReport {
    pub tick: u32,
    pub events: Vec<Event>,
    pub transitions: Vec<Transition>,
    pub matches: Vec<MatchRecord>,
}

/// Running per-hour accounting for one episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub hour_ticks: u32,
    pub arrivals: Vec<usize>,
    pub served: Vec<usize>,
    pub rejected: Vec<usize>,
    /// Sum of all agents' per-tick rewards, by hour.
    pub reward: Vec<f64>,
    pub fares: Vec<f64>,
    pub online_vehicle_ticks: Vec<usize>,
}

impl EpisodeStats {
    fn new(hours: usize, hour_ticks: u32) -> Self {
        EpisodeStats {
            hour_ticks,
            arrivals: vec![0; hours],
            served: vec![0; hours],
            rejected: vec![0; hours],
            reward: vec![0.0; hours],
            fares: vec![0.0; hours],
            online_vehicle_ticks: vec![0; hours],
        }
    }

    pub fn total_arrivals(&self) -> usize {
        self.arrivals.iter().sum()
    }

    pub fn total_served(&self) -> usize {
        self.served.iter().sum()
    }

    pub fn total_rejected(&self) -> usize {
        self.rejected.iter().sum()
    }
}

pub struct WorldState {
    config: SimConfig,
    features: FeatureSpec,
    cells: Vec<HexCoord>,
    clock: u32,
    vehicles: Vec<Vehicle>,
    requests: Vec<Request>,
    open: Vec<usize>,
    demand: DemandSource,
    rng: ChaCha8Rng,
    snapshot: Arc<GlobalSnapshot>,
    awaiting: Vec<DecisionRequest>,
    closed: Vec<Transition>,
    pending_events: Vec<Event>,
    stats: EpisodeStats,
    hasher: Sha256,
    log: Vec<String>,
    advanced: bool,
}

impl WorldState {
    pub fn new(config: SimConfig, demand: DemandSource, seed: u64) -> Result<Self> {
        config.validate()?;
        let features = config.features();
        let cells = config.grid.cells();
        let hours = config.episode_ticks.div_ceil(config.hour_ticks) as usize;
        let mut w = WorldState {
            stats: EpisodeStats::new(hours, config.hour_ticks),
            snapshot: Arc::new(GlobalSnapshot { tick: 0, num_cells: cells.len(), counts: vec![0; 3 * cells.len()] }),
            config,
            features,
            cells,
            clock: 0,
            vehicles: Vec::new(),
            requests: Vec::new(),
            open: Vec::new(),
            demand,
            rng: ChaCha8Rng::seed_from_u64(seed),
            awaiting: Vec::new(),
            closed: Vec::new(),
            pending_events: Vec::new(),
            hasher: Sha256::new(),
            log: Vec::new(),
            advanced: false,
        };
        w.reset(seed);
        Ok(w)
    }

    /// Start a fresh episode with a new seed.
    pub fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.demand.reset();
        self.clock = 0;
        self.requests.clear();
        self.open.clear();
        self.awaiting.clear();
        self.closed.clear();
        self.pending_events.clear();
        self.hasher = Sha256::new();
        self.log.clear();
        self.advanced = false;
        let hours = self.config.episode_ticks.div_ceil(self.config.hour_ticks) as usize;
        self.stats = EpisodeStats::new(hours, self.config.hour_ticks);
        let n = self.cells.len();
        self.vehicles = (0..self.config.fleet_size)
            .map(|id| {
                let entry_tick =
                    if self.config.entry_window > 0 { self.rng.random_range(0..self.config.entry_window) } else { 0 };
                let location = self.cells[self.rng.random_range(0..n)];
                Vehicle {
                    id,
                    status: VehicleStatus::Offline,
                    location,
                    entry_tick,
                    option: None,
                    earnings: 0.0,
                    request: None,
                    leg: None,
                    cycle: None,
                }
            })
            .collect();
        self.snapshot = Arc::new(self.compute_snapshot());
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn feature_spec(&self) -> FeatureSpec {
        self.features
    }

    pub fn clock(&self) -> u32 {
        self.clock
    }

    pub fn is_done(&self) -> bool {
        self.clock >= self.config.episode_ticks
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn requests(&self) -> &[Request] {
        &self.requests
    }

    pub fn open_requests(&self) -> usize {
        self.open.len()
    }

    pub fn stats(&self) -> &EpisodeStats {
        &self.stats
    }

    pub fn snapshot(&self) -> &Arc<GlobalSnapshot> {
        &self.snapshot
    }

    pub fn cells(&self) -> &[HexCoord] {
        &self.cells
    }

    /// SHA-256 over every event line emitted so far.
    pub fn event_hash(&self) -> String {
        let h = self.hasher.clone().finalize();
        h.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Serialized event log (only kept when `record_events` is set).
    pub fn event_log(&self) -> &[String] {
        &self.log
    }

    pub fn status_counts(&self) -> [usize; 5] {
        let mut c = [0; 5];
        for v in &self.vehicles {
            let k = match v.status {
                VehicleStatus::Offline => 0,
                VehicleStatus::Idle => 1,
                VehicleStatus::EnroutePickup => 2,
                VehicleStatus::Occupied => 3,
                VehicleStatus::Cruising => 4,
            };
            c[k] += 1;
        }
        c
    }

    /// All vehicles (any status) per cell, canonical order.
    pub fn vehicle_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.cells.len()];
        for v in &self.vehicles {
            c[self.cell_index(v.location)] += 1;
        }
        c
    }

    fn cell_index(&self, h: HexCoord) -> usize {
        self.config.grid.index_of(h).expect("vehicle locations stay on the grid")
    }

    /// Observation of `agent` at the current tick.
    pub fn observe(&self, agent: usize) -> Result<Observation> {
        let v = self
            .vehicles
            .get(agent)
            .ok_or_else(|| Error::InvalidArgument(format!("no vehicle {agent}")))?;
        Ok(self.obs_at(v.location))
    }

    fn obs_at(&self, h: HexCoord) -> Observation {
        Observation { global: self.snapshot.clone(), tick: self.clock, cell: self.cell_index(h) }
    }

    fn compute_snapshot(&self) -> GlobalSnapshot {
        let n = self.cells.len();
        let mut counts = vec![0u16; 3 * n];
        for v in &self.vehicles {
            let c = self.cell_index(v.location);
            match v.status {
                VehicleStatus::Idle | VehicleStatus::Cruising => counts[c] += 1,
                VehicleStatus::EnroutePickup | VehicleStatus::Occupied => counts[2 * n + c] += 1,
                VehicleStatus::Offline => {}
            }
        }
        for &r in &self.open {
            let c = self.cell_index(self.requests[r].origin);
            counts[n + c] += 1;
        }
        GlobalSnapshot { tick: self.clock, num_cells: n, counts }
    }

    fn hour(&self) -> usize {
        ((self.clock / self.config.hour_ticks) as usize).min(self.stats.arrivals.len() - 1)
    }

    fn emit(&mut self, kind: EventKind, agent: Option<usize>, request: Option<usize>, cell: HexCoord, value: Option<f64>) {
        self.pending_events.push(Event { tick: self.clock, kind, agent, request, cell, value });
    }

    /// Phases 1-3: movement and trip completion, arrivals, expiry. Returns the
    /// agents that need a decision this tick.
    pub fn advance(&mut self) -> Result<Vec<DecisionRequest>> {
        if self.is_done() {
            return Err(Error::InvalidArgument("episode is over".into()));
        }
        if self.advanced {
            return Err(Error::InvalidArgument("advance called twice without commit".into()));
        }
        self.advanced = true;
        let t = self.clock;
        let hour = self.hour();
        let pitch = self.config.grid.pitch;
        let weights = self.config.reward.clone();
        let mut closing: Vec<usize> = Vec::new();
        let mut finished_steps: Vec<(usize, HexCoord)> = Vec::new();

        // (1) vehicles
        for id in 0..self.vehicles.len() {
            if self.vehicles[id].status == VehicleStatus::Offline {
                if self.vehicles[id].entry_tick == t {
                    self.vehicles[id].status = VehicleStatus::Idle;
                    let loc = self.vehicles[id].location;
                    self.emit(EventKind::VehicleEnter, Some(id), None, loc, None);
                }
                continue;
            }
            self.stats.online_vehicle_ticks[hour] += 1;
            let Some(leg) = self.vehicles[id].leg.as_mut() else {
                continue;
            };
            let moved = leg.advance();
            let pos = leg.position();
            let leg_done = leg.done();
            let v = &mut self.vehicles[id];
            v.location = pos;
            let mut payment = 0.0;
            if leg_done {
                v.leg = None;
                match v.status {
                    VehicleStatus::EnroutePickup => {
                        let rid = v.request.expect("enroute vehicle has a request");
                        self.start_trip(id, rid);
                    }
                    VehicleStatus::Occupied => {
                        let rid = v.request.take().expect("occupied vehicle has a request");
                        let req = &self.requests[rid];
                        let wait = req.pickup_tick.unwrap_or(t) - req.request_tick;
                        let dist = crate::hexgrid::hex_distance(req.origin, req.destination) as f64 * pitch;
                        let trip_ticks = t - req.pickup_tick.unwrap_or(t);
                        payment = fare(&self.config.fare, wait, dist, trip_ticks);
                        let req = &mut self.requests[rid];
                        req.status = RequestStatus::Completed;
                        req.fare = payment;
                        self.vehicles[id].status = VehicleStatus::Idle;
                        self.vehicles[id].option = None;
                        self.stats.fares[hour] += payment;
                        self.emit(EventKind::Dropoff, Some(id), Some(rid), pos, Some(payment));
                        closing.push(id);
                    }
                    VehicleStatus::Cruising => {
                        finished_steps.push((id, pos));
                        let v = &mut self.vehicles[id];
                        let opt = v.option.as_mut().expect("cruising vehicle has an option");
                        opt.steps_done += 1;
                        if opt.steps_done >= opt.horizon {
                            v.option = None;
                            v.status = VehicleStatus::Idle;
                            closing.push(id);
                        }
                    }
                    _ => {}
                }
            }
            let r = tick_reward(&weights, payment, moved as f64 * pitch);
            let v = &mut self.vehicles[id];
            v.earnings += r;
            if let Some(c) = v.cycle.as_mut() {
                c.rewards.push(r);
            }
            self.stats.reward[hour] += r;
        }

        // (2) arrivals
        let arrivals = self.demand.arrivals(t, &self.config.grid, &mut self.rng);
        for a in arrivals {
            let id = self.requests.len();
            let origin = self.cells[a.origin];
            self.requests.push(Request {
                id,
                origin,
                destination: self.cells[a.destination],
                request_tick: t,
                status: RequestStatus::Open,
                assigned_tick: None,
                pickup_tick: None,
                fare: 0.0,
            });
            self.open.push(id);
            self.stats.arrivals[hour] += 1;
            self.emit(EventKind::RequestArrive, None, Some(id), origin, None);
        }

        // (3) expiry
        let max_wait = self.config.max_wait;
        let mut still_open = Vec::with_capacity(self.open.len());
        for rid in std::mem::take(&mut self.open) {
            let req = &self.requests[rid];
            if t - req.request_tick > max_wait {
                let origin = req.origin;
                let arr_hour = ((req.request_tick / self.config.hour_ticks) as usize).min(self.stats.rejected.len() - 1);
                self.requests[rid].status = RequestStatus::Rejected;
                self.stats.rejected[arr_hour] += 1;
                self.emit(EventKind::RequestReject, None, Some(rid), origin, None);
            } else {
                still_open.push(rid);
            }
        }
        self.open = still_open;

        self.snapshot = Arc::new(self.compute_snapshot());

        for (id, pos) in finished_steps {
            let to = self.obs_at(pos);
            let c = self.vehicles[id].cycle.as_mut().expect("relocating vehicle has a cycle");
            if let Some((from, action)) = c.step_from.take() {
                c.steps.push(RelocationStep { from, action, to, indicator: false });
            }
        }
        for id in closing {
            self.close_cycle(id, false);
        }

        self.awaiting = self
            .vehicles
            .iter()
            .filter_map(|v| match (v.status, v.option, &v.leg) {
                (VehicleStatus::Idle, _, None) => {
                    Some(DecisionRequest { agent: v.id, cell: v.location, kind: DecisionKind::NewOption })
                }
                (VehicleStatus::Cruising, Some(o), None) => Some(DecisionRequest {
                    agent: v.id,
                    cell: v.location,
                    kind: DecisionKind::Continue { slot: o.slot, steps_done: o.steps_done },
                }),
                _ => None,
            })
            .collect();
        Ok(self.awaiting.clone())
    }

    fn start_trip(&mut self, id: usize, rid: usize) {
        let t = self.clock;
        let (origin, dest) = (self.requests[rid].origin, self.requests[rid].destination);
        let ticks = travel_time(origin, dest, &self.config.grid);
        let req = &mut self.requests[rid];
        req.status = RequestStatus::PickedUp;
        req.pickup_tick = Some(t);
        let v = &mut self.vehicles[id];
        v.status = VehicleStatus::Occupied;
        v.leg = Some(Leg::new(origin, dest, ticks));
        self.emit(EventKind::Pickup, Some(id), Some(rid), origin, None);
    }

    /// Close the vehicle's current cycle into a transition ending now.
    fn close_cycle(&mut self, id: usize, done: bool) {
        let Some(c) = self.vehicles[id].cycle.take() else {
            return;
        };
        if c.rewards.is_empty() {
            return;
        }
        let end = self.obs_at(self.vehicles[id].location);
        self.closed.push(Transition {
            agent: id,
            start: c.start,
            option: c.slot,
            rewards: c.rewards,
            end,
            is_relocation: c.kind == CycleKind::Relocation,
            done,
            steps: c.steps,
        });
    }

    /// Phases 4-6: start relocation legs, match, emit closed transitions.
    pub fn commit(&mut self, assignments: &[Assignment]) -> Result<TickReport> {
        if !self.advanced {
            return Err(Error::InvalidArgument("commit called before advance".into()));
        }
        let t = self.clock;
        let mut given = vec![None; self.vehicles.len()];
        for a in assignments {
            let req = self
                .awaiting
                .iter()
                .find(|d| d.agent == a.agent)
                .ok_or(Error::NotAwaitingDecision(a.agent))?;
            if let DecisionKind::Continue { slot, .. } = req.kind {
                if slot != a.slot {
                    return Err(Error::InvalidArgument(format!(
                        "vehicle {} is executing option {slot}, not {}",
                        a.agent, a.slot
                    )));
                }
            }
            given[a.agent] = Some(*a);
        }

        // (4) relocation legs; missing decisions default to staying put
        for d in std::mem::take(&mut self.awaiting) {
            let a = given[d.agent].unwrap_or_else(|| match d.kind {
                DecisionKind::NewOption => Assignment::primitive(d.agent, PrimitiveAction::STAY),
                DecisionKind::Continue { slot, .. } => {
                    Assignment { agent: d.agent, slot, horizon: 1, action: PrimitiveAction::STAY }
                }
            });
            let here = self.vehicles[d.agent].location;
            let obs = self.obs_at(here);
            if d.kind == DecisionKind::NewOption {
                self.vehicles[d.agent].option =
                    Some(ActiveOption { slot: a.slot, horizon: a.horizon.max(1), steps_done: 0 });
                self.vehicles[d.agent].cycle = Some(Cycle {
                    kind: CycleKind::Relocation,
                    slot: a.slot,
                    start_tick: t,
                    start: obs.clone(),
                    rewards: Vec::new(),
                    steps: Vec::new(),
                    step_from: None,
                });
                self.emit(EventKind::OptionStart, Some(d.agent), None, here, Some(a.slot as f64));
            }
            let target = apply_action(here, a.action, &self.config.grid);
            let ticks = travel_time(here, target, &self.config.grid);
            let v = &mut self.vehicles[d.agent];
            v.status = VehicleStatus::Cruising;
            v.leg = Some(Leg::new(here, target, ticks));
            if let Some(c) = v.cycle.as_mut() {
                c.step_from = Some((obs, a.action));
            }
            self.emit(EventKind::Relocate, Some(d.agent), None, here, Some(a.action.code() as f64));
        }

        // (5) matching
        let matches = self.run_matching();

        // (6) transitions
        let mut report = TickReport { tick: t, matches, ..Default::default() };
        self.clock += 1;
        self.advanced = false;
        if self.is_done() {
            for id in 0..self.vehicles.len() {
                if let Some(c) = self.vehicles[id].cycle.as_mut() {
                    if let Some((from, action)) = c.step_from.take() {
                        let loc = self.vehicles[id].location;
                        let to = Observation { global: self.snapshot.clone(), tick: t, cell: self.cell_index(loc) };
                        if from.cell != to.cell {
                            self.vehicles[id].cycle.as_mut().unwrap().steps.push(RelocationStep {
                                from,
                                action,
                                to,
                                indicator: false,
                            });
                        }
                    }
                }
                self.close_cycle(id, true);
            }
        }
        report.transitions = std::mem::take(&mut self.closed);
        report.events = std::mem::take(&mut self.pending_events);
        for e in &report.events {
            let line = serde_json::to_string(e)?;
            self.hasher.update(line.as_bytes());
            self.hasher.update(b"\n");
            if self.config.record_events {
                self.log.push(line);
            }
        }
        Ok(report)
    }

    /// Run both halves of a tick, asking `decide` for every pending decision.
    pub fn tick<F>(&mut self, mut decide: F) -> Result<TickReport>
    where
        F: FnMut(&WorldState, &DecisionRequest) -> Assignment,
    {
        let pending = self.advance()?;
        let assignments: Vec<Assignment> = pending.iter().map(|d| decide(self, d)).collect();
        self.commit(&assignments)
    }

    /// Greedy matching of open requests to available vehicles.
    pub fn run_matching(&mut self) -> Vec<MatchRecord> {
        let t = self.clock;
        let mut order = self.open.clone();
        match self.config.match_order {
            MatchOrder::LongestWaitFirst => order.sort_by_key(|&r| (std::cmp::Reverse(t - self.requests[r].request_tick), r)),
            MatchOrder::ShortestWaitFirst => order.sort_by_key(|&r| (t - self.requests[r].request_tick, r)),
        }
        let mut used = vec![false; self.vehicles.len()];
        let mut out = Vec::new();
        for rid in order {
            let origin = self.requests[rid].origin;
            let mut best: Option<(u32, usize)> = None;
            for v in &self.vehicles {
                if used[v.id] || !v.is_available() {
                    continue;
                }
                let eta = travel_time(v.location, origin, &self.config.grid);
                if !self.config.unlimited_radius && eta > self.config.max_pickup_ticks {
                    continue;
                }
                if best.is_none_or(|(b, _)| eta < b) {
                    best = Some((eta, v.id));
                }
            }
            let Some((eta, vid)) = best else { continue };
            used[vid] = true;
            let wait = t - self.requests[rid].request_tick;
            debug_assert!(wait <= self.config.max_wait);
            self.assign(vid, rid, eta);
            out.push(MatchRecord { vehicle: vid, request: rid, wait, eta });
        }
        let matched: std::collections::HashSet<usize> = out.iter().map(|m| m.request).collect();
        self.open.retain(|r| !matched.contains(r));
        out
    }

    fn assign(&mut self, vid: usize, rid: usize, eta: u32) {
        let t = self.clock;
        let here = self.vehicles[vid].location;
        let hour = ((self.requests[rid].request_tick / self.config.hour_ticks) as usize).min(self.stats.served.len() - 1);
        self.stats.served[hour] += 1;
        self.requests[rid].status = RequestStatus::Assigned;
        self.requests[rid].assigned_tick = Some(t);
        self.emit(EventKind::Match, Some(vid), Some(rid), here, Some(eta as f64));

        let obs = self.obs_at(here);
        let v = &mut self.vehicles[vid];
        let leg = v.leg.take();
        v.option = None;
        if let Some(mut c) = v.cycle.take() {
            if c.kind == CycleKind::Relocation && c.start_tick < t {
                // matched mid-relocation: the relocation transition ends here
                let moving = leg.as_ref().is_some_and(|l| l.elapsed > 0);
                match c.step_from.take() {
                    Some((from, action)) if moving => {
                        c.steps.push(RelocationStep { from, action, to: obs.clone(), indicator: true });
                    }
                    _ => {
                        if let Some(last) = c.steps.last_mut() {
                            last.indicator = true;
                        }
                    }
                }
                let slot = c.slot;
                v.cycle = Some(c);
                self.close_cycle(vid, false);
                self.vehicles[vid].cycle = Some(Cycle {
                    kind: CycleKind::Serving,
                    slot,
                    start_tick: t,
                    start: obs,
                    rewards: Vec::new(),
                    steps: Vec::new(),
                    step_from: None,
                });
            } else {
                // option chosen this tick never moved; it becomes the serving cycle
                c.kind = CycleKind::Serving;
                c.steps.clear();
                c.step_from = None;
                v.cycle = Some(c);
            }
        }
        let v = &mut self.vehicles[vid];
        v.request = Some(rid);
        let origin = self.requests[rid].origin;
        if eta == 0 {
            self.start_trip(vid, rid);
        } else {
            let v = &mut self.vehicles[vid];
            v.status = VehicleStatus::EnroutePickup;
            v.leg = Some(Leg::new(here, origin, eta));
        }
    }

    /// Run to the end of the episode with a fixed decision rule.
    pub fn run_episode<F>(&mut self, mut decide: F) -> Result<Vec<TickReport>>
    where
        F: FnMut(&WorldState, &DecisionRequest) -> Assignment,
    {
        let mut out = Vec::new();
        while !self.is_done() {
            out.push(self.tick(&mut decide)?);
        }
        Ok(out)
    }
}
