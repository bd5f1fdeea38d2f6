//! Home energy environment: ESS dynamics, buy/sell pricing and deferrable
//! appliance scheduling as a deterministic finite-horizon MDP over a given
//! PV/base-load trajectory.
//!
//! Conventions: `q = +1` discharges the battery into the home, `q = −1`
//! charges it. A device request is a run of consecutive request slots; it
//! starts when the device is switched on and then runs for its full length.
//! Requests of one device are served first-in first-out, and each must
//! start no later than `max_wait` steps after arrival (and no later than
//! the last step of the horizon).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HemsError {
    #[error("invalid HEMS config: {0}")]
    InvalidConfig(String),
    #[error("no load channel for device `{0}`")]
    UnknownDevice(String),
    #[error("infeasible action at step {t}: {reason}")]
    InfeasibleAction { t: usize, reason: String },
    #[error("{what} has length {got}, horizon is {expected}")]
    TrajectoryLength {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid input at step {t}: {reason}")]
    InvalidInput { t: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceStep {
    /// Currency per kWh bought from the grid.
    pub buy: f64,
    /// Currency per kWh sold to the grid.
    pub sell: f64,
}

/// Buy price `peak` on hours `[8, 20)` and `off_peak` otherwise; sell price
/// is `sell_ratio` times buy. Step `t` covers hour `start_hour + t·Δt`.
pub fn peak_offpeak_prices(
    horizon: usize,
    step_hours: f64,
    start_hour: f64,
    peak: f64,
    off_peak: f64,
    sell_ratio: f64,
) -> Vec<PriceStep> {
    (0..horizon)
        .map(|t| {
            let hour = (start_hour + t as f64 * step_hours).rem_euclid(24.0);
            let buy = if (8.0..20.0).contains(&hour) { peak } else { off_peak };
            PriceStep {
                buy,
                sell: sell_ratio * buy,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    pub rated_power_kw: f64,
    pub deferrable: bool,
    /// Steps a request may wait before it must start.
    pub max_wait: usize,
    /// Per-step flag: the device wants to run.
    #[serde(default)]
    pub request_slots: Vec<bool>,
}

impl DeviceSpec {
    pub fn new(name: &str, rated_power_kw: f64, max_wait: usize) -> Self {
        Self {
            name: name.to_string(),
            rated_power_kw,
            deferrable: max_wait > 0,
            max_wait,
            request_slots: Vec::new(),
        }
    }
}

/// Appliances of the synthetic home, with empty request slots.
pub fn default_devices() -> Vec<DeviceSpec> {
    vec![
        DeviceSpec::new("dishwasher", 2.0, 3),
        DeviceSpec::new("washing_machine", 2.0, 3),
        DeviceSpec::new("tumble_dryer", 2.5, 2),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HemsConfig {
    pub ess_capacity_kwh: f64,
    pub charge_power_kw: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub step_hours: f64,
    pub horizon: usize,
    pub prices: Vec<PriceStep>,
    pub devices: Vec<DeviceSpec>,
    pub initial_soc: f64,
}

impl Default for HemsConfig {
    fn default() -> Self {
        Self {
            ess_capacity_kwh: 16.0,
            charge_power_kw: 4.0,
            soc_min: 0.1,
            soc_max: 0.9,
            step_hours: 1.0,
            horizon: 24,
            prices: peak_offpeak_prices(24, 1.0, 0.0, 0.20, 0.10, 0.5),
            devices: Vec::new(),
            initial_soc: 0.5,
        }
    }
}

impl HemsConfig {
    /// SOC change of one full-power step.
    pub fn soc_step(&self) -> f64 {
        self.charge_power_kw * self.step_hours / self.ess_capacity_kwh
    }
}

/// One merged request: `len` consecutive slots starting at `arrival`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub arrival: usize,
    pub len: usize,
}

/// Merges runs of set slots into requests.
pub fn merge_requests(slots: &[bool]) -> Vec<Request> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < slots.len() {
        if slots[t] {
            let start = t;
            while t < slots.len() && slots[t] {
                t += 1;
            }
            out.push(Request {
                arrival: start,
                len: t - start,
            });
        } else {
            t += 1;
        }
    }
    out
}

/// Fills `request_slots` of each device from its per-step load (kW): a slot
/// is requested where load is strictly above a quarter of rated power.
pub fn derive_device_requests(loads: &[(&str, &[f64])], devices: &[DeviceSpec]) -> Result<Vec<DeviceSpec>, HemsError> {
    devices
        .iter()
        .map(|d| {
            let (_, load) = loads
                .iter()
                .find(|(n, _)| *n == d.name)
                .ok_or_else(|| HemsError::UnknownDevice(d.name.clone()))?;
            let threshold = 0.25 * d.rated_power_kw;
            Ok(DeviceSpec {
                request_slots: load.iter().map(|&p| p > threshold).collect(),
                ..d.clone()
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviceState {
    /// Index of the first request not yet started.
    pub next: usize,
    /// Remaining on-steps of the request currently running.
    pub running: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub t: usize,
    pub soc: f64,
    pub devices: Vec<DeviceState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DispatchAction {
    /// −1 charge, 0 hold, +1 discharge.
    pub q: i8,
    pub device_on: Vec<bool>,
}

impl DispatchAction {
    pub fn hold(devices: usize) -> Self {
        Self {
            q: 0,
            device_on: vec![false; devices],
        }
    }

    /// Canonical index: `(q + 1)·2^D + Σ_l G_l·2^l`.
    pub fn index(&self) -> usize {
        let bits: usize = self
            .device_on
            .iter()
            .enumerate()
            .map(|(l, &g)| (g as usize) << l)
            .sum();
        ((self.q + 1) as usize) * (1 << self.device_on.len()) + bits
    }

    pub fn from_index(index: usize, devices: usize) -> Self {
        let per_q = 1usize << devices;
        Self {
            q: (index / per_q) as i8 - 1,
            device_on: (0..devices).map(|l| (index % per_q) >> l & 1 == 1).collect(),
        }
    }
}

/// Number of canonical actions for `devices` devices.
pub fn action_count(devices: usize) -> usize {
    3 << devices
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub reward: f64,
    pub next_state: EnvState,
    /// α: energy flows to the grid this step.
    pub sell_indicator: bool,
    pub net_power_kw: f64,
    pub ess_power_kw: f64,
    pub load_kw: f64,
    /// Requests still running when the horizon ends (last step only).
    pub unfinished: usize,
}

/// What the device constraints allow for `G_l` in a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceNeed {
    Off,
    On,
    Free,
}

/// SOC results this close to a bound are snapped onto it, absorbing
/// rounding in repeated `±ΔSOC` updates.
const SOC_SNAP: f64 = 1e-12;

/// Validated environment with per-device request lists precomputed.
#[derive(Debug, Clone)]
pub struct Env {
    config: HemsConfig,
    requests: Vec<Vec<Request>>,
    /// Latest start step of each request that keeps every later request of
    /// the device schedulable.
    latest_start: Vec<Vec<usize>>,
}

impl Env {
    pub fn new(config: HemsConfig) -> Result<Self, HemsError> {
        let c = &config;
        let bad = |m: String| Err(HemsError::InvalidConfig(m));
        if !(0.0 <= c.soc_min && c.soc_min < c.soc_max && c.soc_max <= 1.0) {
            return bad(format!("SOC bounds [{}, {}] must satisfy 0 <= min < max <= 1", c.soc_min, c.soc_max));
        }
        if !(c.ess_capacity_kwh > 0.0 && c.charge_power_kw > 0.0 && c.step_hours > 0.0) {
            return bad("capacity, charge power and step duration must be positive".into());
        }
        if c.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if !(c.soc_min..=c.soc_max).contains(&c.initial_soc) {
            return bad(format!("initial SOC {} outside [{}, {}]", c.initial_soc, c.soc_min, c.soc_max));
        }
        if c.prices.len() != c.horizon {
            return bad(format!("{} price steps for horizon {}", c.prices.len(), c.horizon));
        }
        for (t, p) in c.prices.iter().enumerate() {
            if !(p.buy.is_finite() && p.sell.is_finite()) {
                return bad(format!("non-finite price at step {t}"));
            }
            if p.sell > p.buy {
                log::warn!("sell price {} exceeds buy price {} at step {t}", p.sell, p.buy);
            }
        }
        if c.devices.len() > 16 {
            return bad(format!("{} devices; at most 16 supported", c.devices.len()));
        }
        let mut requests = Vec::new();
        let mut latest_start = Vec::new();
        for d in &c.devices {
            if !(d.rated_power_kw >= 0.0 && d.rated_power_kw.is_finite()) {
                return bad(format!("device {} has invalid rated power", d.name));
            }
            if !d.deferrable && d.max_wait != 0 {
                return bad(format!("non-deferrable device {} must have max_wait 0", d.name));
            }
            if d.request_slots.len() != c.horizon {
                return bad(format!(
                    "device {} has {} request slots for horizon {}",
                    d.name,
                    d.request_slots.len(),
                    c.horizon
                ));
            }
            let reqs = merge_requests(&d.request_slots);
            let mut latest = vec![0; reqs.len()];
            let mut next_latest: Option<usize> = None;
            for (i, r) in reqs.iter().enumerate().rev() {
                let bound = next_latest.map_or(c.horizon - 1, |n| n - r.len);
                latest[i] = (r.arrival + d.max_wait).min(bound);
                next_latest = Some(latest[i]);
            }
            requests.push(reqs);
            latest_start.push(latest);
        }
        Ok(Self {
            config,
            requests,
            latest_start,
        })
    }

    pub fn config(&self) -> &HemsConfig {
        &self.config
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn num_devices(&self) -> usize {
        self.config.devices.len()
    }

    pub fn requests(&self, device: usize) -> &[Request] {
        &self.requests[device]
    }

    pub fn initial_state(&self) -> EnvState {
        EnvState {
            t: 0,
            soc: self.config.initial_soc,
            devices: vec![DeviceState { next: 0, running: 0 }; self.num_devices()],
        }
    }

    /// Ages of the arrived, not yet started requests of `device`, front
    /// first.
    pub fn pending_ages(&self, state: &EnvState, device: usize) -> Vec<usize> {
        self.requests[device][state.devices[device].next..]
            .iter()
            .take_while(|r| r.arrival <= state.t)
            .map(|r| state.t - r.arrival)
            .collect()
    }

    pub fn device_need(&self, state: &EnvState, device: usize) -> DeviceNeed {
        let ds = state.devices[device];
        if ds.running > 0 {
            return DeviceNeed::On;
        }
        match self.requests[device].get(ds.next) {
            Some(r) if r.arrival <= state.t => {
                if state.t >= self.latest_start[device][ds.next] {
                    DeviceNeed::On
                } else {
                    DeviceNeed::Free
                }
            }
            _ => DeviceNeed::Off,
        }
    }

    fn next_soc(&self, soc: f64, q: i8) -> f64 {
        let c = &self.config;
        let s = soc - f64::from(q) * c.soc_step();
        if s < c.soc_min && s >= c.soc_min - SOC_SNAP {
            c.soc_min
        } else if s > c.soc_max && s <= c.soc_max + SOC_SNAP {
            c.soc_max
        } else {
            s
        }
    }

    /// `Err(reason)` when `action` violates a constraint in `state`.
    pub fn check_action(&self, state: &EnvState, action: &DispatchAction) -> Result<(), String> {
        if !(-1..=1).contains(&action.q) {
            return Err(format!("ESS command {} outside {{-1, 0, 1}}", action.q));
        }
        if action.device_on.len() != self.num_devices() {
            return Err(format!(
                "action has {} device bits, environment has {} devices",
                action.device_on.len(),
                self.num_devices()
            ));
        }
        let s = self.next_soc(state.soc, action.q);
        if s < self.config.soc_min || s > self.config.soc_max {
            return Err(format!("SOC would leave bounds: {s}"));
        }
        for (l, &g) in action.device_on.iter().enumerate() {
            match (self.device_need(state, l), g) {
                (DeviceNeed::On, false) => {
                    return Err(format!("device {} must be on", self.config.devices[l].name));
                }
                (DeviceNeed::Off, true) => {
                    return Err(format!("device {} has no pending request", self.config.devices[l].name));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Feasible actions in canonical order (q ascending, then device bits).
    pub fn enumerate_actions(&self, state: &EnvState) -> Vec<DispatchAction> {
        let d = self.num_devices();
        let needs: Vec<DeviceNeed> = (0..d).map(|l| self.device_need(state, l)).collect();
        let mut out = Vec::new();
        for q in -1i8..=1 {
            let s = self.next_soc(state.soc, q);
            if s < self.config.soc_min || s > self.config.soc_max {
                continue;
            }
            for bits in 0..1usize << d {
                let ok = needs.iter().enumerate().all(|(l, need)| {
                    let g = bits >> l & 1 == 1;
                    !matches!((need, g), (DeviceNeed::On, false) | (DeviceNeed::Off, true))
                });
                if ok {
                    out.push(DispatchAction {
                        q,
                        device_on: (0..d).map(|l| bits >> l & 1 == 1).collect(),
                    });
                }
            }
        }
        out
    }

    pub fn step(&self, state: &EnvState, action: &DispatchAction, pv_kw: f64, base_load_kw: f64) -> Result<StepOutcome, HemsError> {
        let c = &self.config;
        let t = state.t;
        if t >= c.horizon {
            return Err(HemsError::InvalidInput {
                t,
                reason: "state is past the horizon".into(),
            });
        }
        if !(pv_kw >= 0.0 && pv_kw.is_finite() && base_load_kw >= 0.0 && base_load_kw.is_finite()) {
            return Err(HemsError::InvalidInput {
                t,
                reason: format!("PV {pv_kw} kW and base load {base_load_kw} kW must be finite and >= 0"),
            });
        }
        self.check_action(state, action)
            .map_err(|reason| HemsError::InfeasibleAction { t, reason })?;

        let ess_power_kw = c.charge_power_kw * f64::from(action.q);
        let soc = self.next_soc(state.soc, action.q);
        let mut load_kw = base_load_kw;
        let mut devices = state.devices.clone();
        for (l, ds) in devices.iter_mut().enumerate() {
            if !action.device_on[l] {
                continue;
            }
            load_kw += c.devices[l].rated_power_kw;
            if ds.running > 0 {
                ds.running -= 1;
            } else {
                ds.running = self.requests[l][ds.next].len - 1;
                ds.next += 1;
            }
        }
        let net_power_kw = ess_power_kw + pv_kw - load_kw;
        let sell = net_power_kw > 0.0;
        let price = if sell { c.prices[t].sell } else { c.prices[t].buy };
        let reward = net_power_kw * c.step_hours * price;
        let unfinished = if t + 1 == c.horizon {
            devices.iter().filter(|d| d.running > 0).count()
        } else {
            0
        };
        Ok(StepOutcome {
            reward,
            next_state: EnvState { t: t + 1, soc, devices },
            sell_indicator: sell,
            net_power_kw,
            ess_power_kw,
            load_kw,
            unfinished,
        })
    }

    pub fn check_trajectories(&self, pv: &[f64], base_load: &[f64]) -> Result<(), HemsError> {
        for (what, v) in [("PV trajectory", pv), ("base-load trajectory", base_load)] {
            if v.len() != self.horizon() {
                return Err(HemsError::TrajectoryLength {
                    what,
                    expected: self.horizon(),
                    got: v.len(),
                });
            }
        }
        Ok(())
    }

    /// Runs `policy` from the initial state over the whole horizon.
    pub fn rollout<P>(&self, mut policy: P, pv: &[f64], base_load: &[f64]) -> Result<Rollout, HemsError>
    where
        P: FnMut(&EnvState) -> DispatchAction,
    {
        self.check_trajectories(pv, base_load)?;
        let mut state = self.initial_state();
        let mut profit = 0.0;
        let mut trace = Vec::with_capacity(self.horizon());
        for t in 0..self.horizon() {
            let action = policy(&state);
            let outcome = self.step(&state, &action, pv[t], base_load[t])?;
            profit += outcome.reward;
            let next = outcome.next_state.clone();
            trace.push(TraceStep { state, action, outcome });
            state = next;
        }
        Ok(Rollout {
            profit,
            trace,
            final_state: state,
        })
    }

    /// Replays a fixed action sequence.
    pub fn replay(&self, actions: &[DispatchAction], pv: &[f64], base_load: &[f64]) -> Result<Rollout, HemsError> {
        if actions.len() != self.horizon() {
            return Err(HemsError::TrajectoryLength {
                what: "action sequence",
                expected: self.horizon(),
                got: actions.len(),
            });
        }
        self.rollout(|s| actions[s.t].clone(), pv, base_load)
    }

    pub fn write_trace_csv<W: Write>(&self, trace: &[TraceStep], writer: W) -> Result<(), HemsError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string(), "soc".into(), "q".into()];
        header.extend(self.config.devices.iter().map(|d| format!("g_{}", d.name)));
        header.extend(["net_kw".into(), "alpha".into(), "reward".into()]);
        w.write_record(&header)?;
        for s in trace {
            let mut rec = vec![s.state.t.to_string(), s.state.soc.to_string(), s.action.q.to_string()];
            rec.extend(s.action.device_on.iter().map(|&g| (g as u8).to_string()));
            rec.extend([
                s.outcome.net_power_kw.to_string(),
                (s.outcome.sell_indicator as u8).to_string(),
                s.outcome.reward.to_string(),
            ]);
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub state: EnvState,
    pub action: DispatchAction,
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub profit: f64,
    pub trace: Vec<TraceStep>,
    pub final_state: EnvState,
}

/// Config plus a CSV trajectory (`pv_kw`, `base_load_kw` columns) referenced
/// relative to the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub config: HemsConfig,
    pub trajectory: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScenario {
    pub config: HemsConfig,
    pub pv_kw: Vec<f64>,
    pub base_load_kw: Vec<f64>,
}

#[derive(Deserialize)]
struct TrajectoryRow {
    pv_kw: f64,
    base_load_kw: f64,
}

pub fn read_trajectory<R: Read>(reader: R) -> Result<(Vec<f64>, Vec<f64>), HemsError> {
    let mut pv = Vec::new();
    let mut load = Vec::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        let row: TrajectoryRow = row?;
        pv.push(row.pv_kw);
        load.push(row.base_load_kw);
    }
    Ok((pv, load))
}

pub fn load_scenario(path: &Path) -> Result<LoadedScenario, HemsError> {
    let scenario: Scenario = serde_json::from_reader(std::fs::File::open(path)?)?;
    let traj = path.parent().unwrap_or(Path::new(".")).join(&scenario.trajectory);
    let (pv_kw, base_load_kw) = read_trajectory(std::fs::File::open(traj)?)?;
    let env = Env::new(scenario.config.clone())?;
    env.check_trajectories(&pv_kw, &base_load_kw)?;
    Ok(LoadedScenario {
        config: scenario.config,
        pv_kw,
        base_load_kw,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plain(horizon: usize) -> HemsConfig {
        HemsConfig {
            horizon,
            prices: peak_offpeak_prices(horizon, 1.0, 0.0, 0.20, 0.10, 0.5),
            ..HemsConfig::default()
        }
    }

    fn at(soc: f64) -> EnvState {
        EnvState {
            t: 0,
            soc,
            devices: Vec::new(),
        }
    }

    fn act(q: i8) -> DispatchAction {
        DispatchAction { q, device_on: Vec::new() }
    }

    #[test]
    fn soc_update_follows_sign_convention() {
        let env = Env::new(plain(24)).unwrap();
        let s = env.step(&at(0.5), &act(1), 0.0, 0.0).unwrap().next_state.soc;
        assert_eq!(s, 0.25);
        let s = env.step(&at(0.5), &act(-1), 0.0, 0.0).unwrap().next_state.soc;
        assert_eq!(s, 0.75);
    }

    #[test]
    fn selling_reward_uses_sell_price() {
        let env = Env::new(plain(24)).unwrap();
        let out = env.step(&at(0.5), &act(1), 1.0, 2.0).unwrap();
        assert_eq!(out.net_power_kw, 3.0);
        assert!(out.sell_indicator);
        assert_eq!(out.reward, 3.0 * 1.0 * env.config().prices[0].sell);
        // zero net takes the buy branch with zero reward
        let out = env.step(&at(0.5), &act(0), 2.0, 2.0).unwrap();
        assert!(!out.sell_indicator);
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn charging_past_upper_bound_is_infeasible() {
        let env = Env::new(plain(24)).unwrap();
        let err = env.step(&at(0.85), &act(-1), 0.0, 0.0).unwrap_err();
        assert!(matches!(err, HemsError::InfeasibleAction { t: 0, .. }));
    }

    #[test]
    fn bad_trajectory_values_are_rejected() {
        let env = Env::new(plain(24)).unwrap();
        assert!(matches!(env.step(&at(0.5), &act(0), -1.0, 0.0), Err(HemsError::InvalidInput { .. })));
        assert!(matches!(env.step(&at(0.5), &act(0), f64::NAN, 0.0), Err(HemsError::InvalidInput { .. })));
    }

    #[test]
    fn requests_threshold_and_merge() {
        let dev = [DeviceSpec::new("dishwasher", 2.0, 3)];
        let load = [0.0, 1.8, 1.9, 0.0];
        let out = derive_device_requests(&[("dishwasher", &load[..])], &dev).unwrap();
        assert_eq!(out[0].request_slots, vec![false, true, true, false]);
        assert_eq!(merge_requests(&out[0].request_slots), vec![Request { arrival: 1, len: 2 }]);
        let out = derive_device_requests(&[("dishwasher", &[0.0; 4][..])], &dev).unwrap();
        assert!(merge_requests(&out[0].request_slots).is_empty());
        let out = derive_device_requests(&[("dishwasher", &[0.5, 0.51][..])], &dev).unwrap();
        assert_eq!(out[0].request_slots, vec![false, true]);
        assert!(matches!(
            derive_device_requests(&[("pv", &load[..])], &dev),
            Err(HemsError::UnknownDevice(n)) if n == "dishwasher"
        ));
    }

    #[test]
    fn interior_soc_without_devices_has_three_actions() {
        let env = Env::new(plain(24)).unwrap();
        let acts = env.enumerate_actions(&at(0.5));
        assert_eq!(acts.iter().map(|a| a.q).collect::<Vec<_>>(), vec![-1, 0, 1]);
        let acts = env.enumerate_actions(&at(0.9));
        assert!(acts.iter().all(|a| a.q != -1));
    }

    fn one_device(slots: &[bool], max_wait: usize) -> Env {
        let mut cfg = plain(slots.len());
        let mut d = DeviceSpec::new("dishwasher", 2.0, max_wait);
        d.request_slots = slots.to_vec();
        cfg.devices = vec![d];
        Env::new(cfg).unwrap()
    }

    #[test]
    fn overdue_device_is_forced_on() {
        let env = one_device(&[true, false, false, false, false], 2);
        let mut s = env.initial_state();
        for _ in 0..2 {
            assert_eq!(env.device_need(&s, 0), DeviceNeed::Free);
            s = env.step(&s, &DispatchAction::hold(1), 0.0, 0.0).unwrap().next_state;
        }
        assert_eq!(env.pending_ages(&s, 0), vec![2]);
        let acts = env.enumerate_actions(&s);
        assert!(!acts.is_empty() && acts.iter().all(|a| a.device_on[0]));
        assert!(env.step(&s, &DispatchAction::hold(1), 0.0, 0.0).is_err());
    }

    #[test]
    fn started_request_runs_to_completion() {
        let env = one_device(&[true, true, true, false, false], 1);
        let s = env.initial_state();
        let on = DispatchAction {
            q: 0,
            device_on: vec![true],
        };
        let out = env.step(&s, &on, 0.0, 0.5).unwrap();
        assert_eq!(out.load_kw, 2.5);
        let s = out.next_state;
        assert_eq!(s.devices[0], DeviceState { next: 1, running: 2 });
        assert_eq!(env.device_need(&s, 0), DeviceNeed::On);
        assert!(env.step(&s, &DispatchAction::hold(1), 0.0, 0.0).is_err());
    }

    #[test]
    fn queued_request_deadline_accounts_for_the_one_ahead() {
        // two 2-slot requests, max wait 2: own deadlines bind
        let env = one_device(&[true, true, false, true, true, false, false], 2);
        assert_eq!(env.latest_start[0], vec![2, 5]);
        let env = one_device(&[true, true, false, true, true, false], 9);
        // horizon end caps: second by 5, first by 3
        assert_eq!(env.latest_start[0], vec![3, 5]);
    }

    #[test]
    fn request_cut_by_horizon_is_flagged() {
        let env = one_device(&[false, true, true], 0);
        let r = env
            .rollout(|s| env.enumerate_actions(s)[0].clone(), &[0.0; 3], &[0.0; 3])
            .unwrap();
        assert_eq!(r.trace[2].outcome.unfinished, 0);
        let env = one_device(&[false, false, true], 0);
        let r = env
            .rollout(|s| env.enumerate_actions(s)[0].clone(), &[0.0; 3], &[0.0; 3])
            .unwrap();
        assert_eq!(r.trace[2].outcome.unfinished, 0);
        let env = one_device(&[false, true, true], 1);
        let r = env
            .rollout(
                |s| {
                    env.enumerate_actions(s)
                        .into_iter()
                        .find(|a| a.q == 0 && (!a.device_on[0] || env.device_need(s, 0) == DeviceNeed::On))
                        .unwrap()
                },
                &[0.0; 3],
                &[0.0; 3],
            )
            .unwrap();
        assert_eq!(r.trace[2].outcome.unfinished, 1);
    }

    #[test]
    fn hold_policy_with_nothing_has_zero_profit() {
        let env = Env::new(plain(24)).unwrap();
        let r = env.rollout(|_| act(0), &[0.0; 24], &[0.0; 24]).unwrap();
        assert_eq!(r.profit, 0.0);
        let env = Env::new(plain(1)).unwrap();
        let r = env.rollout(|_| act(1), &[0.5], &[0.0]).unwrap();
        assert_eq!(r.profit, r.trace[0].outcome.reward);
        assert!(matches!(
            env.rollout(|_| act(0), &[0.0; 2], &[0.0]),
            Err(HemsError::TrajectoryLength { .. })
        ));
    }

    #[test]
    fn action_index_round_trip() {
        for d in 0..4 {
            for i in 0..action_count(d) {
                assert_eq!(DispatchAction::from_index(i, d).index(), i);
            }
        }
        let a = DispatchAction {
            q: 1,
            device_on: vec![true, false],
        };
        assert_eq!(a.index(), 2 * 4 + 1);
    }

    #[test]
    fn config_validation() {
        assert!(Env::new(HemsConfig {
            soc_min: 0.9,
            soc_max: 0.1,
            ..plain(24)
        })
        .is_err());
        assert!(Env::new(HemsConfig {
            prices: Vec::new(),
            ..plain(24)
        })
        .is_err());
        let mut cfg = plain(4);
        let mut d = DeviceSpec::new("fridge", 0.1, 2);
        d.deferrable = false;
        d.request_slots = vec![false; 4];
        cfg.devices = vec![d];
        assert!(Env::new(cfg).is_err());
    }

    #[test]
    fn trace_csv_and_scenario_round_trip() {
        let env = one_device(&[true, false, false], 1);
        let r = env
            .rollout(|s| env.enumerate_actions(s).last().unwrap().clone(), &[1.0; 3], &[0.5; 3])
            .unwrap();
        let mut buf = Vec::new();
        env.write_trace_csv(&r.trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,soc,q,g_dishwasher,net_kw,alpha,reward");
        assert_eq!(text.lines().count(), 4);

        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("traj.csv"), "pv_kw,base_load_kw\n1,0.5\n2,0.5\n0,1\n").unwrap();
        let sc = Scenario {
            config: env.config().clone(),
            trajectory: "traj.csv".into(),
        };
        let path = dir.path().join("scenario.json");
        std::fs::write(&path, serde_json::to_string_pretty(&sc).unwrap()).unwrap();
        let loaded = load_scenario(&path).unwrap();
        assert_eq!(loaded.pv_kw, vec![1.0, 2.0, 0.0]);
        assert_eq!(loaded.config, sc.config);
    }

    /// Random environment with up to `max_devices` devices and random
    /// requests.
    pub(crate) fn random_env(rng: &mut ChaCha8Rng, horizon: usize, max_devices: usize) -> Env {
        let step_hours = [0.5, 1.0][rng.random_range(0..2)];
        let mut cfg = HemsConfig {
            ess_capacity_kwh: rng.random_range(4.0..20.0),
            charge_power_kw: rng.random_range(0.5..5.0),
            soc_min: rng.random_range(0.0..0.3),
            soc_max: rng.random_range(0.7..1.0),
            step_hours,
            horizon,
            prices: peak_offpeak_prices(horizon, step_hours, rng.random_range(0.0..24.0), 0.2, 0.1, 0.5),
            devices: Vec::new(),
            initial_soc: 0.0,
        };
        cfg.initial_soc = rng.random_range(cfg.soc_min..=cfg.soc_max);
        for l in 0..rng.random_range(0..=max_devices) {
            let mut d = DeviceSpec::new(&format!("dev{l}"), rng.random_range(0.0..3.0), rng.random_range(0..4));
            d.request_slots = (0..horizon).map(|_| rng.random_bool(0.3)).collect();
            cfg.devices.push(d);
        }
        Env::new(cfg).unwrap()
    }

    /// Checks every environment invariant along a random feasible rollout.
    pub(crate) fn check_random_rollout(env: &Env, rng: &mut ChaCha8Rng) -> Result<(), String> {
        let t_len = env.horizon();
        let pv: Vec<f64> = (0..t_len).map(|_| rng.random_range(0.0..5.0)).collect();
        let load: Vec<f64> = (0..t_len).map(|_| rng.random_range(0.0..3.0)).collect();
        let mut picks = ChaCha8Rng::seed_from_u64(rng.random());
        let r = env
            .rollout(
                |s| {
                    let acts = env.enumerate_actions(s);
                    acts[picks.random_range(0..acts.len())].clone()
                },
                &pv,
                &load,
            )
            .map_err(|e| e.to_string())?;
        let c = env.config();
        let mut energy = 0.0;
        let mut starts: Vec<Vec<usize>> = vec![Vec::new(); env.num_devices()];
        for step in &r.trace {
            let s = &step.outcome.next_state;
            if s.soc < c.soc_min || s.soc > c.soc_max {
                return Err(format!("SOC {} out of bounds at {}", s.soc, step.state.t));
            }
            energy += step.outcome.ess_power_kw * c.step_hours;
            let o = &step.outcome;
            if (o.net_power_kw > 0.0) != o.sell_indicator {
                return Err("sell indicator disagrees with net sign".into());
            }
            let p = c.prices[step.state.t];
            if p.buy > 0.0 && p.sell > 0.0 && o.net_power_kw.signum() * o.reward.signum() < 0.0 {
                return Err("reward sign disagrees with net".into());
            }
            for (l, (before, after)) in step.state.devices.iter().zip(&s.devices).enumerate() {
                if after.next > before.next {
                    starts[l].push(step.state.t);
                }
            }
        }
        let balance = (c.initial_soc - r.final_state.soc) * c.ess_capacity_kwh;
        if (energy - balance).abs() > 1e-9 {
            return Err(format!("energy {energy} vs SOC balance {balance}"));
        }
        for (l, st) in starts.iter().enumerate() {
            let reqs = env.requests(l);
            if st.len() != reqs.len() {
                return Err(format!("device {l}: {} of {} requests served", st.len(), reqs.len()));
            }
            for (s, r) in st.iter().zip(reqs) {
                if *s < r.arrival || *s > r.arrival + c.devices[l].max_wait {
                    return Err(format!("device {l}: request at {} started at {s}", r.arrival));
                }
            }
        }
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn random_rollouts_keep_invariants(seed in any::<u64>(), horizon in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let env = random_env(&mut rng, horizon, 3);
            prop_assert_eq!(check_random_rollout(&env, &mut rng), Ok(()));
        }

        #[test]
        fn random_rollout_is_reproducible(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let env = random_env(&mut rng, 12, 2);
            let run = |s: u64| {
                let mut r = ChaCha8Rng::seed_from_u64(s);
                env.rollout(|st| { let a = env.enumerate_actions(st); a[r.random_range(0..a.len())].clone() }, &[1.0; 12], &[0.7; 12]).unwrap()
            };
            let (a, b) = (run(seed), run(seed));
            prop_assert_eq!(a.profit.to_bits(), b.profit.to_bits());
            prop_assert_eq!(a.trace, b.trace);
        }
    }
}
