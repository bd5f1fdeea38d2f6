//! Tabular ε-greedy Q-learning: trained offline on forecast trajectories,
//! evaluated online on actual trajectories with the frozen greedy policy.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hems::{action_count, DispatchAction, Env, EnvState, HemsError, Rollout};

#[derive(Debug, Error)]
pub enum QError {
    #[error("no feasible action in state {0:?}")]
    NoFeasibleAction(QKey),
    #[error("invalid Q-learning config: {0}")]
    InvalidConfig(String),
    #[error("Q value {value} exceeds bound {bound}")]
    BoundViolated { value: f64, bound: f64 },
    #[error("non-finite reward {0}")]
    NonFiniteReward(f64),
    #[error("corrupt Q-table file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Env(#[from] HemsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Discretized device state: age of the oldest waiting request (if any)
/// and remaining on-steps of the running one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeviceKey {
    pub front_age: Option<u16>,
    pub running: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QKey {
    pub t: u16,
    pub soc_bin: u16,
    pub devices: Vec<DeviceKey>,
}

/// `floor((S − S_min)/(S_max − S_min)·B)`, with `S_max` mapped to `B − 1`.
pub fn soc_bin(soc: f64, soc_min: f64, soc_max: f64, bins: usize) -> usize {
    let x = ((soc - soc_min) / (soc_max - soc_min) * bins as f64).floor();
    (x.max(0.0) as usize).min(bins - 1)
}

pub fn discretize(env: &Env, state: &EnvState, bins: usize) -> QKey {
    let c = env.config();
    QKey {
        t: state.t as u16,
        soc_bin: soc_bin(state.soc, c.soc_min, c.soc_max, bins) as u16,
        devices: (0..env.num_devices())
            .map(|l| {
                let w = c.devices[l].max_wait;
                DeviceKey {
                    front_age: env.pending_ages(state, l).first().map(|&a| a.min(w) as u16),
                    running: state.devices[l].running as u16,
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QLearnConfig {
    pub episodes: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub epsilon_initial: f64,
    /// Multiplicative ε decay per episode.
    pub epsilon_decay: f64,
    pub epsilon_floor: f64,
    pub soc_bins: usize,
    pub seed: u64,
}

impl Default for QLearnConfig {
    fn default() -> Self {
        Self {
            episodes: 7000,
            gamma: 0.99,
            learning_rate: 0.95,
            epsilon_initial: 0.1,
            epsilon_decay: 0.999,
            epsilon_floor: 0.01,
            soc_bins: 17,
            seed: 0,
        }
    }
}

impl QLearnConfig {
    pub fn validate(&self) -> Result<(), QError> {
        let bad = |m: &str| Err(QError::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must be in (0, 1]");
        }
        for e in [self.epsilon_initial, self.epsilon_floor, self.epsilon_decay] {
            if !(0.0..=1.0).contains(&e) {
                return bad("epsilon parameters must be in [0, 1]");
            }
        }
        if self.soc_bins == 0 || self.soc_bins > u16::MAX as usize {
            return bad("soc_bins must be in 1..=65535");
        }
        Ok(())
    }

    /// Undiscounted, fully exploring start: the setting under which the
    /// greedy policy is compared against the exact undiscounted optimum.
    pub fn certificate(soc_bins: usize, seed: u64) -> Self {
        Self {
            gamma: 1.0,
            epsilon_initial: 1.0,
            soc_bins,
            seed,
            ..Self::default()
        }
    }

    pub fn epsilon(&self, episode: usize) -> f64 {
        (self.epsilon_initial * self.epsilon_decay.powi(episode as i32)).max(self.epsilon_floor.min(self.epsilon_initial))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QEntry {
    pub values: Vec<f64>,
    pub visits: Vec<u64>,
}

/// Q-values per key, indexed by canonical action index; unseen entries
/// read as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    devices: usize,
    entries: FxHashMap<QKey, QEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTableSummary {
    pub states: usize,
    pub devices: usize,
    pub actions_per_state: usize,
    pub value_min: f64,
    pub value_max: f64,
    pub visit_total: u64,
}

const QT_MAGIC: &[u8; 4] = b"SQQT";
const QT_VERSION: u32 = 1;

impl QTable {
    pub fn new(devices: usize) -> Self {
        Self {
            devices,
            entries: FxHashMap::default(),
        }
    }

    pub fn actions(&self) -> usize {
        action_count(self.devices)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &QKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get(&self, key: &QKey, action: usize) -> f64 {
        self.entries.get(key).map_or(0.0, |e| e.values[action])
    }

    pub fn visits(&self, key: &QKey, action: usize) -> u64 {
        self.entries.get(key).map_or(0, |e| e.visits[action])
    }

    pub fn set(&mut self, key: &QKey, action: usize, value: f64) {
        self.entry(key).values[action] = value;
    }

    fn entry(&mut self, key: &QKey) -> &mut QEntry {
        let n = self.actions();
        if !self.entries.contains_key(key) {
            self.entries.insert(
                key.clone(),
                QEntry {
                    values: vec![0.0; n],
                    visits: vec![0; n],
                },
            );
        }
        self.entries.get_mut(key).expect("just inserted")
    }

    /// Largest Q over `feasible`; 0 for an empty list.
    pub fn max_value(&self, key: &QKey, feasible: &[DispatchAction]) -> f64 {
        let Some(e) = self.entries.get(key) else {
            return 0.0;
        };
        feasible
            .iter()
            .map(|a| e.values[a.index()])
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
            .unwrap_or(0.0)
    }

    /// Argmax over `feasible`, ties to the lowest canonical index.
    pub fn greedy(&self, key: &QKey, feasible: &[DispatchAction]) -> Option<DispatchAction> {
        let e = self.entries.get(key);
        let mut best: Option<(usize, f64)> = None;
        for a in feasible {
            let i = a.index();
            let v = e.map_or(0.0, |e| e.values[i]);
            let better = match best {
                None => true,
                Some((bi, bv)) => v > bv || (v == bv && i < bi),
            };
            if better {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| DispatchAction::from_index(i, self.devices))
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|e| e.values.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    fn sorted_keys(&self) -> Vec<&QKey> {
        let mut keys: Vec<&QKey> = self.entries.keys().collect();
        keys.sort();
        keys
    }

    pub fn summary(&self) -> QTableSummary {
        let vals = self.entries.values().flat_map(|e| e.values.iter().copied());
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        QTableSummary {
            states: self.len(),
            devices: self.devices,
            actions_per_state: self.actions(),
            value_min: if self.is_empty() { 0.0 } else { lo },
            value_max: if self.is_empty() { 0.0 } else { hi },
            visit_total: self.entries.values().flat_map(|e| e.visits.iter()).sum(),
        }
    }

    /// Little-endian binary layout: magic `SQQT`, version u32, devices u32,
    /// entry count u64, then entries sorted by key. Each entry is `t` u16,
    /// `soc_bin` u16, per device front age i32 (−1 when none) and running
    /// u16, then `3·2^D` f64 values and as many u64 visit counts.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), QError> {
        w.write_all(QT_MAGIC)?;
        w.write_all(&QT_VERSION.to_le_bytes())?;
        w.write_all(&(self.devices as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for key in self.sorted_keys() {
            let e = &self.entries[key];
            w.write_all(&key.t.to_le_bytes())?;
            w.write_all(&key.soc_bin.to_le_bytes())?;
            for d in &key.devices {
                w.write_all(&d.front_age.map_or(-1, i32::from).to_le_bytes())?;
                w.write_all(&d.running.to_le_bytes())?;
            }
            for v in &e.values {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in &e.visits {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, QError> {
        fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], QError> {
            let mut b = [0u8; N];
            r.read_exact(&mut b)
                .map_err(|e| QError::Corrupt(format!("truncated: {e}")))?;
            Ok(b)
        }
        if &take::<4, _>(&mut r)? != QT_MAGIC {
            return Err(QError::Corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != QT_VERSION {
            return Err(QError::Corrupt(format!("unsupported version {version}")));
        }
        let devices = u32::from_le_bytes(take(&mut r)?) as usize;
        if devices > 16 {
            return Err(QError::Corrupt(format!("{devices} devices")));
        }
        let count = u64::from_le_bytes(take(&mut r)?);
        let mut table = QTable::new(devices);
        let n = table.actions();
        for _ in 0..count {
            let t = u16::from_le_bytes(take(&mut r)?);
            let soc_bin = u16::from_le_bytes(take(&mut r)?);
            let mut devs = Vec::with_capacity(devices);
            for _ in 0..devices {
                let age = i32::from_le_bytes(take(&mut r)?);
                let running = u16::from_le_bytes(take(&mut r)?);
                devs.push(DeviceKey {
                    front_age: if age < 0 { None } else { Some(age as u16) },
                    running,
                });
            }
            let values = (0..n)
                .map(|_| take(&mut r).map(f64::from_le_bytes))
                .collect::<Result<Vec<_>, _>>()?;
            let visits = (0..n)
                .map(|_| take(&mut r).map(u64::from_le_bytes))
                .collect::<Result<Vec<_>, _>>()?;
            table.entries.insert(
                QKey {
                    t,
                    soc_bin,
                    devices: devs,
                },
                QEntry { values, visits },
            );
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(QError::Corrupt(format!("{} trailing bytes", rest.len())));
        }
        Ok(table)
    }
}

pub fn select_action<R: Rng>(
    table: &QTable,
    key: &QKey,
    feasible: &[DispatchAction],
    epsilon: f64,
    rng: &mut R,
) -> Result<DispatchAction, QError> {
    if feasible.is_empty() {
        return Err(QError::NoFeasibleAction(key.clone()));
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(feasible[rng.random_range(0..feasible.len())].clone());
    }
    Ok(table.greedy(key, feasible).expect("feasible is non-empty"))
}

/// `Q ← (1 − lr)·Q + lr·(r + γ·max_a' Q(s', a'))`; `next == None` marks
/// the terminal step. Returns the new value.
#[allow(clippy::too_many_arguments)]
pub fn q_update(
    table: &mut QTable,
    key: &QKey,
    action: usize,
    reward: f64,
    next: Option<(&QKey, &[DispatchAction])>,
    lr: f64,
    gamma: f64,
) -> Result<f64, QError> {
    if !reward.is_finite() {
        return Err(QError::NonFiniteReward(reward));
    }
    let future = next.map_or(0.0, |(k, f)| table.max_value(k, f));
    let e = table.entry(key);
    let v = (1.0 - lr) * e.values[action] + lr * (reward + gamma * future);
    e.values[action] = v;
    e.visits[action] += 1;
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct OfflineOutcome {
    pub table: QTable,
    /// Greedy-policy profit on the training trajectories.
    pub predicted_profit: f64,
    /// Profit collected by each ε-greedy training episode.
    pub episode_profits: Vec<f64>,
    /// Largest per-step |reward| seen during training.
    pub max_abs_reward: f64,
}

/// `R_max·(1 − γ^T)/(1 − γ)` (or `R_max·T` when γ = 1).
pub fn q_bound(max_abs_reward: f64, gamma: f64, horizon: usize) -> f64 {
    if gamma == 1.0 {
        max_abs_reward * horizon as f64
    } else {
        max_abs_reward * (1.0 - gamma.powi(horizon as i32)) / (1.0 - gamma)
    }
}

pub fn train_offline(cfg: &QLearnConfig, env: &Env, pv: &[f64], base_load: &[f64]) -> Result<OfflineOutcome, QError> {
    cfg.validate()?;
    env.check_trajectories(pv, base_load)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut table = QTable::new(env.num_devices());
    let mut episode_profits = Vec::with_capacity(cfg.episodes);
    let mut max_abs_reward = 0.0f64;
    let horizon = env.horizon();
    for episode in 0..cfg.episodes {
        let eps = cfg.epsilon(episode);
        let mut state = env.initial_state();
        let mut key = discretize(env, &state, cfg.soc_bins);
        let mut feasible = env.enumerate_actions(&state);
        let mut profit = 0.0;
        for t in 0..horizon {
            let action = select_action(&table, &key, &feasible, eps, &mut rng)?;
            let out = env.step(&state, &action, pv[t], base_load[t])?;
            max_abs_reward = max_abs_reward.max(out.reward.abs());
            profit += out.reward;
            state = out.next_state;
            let next_key = discretize(env, &state, cfg.soc_bins);
            let next_feasible = if t + 1 < horizon {
                env.enumerate_actions(&state)
            } else {
                Vec::new()
            };
            let next = (t + 1 < horizon).then_some((&next_key, next_feasible.as_slice()));
            q_update(&mut table, &key, action.index(), out.reward, next, cfg.learning_rate, cfg.gamma)?;
            key = next_key;
            feasible = next_feasible;
        }
        episode_profits.push(profit);
    }
    let bound = q_bound(max_abs_reward, cfg.gamma, horizon);
    let worst = table.max_abs();
    if worst > bound * (1.0 + 1e-12) {
        return Err(QError::BoundViolated { value: worst, bound });
    }
    let predicted_profit = test_online(&table, cfg.soc_bins, env, pv, base_load)?.profit;
    Ok(OfflineOutcome {
        table,
        predicted_profit,
        episode_profits,
        max_abs_reward,
    })
}

/// Battery idle and only forced appliances on; ties go to the lower index.
pub fn neutral_action(feasible: &[DispatchAction]) -> Option<DispatchAction> {
    feasible
        .iter()
        .min_by_key(|a| (a.q != 0, a.device_on.iter().filter(|&&g| g).count(), a.index()))
        .cloned()
}

/// Greedy rollout with a frozen table; the argmax ranges over the actions
/// feasible in the visited state. States the table never saw get the
/// neutral action.
pub fn test_online(table: &QTable, soc_bins: usize, env: &Env, pv: &[f64], base_load: &[f64]) -> Result<Rollout, QError> {
    let mut missing = None;
    let r = env.rollout(
        |s| {
            let feasible = env.enumerate_actions(s);
            let key = discretize(env, s, soc_bins);
            let choice = if table.contains(&key) {
                table.greedy(&key, &feasible)
            } else {
                neutral_action(&feasible)
            };
            choice.unwrap_or_else(|| {
                missing.get_or_insert(key);
                DispatchAction::hold(env.num_devices())
            })
        },
        pv,
        base_load,
    );
    if let Some(key) = missing {
        return Err(QError::NoFeasibleAction(key));
    }
    Ok(r?)
}
