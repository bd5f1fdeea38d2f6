//! Exact finite-horizon backward induction over the discretized HEMS MDP.
//!
//! SOC lives on the lattice `S_min + k·(S_max − S_min)/(B − 1)`,
//! `k = 0..B`; one full-power step must move an integer number of lattice
//! points so every reachable SOC is a lattice point.

use rustc_hash::FxHashMap;
use thiserror::Error;

use crate::hems::{DeviceState, DispatchAction, Env, EnvState, HemsConfig, HemsError, Request, merge_requests};

/// Largest number of (t, state) nodes the solver will expand.
pub const STATE_LIMIT: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum DpError {
    #[error("more than {limit} reachable states")]
    StateSpaceTooLarge { limit: usize },
    #[error("SOC step {step} is not a whole number of lattice spacings {spacing}")]
    LatticeMismatch { step: f64, spacing: f64 },
    #[error("need at least 2 lattice points, got {0}")]
    TooFewPoints(usize),
    #[error(transparent)]
    Env(#[from] HemsError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct NodeKey {
    soc_idx: usize,
    devices: Vec<DeviceState>,
}

#[derive(Debug, Clone)]
pub struct DpNode {
    pub state: EnvState,
    pub soc_idx: usize,
    pub value: f64,
    /// Canonical index of the optimal action (ties to the lowest index).
    pub best_action: usize,
    /// `(action index, reward, node index in the next layer)` per feasible
    /// action.
    pub edges: Vec<(usize, f64, usize)>,
}

/// Optimal value and action per reachable `(t, state)`.
#[derive(Debug, Clone)]
pub struct ValueTable {
    pub layers: Vec<Vec<DpNode>>,
}

impl ValueTable {
    pub fn state_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Largest `|V(s) − max_a (r + V(s'))|` over all entries.
    pub fn bellman_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for (t, layer) in self.layers.iter().enumerate() {
            for node in layer {
                let best = node
                    .edges
                    .iter()
                    .map(|&(_, r, j)| r + self.layers.get(t + 1).map_or(0.0, |l| l[j].value))
                    .fold(f64::NEG_INFINITY, f64::max);
                worst = worst.max((node.value - best).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone)]
pub struct DpSolution {
    /// Profit of replaying `actions` through the environment.
    pub profit: f64,
    /// Backward-induction value of the initial state.
    pub value: f64,
    pub actions: Vec<DispatchAction>,
    pub table: ValueTable,
}

fn lattice(config: &HemsConfig, points: usize) -> Result<f64, DpError> {
    if points < 2 {
        return Err(DpError::TooFewPoints(points));
    }
    let spacing = (config.soc_max - config.soc_min) / (points - 1) as f64;
    let step = config.soc_step();
    let ratio = step / spacing;
    if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
        return Err(DpError::LatticeMismatch { step, spacing });
    }
    Ok(spacing)
}

fn lattice_index(config: &HemsConfig, spacing: f64, soc: f64) -> Result<usize, DpError> {
    let x = (soc - config.soc_min) / spacing;
    if (x - x.round()).abs() > 1e-9 {
        return Err(DpError::LatticeMismatch {
            step: config.soc_step(),
            spacing,
        });
    }
    Ok(x.round() as usize)
}

/// Optimal profit and actions over `points` SOC lattice points.
pub fn solve(env: &Env, pv: &[f64], base_load: &[f64], points: usize) -> Result<DpSolution, DpError> {
    env.check_trajectories(pv, base_load)?;
    let config = env.config();
    let spacing = lattice(config, points)?;
    let horizon = env.horizon();

    // Forward pass: reachable states and transitions, using the
    // environment's own step function.
    let init = env.initial_state();
    let mut layers: Vec<Vec<DpNode>> = Vec::with_capacity(horizon);
    let mut current = vec![DpNode {
        soc_idx: lattice_index(config, spacing, init.soc)?,
        state: init,
        value: 0.0,
        best_action: 0,
        edges: Vec::new(),
    }];
    let mut total = 1;
    for t in 0..horizon {
        let mut next: Vec<DpNode> = Vec::new();
        let mut index: FxHashMap<NodeKey, usize> = FxHashMap::default();
        for node in current.iter_mut() {
            for action in env.enumerate_actions(&node.state) {
                let out = env.step(&node.state, &action, pv[t], base_load[t])?;
                let j = if t + 1 < horizon {
                    let soc_idx = lattice_index(config, spacing, out.next_state.soc)?;
                    let key = NodeKey {
                        soc_idx,
                        devices: out.next_state.devices.clone(),
                    };
                    *index.entry(key).or_insert_with(|| {
                        next.push(DpNode {
                            state: out.next_state.clone(),
                            soc_idx,
                            value: 0.0,
                            best_action: 0,
                            edges: Vec::new(),
                        });
                        next.len() - 1
                    })
                } else {
                    0
                };
                node.edges.push((action.index(), out.reward, j));
            }
        }
        total += next.len();
        if total > STATE_LIMIT {
            return Err(DpError::StateSpaceTooLarge { limit: STATE_LIMIT });
        }
        layers.push(current);
        current = next;
    }

    // Backward pass.
    for t in (0..horizon).rev() {
        let (head, tail) = layers.split_at_mut(t + 1);
        let future = tail.first();
        for node in head[t].iter_mut() {
            let mut best: Option<(usize, f64)> = None;
            for &(a, r, j) in &node.edges {
                let v = r + future.map_or(0.0, |l| l[j].value);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((a, v));
                }
            }
            let (a, v) = best.expect("every state has a feasible action");
            node.best_action = a;
            node.value = v;
        }
    }

    // Follow the optimal actions from the root.
    let d = env.num_devices();
    let mut actions = Vec::with_capacity(horizon);
    let mut i = 0;
    for layer in &layers {
        let node = &layer[i];
        actions.push(DispatchAction::from_index(node.best_action, d));
        i = node
            .edges
            .iter()
            .find(|e| e.0 == node.best_action)
            .expect("best action is an edge")
            .2;
    }
    let value = layers[0][0].value;
    let profit = env.replay(&actions, pv, base_load)?.profit;
    Ok(DpSolution {
        profit,
        value,
        actions,
        table: ValueTable { layers },
    })
}

/// Exhaustive search over all action sequences with its own transition
/// and feasibility rules, for cross-checking `solve` on short horizons.
pub fn brute_force(config: &HemsConfig, pv: &[f64], base_load: &[f64]) -> f64 {
    assert!(config.horizon <= 6, "brute force is limited to T <= 6");
    struct Dev {
        power: f64,
        wait: usize,
        reqs: Vec<Request>,
    }
    let devs: Vec<Dev> = config
        .devices
        .iter()
        .map(|d| Dev {
            power: d.rated_power_kw,
            wait: d.max_wait,
            reqs: merge_requests(&d.request_slots),
        })
        .collect();
    // per device: (requests started, on-steps left in the current one)
    fn go(
        config: &HemsConfig,
        devs: &[Dev],
        pv: &[f64],
        load: &[f64],
        t: usize,
        energy: f64,
        progress: &mut Vec<(usize, usize)>,
    ) -> f64 {
        let horizon = config.horizon;
        if t == horizon {
            // every request must have started by then
            return if devs.iter().zip(progress.iter()).all(|(d, p)| p.0 == d.reqs.len()) {
                0.0
            } else {
                f64::NEG_INFINITY
            };
        }
        let mut best = f64::NEG_INFINITY;
        let n = devs.len();
        for q in [-1.0, 0.0, 1.0] {
            let e = energy - q * config.charge_power_kw * config.step_hours;
            let lo = config.soc_min * config.ess_capacity_kwh;
            let hi = config.soc_max * config.ess_capacity_kwh;
            if e < lo - 1e-9 || e > hi + 1e-9 {
                continue;
            }
            'combo: for bits in 0..1usize << n {
                let saved = progress.clone();
                let mut consumption = load[t];
                for (l, d) in devs.iter().enumerate() {
                    let on = bits >> l & 1 == 1;
                    let (started, left) = progress[l];
                    if left > 0 {
                        if !on {
                            *progress = saved;
                            continue 'combo;
                        }
                        progress[l].1 -= 1;
                    } else if on {
                        match d.reqs.get(started) {
                            Some(r) if r.arrival <= t && t <= (r.arrival + d.wait).min(horizon - 1) => {
                                progress[l] = (started + 1, r.len - 1)
                            }
                            _ => {
                                *progress = saved;
                                continue 'combo;
                            }
                        }
                    } else if let Some(r) = d.reqs.get(started) {
                        // waiting past the deadline is a dead end
                        if r.arrival <= t && t >= (r.arrival + d.wait).min(horizon - 1) {
                            *progress = saved;
                            continue 'combo;
                        }
                    }
                    if on {
                        consumption += d.power;
                    }
                }
                let net = q * config.charge_power_kw + pv[t] - consumption;
                let price = if net > 0.0 { config.prices[t].sell } else { config.prices[t].buy };
                let r = net * config.step_hours * price;
                let rest = go(config, devs, pv, load, t + 1, e, progress);
                best = best.max(r + rest);
                *progress = saved;
            }
        }
        best
    }
    let mut progress = vec![(0, 0); devs.len()];
    go(
        config,
        &devs,
        pv,
        base_load,
        0,
        config.initial_soc * config.ess_capacity_kwh,
        &mut progress,
    )
}
