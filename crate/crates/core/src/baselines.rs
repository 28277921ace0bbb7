//! Comparison allocators: greedy full-power NOMA, OMA, random allocation,
//! an exhaustive oracle for small instances and tabular Q-learning.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noma_phy::{decodable_layers, enforce_ladder, Allocation, PhyError};
use crate::sim::{Environment, SimError};

/// Largest enumeration the oracle accepts.
pub const ORACLE_LIMIT: u64 = 10_000_000;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("instance too large for exhaustive search: {size} combinations (limit {limit})")]
    TooLarge { size: u64, limit: u64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Phy(#[from] PhyError),
}

/// Discrete transmit power levels in watts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerGrid {
    levels: Vec<f64>,
}

impl PowerGrid {
    /// Levels must be strictly increasing within `(0, cap]`.
    pub fn new(levels: Vec<f64>, cap: f64) -> Result<Self, BaselineError> {
        if levels.is_empty() {
            return Err(BaselineError::InvalidParameter("power grid is empty".into()));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(BaselineError::InvalidParameter(
                "power grid must be strictly increasing".into(),
            ));
        }
        if levels[0] <= 0.0 || *levels.last().unwrap() > cap {
            return Err(BaselineError::InvalidParameter(format!(
                "power grid must lie in (0, {cap}]"
            )));
        }
        Ok(Self { levels })
    }

    /// `count` evenly spaced levels ending at `cap`.
    pub fn uniform(cap: f64, count: usize) -> Result<Self, BaselineError> {
        Self::new((1..=count).map(|i| cap * i as f64 / count as f64).collect(), cap)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn max(&self) -> f64 {
        *self.levels.last().unwrap()
    }
}

fn free_channels(env: &Environment) -> Vec<usize> {
    (0..env.num_subchannels()).filter(|&k| !env.pu.occupancy[k]).collect()
}

/// Keeps the `max_users` strongest requests on each channel and zeroes the
/// rest.
pub fn cap_multiplexing(requested: &mut [Vec<f64>], gains: &[Vec<f64>], max_users: usize) {
    let k_subs = requested.first().map_or(0, Vec::len);
    for k in 0..k_subs {
        let mut users: Vec<usize> = (0..requested.len()).filter(|&n| requested[n][k] > 0.0).collect();
        users.sort_by(|&a, &b| gains[b][k].total_cmp(&gains[a][k]).then(a.cmp(&b)));
        for &n in users.iter().skip(max_users) {
            requested[n][k] = 0.0;
        }
    }
}

/// Full-power NOMA allocation on the free channels: the strongest SUs are
/// dealt round by round so that every channel gets one user per round, up
/// to `max_users` rounds. A channel whose ladder is infeasible sheds its
/// weakest user until it decodes.
pub fn greedy_allocate(env: &Environment, max_users: usize) -> Result<Allocation, BaselineError> {
    let (n_sus, k_subs) = (env.num_sus(), env.num_subchannels());
    let free = free_channels(env);
    let gains = &env.gains;
    let best = |n: usize| free.iter().map(|&k| gains[n][k]).fold(0.0, f64::max);
    let mut users: Vec<usize> = (0..n_sus).collect();
    users.sort_by(|&a, &b| best(b).total_cmp(&best(a)).then(a.cmp(&b)));
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k_subs];
    let mut queue = users.into_iter();
    'rounds: for _ in 0..max_users {
        let mut open = free.clone();
        while !open.is_empty() {
            let Some(n) = queue.next() else { break 'rounds };
            let (pos, _) = open
                .iter()
                .enumerate()
                .max_by(|(_, &a), (_, &b)| gains[n][a].total_cmp(&gains[n][b]).then(b.cmp(&a)))
                .unwrap();
            members[open.remove(pos)].push(n);
        }
    }
    let mut powers = vec![vec![0.0; k_subs]; n_sus];
    for (k, list) in members.iter().enumerate() {
        let p = preferred_ladder(env, k, list)?;
        for n in 0..n_sus {
            powers[n][k] = p[n];
        }
    }
    Ok(Allocation::from_powers(powers, gains)?)
}

/// Full-power ladder of `members` on channel `k`; the weakest member is
/// dropped until every remaining layer decodes. Returns powers per SU.
pub fn preferred_ladder(env: &Environment, k: usize, members: &[usize]) -> Result<Vec<f64>, BaselineError> {
    let n_sus = env.num_sus();
    let cfg = env.params.constellation();
    let caps = env.caps();
    let g: Vec<f64> = (0..n_sus).map(|n| env.gains[n][k]).collect();
    let mut list = members.to_vec();
    loop {
        let mut req = vec![0.0; n_sus];
        for &n in &list {
            req[n] = env.params.p_max;
        }
        let out = enforce_ladder(&req, &g, &caps, &cfg)?;
        if out.feasible || list.len() <= 1 {
            return Ok(out.powers);
        }
        let weakest = *list
            .iter()
            .min_by(|&&a, &&b| g[a].total_cmp(&g[b]).then(b.cmp(&a)))
            .unwrap();
        list.retain(|&n| n != weakest);
    }
}

/// Orthogonal access: one SU per free channel at the top grid level.
pub fn oma_allocate(env: &Environment, grid: &PowerGrid) -> Result<Allocation, BaselineError> {
    let mut alloc = greedy_allocate(env, 1)?;
    for row in alloc.powers.iter_mut() {
        for p in row.iter_mut() {
            if *p > 0.0 {
                *p = grid.max();
            }
        }
    }
    Ok(Allocation::from_powers(alloc.powers, &env.gains)?)
}

/// Idles the weakest layers of every channel until all remaining layers
/// decode. Powers are otherwise left untouched.
pub fn shed_undecodable(
    powers: &mut [Vec<f64>],
    gains: &[Vec<f64>],
    cfg: &crate::noma_phy::ConstellationConfig,
) -> Result<(), BaselineError> {
    loop {
        let alloc = Allocation::from_powers(powers.to_vec(), gains)?;
        let mut changed = false;
        for (k, order) in alloc.sic_orders.iter().enumerate() {
            let rx: Vec<f64> = order.iter().map(|&n| powers[n][k] * gains[n][k]).collect();
            if decodable_layers(&rx, cfg) < rx.len() {
                powers[*order.last().unwrap()][k] = 0.0;
                changed = true;
            }
        }
        if !changed {
            return Ok(());
        }
    }
}

/// Uniform channel (or idle) and grid level per SU, then the multiplexing
/// cap; channels that do not decode shed their weakest layers.
pub fn random_allocate<R: Rng + ?Sized>(
    env: &Environment,
    grid: &PowerGrid,
    rng: &mut R,
) -> Result<Allocation, BaselineError> {
    let (n_sus, k_subs) = (env.num_sus(), env.num_subchannels());
    let mut req = vec![vec![0.0; k_subs]; n_sus];
    for row in req.iter_mut() {
        let pick = rng.random_range(0..=k_subs);
        let level = grid.levels()[rng.random_range(0..grid.len())];
        if pick < k_subs {
            row[pick] = level;
        }
    }
    cap_multiplexing(&mut req, &env.gains, env.params.max_users);
    shed_undecodable(&mut req, &env.gains, &env.params.constellation())?;
    Ok(Allocation::from_powers(req, &env.gains)?)
}

/// Exact solution of a small instance.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub allocation: Allocation,
    pub sum_rate: f64,
    pub evaluated: u64,
}

/// Number of joint choices the oracle enumerates.
pub fn oracle_size(num_sus: usize, num_subchannels: usize, levels: usize) -> u64 {
    let base = (num_subchannels * levels + 1) as u64;
    (0..num_sus).try_fold(1u64, |acc, _| acc.checked_mul(base)).unwrap_or(u64::MAX)
}

fn decode_choice(mut index: u64, n_sus: usize, base: u64) -> Vec<u64> {
    let mut codes = vec![0; n_sus];
    for n in (0..n_sus).rev() {
        codes[n] = index % base;
        index /= base;
    }
    codes
}

/// Enumerates every (channel or idle, grid level) choice per SU. Allocations
/// whose channels exceed `max_users` or fail to decode every layer are
/// skipped. Ties go to the lexicographically smallest choice vector, idle
/// first, then channels and levels in ascending order.
pub fn exhaustive_oracle(env: &Environment, grid: &PowerGrid) -> Result<OracleSolution, BaselineError> {
    let (n_sus, k_subs, g_len) = (env.num_sus(), env.num_subchannels(), grid.len());
    let size = oracle_size(n_sus, k_subs, g_len);
    if size > ORACLE_LIMIT {
        return Err(BaselineError::TooLarge {
            size,
            limit: ORACLE_LIMIT,
        });
    }
    let base = (k_subs * g_len + 1) as u64;
    let cfg = env.params.constellation();
    let evaluate = |index: u64| -> Option<f64> {
        let codes = decode_choice(index, n_sus, base);
        let mut powers = vec![vec![0.0; k_subs]; n_sus];
        let mut counts = vec![0usize; k_subs];
        for (n, &c) in codes.iter().enumerate() {
            if c > 0 {
                let c = (c - 1) as usize;
                let (k, l) = (c / g_len, c % g_len);
                powers[n][k] = grid.levels()[l];
                counts[k] += 1;
            }
        }
        if counts.iter().any(|&c| c > cfg.max_users) {
            return None;
        }
        let alloc = Allocation::from_powers(powers, &env.gains).ok()?;
        for (k, order) in alloc.sic_orders.iter().enumerate() {
            let rx: Vec<f64> = order.iter().map(|&n| alloc.powers[n][k] * env.gains[n][k]).collect();
            if decodable_layers(&rx, &cfg) < rx.len() {
                return None;
            }
        }
        Some(env.effective_rates(&alloc).sum_rate)
    };
    let shards = 64u64.min(size);
    let chunk = size.div_ceil(shards);
    let best = (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut best: Option<(f64, u64)> = None;
            for i in s * chunk..((s + 1) * chunk).min(size) {
                if let Some(v) = evaluate(i) {
                    if best.is_none_or(|(b, _)| v > b) {
                        best = Some((v, i));
                    }
                }
            }
            best
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .fold(None, |acc: Option<(f64, u64)>, (v, i)| match acc {
            Some((b, j)) if b > v || (b == v && j < i) => Some((b, j)),
            _ => Some((v, i)),
        });
    let (sum_rate, index) = best.expect("all-idle allocation is always feasible");
    let codes = decode_choice(index, n_sus, base);
    let mut powers = vec![vec![0.0; k_subs]; n_sus];
    for (n, &c) in codes.iter().enumerate() {
        if c > 0 {
            let c = (c - 1) as usize;
            powers[n][c / g_len] = grid.levels()[c % g_len];
        }
    }
    Ok(OracleSolution {
        allocation: Allocation::from_powers(powers, &env.gains)?,
        sum_rate,
        evaluated: size,
    })
}

/// Tabular action values, `values[state][action]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    values: Vec<Vec<f64>>,
}

impl QTable {
    pub fn new(num_states: usize, num_actions: usize, init: f64) -> Self {
        Self {
            values: vec![vec![init; num_actions]; num_states],
        }
    }

    pub fn num_states(&self) -> usize {
        self.values.len()
    }

    pub fn num_actions(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s][a]
    }

    /// Greedy action; ties go to the lowest index.
    pub fn best_action(&self, s: usize) -> usize {
        let row = &self.values[s];
        let mut best = 0;
        for (a, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn max_value(&self, s: usize) -> f64 {
        self.values[s][self.best_action(s)]
    }

    /// `Q(s,a) += alpha (r + gamma max Q(s',.) - Q(s,a))`.
    pub fn update(&mut self, s: usize, a: usize, reward: f64, next: usize, alpha: f64, gamma: f64) {
        let target = reward + gamma * self.max_value(next);
        self.values[s][a] += alpha * (target - self.values[s][a]);
    }

    pub fn epsilon_greedy<R: Rng + ?Sized>(&self, s: usize, epsilon: f64, rng: &mut R) -> usize {
        if rng.random::<f64>() < epsilon {
            rng.random_range(0..self.num_actions())
        } else {
            self.best_action(s)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub initial_value: f64,
}

impl Default for QConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            gamma: 0.9,
            epsilon_start: 0.3,
            epsilon_end: 0.01,
            initial_value: 0.0,
        }
    }
}

impl QConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        if !unit(self.alpha) || !unit(self.gamma) || !unit(self.epsilon_start) {
            return Err(BaselineError::InvalidParameter(
                "alpha, gamma and epsilon must lie in (0, 1]".into(),
            ));
        }
        if !(0.0..=self.epsilon_start).contains(&self.epsilon_end) {
            return Err(BaselineError::InvalidParameter(
                "epsilon_end must lie in [0, epsilon_start]".into(),
            ));
        }
        Ok(())
    }

    /// Linear decay from start to end over `episodes`.
    pub fn epsilon(&self, episode: usize, episodes: usize) -> f64 {
        if episodes <= 1 {
            return self.epsilon_end;
        }
        let f = episode as f64 / (episodes - 1) as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * f.min(1.0)
    }
}

/// Episodic environment with finite states and actions.
pub trait TabularEnv {
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn reset(&mut self) -> usize;
    /// Reward and next state.
    fn step(&mut self, action: usize) -> (f64, usize);
}

/// Plain epsilon-greedy Q-learning on a [`TabularEnv`].
pub fn q_learning<E: TabularEnv, R: Rng + ?Sized>(
    env: &mut E,
    episodes: usize,
    steps: usize,
    cfg: &QConfig,
    rng: &mut R,
) -> Result<QTable, BaselineError> {
    cfg.validate()?;
    let mut q = QTable::new(env.num_states(), env.num_actions(), cfg.initial_value);
    for e in 0..episodes {
        let eps = cfg.epsilon(e, episodes);
        let mut s = env.reset();
        for _ in 0..steps {
            let a = q.epsilon_greedy(s, eps, rng);
            let (r, next) = env.step(a);
            q.update(s, a, r, next, cfg.alpha, cfg.gamma);
            s = next;
        }
    }
    Ok(q)
}

/// Per-episode summary of a baseline run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineEpisode {
    /// Mean slot sum rate in bits/s.
    pub sum_rate: f64,
}

/// State of one SU: PU occupancy pattern and gain tercile among all SUs.
fn su_state(occupancy: &[bool], tercile: usize) -> usize {
    let pattern = occupancy
        .iter()
        .enumerate()
        .fold(0usize, |acc, (k, &b)| acc | (usize::from(b) << k));
    pattern * 3 + tercile
}

fn gain_terciles(gains: &[Vec<f64>]) -> Vec<usize> {
    let n = gains.len();
    let mean = |i: usize| gains[i].iter().sum::<f64>() / gains[i].len() as f64;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mean(b).total_cmp(&mean(a)).then(a.cmp(&b)));
    let mut t = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        t[i] = (rank * 3 / n.max(1)).min(2);
    }
    t
}

/// Independent epsilon-greedy learners, one per SU, with action
/// `(channel, grid level)` and the slot sum rate in Mbit/s as shared reward.
pub fn q_learning_allocate<R: Rng + ?Sized>(
    env: &mut Environment,
    episodes: usize,
    cfg: &QConfig,
    grid: &PowerGrid,
    rng: &mut R,
) -> Result<(Vec<QTable>, Vec<BaselineEpisode>), BaselineError> {
    cfg.validate()?;
    let (n_sus, k_subs) = (env.num_sus(), env.num_subchannels());
    if k_subs > 16 {
        return Err(BaselineError::InvalidParameter(
            "occupancy state supports at most 16 subchannels".into(),
        ));
    }
    let num_states = (1usize << k_subs) * 3;
    let num_actions = k_subs * grid.len();
    let mut tables = vec![QTable::new(num_states, num_actions, cfg.initial_value); n_sus];
    let mut trace = Vec::with_capacity(episodes);
    let slots = env.params.episode_length;
    for e in 0..episodes {
        env.begin_episode()?;
        let eps = cfg.epsilon(e, episodes);
        let terciles = gain_terciles(&env.gains);
        let mut pending: Option<(Vec<usize>, Vec<usize>, f64)> = None;
        let mut total = 0.0;
        for _ in 0..slots {
            env.begin_slot();
            let states: Vec<usize> =
                (0..n_sus).map(|n| su_state(&env.pu.occupancy, terciles[n])).collect();
            if let Some((s, a, r)) = pending.take() {
                for n in 0..n_sus {
                    tables[n].update(s[n], a[n], r, states[n], cfg.alpha, cfg.gamma);
                }
            }
            let actions: Vec<usize> =
                (0..n_sus).map(|n| tables[n].epsilon_greedy(states[n], eps, rng)).collect();
            let mut req = vec![vec![0.0; k_subs]; n_sus];
            for (n, &a) in actions.iter().enumerate() {
                req[n][a / grid.len()] = grid.levels()[a % grid.len()];
            }
            cap_multiplexing(&mut req, &env.gains, env.params.max_users);
            let alloc = env.project(&req)?;
            let rate = env.effective_rates(&alloc).sum_rate;
            total += rate;
            pending = Some((states, actions, rate / 1e6));
        }
        if let Some((s, a, r)) = pending.take() {
            for n in 0..n_sus {
                tables[n].update(s[n], a[n], r, s[n], cfg.alpha, cfg.gamma);
            }
        }
        trace.push(BaselineEpisode {
            sum_rate: total / slots.max(1) as f64,
        });
    }
    Ok((tables, trace))
}

/// Runs a fixed allocator every episode and records its mean slot rate.
pub fn run_fixed<R, F>(
    env: &mut Environment,
    episodes: usize,
    rng: &mut R,
    mut allocate: F,
) -> Result<Vec<BaselineEpisode>, BaselineError>
where
    R: Rng + ?Sized,
    F: FnMut(&Environment, &mut R) -> Result<Allocation, BaselineError>,
{
    let slots = env.params.episode_length;
    let mut trace = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        env.begin_episode()?;
        let mut total = 0.0;
        for _ in 0..slots {
            env.begin_slot();
            let alloc = allocate(env, rng)?;
            total += env.effective_rates(&alloc).sum_rate;
        }
        trace.push(BaselineEpisode {
            sum_rate: total / slots.max(1) as f64,
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SystemParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env(seed: u64) -> Environment {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut env = Environment::new(SystemParams::default(), &mut rng).unwrap();
        env.begin_episode().unwrap();
        env.begin_slot();
        env
    }

    fn tiny(gains: Vec<Vec<f64>>, max_users: usize) -> Environment {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = SystemParams {
            num_subchannels: gains[0].len(),
            num_sus: gains.len(),
            max_users,
            pu_channels: vec![],
            ..SystemParams::default()
        };
        Environment::with_fixed_gains(params, gains, &mut rng).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(PowerGrid::new(vec![5.0, 10.0], 20.0).is_ok());
        assert!(PowerGrid::new(vec![10.0, 5.0], 20.0).is_err());
        assert!(PowerGrid::new(vec![0.0, 5.0], 20.0).is_err());
        assert!(PowerGrid::new(vec![25.0], 20.0).is_err());
        assert_eq!(PowerGrid::uniform(20.0, 4).unwrap().levels(), &[5.0, 10.0, 15.0, 20.0]);
    }

    #[test]
    fn oma_uses_each_free_channel_once() {
        let e = env(1);
        let grid = PowerGrid::uniform(20.0, 4).unwrap();
        let a = oma_allocate(&e, &grid).unwrap();
        let active: usize = a.membership.iter().map(Vec::len).sum();
        assert_eq!(active, 3);
        assert!(a.membership.iter().all(|m| m.len() <= 1));
        assert!(a.membership[..3].iter().all(Vec::is_empty));
        assert!(e.check(&a).is_feasible());
    }

    #[test]
    fn greedy_is_feasible_and_respects_cap() {
        for seed in 0..20 {
            let e = env(seed);
            let a = greedy_allocate(&e, 5).unwrap();
            assert!(e.check(&a).is_feasible());
            assert!(a.membership.iter().all(|m| m.len() <= 5));
            let active: usize = a.membership.iter().map(Vec::len).sum();
            assert!(active <= 15);
            let m1 = e.effective_rates(&greedy_allocate(&e, 1).unwrap()).sum_rate;
            assert!(e.effective_rates(&a).sum_rate >= m1);
        }
    }

    #[test]
    fn random_allocations_are_feasible() {
        let e = env(2);
        let grid = PowerGrid::uniform(20.0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let a = random_allocate(&e, &grid, &mut rng).unwrap();
            assert!(e.check(&a).is_feasible());
        }
    }

    #[test]
    fn oracle_two_users_one_channel_both_full_power() {
        let e = tiny(vec![vec![3.0], vec![1.0]], 2);
        let grid = PowerGrid::new(vec![20.0], 20.0).unwrap();
        let sol = exhaustive_oracle(&e, &grid).unwrap();
        assert_eq!(sol.evaluated, 4);
        assert_eq!(sol.allocation.powers, vec![vec![20.0], vec![20.0]]);
        let eta = e.subchannels[0].noise_power;
        let b = e.subchannels[0].bandwidth;
        let expected = b * (1.0 + 80.0 / eta).log2();
        assert!((sol.sum_rate - expected).abs() / expected < 1e-12);
    }

    #[test]
    fn oracle_single_user_picks_best_channel() {
        let e = tiny(vec![vec![1.0, 2.5, 2.0]], 1);
        let grid = PowerGrid::uniform(20.0, 4).unwrap();
        let sol = exhaustive_oracle(&e, &grid).unwrap();
        assert_eq!(sol.allocation.powers, vec![vec![0.0, 20.0, 0.0]]);
    }

    #[test]
    fn oracle_refuses_large_instances() {
        let e = env(3);
        let grid = PowerGrid::uniform(20.0, 4).unwrap();
        assert!(matches!(
            exhaustive_oracle(&e, &grid),
            Err(BaselineError::TooLarge { .. })
        ));
    }

    #[test]
    fn oracle_dominates_random() {
        let grid = PowerGrid::uniform(20.0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let gains: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..2).map(|_| rng.random_range(0.5..50.0)).collect())
                .collect();
            let e = tiny(gains, 2);
            let sol = exhaustive_oracle(&e, &grid).unwrap();
            let r = random_allocate(&e, &grid, &mut rng).unwrap();
            assert!(sol.sum_rate >= e.effective_rates(&r).sum_rate);
            assert!(e.check(&sol.allocation).is_feasible());
        }
    }

    struct Bandit;
    impl TabularEnv for Bandit {
        fn num_states(&self) -> usize {
            1
        }
        fn num_actions(&self) -> usize {
            2
        }
        fn reset(&mut self) -> usize {
            0
        }
        fn step(&mut self, a: usize) -> (f64, usize) {
            (if a == 0 { 1.0 } else { 0.0 }, 0)
        }
    }

    #[test]
    fn bandit_greedy_action_is_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = q_learning(&mut Bandit, 200, 20, &QConfig::default(), &mut rng).unwrap();
        assert_eq!(q.best_action(0), 0);
    }

    #[test]
    fn zero_epsilon_exploits_initial_values() {
        let cfg = QConfig {
            epsilon_start: 1e-12,
            epsilon_end: 0.0,
            initial_value: 100.0,
            ..QConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = q_learning(&mut Bandit, 1, 1, &cfg, &mut rng).unwrap();
        assert!(q.get(0, 0) < 100.0);
        assert_eq!(q.get(0, 1), 100.0);
    }

    #[test]
    fn q_learning_allocator_runs_and_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut e = Environment::new(SystemParams::default(), &mut rng).unwrap();
        let grid = PowerGrid::uniform(20.0, 4).unwrap();
        let (tables, trace) =
            q_learning_allocate(&mut e, 3, &QConfig::default(), &grid, &mut rng).unwrap();
        assert_eq!(trace.len(), 3);
        assert_eq!(tables.len(), 20);
        assert!(trace.iter().all(|t| t.sum_rate.is_finite() && t.sum_rate >= 0.0));
    }
}
