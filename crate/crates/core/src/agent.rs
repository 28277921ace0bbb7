//! Active inference agent: offline perception from preferred allocations,
//! PU-aware channel sampling, abnormality-driven policy updates and
//! continuous power adjustment from generalized errors.

use nalgebra::Vector2;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{exhaustive_oracle, greedy_allocate, preferred_ladder, BaselineError, PowerGrid};
use crate::gdbn::{
    learn_vocabularies, segment_of, EntityModel, GdbnError, LearnConfig, LearnedModels,
    SignalTrace,
};
use crate::gdbn::Entity;
use crate::mjpf::{anchor_to_clusters, belief_update, init_belief, BeliefState, Combiner, MjpfError};
use crate::noma_phy::Allocation;
use crate::radio_env::PuActivityModel;
use crate::sim::{Environment, SimError, SystemParams};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Gdbn(#[from] GdbnError),
    #[error(transparent)]
    Mjpf(#[from] MjpfError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("invalid agent parameter: {0}")]
    InvalidParameter(String),
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    /// Power every SU requests before any adjustment.
    pub initial_power: f64,
    /// Policy step size of the first episode; episode `e` uses `step / e`.
    pub step: f64,
    pub temperature: f64,
    /// Channels whose forecast occupancy reaches this level are skipped.
    pub pu_threshold: f64,
    pub particles: usize,
    pub combiner: Combiner,
    /// Restart each particle's continuous estimate from its cluster
    /// prototype every slot, so predictions come from the learned model.
    pub anchored: bool,
    /// Rate of the running average of slot abnormality that actions are
    /// judged against.
    pub baseline_rate: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            initial_power: 5.0,
            step: 0.5,
            temperature: 1.0,
            pu_threshold: 0.5,
            particles: 32,
            combiner: Combiner::Sum,
            anchored: true,
            baseline_rate: 0.1,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self, p_max: f64) -> Result<(), AgentError> {
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err(AgentError::InvalidParameter(format!("step {} not in (0, 1]", self.step)));
        }
        if !(self.temperature > 0.0) {
            return Err(AgentError::InvalidParameter("temperature must be positive".into()));
        }
        if !(0.0..=p_max).contains(&self.initial_power) {
            return Err(AgentError::InvalidParameter(format!(
                "initial power {} outside [0, {p_max}]",
                self.initial_power
            )));
        }
        if !(self.baseline_rate > 0.0 && self.baseline_rate <= 1.0) {
            return Err(AgentError::InvalidParameter(format!(
                "baseline rate {} not in (0, 1]",
                self.baseline_rate
            )));
        }
        if self.particles == 0 {
            return Err(AgentError::InvalidParameter("particles must be positive".into()));
        }
        Ok(())
    }
}

/// Per-SU discrete and continuous action sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub num_subchannels: usize,
    pub num_sus: usize,
    pub p_max: f64,
}

impl ActionSpace {
    pub fn clamp_power(&self, p: f64) -> f64 {
        p.clamp(0.0, self.p_max)
    }
}

/// Channel probabilities and power offsets, both indexed `[tau][n][k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTables {
    pub channel: Vec<Vec<Vec<f64>>>,
    pub power_offset: Vec<Vec<Vec<f64>>>,
    pub base_power: f64,
}

/// Uniform channel rows and zero offsets, so every request starts at
/// `base_power`.
pub fn init_policy(k: usize, n: usize, segments: usize, base_power: f64) -> PolicyTables {
    let segments = segments.max(1);
    PolicyTables {
        channel: vec![vec![vec![1.0 / k as f64; k]; n]; segments],
        power_offset: vec![vec![vec![0.0; k]; n]; segments],
        base_power,
    }
}

impl PolicyTables {
    pub fn segments(&self) -> usize {
        self.channel.len()
    }

    pub fn power(&self, tau: usize, n: usize, k: usize, space: &ActionSpace) -> f64 {
        space.clamp_power(self.base_power + self.power_offset[tau][n][k])
    }
}

/// Generalized action error `lambda - pi`.
pub fn action_error(pi: &[f64], lambda: &[f64]) -> Vec<f64> {
    pi.iter().zip(lambda).map(|(p, l)| l - p).collect()
}

/// Moves a probability row along `error` and renormalizes it.
pub fn update_row(row: &mut [f64], error: &[f64], step: f64) {
    for (p, e) in row.iter_mut().zip(error) {
        *p = (*p + step * e).max(0.0);
    }
    let total: f64 = row.iter().sum();
    if total > 0.0 {
        row.iter_mut().for_each(|p| *p /= total);
    } else {
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|p| *p = u);
    }
}

/// Moves a power offset against its generalized error and keeps the
/// resulting power inside `[0, p_max]`.
pub fn update_power(tables: &mut PolicyTables, tau: usize, n: usize, k: usize, ge: f64, step: f64, space: &ActionSpace) {
    let lo = -tables.base_power;
    let hi = space.p_max - tables.base_power;
    let o = &mut tables.power_offset[tau][n][k];
    *o = (*o - step * ge * space.p_max).clamp(lo, hi);
}

/// Relative drop of a slot's total abnormality below the running baseline,
/// floored at zero. Zero until a baseline exists.
pub fn relative_improvement(baseline: Option<f64>, slot_total: f64) -> f64 {
    match baseline {
        Some(b) if b > 0.0 => ((b - slot_total) / b).max(0.0),
        _ => 0.0,
    }
}

/// Action posterior `lambda ∝ pi ⊙ exp(score / temperature)`, where only the
/// taken action `chosen` scores, by `gain`. A zero gain leaves `lambda = pi`.
pub fn diagnostic_action(pi: &[f64], chosen: usize, gain: f64, temperature: f64) -> Vec<f64> {
    let boost = (gain.max(0.0) / temperature).exp();
    let w: Vec<f64> = pi
        .iter()
        .enumerate()
        .map(|(j, &p)| if j == chosen { p * boost } else { p })
        .collect();
    let total: f64 = w.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        let mut one_hot = vec![0.0; pi.len()];
        one_hot[chosen] = 1.0;
        return one_hot;
    }
    w.into_iter().map(|x| x / total).collect()
}

/// Learned perception used online.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptionModel {
    pub models: LearnedModels,
    /// Per-channel PU transition `[from][to]`, state 1 busy.
    pub pu_transitions: Vec<[[f64; 2]; 2]>,
}

/// Allocator that produces the preferred observations offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Preferred {
    Greedy,
    Oracle(PowerGrid),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub episodes: usize,
    pub learn: LearnConfig,
    pub preferred: Preferred,
}

fn runs(labels: &[bool], samples: &[Complex64]) -> Vec<(bool, Vec<Complex64>)> {
    let mut out: Vec<(bool, Vec<Complex64>)> = Vec::new();
    for (&l, &z) in labels.iter().zip(samples) {
        match out.last_mut() {
            Some((last, run)) if *last == l => run.push(z),
            _ => out.push((l, vec![z])),
        }
    }
    out
}

struct Collector {
    traces: Vec<SignalTrace>,
    pu_counts: Vec<[[f64; 2]; 2]>,
}

impl Collector {
    fn new(k: usize) -> Self {
        Self {
            traces: Vec::new(),
            pu_counts: vec![[[1.0; 2]; 2]; k],
        }
    }

    fn episode(&mut self, env: &mut Environment, preferred: &Preferred) -> Result<(), AgentError> {
        env.begin_episode()?;
        let (k_subs, slots) = (env.num_subchannels(), env.params.episode_length);
        let mut sensing = vec![Vec::with_capacity(slots); k_subs];
        let mut pilots = vec![Vec::with_capacity(slots); k_subs];
        let mut busy = vec![Vec::with_capacity(slots); k_subs];
        let mut alloc: Option<Allocation> = None;
        for _ in 0..slots {
            let s = env.begin_slot();
            let changed = alloc.is_none()
                || (0..k_subs).any(|k| busy[k].last() != Some(&env.pu.occupancy[k]));
            if changed {
                alloc = Some(match preferred {
                    Preferred::Greedy => greedy_allocate(env, env.params.max_users)?,
                    Preferred::Oracle(grid) => exhaustive_oracle(env, grid)?.allocation,
                });
            }
            let a = alloc.as_ref().unwrap();
            let out = env.transmit(a);
            for k in 0..k_subs {
                sensing[k].push(s[k]);
                pilots[k].push(out.pilots[k]);
                busy[k].push(env.pu.occupancy[k]);
            }
        }
        for k in 0..k_subs {
            for w in busy[k].windows(2) {
                self.pu_counts[k][usize::from(w[0])][usize::from(w[1])] += 1.0;
            }
            for (b, run) in runs(&busy[k], &sensing[k]) {
                self.traces.push(SignalTrace {
                    entity: if b { Entity::Pu } else { Entity::Noise },
                    subchannel: k,
                    samples: run,
                });
            }
            for (b, run) in runs(&busy[k], &pilots[k]) {
                if !b {
                    self.traces.push(SignalTrace {
                        entity: Entity::Combined,
                        subchannel: k,
                        samples: run,
                    });
                }
            }
        }
        Ok(())
    }

    fn finish<R: Rng + ?Sized>(
        mut self,
        env: &Environment,
        learn: &LearnConfig,
        rng: &mut R,
    ) -> Result<PerceptionModel, AgentError> {
        if !self.traces.iter().any(|t| t.entity == Entity::Pu) {
            // Scenarios without primary users still need a PU signature.
            let slots = env.params.episode_length.max(2);
            let mut probe = env.clone();
            let all: Vec<usize> = (0..env.num_subchannels()).collect();
            probe.pu = PuActivityModel::static_occupancy(env.num_subchannels(), &all)
                .map_err(SimError::from)?;
            let mut samples = vec![Vec::new(); env.num_subchannels()];
            for _ in 0..slots {
                for (k, z) in probe.begin_slot().into_iter().enumerate() {
                    samples[k].push(z);
                }
            }
            for (k, s) in samples.into_iter().enumerate() {
                self.traces.push(SignalTrace {
                    entity: Entity::Pu,
                    subchannel: k,
                    samples: s,
                });
            }
        }
        let cfg = LearnConfig {
            num_subchannels: env.num_subchannels(),
            ..*learn
        };
        let models = learn_vocabularies(&self.traces, &cfg, rng)?;
        let pu_transitions = self
            .pu_counts
            .iter()
            .map(|c| {
                let row = |r: [f64; 2]| {
                    let t = r[0] + r[1];
                    [r[0] / t, r[1] / t]
                };
                [row(c[0]), row(c[1])]
            })
            .collect();
        Ok(PerceptionModel {
            models,
            pu_transitions,
        })
    }
}

/// Offline perception over freshly drawn scenarios, one per episode.
pub fn train_perception<R: Rng + ?Sized>(
    params: &SystemParams,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<PerceptionModel, AgentError> {
    let mut collector = Collector::new(params.num_subchannels);
    let mut last = None;
    for _ in 0..cfg.episodes.max(1) {
        let mut env = Environment::new(params.clone(), rng)?;
        collector.episode(&mut env, &cfg.preferred)?;
        last = Some(env);
    }
    collector.finish(&last.unwrap(), &cfg.learn, rng)
}

/// Offline perception on one given environment.
pub fn train_on_environment<R: Rng + ?Sized>(
    env: &mut Environment,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<PerceptionModel, AgentError> {
    let mut collector = Collector::new(env.num_subchannels());
    for _ in 0..cfg.episodes.max(1) {
        collector.episode(env, &cfg.preferred)?;
    }
    collector.finish(env, &cfg.learn, rng)
}

/// Best observation log-likelihood of `z` under any cluster of `model`.
pub fn observation_loglik(z: &Vector2<f64>, model: &EntityModel) -> f64 {
    let d = &model.dynamics;
    model
        .vocab
        .clusters
        .iter()
        .map(|c| {
            let mean = d.h * c.mean;
            let cov = d.h * c.covariance * d.h.transpose() + d.r;
            let diff = z - mean;
            let det = cov.determinant().max(f64::MIN_POSITIVE);
            let inv = cov.try_inverse().unwrap_or_else(nalgebra::Matrix2::identity);
            -0.5 * (diff.transpose() * inv * diff)[(0, 0)]
                - 0.5 * det.ln()
                - (2.0 * std::f64::consts::PI).ln()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Outcome of action selection for one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Sampled channel per SU after the multiplexing cap.
    pub assignment: Vec<Option<usize>>,
    pub allocation: Allocation,
    pub admissible: Vec<bool>,
    /// No admissible channel existed, every SU stays idle.
    pub all_idle: bool,
}

fn sample_from<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Samples channels from the policy over admissible channels, caps each
/// channel at `max_users` (overflow moves to the next most probable channel
/// with room, else idles), requests the policy powers and projects them onto
/// decodable ladders.
pub fn select_actions<R: Rng + ?Sized>(
    policy: &PolicyTables,
    tau: usize,
    forecast: &[f64],
    threshold: f64,
    env: &Environment,
    rng: &mut R,
) -> Result<Selection, AgentError> {
    let (n_sus, k_subs) = (env.num_sus(), env.num_subchannels());
    let space = ActionSpace {
        num_subchannels: k_subs,
        num_sus: n_sus,
        p_max: env.params.p_max,
    };
    let admissible: Vec<bool> = forecast.iter().map(|&f| f < threshold).collect();
    if !admissible.iter().any(|&a| a) {
        return Ok(Selection {
            assignment: vec![None; n_sus],
            allocation: Allocation::empty(n_sus, k_subs),
            admissible,
            all_idle: true,
        });
    }
    let masked = |n: usize| -> Vec<f64> {
        let row = &policy.channel[tau][n];
        let w: Vec<f64> = (0..k_subs).map(|k| if admissible[k] { row[k] } else { 0.0 }).collect();
        if w.iter().sum::<f64>() > 0.0 {
            w
        } else {
            admissible.iter().map(|&a| f64::from(u8::from(a))).collect()
        }
    };
    let mut assignment: Vec<Option<usize>> =
        (0..n_sus).map(|n| Some(sample_from(&masked(n), rng))).collect();

    let gains = &env.gains;
    let max_users = env.params.max_users;
    let mut load = vec![0usize; k_subs];
    let mut overflow = Vec::new();
    for k in 0..k_subs {
        let mut users: Vec<usize> = (0..n_sus).filter(|&n| assignment[n] == Some(k)).collect();
        users.sort_by(|&a, &b| gains[b][k].total_cmp(&gains[a][k]).then(a.cmp(&b)));
        load[k] = users.len().min(max_users);
        overflow.extend(users.into_iter().skip(max_users));
    }
    let strength = |n: usize| gains[n].iter().copied().fold(0.0, f64::max);
    overflow.sort_by(|&a, &b| strength(b).total_cmp(&strength(a)).then(a.cmp(&b)));
    for n in overflow {
        let w = masked(n);
        let mut options: Vec<usize> = (0..k_subs).filter(|&k| admissible[k] && load[k] < max_users).collect();
        options.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
        assignment[n] = options.first().copied();
        if let Some(k) = assignment[n] {
            load[k] += 1;
        }
    }

    let mut req = vec![vec![0.0; k_subs]; n_sus];
    for (n, a) in assignment.iter().enumerate() {
        if let Some(k) = *a {
            req[n][k] = policy.power(tau, n, k, &space);
        }
    }
    let allocation = env.project(&req)?;
    let report = env.check(&allocation);
    if !report.is_feasible() {
        return Err(SimError::Constraint(report).into());
    }
    Ok(Selection {
        assignment,
        allocation,
        admissible,
        all_idle: false,
    })
}

/// Per-slot record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotTrace {
    pub assignment: Vec<Option<usize>>,
    /// Transmit power per SU after projection.
    pub powers: Vec<f64>,
    /// Combined abnormality per monitored channel.
    pub abnormality: Vec<Option<f64>>,
    pub action_errors: Vec<Option<Vec<f64>>>,
    pub user_rates: Vec<f64>,
    pub sum_rate: f64,
    /// Mean absolute in-phase prediction error over active channels.
    pub inphase_error: f64,
    pub all_idle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    /// One-based episode index.
    pub episode: usize,
    pub slots: Vec<SlotTrace>,
    /// Sum over slots of the mean abnormality of monitored channels.
    pub cum_abnormality: f64,
    /// Mean slot sum rate in bits/s.
    pub mean_sum_rate: f64,
    pub mean_inphase_error: f64,
}

/// Online agent state.
#[derive(Debug, Clone)]
pub struct Agent {
    pub cfg: AgentConfig,
    pub model: PerceptionModel,
    pub policy: PolicyTables,
    beliefs: Vec<BeliefState>,
    baseline: Option<f64>,
    episodes_done: usize,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        model: PerceptionModel,
        cfg: AgentConfig,
        params: &SystemParams,
        rng: &mut R,
    ) -> Result<Self, AgentError> {
        cfg.validate(params.p_max)?;
        if model.models.num_subchannels != params.num_subchannels
            || model.pu_transitions.len() != params.num_subchannels
        {
            return Err(AgentError::ModelMismatch(format!(
                "num_subchannels: model has {}, scenario has {}",
                model.models.num_subchannels, params.num_subchannels
            )));
        }
        let segments = model.models.combined.vocab.segments();
        let policy = init_policy(params.num_subchannels, params.num_sus, segments, cfg.initial_power);
        let beliefs = (0..params.num_subchannels)
            .map(|_| init_belief(&model.models.combined.vocab, cfg.particles, rng))
            .collect();
        Ok(Self {
            cfg,
            model,
            policy,
            beliefs,
            baseline: None,
            episodes_done: 0,
        })
    }

    pub fn episodes_done(&self) -> usize {
        self.episodes_done
    }

    /// Classifies each sensing sample as PU or noise and returns the
    /// forecast occupancy probability of every channel.
    pub fn forecast(&self, sensing: &[Complex64]) -> Vec<f64> {
        sensing
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let z = Vector2::new(s.re, s.im);
                let busy = observation_loglik(&z, &self.model.models.pu)
                    > observation_loglik(&z, &self.model.models.noise);
                self.model.pu_transitions[k][usize::from(busy)][1]
            })
            .collect()
    }

    fn filter<R: Rng + ?Sized>(
        &mut self,
        k: usize,
        tau: usize,
        z: &Vector2<f64>,
        rng: &mut R,
    ) -> Result<(f64, Vector2<f64>), AgentError> {
        let m = &self.model.models.combined;
        let transition = m.vocab.transition(k, tau);
        let prior = if self.cfg.anchored {
            anchor_to_clusters(&self.beliefs[k], &m.vocab)
        } else {
            self.beliefs[k].clone()
        };
        let out = match belief_update(&prior, z, &m.vocab, &m.dynamics, transition, rng) {
            Ok(o) => o,
            Err(MjpfError::ZeroWeights) => {
                let fresh = init_belief(&m.vocab, self.cfg.particles, rng);
                belief_update(&fresh, z, &m.vocab, &m.dynamics, transition, rng)?
            }
            Err(e) => return Err(e.into()),
        };
        self.beliefs[k] = out.belief;
        Ok((self.cfg.combiner.combine(out.continuous, out.discrete), out.predicted_z))
    }

    /// One episode of select, transmit, filter, score and update.
    pub fn run_episode<R: Rng + ?Sized>(
        &mut self,
        env: &mut Environment,
        rng: &mut R,
    ) -> Result<EpisodeTrace, AgentError> {
        env.begin_episode()?;
        self.episodes_done += 1;
        let episode = self.episodes_done;
        let step = self.cfg.step / episode as f64;
        let (n_sus, k_subs) = (env.num_sus(), env.num_subchannels());
        let slots = env.params.episode_length;
        let segments = self.policy.segments();
        let space = ActionSpace {
            num_subchannels: k_subs,
            num_sus: n_sus,
            p_max: env.params.p_max,
        };
        let mut trace = EpisodeTrace {
            episode,
            slots: Vec::with_capacity(slots),
            cum_abnormality: 0.0,
            mean_sum_rate: 0.0,
            mean_inphase_error: 0.0,
        };
        for t in 0..slots {
            let tau = segment_of(t, slots, segments);
            let sensing = env.begin_slot();
            let forecast = self.forecast(&sensing);
            let sel = select_actions(&self.policy, tau, &forecast, self.cfg.pu_threshold, env, rng)?;
            let out = env.transmit(&sel.allocation);

            let mut abnormality = vec![None; k_subs];
            let mut errors = Vec::new();
            for k in 0..k_subs {
                if sel.admissible[k] {
                    let z = Vector2::new(out.pilots[k].re, out.pilots[k].im);
                    let (u, pred) = self.filter(k, tau, &z, rng)?;
                    abnormality[k] = Some(u);
                    if out.active[k] {
                        errors.push((z.x - pred.x).abs());
                    }
                }
            }
            let observed: Vec<f64> = abnormality.iter().flatten().copied().collect();
            let mean_u = if observed.is_empty() {
                0.0
            } else {
                observed.iter().sum::<f64>() / observed.len() as f64
            };

            let slot_total: f64 = observed.iter().sum();
            let gain = relative_improvement(self.baseline, slot_total);
            if !observed.is_empty() {
                self.baseline = Some(match self.baseline {
                    Some(b) => b + self.cfg.baseline_rate * (slot_total - b),
                    None => slot_total,
                });
            }
            let mut action_errors = vec![None; n_sus];
            for n in 0..n_sus {
                let Some(k) = sel.assignment[n] else { continue };
                let lambda = diagnostic_action(&self.policy.channel[tau][n], k, gain, self.cfg.temperature);
                let err = action_error(&self.policy.channel[tau][n], &lambda);
                update_row(&mut self.policy.channel[tau][n], &err, step);
                action_errors[n] = Some(err);
            }
            for (k, members) in sel.allocation.sic_orders.iter().enumerate() {
                if members.is_empty() {
                    continue;
                }
                let preferred = preferred_ladder(env, k, members)?;
                for &n in members {
                    let ge = (sel.allocation.powers[n][k] - preferred[n]) / space.p_max;
                    update_power(&mut self.policy, tau, n, k, ge, step, &space);
                }
            }

            let powers = (0..n_sus)
                .map(|n| sel.allocation.powers[n].iter().sum())
                .collect();
            let user_rates = out.rates.per_user_rates.iter().map(|r| r.iter().sum()).collect();
            let inphase_error = if errors.is_empty() {
                0.0
            } else {
                errors.iter().sum::<f64>() / errors.len() as f64
            };
            trace.cum_abnormality += mean_u;
            trace.mean_sum_rate += out.rates.sum_rate / slots as f64;
            trace.mean_inphase_error += inphase_error / slots as f64;
            trace.slots.push(SlotTrace {
                assignment: sel.assignment,
                powers,
                abnormality,
                action_errors,
                user_rates,
                sum_rate: out.rates.sum_rate,
                inphase_error,
                all_idle: sel.all_idle,
            });
        }
        Ok(trace)
    }
}

/// Cumulative abnormality of holding `alloc` for `slots` slots, scored by a
/// fresh filter on every channel free of primary users.
pub fn fixed_allocation_abnormality<R: Rng + ?Sized>(
    model: &PerceptionModel,
    env: &mut Environment,
    alloc: &Allocation,
    slots: usize,
    cfg: &AgentConfig,
    rng: &mut R,
) -> Result<f64, AgentError> {
    let m = &model.models.combined;
    let k_subs = env.num_subchannels();
    let mut beliefs: Vec<BeliefState> =
        (0..k_subs).map(|_| init_belief(&m.vocab, cfg.particles, rng)).collect();
    let mut total = 0.0;
    for t in 0..slots {
        let tau = segment_of(t, slots, m.vocab.segments());
        env.begin_slot();
        let out = env.transmit(alloc);
        for k in 0..k_subs {
            if env.pu.occupancy[k] {
                continue;
            }
            let z = Vector2::new(out.pilots[k].re, out.pilots[k].im);
            let prior = if cfg.anchored {
                anchor_to_clusters(&beliefs[k], &m.vocab)
            } else {
                beliefs[k].clone()
            };
            let o = belief_update(&prior, &z, &m.vocab, &m.dynamics, m.vocab.transition(k, tau), rng)?;
            total += cfg.combiner.combine(o.continuous, o.discrete);
            beliefs[k] = o.belief;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_policy_is_uniform() {
        let p = init_policy(6, 3, 2, 5.0);
        assert!(p.channel.iter().flatten().flatten().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
        let one = init_policy(1, 2, 1, 5.0);
        assert_eq!(one.channel[0][0], vec![1.0]);
        let space = ActionSpace {
            num_subchannels: 6,
            num_sus: 3,
            p_max: 20.0,
        };
        assert_eq!(p.power(1, 2, 3, &space), 5.0);
    }

    #[test]
    fn action_error_examples() {
        let pi = vec![1.0 / 6.0; 6];
        assert!(action_error(&pi, &pi).iter().all(|&e| e == 0.0));
        let mut lambda = vec![0.0; 6];
        lambda[3] = 1.0;
        let e = action_error(&pi, &lambda);
        assert!((e[3] - 5.0 / 6.0).abs() < 1e-15);
        assert!(e.iter().enumerate().all(|(i, &x)| i == 3 || (x + 1.0 / 6.0).abs() < 1e-15));
        assert!(e.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn repeated_positive_error_concentrates() {
        let mut row = vec![1.0 / 6.0; 6];
        let mut lambda = vec![0.0; 6];
        lambda[3] = 1.0;
        let mut prev = row[3];
        for _ in 0..200 {
            let e = action_error(&row, &lambda);
            update_row(&mut row, &e, 0.1);
            assert!(row[3] > prev);
            prev = row[3];
        }
        assert!(row[3] > 0.999);
        let zero = vec![0.0; 6];
        let before = row.clone();
        update_row(&mut row, &zero, 0.1);
        assert_eq!(row, before);
    }

    #[test]
    fn diagnostic_action_boosts_only_the_taken_action() {
        let pi = vec![0.25; 4];
        assert_eq!(diagnostic_action(&pi, 2, 0.0, 1.0), pi);
        let l = diagnostic_action(&pi, 2, 3.0, 1.0);
        assert!(l[2] > 0.8);
        assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let huge = diagnostic_action(&pi, 1, 1e6, 1.0);
        assert_eq!(huge, vec![0.0, 1.0, 0.0, 0.0]);
    }

    fn default_env(seed: u64) -> (Environment, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut env = Environment::new(SystemParams::default(), &mut rng).unwrap();
        env.begin_episode().unwrap();
        env.begin_slot();
        (env, rng)
    }

    #[test]
    fn pu_channels_are_never_selected() {
        let (env, mut rng) = default_env(1);
        let policy = init_policy(6, 20, 1, 20.0);
        let forecast = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        for _ in 0..200 {
            let s = select_actions(&policy, 0, &forecast, 0.5, &env, &mut rng).unwrap();
            assert!(s.allocation.membership[..3].iter().all(Vec::is_empty));
            let active: usize = s.allocation.membership.iter().map(Vec::len).sum();
            assert!(active <= 15);
            assert_eq!(s.assignment.iter().flatten().count(), 15);
        }
    }

    #[test]
    fn no_admissible_channel_idles_everyone() {
        let (env, mut rng) = default_env(2);
        let policy = init_policy(6, 20, 1, 5.0);
        let s = select_actions(&policy, 0, &[1.0; 6], 0.5, &env, &mut rng).unwrap();
        assert!(s.all_idle);
        assert!(s.assignment.iter().all(Option::is_none));
    }

    #[test]
    fn uniform_policy_samples_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = SystemParams {
            num_sus: 1,
            pu_channels: vec![],
            ..SystemParams::default()
        };
        let mut env = Environment::new(params, &mut rng).unwrap();
        env.begin_episode().unwrap();
        let policy = init_policy(6, 1, 1, 5.0);
        let mut counts = [0usize; 6];
        let draws = 10_000;
        for _ in 0..draws {
            let s = select_actions(&policy, 0, &[0.0; 6], 0.5, &env, &mut rng).unwrap();
            counts[s.assignment[0].unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 1.0 / 6.0).abs() < 0.02);
        }
    }

    fn quick_train(params: &SystemParams, rng: &mut ChaCha8Rng) -> PerceptionModel {
        let cfg = TrainConfig {
            episodes: 6,
            learn: LearnConfig::default(),
            preferred: Preferred::Greedy,
        };
        train_perception(params, &cfg, rng).unwrap()
    }

    #[test]
    fn trained_forecast_flags_pu_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = SystemParams::default();
        let model = quick_train(&params, &mut rng);
        let agent = Agent::new(model, AgentConfig::default(), &params, &mut rng).unwrap();
        let mut env = Environment::new(params, &mut rng).unwrap();
        env.begin_episode().unwrap();
        let f = agent.forecast(&env.begin_slot());
        assert!(f[..3].iter().all(|&x| x >= 0.5));
        assert!(f[3..].iter().all(|&x| x < 0.5));
    }

    #[test]
    fn models_without_primary_users_still_tell_pu_from_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = SystemParams {
            num_subchannels: 2,
            num_sus: 3,
            max_users: 2,
            pu_channels: vec![],
            ..SystemParams::default()
        };
        let model = quick_train(&params, &mut rng);
        let agent = Agent::new(model, AgentConfig::default(), &params, &mut rng).unwrap();
        let mut env = Environment::new(params.clone(), &mut rng).unwrap();
        env.begin_episode().unwrap();
        assert!(agent.forecast(&env.begin_slot()).iter().all(|&x| x < 0.5));
        let pu = Complex64::new(params.pu_power.sqrt() / params.p_max.sqrt(), 0.0);
        assert!(agent.forecast(&[pu, -pu]).iter().all(|&x| x >= 0.5));
    }

    #[test]
    fn relative_improvement_examples() {
        assert_eq!(relative_improvement(None, 3.0), 0.0);
        assert_eq!(relative_improvement(Some(0.0), 3.0), 0.0);
        assert_eq!(relative_improvement(Some(4.0), 1.0), 0.75);
        assert_eq!(relative_improvement(Some(4.0), 5.0), 0.0);
        assert_eq!(relative_improvement(Some(4.0), 0.0), 1.0);
    }

    #[test]
    fn episodes_are_reproducible_and_feasible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let params = SystemParams::default();
            let model = quick_train(&params, &mut rng);
            let mut agent = Agent::new(model, AgentConfig::default(), &params, &mut rng).unwrap();
            let mut env = Environment::new(params, &mut rng).unwrap();
            (0..3)
                .map(|_| agent.run_episode(&mut env, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        for ep in &a {
            assert_eq!(ep.slots.len(), 20);
            for s in &ep.slots {
                assert!(s.assignment.iter().flatten().all(|&k| k >= 3));
                assert!(s.powers.iter().all(|&p| (0.0..=20.0).contains(&p)));
            }
        }
    }
}
