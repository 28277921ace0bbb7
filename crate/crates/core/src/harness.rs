//! Experiment configuration, seeded presets, result files, reports and
//! model persistence.
//!
//! Every run draws from independent ChaCha8 streams of one seed: offline
//! training, the environment, the agent and the baselines each get their own
//! stream, so cells that share a seed also share channel realizations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{train_perception, Agent, AgentConfig, AgentError, EpisodeTrace, PerceptionModel, Preferred, TrainConfig};
use crate::baselines::{
    exhaustive_oracle, greedy_allocate, oracle_size, q_learning_allocate, run_fixed, BaselineError, OracleSolution,
    PowerGrid, QConfig, ORACLE_LIMIT,
};
use crate::gdbn::LearnConfig;
use crate::mjpf::Combiner;
use crate::sim::{Environment, SimError, SystemParams};

pub const TRAIN_STREAM: u64 = 0;
pub const ENV_STREAM: u64 = 1;
pub const AGENT_STREAM: u64 = 2;
pub const BASELINE_STREAM: u64 = 3;

pub const MODEL_FORMAT: &str = "cnuav-model";
pub const MODEL_VERSION: u32 = 1;
pub const MANIFEST_FORMAT: &str = "cnuav-manifest";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILURE_MARKER: &str = "FAILED";
pub const CSV_HEADER: &str = "episode,sum_rate_bps,cum_sum_rate_bps,cum_abnormality,mean_inphase_error,seed";
/// Episodes whose per-slot in-phase errors the error preset records.
pub const INPHASE_EPISODES: [usize; 3] = [1, 10, 30];
/// Trailing window of the final sum rate.
pub const FINAL_WINDOW: usize = 10;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("model document: {0}")]
    ModelFormat(String),
    #[error("model dimension `{dimension}` is {found}, expected {expected}")]
    ModelMismatch {
        dimension: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("result file {path}: {message}")]
    Results { path: PathBuf, message: String },
    #[error("{failed} of {total} cells failed; first error: {first}")]
    Partial { failed: usize, total: usize, first: String },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Errors caused by the user's configuration rather than by a run.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            HarnessError::Config { .. }
                | HarnessError::ModelMismatch { .. }
                | HarnessError::Baseline(BaselineError::TooLarge { .. })
        )
    }

    fn config(key: &str, message: impl Into<String>) -> Self {
        HarnessError::Config {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Independent generator `id` of `seed`.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Experiment presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    /// One agent curve per entry of `m_values`.
    Convergence,
    /// One agent curve at `max_users`.
    CumAbnormality,
    /// One agent curve per entry of `learning_rates`.
    GngLearningRate,
    /// Agent, Q-learning and a reference allocator at `max_users`.
    Baselines,
    /// One agent curve plus per-slot in-phase errors of selected episodes.
    InphaseErrors,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Convergence,
        Preset::CumAbnormality,
        Preset::GngLearningRate,
        Preset::Baselines,
        Preset::InphaseErrors,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Convergence => "fig3_convergence",
            Preset::CumAbnormality => "fig4_cum_abnormality",
            Preset::GngLearningRate => "fig5_gng_lr",
            Preset::Baselines => "fig6_baselines",
            Preset::InphaseErrors => "fig7_inphase_errors",
        }
    }
}

impl FromStr for Preset {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
            HarnessError::config("preset", format!("unknown preset `{s}`, expected one of {}", names.join(", ")))
        })
    }
}

/// Flat experiment configuration. Every key is optional; missing keys take
/// their defaults and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cell_radius: f64,
    pub uav_altitude: f64,
    pub min_uav_su_distance: f64,
    pub num_subchannels: usize,
    pub num_sus: usize,
    pub episode_length: usize,
    pub bandwidth_hz: f64,
    pub noise_psd_dbm_hz: f64,
    pub p_max: f64,
    pub p_th: f64,
    pub delta_y: f64,
    /// SUs per subchannel for single-M presets, `run` and `train`.
    pub max_users: usize,
    pub rho0_db: f64,
    pub rician_k: f64,
    pub mobility_step: f64,
    pub pu_channels: Vec<usize>,
    pub pu_stay_busy: f64,
    pub pu_stay_vacant: f64,
    pub pu_power: f64,

    pub gng_lr: f64,
    /// Offline episodes that generate training traces.
    pub train_episodes: usize,
    /// Time segments of the transition matrices and policy tables.
    pub segments: usize,

    pub initial_power: f64,
    pub step: f64,
    pub temperature: f64,
    pub pu_threshold: f64,
    pub particles: usize,
    pub baseline_rate: f64,
    pub anchored: bool,

    pub power_levels: usize,
    pub q_alpha: f64,
    pub q_gamma: f64,
    pub q_epsilon_start: f64,
    pub q_epsilon_end: f64,

    pub preset: String,
    pub m_values: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s = SystemParams::default();
        let a = AgentConfig::default();
        let q = QConfig::default();
        let l = LearnConfig::default();
        Self {
            cell_radius: s.cell_radius,
            uav_altitude: s.uav_altitude,
            min_uav_su_distance: s.min_uav_su_distance,
            num_subchannels: s.num_subchannels,
            num_sus: s.num_sus,
            episode_length: s.episode_length,
            bandwidth_hz: s.bandwidth_hz,
            noise_psd_dbm_hz: s.noise_psd_dbm_hz,
            p_max: s.p_max,
            p_th: s.p_th,
            delta_y: s.delta_y,
            max_users: s.max_users,
            rho0_db: s.rho0_db,
            rician_k: s.rician_k,
            mobility_step: s.mobility_step,
            pu_channels: s.pu_channels,
            pu_stay_busy: s.pu_stay_busy,
            pu_stay_vacant: s.pu_stay_vacant,
            pu_power: s.pu_power,
            gng_lr: l.gng.lr,
            train_episodes: 30,
            segments: l.segments,
            initial_power: a.initial_power,
            step: a.step,
            temperature: a.temperature,
            pu_threshold: a.pu_threshold,
            particles: a.particles,
            baseline_rate: a.baseline_rate,
            anchored: a.anchored,
            power_levels: 4,
            q_alpha: q.alpha,
            q_gamma: q.gamma,
            q_epsilon_start: q.epsilon_start,
            q_epsilon_end: q.epsilon_end,
            preset: Preset::Convergence.name().to_string(),
            m_values: vec![1, 3, 5, 7],
            learning_rates: vec![0.1, 0.01, 0.001],
            episodes: 100,
            seeds: vec![1],
            output_dir: PathBuf::from("results"),
        }
    }
}

/// Parameters that change what offline training produces.
#[derive(Serialize)]
struct TrainingView<'a> {
    system: &'a SystemParams,
    gng_lr: f64,
    train_episodes: usize,
    segments: usize,
}

impl ExperimentConfig {
    /// Parses a JSON document. Blank input yields the defaults.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.to_string();
            let key = if path.is_empty() || path == "." {
                message
                    .split('`')
                    .nth(1)
                    .filter(|_| message.starts_with("unknown field"))
                    .unwrap_or("<document>")
                    .to_string()
            } else {
                path
            };
            HarnessError::Config { key, message }
        })?;
        de.end().map_err(|e| HarnessError::config("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every documented range; errors name the offending key.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let positive = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(HarnessError::config(key, format!("must be positive and finite, got {v}")))
            }
        };
        let unit = |key: &str, v: f64, open_low: bool| {
            let ok = if open_low { v > 0.0 && v <= 1.0 } else { (0.0..=1.0).contains(&v) };
            if ok {
                Ok(())
            } else {
                let range = if open_low { "(0, 1]" } else { "[0, 1]" };
                Err(HarnessError::config(key, format!("must lie in {range}, got {v}")))
            }
        };
        let at_least_one = |key: &str, v: usize| {
            if v >= 1 {
                Ok(())
            } else {
                Err(HarnessError::config(key, "must be at least 1"))
            }
        };
        positive("cell_radius", self.cell_radius)?;
        positive("uav_altitude", self.uav_altitude)?;
        if !(self.min_uav_su_distance >= 0.0 && self.min_uav_su_distance < self.cell_radius) {
            return Err(HarnessError::config(
                "min_uav_su_distance",
                format!("must lie in [0, cell_radius), got {}", self.min_uav_su_distance),
            ));
        }
        at_least_one("num_subchannels", self.num_subchannels)?;
        at_least_one("num_sus", self.num_sus)?;
        at_least_one("episode_length", self.episode_length)?;
        positive("bandwidth_hz", self.bandwidth_hz)?;
        if !self.noise_psd_dbm_hz.is_finite() {
            return Err(HarnessError::config("noise_psd_dbm_hz", "must be finite"));
        }
        positive("p_max", self.p_max)?;
        positive("p_th", self.p_th)?;
        positive("delta_y", self.delta_y)?;
        at_least_one("max_users", self.max_users)?;
        if !self.rho0_db.is_finite() {
            return Err(HarnessError::config("rho0_db", "must be finite"));
        }
        if !(self.rician_k.is_finite() && self.rician_k >= 0.0) {
            return Err(HarnessError::config("rician_k", "must be non-negative"));
        }
        if !(self.mobility_step.is_finite() && self.mobility_step >= 0.0) {
            return Err(HarnessError::config("mobility_step", "must be non-negative"));
        }
        if let Some(&c) = self.pu_channels.iter().find(|&&c| c >= self.num_subchannels) {
            return Err(HarnessError::config(
                "pu_channels",
                format!("channel {c} outside 0..{}", self.num_subchannels),
            ));
        }
        let mut sorted = self.pu_channels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.pu_channels.len() {
            return Err(HarnessError::config("pu_channels", "channels must be distinct"));
        }
        unit("pu_stay_busy", self.pu_stay_busy, false)?;
        unit("pu_stay_vacant", self.pu_stay_vacant, false)?;
        if !(self.pu_power.is_finite() && self.pu_power >= 0.0) {
            return Err(HarnessError::config("pu_power", "must be non-negative"));
        }
        unit("gng_lr", self.gng_lr, true)?;
        at_least_one("train_episodes", self.train_episodes)?;
        at_least_one("segments", self.segments)?;
        if self.segments > self.episode_length {
            return Err(HarnessError::config("segments", "must not exceed episode_length"));
        }
        if !(0.0..=self.p_max).contains(&self.initial_power) {
            return Err(HarnessError::config(
                "initial_power",
                format!("must lie in [0, p_max], got {}", self.initial_power),
            ));
        }
        unit("step", self.step, true)?;
        positive("temperature", self.temperature)?;
        unit("pu_threshold", self.pu_threshold, true)?;
        at_least_one("particles", self.particles)?;
        unit("baseline_rate", self.baseline_rate, true)?;
        at_least_one("power_levels", self.power_levels)?;
        unit("q_alpha", self.q_alpha, true)?;
        unit("q_gamma", self.q_gamma, true)?;
        unit("q_epsilon_start", self.q_epsilon_start, true)?;
        unit("q_epsilon_end", self.q_epsilon_end, true)?;
        if self.q_epsilon_end > self.q_epsilon_start {
            return Err(HarnessError::config("q_epsilon_end", "must not exceed q_epsilon_start"));
        }
        self.preset.parse::<Preset>()?;
        if self.m_values.is_empty() || self.m_values.contains(&0) {
            return Err(HarnessError::config("m_values", "must be a non-empty list of positive integers"));
        }
        if self.learning_rates.is_empty() || self.learning_rates.iter().any(|&lr| !(lr > 0.0 && lr <= 1.0)) {
            return Err(HarnessError::config("learning_rates", "must be a non-empty list of values in (0, 1]"));
        }
        at_least_one("episodes", self.episodes)?;
        if self.seeds.is_empty() {
            return Err(HarnessError::config("seeds", "must not be empty"));
        }
        Ok(())
    }

    pub fn preset(&self) -> Result<Preset, HarnessError> {
        self.preset.parse()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    /// Identity of the experiment; the output location does not count.
    pub fn hash(&self) -> String {
        let keyed = Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        sha256_hex(&serde_json::to_vec(&keyed).expect("config serializes"))
    }

    /// Scenario parameters with `max_users` SUs per subchannel.
    pub fn system(&self, max_users: usize) -> SystemParams {
        SystemParams {
            cell_radius: self.cell_radius,
            uav_altitude: self.uav_altitude,
            min_uav_su_distance: self.min_uav_su_distance,
            num_subchannels: self.num_subchannels,
            num_sus: self.num_sus,
            episode_length: self.episode_length,
            bandwidth_hz: self.bandwidth_hz,
            noise_psd_dbm_hz: self.noise_psd_dbm_hz,
            p_max: self.p_max,
            p_th: self.p_th,
            delta_y: self.delta_y,
            max_users,
            rho0_db: self.rho0_db,
            rician_k: self.rician_k,
            mobility_step: self.mobility_step,
            pu_channels: self.pu_channels.clone(),
            pu_stay_busy: self.pu_stay_busy,
            pu_stay_vacant: self.pu_stay_vacant,
            pu_power: self.pu_power,
        }
    }

    pub fn learn_config(&self, gng_lr: f64) -> LearnConfig {
        let mut l = LearnConfig {
            segments: self.segments,
            num_subchannels: self.num_subchannels,
            ..LearnConfig::default()
        };
        l.gng.lr = gng_lr;
        l
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            initial_power: self.initial_power,
            step: self.step,
            temperature: self.temperature,
            pu_threshold: self.pu_threshold,
            particles: self.particles,
            combiner: Combiner::Sum,
            anchored: self.anchored,
            baseline_rate: self.baseline_rate,
        }
    }

    pub fn q_config(&self) -> QConfig {
        QConfig {
            alpha: self.q_alpha,
            gamma: self.q_gamma,
            epsilon_start: self.q_epsilon_start,
            epsilon_end: self.q_epsilon_end,
            ..QConfig::default()
        }
    }

    pub fn power_grid(&self) -> Result<PowerGrid, HarnessError> {
        Ok(PowerGrid::uniform(self.p_max, self.power_levels)?)
    }

    /// Hash of the parameters that determine a trained model.
    pub fn training_hash(&self, max_users: usize, gng_lr: f64) -> String {
        let system = self.system(max_users);
        let view = TrainingView {
            system: &system,
            gng_lr,
            train_episodes: self.train_episodes,
            segments: self.segments,
        };
        sha256_hex(&serde_json::to_vec(&view).expect("view serializes"))
    }
}

/// Reads, parses and validates a configuration file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    ExperimentConfig::parse(&text)
}

/// One row of a learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    /// Mean over the episode's slots.
    pub sum_rate_bps: f64,
    /// Running total of `sum_rate_bps` up to this episode.
    pub cum_sum_rate_bps: f64,
    /// Abnormality summed over the episode's slots; absent for baselines.
    pub cum_abnormality: Option<f64>,
    pub mean_inphase_error: Option<f64>,
}

/// One learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<EpisodeRow>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn sum_rates(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.sum_rate_bps).collect()
    }

    /// Per-episode abnormality, if the curve has one.
    pub fn abnormalities(&self) -> Option<Vec<f64>> {
        self.rows.iter().map(|r| r.cum_abnormality).collect()
    }
}

fn rows_from_rates<I: IntoIterator<Item = (f64, Option<f64>, Option<f64>)>>(values: I) -> Vec<EpisodeRow> {
    let mut total = 0.0;
    values
        .into_iter()
        .enumerate()
        .map(|(e, (rate, abn, err))| {
            total += rate;
            EpisodeRow {
                episode: e + 1,
                sum_rate_bps: rate,
                cum_sum_rate_bps: total,
                cum_abnormality: abn,
                mean_inphase_error: err,
            }
        })
        .collect()
}

/// Curve of agent episode traces.
pub fn agent_rows(traces: &[EpisodeTrace]) -> Vec<EpisodeRow> {
    rows_from_rates(
        traces
            .iter()
            .map(|t| (t.mean_sum_rate, Some(t.cum_abnormality), Some(t.mean_inphase_error))),
    )
}

/// Offline perception for `max_users` SUs per channel on the training
/// stream of `seed`.
pub fn train_model(cfg: &ExperimentConfig, max_users: usize, gng_lr: f64, seed: u64) -> Result<PerceptionModel, HarnessError> {
    let train = TrainConfig {
        episodes: cfg.train_episodes,
        learn: cfg.learn_config(gng_lr),
        preferred: Preferred::Greedy,
    };
    Ok(train_perception(&cfg.system(max_users), &train, &mut stream(seed, TRAIN_STREAM))?)
}

/// Online agent episodes on the environment stream of `seed`. Trains a model
/// first unless one is given.
pub fn run_agent(
    cfg: &ExperimentConfig,
    max_users: usize,
    gng_lr: f64,
    seed: u64,
    episodes: usize,
    model: Option<PerceptionModel>,
) -> Result<Vec<EpisodeTrace>, HarnessError> {
    let model = match model {
        Some(m) => m,
        None => train_model(cfg, max_users, gng_lr, seed)?,
    };
    let system = cfg.system(max_users);
    let mut rng = stream(seed, AGENT_STREAM);
    let mut agent = Agent::new(model, cfg.agent_config(), &system, &mut rng)?;
    let mut env = Environment::new(system, &mut stream(seed, ENV_STREAM))?;
    (0..episodes)
        .map(|_| agent.run_episode(&mut env, &mut rng).map_err(HarnessError::from))
        .collect()
}

/// Tabular Q-learning curve on the same channel realizations as the agent.
pub fn run_q_learning(cfg: &ExperimentConfig, max_users: usize, seed: u64, episodes: usize) -> Result<Vec<EpisodeRow>, HarnessError> {
    let mut env = Environment::new(cfg.system(max_users), &mut stream(seed, ENV_STREAM))?;
    let (_, trace) = q_learning_allocate(
        &mut env,
        episodes,
        &cfg.q_config(),
        &cfg.power_grid()?,
        &mut stream(seed, BASELINE_STREAM),
    )?;
    Ok(rows_from_rates(trace.iter().map(|e| (e.sum_rate, None, None))))
}

/// Reference allocator curve: the exhaustive oracle when the instance is
/// small enough, otherwise the greedy full-power ladder. Returns its label
/// with the rows.
pub fn run_reference(
    cfg: &ExperimentConfig,
    max_users: usize,
    seed: u64,
    episodes: usize,
) -> Result<(&'static str, Vec<EpisodeRow>), HarnessError> {
    let mut env = Environment::new(cfg.system(max_users), &mut stream(seed, ENV_STREAM))?;
    let grid = cfg.power_grid()?;
    let mut rng = stream(seed, BASELINE_STREAM);
    let exact = oracle_size(cfg.num_sus, cfg.num_subchannels, grid.len()) <= ORACLE_LIMIT;
    let trace = if exact {
        run_fixed(&mut env, episodes, &mut rng, |e, _| Ok(exhaustive_oracle(e, &grid)?.allocation))?
    } else {
        run_fixed(&mut env, episodes, &mut rng, |e, _| greedy_allocate(e, max_users))?
    };
    let label = if exact { "oracle" } else { "greedy" };
    Ok((label, rows_from_rates(trace.iter().map(|e| (e.sum_rate, None, None)))))
}

/// Exhaustive solution of the first slot of the configured scenario.
pub fn solve_oracle(cfg: &ExperimentConfig, seed: u64) -> Result<OracleSolution, HarnessError> {
    let mut env = Environment::new(cfg.system(cfg.max_users), &mut stream(seed, ENV_STREAM))?;
    let grid = cfg.power_grid()?;
    let size = oracle_size(cfg.num_sus, cfg.num_subchannels, grid.len());
    if size > ORACLE_LIMIT {
        return Err(BaselineError::TooLarge {
            size,
            limit: ORACLE_LIMIT,
        }
        .into());
    }
    env.begin_episode()?;
    env.begin_slot();
    Ok(exhaustive_oracle(&env, &grid)?)
}

#[derive(Debug, Clone, PartialEq)]
enum CellKind {
    Agent { max_users: usize, gng_lr: f64 },
    QLearning { max_users: usize },
    Reference { max_users: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct Cell {
    label: String,
    seed: u64,
    kind: CellKind,
    episodes: usize,
    slot_episodes: Vec<usize>,
}

/// Per-slot in-phase errors of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotSeries {
    pub label: String,
    pub seed: u64,
    pub episode: usize,
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct CellOutput {
    record: RunRecord,
    series: Vec<SlotSeries>,
}

fn lr_label(lr: f64) -> String {
    format!("lr{lr}")
}

fn cells(cfg: &ExperimentConfig, preset: Preset) -> Vec<Cell> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let cell = |label: String, kind: CellKind| Cell {
            label,
            seed,
            kind,
            episodes: cfg.episodes,
            slot_episodes: Vec::new(),
        };
        let m = cfg.max_users;
        let agent = CellKind::Agent {
            max_users: m,
            gng_lr: cfg.gng_lr,
        };
        match preset {
            Preset::Convergence => {
                for &mv in &cfg.m_values {
                    out.push(cell(
                        format!("m{mv}"),
                        CellKind::Agent {
                            max_users: mv,
                            gng_lr: cfg.gng_lr,
                        },
                    ));
                }
            }
            Preset::CumAbnormality => out.push(cell(format!("m{m}"), agent)),
            Preset::GngLearningRate => {
                for &lr in &cfg.learning_rates {
                    out.push(cell(lr_label(lr), CellKind::Agent { max_users: m, gng_lr: lr }));
                }
            }
            Preset::Baselines => {
                out.push(cell("agent".into(), agent));
                out.push(cell("qlearning".into(), CellKind::QLearning { max_users: m }));
                out.push(cell("reference".into(), CellKind::Reference { max_users: m }));
            }
            Preset::InphaseErrors => {
                let mut c = cell(format!("m{m}"), agent);
                c.episodes = cfg.episodes.max(INPHASE_EPISODES[2]);
                c.slot_episodes = INPHASE_EPISODES.to_vec();
                out.push(c);
            }
        }
    }
    out
}

fn run_cell(cfg: &ExperimentConfig, hash: &str, cell: &Cell) -> Result<CellOutput, HarnessError> {
    let start = Instant::now();
    log::info!("cell {} seed {} started", cell.label, cell.seed);
    let mut label = cell.label.clone();
    let mut series = Vec::new();
    let rows = match cell.kind {
        CellKind::Agent { max_users, gng_lr } => {
            let traces = run_agent(cfg, max_users, gng_lr, cell.seed, cell.episodes, None)?;
            for &e in &cell.slot_episodes {
                series.push(SlotSeries {
                    label: format!("episode{e}"),
                    seed: cell.seed,
                    episode: e,
                    errors: traces[e - 1].slots.iter().map(|s| s.inphase_error).collect(),
                });
            }
            agent_rows(&traces)
        }
        CellKind::QLearning { max_users } => run_q_learning(cfg, max_users, cell.seed, cell.episodes)?,
        CellKind::Reference { max_users } => {
            let (name, rows) = run_reference(cfg, max_users, cell.seed, cell.episodes)?;
            label = name.to_string();
            rows
        }
    };
    let secs = start.elapsed().as_secs_f64();
    log::info!("cell {label} seed {} finished in {secs:.2}s", cell.seed);
    Ok(CellOutput {
        record: RunRecord {
            label,
            config_hash: hash.to_string(),
            seed: cell.seed,
            rows,
            wall_clock_secs: secs,
        },
        series,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    episode: usize,
    sum_rate_bps: f64,
    cum_sum_rate_bps: f64,
    cum_abnormality: Option<f64>,
    mean_inphase_error: Option<f64>,
    seed: u64,
}

/// Curve as CSV text with the fixed header.
pub fn curve_csv(record: &RunRecord) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &record.rows {
        w.serialize(CsvRow {
            episode: r.episode,
            sum_rate_bps: r.sum_rate_bps,
            cum_sum_rate_bps: r.cum_sum_rate_bps,
            cum_abnormality: r.cum_abnormality,
            mean_inphase_error: r.mean_inphase_error,
            seed: record.seed,
        })?;
    }
    if record.rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Parses a curve written by [`curve_csv`].
pub fn parse_curve_csv(text: &str, label: &str, config_hash: &str) -> Result<RunRecord, HarnessError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(HarnessError::Results {
            path: PathBuf::from(label),
            message: format!("unexpected header `{}`", header.join(",")),
        });
    }
    let mut rows = Vec::new();
    let mut seed = 0;
    for row in r.deserialize() {
        let row: CsvRow = row?;
        seed = row.seed;
        rows.push(EpisodeRow {
            episode: row.episode,
            sum_rate_bps: row.sum_rate_bps,
            cum_sum_rate_bps: row.cum_sum_rate_bps,
            cum_abnormality: row.cum_abnormality,
            mean_inphase_error: row.mean_inphase_error,
        });
    }
    Ok(RunRecord {
        label: label.to_string(),
        config_hash: config_hash.to_string(),
        seed,
        rows,
        wall_clock_secs: 0.0,
    })
}

fn series_csv(s: &SlotSeries) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["slot", "inphase_error", "episode", "seed"])?;
    for (t, e) in s.errors.iter().enumerate() {
        w.serialize((t + 1, e, s.episode, s.seed))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Manifest entry of one emitted file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    /// `curve`, `slot_series` or `config`.
    pub kind: String,
    pub label: String,
    pub seed: Option<u64>,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub preset: String,
    pub config_hash: String,
    /// `complete` or `failed`.
    pub status: String,
    pub files: Vec<ManifestEntry>,
}

/// Everything one experiment produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub series: Vec<SlotSeries>,
    pub manifest: Manifest,
}

struct OutputDir {
    dir: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl OutputDir {
    fn create(dir: &Path) -> Result<Self, HarnessError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let marker = dir.join(FAILURE_MARKER);
        if marker.exists() {
            fs::remove_file(&marker).map_err(io_err(&marker))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
        })
    }

    fn write(&mut self, file: String, kind: &str, label: &str, seed: Option<u64>, rows: usize, text: &str) -> Result<(), HarnessError> {
        let path = self.dir.join(&file);
        fs::write(&path, text).map_err(io_err(&path))?;
        self.entries.push(ManifestEntry {
            file,
            kind: kind.to_string(),
            label: label.to_string(),
            seed,
            rows,
            sha256: sha256_hex(text.as_bytes()),
        });
        Ok(())
    }

    fn finish(self, preset: &str, hash: &str, failures: &[String]) -> Result<Manifest, HarnessError> {
        let manifest = Manifest {
            format: MANIFEST_FORMAT.to_string(),
            version: 1,
            preset: preset.to_string(),
            config_hash: hash.to_string(),
            status: if failures.is_empty() { "complete" } else { "failed" }.to_string(),
            files: self.entries,
        };
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(io_err(&path))?;
        if !failures.is_empty() {
            let marker = self.dir.join(FAILURE_MARKER);
            fs::write(&marker, failures.join("\n") + "\n").map_err(io_err(&marker))?;
        }
        Ok(manifest)
    }
}

fn emit(
    cfg: &ExperimentConfig,
    preset: &str,
    results: Vec<(Cell, Result<CellOutput, HarnessError>)>,
) -> Result<ExperimentOutput, HarnessError> {
    let hash = cfg.hash();
    let mut out = OutputDir::create(&cfg.output_dir)?;
    out.write("config.json".into(), "config", "config", None, 0, &(cfg.to_json() + "\n"))?;
    let (mut records, mut series, mut failures) = (Vec::new(), Vec::new(), Vec::new());
    for (cell, result) in results {
        match result {
            Ok(o) => {
                let r = &o.record;
                let file = format!("{preset}_{}_seed{}.csv", r.label, r.seed);
                out.write(file, "curve", &r.label, Some(r.seed), r.rows.len(), &curve_csv(r)?)?;
                for s in &o.series {
                    let file = format!("{preset}_{}_{}_seed{}.csv", r.label, s.label, s.seed);
                    out.write(file, "slot_series", &s.label, Some(s.seed), s.errors.len(), &series_csv(s)?)?;
                }
                records.push(o.record);
                series.extend(o.series);
            }
            Err(e) => {
                log::error!("cell {} seed {} failed: {e}", cell.label, cell.seed);
                failures.push(format!("{} seed {}: {e}", cell.label, cell.seed));
            }
        }
    }
    let manifest = out.finish(preset, &hash, &failures)?;
    if let Some(first) = failures.first() {
        return Err(HarnessError::Partial {
            failed: failures.len(),
            total: failures.len() + records.len(),
            first: first.clone(),
        });
    }
    Ok(ExperimentOutput {
        records,
        series,
        manifest,
    })
}

/// Runs the configured preset, one parallel job per cell, and writes one CSV
/// per curve plus a manifest into `output_dir`. Failed cells leave the
/// successful ones on disk next to a failure marker.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    cfg.validate()?;
    let preset = cfg.preset()?;
    let hash = cfg.hash();
    let jobs = cells(cfg, preset);
    let results: Vec<_> = jobs
        .into_par_iter()
        .map(|c| {
            let r = run_cell(cfg, &hash, &c);
            (c, r)
        })
        .collect();
    emit(cfg, preset.name(), results)
}

/// Agent episodes at `max_users` for one seed, written like a preset cell.
pub fn run_single(cfg: &ExperimentConfig, seed: u64, model: Option<PerceptionModel>) -> Result<ExperimentOutput, HarnessError> {
    cfg.validate()?;
    let cell = Cell {
        label: format!("m{}", cfg.max_users),
        seed,
        kind: CellKind::Agent {
            max_users: cfg.max_users,
            gng_lr: cfg.gng_lr,
        },
        episodes: cfg.episodes,
        slot_episodes: Vec::new(),
    };
    let start = Instant::now();
    let result = run_agent(cfg, cfg.max_users, cfg.gng_lr, seed, cfg.episodes, model).map(|traces| CellOutput {
        record: RunRecord {
            label: cell.label.clone(),
            config_hash: cfg.hash(),
            seed,
            rows: agent_rows(&traces),
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
        series: Vec::new(),
    });
    emit(cfg, "run", vec![(cell, result)])
}

/// Reads every curve listed in the manifest of `dir`, verifying hashes.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(HarnessError::Results {
            path,
            message: format!("not a manifest: format `{}`", manifest.format),
        });
    }
    let mut records = Vec::new();
    for e in manifest.files.iter().filter(|e| e.kind == "curve") {
        let p = dir.join(&e.file);
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        if sha256_hex(text.as_bytes()) != e.sha256 {
            return Err(HarnessError::Results {
                path: p,
                message: "content hash differs from manifest".into(),
            });
        }
        records.push(parse_curve_csv(&text, &e.label, &manifest.config_hash)?);
    }
    Ok(records)
}

/// Mean of the last `window` values (all values if fewer).
pub fn final_mean(values: &[f64], window: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(window.max(1))..];
    if tail.is_empty() {
        0.0
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// First episode (1-based) whose value reaches `fraction` of the final mean.
pub fn episodes_to_fraction(values: &[f64], fraction: f64, window: usize) -> Option<usize> {
    let target = fraction * final_mean(values, window);
    values.iter().position(|&v| v >= target).map(|i| i + 1)
}

/// First episode (1-based) at which the trailing `smoothing`-episode mean of
/// `values` enters the band `floor + band * (peak - floor)`, where floor and
/// peak are the minimum and maximum of that smoothed curve.
pub fn episodes_to_floor(values: &[f64], smoothing: usize, band: f64) -> Option<usize> {
    let w = smoothing.max(1);
    let smooth: Vec<f64> = (0..values.len())
        .map(|e| {
            let lo = (e + 1).saturating_sub(w);
            values[lo..=e].iter().sum::<f64>() / (e + 1 - lo) as f64
        })
        .collect();
    let floor = smooth.iter().copied().fold(f64::INFINITY, f64::min);
    let peak = smooth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    smooth.iter().position(|&s| s <= floor + band * (peak - floor)).map(|i| i + 1)
}

/// Trailing window of the abnormality floor detection.
pub const FLOOR_SMOOTHING: usize = 5;
/// Relative band above the floor that counts as reached.
pub const FLOOR_BAND: f64 = 0.1;

/// Summary of one curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub seed: u64,
    pub episodes: usize,
    pub final_sum_rate_bps: f64,
    pub episodes_to_95: Option<usize>,
    pub total_abnormality: Option<f64>,
    pub episodes_to_floor: Option<usize>,
}

pub fn summarize(record: &RunRecord) -> SummaryRow {
    let rates = record.sum_rates();
    let abn = record.abnormalities();
    SummaryRow {
        label: record.label.clone(),
        seed: record.seed,
        episodes: record.rows.len(),
        final_sum_rate_bps: final_mean(&rates, FINAL_WINDOW),
        episodes_to_95: episodes_to_fraction(&rates, 0.95, FINAL_WINDOW),
        total_abnormality: abn.as_ref().map(|a| a.iter().sum()),
        episodes_to_floor: abn.as_ref().and_then(|a| episodes_to_floor(a, FLOOR_SMOOTHING, FLOOR_BAND)),
    }
}

/// Summary as CSV and as an aligned text table.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<SummaryRow>,
    pub csv: String,
    pub table: String,
}

/// One summary row per record, in record order.
pub fn emit_report(records: &[RunRecord]) -> Result<Report, HarnessError> {
    let rows: Vec<SummaryRow> = records.iter().map(summarize).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "label",
            "seed",
            "episodes",
            "final_sum_rate_bps",
            "episodes_to_95",
            "total_abnormality",
            "episodes_to_floor",
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Csv(e.into_error().into()))?;
    let csv = String::from_utf8(bytes).expect("csv output is utf-8");
    let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    let mut table = format!(
        "{:<14} {:>6} {:>8} {:>16} {:>8} {:>14} {:>8}\n",
        "label", "seed", "episodes", "final_bps", "to_95%", "abnormality", "to_floor"
    );
    for r in &rows {
        let _ = writeln!(
            table,
            "{:<14} {:>6} {:>8} {:>16.6e} {:>8} {:>14} {:>8}",
            r.label,
            r.seed,
            r.episodes,
            r.final_sum_rate_bps,
            opt(r.episodes_to_95.map(|e| e.to_string())),
            opt(r.total_abnormality.map(|a| format!("{a:.3}"))),
            opt(r.episodes_to_floor.map(|e| e.to_string())),
        );
    }
    Ok(Report { rows, csv, table })
}

/// Stored form of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub version: u32,
    /// Hash of the parameters the model was trained with.
    pub config_hash: String,
    pub gng_lr: f64,
    pub num_subchannels: usize,
    pub max_users: usize,
    pub seed: u64,
    pub model: PerceptionModel,
    /// SHA-256 of the compact JSON form of `model`.
    pub checksum: String,
}

pub fn model_checksum(model: &PerceptionModel) -> Result<String, HarnessError> {
    Ok(sha256_hex(&serde_json::to_vec(model)?))
}

pub fn save_model(
    model: &PerceptionModel,
    cfg: &ExperimentConfig,
    max_users: usize,
    seed: u64,
    path: &Path,
) -> Result<ModelDocument, HarnessError> {
    let doc = ModelDocument {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        config_hash: cfg.training_hash(max_users, model.models.gng_lr),
        gng_lr: model.models.gng_lr,
        num_subchannels: model.models.num_subchannels,
        max_users,
        seed,
        model: model.clone(),
        checksum: model_checksum(model)?,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, serde_json::to_string(&doc)?).map_err(io_err(path))?;
    Ok(doc)
}

/// Loads a model document and checks it against `cfg`. A differing training
/// hash is only logged; differing dimensions are errors.
pub fn load_model(path: &Path, cfg: &ExperimentConfig) -> Result<ModelDocument, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let doc: ModelDocument =
        serde_json::from_str(&text).map_err(|e| HarnessError::ModelFormat(format!("corrupted document: {e}")))?;
    if doc.format != MODEL_FORMAT {
        return Err(HarnessError::ModelFormat(format!("unknown format `{}`", doc.format)));
    }
    if doc.version != MODEL_VERSION {
        return Err(HarnessError::ModelFormat(format!(
            "version {} is not supported (expected {MODEL_VERSION})",
            doc.version
        )));
    }
    if model_checksum(&doc.model)? != doc.checksum {
        return Err(HarnessError::ModelFormat("corrupted document: checksum mismatch".into()));
    }
    let dims = [
        ("num_subchannels", cfg.num_subchannels, doc.num_subchannels),
        ("num_subchannels", cfg.num_subchannels, doc.model.models.num_subchannels),
        ("num_subchannels", cfg.num_subchannels, doc.model.pu_transitions.len()),
        ("segments", cfg.segments, doc.model.models.combined.vocab.segments()),
    ];
    for (dimension, expected, found) in dims {
        if expected != found {
            return Err(HarnessError::ModelMismatch {
                dimension,
                expected,
                found,
            });
        }
    }
    if doc.config_hash != cfg.training_hash(doc.max_users, doc.gng_lr) {
        log::warn!("model {} was trained with different scenario parameters", path.display());
    }
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_examples() {
        assert_eq!(final_mean(&[1.0, 2.0, 3.0, 5.0], 2), 4.0);
        assert_eq!(final_mean(&[2.0], 10), 2.0);
        assert_eq!(episodes_to_fraction(&[1.0, 9.6, 10.0, 10.0], 0.95, 2), Some(2));
        assert_eq!(episodes_to_floor(&[10.0, 10.0, 0.0, 0.0], 1, 0.1), Some(3));
        assert_eq!(episodes_to_floor(&[4.0, 2.0, 0.0, 0.0, 0.0], 2, 0.0), Some(4));
    }

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("fig9".parse::<Preset>().unwrap_err().is_config_error());
    }

    #[test]
    fn cells_follow_presets() {
        let cfg = ExperimentConfig {
            seeds: vec![1, 2],
            ..ExperimentConfig::default()
        };
        assert_eq!(cells(&cfg, Preset::Convergence).len(), 8);
        assert_eq!(cells(&cfg, Preset::GngLearningRate).len(), 6);
        assert_eq!(cells(&cfg, Preset::Baselines).len(), 6);
        let fig7 = cells(&cfg, Preset::InphaseErrors);
        assert_eq!(fig7[0].slot_episodes, vec![1, 10, 30]);
    }

    #[test]
    fn failed_cells_leave_a_marker_next_to_the_good_ones() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            output_dir: dir.path().to_path_buf(),
            ..ExperimentConfig::default()
        };
        let jobs = cells(&cfg, Preset::Baselines);
        let good = CellOutput {
            record: RunRecord {
                label: "agent".into(),
                config_hash: cfg.hash(),
                seed: 1,
                rows: rows_from_rates([(1.0, Some(2.0), Some(0.5))]),
                wall_clock_secs: 0.0,
            },
            series: Vec::new(),
        };
        let results = vec![
            (jobs[0].clone(), Ok(good)),
            (jobs[1].clone(), Err(HarnessError::config("episodes", "boom"))),
        ];
        let err = emit(&cfg, "fig6_baselines", results).unwrap_err();
        assert!(matches!(err, HarnessError::Partial { failed: 1, total: 2, .. }));
        let marker = fs::read_to_string(dir.path().join(FAILURE_MARKER)).unwrap();
        assert!(marker.contains("qlearning seed 1"));
        assert!(dir.path().join("fig6_baselines_agent_seed1.csv").exists());
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(manifest.status, "failed");
        assert_eq!(manifest.files.len(), 2);
    }

    #[test]
    fn streams_differ() {
        use rand::Rng;
        let a: u64 = stream(1, TRAIN_STREAM).random();
        let b: u64 = stream(1, ENV_STREAM).random();
        assert_ne!(a, b);
        assert_eq!(a, stream(1, TRAIN_STREAM).random::<u64>());
    }
}
