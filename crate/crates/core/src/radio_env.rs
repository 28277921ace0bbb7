//! Radio environment: geometry, free-space path loss, Rician small-scale
//! fading, primary-user occupancy and secondary-user mobility.
//!
//! Channel indices are zero-based throughout the crate. Positions are
//! horizontal coordinates in meters with the cell centred on the origin.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point2 = [f64; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("link distance must be positive, got {0}")]
    NonPositiveDistance(f64),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Geometry and size of one radio environment instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub cell_radius: f64,
    pub uav_altitude: f64,
    pub uav_xy: Point2,
    pub su_positions: Vec<Point2>,
    /// Minimum horizontal separation between the UAV and any SU.
    pub min_uav_su_distance: f64,
    pub num_subchannels: usize,
    pub num_sus: usize,
    pub episode_length: usize,
}

impl Scenario {
    /// Draws SU positions uniformly (by area) over the annulus between the
    /// minimum UAV distance and the cell edge. The UAV hovers over the cell
    /// centre.
    pub fn random<R: Rng + ?Sized>(
        cell_radius: f64,
        uav_altitude: f64,
        min_uav_su_distance: f64,
        num_subchannels: usize,
        num_sus: usize,
        episode_length: usize,
        rng: &mut R,
    ) -> Result<Self, EnvError> {
        if !(min_uav_su_distance < cell_radius) {
            return Err(EnvError::InvalidScenario(format!(
                "min distance {min_uav_su_distance} must be below the cell radius {cell_radius}"
            )));
        }
        let r2_lo = min_uav_su_distance * min_uav_su_distance;
        let r2_hi = cell_radius * cell_radius;
        let su_positions = (0..num_sus)
            .map(|_| {
                let r = rng.random_range(r2_lo..=r2_hi).sqrt();
                let theta = rng.random_range(0.0..2.0 * PI);
                [r * theta.cos(), r * theta.sin()]
            })
            .collect();
        let scenario = Self {
            cell_radius,
            uav_altitude,
            uav_xy: [0.0, 0.0],
            su_positions,
            min_uav_su_distance,
            num_subchannels,
            num_sus,
            episode_length,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.num_subchannels == 0 || self.num_sus == 0 {
            return Err(EnvError::InvalidScenario(
                "need at least one subchannel and one SU".into(),
            ));
        }
        if self.su_positions.len() != self.num_sus {
            return Err(EnvError::InvalidScenario(format!(
                "{} positions for {} SUs",
                self.su_positions.len(),
                self.num_sus
            )));
        }
        if !(self.uav_altitude > 0.0) {
            return Err(EnvError::InvalidScenario("UAV altitude must be positive".into()));
        }
        for (n, w) in self.su_positions.iter().enumerate() {
            let r = norm2(*w);
            if r > self.cell_radius * (1.0 + 1e-12) {
                return Err(EnvError::InvalidScenario(format!(
                    "SU {n} at radius {r:.3} is outside the cell"
                )));
            }
            let dh = norm2(sub2(*w, self.uav_xy));
            if dh < self.min_uav_su_distance * (1.0 - 1e-12) {
                return Err(EnvError::InvalidScenario(format!(
                    "SU {n} is {dh:.3} m from the UAV, below the minimum"
                )));
            }
        }
        Ok(())
    }

    pub fn distance_to(&self, n: usize) -> f64 {
        distance_uav_to_su(self.uav_xy, self.su_positions[n], self.uav_altitude)
    }

    /// Large-scale gain of a line-of-sight link to the cell edge. Used as the
    /// reference for received-power normalisation.
    pub fn reference_gain(&self, path_loss: &PathLossConfig) -> f64 {
        path_loss.rho0 / (self.uav_altitude.powi(2) + self.cell_radius.powi(2))
    }
}

fn norm2(p: Point2) -> f64 {
    p[0].hypot(p[1])
}

fn sub2(a: Point2, b: Point2) -> Point2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathLossConfig {
    /// Linear power gain at the 1 m reference distance.
    pub rho0: f64,
}

impl Default for PathLossConfig {
    fn default() -> Self {
        Self { rho0: 1e-4 }
    }
}

impl PathLossConfig {
    pub fn from_db(rho0_db: f64) -> Result<Self, EnvError> {
        let rho0 = 10f64.powf(rho0_db / 10.0);
        if !(rho0 > 0.0) || !rho0.is_finite() {
            return Err(EnvError::InvalidConfig(format!("rho0 of {rho0_db} dB")));
        }
        Ok(Self { rho0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FadingConfig {
    /// Linear Rician K-factor; `f64::INFINITY` gives a pure line-of-sight link.
    pub rician_k: f64,
    pub mean_power: f64,
}

impl Default for FadingConfig {
    fn default() -> Self {
        Self {
            rician_k: 10.0,
            mean_power: 1.0,
        }
    }
}

impl FadingConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.rician_k >= 0.0) {
            return Err(EnvError::InvalidConfig(format!("rician_k = {}", self.rician_k)));
        }
        if !(self.mean_power > 0.0) || !self.mean_power.is_finite() {
            return Err(EnvError::InvalidConfig(format!(
                "mean_power = {}",
                self.mean_power
            )));
        }
        Ok(())
    }
}

/// Two-state Markov occupancy of the licensed channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuActivityModel {
    pub occupancy: Vec<bool>,
    /// One row-stochastic matrix per entry of `pu_channels`; row 0 is the
    /// vacant state, row 1 the busy state, column 1 the probability of being
    /// busy in the next slot.
    pub transition: Vec<[[f64; 2]; 2]>,
    pub pu_channels: Vec<usize>,
}

impl PuActivityModel {
    /// PUs that never leave their channels.
    pub fn static_occupancy(num_subchannels: usize, pu_channels: &[usize]) -> Result<Self, EnvError> {
        Self::markov(num_subchannels, pu_channels, 1.0, 1.0, true)
    }

    /// Markov occupancy where a vacant channel stays vacant with
    /// `p_stay_vacant` and a busy one stays busy with `p_stay_busy`.
    pub fn markov(
        num_subchannels: usize,
        pu_channels: &[usize],
        p_stay_vacant: f64,
        p_stay_busy: f64,
        start_busy: bool,
    ) -> Result<Self, EnvError> {
        let mut occupancy = vec![false; num_subchannels];
        for &c in pu_channels {
            if c >= num_subchannels {
                return Err(EnvError::InvalidConfig(format!(
                    "PU channel {c} outside 0..{num_subchannels}"
                )));
            }
            occupancy[c] = start_busy;
        }
        let row = [
            [p_stay_vacant, 1.0 - p_stay_vacant],
            [1.0 - p_stay_busy, p_stay_busy],
        ];
        let model = Self {
            occupancy,
            transition: vec![row; pu_channels.len()],
            pu_channels: pu_channels.to_vec(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.transition.len() != self.pu_channels.len() {
            return Err(EnvError::InvalidConfig(
                "one transition matrix per PU channel required".into(),
            ));
        }
        for (c, m) in self.pu_channels.iter().zip(&self.transition) {
            if *c >= self.occupancy.len() {
                return Err(EnvError::InvalidConfig(format!("PU channel {c} out of range")));
            }
            for row in m {
                let s = row[0] + row[1];
                if (s - 1.0).abs() > 1e-12 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(EnvError::InvalidConfig(format!(
                        "transition row {row:?} of channel {c} is not stochastic"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Long-run fraction of slots a PU channel is busy.
    pub fn stationary_busy(row: &[[f64; 2]; 2]) -> f64 {
        let to_busy = row[0][1];
        let to_vacant = row[1][0];
        if to_busy + to_vacant == 0.0 {
            return f64::NAN;
        }
        to_busy / (to_busy + to_vacant)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subchannel {
    pub index: usize,
    /// Hz.
    pub bandwidth: f64,
    /// Watts.
    pub noise_power: f64,
}

impl Subchannel {
    /// Splits the system bandwidth evenly and integrates the noise density
    /// over each subchannel.
    pub fn equal_split(
        num_subchannels: usize,
        system_bandwidth_hz: f64,
        noise_psd_dbm_per_hz: f64,
    ) -> Vec<Subchannel> {
        let b = system_bandwidth_hz / num_subchannels as f64;
        let psd_w = 10f64.powf((noise_psd_dbm_per_hz - 30.0) / 10.0);
        (0..num_subchannels)
            .map(|index| Subchannel {
                index,
                bandwidth: b,
                noise_power: psd_w * b,
            })
            .collect()
    }
}

pub fn distance_uav_to_su(q_u: Point2, w_n: Point2, h: f64) -> f64 {
    let d = sub2(q_u, w_n);
    (h * h + d[0] * d[0] + d[1] * d[1]).sqrt()
}

/// Free-space large-scale gain `rho0 / d^2`.
pub fn large_scale_gain(rho0: f64, d: f64) -> Result<f64, EnvError> {
    if !(d > 0.0) {
        return Err(EnvError::NonPositiveDistance(d));
    }
    Ok(rho0 / (d * d))
}

/// Draws a complex Rician coefficient with `E[|Ω|²] = mean_power`. The
/// line-of-sight component has a uniformly random phase.
pub fn sample_small_scale<R: Rng + ?Sized>(fading: &FadingConfig, rng: &mut R) -> Complex64 {
    let phase = rng.random_range(0.0..2.0 * PI);
    let scale = fading.mean_power.sqrt();
    if fading.rician_k.is_infinite() {
        return Complex64::from_polar(scale, phase);
    }
    let k = fading.rician_k;
    let los = Complex64::from_polar((k / (k + 1.0)).sqrt(), phase);
    let sigma = (1.0 / (2.0 * (k + 1.0))).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    (los + Complex64::new(re, im) * sigma) * scale
}

/// Link power gain `g · |Ω|²`.
pub fn link_gain(large_scale: f64, omega: Complex64) -> f64 {
    large_scale * omega.norm_sqr()
}

/// Power gain of SU `n` on subchannel `k` with a freshly drawn fading
/// coefficient. Fading is independent across subchannels.
pub fn channel_gain<R: Rng + ?Sized>(
    scenario: &Scenario,
    path_loss: &PathLossConfig,
    fading: &FadingConfig,
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<f64, EnvError> {
    if n >= scenario.num_sus || k >= scenario.num_subchannels {
        return Err(EnvError::InvalidScenario(format!(
            "link ({n}, {k}) outside {}x{}",
            scenario.num_sus, scenario.num_subchannels
        )));
    }
    let g = large_scale_gain(path_loss.rho0, scenario.distance_to(n))?;
    Ok(link_gain(g, sample_small_scale(fading, rng)))
}

/// Block-fading draw of every link: `gains[n][k]`.
pub fn draw_gains<R: Rng + ?Sized>(
    scenario: &Scenario,
    path_loss: &PathLossConfig,
    fading: &FadingConfig,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, EnvError> {
    (0..scenario.num_sus)
        .map(|n| {
            (0..scenario.num_subchannels)
                .map(|k| channel_gain(scenario, path_loss, fading, n, k, rng))
                .collect()
        })
        .collect()
}

/// Advances every PU channel by one slot of its Markov chain.
pub fn step_pu_activity<R: Rng + ?Sized>(model: &PuActivityModel, rng: &mut R) -> Vec<bool> {
    let mut next = vec![false; model.occupancy.len()];
    for (&c, m) in model.pu_channels.iter().zip(&model.transition) {
        let row = m[model.occupancy[c] as usize];
        // Degenerate rows must not consume randomness differently from
        // stochastic ones, so always draw.
        let u: f64 = rng.random();
        next[c] = u < row[1];
    }
    next
}

/// One mobility step: each SU moves a uniform random distance in
/// `[0, mobility_step]` along a uniform direction, reflects off the cell edge
/// and is pushed back out to the minimum UAV distance.
pub fn move_sus<R: Rng + ?Sized>(scenario: &Scenario, mobility_step: f64, rng: &mut R) -> Vec<Point2> {
    let r_cell = scenario.cell_radius;
    scenario
        .su_positions
        .iter()
        .map(|&w| {
            if mobility_step <= 0.0 {
                return w;
            }
            let len = rng.random_range(0.0..=mobility_step);
            let theta = rng.random_range(0.0..2.0 * PI);
            let mut p = [w[0] + len * theta.cos(), w[1] + len * theta.sin()];
            let r = norm2(p);
            if r > r_cell {
                let reflected = (2.0 * r_cell - r).max(0.0);
                p = [p[0] * reflected / r, p[1] * reflected / r];
            }
            let rel = sub2(p, scenario.uav_xy);
            let dh = norm2(rel);
            if dh < scenario.min_uav_su_distance {
                let dir = if dh > 0.0 {
                    [rel[0] / dh, rel[1] / dh]
                } else {
                    [theta.cos(), theta.sin()]
                };
                p = [
                    scenario.uav_xy[0] + dir[0] * scenario.min_uav_su_distance,
                    scenario.uav_xy[1] + dir[1] * scenario.min_uav_su_distance,
                ];
            }
            p
        })
        .collect()
}
