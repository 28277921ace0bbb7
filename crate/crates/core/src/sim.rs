//! Slot-level simulation of the uplink: episode draws, primary-user slots,
//! quiet-period sensing, pilot observations at the UAV and effective rates.
//!
//! Gains held by [`Environment`] are normalised by the cell-edge reference
//! gain, so a received power of 1 equals 1 W sent from the cell edge over a
//! line-of-sight link. Noise is scaled the same way and rates are unchanged.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noma_phy::{
    check_constraints, decodable_layers, enforce_ladder, Allocation, ConstellationConfig,
    ConstraintReport, PhyError, RateReport,
};
use crate::radio_env::{
    draw_gains, move_sus, step_pu_activity, EnvError, FadingConfig, PathLossConfig,
    PuActivityModel, Scenario, Subchannel,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Phy(#[from] PhyError),
    #[error("infeasible allocation emitted: {0:?}")]
    Constraint(ConstraintReport),
}

/// Physical parameters of the simulated system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
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
    pub max_users: usize,
    pub rho0_db: f64,
    pub rician_k: f64,
    pub mobility_step: f64,
    pub pu_channels: Vec<usize>,
    /// Probability that a busy PU channel stays busy; 1 keeps it static.
    pub pu_stay_busy: f64,
    /// Probability that a vacant PU channel stays vacant.
    pub pu_stay_vacant: f64,
    /// PU received power in reference units.
    pub pu_power: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            cell_radius: 1000.0,
            uav_altitude: 100.0,
            min_uav_su_distance: 100.0,
            num_subchannels: 6,
            num_sus: 20,
            episode_length: 20,
            bandwidth_hz: 1.4e6,
            noise_psd_dbm_hz: -174.0,
            p_max: 20.0,
            p_th: 1.0,
            delta_y: 0.2,
            max_users: 5,
            rho0_db: -40.0,
            rician_k: 10.0,
            mobility_step: 10.0,
            pu_channels: vec![0, 1, 2],
            pu_stay_busy: 1.0,
            pu_stay_vacant: 1.0,
            pu_power: 4.0,
        }
    }
}

impl SystemParams {
    pub fn constellation(&self) -> ConstellationConfig {
        ConstellationConfig {
            delta_y: self.delta_y,
            p_th: self.p_th,
            max_users: self.max_users,
        }
    }

    pub fn path_loss(&self) -> Result<PathLossConfig, EnvError> {
        PathLossConfig::from_db(self.rho0_db)
    }

    pub fn fading(&self) -> FadingConfig {
        FadingConfig {
            rician_k: self.rician_k,
            mean_power: 1.0,
        }
    }

    pub fn pu_model(&self) -> Result<PuActivityModel, EnvError> {
        PuActivityModel::markov(
            self.num_subchannels,
            &self.pu_channels,
            self.pu_stay_vacant,
            self.pu_stay_busy,
            true,
        )
    }
}

/// Outcome of one transmission slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotResult {
    pub rates: RateReport,
    /// Pilot composite observed on every subchannel, normalised by the full
    /// power amplitude of its strongest scheduled SU.
    pub pilots: Vec<Complex64>,
    /// Whether any SU transmitted on the subchannel.
    pub active: Vec<bool>,
}

/// One radio environment with its current episode state. Mobility, fading,
/// PU activity and noise draw from the environment's own generator, so
/// allocators driven from the same seed see identical channel realizations.
#[derive(Debug, Clone)]
pub struct Environment {
    pub params: SystemParams,
    pub scenario: Scenario,
    pub pu: PuActivityModel,
    /// Subchannels with noise in reference units.
    pub subchannels: Vec<Subchannel>,
    /// Normalised gains `gains[n][k]` of the current episode.
    pub gains: Vec<Vec<f64>>,
    pub reference_gain: f64,
    path_loss: PathLossConfig,
    fading: FadingConfig,
    fixed_gains: bool,
    episodes_started: usize,
    rng: ChaCha8Rng,
}

impl Environment {
    /// Draws the scenario from `rng` and seeds the environment's generator
    /// from it.
    pub fn new<R: Rng + ?Sized>(params: SystemParams, rng: &mut R) -> Result<Self, SimError> {
        let scenario = Scenario::random(
            params.cell_radius,
            params.uav_altitude,
            params.min_uav_su_distance,
            params.num_subchannels,
            params.num_sus,
            params.episode_length,
            rng,
        )?;
        let path_loss = params.path_loss()?;
        let fading = params.fading();
        fading.validate()?;
        let reference_gain = scenario.reference_gain(&path_loss);
        let subchannels = Subchannel::equal_split(
            params.num_subchannels,
            params.bandwidth_hz,
            params.noise_psd_dbm_hz,
        )
        .into_iter()
        .map(|s| Subchannel {
            noise_power: s.noise_power / reference_gain,
            ..s
        })
        .collect();
        let pu = params.pu_model()?;
        let gains = vec![vec![0.0; params.num_subchannels]; params.num_sus];
        Ok(Self {
            params,
            scenario,
            pu,
            subchannels,
            gains,
            reference_gain,
            path_loss,
            fading,
            fixed_gains: false,
            episodes_started: 0,
            rng: ChaCha8Rng::seed_from_u64(rng.random()),
        })
    }

    /// Environment whose normalised gains never change.
    pub fn with_fixed_gains<R: Rng + ?Sized>(
        params: SystemParams,
        gains: Vec<Vec<f64>>,
        rng: &mut R,
    ) -> Result<Self, SimError> {
        let mut env = Self::new(params, rng)?;
        if gains.len() != env.params.num_sus
            || gains.iter().any(|r| r.len() != env.params.num_subchannels)
        {
            return Err(EnvError::InvalidScenario("gain matrix must be N x K".into()).into());
        }
        env.gains = gains;
        env.fixed_gains = true;
        Ok(env)
    }

    pub fn num_sus(&self) -> usize {
        self.params.num_sus
    }

    pub fn num_subchannels(&self) -> usize {
        self.params.num_subchannels
    }

    /// Moves the SUs (after the first episode) and redraws block fading.
    pub fn begin_episode(&mut self) -> Result<(), SimError> {
        let rng = &mut self.rng;
        if self.fixed_gains {
            self.episodes_started += 1;
            return Ok(());
        }
        if self.episodes_started > 0 {
            self.scenario.su_positions = move_sus(&self.scenario, self.params.mobility_step, rng);
        }
        self.episodes_started += 1;
        let raw = draw_gains(&self.scenario, &self.path_loss, &self.fading, rng)?;
        self.gains = raw
            .into_iter()
            .map(|row| row.into_iter().map(|g| g / self.reference_gain).collect())
            .collect();
        Ok(())
    }

    fn noise(&mut self, k: usize) -> Complex64 {
        let sigma = (self.subchannels[k].noise_power / 2.0).sqrt();
        let n = Normal::new(0.0, sigma).expect("finite noise");
        Complex64::new(n.sample(&mut self.rng), n.sample(&mut self.rng))
    }

    fn pu_symbol(&mut self, k: usize) -> Complex64 {
        let bit: bool = self.rng.random();
        if self.pu.occupancy[k] {
            Complex64::new(if bit { -1.0 } else { 1.0 }, 0.0) * self.params.pu_power.sqrt()
        } else {
            Complex64::new(0.0, 0.0)
        }
    }

    /// Advances PU activity and returns the quiet-period sensing sample of
    /// every subchannel, normalised by `sqrt(P_max)`.
    pub fn begin_slot(&mut self) -> Vec<Complex64> {
        self.pu.occupancy = step_pu_activity(&self.pu, &mut self.rng);
        let scale = 1.0 / self.params.p_max.sqrt();
        (0..self.num_subchannels())
            .map(|k| (self.pu_symbol(k) + self.noise(k)) * scale)
            .collect()
    }

    /// Per-user power caps of one subchannel.
    pub fn caps(&self) -> Vec<f64> {
        vec![self.params.p_max; self.num_sus()]
    }

    /// Projects requested powers `requested[n][k]` onto decodable ladders,
    /// channel by channel. Infeasible channels keep a best-effort ladder.
    pub fn project(&self, requested: &[Vec<f64>]) -> Result<Allocation, SimError> {
        let (n_sus, k_subs) = (self.num_sus(), self.num_subchannels());
        let cfg = self.params.constellation();
        let caps = self.caps();
        let mut powers = vec![vec![0.0; k_subs]; n_sus];
        for k in 0..k_subs {
            let req: Vec<f64> = (0..n_sus).map(|n| requested[n][k]).collect();
            let g: Vec<f64> = (0..n_sus).map(|n| self.gains[n][k]).collect();
            let out = enforce_ladder(&req, &g, &caps, &cfg)?;
            for n in 0..n_sus {
                powers[n][k] = out.powers[n];
            }
        }
        Ok(Allocation::from_powers(powers, &self.gains)?)
    }

    pub fn check(&self, alloc: &Allocation) -> ConstraintReport {
        check_constraints(
            alloc,
            self.params.max_users,
            self.params.p_max,
            &vec![self.params.p_max; self.num_subchannels()],
        )
    }

    /// Rates after SIC: layers below the first undecodable one and every SU
    /// on a busy PU channel get zero rate; all transmissions still interfere.
    pub fn effective_rates(&self, alloc: &Allocation) -> RateReport {
        effective_rates(
            alloc,
            &self.gains,
            &self.subchannels,
            &self.pu.occupancy,
            &self.params.constellation(),
        )
    }

    /// Transmits one slot of `alloc`.
    pub fn transmit(&mut self, alloc: &Allocation) -> SlotResult {
        let rates = self.effective_rates(alloc);
        let step = self.params.constellation().rotation_step();
        let mut pilots = Vec::with_capacity(self.num_subchannels());
        let mut active = Vec::with_capacity(self.num_subchannels());
        let pilot = Complex64::new(1.0, 1.0) * std::f64::consts::FRAC_1_SQRT_2;
        for k in 0..self.num_subchannels() {
            let order = &alloc.sic_orders[k];
            let mut z = Complex64::new(0.0, 0.0);
            for (rank, &n) in order.iter().enumerate() {
                let r = alloc.powers[n][k] * self.gains[n][k];
                z += pilot * Complex64::from_polar(r.sqrt(), rank as f64 * step);
            }
            z += self.pu_symbol(k) + self.noise(k);
            let top_gain = order.first().map_or(1.0, |&n| self.gains[n][k]);
            pilots.push(z / (self.params.p_max * top_gain).sqrt());
            active.push(!order.is_empty());
        }
        SlotResult {
            rates,
            pilots,
            active,
        }
    }
}

/// Effective rates given decodability and primary-user collisions.
pub fn effective_rates(
    alloc: &Allocation,
    gains: &[Vec<f64>],
    subchannels: &[Subchannel],
    occupancy: &[bool],
    cfg: &ConstellationConfig,
) -> RateReport {
    let mut per_user_rates = vec![vec![0.0; subchannels.len()]; alloc.num_sus()];
    for (k, order) in alloc.sic_orders.iter().enumerate() {
        if order.is_empty() || occupancy.get(k).copied().unwrap_or(false) {
            continue;
        }
        let received: Vec<f64> = order.iter().map(|&n| alloc.powers[n][k] * gains[n][k]).collect();
        let decodable = decodable_layers(&received, cfg);
        let sub = &subchannels[k];
        let mut interference: f64 = received[decodable..].iter().sum();
        for rank in (0..decodable).rev() {
            let n = order[rank];
            per_user_rates[n][k] =
                sub.bandwidth * (1.0 + received[rank] / (interference + sub.noise_power)).log2();
            interference += received[rank];
        }
    }
    let sum_rate = per_user_rates.iter().flatten().sum();
    RateReport {
        per_user_rates,
        sum_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noma_phy::achievable_rate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn episode_gains_are_normalised_and_block_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut env = Environment::new(SystemParams::default(), &mut rng).unwrap();
        env.begin_episode().unwrap();
        let g = env.gains.clone();
        for row in &g {
            for &x in row {
                assert!(x > 0.0 && x < 200.0, "{x}");
            }
        }
        env.begin_slot();
        assert_eq!(env.gains, g);
        env.begin_episode().unwrap();
        assert_ne!(env.gains, g);
    }

    #[test]
    fn sensing_separates_pu_from_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut env = Environment::new(SystemParams::default(), &mut rng).unwrap();
        env.begin_episode().unwrap();
        for _ in 0..20 {
            let s = env.begin_slot();
            for (k, z) in s.iter().enumerate() {
                if k < 3 {
                    assert!((z.re.abs() - (4.0f64 / 20.0).sqrt()).abs() < 0.01);
                } else {
                    assert!(z.norm() < 0.01);
                }
            }
        }
    }

    #[test]
    fn effective_rates_match_eq_rates_when_all_decodable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = SystemParams::default();
        params.pu_channels.clear();
        let mut env = Environment::new(params, &mut rng).unwrap();
        env.begin_episode().unwrap();
        let mut req = vec![vec![0.0; 6]; 20];
        req[0][4] = 20.0;
        req[1][5] = 20.0;
        let alloc = env.project(&req).unwrap();
        assert!(env.check(&alloc).is_feasible());
        let eff = env.effective_rates(&alloc);
        let eq = achievable_rate(&alloc, &env.gains, &env.subchannels).unwrap();
        assert!((eff.sum_rate - eq.sum_rate).abs() < 1e-6);
    }

    #[test]
    fn pu_collision_zeroes_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut env = Environment::new(SystemParams::default(), &mut rng).unwrap();
        env.begin_episode().unwrap();
        env.begin_slot();
        let mut req = vec![vec![0.0; 6]; 20];
        req[0][0] = 20.0;
        let alloc = env.project(&req).unwrap();
        assert_eq!(env.effective_rates(&alloc).sum_rate, 0.0);
    }

    #[test]
    fn full_power_single_user_pilot_is_unit_corner() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = SystemParams::default();
        params.pu_channels.clear();
        let mut env = Environment::new(params, &mut rng).unwrap();
        env.begin_episode().unwrap();
        let mut req = vec![vec![0.0; 6]; 20];
        req[3][2] = 20.0;
        let alloc = env.project(&req).unwrap();
        let out = env.transmit(&alloc);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out.pilots[2] - Complex64::new(s, s)).norm() < 1e-2);
        assert!(out.active[2] && !out.active[0]);
    }
}
