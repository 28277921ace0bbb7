use serde::{Deserialize, Serialize};

use super::sic::sic_order;
use super::PhyError;
use crate::radio_env::Subchannel;

/// Subchannel membership, transmit powers and decoding orders.
///
/// `powers[n][k]` is the power of SU `n` on subchannel `k`; `membership[k]`
/// lists the SUs with positive power on `k` and `sic_orders[k]` is that set
/// in decoding order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub membership: Vec<Vec<usize>>,
    pub powers: Vec<Vec<f64>>,
    pub sic_orders: Vec<Vec<usize>>,
}

impl Allocation {
    pub fn empty(num_sus: usize, num_subchannels: usize) -> Self {
        Self {
            membership: vec![Vec::new(); num_subchannels],
            powers: vec![vec![0.0; num_subchannels]; num_sus],
            sic_orders: vec![Vec::new(); num_subchannels],
        }
    }

    /// Derives membership from positive powers and orders each subchannel by
    /// received power.
    pub fn from_powers(powers: Vec<Vec<f64>>, gains: &[Vec<f64>]) -> Result<Self, PhyError> {
        let num_sus = powers.len();
        let num_subchannels = powers.first().map_or(0, Vec::len);
        if gains.len() != num_sus
            || powers.iter().any(|r| r.len() != num_subchannels)
            || gains.iter().any(|r| r.len() != num_subchannels)
        {
            return Err(PhyError::LengthMismatch("powers and gains must both be N x K".into()));
        }
        let mut membership = vec![Vec::new(); num_subchannels];
        let mut sic_orders = vec![Vec::new(); num_subchannels];
        for k in 0..num_subchannels {
            let users: Vec<usize> = (0..num_sus).filter(|&n| powers[n][k] > 0.0).collect();
            let p: Vec<f64> = users.iter().map(|&n| powers[n][k]).collect();
            let g: Vec<f64> = users.iter().map(|&n| gains[n][k]).collect();
            sic_orders[k] = sic_order(&p, &g).into_iter().map(|i| users[i]).collect();
            membership[k] = users;
        }
        Ok(Self {
            membership,
            powers,
            sic_orders,
        })
    }

    pub fn num_sus(&self) -> usize {
        self.powers.len()
    }

    pub fn num_subchannels(&self) -> usize {
        self.membership.len()
    }

    /// Subchannel used by SU `n`, if any.
    pub fn channel_of(&self, n: usize) -> Option<usize> {
        self.powers[n].iter().position(|&p| p > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    /// bits/s, `per_user_rates[n][k]`.
    pub per_user_rates: Vec<Vec<f64>>,
    pub sum_rate: f64,
}

/// Uplink SIC rates: each user sees as interference only the users decoded
/// after it on the same subchannel.
pub fn achievable_rate(
    alloc: &Allocation,
    gains: &[Vec<f64>],
    subchannels: &[Subchannel],
) -> Result<RateReport, PhyError> {
    if subchannels.len() != alloc.num_subchannels() || gains.len() != alloc.num_sus() {
        return Err(PhyError::LengthMismatch(format!(
            "{} subchannels and {} gain rows for a {}x{} allocation",
            subchannels.len(),
            gains.len(),
            alloc.num_sus(),
            alloc.num_subchannels()
        )));
    }
    let mut per_user_rates = vec![vec![0.0; alloc.num_subchannels()]; alloc.num_sus()];
    for (k, order) in alloc.sic_orders.iter().enumerate() {
        let sub = &subchannels[k];
        let mut interference = 0.0;
        for &n in order.iter().rev() {
            let signal = alloc.powers[n][k] * gains[n][k];
            per_user_rates[n][k] = sub.bandwidth * (1.0 + signal / (interference + sub.noise_power)).log2();
            interference += signal;
        }
    }
    let sum_rate = per_user_rates.iter().flatten().sum();
    Ok(RateReport {
        per_user_rates,
        sum_rate,
    })
}

pub fn sum_rate(report: &RateReport) -> f64 {
    report.per_user_rates.iter().flatten().sum()
}

/// Closed form of the per-subchannel total, `b log2(1 + Σ p g / η)`.
pub fn channel_sum_rate(received_powers: &[f64], sub: &Subchannel) -> f64 {
    let total: f64 = received_powers.iter().sum();
    sub.bandwidth * (1.0 + total / sub.noise_power).log2()
}
