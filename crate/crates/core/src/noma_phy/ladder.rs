//! Amplitude ladder of the superimposed constellation.
//!
//! Layer `k` (SIC rank `k`, amplitude `a_k = sqrt(p g)`) is detected on a QPSK
//! grid rotated by `k` steps. After the stronger layers are removed, the
//! weaker ones act as a bounded perturbation whose worst-case projection on
//! either decision axis of layer `k` is `Σ_{j>k} a_j c(j-k) / √2`, with
//! `c(d) = |cos dφ| + |sin dφ|`. The decision margin of layer `k` is
//!
//! ```text
//! μ_k = (a_k − Σ_{j>k} a_j c(j−k)) / √2
//! ```
//!
//! Requiring `μ_k ≥ Δy/2` on every layer makes noiseless hard-decision SIC
//! exact and keeps every pair of composite points at least `Δy` apart.

use num_complex::Complex64;
use std::f64::consts::FRAC_1_SQRT_2;

use super::sic::sic_order;
use super::{ConstellationConfig, PhyError};

const REL_TOL: f64 = 1e-9;

fn coupling(rank_gap: usize, step: f64) -> f64 {
    let phi = rank_gap as f64 * step;
    phi.cos().abs() + phi.sin().abs()
}

/// Decision margin of each layer given amplitudes in decoding order.
pub fn layer_margins(amplitudes: &[f64], step: f64) -> Vec<f64> {
    (0..amplitudes.len())
        .map(|k| {
            let leak: f64 = (k + 1..amplitudes.len())
                .map(|j| amplitudes[j] * coupling(j - k, step))
                .sum();
            (amplitudes[k] - leak) * FRAC_1_SQRT_2
        })
        .collect()
}

/// Number of leading layers (received powers in decoding order) that SIC
/// recovers with the configured spacing and power gap.
pub fn decodable_layers(received: &[f64], cfg: &ConstellationConfig) -> usize {
    let amps: Vec<f64> = received.iter().map(|r| r.max(0.0).sqrt()).collect();
    let margins = layer_margins(&amps, cfg.rotation_step());
    let need = 0.5 * cfg.delta_y * (1.0 - REL_TOL);
    let mut count = 0;
    for k in 0..received.len() {
        let gap_ok = k + 1 == received.len()
            || received[k] - received[k + 1] >= cfg.p_th - REL_TOL * received[k].abs().max(1.0);
        if margins[k] < need || !gap_ok {
            break;
        }
        count += 1;
    }
    count
}

/// Smallest received powers, in decoding order, that support `layers`
/// decodable layers.
pub fn minimal_ladder(layers: usize, cfg: &ConstellationConfig) -> Vec<f64> {
    let step = cfg.rotation_step();
    let base = cfg.delta_y * FRAC_1_SQRT_2;
    let mut amps = vec![0.0; layers];
    let mut received = vec![0.0; layers];
    for k in (0..layers).rev() {
        let leak: f64 = (k + 1..layers).map(|j| amps[j] * coupling(j - k, step)).sum();
        let mut r = (base + leak).powi(2);
        if k + 1 < layers {
            r = r.max(received[k + 1] + cfg.p_th);
        }
        received[k] = r;
        amps[k] = r.sqrt();
    }
    received
}

/// Result of projecting one subchannel's powers onto the ladder.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderOutcome {
    /// Projected transmit powers, in input order.
    pub powers: Vec<f64>,
    /// Decoding order of the active users (indices into the input).
    pub order: Vec<usize>,
    /// Leading layers that decode.
    pub decodable: usize,
    pub feasible: bool,
}

/// Places `layers` users top-down, each as close to its request as the caps,
/// the layers above and a reserved minimal ladder below allow.
fn place(
    req: &[f64],
    rmax: &[f64],
    layers: usize,
    cfg: &ConstellationConfig,
) -> Option<Vec<f64>> {
    let step = cfg.rotation_step();
    let base = cfg.delta_y * FRAC_1_SQRT_2;
    let reserve_r = minimal_ladder(layers, cfg);
    let reserve_a: Vec<f64> = reserve_r.iter().map(|r| r.sqrt()).collect();
    let mut amps: Vec<f64> = Vec::with_capacity(layers);
    let mut received: Vec<f64> = Vec::with_capacity(layers);
    for k in 0..layers {
        let mut upper = rmax[k];
        if k > 0 {
            upper = upper.min(received[k - 1] - cfg.p_th);
        }
        for l in 0..k {
            let placed: f64 = (l + 1..k).map(|j| amps[j] * coupling(j - l, step)).sum();
            let reserved: f64 = (k + 1..layers)
                .map(|j| reserve_a[j] * coupling(j - l, step))
                .sum();
            let a_bound = (amps[l] - base - placed - reserved) / coupling(k - l, step);
            upper = upper.min(a_bound.max(0.0).powi(2));
        }
        let lower = reserve_r[k];
        if lower > upper * (1.0 + REL_TOL) {
            return None;
        }
        let r = req[k].clamp(lower.min(upper), upper);
        received.push(r);
        amps.push(r.sqrt());
    }
    Some(received)
}

/// Projects one subchannel's powers so every active layer decodes.
///
/// Users with non-positive requested power stay idle. Requests are clamped
/// to `caps` and ordered by received power; each layer then moves as little
/// as possible to respect the power gap and decision margins. When the full
/// set cannot fit, the longest feasible prefix is placed and the remaining
/// users keep their (gap-limited) requests as undecodable interference.
pub fn enforce_ladder(
    powers: &[f64],
    gains: &[f64],
    caps: &[f64],
    cfg: &ConstellationConfig,
) -> Result<LadderOutcome, PhyError> {
    if powers.len() != gains.len() || powers.len() != caps.len() {
        return Err(PhyError::LengthMismatch(format!(
            "{} powers, {} gains, {} caps",
            powers.len(),
            gains.len(),
            caps.len()
        )));
    }
    let active: Vec<usize> = (0..powers.len())
        .filter(|&i| powers[i] > 0.0 && gains[i] > 0.0 && caps[i] > 0.0)
        .collect();
    let clamped: Vec<f64> = active.iter().map(|&i| powers[i].min(caps[i])).collect();
    let g: Vec<f64> = active.iter().map(|&i| gains[i]).collect();
    let order_local = sic_order(&clamped, &g);
    let order: Vec<usize> = order_local.iter().map(|&i| active[i]).collect();
    let req: Vec<f64> = order_local.iter().map(|&i| clamped[i] * g[i]).collect();
    let rmax: Vec<f64> = order.iter().map(|&i| caps[i] * gains[i]).collect();
    let m = order.len();

    let (received, feasible) = match place(&req, &rmax, m, cfg) {
        Some(r) => (r, true),
        None => {
            let mut fit = m - 1;
            let mut prefix = None;
            while fit > 0 {
                if let Some(r) = place(&req[..fit], &rmax[..fit], fit, cfg) {
                    prefix = Some(r);
                    break;
                }
                fit -= 1;
            }
            let mut received = prefix.unwrap_or_default();
            for k in received.len()..m {
                let below = received.last().map_or(f64::INFINITY, |r| r - cfg.p_th);
                received.push(req[k].min(below).max(0.0));
            }
            (received, false)
        }
    };

    let mut out = vec![0.0; powers.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = (received[rank] / gains[i]).min(caps[i]);
    }
    // Users pushed to zero leave the subchannel.
    let order: Vec<usize> = order.into_iter().filter(|&i| out[i] > 0.0).collect();
    let final_received: Vec<f64> = order.iter().map(|&i| out[i] * gains[i]).collect();
    let decodable = decodable_layers(&final_received, cfg);
    Ok(LadderOutcome {
        powers: out,
        order,
        decodable,
        feasible,
    })
}

/// Strict form of [`enforce_ladder`]: returns the projected powers or an
/// infeasibility error naming the number of users.
pub fn enforce_min_distance(
    powers: &[f64],
    gains: &[f64],
    caps: &[f64],
    cfg: &ConstellationConfig,
) -> Result<Vec<f64>, PhyError> {
    let out = enforce_ladder(powers, gains, caps, cfg)?;
    if out.feasible {
        Ok(out.powers)
    } else {
        Err(PhyError::Infeasible(out.order.len().max(out.decodable + 1)))
    }
}

/// Minimum distance between distinct points of the composite constellation,
/// by enumeration of all symbol differences. Amplitudes are in decoding
/// order. Cost is `9^m`.
pub fn composite_min_distance(amplitudes: &[f64], step: f64) -> f64 {
    let layers: Vec<[Complex64; 9]> = amplitudes
        .iter()
        .enumerate()
        .map(|(rank, &a)| {
            let rot = Complex64::from_polar(a * FRAC_1_SQRT_2, rank as f64 * step);
            let mut diffs = [Complex64::new(0.0, 0.0); 9];
            let vals = [-2.0, 0.0, 2.0];
            for (i, re) in vals.iter().enumerate() {
                for (j, im) in vals.iter().enumerate() {
                    diffs[3 * i + j] = rot * Complex64::new(*re, *im);
                }
            }
            diffs
        })
        .collect();
    fn walk(layers: &[[Complex64; 9]], acc: Complex64, nonzero: bool, best: &mut f64) {
        match layers.split_first() {
            None => {
                if nonzero {
                    *best = best.min(acc.norm());
                }
            }
            Some((head, rest)) => {
                for (i, d) in head.iter().enumerate() {
                    walk(rest, acc + d, nonzero || i != 4, best);
                }
            }
        }
    }
    let mut best = f64::INFINITY;
    walk(&layers, Complex64::new(0.0, 0.0), false, &mut best);
    best
}
