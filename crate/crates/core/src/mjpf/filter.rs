use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::messages::{abnormality, compute_messages, discrete_abnormality, Messages};
use super::MjpfError;
use crate::gdbn::{ContinuousDynamics, GeneralizedState, TransitionMatrix, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub cluster: usize,
    pub mean: GeneralizedState,
    pub cov: Matrix4<f64>,
    pub weight: f64,
}

/// Particle approximation of one subchannel's joint discrete/continuous
/// state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub particles: Vec<Particle>,
}

impl BeliefState {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// `num_particles` equally weighted particles with clusters drawn in
/// proportion to their training hit counts.
pub fn init_belief<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    num_particles: usize,
    rng: &mut R,
) -> BeliefState {
    let hits: Vec<f64> = vocab.clusters.iter().map(|c| c.hit_count as f64 + 1.0).collect();
    let w = 1.0 / num_particles as f64;
    let particles = (0..num_particles)
        .map(|_| {
            let c = &vocab.clusters[sample_index(&hits, rng)];
            Particle {
                cluster: c.id,
                mean: c.mean,
                cov: c.covariance,
                weight: w,
            }
        })
        .collect();
    BeliefState { particles }
}

/// Resets every particle's continuous estimate to its cluster prototype,
/// keeping cluster labels and weights.
pub fn anchor_to_clusters(belief: &BeliefState, vocab: &Vocabulary) -> BeliefState {
    BeliefState {
        particles: belief
            .particles
            .iter()
            .map(|p| {
                let c = &vocab.clusters[p.cluster];
                Particle {
                    mean: c.mean,
                    cov: c.covariance,
                    ..*p
                }
            })
            .collect(),
    }
}

/// Moves every particle's cluster along its row of `transition`.
pub fn pf_predict<R: Rng + ?Sized>(
    belief: &BeliefState,
    transition: &TransitionMatrix,
    rng: &mut R,
) -> BeliefState {
    let particles = belief
        .particles
        .iter()
        .map(|p| Particle {
            cluster: sample_index(&transition[p.cluster], rng),
            ..p.clone()
        })
        .collect();
    BeliefState { particles }
}

/// `mean ← C mean + D U_s`, `cov ← C cov Cᵀ + Q`.
pub fn kf_predict(p: &Particle, dyn_: &ContinuousDynamics) -> Particle {
    let u = dyn_.control.get(p.cluster).copied().unwrap_or_else(Vector4::zeros);
    let cov = dyn_.c * p.cov * dyn_.c.transpose() + dyn_.q;
    Particle {
        cluster: p.cluster,
        mean: dyn_.c * p.mean + dyn_.d * u,
        cov: (cov + cov.transpose()) * 0.5,
        weight: p.weight,
    }
}

/// Kalman measurement update in Joseph form. Returns the updated particle
/// and the log-likelihood of `z` under its predicted observation.
pub fn kf_update(
    p: &Particle,
    z: &Vector2<f64>,
    dyn_: &ContinuousDynamics,
) -> Result<(Particle, f64), MjpfError> {
    let h = dyn_.h;
    let s: Matrix2<f64> = h * p.cov * h.transpose() + dyn_.r;
    let s = (s + s.transpose()) * 0.5;
    let chol = s.cholesky().ok_or(MjpfError::DegenerateCovariance)?;
    let innov = z - h * p.mean;
    let s_inv = chol.inverse();
    let k = p.cov * h.transpose() * s_inv;
    let i_kh = Matrix4::identity() - k * h;
    let cov = i_kh * p.cov * i_kh.transpose() + k * dyn_.r * k.transpose();
    let ln_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let maha = innov.dot(&(s_inv * innov));
    let loglik = -0.5 * (maha + ln_det + 2.0 * (2.0 * std::f64::consts::PI).ln());
    Ok((
        Particle {
            cluster: p.cluster,
            mean: p.mean + k * innov,
            cov: (cov + cov.transpose()) * 0.5,
            weight: p.weight,
        },
        loglik,
    ))
}

pub fn effective_sample_size(belief: &BeliefState) -> f64 {
    let total = belief.total_weight();
    let sq: f64 = belief.particles.iter().map(|p| (p.weight / total).powi(2)).sum();
    1.0 / sq
}

/// Systematic resampling to equal weights, performed only when the effective
/// sample size drops below half the particle count. The flag reports whether
/// resampling happened.
pub fn resample<R: Rng + ?Sized>(
    belief: &BeliefState,
    rng: &mut R,
) -> Result<(BeliefState, bool), MjpfError> {
    let total = belief.total_weight();
    if !(total > 0.0) || !total.is_finite() {
        return Err(MjpfError::ZeroWeights);
    }
    let l = belief.len();
    if effective_sample_size(belief) >= l as f64 / 2.0 {
        return Ok((belief.clone(), false));
    }
    let u0: f64 = rng.random::<f64>() / l as f64;
    let mut particles = Vec::with_capacity(l);
    let mut cum = 0.0;
    let mut i = 0;
    for j in 0..l {
        let target = u0 + j as f64 / l as f64;
        while i + 1 < l && cum + belief.particles[i].weight / total <= target {
            cum += belief.particles[i].weight / total;
            i += 1;
        }
        particles.push(Particle {
            weight: 1.0 / l as f64,
            ..belief.particles[i].clone()
        });
    }
    Ok((BeliefState { particles }, true))
}

/// Result of one filter slice.
#[derive(Debug, Clone)]
pub struct SliceOutcome {
    pub belief: BeliefState,
    pub continuous: f64,
    pub discrete: f64,
    pub messages: Messages,
    /// Predicted observation mean, `H π(X̃)`.
    pub predicted_z: Vector2<f64>,
}

/// One slice: discrete prediction, per-particle Kalman prediction and
/// update, reweighting, conditional resampling, messages and abnormalities.
pub fn belief_update<R: Rng + ?Sized>(
    belief: &BeliefState,
    z: &Vector2<f64>,
    vocab: &Vocabulary,
    dyn_: &ContinuousDynamics,
    transition: &TransitionMatrix,
    rng: &mut R,
) -> Result<SliceOutcome, MjpfError> {
    let moved = pf_predict(belief, transition, rng);
    let predicted = BeliefState {
        particles: moved.particles.iter().map(|p| kf_predict(p, dyn_)).collect(),
    };
    let mut updated = Vec::with_capacity(predicted.len());
    let mut logs = Vec::with_capacity(predicted.len());
    for p in &predicted.particles {
        let (q, ll) = kf_update(p, z, dyn_)?;
        logs.push(ll + p.weight.ln());
        updated.push(q);
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(MjpfError::ZeroWeights);
    }
    let mut total = 0.0;
    for (q, l) in updated.iter_mut().zip(&logs) {
        q.weight = (l - max).exp();
        total += q.weight;
    }
    for q in updated.iter_mut() {
        q.weight /= total;
    }
    let updated = BeliefState { particles: updated };
    let messages = compute_messages(&predicted, &updated, z, dyn_, vocab.num_clusters());
    let pred_obs = messages.predicted_observation(dyn_);
    let continuous = abnormality(&pred_obs, &messages.lambda_x)?;
    let discrete = discrete_abnormality(&messages.pi_s, &messages.lambda_s);
    let predicted_z = Vector2::new(pred_obs.mean[0], pred_obs.mean[1]);
    let (belief, _) = resample(&updated, rng)?;
    Ok(SliceOutcome {
        belief,
        continuous,
        discrete,
        messages,
        predicted_z,
    })
}
