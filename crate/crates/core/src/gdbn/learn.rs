use nalgebra::{Matrix4, Vector4};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gng::{gng_train, GngConfig};
use super::state::{generalized_states, ContinuousDynamics};
use super::transitions::estimate_transitions;
use super::{Entity, GdbnError, GeneralizedState, Vocabulary};

/// One episode of I/Q samples observed on a subchannel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTrace {
    pub entity: Entity,
    pub subchannel: usize,
    pub samples: Vec<Complex64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    pub gng: GngConfig,
    pub segments: usize,
    pub smoothing: bool,
    pub num_subchannels: usize,
    /// Diagonal floor of the process and observation noise estimates.
    pub noise_floor: f64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            gng: GngConfig::default(),
            segments: 2,
            smoothing: true,
            num_subchannels: 6,
            noise_floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityModel {
    pub vocab: Vocabulary,
    pub dynamics: ContinuousDynamics,
}

/// Vocabularies and dynamics of the three entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedModels {
    pub noise: EntityModel,
    pub pu: EntityModel,
    pub combined: EntityModel,
    pub gng_lr: f64,
    pub num_subchannels: usize,
}

impl LearnedModels {
    pub fn entity(&self, e: Entity) -> &EntityModel {
        match e {
            Entity::Noise => &self.noise,
            Entity::Pu => &self.pu,
            Entity::Combined => &self.combined,
        }
    }
}

/// Nearest cluster mean; ties go to the lowest id.
pub fn assign_cluster(x: &GeneralizedState, vocab: &Vocabulary) -> usize {
    let mut best = (0, f64::INFINITY);
    for c in &vocab.clusters {
        let d = (c.mean - x).norm_squared();
        if d < best.1 {
            best = (c.id, d);
        }
    }
    best.0
}

/// Learns one entity: generalized errors of the static predictor, GNG over
/// the observed generalized states, cluster sequences, transitions,
/// per-cluster controls and residual noise covariances.
pub fn learn_entity<R: Rng + ?Sized>(
    entity: Entity,
    traces: &[&SignalTrace],
    cfg: &LearnConfig,
    rng: &mut R,
) -> Result<EntityModel, GdbnError> {
    if traces.is_empty() {
        return Err(GdbnError::MissingEntity(entity));
    }
    let base = ContinuousDynamics::constant_velocity(0, 0.0, 0.0);
    let states: Vec<Vec<GeneralizedState>> =
        traces.iter().map(|t| generalized_states(&t.samples)).collect();
    let mut refs = Vec::new();
    for s in &states {
        refs.extend(s.iter().skip(1).copied());
    }
    if refs.is_empty() {
        refs.extend(states.iter().flatten().copied());
    }
    let gng = gng_train(&refs, &cfg.gng, rng)?;
    let mut vocab = Vocabulary {
        entity,
        clusters: gng.clusters,
        transitions: Vec::new(),
    };
    let k = vocab.num_clusters();

    let sequences: Vec<Vec<usize>> = states
        .iter()
        .map(|s| s.iter().map(|x| assign_cluster(x, &vocab)).collect())
        .collect();

    let mut sums = vec![Vector4::zeros(); k];
    let mut counts = vec![0usize; k];
    let mut errors = Vec::new();
    for (s, seq) in states.iter().zip(&sequences) {
        for t in 1..s.len() {
            let e = s[t] - base.c * s[t - 1];
            sums[seq[t]] += e;
            counts[seq[t]] += 1;
            errors.push((seq[t], e));
        }
    }
    let control: Vec<Vector4<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| if n > 0 { s / n as f64 } else { Vector4::zeros() })
        .collect();
    let mut sigma = Matrix4::zeros();
    for (c, e) in &errors {
        let r = e - control[*c];
        sigma += r * r.transpose();
    }
    if !errors.is_empty() {
        sigma /= errors.len() as f64;
    }
    let mut dynamics = ContinuousDynamics::constant_velocity(k, 0.0, 0.0);
    dynamics.control = control;
    dynamics.q = sigma * 0.5 + Matrix4::identity() * cfg.noise_floor;
    dynamics.r = dynamics.h * sigma * dynamics.h.transpose() * 0.5
        + nalgebra::Matrix2::identity() * cfg.noise_floor;

    let pooled = estimate_transitions(&sequences, k, cfg.segments, cfg.smoothing);
    vocab.transitions = (0..cfg.num_subchannels.max(1))
        .map(|ch| {
            let own: Vec<Vec<usize>> = traces
                .iter()
                .zip(&sequences)
                .filter(|(t, _)| t.subchannel == ch)
                .map(|(_, s)| s.clone())
                .collect();
            if own.is_empty() {
                pooled.clone()
            } else {
                estimate_transitions(&own, k, cfg.segments, cfg.smoothing)
            }
        })
        .collect();
    Ok(EntityModel { vocab, dynamics })
}

/// Learns the noise, primary-user and combined-SU models from labelled
/// traces. Entities are learned in that order from one generator.
pub fn learn_vocabularies<R: Rng + ?Sized>(
    traces: &[SignalTrace],
    cfg: &LearnConfig,
    rng: &mut R,
) -> Result<LearnedModels, GdbnError> {
    let of = |e: Entity| -> Vec<&SignalTrace> { traces.iter().filter(|t| t.entity == e).collect() };
    let noise = learn_entity(Entity::Noise, &of(Entity::Noise), cfg, rng)?;
    let pu = learn_entity(Entity::Pu, &of(Entity::Pu), cfg, rng)?;
    let combined = learn_entity(Entity::Combined, &of(Entity::Combined), cfg, rng)?;
    Ok(LearnedModels {
        noise,
        pu,
        combined,
        gng_lr: cfg.gng.lr,
        num_subchannels: cfg.num_subchannels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn noise_trace(rng: &mut ChaCha8Rng, ch: usize, len: usize, sigma: f64) -> SignalTrace {
        let n = Normal::new(0.0, sigma).unwrap();
        SignalTrace {
            entity: Entity::Noise,
            subchannel: ch,
            samples: (0..len)
                .map(|_| Complex64::new(n.sample(rng), n.sample(rng)))
                .collect(),
        }
    }

    fn bpsk_trace(rng: &mut ChaCha8Rng, ch: usize, len: usize) -> SignalTrace {
        let n = Normal::new(0.0, 0.02).unwrap();
        SignalTrace {
            entity: Entity::Pu,
            subchannel: ch,
            samples: (0..len)
                .map(|_| {
                    let s = if rng.random::<bool>() { 0.5 } else { -0.5 };
                    Complex64::new(s + n.sample(rng), n.sample(rng))
                })
                .collect(),
        }
    }

    fn cfg() -> LearnConfig {
        LearnConfig {
            gng: GngConfig {
                lr: 0.05,
                growth_threshold: 5e-3,
                ..GngConfig::default()
            },
            ..LearnConfig::default()
        }
    }

    #[test]
    fn noise_yields_few_clusters_near_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let traces: Vec<SignalTrace> = (0..50).map(|i| noise_trace(&mut rng, i % 6, 20, 0.01)).collect();
        let refs: Vec<&SignalTrace> = traces.iter().collect();
        let m = learn_entity(Entity::Noise, &refs, &cfg(), &mut rng).unwrap();
        assert!((1..=3).contains(&m.vocab.num_clusters()), "{}", m.vocab.num_clusters());
        for c in &m.vocab.clusters {
            assert!(c.mean.norm() < 0.05);
        }
    }

    #[test]
    fn bpsk_clusters_split_along_in_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let traces: Vec<SignalTrace> = (0..60).map(|i| bpsk_trace(&mut rng, i % 3, 20)).collect();
        let refs: Vec<&SignalTrace> = traces.iter().collect();
        let m = learn_entity(Entity::Pu, &refs, &cfg(), &mut rng).unwrap();
        assert!(m.vocab.clusters.iter().any(|c| c.mean[0] > 0.3));
        assert!(m.vocab.clusters.iter().any(|c| c.mean[0] < -0.3));
        assert!(m.vocab.clusters.iter().all(|c| c.mean[1].abs() < 0.1));
    }

    #[test]
    fn transitions_are_stochastic_and_coverage_is_high() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let traces: Vec<SignalTrace> = (0..60).map(|i| bpsk_trace(&mut rng, i % 3, 20)).collect();
        let refs: Vec<&SignalTrace> = traces.iter().collect();
        let m = learn_entity(Entity::Pu, &refs, &cfg(), &mut rng).unwrap();
        for per_channel in &m.vocab.transitions {
            for mat in per_channel {
                for row in mat {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(row.iter().all(|&p| p >= 0.0));
                }
            }
        }
        let mut inside = 0;
        let mut total = 0;
        for t in &traces {
            for x in generalized_states(&t.samples).iter().skip(1) {
                let c = &m.vocab.clusters[assign_cluster(x, &m.vocab)];
                let radius = 3.0 * c.covariance.trace().sqrt();
                inside += ((x - c.mean).norm() <= radius) as usize;
                total += 1;
            }
        }
        assert!(inside as f64 >= 0.99 * total as f64);
    }

    #[test]
    fn learned_controls_beat_zero_control() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let traces: Vec<SignalTrace> = (0..60).map(|i| bpsk_trace(&mut rng, i % 3, 20)).collect();
        let refs: Vec<&SignalTrace> = traces.iter().collect();
        let m = learn_entity(Entity::Pu, &refs, &cfg(), &mut rng).unwrap();
        let (mut with_u, mut without_u) = (0.0, 0.0);
        for t in &traces {
            let s = generalized_states(&t.samples);
            for i in 1..s.len() {
                let pred = m.dynamics.c * s[i - 1];
                let c = assign_cluster(&s[i], &m.vocab);
                with_u += (s[i] - pred - m.dynamics.d * m.dynamics.control[c]).norm_squared();
                without_u += (s[i] - pred).norm_squared();
            }
        }
        assert!(with_u <= without_u);
    }

    #[test]
    fn tie_goes_to_lowest_id() {
        let cluster = |id: usize, x: f64| super::super::DiscreteCluster {
            id,
            mean: Vector4::new(x, 0.0, 0.0, 0.0),
            covariance: Matrix4::identity(),
            hit_count: 1,
        };
        let vocab = Vocabulary {
            entity: Entity::Combined,
            clusters: vec![cluster(0, -1.0), cluster(1, 1.0)],
            transitions: vec![],
        };
        assert_eq!(assign_cluster(&Vector4::new(1.0, 0.0, 0.0, 0.0), &vocab), 1);
        assert_eq!(assign_cluster(&Vector4::zeros(), &vocab), 0);
    }

    #[test]
    fn missing_entity_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let traces = vec![noise_trace(&mut rng, 0, 20, 0.01)];
        assert_eq!(
            learn_vocabularies(&traces, &cfg(), &mut rng).unwrap_err(),
            GdbnError::MissingEntity(Entity::Pu)
        );
    }

    #[test]
    fn learning_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let traces: Vec<SignalTrace> = (0..30).map(|i| bpsk_trace(&mut rng, i % 3, 20)).collect();
            let refs: Vec<&SignalTrace> = traces.iter().collect();
            learn_entity(Entity::Pu, &refs, &cfg(), &mut rng).unwrap()
        };
        assert_eq!(build(), build());
    }
}
