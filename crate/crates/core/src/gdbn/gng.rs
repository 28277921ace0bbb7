use std::collections::BTreeMap;

use nalgebra::Matrix4;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DiscreteCluster, GdbnError, GeneralizedState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GngConfig {
    /// Winner learning rate; topological neighbours move at a tenth of it.
    pub lr: f64,
    pub max_nodes: usize,
    pub epochs: usize,
    pub max_age: u32,
    /// Presentations between node insertions.
    pub insert_interval: usize,
    /// Multiplicative decay of accumulated errors per presentation.
    pub error_decay: f64,
    /// Error reduction of the two nodes that spawn a new one.
    pub split_factor: f64,
    /// No insertion while the recent mean squared quantization error is
    /// below this level.
    pub growth_threshold: f64,
    /// Added to the diagonal of every cluster covariance.
    pub covariance_floor: f64,
}

impl Default for GngConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            max_nodes: 24,
            epochs: 4,
            max_age: 50,
            insert_interval: 100,
            error_decay: 0.995,
            split_factor: 0.5,
            growth_threshold: 1e-3,
            covariance_floor: 1e-4,
        }
    }
}

impl GngConfig {
    pub fn validate(&self) -> Result<(), GdbnError> {
        if !(self.lr > 0.0 && self.lr < 1.0) {
            return Err(GdbnError::InvalidParameter(format!("gng lr {} not in (0, 1)", self.lr)));
        }
        if self.max_nodes < 2 {
            return Err(GdbnError::InvalidParameter("max_nodes must be at least 2".into()));
        }
        if self.epochs == 0 || self.insert_interval == 0 {
            return Err(GdbnError::InvalidParameter(
                "epochs and insert_interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GngOutcome {
    pub clusters: Vec<DiscreteCluster>,
    /// Mean squared distance to the winner over each epoch.
    pub epoch_errors: Vec<f64>,
    /// Final node positions before cluster re-estimation.
    pub nodes: Vec<GeneralizedState>,
}

struct Graph {
    w: Vec<Option<GeneralizedState>>,
    err: Vec<f64>,
    edges: BTreeMap<(usize, usize), u32>,
}

fn key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

impl Graph {
    fn alive(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.w.len()).filter(|&i| self.w[i].is_some())
    }

    fn count(&self) -> usize {
        self.w.iter().filter(|w| w.is_some()).count()
    }

    fn neighbours(&self, i: usize) -> Vec<usize> {
        self.edges
            .keys()
            .filter_map(|&(a, b)| {
                if a == i {
                    Some(b)
                } else if b == i {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    fn two_nearest(&self, x: &GeneralizedState) -> (usize, f64, usize) {
        let mut best = (usize::MAX, f64::INFINITY);
        let mut second = (usize::MAX, f64::INFINITY);
        for i in self.alive() {
            let d = (self.w[i].unwrap() - x).norm_squared();
            if d < best.1 {
                second = best;
                best = (i, d);
            } else if d < second.1 {
                second = (i, d);
            }
        }
        (best.0, best.1, second.0)
    }
}

/// Growing neural gas over generalized states.
pub fn gng_train<R: Rng + ?Sized>(
    samples: &[GeneralizedState],
    cfg: &GngConfig,
    rng: &mut R,
) -> Result<GngOutcome, GdbnError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(GdbnError::EmptyStream);
    }
    let a = rng.random_range(0..samples.len());
    let b = rng.random_range(0..samples.len());
    let mut g = Graph {
        w: vec![Some(samples[a]), Some(samples[b])],
        err: vec![0.0, 0.0],
        edges: BTreeMap::new(),
    };
    let neighbour_lr = cfg.lr * 0.1;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_errors = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut window_err = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_err = 0.0;
        for &idx in &order {
            let x = samples[idx];
            let (s1, d1, s2) = g.two_nearest(&x);
            epoch_err += d1;
            window_err += d1;
            g.err[s1] += d1;

            let w1 = g.w[s1].unwrap();
            g.w[s1] = Some(w1 + (x - w1) * cfg.lr);
            for n in g.neighbours(s1) {
                let wn = g.w[n].unwrap();
                g.w[n] = Some(wn + (x - wn) * neighbour_lr);
            }
            let mut expired = Vec::new();
            for (&(p, q), age) in g.edges.iter_mut() {
                if p == s1 || q == s1 {
                    *age += 1;
                    if *age > cfg.max_age {
                        expired.push((p, q));
                    }
                }
            }
            if s2 != usize::MAX {
                g.edges.insert(key(s1, s2), 0);
                expired.retain(|&e| e != key(s1, s2));
            }
            for e in expired {
                g.edges.remove(&e);
            }
            // Drop isolated nodes while at least two remain.
            let isolated: Vec<usize> = g
                .alive()
                .filter(|&i| i != s1 && g.neighbours(i).is_empty())
                .collect();
            for i in isolated {
                if g.count() > 2 {
                    g.w[i] = None;
                    g.err[i] = 0.0;
                }
            }

            step += 1;
            if step % cfg.insert_interval == 0 {
                let recent = window_err / cfg.insert_interval as f64;
                window_err = 0.0;
                if g.count() < cfg.max_nodes && recent > cfg.growth_threshold {
                    insert_node(&mut g, cfg.split_factor);
                }
            }
            for e in g.err.iter_mut() {
                *e *= cfg.error_decay;
            }
        }
        epoch_errors.push(epoch_err / samples.len() as f64);
    }

    let nodes: Vec<GeneralizedState> = g.w.iter().flatten().copied().collect();
    let clusters = clusters_from_assignments(samples, &nodes, cfg.covariance_floor);
    Ok(GngOutcome {
        clusters,
        epoch_errors,
        nodes,
    })
}

fn insert_node(g: &mut Graph, split_factor: f64) {
    let q = g
        .alive()
        .max_by(|&a, &b| g.err[a].total_cmp(&g.err[b]).then(b.cmp(&a)))
        .expect("graph has nodes");
    let Some(f) = g
        .neighbours(q)
        .into_iter()
        .max_by(|&a, &b| g.err[a].total_cmp(&g.err[b]).then(b.cmp(&a)))
    else {
        return;
    };
    let r = g.w.len();
    g.w.push(Some((g.w[q].unwrap() + g.w[f].unwrap()) * 0.5));
    g.edges.remove(&key(q, f));
    g.edges.insert(key(q, r), 0);
    g.edges.insert(key(f, r), 0);
    g.err[q] *= split_factor;
    g.err[f] *= split_factor;
    g.err.push(g.err[q]);
}

fn nearest(x: &GeneralizedState, means: &[GeneralizedState]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, m) in means.iter().enumerate() {
        let d = (m - x).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Re-estimates clusters from nearest-node assignments, dropping nodes that
/// win no sample.
pub(crate) fn clusters_from_assignments(
    samples: &[GeneralizedState],
    nodes: &[GeneralizedState],
    floor: f64,
) -> Vec<DiscreteCluster> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (i, x) in samples.iter().enumerate() {
        members[nearest(x, nodes)].push(i);
    }
    members
        .into_iter()
        .filter(|m| !m.is_empty())
        .enumerate()
        .map(|(id, m)| {
            let n = m.len() as f64;
            let mean = m.iter().map(|&i| samples[i]).sum::<GeneralizedState>() / n;
            let mut cov = Matrix4::zeros();
            for &i in &m {
                let d = samples[i] - mean;
                cov += d * d.transpose();
            }
            cov /= n;
            cov += Matrix4::identity() * floor;
            DiscreteCluster {
                id,
                mean,
                covariance: cov,
                hit_count: m.len(),
            }
        })
        .collect()
}
