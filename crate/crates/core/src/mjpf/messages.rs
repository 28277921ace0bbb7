use nalgebra::{DMatrix, DVector, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use super::filter::BeliefState;
use super::MjpfError;
use crate::gdbn::ContinuousDynamics;

/// Multivariate normal density parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, MjpfError> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(MjpfError::Dimension(format!(
                "mean of length {} with {}x{} covariance",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Self { mean, cov })
    }

    pub fn scalar(mean: f64, var: f64) -> Self {
        Self {
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, var),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageKind {
    Prediction,
    Diagnostic,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Continuous(MessageKind, Gaussian),
    Discrete(MessageKind, Vec<f64>),
}

/// How the two levels' abnormalities are merged into one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combiner {
    #[default]
    Sum,
    Max,
}

impl Combiner {
    pub fn combine(self, continuous: f64, discrete: f64) -> f64 {
        match self {
            Combiner::Sum => continuous + discrete,
            Combiner::Max => continuous.max(discrete),
        }
    }
}

fn check_psd(cov: &DMatrix<f64>) -> Result<(), MjpfError> {
    let sym = (cov - cov.transpose()).abs().max() <= 1e-9 * cov.abs().max().max(1.0);
    if !sym || cov.clone().symmetric_eigenvalues().iter().any(|&e| e < -1e-10) {
        return Err(MjpfError::NotPsd);
    }
    Ok(())
}

/// `-ln BC` between two Gaussians, in closed form.
pub fn abnormality(pi: &Gaussian, lambda: &Gaussian) -> Result<f64, MjpfError> {
    if pi.mean.len() != lambda.mean.len() {
        return Err(MjpfError::Dimension(format!(
            "{} vs {}",
            pi.mean.len(),
            lambda.mean.len()
        )));
    }
    check_psd(&pi.cov)?;
    check_psd(&lambda.cov)?;
    let avg = (&pi.cov + &lambda.cov) * 0.5;
    let chol = avg.clone().cholesky().ok_or(MjpfError::DegenerateCovariance)?;
    let diff = &pi.mean - &lambda.mean;
    let maha = diff.dot(&chol.solve(&diff));
    let ln_det = |m: &DMatrix<f64>| -> Result<f64, MjpfError> {
        let c = m.clone().cholesky().ok_or(MjpfError::DegenerateCovariance)?;
        Ok(2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
    };
    let ln_avg = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let value = maha / 8.0 + 0.5 * (ln_avg - 0.5 * (ln_det(&pi.cov)? + ln_det(&lambda.cov)?));
    Ok(value.max(0.0))
}

/// `-ln Σ sqrt(π λ)` over two weight vectors.
pub fn discrete_abnormality(pi: &[f64], lambda: &[f64]) -> f64 {
    let bc: f64 = pi.iter().zip(lambda).map(|(a, b)| (a * b).max(0.0).sqrt()).sum();
    if bc <= 0.0 {
        return f64::INFINITY;
    }
    (-bc.ln()).max(0.0)
}

/// Messages of one filter slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Messages {
    /// Moment-matched prediction of the generalized state.
    pub pi_x: Gaussian,
    /// Observation likelihood in observation space.
    pub lambda_x: Gaussian,
    pub pi_s: Vec<f64>,
    pub lambda_s: Vec<f64>,
}

impl Messages {
    pub fn as_messages(&self) -> [Message; 4] {
        [
            Message::Continuous(MessageKind::Prediction, self.pi_x.clone()),
            Message::Continuous(MessageKind::Diagnostic, self.lambda_x.clone()),
            Message::Discrete(MessageKind::Prediction, self.pi_s.clone()),
            Message::Discrete(MessageKind::Diagnostic, self.lambda_s.clone()),
        ]
    }

    /// Prediction projected into observation space.
    pub fn predicted_observation(&self, dyn_: &ContinuousDynamics) -> Gaussian {
        let h = DMatrix::from_iterator(2, 4, dyn_.h.iter().copied());
        Gaussian {
            mean: &h * &self.pi_x.mean,
            cov: &h * &self.pi_x.cov * h.transpose(),
        }
    }
}

fn cluster_weights(belief: &BeliefState, num_clusters: usize) -> Vec<f64> {
    let mut w = vec![0.0; num_clusters];
    for p in &belief.particles {
        w[p.cluster] += p.weight;
    }
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|x| *x /= total);
    }
    w
}

/// Builds the four messages from the predicted belief (prior weights) and
/// the updated belief (posterior weights, before resampling).
pub fn compute_messages(
    predicted: &BeliefState,
    updated: &BeliefState,
    z: &Vector2<f64>,
    dyn_: &ContinuousDynamics,
    num_clusters: usize,
) -> Messages {
    let total: f64 = predicted.particles.iter().map(|p| p.weight).sum();
    let mut mean = Vector4::zeros();
    for p in &predicted.particles {
        mean += p.mean * (p.weight / total);
    }
    let mut cov = Matrix4::zeros();
    for p in &predicted.particles {
        let d = p.mean - mean;
        cov += (p.cov + d * d.transpose()) * (p.weight / total);
    }
    cov = (cov + cov.transpose()) * 0.5;
    Messages {
        pi_x: Gaussian {
            mean: DVector::from_iterator(4, mean.iter().copied()),
            cov: DMatrix::from_iterator(4, 4, cov.iter().copied()),
        },
        lambda_x: Gaussian {
            mean: DVector::from_iterator(2, z.iter().copied()),
            cov: DMatrix::from_iterator(2, 2, dyn_.r.iter().copied()),
        },
        pi_s: cluster_weights(predicted, num_clusters),
        lambda_s: cluster_weights(updated, num_clusters),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let a = Gaussian::scalar(0.0, 1.0);
        assert!(abnormality(&a, &a).unwrap().abs() < 1e-12);
        let v = abnormality(&a, &Gaussian::scalar(1.0, 1.0)).unwrap();
        assert!((v - 0.125).abs() < 1e-12);
        let v = abnormality(&a, &Gaussian::scalar(0.0, 4.0)).unwrap();
        assert!((v - 0.5 * (2.5f64 / 2.0).ln()).abs() < 1e-12);
        assert!((v - 0.11157).abs() < 1e-5);
    }

    #[test]
    fn symmetric_and_monotone() {
        let a = Gaussian::scalar(0.3, 0.7);
        let b = Gaussian::scalar(-1.0, 2.0);
        assert!((abnormality(&a, &b).unwrap() - abnormality(&b, &a).unwrap()).abs() < 1e-12);
        let base = Gaussian::scalar(0.0, 1.0);
        let mut last = -1.0;
        for mu in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let v = abnormality(&base, &Gaussian::scalar(mu, 1.0)).unwrap();
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn rejects_non_psd() {
        let a = Gaussian::scalar(0.0, 1.0);
        assert_eq!(
            abnormality(&a, &Gaussian::scalar(0.0, -1.0)).unwrap_err(),
            MjpfError::NotPsd
        );
        let two = Gaussian::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert!(abnormality(&a, &two).is_err());
    }

    #[test]
    fn discrete_cases() {
        assert!(discrete_abnormality(&[0.2, 0.8], &[0.2, 0.8]).abs() < 1e-12);
        assert!(discrete_abnormality(&[1.0, 0.0], &[0.0, 1.0]).is_infinite());
        assert!(discrete_abnormality(&[0.5, 0.5], &[0.9, 0.1]) > 0.0);
    }
}
