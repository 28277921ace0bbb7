use nalgebra::{Matrix2, Matrix2x4, Matrix4, Vector4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// `(I, Q, dI, dQ)`: one I/Q sample with its first difference.
pub type GeneralizedState = Vector4<f64>;

/// Linear switching dynamics `x_t = C x_{t-1} + D U_s + w`, `z_t = H x_t + v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousDynamics {
    pub c: Matrix4<f64>,
    pub d: Matrix4<f64>,
    /// One control vector per discrete cluster.
    pub control: Vec<Vector4<f64>>,
    pub q: Matrix4<f64>,
    pub h: Matrix2x4<f64>,
    pub r: Matrix2<f64>,
}

impl ContinuousDynamics {
    /// Constant-velocity dynamics with zero controls.
    pub fn constant_velocity(num_clusters: usize, q: f64, r: f64) -> Self {
        #[rustfmt::skip]
        let c = Matrix4::new(
            1.0, 0.0, 1.0, 0.0,
            0.0, 1.0, 0.0, 1.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        );
        Self {
            c,
            d: Matrix4::identity(),
            control: vec![Vector4::zeros(); num_clusters],
            q: Matrix4::identity() * q,
            h: Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0),
            r: Matrix2::identity() * r,
        }
    }

    pub fn is_consistent(&self) -> bool {
        let psd4 = |m: &Matrix4<f64>| {
            (m - m.transpose()).abs().max() < 1e-9
                && m.symmetric_eigenvalues().iter().all(|&e| e >= -1e-10)
        };
        let psd2 = |m: &Matrix2<f64>| {
            (m - m.transpose()).abs().max() < 1e-9
                && m.symmetric_eigenvalues().iter().all(|&e| e >= -1e-10)
        };
        psd4(&self.q) && psd2(&self.r)
    }
}

/// Error between an observed and a predicted generalized state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedError {
    pub at_value: Vector4<f64>,
    pub reference_state: GeneralizedState,
}

/// Static-evolution prediction `C x` (no control).
pub fn ukf_predict(x: &GeneralizedState, dyn_: &ContinuousDynamics) -> GeneralizedState {
    dyn_.c * x
}

pub fn generalized_error(pred: &GeneralizedState, obs: &GeneralizedState) -> GeneralizedError {
    GeneralizedError {
        at_value: obs - pred,
        reference_state: *obs,
    }
}

/// Generalized states of an I/Q sequence. The first sample has zero
/// derivative.
pub fn generalized_states(samples: &[Complex64]) -> Vec<GeneralizedState> {
    let mut prev: Option<Complex64> = None;
    samples
        .iter()
        .map(|&z| {
            let dz = prev.map_or(Complex64::new(0.0, 0.0), |p| z - p);
            prev = Some(z);
            Vector4::new(z.re, z.im, dz.re, dz.im)
        })
        .collect()
}
