use num_complex::Complex64;

use super::constellation::{modulate, QPSK_WORDS};
use super::{ConstellationConfig, PhyError};

/// Decoding order by received power `p g`, strongest first. Ties go to the
/// lower index.
pub fn sic_order(powers: &[f64], gains: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..powers.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = powers[a] * gains[a];
        let rb = powers[b] * gains[b];
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct SicOutcome {
    /// Index into [`QPSK_WORDS`] of each user's decision, in input order.
    pub symbols: Vec<usize>,
    pub residual: f64,
}

/// Hard-decision SIC. The user at rank `r` of `order` is detected on the
/// constellation rotated by `r` steps.
pub fn sic_decode(
    composite: Complex64,
    powers: &[f64],
    gains: &[f64],
    order: &[usize],
    cfg: &ConstellationConfig,
) -> Result<SicOutcome, PhyError> {
    if powers.len() != gains.len() || order.len() != powers.len() {
        return Err(PhyError::LengthMismatch(format!(
            "{} powers, {} gains, order of {}",
            powers.len(),
            gains.len(),
            order.len()
        )));
    }
    let step = cfg.rotation_step();
    let mut residual = composite;
    let mut symbols = vec![0; powers.len()];
    for (rank, &user) in order.iter().enumerate() {
        let amp = (powers[user] * gains[user]).sqrt();
        let mut best = (f64::INFINITY, 0, Complex64::new(0.0, 0.0));
        for (w, word) in QPSK_WORDS.iter().enumerate() {
            let point = modulate(word, rank, step)? * amp;
            let d = (residual - point).norm_sqr();
            if d < best.0 {
                best = (d, w, point);
            }
        }
        symbols[user] = best.1;
        residual -= best.2;
    }
    Ok(SicOutcome {
        symbols,
        residual: residual.norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::constellation::superimpose;
    use super::*;

    #[test]
    fn order_examples() {
        assert_eq!(sic_order(&[1.0, 1.0, 1.0], &[1.0, 3.0, 2.0]), vec![1, 2, 0]);
        assert_eq!(sic_order(&[2.0], &[0.5]), vec![0]);
        assert_eq!(sic_order(&[1.0; 4], &[2.0; 4]), vec![0, 1, 2, 3]);
    }

    #[test]
    fn two_user_noiseless_recovery_is_exact() {
        let cfg = ConstellationConfig::new(0.1, 1.0, 2).unwrap();
        let powers = [4.0, 1.0];
        let gains = [1.0, 1.0];
        let order = sic_order(&powers, &gains);
        for a in 0..4 {
            for b in 0..4 {
                let xs = [
                    modulate(&QPSK_WORDS[a], 0, cfg.rotation_step()).unwrap(),
                    modulate(&QPSK_WORDS[b], 1, cfg.rotation_step()).unwrap(),
                ];
                let c = superimpose(&xs, &powers, &gains).unwrap();
                let out = sic_decode(c, &powers, &gains, &order, &cfg).unwrap();
                assert_eq!(out.symbols, vec![a, b]);
                assert!(out.residual < 1e-12);
            }
        }
    }

    #[test]
    fn single_user_recovery() {
        let cfg = ConstellationConfig::new(0.1, 1.0, 1).unwrap();
        for a in 0..4 {
            let x = modulate(&QPSK_WORDS[a], 0, cfg.rotation_step()).unwrap() * 3.0;
            let out = sic_decode(x, &[9.0], &[1.0], &[0], &cfg).unwrap();
            assert_eq!(out.symbols, vec![a]);
            assert!(out.residual < 1e-12);
        }
    }
}
