use num_complex::Complex64;

use super::PhyError;

/// All 2-bit words in Gray order around the constellation.
pub const QPSK_WORDS: [[u8; 2]; 4] = [[0, 0], [0, 1], [1, 1], [1, 0]];

fn sign(bit: u8) -> Result<f64, PhyError> {
    match bit {
        0 => Ok(1.0),
        1 => Ok(-1.0),
        _ => Err(PhyError::InvalidBit),
    }
}

/// Phase offset of the constellation used by SIC rank `user`.
pub fn rotation(user: usize, step: f64) -> Complex64 {
    Complex64::from_polar(1.0, user as f64 * step)
}

/// Gray-coded unit-energy QPSK symbol rotated by the user's fixed offset.
/// The first bit selects the sign of the in-phase part, the second the sign
/// of the quadrature part.
pub fn modulate(bits: &[u8], user: usize, step: f64) -> Result<Complex64, PhyError> {
    if bits.len() != 2 {
        return Err(PhyError::WordLength {
            expected: 2,
            got: bits.len(),
        });
    }
    let x = Complex64::new(sign(bits[0])?, sign(bits[1])?) * std::f64::consts::FRAC_1_SQRT_2;
    Ok(x * rotation(user, step))
}

/// BPSK symbol on the in-phase axis for primary users.
pub fn modulate_pu(bit: u8) -> Result<Complex64, PhyError> {
    Ok(Complex64::new(sign(bit)?, 0.0))
}

/// Noise-free composite `Σ sqrt(p g) x`.
pub fn superimpose(symbols: &[Complex64], powers: &[f64], gains: &[f64]) -> Result<Complex64, PhyError> {
    if symbols.len() != powers.len() || symbols.len() != gains.len() {
        return Err(PhyError::LengthMismatch(format!(
            "{} symbols, {} powers, {} gains",
            symbols.len(),
            powers.len(),
            gains.len()
        )));
    }
    Ok(symbols
        .iter()
        .zip(powers.iter().zip(gains))
        .map(|(x, (p, g))| x * (p * g).sqrt())
        .sum())
}
