//! Rotary position embedding.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Rotates consecutive pairs `(x[2i], x[2i+1])` of every row by
/// `position · base^(-2i/d)`, with `d` the full last dimension.
pub fn rope_apply(x: &Tensor, positions: &[usize], base_frequency: f64) -> Result<Tensor> {
    let pos: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
    rope_heads(x, &pos, base_frequency, x.cols(), false)
}

/// Per-head rotation: the last dimension is split into chunks of `head_dim`
/// and each chunk is rotated independently. `inverse` rotates by the negated
/// angle, which is the adjoint used in the backward pass.
pub fn rope_heads(
    x: &Tensor,
    positions: &[f64],
    base_frequency: f64,
    head_dim: usize,
    inverse: bool,
) -> Result<Tensor> {
    let cols = x.cols();
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::Dimension(format!("rotary dimension must be even, got {head_dim}")));
    }
    if !cols.is_multiple_of(head_dim) {
        return Err(Error::Dimension(format!("row width {cols} is not a multiple of rotary dimension {head_dim}")));
    }
    if positions.len() != x.rows() {
        return Err(Error::Dimension(format!("{} positions for {} rows", positions.len(), x.rows())));
    }
    let half = head_dim / 2;
    let inv_freq: Vec<f64> = (0..half).map(|i| base_frequency.powf(-(2.0 * i as f64) / head_dim as f64)).collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = x.clone();
    for (r, &p) in positions.iter().enumerate() {
        let trig: Vec<(f64, f64)> = inv_freq.iter().map(|&f| (sign * p * f).sin_cos()).collect();
        let row = out.row_mut(r);
        for chunk in row.chunks_mut(head_dim) {
            for (i, &(s, c)) in trig.iter().enumerate() {
                let (a, b) = (chunk[2 * i], chunk[2 * i + 1]);
                chunk[2 * i] = a * c - b * s;
                chunk[2 * i + 1] = a * s + b * c;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::rng::{seeded_init, InitDistribution, RngState};

    #[test]
    fn position_zero_is_identity() {
        let x = Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        assert_eq!(rope_apply(&x, &[0], 1e6).unwrap(), x);
    }

    #[test]
    fn quarter_turn() {
        // base chosen so the first pair turns by exactly `p` radians
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let pos = [std::f64::consts::FRAC_PI_2];
        let y = rope_heads(&x, &pos, 10_000.0, 2, false).unwrap();
        assert!(y.data()[0].abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn odd_dimension_rejected() {
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(rope_apply(&x, &[1], 1e4), Err(Error::Dimension(_))));
    }

    #[test]
    fn rotation_preserves_norm() {
        let mut rng = RngState::new(0);
        let x = seeded_init(&[8, 16], InitDistribution::TruncatedNormal, 1.0, &mut rng).unwrap();
        let pos: Vec<usize> = (0..8).map(|i| i * 37).collect();
        let y = rope_apply(&x, &pos, 1e6).unwrap();
        assert!((y.norm_l2() - x.norm_l2()).abs() < 1e-10);
        for r in 0..8 {
            for p in 0..8 {
                let n0 = x.row(r)[2 * p].hypot(x.row(r)[2 * p + 1]);
                let n1 = y.row(r)[2 * p].hypot(y.row(r)[2 * p + 1]);
                assert!((n0 - n1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inverse_undoes_rotation() {
        let mut rng = RngState::new(1);
        let x = seeded_init(&[3, 8], InitDistribution::Uniform, 1.0, &mut rng).unwrap();
        let pos = [1.0, 5.0, 11.0];
        let y = rope_heads(&x, &pos, 1e4, 4, false).unwrap();
        let back = rope_heads(&y, &pos, 1e4, 4, true).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
