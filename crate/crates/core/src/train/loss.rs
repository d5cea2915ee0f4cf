//! Per-channel binary cross-entropy on logits.

use super::TrainError;

/// Logistic function, evaluated without overflow for large |z|.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `−[y·ln σ(z) + (1−y)·ln(1−σ(z))]` in the composite form
/// `max(z,0) − z·y + ln(1 + e^{−|z|})`.
pub fn bce_cell(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Derivative of [`bce_cell`] with respect to the logit.
pub fn bce_cell_grad(z: f64, y: f64) -> f64 {
    sigmoid(z) - y
}

fn check(logits: &[f64], targets: &[u8], width: usize) -> Result<(), TrainError> {
    if width == 0 || !logits.len().is_multiple_of(width) || logits.len() != targets.len() {
        return Err(TrainError::Shape(format!(
            "{} logits and {} targets do not form rows of width {width}",
            logits.len(),
            targets.len()
        )));
    }
    if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
        return Err(TrainError::NonFinite(format!(
            "logit {} (row {}, class {}) is {}",
            i,
            i / width,
            i % width,
            logits[i]
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy over all (sample, class) cells. `logits` and
/// `targets` are row-major with `width` classes per sample.
pub fn bce_multilabel_loss(logits: &[f64], targets: &[u8], width: usize) -> Result<f64, TrainError> {
    check(logits, targets, width)?;
    if logits.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| bce_cell(z, y as f64))
        .sum();
    Ok(sum / logits.len() as f64)
}

/// Mean loss together with its gradient `(σ(z) − y) / cells` with respect
/// to every logit.
pub fn bce_multilabel_loss_grad(
    logits: &[f64],
    targets: &[u8],
    width: usize,
) -> Result<(f64, Vec<f64>), TrainError> {
    let loss = bce_multilabel_loss(logits, targets, width)?;
    let scale = 1.0 / logits.len().max(1) as f64;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| bce_cell_grad(z, y as f64) * scale)
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Textbook form straight from probabilities; only sensible for moderate z.
    fn naive(z: f64, y: f64) -> f64 {
        let p = 1.0 / (1.0 + (-z).exp());
        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    }

    #[test]
    fn anchor_points() {
        let l = bce_multilabel_loss(&[0.0], &[1], 1).unwrap();
        assert_relative_eq!(l, std::f64::consts::LN_2, epsilon = 1e-15);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_multilabel_loss(&[40.0], &[1], 1).unwrap() < 1e-12);
        assert!(bce_multilabel_loss(&[-40.0], &[0], 1).unwrap() < 1e-12);
        let l = bce_multilabel_loss(&[0.0, 2.0], &[1, 0], 2).unwrap();
        let expected = (naive(0.0, 1.0) + naive(2.0, 0.0)) / 2.0;
        assert_relative_eq!(l, expected, epsilon = 1e-14);
        assert!((l - 1.410038).abs() < 1e-6);
        assert!((naive(2.0, 0.0) - 2.126928).abs() < 1e-6);
    }

    #[test]
    fn saturation_is_finite() {
        let l = bce_multilabel_loss(&[1000.0, -1000.0], &[0, 1], 2).unwrap();
        assert_relative_eq!(l, 1000.0, epsilon = 1e-9);
    }

    #[test]
    fn shape_and_finiteness_errors() {
        assert!(matches!(
            bce_multilabel_loss(&[0.0, 1.0, 2.0], &[0, 1, 0], 2),
            Err(TrainError::Shape(_))
        ));
        assert!(matches!(
            bce_multilabel_loss(&[0.0, 1.0], &[0], 2),
            Err(TrainError::Shape(_))
        ));
        assert!(matches!(
            bce_multilabel_loss(&[0.0, f64::NAN], &[0, 1], 2),
            Err(TrainError::NonFinite(_))
        ));
        assert!(matches!(
            bce_multilabel_loss(&[f64::INFINITY], &[1], 1),
            Err(TrainError::NonFinite(_))
        ));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let width = rng.gen_range(1..=8);
            let rows = rng.gen_range(1..=4);
            let n = width * rows;
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let targets: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
            let (_, grad) = bce_multilabel_loss_grad(&logits, &targets, width).unwrap();
            for i in 0..n {
                let h = 1e-5;
                let mut up = logits.clone();
                up[i] += h;
                let mut down = logits.clone();
                down[i] -= h;
                let fd = (bce_multilabel_loss(&up, &targets, width).unwrap()
                    - bce_multilabel_loss(&down, &targets, width).unwrap())
                    / (2.0 * h);
                let per_cell = grad[i] * n as f64;
                assert_relative_eq!(per_cell, sigmoid(logits[i]) - targets[i] as f64, epsilon = 1e-15);
                assert_relative_eq!(grad[i], fd, max_relative = 1e-4, epsilon = 1e-10);
            }
        }
    }

    proptest! {
        #[test]
        fn nonnegative_and_matches_naive(z in -15.0f64..15.0, y in 0u8..=1) {
            let l = bce_cell(z, y as f64);
            prop_assert!(l >= 0.0);
            let n = naive(z, y as f64);
            prop_assert!((l - n).abs() <= 1e-9 * n.max(1.0));
        }

        #[test]
        fn sigmoid_in_unit_interval(z in -800.0f64..800.0) {
            let s = sigmoid(z);
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
