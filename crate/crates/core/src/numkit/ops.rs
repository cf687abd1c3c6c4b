use rand::Rng;

use super::RngStream;
use crate::error::{Error, Result};
use crate::Float;

fn check_logits(v: &[Float]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidInput("empty logit vector".into()));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite logit at index {i}")));
    }
    Ok(())
}

/// `log Σ exp(v_i)` with max subtraction.
pub fn log_sum_exp(v: &[Float]) -> f64 {
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let sum: f64 = v.iter().map(|&x| (x as f64 - max).exp()).sum();
    max + sum.ln()
}

pub fn softmax(v: &[Float]) -> Result<Vec<Float>> {
    check_logits(v)?;
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let exps: Vec<f64> = v.iter().map(|&x| (x as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| (e / sum) as Float).collect())
}

/// Cross-entropy loss and its gradient with respect to the logits.
pub fn cross_entropy_with_grad(logits: &[Float], target: usize) -> Result<(f64, Vec<Float>)> {
    check_logits(logits)?;
    if target >= logits.len() {
        return Err(Error::Index {
            index: target,
            len: logits.len(),
        });
    }
    let lse = log_sum_exp(logits);
    let loss = lse - logits[target] as f64;
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let p = (x as f64 - lse).exp();
            (if i == target { p - 1.0 } else { p }) as Float
        })
        .collect();
    Ok((loss, grad))
}

/// Inverted-dropout scale vector. Identity when `rate == 0` or when not
/// training; in those cases the stream is not advanced.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut RngStream, train: bool) -> Result<Vec<Float>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if rate == 0.0 || !train {
        return Ok(vec![1.0; len]);
    }
    let keep = (1.0 / (1.0 - rate)) as Float;
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 1000.0, 1000.0]).unwrap();
        for x in &p {
            assert!(close(*x as f64, 1.0 / 3.0, 1e-7));
        }
        // exp(k - 3) / (e^-2 + e^-1 + 1) evaluated in f64
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let expected = [0.09003057, 0.24472847, 0.66524096];
        for (x, e) in p.iter().zip(expected) {
            assert!(close(*x as f64, e, 1e-5));
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax(&[]), Err(Error::InvalidInput(_))));
        assert!(matches!(
            softmax(&[0.0, Float::NAN]),
            Err(Error::InvalidInput(_))
        ));
        assert!(softmax(&[Float::NEG_INFINITY, 0.0]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, g) = cross_entropy_with_grad(&[0.0, 0.0], 0).unwrap();
        assert!(close(loss, std::f64::consts::LN_2, 1e-12));
        assert!(close(g[0] as f64, -0.5, 1e-12) && close(g[1] as f64, 0.5, 1e-12));

        // log(1 + e^-20) and e^-20 / (1 + e^-20)
        let (loss, g) = cross_entropy_with_grad(&[10.0, -10.0], 0).unwrap();
        let tiny = (-20f64).exp() / (1.0 + (-20f64).exp());
        assert!(close(loss, (-20f64).exp().ln_1p(), 1e-15));
        assert!(close(loss, 2.06e-9, 1e-11));
        assert!(close(g[0] as f64, -tiny, 1e-15) && close(g[1] as f64, tiny, 1e-15));

        assert!(matches!(
            cross_entropy_with_grad(&[0.0, 1.0], 2),
            Err(Error::Index { index: 2, len: 2 })
        ));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = RngStream::new(1, 0);
        assert_eq!(dropout_mask(5, 0.0, &mut rng, true).unwrap(), vec![1.0; 5]);
        assert_eq!(dropout_mask(5, 0.5, &mut rng, false).unwrap(), vec![1.0; 5]);
        assert!(matches!(
            dropout_mask(5, 1.0, &mut rng, true),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn dropout_rate_concentrates() {
        // Binomial(1e5, 0.1) has sd ~95, so [9500, 10500] is > 5 sd wide.
        let mut rng = RngStream::new(7, 0);
        let m = dropout_mask(100_000, 0.1, &mut rng, true).unwrap();
        let zeros = m.iter().filter(|&&x| x == 0.0).count() as f64 / 1e5;
        assert!((0.095..=0.105).contains(&zeros), "zero fraction {zeros}");
        let kept = m.iter().find(|&&x| x != 0.0).copied().unwrap();
        assert!(close(kept as f64, 1.0 / 0.9, 1e-6));
    }

    #[test]
    fn dropout_deterministic() {
        let a = dropout_mask(64, 0.3, &mut RngStream::new(9, 2), true).unwrap();
        let b = dropout_mask(64, 0.3, &mut RngStream::new(9, 2), true).unwrap();
        let bits = |v: &[Float]| v.iter().map(|x| x.to_bits() as u64).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
