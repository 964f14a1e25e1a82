//! Weighted cross-entropy terms of the episodic objective.

use crate::error::{Error, Result};
use crate::model::{classify, harden, one_hot, ModelConfig, ModelParams, PairFeatures};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Added inside the logarithm. The shifted value is divided by `1 + ε` so
/// that every log term stays non-positive.
pub const LOG_EPS: f64 = 1e-8;

/// Per-pixel class columns must sum to one within this.
pub const NORMALIZATION_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub background: f64,
    pub foreground: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights {
            background: 0.05,
            foreground: 1.0,
        }
    }
}

/// `−(1/HW) Σ weight_j · gt_j · log((pred_j + ε) / (1 + ε))` for `pred`,
/// `gt` of shape `2×H×W`.
pub fn seg_loss<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &Tensor<T>, weights: ClassWeights) -> Result<Var> {
    let s = tape.shape(pred).to_vec();
    if s.len() != 3 || s[0] != 2 || gt.shape() != s.as_slice() {
        return Err(Error::shape("seg_loss", &s, gt.shape()));
    }
    let hw = s[1] * s[2];
    let p = tape.value(pred).data();
    for i in 0..hw {
        let total = p[i] + p[hw + i];
        if (total.to_f64() - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Contract(format!("prediction column {i} sums to {total}")));
        }
    }
    let scale = [weights.background, weights.foreground].map(|w| T::lit(-w / hw as f64));
    let coef = Tensor::from_fn(s.clone(), |i| gt.data()[i] * scale[i / hw])?;
    let shifted = tape.add_scalar(pred, T::lit(LOG_EPS));
    let shifted = tape.scale(shifted, T::lit(1.0 / (1.0 + LOG_EPS)));
    let logp = tape.log(shifted);
    let c = tape.constant(coef);
    let terms = tape.mul(logp, c)?;
    Ok(tape.sum(terms))
}

/// Reversed-episode term: the query's hardened prediction becomes the
/// support annotation, and the support image is segmented against its own
/// pseudo-label. Returns `None` when the hardened mask leaves either class
/// without pixels at feature resolution.
pub fn reg_loss<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    feats: PairFeatures,
    query_hard: &Tensor<u8>,
    support_mask: &Tensor<u8>,
    weights: ClassWeights,
) -> Result<Option<Var>> {
    match classify(tape, params, cfg, feats.z_q, query_hard, feats.z_s) {
        Ok(prob) => {
            let gt = one_hot::<T>(support_mask)?;
            seg_loss(tape, prob, &gt, weights).map(Some)
        }
        Err(Error::EmptyClass { class }) => {
            log::debug!("regularization skipped: predicted mask has no class {class} pixels");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Hardened query prediction used by [`reg_loss`].
pub fn hardened_prediction<T: Real>(tape: &Tape<T>, prob: Var) -> Result<Tensor<u8>> {
    harden(tape.value(prob))
}

/// `seg + λ·reg`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, seg: Var, reg: Option<Var>, lambda_reg: f64) -> Result<Var> {
    if !(lambda_reg >= 0.0) {
        return Err(Error::Config(format!("lambda_reg must be non-negative, got {lambda_reg}")));
    }
    match reg {
        Some(r) if lambda_reg > 0.0 => {
            let scaled = tape.scale(r, T::lit(lambda_reg));
            tape.add(seg, scaled)
        }
        _ => Ok(seg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(tape: &mut Tape<f64>, fg: &[f64]) -> Var {
        let n = fg.len();
        let data = fg.iter().map(|p| 1.0 - p).chain(fg.iter().copied()).collect();
        tape.constant(Tensor::new(vec![2, 1, n], data).unwrap())
    }

    #[test]
    fn single_pixel_half_half() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[0.5]);
        let gt = one_hot::<f64>(&Tensor::new(vec![1, 1], vec![1u8]).unwrap()).unwrap();
        let l = seg_loss(&mut tape, p, &gt, ClassWeights::default()).unwrap();
        let want = -((0.5f64 + LOG_EPS) / (1.0 + LOG_EPS)).ln();
        assert!((tape.value(l).data()[0] - want).abs() < 1e-15);
        assert!((want - std::f64::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let mut tape = Tape::new();
        let mask = Tensor::new(vec![1, 4], vec![0u8, 1, 1, 0]).unwrap();
        let gt = one_hot::<f64>(&mask).unwrap();
        let p = probs(&mut tape, &[0.0, 1.0, 1.0, 0.0]);
        let l = seg_loss(&mut tape, p, &gt, ClassWeights::default()).unwrap();
        let v = tape.value(l).data()[0];
        assert!((0.0..1e-6).contains(&v));
    }

    #[test]
    fn loss_is_linear_in_weights() {
        let mask = Tensor::new(vec![1, 3], vec![0u8, 1, 0]).unwrap();
        let gt = one_hot::<f64>(&mask).unwrap();
        let eval = |w: ClassWeights| {
            let mut tape = Tape::new();
            let p = probs(&mut tape, &[0.2, 0.7, 0.4]);
            let l = seg_loss(&mut tape, p, &gt, w).unwrap();
            tape.value(l).data()[0]
        };
        let base = eval(ClassWeights::default());
        let doubled = eval(ClassWeights {
            background: 0.1,
            foreground: 2.0,
        });
        assert!((doubled - 2.0 * base).abs() < 1e-14);
    }

    #[test]
    fn unnormalized_prediction_is_a_contract_error() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![2, 1, 1], vec![0.5, 0.6]).unwrap());
        let gt = one_hot::<f64>(&Tensor::new(vec![1, 1], vec![0u8]).unwrap()).unwrap();
        assert!(matches!(
            seg_loss(&mut tape, p, &gt, ClassWeights::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn total_loss_cases() {
        let mut tape = Tape::<f64>::new();
        let seg = tape.constant(Tensor::scalar(0.3));
        let reg = tape.constant(Tensor::scalar(0.2));
        let t = total_loss(&mut tape, seg, Some(reg), 1.0).unwrap();
        assert!((tape.value(t).data()[0] - 0.5).abs() < 1e-15);
        let t0 = total_loss(&mut tape, seg, Some(reg), 0.0).unwrap();
        assert_eq!(tape.value(t0).data()[0], 0.3);
        let tn = total_loss(&mut tape, seg, None, 1.0).unwrap();
        assert_eq!(tape.value(tn).data()[0], 0.3);
        assert!(matches!(total_loss(&mut tape, seg, Some(reg), -1.0), Err(Error::Config(_))));
        // slope in λ equals reg
        let a = total_loss(&mut tape, seg, Some(reg), 0.7).unwrap();
        let b = total_loss(&mut tape, seg, Some(reg), 0.7 + 1e-3).unwrap();
        let slope = (tape.value(b).data()[0] - tape.value(a).data()[0]) / 1e-3;
        assert!((slope - 0.2).abs() < 1e-9);
    }
}
