use super::{MaskPlan, ModelError};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Mean squared error over the rows of `pred` listed in `masked`.
pub fn masked_mse<T: Real>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>, masked: &[usize]) -> Result<Var, ModelError> {
    if masked.is_empty() {
        return Err(ModelError::Mask("loss needs at least one masked patch".into()));
    }
    let p = tape.gather_rows(pred, masked)?;
    let rows: Vec<T> = masked.iter().flat_map(|&i| target.row(i).iter().copied()).collect();
    let t = tape.constant(Tensor::new(vec![masked.len(), target.cols()], rows)?);
    let d = tape.sub(p, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_modality: Vec<f64>,
}

/// Weighted sum of per-modality MSEs over masked patches, accumulated in
/// `f64`. `preds` and `targets` are patch matrices `[N, patch_dim]`.
pub fn pretrain_loss(preds: &[Tensor], targets: &[Tensor], plans: &[MaskPlan], weights: &[f64]) -> Result<LossBreakdown, ModelError> {
    let n = preds.len();
    for len in [targets.len(), plans.len(), weights.len()] {
        if len != n {
            return Err(ModelError::InputCount { expected: n, got: len });
        }
    }
    let mut per_modality = Vec::with_capacity(n);
    for ((pred, target), plan) in preds.iter().zip(targets).zip(plans) {
        if pred.shape() != target.shape() {
            return Err(ModelError::ImageShape {
                expected: target.shape().to_vec(),
                got: pred.shape().to_vec(),
            });
        }
        if plan.masked.is_empty() {
            return Err(ModelError::Mask("loss needs at least one masked patch".into()));
        }
        let mut acc = 0.0f64;
        for &i in &plan.masked {
            for (a, b) in pred.row(i).iter().zip(target.row(i)) {
                let d = f64::from(*a) - f64::from(*b);
                acc += d * d;
            }
        }
        per_modality.push(acc / (plan.masked.len() * pred.cols()) as f64);
    }
    let total = per_modality.iter().zip(weights).map(|(l, w)| l * w).sum();
    Ok(LossBreakdown { total, per_modality })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan() -> MaskPlan {
        MaskPlan::from_masked(4, &[0, 2]).unwrap()
    }

    #[test]
    fn perfect_reconstruction_is_zero() {
        let x = Tensor::from_fn(&[4, 3], |i| i as f32 * 0.1);
        let l = pretrain_loss(&[x.clone(), x.clone()], &[x.clone(), x], &[plan(), plan()], &[1.0, 1.0]).unwrap();
        assert_eq!(l.total, 0.0);
        assert_eq!(l.per_modality, vec![0.0, 0.0]);
    }

    #[test]
    fn constant_offset_gives_square() {
        let x = Tensor::from_fn(&[4, 3], |i| i as f32 * 0.25);
        let y = Tensor::from_fn(&[4, 3], |i| i as f32 * 0.25 + 0.5);
        let l = pretrain_loss(&[y], &[x], &[plan()], &[1.0]).unwrap();
        assert_eq!(l.per_modality[0], 0.25);
    }

    #[test]
    fn weighted_sum_of_parts() {
        let x = Tensor::zeros(&[4, 1]);
        let preds: Vec<Tensor> = (1..=5).map(|k| Tensor::full(&[4, 1], (k as f32).sqrt())).collect();
        let targets = vec![x; 5];
        let plans = vec![plan(); 5];
        let l = pretrain_loss(&preds, &targets, &plans, &[1.0; 5]).unwrap();
        for (k, v) in l.per_modality.iter().enumerate() {
            assert!((v - (k + 1) as f64).abs() < 1e-6);
        }
        assert!((l.total - 15.0).abs() < 1e-5);
    }

    #[test]
    fn visible_patches_do_not_count() {
        let x = Tensor::from_fn(&[4, 3], |i| (i as f32).sin());
        let mut y = x.clone();
        let base = pretrain_loss(std::slice::from_ref(&y), std::slice::from_ref(&x), &[plan()], &[1.0]).unwrap();
        // row 1 is visible
        y.data_mut()[3..6].iter_mut().for_each(|v| *v += 7.0);
        assert_eq!(pretrain_loss(&[y], &[x], &[plan()], &[1.0]).unwrap(), base);
    }

    #[test]
    fn tape_and_direct_agree() {
        let x = Tensor::from_fn(&[4, 3], |i| (i as f32 * 0.7).cos());
        let y = Tensor::from_fn(&[4, 3], |i| (i as f32 * 0.3).sin());
        let mut tape = Tape::<f32>::new();
        let p = tape.input(y.clone());
        let l = masked_mse(&mut tape, p, &x, &plan().masked).unwrap();
        let direct = pretrain_loss(&[y], &[x], &[plan()], &[1.0]).unwrap().total;
        assert!((f64::from(tape.value(l).data()[0]) - direct).abs() < 1e-6);
    }

    #[test]
    fn empty_masked_set_rejected() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(pretrain_loss(
            std::slice::from_ref(&x),
            std::slice::from_ref(&x),
            &[MaskPlan::fully_visible(2)],
            &[1.0]
        )
        .is_err());
    }
}
