//! Training objective: token cross-entropy on the assistant span plus a
//! per-mask BCE + DICE segmentation loss, combined with fixed weights.

use crate::error::{Result, SegError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use ndarray::ArrayD;

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_txt: f64,
    pub lambda_mask: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_txt: 1.0,
            lambda_mask: 1.0,
            lambda_bce: 2.0,
            lambda_dice: 0.5,
        }
    }
}

pub const DICE_EPS: f64 = 1.0;

/// Mean negative log-likelihood of `targets` under next-token logits:
/// each entry is (logit row, target token id).
pub fn text_ce<F: Scalar>(logits: &Tensor<F>, targets: &[(usize, u32)]) -> Result<Tensor<F>> {
    if targets.is_empty() {
        return Err(SegError::Data("text CE needs at least one target".into()));
    }
    let coords: Vec<(usize, usize)> = targets.iter().map(|&(r, t)| (r, t as usize)).collect();
    let picked = logits.log_softmax_rows().gather_entries(&coords);
    Ok(picked.mean_all().scale(F::c(-1.0)))
}

/// Numerically stable binary cross-entropy on logits against a {0,1} target
/// map: mean(softplus(x) − x·m).
pub fn bce_with_logits<F: Scalar>(logits: &Tensor<F>, target: &ArrayD<F>) -> Tensor<F> {
    let xm = logits.mul(&Tensor::constant(target.clone()));
    logits.softplus().sub(&xm).mean_all()
}

/// Soft DICE loss: 1 − (2·Σσ(x)m + ε) / (Σσ(x) + Σm + ε).
pub fn dice_loss<F: Scalar>(logits: &Tensor<F>, target: &ArrayD<F>) -> Tensor<F> {
    let eps = F::c(DICE_EPS);
    let p = logits.sigmoid();
    let inter = p.mul(&Tensor::constant(target.clone())).sum_all();
    let denom = p.sum_all().add_scalar(F::c(target.sum().as_f64())).add_scalar(eps);
    let num = inter.scale(F::c(2.0)).add_scalar(eps);
    num.div(&denom).scale(F::c(-1.0)).add_scalar(F::one())
}

pub struct LossBundle<F: Scalar> {
    pub total: Tensor<F>,
    pub l_txt: f64,
    pub l_bce: f64,
    pub l_dice: f64,
}

/// Combine text and segmentation terms. `mask_pairs` holds one (logit map,
/// target map) pair per `<SEG>` token in the sample; BCE and DICE are each
/// averaged over masks before weighting. Samples without masks contribute
/// only the text term.
pub fn total_loss<F: Scalar>(
    text: Tensor<F>,
    mask_pairs: &[(Tensor<F>, ArrayD<F>)],
    w: &LossWeights,
) -> LossBundle<F> {
    let l_txt = text.item().as_f64();
    let mut total = text.scale(F::c(w.lambda_txt));
    let (mut l_bce, mut l_dice) = (0.0, 0.0);
    if !mask_pairs.is_empty() {
        let inv_k = F::c(1.0 / mask_pairs.len() as f64);
        let mut bce_sum: Option<Tensor<F>> = None;
        let mut dice_sum: Option<Tensor<F>> = None;
        for (logits, target) in mask_pairs {
            if logits.shape() != target.shape().to_vec() {
                panic!(
                    "mask logits {:?} vs target {:?}",
                    logits.shape(),
                    target.shape()
                );
            }
            let b = bce_with_logits(logits, target);
            let d = dice_loss(logits, target);
            bce_sum = Some(match bce_sum {
                Some(s) => s.add(&b),
                None => b,
            });
            dice_sum = Some(match dice_sum {
                Some(s) => s.add(&d),
                None => d,
            });
        }
        let bce = bce_sum.unwrap().scale(inv_k);
        let dice = dice_sum.unwrap().scale(inv_k);
        l_bce = bce.item().as_f64();
        l_dice = dice.item().as_f64();
        let mask_term = bce
            .scale(F::c(w.lambda_bce))
            .add(&dice.scale(F::c(w.lambda_dice)))
            .scale(F::c(w.lambda_mask));
        total = total.add(&mask_term);
    }
    LossBundle {
        total,
        l_txt,
        l_bce,
        l_dice,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn;
    use ndarray::{arr2, ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_log_vocab_ce() {
        // Zero logits over V=201 classes: CE = ln(201) ≈ 5.3033 at every
        // target position.
        let v = 201;
        let logits: Tensor<f64> = Tensor::constant(ArrayD::zeros(IxDyn(&[3, v])));
        let ce = text_ce(&logits, &[(0, 5), (1, 0), (2, 200)]).unwrap();
        assert!((ce.item() - (v as f64).ln()).abs() < 1e-12);
        assert!((ce.item() - 5.3033).abs() < 1e-4);
        assert!(text_ce(&logits, &[]).is_err());
    }

    #[test]
    fn bce_closed_forms() {
        // Zero logits: softplus(0) − 0 = ln 2 regardless of target.
        let logits: Tensor<f64> = Tensor::constant(ArrayD::zeros(IxDyn(&[4, 4])));
        let target = ArrayD::ones(IxDyn(&[4, 4]));
        let l = bce_with_logits(&logits, &target);
        assert!((l.item() - 2f64.ln()).abs() < 1e-12);
        // Perfect confident prediction: large logits on the target side.
        let big: Tensor<f64> = Tensor::constant(ArrayD::from_elem(IxDyn(&[4, 4]), 50.0));
        let l = bce_with_logits(&big, &target);
        assert!(l.item() < 1e-12);
    }

    #[test]
    fn dice_closed_form_disjoint() {
        // σ(large negative) ≈ 0 prediction vs a full 64×64 target:
        // DICE = 1 − ε/(Σm + ε) = 1 − 1/4097 ≈ 0.99976.
        let logits: Tensor<f64> = Tensor::constant(ArrayD::from_elem(IxDyn(&[64, 64]), -60.0));
        let target = ArrayD::ones(IxDyn(&[64, 64]));
        let l = dice_loss(&logits, &target);
        let expect = 1.0 - 1.0 / 4097.0;
        assert!((l.item() - expect).abs() < 1e-9, "{} vs {expect}", l.item());
        // Perfect overlap on the same target: loss ≈ 0.
        let big: Tensor<f64> = Tensor::constant(ArrayD::from_elem(IxDyn(&[64, 64]), 60.0));
        assert!(dice_loss(&big, &target).item() < 1e-3);
    }

    #[test]
    fn total_combines_with_default_weights() {
        // Hand-built terms: L = 1·L_txt + 1·(2·BCE + 0.5·DICE).
        let w = LossWeights::default();
        let text: Tensor<f64> = Tensor::constant(ArrayD::zeros(IxDyn(&[2, 4])));
        let text = text_ce(&text, &[(0, 0)]).unwrap(); // ln 4
        let logits: Tensor<f64> = Tensor::constant(ArrayD::zeros(IxDyn(&[2, 2])));
        let target = ArrayD::<f64>::ones(IxDyn(&[2, 2]));
        let bundle = total_loss(text, &[(logits.clone(), target.clone())], &w);
        // BCE = ln 2; DICE = 1 − (2·(0.5·4)+1)/(0.5·4+4+1) = 1 − 5/7.
        let expect = 4f64.ln() + 2.0 * 2f64.ln() + 0.5 * (1.0 - 5.0 / 7.0);
        assert!((bundle.total.item() - expect).abs() < 1e-12);
        assert!((bundle.l_txt - 4f64.ln()).abs() < 1e-12);
        assert!((bundle.l_bce - 2f64.ln()).abs() < 1e-12);
        // No masks: pure text term.
        let text: Tensor<f64> = Tensor::constant(ArrayD::zeros(IxDyn(&[2, 4])));
        let text = text_ce(&text, &[(1, 2)]).unwrap();
        let bundle = total_loss(text, &[], &w);
        assert!((bundle.total.item() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(bundle.l_bce, 0.0);
    }

    #[test]
    fn per_mask_mean_over_multiple_segs() {
        let w = LossWeights::default();
        let zeros: Tensor<f64> = Tensor::constant(ArrayD::zeros(IxDyn(&[2, 2])));
        let ones_t = ArrayD::<f64>::ones(IxDyn(&[2, 2]));
        let zeros_t = ArrayD::<f64>::zeros(IxDyn(&[2, 2]));
        let text = text_ce(&Tensor::constant(ArrayD::zeros(IxDyn(&[1, 2]))), &[(0, 0)]).unwrap();
        let pairs = vec![(zeros.clone(), ones_t.clone()), (zeros.clone(), zeros_t.clone())];
        let bundle = total_loss(text, &pairs, &w);
        let bce1 = 2f64.ln();
        let bce2 = 2f64.ln();
        assert!((bundle.l_bce - 0.5 * (bce1 + bce2)).abs() < 1e-12);
        let dice1 = 1.0 - 5.0 / 7.0;
        let dice2 = 1.0 - 1.0 / 3.0; // (0+1)/(2+0+1)
        assert!((bundle.l_dice - 0.5 * (dice1 + dice2)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = LossWeights::default();
        let x0 = nn::normal::<f64>(&mut rng, &[3, 5], 1.0);
        let m0 = nn::normal::<f64>(&mut rng, &[4, 4], 1.0);
        let target = ArrayD::from_shape_fn(IxDyn(&[4, 4]), |ix| if (ix[0] + ix[1]) % 2 == 0 { 1.0 } else { 0.0 });
        let eval = |x: &ArrayD<f64>, m: &ArrayD<f64>, grad: bool| {
            let xl = Tensor::leaf(x.clone(), grad);
            let ml = Tensor::leaf(m.clone(), grad);
            let text = text_ce(&xl, &[(0, 1), (2, 4)]).unwrap();
            let bundle = total_loss(text, &[(ml.clone(), target.clone())], &w);
            let val = bundle.total.item();
            if grad {
                bundle.total.backward();
                (val, xl.grad(), ml.grad())
            } else {
                (val, None, None)
            }
        };
        let (_, gx, gm) = eval(&x0, &m0, true);
        let (gx, gm) = (gx.unwrap(), gm.unwrap());
        let eps = 1e-6;
        for (arr0, grad, other_first) in [(&x0, &gx, true), (&m0, &gm, false)] {
            for k in [0usize, 3, 7] {
                let flat: Vec<usize> = {
                    let s = arr0.shape();
                    vec![k / s[1], k % s[1]]
                };
                let mut p = arr0.clone();
                p[IxDyn(&flat)] += eps;
                let mut q = arr0.clone();
                q[IxDyn(&flat)] -= eps;
                let (fp, fm) = if other_first {
                    (eval(&p, &m0, false).0, eval(&q, &m0, false).0)
                } else {
                    (eval(&x0, &p, false).0, eval(&x0, &q, false).0)
                };
                let fd = (fp - fm) / (2.0 * eps);
                let g = grad[IxDyn(&flat)];
                let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
                assert!(rel < 1e-5, "coord {flat:?}: analytic {g} vs fd {fd}");
            }
        }
    }

    #[test]
    fn bce_logit_form_matches_clamped_prob_form() {
        // Stability check: for moderate logits the two algebraic forms agree;
        // for extreme logits the logit form stays finite.
        let vals = arr2(&[[-8.0, -1.0], [0.3, 8.0]]).into_dyn();
        let target = arr2(&[[1.0, 0.0], [1.0, 0.0]]).into_dyn();
        let l = bce_with_logits(&Tensor::<f64>::constant(vals.clone()), &target).item();
        let mut naive = 0.0;
        for (x, m) in vals.iter().zip(target.iter()) {
            let p = (1.0 / (1.0 + (-x).exp())).clamp(1e-12, 1.0 - 1e-12);
            naive += -(m * p.ln() + (1.0 - m) * (1.0 - p).ln());
        }
        naive /= 4.0;
        assert!((l - naive).abs() < 1e-6);
        let extreme = arr2(&[[-500.0, 500.0]]).into_dyn();
        let t = arr2(&[[1.0, 0.0]]).into_dyn();
        let l = bce_with_logits(&Tensor::<f64>::constant(extreme), &t).item();
        assert!(l.is_finite() && l > 400.0);
    }
}
