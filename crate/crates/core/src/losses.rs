//! Focal loss, dice loss and the per-sequence training objective
//! `sum_t (lambda_focal * focal_t + lambda_dice * dice_t)`.

use serde::{Deserialize, Serialize};

use crate::dataio::BinaryMask;
use crate::decoder::MotionMask;
use crate::diffcore::{FrameLoss, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[δ, 1 - δ]` before the focal logarithm.
pub const FOCAL_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_focal: f64,
    pub lambda_dice: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_focal: 0.5,
            lambda_dice: 0.5,
            alpha: 0.25,
            gamma: 2.0,
            dice_eps: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_focal >= 0.0
            && self.lambda_dice >= 0.0
            && self.gamma >= 0.0
            && (0.0..=1.0).contains(&self.alpha)
            && self.dice_eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss config {self:?}")))
        }
    }
}

/// `-α_t (1 - p_t)^γ ln p_t` for one pixel.
pub fn focal_pixel<T: Real>(p: T, positive: bool, alpha: T, gamma: T) -> T {
    let d = T::of(FOCAL_CLAMP);
    let c = p.max(d).min(T::one() - d);
    let (pt, at) = if positive { (c, alpha) } else { (T::one() - c, T::one() - alpha) };
    -at * (T::one() - pt).powf(gamma) * pt.ln()
}

/// Derivative of [`focal_pixel`] with respect to `p` (zero where clamped).
pub fn focal_pixel_grad<T: Real>(p: T, positive: bool, alpha: T, gamma: T) -> T {
    let d = T::of(FOCAL_CLAMP);
    if p <= d || p >= T::one() - d {
        return T::zero();
    }
    let one = T::one();
    // Power rule on (1 - p_t)^γ with γ = 0 contributes nothing.
    let pow_m1 = |base: T| if gamma == T::zero() { T::zero() } else { gamma * base.powf(gamma - one) };
    if positive {
        let q = one - p;
        alpha * (pow_m1(q) * p.ln() - q.powf(gamma) / p)
    } else {
        let q = one - p;
        (one - alpha) * (-pow_m1(p) * q.ln() + p.powf(gamma) / q)
    }
}

fn check_pair(m: &MotionMask, gt: &BinaryMask) -> Result<()> {
    if (m.width(), m.height()) != (gt.width(), gt.height()) {
        return Err(Error::shape(
            "loss operands",
            (gt.width(), gt.height()),
            (m.width(), m.height()),
        ));
    }
    Ok(())
}

/// Pixel-mean focal loss of one frame.
pub fn focal_loss(m: &MotionMask, gt: &BinaryMask, alpha: f64, gamma: f64) -> Result<f64> {
    check_pair(m, gt)?;
    let probs: Vec<f64> = m.probs().iter().map(|&p| p as f64).collect();
    Ok(focal_mean(&probs, gt.values(), alpha, gamma))
}

fn focal_mean<T: Real>(p: &[T], y: &[u8], alpha: T, gamma: T) -> T {
    if p.is_empty() {
        return T::zero();
    }
    let s: T = p.iter().zip(y).map(|(&pv, &yv)| focal_pixel(pv, yv == 1, alpha, gamma)).sum();
    s / T::of(p.len() as f64)
}

fn dice_value<T: Real>(p: &[T], y: &[u8], eps: T) -> T {
    let mut inter = T::zero();
    let mut sp = T::zero();
    let mut sy = T::zero();
    for (&pv, &yv) in p.iter().zip(y) {
        let yv = if yv == 1 { T::one() } else { T::zero() };
        inter += pv * yv;
        sp += pv;
        sy += yv;
    }
    T::one() - (T::of(2.0) * inter + eps) / (sp + sy + eps)
}

/// `1 - (2 Σ M·M_gt + ε) / (Σ M + Σ M_gt + ε)`
pub fn dice_loss(m: &MotionMask, gt: &BinaryMask, eps: f64) -> Result<f64> {
    check_pair(m, gt)?;
    let probs: Vec<f64> = m.probs().iter().map(|&p| p as f64).collect();
    Ok(dice_value(&probs, gt.values(), eps))
}

/// Sum over frames of the weighted focal + dice terms.
pub fn total_loss(masks: &[MotionMask], gts: &[BinaryMask], cfg: &LossConfig) -> Result<f64> {
    if masks.len() != gts.len() {
        return Err(Error::shape("loss frames", gts.len(), masks.len()));
    }
    let mut total = 0.0;
    for (m, gt) in masks.iter().zip(gts) {
        total += cfg.lambda_focal * focal_loss(m, gt, cfg.alpha, cfg.gamma)?
            + cfg.lambda_dice * dice_loss(m, gt, cfg.dice_eps)?;
    }
    Ok(total)
}

/// Per-frame focal loss on a `[frames, pixels]` probability node.
pub struct FocalFrames<T> {
    targets: Vec<Vec<u8>>,
    alpha: T,
    gamma: T,
}

impl<T: Real> FocalFrames<T> {
    pub fn new(targets: Vec<Vec<u8>>, alpha: f64, gamma: f64) -> Self {
        Self {
            targets,
            alpha: T::of(alpha),
            gamma: T::of(gamma),
        }
    }
}

impl<T: Real> FrameLoss<T> for FocalFrames<T> {
    fn forward(&self, frame: usize, p: &[T]) -> T {
        focal_mean(p, &self.targets[frame], self.alpha, self.gamma)
    }

    fn backward(&self, frame: usize, p: &[T], grad_out: T, dp: &mut [T]) {
        let scale = grad_out / T::of(p.len().max(1) as f64);
        for ((d, &pv), &y) in dp.iter_mut().zip(p).zip(&self.targets[frame]) {
            *d += scale * focal_pixel_grad(pv, y == 1, self.alpha, self.gamma);
        }
    }
}

/// Per-frame dice loss on a `[frames, pixels]` probability node.
pub struct DiceFrames<T> {
    targets: Vec<Vec<u8>>,
    eps: T,
}

impl<T: Real> DiceFrames<T> {
    pub fn new(targets: Vec<Vec<u8>>, eps: f64) -> Self {
        Self {
            targets,
            eps: T::of(eps),
        }
    }
}

impl<T: Real> FrameLoss<T> for DiceFrames<T> {
    fn forward(&self, frame: usize, p: &[T]) -> T {
        dice_value(p, &self.targets[frame], self.eps)
    }

    fn backward(&self, frame: usize, p: &[T], grad_out: T, dp: &mut [T]) {
        let y = &self.targets[frame];
        let mut inter = T::zero();
        let mut denom = self.eps;
        for (&pv, &yv) in p.iter().zip(y) {
            let yv = if yv == 1 { T::one() } else { T::zero() };
            inter += pv * yv;
            denom += pv + yv;
        }
        let num = T::of(2.0) * inter + self.eps;
        let d2 = denom * denom;
        for (d, &yv) in dp.iter_mut().zip(y) {
            let yv = if yv == 1 { T::one() } else { T::zero() };
            *d += grad_out * -(T::of(2.0) * yv * denom - num) / d2;
        }
    }
}

/// Builds the training objective on `probs: [frames, H, W]` (or
/// `[frames, H*W]`) against one ground-truth mask per frame.
pub fn total_loss_graph<T: Real>(g: &mut Graph<T>, probs: Var, gts: &[BinaryMask], cfg: &LossConfig) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape.first() != Some(&gts.len()) {
        return Err(Error::shape("loss frames", gts.len(), shape.first()));
    }
    let per: usize = shape[1..].iter().product();
    if gts.iter().any(|m| m.values().len() != per) {
        return Err(Error::shape("loss mask pixels", per, gts.iter().map(|m| m.values().len()).collect::<Vec<_>>()));
    }
    let targets: Vec<Vec<u8>> = gts.iter().map(|m| m.values().to_vec()).collect();
    let focal = g.frame_loss(probs, Box::new(FocalFrames::<T>::new(targets.clone(), cfg.alpha, cfg.gamma)))?;
    let dice = g.frame_loss(probs, Box::new(DiceFrames::<T>::new(targets, cfg.dice_eps)))?;
    let fs = g.sum(focal);
    let ds = g.sum(dice);
    let fw = g.scale(fs, T::of(cfg.lambda_focal));
    let dw = g.scale(ds, T::of(cfg.lambda_dice));
    g.add(fw, dw)
}

/// Convenience for tests and tools: the graph loss evaluated on plain data.
pub fn total_loss_value<T: Real>(probs: &Tensor<T>, gts: &[BinaryMask], cfg: &LossConfig) -> Result<T> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let l = total_loss_graph(&mut g, p, gts, cfg)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, Graph};
    use rand::{Rng, SeedableRng};

    fn mm(w: usize, h: usize, p: Vec<f32>) -> MotionMask {
        MotionMask::new(w, h, p).unwrap()
    }

    #[test]
    fn focal_reference_values() {
        let hi = focal_pixel(0.9f64, true, 0.25, 2.0);
        assert!((hi - 0.25 * 0.01 * -(0.9f64.ln())).abs() < 1e-15);
        assert!((hi - 2.634e-4).abs() < 1e-7);
        let mid = focal_pixel(0.5f64, false, 0.25, 2.0);
        assert!((mid - 0.75 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((mid - 0.1300).abs() < 1e-4);
    }

    #[test]
    fn perfect_prediction_focal_vanishes() {
        let m = mm(4, 4, vec![1.0; 16]);
        let gt = BinaryMask::new(4, 4, vec![1; 16]).unwrap();
        let l = focal_loss(&m, &gt, 0.25, 2.0).unwrap();
        assert!((0.0..=0.25 * FOCAL_CLAMP).contains(&l), "{l}");
    }

    #[test]
    fn dice_reference_values() {
        let ones = BinaryMask::new(10, 10, vec![1; 100]).unwrap();
        assert_eq!(dice_loss(&mm(10, 10, vec![1.0; 100]), &ones, 1.0).unwrap(), 0.0);
        let half = dice_loss(&mm(10, 10, vec![0.5; 100]), &ones, 1.0).unwrap();
        assert!((half - (1.0 - 101.0 / 151.0)).abs() < 1e-12);
        assert!((half - 0.3311).abs() < 1e-4);
        let empty = BinaryMask::empty(10, 10);
        assert_eq!(dice_loss(&mm(10, 10, vec![0.0; 100]), &empty, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        let cfg = LossConfig::default();
        let gt = BinaryMask::new(2, 1, vec![1, 0]).unwrap();
        let m = mm(2, 1, vec![0.7, 0.2]);
        let f = focal_loss(&m, &gt, cfg.alpha, cfg.gamma).unwrap();
        let d = dice_loss(&m, &gt, cfg.dice_eps).unwrap();
        let one = total_loss(std::slice::from_ref(&m), std::slice::from_ref(&gt), &cfg).unwrap();
        assert!((one - (0.5 * f + 0.5 * d)).abs() < 1e-15);
        let two = total_loss(&[m.clone(), m.clone()], &[gt.clone(), gt.clone()], &cfg).unwrap();
        assert!((two - 2.0 * one).abs() < 1e-15);
        let zero = LossConfig { lambda_focal: 0.0, lambda_dice: 0.0, ..cfg };
        assert_eq!(total_loss(std::slice::from_ref(&m), std::slice::from_ref(&gt), &zero).unwrap(), 0.0);
        assert!(total_loss(&[m], &[], &cfg).is_err());
    }

    #[test]
    fn weighted_sum_with_given_terms() {
        // focal = 0.1, dice = 0.2 per frame, two frames: 2 * (0.05 + 0.10).
        let cfg = LossConfig::default();
        let per_frame = cfg.lambda_focal * 0.1 + cfg.lambda_dice * 0.2;
        assert!((2.0 * per_frame - 0.30f64).abs() < 1e-15);
    }

    #[test]
    fn graph_matches_plain_evaluation() {
        let cfg = LossConfig::default();
        let gts = vec![
            BinaryMask::new(3, 1, vec![1, 0, 1]).unwrap(),
            BinaryMask::new(3, 1, vec![0, 0, 0]).unwrap(),
        ];
        let p = [0.8f32, 0.3, 0.45, 0.1, 0.6, 0.2];
        let masks = vec![mm(3, 1, p[..3].to_vec()), mm(3, 1, p[3..].to_vec())];
        let plain = total_loss(&masks, &gts, &cfg).unwrap();
        let pd: Vec<f64> = p.iter().map(|&v| v as f64).collect();
        let t: Tensor<f64> = Tensor::from_f64(&[2, 3], &pd).unwrap();
        let graph = total_loss_value(&t, &gts, &cfg).unwrap();
        assert!((plain - graph).abs() < 1e-12);
    }

    #[test]
    fn focal_gradient_at_point_seven() {
        let gt = vec![vec![1u8]];
        let f = move |g: &mut Graph<f64>, x: Var| {
            let l = g.frame_loss(x, Box::new(FocalFrames::<f64>::new(gt.clone(), 0.25, 2.0)))?;
            Ok(g.sum(l))
        };
        let err = grad_check(f, &Tensor::from_f64(&[1, 1], &[0.7]).unwrap(), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn focal_and_dice_gradients_at_random_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let p: Vec<f64> = (0..12).map(|_| rng.random_range(0.05..0.95)).collect();
            let y: Vec<u8> = (0..12).map(|_| rng.random_range(0..2)).collect();
            let point = Tensor::from_f64(&[2, 6], &p).unwrap();
            let targets = vec![y[..6].to_vec(), y[6..].to_vec()];
            let t2 = targets.clone();
            let focal = move |g: &mut Graph<f64>, x: Var| {
                let l = g.frame_loss(x, Box::new(FocalFrames::<f64>::new(targets.clone(), 0.25, 2.0)))?;
                Ok(g.sum(l))
            };
            let dice = move |g: &mut Graph<f64>, x: Var| {
                let l = g.frame_loss(x, Box::new(DiceFrames::<f64>::new(t2.clone(), 1.0)))?;
                Ok(g.sum(l))
            };
            assert!(grad_check(focal, &point, 1e-5).unwrap() < 1e-6);
            assert!(grad_check(dice, &point, 1e-5).unwrap() < 1e-6);
        }
    }

    #[test]
    fn gamma_zero_gradient_is_cross_entropy() {
        let g = focal_pixel_grad(0.4f64, true, 1.0, 0.0);
        assert!((g - (-1.0 / 0.4)).abs() < 1e-12);
    }

    #[test]
    fn validate_rejects_out_of_range() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossConfig { dice_eps: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { lambda_dice: -1.0, ..Default::default() }.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pair() -> impl Strategy<Value = (Vec<f32>, Vec<u8>)> {
            (1usize..40).prop_flat_map(|n| {
                (proptest::collection::vec(0.0f32..=1.0, n), proptest::collection::vec(0u8..2, n))
            })
        }

        proptest! {
            #[test]
            fn losses_non_negative((p, y) in pair()) {
                let n = p.len();
                let m = MotionMask::new(n, 1, p).unwrap();
                let gt = BinaryMask::new(n, 1, y).unwrap();
                prop_assert!(focal_loss(&m, &gt, 0.25, 2.0).unwrap() >= 0.0);
                prop_assert!(dice_loss(&m, &gt, 1.0).unwrap() >= -1e-12);
            }

            #[test]
            fn dice_permutation_invariant((p, y) in pair(), rot in 0usize..40) {
                let n = p.len();
                let k = rot % n;
                let mut pr = p.clone();
                let mut yr = y.clone();
                pr.rotate_left(k);
                yr.rotate_left(k);
                let a = dice_loss(&MotionMask::new(n, 1, p).unwrap(), &BinaryMask::new(n, 1, y).unwrap(), 1.0).unwrap();
                let b = dice_loss(&MotionMask::new(n, 1, pr).unwrap(), &BinaryMask::new(n, 1, yr).unwrap(), 1.0).unwrap();
                prop_assert!((a - b).abs() < 1e-9);
            }

            #[test]
            fn replacing_prediction_by_truth_never_increases((p, y) in pair(), (p2, y2) in pair()) {
                let cfg = LossConfig::default();
                let n = p.len();
                let n2 = p2.len();
                let gts = vec![BinaryMask::new(n, 1, y.clone()).unwrap(), BinaryMask::new(n2, 1, y2).unwrap()];
                let masks = vec![MotionMask::new(n, 1, p).unwrap(), MotionMask::new(n2, 1, p2).unwrap()];
                let before = total_loss(&masks, &gts, &cfg).unwrap();
                let mut fixed = masks.clone();
                fixed[0] = MotionMask::new(n, 1, y.iter().map(|&v| v as f32).collect()).unwrap();
                let after = total_loss(&fixed, &gts, &cfg).unwrap();
                prop_assert!(after <= before + 1e-12);
            }
        }
    }
}
