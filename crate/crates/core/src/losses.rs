//! Training objective: softmax classification loss plus a map loss in
//! supervised, weakly supervised, or unsupervised regimes.
//!
//! Map losses operate on the sigmoided map (prob_map), so targets and
//! losses share the [0, 1] scale; the supervised L1 term is normalized by
//! pixel count for the same reason. The weak fake-image term drives the
//! map maximum toward `weak_target`, with the subgradient routed to the
//! argmax pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::ProbMap;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Map-supervision regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Supervised,
    Weak,
    Unsupervised,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f32,
    pub regime: Regime,
    pub weak_target: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            regime: Regime::Supervised,
            weak_target: 0.75,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::usage("loss lambda must be finite and >= 0"));
        }
        if !(0.0 < self.weak_target && self.weak_target < 1.0) {
            return Err(Error::usage("weak_target must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Cross-entropy of a two-logit vector against a binary label
/// (0 real, 1 fake).
pub fn classification_loss(tape: &mut Tape, logits: NodeId, label: usize) -> Result<NodeId> {
    if label > 1 {
        return Err(Error::usage(format!("label must be 0 or 1, got {label}")));
    }
    if tape.value(logits).shape() != [2] {
        return Err(Error::shape("classification loss expects two logits"));
    }
    tape.cross_entropy(logits, label)
}

/// Mean absolute deviation between the predicted map and a ground-truth
/// target in [0, 1].
pub fn map_loss_supervised(tape: &mut Tape, prob_map: NodeId, gt: &ProbMap) -> Result<NodeId> {
    let target = Tensor::new(vec![gt.height(), gt.width()], gt.data().to_vec())?;
    tape.l1_to_target(prob_map, &target)
}

/// Weak supervision: real maps are driven to zero everywhere, fake maps
/// to a maximum of `weak_target`.
pub fn map_loss_weak(
    tape: &mut Tape,
    prob_map: NodeId,
    label: usize,
    weak_target: f32,
) -> Result<NodeId> {
    if label > 1 {
        return Err(Error::usage(format!("label must be 0 or 1, got {label}")));
    }
    if label == 0 {
        let shape = tape.value(prob_map).shape().to_vec();
        let zeros = Tensor::zeros(shape);
        tape.l1_to_target(prob_map, &zeros)
    } else {
        let peak = tape.reduce_max(prob_map);
        let shifted = tape.add_const(peak, -weak_target);
        Ok(tape.abs(shifted))
    }
}

/// Combined objective: cls + lambda * map. The map term is dropped in the
/// unsupervised regime (or when no map loss exists, e.g. the baseline
/// model).
pub fn total_loss(
    tape: &mut Tape,
    cls: NodeId,
    map: Option<NodeId>,
    cfg: &LossConfig,
) -> Result<NodeId> {
    match map {
        Some(map) if cfg.regime != Regime::Unsupervised => {
            let weighted = tape.scale(map, cfg.lambda);
            tape.add(cls, weighted)
        }
        _ => Ok(cls),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;
    use crate::tape::grad_check;

    fn leaf(tape: &mut Tape, shape: &[usize], data: &[f32]) -> NodeId {
        tape.leaf(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn classification_loss_values() {
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, &[2], &[0.0, 0.0]);
        let l = classification_loss(&mut tape, logits, 0).unwrap();
        assert!((tape.value(l).item() - std::f32::consts::LN_2).abs() < 1e-6);

        let logits = leaf(&mut tape, &[2], &[10.0, -10.0]);
        let l0 = classification_loss(&mut tape, logits, 0).unwrap();
        assert!((tape.value(l0).item() as f64 - 2.061e-9).abs() < 2e-11);
        let l1 = classification_loss(&mut tape, logits, 1).unwrap();
        assert!((tape.value(l1).item() - 20.0).abs() < 1e-4);

        assert!(matches!(
            classification_loss(&mut tape, logits, 2),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn supervised_map_loss_values() {
        let mut tape = Tape::new();
        let map = leaf(&mut tape, &[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let gt = ProbMap::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let l = map_loss_supervised(&mut tape, map, &gt).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let half = leaf(&mut tape, &[2, 2], &[0.5; 4]);
        let zeros = ProbMap::new(2, 2, vec![0.0; 4]).unwrap();
        let l = map_loss_supervised(&mut tape, half, &zeros).unwrap();
        assert_eq!(tape.value(l).item(), 0.5);

        let pred = leaf(&mut tape, &[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let gt = ProbMap::new(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let l = map_loss_supervised(&mut tape, pred, &gt).unwrap();
        assert_eq!(tape.value(l).item(), 0.5);

        let bad = ProbMap::new(4, 4, vec![0.0; 16]).unwrap();
        assert!(matches!(
            map_loss_supervised(&mut tape, pred, &bad),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn supervised_loss_is_symmetric_and_bounded() {
        let mut rng = Pcg32::new(31, 0);
        for _ in 0..30 {
            let a: Vec<f32> = (0..9).map(|_| rng.next_f32()).collect();
            let b: Vec<f32> = (0..9).map(|_| rng.next_f32()).collect();
            let mut tape = Tape::new();
            let na = leaf(&mut tape, &[3, 3], &a);
            let nb = leaf(&mut tape, &[3, 3], &b);
            let map_a = ProbMap::new(3, 3, a.clone()).unwrap();
            let map_b = ProbMap::new(3, 3, b.clone()).unwrap();
            let lab = map_loss_supervised(&mut tape, na, &map_b).unwrap();
            let lba = map_loss_supervised(&mut tape, nb, &map_a).unwrap();
            let (vab, vba) = (tape.value(lab).item(), tape.value(lba).item());
            assert!((vab - vba).abs() < 1e-7);
            assert!((0.0..=1.0).contains(&vab));
            assert_eq!(vab == 0.0, a == b);
        }
    }

    #[test]
    fn weak_map_loss_values() {
        let mut tape = Tape::new();
        let zeros = leaf(&mut tape, &[2, 2], &[0.0; 4]);
        let l = map_loss_weak(&mut tape, zeros, 0, 0.75).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let peaked = leaf(&mut tape, &[2, 2], &[0.1, 0.75, 0.3, 0.0]);
        let l = map_loss_weak(&mut tape, peaked, 1, 0.75).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let half = leaf(&mut tape, &[2, 2], &[0.5; 4]);
        let l = map_loss_weak(&mut tape, half, 0, 0.75).unwrap();
        assert_eq!(tape.value(l).item(), 0.5);
    }

    #[test]
    fn weak_fake_gradient_hits_argmax_only() {
        let mut tape = Tape::new();
        let map = leaf(&mut tape, &[2, 2], &[0.1, 0.9, 0.4, 0.2]);
        let l = map_loss_weak(&mut tape, map, 1, 0.75).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(map);
        assert_eq!(g[0], 0.0);
        assert!(g[1] > 0.0);
        assert_eq!(g[2], 0.0);
        assert_eq!(g[3], 0.0);
    }

    #[test]
    fn total_loss_combines_terms() {
        let cfg = LossConfig::default();
        let mut tape = Tape::new();
        let cls = leaf(&mut tape, &[1], &[0.7]);
        let map = leaf(&mut tape, &[1], &[0.2]);
        let t = total_loss(&mut tape, cls, Some(map), &cfg).unwrap();
        assert!((tape.value(t).item() - 0.9).abs() < 1e-7);

        let zero_lambda = LossConfig {
            lambda: 0.0,
            ..cfg
        };
        let t = total_loss(&mut tape, cls, Some(map), &zero_lambda).unwrap();
        assert_eq!(tape.value(t).item(), 0.7);

        let half = LossConfig {
            lambda: 0.5,
            ..cfg
        };
        let cls1 = leaf(&mut tape, &[1], &[1.0]);
        let map2 = leaf(&mut tape, &[1], &[2.0]);
        let t = total_loss(&mut tape, cls1, Some(map2), &half).unwrap();
        assert_eq!(tape.value(t).item(), 2.0);

        let unsup = LossConfig {
            regime: Regime::Unsupervised,
            ..cfg
        };
        let t = total_loss(&mut tape, cls1, Some(map2), &unsup).unwrap();
        assert_eq!(tape.value(t).item(), 1.0);
    }

    #[test]
    fn total_loss_monotone_in_components() {
        let cfg = LossConfig {
            lambda: 0.8,
            ..LossConfig::default()
        };
        let mut prev = f32::NEG_INFINITY;
        for i in 0..10 {
            let mut tape = Tape::new();
            let cls = leaf(&mut tape, &[1], &[0.1 * i as f32]);
            let map = leaf(&mut tape, &[1], &[0.05 * i as f32]);
            let t = total_loss(&mut tape, cls, Some(map), &cfg).unwrap();
            let v = tape.value(t).item();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn losses_pass_finite_difference_checks() {
        let mut rng = Pcg32::new(32, 0);
        // values kept away from the |.| and max(.) kinks
        let pred = Tensor::new(
            vec![3, 3],
            (0..9).map(|i| 0.07 + 0.09 * i as f32).collect(),
        )
        .unwrap();
        let gt = ProbMap::new(3, 3, vec![0.35; 9]).unwrap();
        let err = grad_check(
            |tape, ids| map_loss_supervised(tape, ids[0], &gt),
            &[pred.clone()],
            1e-3,
            9,
            &mut rng,
        )
        .unwrap();
        assert!(err <= 1e-3, "supervised map loss rel err {err}");

        let err = grad_check(
            |tape, ids| map_loss_weak(tape, ids[0], 1, 0.75),
            &[pred.clone()],
            1e-3,
            9,
            &mut rng,
        )
        .unwrap();
        assert!(err <= 1e-3, "weak map loss rel err {err}");

        let logits = Tensor::new(vec![2], vec![0.4, -0.3]).unwrap();
        let err = grad_check(
            |tape, ids| classification_loss(tape, ids[0], 1),
            &[logits],
            1e-3,
            2,
            &mut rng,
        )
        .unwrap();
        assert!(err <= 1e-3, "classification loss rel err {err}");
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            lambda: -1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            weak_target: 1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
