//! The PatchNet classifier: three conv+pool stages, an attention layer at
//! a configurable depth, one more conv, global average pooling and a
//! two-way dense head.
//!
//! The attention map resolution equals the feature-map resolution at the
//! insertion point (8x8 for the default 64x64 input with insertion after
//! stage 3). The `none` variant is the pure baseline backbone; backbone
//! parameters are drawn before head parameters, so a baseline and an
//! attention model share identical backbone init for the same seed.

use serde::{Deserialize, Serialize};

use crate::attention::{attend, AttentionHead, AttentionOutput, AttentionVariant, HeadNodes, MamBasis};
use crate::error::{Error, Result};
use crate::masks::ProbMap;
use crate::rng::Pcg32;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    None,
    Regression,
    Mam,
}

impl Variant {
    pub fn attention(self) -> Option<AttentionVariant> {
        match self {
            Variant::None => None,
            Variant::Regression => Some(AttentionVariant::Regression),
            Variant::Mam => Some(AttentionVariant::Mam),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchNetConfig {
    pub input_size: usize,
    pub stage_widths: [usize; 4],
    pub attention_stage: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for PatchNetConfig {
    fn default() -> Self {
        PatchNetConfig {
            input_size: 64,
            stage_widths: [16, 32, 64, 64],
            attention_stage: 3,
            variant: Variant::Regression,
            seed: 7,
        }
    }
}

impl PatchNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size < 16 || self.input_size % 8 != 0 {
            return Err(Error::usage("input_size must be >= 16 and divisible by 8"));
        }
        if !(1..=3).contains(&self.attention_stage) {
            return Err(Error::usage("attention_stage must be 1, 2 or 3"));
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::usage("stage widths must be positive"));
        }
        Ok(())
    }

    /// Attention-map resolution implied by the insertion stage.
    pub fn map_dims(&self) -> (usize, usize) {
        let side = self.input_size >> self.attention_stage;
        (side, side)
    }

    /// Channel count of the feature map at the insertion stage.
    pub fn map_channels(&self) -> usize {
        self.stage_widths[self.attention_stage - 1]
    }
}

struct Param {
    name: &'static str,
    value: Tensor,
}

pub struct Model {
    cfg: PatchNetConfig,
    backbone: Vec<Param>,
    head: Option<AttentionHead>,
    basis: Option<MamBasis>,
}

/// Tape node ids aligned with [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    ids: Vec<NodeId>,
}

impl ParamNodes {
    pub fn new(ids: Vec<NodeId>) -> Self {
        ParamNodes { ids }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Forward outputs of one sample, as tape nodes.
pub struct SampleNodes {
    pub logits: NodeId,
    pub attention: Option<AttentionOutput>,
}

/// Forward outputs of one sample, as plain values.
#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub logits: [f32; 2],
    /// Softmax probability of the fake class.
    pub fake_score: f64,
    pub prob_map: Option<ProbMap>,
}

const BACKBONE_NAMES: [&str; 10] = [
    "conv1.kernel",
    "conv1.bias",
    "conv2.kernel",
    "conv2.bias",
    "conv3.kernel",
    "conv3.bias",
    "conv4.kernel",
    "conv4.bias",
    "fc.weights",
    "fc.bias",
];

impl Model {
    /// Seeded construction. The MAM variant requires a fitted basis whose
    /// resolution matches the insertion stage.
    pub fn build(cfg: PatchNetConfig, basis: Option<MamBasis>) -> Result<Model> {
        cfg.validate()?;
        let mut rng = Pcg32::new(cfg.seed, 0);
        let widths = cfg.stage_widths;
        let mut backbone = Vec::new();
        let mut push_conv = |name_k: &'static str,
                             name_b: &'static str,
                             ci: usize,
                             co: usize,
                             rng: &mut Pcg32,
                             backbone: &mut Vec<Param>| {
            let bound = (6.0 / (9 * ci) as f32).sqrt();
            backbone.push(Param {
                name: name_k,
                value: Tensor::uniform(vec![3, 3, ci, co], bound, rng),
            });
            backbone.push(Param {
                name: name_b,
                value: Tensor::zeros(vec![co]),
            });
        };
        push_conv("conv1.kernel", "conv1.bias", 3, widths[0], &mut rng, &mut backbone);
        push_conv("conv2.kernel", "conv2.bias", widths[0], widths[1], &mut rng, &mut backbone);
        push_conv("conv3.kernel", "conv3.bias", widths[1], widths[2], &mut rng, &mut backbone);
        push_conv("conv4.kernel", "conv4.bias", widths[2], widths[3], &mut rng, &mut backbone);
        let fc_bound = (6.0 / widths[3] as f32).sqrt();
        backbone.push(Param {
            name: "fc.weights",
            value: Tensor::uniform(vec![widths[3], 2], fc_bound, &mut rng),
        });
        backbone.push(Param {
            name: "fc.bias",
            value: Tensor::zeros(vec![2]),
        });

        let (map_h, map_w) = cfg.map_dims();
        let channels = cfg.map_channels();
        let (head, basis) = match cfg.variant {
            Variant::None => (None, None),
            Variant::Regression => (Some(AttentionHead::new_regression(channels, &mut rng)), None),
            Variant::Mam => {
                let basis = basis
                    .ok_or_else(|| Error::usage("MAM variant requires a fitted basis"))?;
                if basis.map_h() != map_h || basis.map_w() != map_w {
                    return Err(Error::usage(format!(
                        "basis resolution {}x{} does not match attention map {map_h}x{map_w}",
                        basis.map_h(),
                        basis.map_w()
                    )));
                }
                let head =
                    AttentionHead::new_mam(channels, map_h, map_w, basis.n(), &mut rng);
                (Some(head), Some(basis))
            }
        };

        Ok(Model {
            cfg,
            backbone,
            head,
            basis,
        })
    }

    pub fn cfg(&self) -> &PatchNetConfig {
        &self.cfg
    }

    pub fn basis(&self) -> Option<&MamBasis> {
        self.basis.as_ref()
    }

    /// Named parameters: backbone first, then attention head.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<(&'static str, &Tensor)> = self
            .backbone
            .iter()
            .map(|p| (p.name, &p.value))
            .collect();
        if let Some(head) = &self.head {
            out.extend(head.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out: Vec<(&'static str, &mut Tensor)> = self
            .backbone
            .iter_mut()
            .map(|p| (p.name, &mut p.value))
            .collect();
        if let Some(head) = &mut self.head {
            out.extend(head.params_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replace a parameter by name (used by checkpoint loading).
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        for (n, t) in self.params_mut() {
            if n == name {
                if t.shape() != value.shape() {
                    return Err(Error::format(format!(
                        "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                        value.shape(),
                        t.shape()
                    )));
                }
                *t = value;
                return Ok(());
            }
        }
        Err(Error::format(format!("unknown parameter {name}")))
    }

    pub fn register_params(&self, tape: &mut Tape) -> ParamNodes {
        let ids = self
            .params()
            .iter()
            .map(|(_, t)| tape.leaf((*t).clone()))
            .collect();
        ParamNodes { ids }
    }

    /// Build the forward graph for one image (HxWx3 in [0, 1]) on a tape.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        image: &Tensor,
    ) -> Result<SampleNodes> {
        let s = self.cfg.input_size;
        if image.shape() != [s, s, 3] {
            return Err(Error::shape(format!(
                "expected {s}x{s}x3 input, got {:?}",
                image.shape()
            )));
        }
        let mut x = tape.leaf(image.clone());
        let mut attention_out = None;
        for stage in 0..3 {
            let k = nodes.ids[stage * 2];
            let b = nodes.ids[stage * 2 + 1];
            x = tape.conv2d(x, k, b, 1, 1)?;
            x = tape.relu(x);
            x = tape.maxpool2d(x, 2)?;
            if stage + 1 == self.cfg.attention_stage {
                if let Some(head) = &self.head {
                    let head_nodes =
                        HeadNodes::new(head.variant(), nodes.ids[10..].to_vec());
                    let out = attend(tape, x, &head_nodes, self.basis.as_ref())?;
                    x = out.refined;
                    attention_out = Some(out);
                }
            }
        }
        x = tape.conv2d(x, nodes.ids[6], nodes.ids[7], 1, 1)?;
        x = tape.relu(x);
        let pooled = tape.global_avg_pool(x)?;
        let logits = tape.dense(pooled, nodes.ids[8], nodes.ids[9])?;
        Ok(SampleNodes {
            logits,
            attention: attention_out,
        })
    }

    /// Inference over a batch of images.
    pub fn forward_batch(&self, images: &[Tensor]) -> Result<Vec<SampleOutput>> {
        let mut tape = Tape::new();
        let nodes = self.register_params(&mut tape);
        let (map_h, map_w) = self.cfg.map_dims();
        images
            .iter()
            .map(|image| {
                let sample = self.forward_on_tape(&mut tape, &nodes, image)?;
                let logits_v = tape.value(sample.logits).data();
                let logits = [logits_v[0], logits_v[1]];
                let prob_map = match &sample.attention {
                    Some(out) => {
                        let data = tape.value(out.prob_map).data().to_vec();
                        Some(ProbMap::new(map_w, map_h, data)?)
                    }
                    None => None,
                };
                Ok(SampleOutput {
                    logits,
                    fake_score: fake_probability(logits),
                    prob_map,
                })
            })
            .collect()
    }
}

/// Softmax probability of the fake class for a two-logit output.
pub fn fake_probability(logits: [f32; 2]) -> f64 {
    let m = logits[0].max(logits[1]) as f64;
    let e0 = ((logits[0] as f64) - m).exp();
    let e1 = ((logits[1] as f64) - m).exp();
    e1 / (e0 + e1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::fit_mam_basis;

    fn random_image(seed: u64) -> Tensor {
        let mut rng = Pcg32::new(seed, 100);
        let data: Vec<f32> = (0..64 * 64 * 3).map(|_| rng.next_f32()).collect();
        Tensor::new(vec![64, 64, 3], data).unwrap()
    }

    fn toy_basis(h: usize, w: usize, n: usize) -> MamBasis {
        let mut rng = Pcg32::new(50, 0);
        let masks: Vec<ProbMap> = (0..n + 8)
            .map(|_| {
                let data: Vec<f32> = (0..h * w).map(|_| rng.range_f32(0.05, 0.95)).collect();
                ProbMap::new(w, h, data).unwrap()
            })
            .collect();
        fit_mam_basis(&masks, n).unwrap()
    }

    #[test]
    fn parameter_counts() {
        let baseline = Model::build(
            PatchNetConfig {
                variant: Variant::None,
                ..PatchNetConfig::default()
            },
            None,
        )
        .unwrap();
        let regression = Model::build(PatchNetConfig::default(), None).unwrap();
        // 1x1 conv C -> 1 on 64 channels plus its bias
        assert_eq!(regression.param_count(), baseline.param_count() + 65);

        let expected_backbone = (3 * 3 * 3 * 16 + 16)
            + (3 * 3 * 16 * 32 + 32)
            + (3 * 3 * 32 * 64 + 64)
            + (3 * 3 * 64 * 64 + 64)
            + (64 * 2 + 2);
        assert_eq!(baseline.param_count(), expected_backbone);
    }

    #[test]
    fn same_seed_same_outputs() {
        let image = random_image(1);
        let a = Model::build(PatchNetConfig::default(), None).unwrap();
        let b = Model::build(PatchNetConfig::default(), None).unwrap();
        let oa = a.forward_batch(std::slice::from_ref(&image)).unwrap();
        let ob = b.forward_batch(std::slice::from_ref(&image)).unwrap();
        assert_eq!(oa[0].logits[0].to_bits(), ob[0].logits[0].to_bits());
        assert_eq!(oa[0].logits[1].to_bits(), ob[0].logits[1].to_bits());
    }

    #[test]
    fn insertion_stage_sets_map_resolution() {
        for (stage, side) in [(1usize, 32usize), (2, 16), (3, 8)] {
            let cfg = PatchNetConfig {
                attention_stage: stage,
                ..PatchNetConfig::default()
            };
            assert_eq!(cfg.map_dims(), (side, side));
            let model = Model::build(cfg, None).unwrap();
            let out = model.forward_batch(&[random_image(2)]).unwrap();
            let map = out[0].prob_map.as_ref().unwrap();
            assert_eq!((map.height(), map.width()), (side, side));
        }
    }

    #[test]
    fn zeroed_regression_head_gives_half_map() {
        let mut model = Model::build(PatchNetConfig::default(), None).unwrap();
        for (name, t) in model.params_mut() {
            if name.starts_with("attn.") {
                *t = Tensor::zeros(t.shape().to_vec());
            }
        }
        let out = model.forward_batch(&[random_image(3)]).unwrap();
        let map = out[0].prob_map.as_ref().unwrap();
        assert!(map.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn no_batch_coupling() {
        let model = Model::build(PatchNetConfig::default(), None).unwrap();
        let target = random_image(4);
        let solo = model.forward_batch(std::slice::from_ref(&target)).unwrap();
        let mut batch: Vec<Tensor> = (0..15).map(|i| random_image(10 + i)).collect();
        batch.insert(7, target);
        let many = model.forward_batch(&batch).unwrap();
        assert_eq!(solo[0].logits[0].to_bits(), many[7].logits[0].to_bits());
        assert_eq!(solo[0].logits[1].to_bits(), many[7].logits[1].to_bits());
    }

    #[test]
    fn outputs_are_finite_and_scores_normalized() {
        for seed in 0..5 {
            let model = Model::build(
                PatchNetConfig {
                    seed,
                    ..PatchNetConfig::default()
                },
                None,
            )
            .unwrap();
            let out = model.forward_batch(&[random_image(seed)]).unwrap();
            assert!(out[0].logits.iter().all(|v| v.is_finite()));
            assert!((0.0..=1.0).contains(&out[0].fake_score));
            let p = fake_probability(out[0].logits);
            let q = 1.0 - p;
            assert!((p + q - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mam_requires_matching_basis() {
        let cfg = PatchNetConfig {
            variant: Variant::Mam,
            ..PatchNetConfig::default()
        };
        assert!(matches!(
            Model::build(cfg.clone(), None),
            Err(Error::Usage(_))
        ));
        // wrong resolution
        assert!(matches!(
            Model::build(cfg.clone(), Some(toy_basis(4, 4, 3))),
            Err(Error::Usage(_))
        ));
        // correct resolution
        assert!(Model::build(cfg, Some(toy_basis(8, 8, 10))).is_ok());
    }

    #[test]
    fn baseline_and_attention_share_backbone_init() {
        let baseline = Model::build(
            PatchNetConfig {
                variant: Variant::None,
                ..PatchNetConfig::default()
            },
            None,
        )
        .unwrap();
        let attn = Model::build(PatchNetConfig::default(), None).unwrap();
        for ((na, ta), (nb, tb)) in baseline
            .params()
            .iter()
            .zip(attn.params().iter().take(10))
        {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn wrong_input_size_is_shape_error() {
        let model = Model::build(PatchNetConfig::default(), None).unwrap();
        let bad = Tensor::zeros(vec![32, 32, 3]);
        assert!(matches!(
            model.forward_batch(&[bad]),
            Err(Error::Shape(_))
        ));
    }
}
