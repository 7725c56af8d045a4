//! The attention-based layer.
//!
//! Given a feature map F, an estimator Φ produces a pre-sigmoid attention
//! map; the refined features are F ⊙ Sigmoid(M_att), broadcast over
//! channels. Φ comes in two variants: a 1x1-conv direct regression, and a
//! manipulation appearance model (MAM) that regresses weights α for a
//! frozen affine span M̄ + A·α fitted by PCA over ground-truth masks.
//!
//! Both variants emit logit-space maps; the sigmoid is applied exactly
//! once, by [`apply_attention`]. The MAM mean and basis therefore live in
//! logit space as well, so sigmoid(M̄ + A·α) can reach near-0/near-1
//! masks.

use std::path::Path;

use crate::container;
use crate::error::{Error, Result};
use crate::masks::ProbMap;
use crate::rng::Pcg32;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Masks are clamped to [ε, 1-ε] before the logit transform so exact 0/1
/// pixels stay finite.
pub const LOGIT_CLAMP_EPS: f64 = 0.01;

/// Hidden width of the MAM α-regressor convolution.
pub const MAM_CONV_CHANNELS: usize = 8;

/// Default number of basis maps.
pub const DEFAULT_MAM_COMPONENTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    Regression,
    Mam,
}

/// Parameters of the map estimator Φ. Exactly one variant's parameters
/// exist at a time.
#[derive(Clone, Debug)]
pub enum AttentionHead {
    /// 1x1 conv C -> 1: adds exactly C+1 trainable parameters.
    Regression { kernel: Tensor, bias: Tensor },
    /// 3x3 conv C -> 8, relu, flatten, dense -> n weights α.
    Mam {
        conv_kernel: Tensor,
        conv_bias: Tensor,
        dense_weights: Tensor,
        dense_bias: Tensor,
    },
}

impl AttentionHead {
    pub fn new_regression(channels: usize, rng: &mut Pcg32) -> Self {
        let bound = (6.0 / channels as f32).sqrt();
        AttentionHead::Regression {
            kernel: Tensor::uniform(vec![1, 1, channels, 1], bound, rng),
            bias: Tensor::zeros(vec![1]),
        }
    }

    pub fn new_mam(
        channels: usize,
        map_h: usize,
        map_w: usize,
        n: usize,
        rng: &mut Pcg32,
    ) -> Self {
        let conv_bound = (6.0 / (9 * channels) as f32).sqrt();
        let flat = map_h * map_w * MAM_CONV_CHANNELS;
        let dense_bound = (6.0 / flat as f32).sqrt();
        AttentionHead::Mam {
            conv_kernel: Tensor::uniform(vec![3, 3, channels, MAM_CONV_CHANNELS], conv_bound, rng),
            conv_bias: Tensor::zeros(vec![MAM_CONV_CHANNELS]),
            dense_weights: Tensor::uniform(vec![flat, n], dense_bound, rng),
            dense_bias: Tensor::zeros(vec![n]),
        }
    }

    pub fn variant(&self) -> AttentionVariant {
        match self {
            AttentionHead::Regression { .. } => AttentionVariant::Regression,
            AttentionHead::Mam { .. } => AttentionVariant::Mam,
        }
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            AttentionHead::Regression { kernel, bias } => {
                vec![("attn.kernel", kernel), ("attn.bias", bias)]
            }
            AttentionHead::Mam {
                conv_kernel,
                conv_bias,
                dense_weights,
                dense_bias,
            } => vec![
                ("attn.conv.kernel", conv_kernel),
                ("attn.conv.bias", conv_bias),
                ("attn.fc.weights", dense_weights),
                ("attn.fc.bias", dense_bias),
            ],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            AttentionHead::Regression { kernel, bias } => {
                vec![("attn.kernel", kernel), ("attn.bias", bias)]
            }
            AttentionHead::Mam {
                conv_kernel,
                conv_bias,
                dense_weights,
                dense_bias,
            } => vec![
                ("attn.conv.kernel", conv_kernel),
                ("attn.conv.bias", conv_bias),
                ("attn.fc.weights", dense_weights),
                ("attn.fc.bias", dense_bias),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Tape node ids of a head's parameters, in [`AttentionHead::params`]
/// order.
#[derive(Clone, Debug)]
pub struct HeadNodes {
    variant: AttentionVariant,
    ids: Vec<NodeId>,
}

impl HeadNodes {
    pub fn new(variant: AttentionVariant, ids: Vec<NodeId>) -> Self {
        HeadNodes { variant, ids }
    }

    /// Record all head parameters as leaves on a tape.
    pub fn register(tape: &mut Tape, head: &AttentionHead) -> Self {
        let ids = head
            .params()
            .iter()
            .map(|(_, t)| tape.leaf((*t).clone()))
            .collect();
        HeadNodes {
            variant: head.variant(),
            ids,
        }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Result of one attention application, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// Pre-sigmoid map, H x W.
    pub raw_map: NodeId,
    /// Sigmoid(raw_map), in [0, 1].
    pub prob_map: NodeId,
    /// F ⊙ prob_map, broadcast over channels.
    pub refined: NodeId,
    /// MAM weights, when the MAM variant produced the map.
    pub alpha: Option<NodeId>,
}

/// Refine features: F ⊙ Sigmoid(raw_map). Differentiable through both
/// arguments.
pub fn apply_attention(tape: &mut Tape, features: NodeId, raw_map: NodeId) -> Result<AttentionOutput> {
    let fs = tape.value(features).shape().to_vec();
    let ms = tape.value(raw_map).shape().to_vec();
    if fs.len() != 3 || ms.len() != 2 || fs[0] != ms[0] || fs[1] != ms[1] {
        return Err(Error::shape(format!(
            "attention map {ms:?} does not match feature map {fs:?}"
        )));
    }
    let prob_map = tape.sigmoid(raw_map);
    let refined = tape.elemwise_mul(features, prob_map)?;
    Ok(AttentionOutput {
        raw_map,
        prob_map,
        refined,
        alpha: None,
    })
}

/// Direct regression Φ: a single 1x1 convolution C -> 1.
pub fn phi_regression(tape: &mut Tape, features: NodeId, head: &HeadNodes) -> Result<NodeId> {
    if head.variant != AttentionVariant::Regression {
        return Err(Error::usage("phi_regression called with a non-regression head"));
    }
    let fs = tape.value(features).shape().to_vec();
    if fs.len() != 3 {
        return Err(Error::shape("phi_regression expects HxWxC features"));
    }
    let conv = tape.conv2d(features, head.ids[0], head.ids[1], 1, 0)?;
    tape.reshape(conv, vec![fs[0], fs[1]])
}

/// MAM Φ: regress α with conv+relu+dense, then expand along the frozen
/// affine span M̄ + A·α. Returns (alpha, raw_map).
pub fn phi_mam(
    tape: &mut Tape,
    features: NodeId,
    head: &HeadNodes,
    basis: &MamBasis,
) -> Result<(NodeId, NodeId)> {
    if head.variant != AttentionVariant::Mam {
        return Err(Error::usage("phi_mam called with a non-MAM head"));
    }
    let fs = tape.value(features).shape().to_vec();
    if fs.len() != 3 {
        return Err(Error::shape("phi_mam expects HxWxC features"));
    }
    let (h, w) = (fs[0], fs[1]);
    if h != basis.map_h() || w != basis.map_w() {
        return Err(Error::shape(format!(
            "feature map {h}x{w} does not match basis {}x{}",
            basis.map_h(),
            basis.map_w()
        )));
    }
    let conv = tape.conv2d(features, head.ids[0], head.ids[1], 1, 1)?;
    let act = tape.relu(conv);
    let flat = tape.reshape(act, vec![h * w * MAM_CONV_CHANNELS])?;
    let alpha = tape.dense(flat, head.ids[2], head.ids[3])?;
    let span = tape.affine_span(basis.mean(), basis.basis(), alpha)?;
    let raw_map = tape.reshape(span, vec![h, w])?;
    Ok((alpha, raw_map))
}

/// Run the configured Φ and the attention refinement in one step.
pub fn attend(
    tape: &mut Tape,
    features: NodeId,
    head: &HeadNodes,
    basis: Option<&MamBasis>,
) -> Result<AttentionOutput> {
    match head.variant {
        AttentionVariant::Regression => {
            let raw = phi_regression(tape, features, head)?;
            apply_attention(tape, features, raw)
        }
        AttentionVariant::Mam => {
            let basis = basis.ok_or_else(|| Error::usage("MAM attention requires a basis"))?;
            let (alpha, raw) = phi_mam(tape, features, head, basis)?;
            let mut out = apply_attention(tape, features, raw)?;
            out.alpha = Some(alpha);
            Ok(out)
        }
    }
}

/// Frozen statistical map model: logit-space mean M̄ (H x W) and
/// orthonormal basis A ((H·W) x n). Constants after fitting; never
/// trained.
#[derive(Clone, Debug)]
pub struct MamBasis {
    mean: Tensor,
    basis: Tensor,
}

impl MamBasis {
    pub fn from_tensors(mean: Tensor, basis: Tensor) -> Result<Self> {
        if mean.ndim() != 2 {
            return Err(Error::shape("MAM mean must be HxW"));
        }
        if basis.ndim() != 2 || basis.shape()[0] != mean.numel() {
            return Err(Error::shape(
                "MAM basis must be (H*W) x n with rows matching the mean",
            ));
        }
        Ok(MamBasis { mean, basis })
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn basis(&self) -> &Tensor {
        &self.basis
    }

    pub fn map_h(&self) -> usize {
        self.mean.shape()[0]
    }

    pub fn map_w(&self) -> usize {
        self.mean.shape()[1]
    }

    pub fn n(&self) -> usize {
        self.basis.shape()[1]
    }

    /// Project a mask onto the span and map back through the sigmoid:
    /// sigmoid(M̄ + A·Aᵀ·(logit(x) - M̄)).
    pub fn reconstruct(&self, map: &ProbMap) -> Result<ProbMap> {
        if map.height() != self.map_h() || map.width() != self.map_w() {
            return Err(Error::usage("map dims do not match basis"));
        }
        let d = self.mean.numel();
        let n = self.n();
        let mean = self.mean.data();
        let basis = self.basis.data();
        let centered: Vec<f64> = map
            .data()
            .iter()
            .zip(mean)
            .map(|(&p, &m)| logit(p as f64) - m as f64)
            .collect();
        let mut alpha = vec![0.0f64; n];
        for (row, &c) in centered.iter().enumerate() {
            for (j, a) in alpha.iter_mut().enumerate() {
                *a += basis[row * n + j] as f64 * c;
            }
        }
        let data: Vec<f32> = (0..d)
            .map(|row| {
                let mut v = mean[row] as f64;
                for (j, &a) in alpha.iter().enumerate() {
                    v += basis[row * n + j] as f64 * a;
                }
                sigmoid(v) as f32
            })
            .collect();
        ProbMap::new(self.map_w(), self.map_h(), data)
    }

    /// Persist as an ATNT container with tensors "mean" and "basis".
    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_tensors(
            path,
            &[
                ("mean".to_string(), self.mean.clone()),
                ("basis".to_string(), self.basis.clone()),
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = container::read_tensors(path)?;
        let mut mean = None;
        let mut basis = None;
        for (name, tensor) in entries {
            match name.as_str() {
                "mean" => mean = Some(tensor),
                "basis" => basis = Some(tensor),
                other => {
                    return Err(Error::format(format!(
                        "unexpected tensor {other} in basis file"
                    )))
                }
            }
        }
        match (mean, basis) {
            (Some(m), Some(b)) => MamBasis::from_tensors(m, b),
            _ => Err(Error::format("basis file must hold mean and basis tensors")),
        }
    }
}

fn logit(p: f64) -> f64 {
    let c = p.clamp(LOGIT_CLAMP_EPS, 1.0 - LOGIT_CLAMP_EPS);
    (c / (1.0 - c)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fit the MAM from ground-truth masks: clamp to [ε, 1-ε], map through
/// the logit, and keep the mean plus the top-n principal components of
/// the covariance, each unit-norm with its largest-magnitude entry
/// positive.
pub fn fit_mam_basis(masks: &[ProbMap], n: usize) -> Result<MamBasis> {
    if n < 1 {
        return Err(Error::usage("basis size n must be at least 1"));
    }
    if masks.len() < n + 1 {
        return Err(Error::usage(format!(
            "need at least {} masks to fit {n} components, got {}",
            n + 1,
            masks.len()
        )));
    }
    let (h, w) = (masks[0].height(), masks[0].width());
    if masks.iter().any(|m| m.height() != h || m.width() != w) {
        return Err(Error::usage("all fitting masks must share dimensions"));
    }
    let d = h * w;
    let m = masks.len();

    // Rows of X are logit-transformed masks.
    let mut x = vec![0.0f64; m * d];
    for (r, mask) in masks.iter().enumerate() {
        for (c, &p) in mask.data().iter().enumerate() {
            x[r * d + c] = logit(p as f64);
        }
    }
    let mut mean = vec![0.0f64; d];
    for r in 0..m {
        for c in 0..d {
            mean[c] += x[r * d + c];
        }
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }
    for r in 0..m {
        for c in 0..d {
            x[r * d + c] -= mean[c];
        }
    }

    // Eigendecompose the smaller of the covariance (d x d) and Gram
    // (m x m) matrices; both yield the same feature-space eigenvectors.
    let mut components: Vec<(f64, Vec<f64>)> = if d <= m {
        let mut cov = vec![0.0f64; d * d];
        for r in 0..m {
            let row = &x[r * d..(r + 1) * d];
            for i in 0..d {
                for j in i..d {
                    cov[i * d + j] += row[i] * row[j];
                }
            }
        }
        let norm = 1.0 / (m as f64 - 1.0);
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] * norm;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        let (vals, vecs) = jacobi_eigen(cov, d);
        (0..d)
            .map(|k| (vals[k], (0..d).map(|i| vecs[i * d + k]).collect()))
            .collect()
    } else {
        let mut gram = vec![0.0f64; m * m];
        for a in 0..m {
            for b in a..m {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += x[a * d + c] * x[b * d + c];
                }
                let v = acc / (m as f64 - 1.0);
                gram[a * m + b] = v;
                gram[b * m + a] = v;
            }
        }
        let (vals, vecs) = jacobi_eigen(gram, m);
        (0..m)
            .map(|k| {
                let mut feat = vec![0.0f64; d];
                for r in 0..m {
                    let u = vecs[r * m + k];
                    if u != 0.0 {
                        for c in 0..d {
                            feat[c] += u * x[r * d + c];
                        }
                    }
                }
                let norm: f64 = feat.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for v in feat.iter_mut() {
                        *v /= norm;
                    }
                }
                (vals[k], feat)
            })
            .collect()
    };

    components.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let lambda_max = components.first().map(|c| c.0).unwrap_or(0.0);
    let tol = lambda_max.max(0.0) * 1e-9 + 1e-12;
    let rank = components.iter().filter(|c| c.0 > tol).count();
    if rank < n {
        return Err(Error::usage(format!(
            "degenerate covariance: only {rank} informative components, {n} requested"
        )));
    }

    let mut basis = vec![0.0f32; d * n];
    for (k, (_, vec_k)) in components.iter().take(n).enumerate() {
        // Deterministic sign: largest-magnitude entry positive.
        let mut arg = 0usize;
        let mut best = 0.0f64;
        for (i, &v) in vec_k.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                arg = i;
            }
        }
        let flip = if vec_k[arg] < 0.0 { -1.0 } else { 1.0 };
        for (i, &v) in vec_k.iter().enumerate() {
            basis[i * n + k] = (v * flip) as f32;
        }
    }

    let mean_t = Tensor::new(vec![h, w], mean.iter().map(|&v| v as f32).collect())?;
    let basis_t = Tensor::new(vec![d, n], basis)?;
    MamBasis::from_tensors(mean_t, basis_t)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major).
/// Returns eigenvalues and a matrix whose column k is the k-th
/// eigenvector.
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(1e-300);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off <= scale * 1e-26 {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[p * n + j];
                    let aqj = a[q * n + j];
                    a[p * n + j] = c * apj - s * aqj;
                    a[q * n + j] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    let vals = (0..n).map(|i| a[i * n + i]).collect();
    (vals, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;

    fn head_nodes(tape: &mut Tape, head: &AttentionHead) -> HeadNodes {
        HeadNodes::register(tape, head)
    }

    #[test]
    fn saturated_map_keeps_features() {
        let mut rng = Pcg32::new(1, 0);
        let mut tape = Tape::new();
        let f_t = Tensor::uniform(vec![4, 4, 3], 1.0, &mut rng);
        let f = tape.leaf(f_t.clone());
        let raw = tape.leaf(Tensor::filled(vec![4, 4], 20.0));
        let out = apply_attention(&mut tape, f, raw).unwrap();
        for (&r, &orig) in tape.value(out.refined).data().iter().zip(f_t.data()) {
            assert!((r - orig).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_map_halves_features() {
        let mut rng = Pcg32::new(2, 0);
        let mut tape = Tape::new();
        let f_t = Tensor::uniform(vec![4, 4, 2], 1.0, &mut rng);
        let f = tape.leaf(f_t.clone());
        let raw = tape.leaf(Tensor::zeros(vec![4, 4]));
        let out = apply_attention(&mut tape, f, raw).unwrap();
        for (&r, &orig) in tape.value(out.refined).data().iter().zip(f_t.data()) {
            assert!((r - 0.5 * orig).abs() <= 1e-7);
        }
    }

    #[test]
    fn hard_pattern_map() {
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::filled(vec![2, 2, 2], 1.0));
        let raw = tape.leaf(Tensor::new(vec![2, 2], vec![-20.0, 20.0, 20.0, -20.0]).unwrap());
        let out = apply_attention(&mut tape, f, raw).unwrap();
        let r = tape.value(out.refined).data();
        let expect = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        for (&got, &want) in r.iter().zip(&expect) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn spatial_mismatch_is_shape_error() {
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::zeros(vec![4, 4, 2]));
        let raw = tape.leaf(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            apply_attention(&mut tape, f, raw),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn regression_zero_head_gives_uniform_half() {
        let head = AttentionHead::Regression {
            kernel: Tensor::zeros(vec![1, 1, 3, 1]),
            bias: Tensor::zeros(vec![1]),
        };
        let mut rng = Pcg32::new(3, 0);
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::uniform(vec![4, 4, 3], 1.0, &mut rng));
        let nodes = head_nodes(&mut tape, &head);
        let raw = phi_regression(&mut tape, f, &nodes).unwrap();
        assert!(tape.value(raw).data().iter().all(|&v| v == 0.0));
        let out = apply_attention(&mut tape, f, raw).unwrap();
        assert!(tape.value(out.prob_map).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn regression_channel_selector_projects() {
        let head = AttentionHead::Regression {
            kernel: Tensor::new(vec![1, 1, 2, 1], vec![1.0, 0.0]).unwrap(),
            bias: Tensor::zeros(vec![1]),
        };
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..8).map(|v| v as f32 * 0.1).collect();
        let f = tape.leaf(Tensor::new(vec![2, 2, 2], data.clone()).unwrap());
        let nodes = head_nodes(&mut tape, &head);
        let raw = phi_regression(&mut tape, f, &nodes).unwrap();
        let expect: Vec<f32> = data.iter().step_by(2).copied().collect();
        assert_eq!(tape.value(raw).data(), &expect[..]);
    }

    #[test]
    fn regression_wrong_variant_is_usage_error() {
        let mut rng = Pcg32::new(4, 0);
        let head = AttentionHead::new_mam(2, 4, 4, 2, &mut rng);
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::zeros(vec![4, 4, 2]));
        let nodes = head_nodes(&mut tape, &head);
        assert!(matches!(
            phi_regression(&mut tape, f, &nodes),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn regression_parameter_count_is_c_plus_one() {
        let mut rng = Pcg32::new(5, 0);
        for c in [3, 16, 64] {
            let head = AttentionHead::new_regression(c, &mut rng);
            assert_eq!(head.param_count(), c + 1);
        }
    }

    fn toy_basis(h: usize, w: usize, n: usize, rng: &mut Pcg32) -> MamBasis {
        let masks: Vec<ProbMap> = (0..(n + 5).max(12))
            .map(|_| {
                let data: Vec<f32> = (0..h * w).map(|_| rng.range_f32(0.05, 0.95)).collect();
                ProbMap::new(w, h, data).unwrap()
            })
            .collect();
        fit_mam_basis(&masks, n).unwrap()
    }

    #[test]
    fn mam_zero_dense_yields_mean_map() {
        let mut rng = Pcg32::new(6, 0);
        let basis = toy_basis(4, 4, 3, &mut rng);
        let mut head = AttentionHead::new_mam(2, 4, 4, 3, &mut rng);
        if let AttentionHead::Mam {
            dense_weights,
            dense_bias,
            ..
        } = &mut head
        {
            *dense_weights = Tensor::zeros(dense_weights.shape().to_vec());
            *dense_bias = Tensor::zeros(dense_bias.shape().to_vec());
        }
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::uniform(vec![4, 4, 2], 1.0, &mut rng));
        let nodes = head_nodes(&mut tape, &head);
        let (alpha, raw) = phi_mam(&mut tape, f, &nodes, &basis).unwrap();
        assert!(tape.value(alpha).data().iter().all(|&v| v == 0.0));
        for (&got, &want) in tape.value(raw).data().iter().zip(basis.mean().data()) {
            assert!((got - want).abs() < 1e-7);
        }
    }

    #[test]
    fn unit_alpha_extracts_basis_column() {
        let mut rng = Pcg32::new(7, 0);
        let basis = toy_basis(4, 4, 3, &mut rng);
        for k in 0..3 {
            let mut tape = Tape::new();
            let mut e = vec![0.0f32; 3];
            e[k] = 1.0;
            let alpha = tape.leaf(Tensor::new(vec![3], e).unwrap());
            let raw = tape
                .affine_span(basis.mean(), basis.basis(), alpha)
                .unwrap();
            for (row, (&got, &mean)) in tape
                .value(raw)
                .data()
                .iter()
                .zip(basis.mean().data())
                .enumerate()
            {
                let col = basis.basis().data()[row * 3 + k];
                assert!((got - mean - col).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mam_map_stays_in_span() {
        let mut rng = Pcg32::new(8, 0);
        let basis = toy_basis(4, 4, 3, &mut rng);
        let head = AttentionHead::new_mam(2, 4, 4, 3, &mut rng);
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::uniform(vec![4, 4, 2], 1.0, &mut rng));
        let nodes = head_nodes(&mut tape, &head);
        let (_, raw) = phi_mam(&mut tape, f, &nodes, &basis).unwrap();

        let n = basis.n();
        let d = basis.mean().numel();
        let bd = basis.basis().data();
        let centered: Vec<f64> = tape
            .value(raw)
            .data()
            .iter()
            .zip(basis.mean().data())
            .map(|(&r, &m)| (r - m) as f64)
            .collect();
        let mut coeff = vec![0.0f64; n];
        for (row, &c) in centered.iter().enumerate() {
            for (j, a) in coeff.iter_mut().enumerate() {
                *a += bd[row * n + j] as f64 * c;
            }
        }
        for (row, &c) in centered.iter().enumerate() {
            let mut back = 0.0f64;
            for (j, &a) in coeff.iter().enumerate() {
                back += bd[row * n + j] as f64 * a;
            }
            assert!(
                (c - back).abs() < 1e-5,
                "residual {} at row {row}/{d}",
                (c - back).abs()
            );
        }
    }

    #[test]
    fn phi_gradients_match_finite_differences() {
        let mut rng = Pcg32::new(9, 0);
        let basis = toy_basis(4, 4, 2, &mut rng);
        let f = Tensor::uniform(vec![4, 4, 2], 1.0, &mut rng);

        let reg = AttentionHead::new_regression(2, &mut rng);
        let mut params: Vec<Tensor> = vec![f.clone()];
        params.extend(reg.params().iter().map(|(_, t)| (*t).clone()));
        let err = grad_check(
            |tape, ids| {
                let nodes = HeadNodes::new(AttentionVariant::Regression, ids[1..].to_vec());
                let raw = phi_regression(tape, ids[0], &nodes)?;
                let out = apply_attention(tape, ids[0], raw)?;
                Ok(tape.reduce_mean(out.refined))
            },
            &params,
            1e-3,
            8,
            &mut rng,
        )
        .unwrap();
        assert!(err <= 1e-3, "regression head rel err {err}");

        let mam = AttentionHead::new_mam(2, 4, 4, 2, &mut rng);
        let mut params: Vec<Tensor> = vec![f];
        params.extend(mam.params().iter().map(|(_, t)| (*t).clone()));
        let basis2 = basis.clone();
        let err = grad_check(
            move |tape, ids| {
                let nodes = HeadNodes::new(AttentionVariant::Mam, ids[1..].to_vec());
                let (_, raw) = phi_mam(tape, ids[0], &nodes, &basis2)?;
                let out = apply_attention(tape, ids[0], raw)?;
                Ok(tape.reduce_mean(out.refined))
            },
            &params,
            1e-3,
            8,
            &mut rng,
        )
        .unwrap();
        assert!(err <= 1e-3, "MAM head rel err {err}");
    }

    #[test]
    fn monotone_masking_in_raw_map() {
        let mut rng = Pcg32::new(10, 0);
        for _ in 0..20 {
            let f_data: Vec<f32> = (0..2 * 2 * 3).map(|_| rng.range_f32(0.0, 2.0)).collect();
            let lo: Vec<f32> = (0..4).map(|_| rng.range_f32(-3.0, 3.0)).collect();
            let hi: Vec<f32> = lo.iter().map(|&v| v + rng.range_f32(0.0, 2.0)).collect();
            let mut tape = Tape::new();
            let f = tape.leaf(Tensor::new(vec![2, 2, 3], f_data).unwrap());
            let raw_lo = tape.leaf(Tensor::new(vec![2, 2], lo).unwrap());
            let raw_hi = tape.leaf(Tensor::new(vec![2, 2], hi).unwrap());
            let out_lo = apply_attention(&mut tape, f, raw_lo).unwrap();
            let out_hi = apply_attention(&mut tape, f, raw_hi).unwrap();
            for (&a, &b) in tape
                .value(out_lo.refined)
                .data()
                .iter()
                .zip(tape.value(out_hi.refined).data())
            {
                assert!(b >= a);
            }
        }
    }

    #[test]
    fn fit_rejects_degenerate_and_small_inputs() {
        let mask = ProbMap::new(4, 4, vec![0.3; 16]).unwrap();
        let masks: Vec<ProbMap> = vec![mask; 12];
        // identical masks: zero covariance
        match fit_mam_basis(&masks, 2) {
            Err(Error::Usage(msg)) => assert!(msg.contains("degenerate covariance")),
            other => panic!("expected degenerate covariance error, got {other:?}"),
        }
        assert!(matches!(
            fit_mam_basis(&masks[..2], 2),
            Err(Error::Usage(_))
        ));
        assert!(matches!(fit_mam_basis(&masks, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn fit_mean_matches_logit_mean() {
        let mut rng = Pcg32::new(11, 0);
        let masks: Vec<ProbMap> = (0..20)
            .map(|_| {
                let data: Vec<f32> = (0..16).map(|_| rng.range_f32(0.0, 1.0)).collect();
                ProbMap::new(4, 4, data).unwrap()
            })
            .collect();
        let basis = fit_mam_basis(&masks, 3).unwrap();
        for (c, &got) in basis.mean().data().iter().enumerate() {
            let want: f64 = masks
                .iter()
                .map(|m| logit(m.data()[c] as f64))
                .sum::<f64>()
                / masks.len() as f64;
            assert!((got as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn fitted_basis_is_orthonormal() {
        let mut rng = Pcg32::new(12, 0);
        let masks: Vec<ProbMap> = (0..40)
            .map(|_| {
                let data: Vec<f32> = (0..64).map(|_| rng.range_f32(0.0, 1.0)).collect();
                ProbMap::new(8, 8, data).unwrap()
            })
            .collect();
        let basis = fit_mam_basis(&masks, 10).unwrap();
        let n = basis.n();
        let d = basis.mean().numel();
        let b = basis.basis().data();
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..d)
                    .map(|r| b[r * n + i] as f64 * b[r * n + j] as f64)
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (dot - want).abs() < 1e-5,
                    "column {i}.{j} dot {dot}"
                );
            }
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = Pcg32::new(13, 0);
        let masks: Vec<ProbMap> = (0..30)
            .map(|_| {
                let data: Vec<f32> = (0..16).map(|_| rng.range_f32(0.0, 1.0)).collect();
                ProbMap::new(4, 4, data).unwrap()
            })
            .collect();
        let a = fit_mam_basis(&masks, 4).unwrap();
        let b = fit_mam_basis(&masks, 4).unwrap();
        assert_eq!(a.mean().data(), b.mean().data());
        assert_eq!(a.basis().data(), b.basis().data());
    }

    #[test]
    fn basis_save_load_round_trip() {
        let mut rng = Pcg32::new(14, 0);
        let basis = toy_basis(4, 4, 3, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.atnt");
        basis.save(&path).unwrap();
        let back = MamBasis::load(&path).unwrap();
        assert_eq!(basis.mean().data(), back.mean().data());
        assert_eq!(basis.basis().data(), back.basis().data());
    }
}
