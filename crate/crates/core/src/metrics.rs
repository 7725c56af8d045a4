//! Detection metrics over classifier scores (ROC, AUC, EER, TDR@FDR) and
//! localization metrics over mask pairs (IINC, IoU, cosine similarity,
//! PBCA).
//!
//! The ROC keeps one operating point per distinct threshold; AUC is the
//! trapezoid over those points (and therefore equals the Mann-Whitney
//! statistic with ties counted 1/2). EER and TDR@FDR interpolate on the
//! best-TDR-per-FDR envelope of the curve.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::masks::{ManipMask, ProbMap};

/// Binary sample label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Real,
    Fake,
}

/// One classifier output: softmax probability of the fake class.
#[derive(Clone, Copy, Debug)]
pub struct ScoredSample {
    pub score: f64,
    pub label: Label,
}

impl ScoredSample {
    pub fn new(score: f64, label: Label) -> Self {
        ScoredSample { score, label }
    }
}

/// Operating points (fdr, tdr) from a threshold sweep, fdr non-decreasing,
/// from (0, 0) to (1, 1).
#[derive(Clone, Debug)]
pub struct RocCurve {
    points: Vec<(f64, f64)>,
}

impl RocCurve {
    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// One point per distinct FDR, keeping the best TDR.
    fn envelope(&self) -> Vec<(f64, f64)> {
        let mut env: Vec<(f64, f64)> = Vec::new();
        for &(fdr, tdr) in &self.points {
            match env.last_mut() {
                Some(last) if last.0 == fdr => last.1 = last.1.max(tdr),
                _ => env.push((fdr, tdr)),
            }
        }
        env
    }
}

/// Sweep every distinct score as a threshold (predict fake when
/// score >= t), plus the predict-nothing sentinel.
pub fn roc(samples: &[ScoredSample]) -> Result<RocCurve> {
    let positives = samples.iter().filter(|s| s.label == Label::Fake).count();
    let negatives = samples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::usage(
            "roc requires at least one sample of each label",
        ));
    }
    if samples.iter().any(|s| !s.score.is_finite()) {
        return Err(Error::usage("roc scores must be finite"));
    }

    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        while i < sorted.len() && sorted[i].score == t {
            match sorted[i].label {
                Label::Fake => tp += 1,
                Label::Real => fp += 1,
            }
            i += 1;
        }
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    let mut area = 0.0;
    for pair in curve.points.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    area
}

/// Rate at which FDR equals 1 - TDR, interpolated on the envelope.
pub fn eer(curve: &RocCurve) -> f64 {
    let env = curve.envelope();
    // d = fdr + tdr - 1 starts <= 0 and ends at +1.
    let d = |p: (f64, f64)| p.0 + p.1 - 1.0;
    if d(env[0]) >= 0.0 {
        return env[0].0;
    }
    for pair in env.windows(2) {
        let (d0, d1) = (d(pair[0]), d(pair[1]));
        if d1 >= 0.0 {
            let s = -d0 / (d1 - d0);
            return pair[0].0 + s * (pair[1].0 - pair[0].0);
        }
    }
    // Unreachable: the envelope ends at (1, 1) where d = 1.
    1.0
}

/// TDR at a target FDR, linearly interpolated on the envelope. Targets
/// below the smallest achievable positive FDR fall on the segment
/// anchored at the FDR = 0 point.
pub fn tdr_at_fdr(curve: &RocCurve, fdr: f64) -> f64 {
    let env = curve.envelope();
    if fdr <= env[0].0 {
        return env[0].1;
    }
    for pair in env.windows(2) {
        if fdr <= pair[1].0 {
            let (x0, y0) = pair[0];
            let (x1, y1) = pair[1];
            let s = (fdr - x0) / (x1 - x0);
            return y0 + s * (y1 - y0);
        }
    }
    env.last().map(|p| p.1).unwrap_or(1.0)
}

/// Inverse Intersection Non-Containment between a predicted and a ground
/// truth mask. The union term in the 1/(3 - U) prefactor is the union's
/// area fraction, keeping the score in [0, 1].
pub fn iinc(pred: &ManipMask, gt: &ManipMask) -> Result<f64> {
    check_dims(pred, gt)?;
    let total = pred.data().len() as f64;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p & g) as usize;
        union += (p | g) as usize;
    }
    let pred_sum = pred.sum();
    let gt_sum = gt.sum();
    let union_frac = union as f64 / total;
    let prefactor = 1.0 / (3.0 - union_frac);

    if gt_sum == 0 && pred_sum == 0 {
        Ok(0.0)
    } else if gt_sum == 0 || pred_sum == 0 {
        Ok(prefactor)
    } else {
        let inter = inter as f64;
        Ok(prefactor * (2.0 - inter / pred_sum as f64 - inter / gt_sum as f64))
    }
}

/// Intersection over union; undefined when the union is empty.
pub fn iou(pred: &ManipMask, gt: &ManipMask) -> Result<Option<f64>> {
    check_dims(pred, gt)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p & g) as usize;
        union += (p | g) as usize;
    }
    if union == 0 {
        Ok(None)
    } else {
        Ok(Some(inter as f64 / union as f64))
    }
}

/// Cosine similarity of the vectorized maps; undefined when either map
/// has zero norm.
pub fn cosine_sim(pred: &ProbMap, gt: &ProbMap) -> Result<Option<f64>> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::usage("map sizes differ"));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        dot += a as f64 * b as f64;
        na += a as f64 * a as f64;
        nb += b as f64 * b as f64;
    }
    if na == 0.0 || nb == 0.0 {
        Ok(None)
    } else {
        Ok(Some(dot / (na.sqrt() * nb.sqrt())))
    }
}

/// Pixel-wise binary classification accuracy.
pub fn pbca(pred: &ManipMask, gt: &ManipMask) -> Result<f64> {
    check_dims(pred, gt)?;
    let agree = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(p, g)| p == g)
        .count();
    Ok(agree as f64 / pred.data().len() as f64)
}

fn check_dims(a: &ManipMask, b: &ManipMask) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::usage(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Per-pair localization scores for one predicted/ground-truth pair.
#[derive(Clone, Copy, Debug)]
pub struct LocalizationScores {
    pub iinc: f64,
    pub iou: Option<f64>,
    pub cosine: Option<f64>,
    pub pbca: f64,
}

/// Score a predicted probability map against a ground-truth mask: IINC,
/// IoU and PBCA on the map binarized at `thresh`, cosine on the raw map.
pub fn score_map_pair(pred: &ProbMap, gt: &ManipMask, thresh: f32) -> Result<LocalizationScores> {
    let pred_mask = crate::masks::binarize(pred, thresh);
    Ok(LocalizationScores {
        iinc: iinc(&pred_mask, gt)?,
        iou: iou(&pred_mask, gt)?,
        cosine: cosine_sim(pred, &gt.to_prob_map())?,
        pbca: pbca(&pred_mask, gt)?,
    })
}

/// Streaming mean of localization scores; IoU and cosine average over
/// the pairs where they are defined.
#[derive(Clone, Debug, Default)]
pub struct LocalizationAggregate {
    count: usize,
    iinc_sum: f64,
    iou_sum: f64,
    iou_count: usize,
    cos_dist_sum: f64,
    cos_count: usize,
    pbca_sum: f64,
}

impl LocalizationAggregate {
    pub fn push(&mut self, s: &LocalizationScores) {
        self.count += 1;
        self.iinc_sum += s.iinc;
        self.pbca_sum += s.pbca;
        if let Some(v) = s.iou {
            self.iou_sum += v;
            self.iou_count += 1;
        }
        if let Some(v) = s.cosine {
            self.cos_dist_sum += 1.0 - v;
            self.cos_count += 1;
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finalize(&self) -> Option<CategoryReport> {
        if self.count == 0 {
            return None;
        }
        Some(CategoryReport {
            count: self.count,
            mean_iinc: self.iinc_sum / self.count as f64,
            mean_iou: (self.iou_count > 0).then(|| self.iou_sum / self.iou_count as f64),
            mean_cosine_distance: (self.cos_count > 0)
                .then(|| self.cos_dist_sum / self.cos_count as f64),
            mean_pbca: self.pbca_sum / self.count as f64,
        })
    }
}

/// Localization summary for one sample category.
#[derive(Clone, Debug, Serialize)]
pub struct CategoryReport {
    pub count: usize,
    pub mean_iinc: f64,
    pub mean_iou: Option<f64>,
    pub mean_cosine_distance: Option<f64>,
    pub mean_pbca: f64,
}

/// Per-category localization breakdown.
#[derive(Clone, Debug, Default, Serialize)]
pub struct PerCategory {
    pub real: Option<CategoryReport>,
    pub partial_fake: Option<CategoryReport>,
    pub entire_fake: Option<CategoryReport>,
}

/// Detection and localization metrics over one evaluation split.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub auc: f64,
    pub eer: f64,
    pub tdr_at_1pct: f64,
    pub tdr_at_0_1pct: f64,
    pub mean_iinc: Option<f64>,
    pub mean_iou: Option<f64>,
    pub mean_cosine_distance: Option<f64>,
    pub mean_pbca: Option<f64>,
    pub per_category: PerCategory,
}

/// ROC points as a two-column CSV for plotting.
pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("fdr,tdr\n");
    for &(fdr, tdr) in curve.points() {
        out.push_str(&format!("{fdr},{tdr}\n"));
    }
    out
}
