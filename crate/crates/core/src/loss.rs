//! Ambiguity-aware losses with analytic gradients.
//!
//! All three terms are computed per view (a slice for sparse annotations, the
//! whole volume for partial ones) on softmax probabilities. Focal
//! cross-entropy and soft dice act on the *merged* label space, where
//! background and every unannotated class share one channel, so a voxel
//! labeled 0 is never punished for actually being an unannotated structure.
//! The entropy term acts on the full unmerged channels and sharpens
//! predictions everywhere. Gradients are returned with respect to the
//! logits, propagated analytically through the merge and the softmax.

use crate::error::{Error, Result};
use crate::label::{merge_field, AnnotatedSubset, AnnotatedVolume, ClassSet, MergeMap, ProbField};
use crate::volume::Field;

/// Probabilities below this are clamped inside logarithms. The derivative of
/// the clamped log is zero in the clamp region.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Dice smoothing term guarding empty channels.
    pub epsilon: f64,
    /// Focal down-weighting exponent (0 recovers plain cross-entropy).
    pub focal_exponent: f64,
    /// Entropy weight for views that carry annotations.
    pub lambda_annotated: f64,
    /// Entropy weight for views without any annotation.
    pub lambda_unannotated: f64,
    /// When false, every view is treated as fully annotated, i.e. label 0 is
    /// taken as confirmed background. This is the naive baseline that the
    /// merged-background losses are measured against.
    pub ambiguity_aware: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 1.0,
            focal_exponent: 2.0,
            lambda_annotated: 1.0,
            lambda_unannotated: 3.0,
            ambiguity_aware: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        // Zero is tolerated so gradient checks can probe the unsmoothed dice;
        // the trainer separately insists on a positive value.
        if !(self.epsilon >= 0.0) {
            return Err(Error::Contract(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.focal_exponent >= 0.0) {
            return Err(Error::Contract(format!(
                "focal_exponent must be >= 0, got {}",
                self.focal_exponent
            )));
        }
        if !(self.lambda_annotated >= 0.0) || !(self.lambda_unannotated >= 0.0) {
            return Err(Error::Contract(format!(
                "lambdas must be >= 0, got {} and {}",
                self.lambda_annotated, self.lambda_unannotated
            )));
        }
        Ok(())
    }
}

/// Soft overlap counts per merged channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceTerms {
    pub true_pos: Vec<f64>,
    pub false_pos: Vec<f64>,
    pub false_neg: Vec<f64>,
}

/// A loss value with its gradient with respect to the logits that produced
/// the probabilities, plus the voxel count used for normalization.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub n_voxels: usize,
    pub grad_logits: Field,
}

impl LossResult {
    fn zeros_like(p: &Field) -> Self {
        LossResult {
            value: 0.0,
            n_voxels: p.n_voxels(),
            grad_logits: Field::zeros(p.channels(), p.spatial().to_vec()),
        }
    }

    fn check_finite(self, what: &str) -> Result<Self> {
        if !self.value.is_finite() || !self.grad_logits.all_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(self)
    }
}

/// Combined objective over all views of one volume, with per-term breakdown.
/// `value = focal + dice + entropy_weighted`, each a mean over views.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub value: f64,
    pub focal: f64,
    pub dice: f64,
    /// Mean over views of the *unweighted* entropy term.
    pub entropy: f64,
    pub n_views: usize,
    pub grad_logits: Field,
}

/// Numerically stable softmax across channels, per voxel.
pub fn softmax(logits: &Field) -> Result<ProbField> {
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits passed to softmax".into()));
    }
    let c_n = logits.channels();
    let n = logits.n_voxels();
    let mut out = Field::zeros(c_n, logits.spatial().to_vec());
    let mut maxes = vec![f64::NEG_INFINITY; n];
    for c in 0..c_n {
        let plane = logits.plane(c);
        for v in 0..n {
            if plane[v] > maxes[v] {
                maxes[v] = plane[v];
            }
        }
    }
    let mut sums = vec![0.0f64; n];
    for c in 0..c_n {
        let src = logits.plane(c);
        let dst = out.plane_mut(c);
        for v in 0..n {
            let e = (src[v] - maxes[v]).exp();
            dst[v] = e;
            sums[v] += e;
        }
    }
    for c in 0..c_n {
        let dst = out.plane_mut(c);
        for v in 0..n {
            dst[v] /= sums[v];
        }
    }
    Ok(ProbField::new_unchecked(out))
}

fn check_view_args(
    p: &ProbField,
    labels: &[u8],
    subset: &AnnotatedSubset,
    classes: &ClassSet,
) -> Result<()> {
    let field = p.field();
    if field.channels() != classes.n_channels() {
        return Err(Error::Contract(format!(
            "probability field has {} channels, universe needs {}",
            field.channels(),
            classes.n_channels()
        )));
    }
    if labels.len() != field.n_voxels() {
        return Err(Error::Contract(format!(
            "{} labels for {} voxels",
            labels.len(),
            field.n_voxels()
        )));
    }
    for &l in labels {
        if l > 0 && !subset.contains(l) {
            return Err(Error::InvalidAnnotation(format!(
                "label {} outside the view's subset {:?}",
                l,
                subset.members()
            )));
        }
        if l as usize > classes.n_structures() {
            return Err(Error::InvalidAnnotation(format!(
                "label {} above class universe N={}",
                l,
                classes.n_structures()
            )));
        }
    }
    Ok(())
}

/// (1-q)^g with the conventions needed here: exact fast paths for the common
/// exponents and a clamp against tiny negative bases from float rounding.
fn pow_base(u: f64, g: f64) -> f64 {
    let u = u.max(0.0);
    if g == 2.0 {
        u * u
    } else if g == 1.0 {
        u
    } else if g == 0.0 {
        1.0
    } else {
        u.powf(g)
    }
}

/// Focal cross-entropy on the merged label space of one view.
///
/// value = -(1/N_v) * sum_i (1 - q_i)^g * ln(max(q_i, 1e-12)) where q_i is
/// the merged probability of voxel i's (merged) target channel. A view with
/// an empty subset contributes exactly zero with zero gradient.
pub fn focal_ce(
    p: &ProbField,
    labels: &[u8],
    subset: &AnnotatedSubset,
    classes: &ClassSet,
    cfg: &LossConfig,
) -> Result<LossResult> {
    cfg.validate()?;
    check_view_args(p, labels, subset, classes)?;
    if subset.is_empty() {
        return Ok(LossResult::zeros_like(p.field()));
    }
    let map = MergeMap::new(subset, classes)?;
    let merged = merge_field(p.field(), &map);
    let n = labels.len();
    let n_v = n as f64;
    let g = cfg.focal_exponent;

    let mut sum = 0.0;
    let mut grad_merged = Field::zeros(map.n_merged(), vec![n]);
    for (v, &l) in labels.iter().enumerate() {
        let t = map.merged_of_label(l);
        let q = merged.at(t, v);
        let qc = q.max(LOG_CLAMP);
        let u = (1.0 - q).max(0.0);
        let ln_qc = qc.ln();
        sum += pow_base(u, g) * ln_qc;
        // d/dq [(1-q)^g * ln(max(q, clamp))]; the log term's derivative is
        // zero inside the clamp region, the power term's limit at u=0 is 0.
        let mut df = 0.0;
        if g > 0.0 && u > 0.0 {
            df -= g * pow_base(u, g - 1.0) * ln_qc;
        }
        if q > LOG_CLAMP {
            df += pow_base(u, g) / q;
        }
        grad_merged.plane_mut(t)[v] = -df / n_v;
    }
    let value = -sum / n_v;
    let grad_logits = merged_grad_to_logits(p.field(), &merged, &grad_merged, &map);
    LossResult { value, n_voxels: n, grad_logits }.check_finite("focal cross-entropy")
}

/// Soft overlap counts of one view in the merged space.
pub fn dice_terms(
    p: &ProbField,
    labels: &[u8],
    subset: &AnnotatedSubset,
    classes: &ClassSet,
) -> Result<DiceTerms> {
    check_view_args(p, labels, subset, classes)?;
    let map = MergeMap::new(subset, classes)?;
    let merged = merge_field(p.field(), &map);
    let k = map.n_merged();
    let mut terms = DiceTerms {
        true_pos: vec![0.0; k],
        false_pos: vec![0.0; k],
        false_neg: vec![0.0; k],
    };
    for c in 0..k {
        let plane = merged.plane(c);
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (v, &l) in labels.iter().enumerate() {
            if map.merged_of_label(l) == c {
                tp += plane[v];
                fneg += 1.0 - plane[v];
            } else {
                fp += plane[v];
            }
        }
        terms.true_pos[c] = tp;
        terms.false_pos[c] = fp;
        terms.false_neg[c] = fneg;
    }
    Ok(terms)
}

/// Soft dice loss on the merged label space of one view.
///
/// value = 1 - (1/K) * sum_c (2*TP_c + eps) / (2*TP_c + FP_c + FN_c + eps)
/// over the K = |subset|+1 merged channels. Empty subsets contribute exactly
/// zero with zero gradient.
pub fn dice(
    p: &ProbField,
    labels: &[u8],
    subset: &AnnotatedSubset,
    classes: &ClassSet,
    cfg: &LossConfig,
) -> Result<LossResult> {
    cfg.validate()?;
    check_view_args(p, labels, subset, classes)?;
    if subset.is_empty() {
        return Ok(LossResult::zeros_like(p.field()));
    }
    let map = MergeMap::new(subset, classes)?;
    let merged = merge_field(p.field(), &map);
    let n = labels.len();
    let k = map.n_merged();
    let k_f = k as f64;
    let eps = cfg.epsilon;

    // Per-channel ratio and the two per-voxel gradient coefficients: a voxel
    // contributes through TP (when targeted) or FP (when not).
    let mut ratio_sum = 0.0;
    let mut coeff_on = vec![0.0; k]; // target voxels
    let mut coeff_off = vec![0.0; k]; // non-target voxels
    let terms = {
        let mut tp = vec![0.0; k];
        let mut fp = vec![0.0; k];
        let mut fneg = vec![0.0; k];
        for c in 0..k {
            let plane = merged.plane(c);
            for (v, &l) in labels.iter().enumerate() {
                if map.merged_of_label(l) == c {
                    tp[c] += plane[v];
                    fneg[c] += 1.0 - plane[v];
                } else {
                    fp[c] += plane[v];
                }
            }
        }
        (tp, fp, fneg)
    };
    for c in 0..k {
        let num = 2.0 * terms.0[c] + eps;
        let den = 2.0 * terms.0[c] + terms.1[c] + terms.2[c] + eps;
        ratio_sum += num / den;
        // d(num/den)/d p_c[v]: num' = 2y, den' = 1  (y in {0,1}).
        coeff_on[c] = -(2.0 * den - num) / (den * den) / k_f;
        coeff_off[c] = num / (den * den) / k_f;
    }
    let value = 1.0 - ratio_sum / k_f;

    let mut grad_merged = Field::zeros(k, vec![n]);
    for c in 0..k {
        let dst = grad_merged.plane_mut(c);
        for (v, &l) in labels.iter().enumerate() {
            dst[v] = if map.merged_of_label(l) == c { coeff_on[c] } else { coeff_off[c] };
        }
    }
    let grad_logits = merged_grad_to_logits(p.field(), &merged, &grad_merged, &map);
    LossResult { value, n_voxels: n, grad_logits }.check_finite("dice")
}

/// Shannon entropy of the per-voxel predictions over the full unmerged
/// channels, averaged over voxels. Always in [0, ln(channels)].
pub fn entropy_reg(p: &ProbField) -> Result<LossResult> {
    let field = p.field();
    let n = field.n_voxels();
    let n_v = n as f64;
    let c_n = field.channels();

    let mut sum = 0.0;
    let mut grad = Field::zeros(c_n, field.spatial().to_vec());
    for c in 0..c_n {
        let src = field.plane(c);
        let dst = grad.plane_mut(c);
        for v in 0..n {
            let q = src[v];
            if q > 0.0 {
                sum += q * q.max(LOG_CLAMP).ln();
            }
            dst[v] = -(q.max(LOG_CLAMP).ln() + 1.0) / n_v;
        }
    }
    let value = -sum / n_v;
    let grad_logits = probs_grad_to_logits(field, &grad);
    LossResult { value, n_voxels: n, grad_logits }.check_finite("entropy regularizer")
}

/// Combined objective over all views of one volume:
/// mean over views of focal + dice + lambda * entropy, where lambda switches
/// on whether the view carries any annotation. With `ambiguity_aware` off,
/// every view is scored against the full class universe instead (label 0
/// becomes confirmed background) and the annotated lambda applies throughout.
pub fn total_loss(
    logits: &Field,
    vol: &AnnotatedVolume,
    classes: &ClassSet,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    cfg.validate()?;
    if logits.channels() != classes.n_channels() {
        return Err(Error::Contract(format!(
            "logits have {} channels, universe needs {}",
            logits.channels(),
            classes.n_channels()
        )));
    }
    if logits.spatial() != vol.shape() {
        return Err(Error::Contract(format!(
            "logit spatial shape {:?} does not match volume shape {:?}",
            logits.spatial(),
            vol.shape()
        )));
    }
    let p = softmax(logits)?;
    let full = p.field();
    let n = full.n_voxels();
    let c_n = full.channels();
    let spans = vol.view_spans()?;
    let n_views = spans.len();
    let scale = 1.0 / n_views as f64;

    let mut grad = Field::zeros(c_n, logits.spatial().to_vec());
    let (mut value_sum, mut focal_sum, mut dice_sum, mut entropy_sum) = (0.0, 0.0, 0.0, 0.0);
    for (span, subset) in spans {
        let subset = if cfg.ambiguity_aware { subset } else { AnnotatedSubset::full(classes) };
        let idxs: Vec<usize> = span.indices().collect();
        let k = idxs.len();
        let mut view_field = Field::zeros(c_n, vec![k]);
        for c in 0..c_n {
            let src = full.plane(c);
            let dst = view_field.plane_mut(c);
            for (j, &i) in idxs.iter().enumerate() {
                dst[j] = src[i];
            }
        }
        let view_p = ProbField::new_unchecked(view_field);
        let view_labels: Vec<u8> = idxs.iter().map(|&i| vol.labels.data()[i]).collect();

        let f = focal_ce(&view_p, &view_labels, &subset, classes, cfg)?;
        let d = dice(&view_p, &view_labels, &subset, classes, cfg)?;
        let e = entropy_reg(&view_p)?;
        let lambda =
            if subset.is_empty() { cfg.lambda_unannotated } else { cfg.lambda_annotated };

        value_sum += f.value + d.value + lambda * e.value;
        focal_sum += f.value;
        dice_sum += d.value;
        entropy_sum += e.value;
        for c in 0..c_n {
            let fg = f.grad_logits.plane(c);
            let dg = d.grad_logits.plane(c);
            let eg = e.grad_logits.plane(c);
            let dst = grad.plane_mut(c);
            for (j, &i) in idxs.iter().enumerate() {
                dst[i] += fg[j] + dg[j] + lambda * eg[j];
            }
        }
    }
    for x in grad.data_mut() {
        *x *= scale;
    }
    debug_assert_eq!(grad.n_voxels(), n);
    let out = TotalLoss {
        value: value_sum * scale,
        focal: focal_sum * scale,
        dice: dice_sum * scale,
        entropy: entropy_sum * scale,
        n_views,
        grad_logits: grad,
    };
    if !out.value.is_finite() || !out.grad_logits.all_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok(out)
}

/// Backpropagate dL/dp through the softmax:
/// dL/dz_c = p_c * (g_c - sum_j g_j * p_j).
fn probs_grad_to_logits(p: &Field, g: &Field) -> Field {
    let n = p.n_voxels();
    let c_n = p.channels();
    let mut dot = vec![0.0f64; n];
    for c in 0..c_n {
        let pp = p.plane(c);
        let gg = g.plane(c);
        for v in 0..n {
            dot[v] += pp[v] * gg[v];
        }
    }
    let mut out = Field::zeros(c_n, p.spatial().to_vec());
    for c in 0..c_n {
        let pp = p.plane(c);
        let gg = g.plane(c);
        let oo = out.plane_mut(c);
        for v in 0..n {
            oo[v] = pp[v] * (gg[v] - dot[v]);
        }
    }
    out
}

/// Same as `probs_grad_to_logits` but for a gradient given on the merged
/// channels: every original channel inherits its merged channel's gradient.
fn merged_grad_to_logits(
    p_unmerged: &Field,
    p_merged: &Field,
    g_merged: &Field,
    map: &MergeMap,
) -> Field {
    let n = p_unmerged.n_voxels();
    let mut dot = vec![0.0f64; n];
    for m in 0..p_merged.channels() {
        let pp = p_merged.plane(m);
        let gg = g_merged.plane(m);
        for v in 0..n {
            dot[v] += pp[v] * gg[v];
        }
    }
    let mut out = Field::zeros(p_unmerged.channels(), p_unmerged.spatial().to_vec());
    for c in 0..p_unmerged.channels() {
        let m = map.merged_of(c);
        let pp = p_unmerged.plane(c);
        let gg = g_merged.plane(m);
        let oo = out.plane_mut(c);
        for v in 0..n {
            oo[v] = pp[v] * (gg[v] - dot[v]);
        }
    }
    out
}
