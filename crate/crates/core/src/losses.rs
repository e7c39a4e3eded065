//! Soft-Dice training objectives and their gradients.
//!
//! All losses are evaluated in `f64` on a [`ProbabilityField`] and return the
//! gradient with respect to the probabilities; [`ProbabilityField::softmax_backward`]
//! carries it back to the logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::volumes::OneHotField;

/// Which network produced a probability field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceNet {
    Net1,
    Net2,
}

/// Per-voxel class probabilities, class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityField {
    num_classes: usize,
    dims: [usize; 3],
    data: Vec<f64>,
    source: SourceNet,
}

const SUM_TOLERANCE: f64 = 1e-5;

impl ProbabilityField {
    pub fn new(num_classes: usize, dims: [usize; 3], data: Vec<f64>, source: SourceNet) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != num_classes * n {
            return Err(Error::ShapeMismatch(format!(
                "{} probabilities for {num_classes} classes on {dims:?}",
                data.len()
            )));
        }
        for i in 0..n {
            let s: f64 = (0..num_classes).map(|c| data[c * n + i]).sum();
            if (s - 1.0).abs() > SUM_TOLERANCE || (0..num_classes).any(|c| !(0.0..=1.0).contains(&data[c * n + i])) {
                return Err(Error::InvalidArgument(format!("voxel {i} is not a probability distribution (sum {s})")));
            }
        }
        Ok(Self { num_classes, dims, data, source })
    }

    /// Softmax over the channel axis of a logit map.
    pub fn from_logits(logits: &Tensor, source: SourceNet) -> Self {
        let k = logits.channels();
        let n = logits.spatial();
        let mut data = vec![0.0f64; k * n];
        let l = logits.data();
        for i in 0..n {
            let m = (0..k).map(|c| l[c * n + i] as f64).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..k {
                let e = (l[c * n + i] as f64 - m).exp();
                data[c * n + i] = e;
                z += e;
            }
            for c in 0..k {
                data[c * n + i] /= z;
            }
        }
        Self { num_classes: k, dims: logits.dims(), data, source }
    }

    /// Same as [`ProbabilityField::from_logits`] for `f64` logits.
    pub fn from_logits_f64(num_classes: usize, dims: [usize; 3], logits: &[f64], source: SourceNet) -> Self {
        let n: usize = dims.iter().product();
        assert_eq!(logits.len(), num_classes * n);
        let mut data = vec![0.0; logits.len()];
        for i in 0..n {
            let m = (0..num_classes).map(|c| logits[c * n + i]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..num_classes).map(|c| (logits[c * n + i] - m).exp()).sum();
            for c in 0..num_classes {
                data[c * n + i] = (logits[c * n + i] - m).exp() / z;
            }
        }
        Self { num_classes, dims, data, source }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn source(&self) -> SourceNet {
        self.source
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn argmax(&self) -> Vec<u8> {
        let n = self.voxels();
        (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.num_classes {
                    if self.data[c * n + i] > self.data[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Maps `dL/dp` to `dL/dlogits` through the softmax Jacobian.
    pub fn softmax_backward(&self, grad_p: &[f64]) -> Vec<f64> {
        let k = self.num_classes;
        let n = self.voxels();
        assert_eq!(grad_p.len(), k * n);
        let mut out = vec![0.0; k * n];
        for i in 0..n {
            let dot: f64 = (0..k).map(|c| self.data[c * n + i] * grad_p[c * n + i]).sum();
            for c in 0..k {
                out[c * n + i] = self.data[c * n + i] * (grad_p[c * n + i] - dot);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `1 - Σ_c S_c / N_c`, exactly as the per-count weighting reads.
    Literal,
    /// Inverse-count weights normalised to sum to one.
    NormalizedInverseCount,
    /// Equal weight for every present class.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiMode {
    /// `1 - S_ROI / N_0`.
    Literal,
    /// `1 - S_ROI`.
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub epsilon: f64,
    pub weighting: Weighting,
    pub roi_mode: RoiMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { epsilon: 1.0, weighting: Weighting::NormalizedInverseCount, roi_mode: RoiMode::Unit }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig(format!("loss epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

fn check_shapes(p: &ProbabilityField, t: &OneHotField) -> Result<()> {
    if p.dims() != t.dims() || p.num_classes() != t.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {:?}x{} vs target {:?}x{}",
            p.dims(),
            p.num_classes(),
            t.dims(),
            t.num_classes()
        )));
    }
    Ok(())
}

/// Soft Dice score of every class, summed over all voxels:
/// `S_c = (2 Σ t·p + ε) / (Σ (t + p) + ε)`.
pub fn soft_dice_per_class(p: &ProbabilityField, t: &OneHotField, cfg: &LossConfig) -> Result<Vec<f64>> {
    check_shapes(p, t)?;
    Ok((0..p.num_classes()).map(|c| dice_terms(p.channel(c), t.channel(c), cfg.epsilon).0).collect())
}

/// Returns `(S, intersection, union)` for one class.
fn dice_terms(p: &[f64], t: &[u8], eps: f64) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&pv, &tv) in p.iter().zip(t) {
        let tv = tv as f64;
        inter += tv * pv;
        union += tv + pv;
    }
    ((2.0 * inter + eps) / (union + eps), inter, union)
}

fn class_weights(counts: &[usize], weighting: Weighting) -> Vec<f64> {
    let present = counts.iter().filter(|&&n| n > 0).count().max(1);
    match weighting {
        Weighting::Literal => counts.iter().map(|&n| if n > 0 { 1.0 / n as f64 } else { 0.0 }).collect(),
        Weighting::Uniform => counts.iter().map(|&n| if n > 0 { 1.0 / present as f64 } else { 0.0 }).collect(),
        Weighting::NormalizedInverseCount => {
            let inv: Vec<f64> = counts.iter().map(|&n| if n > 0 { 1.0 / n as f64 } else { 0.0 }).collect();
            let total: f64 = inv.iter().sum();
            if total > 0.0 {
                inv.iter().map(|w| w / total).collect()
            } else {
                inv
            }
        }
    }
}

/// Weighted multi-class Dice loss `1 - Σ_c w_c S_c`; classes absent from
/// the target carry no weight.
pub fn multiclass_dice_loss(p: &ProbabilityField, t: &OneHotField, cfg: &LossConfig) -> Result<f64> {
    check_shapes(p, t)?;
    let w = class_weights(t.class_counts(), cfg.weighting);
    let mut loss = 1.0;
    for (c, wc) in w.iter().enumerate() {
        if *wc > 0.0 {
            loss -= wc * dice_terms(p.channel(c), t.channel(c), cfg.epsilon).0;
        }
    }
    Ok(loss)
}

/// Loss value and `dL/dp`.
pub fn multiclass_dice_loss_with_grad(
    p: &ProbabilityField,
    t: &OneHotField,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    check_shapes(p, t)?;
    let n = p.voxels();
    let w = class_weights(t.class_counts(), cfg.weighting);
    let eps = cfg.epsilon;
    let mut grad = vec![0.0; p.data().len()];
    let mut loss = 1.0;
    for (c, &wc) in w.iter().enumerate() {
        if wc == 0.0 {
            continue;
        }
        let (s, inter, union) = dice_terms(p.channel(c), t.channel(c), eps);
        loss -= wc * s;
        let den = union + eps;
        let num = 2.0 * inter + eps;
        let g = &mut grad[c * n..(c + 1) * n];
        for (gv, &tv) in g.iter_mut().zip(t.channel(c)) {
            // dS/dp = (2t·den - num) / den²
            *gv = -wc * (2.0 * tv as f64 * den - num) / (den * den);
        }
    }
    Ok((loss, grad))
}

fn require_net1(p1: &ProbabilityField) -> Result<()> {
    if p1.source() != SourceNet::Net1 {
        return Err(Error::InvalidArgument("foreground score is defined on Net1 output".into()));
    }
    Ok(())
}

fn foreground_terms(p0: &[f64], t0: &[u8], eps: f64) -> (f64, f64, f64) {
    let mut a = 0.0;
    let mut b = 0.0;
    for (&p, &t) in p0.iter().zip(t0) {
        let t = t as f64;
        a += (1.0 - t) * (1.0 - p);
        b += 2.0 - t - p;
    }
    ((2.0 * a + eps) / (b + eps), a, b)
}

/// Dice of the reversed background channel:
/// `S_ROI = (2 Σ (1-t₀)(1-p₀) + ε) / (Σ (2 - t₀ - p₀) + ε)`.
pub fn foreground_score(p1: &ProbabilityField, t: &OneHotField, cfg: &LossConfig) -> Result<f64> {
    require_net1(p1)?;
    check_shapes(p1, t)?;
    Ok(foreground_terms(p1.channel(0), t.channel(0), cfg.epsilon).0)
}

fn roi_divisor(t: &OneHotField, mode: RoiMode) -> f64 {
    match mode {
        RoiMode::Unit => 1.0,
        RoiMode::Literal => t.class_counts()[0].max(1) as f64,
    }
}

pub fn foreground_loss(p1: &ProbabilityField, t: &OneHotField, cfg: &LossConfig) -> Result<f64> {
    let s = foreground_score(p1, t, cfg)?;
    Ok(1.0 - s / roi_divisor(t, cfg.roi_mode))
}

pub fn foreground_loss_with_grad(p1: &ProbabilityField, t: &OneHotField, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    require_net1(p1)?;
    check_shapes(p1, t)?;
    let eps = cfg.epsilon;
    let div = roi_divisor(t, cfg.roi_mode);
    let (s, a, b) = foreground_terms(p1.channel(0), t.channel(0), eps);
    let num = 2.0 * a + eps;
    let den = b + eps;
    let n = p1.voxels();
    let mut grad = vec![0.0; p1.data().len()];
    for (gv, &tv) in grad[..n].iter_mut().zip(t.channel(0)) {
        // dS/dp₀ = (-2(1-t₀)·den + num) / den²
        let ds = (-2.0 * (1.0 - tv as f64) * den + num) / (den * den);
        *gv = -ds / div;
    }
    Ok((1.0 - s / div, grad))
}

/// Loss terms recorded for one training iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub roi1: Option<f64>,
    pub dice1: Option<f64>,
    pub dice2: Option<f64>,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.roi1.unwrap_or(0.0) + self.dice1.unwrap_or(0.0) + self.dice2.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct StepLoss {
    pub terms: LossTerms,
    /// `dL/dp¹`; absent when Net1 receives no gradient in this step.
    pub grad_p1: Option<Vec<f64>>,
    /// `dL/dp²`; absent when Net2 receives no gradient in this step.
    pub grad_p2: Option<Vec<f64>>,
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        self.terms.total()
    }
}

/// Which loss terms each training step combines.
pub fn step_terms(step: u8) -> Result<(bool, bool, bool)> {
    // (foreground Net1, Dice Net1, Dice Net2)
    match step {
        1 => Ok((true, false, false)),
        2 => Ok((true, true, false)),
        3 => Ok((false, true, true)),
        4 => Ok((false, false, true)),
        _ => Err(Error::InvalidArgument(format!("training step must be 1..=4, got {step}"))),
    }
}

/// Per-step objective: 1 → L¹_ROI, 2 → L¹_ROI + L¹, 3 → L¹ + L², 4 → L².
pub fn step_loss(
    step: u8,
    p1: Option<&ProbabilityField>,
    p2: Option<&ProbabilityField>,
    t_coarse: Option<&OneHotField>,
    t_fine: Option<&OneHotField>,
    cfg: &LossConfig,
) -> Result<StepLoss> {
    let (use_roi, use_d1, use_d2) = step_terms(step)?;
    let mut terms = LossTerms::default();
    let mut grad_p1: Option<Vec<f64>> = None;
    let mut grad_p2 = None;

    if use_roi || use_d1 {
        let p1 = p1.ok_or_else(|| Error::MissingPrerequisite { step, what: "Net1 probabilities".into() })?;
        let t = t_coarse.ok_or_else(|| Error::MissingPrerequisite { step, what: "Net1 target".into() })?;
        let mut g = vec![0.0; p1.data().len()];
        if use_roi {
            let (l, gr) = foreground_loss_with_grad(p1, t, cfg)?;
            terms.roi1 = Some(l);
            g.iter_mut().zip(&gr).for_each(|(a, b)| *a += b);
        }
        if use_d1 {
            let (l, gd) = multiclass_dice_loss_with_grad(p1, t, cfg)?;
            terms.dice1 = Some(l);
            g.iter_mut().zip(&gd).for_each(|(a, b)| *a += b);
        }
        grad_p1 = Some(g);
    }
    if use_d2 {
        let p2 = p2.ok_or_else(|| Error::MissingPrerequisite { step, what: "Net2 probabilities".into() })?;
        let t = t_fine.ok_or_else(|| Error::MissingPrerequisite { step, what: "Net2 target".into() })?;
        let (l, g) = multiclass_dice_loss_with_grad(p2, t, cfg)?;
        terms.dice2 = Some(l);
        grad_p2 = Some(g);
    }
    Ok(StepLoss { terms, grad_p1, grad_p2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::one_hot_from_slice;
    use proptest::prelude::*;

    fn field(k: usize, dims: [usize; 3], data: Vec<f64>, src: SourceNet) -> ProbabilityField {
        ProbabilityField::new(k, dims, data, src).unwrap()
    }

    fn onehot(labels: &[u8], dims: [usize; 3], k: usize) -> OneHotField {
        one_hot_from_slice(labels, dims, k).unwrap()
    }

    fn cfg(eps: f64) -> LossConfig {
        LossConfig { epsilon: eps, ..LossConfig::default() }
    }

    #[test]
    fn perfect_match_scores_one() {
        let labels = [0u8, 1, 2, 1, 0, 0, 2, 1];
        let t = onehot(&labels, [2, 2, 2], 3);
        let p = field(
            3,
            [2, 2, 2],
            t.channel(0).iter().chain(t.channel(1)).chain(t.channel(2)).map(|&v| v as f64).collect(),
            SourceNet::Net1,
        );
        for eps in [1e-3, 1.0, 10.0] {
            let s = soft_dice_per_class(&p, &t, &cfg(eps)).unwrap();
            assert!(s.iter().all(|&v| (v - 1.0).abs() < 1e-12));
            assert!((foreground_score(&p, &t, &cfg(eps)).unwrap() - 1.0).abs() < 1e-12);
            assert!(multiclass_dice_loss(&p, &t, &cfg(eps)).unwrap().abs() < 1e-12);
            assert!(foreground_loss(&p, &t, &cfg(eps)).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn absent_class_smooths_to_one() {
        // class 2 absent in both truth and prediction
        let t = onehot(&[0, 1, 1, 0], [4, 1, 1], 3);
        let p = field(3, [4, 1, 1], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0], SourceNet::Net1);
        let s = soft_dice_per_class(&p, &t, &cfg(1.0)).unwrap();
        assert_eq!(s[2], 1.0);
    }

    #[test]
    fn half_probability_two_voxels() {
        let t = onehot(&[1, 0], [2, 1, 1], 2);
        // class 1 probabilities [0.5, 0.5]
        let p = field(2, [2, 1, 1], vec![0.5, 0.5, 0.5, 0.5], SourceNet::Net1);
        let eps_free = LossConfig { epsilon: 1e-300, ..LossConfig::default() };
        let s = soft_dice_per_class(&p, &t, &eps_free).unwrap();
        assert!((s[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn normalized_weights_equal_counts() {
        // S_0 = S_1 = 0.5 with equal counts gives L = 0.5
        let t = onehot(&[1, 0], [2, 1, 1], 2);
        let p = field(2, [2, 1, 1], vec![0.5, 0.5, 0.5, 0.5], SourceNet::Net2);
        let c = LossConfig { epsilon: 1e-300, ..LossConfig::default() };
        let s = soft_dice_per_class(&p, &t, &c).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-12 && (s[1] - 0.5).abs() < 1e-12);
        assert!((multiclass_dice_loss(&p, &t, &c).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn literal_weighting_divides_by_counts() {
        let labels: Vec<u8> = (0..200).map(|i| (i % 2) as u8).collect();
        let t = onehot(&labels, [200, 1, 1], 2);
        let data: Vec<f64> = t.channel(0).iter().chain(t.channel(1)).map(|&v| v as f64).collect();
        let p = field(2, [200, 1, 1], data, SourceNet::Net1);
        let c = LossConfig { weighting: Weighting::Literal, ..LossConfig::default() };
        assert!((multiclass_dice_loss(&p, &t, &c).unwrap() - 0.98).abs() < 1e-12);
    }

    #[test]
    fn foreground_single_voxel() {
        let t = onehot(&[1], [1, 1, 1], 2);
        let p = field(2, [1, 1, 1], vec![0.5, 0.5], SourceNet::Net1);
        let c = LossConfig { epsilon: 1e-300, ..LossConfig::default() };
        let s = foreground_score(&p, &t, &c).unwrap();
        assert!((s - 2.0 / 3.0).abs() < 1e-12);
        assert!((foreground_loss(&p, &t, &c).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn foreground_all_background_is_one() {
        let t = onehot(&[0; 8], [2, 2, 2], 3);
        let mut data = vec![0.0; 24];
        data[..8].fill(1.0);
        let p = field(3, [2, 2, 2], data, SourceNet::Net1);
        assert_eq!(foreground_score(&p, &t, &cfg(1.0)).unwrap(), 1.0);
    }

    #[test]
    fn literal_roi_divides_by_background_count() {
        let t = onehot(&[0; 50], [50, 1, 1], 2);
        let mut data = vec![0.0; 100];
        data[..50].fill(1.0);
        let p = field(2, [50, 1, 1], data, SourceNet::Net1);
        let c = LossConfig { roi_mode: RoiMode::Literal, ..LossConfig::default() };
        assert!((foreground_loss(&p, &t, &c).unwrap() - 0.98).abs() < 1e-12);
    }

    #[test]
    fn foreground_requires_net1() {
        let t = onehot(&[0], [1, 1, 1], 2);
        let p = field(2, [1, 1, 1], vec![1.0, 0.0], SourceNet::Net2);
        assert!(foreground_score(&p, &t, &cfg(1.0)).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let t = onehot(&[0, 1], [2, 1, 1], 2);
        let p = field(2, [1, 2, 1], vec![1.0, 0.0, 0.0, 1.0], SourceNet::Net1);
        assert!(matches!(soft_dice_per_class(&p, &t, &cfg(1.0)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn rejects_non_distribution() {
        assert!(ProbabilityField::new(2, [1, 1, 1], vec![0.7, 0.7], SourceNet::Net1).is_err());
    }

    #[test]
    fn step_loss_composition() {
        let labels = [0u8, 1, 2, 2, 0, 1, 0, 0];
        let t = onehot(&labels, [2, 2, 2], 3);
        let logits: Vec<f64> = (0..24).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let p1 = ProbabilityField::from_logits_f64(3, [2, 2, 2], &logits, SourceNet::Net1);
        let p2 = ProbabilityField::from_logits_f64(
            3,
            [2, 2, 2],
            &logits.iter().map(|v| -v).collect::<Vec<_>>(),
            SourceNet::Net2,
        );
        let c = LossConfig::default();
        let roi = foreground_loss(&p1, &t, &c).unwrap();
        let d1 = multiclass_dice_loss(&p1, &t, &c).unwrap();
        let d2 = multiclass_dice_loss(&p2, &t, &c).unwrap();

        let s1 = step_loss(1, Some(&p1), None, Some(&t), None, &c).unwrap();
        assert_eq!(s1.total(), roi);
        assert!(s1.grad_p2.is_none());
        let s2 = step_loss(2, Some(&p1), None, Some(&t), None, &c).unwrap();
        assert!((s2.total() - (roi + d1)).abs() < 1e-15);
        let s3 = step_loss(3, Some(&p1), Some(&p2), Some(&t), Some(&t), &c).unwrap();
        assert!((s3.total() - (d1 + d2)).abs() < 1e-15);
        assert!(s3.terms.roi1.is_none());
        let s4 = step_loss(4, Some(&p1), Some(&p2), Some(&t), Some(&t), &c).unwrap();
        assert_eq!(s4.total(), d2);
        assert!(s4.grad_p1.is_none());
        assert!(matches!(
            step_loss(3, Some(&p1), None, Some(&t), Some(&t), &c),
            Err(Error::MissingPrerequisite { step: 3, .. })
        ));
        assert!(step_loss(5, Some(&p1), None, Some(&t), None, &c).is_err());
    }

    proptest! {
        #[test]
        fn dice_bounded_and_order_invariant(
            labels in proptest::collection::vec(0u8..3, 12),
            logits in proptest::collection::vec(-4.0f64..4.0, 36),
            eps in 1e-3f64..5.0,
            shift in 0usize..12,
        ) {
            let dims = [12, 1, 1];
            let t = onehot(&labels, dims, 3);
            let p = ProbabilityField::from_logits_f64(3, dims, &logits, SourceNet::Net1);
            let c = cfg(eps);
            let s = soft_dice_per_class(&p, &t, &c).unwrap();
            prop_assert!(s.iter().all(|&v| v > 0.0 && v <= 1.0 + 1e-12));

            // rotate voxel order identically in prediction and target
            let rot = |v: &[f64]| -> Vec<f64> { (0..12).map(|i| v[(i + shift) % 12]).collect() };
            let labels_r: Vec<u8> = (0..12).map(|i| labels[(i + shift) % 12]).collect();
            let logits_r: Vec<f64> = (0..3).flat_map(|k| rot(&logits[k * 12..(k + 1) * 12])).collect();
            let t_r = onehot(&labels_r, dims, 3);
            let p_r = ProbabilityField::from_logits_f64(3, dims, &logits_r, SourceNet::Net1);
            let a = multiclass_dice_loss(&p, &t, &c).unwrap();
            let b = multiclass_dice_loss(&p_r, &t_r, &c).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            let a = foreground_loss(&p, &t, &c).unwrap();
            let b = foreground_loss(&p_r, &t_r, &c).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
