//! Full-resolution prediction: coarse Net1 pass, probability upsampling,
//! dynamic tile, then one Net2 pass per axial slice of the ROI.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ProbabilityField, SourceNet};
use crate::networks::{compose_from_labels, dynamic_tile, Net1, Net2, RoiBox};
use crate::nn::Tensor;
use crate::sampler::{coarse_intensity, neighbourhood, padded_box};
use crate::volumes::{
    crop_raw, interpolate_channel, output_len, rescale_intensity, IndexBox, IntensityVolume, Interpolation, LabelVolume,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Spacing in mm of the grid Net1 sees.
    pub coarse_spacing: [f64; 3],
    pub roi_margin_vox: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { coarse_spacing: [3.0; 3], roi_margin_vox: 8 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_spacing.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::InvalidConfig(format!("coarse_spacing {:?} must be positive", self.coarse_spacing)));
        }
        Ok(())
    }
}

/// Net1 probabilities on the native grid of an intensity volume already
/// rescaled to `[-1, 1]`.
pub fn coarse_probabilities(
    normalized: &IntensityVolume,
    net1: &Net1,
    coarse_spacing: [f64; 3],
) -> Result<ProbabilityField> {
    let native = normalized.dims();
    let spacing = normalized.spacing();
    let coarse_dims: [usize; 3] = std::array::from_fn(|a| output_len(native[a], spacing[a], coarse_spacing[a]));
    let padded = coarse_intensity(normalized, coarse_spacing)?;
    let p = net1.predict_proba(Tensor::from_vec(1, padded.dims(), padded.into_data()))?;
    let k = p.num_classes();
    let inner = IndexBox::new([0; 3], coarse_dims.map(|d| d as isize));
    let n: usize = native.iter().product();
    let mut data = vec![0f64; k * n];
    for c in 0..k {
        let channel: Vec<f32> = p.channel(c).iter().map(|&v| v as f32).collect();
        let cropped = crop_raw(&channel, p.dims(), &inner, 0.0)?;
        let up = interpolate_channel(&cropped, coarse_dims, native, Interpolation::Linear);
        for (d, u) in data[c * n..(c + 1) * n].iter_mut().zip(up) {
            *d = (u as f64).max(0.0);
        }
    }
    for i in 0..n {
        let s: f64 = (0..k).map(|c| data[c * n + i]).sum();
        for c in 0..k {
            data[c * n + i] = if s > 0.0 { data[c * n + i] / s } else { 1.0 / k as f64 };
        }
    }
    ProbabilityField::new(k, native, data, SourceNet::Net1)
}

/// Rescales `iv` and returns Net1's per-class probabilities on its grid.
pub fn predict_coarse(iv: &IntensityVolume, net1: &Net1, coarse_spacing: [f64; 3]) -> Result<ProbabilityField> {
    coarse_probabilities(&rescale_intensity(iv), net1, coarse_spacing)
}

/// Labels every axial slice inside `roi` from its K-slice neighbourhood;
/// voxels outside the ROI stay background. `normalized` must already be
/// rescaled.
pub fn predict_fine(
    normalized: &IntensityVolume,
    p1: &ProbabilityField,
    net2: &Net2,
    roi: &RoiBox,
) -> Result<LabelVolume> {
    let dims = normalized.dims();
    if p1.dims() != dims {
        return Err(Error::ShapeMismatch(format!("probabilities {:?} vs volume {dims:?}", p1.dims())));
    }
    let [lo, hi] = [roi.bbox.lo, roi.bbox.hi];
    if (0..3).any(|a| lo[a] < 0 || hi[a] > dims[a] as isize || hi[a] <= lo[a]) {
        return Err(Error::InvalidArgument(format!("ROI {:?} does not lie inside {dims:?}", roi.bbox)));
    }
    let k = net2.config().k_slices;
    let num_classes = p1.num_classes();
    let guide = p1.argmax();
    let [nx, ny, nz] = dims;
    let plane = nx * ny;
    let (ex, ey) = ((hi[0] - lo[0]) as usize, (hi[1] - lo[1]) as usize);
    let [px, py, _] = padded_box([ex, ey, 1]).extent();
    let tile = IndexBox::new([lo[0], lo[1], 0], [lo[0] + px, lo[1] + py, 1]);
    let (px, py) = (px as usize, py as usize);
    let mut labels = vec![0u8; nx * ny * nz];
    for z in lo[2] as usize..hi[2] as usize {
        let mut si = Vec::with_capacity(px * py * k);
        let mut sg = Vec::with_capacity(px * py * k);
        for zz in neighbourhood(z, k, nz) {
            let r = zz * plane..(zz + 1) * plane;
            si.extend(crop_raw(&normalized.data()[r.clone()], [nx, ny, 1], &tile, -1.0)?);
            sg.extend(crop_raw(&guide[r], [nx, ny, 1], &tile, 0)?);
        }
        let x = compose_from_labels(&si, &sg, [px, py, k], num_classes)?;
        let out = net2.predict_proba(x)?.argmax();
        for y in 0..ey {
            let src = &out[y * px..y * px + ex];
            let d = (lo[0] as usize) + nx * ((lo[1] as usize + y) + ny * z);
            labels[d..d + ex].copy_from_slice(src);
        }
    }
    LabelVolume::new(normalized.grid().clone(), num_classes, labels)
}

/// Coarse pass, dynamic tile and fine pass. The result shares the input's
/// grid.
pub fn predict(iv: &IntensityVolume, net1: &Net1, net2: &Net2, cfg: &InferenceConfig) -> Result<LabelVolume> {
    Ok(predict_detailed(iv, net1, net2, cfg)?.labels)
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub coarse: ProbabilityField,
    pub roi: RoiBox,
    pub labels: LabelVolume,
}

pub fn predict_detailed(iv: &IntensityVolume, net1: &Net1, net2: &Net2, cfg: &InferenceConfig) -> Result<Prediction> {
    if net1.config().num_classes != net2.config().num_classes {
        return Err(Error::InvalidArgument("Net1 and Net2 disagree on the class count".into()));
    }
    let normalized = rescale_intensity(iv);
    let coarse = coarse_probabilities(&normalized, net1, cfg.coarse_spacing)?;
    let roi = dynamic_tile(&coarse, cfg.roi_margin_vox, iv.dims())?;
    let labels = predict_fine(&normalized, &coarse, net2, &roi)?;
    Ok(Prediction { coarse, roi, labels })
}
