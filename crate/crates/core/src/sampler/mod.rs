//! Class-balanced subvolume sampling and batch assembly for the four
//! training steps.

mod augment;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentConfig, ElasticConfig, Transform};

use crate::error::{Error, Result};
use crate::networks::INPLANE_DIVISOR;
use crate::volumes::{
    crop_or_pad, crop_raw, resample_intensity, resample_labels, rescale_intensity, IndexBox, IntensityVolume,
    Interpolation, LabelVolume, Voxels,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Candidate edge lengths, drawn independently per axis.
    pub subvolume_sizes: Vec<usize>,
    pub volumes_per_batch: usize,
    pub rng_seed: u64,
    pub augmentation: AugmentConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            subvolume_sizes: vec![16, 32, 48],
            volumes_per_batch: 2,
            rng_seed: 0,
            augmentation: AugmentConfig::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subvolume_sizes.is_empty() {
            return Err(Error::InvalidConfig("subvolume_sizes is empty".into()));
        }
        if let Some(s) = self.subvolume_sizes.iter().find(|&&s| s < 8 || s % 2 != 0) {
            return Err(Error::InvalidConfig(format!("subvolume size {s} must be even and at least 8")));
        }
        if self.volumes_per_batch == 0 {
            return Err(Error::InvalidConfig("volumes_per_batch must be positive".into()));
        }
        self.augmentation.validate()
    }
}

/// One training volume with its coarse-grid copy. Intensities are rescaled
/// to `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Case {
    pub intensity: IntensityVolume,
    pub labels: LabelVolume,
    pub coarse_intensity: IntensityVolume,
    pub coarse_labels: LabelVolume,
    /// Net1 label map on the native grid, used as the second Net2 channel in
    /// step 4.
    pub guide: Option<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    cases: Vec<Case>,
    num_classes: usize,
    coarse_spacing: [f64; 3],
}

impl Dataset {
    pub fn new(pairs: Vec<(IntensityVolume, LabelVolume)>, coarse_spacing: [f64; 3]) -> Result<Self> {
        let Some(num_classes) = pairs.first().map(|(_, l)| l.num_classes()) else {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        };
        let mut cases = Vec::with_capacity(pairs.len());
        for (iv, lv) in pairs {
            if iv.dims() != lv.dims() {
                return Err(Error::ShapeMismatch(format!("image {:?} vs labels {:?}", iv.dims(), lv.dims())));
            }
            if lv.num_classes() != num_classes {
                return Err(Error::InvalidArgument("all label volumes must share one class count".into()));
            }
            let intensity = rescale_intensity(&iv);
            let coarse_intensity = coarse_intensity(&intensity, coarse_spacing)?;
            let coarse_labels = pad_to_divisor(&resample_labels(&lv, coarse_spacing, Interpolation::Nearest)?)?;
            cases.push(Case { intensity, labels: lv, coarse_intensity, coarse_labels, guide: None });
        }
        Ok(Self { cases, num_classes, coarse_spacing })
    }

    pub fn cases(&self) -> &[Case] {
        &self.cases
    }

    pub fn cases_mut(&mut self) -> &mut [Case] {
        &mut self.cases
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn coarse_spacing(&self) -> [f64; 3] {
        self.coarse_spacing
    }
}

/// Box from the origin covering `dims` rounded up to the network divisor.
pub fn padded_box(dims: [usize; 3]) -> IndexBox {
    IndexBox::new([0; 3], dims.map(|d| (d.div_ceil(INPLANE_DIVISOR) * INPLANE_DIVISOR) as isize))
}

pub fn pad_to_divisor<V: Voxels>(v: &V) -> Result<V> {
    crop_or_pad(v, &padded_box(v.grid().dims()))
}

/// Linear resample of an already rescaled volume to the coarse grid, padded
/// with −1 to the network divisor.
pub fn coarse_intensity(iv: &IntensityVolume, spacing: [f64; 3]) -> Result<IntensityVolume> {
    pad_to_divisor(&resample_intensity(iv, spacing, Interpolation::Linear)?)
}

/// Draws a class uniformly among those present, then a voxel uniformly
/// among that class's voxels. Returns the class and linear voxel index.
pub fn sample_center<R: Rng>(labels: &LabelVolume, rng: &mut R) -> Result<(u8, usize)> {
    let counts = labels.class_counts();
    let present: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
    let &class = present.choose(rng).ok_or(Error::EmptyLabels)?;
    let k = rng.gen_range(0..counts[class]);
    let index = labels
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l as usize == class)
        .nth(k)
        .map(|(i, _)| i)
        .expect("count matches");
    Ok((class as u8, index))
}

/// Patch of `size` voxels whose voxel `size / 2` sits on `center`; outside
/// voxels are padded.
pub fn extract_subvolume(
    iv: &IntensityVolume,
    lv: &LabelVolume,
    center: [usize; 3],
    size: [usize; 3],
) -> Result<(IntensityVolume, LabelVolume)> {
    let bbox = IndexBox::centered(center, size);
    Ok((crop_or_pad(iv, &bbox)?, crop_or_pad(lv, &bbox)?))
}

/// One network input with its target. In step 4 `dims` is the K-slice input
/// depth while `labels` holds only the central slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub dims: [usize; 3],
    pub intensity: Vec<f32>,
    pub labels: Vec<u8>,
    /// Second Net2 channel as a label map over `dims` (step 4 only).
    pub guide: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub step: u8,
    pub samples: Vec<Sample>,
}

fn coarse_sample<R: Rng>(case: &Case, aug: &AugmentConfig, rng: &mut R) -> Sample {
    let dims = case.coarse_intensity.dims();
    let (intensity, labels) = augment(case.coarse_intensity.data(), case.coarse_labels.labels(), dims, aug, rng);
    Sample { dims, intensity, labels, guide: None }
}

fn patch_sample<R: Rng>(case: &Case, size: [usize; 3], aug: &AugmentConfig, rng: &mut R) -> Result<Sample> {
    let (_, index) = sample_center(&case.labels, rng)?;
    let center = case.labels.grid().coords(index);
    let (intensity, labels) = if aug.enabled {
        // warp straight from the full volume so rotations pull in real context
        let t = Transform::random(aug, rng);
        let out_center = size.map(|s| (s / 2) as f64);
        t.warp(
            case.intensity.data(),
            case.labels.labels(),
            case.labels.dims(),
            center.map(|c| c as f64),
            size,
            out_center,
        )
    } else {
        let (i, l) = extract_subvolume(&case.intensity, &case.labels, center, size)?;
        (i.into_data(), l.into_labels())
    };
    Ok(Sample { dims: size, intensity, labels, guide: None })
}

/// K full axial slices around a class-balanced slice, edge-replicated in z
/// and padded in-plane to the network divisor; the target is the central
/// slice.
fn slice_sample<R: Rng>(case: &Case, k: usize, rng: &mut R) -> Result<Sample> {
    let guide = case.guide.as_ref().ok_or_else(|| Error::MissingPrerequisite {
        step: 4,
        what: "Net1 label maps for the training volumes".into(),
    })?;
    let (_, index) = sample_center(&case.labels, rng)?;
    let [_, _, z] = case.labels.grid().coords(index);
    let (intensity, guide, labels, dims) =
        slice_stack(case.intensity.data(), guide, case.labels.labels(), case.labels.dims(), z, k)?;
    Ok(Sample { dims, intensity, labels, guide: Some(guide) })
}

/// Indices of the K-slice neighbourhood of `z`, clamped at the volume ends.
pub fn neighbourhood(z: usize, k: usize, nz: usize) -> Vec<usize> {
    let half = (k / 2) as isize;
    (-half..=half).map(|d| (z as isize + d).clamp(0, nz as isize - 1) as usize).collect()
}

#[allow(clippy::type_complexity)]
fn slice_stack(
    intensity: &[f32],
    guide: &[u8],
    labels: &[u8],
    dims: [usize; 3],
    z: usize,
    k: usize,
) -> Result<(Vec<f32>, Vec<u8>, Vec<u8>, [usize; 3])> {
    let [nx, ny, nz] = dims;
    let plane = nx * ny;
    let [px, py, _] = padded_box([nx, ny, 1]).extent().map(|e| e as usize);
    let pad = IndexBox::new([0; 3], [px as isize, py as isize, 1]);
    let mut si = Vec::with_capacity(px * py * k);
    let mut sg = Vec::with_capacity(px * py * k);
    for zz in neighbourhood(z, k, nz) {
        let r = zz * plane..(zz + 1) * plane;
        si.extend(crop_raw(&intensity[r.clone()], [nx, ny, 1], &pad, -1.0)?);
        sg.extend(crop_raw(&guide[r], [nx, ny, 1], &pad, 0)?);
    }
    let target = crop_raw(&labels[z * plane..(z + 1) * plane], [nx, ny, 1], &pad, 0)?;
    Ok((si, sg, target, [px, py, k]))
}

/// Builds one batch for `step`: a single augmented coarse volume (1),
/// class-balanced subvolumes sharing one random size (2, 3), or K-slice
/// stacks with central-slice targets (4).
pub fn make_batch<R: Rng>(
    dataset: &Dataset,
    step: u8,
    cfg: &SamplerConfig,
    k_slices: usize,
    rng: &mut R,
) -> Result<Batch> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let pick = |rng: &mut R| &dataset.cases[rng.gen_range(0..dataset.len())];
    let samples = match step {
        1 => vec![coarse_sample(pick(rng), &cfg.augmentation, rng)],
        2 | 3 => {
            let size: [usize; 3] = std::array::from_fn(|_| *cfg.subvolume_sizes.choose(rng).expect("validated"));
            (0..cfg.volumes_per_batch)
                .map(|_| {
                    let case = pick(rng);
                    patch_sample(case, size, &cfg.augmentation, rng)
                })
                .collect::<Result<_>>()?
        }
        4 => (0..cfg.volumes_per_batch)
            .map(|_| {
                let case = pick(rng);
                slice_sample(case, k_slices, rng)
            })
            .collect::<Result<_>>()?,
        _ => return Err(Error::InvalidArgument(format!("training step must be 1..=4, got {step}"))),
    };
    Ok(Batch { step, samples })
}
