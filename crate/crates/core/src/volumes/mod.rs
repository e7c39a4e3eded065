//! Volume containers and the preprocessing utilities shared by training and
//! inference.
//!
//! Voxel data is stored with `x` varying fastest, i.e. the linear index of
//! `(x, y, z)` is `x + nx * (y + ny * z)`. This matches the on-disk NIfTI
//! ordering and keeps every axial slice contiguous.

mod io;
mod resample;

use crate::error::{Error, Result};

pub use io::{
    load_volume, save_intensity, save_labels, save_labels_like, save_volume, LoadedVolume, NIFTI_INTENT_LABEL,
};
pub use resample::{interpolate_channel, output_len, resample_intensity, resample_labels, Interpolation};

/// Geometry of a voxel grid: dimensions plus the physical placement.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    /// Column `a` is the unit direction of voxel axis `a` in physical space.
    direction: [[f64; 3]; 3],
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::with_geometry(dims, spacing, [0.0; 3], IDENTITY)
    }

    pub fn with_geometry(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        direction: [[f64; 3]; 3],
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("grid dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::InvalidArgument(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        Ok(Self { dims, spacing, origin, direction })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn direction(&self) -> [[f64; 3]; 3] {
        self.direction
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Physical position (mm) of a continuous voxel coordinate.
    pub fn to_physical(&self, voxel: [f64; 3]) -> [f64; 3] {
        let mut p = self.origin;
        for (row, out) in p.iter_mut().enumerate() {
            for (axis, v) in voxel.iter().enumerate() {
                *out += self.direction[row][axis] * self.spacing[axis] * v;
            }
        }
        p
    }

    /// Same placement and orientation, new dims and spacing; `first_voxel` is
    /// the continuous index in `self` of the new grid's voxel 0.
    pub(crate) fn derive(&self, dims: [usize; 3], spacing: [f64; 3], first_voxel: [f64; 3]) -> Result<Self> {
        let origin = self.to_physical(first_voxel);
        Self::with_geometry(dims, spacing, origin, self.direction)
    }
}

/// A real-valued image on a voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityVolume {
    grid: Grid,
    data: Vec<f32>,
}

impl IntensityVolume {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!("{} values for a {:?} grid", data.len(), grid.dims())));
        }
        Ok(Self { grid, data })
    }

    pub fn filled(grid: Grid, value: f32) -> Self {
        let data = vec![value; grid.len()];
        Self { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Integer class labels in `0..num_classes`, class 0 being background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: Grid,
    num_classes: usize,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(grid: Grid, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if !(1..=256).contains(&num_classes) {
            return Err(Error::InvalidArgument(format!("num_classes {num_classes} outside 1..=256")));
        }
        if labels.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!("{} labels for a {:?} grid", labels.len(), grid.dims())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange { label: bad as u32, num_classes });
        }
        Ok(Self { grid, num_classes, labels })
    }

    pub fn background(grid: Grid, num_classes: usize) -> Result<Self> {
        let labels = vec![0; grid.len()];
        Self::new(grid, num_classes, labels)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    /// Total class count including background (C + 1).
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.grid.index(x, y, z)]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Sorted set of labels that actually occur.
    pub fn label_set(&self) -> Vec<u8> {
        self.class_counts().iter().enumerate().filter(|(_, &n)| n > 0).map(|(c, _)| c as u8).collect()
    }

    pub(crate) fn with_grid_and_labels(&self, grid: Grid, labels: Vec<u8>) -> Self {
        debug_assert_eq!(grid.len(), labels.len());
        Self { grid, num_classes: self.num_classes, labels }
    }
}

/// Class-major one-hot expansion of a label volume.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotField {
    num_classes: usize,
    dims: [usize; 3],
    data: Vec<u8>,
    class_counts: Vec<usize>,
}

impl OneHotField {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// The `{0,1}` indicator for class `c` over all voxels.
    pub fn channel(&self, c: usize) -> &[u8] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn argmax(&self) -> Vec<u8> {
        let n = self.voxels();
        let mut out = vec![0u8; n];
        for c in 1..self.num_classes {
            for (o, &t) in out.iter_mut().zip(self.channel(c)) {
                if t == 1 {
                    *o = c as u8;
                }
            }
        }
        out
    }
}

pub fn one_hot(labels: &LabelVolume) -> OneHotField {
    one_hot_from_slice(labels.labels(), labels.dims(), labels.num_classes())
        .expect("LabelVolume labels are always in range")
}

/// One-hot encoding of a raw label buffer laid out on `dims`.
pub fn one_hot_from_slice(labels: &[u8], dims: [usize; 3], num_classes: usize) -> Result<OneHotField> {
    let n: usize = dims.iter().product();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for dims {dims:?}", labels.len())));
    }
    let mut data = vec![0u8; num_classes * n];
    let mut class_counts = vec![0usize; num_classes];
    for (i, &l) in labels.iter().enumerate() {
        let c = l as usize;
        if c >= num_classes {
            return Err(Error::LabelOutOfRange { label: l as u32, num_classes });
        }
        data[c * n + i] = 1;
        class_counts[c] += 1;
    }
    Ok(OneHotField { num_classes, dims, data, class_counts })
}

/// Affine rescale of intensities onto `[-1, 1]`. A constant volume maps to
/// all zeros.
pub fn rescale_intensity(v: &IntensityVolume) -> IntensityVolume {
    let (lo, hi) = v.min_max();
    let data = if hi > lo {
        let (lo, hi) = (lo as f64, hi as f64);
        let range = hi - lo;
        v.data().iter().map(|&x| ((2.0 * (x as f64 - lo) / range - 1.0) as f32).clamp(-1.0, 1.0)).collect()
    } else {
        vec![0.0; v.data().len()]
    };
    IntensityVolume { grid: v.grid.clone(), data }
}

/// Half-open voxel index box. Bounds may lie outside the volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct IndexBox {
    pub lo: [isize; 3],
    pub hi: [isize; 3],
}

impl IndexBox {
    pub fn new(lo: [isize; 3], hi: [isize; 3]) -> Self {
        Self { lo, hi }
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Self { lo: [0; 3], hi: dims.map(|d| d as isize) }
    }

    /// Box of `extent` voxels per axis whose voxel `extent / 2` sits on `center`.
    pub fn centered(center: [usize; 3], extent: [usize; 3]) -> Self {
        let mut lo = [0isize; 3];
        let mut hi = [0isize; 3];
        for a in 0..3 {
            lo[a] = center[a] as isize - (extent[a] / 2) as isize;
            hi[a] = lo[a] + extent[a] as isize;
        }
        Self { lo, hi }
    }

    pub fn extent(&self) -> [isize; 3] {
        [0, 1, 2].map(|a| self.hi[a] - self.lo[a])
    }

    fn checked_extent(&self) -> Result<[usize; 3]> {
        let e = self.extent();
        if e.iter().any(|&x| x <= 0) {
            return Err(Error::InvalidArgument(format!("box extent must be positive, got {e:?}")));
        }
        Ok(e.map(|x| x as usize))
    }
}

/// Element-level behaviour shared by the volume kinds for cropping.
pub trait Voxels: Sized {
    type Elem: Copy;
    const PAD: Self::Elem;
    fn grid(&self) -> &Grid;
    fn values(&self) -> &[Self::Elem];
    fn rebuild(&self, grid: Grid, values: Vec<Self::Elem>) -> Self;
}

impl Voxels for IntensityVolume {
    type Elem = f32;
    const PAD: f32 = -1.0;
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn values(&self) -> &[f32] {
        &self.data
    }
    fn rebuild(&self, grid: Grid, values: Vec<f32>) -> Self {
        IntensityVolume { grid, data: values }
    }
}

impl Voxels for LabelVolume {
    type Elem = u8;
    const PAD: u8 = 0;
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn values(&self) -> &[u8] {
        &self.labels
    }
    fn rebuild(&self, grid: Grid, values: Vec<u8>) -> Self {
        self.with_grid_and_labels(grid, values)
    }
}

/// Copies `bbox` out of `v`; voxels outside the volume take the kind's pad
/// value (−1 for intensities, background for labels).
pub fn crop_or_pad<V: Voxels>(v: &V, bbox: &IndexBox) -> Result<V> {
    let extent = bbox.checked_extent()?;
    let out = crop_raw(v.values(), v.grid().dims(), bbox, V::PAD)?;
    let grid = v.grid().derive(extent, v.grid().spacing(), bbox.lo.map(|x| x as f64))?;
    Ok(v.rebuild(grid, out))
}

/// Buffer-level crop with padding; shared with the per-channel tensors.
pub fn crop_raw<T: Copy>(src: &[T], dims: [usize; 3], bbox: &IndexBox, pad: T) -> Result<Vec<T>> {
    let [ex, ey, ez] = bbox.checked_extent()?;
    let mut out = vec![pad; ex * ey * ez];
    let [nx, ny, nz] = dims.map(|d| d as isize);
    let x0 = bbox.lo[0].max(0);
    let x1 = bbox.hi[0].min(nx);
    if x0 >= x1 {
        return Ok(out);
    }
    let run = (x1 - x0) as usize;
    let ox = (x0 - bbox.lo[0]) as usize;
    for oz in 0..ez {
        let z = bbox.lo[2] + oz as isize;
        if z < 0 || z >= nz {
            continue;
        }
        for oy in 0..ey {
            let y = bbox.lo[1] + oy as isize;
            if y < 0 || y >= ny {
                continue;
            }
            let s = (x0 + nx * (y + ny * z)) as usize;
            let d = ox + ex * (oy + ey * oz);
            out[d..d + run].copy_from_slice(&src[s..s + run]);
        }
    }
    Ok(out)
}

/// Writes `patch` (laid out on `bbox`) back into `dst`, skipping voxels that
/// fall outside `dims`.
pub fn embed_raw<T: Copy>(dst: &mut [T], dims: [usize; 3], bbox: &IndexBox, patch: &[T]) -> Result<()> {
    let [ex, ey, ez] = bbox.checked_extent()?;
    if patch.len() != ex * ey * ez {
        return Err(Error::ShapeMismatch(format!("patch of {} values for box {bbox:?}", patch.len())));
    }
    let [nx, ny, nz] = dims.map(|d| d as isize);
    for oz in 0..ez {
        let z = bbox.lo[2] + oz as isize;
        if z < 0 || z >= nz {
            continue;
        }
        for oy in 0..ey {
            let y = bbox.lo[1] + oy as isize;
            if y < 0 || y >= ny {
                continue;
            }
            for ox in 0..ex {
                let x = bbox.lo[0] + ox as isize;
                if x < 0 || x >= nx {
                    continue;
                }
                dst[(x + nx * (y + ny * z)) as usize] = patch[ox + ex * (oy + ey * oz)];
            }
        }
    }
    Ok(())
}
