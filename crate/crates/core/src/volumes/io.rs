//! NIfTI-1 reading and writing (`.nii` / `.nii.gz`).
//!
//! Intensities are written as FLOAT32 and label maps as UINT8 with
//! `intent_code = NIFTI_INTENT_LABEL`; the declared class count is stored in
//! `intent_p1`.

use std::path::Path;

use ndarray::{Array3, ArrayBase, Data, Ix3, Order};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::{Grid, IntensityVolume, LabelVolume};
use crate::error::{Error, Result};

pub const NIFTI_INTENT_LABEL: i16 = 1002;
const XFORM_SCANNER: i16 = 1;
const UNITS_MM: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum LoadedVolume {
    Intensity(IntensityVolume),
    Labels(LabelVolume),
}

impl LoadedVolume {
    pub fn grid(&self) -> &Grid {
        match self {
            LoadedVolume::Intensity(v) => v.grid(),
            LoadedVolume::Labels(v) => v.grid(),
        }
    }

    pub fn into_intensity(self) -> IntensityVolume {
        match self {
            LoadedVolume::Intensity(v) => v,
            LoadedVolume::Labels(l) => {
                let data = l.labels().iter().map(|&x| x as f32).collect();
                IntensityVolume::new(l.grid().clone(), data).expect("same grid")
            }
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            LoadedVolume::Labels(l) => Ok(l),
            LoadedVolume::Intensity(v) => {
                let values: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
                labels_from_values(v.grid().clone(), &values, None)
            }
        }
    }
}

/// Reads a volume. Files flagged as label maps come back as
/// [`LoadedVolume::Labels`]; everything else is an intensity image.
pub fn load_volume(path: impl AsRef<Path>) -> Result<LoadedVolume> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let unreadable = |e: nifti::NiftiError| Error::Unreadable { path: path.to_path_buf(), reason: e.to_string() };
    let obj = ReaderOptions::new().read_file(path).map_err(unreadable)?;
    let header = obj.header().clone();
    let grid =
        grid_from_header(&header).map_err(|e| Error::Unreadable { path: path.to_path_buf(), reason: e.to_string() })?;
    let array = obj.into_volume().into_ndarray::<f64>().map_err(unreadable)?;
    let shape = array.shape().to_vec();
    let [nx, ny, nz] = grid.dims();
    // trailing singleton axes may be dropped or kept; column-major reshape
    // preserves the (x, y, z) indexing either way
    let array = array.to_shape(((nx, ny, nz), Order::ColumnMajor)).map_err(|_| Error::Unreadable {
        path: path.to_path_buf(),
        reason: format!("expected a 3D volume, got {shape:?}"),
    })?;
    let values = to_x_fastest(&array);

    if header.intent_code == NIFTI_INTENT_LABEL {
        let declared = (header.intent_p1 > 0.0).then_some(header.intent_p1.round() as usize);
        Ok(LoadedVolume::Labels(labels_from_values(grid, &values, declared)?))
    } else {
        let data = values.iter().map(|&x| x as f32).collect();
        Ok(LoadedVolume::Intensity(IntensityVolume::new(grid, data)?))
    }
}

fn labels_from_values(grid: Grid, values: &[f64], declared: Option<usize>) -> Result<LabelVolume> {
    let mut labels = Vec::with_capacity(values.len());
    let mut max_label = 0u32;
    for &v in values {
        if v.fract() != 0.0 || !v.is_finite() {
            return Err(Error::NonIntegerLabel(v));
        }
        if !(0.0..=255.0).contains(&v) {
            return Err(Error::LabelOutOfRange { label: v.max(0.0) as u32, num_classes: declared.unwrap_or(256) });
        }
        max_label = max_label.max(v as u32);
        labels.push(v as u8);
    }
    let num_classes = declared.unwrap_or(max_label as usize + 1);
    LabelVolume::new(grid, num_classes, labels)
}

fn to_x_fastest<S: Data<Elem = f64>>(array: &ArrayBase<S, Ix3>) -> Vec<f64> {
    let (nx, ny, nz) = array.dim();
    let mut out = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                out.push(array[[x, y, z]]);
            }
        }
    }
    out
}

fn to_xyz_array<T: Copy + Default>(grid: &Grid, values: &[T]) -> Array3<T> {
    let [nx, ny, nz] = grid.dims();
    Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| values[x + nx * (y + ny * z)])
}

fn grid_from_header(h: &NiftiHeader) -> Result<Grid> {
    let dim = h.dim().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    if dim.is_empty() {
        return Err(Error::InvalidArgument("header declares no dimensions".into()));
    }
    if dim.iter().skip(3).any(|&d| d > 1) {
        return Err(Error::InvalidArgument(format!("expected a 3D volume, got dims {dim:?}")));
    }
    let mut dims = [1usize; 3];
    for (d, &n) in dims.iter_mut().zip(dim.iter()) {
        *d = n as usize;
    }
    if h.sform_code > 0 {
        let rows = [h.srow_x, h.srow_y, h.srow_z];
        let mut spacing = [0f64; 3];
        let mut direction = [[0f64; 3]; 3];
        for a in 0..3 {
            let col = [rows[0][a] as f64, rows[1][a] as f64, rows[2][a] as f64];
            let norm = (col[0] * col[0] + col[1] * col[1] + col[2] * col[2]).sqrt();
            spacing[a] = norm;
            for r in 0..3 {
                direction[r][a] = if norm > 0.0 { col[r] / norm } else { 0.0 };
            }
        }
        let origin = [rows[0][3] as f64, rows[1][3] as f64, rows[2][3] as f64];
        return Grid::with_geometry(dims, spacing, origin, direction);
    }
    let spacing = [h.pixdim[1] as f64, h.pixdim[2] as f64, h.pixdim[3] as f64].map(|s| s.abs());
    if h.qform_code > 0 {
        let (b, c, d) = (h.quatern_b as f64, h.quatern_c as f64, h.quatern_d as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let mut r = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ];
        for row in r.iter_mut() {
            row[2] *= qfac;
        }
        let origin = [h.quatern_x as f64, h.quatern_y as f64, h.quatern_z as f64];
        return Grid::with_geometry(dims, spacing, origin, r);
    }
    Grid::new(dims, spacing)
}

fn header_for(grid: &Grid) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    let spacing = grid.spacing();
    let dir = grid.direction();
    let origin = grid.origin();
    let mut rows = [[0f32; 4]; 3];
    for (r, row) in rows.iter_mut().enumerate() {
        for a in 0..3 {
            row[a] = (dir[r][a] * spacing[a]) as f32;
        }
        row[3] = origin[r] as f32;
    }
    h.srow_x = rows[0];
    h.srow_y = rows[1];
    h.srow_z = rows[2];
    h.sform_code = XFORM_SCANNER;

    // qform: proper rotation plus qfac for a possible reflection of the z axis
    let det = dir[0][0] * (dir[1][1] * dir[2][2] - dir[1][2] * dir[2][1])
        - dir[0][1] * (dir[1][0] * dir[2][2] - dir[1][2] * dir[2][0])
        + dir[0][2] * (dir[1][0] * dir[2][1] - dir[1][1] * dir[2][0]);
    let qfac = if det < 0.0 { -1.0 } else { 1.0 };
    let mut r = dir;
    for row in r.iter_mut() {
        row[2] *= qfac;
    }
    let (b, c, d) = rotation_to_quaternion(&r);
    h.quatern_b = b as f32;
    h.quatern_c = c as f32;
    h.quatern_d = d as f32;
    h.quatern_x = origin[0] as f32;
    h.quatern_y = origin[1] as f32;
    h.quatern_z = origin[2] as f32;
    h.qform_code = XFORM_SCANNER;
    h.pixdim = [qfac as f32, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    h.xyzt_units = UNITS_MM;
    h.scl_slope = 1.0;
    h
}

fn rotation_to_quaternion(r: &[[f64; 3]; 3]) -> (f64, f64, f64) {
    let trace = r[0][0] + r[1][1] + r[2][2];
    let (a, b, c, d) = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        (0.25 * s, (r[2][1] - r[1][2]) / s, (r[0][2] - r[2][0]) / s, (r[1][0] - r[0][1]) / s)
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        ((r[2][1] - r[1][2]) / s, 0.25 * s, (r[0][1] + r[1][0]) / s, (r[0][2] + r[2][0]) / s)
    } else if r[1][1] > r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        ((r[0][2] - r[2][0]) / s, (r[0][1] + r[1][0]) / s, 0.25 * s, (r[1][2] + r[2][1]) / s)
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        ((r[1][0] - r[0][1]) / s, (r[0][2] + r[2][0]) / s, (r[1][2] + r[2][1]) / s, 0.25 * s)
    };
    // NIfTI stores only b, c, d with a >= 0
    if a < 0.0 {
        (-b, -c, -d)
    } else {
        (b, c, d)
    }
}

fn write<T: nifti::DataElement + bytemuck::Pod>(path: &Path, header: &NiftiHeader, array: &Array3<T>) -> Result<()> {
    WriterOptions::new(path)
        .reference_header(header)
        .write_nifti(array)
        .map_err(|e| Error::Unwritable { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn save_intensity(path: impl AsRef<Path>, v: &IntensityVolume) -> Result<()> {
    let header = header_for(v.grid());
    write(path.as_ref(), &header, &to_xyz_array(v.grid(), v.data()))
}

pub fn save_labels(path: impl AsRef<Path>, v: &LabelVolume) -> Result<()> {
    let header = label_header(header_for(v.grid()), v.num_classes());
    write(path.as_ref(), &header, &to_xyz_array(v.grid(), v.labels()))
}

/// Writes `v` with the geometry fields of `reference` copied verbatim, so
/// the output lines up bit-exactly with the file it was predicted from.
pub fn save_labels_like(path: impl AsRef<Path>, v: &LabelVolume, reference: impl AsRef<Path>) -> Result<()> {
    let reference = reference.as_ref();
    let src = NiftiHeader::from_file(reference)
        .map_err(|e| Error::Unreadable { path: reference.to_path_buf(), reason: e.to_string() })?;
    let ref_grid = grid_from_header(&src)?;
    if ref_grid.dims() != v.dims() {
        return Err(Error::ShapeMismatch(format!("labels {:?} vs reference {:?}", v.dims(), ref_grid.dims())));
    }
    let h = NiftiHeader {
        pixdim: src.pixdim,
        qform_code: src.qform_code,
        sform_code: src.sform_code,
        quatern_b: src.quatern_b,
        quatern_c: src.quatern_c,
        quatern_d: src.quatern_d,
        quatern_x: src.quatern_x,
        quatern_y: src.quatern_y,
        quatern_z: src.quatern_z,
        srow_x: src.srow_x,
        srow_y: src.srow_y,
        srow_z: src.srow_z,
        xyzt_units: src.xyzt_units,
        scl_slope: 1.0,
        ..NiftiHeader::default()
    };
    let header = label_header(h, v.num_classes());
    write(path.as_ref(), &header, &to_xyz_array(v.grid(), v.labels()))
}

fn label_header(mut h: NiftiHeader, num_classes: usize) -> NiftiHeader {
    h.intent_code = NIFTI_INTENT_LABEL;
    h.intent_p1 = num_classes as f32;
    h
}

pub fn save_volume(path: impl AsRef<Path>, v: &LoadedVolume) -> Result<()> {
    match v {
        LoadedVolume::Intensity(v) => save_intensity(path, v),
        LoadedVolume::Labels(v) => save_labels(path, v),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phantomish() -> (IntensityVolume, LabelVolume) {
        let grid = Grid::with_geometry(
            [12, 10, 8],
            [1.5, 1.5, 3.0],
            [-10.0, 4.5, 22.0],
            [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
        )
        .unwrap();
        let data: Vec<f32> = (0..grid.len()).map(|i| (i as f32 * 0.37).sin()).collect();
        let labels: Vec<u8> = (0..grid.len()).map(|i| (i % 4) as u8).collect();
        (IntensityVolume::new(grid.clone(), data).unwrap(), LabelVolume::new(grid, 4, labels).unwrap())
    }

    #[test]
    fn intensity_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (iv, _) = phantomish();
        for name in ["img.nii", "img.nii.gz"] {
            let p = dir.path().join(name);
            save_intensity(&p, &iv).unwrap();
            let back = load_volume(&p).unwrap();
            let LoadedVolume::Intensity(back) = back else { panic!("expected intensity") };
            assert_eq!(back.data(), iv.data());
            assert_eq!(back.dims(), iv.dims());
            for a in 0..3 {
                assert!((back.spacing()[a] - iv.spacing()[a]).abs() < 1e-6);
                assert!((back.grid().origin()[a] - iv.grid().origin()[a]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn labels_round_trip_with_class_count() {
        let dir = tempfile::tempdir().unwrap();
        let (_, lv) = phantomish();
        let p = dir.path().join("lab.nii.gz");
        save_labels(&p, &lv).unwrap();
        let LoadedVolume::Labels(back) = load_volume(&p).unwrap() else { panic!("expected labels") };
        assert_eq!(back.labels(), lv.labels());
        assert_eq!(back.num_classes(), 4);
    }

    #[test]
    fn spacing_survives_header() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::new([4, 4, 4], [1.5, 1.5, 3.0]).unwrap();
        let iv = IntensityVolume::filled(grid, 1.0);
        let p = dir.path().join("s.nii");
        save_intensity(&p, &iv).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.grid().spacing(), [1.5, 1.5, 3.0]);
    }

    #[test]
    fn declared_class_count_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::new([2, 2, 2], [1.0; 3]).unwrap();
        let mut labels = vec![0u8; 8];
        labels[3] = 7;
        let mut header = header_for(&grid);
        header = label_header(header, 4);
        let p = dir.path().join("bad.nii");
        write(&p, &header, &to_xyz_array(&grid, &labels)).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::LabelOutOfRange { label: 7, num_classes: 4 })));
    }

    #[test]
    fn fractional_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::new([2, 1, 1], [1.0; 3]).unwrap();
        let header = label_header(header_for(&grid), 3);
        let p = dir.path().join("frac.nii");
        write(&p, &header, &to_xyz_array(&grid, &[0.0f32, 1.5])).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::NonIntegerLabel(_))));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(load_volume("/nonexistent/x.nii.gz"), Err(Error::MissingFile(_))));
    }

    #[test]
    fn save_like_copies_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let (iv, lv) = phantomish();
        let src = dir.path().join("in.nii.gz");
        let out = dir.path().join("out.nii.gz");
        save_intensity(&src, &iv).unwrap();
        save_labels_like(&out, &lv, &src).unwrap();
        let a = NiftiHeader::from_file(&src).unwrap();
        let b = NiftiHeader::from_file(&out).unwrap();
        assert_eq!(a.srow_x, b.srow_x);
        assert_eq!(a.srow_y, b.srow_y);
        assert_eq!(a.srow_z, b.srow_z);
        assert_eq!(a.pixdim, b.pixdim);
        assert_eq!(a.dim, b.dim);
        assert_eq!((a.quatern_b, a.quatern_c, a.quatern_d), (b.quatern_b, b.quatern_c, b.quatern_d));
    }
}
