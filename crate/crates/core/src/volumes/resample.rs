use serde::{Deserialize, Serialize};

use super::{Grid, IntensityVolume, LabelVolume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Linear,
    Nearest,
    /// Interpolating quadratic B-spline (prefiltered, mirror boundary).
    #[serde(rename = "bspline2")]
    BSpline2,
}

/// Output dimension along one axis: `max(1, round(n * in_spacing / target))`.
pub fn output_len(n: usize, in_spacing: f64, target: f64) -> usize {
    ((n as f64 * in_spacing / target).round() as usize).max(1)
}

/// Continuous source coordinate of output voxel `i` when `n_in` voxels are
/// mapped onto `n_out` voxels spanning the same physical extent.
#[inline]
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5
}

fn target_grid(grid: &Grid, target_spacing: [f64; 3]) -> Result<Grid> {
    if target_spacing.iter().any(|&s| s.is_nan() || s <= 0.0) {
        return Err(Error::InvalidArgument(format!("target spacing must be positive, got {target_spacing:?}")));
    }
    let dims_in = grid.dims();
    let spacing_in = grid.spacing();
    let mut dims = [0usize; 3];
    let mut spacing = [0f64; 3];
    let mut first = [0f64; 3];
    for a in 0..3 {
        dims[a] = output_len(dims_in[a], spacing_in[a], target_spacing[a]);
        spacing[a] =
            if dims[a] == dims_in[a] { spacing_in[a] } else { spacing_in[a] * dims_in[a] as f64 / dims[a] as f64 };
        first[a] = source_coord(0, dims_in[a], dims[a]);
    }
    grid.derive(dims, spacing, first)
}

pub fn resample_intensity(
    v: &IntensityVolume,
    target_spacing: [f64; 3],
    mode: Interpolation,
) -> Result<IntensityVolume> {
    let grid = target_grid(v.grid(), target_spacing)?;
    let data = interpolate_channel(v.data(), v.dims(), grid.dims(), mode);
    IntensityVolume::new(grid, data)
}

/// Label maps only admit nearest-neighbour resampling.
pub fn resample_labels(v: &LabelVolume, target_spacing: [f64; 3], mode: Interpolation) -> Result<LabelVolume> {
    if mode != Interpolation::Nearest {
        return Err(Error::LabelInterpolation);
    }
    let grid = target_grid(v.grid(), target_spacing)?;
    let labels = nearest_gather(v.labels(), v.dims(), grid.dims());
    Ok(v.with_grid_and_labels(grid, labels))
}

/// Resamples one scalar channel from `dims_in` to `dims_out` over the same
/// physical extent.
pub fn interpolate_channel(src: &[f32], dims_in: [usize; 3], dims_out: [usize; 3], mode: Interpolation) -> Vec<f32> {
    assert_eq!(src.len(), dims_in.iter().product::<usize>());
    match mode {
        Interpolation::Nearest => nearest_gather(src, dims_in, dims_out),
        Interpolation::Linear | Interpolation::BSpline2 => {
            let mut buf: Vec<f64> = src.iter().map(|&x| x as f64).collect();
            let mut dims = dims_in;
            for (axis, &n) in dims_out.iter().enumerate() {
                let (next, next_dims) = resample_axis(&buf, dims, axis, n, mode);
                buf = next;
                dims = next_dims;
            }
            buf.into_iter().map(|x| x as f32).collect()
        }
    }
}

fn nearest_gather<T: Copy>(src: &[T], dims_in: [usize; 3], dims_out: [usize; 3]) -> Vec<T> {
    let lookup: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            (0..dims_out[a])
                .map(|i| {
                    let s = source_coord(i, dims_in[a], dims_out[a]).round();
                    s.clamp(0.0, (dims_in[a] - 1) as f64) as usize
                })
                .collect()
        })
        .collect();
    let [nx, ny, _] = dims_in;
    let mut out = Vec::with_capacity(dims_out.iter().product());
    for &z in &lookup[2] {
        for &y in &lookup[1] {
            let row = nx * (y + ny * z);
            out.extend(lookup[0].iter().map(|&x| src[row + x]));
        }
    }
    out
}

fn resample_axis(
    src: &[f64],
    dims: [usize; 3],
    axis: usize,
    n_out: usize,
    mode: Interpolation,
) -> (Vec<f64>, [usize; 3]) {
    let n_in = dims[axis];
    let mut out_dims = dims;
    out_dims[axis] = n_out;
    if n_in == n_out && mode == Interpolation::Linear {
        return (src.to_vec(), out_dims);
    }
    let stride_in = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let stride_out = match axis {
        0 => 1,
        1 => out_dims[0],
        _ => out_dims[0] * out_dims[1],
    };
    let (outer_a, outer_b) = match axis {
        0 => ((1, 2), (dims[1], dims[2])),
        1 => ((0, 2), (dims[0], dims[2])),
        _ => ((0, 1), (dims[0], dims[1])),
    };
    let base = |dims: [usize; 3], i: usize, j: usize| -> usize {
        let mut c = [0usize; 3];
        c[outer_a.0] = i;
        c[outer_a.1] = j;
        c[0] + dims[0] * (c[1] + dims[1] * c[2])
    };
    let coords: Vec<f64> = (0..n_out).map(|i| source_coord(i, n_in, n_out).clamp(0.0, (n_in - 1) as f64)).collect();
    let mut out = vec![0.0; out_dims.iter().product()];
    let mut line = vec![0.0; n_in];
    for j in 0..outer_b.1 {
        for i in 0..outer_b.0 {
            let b_in = base(dims, i, j);
            let b_out = base(out_dims, i, j);
            for (k, v) in line.iter_mut().enumerate() {
                *v = src[b_in + k * stride_in];
            }
            match mode {
                Interpolation::Linear => {
                    for (k, &s) in coords.iter().enumerate() {
                        out[b_out + k * stride_out] = linear_at(&line, s);
                    }
                }
                Interpolation::BSpline2 => {
                    bspline2_prefilter(&mut line);
                    for (k, &s) in coords.iter().enumerate() {
                        out[b_out + k * stride_out] = bspline2_at(&line, s);
                    }
                }
                Interpolation::Nearest => unreachable!("nearest is handled by gather"),
            }
        }
    }
    (out, out_dims)
}

#[inline]
fn linear_at(line: &[f64], s: f64) -> f64 {
    let i0 = s.floor() as usize;
    let f = s - i0 as f64;
    if f == 0.0 || i0 + 1 >= line.len() {
        return line[i0];
    }
    (1.0 - f) * line[i0] + f * line[i0 + 1]
}

#[inline]
fn mirror(k: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = k.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

#[inline]
fn bspline2_weight(t: f64) -> f64 {
    let t = t.abs();
    if t < 0.5 {
        0.75 - t * t
    } else if t < 1.5 {
        let u = t - 1.5;
        0.5 * u * u
    } else {
        0.0
    }
}

fn bspline2_at(coeffs: &[f64], s: f64) -> f64 {
    let centre = (s + 0.5).floor() as isize;
    (centre - 1..=centre + 1).map(|k| bspline2_weight(s - k as f64) * coeffs[mirror(k, coeffs.len())]).sum()
}

/// In-place conversion of samples to quadratic B-spline coefficients.
fn bspline2_prefilter(c: &mut [f64]) {
    let n = c.len();
    if n < 2 {
        return;
    }
    let z = 8f64.sqrt() - 3.0;
    let lambda = (1.0 - z) * (1.0 - 1.0 / z);
    for v in c.iter_mut() {
        *v *= lambda;
    }
    // causal initialisation, mirror-symmetric boundary
    let horizon = ((1e-12f64).ln() / z.abs().ln()).ceil() as usize;
    c[0] = if horizon < n {
        let mut zn = z;
        let mut sum = c[0];
        for v in c.iter().take(horizon).skip(1) {
            sum += zn * v;
            zn *= z;
        }
        sum
    } else {
        let iz = 1.0 / z;
        let mut zn = z;
        let mut z2n = z.powi(n as i32 - 1);
        let mut sum = c[0] + z2n * c[n - 1];
        z2n = z2n * z2n * iz;
        for v in &c[1..n - 1] {
            sum += (zn + z2n) * v;
            zn *= z;
            z2n *= iz;
        }
        sum / (1.0 - zn * zn)
    };
    for k in 1..n {
        c[k] += z * c[k - 1];
    }
    c[n - 1] = (z / (z * z - 1.0)) * (z * c[n - 2] + c[n - 1]);
    for k in (0..n - 1).rev() {
        c[k] = z * (c[k + 1] - c[k]);
    }
}
