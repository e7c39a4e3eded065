use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElasticConfig {
    /// Control points per axis.
    pub control_grid: usize,
    /// Standard deviation of control-point displacements, in voxels.
    pub sigma: f64,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        Self { control_grid: 4, sigma: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotation_deg_max: f64,
    pub translation_vox_max: f64,
    pub shear_max: f64,
    pub scale_range: [f64; 2],
    pub flip_axes_prob: f64,
    pub elastic: ElasticConfig,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg_max: 10.0,
            translation_vox_max: 5.0,
            shear_max: 0.1,
            scale_range: [0.9, 1.1],
            flip_axes_prob: 0.5,
            elastic: ElasticConfig::default(),
            enabled: true,
        }
    }
}

impl AugmentConfig {
    /// All transforms switched off.
    pub fn identity() -> Self {
        Self {
            rotation_deg_max: 0.0,
            translation_vox_max: 0.0,
            shear_max: 0.0,
            scale_range: [1.0, 1.0],
            flip_axes_prob: 0.0,
            elastic: ElasticConfig { control_grid: 4, sigma: 0.0 },
            enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.rotation_deg_max, self.translation_vox_max, self.shear_max, self.elastic.sigma];
        if ranges.iter().any(|&r| !r.is_finite() || r < 0.0) {
            return Err(Error::InvalidConfig("augmentation ranges must be finite and non-negative".into()));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi < 2.0) {
            return Err(Error::InvalidConfig(format!(
                "scale_range {:?} must lie in (0, 2) with lo <= hi",
                self.scale_range
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_axes_prob) {
            return Err(Error::InvalidConfig("flip_axes_prob must lie in [0, 1]".into()));
        }
        if self.elastic.control_grid < 2 {
            return Err(Error::InvalidConfig("elastic control_grid must be at least 2".into()));
        }
        Ok(())
    }
}

/// Smooth displacement field from a coarse lattice of random control
/// offsets, interpolated trilinearly over the output patch.
#[derive(Debug, Clone)]
struct Elastic {
    grid: usize,
    /// Per control point, xyz displacement.
    offsets: Vec<[f64; 3]>,
}

impl Elastic {
    fn at(&self, p: [usize; 3], dims: [usize; 3]) -> [f64; 3] {
        let g = self.grid;
        let mut i0 = [0usize; 3];
        let mut w = [0f64; 3];
        for a in 0..3 {
            let u = if dims[a] > 1 { p[a] as f64 / (dims[a] - 1) as f64 * (g - 1) as f64 } else { 0.0 };
            i0[a] = (u.floor() as usize).min(g - 2);
            w[a] = u - i0[a] as f64;
        }
        let mut out = [0.0; 3];
        for corner in 0..8 {
            let bit = |a: usize| (corner >> a) & 1;
            let mut weight = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                idx[a] = i0[a] + bit(a);
                weight *= if bit(a) == 1 { w[a] } else { 1.0 - w[a] };
            }
            let o = self.offsets[idx[0] + g * (idx[1] + g * idx[2])];
            for a in 0..3 {
                out[a] += weight * o[a];
            }
        }
        out
    }
}

/// Maps output voxels to source coordinates around a pair of centres.
#[derive(Debug, Clone)]
pub struct Transform {
    matrix: [[f64; 3]; 3],
    translation: [f64; 3],
    flips: [bool; 3],
    elastic: Option<Elastic>,
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn rotation(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let [a, b, c] = angles;
    let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rz = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            flips: [false; 3],
            elastic: None,
        }
    }

    /// Draws rotation, shear, per-axis scale, translation, flips and an
    /// elastic field within the configured ranges.
    pub fn random<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let angles = std::array::from_fn(|_| sym(rng, cfg.rotation_deg_max).to_radians());
        let mut shear = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for (i, row) in shear.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                if i != j {
                    *v = sym(rng, cfg.shear_max);
                }
            }
        }
        let [lo, hi] = cfg.scale_range;
        let mut scale = [[0.0; 3]; 3];
        for (a, row) in scale.iter_mut().enumerate() {
            row[a] = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        }
        let matrix = mat_mul(&rotation(angles), &mat_mul(&shear, &scale));
        let translation = std::array::from_fn(|_| sym(rng, cfg.translation_vox_max));
        let flips = std::array::from_fn(|_| rng.gen::<f64>() < cfg.flip_axes_prob);
        let elastic = (cfg.elastic.sigma > 0.0).then(|| {
            let g = cfg.elastic.control_grid;
            let normal = Normal::new(0.0, cfg.elastic.sigma).expect("sigma validated");
            Elastic { grid: g, offsets: (0..g * g * g).map(|_| std::array::from_fn(|_| normal.sample(rng))).collect() }
        });
        Self { matrix, translation, flips, elastic }
    }

    pub fn with_flips(mut self, flips: [bool; 3]) -> Self {
        self.flips = flips;
        self
    }

    /// Source position of output voxel `p`; `out_center` in the output maps
    /// to `src_center` in the source before translation and elastic offsets.
    fn source(&self, p: [usize; 3], out_dims: [usize; 3], out_center: [f64; 3], src_center: [f64; 3]) -> [f64; 3] {
        let mut q = [0.0; 3];
        for a in 0..3 {
            q[a] = p[a] as f64 - out_center[a];
            if self.flips[a] {
                q[a] = -q[a];
            }
        }
        let e = self.elastic.as_ref().map_or([0.0; 3], |e| e.at(p, out_dims));
        std::array::from_fn(|i| {
            let m = &self.matrix[i];
            src_center[i] + m[0] * q[0] + m[1] * q[1] + m[2] * q[2] + self.translation[i] + e[i]
        })
    }

    /// Resamples an intensity/label pair onto `out_dims`: intensities
    /// trilinearly with −1 outside the source, labels by nearest voxel with
    /// background outside.
    #[allow(clippy::too_many_arguments)]
    pub fn warp(
        &self,
        intensity: &[f32],
        labels: &[u8],
        src_dims: [usize; 3],
        src_center: [f64; 3],
        out_dims: [usize; 3],
        out_center: [f64; 3],
    ) -> (Vec<f32>, Vec<u8>) {
        let n: usize = out_dims.iter().product();
        let mut oi = Vec::with_capacity(n);
        let mut ol = Vec::with_capacity(n);
        let [sx, sy, sz] = src_dims;
        let at = |x: isize, y: isize, z: isize| -> Option<usize> {
            (x >= 0 && y >= 0 && z >= 0 && (x as usize) < sx && (y as usize) < sy && (z as usize) < sz)
                .then(|| x as usize + sx * (y as usize + sy * z as usize))
        };
        for z in 0..out_dims[2] {
            for y in 0..out_dims[1] {
                for x in 0..out_dims[0] {
                    let s = self.source([x, y, z], out_dims, out_center, src_center);
                    let r = s.map(|v| v.round() as isize);
                    ol.push(at(r[0], r[1], r[2]).map_or(0, |i| labels[i]));
                    let f = s.map(|v| v.floor());
                    let w = [s[0] - f[0], s[1] - f[1], s[2] - f[2]];
                    let f = f.map(|v| v as isize);
                    let mut acc = 0.0f64;
                    for corner in 0..8 {
                        let b = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                        let mut wt = 1.0;
                        for a in 0..3 {
                            wt *= if b[a] == 1 { w[a] } else { 1.0 - w[a] };
                        }
                        if wt == 0.0 {
                            continue;
                        }
                        let v = at(f[0] + b[0] as isize, f[1] + b[1] as isize, f[2] + b[2] as isize)
                            .map_or(-1.0, |i| intensity[i] as f64);
                        acc += wt * v;
                    }
                    oi.push(acc as f32);
                }
            }
        }
        (oi, ol)
    }
}

/// Applies one random transform to a patch pair, keeping its shape.
pub fn augment<R: Rng>(
    intensity: &[f32],
    labels: &[u8],
    dims: [usize; 3],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Vec<f32>, Vec<u8>) {
    if !cfg.enabled {
        return (intensity.to_vec(), labels.to_vec());
    }
    let t = Transform::random(cfg, rng);
    let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
    t.warp(intensity, labels, dims, c, dims, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn patch(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> (Vec<f32>, Vec<u8>) {
        let n = dims.iter().product();
        ((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), (0..n).map(|_| rng.gen_range(0..3)).collect())
    }

    #[test]
    fn zero_ranges_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = [6, 5, 7];
        let (i, l) = patch(&mut rng, dims);
        let (ai, al) = augment(&i, &l, dims, &AugmentConfig::identity(), &mut rng);
        assert_eq!(ai, i);
        assert_eq!(al, l);
    }

    #[test]
    fn double_flip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = [6, 5, 4];
        let (i, l) = patch(&mut rng, dims);
        let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
        let t = Transform::identity().with_flips([true, false, false]);
        let (fi, fl) = t.warp(&i, &l, dims, c, dims, c);
        assert_ne!(fl, l);
        assert_eq!(fl[0], l[5]);
        let (bi, bl) = t.warp(&fi, &fl, dims, c, dims, c);
        assert_eq!(bi, i);
        assert_eq!(bl, l);
    }

    #[test]
    fn random_augmentation_keeps_shape_and_label_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = [16, 16, 16];
        let n = 16 * 16 * 16;
        let l: Vec<u8> = (0..n).map(|i| if i % 16 > 8 { 2 } else { 0 }).collect();
        let i: Vec<f32> = l.iter().map(|&v| v as f32 * 0.5).collect();
        for _ in 0..5 {
            let (ai, al) = augment(&i, &l, dims, &AugmentConfig::default(), &mut rng);
            assert_eq!(ai.len(), n);
            assert_eq!(al.len(), n);
            assert!(al.iter().all(|&v| v == 0 || v == 2));
            assert!(ai.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        let bad = AugmentConfig { scale_range: [0.5, 2.5], ..AugmentConfig::default() };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig { shear_max: -0.1, ..AugmentConfig::default() };
        assert!(bad.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }
}
