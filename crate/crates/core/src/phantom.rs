//! Synthetic multi-class volumes: a large ellipsoid with smaller ellipsoids
//! embedded in it, each class at its own mean intensity, plus Gaussian noise.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{save_intensity, save_labels, Grid, IntensityVolume, LabelVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub num_foreground_classes: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Outer ellipsoid radius as a fraction of the half-extent of each axis.
    pub structure_scale: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: [64; 3],
            spacing: [1.0; 3],
            num_foreground_classes: 3,
            noise_sigma: 0.05,
            seed: 0,
            structure_scale: 0.7,
        }
    }
}

const MIN_DIM: usize = 16;
const SUB_OFFSET: f64 = 0.5;
const SUB_RADIUS: f64 = 0.4;

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d < MIN_DIM) {
            return Err(Error::InvalidConfig(format!(
                "phantom shape must be >= {MIN_DIM} per axis, got {:?}",
                self.shape
            )));
        }
        if self.num_foreground_classes == 0 || self.num_foreground_classes > 254 {
            return Err(Error::InvalidConfig(format!(
                "phantom needs 1..=254 foreground classes, got {}",
                self.num_foreground_classes
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Grid::new(self.shape, self.spacing).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if !(self.structure_scale > 0.0 && self.structure_scale < 1.0) {
            return Err(self.no_fit(format!("structure_scale must lie in (0, 1), got {}", self.structure_scale)));
        }
        let smallest = self.shape.iter().min().copied().unwrap_or(0) as f64 / 2.0 * self.structure_scale * 0.85;
        if self.num_foreground_classes > 1 && smallest * SUB_RADIUS * 0.85 < 1.0 {
            return Err(self.no_fit("inner structures would be thinner than one voxel".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_foreground_classes + 1
    }

    /// Mean intensity of class `c` before noise.
    pub fn class_mean(&self, c: usize) -> f32 {
        if c == 0 {
            0.0
        } else {
            (0.2 + 0.8 * c as f64 / (self.num_foreground_classes + 1) as f64) as f32
        }
    }

    fn no_fit(&self, reason: String) -> Error {
        Error::PhantomDoesNotFit { dims: self.shape, reason }
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    /// Rows are the ellipsoid's local axes.
    rotation: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut q = 0.0;
        for (axis, r) in self.rotation.iter().zip(self.radii) {
            let u = axis[0] * d[0] + axis[1] * d[1] + axis[2] * d[2];
            q += (u / r) * (u / r);
        }
        q <= 1.0
    }
}

/// Uniformly distributed rotation from a random unit quaternion.
fn random_rotation<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    let mut q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    q.iter_mut().for_each(|v| *v /= n);
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn layout<R: Rng>(cfg: &PhantomConfig, rng: &mut R) -> Vec<Ellipsoid> {
    let half: [f64; 3] = std::array::from_fn(|a| cfg.shape[a] as f64 / 2.0);
    let jitter = (1.0 - cfg.structure_scale) * 0.5;
    let center: [f64; 3] = std::array::from_fn(|a| half[a] - 0.5 + rng.gen_range(-jitter..=jitter) * half[a]);
    // Rotations mix axes, so the outer radius is bounded by the shortest half-extent.
    let reach = half.iter().cloned().fold(f64::INFINITY, f64::min) * cfg.structure_scale;
    let radii: [f64; 3] = std::array::from_fn(|_| reach * rng.gen_range(0.85..=1.0));
    let rotation = random_rotation(rng);
    let mut out = vec![Ellipsoid { center, radii, rotation }];

    let inner = cfg.num_foreground_classes - 1;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    for k in 0..inner {
        let theta = phase + std::f64::consts::TAU * k as f64 / inner.max(1) as f64;
        let local = if inner == 1 {
            [0.0; 3]
        } else {
            [SUB_OFFSET * radii[0] * theta.cos(), SUB_OFFSET * radii[1] * theta.sin(), 0.0]
        };
        let c: [f64; 3] = std::array::from_fn(|a| center[a] + (0..3).map(|r| rotation[r][a] * local[r]).sum::<f64>());
        let rr: [f64; 3] = std::array::from_fn(|a| radii[a] * SUB_RADIUS * rng.gen_range(0.85..=1.0));
        out.push(Ellipsoid { center: c, radii: rr, rotation });
    }
    out
}

/// One phantom; identical configs give bit-identical volumes.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(IntensityVolume, LabelVolume)> {
    cfg.validate()?;
    let mut geometry_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shapes = layout(cfg, &mut geometry_rng);
    let [nx, ny, nz] = cfg.shape;
    let mut labels = vec![0u8; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64, y as f64, z as f64];
                // later structures are painted over earlier ones
                if let Some(k) = shapes.iter().rposition(|e| e.contains(p)) {
                    labels[x + nx * (y + ny * z)] = k as u8 + 1;
                }
            }
        }
    }
    let grid = Grid::new(cfg.shape, cfg.spacing)?;
    let lv = LabelVolume::new(grid.clone(), cfg.num_classes(), labels)?;
    if let Some(c) = lv.class_counts().iter().position(|&n| n == 0) {
        return Err(cfg.no_fit(format!("class {c} has no voxels")));
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let data = lv
        .labels()
        .iter()
        .map(|&l| {
            let base = cfg.class_mean(l as usize);
            if cfg.noise_sigma > 0.0 {
                base + noise.sample(&mut noise_rng) as f32
            } else {
                base
            }
        })
        .collect();
    Ok((IntensityVolume::new(grid, data)?, lv))
}

/// `n` phantoms with seeds `seed_base .. seed_base + n`.
pub fn generate_dataset(cfg: &PhantomConfig, n: usize, seed_base: u64) -> Result<Vec<(IntensityVolume, LabelVolume)>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    (0..n as u64).map(|i| generate_phantom(&PhantomConfig { seed: seed_base + i, ..cfg.clone() })).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
    pub seed: u64,
    pub class_counts: Vec<usize>,
}

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Writes `n` phantom image/label pairs plus a key-value manifest into `dir`.
pub fn write_dataset(dir: &Path, cfg: &PhantomConfig, n: usize, seed_base: u64) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::Unwritable { path: dir.to_path_buf(), reason: e.to_string() })?;
    let mut entries = Vec::with_capacity(n);
    let mut manifest = String::new();
    let _ = writeln!(manifest, "count = {n}");
    let _ = writeln!(manifest, "num_classes = {}", cfg.num_classes());
    for (i, (iv, lv)) in generate_dataset(cfg, n, seed_base)?.into_iter().enumerate() {
        let seed = seed_base + i as u64;
        let image = dir.join(format!("phantom_{i:03}_image.nii.gz"));
        let label = dir.join(format!("phantom_{i:03}_label.nii.gz"));
        save_intensity(&image, &iv)?;
        save_labels(&label, &lv)?;
        let counts = lv.class_counts();
        let joined = counts.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let _ = writeln!(manifest, "phantom.{i}.image = {}", image.display());
        let _ = writeln!(manifest, "phantom.{i}.label = {}", label.display());
        let _ = writeln!(manifest, "phantom.{i}.seed = {seed}");
        let _ = writeln!(manifest, "phantom.{i}.class_counts = {joined}");
        entries.push(ManifestEntry { image, label, seed, class_counts: counts });
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::Unwritable { path, reason: e.to_string() })?;
    Ok(entries)
}

/// Reads image/label paths back from a manifest written by [`write_dataset`].
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Unreadable { path: path.to_path_buf(), reason: e.to_string() },
    })?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for line in text.lines() {
        let Some((key, value)) = line.split_once('=') else { continue };
        let (key, value) = (key.trim(), PathBuf::from(value.trim()));
        if key.ends_with(".image") {
            images.push(value);
        } else if key.ends_with(".label") {
            labels.push(value);
        }
    }
    if images.len() != labels.len() {
        return Err(Error::Unreadable { path: path.to_path_buf(), reason: "unpaired image/label entries".into() });
    }
    Ok(images.into_iter().zip(labels).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> PhantomConfig {
        PhantomConfig { shape: [24, 24, 20], seed, ..PhantomConfig::default() }
    }

    #[test]
    fn deterministic() {
        let (a, la) = generate_phantom(&small(5)).unwrap();
        let (b, lb) = generate_phantom(&small(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn every_class_present() {
        for c in 1..=5 {
            let cfg = PhantomConfig { num_foreground_classes: c, ..small(1) };
            let (_, l) = generate_phantom(&cfg).unwrap();
            assert_eq!(l.label_set(), (0..=c as u8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn noise_free_is_piecewise_constant() {
        let cfg = PhantomConfig { noise_sigma: 0.0, ..small(2) };
        let (iv, lv) = generate_phantom(&cfg).unwrap();
        for (&v, &l) in iv.data().iter().zip(lv.labels()) {
            assert_eq!(v, cfg.class_mean(l as usize));
        }
    }

    #[test]
    fn labels_ignore_noise_level() {
        let (_, a) = generate_phantom(&PhantomConfig { noise_sigma: 0.0, ..small(3) }).unwrap();
        let (_, b) = generate_phantom(&PhantomConfig { noise_sigma: 0.3, ..small(3) }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_seeds_and_distinctness() {
        let ds = generate_dataset(&small(0), 4, 10).unwrap();
        assert_eq!(ds[0], generate_phantom(&small(10)).unwrap());
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(ds[i].1, ds[j].1);
            }
        }
        assert!(generate_dataset(&small(0), 0, 0).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate_phantom(&PhantomConfig { shape: [8, 32, 32], ..small(0) }).is_err());
        assert!(matches!(
            generate_phantom(&PhantomConfig { structure_scale: 1.2, ..small(0) }),
            Err(Error::PhantomDoesNotFit { .. })
        ));
        assert!(generate_phantom(&PhantomConfig { noise_sigma: -1.0, ..small(0) }).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = write_dataset(dir.path(), &small(0), 2, 0).unwrap();
        let read = read_manifest(&dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(read.len(), 2);
        assert_eq!(read[1], (entries[1].image.clone(), entries[1].label.clone()));
    }
}
