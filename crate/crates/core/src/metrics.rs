//! Overlap and surface-distance metrics on hard label volumes.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::volumes::LabelVolume;

/// Metrics of one foreground class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: u8,
    pub dice: f64,
    pub jaccard: f64,
    /// `None` when exactly one of the two masks is empty.
    pub asd_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    pub mean_dice: f64,
    pub mean_jaccard: f64,
    /// Mean over classes with a defined ASD.
    pub mean_asd_mm: Option<f64>,
}

pub const CSV_HEADER: &str = "class,dice,jaccard,asd_mm";

fn fmt_asd(a: Option<f64>) -> String {
    a.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"))
}

impl MetricReport {
    /// Per-class rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for m in &self.per_class {
            let _ = writeln!(s, "{},{:.6},{:.6},{}", m.class, m.dice, m.jaccard, fmt_asd(m.asd_mm));
        }
        let _ = writeln!(s, "mean,{:.6},{:.6},{}", self.mean_dice, self.mean_jaccard, fmt_asd(self.mean_asd_mm));
        s
    }
}

fn check_pair(pred: &LabelVolume, truth: &LabelVolume) -> Result<()> {
    if pred.dims() != truth.dims() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs truth {:?}", pred.dims(), truth.dims())));
    }
    let (a, b) = (pred.spacing(), truth.spacing());
    if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6 * x.abs().max(y.abs())) {
        return Err(Error::ShapeMismatch(format!("prediction spacing {a:?} vs truth {b:?}")));
    }
    Ok(())
}

fn overlap_counts(pred: &[u8], truth: &[u8], class: u8) -> (usize, usize, usize) {
    let (mut a, mut b, mut both) = (0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        let (ip, it) = (p == class, t == class);
        a += ip as usize;
        b += it as usize;
        both += (ip && it) as usize;
    }
    (a, b, both)
}

fn dice_from_counts(a: usize, b: usize, both: usize) -> f64 {
    if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    }
}

fn jaccard_from_counts(a: usize, b: usize, both: usize) -> f64 {
    let union = a + b - both;
    if union == 0 {
        1.0
    } else {
        both as f64 / union as f64
    }
}

pub fn binary_dice(pred: &LabelVolume, truth: &LabelVolume, class: u8) -> Result<f64> {
    check_pair(pred, truth)?;
    let (a, b, both) = overlap_counts(pred.labels(), truth.labels(), class);
    Ok(dice_from_counts(a, b, both))
}

pub fn binary_jaccard(pred: &LabelVolume, truth: &LabelVolume, class: u8) -> Result<f64> {
    check_pair(pred, truth)?;
    let (a, b, both) = overlap_counts(pred.labels(), truth.labels(), class);
    Ok(jaccard_from_counts(a, b, both))
}

/// Symmetric average surface distance in mm between the masks of `class`.
pub fn average_surface_distance(pred: &LabelVolume, truth: &LabelVolume, class: u8) -> Result<Option<f64>> {
    check_pair(pred, truth)?;
    let a: Vec<bool> = pred.labels().iter().map(|&l| l == class).collect();
    let b: Vec<bool> = truth.labels().iter().map(|&l| l == class).collect();
    Ok(mask_surface_distance(&a, &b, pred.dims(), pred.spacing()))
}

/// Voxels of `mask` with at least one 6-neighbour outside the mask; the
/// volume border counts as outside.
pub fn surface(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let at = |x: usize, y: usize, z: usize| mask[x + nx * (y + ny * z)];
    let mut out = vec![false; mask.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !at(x, y, z) {
                    continue;
                }
                let edge = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                out[x + nx * (y + ny * z)] = edge
                    || !at(x - 1, y, z)
                    || !at(x + 1, y, z)
                    || !at(x, y - 1, z)
                    || !at(x, y + 1, z)
                    || !at(x, y, z - 1)
                    || !at(x, y, z + 1);
            }
        }
    }
    out
}

/// Squared Euclidean distance (in mm²) from every voxel to the nearest
/// `true` voxel of `seeds`; infinite when there are none.
pub fn squared_distance_transform(seeds: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let [nx, ny, nz] = dims;
    let strides = [1, nx, nx * ny];
    let longest = *dims.iter().max().unwrap_or(&1);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut env = Envelope::with_capacity(longest);
    for axis in 0..3 {
        let n = dims[axis];
        let w = spacing[axis] * spacing[axis];
        let (o1, o2) = match axis {
            0 => ((ny, nx), (nz, nx * ny)),
            1 => ((nx, 1), (nz, nx * ny)),
            _ => ((nx, 1), (ny, nx)),
        };
        for j in 0..o2.0 {
            for i in 0..o1.0 {
                let base = i * o1.1 + j * o2.1;
                for k in 0..n {
                    line[k] = d[base + k * strides[axis]];
                }
                env.transform(&line[..n], w, &mut out[..n]);
                for k in 0..n {
                    d[base + k * strides[axis]] = out[k];
                }
            }
        }
    }
    d
}

/// Lower envelope of parabolas `w (p - q)² + f(q)`.
struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self { v: Vec::with_capacity(n), z: Vec::with_capacity(n + 1) }
    }

    fn transform(&mut self, f: &[f64], w: f64, out: &mut [f64]) {
        self.v.clear();
        self.z.clear();
        let cross = |q: usize, p: usize| {
            let (qf, pf) = (q as f64, p as f64);
            ((f[q] + w * qf * qf) - (f[p] + w * pf * pf)) / (2.0 * w * (qf - pf))
        };
        for (q, fq) in f.iter().enumerate() {
            if !fq.is_finite() {
                continue;
            }
            loop {
                match self.v.last() {
                    None => {
                        self.v.push(q);
                        self.z.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&p) => {
                        let s = cross(q, p);
                        if s <= *self.z.last().expect("z tracks v") {
                            self.v.pop();
                            self.z.pop();
                        } else {
                            self.v.push(q);
                            self.z.push(s);
                            break;
                        }
                    }
                }
            }
        }
        if self.v.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (p, o) in out.iter_mut().enumerate() {
            while k + 1 < self.v.len() && self.z[k + 1] < p as f64 {
                k += 1;
            }
            let q = self.v[k];
            let dp = p as f64 - q as f64;
            *o = w * dp * dp + f[q];
        }
    }
}

/// Symmetric ASD between two boolean masks; `Some(0.0)` when both are empty,
/// `None` when exactly one is.
pub fn mask_surface_distance(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Option<f64> {
    let sa = surface(a, dims);
    let sb = surface(b, dims);
    let na = sa.iter().filter(|&&s| s).count();
    let nb = sb.iter().filter(|&&s| s).count();
    match (na, nb) {
        (0, 0) => return Some(0.0),
        (0, _) | (_, 0) => return None,
        _ => {}
    }
    let da = squared_distance_transform(&sa, dims, spacing);
    let db = squared_distance_transform(&sb, dims, spacing);
    let sum_ab: f64 = sa.iter().zip(&db).filter(|(&s, _)| s).map(|(_, d)| d.sqrt()).sum();
    let sum_ba: f64 = sb.iter().zip(&da).filter(|(&s, _)| s).map(|(_, d)| d.sqrt()).sum();
    Some((sum_ab + sum_ba) / (na + nb) as f64)
}

/// Dice, Jaccard and ASD for every foreground class, plus their means.
pub fn evaluate_volume(pred: &LabelVolume, truth: &LabelVolume) -> Result<MetricReport> {
    check_pair(pred, truth)?;
    if pred.num_classes() != truth.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "prediction has {} classes, truth has {}",
            pred.num_classes(),
            truth.num_classes()
        )));
    }
    let mut per_class = Vec::with_capacity(truth.num_classes().saturating_sub(1));
    for c in 1..truth.num_classes() as u8 {
        let (a, b, both) = overlap_counts(pred.labels(), truth.labels(), c);
        per_class.push(ClassMetrics {
            class: c,
            dice: dice_from_counts(a, b, both),
            jaccard: jaccard_from_counts(a, b, both),
            asd_mm: average_surface_distance(pred, truth, c)?,
        });
    }
    let k = per_class.len().max(1) as f64;
    let defined: Vec<f64> = per_class.iter().filter_map(|m| m.asd_mm).collect();
    Ok(MetricReport {
        mean_dice: per_class.iter().map(|m| m.dice).sum::<f64>() / k,
        mean_jaccard: per_class.iter().map(|m| m.jaccard).sum::<f64>() / k,
        mean_asd_mm: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::Grid;
    use proptest::prelude::*;

    fn vol(dims: [usize; 3], spacing: [f64; 3], labels: Vec<u8>) -> LabelVolume {
        LabelVolume::new(Grid::new(dims, spacing).unwrap(), 2, labels).unwrap()
    }

    fn boxed(dims: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> Vec<u8> {
        let mut v = vec![0u8; dims.iter().product()];
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    v[x + dims[0] * (y + dims[1] * z)] = 1;
                }
            }
        }
        v
    }

    #[test]
    fn offset_cubes() {
        let d = [16, 8, 8];
        let a = vol(d, [1.0; 3], boxed(d, [0, 0, 0], [8, 8, 8]));
        let b = vol(d, [1.0; 3], boxed(d, [4, 0, 0], [12, 8, 8]));
        assert_eq!(binary_dice(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(binary_jaccard(&a, &b, 1).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn empty_conventions() {
        let d = [4, 4, 4];
        let e = vol(d, [1.0; 3], vec![0; 64]);
        let f = vol(d, [1.0; 3], boxed(d, [1, 1, 1], [3, 3, 3]));
        assert_eq!(binary_dice(&e, &e, 1).unwrap(), 1.0);
        assert_eq!(binary_jaccard(&e, &e, 1).unwrap(), 1.0);
        assert_eq!(average_surface_distance(&e, &e, 1).unwrap(), Some(0.0));
        assert_eq!(average_surface_distance(&e, &f, 1).unwrap(), None);
        assert_eq!(binary_dice(&e, &f, 1).unwrap(), 0.0);
    }

    #[test]
    fn parallel_plates() {
        let d = [8, 8, 12];
        let a = boxed(d, [0, 0, 2], [8, 8, 3]);
        let b = boxed(d, [0, 0, 7], [8, 8, 8]);
        let iso = average_surface_distance(&vol(d, [1.0; 3], a.clone()), &vol(d, [1.0; 3], b.clone()), 1).unwrap();
        assert!((iso.unwrap() - 5.0).abs() < 1e-9);
        let aniso = average_surface_distance(&vol(d, [1.0, 1.0, 2.0], a), &vol(d, [1.0, 1.0, 2.0], b), 1).unwrap();
        assert!((aniso.unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn identical_volumes_report_perfect_scores() {
        let d = [8, 8, 8];
        let mut l = boxed(d, [1, 1, 1], [5, 5, 5]);
        l[7 + 8 * (7 + 8 * 7)] = 2;
        let a = LabelVolume::new(Grid::new(d, [1.0; 3]).unwrap(), 3, l).unwrap();
        let r = evaluate_volume(&a, &a).unwrap();
        assert_eq!(r.per_class.len(), 2);
        for m in &r.per_class {
            assert_eq!((m.dice, m.jaccard, m.asd_mm), (1.0, 1.0, Some(0.0)));
        }
        let csv = r.to_csv();
        assert!(csv.starts_with("class,dice,jaccard,asd_mm\n1,1.000000,1.000000,0.000000\n"));
    }

    #[test]
    fn spacing_mismatch_is_an_error() {
        let d = [2, 2, 2];
        let a = vol(d, [1.0; 3], vec![0; 8]);
        let b = vol(d, [1.0, 1.0, 2.0], vec![0; 8]);
        assert!(average_surface_distance(&a, &b, 1).is_err());
    }

    #[test]
    fn distance_transform_single_seed() {
        let d = [5, 4, 3];
        let mut s = vec![false; 60];
        s[0] = true;
        let dt = squared_distance_transform(&s, d, [1.0, 2.0, 3.0]);
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    let want = (x * x) as f64 + (2 * y * 2 * y) as f64 + (3 * z * 3 * z) as f64;
                    assert_eq!(dt[x + 5 * (y + 4 * z)], want);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn symmetric_and_consistent(
            a in proptest::collection::vec(0u8..2, 6 * 5 * 4),
            b in proptest::collection::vec(0u8..2, 6 * 5 * 4),
        ) {
            let d = [6, 5, 4];
            let sp = [1.0, 0.5, 2.0];
            let va = vol(d, sp, a);
            let vb = vol(d, sp, b);
            let dice = binary_dice(&va, &vb, 1).unwrap();
            let jac = binary_jaccard(&va, &vb, 1).unwrap();
            prop_assert!(jac <= dice + 1e-12);
            prop_assert!((dice - 2.0 * jac / (1.0 + jac)).abs() < 1e-9);
            prop_assert_eq!(dice, binary_dice(&vb, &va, 1).unwrap());
            let ab = average_surface_distance(&va, &vb, 1).unwrap();
            let ba = average_surface_distance(&vb, &va, 1).unwrap();
            match (ab, ba) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }
}
