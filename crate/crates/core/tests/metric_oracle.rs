use cascade_seg::metrics::{average_surface_distance, binary_dice, binary_jaccard, mask_surface_distance};
use cascade_seg::volumes::{Grid, LabelVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mask voxels touching the outside through a face, by explicit neighbour lookup.
fn brute_surface(mask: &[bool], d: [usize; 3]) -> Vec<[usize; 3]> {
    let inside = |x: isize, y: isize, z: isize| {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < d[0]
            && (y as usize) < d[1]
            && (z as usize) < d[2]
            && mask[x as usize + d[0] * (y as usize + d[1] * z as usize)]
    };
    let mut out = Vec::new();
    for z in 0..d[2] as isize {
        for y in 0..d[1] as isize {
            for x in 0..d[0] as isize {
                if !inside(x, y, z) {
                    continue;
                }
                let n = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if n.iter().any(|(a, b, c)| !inside(x + a, y + b, z + c)) {
                    out.push([x as usize, y as usize, z as usize]);
                }
            }
        }
    }
    out
}

fn brute_asd(a: &[bool], b: &[bool], d: [usize; 3], sp: [f64; 3]) -> Option<f64> {
    let sa = brute_surface(a, d);
    let sb = brute_surface(b, d);
    if sa.is_empty() && sb.is_empty() {
        return Some(0.0);
    }
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3).map(|i| ((p[i] as f64 - q[i] as f64) * sp[i]).powi(2)).sum::<f64>().sqrt()
    };
    let nearest = |p: &[usize; 3], set: &[[usize; 3]]| set.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min);
    let total: f64 = sa.iter().map(|p| nearest(p, &sb)).sum::<f64>() + sb.iter().map(|p| nearest(p, &sa)).sum::<f64>();
    Some(total / (sa.len() + sb.len()) as f64)
}

fn random_blob(rng: &mut ChaCha8Rng, d: [usize; 3]) -> Vec<bool> {
    let c: [f64; 3] = std::array::from_fn(|i| rng.gen_range(0.0..d[i] as f64));
    let r: [f64; 3] = std::array::from_fn(|i| rng.gen_range(1.0..d[i] as f64 / 2.0));
    let noise = rng.gen_range(0.0..0.15);
    let mut m = vec![false; d.iter().product()];
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let p = [x, y, z];
                let q: f64 = (0..3).map(|i| ((p[i] as f64 - c[i]) / r[i]).powi(2)).sum();
                m[x + d[0] * (y + d[1] * z)] = q <= 1.0 || rng.gen::<f64>() < noise;
            }
        }
    }
    m
}

#[test]
fn distance_transform_matches_pairwise_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..30 {
        let d: [usize; 3] = std::array::from_fn(|_| rng.gen_range(3..=16));
        let sp: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.5..3.0));
        let a = random_blob(&mut rng, d);
        let b = random_blob(&mut rng, d);
        let fast = mask_surface_distance(&a, &b, d, sp);
        let slow = brute_asd(&a, &b, d, sp);
        match (fast, slow) {
            (Some(x), Some(y)) => assert!((x - y).abs() < 1e-6, "case {case}: {x} vs {y}"),
            (x, y) => assert_eq!(x, y, "case {case}"),
        }
    }
}

#[test]
fn overlap_metrics_match_voxel_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = [10, 9, 7];
    let grid = Grid::new(d, [1.0; 3]).unwrap();
    for _ in 0..20 {
        let a: Vec<u8> = (0..630).map(|_| rng.gen_range(0..3)).collect();
        let b: Vec<u8> = (0..630).map(|_| rng.gen_range(0..3)).collect();
        let va = LabelVolume::new(grid.clone(), 3, a.clone()).unwrap();
        let vb = LabelVolume::new(grid.clone(), 3, b.clone()).unwrap();
        for c in 1..3u8 {
            let na = a.iter().filter(|&&l| l == c).count() as f64;
            let nb = b.iter().filter(|&&l| l == c).count() as f64;
            let both = a.iter().zip(&b).filter(|(&x, &y)| x == c && y == c).count() as f64;
            assert_eq!(binary_dice(&va, &vb, c).unwrap(), 2.0 * both / (na + nb));
            assert_eq!(binary_jaccard(&va, &vb, c).unwrap(), both / (na + nb - both));
        }
    }
}

#[test]
fn axis_permutation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = [7, 5, 6];
    let sp = [1.0, 1.5, 2.5];
    let a = random_blob(&mut rng, d);
    let b = random_blob(&mut rng, d);
    // swap x and z
    let pd = [d[2], d[1], d[0]];
    let permute = |m: &[bool]| {
        let mut o = vec![false; m.len()];
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    o[z + pd[0] * (y + pd[1] * x)] = m[x + d[0] * (y + d[1] * z)];
                }
            }
        }
        o
    };
    let to_vol = |m: &[bool], dims, spacing| {
        LabelVolume::new(Grid::new(dims, spacing).unwrap(), 2, m.iter().map(|&v| v as u8).collect()).unwrap()
    };
    let orig = average_surface_distance(&to_vol(&a, d, sp), &to_vol(&b, d, sp), 1).unwrap().unwrap();
    let psp = [sp[2], sp[1], sp[0]];
    let perm =
        average_surface_distance(&to_vol(&permute(&a), pd, psp), &to_vol(&permute(&b), pd, psp), 1).unwrap().unwrap();
    assert!((orig - perm).abs() < 1e-9);
}
