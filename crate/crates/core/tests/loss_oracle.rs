use cascade_seg::losses::{
    foreground_loss, foreground_loss_with_grad, foreground_score, multiclass_dice_loss, multiclass_dice_loss_with_grad,
    soft_dice_per_class, LossConfig, ProbabilityField, RoiMode, SourceNet, Weighting,
};
use cascade_seg::volumes::one_hot_from_slice;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: [usize; 3] = [4, 3, 5];
const K: usize = 3;

fn idx(x: usize, y: usize, z: usize) -> usize {
    x + DIMS[0] * (y + DIMS[1] * z)
}

fn random_case(seed: u64) -> (Vec<u8>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = DIMS.iter().product::<usize>();
    let labels = (0..n).map(|_| rng.gen_range(0..K as u8)).collect();
    let logits = (0..n * K).map(|_| rng.gen_range(-3.0..3.0)).collect();
    (labels, logits)
}

/// Direct per-voxel evaluation of the smoothed Dice of one class.
fn oracle_dice(labels: &[u8], p: &ProbabilityField, c: usize, eps: f64) -> f64 {
    let n = labels.len();
    let (mut num, mut den) = (0.0, 0.0);
    for z in 0..DIMS[2] {
        for y in 0..DIMS[1] {
            for x in 0..DIMS[0] {
                let i = idx(x, y, z);
                let t = if labels[i] as usize == c { 1.0 } else { 0.0 };
                let pv = p.data()[c * n + i];
                num += t * pv;
                den += t + pv;
            }
        }
    }
    (2.0 * num + eps) / (den + eps)
}

fn oracle_roi(labels: &[u8], p: &ProbabilityField, eps: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for z in 0..DIMS[2] {
        for y in 0..DIMS[1] {
            for x in 0..DIMS[0] {
                let i = idx(x, y, z);
                let t0 = if labels[i] == 0 { 1.0 } else { 0.0 };
                let p0 = p.data()[i];
                num += (1.0 - t0) * (1.0 - p0);
                den += (1.0 - t0) + (1.0 - p0);
            }
        }
    }
    (2.0 * num + eps) / (den + eps)
}

fn oracle_multiclass(labels: &[u8], p: &ProbabilityField, cfg: &LossConfig) -> f64 {
    let counts: Vec<f64> = (0..K).map(|c| labels.iter().filter(|&&l| l as usize == c).count() as f64).collect();
    let present: Vec<usize> = (0..K).filter(|&c| counts[c] > 0.0).collect();
    let inv_total: f64 = present.iter().map(|&c| 1.0 / counts[c]).sum();
    let mut s = 0.0;
    for &c in &present {
        let w = match cfg.weighting {
            Weighting::Literal => 1.0 / counts[c],
            Weighting::Uniform => 1.0 / present.len() as f64,
            Weighting::NormalizedInverseCount => (1.0 / counts[c]) / inv_total,
        };
        s += w * oracle_dice(labels, p, c, cfg.epsilon);
    }
    1.0 - s
}

#[test]
fn losses_match_brute_force() {
    for seed in 0..20 {
        let (labels, logits) = random_case(seed);
        let t = one_hot_from_slice(&labels, DIMS, K).unwrap();
        let p = ProbabilityField::from_logits_f64(K, DIMS, &logits, SourceNet::Net1);
        for eps in [1e-6, 1.0, 3.0] {
            for weighting in [Weighting::Literal, Weighting::NormalizedInverseCount, Weighting::Uniform] {
                let cfg = LossConfig { epsilon: eps, weighting, roi_mode: RoiMode::Unit };
                let s = soft_dice_per_class(&p, &t, &cfg).unwrap();
                for (c, &sc) in s.iter().enumerate() {
                    assert!((sc - oracle_dice(&labels, &p, c, eps)).abs() < 1e-12);
                }
                let l = multiclass_dice_loss(&p, &t, &cfg).unwrap();
                assert!((l - oracle_multiclass(&labels, &p, &cfg)).abs() < 1e-12);
            }
            let cfg = LossConfig { epsilon: eps, ..LossConfig::default() };
            let roi = oracle_roi(&labels, &p, eps);
            assert!((foreground_score(&p, &t, &cfg).unwrap() - roi).abs() < 1e-12);
            assert!((foreground_loss(&p, &t, &cfg).unwrap() - (1.0 - roi)).abs() < 1e-12);
            let n0 = labels.iter().filter(|&&l| l == 0).count() as f64;
            let lit = LossConfig { roi_mode: RoiMode::Literal, ..cfg };
            assert!((foreground_loss(&p, &t, &lit).unwrap() - (1.0 - roi / n0)).abs() < 1e-12);
        }
    }
}

fn assert_close_rel(analytic: &[f64], numeric: &[f64]) {
    for (i, (&a, &b)) in analytic.iter().zip(numeric).enumerate() {
        let scale = a.abs().max(b.abs()).max(1e-7);
        assert!((a - b).abs() / scale < 1e-3, "component {i}: analytic {a} vs numeric {b}");
    }
}

/// Central differences of `f` with respect to every logit.
fn numeric_grad(logits: &[f64], f: impl Fn(&ProbabilityField) -> f64) -> Vec<f64> {
    let h = 1e-4;
    let mut g = vec![0.0; logits.len()];
    let mut l = logits.to_vec();
    for i in 0..logits.len() {
        l[i] = logits[i] + h;
        let up = f(&ProbabilityField::from_logits_f64(K, DIMS, &l, SourceNet::Net1));
        l[i] = logits[i] - h;
        let down = f(&ProbabilityField::from_logits_f64(K, DIMS, &l, SourceNet::Net1));
        l[i] = logits[i];
        g[i] = (up - down) / (2.0 * h);
    }
    g
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..4 {
        let (labels, logits) = random_case(100 + seed);
        let t = one_hot_from_slice(&labels, DIMS, K).unwrap();
        let p = ProbabilityField::from_logits_f64(K, DIMS, &logits, SourceNet::Net1);
        for weighting in [Weighting::Literal, Weighting::NormalizedInverseCount, Weighting::Uniform] {
            for roi_mode in [RoiMode::Unit, RoiMode::Literal] {
                let cfg = LossConfig { epsilon: 1.0, weighting, roi_mode };

                let (_, gp) = multiclass_dice_loss_with_grad(&p, &t, &cfg).unwrap();
                let analytic = p.softmax_backward(&gp);
                let numeric = numeric_grad(&logits, |q| multiclass_dice_loss(q, &t, &cfg).unwrap());
                assert_close_rel(&analytic, &numeric);

                let (_, gp) = foreground_loss_with_grad(&p, &t, &cfg).unwrap();
                let analytic = p.softmax_backward(&gp);
                let numeric = numeric_grad(&logits, |q| foreground_loss(q, &t, &cfg).unwrap());
                assert_close_rel(&analytic, &numeric);
            }
        }
    }
}
