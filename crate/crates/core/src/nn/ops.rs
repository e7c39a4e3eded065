use rand::Rng;

use super::tensor::Tensor;

pub fn relu_inplace(t: &mut Tensor) {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through a rectifier given its output.
pub fn relu_backward(output: &Tensor, grad: &mut Tensor) {
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
/// Returns the mask that was applied.
pub fn dropout_inplace<R: Rng>(t: &mut Tensor, rate: f32, rng: &mut R) -> Vec<f32> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask: Vec<f32> = (0..t.data().len()).map(|_| if rng.gen::<f32>() < keep { scale } else { 0.0 }).collect();
    for (v, m) in t.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    mask
}

pub fn apply_mask(grad: &mut Tensor, mask: &[f32]) {
    for (g, m) in grad.data_mut().iter_mut().zip(mask) {
        *g *= m;
    }
}

/// Non-overlapping max pooling. Returns the pooled map and, per output
/// element, the flat input index of the winning voxel.
pub fn max_pool(x: &Tensor, factor: [usize; 3]) -> (Tensor, Vec<u32>) {
    let [nx, ny, nz] = x.dims();
    let [fx, fy, fz] = factor;
    assert!(nx % fx == 0 && ny % fy == 0 && nz % fz == 0, "pooling needs divisible dims {:?}", x.dims());
    let od = [nx / fx, ny / fy, nz / fz];
    let mut out = Tensor::zeros(x.channels(), od);
    let mut arg = vec![0u32; out.data().len()];
    let n_in = x.spatial();
    let n_out = out.spatial();
    for c in 0..x.channels() {
        let src = x.channel(c);
        for oz in 0..od[2] {
            for oy in 0..od[1] {
                for ox in 0..od[0] {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0;
                    for kz in 0..fz {
                        for ky in 0..fy {
                            let row = (ox * fx) + nx * ((oy * fy + ky) + ny * (oz * fz + kz));
                            for kx in 0..fx {
                                let v = src[row + kx];
                                if v > best {
                                    best = v;
                                    best_i = row + kx;
                                }
                            }
                        }
                    }
                    let o = ox + od[0] * (oy + od[1] * oz);
                    out.channel_mut(c)[o] = best;
                    arg[c * n_out + o] = (c * n_in + best_i) as u32;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward(grad_out: &Tensor, argmax: &[u32], input_dims: [usize; 3]) -> Tensor {
    let mut gx = Tensor::zeros(grad_out.channels(), input_dims);
    let data = gx.data_mut();
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        data[i as usize] += g;
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pool_picks_max_and_routes_gradient() {
        let data: Vec<f32> = (0..16).map(|i| ((i * 7) % 16) as f32).collect();
        let x = Tensor::from_vec(1, [4, 2, 2], data);
        let (y, arg) = max_pool(&x, [2, 2, 1]);
        assert_eq!(y.dims(), [2, 1, 2]);
        for (o, &i) in arg.iter().enumerate() {
            assert_eq!(y.data()[o], x.data()[i as usize]);
        }
        let g = Tensor::from_vec(1, [2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let gx = max_pool_backward(&g, &arg, x.dims());
        assert_eq!(gx.data().iter().sum::<f32>(), 10.0);
        assert_eq!(gx.data().iter().filter(|&&v| v != 0.0).count(), 4);
    }

    #[test]
    fn dropout_rate_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tensor::from_vec(1, [100, 100, 1], vec![1.0; 10_000]);
        let mask = dropout_inplace(&mut t, 0.2, &mut rng);
        let dropped = mask.iter().filter(|&&m| m == 0.0).count();
        assert!((1700..2300).contains(&dropped), "{dropped}");
        assert!(t.data().iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-6));
    }
}
