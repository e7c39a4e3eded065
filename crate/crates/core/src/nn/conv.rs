//! Stride-1 dilated 3D convolution via chunked im2col + sgemm, and the
//! non-overlapping transposed convolution used for upsampling.
//!
//! Taps that can never touch the input (a large dilation on a small grid)
//! are dropped from the column matrix, so deep dilated layers cost only what
//! they actually read.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;

/// Upper bound on the number of floats in one im2col chunk.
const COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub dilation: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvSpec {
    /// Shape-preserving ("same") zero padding.
    pub fn same(in_channels: usize, out_channels: usize, kernel: [usize; 3], dilation: [usize; 3]) -> Self {
        let padding = [0, 1, 2].map(|a| dilation[a] * (kernel[a] - 1) / 2);
        Self { in_channels, out_channels, kernel, dilation, padding }
    }

    pub fn valid(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        Self { in_channels, out_channels, kernel, dilation: [1; 3], padding: [0; 3] }
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let span = self.dilation[a] * (self.kernel[a] - 1);
            let padded = input[a] + 2 * self.padding[a];
            if padded <= span {
                return None;
            }
            out[a] = padded - span;
        }
        Some(out)
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
    rsc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every caller passes slices whose extents cover the strided
    // m×k, k×n and m×n views described by the strides.
    unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, 1);
    }
}

/// One kernel tap that reaches the input somewhere.
#[derive(Debug, Clone, Copy)]
struct Tap {
    index: usize,
    offset: [isize; 3],
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub spec: ConvSpec,
    weight: ParamId,
    bias: ParamId,
}

impl Conv3d {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut R) -> Self {
        let fan_in = spec.in_channels * spec.taps();
        let weight = store.add_he_normal(
            format!("{name}.weight"),
            vec![spec.out_channels, spec.in_channels, spec.kernel[2], spec.kernel[1], spec.kernel[0]],
            fan_in,
            rng,
        );
        let bias = store.add_zeros(format!("{name}.bias"), vec![spec.out_channels]);
        Self { spec, weight, bias }
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    fn active_taps(&self, in_dims: [usize; 3], out_dims: [usize; 3]) -> Vec<Tap> {
        let s = &self.spec;
        let axis_offsets = |a: usize| -> Vec<(usize, isize)> {
            (0..s.kernel[a])
                .map(|k| (k, (k * s.dilation[a]) as isize - s.padding[a] as isize))
                .filter(|&(_, off)| off > -(out_dims[a] as isize) && off < in_dims[a] as isize)
                .collect()
        };
        let (ox, oy, oz) = (axis_offsets(0), axis_offsets(1), axis_offsets(2));
        let mut taps = Vec::with_capacity(ox.len() * oy.len() * oz.len());
        for &(kz, dz) in &oz {
            for &(ky, dy) in &oy {
                for &(kx, dx) in &ox {
                    let index = kx + s.kernel[0] * (ky + s.kernel[1] * kz);
                    taps.push(Tap { index, offset: [dx, dy, dz] });
                }
            }
        }
        taps
    }

    /// Weight sub-matrix `[out × (in · active)]` for the active taps.
    fn gather_weights(&self, store: &ParamStore, taps: &[Tap]) -> Vec<f32> {
        let w = store.get(self.weight);
        let (ci_n, co_n, t_n) = (self.spec.in_channels, self.spec.out_channels, self.spec.taps());
        let r = ci_n * taps.len();
        let mut out = vec![0.0; co_n * r];
        for co in 0..co_n {
            for ci in 0..ci_n {
                for (ti, tap) in taps.iter().enumerate() {
                    out[co * r + ci * taps.len() + ti] = w[(co * ci_n + ci) * t_n + tap.index];
                }
            }
        }
        out
    }

    fn planes_per_chunk(rows: usize, plane: usize, nz: usize) -> usize {
        (COL_BUDGET / (rows * plane).max(1)).clamp(1, nz)
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let s = &self.spec;
        assert_eq!(x.channels(), s.in_channels, "conv input channels");
        let in_dims = x.dims();
        let out_dims = s.output_dims(in_dims).expect("conv input smaller than kernel span");
        let taps = self.active_taps(in_dims, out_dims);
        let rows = s.in_channels * taps.len();
        let wa = self.gather_weights(store, &taps);
        let bias = store.get(self.bias);

        let mut out = Tensor::zeros(s.out_channels, out_dims);
        let positions = out.spatial();
        for (co, &b) in bias.iter().enumerate().take(s.out_channels) {
            out.channel_mut(co).fill(b);
        }
        let plane = out_dims[0] * out_dims[1];
        let chunk_planes = Self::planes_per_chunk(rows, plane, out_dims[2]);
        let mut col = vec![0.0f32; rows * plane * chunk_planes];
        let mut z0 = 0;
        while z0 < out_dims[2] {
            let nzc = chunk_planes.min(out_dims[2] - z0);
            let n = plane * nzc;
            im2col(x, &taps, out_dims, z0, nzc, &mut col[..rows * n]);
            let c_off = z0 * plane;
            sgemm(
                s.out_channels,
                rows,
                n,
                &wa,
                (rows as isize, 1),
                &col[..rows * n],
                (n as isize, 1),
                1.0,
                &mut out.data_mut()[c_off..],
                positions as isize,
            );
            z0 += nzc;
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to `x` when `input_grad` is set.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        grad_out: &Tensor,
        grads: &mut Gradients,
        input_grad: bool,
    ) -> Option<Tensor> {
        let s = &self.spec;
        let in_dims = x.dims();
        let out_dims = grad_out.dims();
        let taps = self.active_taps(in_dims, out_dims);
        let rows = s.in_channels * taps.len();
        let wa = self.gather_weights(store, &taps);
        let positions = grad_out.spatial();

        {
            let gb = grads.get_mut(self.bias);
            for (co, g) in gb.iter_mut().enumerate().take(s.out_channels) {
                *g += grad_out.channel(co).iter().sum::<f32>();
            }
        }

        let plane = out_dims[0] * out_dims[1];
        let chunk_planes = Self::planes_per_chunk(rows, plane, out_dims[2]);
        let mut col = vec![0.0f32; rows * plane * chunk_planes];
        let mut gcol = if input_grad { vec![0.0f32; rows * plane * chunk_planes] } else { Vec::new() };
        let mut gwa = vec![0.0f32; s.out_channels * rows];
        let mut gx = input_grad.then(|| Tensor::zeros(s.in_channels, in_dims));

        let mut z0 = 0;
        while z0 < out_dims[2] {
            let nzc = chunk_planes.min(out_dims[2] - z0);
            let n = plane * nzc;
            let g_off = z0 * plane;
            im2col(x, &taps, out_dims, z0, nzc, &mut col[..rows * n]);
            // gW += gOut · colᵀ
            sgemm(
                s.out_channels,
                n,
                rows,
                &grad_out.data()[g_off..],
                (positions as isize, 1),
                &col[..rows * n],
                (1, n as isize),
                1.0,
                &mut gwa,
                rows as isize,
            );
            if let Some(gx) = gx.as_mut() {
                // gCol = Wᵀ · gOut
                sgemm(
                    rows,
                    s.out_channels,
                    n,
                    &wa,
                    (1, rows as isize),
                    &grad_out.data()[g_off..],
                    (positions as isize, 1),
                    0.0,
                    &mut gcol[..rows * n],
                    n as isize,
                );
                col2im(&gcol[..rows * n], &taps, out_dims, z0, nzc, gx);
            }
            z0 += nzc;
        }

        let gw = grads.get_mut(self.weight);
        let (ci_n, t_n) = (s.in_channels, s.taps());
        for co in 0..s.out_channels {
            for ci in 0..ci_n {
                for (ti, tap) in taps.iter().enumerate() {
                    gw[(co * ci_n + ci) * t_n + tap.index] += gwa[co * rows + ci * taps.len() + ti];
                }
            }
        }
        gx
    }
}

/// Valid x-range `[lo, hi)` of output columns whose shifted input index
/// `x + off` lies in `[0, n_in)`.
#[inline]
fn valid_range(off: isize, n_out: usize, n_in: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n_in as isize - off).min(n_out as isize).max(0) as usize;
    (lo.min(hi), hi)
}

fn im2col(x: &Tensor, taps: &[Tap], out_dims: [usize; 3], z0: usize, nzc: usize, col: &mut [f32]) {
    let [nx, ny, nz] = x.dims();
    let [ox, oy, _] = out_dims;
    let n = ox * oy * nzc;
    let in_plane = nx * ny;
    for ci in 0..x.channels() {
        let src = x.channel(ci);
        for (ti, tap) in taps.iter().enumerate() {
            let row = &mut col[(ci * taps.len() + ti) * n..][..n];
            let [dx, dy, dz] = tap.offset;
            let (xlo, xhi) = valid_range(dx, ox, nx);
            for lz in 0..nzc {
                let iz = (z0 + lz) as isize + dz;
                let dst_plane = &mut row[lz * ox * oy..][..ox * oy];
                if iz < 0 || iz >= nz as isize {
                    dst_plane.fill(0.0);
                    continue;
                }
                let zbase = iz as usize * in_plane;
                for y in 0..oy {
                    let dst = &mut dst_plane[y * ox..][..ox];
                    let iy = y as isize + dy;
                    if iy < 0 || iy >= ny as isize || xlo >= xhi {
                        dst.fill(0.0);
                        continue;
                    }
                    dst[..xlo].fill(0.0);
                    dst[xhi..].fill(0.0);
                    let sbase = zbase + iy as usize * nx;
                    let s0 = (sbase as isize + xlo as isize + dx) as usize;
                    dst[xlo..xhi].copy_from_slice(&src[s0..s0 + (xhi - xlo)]);
                }
            }
        }
    }
}

fn col2im(gcol: &[f32], taps: &[Tap], out_dims: [usize; 3], z0: usize, nzc: usize, gx: &mut Tensor) {
    let [nx, ny, nz] = gx.dims();
    let [ox, oy, _] = out_dims;
    let n = ox * oy * nzc;
    let in_plane = nx * ny;
    for ci in 0..gx.channels() {
        let dst_ch = gx.channel_mut(ci);
        for (ti, tap) in taps.iter().enumerate() {
            let row = &gcol[(ci * taps.len() + ti) * n..][..n];
            let [dx, dy, dz] = tap.offset;
            let (xlo, xhi) = valid_range(dx, ox, nx);
            if xlo >= xhi {
                continue;
            }
            for lz in 0..nzc {
                let iz = (z0 + lz) as isize + dz;
                if iz < 0 || iz >= nz as isize {
                    continue;
                }
                let zbase = iz as usize * in_plane;
                for y in 0..oy {
                    let iy = y as isize + dy;
                    if iy < 0 || iy >= ny as isize {
                        continue;
                    }
                    let src = &row[lz * ox * oy + y * ox..][xlo..xhi];
                    let d0 = (zbase as isize + iy * nx as isize + xlo as isize + dx) as usize;
                    for (d, s) in dst_ch[d0..d0 + src.len()].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Transposed convolution whose kernel equals its stride, so every output
/// voxel receives exactly one tap.
#[derive(Debug, Clone)]
pub struct Upsample {
    pub in_channels: usize,
    pub out_channels: usize,
    pub factor: [usize; 3],
    weight: ParamId,
    bias: ParamId,
}

impl Upsample {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        factor: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let taps: usize = factor.iter().product();
        let weight =
            store.add_he_normal(format!("{name}.weight"), vec![taps, out_channels, in_channels], in_channels, rng);
        let bias = store.add_zeros(format!("{name}.bias"), vec![out_channels]);
        Self { in_channels, out_channels, factor, weight, bias }
    }

    pub fn output_dims(&self, input: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| input[a] * self.factor[a])
    }

    fn taps(&self) -> impl Iterator<Item = (usize, [usize; 3])> + '_ {
        let [fx, fy, fz] = self.factor;
        (0..fz).flat_map(move |k| (0..fy).flat_map(move |j| (0..fx).map(move |i| (i + fx * (j + fy * k), [i, j, k]))))
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        assert_eq!(x.channels(), self.in_channels);
        let in_dims = x.dims();
        let out_dims = self.output_dims(in_dims);
        let n_in = x.spatial();
        let w = store.get(self.weight);
        let bias = store.get(self.bias);
        let (ci, co) = (self.in_channels, self.out_channels);
        let mut out = Tensor::zeros(co, out_dims);
        let mut tmp = vec![0.0f32; co * n_in];
        for (t, shift) in self.taps() {
            sgemm(
                co,
                ci,
                n_in,
                &w[t * co * ci..],
                (ci as isize, 1),
                x.data(),
                (n_in as isize, 1),
                0.0,
                &mut tmp,
                n_in as isize,
            );
            for c in 0..co {
                scatter_tap(&tmp[c * n_in..][..n_in], in_dims, self.factor, shift, out.channel_mut(c), bias[c]);
            }
        }
        out
    }

    pub fn backward(&self, store: &ParamStore, x: &Tensor, grad_out: &Tensor, grads: &mut Gradients) -> Tensor {
        let in_dims = x.dims();
        let n_in = x.spatial();
        let (ci, co) = (self.in_channels, self.out_channels);
        let w = store.get(self.weight);
        {
            let gb = grads.get_mut(self.bias);
            for (c, g) in gb.iter_mut().enumerate().take(co) {
                *g += grad_out.channel(c).iter().sum::<f32>();
            }
        }
        let mut gx = Tensor::zeros(ci, in_dims);
        let mut g_tap = vec![0.0f32; co * n_in];
        let taps: Vec<_> = self.taps().collect();
        for (t, shift) in taps {
            for c in 0..co {
                gather_tap(grad_out.channel(c), in_dims, self.factor, shift, &mut g_tap[c * n_in..][..n_in]);
            }
            // gW_t += g_tap · xᵀ
            let gw = grads.get_mut(self.weight);
            sgemm(
                co,
                n_in,
                ci,
                &g_tap,
                (n_in as isize, 1),
                x.data(),
                (1, n_in as isize),
                1.0,
                &mut gw[t * co * ci..],
                ci as isize,
            );
            // gx += W_tᵀ · g_tap
            sgemm(
                ci,
                co,
                n_in,
                &w[t * co * ci..],
                (1, ci as isize),
                &g_tap,
                (n_in as isize, 1),
                1.0,
                gx.data_mut(),
                n_in as isize,
            );
        }
        gx
    }
}

fn scatter_tap(src: &[f32], in_dims: [usize; 3], f: [usize; 3], shift: [usize; 3], dst: &mut [f32], bias: f32) {
    let [nx, ny, nz] = in_dims;
    let (ox, oy) = (nx * f[0], ny * f[1]);
    for z in 0..nz {
        for y in 0..ny {
            let row = (z * f[2] + shift[2]) * ox * oy + (y * f[1] + shift[1]) * ox + shift[0];
            let s = &src[(z * ny + y) * nx..][..nx];
            for (x, v) in s.iter().enumerate() {
                dst[row + x * f[0]] = v + bias;
            }
        }
    }
}

fn gather_tap(src: &[f32], in_dims: [usize; 3], f: [usize; 3], shift: [usize; 3], dst: &mut [f32]) {
    let [nx, ny, nz] = in_dims;
    let (ox, oy) = (nx * f[0], ny * f[1]);
    for z in 0..nz {
        for y in 0..ny {
            let row = (z * f[2] + shift[2]) * ox * oy + (y * f[1] + shift[1]) * ox + shift[0];
            let d = &mut dst[(z * ny + y) * nx..][..nx];
            for (x, v) in d.iter_mut().enumerate() {
                *v = src[row + x * f[0]];
            }
        }
    }
}
