//! Net1 (dilated volumetric encoder-decoder), Net2 (K-slice to one-slice
//! classifier) and the dynamic-tile ROI layer between them.

mod unet;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ProbabilityField, SourceNet};
use crate::nn::{Gradients, ParamStore, Tensor};
use crate::volumes::IndexBox;

pub use unet::{LayerInfo, LayerKind, Trace};
use unet::{UNet, UNetLayout};

/// Spatial divisor required of network inputs in-plane.
pub const INPLANE_DIVISOR: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Net1Config {
    pub blocks_per_path: usize,
    pub kernel: [usize; 3],
    pub pool: [usize; 3],
    pub base_width: usize,
    pub dropout_rate: f32,
    pub num_classes: usize,
}

impl Default for Net1Config {
    fn default() -> Self {
        Self { blocks_per_path: 4, kernel: [5; 3], pool: [2; 3], base_width: 8, dropout_rate: 0.2, num_classes: 4 }
    }
}

impl Net1Config {
    /// Dilation `2n` at contracting block `n` (1-based).
    pub fn dilation_contracting(&self) -> Vec<usize> {
        (1..=self.blocks_per_path).map(|n| 2 * n).collect()
    }

    /// Contracting schedule reversed, listed in decoding order.
    pub fn dilation_expansive(&self) -> Vec<usize> {
        self.dilation_contracting().into_iter().rev().collect()
    }

    pub fn validate(&self) -> Result<()> {
        common_checks("net1", self.blocks_per_path, self.base_width, self.num_classes, self.pool)?;
        if self.kernel.iter().any(|&k| k % 2 == 0) {
            return Err(Error::InvalidConfig(format!("net1 kernel must be odd, got {:?}", self.kernel)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "net1 dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    fn layout(&self) -> UNetLayout {
        let widths = widths(self.base_width, self.blocks_per_path);
        let mut dec = self.dilation_contracting();
        dec.truncate(self.blocks_per_path);
        UNetLayout {
            in_channels: 1,
            num_classes: self.num_classes,
            bottleneck_width: self.base_width << self.blocks_per_path,
            widths,
            enc_kernel: self.kernel,
            enc_dilations: self.dilation_contracting(),
            dec_kernel: self.kernel,
            // decoder block i sits at the depth of encoder block i
            dec_dilations: dec,
            bottleneck_kernel: self.kernel,
            pool: self.pool,
            collapse: None,
            dropout: self.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Net2Config {
    pub blocks_per_path: usize,
    pub kernel_contracting: [usize; 3],
    /// In-plane kernel of the expansive path.
    pub kernel_expansive_2d: [usize; 2],
    pub pool: [usize; 3],
    /// Slice-neighbourhood size K.
    pub k_slices: usize,
    pub base_width: usize,
    pub num_classes: usize,
}

impl Default for Net2Config {
    fn default() -> Self {
        Self {
            blocks_per_path: 4,
            kernel_contracting: [3; 3],
            kernel_expansive_2d: [5, 5],
            pool: [2, 2, 1],
            k_slices: 9,
            base_width: 8,
            num_classes: 4,
        }
    }
}

impl Net2Config {
    pub const INPUT_CHANNELS: usize = 2;

    pub fn validate(&self) -> Result<()> {
        common_checks("net2", self.blocks_per_path, self.base_width, self.num_classes, self.pool)?;
        if self.k_slices.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("K must be odd, got {}", self.k_slices)));
        }
        if self.pool[2] != 1 {
            return Err(Error::InvalidConfig("net2 pooling must keep z".into()));
        }
        if self.kernel_contracting.iter().chain(&self.kernel_expansive_2d).any(|&k| k % 2 == 0) {
            return Err(Error::InvalidConfig("net2 kernels must be odd".into()));
        }
        Ok(())
    }

    fn layout(&self) -> UNetLayout {
        let [kx, ky] = self.kernel_expansive_2d;
        UNetLayout {
            in_channels: Self::INPUT_CHANNELS,
            num_classes: self.num_classes,
            widths: widths(self.base_width, self.blocks_per_path),
            bottleneck_width: self.base_width << self.blocks_per_path,
            enc_kernel: self.kernel_contracting,
            enc_dilations: vec![1; self.blocks_per_path],
            dec_kernel: [kx, ky, 1],
            dec_dilations: vec![1; self.blocks_per_path],
            bottleneck_kernel: self.kernel_contracting,
            pool: self.pool,
            collapse: Some(self.k_slices),
            dropout: 0.0,
        }
    }
}

fn widths(base: usize, levels: usize) -> Vec<usize> {
    (0..levels).map(|i| base << i).collect()
}

fn common_checks(net: &str, blocks: usize, width: usize, classes: usize, pool: [usize; 3]) -> Result<()> {
    if blocks == 0 || blocks > 6 {
        return Err(Error::InvalidConfig(format!("{net} blocks_per_path must be 1..=6, got {blocks}")));
    }
    if width == 0 {
        return Err(Error::InvalidConfig(format!("{net} base_width must be positive")));
    }
    if !(2..=255).contains(&classes) {
        return Err(Error::InvalidConfig(format!("{net} num_classes must be 2..=255, got {classes}")));
    }
    if pool.contains(&0) {
        return Err(Error::InvalidConfig(format!("{net} pool factors must be positive")));
    }
    Ok(())
}

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_divisible(x: &Tensor, divisor: [usize; 3]) -> Result<()> {
    let dims = x.dims();
    if (0..3).any(|a| !dims[a].is_multiple_of(divisor[a])) {
        return Err(Error::InvalidInput { dims, reason: format!("spatial dims must be divisible by {divisor:?}") });
    }
    Ok(())
}

/// Coarse localisation network.
#[derive(Debug, Clone)]
pub struct Net1 {
    cfg: Net1Config,
    params: ParamStore,
    net: UNet,
}

impl Net1 {
    pub fn new(cfg: Net1Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let net = UNet::new(&mut params, "net1", &cfg.layout(), &mut init_rng(seed, 11));
        Ok(Self { cfg, params, net })
    }

    pub fn config(&self) -> &Net1Config {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn divisor(&self) -> [usize; 3] {
        self.net.divisor()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.channels() != 1 {
            return Err(Error::InvalidInput {
                dims: x.dims(),
                reason: format!("net1 takes 1 channel, got {}", x.channels()),
            });
        }
        check_divisible(x, self.divisor())
    }

    /// Training-mode forward pass with dropout drawn from `rng`.
    pub fn forward_train(&self, x: Tensor, rng: &mut ChaCha8Rng) -> Result<(Tensor, Trace)> {
        self.check(&x)?;
        Ok(self.net.forward(&self.params, x, Some(rng)))
    }

    pub fn forward(&self, x: Tensor) -> Result<(Tensor, Trace)> {
        self.check(&x)?;
        Ok(self.net.forward::<ChaCha8Rng>(&self.params, x, None))
    }

    pub fn backward(&self, trace: &Trace, grad_logits: &Tensor, grads: &mut Gradients) {
        self.net.backward(&self.params, trace, grad_logits, grads);
    }

    pub fn predict_proba(&self, x: Tensor) -> Result<ProbabilityField> {
        let (logits, _) = self.forward(x)?;
        Ok(ProbabilityField::from_logits(&logits, SourceNet::Net1))
    }

    pub fn describe(&self) -> Vec<LayerInfo> {
        self.net.describe("net1")
    }
}

/// Slice classifier: a `(2, X, Y, Z)` input gives `Z - K + 1` labelled slices.
#[derive(Debug, Clone)]
pub struct Net2 {
    cfg: Net2Config,
    params: ParamStore,
    net: UNet,
}

impl Net2 {
    pub fn new(cfg: Net2Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let net = UNet::new(&mut params, "net2", &cfg.layout(), &mut init_rng(seed, 12));
        Ok(Self { cfg, params, net })
    }

    pub fn config(&self) -> &Net2Config {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn output_depth(&self, z_in: usize) -> Option<usize> {
        (z_in >= self.cfg.k_slices).then(|| z_in + 1 - self.cfg.k_slices)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        if x.channels() != Net2Config::INPUT_CHANNELS {
            return Err(Error::InvalidInput { dims, reason: format!("net2 takes 2 channels, got {}", x.channels()) });
        }
        if dims[2] < self.cfg.k_slices {
            return Err(Error::InvalidInput { dims, reason: format!("depth below K = {}", self.cfg.k_slices) });
        }
        check_divisible(x, self.net.divisor())
    }

    pub fn forward(&self, x: Tensor) -> Result<(Tensor, Trace)> {
        self.check(&x)?;
        Ok(self.net.forward::<ChaCha8Rng>(&self.params, x, None))
    }

    pub fn backward(&self, trace: &Trace, grad_logits: &Tensor, grads: &mut Gradients) {
        self.net.backward(&self.params, trace, grad_logits, grads);
    }

    pub fn predict_proba(&self, x: Tensor) -> Result<ProbabilityField> {
        let (logits, _) = self.forward(x)?;
        Ok(ProbabilityField::from_logits(&logits, SourceNet::Net2))
    }

    pub fn describe(&self) -> Vec<LayerInfo> {
        self.net.describe("net2")
    }
}

/// Stacks intensity and the Net1 label map scaled to `[0, 1]` by `1 / C`.
pub fn compose_net2_input(intensity: &[f32], p1: &ProbabilityField) -> Result<Tensor> {
    if intensity.len() != p1.voxels() {
        return Err(Error::ShapeMismatch(format!("{} intensities vs {:?} probabilities", intensity.len(), p1.dims())));
    }
    compose_from_labels(intensity, &p1.argmax(), p1.dims(), p1.num_classes())
}

/// As [`compose_net2_input`] from an already-decided label map.
pub fn compose_from_labels(intensity: &[f32], labels: &[u8], dims: [usize; 3], num_classes: usize) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    if intensity.len() != n || labels.len() != n {
        return Err(Error::ShapeMismatch(format!("inputs do not match grid {dims:?}")));
    }
    let scale = 1.0 / (num_classes.max(2) - 1) as f32;
    let mut data = Vec::with_capacity(2 * n);
    data.extend_from_slice(intensity);
    data.extend(labels.iter().map(|&l| l as f32 * scale));
    Ok(Tensor::from_vec(2, dims, data))
}

/// Region handed from Net1 to Net2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub bbox: IndexBox,
    pub margin_vox: usize,
    /// True when no foreground was found and the whole volume is used.
    pub fallback: bool,
}

/// Bounding box of predicted foreground, grown by `margin_vox`, clamped to
/// the volume, with in-plane extents rounded up to multiples of 16.
pub fn dynamic_tile(p1: &ProbabilityField, margin_vox: usize, volume_shape: [usize; 3]) -> Result<RoiBox> {
    if p1.dims() != volume_shape {
        return Err(Error::ShapeMismatch(format!("probabilities {:?} vs volume {volume_shape:?}", p1.dims())));
    }
    let labels = p1.argmax();
    let [nx, ny, _] = volume_shape;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l > 0) {
        let c = [i % nx, (i / nx) % ny, i / (nx * ny)];
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a] + 1);
        }
        any = true;
    }
    if !any {
        return Ok(RoiBox { bbox: IndexBox::full(volume_shape), margin_vox, fallback: true });
    }
    let mut blo = [0isize; 3];
    let mut bhi = [0isize; 3];
    for a in 0..3 {
        let n = volume_shape[a];
        let mut l = lo[a].saturating_sub(margin_vox);
        let mut h = (hi[a] + margin_vox).min(n);
        if a < 2 {
            let want = (h - l).div_ceil(INPLANE_DIVISOR) * INPLANE_DIVISOR;
            if want >= n {
                (l, h) = (0, n);
            } else {
                h = l + want;
                if h > n {
                    l -= h - n;
                    h = n;
                }
            }
        }
        blo[a] = l as isize;
        bhi[a] = h as isize;
    }
    Ok(RoiBox { bbox: IndexBox::new(blo, bhi), margin_vox, fallback: false })
}

pub fn conv_layer_count(layers: &[LayerInfo]) -> usize {
    layers.iter().filter(|l| l.kind != LayerKind::MaxPool).count()
}

/// Plain-text layer table with parameter and convolution-layer totals.
pub fn summary(net1: &Net1, net2: &Net2) -> String {
    let mut s = String::new();
    for (title, layers, params) in
        [("Net1", net1.describe(), net1.params().num_scalars()), ("Net2", net2.describe(), net2.params().num_scalars())]
    {
        let _ = writeln!(s, "{title}");
        let _ = writeln!(
            s,
            "{:<22} {:<15} {:>5} {:>5} {:<9} {:<9} {:>9}",
            "layer", "kind", "in", "out", "kernel", "dilation", "params"
        );
        for l in &layers {
            let k = format!("{}x{}x{}", l.kernel[0], l.kernel[1], l.kernel[2]);
            let d = format!("{}x{}x{}", l.dilation[0], l.dilation[1], l.dilation[2]);
            let _ = writeln!(
                s,
                "{:<22} {:<15} {:>5} {:>5} {:<9} {:<9} {:>9}",
                l.name,
                format!("{:?}", l.kind),
                l.in_channels,
                l.out_channels,
                k,
                d,
                l.parameters
            );
        }
        let _ = writeln!(s, "convolution layers: {}", conv_layer_count(&layers));
        let _ = writeln!(s, "parameters: {params}\n");
    }
    s
}
