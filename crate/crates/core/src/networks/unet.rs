//! Shared encoder-decoder skeleton with cached activations for backward.

use rand::Rng;
use serde::Serialize;

use crate::nn::{
    apply_mask, dropout_inplace, max_pool, max_pool_backward, relu_backward, relu_inplace, Conv3d, ConvSpec, Gradients,
    ParamStore, Tensor, Upsample,
};

/// Two rectified convolutions followed by optional dropout.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    convs: [Conv3d; 2],
}

#[derive(Debug, Clone)]
struct BlockTrace {
    input: Tensor,
    h1: Tensor,
    h2: Tensor,
    mask: Option<Vec<f32>>,
}

impl Block {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, specs: [ConvSpec; 2], rng: &mut R) -> Self {
        Self {
            convs: [
                Conv3d::new(store, &format!("{name}.conv1"), specs[0], rng),
                Conv3d::new(store, &format!("{name}.conv2"), specs[1], rng),
            ],
        }
    }

    fn forward<R: Rng>(&self, store: &ParamStore, x: Tensor, dropout: Option<(f32, &mut R)>) -> (Tensor, BlockTrace) {
        let mut h1 = self.convs[0].forward(store, &x);
        relu_inplace(&mut h1);
        let mut h2 = self.convs[1].forward(store, &h1);
        relu_inplace(&mut h2);
        let mut out = h2.clone();
        let mask = dropout.filter(|(rate, _)| *rate > 0.0).map(|(rate, rng)| dropout_inplace(&mut out, rate, rng));
        (out, BlockTrace { input: x, h1, h2, mask })
    }

    fn backward(
        &self,
        store: &ParamStore,
        t: &BlockTrace,
        mut g: Tensor,
        grads: &mut Gradients,
        input_grad: bool,
    ) -> Option<Tensor> {
        if let Some(mask) = &t.mask {
            apply_mask(&mut g, mask);
        }
        relu_backward(&t.h2, &mut g);
        let mut g1 = self.convs[1].backward(store, &t.h1, &g, grads, true).expect("requested input gradient");
        relu_backward(&t.h1, &mut g1);
        self.convs[0].backward(store, &t.input, &g1, grads, input_grad)
    }

    fn specs(&self) -> [ConvSpec; 2] {
        [self.convs[0].spec, self.convs[1].spec]
    }
}

/// Layer layout of a [`UNet`]: per-level convolution specs and the
/// geometry of pooling, slice collapse and skip cropping.
#[derive(Debug, Clone)]
pub(crate) struct UNetLayout {
    pub in_channels: usize,
    pub num_classes: usize,
    pub widths: Vec<usize>,
    pub bottleneck_width: usize,
    pub enc_kernel: [usize; 3],
    pub enc_dilations: Vec<usize>,
    pub dec_kernel: [usize; 3],
    /// Dilation of decoder block `i`, listed from the shallowest level.
    pub dec_dilations: Vec<usize>,
    pub bottleneck_kernel: [usize; 3],
    pub pool: [usize; 3],
    /// z extent of a valid collapse convolution after the bottleneck.
    pub collapse: Option<usize>,
    pub dropout: f32,
}

#[derive(Debug, Clone)]
pub(crate) struct UNet {
    enc: Vec<Block>,
    bottleneck: Block,
    collapse: Option<Conv3d>,
    ups: Vec<Upsample>,
    dec: Vec<Block>,
    head: Conv3d,
    pool: [usize; 3],
    dropout: f32,
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    enc: Vec<BlockTrace>,
    enc_out: Vec<Tensor>,
    pool_arg: Vec<Vec<u32>>,
    bottleneck: BlockTrace,
    bottleneck_out: Tensor,
    collapsed: Option<Tensor>,
    up_in: Vec<Tensor>,
    dec: Vec<BlockTrace>,
    head_in: Tensor,
    z_crop: usize,
}

/// One row of a model summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub dilation: [usize; 3],
    pub parameters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LayerKind {
    Conv,
    TransposedConv,
    MaxPool,
}

impl UNet {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, l: &UNetLayout, rng: &mut R) -> Self {
        let levels = l.widths.len();
        let mut enc = Vec::with_capacity(levels);
        let mut c_in = l.in_channels;
        for i in 0..levels {
            let dil = [0, 1, 2].map(|a| if l.enc_kernel[a] > 1 { l.enc_dilations[i] } else { 1 });
            let w = l.widths[i];
            enc.push(Block::new(
                store,
                &format!("{prefix}.enc{}", i + 1),
                [ConvSpec::same(c_in, w, l.enc_kernel, dil), ConvSpec::same(w, w, l.enc_kernel, dil)],
                rng,
            ));
            c_in = w;
        }
        let bw = l.bottleneck_width;
        let bottleneck = Block::new(
            store,
            &format!("{prefix}.bottleneck"),
            [
                ConvSpec::same(c_in, bw, l.bottleneck_kernel, [1; 3]),
                ConvSpec::same(bw, bw, l.bottleneck_kernel, [1; 3]),
            ],
            rng,
        );
        let collapse = l
            .collapse
            .map(|k| Conv3d::new(store, &format!("{prefix}.collapse"), ConvSpec::valid(bw, bw, [1, 1, k]), rng));
        let mut ups = Vec::with_capacity(levels);
        let mut dec = Vec::with_capacity(levels);
        for i in 0..levels {
            let below = if i + 1 == levels { bw } else { l.widths[i + 1] };
            let w = l.widths[i];
            let dil = [0, 1, 2].map(|a| if l.dec_kernel[a] > 1 { l.dec_dilations[i] } else { 1 });
            ups.push(Upsample::new(store, &format!("{prefix}.up{}", i + 1), below, w, l.pool, rng));
            dec.push(Block::new(
                store,
                &format!("{prefix}.dec{}", i + 1),
                [ConvSpec::same(2 * w, w, l.dec_kernel, dil), ConvSpec::same(w, w, l.dec_kernel, dil)],
                rng,
            ));
        }
        let head = Conv3d::new(
            store,
            &format!("{prefix}.head"),
            ConvSpec::same(l.widths[0], l.num_classes, [1; 3], [1; 3]),
            rng,
        );
        Self { enc, bottleneck, collapse, ups, dec, head, pool: l.pool, dropout: l.dropout }
    }

    pub fn levels(&self) -> usize {
        self.enc.len()
    }

    /// Spatial divisor the input must satisfy per axis.
    pub fn divisor(&self) -> [usize; 3] {
        self.pool.map(|p| p.pow(self.levels() as u32))
    }

    /// Reduction of z by the collapse convolution.
    pub fn z_reduction(&self) -> usize {
        self.collapse.as_ref().map_or(0, |c| c.spec.kernel[2] - 1)
    }

    /// Logits and the activations needed by [`UNet::backward`]. Dropout is
    /// active only when an RNG is supplied.
    pub fn forward<R: Rng>(&self, store: &ParamStore, x: Tensor, mut rng: Option<&mut R>) -> (Tensor, Trace) {
        let levels = self.levels();
        let mut enc_t = Vec::with_capacity(levels);
        let mut enc_out = Vec::with_capacity(levels);
        let mut pool_arg = Vec::with_capacity(levels);
        let mut h = x;
        for block in &self.enc {
            let (out, t) = block.forward(store, h, rng.as_deref_mut().map(|r| (self.dropout, r)));
            let (pooled, arg) = max_pool(&out, self.pool);
            enc_t.push(t);
            enc_out.push(out);
            pool_arg.push(arg);
            h = pooled;
        }
        let (b, bt) = self.bottleneck.forward(store, h, rng.as_deref_mut().map(|r| (self.dropout, r)));
        let (mut d, collapsed) = match &self.collapse {
            Some(conv) => {
                let mut c = conv.forward(store, &b);
                relu_inplace(&mut c);
                (c.clone(), Some(c))
            }
            None => (b.clone(), None),
        };
        let z_crop = self.z_reduction() / 2;
        let mut up_in = vec![Tensor::zeros(0, [1; 3]); levels];
        let mut dec_t: Vec<Option<BlockTrace>> = vec![None; levels];
        for i in (0..levels).rev() {
            let u = self.ups[i].forward(store, &d);
            let skip = if z_crop > 0 { enc_out[i].crop_z(z_crop, u.dims()[2]) } else { enc_out[i].clone() };
            let cat = Tensor::concat(&skip, &u);
            up_in[i] = d;
            let (out, t) = self.dec[i].forward(store, cat, rng.as_deref_mut().map(|r| (self.dropout, r)));
            dec_t[i] = Some(t);
            d = out;
        }
        let logits = self.head.forward(store, &d);
        let trace = Trace {
            enc: enc_t,
            enc_out,
            pool_arg,
            bottleneck: bt,
            bottleneck_out: b,
            collapsed,
            up_in,
            dec: dec_t.into_iter().map(|t| t.expect("every level decoded")).collect(),
            head_in: d,
            z_crop,
        };
        (logits, trace)
    }

    /// Accumulates parameter gradients for `dL/dlogits`.
    pub fn backward(&self, store: &ParamStore, trace: &Trace, grad_logits: &Tensor, grads: &mut Gradients) {
        let levels = self.levels();
        let mut g = self.head.backward(store, &trace.head_in, grad_logits, grads, true).expect("input gradient");
        let mut skip_grads: Vec<Tensor> = Vec::with_capacity(levels);
        for i in 0..levels {
            let w = self.dec[i].specs()[1].out_channels;
            let g_cat = self.dec[i].backward(store, &trace.dec[i], g, grads, true).expect("input gradient");
            let (g_skip, g_up) = g_cat.split(w);
            let g_skip =
                if trace.z_crop > 0 { g_skip.uncrop_z(trace.z_crop, trace.enc_out[i].dims()[2]) } else { g_skip };
            skip_grads.push(g_skip);
            g = self.ups[i].backward(store, &trace.up_in[i], &g_up, grads);
        }
        if let (Some(conv), Some(c)) = (&self.collapse, &trace.collapsed) {
            relu_backward(c, &mut g);
            g = conv.backward(store, &trace.bottleneck_out, &g, grads, true).expect("input gradient");
        }
        let mut g = self.bottleneck.backward(store, &trace.bottleneck, g, grads, true).expect("input gradient");
        for i in (0..levels).rev() {
            let mut g_enc = max_pool_backward(&g, &trace.pool_arg[i], trace.enc_out[i].dims());
            g_enc.add_assign(&skip_grads[i]);
            match self.enc[i].backward(store, &trace.enc[i], g_enc, grads, i > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
    }

    /// Layer table in forward order.
    pub fn describe(&self, prefix: &str) -> Vec<LayerInfo> {
        let conv = |name: String, s: ConvSpec| LayerInfo {
            name,
            kind: LayerKind::Conv,
            in_channels: s.in_channels,
            out_channels: s.out_channels,
            kernel: s.kernel,
            dilation: s.dilation,
            parameters: s.out_channels * (s.in_channels * s.taps() + 1),
        };
        let pool = |name: String, c: usize| LayerInfo {
            name,
            kind: LayerKind::MaxPool,
            in_channels: c,
            out_channels: c,
            kernel: self.pool,
            dilation: [1; 3],
            parameters: 0,
        };
        let mut out = Vec::new();
        for (i, b) in self.enc.iter().enumerate() {
            let [a, c] = b.specs();
            out.push(conv(format!("{prefix}.enc{}.conv1", i + 1), a));
            out.push(conv(format!("{prefix}.enc{}.conv2", i + 1), c));
            out.push(pool(format!("{prefix}.pool{}", i + 1), c.out_channels));
        }
        let [a, c] = self.bottleneck.specs();
        out.push(conv(format!("{prefix}.bottleneck.conv1"), a));
        out.push(conv(format!("{prefix}.bottleneck.conv2"), c));
        if let Some(cv) = &self.collapse {
            out.push(conv(format!("{prefix}.collapse"), cv.spec));
        }
        for i in (0..self.levels()).rev() {
            let u = &self.ups[i];
            out.push(LayerInfo {
                name: format!("{prefix}.up{}", i + 1),
                kind: LayerKind::TransposedConv,
                in_channels: u.in_channels,
                out_channels: u.out_channels,
                kernel: u.factor,
                dilation: [1; 3],
                parameters: u.out_channels * (u.in_channels * u.factor.iter().product::<usize>() + 1),
            });
            let [a, c] = self.dec[i].specs();
            out.push(conv(format!("{prefix}.dec{}.conv1", i + 1), a));
            out.push(conv(format!("{prefix}.dec{}.conv2", i + 1), c));
        }
        out.push(conv(format!("{prefix}.head"), self.head.spec));
        out
    }
}
