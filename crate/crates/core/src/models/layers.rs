use std::rc::Rc;

use crate::autograd::{Conv2dSpec, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::params::{Binder, Init, ParamStore};

/// Square-kernel convolution with named parameters `{name}.weight` / `{name}.bias`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub spec: Conv2dSpec,
    pub bias: bool,
    /// Multiplier on the default He-uniform bound; 0 gives a zero kernel.
    pub gain: f64,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k,
            spec: Conv2dSpec { stride, padding: k / 2 },
            bias: true,
            gain: 1.0,
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn declare<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        let fan_in = (self.cin * self.k * self.k) as f64;
        let bound = self.gain * (6.0 / fan_in).sqrt();
        store.insert(
            format!("{}.weight", self.name),
            init.uniform(&[self.cout, self.cin, self.k, self.k], bound),
        );
        if self.bias {
            store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.cout]));
        }
    }

    pub fn forward<'g, T: Scalar>(&self, b: &Binder<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let w = b.param(&format!("{}.weight", self.name));
        let bias = self.bias.then(|| b.param(&format!("{}.bias", self.name)));
        x.conv2d(w, bias, self.spec)
    }
}

/// Expands a per-position mask `[n * hw]` across `c` channels.
pub fn channel_mask(valid: &[bool], n: usize, c: usize) -> Rc<Vec<bool>> {
    let hw = valid.len() / n;
    let mut out = Vec::with_capacity(n * c * hw);
    for b in 0..n {
        for _ in 0..c {
            out.extend_from_slice(&valid[b * hw..(b + 1) * hw]);
        }
    }
    Rc::new(out)
}

/// Convolution that reads only valid inputs and writes only valid outputs.
///
/// `valid` is `[n * h * w]`; the mask itself passes through unchanged.
pub fn submanifold_conv<'g, T: Scalar>(
    x: Var<'g, T>,
    weight: Var<'g, T>,
    bias: Option<Var<'g, T>>,
    spec: Conv2dSpec,
    valid: &[bool],
) -> Var<'g, T> {
    assert_eq!(spec.stride, 1, "submanifold convolution keeps the grid");
    let (n, cin, _, _) = x.value().dims4();
    let cout = weight.value().shape()[0];
    x.mask(channel_mask(valid, n, cin))
        .conv2d(weight, bias, spec)
        .mask(channel_mask(valid, n, cout))
}

/// Residual block of two 3x3 convolutions.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    conv1: Conv,
    conv2: Conv,
    down: Option<Conv>,
}

impl BasicBlock {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, residual_gain: f64) -> Self {
        let down = (stride != 1 || cin != cout).then(|| Conv::new(format!("{name}.down"), cin, cout, 1, stride));
        Self {
            conv1: Conv::new(format!("{name}.conv1"), cin, cout, 3, stride),
            conv2: Conv::new(format!("{name}.conv2"), cout, cout, 3, 1).gain(residual_gain),
            down,
        }
    }

    fn convs(&self) -> impl Iterator<Item = &Conv> {
        [&self.conv1, &self.conv2].into_iter().chain(self.down.as_ref())
    }

    fn forward<'g, T: Scalar>(&self, b: &Binder<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = self.conv1.forward(b, x).relu();
        let y = self.conv2.forward(b, y);
        let skip = match &self.down {
            Some(d) => d.forward(b, x),
            None => x,
        };
        y.add(skip).relu()
    }
}

/// 18-layer residual encoder producing five feature maps (strides 2..32).
///
/// There is no batch normalisation; the second convolution of every block
/// starts scaled down so the residual stack begins close to identity.
#[derive(Clone, Debug)]
pub struct ResNetEncoder {
    stem: Conv,
    layers: Vec<Vec<BasicBlock>>,
    pub widths: [usize; 5],
}

impl ResNetEncoder {
    pub fn new(name: &str, cin: usize, widths: [usize; 5]) -> Self {
        let residual_gain = 8f64.powf(-0.5);
        let stem = Conv::new(format!("{name}.stem"), cin, widths[0], 7, 2);
        let mut layers = Vec::new();
        let mut prev = widths[0];
        for (i, &w) in widths[1..].iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let blocks = vec![
                BasicBlock::new(&format!("{name}.layer{}.0", i + 1), prev, w, stride, residual_gain),
                BasicBlock::new(&format!("{name}.layer{}.1", i + 1), w, w, 1, residual_gain),
            ];
            layers.push(blocks);
            prev = w;
        }
        Self { stem, layers, widths }
    }

    pub fn declare<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        self.stem.declare(store, init);
        for block in self.layers.iter().flatten() {
            for conv in block.convs() {
                conv.declare(store, init);
            }
        }
    }

    pub fn forward<'g, T: Scalar>(&self, b: &Binder<'g, '_, T>, x: Var<'g, T>) -> Vec<Var<'g, T>> {
        let mut feats = vec![self.stem.forward(b, x).relu()];
        let mut y = feats[0].max_pool3_s2();
        for layer in &self.layers {
            for block in layer {
                y = block.forward(b, y);
            }
            feats.push(y);
        }
        feats
    }
}

/// Zone-resolution encoder: one 1x1 + 3x3 stage per output scale, no
/// downsampling.
#[derive(Clone, Debug)]
pub struct ZoneEncoder {
    stages: Vec<(Conv, Conv)>,
    pub submanifold: bool,
}

impl ZoneEncoder {
    pub fn new(name: &str, cin: usize, widths: &[usize], submanifold: bool) -> Self {
        let mut prev = cin;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let s = (
                    Conv::new(format!("{name}.{i}.conv1"), prev, w, 1, 1),
                    Conv::new(format!("{name}.{i}.conv3"), w, w, 3, 1),
                );
                prev = w;
                s
            })
            .collect();
        Self { stages, submanifold }
    }

    pub fn declare<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        for (a, c) in &self.stages {
            a.declare(store, init);
            c.declare(store, init);
        }
    }

    fn conv<'g, T: Scalar>(&self, b: &Binder<'g, '_, T>, conv: &Conv, x: Var<'g, T>, valid: &[bool]) -> Var<'g, T> {
        if self.submanifold {
            let w = b.param(&format!("{}.weight", conv.name));
            let bias = conv.bias.then(|| b.param(&format!("{}.bias", conv.name)));
            submanifold_conv(x, w, bias, conv.spec, valid)
        } else {
            conv.forward(b, x)
        }
    }

    /// `x` is `[n, cin, rows, cols]`, `valid` is `[n * rows * cols]`.
    pub fn forward<'g, T: Scalar>(&self, b: &Binder<'g, '_, T>, x: Var<'g, T>, valid: &[bool]) -> Vec<Var<'g, T>> {
        let mut y = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for (pointwise, spatial) in &self.stages {
            y = self.conv(b, pointwise, y, valid).relu();
            y = self.conv(b, spatial, y, valid).relu();
            out.push(y);
        }
        out
    }
}

/// Sinusoidal encoding of a `rows x cols` grid as `[1, c, rows, cols]`.
///
/// The first half of the channels encodes the row, the second half the
/// column, each with interleaved sine/cosine pairs.
pub fn position_encoding<T: Scalar>(c: usize, rows: usize, cols: usize) -> Tensor<T> {
    let half = c / 2;
    let mut pe = Tensor::zeros(&[1, c, rows, cols]);
    for ch in 0..c {
        let (axis_len, offset) = if ch < half { (half, 0) } else { (c - half, half) };
        let i = ch - offset;
        let freq = 10000f64.powf(-((i / 2 * 2) as f64) / axis_len.max(1) as f64);
        for r in 0..rows {
            for col in 0..cols {
                let pos = if ch < half { r } else { col } as f64;
                let a = pos * freq;
                pe[(ch * rows + r) * cols + col] = T::lit(if i % 2 == 0 { a.sin() } else { a.cos() });
            }
        }
    }
    pe
}

/// Attention-style propagation of zone features guided by RGB features.
#[derive(Clone, Debug)]
pub struct GuidedFusion {
    query: Conv,
    key: Conv,
    value: Conv,
    pub channels: usize,
    pub position_encoding: bool,
    pub softmax: bool,
}

/// Intermediate values of one guided fusion, kept for inspection.
pub struct FusionTrace<'g, T> {
    pub output: Var<'g, T>,
    /// `[n, zones, zones]`, rows are query positions.
    pub affinity: Var<'g, T>,
    pub propagated: Var<'g, T>,
}

impl GuidedFusion {
    pub fn new(name: &str, channels: usize, position_encoding: bool, softmax: bool) -> Self {
        Self {
            query: Conv::new(format!("{name}.query"), channels, channels, 1, 1),
            key: Conv::new(format!("{name}.key"), channels, channels, 1, 1),
            value: Conv::new(format!("{name}.value"), channels, channels, 1, 1).no_bias(),
            channels,
            position_encoding,
            softmax,
        }
    }

    pub fn declare<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        self.query.declare(store, init);
        self.key.declare(store, init);
        self.value.declare(store, init);
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        b: &Binder<'g, '_, T>,
        rgb: Var<'g, T>,
        depth: Var<'g, T>,
        valid: &[bool],
    ) -> Var<'g, T> {
        self.trace(b, rgb, depth, valid).output
    }

    pub fn trace<'g, T: Scalar>(
        &self,
        b: &Binder<'g, '_, T>,
        rgb: Var<'g, T>,
        depth: Var<'g, T>,
        valid: &[bool],
    ) -> FusionTrace<'g, T> {
        let g = b.graph();
        let (n, c, h, w) = rgb.value().dims4();
        let (dn, dc, rows, cols) = depth.value().dims4();
        assert_eq!((dn, dc), (n, c), "fusion inputs disagree in batch or channels");
        let zones = rows * cols;
        assert_eq!(valid.len(), n * zones);

        let mut pooled = rgb.adaptive_avg_pool(rows, cols);
        if self.position_encoding {
            pooled = pooled.add(batch_constant(g, &position_encoding(c, rows, cols), n));
        }
        let q = self.query.forward(b, pooled).reshape(&[n, c, zones]);
        let k = self.key.forward(b, pooled).reshape(&[n, c, zones]);
        let depth = depth.mask(channel_mask(valid, n, c));
        let v = self.value.forward(b, depth).reshape(&[n, c, zones]);

        let scores = q.bmm(k, true, false).mul_scalar(T::lit(c as f64).sqrt().recip());
        let col_valid = Rc::new(valid.to_vec());
        let affinity = if self.softmax {
            scores.masked_softmax_rows(col_valid)
        } else {
            let mut keep = Vec::with_capacity(n * zones * zones);
            for p in 0..n {
                for _ in 0..zones {
                    keep.extend_from_slice(&valid[p * zones..(p + 1) * zones]);
                }
            }
            scores.mask(Rc::new(keep))
        };
        // out[c, i] = sum_j A[i, j] v[c, j]
        let propagated = v.bmm(affinity, false, true).reshape(&[n, c, rows, cols]);
        let output = rgb.add(depth.add(propagated).resize_nearest(h, w));
        FusionTrace {
            output,
            affinity,
            propagated,
        }
    }
}

/// Repeats a `[1, ...]` constant along the batch axis.
pub fn batch_constant<'g, T: Scalar>(g: &'g Graph<T>, t: &Tensor<T>, n: usize) -> Var<'g, T> {
    let items: Vec<&Tensor<T>> = (0..n).map(|_| t).collect();
    let mut shape = t.shape().to_vec();
    shape[0] = n;
    let stacked = Tensor::stack(&items);
    g.constant(stacked.reshape(&shape))
}

/// Upsampling decoder with skip connections and a sigmoid disparity head.
#[derive(Clone, Debug)]
pub struct DepthDecoder {
    upconv0: Vec<Conv>,
    upconv1: Vec<Conv>,
    head: Conv,
}

impl DepthDecoder {
    pub fn new(name: &str, enc: [usize; 5], dec: [usize; 5]) -> Self {
        let mut upconv0 = Vec::new();
        let mut upconv1 = Vec::new();
        for i in (0..5).rev() {
            let cin = if i == 4 { enc[4] } else { dec[i + 1] };
            upconv0.push(Conv::new(format!("{name}.upconv{i}.0"), cin, dec[i], 3, 1));
            let skip = if i > 0 { enc[i - 1] } else { 0 };
            upconv1.push(Conv::new(format!("{name}.upconv{i}.1"), dec[i] + skip, dec[i], 3, 1));
        }
        Self {
            upconv0,
            upconv1,
            head: Conv::new(format!("{name}.disp"), dec[0], 1, 3, 1),
        }
    }

    pub fn declare<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        for (a, c) in self.upconv0.iter().zip(&self.upconv1) {
            a.declare(store, init);
            c.declare(store, init);
        }
        self.head.declare(store, init);
    }

    /// Sigmoid output `[n, 1, out_h, out_w]`.
    pub fn forward<'g, T: Scalar>(
        &self,
        b: &Binder<'g, '_, T>,
        feats: &[Var<'g, T>],
        out_h: usize,
        out_w: usize,
    ) -> Var<'g, T> {
        let mut x = feats[4];
        for (step, i) in (0..5).rev().enumerate() {
            x = self.upconv0[step].forward(b, x).elu();
            x = if i > 0 {
                let skip = feats[i - 1];
                let (_, _, sh, sw) = skip.value().dims4();
                Var::concat_channels(&[x.resize_nearest(sh, sw), skip])
            } else {
                x.resize_nearest(out_h, out_w)
            };
            x = self.upconv1[step].forward(b, x).elu();
        }
        self.head.forward(b, x).sigmoid()
    }
}

/// Pose head: three convolutions, spatial mean, six outputs.
#[derive(Clone, Debug)]
pub struct PoseDecoder {
    squeeze: Conv,
    conv1: Conv,
    conv2: Conv,
    out: Conv,
}

impl PoseDecoder {
    pub fn new(name: &str, cin: usize, width: usize) -> Self {
        Self {
            squeeze: Conv::new(format!("{name}.squeeze"), cin, width, 1, 1),
            conv1: Conv::new(format!("{name}.pose0"), width, width, 3, 1),
            conv2: Conv::new(format!("{name}.pose1"), width, width, 3, 1),
            out: Conv::new(format!("{name}.pose2"), width, 6, 1, 1).gain(0.0),
        }
    }

    pub fn declare<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        for c in [&self.squeeze, &self.conv1, &self.conv2, &self.out] {
            c.declare(store, init);
        }
    }

    /// `[n, 6]` raw pose parameters (rotation, translation).
    pub fn forward<'g, T: Scalar>(&self, b: &Binder<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let x = self.squeeze.forward(b, x).relu();
        let x = self.conv1.forward(b, x).relu();
        let x = self.conv2.forward(b, x).relu();
        self.out.forward(b, x).mean_spatial()
    }
}
