//! The backbone: a small fully-convolutional encoder-decoder mapping a 3xSxS
//! image to 16 pre-activation channels at S/4 resolution, built from plain
//! f64 convolutions (im2col plus matrix multiply) so training is exactly
//! reproducible on any host.
//!
//! Topology: two stride-2 stages reach the output grid, two dilated stages
//! (rates 2 and 4) widen the receptive field without further downsampling, a
//! skip connection re-injects the last stride-2 features, and a linear 1x1
//! head emits the channels. Parameters live in f64; no normalization layers,
//! so a forward pass has no batch coupling.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::layout;
use crate::error::{Error, Result};

/// Spatial reduction from input image to output maps.
pub const DOWNSAMPLE: usize = 4;

/// Backbone hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side, px. Must be divisible by 4.
    pub input_size: usize,
    /// Channel widths of the four stages.
    pub widths: [usize; 4],
    /// Advisory parameter-count target, reported against the built model.
    pub param_budget: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::reference()
    }
}

impl ModelConfig {
    /// Full-scale profile: 512 px input, about 0.6 M parameters.
    pub fn reference() -> Self {
        ModelConfig { input_size: 512, widths: [21, 42, 83, 166], param_budget: Some(600_000) }
    }

    /// CPU-friendly profile used by the test suite and synthetic runs.
    pub fn desk() -> Self {
        ModelConfig { input_size: 128, widths: [8, 16, 32, 64], param_budget: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size % DOWNSAMPLE != 0 || self.input_size == 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by {DOWNSAMPLE}",
                self.input_size
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("zero channel width".into()));
        }
        Ok(())
    }

    /// Output map side for the configured input.
    pub fn map_size(&self) -> usize {
        self.input_size / DOWNSAMPLE
    }
}

/// One convolution layer. `pad` keeps the spatial contract: dilation-sized
/// for 3x3 kernels, none for 1x1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// (out, in, k, k).
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

impl Conv2d {
    fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, dilation: usize) -> Self {
        Conv2d {
            w: Array4::zeros((out_ch, in_ch, k, k)),
            b: Array1::zeros(out_ch),
            stride,
            dilation,
            pad: if k == 1 { 0 } else { dilation },
        }
    }

    fn init_he(&mut self, rng: &mut ChaCha8Rng) {
        let (_, in_ch, k, _) = self.w.dim();
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        for v in self.w.iter_mut() {
            *v = std * standard_normal(rng);
        }
        self.b.fill(0.0);
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.dim().2;
        let span = self.dilation * (k - 1) + 1;
        let oh = (h + 2 * self.pad - span) / self.stride + 1;
        let ow = (w + 2 * self.pad - span) / self.stride + 1;
        (oh, ow)
    }

    fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (out_ch, in_ch, k, _) = self.w.dim();
        let (_, h, w) = x.dim();
        debug_assert_eq!(x.dim().0, in_ch);
        let (oh, ow) = self.out_size(h, w);
        let cols = im2col(x, k, self.stride, self.dilation, self.pad, oh, ow);
        let w2 = self.w.view().into_shape_with_order((out_ch, in_ch * k * k)).unwrap();
        let mut y = w2.dot(&cols);
        for (mut row, &b) in y.rows_mut().into_iter().zip(self.b.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        y.into_shape_with_order((out_ch, oh, ow)).unwrap()
    }

    /// Accumulates weight/bias gradients and, unless this is the first
    /// layer, returns the gradient with respect to the input. The im2col
    /// matrix is recomputed from the cached input to keep memory flat.
    fn backward(
        &self,
        x: &Array3<f64>,
        gy: &Array3<f64>,
        gw: &mut Array4<f64>,
        gb: &mut Array1<f64>,
        need_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let (out_ch, in_ch, k, _) = self.w.dim();
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_size(h, w);
        debug_assert_eq!(gy.dim(), (out_ch, oh, ow));
        let cols = im2col(x, k, self.stride, self.dilation, self.pad, oh, ow);
        let gy_std = gy.as_standard_layout();
        let gy2 = gy_std.view().into_shape_with_order((out_ch, oh * ow)).unwrap();

        let gw_delta = gy2.dot(&cols.t());
        let mut gw2 = gw.view_mut().into_shape_with_order((out_ch, in_ch * k * k)).unwrap();
        gw2 += &gw_delta;
        *gb += &gy2.sum_axis(Axis(1));

        if !need_input_grad {
            return None;
        }
        let w2 = self.w.view().into_shape_with_order((out_ch, in_ch * k * k)).unwrap();
        let gcols = w2.t().dot(&gy2);
        Some(col2im(&gcols, (in_ch, h, w), k, self.stride, self.dilation, self.pad, oh, ow))
    }

    fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Lowers every receptive field to a column: rows indexed by
/// (channel, ky, kx), one column per output position. Out-of-frame taps
/// contribute zeros.
fn im2col(
    x: &Array3<f64>,
    k: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the input
/// grid.
fn col2im(
    gcols: &Array2<f64>,
    dim: (usize, usize, usize),
    k: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let (c, h, w) = dim;
    let mut gx = Array3::zeros(dim);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[[ci, iy as usize, ix as usize]] += gcols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    gx
}

/// Box-Muller standard normal; one draw per call so initialization order is
/// a pure function of the stream position.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Index of the layer whose post-activation output feeds the skip add.
const SKIP_SOURCE: usize = 2;
/// Index of the layer whose output receives the skip add before its relu.
const SKIP_TARGET: usize = 5;
const N_LAYERS: usize = 8;

/// The full backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct LineNet {
    pub config: ModelConfig,
    layers: Vec<Conv2d>,
}

/// Everything backward needs: the input of each layer and each layer's
/// post-activation output (for relu masks).
pub struct ForwardCache {
    inputs: Vec<Array3<f64>>,
    outputs: Vec<Array3<f64>>,
}

/// Per-layer parameter gradients, aligned with the layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<(Array4<f64>, Array1<f64>)>,
}

impl NetGrads {
    pub fn zeros_like(net: &LineNet) -> Self {
        NetGrads {
            layers: net
                .layers
                .iter()
                .map(|l| (Array4::zeros(l.w.dim()), Array1::zeros(l.b.len())))
                .collect(),
        }
    }

    pub fn add(&mut self, other: &NetGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.mapv_inplace(|v| v * s);
            b.mapv_inplace(|v| v * s);
        }
    }
}

fn layer_specs(widths: [usize; 4]) -> [(usize, usize, usize, usize, usize); N_LAYERS] {
    let [w0, w1, w2, w3] = widths;
    [
        (3, w0, 3, 1, 1),
        (w0, w1, 3, 2, 1),
        (w1, w2, 3, 2, 1),
        (w2, w3, 3, 1, 2),
        (w3, w3, 3, 1, 4),
        (w3, w2, 3, 1, 1),
        (w2, w2, 3, 1, 1),
        (w2, layout::NUM_CHANNELS, 1, 1, 1),
    ]
}

/// Builds the backbone with He-normal weights drawn from a seed-determined
/// stream; identical seeds give bitwise-identical parameters.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<LineNet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_specs(config.widths)
        .into_iter()
        .map(|(i, o, k, s, d)| {
            let mut conv = Conv2d::new(i, o, k, s, d);
            conv.init_he(&mut rng);
            conv
        })
        .collect();
    Ok(LineNet { config: config.clone(), layers })
}

impl LineNet {
    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Conv2d::n_params).sum()
    }

    /// Forward pass. Accepts any 3xHxW input with both sides divisible by 4;
    /// output is 16 x H/4 x W/4.
    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, ForwardCache)> {
        let (c, h, w) = x.dim();
        if c != 3 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch {
                expected: "3 x H x W with H, W divisible by 4".into(),
                got: format!("{c} x {h} x {w}"),
            });
        }
        let mut inputs = Vec::with_capacity(N_LAYERS);
        let mut outputs = Vec::with_capacity(N_LAYERS);
        let mut cur = x.clone();
        for (i, conv) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            let mut y = conv.forward(&cur);
            if i == SKIP_TARGET {
                y += &outputs[SKIP_SOURCE];
            }
            if i != N_LAYERS - 1 {
                y.mapv_inplace(|v| v.max(0.0));
            }
            outputs.push(y.clone());
            cur = y;
        }
        let cache = ForwardCache { inputs, outputs };
        Ok((cur, cache))
    }

    /// Backpropagates an output gradient to parameter gradients. The input
    /// gradient is not produced; images are never optimized.
    pub fn backward(&self, cache: &ForwardCache, gout: &Array3<f64>) -> NetGrads {
        let mut grads = NetGrads::zeros_like(self);
        let mut g = gout.clone();
        let mut skip_grad: Option<Array3<f64>> = None;
        for i in (0..N_LAYERS).rev() {
            if i != N_LAYERS - 1 {
                // Relu mask of this layer's post-activation output.
                g.zip_mut_with(&cache.outputs[i], |gv, &o| {
                    if o <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            if i == SKIP_TARGET {
                skip_grad = Some(g.clone());
            }
            let (gw, gb) = &mut grads.layers[i];
            let gin = self.layers[i].backward(&cache.inputs[i], &g, gw, gb, i > 0);
            if i == 0 {
                break;
            }
            g = gin.expect("input grad requested for every layer above the first");
            if i - 1 == SKIP_SOURCE {
                if let Some(s) = skip_grad.take() {
                    g += &s;
                }
            }
        }
        grads
    }

    /// Named parameter vectors, flattened row-major, for checkpoints.
    pub fn param_blobs(&self) -> BTreeMap<String, Vec<f64>> {
        let mut blobs = BTreeMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            blobs.insert(format!("c{i}.w"), l.w.iter().copied().collect());
            blobs.insert(format!("c{i}.b"), l.b.to_vec());
        }
        blobs
    }

    /// Restores parameters from [`Self::param_blobs`] output.
    pub fn load_blobs(&mut self, blobs: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let wk = format!("c{i}.w");
            let bk = format!("c{i}.b");
            let (Some(wv), Some(bv)) = (blobs.get(&wk), blobs.get(&bk)) else {
                return Err(Error::Data(format!("checkpoint missing blobs for layer {i}")));
            };
            if wv.len() != l.w.len() || bv.len() != l.b.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} + {} values for layer {i}", l.w.len(), l.b.len()),
                    got: format!("{} + {}", wv.len(), bv.len()),
                });
            }
            l.w = Array4::from_shape_vec(l.w.dim(), wv.clone()).expect("length checked");
            l.b = Array1::from_vec(bv.clone());
        }
        Ok(())
    }

    /// All parameters in a fixed order, for exact comparison.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }
}

/// FNV-1a over the exact parameter bits, for cheap trajectory tracing.
pub fn param_hash(net: &LineNet) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in net.params_flat() {
        for byte in v.to_bits().to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<(Array4<f64>, Array1<f64>)>,
    v: Vec<(Array4<f64>, Array1<f64>)>,
}

impl Adam {
    pub fn new(net: &LineNet, lr: f64) -> Self {
        let zeros = || {
            net.layers
                .iter()
                .map(|l| (Array4::zeros(l.w.dim()), Array1::zeros(l.b.len())))
                .collect::<Vec<_>>()
        };
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, net: &mut LineNet, grads: &NetGrads) {
        self.t += 1;
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        };
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[i];
            update(
                layer.w.as_slice_mut().unwrap(),
                gw.as_slice().unwrap(),
                self.m[i].0.as_slice_mut().unwrap(),
                self.v[i].0.as_slice_mut().unwrap(),
            );
            update(
                layer.b.as_slice_mut().unwrap(),
                gb.as_slice().unwrap(),
                self.m[i].1.as_slice_mut().unwrap(),
                self.v[i].1.as_slice_mut().unwrap(),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig { input_size: 8, widths: [2, 3, 4, 5], param_budget: None }
    }

    fn random_input(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((3, h, w), |_| rng.random::<f64>())
    }

    #[test]
    fn output_shape_follows_quarter_contract() {
        let net = build_model(&ModelConfig::desk(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (y, _) = net.forward(&random_input(&mut rng, 128, 128)).unwrap();
        assert_eq!(y.dim(), (16, 32, 32));

        let tiny = build_model(&ModelConfig { input_size: 512, ..tiny_config() }, 7).unwrap();
        let (y, _) = tiny.forward(&random_input(&mut rng, 512, 512)).unwrap();
        assert_eq!(y.dim(), (16, 128, 128));
    }

    #[test]
    fn indivisible_sizes_are_rejected() {
        let bad = ModelConfig { input_size: 130, ..ModelConfig::desk() };
        assert!(build_model(&bad, 0).is_err());

        let net = build_model(&tiny_config(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(net.forward(&random_input(&mut rng, 30, 30)).is_err());
        assert!(net.forward(&Array3::<f64>::zeros((4, 8, 8))).is_err());
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a = build_model(&tiny_config(), 42).unwrap();
        let b = build_model(&tiny_config(), 42).unwrap();
        assert_eq!(a.params_flat(), b.params_flat());
        let c = build_model(&tiny_config(), 43).unwrap();
        assert_ne!(a.params_flat(), c.params_flat());
    }

    #[test]
    fn forward_is_deterministic() {
        let net = build_model(&tiny_config(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_input(&mut rng, 8, 8);
        let (y1, _) = net.forward(&x).unwrap();
        let (y2, _) = net.forward(&x).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn reference_parameter_count_matches_budget() {
        let net = build_model(&ModelConfig::reference(), 0).unwrap();
        let n = net.n_params();
        assert_eq!(n, 599_876);
        let budget = ModelConfig::reference().param_budget.unwrap() as f64;
        assert!((n as f64 / budget - 1.0).abs() < 0.05, "{n} vs budget {budget}");
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let net = build_model(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_input(&mut rng, 8, 8);
        // Loss: fixed random projection of the output, so dL/dy is constant.
        let proj = Array3::from_shape_fn((16, 2, 2), |_| rng.random::<f64>() - 0.5);
        let loss = |net: &LineNet| {
            let (y, _) = net.forward(&x).unwrap();
            (&y * &proj).sum()
        };

        let (_, cache) = net.forward(&x).unwrap();
        let grads = net.backward(&cache, &proj);

        let h = 1e-5;
        for li in 0..N_LAYERS {
            let nw = net.layers[li].w.len();
            let nb = net.layers[li].b.len();
            for j in 0..nw + nb {
                let mut plus = net.clone();
                let mut minus = net.clone();
                if j < nw {
                    plus.layers[li].w.as_slice_mut().unwrap()[j] += h;
                    minus.layers[li].w.as_slice_mut().unwrap()[j] -= h;
                } else {
                    plus.layers[li].b[j - nw] += h;
                    minus.layers[li].b[j - nw] -= h;
                }
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let analytic = if j < nw {
                    grads.layers[li].0.as_slice().unwrap()[j]
                } else {
                    grads.layers[li].1[j - nw]
                };
                assert!(
                    (analytic - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                    "layer {li} param {j}: {analytic} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_signed_rate() {
        let mut net = build_model(&tiny_config(), 1).unwrap();
        let before = net.params_flat();
        let mut grads = NetGrads::zeros_like(&net);
        grads.layers[0].0[[0, 0, 0, 0]] = 3.0;
        grads.layers[0].0[[1, 0, 0, 0]] = -0.25;
        let mut opt = Adam::new(&net, 1e-3);
        opt.step(&mut net, &grads);
        let after = net.params_flat();
        // First step with bias correction: delta ~ -lr * sign(g).
        assert!((after[0] - before[0] + 1e-3).abs() < 1e-8);
        let j = net.layers[0].w.dim().1 * 9;
        assert!((after[j] - before[j] - 1e-3).abs() < 1e-8);
        // Zero-gradient coordinates stay put.
        assert_eq!(after[1], before[1]);
    }

    #[test]
    fn parameter_blobs_round_trip() {
        let net = build_model(&tiny_config(), 9).unwrap();
        let blobs = net.param_blobs();
        let mut other = build_model(&tiny_config(), 10).unwrap();
        assert_ne!(net.params_flat(), other.params_flat());
        other.load_blobs(&blobs).unwrap();
        assert_eq!(net.params_flat(), other.params_flat());
        assert_eq!(param_hash(&net), param_hash(&other));

        let mut broken = blobs.clone();
        broken.remove("c3.w");
        assert!(other.load_blobs(&broken).is_err());
    }

    #[test]
    fn skip_connection_contributes_to_output() {
        // Zeroing the skip-source layer's outgoing path must change the
        // result only through the skip if later weights are zeroed too;
        // here just check the add executes: a net whose target-layer weights
        // are zero still passes skip features through the relu.
        let mut net = build_model(&tiny_config(), 21).unwrap();
        net.layers[SKIP_TARGET].w.fill(0.0);
        net.layers[SKIP_TARGET].b.fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random_input(&mut rng, 8, 8);
        let (_, cache) = net.forward(&x).unwrap();
        let skip = &cache.outputs[SKIP_SOURCE];
        let target = &cache.outputs[SKIP_TARGET];
        assert_eq!(skip, target);
    }
}
