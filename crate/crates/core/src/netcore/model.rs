//! The three-block convolutional extractor and its 1x1 detection head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    add_bias, col2im3x3, gemm, gemm_at, gemm_bt, im2col3x3, relu_maxpool2, relu_maxpool2_backward,
    sum_spatial,
};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Total downsampling of the extractor.
pub const STRIDE: usize = 8;
/// Channels of the final feature map.
pub const FEATURE_CHANNELS: usize = 64;

const CHANNELS: [usize; 4] = [1, 16, 32, 64];

/// Learnable weights, in checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub conv3_w: Tensor,
    pub conv3_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
    anchors_per_cell: usize,
}

impl ExtractorParams {
    /// All-zero parameters (also the shape of a gradient).
    pub fn zeros(anchors_per_cell: usize) -> Self {
        let head_out = anchors_per_cell * 5;
        ExtractorParams {
            conv1_w: Tensor::zeros(&[CHANNELS[1], CHANNELS[0], 3, 3]),
            conv1_b: Tensor::zeros(&[CHANNELS[1]]),
            conv2_w: Tensor::zeros(&[CHANNELS[2], CHANNELS[1], 3, 3]),
            conv2_b: Tensor::zeros(&[CHANNELS[2]]),
            conv3_w: Tensor::zeros(&[CHANNELS[3], CHANNELS[2], 3, 3]),
            conv3_b: Tensor::zeros(&[CHANNELS[3]]),
            head_w: Tensor::zeros(&[head_out, FEATURE_CHANNELS]),
            head_b: Tensor::zeros(&[head_out]),
            anchors_per_cell,
        }
    }

    /// Fan-in scaled uniform init: He bound `sqrt(6 / fan_in)` for the ReLU convolutions,
    /// `sqrt(3 / fan_in)` for the linear head. Biases start at zero.
    pub fn init(anchors_per_cell: usize, seed: u64) -> Self {
        let mut p = Self::zeros(anchors_per_cell);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |t: &mut Tensor, fan_in: usize, gain: f64| {
            let bound = (gain / fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        };
        fill(&mut p.conv1_w, CHANNELS[0] * 9, 6.0);
        fill(&mut p.conv2_w, CHANNELS[1] * 9, 6.0);
        fill(&mut p.conv3_w, CHANNELS[2] * 9, 6.0);
        fill(&mut p.head_w, FEATURE_CHANNELS, 3.0);
        p
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchors_per_cell
    }

    pub fn blocks(&self) -> [&Tensor; 8] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.conv3_w,
            &self.conv3_b,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.conv3_w,
            &mut self.conv3_b,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|t| t.len()).sum()
    }

    /// Flat view in checkpoint order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn from_flat(anchors_per_cell: usize, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(anchors_per_cell);
        if flat.len() != p.num_params() {
            return Err(Error::input(format!(
                "expected {} parameters, got {}",
                p.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in p.blocks_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(p)
    }

    /// Reads one scalar by its position in [`Self::to_flat`] order.
    pub fn get_flat(&self, mut index: usize) -> f64 {
        for t in self.blocks() {
            if index < t.len() {
                return t.data()[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for t in self.blocks_mut() {
            if index < t.len() {
                t.data_mut()[index] = value;
                return;
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|t| t.all_finite())
    }

    /// `self += alpha * other` for every block.
    pub fn axpy(&mut self, alpha: f64, other: &ExtractorParams) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.axpy(alpha, b);
        }
    }
}

/// `C`-channel grid at a fixed stride over the input image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }
}

#[derive(Debug, Clone)]
struct ConvCache {
    cols: Vec<f64>,
    pre: Vec<f64>,
    arg: Vec<u32>,
    h: usize,
    w: usize,
}

/// Result of a forward pass, holding what the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub features: FeatureMap,
    /// `(A, H/8, W/8)` objectness logits.
    pub objectness: Tensor,
    /// `(4A, H/8, W/8)` box deltas; channel `4a + c` is coordinate `c` of anchor size `a`.
    pub deltas: Tensor,
    caches: Vec<ConvCache>,
}

impl ForwardPass {
    /// Bit pattern of every ReLU and pooling decision; two passes with equal signatures
    /// are on the same linear piece of the network.
    pub fn activation_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for c in &self.caches {
            let mut word = 0u64;
            let mut bits = 0;
            for &v in &c.pre {
                word = (word << 1) | u64::from(v > 0.0);
                bits += 1;
                if bits == 64 {
                    sig.push(word);
                    word = 0;
                    bits = 0;
                }
            }
            sig.push(word);
            sig.extend(c.arg.iter().map(|&a| a as u64));
        }
        sig
    }
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::input(format!("image must be 1xHxW, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    if h == 0 || w == 0 || h % STRIDE != 0 || w % STRIDE != 0 {
        return Err(Error::input(format!(
            "image dims {h}x{w} must be positive multiples of {STRIDE}"
        )));
    }
    Ok((h, w))
}

/// conv3x3 -> ReLU -> maxpool2, three times, then a 1x1 head on the last map.
pub fn forward(params: &ExtractorParams, image: &Tensor) -> Result<ForwardPass> {
    let (mut h, mut w) = check_image(image)?;
    let convs = [
        (&params.conv1_w, &params.conv1_b),
        (&params.conv2_w, &params.conv2_b),
        (&params.conv3_w, &params.conv3_b),
    ];
    let mut x = image.data().to_vec();
    let mut caches = Vec::with_capacity(3);
    for (layer, (wt, b)) in convs.iter().enumerate() {
        let (cin, cout) = (CHANNELS[layer], CHANNELS[layer + 1]);
        let hw = h * w;
        let cols = im2col3x3(&x, cin, h, w);
        let mut pre = vec![0.0; cout * hw];
        gemm(cout, cin * 9, hw, wt.data(), &cols, 0.0, &mut pre);
        add_bias(&mut pre, b.data(), hw);
        let (pooled, arg) = relu_maxpool2(&pre, cout, h, w);
        caches.push(ConvCache { cols, pre, arg, h, w });
        x = pooled;
        h /= 2;
        w /= 2;
    }

    let a = params.anchors_per_cell;
    let hw = h * w;
    let mut head = vec![0.0; 5 * a * hw];
    gemm(5 * a, FEATURE_CHANNELS, hw, params.head_w.data(), &x, 0.0, &mut head);
    add_bias(&mut head, params.head_b.data(), hw);
    if !head.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("non-finite detection head output"));
    }
    let deltas = Tensor::from_vec(&[4 * a, h, w], head.split_off(a * hw))?;
    let objectness = Tensor::from_vec(&[a, h, w], head)?;
    let features = FeatureMap {
        tensor: Tensor::from_vec(&[FEATURE_CHANNELS, h, w], x)?,
        stride: STRIDE,
    };
    Ok(ForwardPass {
        features,
        objectness,
        deltas,
        caches,
    })
}

/// Reverse-mode gradient of the forward graph given upstream gradients on its outputs.
///
/// `grad_features` is optional; a missing one is treated as zero.
pub fn backward(
    params: &ExtractorParams,
    pass: &ForwardPass,
    grad_features: Option<&Tensor>,
    grad_objectness: &Tensor,
    grad_deltas: &Tensor,
) -> Result<ExtractorParams> {
    let a = params.anchors_per_cell;
    let fshape = pass.features.tensor.shape();
    let (h, w) = (fshape[1], fshape[2]);
    let hw = h * w;
    if grad_objectness.shape() != pass.objectness.shape() || grad_deltas.shape() != pass.deltas.shape() {
        return Err(Error::input("head gradient shape mismatch"));
    }
    if let Some(g) = grad_features {
        if g.shape() != fshape {
            return Err(Error::input(format!(
                "feature gradient shape {:?} != {:?}",
                g.shape(),
                fshape
            )));
        }
    }

    let mut grads = ExtractorParams::zeros(a);
    let mut ghead = Vec::with_capacity(5 * a * hw);
    ghead.extend_from_slice(grad_objectness.data());
    ghead.extend_from_slice(grad_deltas.data());

    gemm_bt(
        5 * a,
        hw,
        FEATURE_CHANNELS,
        &ghead,
        pass.features.tensor.data(),
        0.0,
        grads.head_w.data_mut(),
    );
    grads
        .head_b
        .data_mut()
        .copy_from_slice(&sum_spatial(&ghead, hw));

    let mut gx = match grad_features {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; FEATURE_CHANNELS * hw],
    };
    gemm_at(FEATURE_CHANNELS, 5 * a, hw, params.head_w.data(), &ghead, 1.0, &mut gx);

    let weights = [&params.conv1_w, &params.conv2_w, &params.conv3_w];
    for layer in (0..3).rev() {
        let cache = &pass.caches[layer];
        let (cin, cout) = (CHANNELS[layer], CHANNELS[layer + 1]);
        let lhw = cache.h * cache.w;
        let gpre = relu_maxpool2_backward(&gx, &cache.arg, &cache.pre);
        let (gw, gb) = match layer {
            0 => (&mut grads.conv1_w, &mut grads.conv1_b),
            1 => (&mut grads.conv2_w, &mut grads.conv2_b),
            _ => (&mut grads.conv3_w, &mut grads.conv3_b),
        };
        gemm_bt(cout, lhw, cin * 9, &gpre, &cache.cols, 0.0, gw.data_mut());
        gb.data_mut().copy_from_slice(&sum_spatial(&gpre, lhw));
        if layer > 0 {
            let mut gcols = vec![0.0; cin * 9 * lhw];
            gemm_at(cin * 9, cout, lhw, weights[layer].data(), &gpre, 0.0, &mut gcols);
            gx = col2im3x3(&gcols, cin, cache.h, cache.w);
        }
    }
    if !grads.all_finite() {
        return Err(Error::numeric("non-finite parameter gradient"));
    }
    Ok(grads)
}
