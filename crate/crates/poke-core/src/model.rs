//! Joint forward/inverse dynamics model over learned image latents.
//!
//! One shared convolutional encoder maps each observation to a 128-d latent.
//! The inverse head reads the latent pair and predicts the poke as three
//! chained classifications (location grid cell, direction bin, length bin,
//! with a reserved no-poke length bin). The forward head reads the first
//! latent plus the continuous action and predicts the next latent. The joint
//! training loss is cross-entropy over the three heads plus an L1 latent
//! prediction term scaled by a small weight.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::nn::{
    conv2d, conv2d_backward, conv_out_dim, dense, dense_backward, l1_loss, relu, relu_backward,
    softmax_cross_entropy, LayerParams, NdArray,
};
use crate::rng::{stream, StreamKind};
use crate::sim::{render, ArenaParams, Image, Interaction, Poke};

pub const LATENT_DIM: usize = 128;
/// Poke locations discretize onto a LOC_GRID x LOC_GRID cell grid.
pub const LOC_GRID: usize = 20;
pub const LOC_BINS: usize = LOC_GRID * LOC_GRID;
/// 10-degree direction bins.
pub const ANGLE_BINS: usize = 36;
/// 10 length bins plus the reserved no-poke bin.
pub const LEN_BINS: usize = 11;
pub const NOPOKE_BIN: usize = 10;
/// Continuous action encoding (px, py, cos theta, sin theta, length), all
/// normalized to [-1, 1]; the no-poke encodes as all zeros.
pub const ACTION_DIM: usize = 5;

const CONV1_CH: usize = 16;
const CONV1_K: usize = 8;
const CONV1_S: usize = 4;
const CONV2_CH: usize = 32;
const CONV2_K: usize = 4;
const CONV2_S: usize = 2;
const CONV3_CH: usize = 32;
const CONV3_K: usize = 3;
const CONV3_S: usize = 1;

/// All learnable parameters. The two image branches share the encoder
/// (conv1..enc_fc); the remaining layers split between the inverse head
/// (trunk + three classifiers) and the forward head (fwd1, fwd2).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    image_size: usize,
    pub conv1: LayerParams,
    pub conv2: LayerParams,
    pub conv3: LayerParams,
    pub enc_fc: LayerParams,
    pub trunk: LayerParams,
    pub head_loc: LayerParams,
    pub head_angle: LayerParams,
    pub head_len: LayerParams,
    pub fwd1: LayerParams,
    pub fwd2: LayerParams,
}

/// Output spatial sizes of the three conv layers plus the flattened length.
fn conv_dims(image_size: usize) -> Result<(usize, usize, usize, usize)> {
    let chain = [
        (CONV1_K, CONV1_S),
        (CONV2_K, CONV2_S),
        (CONV3_K, CONV3_S),
    ];
    let mut dim = image_size;
    let mut outs = [0usize; 3];
    for (i, &(k, s)) in chain.iter().enumerate() {
        if dim < k {
            return Err(Error::InvalidParams(alloc::format!(
                "image size {image_size} too small for the conv chain (layer {} input {dim} < kernel {k})",
                i + 1
            )));
        }
        dim = conv_out_dim(dim, k, s);
        outs[i] = dim;
    }
    Ok((outs[0], outs[1], outs[2], CONV3_CH * outs[2] * outs[2]))
}

impl ModelParams {
    /// Fresh parameters with uniform fan-scaled weights and zero biases.
    /// Layer draw order is fixed, so a seed pins every weight.
    pub fn init(image_size: usize, seed: u64) -> Result<ModelParams> {
        let (_, _, _, flat) = conv_dims(image_size)?;
        let mut rng = stream(seed, StreamKind::WeightInit, 0);
        Ok(ModelParams {
            image_size,
            conv1: LayerParams::new_conv(CONV1_CH, 1, CONV1_K, CONV1_K, &mut rng),
            conv2: LayerParams::new_conv(CONV2_CH, CONV1_CH, CONV2_K, CONV2_K, &mut rng),
            conv3: LayerParams::new_conv(CONV3_CH, CONV2_CH, CONV3_K, CONV3_K, &mut rng),
            enc_fc: LayerParams::new_dense(LATENT_DIM, flat, &mut rng),
            trunk: LayerParams::new_dense(LATENT_DIM, 2 * LATENT_DIM, &mut rng),
            head_loc: LayerParams::new_dense(LOC_BINS, LATENT_DIM, &mut rng),
            head_angle: LayerParams::new_dense(ANGLE_BINS, LATENT_DIM + LOC_BINS, &mut rng),
            head_len: LayerParams::new_dense(
                LEN_BINS,
                LATENT_DIM + LOC_BINS + ANGLE_BINS,
                &mut rng,
            ),
            fwd1: LayerParams::new_dense(LATENT_DIM, LATENT_DIM + ACTION_DIM, &mut rng),
            fwd2: LayerParams::new_dense(LATENT_DIM, LATENT_DIM, &mut rng),
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Canonical layer order; everything that walks the whole parameter
    /// vector (optimizer, checkpoints, gradient checks) uses this order.
    pub fn layers(&self) -> [&LayerParams; 10] {
        [
            &self.conv1,
            &self.conv2,
            &self.conv3,
            &self.enc_fc,
            &self.trunk,
            &self.head_loc,
            &self.head_angle,
            &self.head_len,
            &self.fwd1,
            &self.fwd2,
        ]
    }

    pub fn layers_mut(&mut self) -> [&mut LayerParams; 10] {
        [
            &mut self.conv1,
            &mut self.conv2,
            &mut self.conv3,
            &mut self.enc_fc,
            &mut self.trunk,
            &mut self.head_loc,
            &mut self.head_angle,
            &mut self.head_len,
            &mut self.fwd1,
            &mut self.fwd2,
        ]
    }

    pub fn layer_names() -> [&'static str; 10] {
        [
            "conv1", "conv2", "conv3", "enc_fc", "trunk", "head_loc", "head_angle", "head_len",
            "fwd1", "fwd2",
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    /// Parameters of the shared encoder occupy this prefix of the flat
    /// coordinate space.
    pub fn encoder_param_count(&self) -> usize {
        self.layers()[..4].iter().map(|l| l.param_count()).sum()
    }

    fn locate(&self, i: usize) -> (usize, usize) {
        let mut off = i;
        for (idx, layer) in self.layers().iter().enumerate() {
            let n = layer.param_count();
            if off < n {
                return (idx, off);
            }
            off -= n;
        }
        panic!("parameter coordinate {i} out of range");
    }

    pub fn coord(&self, i: usize) -> f64 {
        let (idx, within) = self.locate(i);
        self.layers()[idx].coord(within)
    }

    pub fn set_coord(&mut self, i: usize, v: f64) {
        let (idx, within) = self.locate(i);
        self.layers_mut()[idx].set_coord(within, v);
    }

    pub fn grad_coord(&self, i: usize) -> f64 {
        let (idx, within) = self.locate(i);
        self.layers()[idx].grad_coord(within)
    }

    /// Name of the layer owning flat coordinate `i`.
    pub fn coord_layer_name(&self, i: usize) -> &'static str {
        Self::layer_names()[self.locate(i).0]
    }

    /// Adds `scale` times accumulated gradients into the layers' own
    /// gradient buffers (the ones the optimizer consumes).
    pub fn absorb_grads(&mut self, grads: &ModelGrads, scale: f64) {
        for (layer, pair) in self.layers_mut().into_iter().zip(grads.pairs()) {
            layer
                .gw
                .add_scaled(&pair.w, scale)
                .expect("gradient shape matches layer");
            layer
                .gb
                .add_scaled(&pair.b, scale)
                .expect("gradient shape matches layer");
        }
    }
}

/// Gradient accumulator for one layer, separate from the layer so several
/// workers can each own a sink over shared read-only parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    pub w: NdArray,
    pub b: NdArray,
}

impl GradPair {
    fn zeros_like(layer: &LayerParams) -> Self {
        GradPair {
            w: NdArray::zeros(layer.w.shape()),
            b: NdArray::zeros(layer.b.shape()),
        }
    }
}

/// Per-layer gradient sinks in the canonical layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub conv1: GradPair,
    pub conv2: GradPair,
    pub conv3: GradPair,
    pub enc_fc: GradPair,
    pub trunk: GradPair,
    pub head_loc: GradPair,
    pub head_angle: GradPair,
    pub head_len: GradPair,
    pub fwd1: GradPair,
    pub fwd2: GradPair,
}

impl ModelGrads {
    pub fn zeros_like(p: &ModelParams) -> Self {
        ModelGrads {
            conv1: GradPair::zeros_like(&p.conv1),
            conv2: GradPair::zeros_like(&p.conv2),
            conv3: GradPair::zeros_like(&p.conv3),
            enc_fc: GradPair::zeros_like(&p.enc_fc),
            trunk: GradPair::zeros_like(&p.trunk),
            head_loc: GradPair::zeros_like(&p.head_loc),
            head_angle: GradPair::zeros_like(&p.head_angle),
            head_len: GradPair::zeros_like(&p.head_len),
            fwd1: GradPair::zeros_like(&p.fwd1),
            fwd2: GradPair::zeros_like(&p.fwd2),
        }
    }

    pub fn pairs(&self) -> [&GradPair; 10] {
        [
            &self.conv1,
            &self.conv2,
            &self.conv3,
            &self.enc_fc,
            &self.trunk,
            &self.head_loc,
            &self.head_angle,
            &self.head_len,
            &self.fwd1,
            &self.fwd2,
        ]
    }

    fn pairs_mut(&mut self) -> [&mut GradPair; 10] {
        [
            &mut self.conv1,
            &mut self.conv2,
            &mut self.conv3,
            &mut self.enc_fc,
            &mut self.trunk,
            &mut self.head_loc,
            &mut self.head_angle,
            &mut self.head_len,
            &mut self.fwd1,
            &mut self.fwd2,
        ]
    }

    /// Adds another sink elementwise; used to reduce per-chunk sinks in a
    /// fixed order.
    pub fn add_from(&mut self, other: &ModelGrads) {
        for (mine, theirs) in self.pairs_mut().into_iter().zip(other.pairs()) {
            mine.w
                .add_scaled(&theirs.w, 1.0)
                .expect("sinks from the same model");
            mine.b
                .add_scaled(&theirs.b, 1.0)
                .expect("sinks from the same model");
        }
    }

    pub fn grad_coord(&self, params: &ModelParams, i: usize) -> f64 {
        let (idx, mut within) = params.locate(i);
        let pair = self.pairs()[idx];
        if within < pair.w.len() {
            pair.w.data()[within]
        } else {
            within -= pair.w.len();
            pair.b.data()[within]
        }
    }
}

/// Image pixels as a single-channel conv input.
pub fn image_input(image: &Image) -> NdArray {
    NdArray::from_vec(&[1, image.size(), image.size()], image.data().to_vec())
        .expect("image data length is size^2")
}

struct EncoderTrace {
    x0: NdArray,
    z1: NdArray,
    a1: NdArray,
    z2: NdArray,
    a2: NdArray,
    z3: NdArray,
    a3: NdArray,
    latent: NdArray,
}

fn encode_traced(image: &Image, params: &ModelParams) -> Result<EncoderTrace> {
    if image.size() != params.image_size {
        return Err(Error::ImageSizeMismatch {
            a: image.size(),
            b: params.image_size,
        });
    }
    let x0 = image_input(image);
    let z1 = conv2d(&x0, &params.conv1, CONV1_S)?;
    let a1 = relu(&z1);
    let z2 = conv2d(&a1, &params.conv2, CONV2_S)?;
    let a2 = relu(&z2);
    let z3 = conv2d(&a2, &params.conv3, CONV3_S)?;
    let a3 = relu(&z3);
    let latent = dense(&a3, &params.enc_fc)?;
    Ok(EncoderTrace {
        x0,
        z1,
        a1,
        z2,
        a2,
        z3,
        a3,
        latent,
    })
}

/// Latent feature vector (length 128) of one observation.
pub fn encode(image: &Image, params: &ModelParams) -> Result<NdArray> {
    Ok(encode_traced(image, params)?.latent)
}

/// Backpropagates a latent gradient through the shared encoder into `sink`.
fn encoder_backward(
    trace: &EncoderTrace,
    params: &ModelParams,
    g_latent: &NdArray,
    sink: &mut ModelGrads,
) -> Result<()> {
    let g_a3 = dense_backward(
        &trace.a3,
        &params.enc_fc.w,
        g_latent,
        &mut sink.enc_fc.w,
        &mut sink.enc_fc.b,
    )?;
    let g_z3 = relu_backward(&trace.z3, &g_a3);
    let g_a2 = conv2d_backward(
        &trace.a2,
        &params.conv3.w,
        CONV3_S,
        &g_z3,
        &mut sink.conv3.w,
        &mut sink.conv3.b,
        true,
    )?
    .expect("input gradient requested");
    let g_z2 = relu_backward(&trace.z2, &g_a2);
    let g_a1 = conv2d_backward(
        &trace.a1,
        &params.conv2.w,
        CONV2_S,
        &g_z2,
        &mut sink.conv2.w,
        &mut sink.conv2.b,
        true,
    )?
    .expect("input gradient requested");
    let g_z1 = relu_backward(&trace.z1, &g_a1);
    conv2d_backward(
        &trace.x0,
        &params.conv1.w,
        CONV1_S,
        &g_z1,
        &mut sink.conv1.w,
        &mut sink.conv1.b,
        false,
    )?;
    Ok(())
}

/// Discretized poke: grid cell index (row-major on the location grid),
/// direction bin, and length bin with [`NOPOKE_BIN`] reserved for no poke.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscretizedAction {
    pub loc: usize,
    pub angle: usize,
    pub len: usize,
}

fn clamp_bin(v: f64, bins: usize) -> usize {
    if v < 0.0 {
        0
    } else if v >= bins as f64 {
        bins - 1
    } else {
        v as usize
    }
}

pub fn discretize(poke: &Poke, arena: &ArenaParams) -> DiscretizedAction {
    if poke.is_nopoke {
        return DiscretizedAction {
            loc: 0,
            angle: 0,
            len: NOPOKE_BIN,
        };
    }
    let size = arena.arena_size as f64;
    let col = clamp_bin(fmath::floor(LOC_GRID as f64 * poke.px / size), LOC_GRID);
    let row = clamp_bin(fmath::floor(LOC_GRID as f64 * poke.py / size), LOC_GRID);
    let theta = fmath::wrap_angle(poke.theta);
    let angle = clamp_bin(
        fmath::floor(theta / (core::f64::consts::PI / 18.0)),
        ANGLE_BINS,
    );
    let (lmin, lmax) = arena.poke_len_range;
    let len = clamp_bin(
        fmath::floor(10.0 * (poke.length - lmin) / (lmax - lmin)),
        LEN_BINS - 1,
    );
    DiscretizedAction {
        loc: row * LOC_GRID + col,
        angle,
        len,
    }
}

/// Maps bins back to bin centers; inverse of [`discretize`] up to half a bin
/// width per coordinate.
pub fn undiscretize(a: &DiscretizedAction, arena: &ArenaParams) -> Poke {
    if a.len == NOPOKE_BIN {
        return Poke::nopoke();
    }
    let size = arena.arena_size as f64;
    let cell = size / LOC_GRID as f64;
    let px = ((a.loc % LOC_GRID) as f64 + 0.5) * cell;
    let py = ((a.loc / LOC_GRID) as f64 + 0.5) * cell;
    let theta = (a.angle as f64 + 0.5) * core::f64::consts::PI / 18.0;
    let (lmin, lmax) = arena.poke_len_range;
    let length = lmin + (a.len as f64 + 0.5) * (lmax - lmin) / 10.0;
    Poke::new(px, py, theta, length)
}

/// Continuous action vector for the forward head, all components in
/// [-1, 1]; no-poke encodes as zeros.
pub fn encode_action(poke: &Poke, arena: &ArenaParams) -> [f64; ACTION_DIM] {
    if poke.is_nopoke {
        return [0.0; ACTION_DIM];
    }
    let size = arena.arena_size as f64;
    let (lmin, lmax) = arena.poke_len_range;
    [
        2.0 * poke.px / size - 1.0,
        2.0 * poke.py / size - 1.0,
        fmath::cos(poke.theta),
        fmath::sin(poke.theta),
        2.0 * (poke.length - lmin) / (lmax - lmin) - 1.0,
    ]
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(a: &NdArray) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in a.data().iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseLogits {
    pub loc: NdArray,
    pub angle: NdArray,
    pub len: NdArray,
}

/// How the location/angle one-hots feeding the later heads are chosen:
/// ground-truth bins while training, the argmax chain at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    TeacherForced(DiscretizedAction),
    Greedy,
}

struct InverseTrace {
    trunk_in: NdArray,
    trunk_z: NdArray,
    trunk_a: NdArray,
    angle_in: NdArray,
    len_in: NdArray,
    logits: InverseLogits,
    /// Argmax of each head under the conditioning actually applied.
    chosen: DiscretizedAction,
}

fn concat(parts: &[&[f64]]) -> NdArray {
    let total = parts.iter().map(|p| p.len()).sum();
    let mut data = Vec::with_capacity(total);
    for p in parts {
        data.extend_from_slice(p);
    }
    NdArray::from_vec(&[total], data).expect("concat length matches")
}

fn one_hot(bins: usize, idx: usize) -> NdArray {
    let mut a = NdArray::zeros(&[bins]);
    a.data_mut()[idx] = 1.0;
    a
}

fn check_latent(x: &NdArray, what: &'static str) -> Result<()> {
    if x.len() != LATENT_DIM {
        return Err(Error::ShapeMismatch {
            op: what,
            expected: alloc::format!("latent of {LATENT_DIM} values"),
            got: alloc::format!("{} values", x.len()),
        });
    }
    Ok(())
}

fn inverse_traced(
    x_t: &NdArray,
    x_t1: &NdArray,
    params: &ModelParams,
    cond: Conditioning,
) -> Result<InverseTrace> {
    check_latent(x_t, "inverse_predict")?;
    check_latent(x_t1, "inverse_predict")?;
    let trunk_in = concat(&[x_t.data(), x_t1.data()]);
    let trunk_z = dense(&trunk_in, &params.trunk)?;
    let trunk_a = relu(&trunk_z);
    let logits_loc = dense(&trunk_a, &params.head_loc)?;
    let loc_bin = match cond {
        Conditioning::TeacherForced(a) => a.loc,
        Conditioning::Greedy => argmax(&logits_loc),
    };
    let loc_hot = one_hot(LOC_BINS, loc_bin);
    let angle_in = concat(&[trunk_a.data(), loc_hot.data()]);
    let logits_angle = dense(&angle_in, &params.head_angle)?;
    let angle_bin = match cond {
        Conditioning::TeacherForced(a) => a.angle,
        Conditioning::Greedy => argmax(&logits_angle),
    };
    let angle_hot = one_hot(ANGLE_BINS, angle_bin);
    let len_in = concat(&[trunk_a.data(), loc_hot.data(), angle_hot.data()]);
    let logits_len = dense(&len_in, &params.head_len)?;
    let chosen = DiscretizedAction {
        loc: argmax(&logits_loc),
        angle: argmax(&logits_angle),
        len: argmax(&logits_len),
    };
    Ok(InverseTrace {
        trunk_in,
        trunk_z,
        trunk_a,
        angle_in,
        len_in,
        logits: InverseLogits {
            loc: logits_loc,
            angle: logits_angle,
            len: logits_len,
        },
        chosen,
    })
}

/// Location, angle, and length logits (400, 36, 11) for a latent pair.
pub fn inverse_predict(
    x_t: &NdArray,
    x_t1: &NdArray,
    params: &ModelParams,
    cond: Conditioning,
) -> Result<InverseLogits> {
    Ok(inverse_traced(x_t, x_t1, params, cond)?.logits)
}

/// Greedy-chain action prediction: argmax location conditions the angle
/// head, argmax of both condition the length head.
pub fn predict_action_bins(
    x_t: &NdArray,
    x_t1: &NdArray,
    params: &ModelParams,
) -> Result<DiscretizedAction> {
    Ok(inverse_traced(x_t, x_t1, params, Conditioning::Greedy)?.chosen)
}

struct ForwardTrace {
    fin: NdArray,
    z: NdArray,
    a: NdArray,
    pred: NdArray,
}

fn forward_traced(x_t: &NdArray, action: &[f64; ACTION_DIM], params: &ModelParams) -> Result<ForwardTrace> {
    check_latent(x_t, "forward_predict")?;
    let fin = concat(&[x_t.data(), action]);
    let z = dense(&fin, &params.fwd1)?;
    let a = relu(&z);
    let pred = dense(&a, &params.fwd2)?;
    Ok(ForwardTrace { fin, z, a, pred })
}

/// Predicted next latent for a latent and a poke.
pub fn forward_predict(
    x_t: &NdArray,
    poke: &Poke,
    params: &ModelParams,
    arena: &ArenaParams,
) -> Result<NdArray> {
    Ok(forward_traced(x_t, &encode_action(poke, arena), params)?.pred)
}

/// Loss composition. `joint(lambda)` is the training default; the inverse
/// weight exists so the latent-collapse property of a forward-only loss can
/// be exercised, and `detach_forward_target` controls whether the L1 target
/// latent is treated as a constant (default) or backpropagated through.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub inverse: f64,
    pub forward: f64,
    pub detach_forward_target: bool,
}

impl LossWeights {
    pub fn joint(lambda: f64) -> Self {
        LossWeights {
            inverse: 1.0,
            forward: lambda,
            detach_forward_target: true,
        }
    }

    /// Forward loss alone with gradients flowing into the target branch;
    /// this is the degenerate setting that collapses the latent space.
    pub fn forward_only_undetached(lambda: f64) -> Self {
        LossWeights {
            inverse: 0.0,
            forward: lambda,
            detach_forward_target: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inverse < 0.0 || self.forward < 0.0 {
            return Err(Error::InvalidParams(alloc::format!(
                "loss weights must be nonnegative, got inverse {} forward {}",
                self.inverse,
                self.forward
            )));
        }
        Ok(())
    }
}

/// Loss breakdown for one sample. `total = inverse_weight * inverse +
/// forward_weight * forward`; a head whose weight is zero is skipped and
/// reports zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SampleLosses {
    pub total: f64,
    pub inverse: f64,
    pub forward: f64,
    pub loc: f64,
    pub angle: f64,
    pub len: f64,
}

struct HeadEval {
    losses: SampleLosses,
    // Per-head scaled logit gradients, present only when training.
    inv_grads: Option<(InverseTrace, NdArray, NdArray, NdArray)>,
    fwd_grads: Option<(ForwardTrace, NdArray)>,
}

/// Runs both heads on a latent pair, computing losses and (optionally) the
/// logit-level gradients already scaled by the loss weights. The location
/// and angle terms are skipped for a no-poke sample, whose only signal is
/// the reserved length bin. `l1_target` is normally `x_t1`; the gradient
/// checker passes a frozen copy to reproduce the detached-target semantics.
#[allow(clippy::too_many_arguments)]
fn heads_eval(
    x_t: &NdArray,
    x_t1: &NdArray,
    l1_target: &NdArray,
    poke: &Poke,
    params: &ModelParams,
    arena: &ArenaParams,
    weights: &LossWeights,
    with_grads: bool,
) -> Result<HeadEval> {
    weights.validate()?;
    let mut losses = SampleLosses::default();
    let mut inv_grads = None;
    let mut fwd_grads = None;
    let bins = discretize(poke, arena);

    if weights.inverse != 0.0 {
        let trace = inverse_traced(x_t, x_t1, params, Conditioning::TeacherForced(bins))?;
        let mut g_loc = NdArray::zeros(&[LOC_BINS]);
        let mut g_angle = NdArray::zeros(&[ANGLE_BINS]);
        if !poke.is_nopoke {
            let (l_loc, g) = softmax_cross_entropy(&trace.logits.loc, bins.loc)?;
            losses.loc = l_loc;
            g_loc = g;
            let (l_angle, g) = softmax_cross_entropy(&trace.logits.angle, bins.angle)?;
            losses.angle = l_angle;
            g_angle = g;
        }
        let (l_len, g_len) = softmax_cross_entropy(&trace.logits.len, bins.len)?;
        losses.len = l_len;
        losses.inverse = losses.loc + losses.angle + losses.len;
        if with_grads {
            inv_grads = Some((trace, g_loc, g_angle, g_len));
        }
    }

    if weights.forward != 0.0 {
        let action = encode_action(poke, arena);
        let trace = forward_traced(x_t, &action, params)?;
        let (l_fwd, g_pred) = l1_loss(&trace.pred, l1_target)?;
        losses.forward = l_fwd;
        if with_grads {
            fwd_grads = Some((trace, g_pred));
        }
    }

    losses.total = weights.inverse * losses.inverse + weights.forward * losses.forward;
    if !losses.total.is_finite() {
        return Err(Error::NonFinite { what: "loss" });
    }
    Ok(HeadEval {
        losses,
        inv_grads,
        fwd_grads,
    })
}

/// Loss of one latent pair without touching the encoder; used by the
/// gradient checker to probe head parameters against cached latents.
pub fn sample_loss_from_latents(
    x_t: &NdArray,
    x_t1: &NdArray,
    poke: &Poke,
    params: &ModelParams,
    arena: &ArenaParams,
    weights: &LossWeights,
) -> Result<SampleLosses> {
    Ok(heads_eval(x_t, x_t1, x_t1, poke, params, arena, weights, false)?.losses)
}

fn interaction_traces(
    inter: &Interaction,
    params: &ModelParams,
    arena: &ArenaParams,
) -> Result<(EncoderTrace, EncoderTrace)> {
    let img_t = render(&inter.pose_t, arena);
    let img_t1 = render(&inter.pose_t1, arena);
    Ok((
        encode_traced(&img_t, params)?,
        encode_traced(&img_t1, params)?,
    ))
}

/// Total loss of one simulated interaction under the given weights.
pub fn sample_loss(
    inter: &Interaction,
    params: &ModelParams,
    arena: &ArenaParams,
    weights: &LossWeights,
) -> Result<SampleLosses> {
    let (tr_t, tr_t1) = interaction_traces(inter, params, arena)?;
    sample_loss_from_latents(&tr_t.latent, &tr_t1.latent, &inter.poke, params, arena, weights)
}

/// Loss plus gradients of one interaction, accumulated into `sink`. The
/// encoder receives contributions from both image branches (shared
/// weights); the L1 target branch contributes only when
/// `detach_forward_target` is off.
pub fn sample_loss_grad(
    inter: &Interaction,
    params: &ModelParams,
    arena: &ArenaParams,
    weights: &LossWeights,
    sink: &mut ModelGrads,
) -> Result<SampleLosses> {
    let img_t = render(&inter.pose_t, arena);
    let img_t1 = render(&inter.pose_t1, arena);
    image_pair_loss_grad(&img_t, &img_t1, &inter.poke, params, arena, weights, sink)
}

/// As `sample_loss_grad`, but on caller-supplied images instead of
/// rendered poses. The gradient machinery itself never assumes binary
/// pixels.
#[allow(clippy::too_many_arguments)]
pub fn image_pair_loss_grad(
    img_t: &Image,
    img_t1: &Image,
    poke: &Poke,
    params: &ModelParams,
    arena: &ArenaParams,
    weights: &LossWeights,
    sink: &mut ModelGrads,
) -> Result<SampleLosses> {
    let tr_t = encode_traced(img_t, params)?;
    let tr_t1 = encode_traced(img_t1, params)?;
    let eval = heads_eval(
        &tr_t.latent,
        &tr_t1.latent,
        &tr_t1.latent,
        poke,
        params,
        arena,
        weights,
        true,
    )?;

    let mut g_xt = NdArray::zeros(&[LATENT_DIM]);
    let mut g_xt1 = NdArray::zeros(&[LATENT_DIM]);

    if let Some((trace, g_loc, g_angle, g_len)) = &eval.inv_grads {
        let wi = weights.inverse;
        let mut g_trunk_a = NdArray::zeros(&[LATENT_DIM]);
        let scale_into = |g: &NdArray, scale: f64| -> NdArray {
            let mut s = NdArray::zeros(g.shape());
            s.add_scaled(g, scale).expect("same shape");
            s
        };
        if !poke.is_nopoke {
            let g = scale_into(g_loc, wi);
            let gx = dense_backward(
                &trace.trunk_a,
                &params.head_loc.w,
                &g,
                &mut sink.head_loc.w,
                &mut sink.head_loc.b,
            )?;
            g_trunk_a.add_scaled(&gx, 1.0).expect("same shape");
            let g = scale_into(g_angle, wi);
            let gx = dense_backward(
                &trace.angle_in,
                &params.head_angle.w,
                &g,
                &mut sink.head_angle.w,
                &mut sink.head_angle.b,
            )?;
            for (acc, &v) in g_trunk_a.data_mut().iter_mut().zip(gx.data()) {
                *acc += v;
            }
        }
        let g = scale_into(g_len, wi);
        let gx = dense_backward(
            &trace.len_in,
            &params.head_len.w,
            &g,
            &mut sink.head_len.w,
            &mut sink.head_len.b,
        )?;
        for (acc, &v) in g_trunk_a.data_mut().iter_mut().zip(gx.data()) {
            *acc += v;
        }
        let g_trunk_z = relu_backward(&trace.trunk_z, &g_trunk_a);
        let g_trunk_in = dense_backward(
            &trace.trunk_in,
            &params.trunk.w,
            &g_trunk_z,
            &mut sink.trunk.w,
            &mut sink.trunk.b,
        )?;
        for (acc, &v) in g_xt.data_mut().iter_mut().zip(&g_trunk_in.data()[..LATENT_DIM]) {
            *acc += v;
        }
        for (acc, &v) in g_xt1
            .data_mut()
            .iter_mut()
            .zip(&g_trunk_in.data()[LATENT_DIM..])
        {
            *acc += v;
        }
    }

    if let Some((trace, g_pred_raw)) = &eval.fwd_grads {
        let wf = weights.forward;
        let mut g_pred = NdArray::zeros(&[LATENT_DIM]);
        g_pred.add_scaled(g_pred_raw, wf).expect("same shape");
        let g_a = dense_backward(
            &trace.a,
            &params.fwd2.w,
            &g_pred,
            &mut sink.fwd2.w,
            &mut sink.fwd2.b,
        )?;
        let g_z = relu_backward(&trace.z, &g_a);
        let g_fin = dense_backward(
            &trace.fin,
            &params.fwd1.w,
            &g_z,
            &mut sink.fwd1.w,
            &mut sink.fwd1.b,
        )?;
        for (acc, &v) in g_xt.data_mut().iter_mut().zip(&g_fin.data()[..LATENT_DIM]) {
            *acc += v;
        }
        if !weights.detach_forward_target {
            // d|pred - target|/d target = -d/d pred.
            g_xt1.add_scaled(g_pred_raw, -wf).expect("same shape");
        }
    }

    if g_xt.data().iter().any(|&v| v != 0.0) {
        encoder_backward(&tr_t, params, &g_xt, sink)?;
    }
    if g_xt1.data().iter().any(|&v| v != 0.0) {
        encoder_backward(&tr_t1, params, &g_xt1, sink)?;
    }
    Ok(eval.losses)
}

/// Gradient-check adapter over the full model: the loss is the mean over a
/// fixed set of interactions. Analytic gradients are computed once
/// up front; finite-difference probes of head parameters reuse cached
/// latents (the encoder output cannot change under a head perturbation).
///
/// With `detach_forward_target` set, the differenced loss holds the L1
/// target latent at its unperturbed value. That is the function whose
/// gradient the detached backward pass actually computes; differencing the
/// raw loss instead would smuggle the target branch back in and produce a
/// systematic mismatch on encoder coordinates.
pub struct ModelLossCheck {
    params: ModelParams,
    arena: ArenaParams,
    pokes: Vec<Poke>,
    images: Vec<(Image, Image)>,
    latents: Vec<(NdArray, NdArray)>,
    grads: ModelGrads,
    weights: LossWeights,
    encoder_params: usize,
    inv_n: f64,
}

impl ModelLossCheck {
    pub fn new(
        params: ModelParams,
        arena: ArenaParams,
        samples: &[Interaction],
        weights: LossWeights,
    ) -> Result<Self> {
        let items = samples
            .iter()
            .map(|inter| {
                (
                    render(&inter.pose_t, &arena),
                    render(&inter.pose_t1, &arena),
                    inter.poke,
                )
            })
            .collect::<Vec<_>>();
        Self::from_image_pairs(params, arena, items, weights)
    }

    /// Checks the same loss on caller-supplied image pairs. Rendered
    /// scenes are binary and mostly empty, which parks zero-initialized
    /// conv biases exactly on relu kinks and produces many near-zero
    /// gradient coordinates; generic dense images avoid both
    /// finite-difference artifacts.
    pub fn from_image_pairs(
        params: ModelParams,
        arena: ArenaParams,
        items: Vec<(Image, Image, Poke)>,
        weights: LossWeights,
    ) -> Result<Self> {
        assert!(!items.is_empty());
        let mut grads = ModelGrads::zeros_like(&params);
        let mut images = Vec::with_capacity(items.len());
        let mut pokes = Vec::with_capacity(items.len());
        for (img_t, img_t1, poke) in items {
            image_pair_loss_grad(&img_t, &img_t1, &poke, &params, &arena, &weights, &mut grads)?;
            images.push((img_t, img_t1));
            pokes.push(poke);
        }
        let mut check = ModelLossCheck {
            encoder_params: params.encoder_param_count(),
            inv_n: 1.0 / pokes.len() as f64,
            params,
            arena,
            pokes,
            images,
            latents: Vec::new(),
            grads,
            weights,
        };
        check.refresh_latents()?;
        Ok(check)
    }

    fn refresh_latents(&mut self) -> Result<()> {
        self.latents.clear();
        for (img_t, img_t1) in &self.images {
            self.latents.push((
                encode(img_t, &self.params)?,
                encode(img_t1, &self.params)?,
            ));
        }
        Ok(())
    }

    fn mean_loss(&self, through_encoder: bool) -> f64 {
        let mut total = 0.0;
        for (i, poke) in self.pokes.iter().enumerate() {
            let losses = if through_encoder {
                let (img_t, img_t1) = &self.images[i];
                let x_t = encode(img_t, &self.params).expect("sizes fixed");
                let x_t1 = encode(img_t1, &self.params).expect("sizes fixed");
                let target = if self.weights.detach_forward_target {
                    &self.latents[i].1
                } else {
                    &x_t1
                };
                heads_eval(
                    &x_t,
                    &x_t1,
                    target,
                    poke,
                    &self.params,
                    &self.arena,
                    &self.weights,
                    false,
                )
                .map(|e| e.losses)
            } else {
                let (x_t, x_t1) = &self.latents[i];
                sample_loss_from_latents(x_t, x_t1, poke, &self.params, &self.arena, &self.weights)
            };
            total += losses.expect("loss finite during check").total;
        }
        total * self.inv_n
    }
}

impl crate::nn::GradCheckTarget for ModelLossCheck {
    fn dim(&self) -> usize {
        self.params.param_count()
    }

    fn analytic_grad(&mut self, coord: usize) -> f64 {
        self.grads.grad_coord(&self.params, coord) * self.inv_n
    }

    fn loss_with_offset(&mut self, coord: usize, delta: f64) -> f64 {
        let orig = self.params.coord(coord);
        self.params.set_coord(coord, orig + delta);
        let loss = self.mean_loss(coord < self.encoder_params);
        self.params.set_coord(coord, orig);
        loss
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{max_rel_error, GradCheckConfig};
    use crate::sim::{generate_interactions, Pose};

    const TEST_SIZE: usize = 40;

    fn test_arena() -> ArenaParams {
        ArenaParams {
            arena_size: TEST_SIZE,
            ..ArenaParams::default()
        }
    }

    fn test_params(seed: u64) -> ModelParams {
        ModelParams::init(TEST_SIZE, seed).unwrap()
    }

    fn samples(n: usize, seed: u64) -> Vec<Interaction> {
        generate_interactions(n, seed, &test_arena()).unwrap()
    }

    #[test]
    fn parameter_counts_are_frozen() {
        // conv stack 18512, enc_fc flat 512 -> 65664, heads and forward
        // layers fixed; totals hand-computed from the layer dimensions.
        let p64 = ModelParams::init(64, 0).unwrap();
        assert_eq!(p64.param_count(), 227_595);
        assert_eq!(p64.encoder_param_count(), 84_176);
        let p40 = test_params(0);
        assert_eq!(p40.param_count(), 166_155);
        let names = ModelParams::layer_names();
        assert_eq!(names.len(), p40.layers().len());
    }

    #[test]
    fn conv_chain_rejects_too_small_images() {
        assert!(ModelParams::init(30, 0).is_err());
        assert!(ModelParams::init(36, 0).is_ok());
    }

    #[test]
    fn encode_is_deterministic_length_128() {
        let params = test_params(1);
        let img = render(&Pose::new(20.0, 20.0, 0.3), &test_arena());
        let a = encode(&img, &params).unwrap();
        let b = encode(&img, &params).unwrap();
        assert_eq!(a.len(), LATENT_DIM);
        assert_eq!(a, b);
    }

    #[test]
    fn encode_distinguishes_translated_images() {
        let params = test_params(2);
        let arena = test_arena();
        let a = encode(&render(&Pose::new(14.0, 20.0, 0.0), &arena), &params).unwrap();
        let b = encode(&render(&Pose::new(26.0, 20.0, 0.0), &arena), &params).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn encode_rejects_wrong_image_size() {
        let params = test_params(3);
        let img = render(&Pose::new(32.0, 32.0, 0.0), &ArenaParams::default());
        assert!(matches!(
            encode(&img, &params),
            Err(Error::ImageSizeMismatch { .. })
        ));
    }

    #[test]
    fn inverse_logit_arities() {
        let params = test_params(4);
        let arena = test_arena();
        let x = encode(&render(&Pose::new(20.0, 20.0, 0.0), &arena), &params).unwrap();
        let y = encode(&render(&Pose::new(24.0, 20.0, 0.0), &arena), &params).unwrap();
        let logits = inverse_predict(&x, &y, &params, Conditioning::Greedy).unwrap();
        assert_eq!(logits.loc.len(), 400);
        assert_eq!(logits.angle.len(), 36);
        assert_eq!(logits.len.len(), 11);
    }

    #[test]
    fn zero_heads_give_uniform_logits() {
        let mut params = test_params(5);
        for layer in [
            &mut params.head_loc,
            &mut params.head_angle,
            &mut params.head_len,
        ] {
            layer.w.fill(0.0);
            layer.b.fill(0.0);
        }
        let arena = test_arena();
        let x = encode(&render(&Pose::new(20.0, 20.0, 0.0), &arena), &params).unwrap();
        let logits = inverse_predict(&x, &x, &params, Conditioning::Greedy).unwrap();
        for head in [&logits.loc, &logits.angle, &logits.len] {
            assert!(head.data().iter().all(|&v| v == 0.0), "uniform logits");
        }
    }

    #[test]
    fn location_conditioning_changes_angle_logits() {
        let params = test_params(6);
        let arena = test_arena();
        let x = encode(&render(&Pose::new(18.0, 22.0, 0.4), &arena), &params).unwrap();
        let y = encode(&render(&Pose::new(23.0, 20.0, 0.1), &arena), &params).unwrap();
        let cond_a = Conditioning::TeacherForced(DiscretizedAction {
            loc: 5,
            angle: 0,
            len: 0,
        });
        let cond_b = Conditioning::TeacherForced(DiscretizedAction {
            loc: 7,
            angle: 0,
            len: 0,
        });
        let la = inverse_predict(&x, &y, &params, cond_a).unwrap();
        let lb = inverse_predict(&x, &y, &params, cond_b).unwrap();
        assert_eq!(la.loc, lb.loc, "location head is upstream of conditioning");
        assert_ne!(la.angle, lb.angle, "angle head must see the location");
    }

    #[test]
    fn forward_zero_weights_zero_prediction() {
        let mut params = test_params(7);
        params.fwd1.w.fill(0.0);
        params.fwd1.b.fill(0.0);
        params.fwd2.w.fill(0.0);
        params.fwd2.b.fill(0.0);
        let arena = test_arena();
        let x = encode(&render(&Pose::new(20.0, 20.0, 0.0), &arena), &params).unwrap();
        let poke = Poke::new(15.0, 20.0, 0.0, 8.0);
        let pred = forward_predict(&x, &poke, &params, &arena).unwrap();
        assert_eq!(pred.len(), LATENT_DIM);
        assert!(pred.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discretize_frozen_examples() {
        let arena = ArenaParams::default();
        // 355 degrees falls in the last 10-degree bin.
        let a = discretize(
            &Poke::new(1.0, 1.0, 355.0 * core::f64::consts::PI / 180.0, 5.0),
            &arena,
        );
        assert_eq!(a.angle, 35);
        // Center of a 64 image: cell (10, 10) row-major.
        let a = discretize(&Poke::new(32.0, 32.0, 0.0, 5.0), &arena);
        assert_eq!(a.loc, 210);
        // No-poke reserves length bin 10.
        let a = discretize(&Poke::nopoke(), &arena);
        assert_eq!(a.len, NOPOKE_BIN);
        assert_eq!(undiscretize(&a, &arena), Poke::nopoke());
        // Extremes clamp instead of overflowing.
        let a = discretize(&Poke::new(63.999, 0.0, 0.0, 20.0), &arena);
        assert_eq!(a.loc, 19);
        assert_eq!(a.len, 9);
    }

    #[test]
    fn discretize_roundtrip_within_half_bin() {
        let arena = ArenaParams::default();
        let mut rng = stream(8, StreamKind::GradCheck, 0);
        let size = arena.arena_size as f64;
        let (lmin, lmax) = arena.poke_len_range;
        for _ in 0..200 {
            let poke = Poke::new(
                crate::rng::uniform_in(&mut rng, 0.0, size),
                crate::rng::uniform_in(&mut rng, 0.0, size),
                crate::rng::uniform_in(&mut rng, 0.0, core::f64::consts::TAU),
                crate::rng::uniform_in(&mut rng, lmin, lmax),
            );
            let back = undiscretize(&discretize(&poke, &arena), &arena);
            let half_cell = size / (2.0 * LOC_GRID as f64);
            assert!((back.px - poke.px).abs() <= half_cell + 1e-12);
            assert!((back.py - poke.py).abs() <= half_cell + 1e-12);
            let mut dth = fmath::abs(fmath::wrap_angle(back.theta - poke.theta));
            if dth > core::f64::consts::PI {
                dth = core::f64::consts::TAU - dth;
            }
            assert!(dth <= core::f64::consts::PI / 36.0 + 1e-12);
            assert!((back.length - poke.length).abs() <= (lmax - lmin) / 20.0 + 1e-12);
        }
    }

    #[test]
    fn action_encoding_bounds_and_nopoke() {
        let arena = ArenaParams::default();
        let a = encode_action(&Poke::new(32.0, 0.0, 1.0, 20.0), &arena);
        for v in a {
            assert!((-1.0..=1.0).contains(&v), "component {v} out of range");
        }
        assert_eq!(encode_action(&Poke::nopoke(), &arena), [0.0; ACTION_DIM]);
    }

    #[test]
    fn lambda_zero_loss_is_exactly_the_inverse_loss() {
        let params = test_params(9);
        let arena = test_arena();
        for inter in samples(5, 10) {
            let l = sample_loss(&inter, &params, &arena, &LossWeights::joint(0.0)).unwrap();
            assert_eq!(l.total, l.inverse);
            assert_eq!(l.forward, 0.0);
        }
    }

    #[test]
    fn joint_loss_is_additive_in_lambda() {
        let params = test_params(11);
        let arena = test_arena();
        let lambda = 0.1;
        for inter in samples(10, 12) {
            let with = sample_loss(&inter, &params, &arena, &LossWeights::joint(lambda)).unwrap();
            let without = sample_loss(&inter, &params, &arena, &LossWeights::joint(0.0)).unwrap();
            let diff = with.total - without.total;
            let expect = lambda * with.forward;
            assert!(
                (diff - expect).abs() <= 1e-10 * expect.abs().max(1.0),
                "diff {diff} expected {expect}"
            );
        }
    }

    #[test]
    fn perfect_forward_prediction_gives_zero_forward_loss() {
        let params = test_params(13);
        let arena = test_arena();
        let x = encode(&render(&Pose::new(20.0, 20.0, 0.0), &arena), &params).unwrap();
        let (loss, _) = l1_loss(&x, &x).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn nopoke_sample_trains_only_the_length_head() {
        let params = test_params(14);
        let arena = test_arena();
        let pose = Pose::new(20.0, 20.0, 0.5);
        let inter = Interaction {
            pose_t: pose,
            poke: Poke::nopoke(),
            pose_t1: pose,
        };
        let mut sink = ModelGrads::zeros_like(&params);
        let l = sample_loss_grad(&inter, &params, &arena, &LossWeights::joint(0.1), &mut sink)
            .unwrap();
        assert_eq!(l.loc, 0.0);
        assert_eq!(l.angle, 0.0);
        assert!(l.len > 0.0);
        assert!(sink.head_loc.w.data().iter().all(|&v| v == 0.0));
        assert!(sink.head_angle.w.data().iter().all(|&v| v == 0.0));
        assert!(sink.head_len.w.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradients_accumulate_across_calls() {
        let params = test_params(15);
        let arena = test_arena();
        let inter = samples(1, 16)[0];
        let weights = LossWeights::joint(0.1);
        let mut once = ModelGrads::zeros_like(&params);
        sample_loss_grad(&inter, &params, &arena, &weights, &mut once).unwrap();
        let mut twice = ModelGrads::zeros_like(&params);
        sample_loss_grad(&inter, &params, &arena, &weights, &mut twice).unwrap();
        sample_loss_grad(&inter, &params, &arena, &weights, &mut twice).unwrap();
        for (a, b) in once.pairs().iter().zip(twice.pairs()) {
            for (x, y) in a.w.data().iter().zip(b.w.data()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn detaching_the_forward_target_changes_encoder_gradients() {
        let params = test_params(17);
        let arena = test_arena();
        let inter = samples(1, 18)[0];
        let mut detached = ModelGrads::zeros_like(&params);
        let mut undetached = ModelGrads::zeros_like(&params);
        sample_loss_grad(
            &inter,
            &params,
            &arena,
            &LossWeights {
                inverse: 0.0,
                forward: 1.0,
                detach_forward_target: true,
            },
            &mut detached,
        )
        .unwrap();
        sample_loss_grad(
            &inter,
            &params,
            &arena,
            &LossWeights::forward_only_undetached(1.0),
            &mut undetached,
        )
        .unwrap();
        assert_ne!(detached.conv1.w, undetached.conv1.w);
        // Forward-head gradients are identical; only the encoder sees the
        // target branch.
        assert_eq!(detached.fwd2.w, undetached.fwd2.w);
    }

    #[test]
    fn negative_loss_weights_are_rejected() {
        let params = test_params(19);
        let arena = test_arena();
        let inter = samples(1, 20)[0];
        let weights = LossWeights {
            inverse: -1.0,
            forward: 0.0,
            detach_forward_target: true,
        };
        assert!(sample_loss(&inter, &params, &arena, &weights).is_err());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let params = test_params(21);
        let arena = test_arena();
        let inter = samples(2, 22);
        let mut check =
            ModelLossCheck::new(params, arena, &inter, LossWeights::joint(0.1)).unwrap();
        let cfg = GradCheckConfig {
            sample_fraction: 0.001,
            ..GradCheckConfig::default()
        };
        let mut rng = stream(23, StreamKind::GradCheck, 0);
        let report = max_rel_error(&mut check, &cfg, &mut rng);
        assert!(report.checked >= 166);
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
