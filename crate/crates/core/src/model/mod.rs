//! A small fully-convolutional reference regressor.
//!
//! The trunk stacks stride-2 3x3 convolutions down to `1/downsample`
//! resolution, followed by one stride-1 refinement convolution. Each level
//! head is a linear 1x1 convolution over the trunk features concatenated
//! with all maps predicted so far, so later (sharper) levels see the earlier
//! ones. The count head is linear in the channel-summed trunk features; in
//! `concat_feature` fusion it additionally consumes the clamped sum of every
//! predicted map. Map outputs are unconstrained.
//!
//! Hidden activations are shifted softplus, `ln(1 + e^z) - ln 2`: zero at
//! zero like a rectifier, but smooth, which keeps finite-difference gradient
//! checks meaningful. Parameters are stored as f32; all arithmetic runs in
//! f64, so saving and reloading a checkpoint reproduces forward passes
//! bit-identically.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{train, Adam, EpochStats, TrainConfig, TrainHistory, TrainSample};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{DensityError, DensityMap, DensityStack, Level};
use crate::loss::{
    composition_loss_grad, fuse_counts, FusionMode, LossConfig, LossError, LossReport,
};
use crate::raster::GrayImage;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    BadConfig(String),
    #[error("patch is {got_w}x{got_h}, model expects {expected}x{expected}")]
    PatchSize {
        got_w: usize,
        got_h: usize,
        expected: usize,
    },
    #[error("non-finite values produced by {location}")]
    NonFinite { location: String },
    #[error("loss levels {loss:?} do not match model levels {model:?}")]
    LevelsMismatch { model: Vec<Level>, loss: Vec<Level> },
    #[error("parameter payload holds {got} values, expected {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("{0} must not be empty")]
    EmptyDataset(&'static str),
    #[error("epochs must be >= 1")]
    BadEpochs,
    #[error("batch size must be >= 1")]
    BadBatch,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid checkpoint: {reason}")]
    Format { path: String, reason: String },
}

/// Architecture hyperparameters. `channels` lists the output width of each
/// stride-2 stage; the stage count must equal `log2(downsample)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub downsample: usize,
    pub channels: Vec<usize>,
    pub levels: Vec<Level>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            downsample: 8,
            channels: vec![6, 12, 12],
            levels: vec![Level::Finite(1.0), Level::Finite(2.0), Level::Inf],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::BadConfig(msg));
        if self.input_size == 0 || self.downsample == 0 {
            return fail("input_size and downsample must be nonzero".into());
        }
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return fail(format!(
                "downsample must be a power of two >= 2 (got {})",
                self.downsample
            ));
        }
        if self.input_size % self.downsample != 0 {
            return fail(format!(
                "input_size {} not divisible by downsample {}",
                self.input_size, self.downsample
            ));
        }
        let stages = self.downsample.trailing_zeros() as usize;
        if self.channels.len() != stages {
            return fail(format!(
                "downsample {} needs {} stride-2 stages, got {} channel entries",
                self.downsample,
                stages,
                self.channels.len()
            ));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return fail("channel widths must be nonzero".into());
        }
        if self.levels.is_empty() {
            return fail("at least one predicted level required".into());
        }
        for pair in self.levels.windows(2) {
            if pair[0].partial_cmp(&pair[1]) != Some(std::cmp::Ordering::Less) {
                return fail("levels must be strictly increasing".into());
            }
        }
        Ok(())
    }

    /// Side length of the predicted maps.
    pub fn map_size(&self) -> usize {
        self.input_size / self.downsample
    }

    fn trunk_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Conv {
    /// Row-major `[out_ch][in_ch][ky][kx]`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Head {
    /// One weight per input channel (trunk channels plus earlier maps).
    pub weights: Vec<f32>,
    pub bias: f32,
}

/// Trained or initialized weights of the reference model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    cfg: ModelConfig,
    pub(crate) stages: Vec<Conv>,
    pub(crate) refine: Conv,
    pub(crate) heads: Vec<Head>,
    pub(crate) count_w_trunk: Vec<f32>,
    pub(crate) count_w_sums: Vec<f32>,
    pub(crate) count_b: f32,
}

impl ModelParams {
    /// Fan-in scaled uniform init (`+-sqrt(3 / fan_in)`), zero biases,
    /// deterministic in `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let sample = |fan_in: usize, n: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
            let limit = (3.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-limit..limit) as f32).collect()
        };
        let mut stages = Vec::with_capacity(cfg.channels.len());
        let mut in_ch = 1;
        for &out_ch in &cfg.channels {
            let fan_in = in_ch * 9;
            stages.push(Conv {
                weights: sample(fan_in, out_ch * fan_in, &mut rng),
                bias: vec![0.0; out_ch],
                in_ch,
                out_ch,
                ksize: 3,
                stride: 2,
                pad: 1,
            });
            in_ch = out_ch;
        }
        let c = cfg.trunk_channels();
        let refine = Conv {
            weights: sample(c * 9, c * c * 9, &mut rng),
            bias: vec![0.0; c],
            in_ch: c,
            out_ch: c,
            ksize: 3,
            stride: 1,
            pad: 1,
        };
        let heads = (0..cfg.levels.len())
            .map(|h| Head {
                weights: sample(c + h, c + h, &mut rng),
                bias: 0.0,
            })
            .collect();
        let count_fan = c + cfg.levels.len();
        let count_w_trunk = sample(count_fan, c, &mut rng);
        let count_w_sums = sample(count_fan, cfg.levels.len(), &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            refine,
            heads,
            count_w_trunk,
            count_w_sums,
            count_b: 0.0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(Conv::param_count).sum::<usize>()
            + self.refine.param_count()
            + self
                .heads
                .iter()
                .map(|h| h.weights.len() + 1)
                .sum::<usize>()
            + self.count_w_trunk.len()
            + self.count_w_sums.len()
            + 1
    }

    /// All parameters in declaration order: stage convs, refine conv, level
    /// heads, count head. Within a conv: weights then bias.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for conv in self.stages.iter().chain(std::iter::once(&self.refine)) {
            out.extend_from_slice(&conv.weights);
            out.extend_from_slice(&conv.bias);
        }
        for head in &self.heads {
            out.extend_from_slice(&head.weights);
            out.push(head.bias);
        }
        out.extend_from_slice(&self.count_w_trunk);
        out.extend_from_slice(&self.count_w_sums);
        out.push(self.count_b);
        out
    }

    /// Rebuild parameters from [`ModelParams::flatten`] order.
    pub fn from_flat(cfg: &ModelConfig, flat: &[f32]) -> Result<Self, ModelError> {
        let mut params = ModelParams::init(cfg)?;
        let expected = params.param_count();
        if flat.len() != expected {
            return Err(ModelError::ParamCount {
                expected,
                got: flat.len(),
            });
        }
        params.assign_flat(flat);
        Ok(params)
    }

    pub(crate) fn assign_flat(&mut self, flat: &[f32]) {
        let mut pos = 0usize;
        let mut take = |n: usize| {
            let s = &flat[pos..pos + n];
            pos += n;
            s
        };
        for conv in self
            .stages
            .iter_mut()
            .chain(std::iter::once(&mut self.refine))
        {
            let nw = conv.weights.len();
            conv.weights.copy_from_slice(take(nw));
            let nb = conv.bias.len();
            conv.bias.copy_from_slice(take(nb));
        }
        for head in &mut self.heads {
            let nw = head.weights.len();
            head.weights.copy_from_slice(take(nw));
            head.bias = take(1)[0];
        }
        let nt = self.count_w_trunk.len();
        self.count_w_trunk.copy_from_slice(take(nt));
        let ns = self.count_w_sums.len();
        self.count_w_sums.copy_from_slice(take(ns));
        self.count_b = take(1)[0];
        debug_assert_eq!(pos, flat.len());
    }
}

/// Model output for one patch: predicted maps plus the scalar count under
/// the requested fusion mode.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub stack: DensityStack,
    /// Count head output before fusion.
    pub regression_count: f64,
}

/// Square feature planes, `data[c][y][x]` flattened.
#[derive(Clone, Debug)]
struct Feature {
    ch: usize,
    size: usize,
    data: Vec<f64>,
}

impl Feature {
    fn zeros(ch: usize, size: usize) -> Self {
        Self {
            ch,
            size,
            data: vec![0.0; ch * size * size],
        }
    }

    #[inline]
    fn plane(&self, c: usize) -> &[f64] {
        let n = self.size * self.size;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.size * self.size;
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// Shifted softplus: `ln(1 + e^z) - ln 2`. Smooth, zero at zero.
#[inline]
fn activate(z: f64) -> f64 {
    let sp = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    sp - std::f64::consts::LN_2
}

/// Derivative of [`activate`]: the logistic sigmoid.
#[inline]
fn activate_grad(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn conv_forward(conv: &Conv, input: &Feature) -> Feature {
    let out_size = (input.size + 2 * conv.pad - conv.ksize) / conv.stride + 1;
    let mut out = Feature::zeros(conv.out_ch, out_size);
    let isz = input.size as i64;
    for oc in 0..conv.out_ch {
        let bias = conv.bias[oc] as f64;
        let out_plane = out.plane_mut(oc);
        for oy in 0..out_size {
            for ox in 0..out_size {
                let mut acc = bias;
                for ic in 0..conv.in_ch {
                    let in_plane = input.plane(ic);
                    let wbase = ((oc * conv.in_ch + ic) * conv.ksize) * conv.ksize;
                    for ky in 0..conv.ksize {
                        let iy = (oy * conv.stride + ky) as i64 - conv.pad as i64;
                        if iy < 0 || iy >= isz {
                            continue;
                        }
                        let row = iy as usize * input.size;
                        for kx in 0..conv.ksize {
                            let ix = (ox * conv.stride + kx) as i64 - conv.pad as i64;
                            if ix < 0 || ix >= isz {
                                continue;
                            }
                            acc += conv.weights[wbase + ky * conv.ksize + kx] as f64
                                * in_plane[row + ix as usize];
                        }
                    }
                }
                out_plane[oy * out_size + ox] = acc;
            }
        }
    }
    out
}

/// Gradients of a conv given upstream gradients on its pre-activation
/// output. Returns (dweights, dbias, dinput).
fn conv_backward(
    conv: &Conv,
    input: &Feature,
    dout: &Feature,
) -> (Vec<f64>, Vec<f64>, Feature) {
    let mut dw = vec![0.0f64; conv.weights.len()];
    let mut db = vec![0.0f64; conv.bias.len()];
    let mut dinput = Feature::zeros(input.ch, input.size);
    let isz = input.size as i64;
    let out_size = dout.size;
    for oc in 0..conv.out_ch {
        let dplane = dout.plane(oc);
        for oy in 0..out_size {
            for ox in 0..out_size {
                let g = dplane[oy * out_size + ox];
                if g == 0.0 {
                    continue;
                }
                db[oc] += g;
                for ic in 0..conv.in_ch {
                    let in_plane = input.plane(ic);
                    let wbase = ((oc * conv.in_ch + ic) * conv.ksize) * conv.ksize;
                    let din_plane = dinput.plane_mut(ic);
                    for ky in 0..conv.ksize {
                        let iy = (oy * conv.stride + ky) as i64 - conv.pad as i64;
                        if iy < 0 || iy >= isz {
                            continue;
                        }
                        let row = iy as usize * input.size;
                        for kx in 0..conv.ksize {
                            let ix = (ox * conv.stride + kx) as i64 - conv.pad as i64;
                            if ix < 0 || ix >= isz {
                                continue;
                            }
                            let col = row + ix as usize;
                            dw[wbase + ky * conv.ksize + kx] += g * in_plane[col];
                            din_plane[col] +=
                                g * conv.weights[wbase + ky * conv.ksize + kx] as f64;
                        }
                    }
                }
            }
        }
    }
    (dw, db, dinput)
}

struct ForwardTrace {
    /// Input of each stage conv (element 0 is the normalized patch).
    stage_inputs: Vec<Feature>,
    /// Pre-activation output of each stage conv.
    stage_pre: Vec<Feature>,
    refine_pre: Feature,
    trunk: Feature,
    /// Predicted maps, one plane each.
    maps: Vec<Vec<f64>>,
    trunk_sums: Vec<f64>,
    clamped_sums: Vec<f64>,
    regression_count: f64,
    fused_count: f64,
}

fn check_finite(data: &[f64], location: &str) -> Result<(), ModelError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite {
            location: location.to_string(),
        })
    }
}

fn run_forward(
    params: &ModelParams,
    patch: &GrayImage,
    fusion: FusionMode,
) -> Result<ForwardTrace, ModelError> {
    let cfg = &params.cfg;
    if patch.width() != cfg.input_size || patch.height() != cfg.input_size {
        return Err(ModelError::PatchSize {
            got_w: patch.width(),
            got_h: patch.height(),
            expected: cfg.input_size,
        });
    }
    let mut x = Feature::zeros(1, cfg.input_size);
    for (dst, &src) in x.data.iter_mut().zip(patch.pixels()) {
        *dst = src as f64 / 255.0;
    }

    let mut stage_inputs = Vec::with_capacity(params.stages.len());
    let mut stage_pre = Vec::with_capacity(params.stages.len());
    let mut cur = x;
    for (i, conv) in params.stages.iter().enumerate() {
        let pre = conv_forward(conv, &cur);
        check_finite(&pre.data, &format!("stage {i} conv"))?;
        let mut act = pre.clone();
        for v in &mut act.data {
            *v = activate(*v);
        }
        stage_inputs.push(cur);
        stage_pre.push(pre);
        cur = act;
    }
    let refine_pre = conv_forward(&params.refine, &cur);
    check_finite(&refine_pre.data, "refine conv")?;
    let mut trunk = refine_pre.clone();
    for v in &mut trunk.data {
        *v = activate(*v);
    }
    stage_inputs.push(cur);

    let m = cfg.map_size();
    debug_assert_eq!(trunk.size, m);
    let plane = m * m;
    let c = cfg.trunk_channels();

    // level heads: 1x1 conv over trunk features plus earlier maps
    let mut maps: Vec<Vec<f64>> = Vec::with_capacity(params.heads.len());
    for (h, head) in params.heads.iter().enumerate() {
        let mut out = vec![head.bias as f64; plane];
        for ch in 0..c {
            let w = head.weights[ch] as f64;
            let src = trunk.plane(ch);
            for (o, s) in out.iter_mut().zip(src) {
                *o += w * s;
            }
        }
        for (j, prev) in maps.iter().enumerate().take(h) {
            let w = head.weights[c + j] as f64;
            for (o, s) in out.iter_mut().zip(prev) {
                *o += w * s;
            }
        }
        check_finite(&out, &format!("level head {h}"))?;
        maps.push(out);
    }

    let trunk_sums: Vec<f64> = (0..c).map(|ch| trunk.plane(ch).iter().sum()).collect();
    let clamped_sums: Vec<f64> = maps
        .iter()
        .map(|m| m.iter().map(|v| v.max(0.0)).sum())
        .collect();
    let fusion_inputs: Vec<f64> = if fusion == FusionMode::ConcatFeature {
        clamped_sums.clone()
    } else {
        vec![0.0; clamped_sums.len()]
    };
    let mut regression_count = params.count_b as f64;
    for (w, s) in params.count_w_trunk.iter().zip(&trunk_sums) {
        regression_count += *w as f64 * s;
    }
    for (w, s) in params.count_w_sums.iter().zip(&fusion_inputs) {
        regression_count += *w as f64 * s;
    }
    check_finite(&[regression_count], "count head")?;
    let fused_count = fuse_counts(fusion, regression_count, &clamped_sums)?;

    Ok(ForwardTrace {
        stage_inputs,
        stage_pre,
        refine_pre,
        trunk,
        maps,
        trunk_sums,
        clamped_sums,
        regression_count,
        fused_count,
    })
}

fn trace_to_prediction(
    cfg: &ModelConfig,
    trace: &ForwardTrace,
) -> Result<Prediction, ModelError> {
    let m = cfg.map_size();
    let maps = trace
        .maps
        .iter()
        .zip(&cfg.levels)
        .map(|(values, &level)| DensityMap::from_values(m, m, level, values.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Prediction {
        stack: DensityStack::new(maps, trace.fused_count)?,
        regression_count: trace.regression_count,
    })
}

/// Forward pass producing the predicted stack under `fusion`.
pub fn forward_fused(
    params: &ModelParams,
    patch: &GrayImage,
    fusion: FusionMode,
) -> Result<Prediction, ModelError> {
    let trace = run_forward(params, patch, fusion)?;
    trace_to_prediction(&params.cfg, &trace)
}

/// Forward pass with the count head alone producing the count.
pub fn forward(params: &ModelParams, patch: &GrayImage) -> Result<Prediction, ModelError> {
    forward_fused(params, patch, FusionMode::RegressionOnly)
}

/// Parameter gradients, aligned with [`ModelParams::flatten`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub flat: Vec<f64>,
}

impl ParamGrads {
    fn zeros(n: usize) -> Self {
        Self { flat: vec![0.0; n] }
    }

    pub(crate) fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        for (a, b) in self.flat.iter_mut().zip(&other.flat) {
            *a += b * scale;
        }
    }
}

/// Composition loss of one (patch, target) pair and its gradient with respect
/// to every model parameter, by reverse-mode differentiation.
pub fn gradients(
    params: &ModelParams,
    patch: &GrayImage,
    target: &DensityStack,
    lcfg: &LossConfig,
) -> Result<(LossReport, ParamGrads), ModelError> {
    let cfg = &params.cfg;
    if lcfg.levels != cfg.levels {
        return Err(ModelError::LevelsMismatch {
            model: cfg.levels.clone(),
            loss: lcfg.levels.clone(),
        });
    }
    let trace = run_forward(params, patch, lcfg.fusion_mode)?;
    let pred = trace_to_prediction(cfg, &trace)?;
    let (report, loss_grad) = composition_loss_grad(&pred.stack, target, lcfg)?;

    let c = cfg.trunk_channels();
    let m = cfg.map_size();
    let plane = m * m;
    let n_levels = cfg.levels.len();

    let mut g_maps: Vec<Vec<f64>> = loss_grad.maps;
    let g_count = loss_grad.count;

    // route the count gradient through the fusion rule
    let d_reg = match lcfg.fusion_mode {
        FusionMode::RegressionOnly => g_count,
        FusionMode::ConcatFeature => g_count,
        FusionMode::MeanOfCounts => {
            let share = g_count / (n_levels + 1) as f64;
            for (gm, map) in g_maps.iter_mut().zip(&trace.maps) {
                for (g, &v) in gm.iter_mut().zip(map) {
                    if v > 0.0 {
                        *g += share;
                    }
                }
            }
            share
        }
    };

    // count head
    let mut d_count_w_trunk = vec![0.0f64; c];
    let mut d_count_w_sums = vec![0.0f64; n_levels];
    let d_count_b = d_reg;
    for (d, s) in d_count_w_trunk.iter_mut().zip(&trace.trunk_sums) {
        *d = d_reg * s;
    }
    let mut d_trunk = Feature::zeros(c, m);
    for ch in 0..c {
        let w = params.count_w_trunk[ch] as f64;
        for v in d_trunk.plane_mut(ch) {
            *v = d_reg * w;
        }
    }
    if lcfg.fusion_mode == FusionMode::ConcatFeature {
        for (d, s) in d_count_w_sums.iter_mut().zip(&trace.clamped_sums) {
            *d = d_reg * s;
        }
        for (k, (gm, map)) in g_maps.iter_mut().zip(&trace.maps).enumerate() {
            let w = params.count_w_sums[k] as f64;
            for (g, &v) in gm.iter_mut().zip(map) {
                if v > 0.0 {
                    *g += d_reg * w;
                }
            }
        }
    }

    // level heads, latest first so gradients flow into earlier maps
    let mut d_heads: Vec<(Vec<f64>, f64)> = params
        .heads
        .iter()
        .map(|h| (vec![0.0f64; h.weights.len()], 0.0f64))
        .collect();
    for h in (0..n_levels).rev() {
        let g = std::mem::take(&mut g_maps[h]);
        let head = &params.heads[h];
        let (dw, db) = &mut d_heads[h];
        *db = g.iter().sum();
        for ch in 0..c {
            let src = trunk_plane(&trace.trunk, ch);
            dw[ch] = dot(&g, src);
            let w = head.weights[ch] as f64;
            for (t, gi) in d_trunk.plane_mut(ch).iter_mut().zip(&g) {
                *t += w * gi;
            }
        }
        for j in 0..h {
            dw[c + j] = dot(&g, &trace.maps[j]);
            let w = head.weights[c + j] as f64;
            for (prev, gi) in g_maps[j].iter_mut().zip(&g) {
                *prev += w * gi;
            }
        }
        debug_assert_eq!(g.len(), plane);
    }

    // refine conv
    let mut d_refine_pre = d_trunk;
    for (dv, z) in d_refine_pre.data.iter_mut().zip(&trace.refine_pre.data) {
        *dv *= activate_grad(*z);
    }
    let refine_input = trace.stage_inputs.last().expect("refine input");
    let (dw_refine, db_refine, mut d_cur) =
        conv_backward(&params.refine, refine_input, &d_refine_pre);

    // stage convs, in reverse
    let mut stage_grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(params.stages.len());
    for i in (0..params.stages.len()).rev() {
        for (dv, z) in d_cur.data.iter_mut().zip(&trace.stage_pre[i].data) {
            *dv *= activate_grad(*z);
        }
        let (dw, db, d_in) = conv_backward(&params.stages[i], &trace.stage_inputs[i], &d_cur);
        stage_grads.push((dw, db));
        d_cur = d_in;
    }
    stage_grads.reverse();

    // flatten in declaration order
    let mut grads = ParamGrads::zeros(params.param_count());
    let flat = &mut grads.flat;
    let mut pos = 0usize;
    for (dw, db) in stage_grads.iter().chain(std::iter::once(&(dw_refine, db_refine))) {
        flat[pos..pos + dw.len()].copy_from_slice(dw);
        pos += dw.len();
        flat[pos..pos + db.len()].copy_from_slice(db);
        pos += db.len();
    }
    for (dw, db) in &d_heads {
        flat[pos..pos + dw.len()].copy_from_slice(dw);
        pos += dw.len();
        flat[pos] = *db;
        pos += 1;
    }
    flat[pos..pos + c].copy_from_slice(&d_count_w_trunk);
    pos += c;
    flat[pos..pos + n_levels].copy_from_slice(&d_count_w_sums);
    pos += n_levels;
    flat[pos] = d_count_b;
    pos += 1;
    debug_assert_eq!(pos, flat.len());

    Ok((report, grads))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn trunk_plane(trunk: &Feature, c: usize) -> &[f64] {
    trunk.plane(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_size: 32,
            downsample: 8,
            channels: vec![4, 8, 8],
            levels: vec![Level::Finite(1.0), Level::Finite(2.0), Level::Inf],
            seed: 1,
        }
    }

    #[test]
    fn default_model_stays_within_budget() {
        let params = ModelParams::init(&ModelConfig::default()).unwrap();
        assert!(params.param_count() <= 100_000, "{}", params.param_count());
    }

    #[test]
    fn tiny_model_is_small_enough_for_gradient_checks() {
        let params = ModelParams::init(&tiny_config()).unwrap();
        assert!(params.param_count() <= 5_000, "{}", params.param_count());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = tiny_config();
        let a = ModelParams::init(&cfg).unwrap();
        let b = ModelParams::init(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.stages.iter().all(|s| s.bias.iter().all(|&v| v == 0.0)));
        let mut other = cfg;
        other.seed = 2;
        assert_ne!(ModelParams::init(&other).unwrap(), a);
    }

    #[test]
    fn config_shape_errors_are_reported() {
        let mut cfg = tiny_config();
        cfg.channels = vec![4, 8];
        assert!(matches!(ModelParams::init(&cfg), Err(ModelError::BadConfig(_))));
        let mut cfg = tiny_config();
        cfg.input_size = 33;
        assert!(ModelParams::init(&cfg).is_err());
        let mut cfg = tiny_config();
        cfg.downsample = 6;
        assert!(ModelParams::init(&cfg).is_err());
    }

    #[test]
    fn forward_on_zero_patch_is_finite_and_shaped() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg).unwrap();
        let patch = GrayImage::zeros(32, 32).unwrap();
        let pred = forward(&params, &patch).unwrap();
        assert_eq!(pred.stack.maps().len(), 3);
        for map in pred.stack.maps() {
            assert_eq!(map.width(), 4);
            assert_eq!(map.height(), 4);
            assert!(map.values().iter().all(|v| v.is_finite()));
        }
        assert!(pred.stack.count().is_finite());
    }

    #[test]
    fn forward_rejects_wrong_patch_size() {
        let params = ModelParams::init(&tiny_config()).unwrap();
        let patch = GrayImage::zeros(16, 32).unwrap();
        assert!(matches!(
            forward(&params, &patch),
            Err(ModelError::PatchSize { .. })
        ));
    }

    #[test]
    fn flatten_round_trips() {
        let params = ModelParams::init(&tiny_config()).unwrap();
        let flat = params.flatten();
        assert_eq!(flat.len(), params.param_count());
        let back = ModelParams::from_flat(params.config(), &flat).unwrap();
        assert_eq!(back, params);
        assert!(ModelParams::from_flat(params.config(), &flat[1..]).is_err());
    }

    #[test]
    fn fusion_modes_change_only_the_count_path() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg).unwrap();
        let pixels: Vec<u8> = (0..32 * 32).map(|_| rng.gen()).collect();
        let patch = GrayImage::from_pixels(32, 32, pixels).unwrap();
        let reg = forward_fused(&params, &patch, FusionMode::RegressionOnly).unwrap();
        let mean = forward_fused(&params, &patch, FusionMode::MeanOfCounts).unwrap();
        let concat = forward_fused(&params, &patch, FusionMode::ConcatFeature).unwrap();
        for ((a, b), c) in reg
            .stack
            .maps()
            .iter()
            .zip(mean.stack.maps())
            .zip(concat.stack.maps())
        {
            assert_eq!(a.values(), b.values());
            assert_eq!(a.values(), c.values());
        }
        let sums: Vec<f64> = reg.stack.maps().iter().map(|m| m.clamped_sum()).collect();
        let want_mean =
            (reg.regression_count + sums.iter().sum::<f64>()) / (sums.len() + 1) as f64;
        assert!((mean.stack.count() - want_mean).abs() < 1e-12);
        // concat feeds the map sums into the count head, shifting its output
        assert_eq!(reg.stack.count(), reg.regression_count);
        assert_ne!(concat.stack.count(), reg.stack.count());
    }
}
