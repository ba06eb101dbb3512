//! Bottleneck ResNet-50 with configurable SimAM placement.
//!
//! The residual stages follow the standard table: four stages of
//! [3, 4, 6, 3] bottleneck blocks with mid channels [64, 128, 256, 512] and
//! an expansion ratio of 4, the first block of stages 3-5 striding by 2.
//! Three stems are available:
//!
//! * `Paper1x1` — a single 1x1 convolution, as the architecture table's
//!   first row literally reads;
//! * `Classic7x7` — the canonical 7x7/stride-2 + pool stem;
//! * `Small3x3` — 3x3/stride-1, no pool, sized for 64x64 inputs.
//!
//! Convolutions carry no bias (batch norm follows each); the classifier head
//! is global average pooling plus a fully connected layer. All weights come
//! deterministically from the build seed.
//!
//! Inputs must be at least 32x32. With per-block SimAM the deepest stage
//! needs at least 2 spatial positions, which means 64x64 inputs for the
//! `Classic7x7` stem.

pub mod checkpoint;

use rand_chacha::ChaCha8Rng;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::nn::{
    self, batchnorm, conv2d, global_avg_pool, linear, maxpool2, BatchNormParams, Conv2dParams,
    Mode, ParamId, ParamStore,
};
use crate::rng::derive_rng;
use crate::simam::{residual_combine, simam_forward, Placement, SimAMConfig};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Base (width 1.0) mid channels per residual stage.
const BASE_MID: [usize; 4] = [64, 128, 256, 512];
const EXPANSION: usize = 4;
const BASE_STEM_OUT: usize = 64;
pub const DEFAULT_STAGE_BLOCKS: [usize; 4] = [3, 4, 6, 3];
pub const MIN_INPUT_EXTENT: usize = 32;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Stem {
    Paper1x1,
    Classic7x7,
    Small3x3,
}

#[derive(Copy, Clone, Debug)]
pub struct ResNetConfig {
    pub input_channels: usize,
    pub num_classes: usize,
    pub stem: Stem,
    pub width_mult: f64,
    pub simam: SimAMConfig,
    /// Canonical post-activation ordering applies ReLU after the residual
    /// addition; switch off to match the bare block equations.
    pub post_add_relu: bool,
    /// Blocks per residual stage; [3,4,6,3] is ResNet-50.
    pub stage_blocks: [usize; 4],
}

impl Default for ResNetConfig {
    fn default() -> Self {
        Self {
            input_channels: 2,
            num_classes: 3,
            stem: Stem::Small3x3,
            width_mult: 1.0,
            simam: SimAMConfig::default(),
            post_add_relu: true,
            stage_blocks: DEFAULT_STAGE_BLOCKS,
        }
    }
}

/// Channel plan of one residual stage.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub c_mid: usize,
    pub c_out: usize,
    pub block_count: usize,
    pub first_block_stride: usize,
}

fn scale_channels(base: usize, width_mult: f64) -> Result<usize> {
    if !(width_mult > 0.0 && width_mult <= 1.0) {
        return Err(Error::Config(format!(
            "width_mult must be in (0, 1], got {width_mult}"
        )));
    }
    let scaled = (base as f64 * width_mult).round() as usize;
    if scaled == 0 {
        return Err(Error::Config(format!(
            "width_mult {width_mult} scales {base} channels to zero"
        )));
    }
    Ok(scaled)
}

/// The four-stage plan for a given width multiplier and block counts.
pub fn stage_table(width_mult: f64, stage_blocks: [usize; 4]) -> Result<Vec<StageConfig>> {
    if stage_blocks.iter().any(|&b| b == 0) {
        return Err(Error::Config("every stage needs at least one block".into()));
    }
    (0..4)
        .map(|i| {
            let c_mid = scale_channels(BASE_MID[i], width_mult)?;
            Ok(StageConfig {
                c_mid,
                c_out: c_mid * EXPANSION,
                block_count: stage_blocks[i],
                first_block_stride: if i == 0 { 1 } else { 2 },
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Standalone bottleneck block
// ---------------------------------------------------------------------------

/// Weights of one bottleneck block: 1x1 reduce, 3x3, 1x1 expand, each with a
/// batch norm, plus an optional projection shortcut when the block changes
/// shape.
#[derive(Clone, Debug)]
pub struct BottleneckParams<E: Elem> {
    pub conv1: Conv2dParams<E>,
    pub bn1: BatchNormParams<E>,
    pub conv2: Conv2dParams<E>,
    pub bn2: BatchNormParams<E>,
    pub conv3: Conv2dParams<E>,
    pub bn3: BatchNormParams<E>,
    pub projection: Option<(Conv2dParams<E>, BatchNormParams<E>)>,
}

impl<E: Elem> BottleneckParams<E> {
    /// Kaiming-initialized block. A projection shortcut is created exactly
    /// when `stride != 1` or `c_in != 4 * c_mid`.
    pub fn init(c_in: usize, c_mid: usize, stride: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c_out = c_mid * EXPANSION;
        let conv = |f: usize, c: usize, k: usize, s: usize, p: usize, rng: &mut ChaCha8Rng| {
            Conv2dParams::new(
                nn::kaiming_uniform(&[f, c, k, k], c * k * k, rng)?,
                None,
                s,
                p,
            )
        };
        let projection = if stride != 1 || c_in != c_out {
            Some((
                conv(c_out, c_in, 1, stride, 0, rng)?,
                BatchNormParams::new(c_out),
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: conv(c_mid, c_in, 1, 1, 0, rng)?,
            bn1: BatchNormParams::new(c_mid),
            conv2: conv(c_mid, c_mid, 3, stride, 1, rng)?,
            bn2: BatchNormParams::new(c_mid),
            conv3: conv(c_out, c_mid, 1, 1, 0, rng)?,
            bn3: BatchNormParams::new(c_out),
            projection,
        })
    }

    pub fn param_count(&self) -> usize {
        let bn = |p: &BatchNormParams<E>| p.gamma.len() + p.beta.len();
        self.conv1.param_count()
            + self.conv2.param_count()
            + self.conv3.param_count()
            + bn(&self.bn1)
            + bn(&self.bn2)
            + bn(&self.bn3)
            + self
                .projection
                .as_ref()
                .map_or(0, |(c, b)| c.param_count() + bn(b))
    }
}

/// Output of [`bottleneck_forward`]: the block output plus the tape handles
/// of every trainable parameter, in the fixed order
/// `conv1, bn1.gamma, bn1.beta, conv2, bn2.gamma, bn2.beta, conv3, bn3.gamma,
/// bn3.beta[, proj, proj_bn.gamma, proj_bn.beta]`.
pub struct BottleneckOut {
    pub out: Val,
    pub param_vals: Vec<Val>,
}

/// `F = bn3(conv3(relu(bn2(conv2(relu(bn1(conv1(x))))))))`, shortcut either
/// `x` or the projection, combined per the SimAM placement, then an optional
/// ReLU. Train mode updates the running stats inside `p`.
pub fn bottleneck_forward<E: Elem>(
    tape: &mut Tape<E>,
    x: Val,
    p: &mut BottleneckParams<E>,
    cfg: &SimAMConfig,
    mode: Mode,
    post_add_relu: bool,
) -> Result<BottleneckOut> {
    let mut param_vals = Vec::with_capacity(12);
    fn conv<E: Elem>(
        tape: &mut Tape<E>,
        x: Val,
        c: &Conv2dParams<E>,
        vals: &mut Vec<Val>,
    ) -> Result<Val> {
        let w = tape.leaf(c.weight.clone());
        vals.push(w);
        conv2d(tape, x, w, None, c.stride, c.pad)
    }
    fn bn<E: Elem>(
        tape: &mut Tape<E>,
        x: Val,
        b: &mut BatchNormParams<E>,
        mode: Mode,
        vals: &mut Vec<Val>,
    ) -> Result<Val> {
        let g = tape.leaf(b.gamma.clone());
        let bt = tape.leaf(b.beta.clone());
        vals.push(g);
        vals.push(bt);
        batchnorm(tape, x, g, bt, &mut b.state, mode)
    }

    let y = conv(tape, x, &p.conv1, &mut param_vals)?;
    let y = bn(tape, y, &mut p.bn1, mode, &mut param_vals)?;
    let y = tape.relu(y)?;
    let y = conv(tape, y, &p.conv2, &mut param_vals)?;
    let y = bn(tape, y, &mut p.bn2, mode, &mut param_vals)?;
    let y = tape.relu(y)?;
    let y = conv(tape, y, &p.conv3, &mut param_vals)?;
    let f = bn(tape, y, &mut p.bn3, mode, &mut param_vals)?;

    let shortcut = match &mut p.projection {
        Some((pc, pb)) => {
            let s = conv(tape, x, pc, &mut param_vals)?;
            bn(tape, s, pb, mode, &mut param_vals)?
        }
        None => x,
    };

    let out = residual_combine(tape, f, shortcut, cfg, post_add_relu)?;
    Ok(BottleneckOut { out, param_vals })
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    rmean: ParamId,
    rvar: ParamId,
}

#[derive(Clone, Debug)]
struct BlockIds {
    conv1: ParamId,
    bn1: BnIds,
    conv2: ParamId,
    bn2: BnIds,
    conv3: ParamId,
    bn3: BnIds,
    proj: Option<(ParamId, BnIds)>,
    stride: usize,
}

#[derive(Clone, Debug)]
struct StemIds {
    conv: ParamId,
    bn: BnIds,
    stride: usize,
    pad: usize,
    pool: bool,
}

#[derive(Clone)]
pub struct ResNetModel<E: Elem> {
    config: ResNetConfig,
    stages_cfg: Vec<StageConfig>,
    store: ParamStore<E>,
    stem: StemIds,
    stages: Vec<Vec<BlockIds>>,
    head_weight: ParamId,
    head_bias: ParamId,
}

/// Builds the staged network with weights drawn deterministically from
/// `seed`.
pub fn build_model<E: Elem>(cfg: &ResNetConfig, seed: u64) -> Result<ResNetModel<E>> {
    if cfg.input_channels == 0 || cfg.num_classes == 0 {
        return Err(Error::Config("channels and classes must be >= 1".into()));
    }
    let stages_cfg = stage_table(cfg.width_mult, cfg.stage_blocks)?;
    let stem_out = scale_channels(BASE_STEM_OUT, cfg.width_mult)?;
    let mut rng = derive_rng(seed, "resnet.init", 0);
    let mut store = ParamStore::new();

    fn add_bn<E: Elem>(store: &mut ParamStore<E>, name: &str, c: usize) -> BnIds {
        let p = BatchNormParams::<E>::new(c);
        BnIds {
            gamma: store.add(format!("{name}.gamma"), p.gamma, true),
            beta: store.add(format!("{name}.beta"), p.beta, true),
            rmean: store.add(format!("{name}.running_mean"), p.state.running_mean, false),
            rvar: store.add(format!("{name}.running_var"), p.state.running_var, false),
        }
    }

    let (k, stride, pad, pool) = match cfg.stem {
        Stem::Paper1x1 => (1, 1, 0, false),
        Stem::Classic7x7 => (7, 2, 3, true),
        Stem::Small3x3 => (3, 1, 1, false),
    };
    let stem_w = nn::kaiming_uniform::<E>(
        &[stem_out, cfg.input_channels, k, k],
        cfg.input_channels * k * k,
        &mut rng,
    )?;
    let stem = StemIds {
        conv: store.add("stem.conv.weight", stem_w, true),
        bn: add_bn(&mut store, "stem.bn", stem_out),
        stride,
        pad,
        pool,
    };

    let mut stages = Vec::new();
    let mut c_in = stem_out;
    for (si, sc) in stages_cfg.iter().enumerate() {
        let mut blocks = Vec::new();
        for bi in 0..sc.block_count {
            let stride = if bi == 0 { sc.first_block_stride } else { 1 };
            let p = BottleneckParams::<E>::init(c_in, sc.c_mid, stride, &mut rng)?;
            let base = format!("stage{}.block{}", si + 2, bi);
            let ids = BlockIds {
                conv1: store.add(format!("{base}.conv1.weight"), p.conv1.weight, true),
                bn1: add_bn(&mut store, &format!("{base}.bn1"), sc.c_mid),
                conv2: store.add(format!("{base}.conv2.weight"), p.conv2.weight, true),
                bn2: add_bn(&mut store, &format!("{base}.bn2"), sc.c_mid),
                conv3: store.add(format!("{base}.conv3.weight"), p.conv3.weight, true),
                bn3: add_bn(&mut store, &format!("{base}.bn3"), sc.c_out),
                proj: p.projection.map(|(pc, _)| {
                    let w = store.add(format!("{base}.proj.weight"), pc.weight, true);
                    (w, add_bn(&mut store, &format!("{base}.proj_bn"), sc.c_out))
                }),
                stride,
            };
            blocks.push(ids);
            c_in = sc.c_out;
        }
        stages.push(blocks);
    }

    let head_w = nn::kaiming_uniform::<E>(&[cfg.num_classes, c_in], c_in, &mut rng)?;
    let head_b = Tensor::from_parts(vec![cfg.num_classes], vec![E::ZERO; cfg.num_classes], false);
    let head_weight = store.add("head.weight", head_w, true);
    let head_bias = store.add("head.bias", head_b, true);

    Ok(ResNetModel {
        config: *cfg,
        stages_cfg,
        store,
        stem,
        stages,
        head_weight,
        head_bias,
    })
}

/// Exact count of trainable scalars (conv weights, batch-norm gamma/beta,
/// classifier weights and bias); running statistics are excluded.
pub fn param_count<E: Elem>(m: &ResNetModel<E>) -> usize {
    m.store.trainable_scalar_count()
}

impl<E: Elem> ResNetModel<E> {
    pub fn config(&self) -> &ResNetConfig {
        &self.config
    }

    pub fn stage_configs(&self) -> &[StageConfig] {
        &self.stages_cfg
    }

    pub fn stage_block_counts(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.len()).collect()
    }

    pub fn store(&self) -> &ParamStore<E> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }

    fn bn_params(&self, ids: &BnIds) -> BatchNormParams<E> {
        BatchNormParams {
            gamma: self.store.get(ids.gamma).clone(),
            beta: self.store.get(ids.beta).clone(),
            state: nn::BatchNormState {
                running_mean: self.store.get(ids.rmean).clone(),
                running_var: self.store.get(ids.rvar).clone(),
                eps: BN_EPS,
                momentum: BN_MOMENTUM,
            },
        }
    }

    fn write_bn_state(&mut self, ids: &BnIds, p: &BatchNormParams<E>) {
        *self.store.get_mut(ids.rmean) = p.state.running_mean.clone();
        *self.store.get_mut(ids.rvar) = p.state.running_var.clone();
    }

    fn block_params(&self, b: &BlockIds) -> BottleneckParams<E> {
        let conv = |id: ParamId, stride: usize, pad: usize| Conv2dParams {
            weight: self.store.get(id).clone(),
            bias: None,
            stride,
            pad,
        };
        BottleneckParams {
            conv1: conv(b.conv1, 1, 0),
            bn1: self.bn_params(&b.bn1),
            conv2: conv(b.conv2, b.stride, 1),
            bn2: self.bn_params(&b.bn2),
            conv3: conv(b.conv3, 1, 0),
            bn3: self.bn_params(&b.bn3),
            projection: b
                .proj
                .as_ref()
                .map(|(w, bn)| (conv(*w, b.stride, 0), self.bn_params(bn))),
        }
    }

    /// ParamIds of a block in the same order as
    /// [`BottleneckOut::param_vals`].
    fn block_param_ids(b: &BlockIds) -> Vec<ParamId> {
        let mut ids = vec![
            b.conv1, b.bn1.gamma, b.bn1.beta, b.conv2, b.bn2.gamma, b.bn2.beta, b.conv3,
            b.bn3.gamma, b.bn3.beta,
        ];
        if let Some((w, bn)) = &b.proj {
            ids.extend([*w, bn.gamma, bn.beta]);
        }
        ids
    }

    fn check_input(&self, x: &Tensor<E>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.input_channels {
            return Err(Error::op(
                "resnet",
                format!(
                    "input must be [N,{},H,W], got {s:?}",
                    self.config.input_channels
                ),
            ));
        }
        if s[2] < MIN_INPUT_EXTENT || s[3] < MIN_INPUT_EXTENT {
            return Err(Error::op(
                "resnet",
                format!(
                    "input must be at least {MIN_INPUT_EXTENT}x{MIN_INPUT_EXTENT}, got {}x{}",
                    s[2], s[3]
                ),
            ));
        }
        Ok(())
    }

    /// Records the full forward pass on the tape, returning the logits node
    /// and `(param, leaf)` bindings for the optimizer. Train mode updates
    /// batch-norm running statistics.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<E>,
        x: &Tensor<E>,
    ) -> Result<(Val, Vec<(ParamId, Val)>)> {
        let mut t = x.clone();
        t.set_requires_grad(false);
        let v = tape.leaf(t);
        self.forward_on(tape, v, Mode::Train)
    }

    /// Inference as a pure function of the weights: takes `&self`, mutates
    /// nothing, safe to call concurrently.
    pub fn forward_infer(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut copy = self.clone(); // shallow: tensors share storage
        let mut tape = Tape::new();
        let mut t = x.clone();
        t.set_requires_grad(false);
        let v = tape.leaf(t);
        let (logits, _) = copy.forward_on(&mut tape, v, Mode::Infer)?;
        Ok(tape.value(logits).clone())
    }

    /// Forward from an existing tape node, so callers can differentiate with
    /// respect to the input as well.
    pub fn forward_on(
        &mut self,
        tape: &mut Tape<E>,
        x: Val,
        mode: Mode,
    ) -> Result<(Val, Vec<(ParamId, Val)>)> {
        self.check_input(tape.value(x))?;
        let mut bindings: Vec<(ParamId, Val)> = Vec::new();
        let mut x = x;

        // stem
        let w = tape.leaf(self.store.get(self.stem.conv).clone());
        bindings.push((self.stem.conv, w));
        x = conv2d(tape, x, w, None, self.stem.stride, self.stem.pad)?;
        let mut bn_p = self.bn_params(&self.stem.bn);
        let g = tape.leaf(bn_p.gamma.clone());
        let b = tape.leaf(bn_p.beta.clone());
        bindings.push((self.stem.bn.gamma, g));
        bindings.push((self.stem.bn.beta, b));
        x = batchnorm(tape, x, g, b, &mut bn_p.state, mode)?;
        if mode == Mode::Train {
            let stem_bn = self.stem.bn.clone();
            self.write_bn_state(&stem_bn, &bn_p);
        }
        x = tape.relu(x)?;
        if self.stem.pool {
            x = maxpool2(tape, x)?;
        }

        // residual stages
        let cfg = self.config.simam;
        for si in 0..self.stages.len() {
            for bi in 0..self.stages[si].len() {
                let ids = self.stages[si][bi].clone();
                let mut p = self.block_params(&ids);
                let out =
                    bottleneck_forward(tape, x, &mut p, &cfg, mode, self.config.post_add_relu)?;
                if mode == Mode::Train {
                    self.write_bn_state(&ids.bn1, &p.bn1);
                    self.write_bn_state(&ids.bn2, &p.bn2);
                    self.write_bn_state(&ids.bn3, &p.bn3);
                    if let (Some((_, bn_ids)), Some((_, bn_p))) = (&ids.proj, &p.projection) {
                        self.write_bn_state(bn_ids, bn_p);
                    }
                }
                bindings.extend(Self::block_param_ids(&ids).into_iter().zip(out.param_vals));
                x = out.out;
            }
            if cfg.placement == Placement::AfterStage2 && si == 0 {
                x = simam_forward(tape, x, cfg.lambda)?;
            }
        }

        // head
        let pooled = global_avg_pool(tape, x)?;
        let hw = tape.leaf(self.store.get(self.head_weight).clone());
        let hb = tape.leaf(self.store.get(self.head_bias).clone());
        bindings.push((self.head_weight, hw));
        bindings.push((self.head_bias, hb));
        let logits = linear(tape, pooled, hw, hb)?;
        Ok((logits, bindings))
    }
}

/// Convenience: infer-mode logits for a batch.
pub fn forward<E: Elem>(m: &ResNetModel<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    m.forward_infer(x)
}

#[cfg(test)]
mod tests;
