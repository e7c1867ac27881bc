//! Single-scale and multi-scale DenseNet classifiers over log-mel patches.

use asc_autograd::{
    adam_step, avg_pool_2x2, batchnorm2d, concat_channels, conv2d, global_avg_pool, linear, log_softmax_rows, read_checkpoint,
    relu, softmax_cross_entropy, write_checkpoint, AdamConfig, AutogradError, CheckpointEntry, Mode, Parameter, RunningStats,
    Tensor,
};
use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("no patches to aggregate")]
    NoPatches,
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

/// Per-layer `(temporal kernel width, growth)` for the first dense block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiScaleSpec {
    pub layer_specs: Vec<(usize, usize)>,
}

impl MultiScaleSpec {
    pub fn default_spec() -> Self {
        MultiScaleSpec {
            layer_specs: vec![(9, 16), (7, 12), (5, 8), (3, 4)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.layer_specs.is_empty() {
            return bad("multi-scale spec has no layers".into());
        }
        for (i, &(w, g)) in self.layer_specs.iter().enumerate() {
            if w % 2 == 0 {
                return bad(format!("kernel width {w} at layer {i} is even"));
            }
            if g == 0 {
                return bad(format!("growth at layer {i} is zero"));
            }
        }
        for pair in self.layer_specs.windows(2) {
            let ((w0, g0), (w1, g1)) = (pair[0], pair[1]);
            // A single repeated width is the degenerate single-scale case.
            let uniform = w0 == w1 && g0 == g1;
            if !uniform && (w1 >= w0 || g1 > g0) {
                return bad(format!(
                    "widths must strictly decrease and growths not increase: {:?}",
                    self.layer_specs
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNetConfig {
    pub initial_channels: usize,
    pub block_layers: [usize; 4],
    pub growth_rate: usize,
    pub bottleneck_factor: usize,
    pub compression: f64,
    pub num_classes: usize,
    pub multiscale: Option<MultiScaleSpec>,
    /// `(mel bands, frames)` of each input patch.
    pub input_size: (usize, usize),
}

impl DenseNetConfig {
    pub fn default_single(num_classes: usize) -> Self {
        DenseNetConfig {
            initial_channels: 64,
            block_layers: [3, 6, 12, 8],
            growth_rate: 12,
            bottleneck_factor: 4,
            compression: 1.0,
            num_classes,
            multiscale: None,
            input_size: (128, 128),
        }
    }

    /// The first block has one layer per multi-scale entry.
    pub fn default_multiscale(num_classes: usize) -> Self {
        let spec = MultiScaleSpec::default_spec();
        DenseNetConfig {
            block_layers: [spec.layer_specs.len(), 6, 12, 8],
            multiscale: Some(spec),
            ..Self::default_single(num_classes)
        }
    }

    pub fn tiny_single(num_classes: usize) -> Self {
        DenseNetConfig {
            initial_channels: 16,
            block_layers: [2, 2, 2, 2],
            growth_rate: 8,
            bottleneck_factor: 2,
            compression: 0.5,
            ..Self::default_single(num_classes)
        }
    }

    pub fn tiny_multiscale(num_classes: usize) -> Self {
        DenseNetConfig {
            multiscale: Some(MultiScaleSpec {
                layer_specs: vec![(7, 8), (3, 4)],
            }),
            ..Self::tiny_single(num_classes)
        }
    }

    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "default" => Ok(Self::default_single(num_classes)),
            "default-multiscale" => Ok(Self::default_multiscale(num_classes)),
            "tiny" => Ok(Self::tiny_single(num_classes)),
            "tiny-multiscale" => Ok(Self::tiny_multiscale(num_classes)),
            other => Err(ModelError::InvalidConfig(format!(
                "unknown preset `{other}` (default, default-multiscale, tiny, tiny-multiscale)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.initial_channels == 0 || self.growth_rate == 0 || self.bottleneck_factor == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.block_layers.contains(&0) {
            return bad(format!("every block needs at least one layer: {:?}", self.block_layers));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad(format!("compression {} outside (0, 1]", self.compression));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        let (h, w) = self.input_size;
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return bad(format!("input {h}x{w} must be a positive multiple of 8 in both axes"));
        }
        if let Some(ms) = &self.multiscale {
            ms.validate()?;
            if ms.layer_specs.len() != self.block_layers[0] {
                return bad(format!(
                    "block 1 has {} layers but the multi-scale spec lists {}",
                    self.block_layers[0],
                    ms.layer_specs.len()
                ));
            }
            if let Some(&(wk, _)) = ms.layer_specs.iter().find(|(wk, _)| *wk > w) {
                return bad(format!("kernel width {wk} exceeds the {w}-frame input"));
            }
        }
        Ok(())
    }

    /// `(kernel width, growth)` of layer `layer` in block `block`.
    fn layer_kernel(&self, block: usize, layer: usize) -> (usize, usize) {
        match (&self.multiscale, block) {
            (Some(ms), 0) => ms.layer_specs[layer],
            _ => (3, self.growth_rate),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Bn {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    pad: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
struct DenseLayer {
    bn1: Bn,
    conv1: Conv,
    bn2: Bn,
    conv2: Conv,
}

#[derive(Clone, Copy, Debug)]
struct Transition {
    bn: Bn,
    conv: Conv,
}

#[derive(Clone, Debug)]
struct Layout {
    input_mean: usize,
    input_std: usize,
    stem: Conv,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    tail_bn: Bn,
    fc_weight: usize,
    fc_bias: usize,
}

/// One step of the structural walk through the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub stage: String,
    /// `[C, H, W]` of the stage output (batch dimension omitted).
    pub shape: Vec<usize>,
}

struct Builder<'a> {
    params: Vec<Parameter<f32>>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn push(&mut self, p: Parameter<f32>) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        Bn {
            gamma: self.push(Parameter::new(format!("{name}.gamma"), &[c], vec![1.0; c]).unwrap()),
            beta: self.push(Parameter::new(format!("{name}.beta"), &[c], vec![0.0; c]).unwrap()),
            mean: self.push(Parameter::buffer(format!("{name}.running_mean"), &[c], vec![0.0; c]).unwrap()),
            var: self.push(Parameter::buffer(format!("{name}.running_var"), &[c], vec![1.0; c]).unwrap()),
        }
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize, kh: usize, kw: usize) -> Conv {
        let fan_in = (inp * kh * kw) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let data = (0..out * inp * kh * kw).map(|_| self.rng.random_range(-bound..bound)).collect();
        Conv {
            weight: self.push(Parameter::new(format!("{name}.weight"), &[out, inp, kh, kw], data).unwrap()),
            pad: ((kh - 1) / 2, (kw - 1) / 2),
        }
    }
}

/// DenseNet with its parameters, running statistics and class names.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: DenseNetConfig,
    pub class_names: Vec<String>,
    params: Vec<Parameter<f32>>,
    layout: Layout,
}

pub fn build_densenet(config: &DenseNetConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        params: Vec::new(),
        rng: &mut rng,
    };
    let input_mean = b.push(Parameter::buffer("input.mean", &[1], vec![0.0]).unwrap());
    let input_std = b.push(Parameter::buffer("input.std", &[1], vec![1.0]).unwrap());
    let stem = b.conv("stem", config.initial_channels, 1, 3, 3);
    let mut channels = config.initial_channels;
    let mut blocks = Vec::new();
    let mut transitions = Vec::new();
    for (bi, &layers) in config.block_layers.iter().enumerate() {
        let mut block = Vec::new();
        for li in 0..layers {
            let (kw, growth) = config.layer_kernel(bi, li);
            let name = format!("block{}.layer{}", bi + 1, li + 1);
            let bottleneck = config.bottleneck_factor * config.growth_rate;
            block.push(DenseLayer {
                bn1: b.bn(&format!("{name}.bn1"), channels),
                conv1: b.conv(&format!("{name}.conv1"), bottleneck, channels, 1, 1),
                bn2: b.bn(&format!("{name}.bn2"), bottleneck),
                conv2: b.conv(&format!("{name}.conv2"), growth, bottleneck, 3, kw),
            });
            channels += growth;
        }
        blocks.push(block);
        if bi < 3 {
            let out = (config.compression * channels as f64 - 1e-9).ceil() as usize;
            let name = format!("transition{}", bi + 1);
            transitions.push(Transition {
                bn: b.bn(&format!("{name}.bn"), channels),
                conv: b.conv(&format!("{name}.conv"), out, channels, 1, 1),
            });
            channels = out;
        }
    }
    let tail_bn = b.bn("tail.bn", channels);
    let bound = 1.0 / (channels as f32).sqrt();
    let fc_data = (0..config.num_classes * channels)
        .map(|_| b.rng.random_range(-bound..bound))
        .collect();
    let fc_weight = b.push(Parameter::new("fc.weight", &[config.num_classes, channels], fc_data).unwrap());
    let fc_bias = b.push(Parameter::new("fc.bias", &[config.num_classes], vec![0.0; config.num_classes]).unwrap());
    let params = b.params;
    Ok(Model {
        config: config.clone(),
        class_names: (0..config.num_classes).map(|i| format!("class{i}")).collect(),
        params,
        layout: Layout {
            input_mean,
            input_std,
            stem,
            blocks,
            transitions,
            tail_bn,
            fc_weight,
            fc_bias,
        },
    })
}

/// Same as [`build_densenet`], but insists on a multi-scale first block.
pub fn build_multiscale_densenet(config: &DenseNetConfig, seed: u64) -> Result<Model> {
    if config.multiscale.is_none() {
        return Err(ModelError::InvalidConfig("no multi-scale spec given".into()));
    }
    build_densenet(config, seed)
}

/// Bound graph inputs for one forward pass.
struct Bound {
    leaves: Vec<Tensor<f32>>,
}

/// Labeled input patch, `[rows x cols]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pixels: Vec<f32>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    MeanLogprob,
    Majority,
}

impl std::str::FromStr for Aggregation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean_logprob" | "mean-logprob" => Ok(Aggregation::MeanLogprob),
            "majority" => Ok(Aggregation::Majority),
            other => Err(format!("unknown aggregation `{other}` (mean_logprob or majority)")),
        }
    }
}

impl Model {
    pub fn params(&self) -> &[Parameter<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<f32>] {
        &mut self.params
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.data().len()).sum()
    }

    /// `(name, shape)` of every trainable parameter in build order.
    pub fn shape_inventory(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| (p.name.clone(), p.shape().to_vec()))
            .collect()
    }

    fn bind(&self, track: bool) -> Bound {
        Bound {
            leaves: self
                .params
                .iter()
                .map(|p| {
                    if track {
                        p.leaf()
                    } else {
                        Tensor::new(p.shape(), p.data().to_vec()).expect("consistent shape")
                    }
                })
                .collect(),
        }
    }

    fn input_tensor(&self, pixels: &[f32], n: usize) -> Result<Tensor<f32>> {
        let (h, w) = self.config.input_size;
        if pixels.len() != n * h * w {
            return Err(AutogradError::ShapeMismatch {
                op: "forward",
                detail: format!("{} values for a batch of {n} {h}x{w} patches", pixels.len()),
            }
            .into());
        }
        let mean = self.params[self.layout.input_mean].data()[0];
        let inv = 1.0 / self.params[self.layout.input_std].data()[0];
        let data = pixels.iter().map(|&v| (v - mean) * inv).collect();
        Ok(Tensor::new(&[n, 1, h, w], data)?)
    }

    fn bn_relu(&mut self, x: &Tensor<f32>, bn: Bn, g: &Bound, mode: Mode) -> Result<Tensor<f32>> {
        let y = match mode {
            Mode::Train => {
                let mut mean = self.params[bn.mean].data().to_vec();
                let mut var = self.params[bn.var].data().to_vec();
                let y = batchnorm2d(
                    x,
                    &g.leaves[bn.gamma],
                    &g.leaves[bn.beta],
                    Some(RunningStats {
                        mean: &mut mean,
                        var: &mut var,
                        momentum: BN_MOMENTUM,
                    }),
                    mode,
                    BN_EPS,
                )?;
                self.params[bn.mean].set_data(mean)?;
                self.params[bn.var].set_data(var)?;
                y
            }
            Mode::Eval => {
                let mut mean = self.params[bn.mean].data().to_vec();
                let mut var = self.params[bn.var].data().to_vec();
                batchnorm2d(
                    x,
                    &g.leaves[bn.gamma],
                    &g.leaves[bn.beta],
                    Some(RunningStats {
                        mean: &mut mean,
                        var: &mut var,
                        momentum: 0.0,
                    }),
                    mode,
                    BN_EPS,
                )?
            }
        };
        Ok(relu(&y))
    }

    fn conv(&self, x: &Tensor<f32>, c: Conv, g: &Bound) -> Result<Tensor<f32>> {
        Ok(conv2d(x, &g.leaves[c.weight], c.pad)?)
    }

    fn run(
        &mut self,
        input: &Tensor<f32>,
        g: &Bound,
        mode: Mode,
        mut trace: Option<&mut Vec<TraceEntry>>,
    ) -> Result<Tensor<f32>> {
        let mut record = |stage: String, t: &Tensor<f32>| {
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(TraceEntry {
                    stage,
                    shape: t.shape()[1..].to_vec(),
                });
            }
        };
        let layout = self.layout.clone();
        let mut x = self.conv(input, layout.stem, g)?;
        record("stem".into(), &x);
        for (bi, block) in layout.blocks.iter().enumerate() {
            for (li, layer) in block.iter().enumerate() {
                let h = self.bn_relu(&x, layer.bn1, g, mode)?;
                let h = self.conv(&h, layer.conv1, g)?;
                let h = self.bn_relu(&h, layer.bn2, g, mode)?;
                let h = self.conv(&h, layer.conv2, g)?;
                x = concat_channels(&[&x, &h])?;
                record(format!("block{}.layer{}", bi + 1, li + 1), &x);
            }
            record(format!("block{}", bi + 1), &x);
            if let Some(t) = layout.transitions.get(bi) {
                let h = self.bn_relu(&x, t.bn, g, mode)?;
                let h = self.conv(&h, t.conv, g)?;
                x = avg_pool_2x2(&h)?;
                record(format!("transition{}", bi + 1), &x);
            }
        }
        let h = self.bn_relu(&x, layout.tail_bn, g, mode)?;
        let pooled = global_avg_pool(&h)?;
        record("global_pool".into(), &pooled);
        let logits = linear(&pooled, &g.leaves[layout.fc_weight], &g.leaves[layout.fc_bias])?;
        record("logits".into(), &logits);
        Ok(logits)
    }

    /// Logits `[n x num_classes]` for `n` row-major patches, without
    /// recording a graph or touching running statistics.
    pub fn logits(&self, pixels: &[f32], n: usize) -> Result<Vec<f32>> {
        let input = self.input_tensor(pixels, n)?;
        let g = self.bind(false);
        // `run` needs `&mut` only to update running stats, which eval skips.
        let mut scratch = self.clone();
        Ok(scratch.run(&input, &g, Mode::Eval, None)?.data().to_vec())
    }

    /// Like [`Model::logits`], also returning the per-stage shape trace.
    pub fn forward_traced(&self, pixels: &[f32], n: usize) -> Result<(Vec<f32>, Vec<TraceEntry>)> {
        let input = self.input_tensor(pixels, n)?;
        let g = self.bind(false);
        let mut trace = Vec::new();
        let mut scratch = self.clone();
        let out = scratch.run(&input, &g, Mode::Eval, Some(&mut trace))?;
        Ok((out.data().to_vec(), trace))
    }

    /// Hand-walk of channel and spatial bookkeeping, no arithmetic.
    pub fn structural_trace(&self) -> Vec<TraceEntry> {
        let c = &self.config;
        let (mut h, mut w) = c.input_size;
        let mut ch = c.initial_channels;
        let mut out = vec![TraceEntry {
            stage: "stem".into(),
            shape: vec![ch, h, w],
        }];
        for (bi, &layers) in c.block_layers.iter().enumerate() {
            for li in 0..layers {
                ch += c.layer_kernel(bi, li).1;
                out.push(TraceEntry {
                    stage: format!("block{}.layer{}", bi + 1, li + 1),
                    shape: vec![ch, h, w],
                });
            }
            out.push(TraceEntry {
                stage: format!("block{}", bi + 1),
                shape: vec![ch, h, w],
            });
            if bi < 3 {
                ch = (c.compression * ch as f64 - 1e-9).ceil() as usize;
                h /= 2;
                w /= 2;
                out.push(TraceEntry {
                    stage: format!("transition{}", bi + 1),
                    shape: vec![ch, h, w],
                });
            }
        }
        out.push(TraceEntry {
            stage: "global_pool".into(),
            shape: vec![ch],
        });
        out.push(TraceEntry {
            stage: "logits".into(),
            shape: vec![c.num_classes],
        });
        out
    }

    /// One minibatch forward/backward in train mode; returns the mean loss.
    /// Gradients are accumulated into the parameters.
    pub fn accumulate_gradients(&mut self, pixels: &[f32], labels: &[usize]) -> Result<f32> {
        let input = self.input_tensor(pixels, labels.len())?;
        let g = self.bind(true);
        let logits = self.run(&input, &g, Mode::Train, None)?;
        let loss = softmax_cross_entropy(&logits, labels)?;
        loss.backward()?;
        for (p, leaf) in self.params.iter_mut().zip(&g.leaves) {
            p.absorb_grad(leaf);
        }
        Ok(loss.item())
    }

    pub fn checkpoint_entries(&self) -> Vec<CheckpointEntry> {
        self.params.iter().map(CheckpointEntry::from).collect()
    }

    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<()> {
        Ok(write_checkpoint(w, &self.checkpoint_entries())?)
    }

    /// Loads parameters written by [`Model::write_checkpoint`] for the same config.
    pub fn read_checkpoint<R: Read>(&mut self, r: R) -> Result<()> {
        let entries = read_checkpoint(r)?;
        if entries.len() != self.params.len() {
            return Err(ModelError::CheckpointMismatch(format!(
                "{} tensors, model has {}",
                entries.len(),
                self.params.len()
            )));
        }
        for (p, e) in self.params.iter_mut().zip(entries) {
            if p.name != e.name || p.shape() != e.shape.as_slice() {
                return Err(ModelError::CheckpointMismatch(format!(
                    "expected {} {:?}, found {} {:?}",
                    p.name,
                    p.shape(),
                    e.name,
                    e.shape
                )));
            }
            p.set_data(e.data)?;
        }
        Ok(())
    }

    fn snapshot(&self) -> Vec<Vec<f32>> {
        self.params.iter().map(|p| p.data().to_vec()).collect()
    }

    fn restore(&mut self, snap: Vec<Vec<f32>>) {
        for (p, d) in self.params.iter_mut().zip(snap) {
            p.set_data(d).expect("snapshot of same model");
        }
    }

    fn set_input_normalisation(&mut self, patches: &[Patch]) {
        let (mut s1, mut s2, mut n) = (0.0f64, 0.0f64, 0usize);
        for p in patches {
            for &v in &p.pixels {
                s1 += v as f64;
                s2 += (v as f64) * (v as f64);
            }
            n += p.pixels.len();
        }
        if n == 0 {
            return;
        }
        let mean = s1 / n as f64;
        let std = (s2 / n as f64 - mean * mean).max(0.0).sqrt().max(1e-6);
        self.params[self.layout.input_mean].set_data(vec![mean as f32]).unwrap();
        self.params[self.layout.input_std].set_data(vec![std as f32]).unwrap();
    }

    /// Row-wise log-softmax for a set of patches, evaluated in chunks.
    pub fn patch_log_probs(&self, patches: &[&[f32]], chunk: usize) -> Result<Vec<Vec<f32>>> {
        let k = self.config.num_classes;
        let mut out = Vec::with_capacity(patches.len());
        for group in patches.chunks(chunk.max(1)) {
            let pixels: Vec<f32> = group.iter().flat_map(|p| p.iter().copied()).collect();
            let logits = self.logits(&pixels, group.len())?;
            let logp = log_softmax_rows(&logits, k);
            out.extend(logp.chunks(k).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    pub fn accuracy(&self, patches: &[Patch], chunk: usize) -> Result<f64> {
        if patches.is_empty() {
            return Ok(0.0);
        }
        let refs: Vec<&[f32]> = patches.iter().map(|p| p.pixels.as_slice()).collect();
        let logp = self.patch_log_probs(&refs, chunk)?;
        let correct = logp.iter().zip(patches).filter(|(row, p)| argmax(row) == p.label).count();
        Ok(correct as f64 / patches.len() as f64)
    }
}

pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            seed: 42,
            early_stop_patience: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
}

const EVAL_CHUNK: usize = 16;

/// Adam on softmax cross-entropy with seeded shuffling. Keeps the parameters
/// of the best validation epoch (the last epoch when `val` is empty) and
/// stops after `early_stop_patience` epochs without improvement.
pub fn train(model: &mut Model, train: &[Patch], val: &[Patch], opts: &TrainOptions) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(ModelError::EmptySplit("training"));
    }
    if opts.batch_size == 0 {
        return Err(ModelError::InvalidConfig("batch size must be positive".into()));
    }
    let k = model.config.num_classes;
    if let Some(p) = train.iter().chain(val).find(|p| p.label >= k) {
        return Err(AutogradError::LabelOutOfRange { label: p.label, classes: k }.into());
    }
    let mut seen = vec![false; k];
    train.iter().for_each(|p| seen[p.label] = true);
    for (c, _) in seen.iter().enumerate().filter(|(_, s)| !**s) {
        warn!("class {c} has no training patches");
    }
    model.set_input_normalisation(train);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let adam = AdamConfig::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: None,
    };
    let mut best: Option<(f64, Vec<Vec<f32>>)> = None;
    let mut stale = 0;
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let pixels: Vec<f32> = batch.iter().flat_map(|&i| train[i].pixels.iter().copied()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let loss = model.accumulate_gradients(&pixels, &labels)?;
            loss_sum += loss as f64 * batch.len() as f64;
            adam_step(model.params.iter_mut(), opts.lr, &adam)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_accuracy = if val.is_empty() {
            None
        } else {
            Some(model.accuracy(val, EVAL_CHUNK)?)
        };
        info!("epoch {epoch}: train loss {train_loss:.4}, val accuracy {val_accuracy:?}");
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_accuracy,
        });
        match val_accuracy {
            Some(acc) if best.as_ref().is_none_or(|(b, _)| acc > *b) => {
                best = Some((acc, model.snapshot()));
                log.best_epoch = epoch;
                log.best_val_accuracy = Some(acc);
                stale = 0;
            }
            Some(_) => {
                stale += 1;
                if stale >= opts.early_stop_patience {
                    debug!("early stop after epoch {epoch}");
                    break;
                }
            }
            None => log.best_epoch = epoch,
        }
    }
    if let Some((_, snap)) = best {
        model.restore(snap);
    }
    Ok(log)
}

/// Segment decision from per-patch log-probability rows.
pub fn aggregate(log_probs: &[Vec<f32>], aggregation: Aggregation) -> Result<(usize, Vec<f64>)> {
    let first = log_probs.first().ok_or(ModelError::NoPatches)?;
    let k = first.len();
    let mut mean = vec![0.0f64; k];
    for row in log_probs {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= log_probs.len() as f64);
    let by_mean = argmax(&mean);
    let class = match aggregation {
        Aggregation::MeanLogprob => by_mean,
        Aggregation::Majority => {
            let mut votes = vec![0usize; k];
            log_probs.iter().for_each(|row| votes[argmax(row)] += 1);
            let top = *votes.iter().max().unwrap();
            (0..k)
                .filter(|&c| votes[c] == top)
                .max_by(|&a, &b| mean[a].total_cmp(&mean[b]).then(b.cmp(&a)))
                .unwrap()
        }
    };
    let lse = {
        let mx = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        mx + mean.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
    };
    Ok((class, mean.iter().map(|v| (v - lse).exp()).collect()))
}

/// Classifies one segment from its patches.
pub fn predict_segment(model: &Model, patches: &[&[f32]], aggregation: Aggregation) -> Result<(usize, Vec<f64>)> {
    if patches.is_empty() {
        return Err(ModelError::NoPatches);
    }
    aggregate(&model.patch_log_probs(patches, EVAL_CHUNK)?, aggregation)
}
