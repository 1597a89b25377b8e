//! Encoder-decoder graph construction, forward pass and backpropagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::*;
use super::tensor::Tensor;
use crate::dataprep::PatchSample;
use crate::error::{validation, Result};
use crate::loss::PARAM_SLOPE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Column-maximum reflectivity as a single channel.
    #[serde(rename = "composite_2d", alias = "2dmax")]
    Composite2d,
    /// Every height level as its own channel.
    #[serde(rename = "levels_2d", alias = "2d24f")]
    Levels2d,
    /// One channel over a `(levels, rows, cols)` volume with 3-D kernels.
    #[serde(rename = "volume_3d", alias = "3d")]
    Volume3d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipStyle {
    Unet,
    Unet3plus,
}

/// Architecture of the encoder-decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub input_mode: InputMode,
    /// Number of height levels in each input patch.
    pub levels: usize,
    /// Number of 2x pooling stages.
    pub depth: usize,
    pub base_filters: usize,
    pub kernel_size: usize,
    pub skip_style: SkipStyle,
    pub batch_norm: bool,
    pub l2_reg: f64,
    /// Initial scale (m/s) encoded in the bias of the scale output map.
    #[serde(default = "default_init_sigma")]
    pub init_sigma: f64,
}

fn default_init_sigma() -> f64 {
    8.0
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_mode: InputMode::Levels2d,
            levels: 12,
            depth: 2,
            base_filters: 8,
            kernel_size: 3,
            skip_style: SkipStyle::Unet,
            batch_norm: false,
            l2_reg: 0.0,
            init_sigma: default_init_sigma(),
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.depth) {
            return validation(format!("depth {} must be between 1 and 3", self.depth));
        }
        if self.base_filters == 0 || self.levels == 0 {
            return validation("base_filters and levels must be positive");
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return validation(format!("kernel size {} must be odd", self.kernel_size));
        }
        if !(self.l2_reg >= 0.0) || !self.l2_reg.is_finite() {
            return validation("l2_reg must be finite and >= 0");
        }
        if !(self.init_sigma > 0.0) || !self.init_sigma.is_finite() {
            return validation("init_sigma must be positive");
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        match self.input_mode {
            InputMode::Levels2d => self.levels,
            InputMode::Composite2d | InputMode::Volume3d => 1,
        }
    }

    fn in_depth(&self) -> usize {
        match self.input_mode {
            InputMode::Volume3d => self.levels,
            _ => 1,
        }
    }

    fn kernel(&self) -> [usize; 3] {
        let k = self.kernel_size;
        match self.input_mode {
            InputMode::Volume3d => [k, k, k],
            _ => [1, k, k],
        }
    }

    pub fn check_patch(&self, levels: usize, rows: usize, cols: usize) -> Result<()> {
        if levels != self.levels {
            return validation(format!("input has {levels} levels, model expects {}", self.levels));
        }
        let f = 1usize << self.depth;
        if !rows.is_multiple_of(f) || !cols.is_multiple_of(f) || rows == 0 || cols == 0 {
            return validation(format!("input {rows}x{cols} is not divisible by 2^{}", self.depth));
        }
        Ok(())
    }

    /// Builds the input tensor for a batch of patches.
    pub fn input_tensor(&self, samples: &[&PatchSample]) -> Result<Tensor> {
        let first = samples.first().ok_or_else(|| crate::Error::Validation("empty batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        for s in samples {
            if s.height != h || s.width != w {
                return validation("batch mixes patch sizes");
            }
            self.check_patch(s.levels, s.height, s.width)?;
            match self.input_mode {
                InputMode::Composite2d => data.extend(s.composite().iter().map(|&v| v as f64)),
                InputMode::Levels2d | InputMode::Volume3d => data.extend(s.x.iter().map(|&v| v as f64)),
            }
        }
        let shape = [samples.len(), self.in_channels(), self.in_depth(), h, w];
        Ok(Tensor::from_vec(shape, data))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamKind {
    ConvWeight { fan_in: usize, fan_out: usize },
    Bias,
    BnGamma,
    BnBeta,
}

#[derive(Debug, Clone)]
pub struct ParamInfo {
    pub len: usize,
    pub kind: ParamKind,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv { weight: usize, bias: usize, out_c: usize, kernel: [usize; 3] },
    Relu,
    BatchNorm { gamma: usize, beta: usize, stats: usize },
    MaxPool { factor: [usize; 3] },
    Upsample { factor: [usize; 3] },
    Concat,
    DepthToChannel,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    channels: usize,
    depth: usize,
}

/// Trainable parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub params: Vec<Vec<f64>>,
    /// Per batch-norm layer: running mean then running variance.
    pub buffers: Vec<Vec<f64>>,
}

impl Weights {
    pub fn is_finite(&self) -> bool {
        self.params.iter().chain(&self.buffers).all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.len()]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Values recorded during a forward pass for backpropagation.
pub struct ForwardPass {
    outputs: Vec<Tensor>,
    pool_args: Vec<Option<Vec<usize>>>,
    bn_caches: Vec<Option<BnCache>>,
    /// Batch mean and variance per batch-norm layer (train mode only).
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ForwardPass {
    pub fn output(&self) -> &Tensor {
        self.outputs.last().expect("graph has nodes")
    }
}

/// Compiled computation graph for a [`ModelSpec`].
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: ModelSpec,
    nodes: Vec<Node>,
    pub params: Vec<ParamInfo>,
    n_bn: usize,
}

pub const OUTPUT_CHANNELS: usize = 4;

impl Network {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut net = Network { spec: spec.clone(), nodes: Vec::new(), params: Vec::new(), n_bn: 0 };
        net.build();
        Ok(net)
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, channels: usize, depth: usize) -> usize {
        self.nodes.push(Node { op, inputs, channels, depth });
        self.nodes.len() - 1
    }

    fn conv(&mut self, input: usize, out_c: usize, kernel: [usize; 3]) -> usize {
        let in_c = self.nodes[input].channels;
        let kvol: usize = kernel.iter().product();
        let weight = self.params.len();
        self.params
            .push(ParamInfo { len: out_c * in_c * kvol, kind: ParamKind::ConvWeight { fan_in: in_c * kvol, fan_out: out_c * kvol } });
        let bias = self.params.len();
        self.params.push(ParamInfo { len: out_c, kind: ParamKind::Bias });
        let depth = self.nodes[input].depth;
        self.push(Op::Conv { weight, bias, out_c, kernel }, vec![input], out_c, depth)
    }

    /// conv, optional batch norm, ReLU
    fn conv_unit(&mut self, input: usize, out_c: usize) -> usize {
        let mut x = self.conv(input, out_c, self.spec.kernel());
        if self.spec.batch_norm {
            let gamma = self.params.len();
            self.params.push(ParamInfo { len: out_c, kind: ParamKind::BnGamma });
            let beta = self.params.len();
            self.params.push(ParamInfo { len: out_c, kind: ParamKind::BnBeta });
            let stats = self.n_bn;
            self.n_bn += 1;
            let depth = self.nodes[x].depth;
            x = self.push(Op::BatchNorm { gamma, beta, stats }, vec![x], out_c, depth);
        }
        let depth = self.nodes[x].depth;
        self.push(Op::Relu, vec![x], out_c, depth)
    }

    fn block(&mut self, input: usize, out_c: usize) -> usize {
        let x = self.conv_unit(input, out_c);
        self.conv_unit(x, out_c)
    }

    fn pool_factor(&self, scale: usize) -> [usize; 3] {
        [1, scale, scale]
    }

    fn pool(&mut self, input: usize, scale: usize) -> usize {
        let (c, d) = (self.nodes[input].channels, self.nodes[input].depth);
        self.push(Op::MaxPool { factor: self.pool_factor(scale) }, vec![input], c, d)
    }

    fn upsample(&mut self, input: usize, scale: usize) -> usize {
        let (c, d) = (self.nodes[input].channels, self.nodes[input].depth);
        self.push(Op::Upsample { factor: self.pool_factor(scale) }, vec![input], c, d)
    }

    fn concat(&mut self, inputs: Vec<usize>) -> usize {
        let c = inputs.iter().map(|&i| self.nodes[i].channels).sum();
        let d = self.nodes[inputs[0]].depth;
        self.push(Op::Concat, inputs, c, d)
    }

    fn build(&mut self) {
        let spec = self.spec.clone();
        let f = spec.base_filters;
        let input = self.push(Op::Input, vec![], spec.in_channels(), spec.in_depth());
        let mut encoders = vec![self.block(input, f)];
        for level in 1..=spec.depth {
            let p = self.pool(encoders[level - 1], 2);
            let e = self.block(p, f << level);
            encoders.push(e);
        }
        let top = match spec.skip_style {
            SkipStyle::Unet => {
                let mut d = encoders[spec.depth];
                for level in (0..spec.depth).rev() {
                    let u = self.upsample(d, 2);
                    let c = self.concat(vec![u, encoders[level]]);
                    d = self.block(c, f << level);
                }
                d
            }
            SkipStyle::Unet3plus => {
                // every decoder level sees every encoder level and all deeper decoders
                let mut decoders = vec![0usize; spec.depth + 1];
                decoders[spec.depth] = encoders[spec.depth];
                for level in (0..spec.depth).rev() {
                    let mut parts = Vec::with_capacity(spec.depth + 1);
                    for (src, &enc) in encoders.iter().enumerate().take(level + 1) {
                        let x = if src < level { self.pool(enc, 1 << (level - src)) } else { enc };
                        parts.push(self.conv_unit(x, f));
                    }
                    for (src, &dec) in decoders.iter().enumerate().skip(level + 1) {
                        let x = self.upsample(dec, 1 << (src - level));
                        parts.push(self.conv_unit(x, f));
                    }
                    let c = self.concat(parts);
                    decoders[level] = self.conv_unit(c, f * (spec.depth + 1));
                }
                decoders[0]
            }
        };
        let head_in = if spec.input_mode == InputMode::Volume3d {
            let c = self.nodes[top].channels * self.nodes[top].depth;
            self.push(Op::DepthToChannel, vec![top], c, 1)
        } else {
            top
        };
        self.conv(head_in, OUTPUT_CHANNELS, [1, 1, 1]);
    }

    /// Glorot-uniform weights, zero biases, unit batch-norm scale. The
    /// scale-map bias starts at `init_sigma`.
    pub fn init_weights(&self, seed: u64) -> Weights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<Vec<f64>> = self
            .params
            .iter()
            .map(|info| match info.kind {
                ParamKind::ConvWeight { fan_in, fan_out } => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..info.len).map(|_| rng.random_range(-limit..limit)).collect()
                }
                ParamKind::Bias | ParamKind::BnBeta => vec![0.0; info.len],
                ParamKind::BnGamma => vec![1.0; info.len],
            })
            .collect();
        if let Some(head_bias) = self.head_bias() {
            params[head_bias][1] = PARAM_SLOPE * self.spec.init_sigma.ln();
        }
        let buffers = (0..self.n_bn)
            .flat_map(|i| {
                let c = self.bn_channels(i);
                [vec![0.0; c], vec![1.0; c]]
            })
            .collect();
        Weights { params, buffers }
    }

    /// All parameters zero (batch-norm scale included).
    pub fn zero_weights(&self) -> Weights {
        Weights {
            params: self.params.iter().map(|p| vec![0.0; p.len]).collect(),
            buffers: (0..self.n_bn)
                .flat_map(|i| {
                    let c = self.bn_channels(i);
                    [vec![0.0; c], vec![1.0; c]]
                })
                .collect(),
        }
    }

    fn head_bias(&self) -> Option<usize> {
        match self.nodes.last()?.op {
            Op::Conv { bias, .. } => Some(bias),
            _ => None,
        }
    }

    fn bn_channels(&self, stats_idx: usize) -> usize {
        self.nodes
            .iter()
            .find_map(|n| match n.op {
                Op::BatchNorm { stats, .. } if stats == stats_idx => Some(n.channels),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn bn_layers(&self) -> usize {
        self.n_bn
    }

    pub fn check_weights(&self, w: &Weights) -> Result<()> {
        if w.params.len() != self.params.len() || w.params.iter().zip(&self.params).any(|(p, i)| p.len() != i.len) {
            return validation("weights do not match the network architecture");
        }
        if w.buffers.len() != 2 * self.n_bn {
            return validation("batch-norm statistics do not match the network architecture");
        }
        Ok(())
    }

    pub fn forward(&self, w: &Weights, input: &Tensor, mode: Mode) -> Result<ForwardPass> {
        self.check_weights(w)?;
        let [_, c, d, h, wd] = input.shape;
        if c != self.spec.in_channels() || d != self.spec.in_depth() {
            return validation(format!(
                "input has {c} channels x {d} depth, model expects {} x {}",
                self.spec.in_channels(),
                self.spec.in_depth()
            ));
        }
        self.spec.check_patch(self.spec.levels, h, wd)?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut pool_args = vec![None; self.nodes.len()];
        let mut bn_caches = vec![None; self.nodes.len()];
        let mut batch_stats = vec![(Vec::new(), Vec::new()); self.n_bn];
        for (id, node) in self.nodes.iter().enumerate() {
            let out = match &node.op {
                Op::Input => input.clone(),
                Op::Conv { weight, bias, out_c, kernel } => {
                    conv_forward(&outputs[node.inputs[0]], &w.params[*weight], &w.params[*bias], *out_c, *kernel)
                }
                Op::Relu => relu_forward(&outputs[node.inputs[0]]),
                Op::BatchNorm { gamma, beta, stats } => {
                    let x = &outputs[node.inputs[0]];
                    match mode {
                        Mode::Train => {
                            let (y, cache, mean, var) = batchnorm_train(x, &w.params[*gamma], &w.params[*beta]);
                            bn_caches[id] = Some(cache);
                            batch_stats[*stats] = (mean, var);
                            y
                        }
                        Mode::Eval => {
                            batchnorm_eval(x, &w.params[*gamma], &w.params[*beta], &w.buffers[2 * stats], &w.buffers[2 * stats + 1])
                        }
                    }
                }
                Op::MaxPool { factor } => {
                    let (y, arg) = maxpool_forward(&outputs[node.inputs[0]], *factor);
                    pool_args[id] = Some(arg);
                    y
                }
                Op::Upsample { factor } => upsample_forward(&outputs[node.inputs[0]], *factor),
                Op::Concat => {
                    let parts: Vec<&Tensor> = node.inputs.iter().map(|&i| &outputs[i]).collect();
                    concat_forward(&parts)
                }
                Op::DepthToChannel => {
                    let x = &outputs[node.inputs[0]];
                    let [n, c, d, h, wd] = x.shape;
                    Tensor::from_vec([n, c * d, 1, h, wd], x.data.clone())
                }
            };
            outputs.push(out);
        }
        Ok(ForwardPass { outputs, pool_args, bn_caches, batch_stats })
    }

    /// Gradients of a scalar objective with respect to every parameter,
    /// given its gradient with respect to the network output.
    pub fn backward(&self, w: &Weights, pass: &ForwardPass, grad_output: Tensor) -> Vec<Vec<f64>> {
        let mut grads = w.zeros_like();
        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let last = self.nodes.len() - 1;
        node_grads[last] = Some(grad_output);
        let accumulate = |slot: &mut Option<Tensor>, g: Tensor| match slot {
            Some(t) => t.add_assign(&g),
            None => *slot = Some(g),
        };
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = node_grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Conv { weight, bias, kernel, .. } => {
                    let src = node.inputs[0];
                    let (gi, gw, gb) = conv_backward(&pass.outputs[src], &w.params[*weight], &g, *kernel);
                    grads[*weight] = gw;
                    grads[*bias] = gb;
                    if !matches!(self.nodes[src].op, Op::Input) {
                        accumulate(&mut node_grads[src], gi);
                    }
                }
                Op::Relu => {
                    let gi = relu_backward(&pass.outputs[id], &g);
                    accumulate(&mut node_grads[node.inputs[0]], gi);
                }
                Op::BatchNorm { gamma, beta, .. } => {
                    let cache = pass.bn_caches[id].as_ref().expect("batch norm backward needs a train-mode pass");
                    let (gi, gg, gb) = batchnorm_backward(cache, &w.params[*gamma], &g);
                    grads[*gamma] = gg;
                    grads[*beta] = gb;
                    accumulate(&mut node_grads[node.inputs[0]], gi);
                }
                Op::MaxPool { .. } => {
                    let src = node.inputs[0];
                    let arg = pass.pool_args[id].as_ref().expect("pool indices recorded");
                    accumulate(&mut node_grads[src], maxpool_backward(pass.outputs[src].shape, arg, &g));
                }
                Op::Upsample { factor } => {
                    let src = node.inputs[0];
                    accumulate(&mut node_grads[src], upsample_backward(pass.outputs[src].shape, *factor, &g));
                }
                Op::Concat => {
                    let shapes: Vec<[usize; 5]> = node.inputs.iter().map(|&i| pass.outputs[i].shape).collect();
                    for (&src, gi) in node.inputs.iter().zip(concat_backward(&shapes, &g)) {
                        accumulate(&mut node_grads[src], gi);
                    }
                }
                Op::DepthToChannel => {
                    let src = node.inputs[0];
                    accumulate(&mut node_grads[src], Tensor::from_vec(pass.outputs[src].shape, g.data));
                }
            }
        }
        grads
    }

    pub fn predict_raw(&self, w: &Weights, input: &Tensor) -> Result<Tensor> {
        let mut pass = self.forward(w, input, Mode::Eval)?;
        Ok(pass.outputs.pop().expect("graph has nodes"))
    }

    /// L2 penalty over convolution weights and its gradient contribution.
    pub fn l2_penalty(&self, w: &Weights, grads: Option<&mut [Vec<f64>]>) -> f64 {
        let lambda = self.spec.l2_reg;
        if lambda == 0.0 {
            return 0.0;
        }
        let mut total = 0.0;
        let mut grads = grads;
        for (i, info) in self.params.iter().enumerate() {
            if let ParamKind::ConvWeight { .. } = info.kind {
                total += w.params[i].iter().map(|v| v * v).sum::<f64>();
                if let Some(g) = grads.as_deref_mut() {
                    for (gv, &pv) in g[i].iter_mut().zip(&w.params[i]) {
                        *gv += 2.0 * lambda * pv;
                    }
                }
            }
        }
        lambda * total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mode: InputMode, skip: SkipStyle, depth: usize, bn: bool) -> ModelSpec {
        ModelSpec {
            input_mode: mode,
            levels: 4,
            depth,
            base_filters: 2,
            kernel_size: 3,
            skip_style: skip,
            batch_norm: bn,
            l2_reg: 0.0,
            init_sigma: 1.0,
        }
    }

    fn input_for(s: &ModelSpec, n: usize, h: usize, w: usize) -> Tensor {
        let shape = [n, s.in_channels(), s.in_depth(), h, w];
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| ((i * 37 % 101) as f64) / 101.0).collect())
    }

    #[test]
    fn output_shape_preserved_for_all_modes() {
        for mode in [InputMode::Composite2d, InputMode::Levels2d, InputMode::Volume3d] {
            for skip in [SkipStyle::Unet, SkipStyle::Unet3plus] {
                let s = spec(mode, skip, 2, false);
                let net = Network::new(&s).unwrap();
                let w = net.init_weights(1);
                let out = net.predict_raw(&w, &input_for(&s, 2, 8, 12)).unwrap();
                assert_eq!(out.shape, [2, 4, 1, 8, 12], "{mode:?} {skip:?}");
            }
        }
    }

    #[test]
    fn depth_three_on_32() {
        let s = ModelSpec { depth: 3, ..spec(InputMode::Levels2d, SkipStyle::Unet, 3, false) };
        let net = Network::new(&s).unwrap();
        let out = net.predict_raw(&net.init_weights(0), &input_for(&s, 1, 32, 32)).unwrap();
        assert_eq!(out.shape, [1, 4, 1, 32, 32]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let s = spec(InputMode::Levels2d, SkipStyle::Unet, 2, false);
        let net = Network::new(&s).unwrap();
        let out = net.predict_raw(&net.zero_weights(), &input_for(&s, 1, 8, 8)).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_indivisible_or_mismatched_input() {
        let s = spec(InputMode::Levels2d, SkipStyle::Unet, 2, false);
        let net = Network::new(&s).unwrap();
        let w = net.init_weights(0);
        assert!(net.predict_raw(&w, &input_for(&s, 1, 6, 8)).is_err());
        let wrong = Tensor::zeros([1, 3, 1, 8, 8]);
        assert!(net.predict_raw(&w, &wrong).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let base = spec(InputMode::Levels2d, SkipStyle::Unet, 2, false);
        assert!(Network::new(&ModelSpec { depth: 0, ..base.clone() }).is_err());
        assert!(Network::new(&ModelSpec { depth: 4, ..base.clone() }).is_err());
        assert!(Network::new(&ModelSpec { kernel_size: 2, ..base.clone() }).is_err());
        assert!(Network::new(&ModelSpec { base_filters: 0, ..base }).is_err());
    }

    #[test]
    fn init_sets_scale_bias() {
        let s = ModelSpec { init_sigma: 8.0, ..spec(InputMode::Levels2d, SkipStyle::Unet, 1, false) };
        let net = Network::new(&s).unwrap();
        let w = net.init_weights(3);
        let head = net.head_bias().unwrap();
        assert!((w.params[head][1] / PARAM_SLOPE - 8f64.ln()).abs() < 1e-12);
    }

    /// Whole-network gradient check on a linear probe objective.
    fn gradient_check(s: &ModelSpec) {
        let net = Network::new(s).unwrap();
        let mut w = net.init_weights(7);
        // nonzero biases keep pre-activations off the ReLU kink
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (p, info) in w.params.iter_mut().zip(&net.params) {
            if matches!(info.kind, ParamKind::Bias | ParamKind::BnBeta) {
                p.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        }
        let x = input_for(s, 2, 4, 4);
        let pass = net.forward(&w, &x, Mode::Train).unwrap();
        let probe: Vec<f64> = (0..pass.output().data.len()).map(|i| ((i * 13 % 17) as f64 - 8.0) / 8.0).collect();
        let objective = |w: &Weights| -> f64 {
            let p = net.forward(w, &x, Mode::Train).unwrap();
            p.output().data.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let grads = net.backward(&w, &pass, Tensor::from_vec(pass.output().shape, probe.clone()));
        let h = 1e-6;
        for (pi, g) in grads.iter().enumerate() {
            for k in (0..g.len()).step_by(3) {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp.params[pi][k] += h;
                wm.params[pi][k] -= h;
                let fd = (objective(&wp) - objective(&wm)) / (2.0 * h);
                let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-4);
                assert!(err < 1e-3, "param {pi}[{k}]: fd={fd} analytic={}", g[k]);
            }
        }
    }

    #[test]
    fn gradient_check_unet_2d() {
        gradient_check(&spec(InputMode::Levels2d, SkipStyle::Unet, 1, false));
    }

    #[test]
    fn gradient_check_unet3plus_with_batch_norm() {
        gradient_check(&spec(InputMode::Composite2d, SkipStyle::Unet3plus, 2, true));
    }

    #[test]
    fn gradient_check_volume() {
        gradient_check(&ModelSpec { levels: 2, ..spec(InputMode::Volume3d, SkipStyle::Unet, 1, false) });
    }

    #[test]
    fn l2_penalty_gradient() {
        let s = ModelSpec { l2_reg: 0.01, ..spec(InputMode::Levels2d, SkipStyle::Unet, 1, false) };
        let net = Network::new(&s).unwrap();
        let w = net.init_weights(2);
        let mut g = w.zeros_like();
        let pen = net.l2_penalty(&w, Some(&mut g));
        assert!(pen > 0.0);
        let i = 0;
        assert!((g[i][0] - 0.02 * w.params[i][0]).abs() < 1e-15);
        assert!(g[1].iter().all(|&v| v == 0.0));
    }
}
