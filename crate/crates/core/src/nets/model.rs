use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm2d, Conv2d};
use crate::error::{Error, Result};
use crate::tensor::{Activation, Tape, Tensor, Var};

/// Shallow image-to-image network `N_phi`: 3x3 convolutions, RBF activations
/// with one learnable scale per channel between them, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct NormModuleConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
}

impl Default for NormModuleConfig {
    fn default() -> Self {
        Self { channels: vec![16, 16, 1], kernel: 3 }
    }
}

/// Where feature taps are read relative to the ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapPoint {
    PostActivation,
    PreActivation,
}

/// U-Net style segmentation network `S_theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub kernel: usize,
    pub n_classes: usize,
    pub tap_point: TapPoint,
}

impl Default for TaskNetConfig {
    fn default() -> Self {
        Self { depth: 3, base_channels: 8, kernel: 3, n_classes: 3, tap_point: TapPoint::PostActivation }
    }
}

impl TaskNetConfig {
    /// `(c_in, c_out)` of every 3x3 convolution, in forward order.
    pub fn conv_shapes(&self) -> Vec<(usize, usize)> {
        let ch = |level: usize| self.base_channels << level;
        let mut shapes = Vec::new();
        for level in 0..self.depth {
            let c_in = if level == 0 { 1 } else { ch(level - 1) };
            shapes.push((c_in, ch(level)));
            shapes.push((ch(level), ch(level)));
        }
        for level in (0..self.depth.saturating_sub(1)).rev() {
            shapes.push((ch(level) + ch(level + 1), ch(level)));
            shapes.push((ch(level), ch(level)));
        }
        shapes
    }

    /// Channel count per tapped layer.
    pub fn tap_channels(&self) -> Vec<usize> {
        self.conv_shapes().iter().map(|s| s.1).collect()
    }

    pub fn spatial_divisor(&self) -> usize {
        1 << self.depth.saturating_sub(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormModule {
    pub config: NormModuleConfig,
    pub convs: Vec<Conv2d>,
    /// One per hidden layer.
    pub sigmas: Vec<Tensor>,
}

impl NormModule {
    pub fn new(config: NormModuleConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.channels.is_empty() || *config.channels.last().unwrap() != 1 {
            return Err(Error::invalid("normalization module must end in one channel"));
        }
        let mut convs = Vec::new();
        let mut sigmas = Vec::new();
        let mut c_in = 1;
        for (i, c_out) in config.channels.iter().enumerate() {
            convs.push(Conv2d::new(c_in, *c_out, config.kernel, rng));
            if i + 1 < config.channels.len() {
                sigmas.push(Tensor::full(&[*c_out], 1.0));
            }
            c_in = *c_out;
        }
        Ok(Self { config, convs, sigmas })
    }

    /// Weight, bias, then sigma (if any) per layer.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push(&c.weight);
            out.push(&c.bias);
            if let Some(s) = self.sigmas.get(i) {
                out.push(s);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let mut sigmas = self.sigmas.iter_mut();
        for c in self.convs.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
            if let Some(s) = sigmas.next() {
                out.push(s);
            }
        }
        out
    }

    pub fn param_norm(&self) -> f64 {
        self.params().iter().map(|p| p.norm().powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskNet {
    pub config: TaskNetConfig,
    pub convs: Vec<Conv2d>,
    pub bns: Vec<BatchNorm2d>,
    pub head: Conv2d,
}

impl TaskNet {
    pub fn new(config: TaskNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.depth == 0 || config.base_channels == 0 || config.n_classes < 2 {
            return Err(Error::invalid(format!("unusable task network config {config:?}")));
        }
        let shapes = config.conv_shapes();
        let convs: Vec<Conv2d> = shapes.iter().map(|(i, o)| Conv2d::new(*i, *o, config.kernel, rng)).collect();
        let bns = shapes.iter().map(|(_, o)| BatchNorm2d::new(*o)).collect();
        let head = Conv2d::new(config.base_channels, config.n_classes, 1, rng);
        Ok(Self { config, convs, bns, head })
    }

    /// Per conv: weight, bias, gamma, beta; then the 1x1 head.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for (c, bn) in self.convs.iter().zip(&self.bns) {
            out.extend([&c.weight, &c.bias, &bn.gamma, &bn.beta]);
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (c, bn) in self.convs.iter_mut().zip(self.bns.iter_mut()) {
            out.extend([&mut c.weight, &mut c.bias, &mut bn.gamma, &mut bn.beta]);
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    pub fn has_running_stats(&self) -> bool {
        self.bns.iter().all(|b| b.running.is_some())
    }
}

/// Which batchnorm statistics a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Batch,
    Running,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub bn: BnMode,
    pub grad_norm: bool,
    pub grad_task: bool,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        Self { bn: BnMode::Running, grad_norm: false, grad_task: false }
    }

    pub fn adapt_norm() -> Self {
        Self { bn: BnMode::Running, grad_norm: true, grad_task: false }
    }

    pub fn train() -> Self {
        Self { bn: BnMode::Batch, grad_norm: true, grad_task: true }
    }
}

pub struct ForwardOutput {
    pub z: Var,
    /// One per convolution of the task network, `[N, C_l, H_l, W_l]`.
    pub taps: Vec<Var>,
    pub logits: Var,
    pub probs: Var,
    /// Leaves in [`NormModule::params`] order.
    pub norm_params: Vec<Var>,
    /// Leaves in [`TaskNet::params`] order.
    pub task_params: Vec<Var>,
    /// Batch mean/variance per batchnorm layer (batch mode only).
    pub bn_batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Detached forward results.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub z: Tensor,
    pub taps: Vec<Tensor>,
    pub probs: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub norm: NormModule,
    pub task: TaskNet,
}

impl Model {
    pub fn new(norm: NormModuleConfig, task: TaskNetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self { norm: NormModule::new(norm, &mut rng)?, task: TaskNet::new(task, &mut rng)? })
    }

    pub fn n_classes(&self) -> usize {
        self.task.config.n_classes
    }

    pub fn tap_channels(&self) -> Vec<usize> {
        self.task.config.tap_channels()
    }

    /// `x: [N, 1, H, W]` through `N_phi` then `S_theta`, exposing every
    /// convolutional layer's output of `S_theta`.
    pub fn forward_with_taps(&self, tape: &mut Tape, x: &Tensor, opts: ForwardOptions) -> Result<ForwardOutput> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 {
            return Err(Error::shape(format!("model input needs 1 channel, got {c}")));
        }
        let div = self.task.config.spatial_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(format!("spatial size {h}x{w} not divisible by {div}")));
        }
        if opts.bn == BnMode::Running && !self.task.has_running_stats() {
            return Err(Error::InvalidState("batchnorm running statistics requested before any training step".into()));
        }
        let leaf = |tape: &mut Tape, t: &Tensor, grad: bool| {
            if grad {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let norm_params: Vec<Var> = self.norm.params().into_iter().map(|p| leaf(tape, p, opts.grad_norm)).collect();
        let task_params: Vec<Var> = self.task.params().into_iter().map(|p| leaf(tape, p, opts.grad_task)).collect();

        let mut h_var = tape.constant(x.clone());
        let mut k = 0;
        let n_norm = self.norm.convs.len();
        for i in 0..n_norm {
            h_var = tape.conv2d(h_var, norm_params[k], norm_params[k + 1])?;
            k += 2;
            if i + 1 < n_norm {
                h_var = tape.activation(h_var, Activation::Rbf, Some(norm_params[k]))?;
                k += 1;
            }
        }
        let z = h_var;

        let mut taps = Vec::with_capacity(self.task.convs.len());
        let mut bn_batch_stats = Vec::new();
        let mut layer = 0;
        let mut block = |tape: &mut Tape, input: Var, layer: usize, taps: &mut Vec<Var>| -> Result<Var> {
            let p = &task_params[layer * 4..layer * 4 + 4];
            let c = tape.conv2d(input, p[0], p[1])?;
            let bn = match opts.bn {
                BnMode::Batch => {
                    let (out, m, v) = tape.batchnorm_batch(c, p[2], p[3], super::layers::BN_EPS)?;
                    bn_batch_stats.push((m, v));
                    out
                }
                BnMode::Running => self.task.bns[layer].forward_running(tape, c, p[2], p[3])?,
            };
            let act = tape.relu(bn);
            taps.push(match self.task.config.tap_point {
                TapPoint::PostActivation => act,
                TapPoint::PreActivation => bn,
            });
            Ok(act)
        };
        let depth = self.task.config.depth;
        let mut cur = z;
        let mut skips = Vec::new();
        for level in 0..depth {
            if level > 0 {
                cur = tape.max_pool2(cur)?;
            }
            for _ in 0..2 {
                cur = block(tape, cur, layer, &mut taps)?;
                layer += 1;
            }
            if level + 1 < depth {
                skips.push(cur);
            }
        }
        for _ in (0..depth.saturating_sub(1)).rev() {
            let up = tape.upsample2(cur)?;
            let skip = skips.pop().unwrap();
            cur = tape.concat_channels(skip, up)?;
            for _ in 0..2 {
                cur = block(tape, cur, layer, &mut taps)?;
                layer += 1;
            }
        }
        let nh = task_params.len();
        let logits = tape.conv2d(cur, task_params[nh - 2], task_params[nh - 1])?;
        let probs = tape.softmax_channels(logits)?;
        Ok(ForwardOutput { z, taps, logits, probs, norm_params, task_params, bn_batch_stats })
    }

    /// Inference with running statistics, in chunks of at most `batch` slices.
    pub fn predict(&self, x: &Tensor, batch: usize) -> Result<Prediction> {
        let n = x.shape().first().copied().unwrap_or(0);
        let batch = batch.max(1);
        let mut zs = Vec::new();
        let mut probs = Vec::new();
        let mut taps: Vec<Vec<Tensor>> = vec![Vec::new(); self.task.convs.len()];
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            let mut tape = Tape::new();
            let out = self.forward_with_taps(&mut tape, &x.slice_outer(start, end)?, ForwardOptions::inference())?;
            tape.ensure_finite()?;
            zs.push(tape.value(out.z).clone());
            probs.push(tape.value(out.probs).clone());
            for (acc, t) in taps.iter_mut().zip(&out.taps) {
                acc.push(tape.value(*t).clone());
            }
            start = end;
        }
        Ok(Prediction {
            z: Tensor::cat_outer(&zs)?,
            taps: taps.iter().map(|t| Tensor::cat_outer(t)).collect::<Result<_>>()?,
            probs: Tensor::cat_outer(&probs)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Model {
        let mut m = Model::new(
            NormModuleConfig { channels: vec![4, 4, 1], kernel: 3 },
            TaskNetConfig { depth: 2, base_channels: 4, n_classes: 3, ..TaskNetConfig::default() },
            3,
        )
        .unwrap();
        for bn in &mut m.task.bns {
            let c = bn.channels();
            bn.update_running(&vec![0.1; c], &vec![0.5; c]);
        }
        m
    }

    fn input(n: usize, s: usize) -> Tensor {
        Tensor::new(vec![n, 1, s, s], (0..n * s * s).map(|i| ((i * 37) % 101) as f64 / 101.0).collect()).unwrap()
    }

    #[test]
    fn tap_count_matches_built_layers() {
        let m = Model::new(NormModuleConfig::default(), TaskNetConfig::default(), 0).unwrap();
        // Two convolutions per encoder level and per decoder level.
        let depth = m.task.config.depth;
        assert_eq!(m.task.convs.len(), 2 * (2 * depth - 1));
        assert_eq!(m.tap_channels().len(), m.task.convs.len());
        assert_eq!(m.tap_channels().iter().sum::<usize>(), 160);
        let toy = toy();
        let mut tape = Tape::new();
        let out = toy.forward_with_taps(&mut tape, &input(2, 8), ForwardOptions::inference()).unwrap();
        assert_eq!(out.taps.len(), toy.task.convs.len());
        let last = tape.shape(*out.taps.last().unwrap());
        assert_eq!(last, &[2, 4, 8, 8]);
        assert_eq!(tape.shape(out.z), &[2, 1, 8, 8]);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = toy();
        let p = m.predict(&input(3, 8), 2).unwrap();
        let (n, k, h, w) = p.probs.dims4().unwrap();
        for ni in 0..n {
            for px in 0..h * w {
                let s: f64 = (0..k).map(|c| p.probs.data()[(ni * k + c) * h * w + px]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_head_gives_uniform_probabilities() {
        let mut m = toy();
        m.task.head.weight.data_mut().fill(0.0);
        m.task.head.bias.data_mut().fill(0.0);
        let p = m.predict(&input(1, 8), 1).unwrap();
        assert!(p.probs.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn indivisible_size_and_missing_stats_are_errors() {
        let m = toy();
        let mut tape = Tape::new();
        assert!(matches!(
            m.forward_with_taps(&mut tape, &input(1, 7), ForwardOptions::inference()),
            Err(Error::Shape(_))
        ));
        let fresh = Model::new(NormModuleConfig::default(), TaskNetConfig::default(), 0).unwrap();
        assert!(matches!(
            fresh.forward_with_taps(&mut tape, &input(1, 8), ForwardOptions::inference()),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn forward_is_pure_and_batch_independent_in_running_mode() {
        let m = toy();
        let x = input(4, 8);
        let a = m.predict(&x, 4).unwrap();
        let b = m.predict(&x, 4).unwrap();
        assert_eq!(a.probs, b.probs);
        let c = m.predict(&x, 1).unwrap();
        assert_eq!(a.probs, c.probs);
        assert_eq!(a.taps, c.taps);
    }
}
