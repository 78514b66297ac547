//! The two-branch functional model: per-branch convolutional stacks, feature
//! concatenation, and the shared dense classifier, plus checkpointing.

mod checkpoint;
mod config;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION,
};
pub use config::{ArchConfig, FusionMode, LayerSpec, ARCH_CONFIG_VERSION};

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use thiserror::Error;

use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor;
use crate::nn::{init, Activation, NnError};

/// Momentum of the batchnorm running statistics.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("version mismatch: expected {expected}, got {got}")]
    VersionMismatch { expected: u32, got: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

struct ConvLayer {
    filters: Tensor,
    bias: Tensor,
    activation: Activation,
}

struct BnLayer {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

struct DenseLayer {
    weights: Tensor,
    bias: Tensor,
    activation: Activation,
}

enum Layer {
    Conv(ConvLayer),
    Pool(usize),
    Bn(BnLayer),
    Dropout(f64),
    Flatten,
    Dense(DenseLayer),
}

pub struct Model {
    cfg: ArchConfig,
    branch1: Vec<Layer>,
    branch2: Vec<Layer>,
    classifier: Vec<Layer>,
}

/// Result of a training-mode forward pass: pre-softmax logits plus the tape
/// nodes of every trainable parameter, index-aligned with `params_mut`.
pub struct ForwardPass {
    pub logits: NodeId,
    pub param_nodes: Vec<NodeId>,
}

#[derive(Clone, Copy, Debug)]
struct PlaneShape {
    ch: usize,
    h: usize,
    w: usize,
}

/// Walks a branch's layer list, checking feasibility and returning the
/// flattened feature length.
fn trace_branch(name: &str, specs: &[LayerSpec], input_size: usize) -> Result<usize, ModelError> {
    let mut s = PlaneShape {
        ch: 1,
        h: input_size,
        w: input_size,
    };
    for spec in specs {
        match spec {
            LayerSpec::Conv2d { filters, kernel, .. } => {
                if s.h < *kernel || s.w < *kernel {
                    return Err(ModelError::InvalidArchitecture(format!(
                        "{name}: {}x{} feature map is smaller than a {kernel}x{kernel} kernel",
                        s.h, s.w
                    )));
                }
                s = PlaneShape {
                    ch: *filters,
                    h: s.h - kernel + 1,
                    w: s.w - kernel + 1,
                };
            }
            LayerSpec::MaxPool2d { pool } => {
                let (h, w) = (s.h / pool, s.w / pool);
                if h == 0 || w == 0 {
                    return Err(ModelError::InvalidArchitecture(format!(
                        "{name}: pooling a {}x{} map by {pool} leaves nothing",
                        s.h, s.w
                    )));
                }
                s.h = h;
                s.w = w;
            }
            LayerSpec::BatchNorm | LayerSpec::Dropout { .. } => {}
            LayerSpec::Flatten => return Ok(s.ch * s.h * s.w),
            LayerSpec::Dense { .. } => {
                return Err(ModelError::InvalidArchitecture(format!(
                    "{name}: dense layer inside a convolutional branch"
                )))
            }
        }
    }
    Err(ModelError::InvalidArchitecture(format!(
        "{name}: missing flatten"
    )))
}

/// Exact count of trainable scalars for a config, without building it.
pub fn parameter_count(cfg: &ArchConfig) -> Result<usize, ModelError> {
    cfg.validate()?;
    let mut total = 0usize;
    let mut feature_len = 0usize;
    for (name, specs, used) in [
        ("branch1", &cfg.branch1, cfg.mode.uses_branch1()),
        ("branch2", &cfg.branch2, cfg.mode.uses_branch2()),
    ] {
        if !used {
            continue;
        }
        feature_len += trace_branch(name, specs, cfg.input_size)?;
        let mut ch = 1usize;
        for spec in specs {
            match spec {
                LayerSpec::Conv2d { filters, kernel, .. } => {
                    total += filters * ch * kernel * kernel + filters;
                    ch = *filters;
                }
                LayerSpec::BatchNorm => total += 2 * ch,
                _ => {}
            }
        }
    }
    let mut f_in = feature_len;
    for spec in &cfg.classifier {
        if let LayerSpec::Dense { width, .. } = spec {
            total += f_in * width + width;
            f_in = *width;
        }
    }
    Ok(total)
}

impl Model {
    /// Builds the network with seeded Glorot-uniform weights, zero biases,
    /// and unit batchnorm scales. Draw order is branch one, branch two, then
    /// the classifier, so the same seed always yields identical parameters.
    pub fn build(cfg: ArchConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let mut feature_len = 0usize;
        let mut branch1 = Vec::new();
        let mut branch2 = Vec::new();
        if cfg.mode.uses_branch1() {
            let (layers, flat) =
                build_branch("branch1", &cfg.branch1, cfg.input_size, &mut rng)?;
            branch1 = layers;
            feature_len += flat;
        }
        if cfg.mode.uses_branch2() {
            let (layers, flat) =
                build_branch("branch2", &cfg.branch2, cfg.input_size, &mut rng)?;
            branch2 = layers;
            feature_len += flat;
        }
        let mut classifier = Vec::new();
        let mut f_in = feature_len;
        for spec in &cfg.classifier {
            match spec {
                LayerSpec::Dense { width, activation } => {
                    let weights = init::glorot_uniform(&mut rng, f_in, *width, &[f_in, *width]);
                    classifier.push(Layer::Dense(DenseLayer {
                        weights,
                        bias: Tensor::zeros(&[*width]),
                        activation: *activation,
                    }));
                    f_in = *width;
                }
                LayerSpec::Dropout { rate } => classifier.push(Layer::Dropout(*rate)),
                _ => unreachable!("validated classifier holds only dense and dropout"),
            }
        }
        Ok(Self {
            cfg,
            branch1,
            branch2,
            classifier,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    /// Trainable tensors in a stable order (branch1, branch2, classifier).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in self
            .branch1
            .iter()
            .chain(self.branch2.iter())
            .chain(self.classifier.iter())
        {
            match layer {
                Layer::Conv(c) => {
                    out.push(&c.filters);
                    out.push(&c.bias);
                }
                Layer::Bn(b) => {
                    out.push(&b.gamma);
                    out.push(&b.beta);
                }
                Layer::Dense(d) => {
                    out.push(&d.weights);
                    out.push(&d.bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable view of the same tensors, in the same order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in self
            .branch1
            .iter_mut()
            .chain(self.branch2.iter_mut())
            .chain(self.classifier.iter_mut())
        {
            match layer {
                Layer::Conv(c) => {
                    out.push(&mut c.filters);
                    out.push(&mut c.bias);
                }
                Layer::Bn(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                }
                Layer::Dense(d) => {
                    out.push(&mut d.weights);
                    out.push(&mut d.bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Parameter names aligned with `params_mut`.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (section, layers) in [
            ("branch1", &self.branch1),
            ("branch2", &self.branch2),
            ("classifier", &self.classifier),
        ] {
            for (i, layer) in layers.iter().enumerate() {
                match layer {
                    Layer::Conv(_) => {
                        out.push(format!("{section}.{i:02}.filters"));
                        out.push(format!("{section}.{i:02}.bias"));
                    }
                    Layer::Bn(_) => {
                        out.push(format!("{section}.{i:02}.gamma"));
                        out.push(format!("{section}.{i:02}.beta"));
                    }
                    Layer::Dense(_) => {
                        out.push(format!("{section}.{i:02}.weights"));
                        out.push(format!("{section}.{i:02}.bias"));
                    }
                    _ => {}
                }
            }
        }
        out
    }

    /// Batchnorm running statistics as named `[C]` tensors (not trainable).
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (section, layers) in [
            ("branch1", &self.branch1),
            ("branch2", &self.branch2),
            ("classifier", &self.classifier),
        ] {
            for (i, layer) in layers.iter().enumerate() {
                if let Layer::Bn(b) = layer {
                    out.push((
                        format!("{section}.{i:02}.running_mean"),
                        Tensor::from_vec(&[b.running_mean.len()], b.running_mean.clone())
                            .expect("state length"),
                    ));
                    out.push((
                        format!("{section}.{i:02}.running_var"),
                        Tensor::from_vec(&[b.running_var.len()], b.running_var.clone())
                            .expect("state length"),
                    ));
                }
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        for layer in self
            .branch1
            .iter()
            .chain(self.branch2.iter())
            .chain(self.classifier.iter())
        {
            total += match layer {
                Layer::Conv(c) => c.filters.numel() + c.bias.numel(),
                Layer::Bn(b) => b.gamma.numel() + b.beta.numel(),
                Layer::Dense(d) => d.weights.numel() + d.bias.numel(),
                _ => 0,
            };
        }
        total
    }

    fn check_input(&self, x: &Tensor, which: &str) -> Result<(), ModelError> {
        let s = x.shape();
        let size = self.cfg.input_size;
        if s.len() != 4 || s[1] != 1 || s[2] != size || s[3] != size {
            return Err(NnError::ShapeMismatch(format!(
                "{which} input must be [batch, 1, {size}, {size}], got {s:?}"
            ))
            .into());
        }
        Ok(())
    }

    /// Training forward pass to pre-softmax logits. Updates batchnorm running
    /// statistics and draws dropout masks from `rng`. Inputs for unused
    /// branches are ignored.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        x1: Option<Tensor>,
        x2: Option<Tensor>,
        rng: &mut Xoshiro256StarStar,
    ) -> Result<ForwardPass, ModelError> {
        let mode = self.cfg.mode;
        let mut param_nodes = Vec::new();
        let mut features: Vec<NodeId> = Vec::new();
        if mode.uses_branch1() {
            let x = x1.ok_or_else(|| missing_input("branch1"))?;
            self.check_input(&x, "branch1")?;
            let id = tape.leaf(x, false);
            features.push(run_branch_train(
                &mut self.branch1,
                tape,
                id,
                rng,
                &mut param_nodes,
            )?);
        }
        if mode.uses_branch2() {
            let x = x2.ok_or_else(|| missing_input("branch2"))?;
            self.check_input(&x, "branch2")?;
            let id = tape.leaf(x, false);
            features.push(run_branch_train(
                &mut self.branch2,
                tape,
                id,
                rng,
                &mut param_nodes,
            )?);
        }
        let mut id = fuse(tape, &features)?;
        let last = self.classifier.len() - 1;
        for (i, layer) in self.classifier.iter_mut().enumerate() {
            id = match layer {
                Layer::Dense(d) => {
                    let w = tape.leaf(d.weights.clone(), true);
                    let b = tape.leaf(d.bias.clone(), true);
                    param_nodes.push(w);
                    param_nodes.push(b);
                    // The final softmax is fused into the loss; emit logits.
                    let act = if i == last {
                        Activation::Identity
                    } else {
                        d.activation
                    };
                    tape.dense(id, w, b, act)?
                }
                Layer::Dropout(rate) => tape.dropout(id, *rate, rng),
                _ => unreachable!("validated classifier"),
            };
        }
        Ok(ForwardPass {
            logits: id,
            param_nodes,
        })
    }

    /// Inference forward pass to class probabilities. Pure: batchnorm uses
    /// running statistics, dropout is the identity, and the model is
    /// immutable.
    pub fn forward_infer(
        &self,
        tape: &mut Tape,
        x1: Option<Tensor>,
        x2: Option<Tensor>,
    ) -> Result<NodeId, ModelError> {
        let mode = self.cfg.mode;
        let mut features: Vec<NodeId> = Vec::new();
        if mode.uses_branch1() {
            let x = x1.ok_or_else(|| missing_input("branch1"))?;
            self.check_input(&x, "branch1")?;
            let id = tape.leaf(x, false);
            features.push(run_branch_infer(&self.branch1, tape, id)?);
        }
        if mode.uses_branch2() {
            let x = x2.ok_or_else(|| missing_input("branch2"))?;
            self.check_input(&x, "branch2")?;
            let id = tape.leaf(x, false);
            features.push(run_branch_infer(&self.branch2, tape, id)?);
        }
        let mut id = fuse(tape, &features)?;
        let last = self.classifier.len() - 1;
        for (i, layer) in self.classifier.iter().enumerate() {
            id = match layer {
                Layer::Dense(d) => {
                    let w = tape.leaf(d.weights.clone(), false);
                    let b = tape.leaf(d.bias.clone(), false);
                    let act = if i == last {
                        Activation::Identity
                    } else {
                        d.activation
                    };
                    tape.dense(id, w, b, act)?
                }
                Layer::Dropout(_) => id,
                _ => unreachable!("validated classifier"),
            };
        }
        Ok(tape.softmax(id)?)
    }

    /// Single-sample convenience: probabilities for one pair of inputs.
    /// The predicted class is the argmax with lowest-index tie-break.
    pub fn forward_fused(
        &self,
        x1: Option<&Tensor>,
        x2: Option<&Tensor>,
    ) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let probs = self.forward_infer(&mut tape, x1.cloned(), x2.cloned())?;
        Ok(tape.value(probs).data().to_vec())
    }

    /// Overwrites a named parameter or state tensor; used by the checkpoint
    /// loader.
    fn set_named(&mut self, name: &str, tensor: &Tensor) -> Result<(), ModelError> {
        let names = self.param_names();
        if let Some(idx) = names.iter().position(|n| n == name) {
            let mut params = self.params_mut();
            if params[idx].shape() != tensor.shape() {
                return Err(ModelError::CorruptCheckpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    params[idx].shape()
                )));
            }
            *params[idx] = tensor.clone();
            return Ok(());
        }
        // Running statistics.
        for (section, layers) in [
            ("branch1", &mut self.branch1),
            ("branch2", &mut self.branch2),
        ] {
            for (i, layer) in layers.iter_mut().enumerate() {
                if let Layer::Bn(b) = layer {
                    let mean_name = format!("{section}.{i:02}.running_mean");
                    let var_name = format!("{section}.{i:02}.running_var");
                    if name == mean_name || name == var_name {
                        let dst = if name == mean_name {
                            &mut b.running_mean
                        } else {
                            &mut b.running_var
                        };
                        if tensor.numel() != dst.len() {
                            return Err(ModelError::CorruptCheckpoint(format!(
                                "state `{name}` has {} values, model expects {}",
                                tensor.numel(),
                                dst.len()
                            )));
                        }
                        dst.copy_from_slice(tensor.data());
                        return Ok(());
                    }
                }
            }
        }
        Err(ModelError::CorruptCheckpoint(format!(
            "no tensor named `{name}` in this architecture"
        )))
    }
}

fn missing_input(which: &str) -> ModelError {
    NnError::ShapeMismatch(format!("mode requires an input for {which}")).into()
}

fn fuse(tape: &mut Tape, features: &[NodeId]) -> Result<NodeId, ModelError> {
    match features {
        [single] => Ok(*single),
        [a, b] => Ok(tape.concat(*a, *b)?),
        _ => unreachable!("one or two branches"),
    }
}

fn build_branch(
    name: &str,
    specs: &[LayerSpec],
    input_size: usize,
    rng: &mut Xoshiro256StarStar,
) -> Result<(Vec<Layer>, usize), ModelError> {
    let flat = trace_branch(name, specs, input_size)?;
    let mut layers = Vec::with_capacity(specs.len());
    let mut ch = 1usize;
    for spec in specs {
        match spec {
            LayerSpec::Conv2d {
                filters,
                kernel,
                activation,
            } => {
                let (fan_in, fan_out) = init::conv_fans(ch, *filters, *kernel);
                let weights =
                    init::glorot_uniform(rng, fan_in, fan_out, &[*filters, ch, *kernel, *kernel]);
                layers.push(Layer::Conv(ConvLayer {
                    filters: weights,
                    bias: Tensor::zeros(&[*filters]),
                    activation: *activation,
                }));
                ch = *filters;
            }
            LayerSpec::MaxPool2d { pool } => layers.push(Layer::Pool(*pool)),
            LayerSpec::BatchNorm => layers.push(Layer::Bn(BnLayer {
                gamma: Tensor::filled(&[ch], 1.0),
                beta: Tensor::zeros(&[ch]),
                running_mean: vec![0.0; ch],
                running_var: vec![1.0; ch],
            })),
            LayerSpec::Dropout { rate } => layers.push(Layer::Dropout(*rate)),
            LayerSpec::Flatten => layers.push(Layer::Flatten),
            LayerSpec::Dense { .. } => unreachable!("validated branch"),
        }
    }
    Ok((layers, flat))
}

fn run_branch_train(
    layers: &mut [Layer],
    tape: &mut Tape,
    mut id: NodeId,
    rng: &mut Xoshiro256StarStar,
    param_nodes: &mut Vec<NodeId>,
) -> Result<NodeId, ModelError> {
    for layer in layers.iter_mut() {
        id = match layer {
            Layer::Conv(c) => {
                let w = tape.leaf(c.filters.clone(), true);
                let b = tape.leaf(c.bias.clone(), true);
                param_nodes.push(w);
                param_nodes.push(b);
                let y = tape.conv2d(id, w, b)?;
                tape.activate(y, c.activation)?
            }
            Layer::Pool(p) => tape.maxpool2d(id, *p)?,
            Layer::Bn(bn) => {
                let gamma = tape.leaf(bn.gamma.clone(), true);
                let beta = tape.leaf(bn.beta.clone(), true);
                param_nodes.push(gamma);
                param_nodes.push(beta);
                let (y, stats) = tape.batchnorm_train(id, gamma, beta)?;
                for (rm, m) in bn.running_mean.iter_mut().zip(&stats.mean) {
                    *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * m;
                }
                for (rv, v) in bn.running_var.iter_mut().zip(&stats.var) {
                    *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * v;
                }
                y
            }
            Layer::Dropout(rate) => tape.dropout(id, *rate, rng),
            Layer::Flatten => tape.flatten(id)?,
            Layer::Dense(_) => unreachable!("validated branch"),
        };
    }
    Ok(id)
}

fn run_branch_infer(
    layers: &[Layer],
    tape: &mut Tape,
    mut id: NodeId,
) -> Result<NodeId, ModelError> {
    for layer in layers.iter() {
        id = match layer {
            Layer::Conv(c) => {
                let w = tape.leaf(c.filters.clone(), false);
                let b = tape.leaf(c.bias.clone(), false);
                let y = tape.conv2d(id, w, b)?;
                tape.activate(y, c.activation)?
            }
            Layer::Pool(p) => tape.maxpool2d(id, *p)?,
            Layer::Bn(bn) => {
                let gamma = tape.leaf(bn.gamma.clone(), false);
                let beta = tape.leaf(bn.beta.clone(), false);
                tape.batchnorm_infer(id, gamma, beta, &bn.running_mean, &bn.running_var)?
            }
            Layer::Dropout(_) => id,
            Layer::Flatten => tape.flatten(id)?,
            Layer::Dense(_) => unreachable!("validated branch"),
        };
    }
    Ok(id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn input(seed: u64, size: usize) -> Tensor {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let data = (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[1, 1, size, size], data).unwrap()
    }

    #[test]
    fn default_model_emits_a_distribution() {
        let model = Model::build(ArchConfig::default_fused(), 7).unwrap();
        let x1 = input(1, 128);
        let x2 = input(2, 128);
        let probs = model.forward_fused(Some(&x1), Some(&x2)).unwrap();
        assert_eq!(probs.len(), 14);
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(probs.iter().all(|&p| p >= 0.0));
        // Freshly initialized output is near uniform: the cross-entropy of
        // any class sits near ln(14).
        let loss = -probs[3].max(1e-12).ln();
        assert!((loss - 14.0f64.ln()).abs() < 0.5);
    }

    #[test]
    fn untrained_model_is_near_uniform() {
        let model = Model::build(ArchConfig::compact(4), 3).unwrap();
        let x1 = input(5, 128);
        let x2 = input(6, 128);
        let probs = model.forward_fused(Some(&x1), Some(&x2)).unwrap();
        let loss = -probs[2].max(1e-12).ln();
        assert!((loss - 4.0f64.ln()).abs() < 0.5);
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let mut a = Model::build(ArchConfig::compact(4), 11).unwrap();
        let mut b = Model::build(ArchConfig::compact(4), 11).unwrap();
        for (pa, pb) in a.params_mut().iter().zip(b.params_mut().iter()) {
            assert_eq!(pa, pb);
        }
        let mut c = Model::build(ArchConfig::compact(4), 12).unwrap();
        let differs = a
            .params_mut()
            .iter()
            .zip(c.params_mut().iter())
            .any(|(x, y)| x != y);
        assert!(differs);
    }

    #[test]
    fn branch_only_modes_ignore_the_unused_input() {
        let mut cfg = ArchConfig::compact(4);
        cfg.mode = FusionMode::Branch1Only;
        let model = Model::build(cfg, 1).unwrap();
        let x1 = input(1, 128);
        let nan = Tensor::filled(&[1, 1, 128, 128], f64::NAN);
        let probs = model.forward_fused(Some(&x1), Some(&nan)).unwrap();
        assert!(probs.iter().all(|p| p.is_finite()));
        // The unused input may be absent entirely.
        let probs2 = model.forward_fused(Some(&x1), None).unwrap();
        assert_eq!(probs, probs2);

        let mut cfg = ArchConfig::compact(4);
        cfg.mode = FusionMode::Branch2Only;
        let model = Model::build(cfg, 1).unwrap();
        let probs = model.forward_fused(None, Some(&x1)).unwrap();
        assert!(probs.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn fused_feature_length_is_the_sum_of_branches() {
        let cfg = ArchConfig::compact(4);
        let b1 = trace_branch("branch1", &cfg.branch1, cfg.input_size).unwrap();
        let b2 = trace_branch("branch2", &cfg.branch2, cfg.input_size).unwrap();
        let mut c1 = cfg.clone();
        c1.mode = FusionMode::Branch1Only;
        let mut c2 = cfg.clone();
        c2.mode = FusionMode::Branch2Only;
        // First classifier weight matrix rows = incoming feature length.
        let mut fused = Model::build(cfg, 1).unwrap();
        let mut only1 = Model::build(c1, 1).unwrap();
        let mut only2 = Model::build(c2, 1).unwrap();
        let first_dense_rows = |m: &mut Model| {
            let names = m.param_names();
            let idx = names
                .iter()
                .position(|n| n.starts_with("classifier") && n.ends_with("weights"))
                .unwrap();
            m.params_mut()[idx].shape()[0]
        };
        assert_eq!(first_dense_rows(&mut fused), b1 + b2);
        assert_eq!(first_dense_rows(&mut only1), b1);
        assert_eq!(first_dense_rows(&mut only2), b2);
        assert!(b1 + b2 > b1.max(b2));
    }

    #[test]
    fn infer_is_deterministic_and_immutable() {
        let model = Model::build(ArchConfig::compact(4), 2).unwrap();
        let x1 = input(3, 128);
        let x2 = input(4, 128);
        let a = model.forward_fused(Some(&x1), Some(&x2)).unwrap();
        let b = model.forward_fused(Some(&x1), Some(&x2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predicted_class_is_shift_invariant() {
        // Softmax preserves argmax under constant logit shifts by
        // construction; verify on the probability vector directly.
        let model = Model::build(ArchConfig::compact(4), 9).unwrap();
        let x1 = input(7, 128);
        let x2 = input(8, 128);
        let probs = model.forward_fused(Some(&x1), Some(&x2)).unwrap();
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let shifted: Vec<f64> = probs.iter().map(|p| p * 2.0).collect();
        let argmax2 = shifted
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        assert_eq!(argmax, argmax2);
    }

    #[test]
    fn parameter_count_examples() {
        // Single dense 10 -> 14 with bias.
        let spec = LayerSpec::Dense {
            width: 14,
            activation: Activation::Relu,
        };
        if let LayerSpec::Dense { width, .. } = spec {
            assert_eq!(10 * width + width, 154);
        }
        // Single conv 1 -> 16 channels, 3x3, with bias.
        assert_eq!(16 * 9 + 16, 160);

        // Full default config against an itemized ledger.
        let cfg = ArchConfig::default_fused();
        let b1 = 160 + (32 * 16 * 9 + 32) + 2 * 32 + (64 * 32 * 9 + 64);
        let b2 = 160 + (32 * 16 * 9 + 32) + 2 * 32 + (64 * 32 * 9 + 64) + (128 * 64 * 9 + 128);
        let flat = 64 * 3 * 3 + 128 * 3 * 3;
        let cls = (flat * 512 + 512)
            + (512 * 256 + 256)
            + (256 * 128 + 128)
            + (128 * 64 + 64)
            + (64 * 14 + 14);
        let ledger = b1 + b2 + cls;
        assert_eq!(parameter_count(&cfg).unwrap(), ledger);
        let model = Model::build(cfg, 0).unwrap();
        assert_eq!(model.parameter_count(), ledger);
    }

    #[test]
    fn infeasible_shapes_are_rejected() {
        let mut cfg = ArchConfig::compact(4);
        cfg.input_size = 8; // three pools of 3 collapse an 8x8 input
        assert!(matches!(
            Model::build(cfg, 0),
            Err(ModelError::InvalidArchitecture(_))
        ));
    }
}
