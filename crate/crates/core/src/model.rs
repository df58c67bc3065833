//! Classifier catalog: build, train, predict, serialize.
//!
//! Three architectures stand in for a source/target/defense trio: two
//! distinct CNNs plus an MLP. Training is plain minibatch SGD; the only
//! Adam in this codebase is the attack-side optimizer.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::{self, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, LayerDef, LayerKind, Padding, Params};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    MlpA,
    CnnA,
    CnnB,
    /// Deeper four-conv stack; the hardest surrogate to optimize against.
    CnnC,
}

impl Arch {
    pub fn id(&self) -> &'static str {
        match self {
            Arch::MlpA => "mlp-a",
            Arch::CnnA => "cnn-a",
            Arch::CnnB => "cnn-b",
            Arch::CnnC => "cnn-c",
        }
    }

    pub fn parse(s: &str) -> Result<Arch> {
        match s {
            "mlp-a" => Ok(Arch::MlpA),
            "cnn-a" => Ok(Arch::CnnA),
            "cnn-b" => Ok(Arch::CnnB),
            "cnn-c" => Ok(Arch::CnnC),
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }

    pub fn all() -> [Arch; 4] {
        [Arch::MlpA, Arch::CnnA, Arch::CnnB, Arch::CnnC]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    /// Per-example input shape [H, W, C].
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(arch: Arch, input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec {
            arch,
            input_shape,
            num_classes,
        }
    }

    pub fn layers(&self) -> Vec<LayerDef> {
        let k = self.num_classes;
        match self.arch {
            Arch::MlpA => vec![
                LayerDef::new("flatten", LayerKind::Flatten),
                LayerDef::new("fc1", LayerKind::Dense { out_dim: 64 }),
                LayerDef::new("relu1", LayerKind::Relu),
                LayerDef::new("fc2", LayerKind::Dense { out_dim: k }),
            ],
            Arch::CnnA => vec![
                LayerDef::new(
                    "conv1",
                    LayerKind::Conv2d {
                        kh: 3,
                        kw: 3,
                        out_ch: 8,
                        stride: 1,
                        padding: Padding::Valid,
                    },
                ),
                LayerDef::new("relu1", LayerKind::Relu),
                LayerDef::new("pool1", LayerKind::MaxPool2),
                LayerDef::new(
                    "conv2",
                    LayerKind::Conv2d {
                        kh: 3,
                        kw: 3,
                        out_ch: 16,
                        stride: 1,
                        padding: Padding::Valid,
                    },
                ),
                LayerDef::new("relu2", LayerKind::Relu),
                LayerDef::new("pool2", LayerKind::MaxPool2),
                LayerDef::new("flatten", LayerKind::Flatten),
                LayerDef::new("fc", LayerKind::Dense { out_dim: k }),
            ],
            Arch::CnnB => vec![
                LayerDef::new(
                    "conv1",
                    LayerKind::Conv2d {
                        kh: 5,
                        kw: 5,
                        out_ch: 12,
                        stride: 1,
                        padding: Padding::Same,
                    },
                ),
                LayerDef::new("relu1", LayerKind::Relu),
                LayerDef::new("pool1", LayerKind::MaxPool2),
                LayerDef::new(
                    "conv2",
                    LayerKind::Conv2d {
                        kh: 3,
                        kw: 3,
                        out_ch: 24,
                        stride: 1,
                        padding: Padding::Same,
                    },
                ),
                LayerDef::new("relu2", LayerKind::Relu),
                LayerDef::new("pool2", LayerKind::MaxPool2),
                LayerDef::new("flatten", LayerKind::Flatten),
                LayerDef::new("fc", LayerKind::Dense { out_dim: k }),
            ],
            Arch::CnnC => vec![
                LayerDef::new(
                    "conv1",
                    LayerKind::Conv2d {
                        kh: 3,
                        kw: 3,
                        out_ch: 8,
                        stride: 1,
                        padding: Padding::Valid,
                    },
                ),
                LayerDef::new("relu1", LayerKind::Relu),
                LayerDef::new(
                    "conv2",
                    LayerKind::Conv2d {
                        kh: 3,
                        kw: 3,
                        out_ch: 8,
                        stride: 1,
                        padding: Padding::Valid,
                    },
                ),
                LayerDef::new("relu2", LayerKind::Relu),
                LayerDef::new(
                    "conv3",
                    LayerKind::Conv2d {
                        kh: 3,
                        kw: 3,
                        out_ch: 16,
                        stride: 1,
                        padding: Padding::Valid,
                    },
                ),
                LayerDef::new("relu3", LayerKind::Relu),
                LayerDef::new("pool1", LayerKind::MaxPool2),
                LayerDef::new(
                    "conv4",
                    LayerKind::Conv2d {
                        kh: 3,
                        kw: 3,
                        out_ch: 16,
                        stride: 1,
                        padding: Padding::Valid,
                    },
                ),
                LayerDef::new("relu4", LayerKind::Relu),
                LayerDef::new("flatten", LayerKind::Flatten),
                LayerDef::new("fc", LayerKind::Dense { out_dim: k }),
            ],
        }
    }
}

/// Training provenance carried alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub clean_accuracy: f64,
    pub adversarially_trained: bool,
}

impl Default for TrainMeta {
    fn default() -> Self {
        TrainMeta {
            seed: 0,
            epochs: 0,
            clean_accuracy: 0.0,
            adversarially_trained: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Params,
    pub meta: TrainMeta,
}

impl Model {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let layers = self.spec.layers();
        Ok(nn::forward_trace(&layers, &self.params, x)?
            .logits()
            .clone())
    }

    /// Gradient of the mean cross-entropy loss with respect to the input.
    pub fn grad_input(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let layers = self.spec.layers();
        let trace = nn::forward_trace(&layers, &self.params, x)?;
        let d_logits = nn::loss_backward(trace.logits(), labels)?;
        Ok(nn::backward(&layers, &self.params, &trace, &d_logits)?.input)
    }

    /// Gradient of the mean cross-entropy loss with respect to every parameter.
    pub fn grad_params(&self, x: &Tensor, labels: &[usize]) -> Result<Vec<(String, Tensor)>> {
        let layers = self.spec.layers();
        let trace = nn::forward_trace(&layers, &self.params, x)?;
        let d_logits = nn::loss_backward(trace.logits(), labels)?;
        Ok(nn::backward(&layers, &self.params, &trace, &d_logits)?.params)
    }

    /// Argmax label and its softmax confidence, per example.
    /// Ties go to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<(usize, f64)>> {
        let logits = self.forward(x)?;
        Ok(predictions(&logits))
    }

    /// FNV-1a over parameter names and value bits; identifies the exact
    /// weights an adversarial batch was generated against.
    pub fn params_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (name, t) in &self.params.0 {
            for b in name.bytes() {
                eat(b);
            }
            for v in &t.values {
                for b in v.to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let mut correct = 0usize;
        for chunk in data.examples.chunks(256) {
            let (x, y) = Dataset::batch(chunk)?;
            for (pred, &label) in self.predict(&x)?.iter().zip(&y) {
                if pred.0 == label {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

pub fn predictions(logits: &Tensor) -> Vec<(usize, f64)> {
    (0..logits.batch_size())
        .map(|b| {
            let probs = nn::softmax(logits.example(b));
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            (best, probs[best])
        })
        .collect()
}

/// Initializes parameters from the seeded generator: uniform in
/// [-1/sqrt(fan_in), 1/sqrt(fan_in)].
pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let layers = spec.layers();
    let shapes = nn::param_shapes(&layers, &spec.input_shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(shapes.len());
    for (name, shape) in shapes {
        let fan_in = fan_in_for(&layers, &spec.input_shape, &name)?;
        let scale = 1.0 / (fan_in as f64).sqrt();
        let len: usize = shape.iter().product();
        let values: Vec<f64> = (0..len).map(|_| rng.gen_range(-scale..=scale)).collect();
        params.push((name, Tensor::new(shape, values)?));
    }
    Ok(Model {
        spec: spec.clone(),
        params: Params(params),
        meta: TrainMeta {
            seed,
            ..TrainMeta::default()
        },
    })
}

fn fan_in_for(layers: &[LayerDef], input_shape: &[usize], param_name: &str) -> Result<usize> {
    let layer_name = param_name.split('.').next().unwrap_or(param_name);
    let plans = nn::plan_shapes(layers, input_shape)?;
    for (layer, plan) in layers.iter().zip(&plans) {
        if layer.name == layer_name {
            return Ok(match &layer.kind {
                LayerKind::Dense { .. } => plan.in_shape[0],
                LayerKind::Conv2d { kh, kw, .. } => kh * kw * plan.in_shape[2],
                _ => 1,
            });
        }
    }
    Err(Error::Config(format!("no layer for parameter `{param_name}`")))
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// When set, each minibatch has floor(adv_fraction * batch) examples
    /// replaced by FGSM examples generated against the current parameters.
    pub adversarial: Option<AdvTrainOptions>,
}

#[derive(Debug, Clone, Copy)]
pub struct AdvTrainOptions {
    pub epsilon: f64,
    pub adv_fraction: f64,
}

/// Minibatch SGD on the mean cross-entropy loss. Deterministic given all
/// arguments. Returns the trained model and per-epoch accuracy on
/// `eval_set` (falling back to the training set).
pub fn train(
    model: &Model,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    opts: &TrainOptions,
) -> Result<(Model, Vec<f64>)> {
    if train_set.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    if opts.learning_rate <= 0.0 {
        return Err(Error::InvalidInput("learning_rate must be > 0".into()));
    }
    if let Some(adv) = &opts.adversarial {
        if !(0.0..=1.0).contains(&adv.adv_fraction) {
            return Err(Error::InvalidInput("adv_fraction must be in [0, 1]".into()));
        }
        if adv.epsilon < 0.0 {
            return Err(Error::InvalidInput("adversarial epsilon must be >= 0".into()));
        }
    }

    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut acc_log = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        shuffle(&mut order, &mut rng);
        for batch_idx in order.chunks(opts.batch_size) {
            let examples: Vec<_> = batch_idx.iter().map(|&i| train_set.examples[i].clone()).collect();
            let (mut x, y) = Dataset::batch(&examples)?;

            if let Some(adv) = &opts.adversarial {
                let n_adv = (adv.adv_fraction * examples.len() as f64).floor() as usize;
                if n_adv > 0 && adv.epsilon > 0.0 {
                    let cfg = AttackConfig {
                        epsilon: adv.epsilon,
                        ..AttackConfig::default()
                    };
                    let x_head = Tensor::stack(
                        &(0..n_adv).map(|b| x.slice_example(b)).collect::<Vec<_>>(),
                    )?;
                    let x_adv = attack::fgsm(&model, &x_head, &y[..n_adv], &cfg)?;
                    for b in 0..n_adv {
                        x.example_mut(b).copy_from_slice(x_adv.example(b));
                    }
                }
            }

            let logits = model.forward(&x)?;
            let (_, mean_loss) = nn::loss_cross_entropy(&logits, &y)?;
            if !mean_loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let grads = model.grad_params(&x, &y)?;
            for (name, g) in &grads {
                let p = model
                    .params
                    .get_mut(name)
                    .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
                for (pv, gv) in p.values.iter_mut().zip(&g.values) {
                    *pv -= opts.learning_rate * gv;
                }
            }
        }
        let acc = model.accuracy(eval_set.unwrap_or(train_set))?;
        acc_log.push(acc);
    }

    model.meta = TrainMeta {
        seed: opts.seed,
        epochs: opts.epochs,
        clean_accuracy: acc_log.last().copied().unwrap_or(0.0),
        adversarially_trained: opts.adversarial.map_or(false, |a| a.adv_fraction > 0.0 && a.epsilon > 0.0),
    };
    Ok((model, acc_log))
}

/// `train` with FGSM batch augmentation enabled.
pub fn adversarial_train(
    model: &Model,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    opts: &TrainOptions,
    adv: AdvTrainOptions,
) -> Result<(Model, Vec<f64>)> {
    let opts = TrainOptions {
        adversarial: Some(adv),
        ..opts.clone()
    };
    train(model, train_set, eval_set, &opts)
}

/// Writes the model to an ADVW container, metadata included.
pub fn save(model: &Model, path: &std::path::Path) -> Result<()> {
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("arch".to_string(), model.spec.arch.id().to_string());
    meta.insert("input_h".to_string(), model.spec.input_shape[0].to_string());
    meta.insert("input_w".to_string(), model.spec.input_shape[1].to_string());
    meta.insert("input_c".to_string(), model.spec.input_shape[2].to_string());
    meta.insert("num_classes".to_string(), model.spec.num_classes.to_string());
    meta.insert("seed".to_string(), model.meta.seed.to_string());
    meta.insert("epochs".to_string(), model.meta.epochs.to_string());
    meta.insert(
        "clean_accuracy".to_string(),
        format!("{:.6}", model.meta.clean_accuracy),
    );
    meta.insert(
        "adversarially_trained".to_string(),
        model.meta.adversarially_trained.to_string(),
    );
    let archive = crate::container::Archive {
        tensors: model.params.0.clone(),
        meta,
    };
    crate::container::save(&archive, path)
}

fn meta_parse<T: std::str::FromStr>(archive: &crate::container::Archive, key: &str) -> Result<T> {
    archive.meta_value(key)?.parse().map_err(|_| Error::Format {
        offset: 0,
        msg: format!("metadata key `{key}` is malformed"),
    })
}

pub fn load(path: &std::path::Path) -> Result<Model> {
    let archive = crate::container::load(path)?;
    let arch = Arch::parse(archive.meta_value("arch")?)?;
    let spec = ModelSpec::new(
        arch,
        [
            meta_parse(&archive, "input_h")?,
            meta_parse(&archive, "input_w")?,
            meta_parse(&archive, "input_c")?,
        ],
        meta_parse(&archive, "num_classes")?,
    );
    let expected = nn::param_shapes(&spec.layers(), &spec.input_shape)?;
    if expected.len() != archive.tensors.len() {
        return Err(Error::Format {
            offset: 0,
            msg: format!(
                "expected {} parameter tensors for {}, found {}",
                expected.len(),
                arch.id(),
                archive.tensors.len()
            ),
        });
    }
    for ((name, shape), (got_name, got)) in expected.iter().zip(&archive.tensors) {
        if name != got_name || shape != &got.shape {
            return Err(Error::Format {
                offset: 0,
                msg: format!(
                    "parameter `{got_name}` {:?} does not match catalog entry `{name}` {:?}",
                    got.shape, shape
                ),
            });
        }
        if !got.all_finite() {
            return Err(Error::Format {
                offset: 0,
                msg: format!("parameter `{got_name}` has non-finite values"),
            });
        }
    }
    let meta = TrainMeta {
        seed: meta_parse(&archive, "seed")?,
        epochs: meta_parse(&archive, "epochs")?,
        clean_accuracy: meta_parse(&archive, "clean_accuracy")?,
        adversarially_trained: meta_parse(&archive, "adversarially_trained")?,
    };
    Ok(Model {
        spec,
        params: Params(archive.tensors),
        meta,
    })
}

/// Fisher-Yates driven by the caller's ChaCha8 stream.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
