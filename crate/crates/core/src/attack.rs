//! Gradient-based L-infinity attacks: FGSM, I-FGSM, PGD, MI-FGSM, NI-FGSM,
//! and the Adam-based iterative method (AI-FGM), plus ensemble logit fusion.
//!
//! All attacks operate on batched inputs but every norm (L1 gradient
//! normalization, L2 of the Adam direction) is taken per example over that
//! example's pixels, so attacking a batch gives the same result as
//! attacking each example alone.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn;
use crate::tensor::{sign, Tensor};

/// Anything that exposes logits and the input-gradient of its
/// cross-entropy loss. Attacks accept a fused ensemble wherever they
/// accept a single model.
pub trait GradSource {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
    fn loss_grad(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor>;
}

impl GradSource for Model {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }

    /// Per-example loss gradient (no 1/batch factor), so each example's
    /// slab is independent of how many others share the batch.
    fn loss_grad(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let layers = self.spec.layers();
        let trace = nn::forward_trace(&layers, &self.params, x)?;
        let d_logits = nn::loss_backward_per_example(trace.logits(), labels)?;
        Ok(nn::backward(&layers, &self.params, &trace, &d_logits)?.input)
    }
}

/// Weighted logit fusion over K member models.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<Model>,
    pub weights: Vec<f64>,
}

impl Ensemble {
    pub fn new(members: Vec<Model>, weights: Vec<f64>) -> Result<Self> {
        if members.is_empty() || members.len() != weights.len() {
            return Err(Error::Config(format!(
                "ensemble needs matching member/weight counts, got {}/{}",
                members.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("ensemble weights must be nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "ensemble weights must sum to 1, got {sum}"
            )));
        }
        let first = &members[0].spec;
        for m in &members[1..] {
            if m.spec.input_shape != first.input_shape || m.spec.num_classes != first.num_classes {
                return Err(Error::Config(
                    "ensemble members must share input shape and class count".into(),
                ));
            }
        }
        Ok(Ensemble { members, weights })
    }

    pub fn equal_weights(members: Vec<Model>) -> Result<Self> {
        let k = members.len();
        Ensemble::new(members, vec![1.0 / k as f64; k])
    }

    /// l(x) = sum_k w_k * l_k(x).
    pub fn fuse_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut fused: Option<Tensor> = None;
        for (m, &w) in self.members.iter().zip(&self.weights) {
            let l = m.forward(x)?;
            match &mut fused {
                None => fused = Some(l.map(|v| v * w)),
                Some(acc) => {
                    for (a, &v) in acc.values.iter_mut().zip(&l.values) {
                        *a += w * v;
                    }
                }
            }
        }
        Ok(fused.expect("ensemble has members"))
    }
}

impl GradSource for Ensemble {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.fuse_logits(x)
    }

    /// Gradient of the cross-entropy of the fused logits: the loss seed is
    /// computed on l(x) and each member backpropagates its weighted share.
    fn loss_grad(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let fused = self.fuse_logits(x)?;
        let d_logits = nn::loss_backward_per_example(&fused, labels)?;
        let mut total: Option<Tensor> = None;
        for (m, &w) in self.members.iter().zip(&self.weights) {
            let layers = m.spec.layers();
            let trace = nn::forward_trace(&layers, &m.params, x)?;
            let scaled = d_logits.map(|v| v * w);
            let dx = nn::backward(&layers, &m.params, &trace, &scaled)?.input;
            match &mut total {
                None => total = Some(dx),
                Some(acc) => {
                    for (a, &v) in acc.values.iter_mut().zip(&dx.values) {
                        *a += v;
                    }
                }
            }
        }
        Ok(total.expect("ensemble has members"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    /// L-infinity budget in pixel units.
    pub epsilon: f64,
    pub iterations: usize,
    /// Momentum decay mu for MI/NI-FGSM.
    pub momentum_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Stability term added to sqrt(v) in the Adam direction.
    pub delta: f64,
    /// PGD: start from a uniform random point in the epsilon ball.
    pub random_init: bool,
    pub pixel_bounds: (f64, f64),
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 0.3,
            iterations: 10,
            momentum_decay: 1.0,
            beta1: 0.99,
            beta2: 0.999,
            delta: 1e-8,
            random_init: false,
            pixel_bounds: (0.0, 1.0),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.pixel_bounds;
        if !(lo < hi) {
            return Err(Error::Config("pixel_bounds must satisfy low < high".into()));
        }
        if self.epsilon < 0.0 || self.epsilon > hi - lo {
            return Err(Error::Config(format!(
                "epsilon must be in [0, {}], got {}",
                hi - lo,
                self.epsilon
            )));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::Config("beta1 and beta2 must be in (0, 1)".into()));
        }
        if self.delta <= 0.0 {
            return Err(Error::Config("delta must be > 0".into()));
        }
        if self.momentum_decay < 0.0 {
            return Err(Error::Config("momentum_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Projects onto the epsilon ball around `x`, then onto the pixel range.
/// Total function: elementwise min(max(x_adv, x - eps, low), x + eps, high).
pub fn clip_to_ball(x_adv: &Tensor, x: &Tensor, epsilon: f64, pixel_bounds: (f64, f64)) -> Tensor {
    let (lo, hi) = pixel_bounds;
    let mut out = x_adv.clone();
    for (o, &orig) in out.values.iter_mut().zip(&x.values) {
        *o = o.max(orig - epsilon).min(orig + epsilon).max(lo).min(hi);
    }
    out
}

fn clip_in_place(x_adv: &mut Tensor, x: &Tensor, epsilon: f64, pixel_bounds: (f64, f64)) {
    let (lo, hi) = pixel_bounds;
    for (o, &orig) in x_adv.values.iter_mut().zip(&x.values) {
        *o = o.max(orig - epsilon).min(orig + epsilon).max(lo).min(hi);
    }
}

/// Single-step sign attack: x* = clip(x + eps * sign(grad)).
pub fn fgsm(source: &dyn GradSource, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    let grad = source.loss_grad(x, y)?;
    let mut adv = x.clone();
    for (a, &g) in adv.values.iter_mut().zip(&grad.values) {
        *a += cfg.epsilon * sign(g);
    }
    clip_in_place(&mut adv, x, cfg.epsilon, cfg.pixel_bounds);
    Ok(adv)
}

/// Iterates of the basic iterative attack (step size eps/T), including the
/// starting point override used by PGD.
fn sign_step_iterates(
    source: &dyn GradSource,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    start: Option<Tensor>,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let step = cfg.epsilon / cfg.iterations as f64;
    let mut adv = start.unwrap_or_else(|| x.clone());
    let mut iterates = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let grad = source.loss_grad(&adv, y)?;
        for (a, &g) in adv.values.iter_mut().zip(&grad.values) {
            *a += step * sign(g);
        }
        clip_in_place(&mut adv, x, cfg.epsilon, cfg.pixel_bounds);
        iterates.push(adv.clone());
    }
    Ok(iterates)
}

pub fn i_fgsm_iterates(
    source: &dyn GradSource,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<Tensor>> {
    sign_step_iterates(source, x, y, cfg, None)
}

pub fn i_fgsm(source: &dyn GradSource, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    Ok(i_fgsm_iterates(source, x, y, cfg)?.pop().expect("T >= 1"))
}

/// I-FGSM from a uniform random start inside the epsilon ball.
pub fn pgd(
    source: &dyn GradSource,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut start = x.clone();
    for v in start.values.iter_mut() {
        // gen_range panics on an empty range, so guard eps = 0
        let noise = if cfg.epsilon > 0.0 {
            rng.gen_range(-cfg.epsilon..=cfg.epsilon)
        } else {
            0.0
        };
        *v += noise;
    }
    clip_in_place(&mut start, x, cfg.epsilon, cfg.pixel_bounds);
    Ok(sign_step_iterates(source, x, y, cfg, Some(start))?
        .pop()
        .expect("T >= 1"))
}

/// Normalizes each example's gradient slab by its own L1 norm.
/// A zero gradient has no direction, so its normalized term is zero.
fn l1_normalize_per_example(grad: &Tensor) -> Tensor {
    let mut out = grad.clone();
    let n = out.example_len();
    for b in 0..out.batch_size() {
        let slab = &mut out.values[b * n..(b + 1) * n];
        let l1: f64 = slab.iter().map(|v| v.abs()).sum();
        if l1 > 0.0 {
            for v in slab.iter_mut() {
                *v /= l1;
            }
        } else {
            slab.fill(0.0);
        }
    }
    out
}

pub fn mi_fgsm_iterates(
    source: &dyn GradSource,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let step = cfg.epsilon / cfg.iterations as f64;
    let mut adv = x.clone();
    let mut momentum = Tensor::zeros(x.shape.clone());
    let mut iterates = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let grad = source.loss_grad(&adv, y)?;
        let normed = l1_normalize_per_example(&grad);
        for (m, &g) in momentum.values.iter_mut().zip(&normed.values) {
            *m = cfg.momentum_decay * *m + g;
        }
        for (a, &m) in adv.values.iter_mut().zip(&momentum.values) {
            *a += step * sign(m);
        }
        clip_in_place(&mut adv, x, cfg.epsilon, cfg.pixel_bounds);
        iterates.push(adv.clone());
    }
    Ok(iterates)
}

pub fn mi_fgsm(source: &dyn GradSource, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    Ok(mi_fgsm_iterates(source, x, y, cfg)?.pop().expect("T >= 1"))
}

/// MI-FGSM with the gradient evaluated at the lookahead point
/// x + (eps/T) * mu * g before accumulation.
pub fn ni_fgsm_iterates(
    source: &dyn GradSource,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let step = cfg.epsilon / cfg.iterations as f64;
    let mut adv = x.clone();
    let mut momentum = Tensor::zeros(x.shape.clone());
    let mut iterates = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let mut lookahead = adv.clone();
        for (l, &m) in lookahead.values.iter_mut().zip(&momentum.values) {
            *l += step * cfg.momentum_decay * m;
        }
        let grad = source.loss_grad(&lookahead, y)?;
        let normed = l1_normalize_per_example(&grad);
        for (m, &g) in momentum.values.iter_mut().zip(&normed.values) {
            *m = cfg.momentum_decay * *m + g;
        }
        for (a, &m) in adv.values.iter_mut().zip(&momentum.values) {
            *a += step * sign(m);
        }
        clip_in_place(&mut adv, x, cfg.epsilon, cfg.pixel_bounds);
        iterates.push(adv.clone());
    }
    Ok(iterates)
}

pub fn ni_fgsm(source: &dyn GradSource, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    Ok(ni_fgsm_iterates(source, x, y, cfg)?.pop().expect("T >= 1"))
}

/// Exponentially decaying step sizes that sum to the total L2 budget:
/// alpha_t = alpha * w_t / sum(w), with w_t = sqrt(1 - beta2^(t+1)) / (1 - beta1^(t+1)).
pub fn step_schedule(iterations: usize, beta1: f64, beta2: f64, alpha: f64) -> Vec<f64> {
    let weights: Vec<f64> = (0..iterations)
        .map(|t| {
            let e = (t + 1) as f64;
            (1.0 - beta2.powf(e)).sqrt() / (1.0 - beta1.powf(e))
        })
        .collect();
    let total: f64 = weights.iter().sum();
    // alpha * (w / total): keeps the T = 1 schedule exactly [alpha]
    weights.iter().map(|w| alpha * (w / total)).collect()
}

/// Per-example Adam state for the iterative Adam attack.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: usize,
    /// Total L2 budget: epsilon * sqrt(N) with N the per-example pixel count.
    pub alpha: f64,
    pub schedule: Vec<f64>,
}

impl AdamState {
    pub fn new(example_shape: &[usize], cfg: &AttackConfig) -> Self {
        let n: usize = example_shape.iter().product();
        let alpha = cfg.epsilon * (n as f64).sqrt();
        AdamState {
            m: Tensor::zeros(example_shape.to_vec()),
            v: Tensor::zeros(example_shape.to_vec()),
            step: 0,
            alpha,
            schedule: step_schedule(cfg.iterations, cfg.beta1, cfg.beta2, alpha),
        }
    }
}

/// The Adam iterative attack: L1-normalized gradient feeds first and second
/// momenta, the update direction m / (delta + sqrt(v)) is applied with its
/// own per-example L2 normalization and a decaying step schedule whose sum
/// is the total L2 budget eps * sqrt(N), then the iterate is clipped back
/// into the L-infinity ball.
pub fn ai_fgm_iterates(
    source: &dyn GradSource,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let batch = x.batch_size();
    let n = x.example_len();
    let alpha = cfg.epsilon * (n as f64).sqrt();
    let schedule = step_schedule(cfg.iterations, cfg.beta1, cfg.beta2, alpha);

    let mut adv = x.clone();
    let mut m = vec![0.0; batch * n];
    let mut v = vec![0.0; batch * n];
    let mut iterates = Vec::with_capacity(cfg.iterations);

    for &alpha_t in &schedule {
        let grad = source.loss_grad(&adv, y)?;
        let g = l1_normalize_per_example(&grad);
        for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(&g.values) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * (gi * gi);
        }
        for b in 0..batch {
            let range = b * n..(b + 1) * n;
            let s: Vec<f64> = m[range.clone()]
                .iter()
                .zip(&v[range.clone()])
                .map(|(&mi, &vi)| mi / (cfg.delta + vi.sqrt()))
                .collect();
            let s_l2 = s.iter().map(|si| si * si).sum::<f64>().sqrt();
            if s_l2 > 0.0 {
                for (a, &si) in adv.values[range].iter_mut().zip(&s) {
                    // alpha_t * (unit direction): at N = 1 the step is exactly alpha_t
                    *a += alpha_t * (si / s_l2);
                }
            }
            // zero direction: no information, no step; the clip still applies
        }
        clip_in_place(&mut adv, x, cfg.epsilon, cfg.pixel_bounds);
        iterates.push(adv.clone());
    }
    Ok(iterates)
}

pub fn ai_fgm(source: &dyn GradSource, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    Ok(ai_fgm_iterates(source, x, y, cfg)?.pop().expect("T >= 1"))
}

/// A persisted batch of adversarial examples alongside the clean originals.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvBatch {
    pub images: Tensor,
    pub originals: Tensor,
    pub labels: Vec<usize>,
    pub meta: std::collections::BTreeMap<String, String>,
}

impl AdvBatch {
    /// Standard metadata for a batch: attack name, config fields, the
    /// source model's parameter hash, and the seed.
    pub fn describe(
        method: AttackMethod,
        cfg: &AttackConfig,
        source_hash: u64,
        seed: u64,
    ) -> std::collections::BTreeMap<String, String> {
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("attack".into(), method.id().to_string());
        meta.insert("epsilon".into(), cfg.epsilon.to_string());
        meta.insert("iterations".into(), cfg.iterations.to_string());
        meta.insert("mu".into(), cfg.momentum_decay.to_string());
        meta.insert("beta1".into(), cfg.beta1.to_string());
        meta.insert("beta2".into(), cfg.beta2.to_string());
        meta.insert("delta".into(), cfg.delta.to_string());
        meta.insert("random_init".into(), cfg.random_init.to_string());
        meta.insert(
            "pixel_bounds".into(),
            format!("{},{}", cfg.pixel_bounds.0, cfg.pixel_bounds.1),
        );
        meta.insert("source_hash".into(), format!("{source_hash:016x}"));
        meta.insert("seed".into(), seed.to_string());
        meta
    }
}

/// Writes an adversarial batch to the ADVW container with tensors
/// "images", "labels" and "originals".
pub fn save_batch(batch: &AdvBatch, path: &std::path::Path) -> Result<()> {
    let labels = Tensor::new(
        vec![batch.labels.len()],
        batch.labels.iter().map(|&l| l as f64).collect(),
    )?;
    let archive = crate::container::Archive {
        tensors: vec![
            ("images".into(), batch.images.clone()),
            ("labels".into(), labels),
            ("originals".into(), batch.originals.clone()),
        ],
        meta: batch.meta.clone(),
    };
    crate::container::save(&archive, path)
}

pub fn load_batch(path: &std::path::Path) -> Result<AdvBatch> {
    let archive = crate::container::load(path)?;
    let missing = |name: &str| Error::Format {
        offset: 0,
        msg: format!("adversarial batch is missing tensor `{name}`"),
    };
    let images = archive.tensor("images").ok_or_else(|| missing("images"))?.clone();
    let originals = archive
        .tensor("originals")
        .ok_or_else(|| missing("originals"))?
        .clone();
    let labels = archive
        .tensor("labels")
        .ok_or_else(|| missing("labels"))?
        .values
        .iter()
        .map(|&v| v as usize)
        .collect();
    Ok(AdvBatch {
        images,
        originals,
        labels,
        meta: archive.meta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackMethod {
    Fgsm,
    IFgsm,
    Pgd,
    MiFgsm,
    NiFgsm,
    AiFgm,
}

impl AttackMethod {
    pub fn id(&self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::IFgsm => "i-fgsm",
            AttackMethod::Pgd => "pgd",
            AttackMethod::MiFgsm => "mi-fgsm",
            AttackMethod::NiFgsm => "ni-fgsm",
            AttackMethod::AiFgm => "ai-fgm",
        }
    }

    pub fn parse(s: &str) -> Result<AttackMethod> {
        match s {
            "fgsm" => Ok(AttackMethod::Fgsm),
            "i-fgsm" => Ok(AttackMethod::IFgsm),
            "pgd" => Ok(AttackMethod::Pgd),
            "mi-fgsm" => Ok(AttackMethod::MiFgsm),
            "ni-fgsm" => Ok(AttackMethod::NiFgsm),
            "ai-fgm" => Ok(AttackMethod::AiFgm),
            other => Err(Error::Config(format!("unknown attack method `{other}`"))),
        }
    }

    pub fn all() -> [AttackMethod; 6] {
        [
            AttackMethod::Fgsm,
            AttackMethod::IFgsm,
            AttackMethod::Pgd,
            AttackMethod::MiFgsm,
            AttackMethod::NiFgsm,
            AttackMethod::AiFgm,
        ]
    }

    pub fn iterative() -> [AttackMethod; 5] {
        [
            AttackMethod::IFgsm,
            AttackMethod::Pgd,
            AttackMethod::MiFgsm,
            AttackMethod::NiFgsm,
            AttackMethod::AiFgm,
        ]
    }

    /// Runs the attack. `seed` only matters for PGD's random start.
    pub fn run(
        &self,
        source: &dyn GradSource,
        x: &Tensor,
        y: &[usize],
        cfg: &AttackConfig,
        seed: u64,
    ) -> Result<Tensor> {
        match self {
            AttackMethod::Fgsm => fgsm(source, x, y, cfg),
            AttackMethod::IFgsm => i_fgsm(source, x, y, cfg),
            AttackMethod::Pgd => pgd(source, x, y, cfg, seed),
            AttackMethod::MiFgsm => mi_fgsm(source, x, y, cfg),
            AttackMethod::NiFgsm => ni_fgsm(source, x, y, cfg),
            AttackMethod::AiFgm => ai_fgm(source, x, y, cfg),
        }
    }
}
