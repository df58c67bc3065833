//! `advbench`: train models, craft adversarial examples, and run the
//! evaluation matrices and parameter sweeps from the command line.
//!
//! Configuration is explicit-only: flags, or a flat `key=value` config file
//! (`--config`), with flags taking precedence. Environment variables are
//! never consulted. Every run echoes the fully resolved configuration and is
//! deterministic: the same command produces bit-identical artifacts.
//!
//! One top-level `--seed` fans out to per-purpose seeds by fixed offsets:
//! training uses `seed`, candidate selection `seed + 1`, attack randomness
//! (PGD starts) `seed + 2`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use advbench_core::attack::{save_batch, AdvBatch};
use advbench_core::data::{self, select_candidates};
use advbench_core::digits::{self, SynthConfig};
use advbench_core::eval::{self, run_matrix};
use advbench_core::model::{self, AdvTrainOptions, TrainOptions};
use advbench_core::{
    Arch, AttackConfig, AttackMethod, Dataset, Ensemble, Error, EvalReport, Model, ModelSpec,
    ReportFormat, Result,
};

const SEED_CANDIDATES: u64 = 1;
const SEED_ATTACK: u64 = 2;

#[derive(Parser)]
#[command(name = "advbench", version, about = "Adversarial-attack benchmark driver")]
struct Cli {
    /// Flat key=value config file; command-line flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker cap for matrix/sweep cells. Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural digit dataset in MNIST IDX layout.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        train_n: Option<usize>,
        #[arg(long)]
        test_n: Option<usize>,
        /// Square image side length in pixels.
        #[arg(long)]
        size: Option<usize>,
        /// Additive pixel noise amplitude.
        #[arg(long)]
        noise: Option<f64>,
        /// Geometric variability of the rendered strokes.
        #[arg(long)]
        jitter: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and save it as an ADVW weight file.
    Train {
        #[arg(long)]
        arch: Option<String>,
        /// Directory holding the four IDX files.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Mix FGSM examples into each training minibatch.
        #[arg(long)]
        adversarial: bool,
        #[arg(long)]
        adv_eps: Option<f64>,
        #[arg(long)]
        adv_frac: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Craft adversarial examples and save them as an ADVW batch.
    Attack {
        #[arg(long)]
        method: Option<String>,
        /// Source model(s); more than one forms a logit-fused ensemble.
        #[arg(long)]
        source: Vec<PathBuf>,
        /// Comma-separated ensemble weights (default: equal).
        #[arg(long)]
        ensemble_weights: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of candidate examples to attack.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        beta1: Option<f64>,
        #[arg(long)]
        beta2: Option<f64>,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        /// PGD: start from a random point in the epsilon ball.
        #[arg(long)]
        random_init: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a saved adversarial batch against target models.
    Eval {
        /// Saved adversarial batch (output of `attack`).
        #[arg(long)]
        batch: Option<PathBuf>,
        #[arg(long)]
        target: Vec<PathBuf>,
        /// Report format: csv or json.
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full (attack, source, target) success-rate matrix.
    Matrix {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        source: Vec<PathBuf>,
        #[arg(long)]
        target: Vec<PathBuf>,
        /// Comma-separated method names (default: all six).
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        beta1: Option<f64>,
        #[arg(long)]
        beta2: Option<f64>,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter sweeps: beta grid, iteration counts, or epsilon range.
    Sweep {
        /// One of: beta, iterations, epsilon.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Vec<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        /// Comma-separated sweep values; meaning depends on --kind.
        #[arg(long)]
        values: Option<String>,
        /// Second axis for --kind beta (beta2 values).
        #[arg(long)]
        values2: Option<String>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Resolves each parameter as flag > config-file entry > default, recording
/// every resolved value so the full configuration can be echoed.
struct Resolver {
    file: BTreeMap<String, String>,
    echo: Vec<(String, String)>,
}

impl Resolver {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut file = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!(
                        "{}:{}: expected key=value, got `{line}`",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                file.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Resolver {
            file,
            echo: Vec::new(),
        })
    }

    fn parse_entry<T: FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.parse()
            .map_err(|_| Error::Config(format!("config key `{key}`: cannot parse `{raw}`")))
    }

    fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => self.parse_entry(key, raw)?,
                None => default,
            },
        };
        self.echo.push((key.to_string(), value.to_string()));
        Ok(value)
    }

    fn require_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => PathBuf::from(raw),
                None => return Err(Error::Config(format!("missing required option `--{key}`"))),
            },
        };
        self.echo.push((key.to_string(), value.display().to_string()));
        Ok(value)
    }

    /// Repeatable flags fall back to a comma-separated config entry.
    fn require_paths(&mut self, key: &str, flags: Vec<PathBuf>) -> Result<Vec<PathBuf>> {
        let values: Vec<PathBuf> = if flags.is_empty() {
            match self.file.get(key) {
                Some(raw) => raw.split(',').map(|s| PathBuf::from(s.trim())).collect(),
                None => Vec::new(),
            }
        } else {
            flags
        };
        if values.is_empty() {
            return Err(Error::Config(format!("missing required option `--{key}`")));
        }
        self.echo.push((
            key.to_string(),
            values
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(","),
        ));
        Ok(values)
    }

    fn get_str(&mut self, key: &str, flag: Option<String>, default: &str) -> Result<String> {
        self.get(key, flag, default.to_string())
    }

    fn print_echo(&self, command: &str) {
        println!("resolved configuration ({command}):");
        for (k, v) in &self.echo {
            println!("  {k} = {v}");
        }
    }
}

fn parse_f64_list(key: &str, raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`--{key}`: cannot parse `{s}` as a number")))
        })
        .collect()
}

fn parse_methods(raw: &str) -> Result<Vec<AttackMethod>> {
    raw.split(',').map(|s| AttackMethod::parse(s.trim())).collect()
}

fn parse_format(raw: &str) -> Result<ReportFormat> {
    match raw {
        "csv" => Ok(ReportFormat::Csv),
        "json" => Ok(ReportFormat::Json),
        other => Err(Error::Config(format!(
            "unknown report format `{other}` (expected csv or json)"
        ))),
    }
}

fn model_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<(String, Model)>> {
    paths
        .iter()
        .map(|p| Ok((model_id(p), model::load(p)?)))
        .collect()
}

fn validate_jobs(jobs: Option<usize>) -> Result<()> {
    if let Some(0) = jobs {
        return Err(Error::Config("--jobs must be >= 1".into()));
    }
    Ok(())
}

fn report_metadata(report: &mut EvalReport, candidates: &Dataset, seed: u64) {
    let meta = &mut report.metadata;
    meta.insert("dataset_hash".into(), format!("{:016x}", candidates.content_hash()));
    meta.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    meta.insert("seed".into(), seed.to_string());
    meta.insert("n_candidates".into(), candidates.len().to_string());
}

fn cmd_gen_data(r: &mut Resolver, args: GenDataArgs) -> Result<()> {
    let out = r.require_path("out", args.out)?;
    let train_n = r.get("train-n", args.train_n, 3000)?;
    let test_n = r.get("test-n", args.test_n, 1000)?;
    let size = r.get("size", args.size, 14)?;
    let noise = r.get("noise", args.noise, 0.25)?;
    let jitter = r.get("jitter", args.jitter, 1.3)?;
    let seed = r.get("seed", args.seed, 0)?;
    r.print_echo("gen-data");

    std::fs::create_dir_all(&out)?;
    let base = SynthConfig {
        size,
        noise,
        jitter,
        seed,
    };
    let train = digits::generate(train_n, &base);
    // disjoint stream for the test split, derived from the same seed
    let test = digits::generate(test_n, &SynthConfig { seed: seed.wrapping_add(1), ..base });
    data::write_idx(
        &train,
        &out.join("train-images-idx3-ubyte"),
        &out.join("train-labels-idx1-ubyte"),
    )?;
    data::write_idx(
        &test,
        &out.join("t10k-images-idx3-ubyte"),
        &out.join("t10k-labels-idx1-ubyte"),
    )?;
    println!(
        "wrote {train_n} train / {test_n} test examples ({size}x{size}) to {}",
        out.display()
    );
    Ok(())
}

struct GenDataArgs {
    out: Option<PathBuf>,
    train_n: Option<usize>,
    test_n: Option<usize>,
    size: Option<usize>,
    noise: Option<f64>,
    jitter: Option<f64>,
    seed: Option<u64>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    r: &mut Resolver,
    arch: Option<String>,
    data_dir: Option<PathBuf>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch: Option<usize>,
    seed: Option<u64>,
    adversarial: bool,
    adv_eps: Option<f64>,
    adv_frac: Option<f64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let arch = Arch::parse(&r.get_str("arch", arch, "cnn-a")?)?;
    let data_dir = r.require_path("data", data_dir)?;
    let epochs = r.get("epochs", epochs, 5)?;
    let lr = r.get("lr", lr, 0.05)?;
    let batch = r.get("batch", batch, 64)?;
    let seed = r.get("seed", seed, 1)?;
    let adversarial = r.get("adversarial", adversarial.then_some(true), false)?;
    let adv_eps = r.get("adv-eps", adv_eps, 0.3)?;
    let adv_frac = r.get("adv-frac", adv_frac, 0.5)?;
    let out = r.require_path("out", out)?;
    r.print_echo("train");

    let (train_set, test_set) = data::load_mnist_dir(&data_dir)?;
    let shape = train_set
        .image_shape()
        .ok_or_else(|| Error::InvalidInput("training dataset is empty".into()))?;
    let spec = ModelSpec::new(arch, [shape[0], shape[1], shape[2]], 10);
    let opts = TrainOptions {
        epochs,
        learning_rate: lr,
        batch_size: batch,
        seed,
        adversarial: adversarial.then_some(AdvTrainOptions {
            epsilon: adv_eps,
            adv_fraction: adv_frac,
        }),
    };
    let (trained, acc_log) = model::train(&model::build(&spec, seed)?, &train_set, Some(&test_set), &opts)?;
    for (epoch, acc) in acc_log.iter().enumerate() {
        println!("epoch {:>2}: test accuracy {acc:.4}", epoch + 1);
    }
    model::save(&trained, &out)?;
    println!(
        "saved {} model to {} (params hash {:016x})",
        arch.id(),
        out.display(),
        trained.params_hash()
    );
    Ok(())
}

struct AttackArgs {
    method: Option<String>,
    source: Vec<PathBuf>,
    ensemble_weights: Option<String>,
    data: Option<PathBuf>,
    n: Option<usize>,
    eps: Option<f64>,
    iters: Option<usize>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    mu: Option<f64>,
    delta: Option<f64>,
    random_init: bool,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

fn resolve_attack_cfg(
    r: &mut Resolver,
    eps: Option<f64>,
    iters: Option<usize>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    mu: Option<f64>,
    delta: Option<f64>,
    random_init: Option<bool>,
) -> Result<AttackConfig> {
    let d = AttackConfig::default();
    let cfg = AttackConfig {
        epsilon: r.get("eps", eps, d.epsilon)?,
        iterations: r.get("iters", iters, d.iterations)?,
        beta1: r.get("beta1", beta1, d.beta1)?,
        beta2: r.get("beta2", beta2, d.beta2)?,
        momentum_decay: r.get("mu", mu, d.momentum_decay)?,
        delta: r.get("delta", delta, d.delta)?,
        random_init: r.get("random-init", random_init, d.random_init)?,
        pixel_bounds: d.pixel_bounds,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_attack(r: &mut Resolver, args: AttackArgs) -> Result<()> {
    let method = AttackMethod::parse(&r.get_str("method", args.method, "ai-fgm")?)?;
    let sources = r.require_paths("source", args.source)?;
    let weights_raw = r.get_str("ensemble-weights", args.ensemble_weights, "")?;
    let data_dir = r.require_path("data", args.data)?;
    let n = r.get("n", args.n, 1000)?;
    let cfg = resolve_attack_cfg(
        r,
        args.eps,
        args.iters,
        args.beta1,
        args.beta2,
        args.mu,
        args.delta,
        args.random_init.then_some(true),
    )?;
    let seed = r.get("seed", args.seed, 7)?;
    let out = r.require_path("out", args.out)?;
    r.print_echo("attack");

    let models = load_models(&sources)?;
    let (_, test_set) = data::load_mnist_dir(&data_dir)?;
    let refs: Vec<&Model> = models.iter().map(|(_, m)| m).collect();
    let candidates = select_candidates(&refs, &test_set, n, seed.wrapping_add(SEED_CANDIDATES))?;

    let (source_id, source_hash, adv, labels): (String, u64, _, _) = if models.len() == 1 {
        let (id, m) = &models[0];
        let (adv, labels) = eval::craft(method, m, &candidates, &cfg, seed.wrapping_add(SEED_ATTACK))?;
        (id.clone(), m.params_hash(), adv, labels)
    } else {
        let members: Vec<Model> = models.iter().map(|(_, m)| m.clone()).collect();
        let ensemble = if weights_raw.is_empty() {
            Ensemble::equal_weights(members)?
        } else {
            Ensemble::new(members, parse_f64_list("ensemble-weights", &weights_raw)?)?
        };
        let id = format!(
            "ensemble({})",
            models.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>().join("+")
        );
        let hash = models
            .iter()
            .fold(0u64, |acc, (_, m)| acc ^ m.params_hash());
        let (adv, labels) =
            eval::craft(method, &ensemble, &candidates, &cfg, seed.wrapping_add(SEED_ATTACK))?;
        (id, hash, adv, labels)
    };

    let (originals, _) = Dataset::batch(&candidates.examples)?;
    let mut meta = AdvBatch::describe(method, &cfg, source_hash, seed);
    meta.insert("source".into(), source_id.clone());
    meta.insert("dataset_hash".into(), format!("{:016x}", candidates.content_hash()));
    let batch = AdvBatch {
        images: adv,
        originals,
        labels,
        meta,
    };
    save_batch(&batch, &out)?;
    println!(
        "saved {} adversarial examples from {source_id} to {}",
        batch.labels.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    r: &mut Resolver,
    batch: Option<PathBuf>,
    targets: Vec<PathBuf>,
    format: Option<String>,
    out: Option<PathBuf>,
) -> Result<()> {
    let batch_path = r.require_path("batch", batch)?;
    let target_paths = r.require_paths("target", targets)?;
    let format = parse_format(&r.get_str("format", format, "csv")?)?;
    let out = r.require_path("out", out)?;
    r.print_echo("eval");

    let batch = advbench_core::attack::load_batch(&batch_path)?;
    let targets = load_models(&target_paths)?;
    let meta_f64 = |key: &str, default: f64| -> f64 {
        batch.meta.get(key).and_then(|v| v.parse().ok()).unwrap_or(default)
    };
    let d = AttackConfig::default();
    let mut report = EvalReport::default();
    for (k, v) in &batch.meta {
        report.metadata.insert(format!("batch_{k}"), v.clone());
    }
    report.metadata.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    for (id, target) in &targets {
        let rate = eval::success_rate(target, &batch.images, &batch.labels)?;
        report.rows.push(advbench_core::eval::ReportRow {
            attack: batch.meta.get("attack").cloned().unwrap_or_else(|| "unknown".into()),
            source_model: batch.meta.get("source").cloned().unwrap_or_else(|| "unknown".into()),
            target_model: id.clone(),
            epsilon: meta_f64("epsilon", d.epsilon),
            iterations: meta_f64("iterations", d.iterations as f64) as usize,
            beta1: meta_f64("beta1", d.beta1),
            beta2: meta_f64("beta2", d.beta2),
            mu: meta_f64("mu", d.momentum_decay),
            seed: meta_f64("seed", 0.0) as u64,
            n_examples: batch.labels.len(),
            success_rate: rate,
        });
    }
    eval::emit_report(&report, format, &out)?;
    for row in &report.rows {
        println!("{} -> {}: success rate {:.4}", row.source_model, row.target_model, row.success_rate);
    }
    println!("wrote report to {}", out.display());
    Ok(())
}

struct MatrixArgs {
    data: Option<PathBuf>,
    source: Vec<PathBuf>,
    target: Vec<PathBuf>,
    methods: Option<String>,
    n: Option<usize>,
    eps: Option<f64>,
    iters: Option<usize>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    mu: Option<f64>,
    delta: Option<f64>,
    seed: Option<u64>,
    format: Option<String>,
    out: Option<PathBuf>,
}

fn cmd_matrix(r: &mut Resolver, args: MatrixArgs) -> Result<()> {
    let data_dir = r.require_path("data", args.data)?;
    let source_paths = r.require_paths("source", args.source)?;
    let target_paths = r.require_paths("target", args.target)?;
    let default_methods = AttackMethod::all().map(|m| m.id()).join(",");
    let methods = parse_methods(&r.get_str("methods", args.methods, &default_methods)?)?;
    let n = r.get("n", args.n, 500)?;
    let cfg = resolve_attack_cfg(r, args.eps, args.iters, args.beta1, args.beta2, args.mu, args.delta, None)?;
    let seed = r.get("seed", args.seed, 7)?;
    let format = parse_format(&r.get_str("format", args.format, "csv")?)?;
    let out = r.require_path("out", args.out)?;
    r.print_echo("matrix");

    let sources = load_models(&source_paths)?;
    let targets = load_models(&target_paths)?;
    let (_, test_set) = data::load_mnist_dir(&data_dir)?;
    let all: Vec<&Model> = sources.iter().chain(&targets).map(|(_, m)| m).collect();
    let candidates = select_candidates(&all, &test_set, n, seed.wrapping_add(SEED_CANDIDATES))?;

    let source_refs: Vec<(&str, &Model)> = sources.iter().map(|(id, m)| (id.as_str(), m)).collect();
    let target_refs: Vec<(&str, &Model)> = targets.iter().map(|(id, m)| (id.as_str(), m)).collect();
    let mut report = run_matrix(
        &methods,
        &source_refs,
        &target_refs,
        &candidates,
        &cfg,
        seed.wrapping_add(SEED_ATTACK),
    )?;
    report_metadata(&mut report, &candidates, seed);
    eval::emit_report(&report, format, &out)?;
    println!("wrote {} rows to {}", report.rows.len(), out.display());
    Ok(())
}

struct SweepArgs {
    kind: Option<String>,
    data: Option<PathBuf>,
    source: Option<PathBuf>,
    target: Vec<PathBuf>,
    n: Option<usize>,
    values: Option<String>,
    values2: Option<String>,
    eps: Option<f64>,
    iters: Option<usize>,
    seed: Option<u64>,
    format: Option<String>,
    out: Option<PathBuf>,
}

fn cmd_sweep(r: &mut Resolver, args: SweepArgs) -> Result<()> {
    let kind = r.get_str("kind", args.kind, "beta")?;
    let data_dir = r.require_path("data", args.data)?;
    let source_path = r.require_path("source", args.source)?;
    let target_paths = r.require_paths("target", args.target)?;
    let n = r.get("n", args.n, 500)?;
    // defaults: beta grid brackets 0 and 1; T spans 1..20; eps spans the
    // small-to-large range proportional to a [0,255] pixel scale
    let default_values = match kind.as_str() {
        "beta" => "0.01,0.1,0.5,0.9,0.99",
        "iterations" => "1,5,10,20",
        "epsilon" => "0.05,0.1,0.15,0.2,0.25,0.3",
        other => return Err(Error::Config(format!("unknown sweep kind `{other}`"))),
    };
    let values = r.get_str("values", args.values, default_values)?;
    let values2 = r.get_str("values2", args.values2, &values.clone())?;
    let cfg = resolve_attack_cfg(r, args.eps, args.iters, None, None, None, None, None)?;
    let seed = r.get("seed", args.seed, 7)?;
    let format = parse_format(&r.get_str("format", args.format, "csv")?)?;
    let out = r.require_path("out", args.out)?;
    r.print_echo("sweep");

    let source = (model_id(&source_path), model::load(&source_path)?);
    let targets = load_models(&target_paths)?;
    let (_, test_set) = data::load_mnist_dir(&data_dir)?;
    let all: Vec<&Model> = std::iter::once(&source.1).chain(targets.iter().map(|(_, m)| m)).collect();
    let candidates = select_candidates(&all, &test_set, n, seed.wrapping_add(SEED_CANDIDATES))?;
    let target_refs: Vec<(&str, &Model)> = targets.iter().map(|(id, m)| (id.as_str(), m)).collect();
    let source_ref = (source.0.as_str(), &source.1);
    let attack_seed = seed.wrapping_add(SEED_ATTACK);

    let mut report = match kind.as_str() {
        "beta" => eval::sweep_beta(
            source_ref,
            &target_refs,
            &candidates,
            &parse_f64_list("values", &values)?,
            &parse_f64_list("values2", &values2)?,
            &cfg,
            attack_seed,
        )?,
        "iterations" => {
            let t_values: Vec<usize> = values
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("`--values`: bad iteration count `{s}`")))
                })
                .collect::<Result<_>>()?;
            eval::sweep_iterations(source_ref, &target_refs, &candidates, &t_values, &cfg, attack_seed)?
        }
        "epsilon" => eval::sweep_epsilon(
            source_ref,
            &target_refs,
            &candidates,
            &parse_f64_list("values", &values)?,
            &cfg,
            attack_seed,
        )?,
        _ => unreachable!("kind validated above"),
    };
    report.metadata.insert("sweep_kind".into(), kind);
    report_metadata(&mut report, &candidates, seed);
    eval::emit_report(&report, format, &out)?;
    println!("wrote {} rows to {}", report.rows.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    validate_jobs(cli.jobs)?;
    let mut r = Resolver::load(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::GenData {
            out,
            train_n,
            test_n,
            size,
            noise,
            jitter,
            seed,
        } => cmd_gen_data(
            &mut r,
            GenDataArgs {
                out,
                train_n,
                test_n,
                size,
                noise,
                jitter,
                seed,
            },
        ),
        Cmd::Train {
            arch,
            data,
            epochs,
            lr,
            batch,
            seed,
            adversarial,
            adv_eps,
            adv_frac,
            out,
        } => cmd_train(&mut r, arch, data, epochs, lr, batch, seed, adversarial, adv_eps, adv_frac, out),
        Cmd::Attack {
            method,
            source,
            ensemble_weights,
            data,
            n,
            eps,
            iters,
            beta1,
            beta2,
            mu,
            delta,
            random_init,
            seed,
            out,
        } => cmd_attack(
            &mut r,
            AttackArgs {
                method,
                source,
                ensemble_weights,
                data,
                n,
                eps,
                iters,
                beta1,
                beta2,
                mu,
                delta,
                random_init,
                seed,
                out,
            },
        ),
        Cmd::Eval {
            batch,
            target,
            format,
            out,
        } => cmd_eval(&mut r, batch, target, format, out),
        Cmd::Matrix {
            data,
            source,
            target,
            methods,
            n,
            eps,
            iters,
            beta1,
            beta2,
            mu,
            delta,
            seed,
            format,
            out,
        } => cmd_matrix(
            &mut r,
            MatrixArgs {
                data,
                source,
                target,
                methods,
                n,
                eps,
                iters,
                beta1,
                beta2,
                mu,
                delta,
                seed,
                format,
                out,
            },
        ),
        Cmd::Sweep {
            kind,
            data,
            source,
            target,
            n,
            values,
            values2,
            eps,
            iters,
            seed,
            format,
            out,
        } => cmd_sweep(
            &mut r,
            SweepArgs {
                kind,
                data,
                source,
                target,
                n,
                values,
                values2,
                eps,
                iters,
                seed,
                format,
                out,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
