//! Experiment harness: success-rate matrices, parameter sweeps, ensemble
//! runs, and CSV/JSON report emission.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, AttackMethod, Ensemble, GradSource};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Attacks run over candidate chunks of this size to bound memory; results
/// are identical to whole-batch runs because every attack is per-example.
const CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub attack: String,
    pub source_model: String,
    pub target_model: String,
    pub epsilon: f64,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub mu: f64,
    pub seed: u64,
    pub n_examples: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: BTreeMap<String, String>,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn merge(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        for (k, v) in other.metadata {
            self.metadata.entry(k).or_insert(v);
        }
    }

    pub fn rate(&self, attack: &str, source: &str, target: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.attack == attack && r.source_model == source && r.target_model == target)
            .map(|r| r.success_rate)
    }
}

/// Fraction of examples the target misclassifies.
pub fn success_rate(target: &Model, adversarial: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("empty adversarial batch".into()));
    }
    let mut missed = 0usize;
    let n = adversarial.example_len();
    let per_ex_shape: Vec<usize> = adversarial.shape[1..].to_vec();
    for start in (0..labels.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(labels.len());
        let mut shape = vec![end - start];
        shape.extend_from_slice(&per_ex_shape);
        let chunk = Tensor::new(shape, adversarial.values[start * n..end * n].to_vec())?;
        for (pred, &label) in target.predict(&chunk)?.iter().zip(&labels[start..end]) {
            if pred.0 != label {
                missed += 1;
            }
        }
    }
    Ok(missed as f64 / labels.len() as f64)
}

/// Runs `method` over all candidates in chunks, returning the stacked
/// adversarial batch and the labels.
pub fn craft(
    method: AttackMethod,
    source: &dyn GradSource,
    candidates: &Dataset,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidates to attack".into()));
    }
    let mut chunks = Vec::new();
    let mut labels = Vec::with_capacity(candidates.len());
    for (i, chunk) in candidates.examples.chunks(CHUNK).enumerate() {
        let (x, y) = Dataset::batch(chunk)?;
        // distinct PGD noise per chunk, deterministic in (seed, chunk index)
        let adv = method.run(source, &x, &y, cfg, seed.wrapping_add(i as u64))?;
        chunks.push(adv);
        labels.extend(y);
    }
    let mut values = Vec::new();
    let mut shape = chunks[0].shape.clone();
    shape[0] = labels.len();
    for c in chunks {
        values.extend(c.values);
    }
    Ok((Tensor::new(shape, values)?, labels))
}

fn row(
    attack: &str,
    source: &str,
    target: &str,
    cfg: &AttackConfig,
    seed: u64,
    n: usize,
    rate: f64,
) -> ReportRow {
    ReportRow {
        attack: attack.to_string(),
        source_model: source.to_string(),
        target_model: target.to_string(),
        epsilon: cfg.epsilon,
        iterations: cfg.iterations,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        mu: cfg.momentum_decay,
        seed,
        n_examples: n,
        success_rate: rate,
    }
}

/// One row per (attack, source, target). Rows where source == target are
/// white-box, the rest transfer (black-box) evaluations.
pub fn run_matrix(
    methods: &[AttackMethod],
    sources: &[(&str, &Model)],
    targets: &[(&str, &Model)],
    candidates: &Dataset,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for &method in methods {
        for (source_id, source) in sources {
            let (adv, labels) = craft(method, *source, candidates, cfg, seed)?;
            for (target_id, target) in targets {
                let rate = success_rate(target, &adv, &labels)?;
                report.rows.push(row(
                    method.id(),
                    source_id,
                    target_id,
                    cfg,
                    seed,
                    labels.len(),
                    rate,
                ));
            }
        }
    }
    Ok(report)
}

/// Full (beta1, beta2) grid for the Adam attack from one source.
pub fn sweep_beta(
    source: (&str, &Model),
    targets: &[(&str, &Model)],
    candidates: &Dataset,
    beta1_values: &[f64],
    beta2_values: &[f64],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for &b1 in beta1_values {
        for &b2 in beta2_values {
            let cell_cfg = AttackConfig {
                beta1: b1,
                beta2: b2,
                ..*cfg
            };
            let (adv, labels) = craft(AttackMethod::AiFgm, source.1, candidates, &cell_cfg, seed)?;
            for (target_id, target) in targets {
                let rate = success_rate(target, &adv, &labels)?;
                report.rows.push(row(
                    AttackMethod::AiFgm.id(),
                    source.0,
                    target_id,
                    &cell_cfg,
                    seed,
                    labels.len(),
                    rate,
                ));
            }
        }
    }
    Ok(report)
}

/// The three iterative methods compared side by side at each iteration count.
pub fn sweep_iterations(
    source: (&str, &Model),
    targets: &[(&str, &Model)],
    candidates: &Dataset,
    t_values: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<EvalReport> {
    let methods = [AttackMethod::IFgsm, AttackMethod::MiFgsm, AttackMethod::AiFgm];
    let mut report = EvalReport::default();
    for &t in t_values {
        let cell_cfg = AttackConfig {
            iterations: t,
            ..*cfg
        };
        report.merge(run_matrix(
            &methods,
            &[source],
            targets,
            candidates,
            &cell_cfg,
            seed,
        )?);
    }
    Ok(report)
}

pub fn sweep_epsilon(
    source: (&str, &Model),
    targets: &[(&str, &Model)],
    candidates: &Dataset,
    eps_values: &[f64],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<EvalReport> {
    let methods = [AttackMethod::IFgsm, AttackMethod::MiFgsm, AttackMethod::AiFgm];
    let mut report = EvalReport::default();
    for &eps in eps_values {
        let cell_cfg = AttackConfig {
            epsilon: eps,
            ..*cfg
        };
        report.merge(run_matrix(
            &methods,
            &[source],
            targets,
            candidates,
            &cell_cfg,
            seed,
        )?);
    }
    Ok(report)
}

/// Attacks crafted on the fused ensemble, scored on holdout targets.
/// A target that is also an ensemble member is a configuration error.
pub fn run_ensemble(
    ensemble: &Ensemble,
    member_ids: &[&str],
    targets: &[(&str, &Model)],
    candidates: &Dataset,
    methods: &[AttackMethod],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<EvalReport> {
    if member_ids.len() != ensemble.members.len() {
        return Err(Error::Config("one id per ensemble member required".into()));
    }
    for (target_id, _) in targets {
        if member_ids.contains(target_id) {
            return Err(Error::Config(format!(
                "target `{target_id}` is an ensemble member"
            )));
        }
    }
    let source_id = format!("ensemble({})", member_ids.join("+"));
    let mut report = EvalReport::default();
    report.metadata.insert(
        "ensemble_weights".into(),
        ensemble
            .weights
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    report
        .metadata
        .insert("ensemble_members".into(), member_ids.join(","));
    for &method in methods {
        let (adv, labels) = craft(method, ensemble, candidates, cfg, seed)?;
        for (target_id, target) in targets {
            let rate = success_rate(target, &adv, &labels)?;
            report.rows.push(row(
                method.id(),
                &source_id,
                target_id,
                cfg,
                seed,
                labels.len(),
                rate,
            ));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const CSV_HEADER: &str =
    "attack,source_model,target_model,epsilon,iterations,beta1,beta2,mu,seed,n_examples,success_rate";

pub fn to_csv(report: &EvalReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{:.4}\n",
            r.attack,
            r.source_model,
            r.target_model,
            r.epsilon,
            r.iterations,
            r.beta1,
            r.beta2,
            r.mu,
            r.seed,
            r.n_examples,
            r.success_rate
        ));
    }
    out
}

pub fn parse_csv(text: &str) -> Result<EvalReport> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != CSV_HEADER {
        return Err(Error::Format {
            offset: 0,
            msg: format!("unexpected CSV header `{header}`"),
        });
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(Error::Format {
                offset: 0,
                msg: format!("expected 11 CSV fields, got {}", f.len()),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format {
                offset: 0,
                msg: format!("bad numeric field `{s}`"),
            })
        };
        rows.push(ReportRow {
            attack: f[0].to_string(),
            source_model: f[1].to_string(),
            target_model: f[2].to_string(),
            epsilon: num(f[3])?,
            iterations: num(f[4])? as usize,
            beta1: num(f[5])?,
            beta2: num(f[6])?,
            mu: num(f[7])?,
            seed: num(f[8])? as u64,
            n_examples: num(f[9])? as usize,
            success_rate: num(f[10])?,
        });
    }
    Ok(EvalReport {
        metadata: BTreeMap::new(),
        rows,
    })
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => to_csv(report),
        ReportFormat::Json => {
            serde_json::to_string_pretty(report).map_err(|e| Error::InvalidInput(e.to_string()))?
        }
    };
    std::fs::write(path, text)?;
    Ok(())
}
