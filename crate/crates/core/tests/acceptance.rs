//! Acceptance gate: one test per success criterion, each writing a single
//! PASS/FAIL line (to unbuffered stderr so the harness cannot swallow it)
//! before asserting.
//!
//! Criteria 1-6 are fast properties of the attack and gradient code.
//! Criteria 7-12 run the desk-scale experiment suite on a shared fixture of
//! procedurally generated digits and freshly trained models; the fixture is
//! fully seeded, so every number below is reproducible bit for bit.

use std::io::Write;
use std::sync::OnceLock;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use advbench_core::attack::{
    self, ai_fgm_iterates, i_fgsm_iterates, mi_fgsm_iterates, step_schedule, AttackMethod,
};
use advbench_core::data::select_candidates;
use advbench_core::digits::{self, SynthConfig};
use advbench_core::eval::{self, run_ensemble, run_matrix};
use advbench_core::model::{self, AdvTrainOptions, TrainOptions};
use advbench_core::nn;
use advbench_core::{
    Arch, AttackConfig, Dataset, Ensemble, GradSource, Model, ModelSpec, Result, Tensor,
};

fn report(num: u8, name: &str, pass: bool, detail: &str) -> bool {
    let line = format!(
        "criterion {num:02} {name}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    pass
}

// ---------------------------------------------------------------- fixture

const SIZE: usize = 14;
const EPOCHS: usize = 6;

struct Fixture {
    test: Dataset,
    a1: Model,
    b2: Model,
    a3: Model,
    b4: Model,
    a5: Model,
    b6: Model,
    m7: Model,
    /// FGSM-adversarially-trained twin of `a1` (same data pool and seed).
    adv: Model,
    /// Early-stopped cnn-b used as the beta-grid surrogate.
    bw: Model,
}

fn data_cfg(seed: u64) -> SynthConfig {
    SynthConfig {
        size: SIZE,
        noise: 0.25,
        jitter: 1.3,
        seed,
    }
}

fn train_model(
    arch: Arch,
    pool: u64,
    seed: u64,
    epochs: usize,
    adversarial: Option<AdvTrainOptions>,
) -> Model {
    let train = digits::generate(3000, &data_cfg(pool));
    let spec = ModelSpec::new(arch, [SIZE, SIZE, 1], 10);
    let opts = TrainOptions {
        epochs,
        learning_rate: 0.1,
        batch_size: 32,
        seed,
        adversarial,
    };
    model::train(&model::build(&spec, seed).unwrap(), &train, None, &opts)
        .unwrap()
        .0
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| Fixture {
        test: digits::generate(2500, &data_cfg(200)),
        a1: train_model(Arch::CnnA, 301, 1, EPOCHS, None),
        b2: train_model(Arch::CnnB, 302, 2, EPOCHS, None),
        a3: train_model(Arch::CnnA, 303, 3, EPOCHS, None),
        b4: train_model(Arch::CnnB, 304, 4, EPOCHS, None),
        a5: train_model(Arch::CnnA, 305, 5, EPOCHS, None),
        b6: train_model(Arch::CnnB, 306, 6, EPOCHS, None),
        m7: train_model(Arch::MlpA, 307, 7, EPOCHS, None),
        adv: train_model(
            Arch::CnnA,
            301,
            1,
            12,
            Some(AdvTrainOptions {
                epsilon: 0.3,
                adv_fraction: 0.5,
            }),
        ),
        bw: train_model(Arch::CnnB, 302, 2, 3, None),
    })
}

fn random_batch(rng: &mut ChaCha8Rng, shape: [usize; 3], batch: usize, classes: usize) -> (Tensor, Vec<usize>) {
    let len = batch * shape[0] * shape[1] * shape[2];
    let values = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
    let x = Tensor::new(vec![batch, shape[0], shape[1], shape[2]], values).unwrap();
    let y = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    (x, y)
}

fn mean_loss(m: &Model, x: &Tensor, y: &[usize]) -> f64 {
    nn::loss_cross_entropy(&m.forward(x).unwrap(), y).unwrap().1
}

// -------------------------------------------------- 1: gradient oracle

/// Central finite differences at two step sizes; coordinates where the two
/// estimates disagree sit on a ReLU/max-pool kink and carry no information.
fn fd_stable(f: impl Fn(&Tensor) -> f64 + Copy, x: &Tensor) -> (Tensor, Vec<bool>) {
    let coarse = nn::finite_diff_grad(f, x, 1e-5);
    let fine = nn::finite_diff_grad(f, x, 5e-6);
    let stable = coarse
        .values
        .iter()
        .zip(&fine.values)
        .map(|(a, b)| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0))
        .collect();
    (fine, stable)
}

fn check_against_oracle(an: &Tensor, fd: &Tensor, stable: &[bool], max_rel: &mut f64, skipped: &mut usize) {
    for ((&a, &f), &ok) in an.values.iter().zip(&fd.values).zip(stable) {
        if !ok {
            *skipped += 1;
            continue;
        }
        if f.abs() <= 1e-6 {
            continue;
        }
        let rel = (a - f).abs() / a.abs().max(f.abs());
        *max_rel = max_rel.max(rel);
    }
}

#[test]
fn c01_gradient_oracle() {
    let plan: [(Arch, [usize; 3], usize); 4] = [
        (Arch::MlpA, [4, 4, 1], 60),
        (Arch::CnnA, [12, 12, 1], 20),
        (Arch::CnnB, [12, 12, 1], 10),
        (Arch::CnnC, [12, 12, 1], 10),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut max_rel = 0.0f64;
    let mut skipped = 0usize;
    let mut total = 0usize;
    let mut models = 0usize;
    for (arch, shape, count) in plan {
        for i in 0..count {
            let spec = ModelSpec::new(arch, shape, 3);
            let m = model::build(&spec, 1000 + models as u64 + i as u64).unwrap();
            let (x, y) = random_batch(&mut rng, shape, 2, 3);
            models += 1;

            let an = m.grad_input(&x, &y).unwrap();
            let (fd, stable) = fd_stable(|t| mean_loss(&m, t, &y), &x);
            total += an.values.len();
            check_against_oracle(&an, &fd, &stable, &mut max_rel, &mut skipped);

            let grads = m.grad_params(&x, &y).unwrap();
            for (name, an) in &grads {
                let base = m.params.get(name).unwrap().clone();
                let loss_at = |t: &Tensor| {
                    let mut probe = m.clone();
                    *probe.params.get_mut(name).unwrap() = t.clone();
                    mean_loss(&probe, &x, &y)
                };
                let (fd, stable) = fd_stable(loss_at, &base);
                total += an.values.len();
                check_against_oracle(an, &fd, &stable, &mut max_rel, &mut skipped);
            }
        }
    }
    let pass = models == 100 && max_rel < 1e-4 && skipped * 100 < total;
    let ok = report(
        1,
        "gradient oracle",
        pass,
        &format!("{models} models, max rel err {max_rel:.3e}, {skipped}/{total} kink coordinates skipped"),
    );
    assert!(ok);
}

// ------------------------------------------- 2: step-size schedule

#[test]
fn c02_schedule_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let t = rng.gen_range(1..=40usize);
        let b1 = rng.gen_range(0.001..0.999);
        let b2 = rng.gen_range(0.001..0.999);
        let eps = rng.gen_range(0.01..1.0);
        let n = rng.gen_range(1..=1024usize);
        let alpha = eps * (n as f64).sqrt();
        let sum: f64 = step_schedule(t, b1, b2, alpha).iter().sum();
        worst = worst.max((sum - alpha).abs() / alpha);
    }
    let mut decreasing = true;
    for t in 2..=30 {
        let s = step_schedule(t, 0.99, 0.999, 1.0);
        decreasing &= s.windows(2).all(|w| w[1] < w[0]);
    }
    let pass = worst < 1e-9 && decreasing;
    let ok = report(
        2,
        "schedule normalization",
        pass,
        &format!("1000 configs, worst rel sum error {worst:.3e}, strictly decreasing at (0.99, 0.999): {decreasing}"),
    );
    assert!(ok);
}

// ------------------------------------------------- 3: reductions

#[test]
fn c03_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut pass = true;
    for seed in 0..10u64 {
        let (arch, shape): (Arch, [usize; 3]) = if seed % 2 == 0 {
            (Arch::MlpA, [4, 4, 1])
        } else {
            (Arch::CnnA, [12, 12, 1])
        };
        let m = model::build(&ModelSpec::new(arch, shape, 4), 50 + seed).unwrap();
        let (x, y) = random_batch(&mut rng, shape, 3, 4);
        let eps = rng.gen_range(0.01..0.4);

        let one = AttackConfig {
            epsilon: eps,
            iterations: 1,
            ..AttackConfig::default()
        };
        pass &= attack::i_fgsm(&m, &x, &y, &one).unwrap().values
            == attack::fgsm(&m, &x, &y, &one).unwrap().values;

        let many = AttackConfig {
            epsilon: eps,
            iterations: 5,
            momentum_decay: 0.0,
            ..AttackConfig::default()
        };
        let base = attack::i_fgsm(&m, &x, &y, &many).unwrap().values;
        pass &= attack::mi_fgsm(&m, &x, &y, &many).unwrap().values == base;
        pass &= attack::ni_fgsm(&m, &x, &y, &many).unwrap().values == base;
    }
    let ok = report(
        3,
        "reductions",
        pass,
        "i_fgsm(T=1)=fgsm, mi_fgsm(mu=0)=i_fgsm, ni_fgsm(mu=0)=i_fgsm, elementwise over 10 random models",
    );
    assert!(ok);
}

// ------------------------------------------- 4: ball containment

#[test]
fn c04_ball_containment() {
    let shape = [4usize, 4, 1];
    let m = model::build(&ModelSpec::new(Arch::MlpA, shape, 3), 42).unwrap();
    let methods = AttackMethod::all();
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut worst_overrun = f64::NEG_INFINITY;
    let mut bounds_ok = true;
    for run in 0..10_000usize {
        let method = methods[run % methods.len()];
        let eps = if rng.gen_range(0..20) == 0 {
            0.0
        } else {
            rng.gen_range(0.0..0.5)
        };
        let cfg = AttackConfig {
            epsilon: eps,
            iterations: rng.gen_range(1..=4),
            ..AttackConfig::default()
        };
        let batch = rng.gen_range(1..=2);
        let (x, y) = random_batch(&mut rng, shape, batch, 3);
        let adv = method.run(&m, &x, &y, &cfg, run as u64).unwrap();
        worst_overrun = worst_overrun.max(adv.linf_distance(&x) - eps);
        bounds_ok &= adv.values.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite());
    }
    let pass = worst_overrun <= 1e-12 && bounds_ok;
    let ok = report(
        4,
        "ball containment",
        pass,
        &format!("10000 runs over 6 methods, worst ||x*-x||_inf - eps = {worst_overrun:.3e}, pixel bounds held: {bounds_ok}"),
    );
    assert!(ok);
}

// ------------------------------------------- 5: Adam scalar case

struct ConstGrad {
    g: f64,
}

impl GradSource for ConstGrad {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::zeros(vec![x.batch_size(), 2]))
    }
    fn loss_grad(&self, x: &Tensor, _labels: &[usize]) -> Result<Tensor> {
        Ok(Tensor::new(x.shape.clone(), vec![self.g; x.len()]).unwrap())
    }
}

#[test]
fn c05_adam_scalar_case() {
    let cfg = AttackConfig {
        epsilon: 0.3,
        iterations: 1,
        ..AttackConfig::default()
    };
    let x = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
    let up = attack::ai_fgm(&ConstGrad { g: 0.7 }, &x, &[0], &cfg).unwrap();
    let down = attack::ai_fgm(&ConstGrad { g: -1.3e-9 }, &x, &[0], &cfg).unwrap();
    let flat = attack::ai_fgm(&ConstGrad { g: 0.0 }, &x, &[0], &cfg).unwrap();
    let pass = up.values[0] == 0.5 + 0.3 && down.values[0] == 0.5 - 0.3 && flat.values[0] == 0.5;
    let ok = report(
        5,
        "adam scalar case",
        pass,
        &format!(
            "N=1, T=1: grad>0 -> {}, grad<0 -> {}, grad=0 -> {} (expected 0.8, 0.2, 0.5, exact)",
            up.values[0], down.values[0], flat.values[0]
        ),
    );
    assert!(ok);
}

// ------------------------------------------- 6: loss-scale invariance

struct ScaledLoss<'a> {
    inner: &'a Model,
    c: f64,
}

impl GradSource for ScaledLoss<'_> {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.inner.logits(x)
    }
    fn loss_grad(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let mut g = self.inner.loss_grad(x, labels)?;
        for v in &mut g.values {
            *v *= self.c;
        }
        Ok(g)
    }
}

fn iterates_identical(a: &[Tensor], b: &[Tensor]) -> (bool, f64) {
    let mut max_abs = 0.0f64;
    let mut same = true;
    for (ta, tb) in a.iter().zip(b) {
        for (&va, &vb) in ta.values.iter().zip(&tb.values) {
            if va.to_bits() != vb.to_bits() {
                same = false;
                max_abs = max_abs.max((va - vb).abs());
            }
        }
    }
    (same, max_abs)
}

#[test]
fn c06_loss_scale_invariance() {
    let train = digits::generate(600, &data_cfg(901));
    let m = model::train(
        &model::build(&ModelSpec::new(Arch::CnnA, [SIZE, SIZE, 1], 10), 3).unwrap(),
        &train,
        None,
        &TrainOptions {
            epochs: 2,
            learning_rate: 0.1,
            batch_size: 32,
            seed: 3,
            adversarial: None,
        },
    )
    .unwrap()
    .0;
    let batch = digits::generate(64, &data_cfg(902));
    let (x, y) = Dataset::batch(&batch.examples).unwrap();
    let cfg = AttackConfig::default();
    let scaled = ScaledLoss { inner: &m, c: 10.0 };

    let (i_same, i_dev) = iterates_identical(
        &i_fgsm_iterates(&m, &x, &y, &cfg).unwrap(),
        &i_fgsm_iterates(&scaled, &x, &y, &cfg).unwrap(),
    );
    let (mi_same, mi_dev) = iterates_identical(
        &mi_fgsm_iterates(&m, &x, &y, &cfg).unwrap(),
        &mi_fgsm_iterates(&scaled, &x, &y, &cfg).unwrap(),
    );
    let (ai_same, ai_dev) = iterates_identical(
        &ai_fgm_iterates(&m, &x, &y, &cfg).unwrap(),
        &ai_fgm_iterates(&scaled, &x, &y, &cfg).unwrap(),
    );
    let pass = i_same && mi_same && ai_same;
    let ok = report(
        6,
        "loss-scale invariance",
        pass,
        &format!(
            "J x10 bit-identical iterates: i_fgsm {i_same} (max dev {i_dev:.1e}), mi_fgsm {mi_same} (max dev {mi_dev:.1e}), ai_fgm {ai_same} (max dev {ai_dev:.1e})"
        ),
    );
    assert!(ok);
}

// ------------------------------------------- 7: white-box saturation

#[test]
fn c07_white_box_saturation() {
    let f = fixture();
    let cand = select_candidates(&[&f.a1, &f.b2], &f.test, 1000, 7).unwrap();
    let methods = [
        AttackMethod::IFgsm,
        AttackMethod::Pgd,
        AttackMethod::MiFgsm,
        AttackMethod::NiFgsm,
        AttackMethod::AiFgm,
    ];
    let cfg = AttackConfig::default();
    let r = run_matrix(&methods, &[("cnn-a", &f.a1)], &[("cnn-a", &f.a1)], &cand, &cfg, 11).unwrap();
    let detail: Vec<String> = r
        .rows
        .iter()
        .map(|row| format!("{} {:.4}", row.attack, row.success_rate))
        .collect();
    let pass = r.rows.iter().all(|row| row.success_rate >= 0.99);
    let ok = report(
        7,
        "white-box saturation",
        pass,
        &format!("T=10, eps=0.3, 1000 candidates: {}", detail.join(", ")),
    );
    assert!(ok);
}

// ------------------------------------------- 8: transfer ordering

#[test]
fn c08_transfer_ordering() {
    let f = fixture();
    let methods = [AttackMethod::IFgsm, AttackMethod::MiFgsm, AttackMethod::AiFgm];
    let cfg = AttackConfig::default();
    let mut mean = [0.0f64; 3];
    let pairs = [(&f.a1, &f.b2), (&f.a3, &f.b4), (&f.a5, &f.b6)];
    for (src, tgt) in pairs {
        let cand = select_candidates(&[src, tgt], &f.test, 500, 7).unwrap();
        let r = run_matrix(&methods, &[("src", src)], &[("tgt", tgt)], &cand, &cfg, 11).unwrap();
        for row in &r.rows {
            let i = methods.iter().position(|m| m.id() == row.attack).unwrap();
            mean[i] += row.success_rate / pairs.len() as f64;
        }
    }
    let (i, mi, ai) = (mean[0], mean[1], mean[2]);
    let pass = ai > mi && mi > i && (ai - i) >= 0.02;
    let ok = report(
        8,
        "transfer ordering",
        pass,
        &format!(
            "mean black-box over 3 seed pairs x 500 candidates: ai_fgm {ai:.4}, mi_fgsm {mi:.4}, i_fgsm {i:.4}; need ai>mi>i and ai-i>=0.02"
        ),
    );
    assert!(ok);
}

// ------------------------------------------- 9: beta sensitivity

#[test]
fn c09_beta_sensitivity() {
    let f = fixture();
    let cand = select_candidates(&[&f.bw, &f.a1], &f.test, 1000, 7).unwrap();
    let grid = [0.1, 0.5, 0.9, 0.99, 0.999];
    let base = AttackConfig::default();
    let r = eval::sweep_beta(
        ("cnn-b", &f.bw),
        &[("cnn-b", &f.bw), ("cnn-a", &f.a1)],
        &cand,
        &grid,
        &grid,
        &base,
        11,
    )
    .unwrap();
    let cell = |b1: f64, b2: f64, target: &str| {
        r.rows
            .iter()
            .find(|row| row.beta1 == b1 && row.beta2 == b2 && row.target_model == target)
            .unwrap()
            .success_rate
    };
    let wb_floor = grid
        .iter()
        .flat_map(|&b1| grid.iter().map(move |&b2| cell(b1, b2, "cnn-b")))
        .fold(1.0f64, f64::min);
    let bb_high = cell(0.99, 0.999, "cnn-a");
    let bb_low = cell(0.1, 0.1, "cnn-a");
    let pass = bb_high >= bb_low && wb_floor >= 0.99;
    let ok = report(
        9,
        "beta sensitivity",
        pass,
        &format!(
            "5x5 grid, 1000 candidates: black-box (0.99,0.999) {bb_high:.4} vs (0.1,0.1) {bb_low:.4}; white-box floor {wb_floor:.4}"
        ),
    );
    assert!(ok);
}

// ------------------------------------------- 10: epsilon monotonicity

#[test]
fn c10_epsilon_monotonicity() {
    let f = fixture();
    let cand = select_candidates(&[&f.a1, &f.b2], &f.test, 500, 7).unwrap();
    let eps_values = [0.1, 0.15, 0.2, 0.25, 0.3];
    let base = AttackConfig::default();
    let r = eval::sweep_epsilon(
        ("cnn-a", &f.a1),
        &[("cnn-b", &f.b2)],
        &cand,
        &eps_values,
        &base,
        11,
    )
    .unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for method in [AttackMethod::IFgsm, AttackMethod::MiFgsm, AttackMethod::AiFgm] {
        let rates: Vec<f64> = eps_values
            .iter()
            .map(|&e| {
                r.rows
                    .iter()
                    .find(|row| row.attack == method.id() && row.epsilon == e)
                    .unwrap()
                    .success_rate
            })
            .collect();
        pass &= rates.windows(2).all(|w| w[1] >= w[0] - 0.03);
        detail.push(format!("{} {:?}", method.id(), rates));
    }
    let ok = report(
        10,
        "epsilon monotonicity",
        pass,
        &format!("black-box cnn-a -> cnn-b, 3pp slack: {}", detail.join("; ")),
    );
    assert!(ok);
}

// ------------------------------------------- 11: ensemble gain

#[test]
fn c11_ensemble_gain() {
    let f = fixture();
    let cand = select_candidates(&[&f.a1, &f.b2, &f.m7, &f.adv], &f.test, 500, 7).unwrap();
    let ens = Ensemble::equal_weights(vec![f.a1.clone(), f.b2.clone(), f.m7.clone()]).unwrap();
    let cfg = AttackConfig::default();
    let r = run_ensemble(
        &ens,
        &["cnn-a", "cnn-b", "mlp-a"],
        &[("adv-cnn-a", &f.adv)],
        &cand,
        &[AttackMethod::MiFgsm, AttackMethod::AiFgm],
        &cfg,
        11,
    )
    .unwrap();
    let rate = |attack: &str| {
        r.rows
            .iter()
            .find(|row| row.attack == attack)
            .unwrap()
            .success_rate
    };
    let ens_mi = rate("mi-fgsm");
    let ens_ai = rate("ai-fgm");
    let single = run_matrix(
        &[AttackMethod::AiFgm],
        &[("cnn-a", &f.a1)],
        &[("adv-cnn-a", &f.adv)],
        &cand,
        &cfg,
        11,
    )
    .unwrap()
    .rows[0]
        .success_rate;
    let pass = ens_ai > ens_mi && ens_ai > single;
    let ok = report(
        11,
        "ensemble gain",
        pass,
        &format!(
            "vs adversarially trained target: ensemble ai_fgm {ens_ai:.4}, ensemble mi_fgsm {ens_mi:.4}, single-source ai_fgm {single:.4}; need ens_ai>ens_mi and ens_ai>single"
        ),
    );
    assert!(ok);
}

// ------------------------------------------- 12: defense stand-in

#[test]
fn c12_defense_stand_in() {
    let f = fixture();
    let cand = select_candidates(&[&f.a1, &f.adv], &f.test, 500, 7).unwrap();
    let cfg = AttackConfig::default();
    let normal = run_matrix(&[AttackMethod::Fgsm], &[("cnn-a", &f.a1)], &[("cnn-a", &f.a1)], &cand, &cfg, 11)
        .unwrap()
        .rows[0]
        .success_rate;
    let hardened = run_matrix(
        &[AttackMethod::Fgsm],
        &[("adv-cnn-a", &f.adv)],
        &[("adv-cnn-a", &f.adv)],
        &cand,
        &cfg,
        11,
    )
    .unwrap()
    .rows[0]
        .success_rate;
    let drop = normal - hardened;
    let pass = drop >= 0.20;
    let ok = report(
        12,
        "defense stand-in",
        pass,
        &format!(
            "white-box FGSM at training eps: normal {normal:.4}, adversarially trained {hardened:.4}, drop {drop:.4} (need >= 0.20)"
        ),
    );
    assert!(ok);
}
