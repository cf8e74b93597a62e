//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//!
//! The tests share one lock so that timings are not distorted by each other,
//! and share the expensive training runs through `OnceLock`s.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use msis_core::baselines::{baseline_spec, BaselineKind};
use msis_core::dataset::{epoch_order, write_counterfactuals, write_csv, Batch, CounterfactualTable};
use msis_core::eval::{self, ablate, auc, mean_auc, write_report_csv, AblationSpec, RunResult, Scope, Variant};
use msis_core::loss::{check_gradients, LossConfig};
use msis_core::model::{Architecture, MlpConfig, MsisConfig};
use msis_core::numerics::{Reduction, Tensor2D};
use msis_core::sim::{generate, observe, SimConfig};
use msis_core::trainer::{repeat_experiment, write_training_log, ModelSpec, PreparedData, SeedRun, TrainConfig};
use msis_core::{Stage, Target};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Goes to stderr directly so the line survives the harness capturing output
/// of passing tests.
fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n} [{name}]: {status} ({detail})");
}

fn data() -> &'static PreparedData {
    static DATA: OnceLock<PreparedData> = OnceLock::new();
    DATA.get_or_init(|| {
        let pop = generate(&SimConfig::default()).expect("default simulation");
        PreparedData::from_population(&pop, 0).expect("default split")
    })
}

struct Trained {
    runs: Vec<SeedRun>,
    elapsed: Duration,
}

fn train_spec(spec: &ModelSpec, train: &TrainConfig) -> Trained {
    let start = Instant::now();
    let runs = repeat_experiment(spec, train, data().data()).expect("training succeeds");
    Trained {
        runs,
        elapsed: start.elapsed(),
    }
}

fn msis_runs() -> &'static Trained {
    static RUNS: OnceLock<Trained> = OnceLock::new();
    RUNS.get_or_init(|| {
        let spec = ModelSpec::single("msis", MsisConfig::default(), LossConfig::default());
        train_spec(&spec, &TrainConfig::default())
    })
}

/// Per-seed full-population mean GB AUC.
fn gb_by_seed(runs: &[SeedRun]) -> BTreeMap<u64, f64> {
    runs.iter()
        .map(|r| {
            let full = r.full.as_ref().expect("counterfactuals available");
            (r.seed, mean_auc(full, &Target::GB).expect("GB AUC defined"))
        })
        .collect()
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_1_gradient_correctness() {
    let _g = serial();
    let start = Instant::now();
    let pop = generate(&SimConfig {
        n: 4000,
        ..SimConfig::default()
    })
    .unwrap();
    let prepared = PreparedData::from_population(&pop, 0).unwrap();
    let train = &prepared.split.train;
    let arch = Architecture::from(MsisConfig::default());
    let loss = LossConfig::default();
    let mut worst: f64 = 0.0;
    let mut mixed = true;
    for seed in 1..=5u64 {
        let order = epoch_order(train.len(), seed, 0);
        let batch = Batch::<f64>::from_examples(order[..64].iter().map(|&i| &train[i]));
        let rejected = batch.mask(Target::Mob6).iter().filter(|&&m| !m).count();
        mixed &= rejected > 0 && rejected < 64;
        let params = arch.init_params::<f64>(seed).unwrap();
        let report = check_gradients(&arch, &params, &batch, &loss, 1e-6, 1e-4).unwrap();
        worst = worst.max(report.worst_relative_error);
    }
    let elapsed = start.elapsed();
    let pass = mixed && worst < 1e-4 && elapsed < Duration::from_secs(30);
    verdict(
        1,
        "gradient correctness",
        pass,
        &format!("worst relative error {worst:.3e}, mixed batches {mixed}, {elapsed:.1?}"),
    );
    assert!(pass);
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

#[test]
fn criterion_2_auc_oracle() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    while instances < 200 {
        let n = rng.gen_range(2..=500);
        // Few distinct levels force ties.
        let levels = rng.gen_range(1..=20);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        worst = worst.max((auc(&scores, &labels).unwrap() - pairwise_auc(&scores, &labels)).abs());
        instances += 1;
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-12 && elapsed < Duration::from_secs(5);
    verdict(2, "AUC oracle", pass, &format!("max deviation {worst:.2e}, {elapsed:.1?}"));
    assert!(pass);
}

#[test]
fn criterion_3_simulator_invariants() {
    let _g = serial();
    let config = SimConfig::default();
    let pop = generate(&config).unwrap();
    let pre: Vec<_> = pop.records.iter().filter(|r| r.timestamp < pop.cutoff_day).collect();
    let accepted = |rs: &[&msis_core::sim::PopulationRecord]| {
        rs.iter().filter(|r| r.labels[Target::Credit.index()]).count() as f64 / rs.len() as f64
    };
    let all: Vec<_> = pop.records.iter().collect();
    let rate_pre = accepted(&pre);
    let rate_all = accepted(&all);
    let nested = pop.records.iter().all(|r| {
        let l = |t: Target| r.labels[t.index()];
        (!l(Target::Draw30) || l(Target::Draw90))
            && (!l(Target::Mob1) || l(Target::Mob3))
            && (!l(Target::Mob3) || l(Target::Mob6))
    });
    let z_mean = |credit: bool| {
        mean(pop.records.iter().filter(|r| r.labels[Target::Credit.index()] == credit).map(|r| r.quality))
    };
    let (z_rej, z_acc) = (z_mean(false), z_mean(true));

    let bytes = |p: &msis_core::sim::Population| {
        let mut out = Vec::new();
        write_csv(&observe(p), &mut out).unwrap();
        write_counterfactuals(&CounterfactualTable::from(p), &mut out).unwrap();
        out
    };
    let identical = bytes(&pop) == bytes(&generate(&config).unwrap());

    let pass = (rate_pre - 0.3).abs() <= 0.01 && nested && z_rej < z_acc && identical;
    verdict(
        3,
        "simulator invariants",
        pass,
        &format!(
            "acceptance {rate_pre:.4} before cutoff ({rate_all:.4} overall), nesting {nested}, \
             mean z rejected {z_rej:.4} < accepted {z_acc:.4}, byte-identical {identical}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_attention_contracts() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let configs = [
        MsisConfig::default(),
        MsisConfig::default().without_stage(Stage::Ws),
        MsisConfig::default().single_intra_target(Target::Mob3),
        MsisConfig {
            corridor_dim: 2,
            ..MsisConfig::default()
        },
    ];
    let mut worst: f64 = 0.0;
    let mut single_exact = true;
    let mut passes = 0;
    for (k, config) in configs.iter().enumerate() {
        let arch = Architecture::from(config.clone());
        for seed in 0..5u64 {
            let params = arch.init_params::<f64>(seed + 10 * k as u64).unwrap();
            let scale = [0.1, 1.0, 10.0, 100.0][seed as usize % 4];
            let x: Vec<f64> = (0..64 * 32).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
            let x = Tensor2D::from_vec(64, 32, x).unwrap();
            let out = arch.forward(&params, &x).unwrap();
            passes += 1;
            for c in &out.corridors {
                let mut weights = vec![&c.alpha];
                weights.extend(c.beta.values());
                for w in weights {
                    for r in 0..w.rows() {
                        let row = w.row(r);
                        let sum: f64 = row.iter().sum();
                        worst = worst.max((sum - 1.0).abs());
                        if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                            worst = f64::INFINITY;
                        }
                    }
                }
                if c.alpha.cols() == 1 {
                    single_exact &= c.alpha.data().iter().all(|&a| a == 1.0);
                }
            }
        }
    }
    let pass = worst <= 1e-12 && single_exact;
    verdict(
        4,
        "attention contracts",
        pass,
        &format!("{passes} forward passes, max simplex deviation {worst:.2e}, single-target alpha exactly 1: {single_exact}"),
    );
    assert!(pass);
}

#[test]
fn criterion_5_bias_remediation() {
    let _g = serial();
    let start = Instant::now();
    data();
    let msis = msis_runs();
    let spec = baseline_spec(
        BaselineKind::SingleTask,
        &MsisConfig::default(),
        &LossConfig::default(),
        &MlpConfig::default().hidden,
    )
    .unwrap();
    let single = train_spec(&spec, &TrainConfig::default());
    let elapsed = start.elapsed().max(msis.elapsed + single.elapsed);

    let m = mean(gb_by_seed(&msis.runs).into_values());
    let s = mean(gb_by_seed(&single.runs).into_values());
    let pass = m - s >= 0.005 && elapsed < Duration::from_secs(600);
    verdict(
        5,
        "bias remediation",
        pass,
        &format!("full-population mean GB AUC: msis {m:.4}, single_task {s:.4}, gain {:+.4}, {elapsed:.0?}", m - s),
    );
    assert!(pass);
}

#[test]
fn criterion_6_ablation_direction() {
    let _g = serial();
    let full = gb_by_seed(&msis_runs().runs);
    let mut lines = Vec::new();
    let mut pass = true;
    for variant in [
        Variant::NoSemiSupervised,
        Variant::SingleIntraTarget,
        Variant::OneAuxiliaryStage,
        Variant::NoCorridor,
    ] {
        let outcome = ablate(
            AblationSpec { variant },
            &MsisConfig::default(),
            &LossConfig::default(),
            &TrainConfig::default(),
            data().data(),
        )
        .unwrap();
        let ablated = gb_by_seed(&outcome.runs);
        let wins = ablated.iter().filter(|(s, v)| full[s] >= **v).count();
        pass &= wins >= 3;
        lines.push(format!("{variant} {wins}/5 (mean {:.4})", mean(ablated.into_values())));
    }
    verdict(
        6,
        "ablation direction",
        pass,
        &format!("full mean {:.4}; seeds where full >= variant: {}", mean(full.values().copied()), lines.join(", ")),
    );
    assert!(pass);
}

#[test]
fn criterion_7_entropy_minimization() {
    let _g = serial();
    let loss = LossConfig {
        reduction: Reduction::Sum,
        ..LossConfig::default()
    }
    .with_gamma(6e-4);
    let spec = ModelSpec::single("msis_sum", MsisConfig::default(), loss);
    let trained = train_spec(&spec, &TrainConfig::default());
    let mut pass = true;
    let mut lines = Vec::new();
    for t in Target::GB {
        let drops: Vec<f64> = trained
            .runs
            .iter()
            .map(|r| {
                let h = &r.members[0].history;
                let first = h.record(1).unwrap().unlabeled_entropy[&t].unwrap();
                let best = h.best().unwrap().unlabeled_entropy[&t].unwrap();
                1.0 - best / first
            })
            .collect();
        let ok = drops.iter().filter(|&&d| d >= 0.10).count();
        pass &= ok >= 4;
        let shown: Vec<String> = drops.iter().map(|d| format!("{:.0}%", 100.0 * d)).collect();
        lines.push(format!("{t} {ok}/5 [{}]", shown.join(" ")));
    }
    verdict(7, "entropy minimization", pass, &format!("entropy drop at best epoch: {}", lines.join(", ")));
    assert!(pass);
}

fn metric_csvs(results: &[RunResult], runs: &[SeedRun]) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for scope in [Scope::ObservedOnly, Scope::FullPopulation] {
        let subset: Vec<RunResult> = results.iter().filter(|r| r.scope == scope).cloned().collect();
        let mut buf = Vec::new();
        write_report_csv(&eval::report(&subset, "single_task").unwrap(), &mut buf).unwrap();
        out.push(buf);
    }
    for r in runs {
        for m in &r.members {
            let mut buf = Vec::new();
            write_training_log(&m.history, &mut buf).unwrap();
            out.push(buf);
        }
    }
    out
}

fn small_experiment() -> Vec<Vec<u8>> {
    let pop = generate(&SimConfig {
        n: 6000,
        ..SimConfig::default()
    })
    .unwrap();
    let prepared = PreparedData::from_population(&pop, 0).unwrap();
    let train = TrainConfig {
        epochs: 3,
        patience: 2,
        seeds: vec![1, 2],
        ..TrainConfig::default()
    };
    let loss = LossConfig::default();
    let specs = [
        ModelSpec::single("msis", MsisConfig::default(), loss.clone()),
        baseline_spec(BaselineKind::SingleTask, &MsisConfig::default(), &loss, &MlpConfig::default().hidden).unwrap(),
    ];
    let mut results = Vec::new();
    let mut all_runs = Vec::new();
    for spec in &specs {
        let runs = repeat_experiment(spec, &train, prepared.data()).unwrap();
        for scope in [Scope::ObservedOnly, Scope::FullPopulation] {
            results.extend(runs.iter().filter_map(|r| r.result(&spec.name, scope)));
        }
        all_runs.extend(runs);
    }
    metric_csvs(&results, &all_runs)
}

#[test]
fn criterion_8_reproducibility() {
    let _g = serial();
    let a = small_experiment();
    let b = small_experiment();
    let pass = a == b && !a.is_empty();
    verdict(8, "reproducibility", pass, &format!("{} metric files compared byte by byte", a.len()));
    assert!(pass);
}
