use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use msis_core::baselines::{baseline_spec, BaselineKind};
use msis_core::dataset::{epoch_order, load_counterfactuals, load_csv, save_counterfactuals, save_csv, Batch, CounterfactualTable};
use msis_core::eval::{
    self, ablate as run_ablation, summarize, write_gnuplot, write_report_csv, write_report_table,
    AblationSpec, MetricsReport, RunResult, Scope, Variant,
};
use msis_core::loss::check_gradients;
use msis_core::model::{save_checkpoint, load_checkpoint, Architecture};
use msis_core::sim::{generate, observe};
use msis_core::trainer::{repeat_experiment, write_training_log, ModelSpec, PreparedData, SeedRun};
use msis_core::{Error, Target};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::rundir::RunDir;

const EXAMPLES: &str = "examples.csv";
const COUNTERFACTUALS: &str = "counterfactuals.csv";

fn load_data(config: &ExperimentConfig) -> anyhow::Result<PreparedData> {
    let prepared = match &config.paths.data {
        Some(dir) => {
            let examples = load_csv(dir.join(EXAMPLES))
                .with_context(|| format!("loading {}", dir.join(EXAMPLES).display()))?;
            let cf_path = dir.join(COUNTERFACTUALS);
            let cf = if cf_path.exists() {
                Some(load_counterfactuals(&cf_path)?)
            } else {
                None
            };
            if let Some(e) = examples.first() {
                if e.features.len() != config.model.input_dim {
                    return Err(Error::config(
                        "model.input_dim",
                        format!("is {} but the data has {} features", config.model.input_dim, e.features.len()),
                    )
                    .into());
                }
            }
            PreparedData::new(&examples, config.sim.cutoff_day(), cf, config.split_seed)?
        }
        None => {
            eprintln!("simulating {} applicants (seed {})", config.sim.n, config.sim.seed);
            PreparedData::from_population(&generate(&config.sim)?, config.split_seed)?
        }
    };
    eprintln!(
        "split: {} train, {} validation, {} test",
        prepared.split.train.len(),
        prepared.split.validation.len(),
        prepared.split.test.len()
    );
    Ok(prepared)
}

fn scopes(data: &PreparedData) -> Vec<Scope> {
    if data.counterfactuals.is_some() {
        vec![Scope::ObservedOnly, Scope::FullPopulation]
    } else {
        vec![Scope::ObservedOnly]
    }
}

/// One line of `runs.csv`.
#[derive(Debug, Serialize, Deserialize)]
struct RunRow {
    model: String,
    seed: u64,
    scope: Scope,
    target: Target,
    auc: Option<f64>,
}

fn rows_of(results: &[RunResult]) -> Vec<RunRow> {
    results
        .iter()
        .flat_map(|r| {
            r.auc.iter().map(|(&target, &auc)| RunRow {
                model: r.model.clone(),
                seed: r.seed,
                scope: r.scope,
                target,
                auc,
            })
        })
        .collect()
}

fn write_runs(run: &mut RunDir, rel: &str, results: &[RunResult]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(run.file(rel))?;
    for row in rows_of(results) {
        w.serialize(row)?;
    }
    w.flush()?;
    run.register(rel);
    Ok(())
}

fn read_runs(path: &Path) -> anyhow::Result<Vec<RunResult>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut grouped: BTreeMap<(String, u64, Scope), eval::AucMap> = BTreeMap::new();
    let mut order = Vec::new();
    for row in reader.deserialize::<RunRow>() {
        let row = row.with_context(|| format!("parsing {}", path.display()))?;
        let key = (row.model, row.seed, row.scope);
        if !grouped.contains_key(&key) {
            order.push(key.clone());
        }
        grouped.entry(key).or_default().insert(row.target, row.auc);
    }
    Ok(order
        .into_iter()
        .map(|k| {
            let auc = grouped.remove(&k).unwrap_or_default();
            RunResult {
                model: k.0,
                seed: k.1,
                scope: k.2,
                auc,
            }
        })
        .collect())
}

fn write_report(run: &mut RunDir, stem: &str, report: &MetricsReport) -> anyhow::Result<String> {
    let mut csv = Vec::new();
    write_report_csv(report, &mut csv)?;
    run.write(&format!("{stem}.csv"), csv)?;
    let mut table = Vec::new();
    write_report_table(report, &mut table)?;
    run.write(&format!("{stem}.txt"), &table)?;
    Ok(String::from_utf8(table)?)
}

fn member_stem(spec: &ModelSpec, i: usize, seed: u64) -> String {
    if spec.members.len() == 1 {
        format!("{}/seed{seed}", spec.name)
    } else {
        let targets: Vec<&str> = spec.members[i].report.iter().map(|t| t.name()).collect();
        format!("{}/seed{seed}_{}", spec.name, targets.join("_"))
    }
}

/// Writes checkpoints and training logs of every member of every seed.
fn save_runs(run: &mut RunDir, spec: &ModelSpec, runs: &[SeedRun]) -> anyhow::Result<()> {
    for r in runs {
        for (i, m) in r.members.iter().enumerate() {
            let stem = member_stem(spec, i, r.seed);
            let ckpt = format!("checkpoints/{stem}.ckpt");
            fs::create_dir_all(run.file(&ckpt).parent().expect("nested path"))?;
            save_checkpoint(run.file(&ckpt), &spec.members[i].arch, &m.params)?;
            run.register(&ckpt);
            let mut log = Vec::new();
            write_training_log(&m.history, &mut log)?;
            run.write(&format!("logs/{stem}.csv"), log)?;
        }
    }
    Ok(())
}

fn results(spec_name: &str, runs: &[SeedRun], scopes: &[Scope]) -> Vec<RunResult> {
    scopes
        .iter()
        .flat_map(|&s| runs.iter().filter_map(move |r| r.result(spec_name, s)))
        .collect()
}

fn report_all(
    run: &mut RunDir,
    all: &[RunResult],
    scopes: &[Scope],
    baseline: &str,
    stem: &str,
) -> anyhow::Result<()> {
    for &scope in scopes {
        let subset: Vec<RunResult> = all.iter().filter(|r| r.scope == scope).cloned().collect();
        let report = eval::report(&subset, baseline)?;
        let table = write_report(run, &format!("{stem}_{}", scope.name()), &report)?;
        print!("{table}");
    }
    Ok(())
}

pub fn simulate(config: &ExperimentConfig, run_dir: Option<&Path>) -> anyhow::Result<ExitCode> {
    let population = generate(&config.sim)?;
    let mut run = RunDir::create(config, "simulate", vec![config.sim.seed], run_dir)?;
    save_csv(&observe(&population), run.file(EXAMPLES))?;
    run.register(EXAMPLES);
    save_counterfactuals(&CounterfactualTable::from(&population), run.file(COUNTERFACTUALS))?;
    run.register(COUNTERFACTUALS);
    let path = run.finish()?;
    println!("{}", path.display());
    Ok(ExitCode::SUCCESS)
}

enum ModelChoice {
    Msis,
    Baseline(BaselineKind),
}

fn model_spec(config: &ExperimentConfig, choice: &ModelChoice) -> anyhow::Result<ModelSpec> {
    Ok(match choice {
        ModelChoice::Msis => ModelSpec::single("msis", config.model.clone(), config.loss.clone()),
        ModelChoice::Baseline(kind) => {
            baseline_spec(*kind, &config.model, &config.loss, &config.baseline_hidden)?
        }
    })
}

pub fn train(config: &ExperimentConfig, models: &[String], run_dir: Option<&Path>) -> anyhow::Result<ExitCode> {
    let choices: Vec<ModelChoice> = if models.is_empty() {
        std::iter::once(ModelChoice::Msis)
            .chain(config.baselines.iter().map(|&k| ModelChoice::Baseline(k)))
            .collect()
    } else {
        models
            .iter()
            .map(|m| match m.as_str() {
                "msis" => Ok(ModelChoice::Msis),
                other => other
                    .parse::<BaselineKind>()
                    .map(ModelChoice::Baseline)
                    .map_err(|e| anyhow::anyhow!(e)),
            })
            .collect::<anyhow::Result<_>>()?
    };
    let data = load_data(config)?;
    let scopes = scopes(&data);
    let mut run = RunDir::create(config, "train", config.train.seeds.clone(), run_dir)?;
    let mut all = Vec::new();
    for choice in &choices {
        let spec = model_spec(config, choice)?;
        eprintln!("training {} over seeds {:?}", spec.name, config.train.seeds);
        let runs = repeat_experiment(&spec, &config.train, data.data())?;
        save_runs(&mut run, &spec, &runs)?;
        all.extend(results(&spec.name, &runs, &scopes));
    }
    write_runs(&mut run, "runs.csv", &all)?;
    report_all(&mut run, &all, &scopes, &config.baseline_name(), "report")?;
    println!("{}", run.finish()?.display());
    Ok(ExitCode::SUCCESS)
}

pub fn evaluate(
    config: &ExperimentConfig,
    checkpoints: &[PathBuf],
    run_dir: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let data = load_data(config)?;
    let mut run = RunDir::create(config, "evaluate", Vec::new(), run_dir)?;
    let mut w = csv::Writer::from_path(run.file("metrics.csv"))?;
    w.write_record(["checkpoint", "scope", "target", "auc"])?;
    for path in checkpoints {
        let (arch, params) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        if arch.input_dim() != config.model.input_dim {
            bail!("{} expects {} features", path.display(), arch.input_dim());
        }
        for scope in scopes(&data) {
            let aucs = eval::evaluate(&arch, &params, &data.split.test, scope, data.counterfactuals.as_ref())?;
            for (t, a) in aucs {
                let shown = a.map(|x| x.to_string()).unwrap_or_default();
                println!("{}\t{}\t{t}\t{shown}", path.display(), scope.name());
                w.write_record([path.display().to_string(), scope.name().into(), t.to_string(), shown])?;
            }
        }
    }
    w.flush()?;
    run.register("metrics.csv");
    println!("{}", run.finish()?.display());
    Ok(ExitCode::SUCCESS)
}

fn gb_mean(r: &RunResult) -> Option<f64> {
    eval::mean_auc(&r.auc, &Target::GB)
}

pub fn ablate(config: &ExperimentConfig, variants: &[Variant], run_dir: Option<&Path>) -> anyhow::Result<ExitCode> {
    let mut variants: Vec<Variant> = if variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        variants.to_vec()
    };
    if !variants.contains(&Variant::Full) {
        variants.insert(0, Variant::Full);
    }
    let data = load_data(config)?;
    let scopes = scopes(&data);
    let scope = *scopes.last().expect("at least one scope");
    let mut run = RunDir::create(config, "ablate", config.train.seeds.clone(), run_dir)?;
    let mut all = Vec::new();
    let mut per_variant = Vec::new();
    for &variant in &variants {
        eprintln!("ablation {variant}");
        let spec = variant.model_spec(&config.model, &config.loss);
        let outcome = run_ablation(AblationSpec { variant }, &config.model, &config.loss, &config.train, data.data())?;
        save_runs(&mut run, &spec, &outcome.runs)?;
        all.extend(results(&outcome.model, &outcome.runs, &scopes));
        per_variant.push((variant, outcome.results(scope)));
    }
    write_runs(&mut run, "runs.csv", &all)?;
    let full_name = Variant::Full.model_spec(&config.model, &config.loss).name;
    report_all(&mut run, &all, &scopes, &full_name, "ablation")?;

    // Seeds on which the full model's mean GB AUC is at least the variant's.
    let full: BTreeMap<u64, f64> = per_variant[0]
        .1
        .iter()
        .filter_map(|r| gb_mean(r).map(|m| (r.seed, m)))
        .collect();
    let mut wins = String::from("variant,seeds,full_at_least_variant,mean_gb_auc\n");
    for (variant, res) in &per_variant {
        let vals: Vec<(u64, f64)> = res.iter().filter_map(|r| gb_mean(r).map(|m| (r.seed, m))).collect();
        let count = vals.iter().filter(|(s, v)| full.get(s).is_some_and(|f| f >= v)).count();
        let mean = summarize(&vals.iter().map(|v| v.1).collect::<Vec<_>>()).map(|s| s.mean);
        wins.push_str(&format!(
            "{variant},{},{count},{}\n",
            vals.len(),
            mean.map(|m| m.to_string()).unwrap_or_default()
        ));
    }
    run.write("ablation_wins.csv", wins)?;

    let mut targets = vec![None];
    targets.extend(Target::GB.map(Some));
    for target in targets {
        let mut comments = vec![format!("scope {}", scope.name())];
        let mut points = Vec::new();
        for (i, (variant, res)) in per_variant.iter().enumerate() {
            let vals: Vec<f64> = res
                .iter()
                .filter_map(|r| match target {
                    Some(t) => r.auc.get(&t).copied().flatten(),
                    None => gb_mean(r),
                })
                .collect();
            if let Some(s) = summarize(&vals) {
                comments.push(format!("{i} {variant}"));
                points.push((i as f64, s.mean));
            }
        }
        let name = target.map_or("gb_mean".to_string(), |t| t.to_string());
        let mut buf = Vec::new();
        write_gnuplot(&mut buf, &comments, &points)?;
        run.write(&format!("ablation_{name}.dat"), buf)?;
    }
    println!("{}", run.finish()?.display());
    Ok(ExitCode::SUCCESS)
}

pub fn sweep(config: &ExperimentConfig, over_d: bool, run_dir: Option<&Path>) -> anyhow::Result<ExitCode> {
    let param = if over_d { "d" } else { "gamma" };
    let values: Vec<f64> = if over_d {
        config.sweep.d.iter().map(|&d| d as f64).collect()
    } else {
        config.sweep.gamma.clone()
    };
    let data = load_data(config)?;
    let scope = *scopes(&data).last().expect("at least one scope");
    let mut run = RunDir::create(config, &format!("sweep-{param}"), config.train.seeds.clone(), run_dir)?;
    let mut all = Vec::new();
    let mut table = format!("{param},runs,mean_gb_auc,std_gb_auc,mob1,mob3,mob6\n");
    let mut points = Vec::new();
    for &v in &values {
        let (model, loss) = if over_d {
            let mut m = config.model.clone();
            m.corridor_dim = v as usize;
            (m, config.loss.clone())
        } else {
            (config.model.clone(), config.loss.with_gamma(v))
        };
        let name = format!("msis_{param}={v}");
        eprintln!("sweep {name}");
        let spec = ModelSpec::single(&name, model, loss);
        let runs = repeat_experiment(&spec, &config.train, data.data())?;
        let res = results(&name, &runs, &[scope]);
        let gb: Vec<f64> = res.iter().filter_map(gb_mean).collect();
        let per_target: Vec<String> = Target::GB
            .iter()
            .map(|t| {
                let vals: Vec<f64> = res.iter().filter_map(|r| r.auc.get(t).copied().flatten()).collect();
                summarize(&vals).map(|s| s.mean.to_string()).unwrap_or_default()
            })
            .collect();
        let s = summarize(&gb);
        table.push_str(&format!(
            "{v},{},{},{},{}\n",
            gb.len(),
            s.map(|s| s.mean.to_string()).unwrap_or_default(),
            s.map(|s| s.std.to_string()).unwrap_or_default(),
            per_target.join(",")
        ));
        if let Some(s) = s {
            points.push((v, s.mean));
        }
        all.extend(res);
    }
    write_runs(&mut run, "runs.csv", &all)?;
    run.write(&format!("sweep_{param}.csv"), &table)?;
    let mut buf = Vec::new();
    write_gnuplot(&mut buf, &[format!("{param} mean_gb_auc ({})", scope.name())], &points)?;
    run.write(&format!("sweep_{param}.dat"), buf)?;
    print!("{table}");
    println!("{}", run.finish()?.display());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(config: &ExperimentConfig, run_dir: Option<&Path>) -> anyhow::Result<ExitCode> {
    let gc = &config.gradcheck;
    let data = load_data(config)?;
    let train = &data.split.train;
    if train.len() < gc.batch_size {
        bail!("{} training rows, gradient check needs {}", train.len(), gc.batch_size);
    }
    let arch = Architecture::from(config.model.clone());
    let mut run = RunDir::create(config, "gradcheck", gc.seeds.clone(), run_dir)?;
    let mut csv = String::from("seed,worst_relative_error,offending,checked,tolerance,passed\n");
    let mut ok = true;
    for &seed in &gc.seeds {
        let rows = epoch_order(train.len(), seed, 0);
        let batch = Batch::<f64>::from_examples(rows[..gc.batch_size].iter().map(|&i| &train[i]));
        let params = arch.init_params::<f64>(seed)?;
        let report = check_gradients(&arch, &params, &batch, &config.loss, gc.step, gc.tolerance)?;
        let passed = report.passed();
        ok &= passed;
        println!(
            "seed {seed}: worst relative error {:.3e} at {} over {} parameters: {}",
            report.worst_relative_error,
            report.offending.as_deref().unwrap_or("-"),
            report.checked,
            if passed { "ok" } else { "FAILED" }
        );
        csv.push_str(&format!(
            "{seed},{},{},{},{},{}\n",
            report.worst_relative_error,
            report.offending.unwrap_or_default(),
            report.checked,
            report.tolerance,
            passed
        ));
    }
    run.write("gradcheck.csv", csv)?;
    println!("{}", run.finish()?.display());
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

pub fn report(
    config: &ExperimentConfig,
    inputs: &[PathBuf],
    baseline: Option<String>,
    scope: Option<Scope>,
    run_dir: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let mut all = Vec::new();
    for path in inputs {
        all.extend(read_runs(path)?);
    }
    let scope = scope.unwrap_or(if all.iter().any(|r| r.scope == Scope::FullPopulation) {
        Scope::FullPopulation
    } else {
        Scope::ObservedOnly
    });
    let selected: Vec<RunResult> = all.into_iter().filter(|r| r.scope == scope).collect();
    if selected.is_empty() {
        bail!("no {} results in the inputs", scope.name());
    }
    let baseline = baseline.unwrap_or_else(|| config.baseline_name());
    let report = eval::report(&selected, &baseline)?;
    let mut run = RunDir::create(config, "report", Vec::new(), run_dir)?;
    let table = write_report(&mut run, "report", &report)?;
    print!("{table}");
    println!("{}", run.finish()?.display());
    Ok(ExitCode::SUCCESS)
}
