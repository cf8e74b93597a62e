//! Mini-batch Adam training with early stopping, and seeded repeats.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{batches, split_oot, CounterfactualTable, Example, Split, Standardizer};
use crate::error::{Error, Result};
use crate::eval::{self, AucMap, RunResult, Scope};
use crate::loss::{total_loss, LossConfig, LossValues};
use crate::model::Architecture;
use crate::numerics::{binary_entropy, Graph, ParamStore};
use crate::sim::{observe, Population};
use crate::task::{Stage, Target};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// `false` trains for all epochs and returns the last parameters.
    pub early_stopping: bool,
    /// Record the mean prediction entropy on unlabeled training rows after
    /// every epoch. Costs one extra forward pass over the training set.
    pub track_entropy: bool,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: 5,
            early_stopping: true,
            track_entropy: true,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: &str| Err(Error::config(format!("train.{f}"), m));
        if self.epochs == 0 {
            return err("epochs", "must be positive");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return err("learning_rate", "must be a positive number");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return err("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return err("beta2", "must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return err("epsilon", "must be positive");
        }
        if self.early_stopping && self.patience >= self.epochs {
            return err("patience", "must be smaller than epochs");
        }
        if self.patience == 0 {
            return err("patience", "must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Batch-size-weighted means over the epoch; counts are totals.
    pub loss: LossValues,
    pub val_auc: AucMap,
    pub unlabeled_entropy: BTreeMap<Target, Option<f64>>,
    /// Early-stopping metric: mean validation AUC over the GB targets.
    pub selection: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn record(&self, epoch: usize) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.epoch == epoch)
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.record(self.best_epoch)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParamStore<f64>,
    pub history: TrainHistory,
}

/// Targets whose validation AUC drives early stopping.
pub fn selection_targets(arch: &Architecture) -> Vec<Target> {
    let all = arch.targets();
    let gb: Vec<Target> = all.iter().copied().filter(|t| t.stage() == Stage::Gb).collect();
    if gb.is_empty() {
        all
    } else {
        gb
    }
}

struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(params: &ParamStore<f64>) -> Self {
        let zeros = || params.iter().map(|(n, t)| (n.to_string(), vec![0.0; t.len()])).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    fn update(
        &mut self,
        params: &mut ParamStore<f64>,
        grads: &BTreeMap<String, crate::Tensor>,
        c: &TrainConfig,
    ) {
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                *w -= c.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.epsilon);
            }
        }
    }
}

#[derive(Default)]
struct LossAccumulator {
    rows: usize,
    sum: LossValues,
}

impl LossAccumulator {
    fn add(&mut self, v: &LossValues, rows: usize) {
        let w = rows as f64;
        self.rows += rows;
        self.sum.total += w * v.total;
        for (k, x) in &v.stages {
            *self.sum.stages.entry(*k).or_default() += w * x;
        }
        for (k, x) in &v.supervised {
            *self.sum.supervised.entry(*k).or_default() += w * x;
        }
        for (k, x) in &v.entropy {
            *self.sum.entropy.entry(*k).or_default() += w * x;
        }
        for (k, x) in &v.labeled {
            *self.sum.labeled.entry(*k).or_default() += x;
        }
        for (k, x) in &v.unlabeled {
            *self.sum.unlabeled.entry(*k).or_default() += x;
        }
    }

    fn finish(mut self) -> LossValues {
        let n = self.rows.max(1) as f64;
        self.sum.total /= n;
        self.sum.stages.values_mut().for_each(|x| *x /= n);
        self.sum.supervised.values_mut().for_each(|x| *x /= n);
        self.sum.entropy.values_mut().for_each(|x| *x /= n);
        self.sum
    }
}

fn mean_unlabeled_entropy(
    examples: &[Example],
    scores: &BTreeMap<Target, Vec<f64>>,
) -> BTreeMap<Target, Option<f64>> {
    scores
        .iter()
        .map(|(&t, s)| {
            let h: Vec<f64> = examples
                .iter()
                .zip(s)
                .filter(|(e, _)| e.label(t).is_none())
                .map(|(_, &p)| binary_entropy(p))
                .collect();
            let mean = (!h.is_empty()).then(|| h.iter().sum::<f64>() / h.len() as f64);
            (t, mean)
        })
        .collect()
}

/// Trains one model. Initialization, batch order and updates are all
/// functions of `seed`, so equal inputs give bit-identical results.
pub fn train_run(
    arch: &Architecture,
    loss: &LossConfig,
    config: &TrainConfig,
    train: &[Example],
    validation: &[Example],
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    loss.validate()?;
    if train.is_empty() {
        return Err(Error::config("data.train", "no training examples"));
    }
    let targets = arch.targets();
    if targets.iter().all(|&t| train.iter().all(|e| e.label(t).is_none())) {
        let names: Vec<&str> = targets.iter().map(|t| t.name()).collect();
        return Err(Error::config(
            "data.train",
            format!("no labeled rows for {}", names.join(", ")),
        ));
    }
    let mut params = arch.init_params::<f64>(seed)?;
    let mut adam = Adam::new(&params);
    let selection = selection_targets(arch);
    let train_x = if config.track_entropy {
        Some(eval::features_of(train)?)
    } else {
        None
    };
    let val_x = eval::features_of(validation)?;

    let mut history = TrainHistory::default();
    let mut best: Option<(Option<f64>, ParamStore<f64>)> = None;
    for epoch in 1..=config.epochs {
        let mut acc = LossAccumulator::default();
        // Batch order uses stream `epoch`; initialization used stream 0.
        for (b, batch) in batches::<f64>(train, config.batch_size, seed, epoch as u64).enumerate() {
            let mut g = Graph::new();
            let binding = params.bind(&mut g);
            let x = g.constant(batch.features.clone());
            let out = arch.forward_graph(&mut g, &binding, x)?;
            let breakdown = total_loss(&mut g, &out, &batch, loss)?;
            let values = breakdown.values(&g);
            if !values.total.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("loss {values:?}"),
                });
            }
            g.backward(breakdown.total)?;
            let grads = binding.gradients(&g);
            if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("gradient of {name}"),
                });
            }
            adam.update(&mut params, &grads, config);
            acc.add(&values, batch.len());
        }

        let val_auc = if validation.is_empty() {
            AucMap::new()
        } else {
            let scores = arch.predict(&params, &val_x)?;
            eval::score_auc(validation, &scores, Scope::ObservedOnly, None)?
        };
        let unlabeled_entropy = match &train_x {
            Some(x) => mean_unlabeled_entropy(train, &arch.predict(&params, x)?),
            None => BTreeMap::new(),
        };
        let metric = eval::mean_auc(&val_auc, &selection);
        history.epochs.push(EpochRecord {
            epoch,
            loss: acc.finish(),
            val_auc,
            unlabeled_entropy,
            selection: metric,
        });

        if !config.early_stopping {
            history.best_epoch = epoch;
            continue;
        }
        let improved = match (&best, metric) {
            (None, _) => true,
            (Some((Some(b), _)), Some(m)) => m > *b,
            (Some((None, _)), Some(_)) => true,
            (Some(_), None) => false,
        };
        if improved {
            best = Some((metric, params.clone()));
            history.best_epoch = epoch;
        } else if epoch - history.best_epoch >= config.patience {
            history.stopped_early = true;
            break;
        }
    }
    if let Some((_, p)) = best {
        params = p;
    }
    Ok(TrainOutcome { params, history })
}

/// One trained network inside an experiment and the targets it reports.
#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub arch: Architecture,
    pub loss: LossConfig,
    pub report: Vec<Target>,
    /// Train only on rows where every reported target is observed.
    pub labeled_only: bool,
}

impl Member {
    pub fn new(arch: impl Into<Architecture>, loss: LossConfig) -> Self {
        let arch = arch.into();
        let report = arch.targets();
        Self {
            arch,
            loss,
            report,
            labeled_only: false,
        }
    }

    pub fn train(
        &self,
        config: &TrainConfig,
        train: &[Example],
        validation: &[Example],
        seed: u64,
    ) -> Result<TrainOutcome> {
        if !self.labeled_only {
            return train_run(&self.arch, &self.loss, config, train, validation, seed);
        }
        let labeled: Vec<Example> = train
            .iter()
            .filter(|e| self.report.iter().all(|&t| e.label(t).is_some()))
            .cloned()
            .collect();
        train_run(&self.arch, &self.loss, config, &labeled, validation, seed)
    }
}

/// A named model; most have one member, per-label models have several
/// whose reported targets are merged.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub members: Vec<Member>,
}

impl ModelSpec {
    pub fn single(name: impl Into<String>, arch: impl Into<Architecture>, loss: LossConfig) -> Self {
        Self {
            name: name.into(),
            members: vec![Member::new(arch, loss)],
        }
    }
}

/// Standardized splits plus the optional counterfactual table.
#[derive(Clone, Copy)]
pub struct ExperimentData<'a> {
    pub train: &'a [Example],
    pub validation: &'a [Example],
    pub test: &'a [Example],
    pub counterfactuals: Option<&'a CounterfactualTable>,
}

/// Owned, standardized splits.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub split: Split,
    pub standardizer: Standardizer,
    pub counterfactuals: Option<CounterfactualTable>,
}

impl PreparedData {
    /// Out-of-time split at `cutoff`, then standardization fitted on train.
    pub fn new(
        examples: &[Example],
        cutoff: u32,
        counterfactuals: Option<CounterfactualTable>,
        split_seed: u64,
    ) -> Result<Self> {
        let raw = split_oot(examples, cutoff, split_seed)?;
        let (standardizer, split) = Standardizer::fit_split(&raw)?;
        Ok(Self {
            split,
            standardizer,
            counterfactuals,
        })
    }

    pub fn from_population(population: &Population, split_seed: u64) -> Result<Self> {
        Self::new(
            &observe(population),
            population.cutoff_day,
            Some(CounterfactualTable::from(population)),
            split_seed,
        )
    }

    pub fn data(&self) -> ExperimentData<'_> {
        ExperimentData {
            train: &self.split.train,
            validation: &self.split.validation,
            test: &self.split.test,
            counterfactuals: self.counterfactuals.as_ref(),
        }
    }
}

pub struct MemberRun {
    pub params: ParamStore<f64>,
    pub history: TrainHistory,
}

pub struct SeedRun {
    pub seed: u64,
    pub members: Vec<MemberRun>,
    pub observed: AucMap,
    /// Present when counterfactuals are available.
    pub full: Option<AucMap>,
}

impl SeedRun {
    pub fn result(&self, model: &str, scope: Scope) -> Option<RunResult> {
        let auc = match scope {
            Scope::ObservedOnly => self.observed.clone(),
            Scope::FullPopulation => self.full.clone()?,
        };
        Some(RunResult {
            model: model.to_string(),
            seed: self.seed,
            scope,
            auc,
        })
    }
}

fn run_seed(spec: &ModelSpec, config: &TrainConfig, data: ExperimentData, seed: u64) -> Result<SeedRun> {
    let mut run = SeedRun {
        seed,
        members: Vec::new(),
        observed: AucMap::new(),
        full: data.counterfactuals.map(|_| AucMap::new()),
    };
    let test_x = eval::features_of(data.test)?;
    for m in &spec.members {
        let out = m.train(config, data.train, data.validation, seed)?;
        let scores: BTreeMap<Target, Vec<f64>> = m
            .arch
            .predict(&out.params, &test_x)?
            .into_iter()
            .filter(|(t, _)| m.report.contains(t))
            .collect();
        run.observed
            .extend(eval::score_auc(data.test, &scores, Scope::ObservedOnly, None)?);
        if let Some(full) = run.full.as_mut() {
            full.extend(eval::score_auc(
                data.test,
                &scores,
                Scope::FullPopulation,
                data.counterfactuals,
            )?);
        }
        run.members.push(MemberRun {
            params: out.params,
            history: out.history,
        });
    }
    Ok(run)
}

/// Trains and tests `spec` once per seed in `config.seeds`.
pub fn repeat_experiment(
    spec: &ModelSpec,
    config: &TrainConfig,
    data: ExperimentData,
) -> Result<Vec<SeedRun>> {
    if config.seeds.len() < 2 {
        return Err(Error::config("train.seeds", "needs at least 2 seeds"));
    }
    config
        .seeds
        .iter()
        .map(|&seed| {
            run_seed(spec, config, data, seed).map_err(|e| Error::Seed {
                seed,
                source: Box::new(e),
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per (epoch, target).
pub fn write_training_log<W: Write>(history: &TrainHistory, mut w: W) -> Result<()> {
    writeln!(
        w,
        "epoch,target,supervised,entropy,labeled,unlabeled,total,val_auc,unlabeled_entropy,selection,best"
    )?;
    for r in &history.epochs {
        for (t, sup) in &r.loss.supervised {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                t,
                sup,
                r.loss.entropy.get(t).copied().unwrap_or(0.0),
                r.loss.labeled.get(t).copied().unwrap_or(0),
                r.loss.unlabeled.get(t).copied().unwrap_or(0),
                r.loss.total,
                opt(r.val_auc.get(t).copied().flatten()),
                opt(r.unlabeled_entropy.get(t).copied().flatten()),
                opt(r.selection),
                u8::from(r.epoch == history.best_epoch),
            )?;
        }
    }
    Ok(())
}
