//! Training objective: masked cross-entropy per target, an entropy penalty
//! on unlabeled rows, and a stage-weighted total.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::model::{Architecture, GraphOutputs};
use crate::numerics::{finite_diff_check, GradCheckReport, Graph, ParamStore, Reduction, Scalar, Var};
use crate::task::{Stage, Target};

pub const DEFAULT_GAMMA: f64 = 6e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageWeights {
    pub ar: f64,
    pub ws: f64,
    pub gb: f64,
}

impl Default for StageWeights {
    fn default() -> Self {
        Self {
            ar: 1.0,
            ws: 1.0,
            gb: 1.0,
        }
    }
}

impl StageWeights {
    pub fn get(&self, s: Stage) -> f64 {
        match s {
            Stage::Ar => self.ar,
            Stage::Ws => self.ws,
            Stage::Gb => self.gb,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub stage_weights: StageWeights,
    /// Entropy weight per target; targets not listed get 0.
    pub gamma: BTreeMap<Target, f64>,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            stage_weights: StageWeights::default(),
            gamma: Target::ALL
                .into_iter()
                .filter(|t| t.stage() != Stage::Ar)
                .map(|t| (t, DEFAULT_GAMMA))
                .collect(),
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn gamma(&self, t: Target) -> f64 {
        self.gamma.get(&t).copied().unwrap_or(0.0)
    }

    /// Same objective without the entropy terms.
    pub fn supervised_only(&self) -> Self {
        Self {
            gamma: BTreeMap::new(),
            ..self.clone()
        }
    }

    /// Sets every non-AR target's weight to `gamma`.
    pub fn with_gamma(&self, gamma: f64) -> Self {
        let mut c = self.clone();
        for t in Target::ALL.into_iter().filter(|t| t.stage() != Stage::Ar) {
            c.gamma.insert(t, gamma);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        for s in Stage::ALL {
            let w = self.stage_weights.get(s);
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(
                    format!("loss.stage_weights.{s}"),
                    format!("must be a finite non-negative number, got {w}"),
                ));
            }
        }
        for (t, &g) in &self.gamma {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::config(
                    format!("loss.gamma.{t}"),
                    format!("must be a finite non-negative number, got {g}"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TargetTerms {
    pub target: Target,
    pub supervised: Var,
    pub entropy: Var,
    pub gamma: f64,
    pub labeled: usize,
    pub unlabeled: usize,
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub targets: Vec<TargetTerms>,
    pub stages: Vec<(Stage, Var)>,
    pub total: Var,
}

/// Plain values of a [`LossBreakdown`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub stages: BTreeMap<Stage, f64>,
    pub supervised: BTreeMap<Target, f64>,
    pub entropy: BTreeMap<Target, f64>,
    pub labeled: BTreeMap<Target, usize>,
    pub unlabeled: BTreeMap<Target, usize>,
}

impl LossBreakdown {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossValues {
        let v = |x: Var| g.value(x).item().as_f64();
        LossValues {
            total: v(self.total),
            stages: self.stages.iter().map(|&(s, x)| (s, v(x))).collect(),
            supervised: self.targets.iter().map(|t| (t.target, v(t.supervised))).collect(),
            entropy: self.targets.iter().map(|t| (t.target, v(t.entropy))).collect(),
            labeled: self.targets.iter().map(|t| (t.target, t.labeled)).collect(),
            unlabeled: self.targets.iter().map(|t| (t.target, t.unlabeled)).collect(),
        }
    }
}

/// Records the total objective for the model outputs on `batch`.
///
/// Within a stage, targets are averaged with equal weight; stages are then
/// combined with `config.stage_weights`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    outputs: &GraphOutputs,
    batch: &Batch<T>,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let mut targets = Vec::with_capacity(outputs.probs.len());
    let mut stages = Vec::new();
    let mut stage_terms = Vec::new();
    for stage in Stage::ALL {
        let mut terms = Vec::new();
        let in_stage: Vec<_> = outputs.probs.iter().filter(|(t, _)| t.stage() == stage).collect();
        let m = T::of(in_stage.len() as f64);
        for &&(t, p) in &in_stage {
            let mask = batch.mask(t);
            let supervised = g.masked_bce(p, batch.labels(t), mask)?;
            let entropy = g.masked_entropy(p, mask, config.reduction)?;
            let gamma = config.gamma(t);
            terms.push((supervised, T::one() / m));
            terms.push((entropy, T::of(gamma) / m));
            let labeled = mask.iter().filter(|&&b| b).count();
            targets.push(TargetTerms {
                target: t,
                supervised,
                entropy,
                gamma,
                labeled,
                unlabeled: mask.len() - labeled,
            });
        }
        if terms.is_empty() {
            continue;
        }
        let subtotal = g.weighted_sum(&terms)?;
        stages.push((stage, subtotal));
        stage_terms.push((subtotal, T::of(config.stage_weights.get(stage))));
    }
    let total = g.weighted_sum(&stage_terms)?;
    Ok(LossBreakdown {
        targets,
        stages,
        total,
    })
}

/// Central-difference check of the full objective's gradient with respect
/// to every parameter.
pub fn check_gradients(
    arch: &Architecture,
    params: &ParamStore<f64>,
    batch: &Batch<f64>,
    config: &LossConfig,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    finite_diff_check(
        params,
        |g, b| {
            let x = g.constant(batch.features.clone());
            let out = arch.forward_graph(g, b, x)?;
            Ok(total_loss(g, &out, batch, config)?.total)
        },
        step,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Example;
    use crate::model::MsisConfig;
    use crate::numerics::Tensor2D;

    fn example(id: u64, labels: [Option<bool>; 6]) -> Example {
        Example {
            id,
            timestamp: 0,
            features: (0..32).map(|j| ((id * 32 + j) as f64 * 0.41).sin()).collect(),
            labels,
        }
    }

    fn full(y: bool) -> [Option<bool>; 6] {
        [Some(y); 6]
    }

    fn rejected() -> [Option<bool>; 6] {
        [Some(false), None, None, None, None, None]
    }

    fn run(
        examples: &[Example],
        config: &LossConfig,
        params: &crate::Params,
    ) -> (LossValues, BTreeMap<Target, Vec<f64>>) {
        let arch: Architecture = MsisConfig::default().into();
        let batch = Batch::<f64>::from_examples(examples);
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let x = g.constant(batch.features.clone());
        let out = arch.forward_graph(&mut g, &b, x).unwrap();
        let loss = total_loss(&mut g, &out, &batch, config).unwrap();
        let probs = out
            .probs
            .iter()
            .map(|&(t, v)| (t, g.value(v).data().to_vec()))
            .collect();
        (loss.values(&g), probs)
    }

    fn params() -> crate::Params {
        Architecture::from(MsisConfig::default()).init_params(21).unwrap()
    }

    fn bce(p: f64, y: bool) -> f64 {
        if y {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        }
    }

    #[test]
    fn two_example_total_matches_hand_computation() {
        let examples = [example(0, full(true)), example(1, full(false))];
        let config = LossConfig::default().supervised_only();
        let (values, probs) = run(&examples, &config, &params());
        let mean2 = |t: Target| (bce(probs[&t][0], true) + bce(probs[&t][1], false)) / 2.0;
        let ar = mean2(Target::Credit);
        let ws = (mean2(Target::Draw30) + mean2(Target::Draw90)) / 2.0;
        let gb = (mean2(Target::Mob1) + mean2(Target::Mob3) + mean2(Target::Mob6)) / 3.0;
        assert!((values.total - (ar + ws + gb)).abs() < 1e-12);
        assert!((values.stages[&Stage::Ws] - ws).abs() < 1e-12);
    }

    #[test]
    fn total_is_weighted_sum_of_terms() {
        let examples = [
            example(0, full(true)),
            example(1, rejected()),
            example(2, [Some(true), Some(false), Some(false), None, None, None]),
        ];
        let config = LossConfig {
            stage_weights: StageWeights {
                ar: 0.5,
                ws: 2.0,
                gb: 1.5,
            },
            reduction: Reduction::Sum,
            ..LossConfig::default().with_gamma(0.3)
        };
        let (v, _) = run(&examples, &config, &params());
        let mut expected = 0.0;
        for s in Stage::ALL {
            let ts = s.targets();
            let sub: f64 = ts
                .iter()
                .map(|&t| v.supervised[&t] + config.gamma(t) * v.entropy[&t])
                .sum::<f64>()
                / ts.len() as f64;
            expected += config.stage_weights.get(s) * sub;
        }
        assert!((v.total - expected).abs() < 1e-10);
        assert_eq!(v.labeled[&Target::Mob1], 1);
        assert_eq!(v.unlabeled[&Target::Draw30], 1);
    }

    #[test]
    fn zero_gb_weight_ignores_gb_heads() {
        let examples = [example(0, full(true)), example(1, full(false))];
        let config = LossConfig {
            stage_weights: StageWeights {
                gb: 0.0,
                ..StageWeights::default()
            },
            ..LossConfig::default()
        };
        let p = params();
        let (base, _) = run(&examples, &config, &p);
        let mut q = p.clone();
        for t in Target::GB {
            q.get_mut(&format!("gb.{t}.head.weight"))
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|w| *w += 1.0);
        }
        let (moved, _) = run(&examples, &config, &q);
        assert_eq!(base.total, moved.total);
    }

    #[test]
    fn rejected_batch_keeps_only_ar_and_entropy() {
        let examples = [example(0, rejected()), example(1, rejected())];
        let config = LossConfig::default();
        let (v, probs) = run(&examples, &config, &params());
        for t in &Target::ALL[1..] {
            assert_eq!(v.supervised[t], 0.0);
        }
        let ar = bce(probs[&Target::Credit][0], false) / 2.0 + bce(probs[&Target::Credit][1], false) / 2.0;
        let mut expected = ar;
        for s in [Stage::Ws, Stage::Gb] {
            let ts = s.targets();
            expected += ts.iter().map(|&t| config.gamma(t) * v.entropy[&t]).sum::<f64>()
                / ts.len() as f64;
        }
        assert!((v.total - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_gamma_is_the_supervised_objective() {
        let examples = [example(0, full(true)), example(1, rejected())];
        let p = params();
        let (a, _) = run(&examples, &LossConfig::default().with_gamma(0.0), &p);
        let (b, _) = run(&examples, &LossConfig::default().supervised_only(), &p);
        assert_eq!(a.total, b.total);
        let sup: f64 = Stage::ALL.iter().map(|s| b.stages[s]).sum();
        assert_eq!(a.total, sup);
    }

    #[test]
    fn entropy_reductions() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor2D::column_vector(vec![0.5, 0.5, 0.5]));
        let mask = [false; 3];
        let s = g.masked_entropy(p, &mask, Reduction::Sum).unwrap();
        let m = g.masked_entropy(p, &mask, Reduction::Mean).unwrap();
        let ln2 = 2f64.ln();
        assert!((g.value(s).item() - 3.0 * ln2).abs() < 1e-12);
        assert!((g.value(m).item() - ln2).abs() < 1e-12);
    }

    #[test]
    fn negative_weights_are_rejected() {
        let mut c = LossConfig::default();
        c.stage_weights.ws = -1.0;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("loss.stage_weights.ws"), "{err}");
        let mut c = LossConfig::default();
        c.gamma.insert(Target::Mob1, f64::NAN);
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = LossConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"mob6\":0.0006"), "{text}");
        assert_eq!(serde_json::from_str::<LossConfig>(&text).unwrap(), c);
    }
}
