//! Reference models trained with the same data, seeds and protocol as MSIS.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{MlpConfig, MsisConfig};
use crate::task::{Stage, Target};
use crate::trainer::{Member, ModelSpec, TrainConfig, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// MLP per GB label, fit to the rows where that label is observed.
    SingleTask,
    /// As `SingleTask`, plus the entropy penalty on the other rows.
    SingleTaskEntropy,
    /// Shared bottom with six towers and no corridor.
    FlatMultitask,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [
        BaselineKind::SingleTask,
        BaselineKind::SingleTaskEntropy,
        BaselineKind::FlatMultitask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::SingleTask => "single_task",
            BaselineKind::SingleTaskEntropy => "single_task_entropy",
            BaselineKind::FlatMultitask => "flat_multitask",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.replace('-', "_");
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown baseline `{s}`"))
    }
}

/// Member of a baseline for one target. `target` is ignored by
/// `FlatMultitask`, which covers all six.
pub fn baseline_member(
    kind: BaselineKind,
    target: Target,
    base: &MsisConfig,
    loss: &LossConfig,
    hidden: &[usize],
) -> Result<Member> {
    if kind != BaselineKind::FlatMultitask && target.stage() != Stage::Gb {
        return Err(Error::config(
            "baselines.target",
            format!("single-task baselines take a GB target, got {target}"),
        ));
    }
    let mlp = |gamma: f64| {
        let mut l = loss.supervised_only();
        if gamma > 0.0 {
            l.gamma.insert(target, gamma);
        }
        let mut m = Member::new(
            MlpConfig {
                input_dim: base.input_dim,
                hidden: hidden.to_vec(),
                target,
            },
            l,
        );
        m.labeled_only = gamma == 0.0;
        m
    };
    Ok(match kind {
        BaselineKind::SingleTask => mlp(0.0),
        BaselineKind::SingleTaskEntropy => mlp(loss.gamma(target)),
        BaselineKind::FlatMultitask => Member::new(base.without_corridor(), loss.clone()),
    })
}

/// Experiment spec: one MLP per GB label, or one flat network.
pub fn baseline_spec(
    kind: BaselineKind,
    base: &MsisConfig,
    loss: &LossConfig,
    hidden: &[usize],
) -> Result<ModelSpec> {
    let members = match kind {
        BaselineKind::FlatMultitask => {
            vec![baseline_member(kind, Target::Mob6, base, loss, hidden)?]
        }
        _ => Target::GB
            .into_iter()
            .map(|t| baseline_member(kind, t, base, loss, hidden))
            .collect::<Result<_>>()?,
    };
    Ok(ModelSpec {
        name: kind.name().to_string(),
        members,
    })
}

/// Trains one baseline network.
#[allow(clippy::too_many_arguments)]
pub fn train_baseline(
    kind: BaselineKind,
    target: Target,
    base: &MsisConfig,
    loss: &LossConfig,
    hidden: &[usize],
    config: &TrainConfig,
    train: &[Example],
    validation: &[Example],
    seed: u64,
) -> Result<TrainOutcome> {
    baseline_member(kind, target, base, loss, hidden)?.train(config, train, validation, seed)
}
