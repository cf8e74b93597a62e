use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{RunResult, Scope};
use crate::error::Result;
use crate::loss::LossConfig;
use crate::model::MsisConfig;
use crate::task::{Stage, Target};
use crate::trainer::{repeat_experiment, ExperimentData, Member, ModelSpec, SeedRun, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// One target per stage; one network per GB label.
    SingleIntraTarget,
    /// All entropy weights set to zero.
    NoSemiSupervised,
    /// WS stage removed; the corridor runs AR → GB.
    OneAuxiliaryStage,
    /// Flat multi-task network.
    NoCorridor,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::SingleIntraTarget,
        Variant::NoSemiSupervised,
        Variant::OneAuxiliaryStage,
        Variant::NoCorridor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SingleIntraTarget => "single_intra_target",
            Variant::NoSemiSupervised => "no_semi_supervised",
            Variant::OneAuxiliaryStage => "one_auxiliary_stage",
            Variant::NoCorridor => "no_corridor",
        }
    }

    pub fn model_spec(self, base: &MsisConfig, loss: &LossConfig) -> ModelSpec {
        let name = format!("msis_{}", self.name());
        match self {
            Variant::Full => ModelSpec::single(name, base.clone(), loss.clone()),
            Variant::NoSemiSupervised => ModelSpec::single(name, base.clone(), loss.supervised_only()),
            Variant::OneAuxiliaryStage => {
                ModelSpec::single(name, base.without_stage(Stage::Ws), loss.clone())
            }
            Variant::NoCorridor => ModelSpec::single(name, base.without_corridor(), loss.clone()),
            Variant::SingleIntraTarget => ModelSpec {
                name,
                members: Target::GB
                    .into_iter()
                    .map(|t| {
                        let mut m = Member::new(base.single_intra_target(t), loss.clone());
                        // Only the GB label is reported; AR/WS heads come
                        // from every member and would collide.
                        m.report = vec![t];
                        m
                    })
                    .collect(),
            },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown ablation variant `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub variant: Variant,
}

pub struct AblationOutcome {
    pub variant: Variant,
    pub model: String,
    pub runs: Vec<SeedRun>,
}

impl AblationOutcome {
    pub fn results(&self, scope: Scope) -> Vec<RunResult> {
        self.runs.iter().filter_map(|r| r.result(&self.model, scope)).collect()
    }
}

/// Trains and tests one variant over `train.seeds`, with the same data and
/// protocol as the full model.
pub fn ablate(
    spec: AblationSpec,
    base: &MsisConfig,
    loss: &LossConfig,
    train: &TrainConfig,
    data: ExperimentData,
) -> Result<AblationOutcome> {
    let model = spec.variant.model_spec(base, loss);
    let runs = repeat_experiment(&model, train, data)?;
    Ok(AblationOutcome {
        variant: spec.variant,
        model: model.name,
        runs,
    })
}
