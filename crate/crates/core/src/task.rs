//! Business stages and their prediction targets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Credit granting (approve / reject).
    Ar,
    /// Withdrawal (draw / silence).
    Ws,
    /// Repayment (good / bad).
    Gb,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Ar, Stage::Ws, Stage::Gb];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ar => "ar",
            Stage::Ws => "ws",
            Stage::Gb => "gb",
        }
    }

    pub fn targets(self) -> &'static [Target] {
        match self {
            Stage::Ar => &[Target::Credit],
            Stage::Ws => &[Target::Draw30, Target::Draw90],
            Stage::Gb => &[Target::Mob1, Target::Mob3, Target::Mob6],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Credit,
    #[serde(rename = "draw_30")]
    Draw30,
    #[serde(rename = "draw_90")]
    Draw90,
    Mob1,
    Mob3,
    Mob6,
}

impl Target {
    pub const ALL: [Target; 6] = [
        Target::Credit,
        Target::Draw30,
        Target::Draw90,
        Target::Mob1,
        Target::Mob3,
        Target::Mob6,
    ];

    pub const GB: [Target; 3] = [Target::Mob1, Target::Mob3, Target::Mob6];

    /// Position in label arrays and CSV column order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Credit => "credit",
            Target::Draw30 => "draw_30",
            Target::Draw90 => "draw_90",
            Target::Mob1 => "mob1",
            Target::Mob3 => "mob3",
            Target::Mob6 => "mob6",
        }
    }

    pub fn column(self) -> String {
        format!("label_{}", self.name())
    }

    pub fn stage(self) -> Stage {
        match self {
            Target::Credit => Stage::Ar,
            Target::Draw30 | Target::Draw90 => Stage::Ws,
            Target::Mob1 | Target::Mob3 | Target::Mob6 => Stage::Gb,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.strip_prefix("label_").unwrap_or(s);
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown target `{s}`"))
    }
}

/// One value per target, indexed by [`Target::index`].
pub type Labels<T> = [T; 6];
