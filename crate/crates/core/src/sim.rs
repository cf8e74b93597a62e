//! Synthetic loan funnel with a two-gate selection mechanism.
//!
//! Every applicant gets a latent credit quality `z`, a platform score that
//! decides the credit grant, a day of first withdrawal and a first-default
//! term. All six outcomes are kept for every applicant ("counterfactual"
//! labels); [`observe`] then hides what a lender would not see: withdrawal
//! for rejected applicants and repayment for rejected or silent ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::numerics::sigmoid_scalar;
use crate::task::{Labels, Target};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub feature_dim: usize,
    pub acceptance_rate: f64,
    /// Cosine between the platform's scoring direction and the true risk
    /// direction.
    pub policy_alignment: f64,
    pub draw_horizon_days: [u32; 2],
    pub n_terms: usize,
    /// Mean shift added to the first half of the features after the
    /// out-of-time cutoff.
    pub drift_shift: f64,
    pub oot_fraction: f64,
    pub seed: u64,
    /// Applications arrive uniformly over this many days.
    pub period_days: u32,
    /// Norm of the true risk direction.
    pub risk_scale: f64,
    pub risk_noise: f64,
    /// Norm of the platform scoring direction.
    pub score_scale: f64,
    pub score_noise: f64,
    /// Cosine between the withdrawal propensity direction and the direction
    /// of falling quality.
    pub draw_alignment: f64,
    pub draw_scale: f64,
    /// Logit of the daily withdrawal probability at `x = 0`.
    pub draw_intercept: f64,
    /// Withdrawals later than this many days count as never.
    pub observation_days: u32,
    /// Per-term default hazard is `σ(a_k − b·z)`; this is `b`.
    pub hazard_slope: f64,
    /// `a_k` for terms `1..=n_terms`.
    pub hazard_intercepts: Vec<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 100_000,
            feature_dim: 32,
            acceptance_rate: 0.3,
            policy_alignment: 0.6,
            draw_horizon_days: [30, 90],
            n_terms: 6,
            drift_shift: 0.5,
            oot_fraction: 0.2,
            seed: 7,
            period_days: 360,
            risk_scale: 1.5,
            risk_noise: 0.5,
            score_scale: 1.5,
            score_noise: 0.5,
            draw_alignment: 0.5,
            draw_scale: 1.0,
            draw_intercept: -4.5,
            observation_days: 180,
            hazard_slope: 6.0,
            hazard_intercepts: DEFAULT_HAZARD_INTERCEPTS.to_vec(),
        }
    }
}

/// Puts mob6 prevalence among accepted-and-drawn applicants near 10% under
/// the default configuration (about 3% for mob1). Early terms carry the
/// higher hazard.
pub const DEFAULT_HAZARD_INTERCEPTS: [f64; 6] = [-0.6, -1.0, -1.2, -1.3, -1.4, -1.5];

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("sim.{field}"), msg))
            }
        };
        check(self.n > 0, "n", "must be positive")?;
        check(self.feature_dim >= 2, "feature_dim", "must be at least 2")?;
        check(
            self.acceptance_rate > 0.0 && self.acceptance_rate < 1.0,
            "acceptance_rate",
            "must lie in (0, 1)",
        )?;
        check(
            (0.0..=1.0).contains(&self.policy_alignment),
            "policy_alignment",
            "must lie in [0, 1]",
        )?;
        check(
            (0.0..=1.0).contains(&self.draw_alignment),
            "draw_alignment",
            "must lie in [0, 1]",
        )?;
        let [short, long] = self.draw_horizon_days;
        check(
            short > 0 && short <= long && long <= self.observation_days,
            "draw_horizon_days",
            "must satisfy 0 < short <= long <= observation_days",
        )?;
        check(self.n_terms >= 6, "n_terms", "must cover the sixth term")?;
        check(
            self.hazard_intercepts.len() == self.n_terms,
            "hazard_intercepts",
            "needs one intercept per term",
        )?;
        check(self.hazard_slope > 0.0, "hazard_slope", "must be positive")?;
        check(
            self.oot_fraction > 0.0 && self.oot_fraction < 1.0,
            "oot_fraction",
            "must lie in (0, 1)",
        )?;
        check(self.period_days >= 2, "period_days", "must be at least 2")?;
        for (name, v) in [
            ("risk_noise", self.risk_noise),
            ("score_noise", self.score_noise),
            ("risk_scale", self.risk_scale),
            ("score_scale", self.score_scale),
            ("draw_scale", self.draw_scale),
        ] {
            check(v.is_finite() && v >= 0.0, name, "must be finite and non-negative")?;
        }
        check(self.drift_shift.is_finite(), "drift_shift", "must be finite")?;
        check(self.draw_intercept.is_finite(), "draw_intercept", "must be finite")?;
        Ok(())
    }

    /// First day of the out-of-time window.
    pub fn cutoff_day(&self) -> u32 {
        let day = ((1.0 - self.oot_fraction) * self.period_days as f64).round() as u32;
        day.clamp(1, self.period_days - 1)
    }

    fn timestamp(&self, id: u64) -> u32 {
        ((id as u128 * self.period_days as u128) / self.n as u128) as u32
    }
}

/// One applicant with every outcome known.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationRecord {
    pub id: u64,
    pub timestamp: u32,
    pub features: Vec<f64>,
    /// Latent credit quality in (0, 1); higher is better.
    pub quality: f64,
    /// Platform score used for the credit decision.
    pub score: f64,
    /// Day of first withdrawal if credit were granted.
    pub draw_day: Option<u32>,
    /// First term overdue by more than 30 days.
    pub first_default_term: Option<u32>,
    pub labels: Labels<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub config: SimConfig,
    pub cutoff_day: u32,
    pub records: Vec<PopulationRecord>,
}

/// Fixed directions of the simulated world.
#[derive(Clone, Debug)]
struct World {
    risk: Vec<f64>,
    policy: Vec<f64>,
    draw: Vec<f64>,
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit vector orthogonal to every vector in `basis` (which must be
/// orthonormal).
fn orthogonal_unit(rng: &mut ChaCha8Rng, dim: usize, basis: &[&[f64]]) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b.iter()).for_each(|(x, y)| *x -= c * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
}

fn blend(cos: f64, along: &[f64], across: &[f64], scale: f64) -> Vec<f64> {
    let sin = (1.0 - cos * cos).max(0.0).sqrt();
    along
        .iter()
        .zip(across)
        .map(|(a, b)| scale * (cos * a + sin * b))
        .collect()
}

impl World {
    fn new(config: &SimConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        let dim = config.feature_dim;
        let mut risk_dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut risk_dir);
        let policy_perp = orthogonal_unit(&mut rng, dim, &[&risk_dir]);
        let draw_perp = orthogonal_unit(&mut rng, dim, &[&risk_dir]);
        let falling: Vec<f64> = risk_dir.iter().map(|x| -x).collect();
        Self {
            risk: risk_dir.iter().map(|x| x * config.risk_scale).collect(),
            policy: blend(
                config.policy_alignment,
                &risk_dir,
                &policy_perp,
                config.score_scale,
            ),
            draw: blend(config.draw_alignment, &falling, &draw_perp, config.draw_scale),
        }
    }
}

/// Everything about one applicant except the credit decision, which needs
/// the population-wide score quantile.
fn draw_record(config: &SimConfig, world: &World, cutoff: u32, id: u64) -> PopulationRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(id);

    let timestamp = config.timestamp(id);
    let half = config.feature_dim / 2;
    let shift = if timestamp >= cutoff {
        config.drift_shift
    } else {
        0.0
    };
    let features: Vec<f64> = (0..config.feature_dim)
        .map(|j| {
            let x: f64 = rng.sample(StandardNormal);
            if j < half {
                x + shift
            } else {
                x
            }
        })
        .collect();

    let risk_noise: f64 = rng.sample(StandardNormal);
    let quality = sigmoid_scalar(dot(&world.risk, &features) + config.risk_noise * risk_noise);
    let score_noise: f64 = rng.sample(StandardNormal);
    let score = sigmoid_scalar(dot(&world.policy, &features) + config.score_noise * score_noise);

    let daily = sigmoid_scalar(config.draw_intercept + dot(&world.draw, &features));
    let u: f64 = 1.0 - rng.gen::<f64>();
    let day = (u.ln() / (1.0 - daily).ln()).ceil().max(1.0);
    let draw_day = (day <= config.observation_days as f64).then_some(day as u32);

    let mut first_default_term = None;
    for (k, &a) in config.hazard_intercepts.iter().enumerate() {
        let hazard = sigmoid_scalar(a - config.hazard_slope * quality);
        if rng.gen::<f64>() < hazard {
            first_default_term = Some(k as u32 + 1);
            break;
        }
    }

    let [short, long] = config.draw_horizon_days;
    let drew_within = |h: u32| draw_day.is_some_and(|d| d <= h);
    let defaulted_by = |k: u32| first_default_term.is_some_and(|t| t <= k);
    PopulationRecord {
        id,
        timestamp,
        features,
        quality,
        score,
        draw_day,
        first_default_term,
        labels: [
            false,
            drew_within(short),
            drew_within(long),
            defaulted_by(1),
            defaulted_by(3),
            defaulted_by(6),
        ],
    }
}

/// Generates `config.n` applicants. Deterministic in `config.seed`; each
/// record draws from its own `(seed, id)` stream.
pub fn generate(config: &SimConfig) -> Result<Population> {
    config.validate()?;
    let world = World::new(config);
    let cutoff = config.cutoff_day();
    let mut records: Vec<PopulationRecord> = (0..config.n as u64)
        .map(|id| draw_record(config, &world, cutoff, id))
        .collect();

    let mut pre: Vec<f64> = records
        .iter()
        .filter(|r| r.timestamp < cutoff)
        .map(|r| r.score)
        .collect();
    if pre.is_empty() {
        return Err(Error::config("sim.n", "no applications before the cutoff"));
    }
    pre.sort_by(f64::total_cmp);
    let rank = ((1.0 - config.acceptance_rate) * pre.len() as f64).floor() as usize;
    let threshold = pre[rank.min(pre.len() - 1)];
    for r in &mut records {
        r.labels[Target::Credit.index()] = r.score >= threshold;
    }
    Ok(Population {
        config: config.clone(),
        cutoff_day: cutoff,
        records,
    })
}

/// What the lender sees: withdrawal only for granted applicants, repayment
/// only for granted applicants who withdrew within the long horizon.
pub fn observe(population: &Population) -> Vec<Example> {
    population.records.iter().map(observe_record).collect()
}

pub fn observe_record(r: &PopulationRecord) -> Example {
    let credit = r.labels[Target::Credit.index()];
    let drew = r.labels[Target::Draw90.index()];
    let labels = Target::ALL.map(|t| {
        let visible = match t.stage() {
            crate::task::Stage::Ar => true,
            crate::task::Stage::Ws => credit,
            crate::task::Stage::Gb => credit && drew,
        };
        visible.then_some(r.labels[t.index()])
    });
    Example {
        id: r.id,
        timestamp: r.timestamp,
        features: r.features.clone(),
        labels,
    }
}
