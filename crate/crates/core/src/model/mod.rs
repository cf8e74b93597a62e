//! Network architectures: the MSIS network and a single-task MLP.
//!
//! An MSIS network is a shared-bottom MLP, one tower per target, and an
//! information corridor between consecutive stages. For each stage pair the
//! source towers are aggregated into `e_ou` by intra-stage attention, mapped
//! to `e_in = f(e_ou)`, and fused into every destination tower by
//! inter-stage attention. Heads read the fused representations.

mod attention;
mod checkpoint;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{
    inter_stage_fusion, intra_stage_attention, Dense, FusionProjections, IntraProjections, Scorer,
};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use crate::error::{Error, Result};
use crate::numerics::{Binding, Graph, ParamStore, Scalar, Tensor2D, Var};
use crate::task::{Stage, Target};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub stage: Stage,
    pub targets: Vec<Target>,
}

impl StageSpec {
    pub fn full(stage: Stage) -> Self {
        Self {
            stage,
            targets: stage.targets().to_vec(),
        }
    }
}

/// Which tower representations the intra-stage attention aggregates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionInput {
    /// The stage's fused representations (what its heads read).
    #[default]
    PostFusion,
    /// The raw tower outputs.
    PreFusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsisConfig {
    pub input_dim: usize,
    pub shared_widths: Vec<usize>,
    /// Hidden widths of each tower; the tower output width is
    /// `corridor_dim`.
    pub tower_hidden: Vec<usize>,
    pub corridor_dim: usize,
    pub stages: Vec<StageSpec>,
    /// `false` severs the corridor: a flat shared-bottom multi-task network.
    pub corridor: bool,
    pub attention_input: AttentionInput,
}

impl Default for MsisConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            shared_widths: vec![64, 32],
            tower_hidden: vec![16],
            corridor_dim: 8,
            stages: Stage::ALL.iter().map(|&s| StageSpec::full(s)).collect(),
            corridor: true,
            attention_input: AttentionInput::PostFusion,
        }
    }
}

impl MsisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be positive"));
        }
        if self.corridor_dim == 0 {
            return Err(Error::config("model.corridor_dim", "must be positive"));
        }
        if self.shared_widths.iter().chain(&self.tower_hidden).any(|&w| w == 0) {
            return Err(Error::config("model.shared_widths", "layer widths must be positive"));
        }
        if self.stages.is_empty() {
            return Err(Error::config("model.stages", "needs at least one stage"));
        }
        for (i, spec) in self.stages.iter().enumerate() {
            let field = format!("model.stages[{i}]");
            if spec.targets.is_empty() {
                return Err(Error::config(field, "stage without targets"));
            }
            if let Some(t) = spec.targets.iter().find(|t| t.stage() != spec.stage) {
                return Err(Error::config(field, format!("{t} is not a {} target", spec.stage)));
            }
            let mut uniq = spec.targets.clone();
            uniq.sort();
            uniq.dedup();
            if uniq.len() != spec.targets.len() {
                return Err(Error::config(field, "duplicate target"));
            }
            if i > 0 && self.stages[i - 1].stage >= spec.stage {
                return Err(Error::config(field, "stages must follow AR → WS → GB order"));
            }
        }
        Ok(())
    }

    pub fn tower_widths(&self) -> Vec<usize> {
        let mut w = self.tower_hidden.clone();
        w.push(self.corridor_dim);
        w
    }

    pub fn targets(&self) -> Vec<Target> {
        self.stages.iter().flat_map(|s| s.targets.iter().copied()).collect()
    }

    /// Flat multi-task control: same towers and heads, no corridor.
    pub fn without_corridor(&self) -> Self {
        Self {
            corridor: false,
            ..self.clone()
        }
    }

    /// One target per stage: `draw_90` for WS and `gb_target` for GB.
    pub fn single_intra_target(&self, gb_target: Target) -> Self {
        let stages = self
            .stages
            .iter()
            .map(|s| StageSpec {
                stage: s.stage,
                targets: match s.stage {
                    Stage::Ar => vec![Target::Credit],
                    Stage::Ws => vec![Target::Draw90],
                    Stage::Gb => vec![gb_target],
                },
            })
            .collect();
        Self {
            stages,
            ..self.clone()
        }
    }

    /// Drops the WS stage; the corridor runs AR → GB.
    pub fn without_stage(&self, stage: Stage) -> Self {
        Self {
            stages: self.stages.iter().filter(|s| s.stage != stage).cloned().collect(),
            ..self.clone()
        }
    }
}

fn mlp_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    prefix: &str,
    x: Var,
    layers: usize,
    relu_last: bool,
) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = Dense::bind(b, &format!("{prefix}.layer{i}")).linear(g, h)?;
        if i + 1 < layers || relu_last {
            h = g.relu(h);
        }
    }
    Ok(h)
}

fn insert_mlp<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    input: usize,
    widths: &[usize],
) -> Result<()> {
    let mut fan_in = input;
    for (i, &w) in widths.iter().enumerate() {
        store.insert_dense(&format!("{prefix}.layer{i}"), fan_in, w, rng)?;
        fan_in = w;
    }
    Ok(())
}

fn tower_prefix(t: Target) -> String {
    format!("{}.{}.tower", t.stage(), t)
}

fn head_prefix(t: Target) -> String {
    format!("{}.{}.head", t.stage(), t)
}

/// Tape handles of one corridor hop.
#[derive(Clone, Debug)]
pub struct CorridorVars {
    pub from: Stage,
    pub to: Stage,
    pub e_ou: Var,
    pub e_in: Var,
    pub alpha: Var,
    pub beta: Vec<(Target, Var)>,
}

/// Tape handles produced by a forward pass.
#[derive(Clone, Debug)]
pub struct GraphOutputs {
    /// `b×1` probabilities in target order.
    pub probs: Vec<(Target, Var)>,
    pub top: Vec<(Target, Var)>,
    pub corridors: Vec<CorridorVars>,
}

impl GraphOutputs {
    pub fn prob(&self, t: Target) -> Option<Var> {
        self.probs.iter().find(|(k, _)| *k == t).map(|p| p.1)
    }
}

/// Attention state of one corridor hop, per example row.
#[derive(Clone, Debug, PartialEq)]
pub struct CorridorState<T> {
    pub from: Stage,
    pub to: Stage,
    pub e_ou: Tensor2D<T>,
    pub e_in: Tensor2D<T>,
    /// `b × |source targets|`.
    pub alpha: Tensor2D<T>,
    /// `b × 2` per destination target.
    pub beta: BTreeMap<Target, Tensor2D<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult<T> {
    pub probs: BTreeMap<Target, Vec<T>>,
    pub top: BTreeMap<Target, Tensor2D<T>>,
    pub corridors: Vec<CorridorState<T>>,
}

/// Single-task MLP for one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub target: Target,
}

impl Default for MlpConfig {
    fn default() -> Self {
        // ≈ the parameter count of the default MSIS network.
        Self {
            input_dim: 32,
            hidden: vec![128, 48],
            target: Target::Mob6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Msis(MsisConfig),
    Mlp(MlpConfig),
}

impl From<MsisConfig> for Architecture {
    fn from(c: MsisConfig) -> Self {
        Architecture::Msis(c)
    }
}

impl From<MlpConfig> for Architecture {
    fn from(c: MlpConfig) -> Self {
        Architecture::Mlp(c)
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Msis(c) => c.validate(),
            Architecture::Mlp(c) => {
                if c.input_dim == 0 || c.hidden.contains(&0) {
                    Err(Error::config("mlp.hidden", "layer widths must be positive"))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Architecture::Msis(c) => c.input_dim,
            Architecture::Mlp(c) => c.input_dim,
        }
    }

    pub fn targets(&self) -> Vec<Target> {
        match self {
            Architecture::Msis(c) => c.targets(),
            Architecture::Mlp(c) => vec![c.target],
        }
    }

    /// Glorot-uniform weights and zero biases, deterministic in `seed`.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(seed);
        match self {
            Architecture::Mlp(c) => {
                insert_mlp(&mut store, &mut rng, "mlp", c.input_dim, &c.hidden)?;
                let last = c.hidden.last().copied().unwrap_or(c.input_dim);
                store.insert_dense("mlp.head", last, 1, &mut rng)?;
            }
            Architecture::Msis(c) => init_msis(c, &mut store, &mut rng)?,
        }
        Ok(store)
    }

    /// Records the forward pass on `g`. `x` is a `b×input_dim` node.
    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        x: Var,
    ) -> Result<GraphOutputs> {
        let (_, cols) = g.shape(x);
        if cols != self.input_dim() {
            return Err(Error::Dimension {
                op: "forward",
                left: g.shape(x),
                right: (cols, self.input_dim()),
            });
        }
        match self {
            Architecture::Mlp(c) => {
                let h = mlp_forward(g, b, "mlp", x, c.hidden.len(), true)?;
                let logit = Dense::bind(b, "mlp.head").linear(g, h)?;
                let p = g.sigmoid(logit);
                Ok(GraphOutputs {
                    probs: vec![(c.target, p)],
                    top: vec![(c.target, h)],
                    corridors: Vec::new(),
                })
            }
            Architecture::Msis(c) => forward_msis(c, g, b, x),
        }
    }

    /// Forward pass returning plain values.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        features: &Tensor2D<T>,
    ) -> Result<ForwardResult<T>> {
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let x = g.constant(features.clone());
        let out = self.forward_graph(&mut g, &b, x)?;
        let probs = out
            .probs
            .iter()
            .map(|&(t, v)| (t, g.value(v).data().to_vec()))
            .collect();
        let top = out.top.iter().map(|&(t, v)| (t, g.value(v).clone())).collect();
        let corridors = out
            .corridors
            .iter()
            .map(|c| CorridorState {
                from: c.from,
                to: c.to,
                e_ou: g.value(c.e_ou).clone(),
                e_in: g.value(c.e_in).clone(),
                alpha: g.value(c.alpha).clone(),
                beta: c.beta.iter().map(|&(t, v)| (t, g.value(v).clone())).collect(),
            })
            .collect();
        Ok(ForwardResult {
            probs,
            top,
            corridors,
        })
    }

    /// Probabilities for every row, in chunks to bound tape size.
    pub fn predict(
        &self,
        params: &ParamStore<f64>,
        features: &Tensor2D<f64>,
    ) -> Result<BTreeMap<Target, Vec<f64>>> {
        const CHUNK: usize = 4096;
        let mut out: BTreeMap<Target, Vec<f64>> =
            self.targets().into_iter().map(|t| (t, Vec::new())).collect();
        let rows: Vec<usize> = (0..features.rows()).collect();
        for chunk in rows.chunks(CHUNK) {
            let part = features.gather_rows(chunk);
            let res = self.forward(params, &part)?;
            for (t, p) in res.probs {
                out.entry(t).or_default().extend(p);
            }
        }
        Ok(out)
    }
}

fn init_msis<T: Scalar>(
    c: &MsisConfig,
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let d = c.corridor_dim;
    insert_mlp(store, rng, "shared", c.input_dim, &c.shared_widths)?;
    let bottom = c.shared_widths.last().copied().unwrap_or(c.input_dim);
    for t in c.targets() {
        insert_mlp(store, rng, &tower_prefix(t), bottom, &c.tower_widths())?;
        store.insert_dense(&head_prefix(t), d, 1, rng)?;
    }
    if !c.corridor {
        return Ok(());
    }
    let last = c.stages.len() - 1;
    for (i, spec) in c.stages.iter().enumerate() {
        let s = spec.stage;
        if i > 0 {
            store.insert_dense(&format!("{s}.corridor.inflow"), d, d, rng)?;
            for t in &spec.targets {
                for p in ["g1_in", "g2_in", "g1_own", "g2_own", "g3_in", "g3_own"] {
                    store.insert_dense(&format!("{s}.corridor.{t}.{p}"), d, d, rng)?;
                }
            }
        }
        if i < last {
            if spec.targets.len() > 1 {
                store.insert_dense(&format!("{s}.corridor.out.g1"), d, d, rng)?;
                store.insert_dense(&format!("{s}.corridor.out.g2"), d, d, rng)?;
            }
            store.insert_dense(&format!("{s}.corridor.out.g3"), d, d, rng)?;
        }
    }
    Ok(())
}

fn fusion_projections(b: &Binding, s: Stage, t: Target) -> FusionProjections {
    let p = |name: &str| Dense::bind(b, &format!("{s}.corridor.{t}.{name}"));
    FusionProjections {
        incoming: Scorer {
            g1: p("g1_in"),
            g2: p("g2_in"),
        },
        own: Scorer {
            g1: p("g1_own"),
            g2: p("g2_own"),
        },
        incoming_value: p("g3_in"),
        own_value: p("g3_own"),
    }
}

fn intra_projections(b: &Binding, s: Stage, n_targets: usize) -> IntraProjections {
    let p = |name: &str| Dense::bind(b, &format!("{s}.corridor.out.{name}"));
    IntraProjections {
        scorer: (n_targets > 1).then(|| Scorer {
            g1: p("g1"),
            g2: p("g2"),
        }),
        value: p("g3"),
    }
}

fn forward_msis<T: Scalar>(
    c: &MsisConfig,
    g: &mut Graph<T>,
    b: &Binding,
    x: Var,
) -> Result<GraphOutputs> {
    let tower_layers = c.tower_hidden.len() + 1;
    let shared = mlp_forward(g, b, "shared", x, c.shared_widths.len(), true)?;
    let mut out = GraphOutputs {
        probs: Vec::new(),
        top: Vec::new(),
        corridors: Vec::new(),
    };
    // (source stage, e_ou, alpha) carried to the next stage.
    let mut carried: Option<(Stage, Var, Var)> = None;
    let last = c.stages.len() - 1;
    for (i, spec) in c.stages.iter().enumerate() {
        let s = spec.stage;
        let towers = spec
            .targets
            .iter()
            .map(|&t| mlp_forward(g, b, &tower_prefix(t), shared, tower_layers, false))
            .collect::<Result<Vec<_>>>()?;

        let mut fused = towers.clone();
        if let (true, Some((from, e_ou, alpha))) = (c.corridor, carried.take()) {
            let inflow = Dense::bind(b, &format!("{s}.corridor.inflow"));
            let e_in = inflow.project(g, e_ou)?;
            let mut betas = Vec::with_capacity(spec.targets.len());
            for (k, &t) in spec.targets.iter().enumerate() {
                let proj = fusion_projections(b, s, t);
                let (h_hat, beta) = inter_stage_fusion(g, e_in, towers[k], &proj, None)?;
                fused[k] = h_hat;
                betas.push((t, beta));
            }
            out.corridors.push(CorridorVars {
                from,
                to: s,
                e_ou,
                e_in,
                alpha,
                beta: betas,
            });
        }

        for (k, &t) in spec.targets.iter().enumerate() {
            let logit = Dense::bind(b, &head_prefix(t)).linear(g, fused[k])?;
            out.probs.push((t, g.sigmoid(logit)));
            out.top.push((t, fused[k]));
        }

        if c.corridor && i < last {
            let reps = match c.attention_input {
                AttentionInput::PostFusion => &fused,
                AttentionInput::PreFusion => &towers,
            };
            let proj = intra_projections(b, s, spec.targets.len());
            let (e_ou, alpha) = intra_stage_attention(g, reps, &proj)?;
            carried = Some((s, e_ou, alpha));
        }
    }
    Ok(out)
}
