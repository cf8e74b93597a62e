//! Hierarchical attention of the information corridor.
//!
//! Both levels score a candidate vector `v` by its own self-similarity
//! `⟨g1(v), g2(v)⟩ / √d` and normalize the scores with a softmax.

use crate::error::{Error, Result};
use crate::numerics::{Binding, Graph, Scalar, Tensor2D, Var};

/// Dense layer handles on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: Var,
    pub bias: Var,
}

impl Dense {
    pub fn bind(binding: &Binding, prefix: &str) -> Self {
        Self {
            weight: binding.var(&format!("{prefix}.weight")),
            bias: binding.var(&format!("{prefix}.bias")),
        }
    }

    pub fn linear<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.dense(x, self.weight, self.bias)
    }

    /// Corridor projection: one dense layer followed by rectification.
    pub fn project<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let z = self.linear(g, x)?;
        Ok(g.relu(z))
    }
}

/// Query/key pair scoring a candidate against itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scorer {
    pub g1: Dense,
    pub g2: Dense,
}

impl Scorer {
    /// `⟨g1(v), g2(v)⟩ / √d` per row; `b×1`.
    pub fn score<T: Scalar>(self, g: &mut Graph<T>, v: Var) -> Result<Var> {
        let d = g.shape(v).1;
        let q = self.g1.project(g, v)?;
        let k = self.g2.project(g, v)?;
        let s = g.row_dot(q, k)?;
        Ok(g.scale(s, T::one() / T::of(d as f64).sqrt()))
    }
}

/// Projections of the intra-stage (aggregation) attention. `scorer` is
/// absent for single-target stages, whose weight is identically one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IntraProjections {
    pub scorer: Option<Scorer>,
    pub value: Dense,
}

/// Aggregates a stage's tower representations into `e_ou`.
///
/// Returns `(e_ou [b×d], α [b×M])`.
pub fn intra_stage_attention<T: Scalar>(
    g: &mut Graph<T>,
    reps: &[Var],
    proj: &IntraProjections,
) -> Result<(Var, Var)> {
    let Some(&first) = reps.first() else {
        return Err(Error::Domain("intra-stage attention over zero towers".into()));
    };
    let rows = g.shape(first).0;
    let alpha = match proj.scorer {
        Some(scorer) => {
            let scores = reps
                .iter()
                .map(|&h| scorer.score(g, h))
                .collect::<Result<Vec<_>>>()?;
            let stacked = g.concat_cols(&scores)?;
            g.softmax_rows(stacked)?
        }
        None if reps.len() == 1 => g.constant(Tensor2D::filled(rows, 1, T::one())),
        None => {
            return Err(Error::Contract(
                "a multi-target stage needs attention scoring projections".into(),
            ))
        }
    };
    let mut weighted = Vec::with_capacity(reps.len());
    for (m, &h) in reps.iter().enumerate() {
        let v = proj.value.project(g, h)?;
        let a = g.column(alpha, m)?;
        weighted.push((g.mul_column(v, a)?, T::one()));
    }
    let e_ou = if weighted.len() == 1 {
        weighted[0].0
    } else {
        g.weighted_sum(&weighted)?
    };
    Ok((e_ou, alpha))
}

/// Projections of the inter-stage (redistribution) attention for one
/// destination target. The incoming vector and the target's own tower each
/// have their own scorer and value projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionProjections {
    pub incoming: Scorer,
    pub own: Scorer,
    pub incoming_value: Dense,
    pub own_value: Dense,
}

/// Fuses `e_in` with a destination tower `h`:
/// `ĥ = β₁·g3'(e_in) + β₂·g3'(h)`.
///
/// Returns `(ĥ [b×d], β [b×2])`. `beta_override` pins β for tests.
pub fn inter_stage_fusion<T: Scalar>(
    g: &mut Graph<T>,
    e_in: Var,
    h: Var,
    proj: &FusionProjections,
    beta_override: Option<[T; 2]>,
) -> Result<(Var, Var)> {
    if g.shape(e_in) != g.shape(h) {
        return Err(Error::Dimension {
            op: "inter_stage_fusion",
            left: g.shape(e_in),
            right: g.shape(h),
        });
    }
    let beta = match beta_override {
        Some([b1, b2]) => {
            let rows = g.shape(h).0;
            let data = (0..rows).flat_map(|_| [b1, b2]).collect();
            g.constant(Tensor2D::from_vec(rows, 2, data)?)
        }
        None => {
            let s_in = proj.incoming.score(g, e_in)?;
            let s_own = proj.own.score(g, h)?;
            let stacked = g.concat_cols(&[s_in, s_own])?;
            g.softmax_rows(stacked)?
        }
    };
    let v_in = proj.incoming_value.project(g, e_in)?;
    let v_own = proj.own_value.project(g, h)?;
    let b1 = g.column(beta, 0)?;
    let b2 = g.column(beta, 1)?;
    let w_in = g.mul_column(v_in, b1)?;
    let w_own = g.mul_column(v_own, b2)?;
    Ok((g.add(w_in, w_own)?, beta))
}
