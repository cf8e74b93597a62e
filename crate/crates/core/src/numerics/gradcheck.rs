use super::{Binding, Graph, ParamStore, Scalar, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape adjoints to central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub worst_relative_error: f64,
    /// `name[index]` of the scalar with the worst error.
    pub offending: Option<String>,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst_relative_error < self.tolerance
    }
}

fn evaluate<T, F>(params: &ParamStore<T>, loss_fn: &F) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &Binding) -> Result<Var>,
{
    let mut graph = Graph::new();
    let binding = params.bind(&mut graph);
    let root = loss_fn(&mut graph, &binding)?;
    Ok(graph.value(root).item())
}

/// Checks every scalar parameter's adjoint against
/// `(L(θ+h) − L(θ−h)) / 2h`, with error `|a − n| / max(1, |a|)`.
///
/// The tape is recorded once; each perturbation re-evaluates only the nodes
/// downstream of the perturbed parameter. `loss_fn` must therefore build the
/// same sequence of operations whatever the parameter values.
pub fn finite_diff_check<T, F>(
    params: &ParamStore<T>,
    loss_fn: F,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &Binding) -> Result<Var>,
{
    let mut graph = Graph::new();
    let binding = params.bind(&mut graph);
    let root = loss_fn(&mut graph, &binding)?;
    let base = graph.value(root).item();
    graph.backward(root)?;
    let analytic = binding.gradients(&graph);

    let again = evaluate(params, &loss_fn)?;
    if again.as_f64().to_bits() != base.as_f64().to_bits() {
        return Err(Error::Contract(format!(
            "loss function is not deterministic: {base} then {again}"
        )));
    }

    let h = T::of(step);
    let mut worst = 0.0f64;
    let mut offending = None;
    let mut checked = 0;
    for (name, grad) in &analytic {
        let leaf = binding.var(name);
        let downstream = graph.dependents(leaf);
        let probe = |graph: &mut Graph<T>, i: usize, value: T| -> Result<T> {
            graph.leaf_value_mut(leaf)?.data_mut()[i] = value;
            graph.reevaluate(&downstream);
            Ok(graph.value(root).item())
        };
        for i in 0..grad.len() {
            let original = graph.value(leaf).data()[i];
            let plus = probe(&mut graph, i, original + h)?;
            let minus = probe(&mut graph, i, original - h)?;
            graph.leaf_value_mut(leaf)?.data_mut()[i] = original;

            let numeric = (plus - minus).as_f64() / (2.0 * step);
            let a = grad.data()[i].as_f64();
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if !(err <= worst) {
                worst = err;
                offending = Some(format!("{name}[{i}]"));
            }
            checked += 1;
        }
        graph.reevaluate(&downstream);
    }
    Ok(GradCheckReport {
        worst_relative_error: worst,
        offending,
        checked,
        tolerance: tol,
    })
}
