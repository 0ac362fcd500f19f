//! Gradient checks of whole computations against central finite differences.

use crate::backbone::Model;
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::{finite_diff_grad, max_relative_error, Tensor, Tape, Var};

/// Worst relative error within one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub numel: usize,
    pub max_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GroupError> {
        self.groups.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error))
    }
}

fn eval<F>(store: &ParamStore<f64>, loss: &F) -> Result<f64>
where
    F: for<'t> Fn(&Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    loss(&store.bind(&tape))?.value().item()
}

/// Checks the gradient of a scalar `loss` with respect to every tensor in
/// `store`. Inputs that need checking can simply be stored alongside the
/// parameters.
pub fn check_store_gradients<F>(store: &ParamStore<f64>, step: f64, floor: f64, loss: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Bound<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let p = store.bind(&tape);
    let analytic = p.grads(&loss(&p)?.backward()?);
    eval(store, &loss)?;
    let mut probe = store.clone();
    let mut groups = Vec::new();
    for (id, exact) in store.ids().zip(analytic) {
        let original = store.get(id).clone();
        let numeric = finite_diff_grad(
            |value| {
                probe.set(id, value.clone()).expect("same shape");
                eval(&probe, &loss).expect("forward succeeded at the base point")
            },
            &original,
            step,
        );
        probe.set(id, original)?;
        groups.push(GroupError {
            name: store.name(id).to_string(),
            numel: exact.len(),
            max_error: max_relative_error(&exact, &numeric, floor),
        });
    }
    Ok(GradCheckReport { groups })
}

/// Checks every parameter of `model` under the loss `Σ logits ⊙ weights`,
/// which reaches every logit with a nonzero coefficient.
pub fn check_model_gradients(
    model: &Model,
    store: &ParamStore<f64>,
    images: &Tensor<f64>,
    weights: &Tensor<f64>,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    check_store_gradients(store, step, floor, |p| {
        let tape = p.tape();
        let logits = model.forward(p, tape.constant(images.clone()))?;
        Ok(logits.mul(tape.constant(weights.clone()))?.sum())
    })
}
