//! Central finite-difference checks of the analytic backward pass.

use crate::model::network::{Batch, DropoutMasks, EffectModel};
use crate::scalar::Scalar;

/// Worst disagreement found by a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_relative_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
}

impl GradCheck {
    fn new() -> Self {
        Self {
            max_relative_error: 0.0,
            worst: (String::new(), 0),
            checked: 0,
        }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let scale = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / scale;
        self.checked += 1;
        if rel > self.max_relative_error {
            self.max_relative_error = rel;
            self.worst = (name.to_string(), index);
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

fn total<T: Scalar>(model: &EffectModel<T>, batch: &Batch<T>, masks: Option<&DropoutMasks<T>>) -> f64 {
    model.batch_loss(batch, masks).total
}

/// Compare every parameter gradient against `(L(θ+ε) - L(θ-ε)) / 2ε`.
/// Entries whose gradients are both below `floor` count as absolute errors.
pub fn check_parameter_gradients<T: Scalar>(
    model: &EffectModel<T>,
    batch: &Batch<T>,
    masks: Option<&DropoutMasks<T>>,
    eps: f64,
    floor: f64,
) -> GradCheck {
    let (_, grads, _) = model.loss_and_gradients(batch, masks);
    let names: Vec<String> = model.params().named_tensors().into_iter().map(|t| t.0).collect();
    let analytic: Vec<Vec<f64>> = grads
        .named_tensors()
        .into_iter()
        .map(|(_, _, v)| v.iter().map(|x| x.to_f64_lossy()).collect())
        .collect();

    let mut probe = model.clone();
    let mut report = GradCheck::new();
    for (t, name) in names.iter().enumerate() {
        for i in 0..analytic[t].len() {
            let original = probe.params_mut().tensors_mut()[t][i];
            probe.params_mut().tensors_mut()[t][i] = original + T::of(eps);
            let plus = total(&probe, batch, masks);
            probe.params_mut().tensors_mut()[t][i] = original - T::of(eps);
            let minus = total(&probe, batch, masks);
            probe.params_mut().tensors_mut()[t][i] = original;
            report.record(name, i, analytic[t][i], (plus - minus) / (2.0 * eps), floor);
        }
    }
    report
}

/// Same check for the gradients with respect to the raw object and action
/// inputs.
pub fn check_input_gradients<T: Scalar>(
    model: &EffectModel<T>,
    batch: &Batch<T>,
    masks: Option<&DropoutMasks<T>>,
    eps: f64,
    floor: f64,
) -> GradCheck {
    let (d_objects, d_actions) = model.loss_input_gradients(batch, masks);
    let mut report = GradCheck::new();
    for (name, analytic, which) in [("objects", &d_objects, 0), ("actions", &d_actions, 1)] {
        for i in 0..analytic.data().len() {
            let mut probe = batch.clone();
            let m = if which == 0 { &mut probe.objects } else { &mut probe.actions };
            let original = m.data()[i];
            m.data_mut()[i] = original + T::of(eps);
            let plus = total(model, &probe, masks);
            let m = if which == 0 { &mut probe.objects } else { &mut probe.actions };
            m.data_mut()[i] = original - T::of(eps);
            let minus = total(model, &probe, masks);
            report.record(name, i, analytic.data()[i].to_f64_lossy(), (plus - minus) / (2.0 * eps), floor);
        }
    }
    report
}
