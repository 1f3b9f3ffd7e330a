//! Central-finite-difference oracle for input and parameter gradients.
//!
//! The comparison is independent of the backpropagation path: it perturbs
//! one coordinate at a time and re-runs the plain forward loss.

use crate::dataio::{DailyLoadVector, Label};
use crate::error::Result;

use super::model::TrainedModel;

/// Relative error with a small floor so near-zero gradient pairs compare by
/// absolute difference.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Max relative error between the backpropagated input gradient and central
/// finite differences over all 48 readings.
pub fn finite_difference_check(
    model: &TrainedModel,
    x: &DailyLoadVector,
    y: Label,
    epsilon: f64,
) -> Result<f64> {
    let (_, analytic) = model.loss_and_input_gradient(x, y)?;
    let mut worst: f64 = 0.0;
    let readings = x.readings().to_vec();
    for i in 0..readings.len() {
        let mut plus = readings.clone();
        plus[i] += epsilon;
        let mut minus = readings.clone();
        minus[i] -= epsilon;
        // bypass the non-negativity constructor: the loss is defined on all
        // of R^48 and the oracle needs symmetric perturbations at zero
        let lp = model.loss(&raw_vector(plus), y)?;
        let lm = model.loss(&raw_vector(minus), y)?;
        let numeric = (lp - lm) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Max relative error for parameter gradients, perturbing every entry of
/// every parameter tensor. Intended for small models only.
pub fn finite_difference_check_params(
    model: &TrainedModel,
    x: &DailyLoadVector,
    y: Label,
    epsilon: f64,
) -> Result<f64> {
    use super::layer::ForwardMode;
    use super::model::{readings_matrix, softmax_rows};

    let row = readings_matrix(std::slice::from_ref(x));
    let (logits, caches) = model.run(&row.view(), &mut ForwardMode::Infer, true, true)?;
    let mut dlogits = softmax_rows(&logits);
    dlogits[[0, y as usize]] -= 1.0;
    let (_, grads) = model.backward(&caches, dlogits, true);
    let grads = grads.expect("requested");

    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for (layer, grad) in grads.iter().enumerate() {
        for (slot, gslice) in grad.slices().iter().enumerate() {
            for i in 0..gslice.len() {
                let analytic = gslice[i];
                let base = probe.params()[layer].slices()[slot][i];
                probe.params_mut()[layer].slices_mut()[slot][i] = base + epsilon;
                let lp = probe.loss(x, y)?;
                probe.params_mut()[layer].slices_mut()[slot][i] = base - epsilon;
                let lm = probe.loss(x, y)?;
                probe.params_mut()[layer].slices_mut()[slot][i] = base;
                let numeric = (lp - lm) / (2.0 * epsilon);
                worst = worst.max(relative_error(analytic, numeric));
            }
        }
    }
    Ok(worst)
}

fn raw_vector(readings: Vec<f64>) -> DailyLoadVector {
    DailyLoadVector::new_unchecked(readings)
}
