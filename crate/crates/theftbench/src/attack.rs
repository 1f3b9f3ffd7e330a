//! Adversarial measurement generation.
//!
//! The iterative search starts from a projected near-zero Gaussian vector
//! and ascends `L(f(a), Theft) - lambda * ||a||_1`: raising the
//! cross-entropy against the Theft label pushes the classifier toward
//! Normal while the regularizer pushes the bill down. Every iterate is
//! projected onto the non-negative orthant, so reported measurements stay
//! feasible. Two vanilla baselines (global scaling and uniform noise) serve
//! as reference attackers.

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{DailyLoadVector, Label, Origin, SLOTS_PER_DAY};
use crate::error::{Error, Result};
use crate::nnengine::TrainedModel;
use crate::rng::stream_rng;

/// Inputs of the iterative search attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Maximum number of search iterations.
    pub step: u32,
    /// Per-iteration max perturbation (kWh).
    pub size: f64,
    /// Profit regularizer weight.
    pub lambda: f64,
    /// Std-dev of the Gaussian init (kWh).
    pub sigma: f64,
    pub seed: u64,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.size > 0.0 && self.size.is_finite()) {
            return Err(Error::Validation(format!("size must be positive, got {}", self.size)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Validation(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Validation(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Outcome of one attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub adversarial: DailyLoadVector,
    /// The local model classified the vector Normal at return time.
    pub success_local: bool,
    pub iterations_used: u32,
    /// Sum of the 48 entries (kWh); the attacker's bill.
    pub l1: f64,
    /// `L(f(a), Theft) - lambda * ||a||_1` at exit.
    pub final_loss_total: f64,
}

/// Elementwise max(v, 0); idempotent.
pub fn project_nonnegative(v: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("cannot project non-finite entry {bad}")));
    }
    Ok(v.iter().map(|x| x.max(0.0)).collect())
}

// Loss threshold equivalent to the Normal decision: with two classes,
// p_theft <= p_normal iff -ln p_theft >= ln 2. Ties classify Normal.
const NORMAL_LOSS_THRESHOLD: f64 = std::f64::consts::LN_2;

// Rows per gradient batch; bounds LSTM cache memory.
const CHUNK: usize = 128;

struct RowState {
    row: usize,
    seed: u64,
}

/// Generate one adversarial measurement vector against `model` (the
/// attacker's local model: the defender itself in the white-box setting).
pub fn search_from_free(model: &TrainedModel, cfg: &AttackConfig) -> Result<AttackResult> {
    let mut out = search_from_free_batch(model, cfg, 1, cfg.seed)?;
    Ok(out.pop().expect("one result per requested vector"))
}

/// Run `n` independent attacks with seeds `base_seed + i`. Equivalent to
/// `n` calls of [`search_from_free`], batched for throughput.
pub fn search_from_free_batch(
    model: &TrainedModel,
    cfg: &AttackConfig,
    n: usize,
    base_seed: u64,
) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Validation("need at least one attack vector".into()));
    }
    let mut results: Vec<Option<AttackResult>> = (0..n).map(|_| None).collect();
    for chunk_start in (0..n).step_by(CHUNK) {
        let chunk_end = (chunk_start + CHUNK).min(n);
        let seeds: Vec<u64> = (chunk_start..chunk_end)
            .map(|i| base_seed.wrapping_add(i as u64))
            .collect();
        for (offset, res) in run_chunk(model, cfg, &seeds)?.into_iter().enumerate() {
            results[chunk_start + offset] = Some(res);
        }
    }
    Ok(results.into_iter().map(|r| r.expect("all chunks filled")).collect())
}

fn run_chunk(model: &TrainedModel, cfg: &AttackConfig, seeds: &[u64]) -> Result<Vec<AttackResult>> {
    let n = seeds.len();
    let normal = Normal::new(0.0, cfg.sigma).expect("sigma validated");

    // Gaussian init, projected onto the feasible set.
    let mut a = Array2::zeros((n, SLOTS_PER_DAY));
    for (r, &seed) in seeds.iter().enumerate() {
        let mut rng = stream_rng(seed, 0);
        for c in 0..SLOTS_PER_DAY {
            a[[r, c]] = normal.sample(&mut rng).max(0.0);
        }
    }

    let mut done: Vec<Option<AttackResult>> = (0..n).map(|_| None).collect();
    let mut active: Vec<RowState> = seeds
        .iter()
        .enumerate()
        .map(|(row, &seed)| RowState { row, seed })
        .collect();
    let theft_labels = |k: usize| vec![Label::Theft; k];

    for iter in 0..cfg.step {
        if active.is_empty() {
            break;
        }
        let xb = gather(&a, &active);
        let (losses, grads) = model.loss_and_input_gradient_batch(&xb.view(), &theft_labels(active.len()))?;
        let mut still_active = Vec::with_capacity(active.len());
        for (k, state) in active.into_iter().enumerate() {
            if losses[k] >= NORMAL_LOSS_THRESHOLD {
                // classified Normal before exhausting the budget
                done[state.row] = Some(finish(&a, &state, true, iter, losses[k], cfg));
                continue;
            }
            // G = grad CE - lambda (the L1 term has subgradient +1 everywhere
            // on the feasible set, including at zero entries)
            let mut g = [0.0; SLOTS_PER_DAY];
            let mut max_abs: f64 = 0.0;
            for c in 0..SLOTS_PER_DAY {
                g[c] = grads[[k, c]] - cfg.lambda;
                max_abs = max_abs.max(g[c].abs());
            }
            if max_abs == 0.0 {
                // stationary point; current classification is Theft
                done[state.row] = Some(finish(&a, &state, false, iter, losses[k], cfg));
                continue;
            }
            let scale = cfg.size / max_abs;
            for c in 0..SLOTS_PER_DAY {
                let v = a[[state.row, c]] + g[c] * scale;
                a[[state.row, c]] = v.max(0.0);
            }
            still_active.push(state);
        }
        active = still_active;
    }

    // budget exhausted (or step = 0): classify the final iterate
    if !active.is_empty() {
        let xb = gather(&a, &active);
        let (losses, _) = model.loss_and_input_gradient_batch(&xb.view(), &theft_labels(active.len()))?;
        for (k, state) in active.into_iter().enumerate() {
            let success = losses[k] >= NORMAL_LOSS_THRESHOLD;
            done[state.row] = Some(finish(&a, &state, success, cfg.step, losses[k], cfg));
        }
    }

    Ok(done.into_iter().map(|r| r.expect("every row resolved")).collect())
}

fn gather(a: &Array2<f64>, active: &[RowState]) -> Array2<f64> {
    let mut out = Array2::zeros((active.len(), SLOTS_PER_DAY));
    for (k, state) in active.iter().enumerate() {
        out.slice_mut(s![k, ..]).assign(&a.row(state.row));
    }
    out
}

fn finish(
    a: &Array2<f64>,
    state: &RowState,
    success: bool,
    iterations: u32,
    ce_loss: f64,
    cfg: &AttackConfig,
) -> AttackResult {
    let readings: Vec<f64> = a.row(state.row).to_vec();
    let l1: f64 = readings.iter().sum();
    let adversarial = DailyLoadVector::new(readings, Origin::Synthetic { seed: state.seed })
        .expect("iterates are projected and finite");
    AttackResult {
        adversarial,
        success_local: success,
        iterations_used: iterations,
        l1,
        final_loss_total: ce_loss - cfg.lambda * l1,
    }
}

/// VA1: scale a genuine daily vector by a constant alpha in (0, 1].
pub fn vanilla_scale(m: &DailyLoadVector, alpha: f64) -> Result<DailyLoadVector> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Validation(format!(
            "vanilla scaling factor must lie in (0, 1], got {alpha}"
        )));
    }
    DailyLoadVector::new(
        m.readings().iter().map(|r| alpha * r).collect(),
        m.origin.clone(),
    )
}

/// VA2: 48 i.i.d. draws from U(0, u).
pub fn vanilla_uniform(u: f64, seed: u64) -> Result<DailyLoadVector> {
    if !(u > 0.0 && u.is_finite()) {
        return Err(Error::Validation(format!("uniform bound must be positive, got {u}")));
    }
    let mut rng = stream_rng(seed, 0);
    DailyLoadVector::new(
        (0..SLOTS_PER_DAY).map(|_| rng.random_range(0.0..u)).collect(),
        Origin::Synthetic { seed },
    )
}
