//! Mini-batch training with Adam and seed-deterministic shuffling, plus
//! model evaluation.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::{Label, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

use super::layer::{ForwardMode, LayerGrads, LayerParams};
use super::model::{
    cross_entropy_row, readings_matrix, softmax_rows, ModelArchitecture, TrainMeta, TrainedModel,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub validation_fraction: f64,
    /// Stop after this many epochs without validation-loss improvement.
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            validation_fraction: 0.2,
            early_stop_patience: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Validation("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Validation("learning rate must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Validation("validation fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Confusion counts and derived metrics. Theft is the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Normals misclassified as theft / total normals.
    pub fpr: f64,
    pub true_theft: usize,
    pub true_normal: usize,
    pub false_theft: usize,
    pub false_normal: usize,
    pub total: usize,
}

// Substream roles under the training seed. Substream 0 feeds parameter init.
const STREAM_SPLIT: u64 = 1;
const STREAM_EPOCH_BASE: u64 = 16;

fn dropout_stream(epoch: usize, batch_idx: usize) -> u64 {
    // disjoint from the epoch-shuffle streams
    (1 << 40) + ((epoch as u64) << 20) + batch_idx as u64
}

struct Adam {
    m: Vec<LayerGrads>,
    v: Vec<LayerGrads>,
    t: u64,
}

impl Adam {
    fn new(params: &[LayerParams]) -> Self {
        Self {
            m: params.iter().map(LayerParams::zeros_like).collect(),
            v: params.iter().map(LayerParams::zeros_like).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [LayerParams], grads: &[LayerGrads], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.adam_beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.adam_beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let gs = g.slices();
            let ms = m.slices_mut();
            // borrow v separately to keep slice lifetimes disjoint
            for (((ps, gs), ms), vs) in p
                .slices_mut()
                .into_iter()
                .zip(gs)
                .zip(ms)
                .zip(v.slices_mut())
            {
                for i in 0..ps.len() {
                    ms[i] = cfg.adam_beta1 * ms[i] + (1.0 - cfg.adam_beta1) * gs[i];
                    vs[i] = cfg.adam_beta2 * vs[i] + (1.0 - cfg.adam_beta2) * gs[i] * gs[i];
                    let m_hat = ms[i] / bc1;
                    let v_hat = vs[i] / bc2;
                    ps[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
                }
            }
        }
    }
}

/// Train an architecture on a labeled dataset. Deterministic per
/// `cfg.seed`: the 80/20-style split, per-epoch shuffles, dropout masks,
/// and parameter init all derive from it.
pub fn train_model(
    arch: ModelArchitecture,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Validation("training dataset is empty".into()));
    }
    let has_normal = ds.samples.iter().any(|(_, l)| *l == Label::Normal);
    let has_theft = ds.samples.iter().any(|(_, l)| *l == Label::Theft);
    if !has_normal || !has_theft {
        return Err(Error::Validation("training dataset must contain both classes".into()));
    }

    let vectors: Vec<_> = ds.samples.iter().map(|(v, _)| v.clone()).collect();
    let labels: Vec<Label> = ds.samples.iter().map(|(_, l)| *l).collect();
    let x_all = readings_matrix(&vectors);

    let mut indices: Vec<usize> = (0..ds.len()).collect();
    indices.shuffle(&mut stream_rng(cfg.seed, STREAM_SPLIT));
    let val_n = ((ds.len() as f64 * cfg.validation_fraction).round() as usize)
        .clamp(1, ds.len() - 1);
    let (val_idx, train_idx) = indices.split_at(val_n);
    let mut train_idx = train_idx.to_vec();

    let mut model = TrainedModel::new_initialized(arch, cfg.seed)?;

    let mut adam = Adam::new(model.params());
    let mut best: Option<(f64, Vec<LayerParams>, TrainMeta)> = None;
    let mut stale = 0usize;
    let mut last_train_loss;

    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut stream_rng(cfg.seed, STREAM_EPOCH_BASE + epoch as u64));
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (batch_idx, chunk) in train_idx.chunks(cfg.batch_size).enumerate() {
            let xb = gather_rows(&x_all, chunk);
            let yb: Vec<Label> = chunk.iter().map(|&i| labels[i]).collect();
            let mut rng = stream_rng(cfg.seed, dropout_stream(epoch, batch_idx));
            let (logits, caches) =
                model.run(&xb.view(), &mut ForwardMode::Train(&mut rng), true, false)?;
            let bn = chunk.len() as f64;
            let mut batch_loss = 0.0;
            let mut dlogits = softmax_rows(&logits);
            for (i, y) in yb.iter().enumerate() {
                batch_loss += cross_entropy_row(&logits.row(i).to_owned(), *y);
                dlogits[[i, *y as usize]] -= 1.0;
            }
            batch_loss /= bn;
            if !batch_loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    detail: format!("batch {batch_idx} loss became {batch_loss}"),
                });
            }
            dlogits /= bn;
            let (_, grads) = model.backward(&caches, dlogits, true);
            adam.step(model.params_mut(), &grads.expect("requested"), cfg);
            epoch_loss += batch_loss * bn;
            seen += chunk.len();
        }
        last_train_loss = epoch_loss / seen as f64;

        let (val_loss, val_metrics) = score_subset(&model, &x_all, &labels, val_idx)?;
        if !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                detail: format!("validation loss became {val_loss}"),
            });
        }
        let improved = best.as_ref().map_or(true, |(b, _, _)| val_loss < *b - 1e-9);
        if improved {
            best = Some((
                val_loss,
                model.params().to_vec(),
                TrainMeta {
                    seed: cfg.seed,
                    epochs_run: epoch + 1,
                    final_train_loss: last_train_loss,
                    val_loss,
                    val_accuracy: val_metrics.accuracy,
                    val_fpr: val_metrics.fpr,
                },
            ));
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.early_stop_patience {
                break;
            }
        }
    }

    let (_, best_params, meta) = best.expect("at least one epoch ran");
    let mut out = TrainedModel::from_parts(model.arch().clone(), best_params)?;
    out.train_meta = Some(meta);
    Ok(out)
}

fn gather_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), x.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.slice_mut(s![r, ..]).assign(&x.row(i));
    }
    out
}

fn score_subset(
    model: &TrainedModel,
    x_all: &Array2<f64>,
    labels: &[Label],
    idx: &[usize],
) -> Result<(f64, Metrics)> {
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(256) {
        let xb = gather_rows(x_all, chunk);
        let (logits, _) = model.run(&xb.view(), &mut ForwardMode::Infer, false, false)?;
        let probs = softmax_rows(&logits);
        for (i, &sample) in chunk.iter().enumerate() {
            loss += cross_entropy_row(&logits.row(i).to_owned(), labels[sample]);
            preds.push(if probs[[i, 1]] > probs[[i, 0]] {
                Label::Theft
            } else {
                Label::Normal
            });
        }
    }
    let truth: Vec<Label> = idx.iter().map(|&i| labels[i]).collect();
    Ok((loss / idx.len() as f64, confusion(&truth, &preds)))
}

/// Confusion counts for (truth, prediction) pairs.
pub fn confusion(truth: &[Label], preds: &[Label]) -> Metrics {
    let mut tp = 0;
    let mut tn = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (t, p) in truth.iter().zip(preds) {
        match (t, p) {
            (Label::Theft, Label::Theft) => tp += 1,
            (Label::Normal, Label::Normal) => tn += 1,
            (Label::Normal, Label::Theft) => fp += 1,
            (Label::Theft, Label::Normal) => fn_ += 1,
        }
    }
    let total = truth.len();
    let normals = tn + fp;
    Metrics {
        accuracy: if total == 0 { 0.0 } else { (tp + tn) as f64 / total as f64 },
        fpr: if normals == 0 { 0.0 } else { fp as f64 / normals as f64 },
        true_theft: tp,
        true_normal: tn,
        false_theft: fp,
        false_normal: fn_,
        total,
    }
}

/// Inference-mode metrics of a model over a labeled dataset.
pub fn evaluate_model(model: &TrainedModel, ds: &LabeledDataset) -> Result<Metrics> {
    if ds.is_empty() {
        return Err(Error::Validation("evaluation dataset is empty".into()));
    }
    let vectors: Vec<_> = ds.samples.iter().map(|(v, _)| v.clone()).collect();
    let truth: Vec<Label> = ds.samples.iter().map(|(_, l)| *l).collect();
    let x = readings_matrix(&vectors);
    let mut preds = Vec::with_capacity(ds.len());
    for chunk_start in (0..ds.len()).step_by(256) {
        let end = (chunk_start + 256).min(ds.len());
        let xb = x.slice(s![chunk_start..end, ..]);
        preds.extend(model.classify_batch(&xb)?);
    }
    Ok(confusion(&truth, &preds))
}
