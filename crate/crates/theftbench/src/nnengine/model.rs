//! Model assembly: architecture validation, forward passes, exact input
//! gradients, and model-file persistence.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataio::{DailyLoadVector, Label, SLOTS_PER_DAY};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

use super::layer::{
    backward_layer, forward_layer, Activation, Batch, DataShape, ForwardMode, LayerCache,
    LayerGrads, LayerParams, LayerSpec,
};
use super::tensor::Tensor;

pub const MODEL_FILE_VERSION: &str = "theftbench-model/1";

/// How the 48-reading vector enters the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputShape {
    Vector { len: usize },
    Sequence { steps: usize, features: usize },
}

impl InputShape {
    pub fn data_shape(&self) -> DataShape {
        match self {
            InputShape::Vector { len } => DataShape::Flat(*len),
            InputShape::Sequence { steps, features } => DataShape::Seq {
                steps: *steps,
                features: *features,
            },
        }
    }

    pub fn total_len(&self) -> usize {
        match self {
            InputShape::Vector { len } => *len,
            InputShape::Sequence { steps, features } => steps * features,
        }
    }
}

/// A named layer-spec sequence ending in Dense(2, Softmax).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArchitecture {
    pub name: String,
    pub input_shape: InputShape,
    pub layers: Vec<LayerSpec>,
}

impl ModelArchitecture {
    /// Layer-by-layer output shapes; fails on any incompatible transition or
    /// if the head is not Dense(2, Softmax).
    pub fn shape_table(&self) -> Result<Vec<DataShape>> {
        if self.input_shape.total_len() != SLOTS_PER_DAY {
            return Err(Error::Shape(format!(
                "input shape must cover {SLOTS_PER_DAY} readings"
            )));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.data_shape();
        for spec in &self.layers {
            cur = spec.output_shape(&cur)?;
            shapes.push(cur);
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { units: 2, activation: Activation::Softmax }) => {}
            _ => {
                return Err(Error::Shape(format!(
                    "architecture {} must end in Dense(2, Softmax)",
                    self.name
                )))
            }
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.shape_table().map(|_| ())
    }
}

/// Training provenance recorded on a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_fpr: f64,
}

/// An architecture plus learned parameters. Immutable after construction;
/// forward and gradient queries are read-only and safe to share.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    arch: ModelArchitecture,
    params: Vec<LayerParams>,
    pub train_meta: Option<TrainMeta>,
}

impl TrainedModel {
    /// Fresh model with seed-deterministic initial parameters.
    pub fn new_initialized(arch: ModelArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream_rng(seed, 0);
        let mut params = Vec::with_capacity(arch.layers.len());
        let mut shape = arch.input_shape.data_shape();
        for spec in &arch.layers {
            params.push(spec.init_params(&shape, &mut rng)?);
            shape = spec.output_shape(&shape)?;
        }
        Ok(Self { arch, params, train_meta: None })
    }

    /// Build a model from explicit parameters, checking shapes against the
    /// architecture.
    pub fn from_parts(arch: ModelArchitecture, params: Vec<LayerParams>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.layers.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter sets, got {}",
                arch.layers.len(),
                params.len()
            )));
        }
        let reference = TrainedModel::new_initialized(arch.clone(), 0)?;
        for (i, (got, want)) in params.iter().zip(&reference.params).enumerate() {
            if !same_param_shape(got, want) {
                return Err(Error::Shape(format!(
                    "layer {i} parameter shapes do not match architecture {}",
                    arch.name
                )));
            }
        }
        Ok(Self { arch, params, train_meta: None })
    }

    pub fn arch(&self) -> &ModelArchitecture {
        &self.arch
    }

    pub(crate) fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    fn input_batch(&self, x: &ArrayView2<f64>) -> Batch {
        match self.arch.input_shape {
            InputShape::Vector { .. } => Batch::Flat(x.to_owned()),
            InputShape::Sequence { steps, features } => {
                let batch = x.nrows();
                let mut seq = Vec::with_capacity(steps);
                for t in 0..steps {
                    let mut m = Array2::zeros((batch, features));
                    for b in 0..batch {
                        for f in 0..features {
                            m[[b, f]] = x[[b, t * features + f]];
                        }
                    }
                    seq.push(m);
                }
                Batch::Seq(seq)
            }
        }
    }

    fn input_grad_to_matrix(&self, grad: Batch) -> Array2<f64> {
        match (self.arch.input_shape, grad) {
            (InputShape::Vector { .. }, Batch::Flat(g)) => g,
            (InputShape::Sequence { steps, features }, Batch::Seq(gs)) => {
                let batch = gs.first().map_or(0, |a| a.nrows());
                let mut out = Array2::zeros((batch, steps * features));
                for (t, g) in gs.iter().enumerate() {
                    for b in 0..batch {
                        for f in 0..features {
                            out[[b, t * features + f]] = g[[b, f]];
                        }
                    }
                }
                out
            }
            _ => unreachable!("input batch kind is fixed by the architecture"),
        }
    }

    /// Forward to raw logits. `check_finite` reports the first layer that
    /// produced a non-finite intermediate.
    pub(crate) fn run(
        &self,
        x: &ArrayView2<f64>,
        mode: &mut ForwardMode<'_>,
        keep_cache: bool,
        check_finite: bool,
    ) -> Result<(Array2<f64>, Vec<LayerCache>)> {
        if x.ncols() != self.arch.input_shape.total_len() {
            return Err(Error::Shape(format!(
                "model {} expects {} readings, got {}",
                self.arch.name,
                self.arch.input_shape.total_len(),
                x.ncols()
            )));
        }
        let mut cur = self.input_batch(x);
        let mut caches = Vec::with_capacity(if keep_cache { self.arch.layers.len() } else { 0 });
        for (i, (spec, params)) in self.arch.layers.iter().zip(&self.params).enumerate() {
            let (out, cache) = forward_layer(spec, params, cur, mode, keep_cache)?;
            if check_finite && !out.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite intermediate after layer {i} ({spec:?}) of {}",
                    self.arch.name
                )));
            }
            if let Some(c) = cache {
                caches.push(c);
            }
            cur = out;
        }
        match cur {
            Batch::Flat(logits) => Ok((logits, caches)),
            _ => Err(Error::Shape("model head must produce a flat batch".into())),
        }
    }

    /// Backpropagate logits gradients to the input readings and, optionally,
    /// to every parameter.
    pub(crate) fn backward(
        &self,
        caches: &[LayerCache],
        dlogits: Array2<f64>,
        want_params: bool,
    ) -> (Array2<f64>, Option<Vec<LayerGrads>>) {
        let mut grad = Batch::Flat(dlogits);
        let mut param_grads = want_params.then(|| Vec::with_capacity(self.arch.layers.len()));
        for i in (0..self.arch.layers.len()).rev() {
            let (g_in, g_params) =
                backward_layer(&self.arch.layers[i], &self.params[i], &caches[i], grad, want_params);
            grad = g_in;
            if let (Some(acc), Some(g)) = (param_grads.as_mut(), g_params) {
                acc.push(g);
            }
        }
        if let Some(acc) = param_grads.as_mut() {
            acc.reverse();
        }
        (self.input_grad_to_matrix(grad), param_grads)
    }

    /// Class probabilities for a batch of rows.
    pub fn forward_batch(
        &self,
        x: &ArrayView2<f64>,
        mode: &mut ForwardMode<'_>,
    ) -> Result<Array2<f64>> {
        let (logits, _) = self.run(x, mode, false, false)?;
        Ok(softmax_rows(&logits))
    }

    /// (p_normal, p_theft) for one daily load vector.
    pub fn forward(&self, x: &DailyLoadVector, mode: &mut ForwardMode<'_>) -> Result<(f64, f64)> {
        let row = readings_matrix(std::slice::from_ref(x));
        let probs = self.forward_batch(&row.view(), mode)?;
        Ok((probs[[0, 0]], probs[[0, 1]]))
    }

    /// Inference-mode class decisions; ties go to Normal.
    pub fn classify_batch(&self, x: &ArrayView2<f64>) -> Result<Vec<Label>> {
        let probs = self.forward_batch(x, &mut ForwardMode::Infer)?;
        Ok(probs
            .axis_iter(Axis(0))
            .map(|p| if p[1] > p[0] { Label::Theft } else { Label::Normal })
            .collect())
    }

    pub fn classify(&self, x: &DailyLoadVector) -> Result<Label> {
        let row = readings_matrix(std::slice::from_ref(x));
        Ok(self.classify_batch(&row.view())?[0])
    }

    /// Cross-entropy loss of one sample under the inference graph.
    pub fn loss(&self, x: &DailyLoadVector, y: Label) -> Result<f64> {
        let row = readings_matrix(std::slice::from_ref(x));
        let (logits, _) = self.run(&row.view(), &mut ForwardMode::Infer, false, false)?;
        Ok(cross_entropy_row(&logits.row(0).to_owned(), y))
    }

    /// Loss and exact gradient of the loss w.r.t. the 48 input readings,
    /// one row per batch row. Dropout is disabled (inference graph).
    pub fn loss_and_input_gradient_batch(
        &self,
        x: &ArrayView2<f64>,
        ys: &[Label],
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        if ys.len() != x.nrows() {
            return Err(Error::Validation(format!(
                "{} labels for {} rows",
                ys.len(),
                x.nrows()
            )));
        }
        let (logits, caches) = self.run(x, &mut ForwardMode::Infer, true, true)?;
        let mut losses = Vec::with_capacity(ys.len());
        let mut dlogits = softmax_rows(&logits);
        for (i, y) in ys.iter().enumerate() {
            losses.push(cross_entropy_row(&logits.row(i).to_owned(), *y));
            dlogits[[i, *y as usize]] -= 1.0;
        }
        let (grad, _) = self.backward(&caches, dlogits, false);
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite input gradient from {}",
                self.arch.name
            )));
        }
        Ok((losses, grad))
    }

    /// Single-sample convenience wrapper.
    pub fn loss_and_input_gradient(
        &self,
        x: &DailyLoadVector,
        y: Label,
    ) -> Result<(f64, Vec<f64>)> {
        let row = readings_matrix(std::slice::from_ref(x));
        let (losses, grads) = self.loss_and_input_gradient_batch(&row.view(), &[y])?;
        Ok((losses[0], grads.row(0).to_vec()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            version: MODEL_FILE_VERSION.to_string(),
            arch: self.arch.clone(),
            params: self.params.iter().map(saved_params).collect(),
            train_meta: self.train_meta.clone(),
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Format(format!("model serialization failed: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: bad model file: {e}", path.display())))?;
        if file.version != MODEL_FILE_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported model version `{}`",
                path.display(),
                file.version
            )));
        }
        let params = file
            .params
            .iter()
            .map(runtime_params)
            .collect::<Result<Vec<_>>>()?;
        let mut model = TrainedModel::from_parts(file.arch, params)?;
        model.train_meta = file.train_meta;
        Ok(model)
    }
}

/// Stack daily load vectors into a readings matrix.
pub fn readings_matrix(vectors: &[DailyLoadVector]) -> Array2<f64> {
    let mut m = Array2::zeros((vectors.len(), SLOTS_PER_DAY));
    for (i, v) in vectors.iter().enumerate() {
        for (j, r) in v.readings().iter().enumerate() {
            m[[i, j]] = *r;
        }
    }
    m
}

/// Row-wise stable softmax; rows sum to 1 within 1e-9.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Numerically exact -log p_y via log-sum-exp.
pub fn cross_entropy_row(logits: &Array1<f64>, y: Label) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[y as usize]
}

fn same_param_shape(a: &LayerParams, b: &LayerParams) -> bool {
    match (a, b) {
        (LayerParams::Dense { w: w1, b: b1 }, LayerParams::Dense { w: w2, b: b2 })
        | (LayerParams::Conv { w: w1, b: b1 }, LayerParams::Conv { w: w2, b: b2 }) => {
            w1.dim() == w2.dim() && b1.len() == b2.len()
        }
        (
            LayerParams::Lstm { wx: x1, wh: h1, b: b1 },
            LayerParams::Lstm { wx: x2, wh: h2, b: b2 },
        ) => x1.dim() == x2.dim() && h1.dim() == h2.dim() && b1.len() == b2.len(),
        (LayerParams::None, LayerParams::None) => true,
        _ => false,
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: String,
    arch: ModelArchitecture,
    params: Vec<SavedLayerParams>,
    train_meta: Option<TrainMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SavedLayerParams {
    Dense { w: Tensor, b: Tensor },
    Lstm { wx: Tensor, wh: Tensor, b: Tensor },
    Conv { w: Tensor, b: Tensor },
    None,
}

fn saved_params(p: &LayerParams) -> SavedLayerParams {
    match p {
        LayerParams::Dense { w, b } => SavedLayerParams::Dense {
            w: Tensor::from_array2(w),
            b: Tensor::from_array1(b),
        },
        LayerParams::Lstm { wx, wh, b } => SavedLayerParams::Lstm {
            wx: Tensor::from_array2(wx),
            wh: Tensor::from_array2(wh),
            b: Tensor::from_array1(b),
        },
        LayerParams::Conv { w, b } => SavedLayerParams::Conv {
            w: Tensor::from_array2(w),
            b: Tensor::from_array1(b),
        },
        LayerParams::None => SavedLayerParams::None,
    }
}

fn runtime_params(p: &SavedLayerParams) -> Result<LayerParams> {
    Ok(match p {
        SavedLayerParams::Dense { w, b } => LayerParams::Dense {
            w: w.to_array2()?,
            b: b.to_array1()?,
        },
        SavedLayerParams::Lstm { wx, wh, b } => LayerParams::Lstm {
            wx: wx.to_array2()?,
            wh: wh.to_array2()?,
            b: b.to_array1()?,
        },
        SavedLayerParams::Conv { w, b } => LayerParams::Conv {
            w: w.to_array2()?,
            b: b.to_array1()?,
        },
        SavedLayerParams::None => LayerParams::None,
    })
}
