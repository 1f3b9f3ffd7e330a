//! Layer kinds with batched forward and backward passes.
//!
//! Everything runs in 64-bit floats. Batches flow through layers as
//! [`Batch`] values; each layer's backward pass consumes the cache its
//! forward pass produced, so models stay immutable and shareable.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONV_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softmax,
    None,
}

/// One layer of a model architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { units: usize, activation: Activation },
    Lstm { units: usize, return_sequences: bool },
    Dropout { rate: f64 },
    /// 3x3 kernel, valid padding, stride 1, ReLU.
    Conv2d { filters: usize },
    /// 2x2 window, stride 2.
    MaxPool2d,
    Flatten,
    /// Reading index i maps to row i / cols, column i % cols.
    Reshape { rows: usize, cols: usize },
}

/// Logical shape of the data between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataShape {
    Flat(usize),
    Seq { steps: usize, features: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl std::fmt::Display for DataShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataShape::Flat(n) => write!(f, "{n}"),
            DataShape::Seq { steps, features } => write!(f, "{steps}x{features}"),
            DataShape::Image { channels, height, width } => {
                write!(f, "{channels}x{height}x{width}")
            }
        }
    }
}

impl LayerSpec {
    pub fn output_shape(&self, input: &DataShape) -> Result<DataShape> {
        let err = |msg: String| Err(Error::Shape(msg));
        match (self, input) {
            (LayerSpec::Dense { units, .. }, DataShape::Flat(_)) => {
                if *units == 0 {
                    return err("dense layer needs at least 1 unit".into());
                }
                Ok(DataShape::Flat(*units))
            }
            (LayerSpec::Lstm { units, return_sequences }, DataShape::Seq { steps, .. }) => {
                if *units == 0 {
                    return err("lstm layer needs at least 1 unit".into());
                }
                if *return_sequences {
                    Ok(DataShape::Seq { steps: *steps, features: *units })
                } else {
                    Ok(DataShape::Flat(*units))
                }
            }
            (LayerSpec::Dropout { rate }, shape) => {
                if !(0.0..1.0).contains(rate) {
                    return err(format!("dropout rate must lie in [0, 1), got {rate}"));
                }
                Ok(*shape)
            }
            (LayerSpec::Conv2d { filters }, DataShape::Image { height, width, .. }) => {
                if *filters == 0 {
                    return err("conv layer needs at least 1 filter".into());
                }
                if *height < CONV_KERNEL || *width < CONV_KERNEL {
                    return err(format!(
                        "image {height}x{width} too small for a {CONV_KERNEL}x{CONV_KERNEL} valid convolution"
                    ));
                }
                Ok(DataShape::Image {
                    channels: *filters,
                    height: height - CONV_KERNEL + 1,
                    width: width - CONV_KERNEL + 1,
                })
            }
            (LayerSpec::MaxPool2d, DataShape::Image { channels, height, width }) => {
                if *height < 2 || *width < 2 {
                    return err(format!("image {height}x{width} too small for 2x2 pooling"));
                }
                Ok(DataShape::Image {
                    channels: *channels,
                    height: height / 2,
                    width: width / 2,
                })
            }
            (LayerSpec::Flatten, DataShape::Image { channels, height, width }) => {
                Ok(DataShape::Flat(channels * height * width))
            }
            (LayerSpec::Reshape { rows, cols }, DataShape::Flat(n)) => {
                if rows * cols != *n {
                    return err(format!("cannot reshape {n} readings into {rows}x{cols}"));
                }
                Ok(DataShape::Image { channels: 1, height: *rows, width: *cols })
            }
            (spec, shape) => err(format!("layer {spec:?} cannot consume input shape {shape:?}")),
        }
    }

    /// Initialize parameters: fan-scaled uniform weights, zero biases, and an
    /// LSTM forget-gate bias of 1.
    pub fn init_params(&self, input: &DataShape, rng: &mut ChaCha8Rng) -> Result<LayerParams> {
        match (self, input) {
            (LayerSpec::Dense { units, .. }, DataShape::Flat(n)) => {
                let limit = (6.0 / (*n + *units) as f64).sqrt();
                let w = Array2::from_shape_fn((*n, *units), |_| rng.random_range(-limit..limit));
                Ok(LayerParams::Dense { w, b: Array1::zeros(*units) })
            }
            (LayerSpec::Lstm { units, .. }, DataShape::Seq { features, .. }) => {
                let u = *units;
                let lx = (6.0 / (*features + 4 * u) as f64).sqrt();
                let wx = Array2::from_shape_fn((*features, 4 * u), |_| rng.random_range(-lx..lx));
                let lh = (6.0 / (5 * u) as f64).sqrt();
                let wh = Array2::from_shape_fn((u, 4 * u), |_| rng.random_range(-lh..lh));
                let mut b = Array1::zeros(4 * u);
                b.slice_mut(s![u..2 * u]).fill(1.0);
                Ok(LayerParams::Lstm { wx, wh, b })
            }
            (LayerSpec::Conv2d { filters }, DataShape::Image { channels, .. }) => {
                let fan_in = channels * CONV_KERNEL * CONV_KERNEL;
                let limit = (6.0 / (fan_in + *filters) as f64).sqrt();
                let w = Array2::from_shape_fn((fan_in, *filters), |_| rng.random_range(-limit..limit));
                Ok(LayerParams::Conv { w, b: Array1::zeros(*filters) })
            }
            _ => Ok(LayerParams::None),
        }
    }
}

/// Learned parameters for one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Dense { w: Array2<f64>, b: Array1<f64> },
    /// Gate order along the 4U axis: input, forget, candidate, output.
    Lstm { wx: Array2<f64>, wh: Array2<f64>, b: Array1<f64> },
    /// Kernel flattened to (channels * 9, filters); column index kernel
    /// layout is channel-major, then kernel row, then kernel column.
    Conv { w: Array2<f64>, b: Array1<f64> },
    None,
}

impl LayerParams {
    pub fn zeros_like(&self) -> LayerParams {
        match self {
            LayerParams::Dense { w, b } => LayerParams::Dense {
                w: Array2::zeros(w.dim()),
                b: Array1::zeros(b.len()),
            },
            LayerParams::Lstm { wx, wh, b } => LayerParams::Lstm {
                wx: Array2::zeros(wx.dim()),
                wh: Array2::zeros(wh.dim()),
                b: Array1::zeros(b.len()),
            },
            LayerParams::Conv { w, b } => LayerParams::Conv {
                w: Array2::zeros(w.dim()),
                b: Array1::zeros(b.len()),
            },
            LayerParams::None => LayerParams::None,
        }
    }

    /// Flat views over every parameter array, in a fixed order.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            LayerParams::Dense { w, b } | LayerParams::Conv { w, b } => vec![
                w.as_slice_mut().expect("standard layout"),
                b.as_slice_mut().expect("standard layout"),
            ],
            LayerParams::Lstm { wx, wh, b } => vec![
                wx.as_slice_mut().expect("standard layout"),
                wh.as_slice_mut().expect("standard layout"),
                b.as_slice_mut().expect("standard layout"),
            ],
            LayerParams::None => vec![],
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        match self {
            LayerParams::Dense { w, b } | LayerParams::Conv { w, b } => vec![
                w.as_slice().expect("standard layout"),
                b.as_slice().expect("standard layout"),
            ],
            LayerParams::Lstm { wx, wh, b } => vec![
                wx.as_slice().expect("standard layout"),
                wh.as_slice().expect("standard layout"),
                b.as_slice().expect("standard layout"),
            ],
            LayerParams::None => vec![],
        }
    }
}

/// A batch of activations flowing between layers.
#[derive(Debug, Clone)]
pub enum Batch {
    /// batch x features
    Flat(Array2<f64>),
    /// One batch x features matrix per timestep.
    Seq(Vec<Array2<f64>>),
    /// batch x channels x height x width
    Image(Array4<f64>),
}

impl Batch {
    pub fn batch_len(&self) -> usize {
        match self {
            Batch::Flat(a) => a.nrows(),
            Batch::Seq(v) => v.first().map_or(0, |a| a.nrows()),
            Batch::Image(a) => a.dim().0,
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Batch::Flat(a) => a.iter().all(|v| v.is_finite()),
            Batch::Seq(v) => v.iter().all(|a| a.iter().all(|v| v.is_finite())),
            Batch::Image(a) => a.iter().all(|v| v.is_finite()),
        }
    }

    fn expect_flat(self) -> Array2<f64> {
        match self {
            Batch::Flat(a) => a,
            other => panic!("expected flat batch, got {other:?}"),
        }
    }

    fn expect_seq(self) -> Vec<Array2<f64>> {
        match self {
            Batch::Seq(v) => v,
            other => panic!("expected sequence batch, got {other:?}"),
        }
    }

    fn expect_image(self) -> Array4<f64> {
        match self {
            Batch::Image(a) => a,
            other => panic!("expected image batch, got {other:?}"),
        }
    }
}

/// Gradients with the same structure as [`LayerParams`].
pub type LayerGrads = LayerParams;

/// Per-layer state captured by a forward pass for use in backward.
#[derive(Debug)]
pub enum LayerCache {
    Dense {
        input: Array2<f64>,
        /// ReLU derivative (0/1); `None` for linear and softmax heads.
        mask: Option<Array2<f64>>,
    },
    Lstm {
        inputs: Vec<Array2<f64>>,
        steps: Vec<LstmStep>,
        return_sequences: bool,
    },
    Dropout {
        /// Inverted-dropout mask; `None` in inference mode (identity).
        mask: Option<Batch>,
    },
    Conv {
        cols: Array2<f64>,
        mask: Array2<f64>,
        in_dims: (usize, usize, usize, usize),
        out_dims: (usize, usize, usize, usize),
    },
    Pool {
        /// Window-local argmax (0..4) per output element, row-major.
        argmax: Vec<u8>,
        in_dims: (usize, usize, usize, usize),
        out_dims: (usize, usize, usize, usize),
    },
    Flatten {
        dims: (usize, usize, usize, usize),
    },
    Reshape {
        batch: usize,
        features: usize,
    },
}

#[derive(Debug)]
pub struct LstmStep {
    pub gate_i: Array2<f64>,
    pub gate_f: Array2<f64>,
    pub gate_g: Array2<f64>,
    pub gate_o: Array2<f64>,
    pub cell: Array2<f64>,
    pub tanh_cell: Array2<f64>,
    pub hidden: Array2<f64>,
}

/// Dropout behaviour for a forward pass.
pub enum ForwardMode<'a> {
    Infer,
    Train(&'a mut ChaCha8Rng),
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 - rate;
    Array2::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            1.0 / keep
        }
    })
}

/// Run one layer forward. `keep_cache` controls whether backward state is
/// retained.
pub fn forward_layer(
    spec: &LayerSpec,
    params: &LayerParams,
    input: Batch,
    mode: &mut ForwardMode<'_>,
    keep_cache: bool,
) -> Result<(Batch, Option<LayerCache>)> {
    match spec {
        LayerSpec::Dense { activation, .. } => {
            let x = input.expect_flat();
            let (w, b) = match params {
                LayerParams::Dense { w, b } => (w, b),
                _ => return Err(Error::Shape("dense layer missing dense params".into())),
            };
            let mut z = x.dot(w);
            z += b;
            let (out, mask) = match activation {
                Activation::Relu => {
                    let mask = z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    (&z * &mask, Some(mask))
                }
                // Softmax is applied by the model head on top of raw logits.
                Activation::Softmax | Activation::None => (z, None),
            };
            let cache = keep_cache.then(|| LayerCache::Dense { input: x, mask });
            Ok((Batch::Flat(out), cache))
        }
        LayerSpec::Lstm { units, return_sequences } => {
            let xs = input.expect_seq();
            let (wx, wh, b) = match params {
                LayerParams::Lstm { wx, wh, b } => (wx, wh, b),
                _ => return Err(Error::Shape("lstm layer missing lstm params".into())),
            };
            let u = *units;
            let batch = xs.first().map_or(0, |a| a.nrows());
            let t_len = xs.len();
            // Project every step's input with one large multiplication:
            // only the hidden-state term is sequential, and one big GEMM is
            // markedly faster than t_len small ones.
            let mut stacked = Array2::zeros((t_len * batch, wx.nrows()));
            for (t, x_t) in xs.iter().enumerate() {
                stacked.slice_mut(s![t * batch..(t + 1) * batch, ..]).assign(x_t);
            }
            let projected = stacked.dot(wx);
            let mut hidden = Array2::zeros((batch, u));
            let mut cell: Array2<f64> = Array2::zeros((batch, u));
            let mut steps = Vec::with_capacity(t_len);
            let mut outputs = return_sequences.then(|| Vec::with_capacity(t_len));
            for t in 0..t_len {
                let mut z = projected.slice(s![t * batch..(t + 1) * batch, ..]).to_owned();
                general_mat_mul(1.0, &hidden, wh, 1.0, &mut z);
                z += b;
                let gate_i = z.slice(s![.., 0..u]).mapv(sigmoid);
                let gate_f = z.slice(s![.., u..2 * u]).mapv(sigmoid);
                let gate_g = z.slice(s![.., 2 * u..3 * u]).mapv(f64::tanh);
                let gate_o = z.slice(s![.., 3 * u..4 * u]).mapv(sigmoid);
                cell = &gate_f * &cell + &gate_i * &gate_g;
                let tanh_cell = cell.mapv(f64::tanh);
                hidden = &gate_o * &tanh_cell;
                if let Some(outs) = outputs.as_mut() {
                    outs.push(hidden.clone());
                }
                steps.push(LstmStep {
                    gate_i,
                    gate_f,
                    gate_g,
                    gate_o,
                    cell: cell.clone(),
                    tanh_cell,
                    hidden: hidden.clone(),
                });
            }
            let out = match outputs {
                Some(outs) => Batch::Seq(outs),
                None => Batch::Flat(hidden),
            };
            let cache = keep_cache.then(|| LayerCache::Lstm {
                inputs: xs,
                steps,
                return_sequences: *return_sequences,
            });
            Ok((out, cache))
        }
        LayerSpec::Dropout { rate } => match mode {
            ForwardMode::Infer => {
                let cache = keep_cache.then(|| LayerCache::Dropout { mask: None });
                Ok((input, cache))
            }
            ForwardMode::Train(rng) => {
                let (out, mask) = match input {
                    Batch::Flat(a) => {
                        let m = dropout_mask(a.dim(), *rate, rng);
                        (Batch::Flat(&a * &m), Batch::Flat(m))
                    }
                    Batch::Seq(v) => {
                        let mut outs = Vec::with_capacity(v.len());
                        let mut masks = Vec::with_capacity(v.len());
                        for a in &v {
                            let m = dropout_mask(a.dim(), *rate, rng);
                            outs.push(a * &m);
                            masks.push(m);
                        }
                        (Batch::Seq(outs), Batch::Seq(masks))
                    }
                    Batch::Image(a) => {
                        let dims = a.dim();
                        let keep = 1.0 - *rate;
                        let m = Array4::from_shape_fn(dims, |_| {
                            if rng.random::<f64>() < *rate { 0.0 } else { 1.0 / keep }
                        });
                        (Batch::Image(&a * &m), Batch::Image(m))
                    }
                };
                let cache = keep_cache.then(|| LayerCache::Dropout { mask: Some(mask) });
                Ok((out, cache))
            }
        },
        LayerSpec::Conv2d { filters } => {
            let x = input.expect_image();
            let (w, b) = match params {
                LayerParams::Conv { w, b } => (w, b),
                _ => return Err(Error::Shape("conv layer missing conv params".into())),
            };
            let (batch, channels, h, wid) = x.dim();
            let oh = h - CONV_KERNEL + 1;
            let ow = wid - CONV_KERNEL + 1;
            let cols = im2col(&x);
            let mut z = cols.dot(w);
            z += b;
            let mask = z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let act = &z * &mask;
            let out = rows_to_image(&act, batch, *filters, oh, ow);
            let cache = keep_cache.then(|| LayerCache::Conv {
                cols,
                mask,
                in_dims: (batch, channels, h, wid),
                out_dims: (batch, *filters, oh, ow),
            });
            Ok((Batch::Image(out), cache))
        }
        LayerSpec::MaxPool2d => {
            let x = input.expect_image();
            let (batch, channels, h, w) = x.dim();
            let (oh, ow) = (h / 2, w / 2);
            let mut out = Array4::zeros((batch, channels, oh, ow));
            let mut argmax = Vec::with_capacity(batch * channels * oh * ow);
            for bi in 0..batch {
                for ci in 0..channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_k = 0u8;
                            for k in 0..4u8 {
                                let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                                let v = x[[bi, ci, 2 * oy + dy, 2 * ox + dx]];
                                if v > best {
                                    best = v;
                                    best_k = k;
                                }
                            }
                            out[[bi, ci, oy, ox]] = best;
                            argmax.push(best_k);
                        }
                    }
                }
            }
            let cache = keep_cache.then(|| LayerCache::Pool {
                argmax,
                in_dims: (batch, channels, h, w),
                out_dims: (batch, channels, oh, ow),
            });
            Ok((Batch::Image(out), cache))
        }
        LayerSpec::Flatten => {
            let x = input.expect_image();
            let dims = x.dim();
            let flat = x
                .into_shape_with_order((dims.0, dims.1 * dims.2 * dims.3))
                .expect("standard layout");
            let cache = keep_cache.then(|| LayerCache::Flatten { dims });
            Ok((Batch::Flat(flat), cache))
        }
        LayerSpec::Reshape { rows, cols } => {
            let x = input.expect_flat();
            let (batch, features) = x.dim();
            if features != rows * cols {
                return Err(Error::Shape(format!(
                    "cannot reshape {features} readings into {rows}x{cols}"
                )));
            }
            let img = x
                .into_shape_with_order((batch, 1, *rows, *cols))
                .expect("standard layout");
            let cache = keep_cache.then(|| LayerCache::Reshape { batch, features });
            Ok((Batch::Image(img), cache))
        }
    }
}

/// Run one layer backward. Returns the gradient w.r.t. the layer input and,
/// when `want_params`, the gradient w.r.t. the layer parameters.
pub fn backward_layer(
    spec: &LayerSpec,
    params: &LayerParams,
    cache: &LayerCache,
    grad_out: Batch,
    want_params: bool,
) -> (Batch, Option<LayerGrads>) {
    match (spec, cache) {
        (LayerSpec::Dense { .. }, LayerCache::Dense { input, mask }) => {
            let w = match params {
                LayerParams::Dense { w, .. } => w,
                _ => unreachable!("params validated at construction"),
            };
            let mut dz = grad_out.expect_flat();
            if let Some(mask) = mask {
                dz *= mask;
            }
            let dx = dz.dot(&w.t());
            let grads = want_params.then(|| LayerParams::Dense {
                w: input.t().dot(&dz),
                b: dz.sum_axis(Axis(0)),
            });
            (Batch::Flat(dx), grads)
        }
        (
            LayerSpec::Lstm { units, .. },
            LayerCache::Lstm { inputs, steps, return_sequences },
        ) => {
            let (wx, wh) = match params {
                LayerParams::Lstm { wx, wh, .. } => (wx, wh),
                _ => unreachable!("params validated at construction"),
            };
            let u = *units;
            let t_len = inputs.len();
            let batch = inputs.first().map_or(0, |a| a.nrows());
            let (seq_grads, last_grad) = if *return_sequences {
                (Some(grad_out.expect_seq()), None)
            } else {
                (None, Some(grad_out.expect_flat()))
            };
            // Only the recurrence through dh is sequential. The reverse loop
            // collects every step's pre-activation gradient into one stacked
            // matrix; the parameter and input gradients then come from three
            // large GEMMs instead of per-step ones.
            let mut dz_all: Array2<f64> = Array2::zeros((t_len * batch, 4 * u));
            let mut dh_next: Array2<f64> = Array2::zeros((batch, u));
            let mut dc_next: Array2<f64> = Array2::zeros((batch, u));
            let zeros = Array2::zeros((batch, u));
            for t in (0..t_len).rev() {
                let step = &steps[t];
                let dh = match (&seq_grads, &last_grad) {
                    (Some(gs), _) => &gs[t] + &dh_next,
                    (None, Some(g)) if t == t_len - 1 => g.clone(),
                    _ => dh_next.clone(),
                };
                let cell_prev = if t > 0 { &steps[t - 1].cell } else { &zeros };
                let dc = &dh * &step.gate_o * &step.tanh_cell.mapv(|v| 1.0 - v * v) + &dc_next;
                let mut dz = dz_all.slice_mut(s![t * batch..(t + 1) * batch, ..]);
                {
                    let di = &dc * &step.gate_g;
                    dz.slice_mut(s![.., 0..u])
                        .assign(&(&di * &step.gate_i * &step.gate_i.mapv(|v| 1.0 - v)));
                    let df = &dc * cell_prev;
                    dz.slice_mut(s![.., u..2 * u])
                        .assign(&(&df * &step.gate_f * &step.gate_f.mapv(|v| 1.0 - v)));
                    let dg = &dc * &step.gate_i;
                    dz.slice_mut(s![.., 2 * u..3 * u])
                        .assign(&(&dg * &step.gate_g.mapv(|v| 1.0 - v * v)));
                    let d_o = &dh * &step.tanh_cell;
                    dz.slice_mut(s![.., 3 * u..4 * u])
                        .assign(&(&d_o * &step.gate_o * &step.gate_o.mapv(|v| 1.0 - v)));
                }
                dh_next = dz_all.slice(s![t * batch..(t + 1) * batch, ..]).dot(&wh.t());
                dc_next = &dc * &step.gate_f;
            }
            let grads = want_params.then(|| {
                let mut x_stack = Array2::zeros((t_len * batch, wx.nrows()));
                let mut h_prev_stack = Array2::zeros((t_len * batch, u));
                for t in 0..t_len {
                    x_stack.slice_mut(s![t * batch..(t + 1) * batch, ..]).assign(&inputs[t]);
                    if t > 0 {
                        h_prev_stack
                            .slice_mut(s![t * batch..(t + 1) * batch, ..])
                            .assign(&steps[t - 1].hidden);
                    }
                }
                LayerParams::Lstm {
                    wx: x_stack.t().dot(&dz_all),
                    wh: h_prev_stack.t().dot(&dz_all),
                    b: dz_all.sum_axis(Axis(0)),
                }
            });
            let dx_all = dz_all.dot(&wx.t());
            let dxs: Vec<Array2<f64>> = (0..t_len)
                .map(|t| dx_all.slice(s![t * batch..(t + 1) * batch, ..]).to_owned())
                .collect();
            (Batch::Seq(dxs), grads)
        }
        (LayerSpec::Dropout { .. }, LayerCache::Dropout { mask }) => {
            let grads = want_params.then(|| LayerParams::None);
            let out = match mask {
                None => grad_out,
                Some(Batch::Flat(m)) => Batch::Flat(grad_out.expect_flat() * m),
                Some(Batch::Seq(ms)) => Batch::Seq(
                    grad_out
                        .expect_seq()
                        .iter()
                        .zip(ms)
                        .map(|(g, m)| g * m)
                        .collect(),
                ),
                Some(Batch::Image(m)) => Batch::Image(grad_out.expect_image() * m),
            };
            (out, grads)
        }
        (LayerSpec::Conv2d { .. }, LayerCache::Conv { cols, mask, in_dims, out_dims }) => {
            let w = match params {
                LayerParams::Conv { w, .. } => w,
                _ => unreachable!("params validated at construction"),
            };
            let g = grad_out.expect_image();
            let (batch, filters, oh, ow) = *out_dims;
            let g_rows = image_to_rows(&g, batch, filters, oh, ow);
            let dz = &g_rows * mask;
            let grads = want_params.then(|| LayerParams::Conv {
                w: cols.t().dot(&dz),
                b: dz.sum_axis(Axis(0)),
            });
            let dcols = dz.dot(&w.t());
            let dx = col2im(&dcols, *in_dims);
            (Batch::Image(dx), grads)
        }
        (LayerSpec::MaxPool2d, LayerCache::Pool { argmax, in_dims, out_dims }) => {
            let g = grad_out.expect_image();
            let (batch, channels, oh, ow) = *out_dims;
            let mut dx = Array4::zeros(*in_dims);
            let mut pos = 0usize;
            for bi in 0..batch {
                for ci in 0..channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let k = argmax[pos];
                            pos += 1;
                            let (dy, dxk) = ((k / 2) as usize, (k % 2) as usize);
                            dx[[bi, ci, 2 * oy + dy, 2 * ox + dxk]] += g[[bi, ci, oy, ox]];
                        }
                    }
                }
            }
            (Batch::Image(dx), want_params.then(|| LayerParams::None))
        }
        (LayerSpec::Flatten, LayerCache::Flatten { dims }) => {
            let g = grad_out.expect_flat();
            let img = g.into_shape_with_order(*dims).expect("standard layout");
            (Batch::Image(img), want_params.then(|| LayerParams::None))
        }
        (LayerSpec::Reshape { .. }, LayerCache::Reshape { batch, features }) => {
            let g = grad_out.expect_image();
            let flat = g
                .into_shape_with_order((*batch, *features))
                .expect("standard layout");
            (Batch::Flat(flat), want_params.then(|| LayerParams::None))
        }
        (spec, cache) => {
            panic!("mismatched layer/cache pair: {spec:?} vs {cache:?}")
        }
    }
}

/// Unfold 3x3 valid-convolution patches: one row per (batch, oy, ox),
/// columns channel-major then kernel row then kernel column.
fn im2col(x: &Array4<f64>) -> Array2<f64> {
    let (batch, channels, h, w) = x.dim();
    let k = CONV_KERNEL;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut cols = Array2::zeros((batch * oh * ow, channels * k * k));
    for bi in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                for ci in 0..channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            cols[[row, (ci * k + ky) * k + kx]] = x[[bi, ci, oy + ky, ox + kx]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Array2<f64>, in_dims: (usize, usize, usize, usize)) -> Array4<f64> {
    let (batch, channels, h, w) = in_dims;
    let k = CONV_KERNEL;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut dx = Array4::zeros(in_dims);
    for bi in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                for ci in 0..channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            dx[[bi, ci, oy + ky, ox + kx]] += dcols[[row, (ci * k + ky) * k + kx]];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// (batch * oh * ow, filters) rows back into (batch, filters, oh, ow).
fn rows_to_image(rows: &Array2<f64>, batch: usize, filters: usize, oh: usize, ow: usize) -> Array4<f64> {
    let mut out = Array4::zeros((batch, filters, oh, ow));
    for bi in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                for f in 0..filters {
                    out[[bi, f, oy, ox]] = rows[[row, f]];
                }
            }
        }
    }
    out
}

fn image_to_rows(img: &Array4<f64>, batch: usize, filters: usize, oh: usize, ow: usize) -> Array2<f64> {
    let mut out = Array2::zeros((batch * oh * ow, filters));
    for bi in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (bi * oh + oy) * ow + ox;
                for f in 0..filters {
                    out[[row, f]] = img[[bi, f, oy, ox]];
                }
            }
        }
    }
    out
}
