//! Named architecture presets: three defender models (f_*) and three
//! attacker substitutes (fp_*), plus reduced variants used by gradient
//! checks.
//!
//! Stacked LSTMs return full sequences except the last, whose final hidden
//! state feeds the softmax head. CNN presets reshape the 48 readings to a
//! 6x8 grid (reading i -> row i/8, column i%8) and use 3x3 valid
//! convolutions, so shapes run 6x8 -> 4x6 -> 2x4 -> pooled 1x2 -> flatten.

use super::layer::{Activation, LayerSpec};
use super::model::{InputShape, ModelArchitecture};
use crate::error::{Error, Result};

fn dense(units: usize) -> LayerSpec {
    LayerSpec::Dense { units, activation: Activation::Relu }
}

fn head() -> LayerSpec {
    LayerSpec::Dense { units: 2, activation: Activation::Softmax }
}

fn lstm_seq(units: usize) -> LayerSpec {
    LayerSpec::Lstm { units, return_sequences: true }
}

fn lstm_last(units: usize) -> LayerSpec {
    LayerSpec::Lstm { units, return_sequences: false }
}

fn dropout() -> LayerSpec {
    LayerSpec::Dropout { rate: 0.25 }
}

fn fnn(name: &str, widths: &[usize], tail: &[usize]) -> ModelArchitecture {
    let mut layers: Vec<LayerSpec> = widths.iter().map(|&u| dense(u)).collect();
    layers.push(dropout());
    for &u in tail {
        layers.push(dense(u));
        layers.push(dropout());
    }
    layers.push(head());
    ModelArchitecture {
        name: name.into(),
        input_shape: InputShape::Vector { len: 48 },
        layers,
    }
}

fn rnn(name: &str, units: [usize; 3]) -> ModelArchitecture {
    ModelArchitecture {
        name: name.into(),
        input_shape: InputShape::Sequence { steps: 48, features: 1 },
        layers: vec![
            lstm_seq(units[0]),
            dropout(),
            lstm_seq(units[1]),
            dropout(),
            lstm_last(units[2]),
            head(),
        ],
    }
}

fn cnn(name: &str, filters: [usize; 2], dense_units: usize) -> ModelArchitecture {
    ModelArchitecture {
        name: name.into(),
        input_shape: InputShape::Vector { len: 48 },
        layers: vec![
            LayerSpec::Reshape { rows: 6, cols: 8 },
            LayerSpec::Conv2d { filters: filters[0] },
            LayerSpec::Conv2d { filters: filters[1] },
            LayerSpec::MaxPool2d,
            dropout(),
            LayerSpec::Flatten,
            dense(dense_units),
            head(),
        ],
    }
}

/// All preset names accepted by [`architecture`].
pub const PRESET_NAMES: [&str; 6] = ["f_fnn", "fp_fnn", "f_rnn", "fp_rnn", "f_cnn", "fp_cnn"];

/// Reduced-width counterparts with identical topology, small enough for
/// finite-difference oracles.
pub const SMALL_PRESET_NAMES: [&str; 6] = [
    "f_fnn_small",
    "fp_fnn_small",
    "f_rnn_small",
    "fp_rnn_small",
    "f_cnn_small",
    "fp_cnn_small",
];

/// Look up an architecture preset by name.
pub fn architecture(name: &str) -> Result<ModelArchitecture> {
    let arch = match name {
        "f_fnn" => fnn(name, &[128, 256, 128], &[32]),
        "fp_fnn" => fnn(name, &[168, 328, 168, 128], &[64]),
        "f_rnn" => rnn(name, [256, 168, 128]),
        "fp_rnn" => rnn(name, [246, 148, 108]),
        "f_cnn" => cnn(name, [128, 128], 32),
        "fp_cnn" => cnn(name, [156, 214], 48),
        "f_fnn_small" => fnn(name, &[12, 24, 12], &[6]),
        "fp_fnn_small" => fnn(name, &[14, 28, 14, 10], &[8]),
        "f_rnn_small" => rnn(name, [16, 12, 8]),
        "fp_rnn_small" => rnn(name, [14, 10, 6]),
        "f_cnn_small" => cnn(name, [8, 8], 8),
        "fp_cnn_small" => cnn(name, [10, 12], 10),
        other => {
            return Err(Error::Validation(format!(
                "unknown architecture `{other}`; presets: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    arch.validate()?;
    Ok(arch)
}
