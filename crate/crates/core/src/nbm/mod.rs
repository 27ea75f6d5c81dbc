//! LSTM normal-behaviour model with exact gradients and a flat parameter
//! vector that the federation layer can average.

mod checkpoint;
mod network;
mod train;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scada_data::{WindowSample, FEATURE_CHANNELS};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use network::{forward, forward_batch};
pub use train::{
    evaluate_loss, evaluate_mae, loss_and_grad, predict, train_epochs, AdamConfig, EpochLoss,
    LocalTrainer, LossKind, Optimizer, ProximalTerm, TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub window_len: usize,
    pub lstm_sizes: Vec<usize>,
    pub fc_sizes: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: FEATURE_CHANNELS,
            window_len: 144,
            lstm_sizes: vec![16, 64],
            fc_sizes: vec![64, 32],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("model: {what}")));
        if self.input_channels == 0 || self.window_len == 0 {
            return bad("input_channels and window_len must be >= 1");
        }
        if self.lstm_sizes.is_empty() {
            return bad("at least one LSTM layer is required");
        }
        if self
            .lstm_sizes
            .iter()
            .chain(&self.fc_sizes)
            .any(|&s| s == 0)
        {
            return bad("layer sizes must be >= 1");
        }
        Ok(())
    }

    /// Stable 64-bit fingerprint; equal configs give equal layouts.
    pub fn config_hash(&self) -> u64 {
        let join = |v: &[usize]| {
            v.iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let canon = format!(
            "fednbm-lstm-v1;in={};win={};lstm={};fc={}",
            self.input_channels,
            self.window_len,
            join(&self.lstm_sizes),
            join(&self.fc_sizes)
        );
        let digest = Sha256::digest(canon.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(b)
    }

    /// Tensor registry in storage order.
    ///
    /// LSTM gate rows are ordered input, forget, cell, output.
    pub fn layout(&self) -> Layout {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let size: usize = shape.iter().product();
            tensors.push(TensorSpec {
                name,
                shape,
                offset,
            });
            offset += size;
        };
        let mut input = self.input_channels;
        for (l, &h) in self.lstm_sizes.iter().enumerate() {
            push(format!("lstm{l}.w_ih"), vec![4 * h, input]);
            push(format!("lstm{l}.w_hh"), vec![4 * h, h]);
            push(format!("lstm{l}.bias"), vec![4 * h]);
            input = h;
        }
        for (k, &out) in self.fc_sizes.iter().enumerate() {
            push(format!("fc{k}.weight"), vec![out, input]);
            push(format!("fc{k}.bias"), vec![out]);
            input = out;
        }
        push("out.weight".into(), vec![1, input]);
        push("out.bias".into(), vec![1]);
        Layout {
            tensors,
            len: offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.size()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub len: usize,
}

impl Layout {
    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Flat parameter vector plus the registry describing it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub values: Vec<f64>,
    config: Arc<ModelConfig>,
    layout: Arc<Layout>,
    config_hash: u64,
}

impl ModelParameters {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        Ok(Self {
            values: vec![0.0; layout.len],
            config_hash: config.config_hash(),
            config: Arc::new(config.clone()),
            layout: Arc::new(layout),
        })
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.layout.len {
            return Err(Error::contract(format!(
                "parameter vector has {} values, layout expects {}",
                values.len(),
                self.layout.len
            )));
        }
        Ok(Self {
            values,
            config: Arc::clone(&self.config),
            layout: Arc::clone(&self.layout),
            config_hash: self.config_hash,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|t| &self.values[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layout.get(name)?.range();
        Some(&mut self.values[r])
    }

    pub fn same_layout(&self, other: &ModelParameters) -> bool {
        self.config_hash == other.config_hash && self.values.len() == other.values.len()
    }

    pub fn ensure_same_layout(&self, other: &ModelParameters) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "layout mismatch: config hash {:016x} ({} values) vs {:016x} ({} values)",
                self.config_hash,
                self.values.len(),
                other.config_hash,
                other.values.len()
            )))
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Checks that a window matches the configured input shape.
    pub fn check_input(&self, sample: &WindowSample) -> Result<()> {
        let want = (self.config.window_len, self.config.input_channels);
        let got = (sample.window_len(), FEATURE_CHANNELS);
        if want != got {
            return Err(Error::contract(format!(
                "input shape {}x{} does not match model {}x{}",
                got.0, got.1, want.0, want.1
            )));
        }
        Ok(())
    }
}

/// Deterministic initialization: weights uniform in ±sqrt(1/fan_in), biases
/// zero, LSTM forget-gate biases one.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParameters> {
    let mut params = ModelParameters::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = Arc::clone(&params.layout);
    for t in &layout.tensors {
        let slot = &mut params.values[t.range()];
        if t.shape.len() == 2 {
            let bound = (1.0 / t.shape[1] as f64).sqrt();
            for v in slot.iter_mut() {
                *v = rng.gen_range(-bound..=bound);
            }
        } else if t.name.starts_with("lstm") {
            let h = t.shape[0] / 4;
            slot[h..2 * h].fill(1.0);
        }
    }
    Ok(params)
}

/// Euclidean distance between two parameter vectors of the same layout.
pub fn params_distance(a: &ModelParameters, b: &ModelParameters) -> Result<f64> {
    a.ensure_same_layout(b)?;
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}
