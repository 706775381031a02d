//! Decoder-only transformer with continuous 5-dim outputs.
//!
//! Pre-norm blocks (causal self-attention, then a 4× GELU MLP), learned
//! positional embeddings, a linear 57→d_model input map and an untied
//! d_model→5 output head. Parameter counts include every trainable tensor:
//! embeddings, positional table, layer norms, biases and the head.

mod checkpoint;
mod forward;
mod gradcheck;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{batch_tokens, forward, forward_tape, ParamVars};
pub use gradcheck::{grad_check, prediction_gradients, GradCheckReport};
pub use train::{
    default_checkpoint_schedule, masked_mse, scale_hyperparams, train_step, AdamState, ModelState,
    TrainConfig,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::{CONTEXT_LEN, TOKEN_DIM};
use crate::dynsys::STATE_DIM;
use crate::error::ModelError;
use crate::nn::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizePreset {
    Tiny,
    Small,
    Medium,
    Big,
    Custom,
}

impl std::str::FromStr for SizePreset {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Ok(SizePreset::Tiny),
            "small" => Ok(SizePreset::Small),
            "medium" => Ok(SizePreset::Medium),
            "big" => Ok(SizePreset::Big),
            other => Err(ModelError::UnknownPreset(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub context_len: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub size_name: SizePreset,
}

impl ModelConfig {
    pub fn preset(size: SizePreset) -> Result<Self, ModelError> {
        let (n_layers, d_model, n_heads, d_head) = match size {
            SizePreset::Tiny => (3, 72, 6, 12),
            SizePreset::Small => (6, 96, 6, 16),
            SizePreset::Medium => (12, 128, 8, 16),
            SizePreset::Big => (24, 192, 12, 16),
            SizePreset::Custom => return Err(ModelError::UnknownPreset("custom".into())),
        };
        Ok(Self {
            n_layers,
            d_model,
            n_heads,
            d_head,
            context_len: CONTEXT_LEN,
            in_dim: TOKEN_DIM,
            out_dim: STATE_DIM,
            size_name: size,
        })
    }

    pub fn tiny() -> Self {
        Self::preset(SizePreset::Tiny).expect("preset")
    }

    pub fn medium() -> Self {
        Self::preset(SizePreset::Medium).expect("preset")
    }

    pub fn custom(n_layers: usize, d_model: usize, n_heads: usize, d_head: usize) -> Result<Self, ModelError> {
        let cfg = Self {
            n_layers,
            d_model,
            n_heads,
            d_head,
            context_len: CONTEXT_LEN,
            in_dim: TOKEN_DIM,
            out_dim: STATE_DIM,
            size_name: SizePreset::Custom,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_heads * self.d_head != self.d_model || self.n_heads == 0 {
            return Err(ModelError::InvalidDims {
                n_heads: self.n_heads,
                d_head: self.d_head,
                d_model: self.d_model,
            });
        }
        Ok(())
    }

    pub fn d_mlp(&self) -> usize {
        4 * self.d_model
    }
}

/// Tensor indices of one transformer block inside [`Transformer::tensors`].
#[derive(Clone, Copy, Debug)]
pub struct LayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

pub const W_IN: usize = 0;
pub const B_IN: usize = 1;
pub const POS: usize = 2;
const PER_LAYER: usize = 12;

/// Indices of the final layer norm and output head.
#[derive(Clone, Copy, Debug)]
pub struct HeadIdx {
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub w_out: usize,
    pub b_out: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<S> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<S>>,
}

fn tensor_specs(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = cfg.d_model;
    let mut specs = vec![
        ("embed.w_in".to_string(), cfg.in_dim, d),
        ("embed.b_in".to_string(), 1, d),
        ("embed.pos".to_string(), cfg.context_len, d),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("h{l}.{s}");
        specs.extend([
            (p("ln1.g"), 1, d),
            (p("ln1.b"), 1, d),
            (p("attn.w_qkv"), d, 3 * d),
            (p("attn.b_qkv"), 1, 3 * d),
            (p("attn.w_o"), d, d),
            (p("attn.b_o"), 1, d),
            (p("ln2.g"), 1, d),
            (p("ln2.b"), 1, d),
            (p("mlp.w_fc"), d, cfg.d_mlp()),
            (p("mlp.b_fc"), 1, cfg.d_mlp()),
            (p("mlp.w_proj"), cfg.d_mlp(), d),
            (p("mlp.b_proj"), 1, d),
        ]);
    }
    specs.extend([
        ("ln_f.g".to_string(), 1, d),
        ("ln_f.b".to_string(), 1, d),
        ("head.w_out".to_string(), d, cfg.out_dim),
        ("head.b_out".to_string(), 1, cfg.out_dim),
    ]);
    specs
}

/// Parameter names in storage order.
pub fn tensor_names(cfg: &ModelConfig) -> Vec<String> {
    tensor_specs(cfg).into_iter().map(|(n, _, _)| n).collect()
}

/// Total trainable scalar count.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    tensor_specs(cfg).iter().map(|(_, r, c)| r * c).sum()
}

impl<S: Scalar> Transformer<S> {
    /// GPT-2 style initialization: weights N(0, 0.02), residual output
    /// projections N(0, 0.02/√(2L)), positional table N(0, 0.01), zero
    /// biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std_w = 0.02;
        let std_resid = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        let tensors = tensor_specs(&config)
            .into_iter()
            .map(|(name, rows, cols)| {
                let leaf = name.rsplit('.').next().unwrap_or("");
                let std = match leaf {
                    "g" => return Tensor::filled(rows, cols, S::one()),
                    "b" | "b_in" | "b_qkv" | "b_o" | "b_fc" | "b_proj" | "b_out" => {
                        return Tensor::zeros(rows, cols)
                    }
                    "pos" => 0.01,
                    "w_o" | "w_proj" => std_resid,
                    _ => std_w,
                };
                let normal = Normal::new(0.0, std).expect("valid std");
                let data = (0..rows * cols)
                    .map(|_| S::lit(normal.sample(&mut rng)))
                    .collect();
                Tensor::from_vec(rows, cols, data)
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn layer(&self, l: usize) -> LayerIdx {
        let b = 3 + PER_LAYER * l;
        LayerIdx {
            ln1_g: b,
            ln1_b: b + 1,
            w_qkv: b + 2,
            b_qkv: b + 3,
            w_o: b + 4,
            b_o: b + 5,
            ln2_g: b + 6,
            ln2_b: b + 7,
            w_fc: b + 8,
            b_fc: b + 9,
            w_proj: b + 10,
            b_proj: b + 11,
        }
    }

    pub fn head(&self) -> HeadIdx {
        let b = 3 + PER_LAYER * self.config.n_layers;
        HeadIdx {
            lnf_g: b,
            lnf_b: b + 1,
            w_out: b + 2,
            b_out: b + 3,
        }
    }

    pub fn names(&self) -> Vec<String> {
        tensor_names(&self.config)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Transformer<T> {
        Transformer {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Zero the output head so every prediction is exactly zero.
    pub fn zero_head(&mut self) {
        let h = self.head();
        for idx in [h.w_out, h.b_out] {
            self.tensors[idx].data.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    /// Bitwise equality of all parameter tensors.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.rows == b.rows
                    && a.cols == b.cols
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_parameter_counts() {
        let tiny = parameter_count(&ModelConfig::tiny());
        let medium = parameter_count(&ModelConfig::medium());
        let small = parameter_count(&ModelConfig::preset(SizePreset::Small).unwrap());
        let big = parameter_count(&ModelConfig::preset(SizePreset::Big).unwrap());
        assert!((tiny as f64 / 212e3 - 1.0).abs() < 0.01, "tiny {tiny}");
        assert!((small as f64 / 701e3 - 1.0).abs() < 0.01, "small {small}");
        assert!((medium as f64 / 2.42e6 - 1.0).abs() < 0.01, "medium {medium}");
        assert!((big as f64 / 10.7e6 - 1.0).abs() < 0.01, "big {big}");
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(matches!(
            ModelConfig::custom(2, 64, 5, 12),
            Err(ModelError::InvalidDims { .. })
        ));
    }

    #[test]
    fn init_is_deterministic() {
        let a = Transformer::<f32>::init(ModelConfig::tiny(), 5).unwrap();
        let b = Transformer::<f32>::init(ModelConfig::tiny(), 5).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.parameter_count(), parameter_count(&ModelConfig::tiny()));
        let c = Transformer::<f32>::init(ModelConfig::tiny(), 6).unwrap();
        assert!(!a.bit_eq(&c));
    }
}
