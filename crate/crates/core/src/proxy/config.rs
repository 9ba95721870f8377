use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp_codec::ElementFormat;
use crate::mx_block::MxSpec;
use crate::real::Precision;
use crate::tensor::{Activation, QuantFormat, QuantPoint, QuantRole, VecOps};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    #[default]
    KaimingUniform,
    /// N(0, gain^2 * 2 / (fan_in + fan_out)) with gain 0.5
    XavierNormalGain05,
}

fn default_true() -> bool {
    true
}

fn default_teacher_seed() -> u64 {
    0x7EAC_4E55
}

/// Architecture of the residual MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub d_model: usize,
    /// Hidden width as a multiple of `d_model`; 4 by default, 8/3 for SwiGLU.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_mult: Option<f64>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub layernorm: bool,
    #[serde(default)]
    pub init: InitScheme,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_teacher_seed")]
    pub teacher_seed: u64,
}

impl ModelConfig {
    pub fn new(depth: usize, d_model: usize, activation: Activation) -> Self {
        ModelConfig {
            depth,
            d_model,
            hidden_mult: None,
            activation,
            layernorm: true,
            init: InitScheme::KaimingUniform,
            seed: 0,
            teacher_seed: default_teacher_seed(),
        }
    }

    pub fn hidden(&self) -> usize {
        let mult = self.hidden_mult.unwrap_or(match self.activation {
            Activation::Swiglu => 8.0 / 3.0,
            _ => 4.0,
        });
        (mult * self.d_model as f64).round() as usize
    }

    /// Rows of W1: twice the hidden width for SwiGLU (gate and value halves).
    pub fn w1_rows(&self) -> usize {
        match self.activation {
            Activation::Swiglu => 2 * self.hidden(),
            _ => self.hidden(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config {
                path: "model.depth".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.d_model == 0 {
            return Err(Error::Config {
                path: "model.d_model".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.hidden() == 0 {
            return Err(Error::Config {
                path: "model.hidden_mult".into(),
                message: "hidden width rounds to zero".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    Constant,
    Cosine { start: f64, end: f64 },
}

impl Schedule {
    pub fn cosine_default() -> Self {
        Schedule::Cosine {
            start: 1e-3,
            end: 1e-5,
        }
    }
}

/// Learning rate at `step` of a `total_steps` run.
pub fn lr_at(schedule: &Schedule, base_lr: f64, step: usize, total_steps: usize) -> f64 {
    match *schedule {
        Schedule::Constant => base_lr,
        Schedule::Cosine { start, end } => {
            let frac = if total_steps == 0 {
                0.0
            } else {
                step.min(total_steps) as f64 / total_steps as f64
            };
            end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
    SgdMomentum,
}

/// Quantization of each injection point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    #[serde(default)]
    pub fwd_weight: QuantFormat,
    #[serde(default)]
    pub fwd_activation: QuantFormat,
    #[serde(default)]
    pub bwd_weight: QuantFormat,
    #[serde(default)]
    pub grad_input: QuantFormat,
    #[serde(default)]
    pub grad_output: QuantFormat,
    #[serde(default)]
    pub ln_affine: QuantFormat,
    /// Keep every backward operand in working precision.
    #[serde(default)]
    pub forward_only: bool,
    /// bf16 layernorm reductions and residual adds; defaults to on whenever
    /// any MX point is active.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bf16_vector_ops: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantPreset {
    Fp32,
    Mxfp8E4m3,
    /// E4M3 forward, E5M2 backward
    Mxfp8Mix,
    Mxfp6E2m3,
    WeightsMxActsBf16,
}

impl QuantPreset {
    pub const ALL: [QuantPreset; 5] = [
        QuantPreset::Fp32,
        QuantPreset::Mxfp8E4m3,
        QuantPreset::Mxfp8Mix,
        QuantPreset::Mxfp6E2m3,
        QuantPreset::WeightsMxActsBf16,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuantPreset::Fp32 => "fp32",
            QuantPreset::Mxfp8E4m3 => "mxfp8-e4m3",
            QuantPreset::Mxfp8Mix => "mxfp8-mix",
            QuantPreset::Mxfp6E2m3 => "mxfp6-e2m3",
            QuantPreset::WeightsMxActsBf16 => "weights-mx-acts-bf16",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn config(self) -> QuantConfig {
        let mx = |f| QuantFormat::Mx(MxSpec::new(f));
        let uniform = |f: QuantFormat| QuantConfig {
            fwd_weight: f,
            fwd_activation: f,
            bwd_weight: f,
            grad_input: f,
            grad_output: f,
            ln_affine: f,
            forward_only: false,
            bf16_vector_ops: None,
        };
        match self {
            QuantPreset::Fp32 => QuantConfig::default(),
            QuantPreset::Mxfp8E4m3 => uniform(mx(ElementFormat::E4M3)),
            QuantPreset::Mxfp6E2m3 => uniform(mx(ElementFormat::E2M3)),
            QuantPreset::Mxfp8Mix => QuantConfig {
                bwd_weight: mx(ElementFormat::E5M2),
                grad_input: mx(ElementFormat::E5M2),
                grad_output: mx(ElementFormat::E5M2),
                ..uniform(mx(ElementFormat::E4M3))
            },
            QuantPreset::WeightsMxActsBf16 => QuantConfig {
                fwd_weight: mx(ElementFormat::E4M3),
                bwd_weight: mx(ElementFormat::E4M3),
                ..uniform(QuantFormat::Bf16)
            },
        }
    }
}

/// A preset name or a fully spelled-out quantization config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QuantSetting {
    Preset(QuantPreset),
    Custom(QuantConfig),
}

impl Default for QuantSetting {
    fn default() -> Self {
        QuantSetting::Preset(QuantPreset::Fp32)
    }
}

impl QuantSetting {
    pub fn resolve(&self) -> QuantConfig {
        match self {
            QuantSetting::Preset(p) => p.config(),
            QuantSetting::Custom(c) => *c,
        }
    }
}

impl From<QuantPreset> for QuantSetting {
    fn from(p: QuantPreset) -> Self {
        QuantSetting::Preset(p)
    }
}

impl QuantConfig {
    pub fn format(&self, role: QuantRole) -> QuantFormat {
        let backward = matches!(
            role,
            QuantRole::BwdWeight | QuantRole::GradInput | QuantRole::GradOutput
        );
        if backward && self.forward_only {
            return QuantFormat::None;
        }
        match role {
            QuantRole::FwdWeight => self.fwd_weight,
            QuantRole::FwdActivation => self.fwd_activation,
            QuantRole::BwdWeight => self.bwd_weight,
            QuantRole::GradInput => self.grad_input,
            QuantRole::GradOutput => self.grad_output,
            QuantRole::LnAffine => self.ln_affine,
        }
    }

    pub fn point(&self, role: QuantRole) -> QuantPoint {
        QuantPoint::new(role, self.format(role))
    }

    pub const ROLES: [QuantRole; 6] = [
        QuantRole::FwdWeight,
        QuantRole::FwdActivation,
        QuantRole::BwdWeight,
        QuantRole::GradInput,
        QuantRole::GradOutput,
        QuantRole::LnAffine,
    ];

    pub fn any_mx(&self) -> bool {
        Self::ROLES.iter().any(|&r| self.format(r).is_mx())
    }

    pub fn vec_ops(&self) -> VecOps {
        if self.bf16_vector_ops.unwrap_or_else(|| self.any_mx()) {
            VecOps::Bf16
        } else {
            VecOps::Working
        }
    }

    /// Apply `f` to every MX spec.
    pub fn map_mx(mut self, f: impl Fn(MxSpec) -> MxSpec) -> Self {
        for slot in [
            &mut self.fwd_weight,
            &mut self.fwd_activation,
            &mut self.bwd_weight,
            &mut self.grad_input,
            &mut self.grad_output,
            &mut self.ln_affine,
        ] {
            *slot = slot.map_mx(&f);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        for role in Self::ROLES {
            if let QuantFormat::Mx(spec) = self.format(role) {
                spec.validate().map_err(|e| Error::Config {
                    path: format!("train.quant.{}", role.name()),
                    message: e.to_string(),
                })?;
            }
        }
        Ok(())
    }
}

/// Reference point of the high-precision gradient in a dual run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsilonMode {
    /// High-precision gradient re-evaluated at the low-precision twin's parameters.
    #[default]
    SameParams,
    /// High-precision gradient taken from the separate high-precision trajectory.
    CrossTrajectory,
}

fn default_batch() -> usize {
    2048
}
fn default_steps() -> usize {
    8000
}
fn default_label_noise() -> f64 {
    1e-3
}
fn default_divergence_threshold() -> f64 {
    1e12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_label_noise")]
    pub label_noise: f64,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub quant: QuantSetting,
    #[serde(default)]
    pub epsilon_mode: EpsilonMode,
    /// Loss above this (or non-finite) stops the run.
    #[serde(default = "default_divergence_threshold")]
    pub divergence_threshold: f64,
}

impl TrainConfig {
    pub fn new(lr: f64, steps: usize) -> Self {
        TrainConfig {
            lr,
            schedule: Schedule::Constant,
            optimizer: OptimizerKind::Adam,
            batch: default_batch(),
            steps,
            label_noise: default_label_noise(),
            data_seed: 0,
            precision: Precision::Fp32,
            quant: QuantSetting::default(),
            epsilon_mode: EpsilonMode::SameParams,
            divergence_threshold: default_divergence_threshold(),
        }
    }

    pub fn with_quant(mut self, q: impl Into<QuantSetting>) -> Self {
        self.quant = q.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, message: &str| {
            Err(Error::Config {
                path: format!("train.{path}"),
                message: message.into(),
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err("lr", "must be positive");
        }
        if self.batch == 0 {
            return err("batch", "must be at least 1");
        }
        if !(self.label_noise >= 0.0) {
            return err("label_noise", "must be non-negative");
        }
        if let Schedule::Cosine { start, end } = self.schedule {
            if !(start > 0.0 && end >= 0.0) {
                return err("schedule", "cosine start must be positive and end non-negative");
            }
        }
        self.quant.resolve().validate()
    }
}
