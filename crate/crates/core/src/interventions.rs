//! Scheduled mid-run changes to the quantization recipe. A switch happens
//! between optimizer steps and touches nothing but the quantization config:
//! parameters, optimizer moments and the batch sequence carry over.

use serde::{Deserialize, Serialize};

use crate::diagnostics::{detect_spikes, ema, DEFAULT_SPIKE_FACTOR, EMA_HALF_LIFE};
use crate::error::{Error, Result};
use crate::proxy::config::{ModelConfig, QuantConfig, TrainConfig};
use crate::proxy::train::{AnyTrainer, RunLog, RunStatus, StepRecord};
use crate::tensor::QuantFormat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionAction {
    /// Drop every quantization point.
    ToFp32,
    /// Keep the forward recipe, run the backward pass in working precision.
    ForwardOnly,
    /// Activations and activation gradients in bf16, weights unchanged.
    Bf16ActivationsBoth,
    /// Forward activations in bf16 and the backward pass in working precision.
    Bf16ActivationsFwdOnly,
    /// Weights in bf16 in both passes.
    WeightsBf16,
    /// Layernorm affine parameters in working precision.
    SkipLnQuant,
    /// Shared exponent offset of +1 on every MX block.
    BumpExponent,
    /// Offset of +1 only on blocks whose absmax would overflow.
    BumpExponentConditional,
    /// Leave the config as it is.
    None,
}

impl InterventionAction {
    pub fn apply(self, q: QuantConfig) -> QuantConfig {
        match self {
            InterventionAction::ToFp32 => QuantConfig::default(),
            InterventionAction::ForwardOnly => QuantConfig {
                forward_only: true,
                ..q
            },
            InterventionAction::Bf16ActivationsBoth => QuantConfig {
                fwd_activation: QuantFormat::Bf16,
                grad_input: QuantFormat::Bf16,
                grad_output: QuantFormat::Bf16,
                ..q
            },
            InterventionAction::Bf16ActivationsFwdOnly => QuantConfig {
                fwd_activation: QuantFormat::Bf16,
                forward_only: true,
                ..q
            },
            InterventionAction::WeightsBf16 => QuantConfig {
                fwd_weight: QuantFormat::Bf16,
                bwd_weight: QuantFormat::Bf16,
                ..q
            },
            InterventionAction::SkipLnQuant => QuantConfig {
                ln_affine: QuantFormat::None,
                ..q
            },
            InterventionAction::BumpExponent => q.map_mx(|mut s| {
                s.exponent_offset = 1;
                s.conditional_offset = false;
                s
            }),
            InterventionAction::BumpExponentConditional => q.map_mx(|mut s| {
                s.exponent_offset = 1;
                s.conditional_offset = true;
                s
            }),
            InterventionAction::None => q,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionPlan {
    /// First step that runs under the new config.
    pub step: usize,
    pub action: InterventionAction,
}

fn check_plans(plans: &[InterventionPlan], steps: usize) -> Result<()> {
    for (i, p) in plans.iter().enumerate() {
        if p.step > steps {
            return Err(Error::Config {
                path: format!("plan[{i}].step"),
                message: format!("step {} is beyond the run length {steps}", p.step),
            });
        }
    }
    Ok(())
}

/// Continue `trainer` to the end of its run, applying each plan right
/// before its trigger step. Plans whose step has already passed are
/// ignored; plans sharing a step apply in list order.
pub fn intervention_run_with(
    trainer: &mut AnyTrainer,
    plans: &[InterventionPlan],
    sink: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<RunStatus> {
    while !trainer.finished() {
        let t = trainer.current_step();
        for p in plans.iter().filter(|p| p.step == t) {
            let q = p.action.apply(trainer.quant());
            log::info!("step {t}: applying {:?}", p.action);
            trainer.set_quant(q)?;
        }
        let rec = trainer.step()?;
        sink(&rec)?;
    }
    Ok(trainer.status())
}

/// A run that follows the baseline recipe until each plan's step.
pub fn intervention_run(model_cfg: &ModelConfig, train: &TrainConfig, plans: &[InterventionPlan]) -> Result<RunLog> {
    check_plans(plans, train.steps)?;
    let mut trainer = AnyTrainer::new(model_cfg, train)?;
    let mut records = Vec::with_capacity(train.steps);
    let status = intervention_run_with(&mut trainer, plans, &mut |r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok(RunLog {
        fingerprint: trainer.fingerprint().to_string(),
        records,
        status,
    })
}

/// Recovery means returning below this multiple of the pre-spike average.
pub const RECOVERY_FACTOR: f64 = 10.0;

/// Index of the divergence in a loss series: the first spike after which
/// the loss never again drops below `RECOVERY_FACTOR` times its pre-spike
/// moving average, else the first non-finite loss, else `terminal` (the
/// index at which the run was stopped as diverged).
pub fn divergence_index(losses: &[f64], terminal: Option<usize>) -> Option<usize> {
    let finite_prefix = losses.iter().take_while(|l| l.is_finite() && **l > 0.0).count();
    if finite_prefix > 0 {
        let prefix = &losses[..finite_prefix];
        let avg = ema(prefix, EMA_HALF_LIFE);
        if let Ok(report) = detect_spikes(prefix, DEFAULT_SPIKE_FACTOR) {
            for t in report.spike_steps {
                let bound = RECOVERY_FACTOR * avg[t - 1];
                if !losses[t + 1..].iter().any(|&l| l.is_finite() && l < bound) {
                    return Some(t);
                }
            }
        }
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Some(i);
    }
    terminal
}

/// Step at which a run diverged, by the rule of [`divergence_index`].
pub fn divergence_step(log: &RunLog) -> Option<usize> {
    let losses: Vec<f64> = log.records.iter().map(|r| r.loss).collect();
    let terminal = log
        .status
        .divergence_step()
        .and_then(|s| log.records.iter().position(|r| r.step == s));
    divergence_index(&losses, terminal).map(|i| log.records[i].step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fp_codec::ElementFormat;
    use crate::mx_block::MxSpec;
    use crate::proxy::config::QuantPreset;

    #[test]
    fn divergence_rule() {
        let stable = vec![1.0; 50];
        assert_eq!(divergence_index(&stable, None), None);
        let mut nan_end: Vec<f64> = (0..20).map(|i| 1.0 / (i + 1) as f64).collect();
        nan_end.push(f64::NAN);
        assert_eq!(divergence_index(&nan_end, Some(20)), Some(20));
        // spike then recovery
        let mut rec = vec![1.0; 300];
        rec[100] = 500.0;
        for l in rec.iter_mut().take(200).skip(101) {
            *l = 50.0;
        }
        assert_eq!(divergence_index(&rec, None), None);
        // spike without recovery
        let mut bad = vec![1.0; 300];
        for l in bad.iter_mut().skip(100) {
            *l = 500.0;
        }
        assert_eq!(divergence_index(&bad, None), Some(100));
        // terminal threshold stop
        assert_eq!(divergence_index(&[1.0, 0.5], Some(1)), Some(1));
    }

    #[test]
    fn actions_edit_the_right_points() {
        let q = QuantPreset::Mxfp8E4m3.config();
        assert_eq!(InterventionAction::ToFp32.apply(q), QuantConfig::default());
        assert_eq!(InterventionAction::SkipLnQuant.apply(q).ln_affine, QuantFormat::None);
        assert!(InterventionAction::ForwardOnly.apply(q).forward_only);
        let b = InterventionAction::BumpExponent.apply(q);
        assert!(QuantConfig::ROLES.iter().all(|&r| match b.format(r) {
            QuantFormat::Mx(s) => s.exponent_offset == 1,
            _ => true,
        }));
        let w = InterventionAction::WeightsBf16.apply(q);
        assert_eq!(w.fwd_weight, QuantFormat::Bf16);
        assert_eq!(w.fwd_activation, QuantFormat::Mx(MxSpec::new(ElementFormat::E4M3)));
        assert_eq!(InterventionAction::None.apply(q), q);
    }

    #[test]
    fn prefix_identity_and_noop() {
        let m = ModelConfig::new(1, 8, crate::tensor::Activation::Gelu);
        let mut t = TrainConfig::new(1e-3, 12).with_quant(QuantPreset::Mxfp8E4m3);
        t.batch = 8;
        let base = intervention_run(&m, &t, &[]).unwrap();
        let noop = intervention_run(
            &m,
            &t,
            &[InterventionPlan {
                step: 5,
                action: InterventionAction::None,
            }],
        )
        .unwrap();
        assert_eq!(base, noop);
        let switched = intervention_run(
            &m,
            &t,
            &[InterventionPlan {
                step: 5,
                action: InterventionAction::ToFp32,
            }],
        )
        .unwrap();
        assert_eq!(base.records[..5], switched.records[..5]);
        assert_ne!(base.records[5..], switched.records[5..]);
        assert!(switched.records[6].last_bin_fraction.is_empty());
    }

    #[test]
    fn plan_beyond_run_rejected() {
        let m = ModelConfig::new(1, 4, crate::tensor::Activation::Relu);
        let t = TrainConfig::new(1e-3, 3);
        let plan = [InterventionPlan {
            step: 4,
            action: InterventionAction::ToFp32,
        }];
        assert!(matches!(intervention_run(&m, &t, &plan), Err(Error::Config { .. })));
    }
}
