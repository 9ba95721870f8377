//! Training loop, run logs, the dual-run protocol, and checkpoints.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::fingerprint;
use crate::error::{Error, Result};
use crate::real::{Precision, Real};
use crate::tensor::{mse_loss, Tensor};

use super::config::{lr_at, EpsilonMode, ModelConfig, OptimizerKind, QuantConfig, TrainConfig};
use super::data::generate_batch;
use super::model::{build_student, build_teacher, ForwardTelemetry, Model, Params};
use super::optim::OptimizerState;

pub const TOOL_VERSION: &str = concat!("mxlab ", env!("CARGO_PKG_VERSION"));

/// Non-finite floats are written as JSON `null` and read back as NaN.
mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// One optimizer step of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub fingerprint: String,
    pub version: String,
    pub step: usize,
    #[serde(with = "nullable_f64")]
    pub loss: f64,
    #[serde(with = "nullable_f64")]
    pub grad_norm: f64,
    pub lr: f64,
    /// Keyed by tensor name: `layers.{k}.ln.gamma`, `layers.{k}.ln.beta`,
    /// `layers.{k}.w1_input`, `layers.{k}.w2_input`. Only MX-quantized
    /// tensors appear.
    pub last_bin_fraction: BTreeMap<String, f64>,
    /// Seconds since the start of the run; only present when timings are
    /// requested, since it breaks byte-identical logs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceReason {
    NonFinite,
    Threshold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum RunStatus {
    Running,
    Completed,
    Diverged { step: usize, reason: DivergenceReason },
}

impl RunStatus {
    pub fn diverged(&self) -> bool {
        matches!(self, RunStatus::Diverged { .. })
    }

    pub fn divergence_step(&self) -> Option<usize> {
        match self {
            RunStatus::Diverged { step, .. } => Some(*step),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub fingerprint: String,
    pub records: Vec<StepRecord>,
    pub status: RunStatus,
}

impl RunLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.records)
    }
}

/// Matched high/low precision gradient comparison at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedRecord {
    pub fingerprint: String,
    pub version: String,
    pub step: usize,
    #[serde(with = "nullable_f64")]
    pub eps_norm: f64,
    #[serde(with = "nullable_f64")]
    pub g_norm: f64,
    #[serde(with = "nullable_f64")]
    pub zeta_lower: f64,
    #[serde(with = "nullable_f64")]
    pub cosine: f64,
    #[serde(with = "nullable_f64")]
    pub loss_hp: f64,
    #[serde(with = "nullable_f64")]
    pub loss_lp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedLog {
    pub fingerprint: String,
    pub records: Vec<PairedRecord>,
}

impl PairedLog {
    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.records)
    }
}

pub fn to_jsonl<R: Serialize>(records: &[R]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Fingerprint of a (model, train) pair.
pub fn run_fingerprint(model: &ModelConfig, train: &TrainConfig) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        model: &'a ModelConfig,
        train: &'a TrainConfig,
    }
    fingerprint(&Key { model, train })
}

/// Loss, gradients and quantization telemetry at one point.
pub struct Evaluation<T> {
    pub loss: f64,
    pub grads: Params<T>,
    pub telemetry: ForwardTelemetry,
}

pub fn evaluate<T: Real>(model: &Model<T>, x: &Tensor<T>, y: &Tensor<T>, quant: &QuantConfig) -> Result<Evaluation<T>> {
    let fwd = model.forward(x, quant)?;
    let (loss, dout) = mse_loss(&fwd.output, y)?;
    let grads = model.backward(&fwd.cache, &dout, quant)?;
    Ok(Evaluation {
        loss,
        grads,
        telemetry: fwd.telemetry,
    })
}

/// Norm of each vector, their dot product, and the norm of the difference,
/// all accumulated in f64 in flattening order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradComparison {
    pub dot: f64,
    pub norm2_a: f64,
    pub norm2_b: f64,
    pub diff2: f64,
}

pub fn compare_grads<T: Real>(a: &Params<T>, b: &Params<T>) -> GradComparison {
    let mut c = GradComparison {
        dot: 0.0,
        norm2_a: 0.0,
        norm2_b: 0.0,
        diff2: 0.0,
    };
    for (sa, sb) in a.slices().into_iter().zip(b.slices()) {
        for (&x, &y) in sa.iter().zip(sb) {
            let (x, y) = (x.to_f64(), y.to_f64());
            c.dot += x * y;
            c.norm2_a += x * x;
            c.norm2_b += y * y;
            c.diff2 += (x - y) * (x - y);
        }
    }
    c
}

fn is_numeric_blowup(e: &Error) -> bool {
    matches!(e, Error::NonFiniteOperand { .. } | Error::NonFinite { .. })
}

/// A single training run in working precision `T`.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub teacher: Model<T>,
    pub opt: OptimizerState<T>,
    /// Index of the next step to run.
    pub step: usize,
    pub train: TrainConfig,
    quant: QuantConfig,
    pub fingerprint: String,
    pub status: RunStatus,
    pub timings: bool,
    started: Option<Instant>,
}

/// What a step produced, including the gradient for dual-run bookkeeping.
pub struct StepOutcome<T> {
    pub record: StepRecord,
    pub grads: Option<Params<T>>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model_cfg: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        let model = build_student(model_cfg)?;
        let teacher = build_teacher(model_cfg, model_cfg.teacher_seed)?;
        let opt = OptimizerState::new(train.optimizer, &model.params);
        Ok(Trainer {
            model,
            teacher,
            opt,
            step: 0,
            train: train.clone(),
            quant: train.quant.resolve(),
            fingerprint: run_fingerprint(model_cfg, train),
            status: RunStatus::Running,
            timings: false,
            started: None,
        })
    }

    pub fn quant(&self) -> &QuantConfig {
        &self.quant
    }

    /// Replace the quantization config between steps.
    pub fn set_quant(&mut self, quant: QuantConfig) -> Result<()> {
        quant.validate()?;
        self.quant = quant;
        Ok(())
    }

    pub fn finished(&self) -> bool {
        self.status != RunStatus::Running || self.step >= self.train.steps
    }

    pub fn batch(&self, step: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        generate_batch(
            self.train.data_seed,
            step as u64,
            self.train.batch,
            self.model.config.d_model,
            &self.teacher,
            self.train.label_noise,
        )
    }

    pub fn lr(&self, step: usize) -> f64 {
        lr_at(&self.train.schedule, self.train.lr, step, self.train.steps)
    }

    /// Loss and gradient at the current parameters under `quant`.
    pub fn evaluate_at(&self, x: &Tensor<T>, y: &Tensor<T>, quant: &QuantConfig) -> Result<Evaluation<T>> {
        evaluate(&self.model, x, y, quant)
    }

    /// Run one optimizer step on the already generated batch `(x, y)`.
    pub fn step_on(&mut self, x: &Tensor<T>, y: &Tensor<T>) -> Result<StepOutcome<T>> {
        if self.finished() {
            return Err(Error::invalid("run already finished"));
        }
        let started = *self.started.get_or_insert_with(Instant::now);
        let t = self.step;
        let lr = self.lr(t);
        let mut record = StepRecord {
            fingerprint: self.fingerprint.clone(),
            version: TOOL_VERSION.to_string(),
            step: t,
            loss: f64::NAN,
            grad_norm: f64::NAN,
            lr,
            last_bin_fraction: BTreeMap::new(),
            wall_time: None,
        };
        let quant = self.quant;
        let outcome = match evaluate(&self.model, x, y, &quant) {
            Ok(ev) => {
                record.loss = ev.loss;
                record.grad_norm = ev.grads.norm();
                for (name, s) in ev.telemetry.ln.iter().chain(&ev.telemetry.activations) {
                    record.last_bin_fraction.insert(name.clone(), s.fraction());
                }
                if !ev.loss.is_finite() {
                    self.status = RunStatus::Diverged {
                        step: t,
                        reason: DivergenceReason::NonFinite,
                    };
                    None
                } else if ev.loss > self.train.divergence_threshold {
                    self.status = RunStatus::Diverged {
                        step: t,
                        reason: DivergenceReason::Threshold,
                    };
                    None
                } else {
                    self.opt.step(&mut self.model.params, &ev.grads, lr);
                    Some(ev.grads)
                }
            }
            Err(e) if is_numeric_blowup(&e) => {
                log::debug!("step {t}: {e}");
                self.status = RunStatus::Diverged {
                    step: t,
                    reason: DivergenceReason::NonFinite,
                };
                None
            }
            Err(e) => return Err(e),
        };
        if self.timings {
            record.wall_time = Some(started.elapsed().as_secs_f64());
        }
        self.step += 1;
        if self.status == RunStatus::Running && self.step >= self.train.steps {
            self.status = RunStatus::Completed;
        }
        Ok(StepOutcome {
            record,
            grads: outcome,
        })
    }

    pub fn step(&mut self) -> Result<StepOutcome<T>> {
        let (x, y) = self.batch(self.step)?;
        self.step_on(&x, &y)
    }
}

/// A trainer in either working precision.
#[derive(Clone, Debug)]
pub enum AnyTrainer {
    F32(Trainer<f32>),
    F64(Trainer<f64>),
}

macro_rules! dispatch {
    ($self:expr, $t:ident => $body:expr) => {
        match $self {
            AnyTrainer::F32($t) => $body,
            AnyTrainer::F64($t) => $body,
        }
    };
}

impl AnyTrainer {
    pub fn new(model_cfg: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        Ok(match train.precision {
            Precision::Fp32 => AnyTrainer::F32(Trainer::new(model_cfg, train)?),
            Precision::Fp64 => AnyTrainer::F64(Trainer::new(model_cfg, train)?),
        })
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        dispatch!(self, t => t.step().map(|o| o.record))
    }

    pub fn finished(&self) -> bool {
        dispatch!(self, t => t.finished())
    }

    pub fn status(&self) -> RunStatus {
        dispatch!(self, t => t.status)
    }

    pub fn current_step(&self) -> usize {
        dispatch!(self, t => t.step)
    }

    pub fn quant(&self) -> QuantConfig {
        dispatch!(self, t => *t.quant())
    }

    pub fn set_quant(&mut self, q: QuantConfig) -> Result<()> {
        dispatch!(self, t => t.set_quant(q))
    }

    pub fn fingerprint(&self) -> &str {
        dispatch!(self, t => &t.fingerprint)
    }

    pub fn set_fingerprint(&mut self, fp: String) {
        dispatch!(self, t => t.fingerprint = fp)
    }

    pub fn set_timings(&mut self, on: bool) {
        dispatch!(self, t => t.timings = on)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        dispatch!(self, t => save_checkpoint(t, path))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let header = read_checkpoint_header(path)?;
        Ok(match header.train.precision {
            Precision::Fp32 => AnyTrainer::F32(load_checkpoint(path)?),
            Precision::Fp64 => AnyTrainer::F64(load_checkpoint(path)?),
        })
    }
}

/// Train until completion or divergence, passing every record to `sink`.
pub fn train_run_with(
    trainer: &mut AnyTrainer,
    sink: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<RunStatus> {
    while !trainer.finished() {
        let rec = trainer.step()?;
        sink(&rec)?;
    }
    Ok(trainer.status())
}

pub fn train_run(model_cfg: &ModelConfig, train: &TrainConfig) -> Result<RunLog> {
    let mut trainer = AnyTrainer::new(model_cfg, train)?;
    let mut records = Vec::with_capacity(train.steps);
    let status = train_run_with(&mut trainer, &mut |r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok(RunLog {
        fingerprint: trainer.fingerprint().to_string(),
        records,
        status,
    })
}

/// Output of a dual run: high-precision twin, low-precision twin, and the
/// per-step gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct DualRun {
    pub hp: RunLog,
    pub lp: RunLog,
    pub paired: PairedLog,
}

fn check_twins(hp: &TrainConfig, lp: &TrainConfig) -> Result<()> {
    let same = |what: &str, ok: bool| {
        if ok {
            Ok(())
        } else {
            Err(Error::Config {
                path: format!("train.{what}"),
                message: "dual-run twins must agree".into(),
            })
        }
    };
    same("data_seed", hp.data_seed == lp.data_seed)?;
    same("batch", hp.batch == lp.batch)?;
    same("steps", hp.steps == lp.steps)?;
    same("label_noise", hp.label_noise == lp.label_noise)?;
    same("precision", hp.precision == lp.precision)?;
    same("epsilon_mode", hp.epsilon_mode == lp.epsilon_mode)
}

fn paired_fingerprint(model: &ModelConfig, hp: &TrainConfig, lp: &TrainConfig) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        model: &'a ModelConfig,
        hp: &'a TrainConfig,
        lp: &'a TrainConfig,
    }
    fingerprint(&Key { model, hp, lp })
}

fn paired_record(fp: &str, step: usize, c: GradComparison, loss_hp: f64, loss_lp: f64) -> PairedRecord {
    let eps_norm = c.diff2.sqrt();
    let g_norm = c.norm2_b.sqrt();
    let zeta_lower = if g_norm > 0.0 { eps_norm / g_norm } else { f64::NAN };
    let denom = (c.norm2_a * c.norm2_b).sqrt();
    let cosine = if denom > 0.0 { (c.dot / denom).clamp(-1.0, 1.0) } else { f64::NAN };
    PairedRecord {
        fingerprint: fp.to_string(),
        version: TOOL_VERSION.to_string(),
        step,
        eps_norm,
        g_norm,
        zeta_lower,
        cosine,
        loss_hp,
        loss_lp,
    }
}

fn dual_run_t<T: Real>(model_cfg: &ModelConfig, hp_cfg: &TrainConfig, lp_cfg: &TrainConfig) -> Result<DualRun> {
    let mut hp = Trainer::<T>::new(model_cfg, hp_cfg)?;
    let mut lp = Trainer::<T>::new(model_cfg, lp_cfg)?;
    let fp = paired_fingerprint(model_cfg, hp_cfg, lp_cfg);
    let hp_quant = *hp.quant();
    let mut hp_log = Vec::new();
    let mut lp_log = Vec::new();
    let mut paired = Vec::new();
    let mut t = 0;
    while !(hp.finished() && lp.finished()) {
        let (x, y) = hp.batch(t)?;
        let hp_out = if hp.finished() { None } else { Some(hp.step_on(&x, &y)?) };
        let lp_alive = !lp.finished();
        // high-precision gradient at the low-precision twin's parameters,
        // taken before the low-precision update
        let reference = match (lp_alive, lp_cfg.epsilon_mode) {
            (true, EpsilonMode::SameParams) => match lp.evaluate_at(&x, &y, &hp_quant) {
                Ok(ev) => Some(ev.grads),
                Err(e) if is_numeric_blowup(&e) => None,
                Err(e) => return Err(e),
            },
            _ => None,
        };
        let lp_out = if lp_alive { Some(lp.step_on(&x, &y)?) } else { None };
        let loss_hp = hp_out.as_ref().map_or(f64::NAN, |o| o.record.loss);
        if let Some(lp_out) = &lp_out {
            let reference = match lp_cfg.epsilon_mode {
                EpsilonMode::SameParams => reference.as_ref(),
                EpsilonMode::CrossTrajectory => hp_out.as_ref().and_then(|o| o.grads.as_ref()),
            };
            if let (Some(g_lp), Some(g_hp)) = (&lp_out.grads, reference) {
                paired.push(paired_record(&fp, t, compare_grads(g_lp, g_hp), loss_hp, lp_out.record.loss));
            }
        }
        if let Some(o) = hp_out {
            hp_log.push(o.record);
        }
        if let Some(o) = lp_out {
            lp_log.push(o.record);
        }
        t += 1;
    }
    Ok(DualRun {
        hp: RunLog {
            fingerprint: hp.fingerprint.clone(),
            records: hp_log,
            status: hp.status,
        },
        lp: RunLog {
            fingerprint: lp.fingerprint.clone(),
            records: lp_log,
            status: lp.status,
        },
        paired: PairedLog {
            fingerprint: fp,
            records: paired,
        },
    })
}

/// Train the high- and low-precision twins from one initialization on one
/// batch sequence. Both twins advance in lockstep; the low-precision
/// gradient is compared at every step against a high-precision gradient
/// taken either at the same parameters or from the high-precision twin,
/// per `epsilon_mode`.
pub fn dual_run(model_cfg: &ModelConfig, hp: &TrainConfig, lp: &TrainConfig) -> Result<DualRun> {
    check_twins(hp, lp)?;
    match hp.precision {
        Precision::Fp32 => dual_run_t::<f32>(model_cfg, hp, lp),
        Precision::Fp64 => dual_run_t::<f64>(model_cfg, hp, lp),
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MXCK";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub fingerprint: String,
    pub version: String,
    pub step: usize,
    pub status: RunStatus,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub quant: QuantConfig,
    pub optimizer: OptimizerKind,
    pub optimizer_t: u64,
    pub num_params: usize,
}

fn write_params<T: Real>(out: &mut Vec<u8>, p: &Params<T>) {
    for s in p.slices() {
        for x in s {
            out.extend_from_slice(&x.to_f64().to_le_bytes());
        }
    }
}

fn read_params<T: Real>(bytes: &mut &[u8], like: &Params<T>, path: &Path) -> Result<Params<T>> {
    let n = like.num_params();
    if bytes.len() < n * 8 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "truncated parameter payload".into(),
        });
    }
    let flat: Vec<f64> = bytes[..n * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    *bytes = &bytes[n * 8..];
    let mut p = Params::zeros_like(like);
    p.load_f64(&flat)?;
    Ok(p)
}

/// Model, optimizer moments, step index and current quantization. The data
/// stream is addressed by step, so no generator state needs saving.
pub fn save_checkpoint<T: Real>(t: &Trainer<T>, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        fingerprint: t.fingerprint.clone(),
        version: TOOL_VERSION.to_string(),
        step: t.step,
        status: t.status,
        model: t.model.config.clone(),
        train: t.train.clone(),
        quant: t.quant,
        optimizer: t.opt.kind,
        optimizer_t: t.opt.t,
        num_params: t.model.params.num_params(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    write_params(&mut out, &t.model.params);
    for moment in [&t.opt.m, &t.opt.v].into_iter().flatten() {
        write_params(&mut out, moment);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&out)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_checkpoint_bytes(path: &Path) -> Result<(CheckpointHeader, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = |message: &str| Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    };
    if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let json = bytes.get(10..10 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
    let payload = bytes[10 + len..].to_vec();
    Ok((header, payload))
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(read_checkpoint_bytes(path)?.0)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Trainer<T>> {
    let (h, payload) = read_checkpoint_bytes(path)?;
    if h.train.precision != T::PRECISION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("checkpoint precision is {:?}", h.train.precision),
        });
    }
    let mut t = Trainer::<T>::new(&h.model, &h.train)?;
    if t.model.params.num_params() != h.num_params {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "parameter count does not match the model config".into(),
        });
    }
    let mut rest = &payload[..];
    t.model.params = read_params(&mut rest, &t.model.params, path)?;
    if let Some(m) = t.opt.m.take() {
        t.opt.m = Some(read_params(&mut rest, &m, path)?);
    }
    if let Some(v) = t.opt.v.take() {
        t.opt.v = Some(read_params(&mut rest, &v, path)?);
    }
    if !rest.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "trailing bytes after payload".into(),
        });
    }
    t.opt.t = h.optimizer_t;
    t.step = h.step;
    t.status = h.status;
    t.quant = h.quant;
    t.fingerprint = h.fingerprint;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proxy::config::QuantPreset;
    use crate::tensor::Activation;

    fn small() -> (ModelConfig, TrainConfig) {
        let m = ModelConfig::new(2, 8, Activation::Gelu);
        let mut t = TrainConfig::new(1e-3, 20);
        t.batch = 16;
        (m, t)
    }

    #[test]
    fn runs_are_deterministic() {
        let (m, t) = small();
        let a = train_run(&m, &t).unwrap();
        let b = train_run(&m, &t).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert_eq!(a.records.len(), 20);
        assert_eq!(a.status, RunStatus::Completed);
    }

    #[test]
    fn loss_decreases_on_small_problem() {
        let (m, mut t) = small();
        t.steps = 200;
        t.precision = Precision::Fp64;
        let log = train_run(&m, &t).unwrap();
        let first = log.records[0].loss;
        let last = log.records.last().unwrap().loss;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn identical_twins_have_zero_eps() {
        let (m, t) = small();
        let run = dual_run(&m, &t, &t).unwrap();
        assert_eq!(run.paired.records.len(), 20);
        for r in &run.paired.records {
            assert_eq!(r.eps_norm, 0.0);
            assert_eq!(r.zeta_lower, 0.0);
            assert_eq!(r.cosine, 1.0);
        }
        assert_eq!(run.hp.to_jsonl().replace(&run.hp.fingerprint, ""), run.lp.to_jsonl().replace(&run.lp.fingerprint, ""));
    }

    #[test]
    fn cross_trajectory_identical_twins() {
        let (m, mut t) = small();
        t.epsilon_mode = EpsilonMode::CrossTrajectory;
        let run = dual_run(&m, &t, &t).unwrap();
        assert!(run.paired.records.iter().all(|r| r.eps_norm == 0.0 && r.cosine == 1.0));
    }

    #[test]
    fn quantized_twin_has_positive_eps() {
        let (m, t) = small();
        let lp = t.clone().with_quant(QuantPreset::Mxfp8E4m3);
        let run = dual_run(&m, &t, &lp).unwrap();
        assert!(run.paired.records.iter().all(|r| r.eps_norm > 0.0 && r.cosine < 1.0));
        assert!(run.lp.records[0].last_bin_fraction.contains_key("layers.0.ln.gamma"));
    }

    #[test]
    fn mismatched_twins_rejected() {
        let (m, t) = small();
        let mut lp = t.clone();
        lp.batch = 32;
        assert!(matches!(dual_run(&m, &t, &lp), Err(Error::Config { .. })));
    }

    #[test]
    fn threshold_divergence_stops_run() {
        let (m, mut t) = small();
        t.divergence_threshold = 1e-12;
        let log = train_run(&m, &t).unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(
            log.status,
            RunStatus::Diverged {
                step: 0,
                reason: DivergenceReason::Threshold
            }
        );
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted() {
        let (m, t) = small();
        let full = train_run(&m, &t).unwrap();
        let mut tr = AnyTrainer::new(&m, &t).unwrap();
        for _ in 0..7 {
            tr.step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        tr.save_checkpoint(&path).unwrap();
        let mut resumed = AnyTrainer::load_checkpoint(&path).unwrap();
        let mut rest = Vec::new();
        train_run_with(&mut resumed, &mut |r| {
            rest.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(rest, full.records[7..].to_vec());
    }

    #[test]
    fn nan_loss_serializes_as_null() {
        let r = StepRecord {
            fingerprint: "x".into(),
            version: TOOL_VERSION.into(),
            step: 3,
            loss: f64::NAN,
            grad_norm: 1.0,
            lr: 0.1,
            last_bin_fraction: BTreeMap::new(),
            wall_time: None,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"loss\":null"));
        let back: StepRecord = serde_json::from_str(&s).unwrap();
        assert!(back.loss.is_nan());
    }
}
