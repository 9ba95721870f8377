//! Grid sweeps over learning rate, shape, activation, layernorm, preset and
//! seed, run in parallel and resumable from per-run summary files.

use std::fs;
use std::io::{BufRead, BufReader, LineWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::detect_spikes;
use crate::error::{Error, Result};
use crate::interventions::divergence_step;
use crate::tensor::Activation;

use super::config::{ModelConfig, QuantPreset, TrainConfig};
use super::train::{train_run_with, AnyTrainer, RunLog, RunStatus, StepRecord, TOOL_VERSION};

/// Axes of a sweep. Every combination is run once per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub lr: Vec<f64>,
    /// `[depth, d_model]` pairs.
    pub shape: Vec<[usize; 2]>,
    #[serde(default = "default_activations")]
    pub activation: Vec<Activation>,
    #[serde(default = "default_layernorm")]
    pub layernorm: Vec<bool>,
    #[serde(default = "default_presets")]
    pub preset: Vec<QuantPreset>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

fn default_activations() -> Vec<Activation> {
    vec![Activation::Gelu]
}
fn default_layernorm() -> Vec<bool> {
    vec![true]
}
fn default_presets() -> Vec<QuantPreset> {
    vec![QuantPreset::Fp32]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lr: f64,
    pub depth: usize,
    pub d_model: usize,
    pub activation: Activation,
    pub layernorm: bool,
    pub preset: QuantPreset,
    pub seed: u64,
}

impl SweepGrid {
    /// Points in a fixed order: lr, shape, activation, layernorm, preset, seed.
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &lr in &self.lr {
            for &[depth, d_model] in &self.shape {
                for &activation in &self.activation {
                    for &layernorm in &self.layernorm {
                        for &preset in &self.preset {
                            for &seed in &self.seeds {
                                out.push(SweepPoint {
                                    lr,
                                    depth,
                                    d_model,
                                    activation,
                                    layernorm,
                                    preset,
                                    seed,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

impl SweepPoint {
    /// Override the base configs with this point. The seed drives both the
    /// student initialization and the data stream; the teacher is shared.
    pub fn configs(&self, base_model: &ModelConfig, base_train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let mut m = base_model.clone();
        m.depth = self.depth;
        m.d_model = self.d_model;
        m.activation = self.activation;
        m.layernorm = self.layernorm;
        m.seed = self.seed;
        let mut t = base_train.clone().with_quant(self.preset);
        t.lr = self.lr;
        t.data_seed = self.seed;
        (m, t)
    }
}

/// Per-run summary, also written next to the run log for resumption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub fingerprint: String,
    pub version: String,
    pub point: SweepPoint,
    pub status: Option<RunStatus>,
    pub steps: usize,
    pub spikes: usize,
    pub divergence_step: Option<usize>,
    pub final_loss: Option<f64>,
    /// Set when the run failed for a reason other than divergence.
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub summary: RunSummary,
    pub log: Option<RunLog>,
}

fn summarize(point: &SweepPoint, fingerprint: &str, log: &RunLog) -> RunSummary {
    let losses = log.losses();
    // spikes are counted over the positive finite prefix of the series
    let clean: Vec<f64> = losses.iter().copied().take_while(|l| l.is_finite() && *l > 0.0).collect();
    let spikes = if clean.is_empty() {
        0
    } else {
        detect_spikes(&clean, 100.0).map(|r| r.spike_steps.len()).unwrap_or(0)
    };
    RunSummary {
        fingerprint: fingerprint.to_string(),
        version: TOOL_VERSION.to_string(),
        point: point.clone(),
        status: Some(log.status),
        steps: log.records.len(),
        spikes,
        divergence_step: divergence_step(log),
        final_loss: losses.last().copied().filter(|l| l.is_finite()),
        error: None,
    }
}

pub fn summary_path(dir: &Path, fingerprint: &str) -> PathBuf {
    dir.join(format!("run-{fingerprint}.summary.json"))
}

pub fn log_path(dir: &Path, fingerprint: &str) -> PathBuf {
    dir.join(format!("run-{fingerprint}.jsonl"))
}

/// Read a JSON-lines run log.
pub fn read_run_log(path: &Path) -> Result<Vec<StepRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

fn run_point(
    point: &SweepPoint,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<SweepOutcome> {
    let (m, t) = point.configs(base_model, base_train);
    let mut trainer = AnyTrainer::new(&m, &t)?;
    let fp = trainer.fingerprint().to_string();
    if let Some(dir) = out_dir {
        let sp = summary_path(dir, &fp);
        if sp.exists() {
            let text = fs::read_to_string(&sp).map_err(|e| Error::io(format!("reading {}", sp.display()), e))?;
            let summary: RunSummary = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: sp.clone(),
                message: e.to_string(),
            })?;
            let records = read_run_log(&log_path(dir, &fp))?;
            let log = summary.status.map(|status| RunLog {
                fingerprint: fp.clone(),
                records,
                status,
            });
            log::info!("resuming: {fp} already complete");
            return Ok(SweepOutcome { summary, log });
        }
    }
    let mut records = Vec::new();
    let status = match out_dir {
        Some(dir) => {
            let lp = log_path(dir, &fp);
            let f = fs::File::create(&lp).map_err(|e| Error::io(format!("creating {}", lp.display()), e))?;
            let mut w = LineWriter::new(f);
            train_run_with(&mut trainer, &mut |r| {
                records.push(r.clone());
                serde_json::to_writer(&mut w, r).map_err(|e| Error::io(format!("writing {}", lp.display()), e.into()))?;
                w.write_all(b"\n").map_err(|e| Error::io(format!("writing {}", lp.display()), e))
            })?
        }
        None => train_run_with(&mut trainer, &mut |r| {
            records.push(r.clone());
            Ok(())
        })?,
    };
    let log = RunLog {
        fingerprint: fp.clone(),
        records,
        status,
    };
    let summary = summarize(point, &fp, &log);
    if let Some(dir) = out_dir {
        write_summary(dir, &summary)?;
    }
    Ok(SweepOutcome { summary, log: Some(log) })
}

fn write_summary(dir: &Path, summary: &RunSummary) -> Result<()> {
    let sp = summary_path(dir, &summary.fingerprint);
    let text = serde_json::to_string_pretty(summary).expect("summary serializes");
    fs::write(&sp, text + "\n").map_err(|e| Error::io(format!("writing {}", sp.display()), e))
}

/// Run every grid point on `jobs` worker threads. Results come back in grid
/// order regardless of scheduling, and each run is deterministic, so the
/// job count never changes any output. A failing run is recorded in its
/// summary and the sweep continues.
pub fn run_sweep(
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    grid: &SweepGrid,
    out_dir: Option<&Path>,
    jobs: usize,
) -> Result<Vec<SweepOutcome>> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let points = grid.points();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let outcomes = pool.install(|| {
        points
            .par_iter()
            .map(|p| match run_point(p, base_model, base_train, out_dir) {
                Ok(o) => o,
                Err(e) => {
                    log::warn!("sweep point {p:?} failed: {e}");
                    let (m, t) = p.configs(base_model, base_train);
                    let fp = super::train::run_fingerprint(&m, &t);
                    SweepOutcome {
                        summary: RunSummary {
                            fingerprint: fp,
                            version: TOOL_VERSION.to_string(),
                            point: p.clone(),
                            status: None,
                            steps: 0,
                            spikes: 0,
                            divergence_step: None,
                            final_loss: None,
                            error: Some(e.to_string()),
                        },
                        log: None,
                    }
                }
            })
            .collect::<Vec<_>>()
    });
    Ok(outcomes)
}

/// Spike-count table, one row per run.
pub fn write_spike_table<W: Write>(summaries: &[RunSummary], mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "fingerprint,lr,depth,d_model,activation,layernorm,preset,seed,steps,spikes,divergence_step,final_loss,error"
    )?;
    for s in summaries {
        let p = &s.point;
        let act = serde_json::to_value(p.activation).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.fingerprint,
            p.lr,
            p.depth,
            p.d_model,
            act,
            p.layernorm,
            p.preset.name(),
            p.seed,
            s.steps,
            s.spikes,
            s.divergence_step.map(|d| d.to_string()).unwrap_or_default(),
            s.final_loss.map(|l| l.to_string()).unwrap_or_default(),
            s.error.as_deref().unwrap_or("").replace(',', ";"),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> (ModelConfig, TrainConfig) {
        let m = ModelConfig::new(1, 8, Activation::Relu);
        let mut t = TrainConfig::new(1e-3, 10);
        t.batch = 8;
        (m, t)
    }

    fn grid(seeds: Vec<u64>) -> SweepGrid {
        SweepGrid {
            lr: vec![1e-4, 1e-3],
            shape: vec![[1, 8]],
            activation: vec![Activation::Relu],
            layernorm: vec![true],
            preset: vec![QuantPreset::Fp32],
            seeds,
        }
    }

    #[test]
    fn empty_seed_list_gives_nothing() {
        let (m, t) = base();
        assert!(run_sweep(&m, &t, &grid(vec![]), None, 2).unwrap().is_empty());
    }

    #[test]
    fn two_points_two_fingerprints() {
        let (m, t) = base();
        let out = run_sweep(&m, &t, &grid(vec![0]), None, 2).unwrap();
        assert_eq!(out.len(), 2);
        assert_ne!(out[0].summary.fingerprint, out[1].summary.fingerprint);
    }

    #[test]
    fn job_count_does_not_change_results_and_resume_works() {
        let (m, t) = base();
        let g = grid(vec![0, 1]);
        let a = run_sweep(&m, &t, &g, None, 1).unwrap();
        let b = run_sweep(&m, &t, &g, None, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.log, y.log);
        }
        let dir = tempfile::tempdir().unwrap();
        let first = run_sweep(&m, &t, &g, Some(dir.path()), 2).unwrap();
        let again = run_sweep(&m, &t, &g, Some(dir.path()), 2).unwrap();
        for (x, y) in first.iter().zip(&again) {
            assert_eq!(x.summary, y.summary);
            assert_eq!(x.log, y.log);
        }
        let mut csv = Vec::new();
        write_spike_table(&first.iter().map(|o| o.summary.clone()).collect::<Vec<_>>(), &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 5);
    }
}
