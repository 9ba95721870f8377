//! The `mxlab` command line.
//!
//! Exit codes: 0 success, 1 usage or invalid input, 2 configuration error,
//! 3 the run diverged (logs are still written), 4 I/O error.

use std::ffi::OsString;
use std::fs;
use std::io::{LineWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{fingerprint, load_config, ExperimentConfig};
use crate::diagnostics::{
    detect_spikes, ema, paired_report, run_report, write_metrics_csv, DEFAULT_SPIKE_FACTOR, EMA_HALF_LIFE,
};
use crate::error::{Error, Result};
use crate::fp_codec::{write_code_table, ElementFormat, RoundingMode};
use crate::interventions::{divergence_step, intervention_run_with, InterventionAction, InterventionPlan};
use crate::mx_block::{dequantize_tensor, quantize_tensor, read_container, write_container, MxSpec};
use crate::proxy::sweep::{read_run_log, run_sweep, write_spike_table, RunSummary, SweepGrid};
use crate::proxy::train::{dual_run, to_jsonl, AnyTrainer, PairedRecord, RunLog, RunStatus, StepRecord, TOOL_VERSION};
use crate::scaling::{fit_scaling_law, read_points_csv, ScalingFit, DEFAULT_HUBER_DELTA};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Overrides `output_dir` from the config file.
pub const ENV_OUTPUT_DIR: &str = "MXLAB_OUTPUT_DIR";
/// Default for `--jobs`.
pub const ENV_JOBS: &str = "MXLAB_JOBS";

#[derive(Parser, Debug)]
#[command(name = "mxlab", version, about = "MX format emulation and low-precision training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dump the positive code table of an element format as CSV.
    Codes {
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quantize a flat little-endian f32 file into an MX container.
    Quantize {
        input: PathBuf,
        output: PathBuf,
        /// Element format, e.g. e4m3 or mxfp8-e4m3. Overrides the header.
        #[arg(long)]
        spec: Option<String>,
        /// Header JSON with `shape`, `axis` and `spec`; defaults to `<input>.json`.
        #[arg(long)]
        header: Option<PathBuf>,
        #[arg(long)]
        block_size: Option<usize>,
        #[arg(long)]
        axis: Option<usize>,
        /// Comma-separated dimensions; overrides the header.
        #[arg(long, value_delimiter = ',')]
        shape: Option<Vec<usize>>,
    },
    /// Decode an MX container back to a flat f32 file plus header.
    Dequantize { input: PathBuf, output: PathBuf },
    /// Train one run.
    Train {
        config: PathBuf,
        /// Add wall-clock seconds to each record.
        #[arg(long)]
        timings: bool,
    },
    /// Train high- and low-precision twins and compare their gradients.
    Dual { config_hp: PathBuf, config_lp: PathBuf },
    /// Run a grid of configurations.
    Sweep {
        config: PathBuf,
        /// TOML file holding the grid; defaults to the config's `[grid]`.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Train with scheduled recipe changes.
    Intervene {
        config: PathBuf,
        /// `STEP:ACTION`, e.g. `4500:to_fp32`; adds to the config's plan.
        #[arg(long = "plan")]
        plan: Vec<String>,
        /// Save a checkpoint right before this step.
        #[arg(long)]
        checkpoint_at: Option<usize>,
        /// Start from a checkpoint instead of step 0.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Spike, ζ and last-bin reports for every log in a directory.
    Analyze {
        logdir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a scaling law to `N,D,loss` rows.
    Fit {
        points: PathBuf,
        #[arg(long, default_value_t = DEFAULT_HUBER_DELTA)]
        huber_delta: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Map an error to its exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Codes { format, out } => cmd_codes(&format, out.as_deref()),
        Command::Quantize {
            input,
            output,
            spec,
            header,
            block_size,
            axis,
            shape,
        } => cmd_quantize(&input, &output, spec, header, block_size, axis, shape),
        Command::Dequantize { input, output } => cmd_dequantize(&input, &output),
        Command::Train { config, timings } => cmd_train(&config, timings),
        Command::Dual { config_hp, config_lp } => cmd_dual(&config_hp, &config_lp),
        Command::Sweep { config, grid, jobs } => cmd_sweep(&config, grid.as_deref(), jobs),
        Command::Intervene {
            config,
            plan,
            checkpoint_at,
            resume,
        } => cmd_intervene(&config, &plan, checkpoint_at, resume.as_deref()),
        Command::Analyze { logdir, out } => cmd_analyze(&logdir, out.as_deref()),
        Command::Fit {
            points,
            huber_delta,
            out,
        } => cmd_fit(&points, huber_delta, out.as_deref()),
    }
}

fn io_err(ctx: &str, path: &Path) -> impl FnOnce(std::io::Error) -> Error {
    let ctx = format!("{ctx} {}", path.display());
    move |e| Error::io(ctx, e)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err("creating", dir))?;
    }
    fs::write(path, bytes).map_err(io_err("writing", path))
}

fn cmd_codes(format: &str, out: Option<&Path>) -> Result<i32> {
    let fmt: ElementFormat = format.parse()?;
    let mut buf = Vec::new();
    write_code_table(fmt, &mut buf).expect("writing to memory");
    match out {
        Some(p) => write_file(p, &buf)?,
        None => std::io::stdout().write_all(&buf).map_err(|e| Error::io("writing stdout", e))?,
    }
    Ok(0)
}

/// Sidecar header of a raw f32 tensor file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounding: Option<RoundingMode>,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_f32_file(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(io_err("reading", path))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("length {} is not a multiple of 4", bytes.len()),
        });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

#[allow(clippy::too_many_arguments)]
fn cmd_quantize(
    input: &Path,
    output: &Path,
    spec: Option<String>,
    header: Option<PathBuf>,
    block_size: Option<usize>,
    axis: Option<usize>,
    shape: Option<Vec<usize>>,
) -> Result<i32> {
    let data = read_f32_file(input)?;
    let header_path = header.unwrap_or_else(|| sidecar(input));
    let mut h = if header_path.exists() {
        let text = fs::read_to_string(&header_path).map_err(io_err("reading", &header_path))?;
        serde_json::from_str::<TensorHeader>(&text).map_err(|e| Error::Format {
            path: header_path.clone(),
            message: e.to_string(),
        })?
    } else {
        TensorHeader {
            shape: vec![data.len()],
            axis: None,
            spec: None,
            block_size: None,
            rounding: None,
        }
    };
    if let Some(s) = shape {
        h.shape = s;
    }
    let spec_name = spec
        .or(h.spec.clone())
        .ok_or_else(|| Error::invalid("no element format given (use --spec or the header)"))?;
    let mut mx = MxSpec::new(spec_name.parse()?);
    if let Some(k) = block_size.or(h.block_size) {
        mx.block_size = k;
    }
    if let Some(r) = h.rounding {
        mx.rounding = r;
    }
    let axis = axis.or(h.axis).unwrap_or(h.shape.len().saturating_sub(1));
    let values: Vec<f64> = data.iter().map(|&x| x as f64).collect();
    let mt = quantize_tensor(&values, &h.shape, &mx, axis)?;
    let mut buf = Vec::new();
    write_container(&mt, &mut buf).expect("writing to memory");
    write_file(output, &buf)?;
    Ok(0)
}

fn cmd_dequantize(input: &Path, output: &Path) -> Result<i32> {
    let f = fs::File::open(input).map_err(io_err("opening", input))?;
    let mt = read_container(std::io::BufReader::new(f))?;
    let values = dequantize_tensor(&mt);
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    write_file(output, &bytes)?;
    let header = TensorHeader {
        shape: mt.shape.clone(),
        axis: Some(mt.axis),
        spec: Some(mt.spec.element.name().to_string()),
        block_size: Some(mt.spec.block_size),
        rounding: Some(mt.spec.rounding),
    };
    write_file(&sidecar(output), (serde_json::to_string_pretty(&header).unwrap() + "\n").as_bytes())?;
    Ok(0)
}

fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    std::env::var_os(ENV_OUTPUT_DIR)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output_dir.clone())
}

/// End-of-run summary written next to a log.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunFileSummary {
    fingerprint: String,
    version: String,
    status: RunStatus,
    steps: usize,
    divergence_step: Option<usize>,
    config: ExperimentConfig,
}

struct JsonlSink {
    path: PathBuf,
    w: LineWriter<fs::File>,
}

impl JsonlSink {
    fn create(path: PathBuf) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err("creating", dir))?;
        }
        let f = fs::File::create(&path).map_err(io_err("creating", &path))?;
        Ok(JsonlSink {
            path,
            w: LineWriter::new(f),
        })
    }

    fn write<R: Serialize>(&mut self, r: &R) -> Result<()> {
        let mut line = serde_json::to_string(r).expect("record serializes");
        line.push('\n');
        self.w
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(format!("writing {}", self.path.display()), e))
    }
}

fn finish_run(
    dir: &Path,
    stem: &str,
    cfg: &ExperimentConfig,
    fp: &str,
    records: Vec<StepRecord>,
    status: RunStatus,
) -> Result<i32> {
    let log = RunLog {
        fingerprint: fp.to_string(),
        records,
        status,
    };
    let summary = RunFileSummary {
        fingerprint: fp.to_string(),
        version: TOOL_VERSION.to_string(),
        status,
        steps: log.records.len(),
        divergence_step: divergence_step(&log),
        config: cfg.clone(),
    };
    let path = dir.join(format!("{stem}-{fp}.summary.json"));
    write_file(&path, (serde_json::to_string_pretty(&summary).unwrap() + "\n").as_bytes())?;
    println!("{}", dir.join(format!("{stem}-{fp}.jsonl")).display());
    if status.diverged() {
        eprintln!("run diverged at step {}", status.divergence_step().unwrap_or(0));
        Ok(EXIT_DIVERGED)
    } else {
        Ok(0)
    }
}

fn cmd_train(config: &Path, timings: bool) -> Result<i32> {
    let mut cfg = load_config(config)?;
    if !cfg.plan.is_empty() {
        log::warn!("`train` ignores the plan section; use `intervene`");
        cfg.plan.clear();
    }
    let fp = cfg.fingerprint();
    let dir = output_dir(&cfg);
    let mut trainer = AnyTrainer::new(&cfg.model, &cfg.train)?;
    trainer.set_fingerprint(fp.clone());
    trainer.set_timings(timings);
    let mut sink = JsonlSink::create(dir.join(format!("train-{fp}.jsonl")))?;
    let mut records = Vec::new();
    let status = crate::proxy::train::train_run_with(&mut trainer, &mut |r| {
        records.push(r.clone());
        sink.write(r)
    })?;
    finish_run(&dir, "train", &cfg, &fp, records, status)
}

fn cmd_dual(hp_path: &Path, lp_path: &Path) -> Result<i32> {
    let hp = load_config(hp_path)?;
    let lp = load_config(lp_path)?;
    if hp.model != lp.model {
        return Err(Error::Config {
            path: "model".into(),
            message: "dual-run twins must share the model section".into(),
        });
    }
    let run = dual_run(&hp.model, &hp.train, &lp.train)?;
    let fp = fingerprint(&(hp.fingerprint(), lp.fingerprint()));
    let dir = output_dir(&hp);
    let retag = |log: &RunLog| -> String {
        let recs: Vec<StepRecord> = log
            .records
            .iter()
            .cloned()
            .map(|mut r| {
                r.fingerprint = fp.clone();
                r
            })
            .collect();
        to_jsonl(&recs)
    };
    write_file(&dir.join(format!("dual-{fp}.hp.jsonl")), retag(&run.hp).as_bytes())?;
    write_file(&dir.join(format!("dual-{fp}.lp.jsonl")), retag(&run.lp).as_bytes())?;
    let paired: Vec<PairedRecord> = run
        .paired
        .records
        .iter()
        .cloned()
        .map(|mut r| {
            r.fingerprint = fp.clone();
            r
        })
        .collect();
    write_file(&dir.join(format!("dual-{fp}.paired.jsonl")), to_jsonl(&paired).as_bytes())?;
    println!("{}", dir.join(format!("dual-{fp}.paired.jsonl")).display());
    if run.lp.status.diverged() || run.hp.status.diverged() {
        eprintln!(
            "divergence: hp {:?}, lp {:?}",
            run.hp.status.divergence_step(),
            run.lp.status.divergence_step()
        );
        Ok(EXIT_DIVERGED)
    } else {
        Ok(0)
    }
}

fn jobs_default(flag: Option<usize>) -> Result<usize> {
    if let Some(j) = flag {
        return Ok(j.max(1));
    }
    match std::env::var(ENV_JOBS) {
        Ok(v) => v
            .parse::<usize>()
            .map(|j| j.max(1))
            .map_err(|_| Error::invalid(format!("{ENV_JOBS}={v} is not a count"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn cmd_sweep(config: &Path, grid_path: Option<&Path>, jobs: Option<usize>) -> Result<i32> {
    let mut cfg = load_config(config)?;
    if let Some(p) = grid_path {
        let text = fs::read_to_string(p).map_err(io_err("reading", p))?;
        let de = toml::Deserializer::parse(&text).map_err(|e| Error::Config {
            path: "grid".into(),
            message: e.message().to_string(),
        })?;
        let grid: SweepGrid = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: format!("grid.{}", e.path()),
            message: e.into_inner().message().to_string(),
        })?;
        cfg.grid = Some(grid);
    }
    let grid = cfg.grid.clone().ok_or_else(|| Error::Config {
        path: "grid".into(),
        message: "no grid given (add a [grid] section or pass --grid)".into(),
    })?;
    let fp = cfg.fingerprint();
    let dir = output_dir(&cfg).join(format!("sweep-{fp}"));
    let outcomes = run_sweep(&cfg.model, &cfg.train, &grid, Some(&dir), jobs_default(jobs)?)?;
    let summaries: Vec<RunSummary> = outcomes.into_iter().map(|o| o.summary).collect();
    let mut csv = format!("# fingerprint={fp} version={TOOL_VERSION}\n").into_bytes();
    write_spike_table(&summaries, &mut csv).expect("writing to memory");
    let table = dir.join(format!("spikes-{fp}.csv"));
    write_file(&table, &csv)?;
    println!("{}", table.display());
    let failed = summaries.iter().filter(|s| s.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} run(s) failed; see the table");
    }
    Ok(0)
}

/// Parse `STEP:ACTION`.
pub fn parse_plan_arg(s: &str) -> Result<InterventionPlan> {
    let (step, action) = s
        .split_once(':')
        .ok_or_else(|| Error::invalid(format!("plan `{s}` is not STEP:ACTION")))?;
    let step = step
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("plan `{s}`: bad step")))?;
    let action: InterventionAction = serde_json::from_value(serde_json::Value::String(action.trim().to_string()))
        .map_err(|_| Error::invalid(format!("plan `{s}`: unknown action")))?;
    Ok(InterventionPlan { step, action })
}

fn cmd_intervene(config: &Path, plan_args: &[String], checkpoint_at: Option<usize>, resume: Option<&Path>) -> Result<i32> {
    let mut cfg = load_config(config)?;
    for p in plan_args {
        cfg.plan.push(parse_plan_arg(p)?);
    }
    cfg.validate()?;
    let fp = cfg.fingerprint();
    let dir = output_dir(&cfg);
    let mut trainer = match resume {
        Some(path) => {
            let t = AnyTrainer::load_checkpoint(path)?;
            let header = crate::proxy::train::read_checkpoint_header(path)?;
            if header.model != cfg.model || header.train != cfg.train {
                return Err(Error::Config {
                    path: "model/train".into(),
                    message: format!("checkpoint {} was written for a different config", path.display()),
                });
            }
            t
        }
        None => AnyTrainer::new(&cfg.model, &cfg.train)?,
    };
    trainer.set_fingerprint(fp.clone());
    let start = trainer.current_step();
    let stem = if start > 0 { format!("intervene-from{start}") } else { "intervene".into() };
    let mut sink = JsonlSink::create(dir.join(format!("{stem}-{fp}.jsonl")))?;
    let mut records = Vec::new();
    let ck_dir = dir.clone();
    let status = match checkpoint_at {
        Some(at) => {
            // run to the checkpoint step with the plan applied, save, continue
            let early: Vec<InterventionPlan> = cfg.plan.iter().copied().filter(|p| p.step < at).collect();
            let late: Vec<InterventionPlan> = cfg.plan.iter().copied().filter(|p| p.step >= at).collect();
            while !trainer.finished() && trainer.current_step() < at {
                let t = trainer.current_step();
                for p in early.iter().filter(|p| p.step == t) {
                    let q = p.action.apply(trainer.quant());
                    trainer.set_quant(q)?;
                }
                let r = trainer.step()?;
                sink.write(&r)?;
                records.push(r);
            }
            let ck = ck_dir.join(format!("checkpoint-{fp}-step{at}.bin"));
            trainer.save_checkpoint(&ck)?;
            eprintln!("checkpoint: {}", ck.display());
            intervention_run_with(&mut trainer, &late, &mut |r| {
                records.push(r.clone());
                sink.write(r)
            })?
        }
        None => intervention_run_with(&mut trainer, &cfg.plan, &mut |r| {
            records.push(r.clone());
            sink.write(r)
        })?,
    };
    finish_run(&dir, &stem, &cfg, &fp, records, status)
}

#[derive(Debug, Serialize)]
struct LogAnalysis {
    file: String,
    kind: &'static str,
    fingerprint: Option<String>,
    version: String,
    steps: usize,
    spikes: Vec<usize>,
    divergence_step: Option<usize>,
    max_zeta_lower_ema: Option<f64>,
    first_zeta_ema_above_one: Option<usize>,
}

fn cmd_analyze(logdir: &Path, out: Option<&Path>) -> Result<i32> {
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| logdir.to_path_buf());
    let mut entries: Vec<PathBuf> = fs::read_dir(logdir)
        .map_err(io_err("listing", logdir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    entries.sort();
    let mut reports = Vec::new();
    for path in entries {
        let name = path.file_stem().unwrap().to_string_lossy().to_string();
        let text = fs::read_to_string(&path).map_err(io_err("reading", &path))?;
        let first = text.lines().find(|l| !l.trim().is_empty());
        let is_paired = first.is_some_and(|l| l.contains("\"eps_norm\""));
        let (rows, analysis) = if is_paired {
            let mut recs: Vec<PairedRecord> = Vec::new();
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                recs.push(serde_json::from_str(line).map_err(|e| Error::Format {
                    path: path.clone(),
                    message: format!("line {}: {e}", i + 1),
                })?);
            }
            let zeta: Vec<f64> = recs.iter().map(|r| r.zeta_lower).collect();
            let smooth = ema(&zeta, EMA_HALF_LIFE);
            let max = smooth.iter().copied().filter(|x| x.is_finite()).fold(None, |m: Option<f64>, x| {
                Some(m.map_or(x, |m| m.max(x)))
            });
            let above = smooth.iter().position(|&z| z > 1.0).map(|i| recs[i].step);
            let a = LogAnalysis {
                file: path.display().to_string(),
                kind: "paired",
                fingerprint: recs.first().map(|r| r.fingerprint.clone()),
                version: TOOL_VERSION.into(),
                steps: recs.len(),
                spikes: Vec::new(),
                divergence_step: None,
                max_zeta_lower_ema: max,
                first_zeta_ema_above_one: above,
            };
            (paired_report(&recs), a)
        } else {
            let recs = read_run_log(&path)?;
            let losses: Vec<f64> = recs.iter().map(|r| r.loss).take_while(|l| l.is_finite() && *l > 0.0).collect();
            let spikes = detect_spikes(&losses, DEFAULT_SPIKE_FACTOR)
                .map(|r| r.spike_steps.iter().map(|&i| recs[i].step).collect())
                .unwrap_or_default();
            let nan_status = match recs.iter().position(|r| !r.loss.is_finite()) {
                Some(i) => RunStatus::Diverged {
                    step: recs[i].step,
                    reason: crate::proxy::train::DivergenceReason::NonFinite,
                },
                None => RunStatus::Completed,
            };
            let log = RunLog {
                fingerprint: recs.first().map(|r| r.fingerprint.clone()).unwrap_or_default(),
                records: recs,
                status: nan_status,
            };
            let a = LogAnalysis {
                file: path.display().to_string(),
                kind: "run",
                fingerprint: log.records.first().map(|r| r.fingerprint.clone()),
                version: TOOL_VERSION.into(),
                steps: log.records.len(),
                spikes,
                divergence_step: divergence_step(&log),
                max_zeta_lower_ema: None,
                first_zeta_ema_above_one: None,
            };
            (run_report(&log.records), a)
        };
        let mut csv = format!(
            "# fingerprint={} version={TOOL_VERSION}\n",
            analysis.fingerprint.as_deref().unwrap_or("")
        )
        .into_bytes();
        write_metrics_csv(&rows, &mut csv).expect("writing to memory");
        write_file(&out_dir.join(format!("{name}.analysis.csv")), &csv)?;
        reports.push(analysis);
    }
    let json = serde_json::to_string_pretty(&reports).unwrap() + "\n";
    write_file(&out_dir.join("analysis.json"), json.as_bytes())?;
    print!("{json}");
    Ok(0)
}

#[derive(Serialize)]
struct FitOutput {
    #[serde(flatten)]
    fit: ScalingFit,
    points: usize,
    fingerprint: String,
    version: String,
}

fn cmd_fit(points: &Path, huber_delta: f64, out: Option<&Path>) -> Result<i32> {
    let f = fs::File::open(points).map_err(io_err("opening", points))?;
    let pts = read_points_csv(f)?;
    let fit = fit_scaling_law(&pts, huber_delta)?;
    let out_doc = FitOutput {
        fit,
        points: pts.len(),
        fingerprint: fingerprint(&(&pts, huber_delta)),
        version: TOOL_VERSION.into(),
    };
    let json = serde_json::to_string_pretty(&out_doc).unwrap() + "\n";
    match out {
        Some(p) => write_file(p, json.as_bytes())?,
        None => print!("{json}"),
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_args() {
        let p = parse_plan_arg("4500:to_fp32").unwrap();
        assert_eq!(p.step, 4500);
        assert_eq!(p.action, InterventionAction::ToFp32);
        assert!(parse_plan_arg("4500").is_err());
        assert!(parse_plan_arg("x:to_fp32").is_err());
        assert!(parse_plan_arg("1:explode").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["mxlab", "bogus"]), EXIT_USAGE);
        assert_eq!(run(["mxlab", "codes", "e9m9"]), EXIT_USAGE);
    }
}
