//! Commands behind the `naq` binary.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use naq_core::agents::pipeline::{DEFAULT_BUDGET, DEFAULT_CANDIDATES};
use naq_core::agents::report::{image_file_name, IMAGES_DIR, NUMERIC_FILE, QUERY_FILE, TRANSCRIPTS_DIR};
use naq_core::agents::{
    run_pipeline, run_rewrite_stage, write_run_dir, AgentSet, ChatBackend, Clock, FrozenClock, HttpBackend, HttpConfig,
    MockBackend, PipelineConfig, SystemClock,
};
use naq_core::archir::{parse_candidates, ArchitectureIR};
use naq_core::dataset::{load_dataset, representative_series, Task, TimeSeriesDataset, DEFAULT_REGRESSION_BINS};
use naq_core::profiler::{check_limits, lookup_device, profile, DeviceSpec, Limits, ProfileOptions, Quant};
use naq_core::querygen::{render_all, serialize_numeric, RenderStyle, DEFAULT_FIXED_LENGTH};

pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, Parser)]
#[command(name = "naq", version, about = "Constraint-aware architecture querying for on-device time-series models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the full pipeline and write a run directory.
    Query(QueryArgs),
    /// Profile an architecture against device limits.
    Profile(ProfileArgs),
    /// Run only the query rewrite and print the result.
    Rewrite(QueryArgs),
    /// Render representative-series images and the numeric summary.
    Render(RenderArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    OpenaiCompatible,
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantArg {
    Int8,
    Float32,
}

impl From<QuantArg> for Quant {
    fn from(q: QuantArg) -> Quant {
        match q {
            QuantArg::Int8 => Quant::Int8,
            QuantArg::Float32 => Quant::Float32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockArg {
    System,
    Frozen,
}

#[derive(Debug, Clone, Default, Args)]
pub struct LimitArgs {
    /// Device name from the built-in table.
    #[arg(long)]
    pub device: Option<String>,
    /// RAM limit in bytes.
    #[arg(long)]
    pub ram: Option<u64>,
    /// Flash limit in bytes.
    #[arg(long)]
    pub flash: Option<u64>,
    /// Clock frequency in Hz, overriding the device's.
    #[arg(long)]
    pub clock_hz: Option<u64>,
    #[arg(long)]
    pub latency_ms: Option<f64>,
    #[arg(long)]
    pub macs: Option<u64>,
    #[arg(long)]
    pub params: Option<u64>,
    #[arg(long, value_enum)]
    pub quant: Option<QuantArg>,
    /// Treat BatchNorm layers as folded into the preceding layer.
    #[arg(long)]
    pub fold_bn: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct QueryArgs {
    /// TOML file with defaults for any of these options.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding the dataset (or its parent).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, conflicts_with = "prompt_file")]
    pub prompt: Option<String>,
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    #[command(flatten)]
    pub limits: LimitArgs,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// JSON-lines responses for the mock backend.
    #[arg(long)]
    pub mock_fixture: Option<PathBuf>,
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API token.
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub timeout_s: Option<u64>,
    #[arg(long)]
    pub max_retries: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub no_rewrite: bool,
    /// Comma-separated subset of design,search,eval,code.
    #[arg(long)]
    pub agents: Option<String>,
    #[arg(long)]
    pub images_all_stages: bool,
    #[arg(long)]
    pub code_agent_writes: bool,
    #[arg(long)]
    pub manager_verify: bool,
    #[arg(long)]
    pub fixed_length: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Wall-time source; defaults to frozen for the mock backend.
    #[arg(long, value_enum)]
    pub clock: Option<ClockArg>,
}

#[derive(Debug, Clone, Args)]
pub struct ProfileArgs {
    /// ArchitectureIR JSON, or text holding a `layer_sequence` configuration.
    #[arg(long)]
    pub arch: PathBuf,
    /// Input shape as T,d; required for `layer_sequence` text.
    #[arg(long)]
    pub input_shape: Option<String>,
    #[arg(long)]
    pub output_units: Option<usize>,
    #[arg(long, default_value = "classification")]
    pub task: String,
    #[command(flatten)]
    pub limits: LimitArgs,
    /// Also write the result to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub fixed_length: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
}

/// Options as read from a TOML file. Command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub name: Option<String>,
    pub prompt: Option<String>,
    pub prompt_file: Option<PathBuf>,
    pub device: Option<String>,
    pub ram: Option<u64>,
    pub flash: Option<u64>,
    pub clock_hz: Option<u64>,
    pub latency_ms: Option<f64>,
    pub macs: Option<u64>,
    pub params: Option<u64>,
    pub quant: Option<QuantArg>,
    pub fold_bn: Option<bool>,
    pub budget: Option<usize>,
    pub candidates: Option<usize>,
    pub backend: Option<BackendKind>,
    pub mock_fixture: Option<PathBuf>,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub temperature: Option<f64>,
    pub timeout_s: Option<u64>,
    pub max_retries: Option<u32>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub no_rewrite: Option<bool>,
    pub agents: Option<String>,
    pub images_all_stages: Option<bool>,
    pub code_agent_writes: Option<bool>,
    pub manager_verify: Option<bool>,
    pub fixed_length: Option<usize>,
    pub bins: Option<usize>,
    pub clock: Option<ClockArg>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Flags over file values. Paths in the file are relative to the file.
    pub fn merge(file: RunConfig, base: Option<&Path>, a: &QueryArgs) -> RunConfig {
        let rel = |p: Option<PathBuf>| p.map(|p| base.map_or(p.clone(), |b| b.join(&p)));
        let flag = |b: bool, f: Option<bool>| if b { Some(true) } else { f };
        let l = &a.limits;
        let prompt_from_flags = a.prompt.is_some() || a.prompt_file.is_some();
        RunConfig {
            data: a.data.clone().or(rel(file.data)),
            name: a.name.clone().or(file.name),
            prompt: if prompt_from_flags { a.prompt.clone() } else { file.prompt },
            prompt_file: if prompt_from_flags { a.prompt_file.clone() } else { rel(file.prompt_file) },
            device: l.device.clone().or(file.device),
            ram: l.ram.or(file.ram),
            flash: l.flash.or(file.flash),
            clock_hz: l.clock_hz.or(file.clock_hz),
            latency_ms: l.latency_ms.or(file.latency_ms),
            macs: l.macs.or(file.macs),
            params: l.params.or(file.params),
            quant: l.quant.or(file.quant),
            fold_bn: flag(l.fold_bn, file.fold_bn),
            budget: a.budget.or(file.budget),
            candidates: a.candidates.or(file.candidates),
            backend: a.backend.or(file.backend),
            mock_fixture: a.mock_fixture.clone().or(rel(file.mock_fixture)),
            base_url: a.base_url.clone().or(file.base_url),
            model: a.model.clone().or(file.model),
            api_key_env: a.api_key_env.clone().or(file.api_key_env),
            temperature: a.temperature.or(file.temperature),
            timeout_s: a.timeout_s.or(file.timeout_s),
            max_retries: a.max_retries.or(file.max_retries),
            seed: a.seed.or(file.seed),
            out: a.out.clone().or(rel(file.out)),
            no_rewrite: flag(a.no_rewrite, file.no_rewrite),
            agents: a.agents.clone().or(file.agents),
            images_all_stages: flag(a.images_all_stages, file.images_all_stages),
            code_agent_writes: flag(a.code_agent_writes, file.code_agent_writes),
            manager_verify: flag(a.manager_verify, file.manager_verify),
            fixed_length: a.fixed_length.or(file.fixed_length),
            bins: a.bins.or(file.bins),
            clock: a.clock.or(file.clock),
        }
    }

    pub fn load(a: &QueryArgs) -> Result<RunConfig> {
        match &a.config {
            Some(path) => {
                let file = RunConfig::from_file(path)?;
                Ok(RunConfig::merge(file, path.parent(), a))
            }
            None => Ok(RunConfig::merge(RunConfig::default(), None, a)),
        }
    }

    pub fn user_prompt(&self) -> Result<String> {
        match (&self.prompt, &self.prompt_file) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(f)) => std::fs::read_to_string(f).with_context(|| format!("reading prompt file {}", f.display())),
            (None, None) => bail!("a prompt is required (--prompt or --prompt-file)"),
        }
    }

    pub fn limits(&self) -> Limits {
        Limits {
            flash_bytes: self.flash,
            ram_bytes: self.ram,
            macs: self.macs,
            params: self.params,
            latency_ms: self.latency_ms,
            ..Limits::default()
        }
    }

    pub fn backend_kind(&self) -> Result<BackendKind> {
        match (self.backend, &self.mock_fixture) {
            (Some(BackendKind::OpenaiCompatible), Some(_)) => {
                bail!("--mock-fixture cannot be combined with the openai-compatible backend")
            }
            (Some(b), _) => Ok(b),
            (None, Some(_)) => Ok(BackendKind::Mock),
            (None, None) => Ok(BackendKind::OpenaiCompatible),
        }
    }

    pub fn backend(&self) -> Result<Box<dyn ChatBackend>> {
        match self.backend_kind()? {
            BackendKind::Mock => {
                let path = self.mock_fixture.as_ref().ok_or_else(|| anyhow!("the mock backend needs --mock-fixture"))?;
                Ok(Box::new(MockBackend::from_file(path)?))
            }
            BackendKind::OpenaiCompatible => {
                let defaults = HttpConfig::default();
                let env = self.api_key_env.clone().unwrap_or_else(|| DEFAULT_API_KEY_ENV.to_string());
                let api_key = std::env::var(&env).ok();
                if api_key.is_none() {
                    log::warn!("{env} is not set; sending requests without a token");
                }
                Ok(Box::new(HttpBackend::new(HttpConfig {
                    base_url: self.base_url.clone().unwrap_or(defaults.base_url),
                    model: self.model.clone().unwrap_or(defaults.model),
                    api_key,
                    temperature: self.temperature.unwrap_or(defaults.temperature),
                    seed: self.seed,
                    timeout: self.timeout_s.map(Duration::from_secs).unwrap_or(defaults.timeout),
                    max_retries: self.max_retries.unwrap_or(defaults.max_retries),
                    retry_backoff: defaults.retry_backoff,
                })?))
            }
        }
    }

    pub fn clock(&self) -> Result<Box<dyn Clock>> {
        let kind = match self.clock {
            Some(c) => c,
            None if self.backend_kind()? == BackendKind::Mock => ClockArg::Frozen,
            None => ClockArg::System,
        };
        Ok(match kind {
            ClockArg::System => Box::new(SystemClock::new()),
            ClockArg::Frozen => Box::new(FrozenClock),
        })
    }

    pub fn dataset(&self) -> Result<TimeSeriesDataset> {
        let data = self.data.as_ref().ok_or_else(|| anyhow!("--data is required"))?;
        let name = self.name.clone().unwrap_or_default();
        Ok(load_dataset(data, &name)?)
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let (device, warning) = resolve_device(self.device.as_deref(), self.clock_hz);
        let agents: AgentSet = match &self.agents {
            Some(s) => s.parse().map_err(|e: String| anyhow!(e))?,
            None => AgentSet::all(),
        };
        let budget = self.budget.unwrap_or(DEFAULT_BUDGET);
        let candidates = self.candidates.unwrap_or(DEFAULT_CANDIDATES);
        if budget == 0 || candidates == 0 {
            bail!("--budget and --candidates must be at least 1");
        }
        Ok(PipelineConfig {
            user_prompt: self.user_prompt()?,
            budget,
            candidates,
            agents,
            no_rewrite: self.no_rewrite.unwrap_or(false),
            images_all_stages: self.images_all_stages.unwrap_or(false),
            code_agent_writes: self.code_agent_writes.unwrap_or(false),
            manager_verify: self.manager_verify.unwrap_or(false),
            profile: ProfileOptions {
                quant: self.quant.map(Quant::from).unwrap_or_default(),
                fold_bn: self.fold_bn.unwrap_or(false),
                ..ProfileOptions::default()
            },
            device,
            device_warning: warning,
            limit_flags: self.limits(),
            fixed_length: self.fixed_length.unwrap_or(DEFAULT_FIXED_LENGTH),
            n_bins: self.bins.unwrap_or(DEFAULT_REGRESSION_BINS),
            style: RenderStyle::default(),
            seed: self.seed.unwrap_or(0),
        })
    }
}

/// Device from the table, or the default device, with an optional clock
/// override.
pub fn resolve_device(name: Option<&str>, clock_hz: Option<u64>) -> (DeviceSpec, Option<String>) {
    let (mut dev, warning) = match name {
        Some(n) => lookup_device(n),
        None => (naq_core::profiler::default_device(), None),
    };
    if let Some(hz) = clock_hz {
        dev.clock_hz = hz;
    }
    (dev, warning)
}

fn print_json(v: &impl Serialize) -> Result<String> {
    let s = serde_json::to_string_pretty(v)? + "\n";
    print!("{s}");
    Ok(s)
}

/// Runs the pipeline and writes the run directory. Exits 1 when the run
/// recorded an error.
pub fn cmd_query(a: &QueryArgs) -> Result<ExitCode> {
    let rc = RunConfig::load(a)?;
    let out_dir = rc.out.clone().ok_or_else(|| anyhow!("--out is required"))?;
    let ds = rc.dataset()?;
    let cfg = rc.pipeline_config()?;
    let mut backend = rc.backend()?;
    let clock = rc.clock()?;
    let outcome = run_pipeline(&cfg, &ds, backend.as_mut(), clock.as_ref());
    write_run_dir(&out_dir, &outcome).with_context(|| format!("writing {}", out_dir.display()))?;
    let r = &outcome.report;
    match &r.selected {
        Some(s) => println!(
            "selected {} ({}{}) after {} round(s); {} chat call(s)",
            &s.id[..12],
            if s.feasible { "feasible" } else { "infeasible" },
            if s.best_effort { ", best effort" } else { "" },
            r.rounds_used,
            r.ledger.totals.chat_calls
        ),
        None => println!("no model selected; {} chat call(s)", r.ledger.totals.chat_calls),
    }
    println!("run directory: {}", out_dir.display());
    if let Some(e) = &r.error {
        eprintln!("error: {e}");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

/// Prints the rewritten query, and writes it with transcripts under `--out`
/// when given.
pub fn cmd_rewrite(a: &QueryArgs) -> Result<ExitCode> {
    let rc = RunConfig::load(a)?;
    let ds = rc.dataset()?;
    let cfg = rc.pipeline_config()?;
    let mut backend = rc.backend()?;
    let clock = rc.clock()?;
    let res = run_rewrite_stage(&cfg, &ds, backend.as_mut(), clock.as_ref())?;
    let doc = json!({
        "query": res.query.summary_json(),
        "rewrite_failed": res.failure,
        "ledger": {
            "entries": res.ledger.entries,
            "totals": res.ledger.totals(),
        },
    });
    let text = print_json(&doc)?;
    if let Some(dir) = &rc.out {
        std::fs::create_dir_all(dir.join(TRANSCRIPTS_DIR))?;
        std::fs::write(dir.join(QUERY_FILE), text)?;
        for t in &res.transcripts {
            let body = serde_json::to_string_pretty(t)? + "\n";
            std::fs::write(dir.join(TRANSCRIPTS_DIR).join(format!("{:02}_{}.json", t.seq, t.stage)), body)?;
        }
    }
    Ok(if res.failure.is_some() { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let (t, d) = s.split_once(',').ok_or_else(|| anyhow!("--input-shape must be T,d"))?;
    Ok((t.trim().parse()?, d.trim().parse()?))
}

/// Architecture from IR JSON or from the first `layer_sequence` in text.
pub fn load_arch(text: &str, args: &ProfileArgs) -> Result<ArchitectureIR> {
    if let Ok(arch) = ArchitectureIR::from_json(text) {
        return Ok(arch);
    }
    let parsed = parse_candidates(text);
    let cfg = match (parsed.configs.into_iter().next(), parsed.rejected.first()) {
        (Some(c), _) => c,
        (None, Some(r)) => bail!("configuration {} rejected: {}", r.position, r.reason),
        (None, None) => bail!("no architecture found in {}", args.arch.display()),
    };
    let shape = parse_shape(args.input_shape.as_deref().ok_or_else(|| anyhow!("--input-shape is required for layer_sequence input"))?)?;
    let task = match args.task.to_ascii_lowercase().as_str() {
        "classification" => Task::Classification,
        "regression" => Task::Regression,
        other => bail!("unknown task {other:?}"),
    };
    let units = match args.output_units {
        Some(u) => u,
        None => cfg
            .layers
            .last()
            .and_then(|l| l.units)
            .ok_or_else(|| anyhow!("--output-units is required"))?,
    };
    Ok(ArchitectureIR::new(cfg.layers, shape, units, task))
}

pub fn cmd_profile(a: &ProfileArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&a.arch).with_context(|| format!("reading {}", a.arch.display()))?;
    let arch = load_arch(&text, a)?;
    let l = &a.limits;
    let (dev, warning) = resolve_device(l.device.as_deref(), l.clock_hz);
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let opts = ProfileOptions {
        quant: l.quant.map(Quant::from).unwrap_or_default(),
        fold_bn: l.fold_bn,
        ..ProfileOptions::default()
    };
    let report = profile(&arch, &dev, opts)?;
    let flags = Limits {
        flash_bytes: l.flash,
        ram_bytes: l.ram,
        macs: l.macs,
        params: l.params,
        latency_ms: l.latency_ms,
        ..Limits::default()
    };
    let limits = Limits::resolve(&flags, None, &dev);
    let verdict = check_limits(&report, &limits);
    let doc = json!({
        "arch_id": arch.id,
        "device": dev,
        "device_warning": warning,
        "limits": limits,
        "profile": report,
        "verdict": verdict,
    });
    let text = print_json(&doc)?;
    if let Some(out) = &a.out {
        std::fs::write(out, text)?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_render(a: &RenderArgs) -> Result<ExitCode> {
    let ds = load_dataset(&a.data, &a.name)?;
    let reps = representative_series(&ds, a.bins.unwrap_or(DEFAULT_REGRESSION_BINS))?;
    let images = render_all(&reps, RenderStyle::default())?;
    let dir = a.out.join(IMAGES_DIR);
    std::fs::create_dir_all(&dir)?;
    for (i, (label, png)) in images.iter().enumerate() {
        let path = dir.join(image_file_name(i, label));
        std::fs::write(&path, png)?;
        println!("{}", path.display());
    }
    let csv = serialize_numeric(&reps, a.fixed_length.unwrap_or(DEFAULT_FIXED_LENGTH));
    std::fs::write(a.out.join(NUMERIC_FILE), csv)?;
    Ok(ExitCode::SUCCESS)
}

pub fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Query(a) => cmd_query(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Rewrite(a) => cmd_rewrite(a),
        Command::Render(a) => cmd_render(a),
    }
}
