use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use vigil_core::orchestrator::{self, OrchestratorError, Rules, RunConfig, RunManifest, Tool};
use vigil_core::robin_sim::{self, Scenario, SimError};
use vigil_core::timefmt;

#[derive(Parser)]
#[command(name = "vigil", version, about = "Reflective maintenance runs over agent event logs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Appraise new events into the emotion bank.
    UpdateEmobank {
        #[command(flatten)]
        run: RunArgs,
        /// Start a new run even if the stored one has not finished.
        #[arg(long)]
        new_run: bool,
    },
    /// Roses/buds/thorns diagnosis over the bank.
    Diagnose(RunArgs),
    /// Rewrite the adaptive prompt section into <out>/new_prompt.txt.
    PatchPrompt(RunArgs),
    /// Scan the repository and write a proposed diff and PR note.
    ProposeDiff(RunArgs),
    /// All four stages in order under a fresh run.
    RunAll(RunArgs),
    /// Write a synthetic reminder log, toy repository and prompt.
    Simulate(SimArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long, default_value = "logs/events.jsonl")]
    log: PathBuf,
    #[arg(long, default_value = "prompt.txt")]
    prompt: PathBuf,
    #[arg(long, default_value = ".")]
    repo: PathBuf,
    #[arg(long, default_value = "output")]
    out: PathBuf,
    /// Bank file; defaults to emobank.jsonl next to the log.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Clock override, ISO-8601. Naive values are read as UTC.
    #[arg(long, value_parser = parse_now)]
    now: Option<DateTime<Utc>>,
    #[arg(long, default_value_t = 24.0)]
    window_hours: f64,
    #[arg(long, default_value_t = 12.0)]
    half_life: f64,
    #[arg(long, default_value_t = 500)]
    max_events: usize,
    /// Testing only: make the named stage fail.
    #[arg(long, value_name = "STAGE", value_parser = parse_tool)]
    inject_fault: Option<Tool>,
    /// JSON file overriding appraisal, pattern or prompt rules.
    #[arg(long)]
    rules: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    /// `before` or `after`; the flags below override preset fields.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value = ".")]
    root: PathBuf,
    #[arg(long, value_parser = parse_now)]
    now: Option<DateTime<Utc>>,
    #[arg(long)]
    n_reminders: Option<usize>,
    #[arg(long)]
    mean_delay_sec: Option<f64>,
    #[arg(long)]
    max_delay_sec: Option<f64>,
    #[arg(long)]
    premature_toasts: Option<bool>,
    #[arg(long)]
    mix_timestamp_formats: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    post_fix: Option<bool>,
}

fn parse_now(raw: &str) -> Result<DateTime<Utc>, String> {
    timefmt::parse_ts(raw)
        .map(|p| p.instant)
        .ok_or_else(|| format!("not an ISO-8601 timestamp: {raw}"))
}

fn parse_tool(raw: &str) -> Result<Tool, String> {
    raw.parse()
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::new(
            self.log.clone(),
            self.prompt.clone(),
            self.repo.clone(),
            self.out.clone(),
            self.now.unwrap_or_else(Utc::now),
        );
        if let Some(bank) = &self.bank {
            cfg.bank = bank.clone();
        }
        cfg.window_hours = self.window_hours;
        cfg.half_life_hours = self.half_life;
        cfg.max_events = self.max_events;
        cfg.fault = self.inject_fault;
        if let Some(path) = &self.rules {
            cfg.rules = Rules::load(path)?;
        }
        Ok(cfg)
    }
}

impl SimArgs {
    fn scenario(&self) -> Result<Scenario> {
        let mut s = match self.preset.as_deref() {
            Some(name) => Scenario::preset(name).ok_or_else(|| anyhow!(SimError::Invalid(format!("unknown preset {name:?}"))))?,
            None => Scenario::before(),
        };
        if let Some(v) = self.n_reminders {
            s.n_reminders = v;
        }
        if let Some(v) = self.mean_delay_sec {
            s.mean_delay_sec = v;
        }
        if let Some(v) = self.max_delay_sec {
            s.max_delay_sec = v;
        }
        if let Some(v) = self.premature_toasts {
            s.premature_toasts = v;
        }
        if let Some(v) = self.mix_timestamp_formats {
            s.mix_timestamp_formats = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.post_fix {
            s.post_fix = v;
        }
        Ok(s)
    }
}

fn single(run: &RunArgs, tool: Tool, new_run: bool) -> Result<ExitCode> {
    let cfg = run.config()?;
    let (manifest, _) = orchestrator::run_single(&cfg, tool, new_run)?;
    print!("{}", orchestrator::summary(&manifest));
    Ok(finish(&manifest, tool == Tool::BuildPromptPatch))
}

fn finish(manifest: &RunManifest, prompt_stage_ran: bool) -> ExitCode {
    if prompt_stage_ran && manifest.guard_aborted {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    }
}

fn simulate(args: &SimArgs) -> Result<ExitCode> {
    let scenario = args.scenario()?;
    let now = args.now.unwrap_or_else(Utc::now);
    let layout = robin_sim::simulate(&scenario, &args.root, now)?;
    let metrics = robin_sim::metrics_for_log(&layout.log)?;
    let report = serde_json::json!({ "layout": layout, "metrics": metrics });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::UpdateEmobank { run, new_run } => single(run, Tool::UpdateEmobank, *new_run),
        Command::Diagnose(run) => single(run, Tool::DiagnoseRbt, false),
        Command::PatchPrompt(run) => single(run, Tool::BuildPromptPatch, false),
        Command::ProposeDiff(run) => single(run, Tool::BuildCodeProposal, false),
        Command::RunAll(run) => {
            let cfg = run.config()?;
            let manifest = orchestrator::run_all(&cfg).context("run-all")?;
            print!("{}", orchestrator::summary(&manifest));
            Ok(finish(&manifest, true))
        }
        Command::Simulate(args) => simulate(args),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<OrchestratorError>() {
        return e.exit_code() as u8;
    }
    match err.downcast_ref::<SimError>() {
        Some(SimError::Io { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are configuration errors; 2 is reserved
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
