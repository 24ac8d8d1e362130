//! `ionlock` command-line front end.
//!
//! Every verb writes its outputs and a report into the output directory and
//! exits non-zero if any expectation in the report fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ionlock::control::LoopConfig;
use ionlock::harness::experiment::OUT_DIR_ENV;
use ionlock::harness::scenario::{
    apply_overrides, merge_toml, G2Analysis, LockAnalysis, LockinAnalysis, WelchAnalysis,
};
use ionlock::harness::{
    export_report, parse_report, parse_scenario, preset, run_experiment, run_scenario, Analysis,
    ExperimentReport, ReportFormat, RunOptions, Scenario, EXPERIMENTS,
};

#[derive(Parser)]
#[command(name = "ionlock", version, about = "Trapped-ion motion readout and phase-lock simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (TOML). Defaults apply to everything it leaves out.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Inline TOML fragment merged over the scenario, e.g. `duration = 5.0`.
    #[arg(long = "set")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// 2 s records with widened statistical tolerances.
    #[arg(long)]
    fast: bool,
    /// Also write SVG plots.
    #[arg(long)]
    render: bool,
}

impl Common {
    fn options(&self) -> RunOptions {
        RunOptions {
            fast: self.fast,
            render: self.render,
            seed: self.seed,
        }
    }

    /// Scenario from file plus overrides; `analyses` replaces the analysis
    /// list unless the file gave its own.
    fn scenario(&self, base: Scenario) -> Result<Scenario> {
        let mut s = match &self.scenario {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let mut s = parse_scenario(&text)?;
                if !text.contains("[[analyses]]") {
                    s.analyses = base.analyses;
                }
                if s.loop_cfg.is_none() {
                    s.loop_cfg = base.loop_cfg;
                }
                s
            }
            None => base,
        };
        for o in &self.overrides {
            s = apply_overrides(&s, o)?;
        }
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        if self.fast {
            s = ionlock::harness::experiment::fast_scenario(&s);
        }
        Ok(s)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the detection chain and write the binned photocounts.
    Simulate(Common),
    /// Count-rate spectrum around the resonance.
    Psd(Common),
    /// Homodyne quadratures at LO offsets from the resonance (Hz).
    Lockin {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,6000", allow_hyphen_values = true)]
        offsets: Vec<f64>,
    },
    /// Displacement calibration from the drive tone and a contrast sweep.
    Calibrate(Common),
    /// Closed-loop run with lock metrics against a free-running record.
    Pll(Common),
    /// Autocorrelation spectroscopy of a locked record.
    G2(Common),
    /// Runs a named figure experiment.
    Reproduce {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(EXPERIMENTS))]
        figure: String,
        #[command(flatten)]
        common: Common,
    },
    /// Prints a stored report (`report.json` or its directory).
    Report {
        path: PathBuf,
        #[arg(long, default_value = "text", value_parser = ["text", "structured"])]
        format: String,
    },
}

fn with_analyses(analyses: Vec<Analysis>, loop_cfg: Option<LoopConfig>) -> Scenario {
    Scenario {
        analyses,
        loop_cfg,
        ..Default::default()
    }
}

fn run_verb(name: &str, common: &Common, base: Scenario) -> Result<ExperimentReport> {
    let s = common.scenario(base)?;
    let out = common.out.join(name);
    Ok(run_scenario(name, &s, &[], &out, &common.options())?)
}

fn load_report(path: &Path) -> Result<ExperimentReport> {
    let file = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    Ok(parse_report(&text)?)
}

fn run(cli: Cli) -> Result<bool> {
    let report = match cli.command {
        // the count record comes from the simulation stage; the spectrum
        // rides along because a scenario needs at least one analysis
        Command::Simulate(common) => run_verb(
            "simulate",
            &common,
            with_analyses(vec![Analysis::Welch(WelchAnalysis::default())], None),
        )?,
        Command::Psd(common) => run_verb(
            "psd",
            &common,
            with_analyses(vec![Analysis::Welch(WelchAnalysis::default())], None),
        )?,
        Command::Lockin { common, offsets } => run_verb(
            "lockin",
            &common,
            with_analyses(
                vec![Analysis::Lockin(LockinAnalysis {
                    offsets,
                    ..Default::default()
                })],
                None,
            ),
        )?,
        Command::Calibrate(common) => {
            let mut base = preset("fig2a")?.scenario;
            base.analyses.retain(|a| matches!(a, Analysis::Welch(_) | Analysis::Calibrate(_)));
            run_verb("calibrate", &common, base)?
        }
        Command::Pll(common) => run_verb(
            "pll",
            &common,
            with_analyses(
                vec![Analysis::Lock(LockAnalysis::default())],
                Some(LoopConfig::default()),
            ),
        )?,
        Command::G2(common) => run_verb(
            "g2",
            &common,
            with_analyses(
                vec![Analysis::G2(G2Analysis::default())],
                Some(LoopConfig::default()),
            ),
        )?,
        Command::Reproduce { figure, common } => {
            let mut fragments = Vec::new();
            if let Some(p) = &common.scenario {
                fragments.push(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?);
            }
            fragments.extend(common.overrides.iter().cloned());
            let mut merged = toml::Value::Table(Default::default());
            for f in &fragments {
                merge_toml(&mut merged, toml::from_str(f).context("parsing override")?);
            }
            let text = if fragments.is_empty() { None } else { Some(toml::to_string(&merged)?) };
            run_experiment(&figure, text.as_deref(), &common.out.join(&figure), &common.options())?
        }
        Command::Report { path, format } => {
            let report = load_report(&path)?;
            let fmt = if format == "structured" { ReportFormat::Structured } else { ReportFormat::Text };
            print!("{}", export_report(&report, fmt));
            return Ok(report.all_passed());
        }
    };
    print!("{}", export_report(&report, ReportFormat::Text));
    if report.outputs.is_empty() {
        bail!("no outputs written");
    }
    Ok(report.all_passed())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
