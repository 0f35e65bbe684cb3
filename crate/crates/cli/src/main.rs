use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dtcsim::analysis::cos_n_envelope;
use dtcsim::harness::{
    analyze_files, load_config, load_config_file, run_experiment, write_atomic, ExperimentConfig, Override, Preset,
};

#[derive(Parser)]
#[command(name = "dtcsim", version, about = "Driven dipolar spin-cluster simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single (τ, θ) record.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Delay τ in microseconds (with --theta-pi, replaces the configured points).
        #[arg(long, requires = "theta_pi")]
        tau_us: Option<f64>,
        /// Pulse angle in units of π.
        #[arg(long, requires = "tau_us")]
        theta_pi: Option<f64>,
    },
    /// θ × τ sweep with crystalline fractions and Gaussian fits.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// DTC echo runs.
    Echo {
        #[command(flatten)]
        common: Common,
    },
    /// π-pulse phase-pair decay runs.
    Phasepair {
        #[command(flatten)]
        common: Common,
    },
    /// Recompute spectra, fractions and decay times of stored records.
    Analyze {
        /// Config whose [analysis] section sets the window.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        records: Vec<PathBuf>,
    },
    /// Write the |cos ε|^N envelope.
    Envelope {
        /// ε in units of π.
        #[arg(long, allow_hyphen_values = true)]
        epsilon_pi: f64,
        #[arg(long, default_value_t = 128)]
        n_max: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Delta,
    Finite,
}

#[derive(Clone, Copy, ValueEnum)]
enum H1 {
    Off,
    On,
    Cw,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// fig1, fig2, fig3, fig4 or custom.
    #[arg(long, default_value = "custom")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    h1: Option<H1>,
    /// Run points whose runtime estimate exceeds the budget.
    #[arg(long)]
    allow_over_budget: bool,
    /// Extra `section.key=value` override (value in TOML syntax).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn parse_set(s: &str) -> Result<Override> {
    let (key, value) = s.split_once('=').with_context(|| format!("`{s}` is not KEY=VALUE"))?;
    let doc: toml::Table = format!("v = {value}").parse().or_else(|_| format!("v = {:?}", value).parse())?;
    Ok(Override::new(key.trim(), doc["v"].clone()))
}

impl Common {
    fn load(&self, kind: &str, extra: Vec<Override>) -> Result<(ExperimentConfig, Preset)> {
        let preset = Preset::parse(&self.preset)?;
        let mut o = vec![Override::new("kind", kind)];
        if let Some(s) = self.seed {
            o.push(Override::new("seed", s as i64));
        }
        if let Some(w) = self.workers {
            o.push(Override::new("workers", w as i64));
        }
        if let Some(p) = &self.out {
            o.push(Override::new("output_dir", p.to_string_lossy().into_owned()));
        }
        if let Some(m) = self.mode {
            o.push(Override::new("drive.mode", if matches!(m, Mode::Delta) { "delta" } else { "finite" }));
        }
        if let Some(h) = self.h1 {
            let v = match h {
                H1::Off => "off",
                H1::On => "on",
                H1::Cw => "cw",
            };
            o.push(Override::new("cluster.h1", v));
        }
        if self.allow_over_budget {
            o.push(Override::new("allow_over_budget", true));
        }
        for s in &self.set {
            o.push(parse_set(s)?);
        }
        o.extend(extra);
        let cfg = match &self.config {
            Some(path) => load_config_file(preset, path, &o)?,
            None => load_config(preset, None, &o)?,
        };
        Ok((cfg, preset))
    }
}

fn run(common: &Common, kind: &str, extra: Vec<Override>, single: bool) -> Result<ExitCode> {
    let (cfg, preset) = common.load(kind, extra)?;
    if single && cfg.points().len() != 1 {
        bail!(
            "simulate runs one point but the configuration has {}; use --tau-us/--theta-pi or `sweep`",
            cfg.points().len()
        );
    }
    let report = run_experiment(&cfg, preset)?;
    println!("wrote {} files to {}", report.files.len(), report.output_dir.display());
    for f in &report.failures {
        eprintln!("point {} failed: {}", f.point, f.error);
    }
    Ok(if report.ok() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate {
            common,
            tau_us,
            theta_pi,
        } => {
            let mut extra = Vec::new();
            if let (Some(t), Some(th)) = (tau_us, theta_pi) {
                let mut point = toml::Table::new();
                point.insert("tau_us".into(), t.into());
                point.insert("theta_pi".into(), th.into());
                extra.push(Override::new("drive.points", toml::Value::Array(vec![point.into()])));
            }
            run(&common, "dtc", extra, true)
        }
        Command::Sweep { common } => run(&common, "dtc", Vec::new(), false),
        Command::Echo { common } => run(&common, "echo", Vec::new(), false),
        Command::Phasepair { common } => run(&common, "phasepair", Vec::new(), false),
        Command::Analyze { config, out, records } => {
            let analysis = match config {
                Some(p) => load_config_file(Preset::Custom, &p, &[Override::new("drive.tau_us", vec![1.0])])?.analysis,
                None => Default::default(),
            };
            let doc = analyze_files(&records, &analysis, &out)?;
            println!("{}", serde_json::to_string_pretty(&doc)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Envelope { epsilon_pi, n_max, out } => {
            if n_max == 0 {
                bail!("--n-max must be at least 1");
            }
            let env = cos_n_envelope(epsilon_pi * std::f64::consts::PI, n_max);
            write_atomic(&out, env.to_csv().as_bytes())?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
