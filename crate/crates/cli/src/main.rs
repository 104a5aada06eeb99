use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use steamnet::scenario::{
    affine_fit, emit_outputs, run_identification, run_scenario, static_map, summary,
};
use steamnet::ScenarioConfig;

#[derive(Parser)]
#[command(
    name = "steamnet",
    version,
    about = "Hierarchical control of a steam generator ensemble"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Scenario configuration (JSON)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in five-boiler scenario
    #[arg(long)]
    default_scenario: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Identify the closed-loop models of every boiler
    Identify {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the full closed-loop scenario
    Run {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Check a configuration file without running it
    ValidateConfig { path: PathBuf },
}

fn load(source: &Source) -> Result<ScenarioConfig> {
    match &source.config {
        Some(p) => ScenarioConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ScenarioConfig::default()),
    }
}

fn identify(cfg: &ScenarioConfig, out: &Path) -> Result<()> {
    let models = run_identification(cfg)?;
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for (i, (m, p)) in models.iter().zip(&cfg.boilers).enumerate() {
        let (slope, icpt, r2) = affine_fit(&static_map(p, 15)?);
        println!(
            "boiler {}: fit {:.2}%  gain {:.5}  gamma {:.5}  static map r2 {:.6}",
            i + 1,
            m.fit,
            m.arx.dc_gain(),
            m.arx.gamma,
            r2
        );
        rows.push(serde_json::json!({
            "boiler": i + 1,
            "arx": m.arx,
            "fit_percent": m.fit,
            "static_gain": m.arx.dc_gain(),
            "static_map": { "slope": slope, "intercept": icpt, "r2": r2 },
        }));
    }
    let path = out.join("models.json");
    std::fs::write(&path, serde_json::to_string_pretty(&rows)? + "\n")?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cfg: &ScenarioConfig, out: &Path) -> Result<u8> {
    let report = run_scenario(cfg)?;
    let bounds: Vec<(f64, f64)> = cfg.boilers.iter().map(|p| (p.q_g_min, p.q_g_max)).collect();
    emit_outputs(&report, &bounds, out)?;
    let s = summary(&report);
    println!("{}", serde_json::to_string_pretty(&s)?);
    for v in report.violations.iter().take(20) {
        eprintln!(
            "violation t = {} s: {} = {} outside [{}, {}]",
            v.t, v.constraint, v.value, v.lo, v.hi
        );
    }
    Ok(if s.violations == 0 { 0 } else { 2 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Identify { source, out } => load(&source).and_then(|c| identify(&c, &out)).map(|_| 0),
        Cmd::Run { source, out } => load(&source).and_then(|c| run(&c, &out)),
        Cmd::ValidateConfig { path } => ScenarioConfig::load(&path)
            .map(|_| {
                println!("{}: ok", path.display());
                0
            })
            .map_err(Into::into),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
