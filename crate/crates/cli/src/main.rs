mod config;
mod run;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use config::ExperimentConfig;
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

/// Experiment runner for the urlab numerical laboratory.
#[derive(Parser)]
#[command(name = "urlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Run directory (overrides `output` from the config).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Overrides of the form section.key=value, applied after the file.
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured set and write it in columnar form.
    Gen(Common),
    /// Ahlfors-regularity ratios on sampled balls.
    Ahlfors(Common),
    /// α-numbers on sampled balls.
    Alpha(Common),
    /// Whitney decomposition with invariant checks.
    Whitney(Common),
    /// Normalized α square sums over Whitney cubes.
    UrSum(Common),
    /// D_β, H_β, ∇D_β, s_X and the (b, 𝒱) split at probe points.
    DistFields(Common),
    /// Pass/fail table of the distance identities.
    VerifyIdentities(Common),
    /// Carleson norm estimates.
    Carleson(Common),
    /// Solve the Dirichlet problem with the configured data.
    Solve(Common),
    /// Harmonic measure of a half-space cut of the set.
    Hm(Common),
    /// A∞ scatter of ω-ratios against σ-ratios.
    Ainfty(Common),
    /// Square function against the non-tangential maximal function.
    Sn(Common),
}

impl Command {
    fn split(&self) -> (&'static str, &Common) {
        match self {
            Command::Gen(c) => ("gen", c),
            Command::Ahlfors(c) => ("ahlfors", c),
            Command::Alpha(c) => ("alpha", c),
            Command::Whitney(c) => ("whitney", c),
            Command::UrSum(c) => ("ur-sum", c),
            Command::DistFields(c) => ("dist-fields", c),
            Command::VerifyIdentities(c) => ("verify-identities", c),
            Command::Carleson(c) => ("carleson", c),
            Command::Solve(c) => ("solve", c),
            Command::Hm(c) => ("hm", c),
            Command::Ainfty(c) => ("ainfty", c),
            Command::Sn(c) => ("sn", c),
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    match e.downcast_ref::<urlab::Error>() {
        Some(err) => err.kind(),
        None if e.downcast_ref::<std::io::Error>().is_some() => "io",
        None => "config",
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn run(name: &str, cfg: &ExperimentConfig) -> Result<()> {
    let dir = &cfg.output;
    std::fs::create_dir_all(dir)?;
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let clock = Instant::now();
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let outcome = run::execute(name, cfg, dir)?;
    write_json(&dir.join("summary.json"), &outcome.summary)?;
    let mut files = outcome.files;
    files.push("summary.json".into());
    files.push("config.toml".into());
    let manifest = json!({
        "subcommand": name,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "started_unix": started,
        "wall_time_s": clock.elapsed().as_secs_f64(),
        "outputs": files,
        "config": cfg,
    });
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = cli.command.split();
    let loaded = ExperimentConfig::load(common.config.as_deref(), &common.overrides).map(|mut c| {
        if let Some(o) = &common.out {
            c.output = o.clone();
        }
        c
    });
    let (result, dir) = match loaded {
        Ok(cfg) => (run(name, &cfg), Some(cfg.output)),
        Err(e) => (Err(e), common.out.clone()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = json!({
                "subcommand": name,
                "kind": error_kind(&e),
                "message": format!("{e:#}"),
            });
            eprintln!("{record}");
            if let Some(d) = dir {
                if std::fs::create_dir_all(&d).is_ok() {
                    let _ = write_json(&d.join("error.json"), &record);
                }
            }
            ExitCode::FAILURE
        }
    }
}
