use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use twostage_core::io::{read_clusters, read_json, read_units, write_clusters, write_json, write_text, write_units};
use twostage_core::randomize::{assign_panel, DesignConfig, DesignManifest};
use twostage_core::regress::WeightScheme;
use twostage_core::report::{analyze, prepare_panel, AnalysisOptions, Method};
use twostage_core::simulate::{run_mc_grid, SimConfig};
use twostage_core::variance::TauSpec;
use twostage_core::{Error, ExperimentPanel, Result};

/// Assignment, analysis and simulation for two-stage randomized experiments.
#[derive(Debug, Parser)]
#[command(name = "twostage", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Randomize clusters and units under a design config.
    Assign(AssignArgs),
    /// Estimate effects and variances from an assigned panel with outcomes.
    Analyze(AnalyzeArgs),
    /// Run a Monte Carlo grid from a simulation config.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct AssignArgs {
    #[arg(long)]
    clusters: PathBuf,
    #[arg(long)]
    units: Option<PathBuf>,
    /// Design config (JSON).
    #[arg(long)]
    design: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    clusters: PathBuf,
    #[arg(long)]
    units: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Repeatable: adjusted, ols_robust, ols_cluster, ols_fe_robust,
    /// ols_fe_cluster, covariate_adjusted.
    #[arg(long = "method", default_values_t = vec!["adjusted".to_string()])]
    methods: Vec<String>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    theta0: f64,
    /// `sbr`, `bernoulli`, a number, or a JSON file mapping stratum to tau.
    #[arg(long, default_value = "sbr")]
    tau: String,
    /// Use G1 / G as pi1.
    #[arg(long)]
    empirical_pi1: bool,
    /// Treated fraction within treated clusters, when neither a manifest
    /// nor an `h` column supplies it.
    #[arg(long)]
    pi2: Option<f64>,
    #[arg(long)]
    allow_missing_spillover: bool,
    /// Weights for fixed-effects fits: unweighted, inv_m or n_over_m.
    #[arg(long, default_value = "unweighted")]
    fe_weights: String,
    /// Cluster covariate columns (1-based `c_<i>`) used for covariate adjustment.
    #[arg(long = "psi", value_delimiter = ',')]
    psi: Vec<usize>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Simulation config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::config(format!("input file {} does not exist", path.display())))
    }
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn parse_tau(s: &str) -> Result<TauSpec> {
    match s {
        "sbr" => Ok(TauSpec::Sbr),
        "bernoulli" => Ok(TauSpec::Bernoulli),
        _ => {
            if let Ok(t) = s.parse::<f64>() {
                return Ok(TauSpec::Uniform(t));
            }
            let path = Path::new(s);
            if path.is_file() {
                let map: BTreeMap<String, f64> = read_json(path)?;
                return Ok(TauSpec::PerStratum(map));
            }
            Err(Error::config(format!("cannot read tau spec {s:?}")))
        }
    }
}

fn parse_weights(s: &str) -> Result<WeightScheme> {
    match s {
        "unweighted" => Ok(WeightScheme::Unweighted),
        "inv_m" => Ok(WeightScheme::InvM),
        "n_over_m" => Ok(WeightScheme::NOverM),
        _ => Err(Error::config(format!("unknown weight scheme {s:?}"))),
    }
}

fn cmd_assign(a: &AssignArgs) -> Result<()> {
    require_file(&a.clusters)?;
    require_file(&a.design)?;
    if let Some(u) = &a.units {
        require_file(u)?;
    }
    let config: DesignConfig = read_json(&a.design)?;
    let mut table = read_clusters(&a.clusters)?;
    if let Some(u) = &a.units {
        read_units(u, &mut table.clusters)?;
    }
    let assigned = assign_panel(table.clusters, &config, a.seed)?;
    create_out(&a.out)?;
    write_clusters(&a.out.join("clusters.csv"), &assigned.panel.clusters, assigned.manifest.pi2)?;
    if a.units.is_some() {
        write_units(&a.out.join("units.csv"), &assigned.panel.clusters)?;
    }
    write_json(&a.out.join("design_manifest.json"), &assigned.manifest)?;
    eprintln!(
        "assigned {} clusters ({} treated), mode {}",
        assigned.panel.g(),
        assigned.panel.treated_clusters(),
        assigned.manifest.mode
    );
    Ok(())
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    require_file(&a.clusters)?;
    require_file(&a.units)?;
    if let Some(m) = &a.manifest {
        require_file(m)?;
    }
    let methods = a.methods.iter().map(|m| m.parse::<Method>()).collect::<Result<Vec<_>>>()?;
    let opts = AnalysisOptions {
        methods,
        alpha: a.alpha,
        theta0: a.theta0,
        tau: parse_tau(&a.tau)?,
        empirical_pi1: a.empirical_pi1,
        allow_missing_spillover: a.allow_missing_spillover,
        fe_weights: parse_weights(&a.fe_weights)?,
        psi_columns: a.psi.clone(),
    };
    let manifest: Option<DesignManifest> = a.manifest.as_deref().map(read_json).transpose()?;
    let mut table = read_clusters(&a.clusters)?;
    read_units(&a.units, &mut table.clusters)?;
    let pi2 = manifest
        .as_ref()
        .map(|m| m.pi2)
        .or(table.pi2)
        .or(a.pi2)
        .ok_or_else(|| Error::config("pi2 unknown: supply a manifest, an `h` column or --pi2"))?;
    let panel = ExperimentPanel::new(table.clusters, 0.0, pi2);
    let (panel, source) = prepare_panel(panel, manifest.as_ref(), a.empirical_pi1)?;
    let report = analyze(&panel, &source, &opts)?;
    create_out(&a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    let text = report.to_text();
    write_text(&a.out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    require_file(&a.config)?;
    let mut cfg: SimConfig = read_json(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let table = run_mc_grid(&cfg)?;
    create_out(&a.out)?;
    write_text(&a.out.join("table.csv"), &table.to_csv()?)?;
    write_json(&a.out.join("table.json"), &table)?;
    let text = table.to_text();
    write_text(&a.out.join("table.txt"), &text)?;
    for c in &table.cells {
        println!(
            "{}/{} {} {}: {:.4} (mc se {:.4})",
            c.first,
            c.second,
            c.estimand,
            c.method.name(),
            c.value,
            c.mc_se
        );
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("TWOSTAGE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("TWOSTAGE_THREADS = {v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("cannot size the worker pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match &cli.command {
        Command::Assign(a) => cmd_assign(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Simulate(a) => cmd_simulate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
