use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ensda::cycle::{
    archived_cycles, build_model, load_archive, run_cycle_experiment, run_forecast_experiment,
    synthesize_observations, walk_nature, write_lead_times, ExperimentConfig,
};
use ensda::metrics::{acc, rmse};
use ensda::models::state_io::load_state;
use ensda::models::{write_state, Dtype, StateLayout};
use ensda::obs::{read_obs_file, write_obs_file, WINDOW_HALF_WIDTH_S};
use ensda::thinning::{thin, write_density_report, ThinningConfig};
use ensda::{GridSpace, GridSpec, ObsBatch, RingSpace, StateSpace};

#[derive(Parser)]
#[command(name = "ensda", version, about = "Ensemble data assimilation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a cycling experiment described by a config file.
    Cycle { config: PathBuf },
    /// Free forecasts from archived analyses, scored by lead time.
    Forecast {
        config: PathBuf,
        /// Maximum lead in cycles.
        #[arg(long, default_value_t = 20)]
        max_lead: usize,
        /// Initial cycles as `first:last:step`; all archived cycles by default.
        #[arg(long)]
        cycles: Option<String>,
        /// Output CSV; defaults to `lead_time.csv` in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Thin an observation file.
    Thin {
        input: PathBuf,
        output: PathBuf,
        /// Experiment config supplying the grid and `thinning.*` settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write per-grid-point densities here.
        #[arg(long)]
        density: Option<PathBuf>,
    },
    /// Score a state file against a reference state file.
    Metrics {
        /// Stem of the evaluated state (extension optional).
        state: PathBuf,
        /// Stem of the reference state.
        truth: PathBuf,
        /// Climatology stem; adds an anomaly correlation column.
        #[arg(long)]
        clim: Option<PathBuf>,
        /// Output CSV; stdout by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic observations of a config's network to a file.
    SynthObs { config: PathBuf, output: PathBuf },
    /// Write nature-run states, one per cycle.
    Nature {
        config: PathBuf,
        out_dir: PathBuf,
        /// Keep every n-th cycle.
        #[arg(long, default_value_t = 1)]
        every: usize,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Cycle { config } => cycle(&config),
        Command::Forecast {
            config,
            max_lead,
            cycles,
            out,
        } => forecast(&config, max_lead, cycles.as_deref(), out),
        Command::Thin {
            input,
            output,
            config,
            density,
        } => thin_file(&input, &output, config.as_deref(), density.as_deref()),
        Command::Metrics { state, truth, clim, out } => metrics(&state, &truth, clim.as_deref(), out.as_deref()),
        Command::SynthObs { config, output } => synth(&config, &output),
        Command::Nature { config, out_dir, every } => nature(&config, &out_dir, every),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path).with_context(|| format!("config {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn cycle(path: &Path) -> Result<()> {
    let cfg = load_config(path)?;
    let out = run_cycle_experiment(&cfg)?;
    if let Some(c) = out.resumed_from {
        eprintln!("resumed after cycle {c}");
    }
    let spinup = cfg.spinup();
    let scored: Vec<_> = out.reports.iter().filter(|r| r.cycle > spinup && !r.fields.is_empty()).collect();
    if scored.is_empty() {
        println!("{} cycles run", out.reports.len());
    } else {
        let n = scored.len() as f64;
        println!(
            "{} cycles run; after spin-up mean analysis RMSE {:.4}, spread {:.4}",
            out.reports.len(),
            scored.iter().map(|r| r.mean_rmse_an()).sum::<f64>() / n,
            scored.iter().map(|r| r.mean_spread_an()).sum::<f64>() / n
        );
    }
    Ok(())
}

fn parse_range(s: &str) -> Result<Vec<usize>> {
    let parts: Vec<usize> = s
        .split(':')
        .map(|p| p.trim().parse().with_context(|| format!("bad cycle range `{s}`")))
        .collect::<Result<_>>()?;
    let (first, last, step) = match parts[..] {
        [a] => (a, a, 1),
        [a, b] => (a, b, 1),
        [a, b, c] if c > 0 => (a, b, c),
        _ => bail!("cycle range must be `first[:last[:step]]` with a positive step"),
    };
    Ok((first..=last).step_by(step).collect())
}

fn forecast(path: &Path, max_lead: usize, cycles: Option<&str>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(path)?;
    let dir = cfg.output.dir.clone().context("forecast needs output.dir pointing at an archive")?;
    let model = build_model(&cfg)?;
    let cycles = match cycles {
        Some(r) => parse_range(r)?,
        None => archived_cycles(&dir)?,
    };
    let starts = load_archive(&dir, model.as_ref(), &cycles)?;
    let rows = run_forecast_experiment(model.as_ref(), &starts, max_lead)?;
    let out = out.unwrap_or_else(|| dir.join("lead_time.csv"));
    write_lead_times(&out, &rows)?;
    println!("{} initial times, leads 0..={max_lead}, written to {}", starts.len(), out.display());
    Ok(())
}

fn thin_file(input: &Path, output: &Path, config: Option<&Path>, density: Option<&Path>) -> Result<()> {
    let (grid, tc) = match config {
        Some(p) => {
            let cfg = load_config(p)?;
            let model = build_model(&cfg)?;
            let grid = match model.layout() {
                StateLayout::Grid { grid, .. } => grid,
                StateLayout::Ring(_) => bail!("thinning needs a gridded model"),
            };
            (grid, cfg.thinning.unwrap_or_default())
        }
        None => (GridSpec::default(), ThinningConfig::default()),
    };
    let observations = read_obs_file(input)?.collect::<Result<Vec<_>, _>>()?;
    let center = observations.first().map(|o| o.time).unwrap_or_default();
    let batch = ObsBatch {
        observations,
        window_center: center,
        window_half_width: WINDOW_HALF_WIDTH_S,
    };
    let outcome = thin(&batch, &grid, &tc)?;
    write_obs_file(&outcome.selected.observations, output)?;
    if let Some(d) = density {
        write_density_report(BufWriter::new(File::create(d)?), &outcome, &grid)?;
    }
    println!("kept {} of {} observations", outcome.selected.observations.len(), batch.observations.len());
    Ok(())
}

fn space_for(layout: &StateLayout) -> Box<dyn StateSpace> {
    match layout {
        StateLayout::Ring(n) => Box::new(RingSpace::new(*n, 1.0)),
        StateLayout::Grid { grid, variables } => Box::new(GridSpace::new(grid.clone(), variables.clone())),
    }
}

fn metrics(state: &Path, truth: &Path, clim: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let a = load_state(state).with_context(|| format!("state {}", state.display()))?;
    let t = load_state(truth).with_context(|| format!("state {}", truth.display()))?;
    if a.layout != t.layout {
        bail!("states have different layouts");
    }
    let c = clim.map(load_state).transpose()?;
    if c.as_ref().is_some_and(|c| c.layout != a.layout) {
        bail!("climatology layout differs from the states");
    }
    let space = space_for(&a.layout);
    let grid = space.metric_grid();
    let mut w: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(w, "variable,level_hpa,rmse{}", if c.is_some() { ",acc" } else { "" })?;
    for f in space.fields() {
        let level = f.level_hpa.map(|p| p.to_string()).unwrap_or_default();
        let r = rmse(f.of(&a.values), f.of(&t.values), grid)?;
        match &c {
            Some(c) => {
                let score = acc(f.of(&a.values), f.of(&t.values), f.of(&c.values), grid)?;
                writeln!(w, "{},{level},{r},{score}", f.variable)?;
            }
            None => writeln!(w, "{},{level},{r}", f.variable)?,
        }
    }
    w.flush()?;
    Ok(())
}

fn synth(path: &Path, output: &Path) -> Result<()> {
    let cfg = load_config(path)?;
    let model = build_model(&cfg)?;
    let obs = synthesize_observations(&cfg, model.as_ref())?;
    write_obs_file(&obs, output)?;
    println!("{} observations over {} cycles", obs.len(), cfg.n_cycles);
    Ok(())
}

fn nature(path: &Path, out_dir: &Path, every: usize) -> Result<()> {
    if every == 0 {
        bail!("--every must be positive");
    }
    let cfg = load_config(path)?;
    let model = build_model(&cfg)?;
    let layout = model.layout();
    fs::create_dir_all(out_dir)?;
    let mut written = 0;
    walk_nature(&cfg, model.as_ref(), |cycle, time, x| {
        if cycle % every == 0 {
            write_state(&out_dir.join(format!("truth_c{cycle:05}")), &layout, x, time, Dtype::Float64)?;
            written += 1;
        }
        Ok(())
    })?;
    println!("{written} states written to {}", out_dir.display());
    Ok(())
}
