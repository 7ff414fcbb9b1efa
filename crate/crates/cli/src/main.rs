//! `vlp`: simulate indoor visible-light channels and locate receivers from
//! received signal strength.
//!
//! Exit status: 0 on success, 1 for usage or scenario parse errors, 2 when a
//! simulation or estimation fails at run time.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use vlp_core::channel::{simulate_impulse_response, simulate_power_report};
use vlp_core::experiment::{
    apply_noise, evaluate_grid, region_stats, run_scenario_suite, GridSpec, NoiseMode,
    RegionPartition, SuiteConfig, SuiteLayout, SuiteRow,
};
use vlp_core::io::{self as vio, load_scenario, PowerCache, ScenarioBundle};
use vlp_core::{locate, LocateOptions, Method, SeededRng, Selection};

#[derive(Debug, Parser)]
#[command(
    name = "vlp",
    version,
    about = "Indoor visible-light channel simulation and RSS positioning"
)]
struct Cli {
    /// Scenario file, or a bundled scenario name (grid16, grid25).
    #[arg(long, short, global = true, value_name = "PATH|NAME")]
    scenario: Option<String>,

    #[command(flatten)]
    channel: ChannelArgs,

    /// Power cache directory; overrides VLP_CACHE_DIR.
    #[arg(long, global = true, value_name = "DIR")]
    cache_dir: Option<PathBuf>,

    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Overrides for scenario-file values.
#[derive(Debug, Args)]
struct ChannelArgs {
    /// Highest reflection order (0 = line of sight only).
    #[arg(long, global = true)]
    max_order: Option<usize>,
    /// Monte Carlo rays per surface patch.
    #[arg(long, global = true)]
    rays: Option<usize>,
    /// Surface patch area in m^2.
    #[arg(long, global = true)]
    patch_area: Option<f64>,
    #[arg(long, global = true)]
    time_bin_ns: Option<f64>,
    #[arg(long, global = true)]
    max_delay_ns: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Enables additive Gaussian noise on received power.
    #[arg(long, global = true)]
    noise_sigma: Option<f64>,
    #[arg(long, global = true, value_enum)]
    noise_mode: Option<NoiseModeArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NoiseModeArg {
    Absolute,
    Relative,
}

#[derive(Debug, Args)]
struct EstimatorArgs {
    #[arg(long, default_value = "linear")]
    method: Method,
    /// `all` or the number of strongest luminaires to use.
    #[arg(long, default_value = "all")]
    select: Selection,
    /// Return the anchor centroid when linear lateration is singular.
    #[arg(long)]
    linear_fallback: bool,
}

impl EstimatorArgs {
    fn options(&self) -> LocateOptions {
        LocateOptions {
            method: self.method,
            selection: self.select,
            linear_fallback: self.linear_fallback,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Impulse response of one luminaire at one receiver position, as CSV.
    Ir {
        #[arg(long)]
        luminaire: u32,
        /// Receiver position `x,y` on the receiver plane.
        #[arg(long, value_parser = parse_xy, allow_hyphen_values = true)]
        at: (f64, f64),
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Received power per luminaire and reflection order, as CSV.
    Powers {
        #[arg(long, value_parser = parse_xy, allow_hyphen_values = true)]
        at: (f64, f64),
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Estimates one receiver position and prints it as JSON.
    Locate {
        #[arg(long, value_parser = parse_xy, allow_hyphen_values = true)]
        at: (f64, f64),
        #[command(flatten)]
        estimator: EstimatorArgs,
    },
    /// Positioning error over a receiver grid: CSV map and JSON statistics.
    Sweep {
        #[arg(long, default_value_t = 0.25)]
        step: f64,
        /// Distance kept from the walls.
        #[arg(long, default_value_t = 0.0)]
        margin: f64,
        #[command(flatten)]
        estimator: EstimatorArgs,
        /// Error map CSV.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Statistics JSON; printed to stdout when omitted.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// RMS summary over layouts and estimator configurations.
    Suite {
        /// Seeds to average over (comma separated).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 0.25)]
        step: f64,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn parse_xy(s: &str) -> Result<(f64, f64), String> {
    let (x, y) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `x,y`, got `{s}`"))?;
    let num = |v: &str| {
        v.trim()
            .parse::<f64>()
            .map_err(|_| format!("`{v}` is not a number"))
    };
    Ok((num(x)?, num(y)?))
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome<T> = Result<T, Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

/// Scenario file values with command-line overrides applied.
fn resolve(cli: &Cli) -> Outcome<ScenarioBundle> {
    let mut b = match &cli.scenario {
        Some(spec) => load_scenario(spec).map_err(usage)?,
        None => ScenarioBundle::default(),
    };
    let c = &cli.channel;
    if let Some(k) = c.max_order {
        b.channel.max_order = k;
    }
    if let Some(n) = c.rays {
        b.channel.rays_per_patch = n;
    }
    if let Some(a) = c.patch_area {
        b.channel.patch_area = a;
    }
    if let Some(t) = c.time_bin_ns {
        b.channel.time_bin = t * 1e-9;
    }
    if let Some(t) = c.max_delay_ns {
        b.channel.max_delay = t * 1e-9;
    }
    if let Some(s) = c.seed {
        b.seed = s;
    }
    if let Some(sigma) = c.noise_sigma {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(usage(anyhow!(
                "--noise-sigma must be non-negative, got {sigma}"
            )));
        }
        b.noise.enabled = sigma > 0.0;
        b.noise.sigma = sigma;
    }
    if let Some(mode) = c.noise_mode {
        b.noise.mode = match mode {
            NoiseModeArg::Absolute => NoiseMode::Absolute,
            NoiseModeArg::Relative => NoiseMode::Relative,
        };
    }
    b.channel
        .validate(&b.scenario.room_box())
        .map_err(|e| usage(anyhow!("invalid channel settings: {e}")))?;
    Ok(b)
}

fn check_inside(b: &ScenarioBundle, (x, y): (f64, f64)) -> Outcome<()> {
    let s = &b.scenario;
    if !(0.0..=s.length).contains(&x) || !(0.0..=s.width).contains(&y) {
        return Err(usage(anyhow!(
            "position ({x}, {y}) lies outside the {} m x {} m footprint",
            s.length,
            s.width
        )));
    }
    Ok(())
}

fn open_cache(cli: &Cli) -> Outcome<PowerCache> {
    match &cli.cache_dir {
        Some(dir) => PowerCache::at(dir),
        None => PowerCache::from_env(None),
    }
    .map_err(runtime)
}

fn report_cache(cache: &PowerCache) {
    if let Some(dir) = cache.dir() {
        eprintln!(
            "cache {}: {} channel computations",
            dir.display(),
            cache.computations()
        );
    }
}

fn write_out(out: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> csv::Result<()>) -> Outcome<()> {
    match out {
        Some(path) => {
            let mut file = std::fs::File::create(path)
                .with_context(|| format!("{}", path.display()))
                .map_err(runtime)?;
            f(&mut file)
                .with_context(|| format!("{}", path.display()))
                .map_err(runtime)
        }
        None => f(&mut io::stdout().lock()).map_err(runtime),
    }
}

fn print_json(value: &serde_json::Value) -> Outcome<()> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    println!("{text}");
    Ok(())
}

fn print_suite(rows: &[SuiteRow]) {
    println!(
        "{:<8} {:<11} {:<9} {:>4} {:>8} {:>8} {:>8} {:>8}",
        "layout", "reflections", "estimator", "k", "outer", "inner", "entire", "failures"
    );
    for r in rows {
        println!(
            "{:<8} {:<11} {:<9} {:>4} {:>8} {:>8} {:>8} {:>8}",
            r.layout,
            if r.reflections {
                "included"
            } else {
                "neglected"
            },
            r.estimator.as_str(),
            r.k,
            SuiteRow::display(r.outer_rms, r.outer_failures),
            SuiteRow::display(r.inner_rms, r.inner_failures),
            SuiteRow::display(r.entire_rms, r.failures),
            r.failures
        );
    }
}

fn run(cli: &Cli) -> Outcome<()> {
    let b = resolve(cli)?;
    match &cli.command {
        Command::Ir { luminaire, at, out } => {
            check_inside(&b, *at)?;
            if b.scenario.luminaire(*luminaire).is_none() {
                return Err(usage(anyhow!(
                    "scenario has no luminaire with id {luminaire}"
                )));
            }
            let ir = simulate_impulse_response(&b.scenario, *luminaire, *at, &b.channel, b.seed)
                .map_err(runtime)?;
            write_out(out.as_deref(), |w| vio::write_impulse_response_to(&ir, w))
        }
        Command::Powers { at, out } => {
            check_inside(&b, *at)?;
            let report =
                simulate_power_report(&b.scenario, *at, &b.channel, b.seed).map_err(runtime)?;
            write_out(out.as_deref(), |w| vio::write_power_report_to(&report, w))
        }
        Command::Locate { at, estimator } => {
            check_inside(&b, *at)?;
            let mut report =
                simulate_power_report(&b.scenario, *at, &b.channel, b.seed).map_err(runtime)?;
            if b.noise.enabled {
                report = apply_noise(&report, &b.noise, &mut SeededRng::substream(b.seed, 0));
            }
            let est = locate(&report, &b.scenario, &estimator.options())
                .with_context(|| format!("locating the receiver at ({}, {})", at.0, at.1))
                .map_err(runtime)?;
            print_json(&json!({
                "x": est.x,
                "y": est.y,
                "truth_x": at.0,
                "truth_y": at.1,
                "error_m": (est.x - at.0).hypot(est.y - at.1),
                "method": est.method.as_str(),
                "anchors_used": est.anchors_used,
                "iterations": est.iterations,
                "final_residual": est.final_residual,
                "fallback": est.used_centroid_fallback,
                "clamped_ranges": est.clamped_ranges,
            }))
        }
        Command::Sweep {
            step,
            margin,
            estimator,
            map,
            stats,
        } => {
            let grid = GridSpec {
                step: *step,
                z: b.scenario.receiver_plane_height,
                margin: *margin,
            };
            grid.points(&b.scenario).map_err(usage)?;
            let inner = RegionPartition::luminaire_span(&b.scenario)
                .ok_or_else(|| usage(anyhow!("scenario has no luminaires")))?;
            let cache = open_cache(cli)?;
            let error_map = evaluate_grid(
                &b.scenario,
                &grid,
                &b.channel,
                &estimator.options(),
                &b.noise,
                b.seed,
                Some(&cache),
            )
            .map_err(runtime)?;
            report_cache(&cache);
            if let Some(path) = map {
                vio::write_error_map(&error_map, path).map_err(runtime)?;
            }
            let s = region_stats(&error_map, &inner);
            match stats {
                Some(path) => vio::write_stats(&s, path).map_err(runtime),
                None => print_json(&serde_json::to_value(&s).map_err(runtime)?),
            }
        }
        Command::Suite {
            seeds,
            step,
            csv,
            json,
        } => {
            if !(*step > 0.0) {
                return Err(usage(anyhow!("--step must be positive")));
            }
            let mut config = SuiteConfig::reference();
            if let Some(spec) = &cli.scenario {
                let name = Path::new(spec)
                    .file_stem()
                    .map_or(spec.clone(), |s| s.to_string_lossy().into_owned());
                config.layouts = vec![SuiteLayout::new(name, b.scenario.clone())];
            }
            config.channel = b.channel;
            config.grid_step = *step;
            config.noise = b.noise;
            config.seeds = if seeds.is_empty() {
                vec![b.seed]
            } else {
                seeds.clone()
            };
            let cache = open_cache(cli)?;
            let rows = run_scenario_suite(&config, Some(&cache)).map_err(runtime)?;
            report_cache(&cache);
            print_suite(&rows);
            if let Some(path) = csv {
                vio::write_suite_csv(&rows, path).map_err(runtime)?;
            }
            if let Some(path) = json {
                vio::write_suite_json(&rows, path).map_err(runtime)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_positions() {
        assert_eq!(parse_xy("1.5,-2").unwrap(), (1.5, -2.0));
        assert!(parse_xy("1.5").is_err());
        assert!(parse_xy("a,b").is_err());
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
