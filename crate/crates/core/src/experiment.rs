//! Receiver-grid sweeps, positioning-error statistics and the calibration suite.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    Aperture, ChannelConfig, ChannelError, LuminaireField, OrderPowers, PowerReport, PowerRow,
    SeededRng,
};
use crate::geometry::{partition_surfaces, GeometryError, RoomScenario, SurfacePatch};
use crate::io::{cache_key, PowerCache};
use crate::positioning::{locate, LocateOptions, Method, PositionEstimate, Selection};

/// Salt separating noise substreams from ray-cascade substreams.
const NOISE_STREAM_SALT: u64 = 0x6e6f_6973_6500_0000;

/// Default histogram bin width for [`region_stats`], in metres.
pub const DEFAULT_HISTOGRAM_BIN: f64 = 0.05;

/// Horizontal receiver grid on a plane of constant height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub step: f64,
    /// Receiver plane height.
    pub z: f64,
    /// Distance kept from the walls; 0 puts points on the walls.
    pub margin: f64,
}

impl GridSpec {
    pub fn for_scenario(scenario: &RoomScenario, step: f64) -> Self {
        Self {
            step,
            z: scenario.receiver_plane_height,
            margin: 0.0,
        }
    }

    fn axis(&self, extent: f64) -> Vec<f64> {
        let span = extent - 2.0 * self.margin;
        let n = (span / self.step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| self.margin + i as f64 * self.step).collect()
    }

    /// Grid points in row-major order (x outer, y inner).
    pub fn points(&self, scenario: &RoomScenario) -> Result<Vec<(f64, f64)>, GeometryError> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(GeometryError::InvalidArgument(format!(
                "grid step must be positive, got {}",
                self.step
            )));
        }
        if self.margin < 0.0
            || 2.0 * self.margin > scenario.length.min(scenario.width)
            || !(self.z > 0.0 && self.z < scenario.height)
        {
            return Err(GeometryError::InvalidArgument(
                "grid margin or height puts points outside the room".into(),
            ));
        }
        let xs = self.axis(scenario.length);
        let ys = self.axis(scenario.width);
        Ok(xs
            .iter()
            .flat_map(|&x| ys.iter().map(move |&y| (x, y)))
            .collect())
    }
}

/// Axis-aligned inner region; everything else in the footprint is outer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl RegionPartition {
    /// The rectangle spanned by the outermost luminaires.
    pub fn luminaire_span(scenario: &RoomScenario) -> Option<Self> {
        scenario
            .luminaire_span()
            .map(|(x_min, x_max, y_min, y_max)| Self {
                x_min,
                x_max,
                y_min,
                y_max,
            })
    }

    /// Boundary points count as inner.
    pub fn is_inner(&self, x: f64, y: f64) -> bool {
        const EPS: f64 = 1e-9;
        x >= self.x_min - EPS
            && x <= self.x_max + EPS
            && y >= self.y_min - EPS
            && y <= self.y_max + EPS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// `sigma` is in watts.
    #[default]
    Absolute,
    /// `sigma` is a fraction of each luminaire's received power.
    Relative,
}

/// Additive zero-mean Gaussian perturbation of received power.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseModel {
    pub enabled: bool,
    pub sigma: f64,
    #[serde(default)]
    pub mode: NoiseMode,
}

impl NoiseModel {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn relative(sigma: f64) -> Self {
        Self {
            enabled: true,
            sigma,
            mode: NoiseMode::Relative,
        }
    }

    pub fn absolute(sigma: f64) -> Self {
        Self {
            enabled: true,
            sigma,
            mode: NoiseMode::Absolute,
        }
    }
}

/// Adds noise to each received luminaire's total power, clamping at zero.
///
/// Luminaires with no received power stay undetected rather than turning
/// into pure-noise anchors. Only `total` is perturbed; `per_order` keeps the
/// noiseless decomposition.
pub fn apply_noise(report: &PowerReport, model: &NoiseModel, rng: &mut SeededRng) -> PowerReport {
    let mut out = report.clone();
    if !model.enabled || model.sigma == 0.0 {
        return out;
    }
    for row in &mut out.rows {
        let sigma = match model.mode {
            NoiseMode::Absolute => model.sigma,
            NoiseMode::Relative => model.sigma * row.powers.total,
        };
        if sigma > 0.0 && row.powers.total > 0.0 {
            let n = Normal::new(0.0, sigma).expect("sigma is finite and positive");
            row.powers.total = (row.powers.total + n.sample(rng)).max(0.0);
        }
    }
    out
}

/// Per-luminaire power reports for every grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPowers {
    pub points: Vec<(f64, f64)>,
    pub reports: Vec<PowerReport>,
}

/// Simulates every luminaire at every grid point.
///
/// Each luminaire's virtual emitters are built once and evaluated at all
/// points; with a cache, luminaires whose points are all cached are skipped.
pub fn simulate_grid_powers(
    scenario: &RoomScenario,
    grid: &GridSpec,
    config: &ChannelConfig,
    seed: u64,
    cache: Option<&PowerCache>,
) -> Result<GridPowers, ChannelError> {
    let mut scenario = scenario.clone();
    scenario.receiver_plane_height = grid.z;
    scenario.validate()?;
    config.validate(&scenario.room_box())?;
    let points = grid.points(&scenario)?;
    let aperture = Aperture::photodiode(&scenario.receiver);
    let mut patches: Option<Vec<SurfacePatch>> = None;

    let mut columns: Vec<Vec<OrderPowers>> = Vec::with_capacity(scenario.luminaires.len());
    for lum in &scenario.luminaires {
        let keys: Option<Vec<_>> = cache.filter(|c| c.is_enabled()).map(|_| {
            points
                .iter()
                .map(|&(x, y)| cache_key(&scenario, config, lum.id, (x, y, grid.z), seed))
                .collect()
        });
        let mut column: Vec<Option<OrderPowers>> = match (&keys, cache) {
            (Some(keys), Some(c)) => keys.par_iter().map(|k| c.lookup(k)).collect(),
            _ => vec![None; points.len()],
        };
        if column.iter().any(Option::is_none) {
            let patches = match &patches {
                Some(p) => p,
                None => patches.insert(if config.max_order >= 1 {
                    partition_surfaces(&scenario, config.patch_area)?
                } else {
                    Vec::new()
                }),
            };
            let field =
                LuminaireField::build_with_patches(&scenario, lum.id, patches, config, seed)?;
            column
                .par_iter_mut()
                .enumerate()
                .filter(|(_, slot)| slot.is_none())
                .for_each(|(i, slot)| {
                    let (x, y) = points[i];
                    let powers = field.order_powers(&scenario.receiver_pose(x, y), &aperture);
                    if let (Some(keys), Some(c)) = (&keys, cache) {
                        c.store(&keys[i], &powers);
                        c.record_computation();
                    }
                    *slot = Some(powers);
                });
        }
        columns.push(
            column
                .into_iter()
                .map(|p| p.expect("filled above"))
                .collect(),
        );
    }

    let reports = (0..points.len())
        .map(|i| PowerReport {
            rows: scenario
                .luminaires
                .iter()
                .zip(&columns)
                .map(|(lum, col)| PowerRow {
                    luminaire_id: lum.id,
                    x: lum.position.x,
                    y: lum.position.y,
                    powers: col[i].clone(),
                })
                .collect(),
        })
        .collect();
    Ok(GridPowers { points, reports })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEntry {
    pub x: f64,
    pub y: f64,
    pub estimate: Option<PositionEstimate>,
    /// Horizontal error in metres; `NaN` for failed points.
    pub error: f64,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorMap {
    pub entries: Vec<ErrorEntry>,
}

impl ErrorMap {
    pub fn at(&self, x: f64, y: f64) -> Option<&ErrorEntry> {
        self.entries
            .iter()
            .find(|e| (e.x - x).abs() < 1e-9 && (e.y - y).abs() < 1e-9)
    }

    pub fn failures(&self) -> usize {
        self.entries.iter().filter(|e| e.failed).count()
    }
}

/// Locates the receiver at every grid point from precomputed powers.
pub fn locate_grid(
    scenario: &RoomScenario,
    powers: &GridPowers,
    options: &LocateOptions,
    noise: &NoiseModel,
    seed: u64,
) -> ErrorMap {
    let entries = powers
        .points
        .par_iter()
        .zip(&powers.reports)
        .enumerate()
        .map(|(i, (&(x, y), report))| {
            let noisy;
            let report = if noise.enabled {
                let mut rng = SeededRng::substream(seed ^ NOISE_STREAM_SALT, i as u64);
                noisy = apply_noise(report, noise, &mut rng);
                &noisy
            } else {
                report
            };
            match locate(report, scenario, options) {
                Ok(est) => ErrorEntry {
                    x,
                    y,
                    error: (est.x - x).hypot(est.y - y),
                    estimate: Some(est),
                    failed: false,
                },
                Err(err) => {
                    log::debug!("locating at ({x}, {y}) failed: {err}");
                    ErrorEntry {
                        x,
                        y,
                        estimate: None,
                        error: f64::NAN,
                        failed: true,
                    }
                }
            }
        })
        .collect();
    ErrorMap { entries }
}

/// Simulates the grid and locates the receiver at every point.
pub fn evaluate_grid(
    scenario: &RoomScenario,
    grid: &GridSpec,
    config: &ChannelConfig,
    options: &LocateOptions,
    noise: &NoiseModel,
    seed: u64,
    cache: Option<&PowerCache>,
) -> Result<ErrorMap, ChannelError> {
    let powers = simulate_grid_powers(scenario, grid, config, seed, cache)?;
    let mut scenario = scenario.clone();
    scenario.receiver_plane_height = grid.z;
    Ok(locate_grid(&scenario, &powers, options, noise, seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<usize>,
}

/// Counts of successful-point errors in bins of `bin_width` over `[0, max error]`.
pub fn error_histogram(map: &ErrorMap, bin_width: f64) -> Result<Histogram, GeometryError> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(GeometryError::InvalidArgument(format!(
            "bin width must be positive, got {bin_width}"
        )));
    }
    let errors: Vec<f64> = map
        .entries
        .iter()
        .filter(|e| !e.failed)
        .map(|e| e.error)
        .collect();
    let max = errors.iter().copied().fold(0.0, f64::max);
    let mut counts = vec![
        0;
        if errors.is_empty() {
            0
        } else {
            (max / bin_width) as usize + 1
        }
    ];
    let last = counts.len().saturating_sub(1);
    for e in errors {
        counts[((e / bin_width) as usize).min(last)] += 1;
    }
    Ok(Histogram { bin_width, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub inner_rms: Option<f64>,
    pub outer_rms: Option<f64>,
    pub entire_rms: Option<f64>,
    /// Successful points per region.
    pub inner_count: usize,
    pub outer_count: usize,
    pub failures: usize,
    pub inner_failures: usize,
    pub outer_failures: usize,
    pub histogram: Histogram,
}

fn rms(sum_sq: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| (sum_sq / n as f64).sqrt())
}

/// RMS error per region. Failed points are excluded from every RMS and
/// counted separately; an empty region has no RMS.
pub fn region_stats(map: &ErrorMap, partition: &RegionPartition) -> ErrorStats {
    let (mut si, mut so) = (0.0, 0.0);
    let (mut ni, mut no, mut fi, mut fo) = (0, 0, 0, 0);
    for e in &map.entries {
        let inner = partition.is_inner(e.x, e.y);
        match (e.failed, inner) {
            (true, true) => fi += 1,
            (true, false) => fo += 1,
            (false, true) => {
                si += e.error * e.error;
                ni += 1;
            }
            (false, false) => {
                so += e.error * e.error;
                no += 1;
            }
        }
    }
    ErrorStats {
        inner_rms: rms(si, ni),
        outer_rms: rms(so, no),
        entire_rms: rms(si + so, ni + no),
        inner_count: ni,
        outer_count: no,
        failures: fi + fo,
        inner_failures: fi,
        outer_failures: fo,
        histogram: error_histogram(map, DEFAULT_HISTOGRAM_BIN).expect("positive bin width"),
    }
}

/// One luminaire layout in the suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteLayout {
    pub name: String,
    pub scenario: RoomScenario,
    pub inner: RegionPartition,
}

impl SuiteLayout {
    pub fn new(name: impl Into<String>, scenario: RoomScenario) -> Self {
        let inner = RegionPartition::luminaire_span(&scenario).unwrap_or(RegionPartition {
            x_min: 0.0,
            x_max: scenario.length,
            y_min: 0.0,
            y_max: scenario.width,
        });
        Self {
            name: name.into(),
            scenario,
            inner,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub layouts: Vec<SuiteLayout>,
    /// Estimator configurations evaluated on the multipath powers.
    pub combos: Vec<LocateOptions>,
    /// Also evaluate the listed combos on line-of-sight-only powers.
    pub los_baseline: Vec<LocateOptions>,
    pub channel: ChannelConfig,
    pub grid_step: f64,
    /// Every row averages its RMS values over these seeds.
    pub seeds: Vec<u64>,
    pub noise: NoiseModel,
}

impl SuiteConfig {
    /// 16- and 25-luminaire layouts, linear and nonlinear estimation with
    /// all, 6, 5 and 4 strongest anchors, plus a line-of-sight baseline.
    pub fn reference() -> Self {
        let mut combos = Vec::new();
        for sel in [
            Selection::All,
            Selection::Strongest(6),
            Selection::Strongest(5),
            Selection::Strongest(4),
        ] {
            for method in [Method::Linear, Method::Nonlinear] {
                combos.push(LocateOptions::new(method, sel));
            }
        }
        Self {
            layouts: vec![
                SuiteLayout::new("grid16", RoomScenario::grid16()),
                SuiteLayout::new("grid25", RoomScenario::grid25()),
            ],
            combos,
            los_baseline: vec![LocateOptions::new(Method::Linear, Selection::All)],
            channel: ChannelConfig::default(),
            grid_step: 0.25,
            seeds: vec![1],
            noise: NoiseModel::off(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub layout: String,
    pub reflections: bool,
    pub estimator: Method,
    /// `all` or the number of strongest anchors.
    pub k: String,
    pub inner_rms: Option<f64>,
    pub outer_rms: Option<f64>,
    pub entire_rms: Option<f64>,
    pub inner_failures: usize,
    pub outer_failures: usize,
    pub failures: usize,
    pub points: usize,
}

impl SuiteRow {
    /// Region RMS as printed in tables: `NA` when any point in it failed.
    pub fn display(value: Option<f64>, failures: usize) -> String {
        match value {
            Some(v) if failures == 0 => format!("{v:.4}"),
            _ => "NA".into(),
        }
    }
}

fn mean(values: &[Option<f64>]) -> Option<f64> {
    let v: Option<Vec<f64>> = values.iter().copied().collect();
    v.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn suite_rows(
    layout: &SuiteLayout,
    reflections: bool,
    combos: &[LocateOptions],
    per_seed: &[(u64, GridPowers)],
    noise: &NoiseModel,
) -> Vec<SuiteRow> {
    combos
        .iter()
        .map(|opts| {
            let stats: Vec<ErrorStats> = per_seed
                .iter()
                .map(|(seed, powers)| {
                    let map = locate_grid(&layout.scenario, powers, opts, noise, *seed);
                    region_stats(&map, &layout.inner)
                })
                .collect();
            let pick =
                |f: fn(&ErrorStats) -> Option<f64>| mean(&stats.iter().map(f).collect::<Vec<_>>());
            SuiteRow {
                layout: layout.name.clone(),
                reflections,
                estimator: opts.method,
                k: opts.selection.label(),
                inner_rms: pick(|s| s.inner_rms),
                outer_rms: pick(|s| s.outer_rms),
                entire_rms: pick(|s| s.entire_rms),
                inner_failures: stats.iter().map(|s| s.inner_failures).sum(),
                outer_failures: stats.iter().map(|s| s.outer_failures).sum(),
                failures: stats.iter().map(|s| s.failures).sum(),
                points: per_seed.first().map_or(0, |(_, p)| p.points.len()),
            }
        })
        .collect()
}

/// Evaluates every layout x estimator combination and returns one summary
/// row per combination. Failed locations never abort the suite.
pub fn run_scenario_suite(
    config: &SuiteConfig,
    cache: Option<&PowerCache>,
) -> Result<Vec<SuiteRow>, ChannelError> {
    let mut rows = Vec::new();
    for layout in &config.layouts {
        let grid = GridSpec::for_scenario(&layout.scenario, config.grid_step);
        if !config.los_baseline.is_empty() {
            let los = config.channel.with_max_order(0);
            let powers = simulate_grid_powers(&layout.scenario, &grid, &los, 0, cache)?;
            rows.extend(suite_rows(
                layout,
                false,
                &config.los_baseline,
                &[(0, powers)],
                &config.noise,
            ));
        }
        let per_seed = config
            .seeds
            .iter()
            .map(|&seed| {
                log::info!("simulating layout {} with seed {seed}", layout.name);
                simulate_grid_powers(&layout.scenario, &grid, &config.channel, seed, cache)
                    .map(|p| (seed, p))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.extend(suite_rows(
            layout,
            true,
            &config.combos,
            &per_seed,
            &config.noise,
        ));
    }
    Ok(rows)
}
