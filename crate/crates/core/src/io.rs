//! Scenario files, CSV/JSON result files and the on-disk power cache.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::{ChannelConfig, ChannelError, ImpulseResponse, OrderPowers, PowerReport};
use crate::experiment::{ErrorEntry, ErrorMap, ErrorStats, NoiseMode, NoiseModel, SuiteRow};
use crate::geometry::{GeometryError, Luminaire, ReceiverOptics, Reflectances, RoomScenario, Vec3};
use crate::positioning::{Method, PositionEstimate};

/// Environment variable naming the power cache directory.
pub const CACHE_DIR_ENV: &str = "VLP_CACHE_DIR";

const GRID16: &str = include_str!("../scenarios/grid16.scenario");
const GRID25: &str = include_str!("../scenarios/grid25.scenario");

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Scenario(#[from] GeometryError),
    #[error("invalid channel section: {0}")]
    Channel(#[from] ChannelError),
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: row {row}: {reason}")]
    Malformed {
        path: PathBuf,
        row: usize,
        reason: String,
    },
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything a scenario file configures.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBundle {
    pub scenario: RoomScenario,
    pub channel: ChannelConfig,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl Default for ScenarioBundle {
    fn default() -> Self {
        Self {
            scenario: RoomScenario::grid16(),
            channel: ChannelConfig::default(),
            noise: NoiseModel::off(),
            seed: 1,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default)]
    room: RoomSection,
    #[serde(default)]
    receiver: ReceiverSection,
    #[serde(default)]
    channel: ChannelSection,
    #[serde(default)]
    noise: NoiseSection,
    #[serde(default)]
    luminaires: Vec<LuminaireSection>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RoomSection {
    length: f64,
    width: f64,
    height: f64,
    rho_wall: f64,
    rho_ceiling: f64,
    rho_floor: f64,
}

impl Default for RoomSection {
    fn default() -> Self {
        let r = Reflectances::default();
        Self {
            length: RoomScenario::DEFAULT_LENGTH,
            width: RoomScenario::DEFAULT_WIDTH,
            height: RoomScenario::DEFAULT_HEIGHT,
            rho_wall: r.wall,
            rho_ceiling: r.ceiling,
            rho_floor: r.floor,
        }
    }
}

fn default_z() -> f64 {
    Luminaire::DEFAULT_HEIGHT
}
fn default_m() -> f64 {
    1.0
}
fn default_power() -> f64 {
    Luminaire::DEFAULT_POWER
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LuminaireSection {
    id: u32,
    x: f64,
    y: f64,
    #[serde(default = "default_z")]
    z: f64,
    #[serde(default = "default_m")]
    m: f64,
    #[serde(default = "default_power")]
    power: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    orientation: Option<[f64; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ReceiverSection {
    area: f64,
    fov_deg: f64,
    ts: f64,
    g: f64,
    height: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    orientation: Option<[f64; 3]>,
}

impl Default for ReceiverSection {
    fn default() -> Self {
        let r = ReceiverOptics::default();
        Self {
            area: r.area,
            fov_deg: 70.0,
            ts: r.filter_gain,
            g: r.concentrator_gain,
            height: RoomScenario::DEFAULT_RECEIVER_HEIGHT,
            orientation: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ChannelSection {
    patch_area: f64,
    rays_per_patch: usize,
    max_order: usize,
    time_bin_ns: f64,
    max_delay_ns: f64,
    seed: u64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        let c = ChannelConfig::default();
        Self {
            patch_area: c.patch_area,
            rays_per_patch: c.rays_per_patch,
            max_order: c.max_order,
            time_bin_ns: 0.2,
            max_delay_ns: 200.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct NoiseSection {
    enabled: bool,
    sigma: f64,
    mode: NoiseMode,
}

/// A value to write to a file such that `back(written) == v` exactly,
/// searching a few ulps around `to(v)`.
fn exact_inverse(v: f64, to: impl Fn(f64) -> f64, back: impl Fn(f64) -> f64) -> f64 {
    let guess = to(v);
    let (mut up, mut down) = (guess, guess);
    for _ in 0..8 {
        if back(up) == v {
            return up;
        }
        if back(down) == v {
            return down;
        }
        up = up.next_up();
        down = down.next_down();
    }
    guess
}

const NS: f64 = 1e-9;

fn vec_or_default(v: Option<[f64; 3]>, default: Vec3) -> Vec3 {
    v.map(Vec3::from_array).unwrap_or(default)
}

impl ScenarioFile {
    fn into_bundle(self) -> Result<ScenarioBundle, IoError> {
        let mut scenario = RoomScenario::empty_room();
        let r = &self.room;
        scenario.length = r.length;
        scenario.width = r.width;
        scenario.height = r.height;
        scenario.reflectance = Reflectances {
            wall: r.rho_wall,
            ceiling: r.rho_ceiling,
            floor: r.rho_floor,
        };
        let rx = &self.receiver;
        scenario.receiver = ReceiverOptics {
            area: rx.area,
            orientation: vec_or_default(rx.orientation, Vec3::UP),
            fov_half_angle: rx.fov_deg.to_radians(),
            filter_gain: rx.ts,
            concentrator_gain: rx.g,
        };
        // Range-check in degrees so the error names the file key.
        if !(rx.fov_deg > 0.0 && rx.fov_deg <= 90.0) {
            return Err(GeometryError::InvalidScenario {
                field: "receiver.fov_deg".into(),
                reason: format!("must be in (0, 90], got {}", rx.fov_deg),
            }
            .into());
        }
        scenario.receiver_plane_height = rx.height;
        scenario.luminaires = self
            .luminaires
            .iter()
            .map(|l| Luminaire {
                id: l.id,
                position: Vec3::new(l.x, l.y, l.z),
                orientation: vec_or_default(l.orientation, Vec3::DOWN),
                lambertian_order: l.m,
                power: l.power,
            })
            .collect();
        scenario.validate()?;

        let c = &self.channel;
        let channel = ChannelConfig {
            patch_area: c.patch_area,
            rays_per_patch: c.rays_per_patch,
            max_order: c.max_order,
            time_bin: c.time_bin_ns * NS,
            max_delay: c.max_delay_ns * NS,
            ..ChannelConfig::default()
        };
        channel.validate(&scenario.room_box())?;

        let n = &self.noise;
        if !(n.sigma >= 0.0 && n.sigma.is_finite()) {
            return Err(GeometryError::InvalidScenario {
                field: "noise.sigma".into(),
                reason: format!("must be non-negative, got {}", n.sigma),
            }
            .into());
        }
        Ok(ScenarioBundle {
            scenario,
            channel,
            noise: NoiseModel {
                enabled: n.enabled,
                sigma: n.sigma,
                mode: n.mode,
            },
            seed: c.seed,
        })
    }

    fn from_bundle(b: &ScenarioBundle) -> Self {
        let s = &b.scenario;
        let rx = &s.receiver;
        Self {
            room: RoomSection {
                length: s.length,
                width: s.width,
                height: s.height,
                rho_wall: s.reflectance.wall,
                rho_ceiling: s.reflectance.ceiling,
                rho_floor: s.reflectance.floor,
            },
            receiver: ReceiverSection {
                area: rx.area,
                fov_deg: exact_inverse(rx.fov_half_angle, f64::to_degrees, f64::to_radians),
                ts: rx.filter_gain,
                g: rx.concentrator_gain,
                height: s.receiver_plane_height,
                orientation: Some(rx.orientation.to_array()),
            },
            channel: ChannelSection {
                patch_area: b.channel.patch_area,
                rays_per_patch: b.channel.rays_per_patch,
                max_order: b.channel.max_order,
                time_bin_ns: exact_inverse(b.channel.time_bin, |t| t / NS, |t| t * NS),
                max_delay_ns: exact_inverse(b.channel.max_delay, |t| t / NS, |t| t * NS),
                seed: b.seed,
            },
            noise: NoiseSection {
                enabled: b.noise.enabled,
                sigma: b.noise.sigma,
                mode: b.noise.mode,
            },
            luminaires: s
                .luminaires
                .iter()
                .map(|l| LuminaireSection {
                    id: l.id,
                    x: l.position.x,
                    y: l.position.y,
                    z: l.position.z,
                    m: l.lambertian_order,
                    power: l.power,
                    orientation: Some(l.orientation.to_array()),
                })
                .collect(),
        }
    }
}

pub fn parse_scenario_str(text: &str) -> Result<ScenarioBundle, IoError> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| IoError::Parse(e.to_string()))?;
    file.into_bundle()
}

pub fn parse_scenario(path: &Path) -> Result<ScenarioBundle, IoError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    parse_scenario_str(&text).map_err(|e| match e {
        IoError::Parse(msg) => IoError::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn serialize_scenario(bundle: &ScenarioBundle) -> String {
    toml::to_string(&ScenarioFile::from_bundle(bundle)).expect("scenario file is plain data")
}

pub const BUILTIN_SCENARIOS: [&str; 2] = ["grid16", "grid25"];

pub fn builtin_scenario(name: &str) -> Option<&'static str> {
    match name.trim_end_matches(".scenario") {
        "grid16" => Some(GRID16),
        "grid25" => Some(GRID25),
        _ => None,
    }
}

/// Loads a scenario from a path, falling back to a bundled scenario name.
pub fn load_scenario(spec: &str) -> Result<ScenarioBundle, IoError> {
    let path = Path::new(spec);
    if !path.exists() {
        if let Some(text) = builtin_scenario(spec) {
            return parse_scenario_str(text);
        }
    }
    parse_scenario(path)
}

/// Fixed-width rendering that round-trips every `f64` exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn create(path: &Path) -> Result<fs::File, IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
    }
    fs::File::create(path).map_err(file_err(path))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, IoError> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

const MAP_HEADER: [&str; 9] = [
    "x",
    "y",
    "x_hat",
    "y_hat",
    "error_m",
    "method",
    "anchors_used",
    "fallback",
    "failed",
];

/// One CSV row per grid point; failed points leave the estimate fields empty.
pub fn write_error_map(map: &ErrorMap, path: &Path) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record(MAP_HEADER).map_err(csv_err(path))?;
    for e in &map.entries {
        let est = e.estimate.as_ref();
        let record = [
            fmt_f64(e.x),
            fmt_f64(e.y),
            est.map_or(String::new(), |p| fmt_f64(p.x)),
            est.map_or(String::new(), |p| fmt_f64(p.y)),
            if e.failed {
                String::new()
            } else {
                fmt_f64(e.error)
            },
            est.map_or(String::new(), |p| p.method.as_str().to_string()),
            est.map_or(String::new(), |p| p.anchors_used.to_string()),
            est.is_some_and(|p| p.used_centroid_fallback).to_string(),
            e.failed.to_string(),
        ];
        w.write_record(&record).map_err(csv_err(path))?;
    }
    w.flush().map_err(file_err(path))
}

/// Reads a map written by [`write_error_map`]. Solver diagnostics that the
/// CSV does not carry come back as zero.
pub fn read_error_map(path: &Path) -> Result<ErrorMap, IoError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    if header.iter().ne(MAP_HEADER) {
        return Err(IoError::Malformed {
            path: path.to_path_buf(),
            row: 0,
            reason: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut entries = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let bad = |reason: String| IoError::Malformed {
            path: path.to_path_buf(),
            row: i + 1,
            reason,
        };
        let num = |k: usize| -> Result<f64, IoError> {
            rec[k]
                .parse()
                .map_err(|_| bad(format!("{}: not a number: {:?}", MAP_HEADER[k], &rec[k])))
        };
        let flag = |k: usize| -> Result<bool, IoError> {
            rec[k]
                .parse()
                .map_err(|_| bad(format!("{}: not a boolean: {:?}", MAP_HEADER[k], &rec[k])))
        };
        let failed = flag(8)?;
        let estimate = if rec[2].is_empty() {
            None
        } else {
            Some(PositionEstimate {
                x: num(2)?,
                y: num(3)?,
                method: rec[5].parse::<Method>().map_err(|e| bad(e.to_string()))?,
                anchors_used: rec[6]
                    .parse()
                    .map_err(|_| bad(format!("anchors_used: {:?}", &rec[6])))?,
                iterations: 0,
                final_residual: 0.0,
                used_centroid_fallback: flag(7)?,
                clamped_ranges: 0,
            })
        };
        entries.push(ErrorEntry {
            x: num(0)?,
            y: num(1)?,
            error: if failed { f64::NAN } else { num(4)? },
            estimate,
            failed,
        });
    }
    Ok(ErrorMap { entries })
}

fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<(), IoError> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    f.write_all(b"\n").map_err(file_err(path))
}

/// Writes region statistics as JSON. Numbers use the shortest exact
/// representation, so they round-trip bit for bit.
pub fn write_stats(stats: &ErrorStats, path: &Path) -> Result<(), IoError> {
    write_json(stats, path)
}

pub fn read_stats(path: &Path) -> Result<ErrorStats, IoError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Impulse response as a histogram: delay in ns, one column per order, total.
pub fn write_impulse_response_to<W: Write>(ir: &ImpulseResponse, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["delay_ns".to_string()];
    header.extend((0..=ir.max_order()).map(|k| format!("order{k}")));
    header.push("total".into());
    w.write_record(&header)?;
    for b in 0..ir.bins() {
        let mut rec = vec![fmt_f64(b as f64 * ir.time_bin / NS)];
        let mut total = 0.0;
        for order in &ir.orders {
            rec.push(fmt_f64(order[b]));
            total += order[b];
        }
        rec.push(fmt_f64(total));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_impulse_response(ir: &ImpulseResponse, path: &Path) -> Result<(), IoError> {
    write_impulse_response_to(ir, create(path)?).map_err(csv_err(path))
}

/// Per-luminaire received power broken down by reflection order.
pub fn write_power_report_to<W: Write>(report: &PowerReport, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let orders = report.rows.first().map_or(0, |r| r.powers.per_order.len());
    let mut header = vec!["luminaire_id".to_string(), "x".into(), "y".into()];
    header.extend((0..orders).map(|k| format!("order{k}")));
    header.push("total".into());
    w.write_record(&header)?;
    for row in &report.rows {
        let mut rec = vec![row.luminaire_id.to_string(), fmt_f64(row.x), fmt_f64(row.y)];
        rec.extend(row.powers.per_order.iter().map(|&p| fmt_f64(p)));
        rec.push(fmt_f64(row.powers.total));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_power_report(report: &PowerReport, path: &Path) -> Result<(), IoError> {
    write_power_report_to(report, create(path)?).map_err(csv_err(path))
}

pub fn write_suite_csv(rows: &[SuiteRow], path: &Path) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "layout",
        "reflections",
        "estimator",
        "k",
        "inner_rms",
        "outer_rms",
        "entire_rms",
        "inner_failures",
        "outer_failures",
        "failures",
        "points",
    ])
    .map_err(csv_err(path))?;
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), fmt_f64);
    for r in rows {
        w.write_record([
            r.layout.clone(),
            r.reflections.to_string(),
            r.estimator.as_str().to_string(),
            r.k.clone(),
            opt(r.inner_rms),
            opt(r.outer_rms),
            opt(r.entire_rms),
            r.inner_failures.to_string(),
            r.outer_failures.to_string(),
            r.failures.to_string(),
            r.points.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(file_err(path))
}

pub fn write_suite_json(rows: &[SuiteRow], path: &Path) -> Result<(), IoError> {
    write_json(rows, path)
}

/// Content hash identifying one (scenario, channel, luminaire, receiver, seed) result.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Sorted-key `key=value` lines with fixed-precision numbers.
pub fn canonical_text(
    scenario: &RoomScenario,
    config: &ChannelConfig,
    luminaire_id: u32,
    receiver: (f64, f64, f64),
    seed: u64,
) -> String {
    let mut kv = BTreeMap::new();
    let mut num = |k: String, v: f64| {
        kv.insert(k, format!("{v:.17e}"));
    };
    num("room.length".into(), scenario.length);
    num("room.width".into(), scenario.width);
    num("room.height".into(), scenario.height);
    num("room.rho_wall".into(), scenario.reflectance.wall);
    num("room.rho_ceiling".into(), scenario.reflectance.ceiling);
    num("room.rho_floor".into(), scenario.reflectance.floor);
    let rx = &scenario.receiver;
    num("receiver.area".into(), rx.area);
    num("receiver.fov".into(), rx.fov_half_angle);
    num("receiver.ts".into(), rx.filter_gain);
    num("receiver.g".into(), rx.concentrator_gain);
    for (i, c) in rx.orientation.to_array().into_iter().enumerate() {
        num(format!("receiver.orientation.{i}"), c);
    }
    for l in &scenario.luminaires {
        let p = format!("luminaire.{:010}", l.id);
        for (i, c) in l.position.to_array().into_iter().enumerate() {
            num(format!("{p}.position.{i}"), c);
        }
        for (i, c) in l.orientation.to_array().into_iter().enumerate() {
            num(format!("{p}.orientation.{i}"), c);
        }
        num(format!("{p}.m"), l.lambertian_order);
        num(format!("{p}.power"), l.power);
    }
    num("channel.patch_area".into(), config.patch_area);
    num("channel.time_bin".into(), config.time_bin);
    num("channel.max_delay".into(), config.max_delay);
    num("channel.speed_of_light".into(), config.speed_of_light);
    num("target.x".into(), receiver.0);
    num("target.y".into(), receiver.1);
    num("target.z".into(), receiver.2);
    kv.insert(
        "channel.rays_per_patch".into(),
        config.rays_per_patch.to_string(),
    );
    kv.insert("channel.max_order".into(), config.max_order.to_string());
    kv.insert("target.luminaire".into(), luminaire_id.to_string());
    kv.insert("seed".into(), seed.to_string());
    kv.insert("version".into(), "1".into());
    kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn cache_key(
    scenario: &RoomScenario,
    config: &ChannelConfig,
    luminaire_id: u32,
    receiver: (f64, f64, f64),
    seed: u64,
) -> CacheKey {
    let text = canonical_text(scenario, config, luminaire_id, receiver, seed);
    CacheKey(hex::encode(Sha256::digest(text.as_bytes())))
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    powers: OrderPowers,
}

/// Directory of per-key JSON files holding per-order received power.
///
/// Writes go through a temporary file and an atomic rename, so concurrent
/// writers of one key leave a single complete entry.
#[derive(Debug, Default)]
pub struct PowerCache {
    dir: Option<PathBuf>,
    computations: AtomicUsize,
}

impl PowerCache {
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn at(dir: impl Into<PathBuf>) -> Result<Self, IoError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(file_err(&dir))?;
        Ok(Self {
            dir: Some(dir),
            computations: AtomicUsize::new(0),
        })
    }

    /// Uses `VLP_CACHE_DIR` when set, otherwise `fallback`, otherwise disabled.
    pub fn from_env(fallback: Option<PathBuf>) -> Result<Self, IoError> {
        match std::env::var_os(CACHE_DIR_ENV)
            .map(PathBuf::from)
            .or(fallback)
        {
            Some(dir) => Self::at(dir),
            None => Ok(Self::disabled()),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.dir.is_some()
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Number of channel computations performed through this cache.
    pub fn computations(&self) -> usize {
        self.computations.load(Ordering::Relaxed)
    }

    pub fn record_computation(&self) {
        self.computations.fetch_add(1, Ordering::Relaxed);
    }

    fn entry_path(&self, key: &CacheKey) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}.json", key.0)))
    }

    /// Stored value, or `None` on a miss. Corrupt entries count as misses.
    pub fn lookup(&self, key: &CacheKey) -> Option<OrderPowers> {
        let path = self.entry_path(key)?;
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return None,
            Err(e) => {
                log::warn!("cache entry {} unreadable: {e}", path.display());
                return None;
            }
        };
        match serde_json::from_str::<CacheEntry>(&text) {
            Ok(entry) if entry.key == key.0 => Some(entry.powers),
            Ok(_) => {
                log::warn!(
                    "cache entry {} has a mismatched key; recomputing",
                    path.display()
                );
                None
            }
            Err(e) => {
                log::warn!(
                    "cache entry {} is corrupt ({e}); recomputing",
                    path.display()
                );
                None
            }
        }
    }

    /// Best effort: a failed write only logs a warning.
    pub fn store(&self, key: &CacheKey, powers: &OrderPowers) {
        let (Some(dir), Some(path)) = (self.dir.as_ref(), self.entry_path(key)) else {
            return;
        };
        let entry = CacheEntry {
            key: key.0.clone(),
            powers: powers.clone(),
        };
        let result = tempfile::NamedTempFile::new_in(dir).and_then(|mut tmp| {
            serde_json::to_writer(&mut tmp, &entry)?;
            tmp.as_file().sync_all()?;
            tmp.persist(&path).map(|_| ()).map_err(|e| e.error)
        });
        if let Err(e) = result {
            log::warn!("failed to write cache entry {}: {e}", path.display());
        }
    }

    pub fn get_or_compute<E>(
        &self,
        key: &CacheKey,
        compute: impl FnOnce() -> Result<OrderPowers, E>,
    ) -> Result<OrderPowers, E> {
        if let Some(hit) = self.lookup(key) {
            return Ok(hit);
        }
        let value = compute()?;
        self.record_computation();
        self.store(key, &value);
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{region_stats, RegionPartition};
    use crate::positioning::Method;

    #[test]
    fn bundled_grid16() {
        let b = parse_scenario_str(builtin_scenario("grid16").unwrap()).unwrap();
        assert_eq!(b.scenario.luminaires.len(), 16);
        assert_eq!(b.scenario.reflectance, Reflectances::default());
        let xy: Vec<_> = b
            .scenario
            .luminaires
            .iter()
            .map(|l| (l.position.x, l.position.y))
            .collect();
        let expect: Vec<_> = RoomScenario::grid16()
            .luminaires
            .iter()
            .map(|l| (l.position.x, l.position.y))
            .collect();
        assert_eq!(xy, expect);
        assert_eq!(
            parse_scenario_str(GRID25)
                .unwrap()
                .scenario
                .luminaires
                .len(),
            25
        );
    }

    #[test]
    fn fov_out_of_range_names_key() {
        let err = parse_scenario_str("[receiver]\nfov_deg = 190\n").unwrap_err();
        assert!(err.to_string().contains("receiver.fov_deg"), "{err}");
    }

    #[test]
    fn omitted_channel_uses_defaults() {
        let b = parse_scenario_str("[[luminaires]]\nid = 1\nx = 2\ny = 2\n").unwrap();
        assert_eq!(b.channel.rays_per_patch, 10);
        assert_eq!(b.channel.max_order, 3);
        assert_eq!(
            b.scenario.luminaires[0].position.z,
            Luminaire::DEFAULT_HEIGHT
        );
    }

    #[test]
    fn missing_and_unknown_keys_are_named() {
        let err = parse_scenario_str("[[luminaires]]\nx = 2\ny = 2\n").unwrap_err();
        assert!(err.to_string().contains("id"), "{err}");
        let err = parse_scenario_str("[room]\nlenght = 3\n").unwrap_err();
        assert!(err.to_string().contains("lenght"), "{err}");
        let err = parse_scenario_str("[[luminaires]]\nid = 1\nx = 20\ny = 2\n").unwrap_err();
        assert!(err.to_string().contains("luminaires[0].position"), "{err}");
    }

    #[test]
    fn serialize_round_trip() {
        let mut b = ScenarioBundle::default();
        b.scenario.receiver.fov_half_angle = 0.123_456_789_f64;
        b.scenario.luminaires[3].lambertian_order = 2.5;
        b.channel.time_bin = 0.37e-9;
        b.noise = NoiseModel::relative(0.05);
        b.seed = 99;
        let text = serialize_scenario(&b);
        assert_eq!(parse_scenario_str(&text).unwrap(), b);
        let b25 = parse_scenario_str(GRID25).unwrap();
        assert_eq!(parse_scenario_str(&serialize_scenario(&b25)).unwrap(), b25);
    }

    fn sample_map() -> ErrorMap {
        let est = PositionEstimate {
            x: 1.0 / 3.0,
            y: 2.0f64.sqrt(),
            method: Method::Nonlinear,
            anchors_used: 4,
            iterations: 0,
            final_residual: 0.0,
            used_centroid_fallback: true,
            clamped_ranges: 0,
        };
        ErrorMap {
            entries: vec![
                ErrorEntry {
                    x: 0.25,
                    y: 0.1,
                    estimate: Some(est),
                    error: 0.123_456_789_012_345_68,
                    failed: false,
                },
                ErrorEntry {
                    x: 7.75,
                    y: 8.0,
                    estimate: None,
                    error: f64::NAN,
                    failed: true,
                },
            ],
        }
    }

    #[test]
    fn error_map_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.csv");
        let map = sample_map();
        write_error_map(&map, &path).unwrap();
        let back = read_error_map(&path).unwrap();
        assert_eq!(back.entries[0], map.entries[0]);
        assert!(back.entries[1].failed && back.entries[1].error.is_nan());
        assert_eq!(back.entries[1].estimate, None);
    }

    #[test]
    fn empty_map_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        write_error_map(&ErrorMap::default(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.trim_end(), MAP_HEADER.join(","));
    }

    #[test]
    fn stats_json_schema_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.json");
        let part = RegionPartition::luminaire_span(&RoomScenario::grid16()).unwrap();
        let stats = region_stats(&sample_map(), &part);
        write_stats(&stats, &path).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        for key in [
            "inner_rms",
            "outer_rms",
            "entire_rms",
            "failures",
            "histogram",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(read_stats(&path).unwrap(), stats);
    }

    #[test]
    fn unwritable_path_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = write_error_map(&ErrorMap::default(), &blocker.join("sub/map.csv")).unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
    }

    fn key(seed: u64) -> CacheKey {
        let s = RoomScenario::grid16();
        cache_key(&s, &ChannelConfig::default(), 1, (1.0, 2.0, 1.2), seed)
    }

    #[test]
    fn cache_hits_skip_computation() {
        let dir = tempfile::tempdir().unwrap();
        let cache = PowerCache::at(dir.path()).unwrap();
        let value = OrderPowers::from_orders(vec![1e-5, 2e-6 / 3.0]);
        let compute = || Ok::<_, ()>(value.clone());
        assert_eq!(cache.get_or_compute(&key(1), compute).unwrap(), value);
        assert_eq!(cache.get_or_compute(&key(1), compute).unwrap(), value);
        assert_eq!(cache.computations(), 1);
        cache.get_or_compute(&key(2), compute).unwrap();
        assert_eq!(cache.computations(), 2);
    }

    #[test]
    fn disabled_cache_always_computes() {
        let cache = PowerCache::disabled();
        let compute = || Ok::<_, ()>(OrderPowers::from_orders(vec![1.0]));
        cache.get_or_compute(&key(1), compute).unwrap();
        cache.get_or_compute(&key(1), compute).unwrap();
        assert_eq!(cache.computations(), 2);
    }

    #[test]
    fn corrupt_entry_is_recomputed() {
        let dir = tempfile::tempdir().unwrap();
        let cache = PowerCache::at(dir.path()).unwrap();
        let k = key(5);
        fs::write(dir.path().join(format!("{}.json", k.as_str())), "{not json").unwrap();
        let value = OrderPowers::from_orders(vec![3.0]);
        assert_eq!(
            cache
                .get_or_compute(&k, || Ok::<_, ()>(value.clone()))
                .unwrap(),
            value
        );
        assert_eq!(cache.computations(), 1);
        assert_eq!(cache.lookup(&k), Some(value));
    }

    #[test]
    fn canonical_text_is_sorted_and_stable() {
        let s = RoomScenario::grid16();
        let t = canonical_text(&s, &ChannelConfig::default(), 3, (1.0, 1.0, 1.2), 7);
        let keys: Vec<&str> = t.lines().map(|l| l.split('=').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(
            t,
            canonical_text(&s, &ChannelConfig::default(), 3, (1.0, 1.0, 1.2), 7)
        );
        assert_ne!(key(1), key(2));
    }
}
