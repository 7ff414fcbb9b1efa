//! Optical channel: line-of-sight gain plus multipath impulse response.
//!
//! Reflections are computed in two stages. The first bounce is deterministic:
//! every surface patch receives power from the luminaire and re-emits a
//! fraction of it as an ideal diffuse point source. Higher orders are
//! estimated by launching random rays from each patch; every ray impact
//! becomes a new diffuse point source whose contribution to the photodiode is
//! evaluated directly (next-event estimation), and the ray continues from the
//! impact until the maximum order is reached.
//!
//! Nothing in the ray cascade depends on the receiver. [`LuminaireField`]
//! therefore holds the full set of virtual emitters for one luminaire and can
//! be evaluated at any number of receiver poses.

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    link_geometry, partition_surfaces, ray_room_intersection, Frame, GeometryError, Luminaire,
    OrientedPoint, ReceiverOptics, RoomBox, RoomScenario, SurfacePatch, Vec3,
};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Lambertian order used for re-emission from room surfaces.
pub const DIFFUSE_ORDER: f64 = 1.0;

/// Resampling budget for a single ray before the cascade gives up.
pub const MAX_RESAMPLES: usize = 100;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid channel configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown luminaire id {0}")]
    UnknownLuminaire(u32),
    #[error("ray from patch {patch} at {origin} stayed degenerate after {attempts} resamples")]
    DegenerateCascade {
        patch: usize,
        origin: Vec3,
        attempts: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Surface patch area in m^2.
    pub patch_area: f64,
    pub rays_per_patch: usize,
    /// Highest reflection order simulated; 0 means line of sight only.
    pub max_order: usize,
    /// Histogram bin width in seconds.
    pub time_bin: f64,
    /// Histogram span in seconds.
    pub max_delay: f64,
    pub speed_of_light: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            patch_area: 0.01,
            rays_per_patch: 10,
            max_order: 3,
            time_bin: 0.2e-9,
            max_delay: 200e-9,
            speed_of_light: SPEED_OF_LIGHT,
        }
    }
}

impl ChannelConfig {
    pub fn with_max_order(mut self, k: usize) -> Self {
        self.max_order = k;
        self
    }

    pub fn bins(&self) -> usize {
        (self.max_delay / self.time_bin).ceil().max(1.0) as usize
    }

    pub fn validate(&self, room: &RoomBox) -> Result<(), ChannelError> {
        let bad = |msg: String| Err(ChannelError::InvalidConfig(msg));
        if !(self.patch_area > 0.0 && self.patch_area.is_finite()) {
            return bad(format!(
                "patch_area must be positive, got {}",
                self.patch_area
            ));
        }
        if self.rays_per_patch == 0 {
            return bad("rays_per_patch must be at least 1".into());
        }
        if !(self.time_bin > 0.0 && self.time_bin.is_finite()) {
            return bad(format!("time_bin must be positive, got {}", self.time_bin));
        }
        if !(self.speed_of_light > 0.0) {
            return bad("speed_of_light must be positive".into());
        }
        let longest = room.diagonal() * (self.max_order + 1) as f64 / self.speed_of_light;
        if self.max_delay < longest {
            return bad(format!(
                "max_delay {:.3e} s is shorter than the longest {}-segment path ({:.3e} s)",
                self.max_delay,
                self.max_order + 1,
                longest
            ));
        }
        Ok(())
    }
}

/// Collecting aperture of a receiving element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aperture {
    pub area: f64,
    pub filter_gain: f64,
    pub concentrator_gain: f64,
    /// Cosine of the field-of-view half angle; incidence beyond it collects nothing.
    pub cos_fov: f64,
}

impl Aperture {
    pub fn photodiode(optics: &ReceiverOptics) -> Self {
        Self {
            area: optics.area,
            filter_gain: optics.filter_gain,
            concentrator_gain: optics.concentrator_gain,
            cos_fov: optics.fov_half_angle.cos().max(0.0),
        }
    }

    /// A bare surface patch: unit gains, full hemisphere.
    pub fn patch(area: f64) -> Self {
        Self {
            area,
            filter_gain: 1.0,
            concentrator_gain: 1.0,
            cos_fov: 0.0,
        }
    }

    fn effective_area(&self) -> f64 {
        self.area * self.filter_gain * self.concentrator_gain
    }
}

/// `cos^m`, with the common `m = 1` case kept exact and cheap.
#[inline]
fn cos_pow(c: f64, m: f64) -> f64 {
    if m == 1.0 {
        c
    } else {
        c.powf(m)
    }
}

/// Channel DC gain of a Lambertian emitter of order `m` towards a receiving aperture.
///
/// Zero whenever the receiver is behind the emitter, the emitter is behind
/// the receiver, or the incidence angle exceeds the field of view.
pub fn dc_gain(
    src: &OrientedPoint,
    lambertian_order: f64,
    dst: &OrientedPoint,
    aperture: &Aperture,
) -> Result<f64, GeometryError> {
    let link = link_geometry(src, dst)?;
    if link.cos_phi <= 0.0 || link.cos_psi <= 0.0 || link.cos_psi < aperture.cos_fov {
        return Ok(0.0);
    }
    Ok((lambertian_order + 1.0) * aperture.effective_area()
        / (2.0 * PI * link.distance * link.distance)
        * cos_pow(link.cos_phi, lambertian_order)
        * link.cos_psi)
}

/// Per-order, time-binned received power. Order 0 is line of sight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponse {
    pub time_bin: f64,
    /// `orders[k][bin]` in watts.
    pub orders: Vec<Vec<f64>>,
}

impl ImpulseResponse {
    pub fn new(config: &ChannelConfig) -> Self {
        Self {
            time_bin: config.time_bin,
            orders: vec![vec![0.0; config.bins()]; config.max_order + 1],
        }
    }

    pub fn max_order(&self) -> usize {
        self.orders.len().saturating_sub(1)
    }

    pub fn bins(&self) -> usize {
        self.orders.first().map_or(0, Vec::len)
    }

    #[inline]
    pub fn deposit(&mut self, order: usize, delay: f64, power: f64) {
        let hist = &mut self.orders[order];
        let bin = ((delay / self.time_bin) as usize).min(hist.len() - 1);
        debug_assert!(delay / self.time_bin < hist.len() as f64 + 1.0);
        hist[bin] += power;
    }

    fn merge_order(&mut self, order: usize, other: &[f64]) {
        for (a, b) in self.orders[order].iter_mut().zip(other) {
            *a += b;
        }
    }
}

/// Received power decomposed by reflection order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderPowers {
    pub per_order: Vec<f64>,
    pub total: f64,
}

impl OrderPowers {
    pub fn from_orders(per_order: Vec<f64>) -> Self {
        let total = per_order.iter().sum();
        Self { per_order, total }
    }

    pub fn zero(max_order: usize) -> Self {
        Self::from_orders(vec![0.0; max_order + 1])
    }

    pub fn reflected(&self) -> f64 {
        self.per_order.iter().skip(1).sum()
    }
}

pub fn received_power_by_order(ir: &ImpulseResponse) -> OrderPowers {
    OrderPowers::from_orders(ir.orders.iter().map(|h| h.iter().sum()).collect())
}

/// Received power for one luminaire at one receiver pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub luminaire_id: u32,
    pub x: f64,
    pub y: f64,
    pub powers: OrderPowers,
}

impl PowerRow {
    pub fn total(&self) -> f64 {
        self.powers.total
    }
}

/// Per-luminaire received powers at one receiver pose.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PowerReport {
    pub rows: Vec<PowerRow>,
}

/// Deterministic pseudo-random stream.
///
/// Substreams are addressed by an integer key so that parallel work items
/// draw identical numbers regardless of scheduling.
#[derive(Debug, Clone)]
pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    /// Uniform sample in `(0, 1]`.
    #[inline]
    pub fn open_unit(&mut self) -> f64 {
        1.0 - self.0.random::<f64>()
    }

    /// Uniform sample in `[0, 1)`.
    #[inline]
    pub fn unit(&mut self) -> f64 {
        self.0.random::<f64>()
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// Substream key for the rays launched from `patch` when tracing `luminaire_id`.
pub fn cascade_stream(luminaire_id: u32, patch: usize) -> u64 {
    ((luminaire_id as u64) << 40) | patch as u64
}

/// Direction from the inverse CDF of the cos^m polar density, given two uniforms.
///
/// `u` in `(0, 1]` picks the polar angle `acos(u^(1/(m+1)))`, `v` in `[0, 1)`
/// picks the azimuth `2 pi v`.
#[inline]
pub fn lambertian_direction(u: f64, v: f64, lambertian_order: f64, frame: &Frame) -> Vec3 {
    let cos_a = u.powf(1.0 / (lambertian_order + 1.0));
    let sin_a = (1.0 - cos_a * cos_a).max(0.0).sqrt();
    let (sin_b, cos_b) = (2.0 * PI * v).sin_cos();
    frame.to_world(Vec3::new(sin_a * cos_b, sin_a * sin_b, cos_a))
}

pub fn sample_lambertian_direction(
    rng: &mut SeededRng,
    lambertian_order: f64,
    frame: &Frame,
) -> Vec3 {
    let u = rng.open_unit();
    let v = rng.unit();
    lambertian_direction(u, v, lambertian_order, frame)
}

/// Point emitters of one reflection order, stored column-wise for the
/// receiver-evaluation loop.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmitterSet {
    pub lambertian_order: f64,
    px: Vec<f64>,
    py: Vec<f64>,
    pz: Vec<f64>,
    nx: Vec<f64>,
    ny: Vec<f64>,
    nz: Vec<f64>,
    /// Emitted power in watts.
    power: Vec<f64>,
    /// Path length from the luminaire to the emitter, in metres.
    path: Vec<f64>,
}

impl EmitterSet {
    pub fn new(lambertian_order: f64) -> Self {
        Self {
            lambertian_order,
            ..Default::default()
        }
    }

    pub fn push(&mut self, pose: OrientedPoint, power: f64, path: f64) {
        self.px.push(pose.position.x);
        self.py.push(pose.position.y);
        self.pz.push(pose.position.z);
        self.nx.push(pose.normal.x);
        self.ny.push(pose.normal.y);
        self.nz.push(pose.normal.z);
        self.power.push(power);
        self.path.push(path);
    }

    fn extend(&mut self, other: EmitterSet) {
        self.px.extend(other.px);
        self.py.extend(other.py);
        self.pz.extend(other.pz);
        self.nx.extend(other.nx);
        self.ny.extend(other.ny);
        self.nz.extend(other.nz);
        self.power.extend(other.power);
        self.path.extend(other.path);
    }

    pub fn len(&self) -> usize {
        self.power.len()
    }

    pub fn is_empty(&self) -> bool {
        self.power.is_empty()
    }

    pub fn pose(&self, i: usize) -> OrientedPoint {
        OrientedPoint::new(
            Vec3::new(self.px[i], self.py[i], self.pz[i]),
            Vec3::new(self.nx[i], self.ny[i], self.nz[i]),
        )
    }

    pub fn power(&self, i: usize) -> f64 {
        self.power[i]
    }

    pub fn path(&self, i: usize) -> f64 {
        self.path[i]
    }

    pub fn total_power(&self) -> f64 {
        self.power.iter().sum()
    }

    /// Calls `sink(power, total_path)` for every emitter that reaches `rx`.
    #[inline]
    fn for_each_contribution(
        &self,
        rx: &OrientedPoint,
        aperture: &Aperture,
        mut sink: impl FnMut(f64, f64),
    ) {
        let coeff = (self.lambertian_order + 1.0) * aperture.effective_area() / (2.0 * PI);
        let cos_fov2 = aperture.cos_fov * aperture.cos_fov;
        let (rx_x, rx_y, rx_z) = (rx.position.x, rx.position.y, rx.position.z);
        let (rn_x, rn_y, rn_z) = (rx.normal.x, rx.normal.y, rx.normal.z);
        let m = self.lambertian_order;
        for i in 0..self.power.len() {
            let dx = rx_x - self.px[i];
            let dy = rx_y - self.py[i];
            let dz = rx_z - self.pz[i];
            // both scaled by the distance
            let emit = self.nx[i] * dx + self.ny[i] * dy + self.nz[i] * dz;
            let incident = -(rn_x * dx + rn_y * dy + rn_z * dz);
            if emit <= 0.0 || incident <= 0.0 {
                continue;
            }
            let d2 = dx * dx + dy * dy + dz * dz;
            if incident * incident < cos_fov2 * d2 || d2 <= 1e-24 {
                continue;
            }
            let gain = if m == 1.0 {
                coeff * emit * incident / (d2 * d2)
            } else {
                let d = d2.sqrt();
                coeff * (emit / d).powf(m) * (incident / d) / d2
            };
            sink(gain * self.power[i], self.path[i] + d2.sqrt());
        }
    }

    /// Total power delivered to `rx`.
    pub fn power_at(&self, rx: &OrientedPoint, aperture: &Aperture) -> f64 {
        let mut total = 0.0;
        self.for_each_contribution(rx, aperture, |p, _| total += p);
        total
    }

    /// Deposits every contribution into a histogram indexed by delay bin.
    pub fn histogram_at(
        &self,
        rx: &OrientedPoint,
        aperture: &Aperture,
        config: &ChannelConfig,
    ) -> Vec<f64> {
        let mut hist = vec![0.0; config.bins()];
        let last = hist.len() - 1;
        let scale = 1.0 / (config.speed_of_light * config.time_bin);
        self.for_each_contribution(rx, aperture, |p, path| {
            let bin = ((path * scale) as usize).min(last);
            hist[bin] += p;
        });
        hist
    }
}

/// Deterministic first-bounce state of one luminaire: what every patch
/// receives and what it re-emits.
#[derive(Debug, Clone)]
pub struct FirstBounce {
    /// Patches with non-zero re-emitted power, as diffuse emitters.
    pub emitters: EmitterSet,
    /// Index into the patch list for each emitter.
    pub patch_index: Vec<usize>,
    /// Power incident on each emitter's patch, in watts.
    pub incident: Vec<f64>,
}

/// Illuminates every patch from `luminaire` and turns it into a diffuse re-emitter.
pub fn first_bounce_emitters(luminaire: &Luminaire, patches: &[SurfacePatch]) -> FirstBounce {
    let src = luminaire.pose();
    let mut out = FirstBounce {
        emitters: EmitterSet::new(DIFFUSE_ORDER),
        patch_index: Vec::new(),
        incident: Vec::new(),
    };
    for (i, patch) in patches.iter().enumerate() {
        let dst = patch.pose();
        // a patch centre can only coincide with a luminaire mounted flush on a surface
        let Ok(link) = link_geometry(&src, &dst) else {
            continue;
        };
        let gain = dc_gain(
            &src,
            luminaire.lambertian_order,
            &dst,
            &Aperture::patch(patch.area),
        )
        .unwrap_or(0.0);
        let incident = gain * luminaire.power;
        let emitted = incident * patch.reflectance;
        if emitted > 0.0 {
            out.emitters.push(dst, emitted, link.distance);
            out.patch_index.push(i);
            out.incident.push(incident);
        }
    }
    out
}

/// Order-1 histogram at the receiver.
pub fn first_bounce(
    luminaire: &Luminaire,
    patches: &[SurfacePatch],
    rx: &OrientedPoint,
    aperture: &Aperture,
    config: &ChannelConfig,
) -> Vec<f64> {
    first_bounce_emitters(luminaire, patches)
        .emitters
        .histogram_at(rx, aperture, config)
}

/// Traces the random ray cascade seeded by the first-bounce emitters.
///
/// Each emitter launches `rays_per_patch` rays carrying an equal share of its
/// power. At each impact the power is scaled by the struck surface's
/// reflectance and the impact is recorded as an emitter of the next order;
/// the ray then continues in a fresh diffuse direction. Returns emitter sets
/// for orders `2..=max_order`.
pub fn cascade_emitters(
    first: &FirstBounce,
    scenario: &RoomScenario,
    luminaire_id: u32,
    config: &ChannelConfig,
    seed: u64,
) -> Result<Vec<EmitterSet>, ChannelError> {
    let depth = config.max_order.saturating_sub(1);
    if depth == 0 {
        return Ok(Vec::new());
    }
    let room = scenario.room_box();
    let rays = config.rays_per_patch;
    let per_emitter: Vec<Vec<EmitterSet>> = (0..first.emitters.len())
        .into_par_iter()
        .map(|e| {
            let patch = first.patch_index[e];
            let mut rng = SeededRng::substream(seed, cascade_stream(luminaire_id, patch));
            let mut sets = vec![EmitterSet::new(DIFFUSE_ORDER); depth];
            let start = first.emitters.pose(e);
            let share = first.emitters.power(e) / rays as f64;
            for _ in 0..rays {
                let mut pose = start;
                let mut power = share;
                let mut path = first.emitters.path(e);
                for set in sets.iter_mut() {
                    let frame = Frame::from_normal(pose.normal);
                    let hit = trace_once(&mut rng, &pose, &frame, &room).ok_or(
                        ChannelError::DegenerateCascade {
                            patch,
                            origin: pose.position,
                            attempts: MAX_RESAMPLES,
                        },
                    )?;
                    power *= scenario.reflectance.for_role(hit.face.role());
                    if power <= 0.0 {
                        break;
                    }
                    path += hit.distance;
                    pose = OrientedPoint::new(hit.point, hit.face.inward_normal());
                    set.push(pose, power, path);
                }
            }
            Ok(sets)
        })
        .collect::<Result<_, ChannelError>>()?;

    let mut merged = vec![EmitterSet::new(DIFFUSE_ORDER); depth];
    for sets in per_emitter {
        for (dst, src) in merged.iter_mut().zip(sets) {
            dst.extend(src);
        }
    }
    Ok(merged)
}

fn trace_once(
    rng: &mut SeededRng,
    pose: &OrientedPoint,
    frame: &Frame,
    room: &RoomBox,
) -> Option<crate::geometry::RayHit> {
    for _ in 0..MAX_RESAMPLES {
        let dir = sample_lambertian_direction(rng, DIFFUSE_ORDER, frame);
        if let Ok(hit) = ray_room_intersection(pose.position, dir, room) {
            return Some(hit);
        }
    }
    None
}

/// Orders 2..=K histograms at the receiver.
pub fn higher_order_cascade(
    first: &FirstBounce,
    scenario: &RoomScenario,
    luminaire_id: u32,
    rx: &OrientedPoint,
    aperture: &Aperture,
    config: &ChannelConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>, ChannelError> {
    Ok(
        cascade_emitters(first, scenario, luminaire_id, config, seed)?
            .iter()
            .map(|set| set.histogram_at(rx, aperture, config))
            .collect(),
    )
}

/// Received power and propagation delay of the direct path.
pub fn los_contribution(
    luminaire: &Luminaire,
    rx: &OrientedPoint,
    aperture: &Aperture,
    config: &ChannelConfig,
) -> Result<(f64, f64), GeometryError> {
    let link = link_geometry(&luminaire.pose(), rx)?;
    let gain = dc_gain(&luminaire.pose(), luminaire.lambertian_order, rx, aperture)?;
    Ok((
        gain * luminaire.power,
        link.distance / config.speed_of_light,
    ))
}

/// All virtual emitters of one luminaire: the luminaire itself (order 0),
/// the deterministic first bounce and the traced higher orders.
#[derive(Debug, Clone)]
pub struct LuminaireField {
    pub luminaire: Luminaire,
    /// Emitter set per order, `orders[0]` holding only the luminaire.
    pub orders: Vec<EmitterSet>,
    pub config: ChannelConfig,
}

impl LuminaireField {
    pub fn build(
        scenario: &RoomScenario,
        luminaire_id: u32,
        config: &ChannelConfig,
        seed: u64,
    ) -> Result<Self, ChannelError> {
        config.validate(&scenario.room_box())?;
        let patches = if config.max_order >= 1 {
            partition_surfaces(scenario, config.patch_area)?
        } else {
            Vec::new()
        };
        Self::build_with_patches(scenario, luminaire_id, &patches, config, seed)
    }

    /// Same as [`LuminaireField::build`] with a precomputed partition.
    pub fn build_with_patches(
        scenario: &RoomScenario,
        luminaire_id: u32,
        patches: &[SurfacePatch],
        config: &ChannelConfig,
        seed: u64,
    ) -> Result<Self, ChannelError> {
        let luminaire = *scenario
            .luminaire(luminaire_id)
            .ok_or(ChannelError::UnknownLuminaire(luminaire_id))?;
        let mut direct = EmitterSet::new(luminaire.lambertian_order);
        direct.push(luminaire.pose(), luminaire.power, 0.0);
        let mut orders = vec![direct];
        if config.max_order >= 1 {
            let first = first_bounce_emitters(&luminaire, patches);
            let higher = cascade_emitters(&first, scenario, luminaire_id, config, seed)?;
            orders.push(first.emitters);
            orders.extend(higher);
        }
        Ok(Self {
            luminaire,
            orders,
            config: *config,
        })
    }

    pub fn order_powers(&self, rx: &OrientedPoint, aperture: &Aperture) -> OrderPowers {
        OrderPowers::from_orders(
            self.orders
                .iter()
                .map(|s| s.power_at(rx, aperture))
                .collect(),
        )
    }

    pub fn impulse_response(&self, rx: &OrientedPoint, aperture: &Aperture) -> ImpulseResponse {
        let mut ir = ImpulseResponse::new(&self.config);
        for (k, set) in self.orders.iter().enumerate() {
            ir.merge_order(k, &set.histogram_at(rx, aperture, &self.config));
        }
        ir
    }
}

/// Impulse response of one luminaire at a receiver position on the receiver plane.
pub fn simulate_impulse_response(
    scenario: &RoomScenario,
    luminaire_id: u32,
    receiver_xy: (f64, f64),
    config: &ChannelConfig,
    seed: u64,
) -> Result<ImpulseResponse, ChannelError> {
    let rx = scenario.receiver_pose(receiver_xy.0, receiver_xy.1);
    if !scenario.room_box().contains(rx.position) {
        return Err(GeometryError::InvalidArgument(format!(
            "receiver {} lies outside the room",
            rx.position
        ))
        .into());
    }
    let field = LuminaireField::build(scenario, luminaire_id, config, seed)?;
    Ok(field.impulse_response(&rx, &Aperture::photodiode(&scenario.receiver)))
}

/// Per-luminaire order powers at one receiver position.
pub fn simulate_power_report(
    scenario: &RoomScenario,
    receiver_xy: (f64, f64),
    config: &ChannelConfig,
    seed: u64,
) -> Result<PowerReport, ChannelError> {
    config.validate(&scenario.room_box())?;
    let patches = if config.max_order >= 1 {
        partition_surfaces(scenario, config.patch_area)?
    } else {
        Vec::new()
    };
    let rx = scenario.receiver_pose(receiver_xy.0, receiver_xy.1);
    let aperture = Aperture::photodiode(&scenario.receiver);
    let rows = scenario
        .luminaires
        .iter()
        .map(|l| {
            let field = LuminaireField::build_with_patches(scenario, l.id, &patches, config, seed)?;
            Ok(PowerRow {
                luminaire_id: l.id,
                x: l.position.x,
                y: l.position.y,
                powers: field.order_powers(&rx, &aperture),
            })
        })
        .collect::<Result<_, ChannelError>>()?;
    Ok(PowerReport { rows })
}
