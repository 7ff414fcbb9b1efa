//! Room, luminaire and receiver model, surface partitioning and ray casting.
//!
//! Coordinates are right-handed with `z` up: the floor is the plane `z = 0`,
//! the ceiling is `z = height`, and the walls are the planes `x = 0`,
//! `x = length`, `y = 0`, `y = width`. The room is an empty convex box, so
//! any two interior points see each other and no occlusion test is needed.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rays shorter than this are treated as not having left their origin.
const MIN_RAY_DISTANCE: f64 = 1e-12;

/// Points closer than this are considered coincident.
const MIN_LINK_DISTANCE: f64 = 1e-12;

/// Tolerance used when deciding whether a point lies on a face or in the box.
const BOUNDARY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid scenario field `{field}`: {reason}")]
    InvalidScenario { field: String, reason: String },
    #[error("degenerate ray from {origin} along {direction}: no forward intersection")]
    DegenerateRay { origin: Vec3, direction: Vec3 },
    #[error("coincident points at {0}")]
    CoincidentPoints(Vec3),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> GeometryError {
    GeometryError::InvalidScenario {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const UP: Vec3 = Vec3::new(0.0, 0.0, 1.0);
    pub const DOWN: Vec3 = Vec3::new(0.0, 0.0, -1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    #[inline]
    pub fn cross(self, other: Vec3) -> Vec3 {
        Vec3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    #[inline]
    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// Unit vector in the same direction. Returns `None` for the zero vector.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self * (1.0 / n))
    }

    pub fn is_unit(self) -> bool {
        (self.norm() - 1.0).abs() <= 1e-9
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    fn axis(self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    fn set_axis(&mut self, axis: usize, value: f64) {
        match axis {
            0 => self.x = value,
            1 => self.y = value,
            _ => self.z = value,
        }
    }
}

impl fmt::Display for Vec3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Material class of a room surface; each class has one reflectance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceRole {
    Wall,
    Ceiling,
    Floor,
}

/// One of the six bounding planes of the room.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Face {
    /// `x = 0`
    West,
    /// `x = length`
    East,
    /// `y = 0`
    South,
    /// `y = width`
    North,
    /// `z = 0`
    Floor,
    /// `z = height`
    Ceiling,
}

impl Face {
    pub const ALL: [Face; 6] = [
        Face::West,
        Face::East,
        Face::South,
        Face::North,
        Face::Floor,
        Face::Ceiling,
    ];

    pub fn role(self) -> SurfaceRole {
        match self {
            Face::Floor => SurfaceRole::Floor,
            Face::Ceiling => SurfaceRole::Ceiling,
            _ => SurfaceRole::Wall,
        }
    }

    /// Unit normal pointing into the room.
    pub fn inward_normal(self) -> Vec3 {
        match self {
            Face::West => Vec3::new(1.0, 0.0, 0.0),
            Face::East => Vec3::new(-1.0, 0.0, 0.0),
            Face::South => Vec3::new(0.0, 1.0, 0.0),
            Face::North => Vec3::new(0.0, -1.0, 0.0),
            Face::Floor => Vec3::UP,
            Face::Ceiling => Vec3::DOWN,
        }
    }

    /// Coordinate axis the face is perpendicular to.
    fn axis(self) -> usize {
        match self {
            Face::West | Face::East => 0,
            Face::South | Face::North => 1,
            Face::Floor | Face::Ceiling => 2,
        }
    }

    fn is_max_side(self) -> bool {
        matches!(self, Face::East | Face::North | Face::Ceiling)
    }

    fn from_axis(axis: usize, max_side: bool) -> Face {
        match (axis, max_side) {
            (0, false) => Face::West,
            (0, true) => Face::East,
            (1, false) => Face::South,
            (1, true) => Face::North,
            (_, false) => Face::Floor,
            (_, true) => Face::Ceiling,
        }
    }
}

/// Axis-aligned room extent with one corner at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoomBox {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl RoomBox {
    pub fn new(length: f64, width: f64, height: f64) -> Self {
        Self {
            length,
            width,
            height,
        }
    }

    fn extent(&self, axis: usize) -> f64 {
        match axis {
            0 => self.length,
            1 => self.width,
            _ => self.height,
        }
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(self.length / 2.0, self.width / 2.0, self.height / 2.0)
    }

    pub fn diagonal(&self) -> f64 {
        Vec3::new(self.length, self.width, self.height).norm()
    }

    pub fn surface_area(&self) -> f64 {
        2.0 * (self.length * self.width + self.length * self.height + self.width * self.height)
    }

    /// Whether `p` lies inside the closed box, with a small tolerance.
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| {
            let v = p.axis(a);
            v >= -BOUNDARY_TOLERANCE && v <= self.extent(a) + BOUNDARY_TOLERANCE
        })
    }

    /// Whether `p` lies on the room boundary within `tol`.
    pub fn on_boundary(&self, p: Vec3, tol: f64) -> bool {
        self.contains(p)
            && (0..3).any(|a| p.axis(a).abs() <= tol || (p.axis(a) - self.extent(a)).abs() <= tol)
    }

    /// Side lengths `(u, v)` of a face, in the order used by [`partition_surfaces`].
    fn face_dims(&self, face: Face) -> (f64, f64) {
        match face.axis() {
            0 => (self.width, self.height),
            1 => (self.length, self.height),
            _ => (self.length, self.width),
        }
    }

    fn face_point(&self, face: Face, u: f64, v: f64) -> Vec3 {
        let plane = if face.is_max_side() {
            self.extent(face.axis())
        } else {
            0.0
        };
        match face.axis() {
            0 => Vec3::new(plane, u, v),
            1 => Vec3::new(u, plane, v),
            _ => Vec3::new(u, v, plane),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reflectances {
    pub wall: f64,
    pub ceiling: f64,
    pub floor: f64,
}

impl Reflectances {
    pub fn for_role(&self, role: SurfaceRole) -> f64 {
        match role {
            SurfaceRole::Wall => self.wall,
            SurfaceRole::Ceiling => self.ceiling,
            SurfaceRole::Floor => self.floor,
        }
    }
}

impl Default for Reflectances {
    fn default() -> Self {
        Self {
            wall: 0.66,
            ceiling: 0.35,
            floor: 0.60,
        }
    }
}

/// A point-source LED with a generalized Lambertian radiation pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Luminaire {
    pub id: u32,
    pub position: Vec3,
    pub orientation: Vec3,
    pub lambertian_order: f64,
    /// Transmitted optical power in watts.
    pub power: f64,
}

impl Luminaire {
    pub const DEFAULT_HEIGHT: f64 = 3.3;
    pub const DEFAULT_POWER: f64 = 4.0;

    /// Downward-facing, first-order Lambertian LED at `(x, y, z)`.
    pub fn ceiling_mounted(id: u32, x: f64, y: f64, z: f64) -> Self {
        Self {
            id,
            position: Vec3::new(x, y, z),
            orientation: Vec3::DOWN,
            lambertian_order: 1.0,
            power: Self::DEFAULT_POWER,
        }
    }

    pub fn pose(&self) -> OrientedPoint {
        OrientedPoint::new(self.position, self.orientation)
    }
}

/// Photodiode optics: aperture, field of view, optical filter and concentrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceiverOptics {
    pub area: f64,
    pub orientation: Vec3,
    /// Field-of-view half angle in radians.
    pub fov_half_angle: f64,
    pub filter_gain: f64,
    pub concentrator_gain: f64,
}

impl Default for ReceiverOptics {
    fn default() -> Self {
        Self {
            area: 1e-4,
            orientation: Vec3::UP,
            fov_half_angle: 70f64.to_radians(),
            filter_gain: 1.0,
            concentrator_gain: 2.5481,
        }
    }
}

/// Full description of the simulated room and its optical front ends.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomScenario {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub reflectance: Reflectances,
    pub luminaires: Vec<Luminaire>,
    pub receiver: ReceiverOptics,
    pub receiver_plane_height: f64,
}

impl RoomScenario {
    pub const DEFAULT_LENGTH: f64 = 8.0;
    pub const DEFAULT_WIDTH: f64 = 8.0;
    pub const DEFAULT_HEIGHT: f64 = 3.5;
    pub const DEFAULT_RECEIVER_HEIGHT: f64 = 1.2;

    /// Empty 8 m x 8 m x 3.5 m room with default surfaces and receiver.
    pub fn empty_room() -> Self {
        Self {
            length: Self::DEFAULT_LENGTH,
            width: Self::DEFAULT_WIDTH,
            height: Self::DEFAULT_HEIGHT,
            reflectance: Reflectances::default(),
            luminaires: Vec::new(),
            receiver: ReceiverOptics::default(),
            receiver_plane_height: Self::DEFAULT_RECEIVER_HEIGHT,
        }
    }

    /// Sixteen LEDs on a 2 m grid at x, y in {1, 3, 5, 7}.
    pub fn grid16() -> Self {
        Self::with_square_grid(&[1.0, 3.0, 5.0, 7.0])
    }

    /// Twenty-five LEDs on a 1.5 m grid centred in the footprint.
    pub fn grid25() -> Self {
        Self::with_square_grid(&[1.0, 2.5, 4.0, 5.5, 7.0])
    }

    fn with_square_grid(coords: &[f64]) -> Self {
        let mut scenario = Self::empty_room();
        let mut id = 1;
        for &x in coords {
            for &y in coords {
                scenario.luminaires.push(Luminaire::ceiling_mounted(
                    id,
                    x,
                    y,
                    Luminaire::DEFAULT_HEIGHT,
                ));
                id += 1;
            }
        }
        scenario
    }

    pub fn room_box(&self) -> RoomBox {
        RoomBox::new(self.length, self.width, self.height)
    }

    pub fn luminaire(&self, id: u32) -> Option<&Luminaire> {
        self.luminaires.iter().find(|l| l.id == id)
    }

    /// Receiver pose at horizontal position `(x, y)` on the receiver plane.
    pub fn receiver_pose(&self, x: f64, y: f64) -> OrientedPoint {
        OrientedPoint::new(
            Vec3::new(x, y, self.receiver_plane_height),
            self.receiver.orientation,
        )
    }

    /// Axis-aligned rectangle spanned by the luminaire footprints.
    pub fn luminaire_span(&self) -> Option<(f64, f64, f64, f64)> {
        let mut it = self.luminaires.iter();
        let first = it.next()?;
        let init = (
            first.position.x,
            first.position.x,
            first.position.y,
            first.position.y,
        );
        Some(it.fold(init, |(x0, x1, y0, y1), l| {
            (
                x0.min(l.position.x),
                x1.max(l.position.x),
                y0.min(l.position.y),
                y1.max(l.position.y),
            )
        }))
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        for (name, v) in [
            ("room.length", self.length),
            ("room.width", self.width),
            ("room.height", self.height),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("room.rho_wall", self.reflectance.wall),
            ("room.rho_ceiling", self.reflectance.ceiling),
            ("room.rho_floor", self.reflectance.floor),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        if !(self.receiver_plane_height > 0.0 && self.receiver_plane_height < self.height) {
            return Err(invalid(
                "receiver.height",
                format!(
                    "must lie strictly between floor and ceiling, got {}",
                    self.receiver_plane_height
                ),
            ));
        }
        let rx = &self.receiver;
        if !(rx.area > 0.0 && rx.area.is_finite()) {
            return Err(invalid("receiver.area", "must be positive"));
        }
        if !(rx.fov_half_angle > 0.0 && rx.fov_half_angle <= PI / 2.0 + 1e-12) {
            return Err(invalid("receiver.fov_deg", "must lie in (0, 90] degrees"));
        }
        if !(rx.filter_gain > 0.0 && rx.filter_gain <= 1.0) {
            return Err(invalid("receiver.ts", "must lie in (0, 1]"));
        }
        if !(rx.concentrator_gain >= 1.0 && rx.concentrator_gain.is_finite()) {
            return Err(invalid("receiver.g", "must be at least 1"));
        }
        if !rx.orientation.is_unit() {
            return Err(invalid("receiver.orientation", "must be a unit vector"));
        }
        let room = self.room_box();
        for (i, l) in self.luminaires.iter().enumerate() {
            let field = |k: &str| format!("luminaires[{i}].{k}");
            if !room.contains(l.position) {
                return Err(invalid(
                    field("position"),
                    format!("luminaire {} at {} lies outside the room", l.id, l.position),
                ));
            }
            if !(l.lambertian_order >= 1.0 && l.lambertian_order.is_finite()) {
                return Err(invalid(field("m"), "Lambertian order must be at least 1"));
            }
            if !(l.power > 0.0 && l.power.is_finite()) {
                return Err(invalid(field("power"), "must be positive"));
            }
            if !l.orientation.is_unit() {
                return Err(invalid(field("orientation"), "must be a unit vector"));
            }
            if self.luminaires[..i].iter().any(|o| o.id == l.id) {
                return Err(invalid(field("id"), format!("duplicate id {}", l.id)));
            }
        }
        Ok(())
    }
}

/// Position plus the unit normal of the emitting or receiving face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedPoint {
    pub position: Vec3,
    pub normal: Vec3,
}

impl OrientedPoint {
    pub const fn new(position: Vec3, normal: Vec3) -> Self {
        Self { position, normal }
    }
}

/// A small square (or trailing partial) element of a room surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePatch {
    pub center: Vec3,
    pub normal: Vec3,
    pub area: f64,
    pub face: Face,
    pub reflectance: f64,
}

impl SurfacePatch {
    pub fn role(&self) -> SurfaceRole {
        self.face.role()
    }

    pub fn pose(&self) -> OrientedPoint {
        OrientedPoint::new(self.center, self.normal)
    }
}

/// Number of cells and the nominal cell size covering `extent`.
fn cells_along(extent: f64, side: f64) -> usize {
    let ratio = extent / side;
    // absorb rounding in e.g. 8.0 / 0.1 before taking the ceiling
    ((ratio - 1e-9 * ratio.max(1.0)).ceil() as usize).max(1)
}

fn cell_bounds(i: usize, n: usize, side: f64, extent: f64) -> (f64, f64) {
    let lo = i as f64 * side;
    let hi = if i + 1 == n {
        extent
    } else {
        ((i + 1) as f64 * side).min(extent)
    };
    (lo, hi)
}

/// Tiles all six room surfaces with square patches of area `patch_area`.
///
/// When the patch side does not divide a surface dimension, the trailing row
/// or column is made of narrower patches so the tiling never overhangs.
pub fn partition_surfaces(
    scenario: &RoomScenario,
    patch_area: f64,
) -> Result<Vec<SurfacePatch>, GeometryError> {
    let room = scenario.room_box();
    if !(patch_area > 0.0 && patch_area.is_finite()) {
        return Err(GeometryError::InvalidArgument(format!(
            "patch area must be positive, got {patch_area}"
        )));
    }
    let smallest = Face::ALL
        .iter()
        .map(|&f| {
            let (a, b) = room.face_dims(f);
            a * b
        })
        .fold(f64::INFINITY, f64::min);
    if patch_area > smallest {
        return Err(GeometryError::InvalidArgument(format!(
            "patch area {patch_area} exceeds the smallest surface ({smallest} m^2)"
        )));
    }

    let side = patch_area.sqrt();
    let mut patches = Vec::new();
    for face in Face::ALL {
        let (du, dv) = room.face_dims(face);
        let (nu, nv) = (cells_along(du, side), cells_along(dv, side));
        let reflectance = scenario.reflectance.for_role(face.role());
        let normal = face.inward_normal();
        patches.reserve(nu * nv);
        for i in 0..nu {
            let (u0, u1) = cell_bounds(i, nu, side, du);
            for j in 0..nv {
                let (v0, v1) = cell_bounds(j, nv, side, dv);
                patches.push(SurfacePatch {
                    center: room.face_point(face, 0.5 * (u0 + u1), 0.5 * (v0 + v1)),
                    normal,
                    area: (u1 - u0) * (v1 - v0),
                    face,
                    reflectance,
                });
            }
        }
    }
    Ok(patches)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub point: Vec3,
    pub face: Face,
    pub distance: f64,
}

/// Nearest forward intersection of a ray launched from inside (or on) the room
/// with the room boundary.
///
/// A face the origin lies on is never reported because a valid direction
/// points away from it into the room.
pub fn ray_room_intersection(
    origin: Vec3,
    direction: Vec3,
    room: &RoomBox,
) -> Result<RayHit, GeometryError> {
    let mut best: Option<(f64, Face)> = None;
    for axis in 0..3 {
        let d = direction.axis(axis);
        if d == 0.0 {
            continue;
        }
        let max_side = d > 0.0;
        let plane = if max_side { room.extent(axis) } else { 0.0 };
        let t = (plane - origin.axis(axis)) / d;
        if best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, Face::from_axis(axis, max_side)));
        }
    }
    match best {
        Some((t, face)) if t > MIN_RAY_DISTANCE && t.is_finite() => {
            let mut point = origin + direction * t;
            for axis in 0..3 {
                point.set_axis(axis, point.axis(axis).clamp(0.0, room.extent(axis)));
            }
            let plane = if face.is_max_side() {
                room.extent(face.axis())
            } else {
                0.0
            };
            point.set_axis(face.axis(), plane);
            Ok(RayHit {
                point,
                face,
                distance: t,
            })
        }
        _ => Err(GeometryError::DegenerateRay { origin, direction }),
    }
}

/// Distance and the two link cosines between an emitter and a receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkGeometry {
    pub distance: f64,
    /// Cosine of the irradiance angle at the source.
    pub cos_phi: f64,
    /// Cosine of the incidence angle at the destination.
    pub cos_psi: f64,
}

pub fn link_geometry(
    src: &OrientedPoint,
    dst: &OrientedPoint,
) -> Result<LinkGeometry, GeometryError> {
    let delta = dst.position - src.position;
    let distance = delta.norm();
    if distance <= MIN_LINK_DISTANCE {
        return Err(GeometryError::CoincidentPoints(src.position));
    }
    let unit = delta * (1.0 / distance);
    Ok(LinkGeometry {
        distance,
        cos_phi: src.normal.dot(unit).clamp(-1.0, 1.0),
        cos_psi: (-dst.normal.dot(unit)).clamp(-1.0, 1.0),
    })
}

/// Orthonormal basis with `normal` as the local z axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub tangent: Vec3,
    pub bitangent: Vec3,
    pub normal: Vec3,
}

impl Frame {
    pub fn from_normal(normal: Vec3) -> Self {
        // Duff et al. branchless ONB
        let sign = 1f64.copysign(normal.z);
        let a = -1.0 / (sign + normal.z);
        let b = normal.x * normal.y * a;
        Self {
            tangent: Vec3::new(
                1.0 + sign * normal.x * normal.x * a,
                sign * b,
                -sign * normal.x,
            ),
            bitangent: Vec3::new(b, sign + normal.y * normal.y * a, -normal.y),
            normal,
        }
    }

    /// Maps local coordinates to world space.
    #[inline]
    pub fn to_world(&self, local: Vec3) -> Vec3 {
        self.tangent * local.x + self.bitangent * local.y + self.normal * local.z
    }
}
