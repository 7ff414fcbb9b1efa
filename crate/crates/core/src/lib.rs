//! Indoor visible-light channel simulation and received-signal-strength
//! positioning.
//!
//! - [`geometry`]: room, luminaires, receiver optics, surface patches, ray casting.
//! - [`channel`]: line-of-sight gain and multipath impulse responses.
//! - [`positioning`]: ranging from received power, linear and nonlinear lateration.
//! - [`experiment`]: grid sweeps, region statistics and the calibration suite.
//! - [`io`]: scenario files, CSV/JSON output and the on-disk power cache.

pub mod channel;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod positioning;

pub use channel::{
    ChannelConfig, ChannelError, ImpulseResponse, LuminaireField, OrderPowers, PowerReport,
    PowerRow, SeededRng,
};
pub use experiment::{
    evaluate_grid, region_stats, run_scenario_suite, ErrorMap, ErrorStats, GridSpec, NoiseModel,
    RegionPartition, SuiteConfig, SuiteRow,
};
pub use geometry::{
    GeometryError, Luminaire, OrientedPoint, ReceiverOptics, RoomScenario, SurfacePatch, Vec3,
};
pub use io::{IoError, PowerCache, ScenarioBundle};
pub use positioning::{
    locate, LocateOptions, Method, PositionEstimate, PositioningError, Selection,
};
