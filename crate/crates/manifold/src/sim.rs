//! Deterministic fixed-timestep kinematic simulator for three vehicles on a
//! grid-discretized multi-lane road.
//!
//! The ego follows its lane at cruise speed with an emergency-brake reflex.
//! The adversary and the independent adversary each follow a `HybridPath`:
//! the path's moves define a polyline of grid-cell waypoints, and the
//! vehicle travels along that polyline with a scalar speed integrated from
//! the path's per-step accelerations (clamped to `[0, SPEED_MAX]`). A
//! vehicle that reaches the end of its route parks there.
//!
//! `run_scenario` is a pure function of its inputs: no RNG is involved and
//! traces are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::HybridPath;

/// Longitudinal speed clamp for all vehicles (m/s).
pub const SPEED_MAX: f64 = 40.0;
/// Ego emergency deceleration (m/s²).
pub const BRAKE_DECEL: f64 = 6.0;
/// Ego brakes when a vehicle is within this many vehicle-lengths directly
/// ahead (center-to-center).
pub const BRAKE_TRIGGER_LENGTHS: f64 = 1.5;
/// Ego acceleration when recovering toward cruise speed (m/s²).
pub const CRUISE_RECOVERY_ACCEL: f64 = 2.0;

/// Planar point/vector in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Vec2) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(std::f64::consts::TAU);
    if r > std::f64::consts::PI {
        r - std::f64::consts::TAU
    } else {
        r
    }
}

/// Grid discretization of the road: cells are one vehicle-length long and
/// one half-lane wide, so each lane spans two lateral cell rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMap {
    pub lanes: usize,
    /// Cell length in meters (approximately one vehicle length).
    pub cell_length: f64,
    /// Cell width in meters (one half of a lane).
    pub cell_width: f64,
    /// Road length in cells.
    pub road_length: usize,
}

impl GridMap {
    pub fn validate(&self) -> Result<()> {
        if self.lanes < 2 {
            return Err(Error::InvalidParameter {
                name: "grid.lanes".into(),
                reason: format!("{} lanes; at least 2 required", self.lanes),
            });
        }
        if self.cell_length <= 0.0 || self.cell_width <= 0.0 || self.road_length == 0 {
            return Err(Error::InvalidParameter {
                name: "grid".into(),
                reason: "cell dimensions and road length must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn lane_width(&self) -> f64 {
        2.0 * self.cell_width
    }

    /// Lateral cell rows (two per lane).
    pub fn lateral_cells(&self) -> usize {
        2 * self.lanes
    }

    pub fn length_m(&self) -> f64 {
        self.road_length as f64 * self.cell_length
    }

    pub fn width_m(&self) -> f64 {
        self.lanes as f64 * self.lane_width()
    }

    /// Center of cell `(cx, cy)`; `cx` runs along the road, `cy` laterally.
    pub fn cell_center(&self, cx: i64, cy: i64) -> Vec2 {
        Vec2::new(
            (cx as f64 + 0.5) * self.cell_length,
            (cy as f64 + 0.5) * self.cell_width,
        )
    }

    pub fn lane_center_y(&self, lane: usize) -> f64 {
        (lane as f64 + 0.5) * self.lane_width()
    }

    pub fn cell_on_map(&self, cx: i64, cy: i64) -> bool {
        cx >= 0
            && (cx as usize) < self.road_length
            && cy >= 0
            && (cy as usize) < self.lateral_cells()
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= 0.0 && p.x <= self.length_m() && p.y >= 0.0 && p.y <= self.width_m()
    }
}

/// Axis extents of a vehicle's oriented bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub length: f64,
    pub width: f64,
}

/// Full kinematic state of one vehicle at one sample time. `vel`/`accel`/
/// `ang_vel` are `[x, y, z]`; the z components of velocity/acceleration and
/// the x/y components of angular velocity are fixed at zero in this planar
/// simulator but kept so the downstream feature schema is complete.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: Vec2,
    pub velocity: [f64; 3],
    pub acceleration: [f64; 3],
    pub angular_velocity: [f64; 3],
    pub heading: f64,
    pub bbox: BBox,
}

/// Ego routing: it holds a lane at cruise speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoRoute {
    pub lane: usize,
    pub cruise_speed: f64,
    pub start_x: f64,
    /// Emergency-brake reflex; disable to model a non-reacting ego.
    pub brake_reflex: bool,
}

/// How the independent adversary is driven during a search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum IndAdvBehavior {
    /// Sampled from its own hybrid distribution inside the search batch.
    CeControlled,
    /// A fixed encroachment profile, used by tests and simple scenarios.
    Scripted { moves: Vec<usize>, accels: Vec<f64> },
}

impl IndAdvBehavior {
    pub fn scripted_path(&self) -> Option<HybridPath> {
        match self {
            IndAdvBehavior::CeControlled => None,
            IndAdvBehavior::Scripted { moves, accels } => {
                Some(HybridPath::new(moves.clone(), accels.clone()).expect("scripted path"))
            }
        }
    }
}

/// Complete scenario description consumed by `run_scenario`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub grid: GridMap,
    pub ego: EgoRoute,
    /// Adversary start cell `(cx, cy)`.
    pub adversary_start: (i64, i64),
    pub adversary_speed: f64,
    pub ind_adv_start: (i64, i64),
    pub ind_adv_speed: f64,
    pub ind_adv_behavior: IndAdvBehavior,
    /// Simulation timestep in seconds; 0.05 or 0.1.
    pub timestep: f64,
    /// Scenario horizon in seconds.
    pub horizon: f64,
    /// Path steps over the horizon (one grid move per step).
    pub path_steps: usize,
    /// Extra margin added to bounding boxes during collision checks (m).
    pub collision_inflation: f64,
    pub vehicle: BBox,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let dt_ok = (self.timestep - 0.05).abs() < 1e-12 || (self.timestep - 0.1).abs() < 1e-12;
        if !dt_ok {
            return Err(Error::InvalidParameter {
                name: "scenario.timestep".into(),
                reason: format!("{} s; must be 0.05 or 0.1", self.timestep),
            });
        }
        if self.horizon <= 0.0 || self.path_steps == 0 {
            return Err(Error::InvalidParameter {
                name: "scenario.horizon".into(),
                reason: "horizon and path_steps must be positive".into(),
            });
        }
        if self.ego.lane >= self.grid.lanes {
            return Err(Error::InvalidParameter {
                name: "scenario.ego.lane".into(),
                reason: format!("lane {} outside {}-lane road", self.ego.lane, self.grid.lanes),
            });
        }
        for (name, (cx, cy)) in [
            ("adversary_start", self.adversary_start),
            ("ind_adv_start", self.ind_adv_start),
        ] {
            if !self.grid.cell_on_map(cx, cy) {
                return Err(Error::InvalidParameter {
                    name: format!("scenario.{name}"),
                    reason: format!("cell ({cx}, {cy}) off the map"),
                });
            }
        }
        if self.vehicle.length <= 0.0 || self.vehicle.width <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "scenario.vehicle".into(),
                reason: "bounding box must be positive".into(),
            });
        }
        if self.collision_inflation < 0.0 {
            return Err(Error::InvalidParameter {
                name: "scenario.collision_inflation".into(),
                reason: "inflation must be non-negative".into(),
            });
        }
        Ok(())
    }

    /// Duration of one path step in seconds.
    pub fn step_duration(&self) -> f64 {
        self.horizon / self.path_steps as f64
    }

    /// The reference scenario used throughout the tests and the guide: a
    /// three-lane road, the ego cruising in the middle lane, the adversary
    /// well ahead in the left lane, and the independent adversary further
    /// ahead in the same lane. The longitudinal gap is sized so that the
    /// ego cannot reach the adversary before t = 7 s even if the adversary
    /// stops dead, which keeps early-warning windows of up to five seconds
    /// extractable from every collision trace.
    pub fn reference() -> Self {
        Self {
            grid: GridMap {
                lanes: 3,
                cell_length: 4.5,
                cell_width: 1.75,
                road_length: 60,
            },
            ego: EgoRoute {
                lane: 1,
                cruise_speed: 10.0,
                start_x: 6.75,
                brake_reflex: true,
            },
            adversary_start: (18, 4),
            adversary_speed: 6.0,
            ind_adv_start: (22, 4),
            ind_adv_speed: 5.0,
            ind_adv_behavior: IndAdvBehavior::CeControlled,
            timestep: 0.1,
            horizon: 10.0,
            path_steps: 10,
            collision_inflation: 0.0,
            vehicle: BBox {
                length: 4.5,
                width: 2.0,
            },
        }
    }
}

/// One recorded timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSample {
    pub t: f64,
    pub ego: VehicleState,
    pub adv: VehicleState,
    pub ind_adv: VehicleState,
}

/// Telemetry of one scenario run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub timestep: f64,
    pub samples: Vec<TraceSample>,
    /// Ego-adversary collision.
    pub collision: bool,
    pub t_collision: Option<f64>,
    /// Minimum ego-adversary center distance over the trace (m).
    pub min_distance: f64,
    /// A path drove off the map; the trace is truncated at that point.
    pub off_road: bool,
}

impl SimTrace {
    pub fn end_time(&self) -> f64 {
        self.samples.last().map(|s| s.t).unwrap_or(0.0)
    }

    /// Sample whose time is `t` (within 1e-9); times are exact multiples of
    /// the timestep so no interpolation is performed.
    pub fn sample_at(&self, t: f64) -> Result<&TraceSample> {
        let idx = (t / self.timestep).round() as i64;
        let sample = (idx >= 0)
            .then(|| self.samples.get(idx as usize))
            .flatten();
        match sample {
            Some(s) if (s.t - t).abs() < 1e-6 => Ok(s),
            _ => Err(Error::WindowOutOfRange {
                start: t,
                end: t,
                trace_end: self.end_time(),
            }),
        }
    }
}

/// Separating-axis overlap test between two oriented bounding boxes, each
/// inflated by `inflation` on every side. Touching boxes count as
/// overlapping (closed comparison).
pub fn detect_collision(a: &VehicleState, b: &VehicleState, inflation: f64) -> bool {
    let half_a = (a.bbox.length / 2.0 + inflation, a.bbox.width / 2.0 + inflation);
    let half_b = (b.bbox.length / 2.0 + inflation, b.bbox.width / 2.0 + inflation);
    let ax = (a.heading.cos(), a.heading.sin());
    let ay = (-a.heading.sin(), a.heading.cos());
    let bx = (b.heading.cos(), b.heading.sin());
    let by = (-b.heading.sin(), b.heading.cos());
    let d = (b.position.x - a.position.x, b.position.y - a.position.y);

    for axis in [ax, ay, bx, by] {
        let dist = (d.0 * axis.0 + d.1 * axis.1).abs();
        let ra = half_a.0 * (ax.0 * axis.0 + ax.1 * axis.1).abs()
            + half_a.1 * (ay.0 * axis.0 + ay.1 * axis.1).abs();
        let rb = half_b.0 * (bx.0 * axis.0 + bx.1 * axis.1).abs()
            + half_b.1 * (by.0 * axis.0 + by.1 * axis.1).abs();
        if dist > ra + rb {
            return false;
        }
    }
    true
}

/// Center distance between two vehicles and the bearing of `b` from `a`'s
/// heading, wrapped to `(-pi, pi]`.
pub fn relative_geometry(a: &VehicleState, b: &VehicleState) -> (f64, f64) {
    let dx = b.position.x - a.position.x;
    let dy = b.position.y - a.position.y;
    let distance = (dx * dx + dy * dy).sqrt();
    let angle = wrap_angle(dy.atan2(dx) - a.heading);
    (distance, angle)
}

/// Piecewise-linear route with arc-length lookup.
struct Polyline {
    start: Vec2,
    /// (segment start, unit direction, length); zero-length segments skipped.
    segments: Vec<(Vec2, Vec2, f64)>,
    total_len: f64,
}

impl Polyline {
    fn from_path(grid: &GridMap, start_cell: (i64, i64), path: &HybridPath) -> Self {
        let mut points = vec![grid.cell_center(start_cell.0, start_cell.1)];
        let (mut cx, mut cy) = start_cell;
        for &m in &path.moves {
            let (dx, dy) = crate::hybrid::Move::from_index(m)
                .expect("move index in range")
                .offset();
            cx += dx;
            cy += dy;
            points.push(grid.cell_center(cx, cy));
        }
        let mut segments = Vec::new();
        let mut total_len = 0.0;
        for w in points.windows(2) {
            let len = w[0].distance(w[1]);
            if len > 0.0 {
                let dir = Vec2::new((w[1].x - w[0].x) / len, (w[1].y - w[0].y) / len);
                segments.push((w[0], dir, len));
                total_len += len;
            }
        }
        Self {
            start: points[0],
            segments,
            total_len,
        }
    }

    /// Position and heading at arc length `s` (clamped to the route).
    fn at(&self, s: f64) -> (Vec2, Option<f64>) {
        if self.segments.is_empty() {
            return (self.start, None);
        }
        let mut remaining = s.clamp(0.0, self.total_len);
        for (start, dir, len) in &self.segments {
            if remaining <= *len {
                let p = Vec2::new(start.x + dir.x * remaining, start.y + dir.y * remaining);
                return (p, Some(dir.y.atan2(dir.x)));
            }
            remaining -= len;
        }
        let (start, dir, len) = self.segments.last().unwrap();
        (
            Vec2::new(start.x + dir.x * len, start.y + dir.y * len),
            Some(dir.y.atan2(dir.x)),
        )
    }
}

/// Follows a polyline at a speed integrated from path accelerations; parks
/// at the end of the route.
struct PathFollower {
    route: Polyline,
    s: f64,
    speed: f64,
    parked: bool,
    heading: f64,
}

impl PathFollower {
    fn new(grid: &GridMap, start_cell: (i64, i64), path: &HybridPath, initial_speed: f64) -> Self {
        let route = Polyline::from_path(grid, start_cell, path);
        let heading = route.at(0.0).1.unwrap_or(0.0);
        let parked = route.total_len == 0.0;
        Self {
            route,
            s: 0.0,
            speed: if parked { 0.0 } else { initial_speed },
            parked,
            heading,
        }
    }

    fn step(&mut self, accel: f64, dt: f64) {
        if self.parked {
            return;
        }
        self.speed = (self.speed + accel * dt).clamp(0.0, SPEED_MAX);
        self.s += self.speed * dt;
        if self.s >= self.route.total_len {
            self.s = self.route.total_len;
            self.speed = 0.0;
            self.parked = true;
        }
        if let (_, Some(h)) = self.route.at(self.s) {
            self.heading = h;
        }
    }

    fn position(&self) -> Vec2 {
        self.route.at(self.s).0
    }
}

fn commanded_accel(path: &HybridPath, step_duration: f64, t: f64) -> f64 {
    let idx = ((t / step_duration).floor() as usize).min(path.horizon() - 1);
    path.accels[idx]
}

/// Ego reflex: brake hard when any vehicle is directly ahead within the
/// trigger distance, otherwise recover toward cruise speed.
fn ego_accel(cfg: &ScenarioConfig, ego_pos: Vec2, ego_speed: f64, others: &[Vec2]) -> f64 {
    if cfg.ego.brake_reflex {
        let trigger = BRAKE_TRIGGER_LENGTHS * cfg.vehicle.length;
        let half_lane = cfg.grid.lane_width() / 2.0;
        let blocked = others.iter().any(|p| {
            let dx = p.x - ego_pos.x;
            let dy = (p.y - ego_pos.y).abs();
            dx > 0.0 && dx <= trigger && dy <= half_lane
        });
        if blocked {
            return -BRAKE_DECEL;
        }
    }
    if ego_speed < cfg.ego.cruise_speed {
        CRUISE_RECOVERY_ACCEL
    } else {
        0.0
    }
}

fn vehicle_state(
    pos: Vec2,
    prev: Option<&VehicleState>,
    initial_velocity: [f64; 3],
    heading: f64,
    dt: f64,
    bbox: BBox,
) -> VehicleState {
    match prev {
        None => VehicleState {
            position: pos,
            velocity: initial_velocity,
            acceleration: [0.0; 3],
            angular_velocity: [0.0; 3],
            heading,
            bbox,
        },
        Some(p) => {
            let velocity = [
                (pos.x - p.position.x) / dt,
                (pos.y - p.position.y) / dt,
                0.0,
            ];
            let acceleration = [
                (velocity[0] - p.velocity[0]) / dt,
                (velocity[1] - p.velocity[1]) / dt,
                0.0,
            ];
            let ang_z = wrap_angle(heading - p.heading) / dt;
            VehicleState {
                position: pos,
                velocity,
                acceleration,
                angular_velocity: [0.0, 0.0, ang_z],
                heading,
                bbox,
            }
        }
    }
}

/// Run one scenario to completion, collision, or off-road truncation.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    adv_path: &HybridPath,
    ind_adv_path: &HybridPath,
) -> Result<SimTrace> {
    cfg.validate()?;
    for (name, path) in [("adversary", adv_path), ("independent adversary", ind_adv_path)] {
        if path.horizon() != cfg.path_steps {
            return Err(Error::InvalidParameter {
                name: format!("{name} path"),
                reason: format!(
                    "path has {} steps, scenario expects {}",
                    path.horizon(),
                    cfg.path_steps
                ),
            });
        }
    }

    let dt = cfg.timestep;
    let n_steps = (cfg.horizon / dt).round() as usize;
    let step_dur = cfg.step_duration();
    let bbox = cfg.vehicle;

    let mut adv = PathFollower::new(&cfg.grid, cfg.adversary_start, adv_path, cfg.adversary_speed);
    let mut ind = PathFollower::new(&cfg.grid, cfg.ind_adv_start, ind_adv_path, cfg.ind_adv_speed);
    let mut ego_x = cfg.ego.start_x;
    let mut ego_speed = cfg.ego.cruise_speed;
    let ego_y = cfg.grid.lane_center_y(cfg.ego.lane);

    let ego0 = vehicle_state(
        Vec2::new(ego_x, ego_y),
        None,
        [ego_speed, 0.0, 0.0],
        0.0,
        dt,
        bbox,
    );
    let adv0 = vehicle_state(
        adv.position(),
        None,
        [
            adv.speed * adv.heading.cos(),
            adv.speed * adv.heading.sin(),
            0.0,
        ],
        adv.heading,
        dt,
        bbox,
    );
    let ind0 = vehicle_state(
        ind.position(),
        None,
        [
            ind.speed * ind.heading.cos(),
            ind.speed * ind.heading.sin(),
            0.0,
        ],
        ind.heading,
        dt,
        bbox,
    );

    let mut collision = detect_collision(&ego0, &adv0, cfg.collision_inflation);
    let mut t_collision = collision.then_some(0.0);
    let mut min_distance = ego0.position.distance(adv0.position);
    let mut off_road = false;

    let mut samples = vec![TraceSample {
        t: 0.0,
        ego: ego0,
        adv: adv0,
        ind_adv: ind0,
    }];

    if !collision {
        for k in 1..=n_steps {
            let t_prev = (k - 1) as f64 * dt;
            let t = k as f64 * dt;
            let prev = samples.last().unwrap().clone();

            let accel = ego_accel(
                cfg,
                prev.ego.position,
                ego_speed,
                &[prev.adv.position, prev.ind_adv.position],
            );
            ego_speed = (ego_speed + accel * dt).clamp(0.0, SPEED_MAX);
            ego_x += ego_speed * dt;

            adv.step(commanded_accel(adv_path, step_dur, t_prev), dt);
            ind.step(commanded_accel(ind_adv_path, step_dur, t_prev), dt);

            let ego_state = vehicle_state(Vec2::new(ego_x, ego_y), Some(&prev.ego), [0.0; 3], 0.0, dt, bbox);
            let adv_state =
                vehicle_state(adv.position(), Some(&prev.adv), [0.0; 3], adv.heading, dt, bbox);
            let ind_state =
                vehicle_state(ind.position(), Some(&prev.ind_adv), [0.0; 3], ind.heading, dt, bbox);

            min_distance = min_distance.min(ego_state.position.distance(adv_state.position));
            let hit = detect_collision(&ego_state, &adv_state, cfg.collision_inflation);
            let outside =
                !cfg.grid.contains(adv_state.position) || !cfg.grid.contains(ind_state.position);

            samples.push(TraceSample {
                t,
                ego: ego_state,
                adv: adv_state,
                ind_adv: ind_state,
            });

            if hit {
                collision = true;
                t_collision = Some(t);
                break;
            }
            if outside {
                off_road = true;
                break;
            }
        }
    }

    Ok(SimTrace {
        timestep: dt,
        samples,
        collision,
        t_collision,
        min_distance,
        off_road,
    })
}

// ── trace file format ─────────────────────────────────────────────────────

/// Column names for one vehicle, in file order.
const VEHICLE_COLUMNS: [&str; 12] = [
    "x", "y", "heading", "vel_x", "vel_y", "vel_z", "accel_x", "accel_y", "accel_z", "ang_vel_x",
    "ang_vel_y", "ang_vel_z",
];

/// Header of the columnar trace format: `t`, then twelve kinematic columns
/// for each of `ego`, `adv`, `ind_adv`.
pub fn trace_header() -> String {
    let mut cols = vec!["t".to_string()];
    for vehicle in ["ego", "adv", "ind_adv"] {
        for c in VEHICLE_COLUMNS {
            cols.push(format!("{vehicle}_{c}"));
        }
    }
    cols.join(",")
}

fn push_vehicle(fields: &mut Vec<String>, v: &VehicleState) {
    fields.push(format!("{:?}", v.position.x));
    fields.push(format!("{:?}", v.position.y));
    fields.push(format!("{:?}", v.heading));
    for arr in [v.velocity, v.acceleration, v.angular_velocity] {
        for c in arr {
            fields.push(format!("{c:?}"));
        }
    }
}

impl SimTrace {
    /// Serialize to the columnar text format: `#`-prefixed metadata lines, a
    /// header row, then one row per timestep.
    pub fn to_csv(&self, bbox: BBox) -> String {
        let mut out = String::from("# manifold-trace v1\n");
        out.push_str(&format!(
            "# timestep={:?} collision={} t_collision={} min_distance={:?} off_road={} bbox_length={:?} bbox_width={:?}\n",
            self.timestep,
            self.collision,
            self.t_collision.map(|t| format!("{t:?}")).unwrap_or_else(|| "none".into()),
            self.min_distance,
            self.off_road,
            bbox.length,
            bbox.width,
        ));
        out.push_str(&trace_header());
        out.push('\n');
        for s in &self.samples {
            let mut fields = vec![format!("{:?}", s.t)];
            push_vehicle(&mut fields, &s.ego);
            push_vehicle(&mut fields, &s.adv);
            push_vehicle(&mut fields, &s.ind_adv);
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<SimTrace> {
        let malformed = |detail: &str| Error::Malformed {
            what: "trace file".into(),
            detail: detail.into(),
        };
        let mut timestep = None;
        let mut collision = false;
        let mut t_collision = None;
        let mut min_distance = f64::INFINITY;
        let mut off_road = false;
        let mut bbox = BBox {
            length: 4.5,
            width: 2.0,
        };
        let mut samples = Vec::new();
        let mut seen_header = false;

        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                for kv in meta.split_whitespace() {
                    if let Some((k, v)) = kv.split_once('=') {
                        match k {
                            "timestep" => timestep = Some(v.parse().map_err(|_| malformed("bad timestep"))?),
                            "collision" => collision = v == "true",
                            "t_collision" if v != "none" => {
                                t_collision = Some(v.parse().map_err(|_| malformed("bad t_collision"))?)
                            }
                            "min_distance" => {
                                min_distance = v.parse().map_err(|_| malformed("bad min_distance"))?
                            }
                            "off_road" => off_road = v == "true",
                            "bbox_length" => {
                                bbox.length = v.parse().map_err(|_| malformed("bad bbox_length"))?
                            }
                            "bbox_width" => {
                                bbox.width = v.parse().map_err(|_| malformed("bad bbox_width"))?
                            }
                            _ => {}
                        }
                    }
                }
                continue;
            }
            if !seen_header {
                if line != trace_header() {
                    return Err(malformed("unexpected column header"));
                }
                seen_header = true;
                continue;
            }
            let values: Vec<f64> = line
                .split(',')
                .map(|f| f.parse().map_err(|_| malformed("non-numeric field")))
                .collect::<Result<_>>()?;
            if values.len() != 37 {
                return Err(malformed(&format!("row has {} fields, expected 37", values.len())));
            }
            let vehicle = |o: usize| VehicleState {
                position: Vec2::new(values[o], values[o + 1]),
                heading: values[o + 2],
                velocity: [values[o + 3], values[o + 4], values[o + 5]],
                acceleration: [values[o + 6], values[o + 7], values[o + 8]],
                angular_velocity: [values[o + 9], values[o + 10], values[o + 11]],
                bbox,
            };
            samples.push(TraceSample {
                t: values[0],
                ego: vehicle(1),
                adv: vehicle(13),
                ind_adv: vehicle(25),
            });
        }
        let timestep = timestep.ok_or_else(|| malformed("missing timestep metadata"))?;
        if samples.is_empty() {
            return Err(malformed("no samples"));
        }
        Ok(SimTrace {
            timestep,
            samples,
            collision,
            t_collision,
            min_distance,
            off_road,
        })
    }
}
