//! Deterministic closed-loop simulation: analytic ground-truth worlds, a
//! raycast depth sensor on a uniform angular lattice, a vehicle that plays
//! the committed trajectory exactly, and the multi-rate loop that ties them
//! together (sensor faster than replanning, replanning faster than map
//! fusion). The rate separation is what creates the stale-map window the
//! cloud buffer exists to cover — no artificial latency is injected.
//!
//! Worlds are lists of analytic shapes (vertical cylinders and axis-aligned
//! slabs), so collision ground truth and depth rendering are exact rather
//! than rasterized. A `signed_distance`/`raycast` pair per shape feeds the
//! sensor, the per-step safety check, and the known-map oracle.

use crate::clouds::{primitive_clear_counted, CloudBuffer, SweptBody};
use crate::map::{DepthScan, SlidingGrid};
use crate::primitives::{FlatState, Limits, SolveOptions, TerminalWeight};
use crate::replan::{ReplanConfig, ReplanEngine, ReplanStatus, StageTimings};
use nalgebra::{Point3, Vector2, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BinaryHeap;
use std::sync::OnceLock;
use std::time::Instant;

// ---------------------------------------------------------------------------
// Ground-truth geometry
// ---------------------------------------------------------------------------

/// Axis-aligned box, `min` strictly below `max` in every coordinate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Aabb {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl Aabb {
    pub fn new(min: Point3<f64>, max: Point3<f64>) -> Self {
        Aabb { min, max }
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Signed distance: negative inside, positive outside.
    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        let mut outside2 = 0.0;
        let mut inside = f64::NEG_INFINITY;
        for i in 0..3 {
            let lo = self.min[i] - p[i];
            let hi = p[i] - self.max[i];
            let d = lo.max(hi); // negative when inside this slab pair
            if d > 0.0 {
                outside2 += d * d;
            } else {
                inside = inside.max(d);
            }
        }
        if outside2 > 0.0 {
            outside2.sqrt()
        } else {
            inside
        }
    }

    /// Earliest `t >= 0` where the ray enters the box (0 if starting inside).
    pub fn raycast(&self, o: &Point3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let mut t_near = 0.0f64;
        let mut t_far = f64::INFINITY;
        for i in 0..3 {
            if d[i].abs() < 1e-15 {
                if o[i] < self.min[i] || o[i] > self.max[i] {
                    return None;
                }
            } else {
                let inv = 1.0 / d[i];
                let (t0, t1) = {
                    let a = (self.min[i] - o[i]) * inv;
                    let b = (self.max[i] - o[i]) * inv;
                    if a < b {
                        (a, b)
                    } else {
                        (b, a)
                    }
                };
                t_near = t_near.max(t0);
                t_far = t_far.min(t1);
                if t_near > t_far {
                    return None;
                }
            }
        }
        Some(t_near)
    }
}

/// One analytic obstacle.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub enum Shape {
    /// Vertical cylinder spanning `z_min..z_max`.
    Cylinder {
        cx: f64,
        cy: f64,
        radius: f64,
        z_min: f64,
        z_max: f64,
    },
    /// Axis-aligned box (walls, floor and ceiling slabs).
    Slab(Aabb),
}

impl Shape {
    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        match *self {
            Shape::Cylinder {
                cx,
                cy,
                radius,
                z_min,
                z_max,
            } => {
                let dr = (Vector2::new(p.x - cx, p.y - cy)).norm() - radius;
                let dz = (z_min - p.z).max(p.z - z_max);
                let dro = dr.max(0.0);
                let dzo = dz.max(0.0);
                if dro > 0.0 || dzo > 0.0 {
                    (dro * dro + dzo * dzo).sqrt()
                } else {
                    dr.max(dz)
                }
            }
            Shape::Slab(b) => b.signed_distance(p),
        }
    }

    /// Earliest `t >= 0` where the ray meets the solid (0 if inside).
    pub fn raycast(&self, o: &Point3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match *self {
            Shape::Cylinder {
                cx,
                cy,
                radius,
                z_min,
                z_max,
            } => {
                if self.signed_distance(o) <= 0.0 {
                    return Some(0.0);
                }
                let mut best = f64::INFINITY;
                // Lateral surface: quadratic in the xy-plane.
                let ox = o.x - cx;
                let oy = o.y - cy;
                let a = d.x * d.x + d.y * d.y;
                if a > 1e-15 {
                    let b = ox * d.x + oy * d.y;
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / a, (-b + s) / a] {
                            if t >= 0.0 && t < best {
                                let z = o.z + t * d.z;
                                if z >= z_min && z <= z_max {
                                    best = t;
                                }
                            }
                        }
                    }
                }
                // End caps.
                if d.z.abs() > 1e-15 {
                    for zc in [z_min, z_max] {
                        let t = (zc - o.z) / d.z;
                        if t >= 0.0 && t < best {
                            let x = ox + t * d.x;
                            let y = oy + t * d.y;
                            if x * x + y * y <= radius * radius {
                                best = t;
                            }
                        }
                    }
                }
                if best.is_finite() {
                    Some(best)
                } else {
                    None
                }
            }
            Shape::Slab(b) => b.raycast(o, d),
        }
    }

    /// Conservative bounding box of the solid.
    pub fn aabb(&self) -> Aabb {
        match *self {
            Shape::Cylinder {
                cx,
                cy,
                radius,
                z_min,
                z_max,
            } => Aabb::new(
                Point3::new(cx - radius, cy - radius, z_min),
                Point3::new(cx + radius, cy + radius, z_max),
            ),
            Shape::Slab(b) => b,
        }
    }
}

/// Uniform xy-bucket index over the cylinders so a depth ray tests only the
/// shapes near its footprint; slabs (few, huge) are tested unconditionally.
#[derive(Debug)]
struct RayIndex {
    cell: f64,
    x0: f64,
    y0: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<u32>>,
    globals: Vec<u32>,
}

impl RayIndex {
    fn build(world: &World) -> Self {
        let cell = 2.0;
        let x0 = world.bounds.min.x - 1.0;
        let y0 = world.bounds.min.y - 1.0;
        let nx = (((world.bounds.max.x + 1.0 - x0) / cell).ceil() as usize).max(1);
        let ny = (((world.bounds.max.y + 1.0 - y0) / cell).ceil() as usize).max(1);
        let mut buckets = vec![Vec::new(); nx * ny];
        let mut globals = Vec::new();
        for (i, s) in world.shapes.iter().enumerate() {
            match s {
                Shape::Cylinder { .. } => {
                    let b = s.aabb();
                    let ix0 = (((b.min.x - x0) / cell).floor() as isize).clamp(0, nx as isize - 1);
                    let ix1 = (((b.max.x - x0) / cell).floor() as isize).clamp(0, nx as isize - 1);
                    let iy0 = (((b.min.y - y0) / cell).floor() as isize).clamp(0, ny as isize - 1);
                    let iy1 = (((b.max.y - y0) / cell).floor() as isize).clamp(0, ny as isize - 1);
                    for ix in ix0..=ix1 {
                        for iy in iy0..=iy1 {
                            buckets[iy as usize * nx + ix as usize].push(i as u32);
                        }
                    }
                }
                Shape::Slab(_) => globals.push(i as u32),
            }
        }
        RayIndex {
            cell,
            x0,
            y0,
            nx,
            ny,
            buckets,
            globals,
        }
    }

    /// Nearest hit along `o + t d` for `t` in `[0, max_t]`.
    fn raycast(&self, world: &World, o: &Point3<f64>, d: &Vector3<f64>, max_t: f64) -> Option<f64> {
        let mut best = f64::INFINITY;
        for &i in &self.globals {
            if let Some(t) = world.shapes[i as usize].raycast(o, d) {
                if t <= max_t && t < best {
                    best = t;
                }
            }
        }
        // Walk the xy-buckets the ray footprint crosses.
        let test_bucket = |ix: isize, iy: isize, best: &mut f64| {
            if ix < 0 || iy < 0 || ix >= self.nx as isize || iy >= self.ny as isize {
                return;
            }
            for &s in &self.buckets[iy as usize * self.nx + ix as usize] {
                if let Some(t) = world.shapes[s as usize].raycast(o, d) {
                    if t <= max_t && t < *best {
                        *best = t;
                    }
                }
            }
        };
        let dxy = Vector2::new(d.x, d.y);
        if dxy.norm() < 1e-12 {
            let ix = ((o.x - self.x0) / self.cell).floor() as isize;
            let iy = ((o.y - self.y0) / self.cell).floor() as isize;
            test_bucket(ix, iy, &mut best);
        } else {
            // 2D DDA over the bucket grid.
            let mut ix = ((o.x - self.x0) / self.cell).floor() as isize;
            let mut iy = ((o.y - self.y0) / self.cell).floor() as isize;
            let step_x = if d.x > 0.0 { 1 } else { -1 };
            let step_y = if d.y > 0.0 { 1 } else { -1 };
            let next_t = |i: isize, o1: f64, d1: f64, g0: f64, step: isize| -> f64 {
                if d1.abs() < 1e-15 {
                    return f64::INFINITY;
                }
                let edge = g0 + (i + if step > 0 { 1 } else { 0 }) as f64 * self.cell;
                (edge - o1) / d1
            };
            let mut tx = next_t(ix, o.x, d.x, self.x0, step_x);
            let mut ty = next_t(iy, o.y, d.y, self.y0, step_y);
            let mut t = 0.0;
            while t <= max_t {
                test_bucket(ix, iy, &mut best);
                if best <= t {
                    break;
                }
                if tx <= ty {
                    t = tx;
                    ix += step_x;
                    tx = next_t(ix, o.x, d.x, self.x0, step_x);
                } else {
                    t = ty;
                    iy += step_y;
                    ty = next_t(iy, o.y, d.y, self.y0, step_y);
                }
                if ix < -1
                    || iy < -1
                    || ix > self.nx as isize
                    || iy > self.ny as isize
                {
                    break;
                }
            }
        }
        if best <= max_t {
            Some(best)
        } else {
            None
        }
    }
}

/// Analytic ground truth: shapes, bounds, start/goal placement, and (for
/// office worlds) the dead-end room volumes used by behavior metrics.
#[derive(Debug, Serialize, Deserialize)]
pub struct World {
    pub shapes: Vec<Shape>,
    pub bounds: Aabb,
    pub seed: u64,
    pub start: Point3<f64>,
    pub goal: Point3<f64>,
    #[serde(default)]
    pub rooms: Vec<Aabb>,
    #[serde(skip)]
    index: OnceLock<RayIndex>,
}

impl World {
    pub fn new(
        shapes: Vec<Shape>,
        bounds: Aabb,
        seed: u64,
        start: Point3<f64>,
        goal: Point3<f64>,
    ) -> Self {
        World {
            shapes,
            bounds,
            seed,
            start,
            goal,
            rooms: Vec::new(),
            index: OnceLock::new(),
        }
    }

    /// Distance from `p` to the nearest obstacle surface (negative inside,
    /// +inf in an empty world).
    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        self.shapes
            .iter()
            .fold(f64::INFINITY, |m, s| m.min(s.signed_distance(p)))
    }

    /// Nearest ray hit within `max_t` meters.
    pub fn raycast(&self, o: &Point3<f64>, d: &Vector3<f64>, max_t: f64) -> Option<f64> {
        self.index
            .get_or_init(|| RayIndex::build(self))
            .raycast(self, o, d, max_t)
    }
}

// ---------------------------------------------------------------------------
// World generators
// ---------------------------------------------------------------------------

/// Flyable band shared by the generated worlds: obstacles span this z range
/// and floor/ceiling slabs close it off so routes stay inside.
pub const WORLD_Z_MAX: f64 = 3.0;
/// Default flight altitude for start and goal placement.
pub const FLIGHT_Z: f64 = 1.5;

fn floor_ceiling(min_xy: (f64, f64), max_xy: (f64, f64)) -> [Shape; 2] {
    [
        Shape::Slab(Aabb::new(
            Point3::new(min_xy.0, min_xy.1, -0.2),
            Point3::new(max_xy.0, max_xy.1, 0.0),
        )),
        Shape::Slab(Aabb::new(
            Point3::new(min_xy.0, min_xy.1, WORLD_Z_MAX),
            Point3::new(max_xy.0, max_xy.1, WORLD_Z_MAX + 0.2),
        )),
    ]
}

/// Obstacle-free world with only its bounds; start and goal on the flight
/// altitude.
pub fn empty_world(start: Point3<f64>, goal: Point3<f64>, half_extent: f64) -> World {
    World::new(
        Vec::new(),
        Aabb::new(
            Point3::new(-half_extent, -half_extent, 0.0),
            Point3::new(half_extent, half_extent, WORLD_Z_MAX),
        ),
        0,
        start,
        goal,
    )
}

/// Random forest of vertical cylinders: `round(density * side^2)` trunks
/// with radii uniform in `[r_min, r_max]`, positions uniform over the
/// square, and discs of radius 2.5 m around start and goal kept clear.
/// Start and goal sit at opposite edges with 2 m of margin.
pub fn gen_forest(seed: u64, side: f64, density: f64, r_min: f64, r_max: f64) -> World {
    let half = side / 2.0;
    let start = Point3::new(-half + 2.0, 0.0, FLIGHT_Z);
    let goal = Point3::new(half - 2.0, 0.0, FLIGHT_Z);
    let count = (density * side * side).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shapes: Vec<Shape> =
        floor_ceiling((-half - 1.0, -half - 1.0), (half + 1.0, half + 1.0)).to_vec();
    let mut placed = 0;
    let mut attempts = 0;
    while placed < count && attempts < 200_000 {
        attempts += 1;
        let radius = rng.gen_range(r_min..=r_max);
        let cx = rng.gen_range(-half + radius..=half - radius);
        let cy = rng.gen_range(-half + radius..=half - radius);
        let c = Vector2::new(cx, cy);
        let clear = 2.5 + radius;
        if (c - Vector2::new(start.x, start.y)).norm() < clear
            || (c - Vector2::new(goal.x, goal.y)).norm() < clear
        {
            continue;
        }
        shapes.push(Shape::Cylinder {
            cx,
            cy,
            radius,
            z_min: 0.0,
            z_max: WORLD_Z_MAX,
        });
        placed += 1;
    }
    let mut w = World::new(
        shapes,
        Aabb::new(
            Point3::new(-half - 1.0, -half - 1.0, -0.2),
            Point3::new(half + 1.0, half + 1.0, WORLD_Z_MAX + 0.2),
        ),
        seed,
        start,
        goal,
    );
    w.rooms.clear();
    w
}

/// C-shaped enclosure around `center` whose single opening faces the -x
/// side, away from the goal placed far along +x; the start sits inside.
/// Escaping therefore requires flying away from the goal first.
pub fn gen_bugtrap(center: Point3<f64>, opening_width: f64) -> World {
    let l = 8.0; // enclosure side
    let w = 0.3; // wall thickness
    let (cx, cy) = (center.x, center.y);
    let start = Point3::new(cx, cy, FLIGHT_Z);
    let goal = Point3::new(cx + 22.0, cy, FLIGHT_Z);
    let bounds = Aabb::new(
        Point3::new(cx - l / 2.0 - 10.0, cy - 14.0, -0.2),
        Point3::new(cx + 27.0, cy + 14.0, WORLD_Z_MAX + 0.2),
    );
    let mut shapes: Vec<Shape> = floor_ceiling(
        (bounds.min.x, bounds.min.y),
        (bounds.max.x, bounds.max.y),
    )
    .to_vec();
    let wall = |x0: f64, y0: f64, x1: f64, y1: f64| {
        Shape::Slab(Aabb::new(
            Point3::new(x0, y0, 0.0),
            Point3::new(x1, y1, WORLD_Z_MAX),
        ))
    };
    // Closed face toward the goal.
    shapes.push(wall(cx + l / 2.0 - w, cy - l / 2.0, cx + l / 2.0, cy + l / 2.0));
    // Side faces.
    shapes.push(wall(cx - l / 2.0, cy + l / 2.0 - w, cx + l / 2.0, cy + l / 2.0));
    shapes.push(wall(cx - l / 2.0, cy - l / 2.0, cx + l / 2.0, cy - l / 2.0 + w));
    // Rear face split by the opening (skipped entirely once the opening
    // swallows the wall, degenerating to the wall pair plus the front).
    let half_gap = opening_width / 2.0;
    if cy - half_gap > cy - l / 2.0 {
        shapes.push(wall(cx - l / 2.0, cy - l / 2.0, cx - l / 2.0 + w, cy - half_gap));
        shapes.push(wall(cx - l / 2.0, cy + half_gap, cx - l / 2.0 + w, cy + l / 2.0));
    }
    World::new(shapes, bounds, 0, start, goal)
}

/// Serpentine office floor: three horizontal bands connected by doorways at
/// opposite ends, with two dead-end rooms opening onto the first band right
/// where the straight start-goal line crosses — optimistic planning through
/// unknown space gets lured inside and must turn back.
pub fn gen_office() -> World {
    let t = 0.2; // wall thickness
    let start = Point3::new(1.0, 2.0, FLIGHT_Z);
    let goal = Point3::new(18.5, 12.5, FLIGHT_Z);
    let bounds = Aabb::new(
        Point3::new(-t, -t, -0.2),
        Point3::new(20.0 + t, 14.0 + t, WORLD_Z_MAX + 0.2),
    );
    let mut shapes: Vec<Shape> = floor_ceiling(
        (bounds.min.x, bounds.min.y),
        (bounds.max.x, bounds.max.y),
    )
    .to_vec();
    let wall = |x0: f64, y0: f64, x1: f64, y1: f64| {
        Shape::Slab(Aabb::new(
            Point3::new(x0, y0, 0.0),
            Point3::new(x1, y1, WORLD_Z_MAX),
        ))
    };
    // Outer shell.
    shapes.push(wall(-t, -t, 20.0 + t, 0.0));
    shapes.push(wall(-t, 14.0, 20.0 + t, 14.0 + t));
    shapes.push(wall(-t, 0.0, 0.0, 14.0));
    shapes.push(wall(20.0, 0.0, 20.0 + t, 14.0));
    // Band divider at y = 4 with the corridor door on the far right and
    // the two room doors where the diagonal start-goal line crosses.
    let y1 = 4.0;
    shapes.push(wall(0.0, y1, 5.3, y1 + t));
    shapes.push(wall(6.5, y1, 9.5, y1 + t));
    shapes.push(wall(10.7, y1, 16.0, y1 + t));
    shapes.push(wall(17.2, y1, 20.0, y1 + t));
    // Band divider at y = 9 with its door on the far left.
    let y2 = 8.8;
    shapes.push(wall(0.0, y2, 1.5, y2 + t));
    shapes.push(wall(2.7, y2, 20.0, y2 + t));
    // Dead-end rooms in the middle band: side walls, shared wall, and a
    // common top wall leaving a corridor strip above them.
    let room_top = 6.5;
    shapes.push(wall(3.8, y1 + t, 4.0, room_top + t));
    shapes.push(wall(7.8, y1 + t, 8.0, room_top + t));
    shapes.push(wall(12.8, y1 + t, 13.0, room_top + t));
    shapes.push(wall(3.8, room_top, 13.0, room_top + t));
    let mut w = World::new(shapes, bounds, 0, start, goal);
    w.rooms = vec![
        Aabb::new(Point3::new(4.0, y1 + t, 0.0), Point3::new(7.8, room_top, WORLD_Z_MAX)),
        Aabb::new(Point3::new(8.0, y1 + t, 0.0), Point3::new(12.8, room_top, WORLD_Z_MAX)),
    ];
    w
}

// ---------------------------------------------------------------------------
// Depth sensor
// ---------------------------------------------------------------------------

/// Depth-camera model: uniform angular lattice over the field of view.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SensorConfig {
    pub h_res: usize,
    pub v_res: usize,
    /// Horizontal field of view, radians.
    pub h_fov: f64,
    /// Vertical field of view, radians.
    pub v_fov: f64,
    pub max_range: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            h_res: 160,
            v_res: 90,
            h_fov: 90.0f64.to_radians(),
            v_fov: 60.0f64.to_radians(),
            max_range: 10.0,
        }
    }
}

/// Render one depth scan from `origin` looking along `yaw` (rotation about
/// +z; zero faces +x). Hits become cloud points; misses are recorded as
/// unit max-range directions so fusion can carve the free space they saw.
pub fn render_depth(
    world: &World,
    origin: &Point3<f64>,
    yaw: f64,
    cfg: &SensorConfig,
    stamp: u64,
) -> DepthScan {
    let mut points = Vec::new();
    let mut max_range_dirs = Vec::new();
    let (sy, cy) = yaw.sin_cos();
    for iv in 0..cfg.v_res {
        let el = if cfg.v_res > 1 {
            -cfg.v_fov / 2.0 + cfg.v_fov * iv as f64 / (cfg.v_res - 1) as f64
        } else {
            0.0
        };
        let (se, ce) = el.sin_cos();
        for ih in 0..cfg.h_res {
            let az = if cfg.h_res > 1 {
                -cfg.h_fov / 2.0 + cfg.h_fov * ih as f64 / (cfg.h_res - 1) as f64
            } else {
                0.0
            };
            let (sa, ca) = az.sin_cos();
            let body = Vector3::new(ce * ca, ce * sa, se);
            let dir = Vector3::new(cy * body.x - sy * body.y, sy * body.x + cy * body.y, body.z);
            match world.raycast(origin, &dir, cfg.max_range) {
                Some(t) => points.push(origin + dir * t),
                None => max_range_dirs.push(dir),
            }
        }
    }
    DepthScan {
        origin: *origin,
        points,
        max_range_dirs,
        max_range: cfg.max_range,
        stamp,
    }
}

// ---------------------------------------------------------------------------
// Episode configuration and metrics
// ---------------------------------------------------------------------------

/// Loop rates. The fixed integration step must divide all periods finely
/// enough that events land on ticks (events fire on the first tick at or
/// past their due time).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RateConfig {
    pub sim_dt: f64,
    pub sensor_hz: f64,
    pub map_hz: f64,
    pub replan_hz: f64,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig {
            sim_dt: 0.005,
            sensor_hz: 30.0,
            map_hz: 10.0,
            replan_hz: 20.0,
        }
    }
}

/// Sliding-map extent and resolution.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MapConfig {
    pub side: [f64; 3],
    pub voxel: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            side: [20.0, 20.0, 6.0],
            voxel: 0.10,
        }
    }
}

impl MapConfig {
    /// Dilation radius in cells covering the vehicle radius.
    pub fn inflation_cells(&self, r_drone: f64) -> usize {
        ((r_drone / self.voxel) - 1e-9).ceil() as usize
    }
}

/// Everything one episode needs besides the world.
#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub rates: RateConfig,
    pub sensor: SensorConfig,
    pub map: MapConfig,
    pub replan: ReplanConfig,
    pub limits: Limits,
    pub weight: TerminalWeight,
    pub solve: SolveOptions,
    pub success_radius: f64,
    pub timeout: f64,
    pub cloud_capacity: usize,
    /// Yaw rate while hovering, so a stuck vehicle looks around instead of
    /// staring at the same wall forever.
    pub hover_yaw_rate: f64,
    /// Hold the first commit until this much time has passed, letting the
    /// hover yaw sweep map the surroundings before the vehicle moves.
    pub initial_survey: f64,
    pub record_vehicle: bool,
    /// Re-check each committed tail against its planning snapshot and count
    /// violations (safety audit; expected zero).
    pub verify_commits: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            rates: RateConfig::default(),
            sensor: SensorConfig::default(),
            map: MapConfig::default(),
            // The benchmark worlds all span z = 0..3 m between floor and
            // ceiling. The depth sensor cannot pitch, so the envelope keeps
            // the body at least 0.2 m away from surfaces it can never see
            // coming from straight above or below.
            replan: ReplanConfig {
                z_band: Some((0.5, 2.5)),
                ..ReplanConfig::default()
            },
            limits: Limits {
                v_max: 3.0,
                a_max: 5.0,
                j_max: 20.0,
            },
            weight: TerminalWeight::default(),
            solve: SolveOptions::default(),
            success_radius: 0.5,
            timeout: 120.0,
            cloud_capacity: 4,
            hover_yaw_rate: 90.0f64.to_radians(),
            initial_survey: 4.0,
            record_vehicle: true,
            verify_commits: true,
        }
    }
}

/// How an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeOutcome {
    Success,
    Timeout,
    Collision,
}

/// Vehicle truth: exact playback of the committed trajectory plus the yaw
/// model (velocity heading in flight, slow sweep while hovering).
#[derive(Debug, Clone, Copy)]
pub struct VehicleSim {
    pub state: FlatState,
    pub yaw: f64,
}

/// One replan-cycle trace row.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReplanRow {
    pub t: f64,
    pub k: u64,
    pub status: u8,
    pub branch: u8,
    pub j1: f64,
    pub j2: f64,
    pub angle_deg: f64,
    pub r_a: f64,
    pub r_b: f64,
    pub goal_ms: f64,
    pub jps_ms: f64,
    pub cvx_jerk_ms: f64,
    pub cvx_vel_ms: f64,
    pub collision_ms: f64,
    pub total_ms: f64,
    pub n_qp_solves: u32,
    pub nn_queries: u64,
    pub clouds_in_buffer: usize,
}

impl ReplanRow {
    pub fn status_str(&self) -> &'static str {
        match self.status {
            0 => "committed",
            1 => "goal_unreachable",
            2 => "no_path",
            _ => "no_feasible_terminal",
        }
    }
}

/// Vehicle state row (one per sim tick, 200 Hz at the default step).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VehicleRow {
    pub t: f64,
    pub pos: [f64; 3],
    pub vel: [f64; 3],
    pub acc: [f64; 3],
    pub yaw: f64,
    pub clearance: f64,
}

/// One map-fusion event.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FusionRow {
    pub t: f64,
    pub stamp: u64,
    pub fuse_ms: f64,
    pub points: usize,
}

/// Episode result summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub outcome: EpisodeOutcome,
    pub success: bool,
    /// Trapezoidal integral of speed over the executed trajectory.
    pub path_length: f64,
    pub flight_time: f64,
    /// Min over steps of (distance to nearest surface - vehicle radius).
    pub min_clearance: f64,
    pub replan_count: usize,
    pub replan_failures: usize,
    /// Committed tails that failed their own planning-snapshot re-check.
    pub commit_violations: usize,
    /// Dead-end room visits that ended in a heading reversal.
    pub dead_end_entries: usize,
}

/// Full per-episode record: summary plus trace tables.
#[derive(Debug)]
pub struct EpisodeResult {
    pub metrics: RunMetrics,
    pub replan_rows: Vec<ReplanRow>,
    pub vehicle_rows: Vec<VehicleRow>,
    pub fusion_rows: Vec<FusionRow>,
}

// ---------------------------------------------------------------------------
// Episode loop
// ---------------------------------------------------------------------------

fn replan_row(t: f64, k: u64, out: &crate::replan::ReplanOutcome) -> ReplanRow {
    let StageTimings {
        goal_ms,
        jps_ms,
        cvx_jerk_ms,
        cvx_vel_ms,
        collision_ms,
        total_ms,
    } = out.timings;
    ReplanRow {
        t,
        k,
        status: match out.status {
            ReplanStatus::Committed => 0,
            ReplanStatus::GoalUnreachable => 1,
            ReplanStatus::NoPath => 2,
            ReplanStatus::NoFeasibleTerminal => 3,
        },
        branch: out.chosen_branch.unwrap_or(0),
        j1: out.j1.unwrap_or(f64::NAN),
        j2: out.j2.unwrap_or(f64::NAN),
        angle_deg: out.angle.map(|a| a.to_degrees()).unwrap_or(f64::NAN),
        r_a: out.r_a,
        r_b: out.r_b,
        goal_ms,
        jps_ms,
        cvx_jerk_ms,
        cvx_vel_ms,
        collision_ms,
        total_ms,
        n_qp_solves: out.n_qp_solves,
        nn_queries: out.nn_queries,
        clouds_in_buffer: out.clouds_in_buffer,
    }
}

/// Run one closed-loop episode: sensor scans push clouds into the buffer,
/// fusion folds the newest scan into the sliding map and advances the
/// watermark, the replanner splices new primitives into the committed
/// trajectory, and the vehicle plays that trajectory exactly until it
/// reaches the goal, times out, or (never, if the stack is sound) hits
/// ground truth.
pub fn run_episode(world: &World, cfg: &EpisodeConfig) -> EpisodeResult {
    let dt = cfg.rates.sim_dt;
    let sensor_period = 1.0 / cfg.rates.sensor_hz;
    let fuse_period = 1.0 / cfg.rates.map_hz;
    let replan_period = 1.0 / cfg.rates.replan_hz;

    let side = Vector3::new(cfg.map.side[0], cfg.map.side[1], cfg.map.side[2]);
    let inflation = cfg.map.inflation_cells(cfg.replan.r_drone);
    let mut map = SlidingGrid::new(&world.start, &side, cfg.map.voxel, inflation);
    let mut buffer = CloudBuffer::new(cfg.cloud_capacity);
    let mut engine = ReplanEngine::new(
        cfg.replan,
        cfg.limits,
        cfg.weight,
        cfg.solve,
        world.start,
    );

    let mut vehicle = VehicleSim {
        state: FlatState::rest(world.start),
        yaw: {
            let d = world.goal - world.start;
            d.y.atan2(d.x)
        },
    };

    let mut next_sensor = 0.0;
    let mut next_fuse = 0.0;
    let mut next_replan = cfg.initial_survey;
    let mut latest_scan: Option<DepthScan> = None;

    let mut replan_rows = Vec::new();
    let mut vehicle_rows = Vec::new();
    let mut fusion_rows = Vec::new();
    let mut metrics = RunMetrics {
        outcome: EpisodeOutcome::Timeout,
        success: false,
        path_length: 0.0,
        flight_time: cfg.timeout,
        min_clearance: f64::INFINITY,
        replan_count: 0,
        replan_failures: 0,
        commit_violations: 0,
        dead_end_entries: 0,
    };
    let mut prev_speed = 0.0;
    let mut room_state: Vec<Option<Vector2<f64>>> = vec![None; world.rooms.len()];

    let max_ticks = (cfg.timeout / dt).ceil() as u64;
    for tick in 0..=max_ticks {
        let t = tick as f64 * dt;
        vehicle.state = engine.committed().sample(t);
        let hvel = Vector2::new(vehicle.state.vel.x, vehicle.state.vel.y);
        if hvel.norm() > 0.1 {
            vehicle.yaw = hvel.y.atan2(hvel.x);
        } else {
            vehicle.yaw += cfg.hover_yaw_rate * dt;
        }

        // Sensor: render, push the cloud, keep the scan for fusion.
        if t + 1e-9 >= next_sensor {
            next_sensor += sensor_period;
            let stamp = tick + 1;
            let scan = render_depth(world, &vehicle.state.pos, vehicle.yaw, &cfg.sensor, stamp);
            buffer
                .push_cloud(scan.points.clone(), stamp)
                .expect("sensor stamps are strictly increasing");
            latest_scan = Some(scan);
        }

        // Fusion: newest scan into the sliding map, watermark forward.
        if t + 1e-9 >= next_fuse {
            next_fuse += fuse_period;
            if let Some(scan) = latest_scan.take() {
                map.slide_to(&vehicle.state.pos);
                let t0 = Instant::now();
                map.fuse_scan(&scan);
                let fuse_ms = t0.elapsed().as_secs_f64() * 1e3;
                buffer.advance_watermark(scan.stamp);
                fusion_rows.push(FusionRow {
                    t,
                    stamp: scan.stamp,
                    fuse_ms,
                    points: scan.points.len(),
                });
            }
        }

        // Replan.
        if t + 1e-9 >= next_replan {
            next_replan += replan_period;
            let out = engine.replan(t, &world.goal, &map, &buffer);
            metrics.replan_count += 1;
            if out.status != ReplanStatus::Committed {
                metrics.replan_failures += 1;
            } else if cfg.verify_commits {
                let (_, prim) = engine.committed().pieces().last().unwrap();
                let (clear, _) = primitive_clear_counted(
                    &SweptBody::Jerk(prim),
                    &map,
                    &buffer,
                    cfg.replan.r_drone,
                    true,
                    map.voxel_size() / 2.0,
                    cfg.replan.z_band,
                );
                if !clear {
                    metrics.commit_violations += 1;
                }
            }
            replan_rows.push(replan_row(t, engine.k(), &out));
        }

        // Ground-truth audit and metrics.
        let surf = world.signed_distance(&vehicle.state.pos);
        let clearance = surf - cfg.replan.r_drone;
        metrics.min_clearance = metrics.min_clearance.min(clearance);
        let speed = vehicle.state.vel.norm();
        if tick > 0 {
            metrics.path_length += 0.5 * (prev_speed + speed) * dt;
        }
        prev_speed = speed;
        if cfg.record_vehicle {
            vehicle_rows.push(VehicleRow {
                t,
                pos: vehicle.state.pos.coords.into(),
                vel: vehicle.state.vel.into(),
                acc: vehicle.state.acc.into(),
                yaw: vehicle.yaw,
                clearance,
            });
        }

        // Dead-end room bookkeeping: record the entry heading, and count
        // the visit when the exit heading reverses it.
        for (i, room) in world.rooms.iter().enumerate() {
            let inside = room.contains(&vehicle.state.pos);
            match (room_state[i], inside) {
                (None, true) => {
                    if hvel.norm() > 0.1 {
                        room_state[i] = Some(hvel.normalize());
                    }
                }
                (Some(entry), false) => {
                    if hvel.norm() > 0.1 && entry.dot(&hvel.normalize()) < 0.0 {
                        metrics.dead_end_entries += 1;
                    }
                    room_state[i] = None;
                }
                _ => {}
            }
        }

        if clearance < 0.0 {
            metrics.outcome = EpisodeOutcome::Collision;
            metrics.flight_time = t;
            break;
        }
        if (vehicle.state.pos - world.goal).norm() < cfg.success_radius {
            metrics.outcome = EpisodeOutcome::Success;
            metrics.success = true;
            metrics.flight_time = t;
            break;
        }
    }

    if !metrics.min_clearance.is_finite() {
        metrics.min_clearance = 1e9;
    }
    EpisodeResult {
        metrics,
        replan_rows,
        vehicle_rows,
        fusion_rows,
    }
}

// ---------------------------------------------------------------------------
// Known-map oracle
// ---------------------------------------------------------------------------

#[derive(PartialEq)]
struct HeapEntry {
    f: f64,
    idx: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Min-heap by f.
        other.f.total_cmp(&self.f)
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest-path length over the fully known ground truth, rasterized at
/// `s_oracle` with the vehicle radius added to every obstacle, searched
/// 26-connected. `None` when no route exists.
pub fn oracle_shortest_path(
    world: &World,
    s_oracle: f64,
    a: &Point3<f64>,
    g: &Point3<f64>,
    r_drone: f64,
) -> Option<f64> {
    let s = s_oracle;
    let min = world.bounds.min;
    let nx = ((world.bounds.max.x - min.x) / s).ceil() as usize;
    let ny = ((world.bounds.max.y - min.y) / s).ceil() as usize;
    let nz = ((world.bounds.max.z - min.z) / s).ceil() as usize;
    let idx = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;
    let center = |x: usize, y: usize, z: usize| {
        Point3::new(
            min.x + (x as f64 + 0.5) * s,
            min.y + (y as f64 + 0.5) * s,
            min.z + (z as f64 + 0.5) * s,
        )
    };

    // Rasterize each shape into its own inflated bounding box.
    let mut blocked = vec![false; nx * ny * nz];
    for shape in &world.shapes {
        let b = shape.aabb();
        let pad = r_drone + s;
        let cx0 = (((b.min.x - pad - min.x) / s).floor() as isize).clamp(0, nx as isize - 1);
        let cx1 = (((b.max.x + pad - min.x) / s).floor() as isize).clamp(0, nx as isize - 1);
        let cy0 = (((b.min.y - pad - min.y) / s).floor() as isize).clamp(0, ny as isize - 1);
        let cy1 = (((b.max.y + pad - min.y) / s).floor() as isize).clamp(0, ny as isize - 1);
        let cz0 = (((b.min.z - pad - min.z) / s).floor() as isize).clamp(0, nz as isize - 1);
        let cz1 = (((b.max.z + pad - min.z) / s).floor() as isize).clamp(0, nz as isize - 1);
        for z in cz0..=cz1 {
            for y in cy0..=cy1 {
                for x in cx0..=cx1 {
                    let c = center(x as usize, y as usize, z as usize);
                    if shape.signed_distance(&c) < r_drone {
                        blocked[idx(x as usize, y as usize, z as usize)] = true;
                    }
                }
            }
        }
    }

    let cell_of = |p: &Point3<f64>| -> Option<(usize, usize, usize)> {
        let x = ((p.x - min.x) / s).floor() as isize;
        let y = ((p.y - min.y) / s).floor() as isize;
        let z = ((p.z - min.z) / s).floor() as isize;
        if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize {
            return None;
        }
        Some((x as usize, y as usize, z as usize))
    };
    let (sx, sy, sz) = cell_of(a)?;
    let (gx, gy, gz) = cell_of(g)?;
    if blocked[idx(sx, sy, sz)] || blocked[idx(gx, gy, gz)] {
        return None;
    }

    // A* with the 26-neighborhood metric lower bound as heuristic.
    let h = |x: usize, y: usize, z: usize| -> f64 {
        let mut d = [
            (x as f64 - gx as f64).abs(),
            (y as f64 - gy as f64).abs(),
            (z as f64 - gz as f64).abs(),
        ];
        d.sort_by(|p, q| p.total_cmp(q));
        let (d0, d1, d2) = (d[0], d[1], d[2]);
        s * ((3.0f64.sqrt() - 2.0f64.sqrt()) * d0 + (2.0f64.sqrt() - 1.0) * d1 + d2)
    };
    let mut dist = vec![f64::INFINITY; nx * ny * nz];
    let mut heap = BinaryHeap::new();
    dist[idx(sx, sy, sz)] = 0.0;
    heap.push(HeapEntry {
        f: h(sx, sy, sz),
        idx: idx(sx, sy, sz),
    });
    let goal_idx = idx(gx, gy, gz);
    while let Some(HeapEntry { f, idx: cur }) = heap.pop() {
        let cz = cur / (nx * ny);
        let cy = (cur / nx) % ny;
        let cx = cur % nx;
        let gcur = dist[cur];
        if f > gcur + h(cx, cy, cz) + 1e-12 {
            continue;
        }
        if cur == goal_idx {
            return Some(gcur);
        }
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let x = cx as isize + dx;
                    let y = cy as isize + dy;
                    let z = cz as isize + dz;
                    if x < 0
                        || y < 0
                        || z < 0
                        || x >= nx as isize
                        || y >= ny as isize
                        || z >= nz as isize
                    {
                        continue;
                    }
                    let ni = idx(x as usize, y as usize, z as usize);
                    if blocked[ni] {
                        continue;
                    }
                    let step = s * ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                    let nd = gcur + step;
                    if nd + 1e-12 < dist[ni] {
                        dist[ni] = nd;
                        heap.push(HeapEntry {
                            f: nd + h(x as usize, y as usize, z as usize),
                            idx: ni,
                        });
                    }
                }
            }
        }
    }
    None
}
