//! Receding-horizon replanning: each cycle projects the terminal goal into
//! the map window, runs the grid search, fits a jerk-controlled primitive
//! to a sampled terminal point on a sphere around the start state, and
//! scores the remainder of the route with velocity-primitive and
//! straight-line cost-to-go terms. When the fresh grid path swings away
//! from the previous one by more than a threshold angle, the engine also
//! rebuilds the previous route around any newly discovered obstacles and
//! commits whichever branch is cheaper.
//!
//! The committed trajectory is a splice chain of jerk primitives. A replan
//! always starts from the committed state a fixed lead time ahead of "now",
//! so the new primitive joins the old trajectory with matching position,
//! velocity, and acceleration, and a failed replan simply leaves the old
//! trajectory — which ends at rest in known-free space — executing.

use crate::clouds::{primitive_clear_counted, CloudBuffer, SweptBody};
use crate::jps::{
    first_sphere_intersection, intermediate_waypoints, jps_search, last_sphere_intersection,
    path_first_last_blocked, GridPath, JpsScratch, PlanError,
};
use crate::map::SlidingGrid;
use crate::primitives::{
    cost_distance, cost_jerk, cost_velocity, solve_jerk, solve_velocity_chain, FlatState,
    JerkPrimitive, Limits, SolveOptions, TerminalWeight,
};
use nalgebra::{Point3, Vector3};
use std::time::Instant;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Replan-cycle parameters. Radii must satisfy `r_b > r_a_max > r_a_min > 0`:
/// the jerk primitive ends on the inner sphere, the velocity chain carries
/// the route out to the outer sphere, and the distance term covers the rest.
#[derive(Debug, Clone, Copy)]
pub struct ReplanConfig {
    pub r_a_min: f64,
    pub r_a_max: f64,
    pub r_b: f64,
    /// Gate angle: the second branch is evaluated only when the fresh grid
    /// path's terminal direction swings past this.
    pub alpha0: f64,
    /// Terminal-candidate budget per branch.
    pub samples_total: usize,
    pub r_drone: f64,
    /// Lead time between "now" and the splice point of a new primitive.
    pub delta_commit: f64,
    /// Great-circle step between successive arc samples.
    pub arc_step: f64,
    /// Angular radius increment between concentric candidate rings.
    pub ring_step: f64,
    /// Candidates per ring.
    pub ring_points: usize,
    /// Optional altitude envelope (min, max) in world meters. The grid
    /// search, the terminal candidates, and the executed-primitive gate all
    /// stay inside it. Deployments set this from site knowledge: the depth
    /// sensor cannot pitch, so space straight above and below the vehicle
    /// is never scanned and the envelope is what keeps flight out of it.
    pub z_band: Option<(f64, f64)>,
}

impl Default for ReplanConfig {
    fn default() -> Self {
        ReplanConfig {
            r_a_min: 1.5,
            r_a_max: 4.0,
            r_b: 7.0,
            alpha0: 15.0f64.to_radians(),
            samples_total: 30,
            r_drone: 0.3,
            delta_commit: 0.05,
            arc_step: 10.0f64.to_radians(),
            ring_step: 10.0f64.to_radians(),
            ring_points: 8,
            z_band: None,
        }
    }
}

impl ReplanConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.r_b > self.r_a_max && self.r_a_max > self.r_a_min && self.r_a_min > 0.0) {
            return Err(format!(
                "sphere radii must satisfy r_b > r_a_max > r_a_min > 0 (got {} / {} / {})",
                self.r_b, self.r_a_max, self.r_a_min
            ));
        }
        if self.alpha0 <= 0.0 {
            return Err("alpha0 must be positive".into());
        }
        if let Some((lo, hi)) = self.z_band {
            if !(lo < hi) {
                return Err(format!("altitude envelope must satisfy min < max (got {lo} / {hi})"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Committed trajectory
// ---------------------------------------------------------------------------

/// Splice chain of jerk primitives indexed by absolute start time. Before
/// the first piece the vehicle hovers at the initial state; between a
/// piece's end and its successor (and after the last piece) it holds the
/// piece's terminal position at rest.
#[derive(Debug, Clone)]
pub struct CompositeTrajectory {
    initial: FlatState,
    pieces: Vec<(f64, JerkPrimitive)>,
}

impl CompositeTrajectory {
    /// A trajectory that hovers at `pos` forever (until the first splice).
    pub fn at_rest(pos: Point3<f64>) -> Self {
        CompositeTrajectory {
            initial: FlatState::rest(pos),
            pieces: Vec::new(),
        }
    }

    pub fn pieces(&self) -> &[(f64, JerkPrimitive)] {
        &self.pieces
    }

    /// Absolute time after which the trajectory holds position at rest.
    pub fn end_time(&self) -> f64 {
        self.pieces
            .last()
            .map(|(t, p)| t + p.duration())
            .unwrap_or(0.0)
    }

    /// Replace everything from `t_start` on with `prim`. The caller
    /// guarantees `prim.x0` equals `self.sample(t_start)`, which keeps the
    /// chain continuous through acceleration.
    pub fn splice_at(&mut self, t_start: f64, prim: JerkPrimitive) {
        self.pieces.retain(|(t, _)| *t < t_start);
        self.pieces.push((t_start, prim));
    }

    /// Drop pieces that can no longer influence samples at or after `t`.
    pub fn prune_before(&mut self, t: f64) {
        while self.pieces.len() > 1 {
            // The second piece's start caps the first piece's domain.
            if self.pieces[1].0 <= t {
                self.pieces.remove(0);
            } else {
                break;
            }
        }
    }

    /// State at absolute time `t` (total: clamps outside the chain).
    pub fn sample(&self, t: f64) -> FlatState {
        let idx = self.pieces.partition_point(|(ts, _)| *ts <= t);
        if idx == 0 {
            return self.initial;
        }
        let (ts, prim) = &self.pieces[idx - 1];
        let local = t - ts;
        if local >= prim.duration() {
            // Hold the endpoint at rest until the next piece (if any).
            return FlatState::rest(prim.terminal.pos);
        }
        prim.sample(local)
            .expect("local time clamped into the primitive domain")
    }
}

// ---------------------------------------------------------------------------
// Geometry helpers
// ---------------------------------------------------------------------------

/// Angle at vertex `a` between rays toward `b1` and `b2`.
pub fn angle_between(b1: &Point3<f64>, a: &Point3<f64>, b2: &Point3<f64>) -> f64 {
    let u = b1 - a;
    let v = b2 - a;
    let nu = u.norm();
    let nv = v.norm();
    if nu < 1e-12 || nv < 1e-12 {
        return 0.0;
    }
    (u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0).acos()
}

/// Orthonormal pair spanning the plane perpendicular to unit vector `u`.
fn perp_basis(u: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let seed = if u.z.abs() < 0.9 {
        Vector3::z()
    } else {
        Vector3::x()
    };
    let e1 = u.cross(&seed).normalize();
    let e2 = u.cross(&e1);
    (e1, e2)
}

/// Spherical interpolation between unit vectors.
fn slerp(d0: &Vector3<f64>, d1: &Vector3<f64>, t: f64) -> Vector3<f64> {
    let cos = d0.dot(d1).clamp(-1.0, 1.0);
    let theta = cos.acos();
    if theta < 1e-9 {
        return *d0;
    }
    let s = theta.sin();
    (d0 * ((1.0 - t) * theta).sin() + d1 * (t * theta).sin()) / s
}

/// Ordered terminal candidates on the sphere of radius `r` around `a`:
/// the path's sphere exit first, then great-circle arcs swept back toward
/// the radial projections of the interior waypoints (nearest the exit
/// first), then concentric rings around the exit direction. The queue is
/// truncated to `cfg.samples_total`.
pub fn terminal_queue(
    bp: &Point3<f64>,
    path: &GridPath,
    a: &Point3<f64>,
    r: f64,
    wp_after: usize,
    cfg: &ReplanConfig,
    prefer_dir: Option<&Vector3<f64>>,
) -> Vec<Point3<f64>> {
    if r < 1e-9 {
        return vec![*bp];
    }
    let u_b = (bp - a) / r;
    let mut dirs: Vec<Vector3<f64>> = vec![u_b];

    // Radial projections of the interior waypoints, walking backward from
    // the sphere exit toward the start.
    let mut anchors = vec![u_b];
    for q in path.waypoints[..wp_after.min(path.waypoints.len())]
        .iter()
        .skip(1)
        .rev()
    {
        let d = q - a;
        let n = d.norm();
        if n > 1e-9 {
            anchors.push(d / n);
        }
    }
    'outer: for w in anchors.windows(2) {
        let theta = w[0].dot(&w[1]).clamp(-1.0, 1.0).acos();
        if theta < 1e-9 {
            continue;
        }
        let steps = (theta / cfg.arc_step).ceil() as usize;
        for i in 1..=steps {
            dirs.push(slerp(&w[0], &w[1], i as f64 / steps as f64));
            if dirs.len() >= cfg.samples_total {
                break 'outer;
            }
        }
    }

    // Concentric rings around the exit direction. With an altitude envelope
    // some candidates get dropped below, so overfill to keep the queue at
    // its configured budget.
    let budget = if cfg.z_band.is_some() {
        cfg.samples_total * 2
    } else {
        cfg.samples_total
    };
    let (e1, e2) = perp_basis(&u_b);
    let ring_start = dirs.len();
    let mut ring = 1;
    while dirs.len() < budget && ring < 16 {
        let phi = cfg.ring_step * ring as f64;
        for j in 0..cfg.ring_points {
            let psi = 2.0 * std::f64::consts::PI * j as f64 / cfg.ring_points as f64;
            dirs.push(u_b * phi.cos() + (e1 * psi.cos() + e2 * psi.sin()) * phi.sin());
            if dirs.len() >= budget {
                break;
            }
        }
        ring += 1;
    }

    // The rings are uninformed fallbacks; when a previously flown direction
    // is available, try the candidates closest to it first so consecutive
    // cycles don't flip between opposite detours.
    if let Some(pd) = prefer_dir {
        dirs[ring_start..].sort_by(|x, y| pd.dot(y).total_cmp(&pd.dot(x)));
    }

    let mut points: Vec<Point3<f64>> = dirs.into_iter().map(|d| a + d * r).collect();
    if let Some((lo, hi)) = cfg.z_band {
        points.retain(|p| p.z >= lo && p.z <= hi);
    }
    points.truncate(cfg.samples_total);
    points
}

// ---------------------------------------------------------------------------
// Stage outputs
// ---------------------------------------------------------------------------

/// Wall-clock stage durations of one replan, in milliseconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimings {
    pub goal_ms: f64,
    pub jps_ms: f64,
    pub cvx_jerk_ms: f64,
    pub cvx_vel_ms: f64,
    pub collision_ms: f64,
    pub total_ms: f64,
}

/// A jerk primitive accepted for one branch.
#[derive(Debug)]
pub struct PrimjOutcome {
    pub primitive: JerkPrimitive,
    /// Accepted terminal position (queue element).
    pub terminal: Point3<f64>,
    /// Index of the accepted element in the candidate queue.
    pub queue_index: usize,
    pub qp_solves: u32,
    pub nn_queries: u64,
    pub jerk_ms: f64,
    pub collision_ms: f64,
}

/// Solve and query effort spent by a candidate walk that accepted nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct PrimjEffort {
    pub qp_solves: u32,
    pub nn_queries: u64,
    pub jerk_ms: f64,
    pub collision_ms: f64,
}

/// Walk the candidate queue, solving the jerk problem toward a full stop at
/// each candidate, and return the first primitive that clears the map
/// snapshot and the unfused clouds. When the queue is exhausted the spent
/// effort comes back so failed cycles still show up in the trace.
pub fn get_primj(
    queue: &[Point3<f64>],
    a: &FlatState,
    map: &SlidingGrid,
    clouds: &CloudBuffer,
    cfg: &ReplanConfig,
    limits: &Limits,
    weight: &TerminalWeight,
    solve: &SolveOptions,
) -> Result<PrimjOutcome, PrimjEffort> {
    let step = map.voxel_size() / 2.0;
    let mut eff = PrimjEffort::default();
    for (idx, cand) in queue.iter().enumerate() {
        let t0 = Instant::now();
        let solved = solve_jerk(a, &FlatState::rest(*cand), limits, weight, solve);
        eff.jerk_ms += t0.elapsed().as_secs_f64() * 1e3;
        eff.qp_solves += 1;
        let Ok(sol) = solved else { continue };
        let t1 = Instant::now();
        let (clear, queries) = primitive_clear_counted(
            &SweptBody::Jerk(&sol.primitive),
            map,
            clouds,
            cfg.r_drone,
            true,
            step,
            cfg.z_band,
        );
        eff.collision_ms += t1.elapsed().as_secs_f64() * 1e3;
        eff.nn_queries += queries;
        if clear {
            return Ok(PrimjOutcome {
                primitive: sol.primitive,
                terminal: *cand,
                queue_index: idx,
                qp_solves: eff.qp_solves,
                nn_queries: eff.nn_queries,
                jerk_ms: eff.jerk_ms,
                collision_ms: eff.collision_ms,
            });
        }
    }
    Err(eff)
}

/// Branch-2 route: reuse the previous grid path when it is still unblocked,
/// otherwise re-search around the first/last crossing of the newly mapped
/// obstacle (start → entry, entry → exit, exit → goal) and concatenate.
pub fn build_jps2(
    prev: &GridPath,
    map: &SlidingGrid,
    a: &Point3<f64>,
    goal: &Point3<f64>,
    scratch: &mut JpsScratch,
    z_band: Option<(f64, f64)>,
) -> Result<GridPath, PlanError> {
    let Some(span) = path_first_last_blocked(prev, map) else {
        return Ok(prev.clone());
    };
    let i1 = map.voxel_center(span.cell_before);
    let i2 = map.voxel_center(span.cell_after);
    let legs = [
        jps_search(map, a, &i1, scratch, z_band)?,
        jps_search(map, &i1, &i2, scratch, z_band)?,
        jps_search(map, &i2, goal, scratch, z_band)?,
    ];
    let mut waypoints: Vec<Point3<f64>> = Vec::new();
    for leg in &legs {
        for wp in &leg.waypoints {
            if waypoints.last().map_or(true, |l| (l - wp).norm() > 1e-9) {
                waypoints.push(*wp);
            }
        }
    }
    let length = waypoints.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
    Ok(GridPath { waypoints, length })
}

/// Cost breakdown of one branch: executed jerk primitive, velocity chain
/// out to the outer sphere, and straight-line time over the remaining tail.
#[derive(Debug, Clone, Copy)]
pub struct CostBreakdown {
    pub total: f64,
    pub jerk: f64,
    pub velocity: f64,
    pub distance: f64,
    pub vel_ms: f64,
}

/// Score one branch. `b` is the accepted terminal of its jerk primitive.
pub fn get_cost(
    prim: &JerkPrimitive,
    b: &Point3<f64>,
    path: &GridPath,
    a_pos: &Point3<f64>,
    r_a: f64,
    r_b: f64,
    limits: &Limits,
    solve: &SolveOptions,
) -> CostBreakdown {
    let inner = first_sphere_intersection(path, a_pos, r_a);
    let outer = last_sphere_intersection(path, a_pos, r_b);
    let mid = intermediate_waypoints(path, &inner, &outer);

    let mut chain_pts: Vec<Point3<f64>> = Vec::with_capacity(mid.len() + 2);
    chain_pts.push(*b);
    for q in mid {
        if chain_pts.last().map_or(true, |l| (l - q).norm() > 1e-9) {
            chain_pts.push(*q);
        }
    }
    if chain_pts.last().map_or(true, |l| (l - outer.point).norm() > 1e-9) {
        chain_pts.push(outer.point);
    }

    let t0 = Instant::now();
    let chain = solve_velocity_chain(&chain_pts, limits.v_max, solve.n, solve.dt_min);
    let vel_ms = t0.elapsed().as_secs_f64() * 1e3;

    let jerk = cost_jerk(prim, limits.j_max);
    let velocity = cost_velocity(&chain, limits.v_max);
    let tail = &path.waypoints[outer.wp_after.min(path.waypoints.len())..];
    let distance = cost_distance(&outer.point, tail, limits.v_max);
    CostBreakdown {
        total: jerk + velocity + distance,
        jerk,
        velocity,
        distance,
        vel_ms,
    }
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// Why a replan cycle did or did not commit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplanStatus {
    Committed,
    /// Goal projection found no admissible target voxel.
    GoalUnreachable,
    /// Grid search failed from the start state.
    NoPath,
    /// Every terminal candidate was rejected by the collision gate.
    NoFeasibleTerminal,
}

/// Everything one replan cycle produced, success or not.
#[derive(Debug)]
pub struct ReplanOutcome {
    pub status: ReplanStatus,
    /// 1 = fresh path, 2 = repaired previous path; set on success.
    pub chosen_branch: Option<u8>,
    pub j1: Option<f64>,
    pub j2: Option<f64>,
    /// Gate angle in radians; `None` until a previous cycle exists.
    pub angle: Option<f64>,
    pub r_a: f64,
    pub r_b: f64,
    pub timings: StageTimings,
    pub n_qp_solves: u32,
    pub nn_queries: u64,
    pub clouds_in_buffer: usize,
    /// Accepted terminal position of the committed primitive.
    pub b_point: Option<Point3<f64>>,
    /// Splice time of the committed primitive.
    pub t_splice: f64,
}

/// Per-vehicle replanning state machine.
pub struct ReplanEngine {
    cfg: ReplanConfig,
    limits: Limits,
    weight: TerminalWeight,
    solve: SolveOptions,
    committed: CompositeTrajectory,
    k: u64,
    prev_jps: Option<GridPath>,
    prev_bp: Option<Point3<f64>>,
    prev_dir: Option<Vector3<f64>>,
    scratch: JpsScratch,
}

impl ReplanEngine {
    pub fn new(
        cfg: ReplanConfig,
        limits: Limits,
        weight: TerminalWeight,
        solve: SolveOptions,
        start: Point3<f64>,
    ) -> Self {
        cfg.validate().expect("invalid replan configuration");
        ReplanEngine {
            cfg,
            limits,
            weight,
            solve,
            committed: CompositeTrajectory::at_rest(start),
            k: 0,
            prev_jps: None,
            prev_bp: None,
            prev_dir: None,
            scratch: JpsScratch::new(),
        }
    }

    pub fn committed(&self) -> &CompositeTrajectory {
        &self.committed
    }

    /// Successful replan count so far.
    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn config(&self) -> &ReplanConfig {
        &self.cfg
    }

    /// Run one replan cycle against point-in-time map and cloud views,
    /// splicing the chosen primitive into the committed trajectory on
    /// success and leaving it untouched on failure.
    pub fn replan(
        &mut self,
        t_now: f64,
        g_term: &Point3<f64>,
        map: &SlidingGrid,
        clouds: &CloudBuffer,
    ) -> ReplanOutcome {
        let t_total = Instant::now();
        let mut timings = StageTimings::default();
        let t_splice = t_now + self.cfg.delta_commit;
        let a = self.committed.sample(t_splice);
        self.committed.prune_before(t_now);

        let fail = |status,
                    timings: &mut StageTimings,
                    t_total: &Instant,
                    radii: (f64, f64),
                    effort: PrimjEffort| {
            timings.total_ms = t_total.elapsed().as_secs_f64() * 1e3;
            ReplanOutcome {
                status,
                chosen_branch: None,
                j1: None,
                j2: None,
                angle: None,
                r_a: radii.0,
                r_b: radii.1,
                timings: *timings,
                n_qp_solves: effort.qp_solves,
                nn_queries: effort.nn_queries,
                clouds_in_buffer: clouds.len(),
                b_point: None,
                t_splice,
            }
        };
        let no_effort = PrimjEffort::default();

        // Goal projection.
        let t0 = Instant::now();
        let goal = map.project_goal(&a.pos, g_term);
        timings.goal_ms = t0.elapsed().as_secs_f64() * 1e3;
        let Ok(goal) = goal else {
            return fail(
                ReplanStatus::GoalUnreachable,
                &mut timings,
                &t_total,
                (0.0, 0.0),
                no_effort,
            );
        };

        // Fresh grid path.
        let t0 = Instant::now();
        let jps1 = jps_search(map, &a.pos, &goal, &mut self.scratch, self.cfg.z_band);
        timings.jps_ms = t0.elapsed().as_secs_f64() * 1e3;
        let Ok(jps1) = jps1 else {
            return fail(
                ReplanStatus::NoPath,
                &mut timings,
                &t_total,
                (0.0, 0.0),
                no_effort,
            );
        };

        // Sphere radii: the inner radius follows the first path leg,
        // saturated into its configured band; both collapse to the goal
        // distance when the goal is close.
        let ag = (goal - a.pos).norm();
        let q2 = jps1.waypoints.get(1).copied().unwrap_or(goal);
        let r_a = (q2 - a.pos)
            .norm()
            .clamp(self.cfg.r_a_min, self.cfg.r_a_max)
            .min(ag);
        let r_b = self.cfg.r_b.min(ag);

        // Branch 1: sphere exit of the fresh path.
        let cut1 = first_sphere_intersection(&jps1, &a.pos, r_a);
        // When the whole path stays inside the sphere the primitive aims
        // at the goal itself, on its (smaller) actual radius.
        let r_eff1 = if cut1.inside {
            (cut1.point - a.pos).norm()
        } else {
            r_a
        };
        let queue1 = terminal_queue(
            &cut1.point,
            &jps1,
            &a.pos,
            r_eff1,
            cut1.wp_after,
            &self.cfg,
            self.prev_dir.as_ref(),
        );
        let p1 = get_primj(
            &queue1,
            &a,
            map,
            clouds,
            &self.cfg,
            &self.limits,
            &self.weight,
            &self.solve,
        );
        let mut n_qp_solves = 0u32;
        let mut nn_queries = 0;
        let p1 = match p1 {
            Ok(p1) => p1,
            Err(eff) => {
                timings.cvx_jerk_ms += eff.jerk_ms;
                timings.collision_ms += eff.collision_ms;
                return fail(
                    ReplanStatus::NoFeasibleTerminal,
                    &mut timings,
                    &t_total,
                    (r_a, r_b),
                    eff,
                );
            }
        };
        timings.cvx_jerk_ms += p1.jerk_ms;
        timings.collision_ms += p1.collision_ms;
        n_qp_solves += p1.qp_solves;
        nn_queries += p1.nn_queries;

        // Angle gate: consider repairing the previous route only when the
        // fresh one swings away hard.
        let mut angle = None;
        let mut branch2: Option<(PrimjOutcome, GridPath)> = None;
        if let (Some(prev_bp), Some(prev_jps)) = (&self.prev_bp, &self.prev_jps) {
            let ang = angle_between(&cut1.point, &a.pos, prev_bp);
            angle = Some(ang);
            if ang > self.cfg.alpha0 {
                let t0 = Instant::now();
                let jps2 = build_jps2(
                    prev_jps,
                    map,
                    &a.pos,
                    &goal,
                    &mut self.scratch,
                    self.cfg.z_band,
                );
                timings.jps_ms += t0.elapsed().as_secs_f64() * 1e3;
                if let Ok(jps2) = jps2 {
                    let cut2 = first_sphere_intersection(&jps2, &a.pos, r_a);
                    let r_eff2 = if cut2.inside {
                        (cut2.point - a.pos).norm()
                    } else {
                        r_a
                    };
                    let queue2 = terminal_queue(
                        &cut2.point,
                        &jps2,
                        &a.pos,
                        r_eff2,
                        cut2.wp_after,
                        &self.cfg,
                        self.prev_dir.as_ref(),
                    );
                    match get_primj(
                        &queue2,
                        &a,
                        map,
                        clouds,
                        &self.cfg,
                        &self.limits,
                        &self.weight,
                        &self.solve,
                    ) {
                        Ok(p2) => {
                            timings.cvx_jerk_ms += p2.jerk_ms;
                            timings.collision_ms += p2.collision_ms;
                            n_qp_solves += p2.qp_solves;
                            nn_queries += p2.nn_queries;
                            branch2 = Some((p2, jps2));
                        }
                        Err(eff) => {
                            timings.cvx_jerk_ms += eff.jerk_ms;
                            timings.collision_ms += eff.collision_ms;
                            n_qp_solves += eff.qp_solves;
                            nn_queries += eff.nn_queries;
                        }
                    }
                }
            }
        }

        // Costs and decision (ties go to the fresh path).
        let c1 = get_cost(
            &p1.primitive,
            &p1.terminal,
            &jps1,
            &a.pos,
            r_a,
            r_b,
            &self.limits,
            &self.solve,
        );
        timings.cvx_vel_ms += c1.vel_ms;
        let j1 = c1.total;
        let mut j2 = None;
        let mut choose_second = false;
        if let Some((p2, jps2)) = &branch2 {
            let c2 = get_cost(
                &p2.primitive,
                &p2.terminal,
                jps2,
                &a.pos,
                r_a,
                r_b,
                &self.limits,
                &self.solve,
            );
            timings.cvx_vel_ms += c2.vel_ms;
            j2 = Some(c2.total);
            choose_second = c2.total < j1;
        }

        let (chosen, chosen_path, chosen_bp, branch) = if choose_second {
            let (p2, jps2) = branch2.unwrap();
            let bp2 = first_sphere_intersection(&jps2, &a.pos, r_a).point;
            (p2, jps2, bp2, 2u8)
        } else {
            (p1, jps1, cut1.point, 1u8)
        };

        let b_point = chosen.terminal;
        let flown = b_point - a.pos;
        if flown.norm() > 1e-9 {
            self.prev_dir = Some(flown.normalize());
        }
        self.committed.splice_at(t_splice, chosen.primitive);
        self.prev_jps = Some(chosen_path);
        self.prev_bp = Some(chosen_bp);
        self.k += 1;

        timings.total_ms = t_total.elapsed().as_secs_f64() * 1e3;
        ReplanOutcome {
            status: ReplanStatus::Committed,
            chosen_branch: Some(branch),
            j1: Some(j1),
            j2,
            angle,
            r_a,
            r_b,
            timings,
            n_qp_solves,
            nn_queries,
            clouds_in_buffer: clouds.len(),
            b_point: Some(b_point),
            t_splice,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::DepthScan;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_limits() -> Limits {
        Limits {
            v_max: 2.0,
            a_max: 4.0,
            j_max: 15.0,
        }
    }

    fn engine_at(start: Point3<f64>) -> ReplanEngine {
        ReplanEngine::new(
            ReplanConfig::default(),
            test_limits(),
            TerminalWeight::default(),
            SolveOptions::default(),
            start,
        )
    }

    /// A 20 x 20 x 6 m window centered ahead of the origin with a broad
    /// free corridor carved along +x by a fan of unobstructed rays.
    fn carved_map(center: Point3<f64>, wall: Option<&[Point3<f64>]>) -> SlidingGrid {
        let mut grid = SlidingGrid::new(&center, &Vector3::new(20.0, 20.0, 6.0), 0.1, 3);
        let mut dirs = Vec::new();
        for dy in -30..=30 {
            for dz in -8..=8 {
                dirs.push(Vector3::new(1.0, dy as f64 * 0.03, dz as f64 * 0.05).normalize());
            }
        }
        let scan = DepthScan {
            origin: Point3::new(-1.0, 0.0, 0.0),
            points: wall.map(|w| w.to_vec()).unwrap_or_default(),
            max_range_dirs: dirs,
            max_range: 9.5,
            stamp: 1,
        };
        grid.fuse_scan(&scan);
        grid
    }

    fn wall_patch(x: f64, half_y: f64, half_z: f64) -> Vec<Point3<f64>> {
        let mut pts = Vec::new();
        let mut y = -half_y;
        while y <= half_y {
            let mut z = -half_z;
            while z <= half_z {
                pts.push(Point3::new(x, y, z));
                z += 0.05;
            }
            y += 0.05;
        }
        pts
    }

    #[test]
    fn test_angle_between_examples() {
        let a = Point3::new(1.0, 1.0, 1.0);
        let b = Point3::new(2.0, 1.0, 1.0);
        assert_eq!(angle_between(&b, &a, &b), 0.0);
        let c = Point3::new(1.0, 3.0, 1.0);
        assert_abs_diff_eq!(
            angle_between(&b, &a, &c),
            std::f64::consts::FRAC_PI_2,
            epsilon = 1e-12
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let u: Vector3<f64> = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let v: Vector3<f64> = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if u.norm() < 1e-6 || v.norm() < 1e-6 {
                continue;
            }
            let oracle = (u.dot(&v) / (u.norm() * v.norm())).clamp(-1.0, 1.0).acos();
            assert_abs_diff_eq!(
                angle_between(&(a + u), &a, &(a + v)),
                oracle,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn test_composite_trajectory_hover_splice_hold() {
        let start = Point3::new(1.0, 2.0, 3.0);
        let mut traj = CompositeTrajectory::at_rest(start);
        let hover = traj.sample(10.0);
        assert_eq!(hover.pos, start);
        assert_eq!(hover.vel.norm(), 0.0);

        let sol = solve_jerk(
            &FlatState::rest(start),
            &FlatState::rest(start + Vector3::new(2.0, 0.0, 0.0)),
            &test_limits(),
            &TerminalWeight::default(),
            &SolveOptions::default(),
        )
        .unwrap();
        let dur = sol.primitive.duration();
        let terminal_pos = sol.primitive.terminal.pos;
        traj.splice_at(0.5, sol.primitive);
        // Before the splice: still hovering at the initial point.
        assert_eq!(traj.sample(0.2).pos, start);
        // At the splice: the primitive's start state.
        assert_abs_diff_eq!((traj.sample(0.5).pos - start).norm(), 0.0, epsilon = 1e-12);
        // Beyond the end: rest at the terminal.
        let held = traj.sample(0.5 + dur + 5.0);
        assert_abs_diff_eq!((held.pos - terminal_pos).norm(), 0.0, epsilon = 1e-12);
        assert_eq!(held.vel.norm(), 0.0);
        assert_eq!(traj.end_time(), 0.5 + dur);
    }

    #[test]
    fn test_composite_splice_is_continuous() {
        let start = Point3::origin();
        let mut traj = CompositeTrajectory::at_rest(start);
        let sol = solve_jerk(
            &FlatState::rest(start),
            &FlatState::rest(Point3::new(3.0, 1.0, 0.0)),
            &test_limits(),
            &TerminalWeight::default(),
            &SolveOptions::default(),
        )
        .unwrap();
        traj.splice_at(0.0, sol.primitive);
        // Mid-flight resplice from the sampled state.
        let t_splice = 0.4;
        let a = traj.sample(t_splice);
        let sol2 = solve_jerk(
            &a,
            &FlatState::rest(Point3::new(1.0, 2.5, 0.5)),
            &test_limits(),
            &TerminalWeight::default(),
            &SolveOptions::default(),
        )
        .unwrap();
        traj.splice_at(t_splice, sol2.primitive);
        let before = traj.sample(t_splice - 1e-9);
        let after = traj.sample(t_splice + 1e-9);
        assert_abs_diff_eq!((before.pos - after.pos).norm(), 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!((before.vel - after.vel).norm(), 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!((before.acc - after.acc).norm(), 0.0, epsilon = 1e-6);
        assert_eq!(traj.pieces().len(), 2);
    }

    #[test]
    fn test_terminal_queue_straight_path() {
        let a = Point3::origin();
        let goal = Point3::new(10.0, 0.0, 0.0);
        let path = GridPath {
            waypoints: vec![a, goal],
            length: 10.0,
        };
        let cfg = ReplanConfig::default();
        let r = 2.0;
        let cut = first_sphere_intersection(&path, &a, r);
        let queue = terminal_queue(&cut.point, &path, &a, r, cut.wp_after, &cfg, None);
        assert_eq!(queue.len(), cfg.samples_total);
        assert_abs_diff_eq!((queue[0] - Point3::new(2.0, 0.0, 0.0)).norm(), 0.0, epsilon = 1e-9);
        for p in &queue {
            assert_abs_diff_eq!((p - a).norm(), r, epsilon = 1e-9);
        }
        // Straight path: no interior waypoints, so elements 1.. are rings
        // in increasing angular distance from the exit direction.
        let ring1 = angle_between(&queue[1], &a, &queue[0]);
        let ring2 = angle_between(&queue[1 + cfg.ring_points], &a, &queue[0]);
        assert_abs_diff_eq!(ring1, cfg.ring_step, epsilon = 1e-9);
        assert_abs_diff_eq!(ring2, 2.0 * cfg.ring_step, epsilon = 1e-9);
    }

    #[test]
    fn test_terminal_queue_arc_monotone_toward_projection() {
        // One interior waypoint pulls an arc of samples from the exit
        // direction back toward its radial projection.
        let a = Point3::origin();
        let q2 = Point3::new(0.8, 0.8, 0.0);
        let goal = Point3::new(4.0, 0.0, 0.0);
        let path = GridPath {
            waypoints: vec![a, q2, goal],
            length: (q2 - a).norm() + (goal - q2).norm(),
        };
        let cfg = ReplanConfig::default();
        let r = 2.0;
        let cut = first_sphere_intersection(&path, &a, r);
        assert_eq!(cut.wp_after, 2);
        let queue = terminal_queue(&cut.point, &path, &a, r, cut.wp_after, &cfg, None);
        let proj = a + (q2 - a).normalize() * r;
        let total = angle_between(&cut.point, &a, &proj);
        let steps = (total / cfg.arc_step).ceil() as usize;
        // Arc samples walk monotonically from the exit toward the
        // projection and land on it exactly.
        let mut prev = 0.0;
        for i in 1..=steps {
            let ang = angle_between(&queue[i], &a, &queue[0]);
            assert!(ang > prev - 1e-12);
            prev = ang;
        }
        assert_abs_diff_eq!((queue[steps] - proj).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn test_first_replan_commits_branch_one() {
        let map = carved_map(Point3::new(5.0, 0.0, 0.0), None);
        let clouds = CloudBuffer::new(4);
        let mut eng = engine_at(Point3::origin());
        let goal = Point3::new(6.0, 0.0, 0.0);
        let out = eng.replan(0.0, &goal, &map, &clouds);
        assert_eq!(out.status, ReplanStatus::Committed);
        assert_eq!(out.chosen_branch, Some(1));
        assert!(out.j1.is_some());
        assert!(out.j2.is_none(), "no previous cycle, so no second branch");
        assert!(out.angle.is_none());
        // Inner radius honors its band and the goal distance.
        assert!(out.r_a <= eng.config().r_a_max + 1e-9);
        assert!(out.r_a >= eng.config().r_a_min.min((goal - Point3::origin()).norm()) - 1e-9);
        assert_abs_diff_eq!(out.r_b, 6.0f64.min(eng.config().r_b), epsilon = 1e-6);
        // The accepted terminal sits on the inner sphere around the splice state.
        let a = eng.committed().sample(out.t_splice);
        assert_abs_diff_eq!(
            (out.b_point.unwrap() - a.pos).norm(),
            out.r_a,
            epsilon = 1e-6
        );
        assert_eq!(eng.k(), 1);
    }

    #[test]
    fn test_static_world_keeps_gate_closed() {
        let map = carved_map(Point3::new(5.0, 0.0, 0.0), None);
        let clouds = CloudBuffer::new(4);
        let mut eng = engine_at(Point3::origin());
        let goal = Point3::new(6.0, 0.0, 0.0);
        assert_eq!(eng.replan(0.0, &goal, &map, &clouds).status, ReplanStatus::Committed);
        for i in 1..4 {
            let out = eng.replan(0.05 * i as f64, &goal, &map, &clouds);
            assert_eq!(out.status, ReplanStatus::Committed);
            let ang = out.angle.expect("gate evaluated after the first cycle");
            assert!(
                ang <= eng.config().alpha0,
                "static world should not swing the path: angle {ang}"
            );
            assert!(out.j2.is_none(), "gate closed: second branch never costed");
        }
    }

    #[test]
    fn test_new_wall_opens_gate_and_costs_both_branches() {
        let center = Point3::new(5.0, 0.0, 0.0);
        let clouds = CloudBuffer::new(4);
        let mut eng = engine_at(Point3::origin());
        let goal = Point3::new(8.0, 0.0, 0.0);
        let map0 = carved_map(center, None);
        assert_eq!(eng.replan(0.0, &goal, &map0, &clouds).status, ReplanStatus::Committed);

        // A wall straddling the corridor appears right in front.
        let wall = wall_patch(2.5, 1.6, 0.9);
        let map1 = carved_map(center, Some(&wall));
        let out = eng.replan(0.05, &goal, &map1, &clouds);
        assert_eq!(out.status, ReplanStatus::Committed);
        let ang = out.angle.unwrap();
        assert!(
            ang > eng.config().alpha0,
            "detour should open the gate: angle {}°",
            ang.to_degrees()
        );
        let j2 = out.j2.expect("second branch must be costed when the gate opens");
        let j1 = out.j1.unwrap();
        let expect = if j2 < j1 { 2 } else { 1 };
        assert_eq!(out.chosen_branch, Some(expect));
        // Safety: the committed tail clears the snapshot it was planned on.
        let (ts, prim) = eng.committed().pieces().last().unwrap().clone();
        assert!(ts >= 0.05);
        let (clear, _) = primitive_clear_counted(
            &SweptBody::Jerk(&prim),
            &map1,
            &clouds,
            eng.config().r_drone,
            true,
            map1.voxel_size() / 2.0,
            None,
        );
        assert!(clear);
    }

    #[test]
    fn test_unknown_world_fails_safe_and_keeps_hover() {
        // Nothing fused: the goal projects into unknown space and the grid
        // search optimistically reaches it, but no terminal sample survives
        // the known-free gate, so the cycle fails without touching the
        // committed trajectory.
        let map = SlidingGrid::new(
            &Point3::new(5.0, 0.0, 0.0),
            &Vector3::new(20.0, 20.0, 6.0),
            0.1,
            3,
        );
        let clouds = CloudBuffer::new(4);
        let mut eng = engine_at(Point3::origin());
        let out = eng.replan(0.0, &Point3::new(6.0, 0.0, 0.0), &map, &clouds);
        assert_eq!(out.status, ReplanStatus::NoFeasibleTerminal);
        assert_eq!(eng.k(), 0);
        // Fallback: still hovering at the start.
        let held = eng.committed().sample(1.0);
        assert_eq!(held.pos, Point3::origin());
        assert_eq!(held.vel.norm(), 0.0);
    }

    #[test]
    fn test_get_primj_exhausts_queue_over_unknown_space() {
        // A queue over unfused (unknown) space rejects every candidate;
        // over a carved corridor the very first candidate is accepted with
        // exactly one QP solve.
        let a = FlatState::rest(Point3::origin());
        let goal = Point3::new(6.0, 0.0, 0.0);
        let path = GridPath {
            waypoints: vec![a.pos, goal],
            length: 6.0,
        };
        let cfg = ReplanConfig::default();
        let r = 2.0;
        let cut = first_sphere_intersection(&path, &a.pos, r);
        let queue = terminal_queue(&cut.point, &path, &a.pos, r, cut.wp_after, &cfg, None);
        let clouds = CloudBuffer::new(4);
        let limits = test_limits();
        let weight = TerminalWeight::default();
        let solve = SolveOptions::default();

        let unknown = SlidingGrid::new(
            &Point3::new(5.0, 0.0, 0.0),
            &Vector3::new(20.0, 20.0, 6.0),
            0.1,
            3,
        );
        let rejected = get_primj(&queue, &a, &unknown, &clouds, &cfg, &limits, &weight, &solve);
        let spent = rejected.expect_err("unknown space must reject the whole queue");
        assert_eq!(
            spent.qp_solves as usize,
            queue.len(),
            "every candidate costs a solve before its gate check"
        );

        let carved = carved_map(Point3::new(5.0, 0.0, 0.0), None);
        let accepted = get_primj(&queue, &a, &carved, &clouds, &cfg, &limits, &weight, &solve)
            .expect("carved corridor accepts a terminal");
        assert_eq!(accepted.queue_index, 0, "first candidate wins in free space");
        assert_eq!(accepted.qp_solves, 1, "free space costs exactly one solve");
        assert_abs_diff_eq!((accepted.terminal - cut.point).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn test_build_jps2_reuses_clear_path() {
        let map = carved_map(Point3::new(5.0, 0.0, 0.0), None);
        let mut scratch = JpsScratch::new();
        let a = Point3::origin();
        let goal = Point3::new(6.0, 0.0, 0.0);
        let prev = jps_search(&map, &a, &goal, &mut scratch, None).unwrap();
        let again = build_jps2(&prev, &map, &a, &goal, &mut scratch, None).unwrap();
        assert_eq!(again.waypoints.len(), prev.waypoints.len());
        assert_abs_diff_eq!(again.length, prev.length, epsilon = 1e-12);
    }

    #[test]
    fn test_build_jps2_repairs_blocked_path() {
        let center = Point3::new(5.0, 0.0, 0.0);
        let a = Point3::origin();
        let goal = Point3::new(6.0, 0.0, 0.0);
        let mut scratch = JpsScratch::new();
        let map0 = carved_map(center, None);
        let prev = jps_search(&map0, &a, &goal, &mut scratch, None).unwrap();

        let wall = wall_patch(3.0, 1.2, 0.8);
        let map1 = carved_map(center, Some(&wall));
        assert!(path_first_last_blocked(&prev, &map1).is_some());
        let repaired = build_jps2(&prev, &map1, &a, &goal, &mut scratch, None).unwrap();
        assert!(repaired.length >= prev.length - 1e-9);
        assert!(
            path_first_last_blocked(&repaired, &map1).is_none(),
            "repaired route must avoid the new wall"
        );
        // Waypoints deduplicated at the seams.
        for w in repaired.waypoints.windows(2) {
            assert!((w[1] - w[0]).norm() > 1e-9);
        }
    }

    #[test]
    fn test_cost_reduces_to_jerk_term_when_goal_is_close() {
        let map = carved_map(Point3::new(5.0, 0.0, 0.0), None);
        let clouds = CloudBuffer::new(4);
        let mut eng = engine_at(Point3::origin());
        // Goal inside the inner sphere band.
        let goal = Point3::new(1.0, 0.0, 0.0);
        let out = eng.replan(0.0, &goal, &map, &clouds);
        assert_eq!(out.status, ReplanStatus::Committed);
        let prim = &eng.committed().pieces()[0].1;
        let expected = cost_jerk(prim, test_limits().j_max);
        assert_abs_diff_eq!(out.j1.unwrap(), expected, epsilon = 1e-9);
    }
}
