//! Collision gate: the fused map answers for space the mapper has already
//! integrated, while k-d trees over the most recent *unfused* depth clouds
//! cover the sensing-to-fusion latency gap. A trajectory is accepted only
//! if every sample point passes both.
//!
//! Jerk-controlled primitives are held to the strict standard — their
//! samples must land in voxels known `Free` (unknown space is treated as an
//! obstacle) — because the vehicle will actually fly them. The geometric
//! tail (grid path and velocity segments) only has to avoid `Occupied`
//! voxels: it reaches into space the sensor has not seen yet, and demanding
//! known-free there would make every long path infeasible.
//!
//! The map encodes the vehicle radius by dilating occupied voxels when
//! scans are fused; the cloud side enforces the same radius directly as a
//! nearest-neighbor distance bound.

use crate::map::{SlidingGrid, VoxelState};
use crate::primitives::{JerkPrimitive, VelPrimitive};
use nalgebra::Point3;
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("cloud stamp {stamp} not newer than {newest}")]
    NonMonotonicStamp { stamp: u64, newest: u64 },
}

// ---------------------------------------------------------------------------
// k-d tree
// ---------------------------------------------------------------------------

/// A static k-d tree over one depth cloud, stored as an implicit balanced
/// tree: the median of each range is the node, halves are the subtrees,
/// and the split axis cycles with depth.
#[derive(Debug, Clone)]
pub struct KdCloud {
    pts: Vec<Point3<f64>>,
    stamp: u64,
}

impl KdCloud {
    pub fn build(mut pts: Vec<Point3<f64>>, stamp: u64) -> Self {
        fn partition(pts: &mut [Point3<f64>], depth: usize) {
            if pts.len() <= 1 {
                return;
            }
            let axis = depth % 3;
            let mid = pts.len() / 2;
            pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
            let (lo, rest) = pts.split_at_mut(mid);
            partition(lo, depth + 1);
            partition(&mut rest[1..], depth + 1);
        }
        partition(&mut pts, 0);
        KdCloud { pts, stamp }
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    pub fn size(&self) -> usize {
        self.pts.len()
    }

    /// Exact distance from `p` to the nearest stored point; +inf if empty.
    pub fn nn_dist(&self, p: &Point3<f64>) -> f64 {
        fn descend(pts: &[Point3<f64>], depth: usize, p: &Point3<f64>, best: &mut f64) {
            if pts.is_empty() {
                return;
            }
            let axis = depth % 3;
            let mid = pts.len() / 2;
            let d2 = (pts[mid] - p).norm_squared();
            if d2 < *best {
                *best = d2;
            }
            let delta = p[axis] - pts[mid][axis];
            let (near, far) = if delta < 0.0 {
                (&pts[..mid], &pts[mid + 1..])
            } else {
                (&pts[mid + 1..], &pts[..mid])
            };
            descend(near, depth + 1, p, best);
            if delta * delta < *best {
                descend(far, depth + 1, p, best);
            }
        }
        let mut best2 = f64::INFINITY;
        descend(&self.pts, 0, p, &mut best2);
        best2.sqrt()
    }
}

// ---------------------------------------------------------------------------
// Cloud buffer
// ---------------------------------------------------------------------------

/// Ring of the most recent clouds that the mapper has *not* fused yet,
/// ordered by stamp. Once the map integrates a scan, the watermark advances
/// and everything at or below it is dropped — the map now answers for that
/// data.
#[derive(Debug, Clone)]
pub struct CloudBuffer {
    clouds: VecDeque<KdCloud>,
    capacity: usize,
    watermark: u64,
}

impl CloudBuffer {
    pub fn new(capacity: usize) -> Self {
        CloudBuffer {
            clouds: VecDeque::with_capacity(capacity),
            capacity,
            watermark: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn watermark(&self) -> u64 {
        self.watermark
    }

    pub fn stamps(&self) -> impl Iterator<Item = u64> + '_ {
        self.clouds.iter().map(|c| c.stamp)
    }

    /// Insert a freshly acquired cloud. Stamps must strictly increase; the
    /// oldest cloud is dropped once the ring is full.
    pub fn push_cloud(
        &mut self,
        points: Vec<Point3<f64>>,
        stamp: u64,
    ) -> Result<(), CloudError> {
        let newest = self.clouds.back().map(|c| c.stamp).unwrap_or(self.watermark);
        if stamp <= newest {
            return Err(CloudError::NonMonotonicStamp { stamp, newest });
        }
        if self.clouds.len() == self.capacity {
            self.clouds.pop_front();
        }
        self.clouds.push_back(KdCloud::build(points, stamp));
        Ok(())
    }

    /// Record that the map has fused every scan up to `fused_stamp` and
    /// evict the clouds the map now covers.
    pub fn advance_watermark(&mut self, fused_stamp: u64) {
        self.watermark = self.watermark.max(fused_stamp);
        while self
            .clouds
            .front()
            .is_some_and(|c| c.stamp <= self.watermark)
        {
            self.clouds.pop_front();
        }
    }

    /// Exact distance from `p` to the nearest point in any retained cloud.
    pub fn nearest_obstacle_distance(&self, p: &Point3<f64>) -> f64 {
        self.clouds
            .iter()
            .map(|c| c.nn_dist(p))
            .fold(f64::INFINITY, f64::min)
    }
}

// ---------------------------------------------------------------------------
// Trajectory sampling
// ---------------------------------------------------------------------------

/// Anything the gate can sweep along: a jerk primitive, a velocity
/// primitive, or a bare waypoint polyline.
#[derive(Debug, Clone, Copy)]
pub enum SweptBody<'a> {
    Jerk(&'a JerkPrimitive),
    Velocity(&'a VelPrimitive),
    Polyline(&'a [Point3<f64>]),
}

/// Sample the body so consecutive points are at most `step` apart along the
/// trajectory, always including segment/knot endpoints.
pub fn sample_points(body: &SweptBody, step: f64) -> Vec<Point3<f64>> {
    let mut out = Vec::new();
    match body {
        SweptBody::Jerk(prim) => {
            let knots = prim.rollout();
            out.push(knots[0].pos);
            for (k, u) in prim.inputs.iter().enumerate() {
                let x = &knots[k];
                // Per-axis speed bound over the step: |v| is quadratic in
                // time, so its maximum is at an endpoint or the vertex.
                let mut bound2 = 0.0;
                for ax in 0..3 {
                    let (v0, a0, j) = (x.vel[ax], x.acc[ax], u[ax]);
                    let mut m = v0.abs().max(knots[k + 1].vel[ax].abs());
                    if j.abs() > 1e-12 {
                        let tv = -a0 / j;
                        if (0.0..=prim.dt).contains(&tv) {
                            m = m.max((v0 + a0 * tv + j * tv * tv / 2.0).abs());
                        }
                    }
                    bound2 += m * m;
                }
                let arc_bound = bound2.sqrt() * prim.dt;
                let sub = (arc_bound / step).ceil().max(1.0) as usize;
                for i in 1..=sub {
                    let tau = prim.dt * i as f64 / sub as f64;
                    let mut p = Point3::origin();
                    for ax in 0..3 {
                        p[ax] = x.pos[ax]
                            + x.vel[ax] * tau
                            + x.acc[ax] * tau * tau / 2.0
                            + u[ax] * tau * tau * tau / 6.0;
                    }
                    out.push(p);
                }
            }
        }
        SweptBody::Velocity(prim) => {
            let mut pos = prim.p0;
            out.push(pos);
            for v in &prim.inputs {
                let arc = v.norm() * prim.dt;
                let sub = (arc / step).ceil().max(1.0) as usize;
                for i in 1..=sub {
                    out.push(pos + v * (prim.dt * i as f64 / sub as f64));
                }
                pos += v * prim.dt;
            }
        }
        SweptBody::Polyline(pts) => {
            if pts.is_empty() {
                return out;
            }
            out.push(pts[0]);
            for w in pts.windows(2) {
                let seg = w[1] - w[0];
                let sub = (seg.norm() / step).ceil().max(1.0) as usize;
                for i in 1..=sub {
                    out.push(w[0] + seg * (i as f64 / sub as f64));
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// The gate
// ---------------------------------------------------------------------------

/// Body-clearance radius against occupied voxel *centers* for executable
/// (jerk) primitives. On top of the vehicle radius it absorbs the half
/// diagonal a voxel center may sit from the surface point that produced it,
/// plus half a voxel for the drift of a curved sweep sampled at `voxel/2`
/// steps (chord deviation and sag near direction reversals).
fn map_margin(r_drone: f64, voxel: f64) -> f64 {
    r_drone + voxel * (3f64.sqrt() / 2.0 + 0.5)
}

/// Body-clearance radius against raw (unfused) cloud points. One more half
/// diagonal on top of the map margin, so any sample accepted against a fresh
/// cloud is still accepted against the voxels that cloud later fuses into —
/// without this the vehicle can legally park itself inside the fused margin
/// and then find every escape primitive rejected.
fn cloud_margin(r_drone: f64, voxel: f64) -> f64 {
    map_margin(r_drone, voxel) + voxel * 3f64.sqrt() / 2.0
}

/// Sweep `body` through the map snapshot and the unfused clouds. `step`
/// should be at most half the voxel size; knot points are always included.
///
/// With `check_unknown` set (executable jerk primitives) every sample must
/// lie in known-free space with full body clearance to occupied voxel
/// centers and to every buffered cloud point. Without it (velocity
/// primitives used for cost estimation, committed-tail audits) unknown space
/// is tolerated and the cruder Chebyshev dilation stands in for the
/// clearance term.
pub fn primitive_clear(
    body: &SweptBody,
    map: &SlidingGrid,
    buffer: &CloudBuffer,
    r_drone: f64,
    check_unknown: bool,
    step: f64,
) -> bool {
    primitive_clear_counted(body, map, buffer, r_drone, check_unknown, step, None).0
}

/// `primitive_clear` plus the sample/query counts the trace records, and an
/// optional altitude envelope every sample must stay inside (the planner's
/// flight-altitude limits; see the replan configuration).
pub fn primitive_clear_counted(
    body: &SweptBody,
    map: &SlidingGrid,
    buffer: &CloudBuffer,
    r_drone: f64,
    check_unknown: bool,
    step: f64,
    z_band: Option<(f64, f64)>,
) -> (bool, u64) {
    let pts = sample_points(body, step);
    let queries = (pts.len() * buffer.len()) as u64;
    if let Some((lo, hi)) = z_band {
        if pts.iter().any(|p| p.z < lo || p.z > hi) {
            return (false, queries);
        }
    }
    if !check_unknown {
        // Cost-side checks: unknown space is traversable, occupied is not.
        let ok = pts.iter().all(|p| {
            let g = map.cell_of(p);
            map.state(g) != VoxelState::Occupied
                && (!map.in_window(g) || !map.blocked_inflated(g))
                && buffer.nearest_obstacle_distance(p) >= r_drone
        });
        return (ok, queries);
    }

    let voxel = map.voxel_size();
    let r_map = map_margin(r_drone, voxel);
    let r_cloud = cloud_margin(r_drone, voxel);

    // Escape mode: when the sweep starts already inside either margin —
    // surfaces can be revealed arbitrarily close to a position that was
    // committed in good faith — samples near the start only have to not get
    // closer to the offending geometry than the start is. Everything past
    // the escape ball meets the full margins, so accepted primitives always
    // move the vehicle back out rather than letting it burrow deeper.
    let start = pts[0];
    let d_map_start = map.occupied_distance(&start, r_map);
    let d_cloud_start = buffer.nearest_obstacle_distance(&start);
    let escape_r = r_drone + 2.0 * voxel;
    let escaping = d_map_start < r_map || d_cloud_start < r_cloud;

    let ok = pts.iter().all(|p| {
        if map.state(map.cell_of(p)) != VoxelState::Free {
            return false;
        }
        let (min_map, min_cloud) = if escaping && (p - start).norm() <= escape_r {
            // The slack keeps the start from failing its *own* bound: its
            // distance comes back through a sqrt and the containment test
            // re-squares it, and the two roundings need not agree.
            ((d_map_start - 1e-9).min(r_map), (d_cloud_start - 1e-9).min(r_cloud))
        } else {
            (r_map, r_cloud)
        };
        !map.occupied_within(p, min_map) && buffer.nearest_obstacle_distance(p) >= min_cloud
    });
    (ok, queries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::DepthScan;
    use crate::primitives::{solve_velocity_chain, FlatState, Limits, SolveOptions, TerminalWeight};
    use nalgebra::Vector3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, span: f64) -> Vec<Point3<f64>> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-span..span),
                    rng.gen_range(-span..span),
                    rng.gen_range(-span..span),
                )
            })
            .collect()
    }

    #[test]
    fn test_kd_nn_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts = random_points(&mut rng, 1000, 10.0);
        let cloud = KdCloud::build(pts.clone(), 1);
        assert_eq!(cloud.size(), 1000);
        for _ in 0..200 {
            let q = Point3::new(
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
            );
            let brute = pts
                .iter()
                .map(|p| (p - q).norm())
                .fold(f64::INFINITY, f64::min);
            let got = cloud.nn_dist(&q);
            assert!((got - brute).abs() <= 1e-12, "{got} vs {brute}");
        }
    }

    #[test]
    fn test_kd_trivial_cases() {
        let empty = KdCloud::build(vec![], 1);
        assert!(empty.nn_dist(&Point3::origin()).is_infinite());
        let one = KdCloud::build(vec![Point3::new(2.0, 0.0, 0.0)], 2);
        assert_eq!(one.nn_dist(&Point3::origin()), 2.0);
    }

    #[test]
    fn test_buffer_push_and_capacity() {
        let mut buf = CloudBuffer::new(4);
        buf.push_cloud(vec![Point3::origin()], 1).unwrap();
        assert_eq!(buf.len(), 1);
        for s in 2..=5 {
            buf.push_cloud(vec![], s).unwrap();
        }
        assert_eq!(buf.len(), 4);
        assert_eq!(buf.stamps().collect::<Vec<_>>(), vec![2, 3, 4, 5]);
    }

    #[test]
    fn test_buffer_rejects_stale_stamp() {
        let mut buf = CloudBuffer::new(4);
        buf.push_cloud(vec![], 3).unwrap();
        assert!(matches!(
            buf.push_cloud(vec![], 3),
            Err(CloudError::NonMonotonicStamp { .. })
        ));
        assert!(buf.push_cloud(vec![], 2).is_err());
    }

    #[test]
    fn test_watermark_eviction_matches_reference_model() {
        let mut buf = CloudBuffer::new(4);
        for s in [10, 11, 12] {
            buf.push_cloud(vec![], s).unwrap();
        }
        // Reference model: a buffer is just the set {s : s > watermark},
        // newest-capacity-capped.
        buf.advance_watermark(11);
        assert_eq!(buf.stamps().collect::<Vec<_>>(), vec![12]);
        assert_eq!(buf.watermark(), 11);
        // Watermark never regresses.
        buf.advance_watermark(5);
        assert_eq!(buf.watermark(), 11);
        buf.advance_watermark(12);
        assert!(buf.is_empty());
        // New clouds after eviction must still be newer than the watermark.
        assert!(buf.push_cloud(vec![], 12).is_err());
        buf.push_cloud(vec![], 13).unwrap();
        assert_eq!(buf.len(), 1);
    }

    #[test]
    fn test_buffer_nearest_distance() {
        let mut buf = CloudBuffer::new(4);
        assert!(buf
            .nearest_obstacle_distance(&Point3::origin())
            .is_infinite());
        buf.push_cloud(vec![Point3::new(2.0, 0.0, 0.0)], 1).unwrap();
        buf.push_cloud(vec![Point3::new(0.0, 1.0, 0.0)], 2).unwrap();
        assert_eq!(buf.nearest_obstacle_distance(&Point3::origin()), 1.0);
    }

    /// A 12 m window around the origin with one occupied voxel at `hit`
    /// (when given) and free space carved along the +x corridor.
    fn corridor_map(hit: Option<Point3<f64>>) -> SlidingGrid {
        let mut grid = SlidingGrid::new(
            &Point3::origin(),
            &Vector3::new(12.0, 12.0, 4.0),
            0.1,
            3,
        );
        let mut dirs = Vec::new();
        // A fan of rays around +x carves a generous free corridor.
        for dy in -10..=10 {
            for dz in -5..=5 {
                dirs.push(
                    Vector3::new(1.0, dy as f64 * 0.02, dz as f64 * 0.02).normalize(),
                );
            }
        }
        let scan = DepthScan {
            origin: Point3::new(-2.0, 0.0, 0.0),
            points: hit.into_iter().collect(),
            max_range_dirs: dirs,
            max_range: 8.0,
            stamp: 1,
        };
        grid.fuse_scan(&scan);
        grid
    }

    fn straight_vel(from: Point3<f64>, to: Point3<f64>) -> VelPrimitive {
        solve_velocity_chain(&[from, to], 2.0, 10, 1e-3)
            .pop()
            .unwrap()
    }

    #[test]
    fn test_clear_rejects_occupied_voxel() {
        let map = corridor_map(Some(Point3::new(2.0, 0.0, 0.0)));
        let buf = CloudBuffer::new(4);
        let prim = straight_vel(Point3::new(0.0, 0.0, 0.0), Point3::new(4.0, 0.0, 0.0));
        assert!(!primitive_clear(
            &SweptBody::Velocity(&prim),
            &map,
            &buf,
            0.3,
            false,
            0.05
        ));
    }

    #[test]
    fn test_clear_unknown_policy_depends_on_flag() {
        // Fresh map: everything unknown.
        let map = SlidingGrid::new(
            &Point3::origin(),
            &Vector3::new(12.0, 12.0, 4.0),
            0.1,
            3,
        );
        let buf = CloudBuffer::new(4);
        let x0 = FlatState::rest(Point3::new(0.0, 0.0, 0.0));
        let xf = FlatState::rest(Point3::new(2.0, 0.0, 0.0));
        let sol = crate::primitives::solve_jerk(
            &x0,
            &xf,
            &Limits {
                v_max: 2.0,
                a_max: 4.0,
                j_max: 15.0,
            },
            &TerminalWeight::default(),
            &SolveOptions::default(),
        )
        .unwrap();
        let body = SweptBody::Jerk(&sol.primitive);
        assert!(!primitive_clear(&body, &map, &buf, 0.3, true, 0.05));
        assert!(primitive_clear(&body, &map, &buf, 0.3, false, 0.05));
    }

    #[test]
    fn test_clear_rejects_unfused_cloud_point_until_evicted() {
        let map = corridor_map(None);
        let mut buf = CloudBuffer::new(4);
        let prim = straight_vel(Point3::new(0.0, 0.0, 0.0), Point3::new(4.0, 0.0, 0.0));
        let body = SweptBody::Velocity(&prim);
        assert!(primitive_clear(&body, &map, &buf, 0.3, false, 0.05));
        // An unfused return 0.1 m off the path trips the radius check.
        buf.push_cloud(vec![Point3::new(2.0, 0.1, 0.0)], 5).unwrap();
        assert!(!primitive_clear(&body, &map, &buf, 0.3, false, 0.05));
        buf.advance_watermark(5);
        assert!(primitive_clear(&body, &map, &buf, 0.3, false, 0.05));
    }

    #[test]
    fn test_adding_clouds_is_monotone() {
        let map = corridor_map(None);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let prim = straight_vel(
                Point3::new(0.0, rng.gen_range(-0.5..0.5), 0.0),
                Point3::new(4.0, rng.gen_range(-0.5..0.5), 0.0),
            );
            let body = SweptBody::Velocity(&prim);
            let mut buf = CloudBuffer::new(4);
            let mut prev = primitive_clear(&body, &map, &buf, 0.3, false, 0.05);
            for s in 1..=4 {
                let pts = (0..20)
                    .map(|_| {
                        Point3::new(
                            rng.gen_range(0.0..4.0),
                            rng.gen_range(-2.0..2.0),
                            rng.gen_range(-1.0..1.0),
                        )
                    })
                    .collect();
                buf.push_cloud(pts, s).unwrap();
                let now = primitive_clear(&body, &map, &buf, 0.3, false, 0.05);
                assert!(
                    !(now && !prev),
                    "adding a cloud flipped the gate from blocked to clear"
                );
                prev = now;
            }
        }
    }

    #[test]
    fn test_fusing_a_cloud_preserves_decisions_outside_margin() {
        // For returns well clear of the radius band, moving a cloud from
        // the buffer into the map (and evicting it) must not change the
        // verdict. The band itself is excluded: voxelization shifts the
        // effective boundary by up to a voxel diagonal plus dilation.
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let r = 0.3;
        let diag = 0.1 * 3.0f64.sqrt();
        for trial in 0..40 {
            let lateral = if trial % 2 == 0 {
                rng.gen_range(0.0..r - diag) // clearly blocking
            } else {
                rng.gen_range(r + 3.0 * diag..1.5) // clearly clear
            };
            let pt = Point3::new(rng.gen_range(1.0..3.0), lateral, 0.0);
            let prim = straight_vel(Point3::origin(), Point3::new(4.0, 0.0, 0.0));
            let body = SweptBody::Velocity(&prim);

            let map = corridor_map(None);
            let mut buf = CloudBuffer::new(4);
            buf.push_cloud(vec![pt], 2).unwrap();
            let before = primitive_clear(&body, &map, &buf, r, false, 0.05);

            let fused = corridor_map(Some(pt));
            buf.advance_watermark(2);
            let after = primitive_clear(&body, &fused, &buf, r, false, 0.05);
            assert_eq!(
                before, after,
                "trial {trial}: lateral {lateral:.3} changed verdict across fusion"
            );
        }
    }

    #[test]
    fn test_sample_spacing_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let step = 0.05;
        for _ in 0..20 {
            let prim = straight_vel(
                Point3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-1.0..1.0),
                ),
                Point3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-1.0..1.0),
                ),
            );
            let pts = sample_points(&SweptBody::Velocity(&prim), step);
            for w in pts.windows(2) {
                assert!((w[1] - w[0]).norm() <= step + 1e-9);
            }
        }
        // Jerk bodies: spacing bound plus exact knot inclusion.
        let x0 = FlatState {
            pos: Point3::origin(),
            vel: Vector3::new(1.0, -0.5, 0.2),
            acc: Vector3::new(0.5, 1.0, -0.3),
        };
        let xf = FlatState::rest(Point3::new(3.0, 1.0, 0.5));
        let sol = crate::primitives::solve_jerk(
            &x0,
            &xf,
            &Limits {
                v_max: 2.0,
                a_max: 4.0,
                j_max: 15.0,
            },
            &TerminalWeight::default(),
            &SolveOptions::default(),
        )
        .unwrap();
        let pts = sample_points(&SweptBody::Jerk(&sol.primitive), step);
        for w in pts.windows(2) {
            assert!((w[1] - w[0]).norm() <= step + 1e-9);
        }
        let knots = sol.primitive.rollout();
        for k in &knots {
            assert!(
                pts.iter().any(|p| (p - k.pos).norm() < 1e-9),
                "knot missing from samples"
            );
        }
    }
}
