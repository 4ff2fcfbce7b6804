//! Shared helpers for integration tests: an independent 26-connected A*
//! (the reference the jump-point search must match move for move), random
//! grid generation, and path legality checks.

#![allow(dead_code)]

pub mod qp;

use mfplan::map::{DepthScan, GlobalCell, SlidingGrid};
use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

pub const SQRT2: f64 = std::f64::consts::SQRT_2;
pub const SQRT3: f64 = 1.732_050_807_568_877_2;

/// The 26 unit moves of the voxel graph.
pub fn moves26() -> Vec<Vector3<i64>> {
    let mut v = Vec::with_capacity(26);
    for x in -1i64..=1 {
        for y in -1i64..=1 {
            for z in -1i64..=1 {
                if x != 0 || y != 0 || z != 0 {
                    v.push(Vector3::new(x, y, z));
                }
            }
        }
    }
    v
}

pub fn move_cost(m: &Vector3<i64>) -> f64 {
    match m.x.abs() + m.y.abs() + m.z.abs() {
        1 => 1.0,
        2 => SQRT2,
        3 => SQRT3,
        _ => unreachable!(),
    }
}

/// Movement rule shared with the planner: the target cell must be free and,
/// for multi-axis moves, so must the cell one step along each participating
/// axis (no squeezing between corners).
pub fn move_legal(blocked: &impl Fn(GlobalCell) -> bool, from: GlobalCell, m: &Vector3<i64>) -> bool {
    if blocked(from + m) {
        return false;
    }
    let axes = (m.x != 0) as u8 + (m.y != 0) as u8 + (m.z != 0) as u8;
    if axes >= 2 {
        for i in 0..3 {
            if m[i] != 0 {
                let mut c = from;
                c[i] += m[i];
                if blocked(c) {
                    return false;
                }
            }
        }
    }
    true
}

/// Exact free-space distance on the move set (admissible heuristic).
pub fn octile3(d: Vector3<i64>) -> f64 {
    let mut a = d.x.abs();
    let mut b = d.y.abs();
    let mut c = d.z.abs();
    if a < b {
        std::mem::swap(&mut a, &mut b);
    }
    if b < c {
        std::mem::swap(&mut b, &mut c);
    }
    if a < b {
        std::mem::swap(&mut a, &mut b);
    }
    (a - b) as f64 + (b - c) as f64 * SQRT2 + c as f64 * SQRT3
}

#[derive(PartialEq)]
struct QEntry {
    f: f64,
    cell: GlobalCell,
}

impl Eq for QEntry {}
impl Ord for QEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.f.total_cmp(&self.f)
    }
}
impl PartialOrd for QEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Plain A* over the 26-connected graph with the shared movement rule.
/// `blocked` must already handle out-of-window cells (return true). The
/// start cell is treated as free, matching the planner. Returns the optimal
/// path cost in cell units, or `None` when the goal is unreachable.
pub fn astar_26(
    blocked: &impl Fn(GlobalCell) -> bool,
    dims: [usize; 3],
    origin: GlobalCell,
    start: GlobalCell,
    goal: GlobalCell,
) -> Option<f64> {
    let moves = moves26();
    let idx = |c: GlobalCell| -> Option<usize> {
        let l = c - origin;
        if l.x < 0
            || l.y < 0
            || l.z < 0
            || l.x >= dims[0] as i64
            || l.y >= dims[1] as i64
            || l.z >= dims[2] as i64
        {
            return None;
        }
        Some(((l.z * dims[1] as i64 + l.y) * dims[0] as i64 + l.x) as usize)
    };
    let b = |c: GlobalCell| -> bool {
        if c == start {
            return false;
        }
        blocked(c)
    };
    let n = dims[0] * dims[1] * dims[2];
    let mut g = vec![f64::INFINITY; n];
    let mut closed = vec![false; n];
    let si = idx(start)?;
    idx(goal)?;
    g[si] = 0.0;
    let mut open = BinaryHeap::new();
    open.push(QEntry {
        f: octile3(goal - start),
        cell: start,
    });
    while let Some(e) = open.pop() {
        let ci = idx(e.cell).unwrap();
        if closed[ci] {
            continue;
        }
        closed[ci] = true;
        if e.cell == goal {
            return Some(g[ci]);
        }
        for m in &moves {
            if !move_legal(&b, e.cell, m) {
                continue;
            }
            let nb = e.cell + m;
            let ni = match idx(nb) {
                Some(i) => i,
                None => continue,
            };
            let ng = g[ci] + move_cost(m);
            if ng < g[ni] {
                g[ni] = ng;
                open.push(QEntry {
                    f: ng + octile3(goal - nb),
                    cell: nb,
                });
            }
        }
    }
    None
}

/// A cubic grid of side `n` voxels at `voxel_size`, populated with random
/// occupancy at probability `p` (start/goal corner cells kept free). The
/// occupancy is written through the normal scan-fusion path.
pub struct RandomGrid {
    pub grid: SlidingGrid,
    pub start_cell: GlobalCell,
    pub goal_cell: GlobalCell,
}

pub fn random_grid(seed: u64, n: usize, voxel_size: f64, p: f64) -> RandomGrid {
    let side = n as f64 * voxel_size;
    let center = Point3::new(side / 2.0, side / 2.0, side / 2.0);
    let mut grid = SlidingGrid::new(&center, &Vector3::new(side, side, side), voxel_size, 0);
    let start_cell = Vector3::new(0i64, 0, 0);
    let goal_cell = Vector3::new(n as i64 - 1, n as i64 - 1, n as i64 - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stamp = 0u64;
    for z in 0..n as i64 {
        for y in 0..n as i64 {
            for x in 0..n as i64 {
                let occupy = rng.gen::<f64>() < p;
                let cell = Vector3::new(x, y, z);
                if occupy && cell != start_cell && cell != goal_cell {
                    stamp += 1;
                    let c = grid.voxel_center(cell);
                    grid.fuse_scan(&DepthScan {
                        origin: c,
                        points: vec![c],
                        max_range_dirs: vec![],
                        max_range: 1.0,
                        stamp,
                    });
                }
            }
        }
    }
    RandomGrid {
        grid,
        start_cell,
        goal_cell,
    }
}

/// Check that a waypoint polyline is realizable on the grid: every segment
/// must be a straight run of one move direction whose steps all satisfy the
/// movement rule (start cell exempt, as in the search).
pub fn assert_path_moves_legal(path: &mfplan::jps::GridPath, grid: &SlidingGrid) {
    let start_cell = grid.cell_of(&path.waypoints[0]);
    let b = |c: GlobalCell| -> bool {
        if c == start_cell {
            return false;
        }
        grid.blocked_inflated(c)
    };
    for w in path.waypoints.windows(2) {
        let a = grid.cell_of(&w[0]);
        let z = grid.cell_of(&w[1]);
        let d = z - a;
        let m = Vector3::new(d.x.signum(), d.y.signum(), d.z.signum());
        let steps = d.x.abs().max(d.y.abs()).max(d.z.abs());
        // A straight run: the delta must be an integer multiple of the move.
        assert_eq!(d, m * steps, "segment is not a straight grid run");
        let mut cur = a;
        for _ in 0..steps {
            assert!(
                move_legal(&b, cur, &m),
                "illegal move {m:?} at cell {cur:?}"
            );
            cur += m;
        }
    }
}
