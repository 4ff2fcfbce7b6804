//! The jump-point search must return exactly the optimal 26-connected path
//! cost; this is checked against an independent plain A* on randomized
//! grids, including unreachable cases.

mod common;

use common::{astar_26, assert_path_moves_legal, random_grid};
use mfplan::jps::{jps_search, JpsScratch, PlanError};

/// Run both searches corner to corner on one random grid; panics with the
/// seed on any disagreement.
fn compare_on_grid(seed: u64, n: usize, p: f64, scratch: &mut JpsScratch) -> bool {
    let rg = random_grid(seed, n, 0.1, p);
    let grid = &rg.grid;
    let start = grid.voxel_center(rg.start_cell);
    let goal = grid.voxel_center(rg.goal_cell);
    let oracle = astar_26(
        &|c| grid.blocked_inflated(c),
        grid.dims(),
        grid.origin(),
        rg.start_cell,
        rg.goal_cell,
    );
    match jps_search(grid, &start, &goal, scratch, None) {
        Ok(path) => {
            let expect = oracle.unwrap_or_else(|| {
                panic!("seed {seed}: jump-point search found a path where A* found none")
            });
            let got = path.length;
            let want = expect * grid.voxel_size();
            assert!(
                (got - want).abs() <= 1e-9,
                "seed {seed}: length mismatch, jps {got:.12} vs oracle {want:.12}"
            );
            assert_path_moves_legal(&path, grid);
            true
        }
        Err(PlanError::NoPath) => {
            assert!(
                oracle.is_none(),
                "seed {seed}: jump-point search reported no path but A* found {:?}",
                oracle
            );
            false
        }
    }
}

#[test]
fn test_matches_astar_on_small_random_grids() {
    let mut scratch = JpsScratch::new();
    let mut solved = 0;
    for seed in 0..60 {
        if compare_on_grid(seed, 12, 0.25, &mut scratch) {
            solved += 1;
        }
    }
    assert!(solved >= 30, "only {solved}/60 grids were solvable");
}

#[test]
fn test_matches_astar_on_medium_random_grids() {
    let mut scratch = JpsScratch::new();
    let mut solved = 0;
    for seed in 100..115 {
        if compare_on_grid(seed, 30, 0.20, &mut scratch) {
            solved += 1;
        }
    }
    assert!(solved >= 8, "only {solved}/15 grids were solvable");
}

#[test]
fn test_agrees_on_mostly_blocked_grids() {
    // Dense clutter: both searches must agree on reachability every time.
    let mut scratch = JpsScratch::new();
    let mut unreachable = 0;
    for seed in 200..230 {
        if !compare_on_grid(seed, 10, 0.42, &mut scratch) {
            unreachable += 1;
        }
    }
    assert!(
        unreachable >= 3,
        "expected several unreachable grids, got {unreachable}"
    );
}

#[test]
fn test_empty_grid_costs_full_diagonal() {
    let mut scratch = JpsScratch::new();
    let rg = random_grid(7, 16, 0.1, 0.0);
    let start = rg.grid.voxel_center(rg.start_cell);
    let goal = rg.grid.voxel_center(rg.goal_cell);
    let path = jps_search(&rg.grid, &start, &goal, &mut scratch, None).unwrap();
    let want = 15.0 * common::SQRT3 * 0.1;
    assert!((path.length - want).abs() <= 1e-9);
    assert_eq!(path.waypoints.len(), 2);
}
