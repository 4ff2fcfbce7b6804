//! 3D Jump Point Search over the inflated occupancy grid, plus the geometry
//! used to cut local targets out of the resulting paths.
//!
//! The search runs on the 26-connected voxel graph with corner cutting
//! forbidden: a multi-axis move is legal only when the cells adjacent along
//! each participating axis are unblocked, in addition to the target cell.
//! Unknown voxels are traversable (optimistic exploration); blockedness is
//! the dilated occupancy maintained by the grid, so paths clear obstacles by
//! the vehicle radius.
//!
//! Rather than hand-coding 3D pruning tables, the natural/forced neighbor
//! structure is derived once at startup from the movement rule itself. For a
//! parent move `d` into a cell `y`, a neighbor move `n` is prunable when an
//! alternative path from `y - d` to `y + n` that avoids `y` is strictly
//! shorter than going through `y`, or ties it while being canonically
//! preferred (moves with more axes ordered first; ties between equal-length
//! paths are broken toward that unique big-moves-first decomposition, which
//! reduces to the familiar asymmetric tie rules in 2D). All tight
//! alternatives fit inside the 5x5x5 box around `y` and use at most three
//! moves, so they can be enumerated exhaustively; each alternative reduces
//! to the set of cells that must stay free for it to be usable. At runtime
//! `n` is *forced* exactly when every alternative is blocked and the move
//! `y -> n` itself is legal. A cell with a forced neighbor is a jump point.

use crate::map::{bresenham3d, GlobalCell, SlidingGrid};
use nalgebra::{Point3, Vector3};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::OnceLock;
use thiserror::Error;

const SQRT2: f64 = std::f64::consts::SQRT_2;
const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Errors from grid path search.
#[derive(Debug, Error)]
pub enum PlanError {
    #[error("no grid path from start to goal")]
    NoPath,
}

/// A polyline over voxel centers produced by the grid search.
///
/// Waypoints are the turn points of the path (plus exact start and goal
/// anchors); every segment is a straight single-direction run on the grid,
/// so no segment interior crosses a blocked voxel at construction time.
#[derive(Debug, Clone)]
pub struct GridPath {
    pub waypoints: Vec<Point3<f64>>,
    pub length: f64,
}

impl GridPath {
    fn from_waypoints(waypoints: Vec<Point3<f64>>) -> Self {
        let length = waypoints
            .windows(2)
            .map(|w| (w[1] - w[0]).norm())
            .sum();
        GridPath { waypoints, length }
    }
}

// ---------------------------------------------------------------------------
// Direction tables
// ---------------------------------------------------------------------------

type Dir = Vector3<i8>;

fn dir_cost(d: &Dir) -> f64 {
    match d.x.unsigned_abs() as u32 + d.y.unsigned_abs() as u32 + d.z.unsigned_abs() as u32 {
        1 => 1.0,
        2 => SQRT2,
        3 => SQRT3,
        _ => unreachable!(),
    }
}

/// Cells that must be unblocked (besides the target) for a move from `from`:
/// the axis-adjacent cells along each participating axis of a multi-axis move.
fn corner_cells(from: Vector3<i8>, m: &Dir) -> Vec<Vector3<i8>> {
    let axes = (m.x != 0) as u8 + (m.y != 0) as u8 + (m.z != 0) as u8;
    if axes < 2 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(3);
    for i in 0..3 {
        if m[i] != 0 {
            let mut c = from;
            c[i] += m[i];
            out.push(c);
        }
    }
    out
}

/// One pruned neighbor that can become forced: it is forced exactly when
/// every alternative (each a conjunction of cells that must be free) is
/// blocked and the move to it is legal.
struct ForcedCand {
    dir: u8,
    /// Alternative paths, cheapest first; each entry lists the cells
    /// (relative to the jump cell) that must all be free to use that path.
    alts: Vec<Vec<Vector3<i8>>>,
}

struct DirTable {
    /// Natural successor directions (never prunable in free space).
    naturals: Vec<u8>,
    /// Natural directions except the parent direction itself; a diagonal
    /// jump recurses into these. Their axis count strictly decreases, so
    /// the recursion is bounded.
    sub_jumps: Vec<u8>,
    forced: Vec<ForcedCand>,
    /// Union of every alternative-path dependency cell across `forced`:
    /// when all of these are free, nothing can be forced, which is the
    /// common case while scanning open space.
    dep_union: Vec<Vector3<i8>>,
}

struct JpsTables {
    dirs: [Dir; 26],
    /// Axis-adjacent cells to check for each move (relative to the source).
    move_corners: [Vec<Vector3<i8>>; 26],
    per_dir: [DirTable; 26],
}

fn all_dirs() -> [Dir; 26] {
    let mut dirs = [Dir::zeros(); 26];
    let mut k = 0;
    for x in -1i8..=1 {
        for y in -1i8..=1 {
            for z in -1i8..=1 {
                if x != 0 || y != 0 || z != 0 {
                    dirs[k] = Vector3::new(x, y, z);
                    k += 1;
                }
            }
        }
    }
    dirs
}

/// Exact shortest free-space cost of a displacement on the move set.
fn octile3(mut a: i64, mut b: i64, mut c: i64) -> f64 {
    a = a.abs();
    b = b.abs();
    c = c.abs();
    // Sort descending.
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

impl JpsTables {
    fn build() -> Self {
        let dirs = all_dirs();
        let move_corners: [Vec<Vector3<i8>>; 26] =
            std::array::from_fn(|i| corner_cells(Vector3::zeros(), &dirs[i]));
        let per_dir = std::array::from_fn(|di| Self::build_dir(&dirs, di));
        JpsTables {
            dirs,
            move_corners,
            per_dir,
        }
    }

    fn build_dir(dirs: &[Dir; 26], di: usize) -> DirTable {
        let d = dirs[di];
        let parent = Vector3::new(-d.x, -d.y, -d.z);
        let mut naturals = Vec::new();
        let mut forced = Vec::new();
        for (ni, n) in dirs.iter().enumerate() {
            let target = *n;
            if target == parent {
                continue; // moving straight back is never useful
            }
            let via_dims = [move_axes(&d), move_axes(n)];
            let via = dir_cost(&d) + dir_cost(n);
            let mut alts: Vec<Vec<Vector3<i8>>> = Vec::new();
            let mut have_free_alt = false;
            enumerate_alt_paths(dirs, parent, target, via, via_dims, &mut |deps| {
                if deps.is_empty() {
                    have_free_alt = true;
                } else if !have_free_alt {
                    alts.push(deps);
                }
            });
            if have_free_alt {
                continue; // an unconditionally usable alternative: never forced
            }
            if alts.is_empty() {
                naturals.push(ni as u8);
                continue;
            }
            // Drop alternatives whose dependency set contains another's:
            // whenever the smaller set is blocked, the larger is too, so
            // the larger conjunct is redundant. Small sets first also makes
            // the runtime "some alternative is usable" exit fast.
            alts.sort_by_key(|a| a.len());
            let mut kept: Vec<Vec<Vector3<i8>>> = Vec::new();
            'outer: for a in alts {
                for k in &kept {
                    if k.iter().all(|c| a.contains(c)) {
                        continue 'outer;
                    }
                }
                kept.push(a);
            }
            forced.push(ForcedCand {
                dir: ni as u8,
                alts: kept,
            });
        }
        let sub_jumps = naturals
            .iter()
            .copied()
            .filter(|&ni| dirs[ni as usize] != d)
            .collect();
        let mut dep_union: Vec<Vector3<i8>> = Vec::new();
        for cand in &forced {
            for alt in &cand.alts {
                for c in alt {
                    if !dep_union.contains(c) {
                        dep_union.push(*c);
                    }
                }
            }
        }
        DirTable {
            naturals,
            sub_jumps,
            forced,
            dep_union,
        }
    }
}

fn move_axes(m: &Dir) -> u8 {
    (m.x != 0) as u8 + (m.y != 0) as u8 + (m.z != 0) as u8
}

/// True when an equal-length alternative should win over the via-route:
/// equal-length paths decompose into the same multiset of move types, and
/// the canonical representative orders larger moves first, so the
/// alternative is preferred exactly when its axis-count sequence is
/// lexicographically greater.
fn tie_preferred(alt_dims: &[u8], via_dims: &[u8; 2]) -> bool {
    for (a, v) in alt_dims.iter().zip(via_dims.iter()) {
        match a.cmp(v) {
            Ordering::Greater => return true,
            Ordering::Less => return false,
            Ordering::Equal => {}
        }
    }
    false
}

/// Enumerate every alternative path `parent -> ... -> target` that avoids
/// the origin cell, uses at most three moves, and prunes the neighbor:
/// strictly shorter than via-origin, or equal-length and canonically
/// preferred. Calls `f` with the dependency cells of each such path.
fn enumerate_alt_paths(
    dirs: &[Dir; 26],
    parent: Vector3<i8>,
    target: Vector3<i8>,
    via: f64,
    via_dims: [u8; 2],
    f: &mut dyn FnMut(Vec<Vector3<i8>>),
) {
    const EPS: f64 = 1e-9;
    let mut visited = vec![parent];
    let mut deps: Vec<Vector3<i8>> = Vec::new();
    let mut dims: Vec<u8> = Vec::new();

    #[allow(clippy::too_many_arguments)]
    fn rec(
        dirs: &[Dir; 26],
        cur: Vector3<i8>,
        target: Vector3<i8>,
        len: f64,
        via: f64,
        via_dims: &[u8; 2],
        depth: u32,
        visited: &mut Vec<Vector3<i8>>,
        deps: &mut Vec<Vector3<i8>>,
        dims: &mut Vec<u8>,
        f: &mut dyn FnMut(Vec<Vector3<i8>>),
    ) {
        if depth == 0 {
            return;
        }
        for m in dirs {
            let next = cur + m;
            if next.x.abs() > 2 || next.y.abs() > 2 || next.z.abs() > 2 {
                continue;
            }
            if next == Vector3::zeros() || visited.contains(&next) {
                continue;
            }
            let nlen = len + dir_cost(m);
            let remain = octile3(
                (target.x - next.x) as i64,
                (target.y - next.y) as i64,
                (target.z - next.z) as i64,
            );
            if nlen + remain > via + EPS {
                continue;
            }
            // Dependencies added by this move: corner cells, and the new
            // vertex when it is an intermediate. The origin is always free
            // (it is the cell being jumped through), the parent and target
            // are free by construction, so those never become dependencies.
            let mut added = Vec::new();
            for c in corner_cells(cur, m) {
                if c != Vector3::zeros()
                    && c != *visited.first().unwrap()
                    && c != target
                    && !deps.contains(&c)
                    && !added.contains(&c)
                {
                    added.push(c);
                }
            }
            if next == target {
                dims.push(move_axes(m));
                let relevant = nlen < via - EPS
                    || ((nlen - via).abs() <= EPS && tie_preferred(dims, via_dims));
                if relevant {
                    for a in &added {
                        deps.push(*a);
                    }
                    let mut set = deps.clone();
                    set.sort_by_key(|v| (v.x, v.y, v.z));
                    set.dedup();
                    f(set);
                    for _ in &added {
                        deps.pop();
                    }
                }
                dims.pop();
                continue;
            }
            if !deps.contains(&next) {
                added.push(next);
            }
            for a in &added {
                deps.push(*a);
            }
            visited.push(next);
            dims.push(move_axes(m));
            rec(
                dirs, next, target, nlen, via, via_dims, depth - 1, visited, deps, dims, f,
            );
            dims.pop();
            visited.pop();
            for _ in &added {
                deps.pop();
            }
        }
    }
    rec(
        dirs,
        parent,
        target,
        0.0,
        via,
        &via_dims,
        3,
        &mut visited,
        &mut deps,
        &mut dims,
        f,
    );
}

fn tables() -> &'static JpsTables {
    static TABLES: OnceLock<JpsTables> = OnceLock::new();
    TABLES.get_or_init(JpsTables::build)
}

// ---------------------------------------------------------------------------
// Search
// ---------------------------------------------------------------------------

/// Reusable search buffers; sized lazily to the grid, cleared by versioning
/// so consecutive searches do not rewrite millions of entries.
pub struct JpsScratch {
    version: u32,
    stamp: Vec<u32>,
    g: Vec<f64>,
    parent: Vec<u32>,
    expanded: Vec<u32>,
}

impl JpsScratch {
    pub fn new() -> Self {
        JpsScratch {
            version: 0,
            stamp: Vec::new(),
            g: Vec::new(),
            parent: Vec::new(),
            expanded: Vec::new(),
        }
    }

    fn begin(&mut self, len: usize) {
        if self.stamp.len() != len {
            self.stamp = vec![0; len];
            self.g = vec![0.0; len];
            self.parent = vec![u32::MAX; len];
            self.expanded = vec![0; len];
        }
        self.version = self.version.wrapping_add(1);
        if self.version == 0 {
            self.stamp.fill(0);
            self.version = 1;
        }
    }

    #[inline]
    fn touch(&mut self, i: usize) {
        if self.stamp[i] != self.version {
            self.stamp[i] = self.version;
            self.g[i] = f64::INFINITY;
            self.parent[i] = u32::MAX;
            self.expanded[i] = 0;
        }
    }
}

impl Default for JpsScratch {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(PartialEq)]
struct HeapEntry {
    f: f64,
    g: f64,
    idx: i64,
    dir: u8, // 26 = start sentinel (expand all directions)
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on f, tie-breaking toward larger g (deeper nodes first).
        other
            .f
            .total_cmp(&self.f)
            .then(self.g.total_cmp(&other.g))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Precomputed linear offsets for one direction: the same table data as
/// `DirTable`, but resolved against the grid strides so interior cells can
/// be tested without bounds checks or index arithmetic.
struct DirLin {
    step: isize,
    corner_offs: Vec<isize>,
    dep_union_offs: Vec<isize>,
    cands: Vec<CandLin>,
}

struct CandLin {
    target_off: isize,
    corner_offs: Vec<isize>,
    alts: Vec<Vec<isize>>,
}

struct Search<'a> {
    counts: &'a [u16],
    dims: [i64; 3],
    start_exempt: isize,
    goal_idx: isize,
    /// Altitude envelope in window-local cell z, inclusive.
    band_z: (i64, i64),
    /// The same envelope as a linear-index range. z is the outermost index
    /// coordinate, so the envelope is one contiguous range and costs two
    /// integer compares on the unchecked path.
    band_lin: (isize, isize),
    lin: Vec<DirLin>,
    tables: &'static JpsTables,
}

impl<'a> Search<'a> {
    fn new(
        counts: &'a [u16],
        dims: [i64; 3],
        start_exempt: isize,
        goal_idx: isize,
        band_z: (i64, i64),
        tables: &'static JpsTables,
    ) -> Self {
        let (w, h) = (dims[0] as isize, dims[1] as isize);
        let off = |c: &Vector3<i8>| c.x as isize + c.y as isize * w + c.z as isize * w * h;
        let lin = (0..26)
            .map(|di| DirLin {
                step: off(&tables.dirs[di]),
                corner_offs: tables.move_corners[di].iter().map(&off).collect(),
                dep_union_offs: tables.per_dir[di].dep_union.iter().map(&off).collect(),
                cands: tables.per_dir[di]
                    .forced
                    .iter()
                    .map(|c| CandLin {
                        target_off: off(&tables.dirs[c.dir as usize]),
                        corner_offs: tables.move_corners[c.dir as usize]
                            .iter()
                            .map(&off)
                            .collect(),
                        alts: c
                            .alts
                            .iter()
                            .map(|a| a.iter().map(&off).collect())
                            .collect(),
                    })
                    .collect(),
            })
            .collect();
        let layer = (dims[0] * dims[1]) as isize;
        Search {
            counts,
            dims,
            start_exempt,
            goal_idx,
            band_z,
            band_lin: (
                band_z.0 as isize * layer,
                (band_z.1 + 1) as isize * layer,
            ),
            lin,
            tables,
        }
    }

    /// All table offsets stay within a Chebyshev radius of 2, so cells at
    /// least 2 from every window face can use raw linear arithmetic.
    #[inline]
    fn interior(&self, c: GlobalCell) -> bool {
        c.x >= 2
            && c.y >= 2
            && c.z >= 2
            && c.x < self.dims[0] - 2
            && c.y < self.dims[1] - 2
            && c.z < self.dims[2] - 2
    }

    /// Unchecked read; the caller guarantees `i` indexes a valid cell.
    #[inline]
    fn free_at(&self, i: isize) -> bool {
        (self.counts[i as usize] == 0 && i >= self.band_lin.0 && i < self.band_lin.1)
            || i == self.start_exempt
    }

    /// Bounds-checked blockedness for cells near the window faces;
    /// out-of-window counts as blocked.
    #[inline]
    fn blocked_slow(&self, c: GlobalCell) -> bool {
        if c.x < 0
            || c.y < 0
            || c.z < self.band_z.0.max(0)
            || c.x >= self.dims[0]
            || c.y >= self.dims[1]
            || c.z > self.band_z.1.min(self.dims[2] - 1)
        {
            return true;
        }
        let i = (c.z * self.dims[1] + c.y) * self.dims[0] + c.x;
        !self.free_at(i as isize)
    }

    fn move_allowed_slow(&self, from: GlobalCell, di: usize) -> bool {
        let d = self.tables.dirs[di];
        let target = from + Vector3::new(d.x as i64, d.y as i64, d.z as i64);
        if self.blocked_slow(target) {
            return false;
        }
        for c in &self.tables.move_corners[di] {
            if self.blocked_slow(from + Vector3::new(c.x as i64, c.y as i64, c.z as i64)) {
                return false;
            }
        }
        true
    }

    #[inline]
    fn move_allowed_fast(&self, idx: isize, di: usize) -> bool {
        let dl = &self.lin[di];
        if !self.free_at(idx + dl.step) {
            return false;
        }
        for &co in &dl.corner_offs {
            if !self.free_at(idx + co) {
                return false;
            }
        }
        true
    }

    #[inline]
    fn move_allowed(&self, from: GlobalCell, idx: isize, di: usize) -> bool {
        if self.interior(from) {
            self.move_allowed_fast(idx, di)
        } else {
            self.move_allowed_slow(from, di)
        }
    }

    fn has_forced_fast(&self, idx: isize, di: usize) -> bool {
        let dl = &self.lin[di];
        // Open-space early exit: nothing is forced while every dependency
        // cell in range is free.
        if dl.dep_union_offs.iter().all(|&o| self.free_at(idx + o)) {
            return false;
        }
        'cand: for cand in &dl.cands {
            for alt in &cand.alts {
                if alt.iter().all(|&o| self.free_at(idx + o)) {
                    continue 'cand;
                }
            }
            if self.free_at(idx + cand.target_off)
                && cand.corner_offs.iter().all(|&o| self.free_at(idx + o))
            {
                return true;
            }
        }
        false
    }

    fn has_forced_slow(&self, y: GlobalCell, di: usize) -> bool {
        'cand: for cand in &self.tables.per_dir[di].forced {
            for alt in &cand.alts {
                let usable = alt.iter().all(|c| {
                    !self.blocked_slow(y + Vector3::new(c.x as i64, c.y as i64, c.z as i64))
                });
                if usable {
                    continue 'cand;
                }
            }
            if self.move_allowed_slow(y, cand.dir as usize) {
                return true;
            }
        }
        false
    }

    /// Forced directions at `y` arrived via `di`; runs once per expansion,
    /// so it stays on the checked path.
    fn forced_dirs(&self, y: GlobalCell, di: usize, out: &mut Vec<u8>) {
        'cand: for cand in &self.tables.per_dir[di].forced {
            for alt in &cand.alts {
                let usable = alt.iter().all(|c| {
                    !self.blocked_slow(y + Vector3::new(c.x as i64, c.y as i64, c.z as i64))
                });
                if usable {
                    continue 'cand;
                }
            }
            if self.move_allowed_slow(y, cand.dir as usize) {
                out.push(cand.dir);
            }
        }
    }

    /// Scan from `from` along direction `di`; returns the next jump point,
    /// its linear index, and the number of steps to it.
    fn jump(&self, from: GlobalCell, from_idx: isize, di: usize) -> Option<(GlobalCell, isize, u32)> {
        let d = self.tables.dirs[di];
        let dv = Vector3::new(d.x as i64, d.y as i64, d.z as i64);
        let step = self.lin[di].step;
        let sub = &self.tables.per_dir[di].sub_jumps;
        let mut cur = from;
        let mut idx = from_idx;
        let mut steps = 0u32;
        loop {
            if !self.move_allowed(cur, idx, di) {
                return None;
            }
            cur += dv;
            idx += step;
            steps += 1;
            if idx == self.goal_idx {
                return Some((cur, idx, steps));
            }
            let forced = if self.interior(cur) {
                self.has_forced_fast(idx, di)
            } else {
                self.has_forced_slow(cur, di)
            };
            if forced {
                return Some((cur, idx, steps));
            }
            for &si in sub {
                if self.jump(cur, idx, si as usize).is_some() {
                    return Some((cur, idx, steps));
                }
            }
        }
    }
}

/// Nearest unblocked voxel by expanding Chebyshev shells, up to `max_k`
/// shells out. `band` restricts candidates to an inclusive global-cell
/// altitude range.
fn nearest_unblocked(
    grid: &SlidingGrid,
    around: GlobalCell,
    max_k: i64,
    band: Option<(i64, i64)>,
) -> Option<GlobalCell> {
    let in_band = |c: &GlobalCell| band.map_or(true, |(lo, hi)| c.z >= lo && c.z <= hi);
    if !grid.blocked_inflated(around) && in_band(&around) {
        return Some(around);
    }
    for k in 1..=max_k {
        let mut best: Option<(f64, GlobalCell)> = None;
        for x in -k..=k {
            for y in -k..=k {
                for z in -k..=k {
                    if x.abs().max(y.abs()).max(z.abs()) != k {
                        continue;
                    }
                    let c = around + Vector3::new(x, y, z);
                    if !grid.blocked_inflated(c) && in_band(&c) {
                        let d = (x * x + y * y + z * z) as f64;
                        if best.map_or(true, |(bd, _)| d < bd) {
                            best = Some((d, c));
                        }
                    }
                }
            }
        }
        if let Some((_, c)) = best {
            return Some(c);
        }
    }
    None
}

/// Shortest 26-connected path over the inflated grid from `start` to `goal`
/// (world points). If the goal voxel is blocked, the search retargets the
/// nearest unblocked voxel; if the start voxel is blocked (the vehicle is
/// legitimately inside the dilation margin of a freshly mapped surface),
/// the search escapes to the nearest unblocked voxel and keeps the true
/// start as the first waypoint. The returned waypoints anchor exactly on
/// `start` and on the goal point (or the retargeted voxel center).
///
/// `z_band` is an optional altitude envelope in world meters: the path only
/// uses voxels whose centers lie inside it. The depth sensor cannot pitch,
/// so without an envelope the search happily routes through never-scanned
/// space straight above or below the vehicle.
pub fn jps_search(
    grid: &SlidingGrid,
    start: &Point3<f64>,
    goal: &Point3<f64>,
    scratch: &mut JpsScratch,
    z_band: Option<(f64, f64)>,
) -> Result<GridPath, PlanError> {
    let t = tables();
    let start_cell0 = grid.cell_of(start);
    let goal_cell0 = grid.cell_of(goal);
    let dims = grid.dims();
    let origin = grid.origin();
    let max_k = *dims.iter().max().unwrap() as i64;
    let s = grid.voxel_size();
    // Global cell z range whose voxel centers lie inside the envelope.
    let cell_band = z_band.map(|(lo, hi)| (((lo / s) - 0.5).ceil() as i64, ((hi / s) - 0.5).floor() as i64));

    // Escape an inflated start: a short hop, or planning deadlocks whenever
    // the vehicle sits closer to a wall than the dilation radius.
    let start_cell = nearest_unblocked(grid, start_cell0, 8, cell_band).unwrap_or(start_cell0);
    let escaped = start_cell != start_cell0;
    let goal_cell = nearest_unblocked(grid, goal_cell0, max_k, cell_band).ok_or(PlanError::NoPath)?;
    let goal_point = if goal_cell == goal_cell0 {
        *goal
    } else {
        grid.voxel_center(goal_cell)
    };

    let ls = start_cell - origin;
    let lg = goal_cell - origin;
    let di64 = [dims[0] as i64, dims[1] as i64, dims[2] as i64];
    let in_window = |c: &GlobalCell| {
        c.x >= 0 && c.y >= 0 && c.z >= 0 && c.x < di64[0] && c.y < di64[1] && c.z < di64[2]
    };
    if !in_window(&ls) {
        return Err(PlanError::NoPath);
    }
    if ls == lg {
        return Ok(GridPath::from_waypoints(vec![*start, goal_point]));
    }
    let lindex = |c: &GlobalCell| ((c.z * di64[1] + c.y) * di64[0] + c.x) as isize;

    let local_band = match cell_band {
        Some((lo, hi)) => {
            let band = ((lo - origin.z).max(0), (hi - origin.z).min(di64[2] - 1));
            if band.0 > band.1 {
                return Err(PlanError::NoPath);
            }
            band
        }
        None => (0, di64[2] - 1),
    };

    let search = Search::new(
        grid.occ_counts(),
        di64,
        lindex(&ls),
        lindex(&lg),
        local_band,
        t,
    );

    let len = dims[0] * dims[1] * dims[2];
    scratch.begin(len);
    let start_idx = lindex(&ls) as usize;
    scratch.touch(start_idx);
    scratch.g[start_idx] = 0.0;

    let mut open = BinaryHeap::new();
    let h0 = octile3(lg.x - ls.x, lg.y - ls.y, lg.z - ls.z);
    open.push(HeapEntry {
        f: h0,
        g: 0.0,
        idx: start_idx as i64,
        dir: 26,
    });

    let mut forced_buf: Vec<u8> = Vec::with_capacity(8);
    let mut found = false;
    while let Some(e) = open.pop() {
        let idx = e.idx as usize;
        scratch.touch(idx);
        if e.g > scratch.g[idx] + 1e-12 {
            continue;
        }
        if e.dir < 26 {
            let bit = 1u32 << e.dir;
            if scratch.expanded[idx] & bit != 0 {
                continue;
            }
            scratch.expanded[idx] |= bit;
        }
        let cell = cell_from_index(idx, dims);
        if cell == lg {
            found = true;
            break;
        }
        let dirs_iter: Vec<u8> = if e.dir == 26 {
            (0..26u8).collect()
        } else {
            let dt = &t.per_dir[e.dir as usize];
            forced_buf.clear();
            search.forced_dirs(cell, e.dir as usize, &mut forced_buf);
            dt.naturals
                .iter()
                .copied()
                .chain(forced_buf.iter().copied())
                .collect()
        };
        for di in dirs_iter {
            if let Some((jp, jp_idx, steps)) = search.jump(cell, idx as isize, di as usize) {
                let ji = jp_idx as usize;
                scratch.touch(ji);
                let ng = e.g + steps as f64 * dir_cost(&t.dirs[di as usize]);
                if ng < scratch.g[ji] - 1e-12 {
                    scratch.g[ji] = ng;
                    scratch.parent[ji] = (idx as u32) | ((di as u32) << 27);
                    let h = octile3(lg.x - jp.x, lg.y - jp.y, lg.z - jp.z);
                    open.push(HeapEntry {
                        f: ng + h,
                        g: ng,
                        idx: ji as i64,
                        dir: di,
                    });
                } else if (ng - scratch.g[ji]).abs() <= 1e-12 {
                    // Equal-cost arrival from a different direction exposes
                    // different successors; keep it expandable.
                    open.push(HeapEntry {
                        f: ng + octile3(lg.x - jp.x, lg.y - jp.y, lg.z - jp.z),
                        g: ng,
                        idx: ji as i64,
                        dir: di,
                    });
                }
            }
        }
    }
    if !found {
        return Err(PlanError::NoPath);
    }

    // Reconstruct the jump-point chain, merging collinear runs so waypoints
    // are true turn points.
    let mut chain = Vec::new();
    let mut cur = lindex(&lg) as usize;
    loop {
        chain.push(cur);
        let p = scratch.parent[cur];
        if p == u32::MAX {
            break;
        }
        cur = (p & 0x07ff_ffff) as usize;
    }
    chain.reverse();
    let mut cells: Vec<GlobalCell> = chain
        .iter()
        .map(|&i| cell_from_index(i, dims) + origin)
        .collect();
    // Merge collinear consecutive segments (exact integer direction test).
    let mut merged: Vec<GlobalCell> = Vec::with_capacity(cells.len());
    for c in cells.drain(..) {
        while merged.len() >= 2 {
            let a = merged[merged.len() - 2];
            let b = merged[merged.len() - 1];
            let d1 = b - a;
            let d2 = c - b;
            let collinear = d1.x * d2.y == d1.y * d2.x
                && d1.x * d2.z == d1.z * d2.x
                && d1.y * d2.z == d1.z * d2.y
                && d2.x * d1.x + d2.y * d1.y + d2.z * d1.z > 0
                && norm_dir(d1) == norm_dir(d2);
            if collinear {
                merged.pop();
            } else {
                break;
            }
        }
        merged.push(c);
    }

    let mut waypoints: Vec<Point3<f64>> = merged.iter().map(|&c| grid.voxel_center(c)).collect();
    let n = waypoints.len();
    waypoints[n - 1] = goal_point;
    if escaped {
        // Keep the escape hop explicit so the path geometry leaves the
        // dilated shell before following the searched route.
        waypoints.insert(0, *start);
    } else {
        waypoints[0] = *start;
    }
    Ok(GridPath::from_waypoints(waypoints))
}

fn norm_dir(d: Vector3<i64>) -> Vector3<i64> {
    Vector3::new(d.x.signum(), d.y.signum(), d.z.signum())
}

fn cell_from_index(idx: usize, dims: [usize; 3]) -> GlobalCell {
    let x = idx % dims[0];
    let y = (idx / dims[0]) % dims[1];
    let z = idx / (dims[0] * dims[1]);
    Vector3::new(x as i64, y as i64, z as i64)
}

// ---------------------------------------------------------------------------
// Path/sphere geometry
// ---------------------------------------------------------------------------

/// Where a sphere around `center` cuts a path.
#[derive(Debug, Clone, Copy)]
pub struct SphereCut {
    /// The cut point on the path.
    pub point: Point3<f64>,
    /// Index of the first waypoint at or beyond the cut (`waypoints.len()`
    /// when the whole path lies inside the sphere).
    pub wp_after: usize,
    /// True when the path never reaches the sphere; `point` is then the
    /// final waypoint.
    pub inside: bool,
}

fn segment_sphere_roots(
    p: &Point3<f64>,
    q: &Point3<f64>,
    center: &Point3<f64>,
    r: f64,
) -> Option<(f64, f64)> {
    let v = q - p;
    let w = p - center;
    let a = v.norm_squared();
    if a < 1e-24 {
        return None;
    }
    let b = 2.0 * v.dot(&w);
    let c = w.norm_squared() - r * r;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    Some(((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)))
}

/// First point along the path at distance exactly `r` from `center`.
///
/// If the path starts at or beyond `r`, the cut is the first waypoint. If it
/// never reaches `r`, the cut is the final waypoint with `inside = true`.
pub fn first_sphere_intersection(path: &GridPath, center: &Point3<f64>, r: f64) -> SphereCut {
    let wps = &path.waypoints;
    if (wps[0] - center).norm() >= r {
        return SphereCut {
            point: wps[0],
            wp_after: 0,
            inside: false,
        };
    }
    for i in 0..wps.len() - 1 {
        if let Some((t0, t1)) = segment_sphere_roots(&wps[i], &wps[i + 1], center, r) {
            for t in [t0, t1] {
                if t >= -1e-12 && t <= 1.0 + 1e-12 {
                    let tc = t.clamp(0.0, 1.0);
                    let end_out = (wps[i + 1] - center).norm() >= r - 1e-12;
                    if end_out {
                        return SphereCut {
                            point: wps[i] + (wps[i + 1] - wps[i]) * tc,
                            wp_after: i + 1,
                            inside: false,
                        };
                    }
                }
            }
        }
    }
    SphereCut {
        point: *wps.last().unwrap(),
        wp_after: wps.len(),
        inside: true,
    }
}

/// Last point along the path at distance exactly `r` from `center` (the
/// final crossing by arc length). Falls back to the final waypoint when the
/// path never touches the sphere.
pub fn last_sphere_intersection(path: &GridPath, center: &Point3<f64>, r: f64) -> SphereCut {
    let wps = &path.waypoints;
    let mut last: Option<SphereCut> = None;
    for i in 0..wps.len() - 1 {
        if let Some((t0, t1)) = segment_sphere_roots(&wps[i], &wps[i + 1], center, r) {
            // Larger root last so the latest crossing in the segment wins.
            for t in [t0, t1] {
                if t >= -1e-12 && t <= 1.0 + 1e-12 {
                    let tc = t.clamp(0.0, 1.0);
                    last = Some(SphereCut {
                        point: wps[i] + (wps[i + 1] - wps[i]) * tc,
                        wp_after: i + 1,
                        inside: false,
                    });
                }
            }
        }
    }
    last.unwrap_or(SphereCut {
        point: *wps.last().unwrap(),
        wp_after: wps.len(),
        inside: true,
    })
}

/// Waypoints strictly between two sphere cuts of the same path: from the
/// first waypoint beyond the inner cut up to (not including) the first
/// waypoint beyond the outer cut.
pub fn intermediate_waypoints<'a>(
    path: &'a GridPath,
    inner: &SphereCut,
    outer: &SphereCut,
) -> &'a [Point3<f64>] {
    let a = inner.wp_after.min(path.waypoints.len());
    let b = outer.wp_after.clamp(a, path.waypoints.len());
    &path.waypoints[a..b]
}

/// Span of a path crossing blocked space: where it first enters and last
/// leaves blocked voxels, with the unblocked cells hugging the span.
#[derive(Debug, Clone, Copy)]
pub struct BlockedSpan {
    pub first_entry: Point3<f64>,
    pub last_exit: Point3<f64>,
    /// Last unblocked cell before the first blocked crossing (the path start
    /// cell if the path begins inside blocked space).
    pub cell_before: GlobalCell,
    /// First unblocked cell after the last blocked crossing (the path goal
    /// cell if the path ends inside blocked space).
    pub cell_after: GlobalCell,
}

/// Entry parameter of the segment `p -> q` into the axis-aligned box of cell
/// `c` (clamped to `[0, 1]`).
fn segment_cell_entry(
    p: &Point3<f64>,
    q: &Point3<f64>,
    c: GlobalCell,
    s: f64,
) -> f64 {
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for i in 0..3 {
        let lo = c[i] as f64 * s;
        let hi = lo + s;
        let d = q[i] - p[i];
        if d.abs() < 1e-15 {
            continue;
        }
        let (a, b) = ((lo - p[i]) / d, (hi - p[i]) / d);
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        t0 = t0.max(a);
        t1 = t1.min(b);
    }
    t0.clamp(0.0, t1.max(0.0))
}

/// Scan a path against the grid's inflated occupancy. Returns `None` when no
/// segment touches a blocked voxel; otherwise the first-entry/last-exit span.
pub fn path_first_last_blocked(path: &GridPath, grid: &SlidingGrid) -> Option<BlockedSpan> {
    let s = grid.voxel_size();
    let wps = &path.waypoints;
    let mut first: Option<(Point3<f64>, GlobalCell)> = None;
    let mut last: Option<(Point3<f64>, GlobalCell)> = None;
    let mut prev_unblocked = grid.cell_of(&wps[0]);
    let mut was_blocked = grid.blocked_inflated(prev_unblocked);
    if was_blocked {
        first = Some((wps[0], prev_unblocked));
    }
    for i in 0..wps.len() - 1 {
        let (p, q) = (wps[i], wps[i + 1]);
        let cells = bresenham3d(grid.cell_of(&p), grid.cell_of(&q));
        for (k, &c) in cells.iter().enumerate() {
            if i > 0 && k == 0 {
                continue; // shared with previous segment
            }
            let blocked = grid.blocked_inflated(c);
            if blocked {
                if first.is_none() {
                    first = Some((p + (q - p) * segment_cell_entry(&p, &q, c, s), prev_unblocked));
                }
                was_blocked = true;
            } else {
                if was_blocked {
                    // Exit point: where the segment enters this unblocked cell.
                    last = Some((p + (q - p) * segment_cell_entry(&p, &q, c, s), c));
                }
                was_blocked = false;
                prev_unblocked = c;
            }
        }
    }
    let (first_entry, cell_before) = first?;
    let (last_exit, cell_after) = match last {
        Some(v) => v,
        // The path ends inside blocked space.
        None => (*wps.last().unwrap(), grid.cell_of(wps.last().unwrap())),
    };
    Some(BlockedSpan {
        first_entry,
        last_exit,
        cell_before,
        cell_after,
    })
}
