//! Sliding-window occupancy grid built from depth scans.
//!
//! The grid keeps a fixed-size voxel window centered on the vehicle. The
//! window is pinned to a global voxel lattice (world cell `c` spans
//! `[c*s, (c+1)*s)` per axis), and recentering shifts the window by whole
//! cells only, so a world point keeps a stable voxel binning across slides.
//!
//! Each voxel is `Unknown` until observed, becomes `Free` when a ray passes
//! through it, and `Occupied` when a ray terminates in it. Within one scan,
//! hits dominate pass-throughs; across scans the most recent observation of
//! a voxel wins, so a ray that later passes through an occupied voxel to a
//! farther endpoint resets that voxel to `Free`.
//!
//! The grid also maintains a dilated obstacle field (`occ_count`): for every
//! occupied voxel, all voxels within a Chebyshev radius of `inflation_cells`
//! carry a nonzero count. Planners treat a voxel as blocked when its count is
//! nonzero, which keeps grid searches clear of obstacles by the vehicle
//! radius without inflating the stored states themselves.

use nalgebra::{Point3, Vector3};
use std::io::{Read, Write};
use thiserror::Error;

/// Errors produced by grid queries and serialization.
#[derive(Debug, Error)]
pub enum MapError {
    /// A world point fell outside the current window.
    #[error("point {0:?} is outside the map window")]
    OutOfBounds(Point3<f64>),
    /// No free or frontier voxel exists to project a goal onto.
    #[error("no feasible goal voxel in the map window")]
    NoFeasibleGoal,
    /// Malformed serialized grid.
    #[error("bad grid header: {0}")]
    BadHeader(String),
    #[error("grid i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Observation state of one voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum VoxelState {
    Unknown = 0,
    Free = 1,
    Occupied = 2,
}

impl VoxelState {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(VoxelState::Unknown),
            1 => Some(VoxelState::Free),
            2 => Some(VoxelState::Occupied),
            _ => None,
        }
    }
}

/// Index of a voxel on the global world lattice.
pub type GlobalCell = Vector3<i64>;

/// One depth-camera frame, already expressed in world coordinates.
///
/// `points` are ray endpoints that hit something; `max_range_dirs` are unit
/// directions for rays that saw nothing out to `max_range`.
#[derive(Debug, Clone)]
pub struct DepthScan {
    pub origin: Point3<f64>,
    pub points: Vec<Point3<f64>>,
    pub max_range_dirs: Vec<Vector3<f64>>,
    pub max_range: f64,
    /// Monotone acquisition counter assigned by the sensor.
    pub stamp: u64,
}

/// Voxel cells entered by the segment between the centers of `a` and `b`.
///
/// The traversal is exact: boundary crossings are compared as integer
/// fractions, one axis steps at a time, and simultaneous crossings (the
/// segment passing exactly through a cell corner or edge) step all tied axes
/// at once. The result starts at `a`, ends at `b`, moves monotonically along
/// every axis, and consecutive cells differ by at most one per axis.
pub fn bresenham3d(a: GlobalCell, b: GlobalCell) -> Vec<GlobalCell> {
    let delta = b - a;
    let n = [delta.x.abs(), delta.y.abs(), delta.z.abs()];
    let step = [delta.x.signum(), delta.y.signum(), delta.z.signum()];
    let mut out = Vec::with_capacity((n[0] + n[1] + n[2] + 1) as usize);
    let mut cur = a;
    out.push(cur);
    // The segment crosses the m-th voxel boundary of axis i at parameter
    // t = (2m - 1) / (2 n_i). Fractions are compared by cross-multiplication
    // so corner hits are detected exactly rather than by epsilon.
    let mut m = [1i64; 3];
    loop {
        let mut best: Option<(i64, i64)> = None; // smallest pending (num, den)
        for i in 0..3 {
            if m[i] > n[i] {
                continue;
            }
            let (num, den) = (2 * m[i] - 1, 2 * n[i]);
            best = match best {
                Some((bn, bd)) if num * bd >= bn * den => Some((bn, bd)),
                _ => Some((num, den)),
            };
        }
        let Some((bn, bd)) = best else { break };
        for i in 0..3 {
            if m[i] <= n[i] && (2 * m[i] - 1) * bd == bn * 2 * n[i] {
                cur[i] += step[i];
                m[i] += 1;
            }
        }
        out.push(cur);
    }
    out
}

/// Sliding occupancy window over the global voxel lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidingGrid {
    voxel_size: f64,
    dims: [usize; 3],
    /// World lattice cell of the window's minimum corner.
    origin: GlobalCell,
    inflation_cells: i64,
    cells: Vec<VoxelState>,
    occ_count: Vec<u16>,
    stamp: u64,
}

impl SlidingGrid {
    /// Create an all-`Unknown` window of `side_lengths` meters centered on
    /// `center`, with obstacle dilation of `inflation_cells` voxels.
    pub fn new(
        center: &Point3<f64>,
        side_lengths: &Vector3<f64>,
        voxel_size: f64,
        inflation_cells: usize,
    ) -> Self {
        assert!(voxel_size > 0.0, "voxel size must be positive");
        let dims = [
            (side_lengths.x / voxel_size).round().max(1.0) as usize,
            (side_lengths.y / voxel_size).round().max(1.0) as usize,
            (side_lengths.z / voxel_size).round().max(1.0) as usize,
        ];
        let origin = Self::origin_for(center, &dims, voxel_size);
        let len = dims[0] * dims[1] * dims[2];
        SlidingGrid {
            voxel_size,
            dims,
            origin,
            inflation_cells: inflation_cells as i64,
            cells: vec![VoxelState::Unknown; len],
            occ_count: vec![0; len],
            stamp: 0,
        }
    }

    fn origin_for(center: &Point3<f64>, dims: &[usize; 3], s: f64) -> GlobalCell {
        let c = global_cell(center, s);
        Vector3::new(
            c.x - (dims[0] / 2) as i64,
            c.y - (dims[1] / 2) as i64,
            c.z - (dims[2] / 2) as i64,
        )
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn origin(&self) -> GlobalCell {
        self.origin
    }

    pub fn inflation_cells(&self) -> usize {
        self.inflation_cells as usize
    }

    /// Monotone fusion counter (one tick per fused scan).
    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    /// Flat dilated-occupancy counters (x-fastest), for search hot loops; a
    /// cell is blocked for planning when its counter is nonzero.
    pub fn occ_counts(&self) -> &[u16] {
        &self.occ_count
    }

    /// Center of the window's central voxel; the anchor written to disk.
    pub fn center(&self) -> Point3<f64> {
        let c = self.origin
            + Vector3::new(
                (self.dims[0] / 2) as i64,
                (self.dims[1] / 2) as i64,
                (self.dims[2] / 2) as i64,
            );
        self.voxel_center(c)
    }

    /// Global lattice cell containing `p` (half-open binning per axis).
    pub fn cell_of(&self, p: &Point3<f64>) -> GlobalCell {
        global_cell(p, self.voxel_size)
    }

    /// World center of a global cell.
    pub fn voxel_center(&self, g: GlobalCell) -> Point3<f64> {
        Point3::new(
            (g.x as f64 + 0.5) * self.voxel_size,
            (g.y as f64 + 0.5) * self.voxel_size,
            (g.z as f64 + 0.5) * self.voxel_size,
        )
    }

    pub fn in_window(&self, g: GlobalCell) -> bool {
        let l = g - self.origin;
        l.x >= 0
            && l.y >= 0
            && l.z >= 0
            && (l.x as usize) < self.dims[0]
            && (l.y as usize) < self.dims[1]
            && (l.z as usize) < self.dims[2]
    }

    /// World-space bounds of the window, `[min, max)`.
    pub fn bounds(&self) -> (Point3<f64>, Point3<f64>) {
        let s = self.voxel_size;
        let lo = Point3::new(
            self.origin.x as f64 * s,
            self.origin.y as f64 * s,
            self.origin.z as f64 * s,
        );
        let hi = Point3::new(
            (self.origin.x + self.dims[0] as i64) as f64 * s,
            (self.origin.y + self.dims[1] as i64) as f64 * s,
            (self.origin.z + self.dims[2] as i64) as f64 * s,
        );
        (lo, hi)
    }

    pub fn contains_point(&self, p: &Point3<f64>) -> bool {
        let (lo, hi) = self.bounds();
        (0..3).all(|i| p[i] >= lo[i] && p[i] < hi[i])
    }

    fn linear(&self, g: GlobalCell) -> Option<usize> {
        if !self.in_window(g) {
            return None;
        }
        let l = g - self.origin;
        Some((l.z as usize * self.dims[1] + l.y as usize) * self.dims[0] + l.x as usize)
    }

    /// Map a world point to its global voxel cell, requiring it in-window.
    pub fn world_to_voxel(&self, p: &Point3<f64>) -> Result<GlobalCell, MapError> {
        let g = self.cell_of(p);
        if self.in_window(g) {
            Ok(g)
        } else {
            Err(MapError::OutOfBounds(*p))
        }
    }

    /// State of the voxel containing `p`; `Unknown` outside the window.
    pub fn query(&self, p: &Point3<f64>) -> VoxelState {
        match self.linear(self.cell_of(p)) {
            Some(i) => self.cells[i],
            None => VoxelState::Unknown,
        }
    }

    /// State of a global cell; `Unknown` outside the window.
    pub fn state(&self, g: GlobalCell) -> VoxelState {
        match self.linear(g) {
            Some(i) => self.cells[i],
            None => VoxelState::Unknown,
        }
    }

    /// Planner-side blockedness: occupied after dilation, or out of window.
    ///
    /// Out-of-window cells are blocked so grid searches stay inside the map.
    pub fn blocked_inflated(&self, g: GlobalCell) -> bool {
        match self.linear(g) {
            Some(i) => self.occ_count[i] > 0,
            None => true,
        }
    }

    /// Euclidean distance from `p` to the nearest `Occupied` voxel center
    /// strictly within `r_max`, or `+inf` when none lies that close. Unlike
    /// the Chebyshev dilation behind
    /// [`blocked_inflated`](Self::blocked_inflated) this is isotropic, so
    /// continuous-space clearance tests don't inherit the cube's corner
    /// bias.
    pub fn occupied_distance(&self, p: &Point3<f64>, r_max: f64) -> f64 {
        let mut best2 = f64::INFINITY;
        self.scan_occupied(p, r_max, |d2| {
            best2 = best2.min(d2);
            false
        });
        best2.sqrt()
    }

    /// Whether any `Occupied` voxel center lies within `r` of `p`. Same
    /// metric as [`occupied_distance`](Self::occupied_distance) but bails on
    /// the first hit.
    pub fn occupied_within(&self, p: &Point3<f64>, r: f64) -> bool {
        self.scan_occupied(p, r, |_| true)
    }

    /// Visit squared distances of occupied centers strictly within `r_max`
    /// of `p`; stops early when the visitor returns true. Returns whether it
    /// stopped.
    fn scan_occupied(&self, p: &Point3<f64>, r_max: f64, mut visit: impl FnMut(f64) -> bool) -> bool {
        let s = self.voxel_size;
        let lo = global_cell(&Point3::new(p.x - r_max, p.y - r_max, p.z - r_max), s);
        let hi = global_cell(&Point3::new(p.x + r_max, p.y + r_max, p.z + r_max), s);
        let r2 = r_max * r_max;
        for z in lo.z..=hi.z {
            for y in lo.y..=hi.y {
                for x in lo.x..=hi.x {
                    let g = GlobalCell::new(x, y, z);
                    if let Some(i) = self.linear(g) {
                        if self.cells[i] == VoxelState::Occupied {
                            let d2 = (self.voxel_center(g) - p).norm_squared();
                            if d2 < r2 && visit(d2) {
                                return true;
                            }
                        }
                    }
                }
            }
        }
        false
    }

    fn set_state(&mut self, g: GlobalCell, new: VoxelState) {
        let Some(i) = self.linear(g) else { return };
        let old = self.cells[i];
        if old == new {
            return;
        }
        self.cells[i] = new;
        if old == VoxelState::Occupied {
            self.add_ball(g, -1);
        }
        if new == VoxelState::Occupied {
            self.add_ball(g, 1);
        }
    }

    fn add_ball(&mut self, g: GlobalCell, delta: i32) {
        let r = self.inflation_cells;
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if let Some(i) = self.linear(g + Vector3::new(dx, dy, dz)) {
                        self.occ_count[i] = (self.occ_count[i] as i32 + delta) as u16;
                    }
                }
            }
        }
    }

    /// Clip the segment `from -> to` to the window box. `from` must be
    /// inside. Returns the (possibly shortened) endpoint and whether the
    /// segment was clipped.
    fn clip_segment(&self, from: &Point3<f64>, to: &Point3<f64>) -> (Point3<f64>, bool) {
        let (lo, hi) = self.bounds();
        let mut t = 1.0f64;
        for i in 0..3 {
            let d = to[i] - from[i];
            if d > 0.0 {
                t = t.min((hi[i] - from[i]) / d);
            } else if d < 0.0 {
                t = t.min((lo[i] - from[i]) / d);
            }
        }
        if t >= 1.0 {
            (*to, false)
        } else {
            // Pull slightly inside the box so the endpoint bins in-window.
            let t = (t - 1e-9).max(0.0);
            (from + (to - from) * t, true)
        }
    }

    /// Walk the exact segment from `origin` to `target` (clipped to the
    /// window), freeing every traversed voxel; a hit whose endpoint survives
    /// clipping is collected for occupancy marking instead of freed. The
    /// traversal follows the true segment rather than a center-to-center
    /// approximation: at grazing incidence the latter frees voxels past the
    /// real point of first contact, eating thin surfaces from the map.
    fn carve_ray(
        &mut self,
        target: &Point3<f64>,
        hit: bool,
        origin: &Point3<f64>,
        endpoints: &mut Vec<GlobalCell>,
    ) {
        let (end, clipped) = self.clip_segment(origin, target);
        let is_hit = hit && !clipped;
        let dir = end - origin;
        // Hit points on axis-aligned surfaces land exactly on a voxel face;
        // plain flooring would bin half of them into the cell on the *free*
        // side, planting a phantom surface one voxel closer than the matter.
        // Nudging the endpoint forward along the ray bins face hits into the
        // cell the ray was about to enter, and is a no-op for interior hits.
        let end_cell = if is_hit && dir.norm() > 1e-12 {
            self.cell_of(&(end + dir * (1e-9 / dir.norm())))
        } else {
            self.cell_of(&end)
        };
        let mut cell = self.cell_of(origin);
        let s = self.voxel_size;

        // Amanatides & Woo grid traversal, parameterized on t in [0, 1].
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        let mut step = [0i64; 3];
        for ax in 0..3 {
            let d = dir[ax];
            if d > 1e-15 {
                step[ax] = 1;
                t_max[ax] = ((cell[ax] + 1) as f64 * s - origin[ax]) / d;
                t_delta[ax] = s / d;
            } else if d < -1e-15 {
                step[ax] = -1;
                t_max[ax] = (cell[ax] as f64 * s - origin[ax]) / d;
                t_delta[ax] = s / -d;
            }
        }
        while cell != end_cell {
            self.set_state(cell, VoxelState::Free);
            let ax = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            if t_max[ax] > 1.0 + 1e-9 {
                // Numeric guard: the walk ran past the segment without
                // binning into the endpoint cell; stop and mark it below.
                break;
            }
            cell[ax] += step[ax];
            t_max[ax] += t_delta[ax];
        }
        if is_hit {
            endpoints.push(end_cell);
        } else {
            self.set_state(end_cell, VoxelState::Free);
        }
    }

    /// Fuse one depth scan: carve free space along every ray, then mark hit
    /// endpoints occupied. Free-carving runs first so that within this scan
    /// a hit always wins over a pass-through of the same voxel, while voxels
    /// occupied by *earlier* scans are reset to `Free` when a ray now passes
    /// through them. Rays leaving the window are clipped and carve only.
    pub fn fuse_scan(&mut self, scan: &DepthScan) {
        let mut endpoints = Vec::with_capacity(scan.points.len());
        for p in &scan.points {
            self.carve_ray(p, true, &scan.origin, &mut endpoints);
        }
        for dir in &scan.max_range_dirs {
            let far = scan.origin + dir * scan.max_range;
            self.carve_ray(&far, false, &scan.origin, &mut endpoints);
        }
        for e in endpoints {
            self.set_state(e, VoxelState::Occupied);
        }
        self.stamp += 1;
    }

    /// Recenter the window on `new_center`, snapping to the voxel lattice.
    /// No-op while the center stays within the current central voxel. Voxels
    /// shared by the old and new windows keep their state; newly exposed
    /// voxels are `Unknown`.
    pub fn slide_to(&mut self, new_center: &Point3<f64>) {
        let new_origin = Self::origin_for(new_center, &self.dims, self.voxel_size);
        if new_origin == self.origin {
            return;
        }
        let shift = new_origin - self.origin;
        let [nx, ny, nz] = self.dims;
        let old = std::mem::replace(&mut self.cells, vec![VoxelState::Unknown; nx * ny * nz]);
        for z in 0..nz {
            let oz = z as i64 + shift.z;
            if oz < 0 || oz >= nz as i64 {
                continue;
            }
            for y in 0..ny {
                let oy = y as i64 + shift.y;
                if oy < 0 || oy >= ny as i64 {
                    continue;
                }
                // Contiguous x-run of the overlap.
                let x0 = 0.max(-shift.x) as usize;
                let x1 = (nx as i64).min(nx as i64 - shift.x).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                let dst = (z * ny + y) * nx;
                let src = (oz as usize * ny + oy as usize) * nx + (x0 as i64 + shift.x) as usize;
                self.cells[dst + x0..dst + x1].copy_from_slice(&old[src..src + (x1 - x0)]);
            }
        }
        self.origin = new_origin;
        // Dilation sources may have left the window, so rebuild the counters.
        self.occ_count.fill(0);
        for idx in 0..self.cells.len() {
            if self.cells[idx] == VoxelState::Occupied {
                let g = self.cell_of_linear(idx);
                self.add_ball(g, 1);
            }
        }
    }

    fn cell_of_linear(&self, idx: usize) -> GlobalCell {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        self.origin + Vector3::new(x as i64, y as i64, z as i64)
    }

    /// Whether a cell may serve as the projected intermediate goal: anything
    /// not known to be occupied. Unknown space qualifies — the geometric
    /// layer plans optimistically through it and the primitive gate keeps
    /// the vehicle inside observed free space regardless, so constraining
    /// the goal to explored territory would strand the planner whenever the
    /// straight line to the terminal goal is walled off.
    fn goal_candidate(&self, g: GlobalCell) -> bool {
        self.state(g) != VoxelState::Occupied
    }

    /// Project the terminal goal into the window along the ray `from ->
    /// terminal_goal`, then return it unchanged if its voxel is not
    /// occupied, otherwise the center of the nearest non-occupied voxel.
    /// Never returns a point in an occupied voxel.
    pub fn project_goal(
        &self,
        from: &Point3<f64>,
        terminal_goal: &Point3<f64>,
    ) -> Result<Point3<f64>, MapError> {
        let q = if self.contains_point(terminal_goal) {
            *terminal_goal
        } else {
            let (clipped, _) = self.clip_segment(from, terminal_goal);
            clipped
        };
        let mut q_cell = self.cell_of(&q);
        for i in 0..3 {
            q_cell[i] = q_cell[i]
                .max(self.origin[i])
                .min(self.origin[i] + self.dims[i] as i64 - 1);
        }
        if self.goal_candidate(q_cell) {
            return Ok(q);
        }
        let s = self.voxel_size;
        let max_k = *self.dims.iter().max().unwrap() as i64;
        let mut best: Option<(f64, GlobalCell)> = None;
        for k in 1..=max_k {
            if let Some((d, _)) = best {
                if d <= (k as f64 - 0.5) * s {
                    break;
                }
            }
            for cell in chebyshev_shell(q_cell, k) {
                if self.in_window(cell) && self.goal_candidate(cell) {
                    let d = (self.voxel_center(cell) - q).norm();
                    if best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, cell));
                    }
                }
            }
        }
        best.map(|(_, c)| self.voxel_center(c))
            .ok_or(MapError::NoFeasibleGoal)
    }

    /// Serialize to the flat binary snapshot layout: center (3 x f64 LE),
    /// dims (3 x u32 LE), voxel size (f64 LE), stamp (u64 LE), then one byte
    /// per voxel in x-fastest order (0 = unknown, 1 = free, 2 = occupied).
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<(), MapError> {
        let c = self.center();
        for i in 0..3 {
            w.write_all(&c[i].to_le_bytes())?;
        }
        for d in self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&self.voxel_size.to_le_bytes())?;
        w.write_all(&self.stamp.to_le_bytes())?;
        let bytes: Vec<u8> = self.cells.iter().map(|&c| c as u8).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    /// Inverse of [`write_binary`](Self::write_binary). The dilation radius
    /// is not part of the layout and must be supplied; counters are rebuilt.
    pub fn read_binary<R: Read>(r: &mut R, inflation_cells: usize) -> Result<Self, MapError> {
        let mut f = [0u8; 8];
        let mut center = [0.0f64; 3];
        for c in &mut center {
            r.read_exact(&mut f)?;
            *c = f64::from_le_bytes(f);
        }
        let mut dims = [0usize; 3];
        let mut d4 = [0u8; 4];
        for d in &mut dims {
            r.read_exact(&mut d4)?;
            *d = u32::from_le_bytes(d4) as usize;
        }
        r.read_exact(&mut f)?;
        let voxel_size = f64::from_le_bytes(f);
        if !(voxel_size > 0.0) || dims.iter().any(|&d| d == 0 || d > 1 << 16) {
            return Err(MapError::BadHeader(format!(
                "dims {dims:?}, voxel size {voxel_size}"
            )));
        }
        r.read_exact(&mut f)?;
        let stamp = u64::from_le_bytes(f);
        let len = dims[0] * dims[1] * dims[2];
        let mut bytes = vec![0u8; len];
        r.read_exact(&mut bytes)?;
        let mut cells = Vec::with_capacity(len);
        for b in bytes {
            cells.push(
                VoxelState::from_u8(b)
                    .ok_or_else(|| MapError::BadHeader(format!("voxel byte {b}")))?,
            );
        }
        let origin = Vector3::new(
            (center[0] / voxel_size - 0.5).round() as i64 - (dims[0] / 2) as i64,
            (center[1] / voxel_size - 0.5).round() as i64 - (dims[1] / 2) as i64,
            (center[2] / voxel_size - 0.5).round() as i64 - (dims[2] / 2) as i64,
        );
        let mut grid = SlidingGrid {
            voxel_size,
            dims,
            origin,
            inflation_cells: inflation_cells as i64,
            cells,
            occ_count: vec![0; len],
            stamp,
        };
        for idx in 0..grid.cells.len() {
            if grid.cells[idx] == VoxelState::Occupied {
                let g = grid.cell_of_linear(idx);
                grid.add_ball(g, 1);
            }
        }
        Ok(grid)
    }
}

fn global_cell(p: &Point3<f64>, s: f64) -> GlobalCell {
    Vector3::new(
        (p.x / s).floor() as i64,
        (p.y / s).floor() as i64,
        (p.z / s).floor() as i64,
    )
}

/// Cells at exactly Chebyshev radius `k` around `c` (each visited once).
fn chebyshev_shell(c: GlobalCell, k: i64) -> Vec<GlobalCell> {
    debug_assert!(k >= 1);
    let mut out = Vec::with_capacity((24 * k * k + 2) as usize);
    for &x in &[-k, k] {
        for y in -k..=k {
            for z in -k..=k {
                out.push(c + Vector3::new(x, y, z));
            }
        }
    }
    for &y in &[-k, k] {
        for x in (-k + 1)..k {
            for z in -k..=k {
                out.push(c + Vector3::new(x, y, z));
            }
        }
    }
    for &z in &[-k, k] {
        for x in (-k + 1)..k {
            for y in (-k + 1)..k {
                out.push(c + Vector3::new(x, y, z));
            }
        }
    }
    out
}
