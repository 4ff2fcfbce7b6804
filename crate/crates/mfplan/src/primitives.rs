//! Fixed-horizon optimal-control solvers for the two local primitive
//! families: jerk-controlled (triple integrator) and velocity-controlled
//! (single integrator), plus the horizon-initialization rule and the
//! time-normalized cost functions used to compare them.
//!
//! The jerk problem minimizes the summed squared inputs plus a soft terminal
//! penalty, subject to per-axis box limits on velocity, acceleration, and
//! jerk at every discrete step. Because the limits are per-axis boxes and
//! the terminal weight is diagonal, the problem separates into three
//! independent single-axis QPs; each is condensed onto its input sequence
//! and solved by an operator-splitting iteration with an active-set polish
//! step, giving KKT residuals near machine precision. The step length `dt`
//! starts at a per-axis minimum-time lower bound and grows geometrically
//! until the solution both satisfies the KKT tolerance and lands within the
//! configured distance of the terminal position — small horizons make the
//! goal unreachable, and growing `dt` is what buys reachability.
//!
//! Velocity primitives pin both endpoints exactly; with box limits the
//! constant-velocity profile is optimal (averaging any feasible profile
//! preserves the endpoint and strictly reduces the quadratic cost), so the
//! solve is analytic.
//!
//! Box limits constrain the discrete knot states; excursions between knots
//! are an accepted approximation of this discretization.

use nalgebra::{DMatrix, DVector, Matrix3, Point3, Vector3};
use thiserror::Error;

/// Flat (position/velocity/acceleration) state of the vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatState {
    pub pos: Point3<f64>,
    pub vel: Vector3<f64>,
    pub acc: Vector3<f64>,
}

impl FlatState {
    /// A state at rest at `pos`.
    pub fn rest(pos: Point3<f64>) -> Self {
        FlatState {
            pos,
            vel: Vector3::zeros(),
            acc: Vector3::zeros(),
        }
    }
}

/// Per-axis box limits (infinity norm) on the flat outputs.
#[derive(Debug, Clone, Copy)]
pub struct Limits {
    pub v_max: f64,
    pub a_max: f64,
    pub j_max: f64,
}

/// Diagonal terminal weight: one nonnegative entry per flat-state component.
#[derive(Debug, Clone, Copy)]
pub struct TerminalWeight {
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    pub acc: Vector3<f64>,
}

impl Default for TerminalWeight {
    fn default() -> Self {
        TerminalWeight {
            pos: Vector3::repeat(1e3),
            vel: Vector3::repeat(1e2),
            acc: Vector3::repeat(1e1),
        }
    }
}

/// Knobs shared by the primitive solvers.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Discretization steps per primitive.
    pub n: usize,
    /// Geometric growth factor for the step length between attempts.
    pub gamma_dt: f64,
    /// Smallest admissible step length.
    pub dt_min: f64,
    /// Terminal-position acceptance radius for the jerk solve.
    pub eps_terminal: f64,
    /// Horizon-growth budget, expressed as the number of dt doublings the
    /// geometric growth may accumulate before giving up.
    pub max_growth_doublings: f64,
    /// Iteration cap for the splitting solver on one axis problem.
    pub admm_max_iters: u32,
    /// KKT residual below which an axis solve counts as solved.
    pub kkt_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            n: 10,
            gamma_dt: 1.25,
            dt_min: 1e-3,
            eps_terminal: 0.05,
            max_growth_doublings: 50.0,
            admm_max_iters: 4000,
            kkt_tol: 1e-6,
        }
    }
}

impl SolveOptions {
    /// Number of growth iterations equivalent to the doubling budget.
    pub fn max_growth_iters(&self) -> u32 {
        (self.max_growth_doublings * std::f64::consts::LN_2 / self.gamma_dt.ln()).ceil() as u32
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(
        "no feasible horizon after {growth_iters} expansions (terminal error {terminal_error:.4} m)"
    )]
    MaxIterations {
        growth_iters: u32,
        terminal_error: f64,
    },
    #[error("sample time {t:.6} outside primitive domain [0, {duration:.6}]")]
    OutOfDomain { t: f64, duration: f64 },
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

/// Discrete triple-integrator step: `state_next = step * state + input * u`.
fn jerk_step_matrices(dt: f64) -> (Matrix3<f64>, Vector3<f64>) {
    let step = Matrix3::new(
        1.0,
        dt,
        dt * dt / 2.0,
        0.0,
        1.0,
        dt,
        0.0,
        0.0,
        1.0,
    );
    let input = Vector3::new(dt * dt * dt / 6.0, dt * dt / 2.0, dt);
    (step, input)
}

/// A jerk-controlled primitive: `n` constant-jerk steps of length `dt`.
#[derive(Debug, Clone)]
pub struct JerkPrimitive {
    pub x0: FlatState,
    /// Jerk inputs, one 3-vector per step.
    pub inputs: Vec<Vector3<f64>>,
    pub dt: f64,
    pub n: usize,
    /// State after the final step (equals the rollout of `inputs`).
    pub terminal: FlatState,
}

impl JerkPrimitive {
    pub fn duration(&self) -> f64 {
        self.n as f64 * self.dt
    }

    /// Knot states `x_0..x_n` from exact forward integration.
    pub fn rollout(&self) -> Vec<FlatState> {
        let (step, input) = jerk_step_matrices(self.dt);
        let mut states = Vec::with_capacity(self.n + 1);
        states.push(self.x0);
        let mut cur = self.x0;
        for u in &self.inputs {
            let mut next = FlatState::rest(Point3::origin());
            for ax in 0..3 {
                let xi = Vector3::new(cur.pos[ax], cur.vel[ax], cur.acc[ax]);
                let nx = step * xi + input * u[ax];
                next.pos[ax] = nx[0];
                next.vel[ax] = nx[1];
                next.acc[ax] = nx[2];
            }
            states.push(next);
            cur = next;
        }
        states
    }

    /// Exact state at time `t` (cubic position polynomial inside each step).
    pub fn sample(&self, t: f64) -> Result<FlatState, SolveError> {
        let dur = self.duration();
        if !(-1e-9..=dur + 1e-9).contains(&t) {
            return Err(SolveError::OutOfDomain { t, duration: dur });
        }
        let t = t.clamp(0.0, dur);
        let k = ((t / self.dt) as usize).min(self.n - 1);
        let tau = t - k as f64 * self.dt;
        let knots = self.rollout();
        let x = &knots[k];
        let u = &self.inputs[k];
        let mut out = FlatState::rest(Point3::origin());
        for ax in 0..3 {
            let (p, v, a, j) = (x.pos[ax], x.vel[ax], x.acc[ax], u[ax]);
            out.pos[ax] =
                p + v * tau + a * tau * tau / 2.0 + j * tau * tau * tau / 6.0;
            out.vel[ax] = v + a * tau + j * tau * tau / 2.0;
            out.acc[ax] = a + j * tau;
        }
        Ok(out)
    }
}

/// A velocity-controlled primitive: `n` constant-velocity steps joining two
/// pinned endpoints.
#[derive(Debug, Clone)]
pub struct VelPrimitive {
    pub p0: Point3<f64>,
    pub pf: Point3<f64>,
    /// Velocity inputs, one 3-vector per step.
    pub inputs: Vec<Vector3<f64>>,
    pub dt: f64,
    pub n: usize,
}

impl VelPrimitive {
    pub fn duration(&self) -> f64 {
        self.n as f64 * self.dt
    }

    /// State at time `t`: piecewise-linear position, piecewise-constant
    /// velocity, zero acceleration.
    pub fn sample(&self, t: f64) -> Result<FlatState, SolveError> {
        let dur = self.duration();
        if !(-1e-9..=dur + 1e-9).contains(&t) {
            return Err(SolveError::OutOfDomain { t, duration: dur });
        }
        let t = t.clamp(0.0, dur);
        let k = ((t / self.dt) as usize).min(self.n - 1);
        let tau = t - k as f64 * self.dt;
        let mut pos = self.p0;
        for v in self.inputs.iter().take(k) {
            pos += v * self.dt;
        }
        pos += self.inputs[k] * tau;
        Ok(FlatState {
            pos,
            vel: self.inputs[k],
            acc: Vector3::zeros(),
        })
    }
}

// ---------------------------------------------------------------------------
// Horizon initialization
// ---------------------------------------------------------------------------

/// Smallest nonnegative real root of `c3 t^3 + c2 t^2 + c1 t + c0 = 0`.
/// Assumes such a root exists (callers arrange `c0 <= 0 <= c3`).
fn smallest_nonneg_root_cubic(c3: f64, c2: f64, c1: f64, c0: f64) -> f64 {
    const EPS: f64 = 1e-12;
    if c3.abs() < 1e-300 {
        // Quadratic (or lower) degenerate case.
        if c2.abs() < 1e-300 {
            if c1.abs() < 1e-300 {
                return 0.0;
            }
            let t = -c0 / c1;
            return t.max(0.0);
        }
        let disc = (c1 * c1 - 4.0 * c2 * c0).max(0.0).sqrt();
        let (r1, r2) = ((-c1 - disc) / (2.0 * c2), (-c1 + disc) / (2.0 * c2));
        return [r1, r2]
            .into_iter()
            .filter(|r| *r >= -EPS)
            .fold(f64::INFINITY, f64::min)
            .max(0.0);
    }
    // Depressed cubic x^3 + p x + q, with t = x - b/3.
    let (b, c, d) = (c2 / c3, c1 / c3, c0 / c3);
    let p = c - b * b / 3.0;
    let q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
    let shift = -b / 3.0;
    let half_q = q / 2.0;
    let disc = half_q * half_q + (p / 3.0) * (p / 3.0) * (p / 3.0);
    let mut roots = Vec::with_capacity(3);
    if disc > 0.0 {
        let s = disc.sqrt();
        roots.push((-half_q + s).cbrt() + (-half_q - s).cbrt() + shift);
    } else if p.abs() < 1e-300 {
        roots.push((-q).cbrt() + shift);
    } else {
        let r = 2.0 * (-p / 3.0).sqrt();
        let theta = (3.0 * q / (p * r)).clamp(-1.0, 1.0).acos();
        for k in 0..3 {
            roots.push(r * ((theta - 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos() + shift);
        }
    }
    // One Newton step per root tightens the closed forms.
    for r in &mut roots {
        let f = ((c3 * *r + c2) * *r + c1) * *r + c0;
        let df = (3.0 * c3 * *r + 2.0 * c2) * *r + c1;
        if df.abs() > 1e-12 {
            *r -= f / df;
        }
    }
    roots
        .into_iter()
        .filter(|r| *r >= -EPS)
        .fold(f64::INFINITY, f64::min)
        .max(0.0)
}

/// Lower bound on the step length: the largest of the nine per-axis times to
/// cover the goal displacement under a single binding limit (constant
/// velocity, constant acceleration, constant jerk), divided by `n` and
/// floored at `dt_min`.
pub fn min_time_per_axis(
    x0: &FlatState,
    xf: &FlatState,
    limits: &Limits,
    n: usize,
    dt_min: f64,
) -> f64 {
    let mut t_max: f64 = 0.0;
    for ax in 0..3 {
        let dp = xf.pos[ax] - x0.pos[ax];
        if dp.abs() < 1e-12 {
            continue; // all three times are zero for this axis
        }
        let s = dp.signum();
        let (v0, a0) = (x0.vel[ax], x0.acc[ax]);
        let t_v = dp.abs() / limits.v_max;
        // dp = v0 t + (s a_max / 2) t^2, smallest nonnegative root.
        let t_a = {
            let a = s * limits.a_max / 2.0;
            let disc = (v0 * v0 + 4.0 * a * dp).max(0.0).sqrt();
            [(-v0 - disc) / (2.0 * a), (-v0 + disc) / (2.0 * a)]
                .into_iter()
                .filter(|t| *t >= -1e-12)
                .fold(f64::INFINITY, f64::min)
                .max(0.0)
        };
        // dp = v0 t + (a0/2) t^2 + (s j_max / 6) t^3.
        let t_j = smallest_nonneg_root_cubic(s * limits.j_max / 6.0, a0 / 2.0, v0, -dp);
        t_max = t_max.max(t_v).max(t_a).max(t_j);
    }
    (t_max / n as f64).max(dt_min)
}

// ---------------------------------------------------------------------------
// Per-axis condensed QP
// ---------------------------------------------------------------------------

/// One axis of the jerk problem condensed onto its input sequence:
/// `min 0.5 u' P u + q' u  s.t.  l <= G u <= h`, where the rows of `G` are
/// the velocity at steps 1..n, the acceleration at steps 1..n, then the
/// inputs themselves.
struct AxisProblem {
    p: DMatrix<f64>,
    q: DVector<f64>,
    g: DMatrix<f64>,
    l: DVector<f64>,
    h: DVector<f64>,
}

fn build_axis_problem(
    xi0: Vector3<f64>,
    xif: Vector3<f64>,
    qdiag: Vector3<f64>,
    limits: &Limits,
    n: usize,
    dt: f64,
) -> AxisProblem {
    let (step, input) = jerk_step_matrices(dt);
    // step^k for k = 0..n.
    let mut pows = Vec::with_capacity(n + 1);
    pows.push(Matrix3::identity());
    for k in 1..=n {
        pows.push(pows[k - 1] * step);
    }
    // Column i of the response at step k is step^(k-1-i) * input for i < k.
    let resp = |k: usize, i: usize| -> Vector3<f64> { pows[k - 1 - i] * input };

    let e = DMatrix::from_fn(3, n, |r, i| resp(n, i)[r]);
    let d = pows[n] * xi0;

    let mut p = DMatrix::<f64>::identity(n, n) * 2.0;
    for r in 0..3 {
        for i in 0..n {
            for j in 0..n {
                p[(i, j)] += 2.0 * qdiag[r] * e[(r, i)] * e[(r, j)];
            }
        }
    }
    let mut q = DVector::zeros(n);
    for i in 0..n {
        for r in 0..3 {
            q[i] += 2.0 * qdiag[r] * e[(r, i)] * (d[r] - xif[r]);
        }
    }

    let m = 3 * n;
    let mut g = DMatrix::zeros(m, n);
    let mut l = DVector::zeros(m);
    let mut h = DVector::zeros(m);
    for k in 1..=n {
        let nom = pows[k] * xi0;
        for i in 0..k {
            let c = resp(k, i);
            g[(k - 1, i)] = c[1]; // velocity row
            g[(n + k - 1, i)] = c[2]; // acceleration row
        }
        l[k - 1] = -limits.v_max - nom[1];
        h[k - 1] = limits.v_max - nom[1];
        l[n + k - 1] = -limits.a_max - nom[2];
        h[n + k - 1] = limits.a_max - nom[2];
    }
    for i in 0..n {
        g[(2 * n + i, i)] = 1.0;
        l[2 * n + i] = -limits.j_max;
        h[2 * n + i] = limits.j_max;
    }
    AxisProblem { p, q, g, l, h }
}

/// Result of one axis solve, including the constraint multipliers in the
/// row order of the problem (velocities, accelerations, inputs); positive
/// multipliers push against upper bounds, negative against lower.
#[derive(Debug, Clone)]
pub struct AxisReport {
    pub duals: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: u32,
    pub polished: bool,
}

struct AxisSolution {
    u: DVector<f64>,
    report: AxisReport,
}

/// KKT residual of (u, y): max of stationarity, primal feasibility, and
/// complementary slackness violations.
fn kkt_residual(prob: &AxisProblem, u: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let stat = (&prob.p * u + &prob.q + prob.g.transpose() * y).amax();
    let gu = &prob.g * u;
    let mut feas: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..gu.len() {
        feas = feas.max(gu[i] - prob.h[i]).max(prob.l[i] - gu[i]);
        // Distance from the bound the multiplier claims to push against.
        if y[i] > 0.0 {
            comp = comp.max(y[i] * (prob.h[i] - gu[i]).abs());
        } else if y[i] < 0.0 {
            comp = comp.max(-y[i] * (gu[i] - prob.l[i]).abs());
        }
    }
    stat.max(feas.max(0.0)).max(comp)
}

/// Solve the equality-constrained subproblem on a candidate active set.
/// Returns the primal point and the full-length multiplier vector.
fn solve_on_active_set(
    prob: &AxisProblem,
    active: &[(usize, bool)],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = prob.q.len();
    let na = active.len();
    let dim = n + na;
    let mut k = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    k.view_mut((0, 0), (n, n)).copy_from(&prob.p);
    for (ai, &(row, upper)) in active.iter().enumerate() {
        for j in 0..n {
            k[(n + ai, j)] = prob.g[(row, j)];
            k[(j, n + ai)] = prob.g[(row, j)];
        }
        rhs[n + ai] = if upper { prob.h[row] } else { prob.l[row] };
    }
    for j in 0..n {
        rhs[j] = -prob.q[j];
    }
    let sol = k.clone().lu().solve(&rhs).or_else(|| {
        // Dependent active rows: fall back to a least-squares solution.
        k.svd(true, true).solve(&rhs, 1e-12).ok()
    })?;
    let u = DVector::from_fn(n, |i, _| sol[i]);
    let mut y = DVector::<f64>::zeros(prob.l.len());
    for (ai, &(row, _)) in active.iter().enumerate() {
        y[row] = sol[n + ai];
    }
    if u.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return None;
    }
    Some((u, y))
}

/// Active-set refinement seeded by a splitting iterate: the projection
/// lands exactly on a bound for every constraint it clamped, so the seed
/// set falls out of `z`. Re-solve the equality problem, drop rows whose
/// multiplier signs are wrong, add rows the equality solution violates,
/// and return the best verified point.
fn refine_active_set(
    prob: &AxisProblem,
    z: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>, f64)> {
    let m = prob.l.len();
    let mut active: Vec<(usize, bool)> = (0..m)
        .filter_map(|i| {
            if z[i] == prob.h[i] && prob.h[i] != prob.l[i] {
                Some((i, true))
            } else if z[i] == prob.l[i] {
                Some((i, false))
            } else {
                None
            }
        })
        .collect();
    let mut best: Option<(DVector<f64>, DVector<f64>, f64)> = None;
    for _ in 0..60 {
        let Some((up, yp)) = solve_on_active_set(prob, &active) else {
            break;
        };
        // Drop active rows pushing the wrong way.
        let mut dropped = false;
        active.retain(|&(row, upper)| {
            let bad = if upper { yp[row] < -1e-9 } else { yp[row] > 1e-9 };
            dropped |= bad;
            !bad
        });
        if dropped {
            continue;
        }
        let res = kkt_residual(prob, &up, &yp);
        if best.as_ref().map_or(true, |b| res < b.2) {
            best = Some((up.clone(), yp, res));
        }
        if res <= 1e-10 {
            break;
        }
        // Add the most violated inactive row, if any.
        let gup = &prob.g * &up;
        let mut worst = (1e-9, None);
        for i in 0..m {
            if active.iter().any(|&(row, _)| row == i) {
                continue;
            }
            let over = gup[i] - prob.h[i];
            let under = prob.l[i] - gup[i];
            if over > worst.0 {
                worst = (over, Some((i, true)));
            }
            if under > worst.0 {
                worst = (under, Some((i, false)));
            }
        }
        match worst.1 {
            Some(row) => active.push(row),
            None => break,
        }
    }
    best
}

fn solve_axis(prob: &AxisProblem, max_iters: u32) -> AxisSolution {
    let n = prob.q.len();
    let m = prob.l.len();
    const SIGMA: f64 = 1e-6;
    const ALPHA: f64 = 1.6; // over-relaxation
    let mut rho = 5.0;

    let factor = |rho: f64| {
        (&prob.p
            + DMatrix::<f64>::identity(n, n) * SIGMA
            + prob.g.transpose() * &prob.g * rho)
            .cholesky()
            .expect("splitting system is positive definite by construction")
    };
    let mut chol = factor(rho);

    let mut u = DVector::<f64>::zeros(n);
    let mut z = DVector::<f64>::zeros(m);
    for i in 0..m {
        z[i] = 0.0f64.clamp(prob.l[i], prob.h[i]);
    }
    let mut y = DVector::<f64>::zeros(m);
    let mut iters = 0;
    let mut best: Option<(DVector<f64>, DVector<f64>, f64, bool)> = None;
    while iters < max_iters {
        let mut gu = DVector::<f64>::zeros(m);
        for _ in 0..25 {
            let rhs = &u * SIGMA - &prob.q + prob.g.transpose() * (&z * rho - &y);
            u = chol.solve(&rhs);
            gu = &prob.g * &u;
            for i in 0..m {
                let relaxed = ALPHA * gu[i] + (1.0 - ALPHA) * z[i];
                let znew = (relaxed + y[i] / rho).clamp(prob.l[i], prob.h[i]);
                y[i] += rho * (relaxed - znew);
                z[i] = znew;
            }
            iters += 1;
        }
        // The active set usually settles long before the iterates converge,
        // so try to finish exactly from the current clamp pattern.
        if let Some((up, yp, res)) = refine_active_set(prob, &z) {
            if best.as_ref().map_or(true, |b| res < b.2) {
                best = Some((up, yp, res, true));
            }
            if res <= 1e-9 {
                break;
            }
        }
        if kkt_residual(prob, &u, &y) <= 1e-8 {
            break;
        }
        // Rebalance the penalty toward whichever residual is lagging.
        let r_p = (&gu - &z).amax();
        let r_d = (&prob.p * &u + &prob.q + prob.g.transpose() * &y).amax();
        let ratio = (r_p + 1e-16) / (r_d + 1e-16);
        if ratio > 10.0 {
            rho = (rho * 2.0).min(1e6);
            chol = factor(rho);
        } else if ratio < 0.1 {
            rho = (rho / 2.0).max(1e-3);
            chol = factor(rho);
        }
    }

    let admm_res = kkt_residual(prob, &u, &y);
    if best.as_ref().map_or(true, |b| admm_res < b.2) {
        best = Some((u, y, admm_res, false));
    }
    let (u, y, res, polished) = best.unwrap();
    AxisSolution {
        u,
        report: AxisReport {
            duals: y.iter().copied().collect(),
            kkt_residual: res,
            iterations: iters,
            polished,
        },
    }
}

// ---------------------------------------------------------------------------
// Jerk solver
// ---------------------------------------------------------------------------

/// Outcome of a jerk solve at one fixed step length.
#[derive(Debug)]
pub struct FixedDtSolve {
    pub primitive: JerkPrimitive,
    /// All three axis solves met the KKT tolerance.
    pub solved: bool,
    pub kkt_residual: f64,
    /// Distance from the terminal knot to the requested terminal position.
    pub terminal_error: f64,
    pub axes: [AxisReport; 3],
}

/// Solve the jerk problem at a caller-chosen `dt` (no growth); used both by
/// the growth loop and by tests probing dependence on the horizon.
pub fn solve_jerk_fixed_dt(
    x0: &FlatState,
    xf: &FlatState,
    limits: &Limits,
    weight: &TerminalWeight,
    n: usize,
    dt: f64,
    opts: &SolveOptions,
) -> FixedDtSolve {
    let qd = [
        Vector3::new(weight.pos[0], weight.vel[0], weight.acc[0]),
        Vector3::new(weight.pos[1], weight.vel[1], weight.acc[1]),
        Vector3::new(weight.pos[2], weight.vel[2], weight.acc[2]),
    ];
    let mut axis_u = Vec::with_capacity(3);
    let mut axes = Vec::with_capacity(3);
    for ax in 0..3 {
        let xi0 = Vector3::new(x0.pos[ax], x0.vel[ax], x0.acc[ax]);
        let xif = Vector3::new(xf.pos[ax], xf.vel[ax], xf.acc[ax]);
        let prob = build_axis_problem(xi0, xif, qd[ax], limits, n, dt);
        let sol = solve_axis(&prob, opts.admm_max_iters);
        axis_u.push(sol.u);
        axes.push(sol.report);
    }
    let inputs: Vec<Vector3<f64>> = (0..n)
        .map(|k| Vector3::new(axis_u[0][k], axis_u[1][k], axis_u[2][k]))
        .collect();
    let mut prim = JerkPrimitive {
        x0: *x0,
        inputs,
        dt,
        n,
        terminal: *x0,
    };
    prim.terminal = *prim.rollout().last().unwrap();
    let terminal_error = (prim.terminal.pos - xf.pos).norm();
    let kkt = axes.iter().map(|a| a.kkt_residual).fold(0.0, f64::max);
    let axes: [AxisReport; 3] = axes.try_into().unwrap();
    FixedDtSolve {
        primitive: prim,
        solved: kkt <= opts.kkt_tol,
        kkt_residual: kkt,
        terminal_error,
        axes,
    }
}

/// Converged jerk solve, including how the horizon was chosen.
#[derive(Debug)]
pub struct JerkSolve {
    pub primitive: JerkPrimitive,
    /// Lower bound the growth started from.
    pub dt0: f64,
    pub growth_iters: u32,
    pub kkt_residual: f64,
    pub terminal_error: f64,
    pub axes: [AxisReport; 3],
}

/// Solve the jerk problem, growing `dt` geometrically from the minimum-time
/// lower bound until the KKT tolerance holds and the terminal knot lands
/// within `eps_terminal` of the requested position.
pub fn solve_jerk(
    x0: &FlatState,
    xf: &FlatState,
    limits: &Limits,
    weight: &TerminalWeight,
    opts: &SolveOptions,
) -> Result<JerkSolve, SolveError> {
    let dt0 = min_time_per_axis(x0, xf, limits, opts.n, opts.dt_min);
    let mut dt = dt0;
    let cap = opts.max_growth_iters();
    let mut last_err = f64::INFINITY;
    for growth in 0..=cap {
        let sol = solve_jerk_fixed_dt(x0, xf, limits, weight, opts.n, dt, opts);
        if sol.solved && sol.terminal_error <= opts.eps_terminal {
            return Ok(JerkSolve {
                primitive: sol.primitive,
                dt0,
                growth_iters: growth,
                kkt_residual: sol.kkt_residual,
                terminal_error: sol.terminal_error,
                axes: sol.axes,
            });
        }
        last_err = sol.terminal_error;
        dt *= opts.gamma_dt;
    }
    Err(SolveError::MaxIterations {
        growth_iters: cap,
        terminal_error: last_err,
    })
}

// ---------------------------------------------------------------------------
// Velocity solver
// ---------------------------------------------------------------------------

/// Solve one velocity-controlled segment with pinned endpoints. The
/// constant profile is optimal; the step length starts at the per-axis
/// minimum time over `n` and is floored at `dt_min`, which already makes
/// the binding axis feasible with equality.
fn solve_velocity_segment(
    p0: Point3<f64>,
    pf: Point3<f64>,
    v_max: f64,
    n: usize,
    dt_min: f64,
) -> VelPrimitive {
    let dp = pf - p0;
    let t_v = dp.amax() / v_max;
    let dt = (t_v / n as f64).max(dt_min);
    let v = dp / (n as f64 * dt);
    VelPrimitive {
        p0,
        pf,
        inputs: vec![v; n],
        dt,
        n,
    }
}

/// Chain of velocity primitives through an ordered waypoint list, one per
/// consecutive pair.
pub fn solve_velocity_chain(
    points: &[Point3<f64>],
    v_max: f64,
    n: usize,
    dt_min: f64,
) -> Vec<VelPrimitive> {
    points
        .windows(2)
        .map(|w| solve_velocity_segment(w[0], w[1], v_max, n, dt_min))
        .collect()
}

// ---------------------------------------------------------------------------
// Time-normalized costs
// ---------------------------------------------------------------------------

/// Cost of a jerk primitive: duration times mean squared jerk, normalized
/// by the jerk limit.
pub fn cost_jerk(prim: &JerkPrimitive, j_max: f64) -> f64 {
    let sum: f64 = prim.inputs.iter().map(|u| u.norm_squared()).sum();
    (prim.n as f64 * prim.dt / (j_max * j_max)) * sum
}

/// Cost of a velocity-primitive chain, normalized by the velocity limit.
pub fn cost_velocity(prims: &[VelPrimitive], v_max: f64) -> f64 {
    prims
        .iter()
        .map(|p| {
            let sum: f64 = p.inputs.iter().map(|v| v.norm_squared()).sum();
            (p.n as f64 * p.dt / (v_max * v_max)) * sum
        })
        .sum()
}

/// Cost of traversing the remaining path tail at the velocity limit: the
/// hop from `c` onto the first tail waypoint plus the tail's arc length,
/// all divided by `v_max`.
pub fn cost_distance(c: &Point3<f64>, tail: &[Point3<f64>], v_max: f64) -> f64 {
    if tail.is_empty() {
        return 0.0;
    }
    let mut d = (tail[0] - c).norm();
    for w in tail.windows(2) {
        d += (w[1] - w[0]).norm();
    }
    d / v_max
}
