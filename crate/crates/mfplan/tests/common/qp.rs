//! Independent dense reconstruction of the single-axis jerk QP, used to
//! cross-check the production solver. Everything here is built from
//! longhand state rollouts and unit-impulse responses — no code shared with
//! the solver's condensed matrices.

use nalgebra::{DMatrix, DVector};

/// One axis of a jerk-solve instance.
#[derive(Debug, Clone)]
pub struct AxisInstance {
    pub x0: [f64; 3],
    pub xf: [f64; 3],
    /// Diagonal terminal weights (position, velocity, acceleration).
    pub qdiag: [f64; 3],
    pub v_max: f64,
    pub a_max: f64,
    pub j_max: f64,
    pub n: usize,
    pub dt: f64,
}

/// One exact step of the triple integrator under constant jerk `u`.
pub fn step_state(s: [f64; 3], u: f64, dt: f64) -> [f64; 3] {
    [
        s[0] + s[1] * dt + 0.5 * s[2] * dt * dt + u * dt * dt * dt / 6.0,
        s[1] + s[2] * dt + 0.5 * u * dt * dt,
        s[2] + u * dt,
    ]
}

/// Knot states `x_0..x_n` for an input sequence.
pub fn rollout_axis(x0: [f64; 3], us: &[f64], dt: f64) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(us.len() + 1);
    out.push(x0);
    let mut cur = x0;
    for &u in us {
        cur = step_state(cur, u, dt);
        out.push(cur);
    }
    out
}

/// Dense data for `min 0.5 u'Pu + q'u  s.t.  l <= Gu <= h`, where the rows
/// of `G` are velocities at steps 1..n, accelerations at steps 1..n, then
/// the inputs themselves.
pub struct DenseQp {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub g: DMatrix<f64>,
    pub l: DVector<f64>,
    pub h: DVector<f64>,
    pub inst: AxisInstance,
}

/// Build the dense QP from impulse responses: column `i` of every linear
/// map is the rollout difference caused by a unit input at step `i`.
pub fn build_dense(inst: &AxisInstance) -> DenseQp {
    let n = inst.n;
    let zero_roll = rollout_axis(inst.x0, &vec![0.0; n], inst.dt);
    let mut e = DMatrix::<f64>::zeros(3, n); // terminal response
    let mut gv = DMatrix::<f64>::zeros(n, n); // velocity responses
    let mut ga = DMatrix::<f64>::zeros(n, n); // acceleration responses
    for i in 0..n {
        let mut us = vec![0.0; n];
        us[i] = 1.0;
        let roll = rollout_axis(inst.x0, &us, inst.dt);
        for r in 0..3 {
            e[(r, i)] = roll[n][r] - zero_roll[n][r];
        }
        for k in 1..=n {
            gv[(k - 1, i)] = roll[k][1] - zero_roll[k][1];
            ga[(k - 1, i)] = roll[k][2] - zero_roll[k][2];
        }
    }
    let qm = DMatrix::from_diagonal(&DVector::from_row_slice(&inst.qdiag));
    let p = DMatrix::<f64>::identity(n, n) * 2.0 + 2.0 * e.transpose() * &qm * &e;
    let dmx = DVector::from_row_slice(&[
        zero_roll[n][0] - inst.xf[0],
        zero_roll[n][1] - inst.xf[1],
        zero_roll[n][2] - inst.xf[2],
    ]);
    let q = 2.0 * e.transpose() * &qm * dmx;

    let m = 3 * n;
    let mut g = DMatrix::<f64>::zeros(m, n);
    let mut l = DVector::<f64>::zeros(m);
    let mut h = DVector::<f64>::zeros(m);
    for k in 1..=n {
        for i in 0..n {
            g[(k - 1, i)] = gv[(k - 1, i)];
            g[(n + k - 1, i)] = ga[(k - 1, i)];
        }
        l[k - 1] = -inst.v_max - zero_roll[k][1];
        h[k - 1] = inst.v_max - zero_roll[k][1];
        l[n + k - 1] = -inst.a_max - zero_roll[k][2];
        h[n + k - 1] = inst.a_max - zero_roll[k][2];
    }
    for i in 0..n {
        g[(2 * n + i, i)] = 1.0;
        l[2 * n + i] = -inst.j_max;
        h[2 * n + i] = inst.j_max;
    }
    DenseQp {
        p,
        q,
        g,
        l,
        h,
        inst: inst.clone(),
    }
}

/// Minimizer of the unconstrained problem: the stationarity system
/// `P u = -q` solved densely.
pub fn solve_unconstrained(dense: &DenseQp) -> DVector<f64> {
    dense
        .p
        .clone()
        .lu()
        .solve(&(-&dense.q))
        .expect("dense stationarity system is nonsingular")
}

/// True objective computed from a fresh rollout (not from P/q):
/// summed squared inputs plus the weighted terminal deviation.
pub fn objective(inst: &AxisInstance, us: &[f64]) -> f64 {
    let roll = rollout_axis(inst.x0, us, inst.dt);
    let term = roll[inst.n];
    let mut obj: f64 = us.iter().map(|u| u * u).sum();
    for r in 0..3 {
        obj += inst.qdiag[r] * (term[r] - inst.xf[r]).powi(2);
    }
    obj
}

/// Worst KKT violation of a primal/dual pair: stationarity, primal
/// feasibility, complementary slackness, and multiplier signs.
pub fn kkt_error(dense: &DenseQp, u: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let stat = (&dense.p * u + &dense.q + dense.g.transpose() * y).amax();
    let gu = &dense.g * u;
    let mut worst = stat;
    for i in 0..gu.len() {
        worst = worst
            .max(gu[i] - dense.h[i])
            .max(dense.l[i] - gu[i]);
        if y[i] > 0.0 {
            worst = worst.max(y[i] * (dense.h[i] - gu[i]).abs());
        } else if y[i] < 0.0 {
            worst = worst.max(-y[i] * (gu[i] - dense.l[i]).abs());
        }
    }
    worst
}
