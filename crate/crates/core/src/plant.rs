//! Electrical network dynamics and the assembled closed-loop vector field.
//!
//! Flat state vectors are ordered `(I_g, I_e, V_n, v, λ, ζ)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::controller::{
    controller_rhs_into, leak_prime, omega1, omega1_prime, omega2, omega2_prime, sigma_prime,
    ControllerState,
};
use crate::error::{Error, Result};
use crate::grid::Microgrid;

/// Offsets of each block inside a flat state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    pub n_g: usize,
    pub n_e: usize,
    pub n_k: usize,
}

impl StateLayout {
    pub fn of(grid: &Microgrid) -> Self {
        Self {
            n_g: grid.n_g(),
            n_e: grid.n_e(),
            n_k: grid.n_k(),
        }
    }

    pub fn dim(&self) -> usize {
        4 * self.n_g + self.n_e + self.n_k
    }

    pub fn i_g(&self) -> std::ops::Range<usize> {
        0..self.n_g
    }

    pub fn i_e(&self) -> std::ops::Range<usize> {
        self.n_g..self.n_g + self.n_e
    }

    pub fn v_n(&self) -> std::ops::Range<usize> {
        let s = self.n_g + self.n_e;
        s..s + self.n_k
    }

    pub fn v(&self) -> std::ops::Range<usize> {
        let s = self.n_g + self.n_e + self.n_k;
        s..s + self.n_g
    }

    pub fn lambda(&self) -> std::ops::Range<usize> {
        let s = 2 * self.n_g + self.n_e + self.n_k;
        s..s + self.n_g
    }

    pub fn zeta(&self) -> std::ops::Range<usize> {
        let s = 3 * self.n_g + self.n_e + self.n_k;
        s..s + self.n_g
    }

    /// Column labels matching the flat ordering, one-based per block.
    pub fn labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.dim());
        let mut push = |prefix: &str, n: usize| {
            for i in 1..=n {
                out.push(format!("{prefix}{i}"));
            }
        };
        push("Ig", self.n_g);
        push("Ie", self.n_e);
        push("Vn", self.n_k);
        push("v", self.n_g);
        push("lam", self.n_g);
        push("zeta", self.n_g);
        out
    }
}

/// Full closed-loop state with SI units (A, V) for the electrical part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub i_g: Vec<f64>,
    pub i_e: Vec<f64>,
    pub v_n: Vec<f64>,
    pub ctrl: ControllerState,
}

impl SystemState {
    /// Bus voltages at `v_bus`, everything else zero.
    pub fn flat_start(grid: &Microgrid, v_bus: f64) -> Self {
        Self {
            i_g: vec![0.0; grid.n_g()],
            i_e: vec![0.0; grid.n_e()],
            v_n: vec![v_bus; grid.n_k()],
            ctrl: ControllerState::zeros(grid.n_g()),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.i_g.len() * 4 + self.i_e.len() + self.v_n.len());
        x.extend_from_slice(&self.i_g);
        x.extend_from_slice(&self.i_e);
        x.extend_from_slice(&self.v_n);
        x.extend_from_slice(&self.ctrl.v);
        x.extend_from_slice(&self.ctrl.lambda);
        x.extend_from_slice(&self.ctrl.zeta);
        x
    }

    pub fn from_slice(layout: &StateLayout, x: &[f64]) -> Result<Self> {
        if x.len() != layout.dim() {
            return Err(Error::Dimension {
                what: "state vector",
                expected: layout.dim(),
                got: x.len(),
            });
        }
        Ok(Self {
            i_g: x[layout.i_g()].to_vec(),
            i_e: x[layout.i_e()].to_vec(),
            v_n: x[layout.v_n()].to_vec(),
            ctrl: ControllerState {
                v: x[layout.v()].to_vec(),
                lambda: x[layout.lambda()].to_vec(),
                zeta: x[layout.zeta()].to_vec(),
            },
        })
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout {
            n_g: self.i_g.len(),
            n_e: self.i_e.len(),
            n_k: self.v_n.len(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }
}

/// Electrical derivatives for a given generator voltage command `u`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn plant_rhs_into(
    i_g: &[f64],
    i_e: &[f64],
    v_n: &[f64],
    u: &[f64],
    grid: &Microgrid,
    di_g: &mut [f64],
    di_e: &mut [f64],
    dv_n: &mut [f64],
) {
    let e = &grid.electrical;
    let topo = &grid.topology;
    for (k, d) in dv_n.iter_mut().enumerate() {
        *d = -e.g_cte[k] * v_n[k] - e.i_cte[k];
    }
    for (i, &k) in topo.gen_bus().iter().enumerate() {
        di_g[i] = (u[i] - v_n[k] - e.r_g[i] * i_g[i]) / e.l_g[i];
        dv_n[k] += i_g[i];
    }
    for (j, &(from, to)) in topo.line_endpoints().iter().enumerate() {
        di_e[j] = (-(v_n[from] - v_n[to]) - e.r_e[j] * i_e[j]) / e.l_e[j];
        dv_n[from] += i_e[j];
        dv_n[to] -= i_e[j];
    }
    for (k, d) in dv_n.iter_mut().enumerate() {
        *d /= e.c_n[k];
    }
}

/// Electrical network derivatives `(dI_g, dI_e, dV_n)`.
pub fn plant_rhs(
    i_g: &[f64],
    i_e: &[f64],
    v_n: &[f64],
    u: &[f64],
    grid: &Microgrid,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    for (what, got, expected) in [
        ("generator currents", i_g.len(), grid.n_g()),
        ("line currents", i_e.len(), grid.n_e()),
        ("bus voltages", v_n.len(), grid.n_k()),
        ("voltage command", u.len(), grid.n_g()),
    ] {
        if got != expected {
            return Err(Error::Dimension {
                what,
                expected,
                got,
            });
        }
    }
    let mut di_g = vec![0.0; grid.n_g()];
    let mut di_e = vec![0.0; grid.n_e()];
    let mut dv_n = vec![0.0; grid.n_k()];
    plant_rhs_into(i_g, i_e, v_n, u, grid, &mut di_g, &mut di_e, &mut dv_n);
    Ok((di_g, di_e, dv_n))
}

/// Generator voltage commands. With the controller disabled every generator
/// is held at `V*`.
pub fn control_input(x: &[f64], grid: &Microgrid, controller_enabled: bool) -> Vec<f64> {
    let layout = StateLayout::of(grid);
    let mut u = vec![0.0; layout.n_g];
    control_input_into(x, grid, controller_enabled, &layout, &mut u);
    u
}

fn control_input_into(
    x: &[f64],
    grid: &Microgrid,
    controller_enabled: bool,
    layout: &StateLayout,
    u: &mut [f64],
) {
    let p = &grid.controller;
    if !controller_enabled {
        u.fill(p.v_star);
        return;
    }
    let i_g = &x[layout.i_g()];
    let v = &x[layout.v()];
    let lambda = &x[layout.lambda()];
    let inv_rated = grid.inv_rated();
    for i in 0..layout.n_g {
        u[i] = omega1(v[i], p) - omega2(lambda[i], i_g[i], inv_rated[i], p);
    }
}

/// Closed-loop vector field written into `out`.
///
/// When `controller_enabled` is false the controller states are frozen and
/// `u = V*`. Offline generators have zero current derivative and frozen
/// controller states.
pub fn full_rhs_into(x: &[f64], grid: &Microgrid, controller_enabled: bool, out: &mut [f64]) {
    let layout = StateLayout::of(grid);
    debug_assert_eq!(x.len(), layout.dim());
    debug_assert_eq!(out.len(), layout.dim());
    // Small fixed-size scratch avoids an allocation in the hot loop for
    // typical generator counts.
    let mut u_small = [0.0; 16];
    let mut u_heap;
    let u: &mut [f64] = if layout.n_g <= 16 {
        &mut u_small[..layout.n_g]
    } else {
        u_heap = vec![0.0; layout.n_g];
        &mut u_heap
    };
    control_input_into(x, grid, controller_enabled, &layout, u);

    let (plant_out, ctrl_out) = out.split_at_mut(layout.v().start);
    let (di_g, rest) = plant_out.split_at_mut(layout.n_g);
    let (di_e, dv_n) = rest.split_at_mut(layout.n_e);
    plant_rhs_into(
        &x[layout.i_g()],
        &x[layout.i_e()],
        &x[layout.v_n()],
        u,
        grid,
        di_g,
        di_e,
        dv_n,
    );
    let online = grid.online();
    for (i, d) in di_g.iter_mut().enumerate() {
        if !online[i] {
            *d = 0.0;
        }
    }

    let (dv, rest) = ctrl_out.split_at_mut(layout.n_g);
    let (dlambda, dzeta) = rest.split_at_mut(layout.n_g);
    if controller_enabled {
        controller_rhs_into(
            &x[layout.v()],
            &x[layout.lambda()],
            &x[layout.zeta()],
            &x[layout.i_g()],
            grid,
            dv,
            dlambda,
            dzeta,
        );
    } else {
        dv.fill(0.0);
        dlambda.fill(0.0);
        dzeta.fill(0.0);
    }
}

/// Allocating wrapper around [`full_rhs_into`] with dimension checks.
pub fn full_rhs(
    state: &SystemState,
    grid: &Microgrid,
    controller_enabled: bool,
) -> Result<SystemState> {
    let layout = StateLayout::of(grid);
    if state.layout() != layout
        || state.ctrl.lambda.len() != layout.n_g
        || state.ctrl.zeta.len() != layout.n_g
    {
        return Err(Error::Dimension {
            what: "system state",
            expected: layout.dim(),
            got: state.to_vec().len(),
        });
    }
    let x = state.to_vec();
    let mut dx = vec![0.0; layout.dim()];
    full_rhs_into(&x, grid, controller_enabled, &mut dx);
    SystemState::from_slice(&layout, &dx)
}

/// Exact Jacobian of [`full_rhs_into`] with respect to the flat state.
pub fn full_jacobian(x: &[f64], grid: &Microgrid, controller_enabled: bool) -> DMatrix<f64> {
    let ly = StateLayout::of(grid);
    let n = ly.dim();
    let mut a = DMatrix::zeros(n, n);
    let e = &grid.electrical;
    let topo = &grid.topology;
    let p = &grid.controller;
    let s = &p.settings;
    let inv_rated = grid.inv_rated();
    let online = grid.online();
    let (ig0, ie0, vn0, v0, l0, z0) = (
        ly.i_g().start,
        ly.i_e().start,
        ly.v_n().start,
        ly.v().start,
        ly.lambda().start,
        ly.zeta().start,
    );

    for (i, &k) in topo.gen_bus().iter().enumerate() {
        if online[i] {
            let row = ig0 + i;
            let lg = e.l_g[i];
            a[(row, vn0 + k)] = -1.0 / lg;
            a[(row, ig0 + i)] = -e.r_g[i] / lg;
            if controller_enabled {
                let w2 = omega2_prime(x[l0 + i], x[ig0 + i], inv_rated[i], p);
                a[(row, ig0 + i)] -= w2 * inv_rated[i] / lg;
                a[(row, l0 + i)] = w2 / lg;
                a[(row, v0 + i)] = omega1_prime(x[v0 + i], p) / lg;
            }
        }
        a[(vn0 + k, ig0 + i)] = 1.0 / e.c_n[k];
    }
    for (j, &(from, to)) in topo.line_endpoints().iter().enumerate() {
        let row = ie0 + j;
        a[(row, vn0 + from)] = -1.0 / e.l_e[j];
        a[(row, vn0 + to)] = 1.0 / e.l_e[j];
        a[(row, ie0 + j)] = -e.r_e[j] / e.l_e[j];
        a[(vn0 + from, ie0 + j)] += 1.0 / e.c_n[from];
        a[(vn0 + to, ie0 + j)] -= 1.0 / e.c_n[to];
    }
    for k in 0..ly.n_k {
        a[(vn0 + k, vn0 + k)] = -e.g_cte[k] / e.c_n[k];
    }

    if controller_enabled {
        let lap = grid.laplacian();
        for i in 0..ly.n_g {
            if !online[i] {
                continue;
            }
            let sp = sigma_prime(x[l0 + i], p);
            a[(v0 + i, v0 + i)] = -leak_prime(x[v0 + i], p) / s.tau;
            a[(v0 + i, l0 + i)] = s.k_v * sp / s.tau;
            a[(v0 + i, ig0 + i)] = -s.k_v * inv_rated[i] / s.tau;

            a[(l0 + i, ig0 + i)] = inv_rated[i] / s.tau_p;
            for j in 0..ly.n_g {
                a[(l0 + i, l0 + j)] = -s.k * lap[(i, j)] / s.tau_p;
                a[(l0 + i, z0 + j)] = -lap[(i, j)] / s.tau_p;
                a[(z0 + i, l0 + j)] = lap[(i, j)] / s.tau_d;
            }
            a[(l0 + i, l0 + i)] -= sp / s.tau_p;
            a[(z0 + i, z0 + i)] = -s.b_zeta / s.tau_d;
        }
    }
    a
}

/// Central-difference Jacobian of [`full_rhs_into`] with per-component step
/// `max(1e-6, 1e-6 |x_j|)`.
pub fn full_jacobian_fd(x: &[f64], grid: &Microgrid, controller_enabled: bool) -> DMatrix<f64> {
    let n = x.len();
    let mut a = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    for j in 0..n {
        let h = (1e-6f64).max(1e-6 * x[j].abs());
        xp[j] = x[j] + h;
        full_rhs_into(&xp, grid, controller_enabled, &mut fp);
        xp[j] = x[j] - h;
        full_rhs_into(&xp, grid, controller_enabled, &mut fm);
        xp[j] = x[j];
        for i in 0..n {
            a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    a
}
