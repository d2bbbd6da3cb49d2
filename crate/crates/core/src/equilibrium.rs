//! Quasi-steady-state map of the fast subsystem and closed-loop equilibria.
//!
//! The fast subsystem is solved in a reduced coordinate. For each generator
//! the integrator state `v` is replaced by `s = tanh(v / Δ1) + γ(v) / k_v`,
//! where `γ(v) = ρ(v) v + B_v v` is the total leakage. `s` is strictly
//! increasing in `v`, and both the voltage command and the steady current
//! depend smoothly on it even when `v` is deep in saturation. The network
//! equations are eliminated by a cached LU of the bus admittance matrix, so
//! the remaining Newton system has one unknown per generator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controller::{leak, leak_prime, omega1, omega2, omega2_prime, sigma, ControllerState};
use crate::error::{Error, Result};
use crate::grid::Microgrid;
use crate::linalg::{inf_norm, DenseLu};
use crate::plant::{full_jacobian, full_rhs_into, StateLayout, SystemState};

/// Residual target for the quasi-steady state.
pub const QSS_TOL: f64 = 1e-10;
/// Residual target for the closed-loop equilibrium.
pub const EQUILIBRIUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: QSS_TOL,
            max_halvings: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub x: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Damped Newton iteration with backtracking on the max-norm of the residual.
///
/// `f` writes the residual and returns `false` if `x` is outside its domain.
/// Iteration continues past `tol` while the residual keeps halving, so the
/// result sits at round-off level when the problem allows it.
pub fn damped_newton<F, J>(
    x0: &[f64],
    mut f: F,
    mut jac: J,
    opts: &NewtonOptions,
    solver: &'static str,
) -> Result<NewtonOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> bool,
    J: FnMut(&[f64]) -> DMatrix<f64>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut r = vec![0.0; n];
    if !f(&x, &mut r) {
        return Err(Error::NoConvergence {
            solver,
            iterations: 0,
            residual: f64::INFINITY,
        });
    }
    let mut norm = inf_norm(&r);
    let mut trial = vec![0.0; n];
    let mut r_trial = vec![0.0; n];
    for iter in 0..opts.max_iter {
        if norm <= opts.tol * 1e-3 {
            return Ok(NewtonOutcome {
                x,
                residual: norm,
                iterations: iter,
            });
        }
        let jm = jac(&x);
        let lu = DenseLu::new(jm)?;
        let dx = lu.solve(&-DVector::from_column_slice(&r))?;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            for i in 0..n {
                trial[i] = x[i] + step * dx[i];
            }
            if f(&trial, &mut r_trial) {
                let nt = inf_norm(&r_trial);
                if nt < norm {
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            if norm <= opts.tol {
                return Ok(NewtonOutcome {
                    x,
                    residual: norm,
                    iterations: iter,
                });
            }
            return Err(Error::NoConvergence {
                solver,
                iterations: iter,
                residual: norm,
            });
        }
        let new_norm = inf_norm(&r_trial);
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut r, &mut r_trial);
        let stalled = new_norm > 0.5 * norm;
        norm = new_norm;
        if norm <= opts.tol && stalled {
            return Ok(NewtonOutcome {
                x,
                residual: norm,
                iterations: iter + 1,
            });
        }
    }
    if norm <= opts.tol {
        return Ok(NewtonOutcome {
            x,
            residual: norm,
            iterations: opts.max_iter,
        });
    }
    Err(Error::NoConvergence {
        solver,
        iterations: opts.max_iter,
        residual: norm,
    })
}

/// Central-difference Jacobian with per-component step `max(1e-6, 1e-6 |x|)`.
pub fn fd_jacobian<F>(x: &[f64], m: usize, mut f: F) -> DMatrix<f64>
where
    F: FnMut(&[f64], &mut [f64]) -> bool,
{
    let n = x.len();
    let mut jm = DMatrix::zeros(m, n);
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; m];
    let mut fm = vec![0.0; m];
    for j in 0..n {
        let h = (1e-6f64).max(1e-6 * x[j].abs());
        xp[j] = x[j] + h;
        let ok_p = f(&xp, &mut fp);
        xp[j] = x[j] - h;
        let ok_m = f(&xp, &mut fm);
        xp[j] = x[j];
        if !(ok_p && ok_m) {
            continue;
        }
        for i in 0..m {
            jm[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jm
}

/// Solution of the fast subsystem for frozen `λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuasiSteadyState {
    pub lambda: Vec<f64>,
    /// Generator currents (A).
    pub h1: Vec<f64>,
    /// Line currents (A).
    pub h2: Vec<f64>,
    /// Bus voltages (V).
    pub h3: Vec<f64>,
    /// Integrator states.
    pub h4: Vec<f64>,
    /// Max-norm of the fast-subsystem residual.
    pub residual: f64,
    pub iterations: usize,
}

/// Reusable solver for the quasi-steady-state map of one parameter set.
pub struct QssSolver<'a> {
    grid: &'a Microgrid,
    /// `Z = β_G Y⁻¹ β_Gᵀ + R_g`, the driving-point impedance seen by the
    /// generators.
    z: DMatrix<f64>,
    /// `Y⁻¹ β_Gᵀ`, bus voltages per unit generator current.
    w: DMatrix<f64>,
    /// Bus voltages with all generators open.
    v0: DVector<f64>,
    opts: NewtonOptions,
}

impl<'a> QssSolver<'a> {
    pub fn new(grid: &'a Microgrid) -> Result<Self> {
        if !grid.all_online() {
            return Err(Error::Scenario(
                "the quasi-steady-state map needs every generator online".into(),
            ));
        }
        let e = &grid.electrical;
        let be = grid.topology.beta_e();
        let bg = grid.topology.beta_g();
        let re_inv = DMatrix::from_diagonal(&DVector::from_iterator(
            e.r_e.len(),
            e.r_e.iter().map(|r| 1.0 / r),
        ));
        let yn = be.transpose() * re_inv * &be
            + DMatrix::from_diagonal(&DVector::from_column_slice(&e.g_cte));
        let lu = DenseLu::new(yn)?;
        let w = lu.solve_matrix(&bg.transpose())?;
        let v0 = -lu.solve(&DVector::from_column_slice(&e.i_cte))?;
        let z = &bg * &w + DMatrix::from_diagonal(&DVector::from_column_slice(&e.r_g));
        Ok(Self {
            grid,
            z,
            w,
            v0,
            opts: NewtonOptions::default(),
        })
    }

    pub fn with_options(mut self, opts: NewtonOptions) -> Self {
        self.opts = opts;
        self
    }

    pub fn grid(&self) -> &Microgrid {
        self.grid
    }

    fn degenerate(&self) -> bool {
        let s = &self.grid.controller.settings;
        s.alpha == 0.0 && s.b_v == 0.0
    }

    /// `tanh(v / Δ1)`, or zero without an integral path.
    fn t_of(&self, v: f64) -> f64 {
        let d1 = self.grid.controller.delta1;
        if d1 == 0.0 {
            0.0
        } else {
            (v / d1).tanh()
        }
    }

    fn phi(&self, v: f64) -> f64 {
        let p = &self.grid.controller;
        self.t_of(v) + leak(v, p) / p.settings.k_v
    }

    fn phi_prime(&self, v: f64) -> (f64, f64) {
        let p = &self.grid.controller;
        let tp = if p.delta1 == 0.0 {
            0.0
        } else {
            crate::controller::sech2(v / p.delta1) / p.delta1
        };
        (tp, leak_prime(v, p) / p.settings.k_v)
    }

    /// Inverse of the strictly increasing map `v -> s`.
    fn v_of_s(&self, s: f64, hint: f64) -> Option<f64> {
        let target = |v: f64| self.phi(v) - s;
        let mut lo = if hint.is_finite() { hint - 1.0 } else { -1.0 };
        let mut hi = lo + 2.0;
        let mut width = 2.0;
        while target(lo) > 0.0 {
            width *= 4.0;
            lo -= width;
            if lo < -1e300 {
                return None;
            }
        }
        width = 2.0;
        while target(hi) < 0.0 {
            width *= 4.0;
            hi += width;
            if hi > 1e300 {
                return None;
            }
        }
        // Safeguarded Newton inside the bracket.
        let mut v = hint.clamp(lo, hi);
        for _ in 0..400 {
            let g = target(v);
            if g == 0.0 {
                return Some(v);
            }
            if g < 0.0 {
                lo = v;
            } else {
                hi = v;
            }
            let (tp, lp) = self.phi_prime(v);
            let d = tp + lp;
            let mut next = if d > 0.0 { v - g / d } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if next == v || hi - lo <= 4.0 * f64::EPSILON * hi.abs().max(lo.abs()).max(1e-300) {
                return Some(next);
            }
            v = next;
        }
        Some(v)
    }

    /// Fast-subsystem residual in the reduced coordinate. Returns the
    /// recovered `v` and `I` alongside.
    fn reduced_residual(
        &self,
        lambda: &[f64],
        s: &[f64],
        v_hint: &[f64],
        r: &mut [f64],
        v: &mut [f64],
        i_g: &mut [f64],
    ) -> bool {
        let p = &self.grid.controller;
        let inv_rated = self.grid.inv_rated();
        let n = lambda.len();
        for i in 0..n {
            match self.v_of_s(s[i], v_hint[i]) {
                Some(vi) => v[i] = vi,
                None => return false,
            }
            // γ(v) / k_v = s - tanh(v / Δ1) by construction.
            i_g[i] = (sigma(lambda[i], p) - (s[i] - self.t_of(v[i]))) / inv_rated[i];
        }
        let ig = DVector::from_column_slice(i_g);
        let u_req = &self.z * &ig + self.bg_times(&self.v0);
        for i in 0..n {
            let u = omega1(v[i], p) - omega2(lambda[i], i_g[i], inv_rated[i], p);
            r[i] = u_req[i] - u;
        }
        r.iter().all(|x| x.is_finite())
    }

    fn bg_times(&self, v_bus: &DVector<f64>) -> DVector<f64> {
        let gb = self.grid.topology.gen_bus();
        DVector::from_iterator(gb.len(), gb.iter().map(|&k| v_bus[k]))
    }

    fn reduced_jacobian(&self, lambda: &[f64], v: &[f64], i_g: &[f64]) -> DMatrix<f64> {
        let p = &self.grid.controller;
        let inv_rated = self.grid.inv_rated();
        let n = lambda.len();
        let mut jm = DMatrix::zeros(n, n);
        let mut di = vec![0.0; n];
        let mut diag = vec![0.0; n];
        for i in 0..n {
            let (tp, lp) = self.phi_prime(v[i]);
            let d = tp + lp;
            let (a, c) = if d > 0.0 {
                (tp / d, lp / d)
            } else {
                (0.0, 1.0)
            };
            di[i] = -c / inv_rated[i];
            let w2 = omega2_prime(lambda[i], i_g[i], inv_rated[i], p) * inv_rated[i];
            diag[i] = -p.delta1 * a + w2 * di[i];
        }
        for i in 0..n {
            for j in 0..n {
                jm[(i, j)] = self.z[(i, j)] * di[j];
            }
            jm[(i, i)] += diag[i];
        }
        jm
    }

    /// Solves the fast subsystem at `λ`, optionally warm-started from a
    /// previous solution.
    pub fn solve(
        &self,
        lambda: &[f64],
        guess: Option<&QuasiSteadyState>,
    ) -> Result<QuasiSteadyState> {
        let n = self.grid.n_g();
        if lambda.len() != n {
            return Err(Error::Dimension {
                what: "lambda",
                expected: n,
                got: lambda.len(),
            });
        }
        if lambda.iter().any(|x| !x.is_finite()) {
            return Err(Error::param("lambda", "must be finite"));
        }
        let (v, i_g, iterations) = if self.degenerate() {
            self.solve_degenerate(lambda)?
        } else {
            let v_hint: Vec<f64> = match guess {
                Some(g) if g.h4.len() == n => g.h4.clone(),
                _ => vec![0.0; n],
            };
            let s0: Vec<f64> = v_hint.iter().map(|&v| self.phi(v)).collect();
            let mut v_buf = vec![0.0; n];
            let mut i_buf = vec![0.0; n];
            let mut hint = v_hint.clone();
            let out = damped_newton(
                &s0,
                |s, r| {
                    let ok = self.reduced_residual(lambda, s, &hint, r, &mut v_buf, &mut i_buf);
                    if ok {
                        hint.copy_from_slice(&v_buf);
                    }
                    ok
                },
                |s| {
                    let mut r = vec![0.0; n];
                    let mut v = vec![0.0; n];
                    let mut ig = vec![0.0; n];
                    self.reduced_residual(lambda, s, &v_hint, &mut r, &mut v, &mut ig);
                    self.reduced_jacobian(lambda, &v, &ig)
                },
                &NewtonOptions {
                    tol: self.opts.tol * 1e-2,
                    ..self.opts
                },
                "quasi-steady state",
            )?;
            let mut r = vec![0.0; n];
            let mut v = vec![0.0; n];
            let mut ig = vec![0.0; n];
            self.reduced_residual(lambda, &out.x, &v_hint, &mut r, &mut v, &mut ig);
            (v, ig, out.iterations)
        };
        let mut qss = self.assemble(lambda, v, i_g, iterations);
        if qss.residual > self.opts.tol {
            qss = self.polish(qss)?;
        }
        Ok(qss)
    }

    /// Zero leakage: row four forces `Λ I = σ(λ)` and `v` follows from the
    /// voltage balance, provided the required command is inside the band.
    fn solve_degenerate(&self, lambda: &[f64]) -> Result<(Vec<f64>, Vec<f64>, usize)> {
        let p = &self.grid.controller;
        let inv_rated = self.grid.inv_rated();
        let n = lambda.len();
        let i_g: Vec<f64> = (0..n).map(|i| sigma(lambda[i], p) / inv_rated[i]).collect();
        let u_req = &self.z * DVector::from_column_slice(&i_g) + self.bg_times(&self.v0);
        let mut v = vec![0.0; n];
        for i in 0..n {
            let target = u_req[i] + omega2(lambda[i], i_g[i], inv_rated[i], p);
            let arg = (target - p.v_star) / p.delta1;
            if p.delta1 == 0.0 || !(arg.abs() < 1.0) {
                return Err(Error::NoConvergence {
                    solver: "quasi-steady state (no leakage, command saturated)",
                    iterations: 0,
                    residual: (arg.abs() - 1.0).max(0.0) * p.delta1,
                });
            }
            v[i] = p.delta1 * arg.atanh();
        }
        Ok((v, i_g, 0))
    }

    fn assemble(
        &self,
        lambda: &[f64],
        v: Vec<f64>,
        i_g: Vec<f64>,
        iterations: usize,
    ) -> QuasiSteadyState {
        let e = &self.grid.electrical;
        let v_bus = &self.w * DVector::from_column_slice(&i_g) + &self.v0;
        let h2: Vec<f64> = self
            .grid
            .topology
            .line_endpoints()
            .iter()
            .enumerate()
            .map(|(j, &(a, b))| -(v_bus[a] - v_bus[b]) / e.r_e[j])
            .collect();
        let mut q = QuasiSteadyState {
            lambda: lambda.to_vec(),
            h1: i_g,
            h2,
            h3: v_bus.iter().copied().collect(),
            h4: v,
            residual: 0.0,
            iterations,
        };
        q.residual = inf_norm(&self.fast_residual(&q));
        q
    }

    fn pack(q: &QuasiSteadyState) -> Vec<f64> {
        let mut x = q.h1.clone();
        x.extend_from_slice(&q.h2);
        x.extend_from_slice(&q.h3);
        x.extend_from_slice(&q.h4);
        x
    }

    fn unpack(&self, lambda: &[f64], x: &[f64]) -> QuasiSteadyState {
        let (ng, ne, nk) = (self.grid.n_g(), self.grid.n_e(), self.grid.n_k());
        QuasiSteadyState {
            lambda: lambda.to_vec(),
            h1: x[..ng].to_vec(),
            h2: x[ng..ng + ne].to_vec(),
            h3: x[ng + ne..ng + ne + nk].to_vec(),
            h4: x[ng + ne + nk..].to_vec(),
            residual: 0.0,
            iterations: 0,
        }
    }

    /// Four-block Newton on the unreduced fast equations.
    fn polish(&self, q: QuasiSteadyState) -> Result<QuasiSteadyState> {
        let lambda = q.lambda.clone();
        let x0 = Self::pack(&q);
        let m = x0.len();
        let eval = |x: &[f64], r: &mut [f64]| {
            let res = self.fast_residual(&self.unpack(&lambda, x));
            r.copy_from_slice(&res);
            r.iter().all(|v| v.is_finite())
        };
        let out = damped_newton(
            &x0,
            eval,
            |x| fd_jacobian(x, m, eval),
            &self.opts,
            "quasi-steady state",
        )?;
        let mut polished = self.unpack(&lambda, &out.x);
        polished.residual = out.residual;
        polished.iterations = q.iterations + out.iterations;
        Ok(polished)
    }

    /// Residual of the four fast blocks: generator voltage balance, line
    /// voltage balance, bus current balance and the integrator balance.
    pub fn fast_residual(&self, q: &QuasiSteadyState) -> Vec<f64> {
        let g = self.grid;
        let e = &g.electrical;
        let p = &g.controller;
        let inv_rated = g.inv_rated();
        let mut r = Vec::with_capacity(2 * g.n_g() + g.n_e() + g.n_k());
        for (i, &k) in g.topology.gen_bus().iter().enumerate() {
            let u = omega1(q.h4[i], p) - omega2(q.lambda[i], q.h1[i], inv_rated[i], p);
            r.push(u - q.h3[k] - e.r_g[i] * q.h1[i]);
        }
        for (j, &(a, b)) in g.topology.line_endpoints().iter().enumerate() {
            r.push(-(q.h3[a] - q.h3[b]) - e.r_e[j] * q.h2[j]);
        }
        let mut bus: Vec<f64> = (0..g.n_k())
            .map(|k| -e.g_cte[k] * q.h3[k] - e.i_cte[k])
            .collect();
        for (i, &k) in g.topology.gen_bus().iter().enumerate() {
            bus[k] += q.h1[i];
        }
        for (j, &(a, b)) in g.topology.line_endpoints().iter().enumerate() {
            bus[a] += q.h2[j];
            bus[b] -= q.h2[j];
        }
        r.extend(bus);
        for i in 0..g.n_g() {
            r.push(
                -leak(q.h4[i], p)
                    + p.settings.k_v * (sigma(q.lambda[i], p) - inv_rated[i] * q.h1[i]),
            );
        }
        r
    }

    /// `M(λ) = σ(λ) - Λ h¹(λ)`.
    pub fn mismatch(
        &self,
        lambda: &[f64],
        guess: Option<&QuasiSteadyState>,
    ) -> Result<(Vec<f64>, QuasiSteadyState)> {
        let q = self.solve(lambda, guess)?;
        let p = &self.grid.controller;
        let inv_rated = self.grid.inv_rated();
        let m = (0..lambda.len())
            .map(|i| sigma(lambda[i], p) - inv_rated[i] * q.h1[i])
            .collect();
        Ok((m, q))
    }
}

/// One-shot quasi-steady-state solve.
pub fn solve_h(
    lambda: &[f64],
    grid: &Microgrid,
    guess: Option<&QuasiSteadyState>,
) -> Result<QuasiSteadyState> {
    QssSolver::new(grid)?.solve(lambda, guess)
}

/// Closed-loop equilibrium with diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub state: SystemState,
    /// Max-norm of the closed-loop vector field at `state`.
    pub residual: f64,
    pub iterations: usize,
    /// `max_{i,l} |λ_i - λ_l|`.
    pub consensus_spread: f64,
    /// Per generator: integrator state outside `(v_neg, v_pos)`.
    pub saturated: Vec<bool>,
    /// `direct` when Newton from the flat start converged, `reduced` when the
    /// slow-manifold fallback was needed.
    pub method: String,
}

/// Linear network solution with every generator commanded to `u`.
fn linear_start(grid: &Microgrid) -> Result<Vec<f64>> {
    let e = &grid.electrical;
    let ly = StateLayout::of(grid);
    let bg = grid.topology.beta_g();
    let be = grid.topology.beta_e();
    let u = grid.controller.v_star;
    let rg_inv = DVector::from_iterator(ly.n_g, e.r_g.iter().map(|r| 1.0 / r));
    let re_inv = DMatrix::from_diagonal(&DVector::from_iterator(
        ly.n_e,
        e.r_e.iter().map(|r| 1.0 / r),
    ));
    let y = be.transpose() * re_inv * &be
        + bg.transpose() * DMatrix::from_diagonal(&rg_inv) * &bg
        + DMatrix::from_diagonal(&DVector::from_column_slice(&e.g_cte));
    let rhs = bg.transpose() * rg_inv.scale(u) - DVector::from_column_slice(&e.i_cte);
    let v_bus = DenseLu::new(y)?.solve(&rhs)?;
    let mut x = vec![0.0; ly.dim()];
    for (i, &k) in grid.topology.gen_bus().iter().enumerate() {
        x[i] = (u - v_bus[k]) * rg_inv[i];
    }
    for (j, &(a, b)) in grid.topology.line_endpoints().iter().enumerate() {
        x[ly.n_g + j] = -(v_bus[a] - v_bus[b]) / e.r_e[j];
    }
    for k in 0..ly.n_k {
        x[ly.v_n().start + k] = v_bus[k];
    }
    Ok(x)
}

/// Newton on the closed-loop field with the analytic Jacobian. Without ζ
/// leakage the last ζ equation is replaced by `Σ ζ = 0` to fix the gauge.
fn full_newton(grid: &Microgrid, x0: &[f64], opts: &NewtonOptions) -> Result<NewtonOutcome> {
    let ly = StateLayout::of(grid);
    let gauge = grid.controller.settings.b_zeta == 0.0;
    let last = ly.zeta().end - 1;
    let zeta = ly.zeta();
    damped_newton(
        x0,
        |x, r| {
            full_rhs_into(x, grid, true, r);
            if gauge {
                r[last] = x[zeta.clone()].iter().sum();
            }
            r.iter().all(|v| v.is_finite())
        },
        |x| {
            let mut a = full_jacobian(x, grid, true);
            if gauge {
                for j in 0..ly.dim() {
                    a[(last, j)] = if zeta.contains(&j) { 1.0 } else { 0.0 };
                }
            }
            a
        },
        opts,
        "closed-loop equilibrium",
    )
}

/// Pseudo-inverse solve `L ζ = b` with `Σ ζ = 0`, for `b` summing to zero.
fn laplacian_solve(grid: &Microgrid, b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let mut a = grid.laplacian().clone();
    let mut rhs = DVector::from_column_slice(b);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    rhs[n - 1] = 0.0;
    Ok(DenseLu::new(a)?.solve(&rhs)?.iter().copied().collect())
}

/// Slow-manifold fallback: a common `λ` from the scalar balance `Σ M_i = 0`,
/// then Newton on the reduced `(λ, ζ)` dynamics.
fn reduced_equilibrium(grid: &Microgrid) -> Result<Vec<f64>> {
    let solver = QssSolver::new(grid)?;
    let n = grid.n_g();
    let s = &grid.controller.settings;
    let total = |c: f64| -> Result<f64> {
        let (m, _) = solver.mismatch(&vec![c; n], None)?;
        Ok(m.iter().sum())
    };

    // Scan for a sign change, then bisect.
    let grid_pts: Vec<f64> = (0..=40).map(|k| -2.0 + 0.1 * k as f64).collect();
    let mut prev: Option<(f64, f64)> = None;
    let mut bracket = None;
    for &c in &grid_pts {
        let Ok(val) = total(c) else { continue };
        if val == 0.0 {
            bracket = Some((c, c));
            break;
        }
        if let Some((pc, pv)) = prev {
            if pv.signum() != val.signum() {
                bracket = Some((pc, c));
                break;
            }
        }
        prev = Some((c, val));
    }
    let (mut lo, mut hi) = bracket.ok_or(Error::NoConvergence {
        solver: "consensus predictor",
        iterations: grid_pts.len(),
        residual: f64::NAN,
    })?;
    let f_lo = total(lo)?;
    for _ in 0..100 {
        if hi - lo < 1e-14 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let fm = total(mid)?;
        if fm.signum() == f_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    let lambda0 = vec![c; n];
    let (m0, _) = solver.mismatch(&lambda0, None)?;
    // With λ at consensus, L ζ must absorb the individual mismatches.
    let neg_m: Vec<f64> = m0.iter().map(|x| -x).collect();
    let zeta0 = laplacian_solve(grid, &neg_m)?;

    let gauge = s.b_zeta == 0.0;
    let lap = grid.laplacian();
    let slow = |y: &[f64], r: &mut [f64]| -> bool {
        let (lam, zeta) = y.split_at(n);
        let Ok((m, _)) = solver.mismatch(lam, None) else {
            return false;
        };
        for i in 0..n {
            let mut l_lam = 0.0;
            let mut l_zeta = 0.0;
            for j in 0..n {
                l_lam += lap[(i, j)] * lam[j];
                l_zeta += lap[(i, j)] * zeta[j];
            }
            r[i] = -m[i] - l_zeta - s.k * l_lam;
            r[n + i] = l_lam - s.b_zeta * zeta[i];
        }
        if gauge {
            r[2 * n - 1] = zeta.iter().sum();
        }
        true
    };
    let mut y0 = lambda0;
    y0.extend(zeta0);
    let out = damped_newton(
        &y0,
        slow,
        |y| fd_jacobian(y, 2 * n, slow),
        &NewtonOptions {
            tol: 1e-12,
            ..Default::default()
        },
        "reduced equilibrium",
    )?;
    let (lam, zeta) = out.x.split_at(n);
    let q = solver.solve(lam, None)?;
    let ly = StateLayout::of(grid);
    let mut x = vec![0.0; ly.dim()];
    x[ly.i_g()].copy_from_slice(&q.h1);
    x[ly.i_e()].copy_from_slice(&q.h2);
    x[ly.v_n()].copy_from_slice(&q.h3);
    x[ly.v()].copy_from_slice(&q.h4);
    x[ly.lambda()].copy_from_slice(lam);
    x[ly.zeta()].copy_from_slice(zeta);
    Ok(x)
}

/// Closed-loop equilibrium with the controller enabled and every generator
/// online.
pub fn solve_equilibrium(grid: &Microgrid) -> Result<EquilibriumReport> {
    if !grid.all_online() {
        return Err(Error::Scenario(
            "equilibrium analysis needs every generator online".into(),
        ));
    }
    let opts = NewtonOptions {
        tol: EQUILIBRIUM_TOL * 1e-1,
        ..Default::default()
    };
    let x0 = linear_start(grid)?;
    let (x, iterations, method) = match full_newton(grid, &x0, &opts) {
        Ok(out) => (out.x, out.iterations, "direct"),
        Err(first) => {
            let xr = reduced_equilibrium(grid).map_err(|_| first)?;
            let out = full_newton(grid, &xr, &opts)?;
            (out.x, out.iterations, "reduced")
        }
    };
    report_from_state(grid, &x, iterations, method)
}

fn report_from_state(
    grid: &Microgrid,
    x: &[f64],
    iterations: usize,
    method: &str,
) -> Result<EquilibriumReport> {
    let ly = StateLayout::of(grid);
    let mut f = vec![0.0; ly.dim()];
    full_rhs_into(x, grid, true, &mut f);
    let residual = inf_norm(&f);
    if !(residual < EQUILIBRIUM_TOL) {
        return Err(Error::NoConvergence {
            solver: "closed-loop equilibrium",
            iterations,
            residual,
        });
    }
    let state = SystemState::from_slice(&ly, x)?;
    let lam = &state.ctrl.lambda;
    let max = lam.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = lam.iter().copied().fold(f64::INFINITY, f64::min);
    let p = &grid.controller;
    let saturated = state
        .ctrl
        .v
        .iter()
        .map(|&v| v > p.v_pos || v < p.v_neg)
        .collect();
    Ok(EquilibriumReport {
        state,
        residual,
        iterations,
        consensus_spread: max - min,
        saturated,
        method: method.to_string(),
    })
}

impl EquilibriumReport {
    pub fn controller(&self) -> &ControllerState {
        &self.state.ctrl
    }
}
