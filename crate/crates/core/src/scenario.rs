//! Timed scenarios: fixed-step RK4 integration of the full closed loop, a
//! reduced slow-state simulation on the quasi-steady manifold, and the
//! sharing/containment metrics.

use serde::{Deserialize, Serialize};

use crate::controller::rho;
use crate::equilibrium::{solve_equilibrium, QssSolver, QuasiSteadyState};
use crate::error::{Error, Result};
use crate::grid::Microgrid;
use crate::linalg::inf_norm;
use crate::plant::{control_input, full_rhs_into, StateLayout, SystemState};
use crate::stability::lyapunov_slow;

/// Sharing error below which a window counts as settled (p.u.).
pub const SHARING_TOL: f64 = 1e-3;
/// Integrator magnitude flagged as a saturation diagnostic.
pub const V_SAT_FLAG: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    ControllerEnable,
    LoadIcteScale { bus: usize, factor: f64 },
    LoadGScale { bus: usize, factor: f64 },
    DgDisconnect { dg: usize },
    DgReconnect { dg: usize },
    LoadDisconnect { bus: usize },
    LoadReconnect { bus: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub time: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl ScenarioEvent {
    pub fn new(time: f64, kind: EventKind) -> Self {
        Self { time, kind }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Controller state at `t = 0`.
    pub controller_enabled: bool,
    pub events: Vec<ScenarioEvent>,
}

impl Scenario {
    /// Controller active from the start, no events.
    pub fn steady() -> Self {
        Self {
            controller_enabled: true,
            events: Vec::new(),
        }
    }

    /// The benchmark schedule: controller start, load steps at bus 1, a
    /// conductance step at bus 3, generator 1 out between 200 s and 300 s and
    /// load 4 out between 370 s and 410 s (one-based names).
    pub fn load_steps_and_plug_and_play() -> Self {
        use EventKind::*;
        let ev = ScenarioEvent::new;
        Self {
            controller_enabled: false,
            events: vec![
                ev(5.0, ControllerEnable),
                ev(
                    50.0,
                    LoadIcteScale {
                        bus: 0,
                        factor: 1.25,
                    },
                ),
                ev(
                    75.0,
                    LoadGScale {
                        bus: 2,
                        factor: 1.15,
                    },
                ),
                ev(
                    100.0,
                    LoadIcteScale {
                        bus: 0,
                        factor: 0.85,
                    },
                ),
                ev(200.0, DgDisconnect { dg: 0 }),
                ev(300.0, DgReconnect { dg: 0 }),
                ev(370.0, LoadDisconnect { bus: 3 }),
                ev(410.0, LoadReconnect { bus: 3 }),
            ],
        }
    }

    /// Events sorted by time; ties keep their listed order.
    pub fn sorted_events(&self) -> Vec<ScenarioEvent> {
        let mut ev = self.events.clone();
        ev.sort_by(|a, b| a.time.total_cmp(&b.time));
        ev
    }

    /// Checks event times and indices against a grid and horizon.
    pub fn validate(&self, grid: &Microgrid, t_end: f64) -> Result<()> {
        for e in &self.events {
            if !e.time.is_finite() || e.time < 0.0 || e.time > t_end {
                return Err(Error::Scenario(format!(
                    "event at t = {} outside [0, {t_end}]",
                    e.time
                )));
            }
            let (idx, n, what) = match e.kind {
                EventKind::ControllerEnable => continue,
                EventKind::LoadIcteScale { bus, factor }
                | EventKind::LoadGScale { bus, factor } => {
                    if !(factor.is_finite() && factor >= 0.0) {
                        return Err(Error::Scenario(format!(
                            "load scale factor {factor} must be >= 0"
                        )));
                    }
                    (bus, grid.n_k(), "bus")
                }
                EventKind::LoadDisconnect { bus } | EventKind::LoadReconnect { bus } => {
                    (bus, grid.n_k(), "bus")
                }
                EventKind::DgDisconnect { dg } | EventKind::DgReconnect { dg } => {
                    (dg, grid.n_g(), "generator")
                }
            };
            if idx >= n {
                return Err(Error::Scenario(format!(
                    "event at t = {} references {what} {idx}, only {n} exist",
                    e.time
                )));
            }
        }
        Ok(())
    }
}

/// Mutable simulation context: the current parameter set plus bookkeeping
/// needed to undo disconnections.
#[derive(Debug, Clone)]
pub struct SimContext {
    pub grid: Microgrid,
    pub controller_enabled: bool,
    parked_loads: Vec<Option<(f64, f64)>>,
}

impl SimContext {
    pub fn new(grid: Microgrid, controller_enabled: bool) -> Self {
        let n_k = grid.n_k();
        Self {
            grid,
            controller_enabled,
            parked_loads: vec![None; n_k],
        }
    }
}

/// Applies one event to the context and the flat state vector.
pub fn apply_event(ctx: &mut SimContext, x: &mut [f64], event: &EventKind) -> Result<()> {
    let layout = StateLayout::of(&ctx.grid);
    match *event {
        EventKind::ControllerEnable => {
            ctx.controller_enabled = true;
        }
        EventKind::LoadIcteScale { bus, factor } => {
            let mut e = ctx.grid.electrical.clone();
            e.i_cte[bus] *= factor;
            ctx.grid = ctx.grid.with_electrical(e)?;
        }
        EventKind::LoadGScale { bus, factor } => {
            let mut e = ctx.grid.electrical.clone();
            e.g_cte[bus] *= factor;
            ctx.grid = ctx.grid.with_electrical(e)?;
        }
        EventKind::LoadDisconnect { bus } => {
            if ctx.parked_loads[bus].is_some() {
                return Err(Error::Scenario(format!(
                    "load at bus {bus} is already disconnected"
                )));
            }
            let mut e = ctx.grid.electrical.clone();
            ctx.parked_loads[bus] = Some((e.g_cte[bus], e.i_cte[bus]));
            e.g_cte[bus] = 0.0;
            e.i_cte[bus] = 0.0;
            ctx.grid = ctx.grid.with_electrical(e)?;
        }
        EventKind::LoadReconnect { bus } => {
            let (g, i) = ctx.parked_loads[bus]
                .take()
                .ok_or_else(|| Error::Scenario(format!("load at bus {bus} is not disconnected")))?;
            let mut e = ctx.grid.electrical.clone();
            e.g_cte[bus] = g;
            e.i_cte[bus] = i;
            ctx.grid = ctx.grid.with_electrical(e)?;
        }
        EventKind::DgDisconnect { dg } => {
            if !ctx.grid.is_online(dg) {
                return Err(Error::Scenario(format!(
                    "generator {dg} is already disconnected"
                )));
            }
            let mut online = ctx.grid.online().to_vec();
            online[dg] = false;
            ctx.grid = ctx.grid.with_online(online)?;
            x[layout.i_g().start + dg] = 0.0;
        }
        EventKind::DgReconnect { dg } => {
            if ctx.grid.is_online(dg) {
                return Err(Error::Scenario(format!(
                    "generator {dg} is already connected"
                )));
            }
            let mut online = ctx.grid.online().to_vec();
            online[dg] = true;
            ctx.grid = ctx.grid.with_online(online)?;
            x[layout.i_g().start + dg] = 0.0;
        }
    }
    Ok(())
}

/// Reference for the slow Lyapunov function recorded along trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LyapunovReference {
    /// `λ̄ = ζ̄ = 0`.
    Origin,
    Fixed {
        lambda: Vec<f64>,
        zeta: Vec<f64>,
    },
    /// Equilibrium of the parameters active in each event window. Windows
    /// without a solvable equilibrium keep the previous reference.
    SegmentEquilibrium,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrateOptions {
    pub dt: f64,
    pub t_end: f64,
    pub sample_every: usize,
    pub reference: LyapunovReference,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            dt: 1e-4,
            t_end: 450.0,
            sample_every: 100,
            reference: LyapunovReference::SegmentEquilibrium,
        }
    }
}

/// Sampled closed-loop trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub layout: StateLayout,
    pub t: Vec<f64>,
    /// Flat states in `(I_g, I_e, V_n, v, λ, ζ)` order.
    pub x: Vec<Vec<f64>>,
    /// Generator voltage commands (V).
    pub u: Vec<Vec<f64>>,
    /// Per-unit generator currents `I / I_rated`.
    pub share_pu: Vec<Vec<f64>>,
    pub rho: Vec<Vec<f64>>,
    /// Max pairwise per-unit current difference over connected generators.
    pub share_err: Vec<f64>,
    pub ws: Vec<f64>,
    /// Any `|v_i|` above the saturation diagnostic level.
    pub vsat: Vec<bool>,
    /// `(time, number of samples recorded before the event)` per applied
    /// event.
    pub event_marks: Vec<(f64, usize)>,
    pub v_min: f64,
    pub v_max: f64,
}

impl Trajectory {
    fn new(layout: StateLayout, grid: &Microgrid) -> Self {
        Self {
            layout,
            t: Vec::new(),
            x: Vec::new(),
            u: Vec::new(),
            share_pu: Vec::new(),
            rho: Vec::new(),
            share_err: Vec::new(),
            ws: Vec::new(),
            vsat: Vec::new(),
            event_marks: Vec::new(),
            v_min: grid.controller.v_min,
            v_max: grid.controller.v_max,
        }
    }

    fn record(&mut self, t: f64, x: &[f64], ctx: &SimContext, reference: &(Vec<f64>, Vec<f64>)) {
        let ly = self.layout;
        let grid = &ctx.grid;
        let u = control_input(x, grid, ctx.controller_enabled);
        let share: Vec<f64> = x[ly.i_g()]
            .iter()
            .zip(grid.inv_rated())
            .map(|(i, r)| i * r)
            .collect();
        let p = &grid.controller;
        let rho_v: Vec<f64> = x[ly.v()].iter().map(|&v| rho(v, p)).collect();
        let ws = lyapunov_slow(
            &x[ly.lambda()],
            &x[ly.zeta()],
            &reference.0,
            &reference.1,
            &p.settings,
        );
        let vsat = x[ly.v()].iter().any(|v| v.abs() > V_SAT_FLAG);
        self.t.push(t);
        self.x.push(x.to_vec());
        self.u.push(u);
        self.share_err.push(sharing_error(&share, grid.online()));
        self.share_pu.push(share);
        self.rho.push(rho_v);
        self.ws.push(ws);
        self.vsat.push(vsat);
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn final_state(&self) -> Option<SystemState> {
        self.x
            .last()
            .and_then(|x| SystemState::from_slice(&self.layout, x).ok())
    }

    /// CSV column names; per-unit quantities carry a `_pu` suffix.
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend(self.layout.labels());
        for i in 1..=self.layout.n_g {
            h.push(format!("u{i}"));
        }
        h.push("share_err_pu".into());
        h.push("Ws".into());
        for i in 1..=self.layout.n_g {
            h.push(format!("share{i}_pu"));
        }
        for i in 1..=self.layout.n_g {
            h.push(format!("rho{i}"));
        }
        h.push("vsat".into());
        h
    }

    /// One row per sample, in [`Trajectory::header`] order.
    pub fn rows(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(move |k| {
            let mut row = Vec::with_capacity(self.header_len());
            row.push(self.t[k]);
            row.extend_from_slice(&self.x[k]);
            row.extend_from_slice(&self.u[k]);
            row.push(self.share_err[k]);
            row.push(self.ws[k]);
            row.extend_from_slice(&self.share_pu[k]);
            row.extend_from_slice(&self.rho[k]);
            row.push(if self.vsat[k] { 1.0 } else { 0.0 });
            row
        })
    }

    fn header_len(&self) -> usize {
        1 + self.layout.dim() + 3 * self.layout.n_g + 3
    }
}

/// `max_{i,l} |s_i - s_l|` over entries flagged online.
pub fn sharing_error(share: &[f64], online: &[bool]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (s, &on) in share.iter().zip(online) {
        if on {
            lo = lo.min(*s);
            hi = hi.max(*s);
        }
    }
    if hi >= lo {
        hi - lo
    } else {
        0.0
    }
}

struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    fn step(&mut self, x: &mut [f64], h: f64, mut f: impl FnMut(&[f64], &mut [f64])) {
        let n = x.len();
        f(x, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
        }
        f(&self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
        }
        f(&self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = x[i] + h * self.k3[i];
        }
        f(&self.tmp, &mut self.k4);
        for i in 0..n {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Step count and final step length covering `[a, b]` with nominal step `dt`.
fn segment_steps(a: f64, b: f64, dt: f64) -> (usize, f64) {
    let r = (b - a) / dt;
    let m = ((r - 1e-9).ceil() as usize).max(1);
    let last = b - (a + (m - 1) as f64 * dt);
    (m, last)
}

/// Largest admissible step: a fifth of the fastest branch time constant.
pub fn max_stable_dt(grid: &Microgrid) -> f64 {
    0.2 * grid.electrical.min_time_constant()
}

fn reference_for(
    ctx: &SimContext,
    current: &(Vec<f64>, Vec<f64>),
    mode: &LyapunovReference,
) -> (Vec<f64>, Vec<f64>) {
    let n = ctx.grid.n_g();
    match mode {
        LyapunovReference::Origin => (vec![0.0; n], vec![0.0; n]),
        LyapunovReference::Fixed { lambda, zeta } => (lambda.clone(), zeta.clone()),
        LyapunovReference::SegmentEquilibrium => {
            if !ctx.grid.all_online() {
                return current.clone();
            }
            match solve_equilibrium(&ctx.grid) {
                Ok(rep) => (rep.state.ctrl.lambda, rep.state.ctrl.zeta),
                Err(_) => current.clone(),
            }
        }
    }
}

/// Fixed-step RK4 run of the full closed loop through a scenario.
///
/// Steps are shortened so every event time is hit exactly; events are
/// applied after the state at their time is sampled.
pub fn integrate(
    initial: &SystemState,
    grid: &Microgrid,
    scenario: &Scenario,
    opts: &IntegrateOptions,
) -> Result<Trajectory> {
    let layout = StateLayout::of(grid);
    if initial.layout() != layout {
        return Err(Error::Dimension {
            what: "initial state",
            expected: layout.dim(),
            got: initial.to_vec().len(),
        });
    }
    if !(opts.dt > 0.0) || !opts.dt.is_finite() {
        return Err(Error::param("dt", "must be positive"));
    }
    let dt_max = max_stable_dt(grid);
    if opts.dt >= dt_max {
        return Err(Error::param(
            "dt",
            format!("{} s exceeds the stability limit {dt_max} s", opts.dt),
        ));
    }
    if !(opts.t_end >= 0.0) || !opts.t_end.is_finite() {
        return Err(Error::param("t_end", "must be finite and nonnegative"));
    }
    if opts.sample_every == 0 {
        return Err(Error::param("sample_every", "must be at least 1"));
    }
    if let LyapunovReference::Fixed { lambda, zeta } = &opts.reference {
        if lambda.len() != layout.n_g || zeta.len() != layout.n_g {
            return Err(Error::Dimension {
                what: "Lyapunov reference",
                expected: layout.n_g,
                got: lambda.len().min(zeta.len()),
            });
        }
    }
    scenario.validate(grid, opts.t_end)?;

    let events = scenario.sorted_events();
    let mut ctx = SimContext::new(grid.clone(), scenario.controller_enabled);
    let mut x = initial.to_vec();
    let mut traj = Trajectory::new(layout, grid);
    let origin = (vec![0.0; layout.n_g], vec![0.0; layout.n_g]);
    let mut reference = reference_for(&ctx, &origin, &opts.reference);

    let mut next_event = 0;
    let apply_due = |t: f64,
                     next_event: &mut usize,
                     ctx: &mut SimContext,
                     x: &mut [f64],
                     traj: &mut Trajectory,
                     reference: &mut (Vec<f64>, Vec<f64>)|
     -> Result<()> {
        let mut changed = false;
        while *next_event < events.len() && events[*next_event].time <= t {
            traj.event_marks
                .push((events[*next_event].time, traj.len()));
            apply_event(ctx, x, &events[*next_event].kind)?;
            *next_event += 1;
            changed = true;
        }
        if changed {
            *reference = reference_for(ctx, reference, &opts.reference);
        }
        Ok(())
    };

    apply_due(
        0.0,
        &mut next_event,
        &mut ctx,
        &mut x,
        &mut traj,
        &mut reference,
    )?;
    traj.record(0.0, &x, &ctx, &reference);

    let mut boundaries: Vec<f64> = events
        .iter()
        .map(|e| e.time)
        .filter(|&t| t > 0.0 && t < opts.t_end)
        .collect();
    boundaries.dedup();
    boundaries.push(opts.t_end);

    let mut rk = Rk4::new(layout.dim());
    let mut step_count: usize = 0;
    let mut t = 0.0;
    for &b in &boundaries {
        if b <= t {
            continue;
        }
        let a = t;
        let (m, last) = segment_steps(a, b, opts.dt);
        for k in 0..m {
            let h = if k + 1 == m { last } else { opts.dt };
            let grid_now = &ctx.grid;
            let enabled = ctx.controller_enabled;
            rk.step(&mut x, h, |y, out| full_rhs_into(y, grid_now, enabled, out));
            t = if k + 1 == m {
                b
            } else {
                a + (k + 1) as f64 * opts.dt
            };
            step_count += 1;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    time: t,
                    detail: format!("state {:?}", x),
                });
            }
            if step_count.is_multiple_of(opts.sample_every) || (k + 1 == m && b == opts.t_end) {
                traj.record(t, &x, &ctx, &reference);
            }
        }
        apply_due(
            t,
            &mut next_event,
            &mut ctx,
            &mut x,
            &mut traj,
            &mut reference,
        )?;
    }
    Ok(traj)
}

/// Sharing statistics for one interval between consecutive events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub start: f64,
    pub end: f64,
    /// Sharing error at the last sample of the window.
    pub end_share_err: f64,
    pub max_share_err: f64,
    /// First time after which the sharing error stays below tolerance for
    /// the rest of the window.
    pub settling_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub final_share_err: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub vn_min: f64,
    pub vn_max: f64,
    /// Samples with some `u_i` outside `[V_min, V_max]` (1e-9 slack).
    pub containment_violations: usize,
    pub windows: Vec<WindowMetrics>,
}

pub fn metrics(traj: &Trajectory) -> Metrics {
    let ly = traj.layout;
    let mut u_min = f64::INFINITY;
    let mut u_max = f64::NEG_INFINITY;
    let mut vn_min = f64::INFINITY;
    let mut vn_max = f64::NEG_INFINITY;
    let mut violations = 0;
    for (u, x) in traj.u.iter().zip(&traj.x) {
        let mut bad = false;
        for &ui in u {
            u_min = u_min.min(ui);
            u_max = u_max.max(ui);
            if ui < traj.v_min - 1e-9 || ui > traj.v_max + 1e-9 {
                bad = true;
            }
        }
        if bad {
            violations += 1;
        }
        for &v in &x[ly.v_n()] {
            vn_min = vn_min.min(v);
            vn_max = vn_max.max(v);
        }
    }

    let mut starts: Vec<(f64, usize)> = vec![(0.0, 0)];
    for &(t, idx) in &traj.event_marks {
        if let Some(last) = starts.last_mut() {
            if last.1 == idx && last.0 == t {
                continue;
            }
            if last.1 == idx && idx == 0 {
                *last = (t, idx);
                continue;
            }
        }
        starts.push((t, idx));
    }
    let t_last = traj.t.last().copied().unwrap_or(0.0);
    let mut windows = Vec::new();
    for (w, &(start, from)) in starts.iter().enumerate() {
        let (end, to) = starts
            .get(w + 1)
            .map(|&(t, i)| (t, i))
            .unwrap_or((t_last, traj.len()));
        if to <= from {
            continue;
        }
        let errs = &traj.share_err[from..to];
        let max = errs.iter().copied().fold(0.0, f64::max);
        let mut settle = None;
        for k in (0..errs.len()).rev() {
            if errs[k] >= SHARING_TOL {
                break;
            }
            settle = Some(traj.t[from + k]);
        }
        windows.push(WindowMetrics {
            start,
            end,
            end_share_err: errs[errs.len() - 1],
            max_share_err: max,
            settling_time: settle,
        });
    }

    Metrics {
        final_share_err: traj.share_err.last().copied().unwrap_or(0.0),
        u_min,
        u_max,
        vn_min,
        vn_max,
        containment_violations: violations,
        windows,
    }
}

/// Slow-state trajectory on the quasi-steady manifold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedTrajectory {
    pub t: Vec<f64>,
    pub lambda: Vec<Vec<f64>>,
    pub zeta: Vec<Vec<f64>>,
    /// Generator currents from the quasi-steady state (A).
    pub i_g: Vec<Vec<f64>>,
    pub v_n: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub share_err: Vec<f64>,
    /// Slow Lyapunov function about the equilibrium of the active window.
    pub ws: Vec<f64>,
    pub event_marks: Vec<(f64, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedOptions {
    pub dt: f64,
    pub t_end: f64,
    pub sample_every: usize,
}

impl Default for ReducedOptions {
    fn default() -> Self {
        Self {
            dt: 1e-2,
            t_end: 450.0,
            sample_every: 1,
        }
    }
}

fn slow_rhs(grid: &Microgrid, lam: &[f64], zeta: &[f64], m: &[f64], out: &mut [f64]) {
    let n = lam.len();
    let s = &grid.controller.settings;
    let lap = grid.laplacian();
    for i in 0..n {
        let mut l_lam = 0.0;
        let mut l_zeta = 0.0;
        for j in 0..n {
            l_lam += lap[(i, j)] * lam[j];
            l_zeta += lap[(i, j)] * zeta[j];
        }
        out[i] = (-m[i] - l_zeta - s.k * l_lam) / s.tau_p;
        out[n + i] = (l_lam - s.b_zeta * zeta[i]) / s.tau_d;
    }
}

/// RK4 on the slow states with the fast states replaced by their
/// quasi-steady values, recomputed by warm-started Newton at every stage.
///
/// The controller is treated as active throughout; generator connect and
/// disconnect events are not supported in this mode.
pub fn simulate_reduced(
    grid: &Microgrid,
    lambda0: &[f64],
    zeta0: &[f64],
    scenario: &Scenario,
    opts: &ReducedOptions,
) -> Result<ReducedTrajectory> {
    let n = grid.n_g();
    if lambda0.len() != n || zeta0.len() != n {
        return Err(Error::Dimension {
            what: "slow initial state",
            expected: n,
            got: lambda0.len().min(zeta0.len()),
        });
    }
    if !(opts.dt > 0.0) || !(opts.t_end >= 0.0) || opts.sample_every == 0 {
        return Err(Error::param(
            "reduced options",
            "dt > 0, t_end >= 0 and sample_every >= 1 required",
        ));
    }
    scenario.validate(grid, opts.t_end)?;
    for e in &scenario.events {
        if matches!(
            e.kind,
            EventKind::DgDisconnect { .. } | EventKind::DgReconnect { .. }
        ) {
            return Err(Error::Scenario(
                "generator connect/disconnect is not supported in reduced simulation".into(),
            ));
        }
    }
    let events = scenario.sorted_events();
    let mut ctx = SimContext::new(grid.clone(), true);
    let mut y: Vec<f64> = lambda0.iter().chain(zeta0).copied().collect();
    let mut dummy = vec![0.0; StateLayout::of(grid).dim()];
    let mut out = ReducedTrajectory {
        t: Vec::new(),
        lambda: Vec::new(),
        zeta: Vec::new(),
        i_g: Vec::new(),
        v_n: Vec::new(),
        v: Vec::new(),
        share_err: Vec::new(),
        ws: Vec::new(),
        event_marks: Vec::new(),
    };

    let mut next_event = 0;
    let mut apply = |t: f64,
                     ctx: &mut SimContext,
                     out: &mut ReducedTrajectory,
                     next_event: &mut usize|
     -> Result<bool> {
        let mut changed = false;
        while *next_event < events.len() && events[*next_event].time <= t {
            out.event_marks
                .push((events[*next_event].time, out.t.len()));
            apply_event(ctx, &mut dummy, &events[*next_event].kind)?;
            *next_event += 1;
            changed = true;
        }
        Ok(changed)
    };
    apply(0.0, &mut ctx, &mut out, &mut next_event)?;

    let mut boundaries: Vec<f64> = events
        .iter()
        .map(|e| e.time)
        .filter(|&t| t > 0.0 && t < opts.t_end)
        .collect();
    boundaries.dedup();
    boundaries.push(opts.t_end);

    let mut t = 0.0;
    let mut rk = Rk4::new(2 * n);
    let mut step_count = 0usize;
    let mut seg_start = true;
    for &b in &boundaries {
        if b <= t && !seg_start {
            continue;
        }
        let grid_now = ctx.grid.clone();
        let eq = solve_equilibrium(&grid_now)?;
        let reference = (eq.state.ctrl.lambda.clone(), eq.state.ctrl.zeta.clone());
        let solver = QssSolver::new(&grid_now)?;
        let mut warm: Option<QuasiSteadyState> = None;
        let mut failure: Option<Error> = None;

        let record = |t: f64,
                      y: &[f64],
                      warm: &mut Option<QuasiSteadyState>,
                      out: &mut ReducedTrajectory|
         -> Result<()> {
            let q = solver.solve(&y[..n], warm.as_ref())?;
            let share: Vec<f64> =
                q.h1.iter()
                    .zip(grid_now.inv_rated())
                    .map(|(i, r)| i * r)
                    .collect();
            out.t.push(t);
            out.lambda.push(y[..n].to_vec());
            out.zeta.push(y[n..].to_vec());
            out.share_err.push(sharing_error(&share, grid_now.online()));
            out.ws.push(lyapunov_slow(
                &y[..n],
                &y[n..],
                &reference.0,
                &reference.1,
                &grid_now.controller.settings,
            ));
            out.i_g.push(q.h1.clone());
            out.v_n.push(q.h3.clone());
            out.v.push(q.h4.clone());
            *warm = Some(q);
            Ok(())
        };
        if seg_start {
            record(0.0, &y, &mut warm, &mut out)?;
            seg_start = false;
        } else {
            // Re-sample the post-event state so each window starts with its own reference.
            record(t, &y, &mut warm, &mut out)?;
        }
        if b <= t {
            continue;
        }
        let a = t;
        let (m, last) = segment_steps(a, b, opts.dt);
        for k in 0..m {
            let h = if k + 1 == m { last } else { opts.dt };
            rk.step(&mut y, h, |yy, dy| {
                if failure.is_some() {
                    dy.fill(0.0);
                    return;
                }
                match solver.solve(&yy[..n], warm.as_ref()) {
                    Ok(q) => {
                        let m_vec: Vec<f64> = (0..n)
                            .map(|i| {
                                crate::controller::sigma(yy[i], &grid_now.controller)
                                    - grid_now.inv_rated()[i] * q.h1[i]
                            })
                            .collect();
                        slow_rhs(&grid_now, &yy[..n], &yy[n..], &m_vec, dy);
                        warm = Some(q);
                    }
                    Err(e) => {
                        failure = Some(e);
                        dy.fill(0.0);
                    }
                }
            });
            if let Some(e) = failure.take() {
                return Err(e);
            }
            t = if k + 1 == m {
                b
            } else {
                a + (k + 1) as f64 * opts.dt
            };
            step_count += 1;
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    time: t,
                    detail: format!("slow state {:?}", y),
                });
            }
            if step_count.is_multiple_of(opts.sample_every) || k + 1 == m {
                record(t, &y, &mut warm, &mut out)?;
            }
        }
        apply(t, &mut ctx, &mut out, &mut next_event)?;
    }
    Ok(out)
}

impl ReducedTrajectory {
    /// Largest increase of `W_s` between consecutive samples inside the
    /// window that starts at the given event time.
    pub fn max_ws_increase_after(&self, event_time: f64) -> Option<f64> {
        let pos = self
            .event_marks
            .iter()
            .position(|&(t, _)| t == event_time)?;
        let from = self.event_marks[pos].1;
        let to = self
            .event_marks
            .get(pos + 1)
            .map(|m| m.1)
            .unwrap_or(self.t.len());
        if to <= from + 1 {
            return None;
        }
        let mut worst = f64::NEG_INFINITY;
        for k in from + 1..to {
            worst = worst.max(self.ws[k] - self.ws[k - 1]);
        }
        Some(worst)
    }
}

/// Largest sample-wise max-norm difference between two runs sampled at the
/// same times, relative to the max-norm of `b` over the whole run.
pub fn max_sampled_difference(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    if a.len() != b.len() || a.layout != b.layout {
        return Err(Error::Dimension {
            what: "trajectory samples",
            expected: b.len(),
            got: a.len(),
        });
    }
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (k, (xa, xb)) in a.x.iter().zip(&b.x).enumerate() {
        if (a.t[k] - b.t[k]).abs() > 1e-9 * (1.0 + b.t[k].abs()) {
            return Err(Error::Scenario(format!(
                "sample {k} taken at {} and {}",
                a.t[k], b.t[k]
            )));
        }
        for (p, q) in xa.iter().zip(xb) {
            diff = diff.max((p - q).abs());
            scale = scale.max(q.abs());
        }
    }
    Ok(diff / scale.max(f64::MIN_POSITIVE))
}

/// Max-norm of the difference of two flat states relative to the max-norm
/// of the second.
pub fn relative_difference(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    inf_norm(&diff) / inf_norm(b).max(f64::MIN_POSITIVE)
}
