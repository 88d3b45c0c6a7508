//! Sensitivity of the flow with respect to viscosity.
//!
//! `ũ = du/dnu` solves the linearized system
//!
//! ```text
//! ũ_t + B(ũ, u) + B(u, ũ) + nu A ũ + A u = 0,   ũ(t0) = 0,
//! ```
//!
//! and the nudged counterpart `ṽ` additionally feels `mu I_h(ũ - ṽ)`. Both are
//! compared against difference quotients `(u1 - u2) / (nu1 - nu2)` of paired
//! runs.

use std::sync::Arc;

use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{Cutoff, SpectralField};
use crate::grid::Grid2D;
use crate::nonlinear::Workspace;
use crate::observation::{LowModes, ObservationLayout};
use crate::scalar::Real;
use crate::solver::{check_finite, steps_in, FlowState, Nudge, Scheme, Stepper};

/// Time level at which the source `A u` enters a step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SourceTiming {
    /// `A u^n`, alongside the advection terms.
    #[default]
    Explicit,
    /// `A u^{n+1}`: the exact derivative of the discrete IMEX step, so that
    /// difference quotients of discrete runs converge to it.
    Implicit,
}

/// Uniformly sampled sequence of fields, one per time step.
#[derive(Clone, Debug)]
pub struct Trajectory<T: Real> {
    pub t0: T,
    pub dt: T,
    pub fields: Vec<SpectralField<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn new(t0: T, dt: T, fields: Vec<SpectralField<T>>) -> Result<Self> {
        if !(dt > T::zero()) {
            return Err(Error::InvalidParameter(format!("dt = {dt} must be positive")));
        }
        if let Some(first) = fields.first() {
            for f in &fields[1..] {
                f.same_grid(first)?;
            }
        }
        Ok(Self { t0, dt, fields })
    }

    /// Builds a trajectory from timestamped states spaced exactly `dt` apart.
    pub fn from_states(states: &[FlowState<T>], dt: T) -> Result<Self> {
        let Some(first) = states.first() else {
            return Err(Error::TooFew { needed: 1, got: 0 });
        };
        let tol = dt * T::lit(1e-6);
        for (i, s) in states.iter().enumerate() {
            let expect = first.t + T::lit(i as f64) * dt;
            if (s.t - expect).abs() > tol {
                return Err(Error::TrajectoryGap(format!(
                    "sample {i} at t = {} but expected {} (snapshots must be spaced by dt = {dt})",
                    s.t, expect
                )));
            }
        }
        Self::new(first.t, dt, states.iter().map(|s| s.u.clone()).collect())
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn time(&self, i: usize) -> T {
        self.t0 + T::lit(i as f64) * self.dt
    }

    /// Zero-order hold: the latest sample at or before `t`.
    pub fn at_time(&self, t: T) -> Option<&SpectralField<T>> {
        if self.fields.is_empty() || t < self.t0 - self.dt * T::lit(1e-6) {
            return None;
        }
        let k = ((t - self.t0) / self.dt + T::lit(1e-6)).floor().to_usize()?;
        self.fields.get(k.min(self.fields.len() - 1))
    }

    fn aligned_with(&self, other: &Self) -> Result<()> {
        let tol = self.dt * T::lit(1e-6);
        if self.len() != other.len() || (self.t0 - other.t0).abs() > tol || (self.dt - other.dt).abs() > tol {
            return Err(Error::TrajectoryGap(format!(
                "trajectories differ: {} samples from t = {} every {} vs {} samples from t = {} every {}",
                self.len(),
                self.t0,
                self.dt,
                other.len(),
                other.t0,
                other.dt
            )));
        }
        if let (Some(a), Some(b)) = (self.fields.first(), other.fields.first()) {
            a.same_grid(b)?;
        }
        Ok(())
    }
}

/// One IMEX step of the linearized system.
pub struct SensitivityStepper<T: Real> {
    nu: T,
    dt: T,
    timing: SourceTiming,
    nonlinear: bool,
    nudge: Option<(T, Arc<ObservationLayout<T>>)>,
    ws: Workspace<T>,
    b1: SpectralField<T>,
    b2: SpectralField<T>,
    steps: u64,
}

impl<T: Real> SensitivityStepper<T> {
    pub fn new(grid: &Grid2D<T>, nu: T, dt: T, timing: SourceTiming) -> Self {
        Self {
            nu,
            dt,
            timing,
            nonlinear: true,
            nudge: None,
            ws: Workspace::new(grid),
            b1: SpectralField::zeros(grid),
            b2: SpectralField::zeros(grid),
            steps: 0,
        }
    }

    pub fn without_nonlinearity(mut self) -> Self {
        self.nonlinear = false;
        self
    }

    /// Relaxes toward the observed modes of a target sensitivity.
    pub fn with_nudging(mut self, mu: T, cutoff: Cutoff<T>) -> Result<Self> {
        if !(mu >= T::zero()) {
            return Err(Error::InvalidParameter(format!("mu = {mu} must be non-negative")));
        }
        if mu > T::zero() {
            let layout = ObservationLayout::new(self.ws.grid(), cutoff)?;
            self.nudge = Some((mu, layout));
        }
        Ok(self)
    }

    /// Advances `tilde` from level n to n+1 given the base flow at both
    /// levels and, when nudging, the target sensitivity at level n.
    pub fn step(
        &mut self,
        tilde: &mut SpectralField<T>,
        base_now: &SpectralField<T>,
        base_next: &SpectralField<T>,
        target: Option<&SpectralField<T>>,
    ) -> Result<()> {
        tilde.same_grid(base_now)?;
        tilde.same_grid(base_next)?;
        let dt = self.dt;
        let g = tilde.grid().clone();
        if self.nonlinear {
            self.ws.bilinear_into(tilde, base_now, &mut self.b1);
            self.ws.bilinear_into(base_now, tilde, &mut self.b2);
        }
        let source = match self.timing {
            SourceTiming::Explicit => base_now,
            SourceTiming::Implicit => base_next,
        };
        let mut rhs: [Vec<Complex<T>>; 2] = [tilde.component(0).to_vec(), tilde.component(1).to_vec()];
        if let Some((mu, layout)) = &self.nudge {
            let target = target.ok_or_else(|| Error::InvalidParameter("nudged sensitivity needs a target".into()))?;
            target.same_grid(tilde)?;
            for &i in layout.indices() {
                let (a, b) = (target.at(i), tilde.at(i));
                for c in 0..2 {
                    rhs[c][i] += (a[c] - b[c]).scale(dt * *mu);
                }
            }
        }
        for idx in 0..g.len() {
            let k2 = g.ksq(idx);
            let d = T::one() + dt * self.nu * k2;
            for c in 0..2 {
                let mut x = rhs[c][idx] - source.component(c)[idx].scale(dt * k2);
                if self.nonlinear {
                    x -= (self.b1.component(c)[idx] + self.b2.component(c)[idx]).scale(dt);
                }
                rhs[c][idx] = x.unscale(d);
            }
        }
        let [r0, r1] = rhs;
        let mut next = SpectralField::from_components(&g, r0, r1, true)?;
        next.pin();
        self.steps += 1;
        let t = T::lit(self.steps as f64) * dt;
        check_finite(&next, self.steps, t)?;
        *tilde = next;
        Ok(())
    }
}

/// Options shared by the trajectory-level solvers.
#[derive(Clone, Copy, Debug)]
pub struct SensitivityOptions {
    pub timing: SourceTiming,
    pub nonlinear: bool,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        Self {
            timing: SourceTiming::Explicit,
            nonlinear: true,
        }
    }
}

fn stepper_for<T: Real>(grid: &Grid2D<T>, nu: T, dt: T, opts: SensitivityOptions) -> SensitivityStepper<T> {
    let s = SensitivityStepper::new(grid, nu, dt, opts.timing);
    if opts.nonlinear {
        s
    } else {
        s.without_nonlinearity()
    }
}

/// `ũ` along a stored trajectory of `u`, starting from zero.
pub fn solve_sensitivity<T: Real>(traj: &Trajectory<T>, nu: T, opts: SensitivityOptions) -> Result<Trajectory<T>> {
    let Some(first) = traj.fields.first() else {
        return Err(Error::TooFew { needed: 1, got: 0 });
    };
    let mut st = stepper_for(first.grid(), nu, traj.dt, opts);
    let mut tilde = SpectralField::zeros(first.grid());
    tilde.leray_project_in_place();
    let mut out = Vec::with_capacity(traj.len());
    out.push(tilde.clone());
    for w in traj.fields.windows(2) {
        st.step(&mut tilde, &w[0], &w[1], None)?;
        out.push(tilde.clone());
    }
    Trajectory::new(traj.t0, traj.dt, out)
}

/// `ṽ` along a stored trajectory of `v`, nudged toward the observed modes of `ũ`.
pub fn solve_sensitivity_assimilated<T: Real>(
    traj_v: &Trajectory<T>,
    tilde_u: &Trajectory<T>,
    nu: T,
    mu: T,
    cutoff: Cutoff<T>,
    opts: SensitivityOptions,
) -> Result<Trajectory<T>> {
    traj_v.aligned_with(tilde_u)?;
    let Some(first) = traj_v.fields.first() else {
        return Err(Error::TooFew { needed: 1, got: 0 });
    };
    let mut st = stepper_for(first.grid(), nu, traj_v.dt, opts).with_nudging(mu, cutoff)?;
    let mut tilde = SpectralField::zeros(first.grid());
    tilde.leray_project_in_place();
    let mut out = Vec::with_capacity(traj_v.len());
    out.push(tilde.clone());
    for (i, w) in traj_v.fields.windows(2).enumerate() {
        st.step(&mut tilde, &w[0], &w[1], Some(&tilde_u.fields[i]))?;
        out.push(tilde.clone());
    }
    Trajectory::new(traj_v.t0, traj_v.dt, out)
}

fn quotient<T: Real>(a: &SpectralField<T>, b: &SpectralField<T>, dnu: T) -> SpectralField<T> {
    let mut d = a.sub(b).scaled(dnu.recip());
    d.leray_project_in_place();
    d
}

/// `(u1 - u2) / (nu1 - nu2)` at every sample.
pub fn difference_quotient<T: Real>(run1: &Trajectory<T>, nu1: T, run2: &Trajectory<T>, nu2: T) -> Result<Trajectory<T>> {
    if nu1 == nu2 {
        return Err(Error::EqualViscosities);
    }
    run1.aligned_with(run2)?;
    let dnu = nu1 - nu2;
    let fields = run1.fields.iter().zip(&run2.fields).map(|(a, b)| quotient(a, b, dnu)).collect();
    Trajectory::new(run1.t0, run1.dt, fields)
}

/// `(int_t |a - b|^2, int_t |grad(a - b)|^2)` by the trapezoid rule.
pub fn l2_in_time<T: Real>(a: &Trajectory<T>, b: &Trajectory<T>) -> Result<(T, T)> {
    a.aligned_with(b)?;
    let mut acc = TimeNorms::default();
    for (x, y) in a.fields.iter().zip(&b.fields) {
        acc.push(a.dt, &x.sub(y));
    }
    Ok(acc.finish())
}

#[derive(Clone, Copy, Debug, Default)]
struct TimeNorms<T> {
    h: T,
    v: T,
    last: Option<(T, T)>,
}

impl<T: Real> TimeNorms<T> {
    fn push(&mut self, dt: T, e: &SpectralField<T>) {
        let n = e.norms();
        let cur = (n.l2 * n.l2, n.h1 * n.h1);
        if let Some((ph, pv)) = self.last {
            let half = T::lit(0.5) * dt;
            self.h += half * (ph + cur.0);
            self.v += half * (pv + cur.1);
        }
        self.last = Some(cur);
    }

    fn finish(&self) -> (T, T) {
        (self.h.sqrt(), self.v.sqrt())
    }
}

/// Parameters of a difference-quotient convergence study.
#[derive(Clone, Debug)]
pub struct SensitivityConfig<T: Real> {
    pub nu1: T,
    /// Quotient viscosities, approaching `nu1` monotonically.
    pub nu2_sequence: Vec<T>,
    pub dt: T,
    pub t_end: T,
    /// `(mu, cutoff)` enables the nudged pair.
    pub assimilation: Option<(T, Cutoff<T>)>,
    pub options: SensitivityOptions,
}

impl<T: Real> SensitivityConfig<T> {
    pub fn validate(&self, grid: &Grid2D<T>, t_start: T) -> Result<u64> {
        if self.nu2_sequence.len() < 3 {
            return Err(Error::TooFew {
                needed: 3,
                got: self.nu2_sequence.len(),
            });
        }
        if !(self.nu1 > T::zero()) || self.nu2_sequence.iter().any(|v| !(*v > T::zero())) {
            return Err(Error::InvalidParameter("viscosities must be positive".into()));
        }
        if self.nu2_sequence.iter().any(|v| *v == self.nu1) {
            return Err(Error::EqualViscosities);
        }
        let gaps: Vec<T> = self.nu2_sequence.iter().map(|v| (*v - self.nu1).abs()).collect();
        if gaps.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidParameter("quotient viscosities must approach nu1 monotonically".into()));
        }
        if let Some((mu, cutoff)) = &self.assimilation {
            if !(*mu > T::zero()) {
                return Err(Error::InvalidParameter(format!("mu = {mu} must be positive")));
            }
            cutoff.check_grid(grid)?;
        }
        steps_in(self.t_end - t_start, self.dt)
            .filter(|&k| k > 0)
            .ok_or_else(|| Error::InvalidParameter(format!("[{t_start}, {}] is not a positive multiple of dt = {}", self.t_end, self.dt)))
    }
}

/// Errors of one quotient against the sensitivity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudyRow<T> {
    pub nu2: T,
    pub delta_nu: T,
    /// `|D - ũ|` in `L^2(t0, T; H)`.
    pub e_l2h: T,
    /// `|D - ũ|` in `L^2(t0, T; V)`.
    pub e_l2v: T,
    /// Order from this row and the previous one.
    pub order: Option<T>,
}

#[derive(Clone, Debug)]
pub struct StudySeries<T> {
    pub rows: Vec<StudyRow<T>>,
    /// Least-squares slope of `log e` against `log |delta_nu|`, per norm.
    pub order_h: T,
    pub order_v: T,
    pub monotone: bool,
}

impl<T: Real> StudySeries<T> {
    fn build(members: &[(T, T, T, T)], nu1: T) -> Self {
        let mut rows: Vec<StudyRow<T>> = Vec::with_capacity(members.len());
        for &(nu2, _, eh, ev) in members {
            let delta_nu = nu2 - nu1;
            let order = rows.last().map(|p: &StudyRow<T>| (eh / p.e_l2h).ln() / (delta_nu.abs() / p.delta_nu.abs()).ln());
            rows.push(StudyRow {
                nu2,
                delta_nu,
                e_l2h: eh,
                e_l2v: ev,
                order,
            });
        }
        let x: Vec<T> = rows.iter().map(|r| r.delta_nu.abs().ln()).collect();
        let order_h = fit_slope(&x, &rows.iter().map(|r| r.e_l2h.ln()).collect::<Vec<_>>());
        let order_v = fit_slope(&x, &rows.iter().map(|r| r.e_l2v.ln()).collect::<Vec<_>>());
        let monotone = rows.windows(2).all(|w| w[1].e_l2h < w[0].e_l2h && w[1].e_l2v < w[0].e_l2v);
        Self {
            rows,
            order_h,
            order_v,
            monotone,
        }
    }
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope<T: Real>(x: &[T], y: &[T]) -> T {
    let n = T::lit(x.len() as f64);
    let mx = x.iter().fold(T::zero(), |a, b| a + *b) / n;
    let my = y.iter().fold(T::zero(), |a, b| a + *b) / n;
    let (mut sxy, mut sxx) = (T::zero(), T::zero());
    for (a, b) in x.iter().zip(y) {
        sxy += (*a - mx) * (*b - my);
        sxx += (*a - mx) * (*a - mx);
    }
    sxy / sxx
}

#[derive(Clone, Debug)]
pub struct SensitivityReport<T> {
    pub plain: StudySeries<T>,
    pub nudged: Option<StudySeries<T>>,
}

/// Runs every quotient member in parallel, streaming the primal runs, the
/// sensitivities and the error norms together so no trajectory is stored.
///
/// All primal runs start from `u0`; nudged runs start from zero at `u0.t`.
pub fn convergence_study<T: Real>(
    cfg: &SensitivityConfig<T>,
    forcing: &SpectralField<T>,
    u0: &FlowState<T>,
) -> Result<SensitivityReport<T>> {
    let grid = u0.u.grid().clone();
    forcing.same_grid(&u0.u)?;
    let steps = cfg.validate(&grid, u0.t)?;
    let members: Vec<Result<Member<T>>> = cfg
        .nu2_sequence
        .par_iter()
        .map(|&nu2| run_member(cfg, forcing, u0, nu2, steps))
        .collect();
    let members = members.into_iter().collect::<Result<Vec<_>>>()?;

    let plain = StudySeries::build(&members.iter().map(|m| (m.nu2, T::zero(), m.plain.0, m.plain.1)).collect::<Vec<_>>(), cfg.nu1);
    if !plain.monotone {
        log::warn!("difference-quotient errors are not monotone along the sequence");
    }
    let nudged = cfg.assimilation.map(|_| {
        let s = StudySeries::build(
            &members
                .iter()
                .map(|m| {
                    let (h, v) = m.nudged.unwrap();
                    (m.nu2, T::zero(), h, v)
                })
                .collect::<Vec<_>>(),
            cfg.nu1,
        );
        if !s.monotone {
            log::warn!("nudged difference-quotient errors are not monotone along the sequence");
        }
        s
    });
    Ok(SensitivityReport { plain, nudged })
}

struct Member<T> {
    nu2: T,
    plain: (T, T),
    nudged: Option<(T, T)>,
}

fn run_member<T: Real>(cfg: &SensitivityConfig<T>, f: &SpectralField<T>, u0: &FlowState<T>, nu2: T, steps: u64) -> Result<Member<T>> {
    let grid = u0.u.grid().clone();
    let (dt, nu1) = (cfg.dt, cfg.nu1);
    let primal = |nu: T| {
        let s = Stepper::new(&grid, nu, dt, Scheme::ImexEuler);
        if cfg.options.nonlinear {
            s
        } else {
            s.without_nonlinearity()
        }
    };
    let (mut p1, mut p2) = (primal(nu1), primal(nu2));
    let (mut u1, mut u2) = (u0.clone(), u0.clone());
    let mut sens = stepper_for(&grid, nu1, dt, cfg.options);
    let mut tilde = SpectralField::zeros(&grid);
    let dnu = nu1 - nu2;
    let mut err = TimeNorms::default();
    err.push(dt, &SpectralField::zeros(&grid));

    struct Nudged<T: Real> {
        mu: T,
        layout: Arc<ObservationLayout<T>>,
        q1: Stepper<T>,
        q2: Stepper<T>,
        v1: FlowState<T>,
        v2: FlowState<T>,
        sens: SensitivityStepper<T>,
        tilde: SpectralField<T>,
        err: TimeNorms<T>,
    }
    let mut nudged = match cfg.assimilation {
        Some((mu, cutoff)) => {
            let mut err = TimeNorms::default();
            err.push(dt, &SpectralField::zeros(&grid));
            Some(Nudged {
                mu,
                layout: ObservationLayout::new(&grid, cutoff)?,
                q1: primal(nu1),
                q2: primal(nu2),
                v1: FlowState::zero(&grid, u0.t),
                v2: FlowState::zero(&grid, u0.t),
                sens: stepper_for(&grid, nu1, dt, cfg.options).with_nudging(mu, cutoff)?,
                tilde: SpectralField::zeros(&grid),
                err,
            })
        }
        None => None,
    };

    for _ in 0..steps {
        let u1_now = u1.u.clone();
        if let Some(n) = nudged.as_mut() {
            let o1 = LowModes::from_field(&n.layout, &u1.u)?;
            let o2 = LowModes::from_field(&n.layout, &u2.u)?;
            let v1_now = n.v1.u.clone();
            n.q1.advance(&mut n.v1, f, Some(Nudge { mu: n.mu, target: &o1 }))?;
            n.q2.advance(&mut n.v2, f, Some(Nudge { mu: n.mu, target: &o2 }))?;
            n.sens.step(&mut n.tilde, &v1_now, &n.v1.u, Some(&tilde))?;
            let d = quotient(&n.v1.u, &n.v2.u, dnu);
            n.err.push(dt, &d.sub(&n.tilde));
        }
        p1.step(&mut u1, f)?;
        p2.step(&mut u2, f)?;
        sens.step(&mut tilde, &u1_now, &u1.u, None)?;
        let d = quotient(&u1.u, &u2.u, dnu);
        err.push(dt, &d.sub(&tilde));
    }
    Ok(Member {
        nu2,
        plain: err.finish(),
        nudged: nudged.map(|n| n.err.finish()),
    })
}
