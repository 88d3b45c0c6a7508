//! Viscosity recovery from observation-side quantities.
//!
//! With `w = u - v` and the energy balance of the observed modes,
//!
//! ```text
//! 1/2 d/dt |I_h w|^2 + (nu2 - nu1) (I_h A v, I_h w) + mu |I_h w|^2 = (terms quadratic in w)
//! ```
//!
//! Dropping the right-hand side and solving for `nu1` gives the instantaneous
//! estimator; integrating over a window first gives the windowed one.

use std::collections::VecDeque;

use crate::assimilation::{AssimilationConfig, Assimilator, Interpolant};
use crate::error::{Error, Result};
use crate::field::{Cutoff, SpectralField};
use crate::observation::ObservationStream;
use crate::scalar::Real;
use crate::solver::{steps_in, FlowState, Scheme};

/// Relative size below which a denominator is treated as degenerate: the
/// correction is capped at `1e3 * nu2`.
const DENOMINATOR_GUARD: f64 = 1e-3;

/// `nu2 - mu |I_h w|^2 / (I_h A v, I_h w)`.
pub fn estimate_instant<T: Real>(nu2: T, mu: T, ih_w_sq: T, denom: T) -> Result<T> {
    if ih_w_sq == T::zero() {
        return Ok(nu2);
    }
    let num = mu * ih_w_sq;
    if !(denom.abs() >= T::lit(DENOMINATOR_GUARD) * num / nu2) {
        return Err(Error::DegenerateDenominator { denom: denom.as_f64() });
    }
    Ok(nu2 - num / denom)
}

/// Trapezoid accumulators of `|I_h w|^2` and `(I_h A v, I_h w)` over `[s, t]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Window<T> {
    pub s: T,
    pub t: T,
    pub int_ih_sq: T,
    pub int_denom: T,
    pub ih_sq_start: T,
    pub ih_sq_end: T,
    last_denom: T,
    samples: usize,
}

impl<T: Real> Window<T> {
    pub fn new() -> Self {
        Self {
            s: T::zero(),
            t: T::zero(),
            int_ih_sq: T::zero(),
            int_denom: T::zero(),
            ih_sq_start: T::zero(),
            ih_sq_end: T::zero(),
            last_denom: T::zero(),
            samples: 0,
        }
    }

    /// Appends a sample; times must increase.
    pub fn push(&mut self, t: T, ip: Interpolant<T>) {
        if self.samples == 0 {
            self.s = t;
            self.ih_sq_start = ip.ih_err_sq;
        } else {
            let h = (t - self.t) * T::lit(0.5);
            self.int_ih_sq += h * (self.ih_sq_end + ip.ih_err_sq);
            self.int_denom += h * (self.last_denom + ip.denom);
        }
        self.t = t;
        self.ih_sq_end = ip.ih_err_sq;
        self.last_denom = ip.denom;
        self.samples += 1;
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn span(&self) -> T {
        self.t - self.s
    }
}

/// `nu2 - (mu int|I_h w|^2 + |I_h w(t)|^2/2 - |I_h w(s)|^2/2) / int (I_h A v, I_h w)`.
pub fn estimate_windowed<T: Real>(nu2: T, mu: T, w: &Window<T>) -> Result<T> {
    if w.samples < 2 || !(w.span() > T::zero()) {
        return Err(Error::EmptyWindow {
            s: w.s.as_f64(),
            t: w.t.as_f64(),
        });
    }
    let half = T::lit(0.5);
    let num = mu * w.int_ih_sq + half * w.ih_sq_end - half * w.ih_sq_start;
    if num == T::zero() {
        return Ok(nu2);
    }
    if !(w.int_denom.abs() >= T::lit(DENOMINATOR_GUARD) * num.abs() / nu2) {
        return Err(Error::DegenerateDenominator {
            denom: w.int_denom.as_f64(),
        });
    }
    Ok(nu2 - num / w.int_denom)
}

/// Settings shared by both recovery loops.
#[derive(Clone, Debug)]
pub struct RecoveryConfig<T: Real> {
    pub mu: T,
    pub cutoff: Cutoff<T>,
    pub dt: T,
    /// Start of the data window; `v(t_start) = 0`.
    pub t_start: T,
    /// Diagnostics are traced every this many steps.
    pub trace_every: u64,
    /// Consecutive rejected updates tolerated before giving up.
    pub max_rejections: usize,
    pub scheme: Scheme,
}

impl<T: Real> RecoveryConfig<T> {
    pub fn new(mu: T, cutoff: Cutoff<T>, dt: T, t_start: T) -> Self {
        Self {
            mu,
            cutoff,
            dt,
            t_start,
            trace_every: 20,
            max_rejections: 5,
            scheme: Scheme::ImexEuler,
        }
    }

    fn assimilation(&self, nu2: T, horizon: T) -> AssimilationConfig<T> {
        let mut c = AssimilationConfig::new(nu2, self.mu, self.cutoff, self.dt, self.t_start, horizon);
        c.scheme = self.scheme;
        c
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Algorithm1Params<T> {
    /// Stop once `|I_h w| <= epsilon`.
    pub epsilon: T,
    /// Stall threshold: the filtered error failed to shrink by `1 - delta`.
    pub delta: T,
    /// Number of steps in the moving-average filter of `|I_h w|`.
    pub filter_steps: usize,
    /// Time lag over which the stall comparison is made.
    pub stall_lag: T,
}

impl<T: Real> Default for Algorithm1Params<T> {
    fn default() -> Self {
        Self {
            epsilon: T::lit(1e-12),
            delta: T::lit(0.05),
            filter_steps: 10,
            stall_lag: T::lit(0.25),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Algorithm2Params<T> {
    pub epsilon: T,
    /// Relaxation time before the averaging window opens.
    pub wait: T,
    /// Length of the averaging window.
    pub window: T,
}

impl<T: Real> Default for Algorithm2Params<T> {
    fn default() -> Self {
        Self {
            epsilon: T::lit(1e-12),
            wait: T::one(),
            window: T::one(),
        }
    }
}

/// Why a recovery loop stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    /// `|I_h w|` fell below epsilon.
    Converged,
    /// The observation stream ran out.
    DataExhausted,
    /// Algorithm 1 stalled above the error at the last update.
    Stalled,
    /// Too many consecutive estimates were rejected.
    Degenerate,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Update<T> {
    pub t: T,
    /// Viscosity before the update.
    pub nu_before: T,
    /// Proposed estimate; `None` when the denominator was degenerate.
    pub estimate: Option<T>,
    pub accepted: bool,
    pub ih_err_sq: T,
    pub denom: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint<T> {
    pub t: T,
    pub nu2: T,
    pub ih_err: T,
}

#[derive(Clone, Debug)]
pub struct RecoveryState<T: Real> {
    pub nu2: T,
    /// Accepted updates so far.
    pub iteration: usize,
    pub updates: Vec<Update<T>>,
    pub trace: Vec<TracePoint<T>>,
    /// Accumulators of the most recent window (Algorithm 2).
    pub window: Window<T>,
    pub termination: Termination,
    pub t_final: T,
}

impl<T: Real> RecoveryState<T> {
    fn new(nu2: T, t: T) -> Self {
        Self {
            nu2,
            iteration: 0,
            updates: Vec::new(),
            trace: Vec::new(),
            window: Window::new(),
            termination: Termination::DataExhausted,
            t_final: t,
        }
    }

    /// `(t, nu2)` after each accepted update, starting from the initial guess.
    pub fn history(&self) -> Vec<(T, T)> {
        let mut h = Vec::with_capacity(self.iteration + 1);
        if let Some(first) = self.updates.first() {
            h.push((first.t, first.nu_before));
        }
        for u in self.updates.iter().filter(|u| u.accepted) {
            h.push((u.t, u.estimate.unwrap()));
        }
        h
    }

    fn propose(&mut self, t: T, estimate: Result<T>, ip: Interpolant<T>) -> Result<bool> {
        let (value, accepted) = match estimate {
            Ok(e) if e > T::zero() && e.is_finite() => (Some(e), true),
            Ok(e) => (Some(e), false),
            Err(Error::DegenerateDenominator { .. }) => (None, false),
            Err(e) => return Err(e),
        };
        self.updates.push(Update {
            t,
            nu_before: self.nu2,
            estimate: value,
            accepted,
            ih_err_sq: ip.ih_err_sq,
            denom: ip.denom,
        });
        if accepted {
            self.nu2 = value.unwrap();
            self.iteration += 1;
        }
        Ok(accepted)
    }

    fn trailing_rejections(&self) -> usize {
        self.updates.iter().rev().take_while(|u| !u.accepted).count()
    }
}

struct Run<'a, T: Real> {
    obs: &'a ObservationStream<T>,
    forcing: &'a SpectralField<T>,
    model: Assimilator<T>,
    v: FlowState<T>,
    steps: u64,
    cfg: &'a RecoveryConfig<T>,
}

impl<'a, T: Real> Run<'a, T> {
    fn new(obs: &'a ObservationStream<T>, forcing: &'a SpectralField<T>, nu2: T, cfg: &'a RecoveryConfig<T>) -> Result<Self> {
        let horizon = obs.horizon().ok_or(Error::TooFew { needed: 1, got: 0 })?;
        let acfg = cfg.assimilation(nu2, horizon);
        acfg.check_stream(obs)?;
        if !(nu2 > T::zero()) {
            return Err(Error::InvalidParameter(format!("initial nu2 = {nu2} must be positive")));
        }
        forcing.same_grid(&SpectralField::zeros(obs.layout().grid()))?;
        Ok(Self {
            obs,
            forcing,
            model: Assimilator::new(&acfg, obs.layout().clone())?,
            v: FlowState::zero(obs.layout().grid(), cfg.t_start),
            steps: 0,
            cfg,
        })
    }

    fn t(&self) -> T {
        self.v.t
    }

    fn has_step(&self) -> bool {
        let next = self.cfg.t_start + T::lit((self.steps + 1) as f64) * self.cfg.dt;
        self.obs.horizon().is_some_and(|h| next <= h + self.cfg.dt * T::lit(1e-6))
    }

    fn interpolant(&self) -> Result<Interpolant<T>> {
        let rec = self.obs.hold(self.v.t, self.cfg.dt)?;
        Ok(Interpolant::of(&rec.modes, &self.v.u))
    }

    fn step(&mut self) -> Result<Interpolant<T>> {
        let rec = self.obs.hold(self.v.t, self.cfg.dt)?;
        self.model.step(&mut self.v, &rec.modes, self.forcing)?;
        self.steps += 1;
        self.v.t = self.cfg.t_start + T::lit(self.steps as f64) * self.cfg.dt;
        self.interpolant()
    }

    fn trace(&self, state: &mut RecoveryState<T>, ip: &Interpolant<T>) {
        if self.steps % self.cfg.trace_every.max(1) == 0 {
            state.trace.push(TracePoint {
                t: self.v.t,
                nu2: state.nu2,
                ih_err: ip.ih_err(),
            });
        }
    }
}

/// Stall-triggered recovery using the instantaneous estimator.
///
/// `v` is integrated step by step with the current `nu2`. When the filtered
/// interpolant error stops shrinking by a factor `1 - delta` over
/// `stall_lag`, the estimate is applied if the error sits below its value at
/// the previous update, and the loop returns otherwise.
pub fn algorithm1<T: Real>(
    obs: &ObservationStream<T>,
    forcing: &SpectralField<T>,
    nu2_init: T,
    params: &Algorithm1Params<T>,
    cfg: &RecoveryConfig<T>,
) -> Result<RecoveryState<T>> {
    if !(params.delta > T::zero() && params.delta < T::one()) || !(params.epsilon > T::zero()) {
        return Err(Error::InvalidParameter("need 0 < delta < 1 and epsilon > 0".into()));
    }
    let lag = steps_in(params.stall_lag, cfg.dt)
        .filter(|&k| k > 0)
        .ok_or_else(|| Error::InvalidParameter("stall_lag must be a positive multiple of dt".into()))?
        as usize;
    let filter = params.filter_steps.max(1);

    let mut run = Run::new(obs, forcing, nu2_init, cfg)?;
    let mut state = RecoveryState::new(nu2_init, run.t());
    let mut ip = run.interpolant()?;
    let mut err_at_update = ip.ih_err();
    let mut raw: VecDeque<T> = VecDeque::with_capacity(filter);
    let mut filtered: VecDeque<T> = VecDeque::with_capacity(lag + 1);
    run.trace(&mut state, &ip);

    while ip.ih_err() > params.epsilon {
        if !run.has_step() {
            state.termination = Termination::DataExhausted;
            state.t_final = run.t();
            return Ok(state);
        }
        ip = run.step()?;
        run.trace(&mut state, &ip);

        if raw.len() == filter {
            raw.pop_front();
        }
        raw.push_back(ip.ih_err());
        if raw.len() < filter {
            continue;
        }
        let smooth = raw.iter().fold(T::zero(), |a, b| a + *b) / T::lit(filter as f64);
        filtered.push_back(smooth);
        if filtered.len() <= lag {
            continue;
        }
        let before = filtered.pop_front().unwrap();
        if smooth < (T::one() - params.delta) * before {
            continue;
        }
        if smooth < err_at_update {
            let est = estimate_instant(state.nu2, cfg.mu, ip.ih_err_sq, ip.denom);
            if state.propose(run.t(), est, ip)? {
                run.model.set_nu(state.nu2);
                err_at_update = smooth;
            } else if state.trailing_rejections() >= cfg.max_rejections {
                state.termination = Termination::Degenerate;
                state.t_final = run.t();
                return Ok(state);
            }
            raw.clear();
            filtered.clear();
        } else {
            state.termination = Termination::Stalled;
            state.t_final = run.t();
            return Ok(state);
        }
    }
    state.termination = Termination::Converged;
    state.t_final = run.t();
    Ok(state)
}

/// Window-averaged recovery: integrate over `[t0, t0 + I + J]`, estimate over
/// the last `J`, continue from the final state with the new viscosity.
pub fn algorithm2<T: Real>(
    obs: &ObservationStream<T>,
    forcing: &SpectralField<T>,
    nu2_init: T,
    params: &Algorithm2Params<T>,
    cfg: &RecoveryConfig<T>,
) -> Result<RecoveryState<T>> {
    if !(params.epsilon > T::zero()) {
        return Err(Error::InvalidParameter("epsilon must be positive".into()));
    }
    let wait = steps_in(params.wait, cfg.dt)
        .filter(|&k| k > 0)
        .ok_or_else(|| Error::InvalidParameter("I must be a positive multiple of dt".into()))?;
    let window = steps_in(params.window, cfg.dt)
        .filter(|&k| k > 0)
        .ok_or_else(|| Error::InvalidParameter("J must be a positive multiple of dt".into()))?;

    let mut run = Run::new(obs, forcing, nu2_init, cfg)?;
    let horizon = obs.horizon().unwrap();
    let first_end = cfg.t_start + params.wait + params.window;
    if first_end > horizon + cfg.dt * T::lit(1e-6) {
        return Err(Error::WindowBeyondHorizon {
            start: cfg.t_start.as_f64(),
            end: first_end.as_f64(),
            horizon: horizon.as_f64(),
        });
    }
    let mut state = RecoveryState::new(nu2_init, run.t());
    let mut ip = run.interpolant()?;
    run.trace(&mut state, &ip);

    'outer: while ip.ih_err() > params.epsilon {
        // relaxation phase
        for _ in 0..wait {
            if !run.has_step() {
                break 'outer;
            }
            ip = run.step()?;
            run.trace(&mut state, &ip);
        }
        let mut acc = Window::new();
        acc.push(run.t(), ip);
        let mut remaining = window;
        loop {
            for _ in 0..remaining {
                if !run.has_step() {
                    state.window = acc;
                    break 'outer;
                }
                ip = run.step()?;
                run.trace(&mut state, &ip);
                acc.push(run.t(), ip);
            }
            let est = estimate_windowed(state.nu2, cfg.mu, &acc);
            let summary = Interpolant {
                ih_err_sq: acc.int_ih_sq,
                denom: acc.int_denom,
            };
            state.window = acc;
            if state.propose(run.t(), est, summary)? {
                run.model.set_nu(state.nu2);
                break;
            }
            if state.trailing_rejections() >= cfg.max_rejections {
                state.termination = Termination::Degenerate;
                state.t_final = run.t();
                return Ok(state);
            }
            // rejected: extend the window by another J
            remaining = window;
        }
    }
    state.termination = if ip.ih_err() <= params.epsilon {
        Termination::Converged
    } else {
        Termination::DataExhausted
    };
    state.t_final = run.t();
    Ok(state)
}
