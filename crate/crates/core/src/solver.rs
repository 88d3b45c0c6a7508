//! IMEX time integration of the projected Navier-Stokes equations.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::field::{Cutoff, SpectralField};
use crate::forcing::ForcingSpec;
use crate::grid::Grid2D;
use crate::nonlinear::Workspace;
use crate::observation::{LowModes, ObservationLayout, ObservationStream};
use crate::scalar::Real;
use crate::spectrum::SpectrumAccumulator;

/// Time discretization of the viscous/advective split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Scheme {
    /// Backward Euler on `nu A u`, forward Euler on everything else.
    #[default]
    ImexEuler,
    /// Crank-Nicolson on `nu A u`, Adams-Bashforth 2 on the explicit terms.
    CnAb2,
}

#[derive(Clone, Debug)]
pub struct FlowState<T: Real> {
    pub t: T,
    pub u: SpectralField<T>,
}

impl<T: Real> FlowState<T> {
    pub fn zero(grid: &Grid2D<T>, t: T) -> Self {
        Self {
            t,
            u: SpectralField::zeros(grid),
        }
    }
}

/// Converts an interval to a whole number of steps of `dt`.
pub fn steps_in<T: Real>(interval: T, dt: T) -> Option<u64> {
    let r = interval / dt;
    let k = r.round();
    if k < T::zero() || (r - k).abs() > T::lit(1e-6) * k.max(T::one()) {
        None
    } else {
        k.to_u64()
    }
}

#[derive(Clone, Debug)]
pub struct SolverConfig<T: Real> {
    pub nu: T,
    pub dt: T,
    pub t_end: T,
    pub grid: Grid2D<T>,
    pub forcing: ForcingSpec,
    pub snapshot_interval: T,
    pub observation_cutoff: Cutoff<T>,
    pub observation_interval: T,
    pub scheme: Scheme,
}

impl<T: Real> SolverConfig<T> {
    /// Defaults on an `n x n` grid; `dt` follows the CFL heuristic.
    pub fn new(n: usize, nu: T, t_end: T) -> Result<Self> {
        let grid = Grid2D::new(n)?;
        let dt = T::lit(if n >= 512 { 0.002 } else { 0.005 * 128.0 / n.max(128) as f64 });
        Ok(Self {
            nu,
            dt,
            t_end,
            grid,
            forcing: ForcingSpec::default(),
            snapshot_interval: T::one(),
            observation_cutoff: Cutoff::from_h(T::lit(1.0 / 32.0))?,
            observation_interval: dt,
            scheme: Scheme::ImexEuler,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > T::zero()) {
            return Err(Error::InvalidParameter(format!("nu = {} must be positive", self.nu)));
        }
        if !(self.dt > T::zero()) {
            return Err(Error::InvalidParameter(format!("dt = {} must be positive", self.dt)));
        }
        if self.t_end < T::zero() {
            return Err(Error::InvalidParameter("t_end must be non-negative".into()));
        }
        for (name, v) in [
            ("snapshot_interval", self.snapshot_interval),
            ("observation_interval", self.observation_interval),
        ] {
            match steps_in(v, self.dt) {
                Some(k) if k > 0 => {}
                _ => {
                    return Err(Error::InvalidParameter(format!(
                        "{name} = {v} is not a positive multiple of dt = {}",
                        self.dt
                    )))
                }
            }
        }
        if steps_in(self.t_end, self.dt).is_none() {
            return Err(Error::InvalidParameter(format!(
                "t_end = {} is not a multiple of dt = {}",
                self.t_end, self.dt
            )));
        }
        self.observation_cutoff.check_grid(&self.grid)?;
        self.forcing.validate(&self.grid)
    }
}

/// Explicit feedback `mu (I_h u - I_h v)` applied on the observed modes.
pub(crate) struct Nudge<'a, T: Real> {
    pub mu: T,
    pub target: &'a LowModes<T>,
}

/// Reusable stepping machinery: FFT workspace plus the AB2 history.
pub struct Stepper<T: Real> {
    nu: T,
    dt: T,
    scheme: Scheme,
    ws: Workspace<T>,
    explicit: SpectralField<T>,
    previous: Option<SpectralField<T>>,
    nonlinear: bool,
    steps: u64,
}

impl<T: Real> Stepper<T> {
    pub fn new(grid: &Grid2D<T>, nu: T, dt: T, scheme: Scheme) -> Self {
        Self {
            nu,
            dt,
            scheme,
            ws: Workspace::new(grid),
            explicit: SpectralField::zeros(grid),
            previous: None,
            nonlinear: true,
            steps: 0,
        }
    }

    /// Drops the advection term, leaving the forced Stokes problem.
    pub fn without_nonlinearity(mut self) -> Self {
        self.nonlinear = false;
        self
    }

    pub fn nu(&self) -> T {
        self.nu
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    /// Changes the viscosity used by subsequent steps.
    pub fn set_nu(&mut self, nu: T) {
        self.nu = nu;
    }

    pub fn workspace(&mut self) -> &mut Workspace<T> {
        &mut self.ws
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, state: &mut FlowState<T>, f: &SpectralField<T>) -> Result<()> {
        self.advance(state, f, None)
    }

    pub(crate) fn advance(&mut self, state: &mut FlowState<T>, f: &SpectralField<T>, nudge: Option<Nudge<'_, T>>) -> Result<()> {
        let g = state.u.grid().clone();
        let dt = self.dt;
        // explicit = f - B(u, u) + nudge
        if self.nonlinear {
            self.ws.bilinear_into(&state.u, &state.u, &mut self.explicit);
        } else {
            self.explicit.components_mut().iter_mut().for_each(|c| c.fill(czero()));
        }
        {
            let fc = [f.component(0), f.component(1)];
            let e = self.explicit.components_mut();
            for c in 0..2 {
                for (x, fv) in e[c].iter_mut().zip(fc[c]) {
                    *x = *fv - *x;
                }
            }
            if let Some(n) = &nudge {
                for (&i, o) in n.target.layout().indices().iter().zip(n.target.coeffs()) {
                    let v = state.u.at(i);
                    for c in 0..2 {
                        e[c][i] += (o[c] - v[c]).scale(n.mu);
                    }
                }
            }
        }

        let use_ab2 = self.scheme == Scheme::CnAb2 && self.previous.is_some();
        let comps = state.u.components_mut();
        let e = [self.explicit.component(0), self.explicit.component(1)];
        let half = T::lit(0.5);
        for idx in 0..g.len() {
            let k2 = g.ksq(idx);
            if use_ab2 {
                let prev = self.previous.as_ref().unwrap();
                let a = dt * self.nu * k2 * half;
                for c in 0..2 {
                    let ex = e[c][idx].scale(T::lit(1.5)) - prev.component(c)[idx].scale(half);
                    comps[c][idx] = (comps[c][idx].scale(T::one() - a) + ex.scale(dt)).unscale(T::one() + a);
                }
            } else {
                let d = T::one() + dt * self.nu * k2;
                for c in 0..2 {
                    comps[c][idx] = (comps[c][idx] + e[c][idx].scale(dt)).unscale(d);
                }
            }
        }
        state.u.pin();
        if self.scheme == Scheme::CnAb2 {
            match &mut self.previous {
                Some(p) => std::mem::swap(p, &mut self.explicit),
                None => self.previous = Some(self.explicit.clone()),
            }
        }
        self.steps += 1;
        state.t += dt;
        check_finite(&state.u, self.steps, state.t)
    }

    /// Largest physical velocity magnitude, via one inverse transform.
    pub fn max_speed(&mut self, u: &SpectralField<T>) -> T {
        self.ws.max_speed(u)
    }
}

pub(crate) fn check_finite<T: Real>(u: &SpectralField<T>, step: u64, t: T) -> Result<()> {
    let m = u.max_abs();
    if !m.is_finite() || m > T::blowup_threshold() {
        return Err(Error::BlowUp { step, t: t.as_f64() });
    }
    Ok(())
}

/// One first-order IMEX Euler step with a freshly planned workspace.
pub fn imex_step<T: Real>(state: &FlowState<T>, cfg: &SolverConfig<T>, f: &SpectralField<T>) -> Result<FlowState<T>> {
    state.u.same_grid(f)?;
    let mut s = Stepper::new(state.u.grid(), cfg.nu, cfg.dt, Scheme::ImexEuler);
    let mut next = state.clone();
    s.step(&mut next, f)?;
    Ok(next)
}

/// Advective CFL number `max|u| dt n / L`.
pub fn cfl_number<T: Real>(max_speed: T, dt: T, grid: &Grid2D<T>) -> T {
    max_speed * dt * T::lit(grid.n() as f64) / grid.domain_length()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyRow<T> {
    pub t: T,
    /// `|u|^2 / 2`
    pub energy: T,
    /// `||u||^2 / 2`
    pub enstrophy: T,
    pub l2norm: T,
    pub h1norm: T,
}

impl<T: Real> EnergyRow<T> {
    pub fn of(t: T, u: &SpectralField<T>) -> Self {
        let n = u.norms();
        let half = T::lit(0.5);
        Self {
            t,
            energy: half * n.l2 * n.l2,
            enstrophy: half * n.h1 * n.h1,
            l2norm: n.l2,
            h1norm: n.h1,
        }
    }
}

/// Receives the products of a reference run as they are produced.
pub trait ReferenceSink<T: Real> {
    fn snapshot(&mut self, state: &FlowState<T>) -> Result<()>;
    fn observation(&mut self, t: T, obs: LowModes<T>) -> Result<()>;
    fn energy(&mut self, row: EnergyRow<T>) -> Result<()>;
}

/// Keeps a reference run in memory; snapshots before `keep_from` are dropped.
#[derive(Debug)]
pub struct InMemoryReference<T: Real> {
    pub snapshots: Vec<FlowState<T>>,
    pub observations: ObservationStream<T>,
    pub energy: Vec<EnergyRow<T>>,
    pub spectrum: Option<SpectrumAccumulator<T>>,
    keep_from: T,
    spectrum_from: Option<T>,
}

impl<T: Real> InMemoryReference<T> {
    pub fn new(cfg: &SolverConfig<T>, keep_from: T) -> Result<Self> {
        let layout = ObservationLayout::new(&cfg.grid, cfg.observation_cutoff)?;
        Ok(Self {
            snapshots: Vec::new(),
            observations: ObservationStream::new(layout, "reference"),
            energy: Vec::new(),
            spectrum: None,
            keep_from,
            spectrum_from: None,
        })
    }

    /// Also accumulates the energy spectrum over snapshots at `t >= from`.
    pub fn with_spectrum(mut self, from: T) -> Self {
        self.spectrum_from = Some(from);
        self.spectrum = Some(SpectrumAccumulator::new());
        self
    }

    /// Snapshot at time `t`, if one was kept.
    pub fn snapshot_at(&self, t: T, tol: T) -> Option<&FlowState<T>> {
        let pos = self.snapshots.partition_point(|s| s.t < t - tol);
        self.snapshots.get(pos).filter(|s| (s.t - t).abs() <= tol)
    }
}

impl<T: Real> ReferenceSink<T> for InMemoryReference<T> {
    fn snapshot(&mut self, state: &FlowState<T>) -> Result<()> {
        let tol = T::lit(1e-9);
        if let (Some(from), Some(acc)) = (self.spectrum_from, self.spectrum.as_mut()) {
            if state.t >= from - tol {
                acc.push(state.t, &state.u)?;
            }
        }
        if state.t >= self.keep_from - tol {
            self.snapshots.push(state.clone());
        }
        Ok(())
    }

    fn observation(&mut self, t: T, obs: LowModes<T>) -> Result<()> {
        if t >= self.keep_from - T::lit(1e-9) {
            self.observations.push(t, obs)?;
        }
        Ok(())
    }

    fn energy(&mut self, row: EnergyRow<T>) -> Result<()> {
        self.energy.push(row);
        Ok(())
    }
}

/// Integrates from `u(0) = 0` to `t_end`, streaming snapshots, observations
/// and the energy series into `sink`. Returns the final state.
pub fn run_reference<T: Real>(
    cfg: &SolverConfig<T>,
    forcing: &SpectralField<T>,
    sink: &mut dyn ReferenceSink<T>,
) -> Result<FlowState<T>> {
    let start = FlowState::zero(&cfg.grid, T::zero());
    run_reference_from(cfg, forcing, start, sink)
}

/// As [`run_reference`] but from an arbitrary initial state, ending at `t_end`.
pub fn run_reference_from<T: Real>(
    cfg: &SolverConfig<T>,
    forcing: &SpectralField<T>,
    start: FlowState<T>,
    sink: &mut dyn ReferenceSink<T>,
) -> Result<FlowState<T>> {
    cfg.validate()?;
    forcing.same_grid(&start.u)?;
    let layout = ObservationLayout::new(&cfg.grid, cfg.observation_cutoff)?;
    let snap_every = steps_in(cfg.snapshot_interval, cfg.dt).unwrap();
    let obs_every = steps_in(cfg.observation_interval, cfg.dt).unwrap();
    let total = steps_in(cfg.t_end - start.t, cfg.dt).ok_or_else(|| {
        Error::InvalidParameter("run length is not a multiple of dt".into())
    })?;
    let t0 = start.t;
    let mut stepper = Stepper::new(&cfg.grid, cfg.nu, cfg.dt, cfg.scheme);
    let mut state = start;
    let mut warned = false;

    let emit = |k: u64, state: &FlowState<T>, sink: &mut dyn ReferenceSink<T>, stepper: &mut Stepper<T>, warned: &mut bool| -> Result<()> {
        if k % obs_every == 0 {
            sink.observation(state.t, LowModes::from_field(&layout, &state.u)?)?;
        }
        if k % snap_every == 0 {
            sink.snapshot(state)?;
            sink.energy(EnergyRow::of(state.t, &state.u))?;
            if !*warned {
                let cfl = cfl_number(stepper.max_speed(&state.u), cfg.dt, &cfg.grid);
                if cfl > T::lit(0.5) {
                    log::warn!("advective CFL number {cfl} exceeds 0.5 at t = {}", state.t);
                    *warned = true;
                }
            }
        }
        Ok(())
    };

    emit(0, &state, sink, &mut stepper, &mut warned)?;
    for k in 1..=total {
        stepper.step(&mut state, forcing)?;
        // recompute time from the step count to avoid drift
        state.t = t0 + T::lit(k as f64) * cfg.dt;
        emit(k, &state, sink, &mut stepper, &mut warned)?;
    }
    Ok(state)
}

/// Zero complex pair, handy for building single-mode fields.
pub(crate) fn czero<T: Real>() -> Complex<T> {
    Complex::new(T::zero(), T::zero())
}
