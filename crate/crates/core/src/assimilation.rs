//! AOT nudging toward low-mode observations with a possibly wrong viscosity.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::{Cutoff, SpectralField};
use crate::observation::{LowModes, ObservationLayout, ObservationStream};
use crate::scalar::Real;
use crate::solver::{steps_in, FlowState, InMemoryReference, Nudge, Scheme, Stepper};

#[derive(Clone, Debug)]
pub struct AssimilationConfig<T: Real> {
    /// Viscosity used by the assimilating model.
    pub nu2: T,
    /// Nudging gain, in 1/time.
    pub mu: T,
    pub cutoff: Cutoff<T>,
    pub dt: T,
    pub t_start: T,
    pub t_end: T,
    /// Spacing of recorded diagnostics; a multiple of `dt`.
    pub output_interval: T,
    /// Largest tolerated age of a held observation.
    pub max_obs_gap: T,
    pub scheme: Scheme,
}

impl<T: Real> AssimilationConfig<T> {
    pub fn new(nu2: T, mu: T, cutoff: Cutoff<T>, dt: T, t_start: T, t_end: T) -> Self {
        Self {
            nu2,
            mu,
            cutoff,
            dt,
            t_start,
            t_end,
            output_interval: dt,
            max_obs_gap: dt,
            scheme: Scheme::ImexEuler,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu2 > T::zero()) {
            return Err(Error::InvalidParameter(format!("nu2 = {} must be positive", self.nu2)));
        }
        if !(self.mu >= T::zero()) {
            return Err(Error::InvalidParameter(format!("mu = {} must be non-negative", self.mu)));
        }
        if !(self.dt > T::zero()) || !(self.t_end >= self.t_start) {
            return Err(Error::InvalidParameter("need dt > 0 and t_end >= t_start".into()));
        }
        if steps_in(self.t_end - self.t_start, self.dt).is_none() {
            return Err(Error::InvalidParameter("assimilation window is not a multiple of dt".into()));
        }
        if !matches!(steps_in(self.output_interval, self.dt), Some(k) if k > 0) {
            return Err(Error::InvalidParameter("output_interval is not a multiple of dt".into()));
        }
        if self.mu * self.dt > T::lit(0.5) {
            log::warn!("mu * dt = {} exceeds 0.5; explicit nudging may be unstable", self.mu * self.dt);
        }
        Ok(())
    }

    pub fn check_stream(&self, obs: &ObservationStream<T>) -> Result<()> {
        let sc = obs.cutoff().radius();
        let cc = self.cutoff.radius();
        if (sc - cc).abs() > T::lit(1e-12) * cc {
            return Err(Error::CutoffMismatch {
                stream: sc.as_f64(),
                config: cc.as_f64(),
            });
        }
        Ok(())
    }
}

/// Observation-side quantities at one instant, with `w = u - v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interpolant<T> {
    /// `|I_h w|^2`
    pub ih_err_sq: T,
    /// `(I_h(A v), I_h w)`
    pub denom: T,
}

impl<T: Real> Interpolant<T> {
    pub fn of(obs: &LowModes<T>, v: &SpectralField<T>) -> Self {
        let w = obs.innovation(v);
        Self {
            ih_err_sq: w.l2_norm_sq(),
            denom: w.stokes_pairing(v),
        }
    }

    pub fn ih_err(&self) -> T {
        self.ih_err_sq.sqrt()
    }
}

/// Steps the nudged model; owns its FFT workspace.
pub struct Assimilator<T: Real> {
    stepper: Stepper<T>,
    mu: T,
    layout: Arc<ObservationLayout<T>>,
}

impl<T: Real> Assimilator<T> {
    pub fn new(cfg: &AssimilationConfig<T>, layout: Arc<ObservationLayout<T>>) -> Result<Self> {
        let cc = cfg.cutoff.radius();
        if (layout.cutoff().radius() - cc).abs() > T::lit(1e-12) * cc {
            return Err(Error::CutoffMismatch {
                stream: layout.cutoff().radius().as_f64(),
                config: cc.as_f64(),
            });
        }
        Ok(Self {
            stepper: Stepper::new(layout.grid(), cfg.nu2, cfg.dt, cfg.scheme),
            mu: cfg.mu,
            layout,
        })
    }

    pub fn nu(&self) -> T {
        self.stepper.nu()
    }

    pub fn set_nu(&mut self, nu: T) {
        self.stepper.set_nu(nu);
    }

    pub fn layout(&self) -> &Arc<ObservationLayout<T>> {
        &self.layout
    }

    /// Advances `v` by one step, nudged toward `obs = I_h(u(t))`.
    pub fn step(&mut self, v: &mut FlowState<T>, obs: &LowModes<T>, f: &SpectralField<T>) -> Result<()> {
        if !Arc::ptr_eq(obs.layout(), &self.layout) && obs.layout().indices() != self.layout.indices() {
            return Err(Error::CutoffMismatch {
                stream: obs.layout().cutoff().radius().as_f64(),
                config: self.layout.cutoff().radius().as_f64(),
            });
        }
        if self.mu == T::zero() {
            return self.stepper.step(v, f);
        }
        self.stepper.advance(
            v,
            f,
            Some(Nudge {
                mu: self.mu,
                target: obs,
            }),
        )
    }
}

/// One nudged IMEX Euler step with a fresh workspace.
pub fn nudged_step<T: Real>(
    state: &FlowState<T>,
    obs: &LowModes<T>,
    cfg: &AssimilationConfig<T>,
    f: &SpectralField<T>,
) -> Result<FlowState<T>> {
    let mut a = Assimilator::new(cfg, obs.layout().clone())?;
    let mut next = state.clone();
    a.step(&mut next, obs, f)?;
    Ok(next)
}

/// Source of ground-truth fields by time.
pub trait Truth<T: Real> {
    fn state_at(&self, t: T) -> Option<&SpectralField<T>>;
}

impl<T: Real> Truth<T> for InMemoryReference<T> {
    fn state_at(&self, t: T) -> Option<&SpectralField<T>> {
        self.snapshot_at(t, T::lit(1e-9)).map(|s| &s.u)
    }
}

impl<T: Real> Truth<T> for [FlowState<T>] {
    fn state_at(&self, t: T) -> Option<&SpectralField<T>> {
        let tol = T::lit(1e-9);
        let pos = self.partition_point(|s| s.t < t - tol);
        self.get(pos).filter(|s| (s.t - t).abs() <= tol).map(|s| &s.u)
    }
}

impl<T: Real> Truth<T> for Vec<FlowState<T>> {
    fn state_at(&self, t: T) -> Option<&SpectralField<T>> {
        self.as_slice().state_at(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorRow<T> {
    pub t: T,
    /// `|w| = |u - v|`, when truth is available.
    pub l2_err: Option<T>,
    /// `||u - v||`, when truth is available.
    pub h1_err: Option<T>,
    pub ih_err: T,
    pub ih_err_sq: T,
    /// `(I_h(A v), I_h(u - v))`
    pub denom: T,
}

#[derive(Clone, Debug, Default)]
pub struct ErrorSeries<T> {
    pub rows: Vec<ErrorRow<T>>,
}

impl<T: Real> ErrorSeries<T> {
    pub fn has_truth(&self) -> bool {
        self.rows.iter().any(|r| r.l2_err.is_some())
    }

    /// Minimum of `|I_h w|` over the run.
    pub fn ih_floor(&self) -> Option<T> {
        self.rows.iter().map(|r| r.ih_err).reduce(T::min)
    }

    /// Minimum of `|w|` over the rows carrying truth.
    pub fn l2_floor(&self) -> Option<T> {
        self.rows.iter().filter_map(|r| r.l2_err).reduce(T::min)
    }

    /// First time at which the trailing moving average of `|I_h w|` over
    /// `window` changes by less than `rel` between consecutive windows.
    pub fn floor_reached_at(&self, window: T, rel: T) -> Option<T> {
        let mut means: Vec<(T, T)> = Vec::new();
        let mut start = 0;
        for (i, r) in self.rows.iter().enumerate() {
            if r.t - self.rows[start].t >= window - T::lit(1e-9) {
                let slice = &self.rows[start..=i];
                let m = slice.iter().map(|r| r.ih_err).fold(T::zero(), |a, b| a + b)
                    / T::lit(slice.len() as f64);
                means.push((r.t, m));
                start = i + 1;
            }
        }
        means
            .windows(2)
            .find(|p| (p[1].1 - p[0].1).abs() < rel * p[0].1)
            .map(|p| p[1].0)
    }
}

/// Integrates `v` from `v(t_start) = 0`, nudged by `obs` with zero-order hold,
/// and records error diagnostics every `output_interval`.
pub fn run_assimilation<T: Real>(
    cfg: &AssimilationConfig<T>,
    obs: &ObservationStream<T>,
    forcing: &SpectralField<T>,
    truth: Option<&dyn Truth<T>>,
) -> Result<ErrorSeries<T>> {
    let v0 = FlowState::zero(obs.layout().grid(), cfg.t_start);
    run_assimilation_from(cfg, obs, forcing, truth, v0).map(|(s, _)| s)
}

/// As [`run_assimilation`] from a given initial state; also returns the final state.
pub fn run_assimilation_from<T: Real>(
    cfg: &AssimilationConfig<T>,
    obs: &ObservationStream<T>,
    forcing: &SpectralField<T>,
    truth: Option<&dyn Truth<T>>,
    v0: FlowState<T>,
) -> Result<(ErrorSeries<T>, FlowState<T>)> {
    cfg.validate()?;
    cfg.check_stream(obs)?;
    forcing.same_grid(&v0.u)?;
    let total = steps_in(cfg.t_end - cfg.t_start, cfg.dt).unwrap();
    let out_every = steps_in(cfg.output_interval, cfg.dt).unwrap();
    let mut model = Assimilator::new(cfg, obs.layout().clone())?;
    let mut v = v0;
    let mut series = ErrorSeries::default();

    let record = |v: &FlowState<T>, series: &mut ErrorSeries<T>| -> Result<()> {
        let rec = obs.hold(v.t, cfg.max_obs_gap)?;
        let ip = Interpolant::of(&rec.modes, &v.u);
        let (l2_err, h1_err) = match truth.and_then(|tr| tr.state_at(v.t)) {
            Some(u) => {
                let w = u.sub(&v.u);
                (Some(w.l2_norm()), Some(w.h1_norm()))
            }
            None => (None, None),
        };
        series.rows.push(ErrorRow {
            t: v.t,
            l2_err,
            h1_err,
            ih_err: ip.ih_err(),
            ih_err_sq: ip.ih_err_sq,
            denom: ip.denom,
        });
        Ok(())
    };

    record(&v, &mut series)?;
    for k in 1..=total {
        let rec = obs.hold(v.t, cfg.max_obs_gap)?;
        model.step(&mut v, &rec.modes, forcing)?;
        v.t = cfg.t_start + T::lit(k as f64) * cfg.dt;
        if k % out_every == 0 {
            record(&v, &mut series)?;
        }
    }
    Ok((series, v))
}

/// Sufficient condition `mu c0 h^2 <= nu2` for well-posed nudging, with the
/// ratio `mu c0 h^2 / nu2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Admissibility<T> {
    pub admissible: bool,
    pub margin: T,
}

pub fn admissibility<T: Real>(mu: T, h: T, nu2: T, c0: T) -> Admissibility<T> {
    let lhs = mu * c0 * h * h;
    Admissibility {
        admissible: lhs <= nu2,
        margin: lhs / nu2,
    }
}

/// Unit-constant error-floor scale `|Re2 - Re1| / (Re1 sqrt(Re2))`.
pub fn floor_scaling<T: Real>(re1: T, re2: T) -> T {
    (re2 - re1).abs() / (re1 * re2.sqrt())
}
