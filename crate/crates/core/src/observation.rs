//! Low-mode observations `I_h(u(t))`, the only data the assimilation side reads.

use std::sync::Arc;

use num_complex::Complex;
use num_traits::Zero;

use crate::error::{Error, Result};
use crate::field::{Cutoff, SpectralField};
use crate::grid::Grid2D;
use crate::scalar::Real;

/// Which storage indices of a grid are observed for a given cutoff.
#[derive(Debug)]
pub struct ObservationLayout<T: Real> {
    grid: Grid2D<T>,
    cutoff: Cutoff<T>,
    indices: Vec<usize>,
}

impl<T: Real> ObservationLayout<T> {
    pub fn new(grid: &Grid2D<T>, cutoff: Cutoff<T>) -> Result<Arc<Self>> {
        cutoff.check_grid(grid)?;
        let indices = (1..grid.len())
            .filter(|&i| grid.is_active(i) && cutoff.contains(grid.ksq(i)))
            .collect();
        Ok(Arc::new(Self {
            grid: grid.clone(),
            cutoff,
            indices,
        }))
    }

    pub fn grid(&self) -> &Grid2D<T> {
        &self.grid
    }

    pub fn cutoff(&self) -> Cutoff<T> {
        self.cutoff
    }

    /// Observed storage indices, ascending.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Coefficients of `I_h u` on the observed modes only.
#[derive(Clone, Debug)]
pub struct LowModes<T: Real> {
    layout: Arc<ObservationLayout<T>>,
    coeffs: Vec<[Complex<T>; 2]>,
}

impl<T: Real> LowModes<T> {
    pub fn from_field(layout: &Arc<ObservationLayout<T>>, u: &SpectralField<T>) -> Result<Self> {
        if *u.grid() != layout.grid {
            return Err(Error::GridMismatch);
        }
        Ok(Self {
            layout: layout.clone(),
            coeffs: layout.indices.iter().map(|&i| u.at(i)).collect(),
        })
    }

    pub fn from_coeffs(layout: &Arc<ObservationLayout<T>>, coeffs: Vec<[Complex<T>; 2]>) -> Result<Self> {
        if coeffs.len() != layout.len() {
            return Err(Error::Format(format!(
                "expected {} observed coefficients, got {}",
                layout.len(),
                coeffs.len()
            )));
        }
        Ok(Self {
            layout: layout.clone(),
            coeffs,
        })
    }

    pub fn layout(&self) -> &Arc<ObservationLayout<T>> {
        &self.layout
    }

    pub fn coeffs(&self) -> &[[Complex<T>; 2]] {
        &self.coeffs
    }

    /// Embeds the observation back into a full-resolution field.
    pub fn to_field(&self) -> SpectralField<T> {
        let mut f = SpectralField::zeros(&self.layout.grid);
        for (&i, c) in self.layout.indices.iter().zip(&self.coeffs) {
            f.set(i, *c);
        }
        f
    }

    /// Innovation `I_h(u) - I_h(v)` where `self = I_h(u)`.
    pub fn innovation(&self, v: &SpectralField<T>) -> LowModes<T> {
        let coeffs = self
            .layout
            .indices
            .iter()
            .zip(&self.coeffs)
            .map(|(&i, o)| {
                let x = v.at(i);
                [o[0] - x[0], o[1] - x[1]]
            })
            .collect();
        LowModes {
            layout: self.layout.clone(),
            coeffs,
        }
    }

    /// `|I_h(.)|^2` with the domain measure.
    pub fn l2_norm_sq(&self) -> T {
        let s = self
            .coeffs
            .iter()
            .fold(T::zero(), |s, c| s + c[0].norm_sqr() + c[1].norm_sqr());
        s * self.layout.grid.measure()
    }

    /// `(I_h(A v), self)` for a full field `v`.
    pub fn stokes_pairing(&self, v: &SpectralField<T>) -> T {
        let g = &self.layout.grid;
        let mut s = T::zero();
        for (&i, c) in self.layout.indices.iter().zip(&self.coeffs) {
            let x = v.at(i);
            let k2 = g.ksq(i);
            s += k2 * (x[0].re * c[0].re + x[0].im * c[0].im + x[1].re * c[1].re + x[1].im * c[1].im);
        }
        s * g.measure()
    }

    pub fn zeros(layout: &Arc<ObservationLayout<T>>) -> Self {
        Self {
            layout: layout.clone(),
            coeffs: vec![[Complex::zero(); 2]; layout.len()],
        }
    }
}

#[derive(Clone, Debug)]
pub struct ObservationRecord<T: Real> {
    pub t: T,
    pub modes: LowModes<T>,
}

/// Time-ordered observation records sharing one layout.
#[derive(Clone, Debug)]
pub struct ObservationStream<T: Real> {
    layout: Arc<ObservationLayout<T>>,
    records: Vec<ObservationRecord<T>>,
    source: String,
}

impl<T: Real> ObservationStream<T> {
    pub fn new(layout: Arc<ObservationLayout<T>>, source: impl Into<String>) -> Self {
        Self {
            layout,
            records: Vec::new(),
            source: source.into(),
        }
    }

    pub fn layout(&self) -> &Arc<ObservationLayout<T>> {
        &self.layout
    }

    pub fn cutoff(&self) -> Cutoff<T> {
        self.layout.cutoff
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn records(&self) -> &[ObservationRecord<T>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, t: T, modes: LowModes<T>) -> Result<()> {
        if !Arc::ptr_eq(&modes.layout, &self.layout)
            && (modes.layout.grid != self.layout.grid || modes.layout.cutoff != self.layout.cutoff)
        {
            return Err(Error::CutoffMismatch {
                stream: self.layout.cutoff.radius().as_f64(),
                config: modes.layout.cutoff.radius().as_f64(),
            });
        }
        if let Some(last) = self.records.last() {
            if !(t > last.t) {
                return Err(Error::InvalidParameter(format!(
                    "observation times must increase strictly ({} then {t})",
                    last.t
                )));
            }
        }
        self.records.push(ObservationRecord { t, modes });
        Ok(())
    }

    pub fn observe_and_push(&mut self, t: T, u: &SpectralField<T>) -> Result<()> {
        let m = LowModes::from_field(&self.layout, u)?;
        self.push(t, m)
    }

    pub fn first_time(&self) -> Option<T> {
        self.records.first().map(|r| r.t)
    }

    /// Time of the last record.
    pub fn horizon(&self) -> Option<T> {
        self.records.last().map(|r| r.t)
    }

    /// Zero-order hold: the latest record at or before `t`.
    ///
    /// `max_gap` bounds how stale the held record may be.
    pub fn hold(&self, t: T, max_gap: T) -> Result<&ObservationRecord<T>> {
        let slack = max_gap * T::lit(1e-9) + T::lit(1e-12) * t.abs().max(T::one());
        let pos = self.records.partition_point(|r| r.t <= t + slack);
        if pos == 0 {
            return Err(Error::ObservationGap {
                t: t.as_f64(),
                gap: f64::INFINITY,
            });
        }
        let rec = &self.records[pos - 1];
        let gap = t - rec.t;
        if gap > max_gap + slack {
            return Err(Error::ObservationGap {
                t: t.as_f64(),
                gap: gap.as_f64(),
            });
        }
        Ok(rec)
    }

    /// Records in `[from, to]`, keeping the layout.
    pub fn window(&self, from: T, to: T) -> Self {
        Self {
            layout: self.layout.clone(),
            records: self
                .records
                .iter()
                .filter(|r| r.t >= from && r.t <= to)
                .cloned()
                .collect(),
            source: self.source.clone(),
        }
    }
}
