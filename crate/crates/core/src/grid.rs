//! Periodic square grid and its wavenumber lattice.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Resolution, dealiasing factor and domain size of a doubly periodic box.
///
/// Coefficients are stored on the `n x n` lattice in FFT order: index `i`
/// along an axis maps to wavenumber `i` for `i < n/2` and `i - n` otherwise.
/// The Nyquist row and column (`|k_i| = n/2`) are kept identically zero, so the
/// active lattice `|k_i| <= n/2 - 1` is closed under `k -> -k`.
#[derive(Clone)]
pub struct Grid2D<T: Real> {
    n: usize,
    dealias: (u32, u32),
    length: T,
    tables: Arc<Tables<T>>,
}

struct Tables<T> {
    wavenumber: Vec<i64>,
    ksq: Vec<T>,
    active: Vec<bool>,
    kscale: T,
}

impl<T: Real> Grid2D<T> {
    /// `n x n` grid on `[0, 2pi]^2` with the 3/2 padding rule.
    pub fn new(n: usize) -> Result<Self> {
        Self::with_domain(n, (3, 2), T::TAU())
    }

    pub fn with_domain(n: usize, dealias: (u32, u32), length: T) -> Result<Self> {
        if n < 4 || !n.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "n = {n} must be a power of two >= 4"
            )));
        }
        let (num, den) = dealias;
        if den == 0 || num < den {
            return Err(Error::InvalidGrid(format!(
                "dealias factor {num}/{den} must be >= 1"
            )));
        }
        if (n as u64 * num as u64) % den as u64 != 0 {
            return Err(Error::InvalidGrid(format!(
                "padded size n*{num}/{den} is not an integer for n = {n}"
            )));
        }
        if !(length > T::zero()) || !length.is_finite() {
            return Err(Error::InvalidGrid("domain length must be positive".into()));
        }

        let kscale = T::TAU() / length;
        let half = (n / 2) as i64;
        let wavenumber: Vec<i64> = (0..n as i64)
            .map(|i| if i < half { i } else { i - n as i64 })
            .collect();
        let mut ksq = Vec::with_capacity(n * n);
        let mut active = Vec::with_capacity(n * n);
        for &k1 in &wavenumber {
            for &k2 in &wavenumber {
                let (a, b) = (T::lit(k1 as f64) * kscale, T::lit(k2 as f64) * kscale);
                ksq.push(a * a + b * b);
                active.push(k1.abs() < half && k2.abs() < half);
            }
        }
        Ok(Self {
            n,
            dealias,
            length,
            tables: Arc::new(Tables {
                wavenumber,
                ksq,
                active,
                kscale,
            }),
        })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n * self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dealias(&self) -> (u32, u32) {
        self.dealias
    }

    pub fn domain_length(&self) -> T {
        self.length
    }

    /// Points per axis of the padded transform grid.
    pub fn padded_n(&self) -> usize {
        self.n * self.dealias.0 as usize / self.dealias.1 as usize
    }

    /// Truncation radius an unpadded transform would need for the same
    /// factor, `floor(n / (2 * factor))`. Informational; the padded product
    /// keeps every active mode.
    pub fn dealias_cutoff(&self) -> usize {
        (self.n as u64 * self.dealias.1 as u64 / (2 * self.dealias.0 as u64)) as usize
    }

    /// Largest active integer wavenumber per axis.
    pub fn max_wavenumber(&self) -> i64 {
        self.n as i64 / 2 - 1
    }

    /// `2 pi / L`.
    pub fn kscale(&self) -> T {
        self.tables.kscale
    }

    /// Integer wavenumber of axis index `i`.
    #[inline]
    pub fn wavenumber(&self, i: usize) -> i64 {
        self.tables.wavenumber[i]
    }

    #[inline]
    pub fn index(&self, k1: i64, k2: i64) -> Option<usize> {
        let m = self.max_wavenumber();
        if k1.abs() > m || k2.abs() > m {
            return None;
        }
        let n = self.n as i64;
        Some((k1.rem_euclid(n) * n + k2.rem_euclid(n)) as usize)
    }

    /// Integer wavenumber pair of flat index `idx`.
    #[inline]
    pub fn mode(&self, idx: usize) -> (i64, i64) {
        (
            self.tables.wavenumber[idx / self.n],
            self.tables.wavenumber[idx % self.n],
        )
    }

    /// Physical wavevector of flat index `idx`.
    #[inline]
    pub fn kvec(&self, idx: usize) -> (T, T) {
        let (k1, k2) = self.mode(idx);
        let s = self.tables.kscale;
        (T::lit(k1 as f64) * s, T::lit(k2 as f64) * s)
    }

    /// `|k|^2` of flat index `idx`, in physical units.
    #[inline]
    pub fn ksq(&self, idx: usize) -> T {
        self.tables.ksq[idx]
    }

    #[inline]
    pub fn is_active(&self, idx: usize) -> bool {
        self.tables.active[idx]
    }

    /// Flat index of `-k`.
    #[inline]
    pub fn conjugate_index(&self, idx: usize) -> usize {
        let n = self.n;
        let (i1, i2) = (idx / n, idx % n);
        ((n - i1) % n) * n + (n - i2) % n
    }

    /// Smallest nonzero eigenvalue of the Stokes operator on this lattice.
    pub fn lambda1(&self) -> T {
        self.tables.kscale * self.tables.kscale
    }

    /// Measure of the domain, `L^2`; the Parseval factor of every norm.
    pub fn measure(&self) -> T {
        self.length * self.length
    }
}

impl<T: Real> PartialEq for Grid2D<T> {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.dealias == other.dealias && self.length == other.length
    }
}

impl<T: Real> fmt::Debug for Grid2D<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid2D")
            .field("n", &self.n)
            .field("dealias", &self.dealias)
            .field("length", &self.length)
            .finish()
    }
}
