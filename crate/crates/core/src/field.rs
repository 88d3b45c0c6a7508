//! Fourier coefficients of real, mean-zero periodic vector fields.

use num_complex::Complex;
use num_traits::Zero;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::scalar::Real;

/// Velocity-like field `u(x) = sum_k u_k e^{i k.x}` stored by its coefficients.
///
/// Both components share the lattice of [`Grid2D`]. The zero mode and the
/// Nyquist modes are always zero.
#[derive(Clone, Debug)]
pub struct SpectralField<T: Real> {
    grid: Grid2D<T>,
    comps: [Vec<Complex<T>>; 2],
    divergence_free: bool,
}

/// `(|u|, ||u||, |Au|)`: the `L^2`, `H^1` seminorm and Stokes norms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norms<T> {
    pub l2: T,
    pub h1: T,
    pub da: T,
}

/// Low-mode observation cutoff, stored as the radius `1/h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cutoff<T> {
    radius: T,
}

impl<T: Real> Cutoff<T> {
    pub fn from_h(h: T) -> Result<Self> {
        if !(h > T::zero()) || !h.is_finite() {
            return Err(Error::InvalidParameter(format!("cutoff h = {h} must be positive")));
        }
        Ok(Self { radius: h.recip() })
    }

    pub fn h(&self) -> T {
        self.radius.recip()
    }

    /// `1/h`.
    pub fn radius(&self) -> T {
        self.radius
    }

    /// Whether a mode with `|k|^2 = ksq` is observed.
    #[inline]
    pub fn contains(&self, ksq: T) -> bool {
        ksq <= self.radius * self.radius * (T::one() + T::lit(1e-12))
    }

    pub fn check_grid(&self, grid: &Grid2D<T>) -> Result<()> {
        let max = T::lit(grid.n() as f64 / 2.0) * grid.kscale();
        if self.radius > max * (T::one() + T::lit(1e-12)) {
            return Err(Error::CutoffTooLarge {
                inv_h: self.radius.as_f64(),
                max: max.as_f64(),
            });
        }
        Ok(())
    }
}

impl<T: Real> SpectralField<T> {
    pub fn zeros(grid: &Grid2D<T>) -> Self {
        let z = vec![Complex::zero(); grid.len()];
        Self {
            grid: grid.clone(),
            comps: [z.clone(), z],
            divergence_free: true,
        }
    }

    /// Builds a field from per-mode coefficients of the integer wavenumber.
    ///
    /// The closure is evaluated on every active mode; the result is not
    /// symmetrized, so callers are responsible for Hermitian input.
    pub fn from_fn(grid: &Grid2D<T>, mut f: impl FnMut(i64, i64) -> [Complex<T>; 2]) -> Self {
        let mut out = Self::zeros(grid);
        for idx in 1..grid.len() {
            if grid.is_active(idx) {
                let (k1, k2) = grid.mode(idx);
                let [a, b] = f(k1, k2);
                out.comps[0][idx] = a;
                out.comps[1][idx] = b;
            }
        }
        out.divergence_free = false;
        out
    }

    /// Real field made of the single Fourier pair `+-k` with `u_k = amp`.
    pub fn single_mode(grid: &Grid2D<T>, k1: i64, k2: i64, amp: [Complex<T>; 2]) -> Result<Self> {
        if k1 == 0 && k2 == 0 {
            return Err(Error::InvalidParameter("zero mode is pinned to zero".into()));
        }
        let idx = grid
            .index(k1, k2)
            .ok_or_else(|| Error::InvalidParameter(format!("mode ({k1},{k2}) not resolved")))?;
        let mut out = Self::zeros(grid);
        let j = grid.conjugate_index(idx);
        for c in 0..2 {
            out.comps[c][idx] = amp[c];
            out.comps[c][j] = amp[c].conj();
        }
        out.divergence_free = out.max_divergence() <= T::lit(1e-12) * out.coeff_norm();
        Ok(out)
    }

    /// Field assembled from raw coefficient arrays in storage order.
    pub fn from_components(
        grid: &Grid2D<T>,
        u1: Vec<Complex<T>>,
        u2: Vec<Complex<T>>,
        divergence_free: bool,
    ) -> Result<Self> {
        if u1.len() != grid.len() || u2.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        Ok(Self {
            grid: grid.clone(),
            comps: [u1, u2],
            divergence_free,
        })
    }

    #[inline]
    pub fn grid(&self) -> &Grid2D<T> {
        &self.grid
    }

    #[inline]
    pub fn component(&self, c: usize) -> &[Complex<T>] {
        &self.comps[c]
    }

    #[inline]
    pub(crate) fn components_mut(&mut self) -> &mut [Vec<Complex<T>>; 2] {
        &mut self.comps
    }

    #[inline]
    pub fn at(&self, idx: usize) -> [Complex<T>; 2] {
        [self.comps[0][idx], self.comps[1][idx]]
    }

    /// Coefficient pair at integer wavenumber `(k1, k2)`; zero if unresolved.
    pub fn mode(&self, k1: i64, k2: i64) -> [Complex<T>; 2] {
        self.grid
            .index(k1, k2)
            .map(|i| self.at(i))
            .unwrap_or([Complex::zero(); 2])
    }

    #[inline]
    pub fn set(&mut self, idx: usize, v: [Complex<T>; 2]) {
        self.comps[0][idx] = v[0];
        self.comps[1][idx] = v[1];
    }

    pub fn is_divergence_free(&self) -> bool {
        self.divergence_free
    }

    pub fn same_grid(&self, other: &Self) -> Result<()> {
        if self.grid == other.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    /// Zeroes the mean and every inactive (Nyquist) coefficient.
    pub(crate) fn pin(&mut self) {
        for c in 0..2 {
            self.comps[c][0] = Complex::zero();
        }
        for idx in 0..self.grid.len() {
            if !self.grid.is_active(idx) {
                self.comps[0][idx] = Complex::zero();
                self.comps[1][idx] = Complex::zero();
            }
        }
    }

    /// Replaces each coefficient pair by the average with its conjugate partner.
    pub fn hermitianize(&mut self) {
        for idx in 0..self.grid.len() {
            let j = self.grid.conjugate_index(idx);
            if j < idx {
                continue;
            }
            for c in 0..2 {
                let a = self.comps[c][idx];
                let b = self.comps[c][j];
                let half = T::lit(0.5);
                let m = (a + b.conj()).scale(half);
                self.comps[c][idx] = m;
                self.comps[c][j] = m.conj();
            }
        }
        self.pin();
    }

    /// Largest deviation from `u(-k) = conj(u(k))`.
    pub fn hermitian_defect(&self) -> T {
        let mut worst = T::zero();
        for idx in 0..self.grid.len() {
            let j = self.grid.conjugate_index(idx);
            for c in 0..2 {
                worst = worst.max((self.comps[c][idx] - self.comps[c][j].conj()).norm());
            }
        }
        worst
    }

    /// `max_k |k . u_k|`.
    pub fn max_divergence(&self) -> T {
        let mut worst = T::zero();
        for idx in 0..self.grid.len() {
            let (k1, k2) = self.grid.kvec(idx);
            let d = self.comps[0][idx].scale(k1) + self.comps[1][idx].scale(k2);
            worst = worst.max(d.norm());
        }
        worst
    }

    /// `sqrt(sum |u_k|^2)`, the bare coefficient norm without domain measure.
    pub fn coeff_norm(&self) -> T {
        self.weighted_sum(|_| T::one()).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.comps
            .iter()
            .flatten()
            .fold(T::zero(), |m, z| m.max(z.norm()))
    }

    pub fn is_finite(&self) -> bool {
        self.comps
            .iter()
            .flatten()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    fn weighted_sum(&self, w: impl Fn(T) -> T) -> T {
        let mut s = T::zero();
        for idx in 0..self.grid.len() {
            let m = self.comps[0][idx].norm_sqr() + self.comps[1][idx].norm_sqr();
            if m != T::zero() {
                s += w(self.grid.ksq(idx)) * m;
            }
        }
        s
    }

    /// `L^2` inner product `(u, v)` including the domain measure.
    pub fn inner(&self, other: &Self) -> T {
        debug_assert!(self.grid == other.grid);
        let mut s = T::zero();
        for c in 0..2 {
            for (a, b) in self.comps[c].iter().zip(&other.comps[c]) {
                s += a.re * b.re + a.im * b.im;
            }
        }
        s * self.grid.measure()
    }

    pub fn l2_norm(&self) -> T {
        (self.weighted_sum(|_| T::one()) * self.grid.measure()).sqrt()
    }

    pub fn h1_norm(&self) -> T {
        (self.weighted_sum(|k2| k2) * self.grid.measure()).sqrt()
    }

    pub fn norms(&self) -> Norms<T> {
        let m = self.grid.measure();
        Norms {
            l2: (self.weighted_sum(|_| T::one()) * m).sqrt(),
            h1: (self.weighted_sum(|k2| k2) * m).sqrt(),
            da: (self.weighted_sum(|k2| k2 * k2) * m).sqrt(),
        }
    }

    /// Per-mode Leray projection `u_k - k (k.u_k) / |k|^2`.
    pub fn leray_project(&self) -> Self {
        let mut out = self.clone();
        out.leray_project_in_place();
        out
    }

    pub fn leray_project_in_place(&mut self) {
        for idx in 1..self.grid.len() {
            let ksq = self.grid.ksq(idx);
            if ksq == T::zero() {
                continue;
            }
            let (k1, k2) = self.grid.kvec(idx);
            let a = self.comps[0][idx];
            let b = self.comps[1][idx];
            let d = (a.scale(k1) + b.scale(k2)).unscale(ksq);
            self.comps[0][idx] = a - d.scale(k1);
            self.comps[1][idx] = b - d.scale(k2);
        }
        self.pin();
        self.divergence_free = true;
    }

    /// Stokes operator `A u`, i.e. `|k|^2 u_k` per mode.
    pub fn stokes_apply(&self) -> Self {
        let mut out = self.clone();
        for idx in 0..self.grid.len() {
            let k2 = self.grid.ksq(idx);
            for c in 0..2 {
                out.comps[c][idx] = out.comps[c][idx].scale(k2);
            }
        }
        out
    }

    /// Modal interpolant `I_h u`: keeps `|k| <= 1/h`, zeroes the rest.
    pub fn observe(&self, cutoff: &Cutoff<T>) -> Result<Self> {
        cutoff.check_grid(&self.grid)?;
        let mut out = self.clone();
        for idx in 0..self.grid.len() {
            if !cutoff.contains(self.grid.ksq(idx)) {
                out.comps[0][idx] = Complex::zero();
                out.comps[1][idx] = Complex::zero();
            }
        }
        Ok(out)
    }

    /// `self + a * x`.
    pub fn axpy(&mut self, a: T, x: &Self) {
        debug_assert!(self.grid == x.grid);
        for c in 0..2 {
            for (y, xv) in self.comps[c].iter_mut().zip(&x.comps[c]) {
                *y += xv.scale(a);
            }
        }
        self.divergence_free &= x.divergence_free;
    }

    pub fn scaled(&self, a: T) -> Self {
        let mut out = self.clone();
        for c in 0..2 {
            for z in out.comps[c].iter_mut() {
                *z = z.scale(a);
            }
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-T::one(), other);
        out.divergence_free = self.divergence_free && other.divergence_free;
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(T::one(), other);
        out
    }

    /// Converts to another precision.
    pub fn cast<U: Real>(&self, grid: &Grid2D<U>) -> Result<SpectralField<U>> {
        if grid.n() != self.grid.n() {
            return Err(Error::GridMismatch);
        }
        let conv = |v: &Vec<Complex<T>>| -> Vec<Complex<U>> {
            v.iter()
                .map(|z| Complex::new(U::lit(z.re.as_f64()), U::lit(z.im.as_f64())))
                .collect()
        };
        SpectralField::from_components(
            grid,
            conv(&self.comps[0]),
            conv(&self.comps[1]),
            self.divergence_free,
        )
    }
}

/// Random real divergence-free field with independent normal coefficients on
/// every active mode with `|k| <= kmax`, scaled by `|k|^-decay`.
pub fn random_field<T: Real, R: Rng + ?Sized>(
    grid: &Grid2D<T>,
    rng: &mut R,
    kmax: Option<f64>,
    decay: f64,
) -> SpectralField<T> {
    let mut f = SpectralField::zeros(grid);
    let limit = kmax.map(|k| k * k).unwrap_or(f64::INFINITY);
    for idx in 1..grid.len() {
        if !grid.is_active(idx) {
            continue;
        }
        let j = grid.conjugate_index(idx);
        if j < idx {
            continue;
        }
        let ksq = grid.ksq(idx).as_f64();
        if ksq > limit {
            continue;
        }
        let w = ksq.powf(-decay / 2.0);
        let mut draw = || {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex::new(T::lit(re * w), T::lit(im * w))
        };
        let a = draw();
        let b = draw();
        f.set(idx, [a, b]);
        f.set(j, [a.conj(), b.conj()]);
    }
    // Self-conjugate modes (k = -k mod n) are inactive, so the loop above is
    // Hermitian by construction.
    f.leray_project_in_place();
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn grid(n: usize) -> Grid2D<f64> {
        Grid2D::new(n).unwrap()
    }

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    #[test]
    fn gradient_is_annihilated() {
        let g = grid(16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // u_k = i k phi_k for a random Hermitian potential.
        let phi = random_field(&g, &mut rng, None, 0.0);
        let grad = SpectralField::from_fn(&g, |k1, k2| {
            let p = phi.mode(k1, k2)[0];
            let i = c(0.0, 1.0);
            [i * p.scale(k1 as f64), i * p.scale(k2 as f64)]
        });
        assert!(grad.hermitian_defect() < 1e-15);
        assert!(grad.leray_project().max_abs() < 1e-14);
    }

    #[test]
    fn projection_is_idempotent() {
        let g = grid(16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_field(&g, &mut rng, None, 0.0);
        let p = u.leray_project();
        let scale = u.max_abs();
        for idx in 0..g.len() {
            for c in 0..2 {
                assert!((u.at(idx)[c] - p.at(idx)[c]).norm() <= 1e-15 * scale);
            }
        }
        let pp = p.leray_project();
        assert!(pp.sub(&p).max_abs() <= 1e-15 * scale);
    }

    #[test]
    fn projection_matches_matrix_oracle() {
        let g = grid(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = SpectralField::from_fn(&g, |_, _| {
            [
                c(rng.sample(StandardNormal), rng.sample(StandardNormal)),
                c(rng.sample(StandardNormal), rng.sample(StandardNormal)),
            ]
        });
        let mut raw = raw;
        raw.hermitianize();
        let p = raw.leray_project();
        assert!(p.max_divergence() < 1e-14);
        for idx in 1..g.len() {
            if !g.is_active(idx) {
                continue;
            }
            let (k1, k2) = g.mode(idx);
            let (a, b) = (k1 as f64, k2 as f64);
            let s = a * a + b * b;
            let m = [[1.0 - a * a / s, -a * b / s], [-a * b / s, 1.0 - b * b / s]];
            let u = raw.at(idx);
            let want = [
                u[0].scale(m[0][0]) + u[1].scale(m[0][1]),
                u[0].scale(m[1][0]) + u[1].scale(m[1][1]),
            ];
            let got = p.at(idx);
            for cidx in 0..2 {
                assert!((got[cidx] - want[cidx]).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn stokes_scales_by_ksq() {
        let g = grid(16);
        let u = SpectralField::single_mode(&g, 1, 0, [c(0.0, 0.0), c(0.7, 0.1)]).unwrap();
        assert_eq!(u.stokes_apply().mode(1, 0), [c(0.0, 0.0), c(0.7, 0.1)]);
        let v = SpectralField::single_mode(&g, 3, 4, [c(4.0, 0.0), c(-3.0, 0.0)]).unwrap();
        assert_eq!(v.stokes_apply().mode(3, 4), [c(100.0, 0.0), c(-75.0, 0.0)]);
        assert_eq!(v.stokes_apply().mode(-3, -4), [c(100.0, 0.0), c(-75.0, 0.0)]);
    }

    #[test]
    fn stokes_pairing_is_parseval() {
        let g = grid(16);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_field(&g, &mut rng, None, 1.0);
        let lhs = u.stokes_apply().inner(&u);
        let mut rhs = 0.0;
        for idx in 0..g.len() {
            let [a, b] = u.at(idx);
            rhs += g.ksq(idx) * (a.norm_sqr() + b.norm_sqr());
        }
        rhs *= 4.0 * PI * PI;
        assert!((lhs - rhs).abs() <= 1e-12 * rhs);
        assert!((u.h1_norm().powi(2) - rhs).abs() <= 1e-12 * rhs);
    }

    #[test]
    fn observe_keeps_low_band() {
        let g = grid(128);
        let cut = Cutoff::from_h(1.0 / 32.0).unwrap();
        let high = SpectralField::single_mode(&g, 24, 32, [c(4.0, 0.0), c(-3.0, 0.0)]).unwrap();
        assert_eq!(high.observe(&cut).unwrap().max_abs(), 0.0);
        let low = SpectralField::single_mode(&g, 0, 32, [c(1.0, 0.0), c(0.0, 0.0)]).unwrap();
        let o = low.observe(&cut).unwrap();
        assert_eq!(o.max_abs(), 1.0);
        let too_big = Cutoff::from_h(1.0 / 65.0).unwrap();
        assert!(matches!(low.observe(&too_big), Err(Error::CutoffTooLarge { .. })));
    }

    #[test]
    fn norms_of_single_mode() {
        let g = grid(16);
        let z = SpectralField::<f64>::zeros(&g).norms();
        assert_eq!((z.l2, z.h1, z.da), (0.0, 0.0, 0.0));
        let a = 0.3;
        let u = SpectralField::single_mode(&g, 1, 0, [c(0.0, 0.0), c(a, 0.0)]).unwrap();
        let n = u.norms();
        let want = 2.0 * PI * a * 2f64.sqrt();
        assert!((n.l2 - want).abs() < 1e-14);
        assert!((n.h1 - want).abs() < 1e-14);
        assert!((n.da - want).abs() < 1e-14);
    }

    #[test]
    fn poincare_chain_is_strict_with_high_modes() {
        let g = grid(16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_field(&g, &mut rng, None, 0.0);
        let n = u.norms();
        let l1 = g.lambda1();
        assert!(n.l2 < n.h1 / l1.sqrt());
        assert!(n.h1 / l1.sqrt() < n.da / l1);
    }

    #[test]
    fn random_field_is_admissible() {
        let g = grid(32);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = random_field(&g, &mut rng, Some(10.0), 1.0);
        assert!(u.hermitian_defect() == 0.0);
        assert!(u.max_divergence() <= 1e-12 * u.coeff_norm());
        assert_eq!(u.at(0), [Complex::zero(); 2]);
        assert!(u.is_divergence_free());
    }
}
