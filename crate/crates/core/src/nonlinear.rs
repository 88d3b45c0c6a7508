//! Dealiased pseudo-spectral evaluation of `B(u, v) = P(u . grad v)`.

use std::sync::Arc;

use num_complex::Complex;
use num_traits::Zero;
use rustfft::{Fft, FftPlanner};

use crate::error::Result;
use crate::field::SpectralField;
use crate::grid::Grid2D;
use crate::scalar::Real;

/// FFT plans and scratch buffers for products on the padded grid.
///
/// Each stepper owns one; it is cheap to clone plans but the buffers are
/// per-instance, so a workspace must not be shared between threads.
pub struct Workspace<T: Real> {
    grid: Grid2D<T>,
    m: usize,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
    bufs: [Vec<Complex<T>>; 4],
    tmp: Vec<Complex<T>>,
    scratch: Vec<Complex<T>>,
    /// Padded-grid flat index of every active mode, paired with its storage index.
    map: Vec<(usize, usize)>,
}

impl<T: Real> Workspace<T> {
    pub fn new(grid: &Grid2D<T>) -> Self {
        let m = grid.padded_n();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(m);
        let inverse = planner.plan_fft_inverse(m);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        let mut map = Vec::new();
        for idx in 1..grid.len() {
            if grid.is_active(idx) {
                let (k1, k2) = grid.mode(idx);
                let p = (k1.rem_euclid(m as i64) as usize) * m + k2.rem_euclid(m as i64) as usize;
                map.push((idx, p));
            }
        }
        let zero = vec![Complex::zero(); m * m];
        Self {
            grid: grid.clone(),
            m,
            forward,
            inverse,
            bufs: [zero.clone(), zero.clone(), zero.clone(), zero.clone()],
            tmp: zero,
            scratch: vec![Complex::zero(); scratch_len],
            map,
        }
    }

    pub fn grid(&self) -> &Grid2D<T> {
        &self.grid
    }

    fn transform(&mut self, which: usize, inverse: bool) {
        let m = self.m;
        let plan = if inverse { &self.inverse } else { &self.forward };
        let buf = &mut self.bufs[which];
        plan.process_with_scratch(buf, &mut self.scratch);
        transpose(buf, &mut self.tmp, m);
        plan.process_with_scratch(&mut self.tmp, &mut self.scratch);
        transpose(&self.tmp, buf, m);
    }

    /// Loads `a + i b` (both real fields given by their coefficients) into a
    /// padded buffer and transforms it to physical space.
    fn load_pair(&mut self, which: usize, a: &[Complex<T>], b: &[Complex<T>], da: (bool, usize), db: (bool, usize)) {
        let i = Complex::new(T::zero(), T::one());
        let buf = &mut self.bufs[which];
        buf.iter_mut().for_each(|z| *z = Complex::zero());
        for &(idx, p) in &self.map {
            let kv = self.grid.kvec(idx);
            let deriv = |on: bool, axis: usize, z: Complex<T>| {
                if on {
                    let k = if axis == 0 { kv.0 } else { kv.1 };
                    i * z.scale(k)
                } else {
                    z
                }
            };
            let za = deriv(da.0, da.1, a[idx]);
            let zb = deriv(db.0, db.1, b[idx]);
            buf[p] = za + i * zb;
        }
        self.transform(which, true);
    }

    /// `max_x |u(x)|` sampled on the padded grid.
    pub fn max_speed(&mut self, u: &SpectralField<T>) -> T {
        self.load_pair(0, u.component(0), u.component(1), (false, 0), (false, 0));
        self.bufs[0].iter().fold(T::zero(), |m, z| m.max(z.norm()))
    }

    /// `P(u . grad v)` evaluated with 3/2 padding.
    pub fn bilinear(&mut self, u: &SpectralField<T>, v: &SpectralField<T>) -> Result<SpectralField<T>> {
        u.same_grid(v)?;
        if *u.grid() != self.grid {
            return Err(crate::error::Error::GridMismatch);
        }
        let mut out = SpectralField::zeros(&self.grid);
        self.bilinear_into(u, v, &mut out);
        Ok(out)
    }

    /// As [`Workspace::bilinear`], writing into `out` (grids already checked).
    pub(crate) fn bilinear_into(&mut self, u: &SpectralField<T>, v: &SpectralField<T>, out: &mut SpectralField<T>) {
        // buf0 = u1 + i u2, buf1 = d1 v1 + i d2 v1, buf2 = d1 v2 + i d2 v2
        self.load_pair(0, u.component(0), u.component(1), (false, 0), (false, 0));
        self.load_pair(1, v.component(0), v.component(0), (true, 0), (true, 1));
        self.load_pair(2, v.component(1), v.component(1), (true, 0), (true, 1));

        {
            let [b0, b1, b2, b3] = &mut self.bufs;
            for (((o, uu), g1), g2) in b3.iter_mut().zip(b0.iter()).zip(b1.iter()).zip(b2.iter()) {
                let (u1, u2) = (uu.re, uu.im);
                let n1 = u1 * g1.re + u2 * g1.im;
                let n2 = u1 * g2.re + u2 * g2.im;
                *o = Complex::new(n1, n2);
            }
        }
        self.transform(3, false);

        let m = self.m;
        let norm = T::lit((m * m) as f64).recip();
        let half = T::lit(0.5);
        let buf = &self.bufs[3];
        let comps = out.components_mut();
        comps[0].iter_mut().for_each(|z| *z = Complex::zero());
        comps[1].iter_mut().for_each(|z| *z = Complex::zero());
        for &(idx, p) in &self.map {
            let (k1, k2) = self.grid.mode(idx);
            let q = ((-k1).rem_euclid(m as i64) as usize) * m + (-k2).rem_euclid(m as i64) as usize;
            let c = buf[p];
            let cm = buf[q].conj();
            // split C = N1 + i N2 using the Hermitian symmetry of N1, N2
            let n1 = (c + cm).scale(half * norm);
            let n2 = Complex::new(c.im - cm.im, cm.re - c.re).scale(half * norm);
            comps[0][idx] = n1;
            comps[1][idx] = n2;
        }
        out.leray_project_in_place();
    }
}

fn transpose<T: Copy>(src: &[T], dst: &mut [T], m: usize) {
    const B: usize = 16;
    for ib in (0..m).step_by(B) {
        for jb in (0..m).step_by(B) {
            for i in ib..(ib + B).min(m) {
                for j in jb..(jb + B).min(m) {
                    dst[j * m + i] = src[i * m + j];
                }
            }
        }
    }
}

/// `B(u, v)` with a one-off workspace.
pub fn nonlinear_term<T: Real>(u: &SpectralField<T>, v: &SpectralField<T>) -> Result<SpectralField<T>> {
    u.same_grid(v)?;
    Workspace::new(u.grid()).bilinear(u, v)
}
