//! Shell-summed, time-averaged energy spectrum.

use crate::error::{Error, Result};
use crate::field::SpectralField;
use crate::scalar::Real;

/// Sum of `|u_k|^2` over the shells `r - 1/2 < |k| <= r + 1/2`, `r = 0..=n/2`.
pub fn shell_sums<T: Real>(u: &SpectralField<T>) -> Vec<T> {
    let g = u.grid();
    let rmax = g.n() / 2;
    let mut out = vec![T::zero(); rmax + 1];
    for idx in 0..g.len() {
        let [a, b] = u.at(idx);
        let e = a.norm_sqr() + b.norm_sqr();
        if e == T::zero() {
            continue;
        }
        let r = (g.ksq(idx).sqrt() - T::lit(0.5)).ceil().max(T::zero());
        let r = r.to_usize().unwrap_or(usize::MAX);
        if r <= rmax {
            out[r] += e;
        }
    }
    out
}

/// Trapezoid-rule time average of shell sums, fed one snapshot at a time.
#[derive(Clone, Debug)]
pub struct SpectrumAccumulator<T> {
    integral: Vec<T>,
    last: Option<(T, Vec<T>)>,
    start: Option<T>,
    count: usize,
}

impl<T: Real> Default for SpectrumAccumulator<T> {
    fn default() -> Self {
        Self {
            integral: Vec::new(),
            last: None,
            start: None,
            count: 0,
        }
    }
}

impl<T: Real> SpectrumAccumulator<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: T, u: &SpectralField<T>) -> Result<()> {
        let s = shell_sums(u);
        if let Some((t0, prev)) = &self.last {
            if !(t > *t0) {
                return Err(Error::InvalidParameter(format!(
                    "spectrum snapshots must have increasing times ({t0} then {t})"
                )));
            }
            let w = (t - *t0) * T::lit(0.5);
            if self.integral.is_empty() {
                self.integral = vec![T::zero(); s.len()];
            }
            for ((acc, a), b) in self.integral.iter_mut().zip(prev).zip(&s) {
                *acc += w * (*a + *b);
            }
        } else {
            self.start = Some(t);
        }
        self.last = Some((t, s));
        self.count += 1;
        Ok(())
    }

    /// `(r, S(r))` rows.
    pub fn finish(&self) -> Result<Vec<(usize, T)>> {
        if self.count < 2 {
            return Err(Error::TooFew {
                needed: 2,
                got: self.count,
            });
        }
        let span = self.last.as_ref().map(|(t, _)| *t).unwrap() - self.start.unwrap();
        Ok(self
            .integral
            .iter()
            .enumerate()
            .map(|(r, v)| (r, *v / span))
            .collect())
    }
}

/// `S(r) = 1/(t_end - t_start) * int sum_{shell r} |u_k(t)|^2 dt`.
pub fn energy_spectrum<T: Real>(snapshots: &[SpectralField<T>], times: &[T]) -> Result<Vec<(usize, T)>> {
    if snapshots.len() != times.len() {
        return Err(Error::InvalidParameter(format!(
            "{} snapshots but {} times",
            snapshots.len(),
            times.len()
        )));
    }
    let mut acc = SpectrumAccumulator::new();
    for (u, t) in snapshots.iter().zip(times) {
        acc.push(*t, u)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid2D;
    use num_complex::Complex;

    #[test]
    fn static_mode_lands_in_its_shell() {
        let g = Grid2D::<f64>::new(16).unwrap();
        // |k| = 5 via (3,4); total shell energy a = 2 * (0.8^2 + 0.6^2) * s^2
        let s = 0.5;
        let u = SpectralField::single_mode(&g, 3, 4, [Complex::new(0.8 * s, 0.0), Complex::new(-0.6 * s, 0.0)]).unwrap();
        let a = 2.0 * s * s;
        let spec = energy_spectrum(&[u.clone(), u.clone(), u], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(spec.len(), 9);
        for (r, v) in spec {
            if r == 5 {
                assert!((v - a).abs() < 1e-15);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn constant_in_time_average_is_the_snapshot() {
        let g = Grid2D::<f64>::new(16).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let u = crate::field::random_field(&g, &mut rng, None, 1.0);
        let once = shell_sums(&u);
        let avg = energy_spectrum(&[u.clone(), u], &[2.0, 3.5]).unwrap();
        for (r, v) in avg {
            assert!((v - once[r]).abs() <= 1e-14 * once[r].max(1.0));
        }
    }

    #[test]
    fn needs_two_snapshots() {
        let g = Grid2D::<f64>::new(8).unwrap();
        let u = SpectralField::zeros(&g);
        assert!(matches!(energy_spectrum(&[u], &[0.0]), Err(Error::TooFew { .. })));
    }
}
