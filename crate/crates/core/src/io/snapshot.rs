//! Binary snapshot files.
//!
//! Layout (little endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 5     | magic `NNSE1` |
//! | 4     | `n` (u32) |
//! | 4 + 4 | dealias factor numerator, denominator (u32) |
//! | 8     | domain length (f64) |
//! | 8     | time (f64) |
//! | 1     | flags: bit 0 divergence free, bit 1 forcing |
//!
//! Forcing files continue with the marker `FORC`, the generator identifier
//! (u16 length + UTF-8), seed (u64), band `k_low`, `k_high` and target norm
//! (f64). The payload follows: `(re, im)` f64 pairs for every coefficient of
//! `û1`, then of `û2`, in storage order.

use std::path::Path;

use num_complex::Complex;

use super::{read_file, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::field::SpectralField;
use crate::forcing::{ForcingSpec, FORCING_RNG_ID};
use crate::grid::Grid2D;
use crate::scalar::Real;
use crate::solver::FlowState;

pub const MAGIC: &[u8; 5] = b"NNSE1";
const FORC: &[u8; 4] = b"FORC";
const FLAG_DIV_FREE: u8 = 1;
const FLAG_FORCING: u8 = 2;

/// Provenance of a stored forcing field.
#[derive(Clone, Debug, PartialEq)]
pub struct ForcingMeta {
    pub rng: String,
    pub spec: ForcingSpec,
}

impl ForcingMeta {
    pub fn current(spec: ForcingSpec) -> Self {
        Self {
            rng: FORCING_RNG_ID.to_string(),
            spec,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Snapshot<T: Real> {
    pub state: FlowState<T>,
    pub forcing: Option<ForcingMeta>,
}

pub fn encode<T: Real>(state: &FlowState<T>, forcing: Option<&ForcingMeta>) -> Vec<u8> {
    let g = state.u.grid();
    let mut out = Vec::with_capacity(64 + g.len() * 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(g.n() as u32).to_le_bytes());
    let (num, den) = g.dealias();
    out.extend_from_slice(&num.to_le_bytes());
    out.extend_from_slice(&den.to_le_bytes());
    out.extend_from_slice(&g.domain_length().as_f64().to_le_bytes());
    out.extend_from_slice(&state.t.as_f64().to_le_bytes());
    let mut flags = 0;
    if state.u.is_divergence_free() {
        flags |= FLAG_DIV_FREE;
    }
    if forcing.is_some() {
        flags |= FLAG_FORCING;
    }
    out.push(flags);
    if let Some(m) = forcing {
        out.extend_from_slice(FORC);
        out.extend_from_slice(&(m.rng.len() as u16).to_le_bytes());
        out.extend_from_slice(m.rng.as_bytes());
        out.extend_from_slice(&m.spec.seed.to_le_bytes());
        for x in [m.spec.k_low, m.spec.k_high, m.spec.target_l2] {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for c in 0..2 {
        for z in state.u.component(c) {
            out.extend_from_slice(&z.re.as_f64().to_le_bytes());
            out.extend_from_slice(&z.im.as_f64().to_le_bytes());
        }
    }
    out
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Snapshot<T>> {
    let mut r = Reader::new(bytes);
    if r.take(5)? != MAGIC {
        return Err(Error::Format("bad magic, not an NNSE1 snapshot".into()));
    }
    let n = r.u32()? as usize;
    let dealias = (r.u32()?, r.u32()?);
    let length = r.f64()?;
    let t = r.f64()?;
    let flags = r.u8()?;
    if flags & !(FLAG_DIV_FREE | FLAG_FORCING) != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#04x}")));
    }
    let grid = Grid2D::with_domain(n, dealias, T::lit(length)).map_err(|e| Error::Format(e.to_string()))?;
    let forcing = if flags & FLAG_FORCING != 0 {
        if r.take(4)? != FORC {
            return Err(Error::Format("forcing flag set but FORC marker missing".into()));
        }
        let len = r.u16()? as usize;
        let rng = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("generator id is not UTF-8".into()))?;
        let seed = r.u64()?;
        let spec = ForcingSpec {
            seed,
            k_low: r.f64()?,
            k_high: r.f64()?,
            target_l2: r.f64()?,
        };
        Some(ForcingMeta { rng, spec })
    } else {
        None
    };
    let expect = grid.len() * 32;
    if r.remaining() != expect {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {expect} for n = {n}",
            r.remaining()
        )));
    }
    let mut comps = [Vec::with_capacity(grid.len()), Vec::with_capacity(grid.len())];
    for comp in &mut comps {
        for _ in 0..grid.len() {
            let re = r.f64()?;
            let im = r.f64()?;
            comp.push(Complex::new(T::lit(re), T::lit(im)));
        }
    }
    let [a, b] = comps;
    let u = SpectralField::from_components(&grid, a, b, flags & FLAG_DIV_FREE != 0)?;
    Ok(Snapshot {
        state: FlowState { t: T::lit(t), u },
        forcing,
    })
}

pub fn write_snapshot<T: Real>(path: &Path, state: &FlowState<T>) -> Result<()> {
    write_atomic(path, &encode(state, None))
}

pub fn read_snapshot<T: Real>(path: &Path) -> Result<Snapshot<T>> {
    decode(&read_file(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn write_forcing<T: Real>(path: &Path, f: &SpectralField<T>, meta: &ForcingMeta) -> Result<()> {
    let state = FlowState { t: T::zero(), u: f.clone() };
    write_atomic(path, &encode(&state, Some(meta)))
}

/// Loads a forcing file; plain velocity snapshots are rejected.
pub fn read_forcing<T: Real>(path: &Path) -> Result<(SpectralField<T>, ForcingMeta)> {
    let s = read_snapshot::<T>(path)?;
    match s.forcing {
        Some(m) => Ok((s.state.u, m)),
        None => Err(Error::Format(format!("{} is a velocity snapshot, not a forcing file", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::random_field;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn sample(seed: u64, n: usize, t: f64) -> FlowState<f64> {
        let g = Grid2D::new(n).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        FlowState {
            t,
            u: random_field(&g, &mut rng, None, 0.5),
        }
    }

    fn bitwise_equal(a: &SpectralField<f64>, b: &SpectralField<f64>) -> bool {
        (0..2).all(|c| {
            a.component(c)
                .iter()
                .zip(b.component(c))
                .all(|(x, y)| x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits())
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), logn in 2u32..6, t in -1e6f64..1e6) {
            let s = sample(seed, 1 << logn, t);
            let back = decode::<f64>(&encode(&s, None)).unwrap();
            prop_assert_eq!(back.state.t.to_bits(), t.to_bits());
            prop_assert!(bitwise_equal(&back.state.u, &s.u));
            prop_assert!(back.state.u.is_divergence_free());
            prop_assert!(back.forcing.is_none());
        }
    }

    #[test]
    fn forcing_metadata_round_trips() {
        let s = sample(1, 16, 0.0);
        let meta = ForcingMeta::current(ForcingSpec {
            seed: 77,
            k_low: 2.0,
            k_high: 4.0,
            target_l2: 1.5,
        });
        let back = decode::<f64>(&encode(&s, Some(&meta))).unwrap();
        assert_eq!(back.forcing.unwrap(), meta);
        assert!(bitwise_equal(&back.state.u, &s.u));
    }

    #[test]
    fn header_layout() {
        let s = sample(2, 8, 2.5);
        let bytes = encode(&s, None);
        assert_eq!(&bytes[..5], b"NNSE1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[25..33].try_into().unwrap()), 2.5);
        assert_eq!(bytes[33], FLAG_DIV_FREE);
        assert_eq!(bytes.len(), 34 + 64 * 32);
        // first payload value is Re û1 at the zero mode
        assert_eq!(f64::from_le_bytes(bytes[34..42].try_into().unwrap()), 0.0);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let s = sample(3, 8, 0.0);
        let bytes = encode(&s, None);
        assert!(matches!(decode::<f64>(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<f64>(&bad), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[33] = 0x80;
        assert!(matches!(decode::<f64>(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip_and_forcing_check() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample(4, 8, 1.0);
        let p = dir.path().join("a.nnse");
        write_snapshot(&p, &s).unwrap();
        let back = read_snapshot::<f64>(&p).unwrap();
        assert!(bitwise_equal(&back.state.u, &s.u));
        assert!(matches!(read_forcing::<f64>(&p), Err(Error::Format(_))));
    }
}
