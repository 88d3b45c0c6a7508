//! Observation stream files.
//!
//! Layout (little endian): magic `NNSO1`, `n` (u32), dealias numerator and
//! denominator (u32), domain length (f64), cutoff radius `1/h` (f64), number
//! of observed modes `M` (u32) and their storage indices (`M` x u32). Records
//! follow back to back until end of file: time (f64) then `M` pairs of
//! complex coefficients `(û1, û2)`, each as `(re, im)` f64.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex;

use super::{read_file, Reader};
use crate::error::{Error, Result};
use crate::field::Cutoff;
use crate::grid::Grid2D;
use crate::observation::{LowModes, ObservationLayout, ObservationStream};
use crate::scalar::Real;

pub const MAGIC: &[u8; 5] = b"NNSO1";

fn header<T: Real>(layout: &ObservationLayout<T>) -> Vec<u8> {
    let g = layout.grid();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(g.n() as u32).to_le_bytes());
    let (num, den) = g.dealias();
    out.extend_from_slice(&num.to_le_bytes());
    out.extend_from_slice(&den.to_le_bytes());
    out.extend_from_slice(&g.domain_length().as_f64().to_le_bytes());
    out.extend_from_slice(&layout.cutoff().radius().as_f64().to_le_bytes());
    out.extend_from_slice(&(layout.len() as u32).to_le_bytes());
    for &i in layout.indices() {
        out.extend_from_slice(&(i as u32).to_le_bytes());
    }
    out
}

fn record<T: Real>(t: T, modes: &LowModes<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(&t.as_f64().to_le_bytes());
    for pair in modes.coeffs() {
        for z in pair {
            out.extend_from_slice(&z.re.as_f64().to_le_bytes());
            out.extend_from_slice(&z.im.as_f64().to_le_bytes());
        }
    }
}

pub fn encode<T: Real>(stream: &ObservationStream<T>) -> Vec<u8> {
    let mut out = header(stream.layout());
    for r in stream.records() {
        record(r.t, &r.modes, &mut out);
    }
    out
}

pub fn decode<T: Real>(bytes: &[u8], source: &str) -> Result<ObservationStream<T>> {
    let mut r = Reader::new(bytes);
    if r.take(5)? != MAGIC {
        return Err(Error::Format("bad magic, not an NNSO1 observation file".into()));
    }
    let n = r.u32()? as usize;
    let dealias = (r.u32()?, r.u32()?);
    let length = r.f64()?;
    let radius = r.f64()?;
    let m = r.u32()? as usize;
    let grid = Grid2D::with_domain(n, dealias, T::lit(length)).map_err(|e| Error::Format(e.to_string()))?;
    let cutoff = Cutoff::from_h(T::lit(radius.recip()))?;
    let layout = ObservationLayout::new(&grid, cutoff)?;
    let mut indices = Vec::with_capacity(m);
    for _ in 0..m {
        indices.push(r.u32()? as usize);
    }
    if indices != layout.indices() {
        return Err(Error::Format(format!(
            "stored mode list ({m} modes) does not match the cutoff 1/h = {radius} on n = {n}"
        )));
    }
    let size = 8 + m * 32;
    if r.remaining() % size != 0 {
        return Err(Error::Format(format!(
            "trailing {} bytes after the last complete record",
            r.remaining() % size
        )));
    }
    let mut stream = ObservationStream::new(layout.clone(), source);
    while r.remaining() > 0 {
        let t = r.f64()?;
        let mut coeffs = Vec::with_capacity(m);
        for _ in 0..m {
            let mut pair = [Complex::new(T::zero(), T::zero()); 2];
            for z in &mut pair {
                *z = Complex::new(T::lit(r.f64()?), T::lit(r.f64()?));
            }
            coeffs.push(pair);
        }
        let at = r.pos();
        stream
            .push(T::lit(t), LowModes::from_coeffs(&layout, coeffs)?)
            .map_err(|e| Error::Format(format!("record ending at byte {at}: {e}")))?;
    }
    Ok(stream)
}

pub fn read_observations<T: Real>(path: &Path) -> Result<ObservationStream<T>> {
    let source = path.display().to_string();
    decode(&read_file(path)?, &source).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{source}: {m}")),
        e => e,
    })
}

/// Append-only writer; records become readable as soon as they are flushed.
pub struct ObservationWriter<T: Real> {
    path: PathBuf,
    out: BufWriter<File>,
    layout: Arc<ObservationLayout<T>>,
    buf: Vec<u8>,
}

impl<T: Real> ObservationWriter<T> {
    pub fn create(path: &Path, layout: Arc<ObservationLayout<T>>) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(f);
        out.write_all(&header(&layout)).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out,
            layout,
            buf: Vec::new(),
        })
    }

    pub fn push(&mut self, t: T, modes: &LowModes<T>) -> Result<()> {
        if !Arc::ptr_eq(modes.layout(), &self.layout) && modes.layout().indices() != self.layout.indices() {
            return Err(Error::GridMismatch);
        }
        self.buf.clear();
        record(t, modes, &mut self.buf);
        self.out.write_all(&self.buf).map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        self.out.get_ref().sync_all().map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::random_field;
    use rand::SeedableRng;

    fn stream() -> ObservationStream<f64> {
        let g = Grid2D::new(16).unwrap();
        let layout = ObservationLayout::new(&g, Cutoff::from_h(0.25).unwrap()).unwrap();
        let mut s = ObservationStream::new(layout, "test");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for k in 0..5 {
            let u = random_field(&g, &mut rng, None, 0.0);
            s.observe_and_push(0.1 * k as f64, &u).unwrap();
        }
        s
    }

    #[test]
    fn encode_decode_is_exact() {
        let s = stream();
        let back = decode::<f64>(&encode(&s), "x").unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in s.records().iter().zip(back.records()) {
            assert_eq!(a.t.to_bits(), b.t.to_bits());
            assert_eq!(a.modes.coeffs(), b.modes.coeffs());
        }
    }

    #[test]
    fn writer_matches_encoder() {
        let s = stream();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("obs.nnso");
        let mut w = ObservationWriter::create(&p, s.layout().clone()).unwrap();
        for r in s.records() {
            w.push(r.t, &r.modes).unwrap();
        }
        w.finish().unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), encode(&s));
        assert_eq!(read_observations::<f64>(&p).unwrap().len(), 5);
    }

    #[test]
    fn truncated_record_is_rejected() {
        let bytes = encode(&stream());
        assert!(matches!(decode::<f64>(&bytes[..bytes.len() - 3], "x"), Err(Error::Format(_))));
    }
}
