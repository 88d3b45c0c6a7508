//! Minimal CSV output. Floats are printed with 17 significant digits so
//! that every double round-trips.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Shortest exact scientific form with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// A value cell, or an empty cell for missing values.
pub fn cell(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub struct CsvWriter {
    path: PathBuf,
    out: BufWriter<File>,
    width: usize,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
            width: header.len(),
        };
        w.line(&header.iter().map(|s| s.to_string()).collect::<Vec<_>>())?;
        Ok(w)
    }

    fn line(&mut self, cells: &[String]) -> Result<()> {
        writeln!(self.out, "{}", cells.join(",")).map_err(|e| Error::io(&self.path, e))
    }

    pub fn row(&mut self, cells: &[String]) -> Result<()> {
        if cells.len() != self.width {
            return Err(Error::Format(format!(
                "{}: row has {} cells, header has {}",
                self.path.display(),
                cells.len(),
                self.width
            )));
        }
        self.line(cells)
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Writes a whole table at once.
pub fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = CsvWriter::create(path, header)?;
    for r in rows {
        w.row(&r)?;
    }
    w.finish()
}
