//! MatrixMarket I/O.
//!
//! Observed matrices use the `coordinate real general` flavour with 1-based
//! indices; dense matrices use `array real general` (column-major values).
//! Values are written in Rust's shortest round-trip form, so a write/read
//! cycle is exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::obsmat::{Entry, ObservedMatrix};

const COORDINATE_HEADER: &str = "%%MatrixMarket matrix coordinate real general";
const ARRAY_HEADER: &str = "%%MatrixMarket matrix array real general";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    Coordinate,
    Array,
}

struct Lines<R> {
    inner: std::io::Lines<BufReader<R>>,
    path: PathBuf,
    line: usize,
}

impl<R: Read> Lines<R> {
    fn new(reader: R, path: &Path) -> Self {
        Lines {
            inner: BufReader::new(reader).lines(),
            path: path.to_path_buf(),
            line: 0,
        }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.line,
            message: message.into(),
        }
    }

    fn next_raw(&mut self) -> Result<Option<String>> {
        match self.inner.next() {
            Some(line) => {
                self.line += 1;
                Ok(Some(line?))
            }
            None => Ok(None),
        }
    }

    /// Next line that is neither blank nor a `%` comment.
    fn next_data(&mut self) -> Result<Option<String>> {
        while let Some(line) = self.next_raw()? {
            let t = line.trim();
            if t.is_empty() || t.starts_with('%') {
                continue;
            }
            return Ok(Some(t.to_string()));
        }
        Ok(None)
    }

    fn parse<T: std::str::FromStr>(&self, token: Option<&str>, what: &str) -> Result<T> {
        let token = token.ok_or_else(|| self.err(format!("missing {what}")))?;
        token
            .parse()
            .map_err(|_| self.err(format!("cannot parse {what} from {token:?}")))
    }
}

fn read_header<R: Read>(lines: &mut Lines<R>) -> Result<Layout> {
    let header = lines
        .next_raw()?
        .ok_or_else(|| lines.err("empty file"))?;
    let words: Vec<String> = header
        .split_whitespace()
        .map(|w| w.to_ascii_lowercase())
        .collect();
    if words.first().map(String::as_str) != Some("%%matrixmarket") {
        return Err(lines.err("first line must start with %%MatrixMarket"));
    }
    if words.get(1).map(String::as_str) != Some("matrix") {
        return Err(lines.err("only the `matrix` object is supported"));
    }
    let layout = match words.get(2).map(String::as_str) {
        Some("coordinate") => Layout::Coordinate,
        Some("array") => Layout::Array,
        other => return Err(lines.err(format!("unsupported format {other:?}"))),
    };
    match words.get(3).map(String::as_str) {
        Some("real") | Some("integer") => {}
        other => return Err(lines.err(format!("unsupported field {other:?}"))),
    }
    if words.get(4).map(String::as_str) != Some("general") {
        return Err(lines.err("only `general` symmetry is supported"));
    }
    Ok(layout)
}

pub fn read_coordinate_from<R: Read>(reader: R, origin: &Path) -> Result<ObservedMatrix> {
    let mut lines = Lines::new(reader, origin);
    if read_header(&mut lines)? != Layout::Coordinate {
        return Err(lines.err("expected a coordinate matrix"));
    }
    let size = lines
        .next_data()?
        .ok_or_else(|| lines.err("missing size line"))?;
    let mut it = size.split_whitespace();
    let rows: usize = lines.parse(it.next(), "row count")?;
    let cols: usize = lines.parse(it.next(), "column count")?;
    let nnz: usize = lines.parse(it.next(), "entry count")?;
    if nnz > rows.saturating_mul(cols) {
        return Err(lines.err(format!("{nnz} entries do not fit a {rows}x{cols} matrix")));
    }

    let mut entries = Vec::with_capacity(nnz);
    while let Some(line) = lines.next_data()? {
        let mut it = line.split_whitespace();
        let i: usize = lines.parse(it.next(), "row index")?;
        let j: usize = lines.parse(it.next(), "column index")?;
        let v: f64 = lines.parse(it.next(), "value")?;
        if i == 0 || j == 0 || i > rows || j > cols {
            return Err(lines.err(format!("index ({i}, {j}) out of range (1-based)")));
        }
        entries.push(Entry::new(i - 1, j - 1, v));
    }
    if entries.len() != nnz {
        return Err(lines.err(format!(
            "header announces {nnz} entries, found {}",
            entries.len()
        )));
    }
    ObservedMatrix::new(rows, cols, entries)
}

pub fn read_coordinate(path: impl AsRef<Path>) -> Result<ObservedMatrix> {
    let path = path.as_ref();
    read_coordinate_from(File::open(path)?, path)
}

pub fn write_coordinate_to<W: Write>(mut out: W, obs: &ObservedMatrix) -> Result<()> {
    writeln!(out, "{COORDINATE_HEADER}")?;
    writeln!(out, "{} {} {}", obs.rows(), obs.cols(), obs.len())?;
    for e in obs.iter() {
        writeln!(out, "{} {} {}", e.row + 1, e.col + 1, e.value)?;
    }
    Ok(())
}

pub fn write_coordinate(path: impl AsRef<Path>, obs: &ObservedMatrix) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_coordinate_to(&mut out, obs)?;
    out.flush()?;
    Ok(())
}

pub fn read_array_from<R: Read>(reader: R, origin: &Path) -> Result<DMatrix<f64>> {
    let mut lines = Lines::new(reader, origin);
    if read_header(&mut lines)? != Layout::Array {
        return Err(lines.err("expected an array matrix"));
    }
    let size = lines
        .next_data()?
        .ok_or_else(|| lines.err("missing size line"))?;
    let mut it = size.split_whitespace();
    let rows: usize = lines.parse(it.next(), "row count")?;
    let cols: usize = lines.parse(it.next(), "column count")?;
    let mut values = Vec::with_capacity(rows * cols);
    while let Some(line) = lines.next_data()? {
        for token in line.split_whitespace() {
            values.push(lines.parse::<f64>(Some(token), "value")?);
        }
    }
    if values.len() != rows * cols {
        return Err(lines.err(format!(
            "expected {} values, found {}",
            rows * cols,
            values.len()
        )));
    }
    Ok(DMatrix::from_vec(rows, cols, values))
}

pub fn read_array(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    read_array_from(File::open(path)?, path)
}

pub fn write_array_to<W: Write>(mut out: W, dense: &DMatrix<f64>) -> Result<()> {
    writeln!(out, "{ARRAY_HEADER}")?;
    writeln!(out, "{} {}", dense.nrows(), dense.ncols())?;
    for v in dense.iter() {
        writeln!(out, "{v}")?;
    }
    Ok(())
}

pub fn write_array(path: impl AsRef<Path>, dense: &DMatrix<f64>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_array_to(&mut out, dense)?;
    out.flush()?;
    Ok(())
}
