//! File formats: matrix and kernel CSV, report CSV, and binary PGM images.
//!
//! Matrix CSV starts with a `rows,cols` line followed by one line per row;
//! kernel CSV starts with `channels,size` followed by `channels × size` lines
//! of `size` weights. Values are written with 17 significant digits so a
//! round trip is exact.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use fla_core::{DwcKernel, Grid, Matrix};

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(csv::WriterBuilder::new()
        .flexible(true)
        .from_writer(BufWriter::new(file)))
}

fn full_precision(x: f64) -> String {
    format!("{x:.16e}")
}

/// Two header numbers and the numeric lines that follow them.
type Table = ((usize, usize), Vec<Vec<f64>>);

fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = reader(path)?;
    let mut records = rdr.records();
    let header = records
        .next()
        .with_context(|| format!("{}: empty file", path.display()))?
        .with_context(|| format!("{}: unreadable header", path.display()))?;
    ensure!(header.len() == 2, "{}: header must have two fields", path.display());
    let dim = |i: usize| -> Result<usize> {
        header[i]
            .parse()
            .with_context(|| format!("{}: bad header field {:?}", path.display(), &header[i]))
    };
    let dims = (dim(0)?, dim(1)?);
    let mut rows = Vec::new();
    for (line, rec) in records.enumerate() {
        let rec = rec.with_context(|| format!("{}: line {}", path.display(), line + 2))?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("{}: line {} is not numeric", path.display(), line + 2))?;
        rows.push(row);
    }
    Ok((dims, rows))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let ((rows, cols), lines) = read_table(path)?;
    ensure!(
        lines.len() == rows,
        "{}: header says {rows} rows, found {}",
        path.display(),
        lines.len()
    );
    let mut data = Vec::with_capacity(rows * cols);
    for (r, line) in lines.into_iter().enumerate() {
        ensure!(
            line.len() == cols,
            "{}: row {r} has {} values, expected {cols}",
            path.display(),
            line.len()
        );
        data.extend(line);
    }
    Ok(Matrix::new(rows, cols, data)?)
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([m.rows().to_string(), m.cols().to_string()])?;
    for r in 0..m.rows() {
        w.write_record(m.row(r).iter().map(|&x| full_precision(x)))?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn read_kernel(path: &Path) -> Result<DwcKernel> {
    let ((channels, size), lines) = read_table(path)?;
    ensure!(
        lines.len() == channels * size,
        "{}: expected {} weight lines for {channels} channels of size {size}, found {}",
        path.display(),
        channels * size,
        lines.len()
    );
    let mut weights = Vec::with_capacity(channels * size * size);
    for (i, line) in lines.into_iter().enumerate() {
        ensure!(
            line.len() == size,
            "{}: weight line {i} needs {size} values",
            path.display()
        );
        weights.extend(line);
    }
    Ok(DwcKernel::new(channels, size, weights)?)
}

pub fn write_kernel(path: &Path, kernel: &DwcKernel) -> Result<()> {
    let mut w = writer(path)?;
    let size = kernel.size();
    w.write_record([kernel.channels().to_string(), size.to_string()])?;
    for line in kernel.weights().chunks(size) {
        w.write_record(line.iter().map(|&x| full_precision(x)))?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Writes a header and string rows as CSV.
pub fn write_report<R, I>(path: &Path, header: &[&str], rows: R) -> Result<()>
where
    R: IntoIterator<Item = I>,
    I: IntoIterator<Item = String>,
{
    let mut w = writer(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Maps `m` to 8-bit gray levels, min → 0 and max → 255. A constant image
/// maps to mid gray (128).
pub fn gray_levels(m: &Matrix) -> Vec<u8> {
    let data = m.as_slice();
    let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    });
    if data.is_empty() || hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![128; data.len()];
    }
    data.iter()
        .map(|&x| ((x - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Binary PGM (P5), one pixel per matrix entry, row-major.
pub fn write_pgm(path: &Path, m: &Matrix) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?);
    write!(out, "P5\n{} {}\n255\n", m.cols(), m.rows())?;
    out.write_all(&gray_levels(m))?;
    out.flush()
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Parses `HxW`.
pub fn parse_grid(s: &str) -> Result<Grid> {
    let Some((h, w)) = s.split_once(['x', 'X']) else {
        bail!("grid must look like HxW, got {s:?}");
    };
    let h: usize = h.trim().parse().with_context(|| format!("bad grid height in {s:?}"))?;
    let w: usize = w.trim().parse().with_context(|| format!("bad grid width in {s:?}"))?;
    ensure!(h > 0 && w > 0, "grid sides must be positive, got {s:?}");
    Ok(Grid::new(h, w))
}
