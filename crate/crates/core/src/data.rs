//! Dataset containers, validation, and file formats.
//!
//! A [`FunctionalDataset`] holds `S` simulator runs observed at `n` shared
//! index points: per-point index coordinates and local attributes, per-run
//! global attributes, and the `n x S` response matrix.
//!
//! Two on-disk formats are supported:
//!
//! * `csv` — a main file with header `u1..ud,x1..xq,y1..yS` and one row per
//!   index point, plus a sidecar `<stem>.global.csv` with header `z1..zp`
//!   and one row per simulation. Responses are per-location and global
//!   attributes per-simulation, so mixing them in one table would duplicate
//!   the globals n-fold. Values round-trip through shortest-exact decimal
//!   formatting. Lines starting with `#` are ignored on load.
//! * `bin` — a 64-byte little-endian header (magic, version, n, S, d, q, p,
//!   padding), then row-major f64 matrices in the order locations,
//!   local_attrs, global_attrs, responses. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::binfmt;
use crate::error::{Error, Result};

const DATASET_MAGIC: &[u8; 8] = b"GPSKDATA";
const DATASET_VERSION: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    Bin,
}

/// Responses and attributes for `S` simulations over `n` index points.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalDataset {
    /// `n x d` index points `u_1..u_n`.
    pub locations: DMatrix<f64>,
    /// `n x q` local attributes; row `i` is `x(u_i)^T`.
    pub local_attrs: DMatrix<f64>,
    /// `S x p` global attributes; row `s` is `z_s^T`.
    pub global_attrs: DMatrix<f64>,
    /// `n x S` responses; column `s` is `y_s`.
    pub responses: DMatrix<f64>,
}

impl FunctionalDataset {
    pub fn new(
        locations: DMatrix<f64>,
        local_attrs: DMatrix<f64>,
        global_attrs: DMatrix<f64>,
        responses: DMatrix<f64>,
    ) -> Result<Self> {
        let ds = FunctionalDataset {
            locations,
            local_attrs,
            global_attrs,
            responses,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.locations.nrows()
    }

    pub fn d(&self) -> usize {
        self.locations.ncols()
    }

    pub fn q(&self) -> usize {
        self.local_attrs.ncols()
    }

    pub fn p(&self) -> usize {
        self.global_attrs.ncols()
    }

    pub fn s(&self) -> usize {
        self.responses.ncols()
    }

    /// Checks shapes, finiteness, and distinctness of index points.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::Dimension("dataset has n = 0 index points".into()));
        }
        if self.s() == 0 {
            return Err(Error::Dimension("dataset has S = 0 simulations".into()));
        }
        if self.local_attrs.nrows() != n {
            return Err(Error::Dimension(format!(
                "local_attrs has {} rows, expected n = {}",
                self.local_attrs.nrows(),
                n
            )));
        }
        if self.responses.nrows() != n {
            return Err(Error::Dimension(format!(
                "responses has {} rows, expected n = {}",
                self.responses.nrows(),
                n
            )));
        }
        if self.global_attrs.nrows() != self.s() {
            return Err(Error::Dimension(format!(
                "global_attrs has {} rows, expected S = {}",
                self.global_attrs.nrows(),
                self.s()
            )));
        }
        check_finite(&self.locations, "locations")?;
        check_finite(&self.local_attrs, "local_attrs")?;
        check_finite(&self.global_attrs, "global_attrs")?;
        check_finite(&self.responses, "responses")?;
        check_distinct_rows(&self.locations)?;
        Ok(())
    }
}

fn check_finite(mat: &DMatrix<f64>, name: &'static str) -> Result<()> {
    for j in 0..mat.ncols() {
        for i in 0..mat.nrows() {
            if !mat[(i, j)].is_finite() {
                return Err(Error::NonFinite {
                    matrix: name,
                    row: i,
                    col: j,
                });
            }
        }
    }
    Ok(())
}

/// Rejects exactly coincident index points (exact coordinate equality only).
fn check_distinct_rows(locations: &DMatrix<f64>) -> Result<()> {
    let n = locations.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        for c in 0..locations.ncols() {
            match locations[(a, c)].partial_cmp(&locations[(b, c)]) {
                Some(std::cmp::Ordering::Equal) | None => continue,
                Some(o) => return o,
            }
        }
        std::cmp::Ordering::Equal
    });
    for w in order.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (0..locations.ncols()).all(|c| locations[(a, c)] == locations[(b, c)]) {
            return Err(Error::DuplicateLocations {
                first: a.min(b),
                second: a.max(b),
            });
        }
    }
    Ok(())
}

/// How predictive draws treat the GP term at new index points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictionMode {
    /// `w*` is a fresh GP realization, independent of every training run.
    NewSimulation,
    /// `w*` is kriged against the sketched data of training run `s`.
    WithinSimulation(usize),
}

/// New index points and attributes at which to predict.
#[derive(Clone, Debug)]
pub struct PredictionRequest {
    /// `n* x d` new index points.
    pub new_locations: DMatrix<f64>,
    /// `n* x q` local attributes at the new points.
    pub new_local_attrs: DMatrix<f64>,
    /// `S* x p` global attributes, one row per requested simulation.
    pub new_global_attrs: DMatrix<f64>,
    pub mode: PredictionMode,
}

impl PredictionRequest {
    pub fn n_star(&self) -> usize {
        self.new_locations.nrows()
    }

    pub fn s_star(&self) -> usize {
        self.new_global_attrs.nrows()
    }

    /// Column counts must match the training dataset's d, q, p.
    pub fn validate_against(&self, train: &FunctionalDataset) -> Result<()> {
        if self.new_locations.ncols() != train.d() {
            return Err(Error::Dimension(format!(
                "request has d = {}, training data has d = {}",
                self.new_locations.ncols(),
                train.d()
            )));
        }
        if self.new_local_attrs.ncols() != train.q() {
            return Err(Error::Dimension(format!(
                "request has q = {}, training data has q = {}",
                self.new_local_attrs.ncols(),
                train.q()
            )));
        }
        if self.new_global_attrs.ncols() != train.p() {
            return Err(Error::Dimension(format!(
                "request has p = {}, training data has p = {}",
                self.new_global_attrs.ncols(),
                train.p()
            )));
        }
        if self.new_local_attrs.nrows() != self.n_star() {
            return Err(Error::Dimension(
                "request local_attrs rows differ from new_locations rows".into(),
            ));
        }
        if self.n_star() == 0 || self.s_star() == 0 {
            return Err(Error::Dimension("empty prediction request".into()));
        }
        if let PredictionMode::WithinSimulation(s) = self.mode {
            if s >= train.s() {
                return Err(Error::InvalidArgument(format!(
                    "within-simulation index {s} out of range (S = {})",
                    train.s()
                )));
            }
        }
        check_finite(&self.new_locations, "new_locations")?;
        check_finite(&self.new_local_attrs, "new_local_attrs")?;
        check_finite(&self.new_global_attrs, "new_global_attrs")?;
        Ok(())
    }

    /// Builds a request from a dataset file's locations/attributes
    /// (responses, if any, are ignored).
    pub fn from_dataset(ds: &FunctionalDataset, mode: PredictionMode) -> Self {
        PredictionRequest {
            new_locations: ds.locations.clone(),
            new_local_attrs: ds.local_attrs.clone(),
            new_global_attrs: ds.global_attrs.clone(),
            mode,
        }
    }
}

pub fn load_dataset(path: &Path, format: FileFormat) -> Result<FunctionalDataset> {
    let ds = match format {
        FileFormat::Bin => load_bin(path)?,
        FileFormat::Csv => load_csv(path)?,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &FunctionalDataset, path: &Path, format: FileFormat) -> Result<()> {
    match format {
        FileFormat::Bin => save_bin(ds, path),
        FileFormat::Csv => save_csv(ds, path),
    }
}

/// Sidecar path holding the per-simulation global attributes of a csv
/// dataset: `train.csv` -> `train.global.csv`.
pub fn global_sidecar_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.global.csv"))
}

fn save_bin(ds: &FunctionalDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    binfmt::write_u64(&mut w, path, binfmt::magic(DATASET_MAGIC))?;
    binfmt::write_u64(&mut w, path, DATASET_VERSION)?;
    for v in [ds.n(), ds.s(), ds.d(), ds.q(), ds.p()] {
        binfmt::write_u64(&mut w, path, v as u64)?;
    }
    binfmt::write_u64(&mut w, path, 0)?; // padding to 64 bytes
    binfmt::write_matrix(&mut w, path, &ds.locations)?;
    binfmt::write_matrix(&mut w, path, &ds.local_attrs)?;
    binfmt::write_matrix(&mut w, path, &ds.global_attrs)?;
    binfmt::write_matrix(&mut w, path, &ds.responses)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn load_bin(path: &Path) -> Result<FunctionalDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    binfmt::expect_magic(&mut r, path, binfmt::magic(DATASET_MAGIC), "dataset")?;
    let version = binfmt::read_u64(&mut r, path)?;
    if version != DATASET_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let n = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "n")?;
    let s = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "S")?;
    let d = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "d")?;
    let q = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "q")?;
    let p = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "p")?;
    let _pad = binfmt::read_u64(&mut r, path)?;
    Ok(FunctionalDataset {
        locations: binfmt::read_matrix(&mut r, path, n, d)?,
        local_attrs: binfmt::read_matrix(&mut r, path, n, q)?,
        global_attrs: binfmt::read_matrix(&mut r, path, s, p)?,
        responses: binfmt::read_matrix(&mut r, path, n, s)?,
    })
}

fn save_csv(ds: &FunctionalDataset, path: &Path) -> Result<()> {
    let mut header = Vec::new();
    header.extend((1..=ds.d()).map(|i| format!("u{i}")));
    header.extend((1..=ds.q()).map(|i| format!("x{i}")));
    header.extend((1..=ds.s()).map(|i| format!("y{i}")));
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..ds.n() {
        let mut rec = Vec::with_capacity(header.len());
        for j in 0..ds.d() {
            rec.push(format_f64(ds.locations[(i, j)]));
        }
        for j in 0..ds.q() {
            rec.push(format_f64(ds.local_attrs[(i, j)]));
        }
        for j in 0..ds.s() {
            rec.push(format_f64(ds.responses[(i, j)]));
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let side = global_sidecar_path(path);
    let mut gw = csv::Writer::from_path(&side).map_err(|e| csv_err(&side, e))?;
    let gheader: Vec<String> = (1..=ds.p()).map(|i| format!("z{i}")).collect();
    gw.write_record(&gheader).map_err(|e| csv_err(&side, e))?;
    for s in 0..ds.s() {
        let rec: Vec<String> = (0..ds.p())
            .map(|j| format_f64(ds.global_attrs[(s, j)]))
            .collect();
        gw.write_record(&rec).map_err(|e| csv_err(&side, e))?;
    }
    gw.flush().map_err(|e| Error::io(&side, e))
}

fn load_csv(path: &Path) -> Result<FunctionalDataset> {
    let mut rdr = csv_reader(path)?;
    let header = rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    let d = header.iter().filter(|h| h.starts_with('u')).count();
    let q = header.iter().filter(|h| h.starts_with('x')).count();
    let s = header.iter().filter(|h| h.starts_with('y')).count();
    if d == 0 || s == 0 || d + q + s != header.len() {
        return Err(Error::format(
            path,
            "csv header must name columns u1..ud, x1..xq, y1..yS",
        ));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != header.len() {
            return Err(Error::format(
                path,
                format!("row {i} has {} fields, expected {}", rec.len(), header.len()),
            ));
        }
        let vals = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::format(path, format!("row {i}: bad number {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(vals);
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::format(path, "csv has no data rows"));
    }
    let locations = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let local_attrs = DMatrix::from_fn(n, q, |i, j| rows[i][d + j]);
    let responses = DMatrix::from_fn(n, s, |i, j| rows[i][d + q + j]);

    let side = global_sidecar_path(path);
    let mut grdr = csv_reader(&side)?;
    let gheader = grdr
        .headers()
        .map_err(|e| csv_err(&side, e))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    let p = gheader.len();
    let mut grows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in grdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(&side, e))?;
        let vals = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::format(&side, format!("row {i}: bad number {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        grows.push(vals);
    }
    if grows.len() != s {
        return Err(Error::format(
            &side,
            format!("sidecar has {} rows, expected S = {s}", grows.len()),
        ));
    }
    let global_attrs = DMatrix::from_fn(s, p, |i, j| grows[i][j]);
    Ok(FunctionalDataset {
        locations,
        local_attrs,
        global_attrs,
        responses,
    })
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => {
            if let csv::ErrorKind::Io(io) = e.into_kind() {
                Error::io(path, io)
            } else {
                unreachable!()
            }
        }
        _ => Error::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        },
    }
}

/// Shortest decimal representation that parses back to the same f64.
fn format_f64(v: f64) -> String {
    format!("{v}")
}
