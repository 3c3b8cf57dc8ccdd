//! Multi-center sketch computation without raw-data exchange.
//!
//! Each center holds a contiguous row block of the global dataset. Given the
//! shared `(seed, m, n)` of a sketch, a center regenerates exactly its column
//! block of the global sketching matrix (the counter-addressed generator
//! makes the blocks bit-identical to the centralized matrix), multiplies its
//! private rows, and releases only the `m`-dimensional partial products. The
//! coordinator sums partials in ascending center order; with compensated
//! accumulation on both paths the aggregate agrees with the centralized
//! sketch at the ulp level.
//!
//! Raw responses and local attributes never leave a shard. Index-point
//! coordinates and the per-simulation global attributes are treated as
//! shared: the coordinator needs them to build `Phi K(theta) Phi^T` and the
//! sketched design, and the privacy claim covers the sampling units, not the
//! sampling frame.
//!
//! Messages travel as files (one per center per sketch) or as length-prefixed
//! frames over a TCP stream; both carry the same 64-byte header, payload
//! matrices, and a trailing CRC-64/XZ checksum.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use nalgebra::{DMatrix, DVector};

use crate::data::FunctionalDataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{neumaier_dot, NeumaierSum};
use crate::sketch::{gaussian_row_block, sketch_stream, SketchedData};

const MESSAGE_MAGIC: u32 = u32::from_le_bytes(*b"GPFM");
const MESSAGE_VERSION: u32 = 1;
const SHARD_MAGIC: &[u8; 8] = b"GPSKSHRD";
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

/// One center's private slice of the global dataset: rows
/// `[offset, offset + n_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterShard {
    pub center_id: u64,
    pub offset: usize,
    pub locations: DMatrix<f64>,
    pub local_attrs: DMatrix<f64>,
    pub responses: DMatrix<f64>,
}

impl CenterShard {
    pub fn n_j(&self) -> usize {
        self.responses.nrows()
    }

    pub fn s(&self) -> usize {
        self.responses.ncols()
    }

    pub fn q(&self) -> usize {
        self.local_attrs.ncols()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        use crate::binfmt;
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        binfmt::write_u64(&mut w, path, binfmt::magic(SHARD_MAGIC))?;
        binfmt::write_u64(&mut w, path, 1)?;
        for v in [
            self.center_id,
            self.offset as u64,
            self.n_j() as u64,
            self.locations.ncols() as u64,
            self.q() as u64,
            self.s() as u64,
        ] {
            binfmt::write_u64(&mut w, path, v)?;
        }
        binfmt::write_matrix(&mut w, path, &self.locations)?;
        binfmt::write_matrix(&mut w, path, &self.local_attrs)?;
        binfmt::write_matrix(&mut w, path, &self.responses)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        use crate::binfmt;
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        binfmt::expect_magic(&mut r, path, binfmt::magic(SHARD_MAGIC), "center shard")?;
        let version = binfmt::read_u64(&mut r, path)?;
        if version != 1 {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let center_id = binfmt::read_u64(&mut r, path)?;
        let offset = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "offset")?;
        let n_j = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "n_j")?;
        let d = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "d")?;
        let q = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "q")?;
        let s = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "S")?;
        Ok(CenterShard {
            center_id,
            offset,
            locations: binfmt::read_matrix(&mut r, path, n_j, d)?,
            local_attrs: binfmt::read_matrix(&mut r, path, n_j, q)?,
            responses: binfmt::read_matrix(&mut r, path, n_j, s)?,
        })
    }
}

/// Splits a dataset into contiguous shards with the given row counts.
pub fn split_dataset(ds: &FunctionalDataset, rows_per_center: &[usize]) -> Result<Vec<CenterShard>> {
    let total: usize = rows_per_center.iter().sum();
    if total != ds.n() {
        return Err(Error::Protocol(format!(
            "shard rows sum to {total}, dataset has n = {}",
            ds.n()
        )));
    }
    let mut shards = Vec::with_capacity(rows_per_center.len());
    let mut offset = 0;
    for (id, &rows) in rows_per_center.iter().enumerate() {
        shards.push(CenterShard {
            center_id: id as u64,
            offset,
            locations: ds.locations.rows(offset, rows).into_owned(),
            local_attrs: ds.local_attrs.rows(offset, rows).into_owned(),
            responses: ds.responses.rows(offset, rows).into_owned(),
        });
        offset += rows;
    }
    Ok(shards)
}

/// Parameters every center must agree on for sketch `h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlobalSketchSpec {
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub h: usize,
}

/// The partial products one center releases for one sketch.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialSketchMessage {
    pub center_id: u64,
    pub h: usize,
    pub m: usize,
    pub n_j: usize,
    pub offset: usize,
    /// `m x S`: `Phi^{(j)} y_s^{(j)}` per simulation.
    pub partial_y: DMatrix<f64>,
    /// `m x q`: `Phi^{(j)} X^{(j)}`.
    pub partial_x: DMatrix<f64>,
    /// `Phi^{(j)} 1_{n_j}`.
    pub partial_ones: DVector<f64>,
}

/// Computes a center's partial sketch by regenerating exactly its column
/// block of the global sketching matrix. Raw rows never leave this function.
pub fn center_compute_partial(
    shard: &CenterShard,
    spec: &GlobalSketchSpec,
) -> Result<PartialSketchMessage> {
    if shard.offset + shard.n_j() > spec.n {
        return Err(Error::Protocol(format!(
            "center {} rows [{}, {}) exceed global n = {}",
            shard.center_id,
            shard.offset,
            shard.offset + shard.n_j(),
            spec.n
        )));
    }
    if spec.m == 0 || spec.m >= spec.n {
        return Err(Error::Protocol(format!(
            "sketch dimensions need 1 <= m < n, got m = {}, n = {}",
            spec.m, spec.n
        )));
    }
    let n_j = shard.n_j();
    let s = shard.s();
    let q = shard.q();
    let stream = sketch_stream(spec.seed);
    let rows: Vec<(Vec<f64>, Vec<f64>, f64)> = exec::map_range(spec.m, |i| {
        let mut block = vec![0.0; n_j];
        gaussian_row_block(
            &stream,
            spec.n,
            i,
            shard.offset..shard.offset + n_j,
            &mut block,
        );
        let mut y_row = vec![0.0; s];
        for sim in 0..s {
            y_row[sim] = neumaier_dot(&block, shard.responses.column(sim).as_slice());
        }
        let mut x_row = vec![0.0; q];
        for j in 0..q {
            x_row[j] = neumaier_dot(&block, shard.local_attrs.column(j).as_slice());
        }
        let mut ones = NeumaierSum::new();
        for v in &block {
            ones.add(*v);
        }
        (y_row, x_row, ones.total())
    });
    let mut partial_y = DMatrix::zeros(spec.m, s);
    let mut partial_x = DMatrix::zeros(spec.m, q);
    let mut partial_ones = DVector::zeros(spec.m);
    for (i, (y_row, x_row, ones)) in rows.into_iter().enumerate() {
        for (sim, v) in y_row.into_iter().enumerate() {
            partial_y[(i, sim)] = v;
        }
        for (j, v) in x_row.into_iter().enumerate() {
            partial_x[(i, j)] = v;
        }
        partial_ones[i] = ones;
    }
    Ok(PartialSketchMessage {
        center_id: shard.center_id,
        h: spec.h,
        m: spec.m,
        n_j,
        offset: shard.offset,
        partial_y,
        partial_x,
        partial_ones,
    })
}

/// Sums partial messages into the full-data sketch for a dataset of `n`
/// rows.
///
/// Messages are sorted by center id before summing, so arrival order never
/// changes the result. Offsets must tile `[0, n)` with one message per
/// center (a missing center leaves a gap and is refused); the attached
/// power is `n / m`.
pub fn aggregate_partials(messages: &[PartialSketchMessage], n: usize) -> Result<SketchedData> {
    if messages.is_empty() {
        return Err(Error::Protocol("no partial messages".into()));
    }
    let mut sorted: Vec<&PartialSketchMessage> = messages.iter().collect();
    sorted.sort_by_key(|msg| msg.center_id);
    for w in sorted.windows(2) {
        if w[0].center_id == w[1].center_id {
            return Err(Error::Protocol(format!(
                "duplicate message from center {}",
                w[0].center_id
            )));
        }
    }
    let first = sorted[0];
    let (h, m) = (first.h, first.m);
    let s = first.partial_y.ncols();
    let q = first.partial_x.ncols();
    for msg in &sorted {
        if msg.h != h || msg.m != m || msg.partial_y.ncols() != s || msg.partial_x.ncols() != q {
            return Err(Error::Protocol(format!(
                "center {} disagrees on (h, m, S, q)",
                msg.center_id
            )));
        }
    }
    // offsets must partition [0, n)
    let mut spans: Vec<(usize, usize)> = sorted.iter().map(|msg| (msg.offset, msg.n_j)).collect();
    spans.sort_unstable();
    let mut expected = 0;
    for (off, len) in &spans {
        if *off != expected {
            return Err(Error::Protocol(format!(
                "row blocks do not tile the data: gap or overlap at row {expected} (next block starts at {off})"
            )));
        }
        expected += len;
    }
    if expected != n {
        return Err(Error::Protocol(format!(
            "row blocks cover {expected} rows, dataset has n = {n} (missing center?)"
        )));
    }

    let sum_over = |extract: &dyn Fn(&PartialSketchMessage) -> f64| -> f64 {
        let mut acc = NeumaierSum::new();
        for msg in &sorted {
            acc.add(extract(msg));
        }
        acc.total()
    };
    let y_sk = DMatrix::from_fn(m, s, |i, j| sum_over(&|msg| msg.partial_y[(i, j)]));
    let x_sk = DMatrix::from_fn(m, q, |i, j| sum_over(&|msg| msg.partial_x[(i, j)]));
    let ones_sk = DVector::from_fn(m, |i, _| sum_over(&|msg| msg.partial_ones[i]));
    Ok(SketchedData {
        y_sk,
        x_sk,
        ones_sk,
        power: n as f64 / m as f64,
    })
}

impl PartialSketchMessage {
    fn payload_bytes(&self) -> Vec<u8> {
        let s = self.partial_y.ncols();
        let q = self.partial_x.ncols();
        let mut buf = Vec::with_capacity(64 + (self.m * (s + q + 1)) * 8);
        buf.extend_from_slice(&MESSAGE_MAGIC.to_le_bytes());
        buf.extend_from_slice(&MESSAGE_VERSION.to_le_bytes());
        for v in [
            self.center_id,
            self.h as u64,
            self.m as u64,
            s as u64,
            q as u64,
            self.n_j as u64,
            self.offset as u64,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..self.m {
            for j in 0..s {
                buf.extend_from_slice(&self.partial_y[(i, j)].to_le_bytes());
            }
        }
        for i in 0..self.m {
            for j in 0..q {
                buf.extend_from_slice(&self.partial_x[(i, j)].to_le_bytes());
            }
        }
        for i in 0..self.m {
            buf.extend_from_slice(&self.partial_ones[i].to_le_bytes());
        }
        buf
    }

    /// Serializes as header + payload + trailing CRC-64/XZ checksum.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = self.payload_bytes();
        let crc = CRC64.checksum(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |msg: &str| Error::Protocol(format!("partial sketch message: {msg}"));
        if bytes.len() < 72 {
            return Err(err("truncated header"));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(crc_bytes.try_into().unwrap());
        let magic = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        if magic != MESSAGE_MAGIC {
            return Err(err("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != MESSAGE_VERSION {
            return Err(err("unsupported version"));
        }
        let mut u = [0u64; 7];
        for (k, v) in u.iter_mut().enumerate() {
            let start = 8 + k * 8;
            *v = u64::from_le_bytes(bytes[start..start + 8].try_into().unwrap());
        }
        let center_id = u[0];
        if CRC64.checksum(body) != stored {
            return Err(Error::Checksum { center_id });
        }
        let h = u[1] as usize;
        let m = u[2] as usize;
        let s = u[3] as usize;
        let q = u[4] as usize;
        let n_j = u[5] as usize;
        let offset = u[6] as usize;
        let expected_len = 64 + m * (s + q + 1) * 8 + 8;
        if bytes.len() != expected_len {
            return Err(err("payload length mismatch"));
        }
        let mut pos = 64;
        let mut read_f64 = |bytes: &[u8]| {
            let v = f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
            pos += 8;
            v
        };
        let mut partial_y = DMatrix::zeros(m, s);
        for i in 0..m {
            for j in 0..s {
                partial_y[(i, j)] = read_f64(bytes);
            }
        }
        let mut partial_x = DMatrix::zeros(m, q);
        for i in 0..m {
            for j in 0..q {
                partial_x[(i, j)] = read_f64(bytes);
            }
        }
        let mut partial_ones = DVector::zeros(m);
        for i in 0..m {
            partial_ones[i] = read_f64(bytes);
        }
        Ok(PartialSketchMessage {
            center_id,
            h,
            m,
            n_j,
            offset,
            partial_y,
            partial_x,
            partial_ones,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes one message as a length-prefixed frame (4-byte big-endian length,
/// then the same bytes as the file format).
pub fn write_frame<W: Write>(w: &mut W, msg: &PartialSketchMessage) -> Result<()> {
    let bytes = msg.to_bytes();
    let len = u32::try_from(bytes.len())
        .map_err(|_| Error::Protocol("message too large for a frame".into()))?;
    w.write_all(&len.to_be_bytes())
        .and_then(|_| w.write_all(&bytes))
        .map_err(|e| Error::Protocol(format!("frame write failed: {e}")))
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<PartialSketchMessage> {
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|e| Error::Protocol(format!("frame read failed: {e}")))?;
    let len = u32::from_be_bytes(len_bytes) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Protocol(format!("frame body read failed: {e}")))?;
    PartialSketchMessage::from_bytes(&buf)
}

/// Center side of the TCP transport: connect and send all messages.
pub fn send_messages<A: ToSocketAddrs>(addr: A, messages: &[PartialSketchMessage]) -> Result<()> {
    let mut stream =
        TcpStream::connect(addr).map_err(|e| Error::Protocol(format!("connect failed: {e}")))?;
    for msg in messages {
        write_frame(&mut stream, msg)?;
    }
    stream
        .flush()
        .map_err(|e| Error::Protocol(format!("flush failed: {e}")))
}

/// Coordinator side of the TCP transport: accept connections until `expect`
/// messages have arrived.
pub fn serve_collect(listener: &TcpListener, expect: usize) -> Result<Vec<PartialSketchMessage>> {
    let mut messages = Vec::with_capacity(expect);
    while messages.len() < expect {
        let (stream, _) = listener
            .accept()
            .map_err(|e| Error::Protocol(format!("accept failed: {e}")))?;
        let mut reader = BufReader::new(stream);
        loop {
            match read_frame(&mut reader) {
                Ok(msg) => {
                    messages.push(msg);
                    if messages.len() == expect {
                        break;
                    }
                }
                Err(Error::Protocol(detail)) if detail.contains("frame read failed") => {
                    break; // sender closed the connection
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(messages)
}
