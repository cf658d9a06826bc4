use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Magic prefix of an attention dump file.
pub const DUMP_MAGIC: &[u8; 8] = b"ATTNDMP1";

/// Row-sum tolerance for captured attention matrices.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// The three places multi-head attention occurs in the encoder–decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    EncoderSelf,
    DecoderSelf,
    DecoderInter,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::EncoderSelf, Site::DecoderSelf, Site::DecoderInter];

    pub fn as_str(self) -> &'static str {
        match self {
            Site::EncoderSelf => "encoder-self",
            Site::DecoderSelf => "decoder-self",
            Site::DecoderInter => "decoder-inter",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.as_str() == s)
            .ok_or_else(|| invalid("site", format!("unknown attention site `{s}`")))
    }
}

/// Post-softmax attention weights of every head at one site and layer, for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<T> {
    pub site: Site,
    pub layer: usize,
    /// One `[n × m]` matrix per head.
    pub matrices: Vec<Tensor<T>>,
}

impl<T: Scalar> AttentionRecord<T> {
    /// Keeps the leading `n × m` block of every matrix (drops padded queries and keys).
    pub fn trimmed(mut self, n: usize, m: usize) -> Self {
        for mat in &mut self.matrices {
            let cols = mat.last_dim();
            let data: Vec<T> = (0..n).flat_map(|i| mat.data()[i * cols..i * cols + m].to_vec()).collect();
            *mat = Tensor::new(&[n, m], data).expect("trim within bounds");
        }
        self
    }

    /// Exports the matrices unchanged for the analysis toolkit.
    pub fn export(&self) -> Result<DumpRecord> {
        if self.matrices.is_empty() {
            return Err(invalid("attention-record", "record holds no heads"));
        }
        let heads = self
            .matrices
            .iter()
            .map(|t| AttnMatrix::new(t.rows(), t.last_dim(), t.data().iter().map(|v| v.as_f64()).collect()))
            .collect::<Result<Vec<_>>>()?;
        for h in &heads {
            h.check_row_stochastic(ROW_SUM_TOL)?;
        }
        DumpRecord::new(self.site, self.layer, heads)
    }
}

/// Dense `n × m` attention matrix in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMatrix {
    pub n: usize,
    pub m: usize,
    pub data: Vec<f64>,
}

impl AttnMatrix {
    pub fn new(n: usize, m: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || m == 0 || data.len() != n * m {
            return Err(invalid("attention-matrix", format!("{n}×{m} matrix with {} values", data.len())));
        }
        Ok(Self { n, m, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(invalid("attention-matrix", "ragged rows"));
        }
        Self::new(rows.len(), m, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        Self::new(n, n, (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect())
            .expect("identity dims")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn check_row_stochastic(&self, tol: f64) -> Result<()> {
        for i in 0..self.n {
            let s: f64 = self.row(i).iter().sum();
            if (s - 1.0).abs() > tol || self.row(i).iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(invalid(
                    "attention-matrix",
                    format!("row {i} is not a probability vector (sum {s})"),
                ));
            }
        }
        Ok(())
    }
}

/// Heads of one site and layer as stored in an attention dump.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpRecord {
    pub site: Site,
    pub layer: usize,
    pub heads: Vec<AttnMatrix>,
}

impl DumpRecord {
    pub fn new(site: Site, layer: usize, heads: Vec<AttnMatrix>) -> Result<Self> {
        let first = heads.first().ok_or_else(|| invalid("dump-record", "no heads"))?;
        if heads.iter().any(|h| h.n != first.n || h.m != first.m) {
            return Err(invalid("dump-record", "heads differ in shape"));
        }
        Ok(Self { site, layer, heads })
    }

    pub fn n(&self) -> usize {
        self.heads[0].n
    }

    pub fn m(&self) -> usize {
        self.heads[0].m
    }
}

/// Writes `ATTNDMP1` followed by, per record, a text header line
/// `<site> <layer> <heads> <n> <m>\n` and the row-major little-endian `f64`
/// matrices of every head.
pub fn write_dump<W: Write>(mut w: W, records: &[DumpRecord]) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    for r in records {
        writeln!(w, "{} {} {} {} {}", r.site, r.layer, r.heads.len(), r.n(), r.m())?;
        for h in &r.heads {
            for v in &h.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Parses a dump produced by [`write_dump`]. Errors carry the byte offset of the defect.
pub fn read_dump(bytes: &[u8]) -> Result<Vec<DumpRecord>> {
    let bad = |offset: usize, reason: String| Error::MalformedDump { offset, reason };
    if bytes.len() < DUMP_MAGIC.len() || &bytes[..DUMP_MAGIC.len()] != DUMP_MAGIC {
        return Err(bad(0, "missing ATTNDMP1 magic".into()));
    }
    let mut pos = DUMP_MAGIC.len();
    let mut records = Vec::new();
    while pos < bytes.len() {
        let header_start = pos;
        let eol = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad(header_start, "unterminated header line".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + eol])
            .map_err(|_| bad(header_start, "header is not UTF-8".into()))?;
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 5 {
            return Err(bad(header_start, format!("expected 5 header fields, found {}", fields.len())));
        }
        let site: Site = fields[0]
            .parse()
            .map_err(|_| bad(header_start, format!("unknown site `{}`", fields[0])))?;
        let mut nums = [0usize; 4];
        for (slot, f) in nums.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|_| bad(header_start, format!("invalid header number `{f}`")))?;
        }
        let [layer, heads, n, m] = nums;
        if heads == 0 || n == 0 || m == 0 {
            return Err(bad(header_start, "zero head count or extent".into()));
        }
        pos += eol + 1;
        let need = heads
            .checked_mul(n)
            .and_then(|v| v.checked_mul(m))
            .and_then(|v| v.checked_mul(8))
            .ok_or_else(|| bad(header_start, "payload size overflows".into()))?;
        if bytes.len() - pos < need {
            return Err(bad(pos, format!("payload truncated: need {need} bytes, have {}", bytes.len() - pos)));
        }
        let mut mats = Vec::with_capacity(heads);
        for _ in 0..heads {
            let data = bytes[pos..pos + n * m * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            pos += n * m * 8;
            mats.push(AttnMatrix::new(n, m, data).map_err(|e| bad(pos, e.to_string()))?);
        }
        records.push(DumpRecord::new(site, layer, mats).map_err(|e| bad(header_start, e.to_string()))?);
    }
    Ok(records)
}
