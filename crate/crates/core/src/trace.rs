//! Binary attention-trace format and CSV schemas.
//!
//! A trace file stores, for every (layer, kv head), the last `k_rows`
//! attention rows over the prompt, as little-endian `f32` regardless of
//! host endianness. Zeros encode causally masked (or padded) entries,
//! so the nonzero-count denominator used by the row reduction is
//! recoverable from the file alone. Byte layout:
//!
//! ```text
//! magic   4 bytes  "KVPT"
//! version u32      1
//! n_layers, n_kv_heads, seq_len, k_rows   u32 each
//! data    n_layers * n_kv_heads blocks of k_rows * seq_len f32
//! ```
//!
//! The CSV schemas emitted by the run harness are documented in the
//! repository's FORMATS.md.

use crate::error::Error;
use crate::pruner::PruneDecision;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

pub const TRACE_MAGIC: [u8; 4] = *b"KVPT";
pub const TRACE_VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 * 5;

/// Tolerance for the row-sum check on stored rows.
const ROW_SUM_TOL: f64 = 1e-4;

/// Per-(layer, kv head) attention rows in exactly the precision and
/// layout the trace file stores. This is the pruner's input type: the
/// in-process pipeline and a trace round-trip therefore see identical
/// bits.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRows {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub seq_len: usize,
    pub k_rows: usize,
    data: Vec<f32>,
}

impl TraceRows {
    pub fn zeros(n_layers: usize, n_kv_heads: usize, seq_len: usize, k_rows: usize) -> TraceRows {
        TraceRows {
            n_layers,
            n_kv_heads,
            seq_len,
            k_rows,
            data: vec![0.0; n_layers * n_kv_heads * k_rows * seq_len],
        }
    }

    fn offset(&self, layer: usize, head: usize, r: usize) -> usize {
        ((layer * self.n_kv_heads + head) * self.k_rows + r) * self.seq_len
    }

    pub fn row(&self, layer: usize, head: usize, r: usize) -> &[f32] {
        let o = self.offset(layer, head, r);
        &self.data[o..o + self.seq_len]
    }

    pub fn row_mut(&mut self, layer: usize, head: usize, r: usize) -> &mut [f32] {
        let o = self.offset(layer, head, r);
        &mut self.data[o..o + self.seq_len]
    }

    /// All `k_rows` rows of one head, oldest query first.
    pub fn head_rows(&self, layer: usize, head: usize) -> Vec<&[f32]> {
        (0..self.k_rows).map(|r| self.row(layer, head, r)).collect()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Every stored row must sum to 1 within `1e-4` over its nonzero
    /// entries, or be entirely zero (a padded row).
    pub fn validate(&self) -> Result<()> {
        for layer in 0..self.n_layers {
            for head in 0..self.n_kv_heads {
                for r in 0..self.k_rows {
                    let row = self.row(layer, head, r);
                    if row.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let sum: f64 = row.iter().map(|&v| v as f64).sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        return Err(Error::Invariant(format!(
                            "trace row (layer {layer}, head {head}, row {r}) sums to {sum}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn read_u32(buf: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes([buf[offset], buf[offset + 1], buf[offset + 2], buf[offset + 3]])
}

/// Writes a trace file; `read_trace` of the result is bit-identical.
pub fn write_trace(rows: &TraceRows, path: &Path) -> Result<()> {
    rows.validate()?;
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&TRACE_MAGIC)?;
    w.write_all(&TRACE_VERSION.to_le_bytes())?;
    for dim in [rows.n_layers, rows.n_kv_heads, rows.seq_len, rows.k_rows] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for v in &rows.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates a trace file.
pub fn read_trace(path: &Path) -> Result<TraceRows> {
    let mut file = File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;

    if bytes.len() < HEADER_LEN as usize {
        return Err(Error::TraceFormat {
            offset: bytes.len() as u64,
            detail: format!(
                "truncated header: expected at least {HEADER_LEN} bytes, got {}",
                bytes.len()
            ),
        });
    }
    if bytes[0..4] != TRACE_MAGIC {
        return Err(Error::TraceFormat {
            offset: 0,
            detail: format!("bad magic {:?}, expected {:?}", &bytes[0..4], TRACE_MAGIC),
        });
    }
    let version = read_u32(&bytes, 4);
    if version != TRACE_VERSION {
        return Err(Error::TraceFormat {
            offset: 4,
            detail: format!("unsupported version {version}, expected {TRACE_VERSION}"),
        });
    }
    let n_layers = read_u32(&bytes, 8) as usize;
    let n_kv_heads = read_u32(&bytes, 12) as usize;
    let seq_len = read_u32(&bytes, 16) as usize;
    let k_rows = read_u32(&bytes, 20) as usize;
    let n_values = n_layers as u64 * n_kv_heads as u64 * seq_len as u64 * k_rows as u64;
    let expected = HEADER_LEN + n_values * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::TraceFormat {
            offset: bytes.len() as u64,
            detail: format!(
                "file length {} does not match header-implied length {expected}",
                bytes.len()
            ),
        });
    }

    let mut data = Vec::with_capacity(n_values as usize);
    for chunk in bytes[HEADER_LEN as usize..].chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let rows = TraceRows {
        n_layers,
        n_kv_heads,
        seq_len,
        k_rows,
        data,
    };
    rows.validate()?;
    Ok(rows)
}

/// One point of a threshold sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRecord {
    pub threshold: f64,
    /// Mean retained fraction over all (sample, layer, head) decisions.
    pub mean_budget: f64,
    /// Fraction of greedy tokens matching full-cache generation.
    pub agreement: f64,
    pub per_layer_budgets: Vec<f64>,
}

/// Writes `sample_id,layer,head,retained,total,budget` rows, ordered by
/// sample, layer, head ascending.
pub fn emit_budget_csv(decisions_per_sample: &[Vec<PruneDecision>], path: &Path) -> Result<()> {
    if decisions_per_sample.iter().all(|d| d.is_empty()) {
        return Err(Error::InvalidInput("no decisions to write".into()));
    }
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "sample_id,layer,head,retained,total,budget")?;
    for (sample_id, decisions) in decisions_per_sample.iter().enumerate() {
        let mut sorted: Vec<&PruneDecision> = decisions.iter().collect();
        sorted.sort_by_key(|d| (d.layer, d.head));
        for d in sorted {
            writeln!(
                w,
                "{},{},{},{},{},{:.6}",
                sample_id,
                d.layer,
                d.head,
                d.retained.len(),
                d.total,
                d.budget
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `threshold,mean_budget,agreement,layer_0..layer_{L-1}` rows.
pub fn emit_sweep_csv(records: &[SweepRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no sweep records to write".into()));
    }
    let n_layers = records[0].per_layer_budgets.len();
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "threshold,mean_budget,agreement")?;
    for l in 0..n_layers {
        write!(w, ",layer_{l}")?;
    }
    writeln!(w)?;
    for rec in records {
        write!(
            w,
            "{:.6},{:.6},{:.6}",
            rec.threshold, rec.mean_budget, rec.agreement
        )?;
        for b in &rec.per_layer_budgets {
            write!(w, ",{b:.6}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Sweep rows computed from a trace alone; there is no model to
/// generate with, so no agreement column.
pub fn emit_trace_sweep_csv(
    records: &[(f64, f64, Vec<f64>)], // (threshold, mean_budget, per-layer budgets)
    path: &Path,
) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no sweep records to write".into()));
    }
    let n_layers = records[0].2.len();
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "threshold,mean_budget")?;
    for l in 0..n_layers {
        write!(w, ",layer_{l}")?;
    }
    writeln!(w)?;
    for (threshold, mean_budget, layers) in records {
        write!(w, "{threshold:.6},{mean_budget:.6}")?;
        for b in layers {
            write!(w, ",{b:.6}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_trace(seed: u64, n_layers: usize, heads: usize, n: usize, k: usize) -> TraceRows {
        let mut rng = Rng::new(seed);
        let mut rows = TraceRows::zeros(n_layers, heads, n, k);
        for layer in 0..n_layers {
            for head in 0..heads {
                for r in 0..k {
                    // Row r is the query at position n - k + r; later
                    // positions stay causally masked at zero.
                    let limit = n - k + r + 1;
                    let raw: Vec<f64> = (0..limit).map(|_| rng.next_f64() + 0.01).collect();
                    let sum: f64 = raw.iter().sum();
                    let row = rows.row_mut(layer, head, r);
                    for (j, v) in raw.iter().enumerate() {
                        row[j] = (v / sum) as f32;
                    }
                }
            }
        }
        rows
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.kvpt");
        let rows = random_trace(5, 3, 2, 17, 3);
        write_trace(&rows, &path).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(rows, back);
    }

    #[test]
    fn truncated_file_names_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.kvpt");
        let rows = random_trace(6, 2, 2, 9, 1);
        write_trace(&rows, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_trace(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("does not match header-implied length"), "{msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.kvpt");
        let rows = random_trace(7, 1, 1, 4, 1);
        write_trace(&rows, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = read_trace(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn future_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.kvpt");
        let rows = random_trace(8, 1, 1, 4, 1);
        write_trace(&rows, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 2;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_trace(&path).unwrap_err();
        assert!(err.to_string().contains("unsupported version 2"), "{err}");
    }

    #[test]
    fn unnormalized_rows_rejected() {
        let mut rows = TraceRows::zeros(1, 1, 4, 1);
        rows.row_mut(0, 0, 0).copy_from_slice(&[0.5, 0.1, 0.1, 0.1]);
        let dir = tempfile::tempdir().unwrap();
        assert!(write_trace(&rows, &dir.path().join("t.kvpt")).is_err());
    }

    #[test]
    fn all_zero_rows_allowed() {
        // Padded heads store all-zero rows.
        let rows = TraceRows::zeros(1, 1, 4, 1);
        assert!(rows.validate().is_ok());
    }

    #[test]
    fn budget_csv_full_retention_row() {
        let d = crate::pruner::PruneDecision {
            layer: 0,
            head: 0,
            i_prune: 8,
            retained: (0..8).collect(),
            total: 8,
            budget: 1.0,
            norm_full: 0.5,
            norm_at_halt: 0.5,
            degenerate: false,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("budget.csv");
        emit_budget_csv(&[vec![d]], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "sample_id,layer,head,retained,total,budget");
        assert_eq!(lines.next().unwrap(), "0,0,0,8,8,1.000000");
    }
}
