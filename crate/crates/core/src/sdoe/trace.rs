//! Campaign trace records and their CSV form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{BodeError, Result};

/// Mixture mean and 95% band of the QoI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QoiBand {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl QoiBand {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// One acquisition-query-append cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub x: Vec<f64>,
    pub y: f64,
    pub qoi: QoiBand,
    pub acq_value: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CampaignTrace {
    pub records: Vec<TraceRecord>,
    /// QoI bands mapped back to the raw output scale, one per record.
    /// Equal to the record bands when outputs are not standardized.
    pub raw_qoi: Vec<QoiBand>,
}

impl CampaignTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }
}

pub fn header(d: usize) -> Vec<String> {
    let mut h = vec!["iter".to_string()];
    h.extend((1..=d).map(|i| format!("x_{i}")));
    for c in ["y", "qoi_mean", "qoi_lo2.5", "qoi_hi97.5", "acq_value", "wall_ms"] {
        h.push(c.to_string());
    }
    h
}

pub const RAW_HEADER: [&str; 4] = ["iter", "qoi_mean_raw", "qoi_lo2.5_raw", "qoi_hi97.5_raw"];

fn row(r: &TraceRecord) -> Vec<String> {
    let mut out = vec![r.iter.to_string()];
    out.extend(r.x.iter().map(|v| v.to_string()));
    for v in [r.y, r.qoi.mean, r.qoi.lo, r.qoi.hi, r.acq_value] {
        out.push(v.to_string());
    }
    out.push(r.wall_ms.to_string());
    out
}

/// Appends rows to a trace CSV; writes the header on creation.
pub struct TraceWriter<W: Write> {
    inner: csv::Writer<W>,
    d: usize,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(w: W, d: usize) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(header(d))?;
        inner.flush()?;
        Ok(TraceWriter { inner, d })
    }

    /// Continues an existing file without writing a header.
    pub fn append(w: W, d: usize) -> Self {
        TraceWriter { inner: csv::WriterBuilder::new().has_headers(false).from_writer(w), d }
    }

    pub fn push(&mut self, r: &TraceRecord) -> Result<()> {
        if r.x.len() != self.d {
            return Err(BodeError::Argument(format!("record has {} coordinates, trace has {}", r.x.len(), self.d)));
        }
        self.inner.write_record(row(r))?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_trace<W: Write>(w: W, d: usize, records: &[TraceRecord]) -> Result<()> {
    let mut tw = TraceWriter::new(w, d)?;
    for r in records {
        tw.push(r)?;
    }
    Ok(())
}

pub fn write_raw_qoi<W: Write>(w: W, records: &[TraceRecord], raw: &[QoiBand]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RAW_HEADER)?;
    for (r, b) in records.iter().zip(raw) {
        out.write_record([r.iter.to_string(), b.mean.to_string(), b.lo.to_string(), b.hi.to_string()])
            ?;
    }
    out.flush()?;
    Ok(())
}

fn parse_f64(s: &str, line: u64, col: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| BodeError::Argument(format!("line {line}: bad value '{s}' in column {col}")))
}

/// Parses a trace CSV; returns the design dimension and the records.
pub fn read_trace<R: Read>(r: R) -> Result<(usize, Vec<TraceRecord>)> {
    let mut rdr = csv::Reader::from_reader(r);
    let head: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if head.len() < 7 {
        return Err(BodeError::Argument("trace header is too short".into()));
    }
    let d = head.len() - 7;
    if head != header(d) {
        return Err(BodeError::Argument(format!("unexpected trace header: {}", head.join(","))));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != head.len() {
            return Err(BodeError::Argument(format!("line {line}: expected {} fields", head.len())));
        }
        let iter = rec[0].trim().parse().map_err(|_| BodeError::Argument(format!("line {line}: bad iter")))?;
        let x = (0..d).map(|i| parse_f64(&rec[1 + i], line, &head[1 + i])).collect::<Result<Vec<_>>>()?;
        let v = |k: usize| parse_f64(&rec[1 + d + k], line, &head[1 + d + k]);
        let wall_ms =
            rec[d + 6].trim().parse().map_err(|_| BodeError::Argument(format!("line {line}: bad wall_ms")))?;
        out.push(TraceRecord {
            iter,
            x,
            y: v(0)?,
            qoi: QoiBand { mean: v(1)?, lo: v(2)?, hi: v(3)? },
            acq_value: v(4)?,
            wall_ms,
        });
    }
    Ok((d, out))
}

pub fn read_raw_qoi<R: Read>(r: R) -> Result<Vec<QoiBand>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 4 {
            return Err(BodeError::Argument(format!("line {line}: expected 4 fields")));
        }
        out.push(QoiBand {
            mean: parse_f64(&rec[1], line, RAW_HEADER[1])?,
            lo: parse_f64(&rec[2], line, RAW_HEADER[2])?,
            hi: parse_f64(&rec[3], line, RAW_HEADER[3])?,
        });
    }
    Ok(out)
}
