//! Dataset files: the magic line `SITS1`, one JSON header line, then one
//! little-endian binary record per sample.
//!
//! Record: `parcel_id u32, label u32, T u32, C u32`, then `N_pix u32` for
//! pixel sets or `H u32, W u32` for grids, `T` mask bytes, `T` f32
//! timestamps and the f32 values. Grid records carry `u32::MAX` as label
//! and end with `H * W` u32 semantic labels and `H * W` u32 parcel ids.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetKind, DatasetMeta, GridSample, PixelSetSample, Samples};
use crate::encoding::TimeAxis;
use crate::error::{Error, Result};
use crate::graph::IGNORE_INDEX;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &str = "SITS1";
pub const DATASET_VERSION: u32 = 1;
const NO_LABEL: u32 = u32::MAX;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: DatasetKind,
    count: usize,
    #[serde(flatten)]
    meta: DatasetMeta,
}

fn label_to_u32(l: usize) -> Result<u32> {
    if l == IGNORE_INDEX {
        Ok(NO_LABEL)
    } else {
        u32::try_from(l).ok().filter(|&v| v != NO_LABEL).ok_or_else(|| Error::format("label", format!("{l} does not fit in u32")))
    }
}

fn label_from_u32(l: u32) -> usize {
    if l == NO_LABEL {
        IGNORE_INDEX
    } else {
        l as usize
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, field: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format(field, format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_time(out: &mut Vec<u8>, time: &TimeAxis) {
    out.extend(time.valid.iter().map(|&v| u8::from(v)));
    for t in &time.timestamps {
        out.extend_from_slice(&t.to_le_bytes());
    }
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn encode_pixel_set(out: &mut Vec<u8>, s: &PixelSetSample) -> Result<()> {
    out.extend_from_slice(&s.parcel_id.to_le_bytes());
    out.extend_from_slice(&label_to_u32(s.label)?.to_le_bytes());
    put_u32(out, s.len(), "T")?;
    put_u32(out, s.channels(), "C")?;
    put_u32(out, s.n_pix(), "N_pix")?;
    put_time(out, &s.time);
    put_f32s(out, s.values.data());
    Ok(())
}

fn encode_grid(out: &mut Vec<u8>, g: &GridSample) -> Result<()> {
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&NO_LABEL.to_le_bytes());
    put_u32(out, g.len(), "T")?;
    put_u32(out, g.channels(), "C")?;
    put_u32(out, g.height(), "H")?;
    put_u32(out, g.width(), "W")?;
    put_time(out, &g.time);
    put_f32s(out, g.values.data());
    for &l in &g.semantic_labels {
        out.extend_from_slice(&label_to_u32(l)?.to_le_bytes());
    }
    for &p in &g.parcel_ids {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(())
}

/// Serializes a dataset into `w`.
pub fn write_dataset_to<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    let header = Header {
        version: DATASET_VERSION,
        kind: ds.kind(),
        count: ds.len(),
        meta: ds.meta.clone(),
    };
    writeln!(w, "{DATASET_MAGIC}")?;
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    let mut buf = Vec::new();
    match &ds.samples {
        Samples::PixelSet(samples) => {
            for s in samples {
                buf.clear();
                encode_pixel_set(&mut buf, s)?;
                w.write_all(&buf)?;
            }
        }
        Samples::Grid(samples) => {
            for g in samples {
                buf.clear();
                encode_grid(&mut buf, g)?;
                w.write_all(&buf)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    write_dataset_to(BufWriter::new(File::create(path)?), ds)
}

/// Byte cursor that turns every overrun into a format error.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    record: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(Error::format(
                field,
                format!("record {} needs {n} bytes, only {remaining} left", self.record),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn dim(&mut self, field: &str) -> Result<usize> {
        match self.u32(field)? {
            0 if field != "T" => Err(Error::format(field, format!("record {} has zero {field}", self.record))),
            v => Ok(v as usize),
        }
    }

    fn count(&mut self, dims: &[usize], elem: usize, field: &str) -> Result<usize> {
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(elem).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| Error::format(field, format!("record {} declares {dims:?} values, past end of file", self.record)))?;
        Ok(n)
    }

    fn f32s(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4, field)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }

    fn u32s(&mut self, n: usize, field: &str) -> Result<Vec<u32>> {
        let bytes = self.take(n * 4, field)?;
        Ok(bytes.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect())
    }

    fn time(&mut self, t: usize) -> Result<TimeAxis> {
        self.count(&[t], 5, "T")?;
        let mask = self.take(t, "mask")?;
        let valid = mask
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::format("mask", format!("record {} has mask byte {b}", self.record))),
            })
            .collect::<Result<Vec<_>>>()?;
        let timestamps = self.f32s(t, "timestamps")?;
        TimeAxis::new(timestamps, valid).map_err(|e| Error::format("timestamps", e.to_string()))
    }
}

fn decode_pixel_set(cur: &mut Cursor) -> Result<PixelSetSample> {
    let parcel_id = cur.u32("parcel_id")?;
    let label = label_from_u32(cur.u32("label")?);
    let t = cur.dim("T")?;
    let c = cur.dim("C")?;
    let n = cur.dim("N_pix")?;
    let time = cur.time(t)?;
    let len = cur.count(&[t, c, n], 4, "values")?;
    let values = Tensor::new(&[t, c, n], cur.f32s(len, "values")?)?;
    PixelSetSample::new(values, time, label, parcel_id)
}

fn decode_grid(cur: &mut Cursor) -> Result<GridSample> {
    cur.u32("parcel_id")?;
    cur.u32("label")?;
    let t = cur.dim("T")?;
    let c = cur.dim("C")?;
    let h = cur.dim("H")?;
    let w = cur.dim("W")?;
    let time = cur.time(t)?;
    let len = cur.count(&[t, c, h, w], 4, "values")?;
    let values = Tensor::new(&[t, c, h, w], cur.f32s(len, "values")?)?;
    let hw = cur.count(&[h, w, 2], 4, "semantic_labels")? / 2;
    let labels = cur.u32s(hw, "semantic_labels")?.into_iter().map(label_from_u32).collect();
    let parcel_ids = cur.u32s(hw, "parcel_ids")?;
    GridSample::new(values, time, labels, parcel_ids)
}

/// Parses a dataset from an in-memory file image.
fn parse(buf: &[u8]) -> Result<Dataset> {
    let line_end = |from: usize, field: &str| {
        buf[from..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| from + p)
            .ok_or_else(|| Error::format(field, "missing line terminator"))
    };
    let magic_end = line_end(0, "magic")?;
    if &buf[..magic_end] != DATASET_MAGIC.as_bytes() {
        return Err(Error::format(
            "magic",
            format!("expected {DATASET_MAGIC:?}, found {:?}", String::from_utf8_lossy(&buf[..magic_end.min(16)])),
        ));
    }
    let header_end = line_end(magic_end + 1, "header")?;
    let header: Header =
        serde_json::from_slice(&buf[magic_end + 1..header_end]).map_err(|e| Error::format("header", e.to_string()))?;
    if header.version != DATASET_VERSION {
        return Err(Error::format(
            "version",
            format!("expected {DATASET_VERSION}, found {}", header.version),
        ));
    }
    let mut cur = Cursor {
        buf,
        pos: header_end + 1,
        record: 0,
    };
    // every record is at least 16 bytes
    if header.count > (buf.len() - cur.pos) / 16 {
        return Err(Error::format("count", format!("{} records cannot fit in the file", header.count)));
    }
    let check_channels = |c: usize| {
        if c == header.meta.channels {
            Ok(())
        } else {
            Err(Error::format("C", format!("record has {c} channels, header says {}", header.meta.channels)))
        }
    };
    let samples = match header.kind {
        DatasetKind::PixelSet => {
            let mut v = Vec::with_capacity(header.count);
            for i in 0..header.count {
                cur.record = i;
                let s = decode_pixel_set(&mut cur)?;
                check_channels(s.channels())?;
                v.push(s);
            }
            Samples::PixelSet(v)
        }
        DatasetKind::Grid => {
            let mut v = Vec::with_capacity(header.count);
            for i in 0..header.count {
                cur.record = i;
                let g = decode_grid(&mut cur)?;
                check_channels(g.channels())?;
                v.push(g);
            }
            Samples::Grid(v)
        }
    };
    if cur.pos != buf.len() {
        return Err(Error::format("count", format!("{} trailing bytes after the last record", buf.len() - cur.pos)));
    }
    Ok(Dataset {
        meta: header.meta,
        samples,
    })
}

pub fn read_dataset_from<R: Read>(mut r: R) -> Result<Dataset> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    parse(&buf)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    parse(&std::fs::read(path)?)
}
