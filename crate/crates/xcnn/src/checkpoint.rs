//! Flat binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "XCNNCKPT"
//! version    u32       currently 1
//! spec name  u32 len + UTF-8 bytes
//! classes    u32
//! width      u8        bytes per value: 4 (f32) or 8 (f64)
//! records    u32       count
//! record     u32 name len + bytes, u32 rank, rank x u32 dims, values
//! ```
//!
//! Records are the graph's parameters plus batch-norm running statistics,
//! and — when training normalised data — the per-channel `norm.mean` /
//! `norm.std` used on the inputs, so inference applies the same transform.

use std::fs;
use std::path::Path;

use xcnn_core::data::NormStats;
use xcnn_core::graph::NetworkGraph;
use xcnn_core::Scalar;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"XCNNCKPT";
const VERSION: u32 = 1;

pub const NORM_MEAN: &str = "norm.mean";
pub const NORM_STD: &str = "norm.std";

#[derive(Debug, Clone, PartialEq)]
pub struct Record<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub spec_name: String,
    pub num_classes: usize,
    pub records: Vec<Record<F>>,
}

impl<F: Scalar> Checkpoint<F> {
    /// Everything worth keeping from a trained graph.
    pub fn capture(graph: &NetworkGraph<F>, norm: Option<&NormStats<F>>) -> Checkpoint<F> {
        let mut records: Vec<Record<F>> = graph
            .state_records()
            .into_iter()
            .map(|(name, shape, data)| Record { name, shape, data })
            .collect();
        if let Some(n) = norm {
            let c = n.mean.len();
            records.push(Record { name: NORM_MEAN.into(), shape: vec![c], data: n.mean.clone() });
            records.push(Record { name: NORM_STD.into(), shape: vec![c], data: n.std.clone() });
        }
        Checkpoint {
            spec_name: graph.spec().name.clone(),
            num_classes: graph.spec().num_classes,
            records,
        }
    }

    /// Write every non-norm record back into `graph`; returns the input
    /// normalisation statistics if the checkpoint carries them.
    pub fn restore(self, graph: &mut NetworkGraph<F>) -> Result<Option<NormStats<F>>> {
        if graph.spec().name != self.spec_name {
            return Err(Error::invalid(format!(
                "checkpoint is for `{}`, graph is `{}`",
                self.spec_name,
                graph.spec().name
            )));
        }
        if graph.spec().num_classes != self.num_classes {
            return Err(Error::invalid(format!(
                "checkpoint has {} classes, graph has {}",
                self.num_classes,
                graph.spec().num_classes
            )));
        }
        let mut mean = None;
        let mut std = None;
        for r in self.records {
            match r.name.as_str() {
                NORM_MEAN => mean = Some(r.data),
                NORM_STD => std = Some(r.data),
                _ => graph.load_record(&r.name, &r.shape, r.data)?,
            }
        }
        match (mean, std) {
            (Some(mean), Some(std)) => Ok(Some(NormStats { mean, std })),
            (None, None) => Ok(None),
            _ => Err(Error::invalid("checkpoint carries only half the norm statistics")),
        }
    }
}

pub fn save<F: Scalar>(
    path: &Path,
    graph: &NetworkGraph<F>,
    norm: Option<&NormStats<F>>,
) -> Result<()> {
    let ckpt = Checkpoint::capture(graph, norm);
    fs::write(path, encode(&ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|(what, offset)| Error::format(path, what, offset))
}

fn encode<F: Scalar>(ckpt: &Checkpoint<F>) -> Vec<u8> {
    let width = std::mem::size_of::<F>();
    let payload: usize =
        ckpt.records.iter().map(|r| 12 + r.name.len() + 4 * r.shape.len() + width * r.data.len()).sum();
    let mut out = Vec::with_capacity(25 + ckpt.spec_name.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.spec_name.len() as u32).to_le_bytes());
    out.extend_from_slice(ckpt.spec_name.as_bytes());
    out.extend_from_slice(&(ckpt.num_classes as u32).to_le_bytes());
    out.push(width as u8);
    out.extend_from_slice(&(ckpt.records.len() as u32).to_le_bytes());
    for r in &ckpt.records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &r.data {
            // f32 -> f64 is exact, so routing through f64 keeps both widths
            // byte-faithful.
            if width == 4 {
                out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
    }
    out
}

type Raw<'a> = std::result::Result<&'a [u8], (String, u64)>;

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Raw<'a> {
    let start = *pos;
    let end = start
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| (format!("needs {n} more bytes"), start as u64))?;
    *pos = end;
    Ok(&bytes[start..end])
}

fn take_u32(bytes: &[u8], pos: &mut usize) -> std::result::Result<u32, (String, u64)> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().unwrap()))
}

fn decode<F: Scalar>(bytes: &[u8]) -> std::result::Result<Checkpoint<F>, (String, u64)> {
    let mut pos = 0usize;
    if take(bytes, &mut pos, 8)? != MAGIC {
        return Err(("bad magic".into(), 0));
    }
    let version = take_u32(bytes, &mut pos)?;
    if version != VERSION {
        return Err((format!("version {version}, expected {VERSION}"), 8));
    }
    let name_len = take_u32(bytes, &mut pos)? as usize;
    let spec_name = String::from_utf8(take(bytes, &mut pos, name_len)?.to_vec())
        .map_err(|_| ("spec name is not UTF-8".to_string(), pos as u64))?;
    let num_classes = take_u32(bytes, &mut pos)? as usize;
    let width = take(bytes, &mut pos, 1)?[0] as usize;
    if width != std::mem::size_of::<F>() {
        return Err((
            format!("{width}-byte values, expected {}", std::mem::size_of::<F>()),
            (pos - 1) as u64,
        ));
    }
    let n_records = take_u32(bytes, &mut pos)? as usize;
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let len = take_u32(bytes, &mut pos)? as usize;
        let name = String::from_utf8(take(bytes, &mut pos, len)?.to_vec())
            .map_err(|_| ("record name is not UTF-8".to_string(), pos as u64))?;
        let rank = take_u32(bytes, &mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(bytes, &mut pos)? as usize);
        }
        let numel = shape.iter().product::<usize>();
        let raw = take(bytes, &mut pos, numel * width)?;
        let data: Vec<F> = raw
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    F::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64)
                } else {
                    F::from_f64(f64::from_le_bytes(c.try_into().unwrap()))
                }
            })
            .collect();
        records.push(Record { name, shape, data });
    }
    if pos != bytes.len() {
        return Err((format!("{} trailing bytes", bytes.len() - pos), pos as u64));
    }
    Ok(Checkpoint { spec_name, num_classes, records })
}
