//! Loading the official CIFAR binary distributions.
//!
//! CIFAR-10 ships as `data_batch_1..5.bin` plus `test_batch.bin`, one label
//! byte and 3072 channel-planar pixel bytes per record.  CIFAR-100 ships as
//! `train.bin`/`test.bin` with a coarse and a fine label byte per record;
//! the fine label is the class.  Pixels land in `[0, 1]`; the raw bytes of
//! any record can be re-serialised exactly while the set is still RGB.

use std::fmt;
use std::fs;
use std::path::Path;

use xcnn_core::data::Dataset;

use crate::error::{Error, Result};

const PIXELS_PER_RECORD: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Cifar10,
    Cifar100,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Cifar10 => "cifar10",
            Variant::Cifar100 => "cifar100",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "cifar10" => Ok(Variant::Cifar10),
            "cifar100" => Ok(Variant::Cifar100),
            other => Err(Error::invalid(format!("unknown dataset `{other}`"))),
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Variant::Cifar10 => 10,
            Variant::Cifar100 => 100,
        }
    }

    /// Label byte(s) + 3072 pixel bytes.
    pub fn record_len(self) -> usize {
        match self {
            Variant::Cifar10 => 1 + PIXELS_PER_RECORD,
            Variant::Cifar100 => 2 + PIXELS_PER_RECORD,
        }
    }

    /// Official file names and record counts of the training split.
    pub fn train_files(self) -> Vec<(&'static str, usize)> {
        match self {
            Variant::Cifar10 => vec![
                ("data_batch_1.bin", 10_000),
                ("data_batch_2.bin", 10_000),
                ("data_batch_3.bin", 10_000),
                ("data_batch_4.bin", 10_000),
                ("data_batch_5.bin", 10_000),
            ],
            Variant::Cifar100 => vec![("train.bin", 50_000)],
        }
    }

    /// Official file names and record counts of the test split.
    pub fn test_files(self) -> Vec<(&'static str, usize)> {
        match self {
            Variant::Cifar10 => vec![("test_batch.bin", 10_000)],
            Variant::Cifar100 => vec![("test.bin", 10_000)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Colourspace {
    Rgb,
    Yuv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// A loaded split with its provenance tags.  The tags gate the operations
/// that only make sense once: YUV conversion and byte round-trips.
#[derive(Debug, Clone)]
pub struct CifarSet {
    pub data: Dataset<f32>,
    pub variant: Variant,
    pub split: Split,
    pub colourspace: Colourspace,
    /// CIFAR-100 coarse labels, kept only so records re-serialise exactly.
    coarse: Option<Vec<u8>>,
}

impl CifarSet {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Images per class, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        class_counts(&self.data)
    }

    /// BT.601 conversion; converting twice is a bug, not a no-op.
    pub fn to_yuv(&self) -> Result<CifarSet> {
        if self.colourspace == Colourspace::Yuv {
            return Err(Error::invalid(format!(
                "{} {} split is already YUV",
                self.variant.name(),
                self.split
            )));
        }
        Ok(CifarSet {
            data: self.data.to_yuv()?,
            variant: self.variant,
            split: self.split,
            colourspace: Colourspace::Yuv,
            coarse: self.coarse.clone(),
        })
    }

    /// Re-serialise record `i` into the official binary layout.  Only valid
    /// while pixels are the loaded RGB values.
    pub fn record_bytes(&self, i: usize) -> Result<Vec<u8>> {
        if self.colourspace != Colourspace::Rgb {
            return Err(Error::invalid("records round-trip only in RGB"));
        }
        if i >= self.len() {
            return Err(Error::invalid(format!("record {i} beyond {}", self.len())));
        }
        let mut out = Vec::with_capacity(self.variant.record_len());
        if let Some(coarse) = &self.coarse {
            out.push(coarse[i]);
        }
        out.push(self.data.label(i) as u8);
        out.extend(self.data.image(i).iter().map(|&v| (v * 255.0).round() as u8));
        Ok(out)
    }
}

pub fn class_counts(ds: &Dataset<f32>) -> Vec<usize> {
    let mut counts = vec![0usize; ds.num_classes()];
    for &l in ds.labels() {
        counts[l as usize] += 1;
    }
    counts
}

/// Load both splits from `dir`.  Files must hold exactly the official record
/// counts; violations are reported with the byte offset of the first record
/// that should not (or should) be there.
pub fn load_cifar(dir: &Path, variant: Variant) -> Result<(CifarSet, CifarSet)> {
    let train = load_split(dir, variant, Split::Train)?;
    let test = load_split(dir, variant, Split::Test)?;
    Ok((train, test))
}

/// Load one split from `dir`.
pub fn load_split(dir: &Path, variant: Variant, split: Split) -> Result<CifarSet> {
    let files = match split {
        Split::Train => variant.train_files(),
        Split::Test => variant.test_files(),
    };
    let total: usize = files.iter().map(|&(_, n)| n).sum();
    let mut labels = Vec::with_capacity(total);
    let mut coarse = Vec::with_capacity(if variant == Variant::Cifar100 { total } else { 0 });
    let mut pixels = Vec::with_capacity(total * PIXELS_PER_RECORD);

    for (name, expected) in files {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        decode_file(&path, &bytes, variant, expected, &mut labels, &mut coarse, &mut pixels)?;
    }

    let data = Dataset::new(pixels, labels, variant.num_classes(), 3, 32, 32)?;
    Ok(CifarSet {
        data,
        variant,
        split,
        colourspace: Colourspace::Rgb,
        coarse: (variant == Variant::Cifar100).then_some(coarse),
    })
}

fn decode_file(
    path: &Path,
    bytes: &[u8],
    variant: Variant,
    expected_records: usize,
    labels: &mut Vec<u32>,
    coarse: &mut Vec<u8>,
    pixels: &mut Vec<f32>,
) -> Result<()> {
    let record = variant.record_len();
    if bytes.len() % record != 0 {
        let whole = bytes.len() / record;
        return Err(Error::format(
            path,
            format!("truncated record {whole} ({} of {record} bytes)", bytes.len() % record),
            (whole * record) as u64,
        ));
    }
    let got = bytes.len() / record;
    if got != expected_records {
        return Err(Error::format(
            path,
            format!("{got} records where {expected_records} belong"),
            (got.min(expected_records) * record) as u64,
        ));
    }
    for (r, chunk) in bytes.chunks_exact(record).enumerate() {
        let (label_offset, label) = match variant {
            Variant::Cifar10 => (0, chunk[0]),
            Variant::Cifar100 => {
                coarse.push(chunk[0]);
                (1, chunk[1])
            }
        };
        if (label as usize) >= variant.num_classes() {
            return Err(Error::format(
                path,
                format!("label {label} outside 0..{}", variant.num_classes()),
                (r * record + label_offset) as u64,
            ));
        }
        labels.push(label as u32);
        pixels.extend(chunk[record - PIXELS_PER_RECORD..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(())
}
