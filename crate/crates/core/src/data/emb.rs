//! EMB1 binary container for labelled token-embedding datasets.
//!
//! Layout (little-endian): magic `EMB1`, u32 version (= 1), u64 sample count,
//! u64 n, u64 d, u32 flags (bit 0: labels present), then for every sample an
//! optional i8 label followed by `n * d` f64 values in row-major order.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{normalize_rows, LabeledDataset, TokenMatrix};
use crate::error::{Result, WsError};

pub const MAGIC: [u8; 4] = *b"EMB1";
pub const VERSION: u32 = 1;
pub const FLAG_LABELS: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub count: u64,
    pub n: u64,
    pub d: u64,
    pub flags: u32,
}

impl Header {
    pub fn has_labels(&self) -> bool {
        self.flags & FLAG_LABELS != 0
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Keep only the leading `(n', d')` block of every sample.
    pub truncate: Option<(usize, usize)>,
    /// Rescale rows to norm `sqrt(d)` after truncation.
    pub normalize: bool,
}

pub(crate) fn short(e: io::Error) -> WsError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        WsError::ShortRead
    } else {
        WsError::Io(e)
    }
}

pub(crate) fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(short)?;
    Ok(buf)
}

pub fn read_header(r: &mut impl Read) -> Result<Header> {
    let magic = read_array::<4>(r)?;
    if magic != MAGIC {
        return Err(WsError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(WsError::VersionUnsupported(version));
    }
    Ok(Header {
        version,
        count: u64::from_le_bytes(read_array(r)?),
        n: u64::from_le_bytes(read_array(r)?),
        d: u64::from_le_bytes(read_array(r)?),
        flags: u32::from_le_bytes(read_array(r)?),
    })
}

pub fn read_from(r: &mut impl Read, opts: &ReadOptions) -> Result<LabeledDataset> {
    let header = read_header(r)?;
    let (n, d) = (header.n as usize, header.d as usize);
    if let Some((tn, td)) = opts.truncate {
        if tn == 0 || td == 0 || tn > n || td > d {
            return Err(WsError::TruncationTooLarge { req_n: tn, req_d: td, n, d });
        }
    }
    let mut samples = Vec::with_capacity(header.count as usize);
    let mut labels = header.has_labels().then(Vec::new);
    let mut buf = vec![0u8; n * d * 8];
    for _ in 0..header.count {
        if let Some(labels) = labels.as_mut() {
            let label = read_array::<1>(r)?[0] as i8;
            if label != 1 && label != -1 {
                return Err(WsError::BadLabel(label as i64));
            }
            labels.push(label);
        }
        r.read_exact(&mut buf).map_err(short)?;
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut sample = TokenMatrix::from_row_major(n, d, &values)?;
        if let Some((tn, td)) = opts.truncate {
            sample = sample.truncate(tn, td)?;
        }
        if opts.normalize {
            sample = normalize_rows(&sample)?;
        }
        samples.push(sample);
    }
    LabeledDataset::new(samples, labels)
}

pub fn write_to(w: &mut impl Write, dataset: &LabeledDataset) -> Result<()> {
    let (n, d) = dataset.shape().unwrap_or((0, 0));
    let flags = if dataset.labels().is_some() { FLAG_LABELS } else { 0 };
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dataset.len() as u64).to_le_bytes())?;
    w.write_all(&(n as u64).to_le_bytes())?;
    w.write_all(&(d as u64).to_le_bytes())?;
    w.write_all(&flags.to_le_bytes())?;
    for (idx, sample) in dataset.samples().iter().enumerate() {
        if let Some(labels) = dataset.labels() {
            w.write_all(&[labels[idx] as u8])?;
        }
        for v in sample.row_major_iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read(path: impl AsRef<Path>, opts: &ReadOptions) -> Result<LabeledDataset> {
    let mut r = BufReader::new(File::open(path)?);
    read_from(&mut r, opts)
}

pub fn write(path: impl AsRef<Path>, dataset: &LabeledDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(&mut w, dataset)?;
    w.flush()?;
    Ok(())
}

pub fn to_bytes(dataset: &LabeledDataset) -> Vec<u8> {
    let mut out = Vec::new();
    write_to(&mut out, dataset).expect("writing to memory cannot fail");
    out
}
