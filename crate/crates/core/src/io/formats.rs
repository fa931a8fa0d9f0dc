//! Bit-exact binary formats: correspondence files, occupancy chunks, and
//! encoder checkpoints. All multi-byte values are little-endian behind an
//! explicit header tag; well-formed files re-serialize byte-identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{io_err, IoError};
use crate::contrastive::EncoderParams;
use crate::matching::{CorrespondenceSet, FramePair, PixelMatch};
use crate::voxels::OccupancyChunk;

const CORR_MAGIC: &[u8; 8] = b"PRI3DCOR";
const CHUNK_MAGIC: &[u8; 8] = b"PRI3DCHK";
const CKPT_MAGIC: &[u8; 8] = b"PRI3DENC";
const FORMAT_VERSION: u32 = 1;
const LITTLE_ENDIAN_TAG: u8 = 1;

fn open_reader(path: &Path) -> Result<BufReader<File>, IoError> {
    File::open(path).map(BufReader::new).map_err(|e| io_err(path, e))
}

fn create_writer(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn truncated(what: &str) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            IoError::TruncatedFile(what.to_string())
        } else {
            IoError::Io { path: what.into(), source: e }
        }
    }
}

fn check_header<R: Read>(
    r: &mut R,
    magic: &'static [u8; 8],
    name: &'static str,
) -> Result<(), IoError> {
    let mut got = [0u8; 8];
    r.read_exact(&mut got).map_err(truncated(name))?;
    if &got != magic {
        return Err(IoError::BadMagic { expected: name });
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated(name))?;
    if version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let endian = r.read_u8().map_err(truncated(name))?;
    if endian != LITTLE_ENDIAN_TAG {
        return Err(IoError::Corrupt(format!("unknown endianness tag {endian}")));
    }
    Ok(())
}

fn write_header<W: Write>(w: &mut W, magic: &[u8; 8]) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u8(LITTLE_ENDIAN_TAG)
}

fn expect_eof<R: Read>(r: &mut R, path: &Path) -> Result<(), IoError> {
    let mut one = [0u8; 1];
    match r.read(&mut one) {
        Ok(0) => Ok(()),
        Ok(_) => Err(IoError::TrailingBytes(path.to_path_buf())),
        Err(e) => Err(io_err(path, e)),
    }
}

pub fn save_correspondences(path: &Path, set: &CorrespondenceSet) -> Result<(), IoError> {
    let mut w = create_writer(path)?;
    let res = (|| -> std::io::Result<()> {
        write_header(&mut w, CORR_MAGIC)?;
        w.write_u32::<LittleEndian>(set.frame_a)?;
        w.write_u32::<LittleEndian>(set.frame_b)?;
        w.write_u64::<LittleEndian>(set.valid_a)?;
        w.write_u64::<LittleEndian>(set.valid_b)?;
        let overlap = crate::matching::compute_overlap(set).unwrap_or(0.0);
        w.write_f64::<LittleEndian>(overlap)?;
        w.write_u64::<LittleEndian>(set.matches.len() as u64)?;
        for m in &set.matches {
            w.write_u16::<LittleEndian>(m.pixel_a.0)?;
            w.write_u16::<LittleEndian>(m.pixel_a.1)?;
            w.write_u16::<LittleEndian>(m.pixel_b.0)?;
            w.write_u16::<LittleEndian>(m.pixel_b.1)?;
            w.write_f32::<LittleEndian>(m.distance)?;
        }
        w.flush()
    })();
    res.map_err(|e| io_err(path, e))
}

pub fn load_correspondences(path: &Path) -> Result<CorrespondenceSet, IoError> {
    let mut r = open_reader(path)?;
    let name = "correspondence file";
    check_header(&mut r, CORR_MAGIC, name)?;
    let frame_a = r.read_u32::<LittleEndian>().map_err(truncated(name))?;
    let frame_b = r.read_u32::<LittleEndian>().map_err(truncated(name))?;
    let valid_a = r.read_u64::<LittleEndian>().map_err(truncated(name))?;
    let valid_b = r.read_u64::<LittleEndian>().map_err(truncated(name))?;
    let _overlap = r.read_f64::<LittleEndian>().map_err(truncated(name))?;
    let count = r.read_u64::<LittleEndian>().map_err(truncated(name))?;
    let mut matches = Vec::with_capacity(count.min(1 << 24) as usize);
    for _ in 0..count {
        let ua = r.read_u16::<LittleEndian>().map_err(truncated(name))?;
        let va = r.read_u16::<LittleEndian>().map_err(truncated(name))?;
        let ub = r.read_u16::<LittleEndian>().map_err(truncated(name))?;
        let vb = r.read_u16::<LittleEndian>().map_err(truncated(name))?;
        let distance = r.read_f32::<LittleEndian>().map_err(truncated(name))?;
        matches.push(PixelMatch { pixel_a: (ua, va), pixel_b: (ub, vb), distance });
    }
    expect_eof(&mut r, path)?;
    Ok(CorrespondenceSet { frame_a, frame_b, valid_a, valid_b, matches })
}

pub fn save_chunk(path: &Path, chunk: &OccupancyChunk) -> Result<(), IoError> {
    let mut w = create_writer(path)?;
    let res = (|| -> std::io::Result<()> {
        write_header(&mut w, CHUNK_MAGIC)?;
        w.write_u32::<LittleEndian>(chunk.frame_index)?;
        for c in chunk.origin {
            w.write_f64::<LittleEndian>(c)?;
        }
        w.write_f64::<LittleEndian>(chunk.voxel)?;
        for d in chunk.dims {
            w.write_u32::<LittleEndian>(d)?;
        }
        w.write_u64::<LittleEndian>(chunk.occupied().len() as u64)?;
        for &idx in chunk.occupied() {
            w.write_u64::<LittleEndian>(idx)?;
        }
        w.flush()
    })();
    res.map_err(|e| io_err(path, e))
}

pub fn load_chunk(path: &Path) -> Result<OccupancyChunk, IoError> {
    let mut r = open_reader(path)?;
    let name = "chunk file";
    check_header(&mut r, CHUNK_MAGIC, name)?;
    let frame_index = r.read_u32::<LittleEndian>().map_err(truncated(name))?;
    let mut origin = [0.0f64; 3];
    for c in origin.iter_mut() {
        *c = r.read_f64::<LittleEndian>().map_err(truncated(name))?;
    }
    let voxel = r.read_f64::<LittleEndian>().map_err(truncated(name))?;
    if !(voxel > 0.0 && voxel.is_finite()) {
        return Err(IoError::Corrupt(format!("voxel size {voxel} must be positive")));
    }
    let mut dims = [0u32; 3];
    for d in dims.iter_mut() {
        *d = r.read_u32::<LittleEndian>().map_err(truncated(name))?;
    }
    let count = r.read_u64::<LittleEndian>().map_err(truncated(name))?;
    let cap = dims[0] as u64 * dims[1] as u64 * dims[2] as u64;
    let mut occupied = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut prev: Option<u64> = None;
    for _ in 0..count {
        let idx = r.read_u64::<LittleEndian>().map_err(truncated(name))?;
        if idx >= cap {
            return Err(IoError::Corrupt(format!("voxel index {idx} outside dims {dims:?}")));
        }
        if prev.is_some_and(|p| idx <= p) {
            return Err(IoError::Corrupt("occupied indices must be strictly increasing".into()));
        }
        prev = Some(idx);
        occupied.push(idx);
    }
    expect_eof(&mut r, path)?;
    Ok(OccupancyChunk::new(frame_index, origin, voxel, dims, occupied))
}

pub fn save_checkpoint(path: &Path, params: &EncoderParams) -> Result<(), IoError> {
    let mut w = create_writer(path)?;
    let res = (|| -> std::io::Result<()> {
        write_header(&mut w, CKPT_MAGIC)?;
        w.write_u32::<LittleEndian>(params.dim as u32)?;
        w.write_u8(params.normalize as u8)?;
        for tensor in params.tensor_refs() {
            w.write_u64::<LittleEndian>(tensor.len() as u64)?;
            for &x in tensor {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        w.flush()
    })();
    res.map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams, IoError> {
    let mut r = open_reader(path)?;
    let name = "checkpoint file";
    check_header(&mut r, CKPT_MAGIC, name)?;
    let dim = r.read_u32::<LittleEndian>().map_err(truncated(name))? as usize;
    if dim == 0 || dim > 4096 {
        return Err(IoError::Corrupt(format!("implausible feature dimension {dim}")));
    }
    let normalize = match r.read_u8().map_err(truncated(name))? {
        0 => false,
        1 => true,
        other => return Err(IoError::Corrupt(format!("bad normalize flag {other}"))),
    };
    let mut params = EncoderParams::init(dim, normalize, 0);
    let expected: Vec<usize> = params.tensor_refs().iter().map(|t| t.len()).collect();
    for (tensor, want) in params.tensor_muts().into_iter().zip(expected) {
        let len = r.read_u64::<LittleEndian>().map_err(truncated(name))? as usize;
        if len != want {
            return Err(IoError::Corrupt(format!(
                "tensor length {len} does not match architecture ({want})"
            )));
        }
        for x in tensor.iter_mut() {
            *x = r.read_f64::<LittleEndian>().map_err(truncated(name))?;
        }
    }
    expect_eof(&mut r, path)?;
    if !params.is_finite() {
        return Err(IoError::Corrupt("checkpoint contains non-finite parameters".into()));
    }
    Ok(params)
}

/// Retained frame pairs with the mining parameters that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairsFile {
    pub version: u32,
    pub frame_stride: usize,
    pub min_overlap: f64,
    pub radius: f64,
    pub pixel_stride: u32,
    pub pairs: Vec<FramePair>,
}

pub fn save_pairs(path: &Path, pairs: &PairsFile) -> Result<(), IoError> {
    let json = serde_json::to_string_pretty(pairs)?;
    std::fs::write(path, json).map_err(|e| io_err(path, e))
}

pub fn load_pairs(path: &Path) -> Result<PairsFile, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let parsed: PairsFile = serde_json::from_str(&text)?;
    if parsed.version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion(parsed.version));
    }
    Ok(parsed)
}
