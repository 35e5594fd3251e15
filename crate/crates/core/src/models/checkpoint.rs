//! Model checkpoint format.
//!
//! Layout (little-endian): magic `AURN`, u16 version, architecture descriptor
//! (u8 tag then tag-specific u32 widths/shapes and f64 dropout), feature names,
//! f64 normalization mean and std, string key/value metadata, named parameter
//! blocks (name, u8 rank, u32 dims, f32 values), and a CRC32 of every
//! preceding byte.

use std::fs;
use std::path::Path;

use super::{Arch, BaselineArch, ConvDecoderArch, DeconvLayer, Model, ModelError, MultiTaskArch, ParamStore};
use crate::autodiff::Tensor;
use crate::codec::{DecodeError, Reader, Writer};
use crate::ingest::{FeatureSchema, Normalization};

pub const CHECKPOINT_MAGIC: &str = "AURN";
const VERSION: u16 = 1;

fn put_widths(w: &mut Writer, widths: &[usize]) {
    w.len_u32(widths.len());
    widths.iter().for_each(|&v| w.len_u32(v));
}

fn get_widths(r: &mut Reader<'_>) -> Result<Vec<usize>, DecodeError> {
    let n = r.count(4)?;
    (0..n).map(|_| r.u32().map(|v| v as usize)).collect()
}

fn put_arch(w: &mut Writer, arch: &Arch) {
    match arch {
        Arch::Baseline(a) => {
            w.u8(0);
            put_widths(w, &a.widths);
            w.f64(a.dropout);
        }
        Arch::MultiTask(a) => {
            w.u8(1);
            put_widths(w, &a.trunk);
            w.len_u32(a.n_classes);
            w.f64(a.dropout);
        }
        Arch::ConvDecoder(a) => {
            w.u8(2);
            put_widths(w, &a.trunk);
            w.len_u32(a.base);
            w.len_u32(a.deconv.len());
            for l in &a.deconv {
                w.len_u32(l.channels);
                w.len_u32(l.kernel);
                w.len_u32(l.stride);
            }
            w.len_u32(a.final_kernel);
            w.len_u32(a.overlap);
            w.f64(a.dropout);
            w.len_u32(a.n_lat);
            w.len_u32(a.n_mlt);
        }
    }
}

fn get_arch(r: &mut Reader<'_>) -> Result<Arch, DecodeError> {
    let u = |r: &mut Reader<'_>| r.u32().map(|v| v as usize);
    Ok(match r.u8()? {
        0 => Arch::Baseline(BaselineArch { widths: get_widths(r)?, dropout: r.f64()? }),
        1 => Arch::MultiTask(MultiTaskArch { trunk: get_widths(r)?, n_classes: u(r)?, dropout: r.f64()? }),
        2 => {
            let trunk = get_widths(r)?;
            let base = u(r)?;
            let n = r.count(12)?;
            let deconv = (0..n)
                .map(|_| Ok(DeconvLayer { channels: u(r)?, kernel: u(r)?, stride: u(r)? }))
                .collect::<Result<Vec<_>, DecodeError>>()?;
            Arch::ConvDecoder(ConvDecoderArch {
                trunk,
                base,
                deconv,
                final_kernel: u(r)?,
                overlap: u(r)?,
                dropout: r.f64()?,
                n_lat: u(r)?,
                n_mlt: u(r)?,
            })
        }
        tag => return Err(DecodeError::Invalid(format!("unknown architecture tag {tag}"))),
    })
}

/// Serializes `model`; parameters are written as 32-bit floats.
pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC.as_bytes());
    w.u16(VERSION);
    put_arch(&mut w, &model.arch);
    let names = model.schema.names();
    w.len_u32(names.len());
    names.iter().for_each(|n| w.str(n));
    w.len_u32(model.normalization.width());
    model.normalization.mean.iter().for_each(|&v| w.f64(v));
    model.normalization.std.iter().for_each(|&v| w.f64(v));
    w.len_u32(model.meta.len());
    for (k, v) in &model.meta {
        w.str(k);
        w.str(v);
    }
    w.len_u32(model.params.blocks.len());
    for (name, t) in &model.params.blocks {
        w.str(name);
        w.u8(t.shape().len() as u8);
        t.shape().iter().for_each(|&d| w.len_u32(d));
        t.data().iter().for_each(|&v| w.f32(v as f32));
    }
    let crc = crc32fast::hash(w.as_slice());
    w.u32(crc);
    w.into_inner()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model, ModelError> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(DecodeError::UnsupportedVersion(version).into());
    }
    if bytes.len() < 10 {
        return Err(DecodeError::Truncated(bytes.len()).into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(DecodeError::Checksum.into());
    }
    let mut r = Reader::new(body);
    r.take(CHECKPOINT_MAGIC.len() + 2)?;
    let arch = get_arch(&mut r)?;
    arch.validate()?;

    let n_names = r.count(4)?;
    let names = (0..n_names).map(|_| r.str()).collect::<Result<Vec<_>, _>>()?;
    let schema = FeatureSchema::from_names(&names).map_err(|e| DecodeError::Invalid(e.to_string()))?;
    let width = r.count(16)?;
    let mean = (0..width).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    let std = (0..width).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    let n_meta = r.count(8)?;
    let meta = (0..n_meta).map(|_| Ok((r.str()?, r.str()?))).collect::<Result<Vec<_>, DecodeError>>()?;

    let n_blocks = r.count(6)?;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let name = r.str()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| DecodeError::Invalid(format!("block '{name}' is too large")))?;
        let data: Vec<f64> = r.f32_vec(len)?.into_iter().map(f64::from).collect();
        let t = Tensor::new(shape, data).map_err(|e| DecodeError::Invalid(format!("block '{name}': {e}")))?;
        blocks.push((name, t));
    }
    r.finish()?;
    let params = ParamStore { blocks };
    if params.blocks.iter().any(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
        return Err(DecodeError::Invalid("non-finite parameter".into()).into());
    }
    let mut model = Model::new(arch, params, schema, Normalization { mean, std })?;
    model.meta = meta;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), ModelError> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, ModelError> {
    decode_checkpoint(&fs::read(path)?)
}
