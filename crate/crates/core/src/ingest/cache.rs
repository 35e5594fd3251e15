//! Binary feature-table cache.
//!
//! Layout (little-endian): magic `AFT1`, u32 row count, u32 width, `width`
//! length-prefixed UTF-8 feature names, row-major f32 features, then in order
//! f32 targets, a u8 label flag with one u8 region code per row when set,
//! per-row f32 (mlat, mlt), per-row i64 time and per-row u32 satellite id.

use super::features::{FeatureSchema, FeatureTable};
use super::IngestError;
use crate::codec::{DecodeError, Reader, Writer};
use crate::geomodel::{MagCoord, Region};

pub const TABLE_MAGIC: &str = "AFT1";

pub fn encode_table(table: &FeatureTable) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(TABLE_MAGIC.as_bytes());
    w.len_u32(table.len());
    w.len_u32(table.width());
    for name in table.schema.names() {
        w.str(&name);
    }
    for &v in &table.rows {
        w.f32(v as f32);
    }
    for &v in &table.target {
        w.f32(v as f32);
    }
    match &table.region {
        Some(labels) => {
            w.u8(1);
            labels.iter().for_each(|r| w.u8(r.index() as u8));
        }
        None => w.u8(0),
    }
    for c in &table.coord {
        w.f32(c.mlat() as f32);
        w.f32(c.mlt() as f32);
    }
    table.t.iter().for_each(|&t| w.i64(t));
    table.sat_id.iter().for_each(|&s| w.u32(s));
    w.into_inner()
}

pub fn decode_table(bytes: &[u8]) -> Result<FeatureTable, IngestError> {
    let mut r = Reader::new(bytes);
    r.magic(TABLE_MAGIC)?;
    let n = r.u32()? as usize;
    let width = r.count(4)?;
    let names = (0..width).map(|_| r.str()).collect::<Result<Vec<_>, _>>()?;
    let schema = FeatureSchema::from_names(&names)?;
    // every row carries at least features, target, coords, time and id
    if n.saturating_mul(width.saturating_mul(4).saturating_add(24)) > r.remaining() {
        return Err(DecodeError::Truncated(r.position()).into());
    }
    let rows: Vec<f64> = r.f32_vec(n * width)?.into_iter().map(f64::from).collect();
    let target: Vec<f64> = r.f32_vec(n)?.into_iter().map(f64::from).collect();
    let region = match r.u8()? {
        0 => None,
        1 => Some(
            (0..n)
                .map(|_| {
                    let code = r.u8()?;
                    Region::from_index(code as usize)
                        .ok_or_else(|| DecodeError::Invalid(format!("bad region code {code}")))
                })
                .collect::<Result<Vec<_>, _>>()?,
        ),
        flag => return Err(DecodeError::Invalid(format!("bad label flag {flag}")).into()),
    };
    let mut coord = Vec::with_capacity(n);
    for _ in 0..n {
        let mlat = f64::from(r.f32()?);
        let mlt = f64::from(r.f32()?);
        coord.push(MagCoord::new(mlat, mlt).map_err(|e| DecodeError::Invalid(e.to_string()))?);
    }
    let t = (0..n).map(|_| r.i64()).collect::<Result<Vec<_>, _>>()?;
    let sat_id = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    if rows.iter().chain(&target).any(|v| !v.is_finite()) {
        return Err(DecodeError::Invalid("non-finite feature or target".into()).into());
    }
    let mut table = FeatureTable { schema, rows, target, region, t, coord, sat_id, normalization: None };
    if !table.is_empty() {
        table.fit_normalization();
    }
    Ok(table)
}
