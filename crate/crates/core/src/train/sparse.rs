//! Composited sparse map targets for the decoder.
//!
//! Cache layout (little-endian): magic `ASP1`, u32 sample count, u32 width,
//! `width` feature names, u32 n_lat, u32 n_mlt, f64 lat_min, f64 lat_max, then
//! per sample an i64 centre time, `width` f32 raw features, a u32 observed-cell
//! count and that many (u32 flat index, f32 log10 flux) pairs.

use crate::codec::{DecodeError, Reader, Writer};
use crate::geomodel::{DriverSeries, GridMap, GridSpec, Observation};
use crate::ingest::{global_features, FeatureSchema, Normalization};

use super::TrainError;

/// Half-width of the compositing window in seconds; the window is closed.
pub const WINDOW_HALF_S: i64 = 150;

pub const SPARSE_MAGIC: &str = "ASP1";

#[derive(Debug, Clone, PartialEq)]
pub struct SparseSample {
    pub t_center: i64,
    /// Raw global features at `t_center`.
    pub features: Vec<f64>,
    pub target: GridMap,
}

/// Bins observations with `|t - t_center| <= 150 s` onto the grid, averaging
/// log10 flux per cell. Non-positive fluxes are ignored.
pub fn composite_window(obs: &[Observation], t_center: i64, spec: GridSpec) -> Result<GridMap, TrainError> {
    composite_iter(obs.iter().filter(|o| (o.t - t_center).abs() <= WINDOW_HALF_S), spec)
        .ok_or(TrainError::EmptyWindow { t_center })
}

fn composite_iter<'a>(obs: impl Iterator<Item = &'a Observation>, spec: GridSpec) -> Option<GridMap> {
    let mut sum = vec![0.0; spec.len()];
    let mut count = vec![0u32; spec.len()];
    for o in obs {
        if !(o.eflux > 0.0) {
            continue;
        }
        let (r, c) = spec.cell_of(o.coord);
        let i = spec.flat(r, c);
        sum[i] += o.eflux.log10();
        count[i] += 1;
    }
    let mut map = GridMap::empty(spec);
    for i in 0..spec.len() {
        if count[i] > 0 {
            map.mask[i] = true;
            map.values[i] = sum[i] / f64::from(count[i]);
        }
    }
    (map.observed_count() > 0).then_some(map)
}

/// One sample every `step` seconds from the first observation time on. Centres
/// with an empty window or without enough driver history are skipped; the
/// second return value counts them.
pub fn build_sparse_samples(
    drivers: &DriverSeries,
    obs: &[Observation],
    schema: &FeatureSchema,
    spec: GridSpec,
    step: i64,
) -> Result<(Vec<SparseSample>, usize), TrainError> {
    if schema.has_spatial() {
        return Err(TrainError::Config("sparse samples take global features only".into()));
    }
    if step <= 0 {
        return Err(TrainError::Config(format!("sample step must be positive, got {step}")));
    }
    let mut sorted: Vec<&Observation> = obs.iter().collect();
    sorted.sort_by_key(|o| o.t);
    let (Some(first), Some(last)) = (sorted.first(), sorted.last()) else {
        return Err(TrainError::EmptyData("no observations".into()));
    };
    let (t_first, t_last) = (first.t, last.t);
    let mut samples = Vec::new();
    let mut skipped = 0;
    let mut t = t_first;
    while t <= t_last {
        let lo = sorted.partition_point(|o| o.t < t - WINDOW_HALF_S);
        let hi = sorted.partition_point(|o| o.t <= t + WINDOW_HALF_S);
        match (composite_iter(sorted[lo..hi].iter().copied(), spec), global_features(drivers, t, schema)) {
            (Some(target), Some(features)) => samples.push(SparseSample { t_center: t, features, target }),
            _ => skipped += 1,
        }
        t += step;
    }
    Ok((samples, skipped))
}

/// Validation = the last `fraction` of sample centres in time.
pub fn split_sparse(samples: &[SparseSample], fraction: f64) -> (Vec<SparseSample>, Vec<SparseSample>) {
    let times: Vec<i64> = samples.iter().map(|s| s.t_center).collect();
    let range = crate::ingest::TimeRange::final_fraction(&times, fraction);
    samples.iter().cloned().partition(|s| !range.contains(s.t_center))
}

pub fn fit_sparse_normalization(samples: &[SparseSample]) -> Option<Normalization> {
    let width = samples.first()?.features.len();
    let rows: Vec<f64> = samples.iter().flat_map(|s| s.features.iter().copied()).collect();
    Some(Normalization::fit(&rows, width))
}

pub fn encode_sparse(samples: &[SparseSample], schema: &FeatureSchema, spec: GridSpec) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(SPARSE_MAGIC.as_bytes());
    w.len_u32(samples.len());
    w.len_u32(schema.width());
    schema.names().iter().for_each(|n| w.str(n));
    w.len_u32(spec.n_lat);
    w.len_u32(spec.n_mlt);
    w.f64(spec.lat_min);
    w.f64(spec.lat_max);
    for s in samples {
        w.i64(s.t_center);
        s.features.iter().for_each(|&v| w.f32(v as f32));
        w.len_u32(s.target.observed_count());
        for (i, v) in s.target.observed() {
            w.len_u32(i);
            w.f32(v as f32);
        }
    }
    w.into_inner()
}

pub fn decode_sparse(bytes: &[u8]) -> Result<(Vec<SparseSample>, FeatureSchema, GridSpec), TrainError> {
    let invalid = |m: String| TrainError::from(DecodeError::Invalid(m));
    let mut r = Reader::new(bytes);
    r.magic(SPARSE_MAGIC)?;
    let n = r.u32()? as usize;
    let width = r.count(4)?;
    let names = (0..width).map(|_| r.str()).collect::<Result<Vec<_>, _>>()?;
    let schema = FeatureSchema::from_names(&names).map_err(|e| invalid(e.to_string()))?;
    if schema.has_spatial() {
        return Err(invalid("sparse cache contains spatial features".into()));
    }
    let spec = GridSpec { n_lat: r.u32()? as usize, n_mlt: r.u32()? as usize, lat_min: r.f64()?, lat_max: r.f64()? };
    spec.validate().map_err(|e| invalid(e.to_string()))?;
    if spec.n_lat.checked_mul(spec.n_mlt).is_none_or(|c| c > 1 << 24) {
        return Err(invalid("grid too large".into()));
    }
    if n.saturating_mul(width.saturating_mul(4).saturating_add(12)) > r.remaining() {
        return Err(DecodeError::Truncated(r.position()).into());
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let t_center = r.i64()?;
        let features: Vec<f64> = r.f32_vec(width)?.into_iter().map(f64::from).collect();
        let cells = r.count(8)?;
        if cells == 0 {
            return Err(invalid(format!("sample at {t_center} has no observed cells")));
        }
        let mut target = GridMap::empty(spec);
        for _ in 0..cells {
            let i = r.u32()? as usize;
            let v = f64::from(r.f32()?);
            if i >= spec.len() || target.mask[i] || !v.is_finite() {
                return Err(invalid(format!("bad cell {i} in sample at {t_center}")));
            }
            target.mask[i] = true;
            target.values[i] = v;
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite feature in sample at {t_center}")));
        }
        samples.push(SparseSample { t_center, features, target });
    }
    r.finish()?;
    Ok((samples, schema, spec))
}
