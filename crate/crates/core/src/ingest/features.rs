use std::f64::consts::PI;
use std::fmt;

use super::IngestError;
use crate::geomodel::{DriverSeries, MagCoord, Observation, Region, DRIVER_VARIABLES, MLAT_MIN};

/// Instantaneous lags in minutes before the observation.
pub const DEFAULT_LAGS_MIN: [u32; 4] = [0, 5, 10, 15];
/// Trailing-window lengths in minutes; each window ends at the observation.
pub const DEFAULT_AVERAGES_MIN: [u32; 6] = [30, 45, 60, 180, 300, 360];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureKind {
    SinMlt,
    CosMlt,
    MlatScaled,
    /// Nearest driver sample to `t - minutes`.
    Lag { var: String, minutes: u32 },
    /// Mean of driver samples with time in `(t - minutes, t]`.
    Average { var: String, minutes: u32 },
}

impl FeatureKind {
    pub fn is_spatial(&self) -> bool {
        matches!(self, FeatureKind::SinMlt | FeatureKind::CosMlt | FeatureKind::MlatScaled)
    }

    fn parse(name: &str) -> Option<Self> {
        match name {
            "sin_mlt" => return Some(FeatureKind::SinMlt),
            "cos_mlt" => return Some(FeatureKind::CosMlt),
            "mlat_scaled" => return Some(FeatureKind::MlatScaled),
            _ => {}
        }
        let (var, tail) = name.rsplit_once('_')?;
        let minutes = |s: &str| s.strip_suffix('m')?.parse::<u32>().ok();
        if var.is_empty() {
            return None;
        }
        if let Some(m) = tail.strip_prefix("lag").and_then(minutes) {
            Some(FeatureKind::Lag { var: var.into(), minutes: m })
        } else if let Some(m) = tail.strip_prefix("avg").and_then(minutes) {
            (m > 0).then(|| FeatureKind::Average { var: var.into(), minutes: m })
        } else {
            None
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureKind::SinMlt => f.write_str("sin_mlt"),
            FeatureKind::CosMlt => f.write_str("cos_mlt"),
            FeatureKind::MlatScaled => f.write_str("mlat_scaled"),
            FeatureKind::Lag { var, minutes } => write!(f, "{var}_lag{minutes}m"),
            FeatureKind::Average { var, minutes } => write!(f, "{var}_avg{minutes}m"),
        }
    }
}

/// Ordered list of engineered features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSchema {
    kinds: Vec<FeatureKind>,
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self::build(&DRIVER_VARIABLES, &DEFAULT_LAGS_MIN, &DEFAULT_AVERAGES_MIN, true)
            .expect("default schema is valid")
    }
}

impl FeatureSchema {
    /// Spatial block (when requested) followed by, per variable, its lags then its averages.
    pub fn build<S: AsRef<str>>(
        variables: &[S],
        lags_min: &[u32],
        averages_min: &[u32],
        spatial: bool,
    ) -> Result<Self, IngestError> {
        let mut kinds = Vec::new();
        if spatial {
            kinds.extend([FeatureKind::SinMlt, FeatureKind::CosMlt, FeatureKind::MlatScaled]);
        }
        for v in variables {
            let var = v.as_ref().to_string();
            if var.is_empty() || var.contains(',') {
                return Err(IngestError::Schema(format!("invalid variable name '{var}'")));
            }
            kinds.extend(lags_min.iter().map(|&m| FeatureKind::Lag { var: var.clone(), minutes: m }));
            for &m in averages_min {
                if m == 0 {
                    return Err(IngestError::Schema("averaging window must be positive".into()));
                }
                kinds.push(FeatureKind::Average { var: var.clone(), minutes: m });
            }
        }
        Self::from_kinds(kinds)
    }

    pub fn from_kinds(kinds: Vec<FeatureKind>) -> Result<Self, IngestError> {
        if kinds.is_empty() {
            return Err(IngestError::Schema("schema has no features".into()));
        }
        let names: Vec<String> = kinds.iter().map(ToString::to_string).collect();
        let mut sorted = names.clone();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(IngestError::Schema(format!("duplicate feature '{}'", w[0])));
        }
        Ok(Self { kinds })
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self, IngestError> {
        let kinds = names
            .iter()
            .map(|n| {
                FeatureKind::parse(n.as_ref())
                    .ok_or_else(|| IngestError::Schema(format!("unrecognized feature name '{}'", n.as_ref())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_kinds(kinds)
    }

    pub fn kinds(&self) -> &[FeatureKind] {
        &self.kinds
    }

    pub fn names(&self) -> Vec<String> {
        self.kinds.iter().map(ToString::to_string).collect()
    }

    pub fn width(&self) -> usize {
        self.kinds.len()
    }

    pub fn has_spatial(&self) -> bool {
        self.kinds.iter().any(FeatureKind::is_spatial)
    }

    /// The same schema with the spatial block removed.
    pub fn without_spatial(&self) -> Result<Self, IngestError> {
        Self::from_kinds(self.kinds.iter().filter(|k| !k.is_spatial()).cloned().collect())
    }

    pub fn variables(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for k in &self.kinds {
            if let FeatureKind::Lag { var, .. } | FeatureKind::Average { var, .. } = k {
                if !out.contains(&var.as_str()) {
                    out.push(var);
                }
            }
        }
        out
    }
}

pub fn spatial_features(coord: MagCoord) -> [f64; 3] {
    let angle = 2.0 * PI * coord.mlt() / 24.0;
    [angle.sin(), angle.cos(), (coord.mlat() - MLAT_MIN) / 45.0]
}

fn lag_value(col: &[f64], drivers: &DriverSeries, t: i64, minutes: u32) -> Option<f64> {
    let cad = drivers.cadence;
    let off = t - i64::from(minutes) * 60 - drivers.t0;
    if off < 0 {
        return None;
    }
    // nearest sample, ties resolved toward the earlier one
    let k = ((2 * off + cad - 1) / (2 * cad)) as usize;
    col.get(k).copied()
}

fn average_value(col: &[f64], drivers: &DriverSeries, t: i64, minutes: u32) -> Option<f64> {
    let cad = drivers.cadence;
    let start = t - i64::from(minutes) * 60 - drivers.t0;
    if start < 0 {
        return None;
    }
    let hi = ((t - drivers.t0) / cad) as usize;
    let lo = (start / cad) as usize + 1;
    if hi >= col.len() || lo > hi {
        return None;
    }
    let window = &col[lo..=hi];
    Some(window.iter().sum::<f64>() / window.len() as f64)
}

/// Driver-derived features for time `t`, in schema order, skipping spatial entries.
/// `None` when the driver history does not cover `t`.
pub fn global_features(drivers: &DriverSeries, t: i64, schema: &FeatureSchema) -> Option<Vec<f64>> {
    if t < drivers.t0 || t > drivers.t_end() {
        return None;
    }
    let mut out = Vec::with_capacity(schema.width());
    for kind in &schema.kinds {
        match kind {
            FeatureKind::Lag { var, minutes } => {
                out.push(lag_value(drivers.column(var)?, drivers, t, *minutes)?);
            }
            FeatureKind::Average { var, minutes } => {
                out.push(average_value(drivers.column(var)?, drivers, t, *minutes)?);
            }
            _ => {}
        }
    }
    Some(out)
}

/// Full feature row for one location and time.
pub fn feature_row(
    drivers: &DriverSeries,
    t: i64,
    coord: MagCoord,
    schema: &FeatureSchema,
) -> Option<Vec<f64>> {
    let global = global_features(drivers, t, schema)?;
    Some(assemble_row(schema, coord, &global))
}

fn assemble_row(schema: &FeatureSchema, coord: MagCoord, global: &[f64]) -> Vec<f64> {
    let spatial = spatial_features(coord);
    let mut g = global.iter();
    schema
        .kinds
        .iter()
        .map(|k| match k {
            FeatureKind::SinMlt => spatial[0],
            FeatureKind::CosMlt => spatial[1],
            FeatureKind::MlatScaled => spatial[2],
            _ => *g.next().expect("global block matches schema"),
        })
        .collect()
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Population statistics; zero-variance columns get `std = 1`.
    pub fn fit(rows: &[f64], width: usize) -> Self {
        let n = rows.len() / width;
        let mut mean = vec![0.0; width];
        for r in rows.chunks_exact(width) {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; width];
        for r in rows.chunks_exact(width) {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, row: &[f64], out: &mut Vec<f64>) {
        out.extend(row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s));
    }

    pub fn apply(&self, rows: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len());
        for r in rows.chunks_exact(self.width()) {
            self.apply_row(r, &mut out);
        }
        out
    }
}

/// Training-ready samples. `rows` holds raw (unnormalized) features row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub schema: FeatureSchema,
    pub rows: Vec<f64>,
    /// log10 flux
    pub target: Vec<f64>,
    pub region: Option<Vec<Region>>,
    pub t: Vec<i64>,
    pub coord: Vec<MagCoord>,
    pub sat_id: Vec<u32>,
    pub normalization: Option<Normalization>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn width(&self) -> usize {
        self.schema.width()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.rows[i * w..(i + 1) * w]
    }

    /// Rows after z-scoring; raw rows when no normalization is attached.
    pub fn normalized_rows(&self) -> Vec<f64> {
        match &self.normalization {
            Some(n) => n.apply(&self.rows),
            None => self.rows.clone(),
        }
    }

    pub fn fit_normalization(&mut self) {
        self.normalization = Some(Normalization::fit(&self.rows, self.width()));
    }

    pub fn subset(&self, idx: &[usize]) -> FeatureTable {
        let mut rows = Vec::with_capacity(idx.len() * self.width());
        for &i in idx {
            rows.extend_from_slice(self.row(i));
        }
        FeatureTable {
            schema: self.schema.clone(),
            rows,
            target: idx.iter().map(|&i| self.target[i]).collect(),
            region: self.region.as_ref().map(|r| idx.iter().map(|&i| r[i]).collect()),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            coord: idx.iter().map(|&i| self.coord[i]).collect(),
            sat_id: idx.iter().map(|&i| self.sat_id[i]).collect(),
            normalization: self.normalization.clone(),
        }
    }

    /// Raw values of the named columns, row-major.
    pub fn columns(&self, names: &[String]) -> Result<Vec<f64>, IngestError> {
        let own = self.schema.names();
        let idx = names
            .iter()
            .map(|n| {
                own.iter()
                    .position(|o| o == n)
                    .ok_or_else(|| IngestError::Schema(format!("feature '{n}' missing from table")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut out = Vec::with_capacity(self.len() * idx.len());
        for i in 0..self.len() {
            let r = self.row(i);
            out.extend(idx.iter().map(|&j| r[j]));
        }
        Ok(out)
    }
}

/// Builds one feature row per observation. Observations without enough driver
/// history are dropped; the second return value counts them. Normalization is
/// fitted on all returned rows.
pub fn build_features(
    drivers: &DriverSeries,
    obs: &[Observation],
    schema: &FeatureSchema,
) -> Result<(FeatureTable, usize), IngestError> {
    for v in schema.variables() {
        if drivers.column(v).is_none() {
            return Err(IngestError::MissingColumn(v.to_string()));
        }
    }
    let labeled = !obs.is_empty() && obs.iter().all(|o| o.region.is_some());
    let mut table = FeatureTable {
        schema: schema.clone(),
        rows: Vec::with_capacity(obs.len() * schema.width()),
        target: Vec::with_capacity(obs.len()),
        region: labeled.then(Vec::new),
        t: Vec::new(),
        coord: Vec::new(),
        sat_id: Vec::new(),
        normalization: None,
    };
    let mut dropped = 0usize;
    let mut cached: Option<(i64, Option<Vec<f64>>)> = None;
    for o in obs {
        if cached.as_ref().map(|c| c.0) != Some(o.t) {
            cached = Some((o.t, global_features(drivers, o.t, schema)));
        }
        let Some(global) = cached.as_ref().and_then(|c| c.1.as_ref()) else {
            dropped += 1;
            continue;
        };
        table.rows.extend(assemble_row(schema, o.coord, global));
        table.target.push(super::log_transform(o.eflux)?);
        if let (Some(r), Some(label)) = (table.region.as_mut(), o.region) {
            r.push(label);
        }
        table.t.push(o.t);
        table.coord.push(o.coord);
        table.sat_id.push(o.sat_id);
    }
    if !table.is_empty() {
        table.fit_normalization();
    }
    Ok((table, dropped))
}

/// Inclusive time interval in epoch seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeRange {
    pub start: i64,
    pub end: i64,
}

impl TimeRange {
    pub fn contains(&self, t: i64) -> bool {
        (self.start..=self.end).contains(&t)
    }

    /// The last `fraction` of the span `[min(t), max(t)]`.
    pub fn final_fraction(times: &[i64], fraction: f64) -> Self {
        let lo = times.iter().copied().min().unwrap_or(0);
        let hi = times.iter().copied().max().unwrap_or(0);
        let start = hi - ((hi - lo) as f64 * fraction.clamp(0.0, 1.0)).round() as i64;
        Self { start, end: hi }
    }
}

/// Validation = rows of `sat_id` inside `range`; train = everything else.
/// Normalization is refitted on the train rows and attached to both halves.
pub fn split_by_holdout(
    table: &FeatureTable,
    sat_id: u32,
    range: TimeRange,
) -> Result<(FeatureTable, FeatureTable), IngestError> {
    let (val_idx, train_idx): (Vec<usize>, Vec<usize>) =
        (0..table.len()).partition(|&i| table.sat_id[i] == sat_id && range.contains(table.t[i]));
    if val_idx.is_empty() {
        return Err(IngestError::EmptySelection(format!(
            "no rows for satellite {sat_id} in [{}, {}]",
            range.start, range.end
        )));
    }
    if train_idx.is_empty() {
        return Err(IngestError::EmptySelection("hold-out leaves no training rows".into()));
    }
    let mut train = table.subset(&train_idx);
    train.fit_normalization();
    let mut val = table.subset(&val_idx);
    val.normalization = train.normalization.clone();
    Ok((train, val))
}

pub fn filter_by_region(table: &FeatureTable, region: Region) -> Result<FeatureTable, IngestError> {
    let labels = table.region.as_ref().ok_or(IngestError::LabelsAbsent)?;
    let idx: Vec<usize> = (0..table.len()).filter(|&i| labels[i] == region).collect();
    Ok(table.subset(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomodel::{gen_drivers, sample_traces, WorldParams};

    fn ramp(len: usize) -> DriverSeries {
        let cols = DRIVER_VARIABLES
            .iter()
            .map(|v| (v.to_string(), (0..len).map(|k| (k * 300) as f64).collect()))
            .collect();
        DriverSeries::new(0, 300, cols)
    }

    #[test]
    fn default_width() {
        let s = FeatureSchema::default();
        assert_eq!(s.width(), 3 + 13 * 10);
        assert_eq!(FeatureSchema::from_names(&s.names()).unwrap(), s);
        assert_eq!(s.without_spatial().unwrap().width(), 130);
        assert!(!s.without_spatial().unwrap().has_spatial());
    }

    #[test]
    fn bad_names_rejected() {
        assert!(FeatureSchema::from_names(&["Bz_lag5"]).is_err());
        assert!(FeatureSchema::from_names(&["Bz_avg0m"]).is_err());
        assert!(FeatureSchema::from_names(&["Bz_lag5m", "Bz_lag5m"]).is_err());
        assert!(FeatureSchema::from_names(&["_lag5m"]).is_err());
    }

    #[test]
    fn constant_driver_gives_constant_features() {
        let cols = DRIVER_VARIABLES.iter().map(|v| (v.to_string(), vec![3.25; 100])).collect();
        let d = DriverSeries::new(0, 300, cols);
        let s = FeatureSchema::default();
        let row = feature_row(&d, 300 * 90, MagCoord::new(60.0, 6.0).unwrap(), &s).unwrap();
        assert!(row[3..].iter().all(|&v| v == 3.25));
        assert!((row[0] - 1.0).abs() < 1e-15 && row[1].abs() < 1e-15);
        assert!((row[2] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn trailing_mean_on_ramp() {
        let d = ramp(200);
        let s = FeatureSchema::build(&["AE"], &[], &[30], false).unwrap();
        let t = 300 * 150;
        let v = global_features(&d, t, &s).unwrap();
        assert_eq!(v[0], (t - 750) as f64);
    }

    #[test]
    fn lag_uses_nearest_sample() {
        let d = ramp(200);
        let s = FeatureSchema::build(&["AE"], &[0, 5], &[], false).unwrap();
        // 100 s past a cadence point: nearest is the earlier sample
        assert_eq!(global_features(&d, 30_100, &s).unwrap(), vec![30_000.0, 29_700.0]);
        // exactly half-way resolves to the earlier sample
        assert_eq!(global_features(&d, 30_150, &s).unwrap()[0], 30_000.0);
        assert_eq!(global_features(&d, 30_200, &s).unwrap()[0], 30_300.0);
    }

    #[test]
    fn insufficient_history_is_dropped() {
        let p = WorldParams { seed: 1, ..Default::default() };
        let d = gen_drivers(&p, 12 * 3600).unwrap();
        let obs = sample_traces(&p, &d, 300).unwrap();
        let (table, dropped) = build_features(&d, &obs, &FeatureSchema::default()).unwrap();
        // samples with t - 6 h < t0 cannot fill the longest window
        let expected_dropped = obs.iter().filter(|o| o.t - 6 * 3600 < d.t0).count();
        assert_eq!(dropped, expected_dropped);
        assert_eq!(table.len(), obs.len() - dropped);
        assert!(table.rows.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn missing_variable_is_error() {
        let cols = vec![("AE".to_string(), vec![1.0; 10])];
        let d = DriverSeries::new(0, 300, cols);
        match build_features(&d, &[], &FeatureSchema::default()) {
            Err(IngestError::MissingColumn(c)) => assert_eq!(c, "AL"),
            other => panic!("{other:?}"),
        }
    }

    fn synthetic_table() -> FeatureTable {
        let p = WorldParams { seed: 2, ..Default::default() };
        let d = gen_drivers(&p, 3 * 86_400).unwrap();
        let obs = sample_traces(&p, &d, 120).unwrap();
        build_features(&d, &obs, &FeatureSchema::default()).unwrap().0
    }

    #[test]
    fn holdout_partitions_and_normalizes_on_train() {
        let table = synthetic_table();
        let range = TimeRange::final_fraction(&table.t, 0.3);
        let (train, val) = split_by_holdout(&table, 1, range).unwrap();
        assert_eq!(train.len() + val.len(), table.len());
        assert!(val.sat_id.iter().all(|&s| s == 1));
        assert!(val.t.iter().all(|&t| range.contains(t)));
        let z = train.normalized_rows();
        let w = train.width();
        let n = train.len() as f64;
        for j in 0..w {
            let col: Vec<f64> = z.iter().skip(j).step_by(w).copied().collect();
            let m = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            assert!(m.abs() < 1e-9, "column {j} mean {m}");
            assert!((sd - 1.0).abs() < 1e-9, "column {j} std {sd}");
        }
        assert_eq!(val.normalization, train.normalization);
        assert!(split_by_holdout(&table, 9, range).is_err());
    }

    #[test]
    fn region_filters_partition() {
        let table = synthetic_table();
        let parts: Vec<FeatureTable> =
            Region::ALL.iter().map(|&r| filter_by_region(&table, r).unwrap()).collect();
        assert_eq!(parts.iter().map(FeatureTable::len).sum::<usize>(), table.len());
        for (part, r) in parts.iter().zip(Region::ALL) {
            assert!(part.region.as_ref().unwrap().iter().all(|&x| x == r));
        }
        let mean = |t: &FeatureTable| t.target.iter().sum::<f64>() / t.len() as f64;
        assert!(mean(&parts[1]) > mean(&parts[0]));
        let mut unlabeled = table.clone();
        unlabeled.region = None;
        assert!(matches!(filter_by_region(&unlabeled, Region::Polar), Err(IngestError::LabelsAbsent)));
    }
}
