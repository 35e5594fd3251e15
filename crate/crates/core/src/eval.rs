//! Evaluation metrics, report tables and hemisphere map rendering.
//!
//! Errors are in log10 space; signed errors use the `true - pred` convention.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use thiserror::Error;

use crate::geomodel::{DriverSeries, GridMap, GridSpec, Region};
use crate::ingest::{feature_row, global_features};
use crate::models::{forward_baseline, forward_convdecoder, forward_multitask, Arch, Model, ModelError};
use crate::stats::{percentile, UniformBins};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation needs at least one sample")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no samples above the {0}th percentile")]
    EmptySubset(f64),
    #[error("time {t} is outside the driver history usable for features")]
    OutOfRange { t: i64 },
    #[error("grid {got:?} does not match the decoder grid {expected:?}")]
    GridMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("malformed map CSV: {0}")]
    MalformedMap(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn aligned(a: usize, b: usize) -> Result<(), EvalError> {
    if a != b {
        return Err(EvalError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(EvalError::Empty);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinnedErrorReport {
    pub edges: Vec<f64>,
    /// `None` for empty bins.
    pub mae: Vec<Option<f64>>,
    /// Mean of `true - pred`.
    pub bias: Vec<Option<f64>>,
    /// Mean of `10^|true - pred|`, the linear-space error factor.
    pub factor: Vec<Option<f64>>,
    pub count: Vec<usize>,
}

/// Errors grouped by uniform bins of the true target.
pub fn binned_errors(y_true: &[f64], y_pred: &[f64], n_bins: usize) -> Result<BinnedErrorReport, EvalError> {
    aligned(y_true.len(), y_pred.len())?;
    let bins = UniformBins::over(y_true, n_bins.max(1));
    let n = bins.n_bins;
    let (mut abs, mut signed, mut fac, mut count) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0usize; n]);
    for (t, p) in y_true.iter().zip(y_pred) {
        let b = bins.index(*t);
        let e = t - p;
        abs[b] += e.abs();
        signed[b] += e;
        fac[b] += 10f64.powf(e.abs());
        count[b] += 1;
    }
    let mean = |s: &[f64]| -> Vec<Option<f64>> {
        s.iter().zip(&count).map(|(v, &c)| (c > 0).then(|| v / c as f64)).collect()
    };
    Ok(BinnedErrorReport { edges: bins.edges(), mae: mean(&abs), bias: mean(&signed), factor: mean(&fac), count })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl BinnedErrorReport {
    pub const HEADER: &'static str = "bin_lo,bin_hi,count,mae_log10,bias_log10,mean_abs_factor";

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for i in 0..self.count.len() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                self.edges[i],
                self.edges[i + 1],
                self.count[i],
                opt(self.mae[i]),
                opt(self.bias[i]),
                opt(self.factor[i])
            )?;
        }
        Ok(())
    }
}

pub const TAIL_PERCENTILES: [f64; 3] = [90.0, 95.0, 99.0];

#[derive(Debug, Clone, PartialEq)]
pub struct TailRow {
    pub percentile: f64,
    pub threshold: f64,
    pub n: usize,
    pub base_mae: f64,
    pub cand_mae: f64,
    /// `(base - cand) / base`; zero when the two errors are equal.
    pub reduction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailReductionReport {
    pub rows: Vec<TailRow>,
}

/// Mean absolute error over samples with `y_true` strictly above `threshold`.
pub fn mae_above(y_true: &[f64], y_pred: &[f64], threshold: f64) -> Option<(f64, usize)> {
    let (s, n) = y_true
        .iter()
        .zip(y_pred)
        .filter(|(t, _)| **t > threshold)
        .fold((0.0, 0usize), |(s, n), (t, p)| (s + (t - p).abs(), n + 1));
    (n > 0).then(|| (s / n as f64, n))
}

/// MAE over samples whose `y_true` lies between the `p_lo`-th and `p_hi`-th
/// percentiles of `y_true` (both inclusive).
pub fn band_mae(y_true: &[f64], y_pred: &[f64], p_lo: f64, p_hi: f64) -> Result<(f64, usize), EvalError> {
    aligned(y_true.len(), y_pred.len())?;
    let lo = percentile(y_true, p_lo).ok_or(EvalError::EmptySubset(p_lo))?;
    let hi = percentile(y_true, p_hi).ok_or(EvalError::EmptySubset(p_hi))?;
    let (s, n) = y_true
        .iter()
        .zip(y_pred)
        .filter(|(t, _)| (lo..=hi).contains(*t))
        .fold((0.0, 0usize), |(s, n), (t, p)| (s + (t - p).abs(), n + 1));
    if n == 0 {
        return Err(EvalError::EmptySubset(p_lo));
    }
    Ok((s / n as f64, n))
}

pub fn relative_reduction(base: f64, cand: f64) -> f64 {
    if base == cand {
        0.0
    } else {
        (base - cand) / base
    }
}

/// Log-space MAE of both models above each percentile of `y_true`.
pub fn tail_reduction(
    y_true: &[f64],
    pred_base: &[f64],
    pred_cand: &[f64],
    percentiles: &[f64],
) -> Result<TailReductionReport, EvalError> {
    aligned(y_true.len(), pred_base.len())?;
    aligned(y_true.len(), pred_cand.len())?;
    let rows = percentiles
        .iter()
        .map(|&p| {
            let threshold = percentile(y_true, p).ok_or(EvalError::EmptySubset(p))?;
            let (base_mae, n) = mae_above(y_true, pred_base, threshold).ok_or(EvalError::EmptySubset(p))?;
            let (cand_mae, _) = mae_above(y_true, pred_cand, threshold).ok_or(EvalError::EmptySubset(p))?;
            Ok(TailRow { percentile: p, threshold, n, base_mae, cand_mae, reduction: relative_reduction(base_mae, cand_mae) })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(TailReductionReport { rows })
}

impl TailReductionReport {
    pub const HEADER: &'static str = "percentile,threshold_log10,n,base_mae_log10,cand_mae_log10,reduction_pct";

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{},{}", r.percentile, r.threshold, r.n, r.base_mae, r.cand_mae, 100.0 * r.reduction)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramTable {
    pub edges: Vec<f64>,
    pub true_counts: Vec<f64>,
    pub pred_counts: Vec<f64>,
}

/// Counts of true and predicted values over bins spanning both ranges.
/// With `normalize` each histogram sums to 1.
pub fn histogram_compare(y_true: &[f64], y_pred: &[f64], n_bins: usize, normalize: bool) -> HistogramTable {
    let all: Vec<f64> = y_true.iter().chain(y_pred).copied().filter(|v| v.is_finite()).collect();
    let bins = UniformBins::over(&all, n_bins.max(1));
    let hist = |v: &[f64]| -> Vec<f64> {
        let c = bins.counts(v);
        let total: usize = c.iter().sum();
        c.into_iter()
            .map(|x| if normalize && total > 0 { x as f64 / total as f64 } else { x as f64 })
            .collect()
    };
    HistogramTable { edges: bins.edges(), true_counts: hist(y_true), pred_counts: hist(y_pred) }
}

impl HistogramTable {
    pub const HEADER: &'static str = "bin_lo,bin_hi,true_count,pred_count";

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for i in 0..self.true_counts.len() {
            writeln!(w, "{},{},{},{}", self.edges[i], self.edges[i + 1], self.true_counts[i], self.pred_counts[i])?;
        }
        Ok(())
    }
}

/// Number of bins (uniform over the `y_true` range) lying at least partly above
/// the `pct`-th percentile of `y_true` that receive at least one prediction.
pub fn high_bin_coverage(y_true: &[f64], y_pred: &[f64], n_bins: usize, pct: f64) -> Result<usize, EvalError> {
    aligned(y_true.len(), y_pred.len())?;
    let bins = UniformBins::over(y_true, n_bins.max(1));
    let threshold = percentile(y_true, pct).ok_or(EvalError::Empty)?;
    let edges = bins.edges();
    let mut hit = vec![false; bins.n_bins];
    for &p in y_pred {
        if let Some(b) = bins.index_within(p) {
            hit[b] = true;
        }
    }
    Ok((0..bins.n_bins).filter(|&b| edges[b + 1] > threshold && hit[b]).count())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub accuracy: f64,
    /// `confusion[true][pred]`
    pub confusion: [[usize; 3]; 3],
    pub precision: [Option<f64>; 3],
    pub recall: [Option<f64>; 3],
}

pub fn classification_report(truth: &[Region], pred: &[Region]) -> Result<ClassificationReport, EvalError> {
    aligned(truth.len(), pred.len())?;
    let mut confusion = [[0usize; 3]; 3];
    for (t, p) in truth.iter().zip(pred) {
        confusion[t.index()][p.index()] += 1;
    }
    let correct: usize = (0..3).map(|i| confusion[i][i]).sum();
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let precision = std::array::from_fn(|k| ratio(confusion[k][k], (0..3).map(|i| confusion[i][k]).sum()));
    let recall = std::array::from_fn(|k| ratio(confusion[k][k], confusion[k].iter().sum()));
    Ok(ClassificationReport { accuracy: correct as f64 / truth.len() as f64, confusion, precision, recall })
}

impl ClassificationReport {
    pub const HEADER: &'static str = "region,n_true,precision,recall,pred_SUB,pred_AUR,pred_POL";

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for r in Region::ALL {
            let k = r.index();
            let row = self.confusion[k];
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.code(),
                row.iter().sum::<usize>(),
                opt(self.precision[k]),
                opt(self.recall[k]),
                row[0],
                row[1],
                row[2]
            )?;
        }
        writeln!(w, "ALL,{},,{},,,", self.confusion.iter().flatten().sum::<usize>(), self.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMse {
    pub region: Region,
    pub n: usize,
    /// `None` when the region is absent.
    pub mse: Option<f64>,
}

pub fn region_mse_table(y_true: &[f64], y_pred: &[f64], regions: &[Region]) -> Result<Vec<RegionMse>, EvalError> {
    aligned(y_true.len(), y_pred.len())?;
    aligned(y_true.len(), regions.len())?;
    Ok(Region::ALL
        .iter()
        .map(|&region| {
            let (s, n) = y_true
                .iter()
                .zip(y_pred)
                .zip(regions)
                .filter(|(_, r)| **r == region)
                .fold((0.0, 0usize), |(s, n), ((t, p), _)| (s + (t - p) * (t - p), n + 1));
            RegionMse { region, n, mse: (n > 0).then(|| s / n as f64) }
        })
        .collect())
}

pub const REGION_MSE_HEADER: &str = "region,n,mse_log10";

pub fn write_region_mse_csv<W: Write>(rows: &[RegionMse], mut w: W) -> io::Result<()> {
    writeln!(w, "{REGION_MSE_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.region.code(), r.n, opt(r.mse))?;
    }
    Ok(())
}

/// Predicted log10 flux over every cell of `spec` at time `t`.
pub fn render_map(model: &Model, drivers: &DriverSeries, t: i64, spec: GridSpec) -> Result<GridMap, EvalError> {
    spec.validate().map_err(|e| EvalError::MalformedMap(e.to_string()))?;
    match &model.arch {
        Arch::ConvDecoder(a) => {
            if (a.n_lat, a.n_mlt) != (spec.n_lat, spec.n_mlt) {
                return Err(EvalError::GridMismatch { expected: (a.n_lat, a.n_mlt), got: (spec.n_lat, spec.n_mlt) });
            }
            let g = global_features(drivers, t, &model.schema).ok_or(EvalError::OutOfRange { t })?;
            let x = model.normalization.apply(&g);
            Ok(GridMap::dense(spec, forward_convdecoder(a, &model.params, &x)?))
        }
        arch => {
            let mut raw = Vec::with_capacity(spec.len() * model.schema.width());
            for row in 0..spec.n_lat {
                for col in 0..spec.n_mlt {
                    let coord = spec.cell_center(row, col);
                    raw.extend(feature_row(drivers, t, coord, &model.schema).ok_or(EvalError::OutOfRange { t })?);
                }
            }
            let x = model.normalization.apply(&raw);
            let values = match arch {
                Arch::Baseline(a) => forward_baseline(a, &model.params, &x)?,
                Arch::MultiTask(a) => forward_multitask(a, &model.params, &x)?.selected_flux,
                Arch::ConvDecoder(_) => unreachable!("handled above"),
            };
            Ok(GridMap::dense(spec, values))
        }
    }
}

pub const MAP_HEADER: &str = "row,col,mlat,mlt,log10_eflux";

pub fn write_map_csv<W: Write>(map: &GridMap, mut w: W) -> io::Result<()> {
    writeln!(w, "{MAP_HEADER}")?;
    let spec = map.spec;
    for row in 0..spec.n_lat {
        for col in 0..spec.n_mlt {
            let c = spec.cell_center(row, col);
            writeln!(w, "{row},{col},{},{},{}", c.mlat(), c.mlt(), map.get(row, col))?;
        }
    }
    Ok(())
}

/// Reads a map written by [`write_map_csv`] onto `spec`.
pub fn read_map_csv<R: BufRead>(r: R, spec: GridSpec) -> Result<GridMap, EvalError> {
    let bad = |m: String| EvalError::MalformedMap(m);
    let mut lines = r.lines();
    if lines.next().transpose()?.as_deref() != Some(MAP_HEADER) {
        return Err(bad("missing header".into()));
    }
    let mut map = GridMap::empty(spec);
    for line in lines {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        let [row, col, _, _, v] = f.as_slice() else {
            return Err(bad(format!("expected 5 fields: {line}")));
        };
        let parse_idx = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad index in: {line}")));
        let (row, col) = (parse_idx(row)?, parse_idx(col)?);
        if row >= spec.n_lat || col >= spec.n_mlt {
            return Err(bad(format!("cell ({row}, {col}) outside grid")));
        }
        let i = spec.flat(row, col);
        map.values[i] = v.parse().map_err(|_| bad(format!("bad value in: {line}")))?;
        map.mask[i] = true;
    }
    if map.observed_count() != spec.len() {
        return Err(bad("map is incomplete".into()));
    }
    Ok(map)
}

/// Binary graymap; the first image row is the highest-latitude grid row and
/// `[vmin, vmax]` maps linearly onto `[0, 255]` with clamping.
pub fn encode_pgm(map: &GridMap, vmin: f64, vmax: f64) -> Vec<u8> {
    let spec = map.spec;
    let mut out = format!("P5\n{} {}\n255\n", spec.n_mlt, spec.n_lat).into_bytes();
    for row in (0..spec.n_lat).rev() {
        for col in 0..spec.n_mlt {
            out.push(gray_level(map.get(row, col), vmin, vmax));
        }
    }
    out
}

pub fn gray_level(v: f64, vmin: f64, vmax: f64) -> u8 {
    if !v.is_finite() {
        return 0;
    }
    ((v - vmin) / (vmax - vmin)).clamp(0.0, 1.0).mul_add(255.0, 0.0).round() as u8
}

/// Writes `<stem>.csv` and `<stem>.pgm`.
pub fn write_map_files(map: &GridMap, stem: &Path, vmin: f64, vmax: f64) -> Result<(), EvalError> {
    let mut csv = Vec::new();
    write_map_csv(map, &mut csv)?;
    fs::write(stem.with_extension("csv"), csv)?;
    fs::write(stem.with_extension("pgm"), encode_pgm(map, vmin, vmax))?;
    Ok(())
}

/// Largest absolute difference between the first and last MLT columns.
pub fn seam_jump(map: &GridMap) -> f64 {
    let s = map.spec;
    (0..s.n_lat).map(|r| (map.get(r, 0) - map.get(r, s.n_mlt - 1)).abs()).fold(0.0, f64::max)
}

/// Largest absolute difference between horizontally adjacent interior columns.
pub fn max_interior_jump(map: &GridMap) -> f64 {
    let s = map.spec;
    let mut best: f64 = 0.0;
    for r in 0..s.n_lat {
        for c in 0..s.n_mlt - 1 {
            best = best.max((map.get(r, c + 1) - map.get(r, c)).abs());
        }
    }
    best
}
