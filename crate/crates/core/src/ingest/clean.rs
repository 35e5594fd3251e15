use super::IngestError;
use crate::geomodel::Observation;
use crate::stats;

/// Flux percentile above which targets are treated as non-physical.
pub const DEFAULT_PERCENTILE: f64 = 99.995;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CleanMode {
    /// Drop values above this percentile of the input flux.
    Percentile(f64),
    /// Drop values above a fixed flux (eV/cm^2/sr/s).
    Threshold(f64),
}

impl Default for CleanMode {
    fn default() -> Self {
        CleanMode::Percentile(DEFAULT_PERCENTILE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleaningReport {
    pub n_in: usize,
    pub n_dropped_outlier: usize,
    pub n_dropped_nonpositive: usize,
    pub threshold: f64,
}

impl CleaningReport {
    /// Folds in rows a reader already discarded for non-positive flux.
    pub fn absorb_reader_drops(&mut self, n: usize) {
        self.n_in += n;
        self.n_dropped_nonpositive += n;
    }

    pub fn n_kept(&self) -> usize {
        self.n_in - self.n_dropped_outlier - self.n_dropped_nonpositive
    }
}

/// Removes non-positive fluxes, then every flux strictly above the cutoff.
pub fn clean_targets(
    obs: Vec<Observation>,
    mode: CleanMode,
) -> Result<(Vec<Observation>, CleaningReport), IngestError> {
    if obs.is_empty() {
        return Err(IngestError::EmptyInput);
    }
    let n_in = obs.len();
    let positive: Vec<Observation> = obs.into_iter().filter(|o| o.eflux > 0.0).collect();
    let n_dropped_nonpositive = n_in - positive.len();
    if positive.is_empty() {
        return Err(IngestError::EmptyInput);
    }
    let threshold = match mode {
        CleanMode::Percentile(p) => {
            let fluxes: Vec<f64> = positive.iter().map(|o| o.eflux).collect();
            stats::percentile(&fluxes, p).ok_or(IngestError::InvalidPercentile(p))?
        }
        CleanMode::Threshold(t) => t,
    };
    let kept: Vec<Observation> = positive.into_iter().filter(|o| o.eflux <= threshold).collect();
    let report = CleaningReport {
        n_in,
        n_dropped_outlier: n_in - n_dropped_nonpositive - kept.len(),
        n_dropped_nonpositive,
        threshold,
    };
    Ok((kept, report))
}

pub fn log_transform(eflux: f64) -> Result<f64, IngestError> {
    if eflux > 0.0 {
        Ok(eflux.log10())
    } else {
        Err(IngestError::NonPositive(eflux))
    }
}
