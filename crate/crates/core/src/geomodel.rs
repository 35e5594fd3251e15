//! Magnetic coordinates, the MLAT x MLT grid and the synthetic world.
//!
//! The synthetic world stands in for real solar-wind / index archives and
//! polar-orbiting particle detectors. Drivers are seeded mean-reverting
//! processes on a fixed cadence, the ground-truth flux is a parametric
//! auroral oval whose position and strength follow a smoothed coupling
//! activity, and satellites sweep triangular latitude passes through it.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

pub const MLAT_MIN: f64 = 45.0;
pub const MLAT_MAX: f64 = 90.0;
pub const HOURS_PER_DAY: f64 = 24.0;

/// Driver variables in canonical column order.
pub const DRIVER_VARIABLES: [&str; 13] = [
    "AE", "AL", "AU", "F107", "SymH", "Bx", "By", "Bz", "Vsw", "Psw", "Vx", "PC", "NewellCF",
];

/// Variables generated by a stochastic process; `NewellCF` is derived from By, Bz and Vsw.
pub const PROCESS_VARIABLES: [&str; 12] = [
    "AE", "AL", "AU", "F107", "SymH", "Bx", "By", "Bz", "Vsw", "Psw", "Vx", "PC",
];

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("magnetic latitude {0} outside [45, 90]")]
    LatitudeOutOfRange(f64),
    #[error("magnetic local time {0} is not finite")]
    InvalidLocalTime(f64),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("duration {duration} s is shorter than the cadence {cadence} s")]
    DurationTooShort { duration: i64, cadence: i64 },
    #[error("invalid world parameters: {0}")]
    InvalidParams(String),
    #[error("driver series is empty")]
    EmptyDrivers,
}

/// Position in magnetic latitude (degrees) and magnetic local time (hours).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagCoord {
    mlat: f64,
    mlt: f64,
}

impl MagCoord {
    /// Validates latitude and wraps local time into `[0, 24)`.
    pub fn new(mlat: f64, mlt: f64) -> Result<Self, GeoError> {
        if !(MLAT_MIN..=MLAT_MAX).contains(&mlat) {
            return Err(GeoError::LatitudeOutOfRange(mlat));
        }
        if !mlt.is_finite() {
            return Err(GeoError::InvalidLocalTime(mlt));
        }
        Ok(Self { mlat, mlt: wrap_mlt(mlt) })
    }

    pub fn mlat(&self) -> f64 {
        self.mlat
    }

    pub fn mlt(&self) -> f64 {
        self.mlt
    }
}

pub fn wrap_mlt(mlt: f64) -> f64 {
    let w = mlt.rem_euclid(HOURS_PER_DAY);
    // rem_euclid can round up to exactly 24 for tiny negative inputs
    if w >= HOURS_PER_DAY {
        0.0
    } else {
        w
    }
}

/// Uniform MLAT x MLT discretization with a periodic MLT axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub n_lat: usize,
    pub n_mlt: usize,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { n_lat: 128, n_mlt: 128, lat_min: MLAT_MIN, lat_max: MLAT_MAX }
    }
}

impl GridSpec {
    pub fn new(n_lat: usize, n_mlt: usize) -> Result<Self, GeoError> {
        let spec = Self { n_lat, n_mlt, ..Self::default() };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if self.n_lat < 4 || self.n_mlt < 4 {
            return Err(GeoError::InvalidGrid(format!(
                "grid must be at least 4x4, got {}x{}",
                self.n_lat, self.n_mlt
            )));
        }
        if !(self.lat_max > self.lat_min) {
            return Err(GeoError::InvalidGrid("lat_max must exceed lat_min".into()));
        }
        Ok(())
    }

    pub fn dlat(&self) -> f64 {
        (self.lat_max - self.lat_min) / self.n_lat as f64
    }

    pub fn dmlt(&self) -> f64 {
        HOURS_PER_DAY / self.n_mlt as f64
    }

    pub fn len(&self) -> usize {
        self.n_lat * self.n_mlt
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major flat index.
    pub fn flat(&self, row: usize, col: usize) -> usize {
        row * self.n_mlt + col
    }

    /// Half-open cell containing `coord`; the top latitude edge is clamped into the last row.
    pub fn cell_of(&self, coord: MagCoord) -> (usize, usize) {
        let r = ((coord.mlat - self.lat_min) * self.n_lat as f64 / (self.lat_max - self.lat_min))
            .floor();
        let row = if r < 0.0 { 0 } else { (r as usize).min(self.n_lat - 1) };
        let c = (coord.mlt * self.n_mlt as f64 / HOURS_PER_DAY).floor() as usize;
        (row, c % self.n_mlt)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> MagCoord {
        MagCoord {
            mlat: self.lat_min + (row as f64 + 0.5) * self.dlat(),
            mlt: (col as f64 + 0.5) * self.dmlt(),
        }
    }
}

/// A scalar field over the grid with a per-cell observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl GridMap {
    /// Fully unobserved map with zero values.
    pub fn empty(spec: GridSpec) -> Self {
        Self { spec, values: vec![0.0; spec.len()], mask: vec![false; spec.len()] }
    }

    /// Fully observed map.
    pub fn dense(spec: GridSpec, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), spec.len(), "value count must match grid");
        Self { spec, values, mask: vec![true; spec.len()] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.spec.flat(row, col)]
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn observed(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| (i, self.values[i]))
    }
}

/// Three latitude regimes relative to the auroral oval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    SubAuroral = 0,
    Auroral = 1,
    Polar = 2,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::SubAuroral, Region::Auroral, Region::Polar];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            Region::SubAuroral => "SUB",
            Region::Auroral => "AUR",
            Region::Polar => "POL",
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        match s {
            "SUB" => Some(Region::SubAuroral),
            "AUR" => Some(Region::Auroral),
            "POL" => Some(Region::Polar),
            _ => None,
        }
    }
}

/// Multivariate driver series on a fixed cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverSeries {
    pub t0: i64,
    pub cadence: i64,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl DriverSeries {
    /// Panics if column lengths differ or `cadence <= 0`.
    pub fn new(t0: i64, cadence: i64, columns: Vec<(String, Vec<f64>)>) -> Self {
        assert!(cadence > 0, "cadence must be positive");
        let len = columns.first().map(|c| c.1.len()).unwrap_or(0);
        assert!(columns.iter().all(|c| c.1.len() == len), "columns must have equal length");
        let (names, columns) = columns.into_iter().unzip();
        Self { t0, cadence, names, columns }
    }

    pub fn len(&self) -> usize {
        self.columns.first().map(Vec::len).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    pub fn time(&self, k: usize) -> i64 {
        self.t0 + k as i64 * self.cadence
    }

    pub fn t_end(&self) -> i64 {
        self.time(self.len().saturating_sub(1))
    }

    /// Index of the latest sample at or before `t`.
    pub fn index_at_or_before(&self, t: i64) -> Option<usize> {
        if t < self.t0 || self.is_empty() {
            return None;
        }
        let k = ((t - self.t0) / self.cadence) as usize;
        Some(k.min(self.len() - 1))
    }
}

/// Intensity and geometry of the synthetic oval.
#[derive(Debug, Clone, PartialEq)]
pub struct OvalParams {
    pub center_base: f64,
    pub center_activity: f64,
    pub center_mlt_amplitude: f64,
    pub width_base: f64,
    pub width_activity: f64,
    pub peak_base: f64,
    pub peak_activity: f64,
    pub polar_background: f64,
    pub subauroral_background: f64,
    pub kappa: f64,
}

impl Default for OvalParams {
    fn default() -> Self {
        Self {
            center_base: 70.0,
            center_activity: 8.0,
            center_mlt_amplitude: 3.0,
            width_base: 2.0,
            width_activity: 2.0,
            peak_base: 10.0,
            peak_activity: 2.5,
            polar_background: 8.5,
            subauroral_background: 7.5,
            kappa: 1.5,
        }
    }
}

impl OvalParams {
    /// Oval center latitude.
    pub fn center(&self, mlt: f64, activity: f64) -> f64 {
        self.center_base
            - self.center_activity * activity
            - self.center_mlt_amplitude * (2.0 * PI * mlt / HOURS_PER_DAY).cos()
    }

    pub fn width(&self, activity: f64) -> f64 {
        self.width_base + self.width_activity * activity
    }

    pub fn peak(&self, activity: f64) -> f64 {
        self.peak_base + self.peak_activity * activity
    }
}

/// Mean-reverting process `dx = rate * (mean - x) dt + volatility dW`, rates per second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessParams {
    pub mean: f64,
    pub rate: f64,
    pub volatility: f64,
}

impl ProcessParams {
    /// Parameterized by stationary standard deviation and correlation time in hours.
    pub fn stationary(mean: f64, std: f64, corr_hours: f64) -> Self {
        let rate = 1.0 / (corr_hours * 3600.0);
        Self { mean, rate, volatility: std * (2.0 * rate).sqrt() }
    }

    fn stationary_std(&self) -> f64 {
        if self.volatility == 0.0 {
            0.0
        } else {
            self.volatility / (2.0 * self.rate).sqrt()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrbitParams {
    /// Period of one full 45 -> 90 -> 45 latitude sweep.
    pub period_s: f64,
    /// MLT of the ascending leg per satellite at t0; the descending leg is 12 h away.
    pub base_mlt: [f64; 3],
    pub precession_h_per_day: f64,
}

impl Default for OrbitParams {
    fn default() -> Self {
        Self { period_s: 6060.0, base_mlt: [8.0, 5.5, 10.0], precession_h_per_day: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldParams {
    pub seed: u64,
    pub n_sats: usize,
    pub t0: i64,
    pub cadence: i64,
    pub oval: OvalParams,
    /// Noise on log10 flux.
    pub noise_sigma: f64,
    /// Trailing window of the coupling mean that sets activity.
    pub activity_window_s: i64,
    /// Coupling value at which activity reaches tanh(1).
    pub coupling_scale: f64,
    /// Processes in `PROCESS_VARIABLES` order.
    pub processes: Vec<ProcessParams>,
    pub orbit: OrbitParams,
}

impl Default for WorldParams {
    fn default() -> Self {
        let p = ProcessParams::stationary;
        Self {
            seed: 0,
            n_sats: 2,
            t0: 1_262_304_000,
            cadence: 300,
            oval: OvalParams::default(),
            noise_sigma: 0.3,
            activity_window_s: 3600,
            coupling_scale: 8000.0,
            processes: vec![
                p(200.0, 150.0, 3.0),
                p(-150.0, 150.0, 3.0),
                p(100.0, 80.0, 3.0),
                p(100.0, 20.0, 240.0),
                p(-10.0, 15.0, 6.0),
                p(0.0, 3.0, 1.0),
                p(0.0, 4.0, 1.0),
                p(0.0, 4.0, 1.0),
                p(420.0, 90.0, 12.0),
                p(2.0, 1.0, 3.0),
                p(-420.0, 90.0, 12.0),
                p(1.0, 1.0, 2.0),
            ],
            orbit: OrbitParams::default(),
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<(), GeoError> {
        if !(1..=3).contains(&self.n_sats) {
            return Err(GeoError::InvalidParams(format!("n_sats must be 1..=3, got {}", self.n_sats)));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(GeoError::InvalidParams("noise sigma must be >= 0".into()));
        }
        if self.cadence <= 0 {
            return Err(GeoError::InvalidParams("cadence must be positive".into()));
        }
        if self.processes.len() != PROCESS_VARIABLES.len() {
            return Err(GeoError::InvalidParams(format!(
                "expected {} process definitions",
                PROCESS_VARIABLES.len()
            )));
        }
        if self.processes.iter().any(|p| p.rate <= 0.0 || p.volatility < 0.0) {
            return Err(GeoError::InvalidParams("process rates must be > 0 and volatilities >= 0".into()));
        }
        if self.coupling_scale <= 0.0 || self.activity_window_s <= 0 || self.orbit.period_s <= 0.0 {
            return Err(GeoError::InvalidParams("activity scale, window and orbit period must be positive".into()));
        }
        Ok(())
    }
}

/// Physical floors applied after each process step.
fn floor_for(name: &str) -> Option<f64> {
    match name {
        "AE" | "AU" => Some(0.0),
        "F107" => Some(60.0),
        "Vsw" => Some(200.0),
        "Psw" => Some(0.1),
        _ => None,
    }
}

fn ceiling_for(name: &str) -> Option<f64> {
    match name {
        "AL" => Some(0.0),
        "Vx" => Some(-200.0),
        _ => None,
    }
}

/// Seeded driver series covering `[t0, t0 + duration]`.
pub fn gen_drivers(params: &WorldParams, duration: i64) -> Result<DriverSeries, GeoError> {
    params.validate()?;
    if duration < params.cadence {
        return Err(GeoError::DurationTooShort { duration, cadence: params.cadence });
    }
    let len = (duration / params.cadence) as usize + 1;
    let dt = params.cadence as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut columns: Vec<(String, Vec<f64>)> = Vec::with_capacity(DRIVER_VARIABLES.len());
    for (name, proc_) in PROCESS_VARIABLES.iter().zip(&params.processes) {
        let decay = (-proc_.rate * dt).exp();
        let step_std = proc_.volatility * ((1.0 - decay * decay) / (2.0 * proc_.rate)).sqrt();
        let clamp = |v: f64| {
            let v = floor_for(name).map_or(v, |f| v.max(f));
            ceiling_for(name).map_or(v, |c| v.min(c))
        };
        let mut x = proc_.mean + proc_.stationary_std() * sample_normal(&mut rng);
        let mut col = Vec::with_capacity(len);
        for _ in 0..len {
            col.push(clamp(x));
            x = proc_.mean + (x - proc_.mean) * decay + step_std * sample_normal(&mut rng);
        }
        columns.push((name.to_string(), col));
    }
    let newell: Vec<f64> = {
        let by = &columns[6].1;
        let bz = &columns[7].1;
        let vsw = &columns[8].1;
        (0..len).map(|k| newell_cf(by[k], bz[k], vsw[k])).collect()
    };
    columns.push(("NewellCF".to_string(), newell));
    Ok(DriverSeries::new(params.t0, params.cadence, columns))
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Newell coupling `v^(4/3) * B_T^(2/3) * sin^(8/3)(theta_c / 2)` with
/// `B_T = sqrt(By^2 + Bz^2)` and clock angle `theta_c = atan2(|By|, Bz)`.
pub fn newell_cf(by: f64, bz: f64, vsw: f64) -> f64 {
    let bt = by.hypot(bz);
    let theta = by.abs().atan2(bz);
    vsw.powf(4.0 / 3.0) * bt.powf(2.0 / 3.0) * (theta / 2.0).sin().powf(8.0 / 3.0)
}

/// Activity in `[0, 1)`: `tanh` of the trailing coupling mean over `(t - window, t]`.
pub fn activity(drivers: &DriverSeries, t: i64, params: &WorldParams) -> f64 {
    let Some(cf) = drivers.column("NewellCF") else {
        return 0.0;
    };
    let Some(last) = drivers.index_at_or_before(t) else {
        return 0.0;
    };
    let start = t - params.activity_window_s;
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in (0..=last).rev() {
        if drivers.time(k) <= start {
            break;
        }
        sum += cf[k];
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    (sum / n as f64 / params.coupling_scale).max(0.0).tanh()
}

/// Ground-truth log10 flux: a Gaussian bump centred on the oval over a
/// sub-auroral (equatorward) or polar (poleward) background.
pub fn true_flux(coord: MagCoord, activity: f64, oval: &OvalParams) -> f64 {
    let center = oval.center(coord.mlt, activity);
    let width = oval.width(activity);
    let peak = oval.peak(activity);
    let background =
        if coord.mlat < center { oval.subauroral_background } else { oval.polar_background };
    let d = coord.mlat - center;
    background + (peak - background) * (-d * d / (2.0 * width * width)).exp()
}

pub fn true_region(coord: MagCoord, activity: f64, oval: &OvalParams) -> Region {
    let d = coord.mlat - oval.center(coord.mlt, activity);
    let half = oval.kappa * oval.width(activity);
    if d.abs() <= half {
        Region::Auroral
    } else if d > half {
        Region::Polar
    } else {
        Region::SubAuroral
    }
}

/// One in-situ measurement of total electron energy flux.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub t: i64,
    pub sat_id: u32,
    pub coord: MagCoord,
    /// eV/cm^2/sr/s
    pub eflux: f64,
    pub region: Option<Region>,
}

/// Satellite position at time `t`: triangular latitude sweep, one MLT per leg.
pub fn satellite_coord(params: &WorldParams, sat: usize, t: i64) -> MagCoord {
    let orbit = &params.orbit;
    let elapsed = (t - params.t0) as f64;
    let phase_offset = sat as f64 * orbit.period_s / params.n_sats as f64;
    let u = ((elapsed + phase_offset) / orbit.period_s).rem_euclid(1.0);
    let precession = orbit.precession_h_per_day * elapsed / 86_400.0;
    let base = orbit.base_mlt[sat % 3] + precession;
    let (mlat, mlt) = if u < 0.5 {
        (MLAT_MIN + (MLAT_MAX - MLAT_MIN) * 2.0 * u, base)
    } else {
        (MLAT_MAX - (MLAT_MAX - MLAT_MIN) * (2.0 * u - 1.0), base + 12.0)
    };
    MagCoord { mlat: mlat.clamp(MLAT_MIN, MLAT_MAX), mlt: wrap_mlt(mlt) }
}

/// Observations for every satellite at each `obs_cadence` step over the driver span.
pub fn sample_traces(
    params: &WorldParams,
    drivers: &DriverSeries,
    obs_cadence: i64,
) -> Result<Vec<Observation>, GeoError> {
    params.validate()?;
    if drivers.is_empty() {
        return Err(GeoError::EmptyDrivers);
    }
    if obs_cadence <= 0 {
        return Err(GeoError::InvalidParams("observation cadence must be positive".into()));
    }
    let duration = drivers.t_end() - drivers.t0;
    let steps = duration / obs_cadence;
    let noise = Normal::new(0.0, params.noise_sigma)
        .map_err(|e| GeoError::InvalidParams(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut out = Vec::with_capacity((steps as usize + 1) * params.n_sats);
    for k in 0..=steps {
        let t = drivers.t0 + k * obs_cadence;
        let a = activity(drivers, t, params);
        for sat in 0..params.n_sats {
            let coord = satellite_coord(params, sat, t);
            let log_flux = true_flux(coord, a, &params.oval);
            let eps = if params.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            out.push(Observation {
                t,
                sat_id: sat as u32 + 1,
                coord,
                eflux: 10f64.powf(log_flux + eps),
                region: Some(true_region(coord, a, &params.oval)),
            });
        }
    }
    Ok(out)
}
