//! Batch command-line pipeline: synth, features, train, eval, map.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::eval::{self, EvalError, TAIL_PERCENTILES};
use crate::geomodel::{gen_drivers, sample_traces, GeoError};
use crate::ingest::{
    self, build_features, clean_targets, decode_table, encode_table, read_drivers_csv, read_observations_csv,
    split_by_holdout, FeatureTable, IngestError, TimeRange,
};
use crate::models::{load_checkpoint, save_checkpoint, Arch, ArchKind, Model, ModelError, ParamStore};
use crate::train::{
    build_sparse_samples, decode_sparse, encode_sparse, fit_sparse_normalization, split_sparse, train_model,
    TrainData, TrainError,
};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("numeric failure: {message}")]
    Diverged { message: String, last_good: Box<Model> },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) | CliError::Diverged { .. } => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<GeoError> for CliError {
    fn from(e: GeoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidArch(_) | ModelError::SpatialInputs(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Divergence { epoch, batch, loss, last_good } => {
                let message = TrainError::Divergence { epoch, batch, loss, last_good: last_good.clone() }.to_string();
                CliError::Diverged { message, last_good }
            }
            TrainError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

#[derive(Debug, Parser)]
#[command(name = "auroral", about = "Auroral precipitation nowcast pipeline", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (key=value lines)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed everywhere
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic drivers.csv and observations.csv
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        days: u32,
    },
    /// Clean observations and build the feature cache
    Features {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        drivers: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write composited map samples for the decoder
        #[arg(long)]
        sparse_out: Option<PathBuf>,
    },
    /// Train a model and write the best checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "sparse", required_unless_present = "sparse")]
        features: Option<PathBuf>,
        #[arg(long)]
        sparse: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on the validation rows of a feature cache
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        baseline_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Evaluate every row instead of the validation split
        #[arg(long)]
        all_rows: bool,
    },
    /// Render a hemisphere map at one time
    Map {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        drivers: PathBuf,
        #[arg(long)]
        at: i64,
        /// Output stem; `.csv` and `.pgm` are appended
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.world.seed = cfg.seed;
    Ok(cfg)
}

fn digest(path: &Path) -> Result<String, CliError> {
    Ok(hex::encode(Sha256::digest(read_file(path)?)))
}

/// One section of a directory's manifest.
pub struct RunManifest {
    pub command: &'static str,
    pub config_path: Option<PathBuf>,
    pub config_hash: String,
    pub inputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub data_span: Option<(i64, i64)>,
}

impl RunManifest {
    fn render(&self) -> Result<String, CliError> {
        let mut s = format!("[{}]\n", self.command);
        let cp = self.config_path.as_ref().map_or("default".into(), |p| p.display().to_string());
        s += &format!("config_path={cp}\nconfig_hash={}\n", self.config_hash);
        for p in &self.inputs {
            s += &format!("input={} sha256={}\n", p.display(), digest(p)?);
        }
        s += &format!("output_dir={}\n", self.output_dir.display());
        if let Some((a, b)) = self.data_span {
            s += &format!("data_start={a}\ndata_end={b}\n");
        }
        Ok(s)
    }

    /// Replaces this command's section in `<output_dir>/manifest.txt`, keeping the others.
    pub fn write(&self) -> Result<(), CliError> {
        let path = self.output_dir.join(MANIFEST);
        let existing = fs::read_to_string(&path).unwrap_or_default();
        let header = format!("[{}]", self.command);
        let mut sections: Vec<String> = Vec::new();
        for line in existing.lines() {
            if line.starts_with('[') {
                sections.push(String::new());
            }
            if let Some(cur) = sections.last_mut() {
                cur.push_str(line);
                cur.push('\n');
            }
        }
        sections.retain(|s| !s.starts_with(&header));
        sections.push(self.render()?);
        sections.sort();
        write_file(&path, sections.concat().as_bytes())
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn cmd_synth(common: &Common, out_dir: &Path, days: u32) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    if days == 0 {
        return Err(CliError::Config("--days must be at least 1".into()));
    }
    let duration = i64::from(days) * 86_400;
    let drivers = gen_drivers(&cfg.world, duration)?;
    let obs = sample_traces(&cfg.world, &drivers, cfg.obs_cadence)?;
    ensure_dir(out_dir)?;
    let mut buf = Vec::new();
    ingest::write_drivers(&mut buf, &drivers).map_err(|e| io_err(out_dir, e))?;
    write_file(&out_dir.join("drivers.csv"), &buf)?;
    buf.clear();
    ingest::write_observations(&mut buf, &obs).map_err(|e| io_err(out_dir, e))?;
    write_file(&out_dir.join("observations.csv"), &buf)?;
    RunManifest {
        command: "synth",
        config_path: common.config.clone(),
        config_hash: cfg.hash(),
        inputs: common.config.iter().cloned().collect(),
        output_dir: out_dir.to_path_buf(),
        data_span: Some((drivers.t0, drivers.t_end())),
    }
    .write()
}

fn cmd_features(
    common: &Common,
    drivers_path: &Path,
    obs_path: &Path,
    out: &Path,
    sparse_out: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let schema = cfg.schema().map_err(CliError::Config)?;
    let drivers = read_drivers_csv(drivers_path)?;
    let (obs, reader_drops) = read_observations_csv(obs_path)?;
    let (obs, mut report) = clean_targets(obs, cfg.clean_mode())?;
    report.absorb_reader_drops(reader_drops);
    let (mut table, dropped_history) = build_features(&drivers, &obs, &schema)?;
    if table.is_empty() {
        return Err(CliError::Data("no observation has enough driver history for the feature schema".into()));
    }
    table.fit_normalization();
    let out_dir = parent_dir(out);
    ensure_dir(&out_dir)?;
    write_file(out, &encode_table(&table))?;

    let stem = out.file_stem().map_or("features".into(), |s| s.to_string_lossy().into_owned());
    let report_path = out_dir.join(format!("{stem}_cleaning.csv"));
    let csv = format!(
        "n_in,n_dropped_nonpositive,n_dropped_outlier,threshold_eflux,n_dropped_history,n_rows\n{},{},{},{},{},{}\n",
        report.n_in,
        report.n_dropped_nonpositive,
        report.n_dropped_outlier,
        report.threshold,
        dropped_history,
        table.len()
    );
    write_file(&report_path, csv.as_bytes())?;

    if let Some(sp) = sparse_out {
        let global = schema.without_spatial()?;
        let grid = cfg.grid().map_err(CliError::Config)?;
        let (samples, _) = build_sparse_samples(&drivers, &obs, &global, grid, cfg.sparse_step)?;
        if samples.is_empty() {
            return Err(CliError::Data("no composited map sample could be built".into()));
        }
        ensure_dir(&parent_dir(sp))?;
        write_file(sp, &encode_sparse(&samples, &global, grid))?;
    }

    let mut inputs = vec![drivers_path.to_path_buf(), obs_path.to_path_buf()];
    inputs.extend(common.config.iter().cloned());
    let span = (table.t.iter().copied().min().unwrap_or(0), table.t.iter().copied().max().unwrap_or(0));
    RunManifest {
        command: "features",
        config_path: common.config.clone(),
        config_hash: cfg.hash(),
        inputs,
        output_dir: out_dir,
        data_span: Some(span),
    }
    .write()
}

/// Derives a parameter-initialization seed distinct from the shuffle stream.
fn init_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ 0xA076_1D64_78BD_642F
}

fn validation_split(table: &FeatureTable, sat: u32, fraction: f64) -> Result<(FeatureTable, FeatureTable), CliError> {
    let range = TimeRange::final_fraction(&table.t, fraction);
    Ok(split_by_holdout(table, sat, range)?)
}

/// Trains from a decoded feature table with the point-model pipeline.
pub fn train_points(cfg: &RunConfig, table: &FeatureTable) -> Result<(Model, crate::train::History), CliError> {
    if cfg.arch == ArchKind::ConvDecoder {
        return Err(CliError::Config("the conv decoder trains from --sparse samples".into()));
    }
    let (train, val) = validation_split(table, cfg.split_sat, cfg.val_fraction)?;
    let arch = cfg.build_arch(table.width()).map_err(CliError::Config)?;
    let params = ParamStore::init(&arch, init_seed(cfg.seed))?;
    let norm = train.normalization.clone().expect("split attaches normalization");
    let mut model = Model::new(arch, params, table.schema.clone(), norm)?;
    record_meta(&mut model, cfg, &cfg.split_sat.to_string());
    let (mut trained, history) = train_model(&model, TrainData::Points { train: &train, val: &val }, &cfg.train_config(cfg.arch))?;
    trained.meta = model.meta;
    Ok((trained, history))
}

pub fn train_sparse(
    cfg: &RunConfig,
    samples: &[crate::train::SparseSample],
    schema: &crate::ingest::FeatureSchema,
    grid: crate::geomodel::GridSpec,
) -> Result<(Model, crate::train::History), CliError> {
    if cfg.arch != ArchKind::ConvDecoder {
        return Err(CliError::Config(format!("--sparse samples need arch=conv, got {}", cfg.arch)));
    }
    let (train, val) = split_sparse(samples, cfg.val_fraction);
    if train.is_empty() || val.is_empty() {
        return Err(CliError::Data("time split leaves no training or validation samples".into()));
    }
    let arch = cfg.build_arch(schema.width()).map_err(CliError::Config)?;
    if let Arch::ConvDecoder(a) = &arch {
        if (a.n_lat, a.n_mlt) != (grid.n_lat, grid.n_mlt) {
            return Err(CliError::Config(format!(
                "samples are on a {}x{} grid, config asks for {}x{}",
                grid.n_lat, grid.n_mlt, a.n_lat, a.n_mlt
            )));
        }
    }
    let params = ParamStore::init(&arch, init_seed(cfg.seed))?;
    let norm = fit_sparse_normalization(&train).expect("non-empty");
    let mut model = Model::new(arch, params, schema.clone(), norm)?;
    record_meta(&mut model, cfg, "all");
    let (mut trained, history) =
        train_model(&model, TrainData::Sparse { train: &train, val: &val }, &cfg.train_config(cfg.arch))?;
    trained.meta = model.meta;
    Ok((trained, history))
}

fn record_meta(model: &mut Model, cfg: &RunConfig, split_sat: &str) {
    model.meta = vec![
        ("config_hash".into(), cfg.hash()),
        ("seed".into(), cfg.seed.to_string()),
        ("loss".into(), cfg.loss_spec().name().into()),
        ("split.sat".into(), split_sat.into()),
        ("split.val_fraction".into(), cfg.val_fraction.to_string()),
    ];
}

fn cmd_train(common: &Common, features: Option<&Path>, sparse: Option<&Path>, out_dir: &Path) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let input = features.or(sparse).ok_or_else(|| CliError::Config("one of --features or --sparse is required".into()))?;
    let bytes = read_file(input)?;
    let result = match (features, sparse) {
        (Some(_), _) => train_points(&cfg, &decode_table(&bytes)?),
        (None, Some(_)) => {
            let (samples, schema, grid) = decode_sparse(&bytes)?;
            train_sparse(&cfg, &samples, &schema, grid)
        }
        (None, None) => unreachable!("checked above"),
    };
    ensure_dir(out_dir)?;
    let (model, history) = match result {
        Err(CliError::Diverged { message, last_good }) => {
            save_checkpoint(&last_good, out_dir.join("diverged.aurn"))?;
            write_file(&out_dir.join("divergence.txt"), format!("{message}\n").as_bytes())?;
            return Err(CliError::Diverged { message, last_good });
        }
        other => other?,
    };
    save_checkpoint(&model, out_dir.join("model.aurn"))?;
    let mut csv = Vec::new();
    history.write_csv(&mut csv).map_err(|e| io_err(out_dir, e))?;
    write_file(&out_dir.join("history.csv"), &csv)?;
    let mut inputs = vec![input.to_path_buf()];
    inputs.extend(common.config.iter().cloned());
    RunManifest {
        command: "train",
        config_path: common.config.clone(),
        config_hash: cfg.hash(),
        inputs,
        output_dir: out_dir.to_path_buf(),
        data_span: None,
    }
    .write()
}

/// Rows the checkpoint was validated on: its hold-out satellite (or every
/// satellite) inside the final time fraction.
pub fn evaluation_rows(model: &Model, table: &FeatureTable) -> Result<FeatureTable, CliError> {
    let fraction: f64 = model.meta("split.val_fraction").and_then(|v| v.parse().ok()).unwrap_or(0.2);
    let range = TimeRange::final_fraction(&table.t, fraction);
    let sat: Option<u32> = model.meta("split.sat").and_then(|v| v.parse().ok());
    let idx: Vec<usize> = (0..table.len())
        .filter(|&i| range.contains(table.t[i]) && sat.is_none_or(|s| table.sat_id[i] == s))
        .collect();
    if idx.is_empty() {
        return Err(CliError::Data("no evaluation rows in the feature cache".into()));
    }
    Ok(table.subset(&idx))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

fn cmd_eval(
    common: &Common,
    checkpoint: &Path,
    features: &Path,
    baseline: Option<&Path>,
    out_dir: &Path,
    all_rows: bool,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let model = load_checkpoint(checkpoint)?;
    let table = decode_table(&read_file(features)?)?;
    let rows = if all_rows { table } else { evaluation_rows(&model, &table)? };
    let pred = model.predict_points(&rows)?;
    ensure_dir(out_dir)?;

    let mut summary = format!(
        "checkpoint={}\nconfig_hash={}\nseed={}\narch={}\nloss={}\nn_eval={}\n",
        checkpoint.display(),
        model.meta("config_hash").unwrap_or("unknown"),
        model.meta("seed").unwrap_or("unknown"),
        model.arch.kind(),
        model.meta("loss").unwrap_or("unknown"),
        rows.len()
    );
    let mse = crate::losses::mse(&rows.target, &pred).map_err(|e| CliError::Data(e.to_string()))?;
    let mae = rows.target.iter().zip(&pred).map(|(t, p)| (t - p).abs()).sum::<f64>() / rows.len() as f64;
    summary += &format!("mse_log10={mse}\nmae_log10={mae}\n");

    let binned = eval::binned_errors(&rows.target, &pred, cfg.eval_bins)?;
    write_file(&out_dir.join("binned_errors.csv"), &csv_bytes(|b| binned.write_csv(b)))?;
    let hist = eval::histogram_compare(&rows.target, &pred, cfg.eval_bins, true);
    write_file(&out_dir.join("histogram.csv"), &csv_bytes(|b| hist.write_csv(b)))?;
    let coverage = eval::high_bin_coverage(&rows.target, &pred, cfg.eval_bins, 95.0)?;
    summary += &format!("high_bin_coverage_p95={coverage}\n");

    if let Some(labels) = &rows.region {
        let table = eval::region_mse_table(&rows.target, &pred, labels)?;
        write_file(&out_dir.join("region_mse.csv"), &csv_bytes(|b| eval::write_region_mse_csv(&table, b)))?;
        if model.arch.kind() == ArchKind::MultiTask {
            let report = eval::classification_report(labels, &model.predict_regions(&rows)?)?;
            write_file(&out_dir.join("classification.csv"), &csv_bytes(|b| report.write_csv(b)))?;
            summary += &format!("region_accuracy={}\n", report.accuracy);
        }
    }

    let mut inputs = vec![checkpoint.to_path_buf(), features.to_path_buf()];
    if let Some(bp) = baseline {
        let base = load_checkpoint(bp)?;
        let base_pred = base.predict_points(&rows)?;
        let tail = eval::tail_reduction(&rows.target, &base_pred, &pred, &TAIL_PERCENTILES)?;
        write_file(&out_dir.join("tail_reduction.csv"), &csv_bytes(|b| tail.write_csv(b)))?;
        for r in &tail.rows {
            summary += &format!("tail_reduction_p{}={}\n", r.percentile, r.reduction);
        }
        inputs.push(bp.to_path_buf());
    }
    write_file(&out_dir.join("summary.txt"), summary.as_bytes())?;
    inputs.extend(common.config.iter().cloned());
    RunManifest {
        command: "eval",
        config_path: common.config.clone(),
        config_hash: cfg.hash(),
        inputs,
        output_dir: out_dir.to_path_buf(),
        data_span: Some((rows.t.iter().copied().min().unwrap_or(0), rows.t.iter().copied().max().unwrap_or(0))),
    }
    .write()
}

fn cmd_map(common: &Common, checkpoint: &Path, drivers: &Path, at: i64, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let model = load_checkpoint(checkpoint)?;
    let drivers_series = read_drivers_csv(drivers)?;
    if at < drivers_series.t0 || at > drivers_series.t_end() {
        return Err(CliError::Data(format!(
            "--at {at} outside driver range [{}, {}]",
            drivers_series.t0,
            drivers_series.t_end()
        )));
    }
    let spec = match &model.arch {
        Arch::ConvDecoder(a) => a.grid(),
        _ => cfg.grid().map_err(CliError::Config)?,
    };
    let map = eval::render_map(&model, &drivers_series, at, spec)?;
    let dir = parent_dir(out);
    ensure_dir(&dir)?;
    let stem = out.with_extension("");
    eval::write_map_files(&map, &stem, cfg.map_vmin, cfg.map_vmax)?;
    let mut inputs = vec![checkpoint.to_path_buf(), drivers.to_path_buf()];
    inputs.extend(common.config.iter().cloned());
    RunManifest {
        command: "map",
        config_path: common.config.clone(),
        config_hash: cfg.hash(),
        inputs,
        output_dir: dir,
        data_span: Some((at, at)),
    }
    .write()
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    execute(&cli.command)
}

pub fn execute(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth { common, out_dir, days } => cmd_synth(common, out_dir, *days),
        Command::Features { common, drivers, obs, out, sparse_out } => {
            cmd_features(common, drivers, obs, out, sparse_out.as_deref())
        }
        Command::Train { common, features, sparse, out_dir } => {
            cmd_train(common, features.as_deref(), sparse.as_deref(), out_dir)
        }
        Command::Eval { common, checkpoint, features, baseline_checkpoint, out_dir, all_rows } => {
            cmd_eval(common, checkpoint, features, baseline_checkpoint.as_deref(), out_dir, *all_rows)
        }
        Command::Map { common, checkpoint, drivers, at, out } => cmd_map(common, checkpoint, drivers, *at, out),
    }
}

/// Entry point for the binary: reports the error and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    match Cli::try_parse_from(&args) {
        Ok(cli) => match execute(&cli.command) {
            Ok(()) => 0,
            Err(e) => {
                let _ = writeln!(std::io::stderr(), "error: {e}");
                e.exit_code()
            }
        },
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}

