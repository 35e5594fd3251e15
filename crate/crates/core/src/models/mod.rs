//! Point-wise MLP, two-head multi-task MLP and the sparse-map decoder.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::codec::DecodeError;
use crate::geomodel::{GridSpec, Region};
use crate::ingest::{FeatureSchema, FeatureTable, IngestError, Normalization};
use crate::losses::argmax;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input width {got} does not match model width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("the map decoder takes no spatial inputs, but the schema contains '{0}'")]
    SpatialInputs(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("parameter '{name}': declared shape {expected:?}, found {got:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("feature schema of the data does not match the model")]
    SchemaMismatch,
    #[error("{0}")]
    Unsupported(String),
    #[error("checkpoint: {0}")]
    Decode(#[from] DecodeError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

fn invalid(msg: impl Into<String>) -> ModelError {
    ModelError::InvalidArch(msg.into())
}

fn check_dropout(rate: f64) -> Result<(), ModelError> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(invalid(format!("dropout {rate} outside [0, 1)")))
    }
}

fn check_widths(w: &[usize], what: &str) -> Result<(), ModelError> {
    if w.len() < 2 || w.contains(&0) {
        return Err(invalid(format!("{what} widths {w:?} need at least two positive entries")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineArch {
    /// Input width first, final width 1.
    pub widths: Vec<usize>,
    /// Applied after the first hidden layer.
    pub dropout: f64,
}

impl BaselineArch {
    pub fn default_for(d: usize) -> Self {
        Self { widths: vec![d, 2 * d, 64, 32, 256, 1024, 256, 64, 1], dropout: 0.5 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_widths(&self.widths, "baseline")?;
        if self.widths.last() != Some(&1) {
            return Err(invalid("baseline final width must be 1"));
        }
        check_dropout(self.dropout)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskArch {
    /// Input width first; both heads read the last trunk layer.
    pub trunk: Vec<usize>,
    pub n_classes: usize,
    pub dropout: f64,
}

impl MultiTaskArch {
    pub fn default_for(d: usize) -> Self {
        Self { trunk: vec![d, 2 * d, 64, 32, 256, 1024, 256, 64], n_classes: Region::ALL.len(), dropout: 0.5 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_widths(&self.trunk, "multitask trunk")?;
        if self.n_classes != Region::ALL.len() {
            return Err(invalid(format!("multitask needs {} classes", Region::ALL.len())));
        }
        check_dropout(self.dropout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeconvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvDecoderArch {
    /// Input width first; the last width is reshaped to `base x base`.
    pub trunk: Vec<usize>,
    pub base: usize,
    pub deconv: Vec<DeconvLayer>,
    pub final_kernel: usize,
    pub overlap: usize,
    /// Applied after the first trunk layer and after the last deconvolution.
    pub dropout: f64,
    pub n_lat: usize,
    pub n_mlt: usize,
}

impl ConvDecoderArch {
    pub fn default_for(d: usize) -> Self {
        Self::for_grid(d, GridSpec::default()).expect("default grid is valid")
    }

    /// Default layer stack scaled to a square grid whose edge is a multiple of 8.
    pub fn for_grid(d: usize, spec: GridSpec) -> Result<Self, ModelError> {
        if spec.n_lat != spec.n_mlt || spec.n_lat % 8 != 0 {
            return Err(invalid(format!("grid {}x{} must be square with an edge divisible by 8", spec.n_lat, spec.n_mlt)));
        }
        let base = spec.n_lat / 8;
        Ok(Self {
            trunk: vec![d, 256, 64, 32, base * base],
            base,
            deconv: vec![
                DeconvLayer { channels: 4, kernel: 9, stride: 2 },
                DeconvLayer { channels: 4, kernel: 5, stride: 4 },
            ],
            final_kernel: 7,
            overlap: 3,
            dropout: 0.5,
            n_lat: spec.n_lat,
            n_mlt: spec.n_mlt,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_widths(&self.trunk, "decoder trunk")?;
        check_dropout(self.dropout)?;
        if self.trunk.last() != Some(&(self.base * self.base)) {
            return Err(invalid(format!("last trunk width must be base^2 = {}", self.base * self.base)));
        }
        if self.deconv.is_empty() || self.deconv.iter().any(|l| l.channels == 0 || l.kernel == 0 || l.stride == 0) {
            return Err(invalid("deconvolution layers need positive channels, kernel and stride"));
        }
        let edge = self.deconv.iter().fold(self.base, |e, l| e * l.stride);
        if edge != self.n_lat || edge != self.n_mlt {
            return Err(invalid(format!("deconvolutions produce {edge}x{edge}, grid is {}x{}", self.n_lat, self.n_mlt)));
        }
        if self.final_kernel != 2 * self.overlap + 1 {
            return Err(invalid(format!(
                "final kernel {} must equal 2 * overlap + 1 = {} to restore the grid width",
                self.final_kernel,
                2 * self.overlap + 1
            )));
        }
        if self.overlap >= self.n_mlt {
            return Err(invalid("overlap must be smaller than the grid width"));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec { n_lat: self.n_lat, n_mlt: self.n_mlt, ..GridSpec::default() }
    }

    /// Activation shapes `[channels, height, width]` from the reshape to the output.
    pub fn shape_trace(&self) -> Vec<[usize; 3]> {
        let mut out = vec![[1, self.base, self.base]];
        let mut e = self.base;
        for l in &self.deconv {
            e *= l.stride;
            out.push([l.channels, e, e]);
        }
        let c = self.deconv.last().map_or(1, |l| l.channels);
        out.push([c, e, e + 2 * self.overlap]);
        out.push([1, e, e]);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Arch {
    Baseline(BaselineArch),
    MultiTask(MultiTaskArch),
    ConvDecoder(ConvDecoderArch),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Baseline,
    MultiTask,
    ConvDecoder,
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Baseline => "baseline",
            ArchKind::MultiTask => "multitask",
            ArchKind::ConvDecoder => "conv",
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(ArchKind::Baseline),
            "multitask" => Ok(ArchKind::MultiTask),
            "conv" => Ok(ArchKind::ConvDecoder),
            other => Err(format!("unknown arch '{other}'")),
        }
    }
}

fn dense_shapes(widths: &[usize], prefix: &str, out: &mut Vec<(String, Vec<usize>)>) {
    for (i, w) in widths.windows(2).enumerate() {
        out.push((format!("{prefix}{i}.w"), vec![w[0], w[1]]));
        out.push((format!("{prefix}{i}.b"), vec![w[1]]));
    }
}

impl Arch {
    pub fn kind(&self) -> ArchKind {
        match self {
            Arch::Baseline(_) => ArchKind::Baseline,
            Arch::MultiTask(_) => ArchKind::MultiTask,
            Arch::ConvDecoder(_) => ArchKind::ConvDecoder,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Arch::Baseline(a) => a.validate(),
            Arch::MultiTask(a) => a.validate(),
            Arch::ConvDecoder(a) => a.validate(),
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            Arch::Baseline(a) => a.widths[0],
            Arch::MultiTask(a) => a.trunk[0],
            Arch::ConvDecoder(a) => a.trunk[0],
        }
    }

    /// Named parameter blocks in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match self {
            Arch::Baseline(a) => dense_shapes(&a.widths, "dense", &mut out),
            Arch::MultiTask(a) => {
                dense_shapes(&a.trunk, "dense", &mut out);
                let last = *a.trunk.last().expect("validated");
                for head in ["class", "flux"] {
                    out.push((format!("{head}.w"), vec![last, a.n_classes]));
                    out.push((format!("{head}.b"), vec![a.n_classes]));
                }
            }
            Arch::ConvDecoder(a) => {
                dense_shapes(&a.trunk, "dense", &mut out);
                let mut c_in = 1;
                for (j, l) in a.deconv.iter().enumerate() {
                    out.push((format!("deconv{j}.k"), vec![c_in, l.channels, l.kernel, l.kernel]));
                    out.push((format!("deconv{j}.b"), vec![l.channels]));
                    c_in = l.channels;
                }
                out.push(("final.k".into(), vec![1, c_in, a.final_kernel, a.final_kernel]));
                out.push(("final.b".into(), vec![1]));
            }
        }
        out
    }
}

/// Round to the nearest 32-bit float; parameters are kept at this precision.
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Named parameter tensors in [`Arch::param_shapes`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub blocks: Vec<(String, Tensor)>,
}

impl ParamStore {
    /// Glorot-uniform weights and zero biases, rounded to 32-bit precision.
    pub fn init(arch: &Arch, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = arch
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let data = if shape.len() == 1 {
                    vec![0.0; len]
                } else {
                    let (fan_in, fan_out) = match shape.as_slice() {
                        [i, o] => (*i, *o),
                        [a, b, kh, kw] if name.starts_with("deconv") => (a * kh * kw, b * kh * kw),
                        [a, b, kh, kw] => (b * kh * kw, a * kh * kw),
                        _ => unreachable!("parameter ranks are 1, 2 or 4"),
                    };
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                    (0..len).map(|_| round_f32(dist.sample(&mut rng))).collect()
                };
                Ok((name, Tensor::new(shape, data)?))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(Self { blocks })
    }

    /// Checks names and shapes against the architecture.
    pub fn validate(&self, arch: &Arch) -> Result<(), ModelError> {
        let expected = arch.param_shapes();
        if expected.len() != self.blocks.len() {
            return Err(invalid(format!("expected {} parameter blocks, found {}", expected.len(), self.blocks.len())));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&self.blocks) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(ModelError::ShapeMismatch {
                    name: got_name.clone(),
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn n_values(&self) -> usize {
        self.blocks.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn round_to_f32(&mut self) {
        for (_, t) in &mut self.blocks {
            t.data_mut().iter_mut().for_each(|v| *v = round_f32(*v));
        }
    }
}

/// Dropout behaviour of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Inference,
    Training { seed: u64 },
}

impl Mode {
    fn dropout_seed(self, layer: u64) -> (bool, u64) {
        match self {
            Mode::Inference => (false, 0),
            Mode::Training { seed } => (true, seed ^ layer.wrapping_mul(0xD1B5_4A32_D192_ED03)),
        }
    }
}

/// Tape handles of a forward pass.
pub enum Output {
    /// `[n, 1]`
    Point(Var),
    /// `[n, k]` each
    MultiTask { probs: Var, flux: Var },
    /// `[n, 1, n_lat, n_mlt]`
    Grid(Var),
}

/// Parameters placed on a tape, in [`ParamStore`] order.
pub struct Bound {
    pub params: Vec<Var>,
}

impl Bound {
    /// Records all blocks as differentiable leaves, or as constants for inference.
    pub fn new(tape: &mut Tape, params: &ParamStore, differentiable: bool) -> Self {
        let params = params
            .blocks
            .iter()
            .map(|(_, t)| if differentiable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Self { params }
    }
}

struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl Cursor<'_> {
    fn pop(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }
}

/// Dense stack; ReLU on every layer except the last when `linear_last`.
fn trunk(
    tape: &mut Tape,
    mut h: Var,
    n_layers: usize,
    linear_last: bool,
    dropout: f64,
    mode: Mode,
    p: &mut Cursor<'_>,
) -> Result<Var, ModelError> {
    for i in 0..n_layers {
        let (w, b) = (p.pop(), p.pop());
        h = tape.dense(h, w, b)?;
        if !(linear_last && i + 1 == n_layers) {
            h = tape.relu(h);
        }
        if i == 0 && n_layers > 1 {
            let (training, seed) = mode.dropout_seed(0);
            h = tape.dropout(h, dropout, training, seed)?;
        }
    }
    Ok(h)
}

/// Records the forward pass of `arch` for `x: [n, d]` (normalized features).
pub fn forward_tape(arch: &Arch, tape: &mut Tape, bound: &Bound, x: Var, mode: Mode) -> Result<Output, ModelError> {
    let xs = tape.value(x).shape().to_vec();
    let d = arch.input_width();
    if xs.len() != 2 || xs[1] != d {
        return Err(ModelError::WidthMismatch { expected: d, got: xs.get(1).copied().unwrap_or(0) });
    }
    let n = xs[0];
    let mut p = Cursor { vars: &bound.params, next: 0 };
    Ok(match arch {
        Arch::Baseline(a) => Output::Point(trunk(tape, x, a.widths.len() - 1, true, a.dropout, mode, &mut p)?),
        Arch::MultiTask(a) => {
            let h = trunk(tape, x, a.trunk.len() - 1, false, a.dropout, mode, &mut p)?;
            let (cw, cb) = (p.pop(), p.pop());
            let logits = tape.dense(h, cw, cb)?;
            let probs = tape.softmax(logits)?;
            let (fw, fb) = (p.pop(), p.pop());
            let flux = tape.dense(h, fw, fb)?;
            Output::MultiTask { probs, flux }
        }
        Arch::ConvDecoder(a) => {
            let h = trunk(tape, x, a.trunk.len() - 1, false, a.dropout, mode, &mut p)?;
            let mut g = tape.reshape(h, &[n, 1, a.base, a.base])?;
            let last = a.deconv.len() - 1;
            for (j, l) in a.deconv.iter().enumerate() {
                let (k, b) = (p.pop(), p.pop());
                g = tape.conv2d_transpose(g, k, Some(b), l.stride)?;
                if j < last {
                    g = tape.relu(g);
                }
            }
            let (training, seed) = mode.dropout_seed(1);
            g = tape.dropout(g, a.dropout, training, seed)?;
            g = tape.pad_periodic_mlt(g, a.overlap)?;
            let (k, b) = (p.pop(), p.pop());
            Output::Grid(tape.conv2d(g, k, Some(b), a.overlap)?)
        }
    })
}

fn check_features(arch: &Arch, features: &[f64]) -> Result<usize, ModelError> {
    let d = arch.input_width();
    if features.len() % d != 0 {
        return Err(ModelError::WidthMismatch { expected: d, got: features.len() });
    }
    Ok(features.len() / d)
}

const POINT_CHUNK: usize = 8192;
const GRID_CHUNK: usize = 8;

fn run_chunks<T>(
    arch: &Arch,
    params: &ParamStore,
    features: &[f64],
    chunk: usize,
    mut f: impl FnMut(&Tape, Output) -> Result<T, ModelError>,
) -> Result<Vec<T>, ModelError> {
    params.validate(arch)?;
    let n = check_features(arch, features)?;
    let d = arch.input_width();
    let mut out = Vec::new();
    for start in (0..n).step_by(chunk.max(1)) {
        let rows = chunk.min(n - start);
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params, false);
        let x = tape.constant(Tensor::matrix(rows, d, features[start * d..(start + rows) * d].to_vec())?);
        let y = forward_tape(arch, &mut tape, &bound, x, Mode::Inference)?;
        out.push(f(&tape, y)?);
    }
    Ok(out)
}

/// Log10 flux per row of `features: [n, d]`.
pub fn forward_baseline(arch: &BaselineArch, params: &ParamStore, features: &[f64]) -> Result<Vec<f64>, ModelError> {
    let arch = Arch::Baseline(arch.clone());
    let parts = run_chunks(&arch, params, features, POINT_CHUNK, |tape, y| match y {
        Output::Point(v) => Ok(tape.value(v).data().to_vec()),
        _ => unreachable!("baseline yields a point output"),
    })?;
    Ok(parts.concat())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskPrediction {
    /// `[n, 3]`
    pub class_probs: Vec<f64>,
    /// `[n, 3]`
    pub region_flux: Vec<f64>,
    pub selected_flux: Vec<f64>,
}

impl MultiTaskPrediction {
    pub fn regions(&self) -> Vec<Region> {
        let k = Region::ALL.len();
        self.class_probs
            .chunks_exact(k)
            .map(|r| Region::from_index(argmax(r)).expect("argmax < 3"))
            .collect()
    }
}

/// Selects, per row, the regression output of the most probable class.
pub fn select_flux(class_probs: &[f64], region_flux: &[f64], k: usize) -> Vec<f64> {
    class_probs
        .chunks_exact(k)
        .zip(region_flux.chunks_exact(k))
        .map(|(p, f)| f[argmax(p)])
        .collect()
}

pub fn forward_multitask(
    arch: &MultiTaskArch,
    params: &ParamStore,
    features: &[f64],
) -> Result<MultiTaskPrediction, ModelError> {
    let k = arch.n_classes;
    let arch = Arch::MultiTask(arch.clone());
    let parts = run_chunks(&arch, params, features, POINT_CHUNK, |tape, y| match y {
        Output::MultiTask { probs, flux } => Ok((tape.value(probs).data().to_vec(), tape.value(flux).data().to_vec())),
        _ => unreachable!("multitask yields two heads"),
    })?;
    let class_probs: Vec<f64> = parts.iter().flat_map(|p| p.0.iter().copied()).collect();
    let region_flux: Vec<f64> = parts.iter().flat_map(|p| p.1.iter().copied()).collect();
    let selected_flux = select_flux(&class_probs, &region_flux, k);
    Ok(MultiTaskPrediction { class_probs, region_flux, selected_flux })
}

/// One `[n_lat, n_mlt]` grid (row-major) per row of `global_features`.
pub fn forward_convdecoder(
    arch: &ConvDecoderArch,
    params: &ParamStore,
    global_features: &[f64],
) -> Result<Vec<f64>, ModelError> {
    let arch = Arch::ConvDecoder(arch.clone());
    let parts = run_chunks(&arch, params, global_features, GRID_CHUNK, |tape, y| match y {
        Output::Grid(v) => Ok(tape.value(v).data().to_vec()),
        _ => unreachable!("decoder yields a grid"),
    })?;
    Ok(parts.concat())
}

/// A trained (or freshly initialized) model with its input pipeline state.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Arch,
    pub params: ParamStore,
    pub schema: FeatureSchema,
    pub normalization: Normalization,
    /// Free-form provenance recorded in checkpoints.
    pub meta: Vec<(String, String)>,
}

impl Model {
    pub fn new(
        arch: Arch,
        params: ParamStore,
        schema: FeatureSchema,
        normalization: Normalization,
    ) -> Result<Self, ModelError> {
        arch.validate()?;
        params.validate(&arch)?;
        if schema.width() != arch.input_width() || normalization.width() != arch.input_width() {
            return Err(ModelError::WidthMismatch { expected: arch.input_width(), got: schema.width() });
        }
        if let (Arch::ConvDecoder(_), Some(k)) = (&arch, schema.kinds().iter().find(|k| k.is_spatial())) {
            return Err(ModelError::SpatialInputs(k.to_string()));
        }
        Ok(Self { arch, params, schema, normalization, meta: Vec::new() })
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Normalized model inputs for the rows of `table`, selecting columns by name.
    pub fn inputs_for(&self, table: &FeatureTable) -> Result<Vec<f64>, ModelError> {
        let names = self.schema.names();
        let raw = if table.schema == self.schema {
            table.rows.clone()
        } else {
            table.columns(&names).map_err(|_| ModelError::SchemaMismatch)?
        };
        Ok(self.normalization.apply(&raw))
    }

    /// Point predictions (log10 flux) for every row of `table`. The map decoder
    /// is evaluated once per distinct timestamp and read at each row's cell.
    pub fn predict_points(&self, table: &FeatureTable) -> Result<Vec<f64>, ModelError> {
        let x = self.inputs_for(table)?;
        match &self.arch {
            Arch::Baseline(a) => forward_baseline(a, &self.params, &x),
            Arch::MultiTask(a) => Ok(forward_multitask(a, &self.params, &x)?.selected_flux),
            Arch::ConvDecoder(a) => {
                let d = a.trunk[0];
                let mut firsts = Vec::new();
                let mut slot = Vec::with_capacity(table.len());
                for i in 0..table.len() {
                    if i == 0 || table.t[i] != table.t[i - 1] {
                        firsts.push(i);
                    }
                    slot.push(firsts.len() - 1);
                }
                let mut rows = Vec::with_capacity(firsts.len() * d);
                for &i in &firsts {
                    rows.extend_from_slice(&x[i * d..(i + 1) * d]);
                }
                let grids = forward_convdecoder(a, &self.params, &rows)?;
                let spec = a.grid();
                let cells = spec.len();
                Ok((0..table.len())
                    .map(|i| {
                        let (r, c) = spec.cell_of(table.coord[i]);
                        grids[slot[i] * cells + spec.flat(r, c)]
                    })
                    .collect())
            }
        }
    }

    /// Predicted region labels; only the multi-task model has a classifier.
    pub fn predict_regions(&self, table: &FeatureTable) -> Result<Vec<Region>, ModelError> {
        let Arch::MultiTask(a) = &self.arch else {
            return Err(ModelError::Unsupported(format!("{} model has no region head", self.arch.kind())));
        };
        let x = self.inputs_for(table)?;
        Ok(forward_multitask(a, &self.params, &x)?.regions())
    }
}
