//! Mini-batch training with Adam, early stopping and seeded shuffling.

mod sparse;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::codec::DecodeError;
use crate::geomodel::Region;
use crate::ingest::{FeatureTable, IngestError};
use crate::losses::{self, LossError, LossSpec, PointLoss};
use crate::models::{forward_convdecoder, forward_tape, Arch, ArchKind, Bound, Mode, Model, ModelError, Output, ParamStore};

pub use sparse::{
    build_sparse_samples, composite_window, decode_sparse, encode_sparse, fit_sparse_normalization, split_sparse,
    SparseSample, SPARSE_MAGIC, WINDOW_HALF_S,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no data: {0}")]
    EmptyData(String),
    #[error("no observations within the window around t = {t_center}")]
    EmptyWindow { t_center: i64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize, loss: f64, last_good: Box<Model> },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("sparse cache: {0}")]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optim: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss: LossSpec,
    /// Round parameters to 32-bit precision after every update.
    pub f32_params: bool,
}

impl TrainConfig {
    pub fn default_for(kind: ArchKind) -> Self {
        let (batch_size, loss) = match kind {
            ArchKind::Baseline => (4096, LossSpec::Mse),
            ArchKind::MultiTask => (4096, LossSpec::MultiTask { lambda_cce: 1.0 }),
            ArchKind::ConvDecoder => (16, LossSpec::SparseMasked { normalize: true }),
        };
        Self { optim: AdamConfig::default(), batch_size, max_epochs: 200, patience: 10, seed: 0, loss, f32_params: true }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate must be >= 0, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(TrainError::Config("Adam needs beta in [0, 1) and eps > 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(TrainError::Config("batch_size, max_epochs and patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// Checks that the loss variant fits the architecture.
pub fn check_combination(arch: ArchKind, loss: &LossSpec) -> Result<(), TrainError> {
    let ok = match loss {
        LossSpec::Mse | LossSpec::Tail { .. } | LossSpec::Dist { .. } => arch == ArchKind::Baseline,
        LossSpec::MultiTask { .. } => arch == ArchKind::MultiTask,
        LossSpec::SparseMasked { .. } => arch == ArchKind::ConvDecoder,
    };
    if ok {
        Ok(())
    } else {
        Err(TrainError::Config(format!("loss '{loss}' cannot train the {arch} architecture")))
    }
}

/// First and second moments per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.blocks.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// Bias-corrected Adam update of every block.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.blocks.len() || state.m.len() != params.blocks.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} parameter blocks, {} gradients, {} moment blocks",
            params.blocks.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (((name, p), g), m) in params.blocks.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || m.len() != p.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "block '{name}': parameter {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (_, p)) in params.blocks.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            *w -= cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    /// Validation loss of the initial parameters.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch).map_or(f64::NAN, |e| e.val_loss)
    }

    /// `epoch,train_loss,val_loss` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_loss")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{}", e.epoch, e.train_loss, e.val_loss)?;
        }
        Ok(())
    }
}

/// Training and validation data for one run.
pub enum TrainData<'a> {
    Points { train: &'a FeatureTable, val: &'a FeatureTable },
    Sparse { train: &'a [SparseSample], val: &'a [SparseSample] },
}

enum Prepared<'a> {
    Point { x: Vec<f64>, y: Vec<f64>, loss: PointLoss, val_x: Vec<f64>, val_y: Vec<f64> },
    MultiTask { x: Vec<f64>, y: Vec<f64>, onehot: Vec<f64>, lambda: f64, val_x: Vec<f64>, val_y: Vec<f64> },
    Sparse { x: Vec<f64>, targets: Vec<&'a crate::geomodel::GridMap>, normalize: bool, val_x: Vec<f64>, val_targets: Vec<&'a crate::geomodel::GridMap> },
}

impl Prepared<'_> {
    fn len(&self) -> usize {
        match self {
            Prepared::Point { y, .. } | Prepared::MultiTask { y, .. } => y.len(),
            Prepared::Sparse { targets, .. } => targets.len(),
        }
    }
}

fn prepare<'a>(model: &Model, data: &TrainData<'a>, spec: &LossSpec) -> Result<Prepared<'a>, TrainError> {
    check_combination(model.arch.kind(), spec)?;
    match data {
        TrainData::Points { train, val } => {
            if train.is_empty() || val.is_empty() {
                return Err(TrainError::EmptyData("training and validation tables must be non-empty".into()));
            }
            let (x, val_x) = (model.inputs_for(train)?, model.inputs_for(val)?);
            let (y, val_y) = (train.target.clone(), val.target.clone());
            if let LossSpec::MultiTask { lambda_cce } = spec {
                let labels = train.region.as_ref().ok_or(IngestError::LabelsAbsent)?;
                let k = Region::ALL.len();
                let mut onehot = vec![0.0; labels.len() * k];
                for (i, r) in labels.iter().enumerate() {
                    onehot[i * k + r.index()] = 1.0;
                }
                return Ok(Prepared::MultiTask { x, y, onehot, lambda: *lambda_cce, val_x, val_y });
            }
            let loss = PointLoss::resolve(spec, &y)?.ok_or_else(|| TrainError::Config(format!("{spec} is not a point loss")))?;
            Ok(Prepared::Point { x, y, loss, val_x, val_y })
        }
        TrainData::Sparse { train, val } => {
            if train.is_empty() || val.is_empty() {
                return Err(TrainError::EmptyData("training and validation samples must be non-empty".into()));
            }
            let LossSpec::SparseMasked { normalize } = spec else {
                return Err(TrainError::Config(format!("sparse samples need the sparse_masked loss, got {spec}")));
            };
            let w = model.arch.input_width();
            let stack = |s: &[SparseSample]| -> Result<Vec<f64>, TrainError> {
                let mut raw = Vec::with_capacity(s.len() * w);
                for sample in s {
                    if sample.features.len() != w {
                        return Err(ModelError::WidthMismatch { expected: w, got: sample.features.len() }.into());
                    }
                    raw.extend_from_slice(&sample.features);
                }
                Ok(model.normalization.apply(&raw))
            };
            Ok(Prepared::Sparse {
                x: stack(train)?,
                targets: train.iter().map(|s| &s.target).collect(),
                normalize: *normalize,
                val_x: stack(val)?,
                val_targets: val.iter().map(|s| &s.target).collect(),
            })
        }
    }
}

fn gather(x: &[f64], width: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        out.extend_from_slice(&x[i * width..(i + 1) * width]);
    }
    out
}

/// Loss of one mini-batch with gradients w.r.t. every parameter block.
fn batch_step(
    model: &Model,
    prep: &Prepared<'_>,
    idx: &[usize],
    seed: u64,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let d = model.arch.input_width();
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &model.params, true);
    let xs = match prep {
        Prepared::Point { x, .. } | Prepared::MultiTask { x, .. } | Prepared::Sparse { x, .. } => x,
    };
    let x = tape.constant(Tensor::matrix(idx.len(), d, gather(xs, d, idx))?);
    let out = forward_tape(&model.arch, &mut tape, &bound, x, Mode::Training { seed })?;
    let loss = match (prep, out) {
        (Prepared::Point { y, loss, .. }, Output::Point(pred)) => {
            let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let (v, g) = loss.value_and_grad(&yb, tape.value(pred).data())?;
            tape.custom_scalar(v, vec![(pred, Tensor::matrix(idx.len(), 1, g)?)])?
        }
        (Prepared::MultiTask { y, onehot, lambda, .. }, Output::MultiTask { probs, flux }) => {
            let k = Region::ALL.len();
            let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let tb = gather(onehot, k, idx);
            let out = losses::multitask_loss(&yb, tape.value(flux).data(), &tb, tape.value(probs).data(), k, *lambda)?;
            let n = idx.len();
            tape.custom_scalar(
                out.value,
                vec![(flux, Tensor::matrix(n, k, out.grad_flux)?), (probs, Tensor::matrix(n, k, out.grad_prob)?)],
            )?
        }
        (Prepared::Sparse { targets, normalize, .. }, Output::Grid(pred)) => {
            let tb: Vec<_> = idx.iter().map(|&i| targets[i]).collect();
            let out = losses::sparse_masked_loss(tape.value(pred).data(), &tb, *normalize)?;
            let shape = tape.value(pred).shape().to_vec();
            tape.custom_scalar(out.value, vec![(pred, Tensor::new(shape, out.grad)?)])?
        }
        _ => return Err(TrainError::Config("loss does not match the model output".into())),
    };
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    Ok((value, bound.params.iter().map(|&p| grads.take(p)).collect()))
}

/// Plain MSE for point models, pooled masked MSE for the decoder.
fn validation_loss(model: &Model, prep: &Prepared<'_>) -> Result<f64, TrainError> {
    Ok(match (prep, &model.arch) {
        (Prepared::Point { val_x, val_y, .. }, Arch::Baseline(a)) => {
            losses::mse(val_y, &crate::models::forward_baseline(a, &model.params, val_x)?)?
        }
        (Prepared::MultiTask { val_x, val_y, .. }, Arch::MultiTask(a)) => {
            losses::mse(val_y, &crate::models::forward_multitask(a, &model.params, val_x)?.selected_flux)?
        }
        (Prepared::Sparse { val_x, val_targets, .. }, Arch::ConvDecoder(a)) => {
            let pred = forward_convdecoder(a, &model.params, val_x)?;
            losses::sparse_masked_loss(&pred, val_targets, true)?.value
        }
        _ => return Err(TrainError::Config("validation data does not match the model".into())),
    })
}

/// Trains `model` in place of a copy and returns the best-validation parameters.
pub fn train_model(model: &Model, data: TrainData<'_>, cfg: &TrainConfig) -> Result<(Model, History), TrainError> {
    cfg.validate()?;
    let prep = prepare(model, &data, &cfg.loss)?;
    let mut current = model.clone();
    if cfg.f32_params {
        current.params.round_to_f32();
    }
    let mut state = AdamState::new(&current.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial_val_loss = validation_loss(&current, &prep)?;
    let mut best = (f64::INFINITY, current.params.clone(), 0usize);
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..prep.len()).collect();
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let seed = rng.next_u64();
            let (loss, grads) = batch_step(&current, &prep, idx, seed)?;
            if !loss.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(TrainError::Divergence { epoch, batch, loss, last_good: Box::new(current) });
            }
            let before = current.params.clone();
            adam_step(&mut current.params, &grads, &mut state, &cfg.optim)?;
            if cfg.f32_params {
                current.params.round_to_f32();
            }
            if current.params.blocks.iter().any(|(_, t)| t.data().iter().any(|v| !v.is_finite())) {
                current.params = before;
                return Err(TrainError::Divergence { epoch, batch, loss: f64::INFINITY, last_good: Box::new(current) });
            }
            total += loss * idx.len() as f64;
            seen += idx.len();
        }
        let val_loss = validation_loss(&current, &prep)?;
        if !val_loss.is_finite() {
            if best.2 > 0 {
                current.params = best.1;
            }
            return Err(TrainError::Divergence { epoch, batch: usize::MAX, loss: val_loss, last_good: Box::new(current) });
        }
        epochs.push(EpochRecord { epoch, train_loss: total / seen as f64, val_loss });
        if val_loss < best.0 {
            best = (val_loss, current.params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let mut trained = current;
    trained.params = best.1;
    Ok((trained, History { initial_val_loss, epochs, best_epoch: best.2 }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(data: Vec<f64>) -> ParamStore {
        ParamStore { blocks: vec![("w".into(), Tensor::vector(data))] }
    }

    #[test]
    fn adam_zero_grad_and_scalar_step() {
        let cfg = AdamConfig::default();
        let mut p = block(vec![1.0, -2.0]);
        let mut s = AdamState::new(&p);
        s.m[0] = vec![0.5, 0.5];
        s.v[0] = vec![0.25, 0.25];
        s.step = 0;
        let before = p.clone();
        let mut zero_state = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut zero_state, &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(zero_state.m[0], vec![0.0, 0.0]);
        // moments decay under zero gradients
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut s, &cfg).unwrap();
        assert_eq!(s.m[0], vec![0.45, 0.45]);
        assert!((s.v[0][0] - 0.24975).abs() < 1e-15);

        // one step from zero state with gradient g: m̂ = g, v̂ = g², update = lr·g/(|g|+eps)
        let mut p = block(vec![0.0, 0.0]);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::vector(vec![0.3, -4.0])], &mut s, &cfg).unwrap();
        let exp0 = -1e-3 * 0.3 / (0.3 + 1e-8);
        let exp1 = 1e-3 * 4.0 / (4.0 + 1e-8);
        assert!((p.blocks[0].1.data()[0] - exp0).abs() < 1e-15);
        assert!((p.blocks[0].1.data()[1] - exp1).abs() < 1e-15);

        assert!(adam_step(&mut p, &[Tensor::zeros(&[3])], &mut s, &cfg).is_err());
    }

    #[test]
    fn combination_rules() {
        assert!(check_combination(ArchKind::Baseline, &LossSpec::tail_default()).is_ok());
        assert!(check_combination(ArchKind::Baseline, &LossSpec::SparseMasked { normalize: true }).is_err());
        assert!(check_combination(ArchKind::MultiTask, &LossSpec::Mse).is_err());
        assert!(check_combination(ArchKind::ConvDecoder, &LossSpec::SparseMasked { normalize: false }).is_ok());
    }
}
