//! Finite-difference gradient suites shared by the gradcheck and acceptance targets.

use auroral::autodiff::check::{central_difference, is_smooth_probe, relative_error, FD_EPS};
use auroral::autodiff::{Tape, Tensor, Var};
use auroral::geomodel::{GridMap, GridSpec};
use auroral::losses::{multitask_loss, sparse_masked_loss, LossSpec, PointLoss, DEFAULT_TAIL_TERMS};
use auroral::models::{
    forward_tape, Arch, BaselineArch, Bound, ConvDecoderArch, DeconvLayer, Mode, MultiTaskArch, Output, ParamStore,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAX_REL_ERR: f64 = 1e-4;
pub const SHAPES_PER_SUITE: usize = 20;

#[derive(Debug, Clone, Default)]
pub struct GradStats {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub cases: usize,
}

impl GradStats {
    pub fn merge(&mut self, o: &GradStats) {
        self.max_rel_err = self.max_rel_err.max(o.max_rel_err);
        self.checked += o.checked;
        self.skipped_kinks += o.skipped_kinks;
        self.cases += o.cases;
    }

    pub fn ok(&self) -> bool {
        self.cases >= SHAPES_PER_SUITE && self.checked > 0 && self.max_rel_err < MAX_REL_ERR
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// `sum(r * y)` for a fixed random `r`, so every output element is weighted differently.
pub fn project(tape: &mut Tape, y: Var, r: &Tensor) -> Var {
    let v: f64 = tape.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
    tape.custom_scalar(v, vec![(y, r.clone())]).unwrap()
}

/// Compares backward() against central differences for every input in
/// `inputs`, probing at most `max_probes` entries per input.
pub fn check_graph<F>(rng: &mut ChaCha8Rng, inputs: &[Tensor], max_probes: usize, build: F) -> GradStats
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let mut stats = GradStats { cases: 1, ..Default::default() };
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]);
        let f = |t: &Tensor| {
            let mut tape = Tape::new();
            let vs: Vec<Var> =
                inputs.iter().enumerate().map(|(j, x)| tape.param(if j == i { t.clone() } else { x.clone() })).collect();
            let l = build(&mut tape, &vs);
            tape.value(l).item()
        };
        let mut idx: Vec<usize> = (0..input.len()).collect();
        if idx.len() > max_probes {
            for k in 0..max_probes {
                let j = rng.random_range(k..idx.len());
                idx.swap(k, j);
            }
            idx.truncate(max_probes);
        }
        for k in idx {
            if !is_smooth_probe(f, input, k, FD_EPS) {
                stats.skipped_kinks += 1;
                continue;
            }
            let num = central_difference(f, input, k, FD_EPS);
            stats.max_rel_err = stats.max_rel_err.max(relative_error(analytic.data()[k], num));
            stats.checked += 1;
        }
    }
    stats
}

fn suite(seed: u64, mut case: impl FnMut(&mut ChaCha8Rng) -> GradStats) -> GradStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradStats::default();
    for _ in 0..SHAPES_PER_SUITE {
        total.merge(&case(&mut rng));
    }
    total
}

pub fn dense_suite() -> GradStats {
    suite(11, |rng| {
        let (n, di, dout) = (rng.random_range(1..6), rng.random_range(1..7), rng.random_range(1..6));
        let inputs = [rand_tensor(rng, &[n, di], 1.0), rand_tensor(rng, &[di, dout], 1.0), rand_tensor(rng, &[dout], 1.0)];
        let r = rand_tensor(rng, &[n, dout], 1.0);
        check_graph(rng, &inputs, 64, |t, v| {
            let y = t.dense(v[0], v[1], v[2]).unwrap();
            project(t, y, &r)
        })
    })
}

pub fn relu_suite() -> GradStats {
    suite(12, |rng| {
        let shape = [rng.random_range(1..5), rng.random_range(1..9)];
        let inputs = [rand_tensor(rng, &shape, 1.0)];
        let r = rand_tensor(rng, &shape, 1.0);
        check_graph(rng, &inputs, 64, |t, v| {
            let y = t.relu(v[0]);
            project(t, y, &r)
        })
    })
}

pub fn dropout_suite() -> GradStats {
    suite(13, |rng| {
        let shape = [rng.random_range(1..5), rng.random_range(2..9)];
        let inputs = [rand_tensor(rng, &shape, 1.0)];
        let r = rand_tensor(rng, &shape, 1.0);
        let (rate, seed) = (rng.random_range(0.0..0.9), rng.random::<u64>());
        check_graph(rng, &inputs, 64, |t, v| {
            let y = t.dropout(v[0], rate, true, seed).unwrap();
            project(t, y, &r)
        })
    })
}

pub fn softmax_suite() -> GradStats {
    suite(14, |rng| {
        let shape = [rng.random_range(1..5), rng.random_range(2..6)];
        let inputs = [rand_tensor(rng, &shape, 3.0)];
        let r = rand_tensor(rng, &shape, 1.0);
        check_graph(rng, &inputs, 64, |t, v| {
            let y = t.softmax(v[0]).unwrap();
            project(t, y, &r)
        })
    })
}

pub fn conv_transpose_suite() -> GradStats {
    suite(15, |rng| {
        let (n, ci, co) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
        let (h, w) = (rng.random_range(1..4), rng.random_range(1..4));
        let (kh, kw, s) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..4));
        let inputs = [
            rand_tensor(rng, &[n, ci, h, w], 1.0),
            rand_tensor(rng, &[ci, co, kh, kw], 1.0),
            rand_tensor(rng, &[co], 1.0),
        ];
        let r = rand_tensor(rng, &[n, co, h * s, w * s], 1.0);
        check_graph(rng, &inputs, 48, |t, v| {
            let y = t.conv2d_transpose(v[0], v[1], Some(v[2]), s).unwrap();
            project(t, y, &r)
        })
    })
}

pub fn pad_periodic_suite() -> GradStats {
    suite(16, |rng| {
        let (n, c, h, w) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..4), rng.random_range(2..7));
        let overlap = rng.random_range(0..w);
        let inputs = [rand_tensor(rng, &[n, c, h, w], 1.0)];
        let r = rand_tensor(rng, &[n, c, h, w + 2 * overlap], 1.0);
        check_graph(rng, &inputs, 64, |t, v| {
            let y = t.pad_periodic_mlt(v[0], overlap).unwrap();
            project(t, y, &r)
        })
    })
}

pub fn conv2d_suite() -> GradStats {
    suite(17, |rng| {
        let (n, ci, co) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
        let (kh, kw): (usize, usize) = (rng.random_range(1..4), rng.random_range(1..4));
        let pad: usize = rng.random_range(0..2);
        let h = rng.random_range(kh.saturating_sub(2 * pad).max(1)..kh + 3);
        let w = rng.random_range(kw..kw + 3);
        let inputs =
            [rand_tensor(rng, &[n, ci, h, w], 1.0), rand_tensor(rng, &[co, ci, kh, kw], 1.0), rand_tensor(rng, &[co], 1.0)];
        let (oh, ow) = (h + 2 * pad + 1 - kh, w + 1 - kw);
        let r = rand_tensor(rng, &[n, co, oh, ow], 1.0);
        check_graph(rng, &inputs, 48, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), pad).unwrap();
            project(t, y, &r)
        })
    })
}

/// reshape, scale, add and sum chained together.
pub fn elementwise_suite() -> GradStats {
    suite(18, |rng| {
        let (a, b) = (rng.random_range(1..5), rng.random_range(1..5));
        let inputs = [rand_tensor(rng, &[a, b], 1.0), rand_tensor(rng, &[b, a], 1.0)];
        let alpha = rng.random_range(-2.0..2.0);
        let r = rand_tensor(rng, &[a, b], 1.0);
        check_graph(rng, &inputs, 64, |t, v| {
            let x2 = t.reshape(v[1], &[a, b]).unwrap();
            let s = t.scale(x2, alpha);
            let y = t.add(v[0], s).unwrap();
            let p = project(t, y, &r);
            let q = t.sum(y);
            t.add(p, q).unwrap()
        })
    })
}

pub fn op_suites() -> Vec<(&'static str, GradStats)> {
    vec![
        ("dense", dense_suite()),
        ("relu", relu_suite()),
        ("dropout", dropout_suite()),
        ("softmax", softmax_suite()),
        ("conv2d_transpose", conv_transpose_suite()),
        ("pad_periodic_mlt", pad_periodic_suite()),
        ("conv2d", conv2d_suite()),
        ("reshape/scale/add/sum", elementwise_suite()),
    ]
}

/// Checks parameter gradients of a full architecture under a loss attached
/// to the tape the way the trainer attaches it.
fn check_arch<L>(rng: &mut ChaCha8Rng, arch: &Arch, x: &Tensor, mode: Mode, probes: usize, loss: L) -> GradStats
where
    L: Fn(&mut Tape, Output) -> Var,
{
    let params = ParamStore::init(arch, rng.random()).unwrap();
    // Biases start at zero; perturb them so their gradients are exercised away from symmetric points.
    let inputs: Vec<Tensor> = params
        .blocks
        .iter()
        .map(|(_, t)| {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
            t
        })
        .collect();
    check_graph(rng, &inputs, probes, |tape, vars| {
        let bound = Bound { params: vars.to_vec() };
        let xv = tape.constant(x.clone());
        let out = forward_tape(arch, tape, &bound, xv, mode).unwrap();
        loss(tape, out)
    })
}

fn point_losses(rng: &mut ChaCha8Rng, y: &[f64]) -> PointLoss {
    let spec = match rng.random_range(0..3) {
        0 => LossSpec::Mse,
        1 => LossSpec::Tail { terms: DEFAULT_TAIL_TERMS.to_vec() },
        _ => LossSpec::Dist { n_bins: rng.random_range(2..6), rescale: true },
    };
    PointLoss::resolve(&spec, y).unwrap().unwrap()
}

fn random_widths(rng: &mut ChaCha8Rng, d: usize, depth: std::ops::Range<usize>) -> Vec<usize> {
    let mut w = vec![d];
    for _ in 0..rng.random_range(depth) {
        w.push(rng.random_range(2..7));
    }
    w
}

pub fn baseline_suite() -> GradStats {
    suite(21, |rng| {
        let d = rng.random_range(2..6);
        let mut widths = random_widths(rng, d, 1..4);
        widths.push(1);
        let arch = Arch::Baseline(BaselineArch { widths, dropout: 0.5 });
        let n = rng.random_range(2..7);
        let x = rand_tensor(rng, &[n, d], 1.5);
        // Targets straddle the default tail thresholds.
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(10.0..14.0)).collect();
        let loss = point_losses(rng, &y);
        let mode = Mode::Training { seed: rng.random() };
        check_arch(rng, &arch, &x, mode, 6, |tape, out| {
            let Output::Point(p) = out else { unreachable!() };
            let pred = tape.value(p).data().to_vec();
            let (v, g) = loss.value_and_grad(&y, &pred).unwrap();
            tape.custom_scalar(v, vec![(p, Tensor::new(vec![n, 1], g).unwrap())]).unwrap()
        })
    })
}

pub fn multitask_suite() -> GradStats {
    suite(22, |rng| {
        let d = rng.random_range(2..6);
        let trunk = random_widths(rng, d, 1..4);
        let arch = Arch::MultiTask(MultiTaskArch { trunk, n_classes: 3, dropout: 0.5 });
        let n = rng.random_range(2..7);
        let x = rand_tensor(rng, &[n, d], 1.5);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut onehot = vec![0.0; n * 3];
        for i in 0..n {
            onehot[i * 3 + rng.random_range(0..3)] = 1.0;
        }
        let lambda = rng.random_range(0.1..2.0);
        let mode = Mode::Training { seed: rng.random() };
        check_arch(rng, &arch, &x, mode, 6, |tape, out| {
            let Output::MultiTask { probs, flux } = out else { unreachable!() };
            let (pv, fv) = (tape.value(probs).data().to_vec(), tape.value(flux).data().to_vec());
            let o = multitask_loss(&y, &fv, &onehot, &pv, 3, lambda).unwrap();
            tape.custom_scalar(
                o.value,
                vec![
                    (flux, Tensor::new(vec![n, 3], o.grad_flux).unwrap()),
                    (probs, Tensor::new(vec![n, 3], o.grad_prob).unwrap()),
                ],
            )
            .unwrap()
        })
    })
}

pub fn random_decoder(rng: &mut ChaCha8Rng, d: usize) -> ConvDecoderArch {
    let base = rng.random_range(1..3);
    let strides: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(1..4)).collect();
    let edge = strides.iter().product::<usize>() * base;
    let overlap = rng.random_range(0..edge.min(3));
    let mut trunk = random_widths(rng, d, 0..2);
    trunk.push(base * base);
    ConvDecoderArch {
        trunk,
        base,
        deconv: strides
            .iter()
            .map(|&s| DeconvLayer { channels: rng.random_range(1..3), kernel: rng.random_range(1..5), stride: s })
            .collect(),
        final_kernel: 2 * overlap + 1,
        overlap,
        dropout: 0.5,
        n_lat: edge,
        n_mlt: edge,
    }
}

pub fn random_targets(rng: &mut ChaCha8Rng, spec: GridSpec, n: usize, nan_elsewhere: bool) -> Vec<GridMap> {
    (0..n)
        .map(|_| {
            let mut m = GridMap::empty(spec);
            for i in 0..spec.len() {
                if rng.random_bool(0.3) {
                    m.mask[i] = true;
                    m.values[i] = rng.random_range(-1.0..1.0);
                } else if nan_elsewhere {
                    m.values[i] = f64::NAN;
                }
            }
            let i = rng.random_range(0..spec.len());
            if !m.mask[i] {
                m.mask[i] = true;
                m.values[i] = 0.5;
            }
            m
        })
        .collect()
}

pub fn decoder_suite() -> GradStats {
    suite(23, |rng| {
        let d = rng.random_range(2..5);
        let a = random_decoder(rng, d);
        let spec = GridSpec { n_lat: a.n_lat, n_mlt: a.n_mlt, ..GridSpec::default() };
        let arch = Arch::ConvDecoder(a);
        let n = rng.random_range(1..3);
        let x = rand_tensor(rng, &[n, d], 1.5);
        let targets = random_targets(rng, spec, n, false);
        let normalize = rng.random_bool(0.5);
        let mode = Mode::Training { seed: rng.random() };
        check_arch(rng, &arch, &x, mode, 5, |tape, out| {
            let Output::Grid(g) = out else { unreachable!() };
            let shape = tape.value(g).shape().to_vec();
            let pred = tape.value(g).data().to_vec();
            let refs: Vec<&GridMap> = targets.iter().collect();
            let o = sparse_masked_loss(&pred, &refs, normalize).unwrap();
            tape.custom_scalar(o.value, vec![(g, Tensor::new(shape, o.grad).unwrap())]).unwrap()
        })
    })
}

pub fn arch_suites() -> Vec<(&'static str, GradStats)> {
    vec![("baseline", baseline_suite()), ("multitask", multitask_suite()), ("conv decoder", decoder_suite())]
}
