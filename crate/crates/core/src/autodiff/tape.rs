use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{pad_periodic, pad_periodic_backward, ConvGeom, TransposeGeom};
use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Dense { x: usize, w: usize, b: usize },
    Relu { x: usize },
    Dropout { x: usize, mask: Vec<f64> },
    Softmax { x: usize },
    ConvTranspose { x: usize, k: usize, b: Option<usize>, geom: TransposeGeom },
    PadPeriodic { x: usize, rows: usize, w: usize, overlap: usize },
    Conv2d { x: usize, k: usize, b: Option<usize>, geom: ConvGeom },
    Reshape { x: usize },
    Sum { x: usize },
    Scale { x: usize, alpha: f64 },
    Add { a: usize, b: usize },
    /// Scalar whose local gradient w.r.t. each input was computed by the caller.
    Custom { inputs: Vec<(usize, Tensor)> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order; `backward` replays them in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn mismatch(msg: String) -> AutodiffError {
    AutodiffError::ShapeMismatch(msg)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `y = x W + b` for `x: [n, d_in]`, `W: [d_in, d_out]`, `b: [d_out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        let (n, din, dout) = match (xs, ws, bs) {
            ([n, d1], [d2, d3], [d4]) if d1 == d2 && d3 == d4 => (*n, *d1, *d3),
            _ => return Err(mismatch(format!("dense: x {xs:?}, W {ws:?}, b {bs:?}"))),
        };
        let mut y = Vec::with_capacity(n * dout);
        for _ in 0..n {
            y.extend_from_slice(self.value(b).data());
        }
        gemm(n, din, dout, self.value(x).data(), (din, 1), self.value(w).data(), (dout, 1), &mut y, 1.0);
        let rg = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(Tensor::new(vec![n, dout], y)?, Op::Dense { x: x.0, w: w.0, b: b.0 }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let y = v.data().iter().map(|&a| a.max(0.0)).collect();
        let t = Tensor::new(v.shape().to_vec(), y).expect("same shape");
        let rg = self.rg(&[x.0]);
        self.push(t, Op::Relu { x: x.0 }, rg)
    }

    /// Inverted dropout with a mask drawn from `seed`; identity when not training.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, seed: u64) -> Result<Var, AutodiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidRate(rate));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let v = self.value(x);
        let mask: Vec<f64> =
            (0..v.len()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let y = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(v.shape().to_vec(), y)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(t, Op::Dropout { x: x.0, mask }, rg))
    }

    /// Row-wise softmax of `[n, k]` logits.
    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        let &[n, k] = v.shape() else {
            return Err(mismatch(format!("softmax expects [n, k], got {:?}", v.shape())));
        };
        if k < 2 {
            return Err(mismatch("softmax needs k >= 2".into()));
        }
        let mut y = Vec::with_capacity(n * k);
        for row in v.data().chunks(k) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&a| (a - m).exp()).collect();
            let s: f64 = e.iter().sum();
            y.extend(e.into_iter().map(|a| a / s));
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(vec![n, k], y)?, Op::Softmax { x: x.0 }, rg))
    }

    /// Fractionally strided convolution with "same" sizing:
    /// `x: [n, c_in, h, w]`, `k: [c_in, c_out, kh, kw]` gives `[n, c_out, h*s, w*s]`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var, AutodiffError> {
        let (xv, kv) = (self.value(x), self.value(k));
        let (Some([n, ci, h, w]), Some([kci, co, kh, kw])) = (xv.dims4(), kv.dims4()) else {
            return Err(mismatch(format!("conv2d_transpose: x {:?}, K {:?}", xv.shape(), kv.shape())));
        };
        if ci != kci || stride == 0 {
            return Err(mismatch(format!(
                "conv2d_transpose: x {:?}, K {:?}, stride {stride}",
                xv.shape(),
                kv.shape()
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [co] {
                return Err(mismatch(format!("conv2d_transpose bias {:?}, expected [{co}]", self.value(b).shape())));
            }
        }
        let geom = TransposeGeom { n, ci, h, w, co, kh, kw, stride };
        let y = geom.forward(xv.data(), kv.data(), bias.map(|b| self.value(b).data()));
        let t = Tensor::new(vec![n, co, geom.out_h(), geom.out_w()], y)?;
        let mut ids = vec![x.0, k.0];
        ids.extend(bias.map(|b| b.0));
        let rg = self.rg(&ids);
        Ok(self.push(t, Op::ConvTranspose { x: x.0, k: k.0, b: bias.map(|b| b.0), geom }, rg))
    }

    /// Wraps the width (MLT) axis: `overlap` columns from the far side are copied to each edge.
    pub fn pad_periodic_mlt(&mut self, x: Var, overlap: usize) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        let Some([n, c, h, w]) = v.dims4() else {
            return Err(mismatch(format!("pad_periodic_mlt expects 4-D input, got {:?}", v.shape())));
        };
        if overlap >= w {
            return Err(AutodiffError::InvalidArgument(format!("overlap {overlap} must be < width {w}")));
        }
        if overlap == 0 {
            return Ok(x);
        }
        let rows = n * c * h;
        let y = pad_periodic(v.data(), rows, w, overlap);
        let t = Tensor::new(vec![n, c, h, w + 2 * overlap], y)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(t, Op::PadPeriodic { x: x.0, rows, w, overlap }, rg))
    }

    /// Cross-correlation with `k: [c_out, c_in, kh, kw]`, zero padding of `pad_lat`
    /// rows on the height axis and no padding on the width axis.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, pad_lat: usize) -> Result<Var, AutodiffError> {
        let (xv, kv) = (self.value(x), self.value(k));
        let (Some([n, ci, h, w]), Some([co, kci, kh, kw])) = (xv.dims4(), kv.dims4()) else {
            return Err(mismatch(format!("conv2d: x {:?}, K {:?}", xv.shape(), kv.shape())));
        };
        if ci != kci {
            return Err(mismatch(format!("conv2d: x {:?}, K {:?}", xv.shape(), kv.shape())));
        }
        if kh > h + 2 * pad_lat || kw > w {
            return Err(AutodiffError::InvalidArgument(format!(
                "kernel {kh}x{kw} larger than padded input {}x{w}",
                h + 2 * pad_lat
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [co] {
                return Err(mismatch(format!("conv2d bias {:?}, expected [{co}]", self.value(b).shape())));
            }
        }
        let geom = ConvGeom { n, ci, h, w, co, kh, kw, pad_h: pad_lat };
        let y = geom.forward(xv.data(), kv.data(), bias.map(|b| self.value(b).data()));
        let t = Tensor::new(vec![n, co, geom.out_h(), geom.out_w()], y)?;
        let mut ids = vec![x.0, k.0];
        ids.extend(bias.map(|b| b.0));
        let rg = self.rg(&ids);
        Ok(self.push(t, Op::Conv2d { x: x.0, k: k.0, b: bias.map(|b| b.0), geom }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(x).reshaped(shape)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(t, Op::Reshape { x: x.0 }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, rg)
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * alpha).collect())
            .expect("same shape");
        let rg = self.rg(&[x.0]);
        self.push(t, Op::Scale { x: x.0, alpha }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(format!("add: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let y = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(t, Op::Add { a: a.0, b: b.0 }, rg))
    }

    /// Records a scalar `value` with caller-supplied local gradients `d value / d input`.
    pub fn custom_scalar(&mut self, value: f64, inputs: Vec<(Var, Tensor)>) -> Result<Var, AutodiffError> {
        for (v, g) in &inputs {
            if self.value(*v).shape() != g.shape() {
                return Err(mismatch(format!(
                    "local gradient {:?} for input {:?}",
                    g.shape(),
                    self.value(*v).shape()
                )));
            }
        }
        let ids: Vec<usize> = inputs.iter().map(|(v, _)| v.0).collect();
        let rg = self.rg(&ids);
        let inputs = inputs.into_iter().map(|(v, g)| (v.0, g)).collect();
        Ok(self.push(Tensor::scalar(value), Op::Custom { inputs }, rg))
    }

    /// Reverse pass from a scalar loss. A tape supports exactly one pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let seed = Tensor::new(lv.shape().to_vec(), vec![1.0])?;
        if !self.nodes[loss.0].requires_grad {
            return Err(AutodiffError::Detached);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // only keep gradients of differentiable leaves and intermediates that need them
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let shape_of = |id: usize| self.nodes[id].value.shape().to_vec();
        let tensor = |id: usize, data: Vec<f64>| Tensor::new(shape_of(id), data).expect("gradient shape");
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = shape_of(x);
                let (n, din) = (xs[0], xs[1]);
                let dout = shape_of(b)[0];
                let dy = g.data();
                if self.nodes[w].requires_grad {
                    let mut dw = vec![0.0; din * dout];
                    // dW = x^T dy
                    gemm(din, n, dout, self.nodes[x].value.data(), (1, din), dy, (dout, 1), &mut dw, 0.0);
                    self.accumulate(grads, w, tensor(w, dw));
                }
                if self.nodes[b].requires_grad {
                    let mut db = vec![0.0; dout];
                    for row in dy.chunks(dout) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, b, tensor(b, db));
                }
                if self.nodes[x].requires_grad {
                    let mut dx = vec![0.0; n * din];
                    // dx = dy W^T
                    gemm(n, dout, din, dy, (dout, 1), self.nodes[w].value.data(), (1, dout), &mut dx, 0.0);
                    self.accumulate(grads, x, tensor(x, dx));
                }
            }
            Op::Relu { x } => {
                let xv = self.nodes[*x].value.data();
                let d = g.data().iter().zip(xv).map(|(g, &a)| if a > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *x, tensor(*x, d));
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *x, tensor(*x, d));
            }
            Op::Softmax { x } => {
                let y = &self.nodes[i].value;
                let k = y.shape()[1];
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(k).zip(g.data().chunks(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(a, b)| a * (b - dot)));
                }
                self.accumulate(grads, *x, tensor(*x, d));
            }
            Op::ConvTranspose { x, k, b, geom } => {
                let (dx, dk, db) = geom.backward(self.nodes[*x].value.data(), self.nodes[*k].value.data(), g.data());
                self.accumulate(grads, *x, tensor(*x, dx));
                self.accumulate(grads, *k, tensor(*k, dk));
                if let Some(b) = b {
                    self.accumulate(grads, *b, tensor(*b, db));
                }
            }
            Op::PadPeriodic { x, rows, w, overlap } => {
                let dx = pad_periodic_backward(g.data(), *rows, *w, *overlap);
                self.accumulate(grads, *x, tensor(*x, dx));
            }
            Op::Conv2d { x, k, b, geom } => {
                let (dx, dk, db) = geom.backward(self.nodes[*x].value.data(), self.nodes[*k].value.data(), g.data());
                self.accumulate(grads, *x, tensor(*x, dx));
                self.accumulate(grads, *k, tensor(*k, dk));
                if let Some(b) = b {
                    self.accumulate(grads, *b, tensor(*b, db));
                }
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, tensor(*x, g.data().to_vec()));
            }
            Op::Sum { x } => {
                let n = self.nodes[*x].value.len();
                self.accumulate(grads, *x, tensor(*x, vec![g.item(); n]));
            }
            Op::Scale { x, alpha } => {
                self.accumulate(grads, *x, tensor(*x, g.data().iter().map(|v| v * alpha).collect()));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Custom { inputs } => {
                let s = g.item();
                for (id, local) in inputs {
                    self.accumulate(grads, *id, tensor(*id, local.data().iter().map(|v| v * s).collect()));
                }
            }
        }
    }
}

/// `c = a * b + beta * c` for an `m x k` by `k x n` product with explicit
/// (row, column) strides on the operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index dgemm touches given the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
