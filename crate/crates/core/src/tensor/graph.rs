use super::kernels::{self, ConvGeom, PoolGeom};
use super::{Real, Result, Tensor, TensorError};
use crate::parallel;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max {
        window: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvg,
}

/// Per-channel statistics of one train-mode batchnorm call. `var` is the
/// unbiased estimate, ready for the running-average update.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) const BN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Add(Var, Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvg(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-use tape. Record a forward pass, call [`Graph::backward`] on the
/// scalar loss, then read gradients with [`Graph::grad`].
///
/// Gradients accumulate: calling `backward` twice adds both contributions.
/// Use [`Graph::zero_grad`] to reset.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`. Tracked values that the loss does not
    /// reach report zeros; untracked values report `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let data = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
        Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_ch] {
                return Err(TensorError::Shape {
                    op: "conv2d bias",
                    lhs: self.shape(w).to_vec(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.tracked(&inputs);
        let t = Tensor::new(geom.out_shape(), out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Per-channel batch normalization. In train mode the batch statistics are
    /// used and returned; in eval mode `running` (mean, var) is required.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        mode: NormMode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::Invalid {
                op: "batchnorm2d",
                msg: format!("expected NCHW input, got {shape:?}"),
            });
        }
        let (bsz, ch, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        for p in [gamma, beta] {
            if self.shape(p) != [ch] {
                return Err(TensorError::Shape {
                    op: "batchnorm2d",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::lit(BN_EPS);
        let xd = self.value(x).data();
        let n = bsz * plane;
        let (mean, var_biased, stats) = match mode {
            NormMode::Train => {
                if n < 2 {
                    return Err(TensorError::DegenerateBatch(n));
                }
                let moments: Vec<(T, T)> = parallel::map_range(ch, |c| {
                    let mut s = T::zero();
                    for b in 0..bsz {
                        s += xd[(b * ch + c) * plane..][..plane].iter().copied().sum::<T>();
                    }
                    let m = s / T::from_usize(n).unwrap();
                    let mut ss = T::zero();
                    for b in 0..bsz {
                        for &v in &xd[(b * ch + c) * plane..][..plane] {
                            ss += (v - m) * (v - m);
                        }
                    }
                    (m, ss / T::from_usize(n).unwrap())
                });
                let mean: Vec<T> = moments.iter().map(|m| m.0).collect();
                let var: Vec<T> = moments.iter().map(|m| m.1).collect();
                let unbiased = var
                    .iter()
                    .map(|&v| v * T::from_usize(n).unwrap() / T::from_usize(n - 1).unwrap())
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval => {
                let (rm, rv) = running.ok_or(TensorError::Invalid {
                    op: "batchnorm2d",
                    msg: "eval mode requires running statistics".into(),
                })?;
                if rm.len() != ch || rv.len() != ch {
                    return Err(TensorError::Shape {
                        op: "batchnorm2d running stats",
                        lhs: shape.clone(),
                        rhs: vec![rm.len(), rv.len()],
                    });
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..bsz {
            for c in 0..ch {
                let off = (b * ch + c) * plane;
                for i in off..off + plane {
                    let h = (xd[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + bt[c];
                }
            }
        }
        let rg = self.tracked(&[x, gamma, beta]);
        let t = Tensor::new(shape, out)?;
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: if rg { xhat } else { Vec::new() },
                inv_std,
                train: mode == NormMode::Train,
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.tracked(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rg = self.tracked(&[x]);
        match kind {
            PoolKind::Max {
                window,
                stride,
                padding,
            } => {
                let geom = PoolGeom::new(&shape, window, stride, padding)?;
                let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), &geom);
                let t = Tensor::new(vec![geom.batch, geom.ch, geom.oh, geom.ow], out)?;
                Ok(self.push(t, Op::MaxPool { x, argmax }, rg))
            }
            PoolKind::GlobalAvg => {
                if shape.len() != 4 {
                    return Err(TensorError::Invalid {
                        op: "pool2d",
                        msg: format!("expected NCHW input, got {shape:?}"),
                    });
                }
                let plane = shape[2] * shape[3];
                let scale = T::from_usize(plane).unwrap().recip();
                let data = self
                    .value(x)
                    .data()
                    .chunks(plane)
                    .map(|p| p.iter().copied().sum::<T>() * scale)
                    .collect();
                let t = Tensor::new(vec![shape[0], shape[1], 1, 1], data)?;
                Ok(self.push(t, Op::GlobalAvg(x), rg))
            }
        }
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Collapses everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let b = s[0];
        let rest = s[1..].iter().product::<usize>().max(1);
        self.reshape(x, vec![b, rest])
    }

    /// `x · wᵀ + b` for `x: [B,F]`, `w: [O,F]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(TensorError::Shape {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (batch, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(batch * fout);
        for _ in 0..batch {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            batch,
            fin,
            fout,
            T::one(),
            self.value(x).data(),
            (fin as isize, 1),
            self.value(w).data(),
            (1, fin as isize),
            T::one(),
            &mut out,
        );
        let t = Tensor::new(vec![batch, fout], out)?;
        let rg = self.tracked(&[x, w, b]);
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    /// Column-wise concatenation of two `[B, *]` matrices, `a` first.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(TensorError::Shape {
                op: "concat",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (batch, fa, fb) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * (fa + fb));
        for r in 0..batch {
            out.extend_from_slice(&da[r * fa..(r + 1) * fa]);
            out.extend_from_slice(&db[r * fb..(r + 1) * fb]);
        }
        let t = Tensor::new(vec![batch, fa + fb], out)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Concat { a, b }, rg))
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(TensorError::Shape {
                op: "mse_loss",
                lhs: self.shape(pred).to_vec(),
                rhs: self.shape(target).to_vec(),
            });
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let n = T::from_usize(p.len()).unwrap();
        let loss = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        if !loss.is_finite() {
            return Err(TensorError::NonFinite("mse_loss"));
        }
        let rg = self.tracked(&[pred, target]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `Σ wᵢ·xᵢ` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(TensorError::Shape {
                op: "weighted_sum",
                lhs: self.shape(x).to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights)
            .map(|(&a, &w)| a * w)
            .sum::<T>();
        let rg = self.tracked(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over all elements.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let w = vec![T::from_usize(n).unwrap().recip(); n];
        self.weighted_sum(x, &w)
    }

    /// Reverse-mode sweep from a scalar `loss`, accumulating into every tracked
    /// value's gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(dy) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &dy, &mut adj);
            match &mut self.grads[id] {
                Some(acc) => acc.iter_mut().zip(&dy).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(dy),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, dy: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let mut send = |v: Var, g: Vec<T>| accumulate(adj, v, g);
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let grads =
                    kernels::conv2d_backward(nodes[x.0].value.data(), nodes[w.0].value.data(), dy, geom, rg(*x));
                if let Some(dx) = grads.dx {
                    send(*x, dx);
                }
                if rg(*w) {
                    send(*w, grads.dw);
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    send(b, grads.db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = nodes[x.0].value.shape();
                let (bsz, ch, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let sums: Vec<(T, T)> = parallel::map_range(ch, |c| {
                    let mut s = T::zero();
                    let mut sx = T::zero();
                    for b in 0..bsz {
                        let off = (b * ch + c) * plane;
                        for i in off..off + plane {
                            s += dy[i];
                            sx += dy[i] * xhat[i];
                        }
                    }
                    (s, sx)
                });
                if rg(*x) {
                    let g = nodes[gamma.0].value.data();
                    let n = T::from_usize(bsz * plane).unwrap();
                    let mut dx = vec![T::zero(); dy.len()];
                    for b in 0..bsz {
                        for c in 0..ch {
                            let off = (b * ch + c) * plane;
                            let k = g[c] * inv_std[c];
                            if *train {
                                let (s, sx) = sums[c];
                                for i in off..off + plane {
                                    dx[i] = k * (dy[i] - s / n - xhat[i] * sx / n);
                                }
                            } else {
                                for i in off..off + plane {
                                    dx[i] = k * dy[i];
                                }
                            }
                        }
                    }
                    send(*x, dx);
                }
                if rg(*gamma) {
                    send(*gamma, sums.iter().map(|s| s.1).collect());
                }
                if rg(*beta) {
                    send(*beta, sums.iter().map(|s| s.0).collect());
                }
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                let dx = xv
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                send(*x, dx);
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    send(*a, dy.to_vec());
                }
                if rg(*b) {
                    send(*b, dy.to_vec());
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); nodes[x.0].value.len()];
                for (&k, &g) in argmax.iter().zip(dy) {
                    dx[k] += g;
                }
                send(*x, dx);
            }
            Op::GlobalAvg(x) => {
                let shape = nodes[x.0].value.shape();
                let plane = shape[2] * shape[3];
                let scale = T::from_usize(plane).unwrap().recip();
                let dx = dy.iter().flat_map(|&g| std::iter::repeat_n(g * scale, plane)).collect();
                send(*x, dx);
            }
            Op::Reshape(x) => send(*x, dy.to_vec()),
            Op::Linear { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let (batch, fin) = (xs[0], xs[1]);
                let fout = nodes[w.0].value.shape()[0];
                if rg(*x) {
                    let mut dx = vec![T::zero(); batch * fin];
                    T::gemm(
                        batch,
                        fout,
                        fin,
                        T::one(),
                        dy,
                        (fout as isize, 1),
                        nodes[w.0].value.data(),
                        (fin as isize, 1),
                        T::zero(),
                        &mut dx,
                    );
                    send(*x, dx);
                }
                if rg(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    T::gemm(
                        fout,
                        batch,
                        fin,
                        T::one(),
                        dy,
                        (1, fout as isize),
                        nodes[x.0].value.data(),
                        (fin as isize, 1),
                        T::zero(),
                        &mut dw,
                    );
                    send(*w, dw);
                }
                if rg(*b) {
                    let mut db = vec![T::zero(); fout];
                    for row in dy.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                    }
                    send(*b, db);
                }
            }
            Op::Concat { a, b } => {
                let fa = nodes[a.0].value.shape()[1];
                let fb = nodes[b.0].value.shape()[1];
                let mut da = Vec::with_capacity(dy.len());
                let mut db = Vec::with_capacity(dy.len());
                for row in dy.chunks(fa + fb) {
                    da.extend_from_slice(&row[..fa]);
                    db.extend_from_slice(&row[fa..]);
                }
                if rg(*a) {
                    send(*a, da);
                }
                if rg(*b) {
                    send(*b, db);
                }
            }
            Op::Mse { pred, target } => {
                let p = nodes[pred.0].value.data();
                let t = nodes[target.0].value.data();
                let k = T::lit(2.0) * dy[0] / T::from_usize(p.len()).unwrap();
                if rg(*pred) {
                    send(*pred, p.iter().zip(t).map(|(&a, &b)| k * (a - b)).collect());
                }
                if rg(*target) {
                    send(*target, p.iter().zip(t).map(|(&a, &b)| k * (b - a)).collect());
                }
            }
            Op::Sum(x) => send(*x, vec![dy[0]; nodes[x.0].value.len()]),
            Op::WeightedSum { x, weights } => send(*x, weights.iter().map(|&w| w * dy[0]).collect()),
        }
    }
}

fn accumulate<T: Real>(adj: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..9).map(|i| i as f64 - 4.0).collect();
        let x = g.constant(t(&[1, 1, 3, 3], &data));
        let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn zero_weight_conv_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2, 4, 4], &[3.5; 32]));
        let w = g.constant(Tensor::zeros(vec![3, 2, 3, 3]));
        let b = g.constant(Tensor::zeros(vec![3]));
        let y = g.conv2d(x, w, Some(b), 1, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let x = g.constant(t(&[2], &[-1.0, -3.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 3, 3], &[7.0; 9]));
        let y = g.pool2d(x, PoolKind::GlobalAvg).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[7.0]);

        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let max = PoolKind::Max {
            window: 2,
            stride: 2,
            padding: 0,
        };
        let y = g.pool2d(x, max).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let too_big = PoolKind::Max {
            window: 3,
            stride: 1,
            padding: 0,
        };
        assert!(matches!(g.pool2d(x, too_big), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn global_avg_backward_spreads_evenly() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let y = g.pool2d(x, PoolKind::GlobalAvg).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let eye = g.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let zb = g.constant(Tensor::zeros(vec![3]));
        let y = g.linear(x, eye, zb).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let zw = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(t(&[2], &[0.5, -1.5]));
        let y = g.linear(x, zw, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.5, 0.5, -1.5]);

        let bad = g.constant(Tensor::zeros(vec![2, 4]));
        assert!(g.linear(x, bad, b).is_err());
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.param(t(&[2, 1], &[1.0, 2.0]));
        let y = g.constant(t(&[2, 1], &[1.0, 4.0]));
        let l = g.mse_loss(p, y).unwrap();
        assert_eq!(g.value(l).data(), &[2.0]);
        g.backward(l).unwrap();
        // 2(ŷ - y)/B
        assert_eq!(g.grad(p).unwrap().data(), &[0.0, -2.0]);
        let same = g.mse_loss(y, y).unwrap();
        assert_eq!(g.value(same).data(), &[0.0]);
    }

    #[test]
    fn backward_semantics() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 5.0]));
        let unused = g.param(t(&[2], &[1.0, 1.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0]);
        // documented accumulation on a second call
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
        g.zero_grad();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 * 1.7).sin() * 3.0 + 2.0).collect();
        let x = g.constant(t(&[2, 3, 2, 2], &data));
        let gamma = g.constant(Tensor::full(vec![3], 1.0));
        let beta = g.constant(Tensor::zeros(vec![3]));
        let (y, stats) = g.batchnorm2d(x, gamma, beta, None, NormMode::Train).unwrap();
        assert!(stats.is_some());
        let y = g.value(y).data();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| y[(b * 3 + c) * 4..(b * 3 + c) * 4 + 4].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 8.0;
            let v = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_eval_with_unit_stats_is_identity() {
        let mut g = Graph::<f64>::new();
        let data = [0.5, -1.0, 2.0, 3.0];
        let x = g.constant(t(&[1, 1, 2, 2], &data));
        let gamma = g.constant(Tensor::full(vec![1], 1.0));
        let beta = g.constant(Tensor::zeros(vec![1]));
        let (y, stats) = g
            .batchnorm2d(x, gamma, beta, Some((&[0.0], &[1.0])), NormMode::Eval)
            .unwrap();
        assert!(stats.is_none());
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in g.value(y).data().iter().zip(data) {
            assert!((a - b * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_rejects_degenerate_batch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let gamma = g.constant(Tensor::full(vec![1], 1.0));
        let beta = g.constant(Tensor::zeros(vec![1]));
        let err = g.batchnorm2d(x, gamma, beta, None, NormMode::Train).unwrap_err();
        assert_eq!(err, TensorError::DegenerateBatch(1));
    }
}
