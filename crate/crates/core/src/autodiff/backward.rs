use std::collections::BTreeMap;

use super::kernels;
use super::{GradientBundle, Op, Tape, Targets, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub(super) fn run<T: Scalar>(
    tape: &Tape<T>,
    objective: Var,
    targets: Targets,
) -> Result<GradientBundle<T>> {
    if objective.0 >= tape.nodes.len() {
        return Err(Error::invalid("backward", "objective is not on this tape"));
    }
    if tape.value(objective).len() != 1 {
        return Err(Error::shape(
            "backward",
            format!(
                "objective must be a scalar, found shape {:?}",
                tape.shape(objective)
            ),
        ));
    }

    // needs[i]: node i lies on a path to a requested leaf.
    let mut needs = vec![false; objective.0 + 1];
    for (i, node) in tape.nodes[..=objective.0].iter().enumerate() {
        needs[i] = match node.op {
            Op::Input => targets.input,
            Op::Param(_) => targets.params,
            Op::Constant => false,
            ref op => op.inputs().iter().any(|v| needs[v.0]),
        };
    }

    let mut grads: Vec<Option<Tensor<T>>> = vec![None; objective.0 + 1];
    grads[objective.0] = Some(Tensor::full(tape.shape(objective).to_vec(), T::one()));

    let mut bundle = GradientBundle {
        params: BTreeMap::new(),
        inputs: BTreeMap::new(),
    };

    for idx in (0..=objective.0).rev() {
        if !needs[idx] {
            continue;
        }
        let Some(grad) = grads[idx].take() else {
            continue;
        };
        let node = &tape.nodes[idx];
        match &node.op {
            Op::Input => {
                bundle.inputs.insert(Var(idx), grad);
            }
            Op::Param(id) => match bundle.params.get_mut(id) {
                Some(acc) => add_into(acc.data_mut(), grad.data()),
                None => {
                    bundle.params.insert(*id, grad);
                }
            },
            Op::Constant => {}
            op => {
                let mut ctx = Ctx {
                    tape,
                    needs: &needs,
                    grads: &mut grads,
                };
                ctx.propagate(op, &node.value, &grad)?;
            }
        }
    }
    Ok(bundle)
}

fn add_into<T: Scalar>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

struct Ctx<'a, T> {
    tape: &'a Tape<T>,
    needs: &'a [bool],
    grads: &'a mut [Option<Tensor<T>>],
}

impl<T: Scalar> Ctx<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    fn accumulate(&mut self, v: Var, data: Vec<T>) {
        match &mut self.grads[v.0] {
            Some(acc) => add_into(acc.data_mut(), &data),
            slot @ None => {
                let shape = self.tape.shape(v).to_vec();
                *slot = Some(Tensor::new(shape, data).expect("gradient matches value shape"));
            }
        }
    }

    fn elementwise(&mut self, x: Var, grad: &Tensor<T>, f: impl Fn(usize, T) -> T) {
        let g = grad.data();
        self.fill(x, g.len(), |i| f(i, g[i]));
    }

    /// Accumulates `f(i)` for every element of `x`'s gradient.
    fn fill(&mut self, x: Var, len: usize, f: impl Fn(usize) -> T) {
        if self.wants(x) {
            let data = (0..len).map(f).collect();
            self.accumulate(x, data);
        }
    }

    fn propagate(&mut self, op: &Op<T>, out: &Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        let g = grad.data();
        let tape = self.tape;
        match op {
            Op::Input | Op::Param(_) | Op::Constant => unreachable!("leaves handled by caller"),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let n = self.val(*x).shape()[0];
                let cout = self.val(*w).shape()[0];
                let k = geom.patch_len();
                let npix = geom.out_pixels();
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); cout];
                        for i in 0..n {
                            for (co, acc) in db.iter_mut().enumerate() {
                                let o = (i * cout + co) * npix;
                                *acc = *acc
                                    + g[o..o + npix].iter().copied().fold(T::zero(), |a, b| a + b);
                            }
                        }
                        self.accumulate(*b, db);
                    }
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); cout * k];
                    for i in 0..n {
                        T::gemm(
                            cout,
                            npix,
                            k,
                            T::one(),
                            &g[i * cout * npix..(i + 1) * cout * npix],
                            (npix as isize, 1),
                            &cols[i * k * npix..(i + 1) * k * npix],
                            (1, npix as isize),
                            T::one(),
                            &mut dw,
                            (k as isize, 1),
                        );
                    }
                    self.accumulate(*w, dw);
                }
                if self.wants(*x) {
                    let wd = tape.value(*w).data();
                    let mut dx = vec![T::zero(); n * geom.in_len()];
                    let mut dcols = vec![T::zero(); k * npix];
                    for i in 0..n {
                        T::gemm(
                            k,
                            cout,
                            npix,
                            T::one(),
                            wd,
                            (1, k as isize),
                            &g[i * cout * npix..(i + 1) * cout * npix],
                            (npix as isize, 1),
                            T::zero(),
                            &mut dcols,
                            (npix as isize, 1),
                        );
                        kernels::col2im(
                            geom,
                            &dcols,
                            &mut dx[i * geom.in_len()..(i + 1) * geom.in_len()],
                        );
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.val(*x).shape()[0], self.val(*x).shape()[1]);
                let dout = self.val(*w).shape()[0];
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); dout];
                        for row in g.chunks(dout) {
                            add_into(&mut db, row);
                        }
                        self.accumulate(*b, db);
                    }
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    T::gemm(
                        dout,
                        n,
                        din,
                        T::one(),
                        g,
                        (1, dout as isize),
                        self.val(*x).data(),
                        (din as isize, 1),
                        T::zero(),
                        &mut dw,
                        (din as isize, 1),
                    );
                    self.accumulate(*w, dw);
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    T::gemm(
                        n,
                        dout,
                        din,
                        T::one(),
                        g,
                        (dout as isize, 1),
                        self.val(*w).data(),
                        (din as isize, 1),
                        T::zero(),
                        &mut dx,
                        (din as isize, 1),
                    );
                    self.accumulate(*x, dx);
                }
            }
            Op::Add(a, b) => {
                self.elementwise(*a, grad, |_, g| g);
                self.elementwise(*b, grad, |_, g| g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (tape.value(*a).data(), tape.value(*b).data());
                self.elementwise(*a, grad, |i, g| g * bv[i]);
                self.elementwise(*b, grad, |i, g| g * av[i]);
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.elementwise(*x, grad, |_, g| g * c);
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.elementwise(*x, grad, |_, g| g),
            Op::Square(x) => {
                let xv = tape.value(*x).data();
                self.elementwise(*x, grad, |i, g| g * T::of(2.0) * xv[i]);
            }
            Op::Exp(x) => self.elementwise(*x, grad, |i, g| g * out.data()[i]),
            Op::Log(x) => {
                let xv = tape.value(*x).data();
                self.elementwise(*x, grad, |i, g| g / xv[i]);
            }
            Op::Relu(x) => {
                self.elementwise(*x, grad, |i, g| {
                    if out.data()[i] > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Abs(x) => {
                let xv = tape.value(*x).data();
                self.elementwise(*x, grad, |i, g| {
                    let v = xv[i];
                    if v > T::zero() {
                        g
                    } else if v < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                });
            }
            Op::MaxPool2d { x, argmax } | Op::ChannelMax { x, argmax } => {
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); self.val(*x).len()];
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src] = dx[src] + gv;
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::AvgPool2d { x, size } => {
                if self.wants(*x) {
                    let s = self.val(*x).shape().to_vec();
                    let (h, w) = (s[2], s[3]);
                    let (oh, ow) = (h / size, w / size);
                    let inv = T::one() / T::of((size * size) as f64);
                    let mut dx = vec![T::zero(); self.val(*x).len()];
                    for plane in 0..s[0] * s[1] {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(plane * oh + oy) * ow + ox] * inv;
                                for dy in 0..*size {
                                    for dxx in 0..*size {
                                        let idx =
                                            plane * h * w + (oy * size + dy) * w + ox * size + dxx;
                                        dx[idx] = dx[idx] + gv;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = tape.value(*x).shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::of(hw as f64);
                self.fill(*x, tape.value(*x).len(), |i| g[i / hw] * inv);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.val(*x).shape().to_vec();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let m = T::of((n * hw) as f64);
                let gm = tape.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut sum_dxhat = vec![T::zero(); c];
                let mut sum_dxhat_xhat = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let o = (i * c + ch) * hw;
                        for j in o..o + hw {
                            dgamma[ch] = dgamma[ch] + g[j] * xhat[j];
                            dbeta[ch] = dbeta[ch] + g[j];
                            let dxh = g[j] * gm[ch];
                            sum_dxhat[ch] = sum_dxhat[ch] + dxh;
                            sum_dxhat_xhat[ch] = sum_dxhat_xhat[ch] + dxh * xhat[j];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let o = (i * c + ch) * hw;
                            for j in o..o + hw {
                                let dxh = g[j] * gm[ch];
                                dx[j] = inv_std[ch] / m
                                    * (m * dxh - sum_dxhat[ch] - xhat[j] * sum_dxhat_xhat[ch]);
                            }
                        }
                    }
                    self.accumulate(*x, dx);
                }
                if self.wants(*gamma) {
                    self.accumulate(*gamma, dgamma);
                }
                if self.wants(*beta) {
                    self.accumulate(*beta, dbeta);
                }
            }
            Op::L2Normalize { x, norms } => {
                if self.wants(*x) {
                    let d = out.shape()[1];
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gy, y), &norm) in g.chunks(d).zip(out.data().chunks(d)).zip(norms) {
                        let dot = gy
                            .iter()
                            .zip(y)
                            .map(|(&a, &b)| a * b)
                            .fold(T::zero(), |a, b| a + b);
                        dx.extend(gy.iter().zip(y).map(|(&gi, &yi)| (gi - yi * dot) / norm));
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::MatMulNt(a, b) => {
                let (n, d) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                let m = self.val(*b).shape()[0];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); n * d];
                    T::gemm(
                        n,
                        m,
                        d,
                        T::one(),
                        g,
                        (m as isize, 1),
                        self.val(*b).data(),
                        (d as isize, 1),
                        T::zero(),
                        &mut da,
                        (d as isize, 1),
                    );
                    self.accumulate(*a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); m * d];
                    T::gemm(
                        m,
                        n,
                        d,
                        T::one(),
                        g,
                        (1, m as isize),
                        self.val(*a).data(),
                        (d as isize, 1),
                        T::zero(),
                        &mut db,
                        (d as isize, 1),
                    );
                    self.accumulate(*b, db);
                }
            }
            Op::Angle { x, deriv } | Op::MarginLogits { cos: x, deriv } => {
                self.elementwise(*x, grad, |i, g| g * deriv[i]);
            }
            Op::Cos(x) => {
                let xv = tape.value(*x).data();
                self.elementwise(*x, grad, |i, g| -g * xv[i].sin());
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let m = out.shape()[1];
                    let mut dx = Vec::with_capacity(g.len());
                    for (gy, y) in g.chunks(m).zip(out.data().chunks(m)) {
                        let dot = gy
                            .iter()
                            .zip(y)
                            .map(|(&a, &b)| a * b)
                            .fold(T::zero(), |a, b| a + b);
                        dx.extend(gy.iter().zip(y).map(|(&gi, &yi)| yi * (gi - dot)));
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::LogSoftmax(x) => {
                if self.wants(*x) {
                    let m = out.shape()[1];
                    let mut dx = Vec::with_capacity(g.len());
                    for (gy, y) in g.chunks(m).zip(out.data().chunks(m)) {
                        let total = gy.iter().copied().fold(T::zero(), |a, b| a + b);
                        dx.extend(gy.iter().zip(y).map(|(&gi, &yi)| gi - yi.exp() * total));
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::RowMax { x, argmax } => {
                if self.wants(*x) {
                    let m = self.val(*x).shape()[1];
                    let mut dx = vec![T::zero(); self.val(*x).len()];
                    for (i, (&j, &gv)) in argmax.iter().zip(g).enumerate() {
                        dx[i * m + j] = gv;
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::RowMean(x) => {
                let m = tape.value(*x).shape()[1];
                let inv = T::one() / T::of(m as f64);
                self.fill(*x, tape.value(*x).len(), |i| g[i / m] * inv);
            }
            Op::Sum(x) => {
                self.fill(*x, tape.value(*x).len(), |_| g[0]);
            }
            Op::Mean(x) => {
                let len = tape.value(*x).len();
                let inv = T::one() / T::of(len as f64);
                self.fill(*x, len, |_| g[0] * inv);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.wants(*logits) {
                    let n = labels.len();
                    let m = probs.len() / n;
                    let scale = g[0] / T::of(n as f64);
                    let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        dx[i * m + y] = dx[i * m + y] - scale;
                    }
                    self.accumulate(*logits, dx);
                }
            }
            Op::UniformCrossEntropy { logits, probs } => {
                if self.wants(*logits) {
                    let s = self.val(*logits).shape();
                    let (n, m) = (s[0], s[1]);
                    let scale = g[0] / T::of(n as f64);
                    let inv_m = T::one() / T::of(m as f64);
                    let dx = probs.iter().map(|&p| (p - inv_m) * scale).collect();
                    self.accumulate(*logits, dx);
                }
            }
        }
        Ok(())
    }
}
