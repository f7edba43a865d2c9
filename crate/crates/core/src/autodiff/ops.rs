use super::kernels::{self, ConvGeometry};
use super::{expect_rank, Op, Tape, Var, ACOS_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn rows_cols<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    expect_rank(op, t, 2)?;
    Ok((t.shape()[0], t.shape()[1]))
}

impl<T: Scalar> Tape<T> {
    /// 2-D convolution. `x` is `[n, c_in, h, w]`, `w` is `[c_out, c_in, kh, kw]`
    /// and the optional bias is `[c_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.value(x);
        let ws = self.value(w);
        expect_rank(OP, xs, 4)?;
        expect_rank(OP, ws, 4)?;
        let (n, cin, h, wd) = (xs.shape()[0], xs.shape()[1], xs.shape()[2], xs.shape()[3]);
        let (cout, wcin, kh, kw) = (ws.shape()[0], ws.shape()[1], ws.shape()[2], ws.shape()[3]);
        if cin != wcin {
            return Err(Error::shape(
                OP,
                format!("input has {cin} channels but weight expects {wcin}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    OP,
                    format!("bias shape {:?}, expected [{cout}]", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeometry::new(cin, h, wd, kh, kw, stride, padding).ok_or_else(|| {
            Error::shape(
                OP,
                format!("kernel {kh}x{kw} stride {stride} does not fit input {h}x{wd}"),
            )
        })?;
        let k = geom.patch_len();
        let npix = geom.out_pixels();
        let mut cols = vec![T::zero(); n * k * npix];
        let mut out = vec![T::zero(); n * cout * npix];
        let xd = xs.data();
        let wdata = ws.data();
        for i in 0..n {
            let col = &mut cols[i * k * npix..(i + 1) * k * npix];
            kernels::im2col(&geom, &xd[i * geom.in_len()..(i + 1) * geom.in_len()], col);
            let o = &mut out[i * cout * npix..(i + 1) * cout * npix];
            if let Some(b) = b {
                let bias = self.value(b).data();
                for (co, row) in o.chunks_mut(npix).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias[co]);
                }
            }
            let beta = if b.is_some() { T::one() } else { T::zero() };
            T::gemm(
                cout,
                k,
                npix,
                T::one(),
                wdata,
                (k as isize, 1),
                col,
                (npix as isize, 1),
                beta,
                o,
                (npix as isize, 1),
            );
        }
        let value = Tensor::new(vec![n, cout, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            value,
        ))
    }

    /// Fully connected layer: `x [n, in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let (n, din) = rows_cols(OP, self.value(x))?;
        let (dout, win) = rows_cols(OP, self.value(w))?;
        if din != win {
            return Err(Error::shape(
                OP,
                format!("input width {din} but weight expects {win}"),
            ));
        }
        let mut out = vec![T::zero(); n * dout];
        let mut beta = T::zero();
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(
                    OP,
                    format!("bias shape {:?}, expected [{dout}]", self.shape(b)),
                ));
            }
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
            beta = T::one();
        }
        T::gemm(
            n,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            (din as isize, 1),
            self.value(w).data(),
            (1, din as isize),
            beta,
            &mut out,
            (dout as isize, 1),
        );
        let value = Tensor::new(vec![n, dout], out)?;
        Ok(self.push(Op::Linear { x, w, b }, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p * q)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(x, factor), value)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(Op::AddScalar(x), value)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(Op::Square(x), value)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::exp);
        self.push(Op::Exp(x), value)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::ln);
        self.push(Op::Log(x), value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(Op::Relu(x), value)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::abs);
        self.push(Op::Abs(x), value)
    }

    /// Non-overlapping max pooling with a square window (trailing rows and
    /// columns that do not fill a window are dropped).
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let (n, c, oh, ow) = self.pool_dims("max_pool2d", x, size)?;
        let xs = self.value(x);
        let (h, w) = (xs.shape()[2], xs.shape()[3]);
        let xd = xs.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(Op::MaxPool2d { x, argmax: arg }, value))
    }

    /// Non-overlapping average pooling with a square window.
    pub fn avg_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let (n, c, oh, ow) = self.pool_dims("avg_pool2d", x, size)?;
        let xs = self.value(x);
        let (h, w) = (xs.shape()[2], xs.shape()[3]);
        let xd = xs.data();
        let inv = T::one() / T::of((size * size) as f64);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for dy in 0..size {
                        for dx in 0..size {
                            acc = acc + xd[base + (oy * size + dy) * w + ox * size + dx];
                        }
                    }
                    out.push(acc * inv);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(Op::AvgPool2d { x, size }, value))
    }

    fn pool_dims(
        &self,
        op: &'static str,
        x: Var,
        size: usize,
    ) -> Result<(usize, usize, usize, usize)> {
        let xs = self.value(x);
        expect_rank(op, xs, 4)?;
        let s = xs.shape();
        if size == 0 || s[2] < size || s[3] < size {
            return Err(Error::shape(
                op,
                format!("window {size} does not fit {}x{}", s[2], s[3]),
            ));
        }
        Ok((s[0], s[1], s[2] / size, s[3] / size))
    }

    /// Mean over the spatial axes: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        expect_rank("global_avg_pool", xs, 4)?;
        let s = xs.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = T::one() / T::of(hw as f64);
        let data = xs
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().fold(T::zero(), |a, b| a + b) * inv)
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.push(Op::GlobalAvgPool(x), value))
    }

    /// Training-mode batch normalization over `(n, h, w)` per channel.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        const OP: &str = "batch_norm";
        let xs = self.value(x);
        expect_rank(OP, xs, 4)?;
        let s = xs.shape().to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                OP,
                format!("affine parameters must be [{c}]"),
            ));
        }
        let count = T::of((n * hw) as f64);
        let xd = xs.data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); xd.len()];
        for ch in 0..c {
            let mut mean = T::zero();
            for i in 0..n {
                let o = (i * c + ch) * hw;
                mean = mean + xd[o..o + hw].iter().copied().fold(T::zero(), |a, b| a + b);
            }
            mean = mean / count;
            let mut var = T::zero();
            for i in 0..n {
                let o = (i * c + ch) * hw;
                for &v in &xd[o..o + hw] {
                    var = var + (v - mean) * (v - mean);
                }
            }
            var = var / count;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[ch] = istd;
            for i in 0..n {
                let o = (i * c + ch) * hw;
                for j in o..o + hw {
                    xhat[j] = (xd[j] - mean) * istd;
                    out[j] = g[ch] * xhat[j] + bt[ch];
                }
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            value,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(Op::Reshape(x), value))
    }

    /// Flattens everything after the leading batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = *s
            .first()
            .ok_or_else(|| Error::shape("flatten", "scalar has no batch axis"))?;
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Normalizes each row of `[n, d]` to unit Euclidean length.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (_, d) = rows_cols("l2_normalize", self.value(x))?;
        let floor = T::of(1e-12);
        let mut norms = Vec::new();
        let mut data = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks(d) {
            let norm = row
                .iter()
                .map(|&v| v * v)
                .fold(T::zero(), |a, b| a + b)
                .sqrt()
                .max(floor);
            norms.push(norm);
            data.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(Op::L2Normalize { x, norms }, value))
    }

    /// `a [n, d] * b [m, d]^T -> [n, m]`; for unit rows these are cosines.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "matmul_nt";
        let (n, d) = rows_cols(OP, self.value(a))?;
        let (m, db) = rows_cols(OP, self.value(b))?;
        if d != db {
            return Err(Error::shape(OP, format!("inner widths {d} vs {db}")));
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            d,
            m,
            T::one(),
            self.value(a).data(),
            (d as isize, 1),
            self.value(b).data(),
            (1, d as isize),
            T::zero(),
            &mut out,
            (m as isize, 1),
        );
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Op::MatMulNt(a, b), value))
    }

    /// Angle `acos(x)` of cosines, with `x` clamped to `[-1 + eps, 1 - eps]`.
    pub fn angle(&mut self, x: Var) -> Var {
        let lo = T::of(-1.0 + ACOS_EPS);
        let hi = T::of(1.0 - ACOS_EPS);
        let xs = self.value(x);
        let mut deriv = Vec::with_capacity(xs.len());
        let data = xs
            .data()
            .iter()
            .map(|&c| {
                let cc = c.max(lo).min(hi);
                deriv.push(if cc != c {
                    T::zero()
                } else {
                    -T::one() / (T::one() - cc * cc).sqrt()
                });
                cc.acos()
            })
            .collect();
        let value = Tensor::new(xs.shape().to_vec(), data).expect("same shape");
        self.push(Op::Angle { x, deriv }, value)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::cos);
        self.push(Op::Cos(x), value)
    }

    /// Row-wise softmax of `[n, m]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, m) = rows_cols("softmax", self.value(x))?;
        let mut out = vec![T::zero(); n * m];
        for (row, o) in self.value(x).data().chunks(m).zip(out.chunks_mut(m)) {
            kernels::softmax_row(row, o);
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Op::Softmax(x), value))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, m) = rows_cols("log_softmax", self.value(x))?;
        let mut out = vec![T::zero(); n * m];
        for (row, o) in self.value(x).data().chunks(m).zip(out.chunks_mut(m)) {
            kernels::log_softmax_row(row, o);
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Op::LogSoftmax(x), value))
    }

    /// Row maximum: `[n, m] -> [n]` (ties resolve to the first index).
    pub fn row_max(&mut self, x: Var) -> Result<Var> {
        let (n, m) = rows_cols("row_max", self.value(x))?;
        if m == 0 {
            return Err(Error::shape("row_max", "rows are empty"));
        }
        let mut argmax = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for row in self.value(x).data().chunks(m) {
            let j = kernels::argmax(row);
            argmax.push(j);
            out.push(row[j]);
        }
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(Op::RowMax { x, argmax }, value))
    }

    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let (n, m) = rows_cols("row_mean", self.value(x))?;
        if m == 0 {
            return Err(Error::shape("row_mean", "rows are empty"));
        }
        let inv = T::one() / T::of(m as f64);
        let out = self
            .value(x)
            .data()
            .chunks(m)
            .map(|r| r.iter().copied().fold(T::zero(), |a, b| a + b) * inv)
            .collect();
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(Op::RowMean(x), value))
    }

    /// Maximum over the channel axis: `[n, c, h, w] -> [n, 1, h, w]`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        expect_rank("channel_max", xs, 4)?;
        let s = xs.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if c == 0 {
            return Err(Error::shape("channel_max", "no channels"));
        }
        let xd = xs.data();
        let mut out = Vec::with_capacity(n * hw);
        let mut argmax = Vec::with_capacity(n * hw);
        for i in 0..n {
            for p in 0..hw {
                let mut best = i * c * hw + p;
                for ch in 1..c {
                    let idx = (i * c + ch) * hw + p;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(vec![n, 1, s[2], s[3]], out)?;
        Ok(self.push(Op::ChannelMax { x, argmax }, value))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let value = Tensor::scalar(xs.sum() / T::of(xs.len() as f64));
        self.push(Op::Mean(x), value)
    }

    /// Scaled angular-margin logits.
    ///
    /// For each entry `c = cos[i, j]` the logit is `scale * cos(theta + delta)`
    /// with `theta = acos(c)`, `delta = positive_margin` on the label column and
    /// `negative_margin` elsewhere, and `theta + delta` clamped to `[0, pi]`.
    /// A zero offset yields `scale * c` directly. Without labels every column
    /// is treated as negative.
    pub fn margin_logits(
        &mut self,
        cos: Var,
        labels: Option<&[usize]>,
        scale: T,
        positive_margin: T,
        negative_margin: T,
    ) -> Result<Var> {
        const OP: &str = "margin_logits";
        let (n, m) = rows_cols(OP, self.value(cos))?;
        if let Some(labels) = labels {
            if labels.len() != n {
                return Err(Error::shape(
                    OP,
                    format!("{} labels for {n} rows", labels.len()),
                ));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
                return Err(Error::invalid(
                    OP,
                    format!("label {bad} out of range for {m} classes"),
                ));
            }
        }
        let lo = T::of(-1.0 + ACOS_EPS);
        let hi = T::of(1.0 - ACOS_EPS);
        let pi = T::of(std::f64::consts::PI);
        let cd = self.value(cos).data();
        let mut out = Vec::with_capacity(n * m);
        let mut deriv = Vec::with_capacity(n * m);
        for i in 0..n {
            let label = labels.map(|l| l[i]);
            for j in 0..m {
                let c = cd[i * m + j];
                let offset = if Some(j) == label {
                    positive_margin
                } else {
                    negative_margin
                };
                if offset == T::zero() {
                    out.push(scale * c);
                    deriv.push(scale);
                    continue;
                }
                let cc = c.max(lo).min(hi);
                let theta = cc.acos();
                let raw = theta + offset;
                let phi = raw.max(T::zero()).min(pi);
                out.push(scale * phi.cos());
                deriv.push(if cc != c || phi != raw {
                    T::zero()
                } else {
                    scale * phi.sin() / theta.sin()
                });
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Op::MarginLogits { cos, deriv }, value))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let (n, m) = rows_cols(OP, self.value(logits))?;
        if labels.len() != n || n == 0 {
            return Err(Error::shape(
                OP,
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::invalid(
                OP,
                format!("label {bad} out of range for {m} classes"),
            ));
        }
        let mut logp = vec![T::zero(); m];
        let mut probs = Vec::with_capacity(n * m);
        let mut total = T::zero();
        for (row, &y) in self.value(logits).data().chunks(m).zip(labels) {
            kernels::log_softmax_row(row, &mut logp);
            total = total - logp[y];
            probs.extend(logp.iter().map(|&v| v.exp()));
        }
        let value = Tensor::scalar(total / T::of(n as f64));
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
        ))
    }

    /// Mean cross-entropy between the uniform distribution and `softmax(logits)`.
    pub fn uniform_cross_entropy(&mut self, logits: Var) -> Result<Var> {
        const OP: &str = "uniform_cross_entropy";
        let (n, m) = rows_cols(OP, self.value(logits))?;
        if n == 0 || m == 0 {
            return Err(Error::shape(OP, "empty logits"));
        }
        let inv_m = T::one() / T::of(m as f64);
        let mut logp = vec![T::zero(); m];
        let mut probs = Vec::with_capacity(n * m);
        let mut total = T::zero();
        for row in self.value(logits).data().chunks(m) {
            kernels::log_softmax_row(row, &mut logp);
            let row_sum = logp.iter().copied().fold(T::zero(), |a, b| a + b);
            total = total - row_sum * inv_m;
            probs.extend(logp.iter().map(|&v| v.exp()));
        }
        let value = Tensor::scalar(total / T::of(n as f64));
        Ok(self.push(Op::UniformCrossEntropy { logits, probs }, value))
    }
}
