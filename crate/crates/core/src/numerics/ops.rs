//! Differentiable operations recorded on a [`Tape`].

use super::kernels::{self, ConvGeom, PoolGeom};
use super::tape::{BackwardCtx, Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Batch-normalization statistics source.
#[derive(Clone, Debug)]
pub enum BnMode<T: Real> {
    /// Normalize with batch statistics; the op reports them for the running update.
    Train,
    /// Normalize with the given running mean and variance.
    Eval { mean: Vec<T>, var: Vec<T> },
}

/// Batch statistics observed by a training-mode batchnorm: mean and unbiased variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T: Real> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;

fn same_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn tensor<T: Real>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape.to_vec(), data).expect("kernel produced inconsistent shape")
}

impl<T: Real> Tape<T> {
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &g);
        self.push(
            "conv2d",
            tensor(&g.out_shape(), out),
            &[x, w],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let (dx, dw) = kernels::conv2d_backward(
                    ctx.inputs[0].data(),
                    ctx.inputs[1].data(),
                    ctx.grad.data(),
                    &g,
                    ctx.needs[0],
                    ctx.needs[1],
                );
                vec![
                    dx.map(|d| tensor(ctx.inputs[0].shape(), d)),
                    dw.map(|d| tensor(ctx.inputs[1].shape(), d)),
                ]
            }),
        )
    }

    /// `x[N, in] · w[out, in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, din] = self.value(x).dims2("linear")?;
        let [dout, win] = self.value(w).dims2("linear")?;
        if din != win {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", self.value(x).shape(), self.value(w).shape()),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return Err(Error::shape("linear", format!("bias {:?} vs {} outputs", self.value(b).shape(), dout)));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * dout];
        for i in 0..n {
            let row = &xv[i * din..(i + 1) * din];
            for o in 0..dout {
                out[i * dout + o] = kernels::dot(row, &wv[o * din..(o + 1) * din]);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for i in 0..n {
                for o in 0..dout {
                    out[i * dout + o] += bv[o];
                }
            }
        }
        let parents: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        self.push(
            "linear",
            tensor(&[n, dout], out),
            &parents,
            Box::new(move |ctx| {
                let (xv, wv, gv) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let dx = ctx.needs[0].then(|| {
                    let mut dx = vec![T::zero(); n * din];
                    for i in 0..n {
                        for o in 0..dout {
                            let g = gv[i * dout + o];
                            for (d, &w) in dx[i * din..(i + 1) * din].iter_mut().zip(&wv[o * din..(o + 1) * din]) {
                                *d += g * w;
                            }
                        }
                    }
                    tensor(&[n, din], dx)
                });
                let dw = ctx.needs[1].then(|| {
                    let mut dw = vec![T::zero(); dout * din];
                    for i in 0..n {
                        for o in 0..dout {
                            let g = gv[i * dout + o];
                            for (d, &xv) in dw[o * din..(o + 1) * din].iter_mut().zip(&xv[i * din..(i + 1) * din]) {
                                *d += g * xv;
                            }
                        }
                    }
                    tensor(&[dout, din], dw)
                });
                let mut out = vec![dx, dw];
                if ctx.inputs.len() == 3 {
                    out.push(ctx.needs[2].then(|| {
                        let mut db = vec![T::zero(); dout];
                        for i in 0..n {
                            for o in 0..dout {
                                db[o] += gv[i * dout + o];
                            }
                        }
                        tensor(&[dout], db)
                    }));
                }
                out
            }),
        )
    }

    fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        // derivative expressed through input and output values
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push(
            op,
            out,
            &[x],
            Box::new(move |ctx| {
                let d = ctx
                    .inputs[0]
                    .data()
                    .iter()
                    .zip(ctx.output.data())
                    .zip(ctx.grad.data())
                    .map(|((&xi, &yi), &gi)| gi * df(xi, yi))
                    .collect();
                vec![Some(tensor(ctx.inputs[0].shape(), d))]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(T::zero()), |xi, _| if xi > T::zero() { T::one() } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    /// `scale·x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        self.unary("affine", x, move |v| scale * v + shift, move |_, _| scale)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(
            "add",
            out,
            &[a, b],
            Box::new(|ctx| vec![ctx.needs[0].then(|| ctx.grad.clone()), ctx.needs[1].then(|| ctx.grad.clone())]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(
            "mul",
            tensor(&shape, out),
            &[a, b],
            Box::new(|ctx| {
                let g = ctx.grad.data();
                let prod = |other: &Tensor<T>| {
                    tensor(other.shape(), g.iter().zip(other.data()).map(|(&gi, &o)| gi * o).collect())
                };
                vec![ctx.needs[0].then(|| prod(ctx.inputs[1])), ctx.needs[1].then(|| prod(ctx.inputs[0]))]
            }),
        )
    }

    /// Scales each row of `a[N, C]` by the matching entry of `s[N, 1]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let [n, c] = self.value(a).dims2("mul_rows")?;
        if self.value(s).shape() != [n, 1] {
            return Err(Error::shape("mul_rows", format!("{:?} vs {:?}", self.value(a).shape(), self.value(s).shape())));
        }
        let av = self.value(a).data();
        let sv = self.value(s).data();
        let out = (0..n * c).map(|i| av[i] * sv[i / c]).collect();
        self.push(
            "mul_rows",
            tensor(&[n, c], out),
            &[a, s],
            Box::new(move |ctx| {
                let (av, sv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let da = ctx.needs[0].then(|| tensor(&[n, c], (0..n * c).map(|i| g[i] * sv[i / c]).collect()));
                let ds = ctx.needs[1].then(|| {
                    tensor(&[n, 1], (0..n).map(|r| kernels::dot(&g[r * c..(r + 1) * c], &av[r * c..(r + 1) * c])).collect())
                })
                ;
                vec![da, ds]
            }),
        )
    }

    /// Per-channel blend `g·y + (1 − g)·x` with `g[N, C]` broadcast over H and W.
    pub fn blend_channels(&mut self, y: Var, x: Var, gate: Var) -> Result<Var> {
        same_shape("blend_channels", self.value(y), self.value(x))?;
        let [n, c, h, w] = self.value(y).dims4("blend_channels")?;
        if self.value(gate).shape() != [n, c] {
            return Err(Error::shape(
                "blend_channels",
                format!("gate {:?} for features {:?}", self.value(gate).shape(), self.value(y).shape()),
            ));
        }
        let plane = h * w;
        let (yv, xv, gv) = (self.value(y).data(), self.value(x).data(), self.value(gate).data());
        let mut out = Vec::with_capacity(yv.len());
        for p in 0..n * c {
            let g = gv[p];
            let keep = T::one() - g;
            for i in p * plane..(p + 1) * plane {
                out.push(g * yv[i] + keep * xv[i]);
            }
        }
        self.push(
            "blend_channels",
            tensor(&[n, c, h, w], out),
            &[y, x, gate],
            Box::new(move |ctx| {
                let (yv, xv, gv, d) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data(), ctx.grad.data());
                let shape = ctx.inputs[0].shape();
                let dy = ctx.needs[0].then(|| tensor(shape, (0..d.len()).map(|i| d[i] * gv[i / plane]).collect()));
                let dx = ctx.needs[1]
                    .then(|| tensor(shape, (0..d.len()).map(|i| d[i] * (T::one() - gv[i / plane])).collect()));
                let dg = ctx.needs[2].then(|| {
                    let v = (0..n * c)
                        .map(|p| {
                            let r = p * plane..(p + 1) * plane;
                            let mut s = T::zero();
                            for i in r {
                                s += d[i] * (yv[i] - xv[i]);
                            }
                            s
                        })
                        .collect();
                    tensor(&[n, c], v)
                });
                vec![dy, dx, dg]
            }),
        )
    }

    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let g = PoolGeom::new(self.value(x).shape(), window, stride)?;
        let (out, arg) = kernels::max_pool_forward(self.value(x).data(), &g);
        self.push(
            "max_pool2d",
            tensor(&[g.n, g.c, g.oh, g.ow], out),
            &[x],
            Box::new(move |ctx| {
                let mut dx = vec![T::zero(); ctx.inputs[0].numel()];
                for (&src, &gv) in arg.iter().zip(ctx.grad.data()) {
                    dx[src] += gv;
                }
                vec![Some(tensor(ctx.inputs[0].shape(), dx))]
            }),
        )
    }

    pub fn avg_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let g = PoolGeom::new(self.value(x).shape(), window, stride)?;
        let out = kernels::avg_pool_forward(self.value(x).data(), &g);
        self.push(
            "avg_pool2d",
            tensor(&[g.n, g.c, g.oh, g.ow], out),
            &[x],
            Box::new(move |ctx| vec![Some(tensor(ctx.inputs[0].shape(), kernels::avg_pool_backward(ctx.grad.data(), &g)))]),
        )
    }

    /// Averages each channel plane: `[N, C, H, W]` to `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let plane = h * w;
        let inv = T::one() / T::lit(plane as f64);
        let out = self.value(x).data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        self.push(
            "global_avg_pool",
            tensor(&[n, c], out),
            &[x],
            Box::new(move |ctx| {
                let dx = ctx.grad.data().iter().flat_map(|&g| std::iter::repeat_n(g * inv, plane)).collect();
                vec![Some(tensor(&[n, c, h, w], dx))]
            }),
        )
    }

    /// Batch normalization with per-channel `gamma` and `beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let [n, c, h, w] = self.value(x).dims4("batch_norm")?;
        let plane = h * w;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape("batch_norm", format!("parameter {:?} for {} channels", self.value(p).shape(), c)));
            }
        }
        let eps = T::lit(BN_EPS);
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if n * plane == 0 {
                    return Err(Error::shape("batch_norm", "empty batch in train mode"));
                }
                let (mean, var) = kernels::channel_moments(self.value(x).data(), n, c, plane);
                let count = (n * plane) as f64;
                let unbiased = if count > 1.0 {
                    var.iter().map(|&v| v * T::lit(count / (count - 1.0))).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length differs from channel count"));
                }
                (mean, var, None)
            }
        };
        let train = stats.is_some();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for i in base..base + plane {
                    xhat[i] = (xv[i] - mean[ci]) * inv_std[ci];
                    out[i] = gv[ci] * xhat[i] + bv[ci];
                }
            }
        }
        let var_out = self.push(
            "batch_norm",
            tensor(&[n, c, h, w], out),
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let (gamma, d) = (ctx.inputs[1].data(), ctx.grad.data());
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        for i in base..base + plane {
                            dgamma[ci] += d[i] * xhat[i];
                            dbeta[ci] += d[i];
                        }
                    }
                }
                let dx = ctx.needs[0].then(|| {
                    let mut dx = vec![T::zero(); d.len()];
                    let m = T::lit((n * plane) as f64);
                    for ci in 0..c {
                        let k = gamma[ci] * inv_std[ci];
                        for ni in 0..n {
                            let base = (ni * c + ci) * plane;
                            for i in base..base + plane {
                                dx[i] = if train {
                                    k * (d[i] - dbeta[ci] / m - xhat[i] * dgamma[ci] / m)
                                } else {
                                    k * d[i]
                                };
                            }
                        }
                    }
                    tensor(&[n, c, h, w], dx)
                });
                vec![dx, ctx.needs[1].then(|| tensor(&[c], dgamma)), ctx.needs[2].then(|| tensor(&[c], dbeta))]
            }),
        )?;
        Ok((var_out, stats))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::shape("concat_channels", "no inputs"))?).dims4("concat_channels")?;
        let [n, _, h, w] = first;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).dims4("concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", first, self.value(p).shape())));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for ni in 0..n {
            for (&p, &pc) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[ni * pc * plane..(ni + 1) * pc * plane]);
            }
        }
        self.push(
            "concat_channels",
            tensor(&[n, total, h, w], out),
            parts,
            Box::new(move |ctx| {
                let d = ctx.grad.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (i, &pc) in widths.iter().enumerate() {
                    grads.push(ctx.needs[i].then(|| {
                        let mut g = Vec::with_capacity(n * pc * plane);
                        for ni in 0..n {
                            let start = (ni * total + offset) * plane;
                            g.extend_from_slice(&d[start..start + pc * plane]);
                        }
                        tensor(&[n, pc, h, w], g)
                    }));
                    offset += pc;
                }
                grads
            }),
        )
    }

    /// Channels `[start, start + len)` of an NCHW tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("slice_channels")?;
        if start + len > c || len == 0 {
            return Err(Error::shape("slice_channels", format!("channels {}..{} of {}", start, start + len, c)));
        }
        let plane = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * plane);
        for ni in 0..n {
            out.extend_from_slice(&xv[(ni * c + start) * plane..(ni * c + start + len) * plane]);
        }
        self.push(
            "slice_channels",
            tensor(&[n, len, h, w], out),
            &[x],
            Box::new(move |ctx| {
                let mut dx = vec![T::zero(); n * c * plane];
                let d = ctx.grad.data();
                for ni in 0..n {
                    dx[(ni * c + start) * plane..(ni * c + start + len) * plane]
                        .copy_from_slice(&d[ni * len * plane..(ni + 1) * len * plane]);
                }
                vec![Some(tensor(&[n, c, h, w], dx))]
            }),
        )
    }

    /// Columns `[start, start + len)` of a `[N, D]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, d] = self.value(x).dims2("slice_cols")?;
        if start + len > d || len == 0 {
            return Err(Error::shape("slice_cols", format!("columns {}..{} of {}", start, start + len, d)));
        }
        let xv = self.value(x).data();
        let out = (0..n).flat_map(|r| xv[r * d + start..r * d + start + len].iter().copied()).collect();
        self.push(
            "slice_cols",
            tensor(&[n, len], out),
            &[x],
            Box::new(move |ctx| {
                let mut dx = vec![T::zero(); n * d];
                let g = ctx.grad.data();
                for r in 0..n {
                    dx[r * d + start..r * d + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![Some(tensor(&[n, d], dx))]
            }),
        )
    }

    /// Row means: `[N, C]` to `[N, 1]`.
    pub fn mean_cols(&mut self, x: Var) -> Result<Var> {
        let [n, c] = self.value(x).dims2("mean_cols")?;
        let inv = T::one() / T::lit(c as f64);
        let out = self.value(x).data().chunks(c).map(|r| r.iter().copied().sum::<T>() * inv).collect();
        self.push(
            "mean_cols",
            tensor(&[n, 1], out),
            &[x],
            Box::new(move |ctx| {
                let dx = ctx.grad.data().iter().flat_map(|&g| std::iter::repeat_n(g * inv, c)).collect();
                vec![Some(tensor(&[n, c], dx))]
            }),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(
            "sum_all",
            Tensor::scalar(s),
            &[x],
            Box::new(|ctx| vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item()))]),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let count = self.value(x).numel().max(1);
        let s = self.sum_all(x)?;
        self.affine(s, T::one() / T::lit(count as f64), T::zero())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(
            "reshape",
            out,
            &[x],
            Box::new(|ctx| vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape()).expect("same numel"))]),
        )
    }

    /// Mean softmax cross-entropy of `logits[N, K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape("softmax_cross_entropy", format!("{} labels for batch of {}", labels.len(), n)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape("softmax_cross_entropy", format!("label {} out of range for {} classes", bad, k)));
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let lv = self.value(logits).data();
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            loss += log_sum_exp(row) - row[y];
        }
        loss /= T::lit(n as f64);
        let labels = labels.to_vec();
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |ctx| {
                let scale = ctx.grad.item() / T::lit(n as f64);
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                vec![Some(tensor(&[n, k], d))]
            }),
        )
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub fn softmax_rows<T: Real>(x: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s = e.iter().copied().sum::<T>();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

/// Index of the largest value in each row; first maximum wins.
pub fn argmax_rows<T: Real>(x: &[T], k: usize) -> Vec<usize> {
    x.chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
