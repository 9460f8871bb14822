use crate::dataset::{CandidateLabelSet, N_BEHAVIORS};
use crate::error::{Error, Result};
use crate::pll::{self, WeightGradient};

use super::conv::ConvGeometry;
use super::tensor::{ParamStore, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    PllLoss {
        logits: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op,
}

/// Records a forward computation for one backward sweep.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::invalid(msg()))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("consistent node")
    }

    /// A constant leaf.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Input)
    }

    /// A leaf whose gradient is routed to `store.tensors[index]`.
    pub fn param(&mut self, store: &ParamStore<T>, index: usize) -> Var {
        let t = &store.tensors[index];
        self.push(t.shape.clone(), t.data.clone(), Op::Param(index))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check(self.shape(a) == self.shape(b), || {
            format!("add: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))
        })?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check(self.shape(a) == self.shape(b), || {
            format!("mul: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))
        })?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kk = T::of(k);
        let value = self.value(a).iter().map(|x| *x * kk).collect();
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, k))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(T::zero(), |acc, x| acc + *x);
        self.push(vec![], vec![s], Op::Sum(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.max(T::zero())).collect();
        self.push(self.shape(a).to_vec(), value, Op::Relu(a))
    }

    /// `[B, C, H, W]` convolved with `[O, C, K, K]` plus per-channel bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        check(xs.len() == 4 && ws.len() == 4, || format!("conv2d: need 4-d input/weight, got {xs:?}/{ws:?}"))?;
        check(ws[1] == xs[1] && ws[2] == ws[3], || format!("conv2d: weight {ws:?} does not fit input {xs:?}"))?;
        check(self.shape(bias) == [ws[0]], || format!("conv2d: bias must be [{}]", ws[0]))?;
        check(stride >= 1, || "conv2d: stride must be positive".into())?;
        let geom = ConvGeometry {
            batch: xs[0],
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        check(oh > 0 && ow > 0, || format!("conv2d: input {xs:?} too small for kernel {}", ws[2]))?;
        let out_c = ws[0];
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut col = vec![T::zero(); rows * cols];
        geom.im2col(self.value(input), &mut col);
        // tmp[O, B*Ho*Wo] = W[O, rows] * col
        let mut tmp = vec![T::zero(); out_c * cols];
        T::gemm(
            out_c, rows, cols, T::one(), self.value(weight), rows as isize, 1, &col, cols as isize, 1, T::zero(),
            &mut tmp, cols as isize, 1,
        );
        let plane = oh * ow;
        let bias_v = self.value(bias);
        let mut out = vec![T::zero(); geom.batch * out_c * plane];
        for o in 0..out_c {
            for b in 0..geom.batch {
                let src = &tmp[o * cols + b * plane..][..plane];
                let dst = &mut out[(b * out_c + o) * plane..][..plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + bias_v[o];
                }
            }
        }
        Ok(self.push(
            vec![geom.batch, out_c, oh, ow],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Non-overlapping `size x size` max pooling; trailing rows/columns that do
    /// not fill a window are dropped. Ties go to the first element.
    pub fn max_pool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        check(s.len() == 4 && size >= 1, || format!("max_pool2d: bad input {s:?}"))?;
        let (oh, ow) = (s[2] / size, s[3] / size);
        check(oh > 0 && ow > 0, || format!("max_pool2d: {s:?} smaller than window {size}"))?;
        let x = self.value(input);
        let planes = s[0] * s[1];
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * s[2] * s[3];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * s[3] + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let i = base + (oy * size + dy) * s[3] + ox * size + dx;
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(vec![s[0], s[1], oh, ow], out, Op::MaxPool2d { input, argmax }))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        check(s.len() == 4, || format!("global_avg_pool: need 4-d input, got {s:?}"))?;
        let plane = s[2] * s[3];
        let inv = T::of(1.0 / plane as f64);
        let value = self
            .value(input)
            .chunks_exact(plane)
            .map(|c| c.iter().fold(T::zero(), |a, v| a + *v) * inv)
            .collect();
        Ok(self.push(vec![s[0], s[1]], value, Op::GlobalAvgPool(input)))
    }

    /// `[B, In] x [Out, In]^T + [Out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        check(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], || {
            format!("linear: input {xs:?} does not fit weight {ws:?}")
        })?;
        check(self.shape(bias) == [ws[0]], || format!("linear: bias must be [{}]", ws[0]))?;
        let (b, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); b * out];
        for r in 0..b {
            y[r * out..(r + 1) * out].copy_from_slice(self.value(bias));
        }
        T::gemm(
            b, inp, out, T::one(), self.value(input), inp as isize, 1, self.value(weight), 1, inp as isize, T::one(),
            &mut y, out as isize, 1,
        );
        Ok(self.push(vec![b, out], y, Op::Linear { input, weight, bias }))
    }

    /// Mean partial-label loss of `[B, 4]` logits; a scalar.
    pub fn pll_loss(&mut self, logits: Var, sets: &[CandidateLabelSet], mode: WeightGradient) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        check(s.len() == 2 && s[1] == N_BEHAVIORS && s[0] == sets.len(), || {
            format!("pll_loss: logits {s:?} vs {} label sets", sets.len())
        })?;
        let flat: Vec<f64> = self.value(logits).iter().map(|v| v.as_f64()).collect();
        let masks: Vec<u8> = sets.iter().map(|s| s.mask()).collect();
        let batch = pll::PllBatch::from_masks(&flat, &masks)?;
        let (loss, grads) = pll::pll_loss_with_grad(&batch, mode);
        let grad = grads.into_iter().flatten().collect();
        Ok(self.push(vec![], vec![T::of(loss)], Op::PllLoss { logits, grad }))
    }

    /// Reverse sweep from a scalar; parameter gradients are accumulated into
    /// `store` (allocating grad slots on first use).
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        check(self.nodes[loss.0].value.len() == 1, || {
            format!("backward needs a scalar, got shape {:?}", self.shape(loss))
        })?;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(i) => {
                    let t = &mut store.tensors[*i];
                    match &mut t.grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a = *a + *v),
                        None => t.grad = Some(g.clone()),
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<T> = g.iter().zip(self.value(*b)).map(|(x, y)| *x * *y).collect();
                    let gb: Vec<T> = g.iter().zip(self.value(*a)).map(|(x, y)| *x * *y).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Scale(a, k) => {
                    let kk = T::of(*k);
                    let ga: Vec<T> = g.iter().map(|x| *x * kk).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Sum(a) => {
                    let ga = vec![g[0]; self.value(*a).len()];
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Relu(a) => {
                    let ga: Vec<T> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(x, y)| if *y > T::zero() { *x } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => self.conv2d_backward(&g, *input, *weight, *bias, geom, &mut grads),
                Op::MaxPool2d { input, argmax } => {
                    let mut ga = vec![T::zero(); self.value(*input).len()];
                    for (gi, &src) in g.iter().zip(argmax) {
                        ga[src] = ga[src] + *gi;
                    }
                    accumulate(&mut grads, *input, &ga);
                }
                Op::GlobalAvgPool(a) => {
                    let s = self.shape(*a);
                    let plane = s[2] * s[3];
                    let inv = T::of(1.0 / plane as f64);
                    let ga: Vec<T> = g.iter().flat_map(|x| std::iter::repeat(*x * inv).take(plane)).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Linear { input, weight, bias } => {
                    let (xs, ws) = (self.shape(*input), self.shape(*weight));
                    let (b, inp, out) = (xs[0], xs[1], ws[0]);
                    // dx[B, In] = g[B, Out] * W[Out, In]
                    let mut gx = vec![T::zero(); b * inp];
                    T::gemm(
                        b, out, inp, T::one(), &g, out as isize, 1, self.value(*weight), inp as isize, 1, T::zero(),
                        &mut gx, inp as isize, 1,
                    );
                    // dW[Out, In] = g^T * x
                    let mut gw = vec![T::zero(); out * inp];
                    T::gemm(
                        out, b, inp, T::one(), &g, 1, out as isize, self.value(*input), inp as isize, 1, T::zero(),
                        &mut gw, inp as isize, 1,
                    );
                    let mut gb = vec![T::zero(); out];
                    for row in g.chunks_exact(out) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a = *a + *v);
                    }
                    accumulate(&mut grads, *input, &gx);
                    accumulate(&mut grads, *weight, &gw);
                    accumulate(&mut grads, *bias, &gb);
                }
                Op::PllLoss { logits, grad } => {
                    let ga: Vec<T> = grad.iter().map(|v| T::of(*v) * g[0]).collect();
                    accumulate(&mut grads, *logits, &ga);
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        g: &[T],
        input: Var,
        weight: Var,
        bias: Var,
        geom: &ConvGeometry,
        grads: &mut [Option<Vec<T>>],
    ) {
        let out_c = self.shape(weight)[0];
        let plane = geom.out_h() * geom.out_w();
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        // Regroup g[B, O, plane] as gt[O, B*plane].
        let mut gt = vec![T::zero(); out_c * cols];
        let mut gb = vec![T::zero(); out_c];
        for b in 0..geom.batch {
            for o in 0..out_c {
                let src = &g[(b * out_c + o) * plane..][..plane];
                gt[o * cols + b * plane..][..plane].copy_from_slice(src);
                gb[o] = src.iter().fold(gb[o], |a, v| a + *v);
            }
        }
        let mut col = vec![T::zero(); rows * cols];
        geom.im2col(self.value(input), &mut col);
        // dW[O, rows] = gt * col^T
        let mut gw = vec![T::zero(); out_c * rows];
        T::gemm(
            out_c, cols, rows, T::one(), &gt, cols as isize, 1, &col, 1, cols as isize, T::zero(), &mut gw,
            rows as isize, 1,
        );
        // dcol[rows, cols] = W^T * gt
        let mut gcol = col;
        T::gemm(
            rows, out_c, cols, T::one(), self.value(weight), 1, rows as isize, &gt, cols as isize, 1, T::zero(),
            &mut gcol, cols as isize, 1,
        );
        let mut gx = vec![T::zero(); self.value(input).len()];
        geom.col2im(&gcol, &mut gx);
        accumulate(grads, input, &gx);
        accumulate(grads, weight, &gw);
        accumulate(grads, bias, &gb);
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, x)| *a = *a + *x),
        slot @ None => *slot = Some(g.to_vec()),
    }
}
