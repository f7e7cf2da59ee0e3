//! Differentiable operators. Forward rules live on [`Tape`]; the matching
//! backward rules are in [`Tape::propagate`].

use crate::conv::{self, ConvGeometry};
use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::tape::{accumulate, Op, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_COSINE_EPS: f64 = 1e-8;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// `(N, C, inner)` view of a tensor with at least two axes.
fn split_nc(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return shape_err(format!("expected at least N×C axes, got {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn spatial3(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

impl<E: Element> Tape<E> {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(E, E) -> E) -> Tensor<E> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, &[a, b], Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let v = self.zip_with(a, b, |x, y| x / y);
        Ok(self.push(v, &[a, b], Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: E) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, &[a], Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, c: E) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, &[a], Op::AddScalar(a))
    }

    /// `x · s` where `s` holds a single element.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err(format!("scalar factor has shape {:?}", self.shape(s)));
        }
        let k = self.value(s).item();
        let v = self.value(x).map(|e| e * k);
        Ok(self.push(v, &[x, s], Op::MulScalarVar { x, s }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| E::one() / (E::one() + (-x).exp()));
        self.push(v, &[a], Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push(v, &[a], Op::Ln(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, &[a], Op::Exp(a))
    }

    /// `x` for `x ≥ 0`, `slope·x` otherwise. The derivative at exactly zero is `slope`.
    pub fn leaky_relu(&mut self, a: Var, slope: E) -> Var {
        let v = self.value(a).map(|x| if x >= E::zero() { x } else { slope * x });
        self.push(v, &[a], Op::LeakyRelu(a, slope))
    }

    /// Forward identity whose output is detached from the graph.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    /// 3D convolution. `kernel` is `Cout×Cin×k1×k2×k3`; `bias` is `Cout`.
    pub fn conv3(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let [n, cin, _, _, _] = self.value(input).dims5()?;
        let kshape = self.shape(kernel).to_vec();
        if kshape.len() != 5 {
            return shape_err(format!("conv kernel must be 5-d, got {kshape:?}"));
        }
        let (cout, kcin) = (kshape[0], kshape[1]);
        if kcin != cin {
            return shape_err(format!(
                "conv channel mismatch: input has {cin} channels, kernel expects {kcin}"
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return shape_err(format!("conv bias shape {:?}, expected [{cout}]", self.shape(b)));
            }
        }
        let geom = ConvGeometry::new(
            cin,
            spatial3(self.shape(input)),
            [kshape[2], kshape[3], kshape[4]],
            stride,
            pad,
        )?;
        let out = conv::conv_forward(
            &geom,
            n,
            cout,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let [od, oh, ow] = geom.output;
        let t = Tensor::from_vec(&[n, cout, od, oh, ow], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            t,
            &inputs,
            Op::Conv3 {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Convolution with `same` padding for odd kernels and unit stride.
    pub fn conv3_same(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let k = self.shape(kernel).to_vec();
        if k.len() != 5 || k[2..].iter().any(|&e| e % 2 == 0) {
            return shape_err(format!("same padding requires odd kernel extents, got {k:?}"));
        }
        self.conv3(input, kernel, bias, [1, 1, 1], [k[2] / 2, k[3] / 2, k[4] / 2])
    }

    /// Transposed 3D convolution (no padding). `kernel` is `Cin×Cout×k1×k2×k3`;
    /// output extents are `(in − 1)·stride + k`.
    pub fn transposed_conv3(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: [usize; 3]) -> Result<Var> {
        let [n, cin, d, h, w] = self.value(input).dims5()?;
        let kshape = self.shape(kernel).to_vec();
        if kshape.len() != 5 {
            return shape_err(format!("transposed conv kernel must be 5-d, got {kshape:?}"));
        }
        if kshape[0] != cin {
            return shape_err(format!(
                "transposed conv channel mismatch: input has {cin} channels, kernel expects {}",
                kshape[0]
            ));
        }
        if stride.contains(&0) {
            return shape_err("convolution stride must be at least 1");
        }
        let cout = kshape[1];
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return shape_err(format!("bias shape {:?}, expected [{cout}]", self.shape(b)));
            }
        }
        let k = [kshape[2], kshape[3], kshape[4]];
        let big = [
            (d - 1) * stride[0] + k[0],
            (h - 1) * stride[1] + k[1],
            (w - 1) * stride[2] + k[2],
        ];
        if d == 0 || h == 0 || w == 0 {
            return shape_err("zero-extent input");
        }
        let geom = ConvGeometry::new(cout, big, k, stride, [0, 0, 0])?;
        debug_assert_eq!(geom.output, [d, h, w]);
        let out = conv::conv_transpose_forward(
            &geom,
            n,
            cin,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let t = Tensor::from_vec(&[n, cout, big[0], big[1], big[2]], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            t,
            &inputs,
            Op::ConvTranspose3 {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Per-sample, per-channel normalization over the spatial voxels followed
    /// by a learnable per-channel affine map.
    pub fn instance_norm(&mut self, input: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (n, c, m) = split_nc(self.shape(input))?;
        if m == 0 {
            return shape_err("instance norm over an empty spatial volume");
        }
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return shape_err(format!(
                "instance norm affine shapes {:?}/{:?}, expected [{c}]",
                self.shape(scale),
                self.shape(shift)
            ));
        }
        let x = self.value(input).data();
        let (gamma, beta) = (self.value(scale).data(), self.value(shift).data());
        let mut xhat = vec![E::zero(); x.len()];
        let mut out = vec![E::zero(); x.len()];
        let mut inv_std = vec![0.0f64; n * c];
        for s in 0..n * c {
            let ch = s % c;
            let xs = &x[s * m..(s + 1) * m];
            let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64;
            let var = xs
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / m as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[s] = istd;
            let (g, b) = (gamma[ch], beta[ch]);
            for (i, &v) in xs.iter().enumerate() {
                let h = E::lit((v.as_f64() - mean) * istd);
                xhat[s * m + i] = h;
                out[s * m + i] = h * g + b;
            }
        }
        let t = Tensor::from_vec(self.shape(input), out)?;
        Ok(self.push(
            t,
            &[input, scale, shift],
            Op::InstanceNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
            },
        ))
    }

    /// `⟨a,b⟩ / (max(‖a‖,eps)·max(‖b‖,eps))` over the flattened tensors.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape(a, b, "cosine_similarity")?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut dot = 0.0;
        let mut sa = 0.0;
        let mut sb = 0.0;
        for (&p, &q) in xa.iter().zip(xb) {
            let (p, q) = (p.as_f64(), q.as_f64());
            dot += p * q;
            sa += p * p;
            sb += q * q;
        }
        let (na, nb) = (sa.sqrt(), sb.sqrt());
        let value = dot / (na.max(eps) * nb.max(eps));
        Ok(self.push(
            Tensor::scalar(E::lit(value)),
            &[a, b],
            Op::Cosine { a, b, dot, na, nb, eps },
        ))
    }

    /// Mean over the channel axis: `N×C×…` → `N×1×…`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, m) = split_nc(self.shape(x))?;
        if c == 0 {
            return shape_err("channel_mean over zero channels");
        }
        let src = self.value(x).data();
        let mut out = vec![E::zero(); n * m];
        for b in 0..n {
            let dst = &mut out[b * m..(b + 1) * m];
            for ch in 0..c {
                let plane = &src[(b * c + ch) * m..(b * c + ch + 1) * m];
                for (d, &v) in dst.iter_mut().zip(plane) {
                    *d += v;
                }
            }
            let inv = E::lit(1.0 / c as f64);
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[1] = 1;
        let t = Tensor::from_vec(&shape, out)?;
        Ok(self.push(t, &[x], Op::ChannelMean(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_f64();
        self.push(Tensor::scalar(E::lit(s)), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum_f64() / t.numel().max(1) as f64;
        self.push(Tensor::scalar(E::lit(s)), &[x], Op::Mean(x))
    }

    /// Joins two tensors along axis 1.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, ca, ma) = split_nc(&sa)?;
        let (nb, cb, mb) = split_nc(&sb)?;
        if na != nb || sa[2..] != sb[2..] {
            return shape_err(format!("concat_channels mismatch {sa:?} vs {sb:?}"));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(xa.len() + xb.len());
        for n in 0..na {
            out.extend_from_slice(&xa[n * ca * ma..(n + 1) * ca * ma]);
            out.extend_from_slice(&xb[n * cb * mb..(n + 1) * cb * mb]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let t = Tensor::from_vec(&shape, out)?;
        Ok(self.push(t, &[a, b], Op::ConcatChannels(a, b)))
    }

    /// Log-softmax across axis 1 at every voxel.
    pub fn log_softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, m) = split_nc(self.shape(x))?;
        let src = self.value(x).data();
        let mut out = vec![E::zero(); src.len()];
        for b in 0..n {
            let base = b * c * m;
            for v in 0..m {
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..c {
                    mx = mx.max(src[base + ch * m + v].as_f64());
                }
                let mut se = 0.0;
                for ch in 0..c {
                    se += (src[base + ch * m + v].as_f64() - mx).exp();
                }
                let lse = mx + se.ln();
                for ch in 0..c {
                    out[base + ch * m + v] = E::lit(src[base + ch * m + v].as_f64() - lse);
                }
            }
        }
        let t = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push(t, &[x], Op::LogSoftmaxChannels(x)))
    }

    /// Sum over all axes after the first two: `N×C×…` → `N×C`.
    pub fn sum_spatial(&mut self, x: Var) -> Result<Var> {
        let (n, c, m) = split_nc(self.shape(x))?;
        let src = self.value(x).data();
        let out = (0..n * c)
            .map(|s| E::lit(src[s * m..(s + 1) * m].iter().map(|v| v.as_f64()).sum::<f64>()))
            .collect();
        let t = Tensor::from_vec(&[n, c], out)?;
        Ok(self.push(t, &[x], Op::SumSpatial(x)))
    }

    /// Sample `index` of the batch, keeping a unit batch axis.
    pub fn slice_batch(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x).batch_item(index)?;
        Ok(self.push(t, &[x], Op::SliceBatch { x, index }))
    }

    /// Channels `start..end` along axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, m) = split_nc(&shape)?;
        if start >= end || end > c {
            return shape_err(format!("channel slice {start}..{end} out of range for {shape:?}"));
        }
        let src = self.value(x).data();
        let k = end - start;
        let mut out = Vec::with_capacity(n * k * m);
        for b in 0..n {
            out.extend_from_slice(&src[(b * c + start) * m..(b * c + end) * m]);
        }
        let mut oshape = shape.clone();
        oshape[1] = k;
        let t = Tensor::from_vec(&oshape, out)?;
        Ok(self.push(t, &[x], Op::SliceChannels { x, start }))
    }

    /// Voxel-mean binary cross-entropy of `sigmoid(logits)` against `target ∈ [0,1]`,
    /// evaluated in the overflow-free logit form.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<E>) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return shape_err(format!(
                "bce shape mismatch {:?} vs {:?}",
                self.shape(logits),
                target.shape()
            ));
        }
        let z = self.value(logits).data();
        let m = z.len().max(1) as f64;
        let total: f64 = z
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| {
                let (z, t) = (z.as_f64(), t.as_f64());
                z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(E::lit(total / m)),
            &[logits],
            Op::BceWithLogits {
                logits,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Backward rule for node `i` given its output gradient `g`.
    pub(crate) fn propagate(&self, i: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &self.nodes[i].value;
        let like = |v: Var, data: Vec<E>| Tensor::from_vec(val(v).shape(), data).expect("shape");
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let d = g.data().iter().zip(val(*b).data()).map(|(&g, &y)| g * y).collect();
                    accumulate(grads, *a, like(*a, d));
                }
                if needs(*b) {
                    let d = g.data().iter().zip(val(*a).data()).map(|(&g, &x)| g * x).collect();
                    accumulate(grads, *b, like(*b, d));
                }
            }
            Op::Div(a, b) => {
                let yb = val(*b).data();
                if needs(*a) {
                    let d = g.data().iter().zip(yb).map(|(&g, &y)| g / y).collect();
                    accumulate(grads, *a, like(*a, d));
                }
                if needs(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(val(*a).data())
                        .zip(yb)
                        .map(|((&g, &x), &y)| -g * x / (y * y))
                        .collect();
                    accumulate(grads, *b, like(*b, d));
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * *s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::MulScalarVar { x, s } => {
                let k = val(*s).item();
                if needs(*x) {
                    accumulate(grads, *x, g.map(|e| e * k));
                }
                if needs(*s) {
                    let d: f64 = g
                        .data()
                        .iter()
                        .zip(val(*x).data())
                        .map(|(&g, &x)| g.as_f64() * x.as_f64())
                        .sum();
                    accumulate(
                        grads,
                        *s,
                        Tensor::from_vec(val(*s).shape(), vec![E::lit(d)]).expect("scalar"),
                    );
                }
            }
            Op::Sigmoid(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&g, &y)| g * y * (E::one() - y))
                    .collect();
                accumulate(grads, *a, like(*a, d));
            }
            Op::Ln(a) => {
                let d = g.data().iter().zip(val(*a).data()).map(|(&g, &x)| g / x).collect();
                accumulate(grads, *a, like(*a, d));
            }
            Op::Exp(a) => {
                let d = g.data().iter().zip(out.data()).map(|(&g, &y)| g * y).collect();
                accumulate(grads, *a, like(*a, d));
            }
            Op::LeakyRelu(a, slope) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&g, &x)| if x > E::zero() { g } else { g * *slope })
                    .collect();
                accumulate(grads, *a, like(*a, d));
            }
            Op::Conv3 {
                input,
                kernel,
                bias,
                geom,
            } => {
                let [n, cout, _, _, _] = out.dims5().expect("5-d");
                let mut gi = needs(*input).then(|| vec![E::zero(); val(*input).numel()]);
                let mut gk = needs(*kernel).then(|| vec![E::zero(); val(*kernel).numel()]);
                let mut gb = bias.filter(|b| needs(*b)).map(|b| vec![E::zero(); val(b).numel()]);
                conv::conv_backward(
                    geom,
                    n,
                    cout,
                    val(*input).data(),
                    val(*kernel).data(),
                    g.data(),
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(d) = gi {
                    accumulate(grads, *input, like(*input, d));
                }
                if let Some(d) = gk {
                    accumulate(grads, *kernel, like(*kernel, d));
                }
                if let (Some(b), Some(d)) = (bias, gb) {
                    accumulate(grads, *b, like(*b, d));
                }
            }
            Op::ConvTranspose3 {
                input,
                kernel,
                bias,
                geom,
            } => {
                let [n, cin, _, _, _] = val(*input).dims5().expect("5-d");
                let mut gi = needs(*input).then(|| vec![E::zero(); val(*input).numel()]);
                let mut gk = needs(*kernel).then(|| vec![E::zero(); val(*kernel).numel()]);
                let mut gb = bias.filter(|b| needs(*b)).map(|b| vec![E::zero(); val(b).numel()]);
                conv::conv_transpose_backward(
                    geom,
                    n,
                    cin,
                    val(*input).data(),
                    val(*kernel).data(),
                    g.data(),
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(d) = gi {
                    accumulate(grads, *input, like(*input, d));
                }
                if let Some(d) = gk {
                    accumulate(grads, *kernel, like(*kernel, d));
                }
                if let (Some(b), Some(d)) = (bias, gb) {
                    accumulate(grads, *b, like(*b, d));
                }
            }
            Op::InstanceNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let (n, c, m) = split_nc(val(*input).shape()).expect("nc");
                let gamma = val(*scale).data();
                let gd = g.data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                let mut dx = needs(*input).then(|| vec![E::zero(); n * c * m]);
                for s in 0..n * c {
                    let ch = s % c;
                    let gs = &gd[s * m..(s + 1) * m];
                    let hs = &xhat[s * m..(s + 1) * m];
                    let mut sum_g = 0.0;
                    let mut sum_gh = 0.0;
                    for (&gv, &hv) in gs.iter().zip(hs) {
                        sum_g += gv.as_f64();
                        sum_gh += gv.as_f64() * hv.as_f64();
                    }
                    dgamma[ch] += sum_gh;
                    dbeta[ch] += sum_g;
                    if let Some(dx) = dx.as_mut() {
                        // dx = γ·istd/m · (m·g − Σg − x̂·Σ(g·x̂))
                        let k = gamma[ch].as_f64() * inv_std[s] / m as f64;
                        let mf = m as f64;
                        for (j, (&gv, &hv)) in gs.iter().zip(hs).enumerate() {
                            dx[s * m + j] = E::lit(k * (mf * gv.as_f64() - sum_g - hv.as_f64() * sum_gh));
                        }
                    }
                }
                if let Some(d) = dx {
                    accumulate(grads, *input, like(*input, d));
                }
                if needs(*scale) {
                    accumulate(grads, *scale, like(*scale, dgamma.iter().map(|&v| E::lit(v)).collect()));
                }
                if needs(*shift) {
                    accumulate(grads, *shift, like(*shift, dbeta.iter().map(|&v| E::lit(v)).collect()));
                }
            }
            Op::Cosine { a, b, dot, na, nb, eps } => {
                let go = g.item().as_f64();
                let (ca, cb) = (na.max(*eps), nb.max(*eps));
                let denom = ca * cb;
                let (xa, xb) = (val(*a).data(), val(*b).data());
                // d/da [dot / (max(|a|,eps)·max(|b|,eps))]
                let grad_for = |own: &[E], other: &[E], n_own: f64, c_own: f64| -> Vec<E> {
                    let radial = if n_own > *eps {
                        dot / (c_own * denom * n_own)
                    } else {
                        0.0
                    };
                    own.iter()
                        .zip(other)
                        .map(|(&p, &q)| E::lit(go * (q.as_f64() / denom - radial * p.as_f64())))
                        .collect()
                };
                if needs(*a) {
                    accumulate(grads, *a, like(*a, grad_for(xa, xb, *na, ca)));
                }
                if needs(*b) {
                    accumulate(grads, *b, like(*b, grad_for(xb, xa, *nb, cb)));
                }
            }
            Op::ChannelMean(x) => {
                let (n, c, m) = split_nc(val(*x).shape()).expect("nc");
                let inv = E::lit(1.0 / c as f64);
                let gd = g.data();
                let mut d = vec![E::zero(); n * c * m];
                for b in 0..n {
                    for ch in 0..c {
                        let dst = &mut d[(b * c + ch) * m..(b * c + ch + 1) * m];
                        for (o, &gv) in dst.iter_mut().zip(&gd[b * m..(b + 1) * m]) {
                            *o = gv * inv;
                        }
                    }
                }
                accumulate(grads, *x, like(*x, d));
            }
            Op::Sum(x) => {
                let gv = g.item();
                accumulate(grads, *x, Tensor::full(val(*x).shape(), gv));
            }
            Op::Mean(x) => {
                let gv = g.item() / E::lit(val(*x).numel().max(1) as f64);
                accumulate(grads, *x, Tensor::full(val(*x).shape(), gv));
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, m) = split_nc(val(*a).shape()).expect("nc");
                let cb = val(*b).shape()[1];
                let gd = g.data();
                let mut da = Vec::with_capacity(n * ca * m);
                let mut db = Vec::with_capacity(n * cb * m);
                for s in 0..n {
                    let base = s * (ca + cb) * m;
                    da.extend_from_slice(&gd[base..base + ca * m]);
                    db.extend_from_slice(&gd[base + ca * m..base + (ca + cb) * m]);
                }
                if needs(*a) {
                    accumulate(grads, *a, like(*a, da));
                }
                if needs(*b) {
                    accumulate(grads, *b, like(*b, db));
                }
            }
            Op::LogSoftmaxChannels(x) => {
                let (n, c, m) = split_nc(val(*x).shape()).expect("nc");
                let (gd, y) = (g.data(), out.data());
                let mut d = vec![E::zero(); gd.len()];
                for b in 0..n {
                    let base = b * c * m;
                    for v in 0..m {
                        let mut gsum = 0.0;
                        for ch in 0..c {
                            gsum += gd[base + ch * m + v].as_f64();
                        }
                        for ch in 0..c {
                            let idx = base + ch * m + v;
                            d[idx] = E::lit(gd[idx].as_f64() - y[idx].as_f64().exp() * gsum);
                        }
                    }
                }
                accumulate(grads, *x, like(*x, d));
            }
            Op::SumSpatial(x) => {
                let (n, c, m) = split_nc(val(*x).shape()).expect("nc");
                let gd = g.data();
                let mut d = Vec::with_capacity(n * c * m);
                for &gv in gd.iter().take(n * c) {
                    d.extend(std::iter::repeat_n(gv, m));
                }
                accumulate(grads, *x, like(*x, d));
            }
            Op::SliceBatch { x, index } => {
                let t = val(*x);
                let per = t.numel() / t.shape()[0];
                let mut d = vec![E::zero(); t.numel()];
                d[index * per..(index + 1) * per].copy_from_slice(g.data());
                accumulate(grads, *x, like(*x, d));
            }
            Op::SliceChannels { x, start } => {
                let (n, c, m) = split_nc(val(*x).shape()).expect("nc");
                let k = g.shape()[1];
                let mut d = vec![E::zero(); n * c * m];
                for b in 0..n {
                    d[(b * c + start) * m..(b * c + start + k) * m]
                        .copy_from_slice(&g.data()[b * k * m..(b + 1) * k * m]);
                }
                accumulate(grads, *x, like(*x, d));
            }
            Op::BceWithLogits { logits, target } => {
                let z = val(*logits).data();
                let k = g.item().as_f64() / z.len().max(1) as f64;
                let d = z
                    .iter()
                    .zip(target)
                    .map(|(&z, &t)| {
                        let s = 1.0 / (1.0 + (-z.as_f64()).exp());
                        E::lit(k * (s - t.as_f64()))
                    })
                    .collect();
                accumulate(grads, *logits, like(*logits, d));
            }
        }
    }
}
