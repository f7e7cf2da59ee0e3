use autograd::{Element, ParamId, Tape, Tensor, Var, DEFAULT_LEAKY_SLOPE, DEFAULT_NORM_EPS};

use crate::error::Result;
use crate::rng::Stream;

/// A named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param<E> {
    pub id: ParamId,
    pub name: String,
    pub value: Tensor<E>,
}

impl<E: Element> Param<E> {
    pub fn on(&self, tape: &mut Tape<E>) -> Var {
        tape.param(self.id, &self.value)
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Hands out parameter ids and draws initial values in construction order.
pub struct ParamFactory<'a> {
    next: &'a mut usize,
    rng: &'a mut Stream,
}

impl<'a> ParamFactory<'a> {
    pub fn new(next: &'a mut usize, rng: &'a mut Stream) -> Self {
        Self { next, rng }
    }

    fn id(&mut self) -> ParamId {
        let id = ParamId(*self.next);
        *self.next += 1;
        id
    }

    pub fn constant<E: Element>(&mut self, name: String, shape: &[usize], value: f64) -> Param<E> {
        Param {
            id: self.id(),
            name,
            value: Tensor::full(shape, E::lit(value)),
        }
    }

    /// He-uniform for a LeakyReLU network: bound `sqrt(6 / ((1 + a²)·fan_in))`.
    pub fn kaiming<E: Element>(&mut self, name: String, shape: &[usize], fan_in: usize) -> Param<E> {
        let a = DEFAULT_LEAKY_SLOPE;
        let bound = (6.0 / ((1.0 + a * a) * fan_in as f64)).sqrt();
        let rng = &mut *self.rng;
        let value = Tensor::from_fn(shape, |_| E::lit(rng.uniform_in(-bound, bound)));
        Param {
            id: self.id(),
            name,
            value,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv<E> {
    pub weight: Param<E>,
    pub bias: Param<E>,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl<E: Element> Conv<E> {
    pub fn new(
        f: &mut ParamFactory<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
    ) -> Self {
        let fan_in = cin * kernel.iter().product::<usize>();
        let weight = f.kaiming(
            format!("{name}.weight"),
            &[cout, cin, kernel[0], kernel[1], kernel[2]],
            fan_in,
        );
        let bias = f.constant(format!("{name}.bias"), &[cout], 0.0);
        Self {
            weight,
            bias,
            stride,
            pad: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let w = self.weight.on(tape);
        let b = self.bias.on(tape);
        Ok(tape.conv3(x, w, Some(b), self.stride, self.pad)?)
    }

    pub fn params(&self) -> [&Param<E>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<E>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Instance normalization with learnable per-channel scale/shift.
#[derive(Debug, Clone)]
pub struct Norm<E> {
    pub scale: Param<E>,
    pub shift: Param<E>,
}

impl<E: Element> Norm<E> {
    pub fn new(f: &mut ParamFactory<'_>, name: &str, channels: usize) -> Self {
        Self {
            scale: f.constant(format!("{name}.scale"), &[channels], 1.0),
            shift: f.constant(format!("{name}.shift"), &[channels], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let s = self.scale.on(tape);
        let b = self.shift.on(tape);
        Ok(tape.instance_norm(x, s, b, DEFAULT_NORM_EPS)?)
    }

    pub fn params(&self) -> [&Param<E>; 2] {
        [&self.scale, &self.shift]
    }

    pub fn params_mut(&mut self) -> [&mut Param<E>; 2] {
        [&mut self.scale, &mut self.shift]
    }
}

/// Convolution → instance norm → LeakyReLU.
#[derive(Debug, Clone)]
pub struct ConvNormAct<E> {
    pub conv: Conv<E>,
    pub norm: Norm<E>,
}

impl<E: Element> ConvNormAct<E> {
    pub fn new(
        f: &mut ParamFactory<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
    ) -> Self {
        Self {
            conv: Conv::new(f, &format!("{name}.conv"), cin, cout, kernel, stride),
            norm: Norm::new(f, &format!("{name}.norm"), cout),
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.norm.forward(tape, y)?;
        Ok(tape.leaky_relu(y, E::lit(DEFAULT_LEAKY_SLOPE)))
    }

    pub fn params(&self) -> Vec<&Param<E>> {
        let mut v = self.conv.params().to_vec();
        v.extend(self.norm.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<E>> {
        let mut v: Vec<&mut Param<E>> = self.conv.params_mut().into_iter().collect();
        v.extend(self.norm.params_mut());
        v
    }
}

/// Stride-2, kernel-2 transposed convolution doubling every spatial extent.
#[derive(Debug, Clone)]
pub struct UpConv<E> {
    pub weight: Param<E>,
    pub bias: Param<E>,
}

impl<E: Element> UpConv<E> {
    pub fn new(f: &mut ParamFactory<'_>, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            weight: f.kaiming(format!("{name}.weight"), &[cin, cout, 2, 2, 2], cin),
            bias: f.constant(format!("{name}.bias"), &[cout], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let w = self.weight.on(tape);
        let b = self.bias.on(tape);
        Ok(tape.transposed_conv3(x, w, Some(b), [2, 2, 2])?)
    }

    pub fn params(&self) -> [&Param<E>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<E>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}
