//! Thin layer wrappers that own parameter handles inside a [`ParamStore`].

use rand::Rng;
use restore_autodiff::{Binding, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;

fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (3.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Square-kernel convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let w = init_uniform(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng);
        Self {
            w: store.add(format!("{name}.weight"), w),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            pad,
        }
    }

    /// `kernel × kernel` convolution that preserves spatial size.
    pub fn same<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, cin, cout, kernel, 1, kernel / 2, rng)
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        Ok(g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)?)
    }
}

/// Transposed convolution (kernel 4, stride 2, pad 1) doubling spatial size.
#[derive(Debug, Clone)]
pub struct Upconv {
    w: ParamId,
    b: ParamId,
}

impl Upconv {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        // Each output pixel receives 4 taps per input channel.
        let w = init_uniform(&[cin, cout, 4, 4], cin * 4, rng);
        Self {
            w: store.add(format!("{name}.weight"), w),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        Ok(g.conv_transpose2d(x, p.var(self.w), Some(p.var(self.b)), 2, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add(format!("{name}.weight"), init_uniform(&[fan_out, fan_in], fan_in, rng)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        Ok(g.linear(x, p.var(self.w), Some(p.var(self.b)))?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        Ok(g.group_norm(x, p.var(self.gamma), p.var(self.beta), self.groups, 1e-5)?)
    }
}
