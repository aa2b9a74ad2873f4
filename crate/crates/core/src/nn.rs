//! Small helpers shared by the networks.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use scanmask_autodiff::{Graph, ParamSet, Tensor, Var};

use crate::error::Result;

pub const LEAKY_SLOPE: f64 = 0.01;

/// Registers `{name}.w` `[out, in, k, k]` (He-normal) and a zero `{name}.b`.
pub fn add_conv(
    params: &mut ParamSet<f64>,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut impl Rng,
) {
    let fan_in = (c_in * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
    let data = (0..c_out * c_in * k * k)
        .map(|_| normal.sample(rng))
        .collect();
    params.add(
        format!("{name}.w"),
        Tensor::new(vec![c_out, c_in, k, k], data).expect("dims"),
    );
    params.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
}

/// Registers a zero-initialized conv layer.
pub fn add_zero_conv(params: &mut ParamSet<f64>, name: &str, c_in: usize, c_out: usize, k: usize) {
    params.add(format!("{name}.w"), Tensor::zeros(&[c_out, c_in, k, k]));
    params.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
}

/// Looks up bound variables by parameter name.
pub struct Bound<'a> {
    pub params: &'a ParamSet<f64>,
    pub vars: &'a [Var],
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not registered"));
        self.vars[i]
    }

    /// Shape-preserving conv plus bias, optionally followed by leaky relu.
    pub fn conv(&self, g: &mut Graph<f64>, name: &str, x: Var, act: bool) -> Result<Var> {
        let w = self.var(&format!("{name}.w"));
        let b = self.var(&format!("{name}.b"));
        let k = g.value(w).shape()[2];
        let y = g.conv2d(x, w, 1, (k - 1) / 2)?;
        let y = g.add_channel_bias(y, b)?;
        Ok(if act { g.leaky_relu(y, LEAKY_SLOPE) } else { y })
    }
}
