//! Parameter storage, layer primitives, and the Adam optimizer.
//!
//! Parameters live outside the tape in a [`Params`] store with stable
//! insertion order. Each training step binds them onto a fresh tape
//! ([`bind_params`]), runs forward/backward, harvests gradients by name,
//! and applies an optimizer update. Names absent from the trainable set are
//! bound without gradient tracking and never updated, which makes layer
//! freezing bit-exact by construction.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::PipelineRng;
use crate::tape::{Tape, Var};

/// Shape + data of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorValue {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorValue {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        TensorValue {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        TensorValue {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut PipelineRng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        TensorValue {
            shape: shape.to_vec(),
            data,
        }
    }
}

/// Ordered name -> tensor map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<TensorValue>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: TensorValue) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> &TensorValue {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.values[idx]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut TensorValue {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.values[idx]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorValue)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Tape handles for one bound parameter store.
pub struct Binding {
    vars: HashMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}

/// Lifts every parameter onto the tape. Names for which `trainable`
/// returns false become constants (no gradient tracking).
pub fn bind_params(tape: &mut Tape, params: &Params, trainable: impl Fn(&str) -> bool) -> Binding {
    let mut vars = HashMap::new();
    for (name, tv) in params.iter() {
        let var = if trainable(name) {
            tape.var(&tv.shape, tv.data.clone())
        } else {
            tape.constant(&tv.shape, tv.data.clone())
        };
        vars.insert(name.to_string(), var);
    }
    Binding { vars }
}

/// Reads gradients for every trainable bound parameter after `backward`.
pub fn collect_grads(tape: &Tape, params: &Params, binding: &Binding) -> HashMap<String, Vec<f64>> {
    let mut out = HashMap::new();
    for name in params.names() {
        if let Some(g) = tape.grad(binding.var(name)) {
            out.insert(name.to_string(), g.to_vec());
        }
    }
    out
}

/// Adam optimizer with per-parameter first/second moment state.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: HashMap<String, Vec<f64>>,
    pub v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient. Parameters
    /// without gradients are untouched (frozen layers stay bit-identical).
    pub fn step(&mut self, params: &mut Params, grads: &HashMap<String, Vec<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = params.names().map(str::to_string) .collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let tv = params.get_mut(&name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                tv.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ---- layers ----

/// Fully connected layer acting on row matrices `[n, in] -> [n, out]`.
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn init(&self, params: &mut Params, std: f64, bias: f64, rng: &mut PipelineRng) {
        params.insert(
            &format!("{}.weight", self.name),
            TensorValue::randn(&[self.in_dim, self.out_dim], std, rng),
        );
        params.insert(
            &format!("{}.bias", self.name),
            TensorValue::full(&[self.out_dim], bias),
        );
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Var {
        let w = bind.var(&format!("{}.weight", self.name));
        let b = bind.var(&format!("{}.bias", self.name));
        let y = tape.matmul(x, w);
        tape.add_axis1(y, b)
    }

    /// Plain forward over raw data, bypassing the tape.
    pub fn forward_plain(&self, params: &Params, x: &[f64], n: usize) -> Vec<f64> {
        let w = params.get(&format!("{}.weight", self.name));
        let b = params.get(&format!("{}.bias", self.name));
        let (k, m) = (self.in_dim, self.out_dim);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for kk in 0..k {
                let a = x[i * k + kk];
                if a != 0.0 {
                    for j in 0..m {
                        out[i * m + j] += a * w.data[kk * m + j];
                    }
                }
            }
            for j in 0..m {
                out[i * m + j] += b.data[j];
            }
        }
        out
    }
}

/// Convolution layer `[cin, h, w] -> [cout, h', w']`.
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn init(&self, params: &mut Params, std: f64, rng: &mut PipelineRng) {
        params.insert(
            &format!("{}.weight", self.name),
            TensorValue::randn(&[self.cout, self.cin, self.k, self.k], std, rng),
        );
        params.insert(
            &format!("{}.bias", self.name),
            TensorValue::zeros(&[self.cout]),
        );
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Var {
        let w = bind.var(&format!("{}.weight", self.name));
        let b = bind.var(&format!("{}.bias", self.name));
        let y = tape.conv2d(x, w, self.stride, self.pad);
        tape.add_axis0(y, b)
    }
}

/// Transposed convolution layer (weight `[cin, cout, k, k]`).
pub struct ConvTranspose2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvTranspose2d {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn init(&self, params: &mut Params, std: f64, rng: &mut PipelineRng) {
        params.insert(
            &format!("{}.weight", self.name),
            TensorValue::randn(&[self.cin, self.cout, self.k, self.k], std, rng),
        );
        params.insert(
            &format!("{}.bias", self.name),
            TensorValue::zeros(&[self.cout]),
        );
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Var {
        let w = bind.var(&format!("{}.weight", self.name));
        let b = bind.var(&format!("{}.bias", self.name));
        let y = tape.conv_transpose2d(x, w, self.stride, self.pad);
        tape.add_axis0(y, b)
    }
}

/// Instance normalization with learned affine, composed from primitives.
pub struct InstanceNorm {
    pub name: String,
    pub channels: usize,
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

impl InstanceNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        InstanceNorm {
            name: name.into(),
            channels,
        }
    }

    pub fn init(&self, params: &mut Params) {
        params.insert(
            &format!("{}.gamma", self.name),
            TensorValue::full(&[self.channels], 1.0),
        );
        params.insert(
            &format!("{}.beta", self.name),
            TensorValue::zeros(&[self.channels]),
        );
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Var {
        let gamma = bind.var(&format!("{}.gamma", self.name));
        let beta = bind.var(&format!("{}.beta", self.name));
        let mean = tape.mean_hw(x);
        let neg_mean = tape.neg(mean);
        let centered = tape.add_axis0(x, neg_mean);
        let sq = tape.sqr(centered);
        let var = tape.mean_hw(sq);
        let var_eps = tape.add_scalar(var, INSTANCE_NORM_EPS);
        let std = tape.sqrt(var_eps);
        let inv_std = tape.recip(std);
        let normed = tape.scale_axis0(centered, inv_std);
        let scaled = tape.scale_axis0(normed, gamma);
        tape.add_axis0(scaled, beta)
    }
}

/// L2-normalizes the rows of an `[n, d]` matrix.
pub fn normalize_rows(tape: &mut Tape, x: Var, eps: f64) -> Var {
    let sq = tape.sqr(x);
    let sums = tape.sum_axis1(sq);
    let sums = tape.add_scalar(sums, eps);
    let norms = tape.sqrt(sums);
    let inv = tape.recip(norms);
    tape.scale_axis0(x, inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn adam_moves_only_supplied_grads() {
        let mut params = Params::new();
        params.insert("a", TensorValue::full(&[2], 1.0));
        params.insert("b", TensorValue::full(&[2], 1.0));
        let before_b = params.get("b").data.clone();
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        let mut grads = HashMap::new();
        grads.insert("a".to_string(), vec![1.0, -1.0]);
        opt.step(&mut params, &grads);
        assert_ne!(params.get("a").data, vec![1.0, 1.0]);
        assert_eq!(params.get("b").data, before_b);
    }

    #[test]
    fn linear_plain_matches_tape() {
        let mut rng = seeded_rng(11);
        let mut params = Params::new();
        let lin = Linear::new("l", 3, 4);
        lin.init(&mut params, 0.3, 0.1, &mut rng);
        let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.25 - 0.5).collect();

        let mut tape = Tape::new();
        let bind = bind_params(&mut tape, &params, |_| false);
        let xv = tape.constant(&[2, 3], x.clone());
        let y = lin.forward(&mut tape, &bind, xv);
        let tape_out = tape.value(y).to_vec();

        let plain = lin.forward_plain(&params, &x, 2);
        for (a, b) in tape_out.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let mut params = Params::new();
        let norm = InstanceNorm::new("n", 2);
        norm.init(&mut params);
        let mut tape = Tape::new();
        let bind = bind_params(&mut tape, &params, |_| false);
        let data: Vec<f64> = (0..2 * 4 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(&[2, 4, 4], data);
        let y = norm.forward(&mut tape, &bind, x);
        let v = tape.value(y);
        for c in 0..2 {
            let slice = &v[c * 16..(c + 1) * 16];
            let mean: f64 = slice.iter().sum::<f64>() / 16.0;
            let var: f64 = slice.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
