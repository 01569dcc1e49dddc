//! Parameter storage, layer building blocks, Adam, and gradient checking.
//!
//! Parameters live in a [`ParamStore`] keyed by name; layers hold slot indices
//! and fetch their tensors through the tape at forward time, so one store can
//! be shared across agents and batch items while gradients accumulate
//! naturally.

use crate::error::{Error, Result};
use crate::tensor::{Arr, Grads, Tape, Var};
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Named parameter arrays plus the decay flag used by the optimizer.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arr>,
    no_decay: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Arr, no_decay: bool) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.no_decay.push(no_decay);
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, slot: usize) -> &Arr {
        &self.values[slot]
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Arr {
        &mut self.values[slot]
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn no_decay(&self, slot: usize) -> bool {
        self.no_decay[slot]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Serialize as (name, shape, f64-LE data) records.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for i in 0..self.len() {
            let name = self.names[i].as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.push(self.no_decay[i] as u8);
            let shape = self.values[i].shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in self.values[i].iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > data.len() {
                return Err(Error::Checkpoint("truncated parameter blob".into()));
            }
            let s = &data[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let nlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("bad parameter name".into()))?;
            let nd = take(&mut pos, 1)?[0] != 0;
            let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let mut vals = Vec::with_capacity(n);
            for _ in 0..n {
                vals.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            let arr = Arr::from_shape_vec(IxDyn(&shape), vals)
                .map_err(|e| Error::Checkpoint(format!("bad parameter shape: {e}")))?;
            store.add(&name, arr, nd);
        }
        Ok(store)
    }
}

pub fn xavier_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Arr {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Arr::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-limit..limit))
}

/// Dense layer computing `x @ w + b` on `[m, in]` inputs.
#[derive(Clone, Copy)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = ps.add(&format!("{name}.w"), xavier_uniform(rng, &[in_dim, out_dim], in_dim, out_dim), false);
        let b = ps.add(&format!("{name}.b"), Arr::zeros(IxDyn(&[out_dim])), true);
        Self { w, b: Some(b), in_dim, out_dim }
    }

    pub fn new_no_bias(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = ps.add(&format!("{name}.w"), xavier_uniform(rng, &[in_dim, out_dim], in_dim, out_dim), false);
        Self { w, b: None, in_dim, out_dim }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Var {
        let w = t.param(self.w, ps.value(self.w));
        let y = t.matmul(x, w);
        match self.b {
            Some(b) => {
                let bv = t.param(b, ps.value(b));
                t.add(y, bv)
            }
            None => y,
        }
    }
}

/// 3x3-style convolution on `[cin, h, w]` maps.
#[derive(Clone, Copy)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * k * k;
        let fan_out = cout * k * k;
        let w = ps.add(&format!("{name}.w"), xavier_uniform(rng, &[cout, cin, k, k], fan_in, fan_out), false);
        let b = ps.add(&format!("{name}.b"), Arr::zeros(IxDyn(&[cout])), true);
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Var {
        let w = t.param(self.w, ps.value(self.w));
        let b = t.param(self.b, ps.value(self.b));
        t.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Transposed convolution with kernel = stride: each input pixel expands to an
/// s x s patch, implemented as a pointwise linear map plus pixel shuffle.
#[derive(Clone, Copy)]
pub struct ConvTranspose2d {
    lin: Linear,
    pub stride: usize,
    cout: usize,
}

impl ConvTranspose2d {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let lin = Linear::new(ps, rng, name, cin, cout * stride * stride);
        Self { lin, stride, cout }
    }

    /// `[cin, h, w] -> [cout, h*s, w*s]`
    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Var {
        let s = self.stride;
        let (h, w) = (t.shape(x)[1], t.shape(x)[2]);
        let xp = t.permute(x, &[1, 2, 0]);
        let flat = t.reshape(xp, &[h * w, self.lin.in_dim]);
        let y = self.lin.forward(t, ps, flat);
        let y5 = t.reshape(y, &[h, w, self.cout, s, s]);
        let yp = t.permute(y5, &[2, 0, 3, 1, 4]);
        t.reshape(yp, &[self.cout, h * s, w * s])
    }
}

#[derive(Clone, Copy)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = ps.add(&format!("{name}.gamma"), Arr::ones(IxDyn(&[dim])), true);
        let beta = ps.add(&format!("{name}.beta"), Arr::zeros(IxDyn(&[dim])), true);
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Var {
        let g = t.param(self.gamma, ps.value(self.gamma));
        let b = t.param(self.beta, ps.value(self.beta));
        t.layer_norm(x, g, b, self.eps)
    }
}

/// Two-layer MLP with GELU, expansion ratio fixed at construction.
#[derive(Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, ratio: usize) -> Self {
        let hidden = dim * ratio;
        Self {
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward(&self, t: &mut Tape, ps: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(t, ps, x);
        let h = t.gelu(h);
        self.fc2.forward(t, ps, h)
    }
}

/// Per-slot gradient accumulation across the frames of one optimizer step.
pub struct GradAccum {
    pub grads: Vec<Option<Arr>>,
}

impl GradAccum {
    pub fn new(n_slots: usize) -> Self {
        Self { grads: vec![None; n_slots] }
    }

    pub fn add(&mut self, store: &ParamStore, tape_grads: &Grads) {
        for slot in 0..store.len() {
            if let Some(g) = tape_grads.param(slot) {
                match &mut self.grads[slot] {
                    Some(acc) => *acc += g,
                    slot_g => *slot_g = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g *= c;
        }
    }
}

/// Adam with decoupled weight decay (decay skipped for biases and norms).
pub struct Adam {
    m: Vec<Option<Arr>>,
    v: Vec<Option<Arr>>,
    t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Adam {
    pub fn new(n_slots: usize, weight_decay: f64) -> Self {
        Self {
            m: vec![None; n_slots],
            v: vec![None; n_slots],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccum, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for slot in 0..store.len() {
            let g = match &grads.grads[slot] {
                Some(g) => g,
                None => continue,
            };
            if self.m[slot].is_none() {
                self.m[slot] = Some(Arr::zeros(g.raw_dim()));
                self.v[slot] = Some(Arr::zeros(g.raw_dim()));
            }
            let m = self.m[slot].as_mut().unwrap();
            let v = self.v[slot].as_mut().unwrap();
            ndarray::Zip::from(&mut *m).and(g).for_each(|mi, &gi| {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vi, &gi| {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            });
            let decay = if store.no_decay(slot) { 0.0 } else { self.weight_decay };
            let value = store.value_mut(slot);
            ndarray::Zip::from(&mut *value).and(&*m).and(&*v).for_each(|w, &mi, &vi| {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *w);
            });
        }
    }
}

/// Linear warm-up into cosine annealing; `warmup_frac` of `total` steps ramp up.
pub fn lr_schedule(step: usize, total: usize, base_lr: f64, warmup_frac: f64) -> f64 {
    let warmup = ((total as f64 * warmup_frac).ceil() as usize).max(1);
    if step < warmup {
        base_lr * (step + 1) as f64 / warmup as f64
    } else {
        let t = (step - warmup) as f64 / (total - warmup).max(1) as f64;
        base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Central-difference gradient check for parameters of an arbitrary forward pass.
///
/// `build` must construct the scalar loss from the current store contents.
/// Returns the worst relative error over the probed coordinates.
pub fn grad_check_params(
    store: &mut ParamStore,
    slots: &[usize],
    probes_per_slot: usize,
    rng: &mut ChaCha8Rng,
    build: &mut dyn FnMut(&mut Tape, &ParamStore) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    let grads = tape.backward(loss);

    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for &slot in slots {
        let analytic = match grads.param(slot) {
            Some(g) => g.clone(),
            None => panic!("no gradient reached parameter {}", store.name(slot)),
        };
        let n = store.value(slot).len();
        for _ in 0..probes_per_slot {
            let j = rng.gen_range(0..n);
            let orig = store.value(slot).as_slice().unwrap()[j];
            let mut eval = |x: f64| -> f64 {
                store.value_mut(slot).as_slice_mut().unwrap()[j] = x;
                let mut t = Tape::new();
                let l = build(&mut t, store);
                *t.value(l).iter().next().unwrap()
            };
            let fp = eval(orig + eps);
            let fm = eval(orig - eps);
            store.value_mut(slot).as_slice_mut().unwrap()[j] = orig;
            let num = (fp - fm) / (2.0 * eps);
            let ana = analytic.as_slice().unwrap()[j];
            let rel = (ana - num).abs() / (ana.abs() + num.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}
