//! Parameter storage, layer building blocks and the Adam optimizer.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

/// Named, ordered parameter tensors of one network.
///
/// Each set gets a process-unique id so a [`Graph`] can tell identical
/// parameter indices of different networks apart.
#[derive(Debug)]
pub struct ParamSet {
    uid: u64,
    prefix: String,
    names: Vec<String>,
    values: Vec<Tensor>,
    frozen: bool,
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            prefix: self.prefix.clone(),
            names: self.names.clone(),
            values: self.values.clone(),
            frozen: self.frozen,
        }
    }
}

impl ParamSet {
    pub fn new(prefix: &str) -> Self {
        Self {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            prefix: prefix.to_string(),
            names: Vec::new(),
            values: Vec::new(),
            frozen: false,
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> usize {
        let full = format!("{}.{}", self.prefix, name);
        assert!(!self.names.contains(&full), "duplicate parameter {full}");
        self.names.push(full);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.values[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Named copies of all tensors, for checkpointing.
    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    /// Overwrite values from a named map; every parameter must be present with a matching shape.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>) -> crate::Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = named
                .get(name)
                .ok_or_else(|| crate::Error::State(format!("missing parameter {name}")))?;
            if src.shape() != value.shape() {
                return Err(crate::Error::Shape(format!(
                    "parameter {name}: stored {:?}, expected {:?}",
                    src.shape(),
                    value.shape()
                )));
            }
            *value = src.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw bits of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            h.update(n.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// Fully connected layer `y = x W + b` on `[n, in]` rows.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// He-style init scaled by `gain / sqrt(fan_in)`.
    pub fn new(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let w = ps.add(&format!("{name}.w"), normal_tensor(rng, &[fan_in, fan_out], gain / (fan_in as f64).sqrt()));
        let b = ps.add(&format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    /// Layer with weights and bias fixed to the given constants (zero-init heads).
    pub fn constant(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, w: f64, b: f64) -> Self {
        let wi = ps.add(&format!("{name}.w"), Tensor::full(&[fan_in, fan_out], w));
        let bi = ps.add(&format!("{name}.b"), Tensor::full(&[fan_out], b));
        Self { w: wi, b: bi, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// 2-D convolution layer over `[C, H, W]` images.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let w = ps.add(&format!("{name}.w"), normal_tensor(rng, &[out_ch, in_ch, kernel, kernel], gain / fan_in.sqrt()));
        let b = ps.add(&format!("{name}.b"), Tensor::zeros(&[out_ch]));
        Self { w, b, in_ch, out_ch, kernel, stride, pad: kernel / 2 }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(ps: &ParamSet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: (0..ps.len()).map(|i| Tensor::zeros(ps.value(i).shape())).collect(),
            v: (0..ps.len()).map(|i| Tensor::zeros(ps.value(i).shape())).collect(),
        }
    }

    pub fn step(&mut self, ps: &mut ParamSet, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), ps.len(), "gradient count does not match parameter count");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = ps.value_mut(i);
            for (((p, m), v), g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Moment buffers as named tensors (`<param>.adam_m`, `<param>.adam_v`).
    pub fn to_named(&self, ps: &ParamSet) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for i in 0..ps.len() {
            out.insert(format!("{}.adam_m", ps.name(i)), self.m[i].clone());
            out.insert(format!("{}.adam_v", ps.name(i)), self.v[i].clone());
        }
        out
    }

    pub fn load_named(&mut self, ps: &ParamSet, named: &BTreeMap<String, Tensor>, step: u64) -> crate::Result<()> {
        for i in 0..ps.len() {
            let m = named.get(&format!("{}.adam_m", ps.name(i)));
            let v = named.get(&format!("{}.adam_v", ps.name(i)));
            match (m, v) {
                (Some(m), Some(v)) => {
                    self.m[i] = m.clone();
                    self.v[i] = v.clone();
                }
                _ => return Err(crate::Error::State(format!("missing optimizer state for {}", ps.name(i)))),
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Sum of squared gradient entries, for logging.
pub fn grad_norm(grads: &[Option<Tensor>]) -> f64 {
    grads.iter().flatten().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut ps = ParamSet::new("q");
        let i = ps.add("x", Tensor::new(&[2], vec![3.0, -2.0]));
        let mut opt = Adam::new(&ps, 0.1);
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&ps, i);
            let s = g.square(x);
            let l = g.sum(s);
            let grads = g.backward(l);
            let pg = g.param_grads(&grads, &ps);
            opt.step(&mut ps, &pg);
        }
        assert!(ps.value(i).max_abs() < 1e-2);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new("n");
        Linear::new(&mut ps, "l", 3, 2, 1.0, &mut rng);
        let before = ps.checksum();
        assert_eq!(before, ps.clone().checksum());
        ps.value_mut(0).data_mut()[0] += 1e-12;
        assert_ne!(before, ps.checksum());
    }
}
