//! Named parameter tensors, seeded initialization, and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{AteError, Result};
use crate::rng::{fnv1a, rng_from_seed, splitmix64};
use crate::tensor::Tensor;

/// How a parameter is filled at registration time.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Glorot/Xavier uniform with limit sqrt(6/(fan_in+fan_out)).
    Glorot,
    /// Zero-mean normal with the given std.
    Normal(f64),
}

/// A set of named parameter tensors. Shapes are fixed at registration and
/// values are a pure function of (seed, name, init), so re-initializing with
/// the same seed reproduces every tensor bit-for-bit regardless of
/// registration order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { seed, params: BTreeMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(AteError::Usage(format!("parameter `{name}` already registered")));
        }
        let mut rng = rng_from_seed(splitmix64(self.seed ^ fnv1a(name)));
        let mut t = Tensor::zeros(rows, cols);
        match init {
            Init::Zeros => {}
            Init::Ones => {
                for v in t.data_mut() {
                    *v = 1.0;
                }
            }
            Init::Glorot => {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                for v in t.data_mut() {
                    *v = rng.gen_range(-limit..limit);
                }
            }
            Init::Normal(std) => {
                for v in t.data_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = z * std;
                }
            }
        }
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| AteError::Usage(format!("unknown parameter `{name}`")))
    }

    /// Replaces a parameter's values; the shape is immutable.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| AteError::Usage(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(AteError::dim(
                "param_set",
                format!("`{name}` is {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// FNV-1a over all parameter bits in name order; used to verify that
    /// frozen parameters stayed untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |byte: u8| {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (name, t) in &self.params {
            for b in name.as_bytes() {
                mix(*b);
            }
            for v in t.data() {
                for b in v.to_le_bytes() {
                    mix(b);
                }
            }
        }
        h
    }

    pub(crate) fn nudge(&mut self, name: &str, index: usize, delta: f64) {
        let t = self.params.get_mut(name).expect("param exists");
        t.data_mut()[index] += delta;
    }
}

/// Adam with decoupled weight decay. Moment tensors are allocated lazily per
/// parameter; iteration order is the store's name order, so updates are
/// deterministic.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update. Parameters without a gradient entry get a zero
    /// gradient (they still experience weight decay).
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let shape = store.get(&name)?.shape();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(shape.0, shape.1));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(shape.0, shape.1));
            let zero;
            let g = match grads.get(&name) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(shape.0, shape.1);
                    &zero
                }
            };
            let mut p = store.get(&name)?.clone();
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let pi = p.data()[i];
                p.data_mut()[i] =
                    pi - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * pi);
            }
            store.set(&name, p)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_reproduces_bit_for_bit() {
        let mut a = ParamStore::new(11);
        a.register("w", 4, 3, Init::Glorot).unwrap();
        a.register("b", 1, 3, Init::Normal(0.02)).unwrap();
        let mut b = ParamStore::new(11);
        // reversed registration order must not matter
        b.register("b", 1, 3, Init::Normal(0.02)).unwrap();
        b.register("w", 4, 3, Init::Glorot).unwrap();
        assert_eq!(a.get("w").unwrap(), b.get("w").unwrap());
        assert_eq!(a.get("b").unwrap(), b.get("b").unwrap());
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut s = ParamStore::new(0);
        s.register("w", 2, 2, Init::Zeros).unwrap();
        assert!(s.register("w", 2, 2, Init::Zeros).is_err());
    }

    #[test]
    fn shape_is_immutable() {
        let mut s = ParamStore::new(0);
        s.register("w", 2, 2, Init::Zeros).unwrap();
        assert!(s.set("w", Tensor::zeros(3, 2)).is_err());
        assert!(s.set("w", Tensor::zeros(2, 2)).is_ok());
    }
}
