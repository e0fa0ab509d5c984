use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Named parameters with an optional shape-isomorphic gradient map.
///
/// Keys are hierarchical dot-separated paths such as
/// `crossmodal.k2.fuse.msa.wq`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTree {
    params: BTreeMap<String, Tensor>,
    grads: Option<BTreeMap<String, Tensor>>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, t);
        self.grads = None;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn grads(&self) -> Option<&BTreeMap<String, Tensor>> {
        self.grads.as_ref()
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.as_ref()?.get(name)
    }

    pub fn zero_grads(&mut self) {
        self.grads = Some(
            self.params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        );
    }

    /// Adds `scale * g` for every named gradient; unknown names are an error.
    pub fn accumulate(&mut self, grads: &BTreeMap<String, Tensor>, scale: f64) -> Result<()> {
        if self.grads.is_none() {
            self.zero_grads();
        }
        let acc = self.grads.as_mut().expect("gradient map");
        for (k, g) in grads {
            let dst = acc
                .get_mut(k)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {k}")))?;
            if dst.len() != g.len() {
                return Err(dim_err!("gradient {k}: {:?} vs {:?}", dst.shape(), g.shape()));
            }
            for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                *d += scale * s;
            }
        }
        Ok(())
    }

    pub fn take_grads(&mut self) -> Option<BTreeMap<String, Tensor>> {
        self.grads.take()
    }

    /// Rounds every parameter through `f32`.
    pub fn quantize_f32(&mut self) {
        for t in self.params.values_mut() {
            t.quantize_f32();
        }
    }
}

/// Seeded parameter construction helpers.
pub struct Init<'a, R: Rng> {
    pub tree: &'a mut ParamTree,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    /// Xavier-normal weight of shape `[fan_in, fan_out]`.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::randn(&[fan_in, fan_out], std, self.rng);
        self.tree.insert(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let t = Tensor::randn(shape, std, self.rng);
        self.tree.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.tree.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.tree.insert(name, Tensor::full(shape, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_keys_rejected_and_grads_isomorphic() {
        let mut p = ParamTree::new();
        p.insert("a.w", Tensor::zeros(&[2, 3])).unwrap();
        assert!(p.insert("a.w", Tensor::zeros(&[1])).is_err());
        p.insert("a.b", Tensor::zeros(&[1, 3])).unwrap();
        p.zero_grads();
        for (k, v) in p.iter() {
            assert_eq!(p.grad(k).unwrap().shape(), v.shape());
        }
        let mut g = BTreeMap::new();
        g.insert("a.b".to_string(), Tensor::full(&[1, 3], 2.0));
        p.accumulate(&g, 0.5).unwrap();
        assert_eq!(p.grad("a.b").unwrap().data(), &[1.0, 1.0, 1.0]);
        g.insert("nope".to_string(), Tensor::zeros(&[1]));
        assert!(p.accumulate(&g, 1.0).is_err());
    }
}
