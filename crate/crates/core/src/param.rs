use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::RwLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named learnable tensor.
///
/// The current value is a gradient-accumulating leaf. Updating the value
/// swaps in a fresh leaf, so graphs recorded before the update keep their
/// own copy and the new leaf starts with no gradient.
#[derive(Debug)]
pub struct Parameter {
    name: String,
    value: RwLock<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            value: RwLock::new(Tensor::leaf(data, shape)?),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The leaf to use in forward computations.
    pub fn tensor(&self) -> Tensor {
        self.value.read().expect("parameter lock poisoned").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tensor().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tensor().numel()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tensor().to_vec()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tensor().grad()
    }

    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let shape = self.shape();
        let fresh = Tensor::leaf(data, &shape)?;
        *self.value.write().expect("parameter lock poisoned") = fresh;
        Ok(())
    }

    pub fn fill(&self, value: f64) {
        let n = self.numel();
        self.set_data(vec![value; n]).expect("same shape");
    }

    pub fn zero_grad(&self) {
        self.tensor().zero_grad();
    }
}

/// Anything owning parameters.
pub trait Module {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter));

    fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p));
        out
    }

    fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    fn zero_grad(&self) {
        self.visit_params(&mut |p| p.zero_grad());
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// U(−1/√fan_in, 1/√fan_in)
    FanIn(usize),
    Uniform(f64, f64),
}

/// Creates uniquely named parameters under a dotted path prefix, drawing
/// initial values from one seeded stream.
#[derive(Clone)]
pub struct ParamFactory {
    prefix: String,
    rng: Rc<RefCell<ChaCha8Rng>>,
    names: Rc<RefCell<HashSet<String>>>,
}

impl ParamFactory {
    pub fn new(seed: u64) -> Self {
        Self {
            prefix: String::new(),
            rng: Rc::new(RefCell::new(ChaCha8Rng::seed_from_u64(seed))),
            names: Rc::new(RefCell::new(HashSet::new())),
        }
    }

    /// Child factory for a sub-module.
    pub fn pp(&self, name: &str) -> Self {
        Self {
            prefix: self.full_name(name),
            rng: Rc::clone(&self.rng),
            names: Rc::clone(&self.names),
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Parameter> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(v) => vec![v; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                self.uniform(n, -bound, bound)
            }
            Init::Uniform(lo, hi) => self.uniform(n, lo, hi),
        };
        self.param_from(name, data, shape)
    }

    pub fn param_from(&self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Parameter> {
        let full = self.full_name(name);
        if !self.names.borrow_mut().insert(full.clone()) {
            return Err(Error::Config(format!("duplicate parameter name {full}")));
        }
        Parameter::new(full, data, shape)
    }

    pub fn uniform(&self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut rng = self.rng.borrow_mut();
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_prefixed() {
        let f = ParamFactory::new(0);
        let blk = f.pp("block0");
        let p = blk.param("w", &[2], Init::Zeros).unwrap();
        assert_eq!(p.name(), "block0.w");
        assert!(blk.param("w", &[2], Init::Zeros).is_err());
    }

    #[test]
    fn set_data_resets_gradient() {
        let p = Parameter::new("w", vec![1.0], &[1]).unwrap();
        p.tensor().square().sum_all().backward().unwrap();
        assert_eq!(p.grad(), Some(vec![2.0]));
        p.set_data(vec![3.0]).unwrap();
        assert!(p.grad().is_none());
    }
}
