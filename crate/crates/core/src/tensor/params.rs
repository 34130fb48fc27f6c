use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{mismatch, ParamGrads, Real, Result, Tensor, TensorError};

pub const PARAM_FORMAT_VERSION: u32 = 1;

/// Initialization rule for one parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in ±√(6/(fan_in+fan_out)) over a `(fan_in, fan_out)` matrix.
    Xavier,
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }
}

/// Named trainable tensors in deterministic (lexicographic) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRegistry<F> {
    entries: BTreeMap<String, Tensor<F>>,
    version: u32,
}

impl<F: Real> Default for ParamRegistry<F> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
            version: PARAM_FORMAT_VERSION,
        }
    }
}

impl<F: Real> ParamRegistry<F> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws every parameter from its [`Init`] rule in spec order.
    pub fn initialize<R: Rng>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut reg = Self::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f64> = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).map_err(|e| TensorError::Invalid {
                        op: "init",
                        msg: e.to_string(),
                    })?;
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
                Init::Xavier => {
                    if spec.shape.len() != 2 {
                        return Err(mismatch("xavier init", &spec.shape, &[2]));
                    }
                    let bound = (6.0 / (spec.shape[0] + spec.shape[1]) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| {
                        TensorError::Invalid {
                            op: "init",
                            msg: e.to_string(),
                        }
                    })?;
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
            };
            let data = data.into_iter().map(F::lit).collect();
            reg.insert(&spec.name, Tensor::new(spec.shape.clone(), data)?)?;
        }
        Ok(reg)
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<F>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(TensorError::Invalid {
                op: "register",
                msg: format!("duplicate parameter `{name}`"),
            });
        }
        self.entries.insert(name.to_string(), tensor.with_grad());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.entries.get_mut(name)
    }

    pub(crate) fn get_entry(&self, name: &str) -> Option<(&str, &Tensor<F>)> {
        self.entries.get_key_value(name).map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds `grads` into each named tensor's gradient buffer.
    pub fn accumulate_grads(&mut self, grads: &ParamGrads<F>) -> Result<()> {
        for (name, g) in grads {
            let t = self
                .entries
                .get_mut(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if t.len() != g.len() {
                return Err(mismatch("accumulate_grads", t.shape(), &[g.len()]));
            }
            t.accumulate_grad(g);
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParamRegistry<G> {
        ParamRegistry {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            version: self.version,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_respects_bound_and_seed() {
        let specs = [
            ParamSpec::new("a.w", vec![4, 6], Init::Xavier),
            ParamSpec::new("a.b", vec![6], Init::Zeros),
        ];
        let r1 = ParamRegistry::<f64>::initialize(&specs, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let r2 = ParamRegistry::<f64>::initialize(&specs, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(r1, r2);
        let bound = (6.0f64 / 10.0).sqrt();
        assert!(r1.get("a.w").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(r1.get("a.b").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(r1.num_scalars(), 30);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut reg = ParamRegistry::<f64>::new();
        reg.insert("x", Tensor::zeros(vec![2])).unwrap();
        assert!(reg.insert("x", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn accumulation_is_additive() {
        let mut reg = ParamRegistry::<f64>::new();
        reg.insert("x", Tensor::zeros(vec![2])).unwrap();
        let g: ParamGrads<f64> = [("x".to_string(), vec![1.0, 2.0])].into();
        reg.accumulate_grads(&g).unwrap();
        reg.accumulate_grads(&g).unwrap();
        assert_eq!(reg.get("x").unwrap().grad().unwrap(), &[2.0, 4.0]);
    }
}
