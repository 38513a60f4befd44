use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ModelConfig;
use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    XavierUniform,
    Zeros,
    Ones,
    Normal { std: f64 },
}

fn linear(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, fan_in: usize, fan_out: usize) {
    out.push((format!("{name}.w"), vec![fan_in, fan_out], Init::XavierUniform));
    out.push((format!("{name}.b"), vec![fan_out], Init::Zeros));
}

fn norm(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize) {
    out.push((format!("{name}.g"), vec![d], Init::Ones));
    out.push((format!("{name}.b"), vec![d], Init::Zeros));
}

fn attention(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        linear(out, &format!("{name}.{p}"), d, d);
    }
}

fn feedforward(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize, f: usize) {
    linear(out, &format!("{name}.1"), d, f);
    linear(out, &format!("{name}.2"), f, d);
}

/// Every parameter's name, shape and initializer. A pure function of the
/// config, so two models built from one config always line up.
pub fn param_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.model_dim;
    let f = config.feedforward_dim;
    let mut out = Vec::new();
    linear(&mut out, "enc.in", config.feature_dim, d);
    norm(&mut out, "enc.in.ln", d);
    for l in 0..config.num_encoder_layers {
        attention(&mut out, &format!("enc.{l}.attn"), d);
        if config.num_memory_slots > 0 {
            let std = 1.0 / (d as f64).sqrt();
            for kv in ["k", "v"] {
                out.push((
                    format!("enc.{l}.mem.{kv}"),
                    vec![config.num_memory_slots, d],
                    Init::Normal { std },
                ));
            }
        }
        norm(&mut out, &format!("enc.{l}.ln1"), d);
        feedforward(&mut out, &format!("enc.{l}.ff"), d, f);
        norm(&mut out, &format!("enc.{l}.ln2"), d);
    }
    out.push(("dec.embed".to_string(), vec![config.vocab_size, d], Init::XavierUniform));
    for l in 0..config.num_decoder_layers {
        attention(&mut out, &format!("dec.{l}.self"), d);
        norm(&mut out, &format!("dec.{l}.ln1"), d);
        attention(&mut out, &format!("dec.{l}.cross"), d);
        if config.mesh {
            for e in 0..config.num_encoder_layers {
                linear(&mut out, &format!("dec.{l}.gate.{e}"), d, d);
            }
        }
        norm(&mut out, &format!("dec.{l}.ln2"), d);
        feedforward(&mut out, &format!("dec.{l}.ff"), d, f);
        norm(&mut out, &format!("dec.{l}.ln3"), d);
    }
    linear(&mut out, "dec.out", d, config.vocab_size);
    out
}

/// Named parameter set of one captioning network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Real> ModelParams<T> {
    /// Seeded initialization, drawn in sorted-name order.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layout = param_layout(config);
        layout.sort_by(|a, b| a.0.cmp(&b.0));
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in layout {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::XavierUniform => {
                    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..n).map(|_| T::of(rng.random_range(-a..a))).collect()
                }
                Init::Normal { std } => (0..n)
                    .map(|_| T::of(rng.sample::<f64, _>(StandardNormal) * std))
                    .collect(),
            };
            tensors.insert(name, Arc::new(Tensor::new(shape, data)?));
        }
        Ok(ModelParams { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        ModelParams {
            tensors: tensors.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        }
    }

    /// Checks names and shapes against the layout of `config`.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let layout = param_layout(config);
        if layout.len() != self.tensors.len() {
            return Err(Error::Data(format!(
                "parameter set has {} tensors, config expects {}",
                self.tensors.len(),
                layout.len()
            )));
        }
        for (name, shape, _) in layout {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Data(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Data(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor<T>>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<Tensor<T>>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k, Arc::make_mut(v)))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// True when both sets have the same names with the same shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }

    pub fn insert(&mut self, name: String, value: Tensor<T>) {
        self.tensors.insert(name, Arc::new(value));
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }

    /// Flattened values in name order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.values().flat_map(|t| t.data().iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_config_determined() {
        let cfg = ModelConfig::default();
        let a = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let b = ModelParams::<f64>::init(&cfg, 2).unwrap();
        assert!(a.same_layout(&b));
        assert_ne!(a, b);
        a.check_layout(&cfg).unwrap();
        assert_eq!(a, ModelParams::<f64>::init(&cfg, 1).unwrap());
    }

    #[test]
    fn slots_and_gates_follow_config() {
        let cfg = ModelConfig {
            num_memory_slots: 0,
            ..ModelConfig::default()
        };
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        assert!(p.get("enc.0.mem.k").is_none());
        assert!(p.get("dec.0.gate.0.w").is_none());

        let mesh = ModelConfig {
            mesh: true,
            ..ModelConfig::default()
        };
        let p = ModelParams::<f32>::init(&mesh, 0).unwrap();
        assert_eq!(p.get("enc.1.mem.v").unwrap().shape(), &[8, 64]);
        assert_eq!(p.get("dec.1.gate.1.w").unwrap().shape(), &[64, 64]);
        assert!(p.check_layout(&cfg).is_err());
    }
}
