//! Named parameter storage, seeded initialization and checkpoints.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dcloss::DcLossParams;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{self, DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// uniform(-a, a), a = sqrt(6 / (fan_in + fan_out))
    Xavier,
    Zeros,
    Constant(f64),
}

/// Fan-in/fan-out of a weight tensor laid out `[out, in, kh, kw]` or `[out, in]`.
fn fans(dims: &[usize]) -> (usize, usize) {
    match dims {
        [o, i, rest @ ..] => {
            let rf: usize = rest.iter().product();
            (i * rf, o * rf)
        }
        [n] => (*n, *n),
        _ => (1, 1),
    }
}

/// Ordered map of named parameter tensors.
///
/// Initial values depend only on the seed and the registration order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    rng: ChaCha8Rng,
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { seed, rng: ChaCha8Rng::seed_from_u64(seed), params: IndexMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(&mut self, name: &str, dims: &[usize], init: Init) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Invalid(format!("parameter {name} registered twice")));
        }
        let t = match init {
            Init::Zeros => Tensor::zeros(dims),
            Init::Constant(c) => Tensor::full(dims, c),
            Init::Xavier => {
                let (fi, fo) = fans(dims);
                let a = (6.0 / (fi + fo) as f64).sqrt();
                let rng = &mut self.rng;
                Tensor::from_fn(dims, |_| rng.random_range(-a..a))
            }
        };
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.dims() != value.dims() {
            return Err(Error::shape("set", format!("{name}: {:?} vs {:?}", slot.dims(), value.dims())));
        }
        *slot = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, v) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                v.data_mut().fill(0.0);
            }
        }
    }

    /// Copies every parameter into `g` as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self.params.iter().map(|(k, v)| (k.clone(), g.param(v.clone()))).collect();
        Bound { vars }
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((a, x), (b, y))| a == b && x.bit_eq(y))
    }
}

/// Graph handles for a bound [`ParamStore`], in registration order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Invalid(format!("unbound parameter {name}")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients in registration order; untouched parameters get zeros.
    pub fn grads(&self, g: &Graph) -> Vec<Vec<f64>> {
        self.vars
            .values()
            .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
            .collect()
    }
}

/// Trained state: network parameters plus the loss parameters.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub dcloss: DcLossParams,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dims: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    seed: u64,
    tensors: Vec<ManifestEntry>,
    dcloss: DcLossParams,
    meta: serde_json::Value,
}

const CHECKPOINT_FORMAT: &str = "efpn-checkpoint";

impl Checkpoint {
    /// Writes `manifest.json` and one `tensors/NNNN.efbt` (f64) per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tdir = dir.join("tensors");
        fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
        let mut entries = Vec::new();
        for (i, (name, t)) in self.params.iter().enumerate() {
            let file = format!("tensors/{i:04}.efbt");
            tensor::write_tensor(&dir.join(&file), t, DType::F64)?;
            entries.push(ManifestEntry { name: name.to_string(), dims: t.dims().to_vec(), file });
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            seed: self.params.seed(),
            tensors: entries,
            dcloss: self.dcloss,
            meta: self.meta.clone(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse(&path, &e))?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema { path, message: format!("unexpected format {:?}", m.format) });
        }
        let mut params = ParamStore::new(m.seed);
        for e in m.tensors {
            let t = tensor::read_tensor(&dir.join(&e.file))?;
            if t.dims() != e.dims.as_slice() {
                return Err(Error::Schema {
                    path: dir.join(&e.file),
                    message: format!("{}: dims {:?} but manifest says {:?}", e.name, t.dims(), e.dims),
                });
            }
            if params.params.insert(e.name.clone(), t).is_some() {
                return Err(Error::Schema { path: path.clone(), message: format!("duplicate {}", e.name) });
            }
        }
        Ok(Checkpoint { params, dcloss: m.dcloss, meta: m.meta })
    }
}
