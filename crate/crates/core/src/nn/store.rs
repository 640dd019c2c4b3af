use std::collections::{BTreeMap, HashMap};
use std::fmt::Display;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Parameter initialisation schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal { mean: f64, std: f64 },
    Const(f64),
}

#[derive(Debug)]
struct Inner {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named, seeded collection of trainable parameters and non-trainable buffers.
///
/// Names are dot-separated module paths. Creation order plus the seed fully
/// determines initial values.
#[derive(Debug)]
pub struct VarStore {
    inner: Mutex<Inner>,
    device: Device,
}

impl VarStore {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Mutex::new(Inner {
                params: BTreeMap::new(),
                buffers: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            }),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> VarPath<'_> {
        VarPath {
            store: self,
            prefix: String::new(),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().expect("var store poisoned")
    }

    /// Trainable parameters whose name starts with `prefix`, in name order.
    pub fn params_under(&self, prefix: &str) -> Vec<(String, Var)> {
        self.lock()
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn params(&self) -> Vec<(String, Var)> {
        self.params_under("")
    }

    pub fn num_params(&self) -> usize {
        self.lock().params.values().map(|v| v.elem_count()).sum()
    }

    /// Snapshot of every parameter and buffer, keyed by path.
    pub fn tensors(&self) -> HashMap<String, Tensor> {
        let inner = self.lock();
        inner
            .params
            .iter()
            .chain(inner.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().copy().expect("cpu copy")))
            .collect()
    }

    /// Overwrites every stored tensor from `values`. All keys must be present
    /// with matching shapes; nothing is written unless all of them check out.
    pub fn load(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        let inner = self.lock();
        let all = || inner.params.iter().chain(inner.buffers.iter());
        for (name, var) in all() {
            let v = values
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor `{name}`")))?;
            if v.dims() != var.dims() {
                return Err(Error::CheckpointMismatch {
                    key: name.clone(),
                    found: format!("{:?}", v.dims()),
                    expected: format!("{:?}", var.dims()),
                });
            }
        }
        for (name, var) in all() {
            var.set(&values[name].to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

/// A module path inside a [`VarStore`].
#[derive(Clone)]
pub struct VarPath<'a> {
    store: &'a VarStore,
    prefix: String,
}

impl<'a> VarPath<'a> {
    pub fn sub(&self, name: impl Display) -> VarPath<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        VarPath {
            store: self.store,
            prefix,
        }
    }

    fn key(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn fresh(&self, name: &str, shape: &[usize], init: Init, inner: &mut Inner) -> Result<Var> {
        let count: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Const(c) => vec![c as f32; count],
            Init::Normal { mean, std } => {
                let dist = Normal::new(mean, std)
                    .map_err(|e| Error::Config(format!("init for `{name}`: {e}")))?;
                (0..count).map(|_| dist.sample(&mut inner.rng) as f32).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.store.device)?;
        Ok(Var::from_tensor(&t)?)
    }

    /// Creates a trainable parameter. Panics on duplicate names, which is a
    /// model-construction bug.
    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let key = self.key(name);
        let mut inner = self.store.lock();
        assert!(!inner.params.contains_key(&key), "duplicate parameter {key}");
        let var = self.fresh(&key, shape, init, &mut inner)?;
        let t = var.as_tensor().clone();
        inner.params.insert(key, var);
        Ok(t)
    }

    /// Creates a non-trainable buffer (e.g. running statistics).
    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let key = self.key(name);
        let mut inner = self.store.lock();
        assert!(!inner.buffers.contains_key(&key), "duplicate buffer {key}");
        let var = self.fresh(&key, shape, init, &mut inner)?;
        inner.buffers.insert(key, var.clone());
        Ok(var)
    }
}

pub(crate) fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
