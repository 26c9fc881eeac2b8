//! Named parameter storage shared by backbones and alignment adapters.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Grads, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Path-keyed parameters. Iteration order is the lexical order of paths, so
/// digests, checkpoints and optimizer sweeps are deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterRegistry {
    entries: BTreeMap<String, Param>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, mut tensor: Tensor, trainable: bool) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::contract(format!("duplicate parameter path `{path}`")));
        }
        tensor.set_requires_grad(trainable);
        self.entries.insert(path, Param { tensor, trainable });
        Ok(())
    }

    /// Uniform `(-bound, bound)` initialization.
    pub fn insert_uniform(
        &mut self,
        path: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut SeededRng,
    ) -> Result<()> {
        self.insert(path, Tensor::uniform(shape.to_vec(), -bound, bound, rng), true)
    }

    pub fn insert_const(&mut self, path: impl Into<String>, shape: &[usize], value: f64) -> Result<()> {
        self.insert(path, Tensor::full(shape.to_vec(), value), true)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(path).map(|p| &mut p.tensor)
    }

    pub fn is_trainable(&self, path: &str) -> bool {
        self.entries.get(path).is_some_and(|p| p.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Marks every entry non-trainable and drops stored gradients.
    pub fn freeze(&mut self) {
        for p in self.entries.values_mut() {
            p.trainable = false;
            p.tensor.set_requires_grad(false);
        }
    }

    pub fn unfreeze(&mut self) {
        for p in self.entries.values_mut() {
            p.trainable = true;
            p.tensor.set_requires_grad(true);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Records every entry on `tape`: trainable entries as gradient leaves,
    /// the rest as constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bindings<'t> {
        self.bind_with(tape, |p| p.trainable)
    }

    /// Records every entry as a constant regardless of its flag.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bindings<'t> {
        self.bind_with(tape, |_| false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, trainable: impl Fn(&Param) -> bool) -> Bindings<'t> {
        let vars = self
            .entries
            .iter()
            .map(|(k, p)| {
                let v = if trainable(p) {
                    tape.param(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bindings { vars }
    }

    /// Copies gradients for trainable entries out of `grads`. Entries the
    /// loss did not reach get a zero gradient.
    pub fn absorb_grads(&mut self, bindings: &Bindings<'_>, grads: &Grads) -> Result<()> {
        for (path, p) in self.entries.iter_mut() {
            if !p.trainable {
                continue;
            }
            let var = bindings.get(path)?;
            let g = grads
                .get(var)
                .unwrap_or_else(|| Tensor::zeros(p.tensor.shape().to_vec()));
            p.tensor.set_grad(g)?;
        }
        Ok(())
    }

    /// SHA-256 over paths, shapes and little-endian data.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (path, p) in &self.entries {
            h.update((path.len() as u64).to_le_bytes());
            h.update(path.as_bytes());
            for &e in p.tensor.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Tape handles for a bound registry.
pub struct Bindings<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> FromIterator<(String, Var<'t>)> for Bindings<'t> {
    /// Binds arbitrary tape values by path, e.g. to differentiate through
    /// an adapter with respect to its weights.
    fn from_iter<I: IntoIterator<Item = (String, Var<'t>)>>(iter: I) -> Self {
        Bindings {
            vars: iter.into_iter().collect(),
        }
    }
}

impl<'t> Bindings<'t> {
    pub fn get(&self, path: &str) -> Result<Var<'t>> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::contract(format!("missing parameter `{path}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
