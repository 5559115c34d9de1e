use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Real, Result, Tensor, TensorError};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named collection of trainable tensors.
///
/// Every store carries a process-unique id so that a graph can tell stores
/// apart; cloning a store (e.g. for target networks) yields a new id.
#[derive(Debug)]
pub struct ParamStore<T> {
    id: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            id: fresh_id(),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            id: fresh_id(),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    fn check_layout(&self, other: &ParamStore<T>) -> Result<()> {
        if self.len() != other.len()
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(TensorError::Shape(
                "parameter stores have different layouts".into(),
            ));
        }
        Ok(())
    }

    /// Overwrite values with those of an identically laid-out store.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// `self = tau * online + (1 - tau) * self`.
    pub fn polyak_from(&mut self, online: &ParamStore<T>, tau: f64) -> Result<()> {
        self.check_layout(online)?;
        let tau_t = T::from_f64(tau);
        let keep = T::from_f64(1.0 - tau);
        for (dst, src) in self.tensors.iter_mut().zip(&online.tensors) {
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = keep * *d + tau_t * s;
            }
        }
        Ok(())
    }

    /// Replace tensors by name; every stored name must be present with a matching shape.
    pub fn load_named<'a>(
        &mut self,
        mut lookup: impl FnMut(&str) -> Option<&'a Tensor<T>>,
    ) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = lookup(name).ok_or_else(|| {
                TensorError::Checkpoint(format!("missing tensor `{name}`"))
            })?;
            if src.shape() != t.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
