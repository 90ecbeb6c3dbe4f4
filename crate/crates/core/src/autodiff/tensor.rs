use std::sync::Arc;

use crate::error::{Error, Result};

/// Node handle into a [`super::Tape`]: (tape id, node index).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) tape_id: u64,
    pub(crate) index: usize,
}

/// Dense row-major f64 tensor.
///
/// A tensor without a node handle participates in forward computation as a
/// constant and receives no gradient. The data buffer is shared, so clones
/// and tape enrollment are cheap.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub(crate) node: Option<NodeRef>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {shape:?}"
        );
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match buffer of length {}",
            data.len()
        );
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<NodeRef>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, node }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; len])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // dimensions are strictly positive
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    /// Scalar value; errors when the tensor has more than one element.
    pub fn item(&self) -> Result<f64> {
        if self.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::contract(
                "item",
                format!("expected scalar, got shape {:?}", self.shape),
            ))
        }
    }

    /// Same values, no tape handle.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}

/// Identifier of a parameter slot in a [`Params`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
}

/// Arena owning every learned parameter of a model.
///
/// Models hold [`ParamId`]s; the trainer owns the arena, enrolls entries on a
/// fresh tape each iteration and hands the arena to the optimizer for
/// in-place updates. Keeping values behind `Arc` makes tape enrollment free.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<ParamEntry>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            shape,
            value: Arc::new(value),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].value
    }

    /// Untracked tensor view of a parameter (shares the buffer).
    pub fn tensor(&self, id: ParamId) -> Tensor {
        let e = &self.entries[id.0];
        Tensor::from_shared(e.shape.clone(), Arc::clone(&e.value), None)
    }

    pub(crate) fn shared_value(&self, id: ParamId) -> Arc<Vec<f64>> {
        Arc::clone(&self.entries[id.0].value)
    }

    /// Mutable access for optimizers and finite-difference probes.
    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        Arc::make_mut(&mut self.entries[id.0].value).as_mut_slice()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }
}
