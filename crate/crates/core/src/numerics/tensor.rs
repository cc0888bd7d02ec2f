use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Rank 0 and rank 1 tensors are viewed as a single row when a matrix view is
/// needed, so `[n]` behaves like `[1, n]` inside the graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    #[serde(rename = "values")]
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub(crate) fn matrix_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Tensor { shape: vec![rows, cols], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[n - 1],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// A named tensor owned by a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub id: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered collection of parameters with unique ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<usize> {
        let id = id.into();
        if self.index.contains_key(&id) {
            return Err(Error::contract(format!("duplicate parameter id {id:?}")));
        }
        let idx = self.params.len();
        self.index.insert(id.clone(), idx);
        self.params.push(Parameter { id, tensor, trainable });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&Parameter> {
        self.index_of(id).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Parameter> {
        self.index_of(id).map(move |i| &mut self.params[i])
    }

    pub fn tensor(&self, id: &str) -> Result<&Tensor> {
        self.get(id)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::contract(format!("unknown parameter {id:?}")))
    }

    pub fn by_index(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.id.as_str())
    }

    pub fn set_trainable(&mut self, id: &str, trainable: bool) -> Result<()> {
        self.get_mut(id)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::contract(format!("unknown parameter {id:?}")))
    }

    /// Marks exactly the ids in `ids` as trainable; every other parameter is frozen.
    pub fn restrict_trainable<'a>(&mut self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let wanted: std::collections::HashSet<&str> = ids.into_iter().collect();
        for id in &wanted {
            if !self.contains(id) {
                return Err(Error::contract(format!("unknown parameter {id:?}")));
            }
        }
        for p in &mut self.params {
            p.trainable = wanted.contains(p.id.as_str());
        }
        Ok(())
    }

    pub fn trainable_ids(&self) -> Vec<String> {
        self.params.iter().filter(|p| p.trainable).map(|p| p.id.clone()).collect()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Copies every parameter whose id starts with `prefix` into a new store.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for p in self.params.iter().filter(|p| p.id.starts_with(prefix)) {
            out.insert(p.id.clone(), p.tensor.clone(), p.trainable).expect("ids unique");
        }
        out
    }

    /// Inserts or overwrites every parameter of `other`.
    pub fn merge(&mut self, other: &ParamStore) -> Result<()> {
        for p in other.iter() {
            match self.get_mut(&p.id) {
                Some(mine) => {
                    if mine.tensor.shape() != p.tensor.shape() {
                        return Err(Error::contract(format!(
                            "shape mismatch merging {}: {:?} vs {:?}",
                            p.id,
                            mine.tensor.shape(),
                            p.tensor.shape()
                        )));
                    }
                    mine.tensor = p.tensor.clone();
                }
                None => {
                    self.insert(p.id.clone(), p.tensor.clone(), p.trainable)?;
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 over ids, shapes and the raw bytes of every value whose id
    /// starts with `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.id.starts_with(prefix)) {
            h.update(p.id.as_bytes());
            for s in p.tensor.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Gradients keyed by parameter id.
pub type GradMap = BTreeMap<String, Tensor>;
