use std::path::Path;

use crate::error::dim_err;
use crate::graph::{Gradients, Graph, Var};
use crate::ksf::{self, KsfData, KsfEntry};
use crate::{AutodiffError, Real, Result};

/// Dense row-major n-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return dim_err(format!(
                "shape {shape:?} must be non-empty with positive dims"
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return dim_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }
}

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Registers a parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            requires_grad: true,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param(&self, idx: usize) -> &Parameter<T> {
        &self.params[idx]
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut Parameter<T> {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for p in &mut self.params {
            p.requires_grad = flag;
        }
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter as a leaf of `g`. Parameters with
    /// `requires_grad == false` (or all of them, if `trainable` is false)
    /// enter the graph as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable && p.requires_grad {
                    g.leaf(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Gradient of every bound parameter, zero-filled where none flowed.
    pub fn collect_grads(&self, grads: &Gradients<T>, bound: &[Var]) -> Vec<Vec<T>> {
        assert_eq!(bound.len(), self.params.len());
        self.params
            .iter()
            .zip(bound)
            .map(|(p, &v)| match grads.get(v) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); p.value.numel()],
            })
            .collect()
    }

    /// Adds `grads` (one buffer per parameter, in order) into the
    /// accumulators of the parameters that require grad.
    pub fn accumulate(&mut self, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != self.params.len() {
            return dim_err(format!(
                "expected {} gradient buffers, got {}",
                self.params.len(),
                grads.len()
            ));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            if !p.requires_grad {
                continue;
            }
            if g.len() != p.value.numel() {
                return dim_err(format!("gradient size mismatch for `{}`", p.name));
            }
            match &mut p.grad {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => {
                    p.grad = Some(Tensor::new(p.value.shape().to_vec(), g.clone())?);
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Order-sensitive FNV-1a hash over names and value bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for v in p.value.data() {
                eat(&v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn to_entries(&self, prefix: &str) -> Vec<KsfEntry> {
        self.params
            .iter()
            .map(|p| KsfEntry {
                name: format!("{prefix}{}", p.name),
                dims: p.value.shape().to_vec(),
                data: KsfData::from_real(p.value.data()),
            })
            .collect()
    }

    /// Overwrites values from entries named `{prefix}{param name}`. Every
    /// parameter must be present with a matching shape.
    pub fn load_entries(&mut self, entries: &[KsfEntry], prefix: &str) -> Result<()> {
        for p in &mut self.params {
            let name = format!("{prefix}{}", p.name);
            let e = entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| AutodiffError::Format(format!("missing entry `{name}`")))?;
            if e.dims != p.value.shape() {
                return dim_err(format!(
                    "entry `{name}` has dims {:?}, expected {:?}",
                    e.dims,
                    p.value.shape()
                ));
            }
            let data = e.data.to_real::<T>();
            p.value = Tensor::new(e.dims.clone(), data)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ksf::save(path, &self.to_entries(""))
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let entries = ksf::load(path)?;
        self.load_entries(&entries, "")
    }
}
