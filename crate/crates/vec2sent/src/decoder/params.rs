//! Flat parameter storage with named matrix/vector views.
//!
//! All learnable tensors live in one contiguous `Vec<f64>` so the optimizer,
//! gradient clipping, checkpointing and finite-difference probing can treat
//! the model as a single parameter vector, while the math accesses shaped
//! views by index.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Shape {
    Mat(usize, usize),
    Vector(usize),
}

impl Shape {
    pub(crate) fn size(&self) -> usize {
        match self {
            Shape::Mat(r, c) => r * c,
            Shape::Vector(n) => *n,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ParamStore {
    defs: Vec<(String, Shape, usize)>,
    flat: Vec<f64>,
}

impl ParamStore {
    pub(crate) fn build(defs: Vec<(String, Shape)>) -> Self {
        let mut out_defs = Vec::with_capacity(defs.len());
        let mut offset = 0;
        for (name, shape) in defs {
            out_defs.push((name, shape, offset));
            offset += shape.size();
        }
        Self {
            defs: out_defs,
            flat: vec![0.0; offset],
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            defs: self.defs.clone(),
            flat: vec![0.0; self.flat.len()],
        }
    }

    pub(crate) fn total(&self) -> usize {
        self.flat.len()
    }

    pub(crate) fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub(crate) fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    fn slice(&self, idx: usize) -> (&[f64], Shape) {
        let (_, shape, offset) = self.defs[idx];
        (&self.flat[offset..offset + shape.size()], shape)
    }

    fn slice_mut(&mut self, idx: usize) -> (&mut [f64], Shape) {
        let (_, shape, offset) = self.defs[idx];
        (&mut self.flat[offset..offset + shape.size()], shape)
    }

    pub(crate) fn mat(&self, idx: usize) -> ArrayView2<'_, f64> {
        let (data, shape) = self.slice(idx);
        match shape {
            Shape::Mat(r, c) => ArrayView2::from_shape((r, c), data).expect("shape fits"),
            Shape::Vector(_) => panic!("parameter {idx} is a vector"),
        }
    }

    pub(crate) fn mat_mut(&mut self, idx: usize) -> ArrayViewMut2<'_, f64> {
        let (data, shape) = self.slice_mut(idx);
        match shape {
            Shape::Mat(r, c) => ArrayViewMut2::from_shape((r, c), data).expect("shape fits"),
            Shape::Vector(_) => panic!("parameter {idx} is a vector"),
        }
    }

    pub(crate) fn vector(&self, idx: usize) -> ArrayView1<'_, f64> {
        let (data, shape) = self.slice(idx);
        match shape {
            Shape::Vector(n) => ArrayView1::from_shape(n, data).expect("shape fits"),
            Shape::Mat(..) => panic!("parameter {idx} is a matrix"),
        }
    }

    pub(crate) fn vector_mut(&mut self, idx: usize) -> ArrayViewMut1<'_, f64> {
        let (data, shape) = self.slice_mut(idx);
        match shape {
            Shape::Vector(n) => ArrayViewMut1::from_shape(n, data).expect("shape fits"),
            Shape::Mat(..) => panic!("parameter {idx} is a matrix"),
        }
    }
}
