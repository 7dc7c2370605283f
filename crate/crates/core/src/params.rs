//! Named-tensor view over parameter structs, used by the optimizer,
//! gradient checks and checkpoints.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Visits every tensor of a parameter struct in a fixed order.
pub trait Parameters {
    /// `f(name, shape, data, decays)`; `decays` marks tensors subject to weight decay.
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64], bool));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, data, _| n += data.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, data, _| out.extend_from_slice(data));
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, data| {
            data.copy_from_slice(&flat[offset..offset + data.len()]);
            offset += data.len();
        });
        debug_assert_eq!(offset, flat.len());
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, data, _| ok &= data.iter().all(|x| x.is_finite()));
        ok
    }

    fn to_named(&self, prefix: &str) -> BTreeMap<String, NamedTensor> {
        let mut out = BTreeMap::new();
        self.visit(&mut |name, shape, data, _| {
            out.insert(
                format!("{prefix}{name}"),
                NamedTensor {
                    shape: shape.to_vec(),
                    data: data.to_vec(),
                },
            );
        });
        out
    }

    fn load_named(&mut self, prefix: &str, tensors: &BTreeMap<String, NamedTensor>) -> Result<()> {
        let mut err = None;
        self.visit_mut(&mut |name, data| {
            if err.is_some() {
                return;
            }
            let key = format!("{prefix}{name}");
            match tensors.get(&key) {
                Some(t) if t.data.len() == data.len() => data.copy_from_slice(&t.data),
                Some(t) => {
                    err = Some(Error::Dimension {
                        what: "checkpoint tensor",
                        expected: data.len(),
                        actual: t.data.len(),
                    })
                }
                None => err = Some(Error::Parse {
                    line: 0,
                    msg: format!("checkpoint is missing tensor {key}"),
                }),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub(crate) fn visit_matrix(
    f: &mut dyn FnMut(&str, &[usize], &[f64], bool),
    name: &str,
    m: &Array2<f64>,
    decays: bool,
) {
    let (r, c) = m.dim();
    f(name, &[r, c], m.as_slice().expect("standard layout"), decays);
}

pub(crate) fn visit_vector(
    f: &mut dyn FnMut(&str, &[usize], &[f64], bool),
    name: &str,
    v: &Array1<f64>,
    decays: bool,
) {
    f(name, &[v.len()], v.as_slice().expect("standard layout"), decays);
}

/// Fully-connected layer `y = W x + b` with `W: out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            w: Array2::zeros((output, input)),
            b: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Dense::zeros(self.input_dim(), self.output_dim())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.w.dot(&ndarray::ArrayView1::from(x));
        y += &self.b;
        y.to_vec()
    }

    /// Rows of `x` are examples; returns `x W^T + b`.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    pub fn add_scaled(&mut self, other: &Dense, alpha: f64) {
        self.w.scaled_add(alpha, &other.w);
        self.b.scaled_add(alpha, &other.b);
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64], bool)) {
        visit_matrix(f, &format!("{prefix}.w"), &self.w, true);
        visit_vector(f, &format!("{prefix}.b"), &self.b, false);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.w"), self.w.as_slice_mut().expect("standard layout"));
        f(&format!("{prefix}.b"), self.b.as_slice_mut().expect("standard layout"));
    }
}

pub(crate) fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|z| z.max(0.0));
}
