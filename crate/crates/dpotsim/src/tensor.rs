//! Dense n-dimensional arrays of `f64`, the universal numeric carrier for
//! images, parameters, and gradients.

use crate::{Error, Result};

/// Dense row-major tensor. Immutable in spirit: operations return new values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating that the shape matches the data length and
    /// that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::shape(format!("non-finite value {bad} in tensor")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a 2-D matrix.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() needs a 2-D tensor");
        self.shape[0]
    }

    /// Number of columns when viewed as a 2-D matrix.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a 2-D tensor");
        self.shape[1]
    }

    /// Row `r` of a 2-D tensor as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    /// Reshapes without copying; the element count must be preserved.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} values into {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Checks the finiteness invariant after an in-place mutation.
    pub fn validate_finite(&self) -> Result<()> {
        if let Some(bad) = self.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::shape(format!("non-finite value {bad} in tensor")));
        }
        Ok(())
    }
}

/// `B×n` matrix times `out×n` weight transposed, i.e. `X · Wᵀ`, plus a bias
/// row broadcast over the batch. The workhorse of the dense forward pass.
pub fn matmul_transpose_bias(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (batch, n_in) = (x.rows(), x.cols());
    let (n_out, w_in) = (w.rows(), w.cols());
    assert_eq!(n_in, w_in, "input width {n_in} != weight width {w_in}");
    assert_eq!(b.len(), n_out);
    let mut out = Tensor::zeros(vec![batch, n_out]);
    for r in 0..batch {
        let xr = x.row(r);
        let or = out.row_mut(r);
        for (j, o) in or.iter_mut().enumerate() {
            let wr = w.row(j);
            let mut acc = b.data()[j];
            for (xv, wv) in xr.iter().zip(wr) {
                acc += xv * wv;
            }
            *o = acc;
        }
    }
    out
}
