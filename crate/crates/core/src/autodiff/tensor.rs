use serde::{Deserialize, Serialize};

use super::{AdError, Result};

/// Dense row-major array of `f64` values.
///
/// Rank 0 is a scalar, rank 1 a vector (treated as a single row wherever a
/// matrix view is needed), rank 2 a matrix. Values are always finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 {
            return Err(AdError::Invalid(format!(
                "tensors of rank {} are not supported",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AdError::BadLength { shape, len: data.len() });
        }
        check_finite("tensor", &data)?;
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// (rows, cols) view used by broadcasting and row-wise ops.
    pub(crate) fn view(&self) -> (usize, usize) {
        view_of(&self.shape)
    }
}

pub(crate) fn view_of(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("rank > 2"),
    }
}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    // v * 0.0 is NaN exactly when v is infinite or NaN; the fold has no
    // early exit so it runs at full speed on the common all-finite path.
    let probe = data
        .chunks(64)
        .fold(0.0, |acc, c| acc + c.iter().fold(0.0, |a, &v| a + v * 0.0));
    if probe == 0.0 {
        Ok(())
    } else {
        Err(AdError::NonFinite { op })
    }
}

/// Sum that does not depend on the order of `values`.
pub(crate) fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}
