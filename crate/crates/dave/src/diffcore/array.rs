use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArrayError {
    #[error("shape {shape:?} does not match {len} values")]
    ShapeMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
}

/// Row-major dense array of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl DenseArray {
    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, ArrayError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(ArrayError::ShapeMismatch { shape, len: values.len() });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(ArrayError::NonFinite { index });
        }
        Ok(DenseArray { shape, values })
    }

    pub fn vector(values: Vec<f64>) -> Result<Self, ArrayError> {
        let shape = vec![values.len()];
        Self::from_vec(shape, values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, ArrayError> {
        Self::from_vec(vec![rows, cols], values)
    }

    pub fn scalar(value: f64) -> Result<Self, ArrayError> {
        Self::from_vec(vec![1], vec![value])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        DenseArray { shape, values: vec![0.0; len] }
    }

    /// Stack length-`cols` vectors into a `[rows, cols]` matrix.
    pub fn stack_rows(rows: &[DenseArray]) -> Result<Self, ArrayError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(ArrayError::ShapeMismatch {
                    shape: vec![rows.len(), cols],
                    len: row.len(),
                });
            }
            values.extend_from_slice(row.values());
        }
        Self::from_vec(vec![rows.len(), cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.values[0]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        &self.values[r * cols..(r + 1) * cols]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shape_value_mismatch() {
        assert!(DenseArray::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(DenseArray::vector(vec![1.0, f64::NAN]).is_err());
        assert!(DenseArray::vector(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn stack_rows_builds_matrix() {
        let a = DenseArray::vector(vec![1.0, 2.0]).unwrap();
        let b = DenseArray::vector(vec![3.0, 4.0]).unwrap();
        let m = DenseArray::stack_rows(&[a, b]).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert_eq!(m.row(1), &[3.0, 4.0]);
    }
}
