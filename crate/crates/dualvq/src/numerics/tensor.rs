use rand::Rng;

use super::GraphError;

/// Dense row-major tensor of `f64` values.
///
/// Rank 0 (`shape == []`) is a scalar with one element. Rank 2 tensors are
/// indexed `[row, col]`; convolution inputs use the `[channels, length]`
/// layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, GraphError> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(GraphError::BadShape(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        if data.len() != numel {
            return Err(GraphError::BadShape(format!(
                "shape {shape:?} wants {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            data: values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, GraphError> {
        Self::new(vec![rows, cols], data)
    }

    /// Seeded uniform init on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in_uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn as_scalar(&self) -> Option<f64> {
        if self.numel() == 1 {
            Some(self.data[0])
        } else {
            None
        }
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_rejects_mismatched_data() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let t = Tensor::scalar(4.5);
        assert!(t.is_scalar());
        assert_eq!(t.numel(), 1);
        assert_eq!(t.as_scalar(), Some(4.5));
    }

    #[test]
    fn fan_in_uniform_is_bounded_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::fan_in_uniform(&mut rng, vec![3, 4], 16);
        assert!(a.data().iter().all(|v| v.abs() <= 0.25));
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let b = Tensor::fan_in_uniform(&mut rng2, vec![3, 4], 16);
        assert_eq!(a, b);
    }
}
