use rand::Rng;

use crate::tensor::Tensor;

/// A named learnable array. Vectors have a one-element shape and are
/// stored as `rows x 1` in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Param {
            name: name.into(),
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, value: f64) -> Self {
        let mut p = Param::zeros(name, shape);
        p.data.fill(value);
        p
    }

    /// Glorot-uniform matrix `rows x cols`.
    pub fn glorot<R: Rng + ?Sized>(name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
        Param {
            name: name.into(),
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.clone()).expect("param shape is consistent")
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
