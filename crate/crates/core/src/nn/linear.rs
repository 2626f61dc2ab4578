//! Fully connected layer: y = x W^T + b.

use ndarray::{Array1, Array2, Axis};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Array2<f32>, // (out, in)
    pub bias: Array1<f32>,
}

impl Linear {
    pub fn new(weight: Array2<f32>, bias: Array1<f32>) -> Self {
        assert_eq!(weight.dim().0, bias.len());
        Linear { weight, bias }
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Returns (dx, d_weight, d_bias).
    pub fn backward(
        &self,
        x: &Array2<f32>,
        d_out: &Array2<f32>,
    ) -> (Array2<f32>, Array2<f32>, Array1<f32>) {
        let dx = d_out.dot(&self.weight);
        let dw = d_out.t().dot(x);
        let db = d_out.sum_axis(Axis(0));
        (dx, dw, db)
    }
}
