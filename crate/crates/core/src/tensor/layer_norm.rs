use crate::error::{Error, Result};

/// Gain, bias and stabilizer of a layer normalization, as plain values.
///
/// `apply` computes `alpha * (x - mean(x)) / sqrt(var(x) + eps) + beta` with the
/// population variance (divisor `D`).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>, eps: f64) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(Error::shape(
                "LayerNormParams::new",
                format!("alpha has {} entries, beta {}", alpha.len(), beta.len()),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::contract(
                "LayerNormParams::new",
                "eps must be positive",
            ));
        }
        Ok(Self { alpha, beta, eps })
    }

    /// Unit gain, zero bias.
    pub fn identity(dim: usize, eps: f64) -> Self {
        Self {
            alpha: vec![1.0; dim],
            beta: vec![0.0; dim],
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::shape(
                "layer_norm",
                format!("input has {} entries, parameters {}", x.len(), self.dim()),
            ));
        }
        let (mean, inv_std) = moments(x, self.eps);
        Ok(x.iter()
            .zip(self.alpha.iter().zip(&self.beta))
            .map(|(&xi, (&a, &b))| a * ((xi - mean) * inv_std) + b)
            .collect())
    }
}

/// Mean and `1 / sqrt(var + eps)` with population variance.
pub(crate) fn moments(x: &[f64], eps: f64) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_maps_to_beta_exactly() {
        let p = LayerNormParams::new(vec![0.3, -2.0, 1.5], vec![0.1, 0.2, -0.7], 1e-5).unwrap();
        let out = p.apply(&[4.25, 4.25, 4.25]).unwrap();
        assert_eq!(out, p.beta);
    }

    #[test]
    fn zero_mean_unit_variance_input_is_nearly_unchanged() {
        let eps = 1e-12;
        let p = LayerNormParams::identity(2, eps);
        let out = p.apply(&[1.0, -1.0]).unwrap();
        let s = 1.0 / (1.0 + eps).sqrt();
        assert_eq!(out, vec![s, -s]);
        assert!((out[0] - 1.0).abs() < 1e-11);
    }

    #[test]
    fn rejects_mismatched_lengths_and_bad_eps() {
        assert!(LayerNormParams::new(vec![1.0], vec![1.0, 2.0], 1e-5).is_err());
        assert!(LayerNormParams::new(vec![1.0], vec![1.0], 0.0).is_err());
        assert!(LayerNormParams::identity(3, 1e-5).apply(&[1.0]).is_err());
    }
}
