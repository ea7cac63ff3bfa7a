use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{xavier_uniform, Matrix, ParamSet};
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Fully-connected network: tanh on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Activations recorded by [`Mlp::forward`]: the input followed by every
/// layer's output.
#[derive(Debug, Clone)]
pub struct MlpTape {
    activations: Vec<Vec<f64>>,
}

impl Mlp {
    /// `widths = [d, h1, ..., d_f]`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(
                "widths",
                format!("need at least two positive widths, got {widths:?}"),
            ));
        }
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                weight: xavier_uniform(rng, w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.rows).unwrap_or(0)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.weight.rows));
        w
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpTape)> {
        check_len("mlp input", self.input_dim(), x.len())?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut h = layer.weight.matvec(activations.last().unwrap());
            for (v, b) in h.iter_mut().zip(&layer.bias) {
                *v += b;
                if i != last {
                    *v = v.tanh();
                }
            }
            activations.push(h);
        }
        Ok((activations.last().unwrap().clone(), MlpTape { activations }))
    }

    /// Accumulate parameter gradients into `grads`; return the input gradient.
    pub fn backward(&self, tape: &MlpTape, grad_out: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut g = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i != last {
                for (gv, a) in g.iter_mut().zip(&tape.activations[i + 1]) {
                    *gv *= 1.0 - a * a;
                }
            }
            let gl = &mut grads.layers[i];
            gl.weight.add_outer(&g, &tape.activations[i]);
            for (b, gv) in gl.bias.iter_mut().zip(&g) {
                *b += gv;
            }
            g = self.layers[i].weight.matvec_t(&g);
        }
        g
    }

    pub(crate) fn shapes_ok(&self) -> bool {
        !self.layers.is_empty()
            && self
                .layers
                .iter()
                .all(|l| l.weight.shape_ok() && l.bias.len() == l.weight.rows)
            && self
                .layers
                .windows(2)
                .all(|w| w[0].weight.rows == w[1].weight.cols)
    }
}

impl ParamSet for Mlp {
    fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Mlp::new(&[3, 5, 4], &mut rng).unwrap();
        m.zero();
        let (out, _) = m.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let m = Mlp {
            layers: vec![Layer {
                weight: Matrix::identity(3),
                bias: vec![0.0; 3],
            }],
        };
        let x = [0.3, -1.2, 7.0];
        assert_eq!(m.forward(&x).unwrap().0, x.to_vec());
    }

    #[test]
    fn rejects_wrong_input_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mlp::new(&[3, 4], &mut rng).unwrap();
        assert!(m.forward(&[1.0, 2.0]).is_err());
    }
}
