use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, Pooling};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, matmul, Matrix, Scalar};

/// Affine layer `y = x · weight + bias`, weight stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<S> {
    pub weight: Matrix<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![S::zero(); fan_out],
        }
    }

    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| S::from_f64(rng.random_range(-bound..=bound)))
            .collect();
        Self {
            weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized"),
            bias: vec![S::zero(); fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Dense parameters: the prediction tower and, in attention mode, the
/// behavior-scoring unit.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<S> {
    pub tower: Vec<Dense<S>>,
    pub attention: Vec<Dense<S>>,
}

fn chain_dims(input: usize, hidden: &[usize]) -> Vec<(usize, usize)> {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(1);
    dims.windows(2).map(|w| (w[0], w[1])).collect()
}

impl<S: Scalar> MlpParams<S> {
    /// Glorot-uniform weights and zero biases, fully determined by `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x7043]));
        let tower = chain_dims(cfg.input_dim(), &cfg.hidden)
            .into_iter()
            .map(|(i, o)| Dense::glorot(i, o, &mut rng))
            .collect();
        let attention = match cfg.pooling {
            Pooling::Attention => chain_dims(cfg.attention_input_dim(), &cfg.attention_hidden)
                .into_iter()
                .map(|(i, o)| Dense::glorot(i, o, &mut rng))
                .collect(),
            Pooling::Mean => Vec::new(),
        };
        Self { tower, attention }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |ls: &[Dense<S>]| {
            ls.iter()
                .map(|l| Dense::zeros(l.fan_in(), l.fan_out()))
                .collect()
        };
        Self {
            tower: z(&self.tower),
            attention: z(&self.attention),
        }
    }

    fn layers(&self) -> impl Iterator<Item = (&'static str, usize, &Dense<S>)> {
        let t = self.tower.iter().enumerate().map(|(i, l)| ("tower", i, l));
        let a = self
            .attention
            .iter()
            .enumerate()
            .map(|(i, l)| ("attention", i, l));
        t.chain(a)
    }

    /// Tensor names in canonical order: tower layers then attention layers,
    /// each as weight (row-major) followed by bias.
    pub fn tensor_names(&self) -> Vec<String> {
        self.layers()
            .flat_map(|(g, i, _)| [format!("{g}.{i}.weight"), format!("{g}.{i}.bias")])
            .collect()
    }

    pub fn tensors(&self) -> Vec<&[S]> {
        self.layers()
            .flat_map(|(_, _, l)| [l.weight.data(), &l.bias[..]])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        self.tower
            .iter_mut()
            .chain(self.attention.iter_mut())
            .flat_map(|l| [l.weight.data_mut(), &mut l.bias[..]])
            .collect()
    }

    /// `(rows, cols)` per tensor, matching [`Self::tensors`].
    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        self.layers()
            .flat_map(|(_, _, l)| [(l.fan_in(), l.fan_out()), (1, l.fan_out())])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Canonical flattening used for parameter-similarity diagnostics.
    pub fn flatten(&self) -> Vec<S> {
        self.tensors().concat()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn add_scaled(&mut self, other: &Self, alpha: S) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            crate::numerics::axpy(alpha, src, dst);
        }
    }

    /// Rebuilds parameters with the layout of `cfg` from flat tensors.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Vec<S>>) -> Result<Self> {
        let mut out = Self::init(cfg, 0);
        let expected = out.tensors().len();
        if tensors.len() != expected {
            return Err(Error::shape(
                "MlpParams::from_tensors",
                expected,
                tensors.len(),
            ));
        }
        for (dst, src) in out.tensors_mut().into_iter().zip(tensors) {
            if dst.len() != src.len() {
                return Err(Error::shape(
                    "MlpParams::from_tensors",
                    dst.len(),
                    src.len(),
                ));
            }
            dst.copy_from_slice(&src);
        }
        Ok(out)
    }
}

/// Inputs and pre-activations of every layer, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct StackTrace<S> {
    pub inputs: Vec<Matrix<S>>,
    pub pre: Vec<Matrix<S>>,
}

impl<S: Scalar> StackTrace<S> {
    pub fn min_abs_hidden_preactivation(&self) -> f64 {
        let n = self.pre.len();
        self.pre[..n.saturating_sub(1)]
            .iter()
            .flat_map(|m| m.data().iter().map(|v| v.as_f64().abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Row-batched forward: affine → ReLU for hidden layers, linear output.
pub fn mlp_forward<S: Scalar>(
    layers: &[Dense<S>],
    x: Matrix<S>,
) -> Result<(Matrix<S>, StackTrace<S>)> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut cur = x;
    for (l, layer) in layers.iter().enumerate() {
        let mut z = matmul(&cur, &layer.weight)?;
        for r in 0..z.rows() {
            crate::numerics::add_assign(z.row_mut(r), &layer.bias);
        }
        inputs.push(cur);
        let next = if l + 1 < layers.len() {
            let mut a = z.clone();
            crate::numerics::relu_in_place(a.data_mut());
            a
        } else {
            z.clone()
        };
        pre.push(z);
        cur = next;
    }
    Ok((cur, StackTrace { inputs, pre }))
}

/// Accumulates parameter gradients into `grads` and returns the input gradient.
pub fn mlp_backward<S: Scalar>(
    layers: &[Dense<S>],
    trace: &StackTrace<S>,
    d_out: Matrix<S>,
    grads: &mut [Dense<S>],
) -> Result<Matrix<S>> {
    let mut d = d_out;
    for l in (0..layers.len()).rev() {
        if l + 1 < layers.len() {
            for (g, &z) in d.data_mut().iter_mut().zip(trace.pre[l].data()) {
                if z <= S::zero() {
                    *g = S::zero();
                }
            }
        }
        let dw = matmul(&trace.inputs[l].transpose(), &d)?;
        crate::numerics::add_assign(grads[l].weight.data_mut(), dw.data());
        for r in 0..d.rows() {
            crate::numerics::add_assign(&mut grads[l].bias, d.row(r));
        }
        d = matmul(&d, &layers[l].weight.transpose())?;
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_net_gives_zero_logit() {
        let layers = vec![Dense::<f64>::zeros(3, 4), Dense::zeros(4, 1)];
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        let (out, _) = mlp_forward(&layers, x).unwrap();
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn identity_single_layer() {
        let layer = Dense {
            weight: Matrix::from_rows(&[vec![1.0f64]]).unwrap(),
            bias: vec![0.0],
        };
        let (out, _) = mlp_forward(&[layer], Matrix::from_rows(&[vec![0.37]]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.37]);
    }

    #[test]
    fn forward_matches_direct_reimplementation() {
        let cfg = ModelConfig {
            embed_dim: 3,
            hidden: vec![5, 4],
            ..ModelConfig::default()
        };
        let p = MlpParams::<f64>::init(&cfg, 99);
        let x: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let (out, _) = mlp_forward(&p.tower, Matrix::from_vec(1, 15, x.clone()).unwrap()).unwrap();

        // Neuron-by-neuron evaluation, independent of the matrix kernels.
        let mut act = x;
        for (li, layer) in p.tower.iter().enumerate() {
            let mut next = Vec::new();
            for j in 0..layer.fan_out() {
                let mut s = layer.bias[j];
                for (i, a) in act.iter().enumerate() {
                    s += a * layer.weight.get(i, j);
                }
                next.push(if li + 1 < p.tower.len() {
                    s.max(0.0)
                } else {
                    s
                });
            }
            act = next;
        }
        assert!((out.get(0, 0) - act[0]).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let layers = vec![Dense::<f32>::zeros(3, 1)];
        let x = Matrix::zeros(1, 4);
        assert!(matches!(mlp_forward(&layers, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn canonical_tensor_layout() {
        let cfg = ModelConfig {
            embed_dim: 2,
            hidden: vec![3],
            attention_hidden: vec![2],
            pooling: Pooling::Attention,
            ..ModelConfig::default()
        };
        let p = MlpParams::<f32>::init(&cfg, 1);
        assert_eq!(
            p.tensor_names(),
            vec![
                "tower.0.weight",
                "tower.0.bias",
                "tower.1.weight",
                "tower.1.bias",
                "attention.0.weight",
                "attention.0.bias",
                "attention.1.weight",
                "attention.1.bias"
            ]
        );
        assert_eq!(p.num_params(), 10 * 3 + 3 + 3 + 1 + 16 * 2 + 2 + 2 + 1);
        let back = MlpParams::from_tensors(&cfg, p.tensors().iter().map(|t| t.to_vec()).collect());
        assert_eq!(back.unwrap(), p);
    }
}
