//! Dense layers shared by the encoder, decoder and heads.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::params::{uniform_matrix, Bound, ParamId, ParamStore};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        Self::with_weight(store, prefix, uniform_matrix(rng, out_dim, in_dim, scale))
    }

    /// A layer with the given weight and zero bias.
    pub fn with_weight(store: &mut ParamStore, prefix: &str, w: DMatrix<f64>) -> Self {
        let (out_dim, in_dim) = w.shape();
        let w = store.add(format!("{prefix}/W"), w);
        let b = store.add(format!("{prefix}/b"), DMatrix::zeros(out_dim, 1));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(p.var(self.w), x);
        g.add_col(y, p.var(self.b))
    }
}

/// Linear layers with GELU between them (none after the last).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists the input width, every hidden width and the output width.
    pub fn new(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{prefix}/{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let last = self.layers.len() - 1;
        self.layers.iter().enumerate().fold(x, |h, (i, layer)| {
            let y = layer.forward(g, p, h);
            if i < last {
                g.gelu(y)
            } else {
                y
            }
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }
}
