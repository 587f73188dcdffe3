//! Small ReLU multilayer perceptrons used as prediction heads.

use rand::Rng;

use crate::autodiff::{AutodiffError, Graph, Init, NodeId, ParamId, ParamStore, Real};

/// `dims[0] → dims[1] → … → dims[n]` with ReLU between hidden layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    dims: Vec<usize>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                (
                    store.add_init(format!("{name}.fc{i}.weight"), w[0], w[1], Init::HeUniform, rng),
                    store.add_init(format!("{name}.fc{i}.bias"), 1, w[1], Init::Zeros, rng),
                )
            })
            .collect();
        Self {
            layers,
            dims: dims.to_vec(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let w = g.param(store, w);
            let b = g.param(store, b);
            h = g.linear(h, w, b)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}
