//! Classification heads: `H_c` (binary, on the common fingerprint) and `H_s`
//! (method classification, on the specific fingerprint). Both are MLPs over
//! the spatially averaged feature map and share one hidden-layer layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Float, Graph, Init, Linear, ParamStore, Tensor, Var};

pub const COMMON_HEAD_PREFIX: &str = "head.common";
pub const SPECIFIC_HEAD_PREFIX: &str = "head.specific";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden_dims: Vec<usize>,
    pub n_classes: usize,
}

#[derive(Clone, Debug)]
pub struct Head {
    layers: Vec<Linear>,
    in_dim: usize,
    n_classes: usize,
}

impl Head {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        config: &HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.n_classes < 2 {
            return Err(Error::validation("n_classes", "a head needs at least two classes"));
        }
        let mut layers = Vec::new();
        let mut d = in_dim;
        for (i, &h) in config.hidden_dims.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{prefix}.fc{i}"), d, h, Init::Relu, rng));
            d = h;
        }
        layers.push(Linear::new(store, &format!("{prefix}.out"), d, config.n_classes, Init::Linear, rng));
        Ok(Head {
            layers,
            in_dim,
            n_classes: config.n_classes,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    /// Global average pool followed by the MLP; `[n, c, h, w] -> [n, n_classes]`.
    pub fn forward_graph<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(features).dims4()?;
        if c != self.in_dim {
            return Err(Error::Shape(format!("head expects {} channels, got {c}", self.in_dim)));
        }
        let mut h = g.global_avg_pool(features)?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn forward<T: Float>(&self, store: &ParamStore<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let out = self.forward_graph(&mut g, store, x)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn heads() -> (ParamStore<f32>, Head, Head) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hidden = vec![256, 256];
        let hc = Head::new(
            &mut store,
            COMMON_HEAD_PREFIX,
            32,
            &HeadConfig {
                hidden_dims: hidden.clone(),
                n_classes: 2,
            },
            &mut rng,
        )
        .unwrap();
        let hs = Head::new(
            &mut store,
            SPECIFIC_HEAD_PREFIX,
            32,
            &HeadConfig {
                hidden_dims: hidden,
                n_classes: 5,
            },
            &mut rng,
        )
        .unwrap();
        (store, hc, hs)
    }

    fn features(n: usize) -> Tensor<f32> {
        Tensor::from_fn(&[n, 32, 4, 4], |i| ((i * 31) % 17) as f32 / 17.0 - 0.5)
    }

    #[test]
    fn logit_shapes() {
        let (store, hc, hs) = heads();
        assert_eq!(hc.forward(&store, &features(3)).unwrap().shape(), &[3, 2]);
        assert_eq!(hs.forward(&store, &features(3)).unwrap().shape(), &[3, 5]);
    }

    #[test]
    fn heads_have_disjoint_parameters() {
        let (store, _, _) = heads();
        let c: BTreeSet<_> = store.ids_with_prefix(COMMON_HEAD_PREFIX).collect();
        let s: BTreeSet<_> = store.ids_with_prefix(SPECIFIC_HEAD_PREFIX).collect();
        assert_eq!(c.len(), s.len());
        assert!(c.is_disjoint(&s));
    }

    #[test]
    fn wrong_feature_width_is_shape_error() {
        let (store, hc, _) = heads();
        let x = Tensor::<f32>::zeros(&[1, 16, 4, 4]);
        assert!(matches!(hc.forward(&store, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_is_batch_permutation_equivariant() {
        let (store, hc, _) = heads();
        let x = features(4);
        let perm = [2, 0, 3, 1];
        let out = hc.forward(&store, &x).unwrap();
        let out_p = hc.forward(&store, &x.select_rows(&perm)).unwrap();
        assert_eq!(out.select_rows(&perm), out_p);
        assert!(out.is_finite());
    }
}
