//! Identity resampling: low-rank adapters on every block's Q/K/V projections,
//! plus extra key/value tokens taken from an inpainted region.

use dualpaint_autograd::{Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::nn::{LowRank, QkvAdapter};
use crate::params::{Binder, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdAdapter {
    pub cfg: AdapterConfig,
    pub layers: Vec<QkvAdapter>,
}

impl IdAdapter {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        backbone: &Backbone,
        cfg: &AdapterConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.rank == 0 || !cfg.alpha.is_finite() {
            return Err(Error::Config("adapter rank must be positive and alpha finite".into()));
        }
        let d = backbone.cfg.d_model;
        let layers = (1..=backbone.cfg.n_layers)
            .map(|i| {
                let mk = |s: &str, store: &mut ParamStore<T>, rng: &mut _| {
                    LowRank::new(store, &format!("adapter.block{i}.{s}"), d, d, cfg.rank, cfg.alpha, rng)
                };
                QkvAdapter {
                    q: mk("q", store, rng),
                    k: mk("k", store, rng),
                    v: mk("v", store, rng),
                }
            })
            .collect();
        Ok(Self { cfg: cfg.clone(), layers })
    }
}

/// Per-layer identity keys and values of a completed clip's inpainted region.
#[derive(Debug, Clone, PartialEq)]
pub struct IdCache {
    pub clip_id: u32,
    /// `(K_id, V_id)` per layer, each `[Lid, d]`; empty when there is no region.
    pub layers: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl IdCache {
    pub fn empty(clip_id: u32) -> Self {
        Self { clip_id, layers: Vec::new() }
    }

    pub fn new(clip_id: u32, layers: Vec<(Tensor<f32>, Tensor<f32>)>) -> Result<Self> {
        let lid = layers.first().map(|(k, _)| k.shape()[0]);
        for (k, v) in &layers {
            if k.rank() != 2 || k.shape() != v.shape() || Some(k.shape()[0]) != lid {
                return Err(Error::Extent {
                    what: "id cache layer",
                    lhs: k.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        Ok(Self { clip_id, layers })
    }

    pub fn is_empty(&self) -> bool {
        self.token_count() == 0
    }

    /// Tokens per layer (`Lid`).
    pub fn token_count(&self) -> usize {
        self.layers.first().map(|(k, _)| k.shape()[0]).unwrap_or(0)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_model(&self) -> usize {
        self.layers.first().map(|(k, _)| k.shape()[1]).unwrap_or(0)
    }
}

/// Keys and values of the foreground rows of a layer's attention input,
/// through that layer's (adapted) projections.
pub fn extract_region_tokens<'t, T: Scalar>(
    b: &Binder<'t, T>,
    backbone: &Backbone,
    layer: usize,
    attn_input: Var<'t, T>,
    fg: &[bool],
    adapter: Option<&IdAdapter>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if layer == 0 || layer > backbone.blocks.len() {
        return Err(Error::Invalid(format!("layer {layer} outside 1..={}", backbone.blocks.len())));
    }
    if attn_input.shape()[0] != fg.len() {
        return Err(Error::Extent {
            what: "foreground flags",
            lhs: attn_input.shape(),
            rhs: vec![fg.len()],
        });
    }
    let rows: Vec<usize> = fg.iter().enumerate().filter_map(|(i, f)| f.then_some(i)).collect();
    backbone.blocks[layer - 1].region_kv(b, attn_input, &rows, adapter.map(|a| &a.layers[layer - 1]))
}

/// Multi-head attention over `[K, K_id]` and `[V, V_id]`.
pub fn resample_attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    id: Option<(Var<'t, T>, Var<'t, T>)>,
    heads: usize,
) -> Result<Var<'t, T>> {
    let (k, v) = match id {
        Some((kid, vid)) if kid.shape()[0] > 0 => {
            if kid.shape()[1] != k.shape()[1] || vid.shape()[1] != v.shape()[1] {
                return Err(Error::Extent {
                    what: "id tokens",
                    lhs: kid.shape(),
                    rhs: k.shape(),
                });
            }
            (Var::concat_rows(&[k, kid])?, Var::concat_rows(&[v, vid])?)
        }
        _ => (k, v),
    };
    Ok(q.multi_head_attention(k, v, heads)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{latent, rng, tiny_backbone};
    use dualpaint_autograd::Tape;

    fn mat<'t>(tape: &'t Tape<f64>, rows: usize, cols: usize, seed: u64) -> Var<'t, f64> {
        let z = latent([1, 1, rows, cols], seed);
        tape.constant_owned(Tensor::from_vec(z.data.iter().map(|&v| v as f64).collect(), &[rows, cols]).unwrap())
    }

    #[test]
    fn region_extraction_extremes() {
        let cfg = tiny_backbone();
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(&mut store, &cfg, &mut rng(0)).unwrap();
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &store);
        let h = mat(&tape, 6, cfg.d_model, 1);
        let (k, v) = extract_region_tokens(&b, &bb, 1, h, &[false; 6], None).unwrap();
        assert_eq!((k.shape()[0], v.shape()[0]), (0, 0));
        let (k, _) = extract_region_tokens(&b, &bb, 2, h, &[true; 6], None).unwrap();
        assert_eq!(k.shape(), vec![6, cfg.d_model]);
        assert!(extract_region_tokens(&b, &bb, 3, h, &[true; 6], None).is_err());
        assert!(extract_region_tokens(&b, &bb, 1, h, &[true; 5], None).is_err());
    }

    #[test]
    fn empty_id_set_is_plain_attention() {
        let tape = Tape::new();
        let (q, k, v) = (mat(&tape, 5, 8, 1), mat(&tape, 7, 8, 2), mat(&tape, 7, 8, 3));
        let plain = q.multi_head_attention(k, v, 2).unwrap().to_tensor();
        let empty = (mat(&tape, 0, 8, 4), mat(&tape, 0, 8, 5));
        assert_eq!(resample_attention(q, k, v, Some(empty), 2).unwrap().to_tensor(), plain);
        assert_eq!(resample_attention(q, k, v, None, 2).unwrap().to_tensor(), plain);
    }

    #[test]
    fn constant_values_give_constant_output() {
        let tape = Tape::new();
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.25 - 1.0).collect();
        let vconst = |n: usize| tape.constant_owned(Tensor::from_vec(row.repeat(n), &[n, 8]).unwrap());
        let (q, k, kid) = (mat(&tape, 4, 8, 1), mat(&tape, 6, 8, 2), mat(&tape, 3, 8, 3));
        let out = resample_attention(q, k, vconst(6), Some((kid, vconst(3))), 2).unwrap().to_tensor();
        for r in out.data().chunks(8) {
            for (a, b) in r.iter().zip(&row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aligned_id_key_saturates_softmax() {
        let tape = Tape::new();
        let d = 4;
        let q = mat(&tape, 1, d, 1);
        let (k, v) = (mat(&tape, 5, d, 2), mat(&tape, 5, d, 3));
        let kid = q.scale(100.0).unwrap();
        let vid = mat(&tape, 1, d, 4);
        let out = resample_attention(q, k, v, Some((kid, vid)), 1).unwrap().to_tensor();
        let want = vid.to_tensor();
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn id_width_must_match() {
        let tape = Tape::new();
        let (q, k, v) = (mat(&tape, 2, 8, 1), mat(&tape, 2, 8, 2), mat(&tape, 2, 8, 3));
        let bad = (mat(&tape, 1, 6, 4), mat(&tape, 1, 6, 5));
        assert!(resample_attention(q, k, v, Some(bad), 2).is_err());
    }

    #[test]
    fn cache_validation() {
        let t = |r| Tensor::<f32>::zeros(&[r, 4]);
        assert!(IdCache::new(0, vec![(t(3), t(3)), (t(3), t(3))]).is_ok());
        assert!(IdCache::new(0, vec![(t(3), t(2))]).is_err());
        assert!(IdCache::new(0, vec![(t(3), t(3)), (t(2), t(2))]).is_err());
        let c = IdCache::new(7, vec![(t(3), t(3))]).unwrap();
        assert_eq!((c.token_count(), c.n_layers(), c.d_model()), (3, 1, 4));
        assert!(IdCache::empty(1).is_empty());
    }

    #[test]
    fn adapter_starts_as_no_op() {
        let cfg = tiny_backbone();
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, &cfg, &mut rng(0)).unwrap();
        let ad = IdAdapter::new(&mut store, &bb, &AdapterConfig::default(), &mut rng(1)).unwrap();
        assert_eq!(ad.layers.len(), cfg.n_layers);
        for l in &ad.layers {
            assert!(store.value(l.q.b).data().iter().all(|&v| v == 0.0));
        }
        let bad = AdapterConfig { rank: 0, alpha: 1.0 };
        assert!(IdAdapter::new(&mut store, &bb, &bad, &mut rng(1)).is_err());
    }
}
