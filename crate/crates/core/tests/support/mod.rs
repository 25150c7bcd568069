//! Oracles shared by the integration and acceptance tests.
//!
//! Everything here recomputes expected values through a route independent of
//! the library code under test: gradients via central finite differences,
//! and (in later sections) exhaustive enumeration where the library uses a
//! smarter algorithm.

#![allow(dead_code)]

use privtree::rng::{stream_rng, Stream};
use privtree::tensor::{Graph, NodeId, ParamStore, Tensor, TensorError};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Contracts a node to a scalar with a fixed random linear functional so the
/// upstream gradient reaching the op under test is dense and non-trivial.
/// The functional depends only on `seed`, so repeated graph constructions
/// within one check see identical weights.
pub fn reduce_to_scalar(
    g: &mut Graph,
    node: NodeId,
    seed: u64,
) -> Result<NodeId, TensorError> {
    let mut rng = stream_rng(seed ^ 0x7ed0, Stream::Init);
    let shape = g.shape(node).to_vec();
    match shape.len() {
        1 => {
            let v: Vec<f64> = (0..shape[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let vl = g.leaf(Tensor::matrix(shape[0], 1, v)?);
            g.matmul(node, vl)
        }
        2 => {
            let u: Vec<f64> = (0..shape[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ul = g.leaf(Tensor::vector(u));
            let rows = g.matmul(ul, node)?;
            let v: Vec<f64> = (0..shape[1]).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let vl = g.leaf(Tensor::matrix(shape[1], 1, v)?);
            g.matmul(rows, vl)
        }
        rank => Err(TensorError::ShapeMismatch {
            op: "reduce_to_scalar",
            detail: format!("rank {} unsupported", rank),
        }),
    }
}

/// Worst relative error between backward-pass gradients and central finite
/// differences, over every parameter coordinate in the store. `graph_for`
/// must rebuild equivalent graphs (same dropout masks, same reducer) on each
/// call so the loss is a fixed function of the parameters.
pub fn gradient_rel_err(
    store: &mut ParamStore,
    graph_for: &mut dyn FnMut() -> Graph,
    build: &mut dyn FnMut(&mut Graph, &ParamStore) -> Result<NodeId, TensorError>,
) -> f64 {
    store.zero_grads();
    let mut g = graph_for();
    let loss = build(&mut g, store).expect("forward pass under test failed");
    g.backward(loss, store).expect("backward pass under test failed");
    let analytic = store.flatten_grads();

    let base = store.flatten_params();
    let mut probe = base.clone();
    let mut worst = 0.0f64;
    for j in 0..base.len() {
        probe[j] = base[j] + FD_STEP;
        store.assign_flat(&probe).unwrap();
        let mut gp = graph_for();
        let lp = build(&mut gp, store).expect("forward at +h failed");
        let plus = gp.value(lp).item();

        probe[j] = base[j] - FD_STEP;
        store.assign_flat(&probe).unwrap();
        let mut gm = graph_for();
        let lm = build(&mut gm, store).expect("forward at -h failed");
        let minus = gm.value(lm).item();

        probe[j] = base[j];
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let denom = analytic[j].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[j] - numeric).abs() / denom);
    }
    store.assign_flat(&base).unwrap();
    store.zero_grads();
    worst
}

/// Moves elements of `name` whose magnitude is below `min_abs` away from
/// zero, keeping sign. Used before checking kinked ops such as relu so the
/// finite-difference step never straddles the kink.
pub fn push_from_zero(store: &mut ParamStore, name: &str, min_abs: f64) {
    let t = store.get_mut(name).expect("param exists");
    for v in t.data_mut() {
        if v.abs() < min_abs {
            *v = if *v < 0.0 { -min_abs } else { min_abs };
        }
    }
}

/// Widens the gap between the two largest entries of every column of `name`
/// so argmax selections survive the finite-difference perturbation.
pub fn separate_column_maxima(store: &mut ParamStore, name: &str, min_gap: f64) {
    let t = store.get_mut(name).expect("param exists");
    let shape = t.shape().to_vec();
    assert_eq!(shape.len(), 2);
    let (rows, cols) = (shape[0], shape[1]);
    let d = t.data_mut();
    for j in 0..cols {
        let mut best = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        let mut best_row = 0;
        for i in 0..rows {
            let v = d[i * cols + j];
            if v > best {
                second = best;
                best = v;
                best_row = i;
            } else if v > second {
                second = v;
            }
        }
        if best - second < min_gap {
            d[best_row * cols + j] += min_gap;
        }
    }
}

type GradCase = Box<dyn Fn(u64) -> f64>;

/// One finite-difference check per forward primitive, keyed by primitive
/// name. Each closure maps a seed to the worst relative gradient error.
pub fn primitive_gradient_cases() -> Vec<(&'static str, GradCase)> {
    let mut cases: Vec<(&'static str, GradCase)> = Vec::new();

    fn store_with(
        seed: u64,
        params: &[(&str, &[usize], f64)],
    ) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, Stream::Init);
        for (name, shape, scale) in params {
            store
                .insert_random(name, shape.to_vec(), *scale, &mut rng)
                .unwrap();
        }
        store
    }

    cases.push((
        "matmul",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("a", &[3, 4], 1.0), ("b", &[4, 2], 1.0)]);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let c = g.matmul(a, b)?;
                reduce_to_scalar(g, c, seed)
            })
        }),
    ));

    cases.push((
        "matmul_vec",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("a", &[4], 1.0), ("b", &[4, 3], 1.0)]);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let c = g.matmul(a, b)?;
                reduce_to_scalar(g, c, seed)
            })
        }),
    ));

    cases.push((
        "add",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("a", &[2, 3], 1.0), ("b", &[2, 3], 1.0)]);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let c = g.add(a, b)?;
                reduce_to_scalar(g, c, seed)
            })
        }),
    ));

    cases.push((
        "add_bias",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("a", &[3, 4], 1.0), ("bias", &[4], 1.0)]);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "bias")?;
                let c = g.add_bias(a, b)?;
                reduce_to_scalar(g, c, seed)
            })
        }),
    ));

    cases.push((
        "embedding",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("table", &[5, 3], 1.0)]);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let t = g.param(s, "table")?;
                let e = g.embedding(t, &[0, 2, 2, 4])?;
                reduce_to_scalar(g, e, seed)
            })
        }),
    ));

    cases.push((
        "mean_rows",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("x", &[4, 3], 1.0)]);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let x = g.param(s, "x")?;
                let m = g.mean_rows(x)?;
                reduce_to_scalar(g, m, seed)
            })
        }),
    ));

    cases.push((
        "windows",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("x", &[5, 2], 1.0)]);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let x = g.param(s, "x")?;
                let w = g.windows(x, 3)?;
                reduce_to_scalar(g, w, seed)
            })
        }),
    ));

    cases.push((
        "conv1d",
        Box::new(|seed| {
            let mut store = store_with(
                seed,
                &[("x", &[6, 2], 1.0), ("k", &[6, 4], 1.0), ("b", &[4], 1.0)],
            );
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let x = g.param(s, "x")?;
                let k = g.param(s, "k")?;
                let b = g.param(s, "b")?;
                let c = g.conv1d(x, k, b, 3)?;
                reduce_to_scalar(g, c, seed)
            })
        }),
    ));

    cases.push((
        "max_rows",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("x", &[4, 3], 1.0)]);
            separate_column_maxima(&mut store, "x", 1e-3);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let x = g.param(s, "x")?;
                let m = g.max_rows(x)?;
                reduce_to_scalar(g, m, seed)
            })
        }),
    ));

    cases.push((
        "relu",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("x", &[7], 1.0)]);
            push_from_zero(&mut store, "x", 1e-3);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let x = g.param(s, "x")?;
                let r = g.relu(x);
                reduce_to_scalar(g, r, seed)
            })
        }),
    ));

    cases.push((
        "tanh",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("x", &[6], 1.0)]);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let x = g.param(s, "x")?;
                let t = g.tanh(x);
                reduce_to_scalar(g, t, seed)
            })
        }),
    ));

    cases.push((
        "sigmoid",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("x", &[6], 1.0)]);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let x = g.param(s, "x")?;
                let t = g.sigmoid(x);
                reduce_to_scalar(g, t, seed)
            })
        }),
    ));

    cases.push((
        "softmax",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("x", &[2, 5], 1.0)]);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let x = g.param(s, "x")?;
                let p = g.softmax(x);
                reduce_to_scalar(g, p, seed)
            })
        }),
    ));

    cases.push((
        "log_softmax",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("x", &[2, 5], 1.0)]);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let x = g.param(s, "x")?;
                let p = g.log_softmax(x);
                reduce_to_scalar(g, p, seed)
            })
        }),
    ));

    cases.push((
        "cross_entropy",
        Box::new(|seed| {
            // Offset keeps the pseudo-probabilities positive; the op only
            // needs p[target] > 0.
            let mut store = store_with(seed, &[("x", &[5], 0.4)]);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let x = g.param(s, "x")?;
                let off = g.leaf(Tensor::vector(vec![1.0; 5]));
                let p = g.add(x, off)?;
                g.cross_entropy(p, (seed % 5) as usize)
            })
        }),
    ));

    cases.push((
        "cross_entropy_logits",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("x", &[7], 2.0)]);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let x = g.param(s, "x")?;
                g.cross_entropy_logits(x, (seed % 7) as usize)
            })
        }),
    ));

    cases.push((
        "bce_with_logit",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("x", &[1], 2.0)]);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let x = g.param(s, "x")?;
                g.bce_with_logit(x, (seed % 2) as f64)
            })
        }),
    ));

    cases.push((
        "dropout",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("x", &[10], 1.0)]);
            gradient_rel_err(
                &mut store,
                &mut || Graph::train(stream_rng(seed, Stream::Dropout)),
                &mut |g, s| {
                    let x = g.param(s, "x")?;
                    let d = g.dropout(x, 0.3)?;
                    reduce_to_scalar(g, d, seed)
                },
            )
        }),
    ));

    cases.push((
        "layer_norm",
        Box::new(|seed| {
            let mut store = store_with(
                seed,
                &[("x", &[3, 5], 1.0), ("gain", &[5], 1.0), ("bias", &[5], 1.0)],
            );
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let x = g.param(s, "x")?;
                let gain = g.param(s, "gain")?;
                let bias = g.param(s, "bias")?;
                let y = g.layer_norm(x, gain, bias)?;
                reduce_to_scalar(g, y, seed)
            })
        }),
    ));

    cases.push((
        "concat",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("a", &[3], 1.0), ("b", &[4], 1.0)]);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let c = g.concat(&[a, b])?;
                reduce_to_scalar(g, c, seed)
            })
        }),
    ));

    cases.push((
        "concat_cols",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("a", &[2, 3], 1.0), ("b", &[2, 2], 1.0)]);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let c = g.concat_cols(&[a, b])?;
                reduce_to_scalar(g, c, seed)
            })
        }),
    ));

    cases.push((
        "scale",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("x", &[6], 1.0)]);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let x = g.param(s, "x")?;
                let y = g.scale(x, 2.5);
                reduce_to_scalar(g, y, seed)
            })
        }),
    ));

    cases.push((
        "transpose",
        Box::new(|seed| {
            let mut store = store_with(seed, &[("x", &[3, 4], 1.0)]);
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let x = g.param(s, "x")?;
                let y = g.transpose(x)?;
                reduce_to_scalar(g, y, seed)
            })
        }),
    ));

    cases.push((
        "sum_scalars",
        Box::new(|seed| {
            let mut store = store_with(
                seed,
                &[("a", &[1], 1.0), ("b", &[1], 1.0), ("c", &[1], 1.0)],
            );
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let c = g.param(s, "c")?;
                g.sum_scalars(&[a, b, c])
            })
        }),
    ));

    cases.push((
        "attention",
        Box::new(|seed| {
            let mut store = store_with(
                seed,
                &[("q", &[4, 3], 1.0), ("k", &[4, 3], 1.0), ("v", &[4, 3], 1.0)],
            );
            gradient_rel_err(&mut store, &mut Graph::eval, &mut |g, s| {
                let q = g.param(s, "q")?;
                let k = g.param(s, "k")?;
                let v = g.param(s, "v")?;
                let o = g.attention(q, k, v)?;
                reduce_to_scalar(g, o, seed)
            })
        }),
    ));

    cases
}

use std::collections::HashMap;

/// Edge list of a random tree: node i attaches to the root or to any
/// earlier node, so the result is a tree by construction.
pub fn random_tree_edges(rng: &mut impl Rng, n: usize) -> Vec<(String, String)> {
    let mut edges = Vec::with_capacity(n);
    for i in 0..n {
        let parent = if i == 0 {
            "*".to_string()
        } else {
            match rng.gen_range(0..=i) {
                0 => "*".to_string(),
                p => format!("n{}", p - 1),
            }
        };
        edges.push((format!("n{}", i), parent));
    }
    edges
}

pub fn random_taxonomy(rng: &mut impl Rng, n: usize) -> privtree::Taxonomy {
    privtree::Taxonomy::from_edges(random_tree_edges(rng, n)).unwrap()
}

/// Metric oracle that works on label strings and a raw parent map, sharing
/// no code with the library's id-based taxonomy or metric implementations.
pub struct StringMetricOracle {
    parent: HashMap<String, String>,
}

impl StringMetricOracle {
    pub fn new(edges: &[(String, String)]) -> Self {
        let parent = edges.iter().cloned().collect();
        StringMetricOracle { parent }
    }

    /// Root chain of `label`, deepest first, root excluded.
    pub fn chain(&self, label: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = label.to_string();
        loop {
            out.push(cur.clone());
            match self.parent.get(&cur) {
                Some(p) if p != "*" => cur = p.clone(),
                _ => break,
            }
        }
        out
    }

    pub fn depth_of(&self, label: &str) -> usize {
        self.chain(label).len()
    }

    /// (hit, predicted, truth) for the plain hierarchical metrics on a
    /// single record, with the prediction truncated to the truth's depth.
    pub fn hierarchical(&self, truth: &str, pred: &str) -> (u64, u64, u64) {
        let anc = self.chain(truth);
        let d_t = anc.len();
        let anc_hat: Vec<String> = self
            .chain(pred)
            .into_iter()
            .filter(|n| self.depth_of(n) <= d_t)
            .collect();
        let hit = anc.iter().filter(|n| anc_hat.contains(n)).count() as u64;
        (hit, anc_hat.len() as u64, anc.len() as u64)
    }

    /// Same with both sets restricted to the LCA and below.
    pub fn lca_restricted(&self, truth: &str, pred: &str) -> (u64, u64, u64) {
        let anc = self.chain(truth);
        let d_t = anc.len();
        let anc_hat: Vec<String> = self
            .chain(pred)
            .into_iter()
            .filter(|n| self.depth_of(n) <= d_t)
            .collect();
        // LCA of the truncated prediction leaf and the truth leaf: the
        // deepest label on both chains.
        let cut = anc_hat
            .iter()
            .filter(|n| anc.contains(n))
            .map(|n| self.depth_of(n))
            .max()
            .unwrap_or(0);
        let anc: Vec<String> = anc
            .into_iter()
            .filter(|n| self.depth_of(n) >= cut)
            .collect();
        let anc_hat: Vec<String> = anc_hat
            .into_iter()
            .filter(|n| self.depth_of(n) >= cut)
            .collect();
        let hit = anc.iter().filter(|n| anc_hat.contains(n)).count() as u64;
        (hit, anc_hat.len() as u64, anc.len() as u64)
    }
}
