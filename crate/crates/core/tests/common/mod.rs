//! Independent reference implementations shared by the integration tests.
//!
//! Nothing here calls into the normalisation or propagation code under
//! test: the oracle rebuilds degrees and coefficients from the raw
//! association list and multiplies dense matrices.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use textgraph_rec::config::{Activation, Matching, PropagationConfig};
use textgraph_rec::hetgraph::{Association, DegreeMode, GraphOptions, HeteroGraph, NodeIndex, NodeKind, Relation};
use textgraph_rec::prednet::{Architecture, Dropout, PredictiveParams};

/// A random typed graph with at most `max_nodes` nodes and `max_edges`
/// directed edges (forward plus inverse).
pub struct RandomGraph {
    pub index: NodeIndex,
    pub associations: Vec<Association>,
}

pub fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize, max_edges: usize) -> RandomGraph {
    loop {
        let users = rng.gen_range(1..=12);
        let items = rng.gen_range(1..=12);
        let descriptions = rng.gen_range(0..=items);
        let comments = rng.gen_range(0..=14);
        let index = NodeIndex { users, items, descriptions, comments };
        if index.total() > max_nodes {
            continue;
        }
        let g = |k: NodeKind, o: usize| index.global(k, o);
        let mut set = BTreeSet::new();
        let ui = rng.gen_range(0..=users * items);
        for _ in 0..ui {
            let (u, i) = (rng.gen_range(0..users), rng.gen_range(0..items));
            set.insert((Relation::UserToItem, g(NodeKind::User, u), g(NodeKind::Item, i)));
        }
        for d in 0..descriptions {
            set.insert((Relation::DescriptionToItem, g(NodeKind::Description, d), g(NodeKind::Item, rng.gen_range(0..items))));
        }
        for c in 0..comments {
            let cg = g(NodeKind::Comment, c);
            set.insert((Relation::UserToComment, g(NodeKind::User, rng.gen_range(0..users)), cg));
            set.insert((Relation::CommentToItem, cg, g(NodeKind::Item, rng.gen_range(0..items))));
        }
        if 2 * set.len() > max_edges {
            continue;
        }
        let mut associations: Vec<Association> =
            set.into_iter().map(|(relation, source, target)| Association { relation, source, target }).collect();
        // Insertion order must not matter; shuffle so tests do not rely on it.
        use rand::seq::SliceRandom;
        associations.shuffle(rng);
        return RandomGraph { index, associations };
    }
}

/// Dense `n × n` propagation operator, one per relation, built straight
/// from the association list.
pub fn dense_operators(n: usize, associations: &[Association], opts: GraphOptions) -> Vec<Array2<f64>> {
    let mut directed: Vec<(Relation, usize, usize)> = Vec::new();
    let mut seen = BTreeSet::new();
    for a in associations {
        if seen.insert((a.relation, a.source, a.target)) {
            directed.push((a.relation, a.source, a.target));
            directed.push((a.relation.inverse(), a.target, a.source));
        }
    }
    let mut total = vec![0.0f64; n];
    for &(_, _, t) in &directed {
        total[t] += 1.0;
    }
    let mut ops = Vec::new();
    for rel in Relation::ALL {
        if rel == Relation::SelfLoop {
            continue;
        }
        let edges: Vec<(usize, usize)> = directed.iter().filter(|d| d.0 == rel).map(|d| (d.1, d.2)).collect();
        let mut indeg = vec![0.0f64; n];
        let mut outdeg = vec![0.0f64; n];
        for &(s, t) in &edges {
            indeg[t] += 1.0;
            outdeg[s] += 1.0;
        }
        let mut a = Array2::zeros((n, n));
        for &(s, t) in &edges {
            a[[t, s]] = match opts.degree_mode {
                DegreeMode::RelationSpecific => 1.0 / (indeg[t] * outdeg[s]).sqrt(),
                DegreeMode::Total => {
                    let bump = if opts.self_connection { 1.0 } else { 0.0 };
                    1.0 / ((total[t] + bump) * (total[s] + bump)).sqrt()
                }
            };
        }
        ops.push(a);
    }
    if opts.self_connection {
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            a[[i, i]] = 1.0 / (total[i] + 1.0);
        }
        ops.push(a);
    }
    ops
}

/// Layered propagation and combination with dense products.
pub fn dense_propagate(ops: &[Array2<f64>], e0: &Array2<f64>, cfg: &PropagationConfig) -> Array2<f64> {
    let step = |prev: &Array2<f64>| -> Array2<f64> {
        let mut out = Array2::zeros(prev.raw_dim());
        for a in ops {
            out += &a.dot(prev);
        }
        out.mapv_inplace(|x| cfg.activation.apply(x));
        out
    };
    let mut layers = vec![e0.clone()];
    for l in 1..=cfg.layers {
        let mut next = step(&layers[l - 1]);
        if l >= 2 && cfg.initial_residual {
            next += &layers[1];
        }
        layers.push(next);
    }
    if !cfg.layer_combination {
        return layers.pop().unwrap();
    }
    let w = cfg.weights();
    let mut out = Array2::zeros(e0.raw_dim());
    for (m, a) in layers.iter().zip(w) {
        out.scaled_add(a, m);
    }
    out
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
}

pub fn build(g: &RandomGraph, opts: GraphOptions) -> HeteroGraph {
    HeteroGraph::from_associations(g.index, &g.associations, opts).expect("generator emits valid associations")
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn small_arch(matching: Matching, activation: Activation, shared_towers: bool) -> Architecture {
    Architecture { input_dim: 5, hidden: 4, output_dim: 3, rl_depth: 1, ml_depth: 2, matching, activation, shared_towers }
}

/// A batch that scores user rows `u_idx` against item rows `v_idx` of the
/// projected matrix, with row reuse, weighted by `w`.
pub struct ScoreProblem {
    pub x: Array2<f64>,
    pub u_idx: Vec<usize>,
    pub v_idx: Vec<usize>,
    pub w: Array1<f64>,
}

impl ScoreProblem {
    pub fn random(rng: &mut ChaCha8Rng, input_dim: usize) -> Self {
        let rows = 6;
        let pairs = 8;
        ScoreProblem {
            x: random_matrix(rng, rows, input_dim),
            u_idx: (0..pairs).map(|_| rng.gen_range(0..rows)).collect(),
            v_idx: (0..pairs).map(|_| rng.gen_range(0..rows)).collect(),
            w: Array1::from_shape_simple_fn(pairs, || rng.gen_range(-1.0..1.0)),
        }
    }

    /// `Σ_b w_b · score(P[u_b], P[v_b])` with `P = project(x)`.
    pub fn objective(&self, params: &PredictiveParams) -> f64 {
        let (p, _) = params.project(&self.x, &mut Dropout::off()).unwrap();
        let (s, _) = params.score(&p.select(Axis(0), &self.u_idx), &p.select(Axis(0), &self.v_idx), &mut Dropout::off()).unwrap();
        s.dot(&self.w)
    }

    /// Analytic gradient of [`Self::objective`].
    pub fn gradient(&self, params: &PredictiveParams) -> PredictiveParams {
        let (p, pc) = params.project(&self.x, &mut Dropout::off()).unwrap();
        let (_, sc) = params.score(&p.select(Axis(0), &self.u_idx), &p.select(Axis(0), &self.v_idx), &mut Dropout::off()).unwrap();
        let mut grads = params.zeros_like();
        let (du, dv) = params.score_backward(&sc, &self.w, &mut grads).unwrap();
        let mut dp = Array2::zeros(p.raw_dim());
        for (r, &i) in self.u_idx.iter().enumerate() {
            dp.row_mut(i).scaled_add(1.0, &du.row(r));
        }
        for (r, &i) in self.v_idx.iter().enumerate() {
            dp.row_mut(i).scaled_add(1.0, &dv.row(r));
        }
        params.project_backward(&pc, dp, &mut grads);
        grads
    }
}

/// Random parameters with non-zero biases so every term is exercised.
pub fn random_params(arch: Architecture, rng: &mut ChaCha8Rng) -> PredictiveParams {
    let mut p = PredictiveParams::init(arch, rng.gen()).unwrap();
    for s in p.slices_mut() {
        for x in s.iter_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    p
}

/// `(analytic, numeric)` for `coords` random coordinates, central
/// differences with step `h`.
pub fn finite_difference_pairs(
    problem: &ScoreProblem,
    params: &PredictiveParams,
    coords: usize,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<(f64, f64)> {
    let grads = problem.gradient(params);
    let flat_grads: Vec<Vec<f64>> = grads.slices().into_iter().map(|s| s.to_vec()).collect();
    let sizes: Vec<usize> = flat_grads.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let mut out = Vec::with_capacity(coords);
    for _ in 0..coords {
        let mut k = rng.gen_range(0..total);
        let mut t = 0;
        while k >= sizes[t] {
            k -= sizes[t];
            t += 1;
        }
        let mut plus = params.clone();
        plus.slices_mut()[t][k] += h;
        let mut minus = params.clone();
        minus.slices_mut()[t][k] -= h;
        let numeric = (problem.objective(&plus) - problem.objective(&minus)) / (2.0 * h);
        out.push((flat_grads[t][k], numeric));
    }
    out
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
