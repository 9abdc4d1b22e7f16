mod common;

use ndarray::{array, Array2};
use rand::seq::SliceRandom;
use rand::Rng;

use common::*;
use textgraph_rec::config::{Activation, PropagationConfig};
use textgraph_rec::hetgraph::{Association, DegreeMode, GraphOptions, HeteroGraph, NodeIndex, Relation};
use textgraph_rec::propagate::{propagate_all, propagate_layer, run_embedding_network};

fn variants() -> Vec<(GraphOptions, PropagationConfig)> {
    let mut out = Vec::new();
    for degree_mode in [DegreeMode::RelationSpecific, DegreeMode::Total] {
        for self_connection in [false, true] {
            for (activation, initial_residual, layer_combination) in [
                (Activation::None, true, true),
                (Activation::LeakyRelu, true, true),
                (Activation::None, false, true),
                (Activation::None, true, false),
            ] {
                out.push((
                    GraphOptions { degree_mode, self_connection },
                    PropagationConfig { layers: 4, initial_residual, layer_combination, activation, ..Default::default() },
                ));
            }
        }
    }
    out
}

#[test]
fn matches_dense_oracle_across_variants() {
    let mut rng = seeded(11);
    for (opts, cfg) in variants() {
        for _ in 0..4 {
            let g = random_graph(&mut rng, 50, 200);
            let dim = rng.gen_range(1..=8);
            let e0 = random_matrix(&mut rng, g.index.total(), dim);
            let ours = run_embedding_network(&build(&g, opts), &e0, &cfg).unwrap();
            let ops = dense_operators(g.index.total(), &g.associations, opts);
            let oracle = dense_propagate(&ops, &e0, &cfg);
            let diff = max_abs_diff(&ours, &oracle);
            assert!(diff <= 1e-9, "{opts:?} {cfg:?}: diff {diff}");
        }
    }
}

#[test]
fn coefficients_match_dense_normalisation() {
    let mut rng = seeded(12);
    for _ in 0..20 {
        let g = random_graph(&mut rng, 50, 200);
        let opts = GraphOptions::default();
        let graph = build(&g, opts);
        let ops = dense_operators(g.index.total(), &g.associations, opts);
        let non_loop: Vec<Relation> = Relation::ALL.into_iter().filter(|&r| r != Relation::SelfLoop).collect();
        for (r, dense) in non_loop.iter().zip(&ops) {
            let edges = graph.relation(*r);
            for (&(s, t), &c) in edges.edges.iter().zip(&edges.coefficients) {
                assert!((c - dense[[t as usize, s as usize]]).abs() <= 1e-12);
                // symmetric under the inverse relation
                assert_eq!(c, graph.coefficient(r.inverse(), s as usize, t as usize));
            }
        }
    }
}

#[test]
fn coefficient_formula_examples() {
    // one item with four users: item in-degree 4 under user→item, each user out-degree 1
    let index = NodeIndex { users: 4, items: 1, descriptions: 0, comments: 0 };
    let assoc: Vec<_> = (0..4).map(|u| Association { relation: Relation::UserToItem, source: u, target: 4 }).collect();
    let g = HeteroGraph::from_associations(index, &assoc, GraphOptions::default()).unwrap();
    assert_eq!(g.coefficient(Relation::UserToItem, 4, 0), 0.5);
    assert_eq!(g.coefficient(Relation::ItemToUser, 0, 4), 0.5);
    let single = HeteroGraph::from_associations(index, &assoc[..1], GraphOptions::default()).unwrap();
    assert_eq!(single.coefficient(Relation::UserToItem, 4, 0), 1.0);
}

fn chain() -> HeteroGraph {
    // u=0, v=1, d=2
    let index = NodeIndex { users: 1, items: 1, descriptions: 1, comments: 0 };
    let assoc = [
        Association { relation: Relation::UserToItem, source: 0, target: 1 },
        Association { relation: Relation::DescriptionToItem, source: 2, target: 1 },
    ];
    HeteroGraph::from_associations(index, &assoc, GraphOptions::default()).unwrap()
}

fn triangle() -> HeteroGraph {
    // u=0, v=1, c=2
    let index = NodeIndex { users: 1, items: 1, descriptions: 0, comments: 1 };
    let assoc = [
        Association { relation: Relation::UserToItem, source: 0, target: 1 },
        Association { relation: Relation::UserToComment, source: 0, target: 2 },
        Association { relation: Relation::CommentToItem, source: 2, target: 1 },
    ];
    HeteroGraph::from_associations(index, &assoc, GraphOptions::default()).unwrap()
}

#[test]
fn chain_by_hand() {
    let x = array![0.7, -1.3, 2.0];
    let mut e0 = Array2::zeros((3, 3));
    e0.row_mut(2).assign(&x);
    let cfg = PropagationConfig { layers: 2, ..Default::default() };
    let layers = propagate_all(&chain(), &e0, &cfg).unwrap();
    assert_eq!(layers[1].row(0), Array2::<f64>::zeros((1, 3)).row(0));
    assert_eq!(layers[1].row(1), x);
    assert_eq!(layers[1].row(2), Array2::<f64>::zeros((1, 3)).row(0));
    assert_eq!(layers[2].row(0), x);
    let out = run_embedding_network(&chain(), &e0, &cfg).unwrap();
    let want = &x * 0.5;
    assert!(out.row(0).iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-12));
}

#[test]
fn triangle_by_hand() {
    let y = array![1.5, -0.25];
    let mut e0 = Array2::zeros((3, 2));
    e0.row_mut(2).assign(&y);
    let cfg = PropagationConfig { layers: 2, ..Default::default() };
    let layers = propagate_all(&triangle(), &e0, &cfg).unwrap();
    assert_eq!(layers[1].row(0), y);
    assert_eq!(layers[1].row(1), y);
    assert_eq!(layers[1][[2, 0]], 0.0);
    let two_y = &y * 2.0;
    assert!(layers[2].row(0).iter().zip(&two_y).all(|(a, b)| (a - b).abs() <= 1e-12));
}

#[test]
fn linear_without_activation() {
    let mut rng = seeded(13);
    let cfg = PropagationConfig::default();
    for _ in 0..10 {
        let g = random_graph(&mut rng, 50, 200);
        let graph = build(&g, GraphOptions::default());
        let n = g.index.total();
        let (e, f) = (random_matrix(&mut rng, n, 4), random_matrix(&mut rng, n, 4));
        let (a, b) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let mixed = run_embedding_network(&graph, &(&e * a + &f * b), &cfg).unwrap();
        let split = run_embedding_network(&graph, &e, &cfg).unwrap() * a + run_embedding_network(&graph, &f, &cfg).unwrap() * b;
        let scale = mixed.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        assert!(max_abs_diff(&mixed, &split) <= 1e-9 * scale);
    }
}

#[test]
fn total_degree_mode_is_plain_gcn() {
    let mut rng = seeded(14);
    for self_connection in [false, true] {
        for _ in 0..10 {
            let g = random_graph(&mut rng, 50, 200);
            let n = g.index.total();
            // merged undirected adjacency
            let mut a = Array2::<f64>::zeros((n, n));
            for x in &g.associations {
                a[[x.source, x.target]] = 1.0;
                a[[x.target, x.source]] = 1.0;
            }
            if self_connection {
                for i in 0..n {
                    a[[i, i]] = 1.0;
                }
            }
            let d: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
            let mut lap = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    if a[[i, j]] != 0.0 {
                        lap[[i, j]] = 1.0 / (d[i] * d[j]).sqrt();
                    }
                }
            }
            let cfg = PropagationConfig::default();
            let e0 = random_matrix(&mut rng, n, 3);
            let oracle = dense_propagate(&[lap], &e0, &cfg);
            let graph = build(&g, GraphOptions { degree_mode: DegreeMode::Total, self_connection });
            let ours = run_embedding_network(&graph, &e0, &cfg).unwrap();
            assert!(max_abs_diff(&ours, &oracle) <= 1e-9);
        }
    }
}

#[test]
fn edge_order_does_not_matter() {
    let mut rng = seeded(15);
    let cfg = PropagationConfig::default();
    for _ in 0..10 {
        let mut g = random_graph(&mut rng, 50, 200);
        let e0 = random_matrix(&mut rng, g.index.total(), 5);
        let first = run_embedding_network(&build(&g, GraphOptions::default()), &e0, &cfg).unwrap();
        g.associations.shuffle(&mut rng);
        let second = run_embedding_network(&build(&g, GraphOptions::default()), &e0, &cfg).unwrap();
        // rows are reduced in a canonical order, so this is bit-exact
        assert_eq!(first, second);
    }
}

#[test]
fn residual_is_exactly_layer_one() {
    let mut rng = seeded(16);
    let with = PropagationConfig::default();
    let without = PropagationConfig { initial_residual: false, ..Default::default() };
    for _ in 0..5 {
        let g = random_graph(&mut rng, 50, 200);
        let graph = build(&g, GraphOptions::default());
        let e0 = random_matrix(&mut rng, g.index.total(), 3);
        let layers = propagate_all(&graph, &e0, &with).unwrap();
        for l in 2..=with.layers {
            let bare = propagate_layer(&graph, &layers[l - 1], None, l, &without).unwrap();
            assert_eq!(layers[l], &bare + &layers[1]);
        }
    }
    // No edges at all: every layer equals layer 1, which is zero.
    let index = NodeIndex { users: 2, items: 2, descriptions: 1, comments: 0 };
    let graph = HeteroGraph::from_associations(index, &[], GraphOptions::default()).unwrap();
    let e0 = random_matrix(&mut rng, 5, 2);
    let layers = propagate_all(&graph, &e0, &with).unwrap();
    for l in 2..=with.layers {
        assert_eq!(layers[l], layers[1]);
    }
}

#[test]
fn invalid_inputs_rejected() {
    let g = chain();
    let cfg = PropagationConfig::default();
    assert!(run_embedding_network(&g, &Array2::zeros((2, 3)), &cfg).is_err());
    let mut bad = Array2::zeros((3, 2));
    bad[[2, 0]] = f64::INFINITY;
    assert!(run_embedding_network(&g, &bad, &cfg).is_err());
    let wrong_kind = [Association { relation: Relation::UserToItem, source: 1, target: 0 }];
    let index = NodeIndex { users: 1, items: 1, descriptions: 0, comments: 0 };
    assert!(HeteroGraph::from_associations(index, &wrong_kind, GraphOptions::default()).is_err());
}
