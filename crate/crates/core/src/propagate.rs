//! Parameter-free relational propagation and layer combination.
//!
//! Layer 1 aggregates normalised neighbour rows of the initial embeddings.
//! Every deeper layer aggregates the previous layer and adds the layer-1
//! output back in (the initial residual). The final embedding is the
//! weighted sum of all layers, including layer 0.

use ndarray::{Array2, Zip};
use rand::Rng;

use crate::config::{Activation, PropagationConfig};
use crate::error::{Error, Result};
use crate::hetgraph::{HeteroGraph, NodeKind};
use crate::textembed::{TextEmbeddingSet, TextNodeId};

/// One row per graph node, in [`NodeIndex`](crate::hetgraph::NodeIndex) order.
pub type EmbeddingMatrix = Array2<f64>;

/// Zero user and item rows; text rows copied from `texts`.
///
/// Returns the matrix and the number of text nodes with no vector.
pub fn init_embeddings(graph: &HeteroGraph, texts: &TextEmbeddingSet) -> Result<(EmbeddingMatrix, usize)> {
    let index = graph.node_index();
    let dim = texts.dimension();
    let mut e0 = Array2::zeros((index.total(), dim));
    let mut missing = 0;
    for (kind, make) in [
        (NodeKind::Description, TextNodeId::description as fn(u64) -> TextNodeId),
        (NodeKind::Comment, TextNodeId::comment),
    ] {
        for ordinal in 0..index.count(kind) {
            match texts.get(make(ordinal as u64)) {
                Some(v) => e0.row_mut(index.global(kind, ordinal)).assign(&ndarray::aview1(v)),
                None => missing += 1,
            }
        }
    }
    if missing > 0 {
        log::warn!("{missing} text nodes have no initial vector; left at zero");
    }
    Ok((e0, missing))
}

fn check_finite(m: &EmbeddingMatrix, layer: usize) -> Result<()> {
    for (i, row) in m.outer_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("layer {layer} embedding of node {i}")));
        }
    }
    Ok(())
}

fn aggregate(graph: &HeteroGraph, prev: &EmbeddingMatrix, source_scale: Option<&[f64]>, activation: Activation) -> EmbeddingMatrix {
    let mut out = Array2::zeros(prev.raw_dim());
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        for (j, c) in graph.incoming(i) {
            let c = match source_scale {
                Some(s) => c * s[j],
                None => c,
            };
            if c == 0.0 {
                continue;
            }
            Zip::from(&mut row).and(prev.row(j)).for_each(|o, &x| *o += c * x);
        }
        if activation != Activation::None {
            row.mapv_inplace(|x| activation.apply(x));
        }
    }
    out
}

/// Computes `E^(l)` from `E^(l-1)`.
///
/// `layer1` must be given exactly when `l >= 2` and the residual is enabled.
pub fn propagate_layer(
    graph: &HeteroGraph,
    prev: &EmbeddingMatrix,
    layer1: Option<&EmbeddingMatrix>,
    l: usize,
    cfg: &PropagationConfig,
) -> Result<EmbeddingMatrix> {
    propagate_layer_scaled(graph, prev, layer1, l, cfg, None)
}

fn propagate_layer_scaled(
    graph: &HeteroGraph,
    prev: &EmbeddingMatrix,
    layer1: Option<&EmbeddingMatrix>,
    l: usize,
    cfg: &PropagationConfig,
    source_scale: Option<&[f64]>,
) -> Result<EmbeddingMatrix> {
    if l == 0 {
        return Err(Error::InvalidArgument("propagation layers are numbered from 1".into()));
    }
    let wants_residual = l >= 2 && cfg.initial_residual;
    if wants_residual != layer1.is_some() {
        return Err(Error::InvalidArgument(format!(
            "layer {l}: residual input must be {}",
            if wants_residual { "present" } else { "absent" }
        )));
    }
    if prev.nrows() != graph.num_nodes() {
        return Err(Error::Shape(format!("{} embedding rows for {} nodes", prev.nrows(), graph.num_nodes())));
    }
    let mut out = aggregate(graph, prev, source_scale, cfg.activation);
    if let Some(first) = layer1 {
        if first.raw_dim() != out.raw_dim() {
            return Err(Error::Shape("layer-1 residual has a different shape".into()));
        }
        out += first;
    }
    check_finite(&out, l)?;
    Ok(out)
}

/// `Σ α_l E^(l)`, or `E^(L)` alone when layer combination is off.
pub fn combine_layers(layers: &[EmbeddingMatrix], cfg: &PropagationConfig) -> Result<EmbeddingMatrix> {
    let last = layers.last().ok_or(Error::Empty("no layers to combine"))?;
    if layers.iter().any(|m| m.raw_dim() != last.raw_dim()) {
        return Err(Error::Shape("layers differ in shape".into()));
    }
    if !cfg.layer_combination {
        return Ok(last.clone());
    }
    let weights = cfg.weights();
    if weights.len() != layers.len() {
        return Err(Error::Shape(format!("{} weights for {} layers", weights.len(), layers.len())));
    }
    let mut out = Array2::zeros(last.raw_dim());
    for (m, &w) in layers.iter().zip(&weights) {
        out.scaled_add(w, m);
    }
    Ok(out)
}

/// Every layer `E^(0)..E^(L)`.
pub fn propagate_all(graph: &HeteroGraph, e0: &EmbeddingMatrix, cfg: &PropagationConfig) -> Result<Vec<EmbeddingMatrix>> {
    propagate_all_scaled(graph, e0, cfg, |_| None)
}

fn propagate_all_scaled<F>(graph: &HeteroGraph, e0: &EmbeddingMatrix, cfg: &PropagationConfig, mut scale: F) -> Result<Vec<EmbeddingMatrix>>
where
    F: FnMut(usize) -> Option<Vec<f64>>,
{
    cfg.validate()?;
    let mut layers = vec![e0.clone()];
    for l in 1..=cfg.layers {
        let residual = (l >= 2 && cfg.initial_residual).then(|| &layers[1]);
        let s = scale(l);
        let next = propagate_layer_scaled(graph, &layers[l - 1], residual, l, cfg, s.as_deref())?;
        layers.push(next);
    }
    Ok(layers)
}

/// Propagates `L` layers and combines them into the final node embeddings.
pub fn run_embedding_network(graph: &HeteroGraph, e0: &EmbeddingMatrix, cfg: &PropagationConfig) -> Result<EmbeddingMatrix> {
    combine_layers(&propagate_all(graph, e0, cfg)?, cfg)
}

/// Same as [`run_embedding_network`] but with node dropout: at each layer
/// every node's outgoing messages are dropped with probability
/// `cfg.node_dropout` and survivors scaled by `1 / (1 - p)`.
pub fn run_embedding_network_with_dropout<R: Rng>(
    graph: &HeteroGraph,
    e0: &EmbeddingMatrix,
    cfg: &PropagationConfig,
    rng: &mut R,
) -> Result<EmbeddingMatrix> {
    let p = cfg.node_dropout;
    if p == 0.0 {
        return run_embedding_network(graph, e0, cfg);
    }
    let keep = 1.0 / (1.0 - p);
    let n = graph.num_nodes();
    let layers = propagate_all_scaled(graph, e0, cfg, |_| {
        Some((0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect())
    })?;
    combine_layers(&layers, cfg)
}
