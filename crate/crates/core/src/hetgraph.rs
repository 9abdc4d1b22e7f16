//! Typed user/item/description/comment graph with per-relation normalisation.
//!
//! Every undirected association is stored as two directed relations so that
//! messages flow both ways. An edge of relation `r` from `j` to `i` carries
//! the coefficient `1 / sqrt(|N^r_i| * |N^r_j|)`, where `|N^r_i|` counts the
//! sources `i` receives from under `r` and `|N^r_j|` counts the targets `j`
//! sends to under `r` (the neighbours of `j` under the inverse relation).

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;

use crate::corpus::{DescriptionRecord, InteractionCorpus, ReviewRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    User,
    Item,
    Description,
    Comment,
}

impl NodeKind {
    /// Node-kind byte used by the vector container.
    pub fn interchange_code(self) -> u8 {
        match self {
            NodeKind::Description => 0,
            NodeKind::Comment => 1,
            NodeKind::User => 2,
            NodeKind::Item => 3,
        }
    }
}

/// Contiguous global id ranges in the order users, items, descriptions, comments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NodeIndex {
    pub users: usize,
    pub items: usize,
    pub descriptions: usize,
    pub comments: usize,
}

impl NodeIndex {
    pub fn total(&self) -> usize {
        self.users + self.items + self.descriptions + self.comments
    }

    pub fn offset(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::User => 0,
            NodeKind::Item => self.users,
            NodeKind::Description => self.users + self.items,
            NodeKind::Comment => self.users + self.items + self.descriptions,
        }
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::User => self.users,
            NodeKind::Item => self.items,
            NodeKind::Description => self.descriptions,
            NodeKind::Comment => self.comments,
        }
    }

    pub fn global(&self, kind: NodeKind, ordinal: usize) -> usize {
        debug_assert!(ordinal < self.count(kind));
        self.offset(kind) + ordinal
    }

    /// Kind and per-kind ordinal of a global id.
    pub fn locate(&self, global: usize) -> Option<(NodeKind, usize)> {
        [NodeKind::User, NodeKind::Item, NodeKind::Description, NodeKind::Comment]
            .into_iter()
            .find_map(|k| {
                let off = self.offset(k);
                (global >= off && global < off + self.count(k)).then(|| (k, global - off))
            })
    }
}

/// Directed relation, named by message direction (source to target).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// user interacts with item
    UserToItem,
    /// item interacted by user
    ItemToUser,
    /// user writes comment
    UserToComment,
    /// comment written by user
    CommentToUser,
    /// comment about item
    CommentToItem,
    /// item has comment
    ItemToComment,
    /// description of item
    DescriptionToItem,
    /// item has description
    ItemToDescription,
    /// self-connection ablation only
    SelfLoop,
}

impl Relation {
    pub const ALL: [Relation; 9] = [
        Relation::UserToItem,
        Relation::ItemToUser,
        Relation::UserToComment,
        Relation::CommentToUser,
        Relation::CommentToItem,
        Relation::ItemToComment,
        Relation::DescriptionToItem,
        Relation::ItemToDescription,
        Relation::SelfLoop,
    ];

    pub fn inverse(self) -> Relation {
        use Relation::*;
        match self {
            UserToItem => ItemToUser,
            ItemToUser => UserToItem,
            UserToComment => CommentToUser,
            CommentToUser => UserToComment,
            CommentToItem => ItemToComment,
            ItemToComment => CommentToItem,
            DescriptionToItem => ItemToDescription,
            ItemToDescription => DescriptionToItem,
            SelfLoop => SelfLoop,
        }
    }

    pub fn endpoints(self) -> Option<(NodeKind, NodeKind)> {
        use NodeKind as K;
        use Relation::*;
        Some(match self {
            UserToItem => (K::User, K::Item),
            ItemToUser => (K::Item, K::User),
            UserToComment => (K::User, K::Comment),
            CommentToUser => (K::Comment, K::User),
            CommentToItem => (K::Comment, K::Item),
            ItemToComment => (K::Item, K::Comment),
            DescriptionToItem => (K::Description, K::Item),
            ItemToDescription => (K::Item, K::Description),
            SelfLoop => return None,
        })
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// How degrees enter the normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DegreeMode {
    /// Per-relation neighbour counts.
    #[default]
    RelationSpecific,
    /// Total degree over all relations, as in a plain GCN on the merged graph.
    Total,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GraphOptions {
    pub degree_mode: DegreeMode,
    pub self_connection: bool,
}

/// An undirected association in global ids, expanded into a relation pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Association {
    /// Forward direction; the inverse is added automatically.
    pub relation: Relation,
    pub source: usize,
    pub target: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RelationEdges {
    /// `(source, target)` pairs in insertion order.
    pub edges: Vec<(u32, u32)>,
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HeteroGraph {
    node_index: NodeIndex,
    options: GraphOptions,
    relations: Vec<RelationEdges>,
    /// Per relation: number of sources each node receives from.
    in_degree: Vec<Vec<u32>>,
    /// Per relation: number of targets each node sends to.
    out_degree: Vec<Vec<u32>>,
    /// Undirected degree over all non-loop relations.
    total_degree: Vec<u32>,
    // Incoming messages grouped by target, sorted by (source, relation).
    row_offsets: Vec<usize>,
    row_sources: Vec<u32>,
    row_coefficients: Vec<f64>,
}

impl HeteroGraph {
    /// Builds the graph from forward associations. Duplicates are dropped and
    /// endpoint kinds are checked against the relation.
    pub fn from_associations(node_index: NodeIndex, associations: &[Association], options: GraphOptions) -> Result<Self> {
        let n = node_index.total();
        let mut relations = vec![RelationEdges::default(); Relation::ALL.len()];
        let mut seen = HashSet::new();
        for a in associations {
            let (sk, tk) = a
                .relation
                .endpoints()
                .ok_or_else(|| Error::InvalidArgument("self-loops come from GraphOptions::self_connection".into()))?;
            let ok = matches!(node_index.locate(a.source), Some((k, _)) if k == sk)
                && matches!(node_index.locate(a.target), Some((k, _)) if k == tk);
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "{:?} edge {} -> {} does not connect {sk:?} to {tk:?}",
                    a.relation, a.source, a.target
                )));
            }
            if !seen.insert((a.relation.slot(), a.source, a.target)) {
                log::debug!("duplicate {:?} association {} -> {}", a.relation, a.source, a.target);
                continue;
            }
            relations[a.relation.slot()].edges.push((a.source as u32, a.target as u32));
            relations[a.relation.inverse().slot()].edges.push((a.target as u32, a.source as u32));
        }
        if options.self_connection {
            relations[Relation::SelfLoop.slot()].edges = (0..n as u32).map(|i| (i, i)).collect();
        }

        let mut in_degree = vec![vec![0u32; n]; Relation::ALL.len()];
        let mut out_degree = vec![vec![0u32; n]; Relation::ALL.len()];
        let mut total_degree = vec![0u32; n];
        for (slot, rel) in relations.iter().enumerate() {
            for &(s, t) in &rel.edges {
                in_degree[slot][t as usize] += 1;
                out_degree[slot][s as usize] += 1;
                if slot != Relation::SelfLoop.slot() {
                    total_degree[t as usize] += 1;
                }
            }
        }

        let mut graph = HeteroGraph {
            node_index,
            options,
            relations,
            in_degree,
            out_degree,
            total_degree,
            row_offsets: Vec::new(),
            row_sources: Vec::new(),
            row_coefficients: Vec::new(),
        };
        for slot in 0..Relation::ALL.len() {
            let rel = Relation::ALL[slot];
            let coefficients: Vec<f64> =
                graph.relations[slot].edges.iter().map(|&(s, t)| graph.coefficient(rel, t as usize, s as usize)).collect();
            graph.relations[slot].coefficients = coefficients;
        }
        graph.build_rows();
        Ok(graph)
    }

    fn build_rows(&mut self) {
        let n = self.node_index.total();
        let mut incoming: Vec<Vec<(u32, usize, f64)>> = vec![Vec::new(); n];
        for (slot, rel) in self.relations.iter().enumerate() {
            for (&(s, t), &c) in rel.edges.iter().zip(&rel.coefficients) {
                incoming[t as usize].push((s, slot, c));
            }
        }
        self.row_offsets = Vec::with_capacity(n + 1);
        self.row_offsets.push(0);
        for row in &mut incoming {
            row.sort_unstable_by_key(|&(s, slot, _)| (s, slot));
            for &(s, _, c) in row.iter() {
                self.row_sources.push(s);
                self.row_coefficients.push(c);
            }
            self.row_offsets.push(self.row_sources.len());
        }
    }

    /// Normalisation coefficient for the message `source -> target` under `relation`.
    ///
    /// Panics if either endpoint has zero degree, which cannot happen for an
    /// existing edge.
    pub fn coefficient(&self, relation: Relation, target: usize, source: usize) -> f64 {
        let slot = relation.slot();
        if relation == Relation::SelfLoop {
            assert_eq!(target, source, "self-loop must connect a node to itself");
            return 1.0 / (self.total_degree[target] as f64 + 1.0);
        }
        let (dt, ds) = match self.options.degree_mode {
            DegreeMode::RelationSpecific => (self.in_degree[slot][target], self.out_degree[slot][source]),
            DegreeMode::Total => {
                let extra = u32::from(self.options.self_connection);
                (self.total_degree[target] + extra, self.total_degree[source] + extra)
            }
        };
        assert!(dt > 0 && ds > 0, "zero degree on {relation:?} edge {source} -> {target}");
        1.0 / ((dt as f64) * (ds as f64)).sqrt()
    }

    pub fn node_index(&self) -> NodeIndex {
        self.node_index
    }

    pub fn options(&self) -> GraphOptions {
        self.options
    }

    pub fn relation(&self, relation: Relation) -> &RelationEdges {
        &self.relations[relation.slot()]
    }

    /// `|N^r_node|`: sources `node` receives from under `relation`.
    pub fn relation_degree(&self, relation: Relation, node: usize) -> u32 {
        self.in_degree[relation.slot()][node]
    }

    pub fn total_degree(&self, node: usize) -> u32 {
        self.total_degree[node]
    }

    pub fn num_nodes(&self) -> usize {
        self.node_index.total()
    }

    /// Incoming `(source, coefficient)` pairs of a node over all relations,
    /// in ascending source order.
    pub fn incoming(&self, target: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_offsets[target]..self.row_offsets[target + 1];
        self.row_sources[range.clone()].iter().map(|&s| s as usize).zip(self.row_coefficients[range].iter().copied())
    }

    pub fn edge_count(&self) -> usize {
        self.row_sources.len()
    }

    pub fn summary(&self) -> GraphSummary {
        GraphSummary {
            nodes: self.node_index,
            total_nodes: self.node_index.total(),
            relations: Relation::ALL.iter().map(|&r| (r, self.relation(r).edges.len())).filter(|&(_, c)| c > 0).collect(),
        }
    }
}

/// Audit dump of node counts and per-relation edge counts.
#[derive(Debug, Clone, Serialize)]
pub struct GraphSummary {
    pub nodes: NodeIndex,
    pub total_nodes: usize,
    pub relations: BTreeMap<Relation, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptionNode {
    pub item: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommentNode {
    pub user: u32,
    pub item: u32,
    pub text: String,
}

/// Text behind each description and comment node, indexed by ordinal.
#[derive(Debug, Clone, Default)]
pub struct TextCatalog {
    pub descriptions: Vec<DescriptionNode>,
    pub comments: Vec<CommentNode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    pub include_comments: bool,
    pub include_descriptions: bool,
    pub graph: GraphOptions,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { include_comments: true, include_descriptions: true, graph: GraphOptions::default() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DroppedRefs {
    pub comments: usize,
    pub descriptions: usize,
}

#[derive(Debug, Clone)]
pub struct BuiltGraph {
    pub graph: HeteroGraph,
    pub texts: TextCatalog,
    pub dropped: DroppedRefs,
}

/// Builds the heterograph from the training interactions.
///
/// `reviews` should already have test comments stripped; reviews of pairs
/// outside the training split never produce comment nodes regardless.
pub fn build_graph(
    corpus: &InteractionCorpus,
    reviews: &[ReviewRecord],
    descriptions: &[DescriptionRecord],
    options: BuildOptions,
) -> Result<BuiltGraph> {
    let train_pairs: HashSet<(u32, u32)> = corpus.train.iter().map(|t| (t.user, t.item)).collect();
    let mut dropped = DroppedRefs::default();

    let mut texts = TextCatalog::default();
    if options.include_descriptions {
        let mut by_item: HashMap<u32, &str> = HashMap::new();
        for d in descriptions {
            match corpus.items.get(&d.item_key) {
                Some(n) => {
                    if !d.description_text.trim().is_empty() {
                        by_item.entry(n).or_insert(&d.description_text);
                    }
                }
                None => dropped.descriptions += 1,
            }
        }
        let mut items: Vec<_> = by_item.into_iter().collect();
        items.sort_unstable_by_key(|&(n, _)| n);
        texts.descriptions = items.into_iter().map(|(item, t)| DescriptionNode { item, text: t.to_string() }).collect();
    }
    if options.include_comments {
        for r in reviews {
            let (Some(m), Some(n)) = (corpus.users.get(&r.user_key), corpus.items.get(&r.item_key)) else {
                dropped.comments += 1;
                continue;
            };
            if r.comment_text.trim().is_empty() || !train_pairs.contains(&(m, n)) {
                continue;
            }
            texts.comments.push(CommentNode { user: m, item: n, text: r.comment_text.clone() });
        }
    }
    if dropped.comments + dropped.descriptions > 0 {
        log::warn!(
            "dropped {} comments and {} descriptions referring to unknown users or items",
            dropped.comments,
            dropped.descriptions
        );
    }

    let index = NodeIndex {
        users: corpus.num_users(),
        items: corpus.num_items(),
        descriptions: texts.descriptions.len(),
        comments: texts.comments.len(),
    };
    let user = |m: u32| index.global(NodeKind::User, m as usize);
    let item = |n: u32| index.global(NodeKind::Item, n as usize);
    let mut associations = Vec::with_capacity(corpus.train.len() + 2 * texts.comments.len() + texts.descriptions.len());
    let mut interact_seen = HashSet::new();
    for t in &corpus.train {
        if interact_seen.insert((t.user, t.item)) {
            associations.push(Association { relation: Relation::UserToItem, source: user(t.user), target: item(t.item) });
        }
    }
    for (q, c) in texts.comments.iter().enumerate() {
        let cid = index.global(NodeKind::Comment, q);
        associations.push(Association { relation: Relation::UserToComment, source: user(c.user), target: cid });
        associations.push(Association { relation: Relation::CommentToItem, source: cid, target: item(c.item) });
    }
    for (p, d) in texts.descriptions.iter().enumerate() {
        let did = index.global(NodeKind::Description, p);
        associations.push(Association { relation: Relation::DescriptionToItem, source: did, target: item(d.item) });
    }
    let graph = HeteroGraph::from_associations(index, &associations, options.graph)?;
    Ok(BuiltGraph { graph, texts, dropped })
}
