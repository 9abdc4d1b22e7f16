//! Collaborative filtering on a user/item/description/comment heterograph.
//!
//! Text nodes are initialised from word vectors (or externally computed
//! sentence vectors), a parameter-free relational propagation pushes that
//! knowledge into user and item rows, and a small linear scoring network
//! is trained with a pairwise ranking loss.
//!
//! The pipeline, in order:
//!
//! 1. [`corpus`] parses reviews and produces the leave-one-out split.
//! 2. [`textembed`] turns descriptions and comments into vectors.
//! 3. [`hetgraph`] builds the typed graph and its normalisation.
//! 4. [`propagate`] runs the layered propagation and layer combination.
//! 5. [`prednet`] and [`trainer`] fit the scoring network.
//! 6. [`evaluator`] ranks held-out candidates for HR@k and NDCG@k.
//!
//! [`experiment`] wires the stages together behind a [`config::RunConfig`].

pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod hetgraph;
pub mod interchange;
pub mod prednet;
pub mod propagate;
pub mod synthetic;
pub mod textembed;
pub mod trainer;

pub use config::{Activation, Matching, PropagationConfig, RunConfig};
pub use corpus::{build_corpus, parse_reviews, InteractionCorpus, ReviewRecord};
pub use error::{Error, Result};
pub use hetgraph::{HeteroGraph, NodeIndex, NodeKind, Relation};
pub use prednet::PredictiveParams;
