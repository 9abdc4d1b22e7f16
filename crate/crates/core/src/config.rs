//! Run configuration. Every switch is one flat field so a config file,
//! the command line and the experiment manifest all describe a run the
//! same way.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hetgraph::{BuildOptions, DegreeMode, GraphOptions};

/// Slope used wherever the leaky-relu ablation inserts an activation.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    None,
    LeakyRelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
        }
    }

    /// Derivative at the pre-activation `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }
}

/// How a projected user/item pair is turned into a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Matching {
    /// Plain dot product of the projected vectors.
    Inner,
    /// Matching branch only, followed by the fusion layer.
    Mlp,
    /// Representation branch and matching branch, fused.
    #[default]
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub layers: usize,
    /// `α_0..α_L`; `None` means `1/L` for every layer.
    pub layer_weights: Option<Vec<f64>>,
    pub initial_residual: bool,
    pub layer_combination: bool,
    pub activation: Activation,
    pub node_dropout: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            layers: 4,
            layer_weights: None,
            initial_residual: true,
            layer_combination: true,
            activation: Activation::None,
            node_dropout: 0.0,
        }
    }
}

impl PropagationConfig {
    pub fn weights(&self) -> Vec<f64> {
        match &self.layer_weights {
            Some(w) => w.clone(),
            None => vec![1.0 / self.layers as f64; self.layers + 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if let Some(w) = &self.layer_weights {
            if w.len() != self.layers + 1 {
                return Err(Error::Config(format!("{} layer weights given for {} layers", w.len(), self.layers)));
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config("layer weights must be finite".into()));
            }
        }
        if !(0.0..1.0).contains(&self.node_dropout) {
            return Err(Error::Config("node dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Everything that, with the seed and the inputs, determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub lr: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Evaluate every this many epochs; 0 evaluates only after the last one.
    pub eval_every: usize,
    pub k: Vec<usize>,

    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub rl_depth: usize,
    pub ml_depth: usize,
    pub matching: Matching,
    pub activation: Activation,
    pub shared_towers: bool,
    pub net_dropout: f64,

    pub layers: usize,
    pub layer_weights: Option<Vec<f64>>,
    #[serde(rename = "use_layer_combination")]
    pub layer_combination: bool,
    pub initial_residual: bool,
    pub self_connection: bool,
    pub homogeneous_gcn: bool,
    pub node_dropout: f64,

    pub pretrain: bool,
    pub drop_comments: bool,
    pub drop_descriptions: bool,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 2021,
            lr: 1e-3,
            lambda: 1e-4,
            batch_size: 1024,
            epochs: 50,
            eval_every: 1,
            k: vec![10, 20],
            input_dim: 256,
            hidden: 128,
            output_dim: 64,
            rl_depth: 1,
            ml_depth: 2,
            matching: Matching::Combined,
            activation: Activation::None,
            shared_towers: false,
            net_dropout: 0.0,
            layers: 4,
            layer_weights: None,
            layer_combination: true,
            initial_residual: true,
            self_connection: false,
            homogeneous_gcn: false,
            node_dropout: 0.0,
            pretrain: true,
            drop_comments: false,
            drop_descriptions: false,
            deterministic: false,
        }
    }
}

/// Named presets for the ablation variants.
pub const ABLATIONS: [&str; 8] = [
    "w-active",
    "w-self-con",
    "no-layer-comb",
    "no-init-residual",
    "w-gcn",
    "no-pretrain",
    "no-comments",
    "no-descriptions",
];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.input_dim == 0 || self.hidden == 0 || self.output_dim == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.k.is_empty() || self.k.contains(&0) {
            return Err(Error::Config("k list must be non-empty and positive".into()));
        }
        if !(0.0..1.0).contains(&self.net_dropout) {
            return Err(Error::Config("network dropout must lie in [0, 1)".into()));
        }
        self.propagation().validate()
    }

    pub fn propagation(&self) -> PropagationConfig {
        PropagationConfig {
            layers: self.layers,
            layer_weights: self.layer_weights.clone(),
            initial_residual: self.initial_residual,
            layer_combination: self.layer_combination,
            activation: self.activation,
            node_dropout: self.node_dropout,
        }
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            include_comments: !self.drop_comments,
            include_descriptions: !self.drop_descriptions,
            graph: GraphOptions {
                degree_mode: if self.homogeneous_gcn { DegreeMode::Total } else { DegreeMode::RelationSpecific },
                self_connection: self.self_connection,
            },
        }
    }

    /// Applies one of [`ABLATIONS`].
    pub fn apply_ablation(&mut self, name: &str) -> Result<()> {
        match name {
            "w-active" => self.activation = Activation::LeakyRelu,
            "w-self-con" => {
                self.self_connection = true;
                self.layer_combination = false;
            }
            "no-layer-comb" => self.layer_combination = false,
            "no-init-residual" => self.initial_residual = false,
            "w-gcn" => self.homogeneous_gcn = true,
            "no-pretrain" => self.pretrain = false,
            "no-comments" => self.drop_comments = true,
            "no-descriptions" => self.drop_descriptions = true,
            other => return Err(Error::Config(format!("unknown ablation `{other}`; expected one of {ABLATIONS:?}"))),
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}
