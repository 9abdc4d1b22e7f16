use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use textgraph_rec::config::{Activation, Matching, RunConfig};
use textgraph_rec::experiment::{self, ExperimentInputs, RunOptions, TextSource};
use textgraph_rec::synthetic::PlantedSpec;

#[derive(Parser)]
#[command(name = "textgraph", version, about = "Text-initialised heterograph recommender experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Run(RunArgs),
    /// One run per value of a hyper-parameter, collated into a table.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// layers | output-size | dropout-net | dropout-node | lambda | rl-depth | ml-depth
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Write the planted-preference fixture (reviews, metadata, word vectors).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        items_per_block: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 256)]
        dim: usize,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    reviews: PathBuf,
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Word-vector text file used to embed descriptions and comments.
    #[arg(long, conflicts_with = "embeddings")]
    glove: Option<PathBuf>,
    /// Interchange file of precomputed text vectors.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Stopword list, one word per line (built-in English list otherwise).
    #[arg(long)]
    stoplist: Option<PathBuf>,
    /// Flat TOML config; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,

    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    input_dim: Option<usize>,
    #[arg(long)]
    output_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    rl_depth: Option<usize>,
    #[arg(long)]
    ml_depth: Option<usize>,
    #[arg(long, value_parser = parse_matching)]
    matching: Option<Matching>,
    #[arg(long, value_parser = parse_activation)]
    activation: Option<Activation>,
    #[arg(long)]
    no_layer_comb: bool,
    #[arg(long)]
    self_connection: bool,
    #[arg(long)]
    no_init_residual: bool,
    #[arg(long)]
    homogeneous_gcn: bool,
    #[arg(long)]
    no_pretrain: bool,
    #[arg(long)]
    drop_comments: bool,
    #[arg(long)]
    drop_descriptions: bool,
    #[arg(long)]
    net_dropout: Option<f64>,
    #[arg(long)]
    node_dropout: Option<f64>,

    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Zero the wall-clock field so repeated traces are byte-identical.
    #[arg(long)]
    deterministic: bool,

    /// Named ablation preset; may be repeated.
    #[arg(long)]
    ablation: Vec<String>,
    /// Validate config and inputs and write the manifest without training.
    #[arg(long)]
    dry_run: bool,
    /// Write the text-node manifest (JSON lines) for an external encoder.
    #[arg(long)]
    export_texts: Option<PathBuf>,
    /// Also write propagated embeddings in interchange form.
    #[arg(long)]
    dump_embeddings: bool,
}

fn parse_matching(s: &str) -> Result<Matching, String> {
    match s {
        "inner" => Ok(Matching::Inner),
        "mlp" => Ok(Matching::Mlp),
        "combined" => Ok(Matching::Combined),
        _ => Err(format!("expected inner, mlp or combined, got `{s}`")),
    }
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    match s {
        "none" => Ok(Activation::None),
        "leaky-relu" => Ok(Activation::LeakyRelu),
        _ => Err(format!("expected none or leaky-relu, got `{s}`")),
    }
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::from_toml(&text)?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$field = v; })*
            };
        }
        set!(
            layers => layers, input_dim => input_dim, output_dim => output_dim, hidden => hidden,
            rl_depth => rl_depth, ml_depth => ml_depth, matching => matching, activation => activation,
            net_dropout => net_dropout, node_dropout => node_dropout, lambda => lambda, lr => lr,
            batch => batch_size, epochs => epochs, eval_every => eval_every, seed => seed, k => k,
        );
        if self.layers.is_some() && cfg.layer_weights.as_ref().is_some_and(|w| w.len() != cfg.layers + 1) {
            cfg.layer_weights = None;
        }
        cfg.layer_combination &= !self.no_layer_comb;
        cfg.initial_residual &= !self.no_init_residual;
        cfg.pretrain &= !self.no_pretrain;
        cfg.self_connection |= self.self_connection;
        cfg.homogeneous_gcn |= self.homogeneous_gcn;
        cfg.drop_comments |= self.drop_comments;
        cfg.drop_descriptions |= self.drop_descriptions;
        cfg.deterministic |= self.deterministic;
        for a in &self.ablation {
            cfg.apply_ablation(a)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn inputs(&self) -> ExperimentInputs {
        let text = match (&self.glove, &self.embeddings) {
            (Some(g), _) => TextSource::Glove(g.clone()),
            (None, Some(e)) => TextSource::Interchange(e.clone()),
            (None, None) => TextSource::None,
        };
        ExperimentInputs { reviews: self.reviews.clone(), meta: self.meta.clone(), text, stoplist: self.stoplist.clone() }
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            out_dir: self.out.clone(),
            dry_run: self.dry_run,
            export_texts: self.export_texts.clone(),
            dump_embeddings: self.dump_embeddings,
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run(args) => {
            let cfg = args.config()?;
            let outcome = experiment::run_experiment(&args.inputs(), &cfg, &args.options())?;
            match outcome.report {
                Some(r) => println!("{:#}", r.to_json()),
                None => println!("{} (manifest in {})", outcome.manifest.status, args.out.display()),
            }
        }
        Command::Sweep { run, axis, values } => {
            if run.dry_run {
                bail!("--dry-run is not supported for sweeps");
            }
            let cfg = run.config()?;
            let table = experiment::sweep(&run.inputs(), &cfg, &run.options(), &axis, &values)?;
            print!("{}", table.to_tsv());
        }
        Command::Synth { out, seed, users, items_per_block, blocks, dim } => {
            let spec = PlantedSpec { seed, users, items_per_block, blocks, dimension: dim, ..Default::default() };
            let files = spec.generate()?.write_files(&out)?;
            println!("reviews: {}", files.reviews.display());
            println!("meta:    {}", files.meta.display());
            println!("vectors: {}", files.glove.display());
        }
    }
    Ok(())
}
