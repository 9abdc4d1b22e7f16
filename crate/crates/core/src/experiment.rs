//! End-to-end runs: inputs → split → graph → text vectors → propagation →
//! training → report, with every artifact written next to a manifest.
//!
//! Any stage failure writes a partial manifest naming the stage before the
//! error is returned, so an aborted run still says how far it got.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::corpus::{self, DescriptionRecord, InteractionCorpus, ReviewRecord};
use crate::error::{Error, Result};
use crate::evaluator::MetricReport;
use crate::hetgraph::{self, BuiltGraph, NodeKind};
use crate::interchange::{self, VectorRecord};
use crate::prednet::PredictiveParams;
use crate::propagate::{self, EmbeddingMatrix};
use crate::textembed::{self, Stoplist, TextEmbeddingSet, TextNodeId, WordVectorTable};
use crate::trainer::{EpochRecord, Trainer};

/// Where initial text vectors come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TextSource {
    /// Whitespace-separated word-vector table.
    Glove(PathBuf),
    /// Interchange file of precomputed sentence vectors.
    Interchange(PathBuf),
    /// Only valid with `pretrain = false`.
    None,
}

#[derive(Debug, Clone)]
pub struct ExperimentInputs {
    pub reviews: PathBuf,
    pub meta: Option<PathBuf>,
    pub text: TextSource,
    /// Custom stopword file; the built-in long English list otherwise.
    pub stoplist: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub dry_run: bool,
    /// Write the `{kind, ordinal, text}` JSON-lines manifest here.
    pub export_texts: Option<PathBuf>,
    /// Also dump the propagated embeddings in interchange form.
    pub dump_embeddings: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentManifest {
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub config: RunConfig,
    pub seed: u64,
    pub text_source: String,
    pub inputs: BTreeMap<String, InputDigest>,
    pub artifacts: BTreeMap<String, String>,
    pub counts: BTreeMap<String, u64>,
    pub timings_ms: BTreeMap<String, u64>,
}

impl ExperimentManifest {
    fn new(cfg: &RunConfig, text_source: String) -> Self {
        ExperimentManifest {
            status: "running".into(),
            failed_stage: None,
            error: None,
            config: cfg.clone(),
            seed: cfg.seed,
            text_source,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            counts: BTreeMap::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("manifest serializes")
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub manifest: ExperimentManifest,
    pub trace: Vec<EpochRecord>,
    pub report: Option<MetricReport>,
    pub params: Option<PredictiveParams>,
}

/// SHA-256 of a file, streamed.
pub fn digest_file(path: &Path) -> Result<InputDigest> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    let mut bytes = 0u64;
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(InputDigest { path: path.display().to_string(), bytes, sha256: hex::encode(hasher.finalize()) })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

/// Text nodes of a built graph as `(id, text)`, descriptions first.
pub fn text_entries(built: &BuiltGraph) -> impl Iterator<Item = (TextNodeId, &str)> {
    let d = built.texts.descriptions.iter().enumerate().map(|(o, n)| (TextNodeId::description(o as u64), n.text.as_str()));
    let c = built.texts.comments.iter().enumerate().map(|(o, n)| (TextNodeId::comment(o as u64), n.text.as_str()));
    d.chain(c)
}

/// JSON lines `{"kind": 0|1, "ordinal": n, "text": ..}`.
pub fn export_texts<W: Write>(built: &BuiltGraph, mut out: W) -> Result<usize> {
    let mut n = 0;
    for (id, text) in text_entries(built) {
        writeln!(out, "{}", json!({ "kind": id.kind.code(), "ordinal": id.ordinal, "text": text }))?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

/// All propagated rows as interchange records, kinds 0–3.
pub fn write_embedding_dump<W: Write>(built: &BuiltGraph, embeddings: &EmbeddingMatrix, out: W) -> Result<()> {
    let index = built.graph.node_index();
    let mut records = Vec::with_capacity(index.total());
    for (g, row) in embeddings.outer_iter().enumerate() {
        let (kind, ordinal) = index.locate(g).expect("row inside the node index");
        records.push(VectorRecord { kind: kind.interchange_code(), ordinal: ordinal as u64, values: row.to_vec() });
    }
    interchange::write_records(out, embeddings.ncols(), &records)
}

/// Initial text vectors, however obtained.
pub enum TextInit<'a> {
    Glove { table: &'a WordVectorTable, stoplist: &'a Stoplist },
    Precomputed(TextEmbeddingSet),
    Random,
}

/// Split, graph and initial embeddings for one configuration.
pub struct Prepared {
    pub corpus: InteractionCorpus,
    pub built: BuiltGraph,
    pub initial: EmbeddingMatrix,
    pub missing_texts: usize,
    pub comments_stripped: usize,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage { stage: name.to_string(), message: e.to_string() },
    })
}

/// Builds the split and graph. Test-pair comments are blanked before any
/// text reaches the graph.
pub fn build_split_and_graph(
    reviews: &[ReviewRecord],
    descriptions: &[DescriptionRecord],
    cfg: &RunConfig,
) -> Result<(InteractionCorpus, BuiltGraph, usize)> {
    let corpus = stage("corpus", corpus::build_corpus(reviews, cfg.seed))?;
    let stripped = corpus::strip_test_comments(reviews, &corpus);
    let blanked = reviews.iter().zip(&stripped).filter(|(a, b)| a.comment_text != b.comment_text).count();
    let built = stage("graph", hetgraph::build_graph(&corpus, &stripped, descriptions, cfg.build_options()))?;
    Ok((corpus, built, blanked))
}

/// Text vectors for every text node of `built`.
pub fn embed_texts(built: &BuiltGraph, init: TextInit<'_>, cfg: &RunConfig) -> Result<TextEmbeddingSet> {
    let set = match init {
        TextInit::Glove { table, stoplist } => textembed::embed_texts_glove(text_entries(built), table, stoplist)?,
        TextInit::Precomputed(set) => set,
        TextInit::Random => textembed::random_text_embeddings(text_entries(built).map(|(id, _)| id), cfg.input_dim, cfg.seed),
    };
    if set.dimension() != cfg.input_dim {
        return Err(Error::Dimension { expected: cfg.input_dim, actual: set.dimension() });
    }
    Ok(set)
}

/// In-memory preparation, shared by the file-driven runner and tests.
pub fn prepare(
    reviews: &[ReviewRecord],
    descriptions: &[DescriptionRecord],
    init: TextInit<'_>,
    cfg: &RunConfig,
) -> Result<Prepared> {
    stage("config", cfg.validate())?;
    let (corpus, built, comments_stripped) = build_split_and_graph(reviews, descriptions, cfg)?;
    let init = if cfg.pretrain { init } else { TextInit::Random };
    let texts = stage("textembed", embed_texts(&built, init, cfg))?;
    let (initial, missing_texts) = stage("propagate", propagate::init_embeddings(&built.graph, &texts))?;
    Ok(Prepared { corpus, built, initial, missing_texts, comments_stripped })
}

/// Propagation, training and final evaluation on prepared inputs.
pub fn train_prepared(prep: &Prepared, cfg: &RunConfig) -> Result<(Vec<EpochRecord>, MetricReport, PredictiveParams)> {
    let combined = stage("propagate", propagate::run_embedding_network(&prep.built.graph, &prep.initial, &cfg.propagation()))?;
    let mut trainer = stage("train", Trainer::new(cfg, &prep.corpus, &prep.built.graph, &prep.initial, &combined))?;
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        trace.push(stage("train", trainer.run_epoch())?);
    }
    let report = stage("report", trainer.evaluate())?;
    Ok((trace, report, trainer.into_params()))
}

struct Runner<'a> {
    out: &'a Path,
    manifest: ExperimentManifest,
    clock: Instant,
}

impl Runner<'_> {
    fn artifact(&mut self, name: &str, file: &str) -> PathBuf {
        self.manifest.artifacts.insert(name.into(), file.into());
        self.out.join(file)
    }

    fn lap(&mut self, name: &str) {
        self.manifest.timings_ms.insert(name.into(), self.clock.elapsed().as_millis() as u64);
        self.clock = Instant::now();
    }

    fn count(&mut self, name: &str, n: usize) {
        self.manifest.counts.insert(name.into(), n as u64);
    }

    fn save_manifest(&self) -> Result<()> {
        write_json(&self.out.join("manifest.json"), &self.manifest.to_json())
    }

    fn fail(&mut self, stage: &'static str, err: Error) -> Error {
        let (stage, message) = match err {
            Error::Stage { stage, message } => (stage, message),
            e => (stage.to_string(), e.to_string()),
        };
        self.manifest.status = "failed".into();
        self.manifest.failed_stage = Some(stage.clone());
        self.manifest.error = Some(message.clone());
        if let Err(e) = self.save_manifest() {
            log::error!("could not write partial manifest: {e}");
        }
        Error::Stage { stage, message }
    }
}

fn describe(text: &TextSource, cfg: &RunConfig) -> String {
    if !cfg.pretrain {
        return "random".into();
    }
    match text {
        TextSource::Glove(p) => format!("glove:{}", p.display()),
        TextSource::Interchange(p) => format!("interchange:{}", p.display()),
        TextSource::None => "none".into(),
    }
}

/// Runs one experiment from files, writing every artifact under
/// `opts.out_dir`.
pub fn run_experiment(inputs: &ExperimentInputs, cfg: &RunConfig, opts: &RunOptions) -> Result<ExperimentOutcome> {
    std::fs::create_dir_all(&opts.out_dir)?;
    let mut run = Runner {
        out: &opts.out_dir,
        manifest: ExperimentManifest::new(cfg, describe(&inputs.text, cfg)),
        clock: Instant::now(),
    };
    match run_stages(&mut run, inputs, cfg, opts) {
        Ok(outcome) => Ok(outcome),
        Err((stage, e)) => Err(run.fail(stage, e)),
    }
}

type Staged<T> = std::result::Result<T, (&'static str, Error)>;

fn at<T>(name: &'static str, r: Result<T>) -> Staged<T> {
    r.map_err(|e| (name, e))
}

fn run_stages(run: &mut Runner<'_>, inputs: &ExperimentInputs, cfg: &RunConfig, opts: &RunOptions) -> Staged<ExperimentOutcome> {
    at("config", cfg.validate())?;
    if cfg.pretrain && inputs.text == TextSource::None {
        return Err(("config", Error::Config("pretrained text vectors requested but no --glove or --embeddings given".into())));
    }

    // Digests are recorded before anything is parsed.
    let mut named = vec![("reviews", inputs.reviews.clone())];
    if let Some(m) = &inputs.meta {
        named.push(("meta", m.clone()));
    }
    match &inputs.text {
        TextSource::Glove(p) => named.push(("glove", p.clone())),
        TextSource::Interchange(p) => named.push(("embeddings", p.clone())),
        TextSource::None => {}
    }
    if let Some(s) = &inputs.stoplist {
        named.push(("stoplist", s.clone()));
    }
    for (name, path) in named {
        let d = at("inputs", digest_file(&path))?;
        run.manifest.inputs.insert(name.into(), d);
    }
    at("inputs", run.save_manifest())?;

    let reviews = at("corpus", open(&inputs.reviews).and_then(corpus::parse_reviews))?;
    let descriptions = match &inputs.meta {
        Some(p) => at("corpus", open(p).and_then(corpus::parse_descriptions))?.records,
        None => Vec::new(),
    };
    run.count("review_lines", reviews.lines);
    run.count("review_lines_skipped", reviews.errors.len());
    let reviews = reviews.records;
    run.lap("parse");

    let (corpus, built, blanked) = build_split_and_graph(&reviews, &descriptions, cfg).map_err(|e| ("graph", e))?;
    run.count("users", corpus.num_users());
    run.count("items", corpus.num_items());
    run.count("interactions", corpus.total_interactions());
    run.count("train", corpus.train.len());
    run.count("test", corpus.test.len());
    run.count("evaluable_users", corpus.candidates.len());
    run.count("excluded_users", corpus.excluded_users.len());
    run.count("comments_stripped", blanked);
    let index = built.graph.node_index();
    run.count("description_nodes", index.descriptions);
    run.count("comment_nodes", index.comments);
    run.count("edges", built.graph.edge_count());
    let split = run.artifact("split", "split.json");
    at("corpus", write_json(&split, &json!(corpus.split_manifest())))?;
    let graph_file = run.artifact("graph", "graph.json");
    at("graph", write_json(&graph_file, &json!(built.graph.summary())))?;
    if let Some(p) = &opts.export_texts {
        let n = at("export", File::create(p).map_err(Error::from).and_then(|f| export_texts(&built, BufWriter::new(f))))?;
        run.manifest.artifacts.insert("texts".into(), p.display().to_string());
        run.count("texts_exported", n);
    }
    run.lap("split_and_graph");

    let stoplist = match &inputs.stoplist {
        Some(p) => at("textembed", open(p).and_then(Stoplist::read))?,
        None => Stoplist::long_english(),
    };
    let texts = if !cfg.pretrain {
        TextInit::Random
    } else {
        match &inputs.text {
            TextSource::Glove(p) => {
                let vocab = textembed::vocabulary(text_entries(&built).map(|(_, t)| t), &stoplist);
                let table = at("textembed", open(p).and_then(|r| textembed::load_glove_text(r, Some(&vocab))))?;
                run.count("word_vectors_loaded", table.len());
                run.count("word_vector_lines_skipped", table.skipped);
                let set = at("textembed", textembed::embed_texts_glove(text_entries(&built), &table, &stoplist))?;
                TextInit::Precomputed(set)
            }
            TextSource::Interchange(p) => {
                let bytes = at("textembed", std::fs::read(p).map_err(Error::from))?;
                TextInit::Precomputed(at("textembed", TextEmbeddingSet::read(&bytes))?)
            }
            TextSource::None => TextInit::Random,
        }
    };
    let texts = at("textembed", embed_texts(&built, texts, cfg))?;
    let (initial, missing) = at("textembed", propagate::init_embeddings(&built.graph, &texts))?;
    run.count("texts_without_vector", missing);
    run.lap("textembed");

    if opts.dry_run {
        run.manifest.status = "dry-run".into();
        at("report", run.save_manifest())?;
        return Ok(ExperimentOutcome { manifest: run.manifest.clone(), trace: Vec::new(), report: None, params: None });
    }

    let combined = at("propagate", propagate::run_embedding_network(&built.graph, &initial, &cfg.propagation()))?;
    if opts.dump_embeddings {
        let p = run.artifact("embeddings", "embeddings.bin");
        at("propagate", File::create(&p).map_err(Error::from).and_then(|f| write_embedding_dump(&built, &combined, BufWriter::new(f))))?;
    }
    run.lap("propagate");

    let mut trainer = at("train", Trainer::new(cfg, &corpus, &built.graph, &initial, &combined))?;
    let trace_path = run.artifact("trace", "trace.jsonl");
    let mut trace_out = at("train", File::create(&trace_path).map(BufWriter::new).map_err(Error::from))?;
    at("train", run.save_manifest())?;
    let checkpoint = run.artifact("checkpoint", "checkpoint.bin");
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        match trainer.run_epoch() {
            Ok(rec) => {
                let line = rec.to_json().to_string();
                at("train", writeln!(trace_out, "{line}").and_then(|_| trace_out.flush()).map_err(Error::from))?;
                log::info!("{line}");
                trace.push(rec);
            }
            Err(e) => {
                // Keep the last finite parameters for inspection.
                let _ = File::create(&checkpoint).map_err(Error::from).and_then(|f| trainer.params().save(BufWriter::new(f)));
                return Err(("train", e));
            }
        }
    }
    run.lap("train");

    let report = at("report", trainer.evaluate())?;
    let params = trainer.into_params();
    at("report", File::create(&checkpoint).map_err(Error::from).and_then(|f| params.save(BufWriter::new(f))))?;
    let report_path = run.artifact("report", "report.json");
    at("report", write_json(&report_path, &report.to_json()))?;
    run.lap("report");
    run.manifest.status = "ok".into();
    at("report", run.save_manifest())?;
    Ok(ExperimentOutcome { manifest: run.manifest.clone(), trace, report: Some(report), params: Some(params) })
}

/// Axes accepted by [`sweep`].
pub const SWEEP_AXES: [&str; 7] = ["layers", "output-size", "dropout-net", "dropout-node", "lambda", "rl-depth", "ml-depth"];

fn whole(axis: &str, value: f64) -> Result<usize> {
    if value >= 0.0 && value.fract() == 0.0 {
        Ok(value as usize)
    } else {
        Err(Error::Config(format!("{axis} needs a non-negative integer, got {value}")))
    }
}

/// Sets the field behind a sweep axis.
pub fn apply_axis(cfg: &mut RunConfig, axis: &str, value: f64) -> Result<()> {
    match axis {
        "layers" => {
            cfg.layers = whole(axis, value)?;
            cfg.layer_weights = None;
        }
        "output-size" => cfg.output_dim = whole(axis, value)?,
        "dropout-net" => cfg.net_dropout = value,
        "dropout-node" => cfg.node_dropout = value,
        "lambda" => cfg.lambda = value,
        "rl-depth" => cfg.rl_depth = whole(axis, value)?,
        "ml-depth" => cfg.ml_depth = whole(axis, value)?,
        other => return Err(Error::Config(format!("unknown sweep axis `{other}`; expected one of {SWEEP_AXES:?}"))),
    }
    cfg.validate()
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub final_loss: f64,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub out_dir: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Tab-separated table, one row per value.
    pub fn to_tsv(&self) -> String {
        let ks: Vec<usize> = self.rows.first().map(|r| r.hr.keys().copied().collect()).unwrap_or_default();
        let mut s = self.axis.clone();
        for k in &ks {
            s.push_str(&format!("\tHR@{k}\tNDCG@{k}"));
        }
        s.push_str("\tfinal_loss\n");
        for r in &self.rows {
            s.push_str(&r.value.to_string());
            for k in &ks {
                s.push_str(&format!("\t{:.4}\t{:.4}", r.hr[k], r.ndcg[k]));
            }
            s.push_str(&format!("\t{:.4}\n", r.final_loss));
        }
        s
    }
}

/// One run per value, each in `out_dir/<axis>-<value>`, collated into
/// `sweep.tsv` and `sweep.json`.
pub fn sweep(inputs: &ExperimentInputs, cfg: &RunConfig, opts: &RunOptions, axis: &str, values: &[f64]) -> Result<SweepTable> {
    if !SWEEP_AXES.contains(&axis) {
        return Err(Error::Config(format!("unknown sweep axis `{axis}`; expected one of {SWEEP_AXES:?}")));
    }
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut table = SweepTable { axis: axis.into(), rows: Vec::with_capacity(values.len()) };
    for &value in values {
        let mut run_cfg = cfg.clone();
        apply_axis(&mut run_cfg, axis, value)?;
        let dir = opts.out_dir.join(format!("{axis}-{value}"));
        let run_opts = RunOptions { out_dir: dir.clone(), dry_run: false, export_texts: None, dump_embeddings: opts.dump_embeddings };
        let outcome = run_experiment(inputs, &run_cfg, &run_opts)?;
        let report = outcome.report.expect("full runs produce a report");
        table.rows.push(SweepRow {
            value,
            final_loss: outcome.trace.last().map_or(f64::NAN, |r| r.loss),
            hr: report.at.iter().map(|(k, m)| (*k, m.hr)).collect(),
            ndcg: report.at.iter().map(|(k, m)| (*k, m.ndcg)).collect(),
            out_dir: dir.display().to_string(),
        });
    }
    std::fs::create_dir_all(&opts.out_dir)?;
    std::fs::write(opts.out_dir.join("sweep.tsv"), table.to_tsv())?;
    write_json(&opts.out_dir.join("sweep.json"), &serde_json::to_value(&table)?)?;
    Ok(table)
}

/// Row block of a node kind inside an embedding matrix.
pub fn kind_rows(built: &BuiltGraph, embeddings: &EmbeddingMatrix, kind: NodeKind) -> EmbeddingMatrix {
    let index = built.graph.node_index();
    let off = index.offset(kind);
    embeddings.slice(ndarray::s![off..off + index.count(kind), ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_map_to_fields() {
        let mut c = RunConfig::default();
        apply_axis(&mut c, "layers", 2.0).unwrap();
        apply_axis(&mut c, "output-size", 32.0).unwrap();
        apply_axis(&mut c, "lambda", 1e-5).unwrap();
        apply_axis(&mut c, "ml-depth", 3.0).unwrap();
        assert_eq!((c.layers, c.output_dim, c.lambda, c.ml_depth), (2, 32, 1e-5, 3));
        assert!(apply_axis(&mut c, "layers", 2.5).is_err());
        assert!(apply_axis(&mut c, "dropout-net", 1.0).is_err());
        assert!(apply_axis(&mut c, "width", 1.0).is_err());
    }

    #[test]
    fn tsv_layout() {
        let row = |v: f64| SweepRow {
            value: v,
            final_loss: 1.0,
            hr: [(10, 0.5)].into(),
            ndcg: [(10, 0.25)].into(),
            out_dir: String::new(),
        };
        let t = SweepTable { axis: "lambda".into(), rows: vec![row(1e-5), row(1e-4)] };
        let tsv = t.to_tsv();
        let lines: Vec<_> = tsv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "lambda\tHR@10\tNDCG@10\tfinal_loss");
        assert!(lines[1].starts_with("0.00001\t0.5000"));
    }
}
