//! Command-line front end: reproducible ingest/synth/train/calibrate/
//! evaluate/sweep/verify pipelines driven by one JSON config.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use graphcal::calibrate::{
    apply_temperature, default_blend_grid, fit_temperature, scar_node_level, search_alpha_beta,
};
use graphcal::gcnmodel::{
    load_checkpoint, predict, save_checkpoint, train, ForwardCache, ModelConfig, OptimizerKind,
    Predictions,
};
use graphcal::graphdata::{
    generate_csbm, load_bundle, make_splits, normalize_adjacency, save_bundle, Graph,
    SyntheticSpec,
};
use graphcal::numerics::{DenseMatrix, SeededRng};
use graphcal::{metrics, theory, Error, Result};

#[derive(Parser)]
#[command(name = "graphcal", about = "GCN training and confidence calibration")]
struct Cli {
    /// JSON run configuration; missing fields fall back to defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's model seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if absent)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert plain-text edges/features/labels into a GraphBundle
    Ingest {
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Generate a synthetic CSBM bundle
    Synth,
    /// Train the GCN and store checkpoint, report and eval-mode cache
    Train,
    /// Post-hoc calibration of a trained checkpoint
    Calibrate {
        /// scar, ts or both
        #[arg(long, default_value = "both")]
        method: String,
    },
    /// Score a stored predictions CSV against the bundle's test split
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Final-layer decay sweep: list mode or binary search on validation ECE
    Sweep {
        /// list or binary-search
        #[arg(long, default_value = "list")]
        mode: String,
    },
    /// Run all theory checks and write theory_report.json
    Verify {
        /// Negative control: corrupt tau and require the check to fail
        #[arg(long)]
        self_test_corrupt_tau: bool,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ModelOverrides {
    hidden_dim: Option<usize>,
    n_layers: Option<usize>,
    per_layer_decay: Option<Vec<f64>>,
    learning_rate: Option<f64>,
    dropout_rate: Option<f64>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    optimizer: Option<OptimizerKind>,
    seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SplitSpec {
    labels_per_class: usize,
    n_valid: usize,
    n_test: usize,
    seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            labels_per_class: 20,
            n_valid: 500,
            n_test: 1000,
            seed: 0,
        }
    }
}

fn default_synthetic() -> SyntheticSpec {
    SyntheticSpec {
        classes: 7,
        nodes_per_class: 300,
        intra_edge_prob: 0.02,
        inter_edge_prob: 0.002,
        feature_dim: 32,
        class_mean_separation: 1.0,
        feature_noise_std: 1.0,
        seed: 0,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    bundle: PathBuf,
    out: PathBuf,
    model: ModelOverrides,
    ece_bins: usize,
    blend_grid: Vec<f64>,
    sweep_lambdas: Vec<f64>,
    sweep_low: f64,
    sweep_high: f64,
    sweep_iterations: usize,
    synthetic: SyntheticSpec,
    splits: SplitSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            bundle: PathBuf::from("bundle"),
            out: PathBuf::from("out"),
            model: ModelOverrides::default(),
            ece_bins: 20,
            blend_grid: default_blend_grid(),
            sweep_lambdas: vec![5e-3, 5e-4, 5e-5],
            sweep_low: 5e-6,
            sweep_high: 5e-3,
            sweep_iterations: 6,
            synthetic: default_synthetic(),
            splits: SplitSpec::default(),
        }
    }
}

impl RunConfig {
    fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::default();
        let o = &self.model;
        if let Some(v) = o.hidden_dim {
            m.hidden_dim = v;
        }
        if let Some(v) = o.n_layers {
            m.n_layers = v;
            // keep decay list length in step unless explicitly overridden
            if o.per_layer_decay.is_none() {
                let last = *m.per_layer_decay.last().unwrap();
                let first = m.per_layer_decay[0];
                m.per_layer_decay = vec![first; v];
                *m.per_layer_decay.last_mut().unwrap() = last;
            }
        }
        if let Some(v) = &o.per_layer_decay {
            m.per_layer_decay = v.clone();
        }
        if let Some(v) = o.learning_rate {
            m.learning_rate = v;
        }
        if let Some(v) = o.dropout_rate {
            m.dropout_rate = v;
        }
        if let Some(v) = o.max_epochs {
            m.max_epochs = v;
        }
        if let Some(v) = o.patience {
            m.patience = v;
        }
        if let Some(v) = o.optimizer {
            m.optimizer = v;
        }
        if let Some(v) = o.seed {
            m.seed = v;
        }
        m
    }

    fn validate(&self) -> Result<()> {
        if self.ece_bins == 0 {
            return Err(Error::InvalidInput("ece_bins must be >= 1".into()));
        }
        Ok(())
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.model.seed = Some(seed);
        config.splits.seed = seed;
        config.synthetic.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Malformed(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

// ---- eval-cache file ---------------------------------------------------

const CACHE_MAGIC: &[u8; 5] = b"GCCH1";

fn push_matrix(buf: &mut Vec<u8>, m: &DenseMatrix) {
    buf.extend_from_slice(&(m.rows as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols as u64).to_le_bytes());
    for &v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_matrix(bytes: &[u8], pos: &mut usize) -> Result<DenseMatrix> {
    let need = |n: usize, pos: usize| -> Result<()> {
        if bytes.len() < pos + n {
            Err(Error::Malformed("cache file truncated".into()))
        } else {
            Ok(())
        }
    };
    need(16, *pos)?;
    let rows = u64::from_le_bytes(bytes[*pos..*pos + 8].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[*pos + 8..*pos + 16].try_into().unwrap()) as usize;
    *pos += 16;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Malformed("cache dimensions overflow".into()))?;
    need(count * 8, *pos)?;
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let start = *pos + i * 8;
        data.push(f64::from_le_bytes(bytes[start..start + 8].try_into().unwrap()));
    }
    *pos += count * 8;
    DenseMatrix::from_vec(rows, cols, data)
}

fn save_cache(path: &Path, cache: &ForwardCache) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(cache.aggregates.len() as u64).to_le_bytes());
    for m in &cache.aggregates {
        push_matrix(&mut buf, m);
    }
    for m in &cache.pre_activations {
        push_matrix(&mut buf, m);
    }
    push_matrix(&mut buf, &cache.logits);
    push_matrix(&mut buf, &cache.probs);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

fn load_cache(path: &Path) -> Result<ForwardCache> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 13 || &bytes[..5] != CACHE_MAGIC {
        return Err(Error::Malformed(format!(
            "{}: not a cache file",
            path.display()
        )));
    }
    let layers = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let mut pos = 13usize;
    let mut aggregates = Vec::with_capacity(layers);
    for _ in 0..layers {
        aggregates.push(read_matrix(&bytes, &mut pos)?);
    }
    let mut pre_activations = Vec::with_capacity(layers);
    for _ in 0..layers {
        pre_activations.push(read_matrix(&bytes, &mut pos)?);
    }
    let logits = read_matrix(&bytes, &mut pos)?;
    let probs = read_matrix(&bytes, &mut pos)?;
    if pos != bytes.len() {
        return Err(Error::Malformed(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - pos
        )));
    }
    Ok(ForwardCache {
        aggregates,
        pre_activations,
        dropout_masks: None,
        logits,
        probs,
    })
}

// ---- predictions CSV ---------------------------------------------------

fn write_predictions_csv(path: &Path, probs: &DenseMatrix, preds: &Predictions) -> Result<()> {
    let c = probs.cols;
    let mut text = String::from("node_id,predicted_class,confidence");
    for j in 0..c {
        text.push_str(&format!(",p{j}"));
    }
    text.push('\n');
    for v in 0..probs.rows {
        text.push_str(&format!("{v},{},{}", preds.labels[v], preds.confidence[v]));
        for &p in probs.row(v) {
            text.push_str(&format!(",{p}"));
        }
        text.push('\n');
    }
    write_text(path, &text)
}

fn read_predictions_csv(path: &Path, n: usize, c: usize) -> Result<(DenseMatrix, Predictions)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Malformed(format!("{}: empty file", path.display())))?;
    let expected_cols = 3 + c;
    if header.split(',').count() != expected_cols {
        return Err(Error::Malformed(format!(
            "{}: header has {} columns, expected {expected_cols}",
            path.display(),
            header.split(',').count()
        )));
    }
    let mut probs = DenseMatrix::zeros(n, c);
    let mut labels = vec![0usize; n];
    let mut confidence = vec![0.0f64; n];
    let mut seen = vec![false; n];
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_cols {
            return Err(Error::Malformed(format!(
                "{}:{}: {} fields, expected {expected_cols}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let bad = |what: &str| {
            Error::Malformed(format!("{}:{}: bad {what}", path.display(), lineno + 1))
        };
        let v: usize = fields[0].parse().map_err(|_| bad("node id"))?;
        if v >= n {
            return Err(Error::Malformed(format!(
                "{}:{}: node id {v} >= {n}",
                path.display(),
                lineno + 1
            )));
        }
        labels[v] = fields[1].parse().map_err(|_| bad("class"))?;
        confidence[v] = fields[2].parse().map_err(|_| bad("confidence"))?;
        for j in 0..c {
            probs.set(v, j, fields[3 + j].parse().map_err(|_| bad("probability"))?);
        }
        seen[v] = true;
    }
    if let Some(v) = seen.iter().position(|&s| !s) {
        return Err(Error::Malformed(format!(
            "{}: node {v} missing",
            path.display()
        )));
    }
    Ok((probs, Predictions { labels, confidence }))
}

// ---- commands ----------------------------------------------------------

fn cmd_ingest(config: &RunConfig, edges: &Path, features: &Path, labels: &Path) -> Result<()> {
    let labels_text = fs::read_to_string(labels).map_err(|e| Error::io(labels, e))?;
    let mut label_vec = Vec::new();
    for (lineno, line) in labels_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let l: usize = line.parse().map_err(|_| {
            Error::Malformed(format!("{}:{}: bad label", labels.display(), lineno + 1))
        })?;
        label_vec.push(l);
    }
    let n = label_vec.len();
    if n == 0 {
        return Err(Error::Malformed(format!(
            "{}: no labels",
            labels.display()
        )));
    }
    let c = label_vec.iter().max().unwrap() + 1;

    let feat_text = fs::read_to_string(features).map_err(|e| Error::io(features, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in feat_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line
            .split(|ch: char| ch == ',' || ch.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect();
        rows.push(row.map_err(|_| {
            Error::Malformed(format!(
                "{}:{}: bad feature value",
                features.display(),
                lineno + 1
            ))
        })?);
    }
    if rows.len() != n {
        return Err(Error::Malformed(format!(
            "{} feature rows for {n} labels",
            rows.len()
        )));
    }
    let feature_matrix = DenseMatrix::from_rows(&rows)?;

    let edge_text = fs::read_to_string(edges).map_err(|e| Error::io(edges, e))?;
    let mut edge_set = BTreeSet::new();
    let mut raw_count = 0usize;
    for (lineno, line) in edge_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line
            .split(|ch: char| ch == ',' || ch.is_whitespace())
            .filter(|t| !t.is_empty());
        let bad = |what: &str| {
            Error::Malformed(format!("{}:{}: {what}", edges.display(), lineno + 1))
        };
        let u: usize = parts
            .next()
            .ok_or_else(|| bad("missing endpoint"))?
            .parse()
            .map_err(|_| bad("bad endpoint"))?;
        let v: usize = parts
            .next()
            .ok_or_else(|| bad("missing endpoint"))?
            .parse()
            .map_err(|_| bad("bad endpoint"))?;
        if parts.next().is_some() {
            return Err(bad("extra fields"));
        }
        if u >= n || v >= n {
            return Err(Error::Malformed(format!(
                "{}:{}: edge ({u}, {v}) references node >= {n}",
                edges.display(),
                lineno + 1
            )));
        }
        raw_count += 1;
        edge_set.insert((u.min(v), u.max(v)));
    }
    if raw_count > edge_set.len() {
        eprintln!(
            "warning: deduplicated {} repeated edge line(s)",
            raw_count - edge_set.len()
        );
    }
    let edge_list: Vec<(usize, usize)> = edge_set.into_iter().collect();
    let graph = Graph::new(feature_matrix, label_vec, edge_list, c)?;
    let splits = make_splits(
        &graph,
        config.splits.labels_per_class,
        config.splits.n_valid,
        config.splits.n_test,
        config.splits.seed,
    )?;
    save_bundle(&config.bundle, &graph, &splits)?;
    println!(
        "bundle written: {} ({} nodes, {} edges, {} classes)",
        config.bundle.display(),
        graph.n,
        graph.edges.len(),
        graph.c
    );
    Ok(())
}

fn cmd_synth(config: &RunConfig) -> Result<()> {
    let graph = generate_csbm(&config.synthetic)?;
    let splits = make_splits(
        &graph,
        config.splits.labels_per_class,
        config.splits.n_valid,
        config.splits.n_test,
        config.splits.seed,
    )?;
    save_bundle(&config.bundle, &graph, &splits)?;
    println!(
        "synthetic bundle written: {} ({} nodes, {} edges)",
        config.bundle.display(),
        graph.n,
        graph.edges.len()
    );
    Ok(())
}

fn cmd_train(config: &RunConfig) -> Result<()> {
    let (graph, splits) = load_bundle(&config.bundle)?;
    let adj = normalize_adjacency(&graph.adjacency)?;
    let model_config = config.model_config();
    let (params, cache, report) = train(&graph, &adj, &splits, &model_config)?;
    fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    save_checkpoint(&config.out.join("model.ckpt"), &params, &model_config)?;
    save_cache(&config.out.join("cache.bin"), &cache)?;
    write_json(&config.out.join("train_report.json"), &report)?;
    // wall clock is intentionally excluded from the deterministic report
    write_text(
        &config.out.join("run.log"),
        &format!("train wall clock: {:.3}s\n", report.wall_clock_secs),
    )?;
    let preds = predict(&cache);
    let val_acc = metrics::accuracy(&preds.labels, &graph.labels, &splits.valid)?;
    println!(
        "trained to epoch {} (best {}), validation accuracy {:.4}",
        report.stopped_epoch, report.best_epoch, val_acc
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EceSummary {
    accuracy: f64,
    ece: f64,
}

fn test_summary(
    probs: &DenseMatrix,
    preds: &Predictions,
    graph: &Graph,
    test: &[usize],
    n_bins: usize,
) -> Result<EceSummary> {
    let _ = probs;
    let confidences: Vec<f64> = test.iter().map(|&v| preds.confidence[v]).collect();
    let correct: Vec<bool> = test
        .iter()
        .map(|&v| preds.labels[v] == graph.labels[v])
        .collect();
    Ok(EceSummary {
        accuracy: metrics::accuracy(&preds.labels, &graph.labels, test)?,
        ece: metrics::ece(&confidences, &correct, n_bins)?.ece,
    })
}

#[derive(Debug, Serialize)]
struct ScarSection {
    alpha: f64,
    beta: f64,
    label_flips: usize,
    test: EceSummary,
}

#[derive(Debug, Serialize)]
struct TsSection {
    temperature: f64,
    test: EceSummary,
}

#[derive(Debug, Serialize)]
struct CalibrationReport {
    uncalibrated_test: EceSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    scar: Option<ScarSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature_scaling: Option<TsSection>,
}

fn cmd_calibrate(config: &RunConfig, method: &str) -> Result<()> {
    if !matches!(method, "scar" | "ts" | "both") {
        return Err(Error::InvalidInput(format!(
            "unknown method '{method}' (expected scar, ts or both)"
        )));
    }
    let (graph, splits) = load_bundle(&config.bundle)?;
    let (params, _) = load_checkpoint(&config.out.join("model.ckpt"))?;
    let cache = load_cache(&config.out.join("cache.bin"))?;
    let preds = predict(&cache);
    let uncalibrated_test = test_summary(&cache.probs, &preds, &graph, &splits.test, config.ece_bins)?;

    let mut report = CalibrationReport {
        uncalibrated_test,
        scar: None,
        temperature_scaling: None,
    };
    let mut out_probs = cache.probs.clone();
    let mut out_preds = predict(&cache);

    if method == "scar" || method == "both" {
        let plan = search_alpha_beta(
            &cache,
            &params,
            &preds,
            &graph,
            &splits,
            &config.blend_grid,
            config.ece_bins,
        )?;
        let calibrated = scar_node_level(&cache, &params, &preds, &plan, &splits.test)?;
        let test = test_summary(
            &calibrated.probs,
            &calibrated.predictions,
            &graph,
            &splits.test,
            config.ece_bins,
        )?;
        report.scar = Some(ScarSection {
            alpha: plan.alpha,
            beta: plan.beta,
            label_flips: calibrated.label_flips,
            test,
        });
        out_probs = calibrated.probs.clone();
        out_preds = calibrated.predictions.clone();
    }
    if method == "ts" || method == "both" {
        let val_logits = DenseMatrix::from_rows(
            &splits
                .valid
                .iter()
                .map(|&v| cache.logits.row(v).to_vec())
                .collect::<Vec<_>>(),
        )?;
        let val_labels: Vec<usize> = splits.valid.iter().map(|&v| graph.labels[v]).collect();
        let model = fit_temperature(&val_logits, &val_labels)?;
        let ts_probs = apply_temperature(&cache.logits, model.t)?;
        let ts_preds = predict(&ForwardCache {
            aggregates: Vec::new(),
            pre_activations: Vec::new(),
            dropout_masks: None,
            logits: cache.logits.clone(),
            probs: ts_probs.clone(),
        });
        let test = test_summary(&ts_probs, &ts_preds, &graph, &splits.test, config.ece_bins)?;
        report.temperature_scaling = Some(TsSection {
            temperature: model.t,
            test,
        });
        if method == "ts" {
            out_probs = ts_probs;
            out_preds = ts_preds;
        }
    }

    write_json(&config.out.join("calibration.json"), &report)?;
    write_predictions_csv(&config.out.join("predictions.csv"), &out_probs, &out_preds)?;
    println!(
        "calibration written: {}",
        config.out.join("calibration.json").display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct MetricsFile {
    n_bins: usize,
    accuracy: f64,
    ece: f64,
    nll: f64,
    mean_confidence: f64,
}

fn cmd_evaluate(config: &RunConfig, predictions: &Path) -> Result<()> {
    let (graph, splits) = load_bundle(&config.bundle)?;
    let (probs, preds) = read_predictions_csv(predictions, graph.n, graph.c)?;
    let test = &splits.test;
    let confidences: Vec<f64> = test.iter().map(|&v| preds.confidence[v]).collect();
    let correct: Vec<bool> = test
        .iter()
        .map(|&v| preds.labels[v] == graph.labels[v])
        .collect();
    let ece_report = metrics::ece(&confidences, &correct, config.ece_bins)?;
    let file = MetricsFile {
        n_bins: config.ece_bins,
        accuracy: metrics::accuracy(&preds.labels, &graph.labels, test)?,
        ece: ece_report.ece,
        nll: metrics::nll(&probs, &graph.labels, test)?,
        mean_confidence: confidences.iter().sum::<f64>() / confidences.len() as f64,
    };
    write_json(&config.out.join("metrics.json"), &file)?;

    let rel = metrics::reliability_data(&confidences, &correct, config.ece_bins)?;
    let mut rel_csv = String::from("bin_low,bin_high,count,mean_confidence,accuracy\n");
    for (low, high, count, conf, acc) in rel {
        rel_csv.push_str(&format!("{low},{high},{count},{conf},{acc}\n"));
    }
    write_text(&config.out.join("reliability.csv"), &rel_csv)?;

    let hist = metrics::confidence_histogram(&confidences, &correct, config.ece_bins)?;
    let mut hist_csv = String::from("bin_low,bin_high,density_correct,density_incorrect\n");
    for b in 0..config.ece_bins {
        hist_csv.push_str(&format!(
            "{},{},{},{}\n",
            hist.bin_edges[b],
            hist.bin_edges[b + 1],
            hist.density_correct[b],
            hist.density_incorrect[b]
        ));
    }
    write_text(&config.out.join("histogram.csv"), &hist_csv)?;
    println!(
        "test accuracy {:.4}, ECE {:.4}, NLL {:.4}",
        file.accuracy, file.ece, file.nll
    );
    Ok(())
}

/// Validation ECE of a model retrained with the given final-layer decay.
fn validation_ece_for_lambda(
    graph: &Graph,
    adj: &graphcal::graphdata::NormalizedAdjacency,
    splits: &graphcal::graphdata::SplitMasks,
    base: &ModelConfig,
    lambda: f64,
    n_bins: usize,
) -> Result<f64> {
    let mut config = base.clone();
    *config.per_layer_decay.last_mut().unwrap() = lambda;
    let (_, cache, _) = train(graph, adj, splits, &config)?;
    let preds = predict(&cache);
    let confidences: Vec<f64> = splits.valid.iter().map(|&v| preds.confidence[v]).collect();
    let correct: Vec<bool> = splits
        .valid
        .iter()
        .map(|&v| preds.labels[v] == graph.labels[v])
        .collect();
    Ok(metrics::ece(&confidences, &correct, n_bins)?.ece)
}

fn cmd_sweep(config: &RunConfig, mode: &str) -> Result<()> {
    let (graph, splits) = load_bundle(&config.bundle)?;
    let adj = normalize_adjacency(&graph.adjacency)?;
    let base = config.model_config();
    fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    match mode {
        "list" => {
            let result = theory::centroid_distance_sweep(
                &graph,
                &adj,
                &splits,
                &base,
                &config.sweep_lambdas,
                config.ece_bins,
            )?;
            let mut csv =
                String::from("lambda,mean_centroid_distance,test_accuracy,test_ece\n");
            for i in 0..result.lambdas.len() {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    result.lambdas[i],
                    result.mean_centroid_distance[i],
                    result.test_accuracy[i],
                    result.test_ece[i]
                ));
            }
            write_text(&config.out.join("sweep.csv"), &csv)?;
            println!("sweep written: {}", config.out.join("sweep.csv").display());
            Ok(())
        }
        "binary-search" => {
            let (mut lo, mut hi) = (config.sweep_low, config.sweep_high);
            if !(lo > 0.0) || hi < lo {
                return Err(Error::InvalidInput(format!(
                    "invalid sweep bounds [{lo}, {hi}]"
                )));
            }
            let mut evaluated: Vec<(f64, f64)> = Vec::new();
            let eval = |l: f64, evaluated: &mut Vec<(f64, f64)>| -> Result<f64> {
                let e = validation_ece_for_lambda(&graph, &adj, &splits, &base, l, config.ece_bins)?;
                evaluated.push((l, e));
                Ok(e)
            };
            let mut e_lo = eval(lo, &mut evaluated)?;
            if hi > lo {
                let mut e_hi = eval(hi, &mut evaluated)?;
                for _ in 0..config.sweep_iterations {
                    let mid = 0.5 * (lo + hi);
                    let e_mid = eval(mid, &mut evaluated)?;
                    // keep the half whose endpoint scores better
                    if e_lo <= e_hi {
                        hi = mid;
                        e_hi = e_mid;
                    } else {
                        lo = mid;
                        e_lo = e_mid;
                    }
                }
            } else {
                let _ = e_lo;
            }
            let &(best_lambda, best_ece) = evaluated
                .iter()
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.partial_cmp(&b.0).unwrap()))
                .unwrap();
            let mut csv = String::from("lambda,validation_ece\n");
            for (l, e) in &evaluated {
                csv.push_str(&format!("{l},{e}\n"));
            }
            write_text(&config.out.join("sweep.csv"), &csv)?;
            write_json(
                &config.out.join("chosen_lambda.json"),
                &serde_json::json!({ "lambda": best_lambda, "validation_ece": best_ece }),
            )?;
            println!("chosen lambda {best_lambda} (validation ECE {best_ece:.4})");
            Ok(())
        }
        other => Err(Error::InvalidInput(format!(
            "unknown sweep mode '{other}' (expected list or binary-search)"
        ))),
    }
}

#[derive(Debug, Serialize)]
struct TheoryReport {
    theorem1_max_residual: f64,
    theorem1_instances: usize,
    theorem1_pass: bool,
    closed_form_relative_residual: f64,
    closed_form_pass: bool,
    logit_decomposition_max_deviation: f64,
    logit_decomposition_pass: bool,
    centroid_distances: Vec<f64>,
    centroid_lambdas: Vec<f64>,
    centroid_monotone: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    corrupted_tau_residual: Option<f64>,
    all_pass: bool,
}

fn cmd_verify(config: &RunConfig, self_test_corrupt_tau: bool) -> Result<()> {
    let mut rng = SeededRng::new(config.model_config().seed).derive(7000);

    // Theorem 1 over random single-node instances
    let instances = 1000usize;
    let mut max_residual = 0.0f64;
    let mut corrupted_tau_residual = None;
    for k in 0..instances {
        let c = 2 + (rng.next_u64() % 9) as usize;
        let dim = 2 + (rng.next_u64() % 6) as usize;
        let mut w = DenseMatrix::zeros(dim, c);
        for v in w.data.iter_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        let h: Vec<f64> = (0..dim).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let h_next: Vec<f64> = h.iter().map(|&x| x + 0.2 * rng.standard_normal()).collect();
        let label = (rng.next_u64() % c as u64) as usize;
        let eta = rng.uniform(1e-4, 0.05);
        let lambda = rng.uniform(1e-6, 1e-2);
        let check = theory::verify_theorem1(&w, &h, &h_next, label, eta, lambda)?;
        max_residual = max_residual.max(check.max_abs_residual);
        if self_test_corrupt_tau && k == 0 {
            // recompute the formula route with tau off by 1e-3
            let tau = check.tau + 1e-3;
            let mut worst = 0.0f64;
            for i in 0..c {
                let num = (check.b[i] / tau).exp();
                let mut denom = num;
                for j in 0..c {
                    if j != i {
                        denom += (check.b[j] / tau).exp() * check.psi[i][j];
                    }
                }
                worst = worst.max((num / denom - check.s_direct[i]).abs());
            }
            corrupted_tau_residual = Some(worst);
        }
    }

    // Theorem 2 on a frozen-representation convex problem
    let n = 12;
    let dim = 4;
    let c = 3;
    let mut h = DenseMatrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for v in 0..n {
        let class = v % c;
        labels.push(class);
        for r in 0..dim {
            let mean = if r == class { 2.0 } else { 0.0 };
            h.set(v, r, mean + 0.5 * rng.standard_normal());
        }
    }
    let mask: Vec<usize> = (0..n).collect();
    let closed = theory::verify_closed_form(&h, &labels, &mask, c, 0.1, 1e-10, 5_000_000)?;

    // logit decomposition on a random instance
    let mut logits = DenseMatrix::zeros(n, c);
    for v in logits.data.iter_mut() {
        *v = rng.uniform(-1.0, 1.0);
    }
    let s = graphcal::numerics::softmax_rows(&logits);
    let h_test: Vec<f64> = (0..dim).map(|_| rng.uniform(-2.0, 2.0)).collect();
    let logit_dev = theory::verify_logit_decomposition(&h, &s, &labels, 1e-3, &h_test)?;

    // centroid monotonicity on a small separable synthetic graph
    let spec = SyntheticSpec {
        classes: 2,
        nodes_per_class: 100,
        intra_edge_prob: 0.10,
        inter_edge_prob: 0.01,
        feature_dim: 4,
        class_mean_separation: 2.0,
        feature_noise_std: 1.0,
        seed: config.synthetic.seed,
    };
    let graph = generate_csbm(&spec)?;
    let splits = make_splits(&graph, 20, 40, 100, config.splits.seed)?;
    let adj = normalize_adjacency(&graph.adjacency)?;
    let mut model = ModelConfig::default();
    model.dropout_rate = 0.3;
    model.max_epochs = 120;
    model.seed = config.model_config().seed;
    let lambdas = vec![5e-3, 5e-4, 5e-5];
    let sweep =
        theory::centroid_distance_sweep(&graph, &adj, &splits, &model, &lambdas, config.ece_bins)?;
    let centroid_monotone = sweep
        .mean_centroid_distance
        .windows(2)
        .all(|w| w[1] > w[0]);

    let report = TheoryReport {
        theorem1_max_residual: max_residual,
        theorem1_instances: instances,
        theorem1_pass: max_residual < 1e-9,
        closed_form_relative_residual: closed.relative_residual,
        closed_form_pass: closed.relative_residual < 1e-6,
        logit_decomposition_max_deviation: logit_dev,
        logit_decomposition_pass: logit_dev < 1e-10,
        centroid_distances: sweep.mean_centroid_distance.clone(),
        centroid_lambdas: lambdas,
        centroid_monotone,
        corrupted_tau_residual,
        all_pass: max_residual < 1e-9
            && closed.relative_residual < 1e-6
            && logit_dev < 1e-10
            && centroid_monotone,
    };
    fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    write_json(&config.out.join("theory_report.json"), &report)?;
    println!(
        "theorem1 residual {:.3e}, closed-form residual {:.3e}, logit deviation {:.3e}, centroid monotone: {}",
        report.theorem1_max_residual,
        report.closed_form_relative_residual,
        report.logit_decomposition_max_deviation,
        report.centroid_monotone
    );
    if self_test_corrupt_tau {
        let worst = report.corrupted_tau_residual.unwrap();
        if worst <= 1e-9 {
            return Err(Error::Numerical(format!(
                "negative control failed: corrupted tau still matches ({worst:.3e})"
            )));
        }
        println!("negative control: corrupted tau residual {worst:.3e} (check correctly fails)");
    }
    if !report.all_pass {
        return Err(Error::Numerical("one or more theory checks failed".into()));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::Ingest {
            edges,
            features,
            labels,
        } => cmd_ingest(&config, edges, features, labels),
        Command::Synth => cmd_synth(&config),
        Command::Train => cmd_train(&config),
        Command::Calibrate { method } => cmd_calibrate(&config, method),
        Command::Evaluate { predictions } => cmd_evaluate(&config, predictions),
        Command::Sweep { mode } => cmd_sweep(&config, mode),
        Command::Verify {
            self_test_corrupt_tau,
        } => cmd_verify(&config, *self_test_corrupt_tau),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are success paths in clap
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::InvalidInput(_)
                | Error::DimensionMismatch(_)
                | Error::Infeasible(_)
                | Error::Malformed(_) => 1,
                Error::Io { .. } | Error::Numerical(_) => 2,
            };
            ExitCode::from(code)
        }
    }
}
