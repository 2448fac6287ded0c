use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dingdate_core::data::{
    dataset_stats, load_dataset, split_dataset, synth_generate, Attribute, Dataset, Rounding, Split, SynthConfig,
};
use dingdate_core::graph::{GraphSchema, NodeKind, RelationGraph, Scope};
use dingdate_core::inference::{factorized_inference, NodeActivations};
use dingdate_core::model::{predict, Model, PredictMode};
use dingdate_core::tensor::Tensor;
use dingdate_core::train::{
    evaluate_split, gradient_check, train_new, write_history_csv, write_metrics_csv, Ablation, GradcheckConfig,
    TrainConfig,
};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "dingdate", version, about = "Date bronze ding vessels with relation-graph guided classifiers")]
struct Cli {
    /// Worker threads for per-sample loss evaluation (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic corpus and its graph schema.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the graph schema; defaults to `<out stem>.schema.json`.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Train:val:test ratios used when the config has no `split`.
        #[arg(long, default_value = "4:1:5")]
        split: String,
    },
    /// Train a model and write a checkpoint plus a per-epoch history CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated flags, e.g. `no-truncation,shape=concat,order=ecs`.
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// History CSV path; defaults to `<out>.history.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Accuracy and precision-recall area on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "json")]
        format: ReportFormat,
        #[arg(long, value_enum, default_value = "independent")]
        predict: PredictArg,
    },
    /// Per-sample predictions and node marginals for feature vectors.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// JSON Lines; each line a number array or an object with `features` (and optional `id`).
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_enum, default_value = "independent")]
        predict: PredictArg,
    },
    /// Period entropy, conditional entropy and information gain of an attribute.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, value_enum)]
        attribute: AttributeArg,
        #[arg(long, value_enum, default_value = "table")]
        format: StatsFormat,
    },
    /// Compare analytic gradients with finite differences on random instances.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatsFormat {
    Table,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttributeArg {
    Shape,
    Characteristic,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictArg {
    Independent,
    Consistent,
}

impl From<PredictArg> for PredictMode {
    fn from(p: PredictArg) -> Self {
        match p {
            PredictArg::Independent => PredictMode::Independent,
            PredictArg::Consistent => PredictMode::Consistent,
        }
    }
}

fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad split ratios `{s}`"))?;
    match parts.as_slice() {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => bail!("split ratios need three parts, got `{s}`"),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_graph(path: &Path) -> Result<Arc<RelationGraph>> {
    let schema = GraphSchema::load(path).with_context(|| format!("loading schema {}", path.display()))?;
    Ok(Arc::new(schema.build()?))
}

fn load_data(path: &Path, graph: Arc<RelationGraph>) -> Result<Dataset> {
    load_dataset(path, graph).with_context(|| format!("loading {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn synth(config: &Path, out: &Path, seed: Option<u64>, schema: Option<PathBuf>, split: &str) -> Result<()> {
    let mut cfg: SynthConfig = read_json(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let ratios = match cfg.split {
        Some(r) => r,
        None => parse_ratios(split)?,
    };
    cfg.split = None;
    let dataset = split_dataset(&synth_generate(&cfg)?, ratios, cfg.seed, Rounding::LargestRemainder)?;
    dataset.save(out).with_context(|| format!("writing {}", out.display()))?;
    let schema = schema.unwrap_or_else(|| out.with_extension("schema.json"));
    dataset.graph().to_schema().save(&schema)?;
    let counts: Vec<usize> = Split::ALL.iter().map(|&s| dataset.indices(s).len()).collect();
    eprintln!(
        "wrote {} records (train {}, val {}, test {}) to {}; schema {}",
        dataset.len(),
        counts[0],
        counts[1],
        counts[2],
        out.display(),
        schema.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &Path,
    graph: &Path,
    config: Option<PathBuf>,
    out: &Path,
    ablation: Option<String>,
    seed: Option<u64>,
    history: Option<PathBuf>,
) -> Result<()> {
    let mut cfg: TrainConfig = match config {
        Some(path) => read_json(&path)?,
        None => TrainConfig::default(),
    };
    if let Some(flags) = ablation {
        cfg.ablation = flags.parse::<Ablation>().map_err(anyhow::Error::msg)?;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let dataset = load_data(data, load_graph(graph)?)?;
    log::info!("training on {} records with {:?}", dataset.len(), cfg.ablation);
    let outcome = train_new(&dataset, &cfg)?;
    for row in &outcome.history {
        log::debug!("epoch {} loss {:.5} val period OA {:.4}", row.epoch, row.loss, row.val_period_oa);
    }
    outcome.model.save(out, dataset.graph())?;
    let history = history.unwrap_or_else(|| {
        let mut name = out.as_os_str().to_owned();
        name.push(".history.csv");
        PathBuf::from(name)
    });
    write_history_csv(&outcome.history, fs::File::create(&history)?)?;
    eprintln!(
        "best epoch {} of {} (val period OA {:.4}{}); checkpoint {}, history {}",
        outcome.best_epoch,
        outcome.history.len(),
        outcome.best_val_period_oa,
        if outcome.stopped_early { ", stopped early" } else { "" },
        out.display(),
        history.display()
    );
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, split: &str, format: ReportFormat, mode: PredictMode) -> Result<()> {
    let (model, graph) = Model::load(ckpt)?;
    let dataset = load_data(data, Arc::new(graph))?;
    let split: Split = split.parse().map_err(anyhow::Error::msg)?;
    let metrics = evaluate_split(&model, &dataset, split, mode)?;
    match format {
        ReportFormat::Json => print_json(&metrics)?,
        ReportFormat::Csv => write_metrics_csv(&metrics, dataset.graph(), io::stdout().lock())?,
    }
    eprintln!(
        "{} records: dynasty OA {:.4}, period OA {:.4}, dynasty AU(PRC) {:.4}, period AU(PRC) {:.4}",
        metrics.samples, metrics.dynasty_oa, metrics.period_oa, metrics.dynasty_auprc, metrics.period_auprc
    );
    Ok(())
}

#[derive(Serialize)]
struct NodeMarginal<'a> {
    node: &'a str,
    kind: NodeKind,
    marginal: f64,
}

#[derive(Serialize)]
struct Inference<'a> {
    id: String,
    dynasty: &'a str,
    period: &'a str,
    marginals: Vec<NodeMarginal<'a>>,
}

fn read_feature_lines(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let reader = BufReader::new(fs::File::open(path).with_context(|| format!("reading {}", path.display()))?);
    let (mut ids, mut rows) = (Vec::new(), Vec::new());
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let (id, features) = match &value {
            serde_json::Value::Array(_) => (None, value.clone()),
            serde_json::Value::Object(map) => (
                map.get("id").and_then(|v| v.as_str()).map(str::to_owned),
                map.get("features").cloned().unwrap_or_default(),
            ),
            _ => bail!("{}:{}: expected an array or an object", path.display(), i + 1),
        };
        let features: Vec<f64> = serde_json::from_value(features)
            .with_context(|| format!("{}:{}: features must be a number array", path.display(), i + 1))?;
        ids.push(id.unwrap_or_else(|| rows.len().to_string()));
        rows.push(features);
    }
    Ok((ids, rows))
}

fn infer(ckpt: &Path, features: &Path, mode: PredictMode) -> Result<()> {
    let (model, graph) = Model::load(ckpt)?;
    let (ids, rows) = read_feature_lines(features)?;
    if rows.is_empty() {
        bail!("{} holds no feature vectors", features.display());
    }
    let outputs = model.forward(&Tensor::from_rows(&rows)?)?;
    let predictions = predict(&outputs, &graph, mode);
    let views = [Scope::Era, Scope::EraShape, Scope::EraCharacteristic].map(|s| graph.view(s));
    let nodes = graph.nodes();
    let mut out = io::stdout().lock();
    for (r, (id, (d, p))) in ids.into_iter().zip(predictions).enumerate() {
        let acts = NodeActivations::from_heads(
            outputs.dynasty_sigmoid.row(r),
            outputs.period_sigmoid.row(r),
            outputs.shape_sigmoid.row(r),
            outputs.char_sigmoid.row(r),
        )?;
        let mut marginal = vec![f64::NAN; graph.len()];
        for view in &views {
            let result = factorized_inference(view, &acts)?;
            for (&node, m) in view.nodes().iter().zip(result.marginals) {
                marginal[node] = m;
            }
        }
        let record = Inference {
            id,
            dynasty: &nodes[graph.dynasty(d)].name,
            period: &nodes[graph.period(p)].name,
            marginals: nodes
                .iter()
                .zip(&marginal)
                .map(|(n, &m)| NodeMarginal {
                    node: &n.name,
                    kind: n.kind,
                    marginal: m,
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &record)?;
        writeln!(out)?;
    }
    Ok(())
}

fn stats(data: &Path, graph: &Path, attribute: AttributeArg, format: StatsFormat) -> Result<()> {
    let dataset = load_data(data, load_graph(graph)?)?;
    let attribute = match attribute {
        AttributeArg::Shape => Attribute::Shape,
        AttributeArg::Characteristic => Attribute::Characteristic,
    };
    let report = dataset_stats(&dataset, attribute)?;
    match format {
        StatsFormat::Json => print_json(&report)?,
        StatsFormat::Table => print!("{}", report.to_table()),
    }
    Ok(())
}

fn gradcheck(seed: u64, instances: usize) -> Result<bool> {
    let report = gradient_check(&GradcheckConfig {
        seed,
        instances,
        ..Default::default()
    })?;
    print_json(&report)?;
    eprintln!(
        "{} instances, {} entries, {} failures, max relative error {:.2e}",
        report.instances, report.entries, report.failures, report.max_rel_error
    );
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Synth {
            config,
            out,
            seed,
            schema,
            split,
        } => synth(&config, &out, seed, schema, &split)?,
        Command::Train {
            data,
            graph,
            config,
            out,
            ablation,
            seed,
            history,
        } => train(&data, &graph, config, &out, ablation, seed, history)?,
        Command::Eval {
            ckpt,
            data,
            split,
            format,
            predict,
        } => eval(&ckpt, &data, &split, format, predict.into())?,
        Command::Infer {
            ckpt,
            features,
            predict,
        } => infer(&ckpt, &features, predict.into())?,
        Command::Stats {
            data,
            graph,
            attribute,
            format,
        } => stats(&data, &graph, attribute, format)?,
        Command::Gradcheck { seed, instances } => return gradcheck(seed, instances),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DINGDATE_LOG", "warn")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
