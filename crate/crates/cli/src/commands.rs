use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use astroloc::geo::{footprint_area_sqkm, read_footprint_records, FootprintRecord, GeoPoint};
use astroloc::losses::LossConfig;
use astroloc::mining::{kmeans_fit, mine_pairs, SamplingMode};
use astroloc::retrieval::{
    build_index, eval_queries, has_all_rotations, recall_at_n, worldwide_eval, EvalOptions, RecallReport,
    RetrievalIndex,
};
use astroloc::store::{ingest, read_vector_lines, synth_dataset, EmbeddingStore, SynthConfig};
use astroloc::trainer::{eval_checkpoint, train, TrainConfig, TrainState};
use astroloc::{Error, ErrorClass};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::svg::{line_chart, Series};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

impl CliError {
    /// 1 I/O, 2 usage, 3 format, 4 precondition, 5 numeric.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e.class() {
                ErrorClass::Io => 1,
                ErrorClass::Format => 3,
                ErrorClass::Precondition => 4,
                ErrorClass::Numeric => 5,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Astronaut photography localization: ingestion, mining, training and
/// retrieval evaluation over embedding stores.
#[derive(Debug, Parser)]
#[command(name = "astroloc", version)]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate footprints and vectors and write a normalized store.
    Ingest(IngestArgs),
    /// Generate the synthetic desk-scale dataset.
    Synth(SynthArgs),
    /// Mine query/database pairs above the IoU threshold.
    Pairs(PairsArgs),
    /// Cluster database embeddings and weight clusters by query counts.
    Cluster(ClusterArgs),
    /// Train the embedding table with the pairwise and MUM losses.
    Train(TrainArgs),
    /// Recall@N, optionally region-filtered by nadir.
    Eval(EvalArgs),
    /// Worldwide recall@N with per-query search latency.
    World(WorldArgs),
    /// Summarize a run directory and redraw its plots.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
#[command(rename_all = "snake_case")]
pub struct IngestArgs {
    /// Line-delimited JSON footprint records.
    #[arg(long)]
    pub footprints: PathBuf,
    /// Line-delimited JSON vectors: {id, base_id?, rotation?, vector}.
    #[arg(long)]
    pub vectors: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(rename_all = "snake_case")]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub n_locations: usize,
    #[arg(long, default_value_t = 4)]
    pub db_per_location: usize,
    #[arg(long, default_value_t = 1)]
    pub queries_per_location: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.6)]
    pub noise_sigma: f64,
    #[arg(long, env = "ASTROLOC_SEED", default_value_t = 1)]
    pub seed: u64,
    /// Also emit the four rotation variants of every database image.
    #[arg(long)]
    pub rotations: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(rename_all = "snake_case")]
pub struct PairsArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    pub t_iou: f64,
    #[arg(long, env = "ASTROLOC_SEED", default_value_t = 1)]
    pub seed: u64,
    /// CSV output: query_id,db_base_id,iou.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(rename_all = "snake_case")]
pub struct ClusterArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    #[arg(long, env = "ASTROLOC_SEED", default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Weighted,
    Uniform,
}

impl From<Sampling> for SamplingMode {
    fn from(s: Sampling) -> Self {
        match s {
            Sampling::Weighted => SamplingMode::Weighted,
            Sampling::Uniform => SamplingMode::Uniform,
        }
    }
}

#[derive(Debug, Args, Serialize)]
#[command(rename_all = "snake_case")]
pub struct TrainArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub alpha1: f64,
    #[arg(long, default_value_t = 50.0)]
    pub beta1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha2: f64,
    #[arg(long, default_value_t = 50.0)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 0.2)]
    pub t_iou: f64,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    #[arg(long, default_value_t = 48)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5000)]
    pub refresh_every: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    #[arg(long, env = "ASTROLOC_SEED", default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 48)]
    pub quads_per_batch: usize,
    #[arg(long, value_enum, default_value_t = Sampling::Weighted)]
    pub sampling: Sampling,
    #[arg(long, default_value_t = 100)]
    pub max_batch_retries: usize,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            loss: LossConfig {
                alpha1: self.alpha1,
                beta1: self.beta1,
                alpha2: self.alpha2,
                beta2: self.beta2,
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                t_iou: self.t_iou,
                k: self.k,
                batch_size: self.batch_size,
                refresh_every: self.refresh_every,
            },
            lr: self.lr,
            iterations: self.iterations,
            seed: self.seed,
            quads_per_batch: self.quads_per_batch,
            sampling: self.sampling.into(),
            max_batch_retries: self.max_batch_retries,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Augment {
    /// Augmented when every base image has four rotations.
    Auto,
    On,
    Off,
}

#[derive(Debug, Args, Serialize)]
#[command(rename_all = "snake_case")]
pub struct EvalArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
    pub ns: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Augment::Auto)]
    pub augment: Augment,
    /// Search radius around each query's nadir (km); needs --nadirs.
    #[arg(long)]
    pub region_radius_km: Option<f64>,
    /// Line-delimited JSON {id, lat, lon} giving query nadir points.
    #[arg(long)]
    pub nadirs: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub iou_threshold: f64,
    #[arg(long, env = "ASTROLOC_SEED", default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
#[command(rename_all = "snake_case")]
pub struct WorldArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
    pub ns: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Augment::Auto)]
    pub augment: Augment,
    #[arg(long, env = "ASTROLOC_SEED", default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
#[command(rename_all = "snake_case")]
pub struct ReportArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
}

#[derive(Serialize)]
struct RunConfig<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    threads: Option<usize>,
    args: &'a T,
}

fn echo_config<T: Serialize>(path: &Path, command: &str, threads: Option<usize>, args: &T) -> Result<()> {
    let cfg = RunConfig {
        command,
        version: env!("CARGO_PKG_VERSION"),
        threads,
        args,
    };
    fs::write(path, serde_json::to_string_pretty(&cfg)? + "\n")?;
    Ok(())
}

/// `<out>.run_config.json`, next to a single-file output.
fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run_config.json");
    out.with_file_name(name)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    match cli.command {
        Command::Ingest(a) => cmd_ingest(&a, threads),
        Command::Synth(a) => cmd_synth(&a, threads),
        Command::Pairs(a) => cmd_pairs(&a, threads),
        Command::Cluster(a) => cmd_cluster(&a, threads),
        Command::Train(a) => cmd_train(&a, threads),
        Command::Eval(a) => cmd_eval(&a, threads),
        Command::World(a) => cmd_world(&a, threads),
        Command::Report(a) => cmd_report(&a),
    }
}

/// Linear interpolation between closest ranks.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn cmd_ingest(a: &IngestArgs, threads: Option<usize>) -> Result<()> {
    let fps = read_footprint_records(BufReader::new(File::open(&a.footprints)?))?;
    let vectors = read_vector_lines(BufReader::new(File::open(&a.vectors)?))?;
    let store = ingest(&fps, vectors)?;
    ensure_parent(&a.out)?;
    store.save(&a.out)?;
    echo_config(&sidecar(&a.out), "ingest", threads, a)?;

    let by_id: HashMap<&str, &FootprintRecord> = fps.iter().map(|f| (f.id.as_str(), f)).collect();
    let mut kinds: BTreeMap<String, usize> = BTreeMap::new();
    let mut zooms: BTreeMap<String, usize> = BTreeMap::new();
    let mut areas: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in store.records() {
        *kinds.entry(r.kind.to_string()).or_default() += 1;
        let zoom = by_id
            .get(r.id.as_str())
            .or_else(|| by_id.get(r.base_id.as_str()))
            .and_then(|f| f.zoom)
            .map_or_else(|| "none".to_string(), |z| z.to_string());
        *zooms.entry(zoom).or_default() += 1;
        if let Some(fp) = &r.footprint {
            areas.entry(r.kind.to_string()).or_default().push(footprint_area_sqkm(fp)?);
        }
    }
    println!("wrote {} records (dim {}) to {}", store.len(), store.dim(), a.out.display());
    for (k, n) in &kinds {
        println!("kind {k}: {n}");
    }
    for (z, n) in &zooms {
        println!("zoom {z}: {n}");
    }
    println!("area_sqkm by kind: p5 / p50 / p95");
    for (k, v) in &mut areas {
        v.sort_by(f64::total_cmp);
        println!(
            "  {k}: {:.3} / {:.3} / {:.3}",
            percentile(v, 5.0),
            percentile(v, 50.0),
            percentile(v, 95.0)
        );
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs, threads: Option<usize>) -> Result<()> {
    let store = synth_dataset(&SynthConfig {
        n_locations: a.n_locations,
        db_per_location: a.db_per_location,
        queries_per_location: a.queries_per_location,
        dim: a.dim,
        noise_sigma: a.noise_sigma,
        seed: a.seed,
        rotations: a.rotations,
    })?;
    ensure_parent(&a.out)?;
    store.save(&a.out)?;
    echo_config(&sidecar(&a.out), "synth", threads, a)?;
    println!(
        "wrote {} records ({} queries, {} db) to {}",
        store.len(),
        store.query_indices().len(),
        store.db_indices().len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_pairs(a: &PairsArgs, threads: Option<usize>) -> Result<()> {
    if !(a.t_iou > 0.0 && a.t_iou <= 1.0) {
        return Err(CliError::Usage("--t_iou must lie in (0, 1]".into()));
    }
    let store = EmbeddingStore::load(&a.store)?;
    let index = mine_pairs(&store, a.t_iou)?;
    let mut rows: Vec<(&str, &str, f64)> = index
        .pairs
        .iter()
        .map(|p| (store.get(p.query).id.as_str(), store.get(p.db_base).base_id.as_str(), p.iou))
        .collect();
    rows.sort_by(|x, y| x.0.cmp(y.0).then_with(|| x.1.cmp(y.1)));
    let mut csv = String::from("query_id,db_base_id,iou\n");
    for (q, d, iou) in &rows {
        csv.push_str(&format!("{q},{d},{iou}\n"));
    }
    ensure_parent(&a.out)?;
    fs::write(&a.out, csv)?;
    echo_config(&sidecar(&a.out), "pairs", threads, a)?;
    let queries = rows.iter().map(|r| r.0).collect::<std::collections::BTreeSet<_>>().len();
    println!("{} pairs over {} queries written to {}", rows.len(), queries, a.out.display());
    Ok(())
}

fn cmd_cluster(a: &ClusterArgs, threads: Option<usize>) -> Result<()> {
    let store = EmbeddingStore::load(&a.store)?;
    let vectors = store.vectors_f64();
    let db: Vec<Vec<f64>> = store.db_indices().iter().map(|&i| vectors[i].clone()).collect();
    let queries: Vec<Vec<f64>> = store.query_indices().iter().map(|&i| vectors[i].clone()).collect();
    let mut model = kmeans_fit(&db, a.k, a.seed)?;
    model.assign_queries(&queries)?;
    ensure_parent(&a.out)?;
    model.save(&a.out)?;
    echo_config(&sidecar(&a.out), "cluster", threads, a)?;
    let used = model.bins.iter().filter(|&&b| b > 0).count();
    println!(
        "K={} over {} db vectors; {} queries fall in {} clusters; final SSE {:.6}",
        model.k(),
        db.len(),
        queries.len(),
        used,
        model.sse_history.last().copied().unwrap_or(0.0)
    );
    Ok(())
}

fn loss_svg(state: &TrainState) -> String {
    let h = &state.loss_history;
    let window = (h.len() / 200).max(1);
    let smooth = |f: &dyn Fn(usize) -> f64| -> Vec<(f64, f64)> {
        h.chunks(window)
            .enumerate()
            .map(|(c, chunk)| {
                let start = c * window;
                let mean = (0..chunk.len()).map(|i| f(start + i)).sum::<f64>() / chunk.len() as f64;
                (h[start].iteration as f64, mean)
            })
            .collect()
    };
    let series = [
        Series {
            name: "total",
            points: smooth(&|i| h[i].total),
        },
        Series {
            name: "pairs",
            points: smooth(&|i| h[i].pairs),
        },
        Series {
            name: "MUM",
            points: smooth(&|i| h[i].mum),
        },
    ];
    line_chart("Training loss", "iteration", "loss", &series, false, None)
}

fn cmd_train(a: &TrainArgs, threads: Option<usize>) -> Result<()> {
    let store = EmbeddingStore::load(&a.store)?;
    let cfg = a.config();
    let (state, trained) = train(&store, &cfg)?;
    fs::create_dir_all(&a.out_dir)?;
    trained.save(a.out_dir.join("embeddings.aem"))?;
    fs::write(a.out_dir.join("state.json"), serde_json::to_string_pretty(&state)? + "\n")?;
    fs::write(a.out_dir.join("loss.csv"), state.loss_csv())?;
    fs::write(a.out_dir.join("loss.svg"), loss_svg(&state))?;
    echo_config(&a.out_dir.join("run_config.json"), "train", threads, a)?;

    let first = state.loss_history.first();
    let last = state.loss_history.last();
    if let (Some(f), Some(l)) = (first, last) {
        println!("loss {:.6} -> {:.6} over {} iterations", f.total, l.total, state.iteration);
    }
    match eval_checkpoint(&state, &store) {
        Ok(r) => println!("checkpoint recall: {}", fmt_recall(&r)),
        Err(e) => println!("checkpoint recall unavailable: {e}"),
    }
    println!("wrote {}", a.out_dir.display());
    Ok(())
}

fn fmt_recall(r: &RecallReport) -> String {
    r.recall_at
        .iter()
        .map(|(n, v)| format!("R@{n}={v:.2}%"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn index_for(store: &EmbeddingStore, augment: Augment) -> Result<RetrievalIndex> {
    let aug = match augment {
        Augment::Auto => has_all_rotations(store),
        Augment::On => true,
        Augment::Off => false,
    };
    Ok(build_index(store, aug)?)
}

fn check_ns(ns: &[usize]) -> Result<()> {
    if ns.is_empty() || ns.contains(&0) {
        return Err(CliError::Usage("--ns needs positive integers".into()));
    }
    Ok(())
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct NadirLine {
    id: String,
    lat: f64,
    lon: f64,
}

fn read_nadirs(path: &Path) -> Result<HashMap<String, GeoPoint>> {
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Format { line: i + 1, message };
        let n: NadirLine = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        let p = GeoPoint::new(n.lat, n.lon).map_err(|e| fail(e.to_string()))?;
        out.insert(n.id, p);
    }
    Ok(out)
}

fn recall_svg(r: &RecallReport, title: &str) -> String {
    let points: Vec<(f64, f64)> = r.recall_at.iter().map(|(&n, &v)| (n as f64, v)).collect();
    line_chart(
        title,
        "N",
        "recall (%)",
        &[Series { name: "recall@N", points }],
        true,
        Some((0.0, 100.0)),
    )
}

fn write_recall(dir: &Path, r: &RecallReport, title: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("recall.json"), serde_json::to_string_pretty(r)? + "\n")?;
    fs::write(dir.join("recall.csv"), r.to_csv())?;
    fs::write(dir.join("recall.svg"), recall_svg(r, title))?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, threads: Option<usize>) -> Result<()> {
    check_ns(&a.ns)?;
    if a.region_radius_km.is_some() != a.nadirs.is_some() {
        return Err(CliError::Usage("--region_radius_km and --nadirs go together".into()));
    }
    let store = EmbeddingStore::load(&a.store)?;
    let index = index_for(&store, a.augment)?;
    let mut queries = eval_queries(&store)?;
    if let Some(path) = &a.nadirs {
        let nadirs = read_nadirs(path)?;
        for q in &mut queries {
            q.nadir = nadirs.get(&q.id).copied();
        }
    }
    let opts = EvalOptions {
        region_radius_km: a.region_radius_km,
        iou_threshold: a.iou_threshold,
    };
    let report = recall_at_n(&index, &queries, &a.ns, &opts)?;
    write_recall(&a.out_dir, &report, "Recall@N")?;
    echo_config(&a.out_dir.join("run_config.json"), "eval", threads, a)?;
    println!(
        "{} queries, {} db images ({} indexed): {}",
        report.num_queries,
        report.num_db_base,
        report.num_db_augmented,
        fmt_recall(&report)
    );
    Ok(())
}

fn cmd_world(a: &WorldArgs, threads: Option<usize>) -> Result<()> {
    check_ns(&a.ns)?;
    let store = EmbeddingStore::load(&a.store)?;
    let index = index_for(&store, a.augment)?;
    let queries = eval_queries(&store)?;
    let report = worldwide_eval(&index, &queries, &a.ns)?;
    write_recall(&a.out_dir, &report, "Worldwide recall@N")?;
    let latency = report.latency.as_ref().expect("worldwide report has latency");
    fs::write(a.out_dir.join("latency.csv"), latency.to_csv())?;
    echo_config(&a.out_dir.join("run_config.json"), "world", threads, a)?;
    println!("{}", fmt_recall(&report));
    println!(
        "index: {} entries, {} bytes; latency ({}): mean {:.1} us, p95 {:.1} us",
        latency.index_entries,
        index.memory_bytes(),
        latency.scope,
        latency.mean_micros,
        latency.p95_micros
    );
    Ok(())
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn parse_num(s: &str, path: &Path, line: usize) -> Result<f64> {
    s.trim().parse().map_err(|_| {
        CliError::Core(Error::Format {
            line,
            message: format!("{}: not a number: {s:?}", path.display()),
        })
    })
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let dir = &a.run_dir;
    let mut found = false;
    let recall_path = dir.join("recall.csv");
    if recall_path.exists() {
        found = true;
        let mut points = Vec::new();
        println!("| N | recall (%) |\n|---|---|");
        for (i, row) in read_csv(&recall_path)?.iter().enumerate() {
            let n = parse_num(&row[0], &recall_path, i + 2)?;
            let v = parse_num(row.get(1).map_or("", String::as_str), &recall_path, i + 2)?;
            println!("| {n} | {v:.2} |");
            points.push((n, v));
        }
        let svg = line_chart(
            "Recall@N",
            "N",
            "recall (%)",
            &[Series { name: "recall@N", points }],
            true,
            Some((0.0, 100.0)),
        );
        fs::write(dir.join("recall.svg"), svg)?;
    }
    let loss_path = dir.join("loss.csv");
    if loss_path.exists() {
        found = true;
        let rows = read_csv(&loss_path)?;
        let mut total = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let it = parse_num(&row[0], &loss_path, i + 2)?;
            let t = parse_num(row.get(3).map_or("", String::as_str), &loss_path, i + 2)?;
            total.push((it, t));
        }
        if let (Some(f), Some(l)) = (total.first(), total.last()) {
            println!("loss: {:.6} at iteration {} -> {:.6} at iteration {}", f.1, f.0, l.1, l.0);
        }
        let svg = line_chart(
            "Training loss",
            "iteration",
            "total loss",
            &[Series { name: "total", points: total }],
            false,
            None,
        );
        fs::write(dir.join("loss.svg"), svg)?;
    }
    let latency_path = dir.join("latency.csv");
    if latency_path.exists() {
        found = true;
        let mut t = Vec::new();
        for (i, row) in read_csv(&latency_path)?.iter().enumerate() {
            t.push(parse_num(row.get(1).map_or("", String::as_str), &latency_path, i + 2)?);
        }
        t.sort_by(f64::total_cmp);
        if !t.is_empty() {
            let mean = t.iter().sum::<f64>() / t.len() as f64;
            let rank = ((0.95 * t.len() as f64).ceil() as usize).clamp(1, t.len());
            println!("latency: {} queries, mean {mean:.1} us, p95 {:.1} us", t.len(), t[rank - 1]);
        }
    }
    if !found {
        return Err(CliError::Core(Error::InvalidArgument(format!(
            "{} holds no recall.csv, loss.csv or latency.csv",
            dir.display()
        ))));
    }
    Ok(())
}
