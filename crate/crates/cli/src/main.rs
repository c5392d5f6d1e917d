use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use embmapper_core::agents::provider::ProviderConfig;
use embmapper_core::agents::{Agent, AgentConfig, Cache};
use embmapper_core::dataset::{load_dataset, Dataset};
use embmapper_core::mapper::{build_mapper, Epsilon, MapperGraph, MapperKind, MapperParams, DEFAULT_MIN_PTS};
use embmapper_core::synth::{generate, Shape, SynthConfig};
use embmapper_service::{AppState, Providers, ServiceConfig};

const EXIT_VALIDATION: u8 = 2;
const EXIT_PROVIDER: u8 = 3;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("provider failure: {0}")]
    Provider(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Provider(_) => EXIT_PROVIDER,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

#[derive(Parser)]
#[command(name = "embmapper", version, about = "Mapper graphs over contextual embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a mapper graph from one layer of a dataset.
    Mapper(MapperArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Explain and verify every component and node of a graph.
    Precompute(PrecomputeArgs),
    /// Convert a graph JSON file to GraphML.
    ExportGraphml(ExportArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Classical,
    Ball,
}

#[derive(Args)]
struct MapperArgs {
    /// Manifest path, dataset directory, or dataset name under --datasets-dir.
    #[arg(long)]
    dataset: String,
    #[arg(long, env = "EMBMAPPER_DATASETS_DIR", default_value = "datasets")]
    datasets_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    layer: u32,
    #[arg(long, value_enum, default_value = "classical")]
    kind: Kind,
    /// Number of cover intervals.
    #[arg(long, default_value_t = embmapper_core::mapper::DEFAULT_COVER_N)]
    n: usize,
    /// Overlap fraction of consecutive intervals.
    #[arg(long, default_value_t = embmapper_core::mapper::DEFAULT_COVER_OVERLAP)]
    p: f64,
    #[arg(long, default_value_t = DEFAULT_MIN_PTS)]
    minpts: usize,
    /// Neighbourhood radius, or `auto`.
    #[arg(long, default_value = "auto")]
    eps: String,
    /// Graph JSON output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional GraphML output.
    #[arg(long)]
    graphml: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeArg {
    Blobs,
    OffsetCircle,
    Grid,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    shape: ShapeArg,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 10.0)]
    sep: f64,
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    layers: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    name: Option<String>,
    /// Output directory for the manifest and JSONL files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProviderArgs {
    /// Use the deterministic in-process providers.
    #[arg(long)]
    mock: bool,
    #[arg(long, env = "EMBMAPPER_CHAT_URL")]
    chat_url: Option<String>,
    #[arg(long, env = "EMBMAPPER_CHAT_MODEL")]
    chat_model: Option<String>,
    #[arg(long, env = "EMBMAPPER_SENTENCE_EMBED_URL")]
    sentence_embed_url: Option<String>,
    #[arg(long, env = "EMBMAPPER_OCCURRENCE_EMBED_URL")]
    occurrence_embed_url: Option<String>,
}

impl ProviderArgs {
    fn providers(&self) -> Providers {
        if self.mock {
            return Providers::Mock;
        }
        let mut cfg = ProviderConfig::from_env();
        cfg.chat_url = self.chat_url.clone().or(cfg.chat_url);
        if let Some(m) = &self.chat_model {
            cfg.chat_model = m.clone();
        }
        cfg.sentence_url = self.sentence_embed_url.clone().or(cfg.sentence_url);
        cfg.occurrence_url = self.occurrence_embed_url.clone().or(cfg.occurrence_url);
        Providers::Http(cfg)
    }
}

#[derive(Args)]
struct PrecomputeArgs {
    /// Graph JSON written by `mapper`.
    #[arg(long)]
    graph: PathBuf,
    /// Manifest path, dataset directory, or dataset name under --datasets-dir.
    #[arg(long)]
    dataset: String,
    #[arg(long, env = "EMBMAPPER_DATASETS_DIR", default_value = "datasets")]
    datasets_dir: PathBuf,
    /// Response cache; reruns reuse it.
    #[arg(long, env = "EMBMAPPER_CACHE_DIR", default_value = "cache")]
    cache: PathBuf,
    /// Annotations JSON output.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    providers: ProviderArgs,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "EMBMAPPER_DATASETS_DIR", default_value = "datasets")]
    datasets_dir: PathBuf,
    #[arg(long, env = "EMBMAPPER_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, env = "EMBMAPPER_CACHE_DIR", default_value = "cache")]
    cache_dir: PathBuf,
    #[arg(long, env = "EMBMAPPER_ADDR", default_value = "127.0.0.1:8080")]
    addr: String,
    /// Agent jobs allowed to run at once.
    #[arg(long, env = "EMBMAPPER_MAX_JOBS", default_value_t = 4)]
    max_jobs: usize,
    #[command(flatten)]
    providers: ProviderArgs,
}

fn resolve_dataset(spec: &str, datasets_dir: &Path) -> Result<Dataset, CliError> {
    let direct = PathBuf::from(spec);
    let manifest = if direct.is_file() {
        direct
    } else if direct.join("manifest.json").is_file() {
        direct.join("manifest.json")
    } else {
        datasets_dir.join(spec).join("manifest.json")
    };
    load_dataset(&manifest).map_err(invalid)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn read_graph(path: &Path) -> Result<MapperGraph, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    MapperGraph::from_json(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn cmd_mapper(a: MapperArgs) -> Result<(), CliError> {
    let epsilon: Epsilon = a.eps.parse().map_err(invalid)?;
    let params = MapperParams {
        kind: match a.kind {
            Kind::Classical => MapperKind::Classical,
            Kind::Ball => MapperKind::Ball,
        },
        cover_n: a.n,
        cover_overlap: a.p,
        min_pts: a.minpts,
        epsilon,
    };
    params.validate().map_err(invalid)?;
    let ds = resolve_dataset(&a.dataset, &a.datasets_dir)?;
    let g = build_mapper(&ds, a.layer, &params).map_err(invalid)?;
    if let Some(out) = &a.out {
        write_file(out, g.to_json().as_bytes())?;
    }
    if let Some(out) = &a.graphml {
        write_file(out, g.to_graphml().as_bytes())?;
    }
    println!(
        "{} nodes, {} edges, {} components (epsilon {}, params {})",
        g.nodes.len(),
        g.edges.len(),
        g.components().len(),
        g.epsilon,
        g.params.params_hash()
    );
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let shape = match a.shape {
        ShapeArg::Blobs => Shape::Blobs,
        ShapeArg::OffsetCircle => Shape::OffsetCircle,
        ShapeArg::Grid => Shape::Grid,
    };
    let cfg = SynthConfig {
        shape,
        n: a.n,
        k: a.k,
        sep: a.sep,
        radius: a.radius,
        dim: a.dim,
        layers: a.layers,
        seed: a.seed,
        name: a.name,
    };
    let ds = generate(&cfg).map_err(invalid)?;
    let manifest = ds.write_to_dir(&a.out).map_err(invalid)?;
    println!("{} points, {} layers -> {}", ds.len(), ds.layer_ids().len(), manifest.display());
    Ok(())
}

fn cmd_precompute(a: PrecomputeArgs) -> Result<(), CliError> {
    let graph = read_graph(&a.graph)?;
    let ds = resolve_dataset(&a.dataset, &a.datasets_dir)?;
    if ds.name != graph.dataset {
        return Err(invalid(format!(
            "graph was built on `{}`, not `{}`",
            graph.dataset, ds.name
        )));
    }
    let cache = Arc::new(Cache::on_disk(&a.cache).map_err(invalid)?);
    let agent = match a.providers.providers() {
        Providers::Mock => Agent::offline(&ds, cache),
        Providers::Http(cfg) => {
            let p = |e: embmapper_core::agents::ProviderError| CliError::Provider(e.to_string());
            Agent::new(
                Arc::new(cfg.chat().map_err(p)?),
                Arc::new(cfg.sentence_embedder().map_err(p)?),
                Arc::new(cfg.occurrence_embedder().map_err(p)?),
                cache,
                AgentConfig::default(),
            )
        }
    };
    let report = agent.precompute_annotations(&ds, &graph);
    let json = serde_json::to_vec_pretty(&report).expect("report serializes");
    write_file(&a.out, &json)?;
    for (element, err) in &report.failures {
        eprintln!("{element}: {err}");
    }
    println!("{} computed, {} cached", report.computed, report.cached);
    if report.entries.is_empty() && !report.failures.is_empty() {
        return Err(CliError::Provider(format!("all {} elements failed", report.failures.len())));
    }
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<(), CliError> {
    let g = read_graph(&a.graph)?;
    write_file(&a.out, g.to_graphml().as_bytes())
}

fn cmd_serve(a: ServeArgs) -> Result<(), CliError> {
    let config = ServiceConfig {
        datasets_dir: a.datasets_dir,
        data_dir: a.data_dir,
        cache_dir: a.cache_dir,
        providers: a.providers.providers(),
        max_jobs: a.max_jobs,
    };
    let state = AppState::new(config).map_err(invalid)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(invalid)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| invalid(format!("cannot bind {}: {e}", a.addr)))?;
        println!("listening on http://{}", listener.local_addr().map_err(invalid)?);
        embmapper_service::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(invalid)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Mapper(a) => cmd_mapper(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Precompute(a) => cmd_precompute(a),
        Command::ExportGraphml(a) => cmd_export(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
