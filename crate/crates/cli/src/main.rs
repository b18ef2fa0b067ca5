use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rechunk::evaluation::{render_jsonl, render_table};
use rechunk::runner::{read_reports, write_outputs, Providers, RunOutcome, Session};
use rechunk::{
    ChunkingMethod, ChunkingMode, DatasetPaths, ExperimentConfig, GridSpec, ProviderKind,
    RetrievalMethod, Strategy, SubsetMode,
};

#[derive(Parser)]
#[command(
    name = "rechunk",
    version,
    about = "Early/late chunking and contextual retrieval experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the corpus and record its provenance.
    Ingest(Common),
    /// Populate the embedding cache and index snapshot.
    Embed(Common),
    /// Generate and cache chunk contexts.
    Contextualize(Common),
    /// Run a single experiment.
    Run(Common),
    /// Run the chunking × retrieval grid.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Chunking methods to include (default: all four).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<MethodArg>,
        /// Retrieval methods to include (default: TR and RFR).
        #[arg(long, value_delimiter = ',')]
        retrievals: Vec<RetrievalArg>,
        /// Chunking modes to include (default: early).
        #[arg(long, value_delimiter = ',')]
        modes: Vec<ModeArg>,
    },
    /// Render saved reports.
    Report {
        /// A reports.jsonl file or a directory containing one.
        path: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the deterministic in-process providers.
    #[arg(long)]
    mock_providers: bool,
    /// BEIR-style dataset directory (corpus.jsonl, queries.jsonl, qrels/<split>.tsv).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    subset_mode: Option<SubsetArg>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long)]
    window_chars: Option<usize>,
    #[arg(long)]
    max_chunk_chars: Option<usize>,
    #[arg(long, value_enum)]
    chunking_mode: Option<ModeArg>,
    #[arg(long)]
    contextualize: bool,
    #[arg(long, value_enum)]
    retrieval: Option<RetrievalArg>,
    #[arg(long)]
    dense_weight: Option<f64>,
    #[arg(long)]
    sparse_weight: Option<f64>,
    #[arg(long)]
    candidate_depth: Option<usize>,
    #[arg(long)]
    relevance_threshold: Option<u32>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    query_limit: Option<usize>,
    /// Directory for reports.jsonl and manifests.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsetArg {
    Shuffle,
    Prefix,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Fixed,
    Semantic,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Early,
    Late,
}

#[derive(Clone, Copy, ValueEnum)]
enum RetrievalArg {
    #[value(name = "tr", alias = "TR")]
    Tr,
    #[value(name = "rfr", alias = "RFR")]
    Rfr,
}

#[derive(Clone, Copy, ValueEnum)]
#[allow(clippy::upper_case_acronyms)]
enum MethodArg {
    #[value(name = "FUC", alias = "fuc")]
    FUC,
    #[value(name = "SUC", alias = "suc")]
    SUC,
    #[value(name = "FCC", alias = "fcc")]
    FCC,
    #[value(name = "SCC", alias = "scc")]
    SCC,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
}

impl From<ModeArg> for ChunkingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Early => ChunkingMode::Early,
            ModeArg::Late => ChunkingMode::Late,
        }
    }
}

impl From<RetrievalArg> for RetrievalMethod {
    fn from(r: RetrievalArg) -> Self {
        match r {
            RetrievalArg::Tr => RetrievalMethod::Traditional,
            RetrievalArg::Rfr => RetrievalMethod::RankFusionRerank,
        }
    }
}

impl From<MethodArg> for ChunkingMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::FUC => ChunkingMethod::FixedUncontextualized,
            MethodArg::SUC => ChunkingMethod::SemanticUncontextualized,
            MethodArg::FCC => ChunkingMethod::FixedContextualized,
            MethodArg::SCC => ChunkingMethod::SemanticContextualized,
        }
    }
}

impl Common {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_env();
        if let Some(dir) = &self.dataset {
            cfg.dataset = DatasetPaths::beir(dir, &self.split);
        }
        if let Some(f) = self.fraction {
            cfg.subset.fraction = f;
        }
        if let Some(s) = self.seed {
            cfg.subset.seed = s;
        }
        if let Some(m) = self.subset_mode {
            cfg.subset.mode = match m {
                SubsetArg::Shuffle => SubsetMode::Shuffle,
                SubsetArg::Prefix => SubsetMode::Prefix,
            };
        }
        if let Some(s) = self.strategy {
            cfg.segmenter.strategy = match s {
                StrategyArg::Fixed => Strategy::FixedWindow,
                StrategyArg::Semantic => Strategy::Semantic,
            };
        }
        if let Some(w) = self.window_chars {
            cfg.segmenter.window_chars = w;
        }
        if let Some(m) = self.max_chunk_chars {
            cfg.segmenter.max_chunk_chars = m;
        }
        if let Some(m) = self.chunking_mode {
            cfg.chunking_mode = m.into();
        }
        if self.contextualize {
            cfg.contextualize = true;
        }
        if let Some(r) = self.retrieval {
            cfg.retrieval_method = r.into();
        }
        if let Some(w) = self.dense_weight {
            cfg.fusion.dense_weight = w;
        }
        if let Some(w) = self.sparse_weight {
            cfg.fusion.sparse_weight = w;
        }
        if let Some(d) = self.candidate_depth {
            cfg.fusion.candidate_depth = d;
        }
        if let Some(t) = self.relevance_threshold {
            cfg.relevance_threshold = t;
        }
        if let Some(e) = &self.endpoint {
            cfg.providers.endpoint = Some(e.clone());
            cfg.providers.kind = ProviderKind::Sidecar;
        }
        if self.mock_providers {
            cfg.providers.kind = ProviderKind::Mock;
        }
        if let Some(d) = &self.cache_dir {
            cfg.cache_dir = Some(d.clone());
        }
        if let Some(q) = self.query_limit {
            cfg.query_limit = Some(q);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn session(&self, cfg: &ExperimentConfig) -> anyhow::Result<Session> {
        let providers = Providers::from_config(&cfg.providers, cfg.tokenizer)?;
        Ok(Session::open(cfg, providers)?)
    }
}

/// Exit status of a completed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Ok,
    Degraded,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Degraded) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<rechunk::Error>() {
        Some(err) if err.is_provider() => 2,
        _ => 1,
    }
}

fn dispatch(command: Command) -> anyhow::Result<Status> {
    match command {
        Command::Ingest(common) => {
            let cfg = common.config()?;
            let session = common.session(&cfg)?;
            let p = session.provenance();
            println!("corpus hash   {}", p.corpus_hash);
            println!(
                "documents     {} of {}",
                p.documents_used, p.documents_total
            );
            println!("queries       {}", p.queries);
            println!("judgments     {}", p.judgments);
            if let Some(dir) = &cfg.cache_dir {
                std::fs::create_dir_all(dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
                let path = dir.join("corpus.json");
                std::fs::write(&path, serde_json::to_string_pretty(p)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(Status::Ok)
        }
        Command::Embed(common) => prepare(&common, false),
        Command::Contextualize(common) => prepare(&common, true),
        Command::Run(common) => {
            let cfg = common.config()?;
            let session = common.session(&cfg)?;
            let outcome = session.run(&cfg)?;
            session.flush()?;
            emit(&common.out, &[&outcome])?;
            Ok(status(&[&outcome]))
        }
        Command::Grid {
            common,
            methods,
            retrievals,
            modes,
        } => {
            let base = common.config()?;
            let mut spec = GridSpec::default();
            if !methods.is_empty() {
                spec.chunking_methods = methods.into_iter().map(Into::into).collect();
            }
            if !retrievals.is_empty() {
                spec.retrieval_methods = retrievals.into_iter().map(Into::into).collect();
            }
            if !modes.is_empty() {
                spec.chunking_modes = modes.into_iter().map(Into::into).collect();
            }
            let cells = spec.expand(&base);
            for c in &cells {
                c.validate()?;
            }
            let session = common.session(&base)?;
            let results = session.run_grid(&cells);
            session.flush()?;
            let done: Vec<&RunOutcome> = results
                .iter()
                .filter_map(|c| c.outcome.as_ref().ok())
                .collect();
            emit(&common.out, &done)?;
            let mut failed = 0;
            let mut provider_failure = false;
            for c in &results {
                if let Err(e) = &c.outcome {
                    failed += 1;
                    provider_failure |= e.is_provider();
                    eprintln!(
                        "cell {}×{} ({:?}) failed: {e}",
                        c.chunking, c.retrieval, c.chunking_mode
                    );
                }
            }
            match failed {
                0 => Ok(status(&done)),
                n if provider_failure => {
                    Err(rechunk::Error::from(rechunk::ProviderError::Transport {
                        provider: "grid".into(),
                        message: format!("{n} of {} cells failed", results.len()),
                    })
                    .into())
                }
                n => bail!("{n} of {} cells failed", results.len()),
            }
        }
        Command::Report { path, format } => {
            let file = if path.is_dir() {
                path.join("reports.jsonl")
            } else {
                path
            };
            let reports = read_reports(&file)?;
            match format {
                Format::Table => print!("{}", render_table(&reports)),
                Format::Json => print!("{}", render_jsonl(&reports)),
            }
            Ok(Status::Ok)
        }
    }
}

fn prepare(common: &Common, contextualize: bool) -> anyhow::Result<Status> {
    let mut cfg = common.config()?;
    if contextualize {
        cfg.contextualize = true;
        cfg.validate()?;
    }
    if cfg.cache_dir.is_none() {
        log::warn!("no cache_dir configured; results will not persist");
    }
    let session = common.session(&cfg)?;
    let prepared = session.prepare(&cfg)?;
    session.flush()?;
    println!(
        "{} chunks prepared ({})",
        prepared.chunks.len(),
        cfg.chunking_method()
    );
    for w in &prepared.warnings {
        println!("warning: {w}");
    }
    Ok(Status::Ok)
}

fn emit(out: &Option<PathBuf>, outcomes: &[&RunOutcome]) -> anyhow::Result<()> {
    let reports: Vec<_> = outcomes.iter().map(|o| o.report.clone()).collect();
    print!("{}", render_table(&reports));
    if let Some(dir) = out {
        write_outputs(Path::new(dir), outcomes)?;
        log::info!("wrote {}", dir.display());
    }
    for o in outcomes {
        for w in &o.manifest.warnings {
            eprintln!("warning: {w}");
        }
    }
    Ok(())
}

fn status(outcomes: &[&RunOutcome]) -> Status {
    if outcomes.iter().any(|o| o.manifest.degraded) {
        Status::Degraded
    } else {
        Status::Ok
    }
}
