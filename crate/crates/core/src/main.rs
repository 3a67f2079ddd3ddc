//! `reid` — evaluate, re-rank, and verify person re-identification
//! embedding pipelines from the command line.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use reid_engine::distances::{pairwise_distance, DistanceMatrix, Metric};
use reid_engine::embedio::{
    load_embedding_set, save_distance_matrix, save_embedding_set, EmbeddingSet,
};
use reid_engine::error::{Error, Result};
use reid_engine::kernels::gradcheck;
use reid_engine::metrics::{evaluate, FilterProtocol};
use reid_engine::report;
use reid_engine::rerank::{k_reciprocal_rerank, RerankParams};
use reid_engine::sampler::sample_batch;
use reid_engine::schedule::{lr_at, LrSchedule, RampKind};
use reid_engine::synth::{generate, SynthConfig};

#[derive(Parser)]
#[command(
    name = "reid",
    version,
    about = "Retrieval evaluation (CMC / mAP / mINP), k-reciprocal re-ranking and \
             gradient-checked metric-learning kernels for re-id embeddings"
)]
struct Cli {
    /// Worker threads; defaults to REID_THREADS or hardware parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a query set against a gallery set.
    Eval(EvalArgs),
    /// Re-rank a query-gallery distance matrix and dump it.
    Rerank(RerankArgs),
    /// Run the finite-difference gradient suite over every kernel.
    GradCheck(GradCheckArgs),
    /// Generate a synthetic labelled embedding set.
    Synth(SynthArgs),
    /// Time distance computation plus evaluation at a synthetic size.
    Bench(BenchArgs),
    /// Draw one identity-balanced P x K batch from a set's labels.
    Sample(SampleArgs),
    /// Print the warm-up learning-rate schedule as JSON.
    Schedule(ScheduleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    #[value(name = "euclidean_sq")]
    EuclideanSq,
    #[value(name = "euclidean")]
    Euclidean,
    #[value(name = "cosine")]
    Cosine,
}

impl From<MetricArg> for Metric {
    fn from(value: MetricArg) -> Self {
        match value {
            MetricArg::EuclideanSq => Metric::EuclideanSq,
            MetricArg::Euclidean => Metric::Euclidean,
            MetricArg::Cosine => Metric::Cosine,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    #[value(name = "cross_camera")]
    CrossCamera,
    #[value(name = "none")]
    None,
}

impl From<ProtocolArg> for FilterProtocol {
    fn from(value: ProtocolArg) -> Self {
        match value {
            ProtocolArg::CrossCamera => FilterProtocol::CrossCamera,
            ProtocolArg::None => FilterProtocol::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum RampArg {
    Prose,
    Formula,
}

impl From<RampArg> for RampKind {
    fn from(value: RampArg) -> Self {
        match value {
            RampArg::Prose => RampKind::Prose,
            RampArg::Formula => RampKind::Formula,
        }
    }
}

#[derive(Args)]
struct RerankFlags {
    /// Reciprocal neighborhood size.
    #[arg(long, default_value_t = 20)]
    k1: usize,
    /// Local query expansion size.
    #[arg(long, default_value_t = 6)]
    k2: usize,
    /// Weight of the original distance in the blend.
    #[arg(long, default_value_t = 0.3)]
    lambda: f64,
}

impl RerankFlags {
    fn params(&self) -> Result<RerankParams> {
        RerankParams::new(self.k1, self.k2, self.lambda)
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Query embedding directory.
    #[arg(long)]
    query: PathBuf,
    /// Gallery embedding directory.
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long, value_enum, default_value = "euclidean")]
    metric: MetricArg,
    #[arg(long, value_enum, default_value = "cross_camera")]
    protocol: ProtocolArg,
    /// Apply k-reciprocal re-ranking before evaluating.
    #[arg(long)]
    rerank: bool,
    #[command(flatten)]
    rerank_flags: RerankFlags,
    /// Include per-query diagnostics in the JSON report.
    #[arg(long)]
    per_query: bool,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
    /// Also dump the evaluated distance matrix to this directory.
    #[arg(long)]
    dump_dist: Option<PathBuf>,
}

#[derive(Args)]
struct RerankArgs {
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long, value_enum, default_value = "euclidean")]
    metric: MetricArg,
    #[command(flatten)]
    rerank_flags: RerankFlags,
    /// Output directory for the re-ranked matrix.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Random instances per kernel.
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
    h: f64,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_SEED)]
    seed: u64,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output embedding directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    n_ids: usize,
    #[arg(long, default_value_t = 4)]
    per_id_per_cam: usize,
    #[arg(long, default_value_t = 2)]
    n_cams: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    center_scale: f64,
    #[arg(long, default_value_t = 0.3)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    cam_offset_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Number of query rows.
    #[arg(long)]
    q: usize,
    /// Number of gallery rows.
    #[arg(long)]
    g: usize,
    #[arg(long, default_value_t = 512)]
    dim: usize,
    #[arg(long, value_enum, default_value = "euclidean")]
    metric: MetricArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Embedding directory whose labels are sampled.
    #[arg(long)]
    labels: PathBuf,
    /// Identities per batch.
    #[arg(long, default_value_t = 16)]
    p: usize,
    /// Instances per identity.
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Last epoch to print.
    #[arg(long, default_value_t = 120)]
    epochs: u32,
    /// Warm-up ramp reading; the prose ramp ends continuous at the
    /// base rate, the printed formula tops out a decade lower.
    #[arg(long, value_enum, default_value = "prose")]
    lr_ramp: RampArg,
    #[arg(long, default_value_t = 3.5e-4)]
    base_lr: f64,
    #[arg(long, default_value_t = 10)]
    warmup_epochs: u32,
    #[arg(long, value_delimiter = ',', default_values_t = vec![40, 70])]
    milestones: Vec<u32>,
    #[arg(long, default_value_t = 0.1)]
    decay: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads(cli.threads);
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn init_threads(flag: Option<usize>) {
    let threads = flag.or_else(|| {
        std::env::var("REID_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if n >= 1 {
            // ignore failure: the pool can only be set once per process
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Eval(args) => cmd_eval(args),
        Command::Rerank(args) => cmd_rerank(args),
        Command::GradCheck(args) => cmd_grad_check(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Schedule(args) => cmd_schedule(args),
    }
}

fn write_output(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| Error::IoFailure {
            path: path.clone(),
            source,
        }),
        None => {
            print!("{text}");
            std::io::stdout().flush().map_err(|source| Error::IoFailure {
                path: PathBuf::from("<stdout>"),
                source,
            })
        }
    }
}

fn compute_reranked(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    metric: Metric,
    params: &RerankParams,
) -> Result<DistanceMatrix> {
    let q_g = pairwise_distance(query, gallery, metric)?;
    let g_g = pairwise_distance(gallery, gallery, metric)?;
    let q_q = pairwise_distance(query, query, metric)?;
    k_reciprocal_rerank(&q_g, &g_g, &q_q, params)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let query = load_embedding_set(&args.query)?;
    let gallery = load_embedding_set(&args.gallery)?;
    let metric = Metric::from(args.metric);

    let dist = if args.rerank {
        compute_reranked(&query, &gallery, metric, &args.rerank_flags.params()?)?
    } else {
        pairwise_distance(&query, &gallery, metric)?
    };

    let report = evaluate(&dist, args.protocol.into(), args.per_query)?;
    eprint!("{}", report::human_summary(&report));

    let text = match args.format {
        FormatArg::Json => report::to_json_pretty(&report),
        FormatArg::Csv => report::csv_summary(&report),
    };
    write_output(args.out.as_ref(), &text)?;

    if let Some(dir) = &args.dump_dist {
        save_distance_matrix(&dist, dir)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_rerank(args: RerankArgs) -> Result<ExitCode> {
    let query = load_embedding_set(&args.query)?;
    let gallery = load_embedding_set(&args.gallery)?;
    let reranked = compute_reranked(
        &query,
        &gallery,
        args.metric.into(),
        &args.rerank_flags.params()?,
    )?;
    save_distance_matrix(&reranked, &args.out)?;
    eprintln!(
        "re-ranked {}x{} matrix written to {}",
        reranked.n_queries(),
        reranked.n_gallery(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<ExitCode> {
    if args.instances == 0 {
        return Err(Error::BadParams("--instances must be >= 1".into()));
    }
    let suite = gradcheck::run_suite(args.instances, args.h, args.tolerance, args.seed);
    for kernel in &suite.kernels {
        eprintln!(
            "{:<28} {} (max rel err {:.3e})",
            kernel.kernel,
            if kernel.pass { "pass" } else { "FAIL" },
            kernel.max_rel_err
        );
    }
    write_output(args.out.as_ref(), &report::to_json_pretty(&suite))?;
    if suite.all_pass {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let config = SynthConfig {
        n_ids: args.n_ids,
        per_id_per_cam: args.per_id_per_cam,
        n_cams: args.n_cams,
        dim: args.dim,
        center_scale: args.center_scale,
        noise_sigma: args.noise_sigma,
        cam_offset_sigma: args.cam_offset_sigma,
        seed: args.seed,
    };
    let set = generate(&config)?;
    save_embedding_set(&set, &args.out)?;
    eprintln!(
        "wrote {} rows x {} dims to {}",
        set.len(),
        set.dim(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct BenchReport {
    q: usize,
    g: usize,
    dim: usize,
    metric: &'static str,
    distance_ms: u128,
    eval_ms: u128,
    total_ms: u128,
    #[serde(serialize_with = "report::f64_17sig")]
    rank1: f64,
    #[serde(serialize_with = "report::f64_17sig")]
    map: f64,
    #[serde(serialize_with = "report::f64_17sig")]
    minp: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    peak_rss_bytes: Option<u64>,
}

/// Peak resident set size of this process, when the platform exposes it.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Build disjoint query/gallery sets of exactly the requested sizes:
/// camera 0 provides queries, higher cameras provide the gallery.
fn bench_sets(q: usize, g: usize, dim: usize, seed: u64) -> Result<(EmbeddingSet, EmbeddingSet)> {
    const PER_ID: usize = 4;
    let n_ids = q.div_ceil(PER_ID);
    let gallery_cams = g.div_ceil(n_ids * PER_ID);
    let config = SynthConfig {
        n_ids,
        per_id_per_cam: PER_ID,
        n_cams: 1 + gallery_cams,
        dim,
        center_scale: 1.0,
        noise_sigma: 0.35,
        cam_offset_sigma: 0.05,
        seed,
    };
    let set = generate(&config)?;
    let query_rows: Vec<usize> = (0..set.len())
        .filter(|&r| set.cam_ids()[r] == 0)
        .take(q)
        .collect();
    let gallery_rows: Vec<usize> = (0..set.len())
        .filter(|&r| set.cam_ids()[r] != 0)
        .take(g)
        .collect();
    Ok((
        set.subset(&query_rows, "bench-query")?,
        set.subset(&gallery_rows, "bench-gallery")?,
    ))
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode> {
    if args.q == 0 || args.g == 0 || args.dim == 0 {
        return Err(Error::BadParams(
            "--q, --g and --dim must all be >= 1".into(),
        ));
    }
    let metric = Metric::from(args.metric);
    let (query, gallery) = bench_sets(args.q, args.g, args.dim, args.seed)?;

    let t0 = Instant::now();
    let dist = pairwise_distance(&query, &gallery, metric)?;
    let distance_ms = t0.elapsed().as_millis();

    let t1 = Instant::now();
    let eval = evaluate(&dist, FilterProtocol::CrossCamera, false)?;
    let eval_ms = t1.elapsed().as_millis();

    let bench = BenchReport {
        q: args.q,
        g: args.g,
        dim: args.dim,
        metric: metric.token(),
        distance_ms,
        eval_ms,
        total_ms: distance_ms + eval_ms,
        rank1: eval.cmc_at(1),
        map: eval.map,
        minp: eval.minp,
        peak_rss_bytes: peak_rss_bytes(),
    };
    eprintln!(
        "distance {} ms, eval {} ms ({}x{}x{})",
        distance_ms, eval_ms, args.q, args.g, args.dim
    );
    write_output(args.out.as_ref(), &report::to_json_pretty(&bench))?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SampleReport {
    p_identities: usize,
    k_instances: usize,
    seed: u64,
    indices: Vec<usize>,
}

fn cmd_sample(args: SampleArgs) -> Result<ExitCode> {
    let set = load_embedding_set(&args.labels)?;
    let batch = sample_batch(set.person_ids(), args.p, args.k, args.seed)?;
    let text = report::to_json_pretty(&SampleReport {
        p_identities: batch.p_identities,
        k_instances: batch.k_instances,
        seed: batch.seed,
        indices: batch.indices,
    });
    write_output(None, &text)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ScheduleRow {
    epoch: u32,
    #[serde(serialize_with = "report::f64_17sig")]
    lr: f64,
}

#[derive(Serialize)]
struct ScheduleReport {
    ramp: &'static str,
    schedule: LrSchedule,
    rows: Vec<ScheduleRow>,
}

fn cmd_schedule(args: ScheduleArgs) -> Result<ExitCode> {
    if args.epochs == 0 {
        return Err(Error::BadParams("--epochs must be >= 1".into()));
    }
    let schedule = LrSchedule::new(args.base_lr, args.warmup_epochs, args.milestones, args.decay)?;
    let ramp = RampKind::from(args.lr_ramp);
    let rows = (1..=args.epochs)
        .map(|epoch| ScheduleRow {
            epoch,
            lr: lr_at(&schedule, epoch, ramp),
        })
        .collect();
    let text = report::to_json_pretty(&ScheduleReport {
        ramp: match ramp {
            RampKind::Prose => "prose",
            RampKind::Formula => "formula",
        },
        schedule,
        rows,
    });
    write_output(None, &text)?;
    Ok(ExitCode::SUCCESS)
}
