use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use memtrace_core::corpusgen::{
    build_dense, build_sparse, build_swapped, goldfish_mask_parallel, read_manifest, write_manifest, BucketDef,
    MixSpec, Scenario,
};
use memtrace_core::fsutil::{read_jsonl, write_jsonl};
use memtrace_core::metrics::{score_all, GenerationRecord, ScoreRecord};
use memtrace_core::oracles::{oracle_generate_file, MemorizerIndex, OracleConfig, OracleKind, DEFAULT_PERIOD};
use memtrace_core::packer::{pack, PackPolicy};
use memtrace_core::pipeline::{has_errors, run_pipeline, RunConfig, Severity, DEFAULT_SWAP_LEN};
use memtrace_core::probekit::{
    emit_probes, probe_grid, read_probes, ProbeGrid, DEFAULT_OFFSETS, DEFAULT_PREFIX_LENS, DEFAULT_SUFFIX_LEN,
};
use memtrace_core::report::{parse_group_keys, write_report, GroupKey, Metric, ReportOptions, Stat};
use memtrace_core::tokendata::{read_documents, read_segments, write_segments, Source, StoreLayout, BYTE_VOCAB_SIZE};
use memtrace_core::Error;

#[derive(Parser)]
#[command(name = "memtrace", version, about = "Build controlled-memorization corpora, probe them, and score recall")]
struct Cli {
    /// Cap on worker threads. Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pack documents into fixed-length BOD-prefixed segments.
    Pack(PackArgs),
    /// Build a dense, sparse or swapped corpus manifest.
    Build(BuildArgs),
    /// Extract prefix/suffix probes from a manifest's bucket segments.
    Probes(ProbesArgs),
    /// Answer probes with a memorizer oracle.
    Oracle(OracleArgs),
    /// Score generations against probes.
    Score(ScoreArgs),
    /// Aggregate scores into tables, grids and plot data.
    Report(ReportArgs),
    /// Run the whole pipeline from a config file.
    Run(RunArgs),
    /// Check a config file and list every problem.
    Validate(ValidateArgs),
    /// Compute goldfish loss masks for every segment in a store.
    Goldfish(GoldfishArgs),
}

#[derive(Args)]
struct PackArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8192)]
    context_len: usize,
    #[arg(long, default_value_t = 0)]
    bod_id: u32,
    /// Defaults to the byte vocabulary, widened to fit the largest token.
    #[arg(long)]
    vocab_size: Option<u32>,
    #[arg(long)]
    span_documents: bool,
    #[arg(long)]
    max_segments_per_doc: Option<usize>,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(value_enum)]
    scenario: ScenarioArg,
    #[arg(long)]
    segments: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// `frequency:count`, repeatable.
    #[arg(long = "bucket")]
    buckets: Vec<BucketDef>,
    #[arg(long)]
    target_fraction: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_SWAP_LEN)]
    swap_len: usize,
    #[arg(long, default_value_t = 1)]
    epochs: u32,
    #[arg(long)]
    min_spacing: Option<u64>,
    #[arg(long)]
    batch_size_tokens: Option<u64>,
    #[arg(long, default_value = "gutenberg")]
    target_source: Source,
    #[arg(long, default_value = "fineweb")]
    filler_source: Source,
    #[arg(long, default_value = "gutenberg")]
    donor_source: Source,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Dense,
    Sparse,
    Swapped,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Dense => Scenario::Dense,
            ScenarioArg::Sparse => Scenario::Sparse,
            ScenarioArg::Swapped => Scenario::Swapped,
        }
    }
}

#[derive(Args)]
struct ProbesArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    segments: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_OFFSETS)]
    offsets: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_PREFIX_LENS)]
    prefix_lens: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [DEFAULT_SUFFIX_LEN])]
    suffix_lens: Vec<usize>,
    #[arg(long)]
    per_bucket_limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    kind: OracleKind,
    /// Anchored oracle window.
    #[arg(long, default_value_t = 0)]
    anchor: usize,
    /// Threshold oracle minimum exposure.
    #[arg(long, default_value_t = 1)]
    min_freq: u64,
    #[arg(long, default_value_t = DEFAULT_PERIOD)]
    period: usize,
    #[arg(long)]
    ref_logprobs: bool,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    segments: PathBuf,
    #[arg(long)]
    probes: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    probes: PathBuf,
    #[arg(long)]
    generations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Report generations for unknown probes instead of failing.
    #[arg(long)]
    lenient: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    probes: PathBuf,
    /// Comma-separated group keys: freq, offset, prefix_len, suffix_len.
    #[arg(long, default_value = "freq,offset,prefix_len")]
    group: String,
    #[arg(long, default_value = "rouge_l")]
    metric: Metric,
    #[arg(long, default_value = "mean")]
    stat: Stat,
    /// Matrix axes as `rows:columns`, e.g. `freq:prefix_len`.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's work directory.
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct GoldfishArgs {
    #[arg(long)]
    segments: PathBuf,
    #[arg(long, default_value_t = 50)]
    k: u64,
    #[arg(long, default_value_t = 50)]
    h: usize,
    #[arg(long, default_value_t = 0)]
    key: u64,
    #[arg(long)]
    out: PathBuf,
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn cmd_pack(a: PackArgs) -> anyhow::Result<()> {
    let ing = read_documents(&a.input)?;
    let policy = PackPolicy {
        context_len: a.context_len,
        bod_id: a.bod_id,
        span_documents: a.span_documents,
        max_segments_per_doc: a.max_segments_per_doc,
    };
    let (segments, stats) = pack(&ing.documents, &policy)?;
    let max = ing.documents.iter().flat_map(|d| d.tokens.iter()).copied().max().unwrap_or(0);
    let layout = StoreLayout {
        vocab_size: a.vocab_size.unwrap_or_else(|| BYTE_VOCAB_SIZE.max(max.saturating_add(1))),
        context_len: a.context_len,
        bod_id: a.bod_id,
    };
    write_segments(&a.out, layout, &segments)?;
    print_json(&json!({
        "segments": stats.segments,
        "consumed": stats.consumed,
        "dropped": stats.dropped,
        "per_source": stats.per_source,
        "byte_fallback": ing.used_byte_fallback,
    }));
    Ok(())
}

fn cmd_build(a: BuildArgs) -> anyhow::Result<()> {
    let store = read_segments(&a.segments)?;
    let layout = store.layout().into();
    let scenario: Scenario = a.scenario.into();
    let manifest = if scenario == Scenario::Dense {
        let ids: Vec<u64> = store.ids().collect();
        let mut m = build_dense(layout, &ids, a.epochs, a.seed)?;
        m.batch_size_tokens = a.batch_size_tokens;
        m
    } else {
        let Some(target_fraction) = a.target_fraction else {
            return Err(Error::Config("--target-fraction is required for sparse and swapped builds".into()).into());
        };
        if a.buckets.is_empty() {
            return Err(Error::Config("at least one --bucket is required".into()).into());
        }
        let spec = MixSpec {
            buckets: a.buckets,
            target_fraction,
            seed: a.seed,
            min_spacing: a.min_spacing,
            batch_size_tokens: a.batch_size_tokens,
        };
        let target = store.ids_from(&[a.target_source]);
        let filler = store.ids_from(&[a.filler_source]);
        if scenario == Scenario::Sparse {
            build_sparse(layout, &spec, &target, &filler)?
        } else {
            let donors = store.ids_from(&[a.donor_source]);
            build_swapped(layout, &spec, &target, &donors, &filler, a.swap_len)?
        }
    };
    manifest.verify_accounting()?;
    write_manifest(&a.out, &manifest)?;
    print_json(&json!({
        "scenario": manifest.scenario,
        "schedule_len": manifest.schedule.len(),
        "buckets": manifest.buckets.len(),
        "filler": manifest.filler_segment_ids.len(),
        "fraction": manifest.token_totals.fraction,
    }));
    Ok(())
}

fn cmd_probes(a: ProbesArgs) -> anyhow::Result<()> {
    let manifest = read_manifest(&a.manifest)?;
    let store = read_segments(&a.segments)?;
    let grid = ProbeGrid {
        offsets: a.offsets,
        prefix_lens: a.prefix_lens,
        suffix_lens: a.suffix_lens,
        per_bucket_limit: a.per_bucket_limit,
        seed: a.seed,
    };
    let outcome = probe_grid(&manifest, &grid)?;
    emit_probes(&manifest, &store, &outcome.specs, &a.out)?;
    print_json(&json!({
        "probes": outcome.specs.len(),
        "skipped": outcome.skipped,
        "segments": outcome.segments,
    }));
    Ok(())
}

fn cmd_oracle(a: OracleArgs) -> anyhow::Result<()> {
    let manifest = read_manifest(&a.manifest)?;
    let store = read_segments(&a.segments)?;
    let config = OracleConfig {
        kind: a.kind,
        anchor_window: a.anchor,
        min_freq: a.min_freq,
        degeneration_period: a.period,
        ref_logprobs: a.ref_logprobs,
    };
    config.validate()?;
    let index = MemorizerIndex::build(&manifest, &store)?;
    let gens = oracle_generate_file(&index, &config, &a.probes, &a.out)?;
    print_json(&json!({"model_tag": config.model_tag(), "generations": gens.len()}));
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> anyhow::Result<()> {
    let probes = read_probes(&a.probes)?;
    let gens: Vec<GenerationRecord> = read_jsonl(&a.generations)?;
    let outcome = score_all(&probes, &gens, !a.lenient)?;
    write_jsonl(&a.out, &outcome.scores)?;
    for id in &outcome.unmatched {
        eprintln!("warning: generation for unknown probe {id}");
    }
    print_json(&json!({"scores": outcome.scores.len(), "unmatched": outcome.unmatched.len()}));
    Ok(())
}

fn parse_grid(s: &str) -> anyhow::Result<(GroupKey, GroupKey)> {
    let Some((rows, cols)) = s.split_once(':') else {
        return Err(Error::Config(format!("--grid `{s}` is not of the form rows:columns")).into());
    };
    Ok((cols.parse()?, rows.parse()?))
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<()> {
    let scores: Vec<ScoreRecord> = read_jsonl(&a.scores)?;
    let probes = read_probes(&a.probes)?;
    let opts = ReportOptions {
        group_keys: parse_group_keys(&a.group)?,
        metric: a.metric,
        stat: a.stat,
        grid: a.grid.as_deref().map(parse_grid).transpose()?,
    };
    let rows = write_report(&a.out, &scores, &probes, &opts)?;
    print_json(&json!({"groups": rows.len(), "out": a.out}));
    Ok(())
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    Ok(RunConfig::load(path)?)
}

fn cmd_run(a: RunArgs, threads: Option<usize>) -> anyhow::Result<()> {
    let mut config = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        config.seed = Some(seed);
    }
    if let Some(dir) = a.work_dir {
        config.work_dir = dir;
    }
    match (threads, config.threads) {
        (Some(_), _) => config.threads = threads,
        (None, Some(n)) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("cannot configure {n} threads: {e}")))?;
        }
        (None, None) => {}
    }
    for d in config.validate().iter().filter(|d| d.severity == Severity::Note) {
        eprintln!("{d}");
    }
    let outcome = run_pipeline(&config)?;
    for (stage, status) in &outcome.stages {
        eprintln!("{stage}: {}", serde_json::to_value(status)?.as_str().unwrap_or_default());
    }
    for id in &outcome.unmatched_generations {
        eprintln!("warning: generation for unknown probe {id}");
    }
    print_json(&json!({
        "ledger": outcome.paths.ledger,
        "scores": outcome.paths.scores,
        "report": outcome.paths.report,
    }));
    Ok(())
}

fn cmd_validate(a: ValidateArgs) -> anyhow::Result<()> {
    let config = load_config(&a.config)?;
    let diags = config.validate();
    for d in &diags {
        println!("{d}");
    }
    if has_errors(&diags) {
        bail!(Error::Config(format!(
            "{} problem(s) found",
            diags.iter().filter(|d| d.severity == Severity::Error).count()
        )));
    }
    println!("ok");
    Ok(())
}

fn cmd_goldfish(a: GoldfishArgs) -> anyhow::Result<()> {
    let store = read_segments(&a.segments)?;
    let mut lines = Vec::with_capacity(store.segments.len());
    let (mut masked, mut total) = (0usize, 0usize);
    for seg in &store.segments {
        let m = goldfish_mask_parallel(seg.segment_id, &seg.tokens, a.k, a.h, a.key)?;
        masked += m.masked_count();
        total += m.mask.len();
        lines.push(json!({
            "segment_id": m.segment_id,
            "k": m.k,
            "h": m.h,
            "masked_positions": m.masked_positions(),
        }));
    }
    write_jsonl(&a.out, &lines)?;
    let fraction = if total == 0 { 0.0 } else { masked as f64 / total as f64 };
    print_json(&json!({"segments": lines.len(), "masked": masked, "tokens": total, "fraction": fraction}));
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map(|e| e.exit_code() as u8)
        .unwrap_or(2)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Pack(a) => cmd_pack(a),
        Command::Build(a) => cmd_build(a),
        Command::Probes(a) => cmd_probes(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Score(a) => cmd_score(a),
        Command::Report(a) => cmd_report(a),
        Command::Run(a) => cmd_run(a, cli.threads),
        Command::Validate(a) => cmd_validate(a),
        Command::Goldfish(a) => cmd_goldfish(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
