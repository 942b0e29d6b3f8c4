use std::fmt::Display;
use std::path::{Path, PathBuf};

use relqa_core::annotation::load_corpus;
use relqa_core::bench::{
    classify_candidates, finalize, generate_candidates, load_pool, save_pool, Benchmark, BenchmarkCandidate, GtLabel,
};
use relqa_core::config::RunConfig;
use relqa_core::dataset::{
    export_jsonl, generate_dataset, load_companions, render_for_model, GenerationConfig, ModelTemplateId, RetryEntry,
};
use relqa_core::eval::{
    collect_responses, format_reports, import_external, load_responses, parse_csv_reports, save_responses, score,
    CollectConfig, EvalReport, ReportStyle,
};
use relqa_core::gateway::{BackendKind, Gateway, GatewayConfig};
use relqa_core::jsonl::{write_atomic, write_jsonl};
use relqa_core::prompt::TemplateSet;
use relqa_core::qa::QaParser;
use relqa_core::review::{decision_log_path, read_decision_log};
use relqa_review::{ServiceConfig, ServiceError};
use serde_json::{json, Value};

use crate::{Command, ConfigArgs, Format, GatewayArgs};

#[derive(Debug)]
pub enum CliError {
    Config { stage: &'static str, message: String },
    Stage { stage: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config { .. } => 2,
            Self::Stage { .. } => 1,
        }
    }

    pub fn to_json(&self) -> Value {
        let (error, stage, message) = match self {
            Self::Config { stage, message } => ("config_error", stage, message),
            Self::Stage { stage, message } => ("stage_failure", stage, message),
        };
        json!({"error": error, "stage": stage, "message": message})
    }
}

fn config_err<E: Display>(stage: &'static str) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Config {
        stage,
        message: e.to_string(),
    }
}

fn stage_err<E: Display>(stage: &'static str) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Stage {
        stage,
        message: e.to_string(),
    }
}

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Ingest { cfg } => ingest(&cfg),
        Command::GenDataset { cfg, gw, render } => gen_dataset(&cfg, &gw, render.map(Into::into)),
        Command::GenBench { cfg, gw } => gen_bench(&cfg, &gw),
        Command::Classify { cfg, gw, pool } => classify(&cfg, &gw, pool),
        Command::ReviewServe {
            cfg,
            pool,
            images_root,
            listen,
            cors_origin,
        } => review_serve(&cfg, pool, images_root, &listen, cors_origin),
        Command::Finalize {
            cfg,
            pool,
            n_per_subset,
            n_positive,
        } => finalize_stage(&cfg, pool, n_per_subset, n_positive),
        Command::Collect {
            cfg,
            gw,
            benchmark,
            responses,
        } => collect(&cfg, &gw, benchmark, responses),
        Command::Eval {
            benchmark,
            responses,
            external,
            format,
            model,
            config,
            output,
            json,
        } => eval(EvalArgs {
            benchmark,
            responses,
            external,
            format,
            model,
            config,
            output,
            json,
        }),
        Command::Report {
            inputs,
            format,
            config,
            output,
        } => report(&inputs, format, config, output),
    }
}

fn load_config(stage: &'static str, args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&args.config).map_err(config_err(stage))?;
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_mock(g: &mut GatewayConfig, gw: &GatewayArgs) {
    if let Some(script) = &gw.mock_script {
        g.backend = BackendKind::Mock;
        g.mock_script = Some(script.clone());
    }
}

fn open_gateway(stage: &'static str, g: &GatewayConfig) -> Result<Gateway, CliError> {
    Gateway::from_config(g).map_err(config_err(stage))
}

fn generation_config(stage: &'static str, cfg: &RunConfig) -> Result<GenerationConfig, CliError> {
    let templates = match &cfg.template_dir {
        Some(dir) => TemplateSet::load_dir(dir).map_err(config_err(stage))?,
        None => TemplateSet::builtin(),
    };
    let parser = match &cfg.refusal_phrases {
        Some(p) => QaParser::new(p.clone()),
        None => QaParser::default(),
    };
    Ok(GenerationConfig {
        kinds: cfg.template_kinds(),
        overlap_threshold: cfg.overlap_threshold,
        run_seed: cfg.seed,
        templates,
        parser,
        model: cfg.gateway.params(),
    })
}

/// Writes `<runs_dir>/<stage>.json`. No timestamps, so identical runs give
/// identical records.
fn write_run_record(
    stage: &'static str,
    runs_dir: &Path,
    seed: Option<u64>,
    config_hash: Option<String>,
    counts: Value,
) -> Result<(), CliError> {
    let record = json!({
        "stage": stage,
        "seed": seed,
        "config_hash": config_hash,
        "counts": counts,
    });
    let mut text = serde_json::to_string_pretty(&record).expect("record serializes");
    text.push('\n');
    write_atomic(&runs_dir.join(format!("{stage}.json")), text.as_bytes()).map_err(stage_err(stage))
}

fn finish(stage: &'static str, cfg: &RunConfig, counts: Value) -> Result<(), CliError> {
    write_run_record(stage, &cfg.runs_dir(), Some(cfg.seed), Some(cfg.hash()), counts.clone())?;
    println!("{}", json!({"stage": stage, "counts": counts}));
    Ok(())
}

fn write_retry(stage: &'static str, cfg: &RunConfig, retry: &[RetryEntry]) -> Result<(), CliError> {
    if !retry.is_empty() {
        log::warn!("{stage}: {} request(s) failed; see {}", retry.len(), cfg.retry_path(stage).display());
    }
    write_jsonl(&cfg.retry_path(stage), retry)
        .map(|_| ())
        .map_err(stage_err(stage))
}

fn ingest(args: &ConfigArgs) -> Result<(), CliError> {
    const STAGE: &str = "ingest";
    let cfg = load_config(STAGE, args)?;
    let corpus = load_corpus(&cfg.corpus).map_err(stage_err(STAGE))?;
    let manifest = corpus
        .save(&cfg.out_dir.join("corpus"))
        .map_err(stage_err(STAGE))?;
    log::info!("wrote {}", manifest.display());
    let counts = json!({
        "images": corpus.images.len(),
        "relations": corpus.relations.len(),
        "objects": corpus.objects.values().map(Vec::len).sum::<usize>(),
        "regions": corpus.regions.values().map(Vec::len).sum::<usize>(),
        "captions": corpus.captions.values().map(Vec::len).sum::<usize>(),
    });
    finish(STAGE, &cfg, counts)
}

fn template_name(t: ModelTemplateId) -> String {
    serde_json::to_value(t)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .expect("template id serializes to a string")
}

fn gen_dataset(args: &ConfigArgs, gw: &GatewayArgs, render: Option<ModelTemplateId>) -> Result<(), CliError> {
    const STAGE: &str = "gen-dataset";
    let mut cfg = load_config(STAGE, args)?;
    apply_mock(&mut cfg.gateway, gw);
    let gen = generation_config(STAGE, &cfg)?;
    let gateway = open_gateway(STAGE, &cfg.gateway)?;
    let corpus = load_corpus(&cfg.corpus).map_err(stage_err(STAGE))?;
    let companions = match &cfg.companion {
        Some(path) => Some(load_companions(path).map_err(stage_err(STAGE))?),
        None => None,
    };
    let run = generate_dataset(&corpus, &gen, &gateway, companions.as_ref()).map_err(stage_err(STAGE))?;
    export_jsonl(&run.samples, &cfg.dataset_path()).map_err(stage_err(STAGE))?;
    write_retry(STAGE, &cfg, &run.retry)?;
    if let Some(t) = render {
        let lines: Vec<Value> = run
            .samples
            .iter()
            .map(|s| {
                let r = render_for_model(s, t);
                json!({"sample_id": s.sample_id, "text": r.text, "warnings": r.warnings})
            })
            .collect();
        let path = cfg.out_dir.join(format!("dataset.{}.jsonl", template_name(t)));
        write_jsonl(&path, &lines).map_err(stage_err(STAGE))?;
    }
    let counts = json!({
        "processed": run.processed,
        "exported": run.samples.len(),
        "skipped": run.skipped,
        "retry": run.retry.len(),
    });
    finish(STAGE, &cfg, counts)
}

fn gen_bench(args: &ConfigArgs, gw: &GatewayArgs) -> Result<(), CliError> {
    const STAGE: &str = "gen-bench";
    let mut cfg = load_config(STAGE, args)?;
    apply_mock(&mut cfg.gateway, gw);
    let gen = generation_config(STAGE, &cfg)?;
    let gateway = open_gateway(STAGE, &cfg.gateway)?;
    let corpus = load_corpus(&cfg.corpus).map_err(stage_err(STAGE))?;
    let run = generate_candidates(&corpus, &gen, &gateway, cfg.bench_samples_per_relation);
    let pool_path = cfg.pool_path();
    if decision_log_path(&pool_path).exists() {
        log::warn!(
            "{} belongs to the previous pool and may name candidates that no longer exist",
            decision_log_path(&pool_path).display()
        );
    }
    save_pool(&pool_path, &run.candidates).map_err(stage_err(STAGE))?;
    write_retry(STAGE, &cfg, &run.retry)?;
    let yes = run.candidates.iter().filter(|c| c.gt_label == GtLabel::Yes).count();
    let counts = json!({
        "candidates": run.candidates.len(),
        "yes": yes,
        "no": run.candidates.len() - yes,
        "dropped": run.dropped,
        "retry": run.retry.len(),
    });
    finish(STAGE, &cfg, counts)
}

fn subset_counts(pool: &[BenchmarkCandidate]) -> std::collections::BTreeMap<String, usize> {
    let mut out = std::collections::BTreeMap::new();
    for c in pool {
        *out.entry(c.proposed_subset.to_string()).or_default() += 1;
    }
    out
}

fn classify(args: &ConfigArgs, gw: &GatewayArgs, pool: Option<PathBuf>) -> Result<(), CliError> {
    const STAGE: &str = "classify";
    let mut cfg = load_config(STAGE, args)?;
    apply_mock(&mut cfg.gateway, gw);
    let gen = generation_config(STAGE, &cfg)?;
    let gateway = open_gateway(STAGE, &cfg.gateway)?;
    let pool_path = pool.unwrap_or_else(|| cfg.pool_path());
    let candidates = load_pool(&pool_path).map_err(stage_err(STAGE))?;
    let run = classify_candidates(candidates, &gen, &gateway);
    save_pool(&pool_path, &run.pool).map_err(stage_err(STAGE))?;
    write_retry(STAGE, &cfg, &run.retry)?;
    let counts = json!({
        "candidates": run.pool.len(),
        "subsets": subset_counts(&run.pool),
        "retry": run.retry.len(),
    });
    finish(STAGE, &cfg, counts)
}

fn review_serve(
    args: &ConfigArgs,
    pool: Option<PathBuf>,
    images_root: Option<PathBuf>,
    listen: &str,
    cors_origin: Option<String>,
) -> Result<(), CliError> {
    const STAGE: &str = "review-serve";
    let cfg = load_config(STAGE, args)?;
    let pool_path = pool.unwrap_or_else(|| cfg.pool_path());
    let candidates = load_pool(&pool_path).map_err(stage_err(STAGE))?;
    write_run_record(
        STAGE,
        &cfg.runs_dir(),
        Some(cfg.seed),
        Some(cfg.hash()),
        json!({"candidates": candidates.len(), "subsets": subset_counts(&candidates)}),
    )?;
    let service = ServiceConfig {
        pool_path,
        images_root: images_root.unwrap_or_else(|| cfg.images_root()),
        benchmark_path: cfg.benchmark_path(),
        bench_name: cfg.bench_name.clone(),
        cors_origin,
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(stage_err(STAGE))?;
    runtime
        .block_on(relqa_review::serve(service, listen))
        .map_err(|e| match e {
            ServiceError::Bind { .. } => config_err(STAGE)(e),
            other => stage_err(STAGE)(other),
        })
}

fn finalize_stage(
    args: &ConfigArgs,
    pool: Option<PathBuf>,
    n_per_subset: Option<usize>,
    n_positive: Option<usize>,
) -> Result<(), CliError> {
    const STAGE: &str = "finalize";
    let mut cfg = load_config(STAGE, args)?;
    if let Some(n) = n_per_subset {
        cfg.n_per_subset = n;
    }
    if n_positive.is_some() {
        cfg.n_positive = n_positive;
    }
    let pool_path = pool.unwrap_or_else(|| cfg.pool_path());
    let candidates = load_pool(&pool_path).map_err(stage_err(STAGE))?;
    let decisions = read_decision_log(&decision_log_path(&pool_path)).map_err(stage_err(STAGE))?;
    let bench = finalize(
        &cfg.bench_name,
        &candidates,
        &decisions,
        cfg.n_per_subset,
        cfg.n_positive(),
        cfg.seed,
    )
    .map_err(stage_err(STAGE))?;
    bench.save(&cfg.benchmark_path()).map_err(stage_err(STAGE))?;
    let counts = json!({
        "decisions": decisions.len(),
        "items": bench.items.len(),
        "subsets": bench.subset_counts(),
    });
    finish(STAGE, &cfg, counts)
}

fn collect(
    args: &ConfigArgs,
    gw: &GatewayArgs,
    benchmark: Option<PathBuf>,
    responses: Option<PathBuf>,
) -> Result<(), CliError> {
    const STAGE: &str = "collect";
    let mut cfg = load_config(STAGE, args)?;
    let mut gateway_cfg = cfg.collect.gateway.clone().unwrap_or_else(|| cfg.gateway.clone());
    apply_mock(&mut gateway_cfg, gw);
    cfg.collect.gateway = Some(gateway_cfg.clone());
    let gateway = open_gateway(STAGE, &gateway_cfg)?;
    let bench_path = benchmark.unwrap_or_else(|| cfg.benchmark_path());
    let bench = Benchmark::load(&bench_path).map_err(stage_err(STAGE))?;
    let collect_cfg = CollectConfig {
        model: gateway_cfg.params(),
        image_url_template: cfg.collect.image_url_template.clone(),
    };
    let run = collect_responses(&bench, &collect_cfg, &gateway);
    let out = responses.unwrap_or_else(|| cfg.responses_path());
    save_responses(&out, &run.records).map_err(stage_err(STAGE))?;
    write_retry(STAGE, &cfg, &run.retry)?;
    let counts = json!({
        "items": bench.items.len(),
        "responses": run.records.len(),
        "retry": run.retry.len(),
    });
    finish(STAGE, &cfg, counts)
}

struct EvalArgs {
    benchmark: PathBuf,
    responses: PathBuf,
    external: bool,
    format: Format,
    model: Option<String>,
    config: Option<PathBuf>,
    output: Option<PathBuf>,
    json: Option<PathBuf>,
}

/// Run record location for stages whose config is optional: the config's
/// runs directory, else `runs/` beside `fallback`.
fn runs_dir_for(cfg: Option<&RunConfig>, fallback: &Path) -> PathBuf {
    match cfg {
        Some(c) => c.runs_dir(),
        None => fallback.parent().unwrap_or(Path::new(".")).join("runs"),
    }
}

fn emit(stage: &'static str, text: &str, output: Option<&Path>) -> Result<(), CliError> {
    match output {
        Some(path) => write_atomic(path, text.as_bytes()).map_err(stage_err(stage)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    const STAGE: &str = "eval";
    let cfg = match &a.config {
        Some(path) => Some(RunConfig::load(path).map_err(config_err(STAGE))?),
        None => None,
    };
    let bench = if a.external {
        import_external(&a.benchmark).map_err(stage_err(STAGE))?
    } else {
        Benchmark::load(&a.benchmark).map_err(stage_err(STAGE))?
    };
    let responses = load_responses(&a.responses).map_err(stage_err(STAGE))?;
    let model = a
        .model
        .or_else(|| cfg.as_ref().map(|c| c.collect.model_label.clone()))
        .unwrap_or_else(|| "model".into());
    let report = score(&bench, &responses, &model).map_err(stage_err(STAGE))?;
    if let Some(path) = &a.json {
        let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes()).map_err(stage_err(STAGE))?;
    }
    emit(STAGE, &format_reports(std::slice::from_ref(&report), a.format.into()), a.output.as_deref())?;
    let counts = json!({
        "items": bench.items.len(),
        "responses": responses.len(),
        "confusion": report.counts,
    });
    write_run_record(
        STAGE,
        &runs_dir_for(cfg.as_ref(), &a.responses),
        cfg.as_ref().map(|c| c.seed),
        cfg.as_ref().map(RunConfig::hash),
        counts,
    )
}

fn read_reports(stage: &'static str, path: &Path) -> Result<Vec<EvalReport>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Stage {
        stage,
        message: format!("reading {}: {e}", path.display()),
    })?;
    if path.extension().is_some_and(|e| e == "csv") {
        parse_csv_reports(&text).map_err(stage_err(stage))
    } else {
        serde_json::from_str::<EvalReport>(&text)
            .map(|r| vec![r])
            .map_err(|e| CliError::Stage {
                stage,
                message: format!("{}: {e}", path.display()),
            })
    }
}

fn report(inputs: &[PathBuf], format: Format, config: Option<PathBuf>, output: Option<PathBuf>) -> Result<(), CliError> {
    const STAGE: &str = "report";
    let cfg = match &config {
        Some(path) => Some(RunConfig::load(path).map_err(config_err(STAGE))?),
        None => None,
    };
    let mut reports = Vec::new();
    for path in inputs {
        reports.extend(read_reports(STAGE, path)?);
    }
    let style: ReportStyle = format.into();
    emit(STAGE, &format_reports(&reports, style), output.as_deref())?;
    write_run_record(
        STAGE,
        &runs_dir_for(cfg.as_ref(), &inputs[0]),
        cfg.as_ref().map(|c| c.seed),
        cfg.as_ref().map(RunConfig::hash),
        json!({"inputs": inputs.len(), "rows": reports.len()}),
    )
}
