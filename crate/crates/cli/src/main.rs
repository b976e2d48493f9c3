use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use sciqa_cli::config::RunConfig;
use sciqa_cli::evalcmd;
use sciqa_cli::pipeline::{
    build_gateway, collect_paper_files, load_prompts, plan_dry_run, render_dry_run, Pipeline,
    StopAfter,
};
use sciqa_cli::state::{JobState, Stage};
use sciqa_core::reground::NoiseSetting;

#[derive(Parser)]
#[command(
    name = "sciqa",
    about = "Claim-centric QA synthesis, document-scale regrounding, and judge-based evaluation for scientific papers",
    version
)]
struct Cli {
    /// TOML config file; CLI flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    /// Use the deterministic offline mock backend.
    #[arg(long, global = true)]
    mock: bool,
    #[arg(long, global = true)]
    base_url: Option<String>,
    #[arg(long, global = true)]
    generator_model: Option<String>,
    #[arg(long, global = true)]
    judge_model: Option<String>,
    #[arg(long, global = true)]
    gate_model: Option<String>,
    /// Hard ceiling on dispatched requests.
    #[arg(long, global = true)]
    max_requests: Option<u64>,
    /// Hard ceiling on accumulated output tokens.
    #[arg(long, global = true)]
    max_output_tokens: Option<u64>,
    #[arg(long, global = true)]
    max_images: Option<usize>,
    #[arg(long, global = true)]
    max_tokens: Option<usize>,
    #[arg(long, global = true)]
    chars_per_token: Option<usize>,
    #[arg(long, global = true)]
    image_token_cost: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    samples_per_claim: Option<u32>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    #[arg(long, global = true)]
    retries: Option<u32>,
    /// Directory of prompt template overrides (<name>.txt).
    #[arg(long, global = true)]
    templates: Option<PathBuf>,
    #[arg(long, global = true)]
    image_root: Option<String>,
    #[arg(long, global = true)]
    runs_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and normalize input papers into a run.
    Ingest(StageArgs),
    /// Classify papers as experiment-driven or not.
    Gate(StageArgs),
    /// Claims, grounding, and QA generation.
    Synthesize(StageArgs),
    /// Re-embed QA items into full-document training instances.
    Reground(StageArgs),
    /// Dedup, split, and write SFT-ready JSON-lines plus manifest.
    Export(StageArgs),
    /// All stages end to end.
    Run(StageArgs),
    /// Print corpus statistics for a run.
    Stats {
        #[arg(long)]
        run_id: String,
        /// Emit JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Run the model under test over benchmark items in a noise setting.
    Evaluate {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        papers: String,
        #[arg(long, default_value = "standard")]
        setting: String,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score recorded responses with the LLM judge.
    Judge {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate scores into a report (JSON plus table).
    Report {
        /// Score files; repeatable, one per setting.
        #[arg(long, required = true)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        text: Option<PathBuf>,
        /// Tag judged-incorrect responses with failure categories.
        #[arg(long)]
        tag_failures: bool,
        #[arg(long)]
        items: Option<PathBuf>,
        #[arg(long)]
        responses: Option<PathBuf>,
    },
}

#[derive(Args)]
struct StageArgs {
    /// Paper files: a directory of *.json, a file, or a comma list.
    #[arg(long)]
    papers: String,
    #[arg(long)]
    run_id: String,
    /// Print planned calls and cost estimate without contacting any model.
    #[arg(long)]
    dry_run: bool,
    /// Stop after completing <paper_id>:<stage>; for debugging and
    /// crash-recovery tests.
    #[arg(long, hide = true)]
    stop_after: Option<String>,
}

fn effective_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let o = &cli.overrides;
    if o.mock {
        config.mock = true;
    }
    if let Some(v) = &o.base_url {
        config.endpoints.base_url = v.clone();
    }
    if let Some(v) = &o.generator_model {
        config.endpoints.generator_model = v.clone();
    }
    if let Some(v) = &o.judge_model {
        config.endpoints.judge_model = v.clone();
    }
    if let Some(v) = &o.gate_model {
        config.endpoints.gate_model = v.clone();
    }
    if o.max_requests.is_some() {
        config.budgets.max_requests = o.max_requests;
    }
    if o.max_output_tokens.is_some() {
        config.budgets.max_output_tokens = o.max_output_tokens;
    }
    if let Some(v) = o.max_images {
        config.packing.max_images = v;
    }
    if let Some(v) = o.max_tokens {
        config.packing.max_tokens = v;
    }
    if let Some(v) = o.chars_per_token {
        config.packing.chars_per_token = v;
    }
    if let Some(v) = o.image_token_cost {
        config.packing.image_token_cost = v;
    }
    if let Some(v) = o.seed {
        config.seed = v;
    }
    if let Some(v) = o.samples_per_claim {
        config.samples_per_claim = v;
    }
    if let Some(v) = o.workers {
        config.workers = v;
    }
    if let Some(v) = o.concurrency {
        config.concurrency = v;
    }
    if let Some(v) = o.retries {
        config.retries = v;
    }
    if o.templates.is_some() {
        config.templates_dir = o.templates.clone();
    }
    if let Some(v) = &o.image_root {
        config.image_root = v.clone();
    }
    if let Some(v) = &o.runs_dir {
        config.runs_dir = v.clone();
    }
    if let Some(v) = &o.out_dir {
        config.out_dir = v.clone();
    }
    if o.cache_dir.is_some() {
        config.cache_dir = o.cache_dir.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run_stage(config: RunConfig, args: &StageArgs, target: Stage) -> anyhow::Result<i32> {
    let files = collect_paper_files(&args.papers)?;
    if args.dry_run {
        let plan = plan_dry_run(&files, config.samples_per_claim)?;
        print!("{}", render_dry_run(&plan));
        return Ok(0);
    }
    let stop_after: Option<StopAfter> = match &args.stop_after {
        Some(s) => Some(s.parse().map_err(|e: String| anyhow::anyhow!(e))?),
        None => None,
    };
    let handle = build_gateway(&config, None);
    let prompts = load_prompts(&config)?;
    let pipeline = Pipeline::new(config, handle.gateway.clone(), prompts, &args.run_id);
    let state = pipeline.run(&files, &args.run_id, target, stop_after.as_ref())?;
    print_run_summary(&state, target);
    let incomplete = state
        .per_paper
        .values()
        .filter(|p| p.error.is_none() && !p.gated_out && !p.completed(target))
        .count();
    let stopped_early = stop_after.is_some();
    if state.error_count() == 0 && (incomplete == 0 || stopped_early) {
        Ok(0)
    } else {
        Ok(1)
    }
}

fn print_run_summary(state: &JobState, target: Stage) {
    let mut done = 0usize;
    let mut gated = 0usize;
    let mut errored = 0usize;
    for paper in state.per_paper.values() {
        if paper.error.is_some() {
            errored += 1;
        } else if paper.gated_out {
            gated += 1;
        } else if paper.completed(target) {
            done += 1;
        }
    }
    println!(
        "run {}: {} papers at {}, {} gated out, {} errored",
        state.run_id,
        done,
        target.as_str(),
        gated,
        errored
    );
    for (paper_id, paper) in &state.per_paper {
        if let Some(error) = &paper.error {
            eprintln!("  {paper_id}: {error}");
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<i32> {
    let config = effective_config(&cli)?;
    match &cli.command {
        Command::Ingest(args) => run_stage(config, args, Stage::Ingested),
        Command::Gate(args) => run_stage(config, args, Stage::Gated),
        Command::Synthesize(args) => run_stage(config, args, Stage::Qa),
        Command::Reground(args) => run_stage(config, args, Stage::Regrounded),
        Command::Export(args) | Command::Run(args) => run_stage(config, args, Stage::Exported),
        Command::Stats { run_id, json } => {
            let handle = build_gateway(&config, None);
            let prompts = load_prompts(&config)?;
            let pipeline = Pipeline::new(config, handle.gateway, prompts, run_id);
            let state = JobState::load(&pipeline.run_dir.join("state.json"))?;
            let instances = pipeline.load_all_instances(&state)?;
            let stats = sciqa_core::export::compute_stats(&instances);
            if *json {
                println!("{}", serde_json::to_string_pretty(&stats)?);
            } else {
                print!("{}", sciqa_core::export::render_stats_table(&stats));
            }
            Ok(0)
        }
        Command::Evaluate {
            items,
            papers,
            setting,
            model,
            out,
        } => {
            let setting: NoiseSetting = setting
                .parse()
                .map_err(|e: String| anyhow::anyhow!(e))?;
            let handle = build_gateway(&config, None);
            let model_id = model
                .clone()
                .unwrap_or_else(|| config.endpoints.generator_model.clone());
            let failures = evalcmd::cmd_evaluate(
                &config,
                &handle.gateway,
                items,
                papers,
                setting,
                config.seed,
                &model_id,
                out,
            )?;
            println!(
                "evaluated {} -> {} ({failures} per-item failures)",
                items.display(),
                out.display()
            );
            Ok(0)
        }
        Command::Judge {
            items,
            responses,
            out,
        } => {
            let handle = build_gateway(&config, None);
            let prompts = load_prompts(&config)?;
            let failures =
                evalcmd::cmd_judge(&config, &handle.gateway, &prompts, items, responses, out)?;
            println!(
                "judged {} -> {} ({failures} unjudged)",
                responses.display(),
                out.display()
            );
            Ok(if failures == 0 { 0 } else { 1 })
        }
        Command::Report {
            scores,
            out,
            text,
            tag_failures,
            items,
            responses,
        } => {
            let handle = build_gateway(&config, None);
            let prompts = load_prompts(&config)?;
            let table = evalcmd::cmd_report(
                &config,
                &handle.gateway,
                &prompts,
                scores,
                out,
                text.as_deref(),
                *tag_failures,
                items.as_deref(),
                responses.as_deref(),
            )?;
            print!("{table}");
            Ok(0)
        }
    }
}
