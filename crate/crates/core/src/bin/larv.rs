use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use larv::checkpoint::GroupingPolicy;
use larv::gates::depth_schedule;
use larv::pipeline::{run_larv_variants, write_outputs};
use larv::{
    GateMode, LarvError, MergeConfig, MergeRule, OutputDtype, ReportFormat, RescaleTarget,
    Result, ScheduleKind, SvdMode, TierValues,
};

#[derive(Parser)]
#[command(name = "larv", version, about = "Layer-wise rescaling of task-vector model merges")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge fine-tuned checkpoints and write the rescaled model plus a per-layer report.
    Merge(RunArgs),
    /// Compute the per-layer report only.
    Diagnose(RunArgs),
    /// Print a depth-only schedule, one scale per layer.
    Schedule(ScheduleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Gate {
    Continuous,
    Tiered,
    Both,
    Schedule,
}

#[derive(Clone, Copy, ValueEnum)]
enum Merger {
    Average,
    TaskArithmetic,
    Ties,
    IsoC,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grouping {
    Pattern,
    Flat,
}

#[derive(Clone, Copy, ValueEnum)]
enum Svd {
    Auto,
    Exact,
    Randomized,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rescale {
    Merged,
    PerTask,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dtype {
    F32,
    Input,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; flags given here override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    /// Fine-tuned checkpoints (repeat the flag or list several).
    #[arg(long, num_args = 1..)]
    finetuned: Vec<PathBuf>,
    /// Merged checkpoint path (merge only).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Report path; `.json` selects JSON unless --report-format says otherwise.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum)]
    report_format: Option<Format>,
    #[arg(long, value_enum)]
    output_dtype: Option<Dtype>,

    #[arg(long, value_enum)]
    merger: Option<Merger>,
    /// Task arithmetic / TIES coefficient.
    #[arg(long)]
    coefficient: Option<f64>,
    #[arg(long)]
    trim_fraction: Option<f64>,
    #[arg(long)]
    iso_scale: Option<f64>,

    #[arg(long, value_enum)]
    gate: Option<Gate>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Shrink, neutral and amplify scales.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    tiers: Option<Vec<f64>>,
    /// Depth-only schedule used with `--gate schedule`.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long, value_delimiter = ',')]
    schedule_scales: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    rescale: Option<Rescale>,

    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    zeta: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,

    #[arg(long, value_enum)]
    grouping: Option<Grouping>,
    /// Block-index regex with one capture group.
    #[arg(long)]
    block_pattern: Option<String>,
    /// Extra skip-list regexes, added to the configured ones.
    #[arg(long)]
    skip: Vec<String>,

    #[arg(long, value_enum)]
    svd_mode: Option<Svd>,
    #[arg(long)]
    svd_rank: Option<usize>,
    #[arg(long)]
    oversample: Option<usize>,
    #[arg(long)]
    exact_threshold: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,

    /// Include per-matrix scores in JSON reports.
    #[arg(long)]
    verbose: bool,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ScheduleArgs {
    /// uniform, linear, tier2, tier3, tier6, tier12 or freeze-custom.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    layers: usize,
    #[arg(long, value_delimiter = ',', num_args = 3)]
    tiers: Option<Vec<f64>>,
    /// Stage scales for freeze-custom, or the value for uniform.
    #[arg(long, value_delimiter = ',')]
    scales: Vec<f64>,
}

fn tier_values(v: &[f64]) -> TierValues {
    TierValues {
        shrink: v[0],
        neutral: v[1],
        amplify: v[2],
    }
}

impl RunArgs {
    fn into_config(self) -> Result<(MergeConfig, Option<usize>)> {
        let mut c = match &self.config {
            Some(path) => MergeConfig::from_json_file(path)?,
            None => MergeConfig::default(),
        };
        if let Some(p) = self.base {
            c.base = p;
        }
        if !self.finetuned.is_empty() {
            c.finetuned = self.finetuned;
        }
        if self.output.is_some() {
            c.output = self.output;
        }
        if self.report.is_some() {
            c.report = self.report;
        }
        if let Some(f) = self.report_format {
            c.report_format = Some(match f {
                Format::Csv => ReportFormat::Csv,
                Format::Json => ReportFormat::Json,
            });
        }
        if let Some(d) = self.output_dtype {
            c.output_dtype = match d {
                Dtype::F32 => OutputDtype::F32,
                Dtype::Input => OutputDtype::Input,
            };
        }

        if let Some(m) = self.merger {
            c.merger.rule = match m {
                Merger::Average => MergeRule::Average,
                Merger::TaskArithmetic => MergeRule::TaskArithmetic,
                Merger::Ties => MergeRule::Ties,
                Merger::IsoC => MergeRule::IsoC,
            };
        }
        set(&mut c.merger.coefficient, self.coefficient);
        set(&mut c.merger.trim_fraction, self.trim_fraction);
        set(&mut c.merger.iso_scale, self.iso_scale);

        if let Some(g) = self.gate {
            c.gate.mode = match g {
                Gate::Continuous => GateMode::Continuous,
                Gate::Tiered => GateMode::Tiered,
                Gate::Both => GateMode::Both,
                Gate::Schedule => GateMode::Schedule,
            };
        }
        set(&mut c.gate.gamma, self.gamma);
        set(&mut c.gate.alpha, self.alpha);
        set(&mut c.gate.beta, self.beta);
        if let Some(t) = &self.tiers {
            c.gate.tiers = tier_values(t);
        }
        match (&self.schedule, &self.schedule_scales) {
            (Some(kind), scales) => {
                c.gate.schedule = ScheduleKind::parse(kind, scales.as_deref().unwrap_or(&[]))?;
            }
            (None, Some(scales)) => {
                c.gate.schedule = ScheduleKind::parse(c.gate.schedule.name(), scales)?;
            }
            (None, None) => {}
        }
        if let Some(r) = self.rescale {
            c.rescale = match r {
                Rescale::Merged => RescaleTarget::Merged,
                Rescale::PerTask => RescaleTarget::PerTask,
            };
        }

        set(&mut c.score.eta, self.eta);
        set(&mut c.score.rho, self.rho);
        set(&mut c.score.zeta, self.zeta);
        set(&mut c.score.eps, self.eps);

        if let Some(g) = self.grouping {
            c.grouping.policy = match g {
                Grouping::Pattern => GroupingPolicy::Pattern,
                Grouping::Flat => GroupingPolicy::Flat,
            };
        }
        if let Some(p) = self.block_pattern {
            c.grouping.block_pattern = p;
        }
        c.grouping.skip.extend(self.skip);

        if let Some(m) = self.svd_mode {
            c.svd.mode = match m {
                Svd::Auto => SvdMode::Auto,
                Svd::Exact => SvdMode::Exact,
                Svd::Randomized => SvdMode::Randomized,
            };
        }
        set(&mut c.svd.rank, self.svd_rank);
        set(&mut c.svd.oversample, self.oversample);
        set(&mut c.svd.exact_threshold, self.exact_threshold);
        set(&mut c.seed, self.seed);
        c.verbose |= self.verbose;
        Ok((c, self.threads))
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn default_report_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}.report.csv"))
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| LarvError::InvalidConfig(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn config_error(e: LarvError) -> LarvError {
    match e {
        e @ LarvError::Stage { .. } => e,
        e => LarvError::Stage {
            stage: "config",
            source: Box::new(e),
        },
    }
}

fn merge(args: RunArgs) -> Result<()> {
    let (mut config, threads) = args.into_config().map_err(config_error)?;
    let Some(output) = config.output.clone() else {
        return Err(config_error(LarvError::InvalidConfig(
            "merge needs an output path (--output)".into(),
        )));
    };
    if config.report.is_none() {
        config.report = Some(default_report_path(&output));
    }
    configure_threads(threads).map_err(config_error)?;
    let outputs = run_larv_variants(&config, true)?;
    for path in write_outputs(&outputs, &config)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn diagnose(args: RunArgs) -> Result<()> {
    let (mut config, threads) = args.into_config().map_err(config_error)?;
    config.output = None;
    configure_threads(threads).map_err(config_error)?;
    let outputs = run_larv_variants(&config, false)?;
    if config.report.is_some() {
        for path in write_outputs(&outputs, &config)? {
            println!("wrote {}", path.display());
        }
    } else {
        for out in &outputs {
            let text = match config.report_format {
                Some(ReportFormat::Json) => out.report.to_json()?,
                _ => out.report.to_csv()?,
            };
            print!("{text}");
        }
    }
    Ok(())
}

fn schedule(args: ScheduleArgs) -> Result<()> {
    let kind = ScheduleKind::parse(&args.kind, &args.scales).map_err(config_error)?;
    let tiers = args.tiers.as_deref().map(tier_values).unwrap_or_default();
    let scales = depth_schedule(&kind, args.layers, &tiers).map_err(|e| LarvError::Stage {
        stage: "schedule",
        source: Box::new(e),
    })?;
    println!("layer,s");
    for (l, s) in scales.iter().enumerate() {
        println!("{},{s}", l + 1);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Merge(a) => merge(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Schedule(a) => schedule(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
