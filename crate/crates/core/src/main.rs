use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use infoprune::costs::{count_costs, evaluate_plan_costs, PlanCostReport, CONVENTION};
use infoprune::manifest::{LayerOp, NodeShape};
use infoprune::diagnostics::{capture_feature_maps, correlate, feature_rank, median_kernel_width, renyi_matrix_entropy};
use infoprune::planner::PlanConfig;
use infoprune::refnet::{masked_equivalence, random_inputs};
use infoprune::scoring::{information_capacity, DEFAULT_SIGMA};
use infoprune::{
    apply_plan, build_plan, score_model, zoo, DistanceMetric, Error, MNearest, Model, PlanOptions, PruningPlan,
    PruningRates, ScoringConfig, Strategy,
};

const EXIT_VALIDATION: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "infoprune", version, about = "Entropy-based structural filter pruning for CNNs")]
struct Cli {
    /// Worker threads for scoring and batched inference (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a summary of an archive.
    Inspect {
        #[arg(long)]
        archive: PathBuf,
    },
    /// Score every prunable filter and write the score table as JSON.
    Score {
        #[arg(long)]
        archive: PathBuf,
        #[command(flatten)]
        scoring: ScoringArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a pruning plan.
    Plan {
        #[arg(long)]
        archive: PathBuf,
        #[command(flatten)]
        scoring: ScoringArgs,
        #[command(flatten)]
        planning: PlanArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply a plan and write the pruned archive.
    Apply {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// FLOPs and parameter counts, baseline versus plan.
    Report {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
        /// JSON output path; the text table always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that the pruned network equals the masked original.
    Verify {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Pruned archive; applied in memory when omitted.
        #[arg(long)]
        pruned: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        inputs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Feature-map entropy, rank and filter-entropy correlation for a layer.
    Diagnose {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic archive with random weights.
    Synth {
        /// toy | chain | residual | vgg16 | resnet<6n+2>
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ScoringArgs {
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    /// `exact` or a positive neighbour count.
    #[arg(long, default_value = "exact")]
    m_nearest: MNearest,
    #[arg(long, default_value = "euclidean")]
    metric: DistanceMetric,
}

impl ScoringArgs {
    fn config(&self) -> ScoringConfig {
        ScoringConfig {
            sigma: self.sigma,
            m_nearest: self.m_nearest,
            metric: self.metric,
        }
    }
}

#[derive(Args)]
struct PlanArgs {
    /// JSON rates file: {"global": p, "layers": {id: p}, "protected": [id]}.
    #[arg(long)]
    rates: Option<PathBuf>,
    /// Uniform rate; overrides the rates file's global rate.
    #[arg(long)]
    rate: Option<f64>,
    /// least | most | random
    #[arg(long, default_value = "least")]
    strategy: Strategy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Layer never pruned (repeatable); adds to the default protected set.
    #[arg(long = "protect")]
    protect: Vec<String>,
}

/// `print!`/`println!` that stop quietly when stdout is closed early
/// (e.g. piped into `head`).
macro_rules! stdout_with {
    ($write:ident, $($arg:tt)*) => {{
        use std::io::Write;
        if let Err(e) = $write!(std::io::stdout(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
            return Err(io_err(Path::new("<stdout>"), e));
        }
    }};
}

macro_rules! out {
    ($($arg:tt)*) => { stdout_with!(write, $($arg)*) };
}

macro_rules! outln {
    ($($arg:tt)*) => { stdout_with!(writeln, $($arg)*) };
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> infoprune::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        context: path.display().to_string(),
        message: e.to_string(),
    })
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingFile(path.to_path_buf())
    } else {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
    }
}

fn emit(text: &str, out: Option<&Path>) -> infoprune::Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| io_err(p, e)),
        None => {
            out!("{text}");
            Ok(())
        }
    }
}

fn shape_str(s: NodeShape) -> String {
    match s {
        NodeShape::Spatial { channels, height, width } => format!("{channels}x{height}x{width}"),
        NodeShape::Flat { features } => features.to_string(),
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct ReportDoc<'a> {
    archive_fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    plan_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a PlanConfig>,
    report: &'a PlanCostReport,
}

#[derive(Serialize)]
struct ChannelDiagnostics {
    channel: usize,
    feature_map_entropy: f64,
    feature_map_rank: usize,
    kernel_width: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    filter_entropy: Option<f64>,
}

#[derive(Serialize)]
struct DiagnoseDoc {
    archive_fingerprint: String,
    layer_id: String,
    samples: usize,
    alpha: f64,
    seed: u64,
    kernel_width_rule: &'static str,
    channels: Vec<ChannelDiagnostics>,
    mean_entropy: f64,
    mean_rank: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pearson_filter_vs_map_entropy: Option<f64>,
}

enum Outcome {
    Ok,
    VerifyFailed,
}

fn run(cmd: Command) -> infoprune::Result<Outcome> {
    match cmd {
        Command::Inspect { archive } => {
            let model = Model::load(&archive)?;
            let info = model.graph()?;
            let costs = count_costs(&model.manifest)?;
            outln!("archive      {}", archive.display());
            outln!("fingerprint  {}", model.fingerprint());
            outln!("input        {:?}", model.manifest.input_shape);
            outln!("layers       {} ({} prunable, {} pruning units)", model.manifest.layers.len(), info.unit_of.len(), info.units.len());
            outln!("groups       {}", model.manifest.coupling_groups.len());
            outln!("params       {}", costs.total_params);
            outln!("flops        {}", costs.total_flops);
            outln!();
            outln!("{:<28} {:<12} {:<12} {:>8} {:>6}", "layer", "kind", "output", "prunable", "unit");
            for &i in &info.order {
                let l = &model.manifest.layers[i];
                let unit = info.unit_of.get(&i).map(|u| u.to_string()).unwrap_or_default();
                outln!(
                    "{:<28} {:<12} {:<12} {:>8} {:>6}",
                    l.id,
                    format!("{:?}", l.kind()).to_lowercase(),
                    shape_str(info.shapes[i]),
                    if l.prunable { "yes" } else { "" },
                    unit
                );
            }
        }
        Command::Score { archive, scoring, out } => {
            let model = Model::load(&archive)?;
            let table = score_model(&model, &scoring.config())?;
            emit(&table.to_json(), out.as_deref())?;
        }
        Command::Plan {
            archive,
            scoring,
            planning,
            out,
        } => {
            let model = Model::load(&archive)?;
            let mut rates = match &planning.rates {
                Some(p) => read_json::<PruningRates>(p)?,
                None => PruningRates::default(),
            };
            if let Some(r) = planning.rate {
                rates.global = Some(r);
            }
            let scores = score_model(&model, &scoring.config())?;
            let options = PlanOptions {
                rates,
                strategy: planning.strategy,
                seed: planning.seed,
                extra_protected: planning.protect,
            };
            let plan = build_plan(&model.manifest, &scores, &options)?;
            emit(&plan.to_json(), out.as_deref())?;
        }
        Command::Apply { archive, plan, out } => {
            let model = Model::load(&archive)?;
            let plan = PruningPlan::from_json(&fs::read_to_string(&plan).map_err(|e| io_err(&plan, e))?)?;
            let pruned = apply_plan(&model, &plan)?;
            pruned.save(&out)?;
            eprintln!("wrote {} ({})", out.display(), pruned.provenance.pruned_fingerprint);
        }
        Command::Report { archive, plan, out } => {
            let model = Model::load(&archive)?;
            let plan = match plan {
                Some(p) => Some(PruningPlan::from_json(&fs::read_to_string(&p).map_err(|e| io_err(&p, e))?)?),
                None => None,
            };
            let report = match &plan {
                Some(p) => {
                    if p.archive_fingerprint != model.fingerprint() {
                        return Err(Error::PlanMismatch("plan was built for a different archive".into()));
                    }
                    evaluate_plan_costs(&model.manifest, p)?
                }
                None => {
                    let base = count_costs(&model.manifest)?;
                    PlanCostReport {
                        convention: CONVENTION.to_string(),
                        pruned: base.clone(),
                        baseline: base,
                        flops_pr: 0.0,
                        params_pr: 0.0,
                    }
                }
            };
            out!("{}", report.to_table());
            if let Some(path) = out {
                let doc = ReportDoc {
                    archive_fingerprint: model.fingerprint(),
                    plan_hash: plan.as_ref().map(|p| p.hash()),
                    config: plan.as_ref().map(|p| &p.config),
                    report: &report,
                };
                emit(&to_json(&doc), Some(&path))?;
            }
        }
        Command::Verify {
            archive,
            plan,
            pruned,
            inputs,
            seed,
            tolerance,
        } => {
            let model = Model::load(&archive)?;
            let plan = PruningPlan::from_json(&fs::read_to_string(&plan).map_err(|e| io_err(&plan, e))?)?;
            let small = match pruned {
                Some(p) => Model::load(p)?,
                None => apply_plan(&model, &plan)?.model,
            };
            let xs = random_inputs(&model.manifest, inputs, seed);
            let dev = masked_equivalence(&model, &plan, &small, &xs)?;
            outln!("max |Δ| = {dev:.3e} over {inputs} inputs (tolerance {tolerance:e})");
            if dev.is_nan() || dev > tolerance {
                eprintln!("error: verification failed: deviation {dev:e} exceeds {tolerance:e}");
                return Ok(Outcome::VerifyFailed);
            }
        }
        Command::Diagnose {
            archive,
            layer,
            samples,
            alpha,
            seed,
            out,
        } => {
            let model = Model::load(&archive)?;
            let xs = random_inputs(&model.manifest, samples, seed);
            let maps = capture_feature_maps(&model, &xs, &layer)?;
            let filter_h: Option<Vec<f64>> = model.manifest.layer(&layer).and_then(|l| match &l.op {
                LayerOp::Conv2d(p) => {
                    let w = model.tensor(&p.weight);
                    Some((0..p.out_channels).map(|o| information_capacity(w.row(o), p.kernel * p.kernel, MNearest::Exact).0).collect())
                }
                _ => None,
            });
            let mut channels = Vec::with_capacity(maps.len());
            for m in &maps {
                let width = median_kernel_width(m)?;
                channels.push(ChannelDiagnostics {
                    channel: m.channel,
                    feature_map_entropy: renyi_matrix_entropy(m, alpha, width)?,
                    feature_map_rank: feature_rank(m),
                    kernel_width: width,
                    filter_entropy: filter_h.as_ref().map(|h| h[m.channel]),
                });
            }
            let fm: Vec<f64> = channels.iter().map(|c| c.feature_map_entropy).collect();
            let n = channels.len().max(1) as f64;
            let doc = DiagnoseDoc {
                archive_fingerprint: model.fingerprint(),
                layer_id: layer,
                samples,
                alpha,
                seed,
                kernel_width_rule: "median pairwise distance",
                mean_entropy: fm.iter().sum::<f64>() / n,
                mean_rank: channels.iter().map(|c| c.feature_map_rank as f64).sum::<f64>() / n,
                pearson_filter_vs_map_entropy: filter_h.as_ref().and_then(|h| correlate(h, &fm).ok()),
                channels,
            };
            emit(&to_json(&doc), out.as_deref())?;
        }
        Command::Synth { arch, seed, classes, out } => {
            let model = match arch.as_str() {
                "toy" => zoo::toy_chain(seed)?,
                "chain" => zoo::random_chain(seed)?,
                "residual" => zoo::random_residual(seed)?,
                "vgg16" => zoo::vgg16_cifar(classes, seed)?,
                a if a.starts_with("resnet") => {
                    let depth = a["resnet".len()..]
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("unknown architecture `{a}`")))?;
                    zoo::resnet_cifar(depth, classes, seed)?
                }
                a => return Err(Error::InvalidConfig(format!("unknown architecture `{a}`"))),
            };
            model.save(&out)?;
            eprintln!("wrote {} ({})", out.display(), model.fingerprint());
        }
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    match pool.install(|| run(cli.command)) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerifyFailed) => ExitCode::from(EXIT_VERIFY),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_VALIDATION)
        }
    }
}
