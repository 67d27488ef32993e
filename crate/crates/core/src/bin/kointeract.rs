use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ko_interact::attribution::{attribute, AttributionConfig, AttributionResult, Measure};
use ko_interact::baselines::{
    featurewise_selection, permutation_pvalues, step_up_selection, BaselineMethod, PermutationSettings,
};
use ko_interact::data::{row_major, Task};
use ko_interact::distill::{distill, raw_scores, DistillConfig};
use ko_interact::error::Error;
use ko_interact::fdr::interaction_threshold;
use ko_interact::harness::{emit_plot_data, make_knockoffs, run_pipeline, KnockoffConfig, PipelineConfig};
use ko_interact::io;
use ko_interact::knockoffs::{AugmentedDataset, KnockoffMethod};
use ko_interact::mlp::{r_squared, train, CouplingMlp};
use ko_interact::sim::{generate_dataset, SimulationSpec};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "kointeract", version, about = "Knockoff-based interaction discovery with FDR control")]
struct Cli {
    /// JSON pipeline configuration; sections supply defaults for every stage.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed used by stages that do not get one of their own.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Concurrent repetitions (`pipeline`); 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (`pipeline`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Regression,
    Binary,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Regression => Task::Regression,
            TaskArg::Binary => Task::Binary,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw a simulated dataset and its interaction ground truth.
    Simulate {
        #[arg(long = "function")]
        function_id: u8,
        #[arg(long, default_value_t = 4000)]
        n: usize,
        #[arg(long, default_value_t = 30)]
        p: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Knockoff copies of the feature columns of a dataset.
    Knockoffs {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "gaussian")]
        method: String,
        #[arg(long, default_value = "y")]
        response: String,
        #[arg(long)]
        shrinkage: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write originals, knockoffs and response side by side.
        #[arg(long)]
        aug: Option<PathBuf>,
    },
    /// Fit the coupling network on an augmented dataset.
    Train {
        #[command(flatten)]
        data: AugArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pairwise and univariate attributions of a trained model.
    Attribute {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: AugArgs,
        #[arg(long)]
        measure: Option<String>,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        max_rows: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interaction scores from attributions.
    Distill {
        #[arg(long)]
        attrib: PathBuf,
        /// Skip the additive fit and score pairs by raw importance.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Knockoff-filter selection over a score table.
    Select {
        #[arg(long)]
        gamma: PathBuf,
        #[arg(long)]
        q: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Comparison procedures without knockoff calibration.
    Baseline {
        #[arg(long)]
        method: String,
        #[arg(long)]
        q: Option<f64>,
        /// Attributions (featurewise).
        #[arg(long)]
        attrib: Option<PathBuf>,
        /// Training rows as an augmented CSV (permutation methods).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Rows to explain; defaults to `--data`.
        #[arg(long)]
        explain: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "regression")]
        task: TaskArg,
        #[arg(long)]
        permutations: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every stage over seeded repetitions, with summary and intermediates.
    Pipeline,
    /// CSV tables behind the standard plots of a finished run.
    PlotData {
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Print the version.
    Version,
}

#[derive(Args)]
struct AugArgs {
    /// Augmented CSV: originals, `_ko` columns, then `y`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "regression")]
    task: TaskArg,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Stage(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Stage(other),
        }
    }
}

fn config_error(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_file(path).map_err(config_error)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.base_seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.output_dir = Some(dir.clone());
    }
    Ok(cfg)
}

fn read_aug(a: &AugArgs) -> Result<AugmentedDataset, Failure> {
    Ok(io::read_augmented(&a.data, a.task.into())?.1)
}

fn write_selection(path: &Path, sel: &ko_interact::fdr::SelectionResult) -> Result<(), Failure> {
    io::write_json(path, &sel.to_json())?;
    println!("selected {} pairs -> {}", sel.selected.len(), path.display());
    Ok(())
}

fn check_q(q: f64) -> Result<f64, Failure> {
    if q > 0.0 && q < 1.0 {
        Ok(q)
    } else {
        Err(config_error(format!("q must be in (0,1), got {q}")))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli)?;
    let seed = cfg.base_seed;
    match cli.command {
        Command::Simulate { function_id, n, p, out, truth } => {
            let spec = SimulationSpec { function_id, n_samples: n, n_features: p, seed };
            spec.validate().map_err(config_error)?;
            let (data, gt) = generate_dataset(&spec)?;
            io::write_dataset(&out, &data)?;
            if let Some(t) = truth {
                io::write_json(&t, &gt.to_json())?;
            }
            println!("wrote {} rows x {} features -> {}", n, p, out.display());
        }
        Command::Knockoffs { input, method, response, shrinkage, out, aug } => {
            let method: KnockoffMethod = method.parse().map_err(config_error)?;
            let data = io::read_dataset(&input, &response, Task::Regression)?;
            let all: Vec<usize> = (0..data.n_samples()).collect();
            let kcfg = KnockoffConfig { method, shrinkage: shrinkage.or(cfg.knockoffs.shrinkage) };
            let x_tilde = make_knockoffs(&data.x, &all, &kcfg, seed)?;
            io::write_knockoffs(&out, &data.feature_names, &x_tilde)?;
            if let Some(path) = aug {
                let a = AugmentedDataset::new(&data.x, &x_tilde, data.y.clone(), data.task)?;
                io::write_augmented(&path, &a, Some(&data.feature_names))?;
            }
            println!("wrote knockoffs -> {}", out.display());
        }
        Command::Train { data, epochs, out } => {
            let aug = read_aug(&data)?;
            let mut tcfg = cfg.train.clone();
            tcfg.seed = seed;
            if let Some(e) = epochs {
                tcfg.epochs = e;
            }
            tcfg.validate().map_err(config_error)?;
            let model = train(&aug, &tcfg)?;
            std::fs::write(&out, model.to_json()?).map_err(Error::from)?;
            println!("training R^2 {:.4} -> {}", r_squared(&model, &aug)?, out.display());
        }
        Command::Attribute { model, data, measure, draws, max_rows, out } => {
            let text = std::fs::read_to_string(&model).map_err(Error::from)?;
            let net = CouplingMlp::from_json(&text)?;
            let aug = read_aug(&data)?;
            let mut acfg: AttributionConfig = cfg.attribution.clone();
            if let Some(m) = measure {
                acfg.measure = m.parse::<Measure>().map_err(config_error)?;
            }
            if let Some(d) = draws {
                acfg.draws = d;
            }
            if max_rows.is_some() {
                acfg.max_rows = max_rows;
            }
            if acfg.draws == 0 {
                return Err(config_error("draws must be at least 1"));
            }
            let attr = attribute(&net, &row_major(&aug.columns), &acfg, seed)?;
            io::write_json(&out, &attr)?;
            println!("wrote attributions -> {}", out.display());
        }
        Command::Distill { attrib, raw, out } => {
            let attr: AttributionResult = io::read_json(&attrib)?;
            let gamma = if raw {
                raw_scores(&attr)?
            } else {
                let dcfg: DistillConfig = cfg.distillation.clone();
                distill(&attr, &dcfg)?.0
            };
            io::write_gamma(&out, &gamma)?;
            println!("wrote {} scores -> {}", gamma.entries.len(), out.display());
        }
        Command::Select { gamma, q, out } => {
            let q = check_q(q.unwrap_or(cfg.q))?;
            let g = io::read_gamma(&gamma)?;
            write_selection(&out, &interaction_threshold(&g, q)?)?;
        }
        Command::Baseline { method, q, attrib, data, explain, task, permutations, out } => {
            let q = check_q(q.unwrap_or(cfg.q))?;
            let method: BaselineMethod = method.parse().map_err(config_error)?;
            let sel = match method {
                BaselineMethod::Featurewise => {
                    let path = attrib.ok_or_else(|| config_error("featurewise needs --attrib"))?;
                    let attr: AttributionResult = io::read_json(&path)?;
                    featurewise_selection(&attr.e1d, &attr.e2d, q)?
                }
                BaselineMethod::PermBh | BaselineMethod::PermBy => {
                    let path = data.ok_or_else(|| config_error("permutation baselines need --data"))?;
                    let train_data = io::read_augmented(&path, task.into())?.1;
                    let explain_data = match explain {
                        Some(e) => io::read_augmented(&e, task.into())?.1,
                        None => train_data.clone(),
                    };
                    let mut settings: PermutationSettings = cfg.baselines.permutation.clone();
                    if let Some(b) = permutations {
                        settings.permutations = b;
                    }
                    let table = permutation_pvalues(&train_data, &explain_data, &settings, seed)?;
                    step_up_selection(&table, q, method == BaselineMethod::PermBy)?
                }
            };
            write_selection(&out, &sel)?;
        }
        Command::Pipeline => {
            let summary = run_pipeline(&cfg)?;
            let ok = summary.repetitions.len() - summary.failures();
            println!("{ok}/{} repetitions completed", summary.repetitions.len());
            if let Some(m) = &summary.metrics {
                println!(
                    "mean FDP {:.3} [{:.3}, {:.3}]  mean power {:.3}",
                    m.fdp.mean, m.fdp.ci_low, m.fdp.ci_high, m.power.mean
                );
            }
            if let Some(dir) = &cfg.output_dir {
                println!("summary -> {}", dir.join("summary.json").display());
            }
            if ok == 0 {
                return Err(Failure::Stage(Error::IncompleteRun("every repetition failed".into())));
            }
        }
        Command::PlotData { run_dir } => {
            let dir = run_dir
                .or(cfg.output_dir.clone())
                .ok_or_else(|| config_error("plot-data needs --run-dir or --out-dir"))?;
            for path in emit_plot_data(&dir)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Version => println!("kointeract {}", env!("CARGO_PKG_VERSION")),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}
