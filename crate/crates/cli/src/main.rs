use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use enmkl::evaluation::{make_fold_plan, nested_cv, CvOptions, CvReport, HyperGrid, Metrics};
use enmkl::io::{self, KernelFormat};
use enmkl::kernel::{build_linear_cross_kernels, build_linear_kernels, Preprocessing};
use enmkl::mkl::{train_model, train_on_features, KernelKind, MklOptions, ModelKind, DEFAULT_CONV_TOL, DEFAULT_MAX_ITER};
use enmkl::{evaluation::decision_to_label, MklError, MklModel, Task};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NONCONVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "enmkl", version, about = "Elastic-net multiple kernel learning (SVM and kernel ridge regression)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build one linear kernel per feature group and write a stack manifest.
    Kernels(KernelsArgs),
    /// Train a model on a kernel stack or on grouped features.
    Train(TrainArgs),
    /// Predict with a trained model from test features or cross-kernels.
    Predict(PredictArgs),
    /// Nested cross-validation with grid search.
    Cv(CvArgs),
    /// Print metrics and ranked kernel weights from a report or model file.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Binary,
}

#[derive(Args)]
struct KernelsArgs {
    /// Feature CSV (first column sample id).
    #[arg(long)]
    features: PathBuf,
    /// Group map CSV (feature_name, group_name).
    #[arg(long)]
    groups: PathBuf,
    /// With this set, `--features` are test samples and the output holds
    /// test x train cross-kernels plus test self-similarities.
    #[arg(long)]
    train_features: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Skip kernel mean-centering.
    #[arg(long)]
    no_center: bool,
    /// Skip kernel normalization.
    #[arg(long)]
    no_normalize: bool,
}

impl PreprocessArgs {
    fn config(&self) -> Preprocessing {
        Preprocessing {
            center: !self.no_center,
            normalize: !self.no_normalize,
        }
    }
}

#[derive(Args)]
struct SolverArgs {
    /// Convergence tolerance on the kernel weights.
    #[arg(long, default_value_t = DEFAULT_CONV_TOL)]
    conv_tol: f64,
    /// Maximum outer iterations.
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Kernel stack manifest written by `kernels`.
    #[arg(long, conflicts_with = "features")]
    kernels: Option<PathBuf>,
    #[arg(long, requires = "groups")]
    features: Option<PathBuf>,
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Targets CSV (sample_id, target).
    #[arg(long)]
    targets: PathBuf,
    #[arg(long, default_value = "classification")]
    task: Task,
    /// Elastic-net mixing parameter in (0, 1].
    #[arg(long)]
    mu: Option<String>,
    #[arg(long = "C", default_value = "1")]
    c: String,
    /// Train the unweighted kernel-average baseline instead.
    #[arg(long)]
    baseline: bool,
    #[command(flatten)]
    prep: PreprocessArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output model JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Test feature CSV (uses the model's primal weights).
    #[arg(long, conflicts_with = "kernels")]
    features: Option<PathBuf>,
    /// Cross-kernel manifest written by `kernels --train-features`.
    #[arg(long)]
    kernels: Option<PathBuf>,
    /// Output predictions CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    groups: PathBuf,
    #[arg(long)]
    targets: PathBuf,
    #[arg(long, default_value = "classification")]
    task: Task,
    /// Comma-separated μ values (overrides the grid's μ axis).
    #[arg(long)]
    mu: Option<String>,
    /// Comma-separated C values (overrides the grid's C axis).
    #[arg(long = "C")]
    c: Option<String>,
    /// `default` or a JSON file with `C` and `mu` arrays.
    #[arg(long, default_value = "default")]
    grid: String,
    #[arg(long, default_value_t = 5)]
    k_outer: usize,
    #[arg(long, default_value_t = 5)]
    k_inner: usize,
    /// Block labels CSV (sample_id, block); folds keep blocks whole.
    #[arg(long)]
    blocks: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also run the sum-baseline and report both side by side.
    #[arg(long)]
    baseline: bool,
    #[command(flatten)]
    prep: PreprocessArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output directory for report.json and weights.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// A report.json from `cv` or a model JSON from `train`.
    input: PathBuf,
    /// Baseline report to print side by side.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Write ranked weights CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Data(MklError),
    NonConvergence(String),
}

impl From<MklError> for Failure {
    fn from(e: MklError) -> Self {
        match e {
            MklError::NonConvergence { .. } => Failure::NonConvergence(e.to_string()),
            MklError::InvalidParameter(msg) => Failure::Usage(msg),
            other => Failure::Data(other),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn parse_list(flag: &str, s: &str) -> std::result::Result<Vec<f64>, Failure> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Failure::Usage(format!("{flag}: cannot parse `{v}` as a number")))
        })
        .collect()
}

fn parse_single(flag: &str, s: &str) -> std::result::Result<f64, Failure> {
    let v = parse_list(flag, s)?;
    if v.len() != 1 {
        return Err(Failure::Usage(format!(
            "{flag} takes a single value here; value lists are only accepted by `cv`"
        )));
    }
    Ok(v[0])
}

fn check_enmkl_mu(mu: f64) -> std::result::Result<(), Failure> {
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(Failure::Usage(format!(
            "--mu {mu} is outside (0, 1]; for the mu = 0 (plain kernel sum) model use --baseline"
        )));
    }
    Ok(())
}

fn beta_table(out: &mut String, names: &[String], beta: &[f64]) {
    let mut rows: Vec<(&String, f64)> = names.iter().zip(beta.iter().copied()).collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(5).max(5);
    let _ = writeln!(out, "{:>4}  {:<width$}  weight", "rank", "group");
    for (i, (name, b)) in rows.iter().enumerate() {
        let _ = writeln!(out, "{:>4}  {:<width$}  {:.6}", i + 1, name, b);
    }
}

fn metrics_lines(out: &mut String, label: &str, m: &Metrics) {
    let fields = [
        ("balanced_accuracy", m.balanced_accuracy),
        ("auc", m.auc),
        ("mse", m.mse),
        ("correlation", m.correlation),
    ];
    for (name, v) in fields {
        if let Some(v) = v {
            let _ = writeln!(out, "{label}{name}: {v:.6}");
        }
    }
}

fn cmd_kernels(a: &KernelsArgs, out: &mut String) -> CmdResult {
    let format = match a.format {
        FormatArg::Csv => KernelFormat::Csv,
        FormatArg::Binary => KernelFormat::Binary,
    };
    let data = io::load_dataset(&a.features, &a.groups)?;
    let manifest = match &a.train_features {
        None => {
            let stack = build_linear_kernels(&data)?;
            io::write_stack(&a.out, &stack, format, KernelKind::Linear, None)?
        }
        Some(train_path) => {
            let train = io::load_dataset(train_path, &a.groups)?;
            let (cross, test_self) = build_linear_cross_kernels(&data, &train)?;
            io::write_stack(&a.out, &cross, format, KernelKind::Linear, Some(&test_self))?
        }
    };
    let _ = writeln!(out, "wrote {} kernels to {}", data.ngroups(), manifest.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs, out: &mut String) -> CmdResult {
    let kind = if a.baseline { ModelKind::SumBaseline } else { ModelKind::Enmkl };
    let c = parse_single("--C", &a.c)?;
    let mu = match (&a.mu, kind) {
        (Some(s), _) => parse_single("--mu", s)?,
        (None, ModelKind::SumBaseline) => 0.0,
        (None, ModelKind::Enmkl) => {
            return Err(Failure::Usage("--mu is required (or pass --baseline for the kernel-sum model)".into()))
        }
    };
    if kind == ModelKind::Enmkl {
        check_enmkl_mu(mu)?;
    }
    let opts = MklOptions {
        conv_tol: a.solver.conv_tol,
        max_iter: a.solver.max_iter,
        ..MklOptions::new(c, mu)
    };
    let model = match (&a.kernels, &a.features, &a.groups) {
        (Some(manifest), _, _) => {
            let loaded = io::read_stack(manifest)?;
            let stack = loaded.stack;
            let (targets, class_names) = io::read_targets(&a.targets, stack.row_ids(), a.task, None)?;
            let already_centered = stack.kernels().iter().all(|k| k.is_centered());
            let already_normalized = stack.kernels().iter().all(|k| k.is_normalized());
            let mut prep = a.prep.config();
            prep.center &= !already_centered;
            prep.normalize &= !already_normalized;
            let mut model = train_model(&stack, &targets, kind, &opts, prep)?;
            model.class_names = class_names;
            model
        }
        (None, Some(features), Some(groups)) => {
            let data = io::load_dataset(features, groups)?;
            let (targets, class_names) = io::read_targets(&a.targets, data.sample_ids(), a.task, None)?;
            let data = data.with_targets(targets)?;
            let mut model = train_on_features(&data, kind, &opts, a.prep.config())?;
            model.class_names = class_names;
            model
        }
        _ => return Err(Failure::Usage("train needs --kernels or --features with --groups".into())),
    };
    io::write_json(&a.out, &model)?;
    let _ = writeln!(
        out,
        "{} {} model, C={} mu={}, {} iterations{}",
        model.task.as_str(),
        match model.kind {
            ModelKind::Enmkl => "enmkl",
            ModelKind::SumBaseline => "sum-baseline",
        },
        model.c,
        model.mu,
        model.iterations,
        if model.degenerate { " (degenerate: all block norms zero)" } else { "" }
    );
    beta_table(out, &model.group_names, &model.beta);
    if !model.converged && !model.degenerate {
        return Err(Failure::NonConvergence(format!(
            "kernel weights did not converge within {} iterations; model written to {}",
            a.solver.max_iter,
            a.out.display()
        )));
    }
    Ok(())
}

fn cmd_predict(a: &PredictArgs, out: &mut String) -> CmdResult {
    let model: MklModel = io::read_json(&a.model)?;
    let (ids, values) = match (&a.features, &a.kernels) {
        (Some(features), None) => {
            let primal = model.primal.as_ref().ok_or_else(|| {
                Failure::Usage("this model has no primal weights; predict from cross-kernels with --kernels".into())
            })?;
            let table = io::read_features(features)?;
            let layout: Vec<(String, Vec<String>)> = primal
                .groups
                .iter()
                .map(|g| (g.group.clone(), g.feature_names.clone()))
                .collect();
            let data = io::dataset_with_layout(features, &table, &layout)?;
            (table.sample_ids, primal.predict(&data)?)
        }
        (None, Some(manifest)) => {
            let loaded = io::read_stack(manifest)?;
            let test_self = loaded.row_self_similarity.unwrap_or_default();
            let values = model.decision_values_raw(&loaded.stack, &test_self)?;
            (loaded.stack.row_ids().to_vec(), values)
        }
        _ => return Err(Failure::Usage("predict needs exactly one of --features or --kernels".into())),
    };
    let mut w = String::new();
    match model.task {
        Task::Classification => {
            w.push_str("id,decision_value,label\n");
            for (id, v) in ids.iter().zip(&values) {
                let y = decision_to_label(*v);
                let label = match &model.class_names {
                    Some(names) => names[usize::from(y > 0.0)].clone(),
                    None => format!("{y}"),
                };
                let _ = writeln!(w, "{},{},{}", csv_field(id), v, csv_field(&label));
            }
        }
        Task::Regression => {
            w.push_str("id,decision_value,prediction\n");
            for (id, v) in ids.iter().zip(&values) {
                let _ = writeln!(w, "{},{},{}", csv_field(id), v, v);
            }
        }
    }
    io::write_atomic(&a.out, w.as_bytes())?;
    let _ = writeln!(out, "wrote {} predictions to {}", ids.len(), a.out.display());
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cmd_cv(a: &CvArgs, out: &mut String) -> CmdResult {
    let mut grid = if a.grid == "default" {
        HyperGrid::default()
    } else {
        io::read_json::<HyperGrid>(Path::new(&a.grid))?
    };
    if let Some(c) = &a.c {
        grid.c_values = parse_list("--C", c)?;
    }
    if let Some(mu) = &a.mu {
        grid.mu = parse_list("--mu", mu)?;
    }
    grid.validate()?;
    if let Some(&bad) = grid.mu.iter().find(|&&m| !(m > 0.0 && m <= 1.0)) {
        check_enmkl_mu(bad)?;
    }
    let data = io::load_dataset(&a.features, &a.groups)?;
    let (targets, class_names) = io::read_targets(&a.targets, data.sample_ids(), a.task, None)?;
    let blocks = a.blocks.as_ref().map(|p| io::read_blocks(p, data.sample_ids())).transpose()?;
    let strata = (a.task == Task::Classification).then(|| targets.values.clone());
    let plan = make_fold_plan(data.sample_ids(), a.k_outer, a.k_inner, blocks.as_deref(), strata.as_deref(), a.seed)?;
    let data = data.with_targets(targets)?;
    let opts = CvOptions {
        preprocessing: a.prep.config(),
        conv_tol: a.solver.conv_tol,
        max_iter: a.solver.max_iter,
        ..CvOptions::default()
    };
    let report = nested_cv(&data, &grid, &plan, &opts)?;
    io::write_json(&a.out.join("report.json"), &report)?;
    io::write_atomic(&a.out.join("weights.csv"), &io::weights_csv(&report.ranked_weights())?)?;
    if let Some(names) = &class_names {
        let _ = writeln!(out, "classes: -1 = {}, +1 = {}", names[0], names[1]);
    }
    let _ = writeln!(out, "enmkl nested CV ({} outer folds, seed {})", report.k_outer, report.seed);
    for f in &report.folds {
        let _ = writeln!(
            out,
            "  fold {}: C={} mu={} inner={:.6} selected={}",
            f.fold, f.c, f.mu, f.inner_score, f.selected_kernels
        );
    }
    if a.baseline {
        let base_opts = CvOptions {
            kind: ModelKind::SumBaseline,
            ..opts
        };
        let base = nested_cv(&data, &grid, &plan, &base_opts)?;
        io::write_json(&a.out.join("baseline_report.json"), &base)?;
        side_by_side(out, &report, &base);
    } else {
        metrics_lines(out, "", &report.aggregate.metrics);
    }
    beta_table(out, &report.aggregate.group_names, &report.aggregate.mean_beta);
    Ok(())
}

fn side_by_side(out: &mut String, enmkl: &CvReport, base: &CvReport) {
    let (a, b) = (&enmkl.aggregate.metrics, &base.aggregate.metrics);
    let rows = [
        ("balanced_accuracy", a.balanced_accuracy, b.balanced_accuracy),
        ("auc", a.auc, b.auc),
        ("mse", a.mse, b.mse),
        ("correlation", a.correlation, b.correlation),
    ];
    let _ = writeln!(out, "{:<18}  {:>12}  {:>12}", "metric", "enmkl", "sum-baseline");
    for (name, x, y) in rows {
        if let (Some(x), Some(y)) = (x, y) {
            let _ = writeln!(out, "{name:<18}  {x:>12.6}  {y:>12.6}");
        }
    }
}

fn cmd_report(a: &ReportArgs, out: &mut String) -> CmdResult {
    let value: serde_json::Value = io::read_json(&a.input)?;
    let (names, beta): (Vec<String>, Vec<f64>) = if value.get("aggregate").is_some() {
        let report: CvReport = io::read_json(&a.input)?;
        match &a.baseline {
            Some(p) => side_by_side(out, &report, &io::read_json(p)?),
            None => metrics_lines(out, "", &report.aggregate.metrics),
        }
        (report.aggregate.group_names, report.aggregate.mean_beta)
    } else {
        let model: MklModel = io::read_json(&a.input)?;
        (model.group_names, model.beta)
    };
    beta_table(out, &names, &beta);
    if let Some(path) = &a.out {
        let mut rows: Vec<(String, f64)> = names.into_iter().zip(beta).collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        io::write_atomic(path, &io::weights_csv(&rows)?)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let mut out = String::new();
    let result = match &cli.command {
        Command::Kernels(a) => cmd_kernels(a, &mut out),
        Command::Train(a) => cmd_train(a, &mut out),
        Command::Predict(a) => cmd_predict(a, &mut out),
        Command::Cv(a) => cmd_cv(a, &mut out),
        Command::Report(a) => cmd_report(a, &mut out),
    };
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(out.as_bytes());
    let _ = stdout.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::NonConvergence(msg)) => {
            eprintln!("did not converge: {msg}");
            ExitCode::from(EXIT_NONCONVERGENCE)
        }
    }
}
