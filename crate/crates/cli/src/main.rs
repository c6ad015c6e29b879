mod config;
mod manifest;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use deepsolve::dataio::{build_dataset, Dataset, Split};
use deepsolve::evaluator::{evaluate, recover_infeasible, EvalConfig, EvalReport};
use deepsolve::mlp::{default_hidden_sizes, init_model, Checkpoint, CheckpointMeta};
use deepsolve::netmodel::{build_admittance, resolve_case_path, write_canonical, NetworkCase};
use deepsolve::opfref::{OpfSolver, WarmStart};
use deepsolve::powerflow::{check_feasibility, solve_pf, IndependentVars, PfInit, PfOptions};
use deepsolve::trainer::{train, write_metrics, Reconstructor, TrainConfig};

use config::{parse_hidden, parse_range, read_config, with_suffix, ConfigFile, EvalOpts, GenDataOpts, TrainOpts};
use manifest::RunManifest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Domain(String),
}

macro_rules! domain {
    ($e:expr) => {
        $e.map_err(|e| CliError::Domain(e.to_string()))
    };
}

#[derive(Parser)]
#[command(name = "deepsolve", version, about = "Learned AC optimal power flow with power-flow reconstruction")]
struct Cli {
    /// Worker threads for parallel power-flow and OPF evaluations.
    #[arg(long, global = true, env = "DEEPSOLVE_WORKERS")]
    workers: Option<usize>,
    /// TOML config file (or a run manifest) supplying option defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample load scenarios and label them with the reference OPF solver.
    GenData(GenDataOpts),
    /// Train a model on a generated dataset.
    Train(TrainOpts),
    /// Evaluate a trained model on the test split.
    Eval(EvalOpts),
    /// Run a Newton power flow.
    SolvePf {
        #[arg(long)]
        case: PathBuf,
        /// Load vectors, one per line: P_D then Q_D in p.u., comma separated.
        #[arg(long)]
        loads: Option<PathBuf>,
        /// JSON independent variables; defaults to the case setpoints.
        #[arg(long)]
        setpoints: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the AC-OPF with the interior-point reference solver.
    SolveOpf {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        loads: Option<PathBuf>,
        /// JSON warm-start point.
        #[arg(long)]
        warm_start: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict setpoints for load vectors and reconstruct them.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        loads: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render saved evaluation reports (JSON) as a table or CSV.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
        format: ReportFormat,
    },
    /// Convert a case file to the canonical TOML format.
    ConvertCase {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Table,
    Csv,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                CliError::Io(_) | CliError::Domain(_) => 1,
            })
        }
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::SolvePf { .. } => "solve-pf",
        Command::SolveOpf { .. } => "solve-opf",
        Command::Predict { .. } => "predict",
        Command::Report { .. } => "report",
        Command::ConvertCase { .. } => "convert-case",
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let name = subcommand_name(&cli.command);
    let file = match &cli.config {
        Some(p) => read_config(p, name)?,
        None => ConfigFile::default(),
    };
    let workers =
        cli.workers.or(file.workers).unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new().num_threads(workers).build_global().map_err(|e| CliError::Io(e.to_string()))?;

    match cli.command {
        Command::GenData(opts) => gen_data(opts.merged(file.gen_data).resolved()?, workers),
        Command::Train(opts) => train_cmd(opts.merged(file.train).resolved(default_hidden)?, workers),
        Command::Eval(opts) => eval_cmd(opts.merged(file.eval).resolved()?, workers),
        Command::SolvePf { case, loads, setpoints, out } => {
            solve_pf_cmd(&case, loads.as_deref(), setpoints.as_deref(), out.as_deref(), workers)
        }
        Command::SolveOpf { case, loads, warm_start, out } => {
            solve_opf_cmd(&case, loads.as_deref(), warm_start.as_deref(), out.as_deref(), workers)
        }
        Command::Predict { model, case, loads, out } => {
            predict_cmd(&model, &case, loads.as_deref(), out.as_deref(), workers)
        }
        Command::Report { inputs, format } => report_cmd(&inputs, format),
        Command::ConvertCase { case, out } => convert_case(&case, &out, workers),
    }
}

fn default_hidden(case: &Path) -> Result<String, CliError> {
    let case = load_case(case)?;
    Ok(default_hidden_sizes(case.n_bus()).iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","))
}

fn load_case(path: &Path) -> Result<NetworkCase, CliError> {
    domain!(NetworkCase::load(path))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn gen_data(opts: GenDataOpts, workers: usize) -> Result<(), CliError> {
    let case_path = opts.case.clone().expect("resolved");
    let out_dir = opts.out_dir.clone().expect("resolved");
    let range = parse_range(opts.range.as_deref().expect("resolved"))?;
    let seed = opts.seed.expect("resolved");
    let case = load_case(&case_path)?;
    let solver = OpfSolver::new(&case);
    log::info!(
        "labeling {} + {} scenarios of {} with {workers} workers",
        opts.train_count.unwrap_or(0),
        opts.test_count.unwrap_or(0),
        case.name
    );
    let (train, test) = domain!(build_dataset(
        &solver,
        opts.train_count.expect("resolved"),
        opts.test_count.expect("resolved"),
        range,
        seed
    ))?;
    std::fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let mut manifest = RunManifest::new("gen-data", &opts, vec![seed], workers);
    manifest.input(&resolve_case_path(&case_path))?;
    for ds in [&train, &test] {
        let p = out_dir.join(ds.split.file_name());
        domain!(ds.write(&p))?;
        manifest.output(&p);
    }
    manifest.write(&out_dir.join("manifest.json"))?;
    println!("wrote {} training and {} test samples to {}", train.samples.len(), test.samples.len(), out_dir.display());
    Ok(())
}

fn train_cmd(opts: TrainOpts, workers: usize) -> Result<(), CliError> {
    let case_path = opts.case.clone().expect("resolved");
    let data_path = opts.data_dir.clone().expect("resolved").join(Split::Train.file_name());
    let out = opts.out.clone().expect("resolved");
    let metrics = opts.metrics.clone().expect("resolved");
    let hidden = parse_hidden(opts.hidden.as_deref().expect("resolved"))?;
    let case = load_case(&case_path)?;
    let data = domain!(Dataset::read(&data_path))?;
    domain!(data.check_case(&case))?;
    let cfg = TrainConfig {
        w1: opts.w1.expect("resolved"),
        w2: opts.w2.expect("resolved"),
        delta: opts.delta.expect("resolved"),
        epochs: opts.epochs.expect("resolved"),
        batch_size: opts.batch.expect("resolved"),
        lr: opts.lr.expect("resolved"),
        seed: opts.seed.expect("resolved"),
        diverged_pf_penalty: opts.diverged_penalty.expect("resolved"),
    };
    let mut sizes = vec![2 * case.n_bus()];
    sizes.extend(&hidden);
    sizes.push(data.spec.dim());
    let model = init_model(&sizes, cfg.seed);
    let outcome = train(model, &data, &case, &cfg).map_err(|e| match e {
        deepsolve::trainer::TrainError::Config(m) => CliError::Usage(m),
        other => CliError::Domain(other.to_string()),
    })?;
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            case_name: case.name.clone(),
            seed: cfg.seed,
            normalizer: data.normalizer.clone(),
            spec: data.spec.clone(),
            dependent_mean: data.dependent_mean.clone(),
        },
        model: outcome.model,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    domain!(ckpt.write(&out))?;
    write_metrics(&metrics, &outcome.history).map_err(io_err(&metrics))?;
    let mut manifest = RunManifest::new("train", &opts, vec![cfg.seed], workers);
    manifest.input(&resolve_case_path(&case_path))?;
    manifest.input(&data_path)?;
    manifest.output(&out);
    manifest.output(&metrics);
    manifest.write(&with_suffix(&out, ".manifest.json"))?;
    if let Some(last) = outcome.history.last() {
        println!(
            "trained {} epochs: pred {:.4e}, pen {:.4e}, total {:.4e}; model {}",
            last.epoch,
            last.pred,
            last.pen,
            last.total,
            out.display()
        );
    }
    Ok(())
}

fn eval_cmd(opts: EvalOpts, workers: usize) -> Result<(), CliError> {
    let model_path = opts.model.clone().expect("resolved");
    let case_path = opts.case.clone().expect("resolved");
    let data_path = opts.data_dir.clone().expect("resolved").join(Split::Test.file_name());
    let case = load_case(&case_path)?;
    let ckpt = domain!(Checkpoint::read(&model_path))?;
    let data = domain!(Dataset::read(&data_path))?;
    let solver = OpfSolver::new(&case);
    let cfg = EvalConfig { timing: !opts.no_timing.expect("resolved"), ..EvalConfig::default() };
    let mut report = domain!(evaluate(&ckpt, &data, &solver, &cfg))?;
    if opts.recover.expect("resolved") {
        recover_infeasible(&mut report, &data, &solver);
    }
    print!("{}", report.to_table());

    let mut manifest = RunManifest::new("eval", &opts, vec![ckpt.meta.seed, data.seed], workers);
    manifest.input(&resolve_case_path(&case_path))?;
    manifest.input(&model_path)?;
    manifest.input(&data_path)?;
    if let Some(p) = &opts.report {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        std::fs::write(p, report.to_csv()).map_err(io_err(p))?;
        let table = with_suffix(p, ".txt");
        std::fs::write(&table, report.to_table()).map_err(io_err(&table))?;
        let json = with_suffix(p, ".json");
        write_json(&json, &report)?;
        for out in [p, &table, &json] {
            manifest.output(out);
        }
    }
    if let Some(p) = &opts.dump_comparison {
        domain!(report.write_comparison(p, &data, &case))?;
        manifest.output(p);
    }
    if let Some(first) = manifest.outputs.first().cloned() {
        manifest.write(&with_suffix(Path::new(&first), ".manifest.json"))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

/// Writes JSON to `out` (plus a manifest) or to stdout.
fn emit(value: &impl Serialize, out: Option<&Path>, manifest: RunManifest) -> Result<(), CliError> {
    match out {
        Some(p) => {
            write_json(p, value)?;
            let mut m = manifest;
            m.output(p);
            m.write(&with_suffix(p, ".manifest.json"))?;
        }
        None => {
            let text = serde_json::to_string_pretty(value).expect("value serializes");
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}").map_err(|e| CliError::Io(e.to_string()))?;
        }
    }
    Ok(())
}

/// Load vectors from a file (one comma-separated vector per line, `#`
/// comments), or the case's default loads.
fn read_loads(case: &NetworkCase, path: Option<&Path>) -> Result<Vec<Vec<f64>>, CliError> {
    let Some(path) = path else {
        return Ok(vec![case.default_loads()]);
    };
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Domain(format!("{}:{}: {e}", path.display(), k + 1)))?;
        if row.len() != 2 * case.n_bus() {
            return Err(CliError::Domain(format!(
                "{}:{}: expected {} values (P then Q per bus), got {}",
                path.display(),
                k + 1,
                2 * case.n_bus(),
                row.len()
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct PfRecord {
    solution: deepsolve::powerflow::PowerFlowSolution,
    feasibility: Option<deepsolve::powerflow::FeasibilityReport>,
}

fn solve_pf_cmd(
    case_path: &Path,
    loads: Option<&Path>,
    setpoints: Option<&Path>,
    out: Option<&Path>,
    workers: usize,
) -> Result<(), CliError> {
    let case = load_case(case_path)?;
    let y = build_admittance(&case);
    let indep: IndependentVars = match setpoints {
        Some(p) => read_json(p)?,
        None => IndependentVars::from_setpoints(&case),
    };
    let mut records = Vec::new();
    let mut all_converged = true;
    for l in read_loads(&case, loads)? {
        let sol = domain!(solve_pf(&case, &y, &indep, &l, &PfInit::flat(case.n_bus()), &PfOptions::default()))?;
        all_converged &= sol.converged;
        let feasibility = check_feasibility(&case, &sol, 1e-6).ok();
        records.push(PfRecord { solution: sol, feasibility });
    }
    let mut m = RunManifest::new(
        "solve-pf",
        &serde_json::json!({ "case": case_path, "loads": loads, "setpoints": setpoints }),
        vec![],
        workers,
    );
    m.input(&resolve_case_path(case_path))?;
    for p in [loads, setpoints].into_iter().flatten() {
        m.input(p)?;
    }
    emit(&records, out, m)?;
    if !all_converged {
        return Err(CliError::Domain("power flow did not converge for every load vector".into()));
    }
    Ok(())
}

fn solve_opf_cmd(
    case_path: &Path,
    loads: Option<&Path>,
    warm: Option<&Path>,
    out: Option<&Path>,
    workers: usize,
) -> Result<(), CliError> {
    let case = load_case(case_path)?;
    let solver = OpfSolver::new(&case);
    let ws: Option<WarmStart> = warm.map(read_json).transpose()?;
    let mut sols = Vec::new();
    for l in read_loads(&case, loads)? {
        sols.push(domain!(solver.solve(&l, ws.as_ref()))?);
    }
    let mut m = RunManifest::new(
        "solve-opf",
        &serde_json::json!({ "case": case_path, "loads": loads, "warm_start": warm }),
        vec![],
        workers,
    );
    m.input(&resolve_case_path(case_path))?;
    for p in [loads, warm].into_iter().flatten() {
        m.input(p)?;
    }
    emit(&sols, out, m)
}

#[derive(Serialize)]
struct Prediction {
    s_pred: Vec<f64>,
    independent: Option<IndependentVars>,
    pf_converged: bool,
    feasibility: Option<deepsolve::powerflow::FeasibilityReport>,
    cost: Option<f64>,
    warm_start: Option<WarmStart>,
}

fn predict_cmd(
    model: &Path,
    case_path: &Path,
    loads: Option<&Path>,
    out: Option<&Path>,
    workers: usize,
) -> Result<(), CliError> {
    let case = load_case(case_path)?;
    let ckpt = domain!(Checkpoint::read(model))?;
    if ckpt.meta.case_name != case.name || ckpt.model.input_dim() != 2 * case.n_bus() {
        return Err(CliError::Domain(format!(
            "model {} was trained for case {}",
            model.display(),
            ckpt.meta.case_name
        )));
    }
    let rec = Reconstructor::new(&case, &ckpt.meta.spec, &ckpt.meta.dependent_mean);
    let mut preds = Vec::new();
    for l in read_loads(&case, loads)? {
        let s = domain!(ckpt.model.predict(&ckpt.meta.normalizer.apply(&l)))?;
        let mut p = Prediction {
            s_pred: s.clone(),
            independent: None,
            pf_converged: false,
            feasibility: None,
            cost: None,
            warm_start: None,
        };
        if let Some((iv, pf)) = rec.reconstruct(&s, &l) {
            p.pf_converged = pf.converged;
            p.feasibility = check_feasibility(&case, &pf, 1e-6).ok();
            p.cost = Some(case.total_cost(&pf.p_gen));
            p.warm_start = Some(WarmStart::from_reconstruction(&case, &iv, &pf));
            p.independent = Some(iv);
        }
        preds.push(p);
    }
    let mut m = RunManifest::new(
        "predict",
        &serde_json::json!({ "model": model, "case": case_path, "loads": loads }),
        vec![ckpt.meta.seed],
        workers,
    );
    m.input(&resolve_case_path(case_path))?;
    m.input(model)?;
    if let Some(p) = loads {
        m.input(p)?;
    }
    emit(&preds, out, m)
}

fn report_cmd(inputs: &[PathBuf], format: ReportFormat) -> Result<(), CliError> {
    let mut csv_header_done = false;
    for p in inputs {
        let report: EvalReport = read_json(p)?;
        match format {
            ReportFormat::Table => println!("{}", report.to_table()),
            ReportFormat::Csv => {
                let csv = report.to_csv();
                let mut lines = csv.lines();
                let header = lines.next().unwrap_or_default();
                if !csv_header_done {
                    println!("{header}");
                    csv_header_done = true;
                }
                for l in lines {
                    println!("{l}");
                }
            }
        }
    }
    Ok(())
}

fn convert_case(case_path: &Path, out: &Path, workers: usize) -> Result<(), CliError> {
    let case = load_case(case_path)?;
    std::fs::write(out, write_canonical(&case.to_raw())).map_err(io_err(out))?;
    let mut m =
        RunManifest::new("convert-case", &serde_json::json!({ "case": case_path, "out": out }), vec![], workers);
    m.input(&resolve_case_path(case_path))?;
    m.output(out);
    m.write(&with_suffix(out, ".manifest.json"))?;
    Ok(())
}
