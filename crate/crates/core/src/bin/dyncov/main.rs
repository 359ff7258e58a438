mod settings;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Arg, ArgMatches, Command};
use nalgebra::DMatrix;

use dyncov::covariance::{FdcmForestConfig, Stage};
use dyncov::dataset::{load_returns_csv, CsvLayout};
use dyncov::estimator::{EstimatorConfig, FittedMethod, MethodKind, MethodSpec};
use dyncov::forest::ForestConfig;
use dyncov::linalg::min_eigenvalue;
use dyncov::portfolio::{backtest, write_returns_csv, write_weights_csv, BacktestConfig};
use dyncov::simulation::{run_experiment, ExperimentConfig, ModelSpec};
use settings::{Invalid, Key, Settings, BACKTEST_KEYS, ESTIMATE_KEYS, ESTIMATOR_KEYS, SIMULATE_KEYS};

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Invalid> for Failure {
    fn from(e: Invalid) -> Self {
        Failure::Usage(e.0)
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn cli() -> Command {
    let layout = settings::layout_keys();
    Command::new("dyncov")
        .about("Forest-based dynamic covariance estimation")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("Flat key = value file; keys match long flag names"),
        )
        .arg(
            Arg::new("workers")
                .long("workers")
                .global(true)
                .value_name("N")
                .value_parser(clap::value_parser!(usize))
                .help("Worker threads [default: all cores]"),
        )
        .subcommand(settings::subcommand(
            "simulate",
            "Run replicated benchmark experiments",
            &[SIMULATE_KEYS, ESTIMATOR_KEYS],
        ))
        .subcommand(settings::subcommand(
            "estimate",
            "Fit on a training CSV and write covariance estimates at query points",
            &[ESTIMATE_KEYS, layout, ESTIMATOR_KEYS],
        ))
        .subcommand(settings::subcommand(
            "backtest",
            "Rolling out-of-sample minimum-variance backtest",
            &[BACKTEST_KEYS, layout, ESTIMATOR_KEYS],
        ))
}

fn all_keys() -> Vec<&'static str> {
    [SIMULATE_KEYS, ESTIMATE_KEYS, BACKTEST_KEYS, ESTIMATOR_KEYS, settings::layout_keys()]
        .iter()
        .flat_map(|g| g.iter().map(|k: &Key| k.name))
        .collect()
}

fn estimator_config(s: &Settings) -> Result<EstimatorConfig, Invalid> {
    let forest = ForestConfig {
        trees: s.get("trees")?,
        subsample: s.opt("subsample")?,
        k: s.get("k")?,
        omega: s.get("omega")?,
        pi: s.get("pi")?,
        mtry: s.opt("mtry")?,
        seed: s.get("seed")?,
    };
    Ok(EstimatorConfig {
        forests: FdcmForestConfig {
            forest,
            shared_trees: s.get("shared-trees")?,
        },
        cv_folds: s.get("cv-folds")?,
        grid_size: s.get("grid-size")?,
        lambda_mode: s.get("lambda-mode")?,
        c_n: s.opt("c-n")?,
        cv_trees: s.opt("cv-trees")?,
    })
}

fn layout(s: &Settings) -> Result<CsvLayout, Invalid> {
    Ok(CsvLayout {
        response_cols: s.list("response-cols"),
        covariate_cols: s.list("covariate-cols"),
        date_col: s.raw("date-col").map(str::to_string),
        lag: s.get("lag")?,
    })
}

fn methods(s: &Settings, key: &str) -> Result<Vec<MethodSpec>, Invalid> {
    let list = s.list(key);
    if list.is_empty() {
        return Err(Invalid(format!("--{key} is empty")));
    }
    list.iter()
        .map(|m| m.parse::<MethodSpec>().map_err(|e| Invalid(format!("--{key}: {e}"))))
        .collect()
}

fn out_dir(s: &Settings) -> Result<PathBuf, Failure> {
    let dir = PathBuf::from(s.required("out-dir")?);
    fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, header: &str, body: &[u8]) -> Result<(), Failure> {
    let mut f = fs::File::create(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    f.write_all(header.as_bytes())
        .and_then(|_| f.write_all(body))
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_simulate(s: &Settings) -> Result<(), Failure> {
    let model = ModelSpec {
        id: s.get("model")?,
        p: s.get("p")?,
        d: s.get("d")?,
        n: s.get("n")?,
    };
    let est = estimator_config(s)?;
    let config = ExperimentConfig::new(model, s.get("reps")?, methods(s, "methods")?, est, s.get("seed")?);
    config.validate().map_err(Invalid::from)?;
    config.estimator.forests.forest.validate(model.n, model.d).map_err(Invalid::from)?;
    let dir = out_dir(s)?;

    let start = Instant::now();
    let report = run_experiment(&config).map_err(runtime)?;
    let header = s.header("simulate");
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(runtime)?;
    write_file(&dir.join("report.csv"), &header, &csv)?;
    let mut per_rep = Vec::new();
    report.write_per_rep_csv(&mut per_rep).map_err(runtime)?;
    write_file(&dir.join("per_rep.csv"), &header, &per_rep)?;
    let table = report.table();
    write_file(&dir.join("table.txt"), &header, table.as_bytes())?;
    print!("{table}");

    for m in &report.methods {
        eprintln!("{}: {:.2}s", m.method, m.seconds);
    }
    eprintln!("total: {:.2}s", start.elapsed().as_secs_f64());
    if report.spectral_violations > 0 {
        return Err(Failure::Runtime(format!(
            "{} test points had spectral loss above Frobenius loss",
            report.spectral_violations
        )));
    }
    Ok(())
}

fn read_query_points(path: &Path, d: usize) -> Result<Vec<Vec<f64>>, Invalid> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Invalid(format!("query file {}: {e}", path.display())))?;
    let mut points = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Invalid(format!("query file {}: {e}", path.display())))?;
        let u: Vec<f64> = record
            .iter()
            .enumerate()
            .map(|(col, v)| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Invalid(format!("query row {}, column {}: `{v}` is not a number", row + 1, col + 1)))
            })
            .collect::<Result<_, _>>()?;
        if u.len() != d {
            return Err(Invalid(format!("query row {} has {} values; training data has d = {d}", row + 1, u.len())));
        }
        points.push(u);
    }
    if points.is_empty() {
        return Err(Invalid(format!("query file {} has no points", path.display())));
    }
    Ok(points)
}

fn matrix_csv(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

const PD_TOL: f64 = 1e-12;

fn cmd_estimate(s: &Settings) -> Result<(), Failure> {
    let method: MethodSpec = s.get("method")?;
    let stage: Stage = s.get("stage")?;
    let est = estimator_config(s)?;
    let train = load_returns_csv(Path::new(s.required("train")?), &layout(s)?).map_err(Invalid::from)?;
    let points = read_query_points(Path::new(s.required("query")?), train.d())?;
    if method.kind == MethodKind::Fdcm {
        est.forests.forest.validate(train.n(), train.d()).map_err(Invalid::from)?;
    }
    let dir = out_dir(s)?;

    let modified = method.modified || stage == Stage::PdCorrected;
    let fitted = FittedMethod::fit(method.kind, &train, &est).map_err(runtime)?;
    let header = s.header("estimate");
    let d = train.d();
    let mut manifest = String::from("point,file,stage,lambda,min_eigenvalue,positive_definite,correction_applied,delta_hat,c_n,note");
    for j in 1..=d {
        manifest.push_str(&format!(",u{j}"));
    }
    manifest.push('\n');
    for (k, u) in points.iter().enumerate() {
        let e = fitted.estimate(u, method.rule, modified).map_err(runtime)?;
        let matrix = match stage {
            Stage::Raw => &e.raw,
            Stage::Thresholded => &e.thresholded,
            Stage::PdCorrected => &e.corrected.as_ref().expect("correction requested").0,
        };
        let file = format!("sigma_{:04}.csv", k + 1);
        write_file(&dir.join(&file), &header, &matrix_csv(matrix))?;
        let mu = min_eigenvalue(matrix);
        // Numerically singular counts as not positive definite.
        let pd = mu > PD_TOL * matrix.amax();
        let (applied, delta_hat, c_n) = match (&e.corrected, stage) {
            (Some((_, c)), Stage::PdCorrected) => (c.applied.to_string(), c.delta_hat.to_string(), c.c_n.to_string()),
            _ => (String::new(), String::new(), String::new()),
        };
        let note = if !pd && stage != Stage::PdCorrected {
            format!("non-PD allowed at {} stage", stage.as_str())
        } else {
            String::new()
        };
        let coords: Vec<String> = u.iter().map(|v| v.to_string()).collect();
        manifest.push_str(&format!(
            "{},{file},{},{},{mu},{},{applied},{delta_hat},{c_n},{note},{}\n",
            k + 1,
            stage.as_str(),
            e.selection.lambda,
            pd,
            coords.join(",")
        ));
    }
    write_file(&dir.join("manifest.csv"), &header, manifest.as_bytes())?;
    eprintln!("wrote {} estimates to {}", points.len(), dir.display());
    Ok(())
}

fn cmd_backtest(s: &Settings) -> Result<(), Failure> {
    let method: MethodSpec = s.get("method")?;
    if !method.modified && method.kind != MethodKind::Static {
        return Err(Failure::Usage(format!(
            "method {method} is not PD-corrected; backtests need a modified method (prefix m) or static"
        )));
    }
    let est = estimator_config(s)?;
    let panel = load_returns_csv(Path::new(s.required("panel")?), &layout(s)?).map_err(Invalid::from)?;
    let config = BacktestConfig {
        window: s.get("window")?,
        refit_every: s.get("refit-every")?,
    };
    if config.window + 2 > panel.n() {
        return Err(Failure::Usage(format!(
            "window {} leaves no out-of-sample days in a panel of {} rows (need at least window + 2)",
            config.window,
            panel.n()
        )));
    }
    if method.kind == MethodKind::Fdcm {
        est.forests.forest.validate(config.window, panel.d()).map_err(Invalid::from)?;
    }
    let dir = out_dir(s)?;

    let start = Instant::now();
    let result = backtest(&panel, &method, &est, config).map_err(runtime)?;
    let header = s.header("backtest");
    let mut returns = Vec::new();
    write_returns_csv(&result, &mut returns).map_err(runtime)?;
    write_file(&dir.join("returns.csv"), &header, &returns)?;
    let mut weights = Vec::new();
    write_weights_csv(&result, panel.p(), &mut weights).map_err(runtime)?;
    write_file(&dir.join("weights.csv"), &header, &weights)?;
    let summary = format!("{}\n", result.performance.summary());
    write_file(&dir.join("summary.txt"), &header, summary.as_bytes())?;
    print!("{summary}");
    eprintln!("backtest: {} days in {:.2}s", result.returns.len(), start.elapsed().as_secs_f64());
    Ok(())
}

fn dispatch(matches: &ArgMatches) -> Result<(), Failure> {
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let file = match sub.get_one::<String>("config") {
        Some(path) => settings::read_config_file(Path::new(path))?,
        None => Default::default(),
    };
    if let Some(&n) = sub.get_one::<usize>("workers") {
        if n == 0 {
            return Err(Failure::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(runtime)?;
    }
    let keys = all_keys();
    match name {
        "simulate" => cmd_simulate(&Settings::resolve(sub, &[SIMULATE_KEYS, ESTIMATOR_KEYS], &file, &keys)?),
        "estimate" => cmd_estimate(&Settings::resolve(
            sub,
            &[ESTIMATE_KEYS, settings::layout_keys(), ESTIMATOR_KEYS],
            &file,
            &keys,
        )?),
        "backtest" => cmd_backtest(&Settings::resolve(
            sub,
            &[BACKTEST_KEYS, settings::layout_keys(), ESTIMATOR_KEYS],
            &file,
            &keys,
        )?),
        other => Err(Failure::Usage(format!("unknown subcommand {other}"))),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `dyncov <command> --help` for usage");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
