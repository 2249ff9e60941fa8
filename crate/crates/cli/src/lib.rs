//! The `mode` command: gen | train | fit | score | eval | bench.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use mode_core::pipeline::{self, AccuracyInputs, EvalOutputs, GenOutputs};
use mode_core::{load_features, Error};

pub use config::{ConfigError, RunConfig, KEYS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Core(e) => match e {
                Error::Contract(_) => EXIT_CONFIG,
                Error::Io { .. } | Error::Format { .. } | Error::Corrupt { .. } | Error::Validation(_) => EXIT_DATA,
                Error::Numeric(_) | Error::Normalization(_) => EXIT_NUMERIC,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

const VERBS: [(&str, &str); 6] = [
    ("gen", "write synthetic train / ID test / OOD test features"),
    ("train", "train a model and write its loss history"),
    ("fit", "build the representation bank from training features"),
    ("score", "score ID (and OOD) test features against the bank"),
    ("eval", "compute FPR at the target TPR, AUROC and ID accuracy"),
    ("bench", "time scoring across bank sizes"),
];

pub fn command() -> Command {
    let mut cmd = Command::new("mode")
        .about("Cross-attention contrastive training and multi-scale k-NN OOD detection")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .global(true)
                .help("key = value configuration file"),
        )
        .arg(
            Arg::new("out")
                .long("out")
                .value_name("DIR")
                .global(true)
                .help("output directory; relative paths resolve against it [default: .]"),
        )
        .arg(
            Arg::new("threads")
                .long("threads")
                .value_name("N")
                .value_parser(clap::value_parser!(usize))
                .global(true)
                .help("worker threads for scoring"),
        );
    for (key, default, help) in KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(config::flag_name(key))
                .value_name("VALUE")
                .action(ArgAction::Set)
                .global(true)
                .help(format!("{help} [default: {default}]")),
        );
    }
    for (name, about) in VERBS {
        cmd = cmd.subcommand(Command::new(name).about(about));
    }
    cmd
}

fn resolve(m: &ArgMatches) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = m.get_one::<String>("config") {
        cfg.apply_file(Path::new(p))?;
    }
    for (key, _, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    let out = PathBuf::from(m.get_one::<String>("out").map(String::as_str).unwrap_or("."));
    Ok((cfg, out))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Core(Error::io(path, e))
}

/// Runs one verb; returns the lines printed on success.
pub fn execute(verb: &str, cfg: &RunConfig, out: &Path) -> Result<Vec<String>, CliError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let dump = out.join(format!("resolved_{verb}.cfg"));
    std::fs::write(&dump, cfg.dump()).map_err(io_err(&dump))?;
    let mut lines = Vec::new();
    match verb {
        "gen" => {
            let spec = cfg.synth_spec()?;
            let paths = GenOutputs {
                train: cfg.required_path("train", out)?,
                id_test: cfg.required_path("id_test", out)?,
                ood_test: cfg.required_path("ood_test", out)?,
            };
            pipeline::run_gen(&spec, &paths)?;
            for (name, p) in [("train", &paths.train), ("id_test", &paths.id_test), ("ood_test", &paths.ood_test)] {
                let d = load_features::<f64>(p)?;
                let s = d.shape();
                lines.push(format!(
                    "{name}: {} maps of {}x{}x{}, {} classes -> {}",
                    d.len(),
                    s.height,
                    s.width,
                    s.channels,
                    d.class_count(),
                    p.display()
                ));
            }
        }
        "train" => {
            let tc = cfg.train_config()?;
            let model_out = cfg.required_path("model", out)?;
            let loss_out = cfg.required_path("loss", out)?;
            let init = cfg.path("init_model", out);
            let m = pipeline::run_train(&cfg.required_path("train", out)?, &tc, init.as_deref(), &model_out, &loss_out)?;
            let (raw, e, h) = m.dims();
            lines.push(format!("mode {} epochs {} dims {raw}->{e}, heads {h}", tc.mode, m.loss_history.len()));
            if let (Some(first), Some(last)) = (m.loss_history.first(), m.loss_history.last()) {
                lines.push(format!("loss first {first:.6} last {last:.6}"));
            }
            lines.push(format!("model -> {}", model_out.display()));
        }
        "fit" => {
            let bank_out = cfg.required_path("bank", out)?;
            let model = cfg.encoder_model(out)?;
            let bank = pipeline::run_fit(
                &cfg.required_path("train", out)?,
                model.as_deref(),
                cfg.scale_mode()?,
                cfg.get("alpha")?,
                cfg.get("seed")?,
                &bank_out,
            )?;
            lines.push(format!("bank: {} rows of dim {} -> {}", bank.len(), bank.dim(), bank_out.display()));
        }
        "score" => {
            let scores_out = cfg.required_path("scores", out)?;
            let model = cfg.encoder_model(out)?;
            let res = pipeline::run_score(
                &cfg.required_path("id_test", out)?,
                cfg.path("ood_test", out).as_deref(),
                model.as_deref(),
                &cfg.required_path("bank", out)?,
                cfg.get("k")?,
                cfg.scale_mode()?,
                cfg.get("tpr")?,
                &scores_out,
            )?;
            lines.push(format!("epsilon {}", res.epsilon));
            lines.push(format!("{} rows -> {}", res.rows.len(), scores_out.display()));
        }
        "eval" => {
            let outputs = EvalOutputs {
                report: cfg.required_path("report", out)?,
                csv: cfg.required_path("report_csv", out)?,
                roc: cfg.required_path("roc", out)?,
            };
            let train = cfg.path("train", out);
            let id_test = cfg.path("id_test", out);
            let model = cfg.encoder_model(out)?;
            let acc = match (&train, &id_test) {
                (Some(t), Some(i)) if t.exists() && i.exists() => Some(AccuracyInputs {
                    train: t,
                    id_test: i,
                    model: model.as_deref(),
                }),
                _ => None,
            };
            let report = pipeline::run_eval(&cfg.required_path("scores", out)?, acc, &outputs)?;
            lines.extend(report.to_string().lines().map(str::to_string));
        }
        "bench" => {
            let bench_out = cfg.required_path("bench_out", out)?;
            let model = cfg.encoder_model(out)?;
            let res = pipeline::run_bench(
                &cfg.required_path("train", out)?,
                &cfg.required_path("id_test", out)?,
                model.as_deref(),
                cfg.scale_mode()?,
                cfg.get("seed")?,
                &bench_out,
            )?;
            for r in &res.rows {
                lines.push(format!(
                    "{} alpha={} k={} rows={} {:.4} ms/image",
                    r.method, r.alpha, r.k, r.bank_rows, r.ms_per_image
                ));
            }
            for w in &res.warnings {
                lines.push(format!("warning: {w}"));
            }
        }
        other => return Err(ConfigError(format!("unknown verb {other:?}")).into()),
    }
    Ok(lines)
}

/// Parses `args` (program name first), runs, prints, and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (verb, sub) = matches.subcommand().expect("subcommand required");
    let result = (|| {
        if let Some(&n) = sub.get_one::<usize>("threads") {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| ConfigError(format!("cannot configure {n} threads: {e}")))?;
        }
        let (cfg, out) = resolve(sub)?;
        execute(verb, &cfg, &out)
    })();
    match result {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("mode {verb}: {e}");
            e.exit_code()
        }
    }
}
