//! `conmamba` command-line entry point.
//!
//! Progress goes to stderr; artifacts go to files in the run directory.
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.

mod args;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use conmamba::bench::{bench_csv, bench_scan};
use conmamba::config::{DatasetConfig, RunConfig};
use conmamba::data::{export_embeddings, load_checkpoint, save_checkpoint, save_dataset_dir, Split, DEFAULT_TRAIN_FRACTION};
use conmamba::error::Error;
use conmamba::gradcheck::{run_suite, SuiteOptions};
use conmamba::probe::{evaluate, train_probe, ProbeHead};
use conmamba::train::{resume, write_history_csv, TrainState};

use args::{BenchArgs, Cli, Command, Common, GradcheckArgs};

const ENCODER_CKPT: &str = "encoder.ckpt";
const PROBE_CKPT: &str = "probe.ckpt";
const HISTORY_CSV: &str = "loss_history.csv";

#[derive(Debug)]
enum CliError {
    /// Schema or value problem in the configuration; exit 2.
    Config(String),
    /// Anything that goes wrong while doing the work; exit 1.
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("i/o error at {}: {e}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("error: config: {}", one_line(&m));
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: runtime: {}", one_line(&m));
            ExitCode::from(1)
        }
    }
}

fn one_line(m: &str) -> String {
    m.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn init_threads(n: Option<usize>) -> CliResult<()> {
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Config("--device-threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Synth(c) => with_threads(&c, cmd_synth),
        Command::Pretrain(c) => with_threads(&c, cmd_pretrain),
        Command::Probe(c) => with_threads(&c, cmd_probe),
        Command::Eval(c) => with_threads(&c, cmd_eval),
        Command::Embed(c) => with_threads(&c, cmd_embed),
        Command::Gradcheck(a) => {
            init_threads(a.device_threads)?;
            cmd_gradcheck(&a)
        }
        Command::BenchScan(a) => {
            init_threads(a.device_threads)?;
            cmd_bench_scan(&a)
        }
    }
}

fn with_threads(c: &Common, f: fn(&Common) -> CliResult<()>) -> CliResult<()> {
    init_threads(c.device_threads)?;
    f(c)
}

fn read_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    RunConfig::from_json(&text).map_err(|e| {
        let at = e.path().to_string();
        let at = if at == "." { "<root>".to_string() } else { at };
        CliError::Config(format!("{} at `{at}`: {}", path.display(), e.inner()))
    })
}

/// Config file (or, for follow-up commands, the one echoed by `pretrain`),
/// then flag overrides, then validation. Returns the run directory too.
fn resolve(c: &Common, command: &str) -> CliResult<(RunConfig, PathBuf)> {
    let mut cfg = match (&c.config, &c.out) {
        (Some(p), _) => read_config(p)?,
        (None, Some(out)) if command != "pretrain" && out.join("pretrain.config.json").is_file() => {
            read_config(&out.join("pretrain.config.json"))?
        }
        _ => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.train.global_seed = s;
        if let DatasetConfig::Synthetic(spec) = &mut cfg.dataset {
            spec.seed = s;
        }
    }
    if let Some(d) = &c.data {
        cfg.dataset = DatasetConfig::Folder {
            root: d.display().to_string(),
            train_fraction: DEFAULT_TRAIN_FRACTION,
            split_seed: 0,
        };
    }
    if let Some(v) = c.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = c.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = c.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = c.tau {
        cfg.train.temperature = v;
    }
    if let Some(v) = c.margin {
        cfg.train.margin = v;
    }
    if c.no_inter_loss {
        cfg.train.inter_loss_enabled = false;
    }
    let dir = match (&c.out, &cfg.output_dir) {
        (Some(out), _) => out.clone(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => PathBuf::from("runs").join(format!(
            "{}-seed{}",
            chrono::Local::now().format("%Y%m%d-%H%M%S"),
            cfg.train.global_seed
        )),
    };
    cfg.output_dir = Some(dir.display().to_string());
    cfg.validate()?;

    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let echo = dir.join(format!("{command}.config.json"));
    std::fs::write(&echo, cfg.to_json()?).map_err(|e| io_err(&echo, e))?;
    log::info!("{command}: run directory {}", dir.display());
    Ok((cfg, dir))
}

fn config_value(cfg: &RunConfig) -> CliResult<serde_json::Value> {
    serde_json::to_value(cfg).map_err(|e| CliError::Runtime(e.to_string()))
}

fn cmd_synth(c: &Common) -> CliResult<()> {
    let (cfg, dir) = resolve(c, "synth")?;
    let DatasetConfig::Synthetic(spec) = &cfg.dataset else {
        return Err(CliError::Config("synth needs a synthetic dataset section, not a folder".into()));
    };
    let data = conmamba::data::generate_synthetic(spec)?;
    save_dataset_dir(&dir, &data)?;
    log::info!("synth: wrote {} samples in {} classes", data.len(), data.n_classes());
    Ok(())
}

fn load_encoder(dir: &Path) -> CliResult<(TrainState, conmamba::encoder::EncoderConfig)> {
    let path = dir.join(ENCODER_CKPT);
    if !path.is_file() {
        return Err(CliError::Runtime(format!(
            "missing checkpoint {}; run `conmamba pretrain` first",
            path.display()
        )));
    }
    Ok(TrainState::from_checkpoint(&load_checkpoint(&path)?)?)
}

fn cmd_pretrain(c: &Common) -> CliResult<()> {
    let (cfg, dir) = resolve(c, "pretrain")?;
    let data = cfg.load_dataset()?;
    let train = data.split(Split::Train);
    let ckpt_path = dir.join(ENCODER_CKPT);
    let mut state = if ckpt_path.is_file() {
        let (state, enc) = TrainState::from_checkpoint(&load_checkpoint(&ckpt_path)?)?;
        if enc != cfg.encoder {
            return Err(CliError::Runtime(format!(
                "{} was trained with a different encoder configuration",
                ckpt_path.display()
            )));
        }
        log::info!("pretrain: resuming at epoch {} step {}", state.epoch, state.step);
        state
    } else {
        TrainState::init(&cfg.encoder, &cfg.train)?
    };
    log::info!(
        "pretrain: {} training samples, {} epochs of batch {}",
        train.len(),
        cfg.train.epochs,
        cfg.train.batch_size
    );
    let echo = config_value(&cfg)?;
    let save = |s: &TrainState| -> conmamba::error::Result<()> {
        save_checkpoint(&s.to_checkpoint(&cfg.encoder, echo.clone())?, &ckpt_path)?;
        write_history_csv(&dir.join(HISTORY_CSV), &s.history)
    };
    let interval = cfg.train.checkpoint_interval;
    resume(&mut state, &cfg.train, &cfg.encoder, &cfg.augmentation, &train, |s| {
        if interval > 0 && s.epoch % interval == 0 {
            save(s)?;
        }
        Ok(())
    })?;
    save(&state)?;
    log::info!("pretrain: done after {} steps; checkpoint {}", state.step, ckpt_path.display());
    Ok(())
}

fn cmd_probe(c: &Common) -> CliResult<()> {
    let (cfg, dir) = resolve(c, "probe")?;
    let (state, enc) = load_encoder(&dir)?;
    let data = cfg.load_dataset()?;
    let head = train_probe(&state.params, &enc, &data.split(Split::Train), &cfg.probe)?;
    let path = dir.join(PROBE_CKPT);
    save_checkpoint(&head.to_checkpoint(&data.manifest.class_names, config_value(&cfg)?), &path)?;
    log::info!("probe: {} steps; head saved to {}", cfg.probe.steps, path.display());
    Ok(())
}

fn cmd_eval(c: &Common) -> CliResult<()> {
    let (cfg, dir) = resolve(c, "eval")?;
    let (state, enc) = load_encoder(&dir)?;
    let probe_path = dir.join(PROBE_CKPT);
    if !probe_path.is_file() {
        return Err(CliError::Runtime(format!(
            "missing checkpoint {}; run `conmamba probe` first",
            probe_path.display()
        )));
    }
    let (head, class_names) = ProbeHead::from_checkpoint(&load_checkpoint(&probe_path)?)?;
    let data = cfg.load_dataset()?;
    if data.manifest.class_names != class_names {
        return Err(CliError::Runtime(format!(
            "probe was trained on classes {class_names:?} but the dataset has {:?}",
            data.manifest.class_names
        )));
    }
    let report = evaluate(&head, &state.params, &enc, &data.split(Split::Test))?;
    let json = dir.join("metrics.json");
    std::fs::write(&json, report.to_json()?).map_err(|e| io_err(&json, e))?;
    let table = dir.join("metrics.txt");
    std::fs::write(&table, report.to_table(&class_names)).map_err(|e| io_err(&table, e))?;
    log::info!(
        "eval: accuracy {:.4}, macro-F1 {:.4}; metrics in {}",
        report.accuracy,
        report.macro_f1,
        json.display()
    );
    Ok(())
}

fn cmd_embed(c: &Common) -> CliResult<()> {
    let (cfg, dir) = resolve(c, "embed")?;
    let (state, enc) = load_encoder(&dir)?;
    let data = cfg.load_dataset()?;
    let path = dir.join("embeddings.csv");
    export_embeddings(&state.params, &enc, &data, &path)?;
    log::info!("embed: {} rows written to {}", data.len(), path.display());
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let results = run_suite(&SuiteOptions {
        trials: a.trials,
        seed: a.seed,
        include_model: !a.ops_only,
        inject_fault: a.inject_fault,
        ..SuiteOptions::default()
    })?;
    println!("component,max_rel_err,threshold,status");
    for r in &results {
        println!(
            "{},{:e},{:e},{}",
            r.name,
            r.max_rel_err,
            r.threshold,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        log::info!("gradcheck: all {} components within threshold", results.len());
        Ok(())
    } else {
        Err(CliError::Runtime(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn cmd_bench_scan(a: &BenchArgs) -> CliResult<()> {
    let rows = bench_scan(&a.lengths, a.repeats, a.seed)?;
    let csv = bench_csv(&rows);
    print!("{csv}");
    if let Some(path) = &a.out {
        std::fs::write(path, &csv).map_err(|e| io_err(path, e))?;
    }
    if let Some(bad) = rows.iter().find(|r| !(r.max_abs_diff < 1e-10)) {
        return Err(CliError::Runtime(format!(
            "parallel scan disagrees with sequential at L={} by {:e}",
            bad.len, bad.max_abs_diff
        )));
    }
    Ok(())
}
