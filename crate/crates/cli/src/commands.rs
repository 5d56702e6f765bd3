use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use branchlora::analysis::{
    efficiency_report, expert_similarity, expert_snapshots, vectors_csv, EfficiencyReport,
};
use branchlora::checkpoint;
use branchlora::config::ExperimentConfig;
use branchlora::harness::{run_experiment, ExperimentReport, Method, Model, TimingReport};
use branchlora::parallel::Parallelism;
use branchlora::Error;
use serde_json::json;

pub const OUTPUT_DIR_ENV: &str = "BRANCHLORA_OUTPUT_DIR";
const DEFAULT_OUTPUT_DIR: &str = "branchlora-out";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Schema(String),
    Io(String),
    Runtime(String),
}

impl CliError {
    fn kind(&self) -> (&'static str, u8, &str) {
        match self {
            CliError::Usage(m) => ("usage", 2, m),
            CliError::Config(m) => ("config", 2, m),
            CliError::Schema(m) => ("schema", 2, m),
            CliError::Io(m) => ("io", 1, m),
            CliError::Runtime(m) => ("runtime", 1, m),
        }
    }

    /// Prints `error[kind]: message` on one line and returns the exit code.
    pub fn report(&self) -> ExitCode {
        let (kind, code, msg) = self.kind();
        let line = msg.split_whitespace().collect::<Vec<_>>().join(" ");
        eprintln!("error[{kind}]: {line}");
        ExitCode::from(code)
    }

    fn from_core(e: Error, schema: bool) -> Self {
        match e {
            Error::Config { .. } if schema => CliError::Schema(e.to_string()),
            Error::Config { .. } => CliError::Config(e.to_string()),
            Error::Io(_) => CliError::Io(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn core<T>(r: branchlora::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::from_core(e, false))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn resolve_out_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| {
        std::env::var_os(OUTPUT_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    })
    .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
    .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

fn snapshot_task_index(method: Method, position: usize, tasks: usize) -> usize {
    match method {
        Method::ZeroShot | Method::MultiTask => tasks - 1,
        _ => position,
    }
}

pub fn run(
    config: Option<&Path>,
    seeds: &[u64],
    jobs: Option<usize>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let mut cfg = match config {
        Some(p) => core(ExperimentConfig::load(p))?,
        None => ExperimentConfig::default(),
    };
    if !seeds.is_empty() {
        let mut unique: Vec<u64> = Vec::new();
        for &s in seeds {
            if !unique.contains(&s) {
                unique.push(s);
            }
        }
        cfg.seeds = unique;
    }
    core(cfg.validate())?;
    if jobs == Some(0) {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let out_dir = resolve_out_dir(out, &cfg);
    let par = Parallelism::from_jobs(jobs);

    let output = core(run_experiment(&cfg, par))?;
    let efficiency = core(efficiency_report(
        &cfg,
        &cfg.methods,
        cfg.seeds[0],
        cfg.timing_batches,
    ))?;

    create_dir(&out_dir)?;
    let report = &output.report;
    write(&out_dir.join("report.json"), report.to_json())?;
    write(&out_dir.join("report.csv"), core(report.to_csv())?)?;
    write(&out_dir.join("config.json"), cfg.to_json())?;
    let ledgers: Vec<_> = report
        .seeds
        .iter()
        .flat_map(|s| {
            s.methods.iter().filter_map(move |m| {
                m.freeze_ledger
                    .as_ref()
                    .map(|l| json!({ "seed": s.seed, "ledger": l }))
            })
        })
        .collect();
    write(
        &out_dir.join("ledger.json"),
        pretty(&json!({ "seeds": ledgers }))?,
    )?;
    let timings = json!({ "observed": output.timings(), "efficiency": efficiency });
    write(&out_dir.join("timings.json"), pretty(&timings)?)?;

    let tasks = cfg.stream.tasks;
    for run in &output.runs {
        for (pos, snap) in run.snapshots.iter().enumerate() {
            let idx = snapshot_task_index(run.report.method, pos, tasks);
            let dir = out_dir
                .join("checkpoints")
                .join(run.seed.to_string())
                .join(run.report.method.name())
                .join(format!("task_{idx}"));
            core(checkpoint::save(snap, idx, &dir))?;
        }
    }

    print!("{}", report.render_table());
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn pretty(v: &serde_json::Value) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))
}

fn numbered_dirs(dir: &Path, prefix: &str) -> CliResult<Vec<(u64, PathBuf)>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(_) => return Ok(Vec::new()),
    };
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(n) = name
            .strip_prefix(prefix)
            .and_then(|s| s.parse::<u64>().ok())
        {
            if entry.path().is_dir() {
                out.push((n, entry.path()));
            }
        }
    }
    out.sort_by_key(|(n, _)| *n);
    Ok(out)
}

pub fn analyze(dir: &Path, out: Option<&Path>) -> CliResult<()> {
    let seeds = numbered_dirs(&dir.join("checkpoints"), "")?;
    let mut per_seed = Vec::new();
    let mut margins = Vec::new();
    let mut vectors = String::new();
    for (seed, seed_dir) in &seeds {
        let tasks = numbered_dirs(&seed_dir.join(Method::MoeLora.name()), "task_")?;
        if tasks.is_empty() {
            continue;
        }
        let models: Vec<Model> = tasks
            .iter()
            .map(|(_, p)| core(checkpoint::load(p)).map(|(m, _)| m))
            .collect::<CliResult<_>>()?;
        let snaps = core(expert_snapshots(&models))?;
        let sim = core(expert_similarity(&snaps))?;
        if let Some(m) = sim.pooled.margin {
            margins.push(m);
        }
        let csv = core(vectors_csv(&snaps, *seed))?;
        if vectors.is_empty() {
            vectors.push_str(&csv);
        } else {
            vectors.extend(csv.lines().skip(1).map(|l| format!("{l}\n")));
        }
        per_seed.push(json!({ "seed": seed, "similarity": sim }));
    }
    if per_seed.is_empty() {
        return Err(CliError::Runtime(format!(
            "no MoELoRA snapshots under {}",
            dir.join("checkpoints").display()
        )));
    }
    let timings_path = dir.join("timings.json");
    let timings: serde_json::Value = serde_json::from_str(&read(&timings_path)?)
        .map_err(|e| CliError::Schema(format!("{}: {e}", timings_path.display())))?;
    let efficiency: EfficiencyReport = serde_json::from_value(timings["efficiency"].clone())
        .map_err(|e| CliError::Schema(format!("{}: efficiency: {e}", timings_path.display())))?;
    let _observed: TimingReport = serde_json::from_value(timings["observed"].clone())
        .map_err(|e| CliError::Schema(format!("{}: observed: {e}", timings_path.display())))?;

    margins.sort_by(|a, b| a.partial_cmp(b).expect("finite margin"));
    let median = match margins.len() {
        0 => None,
        n if n % 2 == 1 => Some(margins[n / 2]),
        n => Some(0.5 * (margins[n / 2 - 1] + margins[n / 2])),
    };
    let similarity = json!({ "median_margin": median, "seeds": per_seed });
    let efficiency_csv = core(efficiency.to_csv())?;

    let out_dir = out.unwrap_or(dir);
    create_dir(out_dir)?;
    write(&out_dir.join("similarity.json"), pretty(&similarity)?)?;
    write(&out_dir.join("efficiency.csv"), efficiency_csv)?;
    write(&out_dir.join("vectors.csv"), vectors)?;
    match median {
        Some(m) => println!("median A/B similarity margin {m:.6}"),
        None => println!("median A/B similarity margin unavailable"),
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

pub fn report(path: &Path, out: Option<&Path>) -> CliResult<()> {
    let text = read(path)?;
    let report = ExperimentReport::from_json(&text).map_err(|e| CliError::from_core(e, true))?;
    let csv = core(report.taskwise_maa_csv())?;
    let out_dir = match out {
        Some(o) => o.to_path_buf(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    if !out_dir.as_os_str().is_empty() {
        create_dir(&out_dir)?;
    }
    write(&out_dir.join("taskwise_maa.csv"), csv)?;
    print!("{}", report.render_table());
    Ok(())
}
