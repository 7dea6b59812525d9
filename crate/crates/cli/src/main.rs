use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use relnet::bench::{self, BenchCase};
use relnet::checkpoint;
use relnet::config::{apply_override, from_value, load_run_config};
use relnet::gradsuite;
use relnet::synth::{gen_grounding_fixture, write_fixture_jsonl, Dataset};
use relnet::train::{RunConfig, Trainer};

/// Environment variable naming the default root for output directories.
const OUT_ROOT_ENV: &str = "RELNET_OUT_DIR";
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "relnet", version, about = "Train, evaluate and benchmark relational reasoning models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to $RELNET_OUT_DIR/<name> or runs/<name>.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set optim.lr=0.003`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model, writing a checkpoint and a metrics log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report loss and accuracy of a checkpoint (or a fresh model) over a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "config")]
        checkpoint: Option<PathBuf>,
        /// Dataset file written by `gen-data`; regenerated from the config otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
    },
    /// Time 2-level against 3-level visual streams and write a CSV.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient checks over every block.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Restrict to blocks whose name starts with this prefix. Repeatable.
        #[arg(long)]
        block: Vec<String>,
    },
    /// Write the dataset (and grounding priors for scene tasks) as JSON lines.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Split {
    Train,
    Val,
    All,
}

fn out_dir(common: &Common, name: &str) -> PathBuf {
    common.out_dir.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(name)
    })
}

fn config_stem(common: &Common, fallback: &str) -> String {
    common
        .config
        .as_deref()
        .and_then(Path::file_stem)
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| fallback.to_string())
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let path = common.config.as_deref().context("--config is required")?;
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    load_run_config(path, &overrides).with_context(|| format!("loading {}", path.display()))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(common: &Common, resume: Option<&Path>) -> Result<()> {
    let cfg = run_config(common)?;
    let dir = out_dir(common, &config_stem(common, "train"));
    fs::create_dir_all(&dir)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    if let Some(ckpt) = resume {
        checkpoint::restore(ckpt, &mut trainer)?;
        eprintln!("resumed from {} at epoch {}", ckpt.display(), trainer.epoch);
    }
    write_json(&dir.join("config.json"), &cfg)?;
    let mut log = BufWriter::new(
        File::options().create(true).append(true).open(dir.join("metrics.jsonl")).context("opening metrics log")?,
    );
    writeln!(log, "{}", json!({"kind": "run", "seed": cfg.seed, "start_epoch": trainer.epoch, "config": cfg}))?;
    log.flush()?;
    let ckpt_dir = dir.join("checkpoint");
    let seed = cfg.seed;
    while trainer.epoch < cfg.epochs {
        let m = trainer.train_epoch()?;
        let mut line = serde_json::to_value(&m)?;
        line["kind"] = json!("epoch");
        line["seed"] = json!(seed);
        writeln!(log, "{line}")?;
        log.flush()?;
        checkpoint::save(&ckpt_dir, &trainer)?;
        eprintln!(
            "epoch {:>3}  lr {:.2e}  train loss {:.4} acc {:.3}  val loss {:.4} acc {:.3}",
            m.epoch, m.lr, m.train_loss, m.train_accuracy, m.val.loss, m.val.accuracy
        );
    }
    if cfg.epochs == 0 || !ckpt_dir.exists() {
        checkpoint::save(&ckpt_dir, &trainer)?;
    }
    println!("{}", dir.display());
    Ok(())
}

fn eval(common: &Common, ckpt: Option<&Path>, data: Option<&Path>, split: Split) -> Result<()> {
    let dataset = data
        .map(|p| -> Result<Dataset> {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            Ok(Dataset::read_jsonl(BufReader::new(f))?)
        })
        .transpose()?;
    let trainer = match ckpt {
        Some(dir) => checkpoint::load(dir, dataset)?,
        None => {
            let cfg = run_config(common)?;
            match dataset {
                Some(d) => Trainer::with_data(cfg, d)?,
                None => Trainer::new(cfg)?,
            }
        }
    };
    let ids: Vec<usize> = match split {
        Split::Train => trainer.train_ids.clone(),
        Split::Val => trainer.val_ids.clone(),
        Split::All => (0..trainer.data.len()).collect(),
    };
    let metrics = trainer.evaluate(&ids)?;
    let report = json!({
        "seed": trainer.cfg.seed,
        "epoch": trainer.epoch,
        "split": split,
        "checkpoint": ckpt.map(|p| p.display().to_string()),
        "metrics": metrics,
        "config": trainer.cfg,
    });
    if common.out_dir.is_some() {
        let dir = out_dir(common, "eval");
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("eval.json"), &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn default_reps() -> usize {
    7
}

fn default_warmup() -> usize {
    2
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchConfig {
    #[serde(default)]
    cases: Vec<BenchCase>,
    #[serde(default = "default_reps")]
    reps: usize,
    #[serde(default = "default_warmup")]
    warmup: usize,
}

/// Loads a JSON config of any shape, applying `--set` overrides.
fn load_value<T: for<'de> Deserialize<'de>>(common: &Common, empty: Value) -> Result<T> {
    let mut v = match &common.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => empty,
    };
    for o in &common.set {
        apply_override(&mut v, o)?;
    }
    Ok(from_value(v)?)
}

fn run_bench(common: &Common) -> Result<()> {
    let mut cfg: BenchConfig = load_value(common, json!({}))?;
    if cfg.cases.is_empty() {
        cfg.cases = bench::default_cases(24, 8, 32, (4, 6));
    }
    let rows = bench::measure_scaling(&cfg.cases, cfg.reps, cfg.warmup)?;
    let csv = bench::to_csv(&rows);
    let dir = out_dir(common, &config_stem(common, "bench"));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("bench.csv"), &csv)?;
    // timings use fixed internal seeds
    write_json(&dir.join("bench.json"), &json!({"seed": 0, "config": cfg, "rows": rows}))?;
    print!("{csv}");
    Ok(())
}

fn gradcheck(common: &Common, instances: usize, blocks: &[String]) -> Result<bool> {
    let seed = common.seed.unwrap_or(0);
    let reports = gradsuite::run(instances, seed, blocks)?;
    if reports.is_empty() {
        bail!("no block matches {blocks:?}; blocks are {:?}", gradsuite::BLOCKS);
    }
    let ok = reports.iter().all(|r| r.max_rel_err < GRADCHECK_TOLERANCE);
    for r in &reports {
        let mark = if r.max_rel_err < GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
        println!("{:<32} {:>3} instances  max rel err {:.3e}  {mark}", r.block, r.instances, r.max_rel_err);
    }
    let dir = out_dir(common, "gradcheck");
    fs::create_dir_all(&dir)?;
    let report = json!({
        "seed": seed,
        "config": {"instances": instances, "blocks": blocks, "epsilon": gradsuite::EPSILON, "tolerance": GRADCHECK_TOLERANCE},
        "passed": ok,
        "blocks": reports,
    });
    write_json(&dir.join("gradcheck.json"), &report)?;
    Ok(ok)
}

fn gen_data(common: &Common) -> Result<()> {
    let path = common.config.as_deref().context("--config is required")?;
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("data.seed={seed}"));
    }
    let cfg = load_run_config(path, &overrides)?;
    let data = Dataset::generate(&cfg.data)?;
    let dir = out_dir(common, &config_stem(common, "data"));
    fs::create_dir_all(&dir)?;
    let mut w = BufWriter::new(File::create(dir.join("dataset.jsonl"))?);
    data.write_jsonl(&mut w)?;
    w.flush()?;
    if let Dataset::Scene(task) = &data {
        let mut w = BufWriter::new(File::create(dir.join("grounding.jsonl"))?);
        write_fixture_jsonl(&gen_grounding_fixture(task)?, &mut w)?;
        w.flush()?;
    }
    println!("{}", dir.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train { common, resume } => train(&common, resume.as_deref()),
        Cmd::Eval { common, checkpoint, data, split } => eval(&common, checkpoint.as_deref(), data.as_deref(), split),
        Cmd::Bench { common } => run_bench(&common),
        Cmd::Gradcheck { common, instances, block } => {
            if !gradcheck(&common, instances, &block)? {
                std::process::exit(1);
            }
            Ok(())
        }
        Cmd::GenData { common } => gen_data(&common),
    }
}
