use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use kalahash_core::dataio::{
    generate_synthetic, make_shot_split, read_verified, write_with_sidecar, ShotSplit, SynthSpec,
};
use kalahash_core::encoder::Target;
use kalahash_core::hashing::LossWeights;
use kalahash_core::model::EarlyStop;
use kalahash_core::pipeline::{
    evaluate, measure_overhead, sweep, train_on_split, Dataset, SilhouetteOn, TimingSetup,
};
use kalahash_core::{CodesFile, Error, HashModel, Manifest, PackedCodes, TrainConfig};

const STORE: &str = "store.khs";
const MANIFEST: &str = "manifest.json";
const CHECKPOINT: &str = "checkpoint.khs";
const CONFIG: &str = "checkpoint.json";
const LOG: &str = "train_log.jsonl";
const SPLIT: &str = "split.json";

#[derive(Parser)]
#[command(
    name = "kalahash",
    version,
    about = "Few-shot hashing with knowledge-anchored adapters"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic store and manifest.
    Synth(SynthArgs),
    /// Draw an N-shot split and train a model on it.
    Train(TrainCmd),
    /// Encode the query and gallery records of a trained split.
    Encode(EncodeArgs),
    /// Score a codes file against a manifest's labels.
    Eval(EvalArgs),
    /// Per-image encode time with and without adapters.
    BenchTiming(TimingArgs),
    /// mAP mean and standard deviation over a shots × seeds grid.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 0.1)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    query_per_class: usize,
    #[arg(long, default_value_t = 21)]
    database_per_class: usize,
    #[arg(long, default_value_t = 8)]
    tokens: usize,
    /// Token and knowledge width.
    #[arg(long, default_value_t = 32)]
    dim: usize,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 16)]
    bits: usize,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 3.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, default_value_t = 1)]
    rank: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Projections to adapt, e.g. `kv` or `qkvo`.
    #[arg(long, default_value = "kv")]
    clora_targets: String,
    #[arg(long)]
    no_clora: bool,
    #[arg(long)]
    no_kiddo: bool,
    /// Keep the knowledge projection used for selection at its initial value.
    #[arg(long)]
    freeze_f: bool,
    /// Leave token 0 out of the selection query.
    #[arg(long)]
    skip_class_token: bool,
    /// Stop after 20 epochs without relative improvement above 1e-4.
    #[arg(long)]
    early_stop: bool,
}

impl TrainArgs {
    fn config(&self, seed: u64) -> Result<TrainConfig, Error> {
        let cfg = TrainConfig {
            weights: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
            },
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            bits: self.bits,
            seed,
            eta: self.eta,
            rank: self.rank,
            targets: Target::parse_list(&self.clora_targets)?,
            clora: !self.no_clora,
            kiddo: !self.no_kiddo,
            early_stop: self.early_stop.then(EarlyStop::default),
            skip_class_token: self.skip_class_token,
            train_f: !self.freeze_f,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for the checkpoint, config, log and split.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    /// Seeds both the split and the model.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SilhouetteArg {
    Query,
    Gallery,
    None,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// mAP cut-off; defaults to the manifest's value or the gallery size.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum, default_value_t = SilhouetteArg::Query)]
    silhouette: SilhouetteArg,
    /// Also write the precision-recall curve as CSV.
    #[arg(long)]
    pr_csv: Option<PathBuf>,
}

#[derive(Args)]
struct TimingArgs {
    #[arg(long, default_value_t = 50)]
    tokens: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    knowledge_dim: usize,
    /// Knowledge pool sizes to measure.
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
    pools: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 16)]
    bits: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    shots: Vec<usize>,
    /// Seeds 0..n, each used for both split and model.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    let out = match cli.cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Encode(a) => encode(a),
        Cmd::Eval(a) => eval(a),
        Cmd::BenchTiming(a) => bench_timing(a),
        Cmd::Sweep(a) => sweep_cmd(a),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(e.kind(), &e.to_string());
            ExitCode::from(if e.is_not_found() { 2 } else { 1 })
        }
    }
}

fn report(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": kind, "message": message }));
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn synth(a: SynthArgs) -> Result<(), Error> {
    let spec = SynthSpec {
        classes: a.classes,
        spread: a.spread,
        seed: a.seed,
        query_per_class: a.query_per_class,
        database_per_class: a.database_per_class,
        tokens: a.tokens,
        token_dim: a.dim,
        knowledge_dim: a.dim,
        feature_dim: a.dim,
        hidden: 2 * a.dim,
        ..SynthSpec::default()
    };
    let (store, manifest) = generate_synthetic(&spec)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    write_with_sidecar(&store, a.out.join(STORE))?;
    manifest.write(a.out.join(MANIFEST))?;
    println!(
        "{}",
        json!({
            "store": a.out.join(STORE),
            "manifest": a.out.join(MANIFEST),
            "records": manifest.records.len(),
            "classes": manifest.classes(),
        })
    );
    Ok(())
}

fn train_cmd(a: TrainCmd) -> Result<(), Error> {
    let cfg = a.train.config(a.seed)?;
    let ds = Dataset::load(&a.data.store, &a.data.manifest)?;
    let split = make_shot_split(&ds.manifest, a.shots, a.seed)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;

    let log_path = a.out.join(LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let mut log_err = None;
    let (model, state) = train_on_split(&ds, &split, &cfg, |e| {
        log::info!("epoch {} total {:.4} flips {}", e.epoch, e.total, e.flips);
        if log_err.is_none() {
            let line = serde_json::to_string(e).expect("epoch log serializes");
            if let Err(err) = writeln!(log, "{line}") {
                log_err = Some(err);
            }
        }
    })?;
    if let Some(err) = log_err {
        return Err(io_err(&log_path)(err));
    }
    log.flush().map_err(io_err(&log_path))?;

    write_with_sidecar(&model.checkpoint()?, a.out.join(CHECKPOINT))?;
    write_json(&a.out.join(CONFIG), &cfg)?;
    write_json(&a.out.join(SPLIT), &split)?;
    let last = state.history.last();
    println!(
        "{}",
        json!({
            "out": a.out,
            "epochs": state.epoch,
            "stopped_early": state.stopped_early,
            "train": split.train_ids.len(),
            "final_loss": last.map(|l| l.total),
        })
    );
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<(), Error> {
    let cfg: TrainConfig = read_json(&a.checkpoint.join(CONFIG))?;
    let split: ShotSplit = read_json(&a.checkpoint.join(SPLIT))?;
    let ckpt = read_verified(a.checkpoint.join(CHECKPOINT))?;
    let ds = Dataset::load(&a.data.store, &a.data.manifest)?;
    let model = HashModel::from_checkpoint(ds.block()?, ds.pool()?, &cfg, &ckpt)?;
    let q = PackedCodes::from_signs(&model.encode(&ds.tokens(&split.query_ids)?)?);
    let g = PackedCodes::from_signs(&model.encode(&ds.tokens(&split.gallery_ids)?)?);
    CodesFile::new(&split.query_ids, &q, &split.gallery_ids, &g)?.write(&a.out)?;
    println!(
        "{}",
        json!({ "out": a.out, "bits": q.bits(), "queries": q.len(), "gallery": g.len() })
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    let codes = CodesFile::read(&a.codes)?;
    let manifest = Manifest::read(&a.manifest)?;
    let q = codes.packed(&codes.query_ids)?;
    let g = codes.packed(&codes.gallery_ids)?;
    let k =
        a.k.or(manifest.map_k)
            .unwrap_or(codes.gallery_ids.len())
            .max(1);
    let sil = match a.silhouette {
        SilhouetteArg::Query => SilhouetteOn::Query,
        SilhouetteArg::Gallery => SilhouetteOn::Gallery,
        SilhouetteArg::None => SilhouetteOn::None,
    };
    let report = evaluate(
        &manifest,
        &codes.query_ids,
        &q,
        &codes.gallery_ids,
        &g,
        k,
        sil,
    )?;
    if let Some(path) = &a.pr_csv {
        fs::write(path, report.pr_csv()).map_err(io_err(path))?;
    }
    let mut value = serde_json::to_value(&report)?;
    value["map_at_k_percent"] = json!(report.map_at_k * 100.0);
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn bench_timing(a: TimingArgs) -> Result<(), Error> {
    if a.pools.is_empty() {
        return Err(Error::Contract("no pool sizes given".into()));
    }
    let mut rows = Vec::new();
    for &pool in &a.pools {
        let setup = TimingSetup {
            tokens: a.tokens,
            width: a.width,
            heads: a.heads,
            knowledge_dim: a.knowledge_dim,
            pool,
            samples: a.samples,
            repetitions: a.reps,
            bits: a.bits,
            seed: a.seed,
        };
        let r = measure_overhead(&setup)?;
        log::info!("pool {pool}: overhead {:.2}%", r.overhead * 100.0);
        rows.push(r);
    }
    println!("{}", serde_json::to_string_pretty(&rows)?);
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<(), Error> {
    let cfg = a.train.config(0)?;
    let ds = Dataset::load(&a.data.store, &a.data.manifest)?;
    let rows = sweep(&ds, &a.shots, a.seeds, &cfg)?;
    let mut csv = String::from("shots,map_mean,map_std\n");
    for r in &rows {
        csv.push_str(&format!("{},{:.4},{:.4}\n", r.shots, r.map_mean, r.map_std));
    }
    match &a.out {
        Some(path) => fs::write(path, csv).map_err(io_err(path))?,
        None => print!("{csv}"),
    }
    Ok(())
}
