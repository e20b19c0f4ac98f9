//! Command-line surface: dataset simulation, contrastive pretraining,
//! probe fine-tuning with metrics output, and checkpoint inspection.

use clap::{Parser, Subcommand};
use crlc_ssl::augment::Family;
use crlc_ssl::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crlc_ssl::config::{resolve, Config};
use crlc_ssl::data::{read_dataset, sample_balanced, write_dataset};
use crlc_ssl::model::{EncoderArch, ModelParams};
use crlc_ssl::pairing::Strategy;
use crlc_ssl::persist::temp_sibling;
use crlc_ssl::sim::{
    generate_finetune, generate_pretrain, FinetuneSpec, FrequencyRegime, MixingStructure,
    SimSpec, CLASS_FREQS,
};
use crlc_ssl::train::{
    attach_probe_and_finetune, check_strategy, evaluate, grid_search_lr, pretrain,
    FinetuneConfig, FinetuneOutcome, LossKind, Metrics, RunConfig, LR_GRID,
};
use crlc_ssl::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "crlc-ssl",
    version,
    about = "Channel-agnostic contrastive self-supervision for multivariate time series"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic source-mixing dataset file
    Simulate(SimulateArgs),
    /// Contrastive pretraining, writing a checkpoint and loss log
    Pretrain(PretrainArgs),
    /// Attach a linear probe, fine-tune per seed, and report metrics
    Finetune(FinetuneArgs),
    /// Summarize a checkpoint: config echo, tensors, parameter count
    Inspect(InspectArgs),
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// pretrain-drift | pretrain-stationary | finetune-full | finetune-block
    #[arg(long)]
    mode: String,
    /// Number of windows
    #[arg(long)]
    n: usize,
    /// Observed channels
    #[arg(long, default_value_t = 10)]
    c: usize,
    /// Latent sources
    #[arg(long, default_value_t = 10)]
    m: usize,
    /// Samples per window
    #[arg(long, default_value_t = 3000)]
    t: usize,
    /// Additive noise standard deviation
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct PretrainArgs {
    /// Pretraining dataset file
    #[arg(long)]
    data: PathBuf,
    /// Optional held-out dataset for per-epoch validation loss
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Optional `key = value` config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// crlc | csc | cac
    #[arg(long)]
    strategy: Option<String>,
    /// nt_xent | ts2vec
    #[arg(long)]
    loss: Option<String>,
    /// Message passing rounds
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Signal family for the augmentation strategy: eeg | ecg
    #[arg(long)]
    family: Option<String>,
    /// Sample rate in Hz for the augmentation strategy
    #[arg(long)]
    sample_rate: Option<f64>,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss log (CSV, appended)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(clap::Args)]
struct FinetuneArgs {
    /// Pretrained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Labeled dataset file; the last --test-count windows are the
    /// fixed test split, the rest is the train/val pool
    #[arg(long)]
    data: PathBuf,
    /// Balanced training instances per class (validation draws the same)
    #[arg(long)]
    n_per_class: usize,
    /// Keep the encoder frozen and train only the probe
    #[arg(long)]
    freeze: bool,
    /// Comma-separated seed list, one run per seed
    #[arg(long, default_value = "1")]
    seeds: String,
    /// Probe learning rate (ignored with --grid)
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Search the learning-rate grid on validation balanced accuracy
    #[arg(long)]
    grid: bool,
    #[arg(long, default_value_t = 500)]
    test_count: usize,
    #[arg(long, default_value_t = 1e-2)]
    weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    /// Metrics CSV, appended (header written once)
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Optional checkpoint for the trained probe (and encoder if not
    /// frozen); one per seed with the seed appended
    #[arg(long)]
    head_out: Option<PathBuf>,
    /// Row identifier for the metrics CSV
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(clap::Args)]
struct InspectArgs {
    /// Checkpoint path
    ckpt: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::Finetune(a) => cmd_finetune(a),
        Cmd::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let base = |mixing, regime| SimSpec {
        c: a.c,
        m: a.m,
        t: a.t,
        sigma: a.sigma,
        mixing,
        regime,
        n_windows: a.n,
        seed: a.seed,
    };
    let finetune = |mixing| FinetuneSpec {
        base: base(mixing, FrequencyRegime::Stationary),
        class_freqs: CLASS_FREQS,
        class_source_index: 0,
        class_prior: 0.5,
    };
    let ds = match a.mode.as_str() {
        "pretrain-drift" => {
            generate_pretrain(&base(MixingStructure::Full, FrequencyRegime::Drift))?
        }
        // The stationary design pairs with block-diagonal mixing, the
        // drift design with full mixing.
        "pretrain-stationary" => generate_pretrain(&base(
            MixingStructure::BlockDiagonal,
            FrequencyRegime::Stationary,
        ))?,
        "finetune-full" => generate_finetune(&finetune(MixingStructure::Full))?,
        "finetune-block" => generate_finetune(&finetune(MixingStructure::BlockDiagonal))?,
        other => {
            return Err(Error::invalid(format!(
                "unknown mode {other}; expected pretrain-drift, pretrain-stationary, \
                 finetune-full, or finetune-block"
            )))
        }
    };
    write_dataset(&ds, &a.out)?;
    println!(
        "mode={} n={} c={} t={} seed={} classes={} paired={} out={}",
        a.mode,
        ds.len(),
        ds.channels(),
        ds.window_len(),
        a.seed,
        ds.n_classes.unwrap_or(0),
        ds.paired.is_some(),
        a.out.display()
    );
    Ok(())
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    match s {
        "crlc" => Ok(Strategy::Crlc),
        "csc" => Ok(Strategy::Csc),
        "cac" => Ok(Strategy::Cac),
        other => Err(Error::invalid(format!(
            "unknown strategy {other}; expected crlc, csc, or cac"
        ))),
    }
}

fn parse_loss(s: &str) -> Result<LossKind> {
    match s {
        "nt_xent" => Ok(LossKind::NtXent),
        "ts2vec" => Ok(LossKind::Ts2Vec),
        other => Err(Error::invalid(format!(
            "unknown loss {other}; expected nt_xent or ts2vec"
        ))),
    }
}

fn parse_family(s: &str) -> Result<Family> {
    match s {
        "eeg" => Ok(Family::Eeg),
        "ecg" => Ok(Family::Ecg),
        other => Err(Error::invalid(format!(
            "unknown family {other}; expected eeg or ecg"
        ))),
    }
}

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::Crlc => "crlc",
        Strategy::Csc => "csc",
        Strategy::Cac => "cac",
    }
}

fn loss_name(l: LossKind) -> &'static str {
    match l {
        LossKind::NtXent => "nt_xent",
        LossKind::Ts2Vec => "ts2vec",
    }
}

fn run_config_echo(cfg: &RunConfig) -> String {
    let mut s = String::new();
    s.push_str(&format!("strategy = {}\n", strategy_name(cfg.strategy)));
    s.push_str(&format!("loss = {}\n", loss_name(cfg.loss)));
    s.push_str(&format!("k = {}\n", cfg.rounds));
    s.push_str(&format!("epochs = {}\n", cfg.epochs));
    s.push_str(&format!("lr = {}\n", cfg.lr));
    s.push_str(&format!("weight_decay = {}\n", cfg.weight_decay));
    s.push_str(&format!("batch = {}\n", cfg.batch_size));
    s.push_str(&format!("dropout = {}\n", cfg.dropout));
    s.push_str(&format!("tau = {}\n", cfg.tau));
    s.push_str(&format!("seed = {}\n", cfg.seed));
    if let Some(f) = cfg.family {
        s.push_str(&format!(
            "family = {}\n",
            match f {
                Family::Eeg => "eeg",
                Family::Ecg => "ecg",
            }
        ));
        s.push_str(&format!("sample_rate = {}\n", cfg.sample_rate));
    }
    s
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => Config::from_file(p)?,
        None => Config::default(),
    };
    let strategy = match a.strategy.as_deref().or(file.get("strategy")) {
        Some(s) => parse_strategy(s)?,
        None => return Err(Error::invalid("no strategy given (flag or config file)")),
    };
    let loss = parse_loss(
        a.loss
            .as_deref()
            .or(file.get("loss"))
            .unwrap_or("nt_xent"),
    )?;
    let family = match a.family.as_deref().or(file.get("family")) {
        Some(s) => Some(parse_family(s)?),
        None => None,
    };
    let defaults = RunConfig::default();
    let cfg = RunConfig {
        strategy,
        loss,
        family,
        rounds: resolve(a.k, &file, "k", defaults.rounds)?,
        epochs: resolve(a.epochs, &file, "epochs", defaults.epochs)?,
        lr: resolve(a.lr, &file, "lr", defaults.lr)?,
        weight_decay: resolve(a.weight_decay, &file, "weight_decay", defaults.weight_decay)?,
        batch_size: resolve(a.batch, &file, "batch", defaults.batch_size)?,
        dropout: resolve(a.dropout, &file, "dropout", defaults.dropout)?,
        tau: resolve(a.tau, &file, "tau", defaults.tau)?,
        seed: resolve(a.seed, &file, "seed", defaults.seed)?,
        sample_rate: resolve(a.sample_rate, &file, "sample_rate", defaults.sample_rate)?,
    };
    let train = read_dataset(&a.data)?;
    check_strategy(&cfg, &train)?;
    let val = match &a.val_data {
        Some(p) => Some(read_dataset(p)?),
        None => None,
    };
    println!(
        "pretraining: strategy={} loss={} k={} epochs={} lr={} batch={} seed={} n={}",
        strategy_name(cfg.strategy),
        loss_name(cfg.loss),
        cfg.rounds,
        cfg.epochs,
        cfg.lr,
        cfg.batch_size,
        cfg.seed,
        train.len()
    );
    let out = pretrain(&cfg, &train, val.as_ref())?;
    let tensors = out
        .params
        .tensors()
        .into_iter()
        .map(|(n, v)| (n, v.to_owned()))
        .collect();
    let ck = Checkpoint::new(run_config_echo(&cfg), tensors)?;
    write_checkpoint(&ck, &a.out)?;
    if let Some(log) = &a.log {
        let mut lines = String::new();
        if !log.exists() {
            lines.push_str("epoch,train_loss,val_loss,steps\n");
        }
        for r in &out.log {
            lines.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch,
                r.train_loss,
                r.val_loss.map(|v| v.to_string()).unwrap_or_default(),
                r.steps
            ));
        }
        append_atomic(log, &lines)?;
    }
    let last = out.log.last().expect("at least one epoch");
    println!(
        "done: final train loss {:.6}{} -> {}",
        last.train_loss,
        last.val_loss
            .map(|v| format!(", val loss {v:.6}"))
            .unwrap_or_default(),
        a.out.display()
    );
    Ok(())
}

/// Appends to a text file atomically: rewrite existing content plus the
/// new chunk into a temp sibling, then rename over the original.
fn append_atomic(path: &Path, chunk: &str) -> Result<()> {
    let existing = if path.exists() {
        std::fs::read_to_string(path)?
    } else {
        String::new()
    };
    let tmp = temp_sibling(path);
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(existing.as_bytes())?;
        f.write_all(chunk.as_bytes())?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Rebuilds model parameters from a checkpoint, using the stored config
/// echo for the message-round count.
fn load_model(ck: &Checkpoint) -> Result<(ModelParams<f32>, Config)> {
    let cfg = Config::parse(&ck.config)?;
    let rounds = cfg.get_parsed::<usize>("k")?.unwrap_or(3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams::<f32>::init(&EncoderArch::default(), rounds, &mut rng);
    ck.load_into(params.tensors_mut())?;
    Ok((params, cfg))
}

const METRICS_HEADER: &str =
    "run_id,stage,strategy,loss,k,seed,n_per_class,lr,split,balanced_accuracy,epochs_ran\n";

fn metrics_row(
    run_id: &str,
    stage: &str,
    strategy: &str,
    loss: &str,
    k: &str,
    seed: u64,
    n_per_class: usize,
    m: &Metrics,
    split: &str,
) -> String {
    format!(
        "{run_id},{stage},{strategy},{loss},{k},{seed},{n_per_class},{},{split},{},{}\n",
        m.lr, m.balanced_accuracy, m.epochs_ran
    )
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::invalid(format!("bad seed {s:?} in --seeds")))
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::invalid("--seeds must name at least one seed"));
    }
    let ck = read_checkpoint(&a.ckpt)?;
    let (params, ck_cfg) = load_model(&ck)?;
    let ds = read_dataset(&a.data)?;
    if ds.labels.is_none() {
        return Err(Error::invalid("fine-tuning needs a labeled dataset"));
    }
    if a.test_count == 0 || a.test_count >= ds.len() {
        return Err(Error::invalid(format!(
            "--test-count must be in 1..{} for this dataset",
            ds.len()
        )));
    }
    let pool_idx: Vec<usize> = (0..ds.len() - a.test_count).collect();
    let test_idx: Vec<usize> = (ds.len() - a.test_count..ds.len()).collect();
    let pool = ds.select(&pool_idx);
    let test = ds.select(&test_idx);
    let strategy = ck_cfg.get("strategy").unwrap_or("?").to_string();
    let loss = ck_cfg.get("loss").unwrap_or("?").to_string();
    let k = ck_cfg.get("k").unwrap_or("?").to_string();
    let stage = if a.freeze { "frozen" } else { "full" };
    let run_id = a.run_id.clone().unwrap_or_else(|| {
        let stem = a
            .ckpt
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        format!("{stem}-{stage}")
    });
    let mut rows = String::new();
    let mut test_accs = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let (train, rest) = sample_balanced(&pool, a.n_per_class, seed)?;
        let (val, _) = sample_balanced(&rest, a.n_per_class, seed ^ 0x9E37_79B9_7F4A_7C15)?;
        let fcfg = FinetuneConfig {
            lr: a.lr,
            weight_decay: a.weight_decay,
            batch_size: a.batch,
            max_epochs: a.max_epochs,
            patience: a.patience,
            dropout: a.dropout,
            seed,
        };
        let outcome: FinetuneOutcome = if a.grid {
            let (_, o) = grid_search_lr(&params, &fcfg, &train, &val, a.freeze, &LR_GRID)?;
            o
        } else {
            attach_probe_and_finetune(&params, &fcfg, &train, &val, a.freeze)?
        };
        let test_m = evaluate(&outcome.params, &outcome.head, &test)?;
        println!(
            "seed {seed}: lr={} val={:.4} test={:.4} epochs={}",
            outcome.metrics.lr,
            outcome.metrics.balanced_accuracy,
            test_m.balanced_accuracy,
            outcome.metrics.epochs_ran
        );
        rows.push_str(&metrics_row(
            &run_id,
            stage,
            &strategy,
            &loss,
            &k,
            seed,
            a.n_per_class,
            &outcome.metrics,
            "val",
        ));
        let test_row = Metrics {
            lr: outcome.metrics.lr,
            epochs_ran: outcome.metrics.epochs_ran,
            ..test_m.clone()
        };
        rows.push_str(&metrics_row(
            &run_id,
            stage,
            &strategy,
            &loss,
            &k,
            seed,
            a.n_per_class,
            &test_row,
            "test",
        ));
        if let Some(base) = &a.head_out {
            let mut tensors: Vec<(String, ndarray::ArrayD<f32>)> = Vec::new();
            if !a.freeze {
                tensors.extend(
                    outcome
                        .params
                        .tensors()
                        .into_iter()
                        .map(|(n, v)| (n, v.to_owned())),
                );
            }
            tensors.extend(
                outcome
                    .head
                    .tensors("head")
                    .into_iter()
                    .map(|(n, v)| (n, v.to_owned())),
            );
            let cfg_echo = format!("{}seed = {seed}\nstage = {stage}\n", ck.config);
            let path = seed_suffixed(base, seed);
            write_checkpoint(&Checkpoint::new(cfg_echo, tensors)?, &path)?;
        }
        test_accs.push(test_m.balanced_accuracy);
    }
    if let Some(m) = &a.metrics {
        let header = if m.exists() { "" } else { METRICS_HEADER };
        append_atomic(m, &format!("{header}{rows}"))?;
    }
    let n = test_accs.len() as f64;
    let mean = test_accs.iter().sum::<f64>() / n;
    let sem = if test_accs.len() > 1 {
        let var = test_accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    println!("test balanced accuracy: {mean:.4} ({sem:.4}) over {} seeds", test_accs.len());
    Ok(())
}

fn seed_suffixed(base: &Path, seed: u64) -> PathBuf {
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "head".into());
    let ext = base
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    base.with_file_name(format!("{stem}-seed{seed}{ext}"))
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let ck = read_checkpoint(&a.ckpt)?;
    println!("checkpoint: {}", a.ckpt.display());
    println!("config:");
    for line in ck.config.lines() {
        println!("  {line}");
    }
    println!("tensors:");
    for (name, t) in &ck.tensors {
        println!("  {name}  {:?}  ({} values)", t.shape(), t.len());
    }
    println!("total parameters: {}", ck.parameter_count());
    Ok(())
}
