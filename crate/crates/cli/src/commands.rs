use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mobgpt_core::data::eda::{daily_series, events_per_slot, oov_rates};
use mobgpt_core::data::ingest::{ingest_csv, write_csv};
use mobgpt_core::data::split::split_users;
use mobgpt_core::data::{build_histories, DatasetSplit, PingRecord, UserHistory};
use mobgpt_core::generate::{predict_users, GenConfig};
use mobgpt_core::metrics::{
    evaluate, sweep_generation, sweep_to_csv, GeoBleuParams, Grouping,
};
use mobgpt_core::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mobgpt_core::model::optim::AdamState;
use mobgpt_core::model::init_model;
use mobgpt_core::synth::{generate_synthetic, synth_properties_report, SynthConfig};
use mobgpt_core::train::{finetune, make_windows, run_training, TrainingWindow};
use mobgpt_core::vocab::Vocabulary;

use crate::config::RunConfig;
use crate::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "mobgpt", version, about = "Grid-mobility trajectory modeling pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic mobility CSV.
    Synth(SynthArgs),
    /// Exploratory statistics and plots for a ping CSV.
    Eda(EdaArgs),
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Fine-tune a checkpoint on the post-horizon day range.
    Finetune(FinetuneArgs),
    /// Generate held-out-day predictions with constrained decoding.
    Predict(PredictArgs),
    /// Score a prediction CSV against truth.
    Evaluate(EvaluateArgs),
    /// Factorial temperature x top-k generation sweep.
    Sweep(SweepArgs),
    /// Print checkpoint metadata.
    InspectCkpt(InspectArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    users: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 75)]
    days: u32,
    #[arg(long, default_value_t = 0)]
    dow_offset: u32,
    #[arg(long, default_value_t = 2)]
    noise_radius: u32,
    /// Enable the emergency regime from this day on.
    #[arg(long)]
    emergency_day: Option<u32>,
    #[arg(long, default_value_t = 0.8)]
    emergency_home_bias: f64,
}

#[derive(Args)]
pub struct EdaArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 60)]
    horizon: u32,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    dow_offset: u32,
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON run config (see README for the schema).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override the total optimizer steps (0 = epochs x steps-per-epoch).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum TargetSet {
    Val,
    Test,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    horizon: u32,
    #[arg(long, default_value_t = 75)]
    until_day: u32,
    #[arg(long, value_enum, default_value_t = TargetSet::Test)]
    target: TargetSet,
    #[arg(long, default_value_t = 1)]
    split_seed: u64,
    #[arg(long, default_value_t = 10)]
    n_val: usize,
    #[arg(long, default_value_t = 10)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    dow_offset: u32,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, default_value_t = 1.0)]
    top_p: f64,
    #[arg(long, default_value_t = 2)]
    candidate_window: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Do not feed generated days into later context windows.
    #[arg(long)]
    no_roll: bool,
    /// Write a JSON-lines decoding audit log.
    #[arg(long)]
    audit: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum GroupingArg {
    PerUserDay,
    PerUserTrajectory,
}

impl From<GroupingArg> for Grouping {
    fn from(g: GroupingArg) -> Grouping {
        match g {
            GroupingArg::PerUserDay => Grouping::PerUserDay,
            GroupingArg::PerUserTrajectory => Grouping::PerUserTrajectory,
        }
    }
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Write the full report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = GroupingArg::PerUserDay)]
    grouping: GroupingArg,
    #[arg(long, default_value_t = 3)]
    max_n: usize,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.6,1.0")]
    temperatures: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "5")]
    top_ks: Vec<usize>,
    #[arg(long, default_value_t = 60)]
    horizon: u32,
    #[arg(long, default_value_t = 75)]
    until_day: u32,
    #[arg(long, value_enum, default_value_t = TargetSet::Val)]
    target: TargetSet,
    #[arg(long, default_value_t = 1)]
    split_seed: u64,
    #[arg(long, default_value_t = 10)]
    n_val: usize,
    #[arg(long, default_value_t = 10)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    dow_offset: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    candidate_window: u32,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

pub fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Eda(a) => cmd_eda(a),
        Command::Train(a) => cmd_train(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::InspectCkpt(a) => cmd_inspect(a),
    }
}

fn configure_pool(jobs: usize) {
    #[allow(unused_variables)]
    if jobs > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(usage(format!("{what} `{}` does not exist", path.display())));
    }
    Ok(())
}

fn load_pings(path: &Path, what: &str) -> Result<Vec<PingRecord>, CliError> {
    require_file(path, what)?;
    ingest_csv(path).map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))
}

fn write_sidecar<T: Serialize>(out: &Path, payload: &T) -> anyhow::Result<()> {
    let sidecar = out.with_extension(match out.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{ext}.run.json"),
        None => "run.json".to_string(),
    });
    std::fs::write(&sidecar, serde_json::to_string_pretty(payload)?)
        .with_context(|| format!("writing {}", sidecar.display()))?;
    Ok(())
}

// ---- synth -----------------------------------------------------------------

fn cmd_synth(a: SynthArgs) -> CliResult {
    let cfg = SynthConfig {
        n_users: a.users,
        n_days: a.days,
        noise_radius: a.noise_radius,
        emergency_day: a.emergency_day,
        emergency_home_bias: a.emergency_home_bias,
        dow_offset: a.dow_offset,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let records =
        generate_synthetic(&cfg).map_err(|e| usage(format!("invalid synth config: {e}")))?;
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(e.into()))?;
        }
    }
    write_csv(&a.out, &records).map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;
    write_sidecar(&a.out, &cfg)?;
    println!("wrote {} pings for {} users to {}", records.len(), a.users, a.out.display());
    Ok(())
}

// ---- eda -------------------------------------------------------------------

fn ascii_plot(values: &[f64], label_of: impl Fn(usize) -> String) -> String {
    let max = values.iter().copied().fold(f64::MIN, f64::max).max(1e-12);
    let mut out = String::new();
    for (i, v) in values.iter().enumerate() {
        let bar = "#".repeat(((v / max) * 60.0).round() as usize);
        out.push_str(&format!("{:>8} |{bar} {v:.3}\n", label_of(i)));
    }
    out
}

fn cmd_eda(a: EdaArgs) -> CliResult {
    let records = load_pings(&a.data, "data file")?;
    let histories = build_histories(&records, a.dow_offset);
    std::fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Runtime(e.into()))?;

    let events = events_per_slot(&histories, 0..mobgpt_core::DATASET_DAYS)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;
    let mut csv = String::from("slot,mean_pings\n");
    for (t, v) in events.iter().enumerate() {
        csv.push_str(&format!("{t},{v}\n"));
    }
    std::fs::write(a.out_dir.join("events_per_slot.csv"), csv).map_err(anyhow::Error::from)?;
    std::fs::write(
        a.out_dir.join("events_per_slot.txt"),
        ascii_plot(&events, |i| format!("slot {i}")),
    )
    .map_err(anyhow::Error::from)?;

    let series = daily_series(&histories);
    let mut csv = String::from("day,total_pings,mean_unique_cells\n");
    for s in &series {
        csv.push_str(&format!("{},{},{}\n", s.day, s.total_pings, s.mean_unique_cells));
    }
    std::fs::write(a.out_dir.join("daily_counts.csv"), csv).map_err(anyhow::Error::from)?;
    let unique: Vec<f64> = series.iter().map(|s| s.mean_unique_cells).collect();
    std::fs::write(
        a.out_dir.join("daily_counts.txt"),
        ascii_plot(&unique, |i| format!("day {}", series[i].day)),
    )
    .map_err(anyhow::Error::from)?;

    // out-of-training rate histogram over users (10 buckets each)
    let mut hist_x = vec![0usize; 10];
    let mut hist_y = vec![0usize; 10];
    let mut hist_xy = vec![0usize; 10];
    let mut scored_users = 0;
    for h in histories.values() {
        if let Ok(s) = oov_rates(h, a.horizon) {
            let bucket = |r: f64| ((r * 10.0).floor() as usize).min(9);
            hist_x[bucket(s.rate_x)] += 1;
            hist_y[bucket(s.rate_y)] += 1;
            hist_xy[bucket(s.rate_xy)] += 1;
            scored_users += 1;
        }
    }
    let mut csv = String::from("bucket_lo,bucket_hi,count_x,count_y,count_xy\n");
    for b in 0..10 {
        csv.push_str(&format!(
            "{:.1},{:.1},{},{},{}\n",
            b as f64 / 10.0,
            (b + 1) as f64 / 10.0,
            hist_x[b],
            hist_y[b],
            hist_xy[b]
        ));
    }
    std::fs::write(a.out_dir.join("oov_hist.csv"), csv).map_err(anyhow::Error::from)?;
    let xy_counts: Vec<f64> = hist_xy.iter().map(|c| *c as f64).collect();
    std::fs::write(
        a.out_dir.join("oov_hist.txt"),
        ascii_plot(&xy_counts, |i| format!("{:.1}-{:.1}", i as f64 / 10.0, (i + 1) as f64 / 10.0)),
    )
    .map_err(anyhow::Error::from)?;

    let report = synth_properties_report(&records, a.dow_offset, a.horizon);
    std::fs::write(
        a.out_dir.join("summary.json"),
        serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?,
    )
    .map_err(anyhow::Error::from)?;

    println!(
        "eda: {} users, {} scored for out-of-training rates, mean rate_xy {:.3}",
        histories.len(),
        scored_users,
        report.mean_oov_xy
    );
    println!("reports written to {}", a.out_dir.display());
    Ok(())
}

// ---- train / finetune --------------------------------------------------------

struct LoadedRun {
    cfg: RunConfig,
    histories: BTreeMap<u32, UserHistory>,
    split: DatasetSplit,
}

fn load_run(config_path: &Path, data_override: Option<&Path>) -> Result<LoadedRun, CliError> {
    require_file(config_path, "config file")?;
    let mut cfg = RunConfig::load(config_path).map_err(usage)?;
    if let Some(d) = data_override {
        cfg.data = d.to_path_buf();
    }
    let records = load_pings(&cfg.data, "data file")?;
    let histories = build_histories(&records, cfg.dow_offset);
    let split = split_users(&histories, cfg.n_val, cfg.n_test, cfg.split_seed, cfg.horizon_day)
        .map_err(|e| usage(e.to_string()))?;
    Ok(LoadedRun { cfg, histories, split })
}

fn eval_window_subset(
    windows: &[TrainingWindow],
    split: &DatasetSplit,
    cap: usize,
) -> Vec<TrainingWindow> {
    let mut out: Vec<TrainingWindow> =
        windows.iter().filter(|w| split.val.binary_search(&w.uid).is_ok()).copied().collect();
    out.truncate(cap);
    out
}

fn cmd_train(a: TrainArgs) -> CliResult {
    configure_pool(a.jobs);
    let mut run = load_run(&a.config, a.data.as_deref())?;
    if let Some(v) = a.out_dir {
        run.cfg.out_dir = v;
    }
    if let Some(v) = a.epochs {
        run.cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        run.cfg.train.batch_size = v;
    }
    if let Some(v) = a.steps {
        run.cfg.train.total_steps = v;
    }
    if let Some(v) = a.seed {
        run.cfg.train.seed = v;
    }
    run.cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    run.cfg.model.validate().map_err(|e| usage(e.to_string()))?;

    let windows = make_windows(&run.split, &run.histories, run.cfg.day_min, run.cfg.day_max)
        .map_err(|e| usage(e.to_string()))?;
    let eval_windows = eval_window_subset(&windows, &run.split, run.cfg.eval_window_cap);
    let params = init_model::<f32>(&run.cfg.model).map_err(|e| usage(e.to_string()))?;
    let adam = AdamState::zeros_like(&params);

    run.cfg.write_resolved(&run.cfg.out_dir).map_err(anyhow::Error::from)?;
    std::fs::write(run.cfg.out_dir.join("vocab.json"), Vocabulary::build().to_json())
        .map_err(anyhow::Error::from)?;

    println!(
        "training: {} windows ({} eval), model {}L/{}H/{}d",
        windows.len(),
        eval_windows.len(),
        run.cfg.model.n_layers,
        run.cfg.model.n_heads,
        run.cfg.model.d_model
    );
    let outcome = run_training(
        params,
        adam,
        0,
        &run.histories,
        &run.split,
        &windows,
        &eval_windows,
        &run.cfg.train,
        Some(&run.cfg.out_dir),
    )
    .map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;

    println!(
        "done: {} steps, final train loss {:.4}, best step {} (eval loss {})",
        outcome.step,
        outcome.trace.last().map(|t| t.train_loss).unwrap_or(f64::NAN),
        outcome.best_step,
        outcome.best_eval_loss.map(|l| format!("{l:.4}")).unwrap_or_else(|| "n/a".into()),
    );
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> CliResult {
    configure_pool(a.jobs);
    let mut run = load_run(&a.config, None)?;
    require_file(&a.ckpt, "checkpoint")?;
    if let Some(v) = a.out_dir {
        run.cfg.out_dir = v;
    }
    let mut tc = run.cfg.train.for_finetune();
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.steps {
        tc.total_steps = v;
    }
    tc.validate().map_err(|e| usage(e.to_string()))?;

    // emergency-period windows only
    let windows = make_windows(&run.split, &run.histories, run.cfg.horizon_day, run.cfg.day_max)
        .map_err(|e| usage(e.to_string()))?;
    let eval_windows = eval_window_subset(&windows, &run.split, run.cfg.eval_window_cap);
    let ckpt = load_checkpoint(&a.ckpt).map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;

    run.cfg.train = tc.clone();
    run.cfg.write_resolved(&run.cfg.out_dir).map_err(anyhow::Error::from)?;
    println!("fine-tuning on {} post-horizon windows", windows.len());
    let outcome = finetune(
        ckpt,
        &run.histories,
        &run.split,
        &windows,
        &eval_windows,
        &tc,
        Some(&run.cfg.out_dir),
    )
    .map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;
    println!(
        "done: {} steps, best step {} (eval loss {})",
        outcome.step,
        outcome.best_step,
        outcome.best_eval_loss.map(|l| format!("{l:.4}")).unwrap_or_else(|| "n/a".into()),
    );
    Ok(())
}

// ---- predict / evaluate / sweep ----------------------------------------------

fn split_for(
    histories: &BTreeMap<u32, UserHistory>,
    n_val: usize,
    n_test: usize,
    split_seed: u64,
    horizon: u32,
) -> Result<DatasetSplit, CliError> {
    split_users(histories, n_val, n_test, split_seed, horizon).map_err(|e| usage(e.to_string()))
}

fn cmd_predict(a: PredictArgs) -> CliResult {
    configure_pool(a.jobs);
    require_file(&a.ckpt, "checkpoint")?;
    let records = load_pings(&a.data, "data file")?;
    let histories = build_histories(&records, a.dow_offset);
    let split = split_for(&histories, a.n_val, a.n_test, a.split_seed, a.horizon)?;
    let uids = match a.target {
        TargetSet::Val => split.val.clone(),
        TargetSet::Test => split.test.clone(),
    };
    let ckpt = load_checkpoint(&a.ckpt).map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;
    let cfg = GenConfig {
        temperature: a.temperature,
        top_k: a.top_k,
        top_p: a.top_p,
        candidate_window: a.candidate_window,
        seed: a.seed,
        rolling: !a.no_roll,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let out = predict_users(&ckpt.params, &histories, &uids, a.horizon..a.until_day, a.horizon, &cfg)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;
    write_csv(&a.out, &out.pings).map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;
    if let Some(audit_path) = &a.audit {
        let mut lines = String::new();
        for rec in &out.audit {
            lines.push_str(&serde_json::to_string(rec).map_err(anyhow::Error::from)?);
            lines.push('\n');
        }
        std::fs::write(audit_path, lines).map_err(anyhow::Error::from)?;
    }
    #[derive(Serialize)]
    struct PredictEcho<'a> {
        ckpt: &'a Path,
        data: &'a Path,
        horizon: u32,
        until_day: u32,
        target: &'a str,
        split_seed: u64,
        n_val: usize,
        n_test: usize,
        dow_offset: u32,
        gen: &'a GenConfig,
        uids: &'a [u32],
    }
    write_sidecar(
        &a.out,
        &PredictEcho {
            ckpt: &a.ckpt,
            data: &a.data,
            horizon: a.horizon,
            until_day: a.until_day,
            target: if a.target == TargetSet::Val { "val" } else { "test" },
            split_seed: a.split_seed,
            n_val: a.n_val,
            n_test: a.n_test,
            dow_offset: a.dow_offset,
            gen: &cfg,
            uids: &uids,
        },
    )?;
    println!("predicted {} pings for {} users -> {}", out.pings.len(), uids.len(), a.out.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult {
    configure_pool(a.jobs);
    let pred = load_pings(&a.pred, "prediction file")?;
    let truth_all = load_pings(&a.truth, "truth file")?;
    // restrict truth to the (uid, day) pairs actually predicted
    let mut wanted: std::collections::BTreeSet<(u32, u32)> = std::collections::BTreeSet::new();
    for p in &pred {
        wanted.insert((p.uid, p.day));
    }
    let truth: Vec<PingRecord> =
        truth_all.into_iter().filter(|r| wanted.contains(&(r.uid, r.day))).collect();

    let bleu = GeoBleuParams { max_n: a.max_n, beta: a.beta };
    let report = evaluate(&pred, &truth, a.grouping.into(), &bleu)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;
    println!("GEO-BLEU {:.4}", report.mean_geo_bleu);
    println!("DTW      {:.4}", report.mean_dtw);
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?)
            .map_err(anyhow::Error::from)?;
        println!("report -> {}", out.display());
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CliResult {
    configure_pool(a.jobs);
    require_file(&a.ckpt, "checkpoint")?;
    let records = load_pings(&a.data, "data file")?;
    let histories = build_histories(&records, a.dow_offset);
    let split = split_for(&histories, a.n_val, a.n_test, a.split_seed, a.horizon)?;
    let uids = match a.target {
        TargetSet::Val => split.val.clone(),
        TargetSet::Test => split.test.clone(),
    };
    let truth: Vec<PingRecord> = records
        .iter()
        .filter(|r| uids.binary_search(&r.uid).is_ok() && r.day >= a.horizon && r.day < a.until_day)
        .copied()
        .collect();
    let ckpt = load_checkpoint(&a.ckpt).map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;
    let base = GenConfig { candidate_window: a.candidate_window, seed: a.seed, ..GenConfig::default() };
    let rows = sweep_generation(
        &ckpt.params,
        &histories,
        &uids,
        a.horizon..a.until_day,
        a.horizon,
        &truth,
        &base,
        &a.temperatures,
        &a.top_ks,
        Grouping::PerUserDay,
        &GeoBleuParams::default(),
    )
    .map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;

    std::fs::write(&a.out, sweep_to_csv(&rows)).map_err(anyhow::Error::from)?;
    let json_path = a.out.with_extension("json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&rows).map_err(anyhow::Error::from)?)
        .map_err(anyhow::Error::from)?;
    for r in &rows {
        println!(
            "temperature {:.2} top_k {:>2} -> GEO-BLEU {:.4} DTW {:.4} (seed {})",
            r.temperature, r.top_k, r.geo_bleu, r.dtw, r.seed
        );
    }
    println!("sweep -> {} and {}", a.out.display(), json_path.display());
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> CliResult {
    require_file(&a.ckpt, "checkpoint")?;
    let (cfg, step, rng_seed, tensors) = mobgpt_core::model::checkpoint::describe_checkpoint(&a.ckpt)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;
    println!("checkpoint {}", a.ckpt.display());
    println!(
        "  model: {} layers, {} heads, {} dims, vocab {}, context {}, dropout {}",
        cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.vocab_size, cfg.context_len, cfg.dropout
    );
    println!("  step {step}, rng seed {rng_seed}");
    let total: usize = tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    println!("  {} tensors, {} parameters", tensors.len(), total);
    for (name, shape) in &tensors {
        println!("    {name:<20} {shape:?}");
    }
    Ok(())
}

/// Round-trip a fresh model through the checkpoint format (used by tests and
/// kept here so the CLI can mint a checkpoint without training).
#[allow(dead_code)]
pub fn write_init_checkpoint(cfg: &mobgpt_core::model::ModelConfig, path: &Path) -> anyhow::Result<()> {
    let params = init_model::<f32>(cfg)?;
    let adam = AdamState::zeros_like(&params);
    save_checkpoint(path, &Checkpoint::new(params, adam, 0, cfg.seed))?;
    Ok(())
}
