//! Command-line surface: one subcommand per experiment step, all driven by
//! an [`ExperimentConfig`].

use std::fs;
use std::path::Path;

use clap::{Arg, ArgMatches, Command};
use rayon::prelude::*;

use crate::config::{config_keys, ExperimentConfig};
use crate::dataset::{fmt_f64, generate_synthetic, save_dataset, Task};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate, export_projection_2d, export_similarity_heatmap, heatmap_csv, paired_ttest, write_text, MetricsReport,
};
use crate::model::Checkpoint;
use crate::numkernel::Rng;
use crate::trainer::{sweep_tau, train_on, Ablation, TrainConfig};

pub const SUBCOMMANDS: [(&str, &str); 8] = [
    ("gen-data", "Generate the synthetic dataset file"),
    ("train", "Train a model and write checkpoint and log"),
    ("eval", "Evaluate a checkpoint on one split"),
    ("ablate", "Train every ablation variant over several seeds"),
    ("sweep-tau", "Train with each fixed temperature of a grid"),
    ("export-heatmap", "Write cosine similarity heatmaps for chosen samples"),
    ("export-projection", "Write a 2D principal-component projection"),
    ("ttest", "Paired t-test between one column of two CSV files"),
];

fn command() -> Command {
    let keys = config_keys();
    let mut root = Command::new("trml")
        .about("Missing-modality robust multimodal learning over precomputed embeddings")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        let mut sub = Command::new(name).about(about).args_override_self(true).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("TOML experiment configuration"),
        );
        for key in &keys {
            sub = sub.arg(
                Arg::new(key.clone())
                    .long(key.clone())
                    .value_name("VALUE")
                    .help(format!("Override `{key}`")),
            );
        }
        root = root.subcommand(sub);
    }
    root
}

fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    config_keys()
        .into_iter()
        .filter_map(|k| m.get_one::<String>(&k).map(|v| (k.clone(), v.clone())))
        .collect()
}

/// Single machine-parsable error line.
pub fn error_line(e: &Error) -> String {
    format!(
        "trml-error code={} kind={} message={:?}",
        e.exit_code(),
        e.kind(),
        e.to_string()
    )
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit status.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let matches = match command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion)
                || e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 };
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", error_line(&Error::config(first.trim_start_matches("error: "))));
            return 2;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = ExperimentConfig::load(sub.get_one::<String>("config").map(Path::new), &overrides(sub))
        .and_then(|cfg| dispatch(name, &cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            e.exit_code()
        }
    }
}

fn dispatch(name: &str, cfg: &ExperimentConfig) -> Result<()> {
    let out = cfg.out_dir();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_text(out.join("config.resolved"), &cfg.to_toml())?;
    match name {
        "gen-data" => gen_data(cfg),
        "train" => train(cfg),
        "eval" => eval(cfg),
        "ablate" => ablate(cfg),
        "sweep-tau" => sweep(cfg),
        "export-heatmap" => heatmap(cfg),
        "export-projection" => projection(cfg),
        "ttest" => ttest(cfg),
        other => Err(Error::config(format!("unknown subcommand {other:?}"))),
    }
}

fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let ds = generate_synthetic(&cfg.synthetic)?;
    let path = if cfg.data.path.is_empty() {
        cfg.out_dir().join("dataset.trml")
    } else {
        cfg.data.path.clone().into()
    };
    save_dataset(&ds, &path)?;
    println!("wrote {} records to {}", ds.records.len(), path.display());
    Ok(())
}

fn train(cfg: &ExperimentConfig) -> Result<()> {
    let ds = cfg.dataset()?;
    let out = cfg.out_dir();
    match train_on(&cfg.train, &ds, cfg.echo_lines()) {
        Ok(outcome) => {
            outcome.checkpoint.save(out.join("checkpoint.trml"))?;
            write_text(out.join("train_log.csv"), &outcome.log.to_csv())?;
            let best = outcome.log.best_epoch.map(|b| b.to_string()).unwrap_or_else(|| "-".into());
            println!("trained {} epochs, best epoch {best}", outcome.log.epochs.len());
            Ok(())
        }
        Err(Error::Diverged {
            epoch,
            step,
            loss,
            last_good,
        }) => {
            last_good.save(out.join("checkpoint.last_good.trml"))?;
            Err(Error::Diverged {
                epoch,
                step,
                loss,
                last_good,
            })
        }
        Err(e) => Err(e),
    }
}

fn eval(cfg: &ExperimentConfig) -> Result<()> {
    let ds = cfg.dataset()?;
    let ckpt = Checkpoint::load(cfg.checkpoint_path())?;
    let plan = cfg.train.plan(&ds)?;
    let report = evaluate(&ckpt.params, &ds, &plan, cfg.eval.split)?;
    let out = cfg.out_dir();
    write_text(out.join(format!("metrics_{}.csv", cfg.eval.split)), &report.to_csv())?;
    write_text(
        out.join(format!("predictions_{}.csv", cfg.eval.split)),
        &report.predictions_csv()?,
    )?;
    println!("{}", report.summary_line());
    Ok(())
}

/// Metric used for ablation comparisons: MAE for regression, accuracy for
/// classification.
fn primary_metric(task: Task, r: &MetricsReport) -> (&'static str, f64) {
    match task {
        Task::Regression => ("mae", r.mae.unwrap_or(f64::NAN)),
        Task::Classification { .. } => ("acc", r.acc.unwrap_or(f64::NAN)),
    }
}

fn ablate(cfg: &ExperimentConfig) -> Result<()> {
    let ds = cfg.dataset()?;
    let seeds: Vec<u64> = (0..cfg.ablate.seeds as u64).map(|i| cfg.train.seed + i).collect();
    let jobs: Vec<(Ablation, u64)> = Ablation::ALL
        .into_iter()
        .flat_map(|a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let reports = jobs
        .par_iter()
        .map(|&(ablation, seed)| {
            let tc = TrainConfig {
                ablation,
                seed,
                ..cfg.train.clone()
            };
            let outcome = train_on(&tc, &ds, Vec::new())?;
            let plan = tc.plan(&ds)?;
            evaluate(&outcome.checkpoint.params, &ds, &plan, cfg.eval.split)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut runs = String::from("variant,seed,mae,acc2,acc\n");
    for ((a, s), r) in jobs.iter().zip(&reports) {
        let f = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        runs.push_str(&format!("{a},{s},{},{},{}\n", f(r.mae), f(r.acc2), f(r.acc)));
    }
    let k = seeds.len();
    let per_variant: Vec<(Ablation, Vec<f64>)> = Ablation::ALL
        .into_iter()
        .enumerate()
        .map(|(vi, a)| {
            let vals = reports[vi * k..(vi + 1) * k]
                .iter()
                .map(|r| primary_metric(ds.task, r).1)
                .collect();
            (a, vals)
        })
        .collect();
    let metric = primary_metric(ds.task, &reports[0]).0;

    let mut summary = format!("variant,n,mean_{metric},std_{metric}\n");
    for (a, vals) in &per_variant {
        let mean = vals.iter().sum::<f64>() / k as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k as f64 - 1.0);
        summary.push_str(&format!("{a},{k},{},{}\n", fmt_f64(mean), fmt_f64(var.sqrt())));
        println!("{a:>14} mean_{metric}={mean:.6} std={:.6}", var.sqrt());
    }
    let base = &per_variant[0].1;
    let mut tests = String::from("variant,baseline,metric,t,df,p_two_tailed,mean_diff\n");
    for (a, vals) in &per_variant[1..] {
        let t = paired_ttest(vals, base)?;
        tests.push_str(&format!(
            "{a},{},{metric},{},{},{},{}\n",
            Ablation::None,
            fmt_f64(t.t),
            t.df,
            fmt_f64(t.p_two_tailed),
            fmt_f64(t.mean_diff)
        ));
        println!("{a:>14} vs none: t={:.4} df={} p={:.4}", t.t, t.df, t.p_two_tailed);
    }
    let out = cfg.out_dir();
    write_text(out.join("ablation_runs.csv"), &runs)?;
    write_text(out.join("ablation_summary.csv"), &summary)?;
    write_text(out.join("ablation_ttests.csv"), &tests)
}

fn sweep(cfg: &ExperimentConfig) -> Result<()> {
    let ds = cfg.dataset()?;
    let rows = sweep_tau(&cfg.train, &ds, &cfg.sweep.taus, cfg.eval.split)?;
    let mut csv = String::from("tau,mae,acc2,acc\n");
    for row in &rows {
        let f = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(row.tau),
            f(row.metrics.mae),
            f(row.metrics.acc2),
            f(row.metrics.acc)
        ));
        println!("tau={:.3} {}", row.tau, row.metrics.summary_line());
    }
    write_text(cfg.out_dir().join("tau_sweep.csv"), &csv)
}

fn exports_dir(cfg: &ExperimentConfig) -> Result<std::path::PathBuf> {
    let dir = cfg.out_dir().join("exports");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn heatmap(cfg: &ExperimentConfig) -> Result<()> {
    let ds = cfg.dataset()?;
    let ckpt = Checkpoint::load(cfg.checkpoint_path())?;
    let ids = if cfg.export.heatmap_ids.is_empty() {
        let mut idx = ds.split_indices_by_id(cfg.eval.split);
        Rng::new(cfg.train.seed).split(0x6865_6174).shuffle(&mut idx);
        idx.truncate(cfg.export.heatmap_count);
        idx.into_iter().map(|i| ds.records[i].id.clone()).collect()
    } else {
        cfg.export.heatmap_ids.clone()
    };
    let maps = export_similarity_heatmap(&ckpt.params, &ds, &ids)?;
    let dir = exports_dir(cfg)?;
    for (name, m) in maps.named() {
        write_text(dir.join(format!("heatmap_{name}.csv")), &heatmap_csv(name, &maps.ids, m)?)?;
    }
    println!("wrote 3 heatmaps over {} samples to {}", ids.len(), dir.display());
    Ok(())
}

fn projection(cfg: &ExperimentConfig) -> Result<()> {
    let ds = cfg.dataset()?;
    let ckpt = Checkpoint::load(cfg.checkpoint_path())?;
    let plan = cfg.train.plan(&ds)?;
    let export = export_projection_2d(&ckpt.params, &ds, &plan, cfg.eval.split)?;
    if export.rank_deficient {
        eprintln!("warning: representations span fewer than two directions");
    }
    let path = exports_dir(cfg)?.join(format!("projection_{}.csv", cfg.eval.split));
    write_text(&path, &export.to_csv()?)?;
    println!("wrote {} projected points to {}", export.rows.len(), path.display());
    Ok(())
}

/// Reads one numeric column (by header name) from a CSV file.
pub fn read_csv_column(path: impl AsRef<Path>, column: &str) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| bad(format!("no column {column:?}")))?;
    let mut values = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let raw = rec.get(col).unwrap_or("");
        let v: f64 = raw
            .trim()
            .parse()
            .map_err(|_| bad(format!("row {}: {raw:?} is not a number", i + 1)))?;
        values.push(v);
    }
    Ok(values)
}

fn ttest(cfg: &ExperimentConfig) -> Result<()> {
    let t = &cfg.ttest;
    if t.a.is_empty() || t.b.is_empty() {
        return Err(Error::config("ttest needs ttest.a and ttest.b"));
    }
    let a = read_csv_column(&t.a, &t.column)?;
    let b = read_csv_column(&t.b, &t.column)?;
    let r = paired_ttest(&a, &b)?;
    let csv = format!(
        "column,n,t,df,p_two_tailed,mean_diff\n{},{},{},{},{},{}\n",
        t.column,
        a.len(),
        fmt_f64(r.t),
        r.df,
        fmt_f64(r.p_two_tailed),
        fmt_f64(r.mean_diff)
    );
    write_text(cfg.out_dir().join("ttest.csv"), &csv)?;
    println!("t={:.6} df={} p={:.6} mean_diff={:.6}", r.t, r.df, r.p_two_tailed, r.mean_diff);
    Ok(())
}
