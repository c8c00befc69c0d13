//! Command implementations.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::ArgMatches;
use fsmol_core::cgib::write_gate_log;
use fsmol_core::data::{generate_synthetic, load_dataset, read_similarity, save_dataset, write_similarity, Dataset, SyntheticSpec};
use fsmol_core::eval::{
    ablate as run_ablation, gate_similarity_analysis, meta_test, sweep_configs, sweep_csv, train_and_evaluate, EvalReport,
    SweepAxis, SweepRow,
};
use fsmol_core::meta::{Checkpoint, GateMonitor, TrainConfig};
use fsmol_core::{Error, Result};

use crate::config;

const GRAPH_FILE: &str = "molecules.jsonl";
const LABEL_FILE: &str = "labels.csv";
const SIMILARITY_FILE: &str = "similarity.csv";

fn value<T: FromStr>(m: &ArgMatches, name: &str) -> Result<T> {
    let raw = m
        .get_one::<String>(name)
        .ok_or_else(|| Error::Usage(format!("missing --{}", config::flag_name(name))))?;
    raw.parse()
        .map_err(|_| Error::Usage(format!("invalid value `{raw}` for --{}", config::flag_name(name))))
}

fn list(raw: &str) -> Vec<String> {
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
}

fn out_dir(m: &ArgMatches) -> Result<PathBuf> {
    let dir = PathBuf::from(value::<String>(m, "out")?);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Applies the config file, then `--set` pairs, then named flags.
fn resolve_config(m: &ArgMatches, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base;
    if let Some(path) = m.get_one::<String>("config") {
        config::apply_file(&mut cfg, Path::new(path))?;
    }
    for s in m.get_many::<String>("set").into_iter().flatten() {
        let (k, v) = config::split_assignment(s)?;
        cfg.set(k, v)?;
    }
    for (key, _) in config::keys() {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn load_data(m: &ArgMatches) -> Result<Dataset> {
    let dir = m.get_one::<String>("data").map(PathBuf::from);
    let pick = |flag: &str, file: &str| -> Result<PathBuf> {
        match (m.get_one::<String>(flag), &dir) {
            (Some(p), _) => Ok(PathBuf::from(p)),
            (None, Some(d)) => Ok(d.join(file)),
            (None, None) => Err(Error::Usage(format!("need --data or --{flag}"))),
        }
    };
    load_dataset(&pick("graphs", GRAPH_FILE)?, &pick("labels", LABEL_FILE)?)
}

/// `(train, test)` property indices.
fn split(m: &ArgMatches, ds: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = ds.labels.num_properties();
    let test = match m.get_one::<String>("test_props") {
        Some(raw) => list(raw)
            .iter()
            .map(|id| {
                ds.labels
                    .property_index(id)
                    .ok_or_else(|| Error::Usage(format!("unknown test property `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?,
        None => {
            let k: usize = value(m, "num_test")?;
            if k >= n {
                return Err(Error::Usage(format!("cannot hold out {k} of {n} properties")));
            }
            (n - k..n).collect()
        }
    };
    let train: Vec<usize> = (0..n).filter(|p| !test.contains(p)).collect();
    if test.is_empty() || train.is_empty() {
        return Err(Error::Usage("both the training and the test split need a property".into()));
    }
    Ok((train, test))
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::write(dir.join("report.json"), report.to_json()?)?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    Ok(())
}

/// Trains, tests and writes every artifact of one run into `dir`.
fn run_training(cfg: &TrainConfig, ds: &Dataset, train: &[usize], test: &[usize], dir: &Path) -> Result<EvalReport> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.cfg"), config::render(cfg))?;
    let mut log = BufWriter::new(File::create(dir.join("train_log.jsonl"))?);
    let every = cfg.checkpoint_every as u64;
    let ckpt_dir = dir.join("checkpoints");
    if every > 0 {
        fs::create_dir_all(&ckpt_dir)?;
    }
    let out = train_and_evaluate(cfg, ds, train, test, |r, trainer| {
        serde_json::to_writer(&mut log, r)?;
        log.write_all(b"\n")?;
        if every > 0 && trainer.step() % every == 0 {
            trainer.checkpoint().save(&ckpt_dir.join(format!("step_{}.json", trainer.step())))?;
        }
        Ok(())
    })?;
    log.flush()?;
    out.checkpoint.save(&dir.join("checkpoint.json"))?;
    write_gate_log(&dir.join("gates.csv"), &out.gates)?;
    write_report(dir, &out.report)?;
    Ok(out.report)
}

pub fn gen_synth(m: &ArgMatches) -> Result<()> {
    let mut spec = SyntheticSpec::clustered(
        value(m, "molecules")?,
        value(m, "properties")?,
        value(m, "clusters")?,
        value(m, "spread")?,
        value(m, "seed")?,
    );
    spec.label_noise = value(m, "label_noise")?;
    spec.unknown_rate = value(m, "unknown_rate")?;
    spec.min_per_class = value(m, "min_per_class")?;
    let syn = generate_synthetic(&spec)?;
    let dir = out_dir(m)?;
    save_dataset(&syn.dataset, &dir.join(GRAPH_FILE), &dir.join(LABEL_FILE))?;
    write_similarity(&dir.join(SIMILARITY_FILE), syn.dataset.labels.property_ids(), &syn.planted_similarity)?;
    if let Some(rho) = syn.similarity_rank_correlation {
        log::info!("planted vs empirical similarity rank correlation {rho:.3}");
    }
    log::info!("wrote {} molecules and {} properties to {}", syn.dataset.molecules.len(), spec.num_properties, dir.display());
    Ok(())
}

pub fn train(m: &ArgMatches) -> Result<()> {
    let mut cfg = resolve_config(m, TrainConfig::default())?;
    if let Some(mode) = m.get_one::<String>("mode") {
        cfg.apply_mode(mode)?;
    }
    cfg.validate()?;
    let ds = load_data(m)?;
    let (tr, te) = split(m, &ds)?;
    let report = run_training(&cfg, &ds, &tr, &te, &out_dir(m)?)?;
    println!("mean ROC-AUC {:.4}  mean PR-AUC {:.4}", report.mean_roc_auc, report.mean_pr_auc);
    Ok(())
}

fn load_checkpoint(m: &ArgMatches) -> Result<Checkpoint> {
    Checkpoint::load(Path::new(&value::<String>(m, "checkpoint")?))
}

pub fn eval(m: &ArgMatches) -> Result<()> {
    let ck = load_checkpoint(m)?;
    let cfg = resolve_config(m, ck.config.clone())?;
    cfg.validate()?;
    let ds = load_data(m)?;
    let (tr, te) = split(m, &ds)?;
    let report = meta_test(&ck.params, &cfg, &ds, &tr, &te)?;
    write_report(&out_dir(m)?, &report)?;
    println!("mean ROC-AUC {:.4}  mean PR-AUC {:.4}", report.mean_roc_auc, report.mean_pr_auc);
    Ok(())
}

pub fn ablate(m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(m, TrainConfig::default())?;
    let modes = list(&value::<String>(m, "modes")?);
    let seeds = list(&value::<String>(m, "seeds")?)
        .iter()
        .map(|s| s.parse::<u64>().map_err(|_| Error::Usage(format!("invalid seed `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    if modes.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("need at least one mode and one seed".into()));
    }
    for mode in &modes {
        cfg.clone().apply_mode(mode)?;
    }
    let ds = load_data(m)?;
    let (tr, te) = split(m, &ds)?;
    let dir = out_dir(m)?;
    let mode_refs: Vec<&str> = modes.iter().map(String::as_str).collect();
    let report = run_ablation(&cfg, &ds, &tr, &te, &mode_refs, &seeds)?;
    fs::write(dir.join("ablation.csv"), report.to_csv())?;
    fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    for s in &report.summary {
        println!("{:<14} ROC-AUC {:.4} ± {:.4}", s.mode, s.roc_auc_mean, s.roc_auc_std);
    }
    Ok(())
}

pub fn sweep(m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(m, TrainConfig::default())?;
    let axis: SweepAxis = value::<String>(m, "axis")?.parse()?;
    let values = match m.get_one::<String>("values") {
        Some(raw) => list(raw),
        None => axis.preset(),
    };
    let ds = load_data(m)?;
    let (tr, te) = split(m, &ds)?;
    let configs = sweep_configs(axis, &values, &cfg, tr.len())?;
    let dir = out_dir(m)?;
    let mut rows = Vec::new();
    for (v, c) in values.iter().zip(&configs) {
        let report = run_training(c, &ds, &tr, &te, &dir.join(format!("{}={v}", axis.key())))?;
        println!("{} = {v}: ROC-AUC {:.4}", axis.key(), report.mean_roc_auc);
        rows.push(SweepRow {
            axis,
            value: v.clone(),
            mean_roc_auc: report.mean_roc_auc,
            mean_pr_auc: report.mean_pr_auc,
        });
    }
    fs::write(dir.join("sweep.csv"), sweep_csv(&rows))?;
    Ok(())
}

pub fn export_gates(m: &ArgMatches) -> Result<()> {
    let ck = load_checkpoint(m)?;
    let cfg = resolve_config(m, ck.config.clone())?;
    let ds = load_data(m)?;
    let (tr, _) = split(m, &ds)?;
    let monitor = GateMonitor::new(&ds, &cfg, &tr)?;
    let records = monitor.snapshot(&ds, &cfg, &ck.params, value(m, "epoch")?)?;
    let dir = out_dir(m)?;
    write_gate_log(&dir.join("gates.csv"), &records)?;
    if let Some(path) = m.get_one::<String>("similarity") {
        let (ids, sim) = read_similarity(Path::new(path))?;
        let analysis = gate_similarity_analysis(&records, &ids, &sim, None)?;
        fs::write(dir.join("gate_similarity.json"), serde_json::to_string_pretty(&analysis)?)?;
        match analysis.mean {
            Some(rho) => println!("mean Spearman rho {rho:.3}"),
            None => println!("mean Spearman rho undefined"),
        }
    }
    Ok(())
}
