use std::fs;
use std::path::{Path, PathBuf};

use ccflow::losses::waypoint_targets;
use ccflow::metrics::{evaluate, oracle_predictions, report_csv, WaypointReport, METRIC_COLUMNS};
use ccflow::model::{Checkpoint, Model};
use ccflow::scenario::{build_dataset, dataset_stats, write_ofr, Dataset, ManifestEntry, Split, MANIFEST_FILE};
use ccflow::training::{self, evaluate_sample, evaluate_sweep_sample, load_sample, SweepMode};
use ccflow::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{to_toml, ExperimentConfig};
use crate::svg::line_chart;

pub const RUN_FILE: &str = "run.json";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// `run.json`: the command, its resolved settings and hashes of its inputs.
fn write_run(out: &Path, command: &str, settings: serde_json::Value, inputs: serde_json::Value) -> Result<()> {
    let run = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "settings": settings,
        "inputs": inputs,
    });
    write(&out.join(RUN_FILE), serde_json::to_vec_pretty(&run).expect("run manifest serializes"))
}

fn dataset_inputs(ds: &Dataset) -> Result<serde_json::Value> {
    Ok(json!({
        "dataset": ds.root,
        "dataset_config_hash": ds.config_hash,
        "manifest_sha256": sha256_file(&ds.root.join(MANIFEST_FILE))?,
    }))
}

/// Sample seeds for `gen`: `count` draws from a stream keyed by `seed`, the
/// last `val_count` going to validation.
pub fn sample_seeds(seed: u64, count: usize, val_count: usize) -> Vec<(u64, Split)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let split = if i + val_count >= count { Split::Val } else { Split::Train };
            (rng.gen::<u64>() >> 11, split)
        })
        .collect()
}

pub fn gen(cfg: &ExperimentConfig, count: usize, val_count: Option<usize>, seed: u64, out: &Path) -> Result<PathBuf> {
    let val = val_count.unwrap_or(count / 10);
    if count == 0 || val > count {
        return Err(Error::Config(format!("need 0 < count and val-count <= count, got {count}/{val}")));
    }
    let seeds = sample_seeds(seed, count, val);
    let manifest = build_dataset(&cfg.dataset, &seeds, out)?;
    write(&out.join("config.toml"), to_toml(cfg))?;
    write_run(
        out,
        "gen",
        json!({ "config": cfg, "count": count, "val_count": val, "seed": seed }),
        json!({ "manifest_sha256": sha256_file(&manifest)? }),
    )?;
    Ok(manifest)
}

pub fn train(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<training::TrainOutcome> {
    let ds = Dataset::open(data)?;
    let mut cfg = cfg.clone();
    let world = &ds.config.world;
    let side = cfg.train.crop;
    cfg.model.height = side.unwrap_or(world.grid.height);
    cfg.model.width = side.unwrap_or(world.grid.width);
    cfg.model.waypoints = world.timeline.future;
    cfg.dataset = ds.config.clone();
    mkdir(out)?;
    write(&out.join("config.toml"), to_toml(&cfg))?;
    write_run(out, "train", json!({ "config": cfg }), dataset_inputs(&ds)?)?;
    training::train(&cfg.model, &cfg.train, &ds, out)
}

/// Center crop that brings dataset rasters to the model's size, if any.
fn crop_for(model: &Model, ds: &Dataset) -> Result<Option<usize>> {
    let g = &ds.config.world.grid;
    let (h, w) = (model.config.height, model.config.width);
    if (g.height, g.width) == (h, w) {
        Ok(None)
    } else if h == w && h <= g.height && w <= g.width {
        Ok(Some(h))
    } else {
        Err(Error::Config(format!(
            "dataset rasters are {}x{}, checkpoint expects {h}x{w}",
            g.height, g.width
        )))
    }
}

pub enum Predictor {
    Oracle,
    Model(Box<Model>),
}

impl Predictor {
    pub fn load(checkpoint: Option<&Path>, oracle: bool) -> Result<(Self, serde_json::Value)> {
        match (oracle, checkpoint) {
            (true, _) => Ok((Predictor::Oracle, json!({ "oracle": true }))),
            (false, Some(p)) => {
                let ck = Checkpoint::load(p)?;
                let info = json!({ "checkpoint": p, "checkpoint_sha256": sha256_file(p)? });
                Ok((
                    Predictor::Model(Box::new(Model {
                        config: ck.config,
                        params: ck.params,
                    })),
                    info,
                ))
            }
            (false, None) => Err(Error::Config("--checkpoint is required unless --oracle is given".into())),
        }
    }

    fn crop(&self, ds: &Dataset) -> Result<Option<usize>> {
        match self {
            Predictor::Oracle => Ok(None),
            Predictor::Model(m) => crop_for(m, ds),
        }
    }
}

/// Per-sample reports over the validation split, in manifest order.
pub fn evaluate_dataset(pred: &Predictor, ds: &Dataset, input_len: Option<usize>) -> Result<Vec<(String, WaypointReport)>> {
    let crop = pred.crop(ds)?;
    let entries: Vec<&ManifestEntry> = ds.entries(Split::Val).collect();
    if entries.is_empty() {
        return Err(Error::Config("dataset has no validation samples".into()));
    }
    entries
        .par_iter()
        .map(|e| {
            let s = load_sample(ds, e, crop)?;
            let report = match pred {
                Predictor::Oracle => {
                    let targets = waypoint_targets(&s);
                    evaluate(&oracle_predictions(&targets), &targets)?
                }
                Predictor::Model(m) => evaluate_sample(m, &s, input_len)?,
            };
            Ok((e.seed.to_string(), report))
        })
        .collect()
}

pub fn eval(pred: &Predictor, info: serde_json::Value, data: &Path, input_len: Option<usize>, out: &Path) -> Result<WaypointReport> {
    let ds = Dataset::open(data)?;
    let reports = evaluate_dataset(pred, &ds, input_len)?;
    mkdir(out)?;
    write(&out.join("report.csv"), report_csv(&reports)?)?;
    let mut inputs = dataset_inputs(&ds)?;
    inputs["predictor"] = info;
    write_run(out, "eval", json!({ "input_len": input_len }), inputs)?;
    WaypointReport::aggregate(&reports.into_iter().map(|(_, r)| r).collect::<Vec<_>>())
}

fn curve_csv(report: &WaypointReport) -> String {
    let mut s = format!("waypoint,{}\n", METRIC_COLUMNS.join(","));
    for (k, m) in report.per_waypoint.iter().enumerate() {
        let vals: Vec<String> = m.values().iter().map(|v| v.to_string()).collect();
        s += &format!("{},{}\n", k + 1, vals.join(","));
    }
    s
}

pub fn curves(pred: &Predictor, info: serde_json::Value, data: &Path, out: &Path) -> Result<WaypointReport> {
    let ds = Dataset::open(data)?;
    let reports = evaluate_dataset(pred, &ds, None)?;
    let agg = WaypointReport::aggregate(&reports.into_iter().map(|(_, r)| r).collect::<Vec<_>>())?;
    mkdir(out)?;
    write(&out.join("curves.csv"), curve_csv(&agg))?;
    for (i, name) in METRIC_COLUMNS.iter().enumerate() {
        let points: Vec<(f64, f64)> = agg
            .per_waypoint
            .iter()
            .enumerate()
            .map(|(k, m)| ((k + 1) as f64, m.values()[i]))
            .collect();
        write(&out.join(format!("{name}.svg")), line_chart(name, "waypoint", name, &points))?;
    }
    let mut inputs = dataset_inputs(&ds)?;
    inputs["predictor"] = info;
    write_run(out, "curves", json!({}), inputs)?;
    Ok(agg)
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub mode: SweepMode,
    pub length: usize,
    pub report: WaypointReport,
}

pub fn sweep_seqlen(
    model: &Model,
    info: serde_json::Value,
    data: &Path,
    lengths: Option<&[usize]>,
    out: &Path,
) -> Result<Vec<SweepRow>> {
    let ds = Dataset::open(data)?;
    let history = ds.config.world.timeline.history;
    let lengths: Vec<usize> = match lengths {
        Some(l) => l.to_vec(),
        None => (1..=history).collect(),
    };
    if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > history) {
        return Err(Error::Config(format!(
            "input length {bad} outside 1..={history} available frames"
        )));
    }
    let crop = crop_for(model, &ds)?;
    let entries: Vec<&ManifestEntry> = ds.entries(Split::Val).collect();
    if entries.is_empty() {
        return Err(Error::Config("dataset has no validation samples".into()));
    }
    let samples = entries
        .iter()
        .map(|e| load_sample(&ds, e, crop))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for mode in SweepMode::ALL {
        for &len in &lengths {
            let reports = samples
                .par_iter()
                .map(|s| evaluate_sweep_sample(model, s, len, mode))
                .collect::<Result<Vec<_>>>()?;
            rows.push(SweepRow {
                mode,
                length: len,
                report: WaypointReport::aggregate(&reports)?,
            });
        }
    }
    let mut csv = format!("mode,length,{}\n", METRIC_COLUMNS.join(","));
    let mut summary = serde_json::Map::new();
    for mode in SweepMode::ALL {
        let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.mode == mode).collect();
        for r in &mine {
            let vals: Vec<String> = r.report.mean.values().iter().map(|v| v.to_string()).collect();
            csv += &format!("{},{},{}\n", mode.name(), r.length, vals.join(","));
        }
        let x: Vec<f64> = mine.iter().map(|r| r.length as f64).collect();
        let y: Vec<f64> = mine.iter().map(|r| r.report.mean.observed_auc).collect();
        summary.insert(
            mode.name().to_string(),
            json!({ "spearman_length_vs_observed_auc": spearman(&x, &y) }),
        );
    }
    mkdir(out)?;
    write(&out.join("sweep.csv"), csv)?;
    write(&out.join("sweep_summary.json"), serde_json::to_vec_pretty(&summary).expect("summary serializes"))?;
    let mut inputs = dataset_inputs(&ds)?;
    inputs["predictor"] = info;
    write_run(out, "sweep-seqlen", json!({ "lengths": lengths }), inputs)?;
    Ok(rows)
}

pub fn stats(data: &Path, out: &Path) -> Result<()> {
    let ds = Dataset::open(data)?;
    let report = dataset_stats(&ds)?;
    mkdir(out)?;
    write(&out.join("flow_histogram.csv"), report.histogram_csv())?;
    write_ofr(&out.join("density.ofr"), &report.density_ofr(&ds.config))?;
    write(
        &out.join("stats.json"),
        serde_json::to_vec_pretty(&json!({
            "samples": report.samples,
            "occupied_cells": report.occupied_cells(),
            "flow_histogram": report.flow_histogram,
        }))
        .expect("stats serialize"),
    )?;
    write_run(out, "stats", json!({}), dataset_inputs(&ds)?)
}
