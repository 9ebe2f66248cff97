use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ofr::{OfrFile, OfrFrameTag, OfrHeader};
use super::raster::SampleRecord;
use super::{sample_scenario, RasterMode, WorldConfig};
use crate::error::{Error, Result};

/// Lower bin edges of the flow-magnitude histogram; the last bin is open.
pub const FLOW_BIN_EDGES: [f64; 8] = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DATASET_FILE: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub world: WorldConfig,
    pub raster_mode: RasterMode,
}

impl DatasetConfig {
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the dataset root.
    pub path: String,
    pub split: Split,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    config: DatasetConfig,
    config_hash: String,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Render one OFR file per seed under `out/samples` and write the manifest.
/// Returns the manifest path.
pub fn build_dataset(cfg: &DatasetConfig, seeds: &[(u64, Split)], out: &Path) -> Result<PathBuf> {
    cfg.world.validate()?;
    let samples = out.join("samples");
    fs::create_dir_all(&samples).map_err(|e| Error::io(&samples, e))?;
    let entries: Vec<ManifestEntry> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &(seed, split))| {
            let scenario = sample_scenario(&cfg.world, seed)?;
            let record = SampleRecord::from_scenario(&scenario, cfg.raster_mode);
            let bytes = OfrFile::from_sample(&record).to_bytes();
            let rel = format!("samples/{i:06}.ofr");
            write_file(&out.join(&rel), &bytes)?;
            Ok(ManifestEntry {
                path: rel,
                split,
                seed,
                sha256: hex::encode(Sha256::digest(&bytes)),
            })
        })
        .collect::<Result<_>>()?;

    let meta = DatasetFile {
        config: cfg.clone(),
        config_hash: cfg.hash(),
    };
    write_file(
        &out.join(DATASET_FILE),
        &serde_json::to_vec_pretty(&meta).expect("config serializes"),
    )?;
    let mut manifest = Vec::new();
    for e in &entries {
        serde_json::to_writer(&mut manifest, e).expect("entry serializes");
        manifest.write_all(b"\n").unwrap();
    }
    let path = out.join(MANIFEST_FILE);
    write_file(&path, &manifest)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// A dataset directory opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub config: DatasetConfig,
    pub config_hash: String,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let meta_path = root.join(DATASET_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetFile =
            serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            config: meta.config,
            config_hash: meta.config_hash,
            entries: read_manifest(&root.join(MANIFEST_FILE))?,
        })
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Read one record, verifying its checksum.
    pub fn load(&self, entry: &ManifestEntry) -> Result<SampleRecord> {
        let path = self.root.join(&entry.path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(Error::format(&path, "checksum does not match manifest"));
        }
        OfrFile::from_bytes(&bytes, &path)?.to_sample(&path)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SampleRecord>> {
        let entries: Vec<_> = self.entries(split).collect();
        entries.par_iter().map(|e| self.load(e)).collect()
    }
}

/// Future-occupancy density and flow-magnitude histogram of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionReport {
    pub height: usize,
    pub width: usize,
    pub samples: usize,
    /// Per-cell count of observed target occupancy, row-major.
    pub observed_density: Vec<f64>,
    pub occluded_density: Vec<f64>,
    /// Counts per [`FLOW_BIN_EDGES`] bin over occupied target cells.
    pub flow_histogram: [u64; 8],
}

impl DistributionReport {
    pub fn empty(height: usize, width: usize) -> Self {
        DistributionReport {
            height,
            width,
            samples: 0,
            observed_density: vec![0.0; height * width],
            occluded_density: vec![0.0; height * width],
            flow_histogram: [0; 8],
        }
    }

    pub fn flow_bin(magnitude: f64) -> usize {
        FLOW_BIN_EDGES.iter().rposition(|&e| magnitude >= e).unwrap_or(0)
    }

    pub fn add(&mut self, s: &SampleRecord) -> Result<()> {
        let hw = self.height * self.width;
        for f in &s.targets {
            if f.height() * f.width() != hw {
                return Err(crate::error::shape_err!(
                    "sample {} is {}x{}, report is {}x{}",
                    s.seed,
                    f.height(),
                    f.width(),
                    self.height,
                    self.width
                ));
            }
            let (obs, occ) = (f.occupancy_observed.data(), f.occupancy_occluded.data());
            let (fx, fy) = (f.flow.plane(0, 0), f.flow.plane(0, 1));
            for k in 0..hw {
                self.observed_density[k] += obs[k] as f64;
                self.occluded_density[k] += occ[k] as f64;
                if obs[k] + occ[k] > 0.0 {
                    let m = (fx[k] as f64).hypot(fy[k] as f64);
                    self.flow_histogram[Self::flow_bin(m)] += 1;
                }
            }
        }
        self.samples += 1;
        Ok(())
    }

    pub fn occupied_cells(&self) -> u64 {
        self.flow_histogram.iter().sum()
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count,fraction\n");
        let total = self.occupied_cells();
        for (i, &c) in self.flow_histogram.iter().enumerate() {
            let hi = FLOW_BIN_EDGES
                .get(i + 1)
                .map_or("inf".to_string(), |e| e.to_string());
            let frac = if total == 0 { 0.0 } else { c as f64 / total as f64 };
            out.push_str(&format!("{},{hi},{c},{frac}\n", FLOW_BIN_EDGES[i]));
        }
        out
    }

    /// Density grids as a single-frame OFR file with two channels.
    pub fn density_ofr(&self, cfg: &DatasetConfig) -> OfrFile {
        let w = &cfg.world;
        let mut data: Vec<f32> = self.observed_density.iter().map(|&v| v as f32).collect();
        data.extend(self.occluded_density.iter().map(|&v| v as f32));
        OfrFile {
            header: OfrHeader {
                height: self.height,
                width: self.width,
                channels: vec!["observed_density".into(), "occluded_density".into()],
                dtype: "f32".into(),
                frame_mode: w.frame_mode,
                raster_mode: cfg.raster_mode,
                t_h: w.timeline.history,
                t_f: w.timeline.future,
                meters_per_cell: w.grid.meters_per_cell,
                dt_history: w.timeline.dt_history,
                dt_forecast: w.timeline.dt_forecast,
                seed: None,
                frames: vec![OfrFrameTag {
                    role: "density".into(),
                    t: 0,
                }],
            },
            data,
        }
    }
}

/// Distribution report over every record of the dataset (all splits).
pub fn dataset_stats(ds: &Dataset) -> Result<DistributionReport> {
    let g = ds.config.world.grid;
    let mut report = DistributionReport::empty(g.height, g.width);
    for e in &ds.entries {
        report.add(&ds.load(e)?)?;
    }
    Ok(report)
}
