//! OFR raster files: `"OFRASTR1"`, a little-endian `u32` header length, a
//! UTF-8 JSON header, then little-endian `f32` planes ordered frame-major,
//! then by channel, each plane row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::raster::{RasterFrame, SampleRecord};
use super::{FrameMode, GridGeometry, RasterMode, Timeline};
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;

pub const OFR_MAGIC: &[u8; 8] = b"OFRASTR1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfrFrameTag {
    pub role: String,
    pub t: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfrHeader {
    pub height: usize,
    pub width: usize,
    pub channels: Vec<String>,
    pub dtype: String,
    pub frame_mode: FrameMode,
    pub raster_mode: RasterMode,
    pub t_h: usize,
    pub t_f: usize,
    pub meters_per_cell: f64,
    pub dt_history: f64,
    pub dt_forecast: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub frames: Vec<OfrFrameTag>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfrFile {
    pub header: OfrHeader,
    pub data: Vec<f32>,
}

impl OfrFile {
    fn frame_len(&self) -> usize {
        self.header.channels.len() * self.header.height * self.header.width
    }

    /// Planes of frame `i` as a `[1, channels, H, W]` grid.
    pub fn frame(&self, i: usize) -> FeatureGrid<f32> {
        let n = self.frame_len();
        let h = &self.header;
        FeatureGrid::from_vec(
            [1, h.channels.len(), h.height, h.width],
            self.data[i * n..(i + 1) * n].to_vec(),
        )
        .expect("validated on construction")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.data.len());
        out.extend_from_slice(OFR_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m);
        if bytes.len() < 12 || &bytes[..8] != OFR_MAGIC {
            return Err(bad("missing OFRASTR1 magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: OfrHeader =
            serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
        if header.dtype != "f32" {
            return Err(bad(&format!("unsupported dtype {}", header.dtype)));
        }
        let payload = &bytes[12 + hlen..];
        let expect = header.frames.len() * header.channels.len() * header.height * header.width;
        if payload.len() != 4 * expect {
            return Err(bad(&format!(
                "payload holds {} bytes, header implies {}",
                payload.len(),
                4 * expect
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(OfrFile { header, data })
    }

    pub fn from_sample(s: &SampleRecord) -> Self {
        let mut frames = Vec::new();
        let mut data = Vec::new();
        let mut push = |role: &str, f: &RasterFrame| {
            frames.push(OfrFrameTag {
                role: role.to_string(),
                t: f.t,
            });
            data.extend_from_slice(f.planes().data());
        };
        for f in &s.inputs {
            push("input", f);
        }
        for f in &s.targets {
            push("target", f);
        }
        push("present", &s.present);
        OfrFile {
            header: OfrHeader {
                height: s.grid.height,
                width: s.grid.width,
                channels: RasterFrame::channel_names(s.raster_mode)
                    .iter()
                    .map(|c| c.to_string())
                    .collect(),
                dtype: "f32".into(),
                frame_mode: s.frame_mode,
                raster_mode: s.raster_mode,
                t_h: s.timeline.history,
                t_f: s.timeline.future,
                meters_per_cell: s.grid.meters_per_cell,
                dt_history: s.timeline.dt_history,
                dt_forecast: s.timeline.dt_forecast,
                seed: Some(s.seed),
                frames,
            },
            data,
        }
    }

    pub fn to_sample(&self, path: &Path) -> Result<SampleRecord> {
        let h = &self.header;
        let names = RasterFrame::channel_names(h.raster_mode);
        if h.channels.iter().map(String::as_str).ne(names.iter().copied()) {
            return Err(Error::format(path, "channel list is not a sample layout"));
        }
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut present = None;
        for (i, tag) in h.frames.iter().enumerate() {
            let f = RasterFrame::from_planes(tag.t, h.raster_mode, &self.frame(i))?;
            match tag.role.as_str() {
                "input" => inputs.push(f),
                "target" => targets.push(f),
                "present" => present = Some(f),
                r => return Err(Error::format(path, format!("unknown frame role {r:?}"))),
            }
        }
        if inputs.len() != h.t_h || targets.len() != h.t_f {
            return Err(Error::format(path, "frame counts disagree with t_h/t_f"));
        }
        Ok(SampleRecord {
            seed: h.seed.unwrap_or(0),
            raster_mode: h.raster_mode,
            frame_mode: h.frame_mode,
            grid: GridGeometry {
                height: h.height,
                width: h.width,
                meters_per_cell: h.meters_per_cell,
            },
            timeline: Timeline {
                history: h.t_h,
                future: h.t_f,
                dt_history: h.dt_history,
                dt_forecast: h.dt_forecast,
            },
            inputs,
            targets,
            present: present.ok_or_else(|| Error::format(path, "missing present frame"))?,
        })
    }
}

pub fn write_ofr(path: &Path, file: &OfrFile) -> Result<()> {
    std::fs::write(path, file.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_ofr(path: &Path) -> Result<OfrFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    OfrFile::from_bytes(&bytes, path)
}
