//! Dataset collection, storage, loading, splitting and transforms.
//!
//! On-disk layout: one directory per episode holding PNG frames plus a
//! single binary array file, with a JSON manifest at the dataset root.
//! Images are quantized to 8 bits at render time, so PNG storage is exact
//! (`image_codec: "png8-exact"`); float arrays are little-endian f32.

mod collect;
mod store;
mod transform;

pub use collect::{collect_dataset, CollectConfig};
pub use transform::{annotate_whitebox_controls, coarsen_segmentation, split_dataset};

use crate::sim::render::{ObsImage, SegMask, IMG_H, IMG_W};
use crate::sim::{Command, Control};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const CLASS_NAMES: [&str; 6] =
    ["nuisance", "road", "roadline_sidewalk", "vehicle", "pedestrian", "traffic_sign"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("simulation: {0}")]
    Sim(#[from] crate::sim::SimError),
    #[error("{0}")]
    Invalid(String),
}

/// One training tuple. The image is kept PNG-encoded in memory; decoding
/// reproduces the stored 8-bit quantization exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    image_png: Vec<u8>,
    pub speed: f32,
    pub command: Command,
    pub control: [f32; 3],
    pub seg: Option<Vec<u8>>,
    pub intentions: Option<[f32; 3]>,
    pub whitebox: Option<[[f32; 3]; 4]>,
}

impl FrameRecord {
    pub fn new(
        image: &ObsImage,
        speed: f64,
        command: Command,
        control: Control,
        seg: Option<&SegMask>,
        intentions: Option<[f64; 3]>,
    ) -> Result<FrameRecord, DataError> {
        if seg.is_some() != intentions.is_some() {
            return Err(DataError::Invalid(
                "side annotations come as a pair: seg and intentions must both be present or absent".into(),
            ));
        }
        Ok(FrameRecord {
            image_png: store::encode_png(image)?,
            speed: speed as f32,
            command,
            control: [control.brake as f32, control.gas as f32, control.steer as f32],
            seg: seg.map(|s| s.labels.clone()),
            intentions: intentions.map(|i| [i[0] as f32, i[1] as f32, i[2] as f32]),
            whitebox: None,
        })
    }

    pub(crate) fn from_parts(
        image_png: Vec<u8>,
        speed: f32,
        command: Command,
        control: [f32; 3],
        seg: Option<Vec<u8>>,
        intentions: Option<[f32; 3]>,
        whitebox: Option<[[f32; 3]; 4]>,
    ) -> FrameRecord {
        FrameRecord { image_png, speed, command, control, seg, intentions, whitebox }
    }

    pub fn annotated(&self) -> bool {
        self.seg.is_some()
    }

    /// Raw 8-bit RGB, row-major.
    pub fn decode_image(&self) -> Result<Vec<u8>, DataError> {
        store::decode_png(&self.image_png)
    }

    pub(crate) fn png_bytes(&self) -> &[u8] {
        &self.image_png
    }

    pub fn set_whitebox(&mut self, wb: [[f32; 3]; 4]) {
        self.whitebox = Some(wb);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub id: usize,
    pub map_seed: u64,
    pub weather_name: String,
    pub n_vehicles: usize,
    pub n_pedestrians: usize,
    pub frame_count: usize,
    pub annotated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub fps: f64,
    pub config_hash: String,
    pub image_codec: String,
    pub class_map: Vec<String>,
    pub whitebox: bool,
    pub episodes: Vec<EpisodeMeta>,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub meta: EpisodeMeta,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        store::save_dataset(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Dataset, DataError> {
        store::load_dataset(dir)
    }

    pub fn total_frames(&self) -> usize {
        self.episodes.iter().map(|e| e.frames.len()).sum()
    }

    pub fn fully_annotated(&self) -> bool {
        self.episodes.iter().all(|e| e.meta.annotated)
    }

    /// Flat (episode, frame) indices, optionally annotated episodes only.
    pub fn frame_index(&self, annotated_only: bool) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (ei, ep) in self.episodes.iter().enumerate() {
            if annotated_only && !ep.meta.annotated {
                continue;
            }
            for fi in 0..ep.frames.len() {
                out.push((ei, fi));
            }
        }
        out
    }

    /// Dataset restricted to the given episode indices (split views).
    pub fn subset(&self, episode_ids: &[usize]) -> Dataset {
        let episodes: Vec<Episode> = episode_ids.iter().map(|&i| self.episodes[i].clone()).collect();
        let mut manifest = self.manifest.clone();
        manifest.episodes = episodes.iter().map(|e| e.meta.clone()).collect();
        Dataset { manifest, episodes }
    }

    pub fn commands_present(&self) -> [bool; 4] {
        let mut seen = [false; 4];
        for ep in &self.episodes {
            for f in &ep.frames {
                seen[f.command.index()] = true;
            }
        }
        seen
    }

    pub const H: usize = IMG_H;
    pub const W: usize = IMG_W;
}
