//! Losses, optimization schedule and the training procedures for every
//! method variant.

pub mod losses;
pub mod methods;
mod schedule;

pub use losses::{control_loss, l1_loss, mimic_loss};
pub use methods::*;
pub use schedule::{Schedule, TrainLog};

use crate::data::Dataset;
use crate::models::ModelScale;
use crate::sim::render::{IMG_H, IMG_W};
use crate::sim::Command;
use ndarray::{Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_drop_factor: f64,
    pub lr_patience_iters: u64,
    pub val_every_iters: u64,
    /// Early stop after this many validations without improvement.
    pub early_stop_patience: u64,
    pub max_iters: u64,
    /// Eq. (1) weights for |brake|, |gas|, |steer|.
    pub control_weights: [f64; 3],
    /// Eq. (2) weights for the seg and intention embedding terms.
    pub mimic_weights: [f64; 2],
    /// Which intention components reach the squeeze network input.
    pub intention_mask: [bool; 3],
    /// Which embedding terms are mimicked: (seg, intent).
    pub mimic_sources: [bool; 2],
    /// Episode-level validation fraction.
    pub val_fraction: f64,
    /// Multi-task side loss weights (seg CE, intention L1).
    pub side_weights: [f64; 2],
    pub scale: ModelScale,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 120,
            lr: 2e-4,
            lr_drop_factor: 10.0,
            lr_patience_iters: 1000,
            val_every_iters: 2000,
            early_stop_patience: 3,
            max_iters: 60_000,
            control_weights: [1.0, 1.0, 2.0],
            mimic_weights: [0.03, 0.03],
            intention_mask: [true, true, true],
            mimic_sources: [true, true],
            val_fraction: 0.1,
            side_weights: [1.0, 1.0],
            scale: ModelScale::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.control_weights.iter().any(|w| *w < 0.0) || self.mimic_weights.iter().any(|w| *w < 0.0) {
            return Err("loss weights must be non-negative".into());
        }
        if self.batch_size == 0 {
            return Err("batch size must be positive".into());
        }
        Ok(())
    }

    /// Effective Eq. (2) weights after the source mask.
    pub fn effective_mimic_weights(&self) -> [f64; 2] {
        [
            if self.mimic_sources[0] { self.mimic_weights[0] } else { 0.0 },
            if self.mimic_sources[1] { self.mimic_weights[1] } else { 0.0 },
        ]
    }
}

/// Epoch-shuffling batch sampler over flat frame indices; the order is a
/// pure function of the seed.
pub struct Batcher {
    index: Vec<(usize, usize)>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    batch: usize,
}

impl Batcher {
    pub fn new(index: Vec<(usize, usize)>, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba7c);
        let mut order: Vec<usize> = (0..index.len()).collect();
        order.shuffle(&mut rng);
        Batcher { index, order, cursor: 0, rng, batch }
    }

    pub fn next_batch(&mut self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            if self.cursor >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.index[self.order[self.cursor]]);
            self.cursor += 1;
        }
        out
    }
}

/// Assembled training batch. Tensors are built on demand per method.
pub struct Batch {
    pub images: Array4<f32>,
    pub speed: Array2<f32>,
    pub commands: Vec<Command>,
    pub controls: Array2<f32>,
    pub annotated: Vec<bool>,
    pub seg_onehot: Option<Array4<f32>>,
    pub seg_labels: Option<Vec<u8>>,
    pub intentions: Option<Array2<f32>>,
    pub whitebox: Option<Array3<f32>>,
    pub idxs: Vec<(usize, usize)>,
}

pub struct BatchOptions {
    pub images: bool,
    pub seg_onehot: bool,
    pub seg_labels: bool,
    pub intentions: bool,
    pub whitebox: bool,
    /// Zero out masked intention components (squeeze input ablations).
    pub intention_mask: [bool; 3],
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            images: true,
            seg_onehot: false,
            seg_labels: false,
            intentions: false,
            whitebox: false,
            intention_mask: [true, true, true],
        }
    }
}

pub fn assemble_batch(ds: &Dataset, idxs: &[(usize, usize)], opt: &BatchOptions) -> Batch {
    let n = idxs.len();
    let mut images = Array4::<f32>::zeros((if opt.images { n } else { 0 }, 3, IMG_H, IMG_W));
    let mut speed = Array2::<f32>::zeros((n, 1));
    let mut commands = Vec::with_capacity(n);
    let mut controls = Array2::<f32>::zeros((n, 3));
    let mut annotated = Vec::with_capacity(n);
    let mut seg_onehot = opt.seg_onehot.then(|| Array4::<f32>::zeros((n, 6, IMG_H, IMG_W)));
    let mut seg_labels = opt.seg_labels.then(|| vec![0u8; n * IMG_H * IMG_W]);
    let mut intentions = opt.intentions.then(|| Array2::<f32>::zeros((n, 3)));
    let mut whitebox = opt.whitebox.then(|| Array3::<f32>::zeros((n, 4, 3)));

    for (k, &(ei, fi)) in idxs.iter().enumerate() {
        let f = &ds.episodes[ei].frames[fi];
        if opt.images {
            let rgb = f.decode_image().expect("stored frame decodes");
            for (i, &v) in rgb.iter().enumerate() {
                let px = i / 3;
                images[(k, i % 3, px / IMG_W, px % IMG_W)] = v as f32 / 255.0;
            }
        }
        speed[(k, 0)] = f.speed / 10.0;
        commands.push(f.command);
        for j in 0..3 {
            controls[(k, j)] = f.control[j];
        }
        annotated.push(f.annotated());
        if let Some(seg) = seg_onehot.as_mut() {
            let labels = f.seg.as_ref().expect("seg one-hot requested on unannotated frame");
            for (i, &l) in labels.iter().enumerate() {
                seg[(k, l as usize, i / IMG_W, i % IMG_W)] = 1.0;
            }
        }
        if let Some(buf) = seg_labels.as_mut() {
            let labels = f.seg.as_ref().expect("seg labels requested on unannotated frame");
            buf[k * IMG_H * IMG_W..(k + 1) * IMG_H * IMG_W].copy_from_slice(labels);
        }
        if let Some(ints) = intentions.as_mut() {
            let v = f.intentions.expect("intentions requested on unannotated frame");
            for j in 0..3 {
                ints[(k, j)] = if opt.intention_mask[j] { v[j] } else { 0.0 };
            }
        }
        if let Some(wb) = whitebox.as_mut() {
            let v = f.whitebox.expect("whitebox requested on plain dataset");
            for c in 0..4 {
                for j in 0..3 {
                    wb[(k, c, j)] = v[c][j];
                }
            }
        }
    }
    Batch {
        images,
        speed,
        commands,
        controls,
        annotated,
        seg_onehot,
        seg_labels,
        intentions,
        whitebox,
        idxs: idxs.to_vec(),
    }
}
