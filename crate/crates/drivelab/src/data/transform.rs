//! Dataset transforms: episode-level splits, coarse segmentation for the
//! efficient-seg baseline, and whitebox control annotation for control
//! mimicking.

use super::{DataError, Dataset};
use crate::models::{NetParams, SqueezeNet};
use crate::sim::map::{CLASS_PEDESTRIAN, CLASS_TRAFFIC_SIGN, CLASS_VEHICLE};
use crate::sim::render::{SegMask, IMG_H, IMG_W};
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Episode-level split: no frame of a validation episode ever appears in
/// the training split. Deterministic for a given seed.
pub fn split_dataset(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(0.0..1.0).contains(&val_fraction) || val_fraction <= 0.0 {
        return Err(DataError::Invalid(format!("val fraction {val_fraction} outside (0,1)")));
    }
    let n = ds.episodes.len();
    if n < 2 {
        return Err(DataError::Invalid("need at least 2 episodes to split".into()));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5917);
    ids.shuffle(&mut rng);
    let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut val_ids = ids[..n_val].to_vec();
    let mut train_ids = ids[n_val..].to_vec();
    val_ids.sort_unstable();
    train_ids.sort_unstable();
    Ok((ds.subset(&train_ids), ds.subset(&val_ids)))
}

/// Replace pedestrian, vehicle and trafficSign regions by the filled
/// axis-aligned bounding box of each connected component; all other
/// classes stay untouched. Paint order (vehicle, trafficSign, pedestrian)
/// is fixed, which makes the transform idempotent.
pub fn coarsen_segmentation(seg: &SegMask) -> SegMask {
    let mut out = seg.labels.clone();
    for &class in &[CLASS_VEHICLE, CLASS_TRAFFIC_SIGN, CLASS_PEDESTRIAN] {
        for (r0, c0, r1, c1) in components_bboxes(&seg.labels, class) {
            for r in r0..=r1 {
                for c in c0..=c1 {
                    out[r * IMG_W + c] = class;
                }
            }
        }
    }
    SegMask { labels: out }
}

/// 4-connected components of `class`, as inclusive bounding boxes.
fn components_bboxes(labels: &[u8], class: u8) -> Vec<(usize, usize, usize, usize)> {
    let mut seen = vec![false; IMG_H * IMG_W];
    let mut out = Vec::new();
    for start in 0..IMG_H * IMG_W {
        if seen[start] || labels[start] != class {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let (mut r0, mut c0, mut r1, mut c1) = (IMG_H, IMG_W, 0usize, 0usize);
        while let Some(idx) = stack.pop() {
            let (r, c) = (idx / IMG_W, idx % IMG_W);
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r);
            c1 = c1.max(c);
            let push = |nr: isize, nc: isize, stack: &mut Vec<usize>, seen: &mut Vec<bool>| {
                if nr >= 0 && nr < IMG_H as isize && nc >= 0 && nc < IMG_W as isize {
                    let ni = nr as usize * IMG_W + nc as usize;
                    if !seen[ni] && labels[ni] == class {
                        seen[ni] = true;
                        stack.push(ni);
                    }
                }
            };
            push(r as isize - 1, c as isize, &mut stack, &mut seen);
            push(r as isize + 1, c as isize, &mut stack, &mut seen);
            push(r as isize, c as isize - 1, &mut stack, &mut seen);
            push(r as isize, c as isize + 1, &mut stack, &mut seen);
        }
        out.push((r0, c0, r1, c1));
    }
    out
}

/// Annotate every frame with the squeeze network's controls under all four
/// commands. Requires a fully annotated dataset (the squeeze network reads
/// seg + intentions). Idempotent for a frozen squeeze network.
pub fn annotate_whitebox_controls(ds: &mut Dataset, squeeze: &mut SqueezeNet<f32>) -> Result<(), DataError> {
    if !ds.fully_annotated() {
        return Err(DataError::Invalid(
            "whitebox annotation requires a fully annotated dataset (squeeze needs seg + intentions)".into(),
        ));
    }
    let batch = 64;
    for ep in &mut ds.episodes {
        let n = ep.frames.len();
        let mut fi = 0;
        while fi < n {
            let m = batch.min(n - fi);
            let mut seg = Array4::<f32>::zeros((m, 6, IMG_H, IMG_W));
            let mut ints = Array2::<f32>::zeros((m, 3));
            let mut spd = Array2::<f32>::zeros((m, 1));
            for k in 0..m {
                let f = &ep.frames[fi + k];
                let labels = f.seg.as_ref().unwrap();
                for (i, &l) in labels.iter().enumerate() {
                    seg[(k, l as usize, i / IMG_W, i % IMG_W)] = 1.0;
                }
                let ii = f.intentions.unwrap();
                ints[(k, 0)] = ii[0];
                ints[(k, 1)] = ii[1];
                ints[(k, 2)] = ii[2];
                spd[(k, 0)] = f.speed / 10.0;
            }
            let all = squeeze.forward_all(&seg, &ints, &spd, false);
            for k in 0..m {
                let mut wb = [[0f32; 3]; 4];
                for c in 0..4 {
                    for j in 0..3 {
                        wb[c][j] = all[(k, c, j)];
                    }
                }
                ep.frames[fi + k].set_whitebox(wb);
            }
            fi += m;
        }
    }
    ds.manifest.whitebox = true;
    squeeze.zero_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::map::CLASS_ROAD;

    fn blank() -> Vec<u8> {
        vec![CLASS_ROAD; IMG_H * IMG_W]
    }

    #[test]
    fn coarsen_identity_without_agents() {
        let seg = SegMask { labels: blank() };
        assert_eq!(coarsen_segmentation(&seg), seg);
    }

    #[test]
    fn coarsen_fills_component_bbox() {
        let mut labels = blank();
        // A 3x5 vehicle blob with one protruding pixel below.
        for r in 10..13 {
            for c in 20..25 {
                labels[r * IMG_W + c] = CLASS_VEHICLE;
            }
        }
        labels[13 * IMG_W + 22] = CLASS_VEHICLE;
        let out = coarsen_segmentation(&SegMask { labels });
        for r in 10..=13 {
            for c in 20..25 {
                assert_eq!(out.label(r, c), CLASS_VEHICLE, "bbox fill at ({r},{c})");
            }
        }
        assert_eq!(out.label(9, 22), CLASS_ROAD);
        assert_eq!(out.label(14, 22), CLASS_ROAD);
    }

    #[test]
    fn coarsen_keeps_disjoint_pedestrians_separate() {
        let mut labels = blank();
        labels[5 * IMG_W + 5] = CLASS_PEDESTRIAN;
        labels[5 * IMG_W + 6] = CLASS_PEDESTRIAN;
        labels[40 * IMG_W + 100] = CLASS_PEDESTRIAN;
        let out = coarsen_segmentation(&SegMask { labels });
        let count = out.labels.iter().filter(|&&l| l == CLASS_PEDESTRIAN).count();
        assert_eq!(count, 3, "two boxes: 1x2 and 1x1");
    }

    #[test]
    fn coarsen_is_idempotent_on_scene_masks() {
        let w = crate::sim::create_world(1, crate::sim::WeatherParams::identity(), 6, 8, 3).unwrap();
        let seg = crate::sim::render::render_segmentation(&w);
        let once = coarsen_segmentation(&seg);
        let twice = coarsen_segmentation(&once);
        assert_eq!(once, twice);
    }
}
