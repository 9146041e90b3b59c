//! Training procedures for every method variant.
//!
//! Each procedure owns its nets exclusively, splits the dataset at episode
//! level, follows the adaptive learning-rate schedule with validation
//! early stopping, and returns the best-validation snapshot plus the
//! training-curve log.

use super::losses::{control_loss, l1_loss, mimic_loss};
use super::schedule::{Decision, Schedule, TrainLog};
use super::{assemble_batch, Batch, BatchOptions, Batcher, TrainConfig};
use crate::data::{coarsen_segmentation, split_dataset, DataError, Dataset};
use crate::models::{
    IntentDecoderNet, IntentEstimator, MimicNet, NetParams, SegEstimator, SingleEncoderNet,
    SqueezeNet, INTENT_EMB, SEG_EMB,
};
use crate::nn::layers::softmax_ce_2d;
use crate::nn::{Adam, ParamTensor};
use crate::sim::render::{SegMask, IMG_H, IMG_W};
use crate::sim::Command;
use ndarray::{s, Array2, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

const INIT_SALT: u64 = 0x1217;
const VAL_CAP: usize = 320;

fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ INIT_SALT)
}

fn snapshot(params: &mut Vec<&mut ParamTensor<f32>>) -> Vec<ArrayD<f32>> {
    params.iter().map(|p| p.value.clone()).collect()
}

fn restore(params: &mut Vec<&mut ParamTensor<f32>>, snap: &[ArrayD<f32>]) {
    for (p, s) in params.iter_mut().zip(snap.iter()) {
        p.value.assign(s);
    }
}

/// Deterministic evenly-spaced validation subset.
fn val_indices(ds: &Dataset, annotated_only: bool) -> Vec<(usize, usize)> {
    let all = ds.frame_index(annotated_only);
    if all.len() <= VAL_CAP {
        return all;
    }
    let stride = all.len() as f64 / VAL_CAP as f64;
    (0..VAL_CAP).map(|k| all[(k as f64 * stride) as usize]).collect()
}

fn speed_norm(b: &Batch) -> &Array2<f32> {
    &b.speed
}

// ---------------------------------------------------------------- squeeze

pub struct SqueezeArtifacts {
    pub net: SqueezeNet<f32>,
    pub log: TrainLog,
}

/// Train the squeeze network on ground-truth annotations with Eq. (1).
pub fn train_squeeze(ds: &Dataset, cfg: &TrainConfig) -> Result<SqueezeArtifacts, TrainError> {
    cfg.validate().map_err(TrainError::Invalid)?;
    if !ds.fully_annotated() {
        return Err(TrainError::Invalid(
            "squeeze training requires a fully annotated dataset".into(),
        ));
    }
    let (train, val) = split_dataset(ds, cfg.val_fraction, cfg.seed)?;
    let mut net = SqueezeNet::<f32>::new(&mut init_rng(cfg.seed), cfg.scale);
    let mut opt = Adam::new(cfg.lr);
    let mut batcher = Batcher::new(train.frame_index(false), cfg.batch_size, cfg.seed);
    let val_idx = val_indices(&val, false);
    let opt_batch = BatchOptions {
        images: false,
        seg_onehot: true,
        intentions: true,
        intention_mask: cfg.intention_mask,
        ..BatchOptions::default()
    };
    let mut sched = Schedule::new(cfg);
    let mut best: Option<Vec<ArrayD<f32>>> = None;

    loop {
        let idxs = batcher.next_batch();
        let b = assemble_batch(&train, &idxs, &opt_batch);
        net.zero_grads();
        let out = net.forward(
            b.seg_onehot.as_ref().unwrap(),
            b.intentions.as_ref().unwrap(),
            speed_norm(&b),
            &b.commands,
            true,
        );
        let (loss, dctl) = control_loss(&out.controls, &b.controls, cfg.control_weights);
        net.backward(&dctl);
        opt.lr = sched.lr;
        opt.step(&mut net.params_mut());
        sched.record_train(&[("control".into(), loss as f64)]);

        if sched.should_validate() {
            let v = squeeze_val(&mut net, &val, &val_idx, cfg);
            match sched.record_val(v) {
                Decision::Snapshot => best = Some(snapshot(&mut net.params_mut())),
                Decision::Stop => break,
                Decision::Continue => {}
            }
        }
        if sched.done() {
            break;
        }
    }
    if let Some(bp) = best {
        restore(&mut net.params_mut(), &bp);
    }
    Ok(SqueezeArtifacts { net, log: sched.log })
}

fn squeeze_val(net: &mut SqueezeNet<f32>, val: &Dataset, idx: &[(usize, usize)], cfg: &TrainConfig) -> f64 {
    let opt = BatchOptions {
        images: false,
        seg_onehot: true,
        intentions: true,
        intention_mask: cfg.intention_mask,
        ..BatchOptions::default()
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(64) {
        let b = assemble_batch(val, chunk, &opt);
        let out = net.forward(
            b.seg_onehot.as_ref().unwrap(),
            b.intentions.as_ref().unwrap(),
            speed_norm(&b),
            &b.commands,
            false,
        );
        let (l, _) = control_loss(&out.controls, &b.controls, cfg.control_weights);
        total += l as f64 * chunk.len() as f64;
        count += chunk.len();
    }
    total / count.max(1) as f64
}

// ------------------------------------------------------------ SAM mimic

/// Frozen embedding targets keyed by (episode, frame).
pub struct EmbTargets {
    rows: HashMap<(usize, usize), usize>,
    chi: Array2<f32>,
    xi: Array2<f32>,
}

/// Evaluate the frozen squeeze network on every annotated frame.
/// `intention_mask` must match the mask the squeeze net was trained with.
pub fn compute_squeeze_targets(
    ds: &Dataset,
    squeeze: &mut SqueezeNet<f32>,
    intention_mask: [bool; 3],
) -> EmbTargets {
    let idx = ds.frame_index(true);
    let mut rows = HashMap::with_capacity(idx.len());
    let mut chi = Array2::<f32>::zeros((idx.len(), SEG_EMB));
    let mut xi = Array2::<f32>::zeros((idx.len(), INTENT_EMB));
    let opt = BatchOptions {
        images: false,
        seg_onehot: true,
        intentions: true,
        intention_mask,
        ..BatchOptions::default()
    };
    let mut row = 0usize;
    for chunk in idx.chunks(64) {
        let b = assemble_batch(ds, chunk, &opt);
        let cmds = vec![Command::Follow; chunk.len()];
        let out = squeeze.forward(
            b.seg_onehot.as_ref().unwrap(),
            b.intentions.as_ref().unwrap(),
            speed_norm(&b),
            &cmds,
            false,
        );
        for (k, &key) in chunk.iter().enumerate() {
            rows.insert(key, row);
            chi.row_mut(row).assign(&out.chi.row(k));
            xi.row_mut(row).assign(&out.xi.row(k));
            row += 1;
        }
    }
    EmbTargets { rows, chi, xi }
}

pub struct MimicArtifacts {
    pub net: MimicNet<f32>,
    pub log: TrainLog,
}

/// Train the mimic network: Eq. (1) on all frames plus Eq. (2) against the
/// frozen squeeze embeddings on annotated frames. With both mimic weights
/// zero this is exactly the no-mimicking (SAM-NM) objective.
pub fn train_sam_mimic(
    ds: &Dataset,
    targets: Option<&EmbTargets>,
    cfg: &TrainConfig,
) -> Result<MimicArtifacts, TrainError> {
    cfg.validate().map_err(TrainError::Invalid)?;
    let w = cfg.effective_mimic_weights();
    let mimicking = w[0] > 0.0 || w[1] > 0.0;
    if mimicking && ds.frame_index(true).is_empty() {
        return Err(TrainError::Invalid(
            "mimic weights are positive but the dataset has no annotated frames".into(),
        ));
    }
    if mimicking && targets.is_none() {
        return Err(TrainError::Invalid("mimic training requires squeeze targets".into()));
    }
    let (train, val) = split_dataset(ds, cfg.val_fraction, cfg.seed)?;
    let mut net = MimicNet::<f32>::new(&mut init_rng(cfg.seed), cfg.scale);
    let mut opt = Adam::new(cfg.lr);
    let mut batcher = Batcher::new(train.frame_index(false), cfg.batch_size, cfg.seed);
    let val_idx = val_indices(&val, false);
    let mut sched = Schedule::new(cfg);
    let mut best: Option<Vec<ArrayD<f32>>> = None;

    loop {
        let idxs = batcher.next_batch();
        let b = assemble_batch(&train, &idxs, &BatchOptions::default());
        net.zero_grads();
        let out = net.forward(&b.images, speed_norm(&b), &b.commands, true, false);
        let (closs, dctl) = control_loss(&out.controls, &b.controls, cfg.control_weights);
        let (mloss, comps) = if mimicking {
            let t = targets.unwrap();
            let (chi_t, xi_t, mask) = gather_targets(t, &b);
            let (ml, dchi, dxi) = mimic_loss(&out.chi, &chi_t, &out.xi, &xi_t, w, &mask);
            net.backward(&dctl, Some(&dchi), Some(&dxi), None);
            (
                ml as f64,
                vec![("control".into(), closs as f64), ("mimic".into(), ml as f64)],
            )
        } else {
            net.backward(&dctl, None, None, None);
            (0.0, vec![("control".into(), closs as f64)])
        };
        let _ = mloss;
        opt.lr = sched.lr;
        opt.step(&mut net.params_mut());
        sched.record_train(&comps);

        if sched.should_validate() {
            let v = mimic_val(&mut net, &val, &val_idx, targets, w, cfg);
            match sched.record_val(v) {
                Decision::Snapshot => best = Some(snapshot(&mut net.params_mut())),
                Decision::Stop => break,
                Decision::Continue => {}
            }
        }
        if sched.done() {
            break;
        }
    }
    if let Some(bp) = best {
        restore(&mut net.params_mut(), &bp);
    }
    Ok(MimicArtifacts { net, log: sched.log })
}

fn gather_targets(t: &EmbTargets, b: &Batch) -> (Array2<f32>, Array2<f32>, Vec<bool>) {
    let n = b.idxs.len();
    let mut chi = Array2::<f32>::zeros((n, SEG_EMB));
    let mut xi = Array2::<f32>::zeros((n, INTENT_EMB));
    let mut mask = vec![false; n];
    for (k, key) in b.idxs.iter().enumerate() {
        if let Some(&row) = t.rows.get(key) {
            chi.row_mut(k).assign(&t.chi.row(row));
            xi.row_mut(k).assign(&t.xi.row(row));
            mask[k] = true;
        }
    }
    (chi, xi, mask)
}

fn mimic_val(
    net: &mut MimicNet<f32>,
    val: &Dataset,
    idx: &[(usize, usize)],
    targets: Option<&EmbTargets>,
    w: [f64; 2],
    cfg: &TrainConfig,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(64) {
        let b = assemble_batch(val, chunk, &BatchOptions::default());
        let out = net.forward(&b.images, speed_norm(&b), &b.commands, false, false);
        let (l, _) = control_loss(&out.controls, &b.controls, cfg.control_weights);
        let mut loss = l as f64;
        if let Some(t) = targets {
            if w[0] > 0.0 || w[1] > 0.0 {
                let (chi_t, xi_t, mask) = gather_targets(t, &b);
                let (ml, _, _) = mimic_loss(&out.chi, &chi_t, &out.xi, &xi_t, w, &mask);
                loss += ml as f64;
            }
        }
        total += loss * chunk.len() as f64;
        count += chunk.len();
    }
    total / count.max(1) as f64
}

// ------------------------------------------------------- single encoder

pub struct SingleArtifacts {
    pub net: SingleEncoderNet<f32>,
    pub log: TrainLog,
}

/// Behavior cloning on the wide single-encoder architecture.
pub fn train_res101_nm(ds: &Dataset, cfg: &TrainConfig) -> Result<SingleArtifacts, TrainError> {
    cfg.validate().map_err(TrainError::Invalid)?;
    let (train, val) = split_dataset(ds, cfg.val_fraction, cfg.seed)?;
    let mut net = SingleEncoderNet::<f32>::new(&mut init_rng(cfg.seed), cfg.scale);
    let mut opt = Adam::new(cfg.lr);
    let mut batcher = Batcher::new(train.frame_index(false), cfg.batch_size, cfg.seed);
    let val_idx = val_indices(&val, false);
    let mut sched = Schedule::new(cfg);
    let mut best: Option<Vec<ArrayD<f32>>> = None;
    loop {
        let idxs = batcher.next_batch();
        let b = assemble_batch(&train, &idxs, &BatchOptions::default());
        net.zero_grads();
        let pred = net.forward(&b.images, speed_norm(&b), &b.commands, true);
        let (loss, dctl) = control_loss(&pred, &b.controls, cfg.control_weights);
        net.backward(&dctl);
        opt.lr = sched.lr;
        opt.step(&mut net.params_mut());
        sched.record_train(&[("control".into(), loss as f64)]);
        if sched.should_validate() {
            let mut total = 0.0;
            let mut count = 0usize;
            for chunk in val_idx.chunks(64) {
                let vb = assemble_batch(&val, chunk, &BatchOptions::default());
                let p = net.forward(&vb.images, speed_norm(&vb), &vb.commands, false);
                let (l, _) = control_loss(&p, &vb.controls, cfg.control_weights);
                total += l as f64 * chunk.len() as f64;
                count += chunk.len();
            }
            match sched.record_val(total / count.max(1) as f64) {
                Decision::Snapshot => best = Some(snapshot(&mut net.params_mut())),
                Decision::Stop => break,
                Decision::Continue => {}
            }
        }
        if sched.done() {
            break;
        }
    }
    if let Some(bp) = best {
        restore(&mut net.params_mut(), &bp);
    }
    Ok(SingleArtifacts { net, log: sched.log })
}

// ----------------------------------------------------------- multi-task

pub struct MultitaskArtifacts {
    pub net: MimicNet<f32>,
    pub seg_decoder: crate::models::decoder::SegDecoder<f32>,
    pub intent_decoder: IntentDecoderNet<f32>,
    pub log: TrainLog,
}

/// Eq. (1) plus decoder side losses on the same latent vectors the
/// mimicking losses would use.
pub fn train_multitask(ds: &Dataset, cfg: &TrainConfig) -> Result<MultitaskArtifacts, TrainError> {
    cfg.validate().map_err(TrainError::Invalid)?;
    if !ds.fully_annotated() {
        return Err(TrainError::Invalid("multi-task training requires annotations".into()));
    }
    let (train, val) = split_dataset(ds, cfg.val_fraction, cfg.seed)?;
    let mut rng = init_rng(cfg.seed);
    let mut net = MimicNet::<f32>::new(&mut rng, cfg.scale);
    let mut segdec =
        crate::models::decoder::SegDecoder::<f32>::new("mt.segdec", &mut rng, SEG_EMB, cfg.scale.backbone(), 6);
    let mut intdec = IntentDecoderNet::<f32>::new(&mut rng);
    let mut opt = Adam::new(cfg.lr);
    let mut batcher = Batcher::new(train.frame_index(true), cfg.batch_size, cfg.seed);
    let val_idx = val_indices(&val, true);
    let opts = BatchOptions { seg_labels: true, intentions: true, ..BatchOptions::default() };
    let mut sched = Schedule::new(cfg);
    let mut best: Option<Vec<ArrayD<f32>>> = None;
    let [w_seg, w_int] = cfg.side_weights;

    loop {
        let idxs = batcher.next_batch();
        let b = assemble_batch(&train, &idxs, &opts);
        net.zero_grads();
        segdec.zero_grads_local();
        intdec.zero_grads();
        let out = net.forward(&b.images, speed_norm(&b), &b.commands, true, true);
        let skips: Vec<_> = net.seg_branch.skips().to_vec();
        let seg_logits = segdec.forward(&out.chi, &skips, true);
        let int_pred = intdec.forward(&out.xi, true);

        let (closs, dctl) = control_loss(&out.controls, &b.controls, cfg.control_weights);
        let (segloss, mut dlogits) = softmax_ce_2d(&seg_logits, b.seg_labels.as_ref().unwrap());
        dlogits.mapv_inplace(|v| v * w_seg as f32);
        let (intloss, mut dint) = l1_loss(&int_pred, b.intentions.as_ref().unwrap());
        dint.mapv_inplace(|v| v * w_int as f32);

        let (dchi, dskips) = segdec.backward(&dlogits);
        let dxi = intdec.backward(&dint);
        net.backward(&dctl, Some(&dchi), Some(&dxi), Some(dskips));

        opt.lr = sched.lr;
        let mut params = net.params_mut();
        params.extend(segdec.params_mut());
        params.extend(intdec.params_mut());
        opt.step(&mut params);
        sched.record_train(&[
            ("control".into(), closs as f64),
            ("seg_ce".into(), w_seg * segloss as f64),
            ("intent_l1".into(), w_int * intloss as f64),
        ]);

        if sched.should_validate() {
            let mut total = 0.0;
            let mut count = 0usize;
            for chunk in val_idx.chunks(32) {
                let vb = assemble_batch(&val, chunk, &opts);
                let vout = net.forward(&vb.images, speed_norm(&vb), &vb.commands, false, true);
                let vskips: Vec<_> = net.seg_branch.skips().to_vec();
                let vlogits = segdec.forward(&vout.chi, &vskips, false);
                let vint = intdec.forward(&vout.xi, false);
                let (cl, _) = control_loss(&vout.controls, &vb.controls, cfg.control_weights);
                let (sl, _) = softmax_ce_2d(&vlogits, vb.seg_labels.as_ref().unwrap());
                let (il, _) = l1_loss(&vint, vb.intentions.as_ref().unwrap());
                total += (cl as f64 + w_seg * sl as f64 + w_int * il as f64) * chunk.len() as f64;
                count += chunk.len();
            }
            match sched.record_val(total / count.max(1) as f64) {
                Decision::Snapshot => {
                    let mut params = net.params_mut();
                    params.extend(segdec.params_mut());
                    params.extend(intdec.params_mut());
                    best = Some(snapshot(&mut params));
                }
                Decision::Stop => break,
                Decision::Continue => {}
            }
        }
        if sched.done() {
            break;
        }
    }
    if let Some(bp) = best {
        let mut params = net.params_mut();
        params.extend(segdec.params_mut());
        params.extend(intdec.params_mut());
        restore(&mut params, &bp);
    }
    Ok(MultitaskArtifacts { net, seg_decoder: segdec, intent_decoder: intdec, log: sched.log })
}

// ------------------------------------------------- perception estimators

pub struct PerceptionArtifacts {
    pub seg: SegEstimator<f32>,
    pub intent: IntentEstimator<f32>,
    pub seg_log: TrainLog,
    pub intent_log: TrainLog,
    /// Pixel accuracy of the segmentation estimator on the validation set.
    pub seg_pixel_accuracy: f64,
}

/// Train the perception networks (dense segmentation and stop-intention
/// estimation) used by the two-stage, feature-mimic and efficient-seg
/// baselines. `intent_emb` chooses the estimator flavor: 512 for the
/// two-stage pipeline head, 128 for the feature-mimic teacher.
pub fn train_perception(
    ds: &Dataset,
    cfg: &TrainConfig,
    intent_emb: usize,
) -> Result<PerceptionArtifacts, TrainError> {
    cfg.validate().map_err(TrainError::Invalid)?;
    if !ds.fully_annotated() {
        return Err(TrainError::Invalid("perception training requires annotations".into()));
    }
    let (train, val) = split_dataset(ds, cfg.val_fraction, cfg.seed)?;
    let mut rng = init_rng(cfg.seed ^ 0x9e11);
    let mut seg = SegEstimator::<f32>::new(&mut rng, cfg.scale);
    let mut intent = IntentEstimator::<f32>::new(&mut rng, cfg.scale, intent_emb);
    let val_idx = val_indices(&val, true);
    let opts = BatchOptions { seg_labels: true, intentions: true, ..BatchOptions::default() };

    // Segmentation estimator.
    let mut seg_sched = Schedule::new(cfg);
    {
        let mut opt = Adam::new(cfg.lr);
        let mut batcher = Batcher::new(train.frame_index(true), cfg.batch_size, cfg.seed);
        let mut best: Option<Vec<ArrayD<f32>>> = None;
        loop {
            let idxs = batcher.next_batch();
            let b = assemble_batch(&train, &idxs, &opts);
            seg.zero_grads();
            let (logits, _) = seg.forward(&b.images, true);
            let (loss, dlogits) = softmax_ce_2d(&logits, b.seg_labels.as_ref().unwrap());
            seg.backward(&dlogits, None);
            opt.lr = seg_sched.lr;
            opt.step(&mut seg.params_mut());
            seg_sched.record_train(&[("seg_ce".into(), loss as f64)]);
            if seg_sched.should_validate() {
                let mut total = 0.0;
                let mut count = 0usize;
                for chunk in val_idx.chunks(32) {
                    let vb = assemble_batch(&val, chunk, &opts);
                    let (vl, _) = seg.forward(&vb.images, false);
                    let (l, _) = softmax_ce_2d(&vl, vb.seg_labels.as_ref().unwrap());
                    total += l as f64 * chunk.len() as f64;
                    count += chunk.len();
                }
                match seg_sched.record_val(total / count.max(1) as f64) {
                    Decision::Snapshot => best = Some(snapshot(&mut seg.params_mut())),
                    Decision::Stop => break,
                    Decision::Continue => {}
                }
            }
            if seg_sched.done() {
                break;
            }
        }
        if let Some(bp) = best {
            restore(&mut seg.params_mut(), &bp);
        }
    }

    // Intention estimator.
    let mut int_sched = Schedule::new(cfg);
    {
        let mut opt = Adam::new(cfg.lr);
        let mut batcher = Batcher::new(train.frame_index(true), cfg.batch_size, cfg.seed ^ 1);
        let mut best: Option<Vec<ArrayD<f32>>> = None;
        loop {
            let idxs = batcher.next_batch();
            let b = assemble_batch(&train, &idxs, &opts);
            intent.zero_grads();
            let (pred, _) = intent.forward(&b.images, true);
            let (loss, dpred) = l1_loss(&pred, b.intentions.as_ref().unwrap());
            intent.backward(&dpred, None);
            opt.lr = int_sched.lr;
            opt.step(&mut intent.params_mut());
            int_sched.record_train(&[("intent_l1".into(), loss as f64)]);
            if int_sched.should_validate() {
                let mut total = 0.0;
                let mut count = 0usize;
                for chunk in val_idx.chunks(64) {
                    let vb = assemble_batch(&val, chunk, &opts);
                    let (vp, _) = intent.forward(&vb.images, false);
                    let (l, _) = l1_loss(&vp, vb.intentions.as_ref().unwrap());
                    total += l as f64 * chunk.len() as f64;
                    count += chunk.len();
                }
                match int_sched.record_val(total / count.max(1) as f64) {
                    Decision::Snapshot => best = Some(snapshot(&mut intent.params_mut())),
                    Decision::Stop => break,
                    Decision::Continue => {}
                }
            }
            if int_sched.done() {
                break;
            }
        }
        if let Some(bp) = best {
            restore(&mut intent.params_mut(), &bp);
        }
    }

    // Pixel accuracy gate metric for downstream stages.
    let mut correct = 0usize;
    let mut total_px = 0usize;
    for chunk in val_idx.chunks(32) {
        let vb = assemble_batch(&val, chunk, &opts);
        let (logits, _) = seg.forward(&vb.images, false);
        let labels = vb.seg_labels.as_ref().unwrap();
        let (n, c, h, w) = logits.dim();
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let mut bestc = 0;
                    let mut bestv = f32::NEG_INFINITY;
                    for ci in 0..c {
                        let v = logits[(ni, ci, y, x)];
                        if v > bestv {
                            bestv = v;
                            bestc = ci;
                        }
                    }
                    if bestc as u8 == labels[(ni * h + y) * w + x] {
                        correct += 1;
                    }
                    total_px += 1;
                }
            }
        }
    }
    let seg_pixel_accuracy = correct as f64 / total_px.max(1) as f64;

    Ok(PerceptionArtifacts {
        seg,
        intent,
        seg_log: seg_sched.log,
        intent_log: int_sched.log,
        seg_pixel_accuracy,
    })
}

// -------------------------------------------------------- feature mimic

/// Phase 1 trains perception teachers with encoders architecturally
/// identical to the mimic branches; phase 2 trains the mimic network with
/// Eq. (1) plus L2 to the frozen teacher embeddings.
pub fn train_feature_mimic(ds: &Dataset, cfg: &TrainConfig) -> Result<(MimicArtifacts, PerceptionArtifacts), TrainError> {
    let teachers = train_perception(ds, cfg, INTENT_EMB)?;
    let mut seg_teacher = teachers.seg;
    let mut intent_teacher = teachers.intent;

    // Teacher embedding targets for every frame (image inputs).
    let idx = ds.frame_index(false);
    let mut rows = HashMap::with_capacity(idx.len());
    let mut chi = Array2::<f32>::zeros((idx.len(), SEG_EMB));
    let mut xi = Array2::<f32>::zeros((idx.len(), INTENT_EMB));
    let mut row = 0usize;
    for chunk in idx.chunks(64) {
        let b = assemble_batch(ds, chunk, &BatchOptions::default());
        let (_, seg_emb) = seg_teacher.forward(&b.images, false);
        let (_, int_emb) = intent_teacher.forward(&b.images, false);
        for (k, &key) in chunk.iter().enumerate() {
            rows.insert(key, row);
            chi.row_mut(row).assign(&seg_emb.row(k));
            xi.row_mut(row).assign(&int_emb.row(k));
            row += 1;
        }
    }
    let targets = EmbTargets { rows, chi, xi };
    let mimic = train_sam_mimic(ds, Some(&targets), cfg)?;
    Ok((
        mimic,
        PerceptionArtifacts {
            seg: seg_teacher,
            intent: intent_teacher,
            seg_log: teachers.seg_log,
            intent_log: teachers.intent_log,
            seg_pixel_accuracy: teachers.seg_pixel_accuracy,
        },
    ))
}

// ----------------------------------------------------------- two-stage

pub struct TwoStageArtifacts {
    pub perception: PerceptionArtifacts,
    pub driving: SqueezeNet<f32>,
    pub finetuned: bool,
    pub finetune_log: Option<TrainLog>,
}

/// Estimated annotations for every frame: coarse or dense estimated masks
/// plus estimated intentions.
pub fn estimate_annotations(
    ds: &Dataset,
    seg: &mut SegEstimator<f32>,
    intent: &mut IntentEstimator<f32>,
    coarsen: bool,
) -> HashMap<(usize, usize), (Vec<u8>, [f32; 3])> {
    let idx = ds.frame_index(false);
    let mut out = HashMap::with_capacity(idx.len());
    for chunk in idx.chunks(32) {
        let b = assemble_batch(ds, chunk, &BatchOptions::default());
        let (logits, _) = seg.forward(&b.images, false);
        let (ints, _) = intent.forward(&b.images, false);
        let (n, c, h, w) = logits.dim();
        for ni in 0..n {
            let mut labels = vec![0u8; h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut bestc = 0u8;
                    let mut bestv = f32::NEG_INFINITY;
                    for ci in 0..c {
                        let v = logits[(ni, ci, y, x)];
                        if v > bestv {
                            bestv = v;
                            bestc = ci as u8;
                        }
                    }
                    labels[y * w + x] = bestc;
                }
            }
            if coarsen {
                labels = coarsen_segmentation(&SegMask { labels }).labels;
            }
            let iv = [ints[(ni, 0)], ints[(ni, 1)], ints[(ni, 2)]];
            out.insert(chunk[ni], (labels, iv));
        }
    }
    out
}

/// Two-stage(-F): perception estimation plus the squeeze-architecture
/// driving network. Without fine-tuning the driving weights are exactly
/// the input squeeze checkpoint.
pub fn train_two_stage(
    ds: &Dataset,
    cfg: &TrainConfig,
    squeeze: SqueezeNet<f32>,
    finetune: bool,
) -> Result<TwoStageArtifacts, TrainError> {
    let perception = train_perception(ds, cfg, 512)?;
    let mut artifacts = TwoStageArtifacts { perception, driving: squeeze, finetuned: finetune, finetune_log: None };
    if !finetune {
        return Ok(artifacts);
    }

    // Fine-tune the driving net on estimated (not ground-truth) inputs.
    let est = estimate_annotations(ds, &mut artifacts.perception.seg, &mut artifacts.perception.intent, false);
    let (train, val) = split_dataset(ds, cfg.val_fraction, cfg.seed)?;
    let mut opt = Adam::new(cfg.lr);
    let mut batcher = Batcher::new(train.frame_index(false), cfg.batch_size, cfg.seed ^ 2);
    let val_idx = val_indices(&val, false);
    let mut sched = Schedule::new(cfg);
    let mut best: Option<Vec<ArrayD<f32>>> = None;
    let net = &mut artifacts.driving;
    loop {
        let idxs = batcher.next_batch();
        let b = assemble_batch(&train, &idxs, &BatchOptions { images: false, ..BatchOptions::default() });
        let (seg_in, int_in) = estimated_inputs(&est, &idxs);
        net.zero_grads();
        let out = net.forward(&seg_in, &int_in, speed_norm(&b), &b.commands, true);
        let (loss, dctl) = control_loss(&out.controls, &b.controls, cfg.control_weights);
        net.backward(&dctl);
        opt.lr = sched.lr;
        opt.step(&mut net.params_mut());
        sched.record_train(&[("control".into(), loss as f64)]);
        if sched.should_validate() {
            let mut total = 0.0;
            let mut count = 0usize;
            for chunk in val_idx.chunks(64) {
                let vb = assemble_batch(&val, chunk, &BatchOptions { images: false, ..BatchOptions::default() });
                let (vseg, vint) = estimated_inputs(&est, chunk);
                let vout = net.forward(&vseg, &vint, speed_norm(&vb), &vb.commands, false);
                let (l, _) = control_loss(&vout.controls, &vb.controls, cfg.control_weights);
                total += l as f64 * chunk.len() as f64;
                count += chunk.len();
            }
            match sched.record_val(total / count.max(1) as f64) {
                Decision::Snapshot => best = Some(snapshot(&mut net.params_mut())),
                Decision::Stop => break,
                Decision::Continue => {}
            }
        }
        if sched.done() {
            break;
        }
    }
    if let Some(bp) = best {
        restore(&mut net.params_mut(), &bp);
    }
    artifacts.finetune_log = Some(sched.log);
    Ok(artifacts)
}

fn estimated_inputs(
    est: &HashMap<(usize, usize), (Vec<u8>, [f32; 3])>,
    idxs: &[(usize, usize)],
) -> (ndarray::Array4<f32>, Array2<f32>) {
    let n = idxs.len();
    let mut seg = ndarray::Array4::<f32>::zeros((n, 6, IMG_H, IMG_W));
    let mut ints = Array2::<f32>::zeros((n, 3));
    for (k, key) in idxs.iter().enumerate() {
        let (labels, iv) = est.get(key).expect("estimates cover the dataset");
        for (i, &l) in labels.iter().enumerate() {
            seg[(k, l as usize, i / IMG_W, i % IMG_W)] = 1.0;
        }
        for j in 0..3 {
            ints[(k, j)] = iv[j];
        }
    }
    (seg, ints)
}

// -------------------------------------------------------- control mimic

/// LBC-style control mimicking: Eq. (1) against the squeeze network's
/// whitebox controls for all four commands, so every head receives
/// gradient on every sample.
pub fn train_control_mimic(ds: &Dataset, cfg: &TrainConfig) -> Result<MimicArtifacts, TrainError> {
    cfg.validate().map_err(TrainError::Invalid)?;
    if !ds.manifest.whitebox {
        return Err(TrainError::Invalid(
            "control mimicking requires whitebox controls (run the whitebox annotation first)".into(),
        ));
    }
    let (train, val) = split_dataset(ds, cfg.val_fraction, cfg.seed)?;
    let mut net = MimicNet::<f32>::new(&mut init_rng(cfg.seed), cfg.scale);
    let mut opt = Adam::new(cfg.lr);
    let mut batcher = Batcher::new(train.frame_index(false), cfg.batch_size, cfg.seed);
    let val_idx = val_indices(&val, false);
    let opts = BatchOptions { whitebox: true, ..BatchOptions::default() };
    let mut sched = Schedule::new(cfg);
    let mut best: Option<Vec<ArrayD<f32>>> = None;
    loop {
        let idxs = batcher.next_batch();
        let b = assemble_batch(&train, &idxs, &opts);
        net.zero_grads();
        let (all, _) = net.forward_all(&b.images, speed_norm(&b), true);
        let wb = b.whitebox.as_ref().unwrap();
        let mut dall = ndarray::Array3::<f32>::zeros(all.dim());
        let mut loss = 0.0f64;
        for c in 0..4 {
            let pred = all.slice(s![.., c, ..]).to_owned();
            let gt = wb.slice(s![.., c, ..]).to_owned();
            let (l, d) = control_loss(&pred, &gt, cfg.control_weights);
            loss += l as f64 / 4.0;
            dall.slice_mut(s![.., c, ..]).assign(&d.mapv(|v| v / 4.0));
        }
        net.backward_all(&dall, None, None);
        opt.lr = sched.lr;
        opt.step(&mut net.params_mut());
        sched.record_train(&[("whitebox_control".into(), loss)]);
        if sched.should_validate() {
            let mut total = 0.0;
            let mut count = 0usize;
            for chunk in val_idx.chunks(64) {
                let vb = assemble_batch(&val, chunk, &opts);
                let (vall, _) = net.forward_all(&vb.images, speed_norm(&vb), false);
                let vwb = vb.whitebox.as_ref().unwrap();
                let mut l_sum = 0.0f64;
                for c in 0..4 {
                    let pred = vall.slice(s![.., c, ..]).to_owned();
                    let gt = vwb.slice(s![.., c, ..]).to_owned();
                    let (l, _) = control_loss(&pred, &gt, cfg.control_weights);
                    l_sum += l as f64 / 4.0;
                }
                total += l_sum * chunk.len() as f64;
                count += chunk.len();
            }
            match sched.record_val(total / count.max(1) as f64) {
                Decision::Snapshot => best = Some(snapshot(&mut net.params_mut())),
                Decision::Stop => break,
                Decision::Continue => {}
            }
        }
        if sched.done() {
            break;
        }
    }
    if let Some(bp) = best {
        restore(&mut net.params_mut(), &bp);
    }
    Ok(MimicArtifacts { net, log: sched.log })
}

// -------------------------------------------------------- efficient seg

pub struct EfficientSegArtifacts {
    pub perception: PerceptionArtifacts,
    pub driving: SqueezeNet<f32>,
    pub log: TrainLog,
}

/// Efficient-seg pipeline: estimate dense masks, coarsen them, and train a
/// squeeze-architecture driving net on the coarse estimated annotations.
pub fn train_efficient_seg(ds: &Dataset, cfg: &TrainConfig) -> Result<EfficientSegArtifacts, TrainError> {
    let mut perception = train_perception(ds, cfg, 512)?;
    let est = estimate_annotations(ds, &mut perception.seg, &mut perception.intent, true);
    let (train, val) = split_dataset(ds, cfg.val_fraction, cfg.seed)?;
    let mut net = SqueezeNet::<f32>::new(&mut init_rng(cfg.seed ^ 0xe5), cfg.scale);
    let mut opt = Adam::new(cfg.lr);
    let mut batcher = Batcher::new(train.frame_index(false), cfg.batch_size, cfg.seed ^ 3);
    let val_idx = val_indices(&val, false);
    let mut sched = Schedule::new(cfg);
    let mut best: Option<Vec<ArrayD<f32>>> = None;
    loop {
        let idxs = batcher.next_batch();
        let b = assemble_batch(&train, &idxs, &BatchOptions { images: false, ..BatchOptions::default() });
        let (seg_in, int_in) = estimated_inputs(&est, &idxs);
        net.zero_grads();
        let out = net.forward(&seg_in, &int_in, speed_norm(&b), &b.commands, true);
        let (loss, dctl) = control_loss(&out.controls, &b.controls, cfg.control_weights);
        net.backward(&dctl);
        opt.lr = sched.lr;
        opt.step(&mut net.params_mut());
        sched.record_train(&[("control".into(), loss as f64)]);
        if sched.should_validate() {
            let mut total = 0.0;
            let mut count = 0usize;
            for chunk in val_idx.chunks(64) {
                let vb = assemble_batch(&val, chunk, &BatchOptions { images: false, ..BatchOptions::default() });
                let (vseg, vint) = estimated_inputs(&est, chunk);
                let vout = net.forward(&vseg, &vint, speed_norm(&vb), &vb.commands, false);
                let (l, _) = control_loss(&vout.controls, &vb.controls, cfg.control_weights);
                total += l as f64 * chunk.len() as f64;
                count += chunk.len();
            }
            match sched.record_val(total / count.max(1) as f64) {
                Decision::Snapshot => best = Some(snapshot(&mut net.params_mut())),
                Decision::Stop => break,
                Decision::Continue => {}
            }
        }
        if sched.done() {
            break;
        }
    }
    if let Some(bp) = best {
        restore(&mut net.params_mut(), &bp);
    }
    Ok(EfficientSegArtifacts { perception, driving: net, log: sched.log })
}

impl<T: crate::nn::Scalar> crate::models::decoder::SegDecoder<T> {
    fn zero_grads_local(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}
