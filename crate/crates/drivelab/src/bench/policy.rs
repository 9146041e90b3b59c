//! Driving policies behind one interface: the episode runner feeds each
//! policy exactly the inputs its method is allowed to see.

use crate::data::coarsen_segmentation;
use crate::models::{
    Checkpoint, IntentEstimator, MimicNet, SegEstimator, SingleEncoderNet, SqueezeNet,
};
use crate::oracle::oracle_control;
use crate::route::Route;
use crate::sim::render::{ObsImage, SegMask, IMG_H, IMG_W};
use crate::sim::{Command, Control, SimError, StopIntentions, WorldState};
use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Squeeze,
    Sam,
    SamNm,
    Res101Nm,
    Multitask,
    FeatureMimic,
    TwoStage,
    TwoStageF,
    ControlMimic,
    EfficientSeg,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Squeeze,
        Method::Sam,
        Method::SamNm,
        Method::Res101Nm,
        Method::Multitask,
        Method::FeatureMimic,
        Method::TwoStage,
        Method::TwoStageF,
        Method::ControlMimic,
        Method::EfficientSeg,
        Method::Oracle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Squeeze => "squeeze",
            Method::Sam => "sam",
            Method::SamNm => "sam-nm",
            Method::Res101Nm => "res101-nm",
            Method::Multitask => "multitask",
            Method::FeatureMimic => "feature-mimic",
            Method::TwoStage => "two-stage",
            Method::TwoStageF => "two-stage-f",
            Method::ControlMimic => "control-mimic",
            Method::EfficientSeg => "efficient-seg",
            Method::Oracle => "oracle",
        }
    }

    pub fn trainable(&self) -> bool {
        !matches!(self, Method::Oracle)
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Method, String> {
        Method::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| format!("unknown method '{s}'"))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// Everything a policy may look at for one decision.
pub struct PolicyContext<'a> {
    pub world: &'a WorldState,
    pub route: &'a Route,
    pub command: Command,
    pub speed: f64,
    pub image: Option<&'a ObsImage>,
    pub seg: Option<&'a SegMask>,
    pub intentions: Option<StopIntentions>,
}

pub trait DrivingPolicy: Send + Sync {
    fn method(&self) -> Method;
    fn needs_image(&self) -> bool;
    /// Ground-truth annotations at test time (squeeze only).
    fn needs_annotations(&self) -> bool;
    fn act(&mut self, ctx: &PolicyContext<'_>) -> Result<Control, SimError>;
    fn clone_box(&self) -> Box<dyn DrivingPolicy>;
}

pub struct OraclePolicy;

impl DrivingPolicy for OraclePolicy {
    fn method(&self) -> Method {
        Method::Oracle
    }
    fn needs_image(&self) -> bool {
        false
    }
    fn needs_annotations(&self) -> bool {
        false
    }
    fn act(&mut self, ctx: &PolicyContext<'_>) -> Result<Control, SimError> {
        oracle_control(ctx.world, ctx.route)
    }
    fn clone_box(&self) -> Box<dyn DrivingPolicy> {
        Box::new(OraclePolicy)
    }
}

fn image_tensor(img: &ObsImage) -> Array4<f32> {
    let mut x = Array4::<f32>::zeros((1, 3, IMG_H, IMG_W));
    for (i, &v) in img.data.iter().enumerate() {
        let px = i / 3;
        x[(0, i % 3, px / IMG_W, px % IMG_W)] = v as f32 / 255.0;
    }
    x
}

fn seg_tensor(labels: &[u8]) -> Array4<f32> {
    let mut x = Array4::<f32>::zeros((1, 6, IMG_H, IMG_W));
    for (i, &l) in labels.iter().enumerate() {
        x[(0, l as usize, i / IMG_W, i % IMG_W)] = 1.0;
    }
    x
}

fn speed_tensor(speed: f64) -> Array2<f32> {
    Array2::from_elem((1, 1), (speed / 10.0) as f32)
}

fn to_control(row: ndarray::ArrayView1<f32>) -> Control {
    Control::new(row[0] as f64, row[1] as f64, row[2] as f64)
}

/// Squeeze policy: drives from ground-truth annotations at test time.
pub struct SqueezePolicy {
    pub net: SqueezeNet<f32>,
    pub intention_mask: [bool; 3],
}

impl DrivingPolicy for SqueezePolicy {
    fn method(&self) -> Method {
        Method::Squeeze
    }
    fn needs_image(&self) -> bool {
        false
    }
    fn needs_annotations(&self) -> bool {
        true
    }
    fn act(&mut self, ctx: &PolicyContext<'_>) -> Result<Control, SimError> {
        let seg = seg_tensor(&ctx.seg.expect("squeeze policy needs seg").labels);
        let raw = ctx.intentions.expect("squeeze policy needs intentions").as_array();
        let mut ints = Array2::<f32>::zeros((1, 3));
        for j in 0..3 {
            ints[(0, j)] = if self.intention_mask[j] { raw[j] as f32 } else { 0.0 };
        }
        let out = self.net.forward(&seg, &ints, &speed_tensor(ctx.speed), &[ctx.command], false);
        Ok(to_control(out.controls.row(0)))
    }
    fn clone_box(&self) -> Box<dyn DrivingPolicy> {
        Box::new(SqueezePolicy { net: self.net.clone(), intention_mask: self.intention_mask })
    }
}

/// Image policy over the two-branch mimic architecture (sam, sam-nm,
/// multitask, feature-mimic, control-mimic).
pub struct ImagePolicy {
    pub net: MimicNet<f32>,
    pub method: Method,
}

impl DrivingPolicy for ImagePolicy {
    fn method(&self) -> Method {
        self.method
    }
    fn needs_image(&self) -> bool {
        true
    }
    fn needs_annotations(&self) -> bool {
        false
    }
    fn act(&mut self, ctx: &PolicyContext<'_>) -> Result<Control, SimError> {
        let img = image_tensor(ctx.image.expect("image policy needs the camera"));
        let out = self.net.forward(&img, &speed_tensor(ctx.speed), &[ctx.command], false, false);
        Ok(to_control(out.controls.row(0)))
    }
    fn clone_box(&self) -> Box<dyn DrivingPolicy> {
        Box::new(ImagePolicy { net: self.net.clone(), method: self.method })
    }
}

pub struct SinglePolicy {
    pub net: SingleEncoderNet<f32>,
}

impl DrivingPolicy for SinglePolicy {
    fn method(&self) -> Method {
        Method::Res101Nm
    }
    fn needs_image(&self) -> bool {
        true
    }
    fn needs_annotations(&self) -> bool {
        false
    }
    fn act(&mut self, ctx: &PolicyContext<'_>) -> Result<Control, SimError> {
        let img = image_tensor(ctx.image.expect("image policy needs the camera"));
        let out = self.net.forward(&img, &speed_tensor(ctx.speed), &[ctx.command], false);
        Ok(to_control(out.row(0)))
    }
    fn clone_box(&self) -> Box<dyn DrivingPolicy> {
        Box::new(SinglePolicy { net: self.net.clone() })
    }
}

/// Pipeline policy: estimate annotations from the image, optionally
/// coarsen the mask, then drive with the squeeze-architecture net.
/// Consumes images only; ground truth never reaches it.
pub struct PipelinePolicy {
    pub seg: SegEstimator<f32>,
    pub intent: IntentEstimator<f32>,
    pub driving: SqueezeNet<f32>,
    pub coarsen: bool,
    pub method: Method,
}

impl DrivingPolicy for PipelinePolicy {
    fn method(&self) -> Method {
        self.method
    }
    fn needs_image(&self) -> bool {
        true
    }
    fn needs_annotations(&self) -> bool {
        false
    }
    fn act(&mut self, ctx: &PolicyContext<'_>) -> Result<Control, SimError> {
        let img = image_tensor(ctx.image.expect("pipeline policy needs the camera"));
        let (logits, _) = self.seg.forward(&img, false);
        let mut labels = vec![0u8; IMG_H * IMG_W];
        for y in 0..IMG_H {
            for x in 0..IMG_W {
                let mut bestc = 0u8;
                let mut bestv = f32::NEG_INFINITY;
                for c in 0..6 {
                    let v = logits[(0, c, y, x)];
                    if v > bestv {
                        bestv = v;
                        bestc = c as u8;
                    }
                }
                labels[y * IMG_W + x] = bestc;
            }
        }
        if self.coarsen {
            labels = coarsen_segmentation(&SegMask { labels }).labels;
        }
        let (ints, _) = self.intent.forward(&img, false);
        let seg_in = seg_tensor(&labels);
        let mut int_in = Array2::<f32>::zeros((1, 3));
        for j in 0..3 {
            int_in[(0, j)] = ints[(0, j)];
        }
        let out = self.driving.forward(&seg_in, &int_in, &speed_tensor(ctx.speed), &[ctx.command], false);
        Ok(to_control(out.controls.row(0)))
    }
    fn clone_box(&self) -> Box<dyn DrivingPolicy> {
        Box::new(PipelinePolicy {
            seg: self.seg.clone(),
            intent: self.intent.clone(),
            driving: self.driving.clone(),
            coarsen: self.coarsen,
            method: self.method,
        })
    }
}

fn meta_mask(ckpt: &Checkpoint) -> [bool; 3] {
    match ckpt.header.meta.get("intention_mask") {
        Some(s) => {
            let mut m = [true; 3];
            for (i, ch) in s.chars().take(3).enumerate() {
                m[i] = ch == '1';
            }
            m
        }
        None => [true; 3],
    }
}

/// Construct the policy for a checkpoint, validating the header against
/// freshly built networks.
pub fn build_policy(ckpt: &Checkpoint) -> Result<Box<dyn DrivingPolicy>, String> {
    let method = Method::from_str(&ckpt.header.method)?;
    let scale = ckpt.header.scale;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fail = |e: crate::models::CheckpointError| e.to_string();
    match method {
        Method::Oracle => Ok(Box::new(OraclePolicy)),
        Method::Squeeze => {
            let mut net = SqueezeNet::<f32>::new(&mut rng, scale);
            ckpt.load_component("squeeze", net.params_mut()).map_err(fail)?;
            Ok(Box::new(SqueezePolicy { net, intention_mask: meta_mask(ckpt) }))
        }
        Method::Sam | Method::SamNm | Method::Multitask | Method::FeatureMimic | Method::ControlMimic => {
            let mut net = MimicNet::<f32>::new(&mut rng, scale);
            ckpt.load_component("mimic", net.params_mut()).map_err(fail)?;
            Ok(Box::new(ImagePolicy { net, method }))
        }
        Method::Res101Nm => {
            let mut net = SingleEncoderNet::<f32>::new(&mut rng, scale);
            ckpt.load_component("single", net.params_mut()).map_err(fail)?;
            Ok(Box::new(SinglePolicy { net }))
        }
        Method::TwoStage | Method::TwoStageF | Method::EfficientSeg => {
            let mut seg = SegEstimator::<f32>::new(&mut rng, scale);
            let mut intent = IntentEstimator::<f32>::new(&mut rng, scale, 512);
            let mut driving = SqueezeNet::<f32>::new(&mut rng, scale);
            ckpt.load_component("seg_estimator", seg.params_mut()).map_err(fail)?;
            ckpt.load_component("intent_estimator", intent.params_mut()).map_err(fail)?;
            ckpt.load_component("driving", driving.params_mut()).map_err(fail)?;
            Ok(Box::new(PipelinePolicy {
                seg,
                intent,
                driving,
                coarsen: method == Method::EfficientSeg,
                method,
            }))
        }
    }
}

use crate::models::NetParams;
