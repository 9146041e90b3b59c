//! Policy network architectures: squeeze, mimic, the single-encoder
//! no-mimicking variant, and the perception estimators used by the
//! two-stage, feature-mimic and efficient-seg baselines.

use super::decoder::SegDecoder;
use super::encoder::{Backbone, Encoder};
use super::heads::{ControlHeads, Mlp};
use crate::nn::layers::{Linear, Relu, Sigmoid};
use crate::nn::{ParamTensor, Scalar};
use crate::sim::Command;
use ndarray::{s, Array2, Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SEG_EMB: usize = 512;
pub const INTENT_EMB: usize = 128;
pub const SPEED_EMB: usize = 128;
pub const JOINT_DIM: usize = 512;
pub const SINGLE_EMB: usize = SEG_EMB + INTENT_EMB;

/// Network capacity mode. Desk mode keeps the published embedding sizes on
/// small residual backbones; Full instantiates the published backbones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelScale {
    Desk { width: usize },
    Full,
}

impl ModelScale {
    pub fn backbone(&self) -> Backbone {
        match self {
            ModelScale::Desk { width } => Backbone::Desk { width: *width },
            ModelScale::Full => Backbone::Resnet34,
        }
    }

    pub fn wide_backbone(&self) -> Backbone {
        match self {
            ModelScale::Desk { width } => Backbone::Desk { width: *width },
            ModelScale::Full => Backbone::Resnet101,
        }
    }
}

impl Default for ModelScale {
    fn default() -> Self {
        ModelScale::Desk { width: 8 }
    }
}

pub trait NetParams<T: Scalar> {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>>;

    fn count_parameters(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.numel()).sum()
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Joint trunk shared by every driving policy: embedding concat, one FC
/// with ReLU, then the four command heads.
#[derive(Clone)]
pub struct DrivingTrunk<T: Scalar> {
    pub joint: Linear<T>,
    relu: Relu<T>,
    pub heads: ControlHeads<T>,
}

impl<T: Scalar> DrivingTrunk<T> {
    fn new(name: &str, rng: &mut ChaCha8Rng, in_dim: usize) -> Self {
        DrivingTrunk {
            joint: Linear::new(&format!("{name}.joint"), rng, in_dim, JOINT_DIM),
            relu: Relu::new(),
            heads: ControlHeads::new(&format!("{name}.head"), rng, JOINT_DIM),
        }
    }

    fn forward(&mut self, parts: &[&Array2<T>], commands: &[Command], train: bool) -> Array2<T> {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let cat = ndarray::concatenate(Axis(1), &views).unwrap();
        let j = self.joint.forward(&cat, train);
        let j = self.relu.forward_d(&j, train);
        self.heads.forward(&j, commands, train)
    }

    fn forward_all(&mut self, parts: &[&Array2<T>], train: bool) -> Array3<T> {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let cat = ndarray::concatenate(Axis(1), &views).unwrap();
        let j = self.joint.forward(&cat, train);
        let j = self.relu.forward_d(&j, train);
        self.heads.forward_all(&j, train)
    }

    /// Backward to the concatenated embedding gradient.
    fn backward(&mut self, dctl: &Array2<T>) -> Array2<T> {
        let dj = self.heads.backward(dctl);
        let dj = self.relu.backward_d(&dj);
        self.joint.backward(&dj)
    }

    fn backward_all(&mut self, dctl: &Array3<T>) -> Array2<T> {
        let dj = self.heads.backward_all(dctl);
        let dj = self.relu.backward_d(&dj);
        self.joint.backward(&dj)
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut out = self.joint.params_mut();
        out.extend(self.heads.params_mut());
        out
    }
}

/// Drives from ground-truth annotations; its branch embeddings are the
/// mimicking targets.
#[derive(Clone)]
pub struct SqueezeNet<T: Scalar> {
    pub scale: ModelScale,
    pub seg_encoder: Encoder<T>,
    pub intent_mlp: Mlp<T>,
    pub speed_mlp: Mlp<T>,
    pub trunk: DrivingTrunk<T>,
}

pub struct BranchOut<T: Scalar> {
    pub controls: Array2<T>,
    /// Segmentation-branch embedding (N, 512).
    pub chi: Array2<T>,
    /// Intention-branch embedding (N, 128).
    pub xi: Array2<T>,
}

impl<T: Scalar> SqueezeNet<T> {
    pub fn new(rng: &mut ChaCha8Rng, scale: ModelScale) -> Self {
        let net = SqueezeNet {
            scale,
            seg_encoder: Encoder::new("sq.seg", rng, 6, SEG_EMB, scale.backbone()),
            intent_mlp: Mlp::new("sq.int", rng, &[3, INTENT_EMB, INTENT_EMB]),
            speed_mlp: Mlp::new("sq.spd", rng, &[1, SPEED_EMB, SPEED_EMB]),
            trunk: DrivingTrunk::new("sq", rng, SEG_EMB + INTENT_EMB + SPEED_EMB),
        };
        if scale == ModelScale::Full {
            assert_eq!(net.trunk.joint.in_f, 512 + 128 + 128);
            assert_eq!(net.trunk.joint.out_f, 512);
        }
        net
    }

    pub fn forward(
        &mut self,
        seg_onehot: &Array4<T>,
        intentions: &Array2<T>,
        speed: &Array2<T>,
        commands: &[Command],
        train: bool,
    ) -> BranchOut<T> {
        let chi = self.seg_encoder.forward(seg_onehot, train, false);
        let xi = self.intent_mlp.forward(intentions, train);
        let spd = self.speed_mlp.forward(speed, train);
        let controls = self.trunk.forward(&[&chi, &xi, &spd], commands, train);
        BranchOut { controls, chi, xi }
    }

    /// Whitebox forward: all four heads.
    pub fn forward_all(
        &mut self,
        seg_onehot: &Array4<T>,
        intentions: &Array2<T>,
        speed: &Array2<T>,
        train: bool,
    ) -> Array3<T> {
        let chi = self.seg_encoder.forward(seg_onehot, train, false);
        let xi = self.intent_mlp.forward(intentions, train);
        let spd = self.speed_mlp.forward(speed, train);
        self.trunk.forward_all(&[&chi, &xi, &spd], train)
    }

    pub fn backward(&mut self, dctl: &Array2<T>) {
        let dcat = self.trunk.backward(dctl);
        let dchi = dcat.slice(s![.., 0..SEG_EMB]).to_owned();
        let dxi = dcat.slice(s![.., SEG_EMB..SEG_EMB + INTENT_EMB]).to_owned();
        let dspd = dcat.slice(s![.., SEG_EMB + INTENT_EMB..]).to_owned();
        self.seg_encoder.backward(&dchi, None);
        self.intent_mlp.backward(&dxi);
        self.speed_mlp.backward(&dspd);
    }
}

impl<T: Scalar> NetParams<T> for SqueezeNet<T> {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut out = self.seg_encoder.params_mut();
        out.extend(self.intent_mlp.params_mut());
        out.extend(self.speed_mlp.params_mut());
        out.extend(self.trunk.params_mut());
        out
    }
}

/// Image-only policy with two separate encoder branches whose embeddings
/// can be pushed toward the squeeze network's.
#[derive(Clone)]
pub struct MimicNet<T: Scalar> {
    pub scale: ModelScale,
    pub seg_branch: Encoder<T>,
    pub intent_branch: Encoder<T>,
    pub speed_mlp: Mlp<T>,
    pub trunk: DrivingTrunk<T>,
}

impl<T: Scalar> MimicNet<T> {
    pub fn new(rng: &mut ChaCha8Rng, scale: ModelScale) -> Self {
        let net = MimicNet {
            scale,
            seg_branch: Encoder::new("mi.seg", rng, 3, SEG_EMB, scale.backbone()),
            intent_branch: Encoder::new("mi.int", rng, 3, INTENT_EMB, scale.backbone()),
            speed_mlp: Mlp::new("mi.spd", rng, &[1, SPEED_EMB, SPEED_EMB]),
            trunk: DrivingTrunk::new("mi", rng, SEG_EMB + INTENT_EMB + SPEED_EMB),
        };
        if scale == ModelScale::Full {
            assert_eq!(net.seg_branch.out_dim, 512);
            assert_eq!(net.intent_branch.out_dim, 128);
            assert_eq!(net.trunk.joint.in_f, 512 + 128 + 128);
        }
        net
    }

    pub fn forward(
        &mut self,
        image: &Array4<T>,
        speed: &Array2<T>,
        commands: &[Command],
        train: bool,
        keep_skips: bool,
    ) -> BranchOut<T> {
        let chi = self.seg_branch.forward(image, train, keep_skips);
        let xi = self.intent_branch.forward(image, train, false);
        let spd = self.speed_mlp.forward(speed, train);
        let controls = self.trunk.forward(&[&chi, &xi, &spd], commands, train);
        BranchOut { controls, chi, xi }
    }

    pub fn forward_all(&mut self, image: &Array4<T>, speed: &Array2<T>, train: bool) -> (Array3<T>, BranchOut<T>) {
        let chi = self.seg_branch.forward(image, train, false);
        let xi = self.intent_branch.forward(image, train, false);
        let spd = self.speed_mlp.forward(speed, train);
        let all = self.trunk.forward_all(&[&chi, &xi, &spd], train);
        let controls = Array2::zeros((image.dim().0, 3));
        (all, BranchOut { controls, chi, xi })
    }

    /// Backward with optional embedding-loss gradients and optional seg
    /// decoder skip gradients (multi-task).
    pub fn backward(
        &mut self,
        dctl: &Array2<T>,
        dchi_extra: Option<&Array2<T>>,
        dxi_extra: Option<&Array2<T>>,
        dskips: Option<Vec<Array4<T>>>,
    ) {
        let dcat = self.trunk.backward(dctl);
        self.backward_from_cat(dcat, dchi_extra, dxi_extra, dskips);
    }

    pub fn backward_all(
        &mut self,
        dctl_all: &Array3<T>,
        dchi_extra: Option<&Array2<T>>,
        dxi_extra: Option<&Array2<T>>,
    ) {
        let dcat = self.trunk.backward_all(dctl_all);
        self.backward_from_cat(dcat, dchi_extra, dxi_extra, None);
    }

    fn backward_from_cat(
        &mut self,
        dcat: Array2<T>,
        dchi_extra: Option<&Array2<T>>,
        dxi_extra: Option<&Array2<T>>,
        dskips: Option<Vec<Array4<T>>>,
    ) {
        let mut dchi = dcat.slice(s![.., 0..SEG_EMB]).to_owned();
        let mut dxi = dcat.slice(s![.., SEG_EMB..SEG_EMB + INTENT_EMB]).to_owned();
        let dspd = dcat.slice(s![.., SEG_EMB + INTENT_EMB..]).to_owned();
        if let Some(d) = dchi_extra {
            dchi = dchi + d;
        }
        if let Some(d) = dxi_extra {
            dxi = dxi + d;
        }
        self.seg_branch.backward(&dchi, dskips);
        self.intent_branch.backward(&dxi, None);
        self.speed_mlp.backward(&dspd);
    }
}

impl<T: Scalar> NetParams<T> for MimicNet<T> {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut out = self.seg_branch.params_mut();
        out.extend(self.intent_branch.params_mut());
        out.extend(self.speed_mlp.params_mut());
        out.extend(self.trunk.params_mut());
        out
    }
}

/// Single-encoder no-mimicking baseline; the image branch outputs
/// 640 = 512 + 128 to keep the latent size of the mimic network.
#[derive(Clone)]
pub struct SingleEncoderNet<T: Scalar> {
    pub scale: ModelScale,
    pub image_branch: Encoder<T>,
    pub speed_mlp: Mlp<T>,
    pub trunk: DrivingTrunk<T>,
}

impl<T: Scalar> SingleEncoderNet<T> {
    pub fn new(rng: &mut ChaCha8Rng, scale: ModelScale) -> Self {
        let net = SingleEncoderNet {
            scale,
            image_branch: Encoder::new("se.img", rng, 3, SINGLE_EMB, scale.wide_backbone()),
            speed_mlp: Mlp::new("se.spd", rng, &[1, SPEED_EMB, SPEED_EMB]),
            trunk: DrivingTrunk::new("se", rng, SINGLE_EMB + SPEED_EMB),
        };
        if scale == ModelScale::Full {
            assert_eq!(net.image_branch.out_dim, 640);
            assert_eq!(net.trunk.joint.in_f, 640 + 128);
        }
        net
    }

    pub fn forward(&mut self, image: &Array4<T>, speed: &Array2<T>, commands: &[Command], train: bool) -> Array2<T> {
        let emb = self.image_branch.forward(image, train, false);
        let spd = self.speed_mlp.forward(speed, train);
        self.trunk.forward(&[&emb, &spd], commands, train)
    }

    pub fn backward(&mut self, dctl: &Array2<T>) {
        let dcat = self.trunk.backward(dctl);
        let demb = dcat.slice(s![.., 0..SINGLE_EMB]).to_owned();
        let dspd = dcat.slice(s![.., SINGLE_EMB..]).to_owned();
        self.image_branch.backward(&demb, None);
        self.speed_mlp.backward(&dspd);
    }
}

impl<T: Scalar> NetParams<T> for SingleEncoderNet<T> {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut out = self.image_branch.params_mut();
        out.extend(self.speed_mlp.params_mut());
        out.extend(self.trunk.params_mut());
        out
    }
}

/// Image to 6-class mask, encoder-decoder with skip connections.
#[derive(Clone)]
pub struct SegEstimator<T: Scalar> {
    pub encoder: Encoder<T>,
    pub decoder: SegDecoder<T>,
}

impl<T: Scalar> SegEstimator<T> {
    pub fn new(rng: &mut ChaCha8Rng, scale: ModelScale) -> Self {
        SegEstimator {
            encoder: Encoder::new("segest.enc", rng, 3, SEG_EMB, scale.backbone()),
            decoder: SegDecoder::new("segest.dec", rng, SEG_EMB, scale.backbone(), 6),
        }
    }

    /// Returns (logits (N,6,88,200), encoder embedding (N,512)).
    pub fn forward(&mut self, image: &Array4<T>, train: bool) -> (Array4<T>, Array2<T>) {
        let emb = self.encoder.forward(image, train, true);
        let skips: Vec<Array4<T>> = self.encoder.skips().to_vec();
        let logits = self.decoder.forward(&emb, &skips, train);
        (logits, emb)
    }

    pub fn backward(&mut self, dlogits: &Array4<T>, demb_extra: Option<&Array2<T>>) {
        let (mut demb, dskips) = self.decoder.backward(dlogits);
        if let Some(d) = demb_extra {
            demb = demb + d;
        }
        self.encoder.backward(&demb, Some(dskips));
    }
}

impl<T: Scalar> NetParams<T> for SegEstimator<T> {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        out
    }
}

/// Image to stop intentions in [0,1]^3. `emb_dim` 512 mirrors the
/// two-stage estimator; 128 mirrors the mimic intent branch for the
/// feature-mimic teacher.
#[derive(Clone)]
pub struct IntentEstimator<T: Scalar> {
    pub encoder: Encoder<T>,
    pub head: Mlp<T>,
    sig: Sigmoid<T>,
}

impl<T: Scalar> IntentEstimator<T> {
    pub fn new(rng: &mut ChaCha8Rng, scale: ModelScale, emb_dim: usize) -> Self {
        IntentEstimator {
            encoder: Encoder::new("intest.enc", rng, 3, emb_dim, scale.backbone()),
            head: Mlp::new("intest.head", rng, &[emb_dim, 256, 256, 3]),
            sig: Sigmoid::new(),
        }
    }

    pub fn forward(&mut self, image: &Array4<T>, train: bool) -> (Array2<T>, Array2<T>) {
        let emb = self.encoder.forward(image, train, false);
        let raw = self.head.forward(&emb, train);
        (self.sig.forward(&raw, train), emb)
    }

    pub fn backward(&mut self, dpred: &Array2<T>, demb_extra: Option<&Array2<T>>) {
        let draw = self.sig.backward(dpred);
        let mut demb = self.head.backward(&draw);
        if let Some(d) = demb_extra {
            demb = demb + d;
        }
        self.encoder.backward(&demb, None);
    }
}

impl<T: Scalar> NetParams<T> for IntentEstimator<T> {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut out = self.encoder.params_mut();
        out.extend(self.head.params_mut());
        out
    }
}

/// Intentions decoder for the multi-task and feature-mimic heads:
/// 128 -> 256 -> 256 -> 3 with sigmoid output.
#[derive(Clone)]
pub struct IntentDecoderNet<T: Scalar> {
    pub mlp: Mlp<T>,
    sig: Sigmoid<T>,
}

impl<T: Scalar> IntentDecoderNet<T> {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        IntentDecoderNet { mlp: Mlp::new("intdec", rng, &[INTENT_EMB, 256, 256, 3]), sig: Sigmoid::new() }
    }

    pub fn forward(&mut self, xi: &Array2<T>, train: bool) -> Array2<T> {
        let raw = self.mlp.forward(xi, train);
        self.sig.forward(&raw, train)
    }

    pub fn backward(&mut self, dpred: &Array2<T>) -> Array2<T> {
        let draw = self.sig.backward(dpred);
        self.mlp.backward(&draw)
    }
}

impl<T: Scalar> NetParams<T> for IntentDecoderNet<T> {
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        self.mlp.params_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> ModelScale {
        ModelScale::Desk { width: 4 }
    }

    #[test]
    fn squeeze_embedding_dims_and_command_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = SqueezeNet::<f32>::new(&mut rng, small());
        let seg = Array4::<f32>::from_elem((2, 6, 88, 200), 0.2);
        let int = Array2::<f32>::from_elem((2, 3), 0.5);
        let spd = Array2::<f32>::from_elem((2, 1), 0.3);
        let a = net.forward(&seg, &int, &spd, &[Command::Follow, Command::Follow], false);
        let b = net.forward(&seg, &int, &spd, &[Command::Left, Command::Left], false);
        assert_eq!(a.chi.dim(), (2, 512));
        assert_eq!(a.xi.dim(), (2, 128));
        // Branch embeddings sit before the conditional switch.
        assert_eq!(a.chi, b.chi);
        assert_eq!(a.xi, b.xi);
        assert_ne!(a.controls, b.controls);
        // Deterministic in eval mode.
        let c = net.forward(&seg, &int, &spd, &[Command::Follow, Command::Follow], false);
        assert_eq!(a.controls, c.controls);
    }

    #[test]
    fn mimic_handles_zero_input_and_keeps_speed_branch_isolated() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = MimicNet::<f32>::new(&mut rng, small());
        let img0 = Array4::<f32>::zeros((1, 3, 88, 200));
        let spd = Array2::<f32>::from_elem((1, 1), 0.0);
        let out = net.forward(&img0, &spd, &[Command::Follow], false, false);
        assert!(out.controls.iter().all(|v| v.is_finite()));
        assert!(out.chi.iter().all(|v| v.is_finite()));
        assert_eq!(out.chi.dim(), (1, 512));
        assert_eq!(out.xi.dim(), (1, 128));

        // Perturbing the image changes chi/xi but not the speed branch.
        let img1 = Array4::<f32>::from_elem((1, 3, 88, 200), 0.7);
        let spd_emb_a = net.speed_mlp.forward(&spd, false);
        let out1 = net.forward(&img1, &spd, &[Command::Follow], false, false);
        let spd_emb_b = net.speed_mlp.forward(&spd, false);
        assert_ne!(out.chi, out1.chi);
        assert_ne!(out.xi, out1.xi);
        assert_eq!(spd_emb_a, spd_emb_b);
    }

    #[test]
    fn parameter_counts_are_reproducible_and_scale_with_width() {
        let mut r1 = ChaCha8Rng::seed_from_u64(2);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let mut a = MimicNet::<f32>::new(&mut r1, small());
        let mut b = MimicNet::<f32>::new(&mut r2, small());
        assert_eq!(a.count_parameters(), b.count_parameters());

        // Analytic delta when a head layer doubles: one 512->256 layer
        // becoming 512->512 adds 512*256 + 256 parameters per head... checked
        // against the closed-form layer arithmetic for the heads we build.
        let head_params: usize = a.trunk.heads.params_mut().iter().map(|p| p.numel()).sum();
        let expect_one_head = 512 * 256 + 256 + 256 * 256 + 256 + 256 * 3 + 3;
        assert_eq!(head_params, 4 * expect_one_head);
    }

    #[test]
    fn intent_decoder_outputs_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut dec = IntentDecoderNet::<f32>::new(&mut rng);
        let xi = Array2::<f32>::from_elem((5, 128), 1.3);
        let y = dec.forward(&xi, false);
        assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(dec.mlp.dims, vec![128, 256, 256, 3]);
    }
}
