//! Residual image encoders.
//!
//! The desk backbone is a 4-stage residual CNN with configurable base
//! width; full-scale mode instantiates 34-layer (basic-block) or 101-layer
//! (bottleneck) residual networks. Every backbone ends in global average
//! pooling and a linear projection to the requested embedding size.

use crate::nn::layers::{Conv2d, GlobalAvgPool, GroupNorm, Linear, MaxPool2d, Relu};
use crate::nn::{ParamTensor, Scalar};
use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backbone {
    /// 4-stage residual CNN; `width` is the stem channel count.
    Desk { width: usize },
    Resnet34,
    Resnet101,
}

impl Backbone {
    /// Channel count after the final stage (before projection).
    pub fn feature_dim(&self) -> usize {
        match self {
            Backbone::Desk { width } => width * 8,
            Backbone::Resnet34 => 512,
            Backbone::Resnet101 => 2048,
        }
    }
}

fn groups_for(ch: usize) -> usize {
    for g in [8, 4, 2, 1] {
        if ch % g == 0 {
            return g;
        }
    }
    1
}

/// Basic or bottleneck residual block.
#[derive(Clone)]
pub struct ResBlock<T: Scalar> {
    convs: Vec<(Conv2d<T>, GroupNorm<T>, Relu<T>)>,
    skip: Option<(Conv2d<T>, GroupNorm<T>)>,
    relu_out: Relu<T>,
}

impl<T: Scalar> ResBlock<T> {
    fn basic(name: &str, rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, stride: usize) -> Self {
        let convs = vec![
            (
                Conv2d::new(&format!("{name}.c1"), rng, in_c, out_c, 3, stride, 1),
                GroupNorm::new(&format!("{name}.n1"), groups_for(out_c), out_c),
                Relu::new(),
            ),
            (
                Conv2d::new(&format!("{name}.c2"), rng, out_c, out_c, 3, 1, 1),
                GroupNorm::new(&format!("{name}.n2"), groups_for(out_c), out_c),
                Relu::new(),
            ),
        ];
        let skip = if stride != 1 || in_c != out_c {
            Some((
                Conv2d::new(&format!("{name}.sk"), rng, in_c, out_c, 1, stride, 0),
                GroupNorm::new(&format!("{name}.skn"), groups_for(out_c), out_c),
            ))
        } else {
            None
        };
        ResBlock { convs, skip, relu_out: Relu::new() }
    }

    fn bottleneck(name: &str, rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, stride: usize) -> Self {
        let mid = out_c / 4;
        let convs = vec![
            (
                Conv2d::new(&format!("{name}.c1"), rng, in_c, mid, 1, 1, 0),
                GroupNorm::new(&format!("{name}.n1"), groups_for(mid), mid),
                Relu::new(),
            ),
            (
                Conv2d::new(&format!("{name}.c2"), rng, mid, mid, 3, stride, 1),
                GroupNorm::new(&format!("{name}.n2"), groups_for(mid), mid),
                Relu::new(),
            ),
            (
                Conv2d::new(&format!("{name}.c3"), rng, mid, out_c, 1, 1, 0),
                GroupNorm::new(&format!("{name}.n3"), groups_for(out_c), out_c),
                Relu::new(),
            ),
        ];
        let skip = if stride != 1 || in_c != out_c {
            Some((
                Conv2d::new(&format!("{name}.sk"), rng, in_c, out_c, 1, stride, 0),
                GroupNorm::new(&format!("{name}.skn"), groups_for(out_c), out_c),
            ))
        } else {
            None
        };
        ResBlock { convs, skip, relu_out: Relu::new() }
    }

    fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        let n_convs = self.convs.len();
        let mut h = x.clone();
        for (i, (conv, gn, relu)) in self.convs.iter_mut().enumerate() {
            h = conv.forward(&h, train);
            h = gn.forward(&h, train);
            if i + 1 < n_convs {
                h = relu.forward_d(&h, train);
            }
        }
        let s = match &mut self.skip {
            Some((conv, gn)) => {
                let s = conv.forward(x, train);
                gn.forward(&s, train)
            }
            None => x.clone(),
        };
        self.relu_out.forward_d(&(h + s), train)
    }

    fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let d = self.relu_out.backward_d(dy);
        let mut dh = d.clone();
        let n_convs = self.convs.len();
        for (i, (conv, gn, relu)) in self.convs.iter_mut().enumerate().rev() {
            if i + 1 < n_convs {
                dh = relu.backward_d(&dh);
            }
            dh = gn.backward(&dh);
            dh = conv.backward(&dh);
        }
        let ds = match &mut self.skip {
            Some((conv, gn)) => {
                let g = gn.backward(&d);
                conv.backward(&g)
            }
            None => d,
        };
        dh + ds
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut out = Vec::new();
        for (conv, gn, _) in &mut self.convs {
            out.extend(conv.params_mut());
            out.extend(gn.params_mut());
        }
        if let Some((conv, gn)) = &mut self.skip {
            out.extend(conv.params_mut());
            out.extend(gn.params_mut());
        }
        out
    }
}

/// Spatial sizes of the encoder skip maps, shallow to deep, for an input
/// of `(h, w)`; used by decoders to wire skip connections.
pub fn skip_plan(backbone: Backbone, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
    // (channels, height, width)
    match backbone {
        Backbone::Desk { width } => {
            let h2 = (h + 1) / 2;
            let w2 = (w + 1) / 2;
            vec![
                (width, h2, w2),
                (width * 2, (h2 + 1) / 2, (w2 + 1) / 2),
                (width * 4, (h2 + 3) / 4, (w2 + 3) / 4),
                (width * 8, (h2 + 7) / 8, (w2 + 7) / 8),
            ]
        }
        Backbone::Resnet34 | Backbone::Resnet101 => {
            let c = if backbone == Backbone::Resnet34 { [64, 64, 128, 256, 512] } else { [64, 256, 512, 1024, 2048] };
            let h2 = (h + 1) / 2;
            let w2 = (w + 1) / 2;
            let h4 = (h2 + 1) / 2;
            let w4 = (w2 + 1) / 2;
            vec![
                (c[0], h2, w2),
                (c[1], h4, w4),
                (c[2], (h4 + 1) / 2, (w4 + 1) / 2),
                (c[3], (h4 + 3) / 4, (w4 + 3) / 4),
                (c[4], (h4 + 7) / 8, (w4 + 7) / 8),
            ]
        }
    }
}

/// Residual encoder: stem, stages, global pool, linear projection.
#[derive(Clone)]
pub struct Encoder<T: Scalar> {
    pub backbone: Backbone,
    pub in_ch: usize,
    pub out_dim: usize,
    stem_conv: Conv2d<T>,
    stem_gn: GroupNorm<T>,
    stem_relu: Relu<T>,
    stem_pool: Option<MaxPool2d<T>>,
    blocks: Vec<ResBlock<T>>,
    /// Index (into `blocks`) after which each skip map is captured. The
    /// stem output is skip 0 for full-scale backbones.
    stage_ends: Vec<usize>,
    pool: GlobalAvgPool,
    proj: Linear<T>,
    skip_cache: Vec<Array4<T>>,
    stem_capture: bool,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, in_ch: usize, out_dim: usize, backbone: Backbone) -> Self {
        let mut blocks = Vec::new();
        let mut stage_ends = Vec::new();
        let (stem_conv, stem_pool, stem_capture) = match backbone {
            Backbone::Desk { width } => {
                let stem = Conv2d::new(&format!("{name}.stem"), rng, in_ch, width, 3, 2, 1);
                let stages = [(width, 1usize), (width * 2, 2), (width * 4, 2), (width * 8, 2)];
                let mut in_c = width;
                for (si, (ch, stride)) in stages.iter().enumerate() {
                    blocks.push(ResBlock::basic(&format!("{name}.s{si}"), rng, in_c, *ch, *stride));
                    stage_ends.push(blocks.len() - 1);
                    in_c = *ch;
                }
                (stem, None, false)
            }
            Backbone::Resnet34 => {
                let stem = Conv2d::new(&format!("{name}.stem"), rng, in_ch, 64, 7, 2, 3);
                let plan = [(64usize, 3usize, 1usize), (128, 4, 2), (256, 6, 2), (512, 3, 2)];
                let mut in_c = 64;
                for (si, (ch, n, stride)) in plan.iter().enumerate() {
                    for bi in 0..*n {
                        let s = if bi == 0 { *stride } else { 1 };
                        blocks.push(ResBlock::basic(&format!("{name}.s{si}b{bi}"), rng, in_c, *ch, s));
                        in_c = *ch;
                    }
                    stage_ends.push(blocks.len() - 1);
                }
                (stem, Some(MaxPool2d::new(3, 2, 1)), true)
            }
            Backbone::Resnet101 => {
                let stem = Conv2d::new(&format!("{name}.stem"), rng, in_ch, 64, 7, 2, 3);
                let plan = [(256usize, 3usize, 1usize), (512, 4, 2), (1024, 23, 2), (2048, 3, 2)];
                let mut in_c = 64;
                for (si, (ch, n, stride)) in plan.iter().enumerate() {
                    for bi in 0..*n {
                        let s = if bi == 0 { *stride } else { 1 };
                        blocks.push(ResBlock::bottleneck(&format!("{name}.s{si}b{bi}"), rng, in_c, *ch, s));
                        in_c = *ch;
                    }
                    stage_ends.push(blocks.len() - 1);
                }
                (stem, Some(MaxPool2d::new(3, 2, 1)), true)
            }
        };
        let feat = backbone.feature_dim();
        let stem_ch = match backbone {
            Backbone::Desk { width } => width,
            _ => 64,
        };
        Encoder {
            backbone,
            in_ch,
            out_dim,
            stem_gn: GroupNorm::new(&format!("{name}.stemn"), groups_for(stem_ch), stem_ch),
            stem_conv,
            stem_relu: Relu::new(),
            stem_pool,
            blocks,
            stage_ends,
            pool: GlobalAvgPool::new(),
            proj: Linear::new(&format!("{name}.proj"), rng, feat, out_dim),
            skip_cache: Vec::new(),
            stem_capture,
        }
    }

    /// Embedding forward. When `keep_skips` is set the per-stage feature
    /// maps are retained for decoder skip connections.
    pub fn forward(&mut self, x: &Array4<T>, train: bool, keep_skips: bool) -> Array2<T> {
        self.skip_cache.clear();
        let mut h = self.stem_conv.forward(x, train);
        h = self.stem_gn.forward(&h, train);
        h = self.stem_relu.forward_d(&h, train);
        if keep_skips && self.stem_capture {
            self.skip_cache.push(h.clone());
        }
        if let Some(pool) = &mut self.stem_pool {
            h = pool.forward(&h, train);
        }
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            h = block.forward(&h, train);
            if keep_skips && self.stage_ends.contains(&bi) {
                self.skip_cache.push(h.clone());
            }
        }
        let pooled = self.pool.forward(&h, train);
        self.proj.forward(&pooled, train)
    }

    pub fn skips(&self) -> &[Array4<T>] {
        &self.skip_cache
    }

    /// Backward from the embedding gradient, with optional gradients into
    /// the captured skip maps (shallow-to-deep order, matching `skips()`).
    pub fn backward(&mut self, demb: &Array2<T>, dskips: Option<Vec<Array4<T>>>) -> Array4<T> {
        let dpooled = self.proj.backward(demb);
        let mut dh = self.pool.backward(&dpooled);
        let mut dskips = dskips;
        let skip_offset = if self.stem_capture { 1 } else { 0 };
        for (bi, block) in self.blocks.iter_mut().enumerate().rev() {
            if let Some(ds) = dskips.as_mut() {
                if let Some(pos) = self.stage_ends.iter().position(|&e| e == bi) {
                    let idx = skip_offset + pos;
                    if idx < ds.len() {
                        dh = dh + &ds[idx];
                    }
                }
            }
            dh = block.backward(&dh);
        }
        if let Some(pool) = &mut self.stem_pool {
            dh = pool.backward(&dh);
        }
        if let Some(ds) = dskips.as_mut() {
            if self.stem_capture && !ds.is_empty() {
                dh = dh + &ds[0];
            }
        }
        let dh = self.stem_relu.backward_d(&dh);
        let dh = self.stem_gn.backward(&dh);
        self.stem_conv.backward(&dh)
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut out = Vec::new();
        out.extend(self.stem_conv.params_mut());
        out.extend(self.stem_gn.params_mut());
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.proj.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn desk_encoder_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut enc = Encoder::<f32>::new("e", &mut rng, 3, 512, Backbone::Desk { width: 8 });
        let x = Array4::<f32>::zeros((2, 3, 88, 200));
        let emb = enc.forward(&x, false, true);
        assert_eq!(emb.dim(), (2, 512));
        let dims: Vec<_> = enc.skips().iter().map(|s| s.dim()).collect();
        assert_eq!(
            dims,
            vec![(2, 8, 44, 100), (2, 16, 22, 50), (2, 32, 11, 25), (2, 64, 6, 13)]
        );
        let plan = skip_plan(Backbone::Desk { width: 8 }, 88, 200);
        for (p, d) in plan.iter().zip(dims.iter()) {
            assert_eq!((d.1, d.2, d.3), *p);
        }
    }

    #[test]
    fn encoder_backward_runs_and_fills_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut enc = Encoder::<f32>::new("e", &mut rng, 3, 32, Backbone::Desk { width: 4 });
        let x = Array4::<f32>::from_elem((1, 3, 24, 40), 0.3);
        let emb = enc.forward(&x, true, false);
        let demb = Array2::<f32>::from_elem(emb.dim(), 1.0);
        let dx = enc.backward(&demb, None);
        assert_eq!(dx.dim(), x.dim());
        let total: f32 = enc
            .params_mut()
            .iter()
            .map(|p| p.grad.iter().map(|v| v.abs()).sum::<f32>())
            .sum();
        assert!(total > 0.0);
    }
}
