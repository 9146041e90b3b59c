//! Segmentation mask decoder: FC from the embedding, reshape to 1x3, then
//! six deconvolution blocks with additive skip connections from the encoder
//! stages, and a final 6-channel convolution at 88x200.

use super::encoder::Backbone;
use crate::nn::layers::{Conv2d, ConvT2d, GroupNorm, Linear, Relu};
use crate::nn::{ParamTensor, Scalar};
use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;

fn groups_for(ch: usize) -> usize {
    for g in [8, 4, 2, 1] {
        if ch % g == 0 {
            return g;
        }
    }
    1
}

#[derive(Clone)]
struct DeconvBlock<T: Scalar> {
    deconv: ConvT2d<T>,
    gn1: GroupNorm<T>,
    relu1: Relu<T>,
    conv: Conv2d<T>,
    gn2: GroupNorm<T>,
    relu2: Relu<T>,
    /// Which encoder skip map is added to the block output.
    skip_idx: Option<usize>,
}

impl<T: Scalar> DeconvBlock<T> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        in_c: usize,
        out_c: usize,
        k: usize,
        pad: usize,
        out_pad: (usize, usize),
        skip_idx: Option<usize>,
    ) -> Self {
        DeconvBlock {
            deconv: ConvT2d::new(&format!("{name}.d"), rng, in_c, out_c, k, 2, pad, out_pad),
            gn1: GroupNorm::new(&format!("{name}.n1"), groups_for(out_c), out_c),
            relu1: Relu::new(),
            conv: Conv2d::new(&format!("{name}.c"), rng, out_c, out_c, 3, 1, 1),
            gn2: GroupNorm::new(&format!("{name}.n2"), groups_for(out_c), out_c),
            relu2: Relu::new(),
            skip_idx,
        }
    }

    fn forward(&mut self, x: &Array4<T>, skips: &[Array4<T>], train: bool) -> Array4<T> {
        let mut h = self.deconv.forward(x, train);
        h = self.gn1.forward(&h, train);
        h = self.relu1.forward_d(&h, train);
        h = self.conv.forward(&h, train);
        h = self.gn2.forward(&h, train);
        h = self.relu2.forward_d(&h, train);
        if let Some(si) = self.skip_idx {
            h = h + &skips[si];
        }
        h
    }

    /// Returns (dx, optional (skip index, skip gradient)).
    fn backward(&mut self, dy: &Array4<T>) -> (Array4<T>, Option<(usize, Array4<T>)>) {
        let dskip = self.skip_idx.map(|si| (si, dy.clone()));
        let dh = self.relu2.backward_d(dy);
        let dh = self.gn2.backward(&dh);
        let dh = self.conv.backward(&dh);
        let dh = self.relu1.backward_d(&dh);
        let dh = self.gn1.backward(&dh);
        (self.deconv.backward(&dh), dskip)
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut out = Vec::new();
        out.extend(self.deconv.params_mut());
        out.extend(self.gn1.params_mut());
        out.extend(self.conv.params_mut());
        out.extend(self.gn2.params_mut());
        out
    }
}

#[derive(Clone)]
pub struct SegDecoder<T: Scalar> {
    pub emb_dim: usize,
    fc: Linear<T>,
    blocks: Vec<DeconvBlock<T>>,
    final_conv: Conv2d<T>,
    init_ch: usize,
    n_skips: usize,
}

impl<T: Scalar> SegDecoder<T> {
    /// Decoder matched to the skip maps of `backbone`.
    pub fn new(name: &str, rng: &mut ChaCha8Rng, emb_dim: usize, backbone: Backbone, classes: usize) -> Self {
        // (out_c, k, pad, out_pad, skip) per block, spatially
        // 1x3 -> 3x7 -> 6x13 -> 11x25 -> 22x50 -> 44x100 -> 88x200.
        let (chs, skips, n_skips): ([usize; 6], [Option<usize>; 6], usize) = match backbone {
            Backbone::Desk { width } => (
                [width * 8, width * 8, width * 4, width * 2, width, width],
                [None, Some(3), Some(2), Some(1), Some(0), None],
                4,
            ),
            Backbone::Resnet34 => (
                [512, 256, 128, 64, 64, 64],
                [Some(4), Some(3), Some(2), Some(1), Some(0), None],
                5,
            ),
            Backbone::Resnet101 => (
                [2048, 1024, 512, 256, 64, 64],
                [Some(4), Some(3), Some(2), Some(1), Some(0), None],
                5,
            ),
        };
        let init_ch = chs[0];
        let geo = [
            (2usize, 0usize, (1usize, 1usize)),
            (3, 1, (1, 0)),
            (3, 1, (0, 0)),
            (3, 1, (1, 1)),
            (3, 1, (1, 1)),
            (3, 1, (1, 1)),
        ];
        let mut blocks = Vec::new();
        let mut in_c = init_ch;
        for (i, ((k, pad, op), (out_c, skip))) in geo.iter().zip(chs.iter().zip(skips.iter())).enumerate() {
            blocks.push(DeconvBlock::new(&format!("{name}.b{i}"), rng, in_c, *out_c, *k, *pad, *op, *skip));
            in_c = *out_c;
        }
        SegDecoder {
            emb_dim,
            fc: Linear::new(&format!("{name}.fc"), rng, emb_dim, init_ch * 3),
            blocks,
            final_conv: Conv2d::new(&format!("{name}.out"), rng, in_c, classes, 3, 1, 1),
            init_ch,
            n_skips,
        }
    }

    pub fn expected_skips(&self) -> usize {
        self.n_skips
    }

    /// Decode logits (N, classes, 88, 200) from the embedding plus encoder
    /// skip maps (shallow-to-deep order).
    pub fn forward(&mut self, emb: &Array2<T>, skips: &[Array4<T>], train: bool) -> Array4<T> {
        assert_eq!(skips.len(), self.n_skips, "decoder skip count");
        let n = emb.nrows();
        let flat = self.fc.forward(emb, train);
        let mut h = flat.into_shape_with_order((n, self.init_ch, 1, 3)).unwrap();
        for b in &mut self.blocks {
            h = b.forward(&h, skips, train);
        }
        self.final_conv.forward(&h, train)
    }

    /// Returns (embedding gradient, per-skip gradients shallow-to-deep).
    pub fn backward(&mut self, dlogits: &Array4<T>) -> (Array2<T>, Vec<Array4<T>>) {
        let mut dh = self.final_conv.backward(dlogits);
        let mut dskips: Vec<Option<Array4<T>>> = vec![None; self.n_skips];
        for b in self.blocks.iter_mut().rev() {
            let (dx, ds) = b.backward(&dh);
            if let Some((si, g)) = ds {
                dskips[si] = Some(match dskips[si].take() {
                    Some(acc) => acc + &g,
                    None => g,
                });
            }
            dh = dx;
        }
        let n = dh.dim().0;
        let dflat = dh.into_shape_with_order((n, self.init_ch * 3)).unwrap();
        let demb = self.fc.backward(&dflat);
        let dskips = dskips.into_iter().map(|o| o.expect("skip grad")).collect();
        (demb, dskips)
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut out = Vec::new();
        out.extend(self.fc.params_mut());
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.final_conv.params_mut());
        out
    }

    /// (input ch, output ch, out h, out w) per deconv block plus the final
    /// conv row; used by the full-scale dimension assertions.
    pub fn dimension_rows(&self) -> Vec<(usize, usize, usize, usize)> {
        let spatial = [(3usize, 7usize), (6, 13), (11, 25), (22, 50), (44, 100), (88, 200)];
        let mut rows = Vec::new();
        let mut in_c = self.init_ch;
        for (b, (h, w)) in self.blocks.iter().zip(spatial.iter()) {
            rows.push((in_c, b.deconv.out_c, *h, *w));
            in_c = b.deconv.out_c;
        }
        rows.push((in_c, self.final_conv.out_c, 88, 200));
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::encoder::Encoder;
    use rand::SeedableRng;

    #[test]
    fn desk_decoder_outputs_full_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut enc = Encoder::<f32>::new("e", &mut rng, 3, 64, Backbone::Desk { width: 4 });
        let mut dec = SegDecoder::<f32>::new("d", &mut rng, 64, Backbone::Desk { width: 4 }, 6);
        let x = Array4::<f32>::from_elem((1, 3, 88, 200), 0.5);
        let emb = enc.forward(&x, true, true);
        let skips: Vec<_> = enc.skips().to_vec();
        let logits = dec.forward(&emb, &skips, true);
        assert_eq!(logits.dim(), (1, 6, 88, 200));
        let (demb, dskips) = dec.backward(&logits);
        assert_eq!(demb.dim(), (1, 64));
        assert_eq!(dskips.len(), 4);
        let dx = enc.backward(&demb, Some(dskips));
        assert_eq!(dx.dim(), x.dim());
    }
}
