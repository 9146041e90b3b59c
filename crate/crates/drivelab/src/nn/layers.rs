//! Layers with explicit forward/backward passes.
//!
//! Each layer owns its parameters and the caches needed for the backward
//! pass. Backward calls accumulate into the parameter `grad` buffers and
//! return the gradient with respect to the layer input.

use super::{he_init, matmul, ParamTensor, Scalar};
use ndarray::{s, Array2, Array4, ArrayView2, Axis, Ix1, Ix2};
use rand_chacha::ChaCha8Rng;

/// Gather sliding windows: `x (N,C,H,W)` to `(N*gh*gw, C*k*k)` where the
/// grid position `(n, oy, ox)` reads `x[n, c, oy*s + ky - pad, ox*s + kx - pad]`
/// with zero fill outside. Exact adjoint of [`col2im`].
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &Array4<T>,
    k: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let mut cols = Array2::<T>::zeros((n * gh * gw, c * k * k));
    let xs = x.as_slice().unwrap();
    for ni in 0..n {
        for oy in 0..gh {
            for ox in 0..gw {
                let row = (ni * gh + oy) * gw + ox;
                let mut col_base = 0usize;
                for ci in 0..c {
                    let x_base = (ni * c + ci) * h * w;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                cols[(row, col_base + ky * k + kx)] =
                                    xs[x_base + iy as usize * w + ix as usize];
                            }
                        }
                    }
                    col_base += k * k;
                }
            }
        }
    }
    cols
}

/// Scatter-add sliding windows back: adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &Array2<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
) -> Array4<T> {
    let mut x = Array4::<T>::zeros((n, c, h, w));
    let xs = x.as_slice_mut().unwrap();
    for ni in 0..n {
        for oy in 0..gh {
            for ox in 0..gw {
                let row = (ni * gh + oy) * gw + ox;
                let mut col_base = 0usize;
                for ci in 0..c {
                    let x_base = (ni * c + ci) * h * w;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                xs[x_base + iy as usize * w + ix as usize] +=
                                    cols[(row, col_base + ky * k + kx)];
                            }
                        }
                    }
                    col_base += k * k;
                }
            }
        }
    }
    x
}

pub fn conv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

#[derive(Clone)]
pub struct Conv2d<T: Scalar> {
    pub w: ParamTensor<T>,
    pub b: ParamTensor<T>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Array2<T>, (usize, usize, usize, usize))>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        let w = he_init::<T>(rng, &[out_c, in_c * k * k], in_c * k * k);
        Conv2d {
            w: ParamTensor::new(format!("{name}.w"), w),
            b: ParamTensor::new(format!("{name}.b"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_c]))),
            in_c,
            out_c,
            k,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (conv_out_size(h, self.k, self.stride, self.pad), conv_out_size(w, self.k, self.stride, self.pad))
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_c, "conv input channels");
        let (gh, gw) = self.out_hw(h, w);
        let cols = im2col(x, self.k, self.stride, self.pad, gh, gw);
        let wm = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut y_mat = matmul(&cols.view(), &wm.t());
        let b = self.b.value.view().into_dimensionality::<Ix1>().unwrap();
        for mut row in y_mat.axis_iter_mut(Axis(0)) {
            row += &b;
        }
        if train {
            self.cache = Some((cols, (n, c, h, w)));
        }
        mat_to_nchw(&y_mat, n, self.out_c, gh, gw)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let (cols, (n, c, h, w)) = self.cache.take().expect("conv cache");
        let (nb, oc, gh, gw) = dy.dim();
        assert_eq!((nb, oc), (n, self.out_c));
        let dy_mat = nchw_to_mat(dy);
        // dW = dy_mat^T x cols
        let gw_mat = matmul(&dy_mat.t(), &cols.view());
        let mut wgrad = self.w.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
        wgrad += &gw_mat;
        let mut bgrad = self.b.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
        let db = dy_mat.sum_axis(Axis(0));
        bgrad += &db;
        // dx = col2im(dy_mat x W)
        let wm = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        let dcols = matmul(&dy_mat.view(), &wm);
        col2im(&dcols, n, c, h, w, self.k, self.stride, self.pad, gh, gw)
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Transposed convolution; `output = (input-1)*stride - 2*pad + k + out_pad`.
#[derive(Clone)]
pub struct ConvT2d<T: Scalar> {
    pub w: ParamTensor<T>,
    pub b: ParamTensor<T>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: (usize, usize),
    cache: Option<(Array2<T>, (usize, usize, usize, usize))>,
}

impl<T: Scalar> ConvT2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: (usize, usize),
    ) -> Self {
        let w = he_init::<T>(rng, &[in_c, out_c * k * k], in_c * k * k);
        ConvT2d {
            w: ParamTensor::new(format!("{name}.w"), w),
            b: ParamTensor::new(format!("{name}.b"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_c]))),
            in_c,
            out_c,
            k,
            stride,
            pad,
            out_pad,
            cache: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.k + self.out_pad.0 - 2 * self.pad,
            (w - 1) * self.stride + self.k + self.out_pad.1 - 2 * self.pad,
        )
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_c, "deconv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let x_mat = nchw_to_mat(x);
        let wm = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        let prod = matmul(&x_mat.view(), &wm);
        let mut y = col2im(&prod, n, self.out_c, oh, ow, self.k, self.stride, self.pad, h, w);
        let b = self.b.value.view().into_dimensionality::<Ix1>().unwrap();
        for ni in 0..n {
            for ci in 0..self.out_c {
                let bias = b[ci];
                y.slice_mut(s![ni, ci, .., ..]).mapv_inplace(|v| v + bias);
            }
        }
        if train {
            self.cache = Some((x_mat, (n, c, h, w)));
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let (x_mat, (n, c, h, w)) = self.cache.take().expect("deconv cache");
        let dprod = im2col(dy, self.k, self.stride, self.pad, h, w);
        let wm = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        let dx_mat = matmul(&dprod.view(), &wm.t());
        let gw_mat = matmul(&x_mat.t(), &dprod.view());
        let mut wgrad = self.w.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
        wgrad += &gw_mat;
        let mut bgrad = self.b.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
        for ci in 0..self.out_c {
            let mut acc = T::zero();
            for ni in 0..dy.dim().0 {
                for v in dy.slice(s![ni, ci, .., ..]).iter() {
                    acc += *v;
                }
            }
            bgrad[ci] += acc;
        }
        mat_to_nchw(&dx_mat, n, c, h, w)
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// `(N*H*W, C)` row-major by (n, h, w).
fn nchw_to_mat<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let mut m = Array2::<T>::zeros((n * h * w, c));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![ni, ci, .., ..]);
            let plane = plane.as_slice().unwrap();
            for (hw, &v) in plane.iter().enumerate() {
                m[(ni * h * w + hw, ci)] = v;
            }
        }
    }
    m
}

fn mat_to_nchw<T: Scalar>(m: &Array2<T>, n: usize, c: usize, h: usize, w: usize) -> Array4<T> {
    let mut x = Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let mut plane = x.slice_mut(s![ni, ci, .., ..]);
            let plane = plane.as_slice_mut().unwrap();
            for (hw, v) in plane.iter_mut().enumerate() {
                *v = m[(ni * h * w + hw, ci)];
            }
        }
    }
    x
}

#[derive(Clone)]
pub struct Linear<T: Scalar> {
    pub w: ParamTensor<T>,
    pub b: ParamTensor<T>,
    pub in_f: usize,
    pub out_f: usize,
    cache: Option<Array2<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, in_f: usize, out_f: usize) -> Self {
        let w = he_init::<T>(rng, &[out_f, in_f], in_f);
        Linear {
            w: ParamTensor::new(format!("{name}.w"), w),
            b: ParamTensor::new(format!("{name}.b"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[out_f]))),
            in_f,
            out_f,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<T>, train: bool) -> Array2<T> {
        assert_eq!(x.ncols(), self.in_f, "linear input dim");
        let wm = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = matmul(&x.view(), &wm.t());
        let b = self.b.value.view().into_dimensionality::<Ix1>().unwrap();
        for mut row in y.axis_iter_mut(Axis(0)) {
            row += &b;
        }
        if train {
            self.cache = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        let x = self.cache.take().expect("linear cache");
        let gw = matmul(&dy.t(), &x.view());
        let mut wgrad = self.w.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
        wgrad += &gw;
        let mut bgrad = self.b.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
        bgrad += &dy.sum_axis(Axis(0));
        let wm = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        matmul(&dy.view(), &wm)
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Group normalization over (C/G, H, W) per sample; no running statistics,
/// so train and eval are the same deterministic function.
#[derive(Clone)]
pub struct GroupNorm<T: Scalar> {
    pub gamma: ParamTensor<T>,
    pub beta: ParamTensor<T>,
    pub groups: usize,
    pub channels: usize,
    eps: T,
    cache: Option<(Array4<T>, Array2<T>)>,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(name: &str, groups: usize, channels: usize) -> Self {
        assert_eq!(channels % groups, 0, "channels must divide into groups");
        GroupNorm {
            gamma: ParamTensor::new(format!("{name}.g"), ndarray::ArrayD::from_elem(ndarray::IxDyn(&[channels]), T::one())),
            beta: ParamTensor::new(format!("{name}.b"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[channels]))),
            groups,
            channels,
            eps: T::from_f64(1e-5),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let cg = c / self.groups;
        let m = (cg * h * w) as f64;
        let mut x_hat = Array4::<T>::zeros((n, c, h, w));
        let mut inv_std = Array2::<T>::zeros((n, self.groups));
        for ni in 0..n {
            for g in 0..self.groups {
                let sl = x.slice(s![ni, g * cg..(g + 1) * cg, .., ..]);
                let mut mean = T::zero();
                for v in sl.iter() {
                    mean += *v;
                }
                mean = mean / T::from_f64(m);
                let mut var = T::zero();
                for v in sl.iter() {
                    let d = *v - mean;
                    var += d * d;
                }
                var = var / T::from_f64(m);
                let istd = T::one() / (var + self.eps).sqrt();
                inv_std[(ni, g)] = istd;
                let mut dst = x_hat.slice_mut(s![ni, g * cg..(g + 1) * cg, .., ..]);
                dst.assign(&sl);
                dst.mapv_inplace(|v| (v - mean) * istd);
            }
        }
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x_hat.clone();
        for ci in 0..c {
            let mut plane = y.slice_mut(s![.., ci, .., ..]);
            plane.mapv_inplace(|v| v * gamma[ci] + beta[ci]);
        }
        if train {
            self.cache = Some((x_hat, inv_std));
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let (x_hat, inv_std) = self.cache.take().expect("groupnorm cache");
        let (n, c, h, w) = dy.dim();
        let cg = c / self.groups;
        let m = T::from_f64((cg * h * w) as f64);
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap().to_owned();

        // Parameter grads per channel.
        {
            let mut ggrad = self.gamma.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            let mut bgrad = self.beta.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            for ci in 0..c {
                let mut gsum = T::zero();
                let mut bsum = T::zero();
                for ni in 0..n {
                    let dyp = dy.slice(s![ni, ci, .., ..]);
                    let xhp = x_hat.slice(s![ni, ci, .., ..]);
                    for (dv, xv) in dyp.iter().zip(xhp.iter()) {
                        gsum += *dv * *xv;
                        bsum += *dv;
                    }
                }
                ggrad[ci] += gsum;
                bgrad[ci] += bsum;
            }
        }

        let mut dx = Array4::<T>::zeros((n, c, h, w));
        for ni in 0..n {
            for g in 0..self.groups {
                let range = g * cg..(g + 1) * cg;
                let dyg = dy.slice(s![ni, range.clone(), .., ..]);
                let xhg = x_hat.slice(s![ni, range.clone(), .., ..]);
                // dxhat = dy * gamma (per channel)
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for ci in 0..cg {
                    let gch = gamma[g * cg + ci];
                    let dyp = dyg.slice(s![ci, .., ..]);
                    let xhp = xhg.slice(s![ci, .., ..]);
                    for (dv, xv) in dyp.iter().zip(xhp.iter()) {
                        let dxh = *dv * gch;
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * *xv;
                    }
                }
                let istd = inv_std[(ni, g)];
                let mut dst = dx.slice_mut(s![ni, range, .., ..]);
                for ci in 0..cg {
                    let gch = gamma[g * cg + ci];
                    let dyp = dyg.slice(s![ci, .., ..]);
                    let xhp = xhg.slice(s![ci, .., ..]);
                    let mut dxp = dst.slice_mut(s![ci, .., ..]);
                    ndarray::Zip::from(&mut dxp).and(&dyp).and(&xhp).for_each(|d, &dv, &xv| {
                        let dxh = dv * gch;
                        *d = istd * (dxh - (sum_dxhat + xv * sum_dxhat_xhat) / m);
                    });
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// ReLU with a cached mask; one instance per usage site.
#[derive(Clone, Default)]
pub struct Relu<T: Scalar> {
    mask: Option<ndarray::ArrayD<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Relu { mask: None }
    }

    pub fn forward_d<D: ndarray::Dimension>(
        &mut self,
        x: &ndarray::Array<T, D>,
        train: bool,
    ) -> ndarray::Array<T, D> {
        let y = x.mapv(|v| if v > T::zero() { v } else { T::zero() });
        if train {
            self.mask = Some(
                x.mapv(|v| if v > T::zero() { T::one() } else { T::zero() })
                    .into_dyn(),
            );
        }
        y
    }

    pub fn backward_d<D: ndarray::Dimension>(&mut self, dy: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
        let mask = self.mask.take().expect("relu cache");
        let mask = mask.into_dimensionality::<D>().unwrap();
        dy * &mask
    }
}

/// 2x-downsampling max pool used by the full-scale stem.
#[derive(Clone)]
pub struct MaxPool2d<T: Scalar> {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Vec<usize>, (usize, usize, usize, usize), (usize, usize))>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar> MaxPool2d<T> {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        MaxPool2d { k, stride, pad, cache: None, _t: std::marker::PhantomData }
    }

    pub fn forward(&mut self, x: &Array4<T>, train: bool) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let gh = conv_out_size(h, self.k, self.stride, self.pad);
        let gw = conv_out_size(w, self.k, self.stride, self.pad);
        let mut y = Array4::<T>::zeros((n, c, gh, gw));
        let mut argmax = vec![0usize; n * c * gh * gw];
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..gh {
                    for ox in 0..gw {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0usize;
                        for ky in 0..self.k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = x[(ni, ci, iy as usize, ix as usize)];
                                if v > best {
                                    best = v;
                                    best_idx = iy as usize * w + ix as usize;
                                }
                            }
                        }
                        y[(ni, ci, oy, ox)] = best;
                        argmax[((ni * c + ci) * gh + oy) * gw + ox] = best_idx;
                    }
                }
            }
        }
        if train {
            self.cache = Some((argmax, (n, c, h, w), (gh, gw)));
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let (argmax, (n, c, h, w), (gh, gw)) = self.cache.take().expect("maxpool cache");
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..gh {
                    for ox in 0..gw {
                        let idx = argmax[((ni * c + ci) * gh + oy) * gw + ox];
                        dx[(ni, ci, idx / w, idx % w)] += dy[(ni, ci, oy, ox)];
                    }
                }
            }
        }
        dx
    }
}

/// Mean over the spatial dims: (N,C,H,W) -> (N,C).
#[derive(Clone)]
pub struct GlobalAvgPool {
    cache: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { cache: None }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Array4<T>, train: bool) -> Array2<T> {
        let (n, c, h, w) = x.dim();
        let mut y = Array2::<T>::zeros((n, c));
        let scale = T::from_f64(1.0 / (h * w) as f64);
        for ni in 0..n {
            for ci in 0..c {
                let mut acc = T::zero();
                for v in x.slice(s![ni, ci, .., ..]).iter() {
                    acc += *v;
                }
                y[(ni, ci)] = acc * scale;
            }
        }
        if train {
            self.cache = Some((h, w));
        }
        y
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Array2<T>) -> Array4<T> {
        let (h, w) = self.cache.take().expect("pool cache");
        let (n, c) = dy.dim();
        let scale = T::from_f64(1.0 / (h * w) as f64);
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let g = dy[(ni, ci)] * scale;
                dx.slice_mut(s![ni, ci, .., ..]).fill(g);
            }
        }
        dx
    }
}

impl Default for GlobalAvgPool {
    fn default() -> Self {
        Self::new()
    }
}

/// Elementwise sigmoid with cache.
#[derive(Clone)]
pub struct Sigmoid<T: Scalar> {
    cache: Option<Array2<T>>,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn new() -> Self {
        Sigmoid { cache: None }
    }

    pub fn forward(&mut self, x: &Array2<T>, train: bool) -> Array2<T> {
        let y = x.mapv(|v| T::one() / (T::one() + (-v).exp()));
        if train {
            self.cache = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        let y = self.cache.take().expect("sigmoid cache");
        dy * &y.mapv(|v| v * (T::one() - v))
    }
}

impl<T: Scalar> Default for Sigmoid<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone)]
pub struct Tanh<T: Scalar> {
    cache: Option<Array2<T>>,
}

impl<T: Scalar> Tanh<T> {
    pub fn new() -> Self {
        Tanh { cache: None }
    }

    pub fn forward(&mut self, x: &Array2<T>, train: bool) -> Array2<T> {
        let y = x.mapv(|v| v.tanh());
        if train {
            self.cache = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        let y = self.cache.take().expect("tanh cache");
        dy * &y.mapv(|v| T::one() - v * v)
    }
}

impl<T: Scalar> Default for Tanh<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-pixel softmax cross-entropy against u8 class labels.
/// Returns (mean loss, dlogits).
pub fn softmax_ce_2d<T: Scalar>(logits: &Array4<T>, labels: &[u8]) -> (T, Array4<T>) {
    let (n, c, h, w) = logits.dim();
    assert_eq!(labels.len(), n * h * w);
    let mut dlogits = Array4::<T>::zeros((n, c, h, w));
    let mut loss = T::zero();
    let scale = T::from_f64(1.0 / (n * h * w) as f64);
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut maxv = T::neg_infinity();
                for ci in 0..c {
                    maxv = maxv.max(logits[(ni, ci, y, x)]);
                }
                let mut denom = T::zero();
                for ci in 0..c {
                    denom += (logits[(ni, ci, y, x)] - maxv).exp();
                }
                let label = labels[(ni * h + y) * w + x] as usize;
                let logp = logits[(ni, label, y, x)] - maxv - denom.ln();
                loss -= logp * scale;
                for ci in 0..c {
                    let p = (logits[(ni, ci, y, x)] - maxv).exp() / denom;
                    let delta = if ci == label { T::one() } else { T::zero() };
                    dlogits[(ni, ci, y, x)] = (p - delta) * scale;
                }
            }
        }
    }
    (loss, dlogits)
}

#[allow(unused)]
fn unused_view_helper<T: Scalar>(v: ArrayView2<T>) -> usize {
    v.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, Array4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// <cols, im2col(x)> == <col2im(cols), x> for random inputs: exact
    /// adjointness of the gather/scatter pair.
    #[test]
    fn im2col_col2im_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, s, p, h, w) in [(3, 1, 1, 5, 7), (3, 2, 1, 9, 11), (2, 2, 0, 4, 6), (7, 2, 3, 12, 10)] {
            let n = 2;
            let c = 3;
            let gh = conv_out_size(h, k, s, p);
            let gw = conv_out_size(w, k, s, p);
            let x = Array4::from_shape_vec((n, c, h, w), crate::nn::randn::<f64>(&mut rng, n * c * h * w)).unwrap();
            let cols = Array::from_shape_vec(
                (n * gh * gw, c * k * k),
                crate::nn::randn::<f64>(&mut rng, n * gh * gw * c * k * k),
            )
            .unwrap();
            let ax = im2col(&x, k, s, p, gh, gw);
            let lhs: f64 = (&ax * &cols).sum();
            let aty = col2im(&cols, n, c, h, w, k, s, p, gh, gw);
            let rhs: f64 = (&aty * &x).sum();
            assert!((lhs - rhs).abs() < 1e-9, "adjoint mismatch {lhs} vs {rhs}");
        }
    }

    /// Central-difference check of every layer parameter and the input for
    /// a small conv -> groupnorm -> relu -> linear stack in f64.
    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 2;
        let (c, h, w) = (3, 6, 8);
        let x = Array4::from_shape_vec((n, c, h, w), crate::nn::randn::<f64>(&mut rng, n * c * h * w)).unwrap();
        // Random fixed projection to a scalar loss.
        let gh = conv_out_size(h, 3, 2, 1);
        let gw = conv_out_size(w, 3, 2, 1);
        let proj = Array::from_shape_vec((n, 4 * gh * gw), crate::nn::randn::<f64>(&mut rng, n * 4 * gh * gw)).unwrap();

        let run = |conv: &mut Conv2d<f64>, gn: &mut GroupNorm<f64>, x: &Array4<f64>, train: bool| -> (f64, Array4<f64>) {
            let mut relu = Relu::<f64>::new();
            let y = conv.forward(x, train);
            let y = gn.forward(&y, train);
            let y = relu.forward_d(&y, train);
            let (nn, cc, hh, ww) = y.dim();
            let flat = y.view().into_shape_with_order((nn, cc * hh * ww)).unwrap().to_owned();
            let loss = (&flat * &proj).sum();
            if !train {
                return (loss, Array4::zeros((1, 1, 1, 1)));
            }
            let dflat = proj.clone();
            let dy = dflat.into_shape_with_order((nn, cc, hh, ww)).unwrap();
            let dy = relu.backward_d(&dy);
            let dy = gn.backward(&dy);
            let dx = conv.backward(&dy);
            (loss, dx)
        };

        let mut conv = Conv2d::<f64>::new("c", &mut rng, c, 4, 3, 2, 1);
        let mut gn = GroupNorm::<f64>::new("g", 2, 4);
        let (_, dx) = run(&mut conv, &mut gn, &x, true);
        let analytic_grads = [
            conv.w.grad.clone(),
            conv.b.grad.clone(),
            gn.gamma.grad.clone(),
            gn.beta.grad.clone(),
        ];

        // Check a scattering of parameter gradients.
        let step = 1e-5;
        for &(pi, idx) in &[(0usize, 0usize), (0, 17), (0, 50), (1, 1), (2, 0), (2, 3), (3, 2)] {
            let analytic = analytic_grads[pi].as_slice().unwrap()[idx];
            let eval_at = |conv: &mut Conv2d<f64>, gn: &mut GroupNorm<f64>, delta: f64| -> f64 {
                {
                    let p = match pi {
                        0 => &mut conv.w,
                        1 => &mut conv.b,
                        2 => &mut gn.gamma,
                        _ => &mut gn.beta,
                    };
                    p.value.as_slice_mut().unwrap()[idx] += delta;
                }
                let v = run(conv, gn, &x, false).0;
                {
                    let p = match pi {
                        0 => &mut conv.w,
                        1 => &mut conv.b,
                        2 => &mut gn.gamma,
                        _ => &mut gn.beta,
                    };
                    p.value.as_slice_mut().unwrap()[idx] -= delta;
                }
                v
            };
            let fp = eval_at(&mut conv, &mut gn, step);
            let fm = eval_at(&mut conv, &mut gn, -step);
            let numeric = (fp - fm) / (2.0 * step);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom < 1e-6,
                "param {pi}[{idx}]: analytic {analytic} vs numeric {numeric}"
            );
        }

        // Check input gradient entries.
        for idx in [0usize, 7, 23, 99] {
            let analytic = dx.as_slice().unwrap()[idx];
            let mut xm = x.clone();
            let orig = xm.as_slice().unwrap()[idx];
            xm.as_slice_mut().unwrap()[idx] = orig + step;
            let fp = run(&mut conv, &mut gn, &xm, false).0;
            xm.as_slice_mut().unwrap()[idx] = orig - step;
            let fm = run(&mut conv, &mut gn, &xm, false).0;
            let numeric = (fp - fm) / (2.0 * step);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom < 1e-6,
                "input [{idx}]: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn deconv_shapes_follow_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d = ConvT2d::<f64>::new("d", &mut rng, 4, 3, 3, 2, 1, (1, 0));
        let x = Array4::from_shape_vec((1, 4, 3, 7), crate::nn::randn(&mut rng, 4 * 3 * 7)).unwrap();
        let y = d.forward(&x, false);
        assert_eq!(y.dim(), (1, 3, 6, 13));
        let mut d2 = ConvT2d::<f64>::new("d2", &mut rng, 4, 3, 2, 2, 0, (1, 1));
        let x2 = Array4::from_shape_vec((1, 4, 1, 3), crate::nn::randn(&mut rng, 4 * 3)).unwrap();
        let y2 = d2.forward(&x2, false);
        assert_eq!(y2.dim(), (1, 3, 3, 7));
    }

    #[test]
    fn deconv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = ConvT2d::<f64>::new("d", &mut rng, 2, 3, 3, 2, 1, (1, 0));
        let x = Array4::from_shape_vec((2, 2, 3, 4), crate::nn::randn(&mut rng, 2 * 2 * 3 * 4)).unwrap();
        let (oh, ow) = d.out_hw(3, 4);
        let proj = Array4::from_shape_vec((2, 3, oh, ow), crate::nn::randn(&mut rng, 2 * 3 * oh * ow)).unwrap();
        let y = d.forward(&x, true);
        let _loss: f64 = (&y * &proj).sum();
        let dx = d.backward(&proj);

        for idx in [0usize, 5, 11, 40] {
            let analytic = d.w.grad.as_slice().unwrap()[idx];
            let orig = d.w.value.as_slice().unwrap()[idx];
            let step = 1e-5;
            d.w.value.as_slice_mut().unwrap()[idx] = orig + step;
            let fp: f64 = (&d.forward(&x, false) * &proj).sum();
            d.w.value.as_slice_mut().unwrap()[idx] = orig - step;
            let fm: f64 = (&d.forward(&x, false) * &proj).sum();
            d.w.value.as_slice_mut().unwrap()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!((analytic - numeric).abs() / denom < 1e-6, "w[{idx}] {analytic} vs {numeric}");
        }
        for idx in [0usize, 9, 23] {
            let analytic = dx.as_slice().unwrap()[idx];
            let mut xm = x.clone();
            let orig = xm.as_slice().unwrap()[idx];
            let step = 1e-5;
            xm.as_slice_mut().unwrap()[idx] = orig + step;
            let fp: f64 = (&d.forward(&xm, false) * &proj).sum();
            xm.as_slice_mut().unwrap()[idx] = orig - step;
            let fm: f64 = (&d.forward(&xm, false) * &proj).sum();
            let numeric = (fp - fm) / (2.0 * step);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!((analytic - numeric).abs() / denom < 1e-6, "x[{idx}] {analytic} vs {numeric}");
        }
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut logits = Array4::from_shape_vec((1, 4, 2, 3), crate::nn::randn(&mut rng, 4 * 6)).unwrap();
        let labels: Vec<u8> = vec![0, 1, 2, 3, 1, 0];
        let (_, dl): (f64, _) = softmax_ce_2d(&logits, &labels);
        for idx in [0usize, 5, 13, 20] {
            let analytic = dl.as_slice().unwrap()[idx];
            let orig = logits.as_slice().unwrap()[idx];
            let step = 1e-5;
            logits.as_slice_mut().unwrap()[idx] = orig + step;
            let (fp, _): (f64, _) = softmax_ce_2d(&logits, &labels);
            logits.as_slice_mut().unwrap()[idx] = orig - step;
            let (fm, _): (f64, _) = softmax_ce_2d(&logits, &labels);
            logits.as_slice_mut().unwrap()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let denom: f64 = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!((analytic - numeric).abs() / denom < 1e-5, "logit[{idx}] {analytic} vs {numeric}");
        }
    }
}
