//! Fully-connected branches and the command-conditioned control heads.

use crate::nn::layers::{Linear, Relu, Sigmoid, Tanh};
use crate::nn::{ParamTensor, Scalar};
use crate::sim::Command;
use ndarray::{s, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;

/// Plain MLP with ReLU between layers and a linear output.
#[derive(Clone)]
pub struct Mlp<T: Scalar> {
    pub dims: Vec<usize>,
    layers: Vec<Linear<T>>,
    relus: Vec<Relu<T>>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{name}.l{i}"), rng, w[0], w[1]))
            .collect::<Vec<_>>();
        let relus = (0..layers.len() - 1).map(|_| Relu::new()).collect();
        Mlp { dims: dims.to_vec(), layers, relus }
    }

    pub fn forward(&mut self, x: &Array2<T>, train: bool) -> Array2<T> {
        let n = self.layers.len();
        let mut h = x.clone();
        for i in 0..n {
            h = self.layers[i].forward(&h, train);
            if i + 1 < n {
                h = self.relus[i].forward_d(&h, train);
            }
        }
        h
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        let n = self.layers.len();
        let mut d = dy.clone();
        for i in (0..n).rev() {
            if i + 1 < n {
                d = self.relus[i].backward_d(&d);
            }
            d = self.layers[i].backward(&d);
        }
        d
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Output squash: sigmoid on brake and gas, tanh on steer.
#[derive(Clone)]
struct ControlActivation<T: Scalar> {
    sig_b: Sigmoid<T>,
    sig_g: Sigmoid<T>,
    tanh_s: Tanh<T>,
}

impl<T: Scalar> ControlActivation<T> {
    fn new() -> Self {
        ControlActivation { sig_b: Sigmoid::new(), sig_g: Sigmoid::new(), tanh_s: Tanh::new() }
    }

    fn forward(&mut self, x: &Array2<T>, train: bool) -> Array2<T> {
        let b = self.sig_b.forward(&x.slice(s![.., 0..1]).to_owned(), train);
        let g = self.sig_g.forward(&x.slice(s![.., 1..2]).to_owned(), train);
        let st = self.tanh_s.forward(&x.slice(s![.., 2..3]).to_owned(), train);
        ndarray::concatenate(Axis(1), &[b.view(), g.view(), st.view()]).unwrap()
    }

    fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        let db = self.sig_b.backward(&dy.slice(s![.., 0..1]).to_owned());
        let dg = self.sig_g.backward(&dy.slice(s![.., 1..2]).to_owned());
        let ds = self.tanh_s.backward(&dy.slice(s![.., 2..3]).to_owned());
        ndarray::concatenate(Axis(1), &[db.view(), dg.view(), ds.view()]).unwrap()
    }
}

/// Four command-specific control branches over a shared joint embedding.
/// Branch order is fixed: [follow, left, right, straight].
#[derive(Clone)]
pub struct ControlHeads<T: Scalar> {
    heads: Vec<Mlp<T>>,
    acts: Vec<ControlActivation<T>>,
    route_cache: Option<Vec<usize>>,
    all_cache: bool,
}

impl<T: Scalar> ControlHeads<T> {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, in_dim: usize) -> Self {
        let heads = Command::ALL
            .iter()
            .map(|c| Mlp::new(&format!("{name}.{c}"), rng, &[in_dim, 256, 256, 3]))
            .collect();
        let acts = (0..4).map(|_| ControlActivation::new()).collect();
        ControlHeads { heads, acts, route_cache: None, all_cache: false }
    }

    /// Command-selected forward: row i goes through head `commands[i]`.
    pub fn forward(&mut self, joint: &Array2<T>, commands: &[Command], train: bool) -> Array2<T> {
        assert_eq!(joint.nrows(), commands.len());
        let mut out = Array2::<T>::zeros((joint.nrows(), 3));
        for (ci, _) in Command::ALL.iter().enumerate() {
            let rows: Vec<usize> = commands
                .iter()
                .enumerate()
                .filter(|(_, c)| c.index() == ci)
                .map(|(i, _)| i)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let sub = gather_rows(joint, &rows);
            let raw = self.heads[ci].forward(&sub, train);
            let act = self.acts[ci].forward(&raw, train);
            for (k, &r) in rows.iter().enumerate() {
                out.row_mut(r).assign(&act.row(k));
            }
        }
        if train {
            self.route_cache = Some(commands.iter().map(|c| c.index()).collect());
            self.all_cache = false;
        }
        out
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        assert!(!self.all_cache, "mixed backward modes");
        let route = self.route_cache.take().expect("heads cache");
        let mut dj = Array2::<T>::zeros((dy.nrows(), self.heads[0].dims[0]));
        for ci in 0..4 {
            let rows: Vec<usize> = route
                .iter()
                .enumerate()
                .filter(|(_, &c)| c == ci)
                .map(|(i, _)| i)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let dsub = gather_rows(dy, &rows);
            let draw = self.acts[ci].backward(&dsub);
            let din = self.heads[ci].backward(&draw);
            for (k, &r) in rows.iter().enumerate() {
                let mut dst = dj.row_mut(r);
                dst += &din.row(k);
            }
        }
        dj
    }

    /// Whitebox forward: every head on every row; output (N, 4, 3).
    pub fn forward_all(&mut self, joint: &Array2<T>, train: bool) -> Array3<T> {
        let n = joint.nrows();
        let mut out = Array3::<T>::zeros((n, 4, 3));
        for ci in 0..4 {
            let raw = self.heads[ci].forward(joint, train);
            let act = self.acts[ci].forward(&raw, train);
            out.slice_mut(s![.., ci, ..]).assign(&act);
        }
        if train {
            self.all_cache = true;
            self.route_cache = None;
        }
        out
    }

    pub fn backward_all(&mut self, dy: &Array3<T>) -> Array2<T> {
        assert!(self.all_cache, "mixed backward modes");
        self.all_cache = false;
        let n = dy.dim().0;
        let mut dj = Array2::<T>::zeros((n, self.heads[0].dims[0]));
        for ci in 0..4 {
            let dsub = dy.slice(s![.., ci, ..]).to_owned();
            let draw = self.acts[ci].backward(&dsub);
            dj = dj + self.heads[ci].backward(&draw);
        }
        dj
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        self.heads.iter_mut().flat_map(|h| h.params_mut()).collect()
    }

    /// Parameters of one head only, for branch-isolation checks.
    pub fn head_params_mut(&mut self, ci: usize) -> Vec<&mut ParamTensor<T>> {
        self.heads[ci].params_mut()
    }
}

fn gather_rows<T: Scalar>(m: &Array2<T>, rows: &[usize]) -> Array2<T> {
    let mut out = Array2::<T>::zeros((rows.len(), m.ncols()));
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(k).assign(&m.row(r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn heads_route_by_command() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut heads = ControlHeads::<f64>::new("h", &mut rng, 16);
        let joint = Array2::from_elem((4, 16), 0.37);
        let cmds = [Command::Follow, Command::Left, Command::Right, Command::Straight];
        let out = heads.forward(&joint, &cmds, false);
        // Same trunk input, different heads: rows generally differ.
        assert_ne!(out.row(0), out.row(1));
        // Outputs squashed into the documented ranges.
        for r in out.rows() {
            assert!(r[0] > 0.0 && r[0] < 1.0);
            assert!(r[1] > 0.0 && r[1] < 1.0);
            assert!(r[2] > -1.0 && r[2] < 1.0);
        }
    }

    #[test]
    fn non_selected_heads_receive_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut heads = ControlHeads::<f64>::new("h", &mut rng, 8);
        let joint = Array2::from_elem((1, 8), 0.5);
        let out = heads.forward(&joint, &[Command::Left], true);
        let dy = Array2::from_elem(out.dim(), 1.0);
        let _ = heads.backward(&dy);
        for ci in 0..4 {
            let total: f64 = heads
                .head_params_mut(ci)
                .iter()
                .map(|p| p.grad.iter().map(|v| v.abs()).sum::<f64>())
                .sum();
            if ci == Command::Left.index() {
                assert!(total > 0.0, "selected head must receive gradient");
            } else {
                assert_eq!(total, 0.0, "non-selected head {ci} must stay untouched");
            }
        }
    }

    #[test]
    fn whitebox_forward_reaches_all_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut heads = ControlHeads::<f64>::new("h", &mut rng, 8);
        let joint = Array2::from_elem((2, 8), 0.1);
        let out = heads.forward_all(&joint, true);
        assert_eq!(out.dim(), (2, 4, 3));
        let dy = Array3::from_elem((2, 4, 3), 0.3);
        let _ = heads.backward_all(&dy);
        for ci in 0..4 {
            let total: f64 = heads
                .head_params_mut(ci)
                .iter()
                .map(|p| p.grad.iter().map(|v| v.abs()).sum::<f64>())
                .sum();
            assert!(total > 0.0, "whitebox training reaches head {ci}");
        }
    }
}
