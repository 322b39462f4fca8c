//! Dense, layer-norm and GRU layers with hand-written backward passes.
//!
//! Forward passes operate on whole sequences `[frames x dim]` and return a
//! cache consumed once by the matching backward pass. Weight gradients
//! accumulate into the shared [`ParamStore`].

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::store::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

pub struct DenseCache {
    x: Array2<f64>,
}

impl Dense {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.alloc_uniform(&format!("{name}.w"), out_dim, in_dim, in_dim, rng);
        let b = store.alloc_uniform(&format!("{name}.b"), 1, out_dim, in_dim, rng);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, DenseCache) {
        assert_eq!(x.ncols(), self.in_dim, "dense input dim mismatch");
        let y = x.dot(&store.view(self.w).t()) + store.view(self.b);
        (y, DenseCache { x: x.clone() })
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &DenseCache, gy: &Array2<f64>) -> Array2<f64> {
        let gw = gy.t().dot(&cache.x);
        let gb = gy.sum_axis(Axis(0));
        {
            let mut gwv = store.grad_view_mut(self.w);
            gwv += &gw;
        }
        {
            let mut gbv = store.grad_view_mut(self.b);
            let mut row = gbv.row_mut(0);
            row += &gb;
        }
        gy.dot(&store.view(self.w))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.alloc(&format!("{name}.gain"), 1, dim, || 1.0);
        let bias = store.alloc_zeros(&format!("{name}.bias"), 1, dim);
        Self { gain, bias, dim }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        assert_eq!(x.ncols(), self.dim, "layernorm dim mismatch");
        let frames = x.nrows();
        let d = self.dim as f64;
        let mut xhat = Array2::zeros(x.raw_dim());
        let mut inv_std = Array1::zeros(frames);
        for t in 0..frames {
            let row = x.row(t);
            let mean = row.sum() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            inv_std[t] = istd;
            for (o, &v) in xhat.row_mut(t).iter_mut().zip(row.iter()) {
                *o = (v - mean) * istd;
            }
        }
        let y = &xhat * &store.view(self.gain).row(0) + store.view(self.bias).row(0);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &LayerNormCache, gy: &Array2<f64>) -> Array2<f64> {
        let d = self.dim as f64;
        let gg = (gy * &cache.xhat).sum_axis(Axis(0));
        let gb = gy.sum_axis(Axis(0));
        let gain = store.view(self.gain).row(0).to_owned();
        let mut gx = Array2::zeros(gy.raw_dim());
        for t in 0..gy.nrows() {
            let dxhat: Vec<f64> = gy.row(t).iter().zip(gain.iter()).map(|(&g, &w)| g * w).collect();
            let mean_dxhat = dxhat.iter().sum::<f64>() / d;
            let mean_dxhat_xhat =
                dxhat.iter().zip(cache.xhat.row(t).iter()).map(|(&a, &b)| a * b).sum::<f64>() / d;
            let istd = cache.inv_std[t];
            for (i, o) in gx.row_mut(t).iter_mut().enumerate() {
                *o = istd * (dxhat[i] - mean_dxhat - cache.xhat[[t, i]] * mean_dxhat_xhat);
            }
        }
        {
            let mut v = store.grad_view_mut(self.gain);
            let mut row = v.row_mut(0);
            row += &gg;
        }
        {
            let mut v = store.grad_view_mut(self.bias);
            let mut row = v.row_mut(0);
            row += &gb;
        }
        gx
    }
}

/// Uni-directional GRU, reset-before-candidate, ReLU candidate activation:
///
/// ```text
/// z_t = sigmoid(Wz x_t + Uz h_{t-1} + bz)
/// r_t = sigmoid(Wr x_t + Ur h_{t-1} + br)
/// n_t = relu(Wn x_t + r_t .* (Un h_{t-1}) + bn)
/// h_t = (1 - z_t) .* n_t + z_t .* h_{t-1}
/// ```
///
/// Hidden state starts at zero and is carried strictly left-to-right within
/// one utterance; callers reset between utterances by calling `forward`
/// per utterance.
#[derive(Debug, Clone)]
pub struct Gru {
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wn: ParamId,
    pub un: ParamId,
    pub bn: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

pub struct GruCache {
    x: Array2<f64>,
    /// `h[t]` is the state entering step t; length T+1.
    h: Array2<f64>,
    z: Array2<f64>,
    r: Array2<f64>,
    n: Array2<f64>,
    unh: Array2<f64>,
}

impl Gru {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, hidden: usize) -> Self {
        let w = |gate: &str, rows: usize, cols: usize, fan: usize, store: &mut ParamStore, rng: &mut R| {
            store.alloc_uniform(&format!("{name}.{gate}"), rows, cols, fan, rng)
        };
        let wz = w("wz", hidden, in_dim, in_dim, store, rng);
        let uz = w("uz", hidden, hidden, hidden, store, rng);
        let bz = w("bz", 1, hidden, hidden, store, rng);
        let wr = w("wr", hidden, in_dim, in_dim, store, rng);
        let ur = w("ur", hidden, hidden, hidden, store, rng);
        let br = w("br", 1, hidden, hidden, store, rng);
        let wn = w("wn", hidden, in_dim, in_dim, store, rng);
        let un = w("un", hidden, hidden, hidden, store, rng);
        let bn = w("bn", 1, hidden, hidden, store, rng);
        Self { wz, uz, bz, wr, ur, br, wn, un, bn, in_dim, hidden }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, GruCache) {
        assert_eq!(x.ncols(), self.in_dim, "gru input dim mismatch");
        let t_len = x.nrows();
        let h_dim = self.hidden;
        // Input projections for all frames at once.
        let xz = x.dot(&store.view(self.wz).t()) + store.view(self.bz).row(0);
        let xr = x.dot(&store.view(self.wr).t()) + store.view(self.br).row(0);
        let xn = x.dot(&store.view(self.wn).t()) + store.view(self.bn).row(0);

        let uz = store.view(self.uz);
        let ur = store.view(self.ur);
        let un = store.view(self.un);

        let mut h = Array2::zeros((t_len + 1, h_dim));
        let mut z = Array2::zeros((t_len, h_dim));
        let mut r = Array2::zeros((t_len, h_dim));
        let mut n = Array2::zeros((t_len, h_dim));
        let mut unh = Array2::zeros((t_len, h_dim));
        let mut out = Array2::zeros((t_len, h_dim));

        for t in 0..t_len {
            let h_prev = h.row(t).to_owned();
            let zh = uz.dot(&h_prev);
            let rh = ur.dot(&h_prev);
            let nh = un.dot(&h_prev);
            for i in 0..h_dim {
                let zi = 1.0 / (1.0 + (-(xz[[t, i]] + zh[i])).exp());
                let ri = 1.0 / (1.0 + (-(xr[[t, i]] + rh[i])).exp());
                let ni = (xn[[t, i]] + ri * nh[i]).max(0.0);
                let hi = (1.0 - zi) * ni + zi * h_prev[i];
                z[[t, i]] = zi;
                r[[t, i]] = ri;
                n[[t, i]] = ni;
                unh[[t, i]] = nh[i];
                h[[t + 1, i]] = hi;
                out[[t, i]] = hi;
            }
        }
        (out, GruCache { x: x.clone(), h, z, r, n, unh })
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &GruCache, gy: &Array2<f64>) -> Array2<f64> {
        let t_len = gy.nrows();
        let h_dim = self.hidden;
        let uz = store.view(self.uz).to_owned();
        let ur = store.view(self.ur).to_owned();
        let un = store.view(self.un).to_owned();

        // Per-frame pre-activation grads, collected for batched weight grads.
        let mut dz_pre = Array2::zeros((t_len, h_dim));
        let mut dr_pre = Array2::zeros((t_len, h_dim));
        let mut dn_pre = Array2::zeros((t_len, h_dim));

        let mut dh_next = Array1::zeros(h_dim);
        for t in (0..t_len).rev() {
            let mut dh = gy.row(t).to_owned();
            dh += &dh_next;
            let h_prev = cache.h.row(t);
            let mut dhp = Array1::zeros(h_dim);
            let mut dnp_t = Array1::zeros(h_dim);
            for i in 0..h_dim {
                let zi = cache.z[[t, i]];
                let ri = cache.r[[t, i]];
                let ni = cache.n[[t, i]];
                let dz = dh[i] * (h_prev[i] - ni);
                let dn = dh[i] * (1.0 - zi);
                dhp[i] += dh[i] * zi;
                let dnp = if ni > 0.0 { dn } else { 0.0 };
                dnp_t[i] = dnp;
                let dr = dnp * cache.unh[[t, i]];
                dz_pre[[t, i]] = dz * zi * (1.0 - zi);
                dr_pre[[t, i]] = dr * ri * (1.0 - ri);
                dn_pre[[t, i]] = dnp;
            }
            // d(Un h_prev) = dn_pre .* r
            let dunh: Array1<f64> =
                (0..h_dim).map(|i| dnp_t[i] * cache.r[[t, i]]).collect();
            dhp += &uz.t().dot(&dz_pre.row(t));
            dhp += &ur.t().dot(&dr_pre.row(t));
            dhp += &un.t().dot(&dunh);
            // Un weight grad needs dunh outer h_prev; accumulate via a
            // temporary row so it can be batched below.
            for i in 0..h_dim {
                dn_pre[[t, i]] = dnp_t[i]; // kept for Wn/bn/x grads
            }
            {
                let mut gun = store.grad_view_mut(self.un);
                for i in 0..h_dim {
                    if dunh[i] != 0.0 {
                        for j in 0..h_dim {
                            gun[[i, j]] += dunh[i] * h_prev[j];
                        }
                    }
                }
            }
            dh_next = dhp;
        }

        let h_prev_rows = cache.h.slice(ndarray::s![..t_len, ..]);
        {
            let mut g = store.grad_view_mut(self.wz);
            g += &dz_pre.t().dot(&cache.x);
        }
        {
            let mut g = store.grad_view_mut(self.uz);
            g += &dz_pre.t().dot(&h_prev_rows);
        }
        {
            let mut g = store.grad_view_mut(self.bz);
            let mut row = g.row_mut(0);
            row += &dz_pre.sum_axis(Axis(0));
        }
        {
            let mut g = store.grad_view_mut(self.wr);
            g += &dr_pre.t().dot(&cache.x);
        }
        {
            let mut g = store.grad_view_mut(self.ur);
            g += &dr_pre.t().dot(&h_prev_rows);
        }
        {
            let mut g = store.grad_view_mut(self.br);
            let mut row = g.row_mut(0);
            row += &dr_pre.sum_axis(Axis(0));
        }
        {
            let mut g = store.grad_view_mut(self.wn);
            g += &dn_pre.t().dot(&cache.x);
        }
        {
            let mut g = store.grad_view_mut(self.bn);
            let mut row = g.row_mut(0);
            row += &dn_pre.sum_axis(Axis(0));
        }

        let wz = store.view(self.wz);
        let wr = store.view(self.wr);
        let wn = store.view(self.wn);
        let mut gx = dz_pre.dot(&wz);
        gx += &dr_pre.dot(&wr);
        gx += &dn_pre.dot(&wn);
        gx
    }
}
