//! Individual layers: 1×1 band-mixing convolution, batch normalization
//! (with optionally fused ReLU), 3-D convolution, 3-D max pooling, and a
//! fully connected layer. Each layer caches what its backward pass needs
//! and accumulates parameter gradients in place.

use ndarray::{Array1, Array2, Array3, Array5, ArrayView1, Axis};
use rand_chacha::ChaCha8Rng;

use super::{he_normal, BufferVisitor, ParamVisitor};
use crate::Real;

/// 1×1 2-D convolution across the band axis: [n, B, P, P] → [n, R, P, P].
/// Equivalent to a per-pixel linear map over the spectral dimension.
pub struct BandConv<T: Real> {
    pub weight: Array2<T>, // [R, B]
    pub bias: Array1<T>,   // [R]
    pub dweight: Array2<T>,
    pub dbias: Array1<T>,
    cache: Option<ndarray::Array4<T>>,
}

impl<T: Real> BandConv<T> {
    pub fn new(in_bands: usize, out_bands: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight =
            Array2::from_shape_vec((out_bands, in_bands), he_normal(out_bands * in_bands, in_bands, rng))
                .expect("shape matches length");
        BandConv {
            weight,
            bias: Array1::zeros(out_bands),
            dweight: Array2::zeros((out_bands, in_bands)),
            dbias: Array1::zeros(out_bands),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: ndarray::Array4<T>, train: bool) -> ndarray::Array4<T> {
        let (n, b, p, q) = x.dim();
        let r = self.weight.nrows();
        let x_flat = x.view().into_shape((n, b, p * q)).expect("contiguous input");
        let mut y = ndarray::Array4::<T>::zeros((n, r, p, q));
        {
            let mut y_flat = y.view_mut().into_shape((n, r, p * q)).expect("fresh array");
            for i in 0..n {
                let yi = self.weight.dot(&x_flat.index_axis(Axis(0), i));
                y_flat.index_axis_mut(Axis(0), i).assign(&yi);
            }
        }
        for (c, &bias) in self.bias.iter().enumerate() {
            y.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + bias);
        }
        if train {
            self.cache = Some(x);
        }
        y
    }

    pub fn backward(&mut self, dy: ndarray::Array4<T>) -> ndarray::Array4<T> {
        let x = self.cache.take().expect("backward without forward");
        let (n, b, p, q) = x.dim();
        let r = self.weight.nrows();
        let x_flat = x.view().into_shape((n, b, p * q)).expect("contiguous");
        let dy_flat = dy.view().into_shape((n, r, p * q)).expect("contiguous");
        let mut dx = ndarray::Array4::<T>::zeros((n, b, p, q));
        {
            let mut dx_flat = dx.view_mut().into_shape((n, b, p * q)).expect("fresh array");
            let wt = self.weight.t();
            for i in 0..n {
                let dyi = dy_flat.index_axis(Axis(0), i);
                let xi = x_flat.index_axis(Axis(0), i);
                self.dweight = &self.dweight + &dyi.dot(&xi.t());
                dx_flat.index_axis_mut(Axis(0), i).assign(&wt.dot(&dyi));
            }
        }
        for (c, db) in self.dbias.iter_mut().enumerate() {
            *db = *db + dy.index_axis(Axis(1), c).sum();
        }
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamVisitor<T>) {
        f(
            &format!("{prefix}.weight"),
            self.weight.as_slice_mut().expect("standard layout"),
            self.dweight.as_slice_mut().expect("standard layout"),
        );
        f(
            &format!("{prefix}.bias"),
            self.bias.as_slice_mut().expect("standard layout"),
            self.dbias.as_slice_mut().expect("standard layout"),
        );
    }
}

struct BnCache<T: Real> {
    x_hat: Array3<T>,
    std_inv: Array1<T>,
}

/// Batch normalization over the channel axis of an [n, C, S] tensor, with
/// an optionally fused ReLU. Callers flatten spatial dimensions into S.
/// Conventions: eps 1e-5, momentum 0.1, unbiased running variance, batch
/// statistics during training and running statistics at eval.
pub struct BatchNorm<T: Real> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub dgamma: Array1<T>,
    pub dbeta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub relu: bool,
    eps: f64,
    momentum: f64,
    cache: Option<BnCache<T>>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize, relu: bool) -> Self {
        BatchNorm {
            gamma: Array1::from_elem(channels, T::one()),
            beta: Array1::zeros(channels),
            dgamma: Array1::zeros(channels),
            dbeta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, T::one()),
            relu,
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    /// Forward on [n, C, S]; statistics are accumulated in f64 regardless
    /// of T so both precisions normalize identically.
    pub fn forward(&mut self, x: Array3<T>, train: bool) -> Array3<T> {
        let (n, c, s) = x.dim();
        let m = (n * s) as f64;
        let mut y = x;
        if train {
            let mut x_hat = Array3::<T>::zeros((n, c, s));
            let mut std_inv = Array1::<T>::zeros(c);
            for ch in 0..c {
                let lane = y.index_axis(Axis(1), ch);
                let mut sum = 0.0f64;
                let mut sq = 0.0f64;
                for &v in lane.iter() {
                    let v = v.to_f64();
                    sum += v;
                    sq += v * v;
                }
                let mean = sum / m;
                let var = (sq / m - mean * mean).max(0.0);
                let inv = 1.0 / (var + self.eps).sqrt();
                std_inv[ch] = T::from_f64(inv);

                let unbiased = if m > 1.5 { var * m / (m - 1.0) } else { var };
                self.running_mean[ch] = T::from_f64(
                    (1.0 - self.momentum) * self.running_mean[ch].to_f64() + self.momentum * mean,
                );
                self.running_var[ch] = T::from_f64(
                    (1.0 - self.momentum) * self.running_var[ch].to_f64()
                        + self.momentum * unbiased,
                );

                let (mean_t, inv_t) = (T::from_f64(mean), T::from_f64(inv));
                let gamma = self.gamma[ch];
                let beta = self.beta[ch];
                let mut xh_lane = x_hat.index_axis_mut(Axis(1), ch);
                let mut y_lane = y.index_axis_mut(Axis(1), ch);
                ndarray::Zip::from(&mut xh_lane).and(&mut y_lane).for_each(|xh, v| {
                    let h = (*v - mean_t) * inv_t;
                    *xh = h;
                    let mut out = gamma * h + beta;
                    if self.relu && out < T::zero() {
                        out = T::zero();
                    }
                    *v = out;
                });
            }
            self.cache = Some(BnCache { x_hat, std_inv });
        } else {
            for ch in 0..c {
                let mean = self.running_mean[ch];
                let inv = T::one() / (self.running_var[ch] + T::from_f64(self.eps)).sqrt();
                let gamma = self.gamma[ch];
                let beta = self.beta[ch];
                let relu = self.relu;
                y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| {
                    let mut out = gamma * (v - mean) * inv + beta;
                    if relu && out < T::zero() {
                        out = T::zero();
                    }
                    out
                });
            }
        }
        y
    }

    /// Backward for the training-mode forward.
    pub fn backward(&mut self, mut dy: Array3<T>) -> Array3<T> {
        let BnCache { x_hat, std_inv } = self.cache.take().expect("backward without forward");
        let (n, c, s) = dy.dim();
        let m = T::from_f64((n * s) as f64);
        let mut dx = Array3::<T>::zeros((n, c, s));
        for ch in 0..c {
            let gamma = self.gamma[ch];
            let beta = self.beta[ch];
            let xh = x_hat.index_axis(Axis(1), ch);
            if self.relu {
                let mut dy_lane = dy.index_axis_mut(Axis(1), ch);
                ndarray::Zip::from(&mut dy_lane).and(&xh).for_each(|g, &h| {
                    if gamma * h + beta <= T::zero() {
                        *g = T::zero();
                    }
                });
            }
            let dy_lane = dy.index_axis(Axis(1), ch);
            let mut sum_dy = T::zero();
            let mut sum_dy_xh = T::zero();
            ndarray::Zip::from(&dy_lane).and(&xh).for_each(|&g, &h| {
                sum_dy = sum_dy + g;
                sum_dy_xh = sum_dy_xh + g * h;
            });
            self.dbeta[ch] = self.dbeta[ch] + sum_dy;
            self.dgamma[ch] = self.dgamma[ch] + sum_dy_xh;

            let scale = gamma * std_inv[ch] / m;
            let mut dx_lane = dx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut dx_lane)
                .and(&dy_lane)
                .and(&xh)
                .for_each(|d, &g, &h| {
                    *d = scale * (m * g - sum_dy - h * sum_dy_xh);
                });
        }
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamVisitor<T>) {
        f(
            &format!("{prefix}.gamma"),
            self.gamma.as_slice_mut().expect("standard layout"),
            self.dgamma.as_slice_mut().expect("standard layout"),
        );
        f(
            &format!("{prefix}.beta"),
            self.beta.as_slice_mut().expect("standard layout"),
            self.dbeta.as_slice_mut().expect("standard layout"),
        );
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: BufferVisitor<T>) {
        f(
            &format!("{prefix}.running_mean"),
            self.running_mean.as_slice_mut().expect("standard layout"),
        );
        f(
            &format!("{prefix}.running_var"),
            self.running_var.as_slice_mut().expect("standard layout"),
        );
    }
}

/// 3-D convolution with stride 1 and symmetric zero padding (`pad` per
/// side), lowered to per-sample im2col + GEMM. Kernel is cubic (`k`³).
pub struct Conv3d<T: Real> {
    pub weight: Array5<T>, // [Cout, Cin, k, k, k]
    pub bias: Option<Array1<T>>,
    pub dweight: Array5<T>,
    pub dbias: Option<Array1<T>>,
    k: usize,
    pad: usize,
    cache: Option<Array5<T>>,
}

impl<T: Real> Conv3d<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * k * k * k;
        let weight = Array5::from_shape_vec(
            (cout, cin, k, k, k),
            he_normal(cout * fan_in, fan_in, rng),
        )
        .expect("shape matches length");
        Conv3d {
            weight,
            bias: bias.then(|| Array1::zeros(cout)),
            dweight: Array5::zeros((cout, cin, k, k, k)),
            dbias: bias.then(|| Array1::zeros(cout)),
            k,
            pad,
            cache: None,
        }
    }

    pub fn out_dims(&self, d: usize, h: usize, w: usize) -> (usize, usize, usize) {
        let shrink = self.k - 1 - 2 * self.pad;
        (d - shrink, h - shrink, w - shrink)
    }

    /// Gather the im2col matrix [Cin·k³, Do·Ho·Wo] for one sample.
    /// Stride is 1, so each (row, output-row) pair maps to a contiguous run
    /// of the input row which is copied wholesale; padding stays zero.
    fn gather_cols(&self, x: &ndarray::ArrayView4<T>, cols: &mut Array2<T>) {
        let (cin, d, h, w) = x.dim();
        let (od, oh, ow) = self.out_dims(d, h, w);
        let k = self.k;
        let pad = self.pad as isize;
        let x_slice = x.as_slice().expect("standard layout");
        let cols_slice = cols.as_slice_mut().expect("standard layout");
        cols_slice.iter_mut().for_each(|v| *v = T::zero());
        let l = od * oh * ow;
        for ci in 0..cin {
            for zd in 0..k {
                for zh in 0..k {
                    for zw in 0..k {
                        let row = ((ci * k + zd) * k + zh) * k + zw;
                        let row_base = row * l;
                        for o_d in 0..od {
                            let id = o_d as isize + zd as isize - pad;
                            if id < 0 || id >= d as isize {
                                continue;
                            }
                            for o_h in 0..oh {
                                let ih = o_h as isize + zh as isize - pad;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                // iw = o_w + zw - pad for o_w in 0..ow —
                                // clip to [0, w) and copy the run.
                                let shift = zw as isize - pad;
                                let ow_lo = (-shift).max(0) as usize;
                                let ow_hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                                if ow_lo >= ow_hi {
                                    continue;
                                }
                                let src_base =
                                    ((ci * d + id as usize) * h + ih as usize) * w;
                                let iw_lo = (ow_lo as isize + shift) as usize;
                                let dst_base = row_base + (o_d * oh + o_h) * ow;
                                cols_slice[dst_base + ow_lo..dst_base + ow_hi]
                                    .copy_from_slice(
                                        &x_slice[src_base + iw_lo
                                            ..src_base + iw_lo + (ow_hi - ow_lo)],
                                    );
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add of the column gradient back into the input gradient.
    fn scatter_cols(&self, dcols: &Array2<T>, dx: &mut ndarray::ArrayViewMut4<T>) {
        let (cin, d, h, w) = dx.dim();
        let (od, oh, ow) = self.out_dims(d, h, w);
        let k = self.k;
        let pad = self.pad as isize;
        let dx_slice = dx.as_slice_mut().expect("standard layout");
        let dcols_slice = dcols.as_slice().expect("standard layout");
        let l = od * oh * ow;
        for ci in 0..cin {
            for zd in 0..k {
                for zh in 0..k {
                    for zw in 0..k {
                        let row = ((ci * k + zd) * k + zh) * k + zw;
                        let row_base = row * l;
                        for o_d in 0..od {
                            let id = o_d as isize + zd as isize - pad;
                            if id < 0 || id >= d as isize {
                                continue;
                            }
                            for o_h in 0..oh {
                                let ih = o_h as isize + zh as isize - pad;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let shift = zw as isize - pad;
                                let ow_lo = (-shift).max(0) as usize;
                                let ow_hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                                if ow_lo >= ow_hi {
                                    continue;
                                }
                                let src_base =
                                    ((ci * d + id as usize) * h + ih as usize) * w;
                                let iw_lo = (ow_lo as isize + shift) as usize;
                                let dst_base = row_base + (o_d * oh + o_h) * ow;
                                for (off, col_idx) in (ow_lo..ow_hi).enumerate() {
                                    dx_slice[src_base + iw_lo + off] = dx_slice
                                        [src_base + iw_lo + off]
                                        + dcols_slice[dst_base + col_idx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: Array5<T>, train: bool) -> Array5<T> {
        let (n, cin, d, h, w) = x.dim();
        let (od, oh, ow) = self.out_dims(d, h, w);
        let cout = self.weight.dim().0;
        let kk = cin * self.k * self.k * self.k;
        let l = od * oh * ow;
        let w_mat = self
            .weight
            .view()
            .into_shape((cout, kk))
            .expect("contiguous weights");
        let mut y = Array5::<T>::zeros((n, cout, od, oh, ow));
        let mut cols = Array2::<T>::zeros((kk, l));
        for i in 0..n {
            self.gather_cols(&x.index_axis(Axis(0), i), &mut cols);
            let yi = w_mat.dot(&cols); // [Cout, L]
            y.index_axis_mut(Axis(0), i)
                .into_shape((cout, l))
                .expect("contiguous output")
                .assign(&yi);
        }
        if let Some(bias) = &self.bias {
            for (c, &b) in bias.iter().enumerate() {
                y.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + b);
            }
        }
        if train {
            self.cache = Some(x);
        }
        y
    }

    pub fn backward(&mut self, dy: Array5<T>) -> Array5<T> {
        let x = self.cache.take().expect("backward without forward");
        let (n, cin, d, h, w) = x.dim();
        let (od, oh, ow) = self.out_dims(d, h, w);
        let cout = self.weight.dim().0;
        let kk = cin * self.k * self.k * self.k;
        let l = od * oh * ow;
        let w_mat = self
            .weight
            .view()
            .into_shape((cout, kk))
            .expect("contiguous weights");
        let mut dx = Array5::<T>::zeros((n, cin, d, h, w));
        let mut cols = Array2::<T>::zeros((kk, l));
        let mut dw_acc = Array2::<T>::zeros((cout, kk));
        for i in 0..n {
            let dyi = dy
                .index_axis(Axis(0), i)
                .into_shape((cout, l))
                .expect("contiguous");
            self.gather_cols(&x.index_axis(Axis(0), i), &mut cols);
            dw_acc = dw_acc + dyi.dot(&cols.t());
            let dcols = w_mat.t().dot(&dyi); // [K, L]
            self.scatter_cols(&dcols, &mut dx.index_axis_mut(Axis(0), i));
        }
        self.dweight = &self.dweight
            + &dw_acc
                .into_shape((cout, cin, self.k, self.k, self.k))
                .expect("contiguous");
        if let Some(dbias) = &mut self.dbias {
            for c in 0..cout {
                dbias[c] = dbias[c] + dy.index_axis(Axis(1), c).sum();
            }
        }
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamVisitor<T>) {
        f(
            &format!("{prefix}.weight"),
            self.weight.as_slice_mut().expect("standard layout"),
            self.dweight.as_slice_mut().expect("standard layout"),
        );
        if let (Some(bias), Some(dbias)) = (&mut self.bias, &mut self.dbias) {
            f(
                &format!("{prefix}.bias"),
                bias.as_slice_mut().expect("standard layout"),
                dbias.as_slice_mut().expect("standard layout"),
            );
        }
    }
}

/// 3-D max pooling with stride equal to the kernel and ceil-mode output:
/// trailing windows are clipped at the tensor edge rather than padded.
pub struct MaxPool3d<T: Real> {
    kernel: (usize, usize, usize),
    cache: Option<(Vec<u32>, (usize, usize, usize, usize, usize))>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> MaxPool3d<T> {
    pub fn new(kernel: (usize, usize, usize)) -> Self {
        MaxPool3d {
            kernel,
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn out_dims(&self, d: usize, h: usize, w: usize) -> (usize, usize, usize) {
        (
            super::ceil_div(d, self.kernel.0),
            super::ceil_div(h, self.kernel.1),
            super::ceil_div(w, self.kernel.2),
        )
    }

    pub fn forward(&mut self, x: Array5<T>, train: bool) -> Array5<T> {
        let (n, c, d, h, w) = x.dim();
        let (od, oh, ow) = self.out_dims(d, h, w);
        let (kd, kh, kw) = self.kernel;
        let mut y = Array5::<T>::zeros((n, c, od, oh, ow));
        let mut argmax = vec![0u32; n * c * od * oh * ow];
        let x_slice = x.as_slice().expect("standard layout");
        let y_slice = y.as_slice_mut().expect("fresh array");
        let mut out_idx = 0usize;
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * d * h * w;
                for o_d in 0..od {
                    let d_lo = o_d * kd;
                    let d_hi = (d_lo + kd).min(d);
                    for o_h in 0..oh {
                        let h_lo = o_h * kh;
                        let h_hi = (h_lo + kh).min(h);
                        for o_w in 0..ow {
                            let w_lo = o_w * kw;
                            let w_hi = (w_lo + kw).min(w);
                            let mut best = T::neg_infinity();
                            let mut best_idx = 0usize;
                            for id in d_lo..d_hi {
                                for ih in h_lo..h_hi {
                                    let row = (id * h + ih) * w;
                                    for iw in w_lo..w_hi {
                                        let v = x_slice[base + row + iw];
                                        if v > best {
                                            best = v;
                                            best_idx = row + iw;
                                        }
                                    }
                                }
                            }
                            y_slice[out_idx] = best;
                            argmax[out_idx] = best_idx as u32;
                            out_idx += 1;
                        }
                    }
                }
            }
        }
        if train {
            self.cache = Some((argmax, (n, c, d, h, w)));
        }
        y
    }

    pub fn backward(&mut self, dy: Array5<T>) -> Array5<T> {
        let (argmax, (n, c, d, h, w)) = self.cache.take().expect("backward without forward");
        let mut dx = Array5::<T>::zeros((n, c, d, h, w));
        let dx_slice = dx.as_slice_mut().expect("fresh array");
        let dy_slice = dy.as_slice().expect("standard layout");
        let per_image = d * h * w;
        let (od, oh, ow) = self.out_dims(d, h, w);
        let per_out = od * oh * ow;
        for (out_idx, &src) in argmax.iter().enumerate() {
            let plane = out_idx / per_out; // which (n, c) pair
            let target = plane * per_image + src as usize;
            dx_slice[target] = dx_slice[target] + dy_slice[out_idx];
        }
        dx
    }
}

/// Fully connected layer: y = x·Wᵀ + b.
pub struct Linear<T: Real> {
    pub weight: Array2<T>, // [out, in]
    pub bias: Array1<T>,
    pub dweight: Array2<T>,
    pub dbias: Array1<T>,
    cache: Option<Array2<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = Array2::from_shape_vec(
            (out_features, in_features),
            he_normal(out_features * in_features, in_features, rng),
        )
        .expect("shape matches length");
        Linear {
            weight,
            bias: Array1::zeros(out_features),
            dweight: Array2::zeros((out_features, in_features)),
            dbias: Array1::zeros(out_features),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: Array2<T>, train: bool) -> Array2<T> {
        let mut y = x.dot(&self.weight.t());
        y.zip_mut_with(&self.bias.view().insert_axis(Axis(0)), |a, &b| *a = *a + b);
        if train {
            self.cache = Some(x);
        }
        y
    }

    pub fn backward(&mut self, dy: Array2<T>) -> Array2<T> {
        let x = self.cache.take().expect("backward without forward");
        self.dweight = &self.dweight + &dy.t().dot(&x);
        self.dbias = &self.dbias + &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamVisitor<T>) {
        f(
            &format!("{prefix}.weight"),
            self.weight.as_slice_mut().expect("standard layout"),
            self.dweight.as_slice_mut().expect("standard layout"),
        );
        f(
            &format!("{prefix}.bias"),
            self.bias.as_slice_mut().expect("standard layout"),
            self.dbias.as_slice_mut().expect("standard layout"),
        );
    }
}

/// L2 norm of a vector view (used by a few loss terms).
pub fn l2_norm<T: Real>(v: ArrayView1<T>) -> T {
    v.dot(&v).sqrt()
}
