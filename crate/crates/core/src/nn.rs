//! Small dense/GRU kernel with hand-written backward passes.
//!
//! All trainable values of a model live in one flat `Vec<f64>`; layers only
//! hold [`Slot`]s (offset + shape) into it. Gradients share the layout, which
//! keeps Adam, clipping, checkpoints and finite-difference checks trivial.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Location and shape of one parameter matrix inside the flat store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    /// Uniform init half-width; 0 for biases.
    #[serde(skip)]
    pub(crate) init: f64,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn view<'a>(&self, data: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &data[self.offset..self.offset + self.len()])
            .expect("slot within store")
    }

    pub fn view_mut<'a>(&self, data: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut data[self.offset..self.offset + self.len()])
            .expect("slot within store")
    }

    fn row<'a>(&self, data: &'a [f64], r: usize) -> &'a [f64] {
        let start = self.offset + r * self.cols;
        &data[start..start + self.cols]
    }

    fn row_mut<'a>(&self, data: &'a mut [f64], r: usize) -> &'a mut [f64] {
        let start = self.offset + r * self.cols;
        &mut data[start..start + self.cols]
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    pub slots: Vec<Slot>,
    pub len: usize,
}

impl ParamLayout {
    fn alloc(&mut self, name: String, rows: usize, cols: usize, init: f64) -> Slot {
        let slot = Slot { name, offset: self.len, rows, cols, init };
        self.len += slot.len();
        self.slots.push(slot.clone());
        slot
    }

    /// Weight matrix with Glorot-uniform initialization.
    pub fn weight(&mut self, name: impl Into<String>, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Slot {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.alloc(name.into(), rows, cols, bound)
    }

    pub fn bias(&mut self, name: impl Into<String>, width: usize) -> Slot {
        self.alloc(name.into(), 1, width, 0.0)
    }

    pub fn initialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut data = vec![0.0; self.len];
        for slot in &self.slots {
            if slot.init > 0.0 {
                for v in &mut data[slot.offset..slot.offset + slot.len()] {
                    *v = rng.random_range(-slot.init..slot.init);
                }
            }
        }
        data
    }
}

/// One input segment of a layer, one row per batch element.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Dense(ArrayView2<'a, f64>),
    /// One-hot rows; `None` rows are all-zero (padding or masked slots).
    OneHot { width: usize, idx: &'a [Option<usize>] },
}

impl Input<'_> {
    fn width(&self) -> usize {
        match self {
            Input::Dense(x) => x.ncols(),
            Input::OneHot { width, .. } => *width,
        }
    }

    fn batch(&self) -> usize {
        match self {
            Input::Dense(x) => x.nrows(),
            Input::OneHot { idx, .. } => idx.len(),
        }
    }
}

/// Affine map over a concatenation of input segments.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Slot,
    pub b: Slot,
    segments: Vec<usize>,
}

impl Dense {
    pub fn new(layout: &mut ParamLayout, name: &str, segments: &[usize], out: usize) -> Self {
        Self::with_fan(layout, name, segments, out, out)
    }

    /// `fan_out` overrides the output width used for initialization (GRU
    /// input maps pack three gates side by side).
    pub fn with_fan(layout: &mut ParamLayout, name: &str, segments: &[usize], out: usize, fan_out: usize) -> Self {
        let input: usize = segments.iter().sum();
        let w = layout.weight(format!("{name}.w"), input, out, input, fan_out);
        let b = layout.bias(format!("{name}.b"), out);
        Dense { w, b, segments: segments.to_vec() }
    }

    pub fn input_width(&self) -> usize {
        self.w.rows
    }

    pub fn output_width(&self) -> usize {
        self.w.cols
    }

    fn check(&self, inputs: &[Input]) -> Result<usize, NnError> {
        if inputs.len() != self.segments.len() {
            return Err(NnError::DimensionMismatch { expected: self.segments.len(), got: inputs.len() });
        }
        let batch = inputs.first().map_or(0, Input::batch);
        for (inp, &w) in inputs.iter().zip(&self.segments) {
            if inp.width() != w {
                return Err(NnError::DimensionMismatch { expected: w, got: inp.width() });
            }
            if inp.batch() != batch {
                return Err(NnError::DimensionMismatch { expected: batch, got: inp.batch() });
            }
            if let Input::OneHot { width, idx } = inp {
                if let Some(&i) = idx.iter().flatten().find(|&&i| i >= *width) {
                    return Err(NnError::IndexOutOfRange { index: i, len: *width });
                }
            }
        }
        Ok(batch)
    }

    pub fn forward(&self, params: &[f64], inputs: &[Input]) -> Result<Array2<f64>, NnError> {
        let batch = self.check(inputs)?;
        let bias = self.b.view(params);
        let mut out = Array2::zeros((batch, self.output_width()));
        out += &bias;
        let w = self.w.view(params);
        let mut row0 = 0;
        for (inp, &width) in inputs.iter().zip(&self.segments) {
            match inp {
                Input::Dense(x) => {
                    general_mat_mul(1.0, x, &w.slice(s![row0..row0 + width, ..]), 1.0, &mut out);
                }
                Input::OneHot { idx, .. } => {
                    for (mut o, i) in out.rows_mut().into_iter().zip(idx.iter()) {
                        if let Some(i) = i {
                            let wr = self.w.row(params, row0 + i);
                            for (a, b) in o.iter_mut().zip(wr) {
                                *a += b;
                            }
                        }
                    }
                }
            }
            row0 += width;
        }
        Ok(out)
    }

    /// Accumulates weight/bias gradients and returns the gradient for every
    /// dense input segment (`None` for one-hot segments).
    pub fn backward(
        &self,
        params: &[f64],
        grads: &mut [f64],
        inputs: &[Input],
        dout: &ArrayView2<f64>,
    ) -> Vec<Option<Array2<f64>>> {
        {
            let mut gb = self.b.view_mut(grads);
            gb += &dout.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let w = self.w.view(params);
        let mut out = Vec::with_capacity(inputs.len());
        let mut row0 = 0;
        for (inp, &width) in inputs.iter().zip(&self.segments) {
            match inp {
                Input::Dense(x) => {
                    let mut gw = self.w.view_mut(grads);
                    let mut seg = gw.slice_mut(s![row0..row0 + width, ..]);
                    general_mat_mul(1.0, &x.t(), dout, 1.0, &mut seg);
                    let mut dx = Array2::zeros((x.nrows(), width));
                    general_mat_mul(1.0, dout, &w.slice(s![row0..row0 + width, ..]).t(), 0.0, &mut dx);
                    out.push(Some(dx));
                }
                Input::OneHot { idx, .. } => {
                    for (d, i) in dout.rows().into_iter().zip(idx.iter()) {
                        if let Some(i) = i {
                            let gr = self.w.row_mut(grads, row0 + i);
                            for (a, b) in gr.iter_mut().zip(d.iter()) {
                                *a += b;
                            }
                        }
                    }
                    out.push(None);
                }
            }
            row0 += width;
        }
        out
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard GRU layer:
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `c = tanh(W_c x + U_c (r ⊙ h) + b_c)`, `h' = (1 − z) ⊙ h + z ⊙ c`.
///
/// `input` packs `[W_z | W_r | W_c]` column-wise with the biases.
#[derive(Debug, Clone)]
pub struct GruLayer {
    pub input: Dense,
    pub u_zr: Slot,
    pub u_c: Slot,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct GruCache {
    h_prev: Array2<f64>,
    zr: Array2<f64>,
    rh: Array2<f64>,
    c: Array2<f64>,
    pub h: Array2<f64>,
}

impl GruLayer {
    pub fn new(layout: &mut ParamLayout, name: &str, segments: &[usize], hidden: usize) -> Self {
        let input = Dense::with_fan(layout, name, segments, 3 * hidden, hidden);
        let u_zr = layout.weight(format!("{name}.u_zr"), hidden, 2 * hidden, hidden, hidden);
        let u_c = layout.weight(format!("{name}.u_c"), hidden, hidden, hidden, hidden);
        GruLayer { input, u_zr, u_c, hidden }
    }

    pub fn forward(&self, params: &[f64], inputs: &[Input], h_prev: ArrayView2<f64>) -> Result<GruCache, NnError> {
        let h = self.hidden;
        if h_prev.ncols() != h {
            return Err(NnError::DimensionMismatch { expected: h, got: h_prev.ncols() });
        }
        let a = self.input.forward(params, inputs)?;
        if a.nrows() != h_prev.nrows() {
            return Err(NnError::DimensionMismatch { expected: a.nrows(), got: h_prev.nrows() });
        }
        let mut zr = a.slice(s![.., ..2 * h]).to_owned();
        general_mat_mul(1.0, &h_prev, &self.u_zr.view(params), 1.0, &mut zr);
        zr.mapv_inplace(sigmoid);
        let rh = &zr.slice(s![.., h..]) * &h_prev;
        let mut c = a.slice(s![.., 2 * h..]).to_owned();
        general_mat_mul(1.0, &rh, &self.u_c.view(params), 1.0, &mut c);
        c.mapv_inplace(f64::tanh);
        let z = zr.slice(s![.., ..h]);
        let mut hn = Array2::zeros(h_prev.raw_dim());
        ndarray::Zip::from(&mut hn)
            .and(&z)
            .and(&h_prev)
            .and(&c)
            .for_each(|o, &z, &hp, &c| *o = (1.0 - z) * hp + z * c);
        Ok(GruCache { h_prev: h_prev.to_owned(), zr, rh, c, h: hn })
    }

    /// Returns the gradient w.r.t. the previous state and the dense inputs.
    pub fn backward(
        &self,
        params: &[f64],
        grads: &mut [f64],
        inputs: &[Input],
        cache: &GruCache,
        dh: ArrayView2<f64>,
    ) -> (Array2<f64>, Vec<Option<Array2<f64>>>) {
        let h = self.hidden;
        let batch = dh.nrows();
        let z = cache.zr.slice(s![.., ..h]);
        let r = cache.zr.slice(s![.., h..]);
        let mut da = Array2::zeros((batch, 3 * h));
        let mut dh_prev = Array2::zeros((batch, h));
        {
            let (mut da_zr, mut dac) = da.view_mut().split_at(Axis(1), 2 * h);
            ndarray::Zip::from(&mut dac)
                .and(&mut dh_prev)
                .and(&dh)
                .and(&z)
                .and(&cache.c)
                .for_each(|dac, dhp, &dh, &z, &c| {
                    *dac = dh * z * (1.0 - c * c);
                    *dhp = dh * (1.0 - z);
                });
            let u_c = self.u_c.view(params);
            {
                let mut gu = self.u_c.view_mut(grads);
                general_mat_mul(1.0, &cache.rh.t(), &dac, 1.0, &mut gu);
            }
            let mut d_rh = Array2::zeros((batch, h));
            general_mat_mul(1.0, &dac, &u_c.t(), 0.0, &mut d_rh);

            let (mut daz, mut dar) = da_zr.view_mut().split_at(Axis(1), h);
            ndarray::Zip::from(&mut daz)
                .and(&dh)
                .and(&z)
                .and(&cache.c)
                .and(&cache.h_prev)
                .for_each(|o, &dh, &z, &c, &hp| *o = dh * (c - hp) * z * (1.0 - z));
            ndarray::Zip::from(&mut dar)
                .and(&mut dh_prev)
                .and(&d_rh)
                .and(&r)
                .and(&cache.h_prev)
                .for_each(|o, dhp, &d, &r, &hp| {
                    *o = d * hp * r * (1.0 - r);
                    *dhp += d * r;
                });
            {
                let mut gu = self.u_zr.view_mut(grads);
                general_mat_mul(1.0, &cache.h_prev.t(), &da_zr, 1.0, &mut gu);
            }
            general_mat_mul(1.0, &da_zr, &self.u_zr.view(params).t(), 1.0, &mut dh_prev);
        }
        let dinputs = self.input.backward(params, grads, inputs, &da.view());
        (dh_prev, dinputs)
    }

    /// Single, unbatched step on a dense input vector.
    pub fn step(&self, params: &[f64], x: &[f64], h: &[f64]) -> Result<Vec<f64>, NnError> {
        if h.len() != self.hidden {
            return Err(NnError::DimensionMismatch { expected: self.hidden, got: h.len() });
        }
        if x.len() != self.input.input_width() {
            return Err(NnError::DimensionMismatch { expected: self.input.input_width(), got: x.len() });
        }
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let hv = ArrayView2::from_shape((1, h.len()), h).expect("row");
        // split the dense vector according to the layer's segments
        let mut segs = Vec::new();
        let mut c0 = 0;
        for &w in &self.input.segments {
            segs.push(Input::Dense(xv.slice_move(s![.., c0..c0 + w])));
            c0 += w;
        }
        Ok(self.forward(params, &segs, hv)?.h.into_raw_vec_and_offset().0)
    }
}

pub fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// `p_i = exp(v_i / τ) / Σ_j exp(v_j / τ)`, computed after subtracting the max.
pub fn softmax(v: &[f64], temperature: f64) -> Result<Vec<f64>, NnError> {
    if v.iter().any(|x| !x.is_finite() && !(x.is_infinite() && x.is_sign_negative())) || !(temperature > 0.0) {
        return Err(NnError::NonFiniteInput);
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NnError::NonFiniteInput);
    }
    let mut out: Vec<f64> = v.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

/// Row-wise softmax at temperature 1.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

pub const PROB_FLOOR: f64 = 1e-12;

pub fn cross_entropy(p: &[f64], target: usize) -> Result<f64, NnError> {
    let pt = p.get(target).ok_or(NnError::IndexOutOfRange { index: target, len: p.len() })?;
    Ok(-pt.max(PROB_FLOOR).ln())
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        AdamState { config, m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        if params.len() != self.m.len() {
            return Err(NnError::DimensionMismatch { expected: self.m.len(), got: params.len() });
        }
        if grads.len() != self.m.len() {
            return Err(NnError::DimensionMismatch { expected: self.m.len(), got: grads.len() });
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Scales `grads` so that its L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub max_absolute_error: f64,
    /// Max relative error over components with magnitude at least
    /// [`FD_RESOLUTION`]; smaller ones are dominated by rounding in the loss.
    pub resolved_relative_error: f64,
    pub checked: usize,
    pub passed: bool,
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_RESOLUTION: f64 = 1e-6;

/// Central finite differences against an analytic gradient. Relative error
/// per component is `|g_a − g_n| / max(|g_a|, |g_n|, 1e-8)`.
pub fn grad_check<F>(mut loss: F, params: &[f64], analytic: &[f64], tolerance: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length must match parameters");
    let mut theta = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        max_absolute_error: 0.0,
        resolved_relative_error: 0.0,
        checked: 0,
        passed: true,
    };
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + FD_STEP;
        let plus = loss(&theta);
        theta[i] = orig - FD_STEP;
        let minus = loss(&theta);
        theta[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs());
        let rel = (a - numeric).abs() / scale.max(1e-8);
        report.max_absolute_error = report.max_absolute_error.max((a - numeric).abs());
        if scale >= FD_RESOLUTION {
            report.resolved_relative_error = report.resolved_relative_error.max(rel);
        }
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    report.passed = report.max_relative_error < tolerance;
    report
}
