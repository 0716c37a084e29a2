//! Batched forward and backward passes.
//!
//! Sequence batches are time-major matrices: row `t * batch + b` holds
//! step `t` of batch element `b`. Backward functions accumulate into a
//! gradient [`ModelParams`] and return the gradient of their input.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};

use super::params::{Linear, LstmLayer};
use super::ModelParams;

pub(crate) const LOG_VAR_MIN: f64 = -10.0;
pub(crate) const LOG_VAR_MAX: f64 = 10.0;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn linear_forward(layer: &Linear, x: &ArrayView2<f64>) -> Array2<f64> {
    let mut y = x.dot(&layer.weight.t());
    y += &layer.bias;
    y
}

/// Accumulates parameter gradients and returns `dL/dx`.
fn linear_backward(layer: &Linear, x: &ArrayView2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
    general_mat_mul(1.0, &dy.t(), x, 1.0, &mut grad.weight);
    grad.bias += &dy.sum_axis(Axis(0));
    dy.dot(&layer.weight)
}

/// Input to one recurrent layer.
#[derive(Clone, Copy)]
pub(crate) enum SeqInput<'a> {
    /// Time-major `(steps * batch) × in`.
    Sequence(ArrayView2<'a, f64>),
    /// `batch × in`, fed unchanged at every step.
    Constant(ArrayView2<'a, f64>),
}

pub(crate) struct LstmCache {
    /// Activated gates `[i f g o]`, `(steps * batch) × 4H`.
    gates: Array2<f64>,
    cells: Array2<f64>,
    tanh_cells: Array2<f64>,
    pub(crate) hidden: Array2<f64>,
}

pub(crate) fn lstm_forward(layer: &LstmLayer, input: SeqInput<'_>, steps: usize, batch: usize) -> LstmCache {
    let h = layer.hidden_size();
    let rows = steps * batch;
    let projected = match input {
        SeqInput::Sequence(x) | SeqInput::Constant(x) => {
            let mut p = x.dot(&layer.w_input.t());
            p += &layer.bias;
            p
        }
    };
    let mut gates = Array2::zeros((rows, 4 * h));
    let mut cells = Array2::zeros((rows, h));
    let mut tanh_cells = Array2::zeros((rows, h));
    let mut hidden = Array2::zeros((rows, h));
    let mut pre = Array2::zeros((batch, 4 * h));

    for t in 0..steps {
        let cur = t * batch..(t + 1) * batch;
        match input {
            SeqInput::Sequence(_) => pre.assign(&projected.slice(s![cur.clone(), ..])),
            SeqInput::Constant(_) => pre.assign(&projected),
        }
        if t > 0 {
            let prev = hidden.slice(s![(t - 1) * batch..t * batch, ..]);
            general_mat_mul(1.0, &prev, &layer.w_hidden.t(), 1.0, &mut pre);
        }
        let pre_s = pre.as_slice().expect("contiguous");
        let gate_s = gates.as_slice_mut().expect("contiguous");
        let cell_s = cells.as_slice_mut().expect("contiguous");
        let tanh_s = tanh_cells.as_slice_mut().expect("contiguous");
        let hid_s = hidden.as_slice_mut().expect("contiguous");
        for b in 0..batch {
            let r = t * batch + b;
            let a = &pre_s[b * 4 * h..(b + 1) * 4 * h];
            let g_out = &mut gate_s[r * 4 * h..(r + 1) * 4 * h];
            for k in 0..h {
                g_out[k] = sigmoid(a[k]);
                g_out[h + k] = sigmoid(a[h + k]);
                g_out[2 * h + k] = a[2 * h + k].tanh();
                g_out[3 * h + k] = sigmoid(a[3 * h + k]);
            }
            for k in 0..h {
                let c_prev = if t > 0 { cell_s[(r - batch) * h + k] } else { 0.0 };
                let c = g_out[h + k] * c_prev + g_out[k] * g_out[2 * h + k];
                let tc = c.tanh();
                cell_s[r * h + k] = c;
                tanh_s[r * h + k] = tc;
                hid_s[r * h + k] = g_out[3 * h + k] * tc;
            }
        }
    }
    LstmCache {
        gates,
        cells,
        tanh_cells,
        hidden,
    }
}

/// Backward through one layer given `dL/dh_t` for every step.
pub(crate) fn lstm_backward(
    layer: &LstmLayer,
    cache: &LstmCache,
    input: SeqInput<'_>,
    steps: usize,
    batch: usize,
    d_hidden: &Array2<f64>,
    grad: &mut LstmLayer,
) -> Array2<f64> {
    let h = layer.hidden_size();
    let mut d_pre = Array2::zeros((steps * batch, 4 * h));
    let mut dh_next = Array2::<f64>::zeros((batch, h));
    let mut dc_next = Array2::<f64>::zeros((batch, h));

    for t in (0..steps).rev() {
        let gate_s = cache.gates.as_slice().expect("contiguous");
        let cell_s = cache.cells.as_slice().expect("contiguous");
        let tanh_s = cache.tanh_cells.as_slice().expect("contiguous");
        let dh_s = d_hidden.as_slice().expect("contiguous");
        let dh_next_s = dh_next.as_slice().expect("contiguous");
        let dc_next_s = dc_next.as_slice_mut().expect("contiguous");
        let d_pre_s = d_pre.as_slice_mut().expect("contiguous");
        for b in 0..batch {
            let r = t * batch + b;
            let g = &gate_s[r * 4 * h..(r + 1) * 4 * h];
            let tc = &tanh_s[r * h..(r + 1) * h];
            let da = &mut d_pre_s[r * 4 * h..(r + 1) * 4 * h];
            for k in 0..h {
                let (i, f, gg, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                let c_prev = if t > 0 { cell_s[(r - batch) * h + k] } else { 0.0 };
                let dh = dh_s[r * h + k] + dh_next_s[b * h + k];
                let dc = dc_next_s[b * h + k] + dh * o * (1.0 - tc[k] * tc[k]);
                da[k] = dc * gg * i * (1.0 - i);
                da[h + k] = dc * c_prev * f * (1.0 - f);
                da[2 * h + k] = dc * i * (1.0 - gg * gg);
                da[3 * h + k] = dh * tc[k] * o * (1.0 - o);
                dc_next_s[b * h + k] = dc * f;
            }
        }
        let da_t = d_pre.slice(s![t * batch..(t + 1) * batch, ..]);
        general_mat_mul(1.0, &da_t, &layer.w_hidden, 0.0, &mut dh_next);
    }

    if steps > 1 {
        let da_later = d_pre.slice(s![batch.., ..]);
        let h_earlier = cache.hidden.slice(s![..(steps - 1) * batch, ..]);
        general_mat_mul(1.0, &da_later.t(), &h_earlier, 1.0, &mut grad.w_hidden);
    }
    grad.bias += &d_pre.sum_axis(Axis(0));
    match input {
        SeqInput::Sequence(x) => {
            general_mat_mul(1.0, &d_pre.t(), &x, 1.0, &mut grad.w_input);
            d_pre.dot(&layer.w_input)
        }
        SeqInput::Constant(x) => {
            let mut summed = Array2::<f64>::zeros((batch, 4 * h));
            for t in 0..steps {
                summed += &d_pre.slice(s![t * batch..(t + 1) * batch, ..]);
            }
            general_mat_mul(1.0, &summed.t(), &x, 1.0, &mut grad.w_input);
            summed.dot(&layer.w_input)
        }
    }
}

fn stack_forward(layers: &[LstmLayer], input: SeqInput<'_>, steps: usize, batch: usize) -> Vec<LstmCache> {
    let mut caches: Vec<LstmCache> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let cache = if l == 0 {
            lstm_forward(layer, input, steps, batch)
        } else {
            let below = caches[l - 1].hidden.view();
            lstm_forward(layer, SeqInput::Sequence(below), steps, batch)
        };
        caches.push(cache);
    }
    caches
}

/// Returns the gradient of the stack input.
fn stack_backward<'a>(
    layers: &[LstmLayer],
    caches: &'a [LstmCache],
    input: SeqInput<'a>,
    steps: usize,
    batch: usize,
    d_top: Array2<f64>,
    grads: &mut [LstmLayer],
) -> Array2<f64> {
    let mut d = d_top;
    for l in (0..layers.len()).rev() {
        let layer_input = if l == 0 {
            input
        } else {
            SeqInput::Sequence(caches[l - 1].hidden.view())
        };
        d = lstm_backward(&layers[l], &caches[l], layer_input, steps, batch, &d, &mut grads[l]);
    }
    d
}

/// Stack windows `(T × D)` into a time-major `(T * B) × D` matrix.
pub(crate) fn time_major<'a, I>(windows: I, steps: usize, dim: usize) -> Array2<f64>
where
    I: ExactSizeIterator<Item = ArrayView2<'a, f64>>,
{
    let batch = windows.len();
    let mut out = Array2::zeros((steps * batch, dim));
    for (b, w) in windows.enumerate() {
        for t in 0..steps {
            out.row_mut(t * batch + b).assign(&w.row(t));
        }
    }
    out
}

pub(crate) struct TrunkPass {
    caches: Vec<LstmCache>,
    batch: usize,
    /// Final hidden state of the top layer, `batch × H`.
    pub(crate) final_hidden: Array2<f64>,
}

pub(crate) fn trunk_forward(params: &ModelParams, x: ArrayView2<'_, f64>, batch: usize) -> TrunkPass {
    let steps = params.config.seq_len;
    let caches = stack_forward(&params.encoder, SeqInput::Sequence(x), steps, batch);
    let top = &caches.last().expect("at least one layer").hidden;
    let final_hidden = top.slice(s![(steps - 1) * batch.., ..]).to_owned();
    TrunkPass {
        caches,
        batch,
        final_hidden,
    }
}

pub(crate) fn trunk_backward(
    params: &ModelParams,
    pass: &TrunkPass,
    x: ArrayView2<'_, f64>,
    d_final: &Array2<f64>,
    grads: &mut ModelParams,
) {
    let steps = params.config.seq_len;
    let batch = pass.batch;
    let mut d_top = Array2::zeros((steps * batch, params.config.hidden_dim));
    d_top.slice_mut(s![(steps - 1) * batch.., ..]).assign(d_final);
    stack_backward(
        &params.encoder,
        &pass.caches,
        SeqInput::Sequence(x),
        steps,
        batch,
        d_top,
        &mut grads.encoder,
    );
}

pub(crate) struct ClassifierPass {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    pub(crate) probs: Array2<f64>,
}

pub(crate) fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

pub(crate) fn classifier_forward(params: &ModelParams, trunk: &Array2<f64>) -> ClassifierPass {
    let n = params.classifier.len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre_activations = Vec::with_capacity(n);
    let mut act = trunk.clone();
    for (l, layer) in params.classifier.iter().enumerate() {
        let z = linear_forward(layer, &act.view());
        inputs.push(act);
        act = if l + 1 < n { z.mapv(|v| v.max(0.0)) } else { z.clone() };
        pre_activations.push(z);
    }
    softmax_rows(&mut act);
    ClassifierPass {
        inputs,
        pre_activations,
        probs: act,
    }
}

/// Returns `dL/d trunk` given `dL/d logits`.
pub(crate) fn classifier_backward(
    params: &ModelParams,
    pass: &ClassifierPass,
    d_logits: Array2<f64>,
    grads: &mut ModelParams,
) -> Array2<f64> {
    let mut d = d_logits;
    for l in (0..params.classifier.len()).rev() {
        if l + 1 < params.classifier.len() {
            d.zip_mut_with(&pass.pre_activations[l], |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
        }
        d = linear_backward(
            &params.classifier[l],
            &pass.inputs[l].view(),
            &d,
            &mut grads.classifier[l],
        );
    }
    d
}

/// `[h_row ; one_hot(class)]` per job.
pub(crate) fn conditioned(
    features: &Array2<f64>,
    rows: &[usize],
    classes: &[usize],
    num_classes: usize,
) -> Array2<f64> {
    let width = features.ncols();
    let mut out = Array2::zeros((rows.len(), width + num_classes));
    for (r, (&src, &y)) in rows.iter().zip(classes).enumerate() {
        out.slice_mut(s![r, ..width]).assign(&features.row(src));
        out[[r, width + y]] = 1.0;
    }
    out
}

pub(crate) struct HeadsPass {
    pub(crate) mean: Array2<f64>,
    /// Clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub(crate) log_var: Array2<f64>,
    raw_log_var: Array2<f64>,
}

pub(crate) fn heads_forward(params: &ModelParams, input: &Array2<f64>) -> HeadsPass {
    let mean = linear_forward(&params.enc_mean, &input.view());
    let raw_log_var = linear_forward(&params.enc_log_var, &input.view());
    let log_var = raw_log_var.mapv(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
    HeadsPass {
        mean,
        log_var,
        raw_log_var,
    }
}

/// Returns `dL/d input`; gradient through the clamp is zero outside its range.
pub(crate) fn heads_backward(
    params: &ModelParams,
    input: &Array2<f64>,
    pass: &HeadsPass,
    d_mean: &Array2<f64>,
    d_log_var: &Array2<f64>,
    grads: &mut ModelParams,
) -> Array2<f64> {
    let mut d_raw = d_log_var.clone();
    d_raw.zip_mut_with(&pass.raw_log_var, |g, &v| {
        if !(LOG_VAR_MIN..=LOG_VAR_MAX).contains(&v) {
            *g = 0.0;
        }
    });
    let mut d_in = linear_backward(&params.enc_mean, &input.view(), d_mean, &mut grads.enc_mean);
    d_in += &linear_backward(&params.enc_log_var, &input.view(), &d_raw, &mut grads.enc_log_var);
    d_in
}

pub(crate) struct DecoderPass {
    caches: Vec<LstmCache>,
    batch: usize,
    /// Time-major reconstruction, `(T * batch) × D`.
    pub(crate) frames: Array2<f64>,
}

pub(crate) fn decoder_forward(params: &ModelParams, input: &Array2<f64>) -> DecoderPass {
    let steps = params.config.seq_len;
    let batch = input.nrows();
    let caches = stack_forward(&params.decoder, SeqInput::Constant(input.view()), steps, batch);
    let top = &caches.last().expect("at least one layer").hidden;
    let frames = linear_forward(&params.dec_out, &top.view());
    DecoderPass { caches, batch, frames }
}

/// Returns `dL/d input` given `dL/d frames`.
pub(crate) fn decoder_backward(
    params: &ModelParams,
    pass: &DecoderPass,
    input: &Array2<f64>,
    d_frames: &Array2<f64>,
    grads: &mut ModelParams,
) -> Array2<f64> {
    let steps = params.config.seq_len;
    let top = &pass.caches.last().expect("at least one layer").hidden;
    let d_top = linear_backward(&params.dec_out, &top.view(), d_frames, &mut grads.dec_out);
    stack_backward(
        &params.decoder,
        &pass.caches,
        SeqInput::Constant(input.view()),
        steps,
        pass.batch,
        d_top,
        &mut grads.decoder,
    )
}
