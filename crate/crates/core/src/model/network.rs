use rand::{Rng, RngCore};

use super::{Architecture, ModelError, ModelParams, Result};
use crate::ingest::DataFrame;
use crate::numops::{
    conv_bank_accumulate, conv_bank_backward_accumulate, maxpool_with_argmax, scatter_pool_grad,
    wide_len, Matrix,
};

/// How [`forward`] treats dropout.
pub enum Mode<'a> {
    /// No dropout, no trace.
    Eval,
    /// Draws a fresh inverted-dropout mask from the generator.
    Train(&'a mut dyn RngCore),
    /// Uses the given per-entry scale (0 or `1/(1-rate)`) as the mask.
    Masked(&'a [f64]),
}

/// Intermediate values of one train-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    arch: Architecture,
    /// Input maps of every order; `inputs[0]` are the Data Frame slots.
    inputs: Vec<Vec<Matrix>>,
    /// Pre-activation sums per order and output map.
    pre: Vec<Vec<Matrix>>,
    argmax: Vec<Vec<Vec<usize>>>,
    flat: Vec<f64>,
    mask: Vec<f64>,
    dense_pre: Vec<f64>,
    features: Vec<f64>,
    prediction: f64,
}

impl ForwardTrace {
    pub fn prediction(&self) -> f64 {
        self.prediction
    }

    /// Flattened top-order representation before dropout.
    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    /// Per-entry dropout scale applied to [`Self::flat`].
    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Output maps of order `order` (0-based) after pooling.
    pub fn representation(&self, order: usize) -> Option<&[Matrix]> {
        self.inputs.get(order + 1).map(Vec::as_slice)
    }

    /// Recomputes the prediction from the cached input and mask.
    pub fn replay(&self, params: &ModelParams) -> Result<f64> {
        check_trace(self, params)?;
        run(self.inputs[0].clone(), params, Mode::Masked(&self.mask)).map(|(p, _)| p)
    }
}

fn check_trace(trace: &ForwardTrace, params: &ModelParams) -> Result<()> {
    if &trace.arch != params.arch() {
        return Err(ModelError::TraceMismatch(
            "trace was recorded with a different architecture".into(),
        ));
    }
    Ok(())
}

fn check_inputs(inputs: &[Matrix], arch: &Architecture) -> Result<()> {
    if inputs.len() != arch.num_slots {
        return Err(ModelError::Shape(format!(
            "network expects {} input slots, got {}",
            arch.num_slots,
            inputs.len()
        )));
    }
    for (i, m) in inputs.iter().enumerate() {
        if m.shape() != (arch.rows, arch.window) {
            return Err(ModelError::Shape(format!(
                "slot {i} is {:?}, network expects {:?}",
                m.shape(),
                (arch.rows, arch.window)
            )));
        }
    }
    Ok(())
}

struct OrderOutput {
    pre: Vec<Matrix>,
    argmax: Vec<Vec<usize>>,
    pooled: Vec<Matrix>,
}

fn order_forward(inputs: &[Matrix], params: &ModelParams, order: usize) -> OrderOutput {
    let arch = params.arch();
    let m = arch.filter_sizes[order];
    let conv_len = wide_len(inputs[0].cols(), m);
    let mut out = OrderOutput {
        pre: Vec::with_capacity(arch.maps[order]),
        argmax: Vec::with_capacity(arch.maps[order]),
        pooled: Vec::with_capacity(arch.maps[order]),
    };
    for j in 0..arch.maps[order] {
        let mut acc = Matrix::zeros(arch.rows, conv_len);
        for (k, input) in inputs.iter().enumerate() {
            conv_bank_accumulate(
                input,
                params.filter(order, j, k),
                m,
                params.bias(order, j, k),
                &mut acc,
            );
        }
        let activated = acc.map(|v| v.max(0.0));
        let (pooled, arg) = maxpool_with_argmax(&activated, arch.pool_sizes[order]);
        out.pre.push(acc);
        out.argmax.push(arg);
        out.pooled.push(pooled);
    }
    out
}

/// One conv block: for every output map `j`,
/// `pool(relu(Σ_k conv(inputs[k], F_{j,k}, B_{j,k})))`. `order` is 0-based.
pub fn conv_block_forward(
    inputs: &[Matrix],
    order: usize,
    params: &ModelParams,
) -> Result<Vec<Matrix>> {
    let arch = params.arch();
    if order >= arch.num_orders() {
        return Err(ModelError::Shape(format!(
            "order {order} out of range for {} orders",
            arch.num_orders()
        )));
    }
    let expected = (arch.rows, arch.order_len(order));
    if inputs.len() != arch.input_maps(order) || inputs.iter().any(|m| m.shape() != expected) {
        return Err(ModelError::Shape(format!(
            "order {order} expects {} maps of {expected:?}",
            arch.input_maps(order)
        )));
    }
    Ok(order_forward(inputs, params, order).pooled)
}

/// Predicts total sales for one normalized Data Frame. Train and masked
/// modes also return the trace needed by [`backward`].
pub fn forward(
    frame: &DataFrame,
    params: &ModelParams,
    mode: Mode<'_>,
) -> Result<(f64, Option<ForwardTrace>)> {
    let inputs: Vec<Matrix> = frame.slots.iter().map(|s| s.values.clone()).collect();
    run(inputs, params, mode)
}

pub(crate) fn run(
    inputs: Vec<Matrix>,
    params: &ModelParams,
    mode: Mode<'_>,
) -> Result<(f64, Option<ForwardTrace>)> {
    let arch = params.arch();
    check_inputs(&inputs, arch)?;
    let training = !matches!(mode, Mode::Eval);
    let mut trace_inputs = Vec::with_capacity(arch.num_orders() + 1);
    let mut trace_pre = Vec::new();
    let mut trace_arg = Vec::new();
    let mut current = inputs;
    for order in 0..arch.num_orders() {
        let out = order_forward(&current, params, order);
        if training {
            trace_inputs.push(std::mem::replace(&mut current, out.pooled));
            trace_pre.push(out.pre);
            trace_arg.push(out.argmax);
        } else {
            current = out.pooled;
        }
    }
    let flat: Vec<f64> = current
        .iter()
        .flat_map(|m| m.as_slice().iter().copied())
        .collect();
    if training {
        trace_inputs.push(current);
    }

    let mask: Vec<f64> = match mode {
        Mode::Eval => Vec::new(),
        Mode::Masked(mask) => {
            if mask.len() != flat.len() {
                return Err(ModelError::Shape(format!(
                    "dropout mask has {} entries, flatten vector {}",
                    mask.len(),
                    flat.len()
                )));
            }
            mask.to_vec()
        }
        Mode::Train(rng) => {
            let rate = arch.dropout;
            let keep = 1.0 / (1.0 - rate);
            if rate == 0.0 {
                vec![1.0; flat.len()]
            } else {
                (0..flat.len())
                    .map(|_| {
                        if rng.random::<f64>() < rate {
                            0.0
                        } else {
                            keep
                        }
                    })
                    .collect()
            }
        }
    };

    let n = arch.dense_dim;
    let h = params.dense();
    let mut dense_pre = vec![0.0; n];
    for (a, &p) in flat.iter().enumerate() {
        let v = if training { p * mask[a] } else { p };
        if v != 0.0 {
            for (z, &w) in dense_pre.iter_mut().zip(&h[a * n..(a + 1) * n]) {
                *z += v * w;
            }
        }
    }
    let features: Vec<f64> = dense_pre.iter().map(|v| v.max(0.0)).collect();
    let w = params.head();
    let prediction = w[0]
        + features
            .iter()
            .zip(&w[1..])
            .map(|(x, w)| x * w)
            .sum::<f64>();

    let trace = training.then(|| ForwardTrace {
        arch: arch.clone(),
        inputs: trace_inputs,
        pre: trace_pre,
        argmax: trace_arg,
        flat,
        mask,
        dense_pre,
        features,
        prediction,
    });
    Ok((prediction, trace))
}

/// Gradients of `upstream · prediction` with respect to every parameter.
pub fn backward(trace: &ForwardTrace, params: &ModelParams, upstream: f64) -> Result<ModelParams> {
    let mut grads = params.zeros_like();
    backward_accumulate(trace, params, upstream, &mut grads, None)?;
    Ok(grads)
}

/// Like [`backward`], also returning the gradient with respect to each
/// input slot.
pub fn backward_with_input(
    trace: &ForwardTrace,
    params: &ModelParams,
    upstream: f64,
) -> Result<(ModelParams, Vec<Matrix>)> {
    let mut grads = params.zeros_like();
    let mut input = Vec::new();
    backward_accumulate(trace, params, upstream, &mut grads, Some(&mut input))?;
    Ok((grads, input))
}

/// Adds the gradients of `upstream · prediction` into `grads`.
pub(crate) fn backward_accumulate(
    trace: &ForwardTrace,
    params: &ModelParams,
    upstream: f64,
    grads: &mut ModelParams,
    input_grads: Option<&mut Vec<Matrix>>,
) -> Result<()> {
    check_trace(trace, params)?;
    if grads.arch() != params.arch() {
        return Err(ModelError::TraceMismatch(
            "gradient buffer shape differs".into(),
        ));
    }
    let arch = params.arch();
    let n = arch.dense_dim;
    let head_off = grads.layout().tensors[2 * arch.num_orders() + 1].offset;
    let dense_off = grads.layout().tensors[2 * arch.num_orders()].offset;
    let w = params.head();
    let h = params.dense();

    let g = grads.values_mut();
    g[head_off] += upstream;
    let mut d_pre = vec![0.0; n];
    for c in 0..n {
        g[head_off + 1 + c] += upstream * trace.features[c];
        if trace.dense_pre[c] > 0.0 {
            d_pre[c] = upstream * w[1 + c];
        }
    }
    let mut d_flat = vec![0.0; trace.flat.len()];
    for (a, df) in d_flat.iter_mut().enumerate() {
        let scale = trace.mask[a];
        let v = trace.flat[a] * scale;
        let row = &mut g[dense_off + a * n..dense_off + (a + 1) * n];
        if v != 0.0 {
            for (gh, &dz) in row.iter_mut().zip(&d_pre) {
                *gh += v * dz;
            }
        }
        if scale != 0.0 {
            let hrow = &h[a * n..(a + 1) * n];
            *df = scale * hrow.iter().zip(&d_pre).map(|(x, y)| x * y).sum::<f64>();
        }
    }

    let top = arch.num_orders();
    let top_len = arch.order_len(top);
    let mut d_maps: Vec<Matrix> = d_flat
        .chunks(arch.rows * top_len)
        .map(|c| Matrix::from_vec(arch.rows, top_len, c.to_vec()).expect("flatten layout"))
        .collect();

    let want_input = input_grads.is_some();
    for order in (0..top).rev() {
        let m = arch.filter_sizes[order];
        let inputs = &trace.inputs[order];
        let need_input = order > 0 || want_input;
        let mut d_inputs: Vec<Matrix> = if need_input {
            inputs
                .iter()
                .map(|x| Matrix::zeros(x.rows(), x.cols()))
                .collect()
        } else {
            Vec::new()
        };
        for (j, d_pooled) in d_maps.iter().enumerate() {
            let pre = &trace.pre[order][j];
            let mut d_act = Matrix::zeros(pre.rows(), pre.cols());
            scatter_pool_grad(&trace.argmax[order][j], d_pooled, &mut d_act);
            for (d, &p) in d_act.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                if p <= 0.0 {
                    *d = 0.0;
                }
            }
            for (k, input) in inputs.iter().enumerate() {
                let f_off = params.filter_offset(order, j, k);
                let b_off = params.bias_offset(order, j, k);
                let filters = params.filter(order, j, k);
                let (left, right) = grads.values_mut().split_at_mut(b_off);
                conv_bank_backward_accumulate(
                    input,
                    filters,
                    m,
                    &d_act,
                    d_inputs.get_mut(k),
                    &mut left[f_off..f_off + arch.rows * m],
                    &mut right[..arch.rows],
                );
            }
        }
        d_maps = d_inputs;
    }
    if let Some(out) = input_grads {
        *out = d_maps;
    }
    Ok(())
}
