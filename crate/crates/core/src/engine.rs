//! Training-step orchestration: forward, loss, backward, update, with the
//! buffer-lifetime discipline that keeps the low-cost scheme's footprint
//! small, plus the epoch loop, evaluation and checkpointing.

use crate::batchnorm::BnState;
use crate::error::{Error, Result};
use crate::layers::{
    ste_mask, BnBackSource, BnVariant, DwFormat, LayerGrads, LayerInput, Scheme,
};
use crate::model::{Layer, Model, Topology};
use crate::optim::{
    adam_update, attenuate_binary_gradient, bop_update, sgd_momentum_update, OptimizerKind,
};
use crate::quant::{sign_binarize, BitTensor};
use crate::tensor::{storage_bytes, store_round, Shape, StorageDtype, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// In-memory dataset: row-major images scaled to [-1, 1], class labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: usize,
    pub classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the given sample indices into a batch matrix.
    pub fn batch(&self, idxs: &[usize]) -> (Tensor, Vec<u8>) {
        let mut vals = Vec::with_capacity(idxs.len() * self.features);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            vals.extend_from_slice(&self.images[i * self.features..(i + 1) * self.features]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::matrix(idxs.len(), self.features, vals).expect("batch gather"),
            labels,
        )
    }
}

/// Numerically-stable softmax cross-entropy, mean over the batch.
/// Returns (loss, dlogits, top-1 accuracy).
pub fn softmax_xent(logits: &Tensor, labels: &[u8]) -> (f32, Tensor, f32) {
    let (b, c) = (logits.rows(), logits.cols());
    assert_eq!(b, labels.len());
    let mut dl = vec![0.0f32; b * c];
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    let inv_b = 1.0 / b as f32;
    for r in 0..b {
        let row = &logits.values()[r * c..(r + 1) * c];
        let mut max = f32::NEG_INFINITY;
        let mut arg = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > max {
                max = v;
                arg = j;
            }
        }
        if arg == labels[r] as usize {
            correct += 1;
        }
        let mut z = 0.0f32;
        for &v in row {
            z += (v - max).exp();
        }
        let label = labels[r] as usize;
        loss += (z.ln() - (row[label] - max)) as f64;
        for j in 0..c {
            let p = (row[j] - max).exp() / z;
            dl[r * c + j] = (p - if j == label { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    (
        (loss / b as f64) as f32,
        Tensor::matrix(b, c, dl).expect("dlogits"),
        correct as f32 / b as f32,
    )
}

/// Inter-layer activation: the high-precision value when the scheme retains
/// it, the packed signs when the low-cost scheme dropped everything else.
struct Boundary {
    real: Option<Tensor>,
    bits: Option<BitTensor>,
    elems: usize,
}

/// Buffer lifetime class.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Lifetime {
    Persistent,
    Transient,
}

impl Lifetime {
    pub fn label(self) -> &'static str {
        match self {
            Lifetime::Persistent => "persistent",
            Lifetime::Transient => "transient",
        }
    }
}

/// One accounting row of a step trace or memory report.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub name: String,
    pub lifetime: Lifetime,
    pub dtype: StorageDtype,
    pub bytes: usize,
}

/// Matrix-multiply work counters, split by algorithm phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounts {
    pub forward: u64,
    pub backward_dx: u64,
    pub backward_dw: u64,
}

/// Record of one training step: loss/accuracy plus the per-class accounting
/// rows and per-phase peak live bytes under the scheme's storage formats.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub loss: f32,
    pub batch_acc: f32,
    pub rows: Vec<TraceRow>,
    pub total_bytes: usize,
    /// Peak accounting bytes during [forward, backward, update].
    pub phase_peaks: [usize; 3],
    pub macs: MacCounts,
}

#[derive(Default)]
struct TraceBuilder {
    enabled: bool,
    base_bits: usize,
    dy_bits: usize,
    x_bits: usize,
    // persistent classes
    x_elems: usize,
    w_elems: usize,
    dw_bits_total: usize,
    beta_elems: usize,
    stat_elems: usize,
    mom_elems: usize,
    // transient maxima (elements)
    fwd_peak_bytes: usize,
    shared_xy_elems: usize,
    dy_elems: usize,
    bwd_peak_bytes: usize,
    upd_extra_elems: usize,
    macs: MacCounts,
}

impl TraceBuilder {
    fn persistent_bytes(&self) -> usize {
        bits_to_bytes(self.x_elems * self.x_bits)
            + bits_to_bytes(self.w_elems * self.base_bits)
            + bits_to_bytes(self.dw_bits_total)
            + bits_to_bytes(2 * self.beta_elems * self.base_bits)
            + bits_to_bytes(self.stat_elems * self.base_bits)
            + bits_to_bytes(self.mom_elems * self.base_bits)
    }
}

fn bits_to_bytes(bits: usize) -> usize {
    (bits + 7) / 8
}

/// Executes one full training step (forward, loss, backward, update) and
/// advances the model in place. `trace` additionally produces the accounting
/// rows; it does not change any numeric result.
pub fn train_step(
    model: &mut Model,
    inputs: &Tensor,
    labels: &[u8],
    eta: f32,
    trace: bool,
) -> Result<StepTrace> {
    let scheme = model.config.scheme;
    let n_layers = model.layers.len();
    let mut tb = TraceBuilder {
        enabled: trace,
        base_bits: scheme.base.bits(),
        dy_bits: scheme.dy_dtype().bits(),
        x_bits: scheme.x_dtype().bits(),
        ..TraceBuilder::default()
    };

    // Forward ----------------------------------------------------------
    let mut bounds = forward_pass(model, inputs, &mut tb)?;

    let logits = bounds[n_layers]
        .real
        .as_ref()
        .expect("logits always retained");
    let (loss, dlogits, batch_acc) = softmax_xent(logits, labels);
    if !loss.is_finite() {
        let layer = bounds
            .iter()
            .position(|b| {
                b.real
                    .as_ref()
                    .map(|t| t.values().iter().any(|v| !v.is_finite()))
                    .unwrap_or(false)
            })
            .unwrap_or(n_layers)
            .saturating_sub(1);
        return Err(Error::NumericFailure {
            layer,
            phase: "forward".into(),
        });
    }

    // Backward ---------------------------------------------------------
    enum StashedDw {
        Raw(Tensor),
        Bits(BitTensor),
    }
    let mut stashes: Vec<Option<(StashedDw, Vec<f32>)>> = (0..n_layers).map(|_| None).collect();
    backward_pass(model, &mut bounds, dlogits, &mut tb, |l, dw, dbeta| {
        let stash = match scheme.dw {
            DwFormat::F32 => StashedDw::Raw(dw),
            DwFormat::F16 => {
                let mut t = dw;
                store_round(t.values_mut(), StorageDtype::F16);
                StashedDw::Raw(t)
            }
            DwFormat::Bool => StashedDw::Bits(sign_binarize(&dw)),
        };
        stashes[l] = Some((stash, dbeta));
    })?;

    // Update -----------------------------------------------------------
    for (l, entry) in stashes.into_iter().enumerate() {
        let (stash, dbeta) = entry.expect("backward visited every layer");
        let g_w = match stash {
            StashedDw::Raw(t) => t,
            StashedDw::Bits(bits) => {
                if tb.enabled {
                    tb.upd_extra_elems = tb.upd_extra_elems.max(bits.len());
                }
                attenuate_binary_gradient(&bits, model.layers[l].fan_in())
            }
        };
        apply_update(model, l, g_w.values(), &dbeta, eta);
    }

    // Assemble the trace -------------------------------------------------
    let mut rows = Vec::new();
    let mut total = 0usize;
    let mut phase_peaks = [0usize; 3];
    if tb.enabled {
        let p = tb.persistent_bytes();
        let shared = bits_to_bytes(tb.shared_xy_elems * tb.base_bits);
        let dyb = bits_to_bytes(tb.dy_elems * tb.dy_bits);
        rows = vec![
            TraceRow {
                name: "X".into(),
                lifetime: Lifetime::Persistent,
                dtype: model.x_dtype(),
                bytes: bits_to_bytes(tb.x_elems * tb.x_bits),
            },
            TraceRow {
                name: "dX_Y".into(),
                lifetime: Lifetime::Transient,
                dtype: scheme.base,
                bytes: shared,
            },
            TraceRow {
                name: "mu_sigma".into(),
                lifetime: Lifetime::Persistent,
                dtype: scheme.base,
                bytes: bits_to_bytes(tb.stat_elems * tb.base_bits),
            },
            TraceRow {
                name: "dY".into(),
                lifetime: Lifetime::Transient,
                dtype: scheme.dy_dtype(),
                bytes: dyb,
            },
            TraceRow {
                name: "W".into(),
                lifetime: Lifetime::Persistent,
                dtype: scheme.base,
                bytes: bits_to_bytes(tb.w_elems * tb.base_bits),
            },
            TraceRow {
                name: "dW".into(),
                lifetime: Lifetime::Persistent,
                dtype: scheme.dw_dtype(),
                bytes: bits_to_bytes(tb.dw_bits_total),
            },
            TraceRow {
                name: "beta_dbeta".into(),
                lifetime: Lifetime::Persistent,
                dtype: scheme.base,
                bytes: bits_to_bytes(2 * tb.beta_elems * tb.base_bits),
            },
            TraceRow {
                name: "momenta".into(),
                lifetime: Lifetime::Persistent,
                dtype: scheme.base,
                bytes: bits_to_bytes(tb.mom_elems * tb.base_bits),
            },
        ];
        total = p + shared + dyb;
        phase_peaks = [
            tb.fwd_peak_bytes,
            tb.bwd_peak_bytes,
            p + bits_to_bytes(tb.upd_extra_elems * tb.base_bits),
        ];
    }

    Ok(StepTrace {
        loss,
        batch_acc,
        rows,
        total_bytes: total,
        phase_peaks,
        macs: tb.macs,
    })
}

fn batch_of(model: &Model, inputs: &Tensor) -> usize {
    inputs.len() / model.config.topology.input.features()
}

/// Runs the forward pass, filling the boundary chain.
fn forward_pass(model: &mut Model, inputs: &Tensor, tb: &mut TraceBuilder) -> Result<Vec<Boundary>> {
    let scheme = model.config.scheme;
    let binarize = model.config.binarize;
    let n_layers = model.layers.len();
    let batch = batch_of(model, inputs);
    let retains = scheme.retains_hp_activations() || !binarize;

    if tb.enabled {
        for (l, d) in model.dims.iter().enumerate() {
            tb.x_elems += batch * d.in_elems;
            tb.w_elems += d.fan_in * d.fan_out;
            tb.dw_bits_total += d.fan_in * d.fan_out * scheme.dw_dtype().bits();
            tb.beta_elems += d.fan_out;
            let slots = if scheme.bn == BnVariant::L2 { 2 } else { 3 };
            tb.stat_elems += slots * d.fan_out;
            tb.mom_elems += model.config.optimizer.momenta_slots() * d.fan_in * d.fan_out;
            let _ = l;
        }
    }

    // boundary 0: the network input, reshaped for the first layer
    let first_real = reshape_for_layer(inputs.clone(), &model.layers[0], batch)?;
    let in_elems = first_real.len();
    let mut bounds = Vec::with_capacity(n_layers + 1);
    bounds.push(Boundary {
        real: Some(first_real),
        bits: None,
        elems: in_elems,
    });

    for l in 0..n_layers {
        let is_last = l == n_layers - 1;
        let x_out = {
            let bound = &bounds[l];
            let derived_bits;
            let input_view = if l == 0 || !binarize {
                LayerInput::Real(bound.real.as_ref().expect("real input"))
            } else if let Some(bits) = &bound.bits {
                LayerInput::Bits(bits)
            } else {
                derived_bits = sign_binarize(bound.real.as_ref().expect("retained activation"));
                LayerInput::Bits(&derived_bits)
            };
            if tb.enabled {
                let d = &model.dims[l];
                tb.macs.forward += (batch * d.y_rows * d.fan_in * d.fan_out) as u64;
                let y_elems = batch * d.y_rows * d.fan_out;
                // the final activation coexists with its pre-norm product
                let extra = if is_last { batch * d.out_elems } else { 0 };
                let peak =
                    tb.persistent_bytes() + bits_to_bytes((y_elems + extra) * tb.base_bits);
                tb.fwd_peak_bytes = tb.fwd_peak_bytes.max(peak);
                tb.shared_xy_elems = tb.shared_xy_elems.max(y_elems);
                if is_last {
                    tb.shared_xy_elems = tb.shared_xy_elems.max(batch * d.out_elems);
                }
            }
            match &mut model.layers[l] {
                Layer::Dense(layer) => layer.forward(&input_view, &scheme, binarize)?,
                Layer::Conv(layer) => layer.forward(&input_view, &scheme, binarize)?,
            }
        };
        let elems = x_out.len();
        let bound = if is_last {
            Boundary {
                real: Some(x_out),
                bits: None,
                elems,
            }
        } else if binarize && !retains {
            let bits = sign_binarize(&x_out);
            Boundary {
                real: None,
                bits: Some(bits),
                elems,
            }
        } else {
            Boundary {
                real: Some(x_out),
                bits: None,
                elems,
            }
        };
        bounds.push(bound);
    }
    Ok(bounds)
}

/// Reshapes an activation tensor to the shape the given layer consumes.
fn reshape_for_layer(t: Tensor, layer: &Layer, batch: usize) -> Result<Tensor> {
    match layer {
        Layer::Dense(_) => {
            let features = t.len() / batch;
            t.reshape(Shape::new(&[batch, features])?)
        }
        Layer::Conv(c) => {
            let rows = batch * c.geom.in_h * c.geom.in_w;
            t.reshape(Shape::new(&[rows, c.geom.in_c])?)
        }
    }
}

/// Reshapes a gradient to match the boundary it flows into.
fn reshape_like(t: Tensor, bound: &Boundary) -> Result<Tensor> {
    let (rows, cols) = if let Some(r) = &bound.real {
        (r.rows(), r.cols())
    } else if let Some(b) = &bound.bits {
        (b.rows(), b.cols())
    } else {
        return Ok(t);
    };
    t.reshape(Shape::new(&[rows, cols])?)
}

/// One layer's backward step, including the input-view and normalization
/// source plumbing.
fn layer_backward(
    model: &Model,
    bounds: &[Boundary],
    l: usize,
    dx_next: &Tensor,
    need_dx: bool,
    tb: &mut TraceBuilder,
) -> Result<LayerGrads> {
    let scheme = model.config.scheme;
    let binarize = model.config.binarize;
    let above = &bounds[l + 1];
    let below = &bounds[l];

    let bn_src = if let Some(bits) = &above.bits {
        BnBackSource::Bits(bits)
    } else {
        BnBackSource::Real(above.real.as_ref().expect("boundary retained"))
    };

    let derived_bits;
    let input_view = if l == 0 || !binarize {
        let real = below.real.as_ref().expect("real input");
        // dense layers after a conv boundary see the flattened view
        LayerInput::Real(real)
    } else if let Some(bits) = &below.bits {
        LayerInput::Bits(bits)
    } else {
        derived_bits = sign_binarize(below.real.as_ref().expect("retained activation"));
        LayerInput::Bits(&derived_bits)
    };

    if tb.enabled {
        let d = &model.dims[l];
        let batch = below.elems / d.in_elems;
        let macs = (batch * d.y_rows * d.fan_in * d.fan_out) as u64;
        if l > 0 {
            tb.macs.backward_dx += macs;
        }
        tb.macs.backward_dw += macs;
    }

    // Flatten mismatch: a dense layer whose input boundary is conv-shaped
    // needs the [batch x features] view for the matmuls.
    let reshaped_real;
    let reshaped_bits;
    let input_view = match (&model.layers[l], input_view) {
        (Layer::Dense(dl), LayerInput::Real(r)) if r.cols() != dl.fan_in => {
            let batch = r.len() / dl.fan_in;
            reshaped_real = r.clone().reshape(Shape::new(&[batch, dl.fan_in])?)?;
            LayerInput::Real(&reshaped_real)
        }
        (Layer::Dense(dl), LayerInput::Bits(b)) if b.cols() != dl.fan_in => {
            let batch = b.len() / dl.fan_in;
            reshaped_bits = b.reshape(batch, dl.fan_in);
            LayerInput::Bits(&reshaped_bits)
        }
        (_, v) => v,
    };

    match &model.layers[l] {
        Layer::Dense(layer) => {
            layer.backward(dx_next, &bn_src, &input_view, &scheme, binarize, need_dx)
        }
        Layer::Conv(layer) => {
            layer.backward(dx_next, &bn_src, &input_view, &scheme, binarize, need_dx)
        }
    }
}

fn apply_update(model: &mut Model, l: usize, g_w: &[f32], dbeta: &[f32], eta: f32) {
    let kind = model.config.optimizer;
    let base = model.config.scheme.base;
    let layer = &mut model.layers[l];
    let w = layer.weights_mut().values_mut();
    match kind {
        OptimizerKind::Adam { beta1, beta2, eps } => {
            adam_update(w, g_w, &mut model.opt_w[l], eta, beta1, beta2, eps, true, base);
        }
        OptimizerKind::SgdMomentum { momentum } => {
            sgd_momentum_update(w, g_w, &mut model.opt_w[l], eta, momentum, true, base);
        }
        OptimizerKind::Bop { gamma, tau } => {
            bop_update(w, g_w, &mut model.opt_w[l], gamma, tau);
        }
    }

    // The bias path never sees gradient binarization, and Bop (a pure
    // sign-flipper) cannot represent it: biases fall back to Adam there.
    let bn: &mut BnState = layer.bn_mut();
    let mut beta = bn.beta().to_vec();
    match kind {
        OptimizerKind::Adam { beta1, beta2, eps } => {
            adam_update(
                &mut beta,
                dbeta,
                &mut model.opt_b[l],
                eta,
                beta1,
                beta2,
                eps,
                false,
                base,
            );
        }
        OptimizerKind::SgdMomentum { momentum } => {
            sgd_momentum_update(
                &mut beta,
                dbeta,
                &mut model.opt_b[l],
                eta,
                momentum,
                false,
                base,
            );
        }
        OptimizerKind::Bop { .. } => {
            adam_update(
                &mut beta,
                dbeta,
                &mut model.opt_b[l],
                eta,
                0.9,
                0.999,
                1e-8,
                false,
                base,
            );
        }
    }
    bn.set_beta(&beta);
}

/// Forward-only top-1 accuracy over a dataset, batched; uses batch
/// statistics of each evaluation batch, deterministic given the data order.
pub fn evaluate(model: &mut Model, ds: &Dataset, batch: usize) -> Result<f32> {
    let n = ds.len();
    let mut correct = 0usize;
    let mut done = 0usize;
    while done < n {
        let take = batch.min(n - done);
        if take < 2 {
            break; // batch statistics need at least two samples
        }
        let idxs: Vec<usize> = (done..done + take).collect();
        let (inputs, labels) = ds.batch(&idxs);
        let mut tb = TraceBuilder::default();
        let bounds = forward_pass(model, &inputs, &mut tb)?;
        let logits = bounds.last().unwrap().real.as_ref().unwrap();
        let (_, _, acc) = softmax_xent(logits, &labels);
        correct += (acc * take as f32).round() as usize;
        done += take;
    }
    Ok(correct as f32 / done.max(1) as f32)
}

/// Unquantized weight-gradient snapshot for the density diagnostics: runs a
/// forward/backward pass in f32 with no gradient quantization (the network
/// itself is unchanged) and returns the mean and population sd of the given
/// layer's raw dW. The model's trainable state is untouched.
pub fn gradient_snapshot(
    model: &mut Model,
    inputs: &Tensor,
    labels: &[u8],
    layer: usize,
) -> Result<(f32, f32)> {
    let saved_scheme = model.config.scheme;
    model.config.scheme = Scheme {
        dw: DwFormat::F32,
        dy: crate::layers::DyFormat::F32,
        bn: saved_scheme.bn,
        base: StorageDtype::F32,
    };
    let result = weight_gradients(model, inputs, labels);
    model.config.scheme = saved_scheme;
    let (_, grads) = result?;
    let dw = grads
        .into_iter()
        .nth(layer)
        .ok_or_else(|| Error::InvalidConfig(format!("no layer {layer}")))?;
    let n = dw.len() as f64;
    let mean: f64 = dw.values().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 = dw
        .values()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok((mean as f32, var.sqrt() as f32))
}

/// Runs forward, loss and backward under the current scheme without touching
/// any trainable state, returning the loss and every layer's raw weight
/// gradient (before the dW storage format is applied). Normalization and
/// lowering caches are scratch and get overwritten by the next pass.
pub fn weight_gradients(
    model: &mut Model,
    inputs: &Tensor,
    labels: &[u8],
) -> Result<(f32, Vec<Tensor>)> {
    let n_layers = model.layers.len();
    let mut tb = TraceBuilder::default();
    let mut bounds = forward_pass(model, inputs, &mut tb)?;
    let logits = bounds.last().unwrap().real.as_ref().unwrap();
    let (loss, dlogits, _) = softmax_xent(logits, labels);
    let mut grads: Vec<Option<Tensor>> = (0..n_layers).map(|_| None).collect();
    backward_pass(model, &mut bounds, dlogits, &mut tb, |l, dw, _| {
        grads[l] = Some(dw);
    })?;
    Ok((
        loss,
        grads.into_iter().map(|g| g.expect("every layer")).collect(),
    ))
}

/// The shared backward sweep: normalization backward, gradient quantization,
/// matrix products, straight-through masking and boundary release, handing
/// each layer's raw (dW, dbeta) to `sink`.
fn backward_pass(
    model: &Model,
    bounds: &mut [Boundary],
    dlogits: Tensor,
    tb: &mut TraceBuilder,
    mut sink: impl FnMut(usize, Tensor, Vec<f32>),
) -> Result<()> {
    let n_layers = model.layers.len();
    let binarize = model.config.binarize;
    let batch = bounds[0].elems / model.dims[0].in_elems;
    let mut dx = dlogits;
    for l in (0..n_layers).rev() {
        let grads = layer_backward(model, bounds, l, &dx, l > 0, tb)?;
        let LayerGrads {
            dx_input,
            dw,
            dbeta,
        } = grads;

        if tb.enabled {
            let dy_elems = model.dims[l].y_rows * batch * model.dims[l].fan_out;
            let out_elems = dx_input.as_ref().map(|t| t.len()).unwrap_or(0);
            let peak = tb.persistent_bytes()
                + bits_to_bytes(dy_elems * tb.dy_bits)
                + bits_to_bytes(dx.len().max(out_elems) * tb.base_bits);
            tb.bwd_peak_bytes = tb.bwd_peak_bytes.max(peak);
            tb.shared_xy_elems = tb.shared_xy_elems.max(out_elems);
            tb.dy_elems = tb.dy_elems.max(dy_elems);
        }

        sink(l, dw, dbeta);

        // This layer's output activation has now served its last reader
        // (the normalization backward above); release it.
        bounds[l + 1].real = None;
        bounds[l + 1].bits = None;

        if let Some(mut next_dx) = dx_input {
            // straight-through estimation: the pass-through is masked where
            // the pre-binarization magnitude exceeds 1, which requires the
            // retained high-precision activation; the all-binary scheme has
            // none and uses the plain pass-through
            if binarize {
                if let Some(x_real) = &bounds[l].real {
                    ste_mask(&mut next_dx, x_real);
                }
            }
            // boundary below may be a conv activation: reshape to its shape
            dx = reshape_like(next_dx, &bounds[l])?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Epoch loop
// ---------------------------------------------------------------------------

use crate::optim::LrSchedule;

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub schedule: LrSchedule,
    /// Fraction of the training set split off (after a seeded shuffle) as the
    /// development set driving the schedule.
    pub dev_fraction: f32,
    /// Collect unquantized gradient statistics of this layer on a fixed
    /// development batch every epoch.
    pub density_layer: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 1,
            schedule: LrSchedule::Constant,
            dev_fraction: 0.1,
            density_layer: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: f32,
    pub dev_acc: f32,
    pub test_acc: f32,
    pub loss: f32,
    pub eta: f32,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_test: f32,
    /// Per-epoch (mean, sd) of the monitored layer's unquantized dW.
    pub density: Vec<(f32, f32)>,
}

/// Runs the epoch loop: seeded shuffling, minibatch steps, per-epoch dev and
/// test evaluation, schedule updates and best-test tracking.
pub fn train(
    model: &mut Model,
    rng: &mut ChaCha8Rng,
    train_set: &Dataset,
    test_set: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainHistory> {
    let b = model.config.batch_size;
    if train_set.features != model.config.topology.input.features() {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} features, topology expects {}",
            train_set.features,
            model.config.topology.input.features()
        )));
    }

    // development split: seeded shuffle, last fraction held out
    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, rng);
    let dev_n = ((n as f32 * opts.dev_fraction) as usize).max(b.min(n));
    let (train_idx, dev_idx) = order.split_at(n - dev_n);
    let mut train_idx = train_idx.to_vec();
    let dev_idx = dev_idx.to_vec();
    let density_batch: Vec<usize> = dev_idx.iter().take(b).copied().collect();

    let mut history = TrainHistory::default();
    let mut eta = model.config.eta0;
    let mut schedule = opts.schedule.clone();

    let dev0 = eval_subset(model, train_set, &dev_idx, b)?;
    let test0 = evaluate(model, test_set, b)?;
    history.best_test = test0;
    history.records.push(EpochRecord {
        epoch: 0,
        train_acc: 0.0,
        dev_acc: dev0,
        test_acc: test0,
        loss: 0.0,
        eta,
    });

    for epoch in 1..=opts.epochs {
        shuffle(&mut train_idx, rng);
        let mut loss_sum = 0.0f64;
        let mut acc_sum = 0.0f64;
        let mut steps = 0usize;
        for chunk in train_idx.chunks_exact(b) {
            let (inputs, labels) = train_set.batch(chunk);
            let st = train_step(model, &inputs, &labels, eta, false)?;
            loss_sum += st.loss as f64;
            acc_sum += st.batch_acc as f64;
            steps += 1;
        }
        let dev_acc = eval_subset(model, train_set, &dev_idx, b)?;
        let test_acc = evaluate(model, test_set, b)?;
        history.best_test = history.best_test.max(test_acc);

        if let Some(layer) = opts.density_layer {
            let (inputs, labels) = train_set.batch(&density_batch);
            history
                .density
                .push(gradient_snapshot(model, &inputs, &labels, layer)?);
        }

        eta = schedule.step(eta, dev_acc, epoch);
        history.records.push(EpochRecord {
            epoch,
            train_acc: (acc_sum / steps.max(1) as f64) as f32,
            dev_acc,
            test_acc,
            loss: (loss_sum / steps.max(1) as f64) as f32,
            eta,
        });
    }
    Ok(history)
}

fn eval_subset(model: &mut Model, ds: &Dataset, idxs: &[usize], batch: usize) -> Result<f32> {
    let mut correct = 0.0f64;
    let mut done = 0usize;
    for chunk in idxs.chunks(batch) {
        if chunk.len() < 2 {
            break;
        }
        let (inputs, labels) = ds.batch(chunk);
        let mut tb = TraceBuilder::default();
        let bounds = forward_pass(model, &inputs, &mut tb)?;
        let logits = bounds.last().unwrap().real.as_ref().unwrap();
        let (_, _, acc) = softmax_xent(logits, &labels);
        correct += acc as f64 * chunk.len() as f64;
        done += chunk.len();
    }
    Ok((correct / done.max(1) as f64) as f32)
}

/// Fisher-Yates with the run's seeded generator.
fn shuffle(idxs: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..idxs.len()).rev() {
        let j = rng.gen_range(0..=i);
        idxs.swap(i, j);
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"BNLW";
const CKPT_VERSION: u16 = 1;

/// Serializes the trainable state: config digest, latent weights (f32),
/// biases, optimizer momenta and the RNG state.
pub fn save_checkpoint(model: &Model, rng: &ChaCha8Rng, eta: f32, digest: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(digest.len() as u32).to_le_bytes());
    out.extend_from_slice(digest);
    out.extend_from_slice(&eta.to_le_bytes());
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for (l, layer) in model.layers.iter().enumerate() {
        let w = layer.weights();
        out.extend_from_slice(&(w.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(w.cols() as u32).to_le_bytes());
        for &v in w.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in layer.bn().beta() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for slot in [&model.opt_w[l], &model.opt_b[l]] {
            out.extend_from_slice(&(slot.m.len() as u32).to_le_bytes());
            for &v in &slot.m {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(slot.v.len() as u32).to_le_bytes());
            for &v in &slot.v {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&slot.t.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Restores trainable state into a freshly built model. Returns the stored
/// learning rate and RNG. The stored config digest must match.
pub fn load_checkpoint(
    model: &mut Model,
    bytes: &[u8],
    expect_digest: &[u8],
) -> Result<(f32, ChaCha8Rng)> {
    use rand::SeedableRng;
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    if r.u16()? != CKPT_VERSION {
        return Err(Error::Checkpoint("unsupported version".into()));
    }
    let dlen = r.u32()? as usize;
    let digest = r.take(dlen)?;
    if digest != expect_digest {
        return Err(Error::Checkpoint(
            "config digest does not match checkpoint".into(),
        ));
    }
    let eta = r.f32()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = r.u128()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);
    let n_layers = r.u32()? as usize;
    if n_layers != model.layers.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {n_layers} layers, model has {}",
            model.layers.len()
        )));
    }
    for l in 0..n_layers {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        {
            let w = model.layers[l].weights_mut();
            if w.rows() != rows || w.cols() != cols {
                return Err(Error::Checkpoint(format!(
                    "layer {l} weight shape mismatch: {rows}x{cols}"
                )));
            }
        }
        let w_vals = r.f32s(rows * cols)?;
        model.layers[l]
            .weights_mut()
            .values_mut()
            .copy_from_slice(&w_vals);
        let beta = r.f32s(cols)?;
        model.layers[l].bn_mut().set_beta(&beta);
        for slot_idx in 0..2 {
            let m_len = r.u32()? as usize;
            let m = r.f32s(m_len)?;
            let v_len = r.u32()? as usize;
            let v = r.f32s(v_len)?;
            let t = r.u64()?;
            let slot = if slot_idx == 0 {
                &mut model.opt_w[l]
            } else {
                &mut model.opt_b[l]
            };
            if slot.m.len() != m_len || slot.v.len() != v_len {
                return Err(Error::Checkpoint("optimizer state shape mismatch".into()));
            }
            slot.m = m;
            slot.v = v;
            slot.t = t;
        }
    }
    Ok((eta, rng))
}

/// Builds a model plus its seeded RNG from a config.
pub fn build_model(config: crate::model::ModelConfig) -> Result<(Model, ChaCha8Rng)> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = Model::build(config, &mut rng)?;
    Ok((model, rng))
}

/// Convenience re-export of the topology zoo for callers.
pub fn topology_by_name(name: &str) -> Option<Topology> {
    Topology::by_name(name)
}

/// Memory accounting helper shared with the analysis module: bytes of a
/// buffer with `elems` elements stored as `dtype`.
pub fn class_bytes(elems: usize, dtype: StorageDtype) -> usize {
    storage_bytes(elems, dtype)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batchnorm::BN_EPS;
    use crate::model::{InputSpec, LayerSpec, ModelConfig};
    use rand::SeedableRng;

    fn toy_topology(dims: &[usize], features: usize) -> Topology {
        Topology {
            input: InputSpec::Flat { features },
            layers: dims.iter().map(|&out| LayerSpec::Dense { out }).collect(),
            name: "toy".into(),
        }
    }

    /// Gaussian blobs around per-class centers, clipped to [-1, 1].
    fn blob_dataset(per_class: usize, classes: usize, features: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f32>> = (0..classes)
            .map(|_| {
                (0..features)
                    .map(|_| if rng.gen_bool(0.5) { 0.7 } else { -0.7 })
                    .collect()
            })
            .collect();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..per_class {
            for c in 0..classes {
                for j in 0..features {
                    let v: f32 = centers[c][j] + rng.gen_range(-0.25..0.25);
                    images.push(v.clamp(-1.0, 1.0));
                }
                labels.push(c as u8);
            }
        }
        Dataset {
            features,
            classes,
            images,
            labels,
        }
    }

    #[test]
    fn convex_case_loss_decreases() {
        // single linear layer, no binarization, l2 normalization, f32
        let topo = toy_topology(&[2], 3);
        let cfg = ModelConfig {
            eta0: 0.01,
            batch_size: 4,
            seed: 3,
            ..ModelConfig::new(topo, Scheme::standard())
        }
        .reference_nonbinary();
        let (mut model, _) = build_model(cfg).unwrap();
        let inputs =
            Tensor::matrix(4, 3, vec![1.0, 0.0, -1.0, -1.0, 0.5, 1.0, 0.3, -0.8, 0.2, -0.6, 0.9, -0.4])
                .unwrap();
        let labels = vec![0u8, 1, 0, 1];
        let mut prev = f32::INFINITY;
        for step in 0..100 {
            let st = train_step(&mut model, &inputs, &labels, 0.01, false).unwrap();
            assert!(
                st.loss <= prev + 1e-6,
                "loss rose at step {step}: {} -> {}",
                prev,
                st.loss
            );
            prev = st.loss;
        }
        assert!(prev < 0.5, "did not descend far enough: {prev}");
    }

    /// f64 shadow of a standard-scheme step on a dense stack (Algorithm 1
    /// with l2 normalization, softmax cross-entropy and Adam), used as the
    /// hand-trace oracle.
    struct Shadow {
        w: Vec<Vec<f64>>, // [fan_in x fan_out]
        beta: Vec<Vec<f64>>,
        dims: Vec<(usize, usize)>,
    }

    impl Shadow {
        fn of(model: &Model) -> Shadow {
            Shadow {
                w: model
                    .layers
                    .iter()
                    .map(|l| l.weights().values().iter().map(|&v| v as f64).collect())
                    .collect(),
                beta: model
                    .layers
                    .iter()
                    .map(|l| l.bn().beta().iter().map(|&v| v as f64).collect())
                    .collect(),
                dims: model
                    .layers
                    .iter()
                    .map(|l| (l.weights().rows(), l.weights().cols()))
                    .collect(),
            }
        }

        fn sgn(v: f64) -> f64 {
            if v >= 0.0 {
                1.0
            } else {
                -1.0
            }
        }

        /// One full standard step; returns per-layer (dW, dbeta) and loss.
        fn step(
            &self,
            x0: &[f64],
            b: usize,
            labels: &[u8],
            binarize: bool,
        ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, f64) {
            let n_layers = self.w.len();
            let mut acts = vec![x0.to_vec()]; // boundary activations
            let mut stats = Vec::new();
            for l in 0..n_layers {
                let (n, m) = self.dims[l];
                let a = &acts[l];
                let a_hat: Vec<f64> = if l == 0 || !binarize {
                    a.clone()
                } else {
                    a.iter().map(|&v| Self::sgn(v)).collect()
                };
                let w_hat: Vec<f64> = if binarize {
                    self.w[l].iter().map(|&v| Self::sgn(v)).collect()
                } else {
                    self.w[l].clone()
                };
                let mut y = vec![0.0f64; b * m];
                for r in 0..b {
                    for k in 0..n {
                        for j in 0..m {
                            y[r * m + j] += a_hat[r * n + k] * w_hat[k * m + j];
                        }
                    }
                }
                // l2 normalization
                let mut mu = vec![0.0f64; m];
                let mut sd = vec![0.0f64; m];
                for j in 0..m {
                    for r in 0..b {
                        mu[j] += y[r * m + j];
                    }
                    mu[j] /= b as f64;
                    for r in 0..b {
                        sd[j] += (y[r * m + j] - mu[j]).powi(2);
                    }
                    sd[j] = (sd[j] / b as f64).sqrt() + BN_EPS as f64;
                }
                let mut x = vec![0.0f64; b * m];
                for r in 0..b {
                    for j in 0..m {
                        x[r * m + j] = (y[r * m + j] - mu[j]) / sd[j] + self.beta[l][j];
                    }
                }
                stats.push(sd);
                acts.push(x);
            }
            // softmax cross-entropy
            let classes = self.dims[n_layers - 1].1;
            let logits = &acts[n_layers];
            let mut dx = vec![0.0f64; b * classes];
            let mut loss = 0.0f64;
            for r in 0..b {
                let row = &logits[r * classes..(r + 1) * classes];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                loss += z.ln() - (row[labels[r] as usize] - max);
                for j in 0..classes {
                    let p = (row[j] - max).exp() / z;
                    dx[r * classes + j] =
                        (p - if j == labels[r] as usize { 1.0 } else { 0.0 }) / b as f64;
                }
            }
            loss /= b as f64;

            let mut dws = vec![Vec::new(); n_layers];
            let mut dbetas = vec![Vec::new(); n_layers];
            for l in (0..n_layers).rev() {
                let (n, m) = self.dims[l];
                let sd = &stats[l];
                let x = &acts[l + 1];
                // normalization backward with centered x
                let mut mean_v = vec![0.0f64; m];
                let mut mean_vx = vec![0.0f64; m];
                let mut dbeta = vec![0.0f64; m];
                for j in 0..m {
                    for r in 0..b {
                        let v = dx[r * m + j] / sd[j];
                        let xc = x[r * m + j] - self.beta[l][j];
                        mean_v[j] += v;
                        mean_vx[j] += v * xc;
                        dbeta[j] += dx[r * m + j];
                    }
                    mean_v[j] /= b as f64;
                    mean_vx[j] /= b as f64;
                }
                let mut dy = vec![0.0f64; b * m];
                for r in 0..b {
                    for j in 0..m {
                        let v = dx[r * m + j] / sd[j];
                        let xc = x[r * m + j] - self.beta[l][j];
                        dy[r * m + j] = v - mean_v[j] - mean_vx[j] * xc;
                    }
                }
                // matmul gradients
                let a = &acts[l];
                let a_hat: Vec<f64> = if l == 0 || !binarize {
                    a.clone()
                } else {
                    a.iter().map(|&v| Self::sgn(v)).collect()
                };
                let w_hat: Vec<f64> = if binarize {
                    self.w[l].iter().map(|&v| Self::sgn(v)).collect()
                } else {
                    self.w[l].clone()
                };
                let mut dw = vec![0.0f64; n * m];
                for r in 0..b {
                    for k in 0..n {
                        for j in 0..m {
                            dw[k * m + j] += a_hat[r * n + k] * dy[r * m + j];
                        }
                    }
                }
                dws[l] = dw;
                dbetas[l] = dbeta;
                if l > 0 {
                    let mut dprev = vec![0.0f64; b * n];
                    for r in 0..b {
                        for k in 0..n {
                            for j in 0..m {
                                dprev[r * n + k] += dy[r * m + j] * w_hat[k * m + j];
                            }
                        }
                    }
                    if binarize {
                        for (g, &v) in dprev.iter_mut().zip(acts[l].iter()) {
                            if v.abs() > 1.0 {
                                *g = 0.0;
                            }
                        }
                    }
                    dx = dprev;
                }
            }
            (dws, dbetas, loss)
        }
    }

    #[test]
    fn standard_step_matches_hand_trace() {
        // 3-layer MLP on a 2-sample toy batch: one engine step vs an
        // independent f64 trace of the standard algorithm including Adam
        let topo = toy_topology(&[3, 3, 2], 2);
        let cfg = ModelConfig {
            batch_size: 2,
            seed: 11,
            ..ModelConfig::new(topo, Scheme::standard())
        };
        let (mut model, _) = build_model(cfg).unwrap();
        let shadow = Shadow::of(&model);
        let w_before: Vec<Vec<f32>> = model
            .layers
            .iter()
            .map(|l| l.weights().values().to_vec())
            .collect();

        let inputs = Tensor::matrix(2, 2, vec![0.8, -0.3, -0.6, 0.9]).unwrap();
        let labels = vec![0u8, 1];
        let x0: Vec<f64> = inputs.values().iter().map(|&v| v as f64).collect();
        let (dws, dbetas, shadow_loss) = shadow.step(&x0, 2, &labels, true);

        let st = train_step(&mut model, &inputs, &labels, 0.01, false).unwrap();
        assert!((st.loss as f64 - shadow_loss).abs() < 1e-4);

        // expected Adam first step: w' = clip(w - eta * g/(|g| + eps'))
        for l in 0..3 {
            let w_after = model.layers[l].weights().values();
            for (i, (&before, &after)) in w_before[l].iter().zip(w_after).enumerate() {
                let g = dws[l][i];
                let m_hat = g; // t=1 bias correction cancels
                let v_hat = g * g;
                let want = (before as f64 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8)).clamp(-1.0, 1.0);
                assert!(
                    (after as f64 - want).abs() < 2e-4,
                    "layer {l} w[{i}]: got {after}, want {want}"
                );
            }
            let beta_after = model.layers[l].bn().beta();
            for (j, &bv) in beta_after.iter().enumerate() {
                let g = dbetas[l][j];
                let want = -0.01 * g / ((g * g).sqrt() + 1e-8);
                assert!(
                    (bv as f64 - want).abs() < 2e-4,
                    "layer {l} beta[{j}]: got {bv}, want {want}"
                );
            }
        }
    }

    #[test]
    fn nonbinary_gradients_match_finite_differences() {
        // reference mode on a 2-layer toy: engine dW vs f64-shadow central
        // differences of the loss
        let topo = toy_topology(&[4, 3], 5);
        let cfg = ModelConfig {
            batch_size: 3,
            seed: 7,
            ..ModelConfig::new(topo, Scheme::standard())
        }
        .reference_nonbinary();
        let (mut model, _) = build_model(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let inputs = Tensor::matrix(
            3,
            5,
            (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let labels = vec![0u8, 2, 1];
        let x0: Vec<f64> = inputs.values().iter().map(|&v| v as f64).collect();

        let (_, grads) = weight_gradients(&mut model, &inputs, &labels).unwrap();
        let shadow = Shadow::of(&model);
        let h = 1e-5;
        for l in 0..2 {
            for i in 0..shadow.w[l].len() {
                let mut sp = Shadow {
                    w: shadow.w.clone(),
                    beta: shadow.beta.clone(),
                    dims: shadow.dims.clone(),
                };
                sp.w[l][i] += h;
                let (_, _, lp) = sp.step(&x0, 3, &labels, false);
                sp.w[l][i] -= 2.0 * h;
                let (_, _, lm) = sp.step(&x0, 3, &labels, false);
                let fd = (lp - lm) / (2.0 * h);
                let got = grads[l].values()[i] as f64;
                assert!(
                    (got - fd).abs() <= 1e-5 + 1e-4 * fd.abs(),
                    "layer {l} w[{i}]: engine {got}, fd {fd}"
                );
            }
        }
    }

    #[test]
    fn proposed_trace_reports_binary_activations() {
        let topo = toy_topology(&[8, 4], 6);
        let cfg = ModelConfig {
            batch_size: 4,
            seed: 5,
            ..ModelConfig::new(topo, Scheme::proposed())
        };
        let (mut model, _) = build_model(cfg).unwrap();
        let ds = blob_dataset(4, 4, 6, 1);
        let (inputs, labels) = ds.batch(&[0, 1, 2, 3]);
        let st = train_step(&mut model, &inputs, &labels, 0.001, true).unwrap();
        let x_row = st.rows.iter().find(|r| r.name == "X").unwrap();
        assert_eq!(x_row.dtype, StorageDtype::Bool1);
        let dw_row = st.rows.iter().find(|r| r.name == "dW").unwrap();
        assert_eq!(dw_row.dtype, StorageDtype::Bool1);
        let dy_row = st.rows.iter().find(|r| r.name == "dY").unwrap();
        assert_eq!(dy_row.dtype, StorageDtype::Po2(5));
        assert!(st.total_bytes > 0);
        assert!(st.phase_peaks.iter().all(|&p| p > 0));
        assert!(st.macs.forward > 0 && st.macs.backward_dw > 0);
    }

    #[test]
    fn evaluate_untrained_near_chance_and_deterministic() {
        let topo = toy_topology(&[32, 10], 12);
        let cfg = ModelConfig {
            batch_size: 50,
            seed: 2,
            ..ModelConfig::new(topo, Scheme::standard())
        };
        let (mut model, _) = build_model(cfg).unwrap();
        // pure noise with balanced labels: an untrained model has nothing
        // to exploit, so accuracy sits at chance
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 2000;
        let ds = Dataset {
            features: 12,
            classes: 10,
            images: (0..n * 12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            labels: (0..n).map(|i| (i % 10) as u8).collect(),
        };
        let a1 = evaluate(&mut model, &ds, 50).unwrap();
        let a2 = evaluate(&mut model, &ds, 50).unwrap();
        assert_eq!(a1, a2);
        assert!((a1 - 0.1).abs() < 0.03, "untrained accuracy {a1}");
    }

    #[test]
    fn separable_toy_converges_to_full_accuracy() {
        let topo = toy_topology(&[16, 4], 8);
        let cfg = ModelConfig {
            batch_size: 20,
            seed: 4,
            eta0: 0.01,
            ..ModelConfig::new(topo, Scheme::standard())
        }
        .reference_nonbinary();
        let (mut model, mut rng) = build_model(cfg).unwrap();
        let ds = blob_dataset(40, 4, 8, 3);
        let opts = TrainOptions {
            epochs: 30,
            ..TrainOptions::default()
        };
        let hist = train(&mut model, &mut rng, &ds, &ds, &opts).unwrap();
        assert_eq!(hist.best_test, 1.0, "history: {:?}", hist.records.last());
    }

    #[test]
    fn training_is_bit_reproducible() {
        let ds = blob_dataset(30, 3, 6, 17);
        let run = || {
            let topo = toy_topology(&[8, 3], 6);
            let cfg = ModelConfig {
                batch_size: 10,
                seed: 33,
                ..ModelConfig::new(topo, Scheme::proposed())
            };
            let (mut model, mut rng) = build_model(cfg).unwrap();
            let opts = TrainOptions {
                epochs: 5,
                density_layer: Some(1),
                ..TrainOptions::default()
            };
            train(&mut model, &mut rng, &ds, &ds, &opts).unwrap()
        };
        let h1 = run();
        let h2 = run();
        assert_eq!(h1.records, h2.records);
        assert_eq!(h1.density, h2.density);
        assert!(h1.density.iter().all(|(m, s)| m.is_finite() && s.is_finite()));
    }

    #[test]
    fn zero_epochs_returns_initial_evaluation_only() {
        let ds = blob_dataset(20, 2, 4, 8);
        let topo = toy_topology(&[4, 2], 4);
        let cfg = ModelConfig {
            batch_size: 8,
            seed: 1,
            ..ModelConfig::new(topo, Scheme::standard())
        };
        let (mut model, mut rng) = build_model(cfg).unwrap();
        let opts = TrainOptions {
            epochs: 0,
            ..TrainOptions::default()
        };
        let hist = train(&mut model, &mut rng, &ds, &ds, &opts).unwrap();
        assert_eq!(hist.records.len(), 1);
        assert_eq!(hist.records[0].epoch, 0);
    }

    #[test]
    fn nan_loss_aborts_with_layer_diagnostic() {
        let topo = toy_topology(&[4, 2], 4);
        let cfg = ModelConfig {
            batch_size: 4,
            seed: 6,
            ..ModelConfig::new(topo, Scheme::standard())
        };
        let (mut model, _) = build_model(cfg).unwrap();
        let ds = blob_dataset(4, 2, 4, 2);
        let (inputs, labels) = ds.batch(&[0, 1, 2, 3]);
        // binarization launders NaN activations between hidden layers, so
        // the loss can only blow up through the final layer's output path
        model.layers[1].bn_mut().set_beta(&[f32::NAN, 0.0]);
        match train_step(&mut model, &inputs, &labels, 0.01, false) {
            Err(Error::NumericFailure { layer, phase }) => {
                assert_eq!(layer, 1, "NaN surfaces in the last layer's output");
                assert_eq!(phase, "forward");
            }
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_roundtrip_restores_state() {
        let ds = blob_dataset(20, 3, 5, 12);
        let topo = toy_topology(&[6, 3], 5);
        let cfg = ModelConfig {
            batch_size: 10,
            seed: 19,
            ..ModelConfig::new(topo.clone(), Scheme::proposed())
        };
        let (mut model, mut rng) = build_model(cfg.clone()).unwrap();
        let opts = TrainOptions {
            epochs: 2,
            ..TrainOptions::default()
        };
        train(&mut model, &mut rng, &ds, &ds, &opts).unwrap();
        let digest = [7u8; 32];
        let blob = save_checkpoint(&model, &rng, 0.0005, &digest);

        let (mut fresh, _) = build_model(cfg).unwrap();
        let (eta, restored_rng) = load_checkpoint(&mut fresh, &blob, &digest).unwrap();
        assert_eq!(eta, 0.0005);
        assert_eq!(restored_rng.get_word_pos(), rng.get_word_pos());
        for (a, b) in model.layers.iter().zip(&fresh.layers) {
            assert_eq!(a.weights().values(), b.weights().values());
            assert_eq!(a.bn().beta(), b.bn().beta());
        }
        for (a, b) in model.opt_w.iter().zip(&fresh.opt_w) {
            assert_eq!(a.m, b.m);
            assert_eq!(a.v, b.v);
            assert_eq!(a.t, b.t);
        }

        // digest mismatch is refused
        let (mut other, _) = build_model(ModelConfig {
            batch_size: 10,
            seed: 19,
            ..ModelConfig::new(topo, Scheme::proposed())
        })
        .unwrap();
        assert!(matches!(
            load_checkpoint(&mut other, &blob, &[8u8; 32]),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn proposed_run_keeps_no_hp_activations() {
        // the forward boundary chain of the low-cost scheme holds packed
        // signs only (plus the real input and logits)
        let topo = toy_topology(&[8, 8, 3], 6);
        let cfg = ModelConfig {
            batch_size: 6,
            seed: 14,
            ..ModelConfig::new(topo, Scheme::proposed())
        };
        let (mut model, _) = build_model(cfg).unwrap();
        let ds = blob_dataset(6, 3, 6, 5);
        let (inputs, labels) = ds.batch(&[0, 1, 2, 3, 4, 5]);
        let mut tb = TraceBuilder::default();
        let bounds = forward_pass(&mut model, &inputs, &mut tb).unwrap();
        assert!(bounds[0].real.is_some() && bounds[0].bits.is_none());
        for b in &bounds[1..bounds.len() - 1] {
            assert!(b.real.is_none(), "hidden boundary retained a real tensor");
            assert!(b.bits.is_some());
        }
        assert!(bounds.last().unwrap().real.is_some());
        let _ = labels;
    }
}
