//! Channel-wise batch normalization, three ways.
//!
//! All variants operate on `[rows x channels]` activations where `rows` is
//! batch (times spatial positions for lowered convolutions) and normalize
//! each channel with batch statistics. No trainable scaling factor exists;
//! binarization follows immediately in a BNN so it would be irrelevant.
//!
//! The `x` appearing in every backward formula is the centered normalized
//! value (the forward output minus beta): the beta shift must not leak into
//! the denominator gradient, and the l2 variant only matches autodiff of
//! standard batch norm under this reading.

use crate::error::{Error, Result};
use crate::quant::BitTensor;
use crate::tensor::{f16_round, StorageDtype, Tensor};

/// Denominator floor. The algorithms would divide by zero on constant
/// channels without it.
pub const BN_EPS: f32 = 1e-5;

/// Per-layer normalization state: trainable bias plus the per-channel
/// statistics cached by the latest forward pass.
#[derive(Clone, Debug)]
pub struct BnState {
    beta: Vec<f32>,
    mu: Vec<f32>,
    /// Effective divisor: store-rounded statistic plus `BN_EPS`.
    denom: Vec<f32>,
    /// Mean magnitude of the forward output, kept only by the l1 variant.
    alpha: Option<Vec<f32>>,
    store: StorageDtype,
    channels: usize,
    rows: usize,
}

impl BnState {
    /// `store` controls rounding applied to cached statistics and the bias
    /// (f32 keeps them exact, f16 rounds on store).
    pub fn new(channels: usize, store: StorageDtype) -> Self {
        BnState {
            beta: vec![0.0; channels],
            mu: vec![0.0; channels],
            denom: vec![0.0; channels],
            alpha: None,
            store,
            channels,
            rows: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn beta(&self) -> &[f32] {
        &self.beta
    }

    pub fn set_beta(&mut self, beta: &[f32]) {
        assert_eq!(beta.len(), self.channels);
        let rounded: Vec<f32> = beta.iter().map(|&b| self.round(b)).collect();
        self.beta = rounded;
    }

    pub fn mu(&self) -> &[f32] {
        &self.mu
    }

    pub fn denom(&self) -> &[f32] {
        &self.denom
    }

    pub fn alpha(&self) -> Option<&[f32]> {
        self.alpha.as_deref()
    }

    pub fn store(&self) -> StorageDtype {
        self.store
    }

    fn round(&self, v: f32) -> f32 {
        match self.store {
            StorageDtype::F16 => f16_round(v),
            _ => v,
        }
    }

    fn check_forward_ran(&self, t: &Tensor) -> Result<()> {
        if self.rows == 0 {
            return Err(Error::MissingForwardState(
                "batch norm backward before forward".into(),
            ));
        }
        if t.rows() != self.rows || t.cols() != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "batch norm cached state is {}x{}, got {}x{}",
                self.rows,
                self.channels,
                t.rows(),
                t.cols()
            )));
        }
        Ok(())
    }
}

fn check_input(y: &Tensor, s: &BnState) -> Result<()> {
    if y.cols() != s.channels {
        return Err(Error::ShapeMismatch(format!(
            "batch norm expects {} channels, got {}",
            s.channels,
            y.cols()
        )));
    }
    if y.rows() < 2 {
        return Err(Error::BatchTooSmall(y.rows()));
    }
    Ok(())
}

/// Standard l2 forward: x = (y - mean(y)) / (std(y) + eps) + beta, with
/// population statistics per channel.
pub fn bn_l2_forward(y: &Tensor, s: &mut BnState) -> Result<Tensor> {
    forward_impl(y, s, false)
}

/// l1 forward: x = (y - mean(y)) / (||y - mean(y)||_1 / B + eps) + beta.
/// Also caches the per-channel mean magnitude alpha = ||x||_1 / B used by
/// the binary-activation backward.
pub fn bn_l1_forward(y: &Tensor, s: &mut BnState) -> Result<Tensor> {
    forward_impl(y, s, true)
}

fn forward_impl(y: &Tensor, s: &mut BnState, l1: bool) -> Result<Tensor> {
    check_input(y, s)?;
    let (b, m) = (y.rows(), y.cols());
    let inv_b = 1.0 / b as f32;
    let yv = y.values();

    let mut mu = vec![0.0f32; m];
    for r in 0..b {
        let row = &yv[r * m..(r + 1) * m];
        for (acc, &v) in mu.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in mu.iter_mut() {
        *v = s.round(*v * inv_b);
    }

    let mut stat = vec![0.0f32; m];
    for r in 0..b {
        let row = &yv[r * m..(r + 1) * m];
        for (j, &v) in row.iter().enumerate() {
            let c = v - mu[j];
            stat[j] += if l1 { c.abs() } else { c * c };
        }
    }
    let mut denom = vec![0.0f32; m];
    for j in 0..m {
        let raw = if l1 {
            stat[j] * inv_b
        } else {
            (stat[j] * inv_b).sqrt()
        };
        denom[j] = s.round(raw) + BN_EPS;
    }

    let mut out = vec![0.0f32; b * m];
    for r in 0..b {
        let row = &yv[r * m..(r + 1) * m];
        let o = &mut out[r * m..(r + 1) * m];
        for j in 0..m {
            o[j] = (row[j] - mu[j]) / denom[j] + s.beta[j];
        }
    }

    if l1 {
        let mut alpha = vec![0.0f32; m];
        for r in 0..b {
            let row = &out[r * m..(r + 1) * m];
            for (a, &v) in alpha.iter_mut().zip(row) {
                *a += v.abs();
            }
        }
        for a in alpha.iter_mut() {
            *a = s.round(*a * inv_b);
        }
        s.alpha = Some(alpha);
    } else {
        s.alpha = None;
    }

    s.mu = mu;
    s.denom = denom;
    s.rows = b;
    Tensor::matrix(b, m, out)
}

/// Per-channel column sums of the incoming gradient: the beta gradient,
/// identical for every variant.
fn dbeta_of(dx: &Tensor) -> Vec<f32> {
    let (b, m) = (dx.rows(), dx.cols());
    let mut out = vec![0.0f32; m];
    for r in 0..b {
        let row = &dx.values()[r * m..(r + 1) * m];
        for (acc, &v) in out.iter_mut().zip(row) {
            *acc += v;
        }
    }
    out
}

/// Shared backward skeleton: dy = v - mean(v) - mean(v .* core) .* mult
/// with v = dx / denom, computed per channel.
fn backward_impl(
    dx: &Tensor,
    s: &BnState,
    core: impl Fn(usize, usize) -> f32,
    mult: impl Fn(usize, usize) -> f32,
) -> Result<(Tensor, Vec<f32>)> {
    let (b, m) = (dx.rows(), dx.cols());
    let inv_b = 1.0 / b as f32;
    let dxv = dx.values();

    let mut v = vec![0.0f32; b * m];
    for r in 0..b {
        for j in 0..m {
            v[r * m + j] = dxv[r * m + j] / s.denom[j];
        }
    }
    let mut mean_v = vec![0.0f32; m];
    let mut mean_vc = vec![0.0f32; m];
    for r in 0..b {
        for j in 0..m {
            mean_v[j] += v[r * m + j];
            mean_vc[j] += v[r * m + j] * core(r, j);
        }
    }
    for j in 0..m {
        mean_v[j] *= inv_b;
        mean_vc[j] *= inv_b;
    }
    let mut dy = vec![0.0f32; b * m];
    for r in 0..b {
        for j in 0..m {
            dy[r * m + j] = v[r * m + j] - mean_v[j] - mean_vc[j] * mult(r, j);
        }
    }
    Ok((Tensor::matrix(b, m, dy)?, dbeta_of(dx)))
}

/// l2 backward: v = dx/denom; dy = v - mean(v) - mean(v .* xc) .* xc where
/// xc is the centered normalized activation (forward output minus beta).
pub fn bn_l2_backward(dx: &Tensor, s: &BnState, x_out: &Tensor) -> Result<(Tensor, Vec<f32>)> {
    s.check_forward_ran(dx)?;
    s.check_forward_ran(x_out)?;
    let m = s.channels;
    let xv = x_out.values();
    let xc = move |r: usize, j: usize| xv[r * m + j] - s.beta[j];
    backward_impl(dx, s, xc, xc)
}

/// Plain l1 backward: dy = v - mean(v) - mean(v .* xc) .* sign(xc). Still
/// requires the high-precision activation; it is the intermediate form
/// between the l2 backward and the binary-activation one.
pub fn bn_l1_backward_plain(
    dx: &Tensor,
    s: &BnState,
    x_out: &Tensor,
) -> Result<(Tensor, Vec<f32>)> {
    s.check_forward_ran(dx)?;
    s.check_forward_ran(x_out)?;
    let m = s.channels;
    let xv = x_out.values();
    let xc = move |r: usize, j: usize| xv[r * m + j] - s.beta[j];
    let sign = move |r: usize, j: usize| {
        if xv[r * m + j] - s.beta[j] >= 0.0 {
            1.0
        } else {
            -1.0
        }
    };
    backward_impl(dx, s, xc, sign)
}

/// Binary-activation l1 backward: dy = v - mean(v) - mean(v .* (x_hat *
/// alpha)) .* x_hat. Reads only the packed signs and the cached per-channel
/// mean magnitude; no high-precision activation buffer is reachable from
/// this signature.
pub fn bn_l1_backward_bnn(
    dx: &Tensor,
    s: &BnState,
    x_hat: &BitTensor,
) -> Result<(Tensor, Vec<f32>)> {
    s.check_forward_ran(dx)?;
    if x_hat.rows() != s.rows || x_hat.cols() != s.channels {
        return Err(Error::ShapeMismatch(format!(
            "x_hat is {}x{}, state is {}x{}",
            x_hat.rows(),
            x_hat.cols(),
            s.rows,
            s.channels
        )));
    }
    let alpha = s
        .alpha
        .as_deref()
        .ok_or_else(|| Error::MissingForwardState("alpha missing: run bn_l1_forward".into()))?;
    let core = move |r: usize, j: usize| x_hat.get(r, j) * alpha[j];
    let mult = move |r: usize, j: usize| x_hat.get(r, j);
    backward_impl(dx, s, core, mult)
}
