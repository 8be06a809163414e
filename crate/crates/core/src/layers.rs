//! Binary dense and convolutional layers with straight-through estimation.
//!
//! Activations are matrices `[rows x channels]`: dense layers use
//! `[batch x features]`, convolutional data is channel-last
//! `[batch*h*w x c]`, which makes a conv-to-dense boundary a plain reshape.
//! Convolutions lower to matrix multiplies through im2col so the binary and
//! power-of-two kernels apply to them unchanged.

use crate::batchnorm::{
    bn_l1_backward_bnn, bn_l1_backward_plain, bn_l1_forward, bn_l2_backward, bn_l2_forward,
    BnState,
};
use crate::error::{Error, Result};
use crate::quant::{
    bit_tn_po2_matmul, blockfp_dequantize, blockfp_quantize, po2_bit_matmul_pret, po2_dequantize,
    po2_quantize, sign_binarize, xnor_matmul_pret, BitTensor, Po2Tensor,
};
use crate::tensor::{storage_bytes, store_round, Shape, StorageDtype, Tensor};

/// Weight-gradient storage format.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DwFormat {
    F32,
    F16,
    Bool,
}

/// Activation-gradient storage format.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DyFormat {
    F32,
    F16,
    Po2(u8),
    BlockFp(u8),
}

/// Batch-normalization variant.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BnVariant {
    L2,
    L1Plain,
    L1Bnn,
}

/// The data-representation flags of a training scheme. The named presets
/// are `standard` (all float32, l2 normalization) and `proposed` (binary
/// weight gradients, po2_5 activation gradients, binary-activation l1
/// normalization, float16 for everything else).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Scheme {
    pub dw: DwFormat,
    pub dy: DyFormat,
    pub bn: BnVariant,
    pub base: StorageDtype,
}

impl Scheme {
    pub fn standard() -> Self {
        Scheme {
            dw: DwFormat::F32,
            dy: DyFormat::F32,
            bn: BnVariant::L2,
            base: StorageDtype::F32,
        }
    }

    pub fn proposed() -> Self {
        Scheme {
            dw: DwFormat::Bool,
            dy: DyFormat::Po2(5),
            bn: BnVariant::L1Bnn,
            base: StorageDtype::F16,
        }
    }

    /// Whether high-precision activations are retained between forward and
    /// backward. Only the binary-activation l1 variant can drop them.
    pub fn retains_hp_activations(&self) -> bool {
        self.bn != BnVariant::L1Bnn
    }

    /// Accounting dtype of the retained activation class.
    pub fn x_dtype(&self) -> StorageDtype {
        if self.retains_hp_activations() {
            self.base
        } else {
            StorageDtype::Bool1
        }
    }

    pub fn dy_dtype(&self) -> StorageDtype {
        match self.dy {
            DyFormat::F32 => StorageDtype::F32,
            DyFormat::F16 => StorageDtype::F16,
            DyFormat::Po2(k) => StorageDtype::Po2(k),
            DyFormat::BlockFp(k) => StorageDtype::BlockFp(k),
        }
    }

    pub fn dw_dtype(&self) -> StorageDtype {
        match self.dw {
            DwFormat::F32 => StorageDtype::F32,
            DwFormat::F16 => StorageDtype::F16,
            DwFormat::Bool => StorageDtype::Bool1,
        }
    }
}

/// Layer input view: real values for the first layer (and the non-binary
/// reference mode), packed signs everywhere else.
pub enum LayerInput<'a> {
    Real(&'a Tensor),
    Bits(&'a BitTensor),
}

impl LayerInput<'_> {
    pub fn rows(&self) -> usize {
        match self {
            LayerInput::Real(t) => t.rows(),
            LayerInput::Bits(b) => b.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            LayerInput::Real(t) => t.cols(),
            LayerInput::Bits(b) => b.cols(),
        }
    }
}

/// Source for the normalization backward: the high-precision output when the
/// scheme retains it, otherwise its packed signs (alpha lives in `BnState`).
pub enum BnBackSource<'a> {
    Real(&'a Tensor),
    Bits(&'a BitTensor),
}

/// Quantized activation gradient, ready for the backward matrix multiplies.
pub enum DyQuant {
    Raw(Tensor),
    Po2(Po2Tensor),
}

impl DyQuant {
    pub fn rows(&self) -> usize {
        match self {
            DyQuant::Raw(t) => t.rows(),
            DyQuant::Po2(p) => p.rows(),
        }
    }
}

/// Applies the scheme's activation-gradient quantization. An all-zero
/// gradient short-circuits to raw zeros: the po2/block formats have no
/// defined bias for a zero tensor and every downstream product is zero.
pub fn quantize_dy(dy: Tensor, scheme: &Scheme) -> Result<DyQuant> {
    let all_zero = dy.values().iter().all(|&v| v == 0.0);
    Ok(match scheme.dy {
        DyFormat::F32 => DyQuant::Raw(dy),
        DyFormat::F16 => {
            let mut t = dy;
            store_round(t.values_mut(), StorageDtype::F16);
            DyQuant::Raw(t)
        }
        DyFormat::Po2(k) if !all_zero => DyQuant::Po2(po2_quantize(&dy, k)?),
        DyFormat::BlockFp(k) if !all_zero => {
            DyQuant::Raw(blockfp_dequantize(&blockfp_quantize(&dy, k)?))
        }
        _ => DyQuant::Raw(dy),
    })
}

/// Zeroes gradient entries where the pre-binarization activation magnitude
/// exceeds one: the straight-through estimator's pass-through window.
pub fn ste_mask(dx: &mut Tensor, x: &Tensor) {
    for (g, &v) in dx.values_mut().iter_mut().zip(x.values()) {
        if v.abs() > 1.0 {
            *g = 0.0;
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution lowering
// ---------------------------------------------------------------------------

/// Static geometry of a convolution over channel-last activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    /// Symmetric zero padding ("same" uses (k-1)/2 for odd kernels).
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Patch length: kh * kw * in_c.
    pub fn k(&self) -> usize {
        self.kh * self.kw * self.in_c
    }

    pub fn in_rows_per_sample(&self) -> usize {
        self.in_h * self.in_w
    }

    pub fn out_rows_per_sample(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn check_input(&self, rows: usize, cols: usize) -> Result<usize> {
        if cols != self.in_c || rows % self.in_rows_per_sample() != 0 {
            return Err(Error::ShapeMismatch(format!(
                "conv expects [B*{}*{} x {}], got [{rows} x {cols}]",
                self.in_h, self.in_w, self.in_c
            )));
        }
        Ok(rows / self.in_rows_per_sample())
    }
}

/// Lowers `[b*h*w x c]` activations to patch rows `[b*oh*ow x kh*kw*c]`.
/// Out-of-bounds taps read zero.
pub fn im2col(x: &Tensor, g: &ConvGeom) -> Result<Tensor> {
    let b = g.check_input(x.rows(), x.cols())?;
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.k());
    let mut out = vec![0.0f32; b * oh * ow * k];
    let xv = x.values();
    let mut row = 0usize;
    for bi in 0..b {
        let base = bi * g.in_h * g.in_w;
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut out[row * k..(row + 1) * k];
                let mut t = 0usize;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && iy < g.in_h as isize && ix >= 0 && ix < g.in_w as isize {
                            let src = (base + iy as usize * g.in_w + ix as usize) * g.in_c;
                            dst[t..t + g.in_c].copy_from_slice(&xv[src..src + g.in_c]);
                        }
                        t += g.in_c;
                    }
                }
                row += 1;
            }
        }
    }
    Tensor::matrix(b * oh * ow, k, out)
}

/// Bit-domain lowering. Padding taps binarize to +1 (sgn(0) := +1), the
/// deliberate convention for binary layers with zero padding.
pub fn im2col_bits(x: &BitTensor, g: &ConvGeom) -> Result<BitTensor> {
    let b = g.check_input(x.rows(), x.cols())?;
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.k());
    let mut vals = vec![1.0f32; b * oh * ow * k];
    let mut row = 0usize;
    for bi in 0..b {
        let base = bi * g.in_h * g.in_w;
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = row * k;
                let mut t = 0usize;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && iy < g.in_h as isize && ix >= 0 && ix < g.in_w as isize {
                            let src = base + iy as usize * g.in_w + ix as usize;
                            for c in 0..g.in_c {
                                vals[dst + t + c] = x.get(src, c);
                            }
                        }
                        t += g.in_c;
                    }
                }
                row += 1;
            }
        }
    }
    Ok(BitTensor::from_values(b * oh * ow, k, &vals))
}

/// Scatter-accumulates patch-row gradients back to `[b*h*w x c]`. Padding
/// contributions are dropped.
pub fn col2im(dcols: &Tensor, g: &ConvGeom, batch: usize) -> Result<Tensor> {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.k());
    if dcols.rows() != batch * oh * ow || dcols.cols() != k {
        return Err(Error::ShapeMismatch(format!(
            "col2im expects [{} x {k}], got [{} x {}]",
            batch * oh * ow,
            dcols.rows(),
            dcols.cols()
        )));
    }
    let mut out = vec![0.0f32; batch * g.in_h * g.in_w * g.in_c];
    let dv = dcols.values();
    let mut row = 0usize;
    for bi in 0..batch {
        let base = bi * g.in_h * g.in_w;
        for oy in 0..oh {
            for ox in 0..ow {
                let src = &dv[row * k..(row + 1) * k];
                let mut t = 0usize;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && iy < g.in_h as isize && ix >= 0 && ix < g.in_w as isize {
                            let dst = (base + iy as usize * g.in_w + ix as usize) * g.in_c;
                            for c in 0..g.in_c {
                                out[dst + c] += src[t + c];
                            }
                        }
                        t += g.in_c;
                    }
                }
                row += 1;
            }
        }
    }
    Tensor::matrix(batch * g.in_h * g.in_w, g.in_c, out)
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

/// Non-overlapping max-pool geometry; the window must divide the spatial dims.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub ph: usize,
    pub pw: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        self.h / self.ph
    }

    pub fn out_w(&self) -> usize {
        self.w / self.pw
    }

    fn check(&self, rows: usize, cols: usize) -> Result<usize> {
        if self.h % self.ph != 0 || self.w % self.pw != 0 {
            return Err(Error::ShapeMismatch(format!(
                "pool window {}x{} does not divide {}x{}",
                self.ph, self.pw, self.h, self.w
            )));
        }
        if cols != self.c || rows % (self.h * self.w) != 0 {
            return Err(Error::ShapeMismatch(format!(
                "pool expects [B*{}*{} x {}], got [{rows} x {cols}]",
                self.h, self.w, self.c
            )));
        }
        Ok(rows / (self.h * self.w))
    }
}

/// Max per window; returns the in-window argmax (first index on ties) for
/// gradient routing.
pub fn maxpool_forward(x: &Tensor, g: &PoolGeom) -> Result<(Tensor, Vec<u8>)> {
    let b = g.check(x.rows(), x.cols())?;
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0f32; b * oh * ow * g.c];
    let mut idx = vec![0u8; b * oh * ow * g.c];
    let xv = x.values();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = (bi * oh + oy) * ow + ox;
                for c in 0..g.c {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_at = 0u8;
                    for py in 0..g.ph {
                        for px in 0..g.pw {
                            let iy = oy * g.ph + py;
                            let ix = ox * g.pw + px;
                            let v = xv[((bi * g.h + iy) * g.w + ix) * g.c + c];
                            if v > best {
                                best = v;
                                best_at = (py * g.pw + px) as u8;
                            }
                        }
                    }
                    out[orow * g.c + c] = best;
                    idx[orow * g.c + c] = best_at;
                }
            }
        }
    }
    Ok((Tensor::matrix(b * oh * ow, g.c, out)?, idx))
}

/// Pooling over packed signs: the window max of +-1 values with the same
/// first-index tie rule, no unpacking to floats.
pub fn maxpool_forward_bits(x: &BitTensor, g: &PoolGeom) -> Result<(BitTensor, Vec<u8>)> {
    let b = g.check(x.rows(), x.cols())?;
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut vals = vec![0.0f32; b * oh * ow * g.c];
    let mut idx = vec![0u8; b * oh * ow * g.c];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = (bi * oh + oy) * ow + ox;
                for c in 0..g.c {
                    let mut best_at = None;
                    for py in 0..g.ph {
                        for px in 0..g.pw {
                            let iy = oy * g.ph + py;
                            let ix = ox * g.pw + px;
                            if x.bit((bi * g.h + iy) * g.w + ix, c) {
                                best_at = Some((py * g.pw + px) as u8);
                                break;
                            }
                        }
                        if best_at.is_some() {
                            break;
                        }
                    }
                    vals[orow * g.c + c] = if best_at.is_some() { 1.0 } else { -1.0 };
                    idx[orow * g.c + c] = best_at.unwrap_or(0);
                }
            }
        }
    }
    Ok((BitTensor::from_values(b * oh * ow, g.c, &vals), idx))
}

/// Routes gradients to the recorded argmax positions.
pub fn maxpool_backward(dy: &Tensor, idx: &[u8], g: &PoolGeom) -> Result<Tensor> {
    let (oh, ow) = (g.out_h(), g.out_w());
    if dy.cols() != g.c || dy.rows() % (oh * ow) != 0 || dy.len() != idx.len() {
        return Err(Error::ShapeMismatch("pool backward shapes".into()));
    }
    let b = dy.rows() / (oh * ow);
    let mut out = vec![0.0f32; b * g.h * g.w * g.c];
    let dv = dy.values();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = (bi * oh + oy) * ow + ox;
                for c in 0..g.c {
                    let at = idx[orow * g.c + c] as usize;
                    let (py, px) = (at / g.pw, at % g.pw);
                    let iy = oy * g.ph + py;
                    let ix = ox * g.pw + px;
                    out[((bi * g.h + iy) * g.w + ix) * g.c + c] += dv[orow * g.c + c];
                }
            }
        }
    }
    Tensor::matrix(b * g.h * g.w, g.c, out)
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Gradients a layer hands back to the engine: raw weight gradient (the
/// scheme's dW storage format is applied by the caller), the bias gradient
/// and the gradient w.r.t. the layer input (already through the STE's
/// identity; the caller applies the magnitude mask when it retains the
/// pre-binarization activation). `dx_input` is absent for the first layer,
/// which has nothing below it.
pub struct LayerGrads {
    pub dx_input: Option<Tensor>,
    pub dw: Tensor,
    pub dbeta: Vec<f32>,
}

/// Fully connected binary layer: latent weights in [-1, 1], binarized on
/// every use; normalization folded in.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub w: Tensor,
    pub bn: BnState,
    pub fan_in: usize,
}

impl DenseLayer {
    pub fn new(w: Tensor, bn: BnState) -> Self {
        let fan_in = w.rows();
        DenseLayer { w, bn, fan_in }
    }

    pub fn out_features(&self) -> usize {
        self.w.cols()
    }

    /// Matrix product then normalization. `binarize` selects the XNOR path
    /// over packed signs; real inputs (first layer, reference mode) use the
    /// float path.
    pub fn forward(&mut self, input: &LayerInput, scheme: &Scheme, binarize: bool) -> Result<Tensor> {
        let mut y = match (input, binarize) {
            (LayerInput::Bits(x), true) => {
                let wt_bits = sign_binarize(&self.w).transpose();
                xnor_matmul_pret(x, &wt_bits)?
            }
            (LayerInput::Real(x), true) => x.matmul(&sign_binarize(&self.w).decode())?,
            (LayerInput::Real(x), false) => x.matmul(&self.w)?,
            (LayerInput::Bits(_), false) => {
                return Err(Error::InvalidConfig(
                    "non-binary mode received packed input".into(),
                ))
            }
        };
        store_round(y.values_mut(), scheme.base);
        let mut x_out = match scheme.bn {
            BnVariant::L2 => bn_l2_forward(&y, &mut self.bn)?,
            BnVariant::L1Plain | BnVariant::L1Bnn => bn_l1_forward(&y, &mut self.bn)?,
        };
        store_round(x_out.values_mut(), scheme.base);
        Ok(x_out)
    }

    /// Backward through normalization and both matrix products. `need_dx`
    /// skips the input-gradient product for the lowest layer.
    pub fn backward(
        &self,
        dx_next: &Tensor,
        bn_src: &BnBackSource,
        input: &LayerInput,
        scheme: &Scheme,
        binarize: bool,
        need_dx: bool,
    ) -> Result<LayerGrads> {
        let (dy, dbeta) = bn_backward(&self.bn, dx_next, bn_src, scheme)?;
        let dyq = quantize_dy(dy, scheme)?;
        let dx_input = if need_dx {
            Some(grad_wrt_input(&dyq, &self.w, scheme, binarize)?)
        } else {
            None
        };
        let dw = grad_wrt_weights(&dyq, input, binarize)?;
        Ok(LayerGrads {
            dx_input,
            dw,
            dbeta,
        })
    }
}

/// Convolutional binary layer lowered to the dense kernels via im2col.
///
/// `pool_before_norm` pools the raw conv output ahead of normalization (the
/// BinaryNet arrangement); `input_pool` pools the already-binarized input
/// signs before lowering (the CNV arrangement, where pooling follows
/// binarization).
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub w: Tensor,
    pub bn: BnState,
    pub geom: ConvGeom,
    pub out_c: usize,
    pub pool_before_norm: Option<(usize, usize)>,
    pub input_pool: Option<(usize, usize)>,
    cache: ConvCache,
}

#[derive(Clone, Debug, Default)]
struct ConvCache {
    batch: usize,
    pre_pool_idx: Option<Vec<u8>>,
    input_pool_idx: Option<Vec<u8>>,
}

impl ConvLayer {
    pub fn new(
        w: Tensor,
        bn: BnState,
        geom: ConvGeom,
        out_c: usize,
        pool_before_norm: Option<(usize, usize)>,
        input_pool: Option<(usize, usize)>,
    ) -> Self {
        assert_eq!(w.rows(), effective_geom(&geom, input_pool).k());
        assert_eq!(w.cols(), out_c);
        ConvLayer {
            w,
            bn,
            geom,
            out_c,
            pool_before_norm,
            input_pool,
            cache: ConvCache::default(),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.rows()
    }

    /// Geometry the matmul actually sees (input pooling shrinks it).
    pub fn conv_geom(&self) -> ConvGeom {
        effective_geom(&self.geom, self.input_pool)
    }

    fn input_pool_geom(&self) -> Option<PoolGeom> {
        self.input_pool.map(|(ph, pw)| PoolGeom {
            h: self.geom.in_h,
            w: self.geom.in_w,
            c: self.geom.in_c,
            ph,
            pw,
        })
    }

    fn pre_norm_pool_geom(&self) -> Option<PoolGeom> {
        let g = self.conv_geom();
        self.pool_before_norm.map(|(ph, pw)| PoolGeom {
            h: g.out_h(),
            w: g.out_w(),
            c: self.out_c,
            ph,
            pw,
        })
    }

    /// Rows of the normalized output per sample.
    pub fn out_rows_per_sample(&self) -> usize {
        let g = self.conv_geom();
        match self.pre_norm_pool_geom() {
            Some(p) => p.out_h() * p.out_w(),
            None => g.out_rows_per_sample(),
        }
    }

    pub fn forward(&mut self, input: &LayerInput, scheme: &Scheme, binarize: bool) -> Result<Tensor> {
        let g = self.conv_geom();
        self.cache = ConvCache::default();
        let mut y = match (input, binarize) {
            (LayerInput::Bits(x), true) => {
                let (cols, idx) = match self.input_pool_geom() {
                    Some(pg) => {
                        let (pooled, idx) = maxpool_forward_bits(x, &pg)?;
                        (im2col_bits(&pooled, &g)?, Some(idx))
                    }
                    None => (im2col_bits(x, &g)?, None),
                };
                self.cache.input_pool_idx = idx;
                self.cache.batch = cols.rows() / g.out_rows_per_sample();
                let wt_bits = sign_binarize(&self.w).transpose();
                xnor_matmul_pret(&cols, &wt_bits)?
            }
            (LayerInput::Real(x), true) | (LayerInput::Real(x), false) => {
                let (cols, idx) = match self.input_pool_geom() {
                    Some(pg) => {
                        let (pooled, idx) = maxpool_forward(x, &pg)?;
                        (im2col(&pooled, &g)?, Some(idx))
                    }
                    None => (im2col(x, &g)?, None),
                };
                self.cache.input_pool_idx = idx;
                self.cache.batch = cols.rows() / g.out_rows_per_sample();
                if binarize {
                    cols.matmul(&sign_binarize(&self.w).decode())?
                } else {
                    cols.matmul(&self.w)?
                }
            }
            (LayerInput::Bits(_), false) => {
                return Err(Error::InvalidConfig(
                    "non-binary mode received packed input".into(),
                ))
            }
        };
        store_round(y.values_mut(), scheme.base);
        let y = match self.pre_norm_pool_geom() {
            Some(pg) => {
                let (pooled, idx) = maxpool_forward(&y, &pg)?;
                self.cache.pre_pool_idx = Some(idx);
                pooled
            }
            None => y,
        };
        let mut x_out = match scheme.bn {
            BnVariant::L2 => bn_l2_forward(&y, &mut self.bn)?,
            BnVariant::L1Plain | BnVariant::L1Bnn => bn_l1_forward(&y, &mut self.bn)?,
        };
        store_round(x_out.values_mut(), scheme.base);
        Ok(x_out)
    }

    pub fn backward(
        &self,
        dx_next: &Tensor,
        bn_src: &BnBackSource,
        input: &LayerInput,
        scheme: &Scheme,
        binarize: bool,
        need_dx: bool,
    ) -> Result<LayerGrads> {
        if self.cache.batch == 0 {
            return Err(Error::MissingForwardState(
                "conv backward before forward".into(),
            ));
        }
        let g = self.conv_geom();
        let batch = self.cache.batch;
        let (dy_post_norm, dbeta) = bn_backward(&self.bn, dx_next, bn_src, scheme)?;
        let dy = match self.pre_norm_pool_geom() {
            Some(pg) => {
                let idx = self
                    .cache
                    .pre_pool_idx
                    .as_ref()
                    .ok_or_else(|| Error::MissingForwardState("pool indices missing".into()))?;
                maxpool_backward(&dy_post_norm, idx, &pg)?
            }
            None => dy_post_norm,
        };
        let dyq = quantize_dy(dy, scheme)?;

        // Re-lower the cached input for the weight-gradient product.
        let dw = match (input, binarize) {
            (LayerInput::Bits(x), true) => {
                let cols = match self.input_pool_geom() {
                    Some(pg) => {
                        let (pooled, _) = maxpool_forward_bits(x, &pg)?;
                        im2col_bits(&pooled, &g)?
                    }
                    None => im2col_bits(x, &g)?,
                };
                grad_wrt_weights(&dyq, &LayerInput::Bits(&cols), true)?
            }
            (LayerInput::Real(x), _) => {
                let cols = match self.input_pool_geom() {
                    Some(pg) => {
                        let (pooled, _) = maxpool_forward(x, &pg)?;
                        im2col(&pooled, &g)?
                    }
                    None => im2col(x, &g)?,
                };
                grad_wrt_weights(&dyq, &LayerInput::Real(&cols), binarize)?
            }
            (LayerInput::Bits(_), false) => {
                return Err(Error::InvalidConfig(
                    "non-binary mode received packed input".into(),
                ))
            }
        };

        let dx_input = if need_dx {
            let dcols = grad_wrt_input(&dyq, &self.w, scheme, binarize)?;
            let dx_pooled = col2im(&dcols, &g, batch)?;
            Some(match self.input_pool_geom() {
                Some(pg) => {
                    let idx = self.cache.input_pool_idx.as_ref().ok_or_else(|| {
                        Error::MissingForwardState("input pool indices missing".into())
                    })?;
                    maxpool_backward(&dx_pooled, idx, &pg)?
                }
                None => dx_pooled,
            })
        } else {
            None
        };
        Ok(LayerGrads {
            dx_input,
            dw,
            dbeta,
        })
    }
}

fn effective_geom(geom: &ConvGeom, input_pool: Option<(usize, usize)>) -> ConvGeom {
    match input_pool {
        Some((ph, pw)) => ConvGeom {
            in_h: geom.in_h / ph,
            in_w: geom.in_w / pw,
            ..*geom
        },
        None => *geom,
    }
}

fn bn_backward(
    bn: &BnState,
    dx_next: &Tensor,
    src: &BnBackSource,
    scheme: &Scheme,
) -> Result<(Tensor, Vec<f32>)> {
    match (scheme.bn, src) {
        (BnVariant::L2, BnBackSource::Real(x)) => bn_l2_backward(dx_next, bn, x),
        (BnVariant::L1Plain, BnBackSource::Real(x)) => bn_l1_backward_plain(dx_next, bn, x),
        (BnVariant::L1Bnn, BnBackSource::Bits(xh)) => bn_l1_backward_bnn(dx_next, bn, xh),
        // The final layer's output is live for the loss either way; the
        // binary-activation variant binarizes it on the fly there.
        (BnVariant::L1Bnn, BnBackSource::Real(x)) => {
            bn_l1_backward_bnn(dx_next, bn, &sign_binarize(x))
        }
        _ => Err(Error::InvalidConfig(
            "normalization variant needs the high-precision activation".into(),
        )),
    }
}

/// dX = dY W^T through the scheme's kernel.
fn grad_wrt_input(
    dyq: &DyQuant,
    w: &Tensor,
    scheme: &Scheme,
    binarize: bool,
) -> Result<Tensor> {
    let mut out = match (dyq, binarize) {
        (DyQuant::Po2(g), true) => po2_bit_matmul_pret(g, &sign_binarize(w))?,
        (DyQuant::Po2(g), false) => po2_dequantize(g).matmul_nt(w)?,
        (DyQuant::Raw(t), true) => t.matmul_nt(&sign_binarize(w).decode())?,
        (DyQuant::Raw(t), false) => t.matmul_nt(w)?,
    };
    store_round(out.values_mut(), scheme.base);
    Ok(out)
}

/// dW = X^T dY through the scheme's kernel. The result is raw; the caller
/// applies the scheme's dW storage format.
fn grad_wrt_weights(dyq: &DyQuant, input: &LayerInput, binarize: bool) -> Result<Tensor> {
    match (dyq, input, binarize) {
        (DyQuant::Po2(g), LayerInput::Bits(x), true) => bit_tn_po2_matmul(x, g),
        (DyQuant::Po2(g), LayerInput::Real(x), _) => x.matmul_tn(&po2_dequantize(g)),
        (DyQuant::Raw(t), LayerInput::Bits(x), true) => x.decode().matmul_tn(t),
        (DyQuant::Raw(t), LayerInput::Real(x), _) => x.matmul_tn(t),
        (_, LayerInput::Bits(_), false) => Err(Error::InvalidConfig(
            "non-binary mode received packed input".into(),
        )),
    }
}

/// Accounting bytes of one boundary activation under a scheme.
pub fn boundary_bytes(elements: usize, scheme: &Scheme, binarized: bool) -> usize {
    if binarized && !scheme.retains_hp_activations() {
        storage_bytes(elements, StorageDtype::Bool1)
    } else {
        storage_bytes(elements, scheme.base)
    }
}

/// Reshape helper for conv-to-dense boundaries: `[b*h*w x c]` rows regroup to
/// `[b x h*w*c]` without moving data.
pub fn flatten_to_batch(t: Tensor, batch: usize) -> Result<Tensor> {
    let features = t.len() / batch;
    t.reshape(Shape::new(&[batch, features])?)
}
