//! Quantization codecs and bit-level kernels.
//!
//! Covers sign binarization into packed bit tensors, k-bit power-of-two
//! encoding with a layer-wise bias, 5-bit block floating point, the
//! XNOR-popcount matrix multiply used in forward propagation and the
//! integer shift-accumulate multiply used for power-of-two gradients.

use crate::error::{Error, Result};
use crate::tensor::{storage_bytes, Shape, StorageDtype, Tensor};

/// Packed +-1 tensor, one bit per element. Bit 1 decodes to +1, bit 0 to -1.
///
/// Rows are word-aligned internally for kernel speed; the serialization
/// contract (`to_bytes`) is row-major, LSB-first within a byte, with no
/// padding between rows.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BitTensor {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl BitTensor {
    pub fn from_values(rows: usize, cols: usize, values: &[f32]) -> Self {
        assert_eq!(rows * cols, values.len(), "bit tensor element count");
        let wpr = (cols + 63) / 64;
        let mut words = vec![0u64; rows * wpr];
        for r in 0..rows {
            for c in 0..cols {
                if values[r * cols + c] >= 0.0 {
                    words[r * wpr + c / 64] |= 1u64 << (c % 64);
                }
            }
        }
        BitTensor {
            rows,
            cols,
            words_per_row: wpr,
            words,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Shape {
        Shape::of(&[self.rows, self.cols])
    }

    /// Accounting bytes: contiguous 1-bit packing.
    pub fn storage_bytes(&self) -> usize {
        storage_bytes(self.len(), StorageDtype::Bool1)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        if (self.words[r * self.words_per_row + c / 64] >> (c % 64)) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    #[inline]
    pub fn bit(&self, r: usize, c: usize) -> bool {
        (self.words[r * self.words_per_row + c / 64] >> (c % 64)) & 1 == 1
    }

    pub fn row_words(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn decode(&self) -> Tensor {
        let mut out = Vec::with_capacity(self.len());
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(self.get(r, c));
            }
        }
        Tensor::matrix(self.rows, self.cols, out).expect("bit tensor decode")
    }

    pub fn transpose(&self) -> BitTensor {
        let wpr = (self.rows + 63) / 64;
        let mut words = vec![0u64; self.cols * wpr];
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.bit(r, c) {
                    words[c * wpr + r / 64] |= 1u64 << (r % 64);
                }
            }
        }
        BitTensor {
            rows: self.cols,
            cols: self.rows,
            words_per_row: wpr,
            words,
        }
    }

    /// Repacks to a new 2-D shape with the same flat element order.
    pub fn reshape(&self, rows: usize, cols: usize) -> BitTensor {
        assert_eq!(rows * cols, self.len(), "bit reshape element count");
        let wpr = (cols + 63) / 64;
        let mut words = vec![0u64; rows * wpr];
        for idx in 0..self.len() {
            if self.bit(idx / self.cols, idx % self.cols) {
                words[(idx / cols) * wpr + (idx % cols) / 64] |= 1u64 << ((idx % cols) % 64);
            }
        }
        BitTensor {
            rows,
            cols,
            words_per_row: wpr,
            words,
        }
    }

    /// Serializes row-major, LSB-first within each byte, no inter-row padding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let total = self.rows * self.cols;
        let mut out = vec![0u8; (total + 7) / 8];
        let mut idx = 0usize;
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.bit(r, c) {
                    out[idx / 8] |= 1 << (idx % 8);
                }
                idx += 1;
            }
        }
        out
    }

    pub fn from_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Result<Self> {
        let total = rows * cols;
        if bytes.len() != (total + 7) / 8 {
            return Err(Error::ShapeMismatch(format!(
                "expected {} packed bytes for {rows}x{cols}, got {}",
                (total + 7) / 8,
                bytes.len()
            )));
        }
        let wpr = (cols + 63) / 64;
        let mut words = vec![0u64; rows * wpr];
        for idx in 0..total {
            if bytes[idx / 8] >> (idx % 8) & 1 == 1 {
                let (r, c) = (idx / cols, idx % cols);
                words[r * wpr + c / 64] |= 1u64 << (c % 64);
            }
        }
        Ok(BitTensor {
            rows,
            cols,
            words_per_row: wpr,
            words,
        })
    }
}

/// sgn with sgn(0) := +1, packed one bit per element.
pub fn sign_binarize(t: &Tensor) -> BitTensor {
    BitTensor::from_values(t.rows(), t.cols(), t.values())
}

/// Power-of-two tensor: sign bit plus exponent e in [-2^(k-2), 2^(k-2)-1]
/// with a per-tensor bias b. An element decodes to sign * 2^(e - b).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Po2Tensor {
    rows: usize,
    cols: usize,
    signs: Vec<u8>,
    exps: Vec<i8>,
    bias: i32,
    width: u8,
}

impl Po2Tensor {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn bias(&self) -> i32 {
        self.bias
    }

    pub fn width(&self) -> u8 {
        self.width
    }

    pub fn exponent(&self, i: usize) -> i32 {
        self.exps[i] as i32
    }

    pub fn storage_bytes(&self) -> usize {
        storage_bytes(self.len(), StorageDtype::Po2(self.width))
    }

    pub fn transpose(&self) -> Po2Tensor {
        let (r, c) = (self.rows, self.cols);
        let mut signs = vec![0u8; self.signs.len()];
        let mut exps = vec![0i8; self.exps.len()];
        for i in 0..r {
            for j in 0..c {
                signs[j * r + i] = self.signs[i * c + j];
                exps[j * r + i] = self.exps[i * c + j];
            }
        }
        Po2Tensor {
            rows: c,
            cols: r,
            signs,
            exps,
            bias: self.bias,
            width: self.width,
        }
    }

    fn exp_lo(width: u8) -> i32 {
        -(1i32 << (width - 2))
    }

    fn exp_hi(width: u8) -> i32 {
        (1i32 << (width - 2)) - 1
    }
}

fn check_width(k: u8) -> Result<()> {
    if !(2..=8).contains(&k) {
        return Err(Error::InvalidWidth(k));
    }
    Ok(())
}

/// Round half away from zero, the tie rule used by every quantizer here.
#[inline]
fn round_haz(x: f64) -> f64 {
    x.round()
}

/// round(log2 |x|) for finite nonzero x, computed exactly from the float
/// representation: with |x| = m * 2^E, m in [1, 2), the result is E plus one
/// iff m >= sqrt(2). Ties cannot occur (sqrt(2) is irrational and m is
/// dyadic), and no representable f64 lies between sqrt(2) and its upward-
/// rounded f64 constant, so the comparison is exact.
#[inline]
fn round_log2_abs(x: f32) -> i32 {
    let a = (x as f64).abs();
    let bits = a.to_bits();
    let e = ((bits >> 52) & 0x7ff) as i32 - 1023;
    let m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | (1023u64 << 52));
    e + (m >= std::f64::consts::SQRT_2) as i32
}

/// Power-of-two quantization into k-bit format.
///
/// bias b = 2^(k-2) - 1 - round(log2 ||t||inf);
/// e[i] = clamp(round(log2 |t[i]| + b), -2^(k-2), 2^(k-2)-1);
/// zero elements map to the most-attenuated code with + sign.
pub fn po2_quantize(t: &Tensor, k: u8) -> Result<Po2Tensor> {
    check_width(k)?;
    let max_abs = t.values().iter().fold(0.0f32, |acc, &v| acc.max(v.abs()));
    if max_abs == 0.0 {
        return Err(Error::ZeroTensor);
    }
    let bias = (1i32 << (k - 2)) - 1 - round_log2_abs(max_abs);
    let lo = Po2Tensor::exp_lo(k);
    let hi = Po2Tensor::exp_hi(k);
    let n = t.len();
    let mut signs = vec![0u8; n];
    let mut exps = vec![0i8; n];
    for (i, &v) in t.values().iter().enumerate() {
        if v == 0.0 {
            signs[i] = 1; // sgn(0) := +1
            exps[i] = lo as i8;
        } else {
            signs[i] = (v > 0.0) as u8;
            let e = (round_log2_abs(v) + bias) as i64;
            exps[i] = e.clamp(lo as i64, hi as i64) as i8;
        }
    }
    Ok(Po2Tensor {
        rows: t.rows(),
        cols: t.cols(),
        signs,
        exps,
        bias,
        width: k,
    })
}

/// Exact decode: every value is a signed power of two.
pub fn po2_dequantize(p: &Po2Tensor) -> Tensor {
    let vals: Vec<f32> = (0..p.len())
        .map(|i| {
            let mag = 2.0f64.powi(p.exps[i] as i32 - p.bias) as f32;
            if p.signs[i] == 1 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::matrix(p.rows, p.cols, vals).expect("po2 decode")
}

/// Block floating-point tensor: k-bit fixed-point mantissas sharing one
/// exponent. An element decodes to mantissa * 2^(shared_exponent - (k-2)).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BlockFpTensor {
    rows: usize,
    cols: usize,
    mantissas: Vec<i16>,
    shared_exponent: i32,
    width: u8,
}

impl BlockFpTensor {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn shared_exponent(&self) -> i32 {
        self.shared_exponent
    }

    pub fn mantissas(&self) -> &[i16] {
        &self.mantissas
    }

    pub fn storage_bytes(&self) -> usize {
        storage_bytes(self.len(), StorageDtype::BlockFp(self.width))
    }
}

/// Layer-wise block floating-point quantization with k-bit mantissas.
pub fn blockfp_quantize(t: &Tensor, k: u8) -> Result<BlockFpTensor> {
    check_width(k)?;
    let max_abs = t.values().iter().fold(0.0f32, |acc, &v| acc.max(v.abs()));
    if max_abs == 0.0 {
        return Err(Error::ZeroTensor);
    }
    let shared = round_log2_abs(max_abs);
    let scale = 2.0f64.powi(shared - (k as i32 - 2));
    let m_max = (1i32 << (k - 1)) - 1;
    let mantissas: Vec<i16> = t
        .values()
        .iter()
        .map(|&v| {
            let m = round_haz(v as f64 / scale) as i64;
            m.clamp(-(m_max as i64), m_max as i64) as i16
        })
        .collect();
    Ok(BlockFpTensor {
        rows: t.rows(),
        cols: t.cols(),
        mantissas,
        shared_exponent: shared,
        width: k,
    })
}

pub fn blockfp_dequantize(b: &BlockFpTensor) -> Tensor {
    let scale = 2.0f64.powi(b.shared_exponent - (b.width as i32 - 2));
    let vals: Vec<f32> = b
        .mantissas
        .iter()
        .map(|&m| (m as f64 * scale) as f32)
        .collect();
    Tensor::matrix(b.rows, b.cols, vals).expect("blockfp decode")
}

/// XNOR-popcount matrix multiply of packed +-1 operands.
///
/// result[r,m] = N - 2 * popcount(rowbits(a,r) XOR colbits(w,m)); this equals
/// the real matrix product of the +-1 decodings exactly.
pub fn xnor_matmul(a: &BitTensor, w: &BitTensor) -> Result<Tensor> {
    if a.cols != w.rows {
        return Err(Error::ShapeMismatch(format!(
            "xnor_matmul inner dims {} vs {}",
            a.cols, w.rows
        )));
    }
    let wt = w.transpose();
    xnor_matmul_pret(a, &wt)
}

/// XNOR matmul against an already-transposed weight operand `wt [M x N]`.
pub fn xnor_matmul_pret(a: &BitTensor, wt: &BitTensor) -> Result<Tensor> {
    if a.cols != wt.cols {
        return Err(Error::ShapeMismatch(format!(
            "xnor_matmul inner dims {} vs {}",
            a.cols, wt.cols
        )));
    }
    let n = a.cols as i64;
    let (r, m) = (a.rows, wt.rows);
    let mut out = vec![0.0f32; r * m];
    for i in 0..r {
        let a_row = a.row_words(i);
        let o_row = &mut out[i * m..(i + 1) * m];
        for (j, o) in o_row.iter_mut().enumerate() {
            let w_row = wt.row_words(j);
            let mut pop = 0u32;
            for (&x, &y) in a_row.iter().zip(w_row) {
                pop += (x ^ y).count_ones();
            }
            *o = (n - 2 * pop as i64) as f32;
        }
    }
    Tensor::matrix(r, m, out)
}

/// Largest rebased exponent for which the i64 shift path stays exact through
/// the final f64 conversion.
fn po2_fast_path(max_eprime: i32, inner: usize) -> bool {
    let log_n = usize::BITS - inner.leading_zeros();
    (max_eprime as u32 + log_n + 1) <= 52
}

fn po2_row_shift_values(g: &Po2Tensor, r: usize, shift_base: i32) -> Vec<i64> {
    let row = &g.exps[r * g.cols..(r + 1) * g.cols];
    let sgn = &g.signs[r * g.cols..(r + 1) * g.cols];
    row.iter()
        .zip(sgn)
        .map(|(&e, &s)| {
            let v = 1i64 << (e as i32 + shift_base);
            if s == 1 {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Shift-accumulate matrix multiply of a power-of-two operand by a packed
/// +-1 operand: `g [R x K] * w [K x N]`.
///
/// Each power of two is converted to an integer via shifts, sign-flipped by
/// the bits of `w` and accumulated; a single final scale by 2^-(b + s)
/// restores magnitudes (s is the shift normalizer). The result equals the
/// dequantize-then-float-multiply route exactly whenever the occupied
/// exponent span fits the accumulator, which k <= 6 always satisfies and
/// larger widths satisfy for non-degenerate data; otherwise a per-exponent
/// bucket accumulation is used.
pub fn po2_bit_matmul(g: &Po2Tensor, w: &BitTensor) -> Result<Tensor> {
    if g.cols != w.rows {
        return Err(Error::ShapeMismatch(format!(
            "po2_bit_matmul inner dims {} vs {}",
            g.cols, w.rows
        )));
    }
    let wt = w.transpose();
    po2_bit_matmul_pret(g, &wt)
}

/// Same as [`po2_bit_matmul`] with `w` already transposed to `[N x K]`.
pub fn po2_bit_matmul_pret(g: &Po2Tensor, wt: &BitTensor) -> Result<Tensor> {
    if g.cols != wt.cols {
        return Err(Error::ShapeMismatch(format!(
            "po2_bit_matmul inner dims {} vs {}",
            g.cols, wt.cols
        )));
    }
    let (r, n, k_inner) = (g.rows, wt.rows, g.cols);
    let min_e = g.exps.iter().copied().min().unwrap_or(0) as i32;
    let max_e = g.exps.iter().copied().max().unwrap_or(0) as i32;
    let shift_base = -min_e; // rebase exponents to start at zero
    let scale = 2.0f64.powi(min_e - g.bias);
    let mut out = vec![0.0f32; r * n];
    let log_k = usize::BITS - k_inner.leading_zeros();
    let narrow = (max_e + shift_base) as u32 + log_k + 1 <= 31;

    if po2_fast_path(max_e + shift_base, k_inner) && narrow && r * k_inner <= (1 << 23) {
        // Shifted integer values for every element once, then a branchless
        // xor-subtract per column (m = 0 keeps v, m = -1 negates), which
        // vectorizes. i32 is exact here by the width check above.
        let mut vals = vec![0i32; r * k_inner];
        for (c, v) in vals.iter_mut().enumerate() {
            let x = 1i32 << (g.exps[c] as i32 + shift_base);
            *v = if g.signs[c] == 1 { x } else { -x };
        }
        let mut masks = vec![0i32; k_inner];
        for j in 0..n {
            let w_row = wt.row_words(j);
            for (c, m) in masks.iter_mut().enumerate() {
                *m = (((w_row[c / 64] >> (c % 64)) & 1) as i32).wrapping_sub(1);
            }
            for i in 0..r {
                let row = &vals[i * k_inner..(i + 1) * k_inner];
                let mut acc = 0i32;
                for (&v, &m) in row.iter().zip(&masks) {
                    acc += (v ^ m) - m;
                }
                out[i * n + j] = (acc as f64 * scale) as f32;
            }
        }
    } else if po2_fast_path(max_e + shift_base, k_inner) {
        let mut masks = vec![0i64; k_inner];
        for j in 0..n {
            let w_row = wt.row_words(j);
            for (c, m) in masks.iter_mut().enumerate() {
                *m = (((w_row[c / 64] >> (c % 64)) & 1) as i64).wrapping_sub(1);
            }
            for i in 0..r {
                let vals = po2_row_shift_values(g, i, shift_base);
                let mut acc = 0i64;
                for (&v, &m) in vals.iter().zip(&masks) {
                    acc += (v ^ m) - m;
                }
                out[i * n + j] = (acc as f64 * scale) as f32;
            }
        }
    } else {
        // Bucket per occupied exponent, reconstruct from the smallest up.
        let span = (max_e - min_e + 1) as usize;
        let mut counts = vec![0i64; span];
        for i in 0..r {
            let e_row = &g.exps[i * k_inner..(i + 1) * k_inner];
            let s_row = &g.signs[i * k_inner..(i + 1) * k_inner];
            for j in 0..n {
                counts.iter_mut().for_each(|c| *c = 0);
                let w_row = wt.row_words(j);
                for c in 0..k_inner {
                    let bit = (w_row[c / 64] >> (c % 64)) & 1;
                    let sgn = (s_row[c] == 1) == (bit == 1);
                    let slot = (e_row[c] as i32 - min_e) as usize;
                    counts[slot] += if sgn { 1 } else { -1 };
                }
                let mut acc = 0.0f64;
                for (slot, &cnt) in counts.iter().enumerate() {
                    acc += cnt as f64 * 2.0f64.powi(min_e + slot as i32 - g.bias);
                }
                out[i * n + j] = acc as f32;
            }
        }
    }
    Tensor::matrix(r, n, out)
}

/// `x^T [K x R] * g [R x M]` where `x` is packed bits `[R x K]` and `g` is
/// power-of-two: the weight-gradient product of the low-cost backward pass.
pub fn bit_tn_po2_matmul(x: &BitTensor, g: &Po2Tensor) -> Result<Tensor> {
    if x.rows != g.rows {
        return Err(Error::ShapeMismatch(format!(
            "bit_tn_po2_matmul outer dims {} vs {}",
            x.rows, g.rows
        )));
    }
    let (r, k, m) = (x.rows, x.cols, g.cols);
    let min_e = g.exps.iter().copied().min().unwrap_or(0) as i32;
    let max_e = g.exps.iter().copied().max().unwrap_or(0) as i32;
    let shift_base = -min_e;
    if !po2_fast_path(max_e + shift_base, r) {
        // Rare, wide-format fallback through the transposed kernel.
        let gt = g.transpose();
        return Ok(po2_bit_matmul(&gt, x)?.transpose());
    }
    let scale = 2.0f64.powi(min_e - g.bias);
    let log_r = usize::BITS - r.leading_zeros();
    if (max_e + shift_base) as u32 + log_r + 1 <= 31 {
        let mut acc = vec![0i32; k * m];
        let mut vals = vec![0i32; m];
        for i in 0..r {
            let e_row = &g.exps[i * m..(i + 1) * m];
            let s_row = &g.signs[i * m..(i + 1) * m];
            for c in 0..m {
                let v = 1i32 << (e_row[c] as i32 + shift_base);
                vals[c] = if s_row[c] == 1 { v } else { -v };
            }
            let x_row = x.row_words(i);
            for kk in 0..k {
                let bit = (x_row[kk / 64] >> (kk % 64)) & 1;
                let a_row = &mut acc[kk * m..(kk + 1) * m];
                if bit == 1 {
                    for (a, &v) in a_row.iter_mut().zip(&vals) {
                        *a += v;
                    }
                } else {
                    for (a, &v) in a_row.iter_mut().zip(&vals) {
                        *a -= v;
                    }
                }
            }
        }
        let out: Vec<f32> = acc.iter().map(|&a| (a as f64 * scale) as f32).collect();
        return Tensor::matrix(k, m, out);
    }
    let mut acc = vec![0i64; k * m];
    for i in 0..r {
        let vals = po2_row_shift_values(g, i, shift_base);
        let x_row = x.row_words(i);
        for kk in 0..k {
            let bit = (x_row[kk / 64] >> (kk % 64)) & 1;
            let a_row = &mut acc[kk * m..(kk + 1) * m];
            if bit == 1 {
                for (a, &v) in a_row.iter_mut().zip(&vals) {
                    *a += v;
                }
            } else {
                for (a, &v) in a_row.iter_mut().zip(&vals) {
                    *a -= v;
                }
            }
        }
    }
    let out: Vec<f32> = acc.iter().map(|&a| (a as f64 * scale) as f32).collect();
    Tensor::matrix(k, m, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let vals: Vec<f32> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::matrix(r, c, vals).unwrap()
    }

    /// Magnitudes log-uniform in [2^-6, 2), random sign: keeps the occupied
    /// exponent span narrow so exact-match kernel tests are well conditioned.
    fn random_graded_tensor(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let vals: Vec<f32> = (0..r * c)
            .map(|_| {
                let mag = 2.0f32.powf(rng.gen_range(-6.0..1.0));
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        Tensor::matrix(r, c, vals).unwrap()
    }

    #[test]
    fn sign_binarize_basic() {
        let t = Tensor::matrix(1, 3, vec![0.3, -0.2, 0.0]).unwrap();
        let b = sign_binarize(&t);
        assert_eq!(b.decode().values(), &[1.0, -1.0, 1.0]);

        let neg = Tensor::matrix(2, 2, vec![-0.5, -1.0, -0.1, -3.0]).unwrap();
        assert!(sign_binarize(&neg)
            .decode()
            .values()
            .iter()
            .all(|&v| v == -1.0));
    }

    #[test]
    fn sign_binarize_matches_elementwise_oracle() {
        let mut r = rng(42);
        let t = random_tensor(10, 100, &mut r);
        let b = sign_binarize(&t);
        for (i, &v) in t.values().iter().enumerate() {
            let want = if v >= 0.0 { 1.0 } else { -1.0 };
            assert_eq!(b.get(i / 100, i % 100), want);
        }
    }

    #[test]
    fn bit_pack_contract_lsb_first() {
        // 9 elements: +,-,+,+,-,-,+,-,+  -> bits 1,0,1,1,0,0,1,0 | 1
        let t =
            Tensor::matrix(3, 3, vec![1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0]).unwrap();
        let b = sign_binarize(&t);
        let bytes = b.to_bytes();
        assert_eq!(bytes, vec![0b0100_1101, 0b0000_0001]);
        let back = BitTensor::from_bytes(3, 3, &bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(b.storage_bytes(), 2);
    }

    #[test]
    fn po2_quantize_worked_example() {
        // k=5, t=[1.0, 0.3, -0.004]: b=7; decodes [1.0, 0.25, -2^-8]
        let t = Tensor::matrix(1, 3, vec![1.0, 0.3, -0.004]).unwrap();
        let p = po2_quantize(&t, 5).unwrap();
        assert_eq!(p.bias(), 7);
        let d = po2_dequantize(&p);
        assert_eq!(d.values()[0], 1.0);
        assert_eq!(d.values()[1], 0.25);
        assert_eq!(d.values()[2], -(2.0f32.powi(-8)));
    }

    #[test]
    fn po2_constant_tensor_hits_top_code() {
        for &c in &[0.7f32, 1.0, 3.9, 0.01] {
            let t = Tensor::matrix(2, 2, vec![c; 4]).unwrap();
            let p = po2_quantize(&t, 5).unwrap();
            let d = po2_dequantize(&p);
            let expect = 2.0f64.powi((c as f64).log2().round() as i32) as f32;
            assert!(d.values().iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn po2_clamps_tiny_magnitudes() {
        // element 2^-20 with ||t||inf = 1, k=5: exponent clamps to -8 -> 2^-15
        let t = Tensor::matrix(1, 2, vec![1.0, 2.0f32.powi(-20)]).unwrap();
        let p = po2_quantize(&t, 5).unwrap();
        assert_eq!(p.exponent(1), -8);
        assert_eq!(po2_dequantize(&p).values()[1], 2.0f32.powi(-15));
    }

    #[test]
    fn po2_zero_element_and_zero_tensor() {
        let t = Tensor::matrix(1, 2, vec![0.5, 0.0]).unwrap();
        let p = po2_quantize(&t, 5).unwrap();
        // zero maps to the most-attenuated code with + sign
        assert_eq!(p.exponent(1), -8);
        assert!(po2_dequantize(&p).values()[1] > 0.0);

        let z = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(po2_quantize(&z, 5), Err(Error::ZeroTensor)));
        assert!(matches!(po2_quantize(&t, 9), Err(Error::InvalidWidth(9))));
    }

    #[test]
    fn po2_dequantize_specific_codes() {
        let t = Tensor::matrix(1, 2, vec![1.0, -0.25]).unwrap();
        let p = po2_quantize(&t, 5).unwrap();
        // sign +, e=7, b=7 -> 1.0; sign -, e=5, b=7 -> -0.25
        assert_eq!(p.exponent(0), 7);
        assert_eq!(p.exponent(1), 5);
        assert_eq!(po2_dequantize(&p).values(), &[1.0, -0.25]);
    }

    #[test]
    fn po2_roundtrip_fixed_point() {
        let mut r = rng(17);
        for k in 2..=8u8 {
            for _ in 0..50 {
                let t = random_tensor(4, 6, &mut r);
                let p = po2_quantize(&t, k).unwrap();
                let p2 = po2_quantize(&po2_dequantize(&p), k).unwrap();
                assert_eq!(p, p2, "k={k}");
            }
        }
    }

    #[test]
    fn po2_relative_error_and_monotonicity() {
        let mut r = rng(5);
        let lo = 2.0f32.powf(-0.5);
        let hi = 2.0f32.powf(0.5);
        for k in 2..=8u8 {
            let t = random_tensor(8, 8, &mut r);
            let p = po2_quantize(&t, k).unwrap();
            let d = po2_dequantize(&p);
            let e_lo = -(1i32 << (k - 2));
            let e_hi = (1i32 << (k - 2)) - 1;
            for (i, (&orig, &dec)) in t.values().iter().zip(d.values()).enumerate() {
                if orig == 0.0 {
                    continue;
                }
                assert_eq!(dec > 0.0, orig > 0.0, "sign preserved");
                let e = p.exponent(i);
                if e > e_lo && e < e_hi {
                    let ratio = dec.abs() / orig.abs();
                    assert!(
                        ratio >= lo * 0.999999 && ratio <= hi * 1.000001,
                        "k={k} ratio {ratio}"
                    );
                }
            }
            // |t_i| <= |t_j| implies e_i <= e_j
            let mut idx: Vec<usize> = (0..t.len()).collect();
            idx.sort_by(|&a, &b| {
                t.values()[a]
                    .abs()
                    .partial_cmp(&t.values()[b].abs())
                    .unwrap()
            });
            for pair in idx.windows(2) {
                assert!(p.exponent(pair[0]) <= p.exponent(pair[1]));
            }
        }
    }

    #[test]
    fn blockfp_worked_example() {
        let t = Tensor::matrix(1, 2, vec![1.0, 0.3]).unwrap();
        let b = blockfp_quantize(&t, 5).unwrap();
        assert_eq!(b.shared_exponent(), 0);
        assert_eq!(b.mantissas(), &[8, 2]);
        assert_eq!(blockfp_dequantize(&b).values(), &[1.0, 0.25]);
    }

    #[test]
    fn blockfp_underflows_to_zero_po2_does_not() {
        // tiny element below half a quantum: block-fp zeroes it, po2 keeps sign
        let t = Tensor::matrix(1, 2, vec![1.0, 0.01]).unwrap();
        let b = blockfp_quantize(&t, 5).unwrap();
        assert_eq!(b.mantissas()[1], 0);
        assert_eq!(blockfp_dequantize(&b).values()[1], 0.0);

        let p = po2_quantize(&t, 5).unwrap();
        assert!(po2_dequantize(&p).values()[1] > 0.0);
    }

    #[test]
    fn blockfp_constant_tensor_symmetry() {
        let t = Tensor::matrix(1, 4, vec![0.37; 4]).unwrap();
        let b = blockfp_quantize(&t, 5).unwrap();
        assert!(b.mantissas().iter().all(|&m| m == b.mantissas()[0]));
        let z = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(blockfp_quantize(&z, 5).is_err());
    }

    #[test]
    fn blockfp_max_mantissa_uses_dynamic_range() {
        let mut r = rng(23);
        for _ in 0..200 {
            let t = random_tensor(3, 5, &mut r);
            let b = blockfp_quantize(&t, 5).unwrap();
            let top = b.mantissas().iter().map(|m| m.abs()).max().unwrap();
            // max/scale lies in 8*[2^-0.5, 2^0.5]: mantissa in [6, 11], clamp at 15
            assert!((6..=15).contains(&top), "top mantissa {top}");
        }
    }

    #[test]
    fn xnor_matmul_tiny_cases() {
        let a = BitTensor::from_values(1, 2, &[1.0, 1.0]);
        let w = BitTensor::from_values(2, 1, &[1.0, 1.0]);
        assert_eq!(xnor_matmul(&a, &w).unwrap().values(), &[2.0]);

        let a = BitTensor::from_values(1, 2, &[1.0, -1.0]);
        assert_eq!(xnor_matmul(&a, &w).unwrap().values(), &[0.0]);

        let bad = BitTensor::from_values(3, 1, &[1.0; 3]);
        assert!(xnor_matmul(&a, &bad).is_err());
    }

    #[test]
    fn xnor_matmul_exhaustive_small() {
        // all operand bit patterns with N, M <= 3 (rows of a fixed at 2)
        for n in 1..=3usize {
            for m in 1..=3usize {
                for wa in 0..(1u32 << (2 * n)) {
                    let a_vals: Vec<f32> = (0..2 * n)
                        .map(|i| if wa >> i & 1 == 1 { 1.0 } else { -1.0 })
                        .collect();
                    let a = BitTensor::from_values(2, n, &a_vals);
                    for ww in 0..(1u32 << (n * m)) {
                        let w_vals: Vec<f32> = (0..n * m)
                            .map(|i| if ww >> i & 1 == 1 { 1.0 } else { -1.0 })
                            .collect();
                        let w = BitTensor::from_values(n, m, &w_vals);
                        let got = xnor_matmul(&a, &w).unwrap();
                        let want = a.decode().matmul(&w.decode()).unwrap();
                        assert_eq!(got.values(), want.values());
                    }
                }
            }
        }
    }

    #[test]
    fn xnor_matmul_random_matches_float_oracle() {
        let mut r = rng(99);
        for _ in 0..20 {
            let a_t = random_tensor(7, 13, &mut r);
            let w_t = random_tensor(13, 5, &mut r);
            let a = sign_binarize(&a_t);
            let w = sign_binarize(&w_t);
            let got = xnor_matmul(&a, &w).unwrap();
            let want = a.decode().matmul(&w.decode()).unwrap();
            assert_eq!(got.values(), want.values());
            // parity and magnitude invariants
            for &v in got.values() {
                assert!(v.abs() <= 13.0);
                assert_eq!((v as i64).rem_euclid(2), 13i64.rem_euclid(2));
            }
        }
    }

    #[test]
    fn po2_bit_matmul_hand_case() {
        // g decodes to [[1.0, 0.25]], w = [[+1], [-1]] -> [[0.75]]
        let g = po2_quantize(&Tensor::matrix(1, 2, vec![1.0, 0.25]).unwrap(), 5).unwrap();
        let w = BitTensor::from_values(2, 1, &[1.0, -1.0]);
        let out = po2_bit_matmul(&g, &w).unwrap();
        assert_eq!(out.values(), &[0.75]);
    }

    #[test]
    fn po2_bit_matmul_attenuated_codes_bound() {
        // all-but-one elements at the most-attenuated code
        let t = Tensor::matrix(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let g = po2_quantize(&t, 5).unwrap();
        let w = BitTensor::from_values(4, 3, &[1.0; 12]);
        let out = po2_bit_matmul(&g, &w).unwrap();
        let bound = 4.0 * 2.0f32.powi(-8 - g.bias()) + 1.0; // +1 for the real max element
        assert!(out.values().iter().all(|&v| v.abs() <= bound));
    }

    #[test]
    fn po2_bit_matmul_matches_dequantize_oracle() {
        let mut r = rng(7);
        for k in 2..=8u8 {
            for _ in 0..30 {
                let g_t = random_graded_tensor(6, 9, &mut r);
                let w_t = random_tensor(9, 4, &mut r);
                let g = po2_quantize(&g_t, k).unwrap();
                let w = sign_binarize(&w_t);
                let got = po2_bit_matmul(&g, &w).unwrap();
                let want = po2_dequantize(&g).matmul(&w.decode()).unwrap();
                assert_eq!(got.values(), want.values(), "k={k}");
            }
        }
    }

    #[test]
    fn bit_tn_po2_matmul_matches_transposed_route() {
        let mut r = rng(31);
        for k in [2u8, 5, 8] {
            let x_t = random_tensor(11, 6, &mut r);
            let g_t = random_graded_tensor(11, 4, &mut r);
            let x = sign_binarize(&x_t);
            let g = po2_quantize(&g_t, k).unwrap();
            let got = bit_tn_po2_matmul(&x, &g).unwrap();
            let want = x.decode().matmul_tn(&po2_dequantize(&g)).unwrap();
            assert_eq!(got.values(), want.values(), "k={k}");
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let mut r = rng(2);
        let t = random_tensor(5, 9, &mut r);
        let b = sign_binarize(&t);
        assert_eq!(b.transpose().transpose(), b);
        let p = po2_quantize(&t, 5).unwrap();
        let back = p.transpose().transpose();
        assert_eq!(p, back);
    }
}
