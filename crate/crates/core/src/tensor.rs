//! Dense tensor container with storage-dtype tagging.
//!
//! All arithmetic runs in f32 compute precision. The storage dtype of a
//! tensor only controls (a) the rounding applied when values are written to
//! their home buffer and (b) footprint accounting. Reductions use a fixed
//! left-to-right order so runs are bit-reproducible under a fixed seed.

use crate::error::{Error, Result};

/// Positive integer extents. Batch-major for activations, input-channel-major
/// for weight matrices.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "extents must all be >= 1, got {dims:?}"
            )));
        }
        Ok(Shape(dims.to_vec()))
    }

    /// Panicking constructor for shapes known statically.
    pub fn of(dims: &[usize]) -> Self {
        Self::new(dims).expect("static shape")
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// Rows of a matrix-shaped tensor: product of all but the last extent.
    pub fn rows(&self) -> usize {
        self.count() / self.cols()
    }

    /// Columns of a matrix-shaped tensor: the last extent.
    pub fn cols(&self) -> usize {
        *self.0.last().expect("non-empty shape")
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Storage format tag used for footprint accounting and store-time rounding.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum StorageDtype {
    F32,
    F16,
    Bool1,
    /// Sign bit plus (k-1)-bit exponent, k bits per element.
    Po2(u8),
    /// Block floating point, k-bit fixed-point mantissas with a shared exponent.
    BlockFp(u8),
}

impl StorageDtype {
    pub fn bits(self) -> usize {
        match self {
            StorageDtype::F32 => 32,
            StorageDtype::F16 => 16,
            StorageDtype::Bool1 => 1,
            StorageDtype::Po2(k) | StorageDtype::BlockFp(k) => k as usize,
        }
    }

    pub fn name(self) -> String {
        match self {
            StorageDtype::F32 => "float32".into(),
            StorageDtype::F16 => "float16".into(),
            StorageDtype::Bool1 => "bool".into(),
            StorageDtype::Po2(k) => format!("po2_{k}"),
            StorageDtype::BlockFp(k) => format!("int{k}"),
        }
    }
}

/// Bytes needed to hold `count` elements of `dtype`, bit-packed types packed
/// contiguously with the final byte padded.
pub fn storage_bytes(count: usize, dtype: StorageDtype) -> usize {
    (count * dtype.bits() + 7) / 8
}

/// Dense n-dimensional array of f32 compute values carrying a storage tag.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Shape,
    values: Vec<f32>,
    dtype: StorageDtype,
}

impl Tensor {
    pub fn new(shape: Shape, values: Vec<f32>) -> Result<Self> {
        if shape.count() != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {} holds {} elements, got {}",
                shape,
                shape.count(),
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            dtype: StorageDtype::F32,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.count();
        Tensor {
            shape,
            values: vec![0.0; n],
            dtype: StorageDtype::F32,
        }
    }

    /// 2-D constructor.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        Self::new(Shape::new(&[rows, cols])?, values)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dtype(&self) -> StorageDtype {
        self.dtype
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.rows()
    }

    pub fn cols(&self) -> usize {
        self.shape.cols()
    }

    pub fn storage_bytes(&self) -> usize {
        storage_bytes(self.len(), self.dtype)
    }

    /// Reinterprets the tensor as a matrix with the same element count.
    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.count() != self.values.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} elements into {}",
                self.values.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            dtype: StorageDtype::F32,
        }
    }

    /// Matrix transpose of a 2-D view.
    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.values[i * c + j];
            }
        }
        Tensor {
            shape: Shape::of(&[c, r]),
            values: out,
            dtype: StorageDtype::F32,
        }
    }

    /// `self [R x K] * other [K x M] -> [R x M]`.
    ///
    /// Accumulation order for every output element is k-ascending, identical
    /// to a plain sequential dot product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (r, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0f32; r * m];
        for i in 0..r {
            let a_row = &self.values[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.values[kk * m..(kk + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: Shape::of(&[r, m]),
            values: out,
            dtype: StorageDtype::F32,
        })
    }

    /// `self [R x K] * other^T` where `other` is `[M x K]` -> `[R x M]`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul(&other.transpose())
    }

    /// `self^T * other` where `self` is `[R x K]`, `other` `[R x M]` -> `[K x M]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (r, k) = (self.rows(), self.cols());
        let (r2, m) = (other.rows(), other.cols());
        if r != r2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul_tn outer dims {r} vs {r2}"
            )));
        }
        let mut out = vec![0.0f32; k * m];
        for i in 0..r {
            let a_row = &self.values[i * k..(i + 1) * k];
            let b_row = &other.values[i * m..(i + 1) * m];
            for (kk, &a) in a_row.iter().enumerate() {
                let o_row = &mut out[kk * m..(kk + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: Shape::of(&[k, m]),
            values: out,
            dtype: StorageDtype::F32,
        })
    }
}

/// Rounds to the home storage format. f32 is the identity; f16 applies
/// IEEE-754 binary16 round-to-nearest-even with saturation to the largest
/// finite half value. Binary and po2/block-fp conversions live in `quant`.
pub fn cast_to_storage(t: &Tensor, d: StorageDtype) -> Result<Tensor> {
    match d {
        StorageDtype::F32 => Ok(Tensor {
            shape: t.shape.clone(),
            values: t.values.clone(),
            dtype: StorageDtype::F32,
        }),
        StorageDtype::F16 => Ok(Tensor {
            shape: t.shape.clone(),
            values: t.values.iter().map(|&v| f16_round(v)).collect(),
            dtype: StorageDtype::F16,
        }),
        _ => Err(Error::UnsupportedCast),
    }
}

/// In-place variant of [`cast_to_storage`] for buffer write boundaries.
pub fn store_round(values: &mut [f32], d: StorageDtype) {
    if d == StorageDtype::F16 {
        for v in values.iter_mut() {
            *v = f16_round(*v);
        }
    }
}

pub const F16_MAX: f32 = 65504.0;

/// Rounds an f32 to the nearest IEEE-754 binary16 value (ties to even) and
/// returns it widened back to f32. Values beyond the half range saturate to
/// +-65504; NaN passes through.
pub fn f16_round(x: f32) -> f32 {
    f16_bits_to_f32(f32_to_f16_bits(x))
}

/// f32 -> binary16 bit pattern, round-to-nearest-even, saturating overflow.
pub fn f32_to_f16_bits(x: f32) -> u16 {
    let b = x.to_bits();
    let sign = ((b >> 16) & 0x8000) as u16;
    let abs = b & 0x7fff_ffff;

    if abs >= 0x7f80_0000 {
        if abs > 0x7f80_0000 {
            return sign | 0x7e00; // NaN
        }
        return sign | 0x7bff; // inf saturates to max finite
    }

    // abs as an unsigned fixed-point view: (exp_biased << 23) | mantissa.
    // Rounding a half value means dropping 13 mantissa bits for normals.
    let exp = ((abs >> 23) as i32) - 127;

    if exp >= -14 {
        let mant = abs & 0x007f_ffff;
        let mut half = (((exp + 15) as u32) << 10) | (mant >> 13);
        let rem = mant & 0x1fff;
        if rem > 0x1000 || (rem == 0x1000 && (half & 1) == 1) {
            half += 1; // may carry into the exponent, which is correct
        }
        if half >= 0x7c00 {
            return sign | 0x7bff; // rounded past max finite: saturate
        }
        return sign | half as u16;
    }

    // Subnormal range of binary16: quantum 2^-24.
    if exp < -25 {
        return sign; // underflows to zero (|x| < 2^-25 rounds to 0)
    }
    let mant = (abs & 0x007f_ffff) | 0x0080_0000; // 24-bit significand of 2^exp
    let shift = (-exp - 1) as u32; // drop bits so value is in units of 2^-24
    debug_assert!((10..=24).contains(&shift));
    let kept = mant >> shift;
    let rem = mant & ((1u32 << shift) - 1);
    let halfway = 1u32 << (shift - 1);
    let mut half = kept;
    if rem > halfway || (rem == halfway && (kept & 1) == 1) {
        half += 1; // may promote into the smallest normal, which is correct
    }
    sign | half as u16
}

/// binary16 bit pattern -> exact f32.
pub fn f16_bits_to_f32(h: u16) -> f32 {
    let sign = ((h & 0x8000) as u32) << 16;
    let exp = (h >> 10) & 0x1f;
    let mant = (h & 0x3ff) as u32;
    let bits = match exp {
        0 => {
            if mant == 0 {
                sign
            } else {
                // subnormal: mant * 2^-24
                let mut e = -14i32;
                let mut m = mant;
                while m & 0x400 == 0 {
                    m <<= 1;
                    e -= 1;
                }
                sign | (((e + 127) as u32) << 23) | ((m & 0x3ff) << 13)
            }
        }
        0x1f => {
            if mant == 0 {
                sign | 0x7f80_0000
            } else {
                sign | 0x7fc0_0000
            }
        }
        _ => sign | (((exp as u32) + 112) << 23) | (mant << 13),
    };
    f32::from_bits(bits)
}
