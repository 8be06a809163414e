//! Network topology descriptions, the built-in model zoo and model
//! construction (Glorot initialization, optimizer state allocation).

use crate::batchnorm::BnState;
use crate::error::{Error, Result};
use crate::layers::{ConvGeom, ConvLayer, DenseLayer, Scheme};
use crate::optim::{OptimizerKind, ParamState};
use crate::tensor::{store_round, StorageDtype, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Input description: flat features or channel-last images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputSpec {
    Flat { features: usize },
    Image { h: usize, w: usize, c: usize },
}

impl InputSpec {
    pub fn features(&self) -> usize {
        match *self {
            InputSpec::Flat { features } => features,
            InputSpec::Image { h, w, c } => h * w * c,
        }
    }
}

/// One layer of a topology.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        out: usize,
    },
    Conv {
        out_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        /// Pool the conv output before normalization (BinaryNet placement).
        pool_before_norm: Option<(usize, usize)>,
        /// Pool the binarized input before lowering (CNV placement).
        input_pool: Option<(usize, usize)>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
    pub name: String,
}

impl Topology {
    /// Five-layer MLP with 256-unit hidden layers for 28x28 inputs.
    pub fn mlp5_256() -> Self {
        Topology {
            input: InputSpec::Flat { features: 784 },
            layers: vec![
                LayerSpec::Dense { out: 256 },
                LayerSpec::Dense { out: 256 },
                LayerSpec::Dense { out: 256 },
                LayerSpec::Dense { out: 256 },
                LayerSpec::Dense { out: 10 },
            ],
            name: "mlp5_256".into(),
        }
    }

    /// CNV: three double-conv blocks (64, 128, 256 channels, 3x3 valid) with
    /// pooling after binarization, then 512-512-10 fully connected.
    pub fn cnv() -> Self {
        let conv = |out_c, input_pool| LayerSpec::Conv {
            out_c,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 0,
            pool_before_norm: None,
            input_pool,
        };
        Topology {
            input: InputSpec::Image { h: 32, w: 32, c: 3 },
            layers: vec![
                conv(64, None),
                conv(64, None),
                conv(128, Some((2, 2))),
                conv(128, None),
                conv(256, Some((2, 2))),
                conv(256, None),
                LayerSpec::Dense { out: 512 },
                LayerSpec::Dense { out: 512 },
                LayerSpec::Dense { out: 10 },
            ],
            name: "cnv".into(),
        }
    }

    /// Reduced CNV for desk-scale runs: channel counts quartered, 128-unit
    /// head.
    pub fn cnv_reduced() -> Self {
        let conv = |out_c, input_pool| LayerSpec::Conv {
            out_c,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 0,
            pool_before_norm: None,
            input_pool,
        };
        Topology {
            input: InputSpec::Image { h: 32, w: 32, c: 3 },
            layers: vec![
                conv(16, None),
                conv(16, None),
                conv(32, Some((2, 2))),
                conv(32, None),
                conv(64, Some((2, 2))),
                conv(64, None),
                LayerSpec::Dense { out: 128 },
                LayerSpec::Dense { out: 128 },
                LayerSpec::Dense { out: 10 },
            ],
            name: "cnv_reduced".into(),
        }
    }

    /// BinaryNet's CIFAR-10 network: double-conv blocks of 128, 256, 512
    /// channels (3x3, same padding) pooling ahead of normalization, then
    /// 1024-1024-10 fully connected.
    pub fn binarynet() -> Self {
        let conv = |out_c, pool| LayerSpec::Conv {
            out_c,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            pool_before_norm: pool,
            input_pool: None,
        };
        Topology {
            input: InputSpec::Image { h: 32, w: 32, c: 3 },
            layers: vec![
                conv(128, None),
                conv(128, Some((2, 2))),
                conv(256, None),
                conv(256, Some((2, 2))),
                conv(512, None),
                conv(512, Some((2, 2))),
                LayerSpec::Dense { out: 1024 },
                LayerSpec::Dense { out: 1024 },
                LayerSpec::Dense { out: 10 },
            ],
            name: "binarynet".into(),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "mlp5_256" => Some(Self::mlp5_256()),
            "cnv" => Some(Self::cnv()),
            "cnv_reduced" => Some(Self::cnv_reduced()),
            "binarynet" => Some(Self::binarynet()),
            _ => None,
        }
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { out }) => *out,
            _ => 0,
        }
    }
}

/// Static per-layer dimensions derived by walking a topology. Shared by the
/// engine (construction, tracing) and the analysis module (footprint and
/// energy models), so the two always agree on shapes.
#[derive(Clone, Debug)]
pub struct LayerDims {
    pub is_conv: bool,
    /// Weight matrix: fan_in x fan_out.
    pub fan_in: usize,
    pub fan_out: usize,
    /// Elements of this layer's input activation per sample, at the
    /// resolution the engine retains (pre input-pool for CNV-style layers).
    pub in_elems: usize,
    /// Rows per sample of the matrix product output (pre pool-before-norm).
    pub y_rows: usize,
    /// Rows per sample of the normalized output.
    pub out_rows: usize,
    /// Elements of the normalized output per sample.
    pub out_elems: usize,
    /// Patch length for lowered convolutions (fan_in; 0 for dense).
    pub cols_k: usize,
    /// Patch rows per sample for lowered convolutions (y_rows; 0 for dense).
    pub cols_rows: usize,
}

/// Walks the topology computing every layer's static dimensions.
pub fn layer_dims(t: &Topology) -> Result<Vec<LayerDims>> {
    let mut dims = Vec::with_capacity(t.layers.len());
    // current activation: either image (h, w, c) or flat features
    let mut img = match t.input {
        InputSpec::Image { h, w, c } => Some((h, w, c)),
        InputSpec::Flat { .. } => None,
    };
    let mut features = t.input.features();

    for (i, spec) in t.layers.iter().enumerate() {
        match *spec {
            LayerSpec::Dense { out } => {
                dims.push(LayerDims {
                    is_conv: false,
                    fan_in: features,
                    fan_out: out,
                    in_elems: features,
                    y_rows: 1,
                    out_rows: 1,
                    out_elems: out,
                    cols_k: 0,
                    cols_rows: 0,
                });
                img = None;
                features = out;
            }
            LayerSpec::Conv {
                out_c,
                kh,
                kw,
                stride,
                pad,
                pool_before_norm,
                input_pool,
            } => {
                let (h, w, c) = img.ok_or_else(|| {
                    Error::InvalidConfig(format!("layer {i}: conv after flat activation"))
                })?;
                let in_elems = h * w * c;
                let (eh, ew) = match input_pool {
                    Some((ph, pw)) => {
                        if h % ph != 0 || w % pw != 0 {
                            return Err(Error::InvalidConfig(format!(
                                "layer {i}: input pool {ph}x{pw} does not divide {h}x{w}"
                            )));
                        }
                        (h / ph, w / pw)
                    }
                    None => (h, w),
                };
                let g = ConvGeom {
                    in_h: eh,
                    in_w: ew,
                    in_c: c,
                    kh,
                    kw,
                    stride,
                    pad,
                };
                if eh + 2 * pad < kh || ew + 2 * pad < kw {
                    return Err(Error::InvalidConfig(format!(
                        "layer {i}: kernel {kh}x{kw} larger than padded input {eh}x{ew}"
                    )));
                }
                let (oh, ow) = (g.out_h(), g.out_w());
                let (fh, fw) = match pool_before_norm {
                    Some((ph, pw)) => {
                        if oh % ph != 0 || ow % pw != 0 {
                            return Err(Error::InvalidConfig(format!(
                                "layer {i}: pool {ph}x{pw} does not divide {oh}x{ow}"
                            )));
                        }
                        (oh / ph, ow / pw)
                    }
                    None => (oh, ow),
                };
                dims.push(LayerDims {
                    is_conv: true,
                    fan_in: kh * kw * c,
                    fan_out: out_c,
                    in_elems,
                    y_rows: oh * ow,
                    out_rows: fh * fw,
                    out_elems: fh * fw * out_c,
                    cols_k: kh * kw * c,
                    cols_rows: oh * ow,
                });
                img = Some((fh, fw, out_c));
                features = fh * fw * out_c;
            }
        }
    }
    Ok(dims)
}

/// A trainable layer plus its optimizer slots.
#[derive(Clone, Debug)]
pub enum Layer {
    Dense(DenseLayer),
    Conv(ConvLayer),
}

impl Layer {
    pub fn weights(&self) -> &Tensor {
        match self {
            Layer::Dense(l) => &l.w,
            Layer::Conv(l) => &l.w,
        }
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        match self {
            Layer::Dense(l) => &mut l.w,
            Layer::Conv(l) => &mut l.w,
        }
    }

    pub fn bn(&self) -> &BnState {
        match self {
            Layer::Dense(l) => &l.bn,
            Layer::Conv(l) => &l.bn,
        }
    }

    pub fn bn_mut(&mut self) -> &mut BnState {
        match self {
            Layer::Dense(l) => &mut l.bn,
            Layer::Conv(l) => &mut l.bn,
        }
    }

    pub fn fan_in(&self) -> usize {
        match self {
            Layer::Dense(l) => l.fan_in,
            Layer::Conv(l) => l.fan_in(),
        }
    }
}

/// Full training configuration for one experiment.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub topology: Topology,
    pub scheme: Scheme,
    pub optimizer: OptimizerKind,
    pub eta0: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// false selects the non-binary reference mode: no sign binarization of
    /// weights or activations, scheme quantizations still applied.
    pub binarize: bool,
}

impl ModelConfig {
    pub fn new(topology: Topology, scheme: Scheme) -> Self {
        ModelConfig {
            topology,
            scheme,
            optimizer: OptimizerKind::adam(),
            eta0: 0.001,
            batch_size: 100,
            seed: 1,
            binarize: true,
        }
    }

    /// Switches off every sign binarization while keeping the scheme's
    /// gradient quantizations: the reference network of the robustness
    /// comparison.
    pub fn reference_nonbinary(mut self) -> Self {
        self.binarize = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch size must be at least 2 for batch statistics".into(),
            ));
        }
        if self.eta0 <= 0.0 {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.topology.layers.is_empty() {
            return Err(Error::InvalidConfig("topology has no layers".into()));
        }
        layer_dims(&self.topology).map(|_| ())
    }
}

/// Trainable model: layers plus optimizer state, built deterministically
/// from a seed.
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
    pub dims: Vec<LayerDims>,
    pub opt_w: Vec<ParamState>,
    pub opt_b: Vec<ParamState>,
}

impl Model {
    /// Glorot-uniform latent weights (sign-binarized for Bop), zero biases.
    pub fn build(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let dims = layer_dims(&config.topology)?;
        let base = config.scheme.base;
        let mut layers = Vec::with_capacity(dims.len());
        let mut opt_w = Vec::new();
        let mut opt_b = Vec::new();

        let mut img = match config.topology.input {
            InputSpec::Image { h, w, c } => Some((h, w, c)),
            InputSpec::Flat { .. } => None,
        };

        for (spec, d) in config.topology.layers.iter().zip(&dims) {
            let limit = (6.0 / (d.fan_in + d.fan_out) as f32).sqrt();
            let mut w: Vec<f32> = (0..d.fan_in * d.fan_out)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            if matches!(config.optimizer, OptimizerKind::Bop { .. }) {
                for v in w.iter_mut() {
                    *v = if *v >= 0.0 { 1.0 } else { -1.0 };
                }
            }
            store_round(&mut w, base);
            let w = Tensor::matrix(d.fan_in, d.fan_out, w)?;
            let bn = BnState::new(d.fan_out, base);
            opt_w.push(ParamState::new(
                d.fan_in * d.fan_out,
                &config.optimizer,
                base,
            ));
            // Bias gradients are tiny; binary16 storage of Adam's second
            // moment underflows and destabilizes the step, so the bias
            // slots stay f32. The accounted momenta class covers the
            // weight matrices only, matching the reference breakdown.
            opt_b.push(ParamState::new(d.fan_out, &config.optimizer, StorageDtype::F32));

            match *spec {
                LayerSpec::Dense { .. } => {
                    layers.push(Layer::Dense(DenseLayer::new(w, bn)));
                    img = None;
                }
                LayerSpec::Conv {
                    out_c,
                    kh,
                    kw,
                    stride,
                    pad,
                    pool_before_norm,
                    input_pool,
                } => {
                    let (h, wdt, c) = img.expect("validated conv input");
                    let geom = ConvGeom {
                        in_h: h,
                        in_w: wdt,
                        in_c: c,
                        kh,
                        kw,
                        stride,
                        pad,
                    };
                    let conv = ConvLayer::new(w, bn, geom, out_c, pool_before_norm, input_pool);
                    let g = conv.conv_geom();
                    let (mut fh, mut fw) = (g.out_h(), g.out_w());
                    if let Some((ph, pw)) = pool_before_norm {
                        fh /= ph;
                        fw /= pw;
                    }
                    img = Some((fh, fw, out_c));
                    layers.push(Layer::Conv(conv));
                }
            }
        }
        Ok(Model {
            config,
            layers,
            dims,
            opt_w,
            opt_b,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights().len() + l.bn().channels())
            .sum()
    }

    /// Storage dtype the scheme assigns to retained activations.
    pub fn x_dtype(&self) -> StorageDtype {
        self.config.scheme.x_dtype()
    }
}
