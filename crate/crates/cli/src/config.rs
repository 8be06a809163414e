//! Experiment configuration: TOML schema, preset expansion and digests.
//!
//! Unknown keys are rejected everywhere. Presets expand to fully explicit
//! flag sets, and the expanded form (plus its SHA-256 digest) is what every
//! artifact records, so runs are replayable from their outputs alone.

use anyhow::{anyhow, bail, Context, Result};
use binlow_core::layers::{BnVariant, DwFormat, DyFormat, Scheme};
use binlow_core::model::{InputSpec, LayerSpec, ModelConfig, Topology};
use binlow_core::optim::{LrSchedule, OptimizerKind};
use binlow_core::tensor::StorageDtype;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub scheme: SchemeSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    pub run: RunSection,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Zoo name: mlp5_256 | cnv | cnv_reduced | binarynet. Mutually
    /// exclusive with an inline layer list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<InputSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerSection>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<usize>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSection {
    pub kind: String, // dense | conv
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_c: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_before_norm: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_pool: Option<usize>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    /// "standard" or "proposed"; mutually exclusive with explicit flags.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<String>,
    /// false selects the non-binary reference mode.
    #[serde(default = "default_true")]
    pub binarize: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "default_adam")]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta0: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f32>,
}

fn default_adam() -> String {
    "adam".into()
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            kind: "adam".into(),
            eta0: None,
            momentum: None,
            gamma: None,
            tau: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default = "default_dev_based")]
    pub kind: String, // dev_based | fixed_decay | constant
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<f32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub milestones: Vec<usize>,
}

fn default_dev_based() -> String {
    "dev_based".into()
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            kind: "dev_based".into(),
            patience: None,
            factor: None,
            milestones: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// mnist | cifar10
    pub dataset: String,
    /// Directory holding the dataset files; defaults to $BINLOW_DATA/<dataset>.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density_layer: Option<usize>,
    /// Cap on training samples (0 = all), applied before the dev split.
    #[serde(default)]
    pub train_subset: usize,
    #[serde(default)]
    pub test_subset: usize,
    #[serde(default = "default_true")]
    pub include_optimizer_energy: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_model: Option<PathBuf>,
}

/// A parsed, preset-expanded experiment.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub raw: ExperimentConfig,
    pub topology: Topology,
    pub scheme: Scheme,
    pub binarize: bool,
    pub optimizer: OptimizerKind,
    pub eta0: f32,
    pub schedule: LrSchedule,
}

impl Experiment {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            topology: self.topology.clone(),
            scheme: self.scheme,
            optimizer: self.optimizer,
            eta0: self.eta0,
            batch_size: self.raw.run.batch_size,
            seed: self.raw.run.seed,
            binarize: self.binarize,
        }
    }

    /// Dataset directory: explicit data_dir, else $BINLOW_DATA/<dataset>.
    pub fn data_dir(&self) -> Result<PathBuf> {
        if let Some(d) = &self.raw.run.data_dir {
            return Ok(d.clone());
        }
        let root = std::env::var("BINLOW_DATA")
            .map_err(|_| anyhow!("set run.data_dir or the BINLOW_DATA environment variable"))?;
        Ok(PathBuf::from(root).join(&self.raw.run.dataset))
    }
}

fn parse_dw(s: &str) -> Result<DwFormat> {
    Ok(match s {
        "f32" => DwFormat::F32,
        "f16" => DwFormat::F16,
        "bool" => DwFormat::Bool,
        _ => bail!("unknown dw format: {s} (f32 | f16 | bool)"),
    })
}

fn parse_dy(s: &str) -> Result<DyFormat> {
    if let Some(k) = s.strip_prefix("po2_") {
        return Ok(DyFormat::Po2(k.parse()?));
    }
    if let Some(k) = s.strip_prefix("int") {
        return Ok(DyFormat::BlockFp(k.parse()?));
    }
    Ok(match s {
        "f32" => DyFormat::F32,
        "f16" => DyFormat::F16,
        _ => bail!("unknown dy format: {s} (f32 | f16 | po2_K | intK)"),
    })
}

fn parse_bn(s: &str) -> Result<BnVariant> {
    Ok(match s {
        "l2" => BnVariant::L2,
        "l1" => BnVariant::L1Plain,
        "l1_bnn" => BnVariant::L1Bnn,
        _ => bail!("unknown bn variant: {s} (l2 | l1 | l1_bnn)"),
    })
}

fn parse_base(s: &str) -> Result<StorageDtype> {
    Ok(match s {
        "f32" => StorageDtype::F32,
        "f16" => StorageDtype::F16,
        _ => bail!("unknown base dtype: {s} (f32 | f16)"),
    })
}

fn scheme_of(section: &SchemeSection) -> Result<Scheme> {
    if let Some(p) = &section.preset {
        if section.dw.is_some() || section.dy.is_some() || section.bn.is_some() || section.base.is_some()
        {
            bail!("scheme.preset is mutually exclusive with explicit flags");
        }
        return match p.as_str() {
            "standard" => Ok(Scheme::standard()),
            "proposed" => Ok(Scheme::proposed()),
            _ => bail!("unknown preset: {p} (standard | proposed)"),
        };
    }
    Ok(Scheme {
        dw: parse_dw(section.dw.as_deref().unwrap_or("f32"))?,
        dy: parse_dy(section.dy.as_deref().unwrap_or("f32"))?,
        bn: parse_bn(section.bn.as_deref().unwrap_or("l2"))?,
        base: parse_base(section.base.as_deref().unwrap_or("f32"))?,
    })
}

fn topology_of(section: &ModelSection) -> Result<Topology> {
    if let Some(name) = &section.topology {
        if section.input.is_some() || !section.layers.is_empty() {
            bail!("model.topology is mutually exclusive with inline layers");
        }
        return Topology::by_name(name).ok_or_else(|| {
            anyhow!("unknown topology: {name} (mlp5_256 | cnv | cnv_reduced | binarynet)")
        });
    }
    let input = section
        .input
        .as_ref()
        .ok_or_else(|| anyhow!("inline model needs [model.input]"))?;
    let input = match (input.features, input.h, input.w, input.c) {
        (Some(f), None, None, None) => InputSpec::Flat { features: f },
        (None, Some(h), Some(w), Some(c)) => InputSpec::Image { h, w, c },
        _ => bail!("model.input needs either features or all of h, w, c"),
    };
    let mut layers = Vec::new();
    for (i, l) in section.layers.iter().enumerate() {
        match l.kind.as_str() {
            "dense" => layers.push(LayerSpec::Dense {
                out: l.out.ok_or_else(|| anyhow!("layer {i}: dense needs out"))?,
            }),
            "conv" => {
                let k = l.kernel.unwrap_or(3);
                layers.push(LayerSpec::Conv {
                    out_c: l.out_c.ok_or_else(|| anyhow!("layer {i}: conv needs out_c"))?,
                    kh: k,
                    kw: k,
                    stride: l.stride.unwrap_or(1),
                    pad: l.pad.unwrap_or(0),
                    pool_before_norm: l.pool_before_norm.map(|p| (p, p)),
                    input_pool: l.input_pool.map(|p| (p, p)),
                });
            }
            other => bail!("layer {i}: unknown kind {other}"),
        }
    }
    if layers.is_empty() {
        bail!("inline model has no layers");
    }
    Ok(Topology {
        input,
        layers,
        name: "inline".into(),
    })
}

fn optimizer_of(section: &OptimizerSection) -> Result<(OptimizerKind, f32)> {
    let kind = match section.kind.as_str() {
        "adam" => OptimizerKind::adam(),
        "sgd_momentum" => {
            let mut k = OptimizerKind::sgd_momentum();
            if let (OptimizerKind::SgdMomentum { momentum }, Some(m)) = (&mut k, section.momentum) {
                *momentum = m;
            }
            k
        }
        "bop" => {
            let mut k = OptimizerKind::bop();
            if let OptimizerKind::Bop { gamma, tau } = &mut k {
                if let Some(g) = section.gamma {
                    *gamma = g;
                }
                if let Some(t) = section.tau {
                    *tau = t;
                }
            }
            k
        }
        other => bail!("unknown optimizer: {other} (adam | sgd_momentum | bop)"),
    };
    // development-schedule defaults: 0.001 everywhere except SGD's 0.1
    let eta0 = section.eta0.unwrap_or(match kind {
        OptimizerKind::SgdMomentum { .. } => 0.1,
        _ => 0.001,
    });
    Ok((kind, eta0))
}

fn schedule_of(section: &ScheduleSection) -> Result<LrSchedule> {
    Ok(match section.kind.as_str() {
        "dev_based" => LrSchedule::dev_based(
            section.patience.unwrap_or(50),
            section.factor.unwrap_or(0.5),
        ),
        "fixed_decay" => {
            if section.milestones.is_empty() {
                bail!("fixed_decay needs milestones");
            }
            LrSchedule::fixed_decay(section.milestones.clone(), section.factor.unwrap_or(0.1))
        }
        "constant" => LrSchedule::Constant,
        other => bail!("unknown schedule: {other} (dev_based | fixed_decay | constant)"),
    })
}

/// Parses a config file and expands presets into explicit flags.
pub fn load(path: &Path) -> Result<Experiment> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<Experiment> {
    let raw: ExperimentConfig = toml::from_str(text).context("parsing config")?;
    if raw.run.batch_size < 2 {
        bail!("run.batch_size must be at least 2");
    }
    let topology = topology_of(&raw.model)?;
    let scheme = scheme_of(&raw.scheme)?;
    let (optimizer, eta0) = optimizer_of(&raw.optimizer)?;
    let schedule = schedule_of(&raw.schedule)?;
    match raw.run.dataset.as_str() {
        "mnist" | "cifar10" => {}
        other => bail!("unknown dataset: {other} (mnist | cifar10)"),
    }
    Ok(Experiment {
        raw,
        topology,
        scheme,
        binarize: true,
        optimizer,
        eta0,
        schedule,
    }
    .apply_scheme_binarize())
}

impl Experiment {
    fn apply_scheme_binarize(mut self) -> Self {
        self.binarize = self.raw.scheme.binarize;
        self
    }

    /// Fully explicit flag rendering of this experiment, embedded in every
    /// artifact for provenance.
    pub fn expanded_toml(&self) -> String {
        let scheme_name = |s: &Scheme| {
            let dw = match s.dw {
                DwFormat::F32 => "f32",
                DwFormat::F16 => "f16",
                DwFormat::Bool => "bool",
            };
            let dy = match s.dy {
                DyFormat::F32 => "f32".into(),
                DyFormat::F16 => "f16".into(),
                DyFormat::Po2(k) => format!("po2_{k}"),
                DyFormat::BlockFp(k) => format!("int{k}"),
            };
            let bn = match s.bn {
                BnVariant::L2 => "l2",
                BnVariant::L1Plain => "l1",
                BnVariant::L1Bnn => "l1_bnn",
            };
            let base = match s.base {
                StorageDtype::F16 => "f16",
                _ => "f32",
            };
            (dw.to_string(), dy, bn.to_string(), base.to_string())
        };
        let (dw, dy, bn, base) = scheme_name(&self.scheme);
        let mut raw = self.raw.clone();
        raw.scheme = SchemeSection {
            preset: None,
            dw: Some(dw),
            dy: Some(dy),
            bn: Some(bn),
            base: Some(base),
            binarize: self.binarize,
        };
        raw.optimizer.eta0 = Some(self.eta0);
        toml::to_string_pretty(&raw).expect("serializing expanded config")
    }

    /// SHA-256 over the expanded config with the output directory cleared:
    /// the digest identifies the experiment, not where artifacts land.
    pub fn digest(&self) -> String {
        self.digest_bytes()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn digest_bytes(&self) -> Vec<u8> {
        let mut identity = self.clone();
        identity.raw.run.out_dir = PathBuf::new();
        let mut h = Sha256::new();
        h.update(identity.expanded_toml().as_bytes());
        h.finalize().to_vec()
    }
}
