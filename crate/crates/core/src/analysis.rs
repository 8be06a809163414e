//! Static memory-footprint analysis, per-batch energy estimation and
//! gradient-density diagnostics.
//!
//! Everything here is a pure function of (topology, scheme, optimizer,
//! batch, cost model): no trained values enter. The footprint walk shares
//! its dimension source with the engine, and the engine's step trace is
//! checked against these predictions in the integration tests.

use crate::engine::{Lifetime, MacCounts, TraceRow};
use crate::error::{Error, Result};
use crate::layers::{BnVariant, DwFormat, DyFormat, Scheme};
use crate::model::{layer_dims, Topology};
use crate::optim::OptimizerKind;
use crate::tensor::StorageDtype;
use std::collections::BTreeMap;

pub const MIB: f64 = (1u64 << 20) as f64;

/// Lifetime-aware footprint of one training configuration.
///
/// Accounting conventions (fixed, shared with the engine's step trace):
/// - X holds the network input plus every binarizer input at the resolution
///   the engine retains, in the scheme's activation format. The low-cost
///   scheme accounts the whole class at one bit per element.
/// - dX and Y share one transient allocation sized by the largest layer;
///   dY is its own transient allocation. Transients count only their
///   largest layer, persistent classes sum over layers.
/// - Momenta cover the weight matrices (the bias momenta are noise and are
///   left out, matching the reference breakdown).
#[derive(Clone, Debug)]
pub struct MemoryReport {
    pub rows: Vec<TraceRow>,
    pub total_bytes: usize,
    pub phase_peaks: [usize; 3],
    pub macs: MacCounts,
}

impl MemoryReport {
    pub fn total_mib(&self) -> f64 {
        self.total_bytes as f64 / MIB
    }

    pub fn row(&self, name: &str) -> Option<&TraceRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Footprint ratio of a baseline over this report.
    pub fn saving_over(&self, baseline: &MemoryReport) -> f64 {
        baseline.total_bytes as f64 / self.total_bytes as f64
    }
}

fn x_access_bits(scheme: &Scheme) -> usize {
    scheme.x_dtype().bits()
}

/// Enumerates the variable classes of one training step and applies the
/// lifetime rules.
pub fn memory_footprint(
    topology: &Topology,
    scheme: &Scheme,
    optimizer: &OptimizerKind,
    batch: usize,
) -> Result<MemoryReport> {
    let dims = layer_dims(topology)?;
    let base = scheme.base;
    let base_bits = base.bits();
    let x_bits = x_access_bits(scheme);
    let dy_bits = scheme.dy_dtype().bits();
    let n_layers = dims.len();

    let mut x_elems = 0usize;
    let mut w_elems = 0usize;
    let mut beta_elems = 0usize;
    let mut stat_elems = 0usize;
    let mut mom_elems = 0usize;
    let mut shared_xy = 0usize;
    let mut dy_elems = 0usize;
    let mut macs = MacCounts::default();

    let slots = if scheme.bn == BnVariant::L2 { 2 } else { 3 };
    for (l, d) in dims.iter().enumerate() {
        x_elems += batch * d.in_elems;
        w_elems += d.fan_in * d.fan_out;
        beta_elems += d.fan_out;
        stat_elems += slots * d.fan_out;
        mom_elems += optimizer.momenta_slots() * d.fan_in * d.fan_out;
        let y = batch * d.y_rows * d.fan_out;
        shared_xy = shared_xy.max(y);
        if l > 0 {
            shared_xy = shared_xy.max(batch * d.in_elems);
        }
        if l == n_layers - 1 {
            shared_xy = shared_xy.max(batch * d.out_elems);
        }
        dy_elems = dy_elems.max(y);
        let m = (batch * d.y_rows * d.fan_in * d.fan_out) as u64;
        macs.forward += m;
        if l > 0 {
            macs.backward_dx += m;
        }
        macs.backward_dw += m;
    }

    let bits = |elems: usize, width: usize| (elems * width + 7) / 8;
    let x_bytes = bits(x_elems, x_bits);
    let w_bytes = bits(w_elems, base_bits);
    let dw_bytes = bits(w_elems, scheme.dw_dtype().bits());
    let beta_bytes = bits(2 * beta_elems, base_bits);
    let stat_bytes = bits(stat_elems, base_bits);
    let mom_bytes = bits(mom_elems, base_bits);
    let shared_bytes = bits(shared_xy, base_bits);
    let dy_bytes = bits(dy_elems, dy_bits);

    let persistent = x_bytes + w_bytes + dw_bytes + beta_bytes + stat_bytes + mom_bytes;

    // per-phase peaks under the same walk the engine records
    let mut fwd_peak = 0usize;
    let mut bwd_peak = 0usize;
    for (l, d) in dims.iter().enumerate() {
        let y = batch * d.y_rows * d.fan_out;
        let extra = if l == n_layers - 1 {
            batch * d.out_elems
        } else {
            0
        };
        fwd_peak = fwd_peak.max(persistent + bits(y + extra, base_bits));
        let incoming = batch * d.out_elems;
        let outgoing = if l > 0 { batch * d.in_elems } else { 0 };
        bwd_peak = bwd_peak.max(
            persistent + bits(y, dy_bits) + bits(incoming.max(outgoing), base_bits),
        );
    }
    let upd_extra = if scheme.dw == DwFormat::Bool {
        dims.iter().map(|d| d.fan_in * d.fan_out).max().unwrap_or(0)
    } else {
        0
    };
    let upd_peak = persistent + bits(upd_extra, base_bits);

    let rows = vec![
        TraceRow {
            name: "X".into(),
            lifetime: Lifetime::Persistent,
            dtype: scheme.x_dtype(),
            bytes: x_bytes,
        },
        TraceRow {
            name: "dX_Y".into(),
            lifetime: Lifetime::Transient,
            dtype: base,
            bytes: shared_bytes,
        },
        TraceRow {
            name: "mu_sigma".into(),
            lifetime: Lifetime::Persistent,
            dtype: base,
            bytes: stat_bytes,
        },
        TraceRow {
            name: "dY".into(),
            lifetime: Lifetime::Transient,
            dtype: scheme.dy_dtype(),
            bytes: dy_bytes,
        },
        TraceRow {
            name: "W".into(),
            lifetime: Lifetime::Persistent,
            dtype: base,
            bytes: w_bytes,
        },
        TraceRow {
            name: "dW".into(),
            lifetime: Lifetime::Persistent,
            dtype: scheme.dw_dtype(),
            bytes: dw_bytes,
        },
        TraceRow {
            name: "beta_dbeta".into(),
            lifetime: Lifetime::Persistent,
            dtype: base,
            bytes: beta_bytes,
        },
        TraceRow {
            name: "momenta".into(),
            lifetime: Lifetime::Persistent,
            dtype: base,
            bytes: mom_bytes,
        },
    ];

    Ok(MemoryReport {
        rows,
        total_bytes: persistent + shared_bytes + dy_bytes,
        phase_peaks: [fwd_peak, bwd_peak, upd_peak],
        macs,
    })
}

// ---------------------------------------------------------------------------
// Energy
// ---------------------------------------------------------------------------

/// Per-operation and per-access energies in joules, keyed by flat text names
/// ("op.f32.mul", "mem.offchip.word32", ...). Every entry is overridable via
/// the key-value text format.
#[derive(Clone, Debug)]
pub struct CostModel {
    entries: BTreeMap<String, f64>,
}

impl Default for CostModel {
    /// 45 nm-class arithmetic energies and a cacheless off-chip access cost.
    fn default() -> Self {
        let mut entries = BTreeMap::new();
        for (k, v) in [
            ("op.f32.add", 0.9e-12),
            ("op.f32.mul", 3.7e-12),
            ("op.f16.add", 0.4e-12),
            ("op.f16.mul", 1.1e-12),
            ("op.int32.add", 0.1e-12),
            ("op.int32.mul", 3.1e-12),
            ("op.int32.shift", 0.1e-12),
            // one 64-lane XNOR or popcount step over a packed word
            ("op.bit.word", 0.1e-12),
            // off-chip access per 32-bit word; sub-word formats are billed
            // per element at byte granularity
            ("mem.offchip.word32", 640e-12),
        ] {
            entries.insert(k.to_string(), v);
        }
        CostModel { entries }
    }
}

impl CostModel {
    pub fn get(&self, key: &str) -> Result<f64> {
        self.entries
            .get(key)
            .copied()
            .ok_or_else(|| Error::MissingCostEntry(key.into()))
    }

    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        if value <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "cost model energies must be positive: {key} = {value}"
            )));
        }
        self.entries.insert(key.to_string(), value);
        Ok(())
    }

    /// Parses lines of the flat "key = value" format (joules), `#` comments.
    pub fn parse_overrides(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("cost model line {}: expected key = value", no + 1))
            })?;
            let key = k.trim();
            if !self.entries.contains_key(key) {
                return Err(Error::InvalidConfig(format!(
                    "unknown cost model key: {key}"
                )));
            }
            let value: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad energy value: {}", v.trim())))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(&format!("{k} = {v:e}\n"));
        }
        s
    }

    fn add_of(&self, base: StorageDtype) -> Result<f64> {
        match base {
            StorageDtype::F16 => self.get("op.f16.add"),
            _ => self.get("op.f32.add"),
        }
    }

    fn mul_of(&self, base: StorageDtype) -> Result<f64> {
        match base {
            StorageDtype::F16 => self.get("op.f16.mul"),
            _ => self.get("op.f32.mul"),
        }
    }

    /// Access energy of one element stored with `bits` width: off-chip words
    /// scaled by width, floored at byte granularity.
    fn access(&self, bits: usize) -> Result<f64> {
        Ok(self.get("mem.offchip.word32")? * (bits.max(8) as f64) / 32.0)
    }
}

/// Energy split of one training step.
#[derive(Clone, Copy, Debug, Default)]
pub struct EnergyReport {
    pub ops_j: f64,
    pub mem_j: f64,
}

impl EnergyReport {
    pub fn total_j(&self) -> f64 {
        self.ops_j + self.mem_j
    }

    pub fn total_mj(&self) -> f64 {
        self.total_j() * 1e3
    }

    pub fn saving_over(&self, baseline: &EnergyReport) -> f64 {
        baseline.total_j() / self.total_j()
    }
}

/// Per-batch training energy under the step walk of the two algorithms.
///
/// Operation counting: matrix multiplies dominate and are costed per MAC by
/// operand format (float MACs at mul+add; power-of-two times binary as
/// shift + sign-flip + accumulate int32 ops; binary times binary as packed
/// 64-lane XNOR/popcount words plus one integer fold per output).
/// Normalization, quantizer, pooling and optimizer work is costed per
/// element. Memory traffic bills every buffer one write and one read per
/// use-site per step (lowered patch matrices are buffers, and the backward
/// scatter-accumulate performs a read-modify-write per contribution), with
/// per-element access cost scaled by storage width and floored at one byte.
pub fn energy_estimate(
    topology: &Topology,
    scheme: &Scheme,
    optimizer: &OptimizerKind,
    batch: usize,
    binarize: bool,
    cost: &CostModel,
    include_optimizer: bool,
) -> Result<EnergyReport> {
    let dims = layer_dims(topology)?;
    let n_layers = dims.len();
    let base = scheme.base;
    let badd = cost.add_of(base)?;
    let bmul = cost.mul_of(base)?;
    let iadd = cost.get("op.int32.add")?;
    let ishift = cost.get("op.int32.shift")?;
    let bitword = cost.get("op.bit.word")?;
    let base_acc = cost.access(base.bits())?;
    let x_acc = cost.access(x_access_bits(scheme))?;
    let dy_acc = cost.access(scheme.dy_dtype().bits())?;
    let dw_acc = cost.access(scheme.dw_dtype().bits())?;

    let mut ops = 0.0f64;
    let mut mem = 0.0f64;

    for (l, d) in dims.iter().enumerate() {
        let first = l == 0;
        let bin_layer = binarize && !first;
        let macs = (batch * d.y_rows * d.fan_in * d.fan_out) as f64;
        let y = (batch * d.y_rows * d.fan_out) as f64;
        let out = (batch * d.out_elems) as f64;
        let x_in = (batch * d.in_elems) as f64;
        let w = (d.fan_in * d.fan_out) as f64;
        let cols = (batch * d.cols_rows * d.cols_k) as f64; // 0 for dense

        // -------- forward --------
        // matmul: the packed XNOR-popcount kernel only exists once
        // activations are stored as bits; schemes that keep them in float
        // formats run float multiplies
        let packed = bin_layer && !scheme.retains_hp_activations();
        if packed {
            let words = (d.cols_k.max(d.fan_in) + 63) / 64;
            let outputs = (batch * d.y_rows * d.fan_out) as f64;
            ops += outputs * (words as f64 * 2.0 * bitword + iadd);
        } else if binarize && first {
            // real input by binary weights: sign-flip and accumulate
            ops += macs * (iadd + badd);
        } else {
            ops += macs * (bmul + badd);
        }
        // activation binarization ahead of this layer
        if bin_layer {
            ops += x_in * iadd;
        }
        // normalization forward (+ alpha pass for the l1 family)
        let (bn_f_add, bn_f_mul) = match scheme.bn {
            BnVariant::L2 => (4.0, 4.0),
            _ => (4.0, 2.0),
        };
        ops += out * (bn_f_add * badd + bn_f_mul * bmul);
        // pooling comparisons
        if d.y_rows != d.out_rows {
            ops += y * badd;
        }

        // traffic: input read through the lowering (the patch matrix is
        // written then read; re-lowered in the backward for the
        // weight-gradient product), product written, normalized output
        // written. Weights are the stationary matmul operand and stream
        // on-chip; their off-chip maintenance is the update phase's.
        let in_acc = if first { base_acc } else { x_acc };
        if d.is_conv {
            mem += x_in * in_acc; // lowering reads the activation
            mem += cols * 2.0 * in_acc; // patch matrix write + read
        } else {
            mem += x_in * in_acc;
        }
        mem += y * base_acc; // product write
        if d.y_rows != d.out_rows {
            mem += (y + out) * base_acc; // pool read + write
        }
        mem += y.min(out) * base_acc; // normalization reads its input
        let out_acc = if l == n_layers - 1 { base_acc } else { x_acc };
        mem += out * out_acc; // normalized activation write

        // -------- backward --------
        // normalization backward reads the incoming gradient and the
        // retained activation, writes the raw product gradient
        let (bn_b_add, bn_b_mul) = match scheme.bn {
            BnVariant::L2 => (5.0, 4.0),
            _ => (5.0, 2.0),
        };
        ops += out * (bn_b_add * badd + bn_b_mul * bmul);
        mem += out * base_acc; // incoming gradient read
        mem += out * out_acc; // activation (or its signs) read
        if d.y_rows != d.out_rows {
            ops += y * badd; // pool backward routing
        }
        mem += y * base_acc; // raw dY write
        // gradient quantizer
        match scheme.dy {
            DyFormat::Po2(_) | DyFormat::BlockFp(_) => {
                ops += y * (2.0 * ishift + iadd);
            }
            DyFormat::F16 => ops += y * badd,
            DyFormat::F32 => {}
        }
        mem += y * base_acc; // quantizer reads raw dY
        mem += y * dy_acc; // stored gradient write
        let dy_reads = if l > 0 { 2.0 } else { 1.0 };
        mem += y * dy_acc * dy_reads; // read per consuming matmul

        let po2_like = matches!(scheme.dy, DyFormat::Po2(_) | DyFormat::BlockFp(_)) && binarize;
        let mac_cost = if po2_like {
            ishift + 2.0 * iadd // shift, sign-flip, accumulate
        } else {
            bmul + badd
        };
        // dX product (skipped for the first layer) and scatter-accumulate
        if l > 0 {
            ops += macs * mac_cost;
            if d.is_conv {
                mem += cols * base_acc; // patch-gradient write
                mem += cols * 3.0 * base_acc; // scatter read + rmw output
            } else {
                mem += x_in * base_acc; // dX write
            }
            // straight-through masking needs the retained activation
            if binarize && scheme.retains_hp_activations() {
                ops += x_in * badd;
                mem += x_in * (base_acc + 2.0 * base_acc);
            }
        }
        // dW product: re-lower the input, write the stored gradient
        ops += macs * mac_cost;
        if d.is_conv {
            mem += x_in * in_acc;
            mem += cols * 2.0 * in_acc;
        } else {
            mem += x_in * in_acc;
        }
        // -------- update --------
        // Weight-gradient storage and the optimizer step form the
        // per-step parameter-maintenance cost, excludable as a block.
        if include_optimizer {
            mem += w * dw_acc; // dW write
            match scheme.dw {
                DwFormat::Bool => ops += w * iadd, // binarize dW
                DwFormat::F16 => ops += w * badd,
                DwFormat::F32 => {}
            }
            let (o_add, o_mul) = match optimizer {
                OptimizerKind::Adam { .. } => (5.0, 5.0),
                _ => (2.0, 2.0),
            };
            let params = w + d.fan_out as f64;
            ops += params * (o_add * badd + o_mul * bmul);
            if scheme.dw == DwFormat::Bool {
                ops += w * bmul; // attenuation expansion
            }
            mem += w * dw_acc; // dW read
            mem += params * 2.0 * base_acc; // parameter read + write
            mem +=
                params * 2.0 * optimizer.momenta_slots() as f64 * base_acc; // momenta read + write
        }

        // loss layer: softmax and cross entropy over the logits
        if l == n_layers - 1 {
            ops += out * (5.0 * badd + 3.0 * bmul);
            mem += out * 2.0 * base_acc; // logits read, gradient write
        }
    }

    Ok(EnergyReport {
        ops_j: ops,
        mem_j: mem,
    })
}

// ---------------------------------------------------------------------------
// Gradient density
// ---------------------------------------------------------------------------

/// Density of an N-element vector: ||v||_1^2 / (N ||v||_2^2), in (0, 1].
pub fn gradient_density(v: &[f32]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::ZeroTensor);
    }
    let l1: f64 = v.iter().map(|&x| (x as f64).abs()).sum();
    let l2sq: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum();
    if l2sq == 0.0 {
        return Err(Error::ZeroTensor);
    }
    Ok(l1 * l1 / (v.len() as f64 * l2sq))
}

/// One epoch's densities computed on the snapshot prefix up to that epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityPoint {
    pub epoch: usize,
    pub gradient_density: f64,
    pub noise_density: f64,
    /// Raised when the two densities differ by more than an order of
    /// magnitude.
    pub flagged: bool,
}

/// Turns per-epoch (mean, sd) snapshots of unquantized weight gradients into
/// the two density series: phi over the vector of per-epoch means and phi
/// over the vector of per-epoch standard deviations.
pub fn density_trace(snapshots: &[(f32, f32)]) -> Result<Vec<DensityPoint>> {
    if snapshots.len() < 2 {
        return Err(Error::InvalidConfig(
            "density trace needs at least two epochs".into(),
        ));
    }
    let means: Vec<f32> = snapshots.iter().map(|s| s.0).collect();
    let sds: Vec<f32> = snapshots.iter().map(|s| s.1).collect();
    let mut out = Vec::new();
    for e in 2..=snapshots.len() {
        let g = gradient_density(&means[..e])?;
        let n = gradient_density(&sds[..e])?;
        let ratio = if g > n { g / n } else { n / g };
        out.push(DensityPoint {
            epoch: e,
            gradient_density: g,
            noise_density: n,
            flagged: ratio > 10.0,
        });
    }
    Ok(out)
}

/// Convenience: footprint of the named Table-3 configurations.
pub fn footprint_of(name: &str, scheme: &Scheme, batch: usize) -> Result<MemoryReport> {
    let topo = Topology::by_name(name)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown topology {name}")))?;
    memory_footprint(&topo, scheme, &OptimizerKind::adam(), batch)
}
