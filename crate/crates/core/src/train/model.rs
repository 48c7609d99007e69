//! The trainable model: embedding, one or two sequence-mixing blocks over
//! the coefficient-dynamics engine, optional gated MLPs, and a vocabulary
//! head. The dynamics spec acts as a template: its structure (kinds,
//! constants, activations) is fixed, while every input-derived rule's
//! weights become trainable parameters.

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tape::{EvoTape, MapKind, NodeId, NormTape, ScalarReadout, Tape};
use crate::dynamics::{
    forward_recurrent, Activation, DerivedScalar, DirectionSource, DynamicsSpec, EvolutionKind,
    KernelFeatureMap, NormalizationRule, ReadoutMap, ScalarRule, ScalingRule, VectorRule,
};
use crate::error::{Error, Result};
use crate::tasks::IGNORE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockStyle {
    /// Attention-style: norm, projections, mix, norm, output projection.
    Type1,
    /// Recurrent-style: adds a multiplicative silu gate around the mix;
    /// requires a linear readout.
    Type2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Preprocessing {
    None,
    /// Causal depthwise convolution on q, k, v.
    ShortConv { width: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dynamics: DynamicsSpec,
    pub layers: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub positional_embedding: bool,
    pub block_style: BlockStyle,
    pub interleaved_mlp: bool,
    pub mlp_inner: usize,
    pub preprocessing: Preprocessing,
}

impl ModelConfig {
    /// A small attention-style model around the given dynamics.
    pub fn desk(dynamics: DynamicsSpec, vocab_size: usize, max_seq_len: usize) -> Self {
        ModelConfig {
            dynamics,
            layers: 2,
            vocab_size,
            max_seq_len,
            positional_embedding: false,
            block_style: BlockStyle::Type1,
            interleaved_mlp: true,
            mlp_inner: 64,
            preprocessing: Preprocessing::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dynamics.validate()?;
        if !(1..=2).contains(&self.layers) {
            return Err(Error::InvalidConfig("layers must be 1 or 2".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab must be at least 2".into()));
        }
        if self.block_style == BlockStyle::Type2 && !self.dynamics.readout.is_linear() {
            return Err(Error::InvalidConfig(
                "the gated block style requires an identity readout".into(),
            ));
        }
        if matches!(self.dynamics.readout, ReadoutMap::KernelProduct { .. })
            && !self.dynamics.evolution.is_identity()
        {
            return Err(Error::InvalidConfig(
                "kernel-product readouts train only with identity evolution (feature maps do not commute with state updates)"
                    .into(),
            ));
        }
        if self.dynamics.normalize_keys {
            return Err(Error::InvalidConfig(
                "key normalization is not part of the trainable path; rank-one rules normalize their direction internally"
                    .into(),
            ));
        }
        if self.interleaved_mlp && self.mlp_inner == 0 {
            return Err(Error::InvalidConfig("mlp_inner must be positive".into()));
        }
        if let Preprocessing::ShortConv { width } = self.preprocessing {
            if width == 0 {
                return Err(Error::InvalidConfig("conv width must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array2<f64>,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// All trainable state, flat and order-stable.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelParams {
    pub entries: Vec<ParamEntry>,
}

impl ModelParams {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.iter().all(|v| v.is_finite()))
    }

    /// Initialize from the config template. Projection-like matrices use
    /// per-entry variance `1/fan_in`; input-derived rule weights copy the
    /// template so preset parameterizations (bias ranges, scales) survive.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = config.dynamics.dims;
        let (d, n, d_v) = (dims.d, dims.n, dims.d_v);
        let mut entries = Vec::new();
        let mut randn = |rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((rows, cols), |_| {
                let g: f64 = StandardNormal.sample(rng);
                g * std
            })
        };
        let dinv = 1.0 / (d as f64).sqrt();

        let mut push = |entries: &mut Vec<ParamEntry>, name: String, value: Array2<f64>, decay: bool| {
            entries.push(ParamEntry { name, value, decay });
        };

        push(&mut entries, "embed".into(), randn(config.vocab_size, d, dinv, &mut rng), true);
        if config.positional_embedding {
            push(&mut entries, "pos_embed".into(), randn(config.max_seq_len, d, dinv, &mut rng), true);
        }
        for l in 0..config.layers {
            push(&mut entries, format!("{l}.norm_attn"), Array2::ones((1, d)), false);
            push(&mut entries, format!("{l}.w_q"), randn(n, d, dinv, &mut rng), true);
            push(&mut entries, format!("{l}.w_k"), randn(n, d, dinv, &mut rng), true);
            push(&mut entries, format!("{l}.w_v"), randn(d_v, d, dinv, &mut rng), true);
            if let Preprocessing::ShortConv { width } = config.preprocessing {
                // Current-tap identity plus noise keeps the start near a
                // plain projection.
                for (suffix, ch) in [("conv_q", n), ("conv_k", n), ("conv_v", d_v)] {
                    let mut kernel = randn(ch, width, 0.1, &mut rng);
                    for c in 0..ch {
                        kernel[[c, width - 1]] += 1.0;
                    }
                    push(&mut entries, format!("{l}.{suffix}"), kernel, true);
                }
            }
            let mut derived = |entries: &mut Vec<ParamEntry>, prefix: String, ds: &DerivedScalar| {
                let heads = ds.w.len();
                let mut w = Array2::zeros((heads, d));
                let mut b = Array2::zeros((1, heads));
                for (h, row) in ds.w.iter().enumerate() {
                    for (c, v) in row.iter().enumerate() {
                        w[[h, c]] = *v;
                    }
                    b[[0, h]] = ds.bias[h];
                }
                push(entries, format!("{prefix}_w"), w, true);
                push(entries, format!("{prefix}_b"), b, false);
            };
            match &config.dynamics.evolution.kind {
                EvolutionKind::Identity => {}
                EvolutionKind::Scalar { rule } => {
                    if let ScalarRule::InputDerived(ds) = rule {
                        derived(&mut entries, format!("{l}.evo"), ds);
                    }
                }
                EvolutionKind::Diagonal { rule } => {
                    if let VectorRule::InputDerived { w, bias, .. } = rule {
                        let mut wm = Array2::zeros((n, d));
                        let mut bm = Array2::zeros((1, n));
                        for (r, row) in w.iter().enumerate() {
                            for (c, v) in row.iter().enumerate() {
                                wm[[r, c]] = *v;
                            }
                            bm[[0, r]] = bias[r];
                        }
                        push(&mut entries, format!("{l}.evo_w"), wm, true);
                        push(&mut entries, format!("{l}.evo_b"), bm, false);
                    }
                }
                EvolutionKind::Householder(h) => {
                    if let ScalarRule::InputDerived(ds) = &h.beta {
                        derived(&mut entries, format!("{l}.beta"), ds);
                    }
                    if let DirectionSource::InputDerived { w } = &h.direction {
                        let mut wm = Array2::zeros((n, d));
                        for (r, row) in w.iter().enumerate() {
                            for (c, v) in row.iter().enumerate() {
                                wm[[r, c]] = *v;
                            }
                        }
                        push(&mut entries, format!("{l}.dir_w"), wm, true);
                    }
                }
                EvolutionKind::GatedHouseholder { gate, householder } => {
                    if let ScalarRule::InputDerived(ds) = gate {
                        derived(&mut entries, format!("{l}.gate"), ds);
                    }
                    if let ScalarRule::InputDerived(ds) = &householder.beta {
                        derived(&mut entries, format!("{l}.beta"), ds);
                    }
                    if let DirectionSource::InputDerived { w } = &householder.direction {
                        let mut wm = Array2::zeros((n, d));
                        for (r, row) in w.iter().enumerate() {
                            for (c, v) in row.iter().enumerate() {
                                wm[[r, c]] = *v;
                            }
                        }
                        push(&mut entries, format!("{l}.dir_w"), wm, true);
                    }
                }
            }
            if let ScalingRule::InputDerived(ds) = &config.dynamics.scaling {
                derived(&mut entries, format!("{l}.scale"), ds);
            }
            match &config.dynamics.normalization {
                NormalizationRule::ExternalState { output_gate, .. } => {
                    if let ScalarRule::InputDerived(ds) = output_gate {
                        derived(&mut entries, format!("{l}.ogate"), ds);
                    }
                }
                NormalizationRule::PositionDerived(ds) => {
                    derived(&mut entries, format!("{l}.eta"), ds);
                }
                _ => {}
            }
            push(&mut entries, format!("{l}.norm_out"), Array2::ones((1, d_v)), false);
            push(&mut entries, format!("{l}.w_o"), randn(d, d_v, 1.0 / (d_v as f64).sqrt(), &mut rng), true);
            if config.block_style == BlockStyle::Type2 {
                push(&mut entries, format!("{l}.w_g"), randn(d_v, d, dinv, &mut rng), true);
            }
            if config.interleaved_mlp {
                let inner = config.mlp_inner;
                push(&mut entries, format!("{l}.norm_mlp"), Array2::ones((1, d)), false);
                push(&mut entries, format!("{l}.mlp_gate"), randn(inner, d, dinv, &mut rng), true);
                push(&mut entries, format!("{l}.mlp_up"), randn(inner, d, dinv, &mut rng), true);
                push(
                    &mut entries,
                    format!("{l}.mlp_down"),
                    randn(d, inner, 1.0 / (inner as f64).sqrt(), &mut rng),
                    true,
                );
            }
        }
        push(&mut entries, "final_norm".into(), Array2::ones((1, d)), false);
        push(&mut entries, "head".into(), randn(config.vocab_size, d, dinv, &mut rng), true);
        Ok(ModelParams { entries })
    }

    /// Materialize the dynamics spec of layer `l` with the current trainable
    /// values substituted into every input-derived rule.
    pub fn bind_spec(&self, config: &ModelConfig, layer: usize) -> Result<DynamicsSpec> {
        let mut spec = config.dynamics.clone();
        let read_derived = |prefix: &str, template: &DerivedScalar| -> Result<DerivedScalar> {
            let w = self
                .get(&format!("{prefix}_w"))
                .ok_or_else(|| Error::Other(format!("missing {prefix}_w")))?;
            let b = self
                .get(&format!("{prefix}_b"))
                .ok_or_else(|| Error::Other(format!("missing {prefix}_b")))?;
            Ok(DerivedScalar {
                w: w.rows().into_iter().map(|r| r.to_vec()).collect(),
                bias: b.row(0).to_vec(),
                activation: template.activation,
                scale: template.scale,
            })
        };
        match &mut spec.evolution.kind {
            EvolutionKind::Identity => {}
            EvolutionKind::Scalar { rule } => {
                if let ScalarRule::InputDerived(ds) = rule {
                    *ds = read_derived(&format!("{layer}.evo"), ds)?;
                }
            }
            EvolutionKind::Diagonal { rule } => {
                if let VectorRule::InputDerived { w, bias, .. } = rule {
                    let wm = self.get(&format!("{layer}.evo_w")).ok_or_else(|| Error::Other("missing evo_w".into()))?;
                    let bm = self.get(&format!("{layer}.evo_b")).ok_or_else(|| Error::Other("missing evo_b".into()))?;
                    *w = wm.rows().into_iter().map(|r| r.to_vec()).collect();
                    *bias = bm.row(0).to_vec();
                }
            }
            EvolutionKind::Householder(h) => {
                if let ScalarRule::InputDerived(ds) = &mut h.beta {
                    *ds = read_derived(&format!("{layer}.beta"), ds)?;
                }
                if let DirectionSource::InputDerived { w } = &mut h.direction {
                    let wm = self.get(&format!("{layer}.dir_w")).ok_or_else(|| Error::Other("missing dir_w".into()))?;
                    *w = wm.rows().into_iter().map(|r| r.to_vec()).collect();
                }
            }
            EvolutionKind::GatedHouseholder { gate, householder } => {
                if let ScalarRule::InputDerived(ds) = gate {
                    *ds = read_derived(&format!("{layer}.gate"), ds)?;
                }
                if let ScalarRule::InputDerived(ds) = &mut householder.beta {
                    *ds = read_derived(&format!("{layer}.beta"), ds)?;
                }
                if let DirectionSource::InputDerived { w } = &mut householder.direction {
                    let wm = self.get(&format!("{layer}.dir_w")).ok_or_else(|| Error::Other("missing dir_w".into()))?;
                    *w = wm.rows().into_iter().map(|r| r.to_vec()).collect();
                }
            }
        }
        if let ScalingRule::InputDerived(ds) = &mut spec.scaling {
            *ds = read_derived(&format!("{layer}.scale"), ds)?;
        }
        match &mut spec.normalization {
            NormalizationRule::ExternalState { output_gate, .. } => {
                if let ScalarRule::InputDerived(ds) = output_gate {
                    *ds = read_derived(&format!("{layer}.ogate"), ds)?;
                }
            }
            NormalizationRule::PositionDerived(ds) => {
                *ds = read_derived(&format!("{layer}.eta"), ds)?;
            }
            _ => {}
        }
        Ok(spec)
    }
}

fn activation_map(a: &Activation) -> (MapKind, f64) {
    match a {
        Activation::Identity => (MapKind::Relu, f64::NAN), // handled separately
        Activation::Sigmoid => (MapKind::Sigmoid, 1.0),
        Activation::SigmoidComplement => (MapKind::Sigmoid, -1.0), // 1 - sigmoid via scale+shift, handled below
        Activation::Softplus => (MapKind::Softplus, 1.0),
        Activation::ExpClamped { lo, hi } => (MapKind::ExpClamped { lo: *lo, hi: *hi }, 1.0),
        Activation::ExpNegSoftplus { rate } => (MapKind::ExpNegSoftplus { rate: *rate }, 1.0),
    }
}

fn feature_map_kind(fm: KernelFeatureMap) -> MapKind {
    match fm {
        KernelFeatureMap::EluPlusOne => MapKind::EluPlusOne,
        KernelFeatureMap::Relu => MapKind::Relu,
        KernelFeatureMap::Softplus => MapKind::Softplus,
        KernelFeatureMap::Exp => MapKind::Exp,
    }
}

fn scalar_readout(r: &ReadoutMap) -> ScalarReadout {
    match r {
        ReadoutMap::Identity => ScalarReadout::Identity,
        ReadoutMap::Exponential => ScalarReadout::Exp,
        ReadoutMap::Relu => ScalarReadout::Relu,
        ReadoutMap::Softplus => ScalarReadout::Softplus,
        ReadoutMap::SigmoidLike => ScalarReadout::Sigmoid,
        // Feature maps are applied to q and k beforehand.
        ReadoutMap::KernelProduct { .. } => ScalarReadout::Identity,
    }
}

/// Which route evaluates the sequence mix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalPath {
    Dense,
    /// Finite-state recurrence; linear (or kernelized-identity) readouts only.
    Recurrent,
}

struct Assembler<'a> {
    tape: Tape,
    params: &'a ModelParams,
    ids: Vec<Option<NodeId>>,
}

impl<'a> Assembler<'a> {
    fn new(params: &'a ModelParams) -> Self {
        Assembler {
            tape: Tape::new(),
            params,
            ids: vec![None; params.entries.len()],
        }
    }

    fn p(&mut self, name: &str) -> Result<NodeId> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Other(format!("missing parameter {name}")))?;
        if let Some(id) = self.ids[idx] {
            return Ok(id);
        }
        let id = self.tape.param(idx, self.params.entries[idx].value.clone());
        self.ids[idx] = Some(id);
        Ok(id)
    }

    fn scale_const(&mut self, x: NodeId, c: f64) -> NodeId {
        if c == 1.0 {
            return x;
        }
        let shape = self.tape.value(x).raw_dim();
        let cmat = self.tape.constant(Array2::from_elem(shape, c));
        self.tape.mul(x, cmat)
    }

    /// `scale * act(x W^T + b)` for a per-head derived scalar family,
    /// producing `(rows, heads)`.
    fn derived_all_heads(&mut self, prefix: &str, ds: &DerivedScalar, xn: NodeId) -> Result<NodeId> {
        let w = self.p(&format!("{prefix}_w"))?;
        let b = self.p(&format!("{prefix}_b"))?;
        let lin = self.tape.matmul_nt(xn, w);
        let lin = self.tape.add_bias_row(lin, b);
        let out = match ds.activation {
            Activation::Identity => lin,
            Activation::SigmoidComplement => {
                let sig = self.tape.map(lin, MapKind::Sigmoid);
                let neg = self.scale_const(sig, -1.0);
                let shape = self.tape.value(neg).raw_dim();
                let one = self.tape.constant(Array2::from_elem(shape, 1.0));
                self.tape.add(one, neg)
            }
            ref other => {
                let (kind, _) = activation_map(other);
                self.tape.map(lin, kind)
            }
        };
        Ok(self.scale_const(out, ds.scale))
    }

    /// A `(rows, 1)` constant column for constant/per-position scalar rules.
    fn scalar_rule_column(&mut self, rule: &ScalarRule, rows: usize, block: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, 1), |(r, _)| match rule {
            ScalarRule::Constant { value } => *value,
            ScalarRule::PerPosition { values } => {
                let t = r % block;
                values[t.min(values.len() - 1)]
            }
            ScalarRule::InputDerived(_) => unreachable!("derived rules build tape nodes"),
        })
    }
}

/// Tape assembly output.
pub struct ForwardTape {
    pub tape: Tape,
    pub logits: NodeId,
}

/// Build the forward graph for a batch of equal-length sequences.
pub fn forward_tape(
    params: &ModelParams,
    config: &ModelConfig,
    tokens: &[&[u32]],
    path: EvalPath,
) -> Result<ForwardTape> {
    config.validate()?;
    if tokens.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let block = tokens[0].len();
    if block == 0 || tokens.iter().any(|t| t.len() != block) {
        return Err(Error::InvalidConfig("sequences must be nonempty and equal-length".into()));
    }
    if block > config.max_seq_len && config.positional_embedding {
        return Err(Error::InvalidConfig(format!(
            "sequence length {block} exceeds the positional table ({})",
            config.max_seq_len
        )));
    }
    let ids: Vec<usize> = tokens
        .iter()
        .flat_map(|t| t.iter().map(|&x| x as usize))
        .collect();
    if let Some(&bad) = ids.iter().max() {
        if bad >= config.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "token id {bad} outside vocab {}",
                config.vocab_size
            )));
        }
    }

    let dims = config.dynamics.dims;
    let hd = dims.head_dim();
    let vd = dims.value_head_dim();
    let mut asm = Assembler::new(params);

    let embed = asm.p("embed")?;
    let mut x = asm.tape.embed(embed, ids);
    if config.positional_embedding {
        let pos = asm.p("pos_embed")?;
        let pos_ids: Vec<usize> = (0..tokens.len()).flat_map(|_| 0..block).collect();
        let pe = asm.tape.embed(pos, pos_ids);
        x = asm.tape.add(x, pe);
    }

    for l in 0..config.layers {
        let norm_attn = asm.p(&format!("{l}.norm_attn"))?;
        let xn = asm.tape.rms_norm(x, norm_attn);
        let wq = asm.p(&format!("{l}.w_q"))?;
        let wk = asm.p(&format!("{l}.w_k"))?;
        let wv = asm.p(&format!("{l}.w_v"))?;
        let mut q = asm.tape.matmul_nt(xn, wq);
        let mut k = asm.tape.matmul_nt(xn, wk);
        let mut v = asm.tape.matmul_nt(xn, wv);
        if let Preprocessing::ShortConv { .. } = config.preprocessing {
            let cq = asm.p(&format!("{l}.conv_q"))?;
            let ck = asm.p(&format!("{l}.conv_k"))?;
            let cv = asm.p(&format!("{l}.conv_v"))?;
            q = asm.tape.short_conv(q, cq, block);
            k = asm.tape.short_conv(k, ck, block);
            v = asm.tape.short_conv(v, cv, block);
        }

        let mixed = match path {
            EvalPath::Dense => {
                dense_mix(&mut asm, config, l, xn, q, k, v, block, hd, vd)?
            }
            EvalPath::Recurrent => {
                recurrent_mix(&mut asm, params, config, l, xn, q, k, v, block)?
            }
        };

        let norm_out = asm.p(&format!("{l}.norm_out"))?;
        let mut seq_out = asm.tape.rms_norm(mixed, norm_out);
        if config.block_style == BlockStyle::Type2 {
            let wg = asm.p(&format!("{l}.w_g"))?;
            let gate_raw = asm.tape.matmul_nt(xn, wg);
            let gate = asm.tape.map(gate_raw, MapKind::Silu);
            seq_out = asm.tape.mul(seq_out, gate);
        }
        let wo = asm.p(&format!("{l}.w_o"))?;
        let projected = asm.tape.matmul_nt(seq_out, wo);
        x = asm.tape.add(x, projected);

        if config.interleaved_mlp {
            let norm_mlp = asm.p(&format!("{l}.norm_mlp"))?;
            let mn = asm.tape.rms_norm(x, norm_mlp);
            let wg = asm.p(&format!("{l}.mlp_gate"))?;
            let wu = asm.p(&format!("{l}.mlp_up"))?;
            let wd = asm.p(&format!("{l}.mlp_down"))?;
            let gate_raw = asm.tape.matmul_nt(mn, wg);
            let gate = asm.tape.map(gate_raw, MapKind::Silu);
            let up = asm.tape.matmul_nt(mn, wu);
            let inner = asm.tape.mul(gate, up);
            let down = asm.tape.matmul_nt(inner, wd);
            x = asm.tape.add(x, down);
        }
    }

    let final_norm = asm.p("final_norm")?;
    let xf = asm.tape.rms_norm(x, final_norm);
    let head = asm.p("head")?;
    let logits = asm.tape.matmul_nt(xf, head);
    Ok(ForwardTape {
        tape: asm.tape,
        logits,
    })
}

/// The dense sequence mix through tape ops, head by head.
#[allow(clippy::too_many_arguments)]
fn dense_mix(
    asm: &mut Assembler,
    config: &ModelConfig,
    layer: usize,
    xn: NodeId,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    block: usize,
    hd: usize,
    vd: usize,
) -> Result<NodeId> {
    let dyn_spec = &config.dynamics;
    let rows = asm.tape.value(q).nrows();
    let heads = dyn_spec.dims.heads;

    // Per-head derived parameter banks, built once.
    let evo_bank: Option<NodeId> = match &dyn_spec.evolution.kind {
        EvolutionKind::Scalar { rule: ScalarRule::InputDerived(ds) } => {
            Some(asm.derived_all_heads(&format!("{layer}.evo"), ds, xn)?)
        }
        EvolutionKind::Diagonal { rule: VectorRule::InputDerived { activation, scale, .. } } => {
            let w = asm.p(&format!("{layer}.evo_w"))?;
            let b = asm.p(&format!("{layer}.evo_b"))?;
            let lin = asm.tape.matmul_nt(xn, w);
            let lin = asm.tape.add_bias_row(lin, b);
            let (kind, _) = activation_map(activation);
            let act = match activation {
                Activation::Identity => lin,
                Activation::SigmoidComplement => {
                    let sig = asm.tape.map(lin, MapKind::Sigmoid);
                    let neg = asm.scale_const(sig, -1.0);
                    let shape = asm.tape.value(neg).raw_dim();
                    let one = asm.tape.constant(Array2::from_elem(shape, 1.0));
                    asm.tape.add(one, neg)
                }
                _ => asm.tape.map(lin, kind),
            };
            Some(asm.scale_const(act, *scale))
        }
        _ => None,
    };
    let beta_bank: Option<NodeId> = match &dyn_spec.evolution.kind {
        EvolutionKind::Householder(h) => match &h.beta {
            ScalarRule::InputDerived(ds) => Some(asm.derived_all_heads(&format!("{layer}.beta"), ds, xn)?),
            _ => None,
        },
        EvolutionKind::GatedHouseholder { householder, .. } => match &householder.beta {
            ScalarRule::InputDerived(ds) => Some(asm.derived_all_heads(&format!("{layer}.beta"), ds, xn)?),
            _ => None,
        },
        _ => None,
    };
    let gate_bank: Option<NodeId> = match &dyn_spec.evolution.kind {
        EvolutionKind::GatedHouseholder { gate: ScalarRule::InputDerived(ds), .. } => {
            Some(asm.derived_all_heads(&format!("{layer}.gate"), ds, xn)?)
        }
        _ => None,
    };
    let dir_bank: Option<NodeId> = {
        let dir = match &dyn_spec.evolution.kind {
            EvolutionKind::Householder(h) => Some(&h.direction),
            EvolutionKind::GatedHouseholder { householder, .. } => Some(&householder.direction),
            _ => None,
        };
        match dir {
            Some(DirectionSource::InputDerived { .. }) => {
                let w = asm.p(&format!("{layer}.dir_w"))?;
                Some(asm.tape.matmul_nt(xn, w))
            }
            Some(DirectionSource::Constant { values }) => {
                let mut m = Array2::zeros((rows, values.len()));
                for mut row in m.rows_mut() {
                    for (c, val) in values.iter().enumerate() {
                        row[c] = *val;
                    }
                }
                Some(asm.tape.constant(m))
            }
            _ => None,
        }
    };
    let scale_bank: Option<NodeId> = match &dyn_spec.scaling {
        ScalingRule::InputDerived(ds) => Some(asm.derived_all_heads(&format!("{layer}.scale"), ds, xn)?),
        _ => None,
    };
    let ogate_bank: Option<NodeId> = match &dyn_spec.normalization {
        NormalizationRule::ExternalState { output_gate: ScalarRule::InputDerived(ds), .. } => {
            Some(asm.derived_all_heads(&format!("{layer}.ogate"), ds, xn)?)
        }
        _ => None,
    };
    let eta_bank: Option<NodeId> = match &dyn_spec.normalization {
        NormalizationRule::PositionDerived(ds) => {
            Some(asm.derived_all_heads(&format!("{layer}.eta"), ds, xn)?)
        }
        _ => None,
    };

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut q_h = asm.tape.slice_cols(q, h * hd, hd);
        let mut k_h = asm.tape.slice_cols(k, h * hd, hd);
        let v_h = asm.tape.slice_cols(v, h * vd, vd);

        // Input scaling column.
        let b_h = match &dyn_spec.scaling {
            ScalingRule::InputDerived(_) => asm.tape.slice_cols(scale_bank.unwrap(), h, 1),
            ScalingRule::InverseSqrtN => {
                let c = 1.0 / (hd as f64).sqrt();
                asm.tape.constant(Array2::from_elem((rows, 1), c))
            }
            ScalingRule::Constant { value } => {
                asm.tape.constant(Array2::from_elem((rows, 1), *value))
            }
            ScalingRule::PerPosition { values } => {
                let col = Array2::from_shape_fn((rows, 1), |(r, _)| {
                    values[(r % block).min(values.len() - 1)]
                });
                asm.tape.constant(col)
            }
        };

        // Kernelized readouts become a change of variables on q and k, with
        // the scaling folded into the key before the feature map.
        let mut b_used = b_h;
        if let ReadoutMap::KernelProduct { feature_map } = &dyn_spec.readout {
            let kind = feature_map_kind(*feature_map);
            let kb = asm.tape.mul_broadcast_col(k_h, b_h);
            q_h = asm.tape.map(q_h, kind);
            k_h = asm.tape.map(kb, kind);
            b_used = asm.tape.constant(Array2::from_elem((rows, 1), 1.0));
        }

        let evo = match &dyn_spec.evolution.kind {
            EvolutionKind::Identity => EvoTape::Identity,
            EvolutionKind::Scalar { rule } => {
                let lam = match rule {
                    ScalarRule::InputDerived(_) => asm.tape.slice_cols(evo_bank.unwrap(), h, 1),
                    other => {
                        let col = asm.scalar_rule_column(other, rows, block);
                        asm.tape.constant(col)
                    }
                };
                EvoTape::Scalar { lam }
            }
            EvolutionKind::Diagonal { rule } => {
                let lam = match rule {
                    VectorRule::InputDerived { .. } => asm.tape.slice_cols(evo_bank.unwrap(), h * hd, hd),
                    VectorRule::Constant { values } => {
                        let mut m = Array2::zeros((rows, hd));
                        for mut row in m.rows_mut() {
                            for c in 0..hd {
                                row[c] = values[h * hd + c];
                            }
                        }
                        asm.tape.constant(m)
                    }
                };
                EvoTape::Diagonal { lam }
            }
            EvolutionKind::Householder(hr) => {
                let beta = match &hr.beta {
                    ScalarRule::InputDerived(_) => asm.tape.slice_cols(beta_bank.unwrap(), h, 1),
                    other => {
                        let col = asm.scalar_rule_column(other, rows, block);
                        asm.tape.constant(col)
                    }
                };
                let direction = match &hr.direction {
                    DirectionSource::Keys => None,
                    _ => Some(asm.tape.slice_cols(dir_bank.unwrap(), h * hd, hd)),
                };
                EvoTape::Householder { beta, direction }
            }
            EvolutionKind::GatedHouseholder { gate, householder } => {
                let beta = match &householder.beta {
                    ScalarRule::InputDerived(_) => asm.tape.slice_cols(beta_bank.unwrap(), h, 1),
                    other => {
                        let col = asm.scalar_rule_column(other, rows, block);
                        asm.tape.constant(col)
                    }
                };
                let gate = match gate {
                    ScalarRule::InputDerived(_) => asm.tape.slice_cols(gate_bank.unwrap(), h, 1),
                    other => {
                        let col = asm.scalar_rule_column(other, rows, block);
                        asm.tape.constant(col)
                    }
                };
                let direction = match &householder.direction {
                    DirectionSource::Keys => None,
                    _ => Some(asm.tape.slice_cols(dir_bank.unwrap(), h * hd, hd)),
                };
                EvoTape::GatedHouseholder { gate, beta, direction }
            }
        };

        let norm = match &dyn_spec.normalization {
            NormalizationRule::One => NormTape::One,
            NormalizationRule::CoefficientSum => NormTape::Sum,
            NormalizationRule::Geometric { rho } => NormTape::Geometric { rho: *rho },
            NormalizationRule::ExternalState { output_gate, floor } => {
                let output_gate = match output_gate {
                    ScalarRule::InputDerived(_) => asm.tape.slice_cols(ogate_bank.unwrap(), h, 1),
                    other => {
                        let col = asm.scalar_rule_column(other, rows, block);
                        asm.tape.constant(col)
                    }
                };
                NormTape::External { output_gate, floor: *floor }
            }
            NormalizationRule::PositionDerived(_) => NormTape::PositionDerived {
                eta: asm.tape.slice_cols(eta_bank.unwrap(), h, 1),
            },
        };

        let scores = asm.tape.coeff_scores(q_h, k_h, b_used, evo, block)?;
        let weights = asm
            .tape
            .readout_norm(scores, scalar_readout(&dyn_spec.readout), norm, block);
        head_outputs.push(asm.tape.block_matmul(weights, v_h, block));
    }
    Ok(asm.tape.concat_cols(head_outputs))
}

/// The recurrent sequence mix: values computed by the finite-state engine
/// route and inserted as a constant (inference only).
#[allow(clippy::too_many_arguments)]
fn recurrent_mix(
    asm: &mut Assembler,
    params: &ModelParams,
    config: &ModelConfig,
    layer: usize,
    xn: NodeId,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    block: usize,
) -> Result<NodeId> {
    let rows = asm.tape.value(q).nrows();
    let spec = params.bind_spec(config, layer)?;
    let mut out = Array2::<f64>::zeros((rows, config.dynamics.dims.d_v));
    // The change of variables for kernelized readouts: transform q and the
    // scaled k, then run an identity-readout recurrence.
    let kernel = match &spec.readout {
        ReadoutMap::KernelProduct { feature_map } => Some(*feature_map),
        _ => None,
    };
    for blk in 0..rows / block {
        let lo = blk * block;
        let inputs = asm.tape.value(xn).slice(s![lo..lo + block, ..]).to_owned();
        let mut qv = asm.tape.value(q).slice(s![lo..lo + block, ..]).to_owned();
        let mut kv = asm.tape.value(k).slice(s![lo..lo + block, ..]).to_owned();
        let vv = asm.tape.value(v).slice(s![lo..lo + block, ..]).to_owned();
        let run_spec = if let Some(fm) = kernel {
            let hd = spec.dims.head_dim();
            for (t, mut row) in kv.rows_mut().into_iter().enumerate() {
                for h in 0..spec.dims.heads {
                    let b = spec.scaling.eval(h, hd, t, inputs.row(t));
                    for c in h * hd..(h + 1) * hd {
                        row[c] = fm.apply(row[c] * b);
                    }
                }
            }
            qv.mapv_inplace(|x| fm.apply(x));
            let mut s = spec.clone();
            s.readout = ReadoutMap::Identity;
            s.scaling = ScalingRule::Constant { value: 1.0 };
            s
        } else {
            spec.clone()
        };
        let y = forward_recurrent(&run_spec, &qv, &kv, &vv, &inputs)?;
        out.slice_mut(s![lo..lo + block, ..]).assign(&y);
    }
    Ok(asm.tape.constant(out))
}

/// Inference logits for one sequence, by either route.
pub fn model_forward(
    params: &ModelParams,
    config: &ModelConfig,
    tokens: &[u32],
    path: EvalPath,
) -> Result<Array2<f64>> {
    if path == EvalPath::Recurrent
        && !(config.dynamics.readout.is_linear()
            || matches!(config.dynamics.readout, ReadoutMap::KernelProduct { .. }))
    {
        return Err(Error::NonlinearReadout {
            readout: config.dynamics.readout.name(),
        });
    }
    let ft = forward_tape(params, config, &[tokens], path)?;
    Ok(ft.tape.value(ft.logits).clone())
}

/// Gradient entries are named after their parameters; parameters outside the
/// graph (e.g. a disabled positional table) are absent.
pub type Gradients = Vec<(String, Array2<f64>)>;

/// Mean cross-entropy over the batch's supervised positions, with gradients
/// for every participating parameter.
pub fn loss_and_grad(
    params: &ModelParams,
    config: &ModelConfig,
    tokens: &[&[u32]],
    targets: &[u32],
) -> Result<(f64, Gradients)> {
    let mut ft = forward_tape(params, config, tokens, EvalPath::Dense)?;
    if targets.len() != ft.tape.value(ft.logits).nrows() {
        return Err(Error::InvalidConfig("targets do not match the flattened batch".into()));
    }
    let loss_id = ft.tape.cross_entropy(ft.logits, targets.to_vec())?;
    let loss = ft.tape.value(loss_id)[[0, 0]];
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { batch_index: 0 });
    }
    let raw = ft.tape.backward(loss_id, params.entries.len());
    let grads = raw
        .into_iter()
        .enumerate()
        .filter_map(|(i, g)| g.map(|g| (params.entries[i].name.clone(), g)))
        .collect();
    Ok((loss, grads))
}

/// Batch of instances flattened for the tape.
pub fn flatten_batch<'a>(instances: &[&'a crate::tasks::TaskInstance]) -> (Vec<&'a [u32]>, Vec<u32>) {
    let tokens: Vec<&[u32]> = instances.iter().map(|i| i.tokens.as_slice()).collect();
    let targets: Vec<u32> = instances.iter().flat_map(|i| i.targets.iter().copied()).collect();
    (tokens, targets)
}

/// Exact-match accuracy over supervised positions.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    instances: &[&crate::tasks::TaskInstance],
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    // Batched inference in chunks to bound memory.
    for chunk in instances.chunks(64) {
        let (tokens, targets) = flatten_batch(chunk);
        let ft = forward_tape(params, config, &tokens, EvalPath::Dense)?;
        let logits = ft.tape.value(ft.logits);
        for (r, &t) in targets.iter().enumerate() {
            if t == IGNORE {
                continue;
            }
            let row = logits.row(r);
            let mut best = 0usize;
            for (c, val) in row.iter().enumerate() {
                if *val > row[best] {
                    best = c;
                }
            }
            if best == t as usize {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidConfig("no supervised positions to evaluate".into()));
    }
    Ok(correct as f64 / total as f64)
}
