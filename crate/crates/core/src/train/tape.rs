//! Reverse-accumulation over a fixed operator set.
//!
//! The tape covers exactly what the trainable model needs: dense products,
//! a few elementwise maps, row normalization, embedding gathers, a causal
//! depthwise convolution, the coefficient-dynamics scan, readout plus
//! normalization, and a masked cross-entropy. Sequences are stacked: a
//! `(B*L, c)` array holds `B` blocks of `L` rows, and the sequence-aware ops
//! take the block length explicitly.

use ndarray::{s, Array2};

use crate::dynamics::floor_eta;
use crate::error::{Error, Result};
use crate::tasks::IGNORE;
use crate::util::{sigmoid, softplus};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MapKind {
    Exp,
    Relu,
    Softplus,
    Sigmoid,
    Silu,
    EluPlusOne,
    ExpClamped { lo: f64, hi: f64 },
    ExpNegSoftplus { rate: f64 },
}

impl MapKind {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            MapKind::Exp => x.exp(),
            MapKind::Relu => x.max(0.0),
            MapKind::Softplus => softplus(x),
            MapKind::Sigmoid => sigmoid(x),
            MapKind::Silu => x * sigmoid(x),
            MapKind::EluPlusOne => {
                if x > 0.0 {
                    x + 1.0
                } else {
                    x.exp()
                }
            }
            MapKind::ExpClamped { lo, hi } => x.clamp(*lo, *hi).exp(),
            MapKind::ExpNegSoftplus { rate } => (-rate * softplus(x)).exp(),
        }
    }

    fn derivative(&self, x: f64) -> f64 {
        match self {
            MapKind::Exp => x.exp(),
            MapKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            MapKind::Softplus => sigmoid(x),
            MapKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            MapKind::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            MapKind::EluPlusOne => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            MapKind::ExpClamped { lo, hi } => {
                if x <= *lo || x >= *hi {
                    0.0
                } else {
                    x.exp()
                }
            }
            MapKind::ExpNegSoftplus { rate } => {
                let y = (-rate * softplus(x)).exp();
                -rate * sigmoid(x) * y
            }
        }
    }
}

/// Scalar readout kinds available to the trainable model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarReadout {
    Identity,
    Exp,
    Relu,
    Softplus,
    Sigmoid,
}

impl ScalarReadout {
    fn apply(&self, x: f64) -> f64 {
        match self {
            ScalarReadout::Identity => x,
            ScalarReadout::Exp => x.exp(),
            ScalarReadout::Relu => x.max(0.0),
            ScalarReadout::Softplus => softplus(x),
            ScalarReadout::Sigmoid => sigmoid(x),
        }
    }

    fn derivative(&self, x: f64) -> f64 {
        match self {
            ScalarReadout::Identity => 1.0,
            ScalarReadout::Exp => x.exp(),
            ScalarReadout::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ScalarReadout::Softplus => sigmoid(x),
            ScalarReadout::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

/// Evolution wiring of the coefficient scan. Per-step parameters arrive as
/// tape nodes so their gradients flow back through whatever produced them.
#[derive(Clone, Debug)]
pub enum EvoTape {
    Identity,
    /// lambda: `(B*L, 1)`.
    Scalar { lam: NodeId },
    /// lambda: `(B*L, hd)`.
    Diagonal { lam: NodeId },
    /// Rank-one update from the (internally unit-normalized) direction.
    /// `direction = None` reads the keys node.
    Householder { beta: NodeId, direction: Option<NodeId> },
    GatedHouseholder {
        gate: NodeId,
        beta: NodeId,
        direction: Option<NodeId>,
    },
}

/// Row normalization wiring.
#[derive(Clone, Debug)]
pub enum NormTape {
    One,
    /// Sum of the row's coefficients; the exponential readout pairs with the
    /// shift-stabilized form.
    Sum,
    Geometric { rho: f64 },
    /// `weights = alpha * o / max(|sum alpha|, floor)`.
    External { output_gate: NodeId, floor: f64 },
    /// `(B*L, 1)` normalizer evaluated at the read position.
    PositionDerived { eta: NodeId },
}

struct CoeffScoresOp {
    q: NodeId,
    k: NodeId,
    b: NodeId,
    evo: EvoTape,
    block: usize,
    /// `h_{i,j}` for every block, `((blk*L + i)*L + j)*hd ..`.
    states: Vec<f64>,
}

struct ReadoutNormOp {
    scores: NodeId,
    readout: ScalarReadout,
    norm: NormTape,
    block: usize,
    /// Raw coefficients (pre-normalization), saved on the forward pass.
    raw: Array2<f64>,
}

enum Op {
    Leaf { param: Option<usize> },
    MatMulNT { x: NodeId, w: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBiasRow { x: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MulBroadcastCol { x: NodeId, scale: NodeId },
    Map { x: NodeId, kind: MapKind },
    RmsNorm { x: NodeId, w: NodeId },
    Embed { table: NodeId, ids: Vec<usize> },
    ShortConv { x: NodeId, kernel: NodeId, block: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    BlockMatMul { a: NodeId, b: NodeId, block: usize },
    CoeffScores(Box<CoeffScoresOp>),
    ReadoutNorm(Box<ReadoutNormOp>),
    CrossEntropy { logits: NodeId, targets: Vec<u32> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// The computation graph. Nodes are appended in topological order, so the
/// backward pass is a single reverse sweep.
pub struct Tape {
    nodes: Vec<Node>,
}

const RMS_EPS: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn param(&mut self, index: usize, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf { param: Some(index) })
    }

    /// `x (r, d) . w^T (d, o)` for `w` stored as `(o, d)`.
    pub fn matmul_nt(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let value = self.value(x).dot(&self.value(w).t());
        self.push(value, Op::MatMulNT { x, w })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add { a, b })
    }

    /// Add a `(1, c)` bias row to every row of `x`.
    pub fn add_bias_row(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let bias = self.value(b).row(0).to_owned();
        let value = self.value(x) + &bias;
        self.push(value, Op::AddBiasRow { x, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul { a, b })
    }

    /// Scale row `r` of `x` by `scale[r, 0]`.
    pub fn mul_broadcast_col(&mut self, x: NodeId, scale: NodeId) -> NodeId {
        let sc = self.value(scale);
        let mut value = self.value(x).clone();
        for (mut row, s) in value.rows_mut().into_iter().zip(sc.column(0).iter()) {
            row.map_inplace(|v| *v *= s);
        }
        self.push(value, Op::MulBroadcastCol { x, scale })
    }

    pub fn map(&mut self, x: NodeId, kind: MapKind) -> NodeId {
        let value = self.value(x).mapv(|v| kind.apply(v));
        self.push(value, Op::Map { x, kind })
    }

    /// Row-wise RMS normalization with a learned `(1, c)` gain.
    pub fn rms_norm(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let gain = self.value(w).row(0).to_owned();
        let xv = self.value(x);
        let mut value = Array2::<f64>::zeros(xv.raw_dim());
        for (r, row) in xv.rows().into_iter().enumerate() {
            let ms = row.dot(&row) / row.len() as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            for (c, v) in row.iter().enumerate() {
                value[[r, c]] = v * inv * gain[c];
            }
        }
        self.push(value, Op::RmsNorm { x, w })
    }

    /// Gather rows of `table` by id.
    pub fn embed(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        let t = self.value(table);
        let mut value = Array2::<f64>::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).assign(&t.row(id));
        }
        self.push(value, Op::Embed { table, ids })
    }

    /// Causal depthwise convolution within each block: channel `c` of row
    /// `i` mixes rows `i-width+1 ..= i` with `kernel (channels, width)`,
    /// newest tap last.
    pub fn short_conv(&mut self, x: NodeId, kernel: NodeId, block: usize) -> NodeId {
        let xv = self.value(x);
        let kv = self.value(kernel);
        let width = kv.ncols();
        let rows = xv.nrows();
        assert_eq!(rows % block, 0);
        let mut value = Array2::<f64>::zeros(xv.raw_dim());
        for blk in 0..rows / block {
            for i in 0..block {
                let r = blk * block + i;
                for c in 0..xv.ncols() {
                    let mut acc = 0.0;
                    for u in 0..width {
                        if i >= u {
                            acc += kv[[c, width - 1 - u]] * xv[[r - u, c]];
                        }
                    }
                    value[[r, c]] = acc;
                }
            }
        }
        self.push(value, Op::ShortConv { x, kernel, block })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let rows = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut value = Array2::<f64>::zeros((rows, total));
        let mut at = 0;
        for p in &parts {
            let v = self.value(*p);
            value.slice_mut(s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        self.push(value, Op::ConcatCols { parts })
    }

    /// Per-block product `a_blk (L, L) . b_blk (L, c)`.
    pub fn block_matmul(&mut self, a: NodeId, b: NodeId, block: usize) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        let rows = av.nrows();
        assert_eq!(rows % block, 0);
        assert_eq!(av.ncols(), block);
        let mut value = Array2::<f64>::zeros((rows, bv.ncols()));
        for blk in 0..rows / block {
            let lo = blk * block;
            let prod = av
                .slice(s![lo..lo + block, ..])
                .dot(&bv.slice(s![lo..lo + block, ..]));
            value.slice_mut(s![lo..lo + block, ..]).assign(&prod);
        }
        self.push(value, Op::BlockMatMul { a, b, block })
    }

    /// The coefficient-dynamics scan: per block, evolve each key impulse and
    /// read it against the queries, producing lower-triangular scores
    /// `(B*L, L)`.
    pub fn coeff_scores(
        &mut self,
        q: NodeId,
        k: NodeId,
        b: NodeId,
        evo: EvoTape,
        block: usize,
    ) -> Result<NodeId> {
        let qv = self.value(q);
        let kv = self.value(k);
        let bv = self.value(b);
        let rows = qv.nrows();
        let hd = qv.ncols();
        assert_eq!(rows % block, 0);
        let blocks = rows / block;
        let mut states = vec![0.0; rows * block * hd];
        let mut scores = Array2::<f64>::zeros((rows, block));

        let mut h = vec![0.0; block * hd];
        for blk in 0..blocks {
            h.fill(0.0);
            for i in 0..block {
                let r = blk * block + i;
                if i > 0 {
                    self.evolve_forward(&evo, kv, r, &mut h[..i * hd], hd)?;
                }
                for c in 0..hd {
                    h[i * hd + c] = bv[[r, 0]] * kv[[r, c]];
                }
                let base = r * block * hd;
                states[base..base + (i + 1) * hd].copy_from_slice(&h[..(i + 1) * hd]);
                for j in 0..=i {
                    let mut acc = 0.0;
                    for c in 0..hd {
                        acc += qv[[r, c]] * h[j * hd + c];
                    }
                    if !acc.is_finite() {
                        return Err(Error::Overflow { step: i, stage: "scanning coefficient scores" });
                    }
                    scores[[r, j]] = acc;
                }
            }
        }
        Ok(self.push(
            scores,
            Op::CoeffScores(Box::new(CoeffScoresOp {
                q,
                k,
                b,
                evo,
                block,
                states,
            })),
        ))
    }

    /// Apply the step operator at global row `r` to the packed states.
    fn evolve_forward(
        &self,
        evo: &EvoTape,
        keys: &Array2<f64>,
        r: usize,
        states: &mut [f64],
        hd: usize,
    ) -> Result<()> {
        match evo {
            EvoTape::Identity => {}
            EvoTape::Scalar { lam } => {
                let l = self.value(*lam)[[r, 0]];
                for v in states.iter_mut() {
                    *v *= l;
                }
            }
            EvoTape::Diagonal { lam } => {
                let lv = self.value(*lam);
                for chunk in states.chunks_mut(hd) {
                    for (c, v) in chunk.iter_mut().enumerate() {
                        *v *= lv[[r, c]];
                    }
                }
            }
            EvoTape::Householder { beta, direction } => {
                let (z, _norm) = self.unit_direction(direction, keys, r, hd)?;
                let b = self.value(*beta)[[r, 0]];
                householder_slice(states, &z, b, hd);
            }
            EvoTape::GatedHouseholder { gate, beta, direction } => {
                let (z, _norm) = self.unit_direction(direction, keys, r, hd)?;
                let b = self.value(*beta)[[r, 0]];
                householder_slice(states, &z, b, hd);
                let g = self.value(*gate)[[r, 0]];
                for v in states.iter_mut() {
                    *v *= g;
                }
            }
        }
        Ok(())
    }

    fn unit_direction(
        &self,
        direction: &Option<NodeId>,
        keys: &Array2<f64>,
        r: usize,
        hd: usize,
    ) -> Result<(Vec<f64>, f64)> {
        let mut z: Vec<f64> = match direction {
            None => (0..hd).map(|c| keys[[r, c]]).collect(),
            Some(id) => {
                let v = self.value(*id);
                (0..hd).map(|c| v[[r, c]]).collect()
            }
        };
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroDirection { step: r });
        }
        for v in z.iter_mut() {
            *v /= norm;
        }
        Ok((z, norm))
    }

    /// Readout map plus normalization over lower-triangular score rows.
    pub fn readout_norm(
        &mut self,
        scores: NodeId,
        readout: ScalarReadout,
        norm: NormTape,
        block: usize,
    ) -> NodeId {
        let sv = self.value(scores);
        let rows = sv.nrows();
        assert_eq!(sv.ncols(), block);
        let mut raw = Array2::<f64>::zeros((rows, block));
        let mut weights = Array2::<f64>::zeros((rows, block));
        for r in 0..rows {
            let i = r % block;
            if readout == ScalarReadout::Exp && matches!(norm, NormTape::Sum) {
                // Shift-stabilized ratio; the shift cancels.
                let m = (0..=i).map(|j| sv[[r, j]]).fold(f64::NEG_INFINITY, f64::max);
                let mut den = 0.0;
                for j in 0..=i {
                    let e = (sv[[r, j]] - m).exp();
                    raw[[r, j]] = e;
                    den += e;
                }
                for j in 0..=i {
                    weights[[r, j]] = raw[[r, j]] / den;
                }
                continue;
            }
            for j in 0..=i {
                raw[[r, j]] = readout.apply(sv[[r, j]]);
            }
            let eta = match &norm {
                NormTape::One => 1.0,
                NormTape::Sum => floor_eta((0..=i).map(|j| raw[[r, j]]).sum()),
                NormTape::Geometric { rho } => rho.powi(i as i32 + 1),
                NormTape::External { output_gate, floor } => {
                    let sum: f64 = (0..=i).map(|j| raw[[r, j]]).sum();
                    let o = floor_eta(self.value(*output_gate)[[r, 0]]);
                    sum.abs().max(*floor) / o
                }
                NormTape::PositionDerived { eta } => floor_eta(self.value(*eta)[[r, 0]]),
            };
            for j in 0..=i {
                weights[[r, j]] = raw[[r, j]] / eta;
            }
        }
        self.push(
            weights,
            Op::ReadoutNorm(Box::new(ReadoutNormOp {
                scores,
                readout,
                norm,
                block,
                raw,
            })),
        )
    }

    /// Mean cross-entropy over supervised rows (`targets[r] != IGNORE`).
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<u32>) -> Result<NodeId> {
        let lv = self.value(logits);
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == IGNORE {
                continue;
            }
            let row = lv.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[t as usize];
            count += 1;
        }
        if count == 0 {
            return Err(Error::InvalidConfig("batch has no supervised positions".into()));
        }
        let loss = total / count as f64;
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy { logits, targets },
        ))
    }

    /// Reverse sweep from `loss`; returns per-parameter gradients (absent
    /// for parameters the graph never touched).
    pub fn backward(&mut self, loss: NodeId, n_params: usize) -> Vec<Option<Array2<f64>>> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));
        let mut param_grads: Vec<Option<Array2<f64>>> = (0..n_params).map(|_| None).collect();

        for idx in (0..n).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            // Split borrows: the node under inspection vs. upstream grads.
            match &self.nodes[idx].op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        accumulate_opt(&mut param_grads[*p], &grad);
                    }
                }
                Op::MatMulNT { x, w } => {
                    let dx = grad.dot(&self.nodes[w.0].value);
                    let dw = grad.t().dot(&self.nodes[x.0].value);
                    add_grad(&mut grads, *x, dx);
                    add_grad(&mut grads, *w, dw);
                }
                Op::Add { a, b } => {
                    add_grad(&mut grads, *a, grad.clone());
                    add_grad(&mut grads, *b, grad);
                }
                Op::AddBiasRow { x, b } => {
                    let db = grad.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                    add_grad(&mut grads, *x, grad);
                    add_grad(&mut grads, *b, db);
                }
                Op::Mul { a, b } => {
                    let da = &grad * &self.nodes[b.0].value;
                    let db = &grad * &self.nodes[a.0].value;
                    add_grad(&mut grads, *a, da);
                    add_grad(&mut grads, *b, db);
                }
                Op::MulBroadcastCol { x, scale } => {
                    let xv = &self.nodes[x.0].value;
                    let sv = &self.nodes[scale.0].value;
                    let mut dx = grad.clone();
                    let mut ds = Array2::<f64>::zeros(sv.raw_dim());
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let s = sv[[r, 0]];
                        let mut acc = 0.0;
                        for (c, v) in row.iter_mut().enumerate() {
                            acc += *v * xv[[r, c]];
                            *v *= s;
                        }
                        ds[[r, 0]] = acc;
                    }
                    add_grad(&mut grads, *x, dx);
                    add_grad(&mut grads, *scale, ds);
                }
                Op::Map { x, kind } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = grad;
                    dx.zip_mut_with(xv, |g, v| *g *= kind.derivative(*v));
                    add_grad(&mut grads, *x, dx);
                }
                Op::RmsNorm { x, w } => {
                    let xv = &self.nodes[x.0].value;
                    let gain = self.nodes[w.0].value.row(0).to_owned();
                    let cols = xv.ncols() as f64;
                    let mut dx = Array2::<f64>::zeros(xv.raw_dim());
                    let mut dw = Array2::<f64>::zeros((1, xv.ncols()));
                    for (r, row) in xv.rows().into_iter().enumerate() {
                        let ms = row.dot(&row) / cols;
                        let inv = 1.0 / (ms + RMS_EPS).sqrt();
                        // y_c = x_c * inv * w_c
                        let mut dot = 0.0;
                        for c in 0..xv.ncols() {
                            dot += grad[[r, c]] * gain[c] * row[c];
                        }
                        let scale = inv * inv * inv / cols;
                        for c in 0..xv.ncols() {
                            dx[[r, c]] = grad[[r, c]] * gain[c] * inv - row[c] * dot * scale;
                            dw[[0, c]] += grad[[r, c]] * row[c] * inv;
                        }
                    }
                    add_grad(&mut grads, *x, dx);
                    add_grad(&mut grads, *w, dw);
                }
                Op::Embed { table, ids } => {
                    let tv = &self.nodes[table.0].value;
                    let mut dt = Array2::<f64>::zeros(tv.raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id);
                        row += &grad.row(r);
                    }
                    add_grad(&mut grads, *table, dt);
                }
                Op::ShortConv { x, kernel, block } => {
                    let xv = &self.nodes[x.0].value;
                    let kv = &self.nodes[kernel.0].value;
                    let width = kv.ncols();
                    let block = *block;
                    let mut dx = Array2::<f64>::zeros(xv.raw_dim());
                    let mut dk = Array2::<f64>::zeros(kv.raw_dim());
                    for blk in 0..xv.nrows() / block {
                        for i in 0..block {
                            let r = blk * block + i;
                            for c in 0..xv.ncols() {
                                let g = grad[[r, c]];
                                for u in 0..width {
                                    if i >= u {
                                        dx[[r - u, c]] += kv[[c, width - 1 - u]] * g;
                                        dk[[c, width - 1 - u]] += xv[[r - u, c]] * g;
                                    }
                                }
                            }
                        }
                    }
                    add_grad(&mut grads, *x, dx);
                    add_grad(&mut grads, *kernel, dk);
                }
                Op::SliceCols { x, start, len } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Array2::<f64>::zeros(xv.raw_dim());
                    dx.slice_mut(s![.., *start..*start + *len]).assign(&grad);
                    add_grad(&mut grads, *x, dx);
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        let dp = grad.slice(s![.., at..at + w]).to_owned();
                        add_grad(&mut grads, p, dp);
                        at += w;
                    }
                }
                Op::BlockMatMul { a, b, block } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let block = *block;
                    let mut da = Array2::<f64>::zeros(av.raw_dim());
                    let mut db = Array2::<f64>::zeros(bv.raw_dim());
                    for blk in 0..av.nrows() / block {
                        let lo = blk * block;
                        let g = grad.slice(s![lo..lo + block, ..]);
                        da.slice_mut(s![lo..lo + block, ..])
                            .assign(&g.dot(&bv.slice(s![lo..lo + block, ..]).t()));
                        db.slice_mut(s![lo..lo + block, ..])
                            .assign(&av.slice(s![lo..lo + block, ..]).t().dot(&g));
                    }
                    add_grad(&mut grads, *a, da);
                    add_grad(&mut grads, *b, db);
                }
                Op::CoeffScores(op) => {
                    let updates = self.backward_coeff_scores(op, &grad);
                    for (id, g) in updates {
                        add_grad(&mut grads, id, g);
                    }
                }
                Op::ReadoutNorm(op) => {
                    let updates = self.backward_readout_norm(op, &grad);
                    for (id, g) in updates {
                        add_grad(&mut grads, id, g);
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    let lv = &self.nodes[logits.0].value;
                    let scale = grad[[0, 0]];
                    let count = targets.iter().filter(|&&t| t != IGNORE).count() as f64;
                    let mut dl = Array2::<f64>::zeros(lv.raw_dim());
                    for (r, &t) in targets.iter().enumerate() {
                        if t == IGNORE {
                            continue;
                        }
                        let row = lv.row(r);
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let den: f64 = row.iter().map(|v| (v - m).exp()).sum();
                        for c in 0..lv.ncols() {
                            let p = (lv[[r, c]] - m).exp() / den;
                            let onehot = if c == t as usize { 1.0 } else { 0.0 };
                            dl[[r, c]] = scale * (p - onehot) / count;
                        }
                    }
                    add_grad(&mut grads, *logits, dl);
                }
            }
        }
        param_grads
    }

    /// Reverse pass of the coefficient scan. Returns (node, gradient) pairs.
    fn backward_coeff_scores(&self, op: &CoeffScoresOp, ds: &Array2<f64>) -> Vec<(NodeId, Array2<f64>)> {
        let qv = &self.nodes[op.q.0].value;
        let kv = &self.nodes[op.k.0].value;
        let bv = &self.nodes[op.b.0].value;
        let block = op.block;
        let rows = qv.nrows();
        let hd = qv.ncols();

        let mut dq = Array2::<f64>::zeros(qv.raw_dim());
        let mut dk = Array2::<f64>::zeros(kv.raw_dim());
        let mut db = Array2::<f64>::zeros(bv.raw_dim());
        let mut devo: Vec<(NodeId, Array2<f64>)> = Vec::new();
        let mut dlam_scalar: Option<Array2<f64>> = None;
        let mut dlam_diag: Option<Array2<f64>> = None;
        let mut dbeta: Option<Array2<f64>> = None;
        let mut dgate: Option<Array2<f64>> = None;
        let mut ddir: Option<Array2<f64>> = None;
        match &op.evo {
            EvoTape::Scalar { .. } => dlam_scalar = Some(Array2::zeros((rows, 1))),
            EvoTape::Diagonal { .. } => dlam_diag = Some(Array2::zeros((rows, hd))),
            EvoTape::Householder { direction, .. } => {
                dbeta = Some(Array2::zeros((rows, 1)));
                if direction.is_some() {
                    ddir = Some(Array2::zeros((rows, hd)));
                }
            }
            EvoTape::GatedHouseholder { direction, .. } => {
                dbeta = Some(Array2::zeros((rows, 1)));
                dgate = Some(Array2::zeros((rows, 1)));
                if direction.is_some() {
                    ddir = Some(Array2::zeros((rows, hd)));
                }
            }
            EvoTape::Identity => {}
        }

        let state = |r: usize, j: usize| -> &[f64] {
            let base = (r * block + j) * hd;
            &op.states[base..base + hd]
        };

        let mut g = vec![0.0; block * hd];
        for blk in 0..rows / block {
            g.fill(0.0);
            for i in (0..block).rev() {
                let r = blk * block + i;
                // Score contributions: dS[r][j] flows into q_r and h_{i,j}.
                for j in 0..=i {
                    let d = ds[[r, j]];
                    if d != 0.0 {
                        let h = state(r, j);
                        for c in 0..hd {
                            dq[[r, c]] += d * h[c];
                            g[j * hd + c] += d * qv[[r, c]];
                        }
                    }
                }
                // Retire the impulse born at i: h_{i,i} = b_i k_i.
                {
                    let gi = &g[i * hd..(i + 1) * hd];
                    let mut acc = 0.0;
                    for c in 0..hd {
                        acc += kv[[r, c]] * gi[c];
                        dk[[r, c]] += bv[[r, 0]] * gi[c];
                    }
                    db[[r, 0]] += acc;
                }
                g[i * hd..(i + 1) * hd].fill(0.0);
                if i == 0 {
                    continue;
                }
                // Pull the remaining gradients through A_i^T and collect the
                // step-parameter gradients, using h_{i-1,j} = states(r-1, j).
                match &op.evo {
                    EvoTape::Identity => {}
                    EvoTape::Scalar { lam } => {
                        let l = self.nodes[lam.0].value[[r, 0]];
                        let dl = dlam_scalar.as_mut().unwrap();
                        let mut acc = 0.0;
                        for j in 0..i {
                            let hp = state(r - 1, j);
                            for c in 0..hd {
                                acc += g[j * hd + c] * hp[c];
                                g[j * hd + c] *= l;
                            }
                        }
                        dl[[r, 0]] += acc;
                    }
                    EvoTape::Diagonal { lam } => {
                        let lv = &self.nodes[lam.0].value;
                        let dl = dlam_diag.as_mut().unwrap();
                        for j in 0..i {
                            let hp = state(r - 1, j);
                            for c in 0..hd {
                                dl[[r, c]] += g[j * hd + c] * hp[c];
                                g[j * hd + c] *= lv[[r, c]];
                            }
                        }
                    }
                    EvoTape::Householder { beta, direction } => {
                        let prev = &op.states[(r - 1) * block * hd..r * block * hd];
                        self.backward_householder_step(
                            kv,
                            r,
                            i,
                            hd,
                            &mut g,
                            prev,
                            self.nodes[beta.0].value[[r, 0]],
                            direction,
                            None,
                            dbeta.as_mut().unwrap(),
                            dgate.as_mut(),
                            ddir.as_mut(),
                            &mut dk,
                        );
                    }
                    EvoTape::GatedHouseholder { gate, beta, direction } => {
                        let prev = &op.states[(r - 1) * block * hd..r * block * hd];
                        self.backward_householder_step(
                            kv,
                            r,
                            i,
                            hd,
                            &mut g,
                            prev,
                            self.nodes[beta.0].value[[r, 0]],
                            direction,
                            Some(self.nodes[gate.0].value[[r, 0]]),
                            dbeta.as_mut().unwrap(),
                            dgate.as_mut(),
                            ddir.as_mut(),
                            &mut dk,
                        );
                    }
                }
            }
        }

        devo.push((op.q, dq));
        devo.push((op.k, dk));
        devo.push((op.b, db));
        match &op.evo {
            EvoTape::Scalar { lam } => devo.push((*lam, dlam_scalar.unwrap())),
            EvoTape::Diagonal { lam } => devo.push((*lam, dlam_diag.unwrap())),
            EvoTape::Householder { beta, direction } => {
                devo.push((*beta, dbeta.unwrap()));
                if let Some(dir) = direction {
                    devo.push((*dir, ddir.unwrap()));
                }
            }
            EvoTape::GatedHouseholder { gate, beta, direction } => {
                devo.push((*beta, dbeta.unwrap()));
                devo.push((*gate, dgate.unwrap()));
                if let Some(dir) = direction {
                    devo.push((*dir, ddir.unwrap()));
                }
            }
            EvoTape::Identity => {}
        }
        devo
    }

    /// One reverse Householder step at read time `i` (global row `r`):
    /// forward was `h <- gate * (h_prev - beta zhat (zhat . h_prev))`.
    /// `prev_states` packs `h_{i-1,j}` as `hd`-sized chunks.
    #[allow(clippy::too_many_arguments)]
    fn backward_householder_step(
        &self,
        kv: &Array2<f64>,
        r: usize,
        i: usize,
        hd: usize,
        g: &mut [f64],
        prev_states: &[f64],
        beta: f64,
        direction: &Option<NodeId>,
        gate: Option<f64>,
        dbeta: &mut Array2<f64>,
        mut dgate: Option<&mut Array2<f64>>,
        ddir: Option<&mut Array2<f64>>,
        dk: &mut Array2<f64>,
    ) {
        // Rebuild the unit direction and its norm.
        let zraw: Vec<f64> = match direction {
            None => (0..hd).map(|c| kv[[r, c]]).collect(),
            Some(id) => {
                let v = &self.nodes[id.0].value;
                (0..hd).map(|c| v[[r, c]]).collect()
            }
        };
        let norm = zraw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let zhat: Vec<f64> = zraw.iter().map(|v| v / norm).collect();

        let mut dzhat = vec![0.0; hd];
        for j in 0..i {
            let hp = &prev_states[j * hd..(j + 1) * hd];
            let gj = &mut g[j * hd..(j + 1) * hd];
            // Gate backward first (it was applied last in the forward).
            if let (Some(gval), Some(dg)) = (gate, dgate.as_mut()) {
                // pre-gate output = h_prev - beta zhat (zhat.h_prev)
                let zh: f64 = zhat.iter().zip(hp.iter()).map(|(a, b)| a * b).sum();
                let mut acc = 0.0;
                for c in 0..hd {
                    let pre = hp[c] - beta * zhat[c] * zh;
                    acc += gj[c] * pre;
                }
                dg[[r, 0]] += acc;
                for v in gj.iter_mut() {
                    *v *= gval;
                }
            }
            let zh: f64 = zhat.iter().zip(hp.iter()).map(|(a, b)| a * b).sum();
            let zg: f64 = zhat.iter().zip(gj.iter()).map(|(a, b)| a * b).sum();
            dbeta[[r, 0]] -= zh * zg;
            for c in 0..hd {
                dzhat[c] -= beta * (zh * gj[c] + zg * hp[c]);
            }
            // g <- A^T g; the rank-one update is symmetric.
            for c in 0..hd {
                gj[c] -= beta * zhat[c] * zg;
            }
        }
        // Chain zhat = z/|z|: dz = (I - zhat zhat^T) dzhat / |z|.
        let zd: f64 = zhat.iter().zip(dzhat.iter()).map(|(a, b)| a * b).sum();
        match (direction, ddir) {
            (None, _) => {
                for c in 0..hd {
                    dk[[r, c]] += (dzhat[c] - zhat[c] * zd) / norm;
                }
            }
            (Some(_), Some(dd)) => {
                for c in 0..hd {
                    dd[[r, c]] += (dzhat[c] - zhat[c] * zd) / norm;
                }
            }
            (Some(_), None) => unreachable!("derived direction without a gradient buffer"),
        }
    }

    fn backward_readout_norm(&self, op: &ReadoutNormOp, dw: &Array2<f64>) -> Vec<(NodeId, Array2<f64>)> {
        let sv = &self.nodes[op.scores.0].value;
        let weights = &op.raw; // raw coefficients
        let block = op.block;
        let rows = sv.nrows();
        let mut dscores = Array2::<f64>::zeros(sv.raw_dim());
        let mut daux: Option<(NodeId, Array2<f64>)> = match &op.norm {
            NormTape::External { output_gate, .. } => Some((*output_gate, Array2::zeros((rows, 1)))),
            NormTape::PositionDerived { eta } => Some((*eta, Array2::zeros((rows, 1)))),
            _ => None,
        };

        for r in 0..rows {
            let i = r % block;
            if op.readout == ScalarReadout::Exp && matches!(op.norm, NormTape::Sum) {
                // Softmax backward from the weights alone.
                let den: f64 = (0..=i).map(|j| weights[[r, j]]).sum();
                let w_row: Vec<f64> = (0..=i).map(|j| weights[[r, j]] / den).collect();
                let dot: f64 = (0..=i).map(|j| dw[[r, j]] * w_row[j]).sum();
                for j in 0..=i {
                    dscores[[r, j]] = w_row[j] * (dw[[r, j]] - dot);
                }
                continue;
            }
            // General path: alpha = phi(s), weights = alpha / eta.
            let alpha: Vec<f64> = (0..=i).map(|j| weights[[r, j]]).collect();
            let sum: f64 = alpha.iter().sum();
            match &op.norm {
                NormTape::One => {
                    for j in 0..=i {
                        dscores[[r, j]] = dw[[r, j]] * op.readout.derivative(sv[[r, j]]);
                    }
                }
                NormTape::Geometric { rho } => {
                    let eta = rho.powi(i as i32 + 1);
                    for j in 0..=i {
                        dscores[[r, j]] = dw[[r, j]] / eta * op.readout.derivative(sv[[r, j]]);
                    }
                }
                NormTape::Sum => {
                    let eta = floor_eta(sum);
                    let floored = eta != sum;
                    let wd: f64 = (0..=i).map(|j| dw[[r, j]] * alpha[j]).sum();
                    for j in 0..=i {
                        let mut dalpha = dw[[r, j]] / eta;
                        if !floored {
                            dalpha -= wd / (eta * eta);
                        }
                        dscores[[r, j]] = dalpha * op.readout.derivative(sv[[r, j]]);
                    }
                }
                NormTape::External { output_gate, floor } => {
                    let o = floor_eta(self.nodes[output_gate.0].value[[r, 0]]);
                    let m = sum.abs().max(*floor);
                    let wd: f64 = (0..=i).map(|j| dw[[r, j]] * alpha[j]).sum();
                    let (_, dout) = daux.as_mut().unwrap();
                    dout[[r, 0]] += wd / m;
                    for j in 0..=i {
                        let mut dalpha = dw[[r, j]] * o / m;
                        if sum.abs() > *floor {
                            dalpha -= sum.signum() * wd * o / (m * m);
                        }
                        dscores[[r, j]] = dalpha * op.readout.derivative(sv[[r, j]]);
                    }
                }
                NormTape::PositionDerived { eta } => {
                    let e = floor_eta(self.nodes[eta.0].value[[r, 0]]);
                    let floored = e != self.nodes[eta.0].value[[r, 0]];
                    let wd: f64 = (0..=i).map(|j| dw[[r, j]] * alpha[j]).sum();
                    let (_, de) = daux.as_mut().unwrap();
                    if !floored {
                        de[[r, 0]] -= wd / (e * e);
                    }
                    for j in 0..=i {
                        dscores[[r, j]] = dw[[r, j]] / e * op.readout.derivative(sv[[r, j]]);
                    }
                }
            }
        }
        let mut out = vec![(op.scores, dscores)];
        if let Some(aux) = daux {
            out.push(aux);
        }
        out
    }
}

fn householder_slice(states: &mut [f64], zhat: &[f64], beta: f64, hd: usize) {
    for chunk in states.chunks_mut(hd) {
        let zh: f64 = zhat.iter().zip(chunk.iter()).map(|(a, b)| a * b).sum();
        let f = beta * zh;
        for (v, z) in chunk.iter_mut().zip(zhat.iter()) {
            *v -= f * z;
        }
    }
}

fn accumulate_opt(slot: &mut Option<Array2<f64>>, grad: &Array2<f64>) {
    match slot {
        Some(existing) => *existing += grad,
        None => *slot = Some(grad.clone()),
    }
}

fn add_grad(grads: &mut [Option<Array2<f64>>], id: NodeId, grad: Array2<f64>) {
    match &mut grads[id.0] {
        Some(existing) => *existing += &grad,
        slot @ None => *slot = Some(grad),
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randmat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0) * scale)
    }

    /// Compare tape gradients against central differences for a scalar loss
    /// built by `build` from parameter nodes.
    fn check_gradients(
        params: &[Array2<f64>],
        build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
        tol: f64,
    ) {
        let run = |values: &[Array2<f64>]| -> (f64, Vec<Option<Array2<f64>>>) {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = values
                .iter()
                .enumerate()
                .map(|(i, p)| tape.param(i, p.clone()))
                .collect();
            let loss = build(&mut tape, &ids);
            let value = tape.value(loss)[[0, 0]];
            let grads = tape.backward(loss, values.len());
            (value, grads)
        };
        let (_, grads) = run(params);
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            let g = grads[pi]
                .as_ref()
                .unwrap_or_else(|| panic!("parameter {pi} received no gradient"));
            for r in 0..p.nrows() {
                for c in 0..p.ncols() {
                    let mut plus = params.to_vec();
                    plus[pi][[r, c]] += h;
                    let mut minus = params.to_vec();
                    minus[pi][[r, c]] -= h;
                    let fd = (run(&plus).0 - run(&minus).0) / (2.0 * h);
                    let ad = g[[r, c]];
                    let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-4);
                    assert!(
                        rel <= tol,
                        "param {pi} [{r},{c}]: analytic {ad} vs finite-diff {fd} (rel {rel})"
                    );
                }
            }
        }
    }

    /// Half the squared Frobenius norm, reduced with two matrix products.
    fn sum_squares(tape: &mut Tape, x: NodeId) -> NodeId {
        let sq = tape.mul(x, x);
        let v = tape.value(sq);
        let (r, c) = (v.nrows(), v.ncols());
        let onesc = tape.constant(Array2::from_elem((1, c), 1.0));
        let rowsums = tape.matmul_nt(onesc, sq); // (1, r)
        let half = tape.constant(Array2::from_elem((1, r), 0.5));
        tape.matmul_nt(rowsums, half) // (1, 1)
    }

    #[test]
    fn sum_squares_reduces_correctly() {
        let mut tape = Tape::new();
        let x = tape.constant(ndarray::array![[1.0, 2.0], [3.0, 4.0]]);
        let l = sum_squares(&mut tape, x);
        assert!((tape.value(l)[[0, 0]] - 0.5 * 30.0).abs() < 1e-12);
    }

    #[test]
    fn dense_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let x = randmat(&mut rng, 4, 3, 1.0);
        let w = randmat(&mut rng, 5, 3, 1.0);
        let b = randmat(&mut rng, 1, 5, 0.5);
        let gain = randmat(&mut rng, 1, 5, 1.0) + 1.0;
        check_gradients(&[x, w, b, gain], |tape, ids| {
            let y = tape.matmul_nt(ids[0], ids[1]);
            let y = tape.add_bias_row(y, ids[2]);
            let y = tape.map(y, MapKind::Silu);
            let y = tape.rms_norm(y, ids[3]);
            sum_squares(tape, y)
        }, 1e-6);
    }

    #[test]
    fn embed_conv_slice_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let table = randmat(&mut rng, 6, 4, 1.0);
        let kernel = randmat(&mut rng, 4, 3, 0.8);
        let ids_seq = vec![0usize, 3, 5, 1, 3, 0, 2, 4];
        check_gradients(&[table, kernel], move |tape, ids| {
            let e = tape.embed(ids[0], ids_seq.clone());
            let c = tape.short_conv(e, ids[1], 4);
            let left = tape.slice_cols(c, 0, 2);
            let right = tape.slice_cols(c, 2, 2);
            let swapped = tape.concat_cols(vec![right, left]);
            let gated = tape.mul(swapped, c);
            sum_squares(tape, gated)
        }, 1e-6);
    }

    fn scan_loss(
        tape: &mut Tape,
        q: NodeId,
        k: NodeId,
        b: NodeId,
        v: NodeId,
        evo: EvoTape,
        readout: ScalarReadout,
        norm: NormTape,
        block: usize,
        targets: Vec<u32>,
    ) -> NodeId {
        let scores = tape.coeff_scores(q, k, b, evo, block).unwrap();
        let weights = tape.readout_norm(scores, readout, norm, block);
        let mixed = tape.block_matmul(weights, v, block);
        tape.cross_entropy(mixed, targets).unwrap()
    }

    struct ScanFixture {
        q: Array2<f64>,
        k: Array2<f64>,
        b: Array2<f64>,
        v: Array2<f64>,
        aux: Array2<f64>,
        targets: Vec<u32>,
        block: usize,
    }

    fn scan_fixture(seed: u64) -> ScanFixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = 4;
        let rows = 2 * block;
        let hd = 3;
        let vocab = 5;
        let targets: Vec<u32> = (0..rows)
            .map(|r| if r % 2 == 0 { IGNORE } else { rng.random_range(0..vocab as u32) })
            .collect();
        ScanFixture {
            q: randmat(&mut rng, rows, hd, 1.0),
            k: randmat(&mut rng, rows, hd, 1.0),
            b: randmat(&mut rng, rows, 1, 0.5),
            v: randmat(&mut rng, rows, vocab, 1.0),
            aux: randmat(&mut rng, rows, 1, 0.6),
            targets,
            block,
        }
    }

    #[test]
    fn scan_gradients_identity_evolution_softmax() {
        let f = scan_fixture(7);
        let targets = f.targets.clone();
        check_gradients(&[f.q, f.k, f.b, f.v], move |tape, ids| {
            scan_loss(
                tape,
                ids[0],
                ids[1],
                ids[2],
                ids[3],
                EvoTape::Identity,
                ScalarReadout::Exp,
                NormTape::Sum,
                4,
                targets.clone(),
            )
        }, 1e-5);
    }

    #[test]
    fn scan_gradients_scalar_evolution_identity_readout() {
        let f = scan_fixture(8);
        let targets = f.targets.clone();
        check_gradients(&[f.q, f.k, f.b, f.v, f.aux], move |tape, ids| {
            let lam = tape.map(ids[4], MapKind::Sigmoid);
            scan_loss(
                tape,
                ids[0],
                ids[1],
                ids[2],
                ids[3],
                EvoTape::Scalar { lam },
                ScalarReadout::Identity,
                NormTape::One,
                4,
                targets.clone(),
            )
        }, 1e-5);
    }

    #[test]
    fn scan_gradients_diagonal_evolution_softplus_sum() {
        let f = scan_fixture(9);
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let lam_raw = randmat(&mut rng, f.q.nrows(), f.q.ncols(), 1.0);
        let targets = f.targets.clone();
        check_gradients(&[f.q, f.k, f.b, f.v, lam_raw], move |tape, ids| {
            let lam = tape.map(ids[4], MapKind::Sigmoid);
            scan_loss(
                tape,
                ids[0],
                ids[1],
                ids[2],
                ids[3],
                EvoTape::Diagonal { lam },
                ScalarReadout::Softplus,
                NormTape::Sum,
                4,
                targets.clone(),
            )
        }, 1e-5);
    }

    #[test]
    fn scan_gradients_householder_from_keys() {
        let f = scan_fixture(10);
        let targets = f.targets.clone();
        check_gradients(&[f.q, f.k, f.b, f.v, f.aux], move |tape, ids| {
            let beta = tape.map(ids[4], MapKind::Sigmoid);
            scan_loss(
                tape,
                ids[0],
                ids[1],
                ids[2],
                ids[3],
                EvoTape::Householder { beta, direction: None },
                ScalarReadout::Identity,
                NormTape::One,
                4,
                targets.clone(),
            )
        }, 1e-5);
    }

    #[test]
    fn scan_gradients_gated_householder_derived_direction() {
        let f = scan_fixture(11);
        let mut rng = ChaCha8Rng::seed_from_u64(110);
        let dir_raw = randmat(&mut rng, f.q.nrows(), f.q.ncols(), 1.0) + 0.3;
        let gate_raw = randmat(&mut rng, f.q.nrows(), 1, 0.7);
        let targets = f.targets.clone();
        check_gradients(
            &[f.q, f.k, f.b, f.v, f.aux, dir_raw, gate_raw],
            move |tape, ids| {
                let beta = tape.map(ids[4], MapKind::Sigmoid);
                let gate = tape.map(ids[6], MapKind::Sigmoid);
                scan_loss(
                    tape,
                    ids[0],
                    ids[1],
                    ids[2],
                    ids[3],
                    EvoTape::GatedHouseholder {
                        gate,
                        beta,
                        direction: Some(ids[5]),
                    },
                    ScalarReadout::Relu,
                    NormTape::Geometric { rho: 1.1 },
                    4,
                    targets.clone(),
                )
            },
            1e-5,
        );
    }

    #[test]
    fn scan_gradients_external_norm() {
        let f = scan_fixture(12);
        let targets = f.targets.clone();
        check_gradients(&[f.q, f.k, f.b, f.v, f.aux], move |tape, ids| {
            let ogate = tape.map(ids[4], MapKind::Sigmoid);
            scan_loss(
                tape,
                ids[0],
                ids[1],
                ids[2],
                ids[3],
                EvoTape::Scalar { lam: ogate },
                ScalarReadout::Identity,
                NormTape::External { output_gate: ogate, floor: 0.1 },
                4,
                targets.clone(),
            )
        }, 1e-5);
    }

    #[test]
    fn scan_gradients_position_derived_norm() {
        let f = scan_fixture(13);
        let targets = f.targets.clone();
        check_gradients(&[f.q, f.k, f.b, f.v, f.aux], move |tape, ids| {
            let eta = tape.map(ids[4], MapKind::Exp);
            scan_loss(
                tape,
                ids[0],
                ids[1],
                ids[2],
                ids[3],
                EvoTape::Identity,
                ScalarReadout::Sigmoid,
                NormTape::PositionDerived { eta },
                4,
                targets.clone(),
            )
        }, 1e-5);
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let mut tape = Tape::new();
        let used = tape.param(0, Array2::from_elem((1, 1), 2.0));
        let _unused = tape.param(1, Array2::from_elem((1, 1), 3.0));
        let loss = tape.mul(used, used);
        let grads = tape.backward(loss, 2);
        assert!(grads[0].is_some());
        assert!(grads[1].is_none());
    }
}
