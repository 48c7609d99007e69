//! Coefficient computation and the two forward routes.
//!
//! Conventions: rows of sequence arrays are positions (0-based), head `h`
//! owns columns `h*head_dim .. (h+1)*head_dim` of the query/key arrays and
//! the matching slice of the value array. The per-step operator at position
//! `t` acts when advancing states from read time `t-1` to `t`, so the state
//! of impulse `j` at read time `i` has seen operators `j+1 ..= i`, latest
//! applied last.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use super::projection::{project, ProjectionSet};
use super::readout::ReadoutMap;
use super::rules::{apply_to_columns, evolution_apply, floor_eta, NormalizationRule, StepOperator};
use super::{DynamicsSpec, ImpulseState};
use crate::error::{Error, Result};

/// Largest score the exponential readout can take without overflowing.
const EXP_OVERFLOW: f64 = 709.0;

/// Row chunk size for the dense fast path.
const DENSE_CHUNK: usize = 256;

/// One head's mixing coefficients over an `L`-step sequence.
///
/// `raw` holds the unnormalized coefficients, `normalized` the per-row
/// `raw / eta`. The strict upper triangle of both is structurally zero. When
/// an unnormalized value is not representable (the stabilized softmax path
/// can normalize scores whose raw exponential overflows), the entry is
/// clamped to `f64::MAX` and listed in `raw_overflow`.
#[derive(Clone, Debug)]
pub struct CoefficientMatrix {
    pub head: usize,
    pub raw: Array2<f64>,
    pub normalized: Array2<f64>,
    pub eta: Array1<f64>,
    pub raw_overflow: Vec<(usize, usize)>,
}

impl CoefficientMatrix {
    pub fn len(&self) -> usize {
        self.raw.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.nrows() == 0
    }

    /// CSV export with columns `i,j,raw,normalized` over the lower triangle.
    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "i,j,raw,normalized")?;
        for i in 0..self.len() {
            for j in 0..=i {
                writeln!(w, "{},{},{},{}", i, j, self.raw[[i, j]], self.normalized[[i, j]])?;
            }
        }
        Ok(())
    }
}

/// Finite-memory state of the recurrent route: `S in R^{head_dim x d_v/head}`
/// plus the normalization accumulator mirroring the same dynamics when the
/// normalization rule needs one. Starts at zero.
#[derive(Clone, Debug)]
pub struct RecurrentState {
    pub s: Array2<f64>,
    pub norm_accumulator: Option<Array1<f64>>,
}

impl RecurrentState {
    pub fn new(head_dim: usize, value_dim: usize, with_accumulator: bool) -> Self {
        RecurrentState {
            s: Array2::zeros((head_dim, value_dim)),
            norm_accumulator: with_accumulator.then(|| Array1::zeros(head_dim)),
        }
    }

    /// One update: `S <- A S + b k v^T`, with the accumulator following the
    /// same dynamics driven by `b k`.
    pub fn step(&mut self, op: &StepOperator, b: f64, k: ArrayView1<f64>, v: ArrayView1<f64>) {
        apply_to_columns(op, &mut self.s.view_mut());
        for (r, kr) in k.iter().enumerate() {
            let bk = b * kr;
            for (c, vc) in v.iter().enumerate() {
                self.s[[r, c]] += bk * vc;
            }
        }
        if let Some(acc) = &mut self.norm_accumulator {
            let mut m = acc
                .view_mut()
                .into_shape_with_order((k.len(), 1))
                .expect("accumulator reshape");
            apply_to_columns(op, &mut m);
            for (r, kr) in k.iter().enumerate() {
                acc[r] += b * kr;
            }
        }
    }
}

fn check_sequence(name: &'static str, arr: &ArrayView2<f64>, len: usize, cols: usize) -> Result<()> {
    if arr.nrows() != len || arr.ncols() != cols {
        return Err(Error::shape(
            name,
            format!("{len}x{cols}"),
            format!("{}x{}", arr.nrows(), arr.ncols()),
        ));
    }
    Ok(())
}

/// Keys with each head slice L2-normalized, when the spec asks for it.
fn effective_keys(spec: &DynamicsSpec, keys: &Array2<f64>) -> Array2<f64> {
    if !spec.normalize_keys {
        return keys.clone();
    }
    let hd = spec.dims.head_dim();
    let mut out = keys.clone();
    for mut row in out.rows_mut() {
        for h in 0..spec.dims.heads {
            let lo = h * hd;
            let mut norm = 0.0;
            for r in lo..lo + hd {
                norm += row[r] * row[r];
            }
            let norm = norm.sqrt();
            if norm > 0.0 {
                for r in lo..lo + hd {
                    row[r] /= norm;
                }
            }
        }
    }
    out
}

/// The impulse response of key `j` read at time `i`: the product of the
/// step operators over `j+1 ..= i` applied to `b_j k_j`, all heads
/// concatenated.
pub fn impulse_state(
    spec: &DynamicsSpec,
    keys: &Array2<f64>,
    inputs: &Array2<f64>,
    j: usize,
    i: usize,
) -> Result<ImpulseState> {
    if i < j {
        return Err(Error::IndexOrder { impulse: j, read: i });
    }
    let len = inputs.nrows();
    if i >= len {
        return Err(Error::InvalidConfig(format!(
            "read index {i} out of range for sequence of length {len}"
        )));
    }
    check_sequence("keys", &keys.view(), len, spec.dims.n)?;
    check_sequence("inputs", &inputs.view(), len, spec.dims.d)?;

    let keys = effective_keys(spec, keys);
    let hd = spec.dims.head_dim();
    let mut vector = Array1::<f64>::zeros(spec.dims.n);
    for h in 0..spec.dims.heads {
        let lo = h * hd;
        let b = spec.scaling.eval(h, hd, j, inputs.row(j));
        let mut state = keys.slice(s![j, lo..lo + hd]).to_owned() * b;
        for t in (j + 1)..=i {
            let op = spec
                .evolution
                .step_operator(h, hd, t, inputs.row(t), keys.slice(s![t, lo..lo + hd]))?;
            state = evolution_apply(&op, state.view());
            if state.iter().any(|v| !v.is_finite()) {
                return Err(Error::Overflow { step: t, stage: "evolving impulse state" });
            }
        }
        vector.slice_mut(s![lo..lo + hd]).assign(&state);
    }
    Ok(ImpulseState {
        vector,
        source_index: j,
        read_index: i,
    })
}

/// Scratch produced when scanning one head: per-row prefix scores (or raw
/// kernel coefficients), consumed row by row.
pub(crate) struct HeadScan<'a> {
    spec: &'a DynamicsSpec,
    head: usize,
    inputs: &'a Array2<f64>,
    queries: ArrayView2<'a, f64>,
    keys: ArrayView2<'a, f64>,
    /// Column `j` holds the current state of impulse `j`.
    states: Array2<f64>,
    next: usize,
}

impl<'a> HeadScan<'a> {
    pub(crate) fn new(
        spec: &'a DynamicsSpec,
        head: usize,
        inputs: &'a Array2<f64>,
        queries: ArrayView2<'a, f64>,
        keys: ArrayView2<'a, f64>,
    ) -> Self {
        let hd = spec.dims.head_dim();
        let len = inputs.nrows();
        HeadScan {
            spec,
            head,
            inputs,
            queries,
            keys,
            states: Array2::zeros((hd, len)),
            next: 0,
        }
    }

    /// Advance to row `i = self.next` and write scores for `j <= i` into
    /// `row[..=i]`. For kernel-product readouts the entries are already the
    /// raw coefficients.
    pub(crate) fn advance(&mut self, row: &mut [f64]) -> Result<()> {
        let i = self.next;
        let hd = self.spec.dims.head_dim();
        let x_i = self.inputs.row(i);
        if i > 0 {
            let op = self
                .spec
                .evolution
                .step_operator(self.head, hd, i, x_i, self.keys.row(i))?;
            apply_to_columns(&op, &mut self.states.slice_mut(s![.., ..i]));
            if self.states.slice(s![.., ..i]).iter().any(|v| !v.is_finite()) {
                return Err(Error::Overflow { step: i, stage: "evolving impulse states" });
            }
        }
        let b = self.spec.scaling.eval(self.head, hd, i, x_i);
        if !b.is_finite() {
            return Err(Error::Overflow { step: i, stage: "evaluating the scaling rule" });
        }
        for r in 0..hd {
            self.states[[r, i]] = b * self.keys[[i, r]];
        }

        let q = self.queries.row(i);
        match &self.spec.readout {
            ReadoutMap::KernelProduct { feature_map } => {
                let psi_q: Array1<f64> = q.mapv(|v| feature_map.apply(v));
                for j in 0..=i {
                    let mut acc = 0.0;
                    for r in 0..hd {
                        acc += psi_q[r] * feature_map.apply(self.states[[r, j]]);
                    }
                    row[j] = acc;
                }
            }
            _ => {
                for j in 0..=i {
                    row[j] = q.dot(&self.states.column(j));
                }
            }
        }
        self.next += 1;
        Ok(())
    }
}

/// Outcome of normalizing one row.
pub(crate) struct FinalizedRow {
    pub(crate) eta: f64,
    pub(crate) overflowed: Vec<usize>,
}

/// Turn prefix scores into raw and normalized coefficients for row `i`.
///
/// The stabilized path (exponential readout with coefficient-sum
/// normalization) subtracts the row maximum inside the ratio, which leaves
/// the normalized values unchanged; raw values are recomputed unshifted and
/// flagged when they do not fit.
pub(crate) fn finalize_row(
    spec: &DynamicsSpec,
    head: usize,
    i: usize,
    x_i: ArrayView1<f64>,
    scores: &[f64],
    raw: &mut [f64],
    normalized: &mut [f64],
) -> Result<FinalizedRow> {
    let mut overflowed = Vec::new();
    let is_kernel = matches!(spec.readout, ReadoutMap::KernelProduct { .. });

    if matches!(spec.readout, ReadoutMap::Exponential)
        && matches!(spec.normalization, NormalizationRule::CoefficientSum)
    {
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::Overflow { step: i, stage: "computing readout scores" });
        }
        let mut den = 0.0;
        for (j, s) in scores.iter().enumerate() {
            let e = (s - m).exp();
            normalized[j] = e;
            den += e;
            if *s <= EXP_OVERFLOW {
                raw[j] = s.exp();
            } else {
                raw[j] = f64::MAX;
                overflowed.push(j);
            }
        }
        for w in normalized.iter_mut() {
            *w /= den;
        }
        let eta = if m <= EXP_OVERFLOW.ln() + EXP_OVERFLOW {
            let e = den * m.exp();
            if e.is_finite() { e } else { f64::MAX }
        } else {
            f64::MAX
        };
        return Ok(FinalizedRow { eta, overflowed });
    }

    for (j, s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::Overflow { step: i, stage: "computing readout scores" });
        }
        let a = if is_kernel { *s } else { spec.readout.apply(*s) };
        if !a.is_finite() {
            return Err(Error::Overflow { step: i, stage: "applying the readout map" });
        }
        raw[j] = a;
    }

    let eta = match &spec.normalization {
        NormalizationRule::One => 1.0,
        NormalizationRule::CoefficientSum => floor_eta(raw.iter().sum()),
        NormalizationRule::Geometric { rho } => rho.powi(i as i32 + 1),
        NormalizationRule::ExternalState { output_gate, floor } => {
            let sum: f64 = raw.iter().sum();
            let o = floor_eta(output_gate.eval(head, i, x_i));
            sum.abs().max(*floor) / o
        }
        NormalizationRule::PositionDerived(ds) => floor_eta(ds.eval(head, x_i)),
    };
    for j in 0..raw.len() {
        normalized[j] = raw[j] / eta;
    }
    Ok(FinalizedRow { eta, overflowed })
}

/// Materialize every head's coefficient matrix for a sequence of inputs.
pub fn coefficient_matrix(
    spec: &DynamicsSpec,
    inputs: &Array2<f64>,
    proj: &ProjectionSet,
) -> Result<Vec<CoefficientMatrix>> {
    spec.validate()?;
    proj.validate(&spec.dims)?;
    let len = inputs.nrows();
    if len == 0 {
        return Err(Error::InvalidConfig("empty input sequence".into()));
    }
    let projected = project(proj, inputs)?;
    let keys = effective_keys(spec, &projected.keys);
    let hd = spec.dims.head_dim();

    let mut out = Vec::with_capacity(spec.dims.heads);
    for h in 0..spec.dims.heads {
        let lo = h * hd;
        let q_h = projected.queries.slice(s![.., lo..lo + hd]);
        let k_h = keys.slice(s![.., lo..lo + hd]);
        let mut scan = HeadScan::new(spec, h, inputs, q_h, k_h);
        let mut scores = vec![0.0; len];
        let mut raw = Array2::<f64>::zeros((len, len));
        let mut normalized = Array2::<f64>::zeros((len, len));
        let mut eta = Array1::<f64>::zeros(len);
        let mut raw_overflow = Vec::new();
        for i in 0..len {
            scan.advance(&mut scores[..=i])?;
            let row = finalize_row(
                spec,
                h,
                i,
                inputs.row(i),
                &scores[..=i],
                raw.row_mut(i).slice_mut(s![..=i]).as_slice_mut().unwrap(),
                normalized.row_mut(i).slice_mut(s![..=i]).as_slice_mut().unwrap(),
            )?;
            eta[i] = row.eta;
            raw_overflow.extend(row.overflowed.into_iter().map(|j| (i, j)));
        }
        out.push(CoefficientMatrix {
            head: h,
            raw,
            normalized,
            eta,
            raw_overflow,
        });
    }
    Ok(out)
}

/// `y_i = sum_{j<=i} normalized[i][j] v_j`, heads mixed on their value
/// slices and concatenated.
pub fn mix_values(coeffs: &[CoefficientMatrix], values: &Array2<f64>) -> Result<Array2<f64>> {
    if coeffs.is_empty() {
        return Err(Error::InvalidConfig("no coefficient matrices given".into()));
    }
    let len = coeffs[0].len();
    let heads = coeffs.len();
    if values.nrows() != len {
        return Err(Error::shape(
            "values",
            format!("{len}x_"),
            format!("{}x{}", values.nrows(), values.ncols()),
        ));
    }
    if values.ncols() % heads != 0 {
        return Err(Error::shape(
            "values",
            format!("_x{heads}k"),
            format!("_x{}", values.ncols()),
        ));
    }
    let vd = values.ncols() / heads;
    let mut out = Array2::<f64>::zeros((len, values.ncols()));
    for (h, cm) in coeffs.iter().enumerate() {
        if cm.len() != len {
            return Err(Error::shape("coefficients", format!("{len}x{len}"), format!("{}x{}", cm.len(), cm.len())));
        }
        let lo = h * vd;
        let v_h = values.slice(s![.., lo..lo + vd]);
        let y_h = cm.normalized.dot(&v_h);
        out.slice_mut(s![.., lo..lo + vd]).assign(&y_h);
    }
    Ok(out)
}

fn check_forward_shapes(
    spec: &DynamicsSpec,
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    inputs: &Array2<f64>,
) -> Result<usize> {
    let len = inputs.nrows();
    check_sequence("queries", &queries.view(), len, spec.dims.n)?;
    check_sequence("keys", &keys.view(), len, spec.dims.n)?;
    check_sequence("values", &values.view(), len, spec.dims.d_v)?;
    check_sequence("inputs", &inputs.view(), len, spec.dims.d)?;
    Ok(len)
}

/// Dense route: materialize the per-row coefficients (never the full matrix)
/// and mix values row by row. Works for every readout map.
pub fn dense_forward(
    spec: &DynamicsSpec,
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    inputs: &Array2<f64>,
) -> Result<Array2<f64>> {
    let len = check_forward_shapes(spec, queries, keys, values, inputs)?;
    let keys = effective_keys(spec, keys);
    let hd = spec.dims.head_dim();
    let vd = spec.dims.value_head_dim();
    let mut out = Array2::<f64>::zeros((len, spec.dims.d_v));

    for h in 0..spec.dims.heads {
        let qlo = h * hd;
        let vlo = h * vd;
        let q_h = queries.slice(s![.., qlo..qlo + hd]);
        let k_h = keys.slice(s![.., qlo..qlo + hd]);
        let v_h = values.slice(s![.., vlo..vlo + vd]);

        if spec.evolution.is_identity() {
            // Fast path: states are fixed at b_j k_j, so scores come from one
            // matrix product per row chunk.
            let mut bk = k_h.to_owned();
            for (j, mut row) in bk.rows_mut().into_iter().enumerate() {
                let b = spec.scaling.eval(h, hd, j, inputs.row(j));
                row.map_inplace(|v| *v *= b);
            }
            let (q_eff, bk_eff) = match &spec.readout {
                ReadoutMap::KernelProduct { feature_map } => (
                    q_h.mapv(|v| feature_map.apply(v)),
                    bk.mapv(|v| feature_map.apply(v)),
                ),
                _ => (q_h.to_owned(), bk),
            };
            let mut raw = vec![0.0; len];
            let mut w = vec![0.0; len];
            for start in (0..len).step_by(DENSE_CHUNK) {
                let stop = (start + DENSE_CHUNK).min(len);
                let scores = q_eff.slice(s![start..stop, ..]).dot(&bk_eff.t());
                let mut weights = Array2::<f64>::zeros((stop - start, len));
                for i in start..stop {
                    let srow = scores.row(i - start);
                    let srow = srow.slice(s![..=i]).to_vec();
                    finalize_row(spec, h, i, inputs.row(i), &srow, &mut raw[..=i], &mut w[..=i])?;
                    weights
                        .row_mut(i - start)
                        .slice_mut(s![..=i])
                        .assign(&ndarray::ArrayView1::from(&w[..=i]));
                }
                let y = weights.dot(&v_h);
                out.slice_mut(s![start..stop, vlo..vlo + vd]).assign(&y);
            }
        } else {
            let mut scan = HeadScan::new(spec, h, inputs, q_h, k_h);
            let mut scores = vec![0.0; len];
            let mut raw = vec![0.0; len];
            let mut w = vec![0.0; len];
            for i in 0..len {
                scan.advance(&mut scores[..=i])?;
                finalize_row(spec, h, i, inputs.row(i), &scores[..=i], &mut raw[..=i], &mut w[..=i])?;
                let weights = ndarray::ArrayView1::from(&w[..=i]);
                let y_i = v_h.slice(s![..=i, ..]).t().dot(&weights);
                out.slice_mut(s![i, vlo..vlo + vd]).assign(&y_i);
            }
        }
    }
    Ok(out)
}

/// Recurrent route: `S_i = A_i S_{i-1} + b_i k_i v_i^T`, `y_i = q_i^T S_i /
/// eta_i`. The state footprint is `n x d_v` regardless of sequence length.
/// Only available for linear readout maps.
pub fn forward_recurrent(
    spec: &DynamicsSpec,
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    inputs: &Array2<f64>,
) -> Result<Array2<f64>> {
    if !spec.readout.is_linear() {
        return Err(Error::NonlinearReadout {
            readout: spec.readout.name(),
        });
    }
    let len = check_forward_shapes(spec, queries, keys, values, inputs)?;
    let keys = effective_keys(spec, keys);
    let hd = spec.dims.head_dim();
    let vd = spec.dims.value_head_dim();
    let needs_accumulator = matches!(
        spec.normalization,
        NormalizationRule::CoefficientSum | NormalizationRule::ExternalState { .. }
    );
    let mut out = Array2::<f64>::zeros((len, spec.dims.d_v));

    for h in 0..spec.dims.heads {
        let qlo = h * hd;
        let vlo = h * vd;
        let mut state = RecurrentState::new(hd, vd, needs_accumulator);
        for i in 0..len {
            let x_i = inputs.row(i);
            let k_i = keys.slice(s![i, qlo..qlo + hd]);
            let v_i = values.slice(s![i, vlo..vlo + vd]);
            let op = if i > 0 {
                spec.evolution.step_operator(h, hd, i, x_i, k_i)?
            } else {
                StepOperator::Identity
            };
            let b = spec.scaling.eval(h, hd, i, x_i);
            state.step(&op, b, k_i, v_i);

            let q_i = queries.slice(s![i, qlo..qlo + hd]);
            let eta = match &spec.normalization {
                NormalizationRule::One => 1.0,
                NormalizationRule::CoefficientSum => {
                    let acc = state.norm_accumulator.as_ref().unwrap();
                    floor_eta(q_i.dot(acc))
                }
                NormalizationRule::Geometric { rho } => rho.powi(i as i32 + 1),
                NormalizationRule::ExternalState { output_gate, floor } => {
                    let acc = state.norm_accumulator.as_ref().unwrap();
                    let o = floor_eta(output_gate.eval(h, i, x_i));
                    q_i.dot(acc).abs().max(*floor) / o
                }
                NormalizationRule::PositionDerived(ds) => floor_eta(ds.eval(h, x_i)),
            };
            let y_i = q_i.dot(&state.s) / eta;
            if y_i.iter().any(|v| !v.is_finite()) {
                return Err(Error::Overflow { step: i, stage: "reading out the recurrent state" });
            }
            out.slice_mut(s![i, vlo..vlo + vd]).assign(&y_i);
        }
    }
    Ok(out)
}
