//! Bidirectional GRU encoder with DPP-feature, quality and actionness heads,
//! plus exact backpropagation through time for the joint loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::ActionnessRank;
use crate::losses::{
    actionness_ce_logit_grad, actionness_ce_loss, build_dpp_kernel, dpp_mle_loss_and_grad, joint_loss, one_hot,
};
use crate::numerics::{axpy, dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of the per-frame spatial features.
    pub input_dim: usize,
    /// GRU hidden units per direction.
    pub hidden: usize,
    /// Hidden width of every head.
    pub head_hidden: usize,
    /// Width of the DPP feature `φ`.
    pub phi_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 1024,
            hidden: 256,
            head_hidden: 256,
            phi_dim: 256,
        }
    }
}

impl ModelConfig {
    pub fn with_input_dim(input_dim: usize) -> Self {
        Self {
            input_dim,
            ..Self::default()
        }
    }

    /// Width of the aggregated spatio-temporal features.
    pub fn aggregate_dim(&self) -> usize {
        self.input_dim + 2 * self.hidden
    }
}

/// Parameters of one GRU direction. Input weights are `input × hidden`,
/// recurrent weights `hidden × hidden`, biases `1 × hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruDirection {
    pub w_update: Matrix,
    pub w_reset: Matrix,
    pub w_candidate: Matrix,
    pub u_update: Matrix,
    pub u_reset: Matrix,
    pub u_candidate: Matrix,
    pub b_update: Matrix,
    pub b_reset: Matrix,
    pub b_candidate: Matrix,
}

impl GruDirection {
    fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_update: Matrix::zeros(input, hidden),
            w_reset: Matrix::zeros(input, hidden),
            w_candidate: Matrix::zeros(input, hidden),
            u_update: Matrix::zeros(hidden, hidden),
            u_reset: Matrix::zeros(hidden, hidden),
            u_candidate: Matrix::zeros(hidden, hidden),
            b_update: Matrix::zeros(1, hidden),
            b_reset: Matrix::zeros(1, hidden),
            b_candidate: Matrix::zeros(1, hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_update.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_update.cols()
    }

    fn tensors(&self) -> [(&'static str, &Matrix); 9] {
        [
            ("w_update", &self.w_update),
            ("w_reset", &self.w_reset),
            ("w_candidate", &self.w_candidate),
            ("u_update", &self.u_update),
            ("u_reset", &self.u_reset),
            ("u_candidate", &self.u_candidate),
            ("b_update", &self.b_update),
            ("b_reset", &self.b_reset),
            ("b_candidate", &self.b_candidate),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 9] {
        [
            &mut self.w_update,
            &mut self.w_reset,
            &mut self.w_candidate,
            &mut self.u_update,
            &mut self.u_reset,
            &mut self.u_candidate,
            &mut self.b_update,
            &mut self.b_reset,
            &mut self.b_candidate,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub forward: GruDirection,
    pub backward: GruDirection,
}

/// Two-layer perceptron: `tanh(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl Mlp {
    fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Matrix::zeros(input, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, output),
            b2: Matrix::zeros(1, output),
        }
    }

    fn tensors(&self) -> [(&'static str, &Matrix); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn hidden_activations(&self, x: &Matrix) -> Result<Matrix> {
        let mut a = x.matmul(&self.w1)?;
        a.add_row_vector(self.b1.as_slice());
        Ok(a.map(f64::tanh))
    }

    fn output(&self, hidden: &Matrix) -> Result<Matrix> {
        let mut o = hidden.matmul(&self.w2)?;
        o.add_row_vector(self.b2.as_slice());
        Ok(o)
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input.
    fn backward(&self, input: &Matrix, hidden: &Matrix, d_out: &Matrix, grad: &mut Mlp) -> Result<Matrix> {
        grad.w2.add_assign(&hidden.t_matmul(d_out)?);
        add_to_row(&mut grad.b2, &d_out.column_sums());
        let mut d_pre = d_out.matmul_t(&self.w2)?;
        for (d, a) in d_pre.as_mut_slice().iter_mut().zip(hidden.as_slice()) {
            *d *= 1.0 - a * a;
        }
        grad.w1.add_assign(&input.t_matmul(&d_pre)?);
        add_to_row(&mut grad.b1, &d_pre.column_sums());
        d_pre.matmul_t(&self.w1)
    }
}

fn add_to_row(m: &mut Matrix, v: &[f64]) {
    for (a, b) in m.as_mut_slice().iter_mut().zip(v) {
        *a += b;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub phi: Mlp,
    pub quality: Mlp,
    pub actionness: Mlp,
}

/// Every trainable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub gru: GruParams,
    pub heads: HeadParams,
}

impl ModelParameters {
    pub fn zeros(config: ModelConfig) -> Self {
        let agg = config.aggregate_dim();
        Self {
            config,
            gru: GruParams {
                forward: GruDirection::zeros(config.input_dim, config.hidden),
                backward: GruDirection::zeros(config.input_dim, config.hidden),
            },
            heads: HeadParams {
                phi: Mlp::zeros(agg, config.head_hidden, config.phi_dim),
                quality: Mlp::zeros(agg, config.head_hidden, 1),
                actionness: Mlp::zeros(agg, config.head_hidden, ActionnessRank::COUNT),
            },
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let mut params = Self::zeros(config);
        for (name, m) in params.named_tensors_mut() {
            if name.rsplit('.').next().is_some_and(|leaf| leaf.starts_with('b')) {
                continue;
            }
            let bound = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
            for v in m.as_mut_slice() {
                *v = rng.random_range(-bound..bound);
            }
        }
        params
    }

    /// Tensors in canonical order with dotted names.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::with_capacity(9 * 2 + 4 * 3);
        for (dir, p) in [("forward", &self.gru.forward), ("backward", &self.gru.backward)] {
            for (leaf, m) in p.tensors() {
                out.push((format!("gru.{dir}.{leaf}"), m));
            }
        }
        for (head, p) in [
            ("phi", &self.heads.phi),
            ("quality", &self.heads.quality),
            ("actionness", &self.heads.actionness),
        ] {
            for (leaf, m) in p.tensors() {
                out.push((format!("heads.{head}.{leaf}"), m));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let names: Vec<String> = self.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut tensors: Vec<&mut Matrix> = Vec::with_capacity(names.len());
        tensors.extend(self.gru.forward.tensors_mut());
        tensors.extend(self.gru.backward.tensors_mut());
        tensors.extend(self.heads.phi.tensors_mut());
        tensors.extend(self.heads.quality.tensors_mut());
        tensors.extend(self.heads.actionness.tensors_mut());
        names.into_iter().zip(tensors).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.as_slice().len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (_, m) in self.named_tensors() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    /// Overwrites every parameter from a flat vector in canonical order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::LengthMismatch {
                left: flat.len(),
                right: self.num_parameters(),
            });
        }
        let mut offset = 0;
        for (_, m) in self.named_tensors_mut() {
            let len = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    pub fn unflatten(config: ModelConfig, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(config);
        p.assign_flat(flat)?;
        Ok(p)
    }

    /// Flat index range occupied by the actionness head.
    pub fn actionness_head_range(&self) -> std::ops::Range<usize> {
        let mut offset = 0;
        let mut range = 0..0;
        for (name, m) in self.named_tensors() {
            let len = m.as_slice().len();
            if name.starts_with("heads.actionness.") {
                if range.is_empty() {
                    range.start = offset;
                }
                range.end = offset + len;
            }
            offset += len;
        }
        range
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-vector · matrix, `out = v · M`.
fn vec_mat(v: &[f64], m: &Matrix, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (k, &a) in v.iter().enumerate() {
        if a != 0.0 {
            axpy(a, m.row(k), out);
        }
    }
}

/// Gate activations of one step given the input projections (biases included).
struct StepGates {
    update: Vec<f64>,
    reset: Vec<f64>,
    candidate: Vec<f64>,
    hidden: Vec<f64>,
}

fn gru_step(xz: &[f64], xr: &[f64], xh: &[f64], h_prev: &[f64], p: &GruDirection) -> StepGates {
    let h = h_prev.len();
    let mut tmp = vec![0.0; h];
    vec_mat(h_prev, &p.u_update, &mut tmp);
    let update: Vec<f64> = (0..h).map(|j| sigmoid(xz[j] + tmp[j])).collect();
    vec_mat(h_prev, &p.u_reset, &mut tmp);
    let reset: Vec<f64> = (0..h).map(|j| sigmoid(xr[j] + tmp[j])).collect();
    let gated: Vec<f64> = (0..h).map(|j| reset[j] * h_prev[j]).collect();
    vec_mat(&gated, &p.u_candidate, &mut tmp);
    let candidate: Vec<f64> = (0..h).map(|j| (xh[j] + tmp[j]).tanh()).collect();
    let hidden = (0..h)
        .map(|j| (1.0 - update[j]) * h_prev[j] + update[j] * candidate[j])
        .collect();
    StepGates {
        update,
        reset,
        candidate,
        hidden,
    }
}

/// One GRU step:
/// `z = σ(x·W_z + h·U_z + b_z)`, `r = σ(x·W_r + h·U_r + b_r)`,
/// `h̃ = tanh(x·W_h + (r⊙h)·U_h + b_h)`, returns `(1−z)⊙h + z⊙h̃`.
pub fn gru_cell_forward(x: &[f64], h_prev: &[f64], params: &GruDirection) -> Result<Vec<f64>> {
    if x.len() != params.input_dim() {
        return Err(Error::shape("gru_cell_forward input", params.input_dim(), x.len()));
    }
    if h_prev.len() != params.hidden() {
        return Err(Error::shape("gru_cell_forward state", params.hidden(), h_prev.len()));
    }
    let proj = |w: &Matrix, b: &Matrix| {
        let mut out = vec![0.0; params.hidden()];
        vec_mat(x, w, &mut out);
        for (o, bv) in out.iter_mut().zip(b.as_slice()) {
            *o += bv;
        }
        out
    };
    let xz = proj(&params.w_update, &params.b_update);
    let xr = proj(&params.w_reset, &params.b_reset);
    let xh = proj(&params.w_candidate, &params.b_candidate);
    Ok(gru_step(&xz, &xr, &xh, h_prev, params).hidden)
}

/// Per-frame activations of one direction, indexed by frame (not step).
#[derive(Clone, Debug)]
struct DirectionTrace {
    hidden: Matrix,
    prev: Matrix,
    update: Matrix,
    reset: Matrix,
    candidate: Matrix,
    reverse: bool,
}

fn projections(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut out = x.matmul(w)?;
    out.add_row_vector(b.as_slice());
    Ok(out)
}

fn run_direction(x: &Matrix, p: &GruDirection, reverse: bool) -> Result<DirectionTrace> {
    let n = x.rows();
    let h = p.hidden();
    let xz = projections(x, &p.w_update, &p.b_update)?;
    let xr = projections(x, &p.w_reset, &p.b_reset)?;
    let xh = projections(x, &p.w_candidate, &p.b_candidate)?;
    let mut trace = DirectionTrace {
        hidden: Matrix::zeros(n, h),
        prev: Matrix::zeros(n, h),
        update: Matrix::zeros(n, h),
        reset: Matrix::zeros(n, h),
        candidate: Matrix::zeros(n, h),
        reverse,
    };
    let mut state = vec![0.0; h];
    for step in 0..n {
        let i = if reverse { n - 1 - step } else { step };
        let g = gru_step(xz.row(i), xr.row(i), xh.row(i), &state, p);
        trace.prev.row_mut(i).copy_from_slice(&state);
        trace.update.row_mut(i).copy_from_slice(&g.update);
        trace.reset.row_mut(i).copy_from_slice(&g.reset);
        trace.candidate.row_mut(i).copy_from_slice(&g.candidate);
        trace.hidden.row_mut(i).copy_from_slice(&g.hidden);
        state = g.hidden;
    }
    Ok(trace)
}

fn check_features(x: &Matrix, input_dim: usize) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::EmptyInput("video has no frames"));
    }
    if x.cols() != input_dim {
        return Err(Error::shape("feature width", input_dim, x.cols()));
    }
    Ok(())
}

/// Forward and backward scans from zero state; row `i` is
/// `[h_fwd[i] | h_bwd[i]]`.
pub fn bigru_forward(x: &Matrix, params: &GruParams) -> Result<Matrix> {
    check_features(x, params.forward.input_dim())?;
    if params.backward.input_dim() != x.cols() || params.backward.hidden() != params.forward.hidden() {
        return Err(Error::shape(
            "bigru_forward",
            "matching direction shapes",
            format!("{}x{}", params.backward.input_dim(), params.backward.hidden()),
        ));
    }
    let f = run_direction(x, &params.forward, false)?;
    let b = run_direction(x, &params.backward, true)?;
    f.hidden.hconcat(&b.hidden)
}

/// `[spatial | temporal]` per frame.
pub fn aggregate(spatial: &Matrix, temporal: &Matrix) -> Result<Matrix> {
    if spatial.rows() != temporal.rows() {
        return Err(Error::shape("aggregate", spatial.rows(), temporal.rows()));
    }
    spatial.hconcat(temporal)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub phi: Matrix,
    pub quality: Vec<f64>,
    pub probabilities: Matrix,
}

impl HeadOutputs {
    /// Most probable rank per frame, lowest rank on ties.
    pub fn predicted_ranks(&self) -> Vec<ActionnessRank> {
        (0..self.probabilities.rows())
            .map(|i| {
                let row = self.probabilities.row(i);
                let mut best = 0;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                ActionnessRank::new(best as u8).expect("four classes")
            })
            .collect()
    }
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    p
}

struct HeadTrace {
    phi_hidden: Matrix,
    quality_hidden: Matrix,
    actionness_hidden: Matrix,
    outputs: HeadOutputs,
}

fn run_heads(f: &Matrix, heads: &HeadParams) -> Result<HeadTrace> {
    let width = heads.phi.w1.rows();
    if f.cols() != width || heads.quality.w1.rows() != width || heads.actionness.w1.rows() != width {
        return Err(Error::shape("heads_forward", width, f.cols()));
    }
    if heads.quality.w2.cols() != 1 || heads.actionness.w2.cols() != ActionnessRank::COUNT {
        return Err(Error::shape(
            "heads_forward outputs",
            "1 quality and 4 actionness outputs",
            format!("{} and {}", heads.quality.w2.cols(), heads.actionness.w2.cols()),
        ));
    }
    let phi_hidden = heads.phi.hidden_activations(f)?;
    let phi = heads.phi.output(&phi_hidden)?;
    let quality_hidden = heads.quality.hidden_activations(f)?;
    let quality = heads.quality.output(&quality_hidden)?.as_slice().iter().map(|&v| sigmoid(v)).collect();
    let actionness_hidden = heads.actionness.hidden_activations(f)?;
    let probabilities = softmax_rows(&heads.actionness.output(&actionness_hidden)?);
    Ok(HeadTrace {
        phi_hidden,
        quality_hidden,
        actionness_hidden,
        outputs: HeadOutputs {
            phi,
            quality,
            probabilities,
        },
    })
}

/// The three heads on the aggregated features.
pub fn heads_forward(f: &Matrix, heads: &HeadParams) -> Result<HeadOutputs> {
    Ok(run_heads(f, heads)?.outputs)
}

/// Full inference pass.
pub fn predict(params: &ModelParameters, x: &Matrix) -> Result<HeadOutputs> {
    check_features(x, params.config.input_dim)?;
    let h = bigru_forward(x, &params.gru)?;
    let f = aggregate(x, &h)?;
    let out = heads_forward(&f, &params.heads)?;
    if !out.phi.is_finite() || out.quality.iter().any(|q| !q.is_finite()) || !out.probabilities.is_finite() {
        return Err(Error::non_finite("model outputs"));
    }
    Ok(out)
}

/// Supervision for one video: the DPP target subset and per-frame ranks.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub subset: Vec<usize>,
    pub frame_ranks: Vec<ActionnessRank>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// DPP negative log-likelihood.
    pub summarization: f64,
    /// Actionness cross-entropy.
    pub regularizer: f64,
    pub joint: f64,
}

fn check_targets(x: &Matrix, targets: &Targets) -> Result<()> {
    if targets.frame_ranks.len() != x.rows() {
        return Err(Error::LengthMismatch {
            left: targets.frame_ranks.len(),
            right: x.rows(),
        });
    }
    Ok(())
}

/// Joint loss `S + λR` without gradients.
pub fn joint_loss_value(params: &ModelParameters, x: &Matrix, targets: &Targets, lambda: f64) -> Result<LossParts> {
    check_targets(x, targets)?;
    let out = predict(params, x)?;
    let kernel = build_dpp_kernel(&out.phi, &out.quality)?;
    let s = crate::losses::dpp_mle_loss(&kernel, &targets.subset)?;
    let r = actionness_ce_loss(&out.probabilities, &one_hot(&targets.frame_ranks))?;
    Ok(LossParts {
        summarization: s,
        regularizer: r,
        joint: joint_loss(s, r, lambda),
    })
}

fn direction_backward(
    x: &Matrix,
    p: &GruDirection,
    trace: &DirectionTrace,
    d_hidden: &Matrix,
    grad: &mut GruDirection,
) -> Result<()> {
    let n = x.rows();
    let h = p.hidden();
    let mut da_update = Matrix::zeros(n, h);
    let mut da_reset = Matrix::zeros(n, h);
    let mut da_candidate = Matrix::zeros(n, h);
    let mut gated_prev = Matrix::zeros(n, h);
    let mut carry = vec![0.0; h];
    let mut next_carry = vec![0.0; h];
    let mut d_gated = vec![0.0; h];
    for step in (0..n).rev() {
        let i = if trace.reverse { n - 1 - step } else { step };
        let z = trace.update.row(i);
        let r = trace.reset.row(i);
        let c = trace.candidate.row(i);
        let hp = trace.prev.row(i);
        let dh: Vec<f64> = d_hidden.row(i).iter().zip(&carry).map(|(a, b)| a + b).collect();

        let dac = da_candidate.row_mut(i);
        for j in 0..h {
            dac[j] = dh[j] * z[j] * (1.0 - c[j] * c[j]);
            next_carry[j] = dh[j] * (1.0 - z[j]);
        }
        for k in 0..h {
            d_gated[k] = dot(p.u_candidate.row(k), dac);
        }
        let dau = da_update.row_mut(i);
        for j in 0..h {
            dau[j] = dh[j] * (c[j] - hp[j]) * z[j] * (1.0 - z[j]);
        }
        let dar = da_reset.row_mut(i);
        for j in 0..h {
            dar[j] = d_gated[j] * hp[j] * r[j] * (1.0 - r[j]);
            next_carry[j] += d_gated[j] * r[j];
        }
        let (dau, dar) = (da_update.row(i), da_reset.row(i));
        for k in 0..h {
            next_carry[k] += dot(p.u_update.row(k), dau) + dot(p.u_reset.row(k), dar);
        }
        let gp = gated_prev.row_mut(i);
        for j in 0..h {
            gp[j] = r[j] * hp[j];
        }
        std::mem::swap(&mut carry, &mut next_carry);
    }
    grad.w_update.add_assign(&x.t_matmul(&da_update)?);
    grad.w_reset.add_assign(&x.t_matmul(&da_reset)?);
    grad.w_candidate.add_assign(&x.t_matmul(&da_candidate)?);
    grad.u_update.add_assign(&trace.prev.t_matmul(&da_update)?);
    grad.u_reset.add_assign(&trace.prev.t_matmul(&da_reset)?);
    grad.u_candidate.add_assign(&gated_prev.t_matmul(&da_candidate)?);
    add_to_row(&mut grad.b_update, &da_update.column_sums());
    add_to_row(&mut grad.b_reset, &da_reset.column_sums());
    add_to_row(&mut grad.b_candidate, &da_candidate.column_sums());
    Ok(())
}

/// Joint loss and its exact gradient with respect to every parameter.
pub fn loss_and_gradient(
    params: &ModelParameters,
    x: &Matrix,
    targets: &Targets,
    lambda: f64,
) -> Result<(LossParts, ModelParameters)> {
    check_features(x, params.config.input_dim)?;
    check_targets(x, targets)?;
    let n = x.rows();
    let hidden = params.config.hidden;
    let fwd = run_direction(x, &params.gru.forward, false)?;
    let bwd = run_direction(x, &params.gru.backward, true)?;
    let temporal = fwd.hidden.hconcat(&bwd.hidden)?;
    let f = aggregate(x, &temporal)?;
    let heads = run_heads(&f, &params.heads)?;
    let out = &heads.outputs;

    let kernel = build_dpp_kernel(&out.phi, &out.quality)?;
    let (s, d_kernel) = dpp_mle_loss_and_grad(&kernel, &targets.subset)?;
    let r = actionness_ce_loss(&out.probabilities, &one_hot(&targets.frame_ranks))?;
    let parts = LossParts {
        summarization: s,
        regularizer: r,
        joint: joint_loss(s, r, lambda),
    };
    if !parts.joint.is_finite() {
        return Err(Error::non_finite("joint loss"));
    }

    // L = B·Bᵀ with B = diag(q)·Φ, so ∂S/∂B = 2·G·B for symmetric G.
    let mut scaled = out.phi.clone();
    for i in 0..n {
        let q = out.quality[i];
        scaled.row_mut(i).iter_mut().for_each(|v| *v *= q);
    }
    let mut d_scaled = d_kernel.matmul(&scaled)?;
    d_scaled.scale(2.0);
    let mut d_phi = d_scaled.clone();
    let mut d_quality_logit = Matrix::zeros(n, 1);
    for i in 0..n {
        let q = out.quality[i];
        let dq = dot(d_scaled.row(i), out.phi.row(i));
        d_quality_logit[(i, 0)] = dq * q * (1.0 - q);
        d_phi.row_mut(i).iter_mut().for_each(|v| *v *= q);
    }
    let mut d_logits = actionness_ce_logit_grad(&out.probabilities, &targets.frame_ranks)?;
    d_logits.scale(lambda);

    let mut grad = ModelParameters::zeros(params.config);
    let mut d_f = params.heads.phi.backward(&f, &heads.phi_hidden, &d_phi, &mut grad.heads.phi)?;
    d_f.add_assign(&params.heads.quality.backward(
        &f,
        &heads.quality_hidden,
        &d_quality_logit,
        &mut grad.heads.quality,
    )?);
    d_f.add_assign(&params.heads.actionness.backward(
        &f,
        &heads.actionness_hidden,
        &d_logits,
        &mut grad.heads.actionness,
    )?);

    let d_in = params.config.input_dim;
    let d_fwd = d_f.column_slice(d_in, d_in + hidden);
    let d_bwd = d_f.column_slice(d_in + hidden, d_in + 2 * hidden);
    direction_backward(x, &params.gru.forward, &fwd, &d_fwd, &mut grad.gru.forward)?;
    direction_backward(x, &params.gru.backward, &bwd, &d_bwd, &mut grad.gru.backward)?;

    if grad.named_tensors().iter().any(|(_, m)| !m.is_finite()) {
        return Err(Error::non_finite("parameter gradient"));
    }
    Ok((parts, grad))
}

/// Flat gradient of the joint loss over θ.
pub fn model_backward(x: &Matrix, targets: &Targets, params: &ModelParameters, lambda: f64) -> Result<Vec<f64>> {
    Ok(loss_and_gradient(params, x, targets, lambda)?.1.flatten())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            hidden: 5,
            head_hidden: 5,
            phi_dim: 5,
        }
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Scalar re-evaluation of the three gate equations, one unit at a time.
    fn scalar_cell(x: &[f64], h: &[f64], p: &GruDirection) -> Vec<f64> {
        let hid = h.len();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut out = vec![0.0; hid];
        let mut r = vec![0.0; hid];
        for j in 0..hid {
            let mut a = p.b_reset[(0, j)];
            for (k, xv) in x.iter().enumerate() {
                a += xv * p.w_reset[(k, j)];
            }
            for k in 0..hid {
                a += h[k] * p.u_reset[(k, j)];
            }
            r[j] = sig(a);
        }
        for j in 0..hid {
            let mut az = p.b_update[(0, j)];
            let mut ah = p.b_candidate[(0, j)];
            for (k, xv) in x.iter().enumerate() {
                az += xv * p.w_update[(k, j)];
                ah += xv * p.w_candidate[(k, j)];
            }
            for k in 0..hid {
                az += h[k] * p.u_update[(k, j)];
                ah += r[k] * h[k] * p.u_candidate[(k, j)];
            }
            let z = sig(az);
            out[j] = (1.0 - z) * h[j] + z * ah.tanh();
        }
        out
    }

    #[test]
    fn cell_zero_params() {
        let p = GruDirection::zeros(3, 4);
        let out = gru_cell_forward(&[1.0, -2.0, 0.5], &[0.0; 4], &p).unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn cell_closed_update_gate_copies_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ModelParameters::init(toy_config(), &mut rng);
        let mut p = params.gru.forward.clone();
        p.b_update.as_mut_slice().iter_mut().for_each(|b| *b = -1000.0);
        let h_prev = [0.3, -0.2, 0.9, 0.0, -0.7];
        let out = gru_cell_forward(&[1.0, 2.0, -1.0, 0.5, 0.1, 3.0], &h_prev, &p).unwrap();
        for (a, b) in out.iter().zip(h_prev) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn cell_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let mut p = GruDirection::zeros(6, 5);
            for m in p.tensors_mut() {
                *m = random_matrix(m.rows(), m.cols(), &mut rng);
            }
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ours = gru_cell_forward(&x, &h, &p).unwrap();
            let oracle = scalar_cell(&x, &h, &p);
            for (a, b) in ours.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let p = GruDirection::zeros(6, 5);
        assert!(matches!(gru_cell_forward(&[0.0; 5], &[0.0; 5], &p), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn bigru_shapes_and_zero_params() {
        let cfg = ModelConfig {
            input_dim: 8,
            hidden: 256,
            head_hidden: 4,
            phi_dim: 4,
        };
        let p = ModelParameters::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_matrix(5, 8, &mut rng);
        let h = bigru_forward(&x, &p.gru).unwrap();
        assert_eq!(h.shape(), (5, 512));
        assert!(h.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bigru_single_frame_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ModelParameters::init(toy_config(), &mut rng);
        let x = random_matrix(1, 6, &mut rng);
        let h = bigru_forward(&x, &p.gru).unwrap();
        assert_ne!(h.column_slice(0, 5), h.column_slice(5, 10));
        p.gru.backward = p.gru.forward.clone();
        let h = bigru_forward(&x, &p.gru).unwrap();
        assert_eq!(h.column_slice(0, 5), h.column_slice(5, 10));
    }

    #[test]
    fn bigru_reversal_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ModelParameters::init(toy_config(), &mut rng);
        p.gru.backward = p.gru.forward.clone();
        let x = random_matrix(9, 6, &mut rng);
        let h = bigru_forward(&x, &p.gru).unwrap();
        let hr = bigru_forward(&x.reversed_rows(), &p.gru).unwrap();
        assert_eq!(h.column_slice(5, 10), hr.column_slice(0, 5).reversed_rows());
    }

    #[test]
    fn aggregate_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_matrix(3, 1024, &mut rng);
        let t = random_matrix(3, 512, &mut rng);
        let f = aggregate(&x, &t).unwrap();
        assert_eq!(f.cols(), 1536);
        for i in 0..3 {
            assert_eq!(&f.row(i)[..1024], x.row(i));
            assert_eq!(&f.row(i)[1024..1280], &t.row(i)[..256]);
            assert_eq!(&f.row(i)[1280..], &t.row(i)[256..]);
        }
        let z = aggregate(&Matrix::zeros(2, 1024), &Matrix::zeros(2, 512)).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        assert!(aggregate(&x, &Matrix::zeros(2, 512)).is_err());
    }

    #[test]
    fn heads_zero_weights() {
        let p = ModelParameters::zeros(ModelConfig::with_input_dim(16));
        let f = Matrix::from_fn(3, p.config.aggregate_dim(), |i, j| (i + j) as f64 * 0.01);
        let out = heads_forward(&f, &p.heads).unwrap();
        assert_eq!(out.phi.shape(), (3, 256));
        assert!(out.quality.iter().all(|&q| q == 0.5));
        assert!(out.probabilities.as_slice().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn phi_head_scalar_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ModelParameters::init(toy_config(), &mut rng);
        let agg = p.config.aggregate_dim();
        let f = random_matrix(2, agg, &mut rng);
        let out = heads_forward(&f, &p.heads).unwrap();
        let mlp = &p.heads.phi;
        for i in 0..2 {
            for o in 0..p.config.phi_dim {
                let mut acc = mlp.b2[(0, o)];
                for k in 0..p.config.head_hidden {
                    let mut a = mlp.b1[(0, k)];
                    for j in 0..agg {
                        a += f[(i, j)] * mlp.w1[(j, k)];
                    }
                    acc += a.tanh() * mlp.w2[(k, o)];
                }
                assert!((out.phi[(i, o)] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flatten_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ModelParameters::init(toy_config(), &mut rng);
        let flat = p.flatten();
        assert_eq!(flat.len(), p.num_parameters());
        let q = ModelParameters::unflatten(p.config, &flat).unwrap();
        assert_eq!(p, q);
        assert!(ModelParameters::unflatten(p.config, &flat[1..]).is_err());
    }

    #[test]
    fn init_zero_biases_bounded_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = ModelParameters::init(toy_config(), &mut rng);
        for (name, m) in p.named_tensors() {
            let leaf = name.rsplit('.').next().unwrap();
            if leaf.starts_with('b') {
                assert!(m.as_slice().iter().all(|&v| v == 0.0), "{name}");
            } else {
                let bound = (6.0 / (m.rows() + m.cols()) as f64).sqrt();
                assert!(m.as_slice().iter().all(|&v| v.abs() <= bound), "{name}");
                assert!(m.as_slice().iter().any(|&v| v != 0.0), "{name}");
            }
        }
    }

    fn toy_problem(seed: u64) -> (ModelParameters, Matrix, Targets) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ModelParameters::init(toy_config(), &mut rng);
        let x = random_matrix(8, 6, &mut rng);
        let frame_ranks = (0..8)
            .map(|_| ActionnessRank::new(rng.random_range(0..4)).unwrap())
            .collect();
        (
            p,
            x,
            Targets {
                subset: vec![1, 5],
                frame_ranks,
            },
        )
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (p, x, t) = toy_problem(12);
        let theta = p.flatten();
        let grad = model_backward(&x, &t, &p, 0.003).unwrap();
        let f = |v: &[f64]| {
            let q = ModelParameters::unflatten(p.config, v).unwrap();
            joint_loss_value(&q, &x, &t, 0.003).unwrap().joint
        };
        let report = crate::numerics::grad_check(f, &grad, &theta, 1e-4, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn zero_params_empty_subset_is_stationary() {
        let p = ModelParameters::zeros(toy_config());
        let (_, x, mut t) = toy_problem(13);
        t.subset.clear();
        let g = model_backward(&x, &t, &p, 0.0).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_is_affine_in_lambda() {
        let (p, x, t) = toy_problem(14);
        let g0 = model_backward(&x, &t, &p, 0.0).unwrap();
        let g1 = model_backward(&x, &t, &p, 0.5).unwrap();
        let g2 = model_backward(&x, &t, &p, 1.0).unwrap();
        for i in 0..g0.len() {
            let d1 = g1[i] - g0[i];
            let d2 = g2[i] - g0[i];
            assert!((d2 - 2.0 * d1).abs() < 1e-10 * (1.0 + d2.abs()), "coordinate {i}");
        }
        let range = p.actionness_head_range();
        assert!(g0[range].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let (p, x, _) = toy_problem(15);
        assert_eq!(predict(&p, &x).unwrap(), predict(&p, &x).unwrap());
    }

    proptest! {
        #[test]
        fn probabilities_are_distributions(seed in any::<u64>(), scale in 0.1f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = ModelParameters::init(toy_config(), &mut rng);
            let x = Matrix::from_fn(4, 6, |_, _| rng.random_range(-scale..scale));
            let out = predict(&p, &x).unwrap();
            for i in 0..4 {
                let row = out.probabilities.row(i);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(out.quality[i] > 0.0 && out.quality[i] < 1.0);
            }
        }
    }
}
