//! The multi-level training objective.
//!
//! Five components feed one weighted sum: switch reconstruction (L1
//! plus a contrastive pull–push ratio), output distillation against the
//! pre-task teacher, feature projection alignment through a small
//! learned head, dynamically weighted adapter regularization, and an
//! expert diversity bonus. All reductions are means over elements so
//! magnitudes are resolution-independent, and the total is assembled in
//! a fixed order so the logged breakdown recomposes to the graph value
//! exactly.

use crate::error::{Error, Result};
use crate::experts::AdapterVars;
use crate::graph::{Graph, Padding, Var};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Weight on the distillation term in the total.
pub const ALPHA: f64 = 0.8;
/// Weight on the projection term in the total.
pub const LAMBDA: f64 = 0.3;
/// Contrastive weight inside the switch loss (no published value).
pub const DEFAULT_BETA1: f64 = 0.1;
/// Contrastive weight inside the distillation loss (no published value).
pub const DEFAULT_BETA2: f64 = 0.1;
/// Scale of the diversity bonus.
pub const DIVERSITY_WEIGHT: f64 = 0.01;
/// Guards the contrastive denominator.
pub const CONTRAST_EPS: f64 = 1e-7;

// ─── elementwise losses ─────────────────────────────────────────────────

/// Mean absolute error between same-shaped tensors.
pub fn mae(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let total = g.abs_sum(diff);
    g.scale(total, 1.0 / g.numel(a) as f64)
}

pub fn reconstruction_loss(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    mae(g, pred, gt)
}

/// Pull–push ratio in feature space: the anchor is drawn toward the
/// positive and pushed from the negative, both measured after `phi`
/// (the frozen encoder in training use).
pub fn contrast_loss(
    g: &mut Graph,
    anchor: Var,
    positive: Var,
    negative: Var,
    phi: &mut impl FnMut(&mut Graph, Var) -> Result<Var>,
) -> Result<Var> {
    let fa = phi(g, anchor)?;
    let fp = phi(g, positive)?;
    let fn_ = phi(g, negative)?;
    let num = mae(g, fa, fp)?;
    let den = mae(g, fa, fn_)?;
    let den = g.add_scalar(den, CONTRAST_EPS)?;
    g.div(num, den)
}

/// Output-level distillation: L1 to the teacher prediction plus a
/// contrastive term anchored on the student, positive on the teacher,
/// negative on the replayed degraded input.
pub fn distillation_loss(
    g: &mut Graph,
    pred_new: Var,
    pred_old: Var,
    input_old: Var,
    beta2: f64,
    phi: &mut impl FnMut(&mut Graph, Var) -> Result<Var>,
) -> Result<Var> {
    let l1 = mae(g, pred_old, pred_new)?;
    if beta2 == 0.0 {
        return Ok(l1);
    }
    let c = contrast_loss(g, pred_new, pred_old, input_old, phi)?;
    let weighted = g.scale(c, beta2)?;
    g.add(l1, weighted)
}

// ─── projection head ────────────────────────────────────────────────────

/// Two 1x1 convolutions (C → C/2, relu, C/2 → C/4) followed by global
/// average pooling; compresses a feature map to a C/4 vector.
#[derive(Debug, Clone)]
pub struct ProjectorParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub width: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ProjectorParams {
    pub fn init(width: usize, rng: &mut CounterRng) -> Result<ProjectorParams> {
        if width < 4 || width % 4 != 0 {
            return Err(Error::invalid(
                "projector init",
                format!("feature width {width} must be a positive multiple of 4"),
            ));
        }
        let (half, quarter) = (width / 2, width / 4);
        Ok(ProjectorParams {
            w1: crate::backbone::he_uniform(vec![half, width, 1, 1], width, rng)?,
            b1: Tensor::param(vec![half], vec![0.0; half])?,
            w2: crate::backbone::he_uniform(vec![quarter, half, 1, 1], half, rng)?,
            b2: Tensor::param(vec![quarter], vec![0.0; quarter])?,
            width,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ProjectorVars {
        let mut put = |t: &Tensor| if trainable { g.leaf(t) } else { g.frozen_leaf(t) };
        ProjectorVars { w1: put(&self.w1), b1: put(&self.b1), w2: put(&self.w2), b2: put(&self.b2) }
    }

    pub fn absorb_grads(&mut self, g: &Graph, vars: &ProjectorVars) {
        for (t, v) in [
            (&mut self.w1, vars.w1),
            (&mut self.b1, vars.b1),
            (&mut self.w2, vars.w2),
            (&mut self.b2, vars.b2),
        ] {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad);
            }
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

pub fn project(g: &mut Graph, vars: &ProjectorVars, features: Var) -> Result<Var> {
    let h = g.conv2d(features, vars.w1, Padding::Same)?;
    let h = g.bias_add(h, vars.b1)?;
    let h = g.relu(h);
    let h = g.conv2d(h, vars.w2, Padding::Same)?;
    let h = g.bias_add(h, vars.b2)?;
    g.global_avg_pool(h)
}

/// L1 between projections of teacher and student features. The caller
/// binds `f_old` as a frozen leaf; the projector itself receives
/// gradient from both branches.
pub fn projection_loss(
    g: &mut Graph,
    f_old: Var,
    f_new: Var,
    projector: &ProjectorVars,
) -> Result<Var> {
    let h_old = project(g, projector, f_old)?;
    let h_new = project(g, projector, f_new)?;
    mae(g, h_old, h_new)
}

// ─── regularization, schedule, diversity ────────────────────────────────

/// Sum over adapters of the Frobenius norm of both projection kernels
/// (biases excluded). Callers pass only trainable adapters.
pub fn adapter_regularization(g: &mut Graph, adapters: &[AdapterVars]) -> Result<Var> {
    let mut acc = g.scalar(0.0);
    for a in adapters {
        let d = g.square_sum(a.down_w);
        let u = g.square_sum(a.up_w);
        let s = g.add(d, u)?;
        let norm = g.sqrt(s)?;
        acc = g.add(acc, norm)?;
    }
    Ok(acc)
}

/// Regularization weight ramp: 0.01 · min(step/(5·total), 0.1), so the
/// penalty fades in and saturates at 0.001.
pub fn dynamic_beta(step: usize, total_steps: usize) -> f64 {
    assert!(total_steps > 0, "dynamic_beta needs a positive step budget");
    0.01 * (step as f64 / (total_steps as f64 * 5.0)).min(0.1)
}

/// −0.01 · population std of the active experts' solo losses. One
/// expert has no spread, so the bonus is 0.
pub fn diversity_loss(active_losses: &[f64]) -> Result<f64> {
    if active_losses.is_empty() {
        return Err(Error::invalid("diversity_loss", "no active experts"));
    }
    if active_losses.len() == 1 {
        return Ok(0.0);
    }
    let k = active_losses.len() as f64;
    let mean = active_losses.iter().sum::<f64>() / k;
    let var = active_losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / k;
    Ok(-DIVERSITY_WEIGHT * var.sqrt())
}

/// Differentiable twin of [`diversity_loss`], mirroring its evaluation
/// order so both agree to rounding error.
pub fn diversity_loss_graph(g: &mut Graph, solo_losses: &[Var]) -> Result<Var> {
    let (&first, rest) = solo_losses
        .split_first()
        .ok_or_else(|| Error::invalid("diversity_loss", "no active experts"))?;
    if rest.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let k = solo_losses.len() as f64;
    let mut sum = first;
    for &l in rest {
        sum = g.add(sum, l)?;
    }
    let mean = g.scale(sum, 1.0 / k)?;
    let mut sq_sum = None;
    for &l in solo_losses {
        let d = g.sub(l, mean)?;
        let sq = g.mul(d, d)?;
        sq_sum = Some(match sq_sum {
            None => sq,
            Some(acc) => g.add(acc, sq)?,
        });
    }
    let var = g.scale(sq_sum.unwrap(), 1.0 / k)?;
    let std = g.sqrt(var)?;
    g.scale(std, -DIVERSITY_WEIGHT)
}

// ─── total ──────────────────────────────────────────────────────────────

/// Component handles for one training step; absent terms contribute
/// nothing to the total (first task has no teacher).
pub struct LossTerms {
    pub l_sw: Var,
    pub l_c: Option<Var>,
    pub l_kd: Option<Var>,
    pub l_p: Option<Var>,
    pub l_reg: Option<Var>,
    pub l_div: Option<Var>,
}

/// Evaluated loss components for logging. `l_kd` is the combined
/// distillation value (L1 plus its contrastive term).
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub l_sw: f64,
    pub l_c: f64,
    pub l_kd: f64,
    pub l_p: f64,
    pub l_reg: f64,
    pub l_div: f64,
    pub beta_dynamic: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn csv_header() -> &'static str {
        "step,task,l_sw,l_c,l_kd,l_p,l_reg,l_div,beta,total"
    }

    pub fn csv_row(&self, task: usize) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            task,
            self.l_sw,
            self.l_c,
            self.l_kd,
            self.l_p,
            self.l_reg,
            self.l_div,
            self.beta_dynamic,
            self.total
        )
    }
}

/// Recombine a breakdown's reported parts with the fixed weights, in
/// the same order the graph total is assembled.
pub fn recompose(b: &LossBreakdown, beta1: f64) -> f64 {
    ((((b.l_sw + beta1 * b.l_c) + ALPHA * b.l_kd) + LAMBDA * b.l_p) + b.beta_dynamic * b.l_reg)
        + b.l_div
}

/// total = (l_sw + β₁·l_c) + α·l_kd + λ·l_p + β·l_reg + l_div, with
/// absent terms skipped. Assembly order matches [`recompose`] so the
/// breakdown is exact, not approximate.
pub fn total_loss(
    g: &mut Graph,
    terms: &LossTerms,
    beta1: f64,
    beta_dynamic: f64,
    step: usize,
) -> Result<(Var, LossBreakdown)> {
    let mut acc = terms.l_sw;
    if let Some(l_c) = terms.l_c {
        let w = g.scale(l_c, beta1)?;
        acc = g.add(acc, w)?;
    }
    if let Some(l_kd) = terms.l_kd {
        let w = g.scale(l_kd, ALPHA)?;
        acc = g.add(acc, w)?;
    }
    if let Some(l_p) = terms.l_p {
        let w = g.scale(l_p, LAMBDA)?;
        acc = g.add(acc, w)?;
    }
    if let Some(l_reg) = terms.l_reg {
        let w = g.scale(l_reg, beta_dynamic)?;
        acc = g.add(acc, w)?;
    }
    if let Some(l_div) = terms.l_div {
        acc = g.add(acc, l_div)?;
    }
    let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.scalar_value(v));
    let breakdown = LossBreakdown {
        step,
        l_sw: g.scalar_value(terms.l_sw),
        l_c: value(g, terms.l_c),
        l_kd: value(g, terms.l_kd),
        l_p: value(g, terms.l_p),
        l_reg: value(g, terms.l_reg),
        l_div: value(g, terms.l_div),
        beta_dynamic,
        total: g.scalar_value(acc),
    };
    Ok((acc, breakdown))
}
