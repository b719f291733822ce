//! Dynamic library of adapter experts.
//!
//! Each expert is a residual bottleneck adapter (instance norm, 1x1 down
//! projection, relu, 1x1 up projection, skip connection) with the up
//! projection zero-initialized so a freshly allocated expert is an exact
//! identity — adding one never perturbs the existing function. The
//! library scores experts by performance over usage, activates a Top-K
//! subset plus fresh experts for new tasks, reuses the owning experts
//! for old tasks, and freezes trained experts with a byte digest so
//! later training can be proven not to have touched them.

use crate::error::{Error, Result};
use crate::graph::{Graph, Padding, Var};
use crate::rng::CounterRng;
use crate::tensor::{sha256_hex, Tensor};
use crate::valve::Verdict;
use std::collections::BTreeSet;

pub const DEFAULT_CAPACITY: usize = 30;
pub const DEFAULT_K_TRANSFER: usize = 3;
pub const DEFAULT_K_NEW: usize = 1;
/// Fusion temperature. Sharp on purpose: once one expert clearly beats
/// its peers on a task, the blend should be nearly a selection — a
/// frozen expert trained on a different degradation would otherwise
/// keep polluting the fused output with the wrong correction.
pub const DEFAULT_TAU: f64 = 0.02;
pub const DEFAULT_REDUCTION: usize = 2;
/// Shared epsilon of the score and EMA denominators.
pub const SCORE_EPS: f64 = 1e-6;
const NORM_EPS: f64 = 1e-5;

// ─── adapter parameters ─────────────────────────────────────────────────

/// Bottleneck adapter: x + up(relu(down(instance_norm(x)))). The down
/// projection is a 3x3 convolution so an expert can form new local
/// structure (streak and flake geometry) out of frozen backbone
/// features; the up projection stays 1x1. Hidden width is C/r.
#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub down_w: Tensor,
    pub down_b: Tensor,
    pub up_w: Tensor,
    pub up_b: Tensor,
    pub reduction: usize,
}

/// Graph handles for one bound adapter.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub down_w: Var,
    pub down_b: Var,
    pub up_w: Var,
    pub up_b: Var,
}

impl AdapterParams {
    /// He-uniform down projection, zero up projection and biases: the
    /// adapter starts as an exact identity.
    pub fn init(channels: usize, reduction: usize, rng: &mut CounterRng) -> Result<AdapterParams> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::invalid(
                "adapter init",
                format!("channels {channels} not divisible by reduction {reduction}"),
            ));
        }
        let hidden = channels / reduction;
        let bound = (6.0 / (channels * 9) as f64).sqrt();
        let down: Vec<f64> =
            (0..hidden * channels * 9).map(|_| rng.range(-bound, bound)).collect();
        Ok(AdapterParams {
            down_w: Tensor::param(vec![hidden, channels, 3, 3], down)?,
            down_b: Tensor::param(vec![hidden], vec![0.0; hidden])?,
            up_w: Tensor::param(vec![channels, hidden, 1, 1], vec![0.0; channels * hidden])?,
            up_b: Tensor::param(vec![channels], vec![0.0; channels])?,
            reduction,
        })
    }

    /// Insert the parameters into a graph; `trainable: false` binds them
    /// as constants, which is how frozen experts are guaranteed
    /// untouched.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AdapterVars {
        let mut put = |t: &Tensor| if trainable { g.leaf(t) } else { g.frozen_leaf(t) };
        AdapterVars {
            down_w: put(&self.down_w),
            down_b: put(&self.down_b),
            up_w: put(&self.up_w),
            up_b: put(&self.up_b),
        }
    }

    pub fn absorb_grads(&mut self, g: &Graph, vars: &AdapterVars) {
        for (t, v) in [
            (&mut self.down_w, vars.down_w),
            (&mut self.down_b, vars.down_b),
            (&mut self.up_w, vars.up_w),
            (&mut self.up_b, vars.up_b),
        ] {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad);
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.down_w, &mut self.down_b, &mut self.up_w, &mut self.up_b]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.down_w, &self.down_b, &self.up_w, &self.up_b]
    }

    /// SHA-256 over the canonical encodings of all four tensors.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        for t in self.tensors() {
            bytes.extend_from_slice(&t.encode_dlt());
        }
        sha256_hex(&bytes)
    }
}

pub fn adapter_forward(g: &mut Graph, vars: &AdapterVars, x: Var) -> Result<Var> {
    let n = g.instance_norm(x, NORM_EPS)?;
    let d = g.conv2d(n, vars.down_w, Padding::Same)?;
    let d = g.bias_add(d, vars.down_b)?;
    let r = g.relu(d);
    let u = g.conv2d(r, vars.up_w, Padding::Same)?;
    let u = g.bias_add(u, vars.up_b)?;
    g.add(x, u)
}

// ─── expert records ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ExpertRecord {
    pub id: u32,
    pub params: AdapterParams,
    /// Performance estimate P, moved toward 1/(loss + 1e-6) by EMA.
    pub performance: f64,
    /// Activation count C.
    pub usage_count: u64,
    pub frozen: bool,
    pub owner_tasks: BTreeSet<usize>,
    /// Parameter digest captured at freeze time.
    pub frozen_digest: Option<String>,
}

impl ExpertRecord {
    /// P <- 0.9 P + 0.1 / (L + 1e-6), plus one activation tick.
    pub fn ema_update(&mut self, task_loss: f64) -> Result<()> {
        if !(task_loss.is_finite() && task_loss > 0.0) {
            return Err(Error::invalid("ema_update", format!("non-positive loss {task_loss}")));
        }
        self.performance = 0.9 * self.performance + 0.1 / (task_loss + SCORE_EPS);
        self.usage_count += 1;
        Ok(())
    }

    /// Activation bookkeeping without a score update (old-task reuse
    /// with score refresh disabled).
    pub fn mark_active(&mut self) {
        self.usage_count += 1;
    }
}

/// Performance–usage joint score: P / (C + 1e-6).
pub fn expert_score(record: &ExpertRecord) -> f64 {
    record.performance / (record.usage_count as f64 + SCORE_EPS)
}

// ─── fusion ─────────────────────────────────────────────────────────────

/// Softmax of -loss/tau with max-subtraction; lower loss, higher weight.
pub fn fusion_weights(active_losses: &[f64], tau: f64) -> Result<Vec<f64>> {
    if active_losses.is_empty() {
        return Err(Error::invalid("fusion_weights", "empty loss list"));
    }
    if !active_losses.iter().all(|l| l.is_finite()) {
        return Err(Error::NonFinite("fusion_weights"));
    }
    let logits: Vec<f64> = active_losses.iter().map(|l| -l / tau).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// y = sum_i w_i * out_i over same-shaped expert outputs. Weights are
/// plain constants: gradient flows into the expert outputs only.
pub fn fuse(g: &mut Graph, parts: &[(Var, f64)]) -> Result<Var> {
    let (&(first, w0), rest) = parts
        .split_first()
        .ok_or_else(|| Error::invalid("fuse", "no expert outputs"))?;
    debug_assert!(
        (parts.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-9,
        "fusion weights must sum to 1"
    );
    let shape = g.shape(first).to_vec();
    let mut acc = g.scale(first, w0)?;
    for &(v, w) in rest {
        if g.shape(v) != shape {
            return Err(Error::shape(
                "fuse",
                format!("{:?} vs {:?}", g.shape(v), shape),
            ));
        }
        let term = g.scale(v, w)?;
        acc = g.add(acc, term)?;
    }
    Ok(acc)
}

// ─── library ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ActiveSet {
    /// Experts reused for knowledge transfer (frozen under the default
    /// policy).
    pub transfer: Vec<u32>,
    /// Freshly allocated, trainable experts.
    pub fresh: Vec<u32>,
}

impl ActiveSet {
    pub fn all(&self) -> Vec<u32> {
        let mut ids = self.transfer.clone();
        ids.extend_from_slice(&self.fresh);
        ids
    }
}

#[derive(Debug, Clone)]
pub struct LibraryState {
    experts: Vec<ExpertRecord>,
    capacity: usize,
    k_transfer: usize,
    k_new: usize,
    pub tau: f64,
    channels: usize,
    reduction: usize,
    next_id: u32,
}

impl LibraryState {
    pub fn new(
        capacity: usize,
        k_transfer: usize,
        k_new: usize,
        tau: f64,
        channels: usize,
        reduction: usize,
    ) -> LibraryState {
        LibraryState {
            experts: Vec::new(),
            capacity,
            k_transfer,
            k_new,
            tau,
            channels,
            reduction,
            next_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn experts(&self) -> &[ExpertRecord] {
        &self.experts
    }

    pub fn expert(&self, id: u32) -> Result<&ExpertRecord> {
        self.experts
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::invalid("expert lookup", format!("no expert {id}")))
    }

    pub fn expert_mut(&mut self, id: u32) -> Result<&mut ExpertRecord> {
        self.experts
            .iter_mut()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::invalid("expert lookup", format!("no expert {id}")))
    }

    /// Mutable access to the named experts' adapters, in storage
    /// (ascending-id) order; the optimizer relies on this order being
    /// stable across steps.
    pub fn adapters_mut(&mut self, ids: &[u32]) -> Vec<&mut AdapterParams> {
        self.experts
            .iter_mut()
            .filter(|e| ids.contains(&e.id))
            .map(|e| &mut e.params)
            .collect()
    }

    /// Restore path for checkpoints: append a fully formed record.
    /// Ids must arrive strictly increasing.
    pub fn restore_expert(&mut self, record: ExpertRecord) -> Result<()> {
        if self.experts.len() >= self.capacity {
            return Err(Error::CapacityExhausted { live: self.experts.len(), capacity: self.capacity });
        }
        if record.id < self.next_id {
            return Err(Error::invalid("restore_expert", format!("id {} reused", record.id)));
        }
        self.next_id = record.id + 1;
        self.experts.push(record);
        Ok(())
    }

    /// Ids of the k highest-scoring experts, descending score, ties to
    /// the lower id.
    pub fn select_topk(&self, k: usize) -> Result<Vec<u32>> {
        if k == 0 || k > self.experts.len() {
            return Err(Error::invalid(
                "select_topk",
                format!("k {} out of range for {} experts", k, self.experts.len()),
            ));
        }
        let mut scored: Vec<(f64, u32)> =
            self.experts.iter().map(|e| (expert_score(e), e.id)).collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        Ok(scored.into_iter().take(k).map(|(_, id)| id).collect())
    }

    /// Resolve a valve decision into this task's active experts.
    ///
    /// New: Top-k_transfer existing experts for knowledge transfer plus
    /// k_new freshly allocated identity adapters. Old: the matched
    /// task's owner experts, no allocation. All active experts record
    /// the task in `owner_tasks`, so re-presenting the task later
    /// re-activates exactly this set.
    pub fn handle_task(
        &mut self,
        verdict: &Verdict,
        task_id: usize,
        rng: &mut CounterRng,
    ) -> Result<ActiveSet> {
        match verdict {
            Verdict::Old { task } => {
                let ids: Vec<u32> = self
                    .experts
                    .iter()
                    .filter(|e| e.owner_tasks.contains(task))
                    .map(|e| e.id)
                    .collect();
                if ids.is_empty() {
                    return Err(Error::invalid(
                        "handle_task",
                        format!("old task {task} owns no experts"),
                    ));
                }
                for &id in &ids {
                    self.expert_mut(id)?.mark_active();
                }
                Ok(ActiveSet { transfer: ids, fresh: Vec::new() })
            }
            Verdict::New => {
                if self.experts.len() + self.k_new > self.capacity {
                    return Err(Error::CapacityExhausted {
                        live: self.experts.len(),
                        capacity: self.capacity,
                    });
                }
                let transfer = if self.experts.is_empty() {
                    Vec::new()
                } else {
                    self.select_topk(self.k_transfer.min(self.experts.len()))?
                };
                let mut fresh = Vec::with_capacity(self.k_new);
                for _ in 0..self.k_new {
                    let id = self.next_id;
                    self.next_id += 1;
                    let mut expert_rng = CounterRng::keyed(rng.next_u64(), &[id as u64]);
                    self.experts.push(ExpertRecord {
                        id,
                        params: AdapterParams::init(
                            self.channels,
                            self.reduction,
                            &mut expert_rng,
                        )?,
                        performance: 0.0,
                        usage_count: 0,
                        frozen: false,
                        owner_tasks: BTreeSet::new(),
                        frozen_digest: None,
                    });
                    fresh.push(id);
                }
                for &id in transfer.iter().chain(&fresh) {
                    self.expert_mut(id)?.owner_tasks.insert(task_id);
                }
                Ok(ActiveSet { transfer, fresh })
            }
        }
    }

    /// Freeze every expert owned by `task_id` and capture its parameter
    /// digest. Idempotent: an already-frozen expert keeps its digest.
    pub fn freeze_task_experts(&mut self, task_id: usize) -> Result<()> {
        let mut touched = false;
        for e in &mut self.experts {
            if e.owner_tasks.contains(&task_id) {
                touched = true;
                if !e.frozen || e.frozen_digest.is_none() {
                    e.frozen = true;
                    e.frozen_digest = Some(e.params.digest());
                }
            }
        }
        if !touched {
            return Err(Error::invalid("freeze_task_experts", format!("unknown task {task_id}")));
        }
        Ok(())
    }

    /// Recompute every frozen expert's digest and compare with the one
    /// captured at freeze time.
    pub fn verify_frozen_digests(&self) -> Result<()> {
        for e in &self.experts {
            if let (true, Some(expected)) = (e.frozen, &e.frozen_digest) {
                let now = e.params.digest();
                if &now != expected {
                    return Err(Error::DigestMismatch(format!(
                        "expert {} params changed after freeze",
                        e.id
                    )));
                }
            }
        }
        Ok(())
    }
}
