//! The continual-learning driver.
//!
//! Each episode presents one degradation family: the valve averages a
//! task vector over the first batches and decides new vs old; new tasks
//! get an active expert set (top-scored transfer experts frozen, fresh
//! identity adapters trainable), train against the multi-level
//! objective with replay distillation from the pre-task teacher
//! snapshot, then freeze, refresh the stored signature, and evaluate
//! every task seen so far into the forgetting matrix. Old tasks reuse
//! their owner experts for evaluation only. Everything — data, init,
//! expert allocation — is derived from the run seeds, so identical
//! configs produce byte-identical logs.

pub mod checkpoint;
pub mod sweep;

use crate::backbone::{self, BackboneParams};
use crate::config::{FreezePolicy, RunConfig, TrainBackbone};
use crate::data::{self, DegradationSpec, Family, SamplePair};
use crate::error::{Error, Result};
use crate::experts::{self, ActiveSet, AdapterVars, LibraryState};
use crate::graph::{Graph, Var};
use crate::losses::{self, LossBreakdown, LossTerms, ProjectorParams};
use crate::metrics::{self, ForgettingMatrix, ForgettingSummary, QualityEntry};
use crate::optim::{self, zero_grads};
use crate::rng::CounterRng;
use crate::tensor::Tensor;
use crate::valve::{self, SignatureRegistry, TaskVector, ThresholdState, ValveDecision, Verdict};
use serde::Serialize;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

/// Validation sample indices live far above any training index, so the
/// two streams can never collide.
pub const VAL_INDEX_BASE: u64 = 1 << 40;
const BACKBONE_STREAM: u64 = 0xB0;
const PROJECTOR_STREAM: u64 = 0x12;
const ALLOC_STREAM: u64 = 0xA1;

// ─── state ──────────────────────────────────────────────────────────────

/// One completed (registered) task. The replay buffer is filled at
/// completion and never touched again.
#[derive(Debug, Clone)]
pub struct TaskEpisode {
    pub task_id: usize,
    pub family: Family,
    /// Signature under the backbone as frozen at task completion.
    pub vector: TaskVector,
    /// Active set during training; evaluation re-activates exactly
    /// these experts.
    pub owner_experts: Vec<u32>,
    /// Fusion weights finalized over the replay buffer at freeze time;
    /// evaluation needs no ground truth.
    pub fusion_weights: Vec<f64>,
    pub replay: Vec<SamplePair>,
}

/// Everything a run accumulates; the checkpoint serializes this.
#[derive(Debug, Clone)]
pub struct ContinualState {
    pub config: RunConfig,
    pub backbone: BackboneParams,
    pub projector: ProjectorParams,
    pub library: LibraryState,
    pub threshold: ThresholdState,
    pub registry: SignatureRegistry,
    pub episodes: Vec<TaskEpisode>,
    pub alloc_rng: CounterRng,
}

impl ContinualState {
    pub fn new(config: &RunConfig) -> Result<ContinualState> {
        config.validate()?;
        let mut b_rng = CounterRng::keyed(config.seed, &[BACKBONE_STREAM]);
        let mut p_rng = CounterRng::keyed(config.seed, &[PROJECTOR_STREAM]);
        Ok(ContinualState {
            backbone: BackboneParams::init(config.feature_width, &mut b_rng)?,
            projector: ProjectorParams::init(config.feature_width, &mut p_rng)?,
            library: LibraryState::new(
                config.expert_capacity,
                config.k_transfer,
                config.k_new,
                config.tau,
                config.feature_width,
                config.adapter_reduction,
            ),
            threshold: ThresholdState::new(config.threshold_update_mode),
            registry: SignatureRegistry::new(config.signature_normalization),
            episodes: Vec::new(),
            alloc_rng: CounterRng::keyed(config.seed, &[ALLOC_STREAM]),
            config: config.clone(),
        })
    }
}

// ─── run products ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub family: Family,
    pub verdict: Verdict,
    /// Resolved task id (fresh for New, matched for Old).
    pub task_id: usize,
    pub similarity: f64,
    pub threshold_after: f64,
    /// Ground truth for valve scoring: was this family presented
    /// before?
    pub expected_old: bool,
    pub old_eval_psnr: Option<f64>,
    pub old_eval_ssim: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskSummary {
    pub task_id: usize,
    pub family: Family,
    /// PSNR of the degraded inputs themselves on the validation split —
    /// the bar any restoration must clear.
    pub baseline_psnr: f64,
    pub final_psnr: f64,
    pub final_ssim: f64,
    pub owner_experts: Vec<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub episodes: Vec<EpisodeLog>,
    pub tasks: Vec<TaskSummary>,
    pub matrix: ForgettingMatrix,
    pub forgetting: Option<ForgettingSummary>,
    pub library_experts: usize,
    pub frozen_experts: usize,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub summary: RunSummary,
    pub state: ContinualState,
}

// ─── helpers ────────────────────────────────────────────────────────────

pub fn make_spec(config: &RunConfig, family: Family) -> DegradationSpec {
    let mut spec = DegradationSpec::new(family, config.data_seed());
    if config.allow_haze_rain && family == Family::Rain {
        spec.compose_haze_rain = true;
    }
    spec
}

fn train_batch(config: &RunConfig, spec: &DegradationSpec, step: usize) -> Result<(Tensor, Tensor)> {
    let pairs: Vec<SamplePair> = (0..config.batch_size)
        .map(|i| data::sample_pair(spec, (step * config.batch_size + i) as u64, config.image_size))
        .collect();
    data::batch(&pairs)
}

fn val_pairs(config: &RunConfig, spec: &DegradationSpec) -> Vec<SamplePair> {
    (0..config.val_samples as u64)
        .map(|i| data::sample_pair(spec, VAL_INDEX_BASE + i, config.image_size))
        .collect()
}

/// Mean task vector over the first `task_vector_batches` training
/// batches, under the current backbone.
fn task_vector_for(
    config: &RunConfig,
    backbone: &BackboneParams,
    spec: &DegradationSpec,
) -> Result<TaskVector> {
    let mut vectors = Vec::with_capacity(config.task_vector_batches);
    for b in 0..config.task_vector_batches {
        let (x, _) = train_batch(config, spec, b)?;
        let features = backbone.encode_tensor(&x)?;
        vectors.push(valve::extract_task_vector(&features)?);
    }
    valve::mean_task_vector(&vectors)
}

/// Frozen forward of one task's validation batch through its owner
/// experts with its stored fusion weights. Returns (restored, clean),
/// restored clamped to [0,1].
pub fn restore_val_batch(
    config: &RunConfig,
    backbone: &BackboneParams,
    library: &LibraryState,
    episodes: &[TaskEpisode],
    task_id: usize,
) -> Result<(Tensor, Tensor)> {
    let ep = episodes
        .get(task_id)
        .ok_or_else(|| Error::invalid("evaluate", format!("unknown task {task_id}")))?;
    let spec = make_spec(config, ep.family);
    let pairs = val_pairs(config, &spec);
    let (x_t, y_t) = data::batch(&pairs)?;
    let mut g = Graph::new();
    let x = g.frozen_leaf(&x_t);
    let vars = backbone.bind(&mut g, false);
    let f = backbone::encode(&mut g, &vars, x)?;
    let z = if ep.owner_experts.is_empty() {
        f
    } else {
        let mut parts = Vec::with_capacity(ep.owner_experts.len());
        for (id, w) in ep.owner_experts.iter().zip(&ep.fusion_weights) {
            let av = library.expert(*id)?.params.bind(&mut g, false);
            let e = experts::adapter_forward(&mut g, &av, f)?;
            parts.push((e, *w));
        }
        experts::fuse(&mut g, &parts)?
    };
    let y = backbone::decode(&mut g, &vars, z, x)?;
    Ok((backbone::clamp01(&g.to_tensor(y)), y_t))
}

/// Per-sample mean (PSNR, SSIM) on a task's validation split.
pub fn evaluate_task(
    config: &RunConfig,
    backbone: &BackboneParams,
    library: &LibraryState,
    episodes: &[TaskEpisode],
    task_id: usize,
) -> Result<(f64, f64)> {
    let (restored, clean) = restore_val_batch(config, backbone, library, episodes, task_id)?;
    let n = config.val_samples;
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for i in 0..n {
        let r = restored.unstack(i)?;
        let c = clean.unstack(i)?;
        psnr_sum += metrics::psnr(&r, &c, 1.0)?;
        ssim_sum += metrics::ssim(&r, &c)?;
    }
    Ok((psnr_sum / n as f64, ssim_sum / n as f64))
}

/// PSNR of the degraded inputs against clean on the validation split.
fn baseline_psnr(config: &RunConfig, spec: &DegradationSpec) -> Result<f64> {
    let pairs = val_pairs(config, spec);
    let mut sum = 0.0;
    for p in &pairs {
        sum += metrics::psnr(&p.degraded, &p.clean, 1.0)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Digest of task 0's restored validation batch; the checkpoint stores
/// it and `verify` replays it.
pub fn probe_digest(
    config: &RunConfig,
    backbone: &BackboneParams,
    library: &LibraryState,
    episodes: &[TaskEpisode],
) -> Result<String> {
    let (restored, _) = restore_val_batch(config, backbone, library, episodes, 0)?;
    Ok(restored.digest())
}

/// Fusion weights finalized at task completion: solo losses over the
/// full replay-sized batch under the now-frozen state.
fn compute_task_weights(
    config: &RunConfig,
    backbone: &BackboneParams,
    library: &LibraryState,
    spec: &DegradationSpec,
    active: &ActiveSet,
) -> Result<Vec<f64>> {
    let ids = active.all();
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let pairs: Vec<SamplePair> = (0..config.replay_per_task as u64)
        .map(|i| data::sample_pair(spec, i, config.image_size))
        .collect();
    let (x_t, y_t) = data::batch(&pairs)?;
    let mut g = Graph::new();
    let x = g.frozen_leaf(&x_t);
    let target = g.frozen_leaf(&y_t);
    let vars = backbone.bind(&mut g, false);
    let f = backbone::encode(&mut g, &vars, x)?;
    let mut solo = Vec::with_capacity(ids.len());
    for id in &ids {
        let av = library.expert(*id)?.params.bind(&mut g, false);
        let e = experts::adapter_forward(&mut g, &av, f)?;
        let y = backbone::decode(&mut g, &vars, e, x)?;
        let l = losses::mae(&mut g, y, target)?;
        solo.push(g.scalar_value(l));
    }
    experts::fusion_weights(&solo, config.tau)
}

/// Score-only EMA refresh when an old task is re-presented
/// (`ema_refresh_on_reuse`): one update per owner from its solo loss on
/// the validation batch. Parameters are untouched.
fn refresh_reuse_scores(
    config: &RunConfig,
    backbone: &BackboneParams,
    library: &mut LibraryState,
    episodes: &[TaskEpisode],
    task_id: usize,
) -> Result<()> {
    let ep = &episodes[task_id];
    if ep.owner_experts.is_empty() {
        return Ok(());
    }
    let spec = make_spec(config, ep.family);
    let pairs = val_pairs(config, &spec);
    let (x_t, y_t) = data::batch(&pairs)?;
    let mut g = Graph::new();
    let x = g.frozen_leaf(&x_t);
    let target = g.frozen_leaf(&y_t);
    let vars = backbone.bind(&mut g, false);
    let f = backbone::encode(&mut g, &vars, x)?;
    let mut solo = Vec::with_capacity(ep.owner_experts.len());
    for id in &ep.owner_experts {
        let av = library.expert(*id)?.params.bind(&mut g, false);
        let e = experts::adapter_forward(&mut g, &av, f)?;
        let y = backbone::decode(&mut g, &vars, e, x)?;
        let l = losses::mae(&mut g, y, target)?;
        solo.push(g.scalar_value(l));
    }
    for (id, l) in ep.owner_experts.iter().zip(solo) {
        library.expert_mut(*id)?.ema_update(l)?;
    }
    Ok(())
}

// ─── training ───────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn train_task(
    config: &RunConfig,
    backbone: &mut BackboneParams,
    projector: &mut ProjectorParams,
    library: &mut LibraryState,
    episodes: &[TaskEpisode],
    spec: &DegradationSpec,
    task_id: usize,
    active: &ActiveSet,
    teacher: Option<&(BackboneParams, LibraryState)>,
    losses_csv: &mut impl Write,
) -> Result<()> {
    let backbone_trainable = match config.train_backbone {
        TrainBackbone::Always => true,
        TrainBackbone::FirstTaskOnly => task_id == 0,
    };
    let distill_used = teacher.is_some() && config.loss_distillation;
    let projector_used = teacher.is_some() && config.loss_projection;
    let trainable_ids: Vec<u32> = match config.freeze_policy {
        FreezePolicy::AllTrainable => active.all(),
        FreezePolicy::Blending => active.fresh.clone(),
        FreezePolicy::AllFrozen => Vec::new(),
    };
    let active_ids = active.all();
    let completed = episodes.len();
    let mut opt = optim::OptimizerState::adam(config.base_lr, config.steps_per_task)?;

    for step in 0..config.steps_per_task {
        let (x_t, y_t) = train_batch(config, spec, step)?;
        let mut g = Graph::new();
        let x = g.frozen_leaf(&x_t);
        let target = g.frozen_leaf(&y_t);
        let bb_vars = backbone.bind(&mut g, backbone_trainable);
        // The feature extractor for contrastive terms is the current
        // encoder with gradients blocked into its parameters.
        let phi_vars = backbone.bind(&mut g, false);
        let mut phi =
            move |g: &mut Graph, v: Var| -> Result<Var> { backbone::encode(g, &phi_vars, v) };
        let proj_vars = if projector_used { Some(projector.bind(&mut g, true)) } else { None };

        let f = backbone::encode(&mut g, &bb_vars, x)?;
        let mut bound: Vec<(u32, AdapterVars)> = Vec::with_capacity(active_ids.len());
        for id in &active_ids {
            let vars = library.expert(*id)?.params.bind(&mut g, trainable_ids.contains(id));
            bound.push((*id, vars));
        }
        let mut expert_outs = Vec::with_capacity(bound.len());
        let mut solo_vars = Vec::with_capacity(bound.len());
        let mut solo_vals = Vec::with_capacity(bound.len());
        for (_, vars) in &bound {
            let e = experts::adapter_forward(&mut g, vars, f)?;
            let y_solo = backbone::decode(&mut g, &bb_vars, e, x)?;
            let l = losses::mae(&mut g, y_solo, target)?;
            solo_vals.push(g.scalar_value(l));
            expert_outs.push(e);
            solo_vars.push(l);
        }
        let weights = if bound.is_empty() {
            Vec::new()
        } else {
            experts::fusion_weights(&solo_vals, config.tau)?
        };
        let z = if bound.is_empty() {
            f
        } else {
            let parts: Vec<(Var, f64)> =
                expert_outs.iter().copied().zip(weights.iter().copied()).collect();
            experts::fuse(&mut g, &parts)?
        };
        let y_pred = backbone::decode(&mut g, &bb_vars, z, x)?;

        let l_sw = losses::reconstruction_loss(&mut g, y_pred, target)?;
        let l_c = if config.loss_contrast {
            Some(losses::contrast_loss(&mut g, y_pred, target, x, &mut phi)?)
        } else {
            None
        };

        let (mut l_kd, mut l_p) = (None, None);
        if let Some((t_backbone, t_library)) = teacher {
            if distill_used || projector_used {
                let ep = &episodes[step % completed];
                let base = (step / completed) * config.replay_batch;
                let replay_refs: Vec<&Tensor> = (0..config.replay_batch)
                    .map(|j| &ep.replay[(base + j) % ep.replay.len()].degraded)
                    .collect();
                let x_old_t = Tensor::stack(&replay_refs)?;
                let x_old = g.frozen_leaf(&x_old_t);
                let t_vars = t_backbone.bind(&mut g, false);
                let f_t = backbone::encode(&mut g, &t_vars, x_old)?;
                let f_s = backbone::encode(&mut g, &bb_vars, x_old)?;
                if distill_used {
                    let z_t = if ep.owner_experts.is_empty() {
                        f_t
                    } else {
                        let mut parts = Vec::with_capacity(ep.owner_experts.len());
                        for (id, w) in ep.owner_experts.iter().zip(&ep.fusion_weights) {
                            let av = t_library.expert(*id)?.params.bind(&mut g, false);
                            let e = experts::adapter_forward(&mut g, &av, f_t)?;
                            parts.push((e, *w));
                        }
                        experts::fuse(&mut g, &parts)?
                    };
                    let pred_old = backbone::decode(&mut g, &t_vars, z_t, x_old)?;
                    // The student mirrors deployment: old data routes to
                    // the old task's owner experts under their stored
                    // weights, never to the fresh experts of the task
                    // being trained. Owners that happen to be active for
                    // the current task reuse their existing binding so
                    // their replay gradients land in the same vars.
                    let z_s = if ep.owner_experts.is_empty() {
                        f_s
                    } else {
                        let mut parts = Vec::with_capacity(ep.owner_experts.len());
                        for (id, w) in ep.owner_experts.iter().zip(&ep.fusion_weights) {
                            let av = match bound.iter().find(|(bid, _)| bid == id) {
                                Some((_, vars)) => *vars,
                                None => library
                                    .expert(*id)?
                                    .params
                                    .bind(&mut g, trainable_ids.contains(id)),
                            };
                            let e = experts::adapter_forward(&mut g, &av, f_s)?;
                            parts.push((e, *w));
                        }
                        experts::fuse(&mut g, &parts)?
                    };
                    let y_new = backbone::decode(&mut g, &bb_vars, z_s, x_old)?;
                    l_kd = Some(losses::distillation_loss(
                        &mut g,
                        y_new,
                        pred_old,
                        x_old,
                        config.beta2,
                        &mut phi,
                    )?);
                }
                if let Some(pv) = &proj_vars {
                    l_p = Some(losses::projection_loss(&mut g, f_t, f_s, pv)?);
                }
            }
        }

        let l_reg = if config.loss_regularization && config.library_enabled {
            let train_vars: Vec<AdapterVars> = bound
                .iter()
                .filter(|(id, _)| trainable_ids.contains(id))
                .map(|(_, v)| *v)
                .collect();
            Some(losses::adapter_regularization(&mut g, &train_vars)?)
        } else {
            None
        };
        let l_div = if config.loss_diversity && !solo_vars.is_empty() {
            Some(losses::diversity_loss_graph(&mut g, &solo_vars)?)
        } else {
            None
        };

        let beta = losses::dynamic_beta(step, config.steps_per_task);
        let terms = LossTerms { l_sw, l_c, l_kd, l_p, l_reg, l_div };
        let (total, breakdown) = losses::total_loss(&mut g, &terms, config.beta1, beta, step)?;
        writeln!(losses_csv, "{}", breakdown.csv_row(task_id))?;
        g.backward(total)?;

        if backbone_trainable {
            backbone.absorb_grads(&g, &bb_vars);
        }
        if let Some(pv) = &proj_vars {
            projector.absorb_grads(&g, pv);
        }
        for (id, vars) in &bound {
            if trainable_ids.contains(id) {
                library.expert_mut(*id)?.params.absorb_grads(&g, vars);
            }
        }
        {
            let mut params: Vec<&mut Tensor> = Vec::new();
            if backbone_trainable {
                params.extend(backbone.tensors_mut());
            }
            if proj_vars.is_some() {
                params.extend(projector.tensors_mut());
            }
            let mut adapters = library.adapters_mut(&trainable_ids);
            for a in &mut adapters {
                params.extend(a.tensors_mut());
            }
            opt.adam_step(&mut params)?;
            zero_grads(&mut params);
        }
        for ((id, _), l) in bound.iter().zip(&solo_vals) {
            let rec = library.expert_mut(*id)?;
            if !rec.frozen || config.update_frozen_scores {
                rec.ema_update(*l)?;
            } else {
                rec.mark_active();
            }
        }
    }
    Ok(())
}

// ─── episodes ───────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn run_episode(
    state: &mut ContinualState,
    family: Family,
    episode_idx: usize,
    seen: &[Family],
    matrix: &mut ForgettingMatrix,
    baselines: &mut Vec<f64>,
    losses_csv: &mut impl Write,
    eval_csv: &mut impl Write,
) -> Result<EpisodeLog> {
    let config = state.config.clone();
    let spec = make_spec(&config, family);
    let v0 = task_vector_for(&config, &state.backbone, &spec)?;
    let decision = if config.valve_enabled {
        let report =
            if state.registry.is_empty() { None } else { state.registry.best_match(&v0) };
        valve::classify_task(report.as_ref(), &mut state.threshold, state.registry.len())?
    } else {
        ValveDecision {
            verdict: Verdict::New,
            similarity: 1.0,
            threshold_after: state.threshold.current(),
        }
    };
    let expected_old = seen.contains(&family);

    match decision.verdict {
        Verdict::Old { task } => {
            if config.library_enabled {
                state.library.handle_task(&Verdict::Old { task }, task, &mut state.alloc_rng)?;
            }
            let (psnr, ssim) = evaluate_task(
                &config,
                &state.backbone,
                &state.library,
                &state.episodes,
                task,
            )?;
            if config.ema_refresh_on_reuse && config.library_enabled {
                refresh_reuse_scores(
                    &config,
                    &state.backbone,
                    &mut state.library,
                    &state.episodes,
                    task,
                )?;
            }
            Ok(EpisodeLog {
                episode: episode_idx,
                family,
                verdict: decision.verdict,
                task_id: task,
                similarity: decision.similarity,
                threshold_after: decision.threshold_after,
                expected_old,
                old_eval_psnr: Some(psnr),
                old_eval_ssim: Some(ssim),
            })
        }
        Verdict::New => {
            let task_id = state.episodes.len();
            let active = if config.library_enabled {
                state.library.handle_task(&Verdict::New, task_id, &mut state.alloc_rng)?
            } else {
                ActiveSet { transfer: Vec::new(), fresh: Vec::new() }
            };
            let teacher = if state.episodes.is_empty() {
                None
            } else {
                Some((state.backbone.clone(), state.library.clone()))
            };
            train_task(
                &config,
                &mut state.backbone,
                &mut state.projector,
                &mut state.library,
                &state.episodes,
                &spec,
                task_id,
                &active,
                teacher.as_ref(),
                losses_csv,
            )?;

            let fusion_weights =
                compute_task_weights(&config, &state.backbone, &state.library, &spec, &active)?;
            if config.library_enabled && config.freeze_policy != FreezePolicy::AllTrainable {
                state.library.freeze_task_experts(task_id)?;
            }
            let v1 = task_vector_for(&config, &state.backbone, &spec)?;
            if config.valve_enabled {
                let registered = state.registry.register(v1.clone());
                debug_assert_eq!(registered, task_id);
            }
            let replay: Vec<SamplePair> = (0..config.replay_per_task as u64)
                .map(|i| data::sample_pair(&spec, i, config.image_size))
                .collect();
            state.episodes.push(TaskEpisode {
                task_id,
                family,
                vector: v1,
                owner_experts: active.all(),
                fusion_weights,
                replay,
            });
            baselines.push(baseline_psnr(&config, &spec)?);

            for j in 0..=task_id {
                let (p, s) = evaluate_task(
                    &config,
                    &state.backbone,
                    &state.library,
                    &state.episodes,
                    j,
                )?;
                matrix.record(
                    task_id,
                    j,
                    QualityEntry { psnr: p, ssim: s, n_samples: config.val_samples },
                )?;
                writeln!(eval_csv, "{},{},{},{},{}", task_id, j, p, s, config.val_samples)?;
            }
            Ok(EpisodeLog {
                episode: episode_idx,
                family,
                verdict: Verdict::New,
                task_id,
                similarity: decision.similarity,
                threshold_after: decision.threshold_after,
                expected_old,
                old_eval_psnr: None,
                old_eval_ssim: None,
            })
        }
    }
}

/// Execute the configured task stream end to end and write all run
/// artifacts (config echo, loss/eval CSVs, summary, checkpoint) to the
/// config's output directory.
pub fn run_continual(config: &RunConfig) -> Result<RunOutcome> {
    let out_dir = config
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("out_dir must be set (config key or --out)".into()))?;
    std::fs::create_dir_all(&out_dir)?;
    let mut state = ContinualState::new(config)?;
    std::fs::write(out_dir.join("config.json"), config.to_json_pretty()? + "\n")?;

    let mut losses_csv = BufWriter::new(File::create(out_dir.join("losses.csv"))?);
    writeln!(losses_csv, "{}", LossBreakdown::csv_header())?;
    let mut eval_csv = BufWriter::new(File::create(out_dir.join("eval.csv"))?);
    writeln!(eval_csv, "after_task,eval_task,psnr,ssim,n_samples")?;

    let mut matrix = ForgettingMatrix::new();
    let mut episode_logs = Vec::new();
    let mut baselines = Vec::new();
    let mut seen: Vec<Family> = Vec::new();
    for (i, &family) in config.task_sequence.iter().enumerate() {
        let log = run_episode(
            &mut state,
            family,
            i,
            &seen,
            &mut matrix,
            &mut baselines,
            &mut losses_csv,
            &mut eval_csv,
        )?;
        if !seen.contains(&family) {
            seen.push(family);
        }
        episode_logs.push(log);
    }
    state.library.verify_frozen_digests()?;
    losses_csv.flush()?;
    eval_csv.flush()?;

    let mut tasks = Vec::new();
    for ep in &state.episodes {
        let diag = matrix
            .entry(ep.task_id, ep.task_id)
            .ok_or_else(|| Error::invalid("summary", "missing diagonal entry"))?;
        tasks.push(TaskSummary {
            task_id: ep.task_id,
            family: ep.family,
            baseline_psnr: baselines[ep.task_id],
            final_psnr: diag.psnr,
            final_ssim: diag.ssim,
            owner_experts: ep.owner_experts.clone(),
        });
    }
    let forgetting = if state.episodes.len() >= 2 {
        Some(metrics::forgetting_report(&matrix)?)
    } else {
        None
    };
    let summary = RunSummary {
        episodes: episode_logs,
        tasks,
        matrix,
        forgetting,
        library_experts: state.library.len(),
        frozen_experts: state.library.experts().iter().filter(|e| e.frozen).count(),
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;

    let probe = probe_digest(config, &state.backbone, &state.library, &state.episodes)?;
    checkpoint::save(&state, &probe, &out_dir.join("checkpoint.dlck"))?;
    Ok(RunOutcome { out_dir, summary, state })
}

// ─────────────────────────── tests ───────────────────────────
