//! Single-file run checkpoint (`.dlck`).
//!
//! Layout: `b"DLCK"`, u32 LE version, u64 LE metadata length, JSON
//! metadata, then the model and replay tensors as concatenated `.dlt`
//! blobs in a fixed implicit order — backbone (6), projector (4), each
//! expert in library storage order (4: down_w, down_b, up_w, up_b),
//! then each episode's replay pairs (degraded, clean). The metadata
//! carries everything else: config, valve state, expert records minus
//! weights, episode records minus images, the allocation RNG, and an
//! eval-probe digest that `verify` replays to prove the whole pipeline
//! reproduces bit-identically after a round trip.

use crate::backbone::BackboneParams;
use crate::data::{Family, SamplePair};
use crate::error::{Error, Result};
use crate::experts::{AdapterParams, ExpertRecord, LibraryState};
use crate::harness::{self, ContinualState, TaskEpisode};
use crate::losses::ProjectorParams;
use crate::rng::CounterRng;
use crate::tensor::Tensor;
use crate::valve::{SignatureRegistry, TaskVector, ThresholdState};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn fail(detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", detail: detail.into() }
}

// ─── metadata ───────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct ExpertMeta {
    id: u32,
    performance: f64,
    usage_count: u64,
    frozen: bool,
    owner_tasks: Vec<usize>,
    frozen_digest: Option<String>,
    reduction: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeMeta {
    task_id: usize,
    family: Family,
    vector: TaskVector,
    owner_experts: Vec<u32>,
    fusion_weights: Vec<f64>,
    replay_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: crate::config::RunConfig,
    threshold: ThresholdState,
    registry: SignatureRegistry,
    experts: Vec<ExpertMeta>,
    episodes: Vec<EpisodeMeta>,
    alloc_rng: CounterRng,
    eval_probe_digest: String,
}

/// A checkpoint pulled back into memory.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub state: ContinualState,
    pub probe_digest: String,
}

// ─── save ───────────────────────────────────────────────────────────────

pub fn save(state: &ContinualState, probe_digest: &str, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        config: state.config.clone(),
        threshold: state.threshold.clone(),
        registry: state.registry.clone(),
        experts: state
            .library
            .experts()
            .iter()
            .map(|e| ExpertMeta {
                id: e.id,
                performance: e.performance,
                usage_count: e.usage_count,
                frozen: e.frozen,
                owner_tasks: e.owner_tasks.iter().copied().collect(),
                frozen_digest: e.frozen_digest.clone(),
                reduction: e.params.reduction,
            })
            .collect(),
        episodes: state
            .episodes
            .iter()
            .map(|ep| EpisodeMeta {
                task_id: ep.task_id,
                family: ep.family,
                vector: ep.vector.clone(),
                owner_experts: ep.owner_experts.clone(),
                fusion_weights: ep.fusion_weights.clone(),
                replay_len: ep.replay.len(),
            })
            .collect(),
        alloc_rng: state.alloc_rng.clone(),
        eval_probe_digest: probe_digest.to_string(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in blob_tensors(state) {
        out.extend_from_slice(&t.encode_dlt());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Every tensor in the checkpoint, in on-disk order.
fn blob_tensors(state: &ContinualState) -> Vec<&Tensor> {
    let mut out = Vec::new();
    out.extend(state.backbone.tensors());
    out.extend(state.projector.tensors());
    for e in state.library.experts() {
        out.extend(e.params.tensors());
    }
    for ep in &state.episodes {
        for pair in &ep.replay {
            out.push(&pair.degraded);
            out.push(&pair.clean);
        }
    }
    out
}

// ─── load ───────────────────────────────────────────────────────────────

pub fn load(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 {
        return Err(fail("truncated header"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let blob_start = 16usize
        .checked_add(json_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| fail("metadata length exceeds file size"))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..blob_start])
        .map_err(|e| fail(format!("bad metadata: {e}")))?;
    meta.config.validate()?;

    let mut cursor = blob_start;
    let next = |cursor: &mut usize| -> Result<Tensor> {
        let (t, used) = Tensor::decode_dlt(&bytes[*cursor..])?;
        *cursor += used;
        Ok(t)
    };

    let width = meta.config.feature_width;
    let backbone = BackboneParams {
        enc1_w: next(&mut cursor)?.into_param(),
        enc1_b: next(&mut cursor)?.into_param(),
        enc2_w: next(&mut cursor)?.into_param(),
        enc2_b: next(&mut cursor)?.into_param(),
        dec_w: next(&mut cursor)?.into_param(),
        dec_b: next(&mut cursor)?.into_param(),
        width,
    };
    let projector = ProjectorParams {
        w1: next(&mut cursor)?.into_param(),
        b1: next(&mut cursor)?.into_param(),
        w2: next(&mut cursor)?.into_param(),
        b2: next(&mut cursor)?.into_param(),
        width,
    };
    let mut library = LibraryState::new(
        meta.config.expert_capacity,
        meta.config.k_transfer,
        meta.config.k_new,
        meta.config.tau,
        width,
        meta.config.adapter_reduction,
    );
    for em in &meta.experts {
        let params = AdapterParams {
            down_w: next(&mut cursor)?.into_param(),
            down_b: next(&mut cursor)?.into_param(),
            up_w: next(&mut cursor)?.into_param(),
            up_b: next(&mut cursor)?.into_param(),
            reduction: em.reduction,
        };
        library.restore_expert(ExpertRecord {
            id: em.id,
            params,
            performance: em.performance,
            usage_count: em.usage_count,
            frozen: em.frozen,
            owner_tasks: em.owner_tasks.iter().copied().collect::<BTreeSet<usize>>(),
            frozen_digest: em.frozen_digest.clone(),
        })?;
    }
    let mut episodes = Vec::with_capacity(meta.episodes.len());
    for em in &meta.episodes {
        let mut replay = Vec::with_capacity(em.replay_len);
        for i in 0..em.replay_len {
            let degraded = next(&mut cursor)?;
            let clean = next(&mut cursor)?;
            replay.push(SamplePair { clean, degraded, family: em.family, index: i as u64 });
        }
        episodes.push(TaskEpisode {
            task_id: em.task_id,
            family: em.family,
            vector: em.vector.clone(),
            owner_experts: em.owner_experts.clone(),
            fusion_weights: em.fusion_weights.clone(),
            replay,
        });
    }
    if cursor != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - cursor)));
    }
    // Decoded expert weights must match the digests frozen at training
    // time — catches both file corruption and tampering.
    library.verify_frozen_digests()?;
    Ok(LoadedCheckpoint {
        state: ContinualState {
            config: meta.config,
            backbone,
            projector,
            library,
            threshold: meta.threshold,
            registry: meta.registry,
            episodes,
            alloc_rng: meta.alloc_rng,
        },
        probe_digest: meta.eval_probe_digest,
    })
}

/// Load and replay the eval probe: restore task 0's validation batch
/// and require a bit-identical output digest.
pub fn verify(path: &Path) -> Result<()> {
    let loaded = load(path)?;
    let st = &loaded.state;
    let recomputed = harness::probe_digest(&st.config, &st.backbone, &st.library, &st.episodes)?;
    if recomputed != loaded.probe_digest {
        return Err(Error::DigestMismatch(format!(
            "checkpoint probe replay diverged: stored {}, recomputed {}",
            loaded.probe_digest, recomputed
        )));
    }
    Ok(())
}
