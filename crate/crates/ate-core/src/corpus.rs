//! Trajectory corpora: synthetic expert data, chunking, normalization, and
//! the ATEC binary format.
//!
//! One corpus holds one embodiment — loaders refuse files whose action
//! dimensionality is inconsistent, which keeps the cross-embodiment gap a
//! property of the data layout instead of a convention.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AteError, Result};
use crate::rng::child_seed;
use crate::tensor::Tensor;
use crate::toy_env::{rollout_expert, ArmEnv, Task, TaskSpec};

pub const CORPUS_MAGIC: &[u8; 4] = b"ATEC";
pub const CORPUS_VERSION: u32 = 1;
/// Floor applied to per-dimension std so constant dims stay invertible.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionRepr {
    JointDeltas,
    JointPositions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentSpec {
    pub id: String,
    pub dof: usize,
    pub link_lengths: Vec<f64>,
    pub action_repr: ActionRepr,
    pub action_dim: usize,
}

impl EmbodimentSpec {
    pub fn new(
        id: impl Into<String>,
        link_lengths: Vec<f64>,
        action_repr: ActionRepr,
    ) -> Result<Self> {
        let dof = link_lengths.len();
        if dof == 0 || link_lengths.iter().any(|&l| l <= 0.0) {
            return Err(AteError::Config("link lengths must be non-empty and > 0".into()));
        }
        Ok(EmbodimentSpec { id: id.into(), dof, link_lengths, action_repr, action_dim: dof })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dof != self.link_lengths.len() {
            return Err(AteError::Config(format!(
                "embodiment {}: dof {} but {} links",
                self.id,
                self.dof,
                self.link_lengths.len()
            )));
        }
        // both joint-space representations have one value per joint
        if self.action_dim != self.dof {
            return Err(AteError::Config(format!(
                "embodiment {}: action_dim {} inconsistent with dof {}",
                self.id, self.action_dim, self.dof
            )));
        }
        if self.link_lengths.iter().any(|&l| l <= 0.0) {
            return Err(AteError::Config(format!("embodiment {}: non-positive link", self.id)));
        }
        Ok(())
    }

    /// Observation width: joint angles + effector xy + target xy + block xy.
    pub fn state_dim(&self) -> usize {
        self.dof + 6
    }

    pub fn two_link() -> Self {
        EmbodimentSpec::new("planar2", vec![0.5, 0.5], ActionRepr::JointDeltas).unwrap()
    }

    pub fn three_link() -> Self {
        EmbodimentSpec::new("planar3", vec![0.4, 0.35, 0.25], ActionRepr::JointDeltas).unwrap()
    }

    pub fn four_link() -> Self {
        EmbodimentSpec::new("planar4", vec![0.35, 0.3, 0.2, 0.15], ActionRepr::JointDeltas).unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub embodiment_id: String,
    /// T×S, columns: joint angles (dof), effector xy, target xy, block xy.
    pub states: Tensor,
    /// T×D executed (clamped) actions.
    pub actions: Tensor,
    pub task_id: u32,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.rows() == 0
    }
}

/// A fixed-length window of consecutive actions: the unit the VAEs and
/// policies consume. `values` is chunk_len × action_dim.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub values: Tensor,
    pub embodiment_id: String,
}

impl ActionChunk {
    /// Zero-pads the action dimension up to `dim` (unified policy space).
    pub fn padded_to(&self, dim: usize) -> Result<ActionChunk> {
        let (h, d) = self.values.shape();
        if dim < d {
            return Err(AteError::dim(
                "chunk_pad",
                format!("cannot pad dim {d} down to {dim}"),
            ));
        }
        let mut out = Tensor::zeros(h, dim);
        for r in 0..h {
            out.row_mut(r)[..d].copy_from_slice(self.values.row(r));
        }
        Ok(ActionChunk { values: out, embodiment_id: self.embodiment_id.clone() })
    }
}

/// Per-dimension affine normalization fitted on raw actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, actions: &Tensor) -> Result<Tensor> {
        self.check(actions)?;
        let mut out = actions.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        Ok(out)
    }

    pub fn invert(&self, actions: &Tensor) -> Result<Tensor> {
        self.check(actions)?;
        let mut out = actions.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
        Ok(out)
    }

    fn check(&self, actions: &Tensor) -> Result<()> {
        if actions.cols() != self.dim() {
            return Err(AteError::dim(
                "norm",
                format!("stats dim {} vs actions dim {}", self.dim(), actions.cols()),
            ));
        }
        Ok(())
    }
}

/// Fits per-dimension mean/std over all actions of the given trajectories.
pub fn fit_norm(trajectories: &[Trajectory]) -> Result<NormStats> {
    let dim = trajectories
        .first()
        .ok_or_else(|| AteError::Generation("fit_norm on empty corpus".into()))?
        .actions
        .cols();
    let mut count = 0usize;
    let mut mean = vec![0.0; dim];
    for t in trajectories {
        if t.actions.cols() != dim {
            return Err(AteError::dim("fit_norm", "mixed action dims in corpus"));
        }
        for r in 0..t.actions.rows() {
            for (c, &v) in t.actions.row(r).iter().enumerate() {
                mean[c] += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(AteError::Generation("fit_norm on corpus with no actions".into()));
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; dim];
    for t in trajectories {
        for r in 0..t.actions.rows() {
            for (c, &v) in t.actions.row(r).iter().enumerate() {
                var[c] += (v - mean[c]) * (v - mean[c]);
            }
        }
    }
    let std = var
        .iter()
        .map(|&v| (v / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormStats { mean, std })
}

/// Cuts a trajectory's action stream into overlapping fixed-length chunks.
/// Returns an empty list when the trajectory is shorter than one chunk.
pub fn chunk(traj: &Trajectory, chunk_len: usize, stride: usize) -> Result<Vec<ActionChunk>> {
    if stride == 0 {
        return Err(AteError::Config("chunk stride must be >= 1".into()));
    }
    if chunk_len == 0 {
        return Err(AteError::Config("chunk_len must be >= 1".into()));
    }
    let t = traj.len();
    if chunk_len > t {
        return Ok(Vec::new());
    }
    let count = (t - chunk_len) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        out.push(ActionChunk {
            values: traj.actions.slice_rows(i * stride, chunk_len),
            embodiment_id: traj.embodiment_id.clone(),
        });
    }
    Ok(out)
}

/// Scripted-expert data generation across embodiments and tasks. Every
/// returned trajectory reached task success; episodes whose expert rollout
/// failed are reseeded up to a fixed budget.
pub fn generate_corpus(
    specs: &[EmbodimentSpec],
    tasks: &[TaskSpec],
    episodes_per_task: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if episodes_per_task == 0 {
        return Err(AteError::Generation("episodes_per_task must be >= 1".into()));
    }
    if specs.is_empty() || tasks.is_empty() {
        return Err(AteError::Generation("need at least one embodiment and task".into()));
    }
    for s in specs {
        s.validate()?;
    }

    let mut jobs = Vec::new();
    for (si, spec) in specs.iter().enumerate() {
        for (ti, task) in tasks.iter().enumerate() {
            for ep in 0..episodes_per_task {
                jobs.push((si, ti, ep, child_seed(seed, (si * 1000 + ti) as u64 * 100_000 + ep as u64)));
            }
        }
    }

    let results: Vec<Result<Trajectory>> = jobs
        .par_iter()
        .map(|&(si, ti, ep, ep_seed)| {
            let spec = &specs[si];
            let env = ArmEnv::new(spec.link_lengths.clone(), tasks[ti])?;
            const RESEED_BUDGET: u64 = 50;
            for attempt in 0..RESEED_BUDGET {
                let s = child_seed(ep_seed, attempt);
                let (states, actions, ok) = rollout_expert(&env, s);
                if !ok {
                    continue;
                }
                return Ok(build_trajectory(spec, &env, tasks[ti].task, &states, &actions));
            }
            Err(AteError::Generation(format!(
                "expert failed {RESEED_BUDGET} reseeds: embodiment {} task {:?} episode {ep}",
                spec.id, tasks[ti].task
            )))
        })
        .collect();

    results.into_iter().collect()
}

fn build_trajectory(
    spec: &EmbodimentSpec,
    env: &ArmEnv,
    task: Task,
    states: &[crate::toy_env::EnvState],
    actions: &[Vec<f64>],
) -> Trajectory {
    let t = actions.len();
    let sd = spec.state_dim();
    let mut st = Tensor::zeros(t, sd);
    let mut ac = Tensor::zeros(t, spec.action_dim);
    for (r, (s, a)) in states.iter().zip(actions).enumerate() {
        let ee = env.fk(&s.joint_angles);
        let row = st.row_mut(r);
        row[..spec.dof].copy_from_slice(&s.joint_angles);
        row[spec.dof] = ee[0];
        row[spec.dof + 1] = ee[1];
        row[spec.dof + 2] = s.target_xy[0];
        row[spec.dof + 3] = s.target_xy[1];
        row[spec.dof + 4] = s.block_xy[0];
        row[spec.dof + 5] = s.block_xy[1];
        ac.row_mut(r).copy_from_slice(a);
    }
    Trajectory { embodiment_id: spec.id.clone(), states: st, actions: ac, task_id: task.id() }
}

/// One embodiment's trajectories plus the metadata needed to rebuild envs.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub embodiment: EmbodimentSpec,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

impl Corpus {
    pub fn from_trajectories(
        embodiment: EmbodimentSpec,
        seed: u64,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self> {
        for t in &trajectories {
            if t.embodiment_id != embodiment.id {
                return Err(AteError::Format(format!(
                    "trajectory from `{}` cannot join corpus `{}`",
                    t.embodiment_id, embodiment.id
                )));
            }
            if t.actions.cols() != embodiment.action_dim {
                return Err(AteError::dim(
                    "corpus",
                    format!(
                        "action dim {} vs embodiment dim {}",
                        t.actions.cols(),
                        embodiment.action_dim
                    ),
                ));
            }
        }
        Ok(Corpus { embodiment, seed, trajectories })
    }

    /// All chunks over all trajectories.
    pub fn chunks(&self, chunk_len: usize, stride: usize) -> Result<Vec<ActionChunk>> {
        let mut out = Vec::new();
        for t in &self.trajectories {
            out.extend(chunk(t, chunk_len, stride)?);
        }
        Ok(out)
    }

    pub fn fit_norm(&self) -> Result<NormStats> {
        fit_norm(&self.trajectories)
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusMeta {
    embodiment: EmbodimentSpec,
    seed: u64,
    n_trajectories: u64,
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(CORPUS_MAGIC)?;
    f.write_all(&CORPUS_VERSION.to_le_bytes())?;
    let meta = CorpusMeta {
        embodiment: corpus.embodiment.clone(),
        seed: corpus.seed,
        n_trajectories: corpus.trajectories.len() as u64,
    };
    let meta_bytes = serde_json::to_vec(&meta)
        .map_err(|e| AteError::Format(format!("metadata encode: {e}")))?;
    f.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&meta_bytes)?;
    f.write_all(&(corpus.trajectories.len() as u64).to_le_bytes())?;
    for t in &corpus.trajectories {
        f.write_all(&t.task_id.to_le_bytes())?;
        write_f32_array(&mut f, &t.states)?;
        write_f32_array(&mut f, &t.actions)?;
    }
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| AteError::Format("file too short for magic".into()))?;
    if &magic != CORPUS_MAGIC {
        return Err(AteError::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, CORPUS_MAGIC
        )));
    }
    let version = read_u32(&mut f)?;
    if version != CORPUS_VERSION {
        return Err(AteError::UnsupportedVersion { found: version, supported: CORPUS_VERSION });
    }
    let meta_len = read_u32(&mut f)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    f.read_exact(&mut meta_bytes)
        .map_err(|_| AteError::Corruption("truncated metadata".into()))?;
    let meta: CorpusMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| AteError::Format(format!("metadata decode: {e}")))?;
    meta.embodiment.validate()?;

    let n = read_u64(&mut f)?;
    if n != meta.n_trajectories {
        return Err(AteError::Corruption(format!(
            "trajectory count {} disagrees with metadata {}",
            n, meta.n_trajectories
        )));
    }
    let mut trajectories = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let task_id = read_u32(&mut f)?;
        let states = read_f32_array(&mut f)?;
        let actions = read_f32_array(&mut f)?;
        if actions.cols() != meta.embodiment.action_dim {
            return Err(AteError::Corruption(format!(
                "trajectory action dim {} in corpus of dim {} (mixed embodiments?)",
                actions.cols(),
                meta.embodiment.action_dim
            )));
        }
        if states.rows() != actions.rows() {
            return Err(AteError::Corruption("states/actions length mismatch".into()));
        }
        trajectories.push(Trajectory {
            embodiment_id: meta.embodiment.id.clone(),
            states,
            actions,
            task_id,
        });
    }
    Corpus::from_trajectories(meta.embodiment, meta.seed, trajectories)
}

fn write_f32_array(f: &mut impl Write, t: &Tensor) -> Result<()> {
    f.write_all(&(t.rows() as u64).to_le_bytes())?;
    f.write_all(&(t.cols() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

fn read_f32_array(f: &mut impl Read) -> Result<Tensor> {
    let rows = read_u64(f)? as usize;
    let cols = read_u64(f)? as usize;
    if rows.saturating_mul(cols) > 1 << 28 {
        return Err(AteError::Corruption(format!("implausible array {rows}x{cols}")));
    }
    let mut buf = vec![0u8; rows * cols * 4];
    f.read_exact(&mut buf)
        .map_err(|_| AteError::Corruption("truncated array payload".into()))?;
    let data = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::from_vec(rows, cols, data)
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)
        .map_err(|_| AteError::Corruption("truncated u32 field".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(f: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)
        .map_err(|_| AteError::Corruption("truncated u64 field".into()))?;
    Ok(u64::from_le_bytes(b))
}
