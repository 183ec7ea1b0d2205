//! On-disk demonstration format (`.cwjsonl`): one JSON header line, then one
//! JSON object per episode. Floats serialize with full round-trip precision.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    run_expert_episode, Action, ChainWorld, EnvConfig, TaskSpec, CHANNELS, VOCABULARY,
};
use crate::error::{CoreError, Result};
use crate::rng::derive_seed;

pub const FORMAT_VERSION: &str = "cwjsonl-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: String,
    pub vocabulary: Vec<String>,
    pub grid: usize,
    pub channels: usize,
    pub a_dim: usize,
    pub h: usize,
    pub tasks: Vec<TaskSpec>,
    pub dataset_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeObservations {
    /// Per-step agent-view grids, each `grid * grid * channels` floats.
    pub agent: Vec<Vec<f32>>,
    /// Per-step wrist-view grids.
    pub wrist: Vec<Vec<f32>>,
    /// Per-step proprioception (4 floats).
    pub proprio: Vec<Vec<f32>>,
}

/// One successful demonstration. `t` is the terminal index: the episode
/// holds `t` observations and `t` actions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Episode {
    pub task: TaskSpec,
    pub instruction_ids: Vec<u32>,
    pub t: usize,
    pub observations: EpisodeObservations,
    pub actions: Vec<Vec<f32>>,
    pub success: bool,
    pub seed: u64,
}

impl Episode {
    pub fn validate(&self, header: &DatasetHeader) -> Result<()> {
        let frame = header.grid * header.grid * header.channels;
        let ok = self.success
            && self.t == self.actions.len()
            && self.t == self.observations.agent.len()
            && self.t == self.observations.wrist.len()
            && self.t == self.observations.proprio.len()
            && self.observations.agent.iter().all(|f| f.len() == frame)
            && self.observations.wrist.iter().all(|f| f.len() == frame)
            && self.observations.proprio.iter().all(|p| p.len() == 4)
            && self.actions.iter().all(|a| {
                a.len() == header.a_dim
                    && a[0].abs() <= super::ACTION_MAX_DELTA + 1e-6
                    && a[1].abs() <= super::ACTION_MAX_DELTA + 1e-6
                    && (0.0..=1.0).contains(&a[2])
            });
        if !ok {
            return Err(CoreError::Dataset(format!(
                "inconsistent episode (seed {})",
                self.seed
            )));
        }
        Ok(())
    }

    /// Replay the stored actions open-loop through the dynamics; the stored
    /// episode must reproduce success.
    pub fn replays_successfully(&self, cfg: &EnvConfig) -> Result<bool> {
        let (mut env, _) = ChainWorld::reset(&self.task, cfg, self.seed)?;
        for a in &self.actions {
            let (_, done, success) = env.step(Action::from_slice(a));
            if done {
                return Ok(success);
            }
        }
        Ok(false)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.t).sum()
    }

    pub fn mean_length(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.total_steps() as f64 / self.episodes.len() as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenerateStats {
    pub episodes: usize,
    pub failures: usize,
    pub mean_length: f64,
}

/// Generate the demonstration corpus: `demos_per_task` successful expert
/// episodes per task spec. Failed rollouts are discarded and re-seeded; a
/// failure rate above 20% aborts with a diagnostic. Byte-identical output
/// for identical `(cfg, h)`.
pub fn generate_dataset(cfg: &EnvConfig, h: usize, out: &Path) -> Result<GenerateStats> {
    if cfg.tasks.is_empty() {
        return Err(CoreError::Config("task grammar is empty".into()));
    }
    for t in &cfg.tasks {
        t.validate()?;
    }
    let header = DatasetHeader {
        version: FORMAT_VERSION.to_string(),
        vocabulary: VOCABULARY.iter().map(|s| s.to_string()).collect(),
        grid: cfg.grid,
        channels: CHANNELS,
        a_dim: Action::DIM,
        h,
        tasks: cfg.tasks.clone(),
        dataset_seed: cfg.seed,
    };
    let file = File::create(out)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;

    let mut failures = 0usize;
    let mut attempts = 0usize;
    let mut total_len = 0usize;
    let mut episodes = 0usize;
    for (task_idx, task) in cfg.tasks.iter().enumerate() {
        for demo in 0..cfg.demos_per_task {
            let index = (task_idx * cfg.demos_per_task + demo) as u64;
            let base = derive_seed(cfg.seed, "episode", index);
            let mut attempt = 0u64;
            let episode = loop {
                attempts += 1;
                let seed = if attempt == 0 {
                    base
                } else {
                    derive_seed(base, "retry", attempt)
                };
                match run_expert_episode(task, cfg, seed)? {
                    Some(ep) => break ep,
                    None => {
                        failures += 1;
                        if failures * 5 > (attempts * 1).max(20) {
                            return Err(CoreError::Dataset(format!(
                                "expert failure rate {failures}/{attempts} exceeds 20%; \
                                 environment or expert is misconfigured"
                            )));
                        }
                        attempt += 1;
                    }
                }
            };
            total_len += episode.t;
            episodes += 1;
            serde_json::to_writer(&mut w, &episode)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(GenerateStats {
        episodes,
        failures,
        mean_length: total_len as f64 / episodes.max(1) as f64,
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| CoreError::Dataset("empty dataset file".into()))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)?;
    if header.version != FORMAT_VERSION {
        return Err(CoreError::Dataset(format!(
            "unsupported dataset version '{}'",
            header.version
        )));
    }
    let mut episodes = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line)?;
        ep.validate(&header)?;
        episodes.push(ep);
    }
    if episodes.is_empty() {
        return Err(CoreError::Dataset("dataset holds no episodes".into()));
    }
    Ok(Dataset { header, episodes })
}
