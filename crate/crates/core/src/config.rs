//! Run configuration: one JSON document covering environment, model, loss,
//! training, and evaluation, with `desk`/`paper` presets and dotted-path
//! overrides. Unknown keys are rejected; the effective config is echoed
//! into every run directory.

use serde::{Deserialize, Serialize};

use crate::chainworld::EnvConfig;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    NoProgress,
    NoContextResampler,
    AltBackbone,
    FrozenBackbone,
}

impl std::str::FromStr for Ablation {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "full" => Ok(Ablation::None),
            "no_progress" => Ok(Ablation::NoProgress),
            "no_context_resampler" => Ok(Ablation::NoContextResampler),
            "alt_backbone" => Ok(Ablation::AltBackbone),
            "frozen_backbone" => Ok(Ablation::FrozenBackbone),
            other => Err(CoreError::Config(format!("unknown ablation '{other}'"))),
        }
    }
}

impl Ablation {
    pub fn label(&self) -> &'static str {
        match self {
            Ablation::None => "full",
            Ablation::NoProgress => "no_progress",
            Ablation::NoContextResampler => "no_context_resampler",
            Ablation::AltBackbone => "alt_backbone",
            Ablation::FrozenBackbone => "frozen_backbone",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Heun,
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    AdvantageSuccess,
    RtDirect,
    Uniform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Heads inside the Q/V Perceiver poolers.
    pub pooler_heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub patch_size: usize,
    pub vision_depth: usize,
    pub vision_tokens_per_view: usize,
    pub language_tokens: usize,
    pub n_ctx: usize,
    pub fusion_layers: usize,
    pub resampler_blocks: usize,
    pub expert_blocks: usize,
    /// Prediction horizon H.
    pub horizon: usize,
    /// Execution horizon H_e.
    pub exec_horizon: usize,
    /// ODE integration steps K.
    pub flow_steps: usize,
    pub sampler: Sampler,
    pub vision_frozen: bool,
    pub text_frozen: bool,
    /// Feed all fused tokens to the heads and expert (skip the post-fusion
    /// resampler).
    pub no_context_resampler: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 8,
            pooler_heads: 4,
            mlp_ratio: 4,
            dropout: 0.1,
            patch_size: 4,
            vision_depth: 2,
            vision_tokens_per_view: 8,
            language_tokens: 16,
            n_ctx: 4,
            fusion_layers: 2,
            resampler_blocks: 2,
            expert_blocks: 4,
            horizon: 16,
            exec_horizon: 8,
            flow_steps: 10,
            sampler: Sampler::Heun,
            vision_frozen: false,
            text_frozen: true,
            no_context_resampler: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 || self.d_model % self.pooler_heads != 0 {
            return Err(CoreError::Config(
                "d_model must be divisible by n_heads and pooler_heads".into(),
            ));
        }
        if self.n_ctx == 0
            || self.vision_tokens_per_view == 0
            || self.language_tokens == 0
            || self.expert_blocks == 0
        {
            return Err(CoreError::Config("token counts must be >= 1".into()));
        }
        if self.exec_horizon == 0 || self.exec_horizon > self.horizon {
            return Err(CoreError::Config(
                "exec_horizon must satisfy 1 <= H_e <= H".into(),
            ));
        }
        if self.flow_steps == 0 {
            return Err(CoreError::Config("flow_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_v: f64,
    pub lambda_q: f64,
    pub lambda_s: f64,
    /// Expectile.
    pub rho: f64,
    /// Advantage temperature.
    pub beta_temp: f64,
    /// Advantage weight clip C.
    pub clip_c: f64,
    /// Horizon cap for the progress target.
    pub t_m: usize,
    pub weight_mode: WeightMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_v: 0.5,
            lambda_q: 1.0,
            lambda_s: 0.2,
            rho: 0.8,
            beta_temp: 0.5,
            clip_c: 20.0,
            t_m: 200,
            weight_mode: WeightMode::AdvantageSuccess,
        }
    }
}

impl LossConfig {
    /// Success threshold, derived so the label fires on the final 17 steps.
    pub fn r_succ(&self) -> f64 {
        1.0 - 17.0 / self.t_m as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.5 && self.rho < 1.0) {
            return Err(CoreError::Config(format!("rho {} outside (0.5, 1)", self.rho)));
        }
        if self.beta_temp <= 0.0 {
            return Err(CoreError::Config("beta_temp must be positive".into()));
        }
        if self.clip_c < 1.0 {
            return Err(CoreError::Config("clip_c must be >= 1".into()));
        }
        if self.t_m < 18 {
            return Err(CoreError::Config(
                "t_m must exceed the 17-step success tail".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Explicit step budget; takes precedence over `epochs`.
    pub steps: Option<usize>,
    /// Chunk-level epochs (one pass over every (episode, t) pair).
    pub epochs: Option<usize>,
    pub lr_init: f64,
    pub lr_final: f64,
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub ablation: Ablation,
    /// Checkpoint interval in steps (0 = final checkpoint only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            steps: Some(5000),
            epochs: None,
            lr_init: 1e-4,
            lr_final: 1e-6,
            warmup_steps: 500,
            adam_beta1: 0.95,
            adam_beta2: 0.999,
            weight_decay: 0.01,
            clip_norm: 1.0,
            ema_decay: 0.75,
            seed: 1,
            ablation: Ablation::None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(CoreError::Config("ema_decay must lie in [0, 1)".into()));
        }
        if self.warmup_steps == 0 {
            return Err(CoreError::Config("warmup_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        if self.steps.is_none() && self.epochs.is_none() {
            return Err(CoreError::Config("one of steps/epochs must be set".into()));
        }
        Ok(())
    }

    /// Resolve the step budget against a dataset size (chunk-level epochs).
    pub fn resolve_steps(&self, total_chunks: usize) -> usize {
        if let Some(s) = self.steps {
            return s;
        }
        let per_epoch = total_chunks.div_ceil(self.batch_size).max(1);
        per_epoch * self.epochs.unwrap_or(1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes_per_task: usize,
    pub seed: u64,
    /// Demonstrations per task held out for diagnostics.
    pub heldout_demos_per_task: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes_per_task: 50,
            seed: 1_000_003,
            heldout_demos_per_task: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    /// Desk preset: laptop-scale widths and a bounded step budget.
    pub fn desk() -> Self {
        RunConfig {
            preset: Preset::Desk,
            env: EnvConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Paper preset: published hyperparameters (width 384, 12 expert blocks,
    /// batch 256, horizon cap 500, 500 epochs).
    pub fn paper() -> Self {
        let mut cfg = RunConfig::desk();
        cfg.preset = Preset::Paper;
        cfg.model.d_model = 384;
        cfg.model.expert_blocks = 12;
        cfg.train.batch_size = 256;
        cfg.train.steps = None;
        cfg.train.epochs = Some(500);
        cfg.loss.t_m = 500;
        cfg
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => RunConfig::desk(),
            Preset::Paper => RunConfig::paper(),
        }
    }

    /// Fold the selected ablation into the model flags and validate.
    pub fn resolved(mut self) -> Result<Self> {
        match self.train.ablation {
            Ablation::NoContextResampler => self.model.no_context_resampler = true,
            Ablation::AltBackbone => {
                self.model.patch_size = 2;
                self.model.vision_depth = 1;
            }
            Ablation::FrozenBackbone => self.model.vision_frozen = true,
            Ablation::None | Ablation::NoProgress => {}
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.env.grid % self.model.patch_size != 0 {
            return Err(CoreError::Config(format!(
                "grid {} not divisible by patch size {}",
                self.env.grid, self.model.patch_size
            )));
        }
        if self.env.tasks.is_empty() {
            return Err(CoreError::Config("task grammar is empty".into()));
        }
        Ok(())
    }
}

/// Parse a config file: the `preset` key picks the base, the file's other
/// keys override it. Returns the merged JSON (overrides may still follow).
pub fn load_config_value(text: &str) -> Result<serde_json::Value> {
    let raw: serde_json::Value = serde_json::from_str(text)?;
    let preset = match raw.get("preset") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => Preset::Desk,
    };
    let mut base = serde_json::to_value(RunConfig::preset(preset))?;
    deep_merge(&mut base, raw);
    Ok(base)
}

/// Apply `--set key=value` overrides (dotted paths into the JSON document).
/// Values parse as JSON when possible, otherwise as strings.
pub fn apply_overrides(doc: &mut serde_json::Value, sets: &[String]) -> Result<()> {
    for spec in sets {
        let (path, value) = spec.split_once('=').ok_or_else(|| {
            CoreError::Config(format!("override '{spec}' is not of the form key=value"))
        })?;
        let parsed: serde_json::Value = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        let parts: Vec<&str> = path.split('.').collect();
        let (last, dirs) = parts.split_last().expect("split produced a part");
        let mut node = &mut *doc;
        for part in dirs {
            node = node
                .as_object_mut()
                .ok_or_else(|| {
                    CoreError::Config(format!("override path '{path}' crosses a non-object"))
                })?
                .entry(part.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        node.as_object_mut()
            .ok_or_else(|| {
                CoreError::Config(format!("override path '{path}' crosses a non-object"))
            })?
            .insert(last.to_string(), parsed);
    }
    Ok(())
}

/// Final typed parse; unknown keys anywhere are rejected.
pub fn finalize_config(doc: serde_json::Value) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_value(doc)?;
    cfg.resolved()
}

fn deep_merge(base: &mut serde_json::Value, update: serde_json::Value) {
    match (base, update) {
        (serde_json::Value::Object(b), serde_json::Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
