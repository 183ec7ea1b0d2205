//! Multimodal context encoder: per-view patch backbone, per-modality
//! Perceiver resamplers, cross-modal fusion transformer, and the post-fusion
//! resampler that emits the compact context tokens consumed by the action
//! expert and the progress heads.

use rand_chacha::ChaCha8Rng;

use crate::chainworld::{Observation, CHANNELS, MAX_INSTRUCTION_LEN, VOCABULARY};
use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::nn::{
    padding_mask, push_param, sinusoidal_positions, AttentionConfig, FwdCtx, Linear,
    NamedParam, ParamList, PerceiverResampler, PerceiverResamplerConfig, TransformerEncoder,
    INIT_STD,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Camera views per observation: agent and wrist.
pub const N_VIEWS: usize = 2;
const N_MODALITIES: usize = 3; // vision, language, proprioception

/// Borrowed view of one observation, so batches can be assembled straight
/// from dataset storage without cloning frames.
#[derive(Clone, Copy)]
pub struct ObsRef<'a> {
    pub agent: &'a [f32],
    pub wrist: &'a [f32],
    pub proprio: [f32; 4],
    pub instruction_ids: &'a [u32],
}

impl<'a> From<&'a Observation> for ObsRef<'a> {
    fn from(o: &'a Observation) -> Self {
        ObsRef {
            agent: &o.agent,
            wrist: &o.wrist,
            proprio: o.proprio,
            instruction_ids: &o.instruction_ids,
        }
    }
}

/// Observations assembled into batch tensors: pre-patchified views, padded
/// instruction ids, and proprioception. Pure data, no gradients.
pub struct ObsBatch<S: Scalar> {
    /// Per view: `[b, n_patches, patch_dim]`.
    pub views: Vec<Tensor<S>>,
    /// `[b, 4]`.
    pub proprio: Tensor<S>,
    /// Row-major `b x MAX_INSTRUCTION_LEN`, zero-padded.
    pub instr_ids: Vec<usize>,
    /// Validity per instruction slot.
    pub instr_valid: Vec<Vec<bool>>,
    pub batch: usize,
}

impl<S: Scalar> ObsBatch<S> {
    pub fn new(obs: &[ObsRef<'_>], grid: usize, patch_size: usize) -> Result<Self> {
        if obs.is_empty() {
            return Err(CoreError::InvalidArgument("empty observation batch".into()));
        }
        if grid % patch_size != 0 {
            return Err(CoreError::InvalidArgument(format!(
                "grid {grid} not divisible by patch size {patch_size}"
            )));
        }
        let b = obs.len();
        let frame = grid * grid * CHANNELS;
        let mut views = Vec::with_capacity(N_VIEWS);
        for view_ix in 0..N_VIEWS {
            let mut data = Vec::with_capacity(b * frame);
            for o in obs {
                let raw = if view_ix == 0 { o.agent } else { o.wrist };
                if raw.len() != frame {
                    return Err(CoreError::InvalidArgument(format!(
                        "view frame has {} floats, expected {frame}",
                        raw.len()
                    )));
                }
                patchify_into(raw, grid, patch_size, &mut data);
            }
            let np = (grid / patch_size) * (grid / patch_size);
            let pd = patch_size * patch_size * CHANNELS;
            views.push(Tensor::from_vec(data, &[b, np, pd])?);
        }
        let mut proprio = Vec::with_capacity(b * 4);
        let mut instr_ids = Vec::with_capacity(b * MAX_INSTRUCTION_LEN);
        let mut instr_valid = Vec::with_capacity(b);
        for o in obs {
            proprio.extend(o.proprio.iter().map(|&v| S::from_f64(v as f64)));
            if o.instruction_ids.len() > MAX_INSTRUCTION_LEN {
                return Err(CoreError::InvalidArgument(
                    "instruction exceeds the token budget".into(),
                ));
            }
            let mut valid = vec![false; MAX_INSTRUCTION_LEN];
            for (slot, &id) in o.instruction_ids.iter().enumerate() {
                if id as usize >= VOCABULARY.len() {
                    return Err(CoreError::InvalidArgument(format!(
                        "token id {id} outside the vocabulary"
                    )));
                }
                instr_ids.push(id as usize);
                valid[slot] = true;
            }
            instr_ids
                .extend(std::iter::repeat_n(0usize, MAX_INSTRUCTION_LEN - o.instruction_ids.len()));
            instr_valid.push(valid);
        }
        Ok(ObsBatch {
            views,
            proprio: Tensor::from_vec(proprio, &[b, 4])?,
            instr_ids,
            instr_valid,
            batch: b,
        })
    }
}

/// Flatten non-overlapping patches in (patch-row, patch-col) order; each
/// patch is (cell-x, cell-y, channel) flattened.
fn patchify_into<S: Scalar>(frame: &[f32], grid: usize, patch: usize, out: &mut Vec<S>) {
    let per_side = grid / patch;
    for pi in 0..per_side {
        for pj in 0..per_side {
            for xi in 0..patch {
                for yj in 0..patch {
                    let cell = (pi * patch + xi) * grid + (pj * patch + yj);
                    for ch in 0..CHANNELS {
                        out.push(S::from_f64(frame[cell * CHANNELS + ch] as f64));
                    }
                }
            }
        }
    }
}

/// The fused, control-ready token set; shape `[b, n_ctx, d_model]`
/// (`[b, n_fused, d_model]` when the post-fusion resampler is ablated).
pub struct ContextTokens<S: Scalar> {
    pub tokens: Tensor<S>,
}

/// Small trainable stand-in for a pretrained vision backbone: patch embed,
/// learned 2-D positional embeddings, and a short Pre-LN transformer.
/// Shared across camera views.
struct VisionBackbone<S: Scalar> {
    patch_embed: Linear<S>,
    pos: Tensor<S>,
    blocks: TransformerEncoder<S>,
}

impl<S: Scalar> VisionBackbone<S> {
    fn new(cfg: &ModelConfig, grid: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let per_side = grid / cfg.patch_size;
        let n_patches = per_side * per_side;
        let patch_dim = cfg.patch_size * cfg.patch_size * CHANNELS;
        let trainable = !cfg.vision_frozen;
        let attn = AttentionConfig {
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            dropout_p: cfg.dropout,
        };
        Ok(VisionBackbone {
            patch_embed: Linear::new(patch_dim, cfg.d_model, INIT_STD, trainable, rng),
            pos: {
                let t = Tensor::randn(&[n_patches, cfg.d_model], INIT_STD, rng);
                if trainable {
                    Tensor::param(t.to_vec(), &[n_patches, cfg.d_model])?
                } else {
                    t
                }
            },
            blocks: TransformerEncoder::new(attn, cfg.vision_depth, cfg.mlp_ratio, trainable, rng)?,
        })
    }

    fn forward(&self, patches: &Tensor<S>, ctx: &mut FwdCtx) -> Result<Tensor<S>> {
        let embedded = self.patch_embed.forward(patches)?.add(&self.pos)?;
        self.blocks.forward(&embedded, ctx)
    }

    fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        self.patch_embed.collect(&format!("{prefix}.patch_embed"), out);
        push_param(out, prefix, "pos", &self.pos);
        self.blocks.collect(&format!("{prefix}.blocks"), out);
    }
}

pub struct Encoder<S: Scalar> {
    backbone: VisionBackbone<S>,
    view_resamplers: Vec<PerceiverResampler<S>>,
    text_embed: Tensor<S>,
    text_pos: Tensor<S>,
    lang_resampler: PerceiverResampler<S>,
    proprio_fc1: Linear<S>,
    proprio_fc2: Linear<S>,
    type_embed: Tensor<S>,
    fusion: TransformerEncoder<S>,
    ctx_resampler: PerceiverResampler<S>,
    cfg: ModelConfig,
    grid: usize,
}

impl<S: Scalar> Encoder<S> {
    pub fn new(cfg: &ModelConfig, grid: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if grid % cfg.patch_size != 0 {
            return Err(CoreError::Config(format!(
                "grid {grid} not divisible by patch size {}",
                cfg.patch_size
            )));
        }
        let d = cfg.d_model;
        let attn = AttentionConfig {
            d_model: d,
            n_heads: cfg.n_heads,
            dropout_p: cfg.dropout,
        };
        let resampler = |n_latents: usize, rng: &mut ChaCha8Rng| {
            PerceiverResampler::new(
                PerceiverResamplerConfig {
                    n_latents,
                    n_blocks: cfg.resampler_blocks,
                    attn,
                    mlp_ratio: cfg.mlp_ratio,
                },
                true,
                rng,
            )
        };
        // one resampler per camera; the backbone itself is shared
        let view_resamplers = (0..N_VIEWS)
            .map(|_| resampler(cfg.vision_tokens_per_view, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder {
            backbone: VisionBackbone::new(cfg, grid, rng)?,
            view_resamplers,
            // frozen random embedding table stands in for the pretrained
            // text encoder
            text_embed: {
                let t = Tensor::randn(&[VOCABULARY.len(), d], 1.0, rng);
                if cfg.text_frozen {
                    t
                } else {
                    Tensor::param(t.to_vec(), &[VOCABULARY.len(), d])?
                }
            },
            text_pos: sinusoidal_positions(MAX_INSTRUCTION_LEN, d),
            lang_resampler: resampler(cfg.language_tokens, rng)?,
            proprio_fc1: Linear::new(4, d, INIT_STD, true, rng),
            proprio_fc2: Linear::new(d, d, INIT_STD, true, rng),
            type_embed: Tensor::param(
                Tensor::<S>::randn(&[N_MODALITIES, d], INIT_STD, rng).to_vec(),
                &[N_MODALITIES, d],
            )?,
            fusion: TransformerEncoder::new(attn, cfg.fusion_layers, cfg.mlp_ratio, true, rng)?,
            ctx_resampler: resampler(cfg.n_ctx, rng)?,
            cfg: cfg.clone(),
            grid,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    /// Context token count emitted by `encode`.
    pub fn n_ctx_tokens(&self) -> usize {
        if self.cfg.no_context_resampler {
            N_VIEWS * self.cfg.vision_tokens_per_view + self.cfg.language_tokens + 1
        } else {
            self.cfg.n_ctx
        }
    }

    /// Patch tokens for one view: `[b, n_patches, d]`.
    pub fn encode_vision(&self, patches: &Tensor<S>, ctx: &mut FwdCtx) -> Result<Tensor<S>> {
        self.backbone.forward(patches, ctx)
    }

    /// Token embeddings plus fixed sinusoidal positions: `[b, L, d]`.
    pub fn encode_language(&self, batch: &ObsBatch<S>) -> Result<Tensor<S>> {
        let d = self.cfg.d_model;
        let b = batch.batch;
        let flat = self.text_embed.gather_rows(&batch.instr_ids)?;
        flat.reshape(&[b, MAX_INSTRUCTION_LEN, d])?.add(&self.text_pos)
    }

    /// One token per step from a two-layer MLP: `[b, 1, d]`.
    pub fn encode_proprio(&self, proprio: &Tensor<S>) -> Result<Tensor<S>> {
        let b = proprio.shape()[0];
        let h = self.proprio_fc1.forward(proprio)?.gelu();
        self.proprio_fc2.forward(&h)?.reshape(&[b, 1, self.cfg.d_model])
    }

    fn type_tag(&self, tokens: &Tensor<S>, modality: usize) -> Result<Tensor<S>> {
        let d = self.cfg.d_model;
        let tag = self.type_embed.slice_axis(0, modality, 1)?.reshape(&[d])?;
        tokens.add(&tag)
    }

    /// The four-stage pipeline: per-view resample, language resample,
    /// proprio projection, fusion, post-fusion resample.
    pub fn encode(&self, batch: &ObsBatch<S>, ctx: &mut FwdCtx) -> Result<ContextTokens<S>> {
        let mut parts: Vec<Tensor<S>> = Vec::with_capacity(N_VIEWS + 2);
        for (view, resampler) in batch.views.iter().zip(self.view_resamplers.iter()) {
            let feats = self.encode_vision(view, ctx)?;
            let tokens = resampler.forward(&feats, None, ctx)?;
            parts.push(self.type_tag(&tokens, 0)?);
        }
        let lang_feats = self.encode_language(batch)?;
        let mask = padding_mask::<S>(&batch.instr_valid)?;
        let lang = self.lang_resampler.forward(&lang_feats, Some(&mask), ctx)?;
        parts.push(self.type_tag(&lang, 1)?);
        let prop = self.encode_proprio(&batch.proprio)?;
        parts.push(self.type_tag(&prop, 2)?);

        let refs: Vec<&Tensor<S>> = parts.iter().collect();
        let fused_in = Tensor::concat(&refs, 1)?;
        let fused = self.fusion.forward(&fused_in, ctx)?;
        let tokens = if self.cfg.no_context_resampler {
            fused
        } else {
            self.ctx_resampler.forward(&fused, None, ctx)?
        };
        Ok(ContextTokens { tokens })
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        self.backbone.collect(&format!("{prefix}.backbone"), out);
        for (i, r) in self.view_resamplers.iter().enumerate() {
            r.collect(&format!("{prefix}.view_resampler{i}"), out);
        }
        out.push(NamedParam {
            name: format!("{prefix}.text_embed"),
            tensor: self.text_embed.clone(),
        });
        self.lang_resampler.collect(&format!("{prefix}.lang_resampler"), out);
        self.proprio_fc1.collect(&format!("{prefix}.proprio_fc1"), out);
        self.proprio_fc2.collect(&format!("{prefix}.proprio_fc2"), out);
        push_param(out, prefix, "type_embed", &self.type_embed);
        self.fusion.collect(&format!("{prefix}.fusion"), out);
        self.ctx_resampler.collect(&format!("{prefix}.ctx_resampler"), out);
    }

    /// Names of the vision-backbone parameters (the freeze set of the
    /// frozen-backbone ablation).
    pub fn backbone_param_names(&self, prefix: &str) -> Vec<String> {
        let mut params = Vec::new();
        self.backbone.collect(&format!("{prefix}.backbone"), &mut params);
        params.into_iter().map(|p| p.name).collect()
    }
}
