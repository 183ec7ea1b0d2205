//! Reusable neural layers: linear, multi-head attention, Pre-LN transformer
//! blocks, the Perceiver resampler, and AdaLN-Zero modulation.

use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Standard deviation for weight and latent-query initialization.
pub const INIT_STD: f64 = 0.02;
/// Epsilon used by every layer norm.
pub const LN_EPS: f64 = 1e-5;

/// A named trainable (or frozen) value. Frozen parameters are ordinary
/// leaves with `requires_grad = false`; they are serialized but excluded
/// from optimizer state and EMA.
#[derive(Clone)]
pub struct NamedParam<S: Scalar> {
    pub name: String,
    pub tensor: Tensor<S>,
}

impl<S: Scalar> NamedParam<S> {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }
}

pub type ParamList<S> = Vec<NamedParam<S>>;

pub(crate) fn push_param<S: Scalar>(out: &mut ParamList<S>, prefix: &str, name: &str, t: &Tensor<S>) {
    out.push(NamedParam {
        name: format!("{prefix}.{name}"),
        tensor: t.clone(),
    });
}

/// Per-forward-pass context: dropout gating and its RNG stream.
pub struct FwdCtx {
    pub train: bool,
    pub rng: ChaCha8Rng,
}

impl FwdCtx {
    pub fn eval() -> Self {
        FwdCtx {
            train: false,
            rng: crate::rng::stream(0, "eval-noop", 0),
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        FwdCtx { train: true, rng }
    }

    pub fn dropout<S: Scalar>(&mut self, x: Tensor<S>, p: f64) -> Result<Tensor<S>> {
        if self.train && p > 0.0 {
            x.dropout(p, &mut self.rng)
        } else {
            Ok(x)
        }
    }
}

fn new_weight<S: Scalar>(
    shape: &[usize],
    std: f64,
    trainable: bool,
    rng: &mut ChaCha8Rng,
) -> Tensor<S> {
    let t = Tensor::randn(shape, std, rng);
    if trainable {
        Tensor::param(t.to_vec(), shape).expect("shape checked")
    } else {
        t
    }
}

// ── Linear ──────────────────────────────────────────────────────────

pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(d_in: usize, d_out: usize, std: f64, trainable: bool, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: new_weight(&[d_in, d_out], std, trainable, rng),
            bias: Some(if trainable {
                Tensor::param(vec![S::zero(); d_out], &[d_out]).unwrap()
            } else {
                Tensor::zeros(&[d_out])
            }),
        }
    }

    /// Zero-initialized layer (AdaLN gates, final velocity head).
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Tensor::param(vec![S::zero(); d_in * d_out], &[d_in, d_out]).unwrap(),
            bias: Some(Tensor::param(vec![S::zero(); d_out], &[d_out]).unwrap()),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Applies to the last axis of an arbitrary-rank input.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = x.shape().to_vec();
        let d_in = *shape.last().ok_or_else(|| {
            CoreError::InvalidArgument("linear on rank-0 input".into())
        })?;
        if d_in != self.d_in() {
            return Err(CoreError::shape("linear", &shape, self.weight.shape()));
        }
        let rows = x.numel() / d_in;
        let flat = x.reshape(&[rows, d_in])?;
        let mut y = flat.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.add(b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.weight.shape()[1];
        y.reshape(&out_shape)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        push_param(out, prefix, "weight", &self.weight);
        if let Some(b) = &self.bias {
            push_param(out, prefix, "bias", b);
        }
    }
}

// ── LayerNorm ───────────────────────────────────────────────────────

pub struct LayerNorm<S: Scalar> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(d: usize, trainable: bool) -> Self {
        let ones = vec![S::one(); d];
        let zeros = vec![S::zero(); d];
        if trainable {
            LayerNorm {
                gain: Tensor::param(ones, &[d]).unwrap(),
                bias: Tensor::param(zeros, &[d]).unwrap(),
            }
        } else {
            LayerNorm {
                gain: Tensor::from_vec(ones, &[d]).unwrap(),
                bias: Tensor::from_vec(zeros, &[d]).unwrap(),
            }
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.layernorm(&self.gain, &self.bias, LN_EPS)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        push_param(out, prefix, "gain", &self.gain);
        push_param(out, prefix, "bias", &self.bias);
    }
}

// ── Attention ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub dropout_p: f64,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(CoreError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(CoreError::Config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product attention. Query and key/value sequences
/// may differ in length (cross-attention) or coincide (self-attention).
pub struct Mha<S: Scalar> {
    wq: Linear<S>,
    wk: Linear<S>,
    wv: Linear<S>,
    wo: Linear<S>,
    cfg: AttentionConfig,
}

impl<S: Scalar> Mha<S> {
    /// `out_std` scales the output projection (residual-branch scaling).
    pub fn new(
        cfg: AttentionConfig,
        out_std: f64,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(Mha {
            wq: Linear::new(d, d, INIT_STD, trainable, rng),
            wk: Linear::new(d, d, INIT_STD, trainable, rng),
            wv: Linear::new(d, d, INIT_STD, trainable, rng),
            wo: Linear::new(d, d, out_std, trainable, rng),
            cfg,
        })
    }

    /// `mask`, when given, is an additive `[b, 1, 1, s_kv]` tensor holding 0
    /// for attended positions and a large negative number for padding.
    pub fn forward(
        &self,
        query: &Tensor<S>,
        kv: &Tensor<S>,
        mask: Option<&Tensor<S>>,
        ctx: &mut FwdCtx,
    ) -> Result<Tensor<S>> {
        let (d, h) = (self.cfg.d_model, self.cfg.n_heads);
        let dh = d / h;
        let qs = query.shape();
        let ks = kv.shape();
        if qs.len() != 3 || ks.len() != 3 || qs[2] != d || ks[2] != d || qs[0] != ks[0] {
            return Err(CoreError::shape("mha", qs, ks));
        }
        let (b, lq, lk) = (qs[0], qs[1], ks[1]);

        let split = |x: &Tensor<S>, len: usize| -> Result<Tensor<S>> {
            // [b, len, d] -> [b, h, len, dh]
            x.reshape(&[b, len, h, dh])?.permute(&[0, 2, 1, 3])
        };
        let scale = 1.0 / (dh as f64).sqrt();
        let q = split(&self.wq.forward(query)?.affine(scale, 0.0), lq)?;
        let k = split(&self.wk.forward(kv)?, lk)?;
        let v = split(&self.wv.forward(kv)?, lk)?;

        let mut scores = q.matmul(&k.permute(&[0, 1, 3, 2])?)?; // [b, h, lq, lk]
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        let attn = scores.softmax(3)?;
        let attn = ctx.dropout(attn, self.cfg.dropout_p)?;
        let mixed = attn.matmul(&v)?; // [b, h, lq, dh]
        let merged = mixed.permute(&[0, 2, 1, 3])?.reshape(&[b, lq, d])?;
        self.wo.forward(&merged)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        self.wq.collect(&format!("{prefix}.wq"), out);
        self.wk.collect(&format!("{prefix}.wk"), out);
        self.wv.collect(&format!("{prefix}.wv"), out);
        self.wo.collect(&format!("{prefix}.wo"), out);
    }
}

// ── MLP ─────────────────────────────────────────────────────────────

pub struct Mlp<S: Scalar> {
    fc1: Linear<S>,
    fc2: Linear<S>,
}

impl<S: Scalar> Mlp<S> {
    pub fn new(
        d: usize,
        ratio: usize,
        out_std: f64,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Mlp {
            fc1: Linear::new(d, d * ratio, INIT_STD, trainable, rng),
            fc2: Linear::new(d * ratio, d, out_std, trainable, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        self.fc1.collect(&format!("{prefix}.fc1"), out);
        self.fc2.collect(&format!("{prefix}.fc2"), out);
    }
}

// ── Pre-LN transformer encoder ──────────────────────────────────────

pub struct TransformerLayer<S: Scalar> {
    ln1: LayerNorm<S>,
    attn: Mha<S>,
    ln2: LayerNorm<S>,
    mlp: Mlp<S>,
    dropout_p: f64,
}

impl<S: Scalar> TransformerLayer<S> {
    pub fn new(
        cfg: AttentionConfig,
        mlp_ratio: usize,
        n_layers: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let out_std = INIT_STD / (2.0 * n_layers.max(1) as f64).sqrt();
        Ok(TransformerLayer {
            ln1: LayerNorm::new(cfg.d_model, trainable),
            attn: Mha::new(cfg, out_std, trainable, rng)?,
            ln2: LayerNorm::new(cfg.d_model, trainable),
            mlp: Mlp::new(cfg.d_model, mlp_ratio, out_std, trainable, rng),
            dropout_p: cfg.dropout_p,
        })
    }

    pub fn forward(&self, x: &Tensor<S>, ctx: &mut FwdCtx) -> Result<Tensor<S>> {
        let normed = self.ln1.forward(x)?;
        let branch = self.attn.forward(&normed, &normed, None, ctx)?;
        let x = x.add(&ctx.dropout(branch, self.dropout_p)?)?;
        let branch = self.mlp.forward(&self.ln2.forward(&x)?)?;
        x.add(&ctx.dropout(branch, self.dropout_p)?)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        self.mlp.collect(&format!("{prefix}.mlp"), out);
    }
}

pub struct TransformerEncoder<S: Scalar> {
    pub layers: Vec<TransformerLayer<S>>,
}

impl<S: Scalar> TransformerEncoder<S> {
    pub fn new(
        cfg: AttentionConfig,
        n_layers: usize,
        mlp_ratio: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|_| TransformerLayer::new(cfg, mlp_ratio, n_layers, trainable, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(TransformerEncoder { layers })
    }

    pub fn forward(&self, tokens: &Tensor<S>, ctx: &mut FwdCtx) -> Result<Tensor<S>> {
        let mut x = tokens.clone();
        for layer in &self.layers {
            x = layer.forward(&x, ctx)?;
        }
        Ok(x)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect(&format!("{prefix}.block{i}"), out);
        }
    }
}

// ── Perceiver resampler ─────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct PerceiverResamplerConfig {
    pub n_latents: usize,
    pub n_blocks: usize,
    pub attn: AttentionConfig,
    pub mlp_ratio: usize,
}

impl PerceiverResamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_latents == 0 || self.n_blocks == 0 {
            return Err(CoreError::Config(
                "resampler needs n_latents >= 1 and n_blocks >= 1".into(),
            ));
        }
        self.attn.validate()
    }
}

struct ResamplerBlock<S: Scalar> {
    q_ln: LayerNorm<S>,
    kv_ln: LayerNorm<S>,
    attn: Mha<S>,
    mlp_ln: LayerNorm<S>,
    mlp: Mlp<S>,
}

/// Learned latent queries refined by cross-attention over an
/// arbitrary-length input sequence; output length is always `n_latents`.
pub struct PerceiverResampler<S: Scalar> {
    latents: Tensor<S>,
    blocks: Vec<ResamplerBlock<S>>,
    dropout_p: f64,
}

impl<S: Scalar> PerceiverResampler<S> {
    pub fn new(cfg: PerceiverResamplerConfig, trainable: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.attn.d_model;
        let out_std = INIT_STD / (2.0 * cfg.n_blocks as f64).sqrt();
        let blocks = (0..cfg.n_blocks)
            .map(|_| {
                Ok(ResamplerBlock {
                    q_ln: LayerNorm::new(d, trainable),
                    kv_ln: LayerNorm::new(d, trainable),
                    attn: Mha::new(cfg.attn, out_std, trainable, rng)?,
                    mlp_ln: LayerNorm::new(d, trainable),
                    mlp: Mlp::new(d, cfg.mlp_ratio, out_std, trainable, rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PerceiverResampler {
            latents: new_weight(&[cfg.n_latents, d], INIT_STD, trainable, rng),
            blocks,
            dropout_p: cfg.attn.dropout_p,
        })
    }

    pub fn n_latents(&self) -> usize {
        self.latents.shape()[0]
    }

    /// `inputs` is `[b, s, d]` with `s >= 1`; `mask` optionally hides
    /// padding key positions (additive `[b, 1, 1, s]`).
    pub fn forward(
        &self,
        inputs: &Tensor<S>,
        mask: Option<&Tensor<S>>,
        ctx: &mut FwdCtx,
    ) -> Result<Tensor<S>> {
        let shape = inputs.shape();
        if shape.len() != 3 || shape[1] == 0 {
            return Err(CoreError::InvalidArgument(format!(
                "resampler expects [b, s >= 1, d] inputs, got {shape:?}"
            )));
        }
        let b = shape[0];
        let mut x = self.latents.expand_front(b);
        for block in &self.blocks {
            let branch = block.attn.forward(
                &block.q_ln.forward(&x)?,
                &block.kv_ln.forward(inputs)?,
                mask,
                ctx,
            )?;
            x = x.add(&ctx.dropout(branch, self.dropout_p)?)?;
            let branch = block.mlp.forward(&block.mlp_ln.forward(&x)?)?;
            x = x.add(&ctx.dropout(branch, self.dropout_p)?)?;
        }
        Ok(x)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        push_param(out, prefix, "latents", &self.latents);
        for (i, block) in self.blocks.iter().enumerate() {
            let p = format!("{prefix}.block{i}");
            block.q_ln.collect(&format!("{p}.q_ln"), out);
            block.kv_ln.collect(&format!("{p}.kv_ln"), out);
            block.attn.collect(&format!("{p}.attn"), out);
            block.mlp_ln.collect(&format!("{p}.mlp_ln"), out);
            block.mlp.collect(&format!("{p}.mlp"), out);
        }
    }
}

// ── AdaLN-Zero ──────────────────────────────────────────────────────

/// Shift/scale/gate vectors of width `d_model` derived from a conditioning
/// embedding. The gate projection is zero-initialized so modulated branches
/// start as exact identities.
pub struct AdaLNState<S: Scalar> {
    pub shift: Tensor<S>,
    pub scale: Tensor<S>,
    pub gate: Tensor<S>,
}

/// Projects a conditioning embedding `[b, d]` into an [`AdaLNState`].
pub struct AdaLNProjection<S: Scalar> {
    proj: Linear<S>,
    d: usize,
}

impl<S: Scalar> AdaLNProjection<S> {
    pub fn new(d: usize) -> Self {
        // Zero init: shift = scale = gate = 0 at the start of training.
        AdaLNProjection {
            proj: Linear::zeros(d, 3 * d),
            d,
        }
    }

    pub fn forward(&self, cond: &Tensor<S>) -> Result<AdaLNState<S>> {
        let b = cond.shape()[0];
        let all = self.proj.forward(&cond.gelu())?; // [b, 3d]
        let take = |i: usize| -> Result<Tensor<S>> {
            all.slice_axis(1, i * self.d, self.d)?.reshape(&[b, 1, self.d])
        };
        Ok(AdaLNState {
            shift: take(0)?,
            scale: take(1)?,
            gate: take(2)?,
        })
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        self.proj.collect(&format!("{prefix}.proj"), out);
    }
}

/// `x + gate * branch(LN(x) * (1 + scale) + shift)`; exact identity while
/// the gate is zero.
pub fn adaln_modulate<S: Scalar>(
    x: &Tensor<S>,
    ln: &LayerNorm<S>,
    state: &AdaLNState<S>,
    branch: impl FnOnce(&Tensor<S>) -> Result<Tensor<S>>,
) -> Result<Tensor<S>> {
    let normed = ln.forward(x)?;
    let modulated = normed.mul(&state.scale.affine(1.0, 1.0))?.add(&state.shift)?;
    let y = branch(&modulated)?;
    x.add(&y.mul(&state.gate)?)
}

/// Sinusoidal features of a scalar in `[0, 1]`, width `d`, frequencies
/// log-spaced in `[1, 10^4]`. Pure data (no gradient).
pub fn sinusoidal_features<S: Scalar>(values: &[S], d: usize) -> Tensor<S> {
    let half = d / 2;
    let mut data = Vec::with_capacity(values.len() * d);
    for &v in values {
        let x = v.to_f64_lossy();
        for i in 0..half {
            let freq = (10_000f64).powf(i as f64 / (half.max(2) - 1) as f64);
            data.push(c::<S>((freq * x).sin()));
        }
        for i in 0..d - half {
            let freq = (10_000f64).powf(i as f64 / (half.max(2) - 1) as f64);
            data.push(c::<S>((freq * x).cos()));
        }
    }
    Tensor::from_vec(data, &[values.len(), d]).expect("sized above")
}

/// Fixed sinusoidal position table `[len, d]` (transformer convention).
pub fn sinusoidal_positions<S: Scalar>(len: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let rate = (10_000f64).powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data.push(c::<S>(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_vec(data, &[len, d]).expect("sized above")
}

/// Additive attention mask from per-position validity: 0 where valid,
/// -1e9 where padded. Shape `[b, 1, 1, s]`.
pub fn padding_mask<S: Scalar>(valid: &[Vec<bool>]) -> Result<Tensor<S>> {
    let b = valid.len();
    let s = valid.first().map_or(0, |v| v.len());
    let mut data = Vec::with_capacity(b * s);
    for row in valid {
        if row.len() != s {
            return Err(CoreError::InvalidArgument(
                "ragged padding mask rows".into(),
            ));
        }
        for &ok in row {
            data.push(if ok { S::zero() } else { c::<S>(-1e9) });
        }
    }
    Tensor::from_vec(data, &[b, 1, 1, s])
}
