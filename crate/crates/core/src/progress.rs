//! Progress supervision: the shaped temporal target, the Q/V/S heads and
//! their losses, the detached advantage/success weights, and the total
//! training objective that reweights the per-sample flow-matching loss.

use rand_chacha::ChaCha8Rng;

use crate::config::{LossConfig, ModelConfig, WeightMode};
use crate::error::{CoreError, Result};
use crate::expert::A_DIM;
use crate::nn::{
    AttentionConfig, FwdCtx, Linear, ParamList, PerceiverResampler, PerceiverResamplerConfig,
    INIT_STD,
};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Shaped progress target for step `t` of an episode ending at `terminal`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgressTarget {
    /// `max(0, 1 - (T - t) / T_M)`.
    pub r: f64,
    /// Fires when `r >= r_succ` (the final stretch of the demonstration).
    pub y_succ: bool,
}

pub fn progress_target(t: usize, terminal: usize, cfg: &LossConfig) -> Result<ProgressTarget> {
    if t > terminal {
        return Err(CoreError::InvalidArgument(format!(
            "step {t} beyond terminal index {terminal}"
        )));
    }
    let remaining = (terminal - t) as f64;
    let r = (1.0 - remaining / cfg.t_m as f64).max(0.0);
    Ok(ProgressTarget {
        r,
        y_succ: r >= cfg.r_succ(),
    })
}

/// Per-batch progress quantities. The advantage and success probability are
/// detached values; only the raw head outputs carry gradients.
pub struct ProgressBundle<S: Scalar> {
    pub q_hat: Tensor<S>,
    pub v_hat: Tensor<S>,
    pub s_logit: Tensor<S>,
    pub p_succ: Vec<f64>,
    pub adv: Vec<f64>,
    pub w_a: Vec<f64>,
    pub w_s: Vec<f64>,
}

/// The auxiliary heads: a state-action critic with its own Perceiver pooler,
/// and a shared value trunk feeding two scalar heads.
pub struct ProgressHeads<S: Scalar> {
    action_fc1: Linear<S>,
    action_fc2: Linear<S>,
    q_pooler: PerceiverResampler<S>,
    q_head: Linear<S>,
    value_pooler: PerceiverResampler<S>,
    v_head: Linear<S>,
    s_head: Linear<S>,
    d_model: usize,
}

impl<S: Scalar> ProgressHeads<S> {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_model;
        let pool_cfg = PerceiverResamplerConfig {
            n_latents: 1,
            n_blocks: 2,
            attn: AttentionConfig {
                d_model: d,
                n_heads: cfg.pooler_heads,
                dropout_p: cfg.dropout,
            },
            mlp_ratio: cfg.mlp_ratio,
        };
        Ok(ProgressHeads {
            action_fc1: Linear::new(A_DIM, d, INIT_STD, true, rng),
            action_fc2: Linear::new(d, d, INIT_STD, true, rng),
            q_pooler: PerceiverResampler::new(pool_cfg, true, rng)?,
            q_head: Linear::new(d, 1, INIT_STD, true, rng),
            value_pooler: PerceiverResampler::new(pool_cfg, true, rng)?,
            v_head: Linear::new(d, 1, INIT_STD, true, rng),
            s_head: Linear::new(d, 1, INIT_STD, true, rng),
            d_model: d,
        })
    }

    /// State-action critic: the first chunk action becomes one token,
    /// concatenated with the context tokens and pooled. Returns `[b]`.
    pub fn q_forward(
        &self,
        ctx: &Tensor<S>,
        a_first: &Tensor<S>,
        fwd: &mut FwdCtx,
    ) -> Result<Tensor<S>> {
        let b = ctx.shape()[0];
        if a_first.shape() != [b, A_DIM] {
            return Err(CoreError::shape("q_head", a_first.shape(), &[b, A_DIM]));
        }
        let tok = self
            .action_fc2
            .forward(&self.action_fc1.forward(a_first)?.gelu())?
            .reshape(&[b, 1, self.d_model])?;
        let joined = Tensor::concat(&[ctx, &tok], 1)?;
        let pooled = self.q_pooler.forward(&joined, None, fwd)?;
        self.q_head
            .forward(&pooled.reshape(&[b, self.d_model])?)?
            .reshape(&[b])
    }

    /// Value trunk: a shared pooler over the context tokens alone, then two
    /// independent scalar heads `(v_hat, s_logit)`, each `[b]`.
    pub fn value_forward(&self, ctx: &Tensor<S>, fwd: &mut FwdCtx) -> Result<(Tensor<S>, Tensor<S>)> {
        let b = ctx.shape()[0];
        let pooled = self
            .value_pooler
            .forward(ctx, None, fwd)?
            .reshape(&[b, self.d_model])?;
        let v = self.v_head.forward(&pooled)?.reshape(&[b])?;
        let s = self.s_head.forward(&pooled)?.reshape(&[b])?;
        Ok((v, s))
    }

    /// Full bundle: head outputs plus the detached weights.
    pub fn bundle(
        &self,
        ctx: &Tensor<S>,
        a_first: &Tensor<S>,
        r_t: &[f64],
        cfg: &LossConfig,
        fwd: &mut FwdCtx,
    ) -> Result<ProgressBundle<S>> {
        let q_hat = self.q_forward(ctx, a_first, fwd)?;
        let (v_hat, s_logit) = self.value_forward(ctx, fwd)?;
        let q = q_hat.to_f64_vec();
        let v = v_hat.to_f64_vec();
        let s = s_logit.to_f64_vec();
        let adv: Vec<f64> = q.iter().zip(v.iter()).map(|(a, b)| a - b).collect();
        let p_succ: Vec<f64> = s.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let (w_a, w_s) = weights(&adv, &p_succ, r_t, cfg);
        Ok(ProgressBundle {
            q_hat,
            v_hat,
            s_logit,
            p_succ,
            adv,
            w_a,
            w_s,
        })
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList<S>) {
        self.action_fc1.collect(&format!("{prefix}.action_fc1"), out);
        self.action_fc2.collect(&format!("{prefix}.action_fc2"), out);
        self.q_pooler.collect(&format!("{prefix}.q_pooler"), out);
        self.q_head.collect(&format!("{prefix}.q_head"), out);
        self.value_pooler.collect(&format!("{prefix}.value_pooler"), out);
        self.v_head.collect(&format!("{prefix}.v_head"), out);
        self.s_head.collect(&format!("{prefix}.s_head"), out);
    }
}

/// Mean Huber penalty of `q_hat - r_t` (delta 1, the smooth-L1 default).
/// Monte-Carlo targets only: no bootstrapping anywhere.
pub fn loss_q<S: Scalar>(q_hat: &Tensor<S>, r_t: &[f64]) -> Result<Tensor<S>> {
    let target = Tensor::from_vec(r_t.iter().map(|&v| c::<S>(v)).collect(), q_hat.shape())?;
    Ok(q_hat.sub(&target)?.huber(1.0).mean_all())
}

/// Expectile regression on the same target: weight `rho` on positive
/// residuals `r - v_hat`, `1 - rho` on negative (optimistic for rho > 0.5).
pub fn loss_v<S: Scalar>(v_hat: &Tensor<S>, r_t: &[f64], rho: f64) -> Result<Tensor<S>> {
    let target = Tensor::from_vec(r_t.iter().map(|&v| c::<S>(v)).collect(), v_hat.shape())?;
    Ok(target.sub(v_hat)?.expectile_sq(rho).mean_all())
}

/// Mean binary cross-entropy of the success logit against the
/// near-completion label.
pub fn loss_s<S: Scalar>(s_logit: &Tensor<S>, y_succ: &[bool]) -> Result<Tensor<S>> {
    let labels = Tensor::from_vec(
        y_succ.iter().map(|&y| if y { S::one() } else { S::zero() }).collect(),
        s_logit.shape(),
    )?;
    Ok(s_logit.bce_with_logits(&labels)?.mean_all())
}

/// Detached per-sample weights: `w_a = min(exp(adv / beta), C)` and
/// `w_s = 0.5 + 0.5 p_succ`. Under `rt_direct` the product is replaced by
/// `r_t`; under `uniform` both are 1.
pub fn weights(adv: &[f64], p_succ: &[f64], r_t: &[f64], cfg: &LossConfig) -> (Vec<f64>, Vec<f64>) {
    match cfg.weight_mode {
        WeightMode::AdvantageSuccess => (
            adv.iter()
                .map(|&a| (a / cfg.beta_temp).exp().min(cfg.clip_c))
                .collect(),
            p_succ.iter().map(|&p| 0.5 + 0.5 * p).collect(),
        ),
        WeightMode::RtDirect => (r_t.to_vec(), vec![1.0; adv.len()]),
        WeightMode::Uniform => (vec![1.0; adv.len()], vec![1.0; adv.len()]),
    }
}

/// Total objective: `mean(w_a w_s * l_FM) + lambda_V L_V + lambda_Q L_Q +
/// lambda_S L_S`. The weights enter as plain data (already detached).
pub fn total_loss<S: Scalar>(
    fm_per_sample: &Tensor<S>,
    w_a: &[f64],
    w_s: &[f64],
    aux: Option<(&Tensor<S>, &Tensor<S>, &Tensor<S>)>,
    cfg: &LossConfig,
) -> Result<Tensor<S>> {
    let w: Vec<S> = w_a
        .iter()
        .zip(w_s.iter())
        .map(|(&a, &s)| c::<S>(a * s))
        .collect();
    let w = Tensor::from_vec(w, fm_per_sample.shape())?;
    let mut total = fm_per_sample.mul(&w)?.mean_all();
    if let Some((lv, lq, ls)) = aux {
        total = total
            .add(&lv.affine(cfg.lambda_v, 0.0))?
            .add(&lq.affine(cfg.lambda_q, 0.0))?
            .add(&ls.affine(cfg.lambda_s, 0.0))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn paper_loss_cfg() -> LossConfig {
        LossConfig {
            t_m: 500,
            ..LossConfig::default()
        }
    }

    #[test]
    fn progress_target_formula() {
        let cfg = paper_loss_cfg();
        // r = 1 - 100/500 = 0.8
        let p = progress_target(20, 120, &cfg).unwrap();
        assert!((p.r - 0.8).abs() < 1e-12);
        assert!(!p.y_succ);
        // terminal step
        let p = progress_target(120, 120, &cfg).unwrap();
        assert_eq!(p.r, 1.0);
        assert!(p.y_succ);
        // clamp at zero when remaining exceeds the cap
        let p = progress_target(0, 600, &cfg).unwrap();
        assert_eq!(p.r, 0.0);
        // t > T rejected
        assert!(progress_target(5, 4, &cfg).is_err());
    }

    #[test]
    fn success_label_fires_on_final_17_steps() {
        let cfg = paper_loss_cfg();
        let terminal = 400;
        for t in 0..=terminal {
            let p = progress_target(t, terminal, &cfg).unwrap();
            assert_eq!(p.y_succ, terminal - t <= 17, "t={t}");
        }
        // desk cap keeps the same semantics
        let desk = LossConfig::default();
        assert!((desk.r_succ() - 0.915).abs() < 1e-12);
        for t in 0..=100 {
            let p = progress_target(t, 100, &desk).unwrap();
            assert_eq!(p.y_succ, 100 - t <= 17, "t={t}");
        }
    }

    #[test]
    fn weight_formulas() {
        let cfg = paper_loss_cfg();
        let (w_a, w_s) = weights(&[0.0, 2.0, -1.0], &[0.0, 1.0, 0.5], &[0.1, 0.2, 0.3], &cfg);
        assert!((w_a[0] - 1.0).abs() < 1e-12, "exp(0) = 1");
        assert!((w_a[1] - 20.0).abs() < 1e-12, "exp(4) clipped to C = 20");
        assert!((w_a[2] - (-2.0f64).exp()).abs() < 1e-12);
        assert!((w_s[0] - 0.5).abs() < 1e-12);
        assert!((w_s[1] - 1.0).abs() < 1e-12);
        assert!((w_s[2] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn weight_mode_variants() {
        let mut cfg = paper_loss_cfg();
        cfg.weight_mode = WeightMode::RtDirect;
        let (w_a, w_s) = weights(&[1.0], &[0.9], &[0.37], &cfg);
        assert_eq!((w_a[0], w_s[0]), (0.37, 1.0));
        cfg.weight_mode = WeightMode::Uniform;
        let (w_a, w_s) = weights(&[1.0], &[0.9], &[0.37], &cfg);
        assert_eq!((w_a[0], w_s[0]), (1.0, 1.0));
    }

    #[test]
    fn loss_kernel_values() {
        // q_hat = r -> 0; residual 0.5 -> 0.125
        let q = Tensor::<f64>::from_f64s(&[0.3], &[1]).unwrap();
        assert_eq!(loss_q(&q, &[0.3]).unwrap().item(), 0.0);
        let q = Tensor::<f64>::from_f64s(&[0.8], &[1]).unwrap();
        assert!((loss_q(&q, &[0.3]).unwrap().item() - 0.125).abs() < 1e-12);
        // expectile: residual +1 -> 0.8, residual -1 -> 0.2
        let v = Tensor::<f64>::from_f64s(&[0.0], &[1]).unwrap();
        assert!((loss_v(&v, &[1.0], 0.8).unwrap().item() - 0.8).abs() < 1e-12);
        let v = Tensor::<f64>::from_f64s(&[1.0], &[1]).unwrap();
        assert!((loss_v(&v, &[0.0], 0.8).unwrap().item() - 0.2).abs() < 1e-12);
        // bce: logit 0 label 1 -> ln 2
        let s = Tensor::<f64>::from_f64s(&[0.0], &[1]).unwrap();
        assert!((loss_s(&s, &[true]).unwrap().item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn rho_half_is_symmetric_mse() {
        // at rho exactly 0.5 the expectile penalty is 0.5 * squared error
        let v = Tensor::<f64>::from_f64s(&[0.0, 2.0], &[2]).unwrap();
        let loss = loss_v(&v, &[1.0, 1.0], 0.5).unwrap().item();
        assert!((loss - 0.5).abs() < 1e-12); // 0.5*(1^2*0.5 + 1^2*0.5)
    }

    #[test]
    fn total_loss_reduces_to_plain_fm_without_aux() {
        let fm = Tensor::<f64>::from_f64s(&[0.2, 0.6], &[2]).unwrap();
        let cfg = paper_loss_cfg();
        let loss = total_loss(&fm, &[1.0, 1.0], &[1.0, 1.0], None, &cfg).unwrap();
        assert!((loss.item() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn total_loss_paper_assembly() {
        let fm = Tensor::<f64>::from_f64s(&[1.0, 3.0], &[2]).unwrap();
        let lv = Tensor::<f64>::scalar(0.1);
        let lq = Tensor::<f64>::scalar(0.3);
        let ls = Tensor::<f64>::scalar(0.7);
        let cfg = paper_loss_cfg();
        let loss = total_loss(&fm, &[2.0, 1.0], &[0.5, 1.0], Some((&lv, &lq, &ls)), &cfg)
            .unwrap()
            .item();
        // mean(2*0.5*1, 1*1*3) + 0.5*0.1 + 1.0*0.3 + 0.2*0.7
        let expect = (1.0 + 3.0) / 2.0 + 0.05 + 0.3 + 0.14;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn heads_output_scalars_and_pass_gradcheck_shapes() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            pooler_heads: 2,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let mut rng = stream(41, "prog", 0);
        let heads = ProgressHeads::<f64>::new(&cfg, &mut rng).unwrap();
        let ctx = Tensor::randn(&[3, 4, 16], 1.0, &mut rng);
        let a = Tensor::randn(&[3, A_DIM], 1.0, &mut rng);
        let q = heads.q_forward(&ctx, &a, &mut FwdCtx::eval()).unwrap();
        assert_eq!(q.shape(), &[3]);
        let (v, s) = heads.value_forward(&ctx, &mut FwdCtx::eval()).unwrap();
        assert_eq!(v.shape(), &[3]);
        assert_eq!(s.shape(), &[3]);
        // Q pooler and value pooler are distinct parameter sets
        let mut params = Vec::new();
        heads.collect("heads", &mut params);
        let qp: Vec<_> = params.iter().filter(|p| p.name.contains("q_pooler")).collect();
        let vp: Vec<_> = params.iter().filter(|p| p.name.contains("value_pooler")).collect();
        assert!(!qp.is_empty() && qp.len() == vp.len());
        for (a, b) in qp.iter().zip(vp.iter()) {
            assert_ne!(a.tensor.id(), b.tensor.id());
        }
    }

    #[test]
    fn advantage_is_shift_invariant() {
        let cfg = paper_loss_cfg();
        let q = [0.5, 0.1];
        let v = [0.2, 0.3];
        for shift in [0.0, 1.0, -3.5, 100.0] {
            let adv: Vec<f64> = q
                .iter()
                .zip(v.iter())
                .map(|(a, b)| (a + shift) - (b + shift))
                .collect();
            let (w, _) = weights(&adv, &[0.5, 0.5], &[0.0, 0.0], &cfg);
            let base: Vec<f64> = q.iter().zip(v.iter()).map(|(a, b)| a - b).collect();
            let (w0, _) = weights(&base, &[0.5, 0.5], &[0.0, 0.0], &cfg);
            for (a, b) in w.iter().zip(w0.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn weight_ranges_hold(adv in proptest::collection::vec(-50.0f64..50.0, 1..8),
                              logits in proptest::collection::vec(-30.0f64..30.0, 1..8)) {
            let cfg = paper_loss_cfg();
            let n = adv.len().min(logits.len());
            let p: Vec<f64> = logits[..n].iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
            let r = vec![0.5; n];
            let (w_a, w_s) = weights(&adv[..n], &p, &r, &cfg);
            for &w in &w_a {
                prop_assert!(w > 0.0 && w <= cfg.clip_c);
            }
            for &w in &w_s {
                prop_assert!((0.5..=1.0).contains(&w));
            }
        }

        #[test]
        fn progress_is_nondecreasing_in_t(terminal in 1usize..400, split in 0.0f64..1.0) {
            let cfg = LossConfig::default();
            let t1 = (split * terminal as f64) as usize;
            let t2 = terminal;
            let p1 = progress_target(t1.min(terminal), terminal, &cfg).unwrap();
            let p2 = progress_target(t2, terminal, &cfg).unwrap();
            prop_assert!(p2.r >= p1.r);
        }
    }
}
