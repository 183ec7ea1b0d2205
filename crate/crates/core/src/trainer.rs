//! Optimization loop: batches of (observation, action chunk, progress
//! target) drive the total objective; AdamW with warmup-cosine decay,
//! global-norm clipping, and an EMA of the trainable parameters. All
//! per-step randomness derives from `(seed, step)`, so runs resume and
//! replay bit-identically.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::chainworld::Dataset;
use crate::checkpoint::{snapshot_params, Checkpoint, ParamBlob, CHECKPOINT_VERSION};
use crate::config::{Ablation, RunConfig, TrainConfig};
use crate::error::{CoreError, Result};
use crate::expert::{fm_loss_of_sample, normalize_action, sample_flow, Policy, A_DIM};
use crate::nn::{FwdCtx, ParamList};
use crate::progress::{loss_q, loss_s, loss_v, progress_target, total_loss};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Real;

pub const METRICS_HEADER: &str =
    "step,loss_total,loss_fm,loss_q,loss_v,loss_s,mean_w_a,mean_w_s,grad_norm,lr";

/// Linear warmup to `lr_init`, then cosine decay to `lr_final`.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_steps;
    if step < warmup {
        return cfg.lr_init * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return cfg.lr_init;
    }
    let progress = ((step - warmup) as f64 / (total_steps - warmup) as f64).clamp(0.0, 1.0);
    cfg.lr_final
        + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Flat index over all (episode, t) pairs with `t <= T - 1`.
pub struct ChunkIndex {
    cum: Vec<usize>,
}

impl ChunkIndex {
    pub fn new(ds: &Dataset) -> Result<Self> {
        if ds.episodes.is_empty() {
            return Err(CoreError::Dataset("empty dataset".into()));
        }
        let mut cum = Vec::with_capacity(ds.episodes.len());
        let mut total = 0usize;
        for ep in &ds.episodes {
            total += ep.t;
            cum.push(total);
        }
        Ok(ChunkIndex { cum })
    }

    pub fn total(&self) -> usize {
        *self.cum.last().unwrap()
    }

    /// Map a flat draw to (episode, step-within-episode).
    pub fn locate(&self, flat: usize) -> (usize, usize) {
        let ep = self.cum.partition_point(|&c| c <= flat);
        let base = if ep == 0 { 0 } else { self.cum[ep - 1] };
        (ep, flat - base)
    }
}

/// One training batch: borrowed observations plus chunk/progress tensors.
pub struct ChunkBatch<'a> {
    pub obs: Vec<crate::encoder::ObsRef<'a>>,
    /// Normalized action chunks `[b, H, 3]` (padded by last-action repeat).
    pub chunk: Tensor<Real>,
    /// Per-step validity (false on padded steps).
    pub valid: Vec<Vec<bool>>,
    /// Normalized first action of each chunk `[b, 3]`.
    pub a_first: Tensor<Real>,
    pub r_t: Vec<f64>,
    pub y_succ: Vec<bool>,
}

/// Uniform over (episode, t) pairs; chunks crossing the episode end repeat
/// the final action with a validity mask.
pub fn sample_batch<'a>(
    ds: &'a Dataset,
    index: &ChunkIndex,
    cfg: &RunConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<ChunkBatch<'a>> {
    use rand::Rng;
    let b = cfg.train.batch_size;
    let h = cfg.model.horizon;
    let mut obs = Vec::with_capacity(b);
    let mut chunk = Vec::with_capacity(b * h * A_DIM);
    let mut valid = Vec::with_capacity(b);
    let mut a_first = Vec::with_capacity(b * A_DIM);
    let mut r_t = Vec::with_capacity(b);
    let mut y_succ = Vec::with_capacity(b);
    for _ in 0..b {
        let flat = rng.random_range(0..index.total());
        let (ep_ix, t) = index.locate(flat);
        let ep = &ds.episodes[ep_ix];
        obs.push(crate::encoder::ObsRef {
            agent: &ep.observations.agent[t],
            wrist: &ep.observations.wrist[t],
            proprio: [
                ep.observations.proprio[t][0],
                ep.observations.proprio[t][1],
                ep.observations.proprio[t][2],
                ep.observations.proprio[t][3],
            ],
            instruction_ids: &ep.instruction_ids,
        });
        let mut row_valid = vec![false; h];
        for step in 0..h {
            let src = t + step;
            let (a, ok) = if src < ep.t {
                (&ep.actions[src], true)
            } else {
                (&ep.actions[ep.t - 1], false)
            };
            row_valid[step] = ok;
            chunk.extend(normalize_action(a).map(Real::from));
        }
        valid.push(row_valid);
        a_first.extend(normalize_action(&ep.actions[t]).map(Real::from));
        let target = progress_target(t, ep.t, &cfg.loss)?;
        r_t.push(target.r);
        y_succ.push(target.y_succ);
    }
    Ok(ChunkBatch {
        obs,
        chunk: Tensor::from_vec(chunk, &[b, h, A_DIM])?,
        valid,
        a_first: Tensor::from_vec(a_first, &[b, A_DIM])?,
        r_t,
        y_succ,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_total: f64,
    pub loss_fm: f64,
    pub loss_q: f64,
    pub loss_v: f64,
    pub loss_s: f64,
    pub mean_w_a: f64,
    pub mean_w_s: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_total,
            self.loss_fm,
            self.loss_q,
            self.loss_v,
            self.loss_s,
            self.mean_w_a,
            self.mean_w_s,
            self.grad_norm,
            self.lr
        )
    }
}

pub struct Trainer {
    pub policy: Policy<Real>,
    pub cfg: RunConfig,
    trainable: ParamList<Real>,
    decay: Vec<bool>,
    opt_m: Vec<Vec<Real>>,
    opt_v: Vec<Vec<Real>>,
    ema: Vec<Vec<Real>>,
    pub step: usize,
    pub total_steps: usize,
}

fn decays(name: &str) -> bool {
    // everything except layer norms, biases, and latent queries
    !(name.ends_with(".bias") || name.ends_with(".gain") || name.ends_with(".latents"))
}

impl Trainer {
    pub fn new(cfg: &RunConfig, dataset: &Dataset) -> Result<Self> {
        let cfg = cfg.clone().resolved()?;
        let with_heads = cfg.train.ablation != Ablation::NoProgress;
        let policy = Policy::<Real>::new(&cfg.model, cfg.env.grid, with_heads, cfg.train.seed)?;
        Self::wrap(policy, cfg, dataset, 0, None)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dataset: &Dataset) -> Result<Self> {
        let policy = ckpt.build_policy(false)?;
        Self::wrap(policy, ckpt.config.clone(), dataset, ckpt.step, Some(ckpt))
    }

    fn wrap(
        policy: Policy<Real>,
        cfg: RunConfig,
        dataset: &Dataset,
        step: usize,
        restore: Option<&Checkpoint>,
    ) -> Result<Self> {
        let index = ChunkIndex::new(dataset)?;
        let total_steps = cfg.train.resolve_steps(index.total());
        let trainable: ParamList<Real> = policy
            .collect()
            .into_iter()
            .filter(|p| p.trainable())
            .collect();
        let decay = trainable.iter().map(|p| decays(&p.name)).collect();
        let mut opt_m = Vec::with_capacity(trainable.len());
        let mut opt_v = Vec::with_capacity(trainable.len());
        let mut ema = Vec::with_capacity(trainable.len());
        for p in &trainable {
            let n = p.tensor.numel();
            match restore {
                Some(ck) => {
                    let fetch = |map: &BTreeMap<String, Vec<Real>>| -> Result<Vec<Real>> {
                        map.get(&p.name).cloned().ok_or_else(|| {
                            CoreError::Checkpoint(format!("missing optimizer state for {}", p.name))
                        })
                    };
                    opt_m.push(fetch(&ck.opt_m)?);
                    opt_v.push(fetch(&ck.opt_v)?);
                    ema.push(fetch(&ck.ema)?);
                }
                None => {
                    opt_m.push(vec![0.0; n]);
                    opt_v.push(vec![0.0; n]);
                    ema.push(p.tensor.to_vec());
                }
            }
        }
        Ok(Trainer {
            policy,
            cfg,
            trainable,
            decay,
            opt_m,
            opt_v,
            ema,
            step,
            total_steps,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// One optimization step: forward, Eq.-6 style total loss, backward,
    /// clip, AdamW, EMA.
    pub fn train_step(&mut self, ds: &Dataset, index: &ChunkIndex) -> Result<StepMetrics> {
        let step = self.step;
        let cfg = &self.cfg;
        let mut rng = stream(cfg.train.seed, "step", step as u64);
        let batch = sample_batch(ds, index, cfg, &mut rng)?;
        let flow = sample_flow(&batch.chunk, &mut rng);

        for p in &self.trainable {
            p.tensor.zero_grad();
        }

        let mut fwd = FwdCtx::train(rng);
        let obs_batch = self.policy.encode_observations(&batch.obs)?;
        let ctx = self.policy.encoder.encode(&obs_batch, &mut fwd)?;
        let fm = fm_loss_of_sample(&self.policy.expert, &ctx, &flow, &batch.valid, &mut fwd)?;
        let fm_mean = mean_f64(&fm.to_f64_vec());

        let no_progress = cfg.train.ablation == Ablation::NoProgress;
        let (total, lq_v, lv_v, ls_v, w_a, w_s) = if no_progress {
            let b = batch.r_t.len();
            let total = total_loss(&fm, &vec![1.0; b], &vec![1.0; b], None, &cfg.loss)?;
            (total, 0.0, 0.0, 0.0, vec![1.0; b], vec![1.0; b])
        } else {
            let heads = self.policy.heads.as_ref().expect("heads built unless ablated");
            let bundle = heads.bundle(&ctx.tokens, &batch.a_first, &batch.r_t, &cfg.loss, &mut fwd)?;
            let lq = loss_q(&bundle.q_hat, &batch.r_t)?;
            let lv = loss_v(&bundle.v_hat, &batch.r_t, cfg.loss.rho)?;
            let ls = loss_s(&bundle.s_logit, &batch.y_succ)?;
            let (lq_v, lv_v, ls_v) = (
                lq.item().to_f64_lossy(),
                lv.item().to_f64_lossy(),
                ls.item().to_f64_lossy(),
            );
            let total = total_loss(
                &fm,
                &bundle.w_a,
                &bundle.w_s,
                Some((&lv, &lq, &ls)),
                &cfg.loss,
            )?;
            (total, lq_v, lv_v, ls_v, bundle.w_a, bundle.w_s)
        };

        let loss_total = total.item().to_f64_lossy();
        if !loss_total.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "step {step}: loss_total = {loss_total} (loss_fm = {fm_mean}, \
                 loss_q = {lq_v}, loss_v = {lv_v}, loss_s = {ls_v})"
            )));
        }
        total.backward()?;

        // global-norm clip over trainable gradients
        let mut sq_sum = 0.0f64;
        let grads: Vec<Option<Vec<Real>>> = self.trainable.iter().map(|p| p.tensor.grad()).collect();
        for g in grads.iter().flatten() {
            for &x in g {
                sq_sum += (x as f64) * (x as f64);
            }
        }
        let raw_norm = sq_sum.sqrt();
        let scale = if raw_norm > cfg.train.clip_norm {
            cfg.train.clip_norm / raw_norm
        } else {
            1.0
        };
        let clipped_norm = raw_norm * scale;

        let lr = lr_schedule(step, self.total_steps, &cfg.train);
        let t = (step + 1) as f64;
        let b1 = cfg.train.adam_beta1;
        let b2 = cfg.train.adam_beta2;
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        let eps = 1e-8;
        let wd = cfg.train.weight_decay;
        let ema_decay = cfg.train.ema_decay;
        for (i, p) in self.trainable.iter().enumerate() {
            let m = &mut self.opt_m[i];
            let v = &mut self.opt_v[i];
            let shadow = &mut self.ema[i];
            let decay_here = if self.decay[i] { wd } else { 0.0 };
            let zero_grad;
            let g_slice: &[Real] = match &grads[i] {
                Some(g) => g,
                None => {
                    zero_grad = vec![0.0; p.tensor.numel()];
                    &zero_grad
                }
            };
            p.tensor.update_data(|data| {
                for j in 0..data.len() {
                    let g = (g_slice[j] as f64) * scale;
                    let mj = b1 * m[j] as f64 + (1.0 - b1) * g;
                    let vj = b2 * v[j] as f64 + (1.0 - b2) * g * g;
                    m[j] = mj as Real;
                    v[j] = vj as Real;
                    let m_hat = mj / bias1;
                    let v_hat = vj / bias2;
                    let mut x = data[j] as f64;
                    x -= lr * (m_hat / (v_hat.sqrt() + eps) + decay_here * x);
                    data[j] = x as Real;
                    shadow[j] =
                        (ema_decay * shadow[j] as f64 + (1.0 - ema_decay) * x) as Real;
                }
            });
        }

        self.step += 1;
        Ok(StepMetrics {
            step,
            loss_total,
            loss_fm: fm_mean,
            loss_q: lq_v,
            loss_v: lv_v,
            loss_s: ls_v,
            mean_w_a: mean_f64(&w_a),
            mean_w_s: mean_f64(&w_s),
            grad_norm: clipped_norm,
            lr,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ema = BTreeMap::new();
        let mut opt_m = BTreeMap::new();
        let mut opt_v = BTreeMap::new();
        for (i, p) in self.trainable.iter().enumerate() {
            ema.insert(p.name.clone(), self.ema[i].clone());
            opt_m.insert(p.name.clone(), self.opt_m[i].clone());
            opt_v.insert(p.name.clone(), self.opt_v[i].clone());
        }
        Checkpoint {
            version: CHECKPOINT_VERSION.to_string(),
            config: self.cfg.clone(),
            step: self.step,
            params: snapshot_params(&self.policy),
            ema,
            opt_m,
            opt_v,
            train_seed: self.cfg.train.seed,
        }
    }

    /// EMA shadow values by parameter name (tests and diagnostics).
    pub fn ema_by_name(&self) -> BTreeMap<String, Vec<Real>> {
        self.trainable
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), self.ema[i].clone()))
            .collect()
    }

    pub fn param_blobs(&self) -> BTreeMap<String, ParamBlob> {
        snapshot_params(&self.policy)
    }
}

fn mean_f64(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub struct RunArtifacts {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub final_step: usize,
}

/// Execute the step loop, streaming metrics to `run_dir/metrics.csv` and
/// checkpointing at intervals plus at the end. `resume` continues from a
/// stored checkpoint and reproduces exactly the metrics an uninterrupted
/// run would have produced from that step onward.
pub fn run(
    cfg: &RunConfig,
    dataset: &Dataset,
    run_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<RunArtifacts> {
    std::fs::create_dir_all(run_dir)?;
    let mut trainer = match resume {
        Some(ck) => Trainer::from_checkpoint(ck, dataset)?,
        None => Trainer::new(cfg, dataset)?,
    };
    // echo the effective config so the run directory is self-describing
    let echo = serde_json::to_string_pretty(&trainer.cfg)?;
    std::fs::write(run_dir.join("config.json"), echo)?;

    let index = ChunkIndex::new(dataset)?;
    let metrics_path = run_dir.join("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    writeln!(metrics, "{METRICS_HEADER}")?;

    let checkpoint_path = run_dir.join("checkpoint.json");
    let every = trainer.cfg.train.checkpoint_every;
    while trainer.step < trainer.total_steps {
        let m = trainer.train_step(dataset, &index)?;
        writeln!(metrics, "{}", m.csv_row())?;
        if every > 0 && trainer.step % every == 0 && trainer.step < trainer.total_steps {
            metrics.flush()?;
            trainer.to_checkpoint().save(&checkpoint_path)?;
        }
    }
    metrics.flush()?;
    trainer.to_checkpoint().save(&checkpoint_path)?;
    Ok(RunArtifacts {
        checkpoint_path,
        metrics_path,
        final_step: trainer.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chainworld::{generate_dataset, load_dataset, EnvConfig, TaskSpec};

    fn tiny_run_cfg() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.model.d_model = 32;
        cfg.model.n_heads = 4;
        cfg.model.pooler_heads = 4;
        cfg.model.expert_blocks = 2;
        cfg.model.horizon = 8;
        cfg.model.exec_horizon = 4;
        cfg.train.batch_size = 4;
        cfg.train.steps = Some(3);
        cfg.train.warmup_steps = 2;
        cfg.env.demos_per_task = 2;
        cfg.env.tasks = vec![TaskSpec::new(&[("red", "west")]).unwrap()];
        cfg
    }

    fn tiny_dataset(cfg: &RunConfig, dir: &Path) -> Dataset {
        let path = dir.join("ds.cwjsonl");
        generate_dataset(&cfg.env, cfg.model.horizon, &path).unwrap();
        load_dataset(&path).unwrap()
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, 5000, &cfg), 0.0);
        assert!((lr_schedule(500, 5000, &cfg) - 1e-4).abs() < 1e-18);
        assert!((lr_schedule(5000, 5000, &cfg) - 1e-6).abs() < 1e-18);
        // midpoint of decay: lr_final + 0.5 (lr_init - lr_final)
        let mid = lr_schedule(500 + 2250, 5000, &cfg);
        assert!((mid - (1e-6 + 0.5 * (1e-4 - 1e-6))).abs() < 1e-9);
    }

    #[test]
    fn chunk_sampling_is_length_proportional() {
        use rand::Rng;
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run_cfg();
        cfg.env.tasks = vec![
            TaskSpec::new(&[("red", "west")]).unwrap(),
            TaskSpec::new(&[("blue", "east"), ("green", "north")]).unwrap(),
        ];
        let ds = tiny_dataset(&cfg, dir.path());
        let index = ChunkIndex::new(&ds).unwrap();
        let total = index.total() as f64;
        let mut rng = stream(3, "multinomial", 0);
        let n = 100_000usize;
        let mut counts = vec![0usize; ds.episodes.len()];
        for _ in 0..n {
            let (ep, t) = index.locate(rng.random_range(0..index.total()));
            assert!(t < ds.episodes[ep].t);
            counts[ep] += 1;
        }
        for (ep, &c) in counts.iter().enumerate() {
            let p = ds.episodes[ep].t as f64 / total;
            let expected = n as f64 * p;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                ((c as f64) - expected).abs() <= 3.0 * sigma,
                "episode {ep}: {c} vs {expected:.1} (sigma {sigma:.1})"
            );
        }
    }

    #[test]
    fn chunk_padding_and_mask_at_episode_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_cfg();
        let ds = tiny_dataset(&cfg, dir.path());
        let ep = &ds.episodes[0];
        // hand-build a batch at t = T - 1
        let t = ep.t - 1;
        let h = cfg.model.horizon;
        let mut row_valid = vec![false; h];
        for step in 0..h {
            row_valid[step] = t + step < ep.t;
        }
        assert_eq!(row_valid.iter().filter(|&&v| v).count(), 1);
        // padded steps repeat the final action
        let last = normalize_action(&ep.actions[ep.t - 1]);
        assert!(last.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn training_runs_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_cfg();
        let ds = tiny_dataset(&cfg, dir.path());
        let run_a = run(&cfg, &ds, &dir.path().join("a"), None).unwrap();
        let run_b = run(&cfg, &ds, &dir.path().join("b"), None).unwrap();
        let a = std::fs::read(&run_a.metrics_path).unwrap();
        let b = std::fs::read(&run_b.metrics_path).unwrap();
        assert_eq!(a, b, "same seed must give identical metric files");
        assert_eq!(run_a.final_step, 3);
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run_cfg();
        cfg.train.steps = Some(4);
        let ds = tiny_dataset(&cfg, dir.path());
        let full = run(&cfg, &ds, &dir.path().join("full"), None).unwrap();

        let mut short_cfg = cfg.clone();
        short_cfg.train.steps = Some(2);
        run(&short_cfg, &ds, &dir.path().join("short"), None).unwrap();
        let ckpt = Checkpoint::load(&dir.path().join("short/checkpoint.json")).unwrap();
        assert_eq!(ckpt.step, 2);
        // raise the budget back to 4 and resume
        let mut resumed_ckpt = ckpt;
        resumed_ckpt.config.train.steps = Some(4);
        let resumed = run(&cfg, &ds, &dir.path().join("resumed"), Some(&resumed_ckpt)).unwrap();

        let full_rows: Vec<String> = std::fs::read_to_string(&full.metrics_path)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        let resumed_rows: Vec<String> = std::fs::read_to_string(&resumed.metrics_path)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        // resumed file: header + steps 2..4; must match the full run's tail
        assert_eq!(resumed_rows.len(), 3);
        assert_eq!(resumed_rows[1], full_rows[3]);
        assert_eq!(resumed_rows[2], full_rows[4]);
    }

    #[test]
    fn clip_bounds_gradient_norm_and_loss_is_finite() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_cfg();
        let ds = tiny_dataset(&cfg, dir.path());
        let index = ChunkIndex::new(&ds).unwrap();
        let mut trainer = Trainer::new(&cfg, &ds).unwrap();
        for _ in 0..2 {
            let m = trainer.train_step(&ds, &index).unwrap();
            assert!(m.grad_norm <= cfg.train.clip_norm + 1e-6);
            assert!(m.loss_total.is_finite());
            assert!(m.loss_fm >= 0.0);
        }
    }

    #[test]
    fn frozen_backbone_parameters_do_not_move() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run_cfg();
        cfg.train.ablation = Ablation::FrozenBackbone;
        let ds = tiny_dataset(&cfg, dir.path());
        let index = ChunkIndex::new(&ds).unwrap();
        let mut trainer = Trainer::new(&cfg, &ds).unwrap();
        let backbone_names = trainer.policy.encoder.backbone_param_names("encoder");
        let before: Vec<Vec<Real>> = trainer
            .policy
            .collect()
            .into_iter()
            .filter(|p| backbone_names.contains(&p.name))
            .map(|p| p.tensor.to_vec())
            .collect();
        assert!(!before.is_empty());
        for _ in 0..3 {
            trainer.train_step(&ds, &index).unwrap();
        }
        let after: Vec<Vec<Real>> = trainer
            .policy
            .collect()
            .into_iter()
            .filter(|p| backbone_names.contains(&p.name))
            .map(|p| p.tensor.to_vec())
            .collect();
        assert_eq!(before, after, "frozen backbone must stay bit-identical");
        // text embedding is always frozen
        let text_before: Vec<Real> = trainer
            .policy
            .collect()
            .into_iter()
            .find(|p| p.name.ends_with("text_embed"))
            .unwrap()
            .tensor
            .to_vec();
        trainer.train_step(&ds, &index).unwrap();
        let text_after: Vec<Real> = trainer
            .policy
            .collect()
            .into_iter()
            .find(|p| p.name.ends_with("text_embed"))
            .unwrap()
            .tensor
            .to_vec();
        assert_eq!(text_before, text_after);
    }

    #[test]
    fn no_progress_ablation_trains_without_heads() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run_cfg();
        cfg.train.ablation = Ablation::NoProgress;
        let ds = tiny_dataset(&cfg, dir.path());
        let index = ChunkIndex::new(&ds).unwrap();
        let mut trainer = Trainer::new(&cfg, &ds).unwrap();
        assert!(trainer.policy.heads.is_none());
        let m = trainer.train_step(&ds, &index).unwrap();
        assert_eq!(m.loss_q, 0.0);
        assert_eq!(m.loss_v, 0.0);
        assert_eq!(m.loss_s, 0.0);
        assert_eq!(m.mean_w_a, 1.0);
        assert_eq!(m.mean_w_s, 1.0);
    }

    #[test]
    fn ema_degenerate_decay_tracks_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run_cfg();
        cfg.train.ema_decay = 0.0;
        let ds = tiny_dataset(&cfg, dir.path());
        let index = ChunkIndex::new(&ds).unwrap();
        let mut trainer = Trainer::new(&cfg, &ds).unwrap();
        trainer.train_step(&ds, &index).unwrap();
        let ema = trainer.ema_by_name();
        for p in trainer.policy.collect().into_iter().filter(|p| p.trainable()) {
            assert_eq!(ema[&p.name], p.tensor.to_vec());
        }
    }
}
