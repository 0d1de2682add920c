//! Stage 1: supervised alignment.
//!
//! Per example, with the reference trajectory split into `pre ++ block ++
//! post` and the block `LS LP*k LE`:
//!
//! * `l_text_pre`  – mean cross-entropy over the `pre` tokens and `LS`;
//! * `l_text_post` – mean cross-entropy over `LE` and the `post` tokens;
//! * `l_3d`        – mean squared error between the projected latent states
//!   (hidden states at the `k` pads) and the cached teacher features.
//!
//! Interior pads carry no cross-entropy term. `l_text = pre + post` and
//! `l_total = lambda_3d * l_3d + lambda_text * l_text`.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use think3d_autograd::{AdamW, Gradients, Graph, ParamStore, Tensor, Var, WarmupCosine};

use crate::checkpoint::{CheckpointManifest, Retention};
use crate::error::{Error, Result};
use crate::model::Models;
use crate::task::{mix_seed, TrainingExample};
use crate::trajectory::decompose_trajectory;
use crate::vocab::{SpecialTokenSet, TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_3d: f64,
    /// Unnormalised squared Frobenius distance, logged for reference.
    pub l_3d_sum: f64,
    pub l_text_pre: f64,
    pub l_text_post: f64,
    pub l_text: f64,
    pub l_total: f64,
    pub lambda_3d: f64,
    pub lambda_text: f64,
}

impl LossBreakdown {
    /// Assembles the composite terms from the components.
    pub fn compose(l_3d: f64, l_3d_sum: f64, pre: f64, post: f64, lambda_3d: f64, lambda_text: f64) -> Self {
        let l_text = pre + post;
        Self {
            l_3d,
            l_3d_sum,
            l_text_pre: pre,
            l_text_post: post,
            l_text,
            l_total: lambda_3d * l_3d + lambda_text * l_text,
            lambda_3d,
            lambda_text,
        }
    }

    /// Whether the decomposition identities hold bit-for-bit.
    pub fn identities_hold(&self) -> bool {
        self.l_text == self.l_text_pre + self.l_text_post
            && self.l_total == self.lambda_3d * self.l_3d + self.lambda_text * self.l_text
    }

    pub fn is_finite(&self) -> bool {
        [self.l_3d, self.l_text_pre, self.l_text_post, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean-square alignment loss.
pub fn loss_3d(proj: &Tensor, teacher: &Tensor) -> Result<f64> {
    if proj.shape() != teacher.shape() {
        return Err(Error::ShapeMismatch(format!(
            "projected {:?} vs teacher {:?}",
            proj.shape(),
            teacher.shape()
        )));
    }
    let s: f64 = proj.data.iter().zip(&teacher.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / proj.len().max(1) as f64)
}

/// Trajectory indices supervised by each text stream, and the pad indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Supervision {
    pub pre: Vec<usize>,
    pub post: Vec<usize>,
    pub pads: Vec<usize>,
}

pub fn supervision(tokens: &[TokenId], sp: &SpecialTokenSet) -> Result<Supervision> {
    let traj = crate::trajectory::ReasoningTrajectory::new(tokens.to_vec(), sp);
    let d = decompose_trajectory(&traj, sp)?;
    if d.latent.is_empty() {
        return Ok(Supervision {
            pre: (0..tokens.len()).collect(),
            post: Vec::new(),
            pads: Vec::new(),
        });
    }
    let ls = d.pre.len();
    let le = ls + d.latent.len() - 1;
    Ok(Supervision {
        pre: (0..=ls).collect(),
        post: (le..tokens.len()).collect(),
        pads: (ls + 1..le).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_3d: f64,
    pub lambda_text: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_3d: 0.1,
            lambda_text: 1.0,
        }
    }
}

/// Records the stage-1 loss of one example on `g`.
///
/// `targets` overrides the supervision labels (defaults to the trajectory
/// itself); inputs are always the trajectory tokens.
pub fn example_loss(
    g: &mut Graph,
    models: &Models,
    example: &TrainingExample,
    question: &[TokenId],
    targets: Option<&[TokenId]>,
    weights: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let sp = Vocab::standard().specials();
    let traj = &example.reference_trajectory.tokens;
    let targets = targets.unwrap_or(traj);
    if targets.len() != traj.len() {
        return Err(Error::ShapeMismatch("targets and trajectory differ in length".into()));
    }
    let sup = supervision(traj, &sp)?;
    let mut text = question.to_vec();
    text.extend_from_slice(traj);
    let fw = models.vlm.forward(g, &example.views, &text)?;
    let start = fw.text_offset + question.len();

    // Logits at position j predict the token at j + 1.
    let stream = |g: &mut Graph, idx: &[usize]| -> Var {
        let rows: Vec<usize> = idx.iter().map(|&i| start + i - 1).collect();
        let logits = models.vlm.logits(g, fw.hidden, &rows);
        let local: Vec<usize> = (0..idx.len()).collect();
        let tg: Vec<TokenId> = idx.iter().map(|&i| targets[i]).collect();
        g.cross_entropy(logits, &local, &tg)
    };
    let pre = stream(g, &sup.pre);
    let post = stream(g, &sup.post);

    let teacher = example.teacher.to_tensor();
    let (l3, l3_sum) = if sup.pads.is_empty() {
        (g.input(Tensor::scalar(0.0)), 0.0)
    } else {
        let pad_rows: Vec<usize> = sup.pads.iter().map(|&i| start + i).collect();
        let latents = g.select_rows(fw.hidden, &pad_rows);
        let proj = models.projector.project(g, latents, fw.image_features)?;
        if g.value(proj).shape() != teacher.shape() {
            return Err(Error::ShapeMismatch(format!(
                "projected {:?} vs teacher {:?}",
                g.value(proj).shape(),
                teacher.shape()
            )));
        }
        let l = g.mse_const(proj, &teacher);
        (l, g.value(l).item() * teacher.len() as f64)
    };

    let text_sum = g.add(pre, post);
    let a = g.scale(l3, weights.lambda_3d);
    let b = g.scale(text_sum, weights.lambda_text);
    let total = g.add(a, b);
    let br = LossBreakdown::compose(
        g.value(l3).item(),
        l3_sum,
        g.value(pre).item(),
        g.value(post).item(),
        weights.lambda_3d,
        weights.lambda_text,
    );
    debug_assert_eq!(br.l_total.to_bits(), g.value(total).item().to_bits());
    Ok((total, br))
}

/// `(l_text_pre, l_text_post)` of one example.
pub fn loss_text(models: &Models, params: &ParamStore, example: &TrainingExample) -> Result<(f64, f64)> {
    let b = loss_total(models, params, example, LossWeights::default())?;
    Ok((b.l_text_pre, b.l_text_post))
}

pub fn loss_total(
    models: &Models,
    params: &ParamStore,
    example: &TrainingExample,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    let q = Vocab::standard().encode(&example.question.prompt())?;
    let mut g = Graph::new(params);
    Ok(example_loss(&mut g, models, example, &q, None, weights)?.1)
}

/// Loss and parameter gradients of one example.
pub fn loss_and_grad(
    models: &Models,
    params: &ParamStore,
    example: &TrainingExample,
    question: &[TokenId],
    weights: LossWeights,
) -> Result<(LossBreakdown, Gradients)> {
    let mut g = Graph::new(params);
    let (total, br) = example_loss(&mut g, models, example, question, None, weights)?;
    Ok((br, g.backward(total)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of steps spent in linear warmup.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Checkpoint interval in steps; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-4,
            warmup_frac: 0.05,
            weight_decay: 0.01,
            grad_clip: 1.0,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl SftConfig {
    pub fn schedule(&self) -> WarmupCosine {
        WarmupCosine {
            peak_lr: self.lr,
            warmup: (self.warmup_frac * self.steps as f64).round() as u64,
            total: self.steps,
        }
    }
}

/// Example indices for `step`: epoch-wise permutations seeded by
/// `(seed, epoch)`, so the order depends on nothing but the step number.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch as u64 {
        let global = step * batch as u64 + j;
        let epoch = global / n as u64;
        if cached.as_ref().map_or(true, |c| c.0 != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch)));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("permutation cached").1[(global % n as u64) as usize]);
    }
    out
}

/// Parameters and optimizer state carried across steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore,
    pub optimizer: AdamW,
    /// Completed optimizer steps.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_time: f64,
    pub config_hash: String,
}

/// Where a run writes metrics and checkpoints.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub config_hash: String,
    pub model_hash: String,
}

impl RunOutput {
    pub(crate) fn append_metric<T: Serialize>(&self, file: &str, rec: &T) -> Result<()> {
        let path = self.dir.join(file);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut line = serde_json::to_vec(rec)?;
        line.push(b'\n');
        f.write_all(&line).map_err(|e| Error::io(&path, e))
    }

    pub fn retention(&self) -> Retention {
        Retention {
            root: self.dir.join("checkpoints"),
        }
    }
}

/// Runs stage 1 from `state.step` up to `cfg.steps`. Both the model and
/// projector parameters are updated.
pub fn train_sft(
    models: &Models,
    state: &mut TrainState,
    data: &[TrainingExample],
    cfg: &SftConfig,
    out: Option<&RunOutput>,
) -> Result<Vec<SftRecord>> {
    train_sft_until(models, state, data, cfg, out, cfg.steps)
}

/// Like [`train_sft`] but stops (with a checkpoint) after step `until`; the
/// schedule still spans `cfg.steps`, so a later resume continues the same run.
pub fn train_sft_until(
    models: &Models,
    state: &mut TrainState,
    data: &[TrainingExample],
    cfg: &SftConfig,
    out: Option<&RunOutput>,
    until: u64,
) -> Result<Vec<SftRecord>> {
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let vocab = Vocab::standard();
    let prompts: Vec<Vec<TokenId>> = data
        .iter()
        .map(|e| vocab.encode(&e.question.prompt()))
        .collect::<Result<_>>()?;
    let schedule = cfg.schedule();
    let started = Instant::now();
    let mut records = Vec::new();
    let mut since_ckpt = Vec::new();
    let hash = out.map(|o| o.config_hash.clone()).unwrap_or_default();
    if let Some(o) = out {
        std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
    }
    let stop = until.min(cfg.steps);
    while state.step < stop {
        let step = state.step;
        let idx = batch_indices(cfg.seed, step, cfg.batch_size, data.len());
        let mut grads = Gradients::zeros_like(&state.params);
        let (mut l3, mut l3s, mut pre, mut post) = (0.0, 0.0, 0.0, 0.0);
        let inv = 1.0 / idx.len() as f64;
        for &i in &idx {
            let (br, g) = loss_and_grad(models, &state.params, &data[i], &prompts[i], cfg.weights)?;
            if !br.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            grads.accumulate(&g, inv);
            l3 += br.l_3d * inv;
            l3s += br.l_3d_sum * inv;
            pre += br.l_text_pre * inv;
            post += br.l_text_post * inv;
        }
        let loss = LossBreakdown::compose(l3, l3s, pre, post, cfg.weights.lambda_3d, cfg.weights.lambda_text);
        if !grads.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grad_norm = if cfg.grad_clip > 0.0 {
            grads.clip_global_norm(cfg.grad_clip)
        } else {
            grads.global_norm()
        };
        let lr = schedule.lr(step);
        state.optimizer.update(&mut state.params, &grads, lr, |_| true);
        state.step += 1;

        let rec = SftRecord {
            step,
            loss,
            lr,
            grad_norm,
            wall_time: started.elapsed().as_secs_f64(),
            config_hash: hash.clone(),
        };
        since_ckpt.push(loss.l_total);
        if let Some(o) = out {
            o.append_metric("sft_metrics.jsonl", &rec)?;
            let due = cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0;
            if due || state.step == stop {
                let score = -since_ckpt.iter().sum::<f64>() / since_ckpt.len() as f64;
                since_ckpt.clear();
                o.retention().save(
                    &state.params,
                    Some(&state.optimizer),
                    CheckpointManifest {
                        version: 0,
                        stage: "sft".into(),
                        step: state.step,
                        config_hash: o.config_hash.clone(),
                        model_hash: o.model_hash.clone(),
                        tensors: Vec::new(),
                        optimizer: None,
                        score: Some(score),
                    },
                )?;
            }
        }
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_3d_definition() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(loss_3d(&a, &a).unwrap(), 0.0);
        let b = Tensor::from_vec(2, 3, a.data.iter().map(|v| v + 1.0).collect());
        assert_eq!(loss_3d(&a, &b).unwrap(), 1.0);
        assert!(loss_3d(&a, &Tensor::zeros(3, 2)).is_err());
    }

    #[test]
    fn composite_arithmetic() {
        let b = LossBreakdown::compose(2.0, 0.0, 1.0, 2.0, 0.1, 1.0);
        assert!((b.l_total - 3.2).abs() < 1e-12);
        assert!(b.identities_hold());
        let b = LossBreakdown::compose(2.0, 0.0, 1.25, 0.5, 0.0, 1.0);
        assert_eq!(b.l_total, b.l_text);
    }

    #[test]
    fn supervision_splits_around_block() {
        let sp = Vocab::standard().specials();
        let t = vec![7, sp.latent_start, sp.latent_pad, sp.latent_pad, sp.latent_end, 8, 9];
        let s = supervision(&t, &sp).unwrap();
        assert_eq!(s.pre, vec![0, 1]);
        assert_eq!(s.pads, vec![2, 3]);
        assert_eq!(s.post, vec![4, 5, 6]);
    }

    #[test]
    fn batches_are_stateless_permutations() {
        let a: Vec<usize> = (0..5).flat_map(|s| batch_indices(3, s, 4, 10)).collect();
        let mut first_epoch = a[..10].to_vec();
        first_epoch.sort();
        assert_eq!(first_epoch, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, 2, 4, 10), a[8..12]);
    }
}
