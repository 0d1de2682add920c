//! Stage 2: group-relative policy optimisation.
//!
//! For each question, `N` trajectories are sampled from the current policy.
//! Each earns `r_3d + r_format + r_ans` (weights configurable); the scalar is
//! broadcast to every sampled token and normalised within the group. The
//! update maximises
//!
//! ```text
//! (1/N) sum_i (1/|o_i|) sum_t [ min(clip(rho) A, rho A) - beta * KL_t ]
//! KL_t = kappa - ln kappa - 1,   kappa = pi_ref / pi_theta
//! ```
//!
//! Latent pads inserted by the decoder are not policy actions and are left
//! out of both the ratio terms and `|o_i|`. The projector is frozen.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use think3d_autograd::{policy_token_term, AdamW, Graph, ParamStore, PolicyTokens, Tensor};

use crate::checkpoint::{params_hash, CheckpointManifest};
use crate::error::{Error, Result};
use crate::model::{continue_generation, prefill, Generation, Models, SamplingSpec};
use crate::sft::RunOutput;
use crate::task::{mix_seed, Answer, TrainingExample};
use crate::trajectory::{validate_format, FormatGrammar, ReasoningTrajectory};
use crate::vocab::{TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_3d: f64,
    pub r_format: f64,
    pub r_ans: f64,
    pub total: f64,
}

/// Per-component reward weights; a zero weight removes that reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub r_3d: f64,
    pub r_format: f64,
    pub r_ans: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            r_3d: 1.0,
            r_format: 1.0,
            r_ans: 1.0,
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `(1 + cos(flatten(proj), flatten(teacher))) / 2`; 0.5 when either vector
/// is zero.
pub fn reward_3d(proj: &Tensor, teacher: &Tensor) -> Result<f64> {
    if proj.shape() != teacher.shape() {
        return Err(Error::ShapeMismatch(format!(
            "projected {:?} vs teacher {:?}",
            proj.shape(),
            teacher.shape()
        )));
    }
    Ok(match cosine(&proj.data, &teacher.data) {
        Some(c) => 0.5 * (1.0 + c),
        None => {
            log::warn!("degenerate vector in 3D reward; returning 0.5");
            0.5
        }
    })
}

pub fn reward_format(traj: &ReasoningTrajectory, grammar: &FormatGrammar) -> f64 {
    if validate_format(traj, grammar, &Vocab::standard().specials()) {
        1.0
    } else {
        0.0
    }
}

/// Answer text of a trajectory: the content of the first complete answer
/// block, or else the last contiguous run of non-special tokens.
pub fn extract_answer(tokens: &[TokenId]) -> String {
    let vocab = Vocab::standard();
    let sp = vocab.specials();
    if let Some(open) = tokens.iter().position(|&t| t == sp.answer_open) {
        if let Some(len) = tokens[open + 1..].iter().position(|&t| t == sp.answer_close) {
            return vocab.decode(&tokens[open + 1..open + 1 + len]);
        }
    }
    let end = tokens.iter().rposition(|&t| !sp.is_special(t)).map_or(0, |i| i + 1);
    let start = tokens[..end].iter().rposition(|&t| sp.is_special(t)).map_or(0, |i| i + 1);
    vocab.decode(&tokens[start..end])
}

/// Trim, case-fold, drop surrounding punctuation, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_lowercase()
}

/// Plain decimal (`12`, `3.5`, `.5`); nothing else.
pub fn parse_decimal(s: &str) -> Option<f64> {
    let s = s.trim();
    let ok = !s.is_empty()
        && s.chars().all(|c| c.is_ascii_digit() || c == '.')
        && s.chars().filter(|&c| c == '.').count() <= 1
        && s.chars().any(|c| c.is_ascii_digit());
    ok.then(|| s.parse().ok()).flatten()
}

/// 1 when `text` matches the ground truth: labels by normalised equality,
/// numbers within 1e-6 relative.
pub fn answer_matches(text: &str, truth: &Answer) -> bool {
    match truth {
        Answer::Label(l) => normalize_answer(text) == normalize_answer(l),
        Answer::Number(v) => {
            parse_decimal(&normalize_answer(text)).is_some_and(|p| (p - v).abs() <= 1e-6 * v.abs().max(f64::MIN_POSITIVE))
        }
    }
}

pub fn reward_answer(traj: &ReasoningTrajectory, truth: &Answer) -> f64 {
    if answer_matches(&extract_answer(&traj.tokens), truth) {
        1.0
    } else {
        0.0
    }
}

/// `(r - mean) / (std + delta)` over the group, population standard
/// deviation. Each value is the broadcast scalar of one trajectory.
pub fn compute_advantages(rewards: &[f64], delta: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    // Checked on the rewards themselves: a rounded mean of equal values can
    // differ from them by an ulp, which the division would blow up.
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    let std = (centered.iter().map(|c| c * c).sum::<f64>() / n).sqrt();
    Ok(centered.iter().map(|c| c / (std + delta)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub adv_delta: f64,
    pub lr: f64,
    pub group_size: usize,
    /// Questions per update.
    pub questions_per_step: usize,
    pub steps: u64,
    /// Updates per sampling round; the old policy is refreshed in between.
    pub updates_per_round: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub rewards: RewardWeights,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_beta: 0.04,
            adv_delta: 1e-8,
            lr: 1e-5,
            group_size: 8,
            questions_per_step: 1,
            steps: 200,
            updates_per_round: 1,
            temperature: 1.0,
            top_k: 0,
            weight_decay: 0.0,
            grad_clip: 1.0,
            rewards: RewardWeights::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config("clip_eps must lie in (0, 1)".into()));
        }
        if self.kl_beta < 0.0 || self.adv_delta <= 0.0 {
            return Err(Error::Config("need kl_beta >= 0 and adv_delta > 0".into()));
        }
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        Ok(())
    }
}

/// One sampled trajectory with its rewards.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub generation: Generation,
    pub rewards: RewardBreakdown,
    /// Indices of sampled (non-forced) tokens.
    pub action_idx: Vec<usize>,
    /// Log-probs of the sampled tokens under the sampling policy, filled at
    /// the first update of a round.
    pub old_logp: Option<Vec<f64>>,
    pub ref_logp: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub example: usize,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
}

/// First complete block `LS LP*k LE` in a generation, as the `k` latent rows.
fn block_latents(gen: &Generation, k: usize) -> Option<Tensor> {
    let sp = Vocab::standard().specials();
    let (s, e) = gen.trajectory.latent_span?;
    if e - s - 1 != k {
        return None;
    }
    // Pads of the first block are the first k read-out rows.
    let first_block_pads = gen.trajectory.tokens[..s].iter().filter(|&&t| t == sp.latent_pad).count();
    if first_block_pads != 0 || gen.latents.rows < k {
        return None;
    }
    let d = gen.latents.cols;
    Some(Tensor::from_vec(k, d, gen.latents.data[..k * d].to_vec()))
}

/// Rewards of one generation.
pub fn score_generation(
    models: &Models,
    params: &ParamStore,
    gen: &Generation,
    example: &TrainingExample,
    image_features: &Tensor,
    grammar: &FormatGrammar,
    weights: &RewardWeights,
) -> Result<RewardBreakdown> {
    let r_format = reward_format(&gen.trajectory, grammar);
    let r_ans = reward_answer(&gen.trajectory, &example.question.answer);
    let r_3d = match block_latents(gen, models.vlm.config.latent_size) {
        Some(lat) => {
            let proj = crate::projector::project_latents(&models.projector, params, &lat, image_features)?;
            reward_3d(&proj, &example.teacher.to_tensor())?
        }
        None => 0.0,
    };
    Ok(RewardBreakdown {
        r_3d,
        r_format,
        r_ans,
        total: weights.r_3d * r_3d + weights.r_format * r_format + weights.r_ans * r_ans,
    })
}

/// Samples and scores a group of `cfg.group_size` trajectories.
#[allow(clippy::too_many_arguments)]
pub fn sample_group(
    models: &Models,
    params: &ParamStore,
    reference: &ParamStore,
    example_idx: usize,
    example: &TrainingExample,
    question: &[TokenId],
    grammar: &FormatGrammar,
    cfg: &RlConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutGroup> {
    let sampling = SamplingSpec {
        greedy: false,
        temperature: cfg.temperature,
        top_k: cfg.top_k,
    };
    sampling.validate()?;
    let image_features = {
        let mut g = Graph::new(params);
        let f = models.vlm.encode_images(&mut g, &example.views)?;
        g.value(f).clone()
    };
    let (session, h) = prefill(&models.vlm, params, question, &example.views)?;
    let mut rollouts = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let generation = continue_generation(session.clone(), grammar, &sampling, rng, h.clone())?;
        let rewards = score_generation(models, params, &generation, example, &image_features, grammar, &cfg.rewards)?;
        let action_idx: Vec<usize> = (0..generation.forced.len()).filter(|&i| !generation.forced[i]).collect();
        let ref_logp = if cfg.kl_beta > 0.0 {
            let all = crate::model::sequence_logprobs(
                &models.vlm,
                reference,
                question,
                &example.views,
                &generation.trajectory.tokens,
            )?;
            action_idx.iter().map(|&i| all[i]).collect()
        } else {
            vec![0.0; action_idx.len()]
        };
        rollouts.push(Rollout {
            generation,
            rewards,
            action_idx,
            old_logp: None,
            ref_logp,
        });
    }
    let totals: Vec<f64> = rollouts.iter().map(|r| r.rewards.total).collect();
    let advantages = compute_advantages(&totals, cfg.adv_delta)?;
    Ok(RolloutGroup {
        example: example_idx,
        rollouts,
        advantages,
    })
}

/// Objective value, parameter gradients (of the objective, to be ascended)
/// and token statistics for a set of groups. Fills missing `old_logp` with
/// the current policy's values.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub objective: f64,
    pub grads: think3d_autograd::Gradients,
    pub mean_kl: f64,
    pub clip_fraction: f64,
}

pub fn grpo_objective(
    models: &Models,
    params: &ParamStore,
    groups: &mut [RolloutGroup],
    data: &[TrainingExample],
    prompts: &[Vec<TokenId>],
    cfg: &RlConfig,
) -> Result<ObjectiveEval> {
    let mut grads = think3d_autograd::Gradients::zeros_like(params);
    let mut objective = 0.0;
    let (mut kl_sum, mut clipped, mut tokens) = (0.0, 0usize, 0usize);
    let n_groups = groups.len() as f64;
    for group in groups.iter_mut() {
        let ex = &data[group.example];
        let n = group.rollouts.len() as f64;
        for (ro, &adv) in group.rollouts.iter_mut().zip(&group.advantages) {
            if ro.action_idx.is_empty() {
                continue;
            }
            let mut g = Graph::new(params);
            let lp_all = models
                .vlm
                .trajectory_log_probs(&mut g, &ex.views, &prompts[group.example], &ro.generation.trajectory.tokens)?;
            let lp = g.select_rows(lp_all, &ro.action_idx);
            let current = g.value(lp).data.clone();
            let old = ro.old_logp.get_or_insert_with(|| current.clone()).clone();
            let m = ro.action_idx.len();
            let pt = PolicyTokens {
                old_logp: old,
                ref_logp: ro.ref_logp.clone(),
                advantage: vec![adv; m],
                weight: vec![1.0 / (n * m as f64 * n_groups); m],
                clip_eps: cfg.clip_eps,
                kl_beta: cfg.kl_beta,
            };
            for (i, &l) in current.iter().enumerate() {
                let (_, kl, _) = policy_token_term(l, &pt, i);
                let rho = (l - pt.old_logp[i]).exp();
                if rho.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv < rho * adv {
                    clipped += 1;
                }
                kl_sum += kl;
            }
            tokens += m;
            let obj = g.policy_objective(lp, pt);
            objective += g.value(obj).item();
            grads.accumulate(&g.backward(obj), 1.0);
        }
    }
    let tok = tokens.max(1) as f64;
    Ok(ObjectiveEval {
        objective,
        grads,
        mean_kl: kl_sum / tok,
        clip_fraction: clipped as f64 / tok,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlRecord {
    pub step: u64,
    pub mean_r_3d: f64,
    pub mean_r_format: f64,
    pub mean_r_ans: f64,
    pub mean_total: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub objective: f64,
    pub lr: f64,
    pub wall_time: f64,
    pub config_hash: String,
}

/// RL training state; `reference` is the frozen stage-1 policy.
pub struct RlState {
    pub params: ParamStore,
    pub reference: ParamStore,
    pub optimizer: AdamW,
    pub step: u64,
}

pub fn is_trainable_in_rl(name: &str) -> bool {
    name.starts_with("vlm.")
}

/// Runs stage 2 from `state.step` up to `cfg.steps`.
pub fn train_rl(
    models: &Models,
    state: &mut RlState,
    data: &[TrainingExample],
    grammar: &FormatGrammar,
    cfg: &RlConfig,
    out: Option<&RunOutput>,
) -> Result<Vec<RlRecord>> {
    train_rl_until(models, state, data, grammar, cfg, out, cfg.steps)
}

/// Like [`train_rl`] but stops (with a checkpoint) after step `until`.
pub fn train_rl_until(
    models: &Models,
    state: &mut RlState,
    data: &[TrainingExample],
    grammar: &FormatGrammar,
    cfg: &RlConfig,
    out: Option<&RunOutput>,
    until: u64,
) -> Result<Vec<RlRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let vocab = Vocab::standard();
    let prompts: Vec<Vec<TokenId>> = data
        .iter()
        .map(|e| vocab.encode(&e.question.prompt()))
        .collect::<Result<_>>()?;
    let proj_before = params_hash(&state.params, "proj.");
    let started = Instant::now();
    let hash = out.map(|o| o.config_hash.clone()).unwrap_or_default();
    if let Some(o) = out {
        std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
    }
    let mut records = Vec::new();
    let mut recent = Vec::new();
    let stop = until.min(cfg.steps);
    while state.step < stop {
        let round = state.step;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, round));
        let idx = crate::sft::batch_indices(cfg.seed, round, cfg.questions_per_step, data.len());
        let mut groups = Vec::with_capacity(idx.len());
        for &i in &idx {
            groups.push(sample_group(
                models,
                &state.params,
                &state.reference,
                i,
                &data[i],
                &prompts[i],
                grammar,
                cfg,
                &mut rng,
            )?);
        }
        for _ in 0..cfg.updates_per_round.max(1) {
            if state.step >= stop {
                break;
            }
            let step = state.step;
            let mut eval = grpo_objective(models, &state.params, &mut groups, data, &prompts, cfg)?;
            if !eval.objective.is_finite() || !eval.grads.is_finite() {
                if let Some(o) = out {
                    let dump = o.dir.join("nonfinite_state");
                    crate::checkpoint::save_checkpoint(&dump, &state.params, Some(&state.optimizer), manifest(o, "rl-nonfinite", step, None))?;
                }
                return Err(Error::NonFiniteObjective { step });
            }
            // The optimizer minimises; ascend the objective.
            eval.grads.scale(-1.0);
            if cfg.grad_clip > 0.0 {
                eval.grads.clip_global_norm(cfg.grad_clip);
            }
            state.optimizer.update(&mut state.params, &eval.grads, cfg.lr, is_trainable_in_rl);
            state.step += 1;

            let all: Vec<&RewardBreakdown> = groups.iter().flat_map(|g| g.rollouts.iter().map(|r| &r.rewards)).collect();
            let mean = |f: fn(&RewardBreakdown) -> f64| all.iter().map(|r| f(r)).sum::<f64>() / all.len() as f64;
            let rec = RlRecord {
                step,
                mean_r_3d: mean(|r| r.r_3d),
                mean_r_format: mean(|r| r.r_format),
                mean_r_ans: mean(|r| r.r_ans),
                mean_total: mean(|r| r.total),
                mean_kl: eval.mean_kl,
                clip_fraction: eval.clip_fraction,
                objective: eval.objective,
                lr: cfg.lr,
                wall_time: started.elapsed().as_secs_f64(),
                config_hash: hash.clone(),
            };
            recent.push(rec.mean_total);
            if let Some(o) = out {
                o.append_metric("rl_metrics.jsonl", &rec)?;
                let due = cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0;
                if due || state.step == stop {
                    let score = recent.iter().sum::<f64>() / recent.len() as f64;
                    recent.clear();
                    o.retention()
                        .save(&state.params, Some(&state.optimizer), manifest(o, "rl", state.step, Some(score)))?;
                }
            }
            records.push(rec);
        }
    }
    debug_assert_eq!(proj_before, params_hash(&state.params, "proj."));
    Ok(records)
}

fn manifest(o: &RunOutput, stage: &str, step: u64, score: Option<f64>) -> CheckpointManifest {
    CheckpointManifest {
        version: 0,
        stage: stage.into(),
        step,
        config_hash: o.config_hash.clone(),
        model_hash: o.model_hash.clone(),
        tensors: Vec::new(),
        optimizer: None,
        score,
    }
}
