//! Closed-loop inference: respond-then-act decoding with latent and response
//! caching, and the dual-frequency control loop where the backbone refreshes
//! latents every k expert calls while the expert runs every re-plan.

use crate::corpus::dialogue::{action_question, THINK_SUFFIX};
use crate::corpus::tokenizer::{BOS, IMG};
use crate::env::{
    check_success, render, reset, step, Action7, EnvConfig, EnvState, SceneConfig, TaskSpec,
};
use crate::expert::sample_chunk;
use crate::nn::derive_rng;
use crate::recipes::ModelBundle;
use crate::registry::AttributeRegistry;
use crate::tensor::Mat;
use crate::vlm::{greedy_decode_until_act, VlmError};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControlLoopConfig {
    pub think_mode: bool,
    /// Latents refresh every k expert calls (k = 1 disables caching).
    pub vlm_to_expert_ratio: usize,
    pub actions_executed_per_chunk: usize,
    /// Response cache refresh cadence in expert calls.
    pub language_refresh_every: usize,
    pub max_env_steps: usize,
    pub max_decode_tokens: usize,
    /// Independent flow integrations averaged per chunk; the scripted demos
    /// make the conditional action distribution unimodal, so the mean is a
    /// lower-variance estimate of the same target.
    pub flow_samples_per_chunk: usize,
}

impl Default for ControlLoopConfig {
    fn default() -> Self {
        ControlLoopConfig {
            think_mode: false,
            vlm_to_expert_ratio: 1,
            actions_executed_per_chunk: 1,
            language_refresh_every: 20,
            max_env_steps: 120,
            max_decode_tokens: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalStatus {
    Success,
    Failure(String),
    Timeout,
    DecodeTimeout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub env_step: usize,
    pub vlm_called: bool,
    pub response_text: Option<String>,
    pub latent_source_step: usize,
    pub action: [f64; 7],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub steps: Vec<StepTrace>,
    pub status: TerminalStatus,
    pub vlm_calls: usize,
    pub expert_calls: usize,
}

impl RolloutTrace {
    pub fn success(&self) -> bool {
        self.status == TerminalStatus::Success
    }
}

/// Latent and response caches shared across expert calls.
#[derive(Default)]
pub struct InferCache {
    latents: Option<Mat>,
    latent_source_step: usize,
    response: Option<String>,
    pub expert_calls: usize,
    pub vlm_calls: usize,
}

/// Whether the backbone runs on this expert call under refresh interval k.
pub fn vlm_due(expert_calls_so_far: usize, k: usize) -> bool {
    expert_calls_so_far % k == 0
}

/// Number of backbone calls over `t` expert calls at ratio k: ceil(t / k).
pub fn expected_vlm_calls(t: usize, k: usize) -> usize {
    t.div_ceil(k)
}

/// Prompt ids for the acting question, mirroring the training layout:
/// [BOS, user marker, image slot, question text, assistant marker].
pub fn action_prompt_ids(bundle: &ModelBundle, instruction: &str, think: bool) -> Vec<u32> {
    let tok = &bundle.tokenizer;
    let q = if think {
        format!("{} {THINK_SUFFIX}", action_question(instruction))
    } else {
        action_question(instruction)
    };
    let mut ids = vec![BOS, tok.id("user:"), IMG];
    ids.extend(tok.tokenize(&q));
    ids.push(tok.id("assistant:"));
    ids
}

fn moe_cfg_of(bundle: &ModelBundle) -> Option<&crate::moe::MoeConfig> {
    let has = crate::moe::EXPERTS
        .iter()
        .any(|e| bundle.params.contains(&format!("moe.{e}.vlm.l0.attn.q.a")));
    if has {
        Some(&bundle.moe)
    } else {
        None
    }
}

/// One re-plan: refresh latents/response if due, sample a chunk off the fresh
/// observation, return the first `actions_executed_per_chunk` actions.
pub fn act_once(
    bundle: &ModelBundle,
    state: &EnvState,
    instruction: &str,
    cache: &mut InferCache,
    cfg: &ControlLoopConfig,
    env_step: usize,
    seed: u64,
) -> Result<(Vec<Action7>, bool, Option<String>), VlmError> {
    let side = bundle.image_side();
    let image = render(state, side, side);
    let k = cfg.vlm_to_expert_ratio.max(1);
    let mut vlm_called = false;
    let mut fresh_response = None;
    if cache.latents.is_none() || vlm_due(cache.expert_calls, k) {
        let prompt = action_prompt_ids(bundle, instruction, cfg.think_mode);
        let (resp, latents) = greedy_decode_until_act(
            &bundle.params,
            &bundle.vlm,
            moe_cfg_of(bundle),
            bundle.gating,
            &prompt,
            Some(&image),
            cfg.max_decode_tokens,
        )?;
        cache.latents = Some(latents);
        cache.latent_source_step = env_step;
        vlm_called = true;
        cache.vlm_calls += 1;
        if cache.response.is_none() || cache.expert_calls % cfg.language_refresh_every == 0 {
            let text = bundle.tokenizer.detokenize(&resp);
            cache.response = Some(text.clone());
            fresh_response = Some(text);
        }
    }
    let latents = cache.latents.as_ref().unwrap();
    // The expert always sees the current observation, even with stale latents.
    let mut rng = derive_rng(seed, 0xC0DE_0000 + cache.expert_calls as u64);
    let chunk = sample_chunk(
        &bundle.params,
        &bundle.expert,
        Some(&image),
        latents,
        Some(&state.proprio()),
        &mut rng,
    )
    .map_err(|e| VlmError::Config(e.to_string()))?;
    let chunk = bundle.normalizer.denormalize_chunk(&chunk);
    cache.expert_calls += 1;
    let m = cfg.actions_executed_per_chunk.clamp(1, chunk.nrows());
    let actions = (0..m)
        .map(|r| {
            let row: Vec<f64> = chunk.row(r).to_vec();
            Action7::from_vec7(&row)
        })
        .collect();
    Ok((actions, vlm_called, fresh_response))
}

/// Closed loop until success or budget exhaustion; deterministic in `seed`.
pub fn rollout(
    bundle: &ModelBundle,
    scene: &SceneConfig,
    task: &TaskSpec,
    instruction: &str,
    registry: &AttributeRegistry,
    env_cfg: &EnvConfig,
    cfg: &ControlLoopConfig,
    seed: u64,
) -> RolloutTrace {
    let mut state = match reset(scene, seed, registry) {
        Ok(s) => s,
        Err(e) => {
            return RolloutTrace {
                steps: Vec::new(),
                status: TerminalStatus::Failure(e.to_string()),
                vlm_calls: 0,
                expert_calls: 0,
            }
        }
    };
    let mut cache = InferCache::default();
    let mut steps = Vec::new();
    let mut status = TerminalStatus::Timeout;
    let mut env_step = 0usize;
    'outer: while env_step < cfg.max_env_steps {
        if check_success(&state, task) {
            status = TerminalStatus::Success;
            break;
        }
        let (actions, vlm_called, response) =
            match act_once(bundle, &state, instruction, &mut cache, cfg, env_step, seed) {
                Ok(r) => r,
                Err(VlmError::DecodeTimeout) => {
                    status = TerminalStatus::DecodeTimeout;
                    break;
                }
                Err(e) => {
                    status = TerminalStatus::Failure(e.to_string());
                    break;
                }
            };
        let mut first = true;
        for action in actions {
            let (next, _info) = match step(&state, &action, env_cfg) {
                Ok(r) => r,
                Err(e) => {
                    status = TerminalStatus::Failure(e.to_string());
                    break 'outer;
                }
            };
            steps.push(StepTrace {
                env_step,
                vlm_called: vlm_called && first,
                response_text: if first { response.clone() } else { None },
                latent_source_step: cache.latent_source_step,
                action: action.to_vec7(),
            });
            first = false;
            state = next;
            env_step += 1;
            if check_success(&state, task) {
                status = TerminalStatus::Success;
                break 'outer;
            }
            if env_step >= cfg.max_env_steps {
                break 'outer;
            }
        }
    }
    if status == TerminalStatus::Timeout && check_success(&state, task) {
        status = TerminalStatus::Success;
    }
    RolloutTrace {
        steps,
        status,
        vlm_calls: cache.vlm_calls,
        expert_calls: cache.expert_calls,
    }
}

/// Staleness invariant: latents are never older than k * chunk-execute steps.
pub fn check_staleness(trace: &RolloutTrace, cfg: &ControlLoopConfig) -> bool {
    let bound = cfg.vlm_to_expert_ratio.max(1) * cfg.actions_executed_per_chunk.max(1);
    trace.steps.iter().all(|s| {
        s.latent_source_step <= s.env_step && s.env_step - s.latent_source_step < bound
    })
}

/// One task of a sweep: what to run and how to phrase it.
pub struct SweepTask {
    pub scene: SceneConfig,
    pub task: TaskSpec,
    pub instruction: String,
}

/// Evaluates each refresh ratio on identical seed schedules.
pub fn dual_frequency_sweep(
    bundle: &ModelBundle,
    tasks: &[SweepTask],
    ratios: &[usize],
    trials_per_task: usize,
    registry: &AttributeRegistry,
    env_cfg: &EnvConfig,
    base_cfg: &ControlLoopConfig,
    seed: u64,
) -> Vec<(usize, usize, usize)> {
    let mut table = Vec::new();
    for &k in ratios {
        let mut cfg = base_cfg.clone();
        cfg.vlm_to_expert_ratio = k;
        let mut successes = 0usize;
        let mut trials = 0usize;
        for (ti, t) in tasks.iter().enumerate() {
            for trial in 0..trials_per_task {
                let s = {
                    use rand::RngCore;
                    derive_rng(seed, (ti * 1000 + trial) as u64).next_u64()
                };
                let trace = rollout(
                    bundle,
                    &t.scene,
                    &t.task,
                    &t.instruction,
                    registry,
                    env_cfg,
                    &cfg,
                    s,
                );
                debug_assert!(check_staleness(&trace, &cfg));
                trials += 1;
                if trace.success() {
                    successes += 1;
                }
            }
        }
        table.push((k, successes, trials));
    }
    table
}
