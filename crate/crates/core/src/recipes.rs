//! Stage orchestration: backbone pretraining, action pretraining, and
//! vision-language-action instruction tuning, each with an explicit trainable
//! set, a freezing audit, and a deterministic data schedule.

use crate::corpus::dialogue::{action_question, DialogueSample, ImageSource, Role, Turn};
use crate::corpus::tokenizer::{Tokenizer, ACT, EOS};
use crate::corpus::vlait::{RecordKind, VlaItRecord};
use crate::corpus::{assemble_dialogue, DialogueMode, MotionAnnotatorConfig};
use crate::env::{render, reset, Episode, Image};
use crate::expert::{
    encode_conditioning, flow_loss, init_expert_net, ActionNormalizer, ExpertConfig,
    ACTION_DIM, PROPRIO_DIM,
};
use crate::moe::{
    init_expert as init_lora_expert, GatingPlan, Lambdas, MoeActive, MoeConfig, ParamVars,
    ACTION_EXPERT, EXPERTS,
};
use crate::nn::{derive_rng, AdamW, Params};
use crate::registry::AttributeRegistry;
use crate::tensor::{Mat, Tape, Var};
use crate::vlm::{
    compute_gating_tape, forward_tape, greedy_decode_text, init_backbone, is_backbone_base,
    is_query_io, is_scale_head, lm_loss, BackboneConfig,
};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum RecipeError {
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("freezing audit violated: {0}")]
    Audit(String),
    #[error("backbone error: {0}")]
    Vlm(#[from] crate::vlm::VlmError),
    #[error("expert error: {0}")]
    Expert(#[from] crate::expert::ExpertError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Ckpt(#[from] crate::nn::NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    S0Backbone,
    S1Action,
    S2VlaIt,
    FftBaseline,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: StageKind,
    pub lr: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Batch interleave per cycle: `mm_per_cycle` language batches then
    /// `manip_per_cycle` manipulation batches (the 1:7 default).
    pub mm_per_cycle: usize,
    pub manip_per_cycle: usize,
    /// Ablation: drop the motion-phrase supervision in stage 1.
    pub use_motion_labels: bool,
    pub log_path: Option<PathBuf>,
}

impl StagePlan {
    pub fn stage0(max_steps: usize, seed: u64) -> Self {
        StagePlan {
            stage: StageKind::S0Backbone,
            lr: 3e-4,
            max_steps,
            batch_size: 8,
            seed,
            mm_per_cycle: 1,
            manip_per_cycle: 0,
            use_motion_labels: true,
            log_path: None,
        }
    }

    pub fn stage1(max_steps: usize, seed: u64) -> Self {
        StagePlan {
            stage: StageKind::S1Action,
            manip_per_cycle: 1,
            mm_per_cycle: 0,
            batch_size: 4,
            ..StagePlan::stage0(max_steps, seed)
        }
    }

    pub fn stage2(max_steps: usize, seed: u64) -> Self {
        StagePlan {
            stage: StageKind::S2VlaIt,
            mm_per_cycle: 1,
            manip_per_cycle: 7,
            batch_size: 4,
            ..StagePlan::stage0(max_steps, seed)
        }
    }

    pub fn fft(max_steps: usize, seed: u64) -> Self {
        StagePlan {
            stage: StageKind::FftBaseline,
            mm_per_cycle: 1,
            manip_per_cycle: 7,
            batch_size: 4,
            ..StagePlan::stage0(max_steps, seed)
        }
    }

    pub fn losses(&self) -> &'static [&'static str] {
        match self.stage {
            StageKind::S0Backbone => &["lm"],
            _ => &["lm", "fm"],
        }
    }

    /// The explicit trainable set per stage.
    pub fn trainable(&self, name: &str) -> bool {
        match self.stage {
            StageKind::S0Backbone => is_backbone_base(name),
            StageKind::S1Action => {
                is_query_io(name)
                    || name.starts_with("moe.action.")
                    || name.starts_with("expert.")
            }
            StageKind::S2VlaIt => name.starts_with("moe.language.") || is_scale_head(name),
            StageKind::FftBaseline => {
                (name.starts_with("vlm.") && !is_scale_head(name))
                    || name.starts_with("expert.")
            }
        }
    }
}

/// Per-parameter content hashes before/after a stage; proves what moved.
#[derive(Clone, Debug)]
pub struct CheckpointAudit {
    pub before: BTreeMap<String, [u8; 32]>,
    pub after: BTreeMap<String, [u8; 32]>,
}

impl CheckpointAudit {
    /// Names present in both snapshots whose hash changed.
    pub fn changed(&self) -> Vec<String> {
        self.before
            .iter()
            .filter(|(k, v)| self.after.get(*k).is_some_and(|h| h != *v))
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn unchanged(&self, name: &str) -> bool {
        self.before.get(name) == self.after.get(name)
    }

    /// Every changed parameter must be in the declared trainable set.
    pub fn verify_frozen<F: Fn(&str) -> bool>(&self, trainable: F) -> Result<(), RecipeError> {
        for name in self.changed() {
            if !trainable(&name) {
                return Err(RecipeError::Audit(format!("frozen parameter moved: {name}")));
            }
        }
        Ok(())
    }
}

/// Everything needed to run the model: weights, architecture, tokenizer, and
/// the action normalization statistics.
#[derive(Clone)]
pub struct ModelBundle {
    pub params: Params,
    pub vlm: BackboneConfig,
    pub expert: ExpertConfig,
    pub moe: MoeConfig,
    pub gating: GatingPlan,
    pub tokenizer: Tokenizer,
    pub normalizer: ActionNormalizer,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    vlm: BackboneConfig,
    expert: ExpertConfig,
    moe: MoeConfig,
    gating: GatingPlan,
    tokenizer: Tokenizer,
    normalizer: ActionNormalizer,
}

impl ModelBundle {
    /// Fresh backbone; adapters and the action expert are added by the
    /// stages that introduce them.
    pub fn init(
        vlm: BackboneConfig,
        expert: ExpertConfig,
        moe: MoeConfig,
        tokenizer: Tokenizer,
        seed: u64,
    ) -> Self {
        let mut params = Params::new();
        let mut rng = derive_rng(seed, 0xB0);
        init_backbone(&mut params, &mut rng, &vlm);
        ModelBundle {
            params,
            vlm,
            expert,
            moe,
            gating: GatingPlan::Uniform,
            tokenizer,
            normalizer: ActionNormalizer::identity(),
        }
    }

    pub fn image_side(&self) -> usize {
        self.vlm.image_size
    }

    pub fn save(&self, dir: &Path) -> Result<(), RecipeError> {
        std::fs::create_dir_all(dir)?;
        self.params.save(&dir.join("params.ckpt"))?;
        let meta = BundleMeta {
            vlm: self.vlm.clone(),
            expert: self.expert.clone(),
            moe: self.moe.clone(),
            gating: self.gating,
            tokenizer: self.tokenizer.clone(),
            normalizer: self.normalizer.clone(),
        };
        let f = std::fs::File::create(dir.join("meta.json"))?;
        serde_json::to_writer_pretty(f, &meta).map_err(|e| RecipeError::Data(e.to_string()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, RecipeError> {
        let params = Params::load(&dir.join("params.ckpt"))?;
        let f = std::fs::File::open(dir.join("meta.json"))?;
        let mut meta: BundleMeta =
            serde_json::from_reader(f).map_err(|e| RecipeError::Data(e.to_string()))?;
        meta.tokenizer.rebuild_index();
        Ok(ModelBundle {
            params,
            vlm: meta.vlm,
            expert: meta.expert,
            moe: meta.moe,
            gating: meta.gating,
            tokenizer: meta.tokenizer,
            normalizer: meta.normalizer,
        })
    }
}

// ---------------------------------------------------------------------------
// Training items.

/// A pure language sample: supervised text only.
#[derive(Clone)]
pub struct LanguageItem {
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
    pub image: Option<Image>,
}

/// A manipulation sample: text with an action tail plus the normalized chunk
/// and the proprioceptive state at the sampled frame.
#[derive(Clone)]
pub struct ManipItem {
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
    pub image: Image,
    pub chunk: Mat,
    pub proprio: [f64; PROPRIO_DIM],
}

pub fn render_image_source(
    src: &ImageSource,
    episodes: &HashMap<String, &Episode>,
    registry: &AttributeRegistry,
    side: usize,
) -> Result<Image, RecipeError> {
    match src {
        ImageSource::Episode { episode_id, frame } => {
            let ep = episodes
                .get(episode_id)
                .ok_or_else(|| RecipeError::Data(format!("unknown episode {episode_id}")))?;
            let frame = (*frame).min(ep.states.len() - 1);
            Ok(ep.render_step(frame, side, side))
        }
        ImageSource::Scene { config, seed } => {
            let state = reset(config, *seed, registry)
                .map_err(|e| RecipeError::Data(e.to_string()))?;
            Ok(render(&state, side, side))
        }
    }
}

/// Encoded dialogues to language items (renders any attached image).
pub fn language_items(
    dialogues: &[DialogueSample],
    episodes: &HashMap<String, &Episode>,
    registry: &AttributeRegistry,
    side: usize,
) -> Result<Vec<LanguageItem>, RecipeError> {
    let mut out = Vec::with_capacity(dialogues.len());
    for d in dialogues {
        if d.token_ids.is_empty() {
            return Err(RecipeError::Data("dialogue not encoded".into()));
        }
        let image = d
            .turns
            .iter()
            .find_map(|t| t.image.as_ref())
            .map(|src| render_image_source(src, episodes, registry, side))
            .transpose()?;
        out.push(LanguageItem {
            tokens: d.token_ids.clone(),
            mask: d.loss_mask.clone(),
            image,
        });
    }
    Ok(out)
}

/// Action chunk starting at frame t, padded with zero actions past the end.
pub fn chunk_at(episode: &Episode, t: usize, horizon: usize) -> Mat {
    Array2::from_shape_fn((horizon, ACTION_DIM), |(r, c)| {
        episode
            .steps
            .get(t + r)
            .map(|s| s.action[c])
            .unwrap_or(0.0)
    })
}

pub fn fit_normalizer(episodes: &[Episode]) -> ActionNormalizer {
    let rows: Vec<[f64; ACTION_DIM]> = episodes
        .iter()
        .flat_map(|e| e.steps.iter().map(|s| s.action))
        .collect();
    if rows.is_empty() {
        ActionNormalizer::identity()
    } else {
        ActionNormalizer::fit(&rows)
    }
}

/// Stage-1 samples: per successful episode, a few frames with the atomic
/// instruction, the motion phrase at that frame, and the following chunk.
#[allow(clippy::too_many_arguments)]
pub fn atomic_manip_items(
    episodes: &[Episode],
    tok: &Tokenizer,
    mcfg: &MotionAnnotatorConfig,
    norm: &ActionNormalizer,
    horizon: usize,
    side: usize,
    use_motion_labels: bool,
    samples_per_episode: usize,
    seed: u64,
) -> Result<Vec<ManipItem>, RecipeError> {
    let mut out = Vec::new();
    for (i, ep) in episodes.iter().enumerate() {
        if !ep.success || ep.steps.is_empty() {
            continue;
        }
        let labels = match crate::corpus::annotate_language_motion(ep, mcfg) {
            Ok(l) => l,
            Err(_) => continue, // shorter than the annotation window
        };
        let mut rng = derive_rng(seed, 0xA70 + i as u64);
        for k in 0..samples_per_episode {
            let t = if k == 0 {
                0
            } else {
                rng.gen_range(0..ep.steps.len())
            };
            let label = if use_motion_labels {
                labels[t.min(labels.len() - 1)].clone()
            } else {
                String::new()
            };
            let mut sample = DialogueSample {
                turns: vec![
                    Turn {
                        role: Role::User,
                        text: action_question(&ep.instruction),
                        image: Some(ImageSource::Episode {
                            episode_id: ep.id.clone(),
                            frame: t,
                        }),
                    },
                    Turn {
                        role: Role::Assistant,
                        text: label,
                        image: None,
                    },
                ],
                has_action_tail: true,
                token_ids: Vec::new(),
                loss_mask: Vec::new(),
                action_source: None,
            };
            sample.encode(tok);
            out.push(ManipItem {
                tokens: sample.token_ids,
                mask: sample.loss_mask,
                image: ep.render_step(t, side, side),
                chunk: norm.normalize_chunk(&chunk_at(ep, t, horizon)),
                proprio: ep.states[t].proprio(),
            });
        }
    }
    if out.is_empty() {
        return Err(RecipeError::Data("no usable episodes".into()));
    }
    Ok(out)
}

/// Stage-2 manipulation samples built from instruction-tuning records
/// (rewrites and context commands); QA/caption records become language items.
#[allow(clippy::too_many_arguments)]
pub fn vlait_items(
    records: &[VlaItRecord],
    episodes: &HashMap<String, &Episode>,
    registry: &AttributeRegistry,
    tok: &Tokenizer,
    norm: &ActionNormalizer,
    horizon: usize,
    side: usize,
    mode: DialogueMode,
    seed: u64,
) -> Result<(Vec<ManipItem>, Vec<LanguageItem>), RecipeError> {
    let mut manip = Vec::new();
    let mut lang = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let ep = episodes
            .get(&rec.episode_id)
            .ok_or_else(|| RecipeError::Data(format!("unknown episode {}", rec.episode_id)))?;
        match rec.kind {
            RecordKind::Caption | RecordKind::Qa => {
                let src = ImageSource::Episode {
                    episode_id: rec.episode_id.clone(),
                    frame: rec.frame_indices[0],
                };
                let mut d = assemble_dialogue(rec, mode, Some(src.clone()), None)
                    .map_err(|e| RecipeError::Data(e.to_string()))?;
                d.encode(tok);
                lang.push(LanguageItem {
                    tokens: d.token_ids,
                    mask: d.loss_mask,
                    image: Some(render_image_source(&src, episodes, registry, side)?),
                });
            }
            RecordKind::CommandRewrite | RecordKind::ContextCreate => {
                if !ep.success || ep.steps.is_empty() {
                    continue;
                }
                let mut rng = derive_rng(seed, 0x71A + i as u64);
                let t = if rng.gen_bool(0.5) {
                    0
                } else {
                    rng.gen_range(0..ep.steps.len())
                };
                let src = ImageSource::Episode {
                    episode_id: rec.episode_id.clone(),
                    frame: t,
                };
                let mut d = assemble_dialogue(rec, mode, Some(src), None)
                    .map_err(|e| RecipeError::Data(e.to_string()))?;
                d.encode(tok);
                manip.push(ManipItem {
                    tokens: d.token_ids,
                    mask: d.loss_mask,
                    image: ep.render_step(t, side, side),
                    chunk: norm.normalize_chunk(&chunk_at(ep, t, horizon)),
                    proprio: ep.states[t].proprio(),
                });
            }
        }
    }
    Ok((manip, lang))
}

/// Deterministic nested subsets: one fixed shuffle, then a prefix. Larger
/// fractions strictly contain smaller ones.
pub fn nested_fraction<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Vec<T> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    let mut rng = derive_rng(seed, 0xF5AC);
    idx.shuffle(&mut rng);
    let take = ((fraction * items.len() as f64).ceil() as usize).min(items.len());
    idx[..take].iter().map(|&i| items[i].clone()).collect()
}

/// Batch tags in schedule order: `mm` language batches then `manip`
/// manipulation batches, repeating.
pub fn interleave_schedule(total: usize, mm: usize, manip: usize) -> Vec<bool> {
    // true = language (multimodal) batch
    let cycle = mm + manip;
    assert!(cycle > 0);
    (0..total).map(|i| i % cycle < mm).collect()
}

// ---------------------------------------------------------------------------
// Loss assembly.

#[allow(clippy::too_many_arguments)]
fn moe_for_sample<'a>(
    bundle: &'a ModelBundle,
    plan: &StagePlan,
    t: &mut Tape,
    pv: &mut ParamVars,
    tokens: &[u32],
    image: Option<&Image>,
    with_queries: bool,
    step: usize,
    sample: usize,
) -> Result<Option<MoeActive<'a>>, RecipeError> {
    let has_adapters = EXPERTS
        .iter()
        .any(|e| bundle.params.contains(&format!("moe.{e}.vlm.l0.attn.q.a")));
    if !has_adapters {
        return Ok(None);
    }
    let lambdas = match plan.stage {
        StageKind::S0Backbone | StageKind::FftBaseline => return Ok(None),
        StageKind::S1Action => Lambdas::Fixed(
            GatingPlan::FixedOneHot(ACTION_EXPERT)
                .fixed_lambdas(bundle.moe.k_experts)
                .unwrap(),
        ),
        StageKind::S2VlaIt => {
            let lam = compute_gating_tape(t, pv, &bundle.vlm, tokens, image, with_queries)?;
            Lambdas::Tape(lam)
        }
    };
    Ok(Some(MoeActive::training(
        &bundle.moe,
        lambdas,
        plan.seed,
        (step as u64) << 16 | sample as u64,
    )))
}

#[allow(clippy::too_many_arguments)]
fn language_sample_loss(
    bundle: &ModelBundle,
    plan: &StagePlan,
    t: &mut Tape,
    pv: &mut ParamVars,
    item: &LanguageItem,
    step: usize,
    sample: usize,
) -> Result<Var, RecipeError> {
    let moe = moe_for_sample(
        bundle,
        plan,
        t,
        pv,
        &item.tokens,
        item.image.as_ref(),
        false,
        step,
        sample,
    )?;
    let (out, _) = forward_tape(
        t,
        pv,
        &bundle.vlm,
        &item.tokens,
        item.image.as_ref(),
        false,
        moe,
    )?;
    Ok(lm_loss(t, out.logits, &item.tokens, &item.mask))
}

#[allow(clippy::too_many_arguments)]
fn manip_sample_loss(
    bundle: &ModelBundle,
    plan: &StagePlan,
    t: &mut Tape,
    pv: &mut ParamVars,
    item: &ManipItem,
    step: usize,
    sample: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Var, Var), RecipeError> {
    let moe = moe_for_sample(
        bundle,
        plan,
        t,
        pv,
        &item.tokens,
        Some(&item.image),
        true,
        step,
        sample,
    )?;
    let (out, _) = forward_tape(
        t,
        pv,
        &bundle.vlm,
        &item.tokens,
        Some(&item.image),
        true,
        moe,
    )?;
    let lm = lm_loss(t, out.logits, &item.tokens, &item.mask);
    let latents = out.query_hidden.expect("queries requested");
    let cond = encode_conditioning(
        t,
        pv,
        &bundle.expert,
        Some(&item.image),
        latents,
        Some(&item.proprio),
    )?;
    let fm = flow_loss(t, pv, &bundle.expert, &cond, &item.chunk, rng)?;
    Ok((lm, fm))
}

fn mean_var(t: &mut Tape, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for v in &vars[1..] {
        acc = t.add(acc, *v);
    }
    t.scale(acc, 1.0 / vars.len() as f64)
}

pub struct StageReport {
    pub audit: CheckpointAudit,
    pub first_loss: f64,
    pub final_loss: f64,
    pub steps_run: usize,
}

struct MetricsLog {
    out: Option<std::io::BufWriter<std::fs::File>>,
}

impl MetricsLog {
    fn open(path: &Option<PathBuf>) -> Result<Self, RecipeError> {
        let out = match path {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                Some(std::io::BufWriter::new(std::fs::File::create(p)?))
            }
            None => None,
        };
        Ok(MetricsLog { out })
    }

    fn record(
        &mut self,
        step: usize,
        lm: f64,
        fm: Option<f64>,
        lr: f64,
        corpus: &str,
    ) -> Result<(), RecipeError> {
        if let Some(w) = self.out.as_mut() {
            let line = serde_json::json!({
                "step": step,
                "loss_lm": lm,
                "loss_fm": fm,
                "lr": lr,
                "corpus": corpus,
            });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Shared batch loop. `mm_items` and `manip_items` may each be empty when the
/// schedule never selects them.
fn train_loop(
    bundle: &mut ModelBundle,
    plan: &StagePlan,
    mm_items: &[LanguageItem],
    manip_items: &[ManipItem],
) -> Result<StageReport, RecipeError> {
    let before = bundle.params.hash_all();
    let schedule = interleave_schedule(plan.max_steps, plan.mm_per_cycle, plan.manip_per_cycle);
    let mut mm_order: Vec<usize> = (0..mm_items.len()).collect();
    let mut manip_order: Vec<usize> = (0..manip_items.len()).collect();
    let mut rng = derive_rng(plan.seed, 0x7124);
    mm_order.shuffle(&mut rng);
    manip_order.shuffle(&mut rng);
    let (mut mm_pos, mut manip_pos) = (0usize, 0usize);
    let mut opt = AdamW::new(plan.lr);
    let mut log = MetricsLog::open(&plan.log_path)?;
    let mut noise_rng = derive_rng(plan.seed, 0xF10);
    let (mut first_loss, mut final_loss) = (f64::NAN, f64::NAN);

    for (step, &is_mm) in schedule.iter().enumerate() {
        let mut t = Tape::new();
        let mut pv = ParamVars::new(&bundle.params);
        let mut lm_terms = Vec::new();
        let mut fm_terms = Vec::new();
        let corpus_tag;
        if is_mm {
            corpus_tag = "multimodal";
            if mm_items.is_empty() {
                continue;
            }
            for s in 0..plan.batch_size {
                let item = &mm_items[mm_order[mm_pos % mm_order.len()]];
                mm_pos += 1;
                lm_terms.push(language_sample_loss(bundle, plan, &mut t, &mut pv, item, step, s)?);
            }
        } else {
            corpus_tag = "manipulation";
            if manip_items.is_empty() {
                continue;
            }
            for s in 0..plan.batch_size {
                let item = &manip_items[manip_order[manip_pos % manip_order.len()]];
                manip_pos += 1;
                let (lm, fm) =
                    manip_sample_loss(bundle, plan, &mut t, &mut pv, item, step, s, &mut noise_rng)?;
                lm_terms.push(lm);
                fm_terms.push(fm);
            }
        }
        let lm_mean = mean_var(&mut t, &lm_terms);
        let total = if fm_terms.is_empty() {
            lm_mean
        } else {
            let fm_mean = mean_var(&mut t, &fm_terms);
            // Direct, unweighted sum of the two losses.
            t.add(lm_mean, fm_mean)
        };
        let loss_val = t.scalar_value(total);
        if !loss_val.is_finite() {
            return Err(RecipeError::Diverged { step });
        }
        if first_loss.is_nan() {
            first_loss = loss_val;
        }
        final_loss = loss_val;
        let lm_val = t.scalar_value(lm_mean);
        let fm_val = if fm_terms.is_empty() {
            None
        } else {
            Some(loss_val - lm_val)
        };
        log.record(step, lm_val, fm_val, plan.lr, corpus_tag)?;
        let grads = t.backward(total);
        opt.apply(&mut bundle.params, &grads, |n| plan.trainable(n));
    }

    let audit = CheckpointAudit {
        before,
        after: bundle.params.hash_all(),
    };
    audit.verify_frozen(|n| plan.trainable(n))?;
    Ok(StageReport {
        audit,
        first_loss,
        final_loss,
        steps_run: plan.max_steps,
    })
}

/// Backbone pretraining on caption/QA language data only.
pub fn run_stage0(
    bundle: &mut ModelBundle,
    corpus: &[LanguageItem],
    plan: &StagePlan,
) -> Result<StageReport, RecipeError> {
    if corpus.is_empty() {
        return Err(RecipeError::Data("empty pretraining corpus".into()));
    }
    train_loop(bundle, plan, corpus, &[])
}

/// Action pretraining: adds the expert network and the action adapter, then
/// optimizes the direct sum of the language and flow losses.
pub fn run_stage1(
    bundle: &mut ModelBundle,
    manip: &[ManipItem],
    plan: &StagePlan,
) -> Result<StageReport, RecipeError> {
    if manip.is_empty() {
        return Err(RecipeError::Data("no manipulation items".into()));
    }
    if !bundle.params.contains("expert.action_head.w") {
        let mut rng = derive_rng(plan.seed, 0xE1);
        init_expert_net(&mut bundle.params, &mut rng, &bundle.expert);
        init_lora_expert(
            &mut bundle.params,
            &mut rng,
            &bundle.moe,
            EXPERTS[ACTION_EXPERT],
            &bundle.vlm.adapter_targets(),
        );
        bundle.normalizer.write_params(&mut bundle.params);
    }
    let report = train_loop(bundle, plan, &[], manip)?;
    bundle.gating = GatingPlan::FixedOneHot(ACTION_EXPERT);
    Ok(report)
}

/// Instruction tuning: adds the language adapter, trains it plus the scale
/// head on the interleaved multimodal/manipulation mix, then switches the
/// bundle to learned gating.
pub fn run_stage2(
    bundle: &mut ModelBundle,
    mm: &[LanguageItem],
    manip: &[ManipItem],
    plan: &StagePlan,
) -> Result<StageReport, RecipeError> {
    if !bundle.params.contains("expert.action_head.w") {
        return Err(RecipeError::Data("stage 2 requires a stage-1 bundle".into()));
    }
    let lang_expert = EXPERTS[1 - ACTION_EXPERT];
    if !bundle
        .params
        .contains(&format!("moe.{lang_expert}.vlm.l0.attn.q.a"))
    {
        let mut rng = derive_rng(plan.seed, 0xE2);
        init_lora_expert(
            &mut bundle.params,
            &mut rng,
            &bundle.moe,
            lang_expert,
            &bundle.vlm.adapter_targets(),
        );
    }
    let report = train_loop(bundle, plan, mm, manip)?;
    bundle.gating = GatingPlan::LearnedTwoPass;
    Ok(report)
}

/// Full finetune baseline: everything in the backbone (plus the expert)
/// trains in a single stage on the stage-2 mix, with no adapters.
pub fn run_fft_baseline(
    bundle: &mut ModelBundle,
    mm: &[LanguageItem],
    manip: &[ManipItem],
    plan: &StagePlan,
) -> Result<StageReport, RecipeError> {
    if !bundle.params.contains("expert.action_head.w") {
        let mut rng = derive_rng(plan.seed, 0xE3);
        init_expert_net(&mut bundle.params, &mut rng, &bundle.expert);
        bundle.normalizer.write_params(&mut bundle.params);
    }
    train_loop(bundle, plan, mm, manip)
}

// ---------------------------------------------------------------------------
// Toy-VQA probes (forgetting reference).

pub struct QaProbe {
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
    pub image: Option<Image>,
}

/// Splits an encoded QA dialogue at the final assistant marker into a decode
/// prompt and the reference answer (without the trailing end token).
pub fn qa_probe(item: &LanguageItem, tok: &Tokenizer) -> Option<QaProbe> {
    let marker = tok.id("assistant:");
    let pos = item.tokens.iter().rposition(|&id| id == marker)?;
    let mut answer: Vec<u32> = item.tokens[pos + 1..].to_vec();
    if answer.last() == Some(&EOS) {
        answer.pop();
    }
    Some(QaProbe {
        prompt: item.tokens[..=pos].to_vec(),
        answer,
        image: item.image.clone(),
    })
}

/// Exact-match accuracy of greedy decoding against the reference answers.
pub fn vqa_accuracy(bundle: &ModelBundle, probes: &[QaProbe]) -> Result<f64, RecipeError> {
    if probes.is_empty() {
        return Err(RecipeError::Data("no probes".into()));
    }
    let has_adapters = bundle.params.contains("moe.language.vlm.l0.attn.q.a")
        || bundle.params.contains("moe.action.vlm.l0.attn.q.a");
    let moe_cfg = if has_adapters { Some(&bundle.moe) } else { None };
    let mut hits = 0usize;
    for p in probes {
        let got = greedy_decode_text(
            &bundle.params,
            &bundle.vlm,
            moe_cfg,
            bundle.gating,
            &p.prompt,
            p.image.as_ref(),
            p.answer.len() + 4,
            EOS,
        )?;
        if got == p.answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

/// Keeps `ACT` reachable in budget checks for tails built by hand.
pub const ACTION_TAIL_TOKEN: u32 = ACT;
