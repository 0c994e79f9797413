//! Declarative run configuration. One TOML file (plus a small set of flag
//! and environment overrides) drives every CLI subcommand; each run snapshots
//! its resolved config and an input-checksum manifest into the output
//! directory so artifacts stay reproducible from (snapshot, master_seed).

use crate::bench::{apply_synonyms, BenchConfig};
use crate::corpus::dialogue::action_question;
use crate::corpus::{DialogueMode, TemplateBank, THINK_SUFFIX};
use crate::env::EnvConfig;
use crate::expert::ExpertConfig;
use crate::infer::ControlLoopConfig;
use crate::moe::MoeConfig;
use crate::recipes::StagePlan;
use crate::registry::AttributeRegistry;
use crate::vlm::BackboneConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub max_step: f64,
    pub grasp_radius: f64,
    pub max_episode_steps: u32,
}

impl Default for EnvSection {
    fn default() -> Self {
        let d = EnvConfig::default();
        Self {
            max_step: d.max_step,
            grasp_radius: d.grasp_radius,
            max_episode_steps: d.max_episode_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// "desk" (tiny, CPU-friendly) or "reference" (the full-scale shapes).
    pub preset: String,
    pub num_queries: Option<usize>,
    pub horizon: Option<usize>,
    pub use_film: bool,
    pub use_vision: bool,
    pub use_proprio: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let moe = MoeConfig::default();
        Self {
            preset: "desk".to_string(),
            num_queries: None,
            horizon: None,
            use_film: true,
            use_vision: true,
            use_proprio: true,
            lora_rank: moe.rank,
            lora_alpha: moe.alpha,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Scripted demonstrations to generate.
    pub episodes: usize,
    /// Manipulation samples drawn per successful episode.
    pub samples_per_episode: usize,
    /// Caption/QA dialogues for backbone pretraining.
    pub mm_size: usize,
    /// Trailing slice of the multimodal corpus reserved as the VQA holdout.
    pub vqa_holdout: usize,
    /// Nested fraction of the episode set to actually train on.
    pub data_fraction: f64,
    pub use_motion_labels: bool,
    pub motion_window: usize,
    pub motion_axis_threshold: f64,
    pub motion_gripper_threshold: f64,
    /// Dialogue shape for instruction-tuning action samples.
    pub dialogue_mode: DialogueMode,
}

impl Default for DataSection {
    fn default() -> Self {
        let m = crate::corpus::MotionAnnotatorConfig::default();
        Self {
            episodes: 300,
            samples_per_episode: 2,
            mm_size: 256,
            vqa_holdout: 32,
            data_fraction: 1.0,
            use_motion_labels: true,
            motion_window: m.window_w,
            motion_axis_threshold: m.axis_threshold,
            motion_gripper_threshold: m.gripper_threshold,
            dialogue_mode: DialogueMode::RespondThenAct,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub stage0_steps: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub fft_steps: usize,
    /// Language batches per interleave cycle in stage 2 / FFT.
    pub mm_per_cycle: usize,
    /// Manipulation batches per interleave cycle in stage 2 / FFT.
    pub manip_per_cycle: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            stage0_steps: 400,
            stage1_steps: 400,
            stage2_steps: 400,
            fft_steps: 400,
            mm_per_cycle: 1,
            manip_per_cycle: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSection {
    pub think_mode: bool,
    pub vlm_to_expert_ratio: usize,
    pub actions_executed_per_chunk: usize,
    pub language_refresh_every: usize,
    pub max_env_steps: usize,
    pub max_decode_tokens: usize,
    /// Refresh ratios visited by the dual-frequency sweep.
    pub sweep_ratios: Vec<usize>,
}

impl Default for ControlSection {
    fn default() -> Self {
        let d = ControlLoopConfig::default();
        Self {
            think_mode: d.think_mode,
            vlm_to_expert_ratio: d.vlm_to_expert_ratio,
            actions_executed_per_chunk: d.actions_executed_per_chunk,
            language_refresh_every: d.language_refresh_every,
            max_env_steps: d.max_env_steps,
            max_decode_tokens: d.max_decode_tokens,
            sweep_ratios: vec![1, 2, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub atomic_tasks: usize,
    pub aggregation_tasks: usize,
    pub reasoning_tasks: usize,
    pub trials_per_task: usize,
    pub seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        let d = BenchConfig::default();
        Self {
            atomic_tasks: d.atomic_tasks,
            aggregation_tasks: d.aggregation_tasks,
            reasoning_tasks: d.reasoning_tasks,
            trials_per_task: d.trials_per_task,
            seed: d.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub env: EnvSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub control: ControlSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            master_seed: 7,
            output_dir: PathBuf::from("out"),
            env: EnvSection::default(),
            model: ModelSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            control: ControlSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.model.preset != "desk" && self.model.preset != "reference" {
            return Err(ConfigError::Invalid(format!(
                "model.preset must be 'desk' or 'reference', got '{}'",
                self.model.preset
            )));
        }
        for (name, v) in [
            ("data.episodes", self.data.episodes),
            ("data.samples_per_episode", self.data.samples_per_episode),
            ("data.mm_size", self.data.mm_size),
            ("control.vlm_to_expert_ratio", self.control.vlm_to_expert_ratio),
            (
                "control.actions_executed_per_chunk",
                self.control.actions_executed_per_chunk,
            ),
            ("bench.trials_per_task", self.bench.trials_per_task),
        ] {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.data.data_fraction) || self.data.data_fraction == 0.0 {
            return Err(ConfigError::Invalid(
                "data.data_fraction must be in (0, 1]".into(),
            ));
        }
        if self.env.max_step <= 0.0 || self.env.grasp_radius <= 0.0 {
            return Err(ConfigError::Invalid(
                "env.max_step and env.grasp_radius must be positive".into(),
            ));
        }
        if self.control.sweep_ratios.iter().any(|&k| k == 0) {
            return Err(ConfigError::Invalid(
                "control.sweep_ratios entries must be positive".into(),
            ));
        }
        if self.data.vqa_holdout >= self.data.mm_size {
            return Err(ConfigError::Invalid(
                "data.vqa_holdout must be smaller than data.mm_size".into(),
            ));
        }
        Ok(())
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            max_step: self.env.max_step,
            grasp_radius: self.env.grasp_radius,
            max_episode_steps: self.env.max_episode_steps,
        }
    }

    pub fn backbone_config(&self, vocab_size: usize) -> BackboneConfig {
        let mut cfg = if self.model.preset == "reference" {
            BackboneConfig::reference(vocab_size)
        } else {
            BackboneConfig::desk(vocab_size)
        };
        if let Some(n) = self.model.num_queries {
            cfg.num_queries_n = n;
        }
        cfg
    }

    pub fn expert_config(&self, latent_dim: usize) -> ExpertConfig {
        let mut cfg = if self.model.preset == "reference" {
            ExpertConfig::reference(latent_dim)
        } else {
            ExpertConfig::desk(latent_dim)
        };
        if let Some(h) = self.model.horizon {
            cfg.horizon_h = h;
        }
        cfg.use_film = self.model.use_film;
        cfg.use_vision = self.model.use_vision;
        cfg.use_proprio = self.model.use_proprio;
        cfg
    }

    pub fn moe_config(&self) -> MoeConfig {
        MoeConfig {
            rank: self.model.lora_rank,
            alpha: self.model.lora_alpha,
            ..MoeConfig::default()
        }
    }

    pub fn motion_config(&self) -> crate::corpus::MotionAnnotatorConfig {
        crate::corpus::MotionAnnotatorConfig {
            window_w: self.data.motion_window,
            axis_threshold: self.data.motion_axis_threshold,
            gripper_threshold: self.data.motion_gripper_threshold,
        }
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            atomic_tasks: self.bench.atomic_tasks,
            aggregation_tasks: self.bench.aggregation_tasks,
            reasoning_tasks: self.bench.reasoning_tasks,
            trials_per_task: self.bench.trials_per_task,
            seed: self.bench.seed,
        }
    }

    pub fn control_config(&self) -> ControlLoopConfig {
        ControlLoopConfig {
            think_mode: self.control.think_mode,
            vlm_to_expert_ratio: self.control.vlm_to_expert_ratio,
            actions_executed_per_chunk: self.control.actions_executed_per_chunk,
            language_refresh_every: self.control.language_refresh_every,
            max_env_steps: self.control.max_env_steps,
            max_decode_tokens: self.control.max_decode_tokens,
        }
    }

    pub fn stage_plan(&self, stage: &str) -> StagePlan {
        let mut plan = match stage {
            "stage0" => StagePlan::stage0(self.train.stage0_steps, self.master_seed),
            "stage1" => StagePlan::stage1(self.train.stage1_steps, self.master_seed),
            "stage2" => StagePlan::stage2(self.train.stage2_steps, self.master_seed),
            "fft" => StagePlan::fft(self.train.fft_steps, self.master_seed),
            other => panic!("unknown stage {other}"),
        };
        plan.lr = self.train.lr;
        plan.use_motion_labels = self.data.use_motion_labels;
        if matches!(stage, "stage2" | "fft") {
            plan.mm_per_cycle = self.train.mm_per_cycle;
            plan.manip_per_cycle = self.train.manip_per_cycle;
        }
        plan
    }
}

/// Loads the config file (or defaults), then applies the two supported
/// environment overrides: MICROVLA_MASTER_SEED and MICROVLA_OUTPUT_DIR.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig, ConfigError> {
    let mut cfg: RunConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                ConfigError::Parse(format!("cannot read {}: {e}", p.display()))
            })?;
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    if let Ok(seed) = std::env::var("MICROVLA_MASTER_SEED") {
        cfg.master_seed = seed
            .parse()
            .map_err(|_| ConfigError::Invalid(format!("MICROVLA_MASTER_SEED='{seed}'")))?;
    }
    if let Ok(dir) = std::env::var("MICROVLA_OUTPUT_DIR") {
        cfg.output_dir = PathBuf::from(dir);
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

/// Snapshots the resolved config and checksums of the run's input files into
/// the output directory.
pub fn write_run_artifacts(cfg: &RunConfig, inputs: &[&Path]) -> Result<(), ConfigError> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let text =
        toml::to_string_pretty(cfg).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    std::fs::write(cfg.output_dir.join("resolved_config.toml"), text)?;
    let mut entries = Vec::new();
    for p in inputs {
        if p.is_file() {
            entries.push(ManifestEntry {
                path: p.display().to_string(),
                bytes: std::fs::metadata(p)?.len(),
                sha256: sha256_file(p)?,
            });
        }
    }
    let json = serde_json::to_string_pretty(&entries)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    std::fs::write(cfg.output_dir.join("input_manifest.json"), json)?;
    Ok(())
}

/// Text chunks that cover every word the pipeline and benchmark can emit:
/// protocol markers, registry vocabulary, all template realizations (train
/// and held-out, with and without the benchmark synonyms), the action
/// question and confirmation scaffolding, and the fixed motion-phrase words.
/// The tokenizer built from these plus the generated corpora sees no UNKs
/// at evaluation time; held-out words still get no supervised gradient.
pub fn template_realizations(registry: &AttributeRegistry, bank: &TemplateBank) -> Vec<String> {
    let mut out = vec![
        "user: assistant: system:".to_string(),
        action_question("pick up the lemon"),
        THINK_SUFFIX.to_string(),
        "move right and move left and move forward and move backward and move up \
         and move down and close gripper and open gripper and stop"
            .to_string(),
    ];
    out.extend(registry.vocabulary());
    out.extend(bank.caption_prompts.iter().cloned());
    let names: Vec<&str> = registry.kinds.iter().map(|k| k.name.as_str()).collect();
    let colors: Vec<&str> = registry.kinds.iter().map(|k| k.color.word()).collect();
    let categories: Vec<&str> = registry.kinds.iter().map(|k| k.category.word()).collect();
    let glyphs: Vec<String> = registry
        .kinds
        .iter()
        .filter_map(|k| k.glyph.map(String::from))
        .collect();
    let mut templates: Vec<&String> = Vec::new();
    for rb in bank.rewrites.values() {
        templates.extend(rb.train.iter().chain(rb.held_out.iter()));
    }
    for ctx in &bank.contexts {
        templates.extend(ctx.train.iter().chain(ctx.held_out.iter()));
    }
    let mut realized = Vec::new();
    for t in &templates {
        for &a in &names {
            if t.contains("{b}") {
                for &b in &names {
                    realized.push(t.replace("{name}", a).replace("{a}", a).replace("{b}", b));
                }
            } else {
                realized.push(t.replace("{name}", a).replace("{a}", a));
            }
        }
        for g in &glyphs {
            realized.push(t.replace("{glyph}", g));
        }
        for (&c, &cat) in colors.iter().zip(&categories) {
            realized.push(t.replace("{color}", c).replace("{category_word}", cat));
        }
    }
    for a in &names {
        realized.push(format!("I will pick up the {a}."));
        realized.push(format!("I will put the {a} into the drawer."));
        for b in &names {
            realized.push(format!("I will move the {a} near the {b}."));
            realized.push(format!("I will put the {a} on the {b}."));
        }
    }
    realized.push("I will open the drawer. I will close the drawer.".to_string());
    let mut with_synonyms = Vec::new();
    for r in &realized {
        let (s, changed) = apply_synonyms(r, &bank.held_out_synonyms);
        if changed {
            with_synonyms.push(s);
        }
    }
    realized.extend(with_synonyms);
    // Instructions are asked through the action question, which strips
    // trailing punctuation and appends '?', producing new word forms.
    let questions: Vec<String> = realized.iter().map(|r| action_question(r)).collect();
    out.extend(realized);
    out.extend(questions);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_tokenizer;

    #[test]
    fn default_config_validates_and_round_trips_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_fields_are_named_in_the_error() {
        let mut cfg = RunConfig::default();
        cfg.data.episodes = 0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("data.episodes"), "{err}");
        let mut cfg = RunConfig::default();
        cfg.model.preset = "galactic".into();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("model.preset"), "{err}");
        let bad: Result<RunConfig, _> = toml::from_str("definitely_not_a_field = 1");
        assert!(bad.is_err(), "unknown fields must be rejected");
    }

    #[test]
    fn builders_apply_overrides() {
        let mut cfg = RunConfig::default();
        cfg.model.num_queries = Some(6);
        cfg.model.horizon = Some(4);
        cfg.model.use_film = false;
        cfg.train.lr = 1e-3;
        let vlm = cfg.backbone_config(64);
        assert_eq!(vlm.num_queries_n, 6);
        let expert = cfg.expert_config(vlm.hidden_d);
        assert_eq!(expert.horizon_h, 4);
        assert!(!expert.use_film);
        let plan = cfg.stage_plan("stage2");
        assert_eq!(plan.lr, 1e-3);
        assert_eq!(plan.mm_per_cycle, 1);
        assert_eq!(plan.manip_per_cycle, 7);
    }

    #[test]
    fn template_vocabulary_covers_benchmark_instructions() {
        let registry = AttributeRegistry::builtin();
        let bank = TemplateBank::builtin();
        let chunks = template_realizations(&registry, &bank);
        let tok = build_tokenizer(chunks.iter().map(String::as_str)).unwrap();
        let suites = crate::bench::build_suites(
            &registry,
            &bank,
            &BenchConfig {
                atomic_tasks: 6,
                aggregation_tasks: 10,
                reasoning_tasks: 11,
                trials_per_task: 1,
                seed: 17,
            },
        )
        .unwrap();
        for task in &suites {
            let q = action_question(&task.instruction);
            for id in tok.tokenize(&q) {
                assert_ne!(
                    id,
                    crate::corpus::UNK,
                    "word of '{q}' missing from vocabulary"
                );
            }
        }
    }
}
