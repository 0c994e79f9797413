use microvla::corpus::{build_tokenizer, generate_multimodal_corpus, MotionAnnotatorConfig};
use microvla::env::{generate_episode, EnvConfig, SceneSampler, TaskType};
use microvla::expert::ExpertConfig;
use microvla::infer::{rollout, ControlLoopConfig};
use microvla::moe::MoeConfig;
use microvla::nn::derive_rng;
use microvla::recipes::{
    atomic_manip_items, fit_normalizer, language_items, run_stage0, run_stage1, ModelBundle,
    StagePlan,
};
use microvla::registry::AttributeRegistry;
use microvla::vlm::BackboneConfig;
use rand::RngCore;
use std::collections::HashMap;

fn main() {
    let seed = 0xACCEu64;
    let registry = AttributeRegistry::builtin();
    let bank = microvla::corpus::TemplateBank::builtin();
    let env_cfg = EnvConfig::default();
    let mut sampler = SceneSampler::training(&registry);
    if std::env::args().nth(3).map(|s| s == "1").unwrap_or(false) {
        sampler.min_objects = 1;
        sampler.max_objects = 1;
    }
    let n_eps: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(600);
    let s1_steps: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(800);

    let mut episodes = Vec::new();
    let mut stream = 0u64;
    let tasks = [TaskType::Pick];
    while episodes.len() < n_eps {
        let s = derive_rng(seed, 0xE9_0000 + stream).next_u64();
        stream += 1;
        let Ok((scene, _, task)) = sampler.sample_scene_and_task(&registry, s, &tasks) else {
            continue;
        };
        if let Ok(ep) = generate_episode(&scene, &task, s, &env_cfg, &registry) {
            episodes.push(ep);
        }
    }
    let succ = episodes.iter().filter(|e| e.success).count();
    println!("episodes: {} ({} successful)", episodes.len(), succ);
    let lens: Vec<usize> = episodes.iter().map(|e| e.steps.len()).collect();
    println!("episode lengths: min {} max {}", lens.iter().min().unwrap(), lens.iter().max().unwrap());

    let mut dialogues = generate_multimodal_corpus(&sampler, &registry, &bank, 96, seed).unwrap();
    let mut chunks = microvla::config::template_realizations(&registry, &bank);
    for d in &dialogues {
        for t in &d.turns {
            chunks.push(t.text.clone());
        }
    }
    for ep in &episodes {
        chunks.push(ep.instruction.clone());
    }
    let tok = build_tokenizer(chunks.iter().map(|s| s.as_str())).unwrap();
    let vlm = BackboneConfig::desk(tok.vocab_size());
    let ex = ExpertConfig::desk(vlm.hidden_d);
    let horizon = ex.horizon_h;
    let mut bundle = ModelBundle::init(vlm, ex, MoeConfig::default(), tok, seed);
    let side = bundle.image_side();
    for d in &mut dialogues {
        d.encode(&bundle.tokenizer);
    }
    let no_eps: HashMap<String, &microvla::env::Episode> = HashMap::new();
    let items = language_items(&dialogues, &no_eps, &registry, side).unwrap();
    let r0 = run_stage0(&mut bundle, &items, &StagePlan::stage0(300, seed)).unwrap();
    println!("stage0 loss {:.4} -> {:.4}", r0.first_loss, r0.final_loss);

    bundle.normalizer = fit_normalizer(&episodes);
    let manip = atomic_manip_items(
        &episodes,
        &bundle.tokenizer,
        &MotionAnnotatorConfig::default(),
        &bundle.normalizer,
        horizon,
        side,
        true,
        2,
        seed,
    )
    .unwrap();
    println!("manip items: {}", manip.len());
    let mut plan1 = StagePlan::stage1(s1_steps, seed);
    plan1.log_path = Some(std::path::PathBuf::from("/tmp/metrics1.jsonl"));
    if let Some(lr) = std::env::args().nth(4).and_then(|s| s.parse().ok()) {
        plan1.lr = lr;
    }
    let r1 = run_stage1(&mut bundle, &manip, &plan1).unwrap();
    println!("stage1 loss {:.4} -> {:.4}", r1.first_loss, r1.final_loss);

    // In-sample grounding check: mean sampled chunk vs demo direction at t=0.
    {
        let mut hits = 0usize;
        let mut total = 0usize;
        let mut rng = derive_rng(seed, 0xEEE);
        for ep in episodes.iter().take(60) {
            let img = ep.render_step(0, side, side);
            let prompt = microvla::infer::action_prompt_ids(&bundle, &ep.instruction, false);
            let Ok((_, latents)) = microvla::vlm::greedy_decode_until_act(
                &bundle.params,
                &bundle.vlm,
                Some(&bundle.moe),
                bundle.gating,
                &prompt,
                Some(&img),
                16,
            ) else {
                continue;
            };
            let mut acc = ndarray::Array2::<f64>::zeros((bundle.expert.horizon_h, 7));
            for _ in 0..8 {
                let c = microvla::expert::sample_chunk(
                    &bundle.params,
                    &bundle.expert,
                    Some(&img),
                    &latents,
                    Some(&ep.states[0].proprio()),
                    &mut rng,
                )
                .unwrap();
                acc = acc + c;
            }
            acc = acc / 8.0;
            let pred = bundle.normalizer.denormalize_chunk(&acc);
            for c in 0..2 {
                let demo = ep.steps[0].action[c];
                if demo.abs() > 0.02 {
                    total += 1;
                    if pred[[0, c]].signum() == demo.signum() {
                        hits += 1;
                    }
                }
            }
        }
        println!("in-sample t=0 direction sign accuracy: {hits}/{total}");
    }

    // Compare a sampled chunk against the demonstration at t=0.
    let ep = episodes.iter().find(|e| e.success).unwrap();
    let img = ep.render_step(0, side, side);
    let prompt = microvla::infer::action_prompt_ids(&bundle, &ep.instruction, false);
    let out = microvla::vlm::greedy_decode_until_act(
        &bundle.params,
        &bundle.vlm,
        Some(&bundle.moe),
        bundle.gating,
        &prompt,
        Some(&img),
        16,
    );
    match &out {
        Ok((resp, latents)) => {
            println!("decoded response: '{}'", bundle.tokenizer.detokenize(resp));
            let mut rng = derive_rng(seed, 1);
            let chunk = microvla::expert::sample_chunk(
                &bundle.params,
                &bundle.expert,
                Some(&img),
                latents,
                Some(&ep.states[0].proprio()),
                &mut rng,
            )
            .unwrap();
            let chunk = bundle.normalizer.denormalize_chunk(&chunk);
            println!("model chunk row0: {:?}", chunk.row(0).to_vec());
            println!("demo action    0: {:?}", ep.steps[0].action);
            println!("model chunk row3: {:?}", chunk.row(3).to_vec());
            println!("demo action    3: {:?}", ep.steps[3].action);
        }
        Err(e) => println!("decode failed: {e}"),
    }

    let cfg = ControlLoopConfig::default();
    let mut wins = 0;
    for i in 0..20 {
        let s = derive_rng(seed, 0xF1_0000 + i).next_u64();
        let Ok((scene, _, task)) = sampler.sample_scene_and_task(&registry, s, &tasks) else {
            continue;
        };
        let mut found = None;
        for att in 0..32u64 {
            let rs = s.wrapping_add(att);
            if let Ok(st) = microvla::env::reset(&scene, rs, &registry) {
                if microvla::env::is_solvable(&st, &task) {
                    found = Some((rs, st));
                    break;
                }
            }
        }
        let Some((rs, st)) = found else { continue };
        let instruction = microvla::env::atomic_instruction(&task, &st, &registry);
        let trace = rollout(&bundle, &scene, &task, &instruction, &registry, &env_cfg, &cfg, rs);
        if trace.success() {
            wins += 1;
        }
        if i < 5 {
            let resp = trace.steps.iter().find_map(|s| s.response_text.clone());
            println!(
                "trial {i}: '{}' status {:?} steps {} resp {:?}",
                instruction,
                trace.status,
                trace.steps.len(),
                resp
            );
        }
    }
    println!("rollout wins: {wins}/20");
}
