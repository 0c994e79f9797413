//! Full-stack acceptance checks: exact math oracles for the flow sampler and
//! the adapter mixture, gradient verification, decode parity, freeze audits,
//! and end-to-end training quality on the tabletop benchmark. The trained
//! pipeline (episodes, corpora, all four checkpoints) is built once and
//! shared across the heavier checks.

use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use ndarray::Array2;
use rand::{Rng, RngCore};

use microvla::bench::{
    apply_synonyms, build_suites, evaluate, verify_disjoint, BenchConfig, BenchTask, Suite,
};
use microvla::config::template_realizations;
use microvla::corpus::dialogue::action_question;
use microvla::corpus::{
    annotate_language_motion, build_tokenizer, generate_multimodal_corpus, generate_vla_it,
    resolve_record, DialogueMode, MotionAnnotatorConfig, RecordKind, VlaItRecord, EOS,
};
use microvla::env::{
    atomic_instruction, generate_episode, is_solvable, render, reset, EnvConfig, Episode,
    SceneSampler, TaskType,
};
use microvla::expert::{
    encode_conditioning, flow_loss, flow_loss_fixed, init_expert_net, integrate_field,
    interpolate, sample_chunk, sample_tau, tau_cdf, ExpertConfig, ACTION_DIM,
};
use microvla::infer::{dual_frequency_sweep, rollout, ControlLoopConfig, SweepTask};
use microvla::moe::{
    adapted_linear_mat, init_expert, lora_param_names, GatingPlan, Lambdas, MoeActive, MoeConfig,
    ParamVars,
};
use microvla::nn::{derive_rng, AdamW, Params};
use microvla::recipes::{
    atomic_manip_items, fit_normalizer, language_items, nested_fraction, qa_probe, run_fft_baseline,
    run_stage0, run_stage1, run_stage2, vlait_items, vqa_accuracy, ModelBundle,
    QaProbe, StagePlan, StageReport,
};
use microvla::registry::AttributeRegistry;
use microvla::tensor::{Grads, Mat, Tape};
use microvla::vlm::{
    compute_gating_tape, forward_tape, greedy_decode_text, init_backbone, is_backbone_base,
    lm_loss, BackboneConfig,
};

const SEED: u64 = 0xACCE;

const ALL_TASKS: [TaskType; 6] = [
    TaskType::Pick,
    TaskType::MoveNear,
    TaskType::PutOn,
    TaskType::PutInDrawer,
    TaskType::OpenDrawer,
    TaskType::CloseDrawer,
];

// ---------------------------------------------------------------------------
// Exact flow-matching oracles (no training involved).

fn flow_cfg(n: usize) -> ExpertConfig {
    ExpertConfig {
        euler_steps_n: n,
        use_vision: false,
        use_proprio: false,
        strict_velocity_sign: false,
        ..ExpertConfig::desk(8)
    }
}

fn rand_chunk(rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64) -> Mat {
    Array2::from_shape_fn((8, ACTION_DIM), |_| rng.gen_range(lo..hi))
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[test]
fn a01_euler_integrator_matches_closed_form_fields() {
    let mut rng = derive_rng(SEED, 0x01);
    let a = rand_chunk(&mut rng, -1.0, 1.0);
    let eps = rand_chunk(&mut rng, -1.0, 1.0);

    // Interpolation endpoints are exact, not merely close.
    assert_eq!(interpolate(&a, &eps, 1.0).unwrap(), a);
    assert_eq!(interpolate(&a, &eps, 0.0).unwrap(), eps);

    // For a point-mass target the velocity field (A* - a) / (1 - tau)
    // transports any start exactly onto A* under the solver's tau grid.
    let target = rand_chunk(&mut rng, -0.9, 0.9);
    for n in [5usize, 10, 20] {
        let cfg = flow_cfg(n);
        let a0 = rand_chunk(&mut rng, -1.0, 1.0);
        let t = target.clone();
        let got = integrate_field(&cfg, a0, |a_tau, tau| {
            let denom = (1.0 - tau).max(1.0 / n as f64);
            (&t - a_tau) / denom
        })
        .unwrap();
        let err = max_abs_diff(&got, &target);
        assert!(err <= 1e-6, "point-mass transport error {err} at n={n}");
    }

    // The attractor field dA/dtau = M - A has the closed form
    // A(1) = M + (A0 - M) e^{-1}; forward Euler's error halves with n.
    let m = rand_chunk(&mut rng, -1.0, 1.0);
    let a0 = rand_chunk(&mut rng, -1.0, 1.0);
    let exact = &m + &((&a0 - &m) * (-1.0f64).exp());
    let mut errs = Vec::new();
    for n in [5usize, 10, 20] {
        let cfg = flow_cfg(n);
        let mv = m.clone();
        let got = integrate_field(&cfg, a0.clone(), |a_tau, _| &mv - a_tau).unwrap();
        errs.push(max_abs_diff(&got, &exact));
    }
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!(
            (1.6..=2.4).contains(&ratio),
            "euler error ratio {ratio} outside [1.6, 2.4] (errors {errs:?})"
        );
    }

    // The sign-flipped convention (regress eps - A, integrate -v) produces
    // the identical trajectory.
    let strict = ExpertConfig {
        strict_velocity_sign: true,
        ..flow_cfg(10)
    };
    let mv = m.clone();
    let flipped = integrate_field(&strict, a0.clone(), |a_tau, _| a_tau - &mv).unwrap();
    let plain = integrate_field(&flow_cfg(10), a0, |a_tau, _| &m - a_tau).unwrap();
    assert!(max_abs_diff(&flipped, &plain) <= 1e-12);
    println!("PASS a01: endpoints exact, transport <=1e-6, euler errors {errs:?}");
}

#[test]
fn a02_tau_sampler_matches_analytic_cdf() {
    let cfg = ExpertConfig::desk(8);
    let mut rng = derive_rng(SEED, 0x02);
    let n = 100_000usize;
    let mut draws: Vec<f64> = (0..n).map(|_| sample_tau(&mut rng, &cfg)).collect();
    draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut ks = 0.0f64;
    for (i, x) in draws.iter().enumerate() {
        let f = tau_cdf(*x, &cfg);
        ks = ks.max((f - i as f64 / n as f64).abs());
        ks = ks.max((f - (i + 1) as f64 / n as f64).abs());
    }
    assert!(ks < 0.02, "KS statistic {ks} >= 0.02 at {n} draws");
    println!("PASS a02: KS = {ks:.5} over {n} draws");
}

#[test]
fn a03_adapter_mixture_algebra_is_exact() {
    let cfg = MoeConfig {
        rank: 3,
        alpha: 6.0,
        dropout_p: 0.0,
        k_experts: 2,
        raw_alpha: false,
    };
    let mut rng = derive_rng(SEED, 0x03);
    let (d_in, d_out) = (6usize, 5usize);
    let mut params = Params::new();
    params.init_linear(&mut rng, "lin", d_in, d_out);
    let targets = vec![("lin".to_string(), d_in, d_out)];
    init_expert(&mut params, &mut rng, &cfg, "action", &targets);
    init_expert(&mut params, &mut rng, &cfg, "language", &targets);

    let base = |params: &Params, x: &Mat| x.dot(params.get("lin.w")) + params.get("lin.b");
    let x = Array2::from_shape_fn((4, d_in), |_| rng.gen_range(-1.0..1.0f64));

    // Freshly initialized adapters (B = 0) are an exact no-op at any mixture.
    let y = adapted_linear_mat(&params, &x, "lin", Some((&cfg, &Lambdas::Fixed(vec![0.7, 0.3]))));
    assert_eq!(y, base(&params, &x), "zero-B adapters changed the output");

    // Randomize both adapters, then an all-zero mixture is still exact.
    for e in ["action", "language"] {
        let (_, bn) = lora_param_names(e, "lin");
        params.init_normal(&mut rng, &bn, cfg.rank, d_out, 0.3);
    }
    let y = adapted_linear_mat(&params, &x, "lin", Some((&cfg, &Lambdas::Fixed(vec![0.0, 0.0]))));
    assert_eq!(y, base(&params, &x), "zero mixture failed to disable adapters");

    // A one-hot mixture equals a single hand-computed low-rank update.
    let (an, bn) = lora_param_names("action", "lin");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = Array2::from_shape_fn((1, d_in), |_| rng.gen_range(-2.0..2.0f64));
        let y = adapted_linear_mat(&params, &x, "lin", Some((&cfg, &Lambdas::Fixed(vec![1.0, 0.0]))));
        let oracle =
            base(&params, &x) + x.dot(params.get(&an)).dot(params.get(&bn)) * cfg.scale();
        worst = worst.max(max_abs_diff(&y, &oracle));
    }
    assert!(worst <= 1e-6, "one-hot mixture drifted {worst} from the oracle");
    println!("PASS a03: no-op and zero-mixture exact, one-hot worst diff {worst:.2e}");
}

// ---------------------------------------------------------------------------
// Gradient verification against central finite differences.

fn pick_coords(grads: &Grads, params: &Params, must_contain: &str, count: usize) -> Vec<(String, usize, usize)> {
    let mut names: Vec<String> = params
        .names()
        .filter(|n| {
            grads
                .get(n)
                .map(|g| g.iter().any(|x| x.abs() > 1e-10))
                .unwrap_or(false)
        })
        .cloned()
        .collect();
    names.sort();
    assert!(
        names.iter().any(|n| n.contains(must_contain)),
        "no live gradients under '{must_contain}'"
    );
    let mut coords = Vec::new();
    // Top-|grad| coordinate plus one interior coordinate per tensor.
    for n in &names {
        let g = grads.get(n).unwrap();
        let mut best = (0usize, 0usize, 0.0f64);
        for ((r, c), v) in g.indexed_iter() {
            if v.abs() > best.2 {
                best = (r, c, v.abs());
            }
        }
        coords.push((n.clone(), best.0, best.1));
        let (r2, c2) = (g.nrows() / 2, g.ncols() / 2);
        if (r2, c2) != (best.0, best.1) && g[[r2, c2]].abs() > 1e-10 {
            coords.push((n.clone(), r2, c2));
        }
    }
    // Keep every coordinate of the required family, fill the rest evenly.
    let (keep, rest): (Vec<_>, Vec<_>) = coords
        .into_iter()
        .partition(|(n, _, _)| n.contains(must_contain));
    let mut out = keep;
    let stride = (rest.len() / count.saturating_sub(out.len()).max(1)).max(1);
    out.extend(rest.into_iter().step_by(stride));
    out.truncate(count.max(out.len().min(count + 8)));
    assert!(out.len() >= count, "only {} checkable parameters", out.len());
    out
}

fn check_grads<F: Fn(&Params) -> f64>(
    params: &mut Params,
    grads: &Grads,
    loss: F,
    must_contain: &str,
    label: &str,
) {
    let coords = pick_coords(grads, params, must_contain, 64);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, r, c) in &coords {
        let orig = params.get(name)[[*r, *c]];
        params.get_mut(name)[[*r, *c]] = orig + h;
        let up = loss(params);
        params.get_mut(name)[[*r, *c]] = orig - h;
        let down = loss(params);
        params.get_mut(name)[[*r, *c]] = orig;
        let fd = (up - down) / (2.0 * h);
        let g = grads.get(name).unwrap()[[*r, *c]];
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
        assert!(
            rel < 1e-4,
            "{label} {name}[{r},{c}]: analytic {g:.3e} vs fd {fd:.3e} (rel {rel:.2e})"
        );
        worst = worst.max(rel);
    }
    println!("PASS a04/{label}: {} coordinates, worst rel err {worst:.2e}", coords.len());
}

#[test]
fn a04_analytic_gradients_match_finite_differences() {
    let mut rng = derive_rng(SEED, 0x04);

    // Language loss through learned gating: base forward for the mixture
    // weights, adapted forward for the logits, so scale-head gradients flow.
    let vlm = BackboneConfig::desk(32);
    let moe = MoeConfig {
        dropout_p: 0.0,
        ..MoeConfig::default()
    };
    let mut params = Params::new();
    init_backbone(&mut params, &mut rng, &vlm);
    for e in ["action", "language"] {
        init_expert(&mut params, &mut rng, &moe, e, &vlm.adapter_targets());
        for (t, _, d_out) in vlm.adapter_targets() {
            let (_, bn) = lora_param_names(e, &t);
            params.init_normal(&mut rng, &bn, moe.rank, d_out, 0.05);
        }
    }
    // Give the zero-initialized gating head nonzero weights so its inputs
    // matter at first order.
    params.init_normal(&mut rng, "vlm.scale_head.2.w", vlm.scale_head_hidden, 2, 0.1);

    let registry = AttributeRegistry::builtin();
    let sampler = SceneSampler::training(&registry);
    let (scene, state, _) = sampler
        .sample_scene_and_task(&registry, SEED, &[TaskType::Pick])
        .unwrap();
    let image = render(&state, vlm.image_size, vlm.image_size);
    let tokens: Vec<u32> = vec![7, 12, 3, 25, 9, 17, 4, 30];
    let mask: Vec<bool> = (0..tokens.len()).map(|i| i >= 2).collect();

    let lm_value = |params: &Params| -> (f64, Option<Grads>) {
        let mut t = Tape::new();
        let mut pv = ParamVars::new(params);
        let gate = compute_gating_tape(&mut t, &mut pv, &vlm, &tokens, Some(&image), false).unwrap();
        let active = MoeActive::inference(&moe, Lambdas::Tape(gate));
        let (out, _) =
            forward_tape(&mut t, &mut pv, &vlm, &tokens, Some(&image), false, Some(active))
                .unwrap();
        let loss = lm_loss(&mut t, out.logits, &tokens, &mask);
        let v = t.value(loss)[[0, 0]];
        let g = t.backward(loss);
        (v, Some(g))
    };
    let (_, grads) = lm_value(&params);
    check_grads(
        &mut params,
        &grads.unwrap(),
        |p| lm_value(p).0,
        "scale_head",
        "lm",
    );

    // Flow loss through the action expert, including the feature-wise
    // modulation of the vision tokens by the latent summary.
    let ex = ExpertConfig {
        hidden: 24,
        ..ExpertConfig::desk(16)
    };
    let mut eparams = Params::new();
    init_expert_net(&mut eparams, &mut rng, &ex);
    for n in ["expert.film.gamma.w", "expert.film.beta.w"] {
        eparams.init_normal(&mut rng, n, ex.latent_dim, ex.hidden, 0.05);
    }
    let eimage = render(&state, ex.vision_image, ex.vision_image);
    let latents = Array2::from_shape_fn((3, ex.latent_dim), |_| rng.gen_range(-0.5..0.5f64));
    let proprio = [0.1, -0.2, 0.3, 0.0, 0.5, -0.1, 0.2, 1.0];
    let a = Array2::from_shape_fn((ex.horizon_h, ACTION_DIM), |_| rng.gen_range(-0.8..0.8f64));
    let eps = Array2::from_shape_fn((ex.horizon_h, ACTION_DIM), |_| rng.gen_range(-1.0..1.0f64));
    let _ = scene;

    let fm_value = |params: &Params| -> (f64, Option<Grads>) {
        let mut t = Tape::new();
        let mut pv = ParamVars::new(params);
        let lv = t.constant(latents.clone());
        let cond =
            encode_conditioning(&mut t, &mut pv, &ex, Some(&eimage), lv, Some(&proprio)).unwrap();
        let loss = flow_loss_fixed(&mut t, &mut pv, &ex, &cond, &a, &eps, 0.37).unwrap();
        let v = t.value(loss)[[0, 0]];
        let g = t.backward(loss);
        (v, Some(g))
    };
    let (_, grads) = fm_value(&eparams);
    check_grads(
        &mut eparams,
        &grads.unwrap(),
        |p| fm_value(p).0,
        "film",
        "fm",
    );
}

#[test]
fn a05_query_and_cache_decoding_parity() {
    let mut rng = derive_rng(SEED, 0x05);
    let vlm = BackboneConfig::desk(32);
    let mut params = Params::new();
    init_backbone(&mut params, &mut rng, &vlm);
    let registry = AttributeRegistry::builtin();
    let sampler = SceneSampler::training(&registry);
    let (_, state, _) = sampler
        .sample_scene_and_task(&registry, SEED + 5, &[TaskType::Pick])
        .unwrap();
    let image = render(&state, vlm.image_size, vlm.image_size);
    let tokens: Vec<u32> = vec![4, 19, 2, 8, 27, 11];

    // One parallel pass over all latent-action queries.
    let parallel = {
        let mut t = Tape::new();
        let mut pv = ParamVars::new(&params);
        let (out, _) =
            forward_tape(&mut t, &mut pv, &vlm, &tokens, Some(&image), true, None).unwrap();
        t.value(out.query_hidden.unwrap()).clone()
    };

    // Decoding the queries one at a time must reproduce each row: query k
    // only attends to the prefix and to queries before it.
    let full_qe = params.get("vlm.query_emb").clone();
    let mut worst = 0.0f64;
    for k in 1..=vlm.num_queries_n {
        let mut pk = params.clone();
        pk.insert("vlm.query_emb", full_qe.slice(ndarray::s![..k, ..]).to_owned());
        let cfg_k = BackboneConfig {
            num_queries_n: k,
            ..vlm.clone()
        };
        let mut t = Tape::new();
        let mut pv = ParamVars::new(&pk);
        let (out, _) =
            forward_tape(&mut t, &mut pv, &cfg_k, &tokens, Some(&image), true, None).unwrap();
        let qh = t.value(out.query_hidden.unwrap()).clone();
        let diff = max_abs_diff(
            &qh.slice(ndarray::s![k - 1..k, ..]).to_owned(),
            &parallel.slice(ndarray::s![k - 1..k, ..]).to_owned(),
        );
        worst = worst.max(diff);
    }
    assert!(worst <= 1e-5, "sequential query decode drifted {worst}");

    // Incremental KV-cache decoding equals full recomputation token for token.
    let prompt: Vec<u32> = vec![9, 3, 14, 6];
    let cached = greedy_decode_text(
        &params,
        &vlm,
        None,
        GatingPlan::Uniform,
        &prompt,
        Some(&image),
        12,
        EOS,
    )
    .unwrap();
    let mut seq = prompt.clone();
    let mut recomputed = Vec::new();
    for _ in 0..12 {
        let mut t = Tape::new();
        let mut pv = ParamVars::new(&params);
        let (out, _) =
            forward_tape(&mut t, &mut pv, &vlm, &seq, Some(&image), false, None).unwrap();
        let logits = t.value(out.logits);
        let last = logits.nrows() - 1;
        let next = (0..logits.ncols())
            .max_by(|&a, &b| logits[[last, a]].partial_cmp(&logits[[last, b]]).unwrap())
            .unwrap() as u32;
        if next == EOS {
            break;
        }
        recomputed.push(next);
        seq.push(next);
    }
    assert_eq!(cached, recomputed, "cache and full recompute diverged");
    println!(
        "PASS a05: query parity {worst:.2e}, cached decode of {} tokens identical",
        cached.len()
    );
}

// ---------------------------------------------------------------------------
// Shared trained pipeline for the end-to-end checks.

const EPISODES: usize = 3000;
const RECORD_EPISODES: usize = 800;
const MM_SIZE: usize = 384;
const VQA_HOLDOUT: usize = 48;
const SAMPLES_PER_EPISODE: usize = 2;
const STAGE0_STEPS: usize = 500;
const STAGE1_STEPS: usize = 1500;
const STAGE2_STEPS: usize = 500;
const FFT_STEPS: usize = 500;

struct Heavy {
    registry: AttributeRegistry,
    env_cfg: EnvConfig,
    episodes: Vec<Episode>,
    records: Vec<VlaItRecord>,
    train_instructions: BTreeSet<String>,
    stage0: ModelBundle,
    stage1: ModelBundle,
    stage2: ModelBundle,
    fft: ModelBundle,
    s1_report: StageReport,
    s2_report: StageReport,
    probes: Vec<QaProbe>,
    suites: Vec<BenchTask>,
}

fn heavy() -> &'static Heavy {
    static H: OnceLock<Heavy> = OnceLock::new();
    H.get_or_init(build_heavy)
}

fn build_heavy() -> Heavy {
    let registry = AttributeRegistry::builtin();
    let bank = microvla::corpus::TemplateBank::builtin();
    let env_cfg = EnvConfig::default();
    let sampler = SceneSampler::training(&registry);

    // Scripted demonstrations over all task families.
    let mut episodes = Vec::with_capacity(EPISODES);
    let mut stream = 0u64;
    while episodes.len() < EPISODES {
        let seed = derive_rng(SEED, 0xE9_0000 + stream).next_u64();
        stream += 1;
        let Ok((scene, _, task)) = sampler.sample_scene_and_task(&registry, seed, &ALL_TASKS)
        else {
            continue;
        };
        if let Ok(ep) = generate_episode(&scene, &task, seed, &env_cfg, &registry) {
            episodes.push(ep);
        }
    }

    // Instruction-tuning records over a successful-episode slice.
    let mut records: Vec<VlaItRecord> = Vec::new();
    for (i, ep) in episodes
        .iter()
        .filter(|e| e.success)
        .take(RECORD_EPISODES)
        .enumerate()
    {
        records.extend(generate_vla_it(ep, &registry, &bank, SEED.wrapping_add(i as u64)).unwrap());
    }

    // Captioning / QA corpus and the tokenizer over everything realizable.
    let mut dialogues =
        generate_multimodal_corpus(&sampler, &registry, &bank, MM_SIZE, SEED).unwrap();
    let mut chunks = template_realizations(&registry, &bank);
    for d in &dialogues {
        for t in &d.turns {
            chunks.push(t.text.clone());
        }
    }
    for r in &records {
        chunks.push(r.instruction_text.clone());
        chunks.push(r.response_text.clone());
    }
    for ep in &episodes {
        chunks.push(ep.instruction.clone());
    }
    let tok = build_tokenizer(chunks.iter().map(|s| s.as_str())).unwrap();

    let vlm = BackboneConfig::desk(tok.vocab_size());
    let expert_cfg = ExpertConfig::desk(vlm.hidden_d);
    let horizon = expert_cfg.horizon_h;
    let mut stage0 = ModelBundle::init(vlm, expert_cfg, MoeConfig::default(), tok, SEED);
    let side = stage0.image_side();

    for d in &mut dialogues {
        d.encode(&stage0.tokenizer);
    }
    let no_eps: HashMap<String, &Episode> = HashMap::new();
    let items = language_items(&dialogues, &no_eps, &registry, side).unwrap();
    let split = items.len() - VQA_HOLDOUT;
    let (mm_train, mm_holdout) = items.split_at(split);
    run_stage0(&mut stage0, mm_train, &StagePlan::stage0(STAGE0_STEPS, SEED)).unwrap();
    let probes: Vec<QaProbe> = mm_holdout
        .iter()
        .filter_map(|it| qa_probe(it, &stage0.tokenizer))
        .collect();
    assert!(probes.len() >= VQA_HOLDOUT / 2, "too few QA probes");

    // Action pretraining on the scripted demonstrations.
    let mut stage1 = stage0.clone();
    stage1.normalizer = fit_normalizer(&episodes);
    let manip_atomic = atomic_manip_items(
        &episodes,
        &stage1.tokenizer,
        &MotionAnnotatorConfig::default(),
        &stage1.normalizer,
        horizon,
        side,
        true,
        SAMPLES_PER_EPISODE,
        SEED,
    )
    .unwrap();
    let s1_report = run_stage1(&mut stage1, &manip_atomic, &StagePlan::stage1(STAGE1_STEPS, SEED))
        .unwrap();

    // Instruction tuning on the mixed corpus; the full-finetune baseline
    // consumes the identical mix from the language-only checkpoint.
    let by_id: HashMap<String, &Episode> = episodes.iter().map(|e| (e.id.clone(), e)).collect();
    let (mut manip_mix, mut lang_mix) = vlait_items(
        &records,
        &by_id,
        &registry,
        &stage1.tokenizer,
        &stage1.normalizer,
        horizon,
        side,
        DialogueMode::RespondThenAct,
        SEED,
    )
    .unwrap();
    manip_mix.extend(nested_fraction(&manip_atomic, 0.5, SEED));
    lang_mix.extend_from_slice(mm_train);
    drop(manip_atomic);

    let mut stage2 = stage1.clone();
    let s2_report = run_stage2(
        &mut stage2,
        &lang_mix,
        &manip_mix,
        &StagePlan::stage2(STAGE2_STEPS, SEED),
    )
    .unwrap();

    let mut fft = stage0.clone();
    fft.normalizer = fit_normalizer(&episodes);
    run_fft_baseline(&mut fft, &lang_mix, &manip_mix, &StagePlan::fft(FFT_STEPS, SEED)).unwrap();

    // Everything the models were ever trained on, as raw instruction text.
    let mut train_instructions: BTreeSet<String> = BTreeSet::new();
    for ep in &episodes {
        train_instructions.insert(ep.instruction.clone());
    }
    for r in &records {
        train_instructions.insert(r.instruction_text.clone());
    }
    for d in &dialogues {
        for t in &d.turns {
            train_instructions.insert(t.text.clone());
        }
    }

    let suites = build_suites(
        &registry,
        &bank,
        &BenchConfig {
            atomic_tasks: 6,
            aggregation_tasks: 8,
            reasoning_tasks: 11,
            trials_per_task: 4,
            seed: 17,
        },
    )
    .unwrap();

    Heavy {
        registry,
        env_cfg,
        episodes,
        records,
        train_instructions,
        stage0,
        stage1,
        stage2,
        fft,
        s1_report,
        s2_report,
        probes,
        suites,
    }
}

fn loop_cfg(think: bool) -> ControlLoopConfig {
    ControlLoopConfig {
        think_mode: think,
        max_decode_tokens: if think { 32 } else { 16 },
        ..ControlLoopConfig::default()
    }
}

fn suite_tasks(h: &Heavy, suite: Suite) -> Vec<BenchTask> {
    h.suites.iter().filter(|t| t.suite == suite).cloned().collect()
}

#[test]
fn a06_stage_freezes_hold_bitwise() {
    let h = heavy();
    let mut frozen1 = 0usize;
    for name in h.stage1.params.names() {
        if is_backbone_base(name) {
            assert!(
                h.s1_report.audit.unchanged(name),
                "action pretraining moved backbone weight {name}"
            );
            frozen1 += 1;
        }
    }
    let mut frozen2 = 0usize;
    for name in h.stage2.params.names() {
        if name.starts_with("expert.") || name.starts_with("moe.action.") {
            assert!(
                h.s2_report.audit.unchanged(name),
                "instruction tuning moved action weight {name}"
            );
            frozen2 += 1;
        }
    }
    assert!(frozen1 > 20 && frozen2 > 20, "audit covered too few tensors");
    println!("PASS a06: {frozen1} backbone tensors and {frozen2} action tensors hash-identical");
}

#[test]
fn a07_flow_sampler_recovers_a_point_target() {
    let cfg = ExpertConfig {
        use_vision: false,
        use_proprio: false,
        hidden: 32,
        ..ExpertConfig::desk(16)
    };
    let mut rng = derive_rng(SEED, 0x07);
    let mut params = Params::new();
    init_expert_net(&mut params, &mut rng, &cfg);
    let latents = Array2::from_shape_fn((2, cfg.latent_dim), |_| rng.gen_range(-0.5..0.5f64));
    let target = Array2::from_shape_fn((cfg.horizon_h, ACTION_DIM), |_| rng.gen_range(-0.8..0.8f64));

    let mut opt = AdamW::new(3e-3);
    let steps = 4000usize;
    for step in 0..steps {
        // Cosine decay keeps the late updates small enough to settle.
        opt.lr = 3e-3 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos());
        let mut t = Tape::new();
        let mut pv = ParamVars::new(&params);
        let lv = t.constant(latents.clone());
        let cond = encode_conditioning(&mut t, &mut pv, &cfg, None, lv, None).unwrap();
        let mut losses = Vec::new();
        for _ in 0..8 {
            losses.push(flow_loss(&mut t, &mut pv, &cfg, &cond, &target, &mut rng).unwrap());
        }
        let mut acc = losses[0];
        for l in &losses[1..] {
            acc = t.add(acc, *l);
        }
        let loss = t.scale(acc, 1.0 / 8.0);
        let grads = t.backward(loss);
        opt.apply(&mut params, &grads, |n| n.starts_with("expert."));
    }

    let mut mean = Array2::<f64>::zeros((cfg.horizon_h, ACTION_DIM));
    let n = 256usize;
    for _ in 0..n {
        mean = mean + sample_chunk(&params, &cfg, None, &latents, None, &mut rng).unwrap();
    }
    mean = mean / n as f64;
    let worst = max_abs_diff(&mean, &target);
    assert!(
        worst < 0.05,
        "sampled mean misses the target by {worst} in some coordinate"
    );
    println!("PASS a07: mean of {n} sampled chunks within {worst:.4} of the target");
}

#[test]
fn a08_action_pretraining_reaches_pick_threshold() {
    let h = heavy();
    let sampler = SceneSampler::training(&h.registry);
    let cfg = loop_cfg(false);
    let mut successes = 0usize;
    let mut trials = 0usize;
    let mut stream = 0u64;
    while trials < 100 {
        let seed = derive_rng(SEED, 0xF1_0000 + stream).next_u64();
        stream += 1;
        let Ok((scene, _, task)) =
            sampler.sample_scene_and_task(&h.registry, seed, &[TaskType::Pick])
        else {
            continue;
        };
        let mut found = None;
        for att in 0..32u64 {
            let s = seed.wrapping_add(att);
            if let Ok(st) = reset(&scene, s, &h.registry) {
                if is_solvable(&st, &task) {
                    found = Some((s, st));
                    break;
                }
            }
        }
        let Some((s, st)) = found else { continue };
        let instruction = atomic_instruction(&task, &st, &h.registry);
        let trace = rollout(
            &h.stage1,
            &scene,
            &task,
            &instruction,
            &h.registry,
            &h.env_cfg,
            &cfg,
            s,
        );
        trials += 1;
        if trace.success() {
            successes += 1;
        }
    }
    assert!(
        successes * 100 >= 70 * trials,
        "pick success {successes}/{trials} below 70%"
    );
    println!("PASS a08: {successes}/{trials} fresh pick rollouts succeeded");
}

#[test]
fn a09_generalist_beats_expert_on_situated_suite() {
    let h = heavy();
    let tasks = suite_tasks(h, Suite::SituatedReasoning);
    let expert = evaluate(&h.stage1, &tasks, &h.registry, &h.env_cfg, &loop_cfg(false));
    let plain = evaluate(&h.stage2, &tasks, &h.registry, &h.env_cfg, &loop_cfg(false));
    let think = evaluate(&h.stage2, &tasks, &h.registry, &h.env_cfg, &loop_cfg(true));
    let key = Suite::SituatedReasoning.key();
    let (e, p, t) = (expert.suites[key], plain.suites[key], think.suites[key]);
    println!(
        "a09 situated: expert {}/{}, generalist {}/{}, generalist+think {}/{}",
        e.successes, e.trials, p.successes, p.trials, t.successes, t.trials
    );
    assert!(
        p.successes > e.successes,
        "generalist ({}/{}) not strictly above expert ({}/{})",
        p.successes,
        p.trials,
        e.successes,
        e.trials
    );
    assert!(
        t.successes >= p.successes,
        "thinking hurt: {}/{} vs {}/{}",
        t.successes,
        t.trials,
        p.successes,
        p.trials
    );
    println!("PASS a09: generalist strictly above expert; thinking does not hurt");
}

#[test]
fn a10_language_retention_margins() {
    let h = heavy();
    let s0 = vqa_accuracy(&h.stage0, &h.probes).unwrap();
    let gen = vqa_accuracy(&h.stage2, &h.probes).unwrap();
    let fft = vqa_accuracy(&h.fft, &h.probes).unwrap();
    println!("a10 vqa exact match: stage0 {s0:.3}, generalist {gen:.3}, full-finetune {fft:.3}");
    assert!(
        gen >= s0 - 0.05,
        "generalist forgot language: {gen:.3} vs stage0 {s0:.3}"
    );
    assert!(
        fft <= gen - 0.10,
        "full finetune did not forget: {fft:.3} vs generalist {gen:.3}"
    );
    println!("PASS a10: retention within 5 points, baseline at least 10 points below");
}

#[test]
fn a11_latent_refresh_degrades_gracefully() {
    let h = heavy();
    let tasks: Vec<SweepTask> = suite_tasks(h, Suite::Atomic)
        .into_iter()
        .map(|t| SweepTask {
            scene: t.scene,
            task: t.task,
            instruction: t.instruction,
        })
        .collect();
    let table = dual_frequency_sweep(
        &h.stage2,
        &tasks,
        &[1, 2, 4],
        8,
        &h.registry,
        &h.env_cfg,
        &loop_cfg(false),
        SEED,
    );
    println!("a11 refresh sweep: {table:?}");
    let s: Vec<usize> = table.iter().map(|&(_, succ, _)| succ).collect();
    assert!(
        10 * s[1] >= 9 * s[0],
        "k=2 success {} fell below 90% of k=1 success {}",
        s[1],
        s[0]
    );
    let inversions = s.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(
        inversions <= 1,
        "success not non-increasing in refresh interval: {s:?}"
    );
    println!("PASS a11: successes {s:?} across refresh intervals [1, 2, 4]");
}

#[test]
fn a12_corpus_resolution_and_disjointness() {
    let h = heavy();
    let by_id: HashMap<&str, &Episode> =
        h.episodes.iter().map(|e| (e.id.as_str(), e)).collect();

    // Every generated instruction variant resolves back to its source task
    // through scene semantics alone.
    let mut checked = 0usize;
    for rec in h
        .records
        .iter()
        .filter(|r| matches!(r.kind, RecordKind::CommandRewrite | RecordKind::ContextCreate))
    {
        if checked == 2000 {
            break;
        }
        let ep = by_id[rec.episode_id.as_str()];
        let resolved = resolve_record(rec, &ep.states[0], &h.registry)
            .unwrap_or_else(|e| panic!("{} failed to resolve: {e}", rec.instruction_text));
        let src = rec.source_task.as_ref().expect("rewrites carry a source task");
        assert_eq!(resolved.task_type, src.task_type, "{}", rec.instruction_text);
        assert_eq!(resolved.target_id, src.target_id, "{}", rec.instruction_text);
        assert_eq!(resolved.reference_id, src.reference_id, "{}", rec.instruction_text);
        checked += 1;
    }
    assert_eq!(checked, 2000, "needed 2000 rewrites, corpus held {checked}");

    // Motion labels re-derive from raw poses with an independent oracle.
    let mcfg = MotionAnnotatorConfig::default();
    let mut labels_checked = 0usize;
    for ep in h.episodes.iter().filter(|e| e.states.len() > mcfg.window_w).take(150) {
        let got = annotate_language_motion(ep, &mcfg).unwrap();
        for (t, label) in got.iter().enumerate() {
            let a = &ep.states[t];
            let b = &ep.states[t + mcfg.window_w];
            let mut parts: Vec<&str> = Vec::new();
            let pairs = [
                (b.gripper_pose[0] - a.gripper_pose[0], "move right", "move left"),
                (b.gripper_pose[1] - a.gripper_pose[1], "move forward", "move backward"),
                (b.gripper_pose[2] - a.gripper_pose[2], "move up", "move down"),
            ];
            for (d, pos, neg) in pairs {
                if d > mcfg.axis_threshold {
                    parts.push(pos);
                } else if d < -mcfg.axis_threshold {
                    parts.push(neg);
                }
            }
            if a.gripper_closed != b.gripper_closed {
                parts.push(if b.gripper_closed { "close gripper" } else { "open gripper" });
            }
            let expected = if parts.is_empty() {
                "stop".to_string()
            } else {
                parts.join(" and ")
            };
            assert_eq!(*label, expected, "episode {} step {t}", ep.id);
            labels_checked += 1;
        }
    }
    assert!(labels_checked > 1000, "too few motion labels checked");

    // Held-out benchmark instructions never occur in any training text, and
    // benchmark-only synonyms respond to substitution as designed.
    verify_disjoint(&h.suites, &h.train_instructions).unwrap();
    let syn = std::iter::once(("lemon".to_string(), "citron".to_string())).collect();
    let (swapped, changed) = apply_synonyms("pick up the lemon", &syn);
    assert!(changed && swapped == "pick up the citron");
    let q = action_question("pick up the citron");
    assert!(q.ends_with("citron?"));
    println!(
        "PASS a12: 2000 rewrites resolved, {labels_checked} motion labels re-derived, zero overlap"
    );
}
