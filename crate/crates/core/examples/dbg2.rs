use microvla::corpus::MotionAnnotatorConfig;
use microvla::env::{generate_episode, EnvConfig, SceneSampler, TaskType};
use microvla::expert::{encode_conditioning, init_expert_net, velocity_forward, ExpertConfig};
use microvla::moe::ParamVars;
use microvla::nn::{derive_rng, AdamW, Params};
use microvla::recipes::{atomic_manip_items, fit_normalizer};
use microvla::registry::AttributeRegistry;
use microvla::tensor::Tape;
use rand::{Rng, RngCore};

// Supervised probe: can the action expert alone regress the demonstrated
// chunk from (image, proprio), with constant latents? Reports the MSE split
// into the overall value and the value of the best scene-independent
// predictor, so conditioning gains are visible.
fn main() {
    let seed = 7u64;
    let registry = AttributeRegistry::builtin();
    let env_cfg = EnvConfig::default();
    let mut sampler = SceneSampler::training(&registry);
    sampler.min_objects = 1;
    sampler.max_objects = 1;
    let n_eps: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(400);
    let steps: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(3000);
    let patch: usize = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(8);

    let mut episodes = Vec::new();
    let mut stream = 0u64;
    while episodes.len() < n_eps {
        let s = derive_rng(seed, 0xE9_0000 + stream).next_u64();
        stream += 1;
        let Ok((scene, _, task)) =
            sampler.sample_scene_and_task(&registry, s, &[TaskType::Pick])
        else {
            continue;
        };
        if let Ok(ep) = generate_episode(&scene, &task, s, &env_cfg, &registry) {
            episodes.push(ep);
        }
    }
    let film = std::env::args().nth(5).map(|s| s == "film").unwrap_or(false);
    let noise_latents = std::env::args().nth(6).map(|s| s == "noise").unwrap_or(false);
    println!("film: {film}, noise_latents: {noise_latents}");
    let hidden: usize = std::env::args().nth(7).map(|s| s.parse().unwrap()).unwrap_or(48);
    let layers: usize = std::env::args().nth(8).map(|s| s.parse().unwrap()).unwrap_or(2);
    println!("hidden {hidden}, layers {layers}");
    let cfg = ExpertConfig {
        use_film: film,
        vision_patch: patch,
        hidden,
        layers,
        ..ExpertConfig::desk(48)
    };
    let norm = fit_normalizer(&episodes);
    let tok = microvla::corpus::build_tokenizer(["pick up the lemon"]).unwrap();
    let items = atomic_manip_items(
        &episodes,
        &tok,
        &MotionAnnotatorConfig::default(),
        &norm,
        cfg.horizon_h,
        cfg.vision_image,
        false,
        1,
        seed,
    )
    .unwrap();
    println!("items: {}", items.len());

    // Marginal floor: variance of the chunks around their mean.
    let mut mean = ndarray::Array2::<f64>::zeros(items[0].chunk.dim());
    for it in &items {
        mean = mean + &it.chunk;
    }
    mean = mean / items.len() as f64;
    let floor: f64 = items
        .iter()
        .map(|it| (&it.chunk - &mean).mapv(|x| x * x).mean().unwrap())
        .sum::<f64>()
        / items.len() as f64;
    println!("marginal-mean MSE floor: {floor:.4}");

    let mut rng = derive_rng(seed, 0x55);
    let mut params = Params::new();
    init_expert_net(&mut params, &mut rng, &cfg);
    let latents = ndarray::Array2::zeros((1, cfg.latent_dim));
    let mut lat_rng = derive_rng(seed, 0x1A7);
    let item_latents: Vec<ndarray::Array2<f64>> = items
        .iter()
        .map(|_| {
            if noise_latents {
                ndarray::Array2::from_shape_fn((1, cfg.latent_dim), |_| {
                    lat_rng.gen_range(-1.5..1.5)
                })
            } else {
                latents.clone()
            }
        })
        .collect();
    let zeros = ndarray::Array2::zeros((cfg.horizon_h, 7));
    let use_flow = std::env::args().nth(4).map(|s| s == "flow").unwrap_or(false);
    let mut noise_rng = derive_rng(seed, 0x99);
    println!("objective: {}", if use_flow { "flow" } else { "direct" });
    let mut opt = AdamW::new(1e-3);
    for step in 0..steps {
        let mut t = Tape::new();
        let mut pv = ParamVars::new(&params);
        let mut losses = Vec::new();
        for _ in 0..4 {
            let idx = rng.gen_range(0..items.len());
            let it = &items[idx];
            let lv = t.constant(item_latents[idx].clone());
            let cond =
                encode_conditioning(&mut t, &mut pv, &cfg, Some(&it.image), lv, Some(&it.proprio))
                    .unwrap();
            if use_flow {
                let fm = microvla::expert::flow_loss(
                    &mut t, &mut pv, &cfg, &cond, &it.chunk, &mut noise_rng,
                )
                .unwrap();
                losses.push(fm);
            } else {
                let (_, v) = velocity_forward(&mut t, &mut pv, &cfg, &cond, &zeros, 0.0).unwrap();
                let target = t.constant(it.chunk.clone());
                let d = t.sub(v, target);
                let sq = t.mul(d, d);
                losses.push(t.mean_all(sq));
            }
        }
        let mut acc = losses[0];
        for l in &losses[1..] {
            acc = t.add(acc, *l);
        }
        let loss = t.scale(acc, 0.25);
        let lv = t.value(loss)[[0, 0]];
        if step % 500 == 0 {
            println!("step {step}: mse {lv:.4}");
        }
        let grads = t.backward(loss);
        opt.apply(&mut params, &grads, |n| n.starts_with("expert."));
    }

    // Held-in fit quality by direction sign on the first row.
    let mut sign_hits = 0usize;
    let mut total = 0usize;
    for (idx, it) in items.iter().enumerate().take(200) {
        let latents = &item_latents[idx];
        let pred = if use_flow {
            let mut acc = ndarray::Array2::<f64>::zeros((cfg.horizon_h, 7));
            let n = 16;
            for _ in 0..n {
                let c = microvla::expert::sample_chunk(
                    &params,
                    &cfg,
                    Some(&it.image),
                    &latents,
                    Some(&it.proprio),
                    &mut noise_rng,
                )
                .unwrap();
                acc = acc + c;
            }
            acc / n as f64
        } else {
            let mut t = Tape::new();
            let mut pv = ParamVars::new(&params);
            let lv = t.constant(latents.clone());
            let cond =
                encode_conditioning(&mut t, &mut pv, &cfg, Some(&it.image), lv, Some(&it.proprio))
                    .unwrap();
            let (_, v) = velocity_forward(&mut t, &mut pv, &cfg, &cond, &zeros, 0.0).unwrap();
            t.value(v).to_owned()
        };
        for c in 0..2 {
            if it.chunk[[0, c]].abs() > 0.05 {
                total += 1;
                if pred[[0, c]].signum() == it.chunk[[0, c]].signum() {
                    sign_hits += 1;
                }
            }
        }
    }
    println!("direction sign accuracy on row 0 (x,y): {sign_hits}/{total}");
}
