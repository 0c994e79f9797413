//! Low-rank expert adapters on the backbone's projections, blended per token
//! by gating coefficients. Two experts: "action" and "language".

use crate::nn::{derive_rng, Params};
use crate::tensor::{Mat, Tape, Var};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const EXPERTS: [&str; 2] = ["action", "language"];
pub const ACTION_EXPERT: usize = 0;
pub const LANGUAGE_EXPERT: usize = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MoeConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub k_experts: usize,
    /// Strict-formula mode scales deltas by alpha instead of alpha/rank.
    pub raw_alpha: bool,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            rank: 4,
            alpha: 8.0,
            dropout_p: 0.05,
            k_experts: 2,
            raw_alpha: false,
        }
    }
}

impl MoeConfig {
    pub fn scale(&self) -> f64 {
        if self.raw_alpha {
            self.alpha
        } else {
            self.alpha / self.rank as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingPlan {
    LearnedTwoPass,
    FixedOneHot(usize),
    Uniform,
}

impl GatingPlan {
    /// Constant coefficients when the plan does not need the scale head.
    pub fn fixed_lambdas(&self, k: usize) -> Option<Vec<f64>> {
        match self {
            GatingPlan::LearnedTwoPass => None,
            GatingPlan::FixedOneHot(e) => {
                let mut l = vec![0.0; k];
                l[*e] = 1.0;
                Some(l)
            }
            GatingPlan::Uniform => Some(vec![1.0 / k as f64; k]),
        }
    }
}

/// Gating coefficients for one forward pass over a T-token sequence.
pub enum Lambdas {
    Fixed(Vec<f64>),
    /// Per-token T×K coefficients on the tape (training).
    Tape(Var),
    /// Per-token T×K coefficients as plain values (inference).
    Value(Mat),
}

/// Everything a forward pass needs to apply the adapters.
pub struct MoeActive<'a> {
    pub cfg: &'a MoeConfig,
    pub lambdas: Lambdas,
    /// Dropout on the rank-space activations, training only.
    pub dropout_rng: Option<ChaCha8Rng>,
}

impl<'a> MoeActive<'a> {
    pub fn inference(cfg: &'a MoeConfig, lambdas: Lambdas) -> Self {
        MoeActive {
            cfg,
            lambdas,
            dropout_rng: None,
        }
    }

    pub fn training(cfg: &'a MoeConfig, lambdas: Lambdas, master_seed: u64, stream: u64) -> Self {
        MoeActive {
            cfg,
            lambdas,
            dropout_rng: if cfg.dropout_p > 0.0 {
                Some(derive_rng(master_seed, stream))
            } else {
                None
            },
        }
    }
}

pub fn lora_param_names(expert: &str, target: &str) -> (String, String) {
    (
        format!("moe.{expert}.{target}.a"),
        format!("moe.{expert}.{target}.b"),
    )
}

/// Registers one expert's adapters over the given projection targets. B is
/// zero so the fresh expert is an exact no-op.
pub fn init_expert(
    params: &mut Params,
    rng: &mut ChaCha8Rng,
    cfg: &MoeConfig,
    expert: &str,
    targets: &[(String, usize, usize)],
) {
    for (target, d_in, d_out) in targets {
        let (a, b) = lora_param_names(expert, target);
        params.init_normal(rng, &a, *d_in, cfg.rank, 0.02);
        params.init_zeros(&b, cfg.rank, *d_out);
    }
}

/// Parameter names of every adapter belonging to `expert`.
pub fn expert_param_names(params: &Params, expert: &str) -> Vec<String> {
    let prefix = format!("moe.{expert}.");
    params
        .names()
        .filter(|n| n.starts_with(&prefix))
        .cloned()
        .collect()
}

/// Caches tape leaves so each parameter enters a tape exactly once.
pub struct ParamVars<'a> {
    pub params: &'a Params,
    cache: HashMap<String, Var>,
}

impl<'a> ParamVars<'a> {
    pub fn new(params: &'a Params) -> Self {
        ParamVars {
            params,
            cache: HashMap::new(),
        }
    }

    pub fn var(&mut self, t: &mut Tape, name: &str) -> Var {
        if let Some(v) = self.cache.get(name) {
            return *v;
        }
        let v = t.param(name, self.params.get(name).clone());
        self.cache.insert(name.to_string(), v);
        v
    }
}

/// y = x W0 + b + sum_i lambda_i * scale_i * (drop(x A_i)) B_i, on the tape.
/// Adapters apply only where the expert owns parameters for the target.
pub fn adapted_linear_tape(
    t: &mut Tape,
    pv: &mut ParamVars,
    x: Var,
    target: &str,
    moe: Option<&mut MoeActive>,
) -> Var {
    let w = pv.var(t, &format!("{target}.w"));
    let b = pv.var(t, &format!("{target}.b"));
    let mut y = t.matmul(x, w);
    y = t.add_row(y, b);
    let Some(moe) = moe else { return y };
    for (i, expert) in EXPERTS.iter().take(moe.cfg.k_experts).enumerate() {
        let (an, bn) = lora_param_names(expert, target);
        if !pv.params.contains(&an) {
            continue;
        }
        let a = pv.var(t, &an);
        let bmat = pv.var(t, &bn);
        let mut h = t.matmul(x, a);
        if let Some(rng) = moe.dropout_rng.as_mut() {
            let (r, c) = {
                let v = t.value(h);
                (v.nrows(), v.ncols())
            };
            let p = moe.cfg.dropout_p;
            let mask = Array2::from_shape_fn((r, c), |_| {
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    1.0 / (1.0 - p)
                }
            });
            let mask = t.constant(mask);
            h = t.mul(h, mask);
        }
        h = t.matmul(h, bmat);
        h = t.scale(h, moe.cfg.scale());
        match &moe.lambdas {
            Lambdas::Fixed(l) => {
                if l[i] == 0.0 {
                    continue;
                }
                h = t.scale(h, l[i]);
            }
            Lambdas::Tape(lv) => {
                let col = t.slice_cols(*lv, i, i + 1);
                h = t.mul_col(h, col);
            }
            Lambdas::Value(m) => {
                let col = t.constant(m.slice(ndarray::s![.., i..i + 1]).to_owned());
                h = t.mul_col(h, col);
            }
        }
        y = t.add(y, h);
    }
    y
}

/// Inference-path counterpart of adapted_linear_tape; no dropout.
pub fn adapted_linear_mat(
    params: &Params,
    x: &Mat,
    target: &str,
    moe: Option<(&MoeConfig, &Lambdas)>,
) -> Mat {
    let w = params.get(&format!("{target}.w"));
    let b = params.get(&format!("{target}.b"));
    let mut y = x.dot(w) + b;
    let Some((cfg, lambdas)) = moe else { return y };
    for (i, expert) in EXPERTS.iter().take(cfg.k_experts).enumerate() {
        let (an, bn) = lora_param_names(expert, target);
        let Some(a) = params.try_get(&an) else { continue };
        let bmat = params.get(&bn);
        let delta = x.dot(a).dot(bmat) * cfg.scale();
        match lambdas {
            Lambdas::Fixed(l) => y = y + delta * l[i],
            Lambdas::Value(m) => {
                let col = m.slice(ndarray::s![.., i..i + 1]);
                y = y + delta * &col;
            }
            Lambdas::Tape(_) => panic!("tape lambdas on the inference path"),
        }
    }
    y
}
