//! Named parameter tensors with roles, freeze flags, and seeded init.
//!
//! Parameters live here as plain arrays between steps; each forward pass
//! binds them onto a fresh tape as leaf variables. Iteration order is the
//! insertion order below and is part of the determinism contract.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::config::ModelConfig;
use crate::tensor::{Tape, Var};

/// Which part of the system a tensor belongs to. `Teacher` tensors are
/// permanently frozen and excluded from the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Vision,
    Lm,
    Teacher,
}

impl ParamRole {
    pub fn as_u8(self) -> u8 {
        match self {
            ParamRole::Vision => 0,
            ParamRole::Lm => 1,
            ParamRole::Teacher => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ParamRole::Vision),
            1 => Some(ParamRole::Lm),
            2 => Some(ParamRole::Teacher),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub role: ParamRole,
    pub frozen: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Parameters bound to one tape for a single forward/backward pass.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter '{name}'"))
    }
}

fn uniform(rng: &mut ChaCha20Rng, shape: &[usize], gain: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-gain..gain))
}

impl ParamStore {
    pub fn push(&mut self, name: &str, value: ArrayD<f64>, role: ParamRole, frozen: bool) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter '{name}'"
        );
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            role,
            frozen,
        });
    }

    /// Build the full parameter set for a config, deterministically from
    /// `cfg.seed`. Projection matrices use uniform(±1/√fan_in); biases start
    /// at zero; the fusion gate starts at 0.5 so both fused paths receive
    /// gradient from the first step.
    pub fn init(cfg: &ModelConfig) -> ParamStore {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut s = ParamStore::default();
        let (d, dr, d_lm) = (cfg.d, cfg.d / cfg.r, cfg.d_lm);
        let gd = 1.0 / (d as f64).sqrt();
        let v = ParamRole::Vision;

        let gp = 1.0 / ((3 * cfg.p * cfg.p) as f64).sqrt();
        s.push("patch.weight", uniform(&mut rng, &[3 * cfg.p * cfg.p, d], gp), v, false);
        s.push("patch.bias", ArrayD::zeros(IxDyn(&[d])), v, false);

        s.push("lste.conv1.weight", uniform(&mut rng, &[d, dr], gd), v, false);
        s.push("lste.conv1.bias", ArrayD::zeros(IxDyn(&[dr])), v, false);
        let g2 = 1.0 / ((3 * dr) as f64).sqrt();
        s.push("lste.conv2.weight", uniform(&mut rng, &[3, dr, dr], g2), v, false);
        s.push("lste.conv2.bias", ArrayD::zeros(IxDyn(&[dr])), v, false);
        let g3 = 1.0 / (dr as f64).sqrt();
        s.push("lste.conv3.weight", uniform(&mut rng, &[dr, d], g3), v, false);
        s.push("lste.conv3.bias", ArrayD::zeros(IxDyn(&[d])), v, false);
        let gdpe = 1.0 / 27f64.sqrt();
        s.push("lste.dpe.weight", uniform(&mut rng, &[27, d], gdpe), v, false);
        s.push("lste.dpe.bias", ArrayD::zeros(IxDyn(&[d])), v, false);

        let (gh, gw) = cfg.grid_max();
        let sites = (gh / 2) * (gw / 2);
        s.push("lsd.queries", uniform(&mut rng, &[sites, d], gd), v, false);
        for w in ["wq", "wk", "wv"] {
            s.push(&format!("lsd.attn.{w}"), uniform(&mut rng, &[d, d], gd), v, false);
        }

        s.push("fsra.queries", uniform(&mut rng, &[cfg.t_max, d], gd), v, false);
        for w in ["wq", "wk", "wv"] {
            s.push(&format!("fsra.attn.{w}"), uniform(&mut rng, &[d, d], gd), v, false);
        }

        s.push("gstra.query", uniform(&mut rng, &[1, d], gd), v, false);
        for w in ["wq", "wk", "wv"] {
            s.push(&format!("gstra.attn.{w}"), uniform(&mut rng, &[d, d], gd), v, false);
        }

        s.push("fusion.alpha", ArrayD::from_elem(IxDyn(&[d]), 0.5), v, false);
        s.push("fusion.proj.weight", uniform(&mut rng, &[d, d], gd), v, false);
        s.push("fusion.proj.bias", ArrayD::zeros(IxDyn(&[d])), v, false);

        s.push("seq.row_token", uniform(&mut rng, &[1, d], gd), v, false);
        s.push("seq.mlp.w1", uniform(&mut rng, &[d, cfg.d_mlp], gd), v, false);
        s.push("seq.mlp.b1", ArrayD::zeros(IxDyn(&[cfg.d_mlp])), v, false);
        let gm = 1.0 / (cfg.d_mlp as f64).sqrt();
        s.push("seq.mlp.w2", uniform(&mut rng, &[cfg.d_mlp, d_lm], gm), v, false);
        s.push("seq.mlp.b2", ArrayD::zeros(IxDyn(&[d_lm])), v, false);

        let l = ParamRole::Lm;
        let gl = 1.0 / (d_lm as f64).sqrt();
        s.push("lm.embed", uniform(&mut rng, &[cfg.vocab_size, d_lm], gl), l, false);
        for li in 0..cfg.lm_layers {
            let pre = format!("lm.l{li}");
            s.push(&format!("{pre}.ln1.gamma"), ArrayD::ones(IxDyn(&[d_lm])), l, false);
            s.push(&format!("{pre}.ln1.beta"), ArrayD::zeros(IxDyn(&[d_lm])), l, false);
            for w in ["wq", "wk", "wv", "wo"] {
                s.push(
                    &format!("{pre}.attn.{w}"),
                    uniform(&mut rng, &[d_lm, d_lm], gl),
                    l,
                    false,
                );
            }
            s.push(&format!("{pre}.ln2.gamma"), ArrayD::ones(IxDyn(&[d_lm])), l, false);
            s.push(&format!("{pre}.ln2.beta"), ArrayD::zeros(IxDyn(&[d_lm])), l, false);
            let hidden = 4 * d_lm;
            s.push(&format!("{pre}.ffn.w1"), uniform(&mut rng, &[d_lm, hidden], gl), l, false);
            s.push(&format!("{pre}.ffn.b1"), ArrayD::zeros(IxDyn(&[hidden])), l, false);
            let gh2 = 1.0 / (hidden as f64).sqrt();
            s.push(&format!("{pre}.ffn.w2"), uniform(&mut rng, &[hidden, d_lm], gh2), l, false);
            s.push(&format!("{pre}.ffn.b2"), ArrayD::zeros(IxDyn(&[d_lm])), l, false);
        }
        s.push("lm.lnf.gamma", ArrayD::ones(IxDyn(&[d_lm])), l, false);
        s.push("lm.lnf.beta", ArrayD::zeros(IxDyn(&[d_lm])), l, false);
        s.push("lm.head.weight", uniform(&mut rng, &[d_lm, cfg.vocab_size], gl), l, false);
        s.push("lm.head.bias", ArrayD::zeros(IxDyn(&[cfg.vocab_size])), l, false);

        // teacher draws from its own stream so changing the model layout
        // never perturbs the distillation targets
        let mut trng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x7EAC_4E12_0000_0001);
        let gt = 1.0 / 3f64.sqrt();
        s.push(
            "teacher.map",
            uniform(&mut trng, &[3, d_lm], gt),
            ParamRole::Teacher,
            true,
        );
        s
    }

    pub fn bind(&self, tape: &Tape) -> Bound {
        let mut vars = HashMap::new();
        for p in &self.params {
            let rg = !p.frozen && p.role != ParamRole::Teacher;
            vars.insert(p.name.clone(), tape.leaf(p.value.clone(), rg));
        }
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> &Param {
        &self.params[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        &mut self.params[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Set the freeze flag on every LM tensor (stage-1 contract).
    pub fn set_freeze_lm(&mut self, frozen: bool) {
        for p in &mut self.params {
            if p.role == ParamRole::Lm {
                p.frozen = frozen;
            }
        }
    }

    /// Element count of every tensor whose name starts with `prefix`.
    pub fn count_by_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }
}
