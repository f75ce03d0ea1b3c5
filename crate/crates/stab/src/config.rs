//! Model configuration and its flat `key=value` file format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, StabError};

/// Hyperparameters of the visual path and the toy LM it feeds.
///
/// Serialized as a flat `key=value` text file, one key per line. The nine
/// canonical keys are always written: `T_max`, `H_max`, `W_max`, `p`, `d`,
/// `r`, `d_lm`, `vocab_size`, `seed`. Optional keys (`d_mlp`, `lm_layers`,
/// `lm_heads`, `context`) are written when they differ from their defaults.
/// Unknown keys are ignored on parse so run settings can share the file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Maximum frame count consumed per clip.
    pub t_max: usize,
    /// Maximum frame height/width in pixels.
    pub h_max: usize,
    pub w_max: usize,
    /// Patch size in pixels.
    pub p: usize,
    /// Visual embedding dimension.
    pub d: usize,
    /// Temporal-encoder bottleneck ratio (`d/r` inner channels).
    pub r: usize,
    /// Language-model width.
    pub d_lm: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Hidden width of the sequence-projection MLP (defaults to `d_lm`).
    pub d_mlp: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    /// LM context limit (visual + text positions).
    pub context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            t_max: 8,
            h_max: 448,
            w_max: 448,
            p: 16,
            d: 64,
            r: 4,
            d_lm: 64,
            vocab_size: 64,
            seed: 0,
            d_mlp: 64,
            lm_layers: 2,
            lm_heads: 4,
            context: 512,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: 32×32 frames, 4-pixel patches (8×8 patch
    /// grid, 4×4 after downsampling).
    pub fn toy() -> Self {
        ModelConfig {
            t_max: 8,
            h_max: 32,
            w_max: 32,
            p: 4,
            d: 32,
            r: 4,
            d_lm: 64,
            vocab_size: 64,
            seed: 0,
            d_mlp: 64,
            lm_layers: 2,
            lm_heads: 4,
            context: 512,
        }
    }

    /// Patch-grid extent at the maximum resolution.
    pub fn grid_max(&self) -> (usize, usize) {
        (self.h_max / self.p, self.w_max / self.p)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(StabError::Config(m));
        if self.t_max == 0 {
            return err("T_max must be >= 1".into());
        }
        for (k, v) in [
            ("p", self.p),
            ("d", self.d),
            ("r", self.r),
            ("d_lm", self.d_lm),
            ("vocab_size", self.vocab_size),
            ("d_mlp", self.d_mlp),
            ("lm_layers", self.lm_layers),
            ("lm_heads", self.lm_heads),
            ("context", self.context),
        ] {
            if v == 0 {
                return err(format!("{k} must be positive"));
            }
        }
        if self.h_max % self.p != 0 || self.w_max % self.p != 0 {
            return err(format!(
                "H_max/W_max ({}, {}) must be divisible by p ({})",
                self.h_max, self.w_max, self.p
            ));
        }
        let (gh, gw) = self.grid_max();
        if gh % 2 != 0 || gw % 2 != 0 {
            return err(format!(
                "patch grid ({gh}, {gw}) must have even sides (downsampling halves them)"
            ));
        }
        if self.d % self.r != 0 {
            return err(format!("r ({}) must divide d ({})", self.r, self.d));
        }
        if self.d_lm % self.lm_heads != 0 {
            return err(format!(
                "lm_heads ({}) must divide d_lm ({})",
                self.lm_heads, self.d_lm
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "T_max={}", self.t_max);
        let _ = writeln!(s, "H_max={}", self.h_max);
        let _ = writeln!(s, "W_max={}", self.w_max);
        let _ = writeln!(s, "p={}", self.p);
        let _ = writeln!(s, "d={}", self.d);
        let _ = writeln!(s, "r={}", self.r);
        let _ = writeln!(s, "d_lm={}", self.d_lm);
        let _ = writeln!(s, "vocab_size={}", self.vocab_size);
        let _ = writeln!(s, "seed={}", self.seed);
        if self.d_mlp != self.d_lm {
            let _ = writeln!(s, "d_mlp={}", self.d_mlp);
        }
        let dft = ModelConfig::default();
        if self.lm_layers != dft.lm_layers {
            let _ = writeln!(s, "lm_layers={}", self.lm_layers);
        }
        if self.lm_heads != dft.lm_heads {
            let _ = writeln!(s, "lm_heads={}", self.lm_heads);
        }
        if self.context != dft.context {
            let _ = writeln!(s, "context={}", self.context);
        }
        s
    }

    /// Parse from `key=value` lines. `#` starts a comment; blank lines and
    /// keys this struct does not know are skipped. The nine canonical keys
    /// must all be present.
    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let get = |k: &str| -> Result<u64> {
            let raw = map
                .get(k)
                .ok_or_else(|| StabError::config(format!("missing config key '{k}'")))?;
            raw.parse::<u64>()
                .map_err(|_| StabError::config(format!("key '{k}': invalid integer '{raw}'")))
        };
        let opt = |k: &str, dft: u64| -> Result<u64> {
            match map.get(k) {
                None => Ok(dft),
                Some(raw) => raw
                    .parse::<u64>()
                    .map_err(|_| StabError::config(format!("key '{k}': invalid integer '{raw}'"))),
            }
        };
        let d_lm = get("d_lm")? as usize;
        let dft = ModelConfig::default();
        let cfg = ModelConfig {
            t_max: get("T_max")? as usize,
            h_max: get("H_max")? as usize,
            w_max: get("W_max")? as usize,
            p: get("p")? as usize,
            d: get("d")? as usize,
            r: get("r")? as usize,
            d_lm,
            vocab_size: get("vocab_size")? as usize,
            seed: get("seed")?,
            d_mlp: opt("d_mlp", d_lm as u64)? as usize,
            lm_layers: opt("lm_layers", dft.lm_layers as u64)? as usize,
            lm_heads: opt("lm_heads", dft.lm_heads as u64)? as usize,
            context: opt("context", dft.context as u64)? as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_kv(&text)
    }
}

/// Split `key=value` lines into a map; later duplicates win.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(StabError::config(format!(
                "line {}: expected key=value, got '{line}'",
                ln + 1
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let cfg = ModelConfig::toy();
        let text = cfg.to_kv();
        let back = ModelConfig::from_kv(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_ignored() {
        let mut text = ModelConfig::toy().to_kv();
        text.push_str("batch_size=8\n# a comment\n\n");
        assert!(ModelConfig::from_kv(&text).is_ok());
    }

    #[test]
    fn missing_key_rejected() {
        let text = ModelConfig::toy().to_kv().replace("vocab_size=64\n", "");
        let err = ModelConfig::from_kv(&text).unwrap_err();
        assert!(err.to_string().contains("vocab_size"));
    }

    #[test]
    fn invariants_enforced() {
        let mut cfg = ModelConfig::toy();
        cfg.p = 5; // 32 % 5 != 0
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.h_max = 8; // grid 2 -> after halving 1; still even? 2 is even, ok
        assert!(cfg.validate().is_ok());
        cfg.h_max = 4; // grid 1, odd
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.r = 3; // 32 % 3 != 0
        assert!(cfg.validate().is_err());
    }
}
