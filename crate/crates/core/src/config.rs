//! TOML configuration with documented defaults and `key=value` overrides.

use std::fmt;
use std::path::Path;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const DEFAULT_SEED: u64 = 17;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub ema: EmaConfig,
    pub brc: BrcConfig,
    pub livt: LivtConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature width of the encoders and the synthesis module.
    pub channels: usize,
    /// Event segments `M`; the voxel grid has `M + 1` bins.
    pub segments: usize,
    /// Residual blocks in each encoder.
    pub res_blocks: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Fwd,
    FwdBwd,
}

/// Alignment pyramid depth: a single level or the full 3-level cascade.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Levels {
    Single,
    Multi,
}

impl Levels {
    pub fn count(self) -> usize {
        match self {
            Levels::Single => 1,
            Levels::Multi => 3,
        }
    }
}

impl Serialize for Levels {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Levels::Single => s.serialize_i64(1),
            Levels::Multi => s.serialize_str("multi"),
        }
    }
}

impl<'de> Deserialize<'de> for Levels {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Levels;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("1 or \"multi\"")
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Levels, E> {
                match v {
                    1 => Ok(Levels::Single),
                    3 => Ok(Levels::Multi),
                    _ => Err(E::custom(format!("unsupported pyramid depth {v}; use 1 or \"multi\""))),
                }
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Levels, E> {
                self.visit_i64(v as i64)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Levels, E> {
                match v {
                    "1" | "single" => Ok(Levels::Single),
                    "multi" | "3" => Ok(Levels::Multi),
                    _ => Err(E::custom(format!("unknown pyramid depth `{v}`; use 1 or \"multi\""))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaConfig {
    pub direction: Direction,
    pub levels: Levels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggle {
    pub enabled: bool,
}

/// Recurrent sweeps run by the compensation stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Fwd,
    Bwd,
    FwdBwd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BrcConfig {
    pub enabled: bool,
    pub direction: Sweep,
    pub attention: Toggle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    Cosine,
    Learnable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Query trilinearly sampled at the continuous target coordinate.
    CrossScale,
    /// Query taken from the nearest LR pixel and nearest time slice.
    Neighborhood,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LivtConfig {
    /// `[T_G, H_G, W_G]`.
    pub local_grid: [usize; 3],
    /// INR channel width.
    pub channels: usize,
    pub pos_encoding: PosEncoding,
    pub attention: AttentionMode,
    /// Positional-encoding frequency count `L`.
    pub frequencies: usize,
    /// Hidden widths of the decoder; a final layer to RGB is appended.
    pub mlp_hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub charbonnier_eps2: f64,
    pub batch_size: usize,
    pub val_every: usize,
    /// Temporal scale of training clips.
    pub t: usize,
    /// Spatial scale of stage 1.
    pub stage1_s: f64,
    /// Spatial scales drawn uniformly in stage 2.
    pub stage2_scales: Vec<f64>,
    /// LR crop side; the GT crop is `crop * s`.
    pub crop: usize,
    pub augment: bool,
    /// HR query pixels supervised per frame per step; 0 supervises every pixel.
    pub query_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Contrast threshold of the event simulator.
    pub threshold: f64,
    /// Frame step between consecutive training clips.
    pub clip_stride: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            model: ModelConfig::default(),
            ema: EmaConfig::default(),
            brc: BrcConfig::default(),
            livt: LivtConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { channels: 64, segments: 7, res_blocks: 5 }
    }
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { direction: Direction::FwdBwd, levels: Levels::Multi }
    }
}

impl Default for Toggle {
    fn default() -> Self {
        Self { enabled: true }
    }
}

impl Default for BrcConfig {
    fn default() -> Self {
        Self { enabled: true, direction: Sweep::FwdBwd, attention: Toggle::default() }
    }
}

impl Default for LivtConfig {
    fn default() -> Self {
        Self {
            local_grid: [3, 3, 3],
            channels: 64,
            pos_encoding: PosEncoding::Cosine,
            attention: AttentionMode::CrossScale,
            frequencies: 10,
            mlp_hidden: vec![256; 4],
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_iters: 2000,
            stage2_iters: 1000,
            lr_max: 1e-4,
            lr_min: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            charbonnier_eps2: 1e-6,
            batch_size: 2,
            val_every: 200,
            t: 8,
            stage1_s: 4.0,
            stage2_scales: vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0],
            crop: 32,
            augment: true,
            query_pixels: 1024,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { threshold: crate::events::DEFAULT_THRESHOLD, clip_stride: 1 }
    }
}

impl Config {
    /// The reduced variant: `M = 5`, 16 INR channels.
    pub fn light() -> Self {
        let mut c = Self::default();
        c.model.segments = 5;
        c.livt.channels = 16;
        c
    }

    /// A tiny model for smoke runs and tests: `C = 8`, `M = 3`.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.model.channels = 8;
        c.model.segments = 3;
        c.model.res_blocks = 2;
        c.livt.channels = 8;
        c.livt.frequencies = 4;
        c.livt.mlp_hidden = vec![64; 4];
        c
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config is not valid TOML: {e}")))?;
        Self::from_table(file, overrides)
    }

    /// Read a TOML file (missing keys take defaults) and apply overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::Parse { path: p.to_path_buf(), msg: e.to_string() })?
            }
            None => toml::Table::new(),
        };
        Self::from_table(file, overrides)
    }

    fn from_table(file: toml::Table, overrides: &[String]) -> Result<Self> {
        let mut v = toml::Value::Table(file);
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        let cfg: Config = v.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply overrides to an already-built config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let toml::Value::Table(t) = toml::Value::try_from(self).expect("config serializes") else {
            unreachable!("config serializes to a table")
        };
        Self::from_table(t, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every key with its default, dotted, in declaration order.
    pub fn documented_keys() -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten("", &toml::Value::try_from(Self::default()).expect("config serializes"), &mut out);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let m = &self.model;
        if m.channels == 0 {
            return bad("model.channels must be >= 1".into());
        }
        if m.segments == 0 {
            return bad("model.segments must be >= 1".into());
        }
        let l = &self.livt;
        let [tg, hg, wg] = l.local_grid;
        if tg == 0 || tg > m.segments + 2 {
            return bad(format!("livt.local_grid T_G = {tg} must lie in [1, model.segments + 2 = {}]", m.segments + 2));
        }
        if hg % 2 == 0 || wg % 2 == 0 {
            return bad(format!("livt.local_grid spatial extent {hg}x{wg} must be odd"));
        }
        if l.channels == 0 {
            return bad("livt.channels must be >= 1".into());
        }
        if l.frequencies == 0 {
            return bad("livt.frequencies must be >= 1".into());
        }
        if l.mlp_hidden.is_empty() || l.mlp_hidden.contains(&0) {
            return bad("livt.mlp_hidden needs at least one positive width".into());
        }
        let t = &self.train;
        if !(t.lr_min < t.lr_max) || t.lr_min < 0.0 {
            return bad(format!("train.lr_min ({}) must be >= 0 and below train.lr_max ({})", t.lr_min, t.lr_max));
        }
        if t.stage1_iters == 0 {
            return bad("train.stage1_iters must be >= 1".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)".into());
        }
        if !(t.charbonnier_eps2 > 0.0) {
            return bad("train.charbonnier_eps2 must be > 0".into());
        }
        if t.batch_size == 0 || t.t == 0 || t.crop == 0 {
            return bad("train.batch_size, train.t and train.crop must be >= 1".into());
        }
        for &s in std::iter::once(&t.stage1_s).chain(&t.stage2_scales) {
            if !(1.0..=8.0).contains(&s) {
                return bad(format!("training scale {s} outside [1, 8]"));
            }
            let gt = t.crop as f64 * s;
            if (gt - gt.round()).abs() > 1e-9 {
                return bad(format!("training scale {s} makes the GT crop {gt} non-integral"));
            }
        }
        if t.stage2_iters > 0 && t.stage2_scales.is_empty() {
            return bad("train.stage2_scales is empty".into());
        }
        if !(self.data.threshold > 0.0) {
            return bad(format!("data.threshold must be > 0, got {}", self.data.threshold));
        }
        if self.data.clip_stride == 0 {
            return bad("data.clip_stride must be >= 1".into());
        }
        Ok(())
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Set `a.b.c=value` inside a TOML table. The value is parsed as TOML and
/// falls back to a bare string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::InvalidConfig(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::InvalidConfig(format!("override `{spec}` has an empty key")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| Error::InvalidConfig(format!("override `{key}`: `{part}` is not a table")))?;
        node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node.as_table_mut().ok_or_else(|| Error::InvalidConfig(format!("override `{key}` descends into a non-table")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        assert_eq!(Config::from_toml_str(&c.to_toml(), &[]).unwrap(), c);
        assert_eq!(Config::from_toml_str("", &[]).unwrap(), c);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = Config::default()
            .with_overrides(&[
                "brc.attention.enabled=false".into(),
                "ema.direction=fwd".into(),
                "ema.levels=1".into(),
                "livt.local_grid=[2,3,3]".into(),
                "livt.pos_encoding=learnable".into(),
            ])
            .unwrap();
        assert!(!c.brc.attention.enabled);
        assert_eq!(c.ema.direction, Direction::Fwd);
        assert_eq!(c.ema.levels, Levels::Single);
        assert_eq!(c.livt.local_grid, [2, 3, 3]);
        assert_eq!(c.livt.pos_encoding, PosEncoding::Learnable);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(Config::from_toml_str("[model]\nwidth = 3\n", &[]).is_err());
        assert!(Config::default().with_overrides(&["livt.colour=1".into()]).is_err());
        assert!(Config::default().with_overrides(&["noequals".into()]).is_err());
        assert!(Config::default().with_overrides(&["livt.local_grid=[3,2,3]".into()]).is_err());
        assert!(Config::default().with_overrides(&["livt.local_grid=[10,3,3]".into()]).is_err());
        assert!(Config::default().with_overrides(&["train.lr_min=1".into()]).is_err());
        assert!(Config::default().with_overrides(&["train.stage2_scales=[1.03]".into()]).is_err());
        let e = Config::default().with_overrides(&["ema.levels=2".into()]).unwrap_err();
        assert!(e.is_validation());
    }

    #[test]
    fn documented_keys_cover_nested_tables() {
        let keys: Vec<String> = Config::documented_keys().into_iter().map(|(k, _)| k).collect();
        for k in ["seed", "model.segments", "brc.attention.enabled", "livt.local_grid", "train.lr_max"] {
            assert!(keys.iter().any(|x| x == k), "{k} missing");
        }
    }
}
