//! Flat `key = value` run configuration with `#` comments.
//!
//! Keys are dotted: `model.*`, `ssa.*`, `prune.*`, `loss.*`, `train.*`,
//! `data.*`. Unknown and repeated keys are rejected. Omitted keys keep their
//! defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::attention::EntropyReduce;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::{parse_upsample, upsample_name, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticSpec,
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn reduce_name(r: EntropyReduce) -> &'static str {
    match r {
        EntropyReduce::Min => "min",
        EntropyReduce::Mean => "mean",
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match key {
            "model.in_channels" => m.in_channels = num(key, v)?,
            "model.image_h" => m.image_h = num(key, v)?,
            "model.image_w" => m.image_w = num(key, v)?,
            "model.enc_widths" => {
                m.enc_widths = v
                    .split(',')
                    .map(|x| x.trim())
                    .filter(|x| !x.is_empty())
                    .map(|x| num(key, x))
                    .collect::<Result<_>>()?
            }
            "model.patch_size" => m.patch_size = num(key, v)?,
            "model.d" => m.d = num(key, v)?,
            "model.heads" => m.heads = num(key, v)?,
            "model.d_m" => m.d_m = num(key, v)?,
            "model.d_ff" => m.d_ff = num(key, v)?,
            "model.blocks" => m.blocks = num(key, v)?,
            "model.classes" => m.classes = num(key, v)?,
            "model.pos_embed" => m.pos_embed = v.parse()?,
            "model.upsample" => m.upsample = parse_upsample(v)?,

            "ssa.enabled" => m.ssa.enabled = flag(key, v)?,
            "ssa.alpha_sym" => m.ssa.alpha_sym = num(key, v)?,
            "ssa.alpha_en" => m.ssa.alpha_en = num(key, v)?,
            "ssa.beta_1" => m.ssa.beta_1 = num(key, v)?,
            "ssa.beta_2" => m.ssa.beta_2 = num(key, v)?,
            "ssa.entropy_reduce" => {
                m.ssa.entropy_reduce = match v {
                    "min" => EntropyReduce::Min,
                    "mean" => EntropyReduce::Mean,
                    _ => return Err(Error::Config(format!("{key}: expected min or mean, got {v:?}"))),
                }
            }

            "prune.tau_q" => m.prune.tau_q = num(key, v)?,
            "prune.g_init" => m.prune.g_init = num(key, v)?,
            "prune.g_frozen_rounds" => m.prune.g_frozen_rounds = num(key, v)?,
            "prune.query" => m.prune.enable_query_prune = flag(key, v)?,
            "prune.dependency" => m.prune.enable_dep_prune = flag(key, v)?,
            "prune.flops_mode" => m.prune.flops_mode = v.parse()?,

            "loss.ce_weight" => m.loss.ce_weight = num(key, v)?,
            "loss.dice_weight" => m.loss.dice_weight = num(key, v)?,
            "loss.dice_smooth" => m.loss.dice_smooth = num(key, v)?,

            "train.lr" => t.lr = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.rounds" => t.rounds = num(key, v)?,
            "train.steps_per_round" => t.steps_per_round = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "train.beta1" => t.beta1 = num(key, v)?,
            "train.beta2" => t.beta2 = num(key, v)?,
            "train.adam_eps" => t.adam_eps = num(key, v)?,

            "data.count" => d.count = num(key, v)?,
            "data.height" => d.height = num(key, v)?,
            "data.width" => d.width = num(key, v)?,
            "data.channels" => d.channels = num(key, v)?,
            "data.family" => d.family = v.parse()?,
            "data.noise" => d.noise = num(key, v)?,
            "data.seed" => d.seed = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => Error::Config(format!("line {}: {other}", i + 1)),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    /// Every key, in a form `parse` reads back to an equal value.
    pub fn to_text(&self) -> String {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("model.in_channels", m.in_channels.to_string());
        put("model.image_h", m.image_h.to_string());
        put("model.image_w", m.image_w.to_string());
        put("model.enc_widths", join(&m.enc_widths));
        put("model.patch_size", m.patch_size.to_string());
        put("model.d", m.d.to_string());
        put("model.heads", m.heads.to_string());
        put("model.d_m", m.d_m.to_string());
        put("model.d_ff", m.d_ff.to_string());
        put("model.blocks", m.blocks.to_string());
        put("model.classes", m.classes.to_string());
        put("model.pos_embed", m.pos_embed.to_string());
        put("model.upsample", upsample_name(m.upsample).to_string());
        put("ssa.enabled", m.ssa.enabled.to_string());
        put("ssa.alpha_sym", format!("{:?}", m.ssa.alpha_sym));
        put("ssa.alpha_en", format!("{:?}", m.ssa.alpha_en));
        put("ssa.beta_1", format!("{:?}", m.ssa.beta_1));
        put("ssa.beta_2", format!("{:?}", m.ssa.beta_2));
        put("ssa.entropy_reduce", reduce_name(m.ssa.entropy_reduce).to_string());
        put("prune.tau_q", format!("{:?}", m.prune.tau_q));
        put("prune.g_init", format!("{:?}", m.prune.g_init));
        put("prune.g_frozen_rounds", m.prune.g_frozen_rounds.to_string());
        put("prune.query", m.prune.enable_query_prune.to_string());
        put("prune.dependency", m.prune.enable_dep_prune.to_string());
        put("prune.flops_mode", m.prune.flops_mode.to_string());
        put("loss.ce_weight", format!("{:?}", m.loss.ce_weight));
        put("loss.dice_weight", format!("{:?}", m.loss.dice_weight));
        put("loss.dice_smooth", format!("{:?}", m.loss.dice_smooth));
        put("train.lr", format!("{:?}", t.lr));
        put("train.batch_size", t.batch_size.to_string());
        put("train.rounds", t.rounds.to_string());
        put("train.steps_per_round", t.steps_per_round.to_string());
        put("train.seed", t.seed.to_string());
        put("train.beta1", format!("{:?}", t.beta1));
        put("train.beta2", format!("{:?}", t.beta2));
        put("train.adam_eps", format!("{:?}", t.adam_eps));
        put("data.count", d.count.to_string());
        put("data.height", d.height.to_string());
        put("data.width", d.width.to_string());
        put("data.channels", d.channels.to_string());
        put("data.family", d.family.to_string());
        put("data.noise", format!("{:?}", d.noise));
        put("data.seed", d.seed.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ShapeFamily;
    use crate::model::PosEmbed;
    use crate::pruning::FlopsMode;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::parse("").unwrap(), c);
    }

    #[test]
    fn every_key_round_trips_non_default() {
        let text = "\
# toy
model.in_channels = 3
model.image_h = 32
model.image_w = 48
model.enc_widths = 4, 8
model.patch_size = 2
model.d = 12
model.heads = 3
model.d_m = 4
model.d_ff = 13
model.blocks = 3
model.classes = 3
model.pos_embed = absolute
model.upsample = nearest
ssa.enabled = false
ssa.alpha_sym = 0.25
ssa.alpha_en = 0.125
ssa.beta_1 = 0.7
ssa.beta_2 = 0.3
ssa.entropy_reduce = mean
prune.tau_q = 0.4   # trailing comment
prune.g_init = -1.5
prune.g_frozen_rounds = 7
prune.query = false
prune.dependency = off
prune.flops_mode = as-printed
loss.ce_weight = 0.25
loss.dice_weight = 0.75
loss.dice_smooth = 2
train.lr = 0.001
train.batch_size = 2
train.rounds = 9
train.steps_per_round = 3
train.seed = 11
train.beta1 = 0.8
train.beta2 = 0.99
train.adam_eps = 1e-7
data.count = 20
data.height = 32
data.width = 48
data.channels = 3
data.family = rings
data.noise = 0.2
data.seed = 5
";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.model.enc_widths, vec![4, 8]);
        assert_eq!(c.model.pos_embed, PosEmbed::Absolute);
        assert_eq!(c.model.ssa.entropy_reduce, EntropyReduce::Mean);
        assert_eq!(c.model.prune.flops_mode, FlopsMode::AsPrinted);
        assert!(!c.model.prune.enable_dep_prune);
        assert_eq!(c.data.family, ShapeFamily::Rings);
        assert_eq!(c.train.adam_eps, 1e-7);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_ne!(c, RunConfig::default());
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "model.nope = 1",
            "prune.tau_q = 0.5\nprune.tau_q = 0.6",
            "model.d = eight",
            "ssa.enabled = maybe",
            "just a line",
            "model.heads = 0",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
        assert!(RunConfig::load(Path::new("/nonexistent/x.cfg")).is_err());
    }
}
