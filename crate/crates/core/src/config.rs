//! The TOML run configuration shared by every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ar::ArConfig;
use crate::codec::Vocabulary;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::pipeline::Schedule;
use crate::synth::{Split, SynthConfig};

pub const DATA_ENV: &str = "POINTILLIST_DATA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root; empty defers to `POINTILLIST_DATA`, then `./data`.
    pub root: String,
    pub identities: usize,
    pub first_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: String::new(),
            identities: 64,
            first_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateConfig {
    pub seed: u64,
    pub faces: usize,
    pub joints: usize,
    pub expressions: usize,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            faces: 320,
            joints: 3,
            expressions: 4,
        }
    }
}

/// AR settings that are not implied by the dataset (vocabulary and image
/// size come from `template`/`synth`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArSection {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub window: usize,
    pub stride: usize,
    pub patch: usize,
    pub anchors: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub constrained: bool,
    /// Body-point cap when sampling.
    pub point_cap: usize,
}

impl Default for ArSection {
    fn default() -> Self {
        let a = ArConfig::default();
        Self {
            d_model: a.d_model,
            layers: a.layers,
            heads: a.heads,
            window: a.window,
            stride: a.stride,
            patch: a.patch,
            anchors: a.anchors,
            temperature: a.temperature,
            top_k: a.top_k,
            constrained: a.constrained,
            point_cap: a.max_points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewsConfig {
    /// Rest-pose cameras the decoder trains on.
    pub train: Vec<usize>,
    /// Cameras scored by `eval`.
    pub eval: Vec<usize>,
}

impl Default for ViewsConfig {
    fn default() -> Self {
        Self {
            train: vec![0, 1, 2, 3],
            eval: vec![4, 5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

impl SplitChoice {
    pub fn admits(self, s: Split) -> bool {
        match self {
            SplitChoice::All => true,
            SplitChoice::Train => s == Split::Train,
            SplitChoice::Test => s == Split::Test,
        }
    }
}

impl std::str::FromStr for SplitChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitChoice::Train),
            "test" => Ok(SplitChoice::Test),
            "all" => Ok(SplitChoice::All),
            _ => Err(Error::InvalidConfig(format!("unknown split {s:?} (train, test, all)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub split: SplitChoice,
    /// At most this many identities; 0 samples all of them.
    pub limit: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            split: SplitChoice::All,
            limit: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub data: DataConfig,
    pub template: TemplateConfig,
    pub synth: SynthConfig,
    pub ar: ArSection,
    pub train_ar: Schedule,
    pub decoder: DecoderConfig,
    pub loss: LossWeights,
    pub train_decoder: Schedule,
    pub views: ViewsConfig,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            data: DataConfig::default(),
            template: TemplateConfig::default(),
            synth: SynthConfig::default(),
            ar: ArSection::default(),
            train_ar: Schedule::default(),
            decoder: DecoderConfig::default(),
            loss: LossWeights::default(),
            train_decoder: Schedule::default(),
            views: ViewsConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

impl RunConfig {

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.synth.coord_levels, self.template.faces as u32)
    }

    pub fn ar_config(&self) -> ArConfig {
        let a = &self.ar;
        ArConfig {
            coord_levels: self.synth.coord_levels,
            face_count: self.template.faces as u32,
            d_model: a.d_model,
            layers: a.layers,
            heads: a.heads,
            window: a.window,
            stride: a.stride,
            max_points: a.point_cap,
            temperature: a.temperature,
            top_k: a.top_k,
            constrained: a.constrained,
            image_size: self.synth.image_size,
            patch: a.patch,
            anchors: a.anchors,
        }
    }

    /// Dataset root: the config value, else `POINTILLIST_DATA`, else `./data`.
    pub fn data_root(&self) -> PathBuf {
        if !self.data.root.is_empty() {
            return PathBuf::from(&self.data.root);
        }
        match std::env::var_os(DATA_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from("data"),
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.data.identities as u64).map(|i| self.data.first_seed + i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if self.data.identities < 2 {
            return bad("data: need at least 2 identities".into());
        }
        let t = &self.template;
        let mut f = t.faces;
        while f > 20 && f % 4 == 0 {
            f /= 4;
        }
        if f != 20 || !(1..=3).contains(&t.joints) {
            return bad("template: faces must be 20·4^k and joints 1..=3".into());
        }
        self.synth.validate()?;
        self.ar_config().validate()?;
        if !(self.ar.temperature >= 0.0 && self.ar.temperature.is_finite()) {
            return bad("ar: temperature must be finite and non-negative".into());
        }
        self.train_ar.validate()?;
        self.decoder.validate()?;
        self.loss.validate()?;
        self.train_decoder.validate()?;
        for (name, cams) in [("train", &self.views.train), ("eval", &self.views.eval)] {
            if cams.is_empty() || cams.iter().any(|&c| c >= self.synth.cameras) {
                return bad(format!("views.{name}: need cameras below {}", self.synth.cameras));
            }
        }
        Ok(())
    }
}
