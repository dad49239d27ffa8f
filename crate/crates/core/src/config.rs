//! Network, training and data configuration with a line-based
//! `key = value` text format. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Context-aggregation stage selector. `Plain3d` keeps the cross-form
/// pyramid but swaps the two-branch 3D module for a plain conv stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PyramidVariant {
    Cfspp,
    Spp,
    Aspp,
    PlainLfe,
    Plain3d,
}

impl PyramidVariant {
    pub const ALL: [PyramidVariant; 5] = [
        PyramidVariant::Cfspp,
        PyramidVariant::Spp,
        PyramidVariant::Aspp,
        PyramidVariant::PlainLfe,
        PyramidVariant::Plain3d,
    ];

    pub fn has_dilated_branches(self) -> bool {
        matches!(self, PyramidVariant::Cfspp | PyramidVariant::Aspp | PyramidVariant::Plain3d)
    }

    pub fn has_pooling_branches(self) -> bool {
        matches!(self, PyramidVariant::Cfspp | PyramidVariant::Spp | PyramidVariant::Plain3d)
    }

    pub fn name(self) -> &'static str {
        match self {
            PyramidVariant::Cfspp => "cfspp",
            PyramidVariant::Spp => "spp",
            PyramidVariant::Aspp => "aspp",
            PyramidVariant::PlainLfe => "plain_lfe",
            PyramidVariant::Plain3d => "plain_3d",
        }
    }
}

impl fmt::Display for PyramidVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PyramidVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PyramidVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown pyramid variant '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub block_counts: [usize; 3],
    pub stage_channels: [usize; 3],
    pub pyramid_pool_sizes: [usize; 4],
    pub pyramid_dilations: [usize; 4],
    pub pyramid_variant: PyramidVariant,
    /// Channels of every pyramid branch.
    pub branch_channels: usize,
    /// Width of the 3x3 conv that fuses the pyramid levels.
    pub pyramid_hidden: usize,
    /// Feature channels per view entering the cost volume.
    pub fusion_channels: usize,
    pub matcher_channels: [usize; 4],
    pub kernel_pair: [usize; 2],
    pub d_max: usize,
    pub use_batchnorm: bool,
    pub bn_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 32,
            block_counts: [3, 15, 3],
            stage_channels: [32, 64, 128],
            pyramid_pool_sizes: [64, 32, 16, 8],
            pyramid_dilations: [32, 12, 8, 4],
            pyramid_variant: PyramidVariant::Cfspp,
            branch_channels: 32,
            pyramid_hidden: 128,
            fusion_channels: 32,
            matcher_channels: [32, 32, 64, 64],
            kernel_pair: [3, 5],
            d_max: 192,
            use_batchnorm: true,
            bn_eps: 1e-5,
        }
    }
}

/// Spatial downsampling between the input image and the feature maps.
pub const DOWNSAMPLE: usize = 8;

impl NetworkConfig {
    /// Desk-scale configuration used by the tests: 32x64 crops, `d_max` 16.
    pub fn desk() -> Self {
        NetworkConfig {
            d_max: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_max == 0 || self.d_max % DOWNSAMPLE != 0 {
            return fail(format!("d_max must be a positive multiple of {DOWNSAMPLE}, got {}", self.d_max));
        }
        if !self.pyramid_pool_sizes.windows(2).all(|w| w[0] > w[1]) || self.pyramid_pool_sizes[3] == 0 {
            return fail(format!(
                "pyramid pool sizes must be positive and strictly decreasing, got {:?}",
                self.pyramid_pool_sizes
            ));
        }
        if self.pyramid_dilations.contains(&0) {
            return fail("pyramid dilations must be >= 1".into());
        }
        if self.kernel_pair.iter().any(|&k| k == 0 || k % 2 == 0) {
            return fail(format!("3D kernel sizes must be odd, got {:?}", self.kernel_pair));
        }
        let widths = [
            self.base_channels,
            self.branch_channels,
            self.pyramid_hidden,
            self.fusion_channels,
        ];
        if widths.contains(&0) || self.stage_channels.contains(&0) || self.matcher_channels.contains(&0) {
            return fail("channel counts must be >= 1".into());
        }
        if !(self.bn_eps > 0.0) {
            return fail(format!("bn_eps must be positive, got {}", self.bn_eps));
        }
        Ok(())
    }

    pub fn disparity_levels(&self) -> usize {
        self.d_max / DOWNSAMPLE
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer '{s}'"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub steps: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            steps: 300,
            crop_h: 32,
            crop_w: 64,
            seed: 0,
            checkpoint_every: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.crop_h == 0 || self.crop_w == 0 || self.crop_h % DOWNSAMPLE != 0 || self.crop_w % DOWNSAMPLE != 0 {
            return Err(Error::Config(format!(
                "crop {}x{} must be a positive multiple of {DOWNSAMPLE}",
                self.crop_h, self.crop_w
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

/// Parsed `key = value` document. Keeps insertion-independent ordering so
/// serialization is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected 'key = value', got '{raw}'", i + 1)));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", i + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn insert(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Errors on the first key not consumed by the typed readers.
    pub fn reject_unknown(&self) -> Result<()> {
        match self.entries.keys().next() {
            Some(k) => Err(Error::Config(format!("unknown key '{k}'"))),
            None => Ok(()),
        }
    }

    pub fn take<V: FromStr>(&mut self, key: &str, into: &mut V) -> Result<()> {
        if let Some(raw) = self.entries.remove(key) {
            *into = raw
                .parse()
                .map_err(|_| Error::Config(format!("invalid value '{raw}' for '{key}'")))?;
        }
        Ok(())
    }

    pub fn take_array<const N: usize>(&mut self, key: &str, into: &mut [usize; N]) -> Result<()> {
        if let Some(raw) = self.entries.remove(key) {
            let parts: Vec<usize> = raw
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("invalid list '{raw}' for '{key}'")))?;
            *into = parts
                .try_into()
                .map_err(|_| Error::Config(format!("'{key}' needs exactly {N} entries, got '{raw}'")))?;
        }
        Ok(())
    }
}

fn join<const N: usize>(v: &[usize; N]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl NetworkConfig {
    /// Consumes the network keys from `kv`, starting from defaults.
    pub fn take_from(kv: &mut KeyValues) -> Result<Self> {
        let mut c = NetworkConfig::default();
        kv.take("base_channels", &mut c.base_channels)?;
        kv.take_array("block_counts", &mut c.block_counts)?;
        kv.take_array("stage_channels", &mut c.stage_channels)?;
        kv.take_array("pyramid_pool_sizes", &mut c.pyramid_pool_sizes)?;
        kv.take_array("pyramid_dilations", &mut c.pyramid_dilations)?;
        kv.take("pyramid_variant", &mut c.pyramid_variant)?;
        kv.take("branch_channels", &mut c.branch_channels)?;
        kv.take("pyramid_hidden", &mut c.pyramid_hidden)?;
        kv.take("fusion_channels", &mut c.fusion_channels)?;
        kv.take_array("matcher_channels", &mut c.matcher_channels)?;
        kv.take_array("kernel_pair", &mut c.kernel_pair)?;
        kv.take("d_max", &mut c.d_max)?;
        kv.take("use_batchnorm", &mut c.use_batchnorm)?;
        kv.take("bn_eps", &mut c.bn_eps)?;
        c.validate()?;
        Ok(c)
    }

    pub fn write_into(&self, kv: &mut KeyValues) {
        kv.insert("base_channels", self.base_channels);
        kv.insert("block_counts", join(&self.block_counts));
        kv.insert("stage_channels", join(&self.stage_channels));
        kv.insert("pyramid_pool_sizes", join(&self.pyramid_pool_sizes));
        kv.insert("pyramid_dilations", join(&self.pyramid_dilations));
        kv.insert("pyramid_variant", self.pyramid_variant);
        kv.insert("branch_channels", self.branch_channels);
        kv.insert("pyramid_hidden", self.pyramid_hidden);
        kv.insert("fusion_channels", self.fusion_channels);
        kv.insert("matcher_channels", join(&self.matcher_channels));
        kv.insert("kernel_pair", join(&self.kernel_pair));
        kv.insert("d_max", self.d_max);
        kv.insert("use_batchnorm", self.use_batchnorm);
        kv.insert("bn_eps", format!("{:e}", self.bn_eps));
    }
}

impl TrainConfig {
    pub fn take_from(kv: &mut KeyValues) -> Result<Self> {
        let mut c = TrainConfig::default();
        kv.take("learning_rate", &mut c.learning_rate)?;
        kv.take("optimizer", &mut c.optimizer)?;
        kv.take("beta1", &mut c.beta1)?;
        kv.take("beta2", &mut c.beta2)?;
        kv.take("adam_eps", &mut c.adam_eps)?;
        kv.take("steps", &mut c.steps)?;
        kv.take("crop_h", &mut c.crop_h)?;
        kv.take("crop_w", &mut c.crop_w)?;
        kv.take("seed", &mut c.seed)?;
        kv.take("checkpoint_every", &mut c.checkpoint_every)?;
        kv.take("log_every", &mut c.log_every)?;
        c.validate()?;
        Ok(c)
    }

    pub fn write_into(&self, kv: &mut KeyValues) {
        kv.insert("learning_rate", format!("{:e}", self.learning_rate));
        kv.insert("optimizer", self.optimizer);
        kv.insert("beta1", self.beta1);
        kv.insert("beta2", self.beta2);
        kv.insert("adam_eps", format!("{:e}", self.adam_eps));
        kv.insert("steps", self.steps);
        kv.insert("crop_h", self.crop_h);
        kv.insert("crop_w", self.crop_w);
        kv.insert("seed", self.seed);
        kv.insert("checkpoint_every", self.checkpoint_every);
        kv.insert("log_every", self.log_every);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let text = "# demo\nd_max = 32\nblock_counts = 1, 2,3 # inline\npyramid_variant = SPP\n\n";
        let mut kv = KeyValues::parse(text).unwrap();
        let c = NetworkConfig::take_from(&mut kv).unwrap();
        kv.reject_unknown().unwrap();
        assert_eq!(c.d_max, 32);
        assert_eq!(c.block_counts, [1, 2, 3]);
        assert_eq!(c.pyramid_variant, PyramidVariant::Spp);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let mut kv = KeyValues::parse("d_maxx = 32").unwrap();
        NetworkConfig::take_from(&mut kv).unwrap();
        assert!(kv.reject_unknown().unwrap_err().to_string().contains("d_maxx"));
        assert!(KeyValues::parse("no equals sign").is_err());
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        let mut kv = KeyValues::parse("block_counts = 1,2").unwrap();
        assert!(NetworkConfig::take_from(&mut kv).is_err());
    }

    #[test]
    fn d_max_must_divide_by_eight() {
        let c = NetworkConfig {
            d_max: 20,
            ..NetworkConfig::default()
        };
        assert!(c.validate().is_err());
        let c = NetworkConfig {
            pyramid_pool_sizes: [64, 64, 16, 8],
            ..NetworkConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn serialization_round_trips() {
        let c = NetworkConfig {
            pyramid_variant: PyramidVariant::Aspp,
            d_max: 48,
            use_batchnorm: false,
            ..NetworkConfig::default()
        };
        let t = TrainConfig {
            learning_rate: 3e-4,
            optimizer: OptimizerKind::Sgd,
            ..TrainConfig::default()
        };
        let mut kv = KeyValues::default();
        c.write_into(&mut kv);
        t.write_into(&mut kv);
        let mut back = KeyValues::parse(&kv.to_text()).unwrap();
        assert_eq!(NetworkConfig::take_from(&mut back).unwrap(), c);
        assert_eq!(TrainConfig::take_from(&mut back).unwrap(), t);
        back.reject_unknown().unwrap();
    }

    #[test]
    fn train_config_invariants() {
        let bad = TrainConfig {
            crop_h: 30,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
