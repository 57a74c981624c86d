use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::INIT_STD;
use crate::error::{Error, Result};
use crate::keypoints::FLAT_DIM;

/// Width and depth knobs. `Default` is the full-scale model; [`ModelConfig::toy`]
/// trains on a laptop CPU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub base_channels: usize,
    pub latent_pv_dim: usize,
    pub latent_piv_dim: usize,
    pub n_temporal_levels: usize,
    pub discriminator_channels: usize,
    pub encoder_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            base_channels: 64,
            latent_pv_dim: 64,
            latent_piv_dim: 64,
            n_temporal_levels: 4,
            discriminator_channels: 64,
            encoder_hidden: 256,
        }
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            base_channels: 8,
            discriminator_channels: 8,
            ..Self::default()
        }
    }

    /// Small enough to finite-difference every parameter: 8 mel bins,
    /// 8 channels, 8-dim latents, two temporal levels.
    pub fn gradcheck() -> Self {
        Self {
            n_mels: 8,
            base_channels: 8,
            latent_pv_dim: 8,
            latent_piv_dim: 8,
            n_temporal_levels: 2,
            discriminator_channels: 8,
            encoder_hidden: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_mels", self.n_mels),
            ("base_channels", self.base_channels),
            ("latent_pv_dim", self.latent_pv_dim),
            ("latent_piv_dim", self.latent_piv_dim),
            ("n_temporal_levels", self.n_temporal_levels),
            ("discriminator_channels", self.discriminator_channels),
            ("encoder_hidden", self.encoder_hidden),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("model config field {name} must be positive")));
        }
        if !self.n_mels.is_power_of_two() {
            return Err(Error::Invalid(format!(
                "n_mels must be a power of two, got {}",
                self.n_mels
            )));
        }
        Ok(())
    }

    /// Video frames per window must be a multiple of this.
    pub fn frame_multiple(&self) -> usize {
        1 << self.n_temporal_levels
    }

    /// Channels of the audio feature map at temporal level `level`
    /// (level `n_temporal_levels` is the bottleneck).
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level.min(3)
    }

    pub(crate) fn mel_blocks(&self) -> usize {
        self.n_mels.trailing_zeros() as usize
    }
}

/// Named tensors of one network, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        let index = entries.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Self { entries, index }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Same names and shapes as `self`.
    pub fn matches_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound<'_> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { set: self, vars }
    }
}

/// A [`ParamSet`] placed on a tape.
pub struct Bound<'p> {
    set: &'p ParamSet,
    vars: Vec<Var>,
}

impl Bound<'_> {
    /// Panics on unknown names: layouts are fixed by [`ModelParams::init`].
    pub fn get(&self, name: &str) -> Var {
        match self.set.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("no parameter named {name}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Network {
    /// Audio encoder, pose-variant encoder and decoder.
    Generator,
    /// Pose-invariant encoder.
    Piv,
    Discriminator,
}

impl Network {
    pub const ALL: [Network; 3] = [Network::Generator, Network::Piv, Network::Discriminator];

    pub fn tag(self) -> &'static str {
        match self {
            Network::Generator => "G",
            Network::Piv => "E",
            Network::Discriminator => "D",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub generator: ParamSet,
    pub piv: ParamSet,
    pub discriminator: ParamSet,
}

enum Init {
    Gaussian,
    Zeros,
    Ones,
}

struct Layout(Vec<(String, Vec<usize>, Init)>);

impl Layout {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        self.0.push((name, shape.to_vec(), init));
    }

    fn conv(&mut self, name: &str, shape: &[usize], out_channels: usize) {
        self.add(format!("{name}.w"), shape, Init::Gaussian);
        self.add(format!("{name}.b"), &[out_channels], Init::Zeros);
    }

    fn norm(&mut self, name: &str, channels: usize) {
        self.add(format!("{name}.g"), &[channels], Init::Ones);
        self.add(format!("{name}.beta"), &[channels], Init::Zeros);
    }

    fn mlp(&mut self, prefix: &str, hidden: usize, out: usize) {
        let dims = [FLAT_DIM, hidden, hidden, out];
        for (i, pair) in dims.windows(2).enumerate() {
            self.add(format!("{prefix}.fc{i}.w"), &[pair[1], pair[0]], Init::Gaussian);
            self.add(format!("{prefix}.fc{i}.b"), &[pair[1]], Init::Zeros);
        }
    }

    fn build(self, rng: &mut ChaCha8Rng) -> ParamSet {
        let normal = Normal::new(0.0, INIT_STD).expect("valid init std");
        let entries = self
            .0
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Gaussian => (0..n).map(|_| normal.sample(rng)).collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                (name, Tensor::from_vec(&shape, data))
            })
            .collect();
        ParamSet::from_entries(entries)
    }
}

fn generator_layout(cfg: &ModelConfig) -> Layout {
    let mut l = Layout(Vec::new());
    let c = cfg.base_channels;
    let mut ch_in = 1;
    for i in 0..cfg.mel_blocks() {
        l.conv(&format!("audio.mel{i}"), &[c, ch_in, 3, 3], c);
        if i > 0 {
            l.norm(&format!("audio.mel{i}.n"), c);
        }
        ch_in = c;
    }
    for j in 0..2 {
        l.conv(&format!("audio.time{j}"), &[c, ch_in, 4], c);
        l.norm(&format!("audio.time{j}.n"), c);
        ch_in = c;
    }
    l.conv(
        "audio.level0",
        &[cfg.level_channels(0), ch_in, 3],
        cfg.level_channels(0),
    );
    l.norm("audio.level0.n", cfg.level_channels(0));
    for lev in 1..=cfg.n_temporal_levels {
        let (ci, co) = (cfg.level_channels(lev - 1), cfg.level_channels(lev));
        l.conv(&format!("audio.level{lev}"), &[co, ci, 4], co);
        l.norm(&format!("audio.level{lev}.n"), co);
    }

    l.mlp("pv", cfg.encoder_hidden, cfg.latent_pv_dim);

    let bottom = cfg.level_channels(cfg.n_temporal_levels);
    let cond = bottom + cfg.latent_pv_dim + cfg.latent_piv_dim;
    l.conv("dec.in", &[bottom, cond, 3], bottom);
    l.norm("dec.in.n", bottom);
    for lev in (0..cfg.n_temporal_levels).rev() {
        let (ci, co) = (cfg.level_channels(lev + 1), cfg.level_channels(lev));
        // transposed conv weights are [in, out, k]
        l.conv(&format!("dec.up{lev}"), &[ci, co, 4], co);
        l.norm(&format!("dec.up{lev}.n"), co);
        l.conv(&format!("dec.fuse{lev}"), &[co, 2 * co, 3], co);
        l.norm(&format!("dec.fuse{lev}.n"), co);
    }
    l.conv("dec.out", &[FLAT_DIM, cfg.level_channels(0), 1], FLAT_DIM);
    l
}

fn piv_layout(cfg: &ModelConfig) -> Layout {
    let mut l = Layout(Vec::new());
    l.mlp("piv", cfg.encoder_hidden, cfg.latent_piv_dim);
    l
}

fn discriminator_layout(cfg: &ModelConfig) -> Layout {
    let mut l = Layout(Vec::new());
    let d = cfg.discriminator_channels;
    let widths = [FLAT_DIM, d, 2 * d, 4 * d];
    for (i, pair) in widths.windows(2).enumerate() {
        l.conv(&format!("disc.down{i}"), &[pair[1], pair[0], 3], pair[1]);
        if i > 0 {
            l.norm(&format!("disc.down{i}.n"), pair[1]);
        }
    }
    l.conv("disc.patch", &[1, 4 * d, 3], 1);
    l
}

impl ModelParams {
    /// Gaussian weights (std 0.02), zero biases, unit norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            config: config.clone(),
            generator: generator_layout(config).build(&mut rng),
            piv: piv_layout(config).build(&mut rng),
            discriminator: discriminator_layout(config).build(&mut rng),
        })
    }

    pub fn network(&self, net: Network) -> &ParamSet {
        match net {
            Network::Generator => &self.generator,
            Network::Piv => &self.piv,
            Network::Discriminator => &self.discriminator,
        }
    }

    pub fn network_mut(&mut self, net: Network) -> &mut ParamSet {
        match net {
            Network::Generator => &mut self.generator,
            Network::Piv => &mut self.piv,
            Network::Discriminator => &mut self.discriminator,
        }
    }

    pub fn is_finite(&self) -> bool {
        Network::ALL.iter().all(|&n| self.network(n).is_finite())
    }

    /// Zeroes every bias and norm offset (tests of the zero-input path).
    pub fn zero_biases(&mut self) {
        for net in Network::ALL {
            let set = self.network_mut(net);
            for (name, t) in set.entries.iter_mut() {
                if name.ends_with(".b") || name.ends_with(".beta") {
                    t.data_mut().fill(0.0);
                }
            }
        }
    }

    /// Sets every tensor whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for net in Network::ALL {
            for (name, t) in self.network_mut(net).entries.iter_mut() {
                if name.starts_with(prefix) {
                    t.data_mut().fill(0.0);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_finite() {
        let a = ModelParams::init(&ModelConfig::toy(), 3).unwrap();
        let b = ModelParams::init(&ModelConfig::toy(), 3).unwrap();
        let c = ModelParams::init(&ModelConfig::toy(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.is_finite());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ModelConfig {
            base_channels: 0,
            ..ModelConfig::toy()
        };
        assert!(ModelParams::init(&bad, 0).is_err());
        let bad = ModelConfig {
            n_mels: 48,
            ..ModelConfig::toy()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_statistics_follow_the_scheme() {
        let p = ModelParams::init(&ModelConfig::default(), 0).unwrap();
        let w = p.piv.get("piv.fc1.w").unwrap();
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-3);
        assert!((std - INIT_STD).abs() < 1e-3);
        assert!(p.piv.get("piv.fc1.b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.generator.get("dec.in.n.g").unwrap().data().iter().all(|&v| v == 1.0));
    }
}
