//! Adversarial training of the generator, the PIV encoder and the
//! discriminator; validation, checkpoints and inference.

mod fit;
mod infer;
pub mod optim;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audio::SpectrogramConfig;
use crate::dataset::{Batch, DEFAULT_BATCH_SIZE, DEFAULT_STRIDE, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::keypoints::{NormStats, FLAT_DIM};
use crate::losses::{graph, LossComponents, LossWeights};
use crate::nn::{
    discriminator, generator, piv_encoder, Bound, Conditioning, GeneratorInputs, ModelConfig, ModelParams, Network,
    ParamSet, Tape, Tensor, Var,
};

pub use fit::{fit, validation_l1, FitSummary, HistoryRecord, BEST_CHECKPOINT, HISTORY_FILE, LAST_CHECKPOINT};
pub use infer::{generate_sequence, load_model, InferenceModel};
pub use optim::{clip_global_norm, Adam, AdamConfig};

/// Which networks and loss terms take part in training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// No reference frame: both encoders and every PIV term are dropped.
    OnlyAudio,
    /// No PIV encoder and no PIV terms.
    NoPiv,
    /// No discriminator and no adversarial term.
    NoDiscriminator,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::OnlyAudio,
        Ablation::NoPiv,
        Ablation::NoDiscriminator,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::OnlyAudio => "only_audio",
            Ablation::NoPiv => "no_piv",
            Ablation::NoDiscriminator => "no_discriminator",
        }
    }

    pub fn conditioning(self) -> Conditioning {
        match self {
            Ablation::OnlyAudio => Conditioning::AudioOnly,
            Ablation::NoPiv => Conditioning::NoPiv,
            Ablation::Full | Ablation::NoDiscriminator => Conditioning::Full,
        }
    }

    pub fn uses_piv(self) -> bool {
        self.conditioning() == Conditioning::Full
    }

    pub fn uses_discriminator(self) -> bool {
        self != Ablation::NoDiscriminator
    }

    /// Parameter name prefixes that this mode never updates, per network.
    pub fn frozen(self, net: Network) -> Option<&'static str> {
        match (self, net) {
            (Ablation::OnlyAudio, Network::Generator) => Some("pv."),
            (Ablation::OnlyAudio | Ablation::NoPiv, Network::Piv) => Some(""),
            (Ablation::NoDiscriminator, Network::Discriminator) => Some(""),
            _ => None,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            Error::Invalid(format!(
                "unknown ablation {s:?}; expected full, only_audio, no_piv or no_discriminator"
            ))
        })
    }
}

/// Training settings, read from TOML. Every key is optional:
///
/// ```toml
/// learning_rate = 1e-4
/// batch_size = 32
/// epochs = 300
/// seed = 0
/// ablation = "full"        # only_audio | no_piv | no_discriminator
/// checkpoint_every = 1     # epochs between last.ckpt writes
/// grad_clip = 10.0         # global norm per network; 0 disables
/// window = 64
/// stride = 32
///
/// [adam]
/// beta1 = 0.9
/// beta2 = 0.999
/// eps = 1e-8
///
/// [loss_weights]
/// w_adv = 1.0
/// w_reg = 1.0
/// w_piv_gen = 1.0
/// w_piv_piv = 1.0
/// margin = 0.2
///
/// [model]
/// n_mels = 64
/// base_channels = 64
/// latent_pv_dim = 64
/// latent_piv_dim = 64
/// n_temporal_levels = 4
/// discriminator_channels = 64
/// encoder_hidden = 256
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub checkpoint_every: usize,
    pub grad_clip: f64,
    pub window: usize,
    pub stride: usize,
    pub adam: AdamConfig,
    pub loss_weights: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: 300,
            seed: 0,
            ablation: Ablation::Full,
            checkpoint_every: 1,
            grad_clip: 10.0,
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
            adam: AdamConfig::default(),
            loss_weights: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Invalid(format!("training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("checkpoint_every", self.checkpoint_every),
            ("window", self.window),
            ("stride", self.stride),
        ] {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::Invalid(format!(
                "grad_clip must be >= 0, got {}",
                self.grad_clip
            )));
        }
        if !self.window.is_multiple_of(self.model.frame_multiple()) {
            return Err(Error::Invalid(format!(
                "window {} must be a multiple of {}",
                self.window,
                self.model.frame_multiple()
            )));
        }
        self.adam.validate()?;
        self.loss_weights.validate()?;
        self.model.validate()
    }

    /// Loss weights with the terms of disabled networks set to zero.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.loss_weights.clone();
        if !self.ablation.uses_piv() {
            w.w_piv_gen = 0.0;
            w.w_piv_piv = 0.0;
        }
        if !self.ablation.uses_discriminator() {
            w.w_adv = 0.0;
        }
        w
    }
}

/// Per-step loss values; disabled terms are exactly zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_adv: f64,
    pub l_reg: f64,
    pub l_piv_gen: f64,
    pub l_piv_piv: f64,
    pub l_d: f64,
}

impl LossReport {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            l_adv: self.l_adv,
            l_reg: self.l_reg,
            l_piv_gen: self.l_piv_gen,
            l_piv_piv: self.l_piv_piv,
            l_d: self.l_d,
        }
    }
}

/// Parameters, optimizer state and counters owned by one trainer.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub stats: NormStats,
    pub spectrogram: SpectrogramConfig,
    pub opt_g: Adam,
    pub opt_e: Adam,
    pub opt_d: Adam,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Epoch and validation L1 of the best checkpoint so far.
    pub best: Option<(usize, f64)>,
}

impl TrainState {
    pub fn new(config: TrainConfig, stats: NormStats, spectrogram: SpectrogramConfig) -> Result<Self> {
        config.validate()?;
        stats.validate()?;
        if spectrogram.n_mels != config.model.n_mels {
            return Err(Error::Invalid(format!(
                "data has {} mel bands but the model expects {}",
                spectrogram.n_mels, config.model.n_mels
            )));
        }
        let params = ModelParams::init(&config.model, config.seed)?;
        Ok(Self {
            opt_g: Adam::new(config.adam.clone(), &params.generator),
            opt_e: Adam::new(config.adam.clone(), &params.piv),
            opt_d: Adam::new(config.adam.clone(), &params.discriminator),
            config,
            params,
            stats,
            spectrogram,
            step: 0,
            epoch: 0,
            best: None,
        })
    }
}

fn collect_grads(grads: &mut crate::nn::Grads, vars: &[Var]) -> Vec<Option<Tensor>> {
    vars.iter().map(|&v| grads.take(v)).collect()
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{name} = {v}")))
    }
}

/// `[N, T, 136] -> [N, T, latent]` through the PIV encoder, frame by frame.
fn encode_frames(tape: &mut Tape, e: &Bound, seq: Var) -> Result<Var> {
    let shape = tape.shape(seq).to_vec();
    let flat = tape.reshape(seq, &[shape[0] * shape[1], FLAT_DIM]);
    let enc = piv_encoder(tape, e, flat)?;
    let latent = tape.shape(enc)[1];
    Ok(tape.reshape(enc, &[shape[0], shape[1], latent]))
}

/// Discriminator update on `y` against the detached `y_hat`; returns L_D.
fn update_discriminator(
    params: &mut ParamSet,
    opt: &mut Adam,
    config: &TrainConfig,
    y: &Tensor,
    y_hat: &Tensor,
) -> Result<f64> {
    let mut tape = Tape::new();
    let d = params.bind(&mut tape, true);
    let real_in = tape.constant(y.clone());
    let fake_in = tape.constant(y_hat.clone());
    let real = discriminator(&mut tape, &d, real_in)?;
    let fake = discriminator(&mut tape, &d, fake_in)?;
    let loss = graph::discriminator(&mut tape, real, fake);
    let l_d = finite("l_d", tape.value(loss).item())?;
    let vars = d.vars().to_vec();
    let mut grads = tape.backward(loss);
    let mut g = collect_grads(&mut grads, &vars);
    if config.grad_clip > 0.0 {
        clip_global_norm(&mut g, config.grad_clip);
    }
    opt.step(params, &g, config.learning_rate);
    Ok(l_d)
}

/// Values and gradients of the generator and PIV objectives for one batch.
pub(crate) struct Objectives {
    pub l_adv: f64,
    pub l_reg: f64,
    pub l_piv_gen: f64,
    pub l_piv_piv: f64,
    pub g_grads: Vec<Option<Tensor>>,
    pub e_grads: Option<Vec<Option<Tensor>>>,
}

/// The generated batch on a tape, ready for scoring.
pub(crate) struct Forward<'p> {
    pub tape: Tape,
    pub g: Bound<'p>,
    pub e_live: Option<Bound<'p>>,
    pub reference: Var,
    pub y: Var,
    pub y_hat: Var,
}

pub(crate) fn forward<'p>(
    generator_params: &'p ParamSet,
    piv_params: &'p ParamSet,
    mcfg: &ModelConfig,
    ablation: Ablation,
    batch: &Batch,
) -> Result<Forward<'p>> {
    let mut tape = Tape::new();
    let g = generator_params.bind(&mut tape, true);
    let e_live = ablation.uses_piv().then(|| piv_params.bind(&mut tape, true));
    let inputs = GeneratorInputs {
        spectrogram: tape.constant(batch.spectrogram.clone()),
        reference: tape.constant(batch.reference.clone()),
    };
    let y = tape.constant(batch.target.clone());
    let y_hat = generator(&mut tape, &g, e_live.as_ref(), mcfg, &inputs, ablation.conditioning())?;
    Ok(Forward {
        tape,
        g,
        e_live,
        reference: inputs.reference,
        y,
        y_hat,
    })
}

/// Builds every enabled loss term on `fw` and backpropagates
/// `L_Gen = w_adv L_adv + w_reg L_reg + w_piv_gen L_PIV-Gen` into G and
/// `L_PIV = w_reg L_reg + w_adv L_adv + w_piv_piv L_PIV-PIV` into E.
/// L_PIV-Gen reads a frozen copy of E, so it never moves E; the triplet's
/// negatives are detached, so it never moves G.
pub(crate) fn objectives(
    fw: &mut Forward<'_>,
    piv_params: &ParamSet,
    disc_params: Option<&ParamSet>,
    w: &LossWeights,
) -> Result<Objectives> {
    let tape = &mut fw.tape;
    let reg = graph::regression(tape, fw.y, fw.y_hat)?;
    let l_reg = finite("l_reg", tape.value(reg).item())?;
    let mut gen_terms = vec![(w.w_reg, reg)];
    let mut piv_terms = vec![(w.w_reg, reg)];
    let mut l_adv = 0.0;
    if let Some(disc_params) = disc_params {
        let d = disc_params.bind(tape, false);
        let score = discriminator(tape, &d, fw.y_hat)?;
        let adv = graph::adversarial_gen(tape, score);
        l_adv = finite("l_adv", tape.value(adv).item())?;
        gen_terms.push((w.w_adv, adv));
        piv_terms.push((w.w_adv, adv));
    }
    let (mut l_piv_gen, mut l_piv_piv) = (0.0, 0.0);
    if let Some(e_live) = &fw.e_live {
        let e_frozen = piv_params.bind(tape, false);
        let anchor_frozen = piv_encoder(tape, &e_frozen, fw.reference)?;
        let gen_frames = encode_frames(tape, &e_frozen, fw.y_hat)?;
        let pg = graph::piv_gen(tape, anchor_frozen, gen_frames)?;
        l_piv_gen = finite("l_piv_gen", tape.value(pg).item())?;
        gen_terms.push((w.w_piv_gen, pg));

        let anchor = piv_encoder(tape, e_live, fw.reference)?;
        let positives = encode_frames(tape, e_live, fw.y)?;
        let negatives_in = tape.detach(fw.y_hat);
        let negatives = encode_frames(tape, e_live, negatives_in)?;
        let pp = graph::piv_triplet(tape, anchor, positives, negatives, w.margin)?;
        l_piv_piv = finite("l_piv_piv", tape.value(pp).item())?;
        piv_terms.push((w.w_piv_piv, pp));
    }
    let weighted_sum = |tape: &mut Tape, terms: &[(f64, Var)]| {
        let mut acc = tape.scale(terms[0].1, terms[0].0);
        for &(k, v) in &terms[1..] {
            let s = tape.scale(v, k);
            acc = tape.add(acc, s);
        }
        acc
    };
    let gen_total = weighted_sum(tape, &gen_terms);
    let g_vars = fw.g.vars().to_vec();
    let g_grads = collect_grads(&mut tape.backward_wrt(gen_total, &g_vars), &g_vars);
    let e_grads = match &fw.e_live {
        Some(e_live) => {
            let piv_total = weighted_sum(tape, &piv_terms);
            let e_vars = e_live.vars().to_vec();
            Some(collect_grads(&mut tape.backward_wrt(piv_total, &e_vars), &e_vars))
        }
        None => None,
    };
    Ok(Objectives {
        l_adv,
        l_reg,
        l_piv_gen,
        l_piv_piv,
        g_grads,
        e_grads,
    })
}

/// One optimization step: generate `y_hat`, update D on it, then update G
/// on its total loss and E on its total loss, scoring `y_hat` with the
/// updated D. A non-finite loss leaves the state untouched.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<LossReport> {
    let ablation = state.config.ablation;
    let w = state.config.effective_weights();
    if batch.target.shape().get(1).is_none_or(|&t| t < 2) {
        return Err(Error::Invalid("training windows need at least 2 frames".into()));
    }
    let mut fw = forward(
        &state.params.generator,
        &state.params.piv,
        &state.config.model,
        ablation,
        batch,
    )?;

    let snapshot = (state.params.discriminator.clone(), state.opt_d.clone());
    let l_d = if ablation.uses_discriminator() {
        let y_hat_value = fw.tape.value(fw.y_hat).clone();
        let l_d = update_discriminator(
            &mut state.params.discriminator,
            &mut state.opt_d,
            &state.config,
            &batch.target,
            &y_hat_value,
        )?;
        if !state.params.discriminator.is_finite() {
            state.params.discriminator = snapshot.0;
            state.opt_d = snapshot.1;
            return Err(Error::NonFinite("discriminator parameters after update".into()));
        }
        l_d
    } else {
        0.0
    };
    let disc = ablation.uses_discriminator().then_some(&state.params.discriminator);
    let obj = match objectives(&mut fw, &state.params.piv, disc, &w) {
        Ok(obj) => obj,
        Err(e) => {
            drop(fw);
            state.params.discriminator = snapshot.0;
            state.opt_d = snapshot.1;
            return Err(e);
        }
    };
    drop(fw);
    let Objectives {
        l_adv,
        l_reg,
        l_piv_gen,
        l_piv_piv,
        mut g_grads,
        e_grads,
    } = obj;
    let lr = state.config.learning_rate;
    let clip = state.config.grad_clip;
    if clip > 0.0 {
        clip_global_norm(&mut g_grads, clip);
    }
    state.opt_g.step(&mut state.params.generator, &g_grads, lr);
    if let Some(mut e_grads) = e_grads {
        if clip > 0.0 {
            clip_global_norm(&mut e_grads, clip);
        }
        state.opt_e.step(&mut state.params.piv, &e_grads, lr);
    }
    state.step += 1;
    Ok(LossReport {
        step: state.step,
        l_adv,
        l_reg,
        l_piv_gen,
        l_piv_piv,
        l_d,
    })
}
