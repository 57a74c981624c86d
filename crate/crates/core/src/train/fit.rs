use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{train_step, Adam, TrainConfig, TrainState};
use crate::audio::SpectrogramConfig;
use crate::dataset::{batch_iterator, Batch, TrainingSample};
use crate::error::{Error, Result};
use crate::keypoints::{KeypointSequence, NormStats, Space, DEFAULT_FPS, FLAT_DIM};
use crate::metrics::average_l1;
use crate::nn::{Checkpoint, Conditioning, ModelParams, Network, Tensor};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";
const CHECKPOINT_KIND: &str = "a2k-train";

/// One line of `history.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HistoryRecord {
    Step {
        epoch: usize,
        step: u64,
        l_adv: f64,
        l_reg: f64,
        l_piv_gen: f64,
        l_piv_piv: f64,
        l_d: f64,
    },
    Epoch {
        epoch: usize,
        step: u64,
        val_l1: f64,
        best: bool,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSummary {
    pub best_epoch: usize,
    pub best_val_l1: f64,
    pub steps: u64,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub history: PathBuf,
}

/// Mean per-window average L1 (standardized space) of the generator's
/// output on `samples`.
pub fn validation_l1(
    params: &ModelParams,
    cond: Conditioning,
    samples: &[TrainingSample],
    batch_size: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("no validation windows"));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainingSample> = chunk.iter().collect();
        let batch = Batch::collate(&refs)?;
        let out = params.generate(&batch.spectrogram, &batch.reference, cond)?;
        let t = batch.target.shape()[1];
        for (i, s) in chunk.iter().enumerate() {
            let pred = &out.data()[i * t * FLAT_DIM..(i + 1) * t * FLAT_DIM];
            let pred = KeypointSequence::from_flat(pred, DEFAULT_FPS, Space::Standardized)?;
            total += average_l1(&s.target, &pred)?;
        }
    }
    Ok(total / samples.len() as f64)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_add(epoch as u64)
}

/// Trains from `state.epoch` to `config.epochs`, validating after every
/// epoch. Writes `history.jsonl` (appended to when resuming), `best.ckpt`
/// whenever validation improves and `last.ckpt` every
/// `checkpoint_every` epochs and at the end.
pub fn fit(
    state: &mut TrainState,
    train: &[TrainingSample],
    val: &[TrainingSample],
    out_dir: &Path,
) -> Result<FitSummary> {
    if train.is_empty() {
        return Err(Error::Empty("no training windows"));
    }
    let val = if val.is_empty() {
        log::warn!("validation split is empty; validating on the training windows");
        train
    } else {
        val
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let history_path = out_dir.join(HISTORY_FILE);
    let file = if state.epoch == 0 {
        File::create(&history_path)
    } else {
        OpenOptions::new().append(true).create(true).open(&history_path)
    }
    .map_err(|e| Error::io(&history_path, e))?;
    let mut history = BufWriter::new(file);
    let mut write = |rec: &HistoryRecord| -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(history, "{line}")
            .and_then(|_| history.flush())
            .map_err(|e| Error::io(&history_path, e))
    };

    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let cond = state.config.ablation.conditioning();
    while state.epoch < state.config.epochs {
        let epoch = state.epoch + 1;
        for batch in batch_iterator(train, state.config.batch_size, epoch_seed(state.config.seed, epoch))? {
            let report = train_step(state, &batch?)?;
            log::info!(
                "step={} l_adv={:.6} l_reg={:.6} l_piv_gen={:.6} l_piv_piv={:.6} l_d={:.6}",
                report.step,
                report.l_adv,
                report.l_reg,
                report.l_piv_gen,
                report.l_piv_piv,
                report.l_d
            );
            write(&HistoryRecord::Step {
                epoch,
                step: report.step,
                l_adv: report.l_adv,
                l_reg: report.l_reg,
                l_piv_gen: report.l_piv_gen,
                l_piv_piv: report.l_piv_piv,
                l_d: report.l_d,
            })?;
        }
        let val_l1 = validation_l1(&state.params, cond, val, state.config.batch_size)?;
        let improved = state.best.is_none_or(|(_, b)| val_l1 < b);
        state.epoch = epoch;
        if improved {
            state.best = Some((epoch, val_l1));
            state.to_checkpoint(false).save(&best_path)?;
        }
        write(&HistoryRecord::Epoch {
            epoch,
            step: state.step,
            val_l1,
            best: improved,
        })?;
        log::info!(
            "epoch={epoch} val_l1={val_l1:.6}{}",
            if improved { " (best)" } else { "" }
        );
        if epoch.is_multiple_of(state.config.checkpoint_every) || epoch == state.config.epochs {
            state.to_checkpoint(true).save(&last_path)?;
        }
    }
    let (best_epoch, best_val_l1) = state.best.ok_or(Error::Empty("training ran no epochs"))?;
    Ok(FitSummary {
        best_epoch,
        best_val_l1,
        steps: state.step,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        history: history_path,
    })
}

fn stats_tensors(stats: &NormStats) -> [(String, Tensor); 2] {
    [
        ("stats/mean".into(), Tensor::from_vec(&[FLAT_DIM], stats.mean.clone())),
        ("stats/std".into(), Tensor::from_vec(&[FLAT_DIM], stats.std.clone())),
    ]
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    train_config: TrainConfig,
    spectrogram: SpectrogramConfig,
    stats_count: usize,
    step: u64,
    epoch: usize,
    best_epoch: Option<usize>,
    best_val_l1: Option<f64>,
    adam_steps: Option<[u64; 3]>,
}

fn need<'a>(ckpt: &'a Checkpoint, name: &str, path: &Path) -> Result<&'a Tensor> {
    ckpt.get(name)
        .ok_or_else(|| Error::format(path, format!("checkpoint lacks tensor {name}")))
}

impl TrainState {
    fn optimizer(&self, net: Network) -> &Adam {
        match net {
            Network::Generator => &self.opt_g,
            Network::Piv => &self.opt_e,
            Network::Discriminator => &self.opt_d,
        }
    }

    /// Parameters, normalization statistics and metadata; optimizer moments
    /// only when `with_optimizer` (needed to resume).
    pub fn to_checkpoint(&self, with_optimizer: bool) -> Checkpoint {
        let meta = Meta {
            kind: CHECKPOINT_KIND.into(),
            train_config: self.config.clone(),
            spectrogram: self.spectrogram.clone(),
            stats_count: self.stats.n_sequences_used,
            step: self.step,
            epoch: self.epoch,
            best_epoch: self.best.map(|b| b.0),
            best_val_l1: self.best.map(|b| b.1),
            adam_steps: with_optimizer.then_some([self.opt_g.steps, self.opt_e.steps, self.opt_d.steps]),
        };
        let mut tensors = self.params.to_tensors();
        tensors.extend(stats_tensors(&self.stats));
        if with_optimizer {
            for net in Network::ALL {
                let (m, v) = self.optimizer(net).moments();
                for (kind, moments) in [("m", m), ("v", v)] {
                    for ((name, _), t) in self.params.network(net).iter().zip(moments) {
                        tensors.push((format!("adam/{kind}/{}/{name}", net.tag()), t.clone()));
                    }
                }
            }
        }
        Checkpoint {
            meta: serde_json::to_value(meta).expect("metadata serializes"),
            tensors,
        }
    }

    /// Restores a state written by [`TrainState::to_checkpoint`]. Without
    /// stored moments the optimizers start fresh.
    pub fn from_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<Self> {
        let meta: Meta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::format(path, format!("checkpoint metadata: {e}")))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::format(
                path,
                format!("unexpected checkpoint kind {:?}", meta.kind),
            ));
        }
        meta.train_config
            .validate()
            .map_err(|e| Error::format(path, e.to_string()))?;
        let params = ModelParams::from_checkpoint(&meta.train_config.model, ckpt, path)?;
        let stats = NormStats {
            mean: need(ckpt, "stats/mean", path)?.data().to_vec(),
            std: need(ckpt, "stats/std", path)?.data().to_vec(),
            n_sequences_used: meta.stats_count,
        };
        stats.validate().map_err(|e| Error::format(path, e.to_string()))?;
        let adam_cfg = meta.train_config.adam.clone();
        let mut opts = Vec::with_capacity(3);
        for (i, net) in Network::ALL.into_iter().enumerate() {
            let set = params.network(net);
            let opt = match meta.adam_steps {
                Some(steps) => {
                    let load = |kind: &str| -> Result<Vec<Tensor>> {
                        set.iter()
                            .map(|(name, _)| need(ckpt, &format!("adam/{kind}/{}/{name}", net.tag()), path).cloned())
                            .collect()
                    };
                    Adam::from_moments(adam_cfg.clone(), steps[i], load("m")?, load("v")?, set)
                        .map_err(|e| Error::format(path, e.to_string()))?
                }
                None => Adam::new(adam_cfg.clone(), set),
            };
            opts.push(opt);
        }
        let opt_d = opts.pop().unwrap();
        let opt_e = opts.pop().unwrap();
        let opt_g = opts.pop().unwrap();
        Ok(Self {
            config: meta.train_config,
            params,
            stats,
            spectrogram: meta.spectrogram,
            opt_g,
            opt_e,
            opt_d,
            step: meta.step,
            epoch: meta.epoch,
            best: meta.best_epoch.zip(meta.best_val_l1),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}
