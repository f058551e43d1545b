//! Episodic training, source pretraining and cross-domain adaptation.

use log::{debug, info};
use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataio::{ClassPool, FeatureTable};
use crate::episodes::{sample_episode_in_stream, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::fewshot::{self, LossWeights};
use crate::nnet::{cosine_lr, AdamW, AdamWConfig, Checkpoint, Encoder, EncoderConfig, GradScope};
use crate::rng::{self, stream};

/// Encoder width settings; the input dimension comes from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderShape {
    pub hidden_dim: usize,
    pub num_hidden: usize,
    pub embed_dim: usize,
    pub dropout_p: f64,
}

impl Default for EncoderShape {
    fn default() -> Self {
        let s = EncoderConfig::standard(1);
        Self {
            hidden_dim: s.hidden_dim,
            num_hidden: s.num_hidden,
            embed_dim: s.embed_dim,
            dropout_p: s.dropout_p,
        }
    }
}

impl EncoderShape {
    pub fn with_input(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            num_hidden: self.num_hidden,
            embed_dim: self.embed_dim,
            dropout_p: self.dropout_p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes_per_epoch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    /// Seeds training episodes, dropout, monitor episodes and initialisation.
    pub base_seed: u64,
    /// Episodes drawn from the training split to pick the best epoch.
    pub monitor_episodes: usize,
    /// Epoch budget for target-supervised adaptation.
    pub adapt_epochs: usize,
    pub loss: LossWeights,
    pub optimizer: AdamWConfig,
    pub encoder: EncoderShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes_per_epoch: 100,
            max_epochs: 100,
            patience: 15,
            n_way: 5,
            k_shot: 5,
            q_query: 15,
            base_seed: 42,
            monitor_episodes: 50,
            adapt_epochs: 20,
            loss: LossWeights::default(),
            optimizer: AdamWConfig::default(),
            encoder: EncoderShape::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("monitor_episodes", self.monitor_episodes),
            ("adapt_epochs", self.adapt_epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("optimizer.learning_rate must be positive".into()));
        }
        if !(self.loss.temperature > 0.0) || self.loss.supcon_weight < 0.0 {
            return Err(Error::Config(
                "loss.temperature must be positive and loss.supcon_weight non-negative".into(),
            ));
        }
        self.episode_spec()?;
        self.encoder.with_input(1).validate()
    }

    pub fn episode_spec(&self) -> Result<EpisodeSpec> {
        EpisodeSpec::new(self.n_way, self.k_shot, self.q_query, self.base_seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum AdaptMode {
    /// Every weight fixed; the checkpoint is returned as is.
    Frozen,
    /// Only the final projection layer is fine-tuned on the target data.
    TargetSupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub monitor_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best monitor accuracy.
    pub encoder: Encoder,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_monitor_acc: f64,
    pub stopped_early: bool,
}

impl TrainOutcome {
    /// Training log as line-delimited JSON.
    pub fn log_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn gather(table: &FeatureTable, episode: &Episode) -> Array2<f64> {
    let rows: Vec<usize> = episode.support_rows().into_iter().chain(episode.query_rows()).collect();
    table.features.select(Axis(0), &rows)
}

/// Fraction of query rows the current encoder (eval mode) classifies
/// correctly, pooled over the given episodes.
fn monitor_accuracy(encoder: &Encoder, table: &FeatureTable, episodes: &[Episode]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for ep in episodes {
        let emb = encoder.forward_eval(&gather(table, ep))?;
        let ns = ep.support.len();
        let protos = fewshot::compute_prototypes(emb.slice(s![..ns, ..]), &ep.support_labels(), ep.n_way())?;
        let predicted = fewshot::classify(emb.slice(s![ns.., ..]), &protos);
        correct += predicted.iter().zip(ep.query_labels()).filter(|(p, l)| **p == *l).count();
        total += predicted.len();
    }
    Ok(correct as f64 / total.max(1) as f64)
}

fn training_pool(table: &FeatureTable, cfg: &TrainConfig) -> Result<ClassPool> {
    let pool = table.eligible_pool(cfg.k_shot, cfg.q_query);
    if pool.len() < cfg.n_way {
        return Err(Error::InsufficientClasses {
            needed: cfg.n_way,
            available: pool.len(),
        });
    }
    Ok(pool)
}

/// Episodic training loop shared by every entry point.
///
/// With [`GradScope::All`] the whole encoder trains in train mode (batch
/// statistics, dropout). With [`GradScope::HeadOnly`] the backbone runs in
/// eval mode, so its running statistics stay fixed, and only the final
/// projection is updated. Epoch `e` uses `cosine_lr(lr, e, epochs)`; episode
/// `i` of epoch `e` has index `e * episodes_per_epoch + i`.
pub fn train_episodic(
    mut encoder: Encoder,
    table: &FeatureTable,
    cfg: &TrainConfig,
    scope: GradScope,
    epochs: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if encoder.config().input_dim != table.dim() {
        return Err(Error::ConfigMismatch(format!(
            "encoder expects {}-D input, data is {}-D",
            encoder.config().input_dim,
            table.dim()
        )));
    }
    let pool = training_pool(table, cfg)?;
    let spec = cfg.episode_spec()?;
    let monitor: Vec<Episode> = (0..cfg.monitor_episodes as u64)
        .map(|i| sample_episode_in_stream(&pool, &spec.at(i), stream::MONITOR))
        .collect::<Result<_>>()?;

    let mut optimizer = AdamW::new(cfg.optimizer);
    let mut best = encoder.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::with_capacity(epochs);
    let mut stopped_early = false;
    let ns = cfg.n_way * cfg.k_shot;

    for epoch in 0..epochs {
        let lr = cosine_lr(cfg.optimizer.learning_rate, epoch, epochs);
        let mut loss_sum = 0.0;
        for i in 0..cfg.episodes_per_epoch {
            let index = (epoch * cfg.episodes_per_epoch + i) as u64;
            let ep_spec = spec.at(index);
            let episode = sample_episode_in_stream(&pool, &ep_spec, stream::EPISODE)?;
            let x = gather(table, &episode);
            encoder.zero_grad();
            let (emb, cache) = match scope {
                GradScope::All => encoder.forward_train(&x, &mut rng::seeded(ep_spec.seed(), stream::DROPOUT))?,
                GradScope::HeadOnly => encoder.forward_eval_cached(&x)?,
            };
            let (loss, d_support, d_query) = fewshot::episode_loss(
                emb.slice(s![..ns, ..]),
                &episode.support_labels(),
                emb.slice(s![ns.., ..]),
                &episode.query_labels(),
                cfg.n_way,
                &cfg.loss,
            )?;
            let upstream = concatenate(Axis(0), &[d_support.view(), d_query.view()]).expect("same width");
            encoder.backward(&cache, &upstream, scope)?;
            let mut params = match scope {
                GradScope::All => encoder.parameters_mut(),
                GradScope::HeadOnly => encoder.head_parameters_mut(),
            };
            optimizer.step(&mut params, lr)?;
            loss_sum += loss.total;
        }
        let monitor_acc = monitor_accuracy(&encoder, table, &monitor)?;
        let record = EpochRecord {
            epoch,
            lr,
            mean_loss: loss_sum / cfg.episodes_per_epoch as f64,
            monitor_acc,
        };
        debug!("{record:?}");
        log.push(record);
        if monitor_acc > best_acc {
            best_acc = monitor_acc;
            best_epoch = epoch;
            best = encoder.clone();
        } else if epoch - best_epoch >= cfg.patience {
            info!("early stop at epoch {epoch}; best epoch {best_epoch} ({best_acc:.4})");
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        encoder: best,
        log,
        best_epoch,
        best_monitor_acc: best_acc,
        stopped_early,
    })
}

/// Fresh encoder trained on `train` for up to `max_epochs`.
pub fn train_within_domain(train: &FeatureTable, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    training_pool(train, cfg)?;
    let encoder = Encoder::new(cfg.encoder.with_input(train.dim()), cfg.base_seed)?;
    train_episodic(encoder, train, cfg, GradScope::All, cfg.max_epochs)
}

/// Within-domain training on a source dataset; the checkpoint records the
/// source name and representation.
pub fn pretrain_source(train: &FeatureTable, cfg: &TrainConfig, source: &str) -> Result<(Checkpoint, TrainOutcome)> {
    let outcome = train_within_domain(train, cfg)?;
    let checkpoint = Checkpoint::new(
        outcome.encoder.clone(),
        Some(source.to_owned()),
        Some(train.representation.name().to_owned()),
    );
    Ok((checkpoint, outcome))
}

/// Rejects a checkpoint whose input size or recorded representation differs
/// from `table`'s.
pub fn check_compatible(checkpoint: &Checkpoint, table: &FeatureTable) -> Result<()> {
    let expected = checkpoint.meta.encoder.input_dim;
    if expected != table.dim() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint expects {expected}-D input ({}), data is {}-D ({})",
            checkpoint.meta.representation.as_deref().unwrap_or("unknown representation"),
            table.dim(),
            table.representation
        )));
    }
    if let Some(r) = &checkpoint.meta.representation {
        if r != table.representation.name() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint was trained on {r} features, data is {}",
                table.representation
            )));
        }
    }
    Ok(())
}

/// Adapts a pretrained checkpoint to a target training split.
pub fn adapt(
    checkpoint: &Checkpoint,
    target_train: &FeatureTable,
    mode: AdaptMode,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Option<TrainOutcome>)> {
    check_compatible(checkpoint, target_train)?;
    match mode {
        AdaptMode::Frozen => Ok((checkpoint.clone(), None)),
        AdaptMode::TargetSupervised => {
            let outcome = train_episodic(
                checkpoint.encoder.clone(),
                target_train,
                cfg,
                GradScope::HeadOnly,
                cfg.adapt_epochs,
            )?;
            let adapted = Checkpoint {
                meta: checkpoint.meta.clone(),
                encoder: outcome.encoder.clone(),
            };
            Ok((adapted, Some(outcome)))
        }
    }
}
