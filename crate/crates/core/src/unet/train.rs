use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BlockKind, ContinuousUNet, UNetConfig};
use crate::data::{metrics, train_val_split, MetricReport, SegSample};
use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Per-epoch multiplier of the learning rate.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once validation Dice reaches this value.
    pub stop_at_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            lr_decay: 0.999,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            stop_at_dice: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate used during epoch `k` (0-based).
    pub fn lr_at(&self, k: usize) -> f64 {
        self.lr * self.lr_decay.powi(k as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean training BCE over the epoch.
    pub loss: f64,
    pub val_dice: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_dice,lr\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.loss, r.val_dice, r.lr));
        }
        out
    }

    pub fn final_dice(&self) -> Option<f64> {
        self.rows.last().map(|r| r.val_dice)
    }
}

/// First epoch whose validation Dice reaches `tau`.
pub fn epochs_to_tau(log: &TrainLog, tau: f64) -> Option<usize> {
    log.rows.iter().find(|r| r.val_dice >= tau).map(|r| r.epoch)
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("CONTINUUM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("CONTINUUM_THREADS must be a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder.build().map_err(|e| Error::Config(e.to_string()))
}

/// Per-sample metrics of `net` on `samples`, in order.
pub fn evaluate(net: &ContinuousUNet, samples: &[SegSample]) -> Result<Vec<MetricReport>> {
    thread_pool()?.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let p = net.forward(&s.image)?;
                metrics::evaluate(&p, &s.mask)
            })
            .collect()
    })
}

/// Train on an 80/20 seeded split of `dataset`, validating on the 20%.
pub fn train(net: &mut ContinuousUNet, dataset: &[SegSample], tcfg: &TrainConfig) -> Result<TrainLog> {
    let (tr, va) = train_val_split(dataset, tcfg.seed);
    train_split(net, &tr, &va, tcfg)
}

/// Adam on mean BCE with the learning rate multiplied by `lr_decay` after
/// every epoch. Samples in a batch are processed in parallel; their
/// gradients are summed in sample order, so results do not depend on the
/// thread count.
pub fn train_split(
    net: &mut ContinuousUNet,
    train_set: &[SegSample],
    val_set: &[SegSample],
    tcfg: &TrainConfig,
) -> Result<TrainLog> {
    tcfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let pool = thread_pool()?;
    let mut opt = Adam::new(net.params(), AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..tcfg.epochs {
        let lr = tcfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let results: Vec<Result<(f64, Vec<Tensor>)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| net.loss_and_grads(&train_set[i].image, &train_set[i].mask))
                    .collect()
            });
            let mut total: Option<Vec<Tensor>> = None;
            for r in results {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at epoch {}, batch {}",
                        epoch + 1,
                        b + 1
                    )));
                }
                loss_sum += loss;
                match &mut total {
                    None => total = Some(grads),
                    Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.axpy(1.0, g)),
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let mean: Vec<Tensor> = total.expect("nonempty batch").iter().map(|g| g.scale(scale)).collect();
            if !mean.iter().all(Tensor::is_finite) {
                return Err(Error::NonFinite(format!("gradient at epoch {}, batch {}", epoch + 1, b + 1)));
            }
            let mut params: Vec<&mut Tensor> = net.params_mut().iter_mut().collect();
            opt.step(&mut params, &mean, lr)?;
        }
        let val_dice = if val_set.is_empty() {
            f64::NAN
        } else {
            MetricReport::mean(&evaluate(net, val_set)?).dice
        };
        log.rows.push(EpochLog {
            epoch: epoch + 1,
            loss: loss_sum / train_set.len() as f64,
            val_dice,
            lr,
        });
        if tcfg.stop_at_dice.is_some_and(|t| val_dice >= t) {
            break;
        }
    }
    Ok(log)
}

/// Training curves of several block kinds under identical seeds and data.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareResult {
    pub curves: Vec<(BlockKind, TrainLog)>,
}

impl CompareResult {
    /// `kind,epoch,loss,val_dice,lr`, one row per kind and epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,epoch,loss,val_dice,lr\n");
        for (kind, log) in &self.curves {
            for r in &log.rows {
                out.push_str(&format!("{kind},{},{},{},{}\n", r.epoch, r.loss, r.val_dice, r.lr));
            }
        }
        out
    }

    pub fn epochs_to_tau(&self, tau: f64) -> Vec<(BlockKind, Option<usize>)> {
        self.curves
            .iter()
            .map(|(k, log)| (*k, epochs_to_tau(log, tau)))
            .collect()
    }
}

/// Train one net per kind from `base` (only the block kind differs) for the
/// full epoch count.
pub fn convergence_compare(
    kinds: &[BlockKind],
    base: &UNetConfig,
    dataset: &[SegSample],
    tcfg: &TrainConfig,
) -> Result<CompareResult> {
    if kinds.len() < 2 {
        return Err(Error::Config(format!(
            "convergence comparison needs at least two block kinds, got {}",
            kinds.len()
        )));
    }
    let tcfg = TrainConfig {
        stop_at_dice: None,
        ..tcfg.clone()
    };
    let (tr, va) = train_val_split(dataset, tcfg.seed);
    let mut curves = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let cfg = UNetConfig {
            block_kind: kind,
            ..base.clone()
        };
        let mut net = ContinuousUNet::build(&cfg, tcfg.seed)?;
        curves.push((kind, train_split(&mut net, &tr, &va, &tcfg)?));
    }
    Ok(CompareResult { curves })
}
