//! Losses, the alpha schedule, partial-trip sampling and the minibatch
//! training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::geo::{haversine, GeoPoint};
use crate::models::{EncodedTrip, ModelError, NeuralModel, Predictor, Query};
use crate::nn::{Adam, AdamConfig, Gradients, Graph, NnError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training trip has at least 3 points")]
    NoTrainingData,
    #[error("diverged in epoch {epoch}, batch {batch}: {reason}")]
    Diverged {
        epoch: usize,
        batch: usize,
        reason: String,
        /// Checkpoint of the parameters before the failing update.
        state: Box<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of E1 after the warm-up.
    pub alpha_final: f64,
    /// Epochs trained on E1 alone.
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha_final: 0.5,
            warmup_epochs: 2,
            epochs: 25,
            batch_size: 32,
            lr: 5e-3,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha_final) {
            return bad("alpha_final must be in [0, 1]");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        Ok(())
    }

    /// 1 during the warm-up, `alpha_final` afterwards.
    pub fn alpha(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            1.0
        } else {
            self.alpha_final
        }
    }
}

/// `alpha * E1 + (1 - alpha) * E2` with the epoch's alpha.
pub fn loss_combined(e1: f64, e2: f64, epoch: usize, cfg: &TrainConfig) -> f64 {
    let a = cfg.alpha(epoch);
    a * e1 + (1.0 - a) * e2
}

/// Mean haversine error of point predictions.
pub fn loss_e1(pairs: &[(GeoPoint, GeoPoint)]) -> f64 {
    pairs.iter().map(|&(p, y)| haversine(p, y)).sum::<f64>() / pairs.len() as f64
}

/// Score-weighted centroid distance for one prediction.
pub fn loss_e2(scores: &[f64], centroids: &[GeoPoint], truth: GeoPoint) -> f64 {
    scores
        .iter()
        .zip(centroids)
        .map(|(s, &c)| s * haversine(c, truth))
        .sum()
}

/// Partial length drawn uniformly from `2..=n-1`; `None` for `n < 3`.
pub fn sample_partial<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Option<usize> {
    (n >= 3).then(|| rng.random_range(2..n))
}

/// One training or validation example: a trip and the length of the
/// prefix fed to the model.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub trip: &'a EncodedTrip,
    pub n_p: usize,
}

impl<'a> Example<'a> {
    pub fn query(&self) -> Query<'a> {
        self.trip.prefix(self.n_p)
    }
}

/// Draws one partial per eligible trip, in trip order.
pub fn sample_examples<'a, R: Rng + ?Sized>(
    trips: &'a [EncodedTrip],
    rng: &mut R,
) -> Vec<Example<'a>> {
    trips
        .iter()
        .filter_map(|t| sample_partial(t.len(), rng).map(|n_p| Example { trip: t, n_p }))
        .collect()
}

/// Mean gradient of the combined loss over a batch plus the batch sums of
/// E1 and E2. Per-example gradients are reduced in example order, so the
/// result does not depend on `exec`.
pub fn batch_gradients(
    model: &NeuralModel,
    batch: &[Example<'_>],
    centroids: &[GeoPoint],
    alpha: f64,
    exec: Execution,
) -> Result<(Gradients, f64, f64), ModelError> {
    let per_example = exec.map(batch, |ex| -> Result<_, ModelError> {
        let mut grads = model.params().zero_grads();
        let mut g = Graph::new(model.params());
        let l = model.loss(&mut g, &ex.query(), centroids, ex.trip.destination(), alpha)?;
        g.backward(l.total, &mut grads)?;
        Ok((grads, g.scalar(l.e1), g.scalar(l.e2)))
    });
    let mut total = model.params().zero_grads();
    let (mut e1, mut e2) = (0.0, 0.0);
    for r in per_example {
        let (g, a, b) = r?;
        total.add_assign(&g);
        e1 += a;
        e2 += b;
    }
    total.scale(1.0 / batch.len() as f64);
    Ok((total, e1, e2))
}

/// Mean E1 and E2 of a model over fixed examples.
pub fn mean_errors(
    model: &dyn Predictor,
    examples: &[Example<'_>],
    centroids: &[GeoPoint],
    exec: Execution,
) -> Result<(f64, f64), ModelError> {
    let errs = exec.map(examples, |ex| -> Result<(f64, f64), ModelError> {
        let p = model.predict(&ex.query(), centroids)?;
        let y = ex.trip.destination();
        Ok((haversine(p.y_gps_hat, y), loss_e2(&p.scores, centroids, y)))
    });
    let (mut e1, mut e2) = (0.0, 0.0);
    for r in errs {
        let (a, b) = r?;
        e1 += a;
        e2 += b;
    }
    let n = examples.len().max(1) as f64;
    Ok((e1 / n, e2 / n))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "train_E1")]
    pub train_e1: f64,
    #[serde(rename = "train_E2")]
    pub train_e2: f64,
    #[serde(rename = "val_E1")]
    pub val_e1: f64,
    #[serde(rename = "val_E2")]
    pub val_e2: f64,
    pub alpha: f64,
}

pub fn write_train_log<W: Write>(log: &[EpochLog], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for row in log {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation E_pred.
    pub best: NeuralModel,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Seed offset for the validation partials, which stay fixed across epochs.
const VALIDATION_STREAM: u64 = 0x005e_ed0f_7a11;

/// Minibatch Adam on the combined loss with one fresh partial per trip and
/// epoch. Model selection uses validation E_pred at `alpha_final`; with an
/// empty validation set the last epoch is kept.
pub fn train(
    mut model: NeuralModel,
    train_set: &[EncodedTrip],
    validation: &[EncodedTrip],
    centroids: &[GeoPoint],
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if model.n_regions() != centroids.len() {
        return Err(ModelError::RegionCountMismatch {
            expected: model.n_regions(),
            found: centroids.len(),
        }
        .into());
    }
    if train_set.iter().all(|t| t.len() < 3) {
        return Err(TrainError::NoTrainingData);
    }
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VALIDATION_STREAM);
    let val_examples = sample_examples(validation, &mut val_rng);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, NeuralModel)> = None;

    for epoch in 0..cfg.epochs {
        let alpha = cfg.alpha(epoch);
        let mut examples = sample_examples(train_set, &mut rng);
        examples.shuffle(&mut rng);
        let (mut e1_sum, mut e2_sum) = (0.0, 0.0);
        for (b, batch) in examples.chunks(cfg.batch_size).enumerate() {
            let diverged = |reason: String, model: &NeuralModel| TrainError::Diverged {
                epoch,
                batch: b,
                reason,
                state: Box::new(model.to_json().unwrap_or_default()),
            };
            let (grads, e1, e2) = batch_gradients(&model, batch, centroids, alpha, exec)?;
            if !(e1.is_finite() && e2.is_finite()) {
                return Err(diverged(
                    format!("non-finite loss (E1 sum {e1}, E2 sum {e2})"),
                    &model,
                ));
            }
            match adam.step(model.params_mut(), &grads) {
                Ok(()) => {}
                Err(NnError::Diverged(reason)) => return Err(diverged(reason, &model)),
                Err(e) => return Err(ModelError::from(e).into()),
            }
            e1_sum += e1;
            e2_sum += e2;
        }
        let n = examples.len() as f64;
        let (val_e1, val_e2) = mean_errors(&model, &val_examples, centroids, exec)?;
        let row = EpochLog {
            epoch,
            train_e1: e1_sum / n,
            train_e2: e2_sum / n,
            val_e1,
            val_e2,
            alpha,
        };
        log::info!(
            "epoch {epoch}: train E1 {:.1} m, E2 {:.1} m; val E1 {:.1} m, E2 {:.1} m",
            row.train_e1,
            row.train_e2,
            val_e1,
            val_e2
        );
        log.push(row);

        let score = if val_examples.is_empty() {
            -(epoch as f64)
        } else {
            cfg.alpha_final * val_e1 + (1.0 - cfg.alpha_final) * val_e2
        };
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        log,
    })
}
