use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{batches, build, calibrate, HGNetParams, Mode, Objective};
use crate::channel::CsiSample;
use crate::diffnum::{Adam, TensorR};
use crate::rng;
use crate::{Error, Result};

/// Per-epoch means over mini-batches.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full objective: negative sum rate plus weighted discriminator losses.
    pub epoch_loss: Vec<f64>,
    /// Sum rate in bits/s/Hz.
    pub epoch_rate: Vec<f64>,
    /// Summed discriminator cross-entropy.
    pub epoch_disc: Vec<f64>,
}

/// One optimizer step on a batch; returns `(objective, rate loss, disc loss)`.
pub(crate) fn step(
    params: &mut HGNetParams,
    adam: &mut Adam,
    batch: &[&CsiSample],
    mask_seed: u64,
) -> Result<(f64, f64, f64)> {
    let objective = Objective {
        rate: 1.0,
        adversarial: params.config.adv_weight,
        entropy: 0.0,
    };
    let graph = build(params, batch, Mode::Train.into(), mask_seed, objective)?;
    let root = graph.root.expect("rate term is always present");
    let value = graph.tape.value(root).data()[0];
    let grads = graph.tape.backward(root, TensorR::scalar(1.0))?;
    params.store.zero_grad();
    grads.accumulate_into(&mut params.store);
    adam.step(&mut params.store)?;
    Ok((value, graph.rate_loss, graph.disc_loss))
}

/// Unsupervised training on the shuffled pool of all samples, followed by a
/// batch-norm calibration pass. All samples must share one `(Q, I)`.
pub fn train(params: &mut HGNetParams, data: &[CsiSample]) -> Result<TrainReport> {
    let tc = params.config.train.clone();
    tc.validate()?;
    if data.len() < 2 {
        return Err(Error::Config("training needs at least two samples".into()));
    }
    params.store.train_all();
    let mut adam = Adam::new(tc.learning_rate);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..tc.epochs {
        let mut r = rng::stream(tc.seed, &[0x7EA1, epoch as u64]);
        order.shuffle(&mut r);
        let (mut loss, mut rate, mut disc, mut count) = (0.0, 0.0, 0.0, 0.0);
        for (s, idx) in batches(&order, tc.batch_size).into_iter().enumerate() {
            let batch: Vec<&CsiSample> = idx.iter().map(|&k| &data[k]).collect();
            let seed = rng::derive_seed(tc.seed, &[0x3A5C, epoch as u64, s as u64]);
            let (l, rl, dl) = step(params, &mut adam, &batch, seed).map_err(|e| Error::Training {
                epoch,
                message: e.to_string(),
            })?;
            if !l.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: "non-finite loss".into(),
                });
            }
            loss += l;
            rate -= rl;
            disc += dl;
            count += 1.0;
        }
        report.epoch_loss.push(loss / count);
        report.epoch_rate.push(rate / count);
        report.epoch_disc.push(disc / count);
    }
    calibrate(params, data, tc.batch_size)?;
    Ok(report)
}
