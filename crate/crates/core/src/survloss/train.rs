use log::debug;
use ndarray::Array2;
use numcore::{AdamState, ParamStore, Tape};
use rand::seq::SliceRandom;

use crate::deeponet::{Batch, BranchRegistry, DeepOnet, FittedDeepOnet, HyperParams, InputDims, Standardizer};
use crate::error::{Result, SurvError};
use crate::seeds::{SeedStreams, INIT, SHUFFLE};
use crate::survloss::{
    batch_loss_grad, build_grid, expand_dataset, likelihood_loss, ExpandedDataset, ExpandedRow, SurvivalRecord,
};

/// What to train: branch variant, hyperparameters and an optional fixed horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub variant: String,
    pub hyper: HyperParams,
    /// Grid horizon; the largest training event time when unset.
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the epoch's mini-batch loss estimates.
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FittedDeepOnet,
    pub trace: TrainTrace,
}

/// Builds the grid from the training records, expands and standardizes both
/// sets, then trains with early stopping on the validation loss.
pub fn train(
    registry: &BranchRegistry,
    spec: &TrainSpec,
    train_records: &[SurvivalRecord],
    valid_records: &[SurvivalRecord],
    seeds: &SeedStreams,
) -> Result<TrainOutcome> {
    spec.hyper.validate()?;
    if train_records.is_empty() || valid_records.is_empty() {
        return Err(SurvError::Config("training and validation sets must be non-empty".into()));
    }
    let grid = build_grid(train_records, spec.hyper.m, spec.tau)?;
    let train_raw = expand_dataset(train_records, &grid)?;
    let valid_raw = expand_dataset(valid_records, &grid)?;
    let scaler = Standardizer::fit(&train_raw);
    let train_data = scaler.apply(&train_raw);
    let valid_data = scaler.apply(&valid_raw);
    train_expanded(registry, spec, &train_data, &valid_data, scaler, seeds)
}

/// Training on already expanded and standardized datasets sharing one grid.
pub fn train_expanded(
    registry: &BranchRegistry,
    spec: &TrainSpec,
    train_data: &ExpandedDataset,
    valid_data: &ExpandedDataset,
    scaler: Standardizer,
    seeds: &SeedStreams,
) -> Result<TrainOutcome> {
    let hyper = &spec.hyper;
    if train_data.grid != valid_data.grid {
        return Err(SurvError::Config("training and validation grids differ".into()));
    }
    if train_data.rows.is_empty() || valid_data.rows.is_empty() {
        return Err(SurvError::Data("no expanded rows to train on".into()));
    }
    let dims = InputDims {
        m: train_data.m(),
        tv_dim: train_data.tv_dim,
        ti_dim: train_data.ti_dim,
    };
    let mut net = DeepOnet::build(registry, &spec.variant, dims, hyper, &mut seeds.rng(INIT, &[]))?;
    let mut adam = AdamState::new(&net.params);
    let mut shuffle_rng = seeds.rng(SHUFFLE, &[]);
    let n = train_data.n_subjects() as f64;
    let total_rows = train_data.rows.len();
    let mut order: Vec<usize> = (0..total_rows).collect();

    let mut best_params: ParamStore = net.params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    let checkpoint = |net: &DeepOnet, params: &ParamStore| {
        let mut net = net.clone();
        net.params = params.clone();
        Box::new(FittedDeepOnet {
            net,
            scaler: scaler.clone(),
            grid: train_data.grid.clone(),
        })
    };
    let abort = |epoch: usize, reason: String, net: &DeepOnet, params: &ParamStore| SurvError::TrainingAborted {
        epoch,
        reason,
        checkpoint: Some(checkpoint(net, params)),
    };

    for epoch in 1..=hyper.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut batch_losses = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            let rows: Vec<&ExpandedRow> = chunk.iter().map(|&i| &train_data.rows[i]).collect();
            let batch = Batch::gather(train_data, &rows);
            let mut tape = Tape::new();
            let out = net
                .forward(&mut tape, &net.params, &batch)
                .map_err(|e| abort(epoch, e.to_string(), &net, &best_params))?;
            let h: Vec<f64> = tape.value(out).iter().copied().collect();
            let scale = total_rows as f64 / (n * rows.len() as f64);
            let (loss, dh) = batch_loss_grad(&h, &rows, scale)
                .map_err(|e| abort(epoch, e.to_string(), &net, &best_params))?;
            if !loss.is_finite() {
                return Err(abort(epoch, format!("non-finite batch loss {loss}"), &net, &best_params));
            }
            let seed = Array2::from_shape_vec((rows.len(), 1), dh).expect("column seed");
            tape.backward_with(&mut net.params, out, seed)?;
            adam.step(&mut net.params, hyper.learning_rate)
                .map_err(|e| abort(epoch, e.to_string(), &net, &best_params))?;
            batch_losses += loss;
            batches += 1;
        }
        let train_loss = batch_losses / batches as f64;
        let valid_h = net
            .h_eval_batch(valid_data, &valid_data.rows)
            .map_err(|e| abort(epoch, e.to_string(), &net, &best_params))?;
        let valid_loss = likelihood_loss(&valid_h, valid_data)
            .map_err(|e| abort(epoch, e.to_string(), &net, &best_params))?;
        if !valid_loss.is_finite() {
            return Err(abort(epoch, format!("non-finite validation loss {valid_loss}"), &net, &best_params));
        }
        debug!("epoch {epoch}: train {train_loss:.6} valid {valid_loss:.6}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
        });
        if valid_loss < best_loss {
            best_loss = valid_loss;
            best_epoch = epoch;
            best_params = net.params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale > hyper.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let model = *checkpoint(&net, &best_params);
    Ok(TrainOutcome {
        model,
        trace: TrainTrace {
            epochs,
            best_epoch,
            best_valid_loss: best_loss,
            stopped_early,
        },
    })
}
