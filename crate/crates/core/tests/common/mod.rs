#![allow(dead_code)]

use ndarray::Array2;
use numcore::{ParamStore, Tape};
use opsurv::deeponet::{Batch, DeepOnet, HyperParams, InputDims};
use opsurv::survloss::{batch_loss_grad, ExpandedDataset, ExpandedRow, StepPath, SurvivalRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random subjects with one time-varying covariate sampled on `[0, tau]` and
/// two statics.
pub fn toy_records(seed: u64, n: usize, tau: f64) -> Vec<SurvivalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let visits = rng.random_range(1..6);
            let mut times: Vec<f64> = (1..visits).map(|_| rng.random_range(0.0..tau)).collect();
            times.push(0.0);
            times.sort_by(f64::total_cmp);
            times.dedup();
            let values = times.iter().map(|_| rng.random_range(-1.5..1.5)).collect();
            let path = StepPath::new(times, values, 1).unwrap();
            let statics = vec![f64::from(u8::from(rng.random_bool(0.5))), rng.random_range(-1.0..1.0)];
            SurvivalRecord::new(i.to_string(), rng.random_range(0.05..tau), rng.random_bool(0.7), path, statics).unwrap()
        })
        .collect()
}

pub fn toy_hyper(m: usize) -> HyperParams {
    HyperParams {
        nodes: 6,
        filters: 3,
        kernel_width: 3,
        pool: 2,
        m,
        p: 4,
        batch_size: 16,
        max_epochs: 5,
        ..HyperParams::default()
    }
}

pub fn dims_of(data: &ExpandedDataset) -> InputDims {
    InputDims {
        m: data.m(),
        tv_dim: data.tv_dim,
        ti_dim: data.ti_dim,
    }
}

/// Full-sample loss at `params`, with the backward pass when `grad` is set.
pub fn full_loss(net: &DeepOnet, data: &ExpandedDataset, params: &mut ParamStore, grad: bool) -> f64 {
    let rows: Vec<&ExpandedRow> = data.rows.iter().collect();
    let batch = Batch::gather(data, &rows);
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, params, &batch).unwrap();
    let h: Vec<f64> = tape.value(out).iter().copied().collect();
    let (loss, dh) = batch_loss_grad(&h, &rows, 1.0 / data.n_subjects() as f64).unwrap();
    if grad {
        let seed = Array2::from_shape_vec((rows.len(), 1), dh).unwrap();
        tape.backward_with(params, out, seed).unwrap();
    }
    loss
}
