use ndarray::Array2;
use numcore::{ParamId, ParamStore, ParamTensor, SeqShape, Tape, Var};
use rand::RngCore;

use super::branch::{BranchNet, BranchRegistry};
use super::hyper::{HyperParams, InputDims};
use super::scaler::Standardizer;
use super::trunk::Trunk;
use crate::error::{Result, SurvError};
use crate::survloss::{
    expand_dataset, likelihood_loss, ExpandedDataset, ExpandedRow, StepPath, SurvivalCurve, SurvivalRecord, TimeGrid,
    H_LIMIT,
};

/// Rows per forward chunk when evaluating without gradients.
const EVAL_CHUNK: usize = 2048;

/// Branch, trunk and merge bias sharing one parameter store.
#[derive(Debug, Clone)]
pub struct DeepOnet {
    dims: InputDims,
    hyper: HyperParams,
    branch: Box<dyn BranchNet>,
    trunk: Trunk,
    merge_bias: ParamId,
    pub params: ParamStore,
}

/// Network inputs for a batch of rows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub history: Array2<f64>,
    pub statics: Array2<f64>,
    /// Evaluation times divided by tau, one per row.
    pub times: Array2<f64>,
    /// Unmasked sensors per row; positions from here on are zero.
    pub live: Vec<usize>,
}

impl Batch {
    pub fn gather(data: &ExpandedDataset, rows: &[&ExpandedRow]) -> Self {
        let w = data.history_width();
        let tau = data.grid.tau();
        let mut history = Array2::<f64>::zeros((rows.len(), w));
        let mut statics = Array2::<f64>::zeros((rows.len(), data.ti_dim));
        let mut times = Array2::<f64>::zeros((rows.len(), 1));
        for (i, row) in rows.iter().enumerate() {
            let mut h = history.row_mut(i);
            data.write_masked_history(row, h.as_slice_mut().expect("standard layout"));
            statics
                .row_mut(i)
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(data.statics(row));
            times[[i, 0]] = row.eval_time / tau;
        }
        Self {
            history,
            statics,
            times,
            live: rows.iter().map(|r| r.interval).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn eval_err(e: numcore::NumError) -> SurvError {
    match e {
        numcore::NumError::NonFinite { label } => SurvError::Evaluation { layer: label },
        other => SurvError::Numeric(other),
    }
}

impl DeepOnet {
    pub fn build(
        registry: &BranchRegistry,
        variant: &str,
        dims: InputDims,
        hyper: &HyperParams,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        hyper.validate()?;
        if dims.m != hyper.m {
            return Err(SurvError::Dimension(format!(
                "input has {} sensors but hyperparameters say m = {}",
                dims.m, hyper.m
            )));
        }
        let mut params = ParamStore::new();
        let branch = registry.get(variant)?.build(&dims, hyper, &mut params, rng)?;
        let trunk = Trunk::build(hyper.nodes, hyper.p, &mut params, rng);
        let merge_bias = params.add("merge.bias", ParamTensor::zeros(&[1]));
        let net = Self {
            dims,
            hyper: hyper.clone(),
            branch,
            trunk,
            merge_bias,
            params,
        };
        let (b, t) = (net.branch_forward(&vec![0.0; dims.history_width()], &vec![0.0; dims.ti_dim])?, net.trunk_forward(0.0)?);
        if b.len() != t.len() {
            return Err(SurvError::Dimension(format!(
                "branch output {} vs trunk output {}",
                b.len(),
                t.len()
            )));
        }
        Ok(net)
    }

    pub fn variant(&self) -> &str {
        self.branch.variant()
    }

    pub fn dims(&self) -> InputDims {
        self.dims
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hyper
    }

    pub fn merge_bias_id(&self) -> ParamId {
        self.merge_bias
    }

    /// Records `<branch, trunk> + merge_bias` for every row; the result is `batch x 1`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, batch: &Batch) -> numcore::Result<Var> {
        let history = tape.input("history", batch.history.clone());
        tape.mark_live(history, SeqShape::new(self.dims.tv_dim, self.dims.m), batch.live.clone())?;
        let statics = tape.input("statics", batch.statics.clone());
        let s = tape.input("time", batch.times.clone());
        let b = self.branch.forward(tape, params, history, statics)?;
        let t = self.trunk.forward(tape, params, s)?;
        let dot = tape.row_dot("merge.dot", b, t)?;
        tape.add_scalar("merge.bias", params, dot, self.merge_bias)
    }

    fn check_inputs(&self, history: &[f64], statics: &[f64]) -> Result<()> {
        if history.len() != self.dims.history_width() {
            return Err(SurvError::Dimension(format!(
                "history holds {} values, expected m * tv_dim = {}",
                history.len(),
                self.dims.history_width()
            )));
        }
        if statics.len() != self.dims.ti_dim {
            return Err(SurvError::Dimension(format!(
                "{} static covariates, expected {}",
                statics.len(),
                self.dims.ti_dim
            )));
        }
        Ok(())
    }

    fn single(&self, history: &[f64], statics: &[f64], s: f64) -> Batch {
        Batch {
            history: Array2::from_shape_vec((1, history.len()), history.to_vec()).expect("row"),
            statics: Array2::from_shape_vec((1, statics.len()), statics.to_vec()).expect("row"),
            times: Array2::from_elem((1, 1), s),
            live: vec![Self::live_len(history, self.dims.tv_dim.max(1))],
        }
    }

    /// Positions up to the last nonzero entry of a flattened history.
    fn live_len(history: &[f64], channels: usize) -> usize {
        history.iter().rposition(|v| *v != 0.0).map_or(0, |i| i / channels + 1)
    }

    pub fn branch_forward(&self, history: &[f64], statics: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(history, statics)?;
        let batch = self.single(history, statics, 0.0);
        let mut tape = Tape::new();
        let h = tape.input("history", batch.history);
        let z = tape.input("statics", batch.statics);
        let out = self.branch.forward(&mut tape, &self.params, h, z)?;
        tape.check_finite().map_err(eval_err)?;
        Ok(tape.value(out).iter().copied().collect())
    }

    /// Trunk output at normalized time `s`.
    pub fn trunk_forward(&self, s: f64) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.input("time", Array2::from_elem((1, 1), s));
        let out = self.trunk.forward(&mut tape, &self.params, x)?;
        tape.check_finite().map_err(eval_err)?;
        Ok(tape.value(out).iter().copied().collect())
    }

    /// Log-hazard for one already standardized and masked input at normalized time `s`.
    pub fn h_eval(&self, history: &[f64], statics: &[f64], s: f64) -> Result<f64> {
        self.check_inputs(history, statics)?;
        Ok(self.eval_batch(&self.single(history, statics, s))?[0])
    }

    pub fn eval_batch(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &self.params, batch)?;
        tape.check_finite().map_err(eval_err)?;
        Ok(tape.value(out).iter().copied().collect())
    }

    /// Log-hazards for `rows`, with the trunk at each row's `t_{j-1} / tau`.
    pub fn h_eval_batch(&self, data: &ExpandedDataset, rows: &[ExpandedRow]) -> Result<Vec<f64>> {
        if data.m() != self.dims.m || data.tv_dim != self.dims.tv_dim || data.ti_dim != self.dims.ti_dim {
            return Err(SurvError::Dimension(format!(
                "dataset geometry (m {}, tv {}, ti {}) vs network {:?}",
                data.m(),
                data.tv_dim,
                data.ti_dim,
                self.dims
            )));
        }
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(EVAL_CHUNK) {
            let refs: Vec<&ExpandedRow> = chunk.iter().collect();
            out.extend(self.eval_batch(&Batch::gather(data, &refs))?);
        }
        Ok(out)
    }
}

/// A trained network with the standardization and grid it was trained on.
#[derive(Debug, Clone)]
pub struct FittedDeepOnet {
    pub net: DeepOnet,
    pub scaler: Standardizer,
    pub grid: TimeGrid,
}

impl FittedDeepOnet {
    /// Log-hazards `h_1 .. h_m` for one raw covariate path, each interval
    /// seeing `x(t_0) .. x(t_{j-1})`.
    pub fn log_hazards(&self, path: &StepPath, statics: &[f64]) -> Result<Vec<f64>> {
        let dims = self.net.dims();
        let m = self.grid.m();
        if path.dim() != dims.tv_dim {
            return Err(SurvError::Dimension(format!(
                "path has {} covariates, model expects {}",
                path.dim(),
                dims.tv_dim
            )));
        }
        let d = dims.tv_dim;
        let mut sensors = vec![0.0; m * d];
        for k in 0..m {
            let t = self.grid.knot(k);
            let v = path.eval(t).ok_or_else(|| SurvError::Ingestion {
                subject: "<prediction>".into(),
                knot: t,
            })?;
            sensors[k * d..(k + 1) * d].copy_from_slice(v);
        }
        self.scaler.scale_sensors(&mut sensors, m);
        let mut z = statics.to_vec();
        if z.len() != dims.ti_dim {
            return Err(SurvError::Dimension(format!(
                "{} static covariates, model expects {}",
                z.len(),
                dims.ti_dim
            )));
        }
        self.scaler.scale_statics(&mut z);
        let tau = self.grid.tau();
        let mut batch = Batch {
            history: Array2::zeros((m, m * d)),
            statics: Array2::zeros((m, dims.ti_dim)),
            times: Array2::zeros((m, 1)),
            live: (1..=m).collect(),
        };
        for j in 1..=m {
            let mut h = batch.history.row_mut(j - 1);
            let h = h.as_slice_mut().expect("standard layout");
            h[..j * d].copy_from_slice(&sensors[..j * d]);
            batch
                .statics
                .row_mut(j - 1)
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&z);
            batch.times[[j - 1, 0]] = self.grid.knot(j - 1) / tau;
        }
        self.net.eval_batch(&batch)
    }

    /// Discretized loss of raw `records` on the model's grid.
    pub fn loss_on(&self, records: &[SurvivalRecord]) -> Result<f64> {
        let data = self.scaler.apply(&expand_dataset(records, &self.grid)?);
        let h = self.net.h_eval_batch(&data, &data.rows)?;
        likelihood_loss(&h, &data)
    }

    /// `S(t_k) = exp(-sum_{j<=k} e^{h_j} dt_j)` on the model's grid.
    pub fn predict_survival(
        &self,
        path: &StepPath,
        statics: &[f64],
        grid: &TimeGrid,
    ) -> Result<SurvivalCurve> {
        if grid != &self.grid {
            return Err(SurvError::Dimension(
                "prediction grid differs from the grid the model was trained on".into(),
            ));
        }
        let h = self.log_hazards(path, statics)?;
        if let Some(&v) = h.iter().find(|v| **v > H_LIMIT) {
            return Err(SurvError::Overflow { value: v, limit: H_LIMIT });
        }
        let hazards: Vec<f64> = h.iter().map(|v| v.exp()).collect();
        SurvivalCurve::from_interval_hazards(&self.grid, &hazards)
    }
}
