use std::collections::BTreeMap;
use std::fmt::Debug;

use numcore::{glorot_init, Activation, ParamId, ParamStore, ParamTensor, SeqShape, Tape, Var};
use rand::RngCore;

use super::hyper::{HyperParams, InputDims};
use crate::error::{Result, SurvError};

/// Encodes a masked covariate history plus static covariates into a `p`-vector.
pub trait BranchNet: Debug + Send + Sync {
    fn variant(&self) -> &str;

    /// `history` is `batch x (m * tv_dim)` position-major, `statics` is `batch x ti_dim`.
    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        history: Var,
        statics: Var,
    ) -> numcore::Result<Var>;

    fn box_clone(&self) -> Box<dyn BranchNet>;
}

impl Clone for Box<dyn BranchNet> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// Builds a branch net, registering its parameters in `params`.
pub trait BranchFactory: Send + Sync {
    fn name(&self) -> &str;

    fn build(
        &self,
        dims: &InputDims,
        hyper: &HyperParams,
        params: &mut ParamStore,
        rng: &mut dyn RngCore,
    ) -> Result<Box<dyn BranchNet>>;
}

type Layer = (ParamId, ParamId);

fn dense_layer(
    params: &mut ParamStore,
    name: &str,
    out: usize,
    inp: usize,
    rng: &mut dyn RngCore,
) -> Layer {
    (
        params.add(format!("{name}.w"), glorot_init(&[out, inp], rng)),
        params.add(format!("{name}.b"), ParamTensor::zeros(&[out])),
    )
}

fn join_statics(tape: &mut Tape, x: Var, statics: Var, has_statics: bool) -> numcore::Result<Var> {
    if has_statics {
        tape.concat("branch.concat", &[x, statics])
    } else {
        Ok(x)
    }
}

fn dense_stack(
    tape: &mut Tape,
    params: &ParamStore,
    mut x: Var,
    hidden: &[Layer],
    out: Layer,
) -> numcore::Result<Var> {
    for (i, &(w, b)) in hidden.iter().enumerate() {
        x = tape.dense(format!("branch.hidden{i}"), params, x, w, b, Activation::Relu)?;
    }
    tape.dense("branch.out", params, x, out.0, out.1, Activation::Linear)
}

/// Flattened history concatenated with the statics, then a dense ReLU stack.
#[derive(Debug, Clone)]
pub struct FnnBranch {
    hidden: Vec<Layer>,
    out: Layer,
    has_statics: bool,
}

impl BranchNet for FnnBranch {
    fn variant(&self) -> &str {
        "fnn"
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        history: Var,
        statics: Var,
    ) -> numcore::Result<Var> {
        let x = join_statics(tape, history, statics, self.has_statics)?;
        dense_stack(tape, params, x, &self.hidden, self.out)
    }

    fn box_clone(&self) -> Box<dyn BranchNet> {
        Box::new(self.clone())
    }
}

pub struct FnnFactory;

impl BranchFactory for FnnFactory {
    fn name(&self) -> &str {
        "fnn"
    }

    fn build(
        &self,
        dims: &InputDims,
        hyper: &HyperParams,
        params: &mut ParamStore,
        rng: &mut dyn RngCore,
    ) -> Result<Box<dyn BranchNet>> {
        let layers = hyper.branch_hidden_layers.unwrap_or(2);
        let mut inp = dims.history_width() + dims.ti_dim;
        let mut hidden = Vec::with_capacity(layers);
        for i in 0..layers {
            hidden.push(dense_layer(params, &format!("branch.hidden{i}"), hyper.nodes, inp, rng));
            inp = hyper.nodes;
        }
        let out = dense_layer(params, "branch.out", hyper.p, inp, rng);
        Ok(Box::new(FnnBranch {
            hidden,
            out,
            has_statics: dims.ti_dim > 0,
        }))
    }
}

/// Two causal conv + max-pool blocks over the time-varying channels; the
/// statics join only after flattening.
#[derive(Debug, Clone)]
pub struct CnnBranch {
    convs: Vec<Layer>,
    seq: SeqShape,
    pool: usize,
    hidden: Vec<Layer>,
    out: Layer,
    has_statics: bool,
}

impl BranchNet for CnnBranch {
    fn variant(&self) -> &str {
        "cnn"
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        history: Var,
        statics: Var,
    ) -> numcore::Result<Var> {
        let mut x = history;
        let mut shape = self.seq;
        for (i, &(k, b)) in self.convs.iter().enumerate() {
            (x, shape) = tape.conv_pool(format!("branch.conv{i}"), params, x, shape, k, b, Activation::Relu, self.pool)?;
        }
        let x = join_statics(tape, x, statics, self.has_statics)?;
        dense_stack(tape, params, x, &self.hidden, self.out)
    }

    fn box_clone(&self) -> Box<dyn BranchNet> {
        Box::new(self.clone())
    }
}

pub struct CnnFactory;

impl BranchFactory for CnnFactory {
    fn name(&self) -> &str {
        "cnn"
    }

    fn build(
        &self,
        dims: &InputDims,
        hyper: &HyperParams,
        params: &mut ParamStore,
        rng: &mut dyn RngCore,
    ) -> Result<Box<dyn BranchNet>> {
        if dims.tv_dim == 0 {
            return Err(SurvError::Config(
                "the cnn branch needs at least one time-varying covariate".into(),
            ));
        }
        let mut convs = Vec::with_capacity(2);
        let mut channels = dims.tv_dim;
        let mut len = dims.m;
        for i in 0..2 {
            let k = params.add(
                format!("branch.conv{i}.k"),
                glorot_init(&[hyper.filters, hyper.kernel_width, channels], rng),
            );
            let b = params.add(format!("branch.conv{i}.b"), ParamTensor::zeros(&[hyper.filters]));
            convs.push((k, b));
            channels = hyper.filters;
            len = len.div_ceil(hyper.pool);
        }
        let layers = hyper.branch_hidden_layers.unwrap_or(1);
        let mut inp = channels * len + dims.ti_dim;
        let mut hidden = Vec::with_capacity(layers);
        for i in 0..layers {
            hidden.push(dense_layer(params, &format!("branch.hidden{i}"), hyper.nodes, inp, rng));
            inp = hyper.nodes;
        }
        let out = dense_layer(params, "branch.out", hyper.p, inp, rng);
        Ok(Box::new(CnnBranch {
            convs,
            seq: SeqShape::new(dims.tv_dim, dims.m),
            pool: hyper.pool,
            hidden,
            out,
            has_statics: dims.ti_dim > 0,
        }))
    }
}

/// Branch variants by name.
pub struct BranchRegistry {
    factories: BTreeMap<String, Box<dyn BranchFactory>>,
}

impl BranchRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, factory: Box<dyn BranchFactory>) {
        self.factories.insert(factory.name().to_string(), factory);
    }

    pub fn get(&self, name: &str) -> Result<&dyn BranchFactory> {
        self.factories.get(name).map(|f| f.as_ref()).ok_or_else(|| {
            SurvError::Config(format!(
                "unknown branch variant `{name}` (known: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }
}

impl Default for BranchRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(FnnFactory));
        r.register(Box::new(CnnFactory));
        r
    }
}
