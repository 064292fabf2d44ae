use numcore::{glorot_init, Activation, ParamId, ParamStore, ParamTensor, Tape, Var};
use rand::RngCore;

/// One hidden ReLU layer on the scalar (normalized) time, then a linear map to `p`.
#[derive(Debug, Clone)]
pub struct Trunk {
    hidden: (ParamId, ParamId),
    out: (ParamId, ParamId),
}

impl Trunk {
    pub fn build(nodes: usize, p: usize, params: &mut ParamStore, rng: &mut dyn RngCore) -> Self {
        let hidden = (
            params.add("trunk.hidden.w", glorot_init(&[nodes, 1], rng)),
            params.add("trunk.hidden.b", ParamTensor::zeros(&[nodes])),
        );
        let out = (
            params.add("trunk.out.w", glorot_init(&[p, nodes], rng)),
            params.add("trunk.out.b", ParamTensor::zeros(&[p])),
        );
        Self { hidden, out }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, s: Var) -> numcore::Result<Var> {
        let h = tape.dense("trunk.hidden", params, s, self.hidden.0, self.hidden.1, Activation::Relu)?;
        tape.dense("trunk.out", params, h, self.out.0, self.out.1, Activation::Linear)
    }
}
