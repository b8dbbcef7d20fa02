//! Parameter groups shared by the transformer stacks.

use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attn {
    pub norm: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

pub(crate) fn add_linear<T: Scalar>(
    s: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Linear {
    Linear {
        w: s.add_normal(format!("{name}.w"), fan_in, fan_out, std, rng),
        b: s.add_zeros(format!("{name}.b"), 1, fan_out),
    }
}

pub(crate) fn add_norm<T: Scalar>(s: &mut ParamStore<T>, name: &str, d: usize) -> Norm {
    Norm {
        g: s.add_ones(format!("{name}.g"), 1, d),
        b: s.add_zeros(format!("{name}.b"), 1, d),
    }
}

/// Parameters bound into one graph.
pub(crate) struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn new<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>) -> Self {
        Self {
            vars: store.ids().map(|id| g.param(store, id)).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn linear<T: Scalar>(&self, g: &mut Graph<T>, x: Var, l: Linear) -> Var {
        g.linear(x, self.get(l.w), self.get(l.b))
    }

    pub fn norm<T: Scalar>(&self, g: &mut Graph<T>, x: Var, n: Norm) -> Var {
        g.layer_norm(x, self.get(n.g), self.get(n.b))
    }
}

