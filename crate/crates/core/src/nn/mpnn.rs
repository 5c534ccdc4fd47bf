//! Message passing over a fixed structure, for tasks that only generate node
//! features: two rounds of sum-aggregated neighbour messages, each message
//! gated by a sigmoid of the pair stream. Only the node stream is updated.

use rand::Rng;

use super::{linear, register_linear};
use crate::autograd::Var;
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::Tensor;

pub const ROUNDS: usize = 2;

pub fn register(store: &mut ParamStore, hidden: usize, rng: &mut impl Rng) {
    for r in 0..ROUNDS {
        for part in ["time", "msg", "gate", "upd", "self"] {
            register_linear(
                store,
                &format!("mpnn{r}.{part}"),
                hidden,
                hidden,
                true,
                Init::Xavier,
                rng,
            );
        }
    }
}

/// `adjacency[i*n + j]` marks the neighbours of `i`.
pub fn forward(
    b: &mut Binder,
    x: Var,
    e: Var,
    temb: Var,
    adjacency: &[bool],
    mask: Option<&[bool]>,
) -> Var {
    let n = b.value(x).rows;
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let mut weights = Tensor::zeros(n * n, 1);
    for i in 0..n {
        for j in 0..n {
            if i != j && adjacency[i * n + j] && keep(i) && keep(j) {
                weights.data[i * n + j] = 1.0;
            }
        }
    }
    let weights = b.constant(weights);
    let mut x = x;
    for r in 0..ROUNDS {
        let t = linear(b, temb, &format!("mpnn{r}.time"));
        let x_in = b.tape.add_row(x, t);
        let m = linear(b, x_in, &format!("mpnn{r}.msg"));
        let m = b.tape.pair_cols(m);
        let gate = linear(b, e, &format!("mpnn{r}.gate"));
        let gate = b.tape.sigmoid(gate);
        let m = b.tape.mul(m, gate);
        let agg = b.tape.pair_aggregate(weights, m);
        let upd = linear(b, agg, &format!("mpnn{r}.upd"));
        let own = linear(b, x_in, &format!("mpnn{r}.self"));
        let h = b.tape.add(upd, own);
        let h = b.tape.relu(h);
        x = b.tape.add(x_in, h);
    }
    x
}
