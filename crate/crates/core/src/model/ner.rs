use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{init_fan_in, ModelError};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::text::NUM_TAGS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RnnCell {
    #[default]
    Elman,
    Gru,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NerConfig {
    pub rnn_layers: usize,
    pub rnn_hidden_dim: usize,
    pub ffnn_hidden_dim: usize,
    pub cell: RnnCell,
}

impl Default for NerConfig {
    fn default() -> Self {
        NerConfig {
            rnn_layers: 3,
            rnn_hidden_dim: 64,
            ffnn_hidden_dim: 64,
            cell: RnnCell::Elman,
        }
    }
}

/// One gate: input weights, recurrent weights, bias.
#[derive(Debug, Clone, PartialEq)]
struct Gate {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
enum Cell {
    Elman(Gate),
    Gru {
        update: Gate,
        reset: Gate,
        cand: Gate,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Direction {
    cell: Cell,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NerHead {
    pub config: NerConfig,
    layers: Vec<[Direction; 2]>,
    hidden_w: ParamId,
    hidden_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

fn gate(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    input: usize,
    hidden: usize,
) -> Gate {
    Gate {
        w: store.add(format!("{prefix}/w"), init_fan_in(rng, input, hidden)),
        u: store.add(format!("{prefix}/u"), init_fan_in(rng, hidden, hidden)),
        b: store.add(format!("{prefix}/b"), Tensor::zeros(&[1, hidden])),
    }
}

impl NerHead {
    pub fn new(
        config: NerConfig,
        input_dim: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        if config.rnn_layers == 0 || config.rnn_hidden_dim == 0 || config.ffnn_hidden_dim == 0 {
            return Err(ModelError::Config(
                "rnn_layers, rnn_hidden_dim and ffnn_hidden_dim must be positive".into(),
            ));
        }
        let h = config.rnn_hidden_dim;
        let layers = (0..config.rnn_layers)
            .map(|l| {
                let input = if l == 0 { input_dim } else { 2 * h };
                ["fwd", "bwd"].map(|dir| {
                    let p = format!("ner/rnn{l}/{dir}");
                    let cell = match config.cell {
                        RnnCell::Elman => Cell::Elman(gate(store, rng, &p, input, h)),
                        RnnCell::Gru => Cell::Gru {
                            update: gate(store, rng, &format!("{p}/update"), input, h),
                            reset: gate(store, rng, &format!("{p}/reset"), input, h),
                            cand: gate(store, rng, &format!("{p}/cand"), input, h),
                        },
                    };
                    Direction { cell }
                })
            })
            .collect();
        let f = config.ffnn_hidden_dim;
        Ok(NerHead {
            hidden_w: store.add("ner/ffnn/w", init_fan_in(rng, 2 * h, f)),
            hidden_b: store.add("ner/ffnn/b", Tensor::zeros(&[1, f])),
            out_w: store.add("ner/out/w", init_fan_in(rng, f, NUM_TAGS)),
            out_b: store.add("ner/out/b", Tensor::zeros(&[1, NUM_TAGS])),
            config,
            layers,
        })
    }

    /// `x·W + b` for the whole sequence at once.
    fn project(g: &mut Graph, store: &ParamStore, x: Var, gate: &Gate) -> Result<Var, ModelError> {
        let w = g.param(store, gate.w);
        let b = g.param(store, gate.b);
        let xw = g.matmul(x, w)?;
        Ok(g.add_row(xw, b)?)
    }

    fn recur(
        g: &mut Graph,
        store: &ParamStore,
        pre: Var,
        t: usize,
        h: Var,
        u: ParamId,
    ) -> Result<Var, ModelError> {
        let row = g.slice_rows(pre, t..t + 1)?;
        let u = g.param(store, u);
        let hu = g.matmul(h, u)?;
        Ok(g.add(row, hu)?)
    }

    /// Runs one direction; the returned states are in sequence order.
    fn run(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        dir: &Direction,
        x: Var,
        reverse: bool,
    ) -> Result<Var, ModelError> {
        let n = g.value(x).rows();
        let hd = self.config.rnn_hidden_dim;
        let order: Vec<usize> = if reverse {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        };
        let mut h = g.constant(Tensor::zeros(&[1, hd]));
        let mut states = vec![h; n];
        match &dir.cell {
            Cell::Elman(gt) => {
                let pre = Self::project(g, store, x, gt)?;
                for &t in &order {
                    let a = Self::recur(g, store, pre, t, h, gt.u)?;
                    h = g.tanh(a);
                    states[t] = h;
                }
            }
            Cell::Gru {
                update,
                reset,
                cand,
            } => {
                let pz = Self::project(g, store, x, update)?;
                let pr = Self::project(g, store, x, reset)?;
                let pn = Self::project(g, store, x, cand)?;
                for &t in &order {
                    let z = Self::recur(g, store, pz, t, h, update.u)?;
                    let z = g.sigmoid(z);
                    let r = Self::recur(g, store, pr, t, h, reset.u)?;
                    let r = g.sigmoid(r);
                    let rh = g.mul(r, h)?;
                    let c = Self::recur(g, store, pn, t, rh, cand.u)?;
                    let c = g.tanh(c);
                    // h' = c + z⊙(h − c)
                    let diff = g.sub(h, c)?;
                    let keep = g.mul(z, diff)?;
                    h = g.add(c, keep)?;
                    states[t] = h;
                }
            }
        }
        Ok(g.concat_rows(&states)?)
    }

    /// Stacked bidirectional recurrence over `n×d` inputs; returns
    /// `n×2·rnn_hidden_dim` with forward states in the left half.
    pub fn birnn_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var, ModelError> {
        let mut cur = x;
        for [fwd, bwd] in &self.layers {
            let f = self.run(g, store, fwd, cur, false)?;
            let b = self.run(g, store, bwd, cur, true)?;
            cur = g.concat_cols(&[f, b])?;
        }
        Ok(cur)
    }

    /// Linear, ReLU, linear to tag logits.
    pub fn classify_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hidden: Var,
    ) -> Result<Var, ModelError> {
        let w1 = g.param(store, self.hidden_w);
        let b1 = g.param(store, self.hidden_b);
        let w2 = g.param(store, self.out_w);
        let b2 = g.param(store, self.out_b);
        let a = g.matmul(hidden, w1)?;
        let a = g.add_row(a, b1)?;
        let a = g.relu(a);
        let o = g.matmul(a, w2)?;
        Ok(g.add_row(o, b2)?)
    }
}
