use rand::Rng;

use crate::diffcore::{Graph, ParamId, ParameterStore, Tensor, Var};
use crate::error::{ensure, Result};

/// Gated recurrent cell.
///
/// ```text
/// z  = σ(W_z [x; h] + b_z)
/// r  = σ(W_r [x; h] + b_r)
/// h̃  = tanh(W_h [x; r∘h] + b_h)
/// h' = (1 − z)∘h̃ + z∘h
/// ```
///
/// Each weight matrix is `hidden × (input + hidden)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    pub w_update: ParamId,
    pub b_update: ParamId,
    pub w_reset: ParamId,
    pub b_reset: ParamId,
    pub w_cand: ParamId,
    pub b_cand: ParamId,
}

const PARTS: [&str; 6] = [
    "w_update", "b_update", "w_reset", "b_reset", "w_cand", "b_cand",
];

impl GruCell {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(input > 0 && hidden > 0, "recurrent cell sizes must be positive");
        let cols = input + hidden;
        let w_update = store.insert_glorot(format!("{prefix}.w_update"), hidden, cols, rng)?;
        let b_update = store.insert_zeros(format!("{prefix}.b_update"), &[hidden])?;
        let w_reset = store.insert_glorot(format!("{prefix}.w_reset"), hidden, cols, rng)?;
        let b_reset = store.insert_zeros(format!("{prefix}.b_reset"), &[hidden])?;
        let w_cand = store.insert_glorot(format!("{prefix}.w_cand"), hidden, cols, rng)?;
        let b_cand = store.insert_zeros(format!("{prefix}.b_cand"), &[hidden])?;
        Ok(GruCell {
            input,
            hidden,
            w_update,
            b_update,
            w_reset,
            b_reset,
            w_cand,
            b_cand,
        })
    }

    /// Rebind a cell previously registered under `prefix`, checking all six shapes.
    pub fn bind(store: &ParameterStore, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        let mut ids = [ParamId(0); 6];
        for (slot, part) in ids.iter_mut().zip(PARTS) {
            let id = store.id(&format!("{prefix}.{part}"))?;
            let want: &[usize] = if part.starts_with('w') {
                &[hidden, input + hidden]
            } else {
                &[hidden]
            };
            ensure!(
                store.value(id).shape() == want,
                "{prefix}.{part} has shape {:?}, expected {want:?}",
                store.value(id).shape()
            );
            *slot = id;
        }
        Ok(GruCell {
            input,
            hidden,
            w_update: ids[0],
            b_update: ids[1],
            w_reset: ids[2],
            b_reset: ids[3],
            w_cand: ids[4],
            b_cand: ids[5],
        })
    }

    pub fn zero_state(&self, g: &mut Graph) -> Var {
        g.constant(Tensor::zeros(&[self.hidden]))
    }

    fn gate(&self, g: &mut Graph, w: ParamId, b: ParamId, xh: Var) -> Result<Var> {
        let w = g.param(w);
        let b = g.param(b);
        let lin = g.matmul(w, xh)?;
        g.add(lin, b)
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        ensure!(
            g.shape(x) == [self.input],
            "recurrent input has shape {:?}, cell expects [{}]",
            g.shape(x),
            self.input
        );
        let xh = g.concat(&[x, h])?;
        let z = self.gate(g, self.w_update, self.b_update, xh)?;
        let z = g.sigmoid(z);
        let r = self.gate(g, self.w_reset, self.b_reset, xh)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let xrh = g.concat(&[x, rh])?;
        let cand = self.gate(g, self.w_cand, self.b_cand, xrh)?;
        let cand = g.tanh(cand);
        // (1 − z)∘h̃ + z∘h == h̃ + z∘(h − h̃)
        let diff = g.sub(h, cand)?;
        let zd = g.mul(z, diff)?;
        g.add(cand, zd)
    }

    /// Run the cell over `inputs` from `h0`, returning every hidden state.
    pub fn unroll(&self, g: &mut Graph, inputs: &[Var], h0: Var) -> Result<Vec<Var>> {
        ensure!(!inputs.is_empty(), "recurrent encoding of an empty sequence");
        let mut states = Vec::with_capacity(inputs.len());
        let mut h = h0;
        for &x in inputs {
            h = self.step(g, x, h)?;
            states.push(h);
        }
        Ok(states)
    }

    /// Last hidden state after running over `inputs` from the zero state.
    pub fn encode(&self, g: &mut Graph, inputs: &[Var]) -> Result<Var> {
        let h0 = self.zero_state(g);
        Ok(*self.unroll(g, inputs, h0)?.last().unwrap())
    }
}
