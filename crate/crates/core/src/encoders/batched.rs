//! Encoders recorded on a [`Tape`] for a whole batch of equally long
//! instances at once.
//!
//! A batch is stored column-wise: `positions[j][p]` is the row of the feature
//! matrix holding node `j` of instance `p`. Per-node products such as
//! `tanh(H W_h)` are computed once over the feature matrix and then gathered,
//! so the per-instance work reduces to row gathers and scalar products.

use std::sync::Arc;

use crate::engine::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceBatch {
    positions: Vec<Arc<[usize]>>,
}

impl InstanceBatch {
    /// `positions` holds one index column per instance position, source first.
    pub fn new(positions: Vec<Vec<usize>>) -> Result<Self> {
        let Some(first) = positions.first() else {
            return Err(Error::dim("instance_batch", "no positions"));
        };
        let n = first.len();
        if positions.iter().any(|p| p.len() != n) {
            return Err(Error::dim("instance_batch", "ragged position columns"));
        }
        Ok(InstanceBatch {
            positions: positions.into_iter().map(Arc::from).collect(),
        })
    }

    /// Builds the column layout from row-major instances of equal width.
    pub fn from_instances<'a>(width: usize, instances: impl IntoIterator<Item = &'a [usize]>) -> Result<Self> {
        let mut cols = vec![Vec::new(); width];
        for inst in instances {
            if inst.len() != width {
                return Err(Error::dim(
                    "instance_batch",
                    format!("instance of width {}, expected {width}", inst.len()),
                ));
            }
            for (c, &v) in cols.iter_mut().zip(inst) {
                c.push(v);
            }
        }
        Self::new(cols)
    }

    pub fn width(&self) -> usize {
        self.positions.len()
    }

    pub fn hops(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn len(&self) -> usize {
        self.positions[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, j: usize) -> &Arc<[usize]> {
        &self.positions[j]
    }

    pub fn sources(&self) -> &Arc<[usize]> {
        &self.positions[0]
    }

    pub fn terminals(&self) -> &Arc<[usize]> {
        &self.positions[self.positions.len() - 1]
    }
}

/// Tape handles of one multi-hop encoder head.
#[derive(Debug, Clone, Copy)]
pub struct MultihopVars {
    pub w_h: Var,
    pub w_t: Var,
    pub v_a: Var,
    pub gamma: f64,
    pub leaky_slope: f64,
}

/// Tape handles of one direct encoder head.
#[derive(Debug, Clone, Copy)]
pub struct DirectVars {
    pub w_t: Var,
    pub w_h: Var,
}

/// Multi-hop encodings (`len x d`) of every instance in `batch`, reading node
/// features from the rows of `h`.
pub fn multihop_batch(tape: &mut Tape, h: Var, batch: &InstanceBatch, p: &MultihopVars) -> Result<Var> {
    super::check_gamma(p.gamma)?;
    let d = tape.shape(h).1;
    if tape.shape(p.v_a) != (2 * d, 1) {
        return Err(Error::dim(
            "multihop_batch",
            format!("v_a {:?} for width {d}", tape.shape(p.v_a)),
        ));
    }
    let hw_h = tape.matmul(h, p.w_h)?;
    let sender = tape.tanh(hw_h);
    let hw_t = tape.matmul(h, p.w_t)?;
    let receiver = tape.tanh(hw_t);
    let v_h = tape.slice_rows(p.v_a, 0, d)?;
    let v_t = tape.slice_rows(p.v_a, d, d)?;
    let u_h = tape.matmul(sender, v_h)?;
    let u_t = tape.matmul(receiver, v_t)?;

    let score = |tape: &mut Tape, sender: usize, receiver: usize| -> Result<Var> {
        let a = tape.gather_rows(u_h, batch.position(sender).clone())?;
        let b = tape.gather_rows(u_t, batch.position(receiver).clone())?;
        let e = tape.add(a, b)?;
        let e = tape.leaky_relu(e, p.leaky_slope);
        Ok(tape.sigmoid(e))
    };

    let self_loop = score(tape, 0, 0)?;
    let coeff = tape.scale(self_loop, p.gamma);
    let h0 = tape.gather_rows(h, batch.sources().clone())?;
    let mut out = tape.mul_col(h0, coeff)?;
    let mut product: Option<Var> = None;
    let mut decay = p.gamma;
    for j in 1..batch.width() {
        let link = score(tape, j, j - 1)?;
        let prod = match product {
            None => link,
            Some(prev) => tape.mul(prev, link)?,
        };
        product = Some(prod);
        decay *= 1.0 - p.gamma;
        let coeff = tape.scale(prod, decay);
        let hj = tape.gather_rows(h, batch.position(j).clone())?;
        let term = tape.mul_col(hj, coeff)?;
        out = tape.add(out, term)?;
    }
    Ok(out)
}

/// Direct attention encodings (`len x d`) of every instance in `batch`.
pub fn direct_batch(tape: &mut Tape, h: Var, batch: &InstanceBatch, p: &DirectVars) -> Result<Var> {
    let d = tape.shape(h).1;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let hw_t = tape.matmul(h, p.w_t)?;
    let hw_h = tape.matmul(h, p.w_h)?;
    let source = tape.gather_rows(hw_t, batch.sources().clone())?;

    let weighted = |tape: &mut Tape, node: Var| -> Result<Var> {
        let s = tape.row_dot(source, node)?;
        let s = tape.scale(s, inv_sqrt_d);
        let a = tape.sigmoid(s);
        tape.mul_col(node, a)
    };

    let mut out = weighted(tape, source)?;
    for j in 1..batch.width() {
        let node = tape.gather_rows(hw_h, batch.position(j).clone())?;
        let term = weighted(tape, node)?;
        out = tape.add(out, term)?;
    }
    Ok(out)
}

/// Terminal-node features of every instance, ignoring intermediates.
pub fn terminal_batch(tape: &mut Tape, h: Var, batch: &InstanceBatch) -> Result<Var> {
    tape.gather_rows(h, batch.terminals().clone())
}
