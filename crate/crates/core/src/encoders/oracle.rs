//! Matrix-series evaluation of the multi-hop encoder.
//!
//! Builds the `(k+1) x (k+1)` chain attention matrix `A` with
//! `A[j-1][j] = a_{j(j-1)}` and zeros elsewhere, takes the zeroth power to be
//! the diagonal of self-loop scores, sums
//! `D = g diag(self) + sum_{m=1..k} g (1-g)^m A^m` by explicit matrix powers,
//! and applies row 0 of `D` to the stacked features. `A` is strictly upper
//! triangular, so `A^(k+1)` vanishes and the truncated series is exact.
//!
//! This path is O(k^3 + k d) per instance and exists to certify the closed
//! form; it shares only the link scores with it.

use super::{leaky, link_halves, one_hop_scores, ChainAttention, MultihopEncoderParams};
use crate::engine::stable_sigmoid;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The strictly upper triangular chain matrix.
pub fn chain_matrix(att: &ChainAttention) -> Tensor {
    let n = att.hops() + 1;
    let mut a = Tensor::zeros(n, n);
    for (j, &link) in att.links.iter().enumerate() {
        a.set(j, j + 1, link);
    }
    a
}

/// `a^p` by repeated multiplication; `a^0` is the identity.
pub fn matrix_power(a: &Tensor, p: usize) -> Result<Tensor> {
    let mut out = Tensor::identity(a.rows());
    for _ in 0..p {
        out = out.matmul(a)?;
    }
    Ok(out)
}

/// Multi-hop encoding of one instance via the truncated diffusion series.
pub fn diffusion_oracle(features: &Tensor, p: &MultihopEncoderParams) -> Result<Tensor> {
    let att = one_hop_scores(features, p)?;
    let k = att.hops();
    let n = k + 1;
    let a = chain_matrix(&att);

    // Self-loop scores for every node; only row 0 reaches the output.
    let (u_h, u_t) = link_halves(features, p)?;
    let mut diffusion = Tensor::zeros(n, n);
    for i in 0..n {
        let self_score = stable_sigmoid(leaky(u_h[i] + u_t[i], p.leaky_slope));
        diffusion.set(i, i, p.gamma * self_score);
    }

    let mut power = Tensor::identity(n);
    let mut weight = p.gamma;
    for _ in 1..=k {
        power = power.matmul(&a)?;
        weight *= 1.0 - p.gamma;
        for (d, x) in diffusion.data_mut().iter_mut().zip(power.data()) {
            *d += weight * x;
        }
    }
    let vanished = power.matmul(&a)?;
    if vanished.data().iter().any(|&x| x != 0.0) {
        return Err(Error::Check(format!(
            "chain matrix power {} is not zero",
            k + 1
        )));
    }

    let row0 = Tensor::row_vector(diffusion.row(0).to_vec());
    row0.matmul(features)
}
