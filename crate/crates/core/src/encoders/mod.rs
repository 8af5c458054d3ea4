//! Metapath-instance encoders.
//!
//! An instance `v_0, v_1, ..., v_k` is read as the directed chain
//! `v_0 <- v_1 <- ... <- v_k` feeding the source `v_0`. Inputs are the
//! type-projected features of the instance nodes, one row per node.
//!
//! The multi-hop encoder scores each link of the chain with a one-layer
//! attention (no relation term, sigmoid in place of softmax) and diffuses
//! over the chain. Because the chain matrix is nilpotent the diffusion series
//! is finite and collapses to
//!
//! ```text
//! h_0' = g a_00 h_0 + sum_{i=1..k} g (1-g)^i (a_10 a_21 ... a_i(i-1)) h_i
//! ```
//!
//! with teleport rate `g`. [`oracle::diffusion_oracle`] evaluates the same
//! quantity through explicit matrix powers.
//!
//! The direct encoder lets the transformed source attend to every transformed
//! node of the instance, itself included.

pub mod batched;
pub mod oracle;

use serde::{Deserialize, Serialize};

use crate::engine::stable_sigmoid;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_GAMMA: f64 = 0.4;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    #[default]
    Multihop,
    Direct,
    /// Keep only the terminal node's features, as plain HAN does.
    TerminalOnly,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Multihop => "multihop",
            EncoderKind::Direct => "direct",
            EncoderKind::TerminalOnly => "terminal-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "multihop" => Some(EncoderKind::Multihop),
            "direct" => Some(EncoderKind::Direct),
            "terminal-only" => Some(EncoderKind::TerminalOnly),
            _ => None,
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Weights of the multi-hop encoder for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct MultihopEncoderParams {
    /// Applied to the node sending along a link (`d x d`).
    pub w_h: Tensor,
    /// Applied to the node receiving along a link (`d x d`).
    pub w_t: Tensor,
    /// Attention vector over `[tanh(h_j W_h) | tanh(h_{j-1} W_t)]`, `2d x 1`.
    pub v_a: Tensor,
    pub gamma: f64,
    pub leaky_slope: f64,
}

impl MultihopEncoderParams {
    pub fn dim(&self) -> usize {
        self.w_h.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_h.rows();
        if self.w_h.shape() != (d, d) || self.w_t.shape() != (d, d) {
            return Err(Error::dim(
                "multihop_encoder",
                format!("W_h {:?}, W_t {:?}", self.w_h.shape(), self.w_t.shape()),
            ));
        }
        if self.v_a.shape() != (2 * d, 1) {
            return Err(Error::dim(
                "multihop_encoder",
                format!("v_a {:?}, expected ({}, 1)", self.v_a.shape(), 2 * d),
            ));
        }
        check_gamma(self.gamma)
    }
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("teleport rate {gamma} outside (0, 1)")))
    }
}

/// Weights of the direct attention encoder for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectEncoderParams {
    /// Source transform (`d x d`).
    pub w_t: Tensor,
    /// Transform for every other instance node (`d x d`).
    pub w_h: Tensor,
}

impl DirectEncoderParams {
    pub fn dim(&self) -> usize {
        self.w_t.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_t.rows();
        if self.w_t.shape() != (d, d) || self.w_h.shape() != (d, d) {
            return Err(Error::dim(
                "direct_encoder",
                format!("W_t {:?}, W_h {:?}", self.w_t.shape(), self.w_h.shape()),
            ));
        }
        Ok(())
    }
}

/// Link scores of one instance: the source self-loop and each chain link.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainAttention {
    /// `a_00`.
    pub self_loop: f64,
    /// `a_{j(j-1)}` for `j = 1..=k`: how strongly `v_{j-1}` takes in `v_j`.
    pub links: Vec<f64>,
}

impl ChainAttention {
    /// Number of hops `k`.
    pub fn hops(&self) -> usize {
        self.links.len()
    }

    /// Coefficient on `h_i` in the closed-form encoding.
    pub fn hop_coefficients(&self, gamma: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.links.len() + 1);
        out.push(gamma * self.self_loop);
        let mut product = 1.0;
        let mut decay = gamma;
        for &a in &self.links {
            product *= a;
            decay *= 1.0 - gamma;
            out.push(decay * product);
        }
        out
    }
}

fn check_instance(op: &'static str, features: &Tensor, d: usize) -> Result<()> {
    if features.rows() == 0 {
        return Err(Error::dim(op, "instance has no nodes"));
    }
    if features.cols() != d {
        return Err(Error::dim(
            op,
            format!("features have width {}, parameters expect {d}", features.cols()),
        ));
    }
    Ok(())
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-node halves of the link score: `v_h . tanh(h W_h)` and
/// `v_t . tanh(h W_t)` for every row of `features`.
pub(crate) fn link_halves(features: &Tensor, p: &MultihopEncoderParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = p.dim();
    let sender = features.matmul(&p.w_h)?.map(f64::tanh);
    let receiver = features.matmul(&p.w_t)?.map(f64::tanh);
    let (v_h, v_t) = p.v_a.data().split_at(d);
    let u_h = (0..features.rows()).map(|i| dot(sender.row(i), v_h)).collect();
    let u_t = (0..features.rows()).map(|i| dot(receiver.row(i), v_t)).collect();
    Ok((u_h, u_t))
}

/// Link scores `a_{j(j-1)} = sigmoid(LeakyReLU(v_a . tanh([h_j W_h | h_{j-1} W_t])))`
/// and the self-loop `a_00`, which uses `h_0` in both slots.
pub fn one_hop_scores(features: &Tensor, p: &MultihopEncoderParams) -> Result<ChainAttention> {
    p.validate()?;
    check_instance("one_hop_scores", features, p.dim())?;
    let (u_h, u_t) = link_halves(features, p)?;
    let score = |sender: usize, receiver: usize| {
        stable_sigmoid(leaky(u_h[sender] + u_t[receiver], p.leaky_slope))
    };
    Ok(ChainAttention {
        self_loop: score(0, 0),
        links: (1..features.rows()).map(|j| score(j, j - 1)).collect(),
    })
}

/// Closed-form multi-hop encoding of one instance (`1 x d`).
pub fn multihop_encode(features: &Tensor, p: &MultihopEncoderParams) -> Result<Tensor> {
    let att = one_hop_scores(features, p)?;
    let coeffs = att.hop_coefficients(p.gamma);
    let mut out = Tensor::zeros(1, features.cols());
    for (i, c) in coeffs.iter().enumerate() {
        for (o, &h) in out.data_mut().iter_mut().zip(features.row(i)) {
            *o += c * h;
        }
    }
    Ok(out)
}

/// Attention weights of the direct encoder: `alpha_i0` for `i = 0..=k`.
pub fn direct_attention(features: &Tensor, p: &DirectEncoderParams) -> Result<(Vec<f64>, Tensor)> {
    p.validate()?;
    check_instance("direct_encode", features, p.dim())?;
    let scale = (p.dim() as f64).sqrt();
    let source = features.gather_rows(&[0]).matmul(&p.w_t)?;
    let mut transformed = Tensor::zeros(features.rows(), p.dim());
    transformed.row_mut(0).copy_from_slice(source.row(0));
    if features.rows() > 1 {
        let rest: Vec<usize> = (1..features.rows()).collect();
        let others = features.gather_rows(&rest).matmul(&p.w_h)?;
        for i in 1..features.rows() {
            transformed.row_mut(i).copy_from_slice(others.row(i - 1));
        }
    }
    let alpha = (0..features.rows())
        .map(|i| stable_sigmoid(dot(source.row(0), transformed.row(i)) / scale))
        .collect();
    Ok((alpha, transformed))
}

/// Direct attention encoding of one instance (`1 x d`).
pub fn direct_encode(features: &Tensor, p: &DirectEncoderParams) -> Result<Tensor> {
    let (alpha, transformed) = direct_attention(features, p)?;
    let mut out = Tensor::zeros(1, p.dim());
    for (i, a) in alpha.iter().enumerate() {
        for (o, &h) in out.data_mut().iter_mut().zip(transformed.row(i)) {
            *o += a * h;
        }
    }
    Ok(out)
}
