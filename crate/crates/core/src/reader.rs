//! Prototype reader: encoders, cross-dependency matrix, summary pattern and
//! prototype facts.

use crate::nn::{Alpha, BiLstm, Conv1d, Init};
use crate::tensor_core::{Graph, Scalar, TensorError, Var};

#[derive(Clone, Debug)]
pub struct PrototypeReader {
    /// Shared by the input document and the prototype document.
    pub enc_x: BiLstm,
    pub enc_y: BiLstm,
    pub alpha: Alpha,
    pub conv: Conv1d,
    /// Softmax-normalize `a_s` and `a_d` instead of using raw means.
    pub normalize: bool,
}

/// Reader outputs. Row vectors are `1 x n`.
#[derive(Clone, Debug)]
pub struct EncodedStates {
    /// `T_m x 2H`.
    pub h_x: Var,
    pub h_x_last: Var,
    pub h_xhat: Var,
    pub h_xhat_last: Var,
    pub h_yhat: Var,
    /// `T^_m x T^_n`.
    pub s: Var,
    /// `1 x T^_n`.
    pub a_s: Var,
    /// `1 x T^_m`.
    pub a_d: Var,
    /// `T^_n x 2H`.
    pub l: Var,
    /// `T^_m x C`.
    pub r_hat: Var,
    /// `1 x C`.
    pub q: Var,
}

/// Scales row `t` of `states` by `weights[0][t]`.
pub fn scale_rows<T: Scalar>(g: &mut Graph<T>, states: Var, weights: Var) -> Result<Var, TensorError> {
    let col = g.transpose(weights);
    g.mul(states, col)
}

/// Column means `a_s` and row means `a_d` of `S`, both as row vectors.
pub fn cross_weights<T: Scalar>(g: &mut Graph<T>, s: Var, normalize: bool) -> (Var, Var) {
    let mut a_s = g.mean_rows(s);
    let a_d = g.mean_cols(s);
    let mut a_d = g.transpose(a_d);
    if normalize {
        a_s = g.softmax(a_s);
        a_d = g.softmax(a_d);
    }
    (a_s, a_d)
}

/// `l_i = a_s[i] * h_yhat[i]`.
pub fn summary_pattern<T: Scalar>(g: &mut Graph<T>, h_yhat: Var, a_s: Var) -> Result<Var, TensorError> {
    scale_rows(g, h_yhat, a_s)
}

impl PrototypeReader {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        emb_dim: usize,
        hidden: usize,
        channels: usize,
        kernel: usize,
        normalize: bool,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            enc_x: BiLstm::new(init, "reader.enc_x", emb_dim, hidden)?,
            enc_y: BiLstm::new(init, "reader.enc_y", emb_dim, hidden)?,
            alpha: Alpha::new(init, "reader.alpha", 2 * hidden)?,
            conv: Conv1d::new(init, "reader.conv", kernel, 2 * hidden, channels)?,
            normalize,
        })
    }

    /// `(S, a_s, a_d)` with `S[i][j] = alpha(h_xhat[i], h_yhat[j])`.
    pub fn cross_dependency<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        h_xhat: Var,
        h_yhat: Var,
    ) -> Result<(Var, Var, Var), TensorError> {
        let s = self.alpha.matrix(g, h_xhat, h_yhat)?;
        let (a_s, a_d) = cross_weights(g, s, self.normalize);
        Ok((s, a_s, a_d))
    }

    /// `r^_t = conv(a_d[t] * h_xhat[t])`, `q = sum_t r^_t`.
    pub fn prototype_facts<T: Scalar>(&self, g: &mut Graph<T>, h_xhat: Var, a_d: Var) -> Result<(Var, Var), TensorError> {
        let scaled = scale_rows(g, h_xhat, a_d)?;
        let r_hat = self.conv.forward(g, scaled)?;
        let q = g.sum_rows(r_hat);
        Ok((r_hat, q))
    }

    /// Takes already-embedded `X`, `X^`, `Y^`.
    pub fn read<T: Scalar>(&self, g: &mut Graph<T>, x: Var, xhat: Var, yhat: Var) -> Result<EncodedStates, TensorError> {
        let hx = self.enc_x.encode(g, x)?;
        let hxh = self.enc_x.encode(g, xhat)?;
        let hyh = self.enc_y.encode(g, yhat)?;
        let (s, a_s, a_d) = self.cross_dependency(g, hxh.states, hyh.states)?;
        let l = summary_pattern(g, hyh.states, a_s)?;
        let (r_hat, q) = self.prototype_facts(g, hxh.states, a_d)?;
        Ok(EncodedStates {
            h_x: hx.states,
            h_x_last: hx.last,
            h_xhat: hxh.states,
            h_xhat_last: hxh.last,
            h_yhat: hyh.states,
            s,
            a_s,
            a_d,
            l,
            r_hat,
            q,
        })
    }
}
