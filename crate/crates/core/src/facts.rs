//! Fact extraction: prototype-guided input facts and K-hop polishing.
//!
//! The second polishing layer is a plain GRU whose new hidden state is used
//! both as the hop output `m_{k+1}` and as the next query `q_{k+1}`.

use crate::nn::{Alpha, Conv1d, Gru, Init, Sru};
use crate::reader::scale_rows;
use crate::tensor_core::{Graph, Scalar, TensorError, Var};

#[derive(Clone, Debug)]
pub struct FactExtractor {
    pub alpha: Alpha,
    pub conv: Conv1d,
    pub sru: Sru,
    pub gru: Gru,
}

#[derive(Clone, Debug)]
pub struct FactMemory {
    /// `T^_m x T_m`.
    pub e: Var,
    /// `1 x T_m`, column sums of `e`.
    pub e_row: Var,
    /// `T_m x C` input facts.
    pub r: Var,
    /// `K x C`, row `k` produced by hop `k + 1`.
    pub memory: Var,
    /// `q_0 .. q_K`.
    pub q_trace: Vec<Var>,
    /// SRU position gate of every hop, each `1 x T_m`.
    pub gates: Vec<Var>,
}

impl FactExtractor {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        hidden: usize,
        channels: usize,
        kernel: usize,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            alpha: Alpha::new(init, "facts.alpha", 2 * hidden)?,
            conv: Conv1d::new(init, "facts.conv", kernel, 2 * hidden, channels)?,
            sru: Sru::new(init, "facts.sru", channels)?,
            gru: Gru::new(init, "facts.gru", channels, channels)?,
        })
    }

    /// `E[i][j] = alpha(a_d[i] h_xhat[i], h_x[j])` and its column sums.
    pub fn cross_weights<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        h_xhat: Var,
        a_d: Var,
        h_x: Var,
    ) -> Result<(Var, Var), TensorError> {
        let scaled = scale_rows(g, h_xhat, a_d)?;
        let e = self.alpha.matrix(g, scaled, h_x)?;
        let e_row = g.sum_rows(e);
        Ok((e, e_row))
    }

    /// `r_t = conv(E_row[t] h_x[t])`.
    pub fn input_facts<T: Scalar>(&self, g: &mut Graph<T>, h_x: Var, e_row: Var) -> Result<Var, TensorError> {
        let scaled = scale_rows(g, h_x, e_row)?;
        self.conv.forward(g, scaled)
    }

    /// Runs `hops` SRU + GRU rounds starting from `q0`.
    pub fn polish<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        r: Var,
        q0: Var,
        hops: usize,
    ) -> Result<(Var, Vec<Var>, Vec<Var>), TensorError> {
        if hops == 0 {
            return Err(TensorError::InvalidArgument("polishing needs at least one hop".into()));
        }
        let mut q = q0;
        let mut trace = vec![q0];
        let mut gates = Vec::with_capacity(hops);
        let mut ms = Vec::with_capacity(hops);
        for _ in 0..hops {
            let out = self.sru.run(g, r, q)?;
            q = self.gru.step(g, out.last, q)?;
            gates.push(out.gate);
            ms.push(q);
            trace.push(q);
        }
        Ok((g.concat_rows(&ms)?, trace, gates))
    }

    pub fn extract<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        h_x: Var,
        h_xhat: Var,
        a_d: Var,
        q0: Var,
        hops: usize,
    ) -> Result<FactMemory, TensorError> {
        let (e, e_row) = self.cross_weights(g, h_xhat, a_d, h_x)?;
        let r = self.input_facts(g, h_x, e_row)?;
        let (memory, q_trace, gates) = self.polish(g, r, q0, hops)?;
        Ok(FactMemory { e, e_row, r, memory, q_trace, gates })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_core::{ParamStore, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn extractor(store: &mut ParamStore<f64>, hidden: usize, channels: usize) -> FactExtractor {
        let mut init = Init { store, rng: ChaCha8Rng::seed_from_u64(5), std: 0.4 };
        FactExtractor::new(&mut init, hidden, channels, 3).unwrap()
    }

    #[test]
    fn column_sums_by_hand() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let e = g.constant(Tensor::from_f64(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let row = g.sum_rows(e);
        assert_eq!(g.value(row).data(), &[4.0, 6.0]);
    }

    #[test]
    fn zero_doc_weights_leave_only_the_input_block() {
        let mut store = ParamStore::new();
        let fx = extractor(&mut store, 1, 2);
        // w = [x-block | y-block | product-block], y-block zero
        *store.value_mut(fx.alpha.w) = Tensor::from_f64(1, 6, &[0.3, -0.2, 0.0, 0.0, 0.5, 0.5]).unwrap();
        let mut g = Graph::new(&store);
        let h_xhat = g.constant(Tensor::from_fn(3, 2, |i, j| (i + j) as f64));
        let h_x = g.constant(Tensor::from_fn(2, 2, |i, j| (i * 2 + j) as f64 * 0.1));
        let a_d = g.zeros(1, 3);
        let (e, e_row) = fx.cross_weights(&mut g, h_xhat, a_d, h_x).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.value(e_row).data(), &[0.0, 0.0]);
        // single prototype token: E_row is that row
        let one = g.constant(Tensor::from_f64(1, 2, &[0.7, -0.4]).unwrap());
        let w1 = g.constant(Tensor::scalar(1.3));
        let (e, e_row) = fx.cross_weights(&mut g, one, w1, h_x).unwrap();
        assert_eq!(g.value(e).data(), g.value(e_row).data());
    }

    #[test]
    fn input_facts_bias_only_for_zero_weights() {
        let mut store = ParamStore::new();
        let fx = extractor(&mut store, 1, 2);
        store.value_mut(fx.conv.b).data_mut().copy_from_slice(&[0.25, -1.0]);
        let mut g = Graph::new(&store);
        let h_x = g.constant(Tensor::from_fn(3, 2, |i, j| (i as f64) - (j as f64)));
        let zeros = g.zeros(1, 3);
        let r = fx.input_facts(&mut g, h_x, zeros).unwrap();
        for t in 0..3 {
            assert_eq!(g.value(r).row_slice(t), &[0.25, 0.0]);
        }
        // unit weights give the conv of the raw states
        let ones = g.constant(Tensor::filled(1, 3, 1.0));
        let r1 = fx.input_facts(&mut g, h_x, ones).unwrap();
        let direct = fx.conv.forward(&mut g, h_x).unwrap();
        assert_eq!(g.value(r1).data(), g.value(direct).data());
    }

    #[test]
    fn hop_count_and_trace() {
        let mut store = ParamStore::new();
        let fx = extractor(&mut store, 2, 3);
        let mut g = Graph::new(&store);
        let r = g.constant(Tensor::from_fn(4, 3, |i, j| ((i + 2 * j) as f64).sin()));
        let q0 = g.constant(Tensor::from_f64(1, 3, &[0.1, 0.2, 0.3]).unwrap());
        for k in 1..=3 {
            let (m, trace, gates) = fx.polish(&mut g, r, q0, k).unwrap();
            assert_eq!(g.shape(m), [k, 3]);
            assert_eq!(trace.len(), k + 1);
            assert_eq!(trace[0], q0);
            assert_eq!(gates.len(), k);
            for (i, q) in trace[1..].iter().enumerate() {
                let mi = g.row(m, i).unwrap();
                assert_eq!(g.value(mi).data(), g.value(*q).data());
            }
        }
        assert!(fx.polish(&mut g, r, q0, 0).is_err());
    }

    #[test]
    fn closed_update_gate_keeps_q() {
        let mut store = ParamStore::new();
        let fx = extractor(&mut store, 1, 2);
        for k in 2..4 {
            store.value_mut(fx.gru.b).data_mut()[k] = -1e4;
        }
        let mut g = Graph::new(&store);
        let r = g.constant(Tensor::from_fn(3, 2, |i, j| (i + j) as f64 * 0.2));
        let q0 = g.constant(Tensor::from_f64(1, 2, &[0.4, -0.6]).unwrap());
        let (_, trace, _) = fx.polish(&mut g, r, q0, 3).unwrap();
        for q in trace {
            assert_eq!(g.value(q).data(), &[0.4, -0.6]);
        }
    }

    #[test]
    fn scalar_two_hop_oracle() {
        let mut store = ParamStore::new();
        let fx = extractor(&mut store, 1, 1);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let p = |s: &ParamStore<f64>, id| s.value(id).to_f64_vec();
        let (swx, swh, sb) = (p(&store, fx.sru.wx), p(&store, fx.sru.wh), p(&store, fx.sru.b));
        let (g1w, g1b) = (p(&store, fx.sru.gate_hidden.w), p(&store, fx.sru.gate_hidden.b));
        let (g2w, g2b) = (p(&store, fx.sru.gate_out.w), p(&store, fx.sru.gate_out.b));
        let (gwx, gwh, gb) = (p(&store, fx.gru.wx), p(&store, fx.gru.wh), p(&store, fx.gru.b));
        let rs = [0.5, -0.3, 0.8];
        let mut q = 0.2;
        let mut want = vec![q];
        for _ in 0..2 {
            let z: Vec<f64> = rs
                .iter()
                .map(|&x| g2w[0] * (g1w[0] * x * q + g1w[1] * x + g1w[2] * q + g1b[0]).tanh() + g2b[0])
                .collect();
            let den: f64 = z.iter().map(|v| v.exp()).sum();
            let mut h = 0.0;
            for (i, &x) in rs.iter().enumerate() {
                let gi = z[i].exp() / den;
                let rr = sig(swx[0] * x + swh[0] * h + sb[0]);
                let c = (swx[1] * x + rr * swh[1] * h + sb[1]).tanh();
                h = gi * c + (1.0 - gi) * h;
            }
            let r = sig(gwx[0] * h + gwh[0] * q + gb[0]);
            let u = sig(gwx[1] * h + gwh[1] * q + gb[1]);
            let c = (gwx[2] * h + r * gwh[2] * q + gb[2]).tanh();
            q = u * c + (1.0 - u) * q;
            want.push(q);
        }
        let mut g = Graph::new(&store);
        let r = g.constant(Tensor::column(rs.to_vec()));
        let q0 = g.constant(Tensor::scalar(0.2));
        let (_, trace, _) = fx.polish(&mut g, r, q0, 2).unwrap();
        for (v, w) in trace.iter().zip(&want) {
            assert!((g.value(*v).item() - w).abs() < 1e-14);
        }
    }

    #[test]
    fn gate_permutes_with_positions() {
        let mut store = ParamStore::new();
        let fx = extractor(&mut store, 1, 2);
        let rows = [[0.1, 0.9], [-0.4, 0.3], [0.7, -0.2]];
        let perm = [2, 0, 1];
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::from_fn(3, 2, |i, j| rows[i][j]));
        let b = g.constant(Tensor::from_fn(3, 2, |i, j| rows[perm[i]][j]));
        let q = g.constant(Tensor::from_f64(1, 2, &[0.5, -0.5]).unwrap());
        let ga = fx.sru.gate(&mut g, a, q).unwrap();
        let gb = fx.sru.gate(&mut g, b, q).unwrap();
        for i in 0..3 {
            assert!((g.value(gb).get(0, i) - g.value(ga).get(0, perm[i])).abs() < 1e-15);
        }
        assert!((g.value(ga).sum() - 1.0).abs() < 1e-9);
    }
}
