//! Editing generator: LSTM decoder with document attention, bilinear
//! attention over fact memory and summary pattern, an editing gate and a
//! pointer/copy blend over the extended vocabulary.

use crate::nn::{Init, Linear, Lstm};
use crate::tensor_core::{Graph, ParamId, Scalar, TensorError, Var};

/// Floor inside the log of the target probability.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorDims {
    pub vocab: usize,
    pub emb: usize,
    /// Encoder state width `2H`.
    pub enc: usize,
    /// Fact width `C`.
    pub facts: usize,
    /// Decoder width.
    pub dec: usize,
    /// Document attention width.
    pub attn: usize,
}

#[derive(Clone, Debug)]
pub struct EditingGenerator {
    pub dims: GeneratorDims,
    pub init: Linear,
    pub lstm: Lstm,
    pub att_keys: Linear,
    pub att_query: ParamId,
    pub att_v: ParamId,
    pub bil_memory: ParamId,
    pub bil_pattern: ParamId,
    pub gate: Linear,
    pub out: Linear,
    pub vocab_proj: Linear,
    pub pgen_ctx: ParamId,
    pub pgen_state: ParamId,
    pub pgen_input: ParamId,
    pub pgen_b: ParamId,
}

/// Per-example decoder inputs that do not change across steps.
#[derive(Clone, Debug)]
pub struct DecoderContext {
    pub h_x: Var,
    /// `h_x W_a + b_a`.
    pub keys: Var,
    pub memory: Var,
    /// `M W_f^m`.
    pub memory_proj: Var,
    pub pattern: Var,
    /// `l W_f^s`.
    pub pattern_proj: Var,
    pub src_ids: Vec<usize>,
    pub ext_vocab: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub d: Var,
    pub c: Var,
    /// Document context of the previous step.
    pub g_i: Var,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: DecoderState,
    /// `1 x V_ext`.
    pub dist: Var,
    /// `1 x T_m` document attention, also the copy distribution.
    pub attn: Var,
    pub delta_m: Var,
    pub delta_s: Var,
    pub g_m: Var,
    pub g_s: Var,
    pub g_h: Var,
    pub gamma: Var,
    pub p_gen: Var,
}

impl EditingGenerator {
    pub fn new<T: Scalar>(init: &mut Init<T>, dims: GeneratorDims) -> Result<Self, TensorError> {
        let d = dims;
        Ok(Self {
            dims,
            init: Linear::new(init, "gen.init", 2 * d.enc, d.dec)?,
            lstm: Lstm::new(init, "gen.lstm", d.enc + d.emb, d.dec)?,
            att_keys: Linear::new(init, "gen.att_keys", d.enc, d.attn)?,
            att_query: init.weight("gen.att_query", d.dec, d.attn)?,
            att_v: init.weight("gen.att_v", d.attn, 1)?,
            bil_memory: init.weight("gen.bil_memory", d.facts, d.dec)?,
            bil_pattern: init.weight("gen.bil_pattern", d.enc, d.dec)?,
            gate: Linear::new(init, "gen.gate", d.dec, 1)?,
            out: Linear::new(init, "gen.out", d.dec + d.facts + d.enc, d.dec)?,
            vocab_proj: Linear::new(init, "gen.vocab", d.dec, d.vocab)?,
            pgen_ctx: init.weight("gen.pgen_ctx", d.enc, 1)?,
            pgen_state: init.weight("gen.pgen_state", d.dec, 1)?,
            pgen_input: init.weight("gen.pgen_input", d.emb, 1)?,
            pgen_b: init.bias("gen.pgen_b", 1)?,
        })
    }

    /// `d_0 = W_e [h_x_last ⊕ sum_i l_i] + b_e`, with a zero cell.
    pub fn init_state<T: Scalar>(&self, g: &mut Graph<T>, h_x_last: Var, pattern: Var) -> Result<DecoderState, TensorError> {
        let l_sum = g.sum_rows(pattern);
        let x = g.concat_cols(&[h_x_last, l_sum])?;
        let d = self.init.forward(g, x)?;
        Ok(DecoderState {
            d,
            c: g.zeros(1, self.dims.dec),
            g_i: g.zeros(1, self.dims.enc),
        })
    }

    pub fn context<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        h_x: Var,
        memory: Var,
        pattern: Var,
        src_ids: &[usize],
        ext_vocab: usize,
    ) -> Result<DecoderContext, TensorError> {
        if src_ids.len() != g.shape(h_x)[0] {
            return Err(TensorError::ShapeMismatch {
                op: "decoder context",
                left: g.shape(h_x),
                right: [src_ids.len(), 0],
            });
        }
        let keys = self.att_keys.forward(g, h_x)?;
        let wm = g.param(self.bil_memory);
        let memory_proj = g.matmul(memory, wm)?;
        let ws = g.param(self.bil_pattern);
        let pattern_proj = g.matmul(pattern, ws)?;
        Ok(DecoderContext {
            h_x,
            keys,
            memory,
            memory_proj,
            pattern,
            pattern_proj,
            src_ids: src_ids.to_vec(),
            ext_vocab,
        })
    }

    /// Additive attention: `e_j = v . tanh(W_a h_j + b_a + U_a d)`.
    pub fn doc_attention<T: Scalar>(&self, g: &mut Graph<T>, ctx: &DecoderContext, d: Var) -> Result<(Var, Var), TensorError> {
        let ua = g.param(self.att_query);
        let qd = g.matmul(d, ua)?;
        let pre = g.add(ctx.keys, qd)?;
        let act = g.tanh(pre);
        let v = g.param(self.att_v);
        let e = g.matmul(act, v)?;
        let e = g.transpose(e);
        let attn = g.softmax(e);
        let g_i = g.matmul(attn, ctx.h_x)?;
        Ok((g_i, attn))
    }

    /// Bilinear attention `delta = softmax_i(v_i W_f d)` over the rows of
    /// `values`, given `projected = values W_f`.
    pub fn dynamic_attention<T: Scalar>(
        g: &mut Graph<T>,
        values: Var,
        projected: Var,
        d: Var,
    ) -> Result<(Var, Var), TensorError> {
        let dt = g.transpose(d);
        let scores = g.matmul(projected, dt)?;
        let scores = g.transpose(scores);
        let delta = g.softmax(scores);
        let ctx = g.matmul(delta, values)?;
        Ok((ctx, delta))
    }

    pub fn editing_gate<T: Scalar>(&self, g: &mut Graph<T>, d: Var) -> Result<Var, TensorError> {
        let z = self.gate.forward(g, d)?;
        Ok(g.sigmoid(z))
    }

    /// `[gamma g_m ⊕ (1 - gamma) g_s]`.
    pub fn mix<T: Scalar>(g: &mut Graph<T>, gamma: Var, g_m: Var, g_s: Var) -> Result<Var, TensorError> {
        let a = g.mul(g_m, gamma)?;
        let inv = g.one_minus(gamma);
        let b = g.mul(g_s, inv)?;
        g.concat_cols(&[a, b])
    }

    /// `p_gen P_v (zero-extended) + (1 - p_gen) scatter(attn, src_ids)`.
    pub fn pointer_blend<T: Scalar>(
        g: &mut Graph<T>,
        p_vocab: Var,
        attn: Var,
        p_gen: Var,
        src_ids: &[usize],
        ext_vocab: usize,
    ) -> Result<Var, TensorError> {
        let pv = g.pad_cols(p_vocab, ext_vocab)?;
        let gen = g.mul(pv, p_gen)?;
        let copy = g.scatter_cols(attn, src_ids, ext_vocab)?;
        let inv = g.one_minus(p_gen);
        let copy = g.mul(copy, inv)?;
        g.add(gen, copy)
    }

    /// One decoder step from the previous state and the embedded previous
    /// token.
    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ctx: &DecoderContext,
        prev: DecoderState,
        y_prev: Var,
    ) -> Result<StepOutput, TensorError> {
        let x = g.concat_cols(&[prev.g_i, y_prev])?;
        let (d, c) = self.lstm.step(g, x, prev.d, prev.c)?;
        let (g_i, attn) = self.doc_attention(g, ctx, d)?;
        let (g_m, delta_m) = Self::dynamic_attention(g, ctx.memory, ctx.memory_proj, d)?;
        let (g_s, delta_s) = Self::dynamic_attention(g, ctx.pattern, ctx.pattern_proj, d)?;
        let gamma = self.editing_gate(g, d)?;
        let g_h = Self::mix(g, gamma, g_m, g_s)?;
        let dh = g.concat_cols(&[d, g_h])?;
        let d_o = self.out.forward(g, dh)?;
        let d_o = g.dropout(d_o)?;
        let logits = self.vocab_proj.forward(g, d_o)?;
        let p_vocab = g.softmax(logits);

        let (wc, wd, wy, bp) = (
            g.param(self.pgen_ctx),
            g.param(self.pgen_state),
            g.param(self.pgen_input),
            g.param(self.pgen_b),
        );
        let a = g.matmul(g_i, wc)?;
        let b = g.matmul(d, wd)?;
        let cy = g.matmul(y_prev, wy)?;
        let z = g.add(a, b)?;
        let z = g.add(z, cy)?;
        let z = g.add(z, bp)?;
        let p_gen = g.sigmoid(z);
        let dist = Self::pointer_blend(g, p_vocab, attn, p_gen, &ctx.src_ids, ctx.ext_vocab)?;
        Ok(StepOutput {
            state: DecoderState { d, c, g_i },
            dist,
            attn,
            delta_m,
            delta_s,
            g_m,
            g_s,
            g_h,
            gamma,
            p_gen,
        })
    }

    /// `-log dist(target)` with the probability floored at [`PROB_FLOOR`].
    pub fn token_nll<T: Scalar>(g: &mut Graph<T>, dist: Var, target: usize) -> Result<Var, TensorError> {
        let p = g.pick(dist, 0, target)?;
        if g.value(p).item().as_f64() <= PROB_FLOOR {
            log::warn!("target probability below {PROB_FLOOR:e} clamped in the log");
        }
        let lp = g.ln_floored(p, T::lit(PROB_FLOOR));
        Ok(g.scale(lp, -T::one()))
    }

    /// Masked NLL sum over steps and the number of unmasked tokens.
    pub fn sequence_loss<T: Scalar>(
        g: &mut Graph<T>,
        dists: &[Var],
        targets: &[usize],
        mask: &[bool],
    ) -> Result<(Var, usize), TensorError> {
        if dists.len() != targets.len() || targets.len() != mask.len() {
            return Err(TensorError::InvalidArgument(format!(
                "{} steps, {} targets, {} mask entries",
                dists.len(),
                targets.len(),
                mask.len()
            )));
        }
        let mut terms = Vec::new();
        for ((&dist, &t), &m) in dists.iter().zip(targets).zip(mask) {
            if m {
                terms.push(Self::token_nll(g, dist, t)?);
            }
        }
        if terms.is_empty() {
            return Ok((g.zeros(1, 1), 0));
        }
        let all = g.concat_cols(&terms)?;
        Ok((g.sum_all(all), terms.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_core::{ParamStore, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> GeneratorDims {
        GeneratorDims { vocab: 5, emb: 2, enc: 4, facts: 4, dec: 3, attn: 2 }
    }

    fn generator(store: &mut ParamStore<f64>) -> EditingGenerator {
        let mut init = Init { store, rng: ChaCha8Rng::seed_from_u64(9), std: 0.5 };
        EditingGenerator::new(&mut init, dims()).unwrap()
    }

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(rows, cols, v).unwrap()
    }

    #[test]
    fn zero_init_weights_give_bias() {
        let mut store = ParamStore::new();
        let gen = generator(&mut store);
        store.value_mut(gen.init.w).fill(0.0);
        store.value_mut(gen.init.b).data_mut().copy_from_slice(&[0.1, 0.2, 0.3]);
        let mut g = Graph::new(&store);
        let h = g.constant(Tensor::filled(1, 4, 0.7));
        let l = g.constant(Tensor::filled(3, 4, -0.2));
        let s = gen.init_state(&mut g, h, l).unwrap();
        assert_eq!(g.value(s.d).data(), &[0.1, 0.2, 0.3]);
        assert_eq!(g.value(s.c).data(), &[0.0; 3]);
    }

    #[test]
    fn init_state_hand_product() {
        let mut store = ParamStore::new();
        let gen = generator(&mut store);
        let w = store.value(gen.init.w).clone();
        let mut g = Graph::new(&store);
        let h = g.constant(t(1, 4, &[1.0, 0.0, 0.0, 0.0]));
        let l = g.constant(t(2, 4, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]));
        let s = gen.init_state(&mut g, h, l).unwrap();
        for k in 0..3 {
            let want = w.get(0, k) + 3.0 * w.get(7, k);
            assert!((g.value(s.d).get(0, k) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_scores_give_mean_context() {
        let mut store = ParamStore::new();
        let gen = generator(&mut store);
        store.value_mut(gen.att_v).fill(0.0);
        let mut g = Graph::new(&store);
        let h_x = g.constant(t(2, 4, &[1.0, 2.0, 3.0, 4.0, 3.0, 2.0, 1.0, 0.0]));
        let m = g.constant(Tensor::filled(1, 4, 0.1));
        let l = g.constant(Tensor::filled(1, 4, 0.2));
        let ctx = gen.context(&mut g, h_x, m, l, &[0, 1], 5).unwrap();
        let d = g.constant(t(1, 3, &[0.3, -0.3, 0.9]));
        let (gi, attn) = gen.doc_attention(&mut g, &ctx, d).unwrap();
        assert_eq!(g.value(attn).data(), &[0.5, 0.5]);
        assert_eq!(g.value(gi).data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn doc_attention_two_positions_by_hand() {
        let mut store = ParamStore::new();
        let gen = generator(&mut store);
        let p = |s: &ParamStore<f64>, id| s.value(id).clone();
        let (wa, ba, ua, v) = (p(&store, gen.att_keys.w), p(&store, gen.att_keys.b), p(&store, gen.att_query), p(&store, gen.att_v));
        let hx = t(2, 4, &[0.5, -0.2, 0.1, 0.9, -0.7, 0.3, 0.8, -0.1]);
        let dv = t(1, 3, &[0.4, 0.1, -0.6]);
        let qd = dv.matmul(&ua);
        let mut e = [0.0; 2];
        for (j, ej) in e.iter_mut().enumerate() {
            let k = t(1, 4, hx.row_slice(j)).matmul(&wa);
            *ej = (0..2).map(|a| (k.get(0, a) + ba.get(0, a) + qd.get(0, a)).tanh() * v.get(a, 0)).sum();
        }
        let den = e[0].exp() + e[1].exp();
        let want = [e[0].exp() / den, e[1].exp() / den];
        let mut g = Graph::new(&store);
        let h_x = g.constant(hx.clone());
        let m = g.constant(Tensor::filled(1, 4, 0.1));
        let ctx = gen.context(&mut g, h_x, m, m, &[1, 2], 5).unwrap();
        let d = g.constant(dv);
        let (gi, attn) = gen.doc_attention(&mut g, &ctx, d).unwrap();
        for j in 0..2 {
            assert!((g.value(attn).get(0, j) - want[j]).abs() < 1e-15);
        }
        for c in 0..4 {
            let w = want[0] * hx.get(0, c) + want[1] * hx.get(1, c);
            assert!((g.value(gi).get(0, c) - w).abs() < 1e-15);
        }
    }

    #[test]
    fn dynamic_attention_examples() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let d = g.constant(t(1, 2, &[1.0, -1.0]));
        // single value
        let v1 = g.constant(t(1, 2, &[3.0, 4.0]));
        let (c, delta) = EditingGenerator::dynamic_attention(&mut g, v1, v1, d).unwrap();
        assert_eq!(g.value(delta).data(), &[1.0]);
        assert_eq!(g.value(c).data(), &[3.0, 4.0]);
        // zero bilinear weights
        let v2 = g.constant(t(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let zero = g.zeros(2, 2);
        let (_, delta) = EditingGenerator::dynamic_attention(&mut g, v2, zero, d).unwrap();
        assert_eq!(g.value(delta).data(), &[0.5, 0.5]);
        // hand case: W_f = I, scores = [1, -1]
        let (c, delta) = EditingGenerator::dynamic_attention(&mut g, v2, v2, d).unwrap();
        let e = 1f64.exp();
        let want = [e / (e + 1.0 / e), (1.0 / e) / (e + 1.0 / e)];
        for i in 0..2 {
            assert!((g.value(delta).get(0, i) - want[i]).abs() < 1e-15);
            assert!((g.value(c).get(0, i) - want[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_examples() {
        let mut store = ParamStore::new();
        let gen = generator(&mut store);
        store.value_mut(gen.gate.w).fill(0.0);
        let mut g = Graph::new(&store);
        let d = g.constant(t(1, 3, &[5.0, -2.0, 1.0]));
        let gamma = gen.editing_gate(&mut g, d).unwrap();
        assert_eq!(g.value(gamma).item(), 0.5);
        drop(g);
        store.value_mut(gen.gate.b).fill(40.0);
        let mut g = Graph::new(&store);
        let d = g.constant(t(1, 3, &[5.0, -2.0, 1.0]));
        let gamma = gen.editing_gate(&mut g, d).unwrap();
        assert!(g.value(gamma).item() > 1.0 - 1e-15);
        drop(g);
        *store.value_mut(gen.gate.w) = t(3, 1, &[0.5, 0.25, -1.0]);
        store.value_mut(gen.gate.b).fill(0.1);
        let mut g = Graph::new(&store);
        let d = g.constant(t(1, 3, &[1.0, 2.0, 0.5]));
        let gamma = gen.editing_gate(&mut g, d).unwrap();
        let want = 1.0 / (1.0 + (-(0.5 + 0.5 - 0.5 + 0.1f64)).exp());
        assert!((g.value(gamma).item() - want).abs() < 1e-15);
    }

    #[test]
    fn mix_swaps_halves_under_complement() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let gm = g.constant(t(1, 2, &[1.0, 2.0]));
        let gs = g.constant(t(1, 2, &[3.0, 4.0]));
        let gamma = g.constant(Tensor::scalar(0.25));
        let inv = g.one_minus(gamma);
        let a = EditingGenerator::mix(&mut g, gamma, gm, gs).unwrap();
        let b = EditingGenerator::mix(&mut g, inv, gs, gm).unwrap();
        let (a, b) = (g.value(a).to_f64_vec(), g.value(b).to_f64_vec());
        assert_eq!(a[..2], b[2..]);
        assert_eq!(a[2..], b[..2]);
    }

    #[test]
    fn pointer_blend_examples() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let pv = g.constant(t(1, 3, &[0.2, 0.3, 0.5]));
        let attn = g.constant(t(1, 2, &[0.25, 0.75]));
        let one = g.constant(Tensor::scalar(1.0));
        let d = EditingGenerator::pointer_blend(&mut g, pv, attn, one, &[1, 4], 5).unwrap();
        assert_eq!(g.value(d).data(), &[0.2, 0.3, 0.5, 0.0, 0.0]);
        let zero = g.constant(Tensor::scalar(0.0));
        let d = EditingGenerator::pointer_blend(&mut g, pv, attn, zero, &[3, 3], 5).unwrap();
        assert_eq!(g.value(d).data(), &[0.0, 0.0, 0.0, 1.0, 0.0]);
        let half = g.constant(Tensor::scalar(0.5));
        let d = EditingGenerator::pointer_blend(&mut g, pv, attn, half, &[1, 4], 5).unwrap();
        assert_eq!(g.value(d).data(), &[0.1, 0.15 + 0.125, 0.25, 0.0, 0.375]);
        assert!(EditingGenerator::pointer_blend(&mut g, pv, attn, half, &[1, 5], 5).is_err());
    }

    #[test]
    fn sequence_loss_examples() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let onehot = g.constant(t(1, 3, &[0.0, 1.0, 0.0]));
        let (l, n) = EditingGenerator::sequence_loss(&mut g, &[onehot, onehot], &[1, 1], &[true, true]).unwrap();
        assert_eq!((g.value(l).item(), n), (0.0, 2));
        let uni = g.constant(Tensor::filled(1, 4, 0.25));
        let (l, _) = EditingGenerator::sequence_loss(&mut g, &[uni], &[2], &[true]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);
        let (l, n) = EditingGenerator::sequence_loss(&mut g, &[uni, uni], &[2, 0], &[false, false]).unwrap();
        assert_eq!((g.value(l).item(), n), (0.0, 0));
        let (l, _) = EditingGenerator::sequence_loss(&mut g, &[onehot], &[0], &[true]).unwrap();
        assert!((g.value(l).item() - (-PROB_FLOOR.ln())).abs() < 1e-12);
    }

    #[test]
    fn step_distribution_is_normalized() {
        let mut store = ParamStore::new();
        let gen = generator(&mut store);
        let mut g = Graph::new(&store);
        let h_x = g.constant(Tensor::from_fn(3, 4, |i, j| ((i * 4 + j) as f64).sin()));
        let m = g.constant(Tensor::from_fn(2, 4, |i, j| ((i + j) as f64).cos()));
        let l = g.constant(Tensor::from_fn(4, 4, |i, j| (i as f64 - j as f64) * 0.1));
        let ctx = gen.context(&mut g, h_x, m, l, &[1, 6, 2], 7).unwrap();
        let last = g.row(h_x, 2).unwrap();
        let mut state = gen.init_state(&mut g, last, l).unwrap();
        for _ in 0..3 {
            let y = g.constant(t(1, 2, &[0.3, -0.8]));
            let out = gen.step(&mut g, &ctx, state, y).unwrap();
            let dist = g.value(out.dist);
            assert_eq!(dist.shape(), [1, 7]);
            assert!((dist.sum() - 1.0).abs() < 1e-12);
            assert!(dist.data().iter().all(|&p| p >= 0.0));
            for v in [out.gamma, out.p_gen] {
                let x = g.value(v).item();
                assert!(x > 0.0 && x < 1.0);
            }
            assert_eq!(g.shape(out.g_h), [1, 8]);
            state = out.state;
        }
    }
}
