//! The full editor: shared embedding, prototype reader, fact extraction,
//! editing generator and fact checker.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checker::{CheckerOutput, FactChecker};
use crate::error::ModelError;
use crate::facts::{FactExtractor, FactMemory};
use crate::generator::{DecoderContext, DecoderState, EditingGenerator, GeneratorDims, StepOutput};
use crate::inference::{beam_search, greedy, Hypothesis, Step, StepModel, StepTrace};
use crate::nn::Init;
use crate::reader::{EncodedStates, PrototypeReader};
use crate::tensor_core::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::text::{Example, BOS, EOS, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    /// Encoder hidden width `H`; facts and decoder use `2H`.
    pub hidden: usize,
    pub hops: usize,
    pub kernel: usize,
    /// Softmax-normalize the cross-dependency weights.
    pub normalize_cross: bool,
    pub init_std: f64,
}

impl ModelConfig {
    /// Full-size dimensions for a given vocabulary.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            emb_dim: 256,
            hidden: 256,
            hops: 3,
            kernel: 3,
            normalize_cross: false,
            init_std: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        2 * self.hidden
    }

    pub fn decoder_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn attention_dim(&self) -> usize {
        self.hidden
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.vocab_size <= BOS.max(crate::text::EOS) {
            return bad(format!("vocabulary of {} cannot hold the reserved ids", self.vocab_size));
        }
        if self.emb_dim == 0 || self.hidden == 0 {
            return bad("dimensions must be positive".into());
        }
        if !(1..=8).contains(&self.hops) {
            return bad(format!("hops must be in 1..=8, got {}", self.hops));
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel width must be odd, got {}", self.kernel));
        }
        if !(self.init_std > 0.0) {
            return bad(format!("init std must be positive, got {}", self.init_std));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the global checker loss.
    pub epsilon: f64,
    /// Weight of the local checker loss.
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { epsilon: 1.0, eta: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Pesg<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub embedding: ParamId,
    pub reader: PrototypeReader,
    pub facts: FactExtractor,
    pub generator: EditingGenerator,
    pub checker: FactChecker,
}

/// Encoder-side results for one example.
#[derive(Clone, Debug)]
pub struct Encoding {
    pub states: EncodedStates,
    pub facts: FactMemory,
    pub ctx: DecoderContext,
    pub init: DecoderState,
}

/// Teacher-forced forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub encoding: Encoding,
    pub steps: Vec<StepOutput>,
    pub d_final: Var,
    pub checker: CheckerOutput,
    pub seq_loss: Var,
    pub tokens: usize,
    pub total: Var,
}

/// Scalar view of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub seq: f64,
    pub local: f64,
    pub global: f64,
    pub tokens: usize,
    /// `[tau_r_local, tau_f_local, tau_r_global, tau_f_global]`.
    pub taus: [f64; 4],
}

impl LossValues {
    pub fn seq_per_token(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.seq / self.tokens as f64
        }
    }
}

/// Encoder matrices exported for inspection.
#[derive(Clone, Debug)]
pub struct Inspection {
    pub s: Tensor<f64>,
    pub a_s: Tensor<f64>,
    pub a_d: Tensor<f64>,
    pub e_row: Tensor<f64>,
    pub sru_gates: Vec<Tensor<f64>>,
}

/// `eps * L_g + eta * L_l + L_s` on the graph.
pub fn combine_losses<T: Scalar>(
    g: &mut Graph<T>,
    seq: Var,
    local: Var,
    global: Var,
    weights: LossWeights,
) -> Result<Var, ModelError> {
    let a = g.scale(global, T::lit(weights.epsilon));
    let b = g.scale(local, T::lit(weights.eta));
    let ab = g.add(a, b)?;
    Ok(g.add(ab, seq)?)
}

impl<T: Scalar> Pesg<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            std: config.init_std,
        };
        let (h, c, dec) = (config.hidden, config.channels(), config.decoder_dim());
        let embedding = init.weight("embedding", config.vocab_size, config.emb_dim)?;
        let reader = PrototypeReader::new(&mut init, config.emb_dim, h, c, config.kernel, config.normalize_cross)?;
        let facts = FactExtractor::new(&mut init, h, c, config.kernel)?;
        let generator = EditingGenerator::new(
            &mut init,
            GeneratorDims {
                vocab: config.vocab_size,
                emb: config.emb_dim,
                enc: 2 * h,
                facts: c,
                dec,
                attn: config.attention_dim(),
            },
        )?;
        let checker = FactChecker::new(&mut init, dec, c, 2 * h, h)?;
        Ok(Self {
            config,
            params,
            embedding,
            reader,
            facts,
            generator,
            checker,
        })
    }

    /// Same architecture, parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Pesg<U> {
        Pesg {
            config: self.config.clone(),
            params: self.params.cast(),
            embedding: self.embedding,
            reader: self.reader.clone(),
            facts: self.facts.clone(),
            generator: self.generator.clone(),
            checker: self.checker.clone(),
        }
    }

    fn plain_ids(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| if i >= self.config.vocab_size { UNK } else { i }).collect()
    }

    /// Embedding lookup with extended ids mapped to `UNK`, then dropout.
    pub fn embed(&self, g: &mut Graph<T>, ids: &[usize]) -> Result<Var, ModelError> {
        let table = g.param(self.embedding);
        let e = g.gather(table, &self.plain_ids(ids))?;
        Ok(g.dropout(e)?)
    }

    fn check_example(&self, ex: &Example) -> Result<(), ModelError> {
        for (name, seq) in [
            ("doc", &ex.doc),
            ("proto_doc", &ex.proto_doc),
            ("proto_summary", &ex.proto_summary),
        ] {
            if seq.is_empty() {
                return Err(ModelError::Config(format!("example has an empty {name}")));
            }
        }
        let ext = ex.extended_vocab_size(self.config.vocab_size);
        if let Some(&bad) = ex.doc.iter().chain(&ex.summary).find(|&&i| i >= ext) {
            return Err(ModelError::Config(format!(
                "id {bad} outside the extended vocabulary of {ext}"
            )));
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph<T>, ex: &Example) -> Result<Encoding, ModelError> {
        self.check_example(ex)?;
        let x = self.embed(g, &ex.doc)?;
        let xh = self.embed(g, &ex.proto_doc)?;
        let yh = self.embed(g, &ex.proto_summary)?;
        let states = self.reader.read(g, x, xh, yh)?;
        let facts = self
            .facts
            .extract(g, states.h_x, states.h_xhat, states.a_d, states.q, self.config.hops)?;
        let ext = ex.extended_vocab_size(self.config.vocab_size);
        let ctx = self
            .generator
            .context(g, states.h_x, facts.memory, states.l, &ex.doc, ext)?;
        let init = self.generator.init_state(g, states.h_x_last, states.l)?;
        Ok(Encoding { states, facts, ctx, init })
    }

    pub fn check_with(&self, g: &mut Graph<T>, enc: &Encoding, d_final: Var) -> Result<CheckerOutput, ModelError> {
        Ok(self.checker.check(
            g,
            d_final,
            enc.facts.r,
            enc.states.r_hat,
            enc.states.h_x_last,
            enc.states.h_xhat_last,
        )?)
    }

    /// Teacher-forced pass producing every loss term.
    pub fn forward(&self, g: &mut Graph<T>, ex: &Example, weights: LossWeights) -> Result<ForwardOutput, ModelError> {
        let encoding = self.encode(g, ex)?;
        let (inputs, targets) = ex.teacher_forcing(self.config.vocab_size);
        let embedded = self.embed(g, &inputs)?;
        let mut state = encoding.init;
        let mut steps = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let y = g.row(embedded, t)?;
            let out = self.generator.step(g, &encoding.ctx, state, y)?;
            state = out.state;
            steps.push(out);
        }
        let dists: Vec<Var> = steps.iter().map(|s| s.dist).collect();
        let mask = vec![true; targets.len()];
        let (seq_loss, tokens) = EditingGenerator::sequence_loss(g, &dists, &targets, &mask)?;
        let checker = self.check_with(g, &encoding, state.d)?;
        let total = combine_losses(g, seq_loss, checker.local_loss, checker.global_loss, weights)?;
        Ok(ForwardOutput {
            encoding,
            steps,
            d_final: state.d,
            checker,
            seq_loss,
            tokens,
            total,
        })
    }

    pub fn values(&self, g: &Graph<T>, out: &ForwardOutput) -> LossValues {
        let v = |x: Var| g.value(x).item().as_f64();
        LossValues {
            total: v(out.total),
            seq: v(out.seq_loss),
            local: v(out.checker.local_loss),
            global: v(out.checker.global_loss),
            tokens: out.tokens,
            taus: [
                v(out.checker.tau_r_local),
                v(out.checker.tau_f_local),
                v(out.checker.tau_r_global),
                v(out.checker.tau_f_global),
            ],
        }
    }

    /// Loss terms in inference mode (no dropout).
    pub fn evaluate_loss(&self, ex: &Example, weights: LossWeights) -> Result<LossValues, ModelError> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, ex, weights)?;
        Ok(self.values(&g, &out))
    }

    pub fn inspect(&self, ex: &Example) -> Result<Inspection, ModelError> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, ex)?;
        let f = |v: Var| g.value(v).cast::<f64>();
        Ok(Inspection {
            s: f(enc.states.s),
            a_s: f(enc.states.a_s),
            a_d: f(enc.states.a_d),
            e_row: f(enc.facts.e_row),
            sru_gates: enc.facts.gates.iter().map(|&v| f(v)).collect(),
        })
    }

    /// Best hypothesis for `ex`: greedy when `beam == 1`, beam search
    /// otherwise.
    pub fn summarize(
        &self,
        ex: &Example,
        beam: usize,
        max_len: usize,
    ) -> Result<Hypothesis<DecoderTensors<T>>, ModelError> {
        let mut dec = self.decoder(ex)?;
        if beam == 1 {
            return greedy(&mut dec, max_len, BOS, EOS);
        }
        beam_search(&mut dec, beam, max_len, BOS, EOS)?
            .into_iter()
            .next()
            .ok_or_else(|| ModelError::Config("beam search returned no hypothesis".into()))
    }

    /// Checker scores of the summary `summarize` would produce, read from
    /// its final decoder state.
    pub fn check_summary(
        &self,
        ex: &Example,
        beam: usize,
        max_len: usize,
    ) -> Result<(Hypothesis<DecoderTensors<T>>, [f64; 4]), ModelError> {
        let h = self.summarize(ex, beam, max_len)?;
        let taus = self.decoder(ex)?.checker_scores(&h.state.d)?;
        Ok((h, taus))
    }

    /// Step-wise decoder over a fixed encoding, for search.
    pub fn decoder<'m>(&'m self, ex: &Example) -> Result<Decoder<'m, T>, ModelError> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, ex)?;
        let init = DecoderTensors {
            d: g.value(enc.init.d).clone(),
            c: g.value(enc.init.c).clone(),
            g_i: g.value(enc.init.g_i).clone(),
        };
        let base = g.mark();
        Ok(Decoder {
            model: self,
            ext_vocab: ex.extended_vocab_size(self.config.vocab_size),
            g,
            enc,
            init,
            base,
        })
    }
}

/// Decoder state as plain tensors, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderTensors<T> {
    pub d: Tensor<T>,
    pub c: Tensor<T>,
    pub g_i: Tensor<T>,
}

pub struct Decoder<'m, T: Scalar> {
    model: &'m Pesg<T>,
    ext_vocab: usize,
    g: Graph<'m, T>,
    enc: Encoding,
    init: DecoderTensors<T>,
    base: usize,
}

impl<T: Scalar> Decoder<'_, T> {
    /// Checker scores `[tau_r_l, tau_f_l, tau_r_g, tau_f_g]` for a final
    /// decoder state.
    pub fn checker_scores(&mut self, d_final: &Tensor<T>) -> Result<[f64; 4], ModelError> {
        self.g.truncate(self.base);
        let d = self.g.constant(d_final.clone());
        let out = self.model.check_with(&mut self.g, &self.enc, d)?;
        let v = |x: Var| self.g.value(x).item().as_f64();
        let taus = [v(out.tau_r_local), v(out.tau_f_local), v(out.tau_r_global), v(out.tau_f_global)];
        self.g.truncate(self.base);
        Ok(taus)
    }
}

impl<T: Scalar> StepModel for Decoder<'_, T> {
    type State = DecoderTensors<T>;

    fn ext_vocab(&self) -> usize {
        self.ext_vocab
    }

    fn initial_state(&mut self) -> Result<Self::State, ModelError> {
        Ok(self.init.clone())
    }

    fn step(&mut self, state: &Self::State, prev: usize) -> Result<Step<Self::State>, ModelError> {
        self.g.truncate(self.base);
        let g = &mut self.g;
        let prev_state = DecoderState {
            d: g.constant(state.d.clone()),
            c: g.constant(state.c.clone()),
            g_i: g.constant(state.g_i.clone()),
        };
        let y = self.model.embed(g, &[prev])?;
        let out = self.model.generator.step(g, &self.enc.ctx, prev_state, y)?;
        let log_probs = g.value(out.dist).data().iter().map(|p| p.as_f64().ln()).collect();
        let row = |v: Var| g.value(v).to_f64_vec();
        let trace = StepTrace {
            gamma: g.value(out.gamma).item().as_f64(),
            p_gen: g.value(out.p_gen).item().as_f64(),
            attn: row(out.attn),
            delta_m: row(out.delta_m),
            delta_s: row(out.delta_s),
        };
        let next = DecoderTensors {
            d: g.value(out.state.d).clone(),
            c: g.value(out.state.c).clone(),
            g_i: g.value(out.state.g_i).clone(),
        };
        self.g.truncate(self.base);
        Ok(Step { log_probs, state: next, trace })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{beam_search, greedy};
    use crate::text::EOS;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            emb_dim: 3,
            hidden: 2,
            hops: 2,
            kernel: 3,
            normalize_cross: false,
            init_std: 0.5,
        }
    }

    pub(crate) fn tiny_example() -> Example {
        Example {
            doc: vec![4, 5, 12, 6, 7, 5],
            summary: vec![5, 12, 8],
            proto_doc: vec![4, 9, 6],
            proto_summary: vec![9, 8],
            oov: vec!["zed".into()],
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny_config().validate().is_ok());
        let mut c = tiny_config();
        c.hops = 0;
        assert!(Pesg::<f64>::new(c, 0).is_err());
        let mut c = tiny_config();
        c.kernel = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Pesg::<f64>::new(tiny_config(), 4).unwrap();
        let b = Pesg::<f64>::new(tiny_config(), 4).unwrap();
        let c = Pesg::<f64>::new(tiny_config(), 5).unwrap();
        let vals = |m: &Pesg<f64>| m.params.entries().iter().flat_map(|e| e.value.to_f64_vec()).collect::<Vec<_>>();
        assert_eq!(vals(&a), vals(&b));
        assert_ne!(vals(&a), vals(&c));
    }

    #[test]
    fn forward_is_finite_and_combines_terms() {
        let m = Pesg::<f64>::new(tiny_config(), 1).unwrap();
        let ex = tiny_example();
        let v = m.evaluate_loss(&ex, LossWeights::default()).unwrap();
        assert!(v.total.is_finite());
        assert_eq!(v.tokens, 4);
        assert!((v.total - (v.seq + v.local + v.global)).abs() < 1e-12);
        let seq_only = m.evaluate_loss(&ex, LossWeights { epsilon: 0.0, eta: 0.0 }).unwrap();
        assert_eq!(seq_only.total, seq_only.seq);
        assert!(v.taus.iter().all(|&t| t > 0.0 && t < 1.0));
    }

    #[test]
    fn bad_extended_id_is_an_error() {
        let m = Pesg::<f64>::new(tiny_config(), 1).unwrap();
        let mut ex = tiny_example();
        ex.summary.push(13);
        assert!(m.evaluate_loss(&ex, LossWeights::default()).is_err());
    }

    #[test]
    fn decoder_steps_match_teacher_forcing() {
        let m = Pesg::<f64>::new(tiny_config(), 2).unwrap();
        let ex = tiny_example();
        let mut g = Graph::new(&m.params);
        let out = m.forward(&mut g, &ex, LossWeights::default()).unwrap();
        let (inputs, targets) = ex.teacher_forcing(m.config.vocab_size);
        let mut dec = m.decoder(&ex).unwrap();
        let mut state = dec.initial_state().unwrap();
        let mut total = 0.0;
        for (t, (&i, &y)) in inputs.iter().zip(&targets).enumerate() {
            let s = dec.step(&state, i).unwrap();
            let want = g.value(out.steps[t].dist).to_f64_vec();
            for (a, b) in s.log_probs.iter().zip(&want) {
                assert!((a - b.ln()).abs() < 1e-12);
            }
            total -= s.log_probs[y];
            state = s.state;
        }
        assert!((total - g.value(out.seq_loss).item()).abs() < 1e-10);
        let taus = dec.checker_scores(&state.d).unwrap();
        let v = m.values(&g, &out);
        for (a, b) in taus.iter().zip(&v.taus) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn copied_tokens_come_from_source() {
        let m = Pesg::<f64>::new(tiny_config(), 3).unwrap();
        let ex = tiny_example();
        let mut dec = m.decoder(&ex).unwrap();
        let hyps = beam_search(&mut dec, 3, 8, BOS, EOS).unwrap();
        for h in &hyps {
            for &t in &h.tokens {
                assert!(t < m.config.vocab_size || ex.doc.contains(&t));
            }
        }
        let gr = greedy(&mut dec, 8, BOS, EOS).unwrap();
        let b1 = beam_search(&mut dec, 1, 8, BOS, EOS).unwrap();
        assert_eq!(gr.tokens, b1[0].tokens);
    }

    #[test]
    fn f32_model_runs() {
        let m = Pesg::<f64>::new(tiny_config(), 1).unwrap();
        let m32: Pesg<f32> = m.cast();
        let a = m.evaluate_loss(&tiny_example(), LossWeights::default()).unwrap();
        let b = m32.evaluate_loss(&tiny_example(), LossWeights::default()).unwrap();
        assert!((a.total - b.total).abs() < 1e-3 * a.total.abs().max(1.0));
    }

    #[test]
    fn inspection_shapes() {
        let m = Pesg::<f64>::new(tiny_config(), 1).unwrap();
        let ins = m.inspect(&tiny_example()).unwrap();
        assert_eq!(ins.s.shape(), [3, 2]);
        assert_eq!(ins.a_s.shape(), [1, 2]);
        assert_eq!(ins.a_d.shape(), [1, 3]);
        assert_eq!(ins.e_row.shape(), [1, 6]);
        assert_eq!(ins.sru_gates.len(), 2);
    }
}
