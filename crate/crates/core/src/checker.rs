//! Fact checker: local and global matching scores of the final decoder
//! state against input facts and prototype facts.
//!
//! Scores are sigmoid-squashed so `ln(1 - tau)` is defined; log arguments
//! are clamped to `[TAU_CLAMP, 1 - TAU_CLAMP]`.

use crate::nn::{Conv1d, Init, Linear};
use crate::tensor_core::{Graph, Scalar, TensorError, Var};

pub const TAU_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct FactChecker {
    /// 1x1 convolution over `[d ⊕ fact_t]`.
    pub local_conv: Conv1d,
    pub local_fc: Linear,
    pub global: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct CheckerOutput {
    pub tau_r_local: Var,
    pub tau_f_local: Var,
    pub tau_r_global: Var,
    pub tau_f_global: Var,
    pub local_loss: Var,
    pub global_loss: Var,
}

impl FactChecker {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        dec: usize,
        facts: usize,
        enc: usize,
        width: usize,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            local_conv: Conv1d::new(init, "checker.local_conv", 1, dec + facts, width)?,
            local_fc: Linear::new(init, "checker.local_fc", width, 1)?,
            global: Linear::new(init, "checker.global", dec + enc, 1)?,
        })
    }

    pub fn local_score<T: Scalar>(&self, g: &mut Graph<T>, d_final: Var, facts: Var) -> Result<Var, TensorError> {
        let n = g.shape(facts)[0];
        let ds = g.repeat_rows(d_final, n)?;
        let feats = g.concat_cols(&[ds, facts])?;
        let h = self.local_conv.forward(g, feats)?;
        let pooled = g.mean_rows(h);
        let z = self.local_fc.forward(g, pooled)?;
        Ok(g.sigmoid(z))
    }

    pub fn global_score<T: Scalar>(&self, g: &mut Graph<T>, d_final: Var, h_final: Var) -> Result<Var, TensorError> {
        let x = g.concat_cols(&[d_final, h_final])?;
        let z = self.global.forward(g, x)?;
        Ok(g.sigmoid(z))
    }

    /// `-(ln tau_r + ln(1 - tau_f))` with clamped arguments.
    pub fn pair_loss<T: Scalar>(g: &mut Graph<T>, tau_r: Var, tau_f: Var) -> Result<Var, TensorError> {
        let (lo, hi) = (T::lit(TAU_CLAMP), T::lit(1.0 - TAU_CLAMP));
        let r = g.clamp(tau_r, lo, hi);
        let f = g.clamp(tau_f, lo, hi);
        let lr = g.ln(r);
        let nf = g.one_minus(f);
        let lf = g.ln(nf);
        let s = g.add(lr, lf)?;
        Ok(g.scale(s, -T::one()))
    }

    /// Scores both branches with shared weights and returns the losses.
    pub fn check<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        d_final: Var,
        r: Var,
        r_hat: Var,
        h_x_last: Var,
        h_xhat_last: Var,
    ) -> Result<CheckerOutput, TensorError> {
        let tau_r_local = self.local_score(g, d_final, r)?;
        let tau_f_local = self.local_score(g, d_final, r_hat)?;
        let tau_r_global = self.global_score(g, d_final, h_x_last)?;
        let tau_f_global = self.global_score(g, d_final, h_xhat_last)?;
        Ok(CheckerOutput {
            tau_r_local,
            tau_f_local,
            tau_r_global,
            tau_f_global,
            local_loss: Self::pair_loss(g, tau_r_local, tau_f_local)?,
            global_loss: Self::pair_loss(g, tau_r_global, tau_f_global)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_core::{ParamStore, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checker(store: &mut ParamStore<f64>) -> FactChecker {
        let mut init = Init { store, rng: ChaCha8Rng::seed_from_u64(2), std: 0.5 };
        FactChecker::new(&mut init, 2, 2, 2, 3).unwrap()
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_weights_give_sigmoid_of_bias() {
        let mut store = ParamStore::new();
        let c = checker(&mut store);
        for id in [c.local_conv.w, c.local_fc.w, c.global.w] {
            store.value_mut(id).fill(0.0);
        }
        store.value_mut(c.local_fc.b).fill(0.3);
        let mut g = Graph::new(&store);
        let d = g.constant(Tensor::from_f64(1, 2, &[1.0, 2.0]).unwrap());
        let f = g.constant(Tensor::filled(4, 2, 0.5));
        let tau = c.local_score(&mut g, d, f).unwrap();
        assert_eq!(g.value(tau).item(), sig(0.3));
        let tau = c.global_score(&mut g, d, d).unwrap();
        assert_eq!(g.value(tau).item(), 0.5);
    }

    #[test]
    fn local_two_positions_by_hand() {
        let mut store = ParamStore::new();
        let c = checker(&mut store);
        let w = store.value(c.local_conv.w).clone();
        let b = store.value(c.local_conv.b).clone();
        let fw = store.value(c.local_fc.w).clone();
        let d = [0.4, -0.2];
        let facts = [[1.0, 0.5], [-0.3, 0.8]];
        let mut pooled = [0.0; 3];
        for f in facts {
            let x = [d[0], d[1], f[0], f[1]];
            for (k, p) in pooled.iter_mut().enumerate() {
                let z: f64 = (0..4).map(|i| x[i] * w.get(i, k)).sum::<f64>() + b.get(0, k);
                *p += z.max(0.0) / 2.0;
            }
        }
        let want = sig((0..3).map(|k| pooled[k] * fw.get(k, 0)).sum());
        let mut g = Graph::new(&store);
        let dv = g.constant(Tensor::row(d.to_vec()));
        let fv = g.constant(Tensor::from_fn(2, 2, |i, j| facts[i][j]));
        let tau = c.local_score(&mut g, dv, fv).unwrap();
        assert!((g.value(tau).item() - want).abs() < 1e-15);
        // single position: pooling is the identity
        let one = g.constant(Tensor::row(facts[0].to_vec()));
        let rows = g.constant(Tensor::from_fn(2, 2, |_, j| facts[0][j]));
        let a = c.local_score(&mut g, dv, one).unwrap();
        let b = c.local_score(&mut g, dv, rows).unwrap();
        assert_eq!(g.value(a).item(), g.value(b).item());
    }

    #[test]
    fn global_hand_case() {
        let mut store = ParamStore::new();
        let c = checker(&mut store);
        *store.value_mut(c.global.w) = Tensor::from_f64(4, 1, &[1.0, -1.0, 0.5, 2.0]).unwrap();
        store.value_mut(c.global.b).fill(-0.25);
        let mut g = Graph::new(&store);
        let d = g.constant(Tensor::row(vec![0.2, 0.4]));
        let h = g.constant(Tensor::row(vec![1.0, -0.5]));
        let tau = c.global_score(&mut g, d, h).unwrap();
        assert!((g.value(tau).item() - sig(0.2 - 0.4 + 0.5 - 1.0 - 0.25)).abs() < 1e-15);
    }

    #[test]
    fn loss_examples() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let half = g.constant(Tensor::scalar(0.5));
        let l = FactChecker::pair_loss(&mut g, half, half).unwrap();
        assert!((g.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-15);
        let (one, zero) = (g.constant(Tensor::scalar(1.0)), g.constant(Tensor::scalar(0.0)));
        let l = FactChecker::pair_loss(&mut g, one, zero).unwrap();
        assert!(g.value(l).item() < 1e-6);
        let l = FactChecker::pair_loss(&mut g, zero, zero).unwrap();
        assert!((g.value(l).item() - 16.118).abs() < 1e-3);
    }

    #[test]
    fn swapping_branches_swaps_scores() {
        let mut store = ParamStore::new();
        let c = checker(&mut store);
        let mut g = Graph::new(&store);
        let d = g.constant(Tensor::row(vec![0.3, -0.7]));
        let r = g.constant(Tensor::from_fn(3, 2, |i, j| (i + j) as f64 * 0.3));
        let rh = g.constant(Tensor::from_fn(2, 2, |i, j| (i as f64 - j as f64) * 0.5));
        let hx = g.constant(Tensor::row(vec![0.1, 0.2]));
        let hxh = g.constant(Tensor::row(vec![-0.4, 0.6]));
        let a = c.check(&mut g, d, r, rh, hx, hxh).unwrap();
        let b = c.check(&mut g, d, rh, r, hxh, hx).unwrap();
        assert_eq!(g.value(a.tau_r_local).item(), g.value(b.tau_f_local).item());
        assert_eq!(g.value(a.tau_r_global).item(), g.value(b.tau_f_global).item());
        let same = c.check(&mut g, d, r, r, hx, hx).unwrap();
        assert_eq!(g.value(same.tau_r_global).item(), g.value(same.tau_f_global).item());
        for v in [a.tau_r_local, a.tau_f_local, a.tau_r_global, a.tau_f_global] {
            let x = g.value(v).item();
            assert!(x > 0.0 && x < 1.0);
        }
    }
}
