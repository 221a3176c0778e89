//! Layers built on the autodiff graph. Each layer only stores parameter ids;
//! values live in the [`ParamStore`].

use rand_chacha::ChaCha8Rng;

use crate::tensor_core::{Graph, ParamId, ParamStore, Scalar, TensorError, Var};

/// Parameter factory: truncated-Gaussian weights, zero biases.
pub struct Init<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: ChaCha8Rng,
    pub std: f64,
}

impl<T: Scalar> Init<'_, T> {
    pub fn weight(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId, TensorError> {
        self.store.register_gaussian(name, rows, cols, self.std, &mut self.rng)
    }

    pub fn bias(&mut self, name: &str, cols: usize) -> Result<ParamId, TensorError> {
        self.store.register_zeros(name, 1, cols)
    }
}

/// `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, input: usize, output: usize) -> Result<Self, TensorError> {
        Ok(Self {
            w: init.weight(&format!("{name}.w"), input, output)?,
            b: init.bias(&format!("{name}.b"), output)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, TensorError> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// LSTM with gate blocks ordered input, forget, output, candidate.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, input: usize, hidden: usize) -> Result<Self, TensorError> {
        Ok(Self {
            wx: init.weight(&format!("{name}.wx"), input, 4 * hidden)?,
            wh: init.weight(&format!("{name}.wh"), hidden, 4 * hidden)?,
            b: init.bias(&format!("{name}.b"), 4 * hidden)?,
            hidden,
        })
    }

    /// `xs Wx + b` for a whole sequence at once.
    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, xs: Var) -> Result<Var, TensorError> {
        let (wx, b) = (g.param(self.wx), g.param(self.b));
        let p = g.matmul(xs, wx)?;
        g.add(p, b)
    }

    /// One step from a pre-projected input row.
    pub fn step_projected<T: Scalar>(&self, g: &mut Graph<T>, xp: Var, h: Var, c: Var) -> Result<(Var, Var), TensorError> {
        let n = self.hidden;
        let wh = g.param(self.wh);
        let hp = g.matmul(h, wh)?;
        let z = g.add(xp, hp)?;
        let zi = g.slice_cols(z, 0, n)?;
        let zf = g.slice_cols(z, n, n)?;
        let zo = g.slice_cols(z, 2 * n, n)?;
        let zu = g.slice_cols(z, 3 * n, n)?;
        let (i, f, o, u) = (g.sigmoid(zi), g.sigmoid(zf), g.sigmoid(zo), g.tanh(zu));
        let fc = g.mul(f, c)?;
        let iu = g.mul(i, u)?;
        let c2 = g.add(fc, iu)?;
        let tc = g.tanh(c2);
        let h2 = g.mul(o, tc)?;
        Ok((h2, c2))
    }

    pub fn step<T: Scalar>(&self, g: &mut Graph<T>, x: Var, h: Var, c: Var) -> Result<(Var, Var), TensorError> {
        let xp = self.project(g, x)?;
        self.step_projected(g, xp, h, c)
    }

    /// Runs over the rows of `xs` (backwards if `reverse`) from zero state.
    /// Returns per-position states in position order and the last state.
    pub fn run<T: Scalar>(&self, g: &mut Graph<T>, xs: Var, reverse: bool) -> Result<(Vec<Var>, Var), TensorError> {
        let steps = g.shape(xs)[0];
        let xp = self.project(g, xs)?;
        let mut h = g.zeros(1, self.hidden);
        let mut c = g.zeros(1, self.hidden);
        let mut out = vec![h; steps];
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            let row = g.row(xp, t)?;
            (h, c) = self.step_projected(g, row, h, c)?;
            out[t] = h;
        }
        Ok((out, h))
    }
}

/// Bidirectional LSTM; position states are `[forward ⊕ backward]`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

pub struct BiOutput {
    /// `T x 2H`.
    pub states: Var,
    /// Last forward state ⊕ last backward state (the one at position 0).
    pub last: Var,
}

impl BiLstm {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, input: usize, hidden: usize) -> Result<Self, TensorError> {
        Ok(Self {
            fwd: Lstm::new(init, &format!("{name}.fwd"), input, hidden)?,
            bwd: Lstm::new(init, &format!("{name}.bwd"), input, hidden)?,
        })
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, xs: Var) -> Result<BiOutput, TensorError> {
        let (f, f_last) = self.fwd.run(g, xs, false)?;
        let (b, b_last) = self.bwd.run(g, xs, true)?;
        let fs = g.concat_rows(&f)?;
        let bs = g.concat_rows(&b)?;
        Ok(BiOutput {
            states: g.concat_cols(&[fs, bs])?,
            last: g.concat_cols(&[f_last, b_last])?,
        })
    }
}

/// GRU: `h' = u ⊙ h~ + (1 - u) ⊙ h`, gate blocks ordered reset, update,
/// candidate.
#[derive(Clone, Debug)]
pub struct Gru {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, input: usize, hidden: usize) -> Result<Self, TensorError> {
        Ok(Self {
            wx: init.weight(&format!("{name}.wx"), input, 3 * hidden)?,
            wh: init.weight(&format!("{name}.wh"), hidden, 3 * hidden)?,
            b: init.bias(&format!("{name}.b"), 3 * hidden)?,
            hidden,
        })
    }

    pub fn step<T: Scalar>(&self, g: &mut Graph<T>, x: Var, h: Var) -> Result<Var, TensorError> {
        let n = self.hidden;
        let (wx, wh, b) = (g.param(self.wx), g.param(self.wh), g.param(self.b));
        let xp = g.matmul(x, wx)?;
        let xp = g.add(xp, b)?;
        let hp = g.matmul(h, wh)?;
        let (xr, hr) = (g.slice_cols(xp, 0, n)?, g.slice_cols(hp, 0, n)?);
        let zr = g.add(xr, hr)?;
        let r = g.sigmoid(zr);
        let (xu, hu) = (g.slice_cols(xp, n, n)?, g.slice_cols(hp, n, n)?);
        let zu = g.add(xu, hu)?;
        let u = g.sigmoid(zu);
        let (xc, hc) = (g.slice_cols(xp, 2 * n, n)?, g.slice_cols(hp, 2 * n, n)?);
        let rh = g.mul(r, hc)?;
        let zc = g.add(xc, rh)?;
        let cand = g.tanh(zc);
        // h + u (h~ - h)
        let d = g.sub(cand, h)?;
        let ud = g.mul(u, d)?;
        g.add(h, ud)
    }
}

/// GRU-style recurrence whose update gate is a softmax over positions,
/// conditioned on a query vector.
#[derive(Clone, Debug)]
pub struct Sru {
    /// Reset and candidate blocks.
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub gate_hidden: Linear,
    pub gate_out: Linear,
    pub hidden: usize,
}

pub struct SruOutput {
    /// `1 x T` position gate.
    pub gate: Var,
    /// Final hidden state `1 x hidden`.
    pub last: Var,
}

impl Sru {
    /// `dim` is both the input width and the hidden width.
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, dim: usize) -> Result<Self, TensorError> {
        Ok(Self {
            wx: init.weight(&format!("{name}.wx"), dim, 2 * dim)?,
            wh: init.weight(&format!("{name}.wh"), dim, 2 * dim)?,
            b: init.bias(&format!("{name}.b"), 2 * dim)?,
            gate_hidden: Linear::new(init, &format!("{name}.gate1"), 3 * dim, dim)?,
            gate_out: Linear::new(init, &format!("{name}.gate2"), dim, 1)?,
            hidden: dim,
        })
    }

    /// Softmax over positions of `W2 tanh(W1 [x ⊙ q ; x ; q] + b1) + b2`.
    pub fn gate<T: Scalar>(&self, g: &mut Graph<T>, xs: Var, q: Var) -> Result<Var, TensorError> {
        let steps = g.shape(xs)[0];
        let qs = g.repeat_rows(q, steps)?;
        let xq = g.mul(xs, qs)?;
        let f = g.concat_cols(&[xq, xs, qs])?;
        let z = self.gate_hidden.forward(g, f)?;
        let z = g.tanh(z);
        let z = self.gate_out.forward(g, z)?;
        let zt = g.transpose(z);
        Ok(g.softmax(zt))
    }

    pub fn run<T: Scalar>(&self, g: &mut Graph<T>, xs: Var, q: Var) -> Result<SruOutput, TensorError> {
        let n = self.hidden;
        let steps = g.shape(xs)[0];
        let gate = self.gate(g, xs, q)?;
        let (wx, wh, b) = (g.param(self.wx), g.param(self.wh), g.param(self.b));
        let xp = g.matmul(xs, wx)?;
        let xp = g.add(xp, b)?;
        let mut h = g.zeros(1, n);
        for i in 0..steps {
            let xi = g.row(xp, i)?;
            let hp = g.matmul(h, wh)?;
            let (xr, hr) = (g.slice_cols(xi, 0, n)?, g.slice_cols(hp, 0, n)?);
            let zr = g.add(xr, hr)?;
            let r = g.sigmoid(zr);
            let (xc, hc) = (g.slice_cols(xi, n, n)?, g.slice_cols(hp, n, n)?);
            let rh = g.mul(r, hc)?;
            let zc = g.add(xc, rh)?;
            let cand = g.tanh(zc);
            let gi = g.pick(gate, 0, i)?;
            let d = g.sub(cand, h)?;
            let gd = g.mul(d, gi)?;
            h = g.add(h, gd)?;
        }
        Ok(SruOutput { gate, last: h })
    }
}

/// Same-padded 1-D convolution over rows followed by ReLU. Kernel row
/// blocks run from the earliest neighbour to the latest.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        kernel: usize,
        input: usize,
        output: usize,
    ) -> Result<Self, TensorError> {
        if kernel.is_multiple_of(2) {
            return Err(TensorError::InvalidArgument(format!("kernel width must be odd, got {kernel}")));
        }
        Ok(Self {
            w: init.weight(&format!("{name}.w"), kernel * input, output)?,
            b: init.bias(&format!("{name}.b"), output)?,
            kernel,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, xs: Var) -> Result<Var, TensorError> {
        let half = (self.kernel / 2) as isize;
        let taps: Vec<Var> = (0..self.kernel as isize)
            .map(|k| if k == half { xs } else { g.shift_rows(xs, half - k) })
            .collect();
        let x = if taps.len() == 1 { taps[0] } else { g.concat_cols(&taps)? };
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(x, w)?;
        let y = g.add(y, b)?;
        Ok(g.relu(y))
    }
}

/// `alpha(x, y) = w · [x ⊕ y ⊕ x ⊙ y]` with `w` stored as one `1 x 3d` row.
#[derive(Clone, Debug)]
pub struct Alpha {
    pub w: ParamId,
    pub dim: usize,
}

impl Alpha {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, dim: usize) -> Result<Self, TensorError> {
        Ok(Self {
            w: init.weight(&format!("{name}.w"), 1, 3 * dim)?,
            dim,
        })
    }

    /// `out[i][j] = alpha(xs[i], ys[j])`.
    pub fn matrix<T: Scalar>(&self, g: &mut Graph<T>, xs: Var, ys: Var) -> Result<Var, TensorError> {
        let d = self.dim;
        let w = g.param(self.w);
        let w1 = g.slice_cols(w, 0, d)?;
        let w2 = g.slice_cols(w, d, d)?;
        let w3 = g.slice_cols(w, 2 * d, d)?;
        let w1t = g.transpose(w1);
        let xw = g.matmul(xs, w1t)?;
        let w2t = g.transpose(w2);
        let yw = g.matmul(ys, w2t)?;
        let yw = g.transpose(yw);
        let xs3 = g.mul(xs, w3)?;
        let yt = g.transpose(ys);
        let bil = g.matmul(xs3, yt)?;
        let s = g.add(bil, xw)?;
        g.add(s, yw)
    }
}
