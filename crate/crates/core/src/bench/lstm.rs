//! Encoder-decoder LSTM used as the recurrent speed baseline.
//!
//! The encoder reads the `N` snippets; the decoder starts from the encoder
//! state and is unrolled for a fixed number of steps, taking the encoder's
//! final hidden state as input at every step. A linear head classifies the
//! last decoder state.

use crate::error::{Error, Result};
use crate::nn::{join, Linear, Module, Slot};
use crate::tensor::{Rng, Scalar, Tensor};

/// Standard four-gate cell, gates stacked as `[i; f; g; o]`.
#[derive(Debug, Clone)]
pub struct LstmCell<T: Scalar = f32> {
    pub w_ih: Tensor<T>,
    pub w_hh: Tensor<T>,
    pub bias: Tensor<T>,
    pub grad_w_ih: Tensor<T>,
    pub grad_w_hh: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

#[derive(Debug, Clone)]
struct StepCache<T> {
    x: Vec<T>,
    h_prev: Vec<T>,
    c_prev: Vec<T>,
    /// Activated gates `[B, 4H]`.
    gates: Vec<T>,
    tanh_c: Vec<T>,
}

impl<T: Scalar> LstmCell<T> {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / hidden as f64).sqrt();
        let u = |rng: &mut Rng, shape: Vec<usize>| Tensor::uniform(rng, -bound, bound, shape).expect("lstm shape");
        let w_ih = u(rng, vec![4 * hidden, input]);
        let w_hh = u(rng, vec![4 * hidden, hidden]);
        let bias = u(rng, vec![4 * hidden]);
        Self {
            grad_w_ih: Tensor::zeros(w_ih.shape().to_vec()),
            grad_w_hh: Tensor::zeros(w_hh.shape().to_vec()),
            grad_bias: Tensor::zeros(bias.shape().to_vec()),
            w_ih,
            w_hh,
            bias,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.dim(1)
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.dim(1)
    }

    /// One step for a batch; `x` is `[B, D]`, `h` and `c` are `[B, H]`.
    /// Returns `(h, c, cache)`.
    fn step(&self, x: &[T], h: &[T], c: &[T], batch: usize) -> (Vec<T>, Vec<T>, StepCache<T>) {
        let (d, hd) = (self.input_dim(), self.hidden());
        let (wi, wh, bias) = (self.w_ih.data(), self.w_hh.data(), self.bias.data());
        let mut gates = vec![T::zero(); batch * 4 * hd];
        let mut h_new = vec![T::zero(); batch * hd];
        let mut c_new = vec![T::zero(); batch * hd];
        let mut tanh_c = vec![T::zero(); batch * hd];
        for b in 0..batch {
            let xb = &x[b * d..(b + 1) * d];
            let hb = &h[b * hd..(b + 1) * hd];
            let gb = &mut gates[b * 4 * hd..(b + 1) * 4 * hd];
            for (r, g) in gb.iter_mut().enumerate() {
                let pre = bias[r] + T::dot(&wi[r * d..(r + 1) * d], xb) + T::dot(&wh[r * hd..(r + 1) * hd], hb);
                *g = if (2 * hd..3 * hd).contains(&r) { pre.tanh() } else { pre.sigmoid() };
            }
            for j in 0..hd {
                let (i, f, g, o) = (gb[j], gb[hd + j], gb[2 * hd + j], gb[3 * hd + j]);
                let cn = f * c[b * hd + j] + i * g;
                let tc = cn.tanh();
                c_new[b * hd + j] = cn;
                tanh_c[b * hd + j] = tc;
                h_new[b * hd + j] = o * tc;
            }
        }
        let cache = StepCache {
            x: x.to_vec(),
            h_prev: h.to_vec(),
            c_prev: c.to_vec(),
            gates,
            tanh_c,
        };
        (h_new, c_new, cache)
    }

    /// Back-propagates `(dh, dc)` through one cached step, accumulating
    /// parameter gradients. Returns `(dx, dh_prev, dc_prev)`.
    fn step_backward(&mut self, cache: &StepCache<T>, dh: &[T], dc: &[T], batch: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (d, hd) = (self.input_dim(), self.hidden());
        let one = T::one();
        let mut dx = vec![T::zero(); batch * d];
        let mut dh_prev = vec![T::zero(); batch * hd];
        let mut dc_prev = vec![T::zero(); batch * hd];
        let mut da = vec![T::zero(); 4 * hd];
        for b in 0..batch {
            let gb = &cache.gates[b * 4 * hd..(b + 1) * 4 * hd];
            for j in 0..hd {
                let k = b * hd + j;
                let (i, f, g, o) = (gb[j], gb[hd + j], gb[2 * hd + j], gb[3 * hd + j]);
                let tc = cache.tanh_c[k];
                let dct = dc[k] + dh[k] * o * (one - tc * tc);
                da[j] = dct * g * i * (one - i);
                da[hd + j] = dct * cache.c_prev[k] * f * (one - f);
                da[2 * hd + j] = dct * i * (one - g * g);
                da[3 * hd + j] = dh[k] * tc * o * (one - o);
                dc_prev[k] = dct * f;
            }
            let xb = &cache.x[b * d..(b + 1) * d];
            let hb = &cache.h_prev[b * hd..(b + 1) * hd];
            let dxb = &mut dx[b * d..(b + 1) * d];
            for (r, &a) in da.iter().enumerate() {
                self.grad_bias.data_mut()[r] += a;
                T::axpy(a, xb, &mut self.grad_w_ih.data_mut()[r * d..(r + 1) * d]);
                T::axpy(a, hb, &mut self.grad_w_hh.data_mut()[r * hd..(r + 1) * hd]);
                T::axpy(a, &self.w_ih.data()[r * d..(r + 1) * d], dxb);
                T::axpy(a, &self.w_hh.data()[r * hd..(r + 1) * hd], &mut dh_prev[b * hd..(b + 1) * hd]);
            }
        }
        (dx, dh_prev, dc_prev)
    }
}

impl<T: Scalar> Module<T> for LstmCell<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "w_ih"), &self.w_ih);
        f(&join(prefix, "w_hh"), &self.w_hh);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        for (name, value, grad) in [
            ("w_ih", &mut self.w_ih, &mut self.grad_w_ih),
            ("w_hh", &mut self.w_hh, &mut self.grad_w_hh),
            ("bias", &mut self.bias, &mut self.grad_bias),
        ] {
            f(&join(prefix, name), Slot::Param { value, grad, decay: true });
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub decoder_steps: usize,
    pub num_classes: usize,
}

impl LstmConfig {
    pub fn new(input_dim: usize, hidden: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden,
            decoder_steps: 8,
            num_classes,
        }
    }
}

#[derive(Debug, Clone)]
struct Trace<T> {
    encoder: Vec<StepCache<T>>,
    decoder: Vec<StepCache<T>>,
    shape: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct LstmBaseline<T: Scalar = f32> {
    config: LstmConfig,
    pub encoder: LstmCell<T>,
    pub decoder: LstmCell<T>,
    pub head: Linear<T>,
    trace: Option<Trace<T>>,
}

impl<T: Scalar> LstmBaseline<T> {
    pub fn new(config: LstmConfig, rng: &mut Rng) -> Result<Self> {
        if config.input_dim == 0 || config.hidden == 0 || config.num_classes == 0 || config.decoder_steps == 0 {
            return Err(Error::InvalidArgument("LSTM widths and decoder steps must be positive".into()));
        }
        Ok(Self {
            encoder: LstmCell::new(config.input_dim, config.hidden, rng),
            decoder: LstmCell::new(config.hidden, config.hidden, rng),
            head: Linear::new(config.hidden, config.num_classes, rng),
            config,
            trace: None,
        })
    }

    pub fn config(&self) -> &LstmConfig {
        &self.config
    }

    /// Final decoder hidden state `[B, H]` for `[B, D, N]` input.
    fn run(&self, x: &Tensor<T>, mut keep: Option<&mut Trace<T>>) -> Result<Vec<T>> {
        let (b, d, n) = match x.shape() {
            &[b, d, n] if d == self.config.input_dim => (b, d, n),
            s => {
                return Err(Error::shape(
                    "lstm_forward",
                    format!("expected [B, {}, N], got {s:?}", self.config.input_dim),
                ))
            }
        };
        let hd = self.config.hidden;
        let mut h = vec![T::zero(); b * hd];
        let mut c = vec![T::zero(); b * hd];
        let mut xt = vec![T::zero(); b * d];
        for t in 0..n {
            for (j, v) in xt.iter_mut().enumerate() {
                *v = x.data()[j * n + t];
            }
            let (hn, cn, cache) = self.encoder.step(&xt, &h, &c, b);
            (h, c) = (hn, cn);
            if let Some(tr) = keep.as_deref_mut() {
                tr.encoder.push(cache);
            }
        }
        let context = h.clone();
        for _ in 0..self.config.decoder_steps {
            let (hn, cn, cache) = self.decoder.step(&context, &h, &c, b);
            (h, c) = (hn, cn);
            if let Some(tr) = keep.as_deref_mut() {
                tr.decoder.push(cache);
            }
        }
        Ok(h)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.run(x, None)?;
        self.head.apply(&Tensor::new(vec![x.dim(0), self.config.hidden], h)?)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut trace = Trace {
            encoder: Vec::new(),
            decoder: Vec::new(),
            shape: [0; 3],
        };
        let h = self.run(x, Some(&mut trace))?;
        trace.shape = [x.dim(0), x.dim(1), x.dim(2)];
        self.trace = Some(trace);
        self.head.forward(&Tensor::new(vec![x.dim(0), self.config.hidden], h)?)
    }

    /// Back-propagation through time; returns the input gradient.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let trace = self.trace.take().ok_or(Error::MissingCache("lstm"))?;
        let [b, d, n] = trace.shape;
        let mut dh = self.head.backward(grad_logits)?.into_data();
        let mut dc = vec![T::zero(); dh.len()];
        let mut dcontext = vec![T::zero(); dh.len()];
        for cache in trace.decoder.iter().rev() {
            let (dx, dhp, dcp) = self.decoder.step_backward(cache, &dh, &dc, b);
            for (a, v) in dcontext.iter_mut().zip(dx) {
                *a += v;
            }
            (dh, dc) = (dhp, dcp);
        }
        for (a, v) in dh.iter_mut().zip(dcontext) {
            *a += v;
        }
        let mut grad_x = vec![T::zero(); b * d * n];
        for (t, cache) in trace.encoder.iter().enumerate().rev() {
            let (dx, dhp, dcp) = self.encoder.step_backward(cache, &dh, &dc, b);
            for (j, v) in dx.into_iter().enumerate() {
                grad_x[j * n + t] = v;
            }
            (dh, dc) = (dhp, dcp);
        }
        Tensor::new(vec![b, d, n], grad_x)
    }
}

impl<T: Scalar> Module<T> for LstmBaseline<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::cross_entropy;
    use crate::nn::gradcheck::{check_input_gradient, check_module, GRADCHECK_TOL};

    #[test]
    fn single_step_matches_cell_equations() {
        let mut rng = Rng::new(1);
        let cell = LstmCell::<f64>::new(2, 1, &mut rng);
        let x = [0.3, -0.7];
        let (h, c, _) = cell.step(&x, &[0.2], &[0.5], 1);
        let (w, u, b) = (cell.w_ih.data(), cell.w_hh.data(), cell.bias.data());
        let pre = |r: usize| b[r] + w[2 * r] * x[0] + w[2 * r + 1] * x[1] + u[r] * 0.2;
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let cn = s(pre(1)) * 0.5 + s(pre(0)) * pre(2).tanh();
        assert!((c[0] - cn).abs() < 1e-14);
        assert!((h[0] - s(pre(3)) * cn.tanh()).abs() < 1e-14);
    }

    #[test]
    fn gradcheck_through_time() {
        let mut rng = Rng::new(2);
        let config = LstmConfig {
            decoder_steps: 2,
            ..LstmConfig::new(3, 4, 5)
        };
        let mut model = LstmBaseline::<f64>::new(config, &mut rng).unwrap();
        let x = Tensor::normal(&mut rng, 0.0, 1.0, [2, 3, 3]).unwrap();
        let labels = [1, 4];
        let report = check_module(
            &mut model,
            |m| Ok(cross_entropy(&m.infer(&x)?, &labels, "action")?.0),
            |m| {
                let logits = m.forward(&x)?;
                m.backward(&cross_entropy(&logits, &labels, "action")?.1).map(|_| ())
            },
        )
        .unwrap();
        assert!(report.max_rel_error() < GRADCHECK_TOL, "{report:#?}");
        let logits = model.forward(&x).unwrap();
        let gx = model.backward(&cross_entropy(&logits, &labels, "action").unwrap().1).unwrap();
        let worst = check_input_gradient(&x, &gx, |xi| Ok(cross_entropy(&model.infer(xi)?, &labels, "action")?.0)).unwrap();
        assert!(worst < GRADCHECK_TOL);
    }

    #[test]
    fn forward_matches_infer() {
        let mut rng = Rng::new(3);
        let mut model = LstmBaseline::<f64>::new(LstmConfig::new(2, 3, 4), &mut rng).unwrap();
        let x = Tensor::normal(&mut rng, 0.0, 1.0, [3, 2, 5]).unwrap();
        assert_eq!(model.infer(&x).unwrap(), model.forward(&x).unwrap());
        assert!(model.infer(&Tensor::zeros([1, 3, 5])).is_err());
    }
}
