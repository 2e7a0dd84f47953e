//! Uni-modal temporal convolutional branch.
//!
//! A kernel-size-one convolution embeds the `D`-dimensional snippet features
//! into `C` channels, then `L` dilated residual blocks shrink the sequence:
//!
//! ```text
//! Z~_l = BN(W_l * Z_{l-1} + b_l)
//! Z^_l = Dropout(Z~_l)
//! Z_l  = ReLU(Z^_l + last N_l steps of Z_{l-1})
//! ```
//!
//! With `N` equal to the receptive field, `Z_L` has a single time step: the
//! feature vector `F` read by the action, verb and noun heads.

use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy, join, relu_backward, BatchNorm1d, Conv1d, Linear, Mode, Module, Slot,
    SpatialDropout,
};
use crate::tensor::{Rng, Scalar, Tensor};

/// `1 + (K - 1) * sum(dilations)`: the number of input steps that reach one
/// output position.
pub fn required_input_length(kernel: usize, dilations: &[usize]) -> usize {
    1 + kernel.saturating_sub(1) * dilations.iter().sum::<usize>()
}

/// Longest prefix of `dilations` whose receptive field fits in `snippets`.
pub fn fit_dilations(kernel: usize, dilations: &[usize], snippets: usize) -> Option<Vec<usize>> {
    (1..=dilations.len())
        .rev()
        .map(|l| &dilations[..l])
        .find(|d| required_input_length(kernel, d) <= snippets)
        .map(<[usize]>::to_vec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchConfig {
    pub input_dim: usize,
    pub channels: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub input_dropout: f64,
    pub block_dropout: f64,
    pub head_dropout: f64,
    pub num_actions: usize,
    pub num_verbs: usize,
    pub num_nouns: usize,
}

impl BranchConfig {
    /// Full-scale defaults: `C = 1024`, `K = 3`, dilations `1..=4`, dropout
    /// 0.3 / 0.5 / 0.7 on input, blocks and heads.
    pub fn new(input_dim: usize, num_actions: usize, num_verbs: usize, num_nouns: usize) -> Self {
        Self {
            input_dim,
            channels: 1024,
            kernel: 3,
            dilations: vec![1, 2, 3, 4],
            input_dropout: 0.3,
            block_dropout: 0.5,
            head_dropout: 0.7,
            num_actions,
            num_verbs,
            num_nouns,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.dilations.len()
    }

    pub fn required_input_length(&self) -> usize {
        required_input_length(self.kernel, &self.dilations)
    }

    /// Temporal length after each residual block for an `n`-step input.
    pub fn block_lengths(&self, n: usize) -> Result<Vec<usize>> {
        let required = self.required_input_length();
        if n < required {
            return Err(Error::SequenceTooShort { got: n, required });
        }
        let mut len = n;
        Ok(self
            .dilations
            .iter()
            .map(|d| {
                len -= (self.kernel - 1) * d;
                len
            })
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.input_dim == 0 || self.channels == 0 || self.kernel == 0 {
            return bad("input_dim, channels and kernel must be positive".into());
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad(format!("dilations must be non-empty and positive, got {:?}", self.dilations));
        }
        if self.num_actions == 0 || self.num_verbs == 0 || self.num_nouns == 0 {
            return bad("class counts must be positive".into());
        }
        for p in [self.input_dropout, self.block_dropout, self.head_dropout] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout rates must be in [0, 1), got {p}"));
            }
        }
        Ok(())
    }

    /// Flat numeric encoding stored alongside checkpointed weights.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![
            1.0,
            self.input_dim as f64,
            self.channels as f64,
            self.kernel as f64,
            self.dilations.len() as f64,
        ];
        v.extend(self.dilations.iter().map(|&d| d as f64));
        v.extend([
            self.input_dropout,
            self.block_dropout,
            self.head_dropout,
            self.num_actions as f64,
            self.num_verbs as f64,
            self.num_nouns as f64,
        ]);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let err = || Error::Checkpoint(format!("malformed branch config record {v:?}"));
        let int = |x: f64| -> Result<usize> {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(err())
            }
        };
        if v.len() < 5 || v[0] != 1.0 {
            return Err(err());
        }
        let layers = int(v[4])?;
        if v.len() != 5 + layers + 6 {
            return Err(err());
        }
        let tail = &v[5 + layers..];
        let cfg = Self {
            input_dim: int(v[1])?,
            channels: int(v[2])?,
            kernel: int(v[3])?,
            dilations: v[5..5 + layers].iter().map(|&d| int(d)).collect::<Result<_>>()?,
            input_dropout: tail[0],
            block_dropout: tail[1],
            head_dropout: tail[2],
            num_actions: int(tail[3])?,
            num_verbs: int(tail[4])?,
            num_nouns: int(tail[5])?,
        };
        cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
struct Block<T: Scalar> {
    conv: Conv1d<T>,
    bn: BatchNorm1d<T>,
    dropout: SpatialDropout<T>,
}

/// Dropout followed by a linear classifier on the `[B, C]` feature.
#[derive(Debug, Clone)]
pub struct Head<T: Scalar> {
    pub dropout: SpatialDropout<T>,
    pub fc: Linear<T>,
}

impl<T: Scalar> Head<T> {
    pub fn new(d_in: usize, classes: usize, p: f64, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            dropout: SpatialDropout::new(p)?,
            fc: Linear::new(d_in, classes, rng),
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: Option<&mut Rng>) -> Result<Tensor<T>> {
        let h = self.dropout.forward(x, mode, rng)?;
        self.fc.forward(&h)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.fc.backward(grad)?;
        self.dropout.backward(&g)
    }
}

impl<T: Scalar> Module<T> for Head<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.fc.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.fc.visit_mut(prefix, f);
    }
}

/// Logits of the three heads and the feature they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput<T: Scalar> {
    /// `F`: the last time step of the final block output, `[B, C]`.
    pub features: Tensor<T>,
    pub action: Tensor<T>,
    pub verb: Tensor<T>,
    pub noun: Tensor<T>,
}

/// Upstream gradients for the three heads.
#[derive(Debug, Clone)]
pub struct HeadGrads<T: Scalar> {
    pub action: Tensor<T>,
    pub verb: Tensor<T>,
    pub noun: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub action: f64,
    pub verb: f64,
    pub noun: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            action: 1.0,
            verb: 1.0,
            noun: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Labels {
    pub action: Vec<usize>,
    pub verb: Vec<usize>,
    pub noun: Vec<usize>,
}

/// `λ_a CE(action) + λ_v CE(verb) + λ_n CE(noun)` and the logit gradients.
pub fn branch_loss<T: Scalar>(
    action: &Tensor<T>,
    verb: &Tensor<T>,
    noun: &Tensor<T>,
    labels: &Labels,
    weights: LossWeights,
) -> Result<(T, HeadGrads<T>)> {
    let (la, ga) = cross_entropy(action, &labels.action, "action")?;
    let (lv, gv) = cross_entropy(verb, &labels.verb, "verb")?;
    let (ln, gn) = cross_entropy(noun, &labels.noun, "noun")?;
    let (wa, wv, wn) = (
        T::from_f64(weights.action),
        T::from_f64(weights.verb),
        T::from_f64(weights.noun),
    );
    Ok((
        wa * la + wv * lv + wn * ln,
        HeadGrads {
            action: ga.mul_scalar(wa)?,
            verb: gv.mul_scalar(wv)?,
            noun: gn.mul_scalar(wn)?,
        },
    ))
}

#[derive(Debug, Clone)]
struct ForwardCache<T: Scalar> {
    /// Post-ReLU output of every block.
    outputs: Vec<Tensor<T>>,
    embed_len: usize,
    batch: usize,
}

#[derive(Debug, Clone)]
pub struct Branch<T: Scalar = f32> {
    config: BranchConfig,
    input_dropout: SpatialDropout<T>,
    embed: Conv1d<T>,
    blocks: Vec<Block<T>>,
    pub heads: [Head<T>; 3],
    cache: Option<ForwardCache<T>>,
}

fn last_steps<T: Scalar>(x: &Tensor<T>, keep: usize) -> Result<Tensor<T>> {
    let (b, c, n) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = Vec::with_capacity(b * c * keep);
    for row in x.data().chunks_exact(n) {
        out.extend_from_slice(&row[n - keep..]);
    }
    Tensor::new(vec![b, c, keep], out)
}

impl<T: Scalar> Branch<T> {
    pub fn new(config: BranchConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let embed = Conv1d::new(config.input_dim, c, 1, 1, rng);
        let blocks = config
            .dilations
            .iter()
            .map(|&d| {
                Ok(Block {
                    conv: Conv1d::new(c, c, config.kernel, d, rng),
                    bn: BatchNorm1d::new(c),
                    dropout: SpatialDropout::new(config.block_dropout)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = [
            Head::new(c, config.num_actions, config.head_dropout, rng)?,
            Head::new(c, config.num_verbs, config.head_dropout, rng)?,
            Head::new(c, config.num_nouns, config.head_dropout, rng)?,
        ];
        Ok(Self {
            input_dropout: SpatialDropout::new(config.input_dropout)?,
            config,
            embed,
            blocks,
            heads,
            cache: None,
        })
    }

    pub fn config(&self) -> &BranchConfig {
        &self.config
    }

    /// Zeroes every residual-block convolution (weights and bias), leaving
    /// the blocks as pure residual pass-throughs.
    pub fn zero_block_convs(&mut self) {
        for block in &mut self.blocks {
            block.conv.weight.fill(T::zero());
            block.conv.bias.fill(T::zero());
        }
    }

    pub fn embed(&self) -> &Conv1d<T> {
        &self.embed
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        match x.shape() {
            &[_, d, n] if d == self.config.input_dim => {
                self.config.block_lengths(n)?;
                Ok(n)
            }
            s => Err(Error::shape(
                "branch_forward",
                format!("expected [B, {}, N], got {s:?}", self.config.input_dim),
            )),
        }
    }

    /// Final block output `Z_L` (all remaining steps), eval mode, no caching.
    pub fn trunk(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut z = self.embed.apply(x)?;
        for block in &self.blocks {
            let h = block.bn.apply(&block.conv.apply(&z)?)?;
            let residual = last_steps(&z, h.dim(2))?;
            z = h.add(&residual)?.relu()?;
        }
        Ok(z)
    }

    /// `F` for `x` in eval mode.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.trunk(x)?;
        last_steps(&z, 1)?.reshape([z.dim(0), z.dim(1)])
    }

    /// Eval-mode inference that leaves the branch untouched.
    pub fn infer(&self, x: &Tensor<T>) -> Result<BranchOutput<T>> {
        let features = self.features(x)?;
        Ok(BranchOutput {
            action: self.heads[0].fc.apply(&features)?,
            verb: self.heads[1].fc.apply(&features)?,
            noun: self.heads[2].fc.apply(&features)?,
            features,
        })
    }

    /// Forward pass caching everything `backward` needs. Training mode draws
    /// dropout masks from `rng` and updates batch-norm running statistics.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, mut rng: Option<&mut Rng>) -> Result<BranchOutput<T>> {
        self.check_input(x)?;
        self.cache = None;
        let dropped = self.input_dropout.forward(x, mode, rng.as_deref_mut())?;
        let mut z = self.embed.forward(&dropped)?;
        let embed_len = z.dim(2);
        let mut outputs = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let h = block.conv.forward(&z)?;
            let h = block.bn.forward(&h, mode)?;
            let h = block.dropout.forward(&h, mode, rng.as_deref_mut())?;
            let residual = last_steps(&z, h.dim(2))?;
            z = h.add(&residual)?.relu()?;
            outputs.push(z.clone());
        }
        let (b, c) = (z.dim(0), z.dim(1));
        let features = last_steps(&z, 1)?.reshape([b, c])?;
        let [ha, hv, hn] = &mut self.heads;
        let out = BranchOutput {
            action: ha.forward(&features, mode, rng.as_deref_mut())?,
            verb: hv.forward(&features, mode, rng.as_deref_mut())?,
            noun: hn.forward(&features, mode, rng.as_deref_mut())?,
            features,
        };
        self.cache = Some(ForwardCache {
            outputs,
            embed_len,
            batch: b,
        });
        Ok(out)
    }

    /// Back-propagates head gradients, accumulating parameter gradients, and
    /// returns the gradient w.r.t. the input sequence.
    pub fn backward(&mut self, grads: &HeadGrads<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(Error::MissingCache("branch"))?;
        let c = self.config.channels;
        let mut d_feat = self.heads[0].backward(&grads.action)?;
        d_feat.add_assign(&self.heads[1].backward(&grads.verb)?)?;
        d_feat.add_assign(&self.heads[2].backward(&grads.noun)?)?;

        let last_len = cache.outputs.last().map_or(cache.embed_len, |z| z.dim(2));
        let mut dz = Tensor::zeros([cache.batch, c, last_len]);
        for (row, &g) in dz.data_mut().chunks_exact_mut(last_len).zip(d_feat.data()) {
            row[last_len - 1] = g;
        }
        for (l, block) in self.blocks.iter_mut().enumerate().rev() {
            let d_pre = relu_backward(&cache.outputs[l], &dz)?;
            let in_len = if l == 0 {
                cache.embed_len
            } else {
                cache.outputs[l - 1].dim(2)
            };
            let out_len = d_pre.dim(2);
            let g = block.dropout.backward(&d_pre)?;
            let g = block.bn.backward(&g)?;
            let mut d_in = block.conv.backward(&g)?;
            let offset = in_len - out_len;
            for (dst, src) in d_in
                .data_mut()
                .chunks_exact_mut(in_len)
                .zip(d_pre.data().chunks_exact(out_len))
            {
                for (a, &b) in dst[offset..].iter_mut().zip(src) {
                    *a += b;
                }
            }
            dz = d_in;
        }
        let dx = self.embed.backward(&dz)?;
        self.input_dropout.backward(&dx)
    }
}

impl<T: Scalar> Module<T> for Branch<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.embed.visit(&join(prefix, "embed"), f);
        for (l, block) in self.blocks.iter().enumerate() {
            block.conv.visit(&join(prefix, &format!("blocks.{l}.conv")), f);
            block.bn.visit(&join(prefix, &format!("blocks.{l}.bn")), f);
        }
        for (name, head) in HEAD_NAMES.iter().zip(&self.heads) {
            head.visit(&join(prefix, &format!("heads.{name}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        for (l, block) in self.blocks.iter_mut().enumerate() {
            block.conv.visit_mut(&join(prefix, &format!("blocks.{l}.conv")), f);
            block.bn.visit_mut(&join(prefix, &format!("blocks.{l}.bn")), f);
        }
        for (name, head) in HEAD_NAMES.iter().zip(&mut self.heads) {
            head.visit_mut(&join(prefix, &format!("heads.{name}")), f);
        }
    }
}

pub(crate) const HEAD_NAMES: [&str; 3] = ["action", "verb", "noun"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_input_gradient, check_module, GRADCHECK_TOL};

    fn small(d: usize, c: usize, dilations: Vec<usize>) -> BranchConfig {
        BranchConfig {
            input_dim: d,
            channels: c,
            kernel: 3,
            dilations,
            input_dropout: 0.3,
            block_dropout: 0.5,
            head_dropout: 0.7,
            num_actions: 4,
            num_verbs: 2,
            num_nouns: 3,
        }
    }

    #[test]
    fn receptive_field_examples() {
        assert_eq!(required_input_length(3, &[1, 2, 3, 4]), 21);
        assert_eq!(required_input_length(1, &[1, 2, 3]), 1);
        assert_eq!(required_input_length(3, &[1]), 3);
        let cfg = BranchConfig::new(1024, 10, 5, 5);
        assert_eq!(cfg.block_lengths(21).unwrap(), vec![19, 15, 9, 1]);
        assert_eq!(cfg.block_lengths(31).unwrap(), vec![29, 25, 19, 11]);
        assert!(cfg.block_lengths(20).is_err());
    }

    #[test]
    fn dilation_prefix_for_short_windows() {
        let d = [1, 2, 3, 4];
        assert_eq!(fit_dilations(3, &d, 3).unwrap(), vec![1]);
        assert_eq!(fit_dilations(3, &d, 7).unwrap(), vec![1, 2]);
        assert_eq!(fit_dilations(3, &d, 13).unwrap(), vec![1, 2, 3]);
        assert_eq!(fit_dilations(3, &d, 21).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(fit_dilations(3, &d, 31).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(fit_dilations(3, &d, 2), None);
    }

    #[test]
    fn block_lengths_for_small_config() {
        let cfg = small(4, 8, vec![1, 2]);
        assert_eq!(cfg.block_lengths(7).unwrap(), vec![5, 1]);
        let mut rng = Rng::new(0);
        let mut branch = Branch::<f64>::new(cfg, &mut rng).unwrap();
        let x = Tensor::normal(&mut rng, 0.0, 1.0, [2, 4, 7]).unwrap();
        branch.forward(&x, Mode::Eval, None).unwrap();
        let lens: Vec<usize> = branch.cache.as_ref().unwrap().outputs.iter().map(|z| z.dim(2)).collect();
        assert_eq!(lens, vec![5, 1]);
    }

    #[test]
    fn zero_convs_reduce_to_relu_of_embedding() {
        let mut rng = Rng::new(1);
        let mut branch = Branch::<f64>::new(small(3, 6, vec![1, 2, 3, 4]), &mut rng).unwrap();
        branch.zero_block_convs();
        let x = Tensor::normal(&mut rng, 0.0, 1.0, [2, 3, 21]).unwrap();
        let f = branch.infer(&x).unwrap().features;
        let e = branch.embed().apply(&x).unwrap();
        for b in 0..2 {
            for c in 0..6 {
                let v = e.data()[(b * 6 + c) * 21 + 20];
                assert_eq!(f.data()[b * 6 + c], v.max(0.0));
            }
        }
        let trained = branch.forward(&x, Mode::Eval, None).unwrap();
        assert_eq!(trained.features, f);
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let mut rng = Rng::new(2);
        let mut branch = Branch::<f32>::new(small(3, 6, vec![1, 2]), &mut rng).unwrap();
        let x = Tensor::normal(&mut rng, 0.0, 1.0, [3, 3, 9]).unwrap();
        let a = branch.infer(&x).unwrap();
        let b = branch.forward(&x, Mode::Eval, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, branch.infer(&x).unwrap());
    }

    #[test]
    fn longer_inputs_use_most_recent_output() {
        let mut rng = Rng::new(3);
        let branch = Branch::<f64>::new(small(2, 4, vec![1]), &mut rng).unwrap();
        let x = Tensor::normal(&mut rng, 0.0, 1.0, [1, 2, 6]).unwrap();
        let tail = last_steps(&x, 3).unwrap();
        assert_eq!(branch.features(&x).unwrap(), branch.features(&tail).unwrap());
    }

    #[test]
    fn every_window_step_reaches_the_feature() {
        let mut rng = Rng::new(4);
        let branch = Branch::<f64>::new(small(3, 6, vec![1, 2, 3, 4]), &mut rng).unwrap();
        let x = Tensor::normal(&mut rng, 0.0, 1.0, [1, 3, 21]).unwrap();
        let base = branch.features(&x).unwrap();
        for t in 0..21 {
            let mut y = x.clone();
            for d in 0..3 {
                y.data_mut()[d * 21 + t] += 0.5;
            }
            assert_ne!(branch.features(&y).unwrap(), base, "step {t} unreachable");
        }
    }

    #[test]
    fn loss_reference_values() {
        let labels = Labels {
            action: vec![1],
            verb: vec![0],
            noun: vec![1],
        };
        let (a, v, n) = (
            Tensor::<f64>::zeros([1, 4]),
            Tensor::<f64>::zeros([1, 2]),
            Tensor::<f64>::zeros([1, 2]),
        );
        let only_action = LossWeights { action: 1.0, verb: 0.0, noun: 0.0 };
        let (l, _) = branch_loss(&a, &v, &n, &labels, only_action).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let (l, _) = branch_loss(&a, &v, &n, &labels, LossWeights::default()).unwrap();
        assert!((l - (4f64.ln() + 2.0 * 2f64.ln())).abs() < 1e-12);
        let bad = Labels { action: vec![4], ..labels };
        assert!(matches!(
            branch_loss(&a, &v, &n, &bad, LossWeights::default()),
            Err(Error::LabelOutOfRange { head: "action", .. })
        ));
    }

    #[test]
    fn config_record_round_trip() {
        let cfg = small(5, 7, vec![1, 3]);
        assert_eq!(BranchConfig::from_slice(&cfg.to_vec()).unwrap(), cfg);
        assert!(BranchConfig::from_slice(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn end_to_end_gradcheck_train_mode() {
        let mut rng = Rng::new(77);
        let cfg = BranchConfig {
            input_dropout: 0.2,
            block_dropout: 0.2,
            head_dropout: 0.2,
            ..small(3, 6, vec![1, 2, 3, 4])
        };
        let mut branch = Branch::<f64>::new(cfg, &mut rng).unwrap();
        let x = Tensor::normal(&mut rng, 0.0, 1.0, [2, 3, 21]).unwrap();
        let labels = Labels {
            action: vec![0, 3],
            verb: vec![1, 0],
            noun: vec![2, 2],
        };
        let masks = rng.clone();
        let loss = |b: &mut Branch<f64>, x: &Tensor<f64>| -> Result<f64> {
            let out = b.forward(x, Mode::Train, Some(&mut masks.clone()))?;
            Ok(branch_loss(&out.action, &out.verb, &out.noun, &labels, LossWeights::default())?.0)
        };
        let grads = |b: &mut Branch<f64>| -> Result<Tensor<f64>> {
            let out = b.forward(&x, Mode::Train, Some(&mut masks.clone()))?;
            let (_, g) = branch_loss(&out.action, &out.verb, &out.noun, &labels, LossWeights::default())?;
            b.backward(&g)
        };
        let report = check_module(&mut branch, |b| loss(b, &x), |b| grads(b).map(|_| ())).unwrap();
        assert!(report.max_rel_error() < GRADCHECK_TOL, "{report:#?}");
        let gx = grads(&mut branch).unwrap();
        let worst = check_input_gradient(&x, &gx, |xi| loss(&mut branch.clone(), xi)).unwrap();
        assert!(worst < GRADCHECK_TOL, "input {worst}");
    }
}
