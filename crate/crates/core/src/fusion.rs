//! Fusion of the RGB, flow and object branches.
//!
//! Two families are supported. Prediction-level fusion (`late`,
//! `attention`) mixes the branches' softmax distributions. Feature-level
//! fusion (`mutual`, `pairwise`, `mutual_pairwise`) builds a joint embedding
//! `H` from the branch features and classifies it with three new heads:
//!
//! ```text
//! G_ij = FC_ij([F_i, F_j])          for (rgb,flow), (rgb,obj), (flow,obj)
//! P    = FC_merge([G_12, G_13, G_23])
//! M    = FC_mutual([F_rgb, F_flow, F_obj])
//! H    = P + M | M | P
//! ```

use std::fmt;
use std::str::FromStr;

use crate::branch::{Branch, Head, HEAD_NAMES};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, join, Linear, Mode, Module, Slot};
use crate::tensor::{softmax_rows, Rng, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Late,
    Attention,
    Mutual,
    Pairwise,
    MutualPairwise,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Late,
        Strategy::Attention,
        Strategy::Mutual,
        Strategy::Pairwise,
        Strategy::MutualPairwise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Late => "late",
            Strategy::Attention => "attention",
            Strategy::Mutual => "mutual",
            Strategy::Pairwise => "pairwise",
            Strategy::MutualPairwise => "mutual_pairwise",
        }
    }

    pub fn code(self) -> u8 {
        Strategy::ALL.iter().position(|&s| s == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Strategy::ALL.get(code as usize).copied()
    }

    fn uses_pairwise(self) -> bool {
        matches!(self, Strategy::Pairwise | Strategy::MutualPairwise)
    }

    fn uses_mutual(self) -> bool {
        matches!(self, Strategy::Mutual | Strategy::MutualPairwise)
    }

    /// Whether the strategy classifies a fused embedding with its own heads.
    pub fn is_embedding(self) -> bool {
        self.uses_pairwise() || self.uses_mutual()
    }

    /// Whether there is anything to train.
    pub fn is_trainable(self) -> bool {
        self != Strategy::Late
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown fusion strategy `{s}` (expected late, attention, mutual, pairwise or mutual_pairwise)"
                ))
            })
    }
}

/// What a branch contributes to fusion: its feature `F` and the softmax
/// distributions of its three heads.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSignals<T: Scalar> {
    pub features: Tensor<T>,
    pub probs: [Tensor<T>; 3],
}

impl<T: Scalar> BranchSignals<T> {
    pub fn from_branch(branch: &Branch<T>, x: &Tensor<T>) -> Result<Self> {
        let out = branch.infer(x)?;
        let sm = |t: &Tensor<T>| Tensor::new(t.shape().to_vec(), softmax_rows(t.data(), t.dim(1)));
        Ok(Self {
            probs: [sm(&out.action)?, sm(&out.verb)?, sm(&out.noun)?],
            features: out.features,
        })
    }

    pub fn batch(&self) -> usize {
        self.features.dim(0)
    }

    /// Rows `idx` of every tensor.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let pick = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let w = t.dim(1);
            let mut out = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                out.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
            Tensor::new(vec![idx.len(), w], out)
        };
        Ok(Self {
            features: pick(&self.features)?,
            probs: [pick(&self.probs[0])?, pick(&self.probs[1])?, pick(&self.probs[2])?],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Logits,
    Probabilities,
}

/// Action, verb and noun scores of a fusion model.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput<T: Scalar> {
    pub scores: [Tensor<T>; 3],
    pub kind: ScoreKind,
}

impl<T: Scalar> FusionOutput<T> {
    pub fn probabilities(&self) -> Result<[Tensor<T>; 3]> {
        match self.kind {
            ScoreKind::Probabilities => Ok(self.scores.clone()),
            ScoreKind::Logits => {
                let sm = |t: &Tensor<T>| Tensor::new(t.shape().to_vec(), softmax_rows(t.data(), t.dim(1)));
                Ok([sm(&self.scores[0])?, sm(&self.scores[1])?, sm(&self.scores[2])?])
            }
        }
    }
}

const NORMALIZATION_TOL: f64 = 1e-6;

fn check_distribution<T: Scalar>(p: &Tensor<T>, op: &'static str) -> Result<()> {
    if p.rank() != 2 {
        return Err(Error::shape(op, format!("expected [B, K], got {:?}", p.shape())));
    }
    for (b, row) in p.data().chunks_exact(p.dim(1)).enumerate() {
        let s: f64 = row.iter().map(|v| v.to_f64()).sum();
        if (s - 1.0).abs() > NORMALIZATION_TOL || row.iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "{op}: row {b} is not a probability distribution (sums to {s})"
            )));
        }
    }
    Ok(())
}

/// Arithmetic mean of three per-class distributions.
pub fn late_fusion<T: Scalar>(rgb: &Tensor<T>, flow: &Tensor<T>, obj: &Tensor<T>) -> Result<Tensor<T>> {
    for p in [rgb, flow, obj] {
        check_distribution(p, "late_fusion")?;
    }
    if rgb.shape() != flow.shape() || rgb.shape() != obj.shape() {
        return Err(Error::shape(
            "late_fusion",
            format!("{:?} / {:?} / {:?}", rgb.shape(), flow.shape(), obj.shape()),
        ));
    }
    let third = T::one() / T::from_f64(3.0);
    let data = rgb
        .data()
        .iter()
        .zip(flow.data())
        .zip(obj.data())
        .map(|((&a, &b), &c)| (a + b + c) * third)
        .collect();
    Tensor::new(rgb.shape().to_vec(), data)
}

fn concat<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let b = parts[0].dim(0);
    if parts.iter().any(|p| p.rank() != 2 || p.dim(0) != b) {
        return Err(Error::shape(
            "concat",
            format!("{:?}", parts.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()),
        ));
    }
    let width: usize = parts.iter().map(|p| p.dim(1)).sum();
    let mut out = Vec::with_capacity(b * width);
    for row in 0..b {
        for p in parts {
            let w = p.dim(1);
            out.extend_from_slice(&p.data()[row * w..(row + 1) * w]);
        }
    }
    Tensor::new(vec![b, width], out)
}

fn split<T: Scalar>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let b = x.dim(0);
    let total = x.dim(1);
    let mut parts: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(b * w)).collect();
    for row in x.data().chunks_exact(total) {
        let mut off = 0;
        for (part, &w) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&row[off..off + w]);
            off += w;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(p, &w)| Tensor::new(vec![b, w], p))
        .collect()
}

const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
const MODALITY_NAMES: [&str; 3] = ["rgb", "flow", "obj"];

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub strategy: Strategy,
    /// Width of the pairwise, merged and mutual embeddings.
    pub embed_dim: usize,
    /// Dropout before the fused classification heads.
    pub head_dropout: f64,
    /// Feature width of the rgb, flow and obj branches.
    pub channels: [usize; 3],
    pub num_actions: usize,
    pub num_verbs: usize,
    pub num_nouns: usize,
}

impl FusionConfig {
    pub fn new(strategy: Strategy, channels: [usize; 3], classes: [usize; 3]) -> Self {
        Self {
            strategy,
            embed_dim: 1024,
            head_dropout: 0.8,
            channels,
            num_actions: classes[0],
            num_verbs: classes[1],
            num_nouns: classes[2],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            1.0,
            self.strategy.code() as f64,
            self.embed_dim as f64,
            self.head_dropout,
            self.channels[0] as f64,
            self.channels[1] as f64,
            self.channels[2] as f64,
            self.num_actions as f64,
            self.num_verbs as f64,
            self.num_nouns as f64,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let err = || Error::Checkpoint(format!("malformed fusion config record {v:?}"));
        if v.len() != 10 || v[0] != 1.0 {
            return Err(err());
        }
        let int = |x: f64| (x >= 0.0 && x.fract() == 0.0).then_some(x as usize).ok_or_else(err);
        Ok(Self {
            strategy: Strategy::from_code(int(v[1])? as u8).ok_or_else(err)?,
            embed_dim: int(v[2])?,
            head_dropout: v[3],
            channels: [int(v[4])?, int(v[5])?, int(v[6])?],
            num_actions: int(v[7])?,
            num_verbs: int(v[8])?,
            num_nouns: int(v[9])?,
        })
    }

    fn classes(&self) -> [usize; 3] {
        [self.num_actions, self.num_verbs, self.num_nouns]
    }
}

#[derive(Debug, Clone)]
struct FusionCache<T: Scalar> {
    input: [BranchSignals<T>; 3],
    /// Attention weights `[B, 3]`.
    weights: Option<Tensor<T>>,
}

/// Trainable fusion layers; the branches they consume stay frozen.
#[derive(Debug, Clone)]
pub struct FusionLayers<T: Scalar = f32> {
    config: FusionConfig,
    pub pairwise: Vec<Linear<T>>,
    pub pairwise_merge: Option<Linear<T>>,
    pub mutual: Option<Linear<T>>,
    pub attention: Option<Linear<T>>,
    pub heads: Vec<Head<T>>,
    cache: Option<FusionCache<T>>,
}

impl<T: Scalar> FusionLayers<T> {
    pub fn new(config: FusionConfig, rng: &mut Rng) -> Result<Self> {
        let s = config.strategy;
        let c = config.channels;
        let e = config.embed_dim;
        if e == 0 || c.contains(&0) {
            return Err(Error::InvalidArgument("fusion widths must be positive".into()));
        }
        let pairwise = if s.uses_pairwise() {
            PAIRS.iter().map(|&(i, j)| Linear::new(c[i] + c[j], e, rng)).collect()
        } else {
            Vec::new()
        };
        let pairwise_merge = s.uses_pairwise().then(|| Linear::new(3 * e, e, rng));
        let mutual = s.uses_mutual().then(|| Linear::new(c.iter().sum(), e, rng));
        let attention = (s == Strategy::Attention).then(|| Linear::new(c.iter().sum(), 3, rng));
        let heads = if s.is_embedding() {
            config
                .classes()
                .iter()
                .map(|&k| Head::new(e, k, config.head_dropout, rng))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            config,
            pairwise,
            pairwise_merge,
            mutual,
            attention,
            heads,
            cache: None,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn strategy(&self) -> Strategy {
        self.config.strategy
    }

    fn check_input(&self, input: &[BranchSignals<T>; 3]) -> Result<usize> {
        let b = input[0].batch();
        for (m, sig) in input.iter().enumerate() {
            if sig.features.shape() != [b, self.config.channels[m]] {
                return Err(Error::shape(
                    "fuse_forward",
                    format!(
                        "{} features {:?}, expected [{b}, {}]",
                        MODALITY_NAMES[m],
                        sig.features.shape(),
                        self.config.channels[m]
                    ),
                ));
            }
            for (h, p) in sig.probs.iter().enumerate() {
                if p.shape() != [b, self.config.classes()[h]] {
                    return Err(Error::shape(
                        "fuse_forward",
                        format!("{} {} probs {:?}", MODALITY_NAMES[m], HEAD_NAMES[h], p.shape()),
                    ));
                }
            }
        }
        Ok(b)
    }

    /// Per-sample attention weights over the three modalities, `[B, 3]`.
    pub fn attention_weights(&self, input: &[BranchSignals<T>; 3]) -> Result<Tensor<T>> {
        let fc = self
            .attention
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("strategy has no attention layer".into()))?;
        let joint = concat(&[&input[0].features, &input[1].features, &input[2].features])?;
        let logits = fc.apply(&joint)?;
        Tensor::new(logits.shape().to_vec(), softmax_rows(logits.data(), 3))
    }

    fn mix(weights: &Tensor<T>, input: &[BranchSignals<T>; 3]) -> Result<[Tensor<T>; 3]> {
        let mix_head = |h: usize| -> Result<Tensor<T>> {
            let k = input[0].probs[h].dim(1);
            let mut out = vec![T::zero(); input[0].batch() * k];
            for (b, row) in out.chunks_exact_mut(k).enumerate() {
                for (m, sig) in input.iter().enumerate() {
                    let w = weights.data()[b * 3 + m];
                    T::axpy(w, &sig.probs[h].data()[b * k..(b + 1) * k], row);
                }
            }
            Tensor::new(vec![input[0].batch(), k], out)
        };
        Ok([mix_head(0)?, mix_head(1)?, mix_head(2)?])
    }

    fn embedding(&mut self, input: &[BranchSignals<T>; 3], cache: bool) -> Result<Tensor<T>> {
        let f = [&input[0].features, &input[1].features, &input[2].features];
        let mut h: Option<Tensor<T>> = None;
        if self.config.strategy.uses_pairwise() {
            let mut g = Vec::with_capacity(3);
            for (fc, &(i, j)) in self.pairwise.iter_mut().zip(&PAIRS) {
                let pair = concat(&[f[i], f[j]])?;
                g.push(if cache { fc.forward(&pair)? } else { fc.apply(&pair)? });
            }
            let merged = concat(&[&g[0], &g[1], &g[2]])?;
            let merge = self.pairwise_merge.as_mut().expect("pairwise merge layer");
            h = Some(if cache { merge.forward(&merged)? } else { merge.apply(&merged)? });
        }
        if self.config.strategy.uses_mutual() {
            let joint = concat(&f)?;
            let fc = self.mutual.as_mut().expect("mutual layer");
            let m = if cache { fc.forward(&joint)? } else { fc.apply(&joint)? };
            h = Some(match h {
                Some(p) => p.add(&m)?,
                None => m,
            });
        }
        Ok(h.expect("embedding strategy"))
    }

    /// Eval-mode fusion that leaves the layers untouched.
    pub fn infer(&self, input: &[BranchSignals<T>; 3]) -> Result<FusionOutput<T>> {
        self.clone().forward_inner(input, Mode::Eval, None, false)
    }

    pub fn forward(
        &mut self,
        input: &[BranchSignals<T>; 3],
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<FusionOutput<T>> {
        self.forward_inner(input, mode, rng, true)
    }

    fn forward_inner(
        &mut self,
        input: &[BranchSignals<T>; 3],
        mode: Mode,
        mut rng: Option<&mut Rng>,
        cache: bool,
    ) -> Result<FusionOutput<T>> {
        self.check_input(input)?;
        self.cache = None;
        let mut weights = None;
        let out = match self.config.strategy {
            Strategy::Late => FusionOutput {
                scores: [
                    late_fusion(&input[0].probs[0], &input[1].probs[0], &input[2].probs[0])?,
                    late_fusion(&input[0].probs[1], &input[1].probs[1], &input[2].probs[1])?,
                    late_fusion(&input[0].probs[2], &input[1].probs[2], &input[2].probs[2])?,
                ],
                kind: ScoreKind::Probabilities,
            },
            Strategy::Attention => {
                if cache {
                    let joint = concat(&[&input[0].features, &input[1].features, &input[2].features])?;
                    self.attention.as_mut().expect("attention layer").forward(&joint)?;
                }
                let w = self.attention_weights(input)?;
                let scores = Self::mix(&w, input)?;
                weights = Some(w);
                FusionOutput {
                    scores,
                    kind: ScoreKind::Probabilities,
                }
            }
            _ => {
                let h = self.embedding(input, cache)?;
                let mut scores = Vec::with_capacity(3);
                for head in &mut self.heads {
                    scores.push(if cache {
                        head.forward(&h, mode, rng.as_deref_mut())?
                    } else {
                        head.fc.apply(&h)?
                    });
                }
                let [a, v, n]: [Tensor<T>; 3] = scores.try_into().expect("three heads");
                FusionOutput {
                    scores: [a, v, n],
                    kind: ScoreKind::Logits,
                }
            }
        };
        if cache {
            self.cache = Some(FusionCache {
                input: input.clone(),
                weights,
            });
        }
        Ok(out)
    }

    /// Back-propagates score gradients into the fusion parameters and returns
    /// the gradients w.r.t. the three branch features.
    pub fn backward(&mut self, grads: &[Tensor<T>; 3]) -> Result<[Tensor<T>; 3]> {
        let cache = self.cache.take().ok_or(Error::MissingCache("fusion"))?;
        let input = &cache.input;
        let b = input[0].batch();
        let c = self.config.channels;
        let zeros = || [Tensor::zeros([b, c[0]]), Tensor::zeros([b, c[1]]), Tensor::zeros([b, c[2]])];
        match self.config.strategy {
            Strategy::Late => Ok(zeros()),
            Strategy::Attention => {
                let w = cache.weights.as_ref().expect("attention weights cached");
                // d loss / d w[b, m] = sum over heads and classes of g * p_m
                let mut dw = vec![T::zero(); b * 3];
                for (h, g) in grads.iter().enumerate() {
                    let k = g.dim(1);
                    for bi in 0..b {
                        let grow = &g.data()[bi * k..(bi + 1) * k];
                        for m in 0..3 {
                            dw[bi * 3 + m] += T::dot(grow, &input[m].probs[h].data()[bi * k..(bi + 1) * k]);
                        }
                    }
                }
                let mut dlogits = vec![T::zero(); b * 3];
                for bi in 0..b {
                    let wr = &w.data()[bi * 3..bi * 3 + 3];
                    let dr = &dw[bi * 3..bi * 3 + 3];
                    let inner = wr[0] * dr[0] + wr[1] * dr[1] + wr[2] * dr[2];
                    for m in 0..3 {
                        dlogits[bi * 3 + m] = wr[m] * (dr[m] - inner);
                    }
                }
                let dj = self
                    .attention
                    .as_mut()
                    .expect("attention layer")
                    .backward(&Tensor::new(vec![b, 3], dlogits)?)?;
                let [a, f, o]: [Tensor<T>; 3] = split(&dj, &c)?.try_into().expect("three parts");
                Ok([a, f, o])
            }
            _ => {
                let mut dh: Option<Tensor<T>> = None;
                for (head, g) in self.heads.iter_mut().zip(grads) {
                    let d = head.backward(g)?;
                    match &mut dh {
                        Some(acc) => acc.add_assign(&d)?,
                        None => dh = Some(d),
                    }
                }
                let dh = dh.expect("three heads");
                let mut df = zeros();
                if let Some(fc) = &mut self.mutual {
                    let dj = fc.backward(&dh)?;
                    for (acc, part) in df.iter_mut().zip(split(&dj, &c)?) {
                        acc.add_assign(&part)?;
                    }
                }
                if let Some(merge) = &mut self.pairwise_merge {
                    let e = self.config.embed_dim;
                    let dg = split(&merge.backward(&dh)?, &[e, e, e])?;
                    for ((fc, &(i, j)), g) in self.pairwise.iter_mut().zip(&PAIRS).zip(&dg) {
                        let dp = split(&fc.backward(g)?, &[c[i], c[j]])?;
                        df[i].add_assign(&dp[0])?;
                        df[j].add_assign(&dp[1])?;
                    }
                }
                Ok(df)
            }
        }
    }
}

/// Fusion objective summed over the action, verb and noun scores:
/// cross-entropy on logits, negative log-likelihood on mixed probabilities.
pub fn fusion_loss<T: Scalar>(
    out: &FusionOutput<T>,
    labels: &crate::branch::Labels,
) -> Result<(T, [Tensor<T>; 3])> {
    let label_sets = [&labels.action, &labels.verb, &labels.noun];
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(3);
    for ((scores, labels), head) in out.scores.iter().zip(label_sets).zip(HEAD_NAMES) {
        let (loss, grad) = match out.kind {
            ScoreKind::Logits => cross_entropy(scores, labels, head)?,
            ScoreKind::Probabilities => nll(scores, labels, head)?,
        };
        total += loss;
        grads.push(grad);
    }
    let [a, v, n]: [Tensor<T>; 3] = grads.try_into().expect("three heads");
    Ok((total, [a, v, n]))
}

fn nll<T: Scalar>(probs: &Tensor<T>, labels: &[usize], head: &'static str) -> Result<(T, Tensor<T>)> {
    let (b, k) = (probs.dim(0), probs.dim(1));
    if labels.len() != b {
        return Err(Error::shape("nll", format!("{b} rows, {} labels", labels.len())));
    }
    let tiny = T::from_f64(1e-12);
    let inv_b = T::one() / T::from_usize(b);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); b * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange {
                head,
                label: y,
                classes: k,
            });
        }
        let p = probs.data()[i * k + y].max(tiny);
        loss -= p.ln();
        grad[i * k + y] = -inv_b / p;
    }
    Ok((loss * inv_b, Tensor::new(vec![b, k], grad)?))
}

impl<T: Scalar> Module<T> for FusionLayers<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (fc, name) in self.pairwise.iter().zip(["rgb_flow", "rgb_obj", "flow_obj"]) {
            fc.visit(&join(prefix, &format!("pairwise.{name}")), f);
        }
        if let Some(l) = &self.pairwise_merge {
            l.visit(&join(prefix, "pairwise_merge"), f);
        }
        if let Some(l) = &self.mutual {
            l.visit(&join(prefix, "mutual"), f);
        }
        if let Some(l) = &self.attention {
            l.visit(&join(prefix, "attention"), f);
        }
        for (head, name) in self.heads.iter().zip(HEAD_NAMES) {
            head.visit(&join(prefix, &format!("heads.{name}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        for (fc, name) in self.pairwise.iter_mut().zip(["rgb_flow", "rgb_obj", "flow_obj"]) {
            fc.visit_mut(&join(prefix, &format!("pairwise.{name}")), f);
        }
        if let Some(l) = &mut self.pairwise_merge {
            l.visit_mut(&join(prefix, "pairwise_merge"), f);
        }
        if let Some(l) = &mut self.mutual {
            l.visit_mut(&join(prefix, "mutual"), f);
        }
        if let Some(l) = &mut self.attention {
            l.visit_mut(&join(prefix, "attention"), f);
        }
        for (head, name) in self.heads.iter_mut().zip(HEAD_NAMES) {
            head.visit_mut(&join(prefix, &format!("heads.{name}")), f);
        }
    }
}

/// Three frozen branches and the fusion layers on top of them.
#[derive(Debug, Clone)]
pub struct FusionModel<T: Scalar = f32> {
    branches: [Branch<T>; 3],
    pub layers: FusionLayers<T>,
}

impl<T: Scalar> FusionModel<T> {
    pub fn new(branches: [Branch<T>; 3], strategy: Strategy, embed_dim: usize, head_dropout: f64, rng: &mut Rng) -> Result<Self> {
        let cfg0 = branches[0].config();
        for b in &branches[1..] {
            let c = b.config();
            if (c.num_actions, c.num_verbs, c.num_nouns) != (cfg0.num_actions, cfg0.num_verbs, cfg0.num_nouns) {
                return Err(Error::InvalidArgument(
                    "branches disagree on class counts".into(),
                ));
            }
        }
        let config = FusionConfig {
            strategy,
            embed_dim,
            head_dropout,
            channels: [
                branches[0].config().channels,
                branches[1].config().channels,
                branches[2].config().channels,
            ],
            num_actions: cfg0.num_actions,
            num_verbs: cfg0.num_verbs,
            num_nouns: cfg0.num_nouns,
        };
        Ok(Self {
            layers: FusionLayers::new(config, rng)?,
            branches,
        })
    }

    pub fn from_parts(branches: [Branch<T>; 3], layers: FusionLayers<T>) -> Self {
        Self { branches, layers }
    }

    pub fn branches(&self) -> &[Branch<T>; 3] {
        &self.branches
    }

    pub fn strategy(&self) -> Strategy {
        self.layers.strategy()
    }

    /// Runs the frozen branches (eval mode) on per-modality `[B, D_m, N]` inputs.
    pub fn signals(&self, x: [&Tensor<T>; 3]) -> Result<[BranchSignals<T>; 3]> {
        Ok([
            BranchSignals::from_branch(&self.branches[0], x[0])?,
            BranchSignals::from_branch(&self.branches[1], x[1])?,
            BranchSignals::from_branch(&self.branches[2], x[2])?,
        ])
    }

    pub fn infer(&self, x: [&Tensor<T>; 3]) -> Result<FusionOutput<T>> {
        self.layers.infer(&self.signals(x)?)
    }

    /// Hash of every branch tensor (parameters and running statistics).
    pub fn branch_hash(&self) -> u64 {
        self.branches
            .iter()
            .map(crate::nn::state_hash)
            .fold(0u64, |h, x| h.rotate_left(21) ^ x)
    }
}

impl<T: Scalar> Module<T> for FusionModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (b, name) in self.branches.iter().zip(MODALITY_NAMES) {
            b.visit(&join(prefix, name), f);
        }
        self.layers.visit(&join(prefix, "fusion"), f);
    }

    /// Branch tensors are exposed as buffers: they are never trained here.
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        for (b, name) in self.branches.iter_mut().zip(MODALITY_NAMES) {
            b.visit_mut(&join(prefix, name), &mut |n, slot| match slot {
                Slot::Param { value, .. } => f(n, Slot::Buffer(value)),
                buffer => f(n, buffer),
            });
        }
        self.layers.visit_mut(&join(prefix, "fusion"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branch::{BranchConfig, Labels};
    use crate::nn::gradcheck::{check_input_gradient, check_module, GRADCHECK_TOL};

    fn random_signals(rng: &mut Rng, b: usize, c: usize, classes: [usize; 3]) -> [BranchSignals<f64>; 3] {
        let mut one = || {
            let features = Tensor::normal(rng, 0.0, 1.0, [b, c]).unwrap().relu().unwrap();
            let probs = classes.map(|k| {
                let l = Tensor::<f64>::normal(rng, 0.0, 1.0, [b, k]).unwrap();
                Tensor::new(vec![b, k], softmax_rows(l.data(), k)).unwrap()
            });
            BranchSignals { features, probs }
        };
        [one(), one(), one()]
    }

    fn cfg(strategy: Strategy, c: usize, e: usize) -> FusionConfig {
        FusionConfig {
            embed_dim: e,
            head_dropout: 0.3,
            ..FusionConfig::new(strategy, [c; 3], [5, 3, 4])
        }
    }

    #[test]
    fn late_fusion_examples() {
        let p = |v: &[f64]| Tensor::new(vec![1, v.len()], v.to_vec()).unwrap();
        let d = p(&[0.2, 0.5, 0.3]);
        let same = late_fusion(&d, &d, &d).unwrap();
        for (a, b) in same.data().iter().zip(d.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let out = late_fusion(&p(&[1.0, 0.0]), &p(&[0.0, 1.0]), &p(&[1.0, 0.0])).unwrap();
        assert!((out.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((out.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let swapped = late_fusion(&p(&[1.0, 0.0]), &p(&[1.0, 0.0]), &p(&[0.0, 1.0])).unwrap();
        assert_eq!(swapped, out);
        assert!(late_fusion(&p(&[0.5, 0.6]), &d, &d).is_err());
    }

    #[test]
    fn zero_attention_equals_late_and_saturated_picks_one() {
        let mut rng = Rng::new(1);
        let sig = random_signals(&mut rng, 3, 4, [5, 3, 4]);
        let mut layers = FusionLayers::<f64>::new(cfg(Strategy::Attention, 4, 8), &mut rng).unwrap();
        let att = layers.attention.as_mut().unwrap();
        att.weight.fill(0.0);
        att.bias.fill(0.0);
        let out = layers.infer(&sig).unwrap();
        let late = late_fusion(&sig[0].probs[0], &sig[1].probs[0], &sig[2].probs[0]).unwrap();
        for (a, b) in out.scores[0].data().iter().zip(late.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let att = layers.attention.as_mut().unwrap();
        att.bias = Tensor::new(vec![3], vec![0.0, 800.0, 0.0]).unwrap();
        let out = layers.infer(&sig).unwrap();
        assert_eq!(out.scores[1], sig[1].probs[1]);
        for row in out.scores[2].data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn additive_path_decomposition() {
        let mut rng = Rng::new(2);
        let sig = random_signals(&mut rng, 2, 6, [5, 3, 4]);
        let both = FusionLayers::<f64>::new(cfg(Strategy::MutualPairwise, 6, 10), &mut rng).unwrap();

        let mut zero_pair = both.clone();
        for l in zero_pair.pairwise.iter_mut().chain(zero_pair.pairwise_merge.as_mut()) {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let mut mutual = FusionLayers::<f64>::new(cfg(Strategy::Mutual, 6, 10), &mut rng).unwrap();
        mutual.mutual = both.mutual.clone();
        mutual.heads = both.heads.clone();
        assert_eq!(zero_pair.infer(&sig).unwrap(), mutual.infer(&sig).unwrap());

        let mut zero_mut = both.clone();
        let m = zero_mut.mutual.as_mut().unwrap();
        m.weight.fill(0.0);
        m.bias.fill(0.0);
        let mut pairwise = FusionLayers::<f64>::new(cfg(Strategy::Pairwise, 6, 10), &mut rng).unwrap();
        pairwise.pairwise = both.pairwise.clone();
        pairwise.pairwise_merge = both.pairwise_merge.clone();
        pairwise.heads = both.heads.clone();
        assert_eq!(zero_mut.infer(&sig).unwrap(), pairwise.infer(&sig).unwrap());
    }

    #[test]
    fn gradcheck_trainable_strategies() {
        let labels = Labels {
            action: vec![1, 4],
            verb: vec![0, 2],
            noun: vec![3, 1],
        };
        for (seed, strategy) in [Strategy::Attention, Strategy::Mutual, Strategy::Pairwise, Strategy::MutualPairwise]
            .into_iter()
            .enumerate()
        {
            let mut rng = Rng::new(seed as u64 + 10);
            let sig = random_signals(&mut rng, 2, 8, [5, 3, 4]);
            let mut layers = FusionLayers::<f64>::new(cfg(strategy, 8, 16), &mut rng).unwrap();
            let masks = rng.clone();
            let loss = |l: &mut FusionLayers<f64>, s: &[BranchSignals<f64>; 3]| -> Result<f64> {
                let out = l.forward(s, Mode::Train, Some(&mut masks.clone()))?;
                Ok(fusion_loss(&out, &labels)?.0)
            };
            let grads = |l: &mut FusionLayers<f64>| -> Result<[Tensor<f64>; 3]> {
                let out = l.forward(&sig, Mode::Train, Some(&mut masks.clone()))?;
                let (_, g) = fusion_loss(&out, &labels)?;
                l.backward(&g)
            };
            let report = check_module(&mut layers, |l| loss(l, &sig), |l| grads(l).map(|_| ())).unwrap();
            assert!(report.max_rel_error() < GRADCHECK_TOL, "{strategy}: {report:#?}");
            let df = grads(&mut layers).unwrap();
            for m in 0..3 {
                let worst = check_input_gradient(&sig[m].features, &df[m], |f| {
                    let mut s = sig.clone();
                    s[m].features = f.clone();
                    loss(&mut layers.clone(), &s)
                })
                .unwrap();
                assert!(worst < GRADCHECK_TOL, "{strategy} modality {m}: {worst}");
            }
        }
    }

    #[test]
    fn model_checks_shapes_and_freezes_branches() {
        let mut rng = Rng::new(3);
        let bc = BranchConfig {
            channels: 4,
            dilations: vec![1],
            ..BranchConfig::new(2, 5, 3, 4)
        };
        let branches = [
            Branch::<f64>::new(bc.clone(), &mut rng).unwrap(),
            Branch::new(bc.clone(), &mut rng).unwrap(),
            Branch::new(bc, &mut rng).unwrap(),
        ];
        let mut model = FusionModel::new(branches, Strategy::MutualPairwise, 8, 0.5, &mut rng).unwrap();
        let x = Tensor::normal(&mut rng, 0.0, 1.0, [2, 2, 3]).unwrap();
        let out = model.infer([&x, &x, &x]).unwrap();
        for p in out.probabilities().unwrap() {
            for row in p.data().chunks(p.dim(1)) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let mut params = 0;
        model.visit_mut("", &mut |name, slot| {
            if let Slot::Param { .. } = slot {
                assert!(name.starts_with("fusion."), "{name} is trainable");
                params += 1;
            }
        });
        assert!(params > 0);
        let bad = Tensor::normal(&mut rng, 0.0, 1.0, [2, 3, 3]).unwrap();
        assert!(model.infer([&x, &bad, &x]).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(Strategy::from_code(s.code()), Some(s));
        }
        assert!("sum".parse::<Strategy>().is_err());
    }
}
