//! Finite-difference gradient suite over random layer configurations.

use std::fmt;

use rand::Rng as _;

use crate::bench::{LstmBaseline, LstmConfig};
use crate::branch::{branch_loss, Branch, BranchConfig, Labels, LossWeights};
use crate::error::{Error, Result};
use crate::fusion::{fusion_loss, BranchSignals, FusionConfig, FusionLayers, Strategy};
use crate::nn::gradcheck::{check_input_gradient, check_module, input_smooth_in_band, smooth_in_band, GRADCHECK_TOL};
use crate::nn::{cross_entropy, Module, Slot, relu_backward, relu_forward, BatchNorm1d, Conv1d, Linear, Mode, SpatialDropout};
use crate::tensor::{softmax_rows, Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub layer: String,
    pub configs: usize,
    /// Random configurations discarded because a ReLU kink lay within the
    /// finite-difference band.
    pub rejected: usize,
    /// Parameter and input entries perturbed across all configurations.
    pub entries: usize,
    pub max_rel_error: f64,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSuite {
    pub layers: Vec<LayerCheck>,
}

impl GradientSuite {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(LayerCheck::passed)
    }

    pub const CSV_HEADER: &'static str = "layer,configs,rejected,entries,max_rel_error,passed";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{:.3e},{}\n",
                l.layer,
                l.configs,
                l.rejected,
                l.entries,
                l.max_rel_error,
                l.passed()
            ));
        }
        out
    }
}

impl fmt::Display for GradientSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>8} {:>9} {:>9} {:>14}",
            "layer", "configs", "rejected", "entries", "max rel err"
        )?;
        for l in &self.layers {
            let verdict = if l.passed() { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<24} {:>8} {:>9} {:>9} {:>14.3e}  {verdict}",
                l.layer, l.configs, l.rejected, l.entries, l.max_rel_error
            )?;
        }
        Ok(())
    }
}

fn weighted_sum(y: &Tensor<f64>, probe: &Tensor<f64>) -> f64 {
    y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
}

fn normal(rng: &mut Rng, shape: Vec<usize>) -> Result<Tensor<f64>> {
    Tensor::normal(rng, 0.0, 1.0, shape)
}

struct Acc {
    layer: String,
    configs: usize,
    rejected: usize,
    entries: usize,
    worst: f64,
}

impl Acc {
    fn new(layer: &str) -> Self {
        Self {
            layer: layer.to_string(),
            configs: 0,
            rejected: 0,
            entries: 0,
            worst: 0.0,
        }
    }

    fn add(&mut self, entries: usize, err: f64) {
        self.entries += entries;
        self.worst = self.worst.max(err);
    }

    fn finish(self) -> LayerCheck {
        LayerCheck {
            layer: self.layer,
            configs: self.configs,
            rejected: self.rejected,
            entries: self.entries,
            max_rel_error: self.worst,
        }
    }
}

fn conv(rng: &mut Rng, acc: &mut Acc) -> Result<bool> {
    let (ci, co, k, d) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
    let b = rng.random_range(1..3);
    let mut layer = Conv1d::<f64>::new(ci, co, k, d, rng);
    let n = layer.span() + rng.random_range(0..3);
    let x = normal(rng, vec![b, ci, n])?;
    let probe = normal(rng, vec![b, co, layer.output_len(n)?])?;
    let report = check_module(
        &mut layer,
        |l| Ok(weighted_sum(&l.apply(&x)?, &probe)),
        |l| {
            l.forward(&x)?;
            l.backward(&probe).map(|_| ())
        },
    )?;
    layer.forward(&x)?;
    let gx = layer.backward(&probe)?;
    let input = check_input_gradient(&x, &gx, |xi| Ok(weighted_sum(&layer.apply(xi)?, &probe)))?;
    acc.add(report.entries() + x.len(), report.max_rel_error().max(input));
    Ok(true)
}

fn batchnorm(rng: &mut Rng, acc: &mut Acc, index: usize) -> Result<bool> {
    let mode = if index % 2 == 0 { Mode::Train } else { Mode::Eval };
    let (b, c, n) = (rng.random_range(2..4), rng.random_range(1..5), rng.random_range(2..6));
    let mut bn = BatchNorm1d::<f64>::new(c);
    bn.gamma = Tensor::normal(rng, 1.0, 0.5, [c])?;
    bn.beta = normal(rng, vec![c])?;
    bn.running_mean = normal(rng, vec![c])?;
    bn.running_var = Tensor::uniform(rng, 0.5, 2.0, [c])?;
    let x = normal(rng, vec![b, c, n])?;
    let probe = normal(rng, vec![b, c, n])?;
    // Squaring the output keeps the train-mode loss from being invariant to the input.
    let loss = |m: &BatchNorm1d<f64>, x: &Tensor<f64>| -> Result<f64> {
        let y = m.clone().forward(x, mode)?;
        Ok(y.data().iter().zip(probe.data()).map(|(a, p)| a * a * p).sum())
    };
    let upstream = |m: &mut BatchNorm1d<f64>, x: &Tensor<f64>| -> Result<Tensor<f64>> {
        let y = m.forward(x, mode)?;
        let g = y.data().iter().zip(probe.data()).map(|(a, p)| 2.0 * a * p).collect();
        m.backward(&Tensor::new(y.shape().to_vec(), g)?)
    };
    let report = check_module(&mut bn, |m| loss(m, &x), |m| upstream(m, &x).map(|_| ()))?;
    let gx = upstream(&mut bn.clone(), &x)?;
    let input = check_input_gradient(&x, &gx, |xi| loss(&bn, xi))?;
    acc.add(report.entries() + x.len(), report.max_rel_error().max(input));
    Ok(true)
}

fn dropout(rng: &mut Rng, acc: &mut Acc) -> Result<bool> {
    let p = rng.random_range(0.1..0.8);
    let (b, c, n) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..5));
    let x = normal(rng, vec![b, c, n])?;
    let probe = normal(rng, vec![b, c, n])?;
    let draw = rng.fork();
    let mut layer = SpatialDropout::<f64>::new(p)?;
    layer.forward(&x, Mode::Train, Some(&mut draw.clone()))?;
    let gx = layer.backward(&probe)?;
    let input = check_input_gradient(&x, &gx, |xi| {
        let y = layer.clone().forward(xi, Mode::Train, Some(&mut draw.clone()))?;
        Ok(weighted_sum(&y, &probe))
    })?;
    acc.add(x.len(), input);
    Ok(true)
}

fn linear(rng: &mut Rng, acc: &mut Acc) -> Result<bool> {
    let (di, d_out, b) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..4));
    let mut layer = Linear::<f64>::new(di, d_out, rng);
    let x = normal(rng, vec![b, di])?;
    let probe = normal(rng, vec![b, d_out])?;
    let report = check_module(
        &mut layer,
        |l| Ok(weighted_sum(&l.apply(&x)?, &probe)),
        |l| {
            l.forward(&x)?;
            l.backward(&probe).map(|_| ())
        },
    )?;
    layer.forward(&x)?;
    let gx = layer.backward(&probe)?;
    let input = check_input_gradient(&x, &gx, |xi| Ok(weighted_sum(&layer.apply(xi)?, &probe)))?;
    acc.add(report.entries() + x.len(), report.max_rel_error().max(input));
    Ok(true)
}

fn relu(rng: &mut Rng, acc: &mut Acc) -> Result<bool> {
    let shape = vec![rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5)];
    // Keep inputs clear of the kink so central differences are exact.
    let x = Tensor::from_fn(shape.clone(), |_| {
        let v: f64 = rng.random_range(0.05..2.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let probe = normal(rng, shape)?;
    let y = relu_forward(&x)?;
    let gx = relu_backward(&y, &probe)?;
    let input = check_input_gradient(&x, &gx, |xi| Ok(weighted_sum(&relu_forward(xi)?, &probe)))?;
    acc.add(x.len(), input);
    Ok(true)
}

fn softmax_ce(rng: &mut Rng, acc: &mut Acc) -> Result<bool> {
    let (b, k) = (rng.random_range(1..5), rng.random_range(2..7));
    let logits = Tensor::normal(rng, 0.0, 2.0, [b, k])?;
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    let (_, g) = cross_entropy(&logits, &labels, "ce")?;
    let input = check_input_gradient(&logits, &g, |l| Ok(cross_entropy(l, &labels, "ce")?.0))?;
    acc.add(logits.len(), input);
    Ok(true)
}

fn random_labels(rng: &mut Rng, b: usize, classes: [usize; 3]) -> Labels {
    let mut draw = |k: usize| (0..b).map(|_| rng.random_range(0..k)).collect::<Vec<_>>();
    Labels {
        action: draw(classes[0]),
        verb: draw(classes[1]),
        noun: draw(classes[2]),
    }
}

fn branch(rng: &mut Rng, acc: &mut Acc) -> Result<bool> {
    let max_layers = rng.random_range(1..4);
    let dilations: Vec<usize> = (0..max_layers).map(|_| rng.random_range(1..4)).collect();
    let classes = [rng.random_range(2..6), rng.random_range(2..4), rng.random_range(2..4)];
    let config = BranchConfig {
        input_dim: rng.random_range(1..4),
        channels: rng.random_range(2..6),
        kernel: rng.random_range(2..4),
        dilations,
        input_dropout: rng.random_range(0.0..0.5),
        block_dropout: rng.random_range(0.0..0.5),
        head_dropout: rng.random_range(0.0..0.5),
        num_actions: classes[0],
        num_verbs: classes[1],
        num_nouns: classes[2],
    };
    let n = config.required_input_length() + rng.random_range(0..3);
    let b = rng.random_range(2..4);
    let mut model = Branch::<f64>::new(config.clone(), rng)?;
    // Zero-initialised shifts put ReLU inputs exactly on the kink whenever
    // dropout makes a batch-norm input constant; random affine parameters
    // keep the check at a differentiable point.
    model.visit_mut("", &mut |name, slot| {
        if let Slot::Param { value, .. } = slot {
            let mean = if name.ends_with("bn.gamma") { 1.0 } else { 0.0 };
            if name.contains(".bn.") {
                for v in value.data_mut() {
                    *v = mean + 0.5 * rng.random_range(-1.0..1.0);
                }
            }
        }
    });
    let x = normal(rng, vec![b, config.input_dim, n])?;
    let labels = random_labels(rng, b, classes);
    let masks = rng.fork();
    let loss = |m: &mut Branch<f64>, x: &Tensor<f64>| -> Result<f64> {
        let out = m.forward(x, Mode::Train, Some(&mut masks.clone()))?;
        Ok(branch_loss(&out.action, &out.verb, &out.noun, &labels, LossWeights::default())?.0)
    };
    let grads = |m: &mut Branch<f64>| -> Result<Tensor<f64>> {
        let out = m.forward(&x, Mode::Train, Some(&mut masks.clone()))?;
        let (_, g) = branch_loss(&out.action, &out.verb, &out.noun, &labels, LossWeights::default())?;
        m.backward(&g)
    };
    if !smooth_in_band(&mut model, |m| loss(m, &x))? || !input_smooth_in_band(&x, |xi| loss(&mut model.clone(), xi))? {
        return Ok(false);
    }
    let report = check_module(&mut model, |m| loss(m, &x), |m| grads(m).map(|_| ()))?;
    let gx = grads(&mut model)?;
    let input = check_input_gradient(&x, &gx, |xi| loss(&mut model.clone(), xi))?;
    acc.add(report.entries() + x.len(), report.max_rel_error().max(input));
    Ok(true)
}

fn fusion(rng: &mut Rng, acc: &mut Acc, strategy: Strategy) -> Result<bool> {
    let b = rng.random_range(1..4);
    let channels = [rng.random_range(2..7), rng.random_range(2..7), rng.random_range(2..7)];
    let classes = [rng.random_range(2..6), rng.random_range(2..5), rng.random_range(2..5)];
    let config = FusionConfig {
        embed_dim: rng.random_range(2..9),
        head_dropout: rng.random_range(0.0..0.5),
        ..FusionConfig::new(strategy, channels, classes)
    };
    let mut one = |c: usize| -> Result<BranchSignals<f64>> {
        let features = normal(rng, vec![b, c])?.relu()?;
        let mut prob = |k: usize| -> Result<Tensor<f64>> {
            let l = normal(rng, vec![b, k])?;
            Tensor::new(vec![b, k], softmax_rows(l.data(), k))
        };
        let probs = [prob(classes[0])?, prob(classes[1])?, prob(classes[2])?];
        Ok(BranchSignals { features, probs })
    };
    let signals = [one(channels[0])?, one(channels[1])?, one(channels[2])?];
    let mut layers = FusionLayers::<f64>::new(config, rng)?;
    let labels = random_labels(rng, b, classes);
    let masks = rng.fork();
    let loss = |l: &mut FusionLayers<f64>, s: &[BranchSignals<f64>; 3]| -> Result<f64> {
        let out = l.forward(s, Mode::Train, Some(&mut masks.clone()))?;
        Ok(fusion_loss(&out, &labels)?.0)
    };
    let grads = |l: &mut FusionLayers<f64>| -> Result<[Tensor<f64>; 3]> {
        let out = l.forward(&signals, Mode::Train, Some(&mut masks.clone()))?;
        let (_, g) = fusion_loss(&out, &labels)?;
        l.backward(&g)
    };
    if !smooth_in_band(&mut layers, |l| loss(l, &signals))? {
        return Ok(false);
    }
    for m in 0..3 {
        let smooth = input_smooth_in_band(&signals[m].features, |f| {
            let mut s = signals.clone();
            s[m].features = f.clone();
            loss(&mut layers.clone(), &s)
        })?;
        if !smooth {
            return Ok(false);
        }
    }
    let report = check_module(&mut layers, |l| loss(l, &signals), |l| grads(l).map(|_| ()))?;
    let df = grads(&mut layers)?;
    let mut worst = report.max_rel_error();
    let mut entries = report.entries();
    for m in 0..3 {
        worst = worst.max(check_input_gradient(&signals[m].features, &df[m], |f| {
            let mut s = signals.clone();
            s[m].features = f.clone();
            loss(&mut layers.clone(), &s)
        })?);
        entries += signals[m].features.len();
    }
    acc.add(entries, worst);
    Ok(true)
}

fn lstm(rng: &mut Rng, acc: &mut Acc) -> Result<bool> {
    let config = LstmConfig {
        input_dim: rng.random_range(1..4),
        hidden: rng.random_range(1..5),
        decoder_steps: rng.random_range(1..4),
        num_classes: rng.random_range(2..5),
    };
    let (b, n) = (rng.random_range(1..3), rng.random_range(1..5));
    let mut model = LstmBaseline::<f64>::new(config.clone(), rng)?;
    let x = normal(rng, vec![b, config.input_dim, n])?;
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..config.num_classes)).collect();
    let report = check_module(
        &mut model,
        |m| Ok(cross_entropy(&m.infer(&x)?, &labels, "action")?.0),
        |m| {
            let logits = m.forward(&x)?;
            m.backward(&cross_entropy(&logits, &labels, "action")?.1).map(|_| ())
        },
    )?;
    let logits = model.forward(&x)?;
    let gx = model.backward(&cross_entropy(&logits, &labels, "action")?.1)?;
    let input = check_input_gradient(&x, &gx, |xi| Ok(cross_entropy(&model.infer(xi)?, &labels, "action")?.0))?;
    acc.add(report.entries() + x.len(), report.max_rel_error().max(input));
    Ok(true)
}

const MAX_REJECTED: usize = 5;

/// Checks every layer, the full branch, each trainable fusion strategy and the
/// recurrent baseline on `configs` random configurations apiece.
pub fn gradient_suite(configs: usize, seed: u64) -> Result<GradientSuite> {
    let mut rng = Rng::new(seed);
    let mut layers = Vec::new();
    let mut run = |name: &str, f: &mut dyn FnMut(&mut Rng, &mut Acc, usize) -> Result<bool>| -> Result<()> {
        let mut acc = Acc::new(name);
        let mut local = rng.fork();
        while acc.configs < configs {
            let attempt = acc.configs + acc.rejected;
            if f(&mut local, &mut acc, attempt)? {
                acc.configs += 1;
            } else {
                acc.rejected += 1;
                if acc.rejected > MAX_REJECTED * configs.max(1) {
                    return Err(Error::InvalidArgument(format!(
                        "{name}: {} random configurations hit a non-smooth point",
                        acc.rejected
                    )));
                }
            }
        }
        layers.push(acc.finish());
        Ok(())
    };
    run("conv1d", &mut |r, a, _| conv(r, a))?;
    run("batchnorm", &mut |r, a, i| batchnorm(r, a, i))?;
    run("spatial_dropout", &mut |r, a, _| dropout(r, a))?;
    run("linear", &mut |r, a, _| linear(r, a))?;
    run("relu", &mut |r, a, _| relu(r, a))?;
    run("softmax_ce", &mut |r, a, _| softmax_ce(r, a))?;
    run("branch", &mut |r, a, _| branch(r, a))?;
    for s in Strategy::ALL.into_iter().filter(|s| s.is_trainable()) {
        run(&format!("fusion.{}", s.name()), &mut |r, a, _| fusion(r, a, s))?;
    }
    run("lstm_baseline", &mut |r, a, _| lstm(r, a))?;
    Ok(GradientSuite { layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let suite = gradient_suite(3, 9).unwrap();
        assert_eq!(suite.layers.len(), 12);
        assert!(suite.passed(), "{suite}");
        assert!(suite.layers.iter().all(|l| l.configs == 3 && l.entries > 0));
        assert_eq!(suite.to_csv().lines().count(), 13);
    }
}
