//! Wall-clock timing of inference and training steps.

use std::fmt;
use std::time::Instant;

use super::lstm::{LstmBaseline, LstmConfig};
use super::macs::{lstm_macs, tcn_macs, MacCount};
use crate::branch::{branch_loss, Branch, BranchConfig, Labels, LossWeights};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, zero_grad, Mode};
use crate::tensor::{Rng, Tensor};
use crate::train::Sgd;

pub const MIN_WARMUP: usize = 5;
pub const MIN_REPS: usize = 30;

/// Each repetition is widened to at least this many seconds by repeating the
/// operation, so coarse timers still resolve it.
pub const MIN_REP_SECONDS: f64 = 2e-3;

const GROUPS: usize = 5;

/// Seconds per call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub mean: f64,
    pub std: f64,
    pub median_of_means: f64,
    pub reps: usize,
    pub calls_per_rep: usize,
}

impl Timing {
    fn from_samples(samples: &[f64], calls_per_rep: usize) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let size = samples.len().div_ceil(GROUPS);
        let mut means: Vec<f64> = samples
            .chunks(size)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        means.sort_by(f64::total_cmp);
        let mid = means.len() / 2;
        let median_of_means = if means.len() % 2 == 1 {
            means[mid]
        } else {
            0.5 * (means[mid - 1] + means[mid])
        };
        Self {
            mean,
            std: var.sqrt(),
            median_of_means,
            reps: samples.len(),
            calls_per_rep,
        }
    }
}

/// Times `op` after `warmup` discarded calls.
pub fn time_op(mut op: impl FnMut() -> Result<()>, warmup: usize, reps: usize) -> Result<Timing> {
    if warmup < MIN_WARMUP || reps < MIN_REPS {
        return Err(Error::InvalidArgument(format!(
            "benchmarks need at least {MIN_WARMUP} warm-up calls and {MIN_REPS} repetitions, got {warmup} and {reps}"
        )));
    }
    for _ in 0..warmup {
        op()?;
    }
    let start = Instant::now();
    op()?;
    let once = start.elapsed().as_secs_f64();
    let calls = if once >= MIN_REP_SECONDS {
        1
    } else {
        (MIN_REP_SECONDS / once.max(1e-9)).ceil() as usize
    };
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        for _ in 0..calls {
            op()?;
        }
        samples.push(start.elapsed().as_secs_f64() / calls as f64);
    }
    Ok(Timing::from_samples(&samples, calls))
}

/// A model the bench can time. Inputs are `[B, input_dim, N]` in f32.
pub trait BenchModel {
    fn name(&self) -> &str;
    fn input_dim(&self) -> usize;
    fn width(&self) -> usize;
    /// Class counts of the action, verb and noun heads.
    fn classes(&self) -> [usize; 3];
    fn macs(&self, snippets: usize) -> Result<MacCount>;
    fn infer(&self, x: &Tensor<f32>) -> Result<()>;
    fn train_step(&mut self, x: &Tensor<f32>, labels: &Labels) -> Result<()>;
}

const BENCH_LR: f64 = 1e-4;

pub struct TcnBench {
    name: String,
    branch: Branch<f32>,
    sgd: Sgd<f32>,
    rng: Rng,
}

impl TcnBench {
    pub fn new(name: impl Into<String>, config: BranchConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        Ok(Self {
            name: name.into(),
            branch: Branch::new(config, &mut rng.fork())?,
            sgd: Sgd::new(0.9, 5e-4),
            rng,
        })
    }
}

impl BenchModel for TcnBench {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_dim(&self) -> usize {
        self.branch.config().input_dim
    }

    fn width(&self) -> usize {
        self.branch.config().channels
    }

    fn classes(&self) -> [usize; 3] {
        let c = self.branch.config();
        [c.num_actions, c.num_verbs, c.num_nouns]
    }

    fn macs(&self, snippets: usize) -> Result<MacCount> {
        tcn_macs(self.branch.config(), snippets)
    }

    fn infer(&self, x: &Tensor<f32>) -> Result<()> {
        self.branch.infer(x).map(|_| ())
    }

    fn train_step(&mut self, x: &Tensor<f32>, labels: &Labels) -> Result<()> {
        zero_grad(&mut self.branch);
        let out = self.branch.forward(x, Mode::Train, Some(&mut self.rng))?;
        let (_, grads) = branch_loss(&out.action, &out.verb, &out.noun, labels, LossWeights::default())?;
        self.branch.backward(&grads)?;
        self.sgd.step(&mut self.branch, BENCH_LR)
    }
}

pub struct LstmBench {
    name: String,
    model: LstmBaseline<f32>,
    sgd: Sgd<f32>,
}

impl LstmBench {
    pub fn new(name: impl Into<String>, config: LstmConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            model: LstmBaseline::new(config, &mut Rng::new(seed))?,
            sgd: Sgd::new(0.9, 5e-4),
        })
    }
}

impl BenchModel for LstmBench {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_dim(&self) -> usize {
        self.model.config().input_dim
    }

    fn width(&self) -> usize {
        self.model.config().hidden
    }

    fn classes(&self) -> [usize; 3] {
        let a = self.model.config().num_classes;
        [a, a, a]
    }

    fn macs(&self, snippets: usize) -> Result<MacCount> {
        Ok(lstm_macs(self.model.config(), snippets))
    }

    fn infer(&self, x: &Tensor<f32>) -> Result<()> {
        self.model.infer(x).map(|_| ())
    }

    fn train_step(&mut self, x: &Tensor<f32>, labels: &Labels) -> Result<()> {
        zero_grad(&mut self.model);
        let logits = self.model.forward(x)?;
        let (_, grad) = cross_entropy(&logits, &labels.action, "action")?;
        self.model.backward(&grad)?;
        self.sgd.step(&mut self.model, BENCH_LR)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBench {
    pub name: String,
    pub macs: MacCount,
    pub batch: usize,
    pub inference: Timing,
    pub train_step: Timing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub models: Vec<ModelBench>,
    pub snippets: usize,
    pub warmup: usize,
    pub hardware: String,
}

impl BenchReport {
    pub fn model(&self, name: &str) -> Option<&ModelBench> {
        self.models.iter().find(|m| m.name == name)
    }

    /// `(inference, training)` time ratios `baseline / candidate`.
    pub fn speedup(&self, baseline: &str, candidate: &str) -> Option<(f64, f64)> {
        let (b, c) = (self.model(baseline)?, self.model(candidate)?);
        Some((
            b.inference.median_of_means / c.inference.median_of_means,
            b.train_step.median_of_means / c.train_step.median_of_means,
        ))
    }

    pub const CSV_HEADER: &'static str = "model,sequence_macs,head_macs,batch,snippets,reps,warmup,\
infer_mean_s,infer_std_s,infer_median_of_means_s,train_mean_s,train_std_s,train_median_of_means_s";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for m in &self.models {
            let (i, t) = (&m.inference, &m.train_step);
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}\n",
                m.name,
                m.macs.sequence,
                m.macs.heads,
                m.batch,
                self.snippets,
                i.reps,
                self.warmup,
                i.mean,
                i.std,
                i.median_of_means,
                t.mean,
                t.std,
                t.median_of_means
            ));
        }
        out
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "hardware: {}", self.hardware)?;
        writeln!(
            f,
            "{:<8} {:>14} {:>6} {:>22} {:>22}",
            "model", "MACs/sample", "batch", "inference s/batch", "train step s/batch"
        )?;
        for m in &self.models {
            writeln!(
                f,
                "{:<8} {:>14} {:>6} {:>12.4e} ±{:>8.1e} {:>12.4e} ±{:>8.1e}",
                m.name,
                m.macs.sequence,
                m.batch,
                m.inference.median_of_means,
                m.inference.std,
                m.train_step.median_of_means,
                m.train_step.std
            )?;
        }
        if let [base, rest @ ..] = self.models.as_slice() {
            for m in rest {
                if let Some((inf, tr)) = self.speedup(&base.name, &m.name) {
                    writeln!(f, "speedup {}/{}: inference {inf:.2}x, train step {tr:.2}x", base.name, m.name)?;
                }
            }
        }
        Ok(())
    }
}

pub fn hardware_note() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{cpu}; {}-{}; {threads} hardware threads available, timed on one",
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

/// Times every model on the same seeded `[batch, D, snippets]` input.
pub fn bench_run(
    models: &mut [Box<dyn BenchModel>],
    batch: usize,
    snippets: usize,
    reps: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchReport> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("bench needs at least one model".into()))?;
    let (dim, width) = (first.input_dim(), first.width());
    if let Some(m) = models.iter().find(|m| m.input_dim() != dim || m.width() != width) {
        return Err(Error::InvalidArgument(format!(
            "model `{}` has input/width {}/{}, expected {dim}/{width}",
            m.name(),
            m.input_dim(),
            m.width()
        )));
    }
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be positive".into()));
    }
    let mut rng = Rng::new(seed);
    let x = Tensor::<f32>::normal(&mut rng, 0.0, 1.0, [batch, dim, snippets])?;
    let draws: Vec<f64> = (0..3 * batch).map(|_| rng.next_f64()).collect();
    let mut out = Vec::with_capacity(models.len());
    for model in models.iter_mut() {
        let [a, v, n] = model.classes();
        let pick = |k: usize, c: usize| ((draws[k] * c as f64) as usize).min(c - 1);
        let labels = Labels {
            action: (0..batch).map(|i| pick(i, a)).collect(),
            verb: (0..batch).map(|i| pick(batch + i, v)).collect(),
            noun: (0..batch).map(|i| pick(2 * batch + i, n)).collect(),
        };
        let macs = model.macs(snippets)?;
        let inference = time_op(|| model.infer(&x), warmup, reps)?;
        let train_step = time_op(|| model.train_step(&x, &labels), warmup, reps)?;
        out.push(ModelBench {
            name: model.name().to_string(),
            macs,
            batch,
            inference,
            train_step,
        });
    }
    Ok(BenchReport {
        models: out,
        snippets,
        warmup,
        hardware: hardware_note(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BranchConfig {
        BranchConfig {
            channels: 8,
            dilations: vec![1, 2],
            ..BranchConfig::new(6, 4, 3, 2)
        }
    }

    #[test]
    fn median_of_means_resists_outliers() {
        let mut s = vec![1.0; 30];
        s[3] = 100.0;
        let t = Timing::from_samples(&s, 1);
        assert_eq!(t.median_of_means, 1.0);
        assert!(t.mean > 4.0 && t.std > 10.0);
    }

    #[test]
    fn minimum_reps_enforced() {
        assert!(time_op(|| Ok(()), 4, 30).is_err());
        assert!(time_op(|| Ok(()), 5, 29).is_err());
        let t = time_op(|| Ok(()), 5, 30).unwrap();
        assert!(t.calls_per_rep > 1);
    }

    #[test]
    fn report_and_width_check() {
        let mut models: Vec<Box<dyn BenchModel>> = vec![
            Box::new(LstmBench::new("lstm", LstmConfig::new(6, 8, 4), 1).unwrap()),
            Box::new(TcnBench::new("tcn", tiny(), 1).unwrap()),
        ];
        let r = bench_run(&mut models, 2, 7, 30, 5, 3).unwrap();
        assert_eq!(r.models.len(), 2);
        assert!(r.speedup("lstm", "tcn").is_some());
        assert_eq!(r.to_csv().lines().count(), 3);
        assert!(r.to_string().contains("speedup lstm/tcn"));
        let mut bad: Vec<Box<dyn BenchModel>> = vec![
            Box::new(LstmBench::new("lstm", LstmConfig::new(6, 9, 4), 1).unwrap()),
            Box::new(TcnBench::new("tcn", tiny(), 1).unwrap()),
        ];
        assert!(bench_run(&mut bad, 2, 7, 30, 5, 3).is_err());
    }

    #[test]
    fn macs_are_batch_invariant() {
        let mut one: Vec<Box<dyn BenchModel>> = vec![Box::new(TcnBench::new("tcn", tiny(), 1).unwrap())];
        let a = bench_run(&mut one, 1, 7, 30, 5, 0).unwrap();
        let b = bench_run(&mut one, 8, 7, 30, 5, 0).unwrap();
        assert_eq!(a.models[0].macs, b.models[0].macs);
    }
}
