use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use tcna::bench::{bench_run, BenchModel, LstmBench, LstmConfig, TcnBench};
use tcna::branch::{fit_dilations, required_input_length, Branch};
use tcna::check::gradient_suite;
use tcna::data::{generate_synthetic, read_dataset, write_dataset, Dataset, MetricsReport, Modality, INDEX_FILE};
use tcna::fusion::Strategy;
use tcna::tensor::Element;
use tcna::train::{
    branch_from_checkpoint, checkpoint_modality, evaluate_branch, evaluate_fusion, fusion_from_checkpoint, log_csv,
    train_branch as fit_branch, train_fusion as fit_fusion, Checkpoint,
};
use tcna::{DType, Error, Result};

use super::config::RunConfig;
use crate::Common;

/// Which training stage `--epochs` and `--lr` refer to.
#[derive(Debug, Clone, Copy)]
pub enum Stage {
    Branch,
    Fusion,
}

struct Summary {
    text: String,
}

impl Summary {
    fn new(title: &str) -> Self {
        Self {
            text: format!("{title}\n"),
        }
    }

    fn line(&mut self, s: impl AsRef<str>) {
        self.text.push_str(s.as_ref());
        if !s.as_ref().ends_with('\n') {
            self.text.push('\n');
        }
    }

    fn finish(self, out: &Path, name: &str) -> Result<()> {
        write(&out.join(name), &self.text)?;
        print!("{}", self.text);
        Ok(())
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let out = common
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out DIR is required".into()))?;
    fs::create_dir_all(&out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    Ok(out)
}

fn data_dir(common: &Common) -> Result<&Path> {
    common
        .data
        .as_deref()
        .ok_or_else(|| Error::Config("--data DIR is required".into()))
}

fn read_index(path: &Path) -> Result<Dataset> {
    if !path.is_file() {
        return Err(Error::Dataset(format!("missing input path {}", path.display())));
    }
    read_dataset(path)
}

fn load_splits(common: &Common) -> Result<(Dataset, Dataset)> {
    let dir = data_dir(common)?;
    Ok((
        read_index(&dir.join("train").join(INDEX_FILE))?,
        read_index(&dir.join("val").join(INDEX_FILE))?,
    ))
}

/// `DIR/index.csv` if present, otherwise the validation split.
fn load_eval(common: &Common) -> Result<Dataset> {
    let dir = data_dir(common)?;
    let direct = dir.join(INDEX_FILE);
    if direct.is_file() {
        read_index(&direct)
    } else {
        read_index(&dir.join("val").join(INDEX_FILE))
    }
}

fn classes(train: &Dataset, val: &Dataset) -> [usize; 3] {
    let c = train.class_counts().cover(&val.class_counts());
    [c.actions, c.verbs, c.nouns]
}

fn feature_dim(ds: &Dataset, m: Modality) -> Result<usize> {
    ds.dim(m).ok_or_else(|| Error::Dataset("empty dataset".into()))
}

fn metrics_line(name: &str, r: &MetricsReport) -> String {
    format!(
        "{name}: action top-1 {:.2}%  top-5 {:.2}%  mean recall@5 {:.2}%",
        100.0 * r.action.top1,
        100.0 * r.action.top5,
        100.0 * r.action.mean_top5_recall
    )
}

pub fn synth_gen(cfg: &RunConfig, common: &Common) -> Result<()> {
    let out = out_dir(common)?;
    let mut spec = cfg.synth.clone();
    if let Some(n) = common.snippets {
        spec.snippets = n;
    }
    let data = generate_synthetic(&spec, cfg.seed)?;
    write_dataset(&data.train, &out.join("train"))?;
    write_dataset(&data.val, &out.join("val"))?;
    let mut csv = String::from("key,value\n");
    let rows: [(&str, String); 12] = [
        ("seed", cfg.seed.to_string()),
        ("num_actions", spec.num_actions.to_string()),
        ("num_verbs", spec.num_verbs.to_string()),
        ("num_nouns", spec.num_nouns.to_string()),
        ("dims", format!("{};{};{}", spec.dims[0], spec.dims[1], spec.dims[2])),
        ("snippets", spec.snippets.to_string()),
        ("sigma", spec.sigma.to_string()),
        ("signal", spec.signal.to_string()),
        ("early_snippets", spec.early_snippets.to_string()),
        ("early_gain", spec.early_gain.to_string()),
        ("train_samples", data.train.len().to_string()),
        ("val_samples", data.val.len().to_string()),
    ];
    for (k, v) in rows {
        let _ = writeln!(csv, "{k},{v}");
    }
    write(&out.join("synth.csv"), &csv)?;
    let mut s = Summary::new("synthetic dataset");
    s.line(format!(
        "{} train / {} val samples, {} actions, {} snippets, feature widths {:?}",
        data.train.len(),
        data.val.len(),
        spec.num_actions,
        spec.snippets,
        spec.dims
    ));
    s.line(format!("written to {}", out.display()));
    s.finish(&out, "summary.txt")
}

struct TrainedBranch {
    checkpoint: Checkpoint,
    metrics: MetricsReport,
}

fn train_one<T: Element>(cfg: &RunConfig, train: &Dataset, val: &Dataset, m: Modality, dilations: Vec<usize>, snippets: usize, out: &Path, stem: &str) -> Result<(TrainedBranch, usize)> {
    let mut config = cfg.branch(feature_dim(train, m)?, classes(train, val));
    config.dilations = dilations;
    let run = fit_branch::<T>(train, val, m, config, &cfg.sgd(), snippets)?;
    run.best.save(&out.join(format!("{stem}.ckpt")))?;
    run.last.save(&out.join(format!("{stem}.last.ckpt")))?;
    write(&out.join(format!("{stem}_log.csv")), &log_csv(&run.log))?;
    let best = branch_from_checkpoint::<T>(&run.best)?;
    let metrics = evaluate_branch(&best, val, m, snippets)?;
    write(&out.join(format!("{stem}_metrics.csv")), &metrics.to_csv())?;
    Ok((
        TrainedBranch {
            checkpoint: run.best,
            metrics,
        },
        run.best_epoch,
    ))
}

pub fn train_branch(cfg: &RunConfig, common: &Common) -> Result<()> {
    let out = out_dir(common)?;
    let (train, val) = load_splits(common)?;
    let m = cfg.modality;
    let stem = m.name();
    let (trained, best_epoch) = match cfg.dtype {
        DType::F32 => train_one::<f32>(cfg, &train, &val, m, cfg.dilations.clone(), cfg.snippets, &out, stem)?,
        DType::F64 => train_one::<f64>(cfg, &train, &val, m, cfg.dilations.clone(), cfg.snippets, &out, stem)?,
    };
    let mut s = Summary::new(&format!("{m} branch"));
    s.line(format!(
        "channels {}, kernel {}, dilations {:?}, {} snippets, {} epochs, best epoch {best_epoch}",
        cfg.channels, cfg.kernel, cfg.dilations, cfg.snippets, cfg.epochs
    ));
    s.line(trained.metrics.to_string());
    s.finish(&out, &format!("{stem}_summary.txt"))
}

fn load_branches<T: Element>(dir: &Path) -> Result<[Branch<T>; 3]> {
    let load = |m: Modality| -> Result<Branch<T>> {
        let path = dir.join(format!("{m}.ckpt"));
        if !path.is_file() {
            return Err(Error::Checkpoint(format!("missing input path {}", path.display())));
        }
        let ck = Checkpoint::load(&path)?;
        let found = checkpoint_modality(&ck)?;
        if found != m {
            return Err(Error::Checkpoint(format!("{} holds a {found} branch", path.display())));
        }
        branch_from_checkpoint(&ck)
    };
    Ok([load(Modality::Rgb)?, load(Modality::Flow)?, load(Modality::Obj)?])
}

fn fuse<T: Element>(cfg: &RunConfig, branches: [Branch<T>; 3], train: &Dataset, val: &Dataset, strategy: Strategy, out: &Path) -> Result<(MetricsReport, usize)> {
    let run = fit_fusion::<T>(branches, train, val, cfg.fusion_settings(strategy), &cfg.fusion_sgd())?;
    let stem = format!("fusion_{strategy}");
    run.best.save(&out.join(format!("{stem}.ckpt")))?;
    run.last.save(&out.join(format!("{stem}.last.ckpt")))?;
    write(&out.join(format!("{stem}_log.csv")), &log_csv(&run.log))?;
    let best = fusion_from_checkpoint::<T>(&run.best)?;
    let metrics = evaluate_fusion(&best, val)?;
    write(&out.join(format!("{stem}_metrics.csv")), &metrics.to_csv())?;
    Ok((metrics, run.best_epoch))
}

pub fn train_fusion(cfg: &RunConfig, common: &Common, branches: &Path) -> Result<()> {
    let out = out_dir(common)?;
    let (train, val) = load_splits(common)?;
    let s_ = cfg.strategy;
    let (metrics, best_epoch) = match cfg.dtype {
        DType::F32 => fuse::<f32>(cfg, load_branches(branches)?, &train, &val, s_, &out)?,
        DType::F64 => fuse::<f64>(cfg, load_branches(branches)?, &train, &val, s_, &out)?,
    };
    let mut s = Summary::new(&format!("{s_} fusion"));
    s.line(format!(
        "embed dim {}, {} epochs, best epoch {best_epoch}",
        cfg.fusion_embed_dim, cfg.fusion_epochs
    ));
    s.line(metrics.to_string());
    s.finish(&out, &format!("fusion_{s_}_summary.txt"))
}

fn evaluate_typed<T: Element>(cfg: &RunConfig, ck: &Checkpoint, ds: &Dataset) -> Result<(String, MetricsReport)> {
    match ck.meta("kind")?.first().copied() {
        Some(k) if k == 0.0 => {
            let m = checkpoint_modality(ck)?;
            let branch = branch_from_checkpoint::<T>(ck)?;
            Ok((format!("{m} branch"), evaluate_branch(&branch, ds, m, cfg.snippets)?))
        }
        Some(k) if k == 1.0 => {
            let model = fusion_from_checkpoint::<T>(ck)?;
            Ok((format!("{} fusion", model.strategy()), evaluate_fusion(&model, ds)?))
        }
        _ => Err(Error::Checkpoint("unknown checkpoint kind".into())),
    }
}

pub fn evaluate(cfg: &RunConfig, common: &Common, checkpoint: &Path) -> Result<()> {
    let out = out_dir(common)?;
    if !checkpoint.is_file() {
        return Err(Error::Checkpoint(format!("missing input path {}", checkpoint.display())));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let ds = load_eval(common)?;
    let (name, metrics) = match cfg.dtype {
        DType::F32 => evaluate_typed::<f32>(cfg, &ck, &ds)?,
        DType::F64 => evaluate_typed::<f64>(cfg, &ck, &ds)?,
    };
    write(&out.join("metrics.csv"), &metrics.to_csv())?;
    let mut s = Summary::new(&format!("{name} on {} samples", ds.len()));
    s.line(metrics.to_string());
    s.finish(&out, "summary.txt")
}

pub fn gradcheck(cfg: &RunConfig, common: &Common) -> Result<()> {
    if common.dtype.as_deref().is_some_and(|d| d != "f64") {
        return Err(Error::Config("gradient checks run in f64; pass --dtype f64".into()));
    }
    let suite = gradient_suite(cfg.gradcheck_configs, cfg.seed)?;
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        write(&dir.join("gradcheck.csv"), &suite.to_csv())?;
        write(&dir.join("summary.txt"), &suite.to_string())?;
    }
    print!("{suite}");
    if suite.passed() {
        Ok(())
    } else {
        Err(Error::InvalidArgument("gradient check failed".into()))
    }
}

pub fn bench(cfg: &RunConfig, common: &Common) -> Result<()> {
    if cfg.dtype != DType::F32 {
        return Err(Error::Config("benchmarks time f32 models".into()));
    }
    let out = out_dir(common)?;
    let mut tcn = cfg.branch(cfg.bench_dim, cfg.bench_classes);
    tcn.channels = cfg.bench_channels;
    let lstm = LstmConfig::new(cfg.bench_dim, cfg.bench_channels, cfg.bench_classes[0]);
    let mut models: Vec<Box<dyn BenchModel>> = vec![
        Box::new(LstmBench::new("lstm", lstm, cfg.seed)?),
        Box::new(TcnBench::new("tcn", tcn, cfg.seed)?),
    ];
    let batch = common.batch.unwrap_or(cfg.bench_batch);
    let report = bench_run(&mut models, batch, cfg.snippets, cfg.bench_reps, cfg.bench_warmup, cfg.seed)?;
    write(&out.join("bench.csv"), &report.to_csv())?;
    let mut s = Summary::new("benchmark: TCN branch vs encoder-decoder LSTM");
    let (l, t) = (&report.models[0].macs, &report.models[1].macs);
    s.line(format!(
        "sequence MACs per sample: lstm {} vs tcn {} ({})",
        l.sequence,
        t.sequence,
        if t.sequence < l.sequence { "tcn lower" } else { "tcn not lower" }
    ));
    s.line(report.to_string());
    s.finish(&out, "summary.txt")
}

fn obslen_typed<T: Element>(cfg: &RunConfig, train: &Dataset, val: &Dataset, out: &Path) -> Result<Vec<String>> {
    let m = cfg.modality;
    let mut rows = Vec::new();
    for &n in &cfg.obslen {
        let dilations = fit_dilations(cfg.kernel, &cfg.dilations, n).ok_or_else(|| {
            Error::Config(format!("no prefix of dilations {:?} fits {n} snippets", cfg.dilations))
        })?;
        let r = required_input_length(cfg.kernel, &dilations);
        let (trained, best_epoch) = train_one::<T>(cfg, train, val, m, dilations.clone(), n, out, &format!("{m}_n{n}"))?;
        let a = trained.metrics.action;
        let joined: Vec<String> = dilations.iter().map(usize::to_string).collect();
        rows.push(format!(
            "{n},{},{r},{best_epoch},{:.6},{:.6},{:.6}",
            joined.join(";"),
            a.top1,
            a.top5,
            a.mean_top5_recall
        ));
    }
    Ok(rows)
}

pub fn ablate_obslen(cfg: &RunConfig, common: &Common) -> Result<()> {
    let out = out_dir(common)?;
    let (train, val) = load_splits(common)?;
    let rows = match cfg.dtype {
        DType::F32 => obslen_typed::<f32>(cfg, &train, &val, &out)?,
        DType::F64 => obslen_typed::<f64>(cfg, &train, &val, &out)?,
    };
    let mut csv = String::from("snippets,dilations,receptive_field,best_epoch,action_top1,action_top5,action_mean_top5_recall\n");
    let mut s = Summary::new(&format!("observation-length ablation ({} branch)", cfg.modality));
    for row in &rows {
        csv.push_str(row);
        csv.push('\n');
        let f: Vec<&str> = row.split(',').collect();
        s.line(format!("N = {:>3}  dilations [{}]  top-1 {}", f[0], f[1].replace(';', ","), f[4]));
    }
    write(&out.join("ablate_obslen.csv"), &csv)?;
    s.finish(&out, "summary.txt")
}

fn fusion_ablation_typed<T: Element>(cfg: &RunConfig, train: &Dataset, val: &Dataset, out: &Path, reuse: Option<&Path>) -> Result<Vec<(String, MetricsReport)>> {
    let branch_dir = out.join("branches");
    fs::create_dir_all(&branch_dir).map_err(|e| Error::io(format!("creating {}", branch_dir.display()), e))?;
    let mut rows = Vec::new();
    let branches: [Branch<T>; 3] = match reuse {
        Some(dir) => {
            let b = load_branches::<T>(dir)?;
            for (branch, m) in b.iter().zip(Modality::ALL) {
                rows.push((m.name().to_string(), evaluate_branch(branch, val, m, cfg.snippets)?));
            }
            b
        }
        None => {
            let mut trained = Vec::with_capacity(3);
            for m in Modality::ALL {
                let (t, _) = train_one::<T>(cfg, train, val, m, cfg.dilations.clone(), cfg.snippets, &branch_dir, m.name())?;
                rows.push((m.name().to_string(), t.metrics));
                trained.push(branch_from_checkpoint::<T>(&t.checkpoint)?);
            }
            let [r, f, o]: [Branch<T>; 3] = trained.try_into().map_err(|_| Error::InvalidArgument("three branches".into()))?;
            [r, f, o]
        }
    };
    for strategy in Strategy::ALL {
        let (metrics, _) = fuse::<T>(cfg, branches.clone(), train, val, strategy, out)?;
        rows.push((strategy.name().to_string(), metrics));
    }
    Ok(rows)
}

pub fn ablate_fusion(cfg: &RunConfig, common: &Common, reuse: Option<&Path>) -> Result<()> {
    let out = out_dir(common)?;
    let (train, val) = load_splits(common)?;
    let rows = match cfg.dtype {
        DType::F32 => fusion_ablation_typed::<f32>(cfg, &train, &val, &out, reuse)?,
        DType::F64 => fusion_ablation_typed::<f64>(cfg, &train, &val, &out, reuse)?,
    };
    let mut csv = String::from("model,action_top1,action_top5,action_mean_top5_recall,verb_top1,noun_top1\n");
    let mut s = Summary::new("fusion ablation");
    for (name, r) in &rows {
        let _ = writeln!(
            csv,
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.action.top1, r.action.top5, r.action.mean_top5_recall, r.verb.top1, r.noun.top1
        );
        s.line(metrics_line(&format!("{name:<16}"), r));
    }
    write(&out.join("ablate_fusion.csv"), &csv)?;
    s.finish(&out, "summary.txt")
}
