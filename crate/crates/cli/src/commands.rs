//! Pipeline stages. Each stage reads its inputs from and writes its outputs
//! to the run's output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use exitbench_core::corrupt::corrupt_dataset;
use exitbench_core::data::{gen_minishapes, parse_cifar10_bin, split_validation, Dataset};
use exitbench_core::knn::FlatIndex;
use exitbench_core::metrics::{curve_csv, metrics_report, shift_report, shift_summary, CurvePoint};
use exitbench_core::net::{
    load_checkpoint, save_checkpoint, train_joint, Checkpoint, ModelSpec, MultiExitModel,
};
use exitbench_core::robust::{adapt_batchnorm, train_augmix};
use exitbench_core::seed;
use exitbench_core::strategies::{decide_all, sweep, ExitIndices, StrategyConfig, StrategyKind};
use exitbench_core::trace::{collect_traces, read_traces, write_traces, TraceHeader, TraceRecord};

use crate::config::{DataSource, RunConfig, TrainMethod};

pub const CLEAN_SPLIT: &str = "clean";
pub const TRAIN_SPLIT: &str = "train";
const POOLED: &str = "pooled";

/// Locations of every artifact inside the output directory.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let out = cfg.output_dir.clone();
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self { cfg, out })
    }

    fn path(&self, parts: &[&str]) -> PathBuf {
        parts.iter().fold(self.out.clone(), |p, s| p.join(s))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.path(&["model.ckpt"])
    }

    fn data_dir(&self, split: &str) -> PathBuf {
        self.path(&["data", split])
    }

    pub fn trace_path(&self, split: &str) -> PathBuf {
        self.path(&["traces", &format!("{split}.jsonl")])
    }

    fn index_path(&self, exit: usize) -> PathBuf {
        self.path(&["knn", &format!("exit_{exit}.idx")])
    }

    fn adapted_path(&self, split: &str) -> PathBuf {
        self.path(&["adapted", &format!("{split}.ckpt")])
    }

    pub fn report_path(&self, split: &str) -> PathBuf {
        self.path(&["reports", &format!("{split}.json")])
    }

    pub fn curve_path(&self, split: &str) -> PathBuf {
        self.path(&["curves", &format!("{split}.csv")])
    }

    pub fn summary_path(&self) -> PathBuf {
        self.path(&["report.json"])
    }

    fn seed(&self, name: &'static str) -> u64 {
        seed::derive(self.cfg.seed, &[name.into()])
    }

    /// Evaluation splits: clean first, then corruptions in config order.
    pub fn splits(&self) -> Vec<String> {
        std::iter::once(CLEAN_SPLIT.to_string())
            .chain(
                self.cfg
                    .corruptions
                    .iter()
                    .map(|c| format!("{}-{}", c.kind.name(), c.severity)),
            )
            .collect()
    }

    fn load_source(&self, source: &DataSource, split: &str) -> Result<Dataset> {
        let classes = self.cfg.data.num_classes;
        let mut ds = match source {
            DataSource::Minishapes { n, seed } => gen_minishapes(*seed, *n, classes)?,
            DataSource::Cifar10Bin { files } => {
                let parts = files
                    .iter()
                    .map(|f| {
                        let bytes = fs::read(f).with_context(|| format!("reading {}", f.display()))?;
                        Ok(parse_cifar10_bin(&bytes, &f.display().to_string())?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                concat(&parts, split)?
            }
            DataSource::Container { dir } => Dataset::load(dir)?,
        };
        if ds.num_classes != classes {
            bail!(
                "data.{split}: dataset has {} classes, config says {classes}",
                ds.num_classes
            );
        }
        ds.split = split.to_string();
        Ok(ds)
    }

    /// Training set and optional validation split.
    fn train_data(&self) -> Result<(Dataset, Option<Dataset>)> {
        let full = self.load_source(&self.cfg.data.train, TRAIN_SPLIT)?;
        if self.cfg.data.val_size == 0 {
            return Ok((full, None));
        }
        let (train, val) = split_validation(&full, self.cfg.data.val_size, self.seed("val_split"))?;
        Ok((train, Some(val)))
    }

    fn model(&self) -> Result<MultiExitModel<f32>> {
        let path = self.checkpoint_path();
        if !path.exists() {
            bail!("{} not found; run `train` first", path.display());
        }
        Ok(load_checkpoint(&path)?.model)
    }

    fn split_data(&self, split: &str) -> Result<Dataset> {
        let dir = self.data_dir(split);
        if !dir.exists() {
            bail!("{} not found; run `corrupt` first", dir.display());
        }
        Ok(Dataset::load(&dir)?)
    }

    fn traces(&self, split: &str) -> Result<(TraceHeader, Vec<TraceRecord>)> {
        let path = self.trace_path(split);
        if !path.exists() {
            bail!("{} not found; run `trace` first", path.display());
        }
        Ok(read_traces(&path)?)
    }

    fn indices(&self, needed: bool) -> Result<Option<ExitIndices>> {
        if !needed {
            return Ok(None);
        }
        let mut indices = Vec::new();
        while self.index_path(indices.len() + 1).exists() {
            indices.push(FlatIndex::load(&self.index_path(indices.len() + 1))?);
        }
        if indices.is_empty() {
            bail!("kNN strategy configured but no indices found; run `knn-build` first");
        }
        Ok(Some(ExitIndices { indices }))
    }

    fn curve(&self, traces: &[TraceRecord], index: Option<&ExitIndices>) -> Result<Vec<CurvePoint>> {
        let s = &self.cfg.sweep;
        let mut points = sweep(traces, StrategyKind::Oracle, &[], None)?;
        if !s.confidence.is_empty() {
            points.extend(sweep(traces, StrategyKind::Confidence, &s.confidence, None)?);
        }
        if !s.patience.is_empty() {
            points.extend(sweep(traces, StrategyKind::Patience, &s.patience, None)?);
        }
        for k in &s.knn_k {
            points.extend(sweep(traces, StrategyKind::Knn { k: *k }, &s.agreement, index)?);
        }
        Ok(points)
    }
}

fn concat(parts: &[Dataset], split: &str) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| anyhow!("no datasets to concatenate"))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        if p.shape() != first.shape() || p.num_classes != first.num_classes {
            bail!("datasets to concatenate differ in shape or class count");
        }
        images.extend_from_slice(&p.images);
        labels.extend_from_slice(&p.labels);
    }
    Ok(Dataset::new(images, labels, first.shape(), first.num_classes, split)?)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(ds.save(dir)?)
}

pub fn train(run: &Run) -> Result<()> {
    let cfg = &run.cfg;
    let (train, val) = run.train_data()?;
    let [_, h, _] = train.shape();
    let mut spec = ModelSpec::reference(cfg.model.backbone, cfg.model.widths, h, cfg.data.num_classes)?;
    spec.exit_fractions = cfg.model.exit_fractions.clone();
    let mut model = MultiExitModel::<f32>::build(&spec, run.seed("model"))?;
    let mut train_cfg = cfg.training.train.clone();
    train_cfg.seed = run.seed("train");
    log::info!(
        "training {:?} model with {} exits on {} samples",
        cfg.training.method,
        model.num_exits(),
        train.len()
    );
    let log = match cfg.training.method {
        TrainMethod::Plain => train_joint(&mut model, &train, val.as_ref(), &train_cfg)?,
        TrainMethod::Augmix => {
            train_augmix(&mut model, &train, val.as_ref(), &train_cfg, &cfg.training.augmix)?
        }
    };
    let exits = model.num_exits();
    let mut ck = Checkpoint::new(model);
    ck.train_config = Some(train_cfg);
    ck.metadata = BTreeMap::from([(
        "method".to_string(),
        format!("{:?}", cfg.training.method).to_lowercase(),
    )]);
    fs::create_dir_all(&run.out)?;
    save_checkpoint(&run.checkpoint_path(), &ck)?;
    write(&run.path(&["train_log.csv"]), log.to_csv(exits))?;
    println!("wrote {}", run.checkpoint_path().display());
    Ok(())
}

pub fn corrupt(run: &Run) -> Result<()> {
    let test = run.load_source(&run.cfg.data.test, CLEAN_SPLIT)?;
    save_dataset(&test, &run.data_dir(CLEAN_SPLIT))?;
    for (split, spec) in run.splits().iter().skip(1).zip(&run.cfg.corruptions) {
        let mut ds = corrupt_dataset(&test, &[*spec], run.seed("corrupt"))?;
        ds.split = split.clone();
        save_dataset(&ds, &run.data_dir(split))?;
        log::info!("wrote split {split}");
    }
    println!("wrote {} splits under {}", run.splits().len(), run.path(&["data"]).display());
    Ok(())
}

pub fn trace(run: &Run) -> Result<()> {
    let base = run.model()?;
    let with_repr = run.cfg.trace.include_repr || run.cfg.knn_enabled();
    let batch = run.cfg.trace.batch_size;
    let header = TraceHeader::new(base.num_exits(), base.num_classes);
    for split in run.splits() {
        let data = run.split_data(&split)?;
        let adapted = if run.cfg.trace.use_adapted && split != CLEAN_SPLIT {
            let name = if run.cfg.adapt.pooled { POOLED } else { split.as_str() };
            let path = run.adapted_path(name);
            if !path.exists() {
                bail!("{} not found; run `adapt-bn` first", path.display());
            }
            Some(load_checkpoint(&path)?.model)
        } else {
            None
        };
        let model = adapted.as_ref().unwrap_or(&base);
        let traces = collect_traces(model, &data, batch, with_repr)?;
        write_at(&run.trace_path(&split), &header, &traces)?;
    }
    if run.cfg.knn_enabled() {
        let (train, _) = run.train_data()?;
        let traces = collect_traces(&base, &train, batch, true)?;
        write_at(&run.trace_path(TRAIN_SPLIT), &header, &traces)?;
    }
    println!("wrote traces under {}", run.path(&["traces"]).display());
    Ok(())
}

fn write_at(path: &Path, header: &TraceHeader, traces: &[TraceRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(write_traces(path, header, traces)?)
}

pub fn knn_build(run: &Run) -> Result<()> {
    let (_, train) = run.traces(TRAIN_SPLIT)?;
    let indices = ExitIndices::build(&train)?;
    fs::create_dir_all(run.path(&["knn"]))?;
    for (i, idx) in indices.indices.iter().enumerate() {
        idx.save(&run.index_path(i + 1))?;
    }
    println!("wrote {} indices of {} vectors", indices.num_exits(), train.len());
    Ok(())
}

pub fn adapt_bn(run: &Run) -> Result<()> {
    if run.cfg.corruptions.is_empty() {
        bail!("corruptions: no corrupted splits to adapt to");
    }
    let model = run.model()?;
    let adapt = run.cfg.adapt.config();
    let targets: Vec<(String, Dataset)> = if run.cfg.adapt.pooled {
        let parts = run
            .splits()
            .iter()
            .skip(1)
            .map(|s| run.split_data(s))
            .collect::<Result<Vec<_>>>()?;
        vec![(POOLED.to_string(), concat(&parts, POOLED)?)]
    } else {
        run.splits()
            .into_iter()
            .skip(1)
            .map(|s| {
                let d = run.split_data(&s)?;
                Ok((s, d))
            })
            .collect::<Result<_>>()?
    };
    for (name, data) in targets {
        let mut ck = Checkpoint::new(adapt_batchnorm(&model, &data, &adapt)?);
        ck.metadata.insert("adapted_on".into(), name.clone());
        let path = run.adapted_path(&name);
        fs::create_dir_all(path.parent().expect("adapted dir"))?;
        save_checkpoint(&path, &ck)?;
        log::info!("wrote {}", path.display());
    }
    println!("wrote adapted checkpoints under {}", run.path(&["adapted"]).display());
    Ok(())
}

pub fn eval(run: &Run) -> Result<()> {
    let strategy = &run.cfg.eval.strategy;
    let index = run.indices(matches!(strategy, StrategyConfig::Knn { .. }))?;
    for split in run.splits() {
        let (_, traces) = run.traces(&split)?;
        let decisions = decide_all(&traces, strategy, index.as_ref())?;
        let report = metrics_report(
            &strategy.name(),
            strategy.threshold(),
            &decisions,
            &traces,
            run.cfg.eval.bins,
        )?;
        write_json(&run.report_path(&split), &report)?;
        println!(
            "{split}: accuracy {:.4} compute {:.4} UT {:.2}% OT {:.2}%",
            report.accuracy, report.compute_fraction, report.ut_pct, report.ot_pct
        );
    }
    Ok(())
}

pub fn sweep_cmd(run: &Run) -> Result<()> {
    let index = run.indices(!run.cfg.sweep.knn_k.is_empty())?;
    for split in run.splits() {
        let (_, traces) = run.traces(&split)?;
        let curve = run.curve(&traces, index.as_ref())?;
        write(&run.curve_path(&split), curve_csv(&curve))?;
    }
    println!("wrote curves under {}", run.path(&["curves"]).display());
    Ok(())
}

pub fn report(run: &Run) -> Result<()> {
    let splits = run.splits();
    if splits.len() < 2 {
        bail!("corruptions: report needs at least one corrupted split");
    }
    let index = run.indices(!run.cfg.sweep.knn_k.is_empty())?;
    let mut summaries = Vec::with_capacity(splits.len());
    for split in &splits {
        let (_, traces) = run.traces(split)?;
        let curve = run.curve(&traces, index.as_ref())?;
        summaries.push(shift_summary(split, &traces, curve, run.cfg.eval.bins)?);
    }
    let clean = summaries.remove(0);
    let report = shift_report(clean, summaries)?;
    write_json(&run.summary_path(), &report)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!("{:<12} {:>10} {:>10} {:>10} {:>10}", "", "oracle", "best", "gap", "RMSCE");
    for s in [&report.clean, &report.corrupted] {
        println!(
            "{:<12} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            s.source,
            s.oracle_accuracy,
            s.best_practical_accuracy,
            s.gap,
            mean(&s.per_exit_rmsce)
        );
    }
    println!(
        "oracle/practical gap {} under shift",
        if report.gap_widens { "widens" } else { "does not widen" }
    );
    Ok(())
}
