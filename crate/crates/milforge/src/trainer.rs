//! Training loop: stratified resampled splits, inverse-frequency bag
//! sampling, AdamW updates, early stopping on validation loss, and
//! per-fold evaluation.

use crate::error::{Error, Result};
use crate::features::{read_embeddings, FeatureBag};
use crate::metrics;
use crate::models::{
    decode_checkpoint, encode_checkpoint, LossConfig, MilModelParams, ModelSpec, Variant,
};
use crate::optim::OptimizerState;
use crate::rng::substream;
use crate::tiling::Magnification;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub min_epochs: usize,
    pub patience: usize,
    /// Safety bound; training always stops here even without convergence.
    pub max_epochs: usize,
    /// Instances drawn from each end of the attention ranking.
    pub b: usize,
    pub c1: f64,
    pub c2: f64,
    pub folds: usize,
    pub inner_dim: usize,
    pub attn_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            weight_decay: 1e-5,
            dropout: 0.25,
            min_epochs: 50,
            patience: 2,
            max_epochs: 200,
            b: 8,
            c1: 0.7,
            c2: 0.3,
            folds: 10,
            inner_dim: 512,
            attn_dim: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            c1: self.c1,
            c2: self.c2,
            b: self.b,
            dropout_p: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Param(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.lr <= 0.0 || self.folds == 0 || self.b == 0 {
            return Err(Error::Param("lr, folds and b must be positive".into()));
        }
        if self.max_epochs < self.min_epochs {
            return Err(Error::Param("max_epochs below min_epochs".into()));
        }
        Ok(())
    }
}

/// One train/val/test partition, as indices into the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified resampled splits: per class, roughly 10% to validation and
/// 10% to test (at least one each), remainder to training. Each fold
/// reshuffles independently from its own substream.
pub fn make_splits(labels: &[usize], n_classes: usize, folds: usize, seed: u64) -> Result<Vec<SplitSpec>> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::Contract(format!("label {l} out of {n_classes} classes")));
        }
        per_class[l].push(i);
    }
    for (c, members) in per_class.iter().enumerate() {
        if members.len() < 3 {
            return Err(Error::Stratification(format!(
                "class {c} has {} slides; need at least 3 for an 80/10/10 split",
                members.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(folds);
    for f in 0..folds {
        let mut rng = substream(seed, "split", f as u64);
        let mut split = SplitSpec {
            train: vec![],
            val: vec![],
            test: vec![],
        };
        for members in &per_class {
            let mut pool = members.clone();
            // Fisher-Yates
            for i in (1..pool.len()).rev() {
                let j = rng.gen_range(0..=i);
                pool.swap(i, j);
            }
            let n = pool.len();
            let n_hold = ((n as f64 * 0.1).round() as usize).max(1);
            split.test.extend(&pool[..n_hold]);
            split.val.extend(&pool[n_hold..2 * n_hold]);
            split.train.extend(&pool[2 * n_hold..]);
        }
        split.train.sort_unstable();
        split.val.sort_unstable();
        split.test.sort_unstable();
        out.push(split);
    }
    Ok(out)
}

/// Inverse-class-frequency sampler over the training indices, so each
/// class contributes equally in expectation.
pub struct BagSampler {
    indices: Vec<usize>,
    dist: WeightedIndex<f64>,
}

impl BagSampler {
    pub fn new(train: &[usize], labels: &[usize], n_classes: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let mut counts = vec![0usize; n_classes];
        for &i in train {
            counts[labels[i]] += 1;
        }
        let weights: Vec<f64> = train.iter().map(|&i| 1.0 / counts[labels[i]] as f64).collect();
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::Contract(format!("bad sampling weights: {e}")))?;
        Ok(BagSampler {
            indices: train.to_vec(),
            dist,
        })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        self.indices[self.dist.sample(rng)]
    }
}

/// Pure early-stopping rule: stop once validation loss has failed to
/// improve for `patience` consecutive epochs, but never before
/// `min_epochs`.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    min_epochs: usize,
    patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    streak: usize,
}

impl EarlyStopper {
    pub fn new(min_epochs: usize, patience: usize) -> Self {
        EarlyStopper {
            min_epochs,
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            streak: 0,
        }
    }

    /// Returns (improved, stop) for a 1-based epoch number.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        let improved = val_loss < self.best_loss;
        if improved {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.streak = 0;
        } else {
            self.streak += 1;
        }
        (improved, epoch >= self.min_epochs && self.streak >= self.patience)
    }
}

/// Anything that can hand out labeled feature bags by index.
pub trait BagSource: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn slide_id(&self, i: usize) -> &str;
    fn label(&self, i: usize) -> usize;
    fn bag(&self, i: usize) -> Result<FeatureBag>;
    fn dim(&self) -> usize;
}

pub struct MemBags {
    pub bags: Vec<FeatureBag>,
}

impl MemBags {
    pub fn new(bags: Vec<FeatureBag>) -> Result<Self> {
        if bags.is_empty() {
            return Err(Error::MissingData("no bags supplied".into()));
        }
        if bags.iter().any(|b| b.label.is_none()) {
            return Err(Error::Contract("all training bags must be labeled".into()));
        }
        let d = bags[0].dim();
        if bags.iter().any(|b| b.dim() != d) {
            return Err(Error::Dimension("bags have inconsistent dimensions".into()));
        }
        Ok(MemBags { bags })
    }
}

impl BagSource for MemBags {
    fn len(&self) -> usize {
        self.bags.len()
    }
    fn slide_id(&self, i: usize) -> &str {
        &self.bags[i].slide_id
    }
    fn label(&self, i: usize) -> usize {
        self.bags[i].label.unwrap()
    }
    fn bag(&self, i: usize) -> Result<FeatureBag> {
        Ok(self.bags[i].clone())
    }
    fn dim(&self) -> usize {
        self.bags[0].dim()
    }
}

/// Embedding files on disk, one MILF file per slide. All files are
/// verified to exist up front so a missing slide fails before training.
#[derive(Debug)]
pub struct DirBags {
    dir: PathBuf,
    slides: Vec<(String, usize)>,
    mag: Magnification,
    dim: usize,
}

impl DirBags {
    pub fn embedding_path(dir: &std::path::Path, slide_id: &str, mag: Magnification) -> PathBuf {
        dir.join(format!("{}_{}.milf", slide_id, mag.tag()))
    }

    pub fn new(dir: PathBuf, slides: Vec<(String, usize)>, mag: Magnification) -> Result<Self> {
        if slides.is_empty() {
            return Err(Error::MissingData("no labeled slides".into()));
        }
        let missing: Vec<String> = slides
            .iter()
            .filter(|(id, _)| !Self::embedding_path(&dir, id, mag).exists())
            .map(|(id, _)| id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingData(format!(
                "missing embeddings for {} slide(s): {}",
                missing.len(),
                missing.join(", ")
            )));
        }
        let probe = read_embeddings(&Self::embedding_path(&dir, &slides[0].0, mag))?;
        Ok(DirBags {
            dir,
            slides,
            mag,
            dim: probe.dim(),
        })
    }
}

impl BagSource for DirBags {
    fn len(&self) -> usize {
        self.slides.len()
    }
    fn slide_id(&self, i: usize) -> &str {
        &self.slides[i].0
    }
    fn label(&self, i: usize) -> usize {
        self.slides[i].1
    }
    fn bag(&self, i: usize) -> Result<FeatureBag> {
        let (id, label) = &self.slides[i];
        let mut bag = read_embeddings(&Self::embedding_path(&self.dir, id, self.mag))?;
        if bag.dim() != self.dim {
            return Err(Error::Dimension(format!(
                "slide {id}: dimension {} differs from dataset dimension {}",
                bag.dim(),
                self.dim
            )));
        }
        bag.label = Some(*label);
        Ok(bag)
    }
    fn dim(&self) -> usize {
        self.dim
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub variant: String,
    pub auc: f64,
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub wall_clock_secs: f64,
}

pub struct FoldOutcome {
    pub report: FoldReport,
    pub model: MilModelParams,
}

fn mean_val_loss(
    model: &MilModelParams,
    source: &dyn BagSource,
    val: &[usize],
    cfg: &LossConfig,
) -> Result<f64> {
    let eval_cfg = LossConfig {
        dropout_p: 0.0,
        ..*cfg
    };
    let mut total = 0.0;
    let mut rng = rand::rngs::mock::StepRng::new(0, 1);
    for &i in val {
        let bag = source.bag(i)?;
        total += model.loss_graph(&bag, &eval_cfg, false, &mut rng)?.loss_value;
    }
    Ok(total / val.len() as f64)
}

/// Eval-mode predictions over a set of indices. Returns
/// (auc, accuracy, confusion).
pub fn evaluate_model(
    model: &MilModelParams,
    source: &dyn BagSource,
    indices: &[usize],
    n_classes: usize,
) -> Result<(f64, f64, Vec<Vec<usize>>)> {
    let mut probs = Vec::with_capacity(indices.len());
    let mut predicted = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let bag = source.bag(i)?;
        let (p, pred) = model.predict(&bag)?;
        probs.push(p);
        predicted.push(pred);
        labels.push(source.label(i));
    }
    let auc = if n_classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let binary: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        metrics::auc(&scores, &binary)?
    } else {
        metrics::macro_ovr_auc(&probs, &labels, n_classes)?
    };
    let accuracy = metrics::accuracy(&predicted, &labels)?;
    let confusion = metrics::confusion_matrix(&predicted, &labels, n_classes)?;
    Ok((auc, accuracy, confusion))
}

/// Train one fold to early stopping and evaluate the best checkpoint on
/// the held-out test set. Fully determined by (cfg.seed, fold).
pub fn train_fold(
    source: &dyn BagSource,
    split: &SplitSpec,
    variant: Variant,
    n_classes: usize,
    cfg: &TrainConfig,
    fold: usize,
) -> Result<FoldOutcome> {
    cfg.validate()?;
    if split.val.is_empty() || split.test.is_empty() {
        return Err(Error::Stratification("fold has an empty holdout set".into()));
    }
    let started = Instant::now();
    let mut spec = ModelSpec::new(variant, source.dim(), n_classes);
    spec.inner_dim = cfg.inner_dim;
    spec.attn_dim = cfg.attn_dim;

    let mut init_rng = substream(cfg.seed, "init", fold as u64);
    let mut model = MilModelParams::init(spec, cfg.seed, &mut init_rng);
    let mut opt = OptimizerState::new(cfg.lr, cfg.weight_decay, &model.shapes());
    let loss_cfg = cfg.loss_config();

    let labels: Vec<usize> = (0..source.len()).map(|i| source.label(i)).collect();
    let sampler = BagSampler::new(&split.train, &labels, n_classes)?;
    let mut sample_rng = substream(cfg.seed, "sampling", fold as u64);
    let mut dropout_rng = substream(cfg.seed, "dropout", fold as u64);

    let mut stopper = EarlyStopper::new(cfg.min_epochs, cfg.patience);
    let mut best_bytes = encode_checkpoint(&model);
    let mut stopped_epoch = cfg.max_epochs;

    for epoch in 1..=cfg.max_epochs {
        for _ in 0..split.train.len() {
            let i = sampler.sample(&mut sample_rng);
            let bag = source.bag(i)?;
            let graph = model.loss_graph(&bag, &loss_cfg, true, &mut dropout_rng)?;
            let grads = model.param_grads(&graph)?;
            opt.adam_step(model.tensors_mut(), &grads)?;
        }
        let val_loss = mean_val_loss(&model, source, &split.val, &loss_cfg)?;
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best_bytes = encode_checkpoint(&model);
        }
        log::debug!(
            "fold {fold} epoch {epoch}: val loss {val_loss:.6}{}",
            if improved { " *" } else { "" }
        );
        if stop {
            stopped_epoch = epoch;
            break;
        }
    }
    let best = decode_checkpoint(&best_bytes)?;
    let (auc, accuracy, confusion) = evaluate_model(&best, source, &split.test, n_classes)?;
    Ok(FoldOutcome {
        report: FoldReport {
            fold,
            variant: variant.display_name().to_string(),
            auc,
            accuracy,
            confusion,
            stopped_epoch,
            best_epoch: stopper.best_epoch,
            best_val_loss: stopper.best_loss,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
        model: best,
    })
}

/// Run all folds for one variant, optionally across threads. Reports come
/// back in fold order regardless of scheduling.
pub fn run_variant(
    source: &dyn BagSource,
    splits: &[SplitSpec],
    variant: Variant,
    n_classes: usize,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<Vec<FoldOutcome>> {
    let jobs = jobs.max(1).min(splits.len().max(1));
    if jobs == 1 {
        return splits
            .iter()
            .enumerate()
            .map(|(f, s)| train_fold(source, s, variant, n_classes, cfg, f))
            .collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<FoldOutcome>>>> =
        (0..splits.len()).map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let f = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if f >= splits.len() {
                    break;
                }
                let out = train_fold(source, &splits[f], variant, n_classes, cfg, f);
                *results[f].lock().unwrap() = Some(out);
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("fold worker finished"))
        .collect()
}

/// One row of the aggregate table.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateRow {
    pub method: String,
    pub auc_mean: f64,
    pub auc_sd: f64,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
}

pub fn aggregate_reports(variant: Variant, reports: &[FoldReport]) -> Result<AggregateRow> {
    let aucs: Vec<f64> = reports.iter().map(|r| r.auc).collect();
    let accs: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let (auc_mean, auc_sd) = metrics::aggregate(&aucs)?;
    let (accuracy_mean, accuracy_sd) = metrics::aggregate(&accs)?;
    Ok(AggregateRow {
        method: variant.display_name().to_string(),
        auc_mean,
        auc_sd,
        accuracy_mean,
        accuracy_sd,
    })
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("method,auc_mean,auc_sd,accuracy_mean,accuracy_sd\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.method, r.auc_mean, r.auc_sd, r.accuracy_mean, r.accuracy_sd
        ));
    }
    out
}
