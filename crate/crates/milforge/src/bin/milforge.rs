use clap::{Parser, Subcommand};
use milforge::config::{read_labels, ProjectConfig};
use milforge::error::{Error, Result};
use milforge::features::{
    baseline_extract, import_external, parse_import_descriptor, read_embeddings,
    write_embeddings, FeatureBag, LabelSpace,
};
use milforge::heatmap::{export_top_patches, render_marker, render_overlay};
use milforge::matrix::Matrix;
use milforge::models::{load_checkpoint, save_checkpoint, Variant};
use milforge::tiling::{
    build_patch_grid, extract_patch_pixels, read_manifest, segment_tissue, Magnification, Slide,
};
use milforge::trainer::{
    aggregate_csv, aggregate_reports, evaluate_model, make_splits, run_variant, BagSource,
    DirBags, FoldReport,
};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "milforge", version, about = "Attention-based MIL for whole-slide images")]
struct Cli {
    /// Project configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for fold-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Segment tissue and write patch manifests.
    SegmentTile {
        /// Slide image (PNG or TIFF).
        #[arg(long)]
        slide: PathBuf,
        /// Slide identifier; defaults to the file stem.
        #[arg(long)]
        id: Option<String>,
        /// 10x, 20x, 40x or all.
        #[arg(long, default_value = "all")]
        mag: String,
        /// Directory receiving {id}_{mag}.jsonl manifests.
        #[arg(long)]
        out: PathBuf,
        /// Optional tissue-mask PNG for inspection.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Extract per-patch features into a MILF embedding file.
    Featurize {
        #[arg(long)]
        slide: PathBuf,
        /// Patch manifest from segment-tile.
        #[arg(long)]
        manifest: PathBuf,
        /// Directory receiving {id}_{mag}.milf.
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert externally computed embeddings into MILF files.
    ImportEmbeddings {
        /// JSON descriptor (slide_id, dim, mag, label, data file).
        #[arg(long)]
        descriptor: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train MIL heads over resampled folds and write reports.
    Train {
        /// Directory of MILF embedding files.
        #[arg(long)]
        embeddings: PathBuf,
        /// CSV of slide_id,label rows.
        #[arg(long)]
        labels: PathBuf,
        /// Comma-separated class names (overrides configured classes).
        #[arg(long)]
        classes: Option<String>,
        /// maxpool|attn|gated|attn-cluster|gated-cluster|all.
        #[arg(long, default_value = "all")]
        variant: String,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long, default_value = "40x")]
        mag: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a labeled embedding directory with a saved checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        classes: Option<String>,
        #[arg(long, default_value = "40x")]
        mag: String,
    },
    /// Render an attention heatmap and export the top patches.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        slide: PathBuf,
        /// Patch manifest aligned with the embedding file.
        #[arg(long)]
        manifest: PathBuf,
        /// MILF embedding file for the slide.
        #[arg(long)]
        embeddings: PathBuf,
        /// Class whose attention is rendered; defaults to the prediction.
        #[arg(long)]
        class: Option<usize>,
        /// Patches exported alongside the overlay.
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate fold reports from a training run directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("MILFORGE_LOG")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_config(cli_config: &Option<PathBuf>) -> Result<ProjectConfig> {
    match cli_config {
        Some(path) => ProjectConfig::load(path),
        None => Ok(ProjectConfig::default()),
    }
}

fn slide_id_for(path: &Path, id: &Option<String>) -> Result<String> {
    match id {
        Some(s) => Ok(s.clone()),
        None => path
            .file_stem()
            .and_then(|s| s.to_str())
            .map(|s| s.to_string())
            .ok_or_else(|| Error::Param(format!("cannot derive a slide id from {}", path.display()))),
    }
}

fn parse_mags(s: &str) -> Result<Vec<Magnification>> {
    if s == "all" {
        Ok(Magnification::all().to_vec())
    } else {
        Ok(vec![Magnification::parse(s)?])
    }
}

fn class_space(cfg: &ProjectConfig, flag: &Option<String>) -> Result<LabelSpace> {
    match flag {
        Some(s) => LabelSpace::new(s.split(',').map(|c| c.trim().to_string()).collect()),
        None => cfg.label_space(),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config)?;
    match cli.cmd {
        Cmd::SegmentTile { slide, id, mag, out, mask } => {
            let id = slide_id_for(&slide, &id)?;
            let slide = Slide::open(&slide, &id)?;
            let tissue = segment_tissue(&slide, &cfg.segmentation)?;
            log::info!(
                "slide {id}: {} tissue contours, {} mask pixels",
                tissue.contours.len(),
                tissue.tissue_area()
            );
            if let Some(mask_path) = mask {
                let img = image::GrayImage::from_fn(tissue.width, tissue.height, |x, y| {
                    image::Luma([if tissue.at(x, y) { 255 } else { 0 }])
                });
                img.save(&mask_path)
                    .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            }
            std::fs::create_dir_all(&out)?;
            let hash = cfg.segmentation.hash();
            for m in parse_mags(&mag)? {
                let grid =
                    build_patch_grid(&tissue, &slide.meta, m, cfg.segmentation.min_tissue_fraction)?;
                let path = out.join(format!("{id}_{}.jsonl", m.tag()));
                milforge::tiling::write_manifest(&grid, &hash, &path)?;
                println!("{}: {} patches at {}", path.display(), grid.patches.len(), m.tag());
            }
            Ok(())
        }
        Cmd::Featurize { slide, manifest, out } => {
            let grid = read_manifest(&manifest)?;
            let slide = Slide::open(&slide, &grid.slide_id)?;
            if grid.patches.is_empty() {
                return Err(Error::MissingData(format!(
                    "manifest {} has no patches",
                    manifest.display()
                )));
            }
            let mut rows = Vec::with_capacity(grid.patches.len());
            for p in &grid.patches {
                let pixels = extract_patch_pixels(&slide, p.x, p.y, grid.mag)?;
                rows.push(baseline_extract(&pixels)?);
            }
            let bag = FeatureBag {
                slide_id: grid.slide_id.clone(),
                mag: grid.mag,
                embeddings: Matrix::from_rows(&rows),
                label: None,
            };
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("{}_{}.milf", grid.slide_id, grid.mag.tag()));
            write_embeddings(&bag, &path)?;
            println!("{}: {} x {}", path.display(), bag.num_instances(), bag.dim());
            Ok(())
        }
        Cmd::ImportEmbeddings { descriptor, out } => {
            let text = std::fs::read_to_string(&descriptor)?;
            let desc = parse_import_descriptor(&text)?;
            let base = descriptor.parent().unwrap_or_else(|| Path::new("."));
            let data_path = base.join(&desc.data);
            let raw = std::fs::read(&data_path)?;
            let bag = import_external(&desc, &raw)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join(format!("{}_{}.milf", bag.slide_id, bag.mag.tag()));
            write_embeddings(&bag, &path)?;
            println!("{}: {} x {}", path.display(), bag.num_instances(), bag.dim());
            Ok(())
        }
        Cmd::Train { embeddings, labels, classes, variant, folds, mag, out } => {
            let label_space = class_space(&cfg, &classes)?;
            let mut train_cfg = cfg.train.clone();
            if let Some(seed) = cli.seed {
                train_cfg.seed = seed;
            }
            if let Some(f) = folds {
                train_cfg.folds = f;
            }
            train_cfg.validate()?;
            let mag = Magnification::parse(&mag)?;
            let rows = read_labels(&labels, &label_space)?;
            let source = DirBags::new(embeddings, rows, mag)?;
            let label_vec: Vec<usize> = (0..source.len()).map(|i| source.label(i)).collect();
            let n_classes = label_space.len();
            let splits = make_splits(&label_vec, n_classes, train_cfg.folds, train_cfg.seed)?;

            let variants: Vec<Variant> = if variant == "all" {
                Variant::all().to_vec()
            } else {
                vec![Variant::parse(&variant)?]
            };
            std::fs::create_dir_all(&out)?;
            let mut rows_out = Vec::new();
            for v in variants {
                log::info!("training {} over {} folds", v.display_name(), splits.len());
                let outcomes = run_variant(&source, &splits, v, n_classes, &train_cfg, cli.jobs)?;
                let reports: Vec<FoldReport> =
                    outcomes.iter().map(|o| o.report.clone()).collect();
                for o in &outcomes {
                    let stem = format!("{}_fold{}", v.cli_tag(), o.report.fold);
                    std::fs::write(
                        out.join(format!("{stem}.json")),
                        serde_json::to_string_pretty(&o.report).unwrap(),
                    )?;
                    save_checkpoint(&o.model, &out.join(format!("{stem}.milc")))?;
                }
                rows_out.push(aggregate_reports(v, &reports)?);
            }
            let csv = aggregate_csv(&rows_out);
            std::fs::write(out.join("aggregate.csv"), &csv)?;
            print!("{csv}");
            Ok(())
        }
        Cmd::Evaluate { checkpoint, embeddings, labels, classes, mag } => {
            let label_space = class_space(&cfg, &classes)?;
            let model = load_checkpoint(&checkpoint)?;
            if model.spec.n_classes != label_space.len() {
                return Err(Error::Dimension(format!(
                    "checkpoint has {} classes, labels define {}",
                    model.spec.n_classes,
                    label_space.len()
                )));
            }
            let mag = Magnification::parse(&mag)?;
            let rows = read_labels(&labels, &label_space)?;
            let source = DirBags::new(embeddings, rows, mag)?;
            let all: Vec<usize> = (0..source.len()).collect();
            let (auc, accuracy, confusion) =
                evaluate_model(&model, &source, &all, label_space.len())?;
            let report = serde_json::json!({
                "variant": model.spec.variant.display_name(),
                "n_slides": source.len(),
                "auc": auc,
                "accuracy": accuracy,
                "confusion": confusion,
            });
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
            Ok(())
        }
        Cmd::Heatmap { checkpoint, slide, manifest, embeddings, class, k, out } => {
            let model = load_checkpoint(&checkpoint)?;
            let grid = read_manifest(&manifest)?;
            let bag = read_embeddings(&embeddings)?;
            if bag.num_instances() != grid.patches.len() {
                return Err(Error::Dimension(format!(
                    "embedding file has {} instances, manifest has {} patches",
                    bag.num_instances(),
                    grid.patches.len()
                )));
            }
            let slide = Slide::open(&slide, &grid.slide_id)?;
            std::fs::create_dir_all(&out)?;
            let png = out.join(format!("{}_{}_heatmap.png", grid.slide_id, grid.mag.tag()));
            if model.spec.variant.has_attention() {
                let output = model.attention_output(&bag)?;
                let class = class.unwrap_or(output.predicted);
                if class >= model.spec.n_classes {
                    return Err(Error::Param(format!(
                        "class {class} out of {}",
                        model.spec.n_classes
                    )));
                }
                let scores = &output.attention[class];
                let img = render_overlay(&slide, &grid, scores, &cfg.heatmap)?;
                img.save(&png).map_err(|e| Error::Io(std::io::Error::other(e)))?;
                export_top_patches(&slide, &grid, scores, k, &out)?;
                println!(
                    "{}: class {class}, prediction {} (p={:.4})",
                    png.display(),
                    output.predicted,
                    output.probs[output.predicted]
                );
            } else {
                let output = model.maxpool_output(&bag)?;
                let img = render_marker(&slide, &grid, output.max_instance, &cfg.heatmap)?;
                img.save(&png).map_err(|e| Error::Io(std::io::Error::other(e)))?;
                let mut scores = vec![0.0; grid.patches.len()];
                scores[output.max_instance] = 1.0;
                export_top_patches(&slide, &grid, &scores, 1, &out)?;
                println!(
                    "{}: max instance {}, prediction {} (p={:.4})",
                    png.display(),
                    output.max_instance,
                    output.predicted,
                    output.probs[output.predicted]
                );
            }
            Ok(())
        }
        Cmd::Report { runs } => {
            let mut by_variant: Vec<(Variant, Vec<FoldReport>)> =
                Variant::all().into_iter().map(|v| (v, Vec::new())).collect();
            for entry in std::fs::read_dir(&runs)? {
                let path = entry?.path();
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
                if !name.ends_with(".json") || !name.contains("_fold") {
                    continue;
                }
                let report: FoldReport = serde_json::from_str(&std::fs::read_to_string(&path)?)
                    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
                if let Some(slot) = by_variant
                    .iter_mut()
                    .find(|(v, _)| v.display_name() == report.variant)
                {
                    slot.1.push(report);
                }
            }
            let mut rows = Vec::new();
            for (v, mut reports) in by_variant {
                if reports.is_empty() {
                    continue;
                }
                reports.sort_by_key(|r| r.fold);
                rows.push(aggregate_reports(v, &reports)?);
            }
            if rows.is_empty() {
                return Err(Error::MissingData(format!(
                    "no fold reports found in {}",
                    runs.display()
                )));
            }
            print!("{}", aggregate_csv(&rows));
            Ok(())
        }
    }
}
