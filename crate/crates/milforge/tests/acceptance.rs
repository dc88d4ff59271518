//! Acceptance gate. Each test covers one numbered criterion and prints a
//! pass line; run with `cargo test --test acceptance -- --nocapture` to
//! see them all.

use milforge::autodiff::{finite_diff_grads, grad_rel_err};
use milforge::features::{decode_embeddings, encode_embeddings, FeatureBag};
use milforge::matrix::Matrix;
use milforge::metrics::auc;
use milforge::models::{
    decode_checkpoint, encode_checkpoint, LossConfig, MilModelParams, ModelSpec, Variant,
};
use milforge::optim::OptimizerState;
use milforge::rng::substream;
use milforge::synth::{generate_benchmark, SynthBag, WITNESS_FRACTION};
use milforge::tiling::{build_patch_grid, segment_tissue, Magnification, SegmentationConfig, Slide};
use milforge::trainer::{make_splits, train_fold, BagSampler, EarlyStopper, MemBags, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn small_spec(variant: Variant, d_in: usize) -> ModelSpec {
    ModelSpec {
        variant,
        d_in,
        inner_dim: 5,
        attn_dim: 4,
        n_classes: 2,
    }
}

fn random_bag(rng: &mut ChaCha8Rng, k: usize, d: usize, label: usize) -> FeatureBag {
    FeatureBag {
        slide_id: "bag".into(),
        mag: Magnification::X40,
        embeddings: Matrix {
            rows: k,
            cols: d,
            data: (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        },
        label: Some(label),
    }
}

fn bench_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        min_epochs: 25,
        patience: 3,
        max_epochs: 40,
        inner_dim: 64,
        attn_dim: 32,
        b: 4,
        seed,
        folds: 1,
        ..TrainConfig::default()
    }
}

/// Max-pooling propagates gradient through a single instance per step, so
/// it needs a longer, gentler schedule than the attention heads.
fn maxpool_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 5e-4,
        min_epochs: 120,
        patience: 8,
        max_epochs: 150,
        ..bench_cfg(seed)
    }
}

fn train_on_benchmark(
    bags: &[SynthBag],
    variant: Variant,
    seed: u64,
) -> (MilModelParams, f64, Vec<usize>) {
    let source = MemBags::new(bags.iter().map(|b| b.bag.clone()).collect()).unwrap();
    let labels: Vec<usize> = bags.iter().map(|b| b.bag.label.unwrap()).collect();
    let splits = make_splits(&labels, 2, 1, seed).unwrap();
    let cfg = if variant == Variant::MaxPool {
        maxpool_cfg(seed)
    } else {
        bench_cfg(seed)
    };
    let out = train_fold(&source, &splits[0], variant, 2, &cfg, 0).unwrap();
    (out.model, out.report.auc, splits[0].test.clone())
}

#[test]
fn criterion_01_gradient_suite() {
    let started = Instant::now();
    for (vi, variant) in Variant::all().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + vi as u64);
        for case in 0..3 {
            let k = rng.gen_range(2..=8);
            let d = 6;
            let mut init_rng = substream(200 + case, "init", vi as u64);
            let model = MilModelParams::init(small_spec(variant, d), 200, &mut init_rng);
            let bag = random_bag(&mut rng, k, d, (case % 2) as usize);
            let cfg = LossConfig {
                c1: 0.7,
                c2: 0.3,
                b: 2,
                dropout_p: 0.25,
            };
            let base_rng = substream(300 + case, "dropout", vi as u64);
            let mut r = base_rng.clone();
            let graph = model.loss_graph(&bag, &cfg, true, &mut r).unwrap();
            let analytic = model.param_grads(&graph).unwrap();
            let fd = finite_diff_grads(
                |tensors| {
                    let mut m = model.clone();
                    m.set_tensors(tensors.to_vec()).unwrap();
                    let mut r = base_rng.clone();
                    m.loss_graph(&bag, &cfg, true, &mut r).unwrap().loss_value
                },
                model.tensors(),
                1e-6,
            );
            for (a, f) in analytic.iter().zip(&fd) {
                let err = grad_rel_err(a, f);
                assert!(err <= 1e-5, "{variant:?} case {case}: rel err {err}");
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient suite took {secs:.1}s");
    println!("ACCEPTANCE 01 gradient suite: pass ({secs:.1}s)");
}

#[test]
fn criterion_02_attention_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut init_rng = substream(2, "init", 0);
    let model = MilModelParams::init(small_spec(Variant::Gated, 6), 2, &mut init_rng);
    for case in 0..1000 {
        let k = rng.gen_range(1..=40);
        let bag = random_bag(&mut rng, k, 6, 0);
        let out = model.attention_output(&bag).unwrap();
        for a in &out.attention {
            let s: f64 = a.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "case {case}: attention sums to {s}");
            assert!(a.iter().all(|&v| v >= 0.0));
        }
        // permutation invariance of the slide probabilities
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let rows: Vec<Vec<f64>> = perm.iter().map(|&r| bag.embeddings.row(r).to_vec()).collect();
        let shuffled = FeatureBag {
            embeddings: Matrix::from_rows(&rows),
            ..bag.clone()
        };
        let out2 = model.attention_output(&shuffled).unwrap();
        for (p, q) in out.probs.iter().zip(&out2.probs) {
            assert!((p - q).abs() < 1e-9, "case {case}: probs moved by {}", (p - q).abs());
        }
    }
    println!("ACCEPTANCE 02 attention contracts: pass");
}

#[test]
fn criterion_03_synthetic_benchmark() {
    let started = Instant::now();
    let mut means = std::collections::HashMap::new();
    for variant in [Variant::Attention, Variant::Gated, Variant::MaxPool] {
        let mut aucs = Vec::new();
        for seed in 0..5u64 {
            let bags = generate_benchmark(seed, 300, 64);
            let (_, auc, _) = train_on_benchmark(&bags, variant, seed);
            aucs.push(auc);
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        println!("  {}: mean AUC {mean:.3} {aucs:.3?}", variant.display_name());
        means.insert(variant, mean);
    }
    let attn = means[&Variant::Attention];
    let gated = means[&Variant::Gated];
    let maxp = means[&Variant::MaxPool];
    assert!(attn >= 0.90, "attention mean AUC {attn:.3}");
    assert!(gated >= 0.90, "gated mean AUC {gated:.3}");
    assert!(maxp >= 0.80, "max-pooling mean AUC {maxp:.3}");
    assert!(attn > maxp && gated > maxp, "ordering violated: {attn:.3}/{gated:.3} vs {maxp:.3}");
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 600.0, "benchmark took {secs:.1}s");
    println!("ACCEPTANCE 03 synthetic benchmark: pass ({secs:.1}s)");
}

#[test]
fn criterion_04_attention_localization() {
    let bags = generate_benchmark(7, 300, 64);
    let (model, _, test) = train_on_benchmark(&bags, Variant::Attention, 7);
    // With two symmetric per-class attention branches the optimizer is free
    // to place the witness detector on either one, so score the branch that
    // actually carries the mass.
    let mut per_class = vec![Vec::new(); 2];
    let mut n_bags = 0usize;
    for &i in &test {
        let b = &bags[i];
        if b.bag.label != Some(1) || b.witnesses.is_empty() {
            continue;
        }
        n_bags += 1;
        let out = model.attention_output(&b.bag).unwrap();
        let uniform = b.witnesses.len() as f64 / b.bag.num_instances() as f64;
        for (class, ratios) in per_class.iter_mut().enumerate() {
            let mass: f64 = b.witnesses.iter().map(|&w| out.attention[class][w]).sum();
            ratios.push(mass / uniform);
        }
    }
    assert!(n_bags > 0);
    let mean = per_class
        .iter()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .fold(f64::MIN, f64::max);
    assert!(
        mean >= 3.0,
        "witness attention mass only {mean:.2}x uniform ({n_bags} bags)"
    );
    assert!(WITNESS_FRACTION > 0.0);
    println!("ACCEPTANCE 04 attention localization: pass ({mean:.1}x uniform)");
}

#[test]
fn criterion_05_clustering_variant() {
    // pseudolabel accuracy with the clustering term active
    let bags = generate_benchmark(9, 300, 64);
    let (model, _, test) = train_on_benchmark(&bags, Variant::AttentionCluster, 9);
    let cfg = LossConfig {
        c1: 0.7,
        c2: 0.3,
        b: 4,
        dropout_p: 0.0,
    };
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut rng = substream(9, "dropout", 99);
    for &i in &test {
        let g = model.loss_graph(&bags[i].bag, &cfg, false, &mut rng).unwrap();
        let p = g.pseudo.unwrap();
        if p.skipped {
            continue;
        }
        for (row, &label) in p.pseudolabels.iter().enumerate().map(|(r, l)| (r, l)) {
            let l0 = p.logits.at(row, 0);
            let l1 = p.logits.at(row, 1);
            let pred = if l1 > l0 { 1 } else { 0 };
            if pred == label as usize {
                hits += 1;
            }
            total += 1;
        }
    }
    let acc = hits as f64 / total as f64;
    assert!(acc >= 0.9, "pseudolabel accuracy {acc:.3} over {total} instances");

    // c2 = 0 reproduces the plain attention loss trajectory bit-for-bit
    let source = MemBags::new(bags.iter().map(|b| b.bag.clone()).collect()).unwrap();
    let labels: Vec<usize> = bags.iter().map(|b| b.bag.label.unwrap()).collect();
    let split = &make_splits(&labels, 2, 1, 9).unwrap()[0];
    let trajectory = |variant: Variant| -> Vec<u64> {
        let mut spec = small_spec(variant, 64);
        spec.inner_dim = 64;
        spec.attn_dim = 32;
        let mut init_rng = substream(9, "init", 0);
        let mut m = MilModelParams::init(spec, 9, &mut init_rng);
        let mut opt = OptimizerState::new(1e-3, 1e-5, &m.shapes());
        let lc = LossConfig { c1: 1.0, c2: 0.0, b: 4, dropout_p: 0.25 };
        let sampler = BagSampler::new(&split.train, &labels, 2).unwrap();
        let mut srng = substream(9, "sampling", 0);
        let mut drng = substream(9, "dropout", 0);
        let mut losses = Vec::new();
        for _ in 0..2 {
            for _ in 0..split.train.len() {
                let i = sampler.sample(&mut srng);
                let g = m.loss_graph(&source.bags[i], &lc, true, &mut drng).unwrap();
                losses.push(g.loss_value.to_bits());
                let grads = m.param_grads(&g).unwrap();
                opt.adam_step(m.tensors_mut(), &grads).unwrap();
            }
        }
        losses
    };
    assert_eq!(
        trajectory(Variant::AttentionCluster),
        trajectory(Variant::Attention),
        "c2=0 trajectory diverged from plain attention"
    );
    println!("ACCEPTANCE 05 clustering variant: pass (pseudolabel acc {acc:.3})");
}

#[test]
fn criterion_06_auc_oracle() {
    fn oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        num / den
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..1000 {
        let n = rng.gen_range(2..=50);
        let quantize = rng.gen_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if quantize {
                    rng.gen_range(0..6) as f64 / 6.0
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            })
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        if n > 1 {
            labels[1] = false;
        }
        let fast = auc(&scores, &labels).unwrap();
        let slow = oracle(&scores, &labels);
        assert_eq!(fast, slow, "case {case}");
    }
    println!("ACCEPTANCE 06 auc oracle equivalence: pass");
}

#[test]
fn criterion_07_sampling_balance() {
    let mut labels = vec![0usize; 204];
    labels.extend(vec![1usize; 209]);
    labels.extend(vec![2usize; 120]);
    let train: Vec<usize> = (0..labels.len()).collect();
    let sampler = BagSampler::new(&train, &labels, 3).unwrap();
    let mut rng = substream(7, "sampling", 0);
    let mut counts = [0usize; 3];
    let n = 100_000;
    for _ in 0..n {
        counts[labels[sampler.sample(&mut rng)]] += 1;
    }
    for (c, &hits) in counts.iter().enumerate() {
        let frac = hits as f64 / n as f64;
        assert!(
            (frac - 1.0 / 3.0).abs() <= 0.02,
            "class {c} drawn at {frac:.4}"
        );
    }
    println!("ACCEPTANCE 07 sampling balance: pass ({counts:?})");
}

#[test]
fn criterion_08_tiling_geometry() {
    // full-tissue fixture: saturated pink everywhere
    let img = image::RgbImage::from_pixel(1024, 1024, image::Rgb([230, 150, 180]));
    let slide = Slide::from_image(img, "fixture");
    let cfg = SegmentationConfig {
        working_downsample: 4,
        ..SegmentationConfig::default()
    };
    let mask = segment_tissue(&slide, &cfg).unwrap();
    let mut counts = Vec::new();
    for (mag, expected) in [
        (Magnification::X40, 16usize),
        (Magnification::X20, 4),
        (Magnification::X10, 1),
    ] {
        let grid = build_patch_grid(&mask, &slide.meta, mag, cfg.min_tissue_fraction).unwrap();
        assert_eq!(grid.patches.len(), expected, "{} patch count", mag.tag());
        // non-overlap: anchors are unique lattice points
        let fs = grid.footprint();
        let mut seen = std::collections::HashSet::new();
        for p in &grid.patches {
            assert_eq!(p.x % fs, 0);
            assert_eq!(p.y % fs, 0);
            assert!(seen.insert((p.x, p.y)));
            assert!(p.tissue_fraction >= cfg.min_tissue_fraction);
        }
        counts.push(grid.patches.len());
    }
    // tissue-fraction filtering: a blank slide yields nothing
    let blank = Slide::from_image(
        image::RgbImage::from_pixel(1024, 1024, image::Rgb([255, 255, 255])),
        "blank",
    );
    let empty_mask = segment_tissue(&blank, &cfg).unwrap();
    let grid = build_patch_grid(&empty_mask, &blank.meta, Magnification::X40, 0.5).unwrap();
    assert!(grid.patches.is_empty());
    println!("ACCEPTANCE 08 tiling geometry: pass ({counts:?})");
}

#[test]
fn criterion_09_serialization() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..1000 {
        if case % 2 == 0 {
            // embedding file: f32 payload, so draw f32-exact values
            let k = rng.gen_range(1..=20);
            let d = rng.gen_range(1..=32);
            let bag = FeatureBag {
                slide_id: format!("s{case}"),
                mag: Magnification::all()[case % 3],
                embeddings: Matrix {
                    rows: k,
                    cols: d,
                    data: (0..k * d)
                        .map(|_| rng.gen_range(-10.0f32..10.0) as f64)
                        .collect(),
                },
                label: if case % 4 == 0 { None } else { Some(case % 3) },
            };
            let bytes = encode_embeddings(&bag).unwrap();
            let back = decode_embeddings(&bytes).unwrap();
            assert_eq!(back.slide_id, bag.slide_id);
            assert_eq!(back.label, bag.label);
            for (a, b) in back.embeddings.data.iter().zip(&bag.embeddings.data) {
                assert_eq!(a.to_bits(), b.to_bits(), "case {case}");
            }
            // corruption classes
            let mut truncated = bytes.clone();
            truncated.truncate(bytes.len() - rng.gen_range(1..bytes.len()));
            let err = decode_embeddings(&truncated).unwrap_err();
            assert_eq!(err.exit_code(), 2, "case {case}: {err}");
            // a flip inside the checksummed payload (or the CRC itself)
            let mut flipped = bytes.clone();
            let payload_start = bytes.len() - 4 - k * d * 4;
            let at = rng.gen_range(payload_start..flipped.len());
            flipped[at] ^= 1 << rng.gen_range(0..8);
            let err = decode_embeddings(&flipped).unwrap_err();
            assert_eq!(err.exit_code(), 2, "case {case}: {err}");
            let mut bad_magic = bytes.clone();
            bad_magic[0] ^= 0xff;
            assert_eq!(decode_embeddings(&bad_magic).unwrap_err().exit_code(), 2);
        } else {
            let variant = Variant::all()[case % 5];
            let mut init_rng = substream(case as u64, "init", 0);
            let model = MilModelParams::init(small_spec(variant, 6), case as u64, &mut init_rng);
            let bytes = encode_checkpoint(&model);
            let back = decode_checkpoint(&bytes).unwrap();
            for (a, b) in model.tensors().iter().zip(back.tensors()) {
                for (x, y) in a.data.iter().zip(&b.data) {
                    assert_eq!(x.to_bits(), y.to_bits(), "case {case}");
                }
            }
            let n_params: usize = model.tensors().iter().map(|t| t.data.len()).sum();
            let mut flipped = bytes.clone();
            let payload_start = bytes.len() - 4 - n_params * 8;
            let at = rng.gen_range(payload_start..flipped.len());
            flipped[at] ^= 1 << rng.gen_range(0..8);
            let err = decode_checkpoint(&flipped).unwrap_err();
            assert_eq!(err.exit_code(), 2, "case {case}: {err}");
            let mut truncated = bytes.clone();
            truncated.truncate(bytes.len() / 2);
            assert_eq!(decode_checkpoint(&truncated).unwrap_err().exit_code(), 2);
        }
    }
    println!("ACCEPTANCE 09 serialization: pass");
}

#[test]
fn criterion_10_end_to_end_determinism() {
    use std::process::Command;
    let bin = env!("CARGO_BIN_EXE_milforge");
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // dataset: 30 synthetic bags written as embedding files
    let bags = generate_benchmark(10, 30, 16);
    let emb = root.join("embeddings");
    std::fs::create_dir_all(&emb).unwrap();
    let mut labels_csv = String::from("slide_id,label\n");
    for b in &bags {
        let path = emb.join(format!("{}_40x.milf", b.bag.slide_id));
        milforge::features::write_embeddings(&b.bag, &path).unwrap();
        let name = if b.bag.label == Some(1) { "pos" } else { "neg" };
        labels_csv.push_str(&format!("{},{}\n", b.bag.slide_id, name));
    }
    std::fs::write(root.join("labels.csv"), labels_csv).unwrap();
    std::fs::write(
        root.join("milforge.toml"),
        r#"
schema_version = 1
classes = ["neg", "pos"]

[train]
lr = 1e-3
min_epochs = 2
patience = 2
max_epochs = 3
folds = 2
inner_dim = 16
attn_dim = 8
b = 2
"#,
    )
    .unwrap();

    let train = |out: &str| {
        let status = Command::new(bin)
            .args([
                "--config",
                root.join("milforge.toml").to_str().unwrap(),
                "--seed",
                "11",
                "train",
                "--embeddings",
                emb.to_str().unwrap(),
                "--labels",
                root.join("labels.csv").to_str().unwrap(),
                "--variant",
                "attn",
                "--out",
                root.join(out).to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(root.join(out).join("aggregate.csv")).unwrap()
    };
    let a = train("run_a");
    let b = train("run_b");
    assert_eq!(a, b, "aggregate CSVs differ between identical runs");

    // heatmap determinism through the binary
    let img = image::RgbImage::from_pixel(1024, 1024, image::Rgb([230, 150, 180]));
    img.save(root.join("slide.png")).unwrap();
    let seg = Command::new(bin)
        .args([
            "segment-tile",
            "--slide",
            root.join("slide.png").to_str().unwrap(),
            "--id",
            "slide",
            "--mag",
            "20x",
            "--out",
            root.join("manifests").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(seg.success());
    let feat = Command::new(bin)
        .args([
            "featurize",
            "--slide",
            root.join("slide.png").to_str().unwrap(),
            "--manifest",
            root.join("manifests/slide_20x.jsonl").to_str().unwrap(),
            "--out",
            root.join("feat").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(feat.success());
    let mut init_rng = substream(11, "init", 0);
    let model = MilModelParams::init(
        ModelSpec {
            variant: Variant::Attention,
            d_in: milforge::features::BASELINE_DIM,
            inner_dim: 16,
            attn_dim: 8,
            n_classes: 2,
        },
        11,
        &mut init_rng,
    );
    milforge::models::save_checkpoint(&model, &root.join("model.milc")).unwrap();
    let heatmap = |out: &str| {
        let status = Command::new(bin)
            .args([
                "heatmap",
                "--checkpoint",
                root.join("model.milc").to_str().unwrap(),
                "--slide",
                root.join("slide.png").to_str().unwrap(),
                "--manifest",
                root.join("manifests/slide_20x.jsonl").to_str().unwrap(),
                "--embeddings",
                root.join("feat/slide_20x.milf").to_str().unwrap(),
                "--out",
                root.join(out).to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(root.join(out).join("slide_20x_heatmap.png")).unwrap()
    };
    let h1 = heatmap("hm_a");
    let h2 = heatmap("hm_b");
    assert_eq!(h1, h2, "heatmap PNGs differ between identical runs");
    println!("ACCEPTANCE 10 end-to-end determinism: pass");
}

#[test]
fn criterion_11_early_stopping_rule() {
    // never before epoch 50, even on a long plateau
    let mut s = EarlyStopper::new(50, 2);
    for e in 1..=49 {
        let (_, stop) = s.observe(e, 1.0);
        assert!(!stop, "stopped at epoch {e}");
    }
    // scripted: improvements at 50-52, then two flat epochs
    let mut s = EarlyStopper::new(50, 2);
    let script = [
        (48, 0.9, false),
        (49, 0.8, false),
        (50, 0.5, false),
        (51, 0.4, false),
        (52, 0.39, false),
        (53, 0.41, false),
        (54, 0.42, true),
    ];
    for (epoch, loss, expect_stop) in script {
        let (_, stop) = s.observe(epoch, loss);
        assert_eq!(stop, expect_stop, "epoch {epoch}");
    }
    assert_eq!(s.best_epoch, 52);
    // a single bad epoch followed by improvement resets the streak
    let mut s = EarlyStopper::new(50, 2);
    for e in 1..=60 {
        let loss = if e % 2 == 0 { 1.0 / e as f64 } else { 2.0 };
        let (_, stop) = s.observe(e, loss);
        assert!(!stop, "stopped at epoch {e}");
    }
    println!("ACCEPTANCE 11 early stopping: pass");
}
