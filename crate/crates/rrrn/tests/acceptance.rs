//! End-to-end acceptance checks. Each check prints one PASS/FAIL line with
//! its measurements and wall time; the process exits non-zero if any fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use rrrn::cache::CacheLayout;
use rrrn::generate::{generate_database, GenerateSpec};
use rrrn::manifest_io::ManifestFile;
use rrrn::occlude::synthesize_database;
use rrrn::{ExperimentConfig, Pipeline};
use rrrn_core::augment::augment_sample;
use rrrn_core::dataset::{
    reference_manifest, AnnotationRecord, DatabaseId, DatasetManifest, ObjectiveClass, OcclusionTag, ReferenceCorpus, NUM_CLASSES,
};
use rrrn_core::flow::{RegionStack, TvL1, REGIONS};
use rrrn_core::image::{Plane, Rect, RgbImage};
use rrrn_core::loss::{cor_loss, cross_entropy, rb_loss, total_loss, LossComponents, LossWeights};
use rrrn_core::metrics::{compute_metrics, ConfusionMatrix};
use rrrn_core::nn::{build_graph, gcn_forward, BackboneConfig, ModelConfig, RrrnModel, Tensor};
use rrrn_core::occlusion::{occlude_sequence, overlay_accessory, overlay_random_block, Landmarks, OcclusionKind, OcclusionSpec};
use rrrn_core::protocol::{
    hde_folds, initial_model, loso_folds, mean_attention, subject_leakage, train, Example, Fold, Predictor, RunConfig,
};
use rrrn_core::seed::rng_for;
use rrrn_core::synthetic::{template_landmarks, SyntheticConfig};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- metrics

/// Per-class counts from the expanded list of (truth, prediction) pairs.
fn brute_force_metrics(counts: &[Vec<u64>]) -> [f64; 4] {
    let c = counts.len();
    let mut pairs = Vec::new();
    for (t, row) in counts.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            pairs.extend(std::iter::repeat_n((t, p), n as usize));
        }
    }
    let n = pairs.len() as f64;
    let correct = pairs.iter().filter(|(t, p)| t == p).count() as f64;
    let (mut recalls, mut f1s, mut wf1) = (Vec::new(), Vec::new(), 0.0);
    for k in 0..c {
        let tp = pairs.iter().filter(|&&(t, p)| t == k && p == k).count() as f64;
        let support = pairs.iter().filter(|&&(t, _)| t == k).count() as f64;
        let predicted = pairs.iter().filter(|&&(_, p)| p == k).count() as f64;
        if support == 0.0 {
            continue;
        }
        let recall = tp / support;
        let f1 = if tp == 0.0 {
            0.0
        } else {
            let precision = tp / predicted;
            2.0 * precision * recall / (precision + recall)
        };
        recalls.push(recall);
        f1s.push(f1);
        wf1 += support / n * f1;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    [correct / n, mean(&recalls), mean(&f1s), wf1]
}

fn formula_oracles() -> Check {
    let mut rng = rng_for(1, "metrics");
    let mut worst = 0.0f64;
    let mut trials = 0;
    while trials < 1000 {
        let c = rng.gen_range(2..=6);
        let counts: Vec<Vec<u64>> = (0..c)
            .map(|_| (0..c).map(|_| if rng.gen_bool(0.3) { 0 } else { rng.gen_range(0..20) }).collect())
            .collect();
        if counts.iter().flatten().sum::<u64>() == 0 {
            continue;
        }
        trials += 1;
        let m = compute_metrics(&ConfusionMatrix::from_counts(counts.clone())).map_err(|e| e.to_string())?;
        let oracle = brute_force_metrics(&counts);
        for (a, b) in [m.war, m.uar, m.f1, m.wf1].iter().zip(oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-12, || format!("max abs error {worst:e}"))?;

    let casme2 = reference_manifest(ReferenceCorpus::Casme2);
    let samm = reference_manifest(ReferenceCorpus::Samm);
    let composite = DatasetManifest::merge(&[&casme2, &samm], "composite").map_err(|e| e.to_string())?;
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    for r in &composite.records {
        let truth = r.objective_class.ok_or("unmapped reference record")?.index();
        cm.record(truth, ObjectiveClass::III.index()).map_err(|e| e.to_string())?;
    }
    let m = compute_metrics(&cm).map_err(|e| e.to_string())?;
    ensure(m.war == 119.0 / 253.0, || format!("constant predictor WAR {}", m.war))?;
    ensure((m.uar - 0.2).abs() < 1e-12, || format!("constant predictor UAR {}", m.uar))?;
    Ok(format!("max |err| {worst:.1e} over 1000 matrices; constant predictor WAR {:.6} = 119/253", m.war))
}

// ---------------------------------------------------------------- graph

fn dense_gcn(f: &[Vec<f64>], p0: &[Vec<f64>], w0: &Tensor, w1: &Tensor) -> Vec<Vec<f64>> {
    let n = f.len();
    let unit: Vec<Vec<f64>> = f
        .iter()
        .map(|v| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = if i == j { 1.0 } else { unit[i].iter().zip(&unit[j]).map(|(x, y)| x * y).sum() };
        }
        let d: f64 = a[i].iter().sum();
        a[i].iter_mut().for_each(|v| *v /= d);
    }
    let layer = |p: &[Vec<f64>], w: &Tensor| -> Vec<Vec<f64>> {
        let (cin, cout) = (w.shape[0], w.shape[1]);
        let pw: Vec<Vec<f64>> = p
            .iter()
            .map(|row| (0..cout).map(|o| (0..cin).map(|c| row[c] * w.data[c * cout + o]).sum()).collect())
            .collect();
        (0..n)
            .map(|i| (0..cout).map(|o| (0..n).map(|j| a[i][j] * pw[j][o]).sum::<f64>().max(0.0)).collect())
            .collect()
    };
    layer(&layer(p0, w0), w1)
}

fn graph_stage() -> Check {
    let mut rng = rng_for(2, "graph");
    let c = 16;
    let mut worst_row = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for _ in 0..200 {
        let f: Vec<Vec<f64>> = (0..REGIONS).map(|_| (0..c).map(|_| rng.gen_range(0.0..2.0)).collect()).collect();
        let p0: Vec<Vec<f64>> = (0..REGIONS).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let bound = (6.0 / c as f64).sqrt();
        let w0 = Tensor::uniform(&[c, c], bound, &mut rng);
        let w1 = Tensor::uniform(&[c, c], bound, &mut rng);
        let graph = build_graph(&f);
        for row in graph.transition() {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let out = gcn_forward(&p0, &graph, &w0, &w1).map_err(|e| e.to_string())?;
        for (r, o) in out.iter().zip(dense_gcn(&f, &p0, &w0, &w1)) {
            for (x, y) in r.iter().zip(o) {
                worst_oracle = worst_oracle.max((x - y).abs());
            }
        }
        let mut perm: Vec<usize> = (0..REGIONS).collect();
        for i in (1..REGIONS).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pf: Vec<Vec<f64>> = perm.iter().map(|&i| f[i].clone()).collect();
        let pp: Vec<Vec<f64>> = perm.iter().map(|&i| p0[i].clone()).collect();
        let pgraph = build_graph(&pf);
        let pout = gcn_forward(&pp, &pgraph, &w0, &w1).map_err(|e| e.to_string())?;
        let (t, pt) = (graph.transition(), pgraph.transition());
        for (a, &i) in perm.iter().enumerate() {
            ensure(pout[a] == out[i], || format!("output row {a} differs after permutation {perm:?}"))?;
            for (b, &j) in perm.iter().enumerate() {
                ensure(pt[a][b] == t[i][j], || format!("transition ({a},{b}) differs after permutation {perm:?}"))?;
            }
        }
    }
    ensure(worst_row < 1e-9, || format!("row sum error {worst_row:e}"))?;
    ensure(worst_oracle < 1e-6, || format!("dense oracle error {worst_oracle:e}"))?;
    Ok(format!("row sum error {worst_row:.1e}, dense oracle error {worst_oracle:.1e}, permutations exact (200 sets)"))
}

// ---------------------------------------------------------------- gradients

fn random_stack<R: Rng>(size: usize, rng: &mut R) -> RegionStack {
    let mut plane = || Plane::from_fn(size, size, |_, _| rng.gen_range(-1.5..1.5));
    let vertical = (0..REGIONS).map(|_| plane()).collect();
    let horizontal = (0..REGIONS).map(|_| plane()).collect();
    RegionStack { vertical, horizontal }
}

fn gradient_check() -> Check {
    let config = ModelConfig {
        backbone: BackboneConfig::toy(8),
        attention_reduction: 2,
    };
    ensure(config.backbone.channels() == 16, || "toy backbone is not 16 channels wide".into())?;
    let mut rng = rng_for(11, "gradient check");
    let mut model = RrrnModel::with_rng(config, false, &mut rng).map_err(|e| e.to_string())?;
    for t in model.tensors_mut() {
        if t.shape.len() == 1 {
            t.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
    // Lean the attention towards the full face so the margin term is active.
    model.attention.w1.bias.data[0] = 1.0;
    let weights = LossWeights::default();
    let batch: Vec<(RegionStack, usize)> = (0..3).map(|i| (random_stack(8, &mut rng), i)).collect();
    let loss = |m: &RrrnModel| -> f64 {
        batch
            .iter()
            .map(|(s, y)| total_loss(&m.sample_loss(s, *y, &weights).unwrap().components, &weights))
            .sum::<f64>()
            / batch.len() as f64
    };
    let mut grad = model.zeros_like();
    let mut parts = LossComponents::default();
    for (s, y) in &batch {
        let l = model
            .accumulate_gradients(s, *y, &weights, 1.0 / batch.len() as f64, &mut grad)
            .map_err(|e| e.to_string())?;
        parts.cls += l.components.cls;
        parts.rb += l.components.rb;
        parts.cor += l.components.cor;
    }
    ensure(parts.cls > 0.0 && parts.rb > 0.0 && parts.cor > 0.0, || format!("inactive loss term {parts:?}"))?;
    let analytic: Vec<Vec<f64>> = grad.named_tensors().into_iter().map(|(_, t)| t.data.clone()).collect();
    let h = 1e-4;
    let (mut checked, mut bad) = (0usize, 0usize);
    for (ti, g) in analytic.iter().enumerate() {
        let picks: Vec<usize> = if g.len() <= 8 {
            (0..g.len()).collect()
        } else {
            (0..8).map(|_| rng.gen_range(0..g.len())).collect()
        };
        for j in picks {
            let orig = model.tensors_mut()[ti].data[j];
            model.tensors_mut()[ti].data[j] = orig + h;
            let plus = loss(&model);
            model.tensors_mut()[ti].data[j] = orig - h;
            let minus = loss(&model);
            model.tensors_mut()[ti].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (g[j] - numeric).abs() / g[j].abs().max(numeric.abs()).max(1e-5);
            checked += 1;
            if rel >= 1e-3 {
                bad += 1;
            }
        }
    }
    let share = 1.0 - bad as f64 / checked as f64;
    ensure(share >= 0.99, || format!("{bad} of {checked} entries off by >= 1e-3"))?;
    Ok(format!("{}/{checked} sampled entries within 1e-3 relative error ({:.1}%)", checked - bad, 100.0 * share))
}

// ---------------------------------------------------------------- augmentation

fn augmentation_count() -> Check {
    let mut rng = rng_for(4, "augmentation");
    for i in 0..100 {
        let onset = rng.gen_range(0..5);
        let apex = onset + rng.gen_range(10..40);
        let offset = apex + rng.gen_range(10..40);
        let record = AnnotationRecord {
            sample_id: format!("r{i}"),
            database_id: DatabaseId::Synthetic,
            subject_id: "s".into(),
            frames_dir: "f".into(),
            onset_idx: onset,
            apex_idx: apex,
            offset_idx: offset,
            au_code: "12".into(),
            objective_class: Some(ObjectiveClass::I),
            occlusion_tag: OcclusionTag::None,
        };
        let frames: Vec<Plane> = (0..=offset).map(|t| Plane::filled(4, 4, t as f64)).collect();
        let pairs = augment_sample(&record, &frames).map_err(|e| e.to_string())?;
        ensure(pairs.len() == 70, || format!("({onset}, {apex}, {offset}) gave {} pairs", pairs.len()))?;
    }
    Ok("100 random records with gaps >= 10 each gave 70 pairs".into())
}

// ---------------------------------------------------------------- occlusion

fn patterned(width: usize, height: usize, dx: i64, dy: i64) -> RgbImage {
    RgbImage::from_fn(width, height, |x, y| {
        let (u, v) = (x as i64 - dx, y as i64 - dy);
        [(u * 7 + v * 3).rem_euclid(256) as u8, (u * u + 5 * v).rem_euclid(251) as u8, (u ^ v).rem_euclid(256) as u8]
    })
}

fn dyadic_landmarks(x0: f64, y0: f64, w: f64, h: f64) -> Landmarks {
    let mut lm = template_landmarks(x0, y0, w, h);
    for p in &mut lm.points {
        *p = p.map(|v| (v * 16.0).round() / 16.0);
    }
    lm
}

fn occlusion_synthesis(scratch: &Path) -> Check {
    let mut rng = rng_for(5, "occlusion");
    let mut worst = 0.0f64;
    for pct in (5..=50).step_by(5) {
        let ratio = f64::from(pct) / 100.0;
        for _ in 0..100 {
            let (w, h) = (rng.gen_range(60..=150), rng.gen_range(60..=150));
            let face = Rect::new(rng.gen_range(0..10), rng.gen_range(0..10), w, h);
            let frame = RgbImage::filled(170, 170, [0, 0, 0]);
            let out = overlay_random_block(&frame, &face, ratio, &mut rng).map_err(|e| e.to_string())?;
            let covered = out.pixels.iter().filter(|p| **p != [0, 0, 0]).count() as f64;
            worst = worst.max((covered / face.area() as f64 - ratio).abs() / ratio);
        }
    }
    ensure(worst <= 0.01, || format!("occluded fraction off by {:.3}% of the ratio", 100.0 * worst))?;

    let assets = [rrrn::assets::procedural_glasses(30), rrrn::assets::procedural_mask([200, 200, 220])];
    let (w, h) = (120, 120);
    for asset in &assets {
        let lm = dyadic_landmarks(20.25, 18.5, 60.0, 72.0);
        let base = overlay_accessory(&patterned(w, h, 0, 0), &lm, asset).map_err(|e| e.to_string())?;
        ensure(base != patterned(w, h, 0, 0), || "accessory left the frame untouched".into())?;
        for (dx, dy) in [(3i64, 0i64), (-5, 7), (11, -4), (0, -9)] {
            let moved = overlay_accessory(&patterned(w, h, dx, dy), &lm.translated(dx as f64, dy as f64), asset).map_err(|e| e.to_string())?;
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let (sx, sy) = (x + dx, y + dy);
                    if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                        continue;
                    }
                    ensure(moved.get(sx as usize, sy as usize) == base.get(x as usize, y as usize), || {
                        format!("{:?} shift ({dx}, {dy}) breaks at ({x}, {y})", asset.kind)
                    })?;
                }
            }
        }
    }

    let frames: Vec<RgbImage> = (0..4).map(|t| patterned(64, 64, t, 0)).collect();
    let spec = OcclusionSpec {
        kind: OcclusionKind::Random,
        ratio: Some(0.25),
        seed: 3,
        asset_index: None,
    };
    let a = occlude_sequence("clip", &frames, None, &spec, None, &mut rng_for(3, "clip")).map_err(|e| e.to_string())?;
    let b = occlude_sequence("clip", &frames, None, &spec, None, &mut rng_for(3, "clip")).map_err(|e| e.to_string())?;
    ensure(a == b, || "same seed gave different frames".into())?;
    let data = generate_database(
        &GenerateSpec {
            subjects: 2,
            per_subject: 2,
            clip: SyntheticConfig {
                width: 32,
                height: 32,
                frames: 5,
                onset: 0,
                apex: 2,
                offset: 4,
                amplitude: 1.0,
            },
            ..GenerateSpec::default()
        },
        &scratch.join("occ_data"),
    )
    .map_err(|e| e.to_string())?;
    let masks = rrrn::assets::read_assets(&scratch.join("occ_data/assets/masks"), rrrn_core::occlusion::AssetKind::Mask).map_err(|e| e.to_string())?;
    let mask_spec = OcclusionSpec {
        kind: OcclusionKind::Mask,
        ..spec
    };
    let mask_spec = OcclusionSpec { ratio: None, ..mask_spec };
    let lm = scratch.join("occ_data/landmarks");
    for (name, s) in [("random", &spec), ("mask", &mask_spec)] {
        let out1 = scratch.join(format!("occ_{name}_1"));
        let out2 = scratch.join(format!("occ_{name}_2"));
        synthesize_database(&data, Some(&lm), &masks, s, &out1).map_err(|e| e.to_string())?;
        synthesize_database(&data, Some(&lm), &masks, s, &out2).map_err(|e| e.to_string())?;
        ensure(tree_bytes(&out1) == tree_bytes(&out2), || format!("{name} databases differ between identical runs"))?;
    }
    Ok(format!(
        "worst block area error {:.3}% of the ratio over 1000 blocks; accessory shifts exact; reruns byte-identical",
        100.0 * worst
    ))
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = fs::read(&p).unwrap_or_default();
                out.push((p.strip_prefix(dir).unwrap_or(&p).to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

// ---------------------------------------------------------------- protocol

fn protocol_integrity() -> Check {
    let mut rng = rng_for(6, "protocol");
    let mut records = Vec::new();
    for s in 0..47 {
        for i in 0..rng.gen_range(1..=8) {
            let class = ObjectiveClass::from_index(rng.gen_range(0..NUM_CLASSES)).unwrap();
            records.push(AnnotationRecord {
                sample_id: format!("p{s:02}_{i}"),
                database_id: DatabaseId::Synthetic,
                subject_id: format!("sub{s:02}"),
                frames_dir: format!("f/{s}/{i}"),
                onset_idx: 0,
                apex_idx: 5,
                offset_idx: 10,
                au_code: rrrn_core::dataset::representative_au_code(class).into(),
                objective_class: Some(class),
                occlusion_tag: OcclusionTag::None,
            });
        }
    }
    let manifest = DatasetManifest::new(records, "47 subjects").map_err(|e| e.to_string())?;
    let all: BTreeSet<String> = manifest.records.iter().map(|r| r.sample_id.clone()).collect();
    let folds = loso_folds(&manifest).map_err(|e| e.to_string())?;
    ensure(folds.len() == 47, || format!("{} folds", folds.len()))?;
    let mut tested = BTreeSet::new();
    for f in &folds {
        ensure(f.train_ids.is_disjoint(&f.test_ids), || format!("{} overlaps", f.name))?;
        let union: BTreeSet<String> = f.train_ids.union(&f.test_ids).cloned().collect();
        ensure(union == all, || format!("{} does not cover the dataset", f.name))?;
        ensure(subject_leakage(f, &manifest.records).is_empty(), || format!("{} leaks subjects", f.name))?;
        for id in &f.test_ids {
            ensure(tested.insert(id.clone()), || format!("{id} tested twice"))?;
        }
    }
    ensure(tested == all, || "test sets do not partition the dataset".into())?;
    let casme2 = reference_manifest(ReferenceCorpus::Casme2);
    let samm = reference_manifest(ReferenceCorpus::Samm);
    let [a, b] = hde_folds(&casme2, &samm).map_err(|e| e.to_string())?;
    ensure((a.train_ids.len(), a.test_ids.len()) == (185, 68), || format!("{}: {}/{}", a.name, a.train_ids.len(), a.test_ids.len()))?;
    ensure((b.train_ids.len(), b.test_ids.len()) == (68, 185), || format!("{}: {}/{}", b.name, b.train_ids.len(), b.test_ids.len()))?;
    Ok(format!("47 leak-free folds partition {} samples; {} 185/68, {} 68/185", all.len(), a.name, b.name))
}

// ---------------------------------------------------------------- learning

struct SyntheticSetup {
    data: ManifestFile,
    cache: CacheLayout,
    pipeline: Pipeline,
    root: PathBuf,
}

fn synthetic_setup(root: &Path) -> Result<SyntheticSetup, String> {
    let spec = GenerateSpec {
        subjects: 10,
        per_subject: 6,
        classes: vec![ObjectiveClass::I, ObjectiveClass::III],
        clip: SyntheticConfig::default(),
        seed: 7,
        first_subject: 0,
    };
    let dir = root.join("learning_data");
    let data = if dir.join("manifest.tsv").exists() {
        rrrn::manifest_io::read_manifest(&dir.join("manifest.tsv")).map_err(|e| e.to_string())?
    } else {
        generate_database(&spec, &dir).map_err(|e| e.to_string())?
    };
    let mut cfg = ExperimentConfig::default();
    cfg.run.model.backbone = BackboneConfig::toy(16);
    cfg.run.seed = 3;
    cfg.flow = TvL1::fast();
    Ok(SyntheticSetup {
        data,
        cache: CacheLayout::new(root.join("learning_cache")),
        pipeline: Pipeline::new(cfg),
        root: root.to_path_buf(),
    })
}

fn learning_sanity(root: &Path) -> Check {
    let s = synthetic_setup(root)?;
    let held_out: BTreeSet<&str> = ["s07", "s08", "s09"].into();
    let mut fold = Fold {
        name: "held_out_subjects".into(),
        train_ids: BTreeSet::new(),
        test_ids: BTreeSet::new(),
    };
    for r in &s.data.manifest.records {
        let side = if held_out.contains(r.subject_id.as_str()) { &mut fold.test_ids } else { &mut fold.train_ids };
        side.insert(r.sample_id.clone());
    }
    ensure(s.data.manifest.len() == 60 && fold.test_ids.len() == 18, || "unexpected dataset shape".into())?;
    let classes: BTreeSet<_> = s.data.manifest.records.iter().map(|r| r.objective_class).collect();
    ensure(classes.len() == 2, || format!("{} classes", classes.len()))?;
    s.pipeline.preprocess(&s.data, &s.cache).map_err(|e| e.to_string())?;
    s.pipeline.augment(&s.data, Some(&fold.train_ids), &s.cache).map_err(|e| e.to_string())?;
    let ckpt_dir = s.root.join("learning_checkpoints");
    let outcome = s
        .pipeline
        .train_fold(&s.data.manifest, &fold, &s.cache, &ckpt_dir)
        .map_err(|e| e.to_string())?;
    let train_set = s
        .pipeline
        .training_set(&s.data.manifest, &fold, &s.cache)
        .and_then(|t| t.load_all())
        .map_err(|e| e.to_string())?;
    let mut correct = 0;
    for ex in &train_set {
        if outcome.model.predict(&ex.stack).map_err(|e| e.to_string())? == ex.label {
            correct += 1;
        }
    }
    let train_acc = correct as f64 / train_set.len() as f64;
    let report = s
        .pipeline
        .evaluate_fold(&ckpt_dir.join("final.ckpt"), &s.data.manifest, &fold, &s.cache)
        .map_err(|e| e.to_string())?;
    let detail = format!(
        "{} augmented training pairs, {} epochs; training accuracy {:.3}, held-out accuracy {:.3} ({} clips)",
        train_set.len(),
        outcome.log.len(),
        train_acc,
        report.war,
        fold.test_ids.len()
    );
    ensure(outcome.log.len() == 50 && train_acc >= 0.95 && report.war >= 0.80, || detail.clone())?;
    Ok(detail)
}

fn occlusion_attention(root: &Path) -> Check {
    let s = synthetic_setup(root)?;
    s.pipeline.preprocess(&s.data, &s.cache).map_err(|e| e.to_string())?;
    let everything = Fold {
        name: "all".into(),
        train_ids: BTreeSet::new(),
        test_ids: s.data.manifest.records.iter().map(|r| r.sample_id.clone()).collect(),
    };
    let mut examples: Vec<Example> = s
        .pipeline
        .test_examples(&s.data.manifest, &everything, &s.cache)
        .map_err(|e| e.to_string())?;
    const BLOCKED: usize = 2;
    for ex in &mut examples {
        let size = ex.stack.size();
        ex.stack.vertical[BLOCKED] = Plane::zeros(size, size);
        ex.stack.horizontal[BLOCKED] = Plane::zeros(size, size);
    }
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in [0, 1, 2] {
        let cfg = RunConfig {
            seed,
            augmentation_enabled: false,
            ..s.pipeline.cfg.run
        };
        let model = initial_model(&cfg, &examples).map_err(|e| e.to_string())?;
        let trained = train(model, &examples, &cfg, &mut |_| {}).map_err(|e| e.to_string())?;
        let alpha = mean_attention(&trained.model, &examples).map_err(|e| e.to_string())?;
        let others = [1, 3, 4, 5].iter().map(|&k| alpha[k]).sum::<f64>() / 4.0;
        ok &= alpha[BLOCKED] < others;
        lines.push(format!("seed {seed}: {:.4} vs {:.4}", alpha[BLOCKED], others));
    }
    let detail = format!("zeroed crop mean weight vs other crops, {}", lines.join("; "));
    ensure(ok, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- losses

fn losses() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let beta = 0.02;
    let cases = [
        ([0.3, 0.5, 0.2, 0.2, 0.2, 0.2], 0.0),
        ([0.4, 0.4, 0.1, 0.3, 0.2, 0.0], 0.02),
        ([0.30, 0.31, 0.2, 0.1, 0.25, 0.3], 0.01),
    ];
    for (alpha, want) in cases {
        let got = rb_loss(&alpha, beta);
        ensure(close(got, want), || format!("rb_loss({alpha:?}) = {got}, expected {want}"))?;
    }
    // Logits are log-probabilities, so softmax returns them unchanged.
    let logp = |p: f64| -> Vec<f64> {
        let rest = (1.0 - p) / 4.0;
        [p, rest, rest, rest, rest].map(f64::ln).to_vec()
    };
    let main = logp(0.8);
    let dominated: Vec<Vec<f64>> = [0.8, 0.5, 0.3, 0.79, 0.2, 0.6].iter().map(|&p| logp(p)).collect();
    let got = cor_loss(&dominated, &main, 0).map_err(|e| e.to_string())?;
    ensure(close(got, 0.0), || format!("dominated cor_loss {got}"))?;
    let mut one_higher = dominated.clone();
    one_higher[3] = logp(0.9);
    let got = cor_loss(&one_higher, &main, 0).map_err(|e| e.to_string())?;
    let want = 0.9f64.ln() - 0.8f64.ln();
    ensure(close(got, want), || format!("cor_loss {got}, expected {want}"))?;
    let equal = vec![main.clone(); REGIONS];
    let got = cor_loss(&equal, &main, 0).map_err(|e| e.to_string())?;
    ensure(close(got, 0.0), || format!("equal cor_loss {got}"))?;
    let w = LossWeights::default();
    let got = total_loss(&LossComponents { cls: 1.0, rb: 0.02, cor: 0.1 }, &w);
    ensure(close(got, 1.04), || format!("total_loss {got}"))?;

    let got = cross_entropy(&[vec![1.0, 0.0, 0.0, 0.0, 0.0]], &[0]).map_err(|e| e.to_string())?;
    let want = (1f64.exp() + 4.0).ln() - 1.0;
    ensure(close(got, want), || format!("cross entropy {got}, expected {want}"))?;
    let mut rng = rng_for(9, "shift");
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let z: Vec<f64> = (0..5).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let y = rng.gen_range(0..5);
        let c = rng.gen_range(-500.0..500.0);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let a = cross_entropy(&[z], &[y]).map_err(|e| e.to_string())?;
        let b = cross_entropy(&[shifted], &[y]).map_err(|e| e.to_string())?;
        worst = worst.max((a - b).abs());
    }
    ensure(worst < 1e-9, || format!("shift changed cross entropy by {worst:e}"))?;
    Ok(format!("worked examples within 1e-9; worst shift difference {worst:.1e}"))
}

// ---------------------------------------------------------------- runner

fn main() {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let root = scratch.path();
    let checks: Vec<(&str, u64, Box<dyn Fn() -> Check + '_>)> = vec![
        ("formula oracles", 5, Box::new(formula_oracles)),
        ("graph stage", 10, Box::new(graph_stage)),
        ("gradient check", 120, Box::new(gradient_check)),
        ("augmentation count", 1, Box::new(augmentation_count)),
        ("occlusion synthesis", 30, Box::new(|| occlusion_synthesis(root))),
        ("protocol integrity", 1, Box::new(protocol_integrity)),
        ("learning sanity", 600, Box::new(|| learning_sanity(root))),
        ("occlusion attention", 600, Box::new(|| occlusion_attention(root))),
        ("losses", 1, Box::new(losses)),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let over = elapsed > Duration::from_secs(*limit);
        let (status, detail) = match (&result, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over the {limit} s limit")),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("[{status}] {} {name}: {detail} ({:.2} s, limit {limit} s)", i + 1, elapsed.as_secs_f64());
    }
    println!("{} of {} acceptance criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
