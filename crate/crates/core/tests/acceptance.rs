//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line, and exits non-zero if any
//! criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

mod common;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use albumfill_core::compose::{fuse, visible_region, CompositionPolicy};
use albumfill_core::embedding::{EmbeddingSource, EmbeddingStore, EmbeddingVector};
use albumfill_core::engine::{
    run_dir, wrong_reference_sample, BatchConfig, Engine, PipelineRun, RunOptions, SelectionMode,
    JOURNAL_FILE,
};
use albumfill_core::eval::{
    aggregate, aggregate_completion, average_precision_at_k, evaluate_completion, map_at_k, psnr,
    recall_at_k, ssim, Arm, CompletionArm, CompletionOptions, EncoderKind, Grouping, RecallMode,
    RetrievalJudgment,
};
use albumfill_core::gateway::clock::MockClock;
use albumfill_core::gateway::mock::{MockEncoder, MockWorld};
use albumfill_core::gateway::{CallPolicy, Gateway, ProviderKind};
use albumfill_core::imageio;
use albumfill_core::index::{AlbumIndex, Candidate};
use albumfill_core::judge::{
    build_rubric_prompt, judge_batch, parse_scores, JudgeCase, JudgeError, DIMENSIONS,
};
use albumfill_core::mask::{bucket_of, compute_mask_ratio, Bucket, Mask};
use albumfill_core::model::{ImageRecord, PixelBox};
use albumfill_core::pipeline::{
    filter_images, generate_mask, run_pipeline, select_dominant_identity, write_pipeline_output,
    DropReason, IdentityCluster, PipelineConfig, RawManifest,
};
use albumfill_core::seed::rng_from;
use common::*;
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .unwrap()
}

fn mock_gateway(world: MockWorld, dim: usize) -> Arc<Gateway> {
    let g = Gateway::new(Arc::new(world), dim)
        .with_clock(Arc::new(MockClock::new()))
        .with_policy_all(CallPolicy {
            timeout: Duration::from_secs(30),
            max_retries: 1,
            max_concurrency: 8,
        });
    Arc::new(g)
}

// ---------------------------------------------------------------------------

fn oracle_hit(ranked: &[String], relevant: &[String], k: usize) -> f64 {
    let top = &ranked[..k.min(ranked.len())];
    if top.iter().any(|id| relevant.contains(id)) {
        1.0
    } else {
        0.0
    }
}

fn oracle_ap(ranked: &[String], relevant: &[String], k: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..k.min(ranked.len()) {
        if relevant.contains(&ranked[i]) {
            let rel_so_far = ranked[..=i]
                .iter()
                .filter(|id| relevant.contains(id))
                .count();
            total += rel_so_far as f64 / (i + 1) as f64;
        }
    }
    total / k.min(relevant.len()) as f64
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_from(&[b"acceptance-metrics"]);
    for set in 0..1000 {
        let queries = rng.random_range(1..=6);
        let mut judgments = Vec::new();
        for q in 0..queries {
            let n = rng.random_range(1..=20);
            let mut pool: Vec<String> = (0..20).map(|i| format!("img{i:02}")).collect();
            pool.shuffle(&mut rng);
            let ranked = pool[..n].to_vec();
            let r = rng.random_range(1..=8);
            pool.shuffle(&mut rng);
            let relevant = pool[..r].to_vec();
            judgments.push(RetrievalJudgment::new(
                format!("s{set}q{q}"),
                ranked,
                relevant,
            ));
        }
        for k in [1, 3, 5, 10, 20, 25] {
            let n = judgments.len() as f64;
            let want_r = 100.0
                * judgments
                    .iter()
                    .map(|j| oracle_hit(&j.ranked, &j.relevant, k))
                    .sum::<f64>()
                / n;
            let want_m = 100.0
                * judgments
                    .iter()
                    .map(|j| oracle_ap(&j.ranked, &j.relevant, k))
                    .sum::<f64>()
                / n;
            let got_r = recall_at_k(&judgments, k).map_err(|e| e.to_string())?;
            let got_m = map_at_k(&judgments, k).map_err(|e| e.to_string())?;
            ensure!(
                (got_r - want_r).abs() <= 1e-9,
                "set {set} k {k}: recall {got_r} vs {want_r}"
            );
            ensure!(
                (got_m - want_m).abs() <= 1e-9,
                "set {set} k {k}: mAP {got_m} vs {want_m}"
            );
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(())
}

// ---------------------------------------------------------------------------

fn full_sort(
    entries: &[(String, Vec<f32>)],
    query: &[f32],
    exclude: &HashSet<String>,
) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = entries
        .iter()
        .filter(|(id, _)| !exclude.contains(id))
        .map(|(id, v)| {
            let dot: f64 = v
                .iter()
                .zip(query)
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            (id.clone(), dot.clamp(-1.0, 1.0))
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all
}

fn index_exactness() -> Outcome {
    let start = Instant::now();
    let dim = 16;
    let mut rng = rng_from(&[b"acceptance-index"]);
    for case in 0..500 {
        let n = rng.random_range(1..=1000);
        // A small pool of distinct vectors makes exact score ties common.
        let pool_size = rng.random_range(1..=n.max(2));
        let pool: Vec<Vec<f32>> = (0..pool_size)
            .map(|i| {
                random_unit(
                    dim,
                    &[
                        b"pool",
                        &(case as u64).to_le_bytes(),
                        &(i as u64).to_le_bytes(),
                    ],
                )
            })
            .collect();
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        let entries: Vec<(String, Vec<f32>)> = ids
            .iter()
            .map(|&i| {
                (
                    format!("e{i:04}"),
                    pool[rng.random_range(0..pool_size)].clone(),
                )
            })
            .collect();
        let index = AlbumIndex::build(
            "a",
            dim,
            entries.iter().map(|(id, v)| {
                (
                    id.clone(),
                    EmbeddingVector::new(v.clone(), EmbeddingSource::Image).unwrap(),
                )
            }),
        )
        .map_err(|e| e.to_string())?;
        let query = random_unit(dim, &[b"query", &(case as u64).to_le_bytes()]);
        let qv = EmbeddingVector::new(query.clone(), EmbeddingSource::Composed).unwrap();
        let exclude: HashSet<String> = entries
            .iter()
            .filter(|_| rng.random_bool(0.1))
            .map(|(id, _)| id.clone())
            .collect();
        let oracle = full_sort(&entries, &query, &exclude);
        for k in [1, 5, 10, 25, 50] {
            let got = index.top_k(&qv, k, &exclude).map_err(|e| e.to_string())?;
            let got: Vec<&Candidate> = got.items.iter().collect();
            let want = &oracle[..k.min(oracle.len())];
            ensure!(
                got.len() == want.len(),
                "case {case} k {k}: {} results, want {}",
                got.len(),
                want.len()
            );
            for (g, w) in got.iter().zip(want) {
                ensure!(
                    g.image_id == w.0 && g.score == w.1,
                    "case {case} k {k}: {:?} vs {:?}",
                    g,
                    w
                );
                ensure!(
                    !exclude.contains(&g.image_id),
                    "case {case}: excluded id {} returned",
                    g.image_id
                );
            }
            for pair in got.windows(2) {
                ensure!(
                    pair[0].score > pair[1].score
                        || (pair[0].score == pair[1].score && pair[0].image_id < pair[1].image_id),
                    "case {case} k {k}: tie order broken at {:?}",
                    pair
                );
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(())
}

// ---------------------------------------------------------------------------

fn oracle_ssim(a: &RgbImage, b: &RgbImage) -> f64 {
    let luma = |img: &RgbImage| -> Vec<f64> {
        img.pixels()
            .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
            .collect()
    };
    let (x, y) = (luma(a), luma(b));
    let (w, h) = (a.width() as usize, a.height() as usize);
    let mut weights = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *cell = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *cell;
        }
    }
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for oy in 0..=h - 11 {
        for ox in 0..=w - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let g = weights[i][j] / total;
                    let idx = (oy + i) * w + ox + j;
                    mx += g * x[idx];
                    my += g * y[idx];
                    sxx += g * x[idx] * x[idx];
                    syy += g * y[idx] * y[idx];
                    sxy += g * x[idx] * y[idx];
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / f64::from(count)
}

fn hand_derived_values() -> Outcome {
    let ranked: Vec<String> = ["rel1", "non", "rel2"].map(String::from).to_vec();
    let relevant: HashSet<&str> = ["rel1", "rel2"].into();
    let ap = 100.0 * average_precision_at_k(&ranked, &relevant, 3);
    ensure!((ap - 83.33).abs() <= 0.01, "AP example gave {ap}");

    let a = RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 7 + y) as u8, (y * 9) as u8, 100]));
    let b = RgbImage::from_fn(16, 16, |x, y| Rgb(a.get_pixel(x, y).0.map(|c| c + 1)));
    let p = psnr(&a, &b, 255.0).map_err(|e| e.to_string())?;
    ensure!((p - 48.13).abs() <= 0.01, "PSNR example gave {p}");

    let mut rng = rng_from(&[b"acceptance-ssim"]);
    let x = RgbImage::from_fn(32, 32, |i, j| {
        let v = ((i * 8 + j * 3) % 256) as u8;
        Rgb([v, v.wrapping_mul(3), 255 - v])
    });
    let y = RgbImage::from_fn(32, 32, |i, j| {
        let p = x.get_pixel(i, j).0;
        Rgb(p.map(|c| (i16::from(c) + rng.random_range(-30..=30)).clamp(0, 255) as u8))
    });
    let got = ssim(&x, &y).map_err(|e| e.to_string())?;
    let want = oracle_ssim(&x, &y);
    ensure!((got - want).abs() <= 1e-6, "SSIM {got} vs oracle {want}");
    let same = ssim(&x, &x).map_err(|e| e.to_string())?;
    ensure!(
        (same - 1.0).abs() <= 1e-12,
        "SSIM of identical images is {same}"
    );
    Ok(())
}

// ---------------------------------------------------------------------------

fn record(id: &str, w: u32, h: u32, boxes: Vec<PixelBox>) -> ImageRecord {
    ImageRecord {
        image_id: id.into(),
        file_ref: format!("images/{id}.png"),
        width: w,
        height: h,
        person_boxes: boxes,
        identity_id: None,
    }
}

fn cluster(id: &str, images: &[&str]) -> IdentityCluster {
    IdentityCluster {
        identity_id: id.into(),
        members: Vec::new(),
        image_ids: images.iter().map(|s| s.to_string()).collect(),
    }
}

fn tree_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn pipeline_thresholds() -> Outcome {
    let records = vec![
        record("small", 1000, 800, vec![PixelBox::new(0, 0, 120, 90)]),
        record(
            "crowd",
            1000,
            800,
            (0..21)
                .map(|i| PixelBox::new(i * 40, 0, 200, 200))
                .collect(),
        ),
        record("edge", 1000, 800, vec![PixelBox::new(0, 0, 150, 10)]),
        record(
            "twenty",
            1000,
            800,
            (0..20)
                .map(|i| PixelBox::new(i * 40, 0, 200, 200))
                .collect(),
        ),
    ];
    let out = filter_images(&records);
    let dropped: HashMap<&str, DropReason> = out
        .dropped
        .iter()
        .map(|d| (d.image_id.as_str(), d.reason))
        .collect();
    ensure!(
        dropped.get("small") == Some(&DropReason::NoSignificantPerson),
        "0.12/0.1125 box: {:?}",
        dropped.get("small")
    );
    ensure!(
        dropped.get("small").unwrap().to_string() == "no significant person",
        "reason text"
    );
    ensure!(
        dropped.get("crowd") == Some(&DropReason::Crowded),
        "21 people: {:?}",
        dropped.get("crowd")
    );
    let kept: Vec<&str> = out.kept.iter().map(|r| r.image_id.as_str()).collect();
    ensure!(kept == ["edge", "twenty"], "kept {kept:?}");
    ensure!(out.kept[0].person_boxes.len() == 1, "0.15 box not retained");

    let strict = [
        cluster("id0000", &["a", "b", "c", "d", "e"]),
        cluster("id0001", &["a", "b", "c"]),
    ];
    ensure!(
        select_dominant_identity(&strict).ok() == Some("id0000"),
        "strict maximum"
    );
    let tied = [
        cluster("id0003", &["a", "b", "c", "d"]),
        cluster("id0001", &["e", "f", "g", "h"]),
    ];
    ensure!(
        select_dominant_identity(&tied).ok() == Some("id0001"),
        "tie-break"
    );
    let single = [cluster("id0007", &["a"])];
    ensure!(
        select_dominant_identity(&single).ok() == Some("id0007"),
        "single cluster"
    );
    ensure!(
        select_dominant_identity(&[]).is_err(),
        "empty input accepted"
    );

    let root = fixture_dir();
    let raw = RawManifest::load(&root.join("raw.json")).map_err(|e| e.to_string())?;
    let gt = EmbeddingStore::load(&root.join("gt_embeddings.jsonl")).map_err(|e| e.to_string())?;
    let mut trees = Vec::new();
    for threads in [None, None, Some(1), Some(4)] {
        let config = PipelineConfig {
            seed: 7,
            threads,
            ..Default::default()
        };
        let built = run_pipeline(&raw, &gt, &config).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().unwrap();
        write_pipeline_output(&built, dir.path()).map_err(|e| e.to_string())?;
        trees.push(tree_bytes(dir.path()));
    }
    ensure!(!trees[0].is_empty(), "pipeline wrote nothing");
    for (i, t) in trees.iter().enumerate().skip(1) {
        ensure!(
            *t == trees[0],
            "pipeline output {i} differs from the first run"
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn mask_generation() -> Outcome {
    let records = [
        record("wide", 120, 80, vec![PixelBox::new(20, 10, 70, 60)]),
        record(
            "tall",
            64,
            96,
            vec![PixelBox::new(8, 6, 44, 80), PixelBox::new(40, 50, 20, 40)],
        ),
        record("square", 100, 100, vec![PixelBox::new(10, 10, 60, 70)]),
    ];
    for bucket in Bucket::ALL {
        for seed in 0..100u64 {
            let rec = &records[seed as usize % records.len()];
            let m = generate_mask(rec, bucket, seed)
                .map_err(|e| format!("{bucket:?} seed {seed}: {e}"))?;
            let ratio = compute_mask_ratio(&m.raster).map_err(|e| e.to_string())?;
            ensure!(
                bucket_of(ratio).ok() == Some(bucket),
                "{bucket:?} seed {seed}: ratio {ratio}"
            );
            ensure!(ratio == m.ratio, "reported ratio {} vs {ratio}", m.ratio);
            ensure!(
                rec.person_boxes.contains(&m.anchor),
                "anchor is not a person box"
            );
            let a = m.anchor;
            let inside = m.raster.count_ones_in(a.x, a.y, a.w, a.h);
            ensure!(
                2 * inside >= m.raster.count_ones(),
                "{bucket:?} seed {seed}: {inside} of {} inside anchor",
                m.raster.count_ones()
            );
            let again = generate_mask(rec, bucket, seed).map_err(|e| e.to_string())?;
            ensure!(
                again.raster.to_png().unwrap() == m.raster.to_png().unwrap(),
                "{bucket:?} seed {seed}: not deterministic"
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn end_to_end() -> Outcome {
    let rt = runtime();
    let f = load_fixture();
    let dim = f.manifest.embedding_dim();
    let mut journals = Vec::new();
    for concurrency in [1, 8] {
        let engine = Engine::new(
            f.manifest.clone(),
            &f.root,
            &f.store,
            mock_gateway(fixture_world(), dim),
        )
        .map_err(|e| e.to_string())?;
        let runs_root = tempfile::tempdir().unwrap();
        let config =
            BatchConfig::new("fixture", RunOptions::default()).with_concurrency(concurrency);
        let runs = rt
            .block_on(engine.run_batch(f.manifest.queries(), &config, runs_root.path()))
            .map_err(|e| e.to_string())?;
        ensure!(
            runs.len() == f.manifest.queries().len(),
            "{} runs",
            runs.len()
        );
        let dir = run_dir(runs_root.path(), "fixture");
        for (run, case) in runs.iter().zip(f.manifest.queries()) {
            ensure!(run.is_ok(), "{}: {:?}", run.query_id, run.status);
            ensure!(
                run.candidates[0].image_id == case.relevant_ids[0],
                "{}: rank 1 is {}, planted {}",
                run.query_id,
                run.candidates[0].image_id,
                case.relevant_ids[0]
            );
            let output = imageio::decode_rgb(
                &std::fs::read(dir.join(run.output_image_ref.as_ref().unwrap())).unwrap(),
            )
            .map_err(|e| e.to_string())?;
            let target = engine
                .load_image(&case.target_image_id)
                .map_err(|e| e.to_string())?;
            let reference = engine
                .load_image(run.chosen_reference.as_ref().unwrap())
                .map_err(|e| e.to_string())?;
            let mask = Mask::load(&f.root.join(&case.mask.mask_ref)).unwrap();
            for (x, y, px) in output.enumerate_pixels() {
                let want = if mask.get(x, y) {
                    reference.get_pixel(x, y)
                } else {
                    target.get_pixel(x, y)
                };
                ensure!(
                    px == want,
                    "{}: pixel ({x},{y}) {:?} != {:?}",
                    run.query_id,
                    px,
                    want
                );
            }
        }
        journals.push(std::fs::read(dir.join(JOURNAL_FILE)).unwrap());
    }
    ensure!(
        journals[0] == journals[1],
        "journals differ between concurrency 1 and 8"
    );
    Ok(())
}

// ---------------------------------------------------------------------------

fn run_arm(
    rt: &tokio::runtime::Runtime,
    engine: &Engine,
    s: &Synth,
    run_id: &str,
    options: RunOptions,
) -> Result<Vec<PipelineRun>, String> {
    let config = BatchConfig::new(run_id, options).with_concurrency(4);
    let runs = rt
        .block_on(engine.run_batch(s.manifest.queries(), &config, &s.root().join("runs")))
        .map_err(|e| e.to_string())?;
    ensure!(
        runs.iter().all(PipelineRun::is_ok),
        "{run_id}: a run failed"
    );
    Ok(runs)
}

fn reasoning_ablation(rt: &tokio::runtime::Runtime) -> Outcome {
    let dim = 32;
    let s = synth(&[12, 12, 12], dim, 40);
    let mut world = MockWorld::new(40, dim);
    for case in s.manifest.queries() {
        let target = imageio::decode_rgb(
            &std::fs::read(
                s.root()
                    .join(format!("images/{}.png", case.target_image_id)),
            )
            .unwrap(),
        )
        .unwrap();
        let mask = Mask::load(&s.root().join(&case.mask.mask_ref)).unwrap();
        let text = format!("The hidden part matches {}.", case.query_id);
        world.plant_reasoning(&visible_region(&target, &mask).unwrap(), text.clone());
        world.plant_text(
            &text,
            s.store
                .get(&case.relevant_ids[0])
                .unwrap()
                .values()
                .to_vec(),
        );
    }
    let engine = Engine::new(
        s.manifest.clone(),
        s.root(),
        &s.store,
        mock_gateway(world, dim),
    )
    .map_err(|e| e.to_string())?;
    let with = run_arm(rt, &engine, &s, "with-reasoning", RunOptions::default())?;
    let without = run_arm(
        rt,
        &engine,
        &s,
        "without-reasoning",
        RunOptions {
            policy: CompositionPolicy::ImageOnly,
            ..Default::default()
        },
    )?;
    let arms = [
        Arm::from_runs("with", with),
        Arm::from_runs("without", without),
    ];
    let report = aggregate(&arms, &[1, 5], Grouping::ByBucket, RecallMode::HitRate)
        .map_err(|e| e.to_string())?;
    ensure!(
        report.rows.len() == 6,
        "{} rows, want 3 buckets × 2 arms",
        report.rows.len()
    );
    for pair in report.rows.chunks(2) {
        ensure!(
            pair[0].bucket == pair[1].bucket && pair[0].arm == "with" && pair[1].arm == "without",
            "rows not paired by bucket"
        );
    }
    for bucket in Bucket::ALL {
        let b = bucket.as_str();
        let w = report
            .value("with", b, "Recall@5")
            .ok_or("missing with row")?;
        let wo = report
            .value("without", b, "Recall@5")
            .ok_or("missing without row")?;
        ensure!(w > wo, "{b}: with-reasoning R@5 {w} not above {wo}");
    }
    Ok(())
}

fn chi_square_uniformity() -> Outcome {
    let s = synth(&[4, 5, 6], 8, 41);
    let foreign: Vec<String> = s.manifest.albums()[1..]
        .iter()
        .flat_map(|a| a.image_ids.iter().cloned())
        .collect();
    let draws = 11_000;
    let mut counts: HashMap<String, usize> = HashMap::new();
    for i in 0..draws {
        let id = wrong_reference_sample(&format!("probe{i}"), "album0", &s.manifest, 3)
            .map_err(|e| e.to_string())?;
        *counts.entry(id).or_default() += 1;
    }
    ensure!(
        counts.keys().all(|k| foreign.contains(k)),
        "sample outside the foreign pool"
    );
    let expected = draws as f64 / foreign.len() as f64;
    let chi2: f64 = foreign
        .iter()
        .map(|id| {
            let o = *counts.get(id).unwrap_or(&0) as f64;
            (o - expected).powi(2) / expected
        })
        .sum();
    // 0.999 quantile of chi-square with 10 degrees of freedom.
    ensure!(
        chi2 < 29.588,
        "chi-square {chi2} over {} cells",
        foreign.len()
    );
    Ok(())
}

fn wrong_reference_ablation(rt: &tokio::runtime::Runtime) -> Outcome {
    let dim = 48;
    let s = synth(&[9, 9, 9], dim, 42);
    let world = MockWorld::new(42, dim).with_encoder(MockEncoder::PixelGrid { grid: 4 });
    let gateway = mock_gateway(world, dim);
    let engine = Engine::new(s.manifest.clone(), s.root(), &s.store, gateway.clone())
        .map_err(|e| e.to_string())?;
    let correct = run_arm(rt, &engine, &s, "correct", RunOptions::default())?;
    let wrong = run_arm(
        rt,
        &engine,
        &s,
        "wrong",
        RunOptions {
            selection: SelectionMode::WrongReference,
            ..Default::default()
        },
    )?;
    let options = CompletionOptions {
        encoders: vec![EncoderKind::Clip],
        masked_only: false,
    };
    let mut arms = Vec::new();
    for (name, runs) in [("correct", &correct), ("wrong", &wrong)] {
        let dir = run_dir(&s.root().join("runs"), name);
        let mut samples = Vec::new();
        for (run, case) in runs.iter().zip(s.manifest.queries()) {
            let out = imageio::decode_rgb(
                &std::fs::read(dir.join(run.output_image_ref.as_ref().unwrap())).unwrap(),
            )
            .unwrap();
            let orig = engine.load_image(&case.target_image_id).unwrap();
            let mask = Mask::load(&s.root().join(&case.mask.mask_ref)).unwrap();
            let sample = rt
                .block_on(evaluate_completion(
                    &run.query_id,
                    run.bucket,
                    &out,
                    &orig,
                    &mask,
                    &gateway,
                    &options,
                ))
                .map_err(|e| e.to_string())?;
            samples.push(sample);
        }
        arms.push(CompletionArm {
            name: name.into(),
            samples,
        });
    }
    for (c, w) in correct.iter().zip(&wrong) {
        let (cr, wr) = (
            c.chosen_reference.as_ref().unwrap(),
            w.chosen_reference.as_ref().unwrap(),
        );
        ensure!(
            s.manifest.image(cr).is_some() && c.album_id == w.album_id,
            "bad runs"
        );
        ensure!(
            !s.manifest
                .album(&w.album_id)
                .unwrap()
                .image_ids
                .contains(wr),
            "wrong reference {wr} is in the album"
        );
    }
    let report = aggregate_completion(&arms, Grouping::ByBucket).map_err(|e| e.to_string())?;
    for bucket in Bucket::ALL {
        let b = bucket.as_str();
        let c = report
            .value("correct", b, "CLIP")
            .ok_or("missing correct row")?;
        let w = report
            .value("wrong", b, "CLIP")
            .ok_or("missing wrong row")?;
        ensure!(w < c, "{b}: wrong-reference similarity {w} not below {c}");
    }
    Ok(())
}

fn ablation_harness() -> Outcome {
    let rt = runtime();
    reasoning_ablation(&rt).map_err(|e| format!("reasoning arm: {e}"))?;
    chi_square_uniformity().map_err(|e| format!("uniformity: {e}"))?;
    wrong_reference_ablation(&rt).map_err(|e| format!("reference arm: {e}"))?;
    Ok(())
}

// ---------------------------------------------------------------------------

/// Pulls the four scores out of a raw judge reply without the library
/// parser: the reply is prose followed by one JSON object.
fn reparse(raw: &str) -> [f64; 4] {
    let start = raw.find('{').unwrap();
    let value: serde_json::Value = serde_json::from_str(&raw[start..]).unwrap();
    DIMENSIONS.map(|(field, _, _)| value[field].as_f64().unwrap())
}

fn judge_criteria() -> Outcome {
    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/rubric_prompt.txt");
    let golden = std::fs::read_to_string(&golden_path)
        .map_err(|e| format!("{}: {e}", golden_path.display()))?;
    let prompt = build_rubric_prompt(
        "masks/beach-beach-02-m0.png",
        "The masked region likely shows a red t-shirt with short sleeves, matching the pose of the person on the left.",
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        prompt == golden,
        "rubric prompt differs from the golden file"
    );

    let (s, w) = parse_scores(
        r#"{"evidence_grounding": 15, "structural_continuity": 14, "retrieval_discriminativeness": 13, "instruction_format_quality": 18, "rationale": "fine"}"#,
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        s.scores() == [15, 14, 13, 18] && w.is_empty(),
        "well-formed parse"
    );
    let (s, w) = parse_scores(
        r#"{"evidence_grounding": 25, "structural_continuity": 14, "retrieval_discriminativeness": 13, "instruction_format_quality": 18}"#,
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        s.scores()[0] == 20 && w.len() == 1,
        "clamp 25 -> 20 with warning: {:?} {w:?}",
        s.scores()
    );
    ensure!(
        matches!(
            parse_scores("I think it is fine."),
            Err(JudgeError::Unparseable(_))
        ),
        "prose accepted"
    );

    let rt = runtime();
    let dim = 16;
    let mut cases: Vec<JudgeCase> = (0..50)
        .map(|i| {
            let img = album_image(i % 6, i, 50);
            JudgeCase {
                query_id: format!("case{i:02}"),
                masked_png: imageio::encode_rgb_png(&img).unwrap(),
                instruction: Some(format!("Instruction number {i}: a blue jacket.")),
            }
        })
        .collect();
    let gateway = mock_gateway(MockWorld::new(50, dim), dim);
    let report = rt
        .block_on(judge_batch(&cases, &gateway, Some("mock-reasoning"), 8))
        .map_err(|e| e.to_string())?;
    ensure!(
        report.judged == 50 && report.excluded == 0,
        "judged {} excluded {}",
        report.judged,
        report.excluded
    );
    let mut sums = [0.0; 4];
    for c in &report.cases {
        let raw = c.responses.last().ok_or("no raw response recorded")?;
        for (s, v) in sums.iter_mut().zip(reparse(raw)) {
            *s += v;
        }
    }
    let means = report.means.as_ref().ok_or("no means")?;
    for ((field, _, _), sum) in DIMENSIONS.iter().zip(sums) {
        let want = sum / 50.0;
        ensure!(
            means[*field] == want,
            "{field}: mean {} vs recomputed {want}",
            means[*field]
        );
    }
    cases.reverse();
    let reversed = rt
        .block_on(judge_batch(&cases, &gateway, Some("mock-reasoning"), 3))
        .map_err(|e| e.to_string())?;
    ensure!(reversed.means == report.means, "means depend on case order");

    let same = MockWorld::new(50, dim).with_model_id(ProviderKind::Judge, "shared-vlm");
    let err = rt.block_on(judge_batch(
        &cases,
        &mock_gateway(same, dim),
        Some("shared-vlm"),
        2,
    ));
    ensure!(
        matches!(err, Err(JudgeError::SameModel(_))),
        "same-model judge accepted"
    );
    Ok(())
}

// ---------------------------------------------------------------------------

fn composition_degeneracy() -> Outcome {
    let dim = 64;
    let mut rng = rng_from(&[b"acceptance-compose"]);
    for i in 0..10_000u64 {
        let v = EmbeddingVector::new(
            random_unit(dim, &[b"v", &i.to_le_bytes()]),
            EmbeddingSource::Image,
        )
        .unwrap();
        let t = EmbeddingVector::new(
            random_unit(dim, &[b"t", &i.to_le_bytes()]),
            EmbeddingSource::Text,
        )
        .unwrap();
        let alpha: f64 = rng.random_range(0.0..1.0);
        let q = fuse(&v, &t, alpha).map_err(|e| e.to_string())?;
        ensure!(
            (q.norm() - 1.0).abs() <= 1e-5,
            "pair {i} alpha {alpha}: norm {}",
            q.norm()
        );
        if i % 100 == 0 {
            ensure!(
                fuse(&v, &t, 0.0).unwrap().values() == v.values(),
                "alpha 0 is not the image vector"
            );
            ensure!(
                fuse(&v, &t, 1.0).unwrap().values() == t.values(),
                "alpha 1 is not the text vector"
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        (
            "retrieval metrics match a brute-force scorer",
            metric_oracle,
        ),
        ("top_k equals the full-sort prefix", index_exactness),
        ("hand-derived AP, PSNR and SSIM values", hand_derived_values),
        (
            "dataset pipeline thresholds and determinism",
            pipeline_thresholds,
        ),
        (
            "generated masks hit their bucket and anchor",
            mask_generation,
        ),
        ("end-to-end mock pipeline on the fixture", end_to_end),
        ("ablation harness directions", ablation_harness),
        ("judge prompt, parsing and aggregation", judge_criteria),
        (
            "composition endpoints and unit norm",
            composition_degeneracy,
        ),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(()) => println!("acceptance {}: PASS  {name} ({secs:.2}s)", i + 1),
            Err(e) => {
                failed += 1;
                println!("acceptance {}: FAIL  {name} ({secs:.2}s): {e}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
