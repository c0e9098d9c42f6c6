mod common;

use std::collections::HashMap;
use std::sync::Arc;

use albumfill_core::compose::{visible_region, CompositionPolicy};
use albumfill_core::engine::{
    load_runs, read_journal, run_dir, wrong_reference_sample, BatchConfig, Engine, EngineError,
    RunOptions, RunStatus, SelectionMode, Stage, JOURNAL_FILE,
};
use albumfill_core::gateway::clock::MockClock;
use albumfill_core::gateway::mock::{image_digest, MockWorld};
use albumfill_core::gateway::{CallPolicy, Gateway, ProviderKind};
use albumfill_core::imageio;
use common::*;

fn engine_with(s: &Synth, world: MockWorld) -> Engine {
    let dim = s.manifest.embedding_dim();
    let g = Gateway::new(Arc::new(world), dim)
        .with_clock(Arc::new(MockClock::new()))
        .with_policy_all(CallPolicy {
            timeout: std::time::Duration::from_secs(10),
            max_retries: 1,
            max_concurrency: 8,
        });
    Engine::new(s.manifest.clone(), s.root(), &s.store, Arc::new(g)).unwrap()
}

#[tokio::test]
async fn auto_top1_picks_rank_one_and_excludes_target() {
    let s = synth(&[6, 4], 16, 1);
    let e = engine_with(&s, MockWorld::new(1, 16));
    for case in s.manifest.queries() {
        let out = e
            .run_query(e.resolve_case(case).unwrap(), &RunOptions::default(), None)
            .await
            .unwrap();
        assert!(out.run.is_ok());
        assert_eq!(
            out.run.chosen_reference.as_deref(),
            Some(out.run.candidates[0].image_id.as_str())
        );
        assert!(out
            .run
            .candidates
            .iter()
            .all(|c| c.image_id != case.target_image_id));
        assert!(out.run.candidates.len() <= 5);
        let output = out.output.unwrap();
        let target = e.load_image(&case.target_image_id).unwrap();
        assert_eq!(output.dimensions(), target.dimensions());
        let mask = e.resolve_case(case).unwrap().mask;
        for (x, y, px) in output.enumerate_pixels() {
            if !mask.get(x, y) {
                assert_eq!(px, target.get_pixel(x, y));
            }
        }
    }
}

#[tokio::test]
async fn manual_choice_outside_top_k_is_rejected() {
    let s = synth(&[8], 16, 2);
    let e = engine_with(&s, MockWorld::new(2, 16));
    let case = &s.manifest.queries()[0];
    let options = RunOptions {
        k: 3,
        selection: SelectionMode::Manual,
        ..Default::default()
    };
    let probe = e
        .run_query(
            e.resolve_case(case).unwrap(),
            &RunOptions {
                k: 3,
                ..Default::default()
            },
            None,
        )
        .await
        .unwrap();
    let outside = s.manifest.albums()[0]
        .image_ids
        .iter()
        .find(|id| {
            **id != case.target_image_id && !probe.run.candidates.iter().any(|c| &c.image_id == *id)
        })
        .unwrap()
        .clone();
    let err = e
        .run_query(e.resolve_case(case).unwrap(), &options, Some(&outside))
        .await
        .unwrap_err();
    assert!(matches!(err, EngineError::InvalidManualChoice(_)), "{err}");

    let inside = probe.run.candidates[2].image_id.clone();
    let ok = e
        .run_query(e.resolve_case(case).unwrap(), &options, Some(&inside))
        .await
        .unwrap();
    assert_eq!(ok.run.chosen_reference, Some(inside));
    assert!(matches!(
        e.run_query(e.resolve_case(case).unwrap(), &options, None)
            .await,
        Err(EngineError::ManualChoiceRequired)
    ));
}

#[tokio::test]
async fn image_only_never_calls_reasoning() {
    let s = synth(&[5, 5], 16, 3);
    let world = Arc::new(MockWorld::new(3, 16));
    let g = Arc::new(Gateway::new(world.clone(), 16).with_clock(Arc::new(MockClock::new())));
    let e = Engine::new(s.manifest.clone(), s.root(), &s.store, g.clone()).unwrap();
    let options = RunOptions {
        policy: CompositionPolicy::ImageOnly,
        ..Default::default()
    };
    for case in s.manifest.queries() {
        let out = e
            .run_query(e.resolve_case(case).unwrap(), &options, None)
            .await
            .unwrap();
        assert_eq!(out.run.reasoning_text, None);
    }
    assert_eq!(g.call_count(ProviderKind::Reasoning), 0);
    assert_eq!(world.calls(ProviderKind::Reasoning), 0);
}

#[tokio::test]
async fn image_only_ranking_matches_raw_visible_embedding() {
    let s = synth(&[9], 16, 4);
    let e = engine_with(&s, MockWorld::new(4, 16));
    let options = RunOptions {
        policy: CompositionPolicy::ImageOnly,
        k: 8,
        ..Default::default()
    };
    for case in s.manifest.queries() {
        let input = e.resolve_case(case).unwrap();
        let target = e.load_image(&case.target_image_id).unwrap();
        let visible =
            imageio::encode_rgb_png(&visible_region(&target, &input.mask).unwrap()).unwrap();
        let v = e.gateway().embed_image(&visible).await.unwrap();
        let exclude = [case.target_image_id.clone()].into();
        let direct = e
            .index(&case.album_id)
            .unwrap()
            .top_k(&v, 8, &exclude)
            .unwrap();
        let out = e.run_query(input, &options, None).await.unwrap();
        assert_eq!(out.run.candidates, direct.items);
    }
}

#[tokio::test]
async fn wrong_reference_comes_from_another_album() {
    let s = synth(&[4, 3], 16, 5);
    let e = engine_with(&s, MockWorld::new(5, 16));
    let options = RunOptions {
        selection: SelectionMode::WrongReference,
        seed: 9,
        ..Default::default()
    };
    for case in s.manifest.queries() {
        let out = e
            .run_query(e.resolve_case(case).unwrap(), &options, None)
            .await
            .unwrap();
        let chosen = out.run.chosen_reference.unwrap();
        let album = &s.manifest.album(&case.album_id).unwrap().image_ids;
        assert!(!album.contains(&chosen));
        assert_eq!(
            chosen,
            wrong_reference_sample(&case.query_id, &case.album_id, &s.manifest, 9).unwrap()
        );
    }
}

#[test]
fn wrong_reference_is_uniform() {
    let s = synth(&[2, 3, 5], 8, 6);
    let mut counts: HashMap<String, usize> = HashMap::new();
    let draws = 10_000u64;
    for seed in 0..draws {
        let id = wrong_reference_sample("q0000", "album0", &s.manifest, seed).unwrap();
        assert!(!id.starts_with("a0-"));
        *counts.entry(id).or_default() += 1;
    }
    assert_eq!(counts.len(), 8);
    let expected = draws as f64 / 8.0;
    let sigma = (draws as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
    let mut chi2 = 0.0;
    for c in counts.values() {
        let c = *c as f64;
        assert!((c - expected).abs() < 3.0 * sigma, "{counts:?}");
        chi2 += (c - expected).powi(2) / expected;
    }
    // 99.9th percentile of chi-square with 7 degrees of freedom.
    assert!(chi2 < 24.322, "chi2 = {chi2}");
}

#[tokio::test]
async fn empty_batch_is_empty() {
    let s = synth(&[3], 8, 7);
    let e = engine_with(&s, MockWorld::new(7, 8));
    let runs_root = s.root().join("runs");
    let runs = e
        .run_batch(
            &[],
            &BatchConfig::new("empty", RunOptions::default()),
            &runs_root,
        )
        .await
        .unwrap();
    assert!(runs.is_empty());
}

#[tokio::test]
async fn poisoned_case_fails_alone() {
    let s = synth(&[4, 4], 16, 8);
    let poisoned = &s.manifest.queries()[2];
    let mut world = MockWorld::new(8, 16);
    {
        let mask =
            albumfill_core::mask::Mask::load(&s.root().join(&poisoned.mask.mask_ref)).unwrap();
        let target = imageio::decode_rgb(
            &std::fs::read(
                s.root()
                    .join(format!("images/{}.png", poisoned.target_image_id)),
            )
            .unwrap(),
        )
        .unwrap();
        world.poison(image_digest(&visible_region(&target, &mask).unwrap()));
    }
    let e = engine_with(&s, world);
    let runs_root = s.root().join("runs");
    let runs = e
        .run_batch(
            s.manifest.queries(),
            &BatchConfig::new("p", RunOptions::default()),
            &runs_root,
        )
        .await
        .unwrap();
    assert_eq!(runs.len(), 8);
    for (run, case) in runs.iter().zip(s.manifest.queries()) {
        assert_eq!(run.query_id, case.query_id);
        if case.query_id == poisoned.query_id {
            assert!(
                matches!(&run.status, RunStatus::Failed { stage: Stage::Reason, code, .. } if code == "unavailable"),
                "{:?}",
                run.status
            );
        } else {
            assert!(run.is_ok(), "{:?}", run.status);
            assert!(run_dir(&runs_root, "p")
                .join(run.output_image_ref.as_ref().unwrap())
                .exists());
        }
    }
}

#[tokio::test]
async fn completion_failure_keeps_retrieval() {
    let s = synth(&[4], 16, 9);
    let world = MockWorld::new(9, 16)
        .with_completion(albumfill_core::gateway::mock::CompletionBehavior::WrongSize);
    let e = engine_with(&s, world);
    let case = &s.manifest.queries()[0];
    let out = e
        .run_query(e.resolve_case(case).unwrap(), &RunOptions::default(), None)
        .await
        .unwrap();
    assert!(
        matches!(&out.run.status, RunStatus::CompletionFailed { code, .. } if code == "shape_mismatch")
    );
    assert!(out.run.reasoning_text.is_some());
    assert_eq!(out.run.candidates.len(), 3);
    assert!(out.output.is_none());
}

#[tokio::test]
async fn batch_is_independent_of_concurrency_and_resumable() {
    let s = synth(&[25, 25, 25, 25], 32, 10);
    let cases = s.manifest.queries();
    assert_eq!(cases.len(), 100);
    let e = engine_with(&s, MockWorld::new(10, 32));
    let root = s.root().join("runs");
    let options = RunOptions::default();
    let one = e
        .run_batch(
            cases,
            &BatchConfig::new("c1", options.clone()).with_concurrency(1),
            &root,
        )
        .await
        .unwrap();
    let eight = e
        .run_batch(
            cases,
            &BatchConfig::new("c8", options.clone()).with_concurrency(8),
            &root,
        )
        .await
        .unwrap();
    assert_eq!(one, eight);
    let j1 = read(&root.join("c1").join(JOURNAL_FILE));
    let j8 = read(&root.join("c8").join(JOURNAL_FILE));
    assert_eq!(j1, j8);
    assert_eq!(
        read(&root.join("c1/config.json")).replace("\"c1\"", "\"c8\""),
        read(&root.join("c8/config.json"))
    );
    for run in &one {
        let a =
            std::fs::read(root.join("c1").join(run.output_image_ref.as_ref().unwrap())).unwrap();
        let b =
            std::fs::read(root.join("c8").join(run.output_image_ref.as_ref().unwrap())).unwrap();
        assert_eq!(a, b);
    }

    // Interrupted after 40 cases, with a torn record at the end.
    let cfg = BatchConfig::new("resume", options.clone()).with_concurrency(4);
    e.run_batch(&cases[..40], &cfg, &root).await.unwrap();
    let journal = root.join("resume").join(JOURNAL_FILE);
    let mut text = read(&journal);
    text.push_str(r#"{"query_id":"q0040","stage":"reason","data":{"te"#);
    std::fs::write(&journal, text).unwrap();
    let resumed = e.run_batch(cases, &cfg, &root).await.unwrap();
    assert_eq!(resumed, one);
    assert_eq!(read(&journal), j1);
    assert_eq!(load_runs(&root.join("resume")).unwrap(), one);

    // A different configuration under the same run id is refused.
    let other = BatchConfig::new("resume", RunOptions { k: 3, ..options });
    assert!(matches!(
        e.run_batch(cases, &other, &root).await,
        Err(EngineError::ConfigMismatch { .. })
    ));
}

#[tokio::test]
async fn journal_has_one_record_per_stage() {
    let s = synth(&[3, 3], 16, 11);
    let e = engine_with(&s, MockWorld::new(11, 16));
    let root = s.root().join("runs");
    e.run_batch(
        s.manifest.queries(),
        &BatchConfig::new("j", RunOptions::default()),
        &root,
    )
    .await
    .unwrap();
    let records = read_journal(&root.join("j").join(JOURNAL_FILE)).unwrap();
    let stages: Vec<&str> = records
        .iter()
        .filter(|r| r.query_id == "q0000")
        .map(|r| r.stage.as_str())
        .collect();
    assert_eq!(
        stages,
        ["reason", "compose", "retrieve", "select", "complete", "result"]
    );
    let reason = records.iter().find(|r| r.stage == "reason").unwrap();
    assert_eq!(
        reason.data["instruction"],
        albumfill_core::gateway::DEFAULT_INSTRUCTION
    );
}
