//! Regenerates the three-album demo dataset under `fixtures/tiny`.
//!
//! cargo run -p albumfill-core --example make_fixture -- fixtures/tiny

use std::path::{Path, PathBuf};
use std::sync::Arc;

use albumfill_core::compose::visible_region;
use albumfill_core::embedding::{EmbeddingSource, EmbeddingStore, EmbeddingVector};
use albumfill_core::engine::{Engine, RunOptions};
use albumfill_core::gateway::mock::{MockWorld, MockWorldFile, PlantedReasoning, PlantedText};
use albumfill_core::gateway::Gateway;
use albumfill_core::imageio;
use albumfill_core::model::{ImageRecord, PixelBox, MANIFEST_VERSION};
use albumfill_core::pipeline::{
    run_pipeline, write_pipeline_output, Detection, PipelineConfig, RawAlbum, RawFace, RawManifest,
};
use albumfill_core::seed::rng_from;
use image::{Rgb, RgbImage};
use rand::Rng;

const DIM: usize = 32;
const FACE_DIM: usize = 8;
const W: u32 = 64;
const H: u32 = 48;
const SEED: u64 = 7;
const WORLD_SEED: u64 = 11;
const ALBUMS: [&str; 3] = ["beach", "birthday", "hike"];

fn axis(i: usize, dim: usize) -> Vec<f32> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

fn unit(v: &[f32]) -> Vec<f32> {
    EmbeddingVector::normalized(v, EmbeddingSource::Image)
        .unwrap()
        .values()
        .to_vec()
}

/// Pair `p` shares axis `p`; each member adds half of its own axis, so
/// partners sit at cosine 0.8 and everything else is orthogonal.
fn image_vector(pair: usize, member: usize) -> Vec<f32> {
    let mut v = axis(pair, DIM);
    v[6 + 2 * pair + member] = 0.5;
    unit(&v)
}

fn draw(album: usize, pair: usize, member: usize, person: PixelBox) -> RgbImage {
    let mut rng = rng_from(&[
        b"fixture-image",
        &(album as u64).to_le_bytes(),
        &(pair * 2 + member).to_le_bytes(),
    ]);
    let bg = [[70u8, 130, 180], [200, 120, 60], [60, 140, 80]][album];
    let shirt = [
        [220u8, 40, 40],
        [40, 40, 220],
        [230, 200, 40],
        [150, 60, 170],
        [30, 160, 160],
        [240, 240, 240],
    ][pair];
    RgbImage::from_fn(W, H, |x, y| {
        let inside =
            x >= person.x && x < person.x + person.w && y >= person.y && y < person.y + person.h;
        let head = y < person.y + person.h / 4;
        let base = match (inside, head) {
            (true, true) => [235, 190, 160],
            (true, false) => shirt,
            _ => bg,
        };
        let n: i16 = rng.random_range(-6..=6);
        Rgb(base.map(|c| (i16::from(c) + n).clamp(0, 255) as u8))
    })
}

fn main() {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "fixtures/tiny".into()),
    );
    std::fs::create_dir_all(out.join("images")).unwrap();

    let mut images = Vec::new();
    let mut albums = Vec::new();
    let mut detections = Vec::new();
    let mut faces = Vec::new();
    let mut gt = EmbeddingStore::new(DIM);
    for (a, name) in ALBUMS.iter().enumerate() {
        let mut ids = Vec::new();
        for i in 0..4 {
            let (pair, member) = (2 * a + i / 2, i % 2);
            let id = format!("{name}-{:02}", i + 1);
            let person = PixelBox::new(12 + 8 * (i as u32 % 2), 4, 28, 40);
            let png = imageio::encode_rgb_png(&draw(a, pair, member, person)).unwrap();
            imageio::write_file(&out.join(format!("images/{id}.png")), &png).unwrap();
            images.push(ImageRecord {
                image_id: id.clone(),
                file_ref: format!("images/{id}.png"),
                width: W,
                height: H,
                person_boxes: Vec::new(),
                identity_id: None,
            });
            detections.push(Detection {
                image_id: id.clone(),
                boxes: vec![person],
            });
            let mut rng = rng_from(&[b"fixture-face", id.as_bytes()]);
            let mut face = axis(a, FACE_DIM);
            for v in &mut face {
                *v += rng.random_range(-0.1..0.1);
            }
            faces.push(RawFace {
                image_id: id.clone(),
                face_box: PixelBox::new(person.x + 8, person.y, 12, 10),
                values: face,
            });
            gt.insert(
                id.clone(),
                EmbeddingVector::new(image_vector(pair, member), EmbeddingSource::Image).unwrap(),
            )
            .unwrap();
            ids.push(id);
        }
        // One photo per album that the pipeline should leave out.
        let extra = format!("{name}-05");
        let (boxes, face_axis) = match a {
            0 => (
                (0..21)
                    .map(|k| PixelBox::new(k * 3 % 50, 0, 12, 20))
                    .collect(),
                Some(a),
            ),
            1 => (vec![PixelBox::new(2, 2, 6, 5)], Some(a)),
            _ => (vec![PixelBox::new(10, 4, 30, 40)], Some(5)),
        };
        let bg = draw(a, 2 * a, 0, PixelBox::new(0, 0, 1, 1));
        imageio::write_file(
            &out.join(format!("images/{extra}.png")),
            &imageio::encode_rgb_png(&bg).unwrap(),
        )
        .unwrap();
        images.push(ImageRecord {
            image_id: extra.clone(),
            file_ref: format!("images/{extra}.png"),
            width: W,
            height: H,
            person_boxes: Vec::new(),
            identity_id: None,
        });
        detections.push(Detection {
            image_id: extra.clone(),
            boxes,
        });
        if let Some(fa) = face_axis {
            faces.push(RawFace {
                image_id: extra.clone(),
                face_box: PixelBox::new(12, 4, 10, 10),
                values: axis(fa, FACE_DIM),
            });
        }
        gt.insert(
            extra.clone(),
            EmbeddingVector::new(unit(&axis(31 - a, DIM)), EmbeddingSource::Image).unwrap(),
        )
        .unwrap();
        ids.push(extra);
        albums.push(RawAlbum {
            album_id: name.to_string(),
            image_ids: ids,
        });
    }

    let raw = RawManifest {
        version: MANIFEST_VERSION,
        embedding_dim: DIM,
        images,
        albums: Some(albums),
        detections,
        faces,
    };
    std::fs::write(
        out.join("raw.json"),
        serde_json::to_string_pretty(&raw).unwrap() + "\n",
    )
    .unwrap();
    let mut jsonl = Vec::new();
    gt.write_jsonl(&mut jsonl).unwrap();
    std::fs::write(out.join("gt_embeddings.jsonl"), jsonl).unwrap();

    let config = PipelineConfig {
        seed: SEED,
        ..Default::default()
    };
    let built = run_pipeline(&raw, &gt, &config).unwrap();
    write_pipeline_output(&built, &out).unwrap();

    // Plant one reasoning string per query whose text embedding is the
    // target's partner, making the partner the nearest neighbour.
    let mut world = MockWorldFile {
        seed: WORLD_SEED,
        ..Default::default()
    };
    for q in built.manifest.queries() {
        let partner = &q.relevant_ids[0];
        let text = format!(
            "The masked region shows the same person as in {partner}, wearing the same top."
        );
        world.planted_reasoning.push(PlantedReasoning {
            image: format!("images/{}.png", q.target_image_id),
            mask: q.mask.mask_ref.clone(),
            text: text.clone(),
        });
        world.planted_texts.push(PlantedText {
            text,
            values: gt.get(partner).unwrap().values().to_vec(),
        });
    }
    std::fs::write(
        out.join("mock_world.json"),
        serde_json::to_string_pretty(&world).unwrap() + "\n",
    )
    .unwrap();

    check(&out, &built.manifest, &built.embeddings, &world);
    println!(
        "wrote {} ({} queries)",
        out.display(),
        built.manifest.queries().len()
    );
}

fn check(
    root: &Path,
    manifest: &albumfill_core::model::Manifest,
    store: &EmbeddingStore,
    world: &MockWorldFile,
) {
    let mock = MockWorld::from_file(world, root, DIM).unwrap();
    let gateway = Arc::new(Gateway::new(Arc::new(mock), DIM));
    let manifest = Arc::new(
        albumfill_core::model::Manifest::from_json(&manifest.to_json(), "fixture").unwrap(),
    );
    let engine = Engine::new(manifest.clone(), root, store, gateway).unwrap();
    let rt = tokio::runtime::Runtime::new().unwrap();
    for q in manifest.queries() {
        let input = engine.resolve_case(q).unwrap();
        let target = engine.load_image(&q.target_image_id).unwrap();
        let _ = visible_region(&target, &input.mask).unwrap();
        let outcome = rt
            .block_on(engine.run_query(input, &RunOptions::default(), None))
            .unwrap();
        assert_eq!(
            outcome.run.candidates[0].image_id, q.relevant_ids[0],
            "{}: planted neighbour not at rank 1",
            q.query_id
        );
    }
}
