#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use albumfill_core::embedding::{EmbeddingSource, EmbeddingStore, EmbeddingVector};
use albumfill_core::gateway::mock::MockWorld;
use albumfill_core::imageio;
use albumfill_core::mask::{compute_mask_ratio, Bucket, Mask};
use albumfill_core::model::{
    load_manifest, Album, ImageRecord, Manifest, MaskSpec, PixelBox, QueryCase,
};
use albumfill_core::seed::rng_from;
use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/tiny")
}

pub struct Fixture {
    pub root: PathBuf,
    pub manifest: Arc<Manifest>,
    pub store: EmbeddingStore,
}

pub fn load_fixture() -> Fixture {
    let root = fixture_dir();
    let manifest = load_manifest(&root.join("manifest.json")).unwrap();
    let store = EmbeddingStore::load_from_dir(&root).unwrap();
    Fixture {
        root,
        manifest: Arc::new(manifest),
        store,
    }
}

pub fn fixture_world() -> MockWorld {
    let f = load_fixture();
    MockWorld::load(&f.root.join("mock_world.json"), f.manifest.embedding_dim()).unwrap()
}

pub const SIDE: u32 = 24;

/// Mask rectangles for a 24×24 image: 56/576, 192/576 and 432/576.
pub fn bucket_mask(bucket: Bucket, offset: u32) -> Mask {
    let mut m = Mask::new(SIDE, SIDE);
    match bucket {
        Bucket::Small => m.fill_rect(offset % 16, 4, 8, 7),
        Bucket::Medium => m.fill_rect(offset % 12, 2, 12, 16),
        Bucket::Large => m.fill_rect(0, offset % 6, 24, 18),
    }
    m
}

pub fn random_unit(dim: usize, parts: &[&[u8]]) -> Vec<f32> {
    let mut rng = rng_from(parts);
    let v: Vec<f32> = (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    EmbeddingVector::normalized(&v, EmbeddingSource::Image)
        .unwrap()
        .values()
        .to_vec()
}

/// A dataset written to a temporary directory: `sizes[a]` images in album
/// `a`, one query per image with buckets cycling small/medium/large and the
/// next image in the album as the relevant one.
pub struct Synth {
    pub dir: tempfile::TempDir,
    pub manifest: Arc<Manifest>,
    pub store: EmbeddingStore,
}

impl Synth {
    pub fn root(&self) -> &Path {
        self.dir.path()
    }
}

pub const PALETTE: [[u8; 3]; 6] = [
    [200, 40, 40],
    [40, 60, 200],
    [40, 170, 60],
    [220, 200, 40],
    [150, 50, 160],
    [30, 170, 170],
];

/// Album-coloured image: the album colour everywhere with per-image noise
/// and a small darker patch.
pub fn album_image(album: usize, index: usize, seed: u64) -> RgbImage {
    let base = PALETTE[album % PALETTE.len()];
    let mut rng = rng_from(&[
        b"synth-image",
        &seed.to_le_bytes(),
        &(album as u64).to_le_bytes(),
        &(index as u64).to_le_bytes(),
    ]);
    let (px, py) = (rng.random_range(0..16u32), rng.random_range(0..16u32));
    RgbImage::from_fn(SIDE, SIDE, |x, y| {
        let n: i16 = rng.random_range(-20..=20);
        let dark = x >= px && x < px + 8 && y >= py && y < py + 8;
        Rgb(base.map(|c| {
            let c = if dark { i16::from(c) / 2 } else { i16::from(c) };
            (c + n).clamp(0, 255) as u8
        }))
    })
}

pub fn synth(sizes: &[usize], dim: usize, seed: u64) -> Synth {
    let dir = tempfile::tempdir().unwrap();
    let mut images = Vec::new();
    let mut albums = Vec::new();
    let mut queries = Vec::new();
    let mut store = EmbeddingStore::new(dim);
    let mut q = 0usize;
    for (a, &n) in sizes.iter().enumerate() {
        let album_id = format!("album{a}");
        let ids: Vec<String> = (0..n).map(|i| format!("a{a}-img{i:03}")).collect();
        for (i, id) in ids.iter().enumerate() {
            let img = album_image(a, i, seed);
            imageio::write_file(
                &dir.path().join(format!("images/{id}.png")),
                &imageio::encode_rgb_png(&img).unwrap(),
            )
            .unwrap();
            images.push(ImageRecord {
                image_id: id.clone(),
                file_ref: format!("images/{id}.png"),
                width: SIDE,
                height: SIDE,
                person_boxes: vec![PixelBox::new(4, 4, 16, 16)],
                identity_id: Some(format!("{album_id}/id0000")),
            });
            let v = random_unit(dim, &[b"synth-vec", &seed.to_le_bytes(), id.as_bytes()]);
            store
                .insert(
                    id.clone(),
                    EmbeddingVector::new(v, EmbeddingSource::Image).unwrap(),
                )
                .unwrap();
        }
        for (i, id) in ids.iter().enumerate() {
            let bucket = Bucket::ALL[q % 3];
            let mask = bucket_mask(bucket, q as u32);
            let query_id = format!("q{q:04}");
            let mask_ref = format!("masks/{query_id}.png");
            mask.save(&dir.path().join(&mask_ref)).unwrap();
            let relevant = if n > 1 {
                vec![ids[(i + 1) % n].clone()]
            } else {
                Vec::new()
            };
            queries.push(QueryCase {
                query_id,
                album_id: album_id.clone(),
                target_image_id: id.clone(),
                mask: MaskSpec {
                    mask_ref,
                    mask_area_ratio: compute_mask_ratio(&mask).unwrap(),
                    bucket,
                },
                unjudgeable: relevant.is_empty(),
                relevant_ids: relevant,
                reasoning_text: None,
            });
            q += 1;
        }
        albums.push(Album {
            album_id: album_id.clone(),
            dominant_identity: format!("{album_id}/id0000"),
            image_ids: ids,
        });
    }
    let manifest = Manifest::new(dim, images, albums, queries).unwrap();
    albumfill_core::model::save_manifest(&manifest, &dir.path().join("manifest.json")).unwrap();
    Synth {
        dir,
        manifest: Arc::new(manifest),
        store,
    }
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}
