//! Stored soft labels equal the teacher's output on the replayed collages.

mod common;

use d3m::artifact::DistilledArtifact;
use d3m::data::LabelPrecision;
use d3m::diffusion::PromptTemplate;
use d3m::labeler::{cell_probabilities, make_records, replay, LabelConfig};
use d3m::data::PromptEmbedding;
use d3m::diffusion::Backend;
use d3m::trainer::LabelMode;

use common::{build_world, World, WorldScale};

fn max_gap(world: &World, precision: LabelPrecision, tau: f32) -> f32 {
    let b = &world.backend;
    let template = PromptTemplate::photo_of();
    let cfg = LabelConfig {
        ipc: 8,
        mode: LabelMode::Soft,
        precision,
        temperature: tau,
        base_seed: 5,
        ..Default::default()
    };
    let mut gap = 0.0f32;
    for (c, name) in world.names.iter().enumerate() {
        let prompt = PromptEmbedding::new(c as u32, b.word_embedding(name).unwrap()).unwrap();
        let records = make_records(b, &template, &prompt, Some(&world.teacher), &cfg).unwrap();
        assert_eq!(records.len(), 2);
        for rec in &records {
            let (collage, rows) = replay(b, &template, &prompt, rec, cfg.grid, world.names.len(), None).unwrap();
            let fresh = cell_probabilities(&world.teacher, &collage.pixels, cfg.grid, tau).unwrap();
            for (k, row) in rows.iter().enumerate() {
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-3, "row {k} sums to {sum}");
                for (j, p) in row.iter().enumerate() {
                    gap = gap.max((p - fresh[k * world.names.len() + j]).abs());
                }
            }
        }
    }
    gap
}

#[test]
fn recomputed_labels_match_stored_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let world = build_world(tmp.path(), &WorldScale::tiny());
    let f32_gap = max_gap(&world, LabelPrecision::F32, 1.0);
    assert!(f32_gap < 1e-5, "f32 gap {f32_gap}");
    let f16_gap = max_gap(&world, LabelPrecision::F16, 2.0);
    assert!(f16_gap < 2e-3, "f16 gap {f16_gap}");
}

#[test]
fn labels_survive_artifact_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let world = build_world(&tmp.path().join("w"), &WorldScale::tiny());
    let b = &world.backend;
    let template = PromptTemplate::photo_of();
    let cfg = LabelConfig {
        ipc: 4,
        precision: LabelPrecision::F16,
        ..Default::default()
    };
    let entries = world
        .names
        .iter()
        .enumerate()
        .map(|(c, n)| {
            let prompt = PromptEmbedding::new(c as u32, b.word_embedding(n).unwrap()).unwrap();
            let records = make_records(b, &template, &prompt, Some(&world.teacher), &cfg).unwrap();
            d3m::artifact::ClassEntry { prompt, records }
        })
        .collect();
    let a = d3m::pipeline::pack(b, &template, world.names.len(), &cfg, entries).unwrap();
    let path = tmp.path().join("a.d3m");
    a.save(&path).unwrap();
    assert_eq!(DistilledArtifact::load(&path).unwrap(), a);
}
