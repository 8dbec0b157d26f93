use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vlaq_core::aggregation::assign_sinkhorn;
use vlaq_core::config::RunConfig;
use vlaq_core::io::descriptors::Role;
use vlaq_core::io::manifest::DatasetManifest;
use vlaq_core::io::synth::{generate_synthetic, SynthSpec};
use vlaq_core::model::Model;
use vlaq_core::pipeline::{encode_manifest, encode_synthetic, evaluate};
use vlaq_core::retrieval::{recall_at_k, DescriptorIndex};
use vlaq_core::tensor::{l2_normalize, Matrix, NORM_EPS};
use vlaq_core::{Error, FormatErrorKind};

fn unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let v: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    l2_normalize(&v, NORM_EPS).unwrap()
}

fn mean_token(m: &Matrix) -> Vec<f32> {
    let n = m.rows() as f32;
    (0..m.cols())
        .map(|j| (0..m.rows()).map(|i| m.get(i, j)).sum::<f32>() / n)
        .collect()
}

#[test]
fn random_descriptors_recall_at_chance() {
    let places = 32;
    let trials = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut hits = 0.0;
    for _ in 0..trials {
        let index = DescriptorIndex::build((0..places).map(|p| (format!("db{p:02}"), unit(32, &mut rng)))).unwrap();
        let queries: Vec<(String, Vec<f32>)> = (0..places).map(|p| (format!("q{p:02}"), unit(32, &mut rng))).collect();
        let positives: BTreeMap<String, BTreeSet<String>> = (0..places)
            .map(|p| (format!("q{p:02}"), BTreeSet::from([format!("db{p:02}")])))
            .collect();
        let report = recall_at_k("chance", &index, &queries, &positives, &[1]).unwrap();
        hits += report.recall_at(1).unwrap();
    }
    let r1 = hits / trials as f64;
    // 32 000 Bernoulli(1/32) draws: standard error about 0.001
    assert!((r1 - 1.0 / 32.0).abs() < 0.005, "R@1 {r1}");
}

#[test]
fn low_noise_places_are_separable_by_mean_token() {
    let ds = generate_synthetic(&SynthSpec {
        sigma: 0.05,
        ..SynthSpec::default()
    })
    .unwrap();
    let centers: Vec<Vec<f32>> = ds.centers.iter().map(mean_token).collect();
    let mut correct = 0;
    for img in &ds.images {
        let x = mean_token(&img.dino.tokens);
        let dist = |c: &Vec<f32>| c.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f32>();
        let best = (0..centers.len())
            .min_by(|&a, &b| dist(&centers[a]).total_cmp(&dist(&centers[b])))
            .unwrap();
        correct += usize::from(best == img.place);
    }
    let acc = correct as f64 / ds.images.len() as f64;
    assert!(acc >= 0.95, "nearest-center accuracy {acc}");
}

#[test]
fn sinkhorn_six_by_four_reference_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scores = Matrix::from_fn(6, 4, |_, _| rng.sample::<f32, _>(StandardNormal));
    let a = assign_sinkhorn(&scores, 100, 1e-6).unwrap();
    assert!(a.converged && a.iterations <= 100);
    for r in a.alpha.row_sums() {
        assert!((r - 1.0 / 6.0).abs() <= 1e-6);
    }
    for c in a.alpha.column_sums() {
        assert!((c - 1.0 / 4.0).abs() <= 1e-6);
    }
}

fn small_spec() -> SynthSpec {
    SynthSpec {
        places: 4,
        images_per_place: 2,
        dim: 8,
        tokens: 4,
        ..SynthSpec::default()
    }
}

fn small_model(cfg: &RunConfig) -> Model {
    Model::init(cfg.model(8, 8), cfg.seed).unwrap()
}

#[test]
fn files_on_disk_reproduce_in_memory_descriptors() {
    let ds = generate_synthetic(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let manifest = DatasetManifest::load(&dir.path().join("manifest.toml")).unwrap();
    let model = small_model(&RunConfig::default());
    let from_disk = encode_manifest(&model, &manifest).unwrap();
    assert_eq!(from_disk, encode_synthetic(&model, &ds).unwrap());
    assert_eq!(from_disk.with_role(Role::Query).count(), 4);
    let report = evaluate(&from_disk, &manifest, &[1, 2, 8]).unwrap();
    assert_eq!(report.recall_at(8), Some(1.0));
}

#[test]
fn corrupted_token_file_reports_crc_mismatch() {
    let ds = generate_synthetic(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let victim = dir.path().join("tokens").join("db_p001_00.clip.vprt");
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 5;
    bytes[last] ^= 0x40;
    std::fs::write(&victim, bytes).unwrap();

    let manifest = DatasetManifest::load(&dir.path().join("manifest.toml")).unwrap();
    match encode_manifest(&small_model(&RunConfig::default()), &manifest) {
        Err(
            e @ Error::Format {
                kind: FormatErrorKind::CrcMismatch,
                ..
            },
        ) => {
            assert_eq!(e.exit_code(), 1);
            assert!(e.to_string().contains("db_p001_00.clip.vprt"));
        }
        other => panic!("expected CRC mismatch, got {other:?}"),
    }
}

#[test]
fn eval_rejects_descriptor_file_missing_a_query() {
    let ds = generate_synthetic(&small_spec()).unwrap();
    let manifest = ds.manifest();
    let mut file = encode_synthetic(&small_model(&RunConfig::default()), &ds).unwrap();
    file.records.retain(|r| r.id != "q_p002_00");
    let err = evaluate(&file, &manifest, &[1]).unwrap_err();
    assert!(err.to_string().contains("q_p002_00"));
}

#[test]
fn fusion_variant_changes_descriptors() {
    let ds = generate_synthetic(&small_spec()).unwrap();
    let mut cfg = RunConfig::default();
    let residual = encode_synthetic(&small_model(&cfg), &ds).unwrap();
    cfg = RunConfig::parse("fusion = \"film\"").unwrap();
    let film = encode_synthetic(&small_model(&cfg), &ds).unwrap();
    assert_ne!(residual, film);
}
