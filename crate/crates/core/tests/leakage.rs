mod common;

use std::collections::BTreeSet;

use cmr_ssl::cli::{gen_data, ExperimentConfig};
use cmr_ssl::data::{load_manifest, patient_split, subsample_fraction, DatasetManifest, Split};
use cmr_ssl::labels::SequenceLabel;
use cmr_ssl::training::{evaluate, finetune, pretrain_scp, train_supervised, SupervisedConfig};
use common::{tiny_scp, tiny_supervised};

fn assert_disjoint(m: &DatasetManifest, context: &str) {
    let sets: Vec<BTreeSet<&str>> = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|&s| m.patients(s))
        .collect();
    for a in 0..3 {
        for b in a + 1..3 {
            let shared: Vec<_> = sets[a].intersection(&sets[b]).collect();
            assert!(shared.is_empty(), "{context}: splits {a} and {b} share {shared:?}");
        }
    }
}

fn generated(seed: u64, patients: usize) -> (tempfile::TempDir, Vec<DatasetManifest>) {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        seed,
        patients,
        external_patients: patients,
        ..ExperimentConfig::default()
    };
    let manifests = gen_data(&config, dir.path())
        .unwrap()
        .iter()
        .map(|d| load_manifest(&d.manifest_path).unwrap())
        .collect();
    (dir, manifests)
}

#[test]
fn generated_splits_stay_disjoint_through_any_resplit_and_subsample() {
    for seed in 0..3 {
        let (_dir, manifests) = generated(seed, 12 + 5 * seed as usize);
        for m in manifests {
            assert_disjoint(&m, "generated");
            let ratios = [[0.7, 0.1, 0.2], [0.5, 0.25, 0.25], [1.0, 0.0, 0.0], [0.34, 0.33, 0.33]];
            for (i, r) in ratios.iter().enumerate() {
                let resplit = patient_split(&m, *r, seed + i as u64).unwrap();
                assert_disjoint(&resplit, "resplit");
                let mut cur = resplit;
                for (j, f) in [1.0, 0.3, 0.1, 0.01].iter().enumerate() {
                    cur = subsample_fraction(&cur, *f, seed * 10 + j as u64).unwrap();
                    assert_disjoint(&cur, "subsample");
                }
            }
        }
    }
}

#[test]
fn training_never_reads_test_pixels() {
    let (_dir, manifests) = generated(5, 15);
    let m = &manifests[0];
    let audit = m.audit();
    audit.reset();

    let (scp, _) = pretrain_scp(m, &tiny_scp(5)).unwrap();
    assert_eq!(audit.reads(Split::Test), 0, "pretraining");
    assert!(audit.reads(Split::Train) > 0);

    let (ft, _) = finetune(&scp, m, &tiny_supervised(5)).unwrap();
    assert_eq!(audit.reads(Split::Test), 0, "fine-tuning");

    let partial = SupervisedConfig {
        fraction: 0.3,
        ..tiny_supervised(5)
    };
    finetune(&scp, m, &partial).unwrap();
    train_supervised(m, &scp.vit, &tiny_supervised(5)).unwrap();
    assert_eq!(audit.reads(Split::Test), 0, "supervised training");

    // the audit does see evaluation reads
    evaluate(&ft, m, Split::Test, &SequenceLabel::ALL).unwrap();
    assert_eq!(audit.reads(Split::Test), m.indices(Split::Test).len() as u64);
}
