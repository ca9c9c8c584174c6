use std::path::Path;
use std::process::Command;

use fedxval::attacks::{AttackKind, AttackSpec, ScalingSpec};
use fedxval::federation::Mode;
use fedxval::harness::config::ExperimentConfig;
use fedxval::harness::idx::{encode_images, encode_labels, write_file};
use fedxval::harness::{measure_subtask, partition_iid, partition_noniid_shards, prepare, run_experiment, synth_dataset};
use fedxval::model::{init_model, local_train, loss};
use fedxval::{Dataset, ModelSpec, TrainConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn keys(data: &Dataset) -> Vec<(usize, Vec<u64>)> {
    let mut k: Vec<_> = data
        .samples()
        .iter()
        .map(|s| (s.label, s.features.iter().map(|v| v.to_bits()).collect()))
        .collect();
    k.sort();
    k
}

fn merged(parts: &[Dataset], num_classes: usize) -> Dataset {
    Dataset::new(parts.iter().flat_map(|p| p.samples().to_vec()).collect(), num_classes).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn partitions_cover_the_pool_exactly(per_class in 2usize..20, n in 1usize..10, seed: u64) {
        let data = synth_dataset(4, 3, per_class, 6.0, 1.0, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let iid = partition_iid(&data, n, &mut rng).unwrap();
        prop_assert_eq!(keys(&merged(&iid, 4)), keys(&data));
        let sizes: Vec<usize> = iid.iter().map(Dataset::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        if data.len() >= 2 * n {
            let shards = partition_noniid_shards(&data, n, &mut rng).unwrap();
            prop_assert_eq!(shards.len(), n);
            prop_assert_eq!(keys(&merged(&shards, 4)), keys(&data));
        }
    }
}

#[test]
fn shard_partition_skews_labels() {
    let data = synth_dataset(10, 4, 100, 6.0, 1.0, 2).unwrap();
    let parts = partition_noniid_shards(&data, 50, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for p in &parts {
        let classes = p.class_counts().iter().filter(|&&c| c > 0).count();
        assert!((1..=2).contains(&classes), "{classes} classes");
    }
}

#[test]
fn smoke_config_loss_mostly_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_fedxval"))
        .args(["run", "--config"])
        .arg(configs().join("smoke.toml"))
        .arg("--out-dir")
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    let losses: Vec<f64> = rows.iter().map(|r| r.split(',').nth(4).unwrap().parse().unwrap()).collect();

    let cfg = ExperimentConfig::load(&configs().join("smoke.toml")).unwrap();
    let p = prepare(&cfg, configs(), None, None).unwrap();
    let mut prev = loss(&p.sim.spec, &p.sim.initial, &p.sim.train_pool).unwrap();
    let mut down = 0;
    for l in losses {
        down += usize::from(l <= prev);
        prev = l;
    }
    assert!(down >= 4, "{csv}");
}

#[test]
fn shipped_configs_validate() {
    for name in ["reference.toml", "noniid.toml", "smoke.toml"] {
        let cfg = ExperimentConfig::load(&configs().join(name)).unwrap();
        let p = prepare(&cfg, configs(), None, None).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(p.sim.clients.len(), cfg.clients);
    }
}

#[test]
fn two_evaluators_are_rejected() {
    let text = std::fs::read_to_string(configs().join("reference.toml")).unwrap();
    let text = text.replace("evaluators = 3", "evaluators = 2");
    assert!(text.contains("evaluators = 2"));
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    let err = prepare(&cfg, configs(), None, None).unwrap_err();
    assert!(err.to_string().contains("3 evaluators"), "{err}");
}

#[test]
fn honest_rounds_raise_no_reports_once_trained() {
    let text = std::fs::read_to_string(configs().join("smoke.toml")).unwrap()
        + "\n[defense]\nevaluators = 3\nmax_tasks = 3\nsubmodels = 5\nmargin = 0.1\n";
    let text = text.replace("rounds = 5", "rounds = 8").replace("per_class = 100", "per_class = 600");
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    let (mut clean, mut total) = (0, 0);
    for seed in 0..5 {
        let p = prepare(&cfg, configs(), Some(seed), None).unwrap();
        assert_eq!(p.mode, Mode::Defended);
        let run = fedxval::federation::run_training(&p.sim, p.mode).unwrap();
        for rec in &run.metrics[3..] {
            total += 1;
            clean += usize::from(rec.submodels.iter().all(|s| s.reports == 0));
        }
    }
    assert!(clean as f64 >= 0.95 * total as f64, "{clean}/{total}");
}

#[test]
fn clean_model_has_low_flip_success() {
    let spec = ModelSpec::softmax_linear(32, 10);
    let train = synth_dataset(10, 32, 100, 6.0, 1.0, 4).unwrap();
    let cfg = TrainConfig {
        iterations: 800,
        batch_size: 20,
        learning_rate: 0.1,
    };
    let w0 = init_model(&spec, 0);
    let w = w0
        .add(&local_train(&spec, &w0, &train, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap())
        .unwrap();
    let flip = AttackSpec {
        kind: AttackKind::LabelFlip { src: 1, dst: 5 },
        scaling: ScalingSpec::None,
    };
    assert!(measure_subtask(&spec, &w, &flip, &train).unwrap() < 0.1);
}

#[test]
fn idx_source_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut write = |stem: &str, n: usize| {
        use rand::Rng;
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let images: Vec<Vec<u8>> = labels
            .iter()
            .map(|&l| (0..784).map(|p| if p / 78 == l as usize { 200 } else { rng.random_range(0..40) }).collect())
            .collect();
        write_file(&dir.path().join(format!("{stem}-images")), &encode_images(&images, 28, 28).unwrap()).unwrap();
        write_file(&dir.path().join(format!("{stem}-labels")), &encode_labels(&labels)).unwrap();
    };
    write("train", 200);
    write("test", 50);
    let config = dir.path().join("idx.toml");
    std::fs::write(
        &config,
        r#"
seed = 0
clients = 10
per_round = 5
rounds = 3

[model]
kind = "softmax-linear"

[train]
iterations = 5
batch_size = 5
learning_rate = 0.1

[data]
source = "idx"
train_images = "train-images"
train_labels = "train-labels"
test_images = "test-images"
test_labels = "test-labels"
"#,
    )
    .unwrap();
    let out = run_experiment(&config, None, None, &dir.path().join("out")).unwrap();
    assert_eq!(out.run.metrics.len(), 3);
    assert!(out.run.metrics[2].main_accuracy > 0.5);
}

#[test]
fn analyze_penalty_cli_prints_the_curve() {
    let out = Command::new(env!("CARGO_BIN_EXE_fedxval"))
        .args(["analyze", "penalty", "--e", "4", "--v", "0.5"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "e,v,r,c");
    assert_eq!(lines[1], "4,0.5,0,1");
    assert_eq!(lines[2], "4,0.5,1,0.5");
    assert_eq!(lines[4], "4,0.5,3,0");
}
