use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use hcast::cli::{dispatch, Manifest};
use hcast::metrics::{write_predictions, MetricsReport, PredictionRecord};
use hcast::{LabelPath, TaxonomyTree};

const SMALL: &str = "seed = 5\n\
    [synth]\ncoarse_classes = 2\nchildren_per_class = 2\nimage_size = 32\nsamples_per_leaf = 5\n\
    [model]\nimage_size = 32\nembed_dim = 16\nnum_heads = 2\nstage_blocks = [1, 1]\nstage_tokens = [16, 4]\n\
    [train]\nepochs = 1\nbatch_size = 8\nwarmup_epochs = 0\n";

fn two_per_coarse(coarse: usize) -> TaxonomyTree {
    let parents = (0..2 * coarse).map(|f| f / 2).collect();
    TaxonomyTree::from_parents(vec![coarse, 2 * coarse], vec![vec![], parents]).unwrap()
}

fn record(i: usize, pred: [usize; 2], truth: [usize; 2]) -> PredictionRecord {
    PredictionRecord {
        id: format!("s{i}"),
        predicted: LabelPath::new(pred.to_vec()),
        truth: LabelPath::new(truth.to_vec()),
    }
}

/// Writes the tree and dump, runs `metrics` and returns its exit code and report.
fn score(dir: &Path, tree: &TaxonomyTree, records: &[PredictionRecord]) -> (i32, Option<MetricsReport>) {
    let tax = dir.join("taxonomy.csv");
    let pred = dir.join("dump.jsonl");
    fs::write(&tax, tree.to_csv()).unwrap();
    let mut buf = Vec::new();
    write_predictions(&mut buf, records).unwrap();
    fs::write(&pred, buf).unwrap();
    let code = dispatch(["hcast", "metrics", "--pred", pred.to_str().unwrap(), "--taxonomy", tax.to_str().unwrap()]);
    let report = fs::read_to_string(dir.join("report.json")).ok().map(|t| serde_json::from_str(&t).unwrap());
    (code, report)
}

#[test]
fn metrics_on_a_perfect_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let tree = two_per_coarse(3);
    let records: Vec<_> = (0..6).map(|f| record(f, [f / 2, f], [f / 2, f])).collect();
    let (code, report) = score(tmp.path(), &tree, &records);
    assert_eq!(code, 0);
    let report = report.unwrap();
    assert_eq!(report.fpa, 1.0);
    assert_eq!(report.tice, 0.0);
    assert_eq!(report.wap, 1.0);
    assert_eq!(report.n, 6);
}

#[test]
fn metrics_on_a_crossed_branch_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let tree = two_per_coarse(2);
    // Every fine label right, every coarse label pointing at the other branch.
    let records: Vec<_> = (0..4).map(|f| record(f, [1 - f / 2, f], [f / 2, f])).collect();
    let (code, report) = score(tmp.path(), &tree, &records);
    assert_eq!(code, 0);
    let report = report.unwrap();
    assert_eq!(report.per_level_accuracy, [0.0, 1.0]);
    assert_eq!(report.fpa, 0.0);
    assert_eq!(report.tice, 1.0);
}

#[test]
fn metrics_reproduces_a_weighted_average_on_a_large_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let tree = two_per_coarse(17);
    let n = 10_000;
    let records: Vec<_> = (0..n)
        .map(|i| {
            let truth = [(i % 34) / 2, i % 34];
            let coarse = if i < 9082 { truth[0] } else { (truth[0] + 1) % 17 };
            let fine = if i < 8524 { truth[1] } else { (truth[1] + 2) % 34 };
            record(i, [coarse, fine], truth)
        })
        .collect();
    let (code, report) = score(tmp.path(), &tree, &records);
    assert_eq!(code, 0);
    let report = report.unwrap();
    assert_eq!(report.per_level_accuracy, [0.9082, 0.8524]);
    assert!((100.0 * report.wap - 87.10).abs() <= 0.01, "{}", report.wap);
}

#[test]
fn malformed_dump_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let tree = two_per_coarse(2);
    let tax = tmp.path().join("taxonomy.csv");
    let pred = tmp.path().join("dump.jsonl");
    fs::write(&tax, tree.to_csv()).unwrap();
    fs::write(&pred, "{\"id\":\"a\",\"pred\":[0,0],\"truth\":[0,0]}\n{\"id\":\"b\",\"pred\":[0,\n").unwrap();
    let code = dispatch(["hcast", "metrics", "--pred", pred.to_str().unwrap(), "--taxonomy", tax.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(!tmp.path().join("report.json").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(dispatch(["hcast", "frobnicate"]), 1);
    assert_eq!(dispatch(["hcast", "train", "--out", out, "model.no_such_field=3"]), 1);
    assert_eq!(dispatch(["hcast", "ablate", "--suite", "sideways", "--out", out]), 1);
    assert_eq!(dispatch(["hcast", "train", "--out", out, "train.epochs=1", "train.warmup_epochs=1"]), 1);
    let missing = tmp.path().join("missing.toml");
    assert_eq!(dispatch(["hcast", "make-synth", "--config", missing.to_str().unwrap(), "--out", out]), 1);
}

fn files_under(root: &Path) -> BTreeSet<String> {
    let mut found = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                found.insert(path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    found
}

fn manifest(root: &Path) -> Manifest {
    serde_json::from_str(&fs::read_to_string(root.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn manifests_list_exactly_the_produced_files() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.toml");
    fs::write(&config, SMALL).unwrap();
    let cfg = config.to_str().unwrap();
    let dir = |name: &str| tmp.path().join(name);

    assert_eq!(dispatch(["hcast", "make-synth", "--config", cfg, "--out", dir("data").to_str().unwrap()]), 0);
    assert_eq!(dispatch(["hcast", "train", "--config", cfg, "--out", dir("train").to_str().unwrap()]), 0);
    let ckpt = dir("train").join("checkpoints").join("final");
    let ckpt = ckpt.to_str().unwrap();
    assert_eq!(
        dispatch(["hcast", "evaluate", "--config", cfg, "--checkpoint", ckpt, "--out", dir("eval").to_str().unwrap()]),
        0
    );

    for (name, command) in [("data", "make-synth"), ("train", "train"), ("eval", "evaluate")] {
        let m = manifest(&dir(name));
        assert_eq!(m.command, command);
        assert_eq!(m.seed, Some(5));
        let listed: BTreeSet<String> = m.files.iter().cloned().collect();
        assert_eq!(listed.len(), m.files.len(), "duplicate entries in {name}");
        let mut present = files_under(&dir(name));
        present.remove("manifest.json");
        assert_eq!(listed, present, "{name}");
    }

    // 2 coarse x 2 fine leaves, 5 samples each, split 80/20.
    let data = manifest(&dir("data"));
    assert_eq!(data.files.iter().filter(|f| f.starts_with("train/")).count(), 16);
    assert_eq!(data.files.iter().filter(|f| f.starts_with("test/")).count(), 4);

    // Evaluating the final checkpoint reproduces the report written at the end of training.
    let train_report = fs::read_to_string(dir("train").join("report.json")).unwrap();
    let eval_report = fs::read_to_string(dir("eval").join("report.json")).unwrap();
    assert_eq!(train_report, eval_report);
}

#[test]
fn folder_data_resolves_relative_to_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let small = tmp.path().join("small.toml");
    fs::write(&small, SMALL).unwrap();
    let data = tmp.path().join("data");
    assert_eq!(
        dispatch(["hcast", "make-synth", "--config", small.to_str().unwrap(), "--out", data.to_str().unwrap()]),
        0
    );

    let folder = format!(
        "{SMALL}[data]\nsource = \"folder\"\ntaxonomy = \"data/taxonomy.csv\"\ntrain_dir = \"data/train\"\ntest_dir = \"data/test\"\n"
    );
    let config = tmp.path().join("folder.toml");
    fs::write(&config, folder).unwrap();
    let out = tmp.path().join("run");
    assert_eq!(dispatch(["hcast", "train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    let report: MetricsReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.n, 4);
}
