use hcast::analysis::{consistency_table, gradcam, level_heatmaps, DEFAULT_TAU};
use hcast::checkpoint::{load_checkpoint, save_checkpoint};
use hcast::data::{make_synthetic, SynthConfig, SynthDataset};
use hcast::metrics::{assemble_report, read_predictions, write_predictions};
use hcast::trainer::{evaluate, train, TrainConfig};
use hcast::{Execution, HcastError, Model, ModelConfig, TaxonomyTree};

fn tiny_data(num_levels: usize) -> SynthDataset {
    make_synthetic(&SynthConfig {
        num_levels,
        image_size: 32,
        coarse_classes: 2,
        children_per_class: 2,
        samples_per_leaf: 5,
        seed: 3,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_model(tree: &TaxonomyTree, seed: u64) -> Model {
    let cfg = ModelConfig {
        image_size: 32,
        embed_dim: 16,
        num_heads: 2,
        stage_blocks: vec![1; tree.num_levels()],
        stage_tokens: [16, 8, 4][3 - tree.num_levels()..].to_vec(),
        seed,
        ..Default::default()
    };
    Model::new(cfg, tree).unwrap()
}

fn short_run() -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 8, warmup_epochs: 1, seed: 9, ..Default::default() }
}

#[test]
fn same_seed_runs_are_identical() {
    let data = tiny_data(2);
    let run = |exec| {
        let mut model = tiny_model(&data.tree, 1);
        let record = train(&mut model, &data.tree, &data.train, Some(&data.test), &short_run(), None, exec).unwrap();
        (model.params.tensors, record.epochs)
    };
    let (a, ea) = run(Execution::Sequential);
    let (b, eb) = run(Execution::default());
    assert_eq!(a, b);
    assert_eq!(ea, eb);

    let mut other = tiny_model(&data.tree, 2);
    train(&mut other, &data.tree, &data.train, None, &short_run(), None, Execution::default()).unwrap();
    assert_ne!(a, other.params.tensors);
}

#[test]
fn prediction_dump_round_trip_gives_the_same_report() {
    let data = tiny_data(3);
    let mut model = tiny_model(&data.tree, 4);
    train(&mut model, &data.tree, &data.train, None, &short_run(), None, Execution::default()).unwrap();
    let (report, records) = evaluate(&model, &data.tree, &data.test, Execution::default()).unwrap();
    assert_eq!(report.per_level_accuracy.len(), 3);

    let mut buf = Vec::new();
    write_predictions(&mut buf, &records).unwrap();
    let reread = read_predictions(buf.as_slice()).unwrap();
    assert_eq!(reread, records);
    assert_eq!(assemble_report(&reread, &data.tree).unwrap(), report);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let data = tiny_data(2);
    let mut model = tiny_model(&data.tree, 6);
    train(&mut model, &data.tree, &data.train, None, &short_run(), None, Execution::default()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(tmp.path(), &model, &data.tree, 17).unwrap();
    let (restored, step) = load_checkpoint(tmp.path(), &data.tree).unwrap();
    assert_eq!(step, 17);
    for s in &data.test {
        assert_eq!(model.forward(&s.image).unwrap().logits, restored.forward(&s.image).unwrap().logits);
    }
    let other = tiny_data(3);
    assert!(matches!(load_checkpoint(tmp.path(), &other.tree), Err(HcastError::Config(_))));
}

#[test]
fn heatmaps_are_normalized_and_constant_on_superpixels() {
    let data = tiny_data(2);
    let model = tiny_model(&data.tree, 7);
    for sample in data.test.iter().take(3) {
        let (_, maps) = level_heatmaps(&model, &sample.image).unwrap();
        let superpixels = model.forward(&sample.image).unwrap().hierarchy.unwrap().project_segments(0).unwrap();
        for map in &maps {
            assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
            let max = map.values.iter().copied().fold(0.0, f64::max);
            assert!(max == 0.0 || max == 1.0, "{max}");
            let mut seen = std::collections::HashMap::new();
            for (&v, &id) in map.values.iter().zip(superpixels.iter()) {
                assert_eq!(*seen.entry(id).or_insert(v), v, "superpixel {id}");
            }
        }
        let fine = gradcam(&model, &sample.image, 1).unwrap();
        assert_eq!(fine.values, maps[1].values);
    }
    assert!(gradcam(&model, &data.test[0].image, 2).is_err());
}

#[test]
fn zeroed_head_weights_give_an_empty_heatmap() {
    let data = tiny_data(2);
    let mut model = tiny_model(&data.tree, 8);
    let head = model.params.names.iter().position(|n| n == "head0.w").unwrap();
    model.params.tensors[head].fill(0.0);
    let mut fine_active = false;
    for sample in &data.test {
        assert!(gradcam(&model, &sample.image, 0).unwrap().values.iter().all(|&v| v == 0.0));
        fine_active |= gradcam(&model, &sample.image, 1).unwrap().values.iter().any(|&v| v > 0.0);
    }
    assert!(fine_active);
}

#[test]
fn consistency_buckets_follow_the_predictions() {
    let data = tiny_data(2);
    let mut model = tiny_model(&data.tree, 10);
    train(&mut model, &data.tree, &data.train, None, &short_run(), None, Execution::default()).unwrap();
    let stats = consistency_table(&model, &data.test, DEFAULT_TAU, Execution::default()).unwrap();
    let (_, records) = evaluate(&model, &data.tree, &data.test, Execution::default()).unwrap();
    for b in &stats.buckets {
        let expected = records
            .iter()
            .filter(|r| {
                (r.predicted.labels()[0] == r.truth.labels()[0]) == b.coarse_correct
                    && (r.predicted.labels()[1] == r.truth.labels()[1]) == b.fine_correct
            })
            .count();
        assert_eq!(b.count, expected);
        if let Some(m) = b.overlap_mean {
            assert!((0.0..=1.0).contains(&m));
        }
        if let Some(c) = b.correlation_mean {
            assert!((-1.0..=1.0).contains(&c));
        }
    }
    assert_eq!(stats.buckets.iter().map(|b| b.count).sum::<usize>(), data.test.len());
}

#[test]
fn overfit_model_lands_in_the_all_correct_bucket() {
    let data = tiny_data(2);
    let mut model = tiny_model(&data.tree, 12);
    let cfg = TrainConfig { epochs: 400, batch_size: 16, warmup_epochs: 0, seed: 12, ..Default::default() };
    train(&mut model, &data.tree, &data.train, None, &cfg, None, Execution::default()).unwrap();
    let (report, _) = evaluate(&model, &data.tree, &data.train, Execution::default()).unwrap();
    assert_eq!(report.fpa, 1.0);
    let stats = consistency_table(&model, &data.train, DEFAULT_TAU, Execution::default()).unwrap();
    assert_eq!(stats.bucket(true, true).count, data.train.len());
}

#[test]
fn consistency_needs_two_levels() {
    let data = tiny_data(3);
    let model = tiny_model(&data.tree, 0);
    let err = consistency_table(&model, &data.test, DEFAULT_TAU, Execution::Sequential).unwrap_err();
    assert!(matches!(err, HcastError::Unsupported(_)));
}
