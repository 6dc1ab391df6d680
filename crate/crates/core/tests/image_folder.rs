use std::fs;

use hcast::data::{export_image_folder, load_image_folder, make_synthetic, SynthConfig};
use hcast::taxonomy::load_taxonomy;
use hcast::HcastError;

const TAXONOMY: &str = "coarse,fine\nA,a1\nA,a2\nB,b1\nB,b2\n";

#[test]
fn two_leaf_dirs_with_three_images_each() {
    let tree = load_taxonomy(TAXONOMY.as_bytes()).unwrap();
    let data =
        make_synthetic(&SynthConfig { image_size: 32, coarse_classes: 2, children_per_class: 2, ..Default::default() })
            .unwrap();
    let tmp = tempfile::tempdir().unwrap();

    // Synthetic leaves are named differently, so relabel two of them onto a1 and b2.
    let mut picked = Vec::new();
    for (leaf, target) in [(0usize, 0usize), (3, 3)] {
        let mut samples: Vec<_> = data.train.iter().filter(|s| s.label_path.leaf() == leaf).take(3).cloned().collect();
        for s in &mut samples {
            s.label_path = tree.infer_ancestors(target).unwrap();
        }
        picked.extend(samples);
    }
    let written = export_image_folder(&picked, &tree, tmp.path()).unwrap();
    assert_eq!(written.len(), 6);

    let load = load_image_folder(tmp.path(), &tree).unwrap();
    assert!(load.errors.is_empty(), "{:?}", load.errors);
    assert_eq!(load.samples.len(), 6);
    for s in &load.samples {
        assert!(tree.is_valid_path(&s.label_path).unwrap());
    }
    let leaves: Vec<usize> = load.samples.iter().map(|s| s.label_path.leaf()).collect();
    assert_eq!(leaves, [0, 0, 0, 3, 3, 3]);
    // PNG is lossless up to the 8-bit quantization of the export.
    let original = &picked[0].image;
    let reloaded = &load.samples[0].image;
    assert_eq!(original.dim(), reloaded.dim());
    let worst = original.iter().zip(reloaded.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(worst <= 1.0 / 255.0 + 1e-6, "{worst}");
}

#[test]
fn unknown_leaf_directory_is_named_in_the_error() {
    let tree = load_taxonomy(TAXONOMY.as_bytes()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir(tmp.path().join("a1")).unwrap();
    fs::create_dir(tmp.path().join("zebra")).unwrap();
    match load_image_folder(tmp.path(), &tree) {
        Err(HcastError::LabelResolution(name)) => assert_eq!(name, "zebra"),
        other => panic!("expected a label-resolution error, got {other:?}"),
    }
}

#[test]
fn empty_root_gives_no_samples() {
    let tree = load_taxonomy(TAXONOMY.as_bytes()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let load = load_image_folder(tmp.path(), &tree).unwrap();
    assert!(load.samples.is_empty());
    assert!(load.errors.is_empty());
}

#[test]
fn undecodable_files_are_reported_and_skipped() {
    let tree = load_taxonomy(TAXONOMY.as_bytes()).unwrap();
    let data = make_synthetic(&SynthConfig {
        image_size: 32,
        coarse_classes: 2,
        children_per_class: 2,
        samples_per_leaf: 5,
        ..Default::default()
    })
    .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut sample = data.train[0].clone();
    sample.label_path = tree.infer_ancestors(1).unwrap();
    export_image_folder(&[sample], &tree, tmp.path()).unwrap();
    let broken = tmp.path().join("a2").join("broken.png");
    fs::write(&broken, b"not a png").unwrap();
    fs::write(tmp.path().join("a2").join("notes.txt"), b"ignored").unwrap();

    let load = load_image_folder(tmp.path(), &tree).unwrap();
    assert_eq!(load.samples.len(), 1);
    assert_eq!(load.errors.len(), 1);
    assert_eq!(load.errors[0].0, broken);
}
