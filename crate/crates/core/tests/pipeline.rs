use std::fs;
use std::path::Path;

use capsroute::config::RunConfig;
use capsroute::eval::{evaluate_checkpoints, run_experiment};
use capsroute::model::ModelKind;
use capsroute::signal::{
    build_dataset, load_corpus, read_dataset, synth_corpus, write_corpus, write_dataset, ChannelSet, LoadOptions,
};
use capsroute::Label;

fn prepared(dir: &Path, alert: usize, drowsy: usize, minutes: f64, set: ChannelSet) -> std::path::PathBuf {
    write_corpus(&dir.join("raw"), &synth_corpus(alert, drowsy, minutes, 7).unwrap()).unwrap();
    let recs = load_corpus(&dir.join("raw/recordings.csv"), LoadOptions::default()).unwrap();
    write_dataset(&dir.join("data"), &build_dataset(&recs, set).unwrap()).unwrap()
}

#[test]
fn ten_minute_corpus_gives_46_images_per_subject() {
    let recs = synth_corpus(10, 10, 10.0, 7).unwrap();
    assert_eq!(recs.len(), 40);
    let fz = build_dataset(&recs, ChannelSet::Fz).unwrap();
    assert_eq!(fz.len(), 920);
    assert_eq!(fz.iter().filter(|i| i.label == Label::Drowsy).count(), 460);
    assert!(fz.iter().all(|i| (i.image.height(), i.image.width()) == (32, 32)));

    let fzpz = build_dataset(&recs[..4], ChannelSet::FzPz).unwrap();
    assert_eq!(fzpz.len(), 92);
    assert!(fzpz.iter().all(|i| (i.image.height(), i.image.width()) == (64, 32)));
}

#[test]
fn recordings_survive_disk_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let recs = synth_corpus(1, 1, 1.0, 3).unwrap();
    write_corpus(tmp.path(), &recs).unwrap();
    let back = load_corpus(&tmp.path().join("recordings.csv"), LoadOptions::default()).unwrap();
    assert_eq!(back.len(), recs.len());
    for (a, b) in back.iter().zip(&recs) {
        assert_eq!(
            (&a.subject_id, a.pvt, a.channel, a.kss),
            (&b.subject_id, b.pvt, b.channel, b.kss)
        );
        // Stored as f32.
        assert!(a
            .samples
            .iter()
            .zip(&b.samples)
            .all(|(x, y)| (x - y).abs() <= 1e-6 * y.abs().max(1.0)));
    }
}

#[test]
fn prepare_is_idempotent_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = prepared(tmp.path(), 2, 2, 1.0, ChannelSet::FzPz);
    let first = fs::read(&manifest).unwrap();
    let images = read_dataset(&manifest).unwrap();
    let first_pixels: Vec<_> = images.iter().map(|i| i.image.clone()).collect();

    let again = prepared(tmp.path(), 2, 2, 1.0, ChannelSet::FzPz);
    assert_eq!(fs::read(&again).unwrap(), first);
    let second: Vec<_> = read_dataset(&again).unwrap().into_iter().map(|i| i.image).collect();
    assert_eq!(second, first_pixels);
    assert_eq!(images.len(), 4 * 4);
}

#[test]
fn checkpoints_reproduce_the_run_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = prepared(tmp.path(), 3, 3, 2.0, ChannelSet::Fz);
    let cfg = RunConfig {
        dataset: Some(manifest),
        out: Some(tmp.path().join("run")),
        model: ModelKind::Cnn,
        epochs: 1,
        folds: 2,
        seed: 5,
        ..RunConfig::default()
    };
    let trained = run_experiment(&cfg).unwrap();
    for f in 1..=2 {
        assert!(tmp.path().join(format!("run/model_fold{f}.ckpt")).exists());
    }
    let evaluated = evaluate_checkpoints(&cfg).unwrap();
    for (a, b) in trained.folds.iter().zip(&evaluated.folds) {
        assert_eq!(a.confusion, b.confusion);
    }
}
