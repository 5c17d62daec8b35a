use std::fs;
use std::path::Path;

use esc_core::checkpoint;
use esc_core::compression::NoiseConfig;
use esc_core::config::Settings;
use esc_core::experiment::{encode_lines, run_experiment, Cell, CompressionSource, ExperimentMatrix, TABLE_HEADER};
use esc_core::fusion::FusionVariant;
use esc_core::synth::{all_words, synth_corpus, SyntheticSpec};
use esc_core::tokenizer::learn_words;
use esc_core::training::{train_unsupervised_esc, TrainConfig};

fn small_settings() -> Settings {
    let o = |k: &'static str, v: &str| (k, v.to_string());
    Settings::load(
        None,
        &[o("d_model", "8"), o("heads", "2"), o("ffn_dim", "16"), o("max_steps", "4"), o("batch_size", "8")],
    )
    .unwrap()
}

fn write_data(dir: &Path) {
    let spec = SyntheticSpec::default();
    synth_corpus(&spec, 40, "train").unwrap().write(&dir.join("train")).unwrap();
    synth_corpus(&spec, 5, "valid").unwrap().write(&dir.join("valid")).unwrap();
    learn_words(&all_words(&spec)).unwrap().save(&dir.join("vocab.txt"), None).unwrap();
}

fn cell(variant: FusionVariant, source: CompressionSource, gamma: f64) -> Cell {
    Cell { variant, source, gamma, seed: 1 }
}

#[test]
fn one_cell_writes_its_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    write_data(tmp.path());
    let matrix = ExperimentMatrix {
        cells: vec![cell(FusionVariant::BothFusion, CompressionSource::Gold, 0.6)],
        data_dir: tmp.path().to_path_buf(),
        out_dir: tmp.path().join("out"),
        esc_model: None,
    };
    let results = run_experiment(&matrix, &small_settings()).unwrap();
    assert_eq!(results.len(), 1);
    let r = &results[0];
    assert!(r.error.is_none(), "{:?}", r.error);
    assert_eq!(r.variant, FusionVariant::BothFusion);
    let dir = matrix.out_dir.join(r.cell.name());
    for f in ["model.ckpt", "metrics.log", "valid.hyp", "train.cmp", "valid.cmp"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let model = checkpoint::load(&dir.join("model.ckpt")).unwrap();
    assert_eq!(model.param_count(), r.params);
    assert_eq!(fs::read_to_string(dir.join("valid.hyp")).unwrap().lines().count(), 5);
    let table = fs::read_to_string(matrix.out_dir.join("results.tsv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), TABLE_HEADER);
    assert!(table.lines().nth(1).unwrap().ends_with("\tok"));
}

#[test]
fn zero_ratio_and_no_source_run_the_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    write_data(tmp.path());
    let matrix = ExperimentMatrix {
        cells: vec![
            cell(FusionVariant::BothFusion, CompressionSource::Gold, 0.0),
            cell(FusionVariant::SourceFusion, CompressionSource::None, 0.6),
            cell(FusionVariant::Baseline, CompressionSource::None, 0.0),
        ],
        data_dir: tmp.path().to_path_buf(),
        out_dir: tmp.path().join("out"),
        esc_model: None,
    };
    let results = run_experiment(&matrix, &small_settings()).unwrap();
    assert!(results.iter().all(|r| r.variant == FusionVariant::Baseline && r.error.is_none()));
    assert_eq!(results[0].params, results[2].params);
    assert!(!matrix.out_dir.join(results[0].cell.name()).join("train.cmp").exists());
}

#[test]
fn failing_cell_does_not_stop_the_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    write_data(tmp.path());
    let matrix = ExperimentMatrix {
        cells: vec![
            cell(FusionVariant::TargetFusion, CompressionSource::Esc, 0.6),
            cell(FusionVariant::TargetFusion, CompressionSource::F8W, 0.6),
        ],
        data_dir: tmp.path().to_path_buf(),
        out_dir: tmp.path().join("out"),
        esc_model: None,
    };
    let results = run_experiment(&matrix, &small_settings()).unwrap();
    assert!(results[0].error.is_some());
    assert!(results[1].error.is_none());
    let table = fs::read_to_string(matrix.out_dir.join("results.tsv")).unwrap();
    assert!(table.lines().nth(1).unwrap().contains("\terror: "));
}

#[test]
fn esc_cells_compress_with_the_given_model() {
    let tmp = tempfile::tempdir().unwrap();
    write_data(tmp.path());
    let settings = small_settings();
    let vocab = learn_words(&all_words(&SyntheticSpec::default())).unwrap();
    let mono = synth_corpus(&SyntheticSpec::default(), 20, "mono").unwrap();
    let train = TrainConfig { max_steps: 2, ..settings.train.clone() };
    let esc = train_unsupervised_esc(
        &encode_lines(&vocab, &mono.cmp),
        None,
        &NoiseConfig::default(),
        &settings.model_config(vocab.len()).unwrap(),
        &train,
    )
    .unwrap();
    let ckpt = tmp.path().join("esc.ckpt");
    checkpoint::save(&esc.model, &ckpt).unwrap();
    let matrix = ExperimentMatrix {
        cells: vec![cell(FusionVariant::SourceFusion, CompressionSource::Esc, 0.5)],
        data_dir: tmp.path().to_path_buf(),
        out_dir: tmp.path().join("out"),
        esc_model: Some(ckpt),
    };
    let results = run_experiment(&matrix, &settings).unwrap();
    assert!(results[0].error.is_none(), "{:?}", results[0].error);
    let dir = matrix.out_dir.join(results[0].cell.name());
    let src = fs::read_to_string(tmp.path().join("valid.src")).unwrap();
    let cmp = fs::read_to_string(dir.join("valid.cmp")).unwrap();
    for (s, c) in src.lines().zip(cmp.lines()) {
        assert!(c.split_whitespace().count() <= s.split_whitespace().count() / 2);
    }
}
