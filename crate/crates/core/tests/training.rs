mod common;

use common::{random_seq, tiny_config};
use esc_core::compression::{compress, CompressionConfig, NoiseConfig};
use esc_core::fusion::FusionVariant;
use esc_core::model::{Batch, Model};
use esc_core::tensor::{Graph, Tensor};
use esc_core::training::{
    finetune_esc, train_nmt, train_semi_esc, train_supervised_esc, train_unsupervised_esc, Adam, ParallelCorpus,
    Regime, TrainConfig, Trained,
};
use esc_core::transformer::{ModelConfig, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 12;

fn cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        warmup_steps: 10,
        peak_lr: 1e-2,
        max_steps: steps,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn corpus(seed: u64, n: usize, with_cmp: bool) -> ParallelCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src: Vec<_> = (0..n).map(|_| random_seq(&mut rng, VOCAB, 2, 5)).collect();
    let tgt: Vec<_> = (0..n).map(|_| random_seq(&mut rng, VOCAB, 1, 4)).collect();
    let cmp = with_cmp.then(|| (0..n).map(|_| random_seq(&mut rng, VOCAB, 1, 3)).collect());
    ParallelCorpus::new(src, tgt, cmp).unwrap()
}

fn params_of(model: &Model) -> Vec<f64> {
    model
        .params()
        .ids()
        .flat_map(|id| model.params().get(id).data().to_vec())
        .collect()
}

fn max_diff(a: &Model, b: &Model) -> f64 {
    params_of(a)
        .iter()
        .zip(params_of(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn adam_matches_hand_computed_updates() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::scalar(1.0));
    let mut opt = Adam::new(&store, 0.9, 0.98, 1e-9);
    opt.update(&mut store, &[(id.0, &Tensor::scalar(0.5))], 0.1);
    // bias-corrected first step moves by lr·sign(g)
    let first = 1.0 - 0.1 * 0.5 / (0.5 + 1e-9);
    assert!((store.get(id).item() - first).abs() < 1e-15);
    opt.update(&mut store, &[(id.0, &Tensor::scalar(-0.25))], 0.1);
    // m = 0.9·0.05 − 0.1·0.25, v = 0.98·0.005 + 0.02·0.0625
    let expected = first - 0.1 * (0.02 / 0.19) / ((0.00615 / 0.0396_f64).sqrt() + 1e-9);
    assert!((store.get(id).item() - expected).abs() < 1e-12);
    assert_eq!(opt.steps(), 2);
}

#[test]
fn learning_rate_schedule() {
    let c = TrainConfig {
        warmup_steps: 4,
        peak_lr: 1.0,
        ..TrainConfig::default()
    };
    assert_eq!(c.learning_rate(1), 0.25);
    assert_eq!(c.learning_rate(4), 1.0);
    assert_eq!(c.learning_rate(16), 0.5);
    let flat = TrainConfig {
        warmup_steps: 0,
        peak_lr: 0.3,
        ..TrainConfig::default()
    };
    assert_eq!(flat.learning_rate(1), 0.3);
    assert_eq!(flat.learning_rate(999), 0.3);
}

#[test]
fn first_logged_loss_is_the_initial_forward_loss() {
    let pairs = corpus(1, 6, false);
    let mut c = cfg(1);
    c.batch_size = 6;
    let model_cfg = tiny_config(VOCAB);
    let trained = train_supervised_esc(&pairs, &model_cfg, &c).unwrap();
    let init = Model::new(model_cfg, FusionVariant::Baseline, c.seed).unwrap();
    let batch = Batch {
        src: pairs.src.clone(),
        cmp: None,
        tgt: pairs.tgt.clone(),
    };
    let mut g = Graph::new();
    let loss = init.loss(&mut g, &batch, 0.0).unwrap();
    assert!((g.value(loss).item() - trained.log[0].loss).abs() < 1e-10);
    assert!(max_diff(&init, &trained.model) > 0.0);
}

#[test]
fn memorizes_a_single_pair() {
    let pairs = ParallelCorpus::new(vec![vec![4, 5, 6, 7]], vec![vec![9, 8]], None).unwrap();
    let trained = train_supervised_esc(&pairs, &tiny_config(VOCAB), &cfg(150)).unwrap();
    let losses = trained.losses();
    assert!(losses[149] < 0.02, "final loss {}", losses[149]);
    assert!(losses[149] < losses[0]);
}

#[test]
fn learns_to_copy() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seqs: Vec<Vec<usize>> = (0..300).map(|_| random_seq(&mut rng, VOCAB, 2, 4)).collect();
    let pairs = ParallelCorpus::new(seqs.clone(), seqs, None).unwrap();
    let model_cfg = ModelConfig::sized(VOCAB, 16, 2, 32, 1);
    let mut c = cfg(400);
    c.batch_size = 16;
    c.warmup_steps = 40;
    let trained = train_supervised_esc(&pairs, &model_cfg, &c).unwrap();
    let dec = CompressionConfig {
        gamma: 1.0,
        beta: 0.0,
        beam: 2,
        ..CompressionConfig::default()
    };
    let held_out: Vec<Vec<usize>> = (0..30).map(|_| random_seq(&mut rng, VOCAB, 2, 4)).collect();
    let exact = held_out
        .iter()
        .filter(|s| compress(&trained.model, s, &dec).unwrap() == **s)
        .count();
    assert!(exact >= 27, "{exact}/30 copied exactly");
}

#[test]
fn semi_without_pretraining_is_supervised() {
    let pairs = corpus(2, 10, false);
    let model_cfg = tiny_config(VOCAB);
    let mut semi_cfg = cfg(0);
    semi_cfg.finetune_steps = 6;
    let semi = train_semi_esc(&pairs.src, None, &pairs, &NoiseConfig::default(), &model_cfg, &semi_cfg).unwrap();
    let sup = train_supervised_esc(&pairs, &model_cfg, &cfg(6)).unwrap();
    assert_eq!(max_diff(&semi.model, &sup.model), 0.0);
    assert_eq!(semi.losses(), sup.losses());
}

#[test]
fn semi_without_finetuning_is_unsupervised() {
    let pairs = corpus(3, 10, false);
    let model_cfg = tiny_config(VOCAB);
    let noise = NoiseConfig::default();
    let semi = train_semi_esc(&pairs.tgt, Some(&pairs.src), &pairs, &noise, &model_cfg, &cfg(6)).unwrap();
    let unsup = train_unsupervised_esc(&pairs.tgt, Some(&pairs.src), &noise, &model_cfg, &cfg(6)).unwrap();
    assert_eq!(max_diff(&semi.model, &unsup.model), 0.0);
    assert_eq!(semi.log.len(), 6);
}

#[test]
fn finetuning_continues_the_step_count() {
    let pairs = corpus(4, 10, false);
    let model_cfg = tiny_config(VOCAB);
    let pre = train_supervised_esc(&pairs, &model_cfg, &cfg(3)).unwrap();
    let mut c = cfg(3);
    c.finetune_steps = 2;
    let tuned = finetune_esc(pre, &pairs, &c).unwrap();
    let steps: Vec<usize> = tuned.log.iter().map(|l| l.step).collect();
    assert_eq!(steps, vec![1, 2, 3, 4, 5]);
}

#[test]
fn training_is_deterministic() {
    let pairs = corpus(5, 20, true);
    let model_cfg = tiny_config(VOCAB);
    let run = || train_nmt(FusionVariant::BothFusion, &pairs, &model_cfg, &cfg(8)).unwrap();
    let (a, b): (Trained, Trained) = (run(), run());
    assert!(max_diff(&a.model, &b.model) < 1e-10);
    for (x, y) in a.log.iter().zip(&b.log) {
        assert!((x.loss - y.loss).abs() < 1e-10);
    }
    let mut other = cfg(8);
    other.seed = 6;
    let c = train_nmt(FusionVariant::BothFusion, &pairs, &model_cfg, &other).unwrap();
    assert!(max_diff(&a.model, &c.model) > 1e-6);
}

#[test]
fn gate_receives_gradient_and_moves() {
    let pairs = corpus(6, 8, true);
    let model_cfg = tiny_config(VOCAB);
    let c = cfg(1);
    let init = Model::new(model_cfg.clone(), FusionVariant::TargetFusion, c.seed).unwrap();
    let gate_ids: Vec<_> = init
        .params()
        .ids()
        .filter(|&id| init.params().name(id).contains(".gate."))
        .collect();
    assert!(!gate_ids.is_empty());

    let batch = Batch {
        src: pairs.src.clone(),
        cmp: pairs.cmp.clone(),
        tgt: pairs.tgt.clone(),
    };
    let mut g = Graph::new();
    let loss = init.loss(&mut g, &batch, 0.0).unwrap();
    g.backward(loss).unwrap();
    let grads = g.param_grads();
    for id in &gate_ids {
        let (_, grad) = grads.iter().find(|(i, _)| *i == id.0).expect("gate gradient");
        assert!(grad.data().iter().any(|&x| x != 0.0), "{}", init.params().name(*id));
    }

    let trained = train_nmt(FusionVariant::TargetFusion, &pairs, &model_cfg, &c).unwrap();
    for id in &gate_ids {
        assert_ne!(init.params().get(*id).data(), trained.model.params().get(*id).data());
    }
}

#[test]
fn fusion_without_compressed_stream_is_an_error() {
    let pairs = corpus(7, 4, false);
    for v in [FusionVariant::SourceFusion, FusionVariant::TargetFusion, FusionVariant::BothFusion] {
        assert!(train_nmt(v, &pairs, &tiny_config(VOCAB), &cfg(1)).is_err());
    }
    assert!(train_nmt(FusionVariant::Baseline, &pairs, &tiny_config(VOCAB), &cfg(1)).is_ok());
}

#[test]
fn corpus_and_config_validation() {
    assert!(ParallelCorpus::new(vec![vec![4]], vec![], None).is_err());
    assert!(ParallelCorpus::new(vec![vec![4]], vec![vec![]], None).is_err());
    assert!(ParallelCorpus::new(vec![vec![4]], vec![vec![5]], Some(vec![])).is_err());
    assert!(ParallelCorpus::new(vec![vec![4]], vec![vec![5]], Some(vec![vec![]])).is_ok());
    let empty = ParallelCorpus::default();
    assert!(train_supervised_esc(&empty, &tiny_config(VOCAB), &cfg(1)).is_err());
    assert!(train_unsupervised_esc(&[], None, &NoiseConfig::default(), &tiny_config(VOCAB), &cfg(1)).is_err());
    let mut bad = cfg(1);
    bad.batch_size = 0;
    assert!(bad.validate().is_err());
    bad = cfg(1);
    bad.beta2 = 1.0;
    assert!(bad.validate().is_err());
}

#[test]
fn regime_names_round_trip() {
    for r in [Regime::SupervisedEsc, Regime::UnsupervisedEsc, Regime::SemiEsc, Regime::Nmt] {
        assert_eq!(r.to_string().parse::<Regime>().unwrap(), r);
    }
    assert!("weekly".parse::<Regime>().is_err());
}

#[test]
fn metrics_log_has_one_line_per_step() {
    let trained = train_supervised_esc(&corpus(8, 6, false), &tiny_config(VOCAB), &cfg(4)).unwrap();
    let text = trained.metrics_text();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step\tloss\ttokens_per_s");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("4\t"));
}

#[test]
fn periodic_checkpoints_are_written() {
    let tmp = tempfile::tempdir().unwrap();
    let prefix = tmp.path().join("esc.ckpt");
    let mut c = cfg(5);
    c.checkpoint_every = 2;
    c.checkpoint_prefix = Some(prefix.clone());
    let trained = train_supervised_esc(&corpus(9, 6, false), &tiny_config(VOCAB), &c).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, vec!["esc.ckpt.step2", "esc.ckpt.step4"]);
    let step4 = esc_core::checkpoint::load(&tmp.path().join("esc.ckpt.step4")).unwrap();
    assert_eq!(step4.param_count(), trained.model.param_count());
    assert!(max_diff(&step4, &trained.model) > 0.0);
}
