//! End-to-end pipeline runs at miniature scale: dataset generation, quantizer
//! pretraining, OCL training, evaluation, and plotting, exercised through the
//! same entry points the CLI uses.

use std::fs;

use vvo_core::harness::{
    default_config, run_eval, run_gen_data, run_plot, run_pretrain, run_train, Split,
};
use vvo_core::nn::ParamBank;
use vvo_core::scenegen::DatasetDir;
use vvo_core::tensorio::{load_checkpoint, RunConfig};

/// A configuration small enough that every stage finishes in well under a
/// second: 16x16 images (2x2 feature grid), 6 samples, a handful of steps.
fn tiny_config() -> RunConfig {
    let mut cfg = default_config();
    for (k, v) in [
        ("data.samples", "6"),
        ("data.eval_count", "2"),
        ("data.height", "16"),
        ("data.width", "16"),
        ("data.min_objects", "1"),
        ("data.max_objects", "2"),
        ("data.min_size", "5.0"),
        ("data.max_size", "9.0"),
        ("enc.channels", "8"),
        ("vq.num_codes", "16"),
        ("vq.template_dim", "8"),
        ("vq.steps", "20"),
        ("vq.batch", "2"),
        ("vq.epoch_len", "10"),
        ("agg.slots", "3"),
        ("agg.slot_dim", "16"),
        ("agg.iterations", "2"),
        ("agg.mlp_hidden", "16"),
        ("dec.width", "16"),
        ("dec.heads", "2"),
        ("dec.blocks", "1"),
        ("dec.hidden", "16"),
        ("dec.time_dim", "8"),
        ("train.steps", "4"),
        ("train.batch", "2"),
        ("train.log_every", "2"),
        ("train.eval_every", "0"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

#[test]
fn vvo_mixture_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let pre_dir = dir.path().join("pretrain");
    let ckpt_dir = dir.path().join("ckpt");
    let masks_dir = dir.path().join("masks");
    let panels_dir = dir.path().join("panels");
    let cfg = tiny_config();

    let data = run_gen_data(&cfg, &data_dir).unwrap();
    assert_eq!(data.len(), 6);
    assert!(data_dir.join("meta.txt").is_file());

    let pre = run_pretrain(&cfg, &data_dir, &pre_dir).unwrap();
    assert!(pre.quantized);
    assert!(pre.final_unique_codes >= 1);
    assert!(pre_dir.join("pretrain_log.jsonl").is_file());

    let summary = run_train(&cfg, &data_dir, Some(&pre_dir), &ckpt_dir).unwrap();
    assert!(summary.first_loss.is_finite());
    assert!(summary.final_loss.is_finite());
    assert!(summary.frozen_inputs_unchanged);
    assert!(summary.trained_params_changed);
    assert!(ckpt_dir.join("train_log.jsonl").is_file());

    // Targets were materialized next to the dataset.
    let data = DatasetDir::open(&data_dir).unwrap();
    assert!(data.has_codes());
    assert_eq!(data.features(0).unwrap().shape, vec![4, 8]);

    let report = run_eval(&cfg, &data_dir, &ckpt_dir, Split::Eval, Some(&masks_dir)).unwrap();
    assert_eq!(report.n_samples, 2);
    assert!(report.ari >= -1.0 && report.ari <= 1.0);
    assert!(report.miou >= 0.0 && report.miou <= 1.0);

    // Determinism: re-evaluating yields byte-identical JSON.
    let again = run_eval(&cfg, &data_dir, &ckpt_dir, Split::Eval, None).unwrap();
    assert_eq!(
        serde_json::to_string(&report).unwrap(),
        serde_json::to_string(&again).unwrap()
    );

    // Mask dumps cover exactly the eval split; panels render from them.
    assert!(masks_dir.join("0004.vvot").is_file());
    assert!(masks_dir.join("0005.vvot").is_file());
    let written = run_plot(&masks_dir, &panels_dir).unwrap();
    assert_eq!(written, 2);
    let panel = fs::read(panels_dir.join("0004.ppm")).unwrap();
    assert!(panel.starts_with(b"P6\n"));
}

#[test]
fn no_quantize_skips_pretraining_and_mismatched_meta_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let mut cfg = tiny_config();
    cfg.set("variant", "no-quantize").unwrap();
    run_gen_data(&cfg, &data_dir).unwrap();

    let pre_dir = dir.path().join("pretrain");
    let pre = run_pretrain(&cfg, &data_dir, &pre_dir).unwrap();
    assert!(!pre.quantized);
    assert!(load_checkpoint(&pre_dir).unwrap().is_empty());

    // Raw-feature targets need no pretraining input at all.
    let ckpt_dir = dir.path().join("ckpt");
    let summary = run_train(&cfg, &data_dir, None, &ckpt_dir).unwrap();
    assert!(summary.final_loss.is_finite());
    let data = DatasetDir::open(&data_dir).unwrap();
    assert!(!data.has_codes());

    // A quantizer checkpoint trained under different vq settings is refused.
    let mut other = tiny_config();
    other.set("vq.num_codes", "8").unwrap();
    other.set("vq.template_dim", "4").unwrap();
    let other_pre = dir.path().join("pretrain_other");
    run_pretrain(&other, &data_dir, &other_pre).unwrap();
    let err = run_train(&tiny_config(), &data_dir, Some(&other_pre), &dir.path().join("x"))
        .unwrap_err();
    assert!(format!("{err}").contains("vq.num_codes"), "{err}");
}

#[test]
fn separate_encoder_changes_targets_but_not_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut shared = tiny_config();
    shared.set("train.steps", "0").unwrap();
    let mut separate = tiny_config();
    separate.set("train.steps", "0").unwrap();
    separate.set("variant", "separate-encoder").unwrap();

    let mut banks = Vec::new();
    let mut features = Vec::new();
    for (tag, cfg) in [("vvo", &shared), ("sep", &separate)] {
        let data_dir = dir.path().join(format!("data_{tag}"));
        run_gen_data(cfg, &data_dir).unwrap();
        let pre_dir = dir.path().join(format!("pre_{tag}"));
        run_pretrain(cfg, &data_dir, &pre_dir).unwrap();
        let ckpt = dir.path().join(format!("ckpt_{tag}"));
        run_train(cfg, &data_dir, Some(&pre_dir), &ckpt).unwrap();
        banks.push(ParamBank::from_named_tensors(&load_checkpoint(&ckpt).unwrap()).unwrap());
        features.push(DatasetDir::open(&data_dir).unwrap().features(0).unwrap());
    }

    // Identical datasets and identical step-0 parameters...
    assert_eq!(banks[0].hash(), banks[1].hash());
    // ...but the reconstruction targets come from different encoders.
    assert_ne!(features[0].data, features[1].data);
}

#[test]
fn ar_and_diffusion_decoders_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let base = tiny_config();
    run_gen_data(&base, &data_dir).unwrap();
    let pre_dir = dir.path().join("pretrain");
    run_pretrain(&base, &data_dir, &pre_dir).unwrap();

    for (decoder, ar_mode) in [("ar", "ce"), ("ar", "mse"), ("diffusion", "ce")] {
        let mut cfg = tiny_config();
        cfg.set("decoder", decoder).unwrap();
        cfg.set("dec.ar_mode", ar_mode).unwrap();
        cfg.set("train.steps", "2").unwrap();
        let ckpt = dir.path().join(format!("ckpt_{decoder}_{ar_mode}"));
        let summary = run_train(&cfg, &data_dir, Some(&pre_dir), &ckpt).unwrap();
        assert!(summary.final_loss.is_finite(), "{decoder}/{ar_mode}");
        let report = run_eval(&cfg, &data_dir, &ckpt, Split::Eval, None).unwrap();
        assert_eq!(report.n_samples, 2);
    }
}

#[test]
fn video_pipeline_with_transition_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let mut cfg = tiny_config();
    cfg.set("data.frames", "2").unwrap();
    cfg.set("train.steps", "2").unwrap();
    run_gen_data(&cfg, &data_dir).unwrap();
    let pre_dir = dir.path().join("pretrain");
    run_pretrain(&cfg, &data_dir, &pre_dir).unwrap();
    let ckpt = dir.path().join("ckpt");
    let summary = run_train(&cfg, &data_dir, Some(&pre_dir), &ckpt).unwrap();
    assert!(summary.final_loss.is_finite());

    // Two frames per sample: the eval report averages over both.
    let report = run_eval(&cfg, &data_dir, &ckpt, Split::Eval, None).unwrap();
    assert_eq!(report.n_samples, 4);
}
