mod common;

use candle_core::{DType, Device};

use flowmo::config::ConfigBundle;
use flowmo::model::Tokenizer;
use flowmo::nn::{scalar_f64, seeded};
use flowmo::quantizer::TokenIds;
use flowmo::stage2::{sample_maskgit, sample_maskgit_trace, tokenize_dataset, train_maskgit, MaskGit, MaskGitSampling, TokenDataset};
use flowmo::data::synthetic_dataset;
use flowmo::Error;

#[test]
fn desk_layout_yields_32_ids() {
    let mut b = ConfigBundle::default();
    b.apply_overrides(&[
        "model.image_resolution=16",
        "model.width=32",
        "model.num_heads=2",
        "model.encoder_depth=1",
        "model.decoder_depth=1",
        "model.latent_seq_len=16",
        "model.token_bits=18",
        "model.entropy_group_bits=9",
    ])
    .unwrap();
    let cfg = b.validate().unwrap();
    let tok = Tokenizer::new(cfg.model(), &mut seeded(0), DType::F32, &Device::Cpu).unwrap();
    let images = synthetic_dataset(0, 3, 16, 8).unwrap();
    let tokens = tokenize_dataset(&tok, &images, 2).unwrap();
    assert_eq!(tokens.tokens.seq_len(), 32);
    assert_eq!(tokens.tokens.ids.len(), 3 * 32);
    assert!(tokens.tokens.ids.iter().all(|&id| id < 512));
    assert_eq!(tokens.labels.as_ref().unwrap().len(), 3);
}

#[test]
fn fsq_tokenizers_cannot_be_tokenized() {
    let cfg = common::tiny_with(&["model.quantizer_kind=fsq"]);
    let tok = Tokenizer::new(cfg.model(), &mut seeded(0), DType::F32, &Device::Cpu).unwrap();
    let images = synthetic_dataset(0, 2, 16, 8).unwrap();
    assert!(tokenize_dataset(&tok, &images, 2).is_err());
}

#[test]
fn token_dataset_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let tokens = TokenIds::from_rows(&[vec![1, 2, 3, 0], vec![3, 3, 0, 1]], 2, 4, 2).unwrap();
    let data = TokenDataset { tokens, labels: Some(vec![3, 1]) };
    let path = dir.path().join("tokens.bin");
    data.save(&path).unwrap();
    assert_eq!(TokenDataset::load(&path).unwrap(), data);
}

#[test]
fn single_sequence_is_memorized() {
    let cfg = common::tiny_with(&["stage2.max_steps=300", "stage2.batch_size=8", "stage2.learning_rate=3e-3"]);
    let row: Vec<u16> = (0..16).map(|i| (i * 7 % 16) as u16).collect();
    let tokens = TokenIds::from_rows(&[row.clone()], 8, 8, 4).unwrap();
    let data = TokenDataset { tokens, labels: None };
    let run = train_maskgit(&cfg, &data, &mut seeded(1), DType::F32, &Device::Cpu).unwrap();
    let tail: f64 = run.losses[run.losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.1, "masked CE {tail}");

    let model = &run.model;
    let input = vec![model.mask_id(); 16];
    let target: Vec<u32> = row.iter().map(|&v| v as u32).collect();
    let ce = model.masked_cross_entropy(&input, &target, &[true; 16], 1, None).unwrap();
    assert!(scalar_f64(&ce).unwrap() < 0.1);

    let opts = MaskGitSampling { steps: 4, temperature: 0.0, guidance_weight: 1.0 };
    let (rows, trace) = sample_maskgit_trace(model, 2, None, &opts, &mut seeded(3)).unwrap();
    assert_eq!(rows[0], target);
    assert_eq!(*trace.last().unwrap(), 0);
}

#[test]
fn layout_mismatch_is_rejected() {
    let cfg = common::tiny();
    let model = MaskGit::new(cfg.stage2(), 10, 4, 0, &mut seeded(0), DType::F32, &Device::Cpu).unwrap();
    let opts = MaskGitSampling::from_config(cfg.stage2());
    let err = sample_maskgit(&model, cfg.model(), 1, None, &opts, &mut seeded(0)).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
}
