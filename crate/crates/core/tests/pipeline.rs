use memts::data::{synth_corpus, Dataset, SynthKind};
use memts::hope::checkpoint::Checkpoint;
use memts::model::{Model, ModelConfig, RunConfig};
use memts::numerics::RngState;
use memts::trainer::{evaluate, finetune, pretrain, tags};
use memts::Error;

fn small() -> RunConfig {
    let mut c = RunConfig::desk();
    c.model = ModelConfig { input_len: 64, patch_len: 8, d_model: 16, depth: 2, cms_levels: 2, proj_dim: 8, ..c.model };
    c.train.pretrain_epochs = 2;
    c.train.pretrain_batch = 8;
    c.train.lp_epochs = 4;
    c.train.ft_epochs = 2;
    c
}

fn data(n: usize, len: usize, seed: u64) -> Dataset {
    synth_corpus(&[SynthKind::Sine, SynthKind::Ar1], n, len, &mut RngState::new(seed).rng()).unwrap()
}

fn init(c: &RunConfig, seed: u64) -> Model {
    Model::init(&c.model, &mut RngState::new(seed).split(tags::INIT).rng()).unwrap()
}

#[test]
fn pretrained_backbone_carries_into_finetuning() {
    let c = small();
    let mut pre = init(&c, 1);
    pretrain(&mut pre, &data(24, 64, 2), &c.train, &RngState::new(1)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pre.bin");
    pre.to_checkpoint("stage = pretrain\n").save(&path).unwrap();
    let restored = Model::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(restored.backbone_bytes(), pre.backbone_bytes());
    assert!(restored.head().is_err());

    let mut ft = init(&c, 9);
    assert_ne!(ft.backbone_bytes(), pre.backbone_bytes());
    ft.load_backbone(&restored).unwrap();
    assert_eq!(ft.backbone_bytes(), pre.backbone_bytes());
    let train = data(16, 64, 3);
    finetune(&mut ft, &train, &c.train, &RngState::new(9)).unwrap();
    assert_ne!(ft.backbone_bytes(), pre.backbone_bytes());
}

#[test]
fn finetuned_checkpoint_reproduces_predictions() {
    let c = small();
    let mut model = init(&c, 4);
    finetune(&mut model, &data(16, 64, 5), &c.train, &RngState::new(4)).unwrap();
    let test = data(12, 64, 6);
    let before = evaluate(&model, &test).unwrap();

    let bytes = model.to_checkpoint("stage = finetune\n").to_bytes();
    let ck = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    let back = Model::from_checkpoint(&ck).unwrap();
    assert_eq!(back.head_bytes(), model.head_bytes());
    assert_eq!(back.scaler, model.scaler);
    assert_eq!(evaluate(&back, &test).unwrap(), before);
}

#[test]
fn backbone_transfer_requires_matching_architecture() {
    let c = small();
    let mut other = c.clone();
    other.model.d_model = 24;
    let mut target = init(&c, 0);
    let err = target.load_backbone(&init(&other, 0)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn truncated_checkpoint_is_a_format_error() {
    let bytes = init(&small(), 0).to_checkpoint("").to_bytes();
    for cut in [0, 7, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::read_from(&mut &bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Format(_) | Error::Io(_)), "cut {cut}: {err}");
    }
}

#[test]
fn config_text_round_trips_through_either_preset() {
    for c in [RunConfig::desk(), RunConfig::full(), small()] {
        for base in [RunConfig::desk(), RunConfig::full()] {
            assert_eq!(RunConfig::parse(&c.to_kv(), base).unwrap(), c);
        }
    }
}
