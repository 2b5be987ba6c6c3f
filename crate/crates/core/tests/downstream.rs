use genelm::downstream::{finetune_classify, motif_task, FinetuneConfig, FinetuneMode, MotifSpec};
use genelm::model::{ModelConfig, ModelState};
use genelm::tokenizer::TokenShard;
use genelm::trainer::{train, Checkpoint, TrainConfig, TrainOptions};

/// Eight-label motif presence: a briefly LM-pretrained tiny model finetuned
/// on all layers should separate present from absent motifs.
#[test]
fn motif_multilabel_smoke() {
    let spec = MotifSpec {
        k: 8,
        motif_len: 4,
        copies: 2,
        seq_len: 64,
        p_present: 0.5,
    };
    let task = motif_task(&spec, 800, 200, 7).unwrap();
    let model = ModelState::init(&ModelConfig::tiny(32, 2, 4, 64), 1).unwrap();

    let shard = TokenShard::from_windows(&task.train.sequences(), 64).unwrap();
    let pretrain = TrainConfig {
        batch_size: 16,
        lr_peak: 3e-3,
        lr_min: 3e-4,
        warmup_iters: 50,
        total_iters: 500,
        weight_decay: 0.0,
        ..TrainConfig::full_scale_base()
    };
    let (ck, _) = train(Checkpoint::from_model(model, pretrain, 0, 0), &shard, &mut TrainOptions::default()).unwrap();

    let cfg = FinetuneConfig {
        optimizer: TrainConfig {
            lr_peak: 1e-2,
            batch_size: 16,
            ..TrainConfig::finetune(0)
        },
        epochs: 20,
        warmup_ratio: 0.1,
    };
    let out = finetune_classify(&ck.model, &task.train, &task.test, FinetuneMode::AllLayers, &cfg).unwrap();
    let auc = out.metrics.median_auc.unwrap();
    assert!(auc > 0.8, "median per-label AUC {auc}");
    assert_eq!(out.metrics.task, "multilabel");
    assert!(out.warnings.is_empty());
}
