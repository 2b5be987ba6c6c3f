//! Sequence classification with a pooled linear head, training either every
//! layer or only the head, then saving and reloading the classifier.

use genelm::downstream::{finetune_classify, species_chains, species_task, Classifier, FinetuneConfig, FinetuneMode};
use genelm::model::{ModelConfig, ModelState};
use genelm::trainer::TrainConfig;

fn main() -> genelm::Result<()> {
    let chains = species_chains(5, 3, 2, 4.0);
    let (train_ds, test_ds) = species_task(&chains, 128, 150, 60, 6)?;
    let backbone = ModelState::init(&ModelConfig::tiny(32, 2, 4, 128), 0)?;
    let cfg = FinetuneConfig {
        optimizer: TrainConfig {
            lr_peak: 1e-3,
            ..TrainConfig::finetune(0)
        },
        epochs: 3,
        warmup_ratio: 0.1,
    };
    let mut last = None;
    for mode in [FinetuneMode::HeadOnly, FinetuneMode::AllLayers] {
        let out = finetune_classify(&backbone, &train_ds, &test_ds, mode, &cfg)?;
        println!("{}", serde_json::to_string(&out.metrics).expect("metrics serialise"));
        last = Some(out.classifier);
    }
    let dir = std::env::temp_dir().join("genelm-finetune-example");
    let clf = last.unwrap();
    clf.save(&dir)?;
    let back = Classifier::load(&dir)?;
    println!("reloaded scores for the first test item: {:?}", back.scores(&test_ds.items[0].sequence)?);
    Ok(())
}
