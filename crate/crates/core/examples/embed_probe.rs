//! Frozen embeddings plus a linear probe on synthetic species. Sequences are
//! longer than the model context, so each is embedded as an average of chunks.

use genelm::downstream::{
    embed_all, species_chains, species_corpus, species_task, train_probe, EmbedOptions, Pooling, ProbeConfig,
};
use genelm::genome_io::extract_windows;
use genelm::model::ModelConfig;
use genelm::tokenizer::TokenShard;
use genelm::trainer::{train, Checkpoint, TrainConfig, TrainOptions};

fn main() -> genelm::Result<()> {
    let chains = species_chains(11, 4, 2, 4.0);
    let corpus = species_corpus(&chains, 50_000, 12);
    let set = extract_windows(&corpus, 128, 0.1)?;
    let shard = TokenShard::from_windows(&set.windows, 128)?;
    let tc = TrainConfig {
        batch_size: 8,
        lr_peak: 2e-3,
        lr_min: 2e-4,
        warmup_iters: 20,
        total_iters: 300,
        ..TrainConfig::desk_base()
    };
    let (ck, _) = train(Checkpoint::fresh(&ModelConfig::tiny(32, 2, 4, 128), &tc, 0)?, &shard, &mut TrainOptions::default())?;

    let (train_ds, test_ds) = species_task(&chains, 256, 200, 100, 13)?;
    for pooling in [Pooling::Max, Pooling::Mean] {
        let opts = EmbedOptions { pooling, ..Default::default() };
        let x_train = embed_all(&ck.model, &train_ds.sequences(), opts)?;
        let x_test = embed_all(&ck.model, &test_ds.sequences(), opts)?;
        let report = train_probe(
            &x_train.rows,
            &train_ds.classes().unwrap(),
            &x_test.rows,
            &test_ds.classes().unwrap(),
            &ProbeConfig::default(),
        )?;
        println!("{pooling:?} pooling: macro F1 {:.3}, accuracy {:.3}", report.macro_f1.unwrap_or(0.0), report.accuracy.unwrap_or(0.0));
    }
    Ok(())
}
