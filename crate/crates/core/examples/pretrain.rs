//! Pretrain a small model on a synthetic Markov genome with warmup plus
//! cosine decay, logging metrics as JSON lines to stdout.

use genelm::genome_io::{extract_windows, generate_synthetic_genome, split_train_eval};
use genelm::model::ModelConfig;
use genelm::tokenizer::TokenShard;
use genelm::trainer::{train, Checkpoint, MetricsLog, StepRecord, TrainConfig, TrainOptions};

fn main() -> genelm::Result<()> {
    let genome = generate_synthetic_genome(2, 200_000, 3, 2.0)?;
    let windows = extract_windows(&[genome], 128, 0.1)?;
    let (train_set, _) = split_train_eval(&windows, 0.1, 0)?;
    let shard = TokenShard::from_windows(&train_set.windows, 128)?;

    let tc = TrainConfig {
        batch_size: 8,
        lr_peak: 2e-3,
        lr_min: 2e-4,
        warmup_iters: 20,
        total_iters: 200,
        ..TrainConfig::desk_base()
    };
    let ck = Checkpoint::fresh(&ModelConfig::tiny(64, 2, 4, 128), &tc, 0)?;
    println!("# {} parameters", ck.model.param_count());
    let mut log = MetricsLog::new(std::io::stdout());
    let mut every_20 = |r: &StepRecord| if r.step.is_multiple_of(20) { log.write(r) } else { Ok(()) };
    let (ck, _) = train(ck, &shard, &mut TrainOptions { stop_after: None, on_step: Some(&mut every_20) })?;
    println!("# finished at step {}", ck.step);
    Ok(())
}
