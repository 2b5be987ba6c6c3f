//! Interrupt a run, save a checkpoint, resume, and confirm the result matches
//! an uninterrupted run bit for bit.

use genelm::genome_io::generate_synthetic_genome;
use genelm::model::ModelConfig;
use genelm::tokenizer::TokenShard;
use genelm::trainer::{train, Checkpoint, TrainConfig, TrainOptions};

fn main() -> genelm::Result<()> {
    let genome = generate_synthetic_genome(8, 64 * 40, 2, 2.0)?;
    let windows: Vec<&str> = (0..40).map(|i| &genome.sequence[i * 64..(i + 1) * 64]).collect();
    let shard = TokenShard::from_windows(&windows, 64)?;
    let tc = TrainConfig {
        batch_size: 4,
        warmup_iters: 4,
        total_iters: 30,
        ..TrainConfig::desk_base()
    };
    let fresh = Checkpoint::fresh(&ModelConfig::tiny(32, 2, 4, 64), &tc, 0)?;
    let (full, _) = train(fresh.clone(), &shard, &mut TrainOptions::default())?;

    let path = std::env::temp_dir().join("genelm-example.ckpt");
    let (half, _) = train(fresh, &shard, &mut TrainOptions { stop_after: Some(15), on_step: None })?;
    half.save(&path)?;
    println!("saved step {} to {}", half.step, path.display());
    let (resumed, _) = train(Checkpoint::load(&path)?, &shard, &mut TrainOptions::default())?;
    println!("resumed run identical to uninterrupted run: {}", resumed == full);

    let mut bytes = std::fs::read(&path)?;
    let n = bytes.len();
    bytes[n / 2] ^= 1;
    match Checkpoint::read_from(&bytes[..]) {
        Err(e) => println!("corrupted copy rejected: {e}"),
        Ok(_) => println!("corrupted copy was accepted"),
    }
    Ok(())
}
