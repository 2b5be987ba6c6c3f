//! Train at a short context, then extend to 4x the length with a raised
//! rotary base and compare perplexity at the long length.

use genelm::evaluator::evaluate;
use genelm::genome_io::{extract_windows, generate_with_chain, RepeatPlan};
use genelm::model::{ModelConfig, ModelState};
use genelm::tokenizer::{TokenId, TokenShard};
use genelm::trainer::{default_next_base, extend_context, train, Checkpoint, TrainConfig, TrainOptions};

fn main() -> genelm::Result<()> {
    let plan = RepeatPlan {
        segment_len: 32,
        min_distance: 64,
        max_distance: 384,
        coverage: 0.3,
    };
    let (genome, _) = generate_with_chain(3, 300_000, 3, 2.0, Some(&plan))?;
    let set = extract_windows(&[genome], 512, 0.1)?;
    let eval = TokenShard::from_windows(&set.windows[..32], 512)?;
    let data = TokenShard::from_windows(&set.windows[32..], 512)?;
    let ppl = |m: &ModelState, len: usize| -> genelm::Result<f64> {
        let shard = eval.rewindow(len)?;
        let seqs: Vec<&[TokenId]> = shard.windows().collect();
        Ok(evaluate(m, &seqs)?.ppl)
    };

    let base_tc = TrainConfig {
        batch_size: 16,
        lr_peak: 2e-3,
        lr_min: 2e-4,
        warmup_iters: 30,
        total_iters: 300,
        ..TrainConfig::desk_base()
    };
    let ck = Checkpoint::fresh(&ModelConfig::tiny(64, 2, 4, 128), &base_tc, 0)?;
    let (ck, _) = train(ck, &data, &mut TrainOptions::default())?;
    let stretched = ck.model.with_context(512, ck.model.config.rope_base)?;
    println!("before: ppl@128 {:.4}  ppl@512 {:.4}", ppl(&ck.model, 128)?, ppl(&stretched, 512)?);

    let new_base = default_next_base(ck.model.config.rope_base, 128, 512, None);
    let ext_tc = TrainConfig {
        batch_size: 4,
        lr_peak: 1e-3,
        lr_min: 1e-4,
        warmup_iters: 10,
        total_iters: 100,
        ..TrainConfig::desk_base()
    };
    let (ext, _) = extend_context(&ck, 512, new_base, &ext_tc, &data, &mut TrainOptions::default())?;
    println!("after extension (base {new_base}): ppl@512 {:.4}", ppl(&ext.model, 512)?);
    Ok(())
}
