//! Length sweep over two models; rows beyond a model's context are reported
//! as unsupported.

use genelm::evaluator::{length_sweep, LanguageModel};
use genelm::genome_io::generate_synthetic_genome;
use genelm::model::{ModelConfig, ModelState};
use genelm::tokenizer::TokenShard;

fn main() -> genelm::Result<()> {
    let genome = generate_synthetic_genome(4, 256 * 16, 2, 2.0)?;
    let windows: Vec<&str> = (0..16).map(|i| &genome.sequence[i * 256..(i + 1) * 256]).collect();
    let corpus = TokenShard::from_windows(&windows, 256)?;
    let short = ModelState::init(&ModelConfig::tiny(32, 1, 2, 64), 0)?;
    let long = ModelState::init(&ModelConfig::tiny(32, 1, 2, 256), 0)?;
    let models: [(&str, &dyn LanguageModel); 2] = [("ctx64", &short), ("ctx256", &long)];
    let report = length_sweep(&models, &corpus, &[32, 64, 128, 256], None)?;
    print!("{}", report.to_csv());
    Ok(())
}
