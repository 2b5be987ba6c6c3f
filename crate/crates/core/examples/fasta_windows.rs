//! Parse FASTA, cut fixed windows, split train/eval and print the stats block.
//!
//! `cargo run --example fasta_windows [path.fa]`; without a path a small
//! synthetic genome with an N-rich stretch is used.

use genelm::genome_io::{extract_windows, generate_synthetic_genome, read_fasta_file, split_train_eval, stats_report};

fn main() -> genelm::Result<()> {
    let records = match std::env::args().nth(1) {
        Some(path) => read_fasta_file(path)?,
        None => {
            let mut rec = generate_synthetic_genome(1, 50_000, 3, 2.0)?;
            rec.sequence.replace_range(10_000..12_000, &"N".repeat(2_000));
            vec![rec]
        }
    };
    let all = extract_windows(&records, 1024, 0.1)?;
    let (train, eval) = split_train_eval(&all, 0.1, 0)?;
    print!("{}", stats_report(&all, &train, &eval));
    Ok(())
}
