//! Genome ingestion: FASTA parsing, synthetic genomes, windowing and
//! train/eval splitting.

mod fasta;
mod synthetic;
mod windows;

pub use fasta::{parse_fasta, read_fasta_file, write_fasta, FastaRecord};
pub use synthetic::{
    base_index, generate_synthetic_genome, generate_with_chain, MarkovChain, RepeatPlan, BASES,
};
pub use windows::{
    extract_windows, split_by_record, split_train_eval, SourceStats, WindowOrigin, WindowSet,
};

/// Plain-text summary written next to prepared shards.
pub fn stats_report(all: &WindowSet, train: &WindowSet, eval: &WindowSet) -> String {
    let s = &all.source_stats;
    format!(
        "records\t{}\ntotal_bp_read\t{}\nwindow_len\t{}\nwindows_kept\t{}\nwindows_dropped_ambiguous\t{}\ntrain_windows\t{}\neval_windows\t{}\n",
        all.record_names.len(),
        s.total_bp_read,
        all.window_len,
        s.windows_kept,
        s.windows_dropped_ambiguous,
        train.len(),
        eval.len(),
    )
}
