//! Labelled-sequence tasks on top of a pretrained backbone: frozen embeddings
//! with a linear probe, or a classification head trained end to end.

pub mod dataset;
pub mod embed;
pub mod finetune;
pub mod metrics;
pub mod probe;
pub mod toy;

pub use dataset::{LabeledDataset, LabeledItem, Target, TaskKind};
pub use embed::{embed_all, embed_sequence, embed_tokens, EmbedOptions, EmbeddingMatrix, Encoder, Pooling};
pub use finetune::{
    evaluate_classifier, finetune_classify, ClassificationHead, Classifier, FinetuneConfig, FinetuneMode,
    FinetuneOutcome, MetricsRecord,
};
pub use probe::{train_probe, LinearProbe, ProbeConfig, ProbeReport};
pub use toy::{motif_counts, motif_task, species_chains, species_corpus, species_task, MotifSpec, MotifTask};
