//! Synthetic labelled tasks with known ground truth: species identification
//! from Markov-chain "genomes" and motif presence as a multilabel task.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{LabeledDataset, LabeledItem, TaskKind, Target};
use crate::error::{Error, Result};
use crate::genome_io::{FastaRecord, MarkovChain, BASES};

/// One chain per species, drawn from independent streams of `seed`.
pub fn species_chains(seed: u64, n_species: usize, order: usize, sharpness: f64) -> Vec<MarkovChain> {
    (0..n_species)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            MarkovChain::random(&mut rng, order, sharpness)
        })
        .collect()
}

/// A pretraining corpus holding `bp_per_species` bases of every species.
pub fn species_corpus(chains: &[MarkovChain], bp_per_species: usize, seed: u64) -> Vec<FastaRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    chains
        .iter()
        .enumerate()
        .map(|(s, c)| FastaRecord::new(format!("species{s}"), c.sample(&mut rng, bp_per_species)))
        .collect()
}

fn species_split(chains: &[MarkovChain], n: usize, seq_len: usize, rng: &mut ChaCha8Rng) -> Result<LabeledDataset> {
    let items = (0..n)
        .map(|i| {
            let s = i % chains.len();
            LabeledItem {
                sequence: chains[s].sample(rng, seq_len),
                target: Target::Class(s),
            }
        })
        .collect();
    let task = if chains.len() == 2 { TaskKind::Binary } else { TaskKind::Multiclass(chains.len()) };
    LabeledDataset::new(task, items)
}

/// Balanced train/test sets of `seq_len`-bp sequences labelled by species.
pub fn species_task(
    chains: &[MarkovChain],
    seq_len: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if chains.len() < 2 {
        return Err(Error::invalid_arg("a species task needs at least two species"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = species_split(chains, n_train, seq_len, &mut rng)?;
    let test = species_split(chains, n_test, seq_len, &mut rng)?;
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotifTask {
    pub motifs: Vec<String>,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

fn random_dna(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| BASES[rng.random_range(0..4)] as char).collect()
}

/// Shape of a motif-presence task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotifSpec {
    /// Number of labels, one motif each.
    pub k: usize,
    pub motif_len: usize,
    /// Copies written when a label is on.
    pub copies: usize,
    pub seq_len: usize,
    pub p_present: f64,
}

impl Default for MotifSpec {
    fn default() -> Self {
        MotifSpec {
            k: 8,
            motif_len: 5,
            copies: 2,
            seq_len: 96,
            p_present: 0.5,
        }
    }
}

/// Uniform random sequences; label `j` is on with probability `p_present`,
/// in which case motif `j` is written `copies` times, each at a random offset
/// inside its own slot so planted motifs never overwrite each other.
pub fn motif_task(spec: &MotifSpec, n_train: usize, n_test: usize, seed: u64) -> Result<MotifTask> {
    let MotifSpec { k, motif_len, copies, seq_len, p_present } = *spec;
    let n_slots = k * copies;
    if k == 0 || copies == 0 || motif_len == 0 || n_slots * motif_len > seq_len || !(0.0..=1.0).contains(&p_present) {
        return Err(Error::invalid_arg(format!("cannot build a motif task from {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motifs: Vec<String> = (0..k).map(|_| random_dna(&mut rng, motif_len)).collect();
    let slot = seq_len / n_slots;
    let mut split = |n: usize| {
        let items = (0..n)
            .map(|_| {
                let mut seq = random_dna(&mut rng, seq_len).into_bytes();
                let flags: Vec<bool> = (0..k).map(|_| rng.random_bool(p_present)).collect();
                let mut slots: Vec<usize> = (0..n_slots).collect();
                slots.shuffle(&mut rng);
                let mut free = slots.into_iter();
                for (m, _) in motifs.iter().zip(&flags).filter(|(_, on)| **on) {
                    for s in free.by_ref().take(copies) {
                        let at = s * slot + rng.random_range(0..=slot - motif_len);
                        seq[at..at + motif_len].copy_from_slice(m.as_bytes());
                    }
                }
                LabeledItem {
                    sequence: String::from_utf8(seq).expect("ASCII bases"),
                    target: Target::Flags(flags),
                }
            })
            .collect();
        LabeledDataset::new(TaskKind::Multilabel(k), items)
    };
    let train = split(n_train)?;
    let test = split(n_test)?;
    Ok(MotifTask { motifs, train, test })
}

/// Occurrences of each motif in `sequence`, overlaps included.
pub fn motif_counts(sequence: &str, motifs: &[String]) -> Vec<usize> {
    motifs
        .iter()
        .map(|m| {
            sequence
                .as_bytes()
                .windows(m.len())
                .filter(|w| *w == m.as_bytes())
                .count()
        })
        .collect()
}
