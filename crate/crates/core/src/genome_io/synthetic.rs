//! Synthetic genomes from random order-k Markov chains, optionally with
//! planted long-range repeats. These stand in for real assemblies in tests
//! and examples: different seeds behave like different "species".

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::FastaRecord;
use crate::error::{Error, Result};

pub const BASES: [u8; 4] = *b"ACGT";

/// Order-k chain over {A,C,G,T}. Row `c` of `transitions` is the next-base
/// distribution after context `c`, where the context is the previous k bases
/// read as a base-4 number (oldest base most significant, A=0 … T=3).
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovChain {
    pub order: usize,
    pub transitions: Vec<[f64; 4]>,
}

impl MarkovChain {
    /// Rows are `softmax(sharpness * z)` with `z` standard normal draws.
    pub fn random<R: Rng>(rng: &mut R, order: usize, sharpness: f64) -> Self {
        let n_ctx = 4usize.pow(order as u32);
        let transitions = (0..n_ctx)
            .map(|_| {
                let z: [f64; 4] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e = z.map(|v| (sharpness * (v - max)).exp());
                let total: f64 = e.iter().sum();
                e.map(|v| v / total)
            })
            .collect();
        MarkovChain { order, transitions }
    }

    pub fn n_contexts(&self) -> usize {
        self.transitions.len()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, length: usize) -> String {
        let mask = self.n_contexts();
        let mut out = Vec::with_capacity(length);
        let mut ctx = 0usize;
        for i in 0..length {
            let b = if i < self.order {
                rng.random_range(0..4)
            } else {
                draw(&self.transitions[ctx], rng.random::<f64>())
            };
            out.push(BASES[b]);
            if mask > 1 {
                ctx = (ctx * 4 + b) % mask;
            }
        }
        String::from_utf8(out).expect("ASCII bases")
    }
}

fn draw(row: &[f64; 4], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    3
}

pub fn base_index(b: u8) -> Option<usize> {
    BASES.iter().position(|&x| x == b)
}

/// Copies of earlier segments pasted downstream at a random distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RepeatPlan {
    pub segment_len: usize,
    pub min_distance: usize,
    pub max_distance: usize,
    /// Expected fraction of the sequence covered by copies.
    pub coverage: f64,
}

impl RepeatPlan {
    fn validate(&self) -> Result<()> {
        if self.segment_len == 0
            || self.min_distance == 0
            || self.min_distance > self.max_distance
            || !(0.0..1.0).contains(&self.coverage)
        {
            return Err(Error::invalid_arg(format!("invalid repeat plan {self:?}")));
        }
        Ok(())
    }
}

fn plant_repeats<R: Rng>(seq: &mut [u8], plan: &RepeatPlan, rng: &mut R) {
    if plan.coverage <= 0.0 {
        return;
    }
    let len = plan.segment_len;
    // mean gap chosen so copies cover `coverage` of the sequence on average
    let mean_gap = len as f64 * (1.0 - plan.coverage) / plan.coverage;
    let mut pos = plan.max_distance;
    loop {
        pos += rng.random_range(0.0..=2.0 * mean_gap).round() as usize;
        if pos + len > seq.len() {
            break;
        }
        let dist = rng.random_range(plan.min_distance..=plan.max_distance);
        for i in pos..pos + len {
            seq[i] = seq[i - dist];
        }
        pos += len;
    }
}

/// Emits `length` bases from a chain drawn with the same seed.
/// `sharpness == 0` gives uniform i.i.d. bases.
pub fn generate_synthetic_genome(
    seed: u64,
    length: usize,
    markov_order: usize,
    sharpness: f64,
) -> Result<FastaRecord> {
    generate_with_chain(seed, length, markov_order, sharpness, None).map(|(rec, _)| rec)
}

/// Like [`generate_synthetic_genome`] but also returns the chain and
/// optionally plants repeats after sampling.
pub fn generate_with_chain(
    seed: u64,
    length: usize,
    markov_order: usize,
    sharpness: f64,
    repeats: Option<&RepeatPlan>,
) -> Result<(FastaRecord, MarkovChain)> {
    if length == 0 {
        return Err(Error::invalid_arg("synthetic genome length must be at least 1"));
    }
    if !(sharpness >= 0.0) || !sharpness.is_finite() {
        return Err(Error::invalid_arg(format!("sharpness {sharpness} must be finite and >= 0")));
    }
    if markov_order > 10 {
        return Err(Error::invalid_arg("markov_order above 10 is not supported"));
    }
    if let Some(plan) = repeats {
        plan.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = MarkovChain::random(&mut rng, markov_order, sharpness);
    let mut seq = chain.sample(&mut rng, length).into_bytes();
    if let Some(plan) = repeats {
        plant_repeats(&mut seq, plan, &mut rng);
    }
    let header = format!("synthetic seed={seed} order={markov_order} sharpness={sharpness}");
    let seq = String::from_utf8(seq).expect("ASCII bases");
    Ok((FastaRecord::new(header, seq), chain))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_when_sharpness_zero() {
        let rec = generate_synthetic_genome(11, 1_000_000, 2, 0.0).unwrap();
        let mut counts = [0usize; 4];
        for b in rec.sequence.bytes() {
            counts[base_index(b).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / 1e6;
            assert!((f - 0.25).abs() < 0.005, "{f}");
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let a = generate_synthetic_genome(5, 5000, 3, 2.0).unwrap();
        let b = generate_synthetic_genome(5, 5000, 3, 2.0).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_genome(6, 5000, 3, 2.0).unwrap();
        assert_ne!(a.sequence, c.sequence);
    }

    #[test]
    fn rows_are_distributions() {
        let (_, chain) = generate_with_chain(1, 10, 3, 4.0, None).unwrap();
        assert_eq!(chain.n_contexts(), 64);
        for row in &chain.transitions {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn repeats_copy_earlier_text() {
        let plan = RepeatPlan {
            segment_len: 20,
            min_distance: 50,
            max_distance: 50,
            coverage: 0.5,
        };
        let (rec, _) = generate_with_chain(3, 20_000, 0, 0.0, Some(&plan)).unwrap();
        let s = rec.sequence.as_bytes();
        let matches = (50..s.len()).filter(|&i| s[i] == s[i - 50]).count();
        let frac = matches as f64 / (s.len() - 50) as f64;
        // 0.5 copied + 0.25 chance agreement on the rest
        assert!((frac - 0.625).abs() < 0.05, "{frac}");
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_synthetic_genome(1, 0, 2, 1.0).is_err());
        assert!(generate_synthetic_genome(1, 10, 2, -1.0).is_err());
    }
}
