//! Classification metrics. Undefined values come back as `None`, never as a
//! silent zero.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl BinaryCounts {
    pub fn from_flags(preds: &[bool], targets: &[bool]) -> Self {
        let mut c = BinaryCounts::default();
        for (&p, &t) in preds.iter().zip(targets) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn add(&mut self, other: BinaryCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn n_classes(preds: &[usize], targets: &[usize]) -> usize {
    preds.iter().chain(targets).max().map_or(0, |m| m + 1)
}

/// One-vs-rest counts for class `c`.
pub fn class_counts(preds: &[usize], targets: &[usize], c: usize) -> BinaryCounts {
    let p: Vec<bool> = preds.iter().map(|&x| x == c).collect();
    let t: Vec<bool> = targets.iter().map(|&x| x == c).collect();
    BinaryCounts::from_flags(&p, &t)
}

pub fn accuracy(preds: &[usize], targets: &[usize]) -> Option<f64> {
    let hits = preds.iter().zip(targets).filter(|(p, t)| p == t).count();
    ratio(hits, preds.len().min(targets.len()))
}

/// Matthews correlation coefficient; for more than two classes this is the
/// multiclass generalisation computed from the confusion matrix. `None` when
/// either marginal is concentrated on one class.
pub fn mcc(preds: &[usize], targets: &[usize]) -> Option<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return None;
    }
    let k = n_classes(preds, targets);
    let mut p_count = vec![0f64; k];
    let mut t_count = vec![0f64; k];
    let mut correct = 0f64;
    for (&p, &t) in preds.iter().zip(targets) {
        p_count[p] += 1.0;
        t_count[t] += 1.0;
        if p == t {
            correct += 1.0;
        }
    }
    let s = preds.len() as f64;
    let pt: f64 = p_count.iter().zip(&t_count).map(|(a, b)| a * b).sum();
    let pp: f64 = p_count.iter().map(|a| a * a).sum();
    let tt: f64 = t_count.iter().map(|a| a * a).sum();
    let den = (s * s - pp) * (s * s - tt);
    if den <= 0.0 {
        return None;
    }
    Some((correct * s - pt) / den.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Class 1 is the positive class.
    Binary,
    /// Unweighted mean over classes that occur in predictions or targets.
    Macro,
    /// Pooled counts over classes.
    Micro,
}

fn averaged(preds: &[usize], targets: &[usize], averaging: Averaging, f: fn(&BinaryCounts) -> Option<f64>) -> Option<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return None;
    }
    match averaging {
        Averaging::Binary => f(&class_counts(preds, targets, 1)),
        Averaging::Macro => {
            let vals: Vec<f64> = (0..n_classes(preds, targets))
                .filter_map(|c| f(&class_counts(preds, targets, c)))
                .collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        }
        Averaging::Micro => {
            let mut total = BinaryCounts::default();
            for c in 0..n_classes(preds, targets) {
                total.add(class_counts(preds, targets, c));
            }
            f(&total)
        }
    }
}

pub fn f1(preds: &[usize], targets: &[usize], averaging: Averaging) -> Option<f64> {
    averaged(preds, targets, averaging, BinaryCounts::f1)
}

pub fn precision(preds: &[usize], targets: &[usize], averaging: Averaging) -> Option<f64> {
    averaged(preds, targets, averaging, BinaryCounts::precision)
}

pub fn recall(preds: &[usize], targets: &[usize], averaging: Averaging) -> Option<f64> {
    averaged(preds, targets, averaging, BinaryCounts::recall)
}

/// 1-based ranks of `scores`, ties sharing the average rank.
fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve from the rank statistic; ties count one half.
pub fn auc_roc(scores: &[f64], targets: &[bool]) -> Option<f64> {
    if scores.len() != targets.len() {
        return None;
    }
    let pos = targets.iter().filter(|&&t| t).count();
    let neg = targets.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(targets).filter(|(_, &t)| t).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// Average precision: sum over distinct score thresholds (descending) of
/// recall increments times precision.
pub fn auc_pr(scores: &[f64], targets: &[bool]) -> Option<f64> {
    if scores.len() != targets.len() {
        return None;
    }
    let pos = targets.iter().filter(|&&t| t).count();
    if pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0f64, 0.0f64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += targets[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Some(ap)
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Per-label AUC for `scores[item][label]`, one value per label (`None` for
/// labels with a single class among the targets).
pub fn per_label_auc(scores: &[Vec<f64>], targets: &[Vec<bool>]) -> Vec<Option<f64>> {
    let k = targets.first().map_or(0, |t| t.len());
    (0..k)
        .map(|j| {
            let s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
            let t: Vec<bool> = targets.iter().map(|r| r[j]).collect();
            auc_roc(&s, &t)
        })
        .collect()
}

/// Median of the defined per-label AUCs.
pub fn median_auc_per_label(scores: &[Vec<f64>], targets: &[Vec<bool>]) -> Option<f64> {
    let mut defined: Vec<f64> = per_label_auc(scores, targets).into_iter().flatten().collect();
    median(&mut defined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_and_inverted() {
        let t = [0, 1, 1, 0, 1];
        assert_eq!(mcc(&t, &t), Some(1.0));
        assert_eq!(f1(&t, &t, Averaging::Binary), Some(1.0));
        let inv: Vec<usize> = t.iter().map(|x| 1 - x).collect();
        assert_eq!(mcc(&inv, &t), Some(-1.0));
        let scores = [0.1, 0.9, 0.8, 0.2, 0.7];
        let flags: Vec<bool> = t.iter().map(|&x| x == 1).collect();
        assert_eq!(auc_roc(&scores, &flags), Some(1.0));
        assert_eq!(auc_pr(&scores, &flags), Some(1.0));
    }

    #[test]
    fn auc_hand_example() {
        let auc = auc_roc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((auc - 0.75).abs() < 1e-15);
    }

    #[test]
    fn undefined_cases() {
        assert_eq!(mcc(&[1, 1, 1], &[0, 1, 1]), None);
        assert_eq!(auc_roc(&[0.1, 0.2], &[true, true]), None);
        assert_eq!(auc_pr(&[0.1, 0.2], &[false, false]), None);
        assert_eq!(f1(&[0, 0], &[0, 0], Averaging::Binary), None);
        assert_eq!(median(&mut []), None);
    }

    fn brute_auc(scores: &[f64], targets: &[bool]) -> Option<f64> {
        let (mut num, mut pairs) = (0.0, 0usize);
        for (i, &ti) in targets.iter().enumerate() {
            for (j, &tj) in targets.iter().enumerate() {
                if ti && !tj {
                    pairs += 1;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        (pairs > 0).then(|| num / pairs as f64)
    }

    fn brute_ap(scores: &[f64], targets: &[bool]) -> Option<f64> {
        let pos = targets.iter().filter(|&&t| t).count();
        if pos == 0 {
            return None;
        }
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let (mut ap, mut prev) = (0.0, 0.0);
        for th in thresholds {
            let sel: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= th).collect();
            let tp = sel.iter().filter(|&&i| targets[i]).count();
            let r = tp as f64 / pos as f64;
            ap += (r - prev) * tp as f64 / sel.len() as f64;
            prev = r;
        }
        Some(ap)
    }

    fn brute_mcc(preds: &[usize], targets: &[usize]) -> Option<f64> {
        let k = preds.iter().chain(targets).max().unwrap() + 1;
        let mut c = vec![vec![0f64; k]; k];
        for (&p, &t) in preds.iter().zip(targets) {
            c[t][p] += 1.0;
        }
        // Gorodkin's R_K from the confusion matrix
        let n: f64 = preds.len() as f64;
        let num: f64 = (0..k)
            .flat_map(|kk| (0..k).flat_map(move |l| (0..k).map(move |m| (kk, l, m))))
            .map(|(kk, l, m)| c[kk][kk] * c[l][m] - c[kk][l] * c[m][kk])
            .sum();
        let row = |i: usize| c[i].iter().sum::<f64>();
        let col = |i: usize| (0..k).map(|r| c[r][i]).sum::<f64>();
        let d1: f64 = (0..k).map(|kk| row(kk) * (n - row(kk))).sum();
        let d2: f64 = (0..k).map(|kk| col(kk) * (n - col(kk))).sum();
        (d1 > 0.0 && d2 > 0.0).then(|| num / (d1 * d2).sqrt())
    }

    fn brute_binary_f1(preds: &[usize], targets: &[usize], positive: usize) -> Option<f64> {
        let tp = preds.iter().zip(targets).filter(|(&p, &t)| p == positive && t == positive).count();
        let fp = preds.iter().zip(targets).filter(|(&p, &t)| p == positive && t != positive).count();
        let fn_ = preds.iter().zip(targets).filter(|(&p, &t)| p != positive && t == positive).count();
        let den = 2 * tp + fp + fn_;
        (den > 0).then(|| 2.0 * tp as f64 / den as f64)
    }

    #[test]
    fn match_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let n = rng.random_range(1..=20);
            let k = rng.random_range(2..=4);
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            // coarse scores so ties are common
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
            let flags: Vec<bool> = targets.iter().map(|&t| t == 1).collect();

            let (a, b) = (mcc(&preds, &targets), brute_mcc(&preds, &targets));
            assert_eq!(a.is_some(), b.is_some());
            if let (Some(a), Some(b)) = (a, b) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
            assert_eq!(f1(&preds, &targets, Averaging::Binary), brute_binary_f1(&preds, &targets, 1));
            let classes: Vec<f64> = (0..k).filter_map(|c| brute_binary_f1(&preds, &targets, c)).collect();
            let macro_f1 = f1(&preds, &targets, Averaging::Macro).unwrap();
            assert!((macro_f1 - classes.iter().sum::<f64>() / classes.len() as f64).abs() < 1e-12);
            assert_eq!(f1(&preds, &targets, Averaging::Micro), accuracy(&preds, &targets));

            let (a, b) = (auc_roc(&scores, &flags), brute_auc(&scores, &flags));
            assert_eq!(a.is_some(), b.is_some());
            if let (Some(a), Some(b)) = (a, b) {
                assert!((a - b).abs() < 1e-12);
            }
            let (a, b) = (auc_pr(&scores, &flags), brute_ap(&scores, &flags));
            assert_eq!(a.is_some(), b.is_some());
            if let (Some(a), Some(b)) = (a, b) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn median_auc_is_median_of_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scores: Vec<Vec<f64>> = (0..30).map(|_| (0..5).map(|_| rng.random()).collect()).collect();
        let targets: Vec<Vec<bool>> = (0..30).map(|_| (0..5).map(|_| rng.random_bool(0.4)).collect()).collect();
        let mut each: Vec<f64> = (0..5)
            .map(|j| {
                let s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
                let t: Vec<bool> = targets.iter().map(|r| r[j]).collect();
                auc_roc(&s, &t).unwrap()
            })
            .collect();
        each.sort_by(f64::total_cmp);
        assert_eq!(median_auc_per_label(&scores, &targets), Some(each[2]));
    }

    proptest! {
        #[test]
        fn mcc_invariant_under_renaming(pairs in proptest::collection::vec((0usize..3, 0usize..3), 2..20)) {
            let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let targets: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let perm = [2, 0, 1];
            let rp: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
            let rt: Vec<usize> = targets.iter().map(|&t| perm[t]).collect();
            match (mcc(&preds, &targets), mcc(&rp, &rt)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn auc_invariant_under_monotone_transform(pairs in proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 2..20)) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let targets: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            let warped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 3.0).collect();
            prop_assert_eq!(auc_roc(&scores, &targets), auc_roc(&warped, &targets));
        }
    }
}
