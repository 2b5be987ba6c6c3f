//! Classification metrics on a small hand-checkable example.

use genelm::downstream::metrics::{accuracy, auc_pr, auc_roc, f1, mcc, Averaging};

fn main() {
    let targets = [0, 1, 1, 0, 1, 0, 1, 1];
    let preds = [0, 1, 0, 0, 1, 1, 1, 1];
    let scores = [0.1, 0.9, 0.4, 0.3, 0.8, 0.6, 0.7, 0.95];
    let flags: Vec<bool> = targets.iter().map(|&t| t == 1).collect();
    println!("accuracy {:?}", accuracy(&preds, &targets));
    println!("f1       {:?}", f1(&preds, &targets, Averaging::Binary));
    println!("mcc      {:?}", mcc(&preds, &targets));
    println!("auc_roc  {:?}", auc_roc(&scores, &flags));
    println!("auc_pr   {:?}", auc_pr(&scores, &flags));

    let three = [0, 1, 2, 2, 1, 0];
    let guess = [0, 2, 2, 2, 1, 1];
    println!("macro f1 {:?}", f1(&guess, &three, Averaging::Macro));
    println!("mcc(3)   {:?}", mcc(&guess, &three));
    println!("mcc of a constant predictor: {:?}", mcc(&[1; 4], &[0, 1, 0, 1]));
}
