//! Evaluation metrics: exact rank-based AUC, LogLoss, and stratified
//! breakdowns. Per-field reconstruction accuracy lives in the train module
//! because it needs a model forward pass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOGLOSS_EPS: f64 = 1e-7;

/// Final metrics of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub logloss: f64,
    /// Reconstruction accuracy per feature field, schema order.
    pub per_field_recon_acc: Vec<f64>,
    /// Spearman correlation between exp(−s^i) and 1/ℓ^i at convergence.
    pub spearman_s_vs_invloss: f64,
    pub strata_auc: BTreeMap<String, f64>,
}

/// Mann–Whitney AUC with average ranks for ties. Exact O(n log n).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // average ranks over tie groups (1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean binary cross-entropy with scores clipped to `[ε, 1−ε]`.
pub fn logloss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Metric("bad logloss input lengths".into()));
    }
    let mut total = 0.0;
    for (&p, &y) in scores.iter().zip(labels) {
        let p = p.clamp(LOGLOSS_EPS, 1.0 - LOGLOSS_EPS);
        total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / scores.len() as f64)
}

/// AUC per stratum. Single-class strata are omitted and reported back.
pub fn stratified_auc(
    scores: &[f64],
    labels: &[u8],
    strata: &[String],
) -> Result<(BTreeMap<String, f64>, Vec<String>)> {
    if strata.len() != scores.len() {
        return Err(Error::Metric("strata keys differ in length".into()));
    }
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((&s, &y), key) in scores.iter().zip(labels).zip(strata) {
        let g = groups.entry(key.as_str()).or_default();
        g.0.push(s);
        g.1.push(y);
    }
    let mut out = BTreeMap::new();
    let mut omitted = Vec::new();
    for (key, (s, y)) in groups {
        match auc(&s, &y) {
            Ok(a) => {
                out.insert(key.to_string(), a);
            }
            Err(_) => omitted.push(key.to_string()),
        }
    }
    Ok((out, omitted))
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Metric("spearman needs two equal-length vectors".into()));
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&x, &y| v[x].partial_cmp(&v[y]).expect("finite"));
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &idx in &order[i..=j] {
                ranks[idx] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let ra = rank(a);
    let rb = rank(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Metric("spearman undefined for constant input".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn auc_basics() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1]).unwrap(), 0.5);
        // brute force over the 4 pos-neg pairs: wins 3 of 4
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_brute_force() {
        let mut rng = crate::rng::derive_rng(6, "metrics", 0);
        for _ in 0..20 {
            let n = 60;
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 8.0).round() / 8.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen::<f64>() < 0.4)).collect();
            if labels.iter().all(|&y| y == 0) || labels.iter().all(|&y| y == 1) {
                continue;
            }
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == 1 && labels[j] == 0 {
                        pairs += 1.0;
                        if scores[i] > scores[j] {
                            wins += 1.0;
                        } else if scores[i] == scores[j] {
                            wins += 0.5;
                        }
                    }
                }
            }
            let got = auc(&scores, &labels).unwrap();
            assert!((got - wins / pairs).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = crate::rng::derive_rng(6, "metrics", 1);
        for _ in 0..50 {
            let n = 80;
            let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen::<f64>() < 0.5)).collect();
            if labels.iter().all(|&y| y == labels[0]) {
                continue;
            }
            let a = rng.gen::<f64>() * 3.0 + 0.1;
            let b = rng.gen::<f64>() * 2.0 - 1.0;
            let mapped: Vec<f64> = scores.iter().map(|&x| (a * x + b).exp()).collect();
            let base = auc(&scores, &labels).unwrap();
            let xf = auc(&mapped, &labels).unwrap();
            assert!((base - xf).abs() < 1e-12);
        }
    }

    #[test]
    fn logloss_basics() {
        let v = logloss(&[0.5, 0.5], &[0, 1]).unwrap();
        assert!((v - 2.0_f64.ln()).abs() < 1e-12);
        let eps_floor = logloss(&[1.0, 0.0], &[1, 0]).unwrap();
        assert!(eps_floor > 0.0 && eps_floor < 1e-6);
        // straight-line scalar oracle on a hand-set case
        let scores = [0.9, 0.2, 0.6];
        let labels = [1u8, 0, 1];
        let want = (-(0.9f64.ln()) - (0.8f64.ln()) - (0.6f64.ln())) / 3.0;
        assert!((logloss(&scores, &labels).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn logloss_minimized_at_truth() {
        let labels = [1u8, 0, 1, 1, 0];
        let truth: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
        let base = logloss(&truth, &labels).unwrap();
        let mut rng = crate::rng::derive_rng(6, "metrics", 2);
        for _ in 0..200 {
            let p: Vec<f64> = (0..5).map(|_| rng.gen::<f64>()).collect();
            assert!(logloss(&p, &labels).unwrap() >= base);
        }
    }

    #[test]
    fn stratified_matches_global_for_single_stratum() {
        let scores = [0.1, 0.7, 0.4, 0.9];
        let labels = [0u8, 1, 0, 1];
        let strata: Vec<String> = vec!["all".into(); 4];
        let (m, omitted) = stratified_auc(&scores, &labels, &strata).unwrap();
        assert!(omitted.is_empty());
        assert_eq!(m["all"], auc(&scores, &labels).unwrap());
    }

    #[test]
    fn identical_strata_identical_auc_and_single_class_omitted() {
        let scores = [0.1, 0.7, 0.4, 0.9, 0.1, 0.7, 0.4, 0.9, 0.3];
        let labels = [0u8, 1, 0, 1, 0, 1, 0, 1, 1];
        let strata: Vec<String> = ["a", "a", "a", "a", "b", "b", "b", "b", "c"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (m, omitted) = stratified_auc(&scores, &labels, &strata).unwrap();
        assert_eq!(m["a"], m["b"]);
        assert_eq!(omitted, vec!["c".to_string()]);
    }

    #[test]
    fn spearman_perfect_and_inverse() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [10.0, 20.0, 30.0, 40.0];
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &c).unwrap() + 1.0).abs() < 1e-12);
    }
}
