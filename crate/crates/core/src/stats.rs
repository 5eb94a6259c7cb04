//! Rank statistics: ROC AUC, Spearman correlation, permutation testing,
//! and Dice overlap.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Mann-Whitney AUC: fraction of (positive, negative) pairs where the
/// positive outranks the negative, ties half-credited. Exact counting, so the
/// result is identical to brute-force pair enumeration.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data("auc: scores and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("auc: both classes must be present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // scan tie groups in ascending score order; count wins and ties exactly
    let mut wins = 0u64; // pairs with score_pos > score_neg
    let mut ties = 0u64; // pairs with equal scores
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut pos_here = 0u64;
        let mut neg_here = 0u64;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        wins += pos_here * neg_below;
        ties += pos_here * neg_here;
        neg_below += neg_here;
        i = j;
    }
    Ok((wins as f64 + 0.5 * ties as f64) / (pos as f64 * neg as f64))
}

/// Average ranks (1-based); tied values share the mean of their rank range.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let mean_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for k in i..j {
            ranks[order[k]] = mean_rank;
        }
        i = j;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Data("correlation undefined: zero variance".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman's rho: Pearson correlation of average-ranked data.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::Data("spearman: need equal lengths >= 3".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Two-sided permutation test on Spearman's rho with add-one smoothing:
/// p = (1 + #{|rho_perm| >= |rho_obs|}) / (n + 1).
pub fn permutation_test(x: &[f64], y: &[f64], n_perm: usize, seed: u64) -> Result<f64> {
    if n_perm == 0 {
        return Err(Error::Config("permutation_test: need n >= 1".into()));
    }
    let rho_obs = spearman(x, y)?;
    if !rho_obs.is_finite() {
        return Err(Error::numeric("permutation_test", "observed rho undefined"));
    }
    // ranks are permutation-invariant: permute the rank vector directly
    let rx = average_ranks(x);
    let mut ry = average_ranks(y);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut exceed = 0usize;
    for _ in 0..n_perm {
        ry.shuffle(&mut rng);
        let rho = pearson(&rx, &ry)?;
        if rho.abs() >= rho_obs.abs() {
            exceed += 1;
        }
    }
    Ok((1 + exceed) as f64 / (n_perm + 1) as f64)
}

/// Dice overlap 2|a n b| / (|a| + |b|); 0 when both masks are empty.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("dice", format!("{} vs {}", a.len(), b.len())));
    }
    let na = a.iter().filter(|&&v| v).count();
    let nb = b.iter().filter(|&&v| v).count();
    if na + nb == 0 {
        return Ok(0.0);
    }
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}
