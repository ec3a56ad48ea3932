//! Evaluation metrics and dataset-splitting helpers.

use rand::seq::SliceRandom;
use rand::Rng;

use super::TrainError;

/// Area under the ROC curve: the probability that a uniformly random
/// positive outranks a uniformly random negative, with ties counted ½.
/// Computed from average ranks (Mann–Whitney form).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, TrainError> {
    if scores.len() != labels.len() {
        return Err(TrainError::BadMetricInput(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(TrainError::EmptyInput("auroc"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(TrainError::BadMetricInput("non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TrainError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average rank within each tie group (ranks are 1-based).
    let mut rank = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            rank[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&rank)
        .filter_map(|(&l, &r)| l.then_some(r))
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean absolute error in the units of the inputs.
pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64, TrainError> {
    if preds.len() != targets.len() {
        return Err(TrainError::BadMetricInput(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(TrainError::EmptyInput("mae"));
    }
    Ok(preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / preds.len() as f64)
}

/// Split `n` subjects into (train, validation) index lists. When class
/// labels are given the split is stratified so both sides of a binary
/// task keep both classes; otherwise it is a plain shuffled split.
pub fn split_indices(
    n: usize,
    classes: Option<&[usize]>,
    val_fraction: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if n < 2 {
        return Err(TrainError::EmptyInput("split needs at least two subjects"));
    }
    if !(0.0..1.0).contains(&val_fraction) || val_fraction <= 0.0 {
        return Err(TrainError::BadConfig(format!("val_fraction = {val_fraction} outside (0,1)")));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    match classes {
        Some(classes) => {
            if classes.len() != n {
                return Err(TrainError::BadMetricInput("class list length mismatch".into()));
            }
            let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
            for (i, &c) in classes.iter().enumerate() {
                by_class.entry(c).or_default().push(i);
            }
            for (_, mut members) in by_class {
                members.shuffle(rng);
                let n_val = ((members.len() as f64 * val_fraction).round() as usize)
                    .clamp(1, members.len().saturating_sub(1).max(1));
                val.extend_from_slice(&members[..n_val]);
                train.extend_from_slice(&members[n_val..]);
            }
        }
        None => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(rng);
            let n_val = ((n as f64 * val_fraction).floor() as usize).clamp(1, n - 1);
            val.extend_from_slice(&all[..n_val]);
            train.extend_from_slice(&all[n_val..]);
        }
    }
    if train.is_empty() {
        return Err(TrainError::EmptyInput("training split is empty"));
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Keep exactly `⌊fraction·n⌋` (at least one) of the training indices,
/// chosen uniformly. Fraction 1 keeps everything untouched.
pub fn limit_labels(
    train: &[usize],
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, TrainError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TrainError::BadConfig(format!("label_fraction = {fraction} outside (0,1]")));
    }
    if fraction == 1.0 {
        return Ok(train.to_vec());
    }
    let keep = ((train.len() as f64 * fraction).floor() as usize).max(1);
    let mut shuffled = train.to_vec();
    shuffled.shuffle(rng);
    shuffled.truncate(keep);
    shuffled.sort_unstable();
    Ok(shuffled)
}
