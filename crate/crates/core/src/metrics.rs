//! Evaluation metrics: accuracy, Matthews correlation, and Spearman rank
//! correlation, with fixed conventions for degenerate inputs.

use crate::error::{Error, Result};

fn check_lengths(name: &str, a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::Metric(format!("{name} needs at least one example")));
    }
    if a != b {
        return Err(Error::Metric(format!(
            "{name} got {a} predictions but {b} golds"
        )));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check_lengths("accuracy", preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Matthews correlation coefficient for binary labels (0/1). When any
/// confusion-matrix margin is empty the denominator vanishes; that case is
/// defined as 0.0.
pub fn mcc(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check_lengths("mcc", preds.len(), golds.len())?;
    let (mut tp, mut tn, mut fp, mut fnn) = (0f64, 0f64, 0f64, 0f64);
    for (&p, &g) in preds.iter().zip(golds) {
        if p > 1 || g > 1 {
            return Err(Error::Metric(format!(
                "mcc labels must be 0 or 1, got pred {p} gold {g}"
            )));
        }
        match (p, g) {
            (1, 1) => tp += 1.0,
            (0, 0) => tn += 1.0,
            (1, 0) => fp += 1.0,
            (0, 1) => fnn += 1.0,
            _ => unreachable!(),
        }
    }
    let denom = (tp + fp) * (tp + fnn) * (tn + fp) * (tn + fnn);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((tp * tn - fp * fnn) / denom.sqrt())
}

/// Average ranks (1-based); tied values share the mean of the positions
/// they would occupy.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average 1-based rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks. Returns
/// 0.0 when either side has zero rank variance.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths("spearman", x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::Metric("spearman needs at least two pairs".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Metric("spearman inputs must be finite".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let dx = a - mx;
        let dy = b - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_basics() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 1, 1]).unwrap(), 2.0 / 3.0);
        assert_eq!(accuracy(&[2, 2], &[2, 2]).unwrap(), 1.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn mcc_hand_case_and_symmetry() {
        // tp=2 tn=3 fp=1 fn=1: (6-1)/sqrt(3*3*4*4) = 5/12.
        let preds = [1, 1, 1, 0, 0, 0, 0];
        let golds = [1, 1, 0, 1, 0, 0, 0];
        let v = mcc(&preds, &golds).unwrap();
        assert!((v - 5.0 / 12.0).abs() < 1e-15);
        // MCC is symmetric under swapping predictions and golds.
        assert_eq!(v, mcc(&golds, &preds).unwrap());
        // Perfect and inverted predictions.
        assert_eq!(mcc(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(mcc(&[0, 1, 0], &[1, 0, 1]).unwrap(), -1.0);
    }

    #[test]
    fn mcc_degenerate_margins_are_zero() {
        assert_eq!(mcc(&[1, 1, 1], &[1, 0, 1]).unwrap(), 0.0, "no negative preds");
        assert_eq!(mcc(&[0, 1, 0], &[0, 0, 0]).unwrap(), 0.0, "single gold class");
        assert!(mcc(&[2, 0], &[1, 0]).is_err(), "labels beyond binary");
    }

    #[test]
    fn ranks_average_over_ties() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(average_ranks(&[5.0]), vec![1.0]);
        assert_eq!(average_ranks(&[2.0, 2.0, 2.0]), vec![2.0, 2.0, 2.0]);
        assert_eq!(average_ranks(&[3.0, 1.0, 2.0]), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn spearman_reference_cases() {
        // Tied x-ranks: [1, 2.5, 2.5, 4] against [1, 3, 2, 4].
        let v = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((v - 0.9486832980505138).abs() < 1e-15);
        // Monotone transforms give exactly 1.
        let x = [0.1, 0.7, 0.3, 0.9, 0.5];
        let y: Vec<f64> = x.iter().map(|v| v * v * v * 10.0 + 2.0).collect();
        assert_eq!(spearman(&x, &y).unwrap(), 1.0);
        // Reversal gives exactly -1.
        let ry: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(spearman(&x, &ry).unwrap(), -1.0);
    }

    #[test]
    fn spearman_degenerate_and_invalid() {
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }
}
