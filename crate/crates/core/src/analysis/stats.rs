use statrs::function::erf::erfc;

use crate::error::{invalid, Result};

/// Levenshtein alignment counts between a reference and a hypothesis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WerReport {
    pub wer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
    /// Set when the reference is empty; `wer` is then `insertions / 1`.
    pub empty_reference: bool,
}

impl WerReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Unit-cost edit distance with `(S + D + I) / len(ref)`.
pub fn edit_distance_wer<W: PartialEq>(reference: &[W], hypothesis: &[W]) -> WerReport {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut cost = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in cost.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, c) in cost[0].iter_mut().enumerate() {
        *c = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cost[i][j] = diag.min(cost[i - 1][j] + 1).min(cost[i][j - 1] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let (mut s, mut d, mut ins) = (0, 0, 0);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let mismatch = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if cost[i][j] == cost[i - 1][j - 1] + mismatch {
                s += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[i][j] == cost[i - 1][j] + 1 {
            d += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    WerReport {
        wer: (s + d + ins) as f64 / n.max(1) as f64,
        substitutions: s,
        deletions: d,
        insertions: ins,
        ref_len: n,
        empty_reference: n == 0,
    }
}

/// Per-segment error counts of one system on a shared reference set.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentErrors {
    pub errors: Vec<f64>,
}

impl SegmentErrors {
    pub fn new(errors: Vec<f64>) -> Self {
        Self { errors }
    }

    /// Aligns each hypothesis segment against its reference.
    pub fn from_segments<W: PartialEq>(references: &[Vec<W>], hypotheses: &[Vec<W>]) -> Result<Self> {
        if references.len() != hypotheses.len() {
            return Err(invalid(
                "segment-errors",
                format!("{} references but {} hypotheses", references.len(), hypotheses.len()),
            ));
        }
        Ok(Self {
            errors: references
                .iter()
                .zip(hypotheses)
                .map(|(r, h)| edit_distance_wer(r, h).errors() as f64)
                .collect(),
        })
    }
}

/// Matched-pairs test statistic and two-sided p-value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mapsswe {
    pub z: f64,
    pub p: f64,
    pub mean_difference: f64,
    pub segments: usize,
}

fn differences(a: &SegmentErrors, b: &SegmentErrors) -> Result<Vec<f64>> {
    if a.errors.len() != b.errors.len() {
        return Err(invalid(
            "mapsswe",
            format!("systems scored {} and {} segments", a.errors.len(), b.errors.len()),
        ));
    }
    if a.errors.is_empty() {
        return Err(invalid("mapsswe", "no segments"));
    }
    Ok(a.errors.iter().zip(&b.errors).map(|(x, y)| x - y).collect())
}

/// `Z = mean(d) / (sd(d)/√K)` on per-segment differences `d = a − b` with
/// sample standard deviation, and `p` from the standard normal.
///
/// All-zero differences give `Z = 0, p = 1`. Constant non-zero differences
/// give an infinite `Z` and `p = 0`.
pub fn mapsswe(a: &SegmentErrors, b: &SegmentErrors) -> Result<Mapsswe> {
    let d = differences(a, b)?;
    let k = d.len();
    let mean = d.iter().sum::<f64>() / k as f64;
    if d.iter().all(|&v| v == 0.0) {
        return Ok(Mapsswe {
            z: 0.0,
            p: 1.0,
            mean_difference: 0.0,
            segments: k,
        });
    }
    if k < 2 {
        return Err(invalid("mapsswe", "at least two segments are needed for a variance"));
    }
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    let sd = var.sqrt();
    let z = if sd == 0.0 {
        mean.signum() * f64::INFINITY
    } else {
        mean / (sd / (k as f64).sqrt())
    };
    let p = if mean == 0.0 { 1.0 } else { erfc(z.abs() / std::f64::consts::SQRT_2) };
    Ok(Mapsswe {
        z: if mean == 0.0 { 0.0 } else { z },
        p,
        mean_difference: mean,
        segments: k,
    })
}

/// Exact two-sided sign-flip permutation p-value for the mean difference,
/// enumerating all `2^K` sign assignments. Intended for small `K` (at most 24).
pub fn mapsswe_permutation(a: &SegmentErrors, b: &SegmentErrors) -> Result<f64> {
    let d = differences(a, b)?;
    let k = d.len();
    if k > 24 {
        return Err(invalid("mapsswe-permutation", format!("{k} segments exceed the exact limit of 24")));
    }
    let observed = d.iter().sum::<f64>().abs();
    let total = 1u64 << k;
    let mut extreme = 0u64;
    for signs in 0..total {
        let s: f64 = d
            .iter()
            .enumerate()
            .map(|(i, &v)| if signs >> i & 1 == 1 { -v } else { v })
            .sum();
        if s.abs() >= observed - 1e-12 {
            extreme += 1;
        }
    }
    Ok(extreme as f64 / total as f64)
}
