//! Attention diagnostics and scoring: per-head diagonality heatmaps,
//! threshold pruning plans, inter-head similarity, Levenshtein WER and the
//! matched-pairs segment error (MAPSSWE) significance test.

mod plan;
mod stats;

pub use plan::{plan_from_threshold, PrunePlan, Provenance};
pub use stats::{edit_distance_wer, mapsswe, mapsswe_permutation, Mapsswe, SegmentErrors, WerReport};

use std::fmt::Write as _;

use crate::attention::{AttnMatrix, DumpRecord, Site, ROW_SUM_TOL};
use crate::error::{invalid, Result};

/// `1 − m(A)/(n − 1)` where `m(A) = (1/n)·Σᵢ Σⱼ Aᵢⱼ·|i − j|` is the mean
/// attended offset. Identity maps score 1; a 1×1 matrix scores 1.
pub fn diagonality(a: &AttnMatrix) -> Result<f64> {
    if a.n != a.m {
        return Err(invalid("diagonality", format!("matrix is {}×{}, not square", a.n, a.m)));
    }
    a.check_row_stochastic(ROW_SUM_TOL)?;
    let n = a.n;
    if n == 1 {
        return Ok(1.0);
    }
    let mut offset = 0.0;
    for i in 0..n {
        for (j, &w) in a.row(i).iter().enumerate() {
            offset += w * i.abs_diff(j) as f64;
        }
    }
    let mean_offset = offset / n as f64;
    Ok((1.0 - mean_offset / (n - 1) as f64).clamp(0.0, 1.0))
}

/// Mean diagonality per `(layer, head)` of one self-attention site.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub site: Site,
    /// `values[layer][head]`, each in `[0, 1]`.
    pub values: Vec<Vec<f64>>,
    /// Number of utterances averaged per cell.
    pub utterances: usize,
}

impl Heatmap {
    pub fn layers(&self) -> usize {
        self.values.len()
    }

    pub fn heads(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// `layer,head,diagonality` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,head,diagonality\n");
        for (l, row) in self.values.iter().enumerate() {
            for (h, v) in row.iter().enumerate() {
                let _ = writeln!(s, "{l},{h},{v}");
            }
        }
        s
    }

    /// Whitespace-separated matrix, one line per layer (gnuplot `matrix` input).
    pub fn to_matrix_text(&self) -> String {
        let mut s = String::new();
        for row in &self.values {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }
}

/// Averages diagonality over utterances for each `(layer, head)`.
///
/// Each record holds one utterance's heads for one layer; records must share
/// a site, be square, and agree on the head count.
pub fn build_heatmap(records: &[DumpRecord]) -> Result<Heatmap> {
    let first = records.first().ok_or_else(|| invalid("heatmap", "no attention records"))?;
    let heads = first.heads.len();
    let layers = records.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    let mut sums = vec![vec![0.0; heads]; layers];
    let mut counts = vec![0usize; layers];
    for r in records {
        if r.site != first.site {
            return Err(invalid("heatmap", format!("mixed sites {} and {}", first.site, r.site)));
        }
        if r.heads.len() != heads {
            return Err(invalid(
                "heatmap",
                format!("layer {} has {} heads, expected {heads}", r.layer, r.heads.len()),
            ));
        }
        for (h, m) in r.heads.iter().enumerate() {
            sums[r.layer][h] += diagonality(m)?;
        }
        counts[r.layer] += 1;
    }
    if let Some(l) = counts.iter().position(|&c| c == 0) {
        return Err(invalid("heatmap", format!("no records for layer {l}")));
    }
    let values = sums
        .into_iter()
        .zip(&counts)
        .map(|(row, &c)| row.into_iter().map(|s| s / c as f64).collect())
        .collect();
    Ok(Heatmap {
        site: first.site,
        values,
        utterances: counts.iter().copied().max().unwrap_or(0),
    })
}

/// Mean pairwise head similarity of one layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub mean: f64,
    pub utterances: usize,
    /// Row pairs left out because one of the rows had zero norm.
    pub skipped_rows: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| (dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity between same-index rows of every unordered head pair,
/// averaged over rows, then pairs, then utterances. Matrices are only ever
/// compared within one utterance.
pub fn head_similarity(records: &[DumpRecord]) -> Result<Similarity> {
    if records.is_empty() {
        return Err(invalid("head-similarity", "no attention records"));
    }
    let mut skipped_rows = 0;
    let mut per_utt = Vec::with_capacity(records.len());
    for r in records {
        let h = r.heads.len();
        if h < 2 {
            return Err(invalid("head-similarity", format!("need at least 2 heads, record has {h}")));
        }
        let mut pair_means = Vec::new();
        for a in 0..h {
            for b in a + 1..h {
                let (ha, hb) = (&r.heads[a], &r.heads[b]);
                let mut sum = 0.0;
                let mut used = 0usize;
                for i in 0..r.n() {
                    match cosine(ha.row(i), hb.row(i)) {
                        Some(c) => {
                            sum += c;
                            used += 1;
                        }
                        None => skipped_rows += 1,
                    }
                }
                if used > 0 {
                    pair_means.push(sum / used as f64);
                }
            }
        }
        if !pair_means.is_empty() {
            per_utt.push(pair_means.iter().sum::<f64>() / pair_means.len() as f64);
        }
    }
    if per_utt.is_empty() {
        return Err(invalid("head-similarity", "every row pair had zero norm"));
    }
    Ok(Similarity {
        mean: per_utt.iter().sum::<f64>() / per_utt.len() as f64,
        utterances: per_utt.len(),
        skipped_rows,
    })
}

/// [`head_similarity`] for each layer present in `records`, in layer order.
pub fn similarity_by_layer(records: &[DumpRecord]) -> Result<Vec<(usize, Similarity)>> {
    let layers = records.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    (0..layers)
        .filter_map(|l| {
            let of_layer: Vec<DumpRecord> = records.iter().filter(|r| r.layer == l).cloned().collect();
            (!of_layer.is_empty()).then(|| head_similarity(&of_layer).map(|s| (l, s)))
        })
        .collect()
}
