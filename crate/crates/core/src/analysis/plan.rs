use std::fmt::Write as _;

use crate::analysis::Heatmap;
use crate::attention::Site;
use crate::error::{invalid, Result};

/// How a prune plan was derived.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Provenance {
    /// Heads whose diagonality exceeds the threshold were removed.
    Threshold(f64),
    /// Every head of the last layer was removed.
    Topmost,
    Manual,
}

/// Static keep/remove decision for every head of one attention site.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunePlan {
    pub site: Site,
    /// `keep[layer][head]`
    pub keep: Vec<Vec<bool>>,
    pub provenance: Provenance,
}

impl PrunePlan {
    pub fn keep_all(site: Site, layers: usize, heads: usize) -> Self {
        Self {
            site,
            keep: vec![vec![true; heads]; layers],
            provenance: Provenance::Manual,
        }
    }

    /// Removes every head in the last layer.
    pub fn remove_topmost(site: Site, layers: usize, heads: usize) -> Self {
        let mut plan = Self::keep_all(site, layers, heads);
        if let Some(top) = plan.keep.last_mut() {
            top.iter_mut().for_each(|k| *k = false);
        }
        plan.provenance = Provenance::Topmost;
        plan
    }

    pub fn layers(&self) -> usize {
        self.keep.len()
    }

    pub fn heads(&self) -> usize {
        self.keep.first().map_or(0, Vec::len)
    }

    pub fn total(&self) -> usize {
        self.keep.iter().map(Vec::len).sum()
    }

    pub fn remaining(&self) -> usize {
        self.keep.iter().flatten().filter(|&&k| k).count()
    }

    pub fn removed(&self) -> usize {
        self.total() - self.remaining()
    }

    /// Text form: a comment header naming site and provenance, then one
    /// `layer head keep` line per head with `keep` as `0`/`1`.
    pub fn to_text(&self) -> String {
        let prov = match self.provenance {
            Provenance::Threshold(t) => format!("threshold:{t}"),
            Provenance::Topmost => "topmost".into(),
            Provenance::Manual => "manual".into(),
        };
        let mut s = format!("# prune-plan site={} provenance={prov}\n", self.site);
        for (l, row) in self.keep.iter().enumerate() {
            for (h, &k) in row.iter().enumerate() {
                let _ = writeln!(s, "{l} {h} {}", u8::from(k));
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut site = Site::EncoderSelf;
        let mut provenance = Provenance::Manual;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(header) = line.strip_prefix('#') {
                for field in header.split_whitespace() {
                    if let Some(v) = field.strip_prefix("site=") {
                        site = v.parse()?;
                    } else if let Some(v) = field.strip_prefix("provenance=") {
                        provenance = match v {
                            "topmost" => Provenance::Topmost,
                            "manual" => Provenance::Manual,
                            other => {
                                let t = other
                                    .strip_prefix("threshold:")
                                    .and_then(|t| t.parse().ok())
                                    .ok_or_else(|| invalid("prune-plan", format!("unknown provenance `{other}`")))?;
                                Provenance::Threshold(t)
                            }
                        };
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let nums: Vec<usize> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| invalid("prune-plan", format!("line {}: expected `layer head keep`", lineno + 1)))?;
            match nums[..] {
                [l, h, k @ (0 | 1)] => entries.push((l, h, k == 1)),
                _ => return Err(invalid("prune-plan", format!("line {}: expected `layer head keep`", lineno + 1))),
            }
        }
        let layers = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
        let heads = entries.iter().map(|e| e.1 + 1).max().unwrap_or(0);
        if layers * heads != entries.len() {
            return Err(invalid(
                "prune-plan",
                format!("{} entries do not cover a {layers}×{heads} grid", entries.len()),
            ));
        }
        let mut keep = vec![vec![None; heads]; layers];
        for (l, h, k) in entries {
            if keep[l][h].replace(k).is_some() {
                return Err(invalid("prune-plan", format!("duplicate entry for layer {l} head {h}")));
            }
        }
        let keep = keep
            .into_iter()
            .map(|row| row.into_iter().map(|k| k.expect("grid covered")).collect())
            .collect();
        Ok(Self { site, keep, provenance })
    }
}

/// Keeps heads whose diagonality is at most `tau`.
pub fn plan_from_threshold(hm: &Heatmap, tau: f64) -> Result<PrunePlan> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(invalid("plan-from-threshold", format!("tau {tau} outside [0, 1]")));
    }
    Ok(PrunePlan {
        site: hm.site,
        keep: hm.values.iter().map(|row| row.iter().map(|&d| d <= tau).collect()).collect(),
        provenance: Provenance::Threshold(tau),
    })
}
