//! Synthetic sequence tasks standing in for speech corpora.
//!
//! Each example is a token sequence rendered as source frames: every token
//! occupies `frames_per_token` rows holding the token's fixed embedding plus
//! Gaussian noise. Targets are derived from the tokens by the task kind.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::analysis::edit_distance_wer;
use crate::autodiff::Tensor;
use crate::error::{invalid, Error, Result};
use crate::model::{frontend_out_len, EOS, FIRST_SYMBOL, PAD, SOS};
use crate::objectives::ctc_min_frames;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Majority symbol of each interior width-3 window.
    LocalPattern,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::LocalPattern => "local_pattern",
        }
    }

    /// Shortest token sequence the task is defined on.
    pub fn min_tokens(self) -> usize {
        match self {
            TaskKind::LocalPattern => 3,
            _ => 1,
        }
    }

    pub fn target_len(self, len: usize) -> usize {
        match self {
            TaskKind::LocalPattern => len.saturating_sub(2),
            _ => len,
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [TaskKind::Copy, TaskKind::Reverse, TaskKind::LocalPattern]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid("task-kind", format!("unknown task `{s}`")))
    }
}

/// Target sequence of `tokens` under `kind`.
///
/// For windows with three distinct symbols the centre symbol wins.
pub fn target_for(kind: TaskKind, tokens: &[usize]) -> Result<Vec<usize>> {
    if tokens.len() < kind.min_tokens() {
        return Err(Error::TooShort {
            what: "task tokens",
            len: tokens.len(),
            min: kind.min_tokens(),
        });
    }
    Ok(match kind {
        TaskKind::Copy => tokens.to_vec(),
        TaskKind::Reverse => tokens.iter().rev().copied().collect(),
        TaskKind::LocalPattern => tokens
            .windows(3)
            .map(|w| if w[0] == w[2] { w[0] } else { w[1] })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Model vocabulary including padding/blank and the start/end symbol.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub input_dim: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub frames_per_token: usize,
    pub noise_std: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            vocab_size: 10,
            min_len: 3,
            max_len: 6,
            input_dim: 16,
            train_size: 512,
            dev_size: 64,
            test_size: 64,
            seed: 0,
            frames_per_token: 8,
            noise_std: 0.1,
        }
    }
}

impl TaskSpec {
    pub fn symbols(&self) -> usize {
        self.vocab_size.saturating_sub(FIRST_SYMBOL)
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "task-spec";
        if self.symbols() == 0 {
            return Err(invalid(OP, format!("vocab_size {} leaves no content symbols", self.vocab_size)));
        }
        if self.min_len < self.kind.min_tokens() || self.min_len > self.max_len {
            return Err(invalid(
                OP,
                format!(
                    "lengths [{}, {}] invalid for {} (minimum {})",
                    self.min_len,
                    self.max_len,
                    self.kind.as_str(),
                    self.kind.min_tokens()
                ),
            ));
        }
        if self.input_dim == 0 || self.frames_per_token == 0 {
            return Err(invalid(OP, "input_dim and frames_per_token must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(invalid(OP, format!("noise_std {} must be finite and non-negative", self.noise_std)));
        }
        for len in self.min_len..=self.max_len {
            let frames = len * self.frames_per_token;
            let enc = frontend_out_len(frames).unwrap_or(0);
            // worst case: every adjacent target pair repeats
            let need = (2 * self.kind.target_len(len)).saturating_sub(1).max(1);
            if enc < need {
                return Err(invalid(
                    OP,
                    format!("{len} tokens give {enc} encoder frames, CTC may need {need}; raise frames_per_token"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example<T> {
    pub tokens: Vec<usize>,
    /// `[len·frames_per_token × input_dim]`
    pub src: Tensor<T>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub kind: TaskKind,
    pub examples: Vec<Example<T>>,
}

impl<T> Dataset<T> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Dataset<T>,
    pub dev: Dataset<T>,
    pub test: Dataset<T>,
}

const STREAM_TRAIN: u64 = 0;
const STREAM_DEV: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_EMBED: u64 = 3;
const MAX_DRAWS_PER_EXAMPLE: usize = 1000;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

/// Token embeddings shared by every split: `[vocab × input_dim]`, standard normal.
pub fn token_embeddings(spec: &TaskSpec) -> Vec<Vec<f64>> {
    let mut rng = stream(spec.seed, STREAM_EMBED);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    (0..spec.vocab_size)
        .map(|_| (0..spec.input_dim).map(|_| n.sample(&mut rng)).collect())
        .collect()
}

fn render<T: Scalar, R: Rng>(spec: &TaskSpec, table: &[Vec<f64>], tokens: &[usize], rng: &mut R) -> Tensor<T> {
    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
    let rows = tokens.len() * spec.frames_per_token;
    let d = spec.input_dim;
    let mut data = Vec::with_capacity(rows * d);
    for &t in tokens {
        for _ in 0..spec.frames_per_token {
            data.extend(table[t].iter().map(|&e| T::of(e + noise.sample(rng))));
        }
    }
    Tensor::new(&[rows, d], data).expect("rendered frame shape")
}

fn generate_split<T: Scalar>(
    spec: &TaskSpec,
    table: &[Vec<f64>],
    size: usize,
    stream_id: u64,
    taken: &mut HashSet<Vec<usize>>,
) -> Result<Dataset<T>> {
    let mut rng = stream(spec.seed, stream_id);
    let mut own = HashSet::new();
    let mut examples = Vec::with_capacity(size);
    let mut draws = 0usize;
    while examples.len() < size {
        draws += 1;
        if draws > MAX_DRAWS_PER_EXAMPLE * size.max(1) {
            return Err(invalid(
                "generate",
                "token space too small for disjoint splits of the requested sizes",
            ));
        }
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let tokens: Vec<usize> = (0..len)
            .map(|_| FIRST_SYMBOL + rng.random_range(0..spec.symbols()))
            .collect();
        if taken.contains(&tokens) {
            continue;
        }
        let src = render(spec, table, &tokens, &mut rng);
        let target = target_for(spec.kind, &tokens)?;
        own.insert(tokens.clone());
        examples.push(Example { tokens, src, target });
    }
    taken.extend(own);
    Ok(Dataset {
        kind: spec.kind,
        examples,
    })
}

/// Train, dev and test splits, each from its own generator stream. A token
/// sequence drawn for an earlier split is redrawn in later ones, so no
/// sequence appears in two splits.
pub fn generate<T: Scalar>(spec: &TaskSpec) -> Result<Splits<T>> {
    spec.validate()?;
    let table = token_embeddings(spec);
    let mut taken = HashSet::new();
    let train = generate_split(spec, &table, spec.train_size, STREAM_TRAIN, &mut taken)?;
    let dev = generate_split(spec, &table, spec.dev_size, STREAM_DEV, &mut taken)?;
    let test = generate_split(spec, &table, spec.test_size, STREAM_TEST, &mut taken)?;
    Ok(Splits { train, dev, test })
}

/// Padded mini-batch. Decoder inputs are `[SOS] + target`, decoder targets
/// `target + [EOS]`, both padded with [`PAD`].
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    /// One `[max_frames × input_dim]` tensor per example, zero-padded.
    pub src: Vec<Tensor<T>>,
    pub src_lens: Vec<usize>,
    /// `true` on real frames.
    pub src_mask: Vec<Vec<bool>>,
    pub dec_in: Vec<Vec<usize>>,
    pub dec_targets: Vec<Vec<usize>>,
    pub dec_lens: Vec<usize>,
    /// `true` on real decoder positions.
    pub tgt_mask: Vec<Vec<bool>>,
    /// Unpadded targets, also the CTC labels.
    pub targets: Vec<Vec<usize>>,
    /// Indices of the examples in the source dataset.
    pub indices: Vec<usize>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

fn make_batch<T: Scalar>(data: &Dataset<T>, indices: &[usize]) -> Batch<T> {
    let exs: Vec<&Example<T>> = indices.iter().map(|&i| &data.examples[i]).collect();
    let max_frames = exs.iter().map(|e| e.src.rows()).max().unwrap_or(0);
    let max_dec = exs.iter().map(|e| e.target.len() + 1).max().unwrap_or(0);
    let mut b = Batch {
        src: Vec::new(),
        src_lens: Vec::new(),
        src_mask: Vec::new(),
        dec_in: Vec::new(),
        dec_targets: Vec::new(),
        dec_lens: Vec::new(),
        tgt_mask: Vec::new(),
        targets: Vec::new(),
        indices: indices.to_vec(),
    };
    for e in exs {
        let (rows, d) = (e.src.rows(), e.src.last_dim());
        let mut src = e.src.data().to_vec();
        src.resize(max_frames * d, T::zero());
        b.src.push(Tensor::new(&[max_frames, d], src).expect("padded shape"));
        b.src_lens.push(rows);
        b.src_mask.push((0..max_frames).map(|i| i < rows).collect());
        let dec_len = e.target.len() + 1;
        let mut dec_in: Vec<usize> = std::iter::once(SOS).chain(e.target.iter().copied()).collect();
        let mut dec_t: Vec<usize> = e.target.iter().copied().chain(std::iter::once(EOS)).collect();
        dec_in.resize(max_dec, PAD);
        dec_t.resize(max_dec, PAD);
        b.dec_in.push(dec_in);
        b.dec_targets.push(dec_t);
        b.dec_lens.push(dec_len);
        b.tgt_mask.push((0..max_dec).map(|i| i < dec_len).collect());
        b.targets.push(e.target.clone());
    }
    b
}

/// Consecutive batches of the dataset in its stored order.
pub fn batches_in_order<T: Scalar>(data: &Dataset<T>, batch_size: usize) -> Result<Vec<Batch<T>>> {
    check_batching(data, batch_size)?;
    let order: Vec<usize> = (0..data.len()).collect();
    Ok(order.chunks(batch_size).map(|c| make_batch(data, c)).collect())
}

/// Shuffles example order with `rng`, then cuts consecutive batches.
pub fn shuffled_batches<T: Scalar, R: Rng + ?Sized>(data: &Dataset<T>, batch_size: usize, rng: &mut R) -> Result<Vec<Batch<T>>> {
    check_batching(data, batch_size)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(|c| make_batch(data, c)).collect())
}

/// Shuffled batches for a given seed and epoch index.
pub fn batch<T: Scalar>(data: &Dataset<T>, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch<T>>> {
    shuffled_batches(data, batch_size, &mut stream(seed, epoch))
}

fn check_batching<T>(data: &Dataset<T>, batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(invalid("batch", "batch_size must be at least 1"));
    }
    if data.is_empty() {
        return Err(invalid("batch", "empty dataset"));
    }
    Ok(())
}

/// Greedy-decoding quality against references.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    /// Fraction of reference positions whose hypothesis token matches.
    pub token_accuracy: f64,
    /// Corpus-level edit-distance error rate (tokens as words).
    pub wer: f64,
    pub ref_tokens: usize,
    pub errors: usize,
    pub exact_sequences: usize,
}

pub fn score(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<Score> {
    if hyps.len() != refs.len() {
        return Err(invalid("score", format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let (mut matched, mut total, mut errors, mut exact) = (0, 0, 0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        matched += r.iter().zip(h).filter(|(a, b)| a == b).count();
        total += r.len();
        errors += edit_distance_wer(r, h).errors();
        exact += usize::from(h == r);
    }
    let denom = total.max(1) as f64;
    Ok(Score {
        token_accuracy: matched as f64 / denom,
        wer: errors as f64 / denom,
        ref_tokens: total,
        errors,
        exact_sequences: exact,
    })
}

/// One line per example: token count, tokens, frame rows and columns, then
/// the frames as hex-encoded little-endian `f64`.
pub fn export_dataset<T: Scalar>(data: &Dataset<T>) -> String {
    let mut s = String::new();
    for e in &data.examples {
        let bytes: Vec<u8> = e.src.data().iter().flat_map(|v| v.as_f64().to_le_bytes()).collect();
        let toks: Vec<String> = e.tokens.iter().map(ToString::to_string).collect();
        let _ = writeln!(
            s,
            "{} {} {} {} {}",
            e.tokens.len(),
            toks.join(" "),
            e.src.rows(),
            e.src.last_dim(),
            hex::encode(bytes)
        );
    }
    s
}

/// Parses [`export_dataset`] output, recomputing targets for `kind`.
pub fn import_dataset<T: Scalar>(kind: TaskKind, text: &str) -> Result<Dataset<T>> {
    let mut examples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let err = |reason: &str| invalid("import-dataset", format!("line {}: {reason}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let n: usize = fields.first().and_then(|f| f.parse().ok()).ok_or_else(|| err("missing token count"))?;
        if fields.len() != n + 4 {
            return Err(err("field count does not match token count"));
        }
        let tokens = fields[1..=n]
            .iter()
            .map(|f| f.parse().map_err(|_| err("bad token")))
            .collect::<Result<Vec<usize>>>()?;
        let rows: usize = fields[n + 1].parse().map_err(|_| err("bad row count"))?;
        let cols: usize = fields[n + 2].parse().map_err(|_| err("bad column count"))?;
        let bytes = hex::decode(fields[n + 3]).map_err(|_| err("bad hex payload"))?;
        if bytes.len() != rows * cols * 8 {
            return Err(err("payload size does not match shape"));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        let src = Tensor::new(&[rows, cols], data)?;
        let target = target_for(kind, &tokens)?;
        examples.push(Example { tokens, src, target });
    }
    Ok(Dataset { kind, examples })
}

/// Minimum encoder frames CTC needs for every example.
pub fn ctc_feasible<T>(data: &Dataset<T>, frames_per_token: usize) -> bool {
    data.examples.iter().all(|e| {
        frontend_out_len(e.tokens.len() * frames_per_token).is_some_and(|enc| enc >= ctc_min_frames(&e.target))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            vocab_size: 8,
            train_size: 40,
            dev_size: 10,
            test_size: 10,
            input_dim: 4,
            seed: 5,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn target_definitions() {
        assert_eq!(target_for(TaskKind::Copy, &[3, 1, 2]).unwrap(), vec![3, 1, 2]);
        assert_eq!(target_for(TaskKind::Reverse, &[3, 1, 2]).unwrap(), vec![2, 1, 3]);
        assert_eq!(target_for(TaskKind::LocalPattern, &[1, 1, 2, 1]).unwrap(), vec![1, 1]);
        assert_eq!(target_for(TaskKind::LocalPattern, &[4, 5, 6]).unwrap(), vec![5]);
        assert!(target_for(TaskKind::LocalPattern, &[1, 2]).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        for kind in [TaskKind::Copy, TaskKind::Reverse, TaskKind::LocalPattern] {
            let a = generate::<f64>(&spec(kind)).unwrap();
            let b = generate::<f64>(&spec(kind)).unwrap();
            assert_eq!(export_dataset(&a.train), export_dataset(&b.train));
            let seqs = |d: &Dataset<f64>| d.examples.iter().map(|e| e.tokens.clone()).collect::<HashSet<_>>();
            assert!(seqs(&a.train).is_disjoint(&seqs(&a.dev)));
            assert!(seqs(&a.train).is_disjoint(&seqs(&a.test)));
            assert!(seqs(&a.dev).is_disjoint(&seqs(&a.test)));
            assert!(ctc_feasible(&a.train, 8));
            for e in &a.train.examples {
                assert_eq!(e.target, target_for(kind, &e.tokens).unwrap());
                assert!(e.tokens.iter().all(|&t| (FIRST_SYMBOL..8).contains(&t)));
                assert_eq!(e.src.rows(), 8 * e.tokens.len());
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(TaskKind::Copy);
        s.frames_per_token = 1;
        assert!(s.validate().is_err());
        let mut s = spec(TaskKind::LocalPattern);
        s.min_len = 2;
        assert!(s.validate().is_err());
        let mut s = spec(TaskKind::Copy);
        s.vocab_size = 3;
        s.min_len = 1;
        s.max_len = 1;
        s.train_size = 5;
        // only one distinct sequence exists
        assert!(generate::<f64>(&s).is_err());
    }

    #[test]
    fn padding_and_masks() {
        let mut d = generate::<f64>(&spec(TaskKind::Copy)).unwrap().train;
        d.examples.truncate(2);
        d.examples[0].tokens = vec![2, 3, 4];
        d.examples[0].target = vec![2, 3, 4];
        d.examples[0].src = Tensor::zeros(&[24, 4]);
        d.examples[1].tokens = vec![2, 3, 4, 5, 6];
        d.examples[1].target = vec![2, 3, 4, 5, 6];
        d.examples[1].src = Tensor::zeros(&[40, 4]);
        let b = &batches_in_order(&d, 2).unwrap()[0];
        assert_eq!(b.tgt_mask[0], vec![true, true, true, true, false, false]);
        assert_eq!(b.tgt_mask[0].iter().filter(|&&m| !m).count(), 2);
        assert_eq!(b.dec_in[0], vec![SOS, 2, 3, 4, PAD, PAD]);
        assert_eq!(b.dec_targets[0], vec![2, 3, 4, EOS, PAD, PAD]);
        assert_eq!(b.src[0].shape(), &[40, 4]);
        assert_eq!(b.src_lens, vec![24, 40]);

        let singles = batches_in_order(&d, 1).unwrap();
        assert!(singles.iter().all(|b| b.tgt_mask[0].iter().all(|&m| m) && b.src_mask[0].iter().all(|&m| m)));
        assert!(batches_in_order(&d, 0).is_err());
        let empty = Dataset::<f64> {
            kind: TaskKind::Copy,
            examples: vec![],
        };
        assert!(batches_in_order(&empty, 2).is_err());
    }

    #[test]
    fn shuffling_depends_on_seed_and_epoch() {
        let d = generate::<f64>(&spec(TaskKind::Copy)).unwrap().train;
        let order = |s, e| batch(&d, 8, s, e).unwrap().iter().flat_map(|b| b.indices.clone()).collect::<Vec<_>>();
        assert_eq!(order(1, 0), order(1, 0));
        assert_ne!(order(1, 0), order(1, 1));
        let mut sorted = order(2, 3);
        sorted.sort_unstable();
        assert_eq!(sorted, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn score_examples() {
        let r = vec![vec![2, 3, 4]];
        let s = score(&r, &r).unwrap();
        assert_eq!((s.token_accuracy, s.wer), (1.0, 0.0));
        let s = score(&[vec![5, 5, 5]], &r).unwrap();
        assert_eq!(s.token_accuracy, 0.0);
        let s = score(&[vec![1, 9, 3]], &[vec![1, 2, 3, 4]]).unwrap();
        assert_eq!(s.wer, 0.5);
        assert_eq!(s.token_accuracy, 0.5);
    }

    #[test]
    fn export_round_trip() {
        let d = generate::<f64>(&spec(TaskKind::Reverse)).unwrap().dev;
        let text = export_dataset(&d);
        assert_eq!(import_dataset::<f64>(TaskKind::Reverse, &text).unwrap(), d);
        assert!(import_dataset::<f64>(TaskKind::Reverse, "2 3 4 16 4 00").is_err());
    }
}
