use rand::Rng;

use crate::models::{CompTokens, SeqBatch, Vocab};
use crate::tasks::{self, TaskId, TaskSample};

/// A padded model batch with its loss targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub seq: SeqBatch,
    /// Target symbol per output slot, aligned with `seq.outputs`.
    pub targets: Vec<usize>,
    /// Loss weight per output slot: `1/m` for a sequence with `m` outputs,
    /// so every sequence contributes equally.
    pub weights: Vec<f64>,
    pub samples: Vec<TaskSample>,
}

impl Batch {
    /// Slot range of sequence `b` within `targets`.
    pub fn slots_of(&self, b: usize) -> std::ops::Range<usize> {
        let start: usize = self.samples[..b].iter().map(TaskSample::output_len).sum();
        start..start + self.samples[b].output_len()
    }
}

/// Samples one sequence per entry of `lengths` and lays each out as
/// `input ∥ computation^c ∥ empty^m`, right-padded with the empty token.
pub fn build_batch<R: Rng + ?Sized>(
    task: TaskId,
    rng: &mut R,
    lengths: &[usize],
    vocab: &Vocab,
    comp: CompTokens,
) -> Batch {
    let samples = lengths.iter().map(|&len| tasks::sample(task, rng, len)).collect();
    batch_from_samples(samples, vocab, comp)
}

/// Lays out given samples; see [`build_batch`].
pub fn batch_from_samples(samples: Vec<TaskSample>, vocab: &Vocab, comp: CompTokens) -> Batch {
    let mut rows = Vec::with_capacity(samples.len());
    let mut outputs = Vec::new();
    for (b, s) in samples.iter().enumerate() {
        let n = s.input.len();
        let c = comp.count(n);
        let mut row = s.input.clone();
        row.extend(std::iter::repeat(vocab.computation()).take(c));
        row.extend(std::iter::repeat(vocab.empty()).take(s.output_len()));
        outputs.extend((0..s.output_len()).map(|j| (b, n + c + j)));
        rows.push(row);
    }
    finish(rows, outputs, samples, vocab)
}

/// Teacher-forced layout `input ∥ empty ∥ target`. The logits at the
/// separator and at each fed-back symbol except the last predict the next
/// target symbol.
pub fn build_batch_autoregressive<R: Rng + ?Sized>(
    task: TaskId,
    rng: &mut R,
    lengths: &[usize],
    vocab: &Vocab,
) -> Batch {
    let samples = lengths.iter().map(|&len| tasks::sample(task, rng, len)).collect();
    autoregressive_layout(samples, vocab)
}

fn autoregressive_layout(samples: Vec<TaskSample>, vocab: &Vocab) -> Batch {
    let mut rows = Vec::with_capacity(samples.len());
    let mut outputs = Vec::new();
    for (b, s) in samples.iter().enumerate() {
        let n = s.input.len();
        let mut row = s.input.clone();
        row.push(vocab.empty());
        row.extend(s.target.iter().map(|&y| vocab.feedback(y)));
        outputs.extend((0..s.output_len()).map(|j| (b, n + j)));
        rows.push(row);
    }
    finish(rows, outputs, samples, vocab)
}

fn finish(mut rows: Vec<Vec<usize>>, outputs: Vec<(usize, usize)>, samples: Vec<TaskSample>, vocab: &Vocab) -> Batch {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    for row in &mut rows {
        row.resize(width, vocab.empty());
    }
    let targets = samples.iter().flat_map(|s| s.target.iter().copied()).collect();
    let weights =
        samples.iter().flat_map(|s| std::iter::repeat(1.0 / s.output_len() as f64).take(s.output_len())).collect();
    let jumps = samples.iter().map(|s| s.input.len()).collect();
    Batch { seq: SeqBatch { tokens: rows, jumps, outputs }, targets, weights, samples }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(task: TaskId, input: &str) -> TaskSample {
        let spec = task.spec();
        let input = spec.parse_input(input).unwrap();
        let target = tasks::ground_truth(task, &input).unwrap();
        TaskSample { task, length: input.len(), input, target }
    }

    fn vocab(task: TaskId, config: &ModelConfig) -> Vocab {
        Vocab::new(&task.spec(), config)
    }

    #[test]
    fn reverse_layout() {
        let task = TaskId::ReverseString;
        let v = vocab(task, &ModelConfig::tiny(Arch::StackRnn));
        let batch = batch_from_samples(vec![sample(task, "abb")], &v, CompTokens::Zero);
        let e = v.empty();
        assert_eq!(batch.seq.tokens, vec![vec![0, 1, 1, e, e, e]]);
        assert_eq!(batch.seq.outputs, vec![(0, 3), (0, 4), (0, 5)]);
        assert_eq!(batch.targets, vec![1, 1, 0]);
        assert_eq!(batch.seq.jumps, vec![3]);
    }

    #[test]
    fn classification_layout() {
        let task = TaskId::ParityCheck;
        let v = vocab(task, &ModelConfig::tiny(Arch::Rnn));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = build_batch(task, &mut rng, &[5], &v, CompTokens::Zero);
        assert_eq!(batch.seq.tokens[0].len(), 6);
        assert_eq!(batch.seq.tokens[0][5], v.empty());
        assert_eq!(batch.seq.outputs, vec![(0, 5)]);
        assert_eq!(batch.weights, vec![1.0]);
    }

    #[test]
    fn computation_tokens_precede_empties() {
        let task = TaskId::DuplicateString;
        let mut config = ModelConfig::tiny(Arch::TapeRnn);
        config.comp_tokens = CompTokens::TwiceLen;
        let v = vocab(task, &config);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = build_batch(task, &mut rng, &[4], &v, config.comp_tokens);
        let row = &batch.seq.tokens[0];
        assert_eq!(row.len(), 4 + 8 + 8);
        assert!(row[4..12].iter().all(|&t| t == v.computation()));
        assert!(row[12..].iter().all(|&t| t == v.empty()));
        assert_eq!(batch.seq.outputs.first(), Some(&(0, 12)));
    }

    #[test]
    fn padding_and_weights() {
        let task = TaskId::ReverseString;
        let v = vocab(task, &ModelConfig::tiny(Arch::Rnn));
        let batch = batch_from_samples(vec![sample(task, "a"), sample(task, "abba")], &v, CompTokens::Zero);
        assert_eq!(batch.seq.tokens[0], vec![0, v.empty(), v.empty(), v.empty(), v.empty(), v.empty(), v.empty(), v.empty()]);
        assert_eq!(batch.weights, vec![1.0, 0.25, 0.25, 0.25, 0.25]);
        assert_eq!(batch.slots_of(1), 1..5);
        let total: f64 = batch.weights.iter().sum();
        assert_eq!(total, 2.0);
    }

    #[test]
    fn autoregressive_reverse_example() {
        let task = TaskId::ReverseString;
        let mut config = ModelConfig::tiny(Arch::Transformer);
        config.autoregressive = true;
        let v = vocab(task, &config);
        let batch = autoregressive_layout(vec![sample(task, "abb")], &v);
        let (e, f) = (v.empty(), |y| v.feedback(y));
        assert_eq!(batch.seq.tokens[0], vec![0, 1, 1, e, f(1), f(1), f(0)]);
        assert_eq!(batch.targets, vec![1, 1, 0]);
        assert_eq!(batch.seq.outputs, vec![(0, 3), (0, 4), (0, 5)]);
    }

    #[test]
    fn autoregressive_stream() {
        let task = TaskId::ReverseString;
        let mut config = ModelConfig::tiny(Arch::Transformer);
        config.autoregressive = true;
        let v = vocab(task, &config);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = build_batch_autoregressive(task, &mut rng, &[3], &v);
        let s = &batch.samples[0];
        let mut expect = s.input.clone();
        expect.push(v.empty());
        expect.extend(s.target.iter().map(|&y| v.feedback(y)));
        assert_eq!(batch.seq.tokens[0], expect);
        assert_eq!(batch.seq.outputs, vec![(0, 3), (0, 4), (0, 5)]);
        assert_eq!(batch.targets, s.target);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::models::{Arch, ModelConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn layout_invariants(
            task in 0usize..15,
            lengths in prop::collection::vec(1usize..12, 1..5),
            comp in 0usize..3,
            autoregressive: bool,
            seed in any::<u64>(),
        ) {
            let task = TaskId::ALL[task];
            let comp = if autoregressive { CompTokens::Zero } else { CompTokens::ALL[comp] };
            let arch = if comp == CompTokens::Zero { Arch::Transformer } else { Arch::TapeRnn };
            let config = ModelConfig { comp_tokens: comp, autoregressive, ..ModelConfig::tiny(arch) };
            let vocab = Vocab::new(&task.spec(), &config);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = if autoregressive {
                build_batch_autoregressive(task, &mut rng, &lengths, &vocab)
            } else {
                build_batch(task, &mut rng, &lengths, &vocab, comp)
            };
            let width = batch.seq.steps();
            prop_assert!(batch.seq.tokens.iter().all(|r| r.len() == width));
            prop_assert!(batch.seq.tokens.iter().flatten().all(|&t| t < vocab.input_size()));
            prop_assert_eq!(batch.seq.outputs.len(), batch.targets.len());
            prop_assert_eq!(batch.weights.len(), batch.targets.len());
            for (b, s) in batch.samples.iter().enumerate() {
                let row = &batch.seq.tokens[b];
                prop_assert_eq!(&row[..s.input.len()], &s.input[..]);
                prop_assert_eq!(batch.seq.jumps[b], s.input.len());
                let slots = batch.slots_of(b);
                let total: f64 = batch.weights[slots.clone()].iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert_eq!(&batch.targets[slots.clone()], &s.target[..]);
                for &(sb, p) in &batch.seq.outputs[slots] {
                    prop_assert_eq!(sb, b);
                    // Output positions never reveal the target of their own slot.
                    prop_assert!(p >= s.input.len());
                }
            }
        }
    }
}
