use std::time::Instant;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::batch::{batch_from_samples, build_batch, build_batch_autoregressive, Batch};
use super::config::TrainConfig;
use super::{stream_rng, Stream};
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::models::{Arch, Model, SeqBatch};
use crate::scalar::Scalar;
use crate::tasks::{self, TaskId, TaskSample};

/// Outcome of one training run followed by evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub task: TaskId,
    pub arch: Arch,
    pub seed: u64,
    pub lr: f64,
    pub train_max_len: usize,
    /// `A(ℓ)` for `ℓ = N+1..=M`; empty when the run diverged.
    pub curve: Vec<f64>,
    pub score: f64,
    pub diverged: bool,
    /// `(step, mean loss over the preceding logging window)`.
    pub losses: Vec<(u64, f64)>,
    /// `(step, mean per-sequence training accuracy over the window)`.
    pub train_accuracy: Vec<(u64, f64)>,
    pub steps_run: u64,
    pub wallclock_s: f64,
}

impl RunRecord {
    /// `(length, accuracy)` pairs of the curve.
    pub fn curve_points(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.curve.iter().enumerate().map(|(i, &a)| (self.train_max_len + 1 + i, a))
    }
}

/// Snapshot passed to the progress callback at each logging point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Progress {
    pub step: u64,
    pub loss: f64,
    pub train_accuracy: f64,
}

/// Index of the largest entry, the lowest index among ties.
fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.outer_len()).map(|r| argmax(logits.row(r))).collect()
}

/// Fraction of positions whose argmax matches the target. `logits` is
/// `[m×K]`.
pub fn per_sequence_accuracy<T: Scalar>(logits: &Tensor<T>, target: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != target.len() || target.is_empty() {
        return Err(Error::shape("per_sequence_accuracy", format!("logits {:?} vs {} targets", logits.shape(), target.len())));
    }
    Ok(token_accuracy(&argmax_rows(logits), target))
}

fn token_accuracy(pred: &[usize], target: &[usize]) -> f64 {
    let hits = pred.iter().zip(target).filter(|(p, t)| p == t).count();
    hits as f64 / target.len() as f64
}

/// `100 × mean(curve)`. A constant curve scores exactly `100 × c`.
pub fn compute_score(curve: &[f64]) -> f64 {
    let Some(&first) = curve.first() else {
        return 0.0;
    };
    let drift: f64 = curve.iter().map(|&a| a - first).sum();
    100.0 * (first + drift / curve.len() as f64)
}

/// Mean per-sequence accuracy of `predict` at every length `N+1..=M`,
/// over `k` fresh samples each.
pub fn evaluate_with<R, F>(task: TaskId, n: usize, m: usize, k: usize, rng: &mut R, mut predict: F) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(&[TaskSample]) -> Result<Vec<Vec<usize>>>,
{
    if n == 0 || n >= m || k == 0 {
        return Err(Error::Config(format!("evaluation needs 1 <= N < M and k > 0, got N={n} M={m} k={k}")));
    }
    let mut curve = Vec::with_capacity(m - n);
    for len in n + 1..=m {
        let samples: Vec<TaskSample> = (0..k).map(|_| tasks::sample(task, rng, len)).collect();
        let preds = predict(&samples)?;
        if preds.len() != samples.len() {
            return Err(Error::InvalidInput("predictor returned the wrong number of sequences".into()));
        }
        let total: f64 = samples.iter().zip(&preds).map(|(s, p)| token_accuracy(p, &s.target)).sum();
        curve.push(total / k as f64);
    }
    Ok(curve)
}

/// Evaluation curve of a model; memories are sized for each length.
pub fn evaluate<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    task: TaskId,
    n: usize,
    m: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    evaluate_with(task, n, m, k, rng, |samples| predict_samples(model, samples))
}

/// Argmax predictions for each sample's output slots.
pub fn predict_samples<T: Scalar>(model: &Model<T>, samples: &[TaskSample]) -> Result<Vec<Vec<usize>>> {
    if model.vocab.autoregressive {
        let inputs: Vec<Vec<usize>> = samples.iter().map(|s| s.input.clone()).collect();
        let lens: Vec<usize> = samples.iter().map(TaskSample::output_len).collect();
        return decode_autoregressive(model, &inputs, &lens);
    }
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(eval_chunk(model, samples)) {
        let batch = batch_from_samples(chunk.to_vec(), &model.vocab, model.config.comp_tokens);
        let flat = argmax_rows(&model.predict(&batch.seq)?);
        preds.extend((0..chunk.len()).map(|b| flat[batch.slots_of(b)].to_vec()));
    }
    Ok(preds)
}

/// Sequences per inference pass, bounding attention-score memory.
fn eval_chunk<T: Scalar>(model: &Model<T>, samples: &[TaskSample]) -> usize {
    if model.config.arch != Arch::Transformer {
        return samples.len().max(1);
    }
    let steps = samples
        .iter()
        .map(|s| s.input.len() + model.config.comp_tokens.count(s.input.len()) + s.output_len())
        .max()
        .unwrap_or(1);
    let per_sequence = model.config.heads * steps * steps;
    ((1 << 24) / per_sequence.max(1)).clamp(1, samples.len().max(1))
}

/// Greedy decoding: each emitted symbol is fed back as the next input.
/// Row `r` decodes `lens[r]` symbols after `inputs[r] ∥ empty`.
pub fn decode_autoregressive<T: Scalar>(model: &Model<T>, inputs: &[Vec<usize>], lens: &[usize]) -> Result<Vec<Vec<usize>>> {
    let vocab = &model.vocab;
    if !vocab.autoregressive || !model.config.is_causal() {
        return Err(Error::Config("autoregressive decoding needs a causal model trained with feedback".into()));
    }
    if inputs.len() != lens.len() {
        return Err(Error::InvalidInput("one output length per input required".into()));
    }
    let mut out: Vec<Vec<usize>> = lens.iter().map(|&m| Vec::with_capacity(m)).collect();
    let longest = lens.iter().copied().max().unwrap_or(0);
    for j in 0..longest {
        let mut rows: Vec<Vec<usize>> = inputs
            .iter()
            .zip(&out)
            .map(|(x, y)| {
                let mut row = x.clone();
                row.push(vocab.empty());
                row.extend(y.iter().map(|&s| vocab.feedback(s)));
                row
            })
            .collect();
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        for row in &mut rows {
            row.resize(width, vocab.empty());
        }
        let active: Vec<usize> = (0..inputs.len()).filter(|&r| j < lens[r]).collect();
        let outputs = active.iter().map(|&r| (r, inputs[r].len() + j)).collect();
        let jumps = inputs.iter().map(Vec::len).collect();
        let logits = model.predict(&SeqBatch { tokens: rows, jumps, outputs })?;
        for (&r, sym) in active.iter().zip(argmax_rows(&logits)) {
            out[r].push(sym);
        }
    }
    Ok(out)
}

/// [`train_with`] without a progress callback.
pub fn train(config: &TrainConfig) -> Result<(Model<f32>, RunRecord)> {
    train_with(config, &mut |_| {})
}

/// Trains a fresh model on `config`, then evaluates it on the test range.
/// A non-finite loss stops training and marks the run as diverged; such
/// runs are not evaluated and score 0.
pub fn train_with(config: &TrainConfig, progress: &mut dyn FnMut(&Progress)) -> Result<(Model<f32>, RunRecord)> {
    config.validate()?;
    let started = Instant::now();
    let spec = config.task.spec();
    let mut model = Model::<f32>::new(config.model.clone(), &spec, &mut stream_rng(config.seed, Stream::Init))?;
    let mut data_rng = stream_rng(config.seed, Stream::Train);
    let mut dropout_rng = stream_rng(config.seed, Stream::Dropout);
    let log_every = config.log_every.max(1);

    let mut record = RunRecord {
        config_hash: config.hash(),
        task: config.task,
        arch: config.model.arch,
        seed: config.seed,
        lr: config.lr,
        train_max_len: config.train_max_len,
        curve: Vec::new(),
        score: 0.0,
        diverged: false,
        losses: Vec::new(),
        train_accuracy: Vec::new(),
        steps_run: 0,
        wallclock_s: 0.0,
    };
    let (mut window_loss, mut window_acc, mut window) = (0.0, 0.0, 0u64);
    for step in 1..=config.steps {
        let len = data_rng.gen_range(1..=config.train_max_len);
        let lengths = vec![len; config.batch_size];
        let batch = if config.model.autoregressive {
            build_batch_autoregressive(config.task, &mut data_rng, &lengths, &model.vocab)
        } else {
            build_batch(config.task, &mut data_rng, &lengths, &model.vocab, config.model.comp_tokens)
        };
        let (loss, acc) = train_step(&mut model, &batch, config.lr, &mut dropout_rng)?;
        record.steps_run = step;
        if !loss.is_finite() {
            record.diverged = true;
            break;
        }
        window_loss += loss;
        window_acc += acc;
        window += 1;
        if step % log_every == 0 || step == config.steps {
            let p = Progress { step, loss: window_loss / window as f64, train_accuracy: window_acc / window as f64 };
            record.losses.push((step, p.loss));
            record.train_accuracy.push((step, p.train_accuracy));
            progress(&p);
            (window_loss, window_acc, window) = (0.0, 0.0, 0);
        }
    }
    if !record.diverged {
        let mut eval_rng = stream_rng(config.seed, Stream::Eval);
        record.curve =
            evaluate(&model, config.task, config.train_max_len, config.test_max_len, config.eval_k, &mut eval_rng)?;
        record.score = compute_score(&record.curve);
    }
    record.wallclock_s = started.elapsed().as_secs_f64();
    Ok((model, record))
}

/// One Adam update on `batch`. Returns the loss and the batch's mean
/// per-sequence accuracy; parameters are untouched when the loss is not
/// finite.
fn train_step(model: &mut Model<f32>, batch: &Batch, lr: f64, dropout_rng: &mut dyn RngCore) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let logits = model.forward(&mut g, &batch.seq, Some(dropout_rng))?;
    let weights: Vec<f32> = batch.weights.iter().map(|&w| w as f32).collect();
    let loss = g.cross_entropy(logits, &batch.targets, &weights)?;
    let value = g.value(loss).item().map_or(f64::NAN, f64::from);
    if !value.is_finite() {
        return Ok((value, 0.0));
    }
    let pred = argmax_rows(g.value(logits));
    let acc: f64 = (0..batch.samples.len())
        .map(|b| {
            let slots = batch.slots_of(b);
            token_accuracy(&pred[slots.clone()], &batch.targets[slots])
        })
        .sum::<f64>()
        / batch.samples.len() as f64;
    let grads = g.backward(loss)?;
    g.accumulate_param_grads(&grads, &mut model.params)?;
    model.params.adam_step(lr);
    Ok((value, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Profile;
    use crate::models::{CompTokens, ModelConfig, Vocab};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(task: TaskId, arch: Arch) -> TrainConfig {
        let mut c = TrainConfig::new(task, arch, Profile::Desk);
        c.model = ModelConfig::tiny(arch);
        c.batch_size = 4;
        c.steps = 3;
        c.train_max_len = 4;
        c.test_max_len = 7;
        c.eval_k = 3;
        c
    }

    #[test]
    fn accuracy_examples() {
        let t = |rows: &[Vec<f64>]| Tensor::<f64>::from_rows(rows).unwrap();
        // b = 1, a = 0: target bab, prediction baa.
        let logits = t(&[vec![0.0, 1.0], vec![2.0, 1.0], vec![3.0, -1.0]]);
        assert!((per_sequence_accuracy(&logits, &[1, 0, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(per_sequence_accuracy(&logits, &[1, 0, 0]).unwrap(), 1.0);
        assert_eq!(per_sequence_accuracy(&logits, &[0, 1, 1]).unwrap(), 0.0);
        let tie = t(&[vec![0.5, 0.5, 0.5]]);
        assert_eq!(per_sequence_accuracy(&tie, &[0]).unwrap(), 1.0);
        assert!(per_sequence_accuracy(&tie, &[0, 1]).is_err());
    }

    #[test]
    fn score_examples() {
        assert_eq!(compute_score(&[1.0; 10]), 100.0);
        assert_eq!(compute_score(&[1.0, 1.0, 0.5, 0.5]), 75.0);
        assert_eq!(compute_score(&[]), 0.0);
    }

    proptest! {
        #[test]
        fn constant_curve_scores_exactly(c in 0.0f64..=1.0, n in 1usize..600) {
            prop_assert_eq!(compute_score(&vec![c; n]), 100.0 * c);
        }

        #[test]
        fn score_within_curve_range(curve in prop::collection::vec(0.0f64..=1.0, 1..50)) {
            let s = compute_score(&curve);
            let lo = curve.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s >= 100.0 * lo - 1e-9 && s <= 100.0 * hi + 1e-9);
        }
    }

    #[test]
    fn oracle_and_constant_predictors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let oracle = evaluate_with(TaskId::ReverseString, 2, 12, 8, &mut rng, |samples| {
            samples.iter().map(|s| tasks::ground_truth(s.task, &s.input)).collect()
        })
        .unwrap();
        assert_eq!(oracle, vec![1.0; 10]);

        let constant = evaluate_with(TaskId::ParityCheck, 10, 60, 64, &mut rng, |samples| {
            Ok(samples.iter().map(|_| vec![0]).collect())
        })
        .unwrap();
        assert_eq!(constant.len(), 50);
        let mean = constant.iter().sum::<f64>() / constant.len() as f64;
        // 3200 Bernoulli(1/2) draws: sd ≈ 0.009.
        assert!((mean - 0.5).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn zero_steps_keep_initial_parameters() {
        let mut c = small(TaskId::ParityCheck, Arch::Lstm);
        c.steps = 0;
        let fresh = Model::<f32>::new(c.model.clone(), &c.task.spec(), &mut stream_rng(c.seed, Stream::Init)).unwrap();
        let (model, record) = train(&c).unwrap();
        assert_eq!(model.params.snapshot(), fresh.params.snapshot());
        assert_eq!(record.steps_run, 0);
        assert_eq!(record.curve.len(), 3);
    }

    #[test]
    fn training_is_deterministic() {
        for arch in [Arch::StackRnn, Arch::Transformer] {
            let mut c = small(TaskId::ReverseString, arch);
            c.model.dropout = 0.1;
            let (m1, r1) = train(&c).unwrap();
            let (m2, r2) = train(&c).unwrap();
            assert_eq!(m1.params.snapshot(), m2.params.snapshot());
            assert_eq!(r1.score.to_bits(), r2.score.to_bits());
            assert_eq!(r1.curve, r2.curve);
            assert_eq!(r1.losses, r2.losses);
            c.seed = 1;
            let (m3, _) = train(&c).unwrap();
            assert_ne!(m1.params.snapshot(), m3.params.snapshot());
        }
    }

    #[test]
    fn record_contract() {
        let mut c = small(TaskId::EvenPairs, Arch::Rnn);
        c.log_every = 2;
        c.steps = 5;
        let mut seen = Vec::new();
        let (_, r) = train_with(&c, &mut |p| seen.push(p.step)).unwrap();
        assert_eq!(seen, vec![2, 4, 5]);
        assert_eq!(r.curve.len(), c.test_max_len - c.train_max_len);
        assert_eq!(r.score, compute_score(&r.curve));
        assert_eq!(r.curve_points().next().map(|p| p.0), Some(c.train_max_len + 1));
        assert!(!r.diverged);
        assert_eq!(r.config_hash, c.hash());
    }

    #[test]
    fn divergence_is_recorded() {
        let mut c = small(TaskId::ParityCheck, Arch::Rnn);
        c.lr = 1e300;
        c.steps = 20;
        let (_, r) = train(&c).unwrap();
        assert!(r.diverged, "losses {:?}", r.losses);
        assert!(r.curve.is_empty());
        assert_eq!(r.score, 0.0);
    }

    #[test]
    fn loss_ignores_logits_outside_the_mask() {
        let task = TaskId::ReverseString;
        let config = ModelConfig::tiny(Arch::Rnn);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = Model::<f64>::new(config.clone(), &task.spec(), &mut rng).unwrap();
        let batch = build_batch(task, &mut rng, &[3, 5], &Vocab::new(&task.spec(), &config), CompTokens::Zero);
        let mut g = Graph::<f64>::new();
        let out = model.unroll(&mut g, &batch.seq, None, false, true).unwrap();
        let all = g.value(out.logits.unwrap()).clone();
        let t = batch.seq.steps();
        let loss_of = |logits: &Tensor<f64>| {
            let rows: Vec<Vec<f64>> = batch.seq.outputs.iter().map(|&(b, p)| logits.row(b * t + p).to_vec()).collect();
            let mut g = Graph::<f64>::new();
            let x = g.input(Tensor::from_rows(&rows).unwrap());
            let l = g.cross_entropy(x, &batch.targets, &batch.weights).unwrap();
            g.value(l).item().unwrap()
        };
        let base = loss_of(&all);
        let mut perturbed = all.clone();
        let k = perturbed.last_dim();
        for r in 0..perturbed.outer_len() {
            if !batch.seq.outputs.contains(&(r / t, r % t)) {
                for x in &mut perturbed.data_mut()[r * k..(r + 1) * k] {
                    *x += 1e3 * (r as f64 + 1.0);
                }
            }
        }
        assert_eq!(loss_of(&perturbed), base);

        let direct = model.forward(&mut g, &batch.seq, None).unwrap();
        let l = g.cross_entropy(direct, &batch.targets, &batch.weights).unwrap();
        assert!((g.value(l).item().unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn larger_memory_leaves_logits_unchanged() {
        // Trailing padding grows both memories past their training sizes
        // without touching earlier steps.
        let task = TaskId::ReverseString;
        for arch in [Arch::StackRnn, Arch::TapeRnn, Arch::StackLstm] {
            let config = ModelConfig::tiny(arch);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let model = Model::<f64>::new(config.clone(), &task.spec(), &mut rng).unwrap();
            let vocab = Vocab::new(&task.spec(), &config);
            let batch = build_batch(task, &mut rng, &[6, 9], &vocab, CompTokens::Zero);
            let base = model.predict(&batch.seq).unwrap();
            let mut grown = batch.seq.clone();
            for row in &mut grown.tokens {
                row.resize(300, vocab.empty());
            }
            assert!(crate::models::memory_sizes(300) != crate::models::memory_sizes(batch.seq.steps()));
            assert_eq!(model.predict(&grown).unwrap(), base, "{arch}");
        }
    }

    #[test]
    fn single_output_autoregressive_matches_plain_readout() {
        let task = TaskId::ParityCheck;
        let mut config = ModelConfig::tiny(Arch::Transformer);
        config.causal = true;
        let mut ar = config.clone();
        ar.autoregressive = true;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Model::<f64>::new(ar, &task.spec(), &mut rng).unwrap();
        let plain_vocab = Vocab::new(&task.spec(), &config);
        let samples: Vec<TaskSample> = (1..6).map(|len| tasks::sample(task, &mut rng, len)).collect();
        let batch = batch_from_samples(samples.clone(), &plain_vocab, CompTokens::Zero);
        let plain = argmax_rows(&model.predict(&batch.seq).unwrap());
        let decoded = predict_samples(&model, &samples).unwrap();
        assert_eq!(decoded.concat(), plain);
    }

    #[test]
    fn autoregressive_decoding_emits_requested_lengths() {
        let task = TaskId::ReverseString;
        let mut c = small(task, Arch::Transformer);
        c.model.autoregressive = true;
        c.steps = 2;
        let (model, record) = train(&c).unwrap();
        assert_eq!(record.curve.len(), 3);
        let out = decode_autoregressive(&model, &[vec![0, 1], vec![1, 1, 0, 1]], &[2, 4]).unwrap();
        assert_eq!(out.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 4]);
        let plain = Model::<f32>::new(ModelConfig::tiny(Arch::Transformer), &task.spec(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(decode_autoregressive(&plain, &[vec![0]], &[1]).is_err());
    }
}
