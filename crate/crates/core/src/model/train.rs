use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saap_autodiff::{backward, Scalar, Tape};
use serde::{Deserialize, Serialize};

use super::forward::{loss_graph, Trainable};
use super::params::Model;
use crate::error::{Error, Result};
use crate::optim::{lr_at, AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            batch_size: 8,
            seq_len: 128,
            lr: 3e-3,
            warmup_steps: 100,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Training loss of every step.
    pub losses: Vec<f64>,
    pub final_loss: Option<f64>,
}

/// Draws random contiguous windows from a token stream.
pub struct WindowSampler<'a> {
    corpus: &'a [u32],
    rng: ChaCha8Rng,
}

impl<'a> WindowSampler<'a> {
    pub fn new(corpus: &'a [u32], seed: u64) -> Self {
        WindowSampler {
            corpus,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn batch(&mut self, batch_size: usize, seq_len: usize) -> Vec<Vec<u32>> {
        let span = self.corpus.len() - seq_len + 1;
        (0..batch_size)
            .map(|_| {
                let start = self.rng.gen_range(0..span);
                self.corpus[start..start + seq_len].to_vec()
            })
            .collect()
    }
}

/// Checks the corpus holds at least ten context windows.
pub fn check_corpus(corpus_tokens: usize, max_seq_len: usize) -> Result<()> {
    let needed = 10 * max_seq_len;
    if corpus_tokens < needed {
        return Err(Error::CorpusTooSmall {
            tokens: corpus_tokens,
            needed,
        });
    }
    Ok(())
}

/// Trains a copy of `model` with AdamW on random windows of `corpus`.
pub fn train_steps<T: Scalar>(
    model: &Model<T>,
    corpus: &[u32],
    cfg: &TrainConfig,
) -> Result<(Model<T>, TrainReport)> {
    check_corpus(corpus.len(), model.config.max_seq_len)?;
    if cfg.seq_len < 2 || cfg.seq_len > model.config.max_seq_len {
        return Err(Error::InvalidArgument(format!(
            "seq_len {} must lie in 2..={}",
            cfg.seq_len, model.config.max_seq_len
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut model = model.clone();
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut sampler = WindowSampler::new(corpus, cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = sampler.batch(cfg.batch_size, cfg.seq_len);
        let mut tape = Tape::new();
        let loss = loss_graph(&model.config, &mut Trainable::new(&model), &mut tape, &batch)?;
        let value = tape.value(loss)?.item().as_f64();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let grads = backward(&tape, loss)?;
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFiniteGradient {
                tensor: name.to_string(),
            });
        }
        drop(tape);
        let lr = lr_at(step, cfg.lr, cfg.warmup_steps, cfg.steps);
        opt.step(model.params_mut(), &grads, lr);
        losses.push(value);
    }
    Ok((
        model,
        TrainReport {
            steps: cfg.steps,
            final_loss: losses.last().copied(),
            losses,
        },
    ))
}
