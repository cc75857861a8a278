//! Stacked-LSTM next-token language model over the ABC token vocabulary.
//! Teacher-forced cross-entropy training, temperature sampling at inference.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::autograd::{Tape, Var};
use super::nn::{
    lstm_step, lstm_step_forward, sample_from_logits, uniform_init, Adam, BoundParams, ParamSet,
};
use super::tensor::{matmul, Tensor};
use super::{check_batch, derive_rng, GenerativeModel, ModelError, RngState, StepOutput};
use crate::config::{ComponentSpec, ParamError, ParamReader};
use crate::data::{fnv, Batch};
use crate::tokenize::{Vocabulary, BOS_ID, EOS_ID};

#[derive(Debug, Clone, PartialEq)]
pub struct FolkRnnConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub one_hot_embedding: bool,
    pub dropout: f64,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for FolkRnnConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            hidden_size: 64, // 512 is the full-scale setting
            one_hot_embedding: false,
            dropout: 0.0,
            learning_rate: 1e-3,
            grad_clip: 1.0,
            temperature: 1.0,
            max_len: super::MAX_SAMPLE_LEN,
        }
    }
}

impl FolkRnnConfig {
    pub fn from_spec(spec: &ComponentSpec) -> Result<Self, ParamError> {
        let r = ParamReader::new(spec);
        let d = Self::default();
        let cfg = Self {
            num_layers: r.positive_or("num_layers", d.num_layers)?,
            hidden_size: r.positive_or("hidden_size", d.hidden_size)?,
            one_hot_embedding: match r.opt_str("embedding")? {
                None => false,
                Some("learned") => false,
                Some("one_hot") => true,
                Some(other) => {
                    return Err(ParamError {
                        component: spec.type_name.clone(),
                        key: "embedding".into(),
                        msg: format!("expected learned or one_hot, got {other:?}"),
                    })
                }
            },
            dropout: r.f64_or("dropout", d.dropout)?,
            learning_rate: r.f64_or("learning_rate", d.learning_rate)?,
            grad_clip: r.f64_or("grad_clip", d.grad_clip)?,
            temperature: r.f64_or("temperature", d.temperature)?,
            max_len: r.positive_or("max_len", d.max_len)?,
        };
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(ParamError {
                component: spec.type_name.clone(),
                key: "dropout".into(),
                msg: "must be in [0, 1)".into(),
            });
        }
        r.finish()?;
        Ok(cfg)
    }
}

pub struct FolkRnn {
    config: FolkRnnConfig,
    spec: ComponentSpec,
    vocab: Arc<Vocabulary>,
    params: ParamSet,
    adam: Adam,
    rng: ChaCha8Rng,
}

impl FolkRnn {
    pub const TYPE_NAME: &'static str = "folk_rnn";

    pub fn new(
        config: FolkRnnConfig,
        spec: ComponentSpec,
        vocab: Arc<Vocabulary>,
        seed: u64,
    ) -> Self {
        let mut init_rng = derive_rng(seed, fnv(Self::TYPE_NAME));
        let vocab_size = vocab.len();
        let hidden = config.hidden_size;
        let mut params = ParamSet::new();
        if !config.one_hot_embedding {
            params.add("embed", uniform_init(&mut init_rng, vocab_size, hidden, 0.1));
        }
        for layer in 0..config.num_layers {
            let input = if layer == 0 {
                if config.one_hot_embedding {
                    vocab_size
                } else {
                    hidden
                }
            } else {
                hidden
            };
            let scale = 1.0 / (input as f64).sqrt();
            params.add(
                format!("lstm{layer}.w_ih"),
                uniform_init(&mut init_rng, input, 4 * hidden, scale),
            );
            let rscale = 1.0 / (hidden as f64).sqrt();
            params.add(
                format!("lstm{layer}.w_hh"),
                uniform_init(&mut init_rng, hidden, 4 * hidden, rscale),
            );
            let mut bias = Tensor::zeros(1, 4 * hidden);
            for j in hidden..2 * hidden {
                bias.data[j] = 1.0; // forget gate bias
            }
            params.add(format!("lstm{layer}.bias"), bias);
        }
        let hscale = 1.0 / (hidden as f64).sqrt();
        params.add("head.w", uniform_init(&mut init_rng, hidden, vocab_size, hscale));
        params.add("head.b", Tensor::zeros(1, vocab_size));
        let adam = Adam::new(config.learning_rate, config.grad_clip, &params);
        let rng = derive_rng(seed, fnv("folk_rnn.model_stream"));
        Self { config, spec, vocab, params, adam, rng }
    }

    pub fn config(&self) -> &FolkRnnConfig {
        &self.config
    }

    /// Teacher-forced cross-entropy over the batch. With `dropout_rng` the
    /// configured dropout is applied between LSTM layers.
    fn build_loss(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, BoundParams), ModelError> {
        check_batch(batch, self.vocab.len())?;
        if batch.cols < 2 {
            return Err(ModelError::Shape(format!(
                "need sequences of at least 2 ids for next-token training, got {}",
                batch.cols
            )));
        }
        let bound = self.params.bind(tape);
        let hidden = self.config.hidden_size;
        let batch_rows = batch.rows;
        let steps = batch.cols - 1;

        let mut h: Vec<Var> = (0..self.config.num_layers)
            .map(|_| tape.leaf(Tensor::zeros(batch_rows, hidden)))
            .collect();
        let mut c = h.clone();

        let mut logit_vars = Vec::with_capacity(steps);
        let mut targets = Vec::with_capacity(steps * batch_rows);
        let mut mask = Vec::with_capacity(steps * batch_rows);
        for t in 0..steps {
            let ids_t: Vec<usize> =
                (0..batch_rows).map(|r| batch.row(r)[t] as usize).collect();
            let mut x = if self.config.one_hot_embedding {
                let mut onehot = Tensor::zeros(batch_rows, self.vocab.len());
                for (r, &id) in ids_t.iter().enumerate() {
                    onehot.set(r, id, 1.0);
                }
                tape.leaf(onehot)
            } else {
                let embed = bound.var("embed");
                tape.gather(embed, &ids_t)
            };
            for layer in 0..self.config.num_layers {
                let (h_next, c_next) = lstm_step(
                    tape,
                    x,
                    h[layer],
                    c[layer],
                    bound.var(&format!("lstm{layer}.w_ih")),
                    bound.var(&format!("lstm{layer}.w_hh")),
                    bound.var(&format!("lstm{layer}.bias")),
                    hidden,
                );
                h[layer] = h_next;
                c[layer] = c_next;
                x = h_next;
                if self.config.dropout > 0.0 {
                    if let Some(rng) = dropout_rng.as_deref_mut() {
                        let keep = 1.0 - self.config.dropout;
                        let m = Tensor::from_fn(batch_rows, hidden, |_, _| {
                            if rng.gen::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        });
                        let mask_leaf = tape.leaf(m);
                        x = tape.mul(x, mask_leaf);
                    }
                }
            }
            let head_w = bound.var("head.w");
            let head_b = bound.var("head.b");
            let proj = tape.matmul(x, head_w);
            logit_vars.push(tape.add_row(proj, head_b));
            for r in 0..batch_rows {
                targets.push(batch.row(r)[t + 1]);
                mask.push(if t + 1 < batch.lengths[r] { 1.0 } else { 0.0 });
            }
        }
        let logits = tape.concat_rows(&logit_vars);
        let loss = tape.mean_cross_entropy(logits, &targets, &mask);
        Ok((loss, bound))
    }

    /// Forward-only loss with dropout disabled; the evaluation path and the
    /// target of finite-difference checks.
    pub fn loss_only(&self, batch: &Batch) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let (loss, _) = self.build_loss(&mut tape, batch, None)?;
        Ok(tape.value(loss).item())
    }

    /// Loss and parameter gradients (in parameter-set order), no update.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Vec<Tensor>), ModelError> {
        let mut tape = Tape::new();
        let (loss, bound) = self.build_loss(&mut tape, batch, dropout_rng)?;
        let grads = tape.backward(loss);
        Ok((tape.value(loss).item(), bound.gradients(&tape, &grads)))
    }

    fn step_greedy_state(&self) -> (Vec<Tensor>, Vec<Tensor>) {
        let zeros =
            vec![Tensor::zeros(1, self.config.hidden_size); self.config.num_layers];
        (zeros.clone(), zeros)
    }

    fn next_logits(&self, id: u32, h: &mut [Tensor], c: &mut [Tensor]) -> Vec<f64> {
        let mut x = if self.config.one_hot_embedding {
            let mut onehot = Tensor::zeros(1, self.vocab.len());
            onehot.set(0, id as usize, 1.0);
            onehot
        } else {
            let embed = self.params.get("embed");
            Tensor::from_rows(1, embed.cols, embed.row(id as usize).to_vec())
        };
        for layer in 0..self.config.num_layers {
            let (h_next, c_next) = lstm_step_forward(
                &x,
                &h[layer],
                &c[layer],
                self.params.get(&format!("lstm{layer}.w_ih")),
                self.params.get(&format!("lstm{layer}.w_hh")),
                self.params.get(&format!("lstm{layer}.bias")),
                self.config.hidden_size,
            );
            h[layer] = h_next;
            c[layer] = c_next;
            x = h[layer].clone();
        }
        let mut logits = matmul(&x, self.params.get("head.w"));
        logits.add_assign(self.params.get("head.b"));
        mask_specials(&mut logits.data);
        logits.data
    }
}

/// Specials other than EOS never leave the sampler.
pub(crate) fn mask_specials(logits: &mut [f64]) {
    use crate::tokenize::{PAD_ID, UNK_ID};
    logits[PAD_ID as usize] = f64::NEG_INFINITY;
    logits[BOS_ID as usize] = f64::NEG_INFINITY;
    logits[UNK_ID as usize] = f64::NEG_INFINITY;
}

impl GenerativeModel for FolkRnn {
    fn type_name(&self) -> &str {
        Self::TYPE_NAME
    }

    fn spec(&self) -> &ComponentSpec {
        &self.spec
    }

    fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    fn parameters(&self) -> &ParamSet {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn optimizer(&self) -> &Adam {
        &self.adam
    }

    fn optimizer_mut(&mut self) -> &mut Adam {
        &mut self.adam
    }

    fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    fn set_rng_state(&mut self, state: RngState) {
        self.rng = state.restore();
    }

    fn training_step(&mut self, batch: &Batch, _global_step: u64) -> Result<StepOutput, ModelError> {
        let mut rng = self.rng.clone();
        let (loss, mut grads) = self.loss_and_grads(batch, Some(&mut rng))?;
        self.rng = rng;
        self.adam.step(&mut self.params, &mut grads);
        Ok(StepOutput { loss, metrics: vec![("loss".into(), loss)] })
    }

    fn validation_loss(&self, batch: &Batch, _global_step: u64) -> Result<f64, ModelError> {
        self.loss_only(batch)
    }

    fn sample(
        &self,
        n: usize,
        max_len: usize,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Vec<u32>> {
        let cap = max_len.min(super::MAX_SAMPLE_LEN);
        (0..n)
            .map(|_| {
                let (mut h, mut c) = self.step_greedy_state();
                let mut out = Vec::new();
                let mut cur = BOS_ID;
                for _ in 0..cap {
                    let logits = self.next_logits(cur, &mut h, &mut c);
                    let id = sample_from_logits(&logits, temperature, rng) as u32;
                    if id == EOS_ID {
                        break;
                    }
                    out.push(id);
                    cur = id;
                }
                out
            })
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::tokens_to_index_matrix;
    use crate::tokenize::{abc, encode, TokenSequence};

    pub(crate) fn tiny_vocab() -> Arc<Vocabulary> {
        let seq = abc::tokenize("M:4/4\nK:Cmaj\nGABcdefg|").unwrap();
        Arc::new(Vocabulary::build([&seq]).unwrap())
    }

    pub(crate) fn batch_from(vocab: &Vocabulary, tunes: &[&str]) -> Batch {
        let seqs: Vec<TokenSequence> = tunes
            .iter()
            .map(|t| encode(&abc::tokenize(t).unwrap(), vocab, true))
            .collect();
        tokens_to_index_matrix(&seqs, 0).unwrap()
    }

    fn tiny_model(vocab: Arc<Vocabulary>) -> FolkRnn {
        let config = FolkRnnConfig {
            num_layers: 2,
            hidden_size: 8,
            ..FolkRnnConfig::default()
        };
        FolkRnn::new(config, ComponentSpec::new("folk_rnn"), vocab, 0)
    }

    #[test]
    fn uniform_logits_loss_is_log_vocab() {
        // zero weights everywhere -> uniform logits -> loss = ln(V)
        let vocab = tiny_vocab();
        let mut model = tiny_model(vocab.clone());
        for (_, t) in model.params.iter_mut() {
            for v in &mut t.data {
                *v = 0.0;
            }
        }
        let batch = batch_from(&vocab, &["M:4/4\nK:Cmaj\nGAB|"]);
        let loss = model.loss_only(&batch).unwrap();
        assert!((loss - (vocab.len() as f64).ln()).abs() < 1e-5);
    }

    #[test]
    fn loss_decreases_under_training() {
        let vocab = tiny_vocab();
        let mut model = tiny_model(vocab.clone());
        let batch = batch_from(&vocab, &["M:4/4\nK:Cmaj\nGABc|", "M:4/4\nK:Cmaj\ndefg|"]);
        let first = model.training_step(&batch, 0).unwrap().loss;
        let mut last = first;
        for step in 1..60 {
            last = model.training_step(&batch, step).unwrap().loss;
        }
        assert!(last < first * 0.7, "loss did not drop: {first} -> {last}");
    }

    #[test]
    fn finite_difference_gradients_match() {
        let vocab = tiny_vocab();
        let model = tiny_model(vocab.clone());
        let batch = batch_from(&vocab, &["K:Cmaj\nGAB|", "K:Cmaj\ncde|"]);
        let (_, grads) = model.loss_and_grads(&batch, None).unwrap();
        let mut model = model;
        let h = 1e-4;
        for pi in 0..model.params.len() {
            let n = model.params.tensor_mut(pi).len();
            for j in (0..n).step_by(7) {
                let orig = model.params.tensor_mut(pi).data[j];
                model.params.tensor_mut(pi).data[j] = orig + h;
                let plus = model.loss_only(&batch).unwrap();
                model.params.tensor_mut(pi).data[j] = orig - h;
                let minus = model.loss_only(&batch).unwrap();
                model.params.tensor_mut(pi).data[j] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let analytic = grads[pi].data[j];
                let denom = fd.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (fd - analytic).abs() / denom < 1e-3,
                    "param {pi} elem {j}: fd {fd} vs {analytic}"
                );
            }
        }
    }

    #[test]
    fn sampling_respects_contract() {
        use rand_chacha::rand_core::SeedableRng;
        let vocab = tiny_vocab();
        let model = tiny_model(vocab.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = model.sample(5, 20, 1.0, &mut rng);
        assert_eq!(samples.len(), 5);
        for s in &samples {
            assert!(s.len() <= 20);
            for &id in s {
                assert!((id as usize) < vocab.len());
                assert!(!vocab.is_special(id));
            }
        }
        // same seed, same samples
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(model.sample(5, 20, 1.0, &mut rng2), samples);
    }

    #[test]
    fn vocab_overflow_detected() {
        let vocab = tiny_vocab();
        let model = tiny_model(vocab.clone());
        let bad = Batch {
            ids: vec![1, 200, 2, 0],
            rows: 1,
            cols: 4,
            lengths: vec![3],
            pad_id: 0,
        };
        assert!(matches!(
            model.loss_only(&bad),
            Err(ModelError::VocabOverflow { .. })
        ));
    }

    #[test]
    fn one_hot_embedding_variant_trains() {
        let vocab = tiny_vocab();
        let config = FolkRnnConfig {
            num_layers: 1,
            hidden_size: 8,
            one_hot_embedding: true,
            ..FolkRnnConfig::default()
        };
        let mut model = FolkRnn::new(config, ComponentSpec::new("folk_rnn"), vocab.clone(), 0);
        let batch = batch_from(&vocab, &["K:Cmaj\nGG|"]);
        let first = model.training_step(&batch, 0).unwrap().loss;
        for step in 1..40 {
            model.training_step(&batch, step).unwrap();
        }
        let last = model.loss_only(&batch).unwrap();
        assert!(last < first);
    }
}
