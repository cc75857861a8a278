//! Decoder-only transformer over the shared token vocabulary: pre-norm
//! blocks, learned positional embeddings, causal self-attention.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::autograd::{Tape, Var};
use super::nn::{normal_init, sample_from_logits, Adam, BoundParams, ParamSet};
use super::tensor::Tensor;
use super::{check_batch, derive_rng, GenerativeModel, ModelError, RngState, StepOutput};
use crate::config::{ComponentSpec, ParamError, ParamReader};
use crate::data::{fnv, Batch};
use crate::tokenize::{Vocabulary, BOS_ID, EOS_ID};

#[derive(Debug, Clone, PartialEq)]
pub struct Gpt2Config {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub context_len: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for Gpt2Config {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 128,
            context_len: 256,
            dropout: 0.0,
            learning_rate: 1e-3,
            grad_clip: 1.0,
            temperature: 1.0,
            max_len: super::MAX_SAMPLE_LEN,
        }
    }
}

impl Gpt2Config {
    pub fn from_spec(spec: &ComponentSpec) -> Result<Self, ParamError> {
        let r = ParamReader::new(spec);
        let d = Self::default();
        let cfg = Self {
            n_layers: r.positive_or("n_layers", d.n_layers)?,
            n_heads: r.positive_or("n_heads", d.n_heads)?,
            d_model: r.positive_or("d_model", d.d_model)?,
            context_len: r.positive_or("context_len", d.context_len)?,
            dropout: r.f64_or("dropout", d.dropout)?,
            learning_rate: r.f64_or("learning_rate", d.learning_rate)?,
            grad_clip: r.f64_or("grad_clip", d.grad_clip)?,
            temperature: r.f64_or("temperature", d.temperature)?,
            max_len: r.positive_or("max_len", d.max_len)?,
        };
        let err = |key: &str, msg: &str| ParamError {
            component: spec.type_name.clone(),
            key: key.into(),
            msg: msg.into(),
        };
        if cfg.d_model % cfg.n_heads != 0 {
            return Err(err("d_model", "must be divisible by n_heads"));
        }
        if cfg.context_len < 2 {
            return Err(err("context_len", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(err("dropout", "must be in [0, 1)"));
        }
        r.finish()?;
        Ok(cfg)
    }
}

pub struct Gpt2 {
    config: Gpt2Config,
    spec: ComponentSpec,
    vocab: Arc<Vocabulary>,
    params: ParamSet,
    adam: Adam,
    rng: ChaCha8Rng,
}

const LN_EPS: f64 = 1e-5;

impl Gpt2 {
    pub const TYPE_NAME: &'static str = "gpt2";

    pub fn new(config: Gpt2Config, spec: ComponentSpec, vocab: Arc<Vocabulary>, seed: u64) -> Self {
        let mut init = derive_rng(seed, fnv(Self::TYPE_NAME));
        let v = vocab.len();
        let d = config.d_model;
        let mut params = ParamSet::new();
        params.add("tok_embed", normal_init(&mut init, v, d, 0.02));
        params.add("pos_embed", normal_init(&mut init, config.context_len, d, 0.02));
        for l in 0..config.n_layers {
            params.add(format!("block{l}.ln1.g"), ones(1, d));
            params.add(format!("block{l}.ln1.b"), Tensor::zeros(1, d));
            params.add(format!("block{l}.attn.w_qkv"), normal_init(&mut init, d, 3 * d, 0.02));
            params.add(format!("block{l}.attn.b_qkv"), Tensor::zeros(1, 3 * d));
            params.add(format!("block{l}.attn.w_proj"), normal_init(&mut init, d, d, 0.02));
            params.add(format!("block{l}.attn.b_proj"), Tensor::zeros(1, d));
            params.add(format!("block{l}.ln2.g"), ones(1, d));
            params.add(format!("block{l}.ln2.b"), Tensor::zeros(1, d));
            params.add(format!("block{l}.mlp.w_fc"), normal_init(&mut init, d, 4 * d, 0.02));
            params.add(format!("block{l}.mlp.b_fc"), Tensor::zeros(1, 4 * d));
            params.add(format!("block{l}.mlp.w_out"), normal_init(&mut init, 4 * d, d, 0.02));
            params.add(format!("block{l}.mlp.b_out"), Tensor::zeros(1, d));
        }
        params.add("ln_f.g", ones(1, d));
        params.add("ln_f.b", Tensor::zeros(1, d));
        params.add("head.w", normal_init(&mut init, d, v, 0.02));
        params.add("head.b", Tensor::zeros(1, v));
        let adam = Adam::new(config.learning_rate, config.grad_clip, &params);
        let rng = derive_rng(seed, fnv("gpt2.model_stream"));
        Self { config, spec, vocab, params, adam, rng }
    }

    pub fn config(&self) -> &Gpt2Config {
        &self.config
    }

    /// Logits for every prefix position of a batch of equal-length rows.
    /// Row-major output: sample-major, then position.
    fn build_logits(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        rows_ids: &[Vec<usize>],
    ) -> Result<Var, ModelError> {
        let t_len = rows_ids[0].len();
        if t_len > self.config.context_len {
            return Err(ModelError::ContextOverflow {
                len: t_len,
                max: self.config.context_len,
            });
        }
        let batch = rows_ids.len();
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let head_dim = d / heads;

        let flat_ids: Vec<usize> = rows_ids.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..t_len).collect();
        let tok = tape.gather(bound.var("tok_embed"), &flat_ids);
        let pos = tape.gather(bound.var("pos_embed"), &positions);
        let mut x = tape.add(tok, pos); // [batch*t, d]

        // causal mask shared by every sample and head
        let mask = Tensor::from_fn(t_len, t_len, |q, k| if k > q { -1e30 } else { 0.0 });
        let mask = tape.leaf(mask);
        let scale = 1.0 / (head_dim as f64).sqrt();

        for l in 0..self.config.n_layers {
            let ln1 = {
                let g = bound.var(&format!("block{l}.ln1.g"));
                let b = bound.var(&format!("block{l}.ln1.b"));
                tape.layer_norm(x, g, b, LN_EPS)
            };
            let qkv = {
                let w = bound.var(&format!("block{l}.attn.w_qkv"));
                let b = bound.var(&format!("block{l}.attn.b_qkv"));
                let mm = tape.matmul(ln1, w);
                tape.add_row(mm, b)
            };
            let mut sample_outputs = Vec::with_capacity(batch);
            for s in 0..batch {
                let qkv_s = tape.slice_rows(qkv, s * t_len, t_len);
                let mut head_outputs = Vec::with_capacity(heads);
                for hd in 0..heads {
                    let q = tape.slice_cols(qkv_s, hd * head_dim, head_dim);
                    let k = tape.slice_cols(qkv_s, d + hd * head_dim, head_dim);
                    let v = tape.slice_cols(qkv_s, 2 * d + hd * head_dim, head_dim);
                    let scores = tape.matmul_t(q, k);
                    let scaled = tape.scale(scores, scale);
                    let masked = tape.add(scaled, mask);
                    let probs = tape.row_softmax(masked);
                    head_outputs.push(tape.matmul(probs, v));
                }
                sample_outputs.push(tape.concat_cols(&head_outputs));
            }
            let attn = tape.concat_rows(&sample_outputs);
            let attn = {
                let w = bound.var(&format!("block{l}.attn.w_proj"));
                let b = bound.var(&format!("block{l}.attn.b_proj"));
                let mm = tape.matmul(attn, w);
                tape.add_row(mm, b)
            };
            x = tape.add(x, attn);

            let ln2 = {
                let g = bound.var(&format!("block{l}.ln2.g"));
                let b = bound.var(&format!("block{l}.ln2.b"));
                tape.layer_norm(x, g, b, LN_EPS)
            };
            let fc = {
                let w = bound.var(&format!("block{l}.mlp.w_fc"));
                let b = bound.var(&format!("block{l}.mlp.b_fc"));
                let mm = tape.matmul(ln2, w);
                tape.add_row(mm, b)
            };
            let act = tape.gelu(fc);
            let mlp = {
                let w = bound.var(&format!("block{l}.mlp.w_out"));
                let b = bound.var(&format!("block{l}.mlp.b_out"));
                let mm = tape.matmul(act, w);
                tape.add_row(mm, b)
            };
            x = tape.add(x, mlp);
        }
        let ln_f = {
            let g = bound.var("ln_f.g");
            let b = bound.var("ln_f.b");
            tape.layer_norm(x, g, b, LN_EPS)
        };
        let head = tape.matmul(ln_f, bound.var("head.w"));
        Ok(tape.add_row(head, bound.var("head.b")))
    }

    fn build_loss(&self, tape: &mut Tape, batch: &Batch) -> Result<(Var, BoundParams), ModelError> {
        check_batch(batch, self.vocab.len())?;
        if batch.cols < 2 {
            return Err(ModelError::Shape(format!(
                "need sequences of at least 2 ids for next-token training, got {}",
                batch.cols
            )));
        }
        let bound = self.params.bind(tape);
        let t_in = batch.cols - 1;
        let rows_ids: Vec<Vec<usize>> = (0..batch.rows)
            .map(|r| batch.row(r)[..t_in].iter().map(|&x| x as usize).collect())
            .collect();
        let logits = self.build_logits(tape, &bound, &rows_ids)?;
        let mut targets = Vec::with_capacity(batch.rows * t_in);
        let mut mask = Vec::with_capacity(batch.rows * t_in);
        for r in 0..batch.rows {
            for t in 0..t_in {
                targets.push(batch.row(r)[t + 1]);
                mask.push(if t + 1 < batch.lengths[r] { 1.0 } else { 0.0 });
            }
        }
        let loss = tape.mean_cross_entropy(logits, &targets, &mask);
        Ok((loss, bound))
    }

    pub fn loss_only(&self, batch: &Batch) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let (loss, _) = self.build_loss(&mut tape, batch)?;
        Ok(tape.value(loss).item())
    }

    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, Vec<Tensor>), ModelError> {
        let mut tape = Tape::new();
        let (loss, bound) = self.build_loss(&mut tape, batch)?;
        let grads = tape.backward(loss);
        Ok((tape.value(loss).item(), bound.gradients(&tape, &grads)))
    }

    /// Per-position next-token logits for one id sequence; row `t` depends
    /// only on `ids[0..=t]`.
    pub fn causal_logits(&self, ids: &[u32]) -> Result<Tensor, ModelError> {
        if ids.is_empty() {
            return Err(ModelError::Shape("causal_logits needs at least one id".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.vocab.len()) {
            return Err(ModelError::VocabOverflow { id: bad, vocab_size: self.vocab.len() });
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let rows: Vec<Vec<usize>> = vec![ids.iter().map(|&x| x as usize).collect()];
        let logits = self.build_logits(&mut tape, &bound, &rows)?;
        Ok(tape.value(logits).clone())
    }
}

fn ones(rows: usize, cols: usize) -> Tensor {
    Tensor { rows, cols, data: vec![1.0; rows * cols] }
}

impl GenerativeModel for Gpt2 {
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
        let (loss, mut grads) = self.loss_and_grads(batch)?;
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
                let mut ids: Vec<u32> = vec![BOS_ID];
                let mut out = Vec::new();
                for _ in 0..cap {
                    let window_start = ids.len().saturating_sub(self.config.context_len);
                    let logits = self
                        .causal_logits(&ids[window_start..])
                        .expect("sampling prefix fits the context");
                    let mut last = logits.row(logits.rows - 1).to_vec();
                    super::folk_rnn::mask_specials(&mut last);
                    let id = sample_from_logits(&last, temperature, rng) as u32;
                    if id == EOS_ID {
                        break;
                    }
                    out.push(id);
                    ids.push(id);
                }
                out
            })
            .collect()
    }
}
