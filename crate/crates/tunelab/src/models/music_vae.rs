//! Hierarchical recurrent VAE: a bidirectional LSTM encoder produces a
//! diagonal Gaussian over the latent space; a conductor LSTM emits one
//! embedding per bar; a per-bar decoder LSTM reconstructs each bar's tokens
//! conditioned on its conductor embedding (concatenated to every input token
//! embedding). Training optimizes reconstruction cross-entropy plus a
//! warmed-up, free-bits-thresholded KL term.

use std::collections::HashSet;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::autograd::{Tape, Var};
use super::nn::{
    lstm_step, lstm_step_forward, normal_init, sample_from_logits, uniform_init, Adam,
    BoundParams, ParamSet,
};
use super::tensor::{matmul, Tensor};
use super::{
    check_batch, derive_rng, GenerativeModel, LatentCode, ModelError, RngState, StepOutput,
};
use crate::config::{ComponentSpec, ParamError, ParamReader};
use crate::data::{fnv, Batch};
use crate::tokenize::{Token, TokenKind, Vocabulary, BOS_ID, EOS_ID, PAD_ID, UNK_ID};

#[derive(Debug, Clone, PartialEq)]
pub struct MusicVaeConfig {
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub conductor_hidden: usize,
    pub decoder_hidden: usize,
    pub embed_size: usize,
    pub bars_per_sequence: usize,
    pub max_bar_len: usize,
    pub beta_max: f64,
    pub warmup_steps: u64,
    pub free_bits: f64,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for MusicVaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            encoder_hidden: 64,
            conductor_hidden: 64,
            decoder_hidden: 64,
            embed_size: 32,
            bars_per_sequence: 2,
            max_bar_len: 32,
            beta_max: 0.2,
            warmup_steps: 2000,
            free_bits: 0.125,
            learning_rate: 1e-3,
            grad_clip: 1.0,
            temperature: 1.0,
            max_len: super::MAX_SAMPLE_LEN,
        }
    }
}

impl MusicVaeConfig {
    pub fn from_spec(spec: &ComponentSpec) -> Result<Self, ParamError> {
        let r = ParamReader::new(spec);
        let d = Self::default();
        let cfg = Self {
            latent_dim: r.positive_or("latent_dim", d.latent_dim)?,
            encoder_hidden: r.positive_or("encoder_hidden", d.encoder_hidden)?,
            conductor_hidden: r.positive_or("conductor_hidden", d.conductor_hidden)?,
            decoder_hidden: r.positive_or("decoder_hidden", d.decoder_hidden)?,
            embed_size: r.positive_or("embed_size", d.embed_size)?,
            bars_per_sequence: r.positive_or("bars_per_sequence", d.bars_per_sequence)?,
            max_bar_len: r.positive_or("max_bar_len", d.max_bar_len)?,
            beta_max: r.f64_or("beta_max", d.beta_max)?,
            warmup_steps: r.usize_or("warmup_steps", d.warmup_steps as usize)? as u64,
            free_bits: r.f64_or("free_bits", d.free_bits)?,
            learning_rate: r.f64_or("learning_rate", d.learning_rate)?,
            grad_clip: r.f64_or("grad_clip", d.grad_clip)?,
            temperature: r.f64_or("temperature", d.temperature)?,
            max_len: r.positive_or("max_len", d.max_len)?,
        };
        if cfg.beta_max < 0.0 {
            return Err(ParamError {
                component: spec.type_name.clone(),
                key: "beta_max".into(),
                msg: "must be non-negative".into(),
            });
        }
        r.finish()?;
        Ok(cfg)
    }

    pub fn beta(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.beta_max;
        }
        self.beta_max * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

pub struct MusicVae {
    config: MusicVaeConfig,
    spec: ComponentSpec,
    vocab: Arc<Vocabulary>,
    params: ParamSet,
    adam: Adam,
    rng: ChaCha8Rng,
    bar_ids: HashSet<u32>,
    remi_mode: bool,
}

impl MusicVae {
    pub const TYPE_NAME: &'static str = "music_vae";

    pub fn new(
        config: MusicVaeConfig,
        spec: ComponentSpec,
        vocab: Arc<Vocabulary>,
        seed: u64,
    ) -> Self {
        let mut init = derive_rng(seed, fnv(Self::TYPE_NAME));
        let v = vocab.len();
        let (e, he, hc, hd, dl) = (
            config.embed_size,
            config.encoder_hidden,
            config.conductor_hidden,
            config.decoder_hidden,
            config.latent_dim,
        );
        let mut params = ParamSet::new();
        params.add("embed", uniform_init(&mut init, v, e, 0.1));
        for name in ["enc_fwd", "enc_bwd"] {
            let scale = 1.0 / (e as f64).sqrt();
            params.add(format!("{name}.w_ih"), uniform_init(&mut init, e, 4 * he, scale));
            let rscale = 1.0 / (he as f64).sqrt();
            params.add(format!("{name}.w_hh"), uniform_init(&mut init, he, 4 * he, rscale));
            params.add(format!("{name}.bias"), forget_bias(he));
        }
        let lscale = 1.0 / ((2 * he) as f64).sqrt();
        params.add("latent.w_mu", normal_init(&mut init, 2 * he, dl, lscale * 0.5));
        params.add("latent.b_mu", Tensor::zeros(1, dl));
        params.add("latent.w_lv", normal_init(&mut init, 2 * he, dl, lscale * 0.5));
        params.add("latent.b_lv", Tensor::zeros(1, dl));
        let cscale = 1.0 / (dl as f64).sqrt();
        params.add("conductor.w_ih", uniform_init(&mut init, dl, 4 * hc, cscale));
        params.add(
            "conductor.w_hh",
            uniform_init(&mut init, hc, 4 * hc, 1.0 / (hc as f64).sqrt()),
        );
        params.add("conductor.bias", forget_bias(hc));
        let dscale = 1.0 / ((e + hc) as f64).sqrt();
        params.add("dec.w_ih", uniform_init(&mut init, e + hc, 4 * hd, dscale));
        params.add("dec.w_hh", uniform_init(&mut init, hd, 4 * hd, 1.0 / (hd as f64).sqrt()));
        params.add("dec.bias", forget_bias(hd));
        params.add("head.w", uniform_init(&mut init, hd, v, 1.0 / (hd as f64).sqrt()));
        params.add("head.b", Tensor::zeros(1, v));

        let adam = Adam::new(config.learning_rate, config.grad_clip, &params);
        let rng = derive_rng(seed, fnv("music_vae.model_stream"));
        let mut bar_ids = HashSet::new();
        let mut remi_mode = false;
        for (id, text) in vocab.id_ordered_tokens().iter().enumerate() {
            if let Ok(tok) = Token::classify(text) {
                if tok.kind == TokenKind::Bar {
                    bar_ids.insert(id as u32);
                    if text == "Bar" {
                        remi_mode = true;
                    }
                }
            }
        }
        Self { config, spec, vocab, params, adam, rng, bar_ids, remi_mode }
    }

    pub fn config(&self) -> &MusicVaeConfig {
        &self.config
    }

    /// Split ids into bars. ABC bars end at (and include) their bar symbol;
    /// REMI bars start at each `Bar` token. Specials are dropped first.
    fn segment_bars(&self, ids: &[u32]) -> Vec<Vec<u32>> {
        let body: Vec<u32> = ids
            .iter()
            .copied()
            .filter(|&id| ![PAD_ID, BOS_ID, EOS_ID].contains(&id))
            .collect();
        let mut bars: Vec<Vec<u32>> = Vec::new();
        if self.remi_mode {
            let mut current: Vec<u32> = Vec::new();
            for &id in &body {
                if self.bar_ids.contains(&id) && !current.is_empty() {
                    bars.push(std::mem::take(&mut current));
                }
                current.push(id);
            }
            if !current.is_empty() {
                bars.push(current);
            }
        } else {
            let mut current: Vec<u32> = Vec::new();
            for &id in &body {
                current.push(id);
                if self.bar_ids.contains(&id) {
                    bars.push(std::mem::take(&mut current));
                }
            }
            if !current.is_empty() {
                bars.push(current);
            }
        }
        bars
    }

    /// Fixed-size (bars x max_bar_len) canvas per row plus its cell mask.
    fn canvases(&self, rows: &[&[u32]]) -> (Vec<Vec<u32>>, Vec<Vec<f64>>) {
        let bars = self.config.bars_per_sequence;
        let len = self.config.max_bar_len;
        let mut id_canvas = Vec::with_capacity(rows.len());
        let mut mask_canvas = Vec::with_capacity(rows.len());
        for &row in rows {
            let segmented = self.segment_bars(row);
            let mut ids = vec![PAD_ID; bars * len];
            let mut mask = vec![0.0; bars * len];
            for (b, bar) in segmented.into_iter().take(bars).enumerate() {
                for (j, id) in bar.into_iter().take(len).enumerate() {
                    ids[b * len + j] = id;
                    mask[b * len + j] = 1.0;
                }
            }
            id_canvas.push(ids);
            mask_canvas.push(mask);
        }
        (id_canvas, mask_canvas)
    }

    fn run_encoder(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        id_canvas: &[Vec<u32>],
    ) -> (Var, Var) {
        let batch = id_canvas.len();
        let total = self.config.bars_per_sequence * self.config.max_bar_len;
        let he = self.config.encoder_hidden;
        let embed = bound.var("embed");

        let step_inputs: Vec<Var> = (0..total)
            .map(|t| {
                let ids: Vec<usize> = id_canvas.iter().map(|row| row[t] as usize).collect();
                tape.gather(embed, &ids)
            })
            .collect();

        let mut h_fwd = tape.leaf(Tensor::zeros(batch, he));
        let mut c_fwd = tape.leaf(Tensor::zeros(batch, he));
        for &x in &step_inputs {
            let (h, c) = lstm_step(
                tape,
                x,
                h_fwd,
                c_fwd,
                bound.var("enc_fwd.w_ih"),
                bound.var("enc_fwd.w_hh"),
                bound.var("enc_fwd.bias"),
                he,
            );
            h_fwd = h;
            c_fwd = c;
        }
        let mut h_bwd = tape.leaf(Tensor::zeros(batch, he));
        let mut c_bwd = tape.leaf(Tensor::zeros(batch, he));
        for &x in step_inputs.iter().rev() {
            let (h, c) = lstm_step(
                tape,
                x,
                h_bwd,
                c_bwd,
                bound.var("enc_bwd.w_ih"),
                bound.var("enc_bwd.w_hh"),
                bound.var("enc_bwd.bias"),
                he,
            );
            h_bwd = h;
            c_bwd = c;
        }
        let joint = tape.concat_cols(&[h_fwd, h_bwd]);
        let mu = {
            let mm = tape.matmul(joint, bound.var("latent.w_mu"));
            tape.add_row(mm, bound.var("latent.b_mu"))
        };
        let lv = {
            let mm = tape.matmul(joint, bound.var("latent.w_lv"));
            tape.add_row(mm, bound.var("latent.b_lv"))
        };
        (mu, lv)
    }

    /// ELBO-style loss with explicit noise and beta, shared by training,
    /// validation (zero noise), and gradient checks (fixed noise).
    fn build_loss(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        noise: &Tensor,
        beta: f64,
    ) -> Result<(Var, Var, Var, BoundParams), ModelError> {
        check_batch(batch, self.vocab.len())?;
        let rows: Vec<&[u32]> = (0..batch.rows)
            .map(|r| &batch.row(r)[..batch.lengths[r]])
            .collect();
        let (id_canvas, mask_canvas) = self.canvases(&rows);
        let batch_rows = id_canvas.len();
        let dl = self.config.latent_dim;
        assert_eq!(noise.shape(), (batch_rows, dl), "noise shape mismatch");

        let bound = self.params.bind(tape);
        let (mu, lv) = self.run_encoder(tape, &bound, &id_canvas);

        // z = mu + exp(lv / 2) * eps
        let half_lv = tape.scale(lv, 0.5);
        let sigma = tape.exp(half_lv);
        let eps = tape.leaf(noise.clone());
        let scaled_noise = tape.mul(sigma, eps);
        let z = tape.add(mu, scaled_noise);

        // conductor: one embedding per bar
        let hc = self.config.conductor_hidden;
        let mut h_c = tape.leaf(Tensor::zeros(batch_rows, hc));
        let mut c_c = tape.leaf(Tensor::zeros(batch_rows, hc));
        let mut conductor_embeddings = Vec::with_capacity(self.config.bars_per_sequence);
        for _ in 0..self.config.bars_per_sequence {
            let (h, c) = lstm_step(
                tape,
                z,
                h_c,
                c_c,
                bound.var("conductor.w_ih"),
                bound.var("conductor.w_hh"),
                bound.var("conductor.bias"),
                hc,
            );
            h_c = h;
            c_c = c;
            conductor_embeddings.push(h);
        }

        // per-bar teacher-forced decoder
        let hd = self.config.decoder_hidden;
        let len = self.config.max_bar_len;
        let embed = bound.var("embed");
        let mut logit_vars = Vec::new();
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        for (b, &cond) in conductor_embeddings.iter().enumerate() {
            let mut h_d = tape.leaf(Tensor::zeros(batch_rows, hd));
            let mut c_d = tape.leaf(Tensor::zeros(batch_rows, hd));
            for j in 0..len {
                let input_ids: Vec<usize> = id_canvas
                    .iter()
                    .map(|row| {
                        if j == 0 {
                            BOS_ID as usize
                        } else {
                            row[b * len + j - 1] as usize
                        }
                    })
                    .collect();
                let tok = tape.gather(embed, &input_ids);
                let x = tape.concat_cols(&[tok, cond]);
                let (h, c) = lstm_step(
                    tape,
                    x,
                    h_d,
                    c_d,
                    bound.var("dec.w_ih"),
                    bound.var("dec.w_hh"),
                    bound.var("dec.bias"),
                    hd,
                );
                h_d = h;
                c_d = c;
                let proj = tape.matmul(h, bound.var("head.w"));
                logit_vars.push(tape.add_row(proj, bound.var("head.b")));
                for r in 0..batch_rows {
                    targets.push(id_canvas[r][b * len + j]);
                    mask.push(mask_canvas[r][b * len + j]);
                }
            }
        }
        let logits = tape.concat_rows(&logit_vars);
        let recon = tape.mean_cross_entropy(logits, &targets, &mask);

        // KL(q || N(0, I)), mean over the batch
        let mu_sq = tape.mul(mu, mu);
        let exp_lv = tape.exp(lv);
        let sum_terms = tape.add(mu_sq, exp_lv);
        let minus_lv = tape.sub(sum_terms, lv);
        let shifted = tape.add_const(minus_lv, -1.0);
        let total = tape.sum_all(shifted);
        let kl = tape.scale(total, 0.5 / batch_rows as f64);

        // free-bits floor, then the beta weight
        let thresholded = tape.add_const(kl, -self.config.free_bits * dl as f64);
        let hinged = tape.relu(thresholded);
        let weighted = tape.scale(hinged, beta);
        let loss = tape.add(recon, weighted);
        Ok((loss, recon, kl, bound))
    }

    pub fn loss_parts(
        &self,
        batch: &Batch,
        noise: &Tensor,
        beta: f64,
    ) -> Result<(f64, f64, f64), ModelError> {
        let mut tape = Tape::new();
        let (loss, recon, kl, _) = self.build_loss(&mut tape, batch, noise, beta)?;
        Ok((tape.value(loss).item(), tape.value(recon).item(), tape.value(kl).item()))
    }

    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        noise: &Tensor,
        beta: f64,
    ) -> Result<(f64, f64, f64, Vec<Tensor>), ModelError> {
        let mut tape = Tape::new();
        let (loss, recon, kl, bound) = self.build_loss(&mut tape, batch, noise, beta)?;
        let grads = tape.backward(loss);
        Ok((
            tape.value(loss).item(),
            tape.value(recon).item(),
            tape.value(kl).item(),
            bound.gradients(&tape, &grads),
        ))
    }

    /// Posterior parameters for a batch of sequences (plain forward pass).
    fn posterior(&self, rows: &[&[u32]]) -> Result<(Tensor, Tensor), ModelError> {
        for row in rows {
            if let Some(&bad) = row.iter().find(|&&id| id as usize >= self.vocab.len()) {
                return Err(ModelError::VocabOverflow { id: bad, vocab_size: self.vocab.len() });
            }
        }
        let (id_canvas, _) = self.canvases(rows);
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let (mu, lv) = self.run_encoder(&mut tape, &bound, &id_canvas);
        Ok((tape.value(mu).clone(), tape.value(lv).clone()))
    }

    fn masked_logits(&self, h: &Tensor) -> Vec<f64> {
        let mut logits = matmul(h, self.params.get("head.w"));
        logits.add_assign(self.params.get("head.b"));
        logits.data[PAD_ID as usize] = f64::NEG_INFINITY;
        logits.data[BOS_ID as usize] = f64::NEG_INFINITY;
        logits.data[EOS_ID as usize] = f64::NEG_INFINITY;
        logits.data[UNK_ID as usize] = f64::NEG_INFINITY;
        logits.data
    }

    fn decode_from(&self, z: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let hc = self.config.conductor_hidden;
        let hd = self.config.decoder_hidden;
        let z_row = Tensor::from_rows(1, z.len(), z.to_vec());
        let mut h_c = Tensor::zeros(1, hc);
        let mut c_c = Tensor::zeros(1, hc);
        let mut out = Vec::new();
        for _ in 0..self.config.bars_per_sequence {
            let (h, c) = lstm_step_forward(
                &z_row,
                &h_c,
                &c_c,
                self.params.get("conductor.w_ih"),
                self.params.get("conductor.w_hh"),
                self.params.get("conductor.bias"),
                hc,
            );
            h_c = h;
            c_c = c;
            let mut h_d = Tensor::zeros(1, hd);
            let mut c_d = Tensor::zeros(1, hd);
            let mut cur = BOS_ID;
            for j in 0..self.config.max_bar_len {
                let embed = self.params.get("embed");
                let tok = Tensor::from_rows(1, embed.cols, embed.row(cur as usize).to_vec());
                let mut x = Tensor::zeros(1, embed.cols + hc);
                x.row_mut(0)[..embed.cols].copy_from_slice(tok.row(0));
                x.row_mut(0)[embed.cols..].copy_from_slice(h_c.row(0));
                let (h, c) = lstm_step_forward(
                    &x,
                    &h_d,
                    &c_d,
                    self.params.get("dec.w_ih"),
                    self.params.get("dec.w_hh"),
                    self.params.get("dec.bias"),
                    hd,
                );
                h_d = h;
                c_d = c;
                let logits = self.masked_logits(&h_d);
                let id = sample_from_logits(&logits, temperature, rng) as u32;
                let is_bar = self.bar_ids.contains(&id);
                if self.remi_mode && is_bar && j > 0 {
                    break; // a new Bar opener belongs to the next bar
                }
                out.push(id);
                cur = id;
                if !self.remi_mode && is_bar {
                    break; // ABC bars end with their bar symbol
                }
            }
        }
        out
    }
}

fn forget_bias(hidden: usize) -> Tensor {
    let mut bias = Tensor::zeros(1, 4 * hidden);
    for j in hidden..2 * hidden {
        bias.data[j] = 1.0;
    }
    bias
}

impl GenerativeModel for MusicVae {
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

    fn training_step(&mut self, batch: &Batch, global_step: u64) -> Result<StepOutput, ModelError> {
        let beta = self.config.beta(global_step);
        let mut rng = self.rng.clone();
        let noise = normal_init(&mut rng, batch.rows, self.config.latent_dim, 1.0);
        self.rng = rng;
        let (loss, recon, kl, mut grads) = self.loss_and_grads(batch, &noise, beta)?;
        self.adam.step(&mut self.params, &mut grads);
        Ok(StepOutput {
            loss,
            metrics: vec![
                ("loss".into(), loss),
                ("recon".into(), recon),
                ("kl".into(), kl),
                ("beta".into(), beta),
            ],
        })
    }

    fn validation_loss(&self, batch: &Batch, global_step: u64) -> Result<f64, ModelError> {
        let beta = self.config.beta(global_step);
        let noise = Tensor::zeros(batch.rows, self.config.latent_dim);
        let (loss, _, _) = self.loss_parts(batch, &noise, beta)?;
        Ok(loss)
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
                let z = normal_init(rng, 1, self.config.latent_dim, 1.0);
                let mut ids = self.decode_from(&z.data, temperature, rng);
                ids.truncate(cap);
                ids
            })
            .collect()
    }

    fn encode_latent(&self, ids: &[u32], rng: &mut ChaCha8Rng) -> Result<LatentCode, ModelError> {
        let (mu, lv) = self.posterior(&[ids])?;
        let noise = normal_init(rng, 1, self.config.latent_dim, 1.0);
        Ok(LatentCode::from_noise(mu.data, lv.data, noise.data))
    }

    fn decode_latent(
        &self,
        z: &[f64],
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<u32>, ModelError> {
        if z.len() != self.config.latent_dim {
            return Err(ModelError::Shape(format!(
                "latent vector has {} entries, expected {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        Ok(self.decode_from(z, temperature, rng))
    }

    fn interpolate(
        &self,
        seq_a: &[u32],
        seq_b: &[u32],
        steps: usize,
    ) -> Result<Vec<Vec<u32>>, ModelError> {
        if steps < 2 {
            return Err(ModelError::Shape("interpolation needs at least 2 steps".into()));
        }
        let (mu, _) = self.posterior(&[seq_a, seq_b])?;
        let mean_a = mu.row(0);
        let mean_b = mu.row(1);
        let mut rng = derive_rng(0, 0); // greedy decode draws nothing
        let mut out = Vec::with_capacity(steps);
        for k in 0..steps {
            let t = k as f64 / (steps - 1) as f64;
            let z = super::slerp(mean_a, mean_b, t);
            out.push(self.decode_from(&z, 0.0, &mut rng));
        }
        Ok(out)
    }
}
