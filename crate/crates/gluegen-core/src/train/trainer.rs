//! The train loop — alternating critic/generator steps over a parallel
//! corpus — plus the inference entry points `translate` and
//! `loop_stability_eval`.

use std::fmt::Write as _;

use crate::data::{
    batch_iter_at, derive_seed, read_gge, EmbeddingStore, ParallelCorpus,
};
use crate::error::{Error, Result};
use crate::model::{
    build_decoder, build_discriminator, build_encoder, forward_decoder, forward_encoder,
    Discriminator, GlueNetConfig, GlueNetDecoder, GlueNetEncoder,
};
use crate::objectives::{
    adversarial_losses, mse_loss, reconstruction_loss, reweighted_mse_loss, token_weights,
    total_objective, LossReport, TokenWeightVector,
};
use crate::tensor::{ParameterStore, Tape, ValueId};

use super::adamw::{adamw_step, AdamWParams, AdamWState};
use super::checkpoint::Checkpoint;
use super::TrainConfig;

/// Seed streams carved out of `TrainConfig::seed` with `derive_seed`, so the
/// four independent random decisions never share a generator.
const STREAM_ENCODER: u64 = 1;
const STREAM_DECODER: u64 = 2;
const STREAM_DISCRIMINATOR: u64 = 3;
const STREAM_DATA: u64 = 4;

/// One row of the loss history: the 1-based step number and its report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub report: LossReport,
}

/// Round-trip stability of a translator pair on a store: `e1` is the mean
/// per-element squared error of the first round trip `x̂ = N(M(x))` against
/// `x`, and `e2` compares the second round trip against the first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopStability {
    pub e1: f64,
    pub e2: f64,
}

/// Everything a finished run hands back to the caller.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub encoder: GlueNetEncoder<f32>,
    pub decoder: GlueNetDecoder<f32>,
    pub discriminator: Discriminator<f32>,
    pub history: Vec<LossRow>,
}

/// Training state: the three networks, their optimizers, the corpus, and the
/// batch cursor. `step` doubles as the number of batches consumed, which is
/// all the data pipeline needs to resume mid-epoch.
#[derive(Debug)]
pub struct Trainer {
    pub(crate) corpus: ParallelCorpus,
    pub(crate) gcfg: GlueNetConfig,
    pub(crate) tcfg: TrainConfig,
    pub(crate) encoder: GlueNetEncoder<f32>,
    pub(crate) decoder: GlueNetDecoder<f32>,
    pub(crate) discriminator: Discriminator<f32>,
    pub(crate) gen_opt: AdamWState,
    pub(crate) disc_opt: AdamWState,
    pub(crate) token_weights: Option<TokenWeightVector>,
    pub(crate) shuffle_seed: u64,
    pub(crate) step: u64,
    history: Vec<LossRow>,
    last_finite: Option<LossRow>,
}

impl Trainer {
    /// Build the three seeded networks and fix the token weights (when
    /// reweighting) before the first step.
    pub fn new(corpus: ParallelCorpus, gcfg: GlueNetConfig, tcfg: TrainConfig) -> Result<Self> {
        gcfg.validate()?;
        tcfg.validate()?;
        check_corpus_shapes(&corpus, &gcfg)?;
        let encoder = build_encoder(&gcfg, derive_seed(tcfg.seed, STREAM_ENCODER))?;
        let decoder = build_decoder(&gcfg, derive_seed(tcfg.seed, STREAM_DECODER))?;
        let discriminator =
            build_discriminator(&gcfg, derive_seed(tcfg.seed, STREAM_DISCRIMINATOR))?;
        let token_weights = initial_token_weights(&corpus, &gcfg, &tcfg)?;
        let shuffle_seed = derive_seed(tcfg.seed, STREAM_DATA);
        Ok(Trainer {
            corpus,
            gcfg,
            tcfg,
            encoder,
            decoder,
            discriminator,
            gen_opt: AdamWState::new(),
            disc_opt: AdamWState::new(),
            token_weights,
            shuffle_seed,
            step: 0,
            history: Vec::new(),
            last_finite: None,
        })
    }

    /// Rebuild a trainer from a checkpoint. `corpus` must be the data the
    /// interrupted run used, or the shuffle sequence will not line up.
    pub fn resume(ckpt: Checkpoint, corpus: ParallelCorpus) -> Result<Self> {
        let Checkpoint {
            gcfg,
            tcfg,
            step,
            shuffle_seed,
            encoder_params,
            decoder_params,
            disc_params,
            gen_opt,
            disc_opt,
        } = ckpt;
        gcfg.validate()?;
        tcfg.validate()?;
        check_corpus_shapes(&corpus, &gcfg)?;
        // A fresh build pins down the expected tensor names and shapes; the
        // loaded stores must agree exactly before they replace the weights.
        check_store_layout(&build_encoder::<f32>(&gcfg, 0)?.params, &encoder_params, "encoder")?;
        check_store_layout(&build_decoder::<f32>(&gcfg, 0)?.params, &decoder_params, "decoder")?;
        check_store_layout(
            &build_discriminator::<f32>(&gcfg, 0)?.params,
            &disc_params,
            "discriminator",
        )?;
        let token_weights = initial_token_weights(&corpus, &gcfg, &tcfg)?;
        Ok(Trainer {
            corpus,
            encoder: GlueNetEncoder { config: gcfg.clone(), params: encoder_params },
            decoder: GlueNetDecoder { config: gcfg.mirrored(), params: decoder_params },
            discriminator: Discriminator { config: gcfg.clone(), params: disc_params },
            gcfg,
            tcfg,
            gen_opt,
            disc_opt,
            token_weights,
            shuffle_seed,
            step,
            history: Vec::new(),
            last_finite: None,
        })
    }

    pub fn encoder(&self) -> &GlueNetEncoder<f32> {
        &self.encoder
    }

    pub fn decoder(&self) -> &GlueNetDecoder<f32> {
        &self.decoder
    }

    pub fn discriminator(&self) -> &Discriminator<f32> {
        &self.discriminator
    }

    pub fn config(&self) -> &GlueNetConfig {
        &self.gcfg
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.tcfg
    }

    /// Optimizer steps taken so far (equals batches consumed).
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Loss rows recorded by this instance (a resumed trainer starts empty).
    pub fn history(&self) -> &[LossRow] {
        &self.history
    }

    pub fn token_weights(&self) -> Option<&TokenWeightVector> {
        self.token_weights.as_ref()
    }

    /// Replace the reweighting vector; only meaningful in reweighted mode.
    pub fn set_token_weights(&mut self, w: TokenWeightVector) -> Result<()> {
        if !self.tcfg.reweight {
            return Err(Error::Config(
                "token weights can only be set when reweighting is enabled".into(),
            ));
        }
        if w.len() != self.gcfg.token_out {
            return Err(Error::Config(format!(
                "weight vector has {} entries, target sequences have {}",
                w.len(),
                self.gcfg.token_out
            )));
        }
        self.token_weights = Some(w);
        Ok(())
    }

    /// The loss history as CSV, one row per completed step.
    pub fn loss_csv(&self) -> String {
        loss_csv(&self.history)
    }

    /// Change the target step count; a resumed run uses this to continue
    /// past the total its checkpoint was saved with.
    pub fn set_steps(&mut self, steps: u64) {
        self.tcfg.steps = steps;
    }

    /// Run until `tcfg.steps`, doing nothing if already there.
    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_| Ok(()))
    }

    /// Run until `tcfg.steps`, invoking `on_checkpoint` after every
    /// `checkpoint_every`-th step (never when that is zero).
    pub fn run_with<F>(&mut self, mut on_checkpoint: F) -> Result<()>
    where
        F: FnMut(&Trainer) -> Result<()>,
    {
        while self.step < self.tcfg.steps {
            self.step_once()?;
            if self.tcfg.checkpoint_every > 0 && self.step % self.tcfg.checkpoint_every == 0 {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    /// One optimizer step: critic phase first (when `λ_adv > 0`), then the
    /// generator pair on the full objective. Aborts with [`Error::Diverged`]
    /// when the loss leaves the float range.
    pub fn step_once(&mut self) -> Result<LossRow> {
        let step = self.step + 1;
        let report = match self.step_inner() {
            Ok(report) => report,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged { step, last_finite: self.describe_last_finite() })
            }
            Err(e) => return Err(e),
        };
        let finite = [report.mse, report.adv_d, report.adv_g, report.rec, report.total]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Diverged { step, last_finite: self.describe_last_finite() });
        }
        self.step = step;
        let row = LossRow { step, report };
        self.history.push(row);
        self.last_finite = Some(row);
        Ok(row)
    }

    fn describe_last_finite(&self) -> String {
        match &self.last_finite {
            Some(row) => format!(
                "step {}: mse={} adv_d={} adv_g={} rec={} total={}",
                row.step,
                row.report.mse,
                row.report.adv_d,
                row.report.adv_g,
                row.report.rec,
                row.report.total
            ),
            None => "none".to_string(),
        }
    }

    fn step_inner(&mut self) -> Result<LossReport> {
        let lw = self.tcfg.loss_weights;
        let batch = {
            let mut it =
                batch_iter_at(&self.corpus, self.tcfg.batch_size, self.shuffle_seed, self.step)?;
            it.next().expect("batch iterator is infinite")
        };
        let mut report = LossReport::default();

        // Critic phase: update D on (real targets, detached fakes) so the
        // generator phase below faces the already-updated critic.
        if lw.lambda_adv > 0.0 {
            let mut tape: Tape<f32> = Tape::new();
            let mut reals = Vec::with_capacity(batch.target.len());
            let mut fakes = Vec::with_capacity(batch.source.len());
            for (src, tgt) in batch.source.iter().zip(&batch.target) {
                let x = tape.constant(src.clone());
                fakes.push(forward_encoder(&mut tape, &self.encoder, x)?);
                reals.push(tape.constant(tgt.clone()));
            }
            let (loss_d, _) =
                adversarial_losses(&mut tape, &self.discriminator, &reals, &fakes)?;
            report.adv_d = tape.scalar(loss_d)? as f64;
            tape.backward(loss_d, &mut [&mut self.discriminator.params])?;
            let hp = AdamWParams::from_config(&self.tcfg, self.tcfg.lr_disc);
            adamw_step(&mut [("d", &mut self.discriminator.params)], &mut self.disc_opt, &hp)?;
        }

        // Generator phase: one tape for every enabled term.
        let mut tape: Tape<f32> = Tape::new();
        let n = batch.source.len();
        let mut mse_terms = Vec::with_capacity(n);
        let mut rec_terms = Vec::with_capacity(n);
        let mut reals = Vec::with_capacity(n);
        let mut fakes = Vec::with_capacity(n);
        for (src, tgt) in batch.source.iter().zip(&batch.target) {
            let x = tape.constant(src.clone());
            let y = tape.constant(tgt.clone());
            let translated = forward_encoder(&mut tape, &self.encoder, x)?;
            if lw.lambda_mse > 0.0 {
                mse_terms.push(match &self.token_weights {
                    Some(w) => reweighted_mse_loss(&mut tape, translated, y, w)?,
                    None => mse_loss(&mut tape, translated, y)?,
                });
            }
            if lw.lambda_rec > 0.0 {
                rec_terms.push(reconstruction_loss(&mut tape, &self.decoder, translated, x)?);
            }
            reals.push(y);
            fakes.push(translated);
        }
        let mut parts: Vec<(ValueId, f64)> = Vec::new();
        if lw.lambda_mse > 0.0 {
            let mse = batch_mean(&mut tape, &mse_terms)?;
            report.mse = tape.scalar(mse)? as f64;
            parts.push((mse, lw.lambda_mse));
        }
        if lw.lambda_adv > 0.0 {
            let (_, loss_g) = adversarial_losses(&mut tape, &self.discriminator, &reals, &fakes)?;
            report.adv_g = tape.scalar(loss_g)? as f64;
            parts.push((loss_g, lw.lambda_adv));
        }
        if lw.lambda_rec > 0.0 {
            let rec = batch_mean(&mut tape, &rec_terms)?;
            report.rec = tape.scalar(rec)? as f64;
            parts.push((rec, lw.lambda_rec));
        }
        report.total = total_objective(&lw, &report);

        let mut total = None;
        for (id, lambda) in parts {
            let scaled = tape.scale(id, lambda)?;
            total = Some(match total {
                None => scaled,
                Some(acc) => tape.add(acc, scaled)?,
            });
        }
        let total_id = total.expect("validated loss weights have a positive term");

        let Trainer { encoder, decoder, discriminator, gen_opt, tcfg, .. } = self;
        let mut stores: Vec<&mut ParameterStore<f32>> = vec![&mut encoder.params];
        if lw.lambda_rec > 0.0 {
            stores.push(&mut decoder.params);
        }
        if lw.lambda_adv > 0.0 {
            stores.push(&mut discriminator.params);
        }
        tape.backward(total_id, &mut stores)?;
        drop(stores);
        let mut groups: Vec<(&str, &mut ParameterStore<f32>)> = vec![("m", &mut encoder.params)];
        if lw.lambda_rec > 0.0 {
            groups.push(("n", &mut decoder.params));
        }
        let hp = AdamWParams::from_config(tcfg, tcfg.lr);
        adamw_step(&mut groups, gen_opt, &hp)?;
        // The generator backward deposited critic gradients too (the adv_g
        // term flows through D); those must not survive into the next step.
        if lw.lambda_adv > 0.0 {
            discriminator.params.clear_grads();
        }
        Ok(report)
    }
}

/// Serialize loss rows as CSV with the canonical header.
pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,mse,adv_d,adv_g,rec,total\n");
    for row in rows {
        let r = &row.report;
        writeln!(out, "{},{},{},{},{},{}", row.step, r.mse, r.adv_d, r.adv_g, r.rec, r.total)
            .expect("string writes are infallible");
    }
    out
}

/// Train a fresh translator pair (and critic) on `corpus`.
pub fn train(
    corpus: ParallelCorpus,
    gcfg: &GlueNetConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(corpus, gcfg.clone(), tcfg.clone())?;
    trainer.run()?;
    Ok(TrainOutcome {
        encoder: trainer.encoder,
        decoder: trainer.decoder,
        discriminator: trainer.discriminator,
        history: trainer.history,
    })
}

/// Map every record of `store` through the encoder, preserving ids.
pub fn translate(enc: &GlueNetEncoder<f32>, store: &EmbeddingStore) -> Result<EmbeddingStore> {
    if store.tokens() != enc.config.token_in || store.dim() != enc.config.dim_in {
        return Err(Error::Config(format!(
            "store records are {}x{}, encoder expects {}x{}",
            store.tokens(),
            store.dim(),
            enc.config.token_in,
            enc.config.dim_in
        )));
    }
    let mut records = Vec::with_capacity(store.count());
    for i in 0..store.count() {
        let mut tape: Tape<f32> = Tape::new_inference();
        let x = tape.constant(store.record(i));
        let y = forward_encoder(&mut tape, enc, x)?;
        records.push(tape.value(y).clone());
    }
    EmbeddingStore::from_records(&records, store.ids().map(|ids| ids.to_vec()))
}

/// Round-trip each record twice through the pair and report the mean
/// per-element squared errors of the two trips.
pub fn loop_stability_eval(
    enc: &GlueNetEncoder<f32>,
    dec: &GlueNetDecoder<f32>,
    store: &EmbeddingStore,
) -> Result<LoopStability> {
    if dec.config != enc.config.mirrored() {
        return Err(Error::Config(
            "decoder does not mirror the encoder configuration".into(),
        ));
    }
    if store.tokens() != enc.config.token_in || store.dim() != enc.config.dim_in {
        return Err(Error::Config(format!(
            "store records are {}x{}, encoder expects {}x{}",
            store.tokens(),
            store.dim(),
            enc.config.token_in,
            enc.config.dim_in
        )));
    }
    let mut e1 = 0.0;
    let mut e2 = 0.0;
    for i in 0..store.count() {
        let x = store.record(i);
        let mut tape: Tape<f32> = Tape::new_inference();
        let x_id = tape.constant(x.clone());
        let encoded = forward_encoder(&mut tape, enc, x_id)?;
        let once = forward_decoder(&mut tape, dec, encoded)?;
        let re_encoded = forward_encoder(&mut tape, enc, once)?;
        let twice = forward_decoder(&mut tape, dec, re_encoded)?;
        e1 += mean_sq_diff(tape.value(once).as_slice(), x.as_slice());
        e2 += mean_sq_diff(tape.value(twice).as_slice(), tape.value(once).as_slice());
    }
    let count = store.count() as f64;
    Ok(LoopStability { e1: e1 / count, e2: e2 / count })
}

fn mean_sq_diff(a: &[f32], b: &[f32]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| {
            let d = *p as f64 - *q as f64;
            d * d
        })
        .sum();
    sum / a.len() as f64
}

fn batch_mean(tape: &mut Tape<f32>, terms: &[ValueId]) -> Result<ValueId> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

fn check_corpus_shapes(corpus: &ParallelCorpus, gcfg: &GlueNetConfig) -> Result<()> {
    if corpus.source.tokens() != gcfg.token_in || corpus.source.dim() != gcfg.dim_in {
        return Err(Error::Config(format!(
            "source store is {}x{}, encoder expects {}x{}",
            corpus.source.tokens(),
            corpus.source.dim(),
            gcfg.token_in,
            gcfg.dim_in
        )));
    }
    if corpus.target.tokens() != gcfg.token_out || corpus.target.dim() != gcfg.dim_out {
        return Err(Error::Config(format!(
            "target store is {}x{}, encoder produces {}x{}",
            corpus.target.tokens(),
            corpus.target.dim(),
            gcfg.token_out,
            gcfg.dim_out
        )));
    }
    Ok(())
}

fn initial_token_weights(
    corpus: &ParallelCorpus,
    gcfg: &GlueNetConfig,
    tcfg: &TrainConfig,
) -> Result<Option<TokenWeightVector>> {
    if !tcfg.reweight {
        return Ok(None);
    }
    let records = match &tcfg.weights_from {
        Some(path) => {
            let store = read_gge(path)?;
            if store.tokens() != gcfg.token_out || store.dim() != gcfg.dim_out {
                return Err(Error::Config(format!(
                    "weight store is {}x{}, target space is {}x{}",
                    store.tokens(),
                    store.dim(),
                    gcfg.token_out,
                    gcfg.dim_out
                )));
            }
            store.records()
        }
        None => corpus.target.records(),
    };
    Ok(Some(token_weights(&records)?))
}

fn check_store_layout(
    expected: &ParameterStore<f32>,
    loaded: &ParameterStore<f32>,
    which: &str,
) -> Result<()> {
    if expected.len() != loaded.len() {
        return Err(Error::Format {
            what: "checkpoint",
            detail: format!(
                "{which} has {} tensors, the configured model wants {}",
                loaded.len(),
                expected.len()
            ),
        });
    }
    for (name, tensor) in expected.iter() {
        let got = loaded.get(name).map_err(|_| Error::Format {
            what: "checkpoint",
            detail: format!("{which} is missing tensor `{name}`"),
        })?;
        if got.value().shape().dims() != tensor.value().shape().dims() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!(
                    "{which} tensor `{name}` has shape {}, the configured model wants {}",
                    got.value().shape(),
                    tensor.value().shape()
                ),
            });
        }
    }
    Ok(())
}
