//! Conditional variational autoencoder `p(o | c)` used to hallucinate
//! observations for contexts that were never explored.

use htm_tensor::{Activation, Adam, Checkpoint, CheckpointReader, Matrix, Mlp, MlpVars, Tape, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::TransitionDataset;
use crate::error::{HtmError, Result};
use crate::rng::{derive, stream};
use crate::train::{ensure_finite, EpochRecord, TrainingLog};
use crate::world::{encode_context, ContextEncoding, ObsMode, Observation, WorldConfig};

pub const CVAE_KIND: [u8; 4] = *b"CVAE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeConfig {
    pub latent: usize,
    pub hidden: usize,
    pub depth: usize,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Fraction of training contexts held back for model selection.
    pub validation_frac: f64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            latent: 8,
            hidden: 64,
            depth: 2,
            beta: 0.01,
            lr: 1e-3,
            epochs: 30,
            batch: 128,
            seed: 0,
            validation_frac: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeModel {
    /// `o ⊕ c → (μ, log σ²)`.
    pub encoder: Mlp,
    /// `z ⊕ c → mean observation`, sigmoid output.
    pub decoder: Mlp,
    pub latent: usize,
    pub obs_dim: usize,
    pub ctx_dim: usize,
}

/// Loss terms, each averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// A minibatch of observations with their context encodings, one per row.
#[derive(Clone, Debug)]
pub struct CvaeBatch {
    pub obs: Matrix,
    pub ctx: Matrix,
}

impl CvaeBatch {
    pub fn len(&self) -> usize {
        self.obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.rows() == 0
    }
}

fn sizes(input: usize, hidden: usize, depth: usize, output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend(std::iter::repeat_n(hidden, depth));
    s.push(output);
    s
}

/// Row-wise concatenation of two equally tall matrices.
pub(crate) fn hcat(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.rows(), b.rows());
    let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        row[..a.cols()].copy_from_slice(a.row(r));
        row[a.cols()..].copy_from_slice(b.row(r));
    }
    out
}

impl CvaeModel {
    pub fn new(obs_dim: usize, ctx_dim: usize, cfg: &CvaeConfig) -> Result<Self> {
        let mut rng = stream(cfg.seed, 0xC0AE);
        let encoder = Mlp::new(
            &sizes(obs_dim + ctx_dim, cfg.hidden, cfg.depth, 2 * cfg.latent),
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        )?;
        let decoder = Mlp::new(
            &sizes(cfg.latent + ctx_dim, cfg.hidden, cfg.depth, obs_dim),
            Activation::Tanh,
            Activation::Sigmoid,
            &mut rng,
        )?;
        Ok(Self {
            encoder,
            decoder,
            latent: cfg.latent,
            obs_dim,
            ctx_dim,
        })
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    /// Replaces every parameter, in [`CvaeModel::params`] order.
    pub fn set_params(&mut self, values: &[Matrix]) {
        for (dst, src) in self.params_mut().into_iter().zip(values) {
            *dst = src.clone();
        }
    }

    fn check_batch(&self, batch: &CvaeBatch, noise: &Matrix) -> Result<()> {
        if batch.is_empty() {
            return Err(HtmError::Empty("CVAE batch".into()));
        }
        let ok = batch.obs.cols() == self.obs_dim
            && batch.ctx.cols() == self.ctx_dim
            && batch.ctx.rows() == batch.len()
            && noise.shape() == (batch.len(), self.latent);
        if !ok {
            return Err(htm_tensor::TensorError::Shape(format!(
                "CVAE batch obs {:?} ctx {:?} noise {:?} for model obs {} ctx {} latent {}",
                batch.obs.shape(),
                batch.ctx.shape(),
                noise.shape(),
                self.obs_dim,
                self.ctx_dim,
                self.latent
            ))
            .into());
        }
        Ok(())
    }

    /// Records the negative ELBO with the reparameterised sample
    /// `z = μ + σ ⊙ noise`; returns `(total, reconstruction, kl)` nodes.
    pub fn elbo_on_tape(
        &self,
        tape: &mut Tape,
        enc: &MlpVars,
        dec: &MlpVars,
        batch: &CvaeBatch,
        noise: &Matrix,
        beta: f64,
    ) -> Result<(Var, Var, Var)> {
        self.check_batch(batch, noise)?;
        let n = batch.len() as f64;
        let l = self.latent;
        let x = tape.constant(hcat(&batch.obs, &batch.ctx));
        let h = self.encoder.forward_on_tape(tape, enc, x)?;
        let mu = tape.slice_cols(h, 0, l)?;
        let logvar = tape.slice_cols(h, l, 2 * l)?;
        let half = tape.scale(logvar, 0.5);
        let std = tape.exp(half);
        let eps = tape.constant(noise.clone());
        let spread = tape.mul(std, eps)?;
        let z = tape.add(mu, spread)?;
        let ctx = tape.constant(batch.ctx.clone());
        let dec_in = tape.concat_cols(&[z, ctx])?;
        let y = self.decoder.forward_on_tape(tape, dec, dec_in)?;
        let target = tape.constant(batch.obs.clone());
        let diff = tape.sub(y, target)?;
        let sq = tape.square(diff);
        let sse = tape.sum(sq);
        let recon = tape.scale(sse, 1.0 / n);

        let mu2 = tape.square(mu);
        let var = tape.exp(logvar);
        let a = tape.add(mu2, var)?;
        let b = tape.sub(a, logvar)?;
        let c = tape.offset(b, -1.0);
        let ksum = tape.sum(c);
        let kl = tape.scale(ksum, 0.5 / n);

        let weighted = tape.scale(kl, beta);
        let total = tape.add(recon, weighted)?;
        Ok((total, recon, kl))
    }

    /// Negative ELBO: squared reconstruction error of the decoder mean plus
    /// `beta` times the closed-form KL to `N(0, I)`.
    pub fn elbo(&self, batch: &CvaeBatch, noise: &Matrix, beta: f64) -> Result<ElboTerms> {
        let mut tape = Tape::new();
        let enc = self.encoder.bind_frozen(&mut tape);
        let dec = self.decoder.bind_frozen(&mut tape);
        let (t, r, k) = self.elbo_on_tape(&mut tape, &enc, &dec, batch, noise, beta)?;
        Ok(ElboTerms {
            total: tape.value(t).item()?,
            reconstruction: tape.value(r).item()?,
            kl: tape.value(k).item()?,
        })
    }

    /// Loss and gradients in [`CvaeModel::params`] order.
    pub fn elbo_and_grads(&self, batch: &CvaeBatch, noise: &Matrix, beta: f64) -> Result<(ElboTerms, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let enc = self.encoder.bind(&mut tape);
        let dec = self.decoder.bind(&mut tape);
        let (t, r, k) = self.elbo_on_tape(&mut tape, &enc, &dec, batch, noise, beta)?;
        let mut grads = tape.backward(t)?;
        let g = enc
            .as_slice()
            .iter()
            .chain(dec.as_slice())
            .map(|v| grads.take(*v))
            .collect();
        Ok((
            ElboTerms {
                total: tape.value(t).item()?,
                reconstruction: tape.value(r).item()?,
                kl: tape.value(k).item()?,
            },
            g,
        ))
    }

    /// Posterior mean and log-variance for each row.
    pub fn posterior(&self, batch: &CvaeBatch) -> Result<(Matrix, Matrix)> {
        let h = self.encoder.forward(&hcat(&batch.obs, &batch.ctx))?;
        let l = self.latent;
        let mut mu = Matrix::zeros(h.rows(), l);
        let mut lv = Matrix::zeros(h.rows(), l);
        for r in 0..h.rows() {
            mu.row_mut(r).copy_from_slice(&h.row(r)[..l]);
            lv.row_mut(r).copy_from_slice(&h.row(r)[l..]);
        }
        Ok((mu, lv))
    }

    /// Decoder means for latent rows `z`, clamped to `[0, 1]`.
    pub fn decode(&self, z: &Matrix, ctx: &ContextEncoding) -> Result<Matrix> {
        let ctx_rows = Matrix::from_rows(&vec![ctx.as_slice(); z.rows()])?;
        let out = self.decoder.forward(&hcat(z, &ctx_rows))?;
        Ok(out.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(CVAE_KIND);
        c.dims.extend([self.obs_dim as u32, self.ctx_dim as u32, self.latent as u32]);
        c.push_mlp(&self.encoder);
        c.push_mlp(&self.decoder);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let mut rd = CheckpointReader::new(c);
        let obs_dim = rd.dim()? as usize;
        let ctx_dim = rd.dim()? as usize;
        let latent = rd.dim()? as usize;
        let encoder = rd.mlp()?;
        let decoder = rd.mlp()?;
        rd.finish()?;
        if encoder.input_dim() != obs_dim + ctx_dim
            || encoder.output_dim() != 2 * latent
            || decoder.input_dim() != latent + ctx_dim
            || decoder.output_dim() != obs_dim
        {
            return Err(htm_tensor::TensorError::Checkpoint("CVAE dims disagree with its networks".into()).into());
        }
        Ok(Self {
            encoder,
            decoder,
            latent,
            obs_dim,
            ctx_dim,
        })
    }
}

/// `M` hallucinated observations for one context.
#[derive(Clone, Debug, PartialEq)]
pub struct HallucinationSet {
    pub context: ContextEncoding,
    pub observations: Vec<Observation>,
    pub seed: u64,
}

/// Decodes `count` draws `z ~ N(0, I)` conditioned on `ctx`.
pub fn hallucinate(
    model: &CvaeModel,
    ctx: &ContextEncoding,
    mode: ObsMode,
    count: usize,
    seed: u64,
) -> Result<HallucinationSet> {
    let mut observations = Vec::with_capacity(count);
    if count > 0 {
        let mut rng = stream(seed, 0x4A11);
        let z = Matrix::from_vec(
            count,
            model.latent,
            (0..count * model.latent).map(|_| rng.sample(StandardNormal)).collect(),
        )?;
        let out = model.decode(&z, ctx)?;
        for r in 0..count {
            observations.push(Observation::new(mode, out.row(r).to_vec()));
        }
    }
    Ok(HallucinationSet {
        context: ctx.clone(),
        observations,
        seed,
    })
}

/// Every observation of the dataset with its context encoding, grouped by
/// context id.
pub(crate) fn observation_pool(data: &TransitionDataset, world: &WorldConfig) -> Vec<(u64, Vec<f64>, Vec<f64>)> {
    let mut pool = Vec::new();
    for ctx in &data.contexts {
        let enc = encode_context(ctx, world, data.mode);
        for &ti in data.trajectories_of(ctx.id) {
            for o in &data.trajectories[ti].observations {
                pool.push((ctx.id, o.data.clone(), enc.0.clone()));
            }
        }
    }
    pool
}

fn make_batch(rows: &[&(u64, Vec<f64>, Vec<f64>)]) -> Result<CvaeBatch> {
    let obs: Vec<&[f64]> = rows.iter().map(|r| r.1.as_slice()).collect();
    let ctx: Vec<&[f64]> = rows.iter().map(|r| r.2.as_slice()).collect();
    Ok(CvaeBatch {
        obs: Matrix::from_rows(&obs)?,
        ctx: Matrix::from_rows(&ctx)?,
    })
}

fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
        .expect("sized")
}

/// Splits context ids into (train, validation) deterministically.
pub(crate) fn split_contexts(ids: &[u64], frac: f64, seed: u64) -> (Vec<u64>, Vec<u64>) {
    let mut ids = ids.to_vec();
    ids.shuffle(&mut stream(seed, 0x5911));
    let n_val = if ids.len() < 2 {
        0
    } else {
        ((ids.len() as f64 * frac).round() as usize).clamp(1, ids.len() - 1)
    };
    let val = ids.split_off(ids.len() - n_val);
    (ids, val)
}

/// Mean validation negative ELBO with a fixed noise stream.
fn validation_elbo(model: &CvaeModel, val: &[&(u64, Vec<f64>, Vec<f64>)], cfg: &CvaeConfig) -> Result<f64> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let mut rng = stream(derive(cfg.seed, 0x7A1), 0);
    let mut total = 0.0;
    for chunk in val.chunks(cfg.batch.max(1)) {
        let batch = make_batch(chunk)?;
        let noise = standard_normal(batch.len(), model.latent, &mut rng);
        total += model.elbo(&batch, &noise, cfg.beta)?.total * batch.len() as f64;
    }
    Ok(total / val.len() as f64)
}

/// Fits the CVAE on every observation of `data`; returns the parameters
/// with the best validation loss.
pub fn train_cvae(data: &TransitionDataset, world: &WorldConfig, cfg: &CvaeConfig) -> Result<(CvaeModel, TrainingLog)> {
    let pool = observation_pool(data, world);
    if pool.is_empty() {
        return Err(HtmError::Empty("CVAE training data".into()));
    }
    let ids: Vec<u64> = data.contexts.iter().map(|c| c.id).collect();
    let (_, val_ids) = split_contexts(&ids, cfg.validation_frac, cfg.seed);
    let (val, mut train): (Vec<_>, Vec<_>) = pool.iter().partition(|r| val_ids.contains(&r.0));
    if train.is_empty() {
        train = val.clone();
    }
    let obs_dim = pool[0].1.len();
    let ctx_dim = pool[0].2.len();
    let mut model = CvaeModel::new(obs_dim, ctx_dim, cfg)?;
    let mut opt = Adam::new(&model.params(), cfg.lr);
    let mut rng = stream(cfg.seed, 0x7EA1);
    let mut log = TrainingLog::default();

    let initial = validation_elbo(&model, &val, cfg)?;
    log.epochs.push(EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss: initial,
        extra: None,
    });
    let mut best = (initial, model.params().into_iter().cloned().collect::<Vec<_>>());
    for epoch in 1..=cfg.epochs {
        train.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in train.chunks(cfg.batch.max(1)) {
            let batch = make_batch(chunk)?;
            let noise = standard_normal(batch.len(), model.latent, &mut rng);
            let (terms, grads) = model.elbo_and_grads(&batch, &noise, cfg.beta)?;
            ensure_finite("CVAE loss", terms.total, epoch)?;
            opt.step(&mut model.params_mut(), &grads)?;
            sum += terms.total * batch.len() as f64;
        }
        let train_loss = sum / train.len() as f64;
        let val_loss = validation_elbo(&model, &val, cfg)?;
        ensure_finite("CVAE validation loss", if val.is_empty() { train_loss } else { val_loss }, epoch)?;
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(HtmError::Divergence(format!("CVAE parameters non-finite at epoch {epoch}")));
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: Some(train_loss),
            val_loss,
            extra: None,
        });
        let score = if val.is_empty() { train_loss } else { val_loss };
        if !(score >= best.0) {
            best = (score, model.params().into_iter().cloned().collect());
        }
    }
    model.set_params(&best.1);
    Ok((model, log))
}
