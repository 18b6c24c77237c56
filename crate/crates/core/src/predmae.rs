//! Future-frame prediction pretraining from tube-masked past frames.
//!
//! The encoder sees only the visible tubes of the past clip. A joint
//! attention decoder then receives the classification token, the complete
//! past grid (encoder outputs at visible slots, a shared learned mask token
//! plus positional embeddings elsewhere) and one query per future patch,
//! and regresses the raw pixels of the next clip.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::clip::{unpatchify, ClipTensor, Frames};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::{lookup, LayerNormParams, LinearParams, TransformerBlock};
use crate::optim::{adamw_step, cosine_lr, scaled_lr, AdamWConfig, OptimizerState};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const DECODER_DEPTH: usize = 4;

/// Spatial indices hidden in every frame of a clip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TubeMask {
    masked: Vec<bool>,
}

impl TubeMask {
    pub fn spatial(&self) -> usize {
        self.masked.len()
    }

    pub fn is_masked(&self, s: usize) -> bool {
        self.masked[s]
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn masked(&self) -> Vec<usize> {
        (0..self.spatial()).filter(|&s| self.masked[s]).collect()
    }

    pub fn visible(&self) -> Vec<usize> {
        (0..self.spatial()).filter(|&s| !self.masked[s]).collect()
    }
}

/// `round(ratio·S)` with ties to even.
pub fn masked_count(spatial: usize, ratio: f64) -> usize {
    (ratio * spatial as f64).round_ties_even() as usize
}

/// Masks a uniformly random subset of `round(ratio·S)` spatial indices.
pub fn tube_mask(spatial: usize, ratio: f64, rng: &mut SeedRng) -> Result<TubeMask> {
    if spatial == 0 {
        return Err(Error::Contract("tube mask needs at least one spatial index".into()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Contract(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let mut masked = vec![false; spatial];
    for s in rng.subset(spatial, masked_count(spatial, ratio)) {
        masked[s] = true;
    }
    Ok(TubeMask { masked })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
}

impl DecoderConfig {
    /// Matches the encoder width and head count.
    pub fn for_encoder(encoder: &Encoder) -> Self {
        Self {
            depth: DECODER_DEPTH,
            width: encoder.config().d_model,
            heads: encoder.config().heads,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    mask_token: ParamId,
    future_temporal: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNormParams,
    head: LinearParams,
}

const PREFIX: &str = "decoder";

impl Decoder {
    fn check(config: &DecoderConfig, encoder: &Encoder) -> Result<()> {
        let d = encoder.config().d_model;
        if config.depth != DECODER_DEPTH {
            return Err(Error::Config(format!("decoder depth must be {DECODER_DEPTH}, got {}", config.depth)));
        }
        if config.width != d {
            return Err(Error::Config(format!(
                "decoder width {} differs from encoder width {d}",
                config.width
            )));
        }
        if config.heads == 0 || !config.width.is_multiple_of(config.heads) {
            return Err(Error::Config(format!(
                "decoder width {} not divisible by {} heads",
                config.width, config.heads
            )));
        }
        Ok(())
    }

    pub fn init<T: Real>(
        config: DecoderConfig,
        encoder: &Encoder,
        store: &mut ParamStore<T>,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        Self::check(&config, encoder)?;
        let ec = encoder.config();
        let d = config.width;
        Ok(Self {
            mask_token: store.init_weight(&format!("{PREFIX}.mask_token"), &[1, d], rng)?,
            future_temporal: store.init_weight(&format!("{PREFIX}.future_temporal"), &[ec.frames, d], rng)?,
            blocks: (0..config.depth)
                .map(|i| TransformerBlock::init(store, &format!("{PREFIX}.block{i}"), d, rng))
                .collect::<Result<_>>()?,
            norm: LayerNormParams::init(store, &format!("{PREFIX}.norm"), d)?,
            head: LinearParams::init(store, &format!("{PREFIX}.head"), d, ec.patch_dim(), rng)?,
            config,
        })
    }

    pub fn from_store<T: Real>(config: DecoderConfig, encoder: &Encoder, store: &ParamStore<T>) -> Result<Self> {
        Self::check(&config, encoder)?;
        let dec = Self {
            mask_token: lookup(store, &format!("{PREFIX}.mask_token"))?,
            future_temporal: lookup(store, &format!("{PREFIX}.future_temporal"))?,
            blocks: (0..config.depth)
                .map(|i| TransformerBlock::lookup(store, &format!("{PREFIX}.block{i}")))
                .collect::<Result<_>>()?,
            norm: LayerNormParams::lookup(store, &format!("{PREFIX}.norm"))?,
            head: LinearParams::lookup(store, &format!("{PREFIX}.head"))?,
            config,
        };
        let want = [encoder.config().patch_dim()];
        if store.get(dec.head.bias).shape() != want {
            return Err(Error::Config("decoder head does not match the encoder patch size".into()));
        }
        Ok(dec)
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn head(&self) -> LinearParams {
        self.head
    }
}

/// Predicted future patches, `[batch·F·S, P²·3]` in (clip, frame, slot) order.
pub fn predict_future_patches<T: Real>(
    encoder: &Encoder,
    decoder: &Decoder,
    tape: &mut Tape<T>,
    p: &Bound,
    past: &[ClipTensor],
    masks: &[TubeMask],
) -> Result<Var> {
    let ec = encoder.config();
    let (batch, frames, spatial) = (past.len(), ec.frames, ec.spatial());
    if masks.len() != batch {
        return Err(Error::Contract(format!("{} masks for {batch} clips", masks.len())));
    }
    if masks.iter().any(|m| m.spatial() != spatial) {
        return Err(Error::Config(format!("tube masks must cover {spatial} spatial indices")));
    }
    let visible: Vec<Vec<usize>> = masks.iter().map(TubeMask::visible).collect();
    let tokens = encoder.patch_embed(tape, p, past, Some(&visible))?;
    let tokens = encoder.encode_tokens(tape, p, tokens)?;
    let n_vis = tokens.visible;
    let n_mask = spatial - n_vis;

    // Mask tokens for hidden slots, in (clip, frame, hidden slot) order.
    let mut ms_idx = Vec::with_capacity(batch * frames * n_mask);
    let mut mt_idx = Vec::with_capacity(batch * frames * n_mask);
    for m in masks {
        let hidden = m.masked();
        for t in 0..frames {
            for &s in &hidden {
                ms_idx.push(s);
                mt_idx.push(t);
            }
        }
    }
    // Future queries in (clip, frame, slot) order.
    let fs_idx: Vec<usize> = (0..batch * frames * spatial).map(|i| i % spatial).collect();
    let ft_idx: Vec<usize> = (0..batch * frames * spatial).map(|i| (i / spatial) % frames).collect();
    let future = {
        let t = tape.gather_rows(p[decoder.future_temporal], &ft_idx)?;
        let s = tape.gather_rows(p[encoder.pos_spatial()], &fs_idx)?;
        tape.add(t, s)?
    };

    let mut parts = vec![tokens.cls];
    let grid_base = batch;
    if let Some(g) = tokens.grid {
        parts.push(g);
    }
    let mask_base = grid_base + batch * frames * n_vis;
    if n_mask > 0 {
        let tok = tape.gather_rows(p[decoder.mask_token], &vec![0; ms_idx.len()])?;
        let s = tape.gather_rows(p[encoder.pos_spatial()], &ms_idx)?;
        let t = tape.gather_rows(p[encoder.pos_temporal()], &mt_idx)?;
        let x = tape.add(tok, s)?;
        parts.push(tape.add(x, t)?);
    }
    let future_base = mask_base + batch * frames * n_mask;
    parts.push(future);
    let all = tape.concat(&parts, 0)?;

    // Per clip: [cls, past grid in (frame, slot) order, future grid].
    let seq = 1 + 2 * frames * spatial;
    let mut order = Vec::with_capacity(batch * seq);
    for (b, m) in masks.iter().enumerate() {
        order.push(b);
        for t in 0..frames {
            let (mut vi, mut hi) = (0, 0);
            for s in 0..spatial {
                if m.is_masked(s) {
                    order.push(mask_base + (b * frames + t) * n_mask + hi);
                    hi += 1;
                } else {
                    order.push(grid_base + (b * frames + t) * n_vis + vi);
                    vi += 1;
                }
            }
        }
        for i in 0..frames * spatial {
            order.push(future_base + b * frames * spatial + i);
        }
    }
    let mut x = tape.gather_rows(all, &order)?;
    for block in &decoder.blocks {
        x = block.apply(tape, p, x, batch, seq, decoder.config.heads)?;
    }
    let future_rows: Vec<usize> = (0..batch)
        .flat_map(|b| (0..frames * spatial).map(move |i| b * seq + 1 + frames * spatial + i))
        .collect();
    let y = tape.gather_rows(x, &future_rows)?;
    let y = decoder.norm.apply(tape, p, y)?;
    decoder.head.apply(tape, p, y)
}

/// Predicted future frames, one per past clip.
pub fn predict_future(
    encoder: &Encoder,
    decoder: &Decoder,
    params: &ParamStore<f32>,
    past: &[ClipTensor],
    masks: &[TubeMask],
) -> Result<Vec<Frames>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let out = predict_future_patches(encoder, decoder, &mut tape, &p, past, masks)?;
    let ec = encoder.config();
    let per_clip = ec.frames * ec.image_size * ec.image_size * 3;
    tape.value(out)
        .data()
        .chunks(per_clip)
        .map(|rows| unpatchify(rows, ec.frames, ec.image_size, ec.image_size, ec.patch))
        .collect()
}

/// Mean squared error over every frame, pixel and channel.
pub fn predmae_loss(pred: &Frames, gt: &Frames) -> Result<f64> {
    let same = pred.len() == gt.len() && pred.height() == gt.height() && pred.width() == gt.width();
    if !same {
        return Err(Error::shape(
            "predmae_loss",
            &[pred.len(), pred.height(), pred.width()],
            &[gt.len(), gt.height(), gt.width()],
        ));
    }
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// Past and future clips cut from the same video at one offset.
#[derive(Clone, Debug)]
pub struct PredPair {
    pub past: ClipTensor,
    pub future: ClipTensor,
}

/// Draws a video and an offset `o` with `o + 2F ≤ len`.
pub fn sample_pair(videos: &[Frames], clip_len: usize, rng: &mut SeedRng) -> Result<PredPair> {
    let usable: Vec<&Frames> = videos.iter().filter(|v| v.len() >= 2 * clip_len).collect();
    if usable.is_empty() {
        return Err(Error::Sampling(format!("no video has the {} frames a pair needs", 2 * clip_len)));
    }
    let v = usable[rng.below(usable.len())];
    let o = rng.int_in(0, v.len() - 2 * clip_len);
    Ok(PredPair {
        past: ClipTensor::new(v.window(o, clip_len)?),
        future: ClipTensor::new(v.window(o + clip_len, clip_len)?),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub mask_ratio: f64,
    /// Learning rate before the `batch / 256` scaling rule.
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 4,
            mask_ratio: 0.9,
            base_lr: 5e-4,
            weight_decay: 0.05,
            seed: 42,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if [self.base_lr, self.weight_decay].iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Config("learning rate and weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Encoder and decoder weights in one store.
pub struct PredMae {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub params: ParamStore<f32>,
}

impl PredMae {
    pub fn init(encoder_config: crate::encoder::ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = SeedRng::new(seed).fork(0x7072_6564);
        let mut params = ParamStore::new();
        let encoder = Encoder::init(encoder_config, &mut params, &mut rng)?;
        let decoder = Decoder::init(DecoderConfig::for_encoder(&encoder), &encoder, &mut params, &mut rng)?;
        Ok(Self {
            encoder,
            decoder,
            params,
        })
    }

    /// Mean loss over a batch of pairs with the given masks.
    pub fn batch_loss(&self, pairs: &[PredPair], masks: &[TubeMask]) -> Result<f64> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape, false);
        let loss = self.loss_on_tape(&mut tape, &p, pairs, masks)?;
        Ok(tape.value(loss).item() as f64)
    }

    fn loss_on_tape(&self, tape: &mut Tape<f32>, p: &Bound, pairs: &[PredPair], masks: &[TubeMask]) -> Result<Var> {
        let past: Vec<ClipTensor> = pairs.iter().map(|x| x.past.clone()).collect();
        let pred = predict_future_patches(&self.encoder, &self.decoder, tape, p, &past, masks)?;
        let pd = self.encoder.config().patch_dim();
        let target: Vec<f32> = pairs.iter().flat_map(|x| x.future.patchify(self.encoder.config().patch)).collect();
        let rows = target.len() / pd;
        let target = tape.constant(Tensor::new(vec![rows, pd], target)?);
        tape.mse(pred, target)
    }
}

/// Loss at every step, in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve(pub Vec<f64>);

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.0.iter().enumerate() {
            let _ = writeln!(out, "{i},{l:.8}");
        }
        out
    }
}

/// Draws a batch of pairs and masks from `rng`.
pub fn sample_batch(
    videos: &[Frames],
    model: &PredMae,
    batch: usize,
    ratio: f64,
    rng: &mut SeedRng,
) -> Result<(Vec<PredPair>, Vec<TubeMask>)> {
    let c = model.encoder.config();
    let pairs = (0..batch).map(|_| sample_pair(videos, c.frames, rng)).collect::<Result<Vec<_>>>()?;
    let masks = (0..batch).map(|_| tube_mask(c.spatial(), ratio, rng)).collect::<Result<Vec<_>>>()?;
    Ok((pairs, masks))
}

/// Runs `config.steps` AdamW steps with a cosine schedule. The loss at
/// step `i` is measured before that step's update.
pub fn pretrain_run(model: &mut PredMae, videos: &[Frames], config: &PretrainConfig) -> Result<LossCurve> {
    config.validate()?;
    let mut optimizer = OptimizerState::new(
        &model.params,
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let lr0 = scaled_lr(config.base_lr, config.batch);
    let mut rng = SeedRng::new(config.seed).fork(0x6d61_736b);
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (pairs, masks) = sample_batch(videos, model, config.batch, config.mask_ratio, &mut rng)?;
        let mut tape = Tape::<f32>::new();
        let p = model.params.bind(&mut tape, true);
        let loss = model.loss_on_tape(&mut tape, &p, &pairs, &masks).map_err(|e| match e {
            Error::Numeric { location } => Error::Training {
                step,
                reason: format!("non-finite activations in {location}"),
            },
            other => other,
        })?;
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("loss is {value}"),
            });
        }
        let grads = tape.backward(loss)?;
        let per_param: Vec<Option<&Tensor<f32>>> = p.vars().iter().map(|&v| grads.get(v)).collect();
        let lr = cosine_lr(step, config.steps, lr0)?;
        adamw_step(&mut model.params, &per_param, &mut optimizer, lr).map_err(|e| match e {
            Error::NonFiniteGradient { name } => Error::Training {
                step,
                reason: format!("non-finite gradient for `{name}`"),
            },
            other => other,
        })?;
        if step % 20 == 0 {
            log::info!("pretrain step {step} loss {value:.6} lr {lr:.3e}");
        }
        curve.push(value);
    }
    Ok(LossCurve(curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;

    fn video(len: usize, seed: u64) -> Frames {
        let mut rng = SeedRng::new(seed);
        Frames::new(len, 16, 16, (0..len * 768).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    fn fine() -> ModelConfig {
        ModelConfig {
            patch: 4,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn mask_counts() {
        let mut rng = SeedRng::new(1);
        assert_eq!(tube_mask(16, 0.0, &mut rng).unwrap().masked_count(), 0);
        assert_eq!(tube_mask(16, 1.0, &mut rng).unwrap().masked_count(), 16);
        assert_eq!(tube_mask(16, 0.9, &mut rng).unwrap().masked_count(), 14);
        assert_eq!(masked_count(4, 0.625), 2);
        assert_eq!(masked_count(4, 0.875), 4);
        assert!(matches!(tube_mask(16, 1.5, &mut rng), Err(Error::Contract(_))));
        let a = tube_mask(16, 0.5, &mut SeedRng::new(9)).unwrap();
        let b = tube_mask(16, 0.5, &mut SeedRng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_examples() {
        let gt = Frames::new(1, 1, 1, vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(predmae_loss(&gt, &gt).unwrap(), 0.0);
        let shifted = Frames::new(1, 1, 1, vec![0.75, 0.75, 0.75]).unwrap();
        assert!((predmae_loss(&shifted, &gt).unwrap() - 0.0625).abs() < 1e-12);
        let other = Frames::new(2, 1, 1, vec![0.5; 6]).unwrap();
        assert!(predmae_loss(&other, &gt).is_err());
    }

    #[test]
    fn prediction_shape_and_determinism() {
        let model = PredMae::init(fine(), 3).unwrap();
        let vids = [video(20, 1)];
        let mut rng = SeedRng::new(5);
        let (pairs, masks) = sample_batch(&vids, &model, 2, 0.9, &mut rng).unwrap();
        let past: Vec<ClipTensor> = pairs.iter().map(|p| p.past.clone()).collect();
        let a = predict_future(&model.encoder, &model.decoder, &model.params, &past, &masks).unwrap();
        let b = predict_future(&model.encoder, &model.decoder, &model.params, &past, &masks).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!((a[0].len(), a[0].height(), a[0].width()), (8, 16, 16));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_head_predicts_bias_image() {
        let mut model = PredMae::init(fine(), 3).unwrap();
        let head = model.decoder.head();
        let w = model.params.get(head.weight).shape().to_vec();
        *model.params.get_mut(head.weight) = Tensor::zeros(&w);
        let bias: Vec<f32> = (0..48).map(|i| i as f32 / 48.0).collect();
        *model.params.get_mut(head.bias) = Tensor::new(vec![48], bias.clone()).unwrap();
        let vids = [video(20, 1), video(20, 2)];
        let (pairs, masks) = sample_batch(&vids, &model, 2, 0.5, &mut SeedRng::new(8)).unwrap();
        let past: Vec<ClipTensor> = pairs.iter().map(|p| p.past.clone()).collect();
        let out = predict_future(&model.encoder, &model.decoder, &model.params, &past, &masks).unwrap();
        let rows = unpatchify(&bias.repeat(8 * 16), 8, 16, 16, 4).unwrap();
        assert_eq!(out[0], rows);
        assert_eq!(out[1], rows);
    }

    #[test]
    fn all_tubes_masked_is_supported() {
        let model = PredMae::init(ModelConfig::toy(), 3).unwrap();
        let vids = [video(16, 1)];
        let (pairs, masks) = sample_batch(&vids, &model, 1, 0.9, &mut SeedRng::new(1)).unwrap();
        assert_eq!(masks[0].masked_count(), 4);
        assert!(model.batch_loss(&pairs, &masks).unwrap().is_finite());
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let mut model = PredMae::init(fine(), 3).unwrap();
        let before = model.params.clone();
        let cfg = PretrainConfig {
            steps: 0,
            ..PretrainConfig::default()
        };
        let curve = pretrain_run(&mut model, &[video(16, 1)], &cfg).unwrap();
        assert!(curve.0.is_empty());
        assert_eq!(model.params.values(), before.values());
    }

    #[test]
    fn curve_length_matches_steps() {
        let mut model = PredMae::init(fine(), 3).unwrap();
        let cfg = PretrainConfig {
            steps: 2,
            batch: 1,
            ..PretrainConfig::default()
        };
        let curve = pretrain_run(&mut model, &[video(16, 1)], &cfg).unwrap();
        assert_eq!(curve.0.len(), 2);
        assert!(curve.to_csv().starts_with("step,loss\n0,"));
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::init(ModelConfig::toy(), &mut store, &mut SeedRng::new(1)).unwrap();
        let cfg = DecoderConfig {
            width: 64,
            ..DecoderConfig::for_encoder(&enc)
        };
        assert!(matches!(
            Decoder::init(cfg, &enc, &mut store, &mut SeedRng::new(1)),
            Err(Error::Config(_))
        ));
    }
}
