//! Self-supervised similarity learning on clip embeddings.
//!
//! Each training video yields an anchor clip, a positive clip that overlaps
//! it (optionally with a ShotMix cut spliced over one end) and the mirrored
//! positive. A multi-similarity loss with hard mining pulls anchors towards
//! their positives and away from other clips in the batch and in a FIFO
//! memory bank; the flipped-clip hinge keeps the mirrored positive farther
//! from the anchor than the plain one.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clip::{ClipTensor, Frames};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::optim::{adamw_step, cosine_lr, scaled_lr, AdamWConfig, OptimizerState};
use crate::params::ParamStore;
use crate::rng::SeedRng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Which end of the positive window the cut overwrites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CutEnd {
    Begin,
    End,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipSampleSpec {
    pub video_len: usize,
    pub clip_len: usize,
    pub anchor_start: usize,
    pub positive_start: usize,
    /// Overlap ratio; exactly 1 when the video is too short for ShotMix.
    pub ratio: f64,
    pub cut_start: usize,
    pub cut_len: usize,
    pub cut_end: CutEnd,
}

impl ClipSampleSpec {
    /// `⌈r·F⌉`.
    pub fn overlap(&self) -> usize {
        overlap_frames(self.ratio, self.clip_len)
    }

    /// Largest admissible cut, `⌊(1−r)·F⌋`.
    pub fn max_cut(&self) -> usize {
        self.clip_len - self.overlap()
    }

    /// The same windows with no cut.
    pub fn without_cut(mut self) -> Self {
        self.cut_len = 0;
        self.cut_start = 0;
        self
    }

    pub fn anchor_indices(&self) -> Vec<usize> {
        (self.anchor_start..self.anchor_start + self.clip_len).collect()
    }

    /// Source frame index of every positive frame after the cut is applied.
    pub fn positive_indices(&self) -> Vec<usize> {
        let f = self.clip_len;
        let mut idx: Vec<usize> = (self.positive_start..self.positive_start + f).collect();
        let cut = self.cut_start..self.cut_start + self.cut_len;
        let slots = match self.cut_end {
            CutEnd::Begin => 0..self.cut_len,
            CutEnd::End => f - self.cut_len..f,
        };
        for (slot, src) in slots.zip(cut) {
            idx[slot] = src;
        }
        idx
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.clip_len;
        let fits = |start: usize, len: usize| start + len <= self.video_len;
        let shared = overlap_len(self.anchor_start, self.positive_start, f);
        let ok = f > 0
            && self.ratio > 0.7
            && self.ratio <= 1.0
            && fits(self.anchor_start, f)
            && fits(self.positive_start, f)
            && fits(self.cut_start, self.cut_len)
            && shared == self.overlap()
            && self.cut_len <= self.max_cut();
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("invalid clip sample spec {self:?}")))
        }
    }
}

fn overlap_frames(ratio: f64, clip_len: usize) -> usize {
    ((ratio * clip_len as f64).ceil() as usize).min(clip_len)
}

fn overlap_len(a: usize, b: usize, f: usize) -> usize {
    let lo = a.max(b);
    let hi = (a + f).min(b + f);
    hi.saturating_sub(lo)
}

/// Draws anchor/positive windows and a ShotMix cut for a video of
/// `video_len` frames. Videos shorter than `2·clip_len` get the anchor
/// window as positive and no cut.
pub fn shotmix_sample(video_len: usize, clip_len: usize, rng: &mut SeedRng) -> Result<ClipSampleSpec> {
    if clip_len == 0 || video_len < clip_len {
        return Err(Error::Sampling(format!(
            "video of {video_len} frames cannot supply a {clip_len}-frame clip"
        )));
    }
    if video_len < 2 * clip_len {
        let start = rng.int_in(0, video_len - clip_len);
        return Ok(ClipSampleSpec {
            video_len,
            clip_len,
            anchor_start: start,
            positive_start: start,
            ratio: 1.0,
            cut_start: 0,
            cut_len: 0,
            cut_end: CutEnd::End,
        });
    }
    let ratio = rng.open_range(0.7, 1.0);
    let shift = clip_len - overlap_frames(ratio, clip_len);
    let lo = rng.int_in(0, video_len - clip_len - shift);
    let (anchor_start, positive_start) = if rng.coin(0.5) { (lo, lo + shift) } else { (lo + shift, lo) };
    let cut_len = rng.int_in(0, shift);
    let cut_start = rng.int_in(0, video_len - cut_len);
    let cut_end = if rng.coin(0.5) { CutEnd::Begin } else { CutEnd::End };
    Ok(ClipSampleSpec {
        video_len,
        clip_len,
        anchor_start,
        positive_start,
        ratio,
        cut_start,
        cut_len,
        cut_end,
    })
}

/// Materializes the anchor and positive clips described by `spec`.
pub fn apply_spec(video: &Frames, spec: &ClipSampleSpec) -> Result<(ClipTensor, ClipTensor)> {
    if spec.video_len != video.len() {
        return Err(Error::Contract(format!(
            "spec drawn for {} frames applied to a {}-frame video",
            spec.video_len,
            video.len()
        )));
    }
    spec.validate()?;
    let anchor = video.select(&spec.anchor_indices())?;
    let positive = video.select(&spec.positive_indices())?;
    Ok((ClipTensor::new(anchor), ClipTensor::new(positive)))
}

/// Mirrors every frame of a clip left to right.
pub fn hflip(clip: &ClipTensor) -> ClipTensor {
    clip.hflip()
}

/// Indices selected by hard mining for one anchor.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Mined {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl Mined {
    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }
}

/// Keeps negatives above `min(S⁺) + ε` and positives below `max(S⁻) − ε`.
pub fn mine_pairs(sims: &[f64], is_positive: &[bool], epsilon: f64) -> Result<Mined> {
    if sims.len() != is_positive.len() {
        return Err(Error::shape("mine_pairs", &[sims.len()], &[is_positive.len()]));
    }
    let pick = |want: bool| sims.iter().zip(is_positive).filter(move |(_, &p)| p == want).map(|(&s, _)| s);
    let (Some(min_pos), Some(max_neg)) = (pick(true).reduce(f64::min), pick(false).reduce(f64::max)) else {
        return Ok(Mined::default());
    };
    let mut mined = Mined::default();
    for (k, (&s, &p)) in sims.iter().zip(is_positive).enumerate() {
        if p && s < max_neg - epsilon {
            mined.positives.push(k);
        } else if !p && s > min_pos + epsilon {
            mined.negatives.push(k);
        }
    }
    Ok(mined)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub w1: f64,
    pub w2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 50.0,
            lambda: 1.0,
            epsilon: 0.1,
            gamma: 0.1,
            w1: 1.0,
            w2: 0.01,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.lambda, self.epsilon, self.gamma, self.w1, self.w2];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("loss hyper-parameters must be finite".into()));
        }
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(Error::Config(format!(
                "alpha and beta must be positive, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.w1 < 0.0 || self.w2 < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be >= 0, got {} and {}",
                self.w1, self.w2
            )));
        }
        Ok(())
    }
}

/// `log(1 + Σ exp(zₖ))` and its gradient `∂/∂zₖ`, computed stably.
fn softplus_sum(z: &[f64]) -> (f64, Vec<f64>) {
    if z.is_empty() {
        return (0.0, Vec::new());
    }
    let m = z.iter().copied().fold(0.0, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let denom = (-m).exp() + e.iter().sum::<f64>();
    (m + denom.ln(), e.iter().map(|v| v / denom).collect())
}

/// Multi-similarity loss averaged over the `M = sims.len()` anchors, with
/// its gradient with respect to every entry of `sims`.
pub fn ms_loss(sims: &[Vec<f64>], mined: &[Mined], cfg: &LossConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    cfg.validate()?;
    if sims.len() != mined.len() {
        return Err(Error::shape("ms_loss", &[sims.len()], &[mined.len()]));
    }
    let mut grads: Vec<Vec<f64>> = sims.iter().map(|row| vec![0.0; row.len()]).collect();
    if sims.is_empty() {
        return Ok((0.0, grads));
    }
    let inv_m = 1.0 / sims.len() as f64;
    let mut total = 0.0;
    for ((row, sets), g) in sims.iter().zip(mined).zip(grads.iter_mut()) {
        if sets.positives.iter().chain(&sets.negatives).any(|&k| k >= row.len()) {
            return Err(Error::Contract("mined index outside the similarity row".into()));
        }
        let zp: Vec<f64> = sets.positives.iter().map(|&k| -cfg.alpha * (row[k] - cfg.lambda)).collect();
        let (lp, dp) = softplus_sum(&zp);
        for (&k, d) in sets.positives.iter().zip(dp) {
            g[k] -= d * inv_m;
        }
        let zn: Vec<f64> = sets.negatives.iter().map(|&k| cfg.beta * (row[k] - cfg.lambda)).collect();
        let (ln, dn) = softplus_sum(&zn);
        for (&k, d) in sets.negatives.iter().zip(dn) {
            g[k] += d * inv_m;
        }
        total += lp / cfg.alpha + ln / cfg.beta;
    }
    Ok((total * inv_m, grads))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity and its gradients with respect to both arguments.
fn cosine_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    let c = dot(a, b) / (na * nb);
    let ga = a.iter().zip(b).map(|(&x, &y)| y / (na * nb) - c * x / (na * na)).collect();
    let gb = a.iter().zip(b).map(|(&x, &y)| x / (na * nb) - c * y / (nb * nb)).collect();
    (c, ga, gb)
}

/// Gradients of [`fcs_loss`] with respect to its three inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FcsGrads {
    pub anchor: Vec<Vec<f64>>,
    pub positive: Vec<Vec<f64>>,
    pub flipped: Vec<Vec<f64>>,
}

/// Mean hinge `max(D(a,p) − D(a,p_f) + γ, 0)` with cosine distance
/// `D = 1 − cos`. The subgradient at the hinge boundary is zero.
pub fn fcs_loss(
    anchor: &[Vec<f64>],
    positive: &[Vec<f64>],
    flipped: &[Vec<f64>],
    gamma: f64,
) -> Result<(f64, FcsGrads)> {
    let n = anchor.len();
    if positive.len() != n || flipped.len() != n {
        return Err(Error::shape("fcs_loss", &[n, positive.len()], &[n, flipped.len()]));
    }
    if n == 0 {
        return Err(Error::Contract("fcs_loss needs at least one triplet".into()));
    }
    let zeros = |rows: &[Vec<f64>]| rows.iter().map(|r| vec![0.0; r.len()]).collect::<Vec<_>>();
    let mut grads = FcsGrads {
        anchor: zeros(anchor),
        positive: zeros(positive),
        flipped: zeros(flipped),
    };
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let (a, p, f) = (&anchor[i], &positive[i], &flipped[i]);
        if p.len() != a.len() || f.len() != a.len() {
            return Err(Error::shape("fcs_loss", &[a.len()], &[p.len(), f.len()]));
        }
        let (cp, gap, gp) = cosine_with_grad(a, p);
        let (cf, gaf, gf) = cosine_with_grad(a, f);
        let hinge = (1.0 - cp) - (1.0 - cf) + gamma;
        if hinge > 0.0 {
            total += hinge;
            for j in 0..a.len() {
                grads.anchor[i][j] = (gaf[j] - gap[j]) * inv_n;
                grads.positive[i][j] = -gp[j] * inv_n;
                grads.flipped[i][j] = gf[j] * inv_n;
            }
        }
    }
    Ok((total * inv_n, grads))
}

/// `w1·ms + w2·fcs`.
pub fn combined_loss(ms: f64, fcs: f64, w1: f64, w2: f64) -> Result<f64> {
    if !(w1 >= 0.0 && w2 >= 0.0) {
        return Err(Error::Config(format!("loss weights must be >= 0, got {w1} and {w2}")));
    }
    Ok(w1 * ms + w2 * fcs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub embedding: Vec<f32>,
    /// Index of the training video the embedding came from.
    pub source: usize,
}

/// Fixed-capacity FIFO of detached embeddings used as extra negatives.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<BankEntry>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory bank capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn push(&mut self, embedding: Vec<f32>, source: usize) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(BankEntry { embedding, source });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter()
    }
}

/// Loss and gradients for one batch of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub ms: f64,
    pub fcs: f64,
    pub total: f64,
    pub anchor: Vec<Vec<f64>>,
    pub positive: Vec<Vec<f64>>,
    pub flipped: Vec<Vec<f64>>,
}

/// Scores every anchor against all in-batch positives, the other anchors
/// and the bank entries of other source videos; only the anchor's own
/// positive counts as a positive. Returns combined loss and gradients with
/// respect to the batch embeddings.
pub fn batch_loss(
    anchor: &[Vec<f64>],
    positive: &[Vec<f64>],
    flipped: &[Vec<f64>],
    sources: &[usize],
    bank: &MemoryBank,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    cfg.validate()?;
    let n = anchor.len();
    if sources.len() != n {
        return Err(Error::shape("batch_loss", &[n], &[sources.len()]));
    }
    enum Cand {
        Pos(usize),
        Anchor(usize),
        Bank,
    }
    let bank_rows: Vec<(Vec<f64>, usize)> = bank
        .iter()
        .map(|e| (e.embedding.iter().map(|&v| v as f64).collect(), e.source))
        .collect();
    let mut rows = Vec::with_capacity(n);
    let mut cands = Vec::with_capacity(n);
    let mut mined = Vec::with_capacity(n);
    for i in 0..n {
        let mut sims = Vec::new();
        let mut flags = Vec::new();
        let mut who = Vec::new();
        for (j, p) in positive.iter().enumerate() {
            sims.push(dot(&anchor[i], p));
            flags.push(i == j);
            who.push((Cand::Pos(j), p.as_slice()));
        }
        for (j, a) in anchor.iter().enumerate().filter(|&(j, _)| j != i) {
            sims.push(dot(&anchor[i], a));
            flags.push(false);
            who.push((Cand::Anchor(j), a.as_slice()));
        }
        for (b, src) in &bank_rows {
            if *src != sources[i] {
                sims.push(dot(&anchor[i], b));
                flags.push(false);
                who.push((Cand::Bank, b.as_slice()));
            }
        }
        mined.push(mine_pairs(&sims, &flags, cfg.epsilon)?);
        rows.push(sims);
        cands.push(who);
    }
    let (ms, g_sims) = ms_loss(&rows, &mined, cfg)?;
    let (fcs, fg) = fcs_loss(anchor, positive, flipped, cfg.gamma)?;

    let scale = |rows: Vec<Vec<f64>>, w: f64| -> Vec<Vec<f64>> {
        rows.into_iter().map(|r| r.into_iter().map(|v| v * w).collect()).collect()
    };
    let mut ga = scale(fg.anchor, cfg.w2);
    let mut gp = scale(fg.positive, cfg.w2);
    let gf = scale(fg.flipped, cfg.w2);
    for i in 0..n {
        for (k, (cand, vec)) in cands[i].iter().enumerate() {
            let g = cfg.w1 * g_sims[i][k];
            if g == 0.0 {
                continue;
            }
            for d in 0..vec.len() {
                ga[i][d] += g * vec[d];
            }
            match *cand {
                Cand::Pos(j) => {
                    for d in 0..vec.len() {
                        gp[j][d] += g * anchor[i][d];
                    }
                }
                Cand::Anchor(j) => {
                    for d in 0..vec.len() {
                        ga[j][d] += g * anchor[i][d];
                    }
                }
                Cand::Bank => {}
            }
        }
    }
    Ok(BatchLoss {
        ms,
        fcs,
        total: combined_loss(ms, fcs, cfg.w1, cfg.w2)?,
        anchor: ga,
        positive: gp,
        flipped: gf,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTrainConfig {
    pub loss: LossConfig,
    pub bank_capacity: usize,
    pub batch: usize,
    pub steps: usize,
    /// Learning rate before the `batch / 256` scaling rule.
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Probability that a positive receives a ShotMix cut.
    pub shotmix_prob: f64,
    /// Random brightness and translation applied to positives.
    pub augment: bool,
    /// Steps before bank entries are used as negatives.
    pub bank_warmup: usize,
    pub seed: u64,
}

impl Default for SimTrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            bank_capacity: 4096,
            batch: 16,
            steps: 300,
            base_lr: 5e-4,
            weight_decay: 0.05,
            shotmix_prob: 0.5,
            augment: true,
            bank_warmup: 0,
            seed: 42,
        }
    }
}

impl SimTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch < 2 {
            return Err(Error::Config("similarity training needs a batch of at least 2".into()));
        }
        if self.bank_capacity == 0 {
            return Err(Error::Config("memory bank capacity must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.shotmix_prob) {
            return Err(Error::Config(format!("shotmix probability {} outside [0, 1]", self.shotmix_prob)));
        }
        if [self.base_lr, self.weight_decay].iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Config("learning rate and weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub ms_loss: f64,
    pub fcs_loss: f64,
    pub total: f64,
    pub lr: f64,
    pub bank_size: usize,
}

pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut out = String::from("step,ms_loss,fcs_loss,total,lr,bank_size\n");
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{:.8},{:.8},{:.8},{:.8e},{}",
            m.step, m.ms_loss, m.fcs_loss, m.total, m.lr, m.bank_size
        );
    }
    out
}

/// One training triplet before encoding.
struct Triplet {
    anchor: ClipTensor,
    positive: ClipTensor,
    flipped: ClipTensor,
}

fn sample_triplet(video: &Frames, clip_len: usize, cfg: &SimTrainConfig, rng: &mut SeedRng) -> Result<Triplet> {
    let mut spec = shotmix_sample(video.len(), clip_len, rng)?;
    if !rng.coin(cfg.shotmix_prob) {
        spec = spec.without_cut();
    }
    let (anchor, positive) = apply_spec(video, &spec)?;
    let positive = if cfg.augment {
        let delta = rng.open_range(-0.3, 0.3) as f32;
        let dx = rng.int_in(0, 4) as i32 - 2;
        let dy = rng.int_in(0, 4) as i32 - 2;
        ClipTensor::new(positive.frames().shift(dx, dy).brighten(delta))
    } else {
        positive
    };
    let flipped = hflip(&positive);
    Ok(Triplet {
        anchor,
        positive,
        flipped,
    })
}

/// Owns the encoder weights, optimizer state and memory bank.
pub struct SimTrainer {
    encoder: Encoder,
    params: ParamStore<f32>,
    optimizer: OptimizerState<f32>,
    bank: MemoryBank,
    empty_bank: MemoryBank,
    config: SimTrainConfig,
    rng: SeedRng,
    step: usize,
}

impl SimTrainer {
    pub fn new(encoder: Encoder, params: ParamStore<f32>, config: SimTrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(
            &params,
            AdamWConfig {
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
        );
        Ok(Self {
            encoder,
            optimizer,
            bank: MemoryBank::new(config.bank_capacity)?,
            empty_bank: MemoryBank::new(1)?,
            rng: SeedRng::new(config.seed),
            params,
            config,
            step: 0,
        })
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn into_params(self) -> ParamStore<f32> {
        self.params
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Learning rate used by the next step.
    pub fn current_lr(&self) -> Result<f64> {
        let base = scaled_lr(self.config.base_lr, self.config.batch);
        cosine_lr(self.step.min(self.config.steps), self.config.steps.max(1), base)
    }

    /// Samples a batch of videos, takes one optimizer step and refreshes the bank.
    pub fn train_step(&mut self, videos: &[Frames]) -> Result<StepMetrics> {
        let cfg = self.config.clone();
        let clip_len = self.encoder.config().frames;
        let sources = self.rng.subset(videos.len(), cfg.batch);
        if sources.len() < 2 {
            return Err(Error::Sampling("similarity training needs at least 2 videos".into()));
        }
        let step_rng = self.rng.fork(self.step as u64);
        let triplets: Vec<Triplet> = sources
            .par_iter()
            .enumerate()
            .map(|(slot, &v)| sample_triplet(&videos[v], clip_len, &cfg, &mut step_rng.fork(slot as u64)))
            .collect::<Result<_>>()?;
        let n = triplets.len();
        let clips: Vec<ClipTensor> = triplets
            .iter()
            .map(|t| t.anchor.clone())
            .chain(triplets.iter().map(|t| t.positive.clone()))
            .chain(triplets.iter().map(|t| t.flipped.clone()))
            .collect();

        let mut tape = Tape::<f32>::new();
        let bound = self.params.bind(&mut tape, true);
        let emb = self.encoder.forward(&mut tape, &bound, &clips)?;
        let d = self.encoder.config().embed_dim;
        let rows: Vec<Vec<f64>> = tape
            .value(emb)
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        let loss = batch_loss(
            &rows[..n],
            &rows[n..2 * n],
            &rows[2 * n..],
            &sources,
            if self.step >= cfg.bank_warmup { &self.bank } else { &self.empty_bank },
            &cfg.loss,
        )?;
        if !loss.total.is_finite() {
            return Err(Error::Training {
                step: self.step,
                reason: format!("non-finite loss (ms {}, fcs {})", loss.ms, loss.fcs),
            });
        }

        let upstream: Vec<f32> = loss
            .anchor
            .iter()
            .chain(&loss.positive)
            .chain(&loss.flipped)
            .flat_map(|r| r.iter().map(|&v| v as f32))
            .collect();
        let upstream = tape.constant(Tensor::new(vec![3 * n, d], upstream)?);
        let surrogate = tape.mul(emb, upstream)?;
        let surrogate = tape.sum(surrogate)?;
        let grads = tape.backward(surrogate)?;
        let per_param: Vec<Option<&Tensor<f32>>> = bound.vars().iter().map(|&v| grads.get(v)).collect();
        let lr = self.current_lr()?;
        adamw_step(&mut self.params, &per_param, &mut self.optimizer, lr).map_err(|e| match e {
            Error::NonFiniteGradient { name } => Error::Training {
                step: self.step,
                reason: format!("non-finite gradient for `{name}`"),
            },
            other => other,
        })?;

        for (i, &src) in sources.iter().enumerate() {
            self.bank.push(rows[i].iter().map(|&v| v as f32).collect(), src);
        }
        let metrics = StepMetrics {
            step: self.step,
            ms_loss: loss.ms,
            fcs_loss: loss.fcs,
            total: loss.total,
            lr,
            bank_size: self.bank.len(),
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs the configured number of steps.
    pub fn run(&mut self, videos: &[Frames]) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::with_capacity(self.config.steps);
        while self.step < self.config.steps {
            let m = self.train_step(videos)?;
            if m.step % 25 == 0 {
                log::info!(
                    "step {} loss {:.5} (ms {:.5}, fcs {:.5}) lr {:.2e} bank {}",
                    m.step,
                    m.total,
                    m.ms_loss,
                    m.fcs_loss,
                    m.lr,
                    m.bank_size
                );
            }
            out.push(m);
        }
        Ok(out)
    }
}
