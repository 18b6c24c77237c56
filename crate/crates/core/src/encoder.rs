//! Divided space-time attention clip encoder.
//!
//! A clip of `F` frames is cut into `S` spatial patches per frame. Each block
//! runs temporal attention (the `F` tokens sharing a spatial index), then
//! spatial attention (the patches of one frame plus the classification
//! token), then an MLP. The classification token is copied into every
//! frame's spatial sequence and the per-frame results are averaged; it does
//! not take part in temporal attention. The clip embedding is the final
//! classification token passed through a layer norm and one linear layer to
//! `D` dims, then L2-normalized.

use serde::{Deserialize, Serialize};

use crate::clip::ClipTensor;
use crate::error::{Error, Result};
use crate::nn::{lookup, AttentionParams, LayerNormParams, LinearParams, MlpParams};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Toy,
    Small,
    Base,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Variant::Toy),
            "small" => Ok(Variant::Small),
            "base" => Ok(Variant::Base),
            other => Err(Error::Config(format!("unknown model variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frames: usize,
    pub image_size: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            frames: 8,
            image_size: 16,
            patch: 8,
            d_model: 32,
            heads: 4,
            depth: 2,
            embed_dim: 16,
            variant: Variant::Toy,
        }
    }

    pub fn small() -> Self {
        Self {
            frames: 8,
            image_size: 224,
            patch: 16,
            d_model: 384,
            heads: 6,
            depth: 6,
            embed_dim: 384,
            variant: Variant::Small,
        }
    }

    pub fn base() -> Self {
        Self {
            frames: 8,
            image_size: 224,
            patch: 16,
            d_model: 768,
            heads: 12,
            depth: 12,
            embed_dim: 768,
            variant: Variant::Base,
        }
    }

    /// Spatial patches per frame.
    pub fn spatial(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    /// Tokens per clip after embedding, including the classification token.
    pub fn tokens(&self) -> usize {
        self.frames * self.spatial() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.patch == 0 || self.image_size == 0 || self.depth == 0 {
            return fail(format!("frames, patch, image_size and depth must be positive: {self:?}"));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return fail(format!("image size {} not divisible by patch {}", self.image_size, self.patch));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.embed_dim == 0 {
            return fail("embed_dim must be positive".into());
        }
        match self.variant {
            Variant::Small if self.embed_dim != 384 => fail("small variant needs embed_dim 384".into()),
            Variant::Base if self.embed_dim != 768 => fail("base variant needs embed_dim 768".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub temporal: AttentionParams,
    pub spatial: AttentionParams,
    pub mlp: MlpParams,
}

/// Token state between blocks. `grid` holds `batch·frames·visible` rows in
/// (clip, frame, spatial slot) order and is `None` when every tube is hidden.
#[derive(Clone, Debug)]
pub struct TokenGrid {
    pub cls: Var,
    pub grid: Option<Var>,
    pub batch: usize,
    pub frames: usize,
    pub visible: usize,
}

impl TokenGrid {
    pub fn tokens_per_clip(&self) -> usize {
        self.frames * self.visible + 1
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: ModelConfig,
    patch: LinearParams,
    pos_spatial: ParamId,
    pos_temporal: ParamId,
    cls: ParamId,
    blocks: Vec<BlockParams>,
    head_norm: LayerNormParams,
    head: LinearParams,
}

const PREFIX: &str = "encoder";

impl Encoder {
    /// Registers freshly initialized encoder parameters in `store`.
    pub fn init<T: Real>(config: ModelConfig, store: &mut ParamStore<T>, rng: &mut SeedRng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let patch = LinearParams::init(store, &format!("{PREFIX}.patch"), config.patch_dim(), d, rng)?;
        let pos_spatial = store.init_weight(&format!("{PREFIX}.pos_spatial"), &[config.spatial(), d], rng)?;
        let pos_temporal = store.init_weight(&format!("{PREFIX}.pos_temporal"), &[config.frames, d], rng)?;
        let cls = store.init_weight(&format!("{PREFIX}.cls"), &[1, d], rng)?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("{PREFIX}.block{i}");
            blocks.push(BlockParams {
                temporal: AttentionParams::init(store, &format!("{p}.temporal"), d, rng)?,
                spatial: AttentionParams::init(store, &format!("{p}.spatial"), d, rng)?,
                mlp: MlpParams::init(store, &format!("{p}.mlp"), d, rng)?,
            });
        }
        let head_norm = LayerNormParams::init(store, &format!("{PREFIX}.head_norm"), d)?;
        let head = LinearParams::init(store, &format!("{PREFIX}.head"), d, config.embed_dim, rng)?;
        Ok(Self {
            config,
            patch,
            pos_spatial,
            pos_temporal,
            cls,
            blocks,
            head_norm,
            head,
        })
    }

    /// Resolves parameter handles in an existing store (e.g. a loaded checkpoint).
    pub fn from_store<T: Real>(config: ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let enc = Self {
            patch: LinearParams::lookup(store, &format!("{PREFIX}.patch"))?,
            pos_spatial: lookup(store, &format!("{PREFIX}.pos_spatial"))?,
            pos_temporal: lookup(store, &format!("{PREFIX}.pos_temporal"))?,
            cls: lookup(store, &format!("{PREFIX}.cls"))?,
            blocks: (0..config.depth)
                .map(|i| {
                    let p = format!("{PREFIX}.block{i}");
                    Ok(BlockParams {
                        temporal: AttentionParams::lookup(store, &format!("{p}.temporal"))?,
                        spatial: AttentionParams::lookup(store, &format!("{p}.spatial"))?,
                        mlp: MlpParams::lookup(store, &format!("{p}.mlp"))?,
                    })
                })
                .collect::<Result<_>>()?,
            head_norm: LayerNormParams::lookup(store, &format!("{PREFIX}.head_norm"))?,
            head: LinearParams::lookup(store, &format!("{PREFIX}.head"))?,
            config,
        };
        let checks = [
            (enc.patch.weight, vec![enc.config.patch_dim(), d]),
            (enc.pos_spatial, vec![enc.config.spatial(), d]),
            (enc.pos_temporal, vec![enc.config.frames, d]),
            (enc.head.weight, vec![d, enc.config.embed_dim]),
        ];
        for (id, shape) in checks {
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {:?}, config expects {shape:?}",
                    store.name(id),
                    store.get(id).shape()
                )));
            }
        }
        Ok(enc)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn pos_spatial(&self) -> ParamId {
        self.pos_spatial
    }

    pub fn pos_temporal(&self) -> ParamId {
        self.pos_temporal
    }

    pub fn head(&self) -> LinearParams {
        self.head
    }

    pub fn patch(&self) -> LinearParams {
        self.patch
    }

    fn check_clip(&self, clip: &ClipTensor) -> Result<()> {
        let f = clip.frames();
        let c = &self.config;
        if f.len() != c.frames || f.height() != c.image_size || f.width() != c.image_size {
            return Err(Error::Config(format!(
                "clip is {}×{}×{}, model expects {}×{}×{}",
                f.len(),
                f.height(),
                f.width(),
                c.frames,
                c.image_size,
                c.image_size
            )));
        }
        Ok(())
    }

    /// Projects patches to tokens and adds positional embeddings. With
    /// `visible`, only the listed spatial indices of each clip are embedded
    /// (the same indices in every frame); all lists must have equal length.
    pub fn patch_embed<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        clips: &[ClipTensor],
        visible: Option<&[Vec<usize>]>,
    ) -> Result<TokenGrid> {
        let c = &self.config;
        let (frames, spatial) = (c.frames, c.spatial());
        let batch = clips.len();
        if batch == 0 {
            return Err(Error::Contract("empty clip batch".into()));
        }
        let all: Vec<usize> = (0..spatial).collect();
        let slots: Vec<&[usize]> = match visible {
            Some(v) => {
                if v.len() != batch {
                    return Err(Error::Config(format!("{} visibility lists for {batch} clips", v.len())));
                }
                v.iter().map(Vec::as_slice).collect()
            }
            None => vec![all.as_slice(); batch],
        };
        let n_visible = slots[0].len();
        if slots.iter().any(|s| s.len() != n_visible || s.iter().any(|&i| i >= spatial)) {
            return Err(Error::Config("visibility lists must be equal-length sets of valid spatial indices".into()));
        }

        let cls = tape.gather_rows(p[self.cls], &vec![0; batch])?;
        if n_visible == 0 {
            for clip in clips {
                self.check_clip(clip)?;
            }
            return Ok(TokenGrid {
                cls,
                grid: None,
                batch,
                frames,
                visible: 0,
            });
        }

        let pd = c.patch_dim();
        let mut rows = Vec::with_capacity(batch * frames * n_visible * pd);
        let mut s_index = Vec::with_capacity(batch * frames * n_visible);
        let mut t_index = Vec::with_capacity(batch * frames * n_visible);
        for (clip, vis) in clips.iter().zip(&slots) {
            self.check_clip(clip)?;
            let patches = clip.patchify(c.patch);
            for t in 0..frames {
                for &s in vis.iter() {
                    let at = (t * spatial + s) * pd;
                    rows.extend(patches[at..at + pd].iter().map(|&v| T::of(v as f64)));
                    s_index.push(s);
                    t_index.push(t);
                }
            }
        }
        let n_rows = s_index.len();
        let x = tape.constant(Tensor::new(vec![n_rows, pd], rows)?);
        let x = self.patch.apply(tape, p, x)?;
        let ps = tape.gather_rows(p[self.pos_spatial], &s_index)?;
        let pt = tape.gather_rows(p[self.pos_temporal], &t_index)?;
        let x = tape.add(x, ps)?;
        let grid = tape.add(x, pt)?;
        Ok(TokenGrid {
            cls,
            grid: Some(grid),
            batch,
            frames,
            visible: n_visible,
        })
    }

    pub fn encode_block<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        block: &BlockParams,
        tokens: TokenGrid,
    ) -> Result<TokenGrid> {
        let TokenGrid {
            cls,
            grid,
            batch,
            frames,
            visible,
        } = tokens;
        let heads = self.config.heads;

        // Temporal attention over each spatial slot.
        let grid = match grid {
            Some(g) => {
                let mut order = Vec::with_capacity(batch * visible * frames);
                for b in 0..batch {
                    for s in 0..visible {
                        for t in 0..frames {
                            order.push((b * frames + t) * visible + s);
                        }
                    }
                }
                let mut inverse = vec![0; order.len()];
                for (i, &o) in order.iter().enumerate() {
                    inverse[o] = i;
                }
                let xt = tape.gather_rows(g, &order)?;
                let a = block.temporal.apply(tape, p, xt, batch * visible, frames, heads)?;
                let xt = tape.add(xt, a)?;
                Some(tape.gather_rows(xt, &inverse)?)
            }
            None => None,
        };

        // Spatial attention within each frame, classification token included.
        let (cls, grid) = match grid {
            Some(g) => {
                let all = tape.concat(&[cls, g], 0)?;
                let seq = visible + 1;
                let mut order = Vec::with_capacity(batch * frames * seq);
                for b in 0..batch {
                    for t in 0..frames {
                        order.push(b);
                        for s in 0..visible {
                            order.push(batch + (b * frames + t) * visible + s);
                        }
                    }
                }
                let xs = tape.gather_rows(all, &order)?;
                let a = block.spatial.apply(tape, p, xs, batch * frames, seq, heads)?;
                let xs = tape.add(xs, a)?;
                let cls_rows: Vec<usize> = (0..batch * frames).map(|g| g * seq).collect();
                let grid_rows: Vec<usize> = (0..batch * frames)
                    .flat_map(|g| (1..seq).map(move |s| g * seq + s))
                    .collect();
                let c = tape.gather_rows(xs, &cls_rows)?;
                let c = tape.reshape(c, &[batch, frames, self.config.d_model])?;
                let c = tape.mean_axis(c, 1)?;
                (c, Some(tape.gather_rows(xs, &grid_rows)?))
            }
            None => {
                let a = block.spatial.apply(tape, p, cls, batch, 1, heads)?;
                (tape.add(cls, a)?, None)
            }
        };

        let (cls, grid) = match grid {
            Some(g) => {
                let all = tape.concat(&[cls, g], 0)?;
                let m = block.mlp.apply(tape, p, all)?;
                let all = tape.add(all, m)?;
                let c = tape.slice(all, 0, 0, batch)?;
                let g = tape.slice(all, 0, batch, batch * frames * visible)?;
                (c, Some(g))
            }
            None => {
                let m = block.mlp.apply(tape, p, cls)?;
                (tape.add(cls, m)?, None)
            }
        };

        Ok(TokenGrid {
            cls,
            grid,
            batch,
            frames,
            visible,
        })
    }

    /// Runs every block, checking activations stay finite.
    pub fn encode_tokens<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, mut tokens: TokenGrid) -> Result<TokenGrid> {
        for (i, block) in self.blocks.iter().enumerate() {
            tokens = self.encode_block(tape, p, block, tokens)?;
            let finite = tape.value(tokens.cls).is_finite()
                && tokens.grid.is_none_or(|g| tape.value(g).is_finite());
            if !finite {
                return Err(Error::Numeric {
                    location: format!("encoder block {i}"),
                });
            }
        }
        Ok(tokens)
    }

    /// Classification token → layer norm → linear → unit-norm `[batch, D]`.
    pub fn project<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, cls: Var) -> Result<Var> {
        let h = self.head_norm.apply(tape, p, cls)?;
        let h = self.head.apply(tape, p, h)?;
        tape.l2_normalize(h)
    }

    /// Full forward pass: unit-norm embeddings `[clips.len(), D]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, clips: &[ClipTensor]) -> Result<Var> {
        let tokens = self.patch_embed(tape, p, clips, None)?;
        let tokens = self.encode_tokens(tape, p, tokens)?;
        self.project(tape, p, tokens.cls)
    }

    /// Inference helper: one embedding per clip, parameters frozen.
    pub fn encode_clips<T: Real>(&self, store: &ParamStore<T>, clips: &[ClipTensor]) -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, clips)?;
        let d = self.config.embed_dim;
        Ok(tape.value(out).data().chunks(d).map(<[T]>::to_vec).collect())
    }

    pub fn encode_clip<T: Real>(&self, store: &ParamStore<T>, clip: &ClipTensor) -> Result<Vec<T>> {
        Ok(self.encode_clips(store, std::slice::from_ref(clip))?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::Frames;

    fn toy() -> (Encoder, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let enc = Encoder::init(ModelConfig::toy(), &mut store, &mut SeedRng::new(1)).unwrap();
        (enc, store)
    }

    fn clip(seed: u64) -> ClipTensor {
        let mut r = SeedRng::new(seed);
        let n = 8 * 16 * 16 * 3;
        ClipTensor::new(Frames::new(8, 16, 16, (0..n).map(|_| r.uniform() as f32).collect()).unwrap())
    }

    #[test]
    fn token_count() {
        let (enc, store) = toy();
        assert_eq!(enc.config().tokens(), 33);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let tokens = enc.patch_embed(&mut tape, &p, &[clip(1)], None).unwrap();
        assert_eq!(tape.shape(tokens.grid.unwrap()), &[32, 32]);
        assert_eq!(tokens.tokens_per_clip(), 33);
        let out = enc.encode_block(&mut tape, &p, &enc.blocks()[0], tokens).unwrap();
        assert_eq!(tape.shape(out.grid.unwrap()), &[32, 32]);
        assert_eq!(tape.shape(out.cls), &[1, 32]);
    }

    #[test]
    fn zero_clip_zero_projection_gives_positions() {
        let (enc, mut store) = toy();
        let w = enc.patch.weight;
        *store.get_mut(w) = Tensor::zeros(store.get(w).shape());
        let zero = ClipTensor::new(Frames::new(8, 16, 16, vec![0.0; 8 * 16 * 16 * 3]).unwrap());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let tokens = enc.patch_embed(&mut tape, &p, &[zero], None).unwrap();
        let g = tape.value(tokens.grid.unwrap());
        let ps = store.get(enc.pos_spatial);
        let pt = store.get(enc.pos_temporal);
        for t in 0..8 {
            for s in 0..4 {
                for k in 0..32 {
                    let want = ps.data()[s * 32 + k] + pt.data()[t * 32 + k];
                    assert_eq!(g.data()[(t * 4 + s) * 32 + k], want);
                }
            }
        }
    }

    #[test]
    fn patch_locality() {
        let (enc, store) = toy();
        let a = clip(3);
        let mut data = a.frames().data().to_vec();
        // pixel (y=1, x=9) of frame 2 lives in spatial patch 1
        let at = ((2 * 16 + 1) * 16 + 9) * 3;
        data[at] = 1.0 - data[at];
        let b = ClipTensor::new(Frames::new(8, 16, 16, data).unwrap());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let ta = enc.patch_embed(&mut tape, &p, &[a], None).unwrap();
        let tb = enc.patch_embed(&mut tape, &p, &[b], None).unwrap();
        let (ga, gb) = (tape.value(ta.grid.unwrap()), tape.value(tb.grid.unwrap()));
        for row in 0..32 {
            let same = ga.data()[row * 32..(row + 1) * 32] == gb.data()[row * 32..(row + 1) * 32];
            assert_eq!(same, row != 2 * 4 + 1, "row {row}");
        }
    }

    #[test]
    fn zero_branches_are_identity() {
        let (enc, mut store) = toy();
        let block = enc.blocks()[0];
        for id in [block.temporal.out.weight, block.spatial.out.weight, block.mlp.fc2.weight] {
            *store.get_mut(id) = Tensor::zeros(store.get(id).shape());
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let tokens = enc.patch_embed(&mut tape, &p, &[clip(4), clip(5)], None).unwrap();
        let (c0, g0) = (tape.value(tokens.cls).clone(), tape.value(tokens.grid.unwrap()).clone());
        let out = enc.encode_block(&mut tape, &p, &block, tokens).unwrap();
        // the classification token is averaged over frames, so allow rounding
        for (a, b) in tape.value(out.cls).data().iter().zip(c0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(tape.value(out.grid.unwrap()), &g0);
    }

    #[test]
    fn embeddings_unit_norm_and_deterministic() {
        let (enc, store) = toy();
        let e1 = enc.encode_clip(&store, &clip(9)).unwrap();
        let e2 = enc.encode_clip(&store, &clip(9)).unwrap();
        assert_eq!(e1, e2);
        let norm: f64 = e1.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn batch_order_is_respected() {
        let (enc, store) = toy();
        let (a, b, c) = (clip(1), clip(2), clip(3));
        let x = enc.encode_clips(&store, &[a.clone(), b.clone(), c.clone()]).unwrap();
        let y = enc.encode_clips(&store, &[c, a, b]).unwrap();
        assert_eq!(x[0], y[1]);
        assert_eq!(x[1], y[2]);
        assert_eq!(x[2], y[0]);
    }

    #[test]
    fn wrong_clip_shape_is_config_error() {
        let (enc, store) = toy();
        let bad = ClipTensor::new(Frames::new(4, 16, 16, vec![0.0; 4 * 16 * 16 * 3]).unwrap());
        assert!(matches!(enc.encode_clip(&store, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn store_lookup_matches_init() {
        let (enc, store) = toy();
        let again = Encoder::from_store(ModelConfig::toy(), &store).unwrap();
        let c = clip(11);
        assert_eq!(enc.encode_clip(&store, &c).unwrap(), again.encode_clip(&store, &c).unwrap());
        let mut wrong = ModelConfig::toy();
        wrong.embed_dim = 8;
        assert!(Encoder::from_store(wrong, &store).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::toy();
        c.patch = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::small();
        c.embed_dim = 100;
        assert!(c.validate().is_err());
        assert!(ModelConfig::base().validate().is_ok());
    }
}
