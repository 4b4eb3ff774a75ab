//! The W-shaped generator (content encoder, style encoder, feature mixer,
//! decoder) and the critic with its auxiliary style classifier.

use std::fmt;
use std::str::FromStr;

use gwnet_tensor::{adain, channel_concat, ops, segment_reduce, Activation, ReduceMode, Shape, Tensor, Var, DEFAULT_EPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{format_list, parse_list, KeyValues};
use crate::error::{Error, Result};
use crate::glyphdata::{batch_tensor, GlyphImage};
use crate::nn::{act, init_conv, init_norm, Binder, Init, Mode, Norm, ParamStore};

pub const DEFAULT_WIDTHS: [usize; 6] = [64, 128, 256, 512, 512, 512];
pub const DEFAULT_CRITIC_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Bn,
    Adain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Residual,
    Dense,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Bn => "bn",
            Variant::Adain => "adain",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bn" => Ok(Variant::Bn),
            "adain" => Ok(Variant::Adain),
            _ => Err(format!("unknown variant `{s}` (expected bn or adain)")),
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Residual => "residual",
            BlockKind::Dense => "dense",
        })
    }
}

impl FromStr for BlockKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "residual" => Ok(BlockKind::Residual),
            "dense" => Ok(BlockKind::Dense),
            _ => Err(format!("unknown block kind `{s}` (expected residual or dense)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixerConfig {
    pub variant: Variant,
    pub block_kind: BlockKind,
    pub blocks_per_layer: usize,
    /// First (1-based) encoder layer that uses the concatenation shortcut;
    /// shallower layers run blocks on the content feature.
    pub deep_boundary: usize,
    /// Number of conv3×3+ReLU stages in the style transform.
    pub transform_depth: usize,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig {
            variant: Variant::Adain,
            block_kind: BlockKind::Residual,
            blocks_per_layer: 3,
            deep_boundary: 4,
            transform_depth: 2,
        }
    }
}

/// Architecture of the generator and critic.
#[derive(Clone, Debug, PartialEq)]
pub struct WNetConfig {
    pub size: usize,
    /// Number of content prototypes (encoder input channels).
    pub m: usize,
    /// Number of styles I (classifier logits).
    pub styles: usize,
    pub enc_widths: Vec<usize>,
    pub critic_widths: Vec<usize>,
    pub mixer: MixerConfig,
}

impl WNetConfig {
    /// Default widths; a 32×32 model drops the last encoder layer.
    pub fn new(size: usize, m: usize, styles: usize) -> Self {
        let layers = layers_for(size).unwrap_or(6);
        WNetConfig {
            size,
            m,
            styles,
            enc_widths: DEFAULT_WIDTHS[..layers.min(6)].to_vec(),
            critic_widths: DEFAULT_CRITIC_WIDTHS.to_vec(),
            mixer: MixerConfig::default(),
        }
    }

    /// Every width divided by `factor` (at least 1).
    pub fn scaled(mut self, factor: usize) -> Self {
        for w in self.enc_widths.iter_mut().chain(self.critic_widths.iter_mut()) {
            *w = (*w / factor).max(1);
        }
        self
    }

    pub fn layers(&self) -> usize {
        self.enc_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let Some(layers) = layers_for(self.size) else {
            return bad(format!("size {} is not supported (32 or 64)", self.size));
        };
        if self.enc_widths.len() != layers {
            return bad(format!("size {} needs {layers} encoder widths, got {}", self.size, self.enc_widths.len()));
        }
        if self.critic_widths.len() != 5 {
            return bad(format!("critic needs 5 widths, got {}", self.critic_widths.len()));
        }
        if self.enc_widths.iter().chain(&self.critic_widths).any(|&w| w == 0) {
            return bad("widths must be positive".into());
        }
        if self.m == 0 {
            return bad("M must be at least 1".into());
        }
        if self.styles < 2 {
            return bad(format!("the style classifier needs I >= 2, got {}", self.styles));
        }
        let mx = &self.mixer;
        if mx.deep_boundary == 0 || mx.deep_boundary > layers {
            return bad(format!("deep_boundary {} outside 1..={layers}", mx.deep_boundary));
        }
        if mx.blocks_per_layer == 0 || mx.transform_depth == 0 {
            return bad("blocks_per_layer and transform_depth must be at least 1".into());
        }
        Ok(())
    }

    /// Channels of the mixed feature at 1-based layer `g`.
    pub fn mixed_channels(&self, g: usize) -> usize {
        let w = self.enc_widths[g - 1];
        if g >= self.mixer.deep_boundary {
            4 * w
        } else {
            match self.mixer.block_kind {
                BlockKind::Residual => w,
                BlockKind::Dense => w * (1 + self.mixer.blocks_per_layer),
            }
        }
    }

    /// `(input, output)` channels of decoder layer `t` (1-based, deepest
    /// first).
    pub fn decoder_channels(&self, t: usize) -> (usize, usize) {
        let l = self.layers();
        let out = |t: usize| if t < l { self.enc_widths[l - t - 1] } else { 1 };
        let inp = if t == 1 { self.mixed_channels(l) } else { out(t - 1) + self.mixed_channels(l - t + 1) };
        (inp, out(t))
    }

    fn norms(&self) -> (Norm, Norm, Norm, Norm) {
        // content encoder, style encoder, mixer blocks, decoder
        match self.mixer.variant {
            Variant::Bn => (Norm::Batch, Norm::Batch, Norm::Batch, Norm::Batch),
            Variant::Adain => (Norm::Layer, Norm::None, Norm::None, Norm::Instance),
        }
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("size", self.size);
        kv.set("m", self.m);
        kv.set("styles", self.styles);
        kv.set("enc_widths", format_list(&self.enc_widths));
        kv.set("critic_widths", format_list(&self.critic_widths));
        kv.set("variant", self.mixer.variant);
        kv.set("block_kind", self.mixer.block_kind);
        kv.set("blocks_per_layer", self.mixer.blocks_per_layer);
        kv.set("deep_boundary", self.mixer.deep_boundary);
        kv.set("transform_depth", self.mixer.transform_depth);
    }

    /// Reads the keys written by [`WNetConfig::write_kv`] over `self`.
    pub fn read_kv(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read_into("size", &mut self.size)?;
        kv.read_into("m", &mut self.m)?;
        kv.read_into("styles", &mut self.styles)?;
        if let Some(s) = kv.get_str("enc_widths") {
            self.enc_widths = parse_list(s)?;
        }
        if let Some(s) = kv.get_str("critic_widths") {
            self.critic_widths = parse_list(s)?;
        }
        kv.read_into("variant", &mut self.mixer.variant)?;
        kv.read_into("block_kind", &mut self.mixer.block_kind)?;
        kv.read_into("blocks_per_layer", &mut self.mixer.blocks_per_layer)?;
        kv.read_into("deep_boundary", &mut self.mixer.deep_boundary)?;
        kv.read_into("transform_depth", &mut self.mixer.transform_depth)?;
        Ok(())
    }
}

fn layers_for(size: usize) -> Option<usize> {
    match size {
        32 => Some(5),
        64 => Some(6),
        _ => None,
    }
}

/// Reference images of a batch stacked on the batch dim, with the rows
/// belonging to each sample.
///
/// Each sample's references are deduplicated by pixel equality and put in
/// a canonical order, so the encoding depends only on the set.
#[derive(Clone, Debug)]
pub struct StyleBatch {
    pub images: Tensor,
    pub groups: Vec<Vec<usize>>,
}

impl StyleBatch {
    pub fn new<G: AsRef<GlyphImage>>(sets: &[&[G]]) -> Result<Self> {
        let mut rows: Vec<&GlyphImage> = Vec::new();
        let mut groups = Vec::with_capacity(sets.len());
        for set in sets {
            if set.is_empty() {
                return Err(Error::Data("a style reference set is empty".into()));
            }
            let mut uniq: Vec<&GlyphImage> = set.iter().map(|g| g.as_ref()).collect();
            uniq.sort_by(|a, b| cmp_pixels(&a.pixels, &b.pixels));
            uniq.dedup_by(|a, b| a.pixels == b.pixels);
            groups.push((rows.len()..rows.len() + uniq.len()).collect());
            rows.extend(uniq);
        }
        Ok(StyleBatch { images: batch_tensor(&rows), groups })
    }
}

fn cmp_pixels(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(a.len().cmp(&b.len()))
}

/// Per-layer encoder features and the generated image.
pub struct GenOutput {
    pub image: Var,
    /// Content features f_p per layer (shallow first).
    pub content: Vec<Var>,
    /// Combined (avg | max | min) style features f_r per layer.
    pub style: Vec<Var>,
}

impl GenOutput {
    pub fn content_terminal(&self) -> &Var {
        self.content.last().expect("at least one layer")
    }
    pub fn style_terminal(&self) -> &Var {
        self.style.last().expect("at least one layer")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub cfg: WNetConfig,
    pub params: ParamStore,
}

impl Generator {
    pub fn init(cfg: WNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let init = Init::Std(INIT_STD);
        let (n_content, n_style, n_block, n_dec) = cfg.norms();
        let l = cfg.layers();
        for (name, first_in, norm) in [("enc_p", cfg.m, n_content), ("enc_r", 1, n_style)] {
            for g in 1..=l {
                let w = cfg.enc_widths[g - 1];
                let inp = if g == 1 { first_in } else { cfg.enc_widths[g - 2] };
                init_conv(&mut p, &mut rng, &format!("{name}.{g}.conv"), (w, inp, 5), w, init);
                init_norm(&mut p, &format!("{name}.{g}.norm"), w, norm);
            }
        }
        for g in 1..cfg.mixer.deep_boundary {
            let w = cfg.enc_widths[g - 1];
            for blk in 0..cfg.mixer.blocks_per_layer {
                let inp = match cfg.mixer.block_kind {
                    BlockKind::Residual => w,
                    BlockKind::Dense => w * (1 + blk),
                };
                init_norm(&mut p, &format!("mix.{g}.blk{blk}.norm"), inp, n_block);
                init_conv(&mut p, &mut rng, &format!("mix.{g}.blk{blk}.conv"), (w, inp, 3), w, init);
            }
            if cfg.mixer.variant == Variant::Adain {
                for t in 0..cfg.mixer.transform_depth {
                    let inp = if t == 0 { 3 * w } else { w };
                    init_conv(&mut p, &mut rng, &format!("mix.{g}.style{t}"), (w, inp, 3), w, init);
                }
            }
        }
        for t in 1..=l {
            let (inp, out) = cfg.decoder_channels(t);
            // transposed conv keeps the forward layout: (input ch, output ch)
            init_conv(&mut p, &mut rng, &format!("dec.{t}.deconv"), (inp, out, 5), out, init);
            if t < l {
                init_norm(&mut p, &format!("dec.{t}.norm"), out, n_dec);
            }
        }
        Ok(Generator { cfg, params: p })
    }

    pub fn binder(&self, mode: Mode, track: bool) -> Binder<'_> {
        Binder::new(&self.params, mode, track)
    }

    /// Content encoder over an `(B, M, S, S)` prototype stack.
    pub fn encode_content(&self, b: &Binder, protos: &Var) -> Result<Vec<Var>> {
        if protos.shape().c() != self.cfg.m {
            return Err(Error::Data(format!("expected {} content prototypes, got {}", self.cfg.m, protos.shape().c())));
        }
        self.encoder(b, "enc_p", protos, self.cfg.norms().0)
    }

    /// Shared-weight style encoder over stacked references, reduced per
    /// group into channel-concatenated avg | max | min features.
    pub fn encode_style(&self, b: &Binder, refs: &Var, groups: &[Vec<usize>]) -> Result<Vec<Var>> {
        if groups.is_empty() || groups.iter().any(Vec::is_empty) {
            return Err(Error::Data("style encoding needs at least one reference per sample".into()));
        }
        let per_ref = self.encoder(b, "enc_r", refs, self.cfg.norms().1)?;
        per_ref
            .iter()
            .map(|f| {
                let parts = [ReduceMode::Avg, ReduceMode::Max, ReduceMode::Min]
                    .map(|mode| segment_reduce(f, groups, mode))
                    .into_iter()
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                Ok(channel_concat(&parts)?)
            })
            .collect()
    }

    fn encoder(&self, b: &Binder, name: &str, x: &Var, norm: Norm) -> Result<Vec<Var>> {
        if x.shape().h() != self.cfg.size || x.shape().w() != self.cfg.size {
            return Err(Error::Data(format!("expected {0}x{0} glyphs, got {1}", self.cfg.size, x.shape())));
        }
        let mut h = x.clone();
        let mut feats = Vec::with_capacity(self.cfg.layers());
        for g in 1..=self.cfg.layers() {
            h = b.conv(&format!("{name}.{g}.conv"), &h, 2, 2)?;
            h = b.norm(&format!("{name}.{g}.norm"), &h, norm)?;
            h = act(&h, Activation::Relu);
            feats.push(h.clone());
        }
        Ok(feats)
    }

    /// `g(f_r)`: conv3×3 + ReLU stages mapping the combined style feature
    /// to the block width.
    pub fn style_transform(&self, b: &Binder, g: usize, fr: &Var) -> Result<Var> {
        let mut h = fr.clone();
        for t in 0..self.cfg.mixer.transform_depth {
            h = act(&b.conv(&format!("mix.{g}.style{t}"), &h, 1, 1)?, Activation::Relu);
        }
        Ok(h)
    }

    /// Mixed feature at 1-based layer `g`.
    pub fn mix(&self, b: &Binder, g: usize, fp: &Var, fr: &Var) -> Result<Var> {
        let cfg = &self.cfg;
        let w = cfg.enc_widths[g - 1];
        if fp.shape().c() != w || fr.shape().c() != 3 * w {
            return Err(Error::Data(format!(
                "layer {g}: content {} / style {} channels, expected {w} / {}",
                fp.shape().c(),
                fr.shape().c(),
                3 * w
            )));
        }
        let content = match cfg.mixer.variant {
            Variant::Bn => fp.clone(),
            // align to the averaged slice of the combined style feature
            Variant::Adain => adain(fp, &ops::slice_channels(fr, 0, w), DEFAULT_EPS)?,
        };
        if g >= cfg.mixer.deep_boundary {
            return Ok(channel_concat(&[content, fr.clone()])?);
        }
        let style = match cfg.mixer.variant {
            Variant::Bn => None,
            Variant::Adain => Some(self.style_transform(b, g, fr)?),
        };
        let mut x = content;
        for blk in 0..cfg.mixer.blocks_per_layer {
            let normed = match &style {
                None => b.norm(&format!("mix.{g}.blk{blk}.norm"), &x, Norm::Batch)?,
                Some(s) => {
                    let reps = x.shape().c() / w;
                    let tiled = if reps == 1 { s.clone() } else { channel_concat(&vec![s.clone(); reps])? };
                    adain(&x, &tiled, DEFAULT_EPS)?
                }
            };
            let h = b.conv(&format!("mix.{g}.blk{blk}.conv"), &act(&normed, Activation::Relu), 1, 1)?;
            x = match cfg.mixer.block_kind {
                BlockKind::Residual => &x + &h,
                BlockKind::Dense => channel_concat(&[x, h])?,
            };
        }
        Ok(x)
    }

    /// Decoder over the mixed features (shallow first).
    pub fn decode(&self, b: &Binder, mixed: &[Var]) -> Result<Var> {
        let l = self.cfg.layers();
        if mixed.len() != l {
            return Err(Error::Data(format!("decoder needs {l} mixed features, got {}", mixed.len())));
        }
        let norm = self.cfg.norms().3;
        let mut h = mixed[l - 1].clone();
        for t in 1..=l {
            if t > 1 {
                h = channel_concat(&[h, mixed[l - t].clone()])?;
            }
            h = b.deconv(&format!("dec.{t}.deconv"), &h, 2, 2)?;
            h = if t < l {
                act(&b.norm(&format!("dec.{t}.norm"), &h, norm)?, Activation::LeakyRelu(LEAKY_SLOPE))
            } else {
                act(&h, Activation::Tanh)
            };
        }
        Ok(h)
    }

    pub fn forward(&self, b: &Binder, protos: &Var, refs: &Var, groups: &[Vec<usize>]) -> Result<GenOutput> {
        if groups.len() != protos.shape().n() {
            return Err(Error::Data(format!("{} reference sets for {} samples", groups.len(), protos.shape().n())));
        }
        let content = self.encode_content(b, protos)?;
        let style = self.encode_style(b, refs, groups)?;
        let mixed = (1..=self.cfg.layers())
            .map(|g| self.mix(b, g, &content[g - 1], &style[g - 1]))
            .collect::<Result<Vec<_>>>()?;
        let image = self.decode(b, &mixed)?;
        Ok(GenOutput { image, content, style })
    }

    /// Inference-mode synthesis of one glyph from M prototypes and any
    /// number of references.
    pub fn generate<G: AsRef<GlyphImage>, H: AsRef<GlyphImage>>(
        &self,
        prototypes: &[G],
        references: &[H],
    ) -> Result<GlyphImage> {
        let protos = prototype_tensor(&[prototypes])?;
        let sb = StyleBatch::new(&[references])?;
        let b = self.binder(Mode::Eval, false);
        let out = self.forward(&b, &Var::constant(protos), &Var::constant(sb.images), &sb.groups)?;
        let content = prototypes.first().map_or(0, |p| p.as_ref().content_id);
        let style = references.first().map_or(0, |r| r.as_ref().style_id);
        GlyphImage::from_tensor(out.image.value(), style, content)
    }
}

/// Channel-stacks each sample's prototypes into `(B, M, S, S)`.
pub fn prototype_tensor<G: AsRef<GlyphImage>>(samples: &[&[G]]) -> Result<Tensor> {
    let m = samples.first().map_or(0, |s| s.len());
    let size = samples.first().and_then(|s| s.first()).map_or(0, |g| g.as_ref().size);
    let mut data = Vec::with_capacity(samples.len() * m * size * size);
    for s in samples {
        if s.len() != m {
            return Err(Error::Data(format!("samples carry {} and {m} prototypes", s.len())));
        }
        for g in s.iter() {
            if g.as_ref().size != size {
                return Err(Error::Data("prototype sizes differ".into()));
            }
            data.extend_from_slice(&g.as_ref().pixels);
        }
    }
    Ok(Tensor::new(Shape::new(samples.len(), m, size, size), data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub cfg: WNetConfig,
    pub params: ParamStore,
}

impl Critic {
    pub fn init(cfg: WNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let init = Init::Std(INIT_STD);
        let mut inp = 3;
        for (k, &w) in cfg.critic_widths.iter().enumerate() {
            init_conv(&mut p, &mut rng, &format!("critic.{}.conv", k + 1), (w, inp, 5), w, init);
            if k > 0 {
                init_norm(&mut p, &format!("critic.{}.norm", k + 1), w, Norm::Layer);
            }
            inp = w;
        }
        init_conv(&mut p, &mut rng, "critic.score", (1, inp, 1), 1, init);
        init_conv(&mut p, &mut rng, "critic.ac", (cfg.styles, inp, 1), cfg.styles, init);
        Ok(Critic { cfg, params: p })
    }

    pub fn binder(&self, track: bool) -> Binder<'_> {
        Binder::new(&self.params, Mode::Train, track)
    }

    /// Critic score `(B,1,1,1)` and style logits `(B,I,1,1)` for an
    /// `(B, 3, S, S)` triple stack.
    pub fn forward(&self, b: &Binder, x: &Var) -> Result<(Var, Var)> {
        let s = x.shape();
        if s.c() != 3 || s.h() != self.cfg.size || s.w() != self.cfg.size {
            return Err(Error::Data(format!("critic expects (B, 3, {0}, {0}), got {s}", self.cfg.size)));
        }
        let mut h = x.clone();
        for k in 1..=self.cfg.critic_widths.len() {
            h = b.conv(&format!("critic.{k}.conv"), &h, 2, 2)?;
            if k > 1 {
                h = b.norm(&format!("critic.{k}.norm"), &h, Norm::Layer)?;
            }
            h = act(&h, Activation::LeakyRelu(LEAKY_SLOPE));
        }
        let pooled = ops::sum_to(&h, Shape::new(s.n(), h.shape().c(), 1, 1));
        Ok((b.conv("critic.score", &pooled, 1, 0)?, b.conv("critic.ac", &pooled, 1, 0)?))
    }

    /// Scores the triple (prototype pick, candidate, reference pick).
    pub fn discriminate(&self, b: &Binder, proto: &Var, candidate: &Var, reference: &Var) -> Result<(Var, Var)> {
        let x = channel_concat(&[proto.clone(), candidate.clone(), reference.clone()])?;
        self.forward(b, &x)
    }
}
