//! Small VGG-style classifiers whose intermediate activations serve as the
//! perceptual feature taps.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use gwnet_tensor::{backward, ops, Activation, Shape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{read_container, write_container, PERCEP_MAGIC};
use crate::config::{format_list, parse_list, KeyValues};
use crate::error::{Error, Result};
use crate::glyphdata::{batch_tensor, GlyphImage, GlyphPack};
use crate::losses::cross_entropy;
use crate::nn::{act, init_conv, Binder, Init, Mode, ParamStore};
use crate::optim::Adam;

/// Convolutions per block.
pub const BLOCK_DEPTHS: [usize; 5] = [2, 2, 3, 3, 3];
pub const DEFAULT_WIDTHS: [usize; 5] = [16, 32, 64, 128, 128];

/// Named activation taps: the last convolution of each block, before
/// pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tap {
    P1_2,
    P2_2,
    P3_3,
    P4_3,
    P5_3,
}

impl Tap {
    pub const ALL: [Tap; 5] = [Tap::P1_2, Tap::P2_2, Tap::P3_3, Tap::P4_3, Tap::P5_3];
    pub const HIGH: [Tap; 2] = [Tap::P4_3, Tap::P5_3];

    pub fn block(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["phi1-2", "phi2-2", "phi3-3", "phi4-3", "phi5-3"][self as usize]
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Tap> {
        Tap::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| Error::Config(format!("unknown tap `{s}`")))
    }
}

/// Which classification heads a network carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heads {
    Content,
    Style,
    Both,
}

impl Heads {
    pub fn content(self) -> bool {
        matches!(self, Heads::Content | Heads::Both)
    }
    pub fn style(self) -> bool {
        matches!(self, Heads::Style | Heads::Both)
    }
}

impl fmt::Display for Heads {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Heads::Content => "content",
            Heads::Style => "style",
            Heads::Both => "both",
        })
    }
}

impl FromStr for Heads {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "content" => Ok(Heads::Content),
            "style" => Ok(Heads::Style),
            "both" => Ok(Heads::Both),
            _ => Err(format!("unknown heads `{s}` (content, style or both)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub size: usize,
    pub widths: [usize; 5],
    pub heads: Heads,
    pub contents: usize,
    pub styles: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub cfg: ClassifierConfig,
    pub params: ParamStore,
}

/// Accuracy of each head on a labelled set (NaN for an absent head).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Accuracy {
    pub content: f64,
    pub style: f64,
}

impl Classifier {
    pub fn init(cfg: ClassifierConfig, seed: u64) -> Result<Self> {
        if !matches!(cfg.size, 32 | 64) {
            return Err(Error::Config(format!("classifier size {} unsupported", cfg.size)));
        }
        if cfg.widths.contains(&0) {
            return Err(Error::Config("classifier widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut inp = 1;
        for (blk, (&depth, &w)) in BLOCK_DEPTHS.iter().zip(&cfg.widths).enumerate() {
            for k in 1..=depth {
                init_conv(&mut p, &mut rng, &conv_name(blk, k), (w, inp, 3), w, Init::He);
                inp = w;
            }
        }
        let glorot = Init::Std((1.0 / inp as f64).sqrt());
        if cfg.heads.content() {
            init_conv(&mut p, &mut rng, "head.content", (cfg.contents, inp, 1), cfg.contents, glorot);
        }
        if cfg.heads.style() {
            init_conv(&mut p, &mut rng, "head.style", (cfg.styles, inp, 1), cfg.styles, glorot);
        }
        Ok(Classifier { cfg, params: p })
    }

    /// Parameters are never tracked: the networks stay frozen while
    /// gradients flow through them to the input.
    pub fn binder(&self) -> Binder<'_> {
        Binder::new(&self.params, Mode::Eval, false)
    }

    fn tracked_binder(&self) -> Binder<'_> {
        Binder::new(&self.params, Mode::Eval, true)
    }

    /// Runs the trunk up to the deepest requested tap.
    pub fn features(&self, b: &Binder, x: &Var, taps: &[Tap]) -> Result<BTreeMap<Tap, Var>> {
        let s = x.shape();
        if s.c() != 1 || s.h() != self.cfg.size || s.w() != self.cfg.size {
            return Err(Error::Data(format!("classifier expects (B, 1, {0}, {0}), got {s}", self.cfg.size)));
        }
        let last = taps.iter().map(|t| t.block()).max();
        let mut out = BTreeMap::new();
        let Some(last) = last else { return Ok(out) };
        let mut h = x.clone();
        for blk in 0..=last {
            if blk > 0 {
                h = ops::max_pool2(&h);
            }
            for k in 1..=BLOCK_DEPTHS[blk] {
                h = act(&b.conv(&conv_name(blk, k), &h, 1, 1)?, Activation::Relu);
            }
            if taps.contains(&Tap::ALL[blk]) {
                out.insert(Tap::ALL[blk], h.clone());
            }
        }
        Ok(out)
    }

    /// Content and style logits `(B, K, 1, 1)` from the globally averaged
    /// last tap.
    pub fn logits(&self, b: &Binder, x: &Var) -> Result<(Option<Var>, Option<Var>)> {
        let f = self.features(b, x, &[Tap::P5_3])?.remove(&Tap::P5_3).expect("requested tap");
        let pooled = ops::mean_to(&f, Shape::new(f.shape().n(), f.shape().c(), 1, 1));
        let content = if self.cfg.heads.content() { Some(b.conv("head.content", &pooled, 1, 0)?) } else { None };
        let style = if self.cfg.heads.style() { Some(b.conv("head.style", &pooled, 1, 0)?) } else { None };
        Ok((content, style))
    }

    /// Predicted (content, style) class indices per glyph.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<(Option<usize>, Option<usize>)>> {
        let _g = gwnet_tensor::no_grad();
        let mut out = Vec::with_capacity(images.shape().n());
        let chunk = 32;
        let n = images.shape().n();
        let all = Var::constant(images.clone());
        for start in (0..n).step_by(chunk) {
            let len = chunk.min(n - start);
            let (c, s) = self.logits(&self.binder(), &ops::slice_batch(&all, start, len))?;
            for r in 0..len {
                out.push((c.as_ref().map(|c| argmax_row(c.value(), r)), s.as_ref().map(|s| argmax_row(s.value(), r))));
            }
        }
        Ok(out)
    }

    /// Fraction of glyphs whose predicted ids match their own ids.
    pub fn accuracy<G: AsRef<GlyphImage>>(&self, glyphs: &[G]) -> Result<Accuracy> {
        if glyphs.is_empty() {
            return Ok(Accuracy { content: f64::NAN, style: f64::NAN });
        }
        let preds = self.predict(&batch_tensor(glyphs))?;
        let mut content_hits = 0usize;
        let mut style_hits = 0usize;
        for (p, g) in preds.iter().zip(glyphs) {
            let g = g.as_ref();
            content_hits += usize::from(p.0.is_some() && p.0 == g.content_id.checked_sub(1));
            style_hits += usize::from(p.1.is_some() && p.1 == g.style_id.checked_sub(1));
        }
        let n = glyphs.len() as f64;
        Ok(Accuracy {
            content: if self.cfg.heads.content() { content_hits as f64 / n } else { f64::NAN },
            style: if self.cfg.heads.style() { style_hits as f64 / n } else { f64::NAN },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut kv = KeyValues::new();
        kv.set("size", self.cfg.size);
        kv.set("widths", format_list(&self.cfg.widths));
        kv.set("heads", self.cfg.heads);
        kv.set("contents", self.cfg.contents);
        kv.set("styles", self.cfg.styles);
        let blobs: Vec<(String, Tensor)> = self.params.iter().map(|(n, p)| (n.clone(), p.value.clone())).collect();
        write_container(path, PERCEP_MAGIC, &kv, &blobs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (kv, blobs) = read_container(path, PERCEP_MAGIC)?;
        let widths: Vec<usize> = parse_list(&kv.require::<String>("widths")?)?;
        let cfg = ClassifierConfig {
            size: kv.require("size")?,
            widths: widths.try_into().map_err(|_| Error::Checkpoint("classifier needs 5 widths".into()))?,
            heads: kv.require("heads")?,
            contents: kv.require("contents")?,
            styles: kv.require("styles")?,
        };
        let mut net = Classifier::init(cfg, 0)?;
        load_blobs(&mut net.params, blobs)?;
        Ok(net)
    }
}

/// Overwrites every parameter from named blobs, requiring an exact match of
/// names and shapes.
pub(crate) fn load_blobs(store: &mut ParamStore, blobs: Vec<(String, Tensor)>) -> Result<()> {
    let mut seen = 0;
    for (name, t) in blobs {
        if store.param(&name).is_none() {
            return Err(Error::Checkpoint(format!("unexpected parameter `{name}`")));
        }
        store.set(&name, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
        seen += 1;
    }
    if seen != store.len() {
        return Err(Error::Checkpoint(format!("checkpoint holds {seen} of {} parameters", store.len())));
    }
    Ok(())
}

fn conv_name(blk: usize, k: usize) -> String {
    format!("block{}.conv{k}", blk + 1)
}

fn argmax_row(t: &Tensor, r: usize) -> usize {
    let k = t.shape().c();
    let row = &t.data()[r * k..(r + 1) * k];
    (0..k).fold(0, |best, i| if row[i] > row[best] { i } else { best })
}

/// Classifier training hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub widths: [usize; 5],
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        ClassifierTraining { epochs: 30, batch: 32, lr: 1e-3, seed: 0, widths: DEFAULT_WIDTHS }
    }
}

impl ClassifierTraining {
    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("classifier_epochs", self.epochs);
        kv.set("classifier_batch", self.batch);
        kv.set("classifier_lr", self.lr);
        kv.set("classifier_widths", format_list(&self.widths));
    }

    pub fn read_kv(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read_into("classifier_epochs", &mut self.epochs)?;
        kv.read_into("classifier_batch", &mut self.batch)?;
        kv.read_into("classifier_lr", &mut self.lr)?;
        kv.read_into("seed", &mut self.seed)?;
        if let Some(s) = kv.get_str("classifier_widths") {
            let v: Vec<usize> = parse_list(s)?;
            self.widths = v.try_into().map_err(|_| Error::Config("classifier_widths needs 5 values".into()))?;
        }
        Ok(())
    }
}

/// Trains a classifier with the requested heads on every glyph of the pack
/// by cross-entropy. Returns the network and its training-set accuracy.
pub fn train_classifier(pack: &GlyphPack, heads: Heads, opts: &ClassifierTraining) -> Result<(Classifier, Accuracy)> {
    let glyphs: Vec<&GlyphImage> = pack.iter().map(|g| g.as_ref()).collect();
    train_on(&glyphs, pack.size(), pack.contents(), pack.styles(), heads, opts)
}

/// As [`train_classifier`] over an explicit labelled set.
pub fn train_on(
    glyphs: &[&GlyphImage],
    size: usize,
    contents: usize,
    styles: usize,
    heads: Heads,
    opts: &ClassifierTraining,
) -> Result<(Classifier, Accuracy)> {
    let distinct = |f: &dyn Fn(&GlyphImage) -> usize| {
        let mut v: Vec<usize> = glyphs.iter().map(|g| f(g)).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    if heads.content() && distinct(&|g| g.content_id) < 2 {
        return Err(Error::Data("content head needs at least 2 content classes".into()));
    }
    if heads.style() && distinct(&|g| g.style_id) < 2 {
        return Err(Error::Data("style head needs at least 2 style classes".into()));
    }
    if opts.batch == 0 {
        return Err(Error::Config("classifier batch must be positive".into()));
    }
    let cfg = ClassifierConfig { size, widths: opts.widths, heads, contents, styles };
    let mut net = Classifier::init(cfg, opts.seed)?;
    let mut adam = Adam::new(opts.lr, 0.9, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xC1A5_5EED);
    let mut order: Vec<usize> = (0..glyphs.len()).collect();
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(opts.batch) {
            let batch: Vec<&GlyphImage> = chunk.iter().map(|&k| glyphs[k]).collect();
            let x = Var::constant(batch_tensor(&batch));
            let b = net.tracked_binder();
            let (c, s) = net.logits(&b, &x)?;
            let mut loss = Var::scalar(0.0);
            if let Some(c) = c {
                let labels: Vec<usize> = batch.iter().map(|g| g.content_id - 1).collect();
                loss = &loss + &cross_entropy(&c, &labels)?;
            }
            if let Some(s) = s {
                let labels: Vec<usize> = batch.iter().map(|g| g.style_id - 1).collect();
                loss = &loss + &cross_entropy(&s, &labels)?;
            }
            if !loss.item().is_finite() {
                return Err(Error::Numeric(format!("classifier loss became {} in epoch {epoch}", loss.item())));
            }
            total += loss.item() * batch.len() as f64;
            let grads = b.grads(&backward(&loss)?);
            drop(b);
            adam.step(&mut net.params, &grads)?;
        }
        log::debug!("classifier ({heads}) epoch {epoch}: loss {:.4}", total / glyphs.len() as f64);
    }
    let acc = net.accuracy(glyphs)?;
    log::info!("classifier ({heads}): train accuracy content {:.3} style {:.3}", acc.content, acc.style);
    Ok((net, acc))
}

pub const PHI_REAL_FILE: &str = "phi_real.gwnp";
pub const PHI_CONTENT_FILE: &str = "phi_content.gwnp";
pub const PHI_STYLE_FILE: &str = "phi_style.gwnp";

/// The three frozen networks of the perceptual losses.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualSet {
    /// Two-headed network compared at every tap against the real target.
    pub real: Classifier,
    pub content: Classifier,
    pub style: Classifier,
}

impl PerceptualSet {
    /// Trains all three networks on the pack; seeds are `seed`, `seed + 1`
    /// and `seed + 2`. Returns training accuracies in the same order.
    pub fn train(pack: &GlyphPack, opts: &ClassifierTraining) -> Result<(Self, [Accuracy; 3])> {
        let with_seed = |k: u64| ClassifierTraining { seed: opts.seed.wrapping_add(k), ..opts.clone() };
        let (real, a) = train_classifier(pack, Heads::Both, &with_seed(0))?;
        let (content, b) = train_classifier(pack, Heads::Content, &with_seed(1))?;
        let (style, c) = train_classifier(pack, Heads::Style, &with_seed(2))?;
        Ok((PerceptualSet { real, content, style }, [a, b, c]))
    }

    pub fn nets(&self) -> crate::losses::PerceptualNets<'_> {
        crate::losses::PerceptualNets { real: &self.real, content: &self.content, style: &self.style }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.real.save(&dir.join(PHI_REAL_FILE))?;
        self.content.save(&dir.join(PHI_CONTENT_FILE))?;
        self.style.save(&dir.join(PHI_STYLE_FILE))
    }

    /// Loads the set from `dir`; a missing file is an I/O error naming it.
    pub fn load(dir: &Path) -> Result<Self> {
        let load = |name: &str| Classifier::load(&dir.join(name));
        Ok(PerceptualSet { real: load(PHI_REAL_FILE)?, content: load(PHI_CONTENT_FILE)?, style: load(PHI_STYLE_FILE)? })
    }

    /// Whether all three files exist in `dir`.
    pub fn exists(dir: &Path) -> bool {
        [PHI_REAL_FILE, PHI_CONTENT_FILE, PHI_STYLE_FILE].iter().all(|f| dir.join(f).is_file())
    }
}
