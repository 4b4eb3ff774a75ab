//! Glyph packs: the (style, content) index, PNG import/export, the synthetic
//! toy corpus, and sampling of training triples.

mod io;
pub(crate) mod sample;
mod toy;

use std::collections::BTreeMap;
use std::sync::Arc;

use gwnet_tensor::{Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{decode_png, encode_png, export_directory, import_directory, read_glyph_png, write_sheet, write_sheet_rows};
pub use sample::{build_inference_inputs, eligible_targets, sample_batch, InferenceInput, TrainSample};
pub use toy::{toy_pack, ToyRenderer};

/// 1-based style index `i`.
pub type StyleId = usize;
/// 1-based content index `j`.
pub type ContentId = usize;

/// One square grayscale glyph with values in [−1, 1] (white is +1).
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphImage {
    pub pixels: Vec<f64>,
    pub size: usize,
    pub style_id: StyleId,
    pub content_id: ContentId,
}

impl GlyphImage {
    pub fn new(pixels: Vec<f64>, size: usize, style_id: StyleId, content_id: ContentId) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(Error::Data(format!("glyph needs {} pixels, got {}", size * size, pixels.len())));
        }
        if let Some(v) = pixels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(GlyphImage { pixels, size, style_id, content_id })
    }

    pub fn blank(size: usize, style_id: StyleId, content_id: ContentId) -> Self {
        GlyphImage { pixels: vec![1.0; size * size], size, style_id, content_id }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(Shape::new(1, 1, self.size, self.size), self.pixels.clone()).expect("glyph size")
    }

    /// Builds a glyph from a 1×1×S×S tensor, clamping into [−1, 1].
    pub fn from_tensor(t: &Tensor, style_id: StyleId, content_id: ContentId) -> Result<Self> {
        let s = t.shape();
        if s.n() != 1 || s.c() != 1 || s.h() != s.w() {
            return Err(Error::Data(format!("expected a 1x1xSxS glyph tensor, got {s}")));
        }
        let pixels = t.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Ok(GlyphImage { pixels, size: s.h(), style_id, content_id })
    }
}

/// Stacks glyphs into an `(n, 1, S, S)` batch.
pub fn batch_tensor<G: AsRef<GlyphImage>>(glyphs: &[G]) -> Tensor {
    let size = glyphs.first().map_or(0, |g| g.as_ref().size);
    let mut data = Vec::with_capacity(glyphs.len() * size * size);
    for g in glyphs {
        data.extend_from_slice(&g.as_ref().pixels);
    }
    Tensor::new(Shape::new(glyphs.len(), 1, size, size), data).expect("uniform glyph sizes")
}

impl AsRef<GlyphImage> for GlyphImage {
    fn as_ref(&self) -> &GlyphImage {
        self
    }
}

/// On-disk description of a pack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(rename = "I")]
    pub styles: usize,
    #[serde(rename = "J")]
    pub contents: usize,
    pub prototype_styles: Vec<StyleId>,
    pub holdout_styles: Vec<StyleId>,
    #[serde(default)]
    pub charset: Vec<String>,
    #[serde(default = "default_size")]
    pub size: usize,
}

fn default_size() -> usize {
    64
}

pub const MANIFEST_VERSION: u32 = 1;

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: String| Err(Error::Data(format!("manifest field `{name}`: {msg}")));
        if self.version != MANIFEST_VERSION {
            return field("version", format!("unsupported version {}", self.version));
        }
        if self.styles == 0 {
            return field("I", "must be at least 1".into());
        }
        if self.contents == 0 {
            return field("J", "must be at least 1".into());
        }
        if self.prototype_styles.is_empty() {
            return field("prototype_styles", "at least one prototype style is required".into());
        }
        if !matches!(self.size, 32 | 64) {
            return field("size", format!("{} is not a supported glyph size (32 or 64)", self.size));
        }
        for (name, list) in [("prototype_styles", &self.prototype_styles), ("holdout_styles", &self.holdout_styles)] {
            if let Some(bad) = list.iter().find(|&&s| s == 0 || s > self.styles) {
                return field(name, format!("style {bad} outside 1..={}", self.styles));
            }
            let mut seen = list.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != list.len() {
                return field(name, "duplicate style ids".into());
            }
        }
        if let Some(s) = self.holdout_styles.iter().find(|s| self.prototype_styles.contains(s)) {
            return field("holdout_styles", format!("style {s} is also a prototype style"));
        }
        if !self.charset.is_empty() && self.charset.len() != self.contents {
            return field("charset", format!("{} labels for J = {}", self.charset.len(), self.contents));
        }
        Ok(())
    }
}

/// Sparse (style, content) → glyph index plus the prototype/holdout split.
#[derive(Clone, Debug)]
pub struct GlyphPack {
    pub manifest: Manifest,
    images: BTreeMap<(StyleId, ContentId), Arc<GlyphImage>>,
}

impl GlyphPack {
    pub fn new(manifest: Manifest) -> Result<Self> {
        manifest.validate()?;
        Ok(GlyphPack { manifest, images: BTreeMap::new() })
    }

    pub fn styles(&self) -> usize {
        self.manifest.styles
    }

    pub fn contents(&self) -> usize {
        self.manifest.contents
    }

    pub fn size(&self) -> usize {
        self.manifest.size
    }

    pub fn m(&self) -> usize {
        self.manifest.prototype_styles.len()
    }

    pub fn prototype_styles(&self) -> &[StyleId] {
        &self.manifest.prototype_styles
    }

    pub fn holdout_styles(&self) -> &[StyleId] {
        &self.manifest.holdout_styles
    }

    /// Styles whose glyphs serve as training targets: neither prototype nor
    /// holdout.
    pub fn training_styles(&self) -> Vec<StyleId> {
        (1..=self.styles())
            .filter(|s| !self.manifest.prototype_styles.contains(s) && !self.manifest.holdout_styles.contains(s))
            .collect()
    }

    pub fn insert(&mut self, glyph: GlyphImage) -> Result<()> {
        let (i, j) = (glyph.style_id, glyph.content_id);
        if i == 0 || i > self.styles() || j == 0 || j > self.contents() {
            return Err(Error::Data(format!("glyph ids ({i}, {j}) outside 1..={} x 1..={}", self.styles(), self.contents())));
        }
        if glyph.size != self.size() {
            return Err(Error::Data(format!("glyph ({i}, {j}) is {}px, pack is {}px", glyph.size, self.size())));
        }
        self.images.insert((i, j), Arc::new(glyph));
        Ok(())
    }

    pub fn get(&self, style: StyleId, content: ContentId) -> Option<&Arc<GlyphImage>> {
        self.images.get(&(style, content))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<GlyphImage>> {
        self.images.values()
    }

    /// Contents available for `style`, ascending.
    pub fn contents_of(&self, style: StyleId) -> Vec<ContentId> {
        self.images.range((style, 0)..(style + 1, 0)).map(|(&(_, j), _)| j).collect()
    }

    /// Rejects packs whose prototype fonts are empty.
    pub fn check_prototypes(&self) -> Result<()> {
        for &c in self.prototype_styles() {
            if self.contents_of(c).is_empty() {
                return Err(Error::Data(format!("prototype style {c} has no glyphs")));
            }
        }
        Ok(())
    }

    /// The M prototype glyphs for content `j`, in prototype order.
    pub fn prototypes(&self, j: ContentId) -> Option<Vec<Arc<GlyphImage>>> {
        self.prototype_styles().iter().map(|&c| self.get(c, j).cloned()).collect()
    }

    /// Glyph counts per style, for logging.
    pub fn stats(&self) -> String {
        let per_style: Vec<String> =
            (1..=self.styles()).map(|s| format!("{s}:{}", self.contents_of(s).len())).collect();
        format!(
            "{} glyphs, I={} J={} size={} prototypes={:?} holdout={:?} per-style [{}]",
            self.len(),
            self.styles(),
            self.contents(),
            self.size(),
            self.prototype_styles(),
            self.holdout_styles(),
            per_style.join(" ")
        )
    }
}
