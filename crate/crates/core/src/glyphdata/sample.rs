use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ContentId, GlyphImage, GlyphPack, StyleId};
use crate::error::{Error, Result};

/// A real target with its M content prototypes and N style references.
///
/// `proto_pick` and `ref_pick` are 0-based indices of the prototype and
/// reference shown to the critic alongside the candidate.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub target: Arc<GlyphImage>,
    pub prototypes: Vec<Arc<GlyphImage>>,
    pub references: Vec<Arc<GlyphImage>>,
    pub proto_pick: usize,
    pub ref_pick: usize,
}

impl TrainSample {
    pub fn style(&self) -> StyleId {
        self.target.style_id
    }

    pub fn content(&self) -> ContentId {
        self.target.content_id
    }

    /// Checks the shared-content / shared-style / distinct-content contract.
    pub fn validate(&self) -> Result<()> {
        let (i, j) = (self.style(), self.content());
        let bad = |msg: String| Err(Error::Data(format!("sample ({i}, {j}): {msg}")));
        if let Some(p) = self.prototypes.iter().find(|p| p.content_id != j || p.style_id == i) {
            return bad(format!("prototype ({}, {}) does not fit", p.style_id, p.content_id));
        }
        if let Some(r) = self.references.iter().find(|r| r.style_id != i || r.content_id == j) {
            return bad(format!("reference ({}, {}) does not fit", r.style_id, r.content_id));
        }
        if self.proto_pick >= self.prototypes.len() || self.ref_pick >= self.references.len() {
            return bad("critic pick out of range".into());
        }
        Ok(())
    }
}

/// All (style, content) pairs usable as training targets with N references:
/// the style is a training style with at least N+1 glyphs and every
/// prototype font has the content. Excluded styles are logged.
pub fn eligible_targets(pack: &GlyphPack, n: usize) -> Vec<(StyleId, ContentId)> {
    let mut out = Vec::new();
    for i in pack.training_styles() {
        let contents = pack.contents_of(i);
        if contents.len() < n + 1 {
            log::warn!("style {i} has {} glyphs, needs {} for N={n}; excluded from sampling", contents.len(), n + 1);
            continue;
        }
        out.extend(contents.into_iter().filter(|&j| pack.prototypes(j).is_some()).map(|j| (i, j)));
    }
    out
}

/// Draws `batch` samples, fully determined by `seed`.
///
/// Targets are uniform over [`eligible_targets`]; references are N distinct
/// other contents of the target style; critic picks are uniform.
pub fn sample_batch(pack: &GlyphPack, batch: usize, m: usize, n: usize, seed: u64) -> Result<Vec<TrainSample>> {
    let targets = eligible_targets(pack, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_from(pack, &targets, batch, m, n, &mut rng)
}

pub(crate) fn sample_from(
    pack: &GlyphPack,
    targets: &[(StyleId, ContentId)],
    batch: usize,
    m: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TrainSample>> {
    if m != pack.m() {
        return Err(Error::Config(format!("M = {m} but the pack has {} prototype styles", pack.m())));
    }
    if n == 0 {
        return Err(Error::Config("N must be at least 1".into()));
    }
    if targets.is_empty() {
        return Err(Error::Data(format!("no training targets with at least {} glyphs per style", n + 1)));
    }
    (0..batch)
        .map(|_| {
            let (i, j) = targets[rng.random_range(0..targets.len())];
            let others: Vec<ContentId> = pack.contents_of(i).into_iter().filter(|&s| s != j).collect();
            let references = index::sample(rng, others.len(), n)
                .into_iter()
                .map(|k| pack.get(i, others[k]).expect("listed content").clone())
                .collect();
            Ok(TrainSample {
                target: pack.get(i, j).expect("eligible target").clone(),
                prototypes: pack.prototypes(j).expect("eligible prototypes"),
                references,
                proto_pick: rng.random_range(0..m),
                ref_pick: rng.random_range(0..n),
            })
        })
        .collect()
}

/// Prototypes for one requested content plus the shared reference set.
#[derive(Clone, Debug)]
pub struct InferenceInput {
    pub content_id: ContentId,
    pub prototypes: Vec<Arc<GlyphImage>>,
    pub references: Arc<Vec<GlyphImage>>,
}

/// Pairs every requested content with its prototype glyphs and the same
/// reference set. Contents missing a prototype are returned separately.
pub fn build_inference_inputs(
    pack: &GlyphPack,
    content_ids: &[ContentId],
    style_refs: &[GlyphImage],
) -> Result<(Vec<InferenceInput>, Vec<ContentId>)> {
    if content_ids.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    if style_refs.is_empty() {
        return Err(Error::Data("at least one style reference is required".into()));
    }
    if let Some(r) = style_refs.iter().find(|r| r.size != pack.size()) {
        return Err(Error::Data(format!("reference is {}px, pack is {}px", r.size, pack.size())));
    }
    let references = Arc::new(style_refs.to_vec());
    let mut inputs = Vec::new();
    let mut skipped = Vec::new();
    for &q in content_ids {
        match pack.prototypes(q) {
            Some(prototypes) => inputs.push(InferenceInput { content_id: q, prototypes, references: references.clone() }),
            None => {
                log::warn!("content {q}: missing prototype glyph, skipped");
                skipped.push(q);
            }
        }
    }
    Ok((inputs, skipped))
}
