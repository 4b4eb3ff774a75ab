//! Deterministic synthetic corpus: each content is a fixed composition of
//! strokes, each style a transform and pen applied to every composition.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ContentId, GlyphImage, GlyphPack, Manifest, StyleId, MANIFEST_VERSION};
use crate::error::{Error, Result};

type Point = (f64, f64);

#[derive(Clone, Debug)]
struct Pen {
    thickness: f64,
    slant: f64,
    scale: (f64, f64),
    offset: (f64, f64),
    wobble: f64,
    wobble_freq: f64,
    wobble_phase: f64,
    jitter: f64,
    serif: f64,
}

/// Renders toy glyphs for one corpus seed.
#[derive(Clone, Debug)]
pub struct ToyRenderer {
    seed: u64,
    size: usize,
}

fn rng_for(seed: u64, tag: u64, a: usize, b: usize) -> ChaCha8Rng {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag;
    s = s.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ (a as u64).wrapping_mul(0x94D0_49BB_1331_11EB);
    s ^= (b as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    ChaCha8Rng::seed_from_u64(s)
}

fn grid(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    // snap to eighths so contents differ by whole structural steps
    let k = rng.random_range(0..=8) as f64 / 8.0;
    lo + (hi - lo) * k
}

impl ToyRenderer {
    pub fn new(seed: u64, size: usize) -> Self {
        ToyRenderer { seed, size }
    }

    /// Stroke skeleton of content `j` in the unit square.
    fn strokes(&self, j: ContentId) -> Vec<Vec<Point>> {
        let mut rng = rng_for(self.seed, 1, j, 0);
        let count = rng.random_range(3..=5);
        let (lo, hi) = (0.18, 0.82);
        (0..count)
            .map(|_| match rng.random_range(0..5) {
                0 => {
                    let y = grid(&mut rng, lo, hi);
                    let (a, b) = (grid(&mut rng, lo, 0.5), grid(&mut rng, 0.5, hi));
                    vec![(a, y), (b, y)]
                }
                1 => {
                    let x = grid(&mut rng, lo, hi);
                    let (a, b) = (grid(&mut rng, lo, 0.5), grid(&mut rng, 0.5, hi));
                    vec![(x, a), (x, b)]
                }
                2 => {
                    let p = (grid(&mut rng, lo, 0.5), grid(&mut rng, lo, 0.5));
                    let q = (grid(&mut rng, 0.5, hi), grid(&mut rng, 0.5, hi));
                    if rng.random_bool(0.5) {
                        vec![p, q]
                    } else {
                        vec![(p.0, q.1), (q.0, p.1)]
                    }
                }
                3 => {
                    let c = (grid(&mut rng, 0.35, 0.65), grid(&mut rng, 0.35, 0.65));
                    let r = rng.random_range(1..=3) as f64 * 0.08;
                    let start = rng.random_range(0..4) as f64 * PI / 2.0;
                    let sweep = rng.random_range(2..=4) as f64 * PI / 2.0;
                    (0..=16)
                        .map(|k| {
                            let t = start + sweep * k as f64 / 16.0;
                            (c.0 + r * t.cos(), c.1 + r * t.sin())
                        })
                        .collect()
                }
                _ => {
                    let (x0, y0) = (grid(&mut rng, lo, 0.5), grid(&mut rng, lo, 0.5));
                    let (x1, y1) = (x0 + grid(&mut rng, 0.15, 0.35), y0 + grid(&mut rng, 0.15, 0.35));
                    vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
                }
            })
            .collect()
    }

    fn pen(&self, i: StyleId, prototype: bool) -> Pen {
        let mut rng = rng_for(self.seed, 2, i, 0);
        Pen {
            thickness: rng.random_range(0.035..0.085),
            slant: rng.random_range(-0.3..0.3),
            scale: (rng.random_range(0.75..1.0), rng.random_range(0.75..1.0)),
            offset: (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
            wobble: if prototype { 0.0 } else { rng.random_range(0.0..0.025) },
            wobble_freq: rng.random_range(1.0..3.0),
            wobble_phase: rng.random_range(0.0..2.0 * PI),
            jitter: if prototype { 0.0 } else { rng.random_range(0.005..0.02) },
            serif: if prototype && rng.random_bool(0.5) { 0.05 } else { 0.0 },
        }
    }

    fn transform(&self, pen: &Pen, (x, y): Point, rng: &mut ChaCha8Rng) -> Point {
        let jx = if pen.jitter > 0.0 { rng.random_range(-pen.jitter..pen.jitter) } else { 0.0 };
        let jy = if pen.jitter > 0.0 { rng.random_range(-pen.jitter..pen.jitter) } else { 0.0 };
        let x = x + pen.wobble * (2.0 * PI * pen.wobble_freq * y + pen.wobble_phase).sin() + jx;
        let y = y + pen.wobble * (2.0 * PI * pen.wobble_freq * x + pen.wobble_phase).cos() + jy;
        let x = x + pen.slant * (0.5 - y);
        let x = 0.5 + (x - 0.5) * pen.scale.0 + pen.offset.0;
        let y = 0.5 + (y - 0.5) * pen.scale.1 + pen.offset.1;
        (x.clamp(0.04, 0.96), y.clamp(0.04, 0.96))
    }

    /// Renders content `j` in style `i`; `prototype` selects the clean
    /// font-like pen (no wobble, no jitter).
    pub fn render(&self, i: StyleId, j: ContentId, prototype: bool) -> GlyphImage {
        let pen = self.pen(i, prototype);
        let mut rng = rng_for(self.seed, 3, i, j);
        let mut segments: Vec<(Point, Point)> = Vec::new();
        for stroke in self.strokes(j) {
            // densify so the wobble bends long strokes
            let mut dense = Vec::new();
            for w in stroke.windows(2) {
                let (a, b) = (w[0], w[1]);
                let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
                let k = (len / 0.06).ceil().max(1.0) as usize;
                for t in 0..k {
                    let u = t as f64 / k as f64;
                    dense.push((a.0 + (b.0 - a.0) * u, a.1 + (b.1 - a.1) * u));
                }
            }
            dense.push(*stroke.last().expect("non-empty stroke"));
            let pts: Vec<Point> = dense.into_iter().map(|p| self.transform(&pen, p, &mut rng)).collect();
            segments.extend(pts.windows(2).map(|w| (w[0], w[1])));
            if pen.serif > 0.0 {
                for &(x, y) in [pts[0], pts[pts.len() - 1]].iter() {
                    segments.push(((x - pen.serif, y), (x + pen.serif, y)));
                }
            }
        }
        let n = self.size;
        let half = pen.thickness / 2.0;
        let pixels = (0..n * n)
            .map(|k| {
                let p = (((k % n) as f64 + 0.5) / n as f64, ((k / n) as f64 + 0.5) / n as f64);
                let d = segments.iter().map(|&(a, b)| seg_dist(p, a, b)).fold(f64::INFINITY, f64::min);
                let ink = ((half - d) * n as f64 + 0.5).clamp(0.0, 1.0);
                // quantize to 8 bits so exported packs reload exactly
                let byte = (255.0 * (1.0 - ink)).round();
                byte / 127.5 - 1.0
            })
            .collect();
        GlyphImage { pixels, size: n, style_id: i, content_id: j }
    }
}

fn seg_dist(p: Point, a: Point, b: Point) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    ((wx - t * vx).powi(2) + (wy - t * vy).powi(2)).sqrt()
}

/// Complete synthetic pack: styles `1..=m` are the prototype fonts, the last
/// style is held out when at least two non-prototype styles exist.
pub fn toy_pack(seed: u64, styles: usize, contents: usize, m: usize, size: usize) -> Result<GlyphPack> {
    if m == 0 || styles <= m {
        return Err(Error::Config(format!("toy pack needs I > M >= 1, got I={styles} M={m}")));
    }
    if contents < 2 {
        return Err(Error::Config(format!("toy pack needs J >= 2, got {contents}")));
    }
    let holdout = if styles >= m + 2 { vec![styles] } else { vec![] };
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        styles,
        contents,
        prototype_styles: (1..=m).collect(),
        holdout_styles: holdout,
        charset: (1..=contents).map(|j| format!("toy-{j}")).collect(),
        size,
    };
    let mut pack = GlyphPack::new(manifest)?;
    let r = ToyRenderer::new(seed, size);
    for i in 1..=styles {
        for j in 1..=contents {
            pack.insert(r.render(i, j, i <= m))?;
        }
    }
    Ok(pack)
}
