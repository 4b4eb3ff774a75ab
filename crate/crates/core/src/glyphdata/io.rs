use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, Luma};

use super::{GlyphImage, GlyphPack, Manifest, MANIFEST_VERSION};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn from_byte(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

/// Reads an 8-bit PNG (converted to grayscale) of the expected size.
pub fn read_glyph_png(path: &Path, size: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes, size).map_err(|msg| Error::Image { path: path.to_path_buf(), msg })
}

pub fn decode_png(bytes: &[u8], size: usize) -> std::result::Result<Vec<f64>, String> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| e.to_string())?;
    if img.width() as usize != size || img.height() as usize != size {
        return Err(format!("image is {}x{}, expected {size}x{size}", img.width(), img.height()));
    }
    Ok(img.to_luma8().pixels().map(|p| from_byte(p.0[0])).collect())
}

pub fn encode_png(pixels: &[f64], width: usize, height: usize) -> Vec<u8> {
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([to_byte(pixels[y as usize * width + x as usize])])
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encode");
    out.into_inner()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn glyph_path(dir: &Path, style: usize, content: usize) -> PathBuf {
    dir.join(style.to_string()).join(format!("{content}.png"))
}

/// Loads `<dir>/<style_id>/<content_id>.png` for every id in the manifest.
/// Missing files are skipped; a wrong-sized file fails with its path.
pub fn import_directory(dir: &Path, manifest: Manifest) -> Result<GlyphPack> {
    let mut pack = GlyphPack::new(manifest)?;
    let size = pack.size();
    for i in 1..=pack.styles() {
        for j in 1..=pack.contents() {
            let path = glyph_path(dir, i, j);
            if !path.exists() {
                continue;
            }
            let pixels = read_glyph_png(&path, size)?;
            pack.insert(GlyphImage { pixels, size, style_id: i, content_id: j })?;
        }
    }
    pack.check_prototypes()?;
    log::info!("loaded pack from {}: {}", dir.display(), pack.stats());
    Ok(pack)
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, text.as_bytes())
    }
}

impl GlyphPack {
    /// Loads a pack directory written by [`export_directory`].
    pub fn load(dir: &Path) -> Result<GlyphPack> {
        let manifest = Manifest::load(&dir.join(MANIFEST_FILE))?;
        import_directory(dir, manifest)
    }
}

/// Writes every glyph as an 8-bit PNG plus `manifest.json`.
pub fn export_directory(pack: &GlyphPack, dir: &Path) -> Result<()> {
    debug_assert_eq!(pack.manifest.version, MANIFEST_VERSION);
    for i in 1..=pack.styles() {
        let sub = dir.join(i.to_string());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    }
    for g in pack.iter() {
        write_atomic(&glyph_path(dir, g.style_id, g.content_id), &encode_png(&g.pixels, g.size, g.size))?;
    }
    pack.manifest.save(&dir.join(MANIFEST_FILE))
}

/// Writes a grid PNG with one row per inner vector. Missing cells are left
/// white.
pub fn write_sheet_rows(path: &Path, rows: &[Vec<Option<&GlyphImage>>]) -> Result<()> {
    let size = rows.iter().flatten().flatten().map(|g| g.size).next().unwrap_or(1);
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0).max(1);
    let (w, h) = (cols * size, rows.len().max(1) * size);
    let mut canvas = vec![1.0; w * h];
    for (r, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let Some(g) = cell else { continue };
            for y in 0..size {
                let dst = (r * size + y) * w + c * size;
                canvas[dst..dst + size].copy_from_slice(&g.pixels[y * size..(y + 1) * size]);
            }
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_atomic(path, &encode_png(&canvas, w, h))
}

/// Glyph sheet of a pack: row = style, column = content.
pub fn write_sheet(path: &Path, pack: &GlyphPack, styles: &[usize], contents: &[usize]) -> Result<()> {
    let rows: Vec<Vec<Option<&GlyphImage>>> = styles
        .iter()
        .map(|&i| contents.iter().map(|&j| pack.get(i, j).map(|g| g.as_ref())).collect())
        .collect();
    write_sheet_rows(path, &rows)
}
