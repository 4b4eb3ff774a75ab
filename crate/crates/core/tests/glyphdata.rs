use std::collections::BTreeMap;
use std::path::Path;

use gwnet::glyphdata::*;
use gwnet::Error;
use proptest::prelude::*;

fn write_gray(path: &Path, size: u32, value: u8) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    image::GrayImage::from_pixel(size, size, image::Luma([value])).save(path).unwrap();
}

fn manifest(styles: usize, contents: usize, protos: Vec<usize>, size: usize) -> Manifest {
    Manifest {
        version: MANIFEST_VERSION,
        styles,
        contents,
        prototype_styles: protos,
        holdout_styles: vec![],
        charset: vec![],
        size,
    }
}

/// Prototypes 1 and 2, training styles 3..=7, held-out style 8.
fn sampling_pack() -> GlyphPack {
    toy_pack(3, 8, 12, 2, 32).unwrap()
}

#[test]
fn import_maps_endpoint_and_mid_gray_bytes() {
    let dir = tempfile::tempdir().unwrap();
    write_gray(&dir.path().join("1/1.png"), 32, 255);
    write_gray(&dir.path().join("1/2.png"), 32, 0);
    write_gray(&dir.path().join("2/1.png"), 32, 128);
    let pack = import_directory(dir.path(), manifest(2, 2, vec![1], 32)).unwrap();
    assert_eq!(pack.len(), 3, "missing files are tolerated");
    assert!(pack.get(1, 1).unwrap().pixels.iter().all(|&v| v == 1.0));
    assert!(pack.get(1, 2).unwrap().pixels.iter().all(|&v| v == -1.0));
    let gray = 128.0 / 127.5 - 1.0;
    assert!(pack.get(2, 1).unwrap().pixels.iter().all(|&v| v == gray));
    assert!((gray - 0.003_921_568_627_450_98).abs() < 1e-15);
}

#[test]
fn wrong_size_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_gray(&dir.path().join("1/1.png"), 32, 255);
    write_gray(&dir.path().join("1/2.png"), 16, 255);
    let err = import_directory(dir.path(), manifest(1, 2, vec![1], 32)).unwrap_err();
    assert!(err.to_string().contains("2.png"), "{err}");
}

#[test]
fn empty_prototype_style_rejects_pack() {
    let dir = tempfile::tempdir().unwrap();
    write_gray(&dir.path().join("2/1.png"), 32, 255);
    let err = import_directory(dir.path(), manifest(2, 1, vec![1], 32)).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
}

#[test]
fn malformed_manifest_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    std::fs::write(&path, r#"{"version": 1, "I": 3, "J": 4, "prototype_styles": [5], "holdout_styles": []}"#).unwrap();
    let err = Manifest::load(&path).unwrap_err().to_string();
    assert!(err.contains("prototype_styles"), "{err}");
    std::fs::write(&path, r#"{"version": 1, "J": 4, "prototype_styles": [1], "holdout_styles": []}"#).unwrap();
    let err = Manifest::load(&path).unwrap_err().to_string();
    assert!(err.contains('I'), "{err}");
}

#[test]
fn export_import_round_trip_is_lossless() {
    let pack = toy_pack(11, 4, 6, 2, 32).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_directory(&pack, dir.path()).unwrap();
    let back = GlyphPack::load(dir.path()).unwrap();
    assert_eq!(back.manifest, pack.manifest);
    assert_eq!(back.len(), pack.len());
    for g in pack.iter() {
        assert_eq!(back.get(g.style_id, g.content_id).unwrap().pixels, g.pixels);
    }
}

#[test]
fn toy_pack_is_deterministic_and_in_range() {
    let a = toy_pack(7, 5, 30, 3, 64).unwrap();
    let b = toy_pack(7, 5, 30, 3, 64).unwrap();
    assert_eq!((a.styles(), a.contents(), a.len()), (5, 30, 150));
    assert_eq!(a.prototype_styles(), &[1, 2, 3]);
    assert_eq!(a.holdout_styles(), &[5]);
    for g in a.iter() {
        assert_eq!(g.pixels, b.get(g.style_id, g.content_id).unwrap().pixels);
        assert!(g.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
        // every glyph has ink
        assert!(g.pixels.iter().any(|&v| v < 0.0));
    }
    assert_ne!(a.get(4, 1).unwrap().pixels, a.get(4, 2).unwrap().pixels);
    assert_ne!(toy_pack(8, 5, 30, 3, 64).unwrap().get(4, 1).unwrap().pixels, a.get(4, 1).unwrap().pixels);
}

#[test]
fn sampling_replays_from_seed() {
    let pack = sampling_pack();
    let key = |b: &[TrainSample]| -> Vec<(usize, usize, Vec<usize>, usize, usize)> {
        b.iter()
            .map(|s| (s.style(), s.content(), s.references.iter().map(|r| r.content_id).collect(), s.proto_pick, s.ref_pick))
            .collect()
    };
    let a = sample_batch(&pack, 16, 2, 4, 99).unwrap();
    assert_eq!(key(&a), key(&sample_batch(&pack, 16, 2, 4, 99).unwrap()));
    assert_ne!(key(&a), key(&sample_batch(&pack, 16, 2, 4, 100).unwrap()));
}

#[test]
fn exhausting_references_uses_every_other_content() {
    let pack = sampling_pack();
    for s in sample_batch(&pack, 20, 2, 11, 5).unwrap() {
        let mut refs: Vec<usize> = s.references.iter().map(|r| r.content_id).collect();
        refs.sort_unstable();
        let expected: Vec<usize> = (1..=12).filter(|&c| c != s.content()).collect();
        assert_eq!(refs, expected);
    }
}

#[test]
fn styles_with_too_few_glyphs_are_excluded() {
    let pack = sampling_pack();
    assert!(eligible_targets(&pack, 12).is_empty());
    assert!(sample_batch(&pack, 1, 2, 12, 0).is_err());
    assert!(sample_batch(&pack, 1, 3, 4, 0).is_err(), "wrong M");
}

#[test]
fn invariants_hold_and_targets_are_uniform_over_many_draws() {
    let pack = sampling_pack();
    let targets = eligible_targets(&pack, 4);
    assert_eq!(targets.len(), 5 * 12);
    assert!(targets.iter().all(|&(i, _)| (3..=7).contains(&i)), "prototype and held-out styles are never targets");
    let draws = 100_000;
    let mut counts: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut picks = [[0u64; 4]; 2];
    for chunk in 0..100 {
        for s in sample_batch(&pack, draws / 100, 2, 4, 1000 + chunk as u64).unwrap() {
            s.validate().unwrap();
            let mut refs: Vec<usize> = s.references.iter().map(|r| r.content_id).collect();
            refs.sort_unstable();
            refs.dedup();
            assert_eq!(refs.len(), 4, "references are distinct");
            *counts.entry((s.style(), s.content())).or_default() += 1;
            picks[0][s.proto_pick] += 1;
            picks[1][s.ref_pick] += 1;
        }
    }
    assert_eq!(counts.len(), targets.len());
    let expected = draws as f64 / targets.len() as f64;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let df = (targets.len() - 1) as f64;
    assert!(chi2 < df + 3.0 * (2.0 * df).sqrt(), "chi-square {chi2} with {df} dof");
    // critic picks are uniform as well
    for (p, k) in [(&picks[0][..2], 2.0), (&picks[1][..], 4.0)] {
        let e = draws as f64 / k;
        let chi2: f64 = p.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < (k - 1.0) + 3.0 * (2.0 * (k - 1.0)).sqrt(), "pick chi-square {chi2}");
    }
}

#[test]
fn inference_inputs_reuse_one_reference_set() {
    let pack = toy_pack(7, 5, 30, 3, 32).unwrap();
    let one = [pack.get(5, 1).unwrap().as_ref().clone()];
    let contents: Vec<usize> = (1..=20).collect();
    let (inputs, skipped) = build_inference_inputs(&pack, &contents, &one).unwrap();
    assert_eq!(inputs.len(), 20);
    assert!(skipped.is_empty());
    for (k, input) in inputs.iter().enumerate() {
        assert_eq!(input.content_id, k + 1);
        assert_eq!(input.prototypes.len(), 3);
        assert!(input.prototypes.iter().all(|p| p.content_id == k + 1));
        assert!(std::sync::Arc::ptr_eq(&input.references, &inputs[0].references));
    }
    let (none, skipped) = build_inference_inputs(&pack, &[], &one).unwrap();
    assert!(none.is_empty() && skipped.is_empty());
    assert!(build_inference_inputs(&pack, &[1], &[]).is_err());
}

#[test]
fn contents_without_prototypes_are_skipped() {
    let mut pack = GlyphPack::new(manifest(3, 3, vec![1], 32)).unwrap();
    for (i, j) in [(1, 1), (1, 3), (2, 1), (2, 2), (2, 3)] {
        pack.insert(GlyphImage::blank(32, i, j)).unwrap();
    }
    let refs = [GlyphImage::blank(32, 2, 1)];
    let (inputs, skipped) = build_inference_inputs(&pack, &[1, 2, 3], &refs).unwrap();
    assert_eq!(inputs.iter().map(|i| i.content_id).collect::<Vec<_>>(), vec![1, 3]);
    assert_eq!(skipped, vec![2]);
}

#[test]
fn sheet_has_one_cell_per_style_and_content() {
    let pack = toy_pack(1, 4, 5, 2, 32).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sheet.png");
    write_sheet(&path, &pack, &[1, 3], &[1, 2, 4]).unwrap();
    let img = image::open(&path).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (3 * 32, 2 * 32));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_sample_satisfies_its_contract(seed in any::<u64>(), batch in 1usize..12, n in 1usize..=11) {
        let pack = sampling_pack();
        for s in sample_batch(&pack, batch, 2, n, seed).unwrap() {
            prop_assert!(s.validate().is_ok());
            prop_assert_eq!(s.references.len(), n);
            prop_assert!(s.ref_pick < n && s.proto_pick < 2);
        }
    }

    #[test]
    fn byte_values_survive_export(values in prop::collection::vec(any::<u8>(), 32 * 32)) {
        let pixels: Vec<f64> = values.iter().map(|&p| p as f64 / 127.5 - 1.0).collect();
        let png = encode_png(&pixels, 32, 32);
        prop_assert_eq!(decode_png(&png, 32).unwrap(), pixels);
    }
}
