use gwnet::glyphdata::{toy_pack, GlyphImage};
use gwnet::percepnets::*;
use gwnet_tensor::{Shape, Tensor, Var};

fn cfg(size: usize, heads: Heads) -> ClassifierConfig {
    ClassifierConfig { size, widths: [2, 3, 4, 5, 6], heads, contents: 7, styles: 3 }
}

#[test]
fn taps_halve_resolution_per_block() {
    for size in [32, 64] {
        let net = Classifier::init(cfg(size, Heads::Both), 0).unwrap();
        let x = Var::constant(Tensor::zeros(Shape::new(2, 1, size, size)));
        let f = net.features(&net.binder(), &x, &Tap::ALL).unwrap();
        for (k, tap) in Tap::ALL.into_iter().enumerate() {
            let s = size >> k;
            assert_eq!(f[&tap].shape(), Shape::new(2, [2, 3, 4, 5, 6][k], s, s), "{tap} at {size}");
        }
        let only = net.features(&net.binder(), &x, &[Tap::P2_2]).unwrap();
        assert_eq!(only.keys().copied().collect::<Vec<_>>(), vec![Tap::P2_2]);
        let (c, s) = net.logits(&net.binder(), &x).unwrap();
        assert_eq!(c.unwrap().shape(), Shape::new(2, 7, 1, 1));
        assert_eq!(s.unwrap().shape(), Shape::new(2, 3, 1, 1));
    }
}

#[test]
fn heads_follow_the_configuration() {
    let net = Classifier::init(cfg(32, Heads::Content), 0).unwrap();
    let x = Var::constant(Tensor::zeros(Shape::new(1, 1, 32, 32)));
    let (c, s) = net.logits(&net.binder(), &x).unwrap();
    assert!(c.is_some() && s.is_none());
    let acc = net.accuracy(&[GlyphImage::blank(32, 1, 1)]).unwrap();
    assert!(acc.style.is_nan() && (0.0..=1.0).contains(&acc.content));
}

#[test]
fn unsupported_inputs_are_rejected() {
    assert!(Classifier::init(cfg(48, Heads::Both), 0).is_err());
    let net = Classifier::init(cfg(32, Heads::Both), 0).unwrap();
    let wrong = Var::constant(Tensor::zeros(Shape::new(1, 1, 64, 64)));
    assert!(net.features(&net.binder(), &wrong, &Tap::ALL).is_err());
}

#[test]
fn tap_names_parse_and_unknown_taps_fail() {
    for tap in Tap::ALL {
        assert_eq!(tap.name().parse::<Tap>().unwrap(), tap);
    }
    assert!(matches!("phi6-1".parse::<Tap>(), Err(gwnet::Error::Config(_))));
}

#[test]
fn zero_epochs_return_the_initial_network() {
    let pack = toy_pack(1, 4, 6, 2, 32).unwrap();
    let opts = ClassifierTraining { epochs: 0, widths: [2, 2, 2, 2, 2], seed: 5, ..Default::default() };
    let (net, _) = train_classifier(&pack, Heads::Both, &opts).unwrap();
    let fresh = Classifier::init(ClassifierConfig { size: 32, widths: [2; 5], heads: Heads::Both, contents: 6, styles: 4 }, 5).unwrap();
    assert_eq!(net, fresh);
}

#[test]
fn single_class_sets_are_rejected() {
    let glyphs: Vec<GlyphImage> = (1..=3).map(|i| GlyphImage::blank(32, i, 1)).collect();
    let refs: Vec<&GlyphImage> = glyphs.iter().collect();
    let opts = ClassifierTraining { epochs: 1, widths: [2; 5], ..Default::default() };
    assert!(train_on(&refs, 32, 4, 3, Heads::Content, &opts).is_err());
    assert!(train_on(&refs, 32, 4, 3, Heads::Style, &opts).is_ok());
}

#[test]
fn content_classifier_learns_the_toy_pack() {
    let pack = toy_pack(7, 5, 30, 3, 32).unwrap();
    let opts = ClassifierTraining { epochs: 30, widths: [4, 8, 16, 32, 32], seed: 1, ..Default::default() };
    let (net, acc) = train_classifier(&pack, Heads::Content, &opts).unwrap();
    assert!(acc.content > 0.9, "content accuracy {}", acc.content);
    assert!(acc.style.is_nan());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.gwnp");
    net.save(&path).unwrap();
    let back = Classifier::load(&path).unwrap();
    assert_eq!(back, net);
    let glyphs: Vec<_> = pack.iter().cloned().collect();
    assert_eq!(back.accuracy(&glyphs).unwrap().content, acc.content);
}

#[test]
fn perceptual_set_persists_as_three_files() {
    let pack = toy_pack(2, 4, 5, 2, 32).unwrap();
    let opts = ClassifierTraining { epochs: 1, widths: [2; 5], seed: 3, ..Default::default() };
    let (set, accs) = PerceptualSet::train(&pack, &opts).unwrap();
    assert!(accs[1].style.is_nan() && accs[2].content.is_nan());
    let dir = tempfile::tempdir().unwrap();
    assert!(!PerceptualSet::exists(dir.path()));
    set.save(dir.path()).unwrap();
    assert!(PerceptualSet::exists(dir.path()));
    assert_eq!(PerceptualSet::load(dir.path()).unwrap(), set);
    std::fs::remove_file(dir.path().join(PHI_STYLE_FILE)).unwrap();
    let err = PerceptualSet::load(dir.path()).unwrap_err().to_string();
    assert!(err.contains(PHI_STYLE_FILE), "{err}");
}
