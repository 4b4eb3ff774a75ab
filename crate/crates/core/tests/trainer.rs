use gwnet::glyphdata::{eligible_targets, toy_pack, GlyphPack};
use gwnet::losses::PerceptualNets;
use gwnet::percepnets::{train_classifier, Classifier, ClassifierConfig, ClassifierTraining, Heads};
use gwnet::trainer::*;
use gwnet::wnet::{Variant, WNetConfig};

struct Fixture {
    pack: GlyphPack,
    real: Classifier,
    content: Classifier,
    style: Classifier,
}

impl Fixture {
    fn new() -> Self {
        let pack = toy_pack(7, 5, 30, 3, 32).unwrap();
        let net = |heads, seed| {
            let cfg = ClassifierConfig { size: 32, widths: [2, 2, 3, 3, 4], heads, contents: 30, styles: 5 };
            Classifier::init(cfg, seed).unwrap()
        };
        Fixture { pack, real: net(Heads::Both, 1), content: net(Heads::Content, 2), style: net(Heads::Style, 3) }
    }

    fn nets(&self) -> PerceptualNets<'_> {
        PerceptualNets { real: &self.real, content: &self.content, style: &self.style }
    }
}

fn config(variant: Variant, steps: u64) -> TrainConfig {
    let mut c = TrainConfig::new(32, 3, 5);
    let mut net = WNetConfig::new(32, 3, 5).scaled(32);
    net.mixer.variant = variant;
    net.mixer.blocks_per_layer = 1;
    c.net = net;
    c.batch = 2;
    c.n_critic = 2;
    c.steps = steps;
    c.seed = 11;
    c
}

fn quiet(dir: &std::path::Path) -> FitOptions {
    FitOptions { checkpoint_every: 0, sheet_every: 0, progress_every: 0, ..FitOptions::new(dir) }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let fx = Fixture::new();
    let mut c = config(Variant::Adain, 1);
    c.lr = 0.0;
    let mut state = TrainState::new(c).unwrap();
    let before = (state.gen.params.clone(), state.critic.params.clone());
    let targets = eligible_targets(&fx.pack, 4);
    train_step(&mut state, &fx.nets(), &fx.pack, &targets).unwrap();
    assert_eq!(state.gen.params, before.0);
    assert_eq!(state.critic.params, before.1);
    assert_eq!(state.step, 1);
}

#[test]
fn batch_norm_running_statistics_move_with_training() {
    let fx = Fixture::new();
    let mut c = config(Variant::Bn, 1);
    c.lr = 0.0;
    let mut state = TrainState::new(c).unwrap();
    let before = state.gen.params.get("enc_p.1.norm.running_mean").unwrap().clone();
    train_step(&mut state, &fx.nets(), &fx.pack, &eligible_targets(&fx.pack, 4)).unwrap();
    assert_ne!(state.gen.params.get("enc_p.1.norm.running_mean").unwrap(), &before);
    assert_eq!(state.gen.params.get("enc_p.1.conv.w").unwrap(), TrainState::new(config(Variant::Bn, 1)).unwrap().gen.params.get("enc_p.1.conv.w").unwrap());
}

#[test]
fn single_target_is_overfit() {
    let fx = Fixture::new();
    let mut c = config(Variant::Adain, 50);
    c.n_critic = 1;
    c.lr = 1e-3;
    let mut state = TrainState::new(c).unwrap();
    let target = [(4, 7)];
    let pixel: Vec<f64> = (0..50).map(|_| train_step(&mut state, &fx.nets(), &fx.pack, &target).unwrap().pixel).collect();
    let first = pixel[..5].iter().sum::<f64>() / 5.0;
    let last = pixel[45..].iter().sum::<f64>() / 5.0;
    assert!(last < 0.6 * first, "pixel L1 {first:.4} -> {last:.4}");
}

#[test]
fn non_finite_parameters_are_reported() {
    let fx = Fixture::new();
    let mut state = TrainState::new(config(Variant::Adain, 1)).unwrap();
    let w = state.gen.params.get("dec.1.deconv.w").unwrap().map(|_| f64::NAN);
    state.gen.params.set("dec.1.deconv.w", w).unwrap();
    let err = train_step(&mut state, &fx.nets(), &fx.pack, &eligible_targets(&fx.pack, 4)).unwrap_err();
    assert!(matches!(err, gwnet::Error::Numeric(_)), "{err}");
}

#[test]
fn seeded_runs_replay_bit_identically() {
    let fx = Fixture::new();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let mut state = TrainState::new(config(Variant::Bn, 4)).unwrap();
        fit(&mut state, &fx.pack, &fx.nets(), &quiet(dir.path())).unwrap();
    }
    let log = |d: &tempfile::TempDir| std::fs::read(d.path().join(LOSS_LOG)).unwrap();
    assert_eq!(log(&a), log(&b));
    let ckpt = |d: &tempfile::TempDir| std::fs::read(d.path().join(LATEST_CHECKPOINT)).unwrap();
    assert_eq!(ckpt(&a), ckpt(&b));
    let mut other = config(Variant::Bn, 4);
    other.seed = 12;
    let c = tempfile::tempdir().unwrap();
    fit(&mut TrainState::new(other).unwrap(), &fx.pack, &fx.nets(), &quiet(c.path())).unwrap();
    assert_ne!(log(&a), log(&c));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let fx = Fixture::new();
    for variant in [Variant::Bn, Variant::Adain] {
        let full = tempfile::tempdir().unwrap();
        let mut straight = TrainState::new(config(variant, 6)).unwrap();
        fit(&mut straight, &fx.pack, &fx.nets(), &quiet(full.path())).unwrap();

        let split = tempfile::tempdir().unwrap();
        let mut first = TrainState::new(config(variant, 3)).unwrap();
        fit(&mut first, &fx.pack, &fx.nets(), &quiet(split.path())).unwrap();
        // a stale row past the checkpoint is dropped on resume
        let log_path = split.path().join(LOSS_LOG);
        let mut text = std::fs::read_to_string(&log_path).unwrap();
        text.push_str("4,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0\n");
        std::fs::write(&log_path, text).unwrap();

        let mut resumed = TrainState::load(&split.path().join(LATEST_CHECKPOINT)).unwrap();
        assert_eq!(resumed, first);
        resumed.config.steps = 6;
        fit(&mut resumed, &fx.pack, &fx.nets(), &quiet(split.path())).unwrap();
        assert_eq!(resumed, straight, "{variant}");
        assert_eq!(std::fs::read(log_path).unwrap(), std::fs::read(full.path().join(LOSS_LOG)).unwrap());
    }
}

#[test]
fn zero_steps_write_only_the_initial_checkpoint() {
    let fx = Fixture::new();
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::new(config(Variant::Adain, 0)).unwrap();
    let reports = fit(&mut state, &fx.pack, &fx.nets(), &FitOptions::new(dir.path())).unwrap();
    assert!(reports.is_empty());
    let mut names: Vec<String> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, vec![LATEST_CHECKPOINT.to_string(), LOSS_LOG.to_string(), checkpoint_name(0)]);
    assert!(read_loss_log(&dir.path().join(LOSS_LOG)).unwrap().is_empty());
    assert_eq!(TrainState::load(&dir.path().join(checkpoint_name(0))).unwrap(), state);
}

#[test]
fn cadence_writes_checkpoints_and_sheets() {
    let fx = Fixture::new();
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::new(config(Variant::Adain, 4)).unwrap();
    let opts = FitOptions { checkpoint_every: 2, sheet_every: 2, progress_every: 1, ..FitOptions::new(dir.path()) };
    let reports = fit(&mut state, &fx.pack, &fx.nets(), &opts).unwrap();
    assert_eq!(reports.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    for k in [0, 2, 4] {
        assert!(dir.path().join(checkpoint_name(k)).is_file());
    }
    assert!(dir.path().join("sheets/step_000002.png").is_file());
    assert_eq!(read_loss_log(&dir.path().join(LOSS_LOG)).unwrap(), reports);
}

#[test]
fn mismatched_pack_is_a_config_error() {
    let fx = Fixture::new();
    let mut c = config(Variant::Adain, 1);
    c.net.styles = 6;
    let mut state = TrainState::new(c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = fit(&mut state, &fx.pack, &fx.nets(), &quiet(dir.path())).unwrap_err();
    assert!(matches!(err, gwnet::Error::Config(_)), "{err}");
}

#[test]
fn config_round_trips_through_key_values() {
    let mut c = config(Variant::Bn, 77);
    c.weights.w_real = [0.5, 1.0, 1.5, 2.0, 2.5];
    c.lr = 3e-4;
    let mut kv = gwnet::config::KeyValues::new();
    c.write_kv(&mut kv);
    let mut back = TrainConfig::new(64, 1, 2);
    back.read_kv(&kv).unwrap();
    assert_eq!(back, c);
    kv.set("precision", "f32");
    assert!(back.read_kv(&kv).is_err());
}

#[test]
fn untrained_generator_is_near_chance_for_a_trained_classifier() {
    let fx = Fixture::new();
    let opts = ClassifierTraining { epochs: 30, widths: [4, 8, 16, 32, 32], seed: 1, ..Default::default() };
    let (content, acc) = train_classifier(&fx.pack, Heads::Content, &opts).unwrap();
    assert!(acc.content > 0.9);
    let state = TrainState::new(config(Variant::Adain, 0)).unwrap();
    let report = evaluate(&state.gen, &fx.pack, 4, &content, &fx.style).unwrap();
    assert_eq!(report.seen_count, 30);
    assert_eq!((report.holdout_count, report.holdout_skipped), (30, 0));
    assert!(report.seen_content_acc < 0.2, "{report:?}");
    assert!(report.holdout_content_acc < 0.2, "{report:?}");
    assert!(report.seen_pixel_l1 > 0.3);
    let kv = report.to_kv();
    assert_eq!(kv.require::<usize>("holdout_count").unwrap(), 30);
}
