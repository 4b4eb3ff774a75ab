//! Alternating critic/generator optimization, checkpoints, and logs.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use gwnet_tensor::{backward, no_grad, ops, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{read_container, write_container, MODEL_MAGIC};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::glyphdata::{batch_tensor, eligible_targets, write_sheet_rows, ContentId, GlyphImage, GlyphPack, StyleId, TrainSample};
use crate::losses::{
    ac_loss, adv_losses, const_loss, gradient_penalty, perceptual_total, pixel_l1, total_d, total_d_var, total_g, total_g_var,
    LossReport, LossWeights, PerceptualNets, CSV_HEADER,
};
use crate::nn::{Binder, Mode};
use crate::optim::Adam;
use crate::percepnets::{load_blobs, Classifier};
use crate::wnet::{prototype_tensor, Critic, Generator, StyleBatch, WNetConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Number of content prototypes per sample.
    pub m: usize,
    /// Number of style references per sample.
    pub n: usize,
    pub batch: usize,
    pub n_critic: usize,
    /// Total generator steps.
    pub steps: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub bn_momentum: f64,
    pub weights: LossWeights,
    pub net: WNetConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for a pack with `styles` styles and `m` prototype fonts.
    pub fn new(size: usize, m: usize, styles: usize) -> Self {
        TrainConfig {
            m,
            n: 4,
            batch: 8,
            n_critic: 5,
            steps: 2000,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            bn_momentum: 0.1,
            weights: LossWeights::default(),
            net: WNetConfig::new(size, m, styles),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.m == 0 || self.n == 0 || self.batch == 0 || self.n_critic == 0 {
            return bad("m, n, batch and n_critic must be positive".into());
        }
        if self.m != self.net.m {
            return bad(format!("m = {} but the network expects {}", self.m, self.net.m));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a non-negative number, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]".into());
        }
        self.weights.validate()?;
        self.net.validate()
    }

    /// Checks the config against a pack.
    pub fn check_pack(&self, pack: &GlyphPack) -> Result<()> {
        if pack.m() != self.m {
            return Err(Error::Config(format!("m = {} but the pack has {} prototype styles", self.m, pack.m())));
        }
        if pack.size() != self.net.size {
            return Err(Error::Config(format!("network size {} but pack glyphs are {}px", self.net.size, pack.size())));
        }
        if pack.styles() != self.net.styles {
            return Err(Error::Config(format!("network has {} style logits, pack has I = {}", self.net.styles, pack.styles())));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("n", self.n);
        kv.set("batch", self.batch);
        kv.set("n_critic", self.n_critic);
        kv.set("steps", self.steps);
        kv.set("lr", self.lr);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("bn_momentum", self.bn_momentum);
        kv.set("seed", self.seed);
        kv.set("precision", "f64");
        self.weights.write_kv(kv);
        self.net.write_kv(kv);
    }

    pub fn read_kv(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read_into("n", &mut self.n)?;
        kv.read_into("batch", &mut self.batch)?;
        kv.read_into("n_critic", &mut self.n_critic)?;
        kv.read_into("steps", &mut self.steps)?;
        kv.read_into("lr", &mut self.lr)?;
        kv.read_into("beta1", &mut self.beta1)?;
        kv.read_into("beta2", &mut self.beta2)?;
        kv.read_into("bn_momentum", &mut self.bn_momentum)?;
        kv.read_into("seed", &mut self.seed)?;
        if let Some(p) = kv.get_str("precision") {
            if p != "f64" {
                return Err(Error::Config(format!("precision `{p}` is not supported; only f64 is implemented")));
            }
        }
        self.weights.read_kv(kv)?;
        self.net.read_kv(kv)?;
        self.m = self.net.m;
        Ok(())
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Completed generator steps.
    pub step: u64,
    pub gen: Generator,
    pub critic: Critic,
    pub opt_g: Adam,
    pub opt_d: Adam,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let gen = Generator::init(config.net.clone(), config.seed)?;
        let critic = Critic::init(config.net.clone(), config.seed.wrapping_add(1))?;
        let opt_g = Adam::new(config.lr, config.beta1, config.beta2);
        let opt_d = Adam::new(config.lr, config.beta1, config.beta2);
        Ok(TrainState { config, step: 0, gen, critic, opt_g, opt_d })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut kv = KeyValues::new();
        self.config.write_kv(&mut kv);
        kv.set("step", self.step);
        kv.set("opt_g_t", self.opt_g.t);
        kv.set("opt_d_t", self.opt_d.t);
        let mut blobs: Vec<(String, Tensor)> = Vec::new();
        for (prefix, store) in [("G", &self.gen.params), ("D", &self.critic.params)] {
            blobs.extend(store.iter().map(|(n, p)| (format!("{prefix}.{n}"), p.value.clone())));
        }
        blobs.extend(self.opt_g.blobs("optG"));
        blobs.extend(self.opt_d.blobs("optD"));
        write_container(path, MODEL_MAGIC, &kv, &blobs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (kv, mut blobs) = read_container(path, MODEL_MAGIC)?;
        let m: usize = kv.require("m")?;
        let mut config = TrainConfig::new(kv.require("size")?, m, kv.require("styles")?);
        config.read_kv(&kv)?;
        let mut state = TrainState::new(config)?;
        state.step = kv.require("step")?;
        state.opt_g.t = kv.require("opt_g_t")?;
        state.opt_d.t = kv.require("opt_d_t")?;
        state.opt_g.restore("optG", &mut blobs);
        state.opt_d.restore("optD", &mut blobs);
        let (mut g, mut d) = (Vec::new(), Vec::new());
        for (name, t) in blobs {
            if let Some(n) = name.strip_prefix("G.") {
                g.push((n.to_string(), t));
            } else if let Some(n) = name.strip_prefix("D.") {
                d.push((n.to_string(), t));
            } else {
                return Err(Error::Checkpoint(format!("unexpected blob `{name}`")));
            }
        }
        load_blobs(&mut state.gen.params, g)?;
        load_blobs(&mut state.critic.params, d)?;
        Ok(state)
    }
}

/// Dense tensors for one sampled batch.
pub struct BatchTensors {
    pub protos: Var,
    pub refs: Var,
    pub groups: Vec<Vec<usize>>,
    pub target: Var,
    pub proto_pick: Var,
    pub ref_pick: Var,
    /// 0-based style class of each target.
    pub labels: Vec<usize>,
}

impl BatchTensors {
    pub fn new(samples: &[TrainSample]) -> Result<Self> {
        let protos: Vec<&[Arc<GlyphImage>]> = samples.iter().map(|s| s.prototypes.as_slice()).collect();
        let refs: Vec<&[Arc<GlyphImage>]> = samples.iter().map(|s| s.references.as_slice()).collect();
        let sb = StyleBatch::new(&refs)?;
        let pick = |f: &dyn Fn(&TrainSample) -> &GlyphImage| {
            Var::constant(batch_tensor(&samples.iter().map(f).collect::<Vec<_>>()))
        };
        Ok(BatchTensors {
            protos: Var::constant(prototype_tensor(&protos)?),
            refs: Var::constant(sb.images),
            groups: sb.groups,
            target: pick(&|s| &s.target),
            proto_pick: pick(&|s| &s.prototypes[s.proto_pick]),
            ref_pick: pick(&|s| &s.references[s.ref_pick]),
            labels: samples.iter().map(|s| s.style() - 1).collect(),
        })
    }
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step.wrapping_add(1));
    r
}

fn finite(report: &LossReport) -> Result<()> {
    match report.non_finite() {
        Some(term) => Err(Error::Numeric(format!("step {}: loss term `{term}` is not finite", report.step))),
        None => Ok(()),
    }
}

/// One generator step preceded by `n_critic` critic steps. Deterministic
/// in `(config.seed, state.step)`.
pub fn train_step(
    state: &mut TrainState,
    nets: &PerceptualNets,
    pack: &GlyphPack,
    targets: &[(StyleId, ContentId)],
) -> Result<LossReport> {
    let cfg = state.config.clone();
    let w = &cfg.weights;
    let mut rng = step_rng(cfg.seed, state.step);
    let mut report = LossReport { step: state.step + 1, ..Default::default() };

    for _ in 0..cfg.n_critic {
        let samples = crate::glyphdata::sample::sample_from(pack, targets, cfg.batch, cfg.m, cfg.n, &mut rng)?;
        let bt = BatchTensors::new(&samples)?;
        let u: Vec<f64> = (0..cfg.batch).map(|_| rng.random::<f64>()).collect();
        let fake = {
            let _g = no_grad();
            let gb = Binder::new(&state.gen.params, Mode::Train, false);
            state.gen.forward(&gb, &bt.protos, &bt.refs, &bt.groups)?.image.detach()
        };
        let db = state.critic.binder(true);
        let (s_real, l_real) = state.critic.discriminate(&db, &bt.proto_pick, &bt.target, &bt.ref_pick)?;
        let (s_fake, l_fake) = state.critic.discriminate(&db, &bt.proto_pick, &fake, &bt.ref_pick)?;
        let (_, adv_d) = adv_losses(&s_real, &s_fake);
        let (gp, gp_norm) = gradient_penalty(&state.critic, &db, &bt.proto_pick, &bt.target, &fake, &bt.ref_pick, &u)?;
        let ac = ac_loss(&l_real, &l_fake, &bt.labels)?;
        let loss = total_d_var(&adv_d, &gp, &ac, w);
        report.critic_real = ops::mean_all(&s_real).item();
        report.critic_fake = ops::mean_all(&s_fake).item();
        report.adv_d = adv_d.item();
        report.gp = gp.item();
        report.gp_grad_norm = gp_norm;
        report.ac_d = ac.item();
        report.total_d = loss.item();
        if !report.total_d.is_finite() {
            finite(&report)?;
            return Err(Error::Numeric(format!("step {}: total_d is not finite", report.step)));
        }
        let grads = db.grads(&backward(&loss)?);
        drop(db);
        state.opt_d.step(&mut state.critic.params, &grads)?;
    }

    let samples = crate::glyphdata::sample::sample_from(pack, targets, cfg.batch, cfg.m, cfg.n, &mut rng)?;
    let bt = BatchTensors::new(&samples)?;
    let gb = Binder::new(&state.gen.params, Mode::Train, true);
    let out = state.gen.forward(&gb, &bt.protos, &bt.refs, &bt.groups)?;
    let fake = &out.image;
    let db = state.critic.binder(false);
    let (s_fake, l_fake) = state.critic.discriminate(&db, &bt.proto_pick, fake, &bt.ref_pick)?;
    let l_real = {
        let _g = no_grad();
        state.critic.discriminate(&db, &bt.proto_pick, &bt.target, &bt.ref_pick)?.1
    };
    let (adv_g, _) = adv_losses(&s_fake, &s_fake);
    let ac = ac_loss(&l_real, &l_fake, &bt.labels)?;
    let pixel = pixel_l1(fake, &bt.target)?;
    let (phi_real, phi_content, phi_style) = perceptual_total(nets, fake, &bt.target, &bt.proto_pick, &bt.ref_pick, w)?;
    let phi_total = &(&phi_real + &phi_content) + &phi_style;
    let replicated = ops::concat_channels(&vec![fake.clone(); cfg.m])?;
    let probe_p = state.gen.encode_content(&gb, &replicated)?;
    let const_p = const_loss(out.content_terminal(), probe_p.last().expect("layers"))?;
    let singletons: Vec<Vec<usize>> = (0..cfg.batch).map(|k| vec![k]).collect();
    let probe_r = state.gen.encode_style(&gb, fake, &singletons)?;
    let const_r = const_loss(out.style_terminal(), probe_r.last().expect("layers"))?;
    let loss = total_g_var(&adv_g, &ac, &pixel, &phi_total, &const_p, &const_r, w);

    report.adv_g = adv_g.item();
    report.ac_g = ac.item();
    report.pixel = pixel.item();
    report.phi_real = phi_real.item();
    report.phi_content = phi_content.item();
    report.phi_style = phi_style.item();
    report.phi_total = phi_total.item();
    report.const_p = const_p.item();
    report.const_r = const_r.item();
    report.total_g = loss.item();
    finite(&report)?;

    let grads = gb.grads(&backward(&loss)?);
    let stats = gb.take_stat_updates();
    drop(gb);
    state.opt_g.step(&mut state.gen.params, &grads)?;
    state.gen.params.apply_stat_updates(&stats, cfg.bn_momentum)?;
    if !state.gen.params.all_finite() || !state.critic.params.all_finite() {
        return Err(Error::Numeric(format!("step {}: parameters became non-finite", report.step)));
    }
    state.step += 1;
    debug_assert_eq!(report.total_g, total_g(&report, w));
    debug_assert_eq!(report.total_d, total_d(&report, w));
    Ok(report)
}

/// Output cadence of [`fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    /// Checkpoint every k steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Glyph sheet every k steps (0: never).
    pub sheet_every: u64,
    /// Progress line every k steps (0: never).
    pub progress_every: u64,
}

impl FitOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        FitOptions { out_dir: out_dir.into(), checkpoint_every: 500, sheet_every: 500, progress_every: 50 }
    }
}

pub const LATEST_CHECKPOINT: &str = "latest.gwn";
pub const LOSS_LOG: &str = "losses.csv";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.gwn")
}

/// Trains until `config.steps` generator steps are done, starting from
/// `state` (fresh or resumed). Writes checkpoints, the CSV loss log, and
/// glyph sheets into `opts.out_dir`; returns the reports of this run.
pub fn fit(state: &mut TrainState, pack: &GlyphPack, nets: &PerceptualNets, opts: &FitOptions) -> Result<Vec<LossReport>> {
    state.config.validate()?;
    state.config.check_pack(pack)?;
    let targets = eligible_targets(pack, state.config.n);
    if targets.is_empty() {
        return Err(Error::Data(format!("no training targets for N = {}", state.config.n)));
    }
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let log_path = opts.out_dir.join(LOSS_LOG);
    let mut log = open_log(&log_path, state.step)?;
    let save = |state: &TrainState| -> Result<()> {
        let path = opts.out_dir.join(checkpoint_name(state.step));
        state.save(&path)?;
        state.save(&opts.out_dir.join(LATEST_CHECKPOINT))
    };
    if state.step == 0 {
        save(state)?;
    }
    let mut reports = Vec::new();
    let start = std::time::Instant::now();
    while state.step < state.config.steps {
        let r = train_step(state, nets, pack, &targets)?;
        writeln!(log, "{}", r.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        let k = state.step;
        if opts.progress_every > 0 && k % opts.progress_every == 0 {
            log::info!(
                "step {k}/{}: pixel {:.4} total_g {:.4} total_d {:.4} |grad| {:.3} ({:.1}s)",
                state.config.steps,
                r.pixel,
                r.total_g,
                r.total_d,
                r.gp_grad_norm,
                start.elapsed().as_secs_f64()
            );
        }
        if opts.checkpoint_every > 0 && k % opts.checkpoint_every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            save(state)?;
        }
        if opts.sheet_every > 0 && k % opts.sheet_every == 0 {
            write_progress_sheet(state, pack, &opts.out_dir.join("sheets").join(format!("step_{k:06}.png")))?;
        }
        reports.push(r);
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    save(state)?;
    Ok(reports)
}

/// Opens the CSV log for appending, dropping rows past `step` so a resumed
/// run continues a consistent log.
fn open_log(path: &Path, step: u64) -> Result<File> {
    let mut rows = Vec::new();
    if step > 0 && path.exists() {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for line in text.lines().skip(1) {
            if LossReport::parse_csv_row(line).map(|r| r.step <= step).unwrap_or(false) {
                rows.push(line.to_string());
            }
        }
    }
    let mut f = OpenOptions::new().create(true).write(true).truncate(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{CSV_HEADER}").map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(f, "{r}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Reads a CSV loss log.
pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Data(format!("{}: unexpected header", path.display())));
    }
    lines.map(LossReport::parse_csv_row).collect()
}

/// Fixed references for one style: its first `n` contents other than the
/// target.
pub fn fixed_references(pack: &GlyphPack, style: StyleId, exclude: ContentId, n: usize) -> Vec<Arc<GlyphImage>> {
    pack.contents_of(style).into_iter().filter(|&c| c != exclude).take(n).filter_map(|c| pack.get(style, c).cloned()).collect()
}

/// Sheet of generated glyphs: rows are training styles, columns the first
/// contents, with fixed references.
pub fn write_progress_sheet(state: &TrainState, pack: &GlyphPack, path: &Path) -> Result<()> {
    let contents: Vec<ContentId> = (1..=pack.contents().min(12)).collect();
    let mut rows = Vec::new();
    for style in pack.training_styles().into_iter().chain(pack.holdout_styles().iter().copied()).take(4) {
        let mut row = Vec::new();
        for &j in &contents {
            let refs = fixed_references(pack, style, j, state.config.n);
            match (pack.prototypes(j), refs.is_empty()) {
                (Some(p), false) => row.push(Some(state.gen.generate(&p, &refs)?)),
                _ => row.push(None),
            }
        }
        rows.push(row);
    }
    let view: Vec<Vec<Option<&GlyphImage>>> = rows.iter().map(|r| r.iter().map(Option::as_ref).collect()).collect();
    write_sheet_rows(path, &view)
}

/// Quality metrics of a generator on a pack.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    /// Mean pixel L1 of reconstructions of training targets.
    pub seen_pixel_l1: f64,
    /// φ_content accuracy on those reconstructions.
    pub seen_content_acc: f64,
    /// φ_style top-1 on those reconstructions.
    pub seen_style_acc: f64,
    pub seen_count: usize,
    /// φ_content accuracy on one-shot syntheses of held-out styles.
    pub holdout_content_acc: f64,
    /// φ_style top-1 on the held-out syntheses (reported, not gated).
    pub holdout_style_acc: f64,
    pub holdout_count: usize,
    /// Held-out contents that could not be synthesized.
    pub holdout_skipped: usize,
}

impl EvalReport {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("seen_pixel_l1", self.seen_pixel_l1);
        kv.set("seen_content_acc", self.seen_content_acc);
        kv.set("seen_style_acc", self.seen_style_acc);
        kv.set("seen_count", self.seen_count);
        kv.set("holdout_content_acc", self.holdout_content_acc);
        kv.set("holdout_style_acc", self.holdout_style_acc);
        kv.set("holdout_count", self.holdout_count);
        kv.set("holdout_skipped", self.holdout_skipped);
        kv
    }
}

/// Reconstructs every training target from fixed references of its own
/// style. Returns `(generated, target)` pairs.
pub fn reconstruct_training(gen: &Generator, pack: &GlyphPack, n: usize) -> Result<Vec<(GlyphImage, Arc<GlyphImage>)>> {
    let mut out = Vec::new();
    for (i, j) in eligible_targets(pack, n) {
        let (Some(target), Some(protos)) = (pack.get(i, j), pack.prototypes(j)) else { continue };
        let refs = fixed_references(pack, i, j, n);
        out.push((gen.generate(&protos, &refs)?, target.clone()));
    }
    Ok(out)
}

/// One-shot synthesis of every content for each held-out style, using the
/// glyph of `reference_content` as the single reference.
pub fn one_shot_holdout(gen: &Generator, pack: &GlyphPack, reference_content: ContentId) -> Result<(Vec<GlyphImage>, usize)> {
    let contents: Vec<ContentId> = (1..=pack.contents()).collect();
    let mut glyphs = Vec::new();
    let mut skipped = 0;
    for &style in pack.holdout_styles() {
        let Some(reference) = pack.get(style, reference_content).or_else(|| {
            pack.contents_of(style).first().and_then(|&c| pack.get(style, c))
        }) else {
            skipped += contents.len();
            continue;
        };
        let refs = [reference.as_ref().clone()];
        let (inputs, missing) = crate::glyphdata::build_inference_inputs(pack, &contents, &refs)?;
        skipped += missing.len();
        for input in inputs {
            let mut g = gen.generate(&input.prototypes, input.references.as_slice())?;
            g.style_id = style;
            g.content_id = input.content_id;
            glyphs.push(g);
        }
    }
    Ok((glyphs, skipped))
}

/// Seen-style reconstruction and held-out one-shot metrics.
pub fn evaluate(gen: &Generator, pack: &GlyphPack, n: usize, content_net: &Classifier, style_net: &Classifier) -> Result<EvalReport> {
    let seen = reconstruct_training(gen, pack, n)?;
    let mut report = EvalReport { seen_count: seen.len(), ..Default::default() };
    if !seen.is_empty() {
        let l1: Vec<f64> = seen
            .iter()
            .map(|(g, t)| g.pixels.iter().zip(&t.pixels).map(|(a, b)| (a - b).abs()).sum::<f64>() / g.pixels.len() as f64)
            .collect();
        report.seen_pixel_l1 = l1.iter().sum::<f64>() / l1.len() as f64;
        let generated: Vec<&GlyphImage> = seen.iter().map(|(g, _)| g).collect();
        report.seen_content_acc = content_net.accuracy(&generated)?.content;
        report.seen_style_acc = style_net.accuracy(&generated)?.style;
    }
    let (held, skipped) = one_shot_holdout(gen, pack, 1)?;
    report.holdout_count = held.len();
    report.holdout_skipped = skipped;
    if !held.is_empty() {
        report.holdout_content_acc = content_net.accuracy(&held)?.content;
        report.holdout_style_acc = style_net.accuracy(&held)?.style;
    }
    Ok(report)
}
