//! `gwnet`: data preparation, classifier and generator training, synthesis,
//! evaluation and gradient checks.
//!
//! Every flag can also be given in a `key = value` file passed with
//! `--config`; the key is the flag name with dashes replaced by
//! underscores. Flags win over the file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gwnet::config::{parse_list, KeyValues};
use gwnet::glyphdata::{
    build_inference_inputs, export_directory, import_directory, read_glyph_png, toy_pack, write_sheet_rows, ContentId,
    GlyphImage, GlyphPack, Manifest,
};
use gwnet::percepnets::{ClassifierTraining, PerceptualSet};
use gwnet::trainer::{evaluate, fit, FitOptions, TrainConfig, TrainState, LATEST_CHECKPOINT};
use gwnet::wnet::WNetConfig;
use gwnet::{gradsuite, Error, Result};

#[derive(Parser)]
#[command(name = "gwnet", version, about = "Few-shot glyph synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Import a glyph directory or render the synthetic toy pack.
    Prepare(PrepareArgs),
    /// Train the three perceptual classifiers on a pack.
    Classifiers(ClassifierArgs),
    /// Train the generator and critic.
    Train(Box<TrainArgs>),
    /// Synthesize glyphs from style reference images.
    Synth(SynthArgs),
    /// Report content/style accuracy and pixel error of a checkpoint.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

/// Copies every set option of `$args` into `$kv` under its field name.
macro_rules! overlay {
    ($kv:expr, $args:expr; $($field:ident),* $(,)?) => {
        $( if let Some(v) = &$args.$field { $kv.set(stringify!($field), v); } )*
    };
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of `<style>/<content>.png` glyphs.
    #[arg(long)]
    input: Option<String>,
    /// Manifest describing the input directory.
    #[arg(long)]
    manifest: Option<String>,
    /// Output pack directory.
    #[arg(long)]
    out: Option<String>,
    /// Render the toy pack instead of importing.
    #[arg(long, num_args = 3, value_names = ["SEED", "I", "J"])]
    toy: Option<Vec<u64>>,
    /// Prototype fonts of the toy pack.
    #[arg(long)]
    m: Option<usize>,
    /// Glyph size of the toy pack (64, or 32 for the reduced mode).
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct ClassifierArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pack: Option<String>,
    /// Output directory for the three classifier files.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classifier_epochs: Option<usize>,
    #[arg(long)]
    classifier_batch: Option<usize>,
    #[arg(long)]
    classifier_lr: Option<f64>,
    /// Five comma-separated block widths.
    #[arg(long)]
    classifier_widths: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pack: Option<String>,
    /// Directory holding the trained classifiers.
    #[arg(long)]
    phi: Option<String>,
    /// Run directory for checkpoints, logs and sheets.
    #[arg(long)]
    out: Option<String>,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Style references per sample.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    n_critic: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    bn_momentum: Option<f64>,
    /// Mixer variant: bn or adain.
    #[arg(long)]
    variant: Option<String>,
    /// Mixer block kind: residual or dense.
    #[arg(long)]
    block_kind: Option<String>,
    #[arg(long)]
    blocks_per_layer: Option<usize>,
    #[arg(long)]
    deep_boundary: Option<usize>,
    #[arg(long)]
    transform_depth: Option<usize>,
    /// Divide every default width by this factor.
    #[arg(long)]
    width_factor: Option<usize>,
    #[arg(long)]
    enc_widths: Option<String>,
    #[arg(long)]
    critic_widths: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    alpha_gp: Option<f64>,
    /// Auxiliary-classifier weight.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda_pixel: Option<f64>,
    #[arg(long)]
    psi_p: Option<f64>,
    #[arg(long)]
    psi_r: Option<f64>,
    #[arg(long)]
    w_vn: Option<f64>,
    #[arg(long)]
    w_real: Option<String>,
    #[arg(long)]
    w_content: Option<String>,
    #[arg(long)]
    w_style: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    sheet_every: Option<u64>,
    #[arg(long)]
    progress_every: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generator checkpoint.
    #[arg(long)]
    ckpt: Option<String>,
    /// Pack supplying the prototype glyphs.
    #[arg(long)]
    pack: Option<String>,
    /// Style reference PNGs (any number, at least one).
    #[arg(long, num_args = 1..)]
    refs: Option<Vec<String>>,
    /// Content ids, e.g. `1,2,5-9`.
    #[arg(long)]
    contents: Option<String>,
    /// Output sheet PNG.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<String>,
    #[arg(long)]
    pack: Option<String>,
    #[arg(long)]
    phi: Option<String>,
    /// Held-out style ids, overriding the manifest.
    #[arg(long)]
    holdout: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Append a case with a deliberately wrong backward rule.
    #[arg(long, hide = true)]
    include_broken: bool,
}

fn load_kv(config: &Option<PathBuf>) -> Result<KeyValues> {
    match config {
        None => Ok(KeyValues::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            KeyValues::parse(&text)
        }
    }
}

fn require_path(kv: &KeyValues, key: &str) -> Result<PathBuf> {
    kv.get_str(key)
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config(format!("missing --{} (or `{key}` in the config file)", key.replace('_', "-"))))
}

/// Parses `1,3,5-9` into ids.
fn parse_ids(s: &str) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || Error::Config(format!("bad id range `{part}`"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                ids.extend(a..=b);
            }
            None => ids.push(part.parse().map_err(|_| bad())?),
        }
    }
    Ok(ids)
}

fn prepare(a: &PrepareArgs) -> Result<()> {
    let mut kv = load_kv(&a.config)?;
    overlay!(kv, a; input, manifest, out, m, size);
    if let Some(t) = &a.toy {
        kv.set("toy", t.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    }
    let out = require_path(&kv, "out")?;
    let pack = if let Some(toy) = kv.get_str("toy") {
        let v: Vec<u64> = parse_list(toy)?;
        let [seed, i, j] = v[..] else {
            return Err(Error::Config("`toy` needs SEED I J".into()));
        };
        toy_pack(seed, i as usize, j as usize, kv.get("m")?.unwrap_or(3), kv.get("size")?.unwrap_or(64))?
    } else {
        let manifest = Manifest::load(&require_path(&kv, "manifest")?)?;
        import_directory(&require_path(&kv, "input")?, manifest)?
    };
    export_directory(&pack, &out)?;
    println!("{} -> {}", pack.stats(), out.display());
    Ok(())
}

fn classifiers(a: &ClassifierArgs) -> Result<()> {
    let mut kv = load_kv(&a.config)?;
    overlay!(kv, a; pack, out, seed, classifier_epochs, classifier_batch, classifier_lr, classifier_widths);
    let pack = GlyphPack::load(&require_path(&kv, "pack")?)?;
    let out = require_path(&kv, "out")?;
    let mut opts = ClassifierTraining::default();
    opts.read_kv(&kv)?;
    let (set, acc) = PerceptualSet::train(&pack, &opts)?;
    set.save(&out)?;
    println!("phi_real    content {:.4} style {:.4}", acc[0].content, acc[0].style);
    println!("phi_content content {:.4}", acc[1].content);
    println!("phi_style   style   {:.4}", acc[2].style);
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut kv = load_kv(&a.config)?;
    overlay!(kv, a; pack, phi, out, seed, steps, n, batch, n_critic, lr, beta1, beta2, bn_momentum, variant,
        block_kind, blocks_per_layer, deep_boundary, transform_depth, width_factor, enc_widths, critic_widths,
        alpha, alpha_gp, beta, lambda_pixel, psi_p, psi_r, w_vn, w_real, w_content, w_style,
        checkpoint_every, sheet_every, progress_every);
    if a.resume {
        kv.set("resume", true);
    }
    let pack = GlyphPack::load(&require_path(&kv, "pack")?)?;
    let phi = require_path(&kv, "phi")?;
    let out = require_path(&kv, "out")?;
    if !PerceptualSet::exists(&phi) {
        return Err(Error::Data(format!(
            "classifier checkpoints not found in {}; run `gwnet classifiers --pack <PACK> --out {}` first",
            phi.display(),
            phi.display()
        )));
    }
    let nets = PerceptualSet::load(&phi)?;
    let mut opts = FitOptions::new(&out);
    kv.read_into("checkpoint_every", &mut opts.checkpoint_every)?;
    kv.read_into("sheet_every", &mut opts.sheet_every)?;
    kv.read_into("progress_every", &mut opts.progress_every)?;
    let mut state = if kv.get::<bool>("resume")?.unwrap_or(false) {
        let mut s = TrainState::load(&out.join(LATEST_CHECKPOINT))?;
        kv.read_into("steps", &mut s.config.steps)?;
        log::info!("resuming at step {} of {}", s.step, s.config.steps);
        s
    } else {
        let mut cfg = TrainConfig::new(pack.size(), pack.m(), pack.styles());
        if let Some(f) = kv.get::<usize>("width_factor")? {
            cfg.net = WNetConfig::new(pack.size(), pack.m(), pack.styles()).scaled(f);
        }
        cfg.read_kv(&kv)?;
        cfg.check_pack(&pack)?;
        TrainState::new(cfg)?
    };
    let reports = fit(&mut state, &pack, &nets.nets(), &opts)?;
    if let Some(r) = reports.last() {
        println!("step {}: pixel {:.4} total_g {:.4} total_d {:.4}", r.step, r.pixel, r.total_g, r.total_d);
    }
    println!("checkpoint {}", out.join(LATEST_CHECKPOINT).display());
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut kv = load_kv(&a.config)?;
    overlay!(kv, a; ckpt, pack, contents, out);
    if let Some(r) = &a.refs {
        kv.set("refs", r.join(","));
    }
    let state = TrainState::load(&require_path(&kv, "ckpt")?)?;
    let pack = GlyphPack::load(&require_path(&kv, "pack")?)?;
    let out = require_path(&kv, "out")?;
    let refs: Vec<PathBuf> = kv.get_str("refs").unwrap_or("").split(',').filter(|s| !s.is_empty()).map(PathBuf::from).collect();
    if refs.is_empty() {
        return Err(Error::Config("at least one --refs image is required".into()));
    }
    let references = refs
        .iter()
        .map(|p| GlyphImage::new(read_glyph_png(p, pack.size())?, pack.size(), 0, 0))
        .collect::<Result<Vec<_>>>()?;
    let contents: Vec<ContentId> = match kv.get_str("contents") {
        Some(s) => parse_ids(s)?,
        None => (1..=pack.contents()).collect(),
    };
    let (inputs, skipped) = build_inference_inputs(&pack, &contents, &references)?;
    for q in &skipped {
        eprintln!("content {q}: no prototype glyphs, skipped");
    }
    let glyphs = inputs
        .iter()
        .map(|i| state.gen.generate(&i.prototypes, i.references.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<Option<&GlyphImage>>> = glyphs.iter().map(|g| vec![Some(g)]).collect();
    write_sheet_rows(&out, &rows)?;
    println!("{} glyphs -> {}", glyphs.len(), out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mut kv = load_kv(&a.config)?;
    overlay!(kv, a; ckpt, pack, phi, holdout);
    let state = TrainState::load(&require_path(&kv, "ckpt")?)?;
    let mut pack = GlyphPack::load(&require_path(&kv, "pack")?)?;
    if let Some(h) = kv.get_str("holdout") {
        pack.manifest.holdout_styles = parse_ids(h)?;
        pack.manifest.validate()?;
    }
    let nets = PerceptualSet::load(&require_path(&kv, "phi")?)?;
    let report = evaluate(&state.gen, &pack, state.config.n, &nets.content, &nets.style)?;
    print!("{}", report.to_kv().to_text());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let results = gradsuite::run_suite(a.include_broken);
    print!("{}", gradsuite::format_table(&results));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} cases passed", results.len());
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) | Error::Tensor(_) => 4,
        _ => 3,
    }
}

fn set_threads() {
    let Ok(v) = std::env::var("GWNET_THREADS") else { return };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("GWNET_THREADS: {e}");
            }
        }
        _ => log::warn!("ignoring GWNET_THREADS={v}: expected a positive integer"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    set_threads();
    let r = match &cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Classifiers(a) => classifiers(a),
        Command::Train(a) => train(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_ranges() {
        assert_eq!(parse_ids("1,3,5-7").unwrap(), vec![1, 3, 5, 6, 7]);
        assert!(parse_ids("4-2").is_err());
        assert!(parse_ids("x").is_err());
        assert!(parse_ids("").unwrap().is_empty());
    }

    #[test]
    fn arguments_parse() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn path_keys_are_required() {
        let kv = KeyValues::new();
        let e = require_path(&kv, "out").unwrap_err();
        assert!(e.to_string().contains("--out"));
        assert_eq!(exit_code(&e), 2);
    }
}
