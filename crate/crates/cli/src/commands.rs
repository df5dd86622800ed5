use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use platerim_core::dataset::{Dataset, Exclusion, LabeledImage};
use platerim_core::depstats::{analyze, dependence_deltas, DependenceReport, StatsConfig};
use platerim_core::evalsuite::{evaluate, records_from_csv, records_to_csv, run_ablation, AblationInputs, AblationVariant};
use platerim_core::geometry::{composite_pixels, CompositeOptions, Compositing, Quad};
use platerim_core::losses::TargetSpec;
use platerim_core::pipeline::{
    load_images, load_manifest, load_patch, load_png, manifest_root, read_file, render_dataset, render_victim_set,
    resolve_image, save_patch, save_png, sha256_file, sha256_hex, split_dataset, write_atomic, write_json_atomic,
    ManifestEntry, RunConfig, Settings, Split,
};
use platerim_core::trainer::{make_target, patch_tv, train, AttackMode, LrEvent, Patch, StopReason, TrainConfig};
use platerim_core::victims::{
    read_image, train_victims, weights_from_bytes, weights_to_bytes, Alphabet, Detection, VictimMeta, VictimWeights,
};
use platerim_core::Error;

use crate::args::*;
use crate::error::{CliError, CliResult};
use crate::serve;

/// Environment variable under which relative `--out` paths are placed.
pub const OUTPUT_ROOT_VAR: &str = "PLATERIM_OUTPUT_ROOT";

// Streams derived from the master seed.
const SPLIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;

fn stream(seed: u64, k: u64) -> u64 {
    seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

struct Ctx {
    seed: u64,
    settings: Settings,
    config: Option<(PathBuf, String)>,
}

impl Ctx {
    fn run_config(&self, command: &str, out: &Path) -> RunConfig {
        let mut rc = RunConfig::new(command, self.seed, out, &self.settings);
        if let Some((path, hash)) = &self.config {
            rc.args.insert("config".into(), path.display().to_string());
            rc.input_hashes.insert("config".into(), hash.clone());
        }
        rc
    }
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    let config = match &cli.config {
        Some(p) => Some((p.clone(), sha256_file(p)?)),
        None => None,
    };
    let settings = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    let ctx = Ctx { seed: cli.seed, settings, config };
    match cli.command {
        Command::RenderSynthetic(a) => render_synthetic(&ctx, a),
        Command::TrainVictims(a) => train_victims_cmd(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Eval(a) => eval_cmd(&ctx, a),
        Command::Ablate(a) => ablate_cmd(&ctx, a),
        Command::Stats(a) => stats_cmd(&ctx, a),
        Command::Apply(a) => apply_cmd(&ctx, a),
        Command::LabelServe(a) => serve::run(a),
    }
}

fn output_dir(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn finish(out: &Path, rc: &RunConfig) -> CliResult<()> {
    write_json_atomic(&out.join("run_config.json"), rc)?;
    println!("{}", out.display());
    Ok(())
}

fn render_synthetic(ctx: &Ctx, a: RenderArgs) -> CliResult<()> {
    let mut syn = ctx.settings.synthetic.clone();
    if let Some(n) = a.count {
        syn.count = n;
    }
    if let Some(n) = a.test_count {
        syn.test_count = n;
    }
    if a.text.is_some() {
        syn.text = a.text;
    }
    if a.unlabeled {
        syn.labeled = false;
    }
    let out = output_dir(&a.out);
    let mut settings = ctx.settings.clone();
    settings.synthetic = syn.clone();
    let manifest = render_dataset(&out, &syn, &settings.render, &Alphabet::default(), ctx.seed)?;
    let mut rc = ctx.run_config("render-synthetic", &a.out);
    rc.settings = settings;
    rc.dataset = Some(manifest.strip_prefix(&out).unwrap_or(&manifest).to_path_buf());
    finish(&out, &rc)
}

fn train_victims_cmd(ctx: &Ctx, a: VictimArgs) -> CliResult<()> {
    let s = &ctx.settings;
    let alphabet = Alphabet::default();
    let meta = VictimMeta::new(s.render.height, s.render.width, alphabet.clone())?;
    if meta.max_len != s.render.max_len {
        return Err(Error::Argument(format!(
            "render max_len {} differs from the reader's {} positions",
            s.render.max_len, meta.max_len
        ))
        .into());
    }
    let negatives = a.negatives.unwrap_or(a.count / 6);
    let (plates, empty) = render_victim_set(&s.synthetic, a.count, negatives, &s.render, &alphabet, ctx.seed)?;
    log::info!("training victims on {} plates and {} empty scenes", plates.len(), empty.len());
    let (weights, report) = train_victims(&plates, &empty, meta.clone(), &s.victims, stream(ctx.seed, TRAIN_STREAM))?;
    let out = output_dir(&a.out);
    write_atomic(&out.join("victims.spvw"), &weights_to_bytes(&weights))?;
    write_json_atomic(&out.join("victim_report.json"), &report)?;
    let mut rc = ctx.run_config("train-victims", &a.out);
    rc.victim_meta = Some(meta);
    rc.args.insert("count".into(), a.count.to_string());
    rc.args.insert("negatives".into(), negatives.to_string());
    finish(&out, &rc)
}

fn load_victims(path: &Path, rc: &mut RunConfig) -> CliResult<VictimWeights> {
    let bytes = read_file(path)?;
    let w = weights_from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })?;
    rc.input_hashes.insert("victims".into(), sha256_hex(&bytes));
    rc.args.insert("victims".into(), path.display().to_string());
    rc.victim_meta = Some(w.meta.clone());
    Ok(w)
}

/// A manifest loaded and divided into train, validation and test images.
struct Splits {
    train: Vec<LabeledImage>,
    val: Vec<LabeledImage>,
    test: Dataset,
    excluded: Vec<Exclusion>,
}

impl Splits {
    fn select(&self, which: SplitArg) -> Dataset {
        let ds = |images: &[LabeledImage]| Dataset { images: images.to_vec(), excluded: self.excluded.clone() };
        match which {
            SplitArg::Auto if !self.test.images.is_empty() => self.test.clone(),
            SplitArg::Auto | SplitArg::Val => ds(&self.val),
            SplitArg::Train => ds(&self.train),
            SplitArg::Test => self.test.clone(),
            SplitArg::All => {
                let mut all = ds(&self.train);
                all.images.extend(self.val.iter().cloned());
                all.images.extend(self.test.images.iter().cloned());
                all.excluded.extend(self.test.excluded.iter().cloned());
                all
            }
        }
    }
}

/// Use the manifest's train/val tags when present; otherwise split the
/// untagged labeled entries with the seeded holdout. Test-tagged entries are
/// never trained on.
fn load_splits(manifest: &Path, holdout: f64, seed: u64, rc: &mut RunConfig) -> CliResult<Splits> {
    let entries = load_manifest(manifest)?;
    let root = manifest_root(manifest);
    rc.dataset = Some(manifest.to_path_buf());
    rc.input_hashes.insert("dataset".into(), sha256_file(manifest)?);
    let mut joined = String::new();
    for e in entries.iter().filter(|e| e.corners.is_some()) {
        joined.push_str(&sha256_file(&resolve_image(&root, e)).map_err(|err| err.with_item(&e.id))?);
    }
    rc.input_hashes.insert("dataset_images".into(), sha256_hex(joined.as_bytes()));

    let tagged = |s: Split| entries.iter().filter(move |e| e.split == Some(s)).cloned().collect::<Vec<_>>();
    let test = load_images(&root, &tagged(Split::Test))?;
    let untagged: Vec<ManifestEntry> = entries.iter().filter(|e| e.split.is_none()).cloned().collect();
    let (train_e, val_e, mut excluded) = if entries.iter().any(|e| matches!(e.split, Some(Split::Train | Split::Val))) {
        let skipped: Vec<Exclusion> = untagged.iter().map(|e| Exclusion { id: e.id.clone(), reason: "no split tag".into() }).collect();
        (tagged(Split::Train), tagged(Split::Val), skipped)
    } else {
        let (labeled, unlabeled): (Vec<_>, Vec<_>) = untagged.into_iter().partition(|e| e.corners.is_some());
        let skipped = unlabeled.iter().map(|e| Exclusion { id: e.id.clone(), reason: "no corner labels".into() }).collect();
        let (t, v) = split_dataset(&labeled, holdout, seed)?;
        (t, v, skipped)
    };
    let train = load_images(&root, &train_e)?;
    let val = load_images(&root, &val_e)?;
    excluded.extend(train.excluded);
    excluded.extend(val.excluded);
    Ok(Splits { train: train.images, val: val.images, test, excluded })
}

/// Training and validation images the victims can take, plus the plate text
/// they all show.
fn attack_sets(
    splits: &Splits,
    victims: &VictimWeights,
    truth: Option<&str>,
) -> CliResult<(Vec<LabeledImage>, Vec<LabeledImage>, Vec<Exclusion>, String)> {
    let m = &victims.meta;
    let mut excluded = splits.excluded.clone();
    let mut keep = |images: &[LabeledImage]| -> Vec<LabeledImage> {
        let mut out = Vec::new();
        for li in images {
            let reason = if li.image.shape() != [3, m.height, m.width] {
                Some(format!("image shape {:?} does not match victim input 3x{}x{}", li.image.shape(), m.height, m.width))
            } else if let Err(e) = m.alphabet.encode(&li.text, m.max_len) {
                Some(e.to_string())
            } else if truth.is_some_and(|t| t != li.text) {
                Some(format!("plate text {:?} differs from the truth", li.text))
            } else {
                None
            };
            match reason {
                Some(reason) => excluded.push(Exclusion { id: li.id.clone(), reason }),
                None => out.push(li.clone()),
            }
        }
        out
    };
    let train = keep(&splits.train);
    let val = keep(&splits.val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Argument(format!(
            "need usable training and validation images, got {} and {} ({} excluded)",
            train.len(),
            val.len(),
            excluded.len()
        ))
        .into());
    }
    let texts: BTreeSet<&str> = train.iter().chain(&val).map(|li| li.text.as_str()).collect();
    let truth = match truth {
        Some(t) => {
            m.alphabet.encode(t, m.max_len)?;
            t.to_string()
        }
        None if texts.len() == 1 => texts.into_iter().next().expect("one text").to_string(),
        None => {
            return Err(Error::Argument(format!(
                "training images show {} different plate texts; pick one with --truth",
                texts.len()
            ))
            .into())
        }
    };
    for e in &excluded {
        log::warn!("excluded {}: {}", e.id, e.reason);
    }
    Ok((train, val, excluded, truth))
}

fn attack_config(ctx: &Ctx, a: &AttackArgs) -> TrainConfig {
    let mut cfg = ctx.settings.train.clone();
    if let Some(m) = a.mode {
        cfg.mode = m.into();
    }
    let set = |dst: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.batch, a.batch);
    set(&mut cfg.patch_h, a.patch_h);
    set(&mut cfg.patch_w, a.patch_w);
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.seed = stream(ctx.seed, TRAIN_STREAM);
    cfg
}

fn attack_target(truth: &str, mode: AttackMode, target: Option<&str>, meta: &VictimMeta, seed: u64) -> CliResult<TargetSpec> {
    let spec = match target {
        Some(t) => TargetSpec::new(t, &meta.alphabet, meta.max_len)?,
        None => make_target(truth, mode, &meta.alphabet, meta.max_len, stream(seed, TARGET_STREAM))?,
    };
    if spec.text == truth {
        return Err(Error::Argument(format!("target {:?} equals the true plate", spec.text)).into());
    }
    Ok(spec)
}

fn record_attack(rc: &mut RunConfig, cfg: &TrainConfig, truth: &str, target: &TargetSpec) {
    rc.settings.train = cfg.clone();
    rc.mode = Some(cfg.mode);
    rc.target = Some(target.text.clone());
    rc.args.insert("truth".into(), truth.to_string());
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainReport {
    mode: AttackMode,
    truth: String,
    target: String,
    train_images: usize,
    val_images: usize,
    excluded: Vec<Exclusion>,
    epochs_run: usize,
    best_epoch: usize,
    best_val_loss: f64,
    stop: StopReason,
    lr_events: Vec<LrEvent>,
    baseline: f64,
    tv_best: f64,
    tv_final: f64,
}

fn save_patch_pair(dir: &Path, best: &Patch, last: &Patch) -> CliResult<()> {
    for (name, p) in [("patch_best", best), ("patch_final", last)] {
        let px = p.pixels();
        save_patch(&dir.join(format!("{name}.spat")), &px)?;
        save_png(&dir.join(format!("{name}.png")), &px)?;
    }
    Ok(())
}

fn curve_csv(curve: &[platerim_core::trainer::EpochRecord]) -> Vec<u8> {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for e in curve {
        s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, e.lr));
    }
    s.into_bytes()
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> CliResult<()> {
    let mut rc = ctx.run_config("train", &a.out);
    let victims = load_victims(&a.data.victims, &mut rc)?;
    let splits = load_splits(&a.data.dataset, ctx.settings.holdout(), stream(ctx.seed, SPLIT_STREAM), &mut rc)?;
    let (train_set, val_set, excluded, truth) = attack_sets(&splits, &victims, a.attack.truth.as_deref())?;
    let cfg = attack_config(ctx, &a.attack);
    let target = attack_target(&truth, cfg.mode, a.attack.target.as_deref(), &victims.meta, ctx.seed)?;
    record_attack(&mut rc, &cfg, &truth, &target);

    let result = train(&cfg, &train_set, &val_set, &victims, &target, &ctx.settings.loss)?;
    let out = output_dir(&a.out);
    save_patch_pair(&out, &result.best_patch, &result.final_patch)?;
    write_atomic(&out.join("curve.csv"), &curve_csv(&result.curve))?;
    let report = TrainReport {
        mode: cfg.mode,
        truth,
        target: target.text.clone(),
        train_images: train_set.len(),
        val_images: val_set.len(),
        excluded,
        epochs_run: result.curve.len(),
        best_epoch: result.best_epoch,
        best_val_loss: result.best_val_loss,
        stop: result.stop,
        lr_events: result.lr_events.clone(),
        baseline: result.baseline,
        tv_best: patch_tv(&result.best_patch)?,
        tv_final: patch_tv(&result.final_patch)?,
    };
    write_json_atomic(&out.join("train_report.json"), &report)?;
    finish(&out, &rc)
}

fn target_from_report(patch: &Path) -> CliResult<String> {
    let path = patch.parent().unwrap_or(Path::new(".")).join("train_report.json");
    if !path.exists() {
        return Err(CliError::Usage(format!("no --target given and no {} beside the patch", path.display())));
    }
    let report: TrainReport = serde_json::from_slice(&read_file(&path)?).map_err(Error::from)?;
    Ok(report.target)
}

fn eval_cmd(ctx: &Ctx, a: EvalArgs) -> CliResult<()> {
    let mut rc = ctx.run_config("eval", &a.out);
    let victims = load_victims(&a.data.victims, &mut rc)?;
    let splits = load_splits(&a.data.dataset, ctx.settings.holdout(), stream(ctx.seed, SPLIT_STREAM), &mut rc)?;
    let patch = load_patch(&a.patch)?;
    rc.input_hashes.insert("patch".into(), sha256_file(&a.patch)?);
    rc.args.insert("patch".into(), a.patch.display().to_string());
    rc.args.insert("split".into(), format!("{:?}", a.split).to_lowercase());
    rc.args.insert("variant".into(), a.variant.as_str().into());
    let target = match a.target {
        Some(t) => t,
        None => target_from_report(&a.patch)?,
    };
    rc.target = Some(target.clone());
    let data = splits.select(a.split);
    let report = evaluate(Some(&patch), a.variant, &data, &victims, &target, &ctx.settings.eval)?;
    let out = output_dir(&a.out);
    write_atomic(&out.join("eval.csv"), &records_to_csv(&report.records)?)?;
    write_atomic(&out.join("control.csv"), &records_to_csv(&report.control_records)?)?;
    write_json_atomic(&out.join("summary.json"), &report.summary)?;
    finish(&out, &rc)
}

fn ablate_cmd(ctx: &Ctx, a: AblateArgs) -> CliResult<()> {
    let mut rc = ctx.run_config("ablate", &a.out);
    let victims = load_victims(&a.data.victims, &mut rc)?;
    let splits = load_splits(&a.data.dataset, ctx.settings.holdout(), stream(ctx.seed, SPLIT_STREAM), &mut rc)?;
    let (train_set, val_set, _, truth) = attack_sets(&splits, &victims, a.attack.truth.as_deref())?;
    let cfg = attack_config(ctx, &a.attack);
    let target = attack_target(&truth, cfg.mode, a.attack.target.as_deref(), &victims.meta, ctx.seed)?;
    record_attack(&mut rc, &cfg, &truth, &target);
    let variants = if a.variants.is_empty() { AblationVariant::ALL.to_vec() } else { a.variants.clone() };
    rc.args.insert("variants".into(), variants.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(","));

    let test = splits.select(SplitArg::Auto);
    let inputs = AblationInputs { train: &train_set, val: &val_set, test: &test, victims: &victims, target: &target };
    let report = run_ablation(&inputs, &cfg, &ctx.settings.loss, &ctx.settings.eval, &variants)?;
    let out = output_dir(&a.out);
    for row in &report.rows {
        if let (Some(best), Some(last)) = (&row.best_patch, &row.final_patch) {
            save_patch_pair(&out.join(row.variant.as_str()), best, last)?;
        }
        if let Some(e) = &row.error {
            log::warn!("variant {} failed: {e}", row.variant.as_str());
        }
    }
    write_atomic(&out.join("ablation.csv"), &report.to_csv()?)?;
    write_json_atomic(&out.join("ablation.json"), &report)?;
    finish(&out, &rc)
}

fn read_records(path: &Path, role: &str, rc: &mut RunConfig) -> CliResult<Vec<platerim_core::evalsuite::EvalRecord>> {
    let bytes = read_file(path)?;
    rc.input_hashes.insert(role.into(), sha256_hex(&bytes));
    rc.args.insert(role.into(), path.display().to_string());
    Ok(records_from_csv(&bytes).map_err(|e| match e {
        Error::Csv(m) => Error::Csv(format!("{}: {m}", path.display())),
        e => e,
    })?)
}

fn stats_cmd(ctx: &Ctx, a: StatsArgs) -> CliResult<()> {
    let mut rc = ctx.run_config("stats", &a.out);
    let mut cfg = StatsConfig { seed: ctx.seed, ..ctx.settings.stats.clone() };
    if let Some(n) = a.n_perm {
        cfg.n_perm = n;
    }
    if let Some(alpha) = a.alpha {
        cfg.alpha = alpha;
    }
    rc.settings.stats = cfg.clone();
    let attack = read_records(&a.eval_csv, "eval_csv", &mut rc)?;
    let control = match &a.control_csv {
        Some(p) => Some(read_records(p, "control_csv", &mut rc)?),
        None => None,
    };
    let mut report = analyze(&attack, &cfg)?;
    let control_report: Option<DependenceReport> = match &control {
        Some(c) => {
            let ctl = analyze(c, &cfg)?;
            report = dependence_deltas(&report, &ctl)?;
            Some(ctl)
        }
        None => None,
    };
    for (p, n) in &report.missing {
        log::warn!("{n} records without {p:?} left out");
    }
    let out = output_dir(&a.out);
    write_atomic(&out.join("stats.csv"), &report.to_csv()?)?;
    write_json_atomic(&out.join("stats.json"), &report)?;
    if let Some(ctl) = &control_report {
        write_atomic(&out.join("control_stats.csv"), &ctl.to_csv()?)?;
        write_json_atomic(&out.join("control_stats.json"), ctl)?;
    }
    finish(&out, &rc)
}

#[derive(Serialize)]
struct ApplyReading {
    text: String,
    detection: Detection,
}

fn apply_cmd(ctx: &Ctx, a: ApplyArgs) -> CliResult<()> {
    let mut rc = ctx.run_config("apply", &a.out);
    let patch = load_patch(&a.patch)?;
    rc.input_hashes.insert("patch".into(), sha256_file(&a.patch)?);
    let (image, plate) = match (&a.dataset, &a.id, &a.image, &a.corners) {
        (Some(m), Some(id), _, _) => {
            let entries = load_manifest(m)?;
            let e = entries
                .iter()
                .find(|e| &e.id == id)
                .ok_or_else(|| Error::Argument(format!("no entry {id:?} in {}", m.display())))?;
            let plate = e.corners.ok_or_else(|| Error::Argument(format!("entry {id:?} has no corner labels")))?;
            let path = resolve_image(&manifest_root(m), e);
            rc.dataset = Some(m.clone());
            rc.args.insert("id".into(), id.clone());
            rc.input_hashes.insert("image".into(), sha256_file(&path)?);
            (load_png(&path)?, plate)
        }
        (None, _, Some(img), Some(c)) => {
            if c.len() != 8 {
                return Err(CliError::Usage(format!("--corners takes 8 numbers, got {}", c.len())));
            }
            let pts: Vec<[f64; 2]> = c.chunks(2).map(|p| [p[0], p[1]]).collect();
            rc.args.insert("image".into(), img.display().to_string());
            rc.input_hashes.insert("image".into(), sha256_file(img)?);
            (load_png(img)?, Quad::from_slice(&pts)?)
        }
        _ => return Err(CliError::Usage("apply needs --dataset with --id, or --image with --corners".into())),
    };
    let eval = &ctx.settings.eval;
    let opts = CompositeOptions {
        rim_scale: eval.rim_scale,
        rho: a.rho,
        literal_eq4: eval.literal_eq4,
        mode: if a.rectangular { Compositing::Rectangular } else { Compositing::Homography },
    };
    rc.args.insert("rho".into(), a.rho.to_string());
    let composed = composite_pixels(&image, &patch, &plate, &opts)?;
    let reading = match &a.victims {
        Some(v) => {
            let w = load_victims(v, &mut rc)?;
            let r = read_image(&w, &composed)?;
            Some(ApplyReading { text: r.text, detection: r.detection })
        }
        None => None,
    };
    let out = output_dir(&a.out);
    save_png(&out.join("applied.png"), &composed)?;
    if let Some(r) = &reading {
        write_json_atomic(&out.join("reading.json"), r)?;
    }
    finish(&out, &rc)
}
