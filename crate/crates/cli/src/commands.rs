use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nnwm::attacks::{distill_attack, finetune_attack, overwrite_attack, prune, OverwriteSpec, PruneSpec};
use nnwm::data::{load_cifar10_binary, synth_dataset, Dataset, SynthSpec};
use nnwm::experiment::{run_embed, EmbedSpec, Situation};
use nnwm::nn::{cross_entropy_loss, evaluate, predict_logits, CnnConfig, HostModel, TrainConfig, TrainData};
use nnwm::persistence::{
    load_bits, load_dataset, load_key, load_model, save_bits, save_dataset, save_key, save_model, write_atomic,
    write_record_csv,
};
use nnwm::record::{ExperimentRecord, RecordRow};
use nnwm::rng::derive_seed;
use nnwm::watermark::{ConvWeights, DetectionReport, KeyFamily, Watermark, WatermarkBits};

use crate::config::RunConfig;
use crate::{AttackCommand, Cli, Command, DataArgs, DatasetArgs, EmbedArgs, KeygenArgs, MarkArgs, ReportArgs};

const DEFAULT_LAYER: &str = "conv4";
const DEFAULT_BITS: usize = 64;
const OVERWRITE_STREAM: u64 = 0x4F56_5257;

/// Settings shared by every command after merging flags, config and defaults.
struct Ctx {
    cfg: RunConfig,
    seed: Option<u64>,
    threads: usize,
    out_dir: PathBuf,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn out(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("cannot create output directory {}", self.out_dir.display()))?;
        Ok(self.out_dir.join(name))
    }

    fn train_config(&self, data: &DataArgs) -> TrainConfig {
        let mut cfg = TrainConfig { seed: self.seed(), threads: self.threads, ..self.cfg.train.clone() };
        if let Some(lambda) = self.cfg.embed.lambda {
            cfg.lambda = lambda;
        }
        if let Some(epochs) = data.epochs {
            cfg = cfg.with_epochs(epochs);
        }
        cfg
    }

    /// Continuation runs (attacks) default to half the training budget.
    fn attack_config(&self, data: &DataArgs) -> TrainConfig {
        let base = self.train_config(&DataArgs { epochs: None, ..data.clone() });
        base.with_epochs(data.epochs.unwrap_or(base.epochs / 2))
    }

    fn datasets(&self, args: &DataArgs) -> Result<(Dataset, Dataset)> {
        let dir = args.data.as_ref().or(if args.cifar.is_none() { self.cfg.data.dir.as_ref() } else { None });
        let cifar = args.cifar.as_ref().or(if args.data.is_none() { self.cfg.data.cifar.as_ref() } else { None });
        if let Some(dir) = dir {
            let train = load_dataset(dir.join("train.nnwd"))?;
            let test = load_dataset(dir.join("test.nnwd"))?;
            if train.shape != test.shape || train.num_classes != test.num_classes {
                bail!("train and test sets in {} do not match", dir.display());
            }
            return Ok((train, test));
        }
        if let Some(dir) = cifar {
            return Ok(load_cifar10_binary(dir)?);
        }
        Ok(synth_dataset(&self.cfg.data.synth)?)
    }

    /// Host architecture; the default one is adapted to the data's shape.
    fn arch(&self, data: &Dataset) -> CnnConfig {
        self.cfg.arch.clone().unwrap_or_else(|| CnnConfig {
            input: data.shape,
            num_classes: data.num_classes,
            ..CnnConfig::default()
        })
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let ctx = Ctx {
        seed: cli.seed.or(cfg.seed),
        threads: cli.threads.or(cfg.threads).unwrap_or(1).max(1),
        out_dir: cli.out_dir.or(cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("nnwm-out")),
        cfg,
    };
    match cli.command {
        Command::Keygen(a) => keygen(&ctx, a),
        Command::Dataset(a) => dataset(&ctx, a),
        Command::Embed(a) => embed(&ctx, a),
        Command::Extract(a) => extract(&a),
        Command::Attack(a) => attack(&ctx, a),
        Command::Report(a) => report(&ctx, a),
    }
}

fn keygen(ctx: &Ctx, a: KeygenArgs) -> Result<()> {
    let dim = match (a.dim, &a.model) {
        (Some(d), _) => d,
        (None, Some(path)) => {
            let model = load_model(path)?;
            let layer = model.resolve_conv(a.layer.as_deref().unwrap_or(DEFAULT_LAYER))?;
            ConvWeights::from_layer(layer)?.mean_len()
        }
        (None, None) => bail!("keygen needs --dim or --model with --layer"),
    };
    let key = nnwm::watermark::KeyMatrix::generate(a.family, a.bits, dim, ctx.seed())?;
    let path = match a.out {
        Some(p) => p,
        None => ctx.out("key.toml")?,
    };
    save_key(&key, a.layer.as_deref().unwrap_or(DEFAULT_LAYER), a.explicit, &path)?;
    println!(
        "key: family {} T {} M {} seed {} -> {}",
        key.family(),
        key.bits(),
        key.dim(),
        key.seed(),
        path.display()
    );
    Ok(())
}

fn dataset(ctx: &Ctx, a: DatasetArgs) -> Result<()> {
    let base = &ctx.cfg.data.synth;
    let spec = SynthSpec {
        num_classes: a.classes.unwrap_or(base.num_classes),
        train_per_class: a.train_per_class.unwrap_or(base.train_per_class),
        test_per_class: a.test_per_class.unwrap_or(base.test_per_class),
        image_size: a.size.unwrap_or(base.image_size),
        noise: a.noise.unwrap_or(base.noise),
        seed: ctx.seed.unwrap_or(base.seed),
        domain: a.domain.unwrap_or(base.domain),
    };
    let (train, test) = synth_dataset(&spec)?;
    let (tp, sp) = (ctx.out("train.nnwd")?, ctx.out("test.nnwd")?);
    save_dataset(&train, &tp)?;
    save_dataset(&test, &sp)?;
    println!(
        "dataset: {} classes, {} train / {} test images of {} (seed {}, domain {}) -> {}",
        spec.num_classes,
        train.len(),
        test.len(),
        train.shape,
        spec.seed,
        spec.domain,
        ctx.out_dir.display()
    );
    Ok(())
}

fn embed(ctx: &Ctx, a: EmbedArgs) -> Result<()> {
    let e = &ctx.cfg.embed;
    let situation = a.situation.or(e.situation).unwrap_or(Situation::TrainToEmbed);
    let source_path = a.source.or(e.source.clone());
    let source = match (situation.needs_source(), &source_path) {
        (true, Some(p)) => Some(load_model(p)?),
        (true, None) => bail!("{situation} needs --source (a trained model)"),
        (false, Some(_)) => bail!("train-to-embed starts from scratch; --source is not used"),
        (false, None) => None,
    };
    let given_key = a.key.map(|p| load_key(&p)).transpose()?;
    let layer = a
        .layer
        .or(e.layer.clone())
        .or(given_key.as_ref().map(|(_, l)| l.clone()))
        .unwrap_or_else(|| DEFAULT_LAYER.into());
    let payload_path = a.payload.or(e.payload.clone());
    let bits = match (&payload_path, &given_key) {
        (Some(p), _) => load_bits(p)?,
        (None, Some((k, _))) => WatermarkBits::ones(k.bits())?,
        (None, None) => WatermarkBits::ones(a.bits.or(e.bits).unwrap_or(DEFAULT_BITS))?,
    };
    let mut cfg = ctx.train_config(&a.data);
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    let spec = EmbedSpec {
        situation,
        family: given_key.as_ref().map(|(k, _)| k.family()).or(a.family).or(e.family).unwrap_or(KeyFamily::Random),
        key_seed: a.key_seed.or(e.key_seed).unwrap_or(ctx.seed()),
        key: given_key.as_ref().map(|(k, _)| k.clone()),
        layer,
        bits,
    };
    let (train, test) = ctx.datasets(&a.data)?;
    let arch = ctx.arch(&train);
    let out = run_embed(&arch, &spec, &cfg, &train, Some(&test), source.as_ref())?;

    let model_path = ctx.out("model.nnwm")?;
    save_model(&out.model, &model_path)?;
    save_key(&out.mark.key, &out.mark.layer, spec.key.is_some(), ctx.out("key.toml")?)?;
    save_bits(&out.mark.bits, ctx.out("payload.toml")?)?;
    write_record_csv(&out.record, ctx.out("record.csv")?)?;
    let text = format_report(&out.report, &out.mark);
    write_atomic(&ctx.out("report.txt")?, text.as_bytes())?;
    let last = out.record.last();
    println!(
        "embed: {situation}, {} key, T {} into {} (lambda {}), {} epochs",
        out.mark.key.family(),
        out.mark.bits.len(),
        out.mark.layer,
        cfg.lambda,
        cfg.epochs
    );
    if let Some(r) = last {
        println!("final: E0 {:.4} E_R {:.4} test error {:.4}", r.e0, r.e_r, r.test_error.unwrap_or(f64::NAN));
    }
    print!("{text}");
    println!("wrote {}", ctx.out_dir.display());
    Ok(())
}

fn load_mark(a: &MarkArgs) -> Result<(HostModel, Watermark)> {
    let model = load_model(&a.model)?;
    let (key, stored_layer) = load_key(&a.key)?;
    let bits = match &a.payload {
        Some(p) => load_bits(p)?,
        None => WatermarkBits::ones(key.bits())?,
    };
    let layer = a.layer.clone().unwrap_or(stored_layer);
    let mark = Watermark::new(key, bits, layer)?;
    mark.target(&model)?;
    Ok((model, mark))
}

fn format_report(r: &DetectionReport, mark: &Watermark) -> String {
    let mut s = String::new();
    let t = mark.bits.len();
    let _ = writeln!(s, "layer: {}", mark.layer);
    let _ = writeln!(s, "bits: {t} (M = {})", mark.key.dim());
    let _ = writeln!(s, "BER: {:.4} ({} of {t} bits wrong)", r.ber, (r.ber * t as f64).round() as usize);
    let _ = writeln!(s, "embedding loss: {:.6e}", r.embedding_loss);
    let _ = writeln!(s, "mean |logit|: {:.6e}", r.mean_abs_logit);
    let min = r.activations.iter().copied().fold(f64::INFINITY, f64::min);
    let max = r.activations.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = r.activations.iter().sum::<f64>() / t as f64;
    let _ = writeln!(s, "activations: min {min:.4} mean {mean:.4} max {max:.4}");
    let _ = writeln!(s, "near 0.5 (0.45..0.55): {:.4}", r.near_half_fraction);
    let _ = writeln!(s, "histogram (10 bins over [0, 1]): {:?}", r.histogram);
    if r.degenerate {
        let _ = writeln!(s, "note: every logit is zero (e.g. a zeroed layer); bits read as all ones");
    }
    if r.overdetermined {
        let _ = writeln!(s, "note: T > M, the key is overdetermined; expect residual embedding loss");
    }
    s
}

fn extract(a: &MarkArgs) -> Result<()> {
    let (model, mark) = load_mark(a)?;
    let report = mark.report(&model)?;
    print!("{}", format_report(&report, &mark));
    println!("extracted: {}", report.extracted);
    Ok(())
}

/// Test-set loss, embedding loss and metrics of `model` as one record row.
fn measure(series: &str, step: f64, model: &HostModel, mark: &Watermark, test: &Dataset, lambda: f64) -> Result<RecordRow> {
    let logits = predict_logits(model, test)?;
    let (e0, _) = cross_entropy_loss(&logits, model.num_classes, &test.labels)?;
    let e_r = mark.loss(model)?;
    Ok(RecordRow {
        series: series.into(),
        step,
        e0,
        e_r,
        total: e0 + lambda * e_r,
        test_error: Some(evaluate(model, test)?),
        ber: Some(mark.ber(model)?),
    })
}

fn attack(ctx: &Ctx, cmd: AttackCommand) -> Result<()> {
    match cmd {
        AttackCommand::Prune { mark, rates, orders, data } => {
            let (model, wm) = load_mark(&mark)?;
            let (_, test) = ctx.datasets(&data)?;
            let lambda = ctx.train_config(&data).lambda;
            let mut record = ExperimentRecord::default();
            for &order in &orders {
                for (i, &rate) in rates.iter().enumerate() {
                    let spec = PruneSpec { layer: wm.layer.clone(), rate, order, seed: derive_seed(ctx.seed(), i as u64) };
                    let pruned = prune(&model, &spec)?;
                    record.push(measure(order.as_str(), rate, &pruned, &wm, &test, lambda)?);
                }
            }
            for r in &record.rows {
                println!("{:<10} alpha {:.3}  BER {:.4}  test error {:.4}", r.series, r.step, r.ber.unwrap(), r.test_error.unwrap());
            }
            let path = ctx.out("prune.csv")?;
            write_record_csv(&record, &path)?;
            println!("wrote {}", path.display());
        }
        AttackCommand::Finetune { mark, data } => {
            let (model, wm) = load_mark(&mark)?;
            let (train, test) = ctx.datasets(&data)?;
            let cfg = ctx.attack_config(&data);
            let (tuned, rep) = finetune_attack(&model, TrainData::labeled(&train, Some(&test)), &cfg, &wm)?;
            save_model(&tuned, ctx.out("finetuned.nnwm")?)?;
            write_record_csv(&rep.record, ctx.out("finetune.csv")?)?;
            println!(
                "finetune: {} epochs; E_R {:.4e} -> {:.4e}; BER {:.4} -> {:.4}; test error {:.4}",
                cfg.epochs,
                rep.e_r_before,
                rep.e_r_after,
                rep.ber_before,
                rep.ber_after,
                rep.test_error.unwrap_or(f64::NAN)
            );
        }
        AttackCommand::Overwrite { mark, bits, targets, family, lambda, data } => {
            let (model, wm) = load_mark(&mark)?;
            let (train, test) = ctx.datasets(&data)?;
            let cfg = ctx.attack_config(&data);
            let sizes = if bits.is_empty() { vec![wm.bits.len()] } else { bits };
            let layers = if targets.is_empty() { vec![wm.layer.clone()] } else { targets };
            let mut record = ExperimentRecord::default();
            for &t in &sizes {
                let spec = OverwriteSpec {
                    layers: layers.clone(),
                    family,
                    seed: derive_seed(ctx.seed(), OVERWRITE_STREAM),
                    bits: t,
                    lambda: lambda.unwrap_or(cfg.lambda),
                    config: cfg.clone(),
                };
                let (attacked, rep) = overwrite_attack(&model, &spec, TrainData::labeled(&train, Some(&test)), &wm)?;
                save_model(&attacked, ctx.out(&format!("overwrite_{t}.nnwm"))?)?;
                let mut row = measure("overwrite", t as f64, &attacked, &wm, &test, spec.lambda)?;
                row.e0 = rep.record.last().map_or(row.e0, |r| r.e0);
                record.push(row);
                println!(
                    "overwrite T' {t}: original BER {:.4} (E_R {:.4e}), new BER {:.4}, test error {:.4}",
                    rep.original_ber,
                    rep.original_e_r,
                    rep.new_ber,
                    rep.test_error.unwrap_or(f64::NAN)
                );
            }
            let path = ctx.out("overwrite.csv")?;
            write_record_csv(&record, &path)?;
            println!("wrote {}", path.display());
        }
        AttackCommand::Distill { mark, data } => {
            let (model, wm) = load_mark(&mark)?;
            let (train, test) = ctx.datasets(&data)?;
            let cfg = ctx.train_config(&data);
            let (student, rep) = distill_attack(&model, &train, Some(&test), &cfg, &wm)?;
            save_model(&student, ctx.out("student.nnwm")?)?;
            write_record_csv(&rep.record, ctx.out("distill.csv")?)?;
            println!(
                "distill: {} epochs; student BER {:.4}; test error student {:.4} teacher {:.4}",
                cfg.epochs,
                rep.ber,
                rep.student_error.unwrap_or(f64::NAN),
                rep.teacher_error.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}

fn report(ctx: &Ctx, a: ReportArgs) -> Result<()> {
    let mut csv = String::from("model,bin_low,bin_high,count\n");
    for path in &a.model {
        let args = MarkArgs { model: path.clone(), key: a.key.clone(), payload: a.payload.clone(), layer: a.layer.clone() };
        let (model, mark) = load_mark(&args)?;
        let r = mark.report(&model)?;
        let name = model_label(path);
        if name.contains([',', '"', '\n']) {
            bail!("model file name {name:?} cannot be written to CSV");
        }
        for (i, count) in r.histogram.iter().enumerate() {
            let _ = writeln!(csv, "{name},{:.1},{:.1},{count}", i as f64 / 10.0, (i + 1) as f64 / 10.0);
        }
        println!("{name}: BER {:.4} mean |logit| {:.4e} near 0.5 {:.4}", r.ber, r.mean_abs_logit, r.near_half_fraction);
    }
    let out = ctx.out("histogram.csv")?;
    write_atomic(&out, csv.as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn model_label(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}
