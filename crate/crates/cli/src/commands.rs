use std::path::Path;
use std::str::FromStr;

use freqalign::alignment::fit_power_law;
use freqalign::detector::{
    evaluate, experiment_bias_bands, experiment_bias_epochs, train_detector, Defense,
    DefenseProtocol, Detector, DetectorKind, LabeledImage, Preprocess, Preprocessor,
};
use freqalign::io::{load_images, LoadedImage, Manifest, ManifestRow};
use freqalign::lab::{gen_synthetic, PerturbKind, PerturbSpec, SynthKind};
use freqalign::metrics::{psnr, rspd, Label, MetricsReport};
use freqalign::rdc::{train_rdc, write_loss_curve, RdcModel};
use freqalign::spectral::{mean_log_spectrum, mean_profile, spectral_profile};
use freqalign::{AlignPipeline, Aligner, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::record::Outputs;
use crate::{
    AlignArgs, AnalyzeCommand, Cli, Command, DefendArgs, EvalArgs, ExperimentArgs,
    ExperimentCommand, FitArgs, GenArgs, InputArgs, PerturbArgs, RspdArgs, TrainDetectorArgs,
    TrainRdcArgs,
};

pub fn run(cli: &Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg.set_seed(seed);
    let mut out = Outputs::new(&cli.out)?;
    let (name, summary) = match &cli.command {
        Command::GenSynthetic(a) => ("gen-synthetic", gen_synthetic_cmd(a, &mut cfg, &mut out)?),
        Command::Analyze(AnalyzeCommand::Spectrum(a)) => {
            ("analyze spectrum", analyze_cmd(a, &mut out)?)
        }
        Command::Profile(a) => ("profile", profile_cmd(a, &mut out)?),
        Command::FitPowerlaw(a) => ("fit-powerlaw", fit_cmd(a, &mut cfg, &mut out)?),
        Command::Rspd(a) => ("rspd", rspd_cmd(a, &mut out)?),
        Command::Smr(a) => ("smr", align_cmd(a, false, &mut cfg, &mut out)?),
        Command::TrainRdc(a) => ("train-rdc", train_rdc_cmd(a, &mut cfg, &mut out)?),
        Command::Align(a) => ("align", align_cmd(a, true, &mut cfg, &mut out)?),
        Command::Perturb(a) => ("perturb", perturb_cmd(a, &cfg, &mut out)?),
        Command::TrainDetector(a) => ("train-detector", train_detector_cmd(a, &mut cfg, &mut out)?),
        Command::EvalDetector(a) => ("eval-detector", eval_cmd(a, &mut cfg, &mut out)?),
        Command::Defend(a) => ("defend", defend_cmd(a, &mut cfg, &mut out)?),
        Command::Experiment(ExperimentCommand::BiasBands(a)) => (
            "experiment bias-bands",
            experiment_cmd(a, true, &mut cfg, &mut out)?,
        ),
        Command::Experiment(ExperimentCommand::BiasEpochs(a)) => (
            "experiment bias-epochs",
            experiment_cmd(a, false, &mut cfg, &mut out)?,
        ),
    };
    let record = out.finish(name, &cfg, summary)?;
    eprintln!("run record: {}", record.display());
    Ok(())
}

fn parse<T: FromStr<Err = freqalign::Error>>(s: &str) -> CliResult<T> {
    s.parse()
        .map_err(|e: freqalign::Error| CliError::Usage(e.to_string()))
}

fn load(path: &Path, label: Label) -> CliResult<Vec<LoadedImage>> {
    if !path.exists() {
        return Err(CliError::not_found("image set", path));
    }
    Ok(load_images(path, label)?)
}

fn images(path: &Path) -> CliResult<Vec<Image>> {
    Ok(load(path, Label::Real)?
        .into_iter()
        .map(|l| l.image)
        .collect())
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn require_file(path: Option<&Path>, what: &str, flag: &str) -> CliResult<()> {
    match path {
        None => Err(CliError::missing(what, flag)),
        Some(p) if !p.is_file() => Err(CliError::not_found(what, p)),
        Some(_) => Ok(()),
    }
}

fn gen_synthetic_cmd(
    a: &GenArgs,
    cfg: &mut RunConfig,
    out: &mut Outputs,
) -> CliResult<serde_json::Value> {
    let spec = &mut cfg.synth;
    spec.kind = parse::<SynthKind>(&a.kind)?;
    if let Some(c) = a.count {
        spec.count = c;
    }
    if let Some(s) = a.size {
        spec.size = s;
    }
    if let Some(s) = a.strength {
        spec.strength = s;
    }
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let imgs = gen_synthetic(spec)?;
    let family = spec.kind.family();
    let mut rows = Vec::with_capacity(imgs.len());
    for (i, img) in imgs.iter().enumerate() {
        let name = format!("images/{family}_{i:04}.png");
        out.save_image(&name, img)?;
        rows.push(ManifestRow {
            path: name,
            label: spec.kind.label(),
            family: family.into(),
            seed: spec.seed,
        });
    }
    let mp = out.path("manifest.csv")?;
    Manifest { rows }.write(&mp)?;
    out.register(mp);
    println!("wrote {} {family} images", imgs.len());
    Ok(json!({ "count": imgs.len(), "family": family, "size": spec.size }))
}

fn analyze_cmd(a: &InputArgs, out: &mut Outputs) -> CliResult<serde_json::Value> {
    let imgs = images(&a.input)?;
    let heat = mean_log_spectrum(&imgs)?;
    out.write_with("spectrum.csv", |w| heat.write_csv(w))?;
    let prof = mean_profile(&imgs)?;
    out.write_with("profile.csv", |w| prof.write_csv(w))?;
    println!("analyzed {} images of size {}", imgs.len(), heat.size);
    Ok(json!({ "count": imgs.len(), "size": heat.size }))
}

fn profile_cmd(a: &InputArgs, out: &mut Outputs) -> CliResult<serde_json::Value> {
    let loaded = load(&a.input, Label::Real)?;
    let mut per_image = String::from("file,k,r_k,value\n");
    for l in &loaded {
        let p = spectral_profile(&l.image)?;
        for (k, (r, v)) in p.radii.iter().zip(&p.bins).enumerate() {
            per_image.push_str(&format!("{},{k},{r},{v}\n", stem(&l.path)));
        }
    }
    let imgs: Vec<Image> = loaded.into_iter().map(|l| l.image).collect();
    let prof = mean_profile(&imgs)?;
    out.write_with("profile.csv", |w| prof.write_csv(w))?;
    out.write("profiles.csv", per_image)?;
    println!("profile over {} images, {} bins", imgs.len(), prof.len());
    Ok(json!({ "count": imgs.len(), "bins": prof.len() }))
}

fn fit_cmd(a: &FitArgs, cfg: &mut RunConfig, out: &mut Outputs) -> CliResult<serde_json::Value> {
    if let Some(lo) = a.fit_lo {
        cfg.align.fit_lo = lo;
    }
    if let Some(hi) = a.fit_hi {
        cfg.align.fit_hi = hi;
    }
    let imgs = images(&a.input)?;
    let profiles = imgs
        .iter()
        .map(spectral_profile)
        .collect::<freqalign::Result<Vec<_>>>()?;
    let fit = fit_power_law(&profiles, cfg.align.fit_lo, cfg.align.fit_hi)?;
    if !fit.a.is_finite() || !fit.b.is_finite() {
        return Err(CliError::Numeric(format!(
            "non-finite fit a = {}, b = {}",
            fit.a, fit.b
        )));
    }
    out.write_json("fit.json", &fit)?;
    println!("a = {} b = {} residual = {}", fit.a, fit.b, fit.residual);
    Ok(serde_json::to_value(fit)?)
}

fn rspd_cmd(a: &RspdArgs, out: &mut Outputs) -> CliResult<serde_json::Value> {
    let real = images(&a.real)?;
    let test = images(&a.test)?;
    let v = rspd(&real, &test)?;
    let report = MetricsReport {
        rspd: Some(v),
        ..MetricsReport::default()
    };
    out.write_with("metrics.csv", |w| report.write_csv(w))?;
    out.write("metrics.json", report.to_json()? + "\n")?;
    println!("{v:?}");
    Ok(json!({ "rspd": v }))
}

fn aligner_from(real: &Path, fake: &Path, cfg: &RunConfig) -> CliResult<Aligner> {
    Ok(Aligner::new(&images(real)?, &images(fake)?, cfg.align)?)
}

fn align_cmd(
    a: &AlignArgs,
    full: bool,
    cfg: &mut RunConfig,
    out: &mut Outputs,
) -> CliResult<serde_json::Value> {
    if let Some(k) = a.k {
        cfg.align.k = k;
    }
    if let Some(rt) = a.rt {
        cfg.align.r_t = rt;
    }
    cfg.align
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let model = if full {
        require_file(a.model.as_deref(), "calibration model", "--model")?;
        Some(RdcModel::load(a.model.as_deref().expect("checked"))?)
    } else {
        None
    };
    let real = images(&a.real)?;
    let aligner = Aligner::new(&real, &images(&a.fake)?, cfg.align)?;
    let inputs = load(a.input.as_deref().unwrap_or(&a.fake), Label::Fake)?;
    let mut csv = String::from("file,a_real,b_real,a_fake,b_fake,clamp_fraction,psnr\n");
    let mut aligned = Vec::with_capacity(inputs.len());
    let mut psnr_sum = 0.0;
    for l in &inputs {
        let s = aligner.smr_detailed(&l.image)?;
        let img = match &model {
            Some(m) => m.infer(&s.image)?,
            None => s.image,
        };
        let p = psnr(&l.image, &img)?;
        psnr_sum += p;
        let name = stem(&l.path);
        csv.push_str(&format!(
            "{name},{},{},{},{},{},{p}\n",
            s.fit_real.a, s.fit_real.b, s.fit_fake.a, s.fit_fake.b, s.clamp_fraction
        ));
        out.save_image(&format!("aligned/{name}.png"), &img)?;
        aligned.push(img);
    }
    let originals: Vec<Image> = inputs.iter().map(|l| l.image.clone()).collect();
    let before = rspd(&real, &originals)?;
    let after = rspd(&real, &aligned)?;
    let mean_psnr = psnr_sum / inputs.len() as f64;
    out.write(if full { "align.csv" } else { "smr.csv" }, csv)?;
    let report = MetricsReport {
        psnr: Some(mean_psnr),
        rspd: Some(after),
        ..MetricsReport::default()
    };
    out.write_with("metrics.csv", |w| report.write_csv(w))?;
    out.write("metrics.json", report.to_json()? + "\n")?;
    println!(
        "aligned {} images: RSPD {before:.4} -> {after:.4}, mean PSNR {mean_psnr:.2} dB",
        inputs.len()
    );
    Ok(
        json!({ "count": inputs.len(), "rspd_before": before, "rspd_after": after, "mean_psnr": mean_psnr }),
    )
}

fn train_rdc_cmd(
    a: &TrainRdcArgs,
    cfg: &mut RunConfig,
    out: &mut Outputs,
) -> CliResult<serde_json::Value> {
    if let Some(e) = a.epochs {
        cfg.rdc.epochs = e;
    }
    if let Some(l) = a.lambda {
        cfg.rdc.lambda = l;
    }
    if let Some(rt) = a.rt {
        cfg.rdc.r_t = rt;
    }
    if let Some(b) = a.batch_size {
        cfg.rdc.batch_size = b;
    }
    cfg.rdc
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let reals = images(&a.real)?;
    eprintln!(
        "training on {} real images for {} epochs",
        reals.len(),
        cfg.rdc.epochs
    );
    let trained = train_rdc(&reals, &cfg.rdc)?;
    let mp = out.path("rdc.fqal")?;
    trained.model.save(&mp)?;
    out.register(mp);
    out.write_with("loss_curve.csv", |w| write_loss_curve(&trained.curve, w))?;
    let last = trained.curve.last().map(|r| r.loss);
    if let Some(l) = last {
        println!("final epoch loss {l}");
    }
    Ok(json!({ "images": reals.len(), "epochs": cfg.rdc.epochs, "final_loss": last }))
}

fn describe(spec: &PerturbSpec) -> String {
    match *spec {
        PerturbSpec::Blur { kernel } => format!("kernel={kernel}"),
        PerturbSpec::Compress { quality } => format!("quality={quality}"),
        PerturbSpec::Noise { variance, seed } => format!("variance={variance};seed={seed}"),
        PerturbSpec::Fgsm { epsilon } => format!("epsilon={epsilon}"),
    }
}

fn perturb_cmd(
    a: &PerturbArgs,
    cfg: &RunConfig,
    out: &mut Outputs,
) -> CliResult<serde_json::Value> {
    let kind = parse::<PerturbKind>(&a.kind)?;
    let label = parse::<Label>(&a.label)?;
    let detector = if kind == PerturbKind::Fgsm {
        require_file(a.detector.as_deref(), "detector", "--detector")?;
        Some(Detector::load(a.detector.as_deref().expect("checked"))?)
    } else {
        None
    };
    let inputs = load(&a.input, label)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut csv = String::from("file,kind,parameters\n");
    for l in &inputs {
        let spec = match kind {
            PerturbKind::Blur => a.kernel.map(|kernel| PerturbSpec::Blur { kernel }),
            PerturbKind::Compress => a.quality.map(|quality| PerturbSpec::Compress { quality }),
            PerturbKind::Noise => a.variance.map(|variance| PerturbSpec::Noise {
                variance,
                seed: rng.random(),
            }),
            PerturbKind::Fgsm => a.epsilon.map(|epsilon| PerturbSpec::Fgsm { epsilon }),
        }
        .unwrap_or_else(|| PerturbSpec::sample(kind, &mut rng));
        spec.validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let img = spec.apply(&l.image, detector.as_ref().map(|d| (d, label)))?;
        let name = stem(&l.path);
        csv.push_str(&format!("{name},{kind},{}\n", describe(&spec)));
        out.save_image(&format!("perturbed/{name}.png"), &img)?;
    }
    out.write("perturb.csv", csv)?;
    println!("perturbed {} images with {kind}", inputs.len());
    Ok(json!({ "count": inputs.len(), "kind": kind.name() }))
}

fn labeled(real: &Path, fake: &Path) -> CliResult<Vec<LabeledImage>> {
    let mut set: Vec<LabeledImage> = Vec::new();
    for (path, label) in [(real, Label::Real), (fake, Label::Fake)] {
        set.extend(
            load(path, label)?
                .into_iter()
                .map(|l| LabeledImage::new(l.image, l.label, l.family)),
        );
    }
    Ok(set)
}

fn save_detector(det: &Detector, out: &mut Outputs) -> CliResult<()> {
    let p = out.path("detector.fqal")?;
    det.save(&p)?;
    out.register(p);
    Ok(())
}

fn train_detector_cmd(
    a: &TrainDetectorArgs,
    cfg: &mut RunConfig,
    out: &mut Outputs,
) -> CliResult<serde_json::Value> {
    let kind = parse::<DetectorKind>(&a.kind)?;
    if let Some(e) = a.epochs {
        cfg.detector.epochs = e;
    }
    if a.r0.is_some() {
        cfg.detector.low_pass = a.r0;
    }
    cfg.defense = DefenseProtocol::default();
    let train = labeled(&a.real, &a.fake)?;
    let det = train_detector(kind, &train, &cfg.defense, &cfg.detector, None)?;
    save_detector(&det, out)?;
    let e = evaluate(&det, &train, None)?;
    println!("training fake Acc {:?}, real Acc {:?}", e.acc, e.real_acc);
    Ok(json!({ "kind": kind.to_string(), "train": e }))
}

fn eval_cmd(a: &EvalArgs, cfg: &mut RunConfig, out: &mut Outputs) -> CliResult<serde_json::Value> {
    if !a.detector.is_file() {
        return Err(CliError::not_found("detector", &a.detector));
    }
    let det = Detector::load(&a.detector)?;
    let pipeline = if det.preprocess == Preprocess::Align {
        if let Some(k) = a.k {
            cfg.align.k = k;
        }
        if let Some(rt) = a.rt {
            cfg.align.r_t = rt;
        }
        require_file(a.model.as_deref(), "calibration model", "--model")?;
        let real = a
            .align_real
            .as_deref()
            .ok_or_else(|| CliError::missing("alignment real corpus", "--align-real"))?;
        let fake = a
            .align_fake
            .as_deref()
            .ok_or_else(|| CliError::missing("alignment fake corpus", "--align-fake"))?;
        let model = RdcModel::load(a.model.as_deref().expect("checked"))?;
        Some(AlignPipeline::new(aligner_from(real, fake, cfg)?, model))
    } else {
        None
    };
    let mut test: Vec<LabeledImage> = Vec::new();
    if let Some(r) = &a.real {
        test.extend(
            load(r, Label::Real)?
                .into_iter()
                .map(|l| LabeledImage::new(l.image, Label::Real, l.family)),
        );
    }
    test.extend(
        load(&a.fake, Label::Fake)?
            .into_iter()
            .map(|l| LabeledImage::new(l.image, Label::Fake, l.family)),
    );
    let e = evaluate(
        &det,
        &test,
        pipeline.as_ref().map(|p| p as &dyn Preprocessor),
    )?;
    let report = MetricsReport {
        acc: e.acc,
        er: e.er,
        ..MetricsReport::default()
    };
    out.write_with("metrics.csv", |w| report.write_csv(w))?;
    out.write("metrics.json", report.to_json()? + "\n")?;
    out.write_json("evaluation.json", &e)?;
    println!(
        "fake Acc {:?} ER {:?} real Acc {:?}",
        e.acc, e.er, e.real_acc
    );
    Ok(serde_json::to_value(e)?)
}

fn defend_cmd(
    a: &DefendArgs,
    cfg: &mut RunConfig,
    out: &mut Outputs,
) -> CliResult<serde_json::Value> {
    if let Some(p) = &a.protocol {
        cfg.defense.variant = parse::<Defense>(p)?;
    }
    if let Some(e) = a.epochs {
        cfg.detector.epochs = e;
    }
    if let Some(k) = a.k {
        cfg.align.k = k;
    }
    if let Some(rt) = a.rt {
        cfg.align.r_t = rt;
    }
    let variant = cfg.defense.variant;
    let model = if variant.needs_alignment() {
        require_file(a.model.as_deref(), "calibration model", "--model")?;
        Some(RdcModel::load(a.model.as_deref().expect("checked"))?)
    } else {
        None
    };
    let train = labeled(&a.real, &a.fake)?;
    let pipeline = match model {
        Some(m) => Some(AlignPipeline::new(aligner_from(&a.real, &a.fake, cfg)?, m)),
        None => None,
    };
    let pre = pipeline.as_ref().map(|p| p as &dyn Preprocessor);
    let det = train_detector(
        DetectorKind::PixelCnn,
        &train,
        &cfg.defense,
        &cfg.detector,
        pre,
    )?;
    save_detector(&det, out)?;
    let e = evaluate(&det, &train, pre)?;
    println!(
        "{variant} detector: training fake Acc {:?}, real Acc {:?}",
        e.acc, e.real_acc
    );
    Ok(json!({ "protocol": variant.name(), "train": e }))
}

fn experiment_cmd(
    a: &ExperimentArgs,
    bands: bool,
    cfg: &mut RunConfig,
    out: &mut Outputs,
) -> CliResult<serde_json::Value> {
    let x = &mut cfg.experiment;
    if let Some(e) = a.epochs {
        x.detector.epochs = e;
    }
    if !a.r0.is_empty() {
        x.bands = std::iter::once(None)
            .chain(a.r0.iter().map(|&r| Some(r)))
            .collect();
    }
    if let Some(n) = a.train_per_class {
        x.train_per_class = n;
    }
    if let Some(n) = a.test_per_class {
        x.test_per_class = n;
    }
    if let Some(s) = a.size {
        x.size = s;
    }
    let report = if bands {
        experiment_bias_bands(x)?
    } else {
        experiment_bias_epochs(x)?
    };
    out.write_with("report.csv", |w| report.write_csv(w))?;
    out.write("report.json", report.to_json()? + "\n")?;
    for r in &report.rows {
        println!(
            "{} {} {}: Acc {:.1}",
            r.condition, r.r0_or_epoch, r.test_family, r.acc
        );
    }
    Ok(
        json!({ "experiment": report.experiment, "rows": report.rows.len(), "real_acc": report.real_acc }),
    )
}
