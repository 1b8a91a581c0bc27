//! Verb implementations. Each returns what its manifest needs to record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ridnet_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use ridnet_core::data::{add_awgn, derive_seed, list_images, NoiseSpec};
use ridnet_core::gradcheck::{network_check, op_suite, GradCheckReport};
use ridnet_core::image::{read_image, write_image, ImageBuffer};
use ridnet_core::metrics::{psnr, ssim, MetricReport};
use ridnet_core::model::{Ablation, NetworkConfig, RidNet};
use ridnet_core::train::{train, LossLog, TrainEvent};
use ridnet_core::{scenes, RunConfig};

use crate::error::{CliError, CliResult, EXIT_IO};
use crate::manifest::io_error;

const SYNTH_STREAM: u64 = 2;
const HELD_OUT_STREAM: u64 = 3;
const INIT_STREAM: u64 = 4;

/// Files a command read and wrote, plus where its manifest goes.
#[derive(Debug, Default)]
pub struct RunRecord {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub output_flags: Vec<&'static str>,
    pub config: Option<String>,
    pub manifest: Option<PathBuf>,
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => ensure_dir(dir),
        _ => Ok(()),
    }
}

fn refuse_overwrite(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(CliError::new(
            EXIT_IO,
            format!("{} exists; pass --force to overwrite", path.display()),
        ));
    }
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Writes `ckpt` through a temporary file so an interrupted save never
/// leaves a truncated checkpoint behind.
fn save_atomic(path: &Path, ckpt: &Checkpoint) -> ridnet_core::Result<()> {
    let tmp = sidecar(path, ".tmp");
    save_checkpoint(&tmp, ckpt)?;
    std::fs::rename(&tmp, path).map_err(|e| ridnet_core::Error::io(path, e))
}

pub fn scenes_cmd(
    out: &Path,
    count: usize,
    size: usize,
    channels: usize,
    seed: u64,
    force: bool,
) -> CliResult<RunRecord> {
    ensure_dir(out)?;
    let ext = if channels == 3 { "ppm" } else { "pgm" };
    let mut outputs = Vec::new();
    for i in 0..count {
        let path = out.join(format!("scene_{i:03}.{ext}"));
        refuse_overwrite(&path, force)?;
        let img = scenes::scene(derive_seed(seed, 0, i as u64), channels, size, size)?;
        write_image(&path, &img)?;
        outputs.push(path);
    }
    Ok(RunRecord {
        outputs,
        output_flags: vec!["--out"],
        manifest: Some(out.join("manifest.json")),
        ..Default::default()
    })
}

/// Noisy copy of every corpus image under the same file name.
pub fn synth(input: &Path, out: &Path, sigma: f64, seed: u64, force: bool) -> CliResult<RunRecord> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(CliError::usage(format!(
            "sigma must be non-negative, got {sigma}"
        )));
    }
    let files = list_images(input)?;
    if files.is_empty() {
        return Err(CliError::data(format!(
            "no .pgm/.ppm images in {}",
            input.display()
        )));
    }
    ensure_dir(out)?;
    let mut outputs = Vec::new();
    for (i, path) in files.iter().enumerate() {
        let clean = read_image(path)?;
        let spec = NoiseSpec {
            sigma,
            seed: derive_seed(seed, SYNTH_STREAM, i as u64),
        };
        let target = out.join(file_name(path));
        refuse_overwrite(&target, force)?;
        write_image(&target, &add_awgn(&clean, &spec)?.clipped())?;
        outputs.push(target);
    }
    Ok(RunRecord {
        inputs: files,
        outputs,
        output_flags: vec!["--out"],
        manifest: Some(out.join("manifest.json")),
        ..Default::default()
    })
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub struct TrainArgs<'a> {
    pub config: &'a Path,
    pub corpus: &'a Path,
    pub out: &'a Path,
    pub resume: Option<&'a Path>,
    pub log_every: u64,
}

pub fn train_cmd(args: TrainArgs<'_>) -> CliResult<RunRecord> {
    let cfg = RunConfig::load(args.config)?;
    print!("{}", cfg.to_text());
    let corpus_files = list_images(args.corpus)?;
    let corpus: Vec<ImageBuffer> = corpus_files
        .iter()
        .map(read_image)
        .collect::<Result<_, _>>()?;

    let mut inputs = vec![args.config.to_path_buf()];
    inputs.extend(corpus_files);
    let mut state = match args.resume {
        Some(path) => {
            inputs.push(path.to_path_buf());
            let ckpt = load_checkpoint(path)?;
            if ckpt.net.config() != &cfg.network {
                return Err(CliError::usage(format!(
                    "{} was trained with a different network configuration",
                    path.display()
                )));
            }
            ckpt
        }
        None => Checkpoint::new(RidNet::init(
            cfg.network.clone(),
            derive_seed(cfg.train.seed, INIT_STREAM, 0),
        )?),
    };
    println!("parameters = {}", state.net.num_params());
    ensure_parent(args.out)?;

    let log_path = sidecar(args.out, ".loss.csv");
    let mut log = LossLog::open(&log_path, args.resume.is_some())?;
    let log_every = args.log_every.max(1);
    train(&mut state, &corpus, &cfg.train, |event| {
        match event {
            TrainEvent::Step(r) => {
                log.push(&r)?;
                if r.iter % log_every == 0 {
                    eprintln!("iter {:>7}  loss {:.6}  lr {:e}", r.iter, r.loss, r.lr);
                }
            }
            TrainEvent::Checkpoint(c) => {
                log.flush()?;
                save_atomic(args.out, c)?;
            }
        }
        Ok(())
    })?;
    log.flush()?;
    if !args.out.exists() {
        // Resumed at or past max_iters: nothing trained, still emit the state.
        save_atomic(args.out, &state)?;
    }
    Ok(RunRecord {
        inputs,
        outputs: vec![args.out.to_path_buf(), log_path],
        output_flags: vec!["--out"],
        config: Some(cfg.to_text()),
        manifest: Some(sidecar(args.out, ".manifest.json")),
    })
}

/// Clipped network output for one image.
pub fn denoise_image(net: &RidNet<f32>, img: &ImageBuffer) -> CliResult<ImageBuffer> {
    let out = net.denoise(&img.to_tensor())?;
    Ok(ImageBuffer::from_tensor_clipped(&out)?)
}

pub fn denoise_cmd(ckpt: &Path, input: &Path, out: &Path) -> CliResult<RunRecord> {
    let net = load_checkpoint(ckpt)?.net;
    let img = read_image(input)?;
    ensure_parent(out)?;
    write_image(out, &denoise_image(&net, &img)?)?;
    Ok(RunRecord {
        inputs: vec![ckpt.to_path_buf(), input.to_path_buf()],
        outputs: vec![out.to_path_buf()],
        output_flags: vec!["--out"],
        manifest: Some(sidecar(out, ".manifest.json")),
        ..Default::default()
    })
}

/// Pairs files of two directories by name; unpaired names are an error.
pub fn pair_dirs(clean: &Path, noisy: &Path) -> CliResult<Vec<(PathBuf, PathBuf)>> {
    let index = |dir: &Path| -> CliResult<BTreeMap<String, PathBuf>> {
        Ok(list_images(dir)?
            .into_iter()
            .map(|p| (file_name(&p), p))
            .collect())
    };
    let (c, n) = (index(clean)?, index(noisy)?);
    let mut unpaired: Vec<String> = c
        .keys()
        .filter(|k| !n.contains_key(*k))
        .map(|k| format!("{k} (only in {})", clean.display()))
        .collect();
    unpaired.extend(
        n.keys()
            .filter(|k| !c.contains_key(*k))
            .map(|k| format!("{k} (only in {})", noisy.display())),
    );
    if !unpaired.is_empty() {
        return Err(CliError::data(format!(
            "unpaired files: {}",
            unpaired.join(", ")
        )));
    }
    if c.is_empty() {
        return Err(CliError::data(format!("no images in {}", clean.display())));
    }
    Ok(c.into_iter().map(|(k, p)| (p, n[&k].clone())).collect())
}

/// Scores `net` (or the identity when `None`) on paired images.
pub fn score(
    net: Option<&RidNet<f32>>,
    pairs: &[(String, ImageBuffer, ImageBuffer)],
    quantize: bool,
) -> CliResult<MetricReport> {
    let mut report = MetricReport::default();
    for (name, clean, noisy) in pairs {
        let mut out = match net {
            Some(net) => denoise_image(net, noisy)?,
            None => noisy.clone(),
        };
        if quantize {
            out = out.quantized();
        }
        report.push(name.clone(), psnr(&out, clean)?, ssim(&out, clean)?);
    }
    Ok(report)
}

pub fn eval_cmd(
    ckpt: Option<&Path>,
    clean: &Path,
    noisy: &Path,
    report_path: Option<&Path>,
    quantize: bool,
) -> CliResult<RunRecord> {
    let pairs = pair_dirs(clean, noisy)?;
    let net = ckpt.map(load_checkpoint).transpose()?.map(|c| c.net);
    let mut loaded = Vec::with_capacity(pairs.len());
    let mut inputs: Vec<PathBuf> = ckpt.map(Path::to_path_buf).into_iter().collect();
    for (c, n) in &pairs {
        loaded.push((file_name(c), read_image(c)?, read_image(n)?));
        inputs.push(c.clone());
        inputs.push(n.clone());
    }
    let report = score(net.as_ref(), &loaded, quantize)?;
    let csv = report.to_csv();
    match report_path {
        Some(path) => {
            ensure_parent(path)?;
            std::fs::write(path, &csv).map_err(|e| io_error(path, e))?;
            println!(
                "mean PSNR {:.4} dB, mean SSIM {:.4} over {} images",
                report.mean_psnr(),
                report.mean_ssim(),
                report.images.len()
            );
            Ok(RunRecord {
                inputs,
                outputs: vec![path.to_path_buf()],
                output_flags: vec!["--report"],
                manifest: Some(sidecar(path, ".manifest.json")),
                ..Default::default()
            })
        }
        None => {
            print!("{csv}");
            Ok(RunRecord::default())
        }
    }
}

/// Per-op reports folded over `seeds` seeds starting at `seed`, then the
/// end-to-end network check.
pub fn gradcheck_reports(seed: u64, seeds: u64) -> CliResult<Vec<GradCheckReport>> {
    let mut merged: Vec<GradCheckReport> = Vec::new();
    let mut fold = |r: GradCheckReport| match merged.iter_mut().find(|m| m.name == r.name) {
        Some(m) => m.merge(&r),
        None => merged.push(r),
    };
    for s in seed..seed + seeds {
        for r in op_suite(s)? {
            fold(r);
        }
        for ablation in [Ablation::ALL, Ablation::NONE] {
            let cfg = NetworkConfig {
                ablation,
                ..NetworkConfig::small(2, 8)
            };
            fold(network_check(&cfg, s, 8, 4)?);
        }
    }
    Ok(merged)
}

pub fn gradcheck_cmd(seed: u64, seeds: u64, report_path: Option<&Path>) -> CliResult<RunRecord> {
    if seeds == 0 {
        return Err(CliError::usage("--seeds must be at least 1"));
    }
    let reports = gradcheck_reports(seed, seeds)?;
    let mut text = String::from("op,max_rel_error,checked,skipped,status\n");
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        text.push_str(&format!(
            "{},{:e},{},{},{status}\n",
            r.name, r.max_rel_error, r.checked, r.skipped
        ));
    }
    print!("{text}");
    let mut record = RunRecord::default();
    if let Some(path) = report_path {
        std::fs::write(path, &text).map_err(|e| io_error(path, e))?;
        record = RunRecord {
            outputs: vec![path.to_path_buf()],
            output_flags: vec!["--report"],
            manifest: Some(sidecar(path, ".manifest.json")),
            ..Default::default()
        };
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(CliError::numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )));
    }
    Ok(record)
}

/// Held-out pairs: clean images with fixed-seed, clipped AWGN.
pub fn held_out_pairs(
    images: &[(String, ImageBuffer)],
    sigma: f64,
    seed: u64,
) -> CliResult<Vec<(String, ImageBuffer, ImageBuffer)>> {
    images
        .iter()
        .enumerate()
        .map(|(i, (name, clean))| {
            let spec = NoiseSpec {
                sigma,
                seed: derive_seed(seed, HELD_OUT_STREAM, i as u64),
            };
            Ok((
                name.clone(),
                clean.clone(),
                add_awgn(clean, &spec)?.clipped(),
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub params: usize,
    pub psnr: Vec<f64>,
    pub final_loss: Vec<f64>,
}

impl AblationRow {
    pub fn mean_psnr(&self) -> f64 {
        self.psnr.iter().sum::<f64>() / self.psnr.len() as f64
    }
}

/// Mean ℓ1 loss over the last `window` iterations.
fn tail_mean(losses: &[f64], window: usize) -> f64 {
    let tail = &losses[losses.len().saturating_sub(window)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Trains `base` under each ablation and seed with the same budget and
/// scores held-out PSNR on noisy inputs at the base config's noise level.
pub fn run_ablation(
    base: &RunConfig,
    ablations: &[Ablation],
    seeds: &[u64],
    corpus: &[ImageBuffer],
    held_out: &[(String, ImageBuffer)],
    mut progress: impl FnMut(&str),
) -> CliResult<Vec<AblationRow>> {
    let sigma = match base.train.sigma {
        ridnet_core::data::SigmaSpec::Fixed(s) => s,
        ridnet_core::data::SigmaSpec::Range(lo, hi) => 0.5 * (lo + hi),
    };
    let pairs = held_out_pairs(held_out, sigma, base.train.seed)?;
    let mut rows = Vec::new();
    for &ablation in ablations {
        let network = NetworkConfig {
            ablation,
            ..base.network.clone()
        };
        let mut row = AblationRow {
            ablation,
            params: 0,
            psnr: vec![],
            final_loss: vec![],
        };
        for &seed in seeds {
            let train_cfg = ridnet_core::TrainConfig {
                seed,
                ..base.train.clone()
            };
            let net = RidNet::init(network.clone(), derive_seed(seed, INIT_STREAM, 0))?;
            row.params = net.num_params();
            let mut state = Checkpoint::new(net);
            let mut losses = Vec::new();
            train(&mut state, corpus, &train_cfg, |e| {
                if let TrainEvent::Step(r) = e {
                    losses.push(r.loss);
                }
                Ok(())
            })?;
            let report = score(Some(&state.net), &pairs, false)?;
            row.psnr.push(report.mean_psnr());
            row.final_loss.push(tail_mean(&losses, 50));
            progress(&format!(
                "{ablation} seed {seed}: held-out PSNR {:.4} dB, final loss {:.6}",
                report.mean_psnr(),
                row.final_loss.last().unwrap()
            ));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn mark(on: bool) -> &'static str {
    if on {
        "x"
    } else {
        "-"
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s =
        String::from("config,lsc,ssc,lc,fa,params,mean_psnr,psnr_per_seed,mean_final_loss\n");
    for r in rows {
        let a = r.ablation;
        let per: Vec<String> = r.psnr.iter().map(|p| format!("{p:.6}")).collect();
        let loss = r.final_loss.iter().sum::<f64>() / r.final_loss.len() as f64;
        s.push_str(&format!(
            "{a},{},{},{},{},{},{:.6},{},{:.8}\n",
            a.lsc as u8,
            a.ssc as u8,
            a.lc as u8,
            a.fa as u8,
            r.params,
            r.mean_psnr(),
            per.join(";"),
            loss
        ));
    }
    s
}

/// Flags as rows and configurations as columns, PSNR in the last row.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let line = |label: &str, cells: Vec<String>| {
        format!(
            "{label:<5}{}\n",
            cells.iter().map(|c| format!("{c:>8}")).collect::<String>()
        )
    };
    let flag = |f: fn(&Ablation) -> bool| {
        rows.iter()
            .map(|r| mark(f(&r.ablation)).to_string())
            .collect()
    };
    s.push_str(&line("LSC", flag(|a| a.lsc)));
    s.push_str(&line("SSC", flag(|a| a.ssc)));
    s.push_str(&line("LC", flag(|a| a.lc)));
    s.push_str(&line("FA", flag(|a| a.fa)));
    s.push_str(&line(
        "PSNR",
        rows.iter()
            .map(|r| format!("{:.2}", r.mean_psnr()))
            .collect(),
    ));
    s
}

pub struct AblateArgs<'a> {
    pub config: Option<&'a Path>,
    pub corpus: &'a Path,
    pub held_out: &'a Path,
    pub configs: &'a [Ablation],
    pub seeds: &'a [u64],
    pub budget: Option<u64>,
    pub out: &'a Path,
}

pub fn ablate_cmd(args: AblateArgs<'_>) -> CliResult<RunRecord> {
    let mut base = match args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(b) = args.budget {
        base.train.max_iters = b;
    }
    base.validate().map_err(ridnet_core::Error::from)?;
    let corpus_files = list_images(args.corpus)?;
    let corpus: Vec<ImageBuffer> = corpus_files
        .iter()
        .map(read_image)
        .collect::<Result<_, _>>()?;
    let held_files = list_images(args.held_out)?;
    let held: Vec<(String, ImageBuffer)> = held_files
        .iter()
        .map(|p| Ok((file_name(p), read_image(p)?)))
        .collect::<CliResult<_>>()?;
    if held.is_empty() {
        return Err(CliError::data(format!(
            "no held-out images in {}",
            args.held_out.display()
        )));
    }
    let configs = if args.configs.is_empty() {
        &Ablation::TABLE[..]
    } else {
        args.configs
    };
    let rows = run_ablation(&base, configs, args.seeds, &corpus, &held, |m| {
        eprintln!("{m}")
    })?;
    print!("{}", ablation_table(&rows));
    ensure_parent(args.out)?;
    std::fs::write(args.out, ablation_csv(&rows)).map_err(|e| io_error(args.out, e))?;

    let mut inputs: Vec<PathBuf> = args.config.map(Path::to_path_buf).into_iter().collect();
    inputs.extend(corpus_files);
    inputs.extend(held_files);
    Ok(RunRecord {
        inputs,
        outputs: vec![args.out.to_path_buf()],
        output_flags: vec!["--out"],
        config: Some(base.to_text()),
        manifest: Some(sidecar(args.out, ".manifest.json")),
    })
}
