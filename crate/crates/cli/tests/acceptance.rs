//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers to run a subset:
//! `cargo test --release --test acceptance -- 5 9`.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ridnet_cli::commands::{gradcheck_reports, held_out_pairs, run_ablation, score};
use ridnet_core::checkpoint::{decode, encode};
use ridnet_core::data::SigmaSpec;
use ridnet_core::layers::Session;
use ridnet_core::metrics::{psnr, ssim};
use ridnet_core::scenes::scene;
use ridnet_core::train::parse_loss_log;
use ridnet_core::{
    train, Ablation, Checkpoint, Graph, ImageBuffer, NetworkConfig, RidNet, RunConfig, Tensor,
    TrainConfig, TrainEvent,
};

type Outcome = Result<String, String>;

/// User + system CPU time of this process and of its waited-for children.
fn cpu_time() -> Duration {
    let usage = |who| {
        // SAFETY: getrusage only writes into the zeroed struct we pass.
        let mut ru: libc::rusage = unsafe { std::mem::zeroed() };
        unsafe { libc::getrusage(who, &mut ru) };
        let tv = |t: libc::timeval| Duration::new(t.tv_sec as u64, t.tv_usec as u32 * 1000);
        tv(ru.ru_utime) + tv(ru.ru_stime)
    };
    usage(libc::RUSAGE_SELF) + usage(libc::RUSAGE_CHILDREN)
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ridnet"));
    c.env("RIDNET_THREADS", "1");
    c
}

fn ridnet(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = bin()
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "ridnet {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn tempdir() -> Result<tempfile::TempDir, String> {
    tempfile::tempdir().map_err(|e| e.to_string())
}

fn c1_gradcheck() -> Outcome {
    let reports = gradcheck_reports(0, 10).map_err(|e| e.to_string())?;
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .ok_or("no reports")?;
    let failing: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    let has_net = reports.iter().any(|r| r.name.starts_with("network"));
    check(
        failing.is_empty() && has_net,
        format!(
            "{} checks over 10 seeds, worst {} at {:.2e}, failing {:?}",
            reports.len(),
            worst.name,
            worst.max_rel_error,
            failing
        ),
    )
}

fn naive_conv(x: &[f64], s: [usize; 4], w: &[f64], o: usize, k: usize, d: usize) -> Vec<f64> {
    let [n, c, h, wd] = s;
    let pad = (d * (k - 1) / 2) as isize;
    let mut out = vec![0.0; n * o * h * wd];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + (ky * d) as isize - pad;
                                let ix = xx as isize + (kx * d) as isize - pad;
                                if iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize {
                                    acc += w[((oc * c + ic) * k + ky) * k + kx]
                                        * x[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out[((b * o + oc) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

fn c2_conv_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s = [
            rng.random_range(1..=2),
            rng.random_range(1..=5),
            rng.random_range(1..=12),
            rng.random_range(1..=12),
        ];
        let (o, k, d) = (
            rng.random_range(1..=5),
            [1, 3, 5][rng.random_range(0..3)],
            rng.random_range(1..=4),
        );
        let x = Tensor::<f32>::from_fn(&s, |_| rng.random_range(-1.0..1.0));
        let w = Tensor::<f32>::from_fn(&[o, s[1], k, k], |_| rng.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, d).map_err(|e| e.to_string())?;
        let f = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let want = naive_conv(&f(&x), s, &f(&w), o, k, d);
        for (a, e) in g.value(y).data().iter().zip(&want) {
            worst = worst.max((*a as f64 - e).abs() / e.abs().max(1.0));
        }
    }
    check(
        worst < 1e-5,
        format!("100 cases, worst relative error {worst:.2e}"),
    )
}

fn c3_zero_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cases = 0;
    for a in Ablation::TABLE {
        for ch in [1, 3] {
            let cfg = NetworkConfig {
                in_channels: ch,
                ablation: a,
                ..NetworkConfig::default()
            };
            let net = RidNet::<f32>::zeros(cfg).map_err(|e| e.to_string())?;
            let x = Tensor::<f32>::from_fn(&[1, ch, 23, 17], |_| rng.random_range(0.0..1.0));
            let y = net.denoise(&x).map_err(|e| e.to_string())?;
            if y.data() != x.data() {
                return Err(format!("{a} with {ch} channels is not the identity"));
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} ablation/channel cases bit-exact"))
}

fn c4_attention() -> Outcome {
    let defaults = RidNet::<f32>::zeros(NetworkConfig::default()).map_err(|e| e.to_string())?;
    let widths: Vec<usize> = defaults
        .eams
        .iter()
        .filter_map(|e| e.attention.as_ref().map(|a| a.bottleneck()))
        .collect();

    let cfg = NetworkConfig::small(2, 16);
    let on = RidNet::<f32>::init(cfg.clone(), 4).map_err(|e| e.to_string())?;
    let mut off = RidNet::<f32>::zeros(NetworkConfig {
        ablation: Ablation::flags(true, true, true, false),
        ..cfg
    })
    .map_err(|e| e.to_string())?;
    for (i, name) in off.params().names().to_vec().iter().enumerate() {
        let id = on.params().position(name).ok_or("missing parameter")?;
        off.params_mut().values_mut()[i] = on.params().get(id).clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::<f32>::from_fn(&[2, 1, 20, 20], |_| rng.random_range(0.0..1.0));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let clamped = {
        let mut s = Session::new(&mut g, on.params(), false).with_unit_gates(true);
        let y = on.forward_in(&mut s, xv).map_err(|e| e.to_string())?;
        (y, s.gates().to_vec())
    };
    let gates_ok = clamped
        .1
        .iter()
        .all(|&gv| g.value(gv).data().iter().all(|&v| v > 0.0 && v < 1.0));
    let reference = off.denoise(&x).map_err(|e| e.to_string())?;
    let diff = g
        .value(clamped.0)
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    check(
        gates_ok && diff <= 1e-6 && widths == [4, 4, 4, 4],
        format!(
            "{} gate tensors in (0,1): {gates_ok}; unit-gate vs fa-off max diff {diff:.1e}; bottleneck widths {widths:?}",
            clamped.1.len()
        ),
    )
}

fn last_mean(csv: &str) -> Result<f64, String> {
    csv.lines()
        .last()
        .and_then(|l| l.split(',').nth(1))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format!("no mean row in {csv:?}"))
}

fn c5_awgn_baseline() -> Outcome {
    let dir = tempdir()?;
    let d = dir.path();
    ridnet(
        &[
            "scenes", "--out", "clean", "--count", "10", "--size", "256", "--seed", "5",
        ],
        d,
    )?;
    ridnet(
        &[
            "synth", "--in", "clean", "--out", "noisy", "--sigma", "25", "--seed", "5",
        ],
        d,
    )?;
    let csv = ridnet(&["eval", "--clean", "clean", "--noisy", "noisy"], d)?;
    let mean = last_mean(&csv)?;
    let want = 20.0 * (255.0f64 / 25.0).log10();
    check(
        (mean - want).abs() <= 0.1,
        format!("10 images 256x256: mean PSNR {mean:.4} dB, analytic {want:.4} dB"),
    )
}

const SMOKE_CFG: &str =
    "num_eams = 2\nchannels = 8\nreduction = 4\nbatch = 8\npatch = 80\nlr = 1e-3\nsigma = 25\n\
max_iters = 500\ncheckpoint_every = 500\nseed = 6\n";

fn c6_overfit() -> Outcome {
    let dir = tempdir()?;
    let d = dir.path();
    std::fs::create_dir(d.join("one")).map_err(|e| e.to_string())?;
    let img = scene(11, 1, 160, 160).map_err(|e| e.to_string())?;
    ridnet_core::image::write_image(d.join("one/img.pgm"), &img).map_err(|e| e.to_string())?;
    std::fs::write(d.join("smoke.cfg"), SMOKE_CFG).map_err(|e| e.to_string())?;
    let stdout = ridnet(
        &[
            "train",
            "--config",
            "smoke.cfg",
            "--corpus",
            "one",
            "--out",
            "smoke.ckpt",
        ],
        d,
    )?;
    let log = std::fs::read_to_string(d.join("smoke.ckpt.loss.csv")).map_err(|e| e.to_string())?;
    let records = parse_loss_log(&log).map_err(|e| e.to_string())?;
    if records.len() != 500 {
        return Err(format!("{} loss records", records.len()));
    }
    let initial = records[0].loss;
    let final_loss = records[480..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
    let mean = |s: &[ridnet_core::train::LossRecord]| {
        s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64
    };
    let trending = mean(&records[450..]) < mean(&records[..50]);
    check(
        final_loss <= 0.1 * initial && trending && stdout.contains("channels = 8"),
        format!(
            "initial {initial:.4}, final (last 20 mean) {final_loss:.4}, ratio {:.3}",
            final_loss / initial
        ),
    )
}

fn toy_corpus() -> Result<(Vec<ImageBuffer>, Vec<(String, ImageBuffer)>), String> {
    let corpus = (0..20)
        .map(|i| scene(100 + i, 1, 128, 128))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let held = (0..4)
        .map(|i| Ok((format!("held_{i}"), scene(900 + i, 1, 128, 128)?)))
        .collect::<ridnet_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    Ok((corpus, held))
}

fn c7_toy_gain() -> Outcome {
    let (corpus, held) = toy_corpus()?;
    let pairs = held_out_pairs(&held, 25.0, 7).map_err(|e| e.to_string())?;
    let baseline = score(None, &pairs, false)
        .map_err(|e| e.to_string())?
        .mean_psnr();
    let cfg = TrainConfig {
        lr0: 1e-3,
        batch: 8,
        patch: 48,
        sigma: SigmaSpec::Fixed(25.0),
        max_iters: 5000,
        checkpoint_every: 5000,
        seed: 7,
        ..TrainConfig::default()
    };
    let net = RidNet::init(
        NetworkConfig::small(2, 16),
        ridnet_core::data::derive_seed(7, 4, 0),
    )
    .map_err(|e| e.to_string())?;
    let mut state = Checkpoint::new(net);
    train(&mut state, &corpus, &cfg, |_: TrainEvent| Ok(())).map_err(|e| e.to_string())?;
    let denoised = score(Some(&state.net), &pairs, false)
        .map_err(|e| e.to_string())?
        .mean_psnr();
    check(
        denoised - baseline >= 3.0,
        format!(
            "noisy {baseline:.3} dB -> denoised {denoised:.3} dB (gain {:+.3} dB)",
            denoised - baseline
        ),
    )
}

fn c8_ablation_direction() -> Outcome {
    let (corpus, held) = toy_corpus()?;
    let base = RunConfig::parse(
        "num_eams = 2\nchannels = 16\nreduction = 16\nbatch = 4\npatch = 32\nlr = 1e-3\nsigma = 25\nmax_iters = 5000\n",
    )
    .map_err(|e| e.to_string())?;
    let no_lsc = Ablation::flags(false, true, true, true);
    let rows = run_ablation(
        &base,
        &[Ablation::ALL, no_lsc, Ablation::NONE],
        &[1, 2, 3],
        &corpus,
        &held,
        |m| eprintln!("    {m}"),
    )
    .map_err(|e| e.to_string())?;
    let (all, nolsc, none) = (
        rows[0].mean_psnr(),
        rows[1].mean_psnr(),
        rows[2].mean_psnr(),
    );
    check(
        all >= none && nolsc - all <= 0.05,
        format!("3-seed mean PSNR: all {all:.3}, no-lsc {nolsc:.3}, none {none:.3} dB"),
    )
}

fn psnr_loop(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for c in 0..a.channels() {
        for y in 0..a.height() {
            for x in 0..a.width() {
                s += (a.get(c, y, x) as f64 - b.get(c, y, x) as f64).powi(2);
                n += 1.0;
            }
        }
    }
    10.0 * (n / s).log10()
}

fn ssim_direct(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let mut w = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let r2 = ((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5);
            *v = (-r2).exp();
            total += *v;
        }
    }
    let mut sum = 0.0;
    for c in 0..a.channels() {
        let mut acc = 0.0;
        let mut count = 0.0;
        for y0 in 0..=a.height() - 11 {
            for x0 in 0..=a.width() - 11 {
                let mut m = [0.0f64; 5];
                for (i, row) in w.iter().enumerate() {
                    for (j, wv) in row.iter().enumerate() {
                        let wv = wv / total;
                        let p = a.get(c, y0 + i, x0 + j) as f64;
                        let q = b.get(c, y0 + i, x0 + j) as f64;
                        m[0] += wv * p;
                        m[1] += wv * q;
                        m[2] += wv * p * p;
                        m[3] += wv * q * q;
                        m[4] += wv * p * q;
                    }
                }
                let (vx, vy, cv) = (m[2] - m[0] * m[0], m[3] - m[1] * m[1], m[4] - m[0] * m[1]);
                acc += (2.0 * m[0] * m[1] + 1e-4) * (2.0 * cv + 9e-4)
                    / ((m[0] * m[0] + m[1] * m[1] + 1e-4) * (vx + vy + 9e-4));
                count += 1.0;
            }
        }
        sum += acc / count;
    }
    sum / a.channels() as f64
}

fn c9_metrics() -> Outcome {
    let (mut dp, mut ds) = (0.0f64, 0.0f64);
    let mut self_ssim = true;
    for (i, ch) in [(0u64, 1usize), (1, 3), (2, 1)] {
        let clean = scene(40 + i, ch, 48, 40).map_err(|e| e.to_string())?;
        let noisy = ridnet_core::data::add_awgn(
            &clean,
            &ridnet_core::data::NoiseSpec {
                sigma: 20.0,
                seed: i,
            },
        )
        .map_err(|e| e.to_string())?
        .clipped();
        dp = dp.max(
            (psnr(&clean, &noisy).map_err(|e| e.to_string())? - psnr_loop(&clean, &noisy)).abs(),
        );
        ds = ds.max(
            (ssim(&clean, &noisy).map_err(|e| e.to_string())? - ssim_direct(&clean, &noisy)).abs(),
        );
        self_ssim &= ssim(&clean, &clean).map_err(|e| e.to_string())? == 1.0;
    }
    check(
        dp < 1e-6 && ds < 1e-6 && self_ssim,
        format!("PSNR diff {dp:.1e} dB, SSIM diff {ds:.1e}, ssim(x,x) == 1: {self_ssim}"),
    )
}

fn rerun(manifest: &str, d: &Path, tag: &str) -> Result<(), String> {
    let out = ridnet(
        &[
            "rerun",
            "--manifest",
            manifest,
            "--out-dir",
            &format!("re_{tag}"),
        ],
        d,
    )?;
    if out.contains("DIFFERENT") || !out.contains("identical") {
        return Err(format!("{tag}: {out}"));
    }
    Ok(())
}

fn c10_reproducibility() -> Outcome {
    let dir = tempdir()?;
    let d = dir.path();
    ridnet(
        &[
            "scenes", "--out", "clean", "--count", "3", "--size", "40", "--seed", "10",
        ],
        d,
    )?;
    ridnet(
        &[
            "synth", "--in", "clean", "--out", "noisy", "--sigma", "25", "--seed", "10",
        ],
        d,
    )?;
    std::fs::write(
        d.join("t.cfg"),
        "num_eams = 1\nchannels = 8\nreduction = 4\nbatch = 2\npatch = 24\nmax_iters = 6\ncheckpoint_every = 3\nlr = 1e-3\nseed = 10\n",
    )
    .map_err(|e| e.to_string())?;
    ridnet(
        &[
            "train", "--config", "t.cfg", "--corpus", "clean", "--out", "t.ckpt",
        ],
        d,
    )?;
    ridnet(
        &[
            "denoise",
            "--ckpt",
            "t.ckpt",
            "--in",
            "noisy/scene_000.pgm",
            "--out",
            "den.pgm",
        ],
        d,
    )?;
    ridnet(
        &[
            "eval", "--ckpt", "t.ckpt", "--clean", "clean", "--noisy", "noisy", "--report",
            "ev.csv",
        ],
        d,
    )?;
    ridnet(&["gradcheck", "--seeds", "1", "--report", "gc.csv"], d)?;
    ridnet(
        &[
            "ablate",
            "--config",
            "t.cfg",
            "--corpus",
            "clean",
            "--held-out",
            "noisy",
            "--configs",
            "all,none",
            "--seeds",
            "1",
            "--budget",
            "3",
            "--out",
            "abl.csv",
        ],
        d,
    )?;
    let manifests = [
        ("clean/manifest.json", "scenes"),
        ("noisy/manifest.json", "synth"),
        ("t.ckpt.manifest.json", "train"),
        ("den.pgm.manifest.json", "denoise"),
        ("ev.csv.manifest.json", "eval"),
        ("gc.csv.manifest.json", "gradcheck"),
        ("abl.csv.manifest.json", "ablate"),
    ];
    for (m, tag) in manifests {
        rerun(m, d, tag)?;
    }

    let bytes = std::fs::read(d.join("t.ckpt")).map_err(|e| e.to_string())?;
    let ckpt = decode(&bytes).map_err(|e| e.to_string())?;
    let round = encode(&ckpt) == bytes;
    let mut corrupt = bytes.clone();
    corrupt[bytes.len() / 2] ^= 1;
    let caught = decode(&corrupt).is_err();
    check(
        round && caught,
        format!(
            "{} commands rerun bit-identically; checkpoint round trip exact: {round}; corruption rejected: {caught}",
            manifests.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            id: 1,
            name: "gradient correctness",
            limit: Some(Duration::from_secs(120)),
            run: c1_gradcheck,
        },
        Criterion {
            id: 2,
            name: "convolution oracle",
            limit: Some(Duration::from_secs(60)),
            run: c2_conv_oracle,
        },
        Criterion {
            id: 3,
            name: "zero-init identity",
            limit: None,
            run: c3_zero_identity,
        },
        Criterion {
            id: 4,
            name: "attention contract",
            limit: None,
            run: c4_attention,
        },
        Criterion {
            id: 5,
            name: "AWGN baseline",
            limit: None,
            run: c5_awgn_baseline,
        },
        Criterion {
            id: 6,
            name: "overfit smoke",
            limit: Some(Duration::from_secs(300)),
            run: c6_overfit,
        },
        Criterion {
            id: 7,
            name: "toy denoising gain",
            limit: Some(Duration::from_secs(3600)),
            run: c7_toy_gain,
        },
        Criterion {
            id: 8,
            name: "ablation direction",
            limit: None,
            run: c8_ablation_direction,
        },
        Criterion {
            id: 9,
            name: "metric fidelity",
            limit: None,
            run: c9_metrics,
        },
        Criterion {
            id: 10,
            name: "reproducibility",
            limit: None,
            run: c10_reproducibility,
        },
    ];
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for c in criteria
        .iter()
        .filter(|c| selected.is_empty() || selected.contains(&c.id))
    {
        let (start, cpu_start) = (Instant::now(), cpu_time());
        let outcome = (c.run)();
        let (took, cpu) = (start.elapsed(), cpu_time() - cpu_start);
        let outcome = match (outcome, c.limit) {
            (Ok(d), Some(limit)) if cpu > limit => {
                Err(format!("{d}; over the {}s CPU limit", limit.as_secs()))
            }
            (o, _) => o,
        };
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{status} {:>2} {:<22} {detail} [cpu {:.1}s, wall {:.1}s]",
            c.id,
            c.name,
            cpu.as_secs_f64(),
            took.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
