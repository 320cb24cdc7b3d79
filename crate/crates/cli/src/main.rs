//! `bpp`: train, run and inspect back-projection pipeline networks.
//!
//! Exit status is 0 on success, 1 on usage errors and 2 on runtime errors.
//! `BPP_THREADS` caps the worker pool; `BPP_THREADS=1` is the deterministic
//! reference mode.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bpp_core::analysis::{decompose, mse, psnr_from_mse, residual_heatmap, ssim, MetricMode};
use bpp_core::bpp::BppConfig;
use bpp_core::image_io::{ppm_read, ppm_write, write_atomic};
use bpp_core::resample::{bicubic_resize, degrade, ibp_run, DecimatingDownsampler, IbpProblem, ZeroInsertUpsampler};
use bpp_core::tile::{plan_tiles, reflect_pad, stitch, DEFAULT_STRIDE};
use bpp_core::train::{
    baseline, corpus_seed, crop_multiple, log_csv, make_pairs, synth_image, train, Checkpoint, DataSource, DatasetSpec,
};
use bpp_core::{Bpp32, Error, Tensor32};
use clap::{Parser, Subcommand};

use config::{read_json, Manifest, RunConfig, MANIFEST};

#[derive(Parser, Debug)]
#[command(
    name = "bpp",
    version,
    about = "Back-projection pipeline networks for image restoration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic ground-truth corpus (PPM files plus manifest.json).
    MakeDataset {
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Number of images.
        #[arg(long, default_value_t = 128)]
        count: usize,
        /// Side length of each square image in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Comma-separated degradation factors from {2,3,4,8}.
        #[arg(long, value_delimiter = ',', default_value = "2")]
        factors: Vec<usize>,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a network on a dataset directory.
    Train {
        /// JSON run configuration; omitted keys take their defaults.
        #[arg(long)]
        config: PathBuf,
        /// Directory of ground-truth PPM images (with optional manifest.json).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path (also receives intermediate checkpoints).
        #[arg(long)]
        out: PathBuf,
        /// Validation log, CSV `step,mse,psnr`.
        #[arg(long)]
        log: PathBuf,
    },
    /// Restore an image with a trained network.
    Infer {
        /// Checkpoint to load.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input PPM.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output PPM.
        #[arg(long)]
        out: PathBuf,
        /// Bicubic upscaling factor applied before the network [default: none].
        #[arg(long)]
        factor: Option<usize>,
        /// Tile size for patch-wise inference [default: whole image].
        #[arg(long)]
        patch: Option<usize>,
        /// Tile stride, used with --patch.
        #[arg(long, default_value_t = DEFAULT_STRIDE)]
        stride: usize,
    },
    /// Classical iterative back-projection upscaling.
    Ibp {
        /// Low-resolution input PPM.
        #[arg(long = "in")]
        input: PathBuf,
        /// Upscaling factor.
        #[arg(long)]
        factor: usize,
        /// Number of back-projection iterations.
        #[arg(long, default_value_t = 20)]
        iters: usize,
        /// Output PPM.
        #[arg(long)]
        out: PathBuf,
        /// Residual log, CSV `iter,residual`.
        #[arg(long)]
        log: PathBuf,
    },
    /// Residual-magnitude heatmap (levels x blocks) of a checkpoint.
    Probe {
        /// Checkpoint to load.
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of PPM probe images.
        #[arg(long)]
        data: PathBuf,
        /// Output CSV, one row per level (lowest resolution first).
        #[arg(long)]
        out: PathBuf,
        /// Optional grayscale rendering.
        #[arg(long)]
        pgm: Option<PathBuf>,
        /// Degrade probe images by this factor first [default: none].
        #[arg(long)]
        factor: Option<usize>,
    },
    /// Split the output on one image into its linear part Fx and residual r.
    Linscope {
        /// Checkpoint to load.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input PPM.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output PPM for Fx (range-mapped; mapping in <path>.txt).
        #[arg(long)]
        out_fx: PathBuf,
        /// Output PPM for r (range-mapped; mapping in <path>.txt).
        #[arg(long)]
        out_r: PathBuf,
    },
    /// PSNR and SSIM between two images.
    Metrics {
        /// First PPM.
        #[arg(long)]
        a: PathBuf,
        /// Second PPM.
        #[arg(long)]
        b: PathBuf,
        /// Color handling: rgb, y_m (offset Matlab luma) or y_p (full-range luma).
        #[arg(long, default_value = "rgb")]
        mode: MetricMode,
    },
    /// Print the parameter count of a checkpoint or configuration
    /// (default: the paper preset).
    Params {
        /// Checkpoint to inspect.
        #[arg(long, conflicts_with = "config")]
        ckpt: Option<PathBuf>,
        /// JSON run configuration to inspect.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("BPP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("BPP_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(Error::Invalid(format!("thread pool: {e}"))))
}

fn list_ppm(dir: &Path) -> bpp_core::Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    v.sort();
    Ok(v)
}

fn load_net(path: &Path) -> bpp_core::Result<Bpp32> {
    Checkpoint::load(path)?.network()
}

/// Reflect-pads to the network's alignment, runs `f`, and crops back.
fn aligned(
    net: &Bpp32,
    img: &Tensor32,
    f: impl Fn(&Tensor32) -> bpp_core::Result<Tensor32>,
) -> bpp_core::Result<Tensor32> {
    let s = img.shape();
    let a = net.config.alignment();
    let (ph, pw) = (s.h.div_ceil(a) * a, s.w.div_ceil(a) * a);
    if (ph, pw) == (s.h, s.w) {
        return f(img);
    }
    f(&reflect_pad(img, ph, pw)?)?.crop(0, 0, s.h, s.w)
}

/// Maps `[min, max]` to `[0, 1]`; returns the image and the mapping text.
fn range_map(t: &Tensor32) -> (Tensor32, String) {
    let lo = t.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = t.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = t.map(|v| (v - lo) / span);
    (
        img,
        format!("min={lo:.9}\nmax={hi:.9}\npixel = (value - min) / (max - min)\n"),
    )
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::MakeDataset {
            out,
            count,
            size,
            factors,
            seed,
        } => {
            let spec = DatasetSpec::synthetic(seed, count, size, &factors);
            spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            for i in 0..count {
                let img: Tensor32 = synth_image(corpus_seed(seed, i as u64), size, size)?;
                ppm_write(out.join(format!("img_{i:04}.ppm")), &img)?;
            }
            let m = Manifest {
                seed,
                count,
                size,
                factors,
            };
            let json = serde_json::to_vec_pretty(&m).map_err(Error::from)?;
            write_atomic(out.join(MANIFEST), &json)?;
            println!("wrote {count} images to {}", out.display());
        }
        Command::Train { config, data, out, log } => {
            let rc: RunConfig = read_json(&config)?;
            let manifest_path = data.join(MANIFEST);
            let manifest: Option<Manifest> = manifest_path.exists().then(|| read_json(&manifest_path)).transpose()?;
            let factors = rc
                .dataset
                .factors
                .or(manifest.map(|m| m.factors))
                .unwrap_or_else(|| vec![2]);
            let mut spec = DatasetSpec {
                source: DataSource::Directory(data),
                factors,
                val_fraction: 0.1,
            };
            if let Some(v) = rc.dataset.val_fraction {
                spec.val_fraction = v;
            }
            let cfg = rc.train;
            cfg.validate()?;
            let ds = make_pairs::<f32>(&spec, cfg.bpp.alignment())?;
            let base = baseline(&ds.val)?;
            let outcome = train(&cfg, &ds, &mut |ck| ck.save(&out))?;
            outcome.checkpoint.save(&out)?;
            write_atomic(&log, log_csv(&outcome.log).as_bytes())?;
            let last = outcome.log.last().expect("final validation row");
            println!(
                "steps={} val_psnr={:.4} baseline_psnr={:.4} val_mse={:.6}",
                cfg.steps, last.psnr, base.psnr, last.mse
            );
        }
        Command::Infer {
            ckpt,
            input,
            out,
            factor,
            patch,
            stride,
        } => {
            let net = load_net(&ckpt)?;
            let mut img: Tensor32 = ppm_read(&input)?;
            if let Some(f) = factor {
                if f < 1 {
                    return Err(Failure::Usage("--factor must be >= 1".into()));
                }
                let s = img.shape();
                img = bicubic_resize(&img, s.h * f, s.w * f)?;
            }
            let y = match patch {
                Some(p) => {
                    let a = net.config.alignment();
                    if p % a != 0 {
                        return Err(Failure::Usage(format!("--patch {p} must be a multiple of {a}")));
                    }
                    let s = img.shape();
                    let plan = plan_tiles(s.h, s.w, p, stride).map_err(|e| Failure::Usage(e.to_string()))?;
                    stitch(|t| net.forward(t), &img, &plan)?
                }
                None => aligned(&net, &img, |t| net.forward(t))?,
            };
            ppm_write(&out, &y)?;
        }
        Command::Ibp {
            input,
            factor,
            iters,
            out,
            log,
        } => {
            if factor < 2 {
                return Err(Failure::Usage("--factor must be >= 2".into()));
            }
            let x: Tensor32 = ppm_read(&input)?;
            let (p, r) = (
                ZeroInsertUpsampler::bicubic(factor),
                DecimatingDownsampler::bicubic(factor),
            );
            let res = ibp_run(&IbpProblem {
                x: x.cast::<f64>(),
                upscale: &p,
                downscale: &r,
                iters,
            })?;
            ppm_write(&out, &res.h)?;
            let mut csv = String::from("iter,residual\n");
            for (i, v) in res.residual_norms.iter().enumerate() {
                csv.push_str(&format!("{i},{v:.9}\n"));
            }
            write_atomic(&log, csv.as_bytes())?;
        }
        Command::Probe {
            ckpt,
            data,
            out,
            pgm,
            factor,
        } => {
            let net = load_net(&ckpt)?;
            let a = net.config.alignment();
            let mut images = Vec::new();
            for p in list_ppm(&data)? {
                let img: Tensor32 = ppm_read(&p)?;
                let s = img.shape();
                let m = factor.map_or(a, |f| crop_multiple(&[f], a));
                let (h, w) = (s.h / m * m, s.w / m * m);
                if h == 0 || w == 0 {
                    return Err(Failure::Runtime(Error::Shape(format!(
                        "{}: {}x{} is smaller than {m}",
                        p.display(),
                        s.h,
                        s.w
                    ))));
                }
                let img = img.crop(0, 0, h, w)?;
                images.push(match factor {
                    Some(f) => degrade(&img, f)?,
                    None => img,
                });
            }
            let hm = residual_heatmap(&net, &images)?;
            write_atomic(&out, hm.to_csv().as_bytes())?;
            if let Some(p) = pgm {
                write_atomic(p, &hm.to_pgm(16))?;
            }
        }
        Command::Linscope {
            ckpt,
            input,
            out_fx,
            out_r,
        } => {
            let net = load_net(&ckpt)?;
            let img: Tensor32 = ppm_read(&input)?;
            let d = std::cell::RefCell::new(None);
            aligned(&net, &img, |t| {
                let dec = decompose(&net, t)?;
                let sum = dec.fx.add(&dec.r)?;
                *d.borrow_mut() = Some(dec);
                Ok(sum)
            })?;
            let dec = d.into_inner().expect("decomposition computed");
            let s = img.shape();
            for (t, path) in [(&dec.fx, &out_fx), (&dec.r, &out_r)] {
                let (mapped, note) = range_map(&t.crop(0, 0, s.h, s.w)?);
                ppm_write(path, &mapped)?;
                write_atomic(sidecar(path), note.as_bytes())?;
            }
        }
        Command::Metrics { a, b, mode } => {
            let a: Tensor32 = ppm_read(&a)?;
            let b: Tensor32 = ppm_read(&b)?;
            let e = mse(&a, &b, mode)?;
            println!("psnr={:.6} ssim={:.6}", psnr_from_mse(e), ssim(&a, &b, mode)?);
        }
        Command::Params { ckpt, config } => {
            let count = match (ckpt, config) {
                (Some(c), _) => load_net(&c)?.param_count(),
                (None, Some(f)) => {
                    let rc: RunConfig = read_json(&f)?;
                    Bpp32::new(rc.train.bpp, 0)?.param_count()
                }
                (None, None) => Bpp32::new(BppConfig::paper(), 0)?.param_count(),
            };
            println!("params={count}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match init_threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
