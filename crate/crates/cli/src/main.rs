use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use relight::attention::{make_decay_map, Direction};
use relight::config::Config;
use relight::eval::{self, Variant};
use relight::fixer::Fixer;
use relight::pipeline::{sample, tokens_from_words, Mode, ModelConfig, RelightInput, RelightModel, SampleSettings};
use relight::spectral::haar_forward;
use relight::{checkpoint, pnm, synth, Error, ImageBuffer, Result};

#[derive(Parser)]
#[command(name = "relight", version, about = "Toy diffusion relighting with a light adapter and a spectral foreground fixer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key = value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic train/val/test corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 800)]
        n: usize,
    },
    /// Train the denoiser.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training steps (overrides train_steps).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the foreground fixer on color-transform pairs.
    TrainFixer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Relight one foreground.
    Relight {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fixer: Option<PathBuf>,
        #[arg(long)]
        fg: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        bg: Option<PathBuf>,
        /// Space-separated vocabulary words, e.g. "left warm flat".
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value = "image")]
        mode: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
        /// Output PPM file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fixer: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the ablation variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variant names; all by default.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Dump decay maps, wavelet subbands and attention heatmaps.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Image whose Haar subbands to dump.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Checkpoint and background for condensation heatmaps.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        bg: Option<PathBuf>,
    },
}

fn load_config(common: &Common, fallback_dir: Option<&Path>) -> Result<Config> {
    let mut cfg = match (&common.config, fallback_dir.map(|d| d.join("config.txt"))) {
        (Some(p), _) => Config::load(p)?,
        (None, Some(p)) if p.exists() => Config::load(&p)?,
        _ => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn parent(p: &Path) -> Option<&Path> {
    p.parent().filter(|d| !d.as_os_str().is_empty()).or(Some(Path::new(".")))
}

fn load_fixer(cfg: &Config, path: Option<&PathBuf>) -> Result<Option<Fixer>> {
    match path {
        Some(p) if cfg.fixer => Ok(Some(Fixer::from_params(cfg.fixer_width, &checkpoint::load(p)?)?)),
        _ => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out, n } => {
            let cfg = load_config(&common, None)?;
            let summary = synth::sample_dataset(&out, n, cfg.seed, cfg.resolution, (0.8, 0.1))?;
            for (split, count) in &summary.counts {
                println!("{split}: {count}");
            }
        }
        Command::Train {
            common,
            data,
            out,
            steps,
        } => {
            let mut cfg = load_config(&common, None)?;
            if let Some(s) = steps {
                cfg.train_steps = s;
            }
            let train = synth::load_split(&data, "train")?;
            mkdir(&out)?;
            let mut log = String::new();
            let model = eval::train_model(&cfg, &train, |step, loss| {
                let _ = writeln!(log, "{step} {loss:.9}");
                if step % 100 == 0 {
                    eprintln!("step {step}: loss {loss:.5}");
                }
            })?;
            checkpoint::save(&out.join("model.dlkt"), model.params())?;
            write_text(&out.join("config.txt"), &cfg.to_text())?;
            write_text(&out.join("train_log.txt"), &log)?;
            println!("wrote {}", out.join("model.dlkt").display());
        }
        Command::TrainFixer {
            common,
            data,
            out,
            steps,
        } => {
            let mut cfg = load_config(&common, None)?;
            if let Some(s) = steps {
                cfg.fixer_steps = s;
            }
            let train = synth::load_split(&data, "train")?;
            let images: Vec<ImageBuffer> = train.into_iter().map(|s| s.target).collect();
            mkdir(&out)?;
            let mut log = String::new();
            let fixer = eval::train_fixer(&cfg, &images, |step, loss| {
                let _ = writeln!(log, "{step} {loss:.9}");
            })?;
            checkpoint::save(&out.join("fixer.dlkt"), fixer.params())?;
            write_text(&out.join("fixer_log.txt"), &log)?;
            println!("wrote {}", out.join("fixer.dlkt").display());
        }
        Command::Relight {
            common,
            checkpoint: ckpt,
            fixer,
            fg,
            mask,
            bg,
            prompt,
            mode,
            steps,
            guidance,
            out,
        } => {
            let mut cfg = load_config(&common, parent(&ckpt))?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(g) = guidance {
                cfg.guidance = g;
            }
            cfg.validate()?;
            let model = RelightModel::from_checkpoint(ModelConfig::from_config(&cfg), &ckpt)?;
            let fixer = load_fixer(&cfg, fixer.as_ref())?;
            let fg_img = pnm::read_ppm(&fg)?;
            let fg_mask = pnm::read_mask(&mask)?;
            let words: Vec<&str> = prompt.as_deref().unwrap_or("").split_whitespace().collect();
            let inp = match Mode::parse(&mode)? {
                Mode::ImageBased => {
                    let bg = bg.ok_or_else(|| Error::Parameter("image mode needs --bg".into()))?;
                    RelightInput::image_based(fg_img.clone(), fg_mask.clone(), pnm::read_ppm(&bg)?)?
                }
                Mode::TextBased => RelightInput::text_based(fg_img.clone(), fg_mask.clone(), tokens_from_words(&words)?)?,
                Mode::Both => {
                    let bg = bg.ok_or_else(|| Error::Parameter("both mode needs --bg".into()))?;
                    RelightInput::both(fg_img.clone(), fg_mask.clone(), pnm::read_ppm(&bg)?, tokens_from_words(&words)?)?
                }
            };
            let mut img = sample(&model, &inp, &SampleSettings::from_config(&cfg))?;
            if let Some(f) = &fixer {
                img = relight::fixer::apply_fixer(&img, &fg_img, &fg_mask, f)?;
            }
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                mkdir(dir)?;
            }
            pnm::write_ppm(&out, &img)?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            common,
            checkpoint: ckpt,
            fixer,
            data,
            split,
            steps,
            guidance,
            out,
        } => {
            let mut cfg = load_config(&common, parent(&ckpt))?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(g) = guidance {
                cfg.guidance = g;
            }
            cfg.validate()?;
            let model = RelightModel::from_checkpoint(ModelConfig::from_config(&cfg), &ckpt)?;
            let fixer = load_fixer(&cfg, fixer.as_ref())?;
            let samples = synth::load_split(&data, &split)?;
            let name = if fixer.is_some() { "full" } else { "no_fixer" };
            let report = eval::evaluate(name, &model, fixer.as_ref(), &samples, &cfg, &split)?;
            eval::write_reports(&out, std::slice::from_ref(&report))?;
            println!("{}", report.summary_line());
        }
        Command::Ablate {
            common,
            data,
            out,
            variants,
            steps,
        } => {
            let mut cfg = load_config(&common, None)?;
            if let Some(s) = steps {
                cfg.train_steps = s;
            }
            let variants: Vec<Variant> = match variants {
                Some(list) => list.split(',').map(|v| Variant::parse(v.trim())).collect::<Result<_>>()?,
                None => Variant::ALL.to_vec(),
            };
            let reports = eval::run_ablation(&data, &cfg, &variants, |m| eprintln!("{m}"))?;
            eval::write_reports(&out, &reports)?;
            print!("{}", eval::summary_text(&reports));
        }
        Command::Inspect {
            common,
            out,
            image,
            checkpoint: ckpt,
            bg,
        } => {
            let cfg = load_config(&common, ckpt.as_deref().and_then(parent))?;
            mkdir(&out)?;
            let side = cfg.resolution / 4;
            for dir in Direction::ALL {
                let m = make_decay_map(dir, side, side)?;
                let img = ImageBuffer::new(side, side, 1, m.values.clone())?;
                pnm::write_pgm(&out.join(format!("decay_{}.pgm", dir.name())), &img)?;
            }
            if let Some(p) = image {
                let img = pnm::read_ppm(&p)?;
                let b = haar_forward(&img)?;
                for (name, band) in [("ll", &b.ll), ("lh", &b.lh), ("hl", &b.hl), ("hh", &b.hh)] {
                    // Detail bands are signed; show them around mid gray.
                    let shown = if name == "ll" {
                        band.tensor().map(|v| v / 2.0)
                    } else {
                        band.tensor().map(|v| 0.5 + v)
                    };
                    pnm::write_ppm(&out.join(format!("haar_{name}.ppm")), &ImageBuffer::from_tensor(shown)?)?;
                }
            }
            if let (Some(ck), Some(bgp)) = (ckpt, bg) {
                let model = RelightModel::from_checkpoint(ModelConfig::from_config(&cfg), &ck)?;
                let bg = pnm::read_ppm(&bgp)?;
                if let Some((feat, weights)) = model.adapter_diagnostics(&bg)? {
                    let (h, w) = (feat.height(), feat.width());
                    let nq = cfg.n_q;
                    for dir in Direction::ALL {
                        let gi = Direction::ALL.iter().position(|&d| d == dir).unwrap();
                        // Mean over the group's rows of the background columns.
                        let mut heat = vec![0.0; h * w];
                        for head in &weights {
                            for r in gi * nq..(gi + 1) * nq {
                                for (c, v) in head.row(r)[4 * nq..].iter().enumerate() {
                                    heat[c] += v;
                                }
                            }
                        }
                        let mx = heat.iter().cloned().fold(0.0, f64::max).max(1e-12);
                        let img = ImageBuffer::new(h, w, 1, heat.iter().map(|v| v / mx).collect())?;
                        pnm::write_pgm(&out.join(format!("attention_{}.pgm", dir.name())), &img)?;
                    }
                }
            }
            println!("wrote diagnostics to {}", out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Dimension(_) | Error::Parameter(_) | Error::Format(_) => 2,
        Error::State(_) => 3,
        Error::Io { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
