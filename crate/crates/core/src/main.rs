use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vig::analysis::{model_stats, probe_diversity, ProbeConfig};
use vig::checkpoint::resolve_config;
use vig::data::{synth_shapes, Dataset};
use vig::model::{published_figures, Model, ModelConfig};
use vig::train::{evaluate, train, TrainConfig};
use vig::{Result, Tensor, VigError};

/// ViG toolkit: build, count, probe, visualize and train patch-graph networks.
#[derive(Parser)]
#[command(name = "vig", version)]
struct Cli {
    /// Run on one thread for bitwise-reproducible output.
    #[arg(long, global = true)]
    serial: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Named preset, e.g. vig-ti or pvig-s.
    #[arg(long)]
    preset: Option<String>,
    /// JSON config; may name a preset and override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Square input resolution, overriding the config.
    #[arg(long)]
    res: Option<usize>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = resolve_config(self.preset.as_deref(), self.config.as_deref())?;
        if let Some(r) = self.res {
            cfg.image_size = [r, r];
            cfg.validate()?;
        }
        Ok(cfg)
    }

    /// Preset whose published figures apply to this run, if any.
    fn pure_preset(&self) -> Option<&str> {
        match (&self.preset, &self.config) {
            (Some(p), None) => Some(p.as_str()),
            _ => None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved config and the per-block layout.
    Inspect {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Count parameters and multiply-accumulates.
    Count {
        #[command(flatten)]
        model: ModelArgs,
        /// Per-layer CSV destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Node diversity through a ViG stack and a bare graph-convolution stack.
    ProbeDiversity {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        depth: usize,
        #[arg(long, default_value_t = 196)]
        nodes: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 9)]
        k: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        /// CSV destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the graph one block builds for an image as an edge list and DOT file.
    ExportGraph {
        #[command(flatten)]
        model: ModelArgs,
        /// Weights to load; a freshly initialized model is used otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// PNG or PNM image, resized to the model resolution. Defaults to a
        /// two-tone test card.
        #[arg(long)]
        image: Option<PathBuf>,
        /// 1-based block index.
        #[arg(long)]
        layer: usize,
        /// Node whose neighbors are listed; defaults to the grid center.
        #[arg(long)]
        center: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Generate a synthetic shapes dataset file.
    MakeDataset {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        res: usize,
        #[arg(long, default_value = "shapes.vigd")]
        out: PathBuf,
    },
    /// Train on a dataset file; writes metrics.csv and checkpoints to --out.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        /// Training data. The last sixth is held out for validation unless --val is given.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 1)]
        warmup_epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Start from these weights instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Top-1 and top-5 accuracy of a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
    },
    /// Compare backprop with central differences on a small model in f64.
    GradCheck {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads(cli.serial).and_then(|()| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(VigError::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_threads(serial: bool) -> Result<()> {
    let threads = match std::env::var("VIG_THREADS") {
        _ if serial => 1,
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| config_err("VIG_THREADS", format!("expected a positive integer, got `{v}`")))?,
        Err(_) => return Ok(()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| VigError::Contract(e.to_string()))
}

fn config_err(path: &str, msg: impl Into<String>) -> VigError {
    VigError::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Inspect { model } => inspect(&model),
        Command::Count { model, out } => count(&model, out.as_deref()),
        Command::ProbeDiversity {
            seed,
            depth,
            nodes,
            dim,
            k,
            heads,
            out,
        } => {
            let result = probe_diversity(ProbeConfig {
                nodes,
                dim,
                k,
                depth,
                heads,
                seed,
            })?;
            let (vig, bare) = result.ratios();
            write_or_print(out.as_deref(), |w| result.write_csv(w))?;
            eprintln!("last/first diversity: vig {vig:.4e}, bare {bare:.4e}");
            Ok(())
        }
        Command::ExportGraph {
            model,
            checkpoint,
            image,
            layer,
            center,
            seed,
            out,
        } => export_graph(&model, checkpoint.as_deref(), image.as_deref(), layer, center, seed, &out),
        Command::MakeDataset {
            n,
            classes,
            seed,
            res,
            out,
        } => {
            let data = synth_shapes(n, res, classes, seed)?;
            data.save(&out)?;
            println!("wrote {} images of {res}×{res} in {classes} classes to {}", data.len(), out.display());
            Ok(())
        }
        Command::Train {
            model,
            data,
            val,
            epochs,
            lr,
            batch_size,
            warmup_epochs,
            seed,
            checkpoint,
            out,
        } => {
            let cfg = model.resolve()?;
            let all = Dataset::load(&data)?;
            let (train_set, val_set) = match val {
                Some(p) => (all, Dataset::load(p)?),
                None => {
                    let held = all.len() / 6;
                    if held == 0 {
                        return Err(config_err("data", "too few records to hold out a validation sixth"));
                    }
                    all.split_at(all.len() - held)
                }
            };
            let mut net = Model::<f32>::new(cfg, seed)?;
            if let Some(ck) = checkpoint {
                net.load_weights(ck)?;
            }
            let tc = TrainConfig {
                epochs,
                lr,
                batch_size,
                warmup_epochs,
                seed,
                ..TrainConfig::default()
            };
            let history = train(&mut net, &train_set, &val_set, &tc, Some(&out))?;
            for e in &history.epochs {
                println!(
                    "epoch {:>3}  loss {:.4}  top1 {:.4}  top5 {:.4}  lr {:.3e}",
                    e.epoch, e.train_loss, e.val_top1, e.val_top5, e.lr
                );
            }
            net.save(out.join("last.vigc"))?;
            println!("metrics in {}", out.join("metrics.csv").display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            batch_size,
        } => {
            let net = Model::<f32>::load(&checkpoint)?;
            let data = Dataset::load(&data)?;
            let (top1, top5) = evaluate(&net, &data, batch_size)?;
            println!("top1 {top1:.4}  top5 {top5:.4}  n {}", data.len());
            Ok(())
        }
        Command::GradCheck {
            model,
            seed,
            tolerance,
        } => grad_check(&model, seed, tolerance),
    }
}

fn write_or_print(out: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match out {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            f(&mut w)?;
            w.flush()?;
        }
        None => f(&mut io::stdout().lock())?,
    }
    Ok(())
}

fn inspect(args: &ModelArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let model = Model::<f32>::structure(cfg)?;
    println!("{}", serde_json::to_string_pretty(model.config())?);
    println!("params {}", model.param_count());
    println!("block stage grid    dim  k  dilation drop_path");
    let mut l = 0;
    for (s, stage) in model.stages.iter().enumerate() {
        for b in &stage.blocks {
            l += 1;
            let sp = &b.grapher.spec;
            println!(
                "{l:>5} {s:>5} {:>2}×{:<3} {:>4} {:>2} {:>9} {:.4}",
                stage.grid.0, stage.grid.1, sp.dim, sp.k, sp.dilation, sp.drop_path
            );
        }
    }
    Ok(())
}

fn count(args: &ModelArgs, out: Option<&Path>) -> Result<()> {
    let cfg = args.resolve()?;
    let res = cfg.image_size;
    let model = Model::<f32>::structure(cfg)?;
    let stats = model_stats(&model, res)?;
    let params_m = stats.param_count as f64 / 1e6;
    let macs_b = stats.mac_count as f64 / 1e9;
    let published = args.pure_preset().and_then(published_figures).filter(|_| res == [224, 224]);
    let dev = |ours: f64, theirs: f64| format!(" (published {theirs}, {:+.1}%)", 100.0 * (ours / theirs - 1.0));
    let (pd, md) = match published {
        Some(f) => (dev(params_m, f.params_m), dev(macs_b, f.macs_b)),
        None => Default::default(),
    };
    println!("resolution {}×{}", res[0], res[1]);
    println!("params {params_m:.3}M{pd}");
    println!("macs {macs_b:.3}B{md}");
    println!("  of which graph distances {:.3}B", stats.distance_macs() as f64 / 1e9);
    write_or_print(out, |w| stats.write_csv(w))
}

fn load_image(path: &Path, [h, w]: [usize; 2]) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| config_err("image", format!("{}: {e}", path.display())))?
        .to_rgb8();
    let img = image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Triangle);
    let data = img.into_raw().into_iter().map(|p| (p as f32 / 255.0 - 0.5) / 0.5).collect();
    Tensor::new([1, h, w, 3], data)
}

/// Dark left half, light right half, with a little noise to keep distances tie-free.
fn two_tone([h, w]: [usize; 2], seed: u64) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        [1, h, w, 3],
        (0..h * w * 3)
            .map(|i| {
                let base = if (i / 3) % w < w / 2 { -0.7 } else { 0.7 };
                base + rng.gen_range(-0.02..0.02)
            })
            .collect(),
    )
}

fn export_graph(
    args: &ModelArgs,
    checkpoint: Option<&Path>,
    image: Option<&Path>,
    layer: usize,
    center: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let model = match checkpoint {
        Some(ck) if args.preset.is_none() && args.config.is_none() => Model::<f32>::load(ck)?,
        Some(ck) => {
            let mut m = Model::<f32>::structure(args.resolve()?)?;
            m.load_weights(ck)?;
            m
        }
        None => Model::<f32>::new(args.resolve()?, seed)?,
    };
    let grid = model.block_grid(layer)?;
    let size = model.config().image_size;
    let img = match image {
        Some(p) => load_image(p, size)?,
        None => two_tone(size, seed)?,
    };
    let trace = model.trace(&img)?;
    let graph = &trace.graphs[layer - 1][0];
    let n = graph.num_nodes();
    let center = center.unwrap_or(grid.0 / 2 * grid.1 + grid.1 / 2);
    if center >= n {
        return Err(VigError::Index(format!("center node {center} out of range 0..{n}")));
    }

    fs::create_dir_all(out)?;
    let edges = out.join(format!("layer{layer}.edges"));
    let mut w = BufWriter::new(File::create(&edges)?);
    graph.write_edge_list(&mut w)?;
    w.flush()?;
    let dot = out.join(format!("layer{layer}.dot"));
    fs::write(&dot, graph.to_dot(Some(grid.1), Some(center)))?;

    println!("layer {layer}: {n} nodes on a {}×{} grid, k {}, dilation {}", grid.0, grid.1, graph.k(), graph.dilation());
    println!("center {center} (row {}, col {})", center / grid.1, center % grid.1);
    for (rank, &j) in graph.neighbors(center).iter().enumerate() {
        let j = j as usize;
        println!("  {rank:>2}: {j:>4} (row {}, col {})", j / grid.1, j % grid.1);
    }
    println!("wrote {} and {}", edges.display(), dot.display());
    Ok(())
}

fn grad_check(args: &ModelArgs, seed: u64, tolerance: f64) -> Result<()> {
    let cfg = args.resolve()?;
    let [h, w] = cfg.image_size;
    let classes = cfg.num_classes;
    let model = Model::<f64>::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let images = Tensor::from_fn([2, h, w, 3], |_| rng.gen_range(-1.0..1.0));
    let targets = [rng.gen_range(0..classes), rng.gen_range(0..classes)];
    let report = model.gradient_check(&images, &targets, 1e-6)?;
    println!("max relative error: params {:.3e} (at {}), inputs {:.3e}", report.param_error, report.worst_param, report.input_error);
    if report.max_error() > tolerance {
        return Err(VigError::Contract(format!(
            "gradient error {:.3e} exceeds tolerance {tolerance:e}",
            report.max_error()
        )));
    }
    println!("max relative error {:.3e} <= {tolerance:e}", report.max_error());
    Ok(())
}
