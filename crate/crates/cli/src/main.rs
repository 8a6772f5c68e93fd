//! `mge`: synthesize scenes, train, predict, check gradients and benchmark
//! the motion-graph engine from the command line.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on validation or
//! numeric failures (including failed gradient checks).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mge_core::numerics::gradcheck::{F32_TOLERANCE, F64_TOLERANCE};
use mge_core::numerics::{mgt, Scalar, Tape, Tensor};
use mge_core::pipeline::suite::run_suite;
use mge_core::pipeline::{
    bench_memory, checkpoint_config, examples_from_scene, load_checkpoint, param_summary, read_ppm,
    save_checkpoint, train, write_ppm, Dtype, Model, PipelineConfig, SyntheticScene,
};
use mge_core::warp::{predict_rollout, MotionSource, WarpConfig};
use mge_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "mge", version, about = "Motion-graph video prediction")]
struct Cli {
    /// Worker threads for parallel kernels (default: all cores).
    #[arg(long, global = true, env = "MGE_THREADS")]
    threads: Option<usize>,

    /// Seed overriding the command's default (and a config's `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a scene description into PPM frames and displacement tensors.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on every scene under a data directory and write a checkpoint.
    Train {
        /// Config file or preset name (ucf, kitti, cityscapes, toy).
        #[arg(long)]
        config: String,
        /// Directory holding `scene.txt` and/or subdirectories with one each.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's `steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Roll a checkpoint forward from observed frames.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Observed frames, oldest first (`.ppm` or `.mgt`).
        #[arg(long, num_args = 1.., required = true)]
        frames: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every op and the full model.
    Gradcheck {
        /// Config file or preset name; the end-to-end check uses it.
        #[arg(long, default_value = "toy")]
        config: String,
        /// Run a single named check.
        #[arg(long)]
        op: Option<String>,
        /// Analytic dtype: f64, f32 or both.
        #[arg(long, default_value = "f64", value_parser = ["f64", "f32", "both"])]
        dtype: String,
    },
    /// Storage of the motion graph against a dense all-pairs matrix, as CSV.
    Bench {
        /// Comma-separated node counts per frame (square grids) or `HxW`.
        #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
        sizes: Vec<String>,
        #[arg(long, default_value_t = 2)]
        frames: usize,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the motion graph for a clip and print its edges.
    DumpGraph {
        /// Config file or preset; ignored when `--ckpt` is given.
        #[arg(long, required_unless_present = "ckpt")]
        config: Option<String>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        frames: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter counts per module.
    Summary {
        #[arg(long)]
        config: String,
    },
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}

fn run<I, S>(args: I) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 1;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return 2;
        }
    }
    match dispatch(cli.command, cli.seed) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// `Ok(false)` means the command ran but a check failed.
fn dispatch(command: Command, seed: Option<u64>) -> Result<bool> {
    match command {
        Command::Synth { spec, out } => synth(&spec, &out),
        Command::Train {
            config,
            data,
            out,
            steps,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            match cfg.dtype {
                Dtype::F32 => train_cmd::<f32>(cfg, &data, &out),
                Dtype::F64 => train_cmd::<f64>(cfg, &data, &out),
            }
        }
        Command::Predict {
            ckpt,
            frames,
            steps,
            out,
        } => match checkpoint_config(&ckpt)?.dtype {
            Dtype::F32 => predict_cmd::<f32>(&ckpt, &frames, steps, &out),
            Dtype::F64 => predict_cmd::<f64>(&ckpt, &frames, steps, &out),
        },
        Command::Gradcheck { config, op, dtype } => {
            gradcheck_cmd(&load_config(&config)?, op.as_deref(), &dtype, seed.unwrap_or(4))
        }
        Command::Bench {
            sizes,
            frames,
            k,
            channels,
            out,
        } => bench_cmd(&sizes, frames, k, channels, seed.unwrap_or(0), out.as_deref()),
        Command::DumpGraph {
            config,
            ckpt,
            frames,
            out,
        } => {
            let clip = load_clip(&frames)?;
            let out = out.as_deref();
            match (&ckpt, config) {
                (Some(dir), _) => match checkpoint_config(dir)?.dtype {
                    Dtype::F32 => dump_graph(&load_checkpoint::<f32>(dir)?, &clip, out)?,
                    Dtype::F64 => dump_graph(&load_checkpoint::<f64>(dir)?, &clip, out)?,
                },
                (None, Some(c)) => {
                    let mut cfg = load_config(&c)?;
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    dump_graph(&Model::<f64>::new(&cfg)?, &clip, out)?
                }
                (None, None) => return Err(Error::Argument("dump-graph needs --config or --ckpt".into())),
            }
            Ok(true)
        }
        Command::Summary { config } => {
            let cfg = load_config(&config)?;
            let model = Model::<f64>::new(&cfg)?;
            for (module, n) in param_summary(&model.params) {
                println!("{module:<12} {n:>10}");
            }
            println!("{:<12} {:>10}", "total", model.num_params());
            Ok(true)
        }
    }
}

/// A config file, or one of the built-in presets when no such file exists.
fn load_config(name: &str) -> Result<PipelineConfig> {
    let path = Path::new(name);
    if path.exists() {
        return PipelineConfig::load(path);
    }
    PipelineConfig::preset(name).ok_or_else(|| {
        Error::Config(format!(
            "`{name}` is neither a config file nor a preset (ucf, kitti, cityscapes, toy)"
        ))
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Write to `path`, or stdout when absent.
fn emit(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let (result, shown) = match path {
        Some(p) => (
            fs::File::create(p).and_then(|file| {
                let mut w = std::io::BufWriter::new(file);
                f(&mut w)?;
                w.flush()
            }),
            p.to_path_buf(),
        ),
        None => (f(&mut std::io::stdout().lock()), PathBuf::from("<stdout>")),
    };
    result.map_err(|e| Error::Io { path: shown, source: e })
}

fn synth(spec: &Path, out: &Path) -> Result<bool> {
    let text = fs::read_to_string(spec).map_err(|e| Error::Io {
        path: spec.to_path_buf(),
        source: e,
    })?;
    let scene = SyntheticScene::parse(&text).map_err(|e| Error::Format {
        path: spec.to_path_buf(),
        detail: e.to_string(),
    })?;
    let rendered = scene.render()?;
    create_dir(out)?;
    for t in 0..scene.frames {
        let frame = rendered.frame(t);
        write_ppm(&out.join(format!("frame_{t:03}.ppm")), &frame)?;
        mgt::write(&out.join(format!("frame_{t:03}.mgt")), &frame)?;
    }
    for (t, d) in rendered.displacement.iter().enumerate() {
        mgt::write(&out.join(format!("disp_{t:03}.mgt")), d)?;
    }
    write_text(&out.join("scene.txt"), &scene.to_text())?;
    println!(
        "wrote {} frames and {} displacement fields to {}",
        scene.frames,
        rendered.displacement.len(),
        out.display()
    );
    Ok(true)
}

/// `scene.txt` in `dir` itself and in each immediate subdirectory, sorted.
fn find_scenes(dir: &Path) -> Result<Vec<PathBuf>> {
    let io = |e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    };
    let mut found = Vec::new();
    if dir.join("scene.txt").is_file() {
        found.push(dir.join("scene.txt"));
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("scene.txt").is_file())
        .collect();
    subdirs.sort();
    found.extend(subdirs.into_iter().map(|p| p.join("scene.txt")));
    if found.is_empty() {
        return Err(Error::Argument(format!(
            "no scene.txt in {} or its subdirectories",
            dir.display()
        )));
    }
    Ok(found)
}

fn train_cmd<T: Scalar>(cfg: PipelineConfig, data: &Path, out: &Path) -> Result<bool> {
    let mut examples = Vec::new();
    for path in find_scenes(data)? {
        let text = fs::read_to_string(&path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let scene = SyntheticScene::parse(&text).map_err(|e| Error::Format {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        if (scene.height, scene.width) != (cfg.height, cfg.width) {
            return Err(Error::Config(format!(
                "{}: scene is {}x{} but the config expects height = {}, width = {}",
                path.display(),
                scene.height,
                scene.width,
                cfg.height,
                cfg.width
            )));
        }
        examples.extend(examples_from_scene::<T>(&scene.render()?, cfg.frames_in)?);
    }
    let steps = cfg.steps;
    let mut model = Model::<T>::new(&cfg)?;
    let report = train(&mut model, &examples, steps)?;
    save_checkpoint(&model, out)?;
    write_text(&out.join("loss.csv"), &report.to_csv())?;
    println!(
        "trained {steps} steps on {} examples: smoothed loss {:.4e} -> {:.4e}; checkpoint in {}",
        examples.len(),
        report.smoothed_initial(),
        report.smoothed_final(),
        out.display()
    );
    Ok(true)
}

fn load_image(path: &Path) -> Result<Tensor<f64>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(path),
        Some("mgt") => {
            let bytes = fs::read(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            match mgt::peek_header(&bytes) {
                Ok((1, _)) => Ok(mgt::read::<f32>(path)?.cast()),
                Ok(_) => mgt::read::<f64>(path),
                Err(d) => Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: d,
                }),
            }
        }
        _ => Err(Error::Format {
            path: path.to_path_buf(),
            detail: "expected a .ppm or .mgt frame".into(),
        }),
    }
}

/// Stack frames into `T×H×W×3`.
fn load_clip(paths: &[PathBuf]) -> Result<Tensor<f64>> {
    let mut data = Vec::new();
    let mut extent: Option<Vec<usize>> = None;
    for p in paths {
        let img = load_image(p)?;
        let s = img.shape().to_vec();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Format {
                path: p.clone(),
                detail: format!("expected an H×W×3 image, got {s:?}"),
            });
        }
        match &extent {
            Some(e) if *e != s => {
                return Err(Error::Format {
                    path: p.clone(),
                    detail: format!("extent {s:?} differs from the first frame's {e:?}"),
                })
            }
            _ => extent = Some(s),
        }
        data.extend_from_slice(img.data());
    }
    let s = extent.ok_or_else(|| Error::Argument("no frames given".into()))?;
    Tensor::new(&[paths.len(), s[0], s[1], 3], data)
}

/// Model motion for each rollout step, kept for dumping.
struct Recorder<'a, T: Scalar> {
    model: &'a Model<T>,
    fields: Vec<Tensor<T>>,
}

impl<T: Scalar> MotionSource<T> for Recorder<'_, T> {
    fn motion(&mut self, frames: &Tensor<T>, _step: usize) -> Result<Tensor<T>> {
        let (_, field) = self.model.predict(frames)?;
        self.fields.push(field.clone());
        Ok(field)
    }

    fn warp_config(&self) -> WarpConfig {
        self.model.arch.warp
    }
}

fn predict_cmd<T: Scalar>(ckpt: &Path, frames: &[PathBuf], steps: usize, out: &Path) -> Result<bool> {
    let model = load_checkpoint::<T>(ckpt)?;
    let clip = load_clip(frames)?.cast::<T>();
    model.arch.check_input(clip.shape())?;
    let mut rec = Recorder {
        model: &model,
        fields: Vec::new(),
    };
    let predicted = predict_rollout(&clip, &mut rec, steps)?;
    create_dir(out)?;
    for (s, (frame, field)) in predicted.iter().zip(&rec.fields).enumerate() {
        write_ppm(&out.join(format!("pred_{s:03}.ppm")), frame)?;
        mgt::write(&out.join(format!("pred_{s:03}.mgt")), frame)?;
        mgt::write(&out.join(format!("motion_{s:03}.mgt")), field)?;
    }
    println!("wrote {} predicted frames to {}", predicted.len(), out.display());
    Ok(true)
}

fn gradcheck_cmd(cfg: &PipelineConfig, op: Option<&str>, dtype: &str, seed: u64) -> Result<bool> {
    let mut runs = Vec::new();
    if dtype != "f32" {
        runs.push(("f64", F64_TOLERANCE, run_suite::<f64>(cfg, op, seed)?));
    }
    if dtype != "f64" {
        runs.push(("f32", F32_TOLERANCE, run_suite::<f32>(cfg, op, seed)?));
    }
    let mut all_ok = true;
    for (name, tol, reports) in &runs {
        for r in reports {
            let ok = r.passes(*tol);
            all_ok &= ok;
            let worst = r.worst.as_ref().map_or(String::new(), |(t, i)| format!("  worst {t}[{i}]"));
            println!(
                "{name} {:<24} max rel err {:.3e}  ({} entries, tol {tol:e}) {}{worst}",
                r.name,
                r.max_rel_err,
                r.checked,
                if ok { "ok" } else { "FAIL" }
            );
        }
    }
    println!("{}", if all_ok { "all checks passed" } else { "gradient check FAILED" });
    Ok(all_ok)
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Argument(format!("size `{s}`: expected a node count (e.g. 1024) or HxW"));
    let s = s.trim();
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?)),
        None => mge_core::pipeline::memory::square_grid(s.parse().map_err(|_| bad())?),
    }
}

fn bench_cmd(
    sizes: &[String],
    frames: usize,
    k: usize,
    channels: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<bool> {
    let grids = sizes.iter().map(|s| parse_size(s)).collect::<Result<Vec<_>>>()?;
    let report = bench_memory(&grids, frames, k, channels, seed)?;
    emit(out, |w| w.write_all(report.to_csv().as_bytes()))?;
    Ok(true)
}

fn dump_graph<T: Scalar>(model: &Model<T>, clip: &Tensor<f64>, out: Option<&Path>) -> Result<()> {
    model.arch.check_input(clip.shape())?;
    let mut tape = Tape::inference();
    let x = tape.constant(clip.cast::<T>());
    let graph = model.arch.forward(&mut tape, &model.params, x)?.graph;
    emit(out, |mut w| graph.dump(&mut w))
}
