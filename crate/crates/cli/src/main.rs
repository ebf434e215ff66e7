use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use nar_core::bench::bench;
use nar_core::model::{load_checkpoint, save_checkpoint, ModelParams, ParamLayout};
use nar_core::render::{write_ppm, Palette};
use nar_core::sample::{generate_batch, generate_raster_batch, GenerationStats};
use nar_core::tokens::{decode_tokens, save_tokens, SampleRecord};
use nar_core::train::{train_loop_with, TrainConfig};
use nar_core::{
    build_mask, build_schedule, Error, GridShape, Mode, ModelConfig, SamplingConfig, TokenGrid,
};

#[derive(Parser)]
#[command(
    name = "nar",
    version,
    about = "Neighboring autoregressive generation on token grids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the decoding schedule of a grid, one step per line.
    Schedule {
        #[arg(long)]
        shape: GridShape,
    },
    /// Print the attention mask of a grid as rows of 0/1.
    Mask {
        #[arg(long)]
        shape: GridShape,
    },
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines metrics file; stdout when omitted.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Sample token grids from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        shape: Option<GridShape>,
        #[arg(long, default_value_t = 1)]
        num_samples: usize,
        /// Class of every sample; cycles through all classes when omitted.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        top_k: usize,
        /// Defaults to 2.0 for images and 1.25 for videos.
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Tokens)]
        format: Format,
    },
    /// Convert a `.tokens` or sample JSON file to PPM images.
    Render {
        #[arg(long)]
        input: PathBuf,
        /// Output path without extension.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        zoom: usize,
        /// Palette size; defaults to the sample vocabulary or the largest token + 1.
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long, default_value_t = 0)]
        palette_seed: u64,
    },
    /// Time NAR against raster generation and print a JSON report.
    Bench {
        #[arg(long, requires = "raster", conflicts_with = "model_config")]
        nar: Option<PathBuf>,
        #[arg(long, requires = "nar")]
        raster: Option<PathBuf>,
        /// Model config JSON; benchmarks freshly initialized weights instead
        /// of checkpoints.
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        shape: Option<GridShape>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        batch_sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a checkpoint's config and parameter counts.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Tokens,
    Json,
    Both,
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
    if let Some(n) = std::env::var("NAR_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    let mut out = io::stdout().lock();
    match command {
        Command::Schedule { shape } => out.write_all(build_schedule(&shape).dump().as_bytes())?,
        Command::Mask { shape } => {
            out.write_all(build_mask(&build_schedule(&shape)).dump().as_bytes())?
        }
        Command::Train {
            config,
            out: ckpt,
            metrics,
        } => {
            let config = TrainConfig::load(config)?;
            let mut sink: Box<dyn Write> = match metrics {
                Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
                None => Box::new(out),
            };
            let (params, _) = train_loop_with(&config, |p| {
                let _ = writeln!(sink, "{}", serde_json::to_string(p).expect("plain struct"));
                let _ = sink.flush();
            })?;
            save_checkpoint(ckpt, &params)?;
        }
        Command::Generate {
            checkpoint,
            shape,
            num_samples,
            class,
            batch_size,
            seed,
            temperature,
            top_k,
            cfg_scale,
            greedy,
            out_dir,
            format,
        } => {
            let params = load_checkpoint(checkpoint, None)?;
            let shape = shape.unwrap_or_else(|| params.config().shape.clone());
            let defaults = SamplingConfig::for_shape(&shape, seed);
            let sampling = SamplingConfig {
                temperature,
                top_k,
                cfg_scale: cfg_scale.unwrap_or(defaults.cfg_scale),
                greedy,
                seed,
            };
            generate_command(
                &params,
                &shape,
                num_samples,
                class,
                batch_size.max(1),
                &sampling,
                &out_dir,
                format,
                &mut out,
            )?;
        }
        Command::Render {
            input,
            out: stem,
            zoom,
            vocab,
            palette_seed,
        } => {
            let (grid, record_vocab) = read_grid(&input)?;
            let vocab = vocab
                .or(record_vocab)
                .unwrap_or_else(|| grid.max_token().map_or(1, |t| t as usize + 1));
            let paths = write_ppm(stem, &grid, &Palette::new(vocab, palette_seed), zoom)?;
            for p in paths {
                writeln!(out, "{}", p.display())?;
            }
        }
        Command::Bench {
            nar,
            raster,
            model_config,
            shape,
            batch_sizes,
            repetitions,
            warmup,
            cfg_scale,
            out: report_path,
        } => {
            let (nar, raster) = match (nar, raster, model_config) {
                (Some(n), Some(r), _) => (load_checkpoint(n, None)?, load_checkpoint(r, None)?),
                (_, _, Some(c)) => {
                    let config: ModelConfig = serde_json::from_str(&fs::read_to_string(c)?)?;
                    (
                        ModelParams::init(&config.with_mode(Mode::Nar), 0)?,
                        ModelParams::init(&config.with_mode(Mode::Raster), 0)?,
                    )
                }
                _ => {
                    return Err(Error::InvalidArgument(
                        "give --nar and --raster, or --model-config".into(),
                    ))
                }
            };
            let shape = shape.unwrap_or_else(|| nar.config().shape.clone());
            let mut sampling = SamplingConfig::for_shape(&shape, 0);
            if let Some(s) = cfg_scale {
                sampling.cfg_scale = s;
            }
            let report = bench(
                &nar,
                &raster,
                &shape,
                &batch_sizes,
                repetitions,
                warmup,
                &sampling,
            )?;
            let text = serde_json::to_string_pretty(&report)?;
            match report_path {
                Some(p) => fs::write(p, text + "\n")?,
                None => writeln!(out, "{text}")?,
            }
        }
        Command::Inspect { checkpoint } => {
            let params = load_checkpoint(checkpoint, None)?;
            inspect(&params, &mut out)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn generate_command(
    params: &ModelParams<f32>,
    shape: &GridShape,
    num_samples: usize,
    class: Option<usize>,
    batch_size: usize,
    sampling: &SamplingConfig,
    out_dir: &Path,
    format: Format,
    out: &mut impl Write,
) -> Result<(), Error> {
    let config = params.config();
    let classes: Vec<usize> = (0..num_samples)
        .map(|i| class.unwrap_or(i % config.num_classes))
        .collect();
    fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let batches: Vec<(usize, &[usize])> = classes.chunks(batch_size).enumerate().collect();
    let results = batches
        .par_iter()
        .map(|&(k, chunk)| {
            let s = SamplingConfig {
                seed: sampling
                    .seed
                    .wrapping_add((k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
                ..sampling.clone()
            };
            if config.mode.is_nar() {
                generate_batch(params, chunk, shape, &s)
            } else {
                generate_raster_batch(params, chunk, shape, &s)
            }
        })
        .collect::<Result<Vec<(Vec<TokenGrid>, GenerationStats)>, Error>>()?;
    for (i, grid) in results.iter().flat_map(|(g, _)| g).enumerate() {
        let stem = out_dir.join(format!("sample_{i:04}"));
        if format != Format::Json {
            save_tokens(stem.with_extension("tokens"), grid)?;
        }
        if format != Format::Tokens {
            let record = SampleRecord::new(grid, config.vocab_size, classes[i], sampling.clone());
            fs::write(
                stem.with_extension("json"),
                serde_json::to_string(&record)? + "\n",
            )?;
        }
    }
    let passes = results.first().map_or(0, |(_, s)| s.forward_passes);
    writeln!(
        out,
        "samples={num_samples} shape={shape} mode={} forward_passes={passes} wall_ms={:.1}",
        serde_json::to_value(config.mode)?.as_str().unwrap_or("?"),
        start.elapsed().as_secs_f64() * 1e3
    )?;
    Ok(())
}

fn read_grid(path: &Path) -> Result<(TokenGrid, Option<usize>), Error> {
    let bytes = fs::read(path)?;
    if bytes.first() == Some(&b'{') {
        let record: SampleRecord = serde_json::from_slice(&bytes)?;
        Ok((record.grid()?, Some(record.vocab_size)))
    } else {
        Ok((decode_tokens(&bytes)?, None))
    }
}

fn inspect(params: &ModelParams<f32>, out: &mut impl Write) -> Result<(), Error> {
    let layout = ParamLayout::new(params.config());
    writeln!(out, "{}", serde_json::to_string_pretty(params.config())?)?;
    let mut groups: Vec<(String, usize)> = Vec::new();
    for (name, shape) in &layout.entries {
        let group = name.split('.').take(2).collect::<Vec<_>>().join(".");
        let n: usize = shape.iter().product();
        match groups.last_mut() {
            Some((g, total)) if *g == group => *total += n,
            _ => groups.push((group, n)),
        }
    }
    for (group, n) in groups {
        writeln!(out, "{group:<16} {n}")?;
    }
    writeln!(out, "{:<16} {}", "total", params.num_params())?;
    Ok(())
}
