use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use trisoup::cli;

#[derive(Parser)]
#[command(name = "trisoup", version, about = "Train and render opaque textured triangle soups")]
struct Args {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "TRISOUP_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a scene from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a scene from every camera of a camera file.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, requires = "height")]
        width: Option<usize>,
        #[arg(long, requires = "width")]
        height: Option<usize>,
    },
    /// Generate a synthetic dataset with a ground-truth scene.
    MakeSynthetic {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// PSNR, SSIM and MAE of a scene against a dataset split.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Quantize textures into two RGBA atlases plus geometry.
    Pack {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(args: Args) -> anyhow::Result<()> {
    #[cfg(feature = "parallel")]
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = args.threads;
    match args.command {
        Command::Train { config, seed } => {
            let r = cli::cmd_train(&config, seed)?;
            println!(
                "held-out psnr {:.3} dB, ssim {:.4}, {} triangles, {:.1} s",
                r.psnr, r.ssim, r.n_triangles, r.wall_seconds
            );
        }
        Command::Render { scene, cameras, out, width, height } => {
            let size = width.zip(height);
            let files = cli::cmd_render(&scene, &cameras, &out, size)?;
            println!("wrote {} images to {}", files.len(), out.display());
        }
        Command::MakeSynthetic { spec, out, seed } => {
            let mut s = cli::SyntheticSpec::load(&spec)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            cli::make_synthetic(&s, &out)?;
            println!("wrote synthetic dataset to {}", out.display());
        }
        Command::Eval { scene, data, split } => {
            println!("{}", cli::cmd_eval(&scene, &data, &split)?);
        }
        Command::Pack { scene, out } => {
            let m = cli::cmd_pack(&scene, &out)?;
            println!("packed {} triangles into {}x{} atlases", m.n_triangles, m.atlas_width, m.atlas_height);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
