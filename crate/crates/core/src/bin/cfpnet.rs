use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cfpnet::config::{KeyValues, NetworkConfig, TrainConfig};
use cfpnet::data::{
    generate_sample, load_checkpoint, read_kitti_disp_png, read_pfm, read_rgb_png, save_checkpoint,
    write_disparity_visualization, write_kitti_disp_png, write_pfm, write_rgb_png, Pfm, SyntheticSpec,
};
use cfpnet::gradcheck::suite::{
    network_check_config, network_check_passed, network_gradcheck, primitive_suite, PRIMITIVE_TOLERANCE,
};
use cfpnet::objective::MetricReport;
use cfpnet::train::{from_checkpoint, stream_sample, to_checkpoint, train, TrainState};
use cfpnet::{Error, Network, Result, Tensor};

#[derive(Parser)]
#[command(name = "cfpnet", version, about = "Cross-form pyramid stereo network: training, inference and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the seeded synthetic stream described by a config file.
    Train {
        /// `key = value` file with network and training keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Resume from this checkpoint instead of a config.
        #[arg(long, conflicts_with = "config")]
        checkpoint: Option<PathBuf>,
        /// Output directory for checkpoints and `loss.tsv`.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict disparity for a rectified PNG pair.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// Output PFM; a grayscale PNG is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted disparity map with ground truth (PFM or KITTI PNG).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Optional PNG whose nonzero pixels mark foreground.
        #[arg(long)]
        fg: Option<PathBuf>,
    },
    /// Run the primitive and end-to-end gradient checks.
    Gradcheck {
        /// Elements sampled per parameter tensor in the network checks.
        #[arg(long)]
        max_elements: Option<usize>,
    },
    /// Print the parameter report of a configuration.
    Summary {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write synthetic stereo samples to a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        d_max: usize,
    },
}

fn read_config(path: Option<&Path>) -> Result<(NetworkConfig, TrainConfig)> {
    let mut kv = match path {
        Some(p) => KeyValues::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => KeyValues::default(),
    };
    let net = NetworkConfig::take_from(&mut kv)?;
    let train = TrainConfig::take_from(&mut kv)?;
    kv.reject_unknown()?;
    Ok((net, train))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn run_train(config: Option<&Path>, checkpoint: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let (net, mut cfg, mut state) = match checkpoint {
        Some(p) => from_checkpoint(&load_checkpoint(p)?)?,
        None => {
            let (net_cfg, cfg) = read_config(config)?;
            let net = Network::new(net_cfg)?;
            let state = TrainState::new(&net, &cfg);
            (net, cfg, state)
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
        if checkpoint.is_none() {
            state = TrainState::new(&net, &cfg);
        }
    }
    create_dir(out)?;
    let log_path = out.join("loss.tsv");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let d_max = net.config().d_max;
    train(
        &net,
        &cfg,
        &mut state,
        |i| stream_sample(&cfg, d_max, i),
        |st, loss| {
            if cfg.log_every > 0 && st.step % cfg.log_every as u64 == 0 {
                writeln!(log, "{}\t{loss}", st.step).map_err(|e| Error::io(&log_path, e))?;
            }
            if cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every as u64 == 0 {
                save_checkpoint(out.join(format!("step_{:06}.ckpt", st.step)), &to_checkpoint(&net, &cfg, st))?;
            }
            Ok(())
        },
    )?;
    save_checkpoint(out.join("final.ckpt"), &to_checkpoint(&net, &cfg, &state))?;
    println!("trained {} steps, checkpoint {}", state.step, out.join("final.ckpt").display());
    Ok(())
}

fn run_infer(checkpoint: &Path, left: &Path, right: &Path, out: &Path) -> Result<()> {
    let (net, _, state) = from_checkpoint(&load_checkpoint(checkpoint)?)?;
    let l = read_rgb_png(left)?;
    let r = read_rgb_png(right)?;
    let shape = [1, 3, l.shape()[1], l.shape()[2]];
    let map = net.predict(&state.model, &l.reshape(shape)?, &r.reshape(shape.to_vec())?)?;
    let (h, w) = (shape[2], shape[3]);
    let disp = map.disparity.reshape(vec![h, w])?;
    write_pfm(out, &Pfm::gray(w, h, disp.data().to_vec(), true))?;
    let vis = out.with_extension("png");
    write_disparity_visualization(&vis, &disp, map.d_max)?;
    println!("wrote {} and {}", out.display(), vis.display());
    Ok(())
}

/// Disparities and validity: PFM pixels are valid when finite, KITTI PNG
/// pixels when nonzero.
fn read_disparity(path: &Path) -> Result<(Tensor<f32>, Vec<bool>)> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "pfm" => {
            let p = read_pfm(path)?;
            if p.channels != 1 {
                return Err(Error::invalid("eval", format!("{} has {} channels", path.display(), p.channels)));
            }
            let valid = p.data.iter().map(|v| v.is_finite()).collect();
            Ok((Tensor::new(vec![p.height, p.width], p.data)?, valid))
        }
        "png" => read_kitti_disp_png(path),
        _ => Err(Error::invalid("eval", format!("{}: expected .pfm or .png", path.display()))),
    }
}

fn run_eval(pred: &Path, gt: &Path, fg: Option<&Path>) -> Result<()> {
    let (p, _) = read_disparity(pred)?;
    let (g, valid) = read_disparity(gt)?;
    if p.shape() != g.shape() {
        return Err(Error::shape("eval", format!("prediction {:?} vs ground truth {:?}", p.shape(), g.shape())));
    }
    let fg_mask = fg
        .map(|f| -> Result<Vec<bool>> {
            let m = read_rgb_png(f)?;
            if m.shape()[1..] != *g.shape() {
                return Err(Error::shape("eval", format!("foreground mask {:?}", m.shape())));
            }
            Ok(m.data()[..g.numel()].iter().map(|&v| v > 0.0).collect())
        })
        .transpose()?;
    println!("{}", MetricReport::evaluate(p.data(), g.data(), &valid, fg_mask.as_deref())?);
    Ok(())
}

fn run_gradcheck(max_elements: Option<usize>) -> Result<bool> {
    let mut ok = true;
    for (name, r) in primitive_suite()? {
        let pass = r.passed(PRIMITIVE_TOLERANCE);
        ok &= pass;
        println!("{} {name} max_rel_error = {:.3e}", if pass { "PASS" } else { "FAIL" }, r.max_error());
    }
    for bn in [false, true] {
        let r = network_gradcheck(&network_check_config(bn), max_elements)?;
        let pass = network_check_passed(&r, bn);
        ok &= pass;
        println!(
            "{} network batchnorm={bn} max_rel_error = {:.3e} checked = {} skipped = {}",
            if pass { "PASS" } else { "FAIL" },
            r.max_error(),
            r.checked(),
            r.skipped()
        );
    }
    Ok(ok)
}

fn run_gen_data(out: &Path, count: u64, seed: u64, width: usize, height: usize, d_max: usize) -> Result<()> {
    for i in 0..count {
        let dir = out.join(format!("{i:04}"));
        create_dir(&dir)?;
        let spec = SyntheticSpec::random(width, height, d_max, seed.wrapping_add(i));
        let s = generate_sample(&spec)?;
        write_rgb_png(dir.join("left.png"), &s.left)?;
        write_rgb_png(dir.join("right.png"), &s.right)?;
        let pfm: Vec<f32> = s
            .gt
            .data()
            .iter()
            .zip(&s.valid)
            .map(|(&d, &v)| if v { d } else { f32::INFINITY })
            .collect();
        write_pfm(dir.join("disp.pfm"), &Pfm::gray(width, height, pfm, true))?;
        write_kitti_disp_png(dir.join("disp.png"), &s.gt, Some(&s.valid))?;
    }
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            checkpoint,
            out,
            seed,
        } => run_train(config.as_deref(), checkpoint.as_deref(), &out, seed)?,
        Command::Infer {
            checkpoint,
            left,
            right,
            out,
        } => run_infer(&checkpoint, &left, &right, &out)?,
        Command::Eval { pred, gt, fg } => run_eval(&pred, &gt, fg.as_deref())?,
        Command::Gradcheck { max_elements } => return run_gradcheck(max_elements),
        Command::Summary { config } => {
            let (net_cfg, _) = read_config(config.as_deref())?;
            println!("{}", Network::new(net_cfg)?.summary());
        }
        Command::GenData {
            out,
            count,
            seed,
            width,
            height,
            d_max,
        } => run_gen_data(&out, count, seed, width, height, d_max)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
