//! Command-line front end. Exit codes: 0 success, 1 check failure
//! (gradient check failed, training diverged), 2 configuration problem,
//! 3 unreadable or malformed file, 4 shape or precision mismatch.

mod heatmap;
mod pattern;

use clap::{Args, Parser, Subcommand};
use heatmap::Heatmap;
use pattern::{parse_size, synthetic_input};
use spci::attention::SpciDiagnostics;
use spci::train::{train_toy, TOY_DEFAULT_LR, TOY_DEFAULT_STEPS};
use spci::verify::{count_cost_backbone, gradcheck_spci_seeded};
use spci::{
    build_backbone, load_spci, read_backbone_config, read_spct, write_spct, Backbone,
    BackboneConfig, Error, Mode, Modes, Result, SpciAt, Tensor,
};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "spci",
    about = "Run the attention-augmented toy backbone: forwards, heatmaps, cost and gradient reports, toy training"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a forward pass and dump P3/P5 taps, diagnostics, and a summary
    Forward(ForwardArgs),
    /// Forward plus grayscale rasters of every attention map (sample 0)
    Heatmap(ForwardArgs),
    /// Closed-form parameter/MAC/FLOP report for the configured chain
    Cost(CostArgs),
    /// Check analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Train the toy classifier and dump the loss trajectory
    TrainToy(TrainToyArgs),
}

#[derive(Args)]
struct ForwardArgs {
    /// Path to an .spct tensor, or zeros | ones | checkerboard | noise
    #[arg(long, default_value = "checkerboard")]
    input: String,
    /// Synthetic input size HxW (multiples of 32); file inputs bring their own
    #[arg(long)]
    size: Option<String>,
    /// Overrides the config-file seed
    #[arg(long)]
    seed: Option<u64>,
    /// Attention weight manifest loaded into every inserted block
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Plain-text key-value backbone config
    #[arg(long)]
    backbone_config: Option<PathBuf>,
    /// Insertion sites, overriding the config file: none | p3 | p5 | p3p5
    #[arg(long)]
    spci_at: Option<String>,
    /// Disable the channel gate (identity pass-through)
    #[arg(long)]
    disable_ssg: bool,
    /// Disable the spatial gate
    #[arg(long)]
    disable_pfm: bool,
    /// Disable the full-tensor gate
    #[arg(long)]
    disable_cdm: bool,
    /// Batchnorm statistics source: eval | train
    #[arg(long, default_value = "eval")]
    bn_mode: String,
    /// Dropout behavior: eval | train
    #[arg(long, default_value = "eval")]
    dropout_mode: String,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    backbone_config: Option<PathBuf>,
    #[arg(long)]
    spci_at: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for cost.txt; stdout only when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Block width checked (C_in = C_out)
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Directory for gradcheck.txt; stdout only when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TOY_DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = TOY_DEFAULT_LR)]
    lr: f64,
    /// Directory for loss.txt; stdout only when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Malformed { .. } | Error::Truncated { .. } => 3,
        Error::ShapeMismatch { .. }
        | Error::PrecisionMismatch { .. }
        | Error::ManifestShape { .. } => 4,
        Error::TapeConsumed => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Forward(args) => cmd_forward(args, false),
        Cmd::Heatmap(args) => cmd_forward(args, true),
        Cmd::Cost(args) => cmd_cost(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::TrainToy(args) => cmd_train_toy(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn resolve_config(
    path: Option<&Path>,
    spci_at: Option<&str>,
    seed: Option<u64>,
) -> Result<BackboneConfig> {
    let mut cfg = match path {
        Some(p) => read_backbone_config(p)?,
        None => BackboneConfig::default(),
    };
    if let Some(s) = spci_at {
        cfg.spci_at = SpciAt::parse(s)
            .ok_or_else(|| Error::config(format!("spci_at {s:?}: expected none, p3, p5, p3p5")))?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn parse_mode(what: &str, text: &str) -> Result<Mode> {
    Mode::parse(text).ok_or_else(|| Error::config(format!("{what} {text:?}: expected eval or train")))
}

fn summary_line(name: &str, t: &Tensor<f32>) -> String {
    format!(
        "{name} {} min {:.6e} max {:.6e} mean {:.6e}\n",
        t.shape(),
        t.min(),
        t.max(),
        t.mean()
    )
}

fn install_weights(backbone: &mut Backbone<f32>, manifest: &Path) -> Result<()> {
    let params = load_spci::<f32>(manifest)?;
    let mut installed = false;
    for site in backbone.spci_sites_mut().into_iter().flatten() {
        if (site.c_in(), site.c_out()) != (params.c_in(), params.c_out()) {
            return Err(Error::shape(
                "install_weights",
                format!("{} -> {}", site.c_in(), site.c_out()),
                format!("{} -> {}", params.c_in(), params.c_out()),
            ));
        }
        *site = params.clone();
        installed = true;
    }
    if !installed {
        return Err(Error::config(
            "--weights given but no attention block is inserted (spci_at none)",
        ));
    }
    Ok(())
}

fn apply_disables(backbone: &mut Backbone<f32>, args: &ForwardArgs) {
    for site in backbone.spci_sites_mut().into_iter().flatten() {
        site.ssg_on &= !args.disable_ssg;
        site.pfm_on &= !args.disable_pfm;
        site.cdm_on &= !args.disable_cdm;
    }
}

/// Writes every present attention map as an SPCT dump, appends its summary
/// line, and optionally rasterizes it.
fn emit_diagnostics(
    dir: &Path,
    site: &str,
    diag: &SpciDiagnostics<f32>,
    summary: &mut String,
    rasters: bool,
) -> Result<()> {
    let maps = [
        ("w_s", diag.w_s.as_ref()),
        ("w_p", diag.w_p.as_ref()),
        ("w_c", diag.w_c.as_ref()),
    ];
    for (name, tensor) in maps {
        let Some(tensor) = tensor else { continue };
        write_spct(&dir.join(format!("{site}.{name}.spct")), tensor)?;
        summary.push_str(&summary_line(&format!("{site}.{name}"), tensor));
        if !rasters {
            continue;
        }
        match name {
            "w_s" => {
                let map = Heatmap::from_channel_strip(tensor, 0);
                std::fs::write(dir.join(format!("{site}.w_s.pgm")), map.to_pgm())?;
            }
            "w_p" => {
                let map = Heatmap::from_spatial_plane(tensor, 0);
                std::fs::write(dir.join(format!("{site}.w_p.pgm")), map.to_pgm())?;
            }
            _ => {
                for c in 0..tensor.shape().c {
                    let map = Heatmap::from_channel_plane(tensor, 0, c);
                    std::fs::write(dir.join(format!("{site}.w_c.c{c:03}.pgm")), map.to_pgm())?;
                }
            }
        }
    }
    Ok(())
}

fn cmd_forward(args: ForwardArgs, rasters: bool) -> Result<u8> {
    let mut cfg = resolve_config(
        args.backbone_config.as_deref(),
        args.spci_at.as_deref(),
        args.seed,
    )?;
    let is_pattern = pattern::PATTERN_NAMES.contains(&args.input.as_str());
    let input: Tensor<f32> = if is_pattern {
        if let Some(size) = &args.size {
            let (h, w) = parse_size(size)?;
            cfg.input_h = h;
            cfg.input_w = w;
        }
        synthetic_input(
            &args.input,
            cfg.in_channels,
            cfg.input_h,
            cfg.input_w,
            cfg.seed,
        )?
    } else {
        if args.size.is_some() {
            return Err(Error::config(
                "--size applies to synthetic inputs only; the file brings its own shape",
            ));
        }
        let t = read_spct(Path::new(&args.input))?;
        cfg.input_h = t.shape().h;
        cfg.input_w = t.shape().w;
        t
    };
    let mut backbone = build_backbone::<f32>(cfg.clone())?;
    if let Some(manifest) = &args.weights {
        install_weights(&mut backbone, manifest)?;
    }
    apply_disables(&mut backbone, &args);
    let modes = Modes {
        bn: parse_mode("bn-mode", &args.bn_mode)?,
        dropout: parse_mode("dropout-mode", &args.dropout_mode)?,
    };
    let taps = backbone.forward_with_taps_train(&input, modes, cfg.seed)?;
    std::fs::create_dir_all(&args.out)?;
    let mut summary = String::new();
    summary.push_str(&summary_line("input", &input));
    write_spct(&args.out.join("p3.spct"), &taps.p3)?;
    summary.push_str(&summary_line("p3", &taps.p3));
    write_spct(&args.out.join("p5.spct"), &taps.p5)?;
    summary.push_str(&summary_line("p5", &taps.p5));
    if let Some(diag) = &taps.p3_diag {
        emit_diagnostics(&args.out, "p3", diag, &mut summary, rasters)?;
    }
    if let Some(diag) = &taps.p5_diag {
        emit_diagnostics(&args.out, "p5", diag, &mut summary, rasters)?;
    }
    std::fs::write(args.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(0)
}

fn cmd_cost(args: CostArgs) -> Result<u8> {
    let cfg = resolve_config(
        args.backbone_config.as_deref(),
        args.spci_at.as_deref(),
        args.seed,
    )?;
    let backbone = build_backbone::<f32>(cfg)?;
    let text = count_cost_backbone(&backbone).to_text();
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("cost.txt"), &text)?;
    }
    print!("{text}");
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<u8> {
    let report = gradcheck_spci_seeded(args.channels, args.seed, args.step, args.tolerance)?;
    let text = report.to_text();
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("gradcheck.txt"), &text)?;
    }
    print!("{text}");
    if report.passed() {
        Ok(0)
    } else {
        eprintln!(
            "gradient check failed: max relative error {:e} at tolerance {:e}",
            report.max_rel_err(),
            report.tolerance
        );
        Ok(1)
    }
}

fn cmd_train_toy(args: TrainToyArgs) -> Result<u8> {
    let result = train_toy(args.seed, args.steps, args.lr)?;
    let text = result.to_text();
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("loss.txt"), &text)?;
    }
    let mut tail = String::new();
    writeln!(tail, "initial_loss {:.9e}", result.initial()).unwrap();
    writeln!(tail, "final_loss {:.9e}", result.last()).unwrap();
    writeln!(
        tail,
        "reduction {:.4}",
        1.0 - (result.last() / result.initial()) as f64
    )
    .unwrap();
    print!("{text}{tail}");
    if result.diverged {
        eprintln!("training diverged: loss exceeded 10x its initial value");
        return Ok(1);
    }
    Ok(0)
}
