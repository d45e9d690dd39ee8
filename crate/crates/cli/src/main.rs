//! Single executable exposing the pipeline end to end: phantom data
//! generation, sketch extraction, scale planning, per-scale training,
//! cascade inference, metrics, and the analytic memory model.
//!
//! Every run is deterministic given `--seed` (and a fixed `--threads`).
//! Exit codes: 0 success, 2 validation error, 3 runtime error.

mod manifest;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxgan::memory::{estimate_memory, ArchId, MemoryReport};
use voxgan::metrics::{mae, mse, psnr, ssim3d, SSIM_K1, SSIM_K2};
use voxgan::phantom::{gen_phantom, Domain, Lesion, PhantomSpec};
use voxgan::plan::{patch_grid, PatchJob, ScalePlan};
use voxgan::sketch::{canny3d, overlay_labels, LabelTransform};
use voxgan::train::{
    infer_cascade, prepare_scale_dataset, sketch_pyramid, train_scale, AblationFlags,
    CannyParams, TrainConfig, TrainedCascade,
};
use voxgan::volume::{load_volume, save_volume};
use voxgan::{Error as VoxError, Volume3};

use manifest::{Manifest, ManifestItem};

#[derive(Parser)]
#[command(name = "voxgan", version, about = "Memory-efficient multi-scale patch-based GANs for 3D volumes")]
struct Cli {
    /// Base RNG seed; equal seeds reproduce output files bit for bit.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker thread cap (0 = all cores). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate procedural phantom volumes with lesion masks and a manifest.
    Phantom(PhantomArgs),
    /// Extract a gradient-weighted edge sketch from a volume.
    Sketch(SketchArgs),
    /// Print the scale ladder and patch grids as JSON.
    Plan(PlanArgs),
    /// Train one scale on a phantom manifest.
    Train(TrainArgs),
    /// Run the full cascade on a source volume.
    Infer(InferArgs),
    /// SSIM / MAE / MSE / PSNR between two volumes, as one CSV row.
    Metrics(MetricsArgs),
    /// Analytic training-memory estimate for one architecture and size.
    EstimateMem(EstimateMemArgs),
    /// Memory estimates across sizes, as CSV and a log-scale SVG chart.
    PlotMem(PlotMemArgs),
    /// Finite-difference gradient checks for all ops and full networks.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DomainArg {
    Smooth,
    Noisy,
    Both,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    side: usize,
    #[arg(long, default_value_t = 4)]
    blobs: usize,
    #[arg(long, value_enum, default_value_t = DomainArg::Both)]
    domain: DomainArg,
    /// Probability that a phantom carries a lesion ball (and a mask).
    #[arg(long, default_value_t = 0.5)]
    lesion_prob: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TransformArg {
    Identity,
    MirrorY,
    Shrink,
    Zoom,
}

impl TransformArg {
    fn to_label_transform(self) -> LabelTransform {
        match self {
            TransformArg::Identity => LabelTransform::Identity,
            TransformArg::MirrorY => LabelTransform::MirrorY,
            TransformArg::Shrink => LabelTransform::Scale(0.85),
            TransformArg::Zoom => LabelTransform::Scale(1.15),
        }
    }
}

#[derive(Args)]
struct SketchArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.7)]
    lo: f64,
    #[arg(long, default_value_t = 0.9)]
    hi: f64,
    /// Binary label mask overlaid at intensity 1.0.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TransformArg::Identity)]
    label_transform: TransformArg,
}

#[derive(Args)]
struct PlanArgs {
    /// Original volume shape as z,y,x.
    #[arg(long, value_parser = parse_shape)]
    shape: [usize; 3],
    #[arg(long, default_value_t = 64)]
    lr: usize,
    #[arg(long, default_value_t = 32)]
    patch: usize,
    #[arg(long, default_value_t = 4)]
    margin: usize,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest JSON produced by `phantom`.
    #[arg(long)]
    data: PathBuf,
    /// Train on items of this domain only.
    #[arg(long, value_enum, default_value_t = DomainArg::Smooth)]
    domain: DomainArg,
    #[arg(long)]
    scale: usize,
    #[arg(long, default_value_t = 64)]
    lr_side: usize,
    #[arg(long, default_value_t = 32)]
    patch_side: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    patches_per_volume: usize,
    #[arg(long, default_value_t = 100.0)]
    lambda_l1: f64,
    /// Ablation: train without the edge-sketch channel.
    #[arg(long)]
    no_edges: bool,
    /// Ablation: train without the previous-scale channel.
    #[arg(long)]
    no_prev_scale: bool,
    #[arg(long, default_value_t = 16)]
    lr_channels: usize,
    #[arg(long, default_value_t = 32)]
    hr_channels: usize,
    #[arg(long, default_value_t = 6)]
    hr_blocks: usize,
    #[arg(long, default_value_t = 16)]
    disc_channels: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.7)]
    lo: f64,
    #[arg(long, default_value_t = 0.9)]
    hi: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Directory holding g_scale0.ckpt .. g_scale{n}.ckpt.
    #[arg(long)]
    ckpt_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    lr_side: usize,
    #[arg(long, default_value_t = 32)]
    patch_side: usize,
    #[arg(long, default_value_t = 4)]
    margin: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.7)]
    lo: f64,
    #[arg(long, default_value_t = 0.9)]
    hi: f64,
    /// Ablation: zero the edge-sketch channel at inference.
    #[arg(long)]
    no_edges: bool,
    /// Ablation: zero the previous-scale channel at inference.
    #[arg(long)]
    no_prev_scale: bool,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 7)]
    window: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateMemArgs {
    #[arg(long)]
    arch: String,
    #[arg(long)]
    side: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotMemArgs {
    #[arg(long, default_value = "dcgan3d,pix2pix3d,pggan3d,lr64,hr32")]
    archs: String,
    #[arg(long, default_value = "32,64,128,256,512")]
    sides: String,
    #[arg(long)]
    out_svg: PathBuf,
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

/// Errors carrying the process exit code.
enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<VoxError> for CliError {
    fn from(e: VoxError) -> Self {
        match &e {
            VoxError::Invalid(_) | VoxError::Format { .. } | VoxError::Degenerate(_) => {
                CliError::Validation(e.to_string())
            }
            VoxError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("--shape needs z,y,x, got {s:?}"));
    }
    let mut out = [0usize; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p
            .trim()
            .parse()
            .map_err(|_| format!("bad shape component {p:?}"))?;
    }
    Ok(out)
}

fn load_volume_cli(path: &Path) -> CliResult<Volume3> {
    Ok(load_volume(path)?)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Runtime(format!("creating {}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // Ignore the error if a pool already exists (tests share a process).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::Phantom(args) => cmd_phantom(cli.seed, args),
        Cmd::Sketch(args) => cmd_sketch(args),
        Cmd::Plan(args) => cmd_plan(args),
        Cmd::Train(args) => cmd_train(cli.seed, args),
        Cmd::Infer(args) => cmd_infer(args),
        Cmd::Metrics(args) => cmd_metrics(args),
        Cmd::EstimateMem(args) => cmd_estimate_mem(args),
        Cmd::PlotMem(args) => cmd_plot_mem(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn cmd_phantom(seed: u64, args: PhantomArgs) -> CliResult<()> {
    if args.count == 0 {
        return Err(validation("--count must be positive"));
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", args.out.display())))?;
    let mut lesion_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1e51_0a5e);
    let mut items = Vec::new();
    for idx in 0..args.count {
        let item_seed = seed.wrapping_add(idx as u64);
        let lesion = if lesion_rng.gen::<f64>() < args.lesion_prob {
            let radius = 4.0 + 4.0 * lesion_rng.gen::<f64>();
            let lo = radius.ceil() as usize + 2;
            let hi = args.side - lo;
            Some(Lesion {
                radius,
                center: [
                    lesion_rng.gen_range(lo..hi),
                    lesion_rng.gen_range(lo..hi),
                    lesion_rng.gen_range(lo..hi),
                ],
            })
        } else {
            None
        };
        let domains: &[Domain] = match args.domain {
            DomainArg::Smooth => &[Domain::Smooth],
            DomainArg::Noisy => &[Domain::Noisy],
            DomainArg::Both => &[Domain::Smooth, Domain::Noisy],
        };
        let mut mask_file = None;
        for &domain in domains {
            let spec = PhantomSpec {
                seed: item_seed,
                side: args.side,
                n_blobs: args.blobs,
                domain,
                lesion,
            };
            let (volume, mask) = gen_phantom(&spec)?;
            let prefix = match domain {
                Domain::Smooth => "smooth",
                Domain::Noisy => "noisy",
            };
            let vol_name = format!("{prefix}_{idx:03}.vol");
            save_volume(&volume, args.out.join(&vol_name))?;
            if lesion.is_some() && mask_file.is_none() {
                let name = format!("mask_{idx:03}.vol");
                save_volume(&mask, args.out.join(&name))?;
                mask_file = Some(name);
            }
            items.push(ManifestItem {
                seed: item_seed,
                domain: prefix.to_string(),
                volume: vol_name,
                mask: mask_file.clone(),
            });
        }
    }
    let manifest = Manifest {
        side: args.side,
        items,
    };
    write_text(
        &args.out.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serialization"),
    )?;
    println!("wrote {} items to {}", manifest.items.len(), args.out.display());
    Ok(())
}

fn cmd_sketch(args: SketchArgs) -> CliResult<()> {
    let volume = load_volume_cli(&args.input)?;
    let mut sketch = canny3d(&volume, args.sigma, args.lo, args.hi)?;
    if let Some(mask_path) = &args.mask {
        let mask = load_volume_cli(mask_path)?;
        sketch = overlay_labels(&sketch, &mask, args.label_transform.to_label_transform())?;
    }
    save_volume(&sketch.volume, &args.out)?;
    println!(
        "sketch {} ({} edge voxels)",
        args.out.display(),
        sketch.volume.voxels().iter().filter(|&&v| v > 0.0).count()
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct PlanJson {
    original_shape: [usize; 3],
    lr_side: usize,
    patch_side: usize,
    lr_sketch_side: usize,
    n_scales: usize,
    margin: usize,
    working_shapes: Vec<[usize; 3]>,
    scales: Vec<PlanScaleJson>,
}

#[derive(serde::Serialize)]
struct PlanScaleJson {
    scale: usize,
    n_jobs: usize,
    jobs: Vec<PatchJob>,
}

fn cmd_plan(args: PlanArgs) -> CliResult<()> {
    let plan = ScalePlan::new(args.shape, args.lr, args.patch)?;
    let mut scales = Vec::new();
    for scale in 1..=plan.n_scales() {
        let jobs = patch_grid(&plan, scale, args.margin)?;
        scales.push(PlanScaleJson {
            scale,
            n_jobs: jobs.len(),
            jobs,
        });
    }
    let json = PlanJson {
        original_shape: plan.original_shape(),
        lr_side: plan.lr_side(),
        patch_side: plan.patch_side(),
        lr_sketch_side: plan.lr_sketch_side(),
        n_scales: plan.n_scales(),
        margin: args.margin,
        working_shapes: (0..=plan.n_scales()).map(|i| plan.working_shape(i)).collect(),
        scales,
    };
    let text = serde_json::to_string_pretty(&json).expect("plan serialization");
    match &args.out {
        Some(path) => write_text(path, &text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn load_manifest_volumes(
    manifest_path: &Path,
    domain: DomainArg,
) -> CliResult<Vec<(Volume3, Option<Volume3>)>> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| {
        validation(format!("reading manifest {}: {e}", manifest_path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| validation(format!("bad manifest {}: {e}", manifest_path.display())))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let want = |d: &str| match domain {
        DomainArg::Smooth => d == "smooth",
        DomainArg::Noisy => d == "noisy",
        DomainArg::Both => true,
    };
    let mut out = Vec::new();
    for item in manifest.items.iter().filter(|i| want(&i.domain)) {
        let vol = load_volume_cli(&dir.join(&item.volume))?;
        let mask = match &item.mask {
            Some(m) => Some(load_volume_cli(&dir.join(m))?),
            None => None,
        };
        out.push((vol, mask));
    }
    if out.is_empty() {
        return Err(validation(format!(
            "manifest {} has no items for the requested domain",
            manifest_path.display()
        )));
    }
    Ok(out)
}

fn cmd_train(seed: u64, args: TrainArgs) -> CliResult<()> {
    let items = load_manifest_volumes(&args.data, args.domain)?;
    let shape = items[0].0.shape();
    for (v, _) in &items {
        if v.shape() != shape {
            return Err(validation("training volumes must share one shape"));
        }
    }
    let plan = ScalePlan::new(shape, args.lr_side, args.patch_side)?;
    let canny = CannyParams {
        sigma: args.sigma,
        lo_pct: args.lo,
        hi_pct: args.hi,
    };
    let dataset = prepare_scale_dataset(&items, &plan, args.scale, &canny)?;
    let mut cfg = TrainConfig::new(args.scale, seed);
    cfg.epochs = args.epochs;
    cfg.patches_per_volume = args.patches_per_volume;
    cfg.lambda_l1 = args.lambda_l1;
    cfg.use_edges = !args.no_edges;
    cfg.use_prev_scale = !args.no_prev_scale;
    cfg.lr_base_channels = args.lr_channels;
    cfg.hr_channels = args.hr_channels;
    cfg.hr_res_blocks = args.hr_blocks;
    cfg.disc_base_channels = args.disc_channels;
    let trained = train_scale(&dataset, &plan, &cfg, &args.out)?;
    let last = trained.log.last().expect("at least one step");
    println!(
        "scale {} done: {} steps, loss_d {:.4}, loss_g_adv {:.4}, loss_g_l1 {:.4} -> {}",
        args.scale,
        trained.log.len(),
        last.loss_d,
        last.loss_g_adv,
        last.loss_g_l1,
        trained.ckpt_path.display()
    );
    Ok(())
}

fn cmd_infer(args: InferArgs) -> CliResult<()> {
    let volume = load_volume_cli(&args.input)?;
    let mask = match &args.mask {
        Some(p) => Some(load_volume_cli(p)?),
        None => None,
    };
    let plan = ScalePlan::new(volume.shape(), args.lr_side, args.patch_side)?;
    let canny = CannyParams {
        sigma: args.sigma,
        lo_pct: args.lo,
        hi_pct: args.hi,
    };
    let pyramid = sketch_pyramid(&volume, mask.as_ref(), &plan, &canny)?;
    let cascade = TrainedCascade::load(&args.ckpt_dir, plan.n_scales())?;
    let flags = AblationFlags {
        use_edges: !args.no_edges,
        use_prev_scale: !args.no_prev_scale,
    };
    let outputs = infer_cascade(&cascade, &pyramid, &plan, args.margin, flags)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", args.out.display())))?;
    for (i, v) in outputs.iter().enumerate() {
        save_volume(v, args.out.join(format!("scale{i}.vol")))?;
    }
    save_volume(outputs.last().unwrap(), args.out.join("output.vol"))?;
    println!(
        "cascade wrote {} scales to {}",
        outputs.len(),
        args.out.display()
    );
    Ok(())
}

fn format_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.9e}")
    }
}

fn cmd_metrics(args: MetricsArgs) -> CliResult<()> {
    let a = load_volume_cli(&args.a)?;
    let b = load_volume_cli(&args.b)?;
    let ssim = ssim3d(&a, &b, args.window, SSIM_K1, SSIM_K2)?;
    let mae_v = mae(&a, &b)?;
    let mse_v = mse(&a, &b)?;
    let psnr_v = psnr(&a, &b)?;
    let text = format!(
        "ssim,mae,mse,psnr\n{},{},{},{}\n",
        format_metric(ssim),
        format_metric(mae_v),
        format_metric(mse_v),
        format_metric(psnr_v)
    );
    print!("{text}");
    if let Some(path) = &args.out {
        write_text(path, &text)?;
    }
    Ok(())
}

fn cmd_estimate_mem(args: EstimateMemArgs) -> CliResult<()> {
    let arch: ArchId = args.arch.parse()?;
    let report = estimate_memory(arch, args.side)?;
    let text = format!("{}\n{}\n", MemoryReport::csv_header(), report.csv_row());
    print!("{text}");
    if let Some(path) = &args.out {
        write_text(path, &text)?;
    }
    Ok(())
}

fn cmd_plot_mem(args: PlotMemArgs) -> CliResult<()> {
    let mut archs = Vec::new();
    for a in args.archs.split(',') {
        archs.push(a.trim().parse::<ArchId>()?);
    }
    let mut sides = Vec::new();
    for s in args.sides.split(',') {
        sides.push(
            s.trim()
                .parse::<usize>()
                .map_err(|_| validation(format!("bad side {s:?}")))?,
        );
    }
    let mut rows = Vec::new();
    for &arch in &archs {
        for &side in &sides {
            match estimate_memory(arch, side) {
                Ok(r) => rows.push(r),
                // Sizes below an architecture's minimum are simply absent
                // from the chart.
                Err(VoxError::Invalid(_)) => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
    if rows.is_empty() {
        return Err(validation("no valid (arch, side) combinations"));
    }
    let mut csv = String::from(MemoryReport::csv_header());
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    if let Some(path) = &args.out_csv {
        write_text(path, &csv)?;
    }
    write_text(&args.out_svg, &svg::memory_chart(&rows))?;
    println!("plotted {} points to {}", rows.len(), args.out_svg.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult<()> {
    use voxgan::nn::gradcheck::{network_suite, op_suite};
    let mut all_ok = true;
    for seed in 0..args.seeds {
        for report in op_suite(seed).into_iter().chain(network_suite(seed)) {
            let ok = report.max_rel_err < 1e-4 && report.evaluated > 0;
            all_ok &= ok;
            println!(
                "{:<24} seed {} rel_err {:.3e} ({} checked, {} kink-skipped) {}",
                report.name,
                seed,
                report.max_rel_err,
                report.evaluated,
                report.skipped,
                if ok { "ok" } else { "FAIL" }
            );
        }
    }
    if all_ok {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient checks failed".into()))
    }
}
