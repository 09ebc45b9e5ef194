use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ipnp::manifest::{ClassStatus, ScanManifest};
use ipnp::metrics::{evaluate_scan, metrics_csv, metrics_table, HdMissingPolicy};
use ipnp::nifti::{self, GridRef};
use ipnp::pipeline::{
    phantom_dataset, run_pipeline, simulate_partial_labels, OracleKind, PipelineConfig,
};
use ipnp::prompting::{make_box_prompts, BoxPromptPair, DEFAULT_PADDING};
use ipnp::refinement::{
    refine_pseudo_label, AcceptedEntropy, GateDecision, OrganRefinementState, RefinementConfig,
    DEFAULT_DELTA_ROI, DEFAULT_TAU_CLS,
};
use ipnp::vls::{vls_mask, SupervisionTarget};
use ipnp::volgrid::class_mask;

#[derive(Parser)]
#[command(
    name = "ipnp",
    version,
    about = "Box-prompted pseudo-labeling for partially labeled 3D segmentation"
)]
struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom suite (train/ and test/ with images and ground truth).
    PhantomGen(PhantomGen),
    /// Keep a random subset of organs from a ground-truth label map.
    SimulatePartial(SimulatePartial),
    /// Axial and sagittal box prompts for one class of a predicted label map.
    Prompt(Prompt),
    /// Threshold, ROI and entropy-gate filtering of a generalist candidate.
    Refine(Refine),
    /// Voxel-level selection mask for a prediction and a supervision target.
    VlsMask(VlsMask),
    /// Per-class DSC and HD95 of a prediction against ground truth.
    Metrics(MetricsCmd),
    /// Full pipeline: initial training, then rounds of pseudo-labeling and re-training.
    Run(Run),
}

/// Settings shared by the pipeline-driven commands; flags override the config file.
#[derive(Args)]
struct Overrides {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    keep_fraction: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    gate_from_round: Option<usize>,
    /// phantom or file.
    #[arg(long)]
    oracle: Option<OracleKind>,
    /// Extra key=value settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::read(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(f) = self.keep_fraction {
            cfg.keep_fraction = f;
        }
        if let Some(r) = self.rounds {
            cfg.rounds = r;
        }
        if let Some(g) = self.gate_from_round {
            cfg.entropy_gate_from_round = Some(g);
        }
        if let Some(o) = self.oracle {
            cfg.oracle = o;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set {kv:?} is not key=value"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct PhantomGen {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulatePartial {
    /// Ground-truth label map.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    keep_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to the file stem of --gt.
    #[arg(long)]
    scan_id: Option<String>,
    /// Number of classes including background; defaults to the largest label + 1.
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    out_labels: PathBuf,
    #[arg(long)]
    out_manifest: PathBuf,
}

#[derive(Args)]
struct Prompt {
    /// Predicted label map.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    class: u8,
    #[arg(long, default_value_t = DEFAULT_PADDING)]
    padding: usize,
    /// Write the prompt file here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Refine {
    /// Binary candidate mask.
    #[arg(long)]
    candidate: PathBuf,
    /// Two-channel probability field that came with the candidate.
    #[arg(long)]
    probs: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    /// Channel of the organ in --probs.
    #[arg(long, default_value_t = 1)]
    channel: usize,
    #[arg(long, default_value_t = DEFAULT_TAU_CLS)]
    tau_cls: f32,
    #[arg(long, default_value_t = DEFAULT_DELTA_ROI)]
    delta_roi: usize,
    /// Mean entropy of the last accepted pseudo-label; enables the gate.
    #[arg(long)]
    previous_entropy: Option<f64>,
    /// Written only when the candidate is accepted.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VlsMask {
    /// Class probabilities of the current model.
    #[arg(long)]
    pred: PathBuf,
    /// Supervision label map.
    #[arg(long)]
    target: PathBuf,
    /// Comma-separated pseudo-labeled classes.
    #[arg(long, value_delimiter = ',')]
    pseudo: Vec<u8>,
    /// Manifest whose `pseudo` classes are added to --pseudo.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsCmd {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Class names for the table.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// exclude or max_diag.
    #[arg(long, default_value = "exclude")]
    hd_policy: HdMissingPolicy,
    /// Also write `class,dsc,hd95` rows here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct Run {
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory for reports and NIfTI files.
    #[arg(long)]
    out: PathBuf,
    /// Scan directory for the file oracle.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Exchange directory for the file oracle.
    #[arg(long, env = "IPNP_EXCHANGE_DIR")]
    exchange_dir: Option<PathBuf>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn phantom_gen(cmd: PhantomGen) -> Result<()> {
    let mut cfg = cmd.overrides.load()?;
    cfg.oracle = OracleKind::Phantom;
    let data = phantom_dataset(&cfg)?;
    for (split, scans) in [("train", &data.train), ("test", &data.test)] {
        let dir = cmd.out.join(split);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for s in scans {
            let truth = s.truth.as_ref().expect("phantom scans carry truth");
            let spacing = s.image.spacing();
            nifti::write(
                dir.join(format!("{}.img.nii", s.id)),
                GridRef::Volume(&s.image),
                spacing,
            )?;
            nifti::write(
                dir.join(format!("{}.gt.nii", s.id)),
                GridRef::Labels(truth),
                spacing,
            )?;
        }
    }
    println!(
        "wrote {} training and {} test scans to {}",
        data.train.len(),
        data.test.len(),
        cmd.out.display()
    );
    Ok(())
}

fn simulate_partial(cmd: SimulatePartial) -> Result<()> {
    let mut gt = nifti::read(&cmd.gt)?.into_labels()?;
    if let Some(c) = cmd.num_classes {
        gt = gt.with_num_classes(c)?;
    }
    let id = match cmd.scan_id {
        Some(id) => id,
        None => cmd
            .gt
            .file_name()
            .and_then(|n| n.to_str())
            .map(|n| n.split('.').next().unwrap_or(n).to_string())
            .context("cannot derive a scan id from --gt")?,
    };
    let spacing = nifti::read(&cmd.gt)?.header.spacing()?;
    let sup = simulate_partial_labels(&id, &gt, cmd.keep_fraction, cmd.seed)?;
    nifti::write(
        &cmd.out_labels,
        GridRef::Labels(&sup.partial_labels),
        spacing,
    )?;
    sup.manifest().write(&cmd.out_manifest)?;
    let labeled: Vec<String> = sup.labeled.iter().map(u8::to_string).collect();
    println!("{id}: labeled {}", labeled.join(","));
    Ok(())
}

fn prompt(cmd: Prompt) -> Result<()> {
    let pred = nifti::read(&cmd.pred)?.into_labels()?;
    let pair = make_box_prompts(&pred, cmd.class, cmd.padding)?;
    match cmd.out {
        Some(p) => write_text(&p, &pair.to_prompt_file()),
        None => {
            print!("{}", pair.to_prompt_file());
            Ok(())
        }
    }
}

fn refine(cmd: Refine) -> Result<()> {
    let candidate_file = nifti::read(&cmd.candidate)?;
    let header = candidate_file.header.clone();
    let candidate = class_mask(&candidate_file.into_labels()?, 1)?;
    let probs = nifti::read(&cmd.probs)?.into_probs()?;
    let text = fs::read_to_string(&cmd.prompts)
        .with_context(|| format!("reading {}", cmd.prompts.display()))?;
    let prompts = BoxPromptPair::parse_prompt_file(&text, cmd.channel as u8, candidate.dims())?;
    let mut state = OrganRefinementState::new(cmd.channel as u8);
    if let Some(h) = cmd.previous_entropy {
        state.history.push(AcceptedEntropy {
            round: 0,
            mean_entropy: h,
        });
    }
    let config = RefinementConfig {
        tau_cls: cmd.tau_cls,
        delta_roi: cmd.delta_roi,
        gate_active: cmd.previous_entropy.is_some(),
    };
    let out = refine_pseudo_label(
        &candidate,
        &probs,
        cmd.channel,
        &prompts,
        &config,
        &mut state,
        1,
    )?;
    let entropy = out
        .mean_entropy
        .map(|h| format!("{h:.6}"))
        .unwrap_or_else(|| "-".into());
    match out.decision {
        GateDecision::Accept => {
            nifti::write_like(
                &cmd.out,
                GridRef::Mask(&out.refined),
                header.spacing()?,
                &header,
            )?;
            println!(
                "accept voxels={} mean_entropy={entropy}",
                out.refined.count()
            );
        }
        GateDecision::Reject(r) => println!(
            "reject reason={r} voxels={} mean_entropy={entropy}",
            out.refined.count()
        ),
    }
    Ok(())
}

fn vls(cmd: VlsMask) -> Result<()> {
    let pred = nifti::read(&cmd.pred)?.into_probs()?;
    let target_file = nifti::read(&cmd.target)?;
    let header = target_file.header.clone();
    let labels = target_file
        .into_labels()?
        .with_num_classes(pred.num_classes())?;
    let mut pseudo: BTreeSet<u8> = cmd.pseudo.into_iter().collect();
    if let Some(m) = &cmd.manifest {
        pseudo.extend(ScanManifest::read(m)?.classes_with(ClassStatus::Pseudo));
    }
    let mask = vls_mask(&pred, &SupervisionTarget::new(labels, pseudo)?)?;
    nifti::write_like(&cmd.out, GridRef::Mask(&mask), header.spacing()?, &header)?;
    println!("selected {} of {} voxels", mask.count(), mask.dims().len());
    Ok(())
}

fn metrics(cmd: MetricsCmd) -> Result<()> {
    let gt_file = nifti::read(&cmd.gt)?;
    let spacing = gt_file.header.spacing()?;
    let gt = gt_file.into_labels()?;
    let pred = nifti::read(&cmd.pred)?.into_labels()?;
    if pred.dims() != gt.dims() {
        bail!(
            "prediction grid {:?} does not match ground truth grid {:?}",
            pred.dims().0,
            gt.dims().0
        );
    }
    let classes = pred.num_classes().max(gt.num_classes());
    let m = evaluate_scan(
        &pred.with_num_classes(classes)?,
        &gt.with_num_classes(classes)?,
        spacing,
        cmd.hd_policy,
    )?;
    let manifest = cmd.manifest.as_ref().map(ScanManifest::read).transpose()?;
    print!("{}", metrics_table(&m, manifest.as_ref()));
    if let Some(p) = &cmd.csv {
        write_text(p, &metrics_csv(&m))?;
    }
    Ok(())
}

fn run(cmd: Run) -> Result<()> {
    let mut cfg = cmd.overrides.load()?;
    cfg.output_dir = Some(cmd.out.clone());
    if cmd.data_dir.is_some() {
        cfg.data_dir = cmd.data_dir;
    }
    if cmd.exchange_dir.is_some() {
        cfg.exchange_dir = cmd.exchange_dir;
    }
    let out = run_pipeline(&cfg)?;
    for r in &out.rounds {
        println!("{r}");
    }
    match out.mean_dsc {
        Some(d) => println!(
            "final mean DSC {d:.4}{}",
            out.mean_hd95
                .map(|h| format!(", mean HD95 {h:.3}"))
                .unwrap_or_default()
        ),
        None => println!("no test scans with ground truth"),
    }
    println!("reports in {}", cmd.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::PhantomGen(c) => phantom_gen(c),
        Command::SimulatePartial(c) => simulate_partial(c),
        Command::Prompt(c) => prompt(c),
        Command::Refine(c) => refine(c),
        Command::VlsMask(c) => vls(c),
        Command::Metrics(c) => metrics(c),
        Command::Run(c) => run(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
