//! The iterative scheme: partial labels, initial training, then rounds of
//! prompt → generalist → refine followed by re-training.
//!
//! Scans are processed in parallel inside a round; rounds and fits are
//! global barriers. With phantom oracles a run is a pure function of the
//! config.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha1::{Digest, Sha1};

use crate::error::{Error, Result};
use crate::manifest::{ClassStatus, ScanManifest};
use crate::metrics::{dice, evaluate_scan, ScanMetrics};
use crate::nifti::{self, GridRef};
use crate::oracles::{
    generate_phantom, stable_hash, FileOracle, Generalist, PhantomGeneralist, PhantomSpecialist,
    Specialist, TrainingItem,
};
use crate::prompting::make_box_prompts;
use crate::refinement::{
    refine_pseudo_label, GateDecision, OrganRefinementState, RefinementConfig, RejectReason,
};
use crate::vls::{vls_mask, SupervisionTarget};
use crate::volgrid::{argmax_labelmap, class_mask, LabelMap, Mask, Volume};

pub mod config;

pub use config::{OracleKind, PhantomSuiteConfig, PipelineConfig, SupervisionMode};

/// One scan: the image and, when known, its complete ground truth.
#[derive(Debug, Clone)]
pub struct Scan {
    pub id: String,
    pub image: Volume,
    pub truth: Option<LabelMap>,
}

/// Label bookkeeping for one training scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSupervision {
    pub scan_id: String,
    pub labeled: BTreeSet<u8>,
    pub unlabeled: BTreeSet<u8>,
    /// Unlabeled organs with an accepted pseudo-label.
    pub pseudo: BTreeSet<u8>,
    /// Ground-truth labels of the labeled organs only.
    pub partial_labels: LabelMap,
    /// `partial_labels` with accepted pseudo-labels merged in.
    pub target: SupervisionTarget,
    pub organs: BTreeMap<u8, OrganRefinementState>,
}

impl ScanSupervision {
    /// `partial_labels` may only contain classes from `labeled`.
    pub fn new(
        scan_id: impl Into<String>,
        partial_labels: LabelMap,
        labeled: BTreeSet<u8>,
    ) -> Result<Self> {
        let c = partial_labels.num_classes();
        if let Some(&bad) = labeled.iter().find(|&&l| l == 0 || l as usize >= c) {
            return Err(Error::ClassOutOfRange {
                class: bad as usize,
                num_classes: c,
            });
        }
        if let Some(&stray) = partial_labels
            .data()
            .iter()
            .find(|&&l| l != 0 && !labeled.contains(&l))
        {
            return Err(Error::InvalidInput(format!(
                "class {stray} is drawn but not labeled"
            )));
        }
        let unlabeled: BTreeSet<u8> = (1..c as u8).filter(|k| !labeled.contains(k)).collect();
        let organs = unlabeled
            .iter()
            .map(|&k| (k, OrganRefinementState::new(k)))
            .collect();
        Ok(ScanSupervision {
            scan_id: scan_id.into(),
            labeled,
            unlabeled,
            pseudo: BTreeSet::new(),
            target: SupervisionTarget::new(partial_labels.clone(), BTreeSet::new())?,
            partial_labels,
            organs,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.partial_labels.num_classes()
    }

    /// Classes whose absence in the target is trusted under `mode`.
    pub fn supervised(&self, mode: SupervisionMode) -> BTreeSet<u8> {
        match mode {
            SupervisionMode::FullSup => (1..self.num_classes() as u8).collect(),
            SupervisionMode::PartialSup => self.labeled.union(&self.pseudo).copied().collect(),
        }
    }

    /// Rebuilds `target` from the partial labels and every accepted
    /// pseudo-label. Labeled voxels are never overwritten; where pseudo-labels
    /// overlap, the higher generalist probability wins and ties go to the
    /// lower class.
    pub fn merge_pseudo_labels(&mut self) -> Result<()> {
        let mut labels = self.partial_labels.clone();
        let mut owner = vec![f32::NEG_INFINITY; labels.dims().len()];
        for &c in &self.pseudo {
            let state = &self.organs[&c];
            let (Some(mask), Some(conf)) = (&state.current_pseudo, &state.current_confidence)
            else {
                continue;
            };
            for (v, _) in mask.data().iter().enumerate().filter(|(_, &m)| m) {
                if self.partial_labels.data()[v] == 0 && conf[v] > owner[v] {
                    labels.set(v, c)?;
                    owner[v] = conf[v];
                }
            }
        }
        self.target = SupervisionTarget::new(labels, self.pseudo.clone())?;
        Ok(())
    }

    pub fn manifest(&self) -> ScanManifest {
        let mut m = ScanManifest::new(self.scan_id.clone(), self.num_classes());
        for c in 1..self.num_classes() as u8 {
            let status = if self.labeled.contains(&c) {
                ClassStatus::Labeled
            } else if self.pseudo.contains(&c) {
                ClassStatus::Pseudo
            } else {
                ClassStatus::Unlabeled
            };
            m.set_status(c, status);
        }
        m
    }
}

/// Keeps `round(f (C - 1))` organs of `gt`, drawn uniformly without
/// replacement from a stream keyed by `(scan_id, seed)`.
pub fn simulate_partial_labels(
    scan_id: &str,
    gt: &LabelMap,
    keep_fraction: f64,
    seed: u64,
) -> Result<ScanSupervision> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "keep_fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    let organs = gt.num_classes() - 1;
    let keep = (keep_fraction * organs as f64).round() as usize;
    if keep == 0 {
        return Err(Error::Config(format!(
            "keep_fraction {keep_fraction} of {organs} organs keeps none"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(scan_id.as_bytes()));
    let labeled: BTreeSet<u8> = sample(&mut rng, organs, keep)
        .iter()
        .map(|i| (i + 1) as u8)
        .collect();
    let data = gt
        .data()
        .iter()
        .map(|&l| if labeled.contains(&l) { l } else { 0 })
        .collect();
    let partial = LabelMap::new(gt.num_classes(), gt.dims(), data)?;
    ScanSupervision::new(scan_id, partial, labeled)
}

fn check_pairing(scans: &[Scan], sups: &[ScanSupervision]) -> Result<()> {
    if scans.is_empty() {
        return Err(Error::Config("no training scans".into()));
    }
    if scans.len() != sups.len() {
        return Err(Error::InvalidInput(format!(
            "{} scans but {} supervision records",
            scans.len(),
            sups.len()
        )));
    }
    for (s, p) in scans.iter().zip(sups) {
        if s.id != p.scan_id {
            return Err(Error::InvalidInput(format!(
                "scan {} paired with supervision of {}",
                s.id, p.scan_id
            )));
        }
        s.image.dims().check_same(p.partial_labels.dims())?;
    }
    Ok(())
}

fn fit_on(
    specialist: &mut dyn Specialist,
    scans: &[Scan],
    targets: &[&SupervisionTarget],
    supervised: &[BTreeSet<u8>],
    selections: Option<&[Mask]>,
) -> Result<()> {
    let items: Vec<TrainingItem<'_>> = scans
        .iter()
        .enumerate()
        .map(|(i, s)| TrainingItem {
            scan_id: &s.id,
            image: &s.image,
            target: targets[i],
            supervised: &supervised[i],
            selection: selections.map(|m| &m[i]),
        })
        .collect();
    specialist.fit(&items)
}

/// Stage 1: fit on the partial labels alone.
pub fn initial_training(
    scans: &[Scan],
    sups: &[ScanSupervision],
    specialist: &mut dyn Specialist,
    mode: SupervisionMode,
) -> Result<()> {
    check_pairing(scans, sups)?;
    if let Some(s) = sups.iter().find(|s| s.labeled.is_empty()) {
        return Err(Error::Config(format!(
            "scan {} has no labeled organ",
            s.scan_id
        )));
    }
    let targets: Vec<SupervisionTarget> = sups
        .iter()
        .map(|s| SupervisionTarget::new(s.partial_labels.clone(), BTreeSet::new()))
        .collect::<Result<_>>()?;
    let supervised: Vec<BTreeSet<u8>> = sups
        .iter()
        .map(|s| match mode {
            SupervisionMode::FullSup => s.supervised(mode),
            SupervisionMode::PartialSup => s.labeled.clone(),
        })
        .collect();
    log::info!(
        "initial training on {} scans ({})",
        scans.len(),
        mode.as_str()
    );
    fit_on(
        specialist,
        scans,
        &targets.iter().collect::<Vec<_>>(),
        &supervised,
        None,
    )
}

/// Stage 4: fit on the merged targets, optionally with voxel-level
/// selection masks computed from the current predictions.
pub fn retrain(
    scans: &[Scan],
    sups: &[ScanSupervision],
    specialist: &mut dyn Specialist,
    mode: SupervisionMode,
    use_vls: bool,
) -> Result<()> {
    check_pairing(scans, sups)?;
    let selections: Option<Vec<Mask>> = if use_vls {
        let model: &dyn Specialist = specialist;
        Some(
            scans
                .par_iter()
                .zip(sups.par_iter())
                .map(|(s, p)| vls_mask(&model.predict(&s.id, &s.image)?, &p.target))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let targets: Vec<&SupervisionTarget> = sups.iter().map(|s| &s.target).collect();
    let supervised: Vec<BTreeSet<u8>> = sups.iter().map(|s| s.supervised(mode)).collect();
    log::info!("re-training on {} scans (vls={use_vls})", scans.len());
    fit_on(
        specialist,
        scans,
        &targets,
        &supervised,
        selections.as_deref(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub enum OrganOutcome {
    Accepted,
    Rejected(RejectReason),
    /// The organ was not attempted this round: `no-prediction` or
    /// `oracle-error`, with detail.
    Skipped {
        reason: &'static str,
        detail: String,
    },
}

impl OrganOutcome {
    pub fn status(&self) -> &'static str {
        match self {
            OrganOutcome::Accepted => "accepted",
            OrganOutcome::Rejected(_) => "rejected",
            OrganOutcome::Skipped { .. } => "skipped",
        }
    }

    pub fn reason(&self) -> String {
        match self {
            OrganOutcome::Accepted => String::new(),
            OrganOutcome::Rejected(r) => r.to_string(),
            OrganOutcome::Skipped { reason, .. } => reason.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrganRecord {
    pub scan_id: String,
    pub class_id: u8,
    pub outcome: OrganOutcome,
    pub mean_entropy: Option<f64>,
    pub candidate_voxels: usize,
    /// DSC of the organ in the merged target against ground truth, when the
    /// organ holds a pseudo-label and the truth is known.
    pub pseudo_dsc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub records: Vec<OrganRecord>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl RoundReport {
    pub fn accepted(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.outcome == OrganOutcome::Accepted)
            .count()
    }

    pub fn mean_pseudo_dsc(&self) -> Option<f64> {
        let v: Vec<f64> = self.records.iter().filter_map(|r| r.pseudo_dsc).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("scan,class,status,reason,mean_entropy,candidate_voxels,pseudo_dsc\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.scan_id,
                r.class_id,
                r.outcome.status(),
                r.outcome.reason(),
                fmt_opt(r.mean_entropy),
                r.candidate_voxels,
                fmt_opt(r.pseudo_dsc)
            );
        }
        out
    }
}

impl fmt::Display for RoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "round {}: {} accepted of {} organs",
            self.round,
            self.accepted(),
            self.records.len()
        )?;
        if let Some(d) = self.mean_pseudo_dsc() {
            write!(f, ", pseudo-label DSC {d:.4}")?;
        }
        Ok(())
    }
}

fn skipped(scan: &Scan, class_id: u8, reason: &'static str, detail: String) -> OrganRecord {
    log::warn!("{} class {class_id}: skipped ({reason}): {detail}", scan.id);
    OrganRecord {
        scan_id: scan.id.clone(),
        class_id,
        outcome: OrganOutcome::Skipped { reason, detail },
        mean_entropy: None,
        candidate_voxels: 0,
        pseudo_dsc: None,
    }
}

fn scan_round(
    scan: &Scan,
    sup: &mut ScanSupervision,
    specialist: &dyn Specialist,
    generalist: &dyn Generalist,
    config: &PipelineConfig,
    refinement: &RefinementConfig,
    round: usize,
) -> Result<Vec<OrganRecord>> {
    let unlabeled: Vec<u8> = sup.unlabeled.iter().copied().collect();
    let pred = match specialist.predict(&scan.id, &scan.image) {
        Ok(p) => argmax_labelmap(&p),
        Err(e) => {
            return Ok(unlabeled
                .iter()
                .map(|&c| skipped(scan, c, "oracle-error", e.to_string()))
                .collect())
        }
    };
    let mut records = Vec::with_capacity(unlabeled.len());
    for &c in &unlabeled {
        let prompts = match make_box_prompts(&pred, c, config.box_padding) {
            Ok(p) => p,
            Err(Error::NoPrediction(_)) => {
                records.push(skipped(scan, c, "no-prediction", String::new()));
                continue;
            }
            Err(e) => return Err(e),
        };
        let seg = match generalist.segment(&scan.id, &scan.image, &prompts) {
            Ok(s) if s.mask.dims() == scan.image.dims() && s.probs.dims() == scan.image.dims() => s,
            Ok(_) => {
                records.push(skipped(
                    scan,
                    c,
                    "oracle-error",
                    "response on the wrong grid".into(),
                ));
                continue;
            }
            Err(e) => {
                records.push(skipped(scan, c, "oracle-error", e.to_string()));
                continue;
            }
        };
        let state = sup
            .organs
            .get_mut(&c)
            .expect("state exists for every unlabeled organ");
        let out =
            refine_pseudo_label(&seg.mask, &seg.probs, 1, &prompts, refinement, state, round)?;
        let outcome = match out.decision {
            GateDecision::Accept => {
                sup.pseudo.insert(c);
                OrganOutcome::Accepted
            }
            GateDecision::Reject(r) => OrganOutcome::Rejected(r),
        };
        log::debug!(
            "{} class {c}: {} {}",
            scan.id,
            outcome.status(),
            outcome.reason()
        );
        records.push(OrganRecord {
            scan_id: scan.id.clone(),
            class_id: c,
            outcome,
            mean_entropy: out.mean_entropy,
            candidate_voxels: out.refined.count(),
            pseudo_dsc: None,
        });
    }
    sup.merge_pseudo_labels()?;
    if let Some(truth) = &scan.truth {
        for r in &mut records {
            if sup.pseudo.contains(&r.class_id) {
                let ours = class_mask(sup.target.labels(), r.class_id as usize)?;
                r.pseudo_dsc = Some(dice(&ours, &class_mask(truth, r.class_id as usize)?)?);
            }
        }
    }
    Ok(records)
}

/// Stages 2 and 3 for every scan: prompts from the specialist, candidates
/// from the generalist, refinement, and merging of accepted pseudo-labels.
/// Per-organ oracle failures are recorded and skipped.
pub fn pseudo_label_round(
    scans: &[Scan],
    sups: &mut [ScanSupervision],
    specialist: &dyn Specialist,
    generalist: &dyn Generalist,
    config: &PipelineConfig,
    round: usize,
) -> Result<RoundReport> {
    check_pairing(scans, sups)?;
    let refinement = RefinementConfig {
        gate_active: round >= config.gate_from_round(),
        ..config.refinement
    };
    let per_scan: Vec<Vec<OrganRecord>> = scans
        .par_iter()
        .zip(sups.par_iter_mut())
        .map(|(scan, sup)| {
            scan_round(
                scan,
                sup,
                specialist,
                generalist,
                config,
                &refinement,
                round,
            )
        })
        .collect::<Result<_>>()?;
    let report = RoundReport {
        round,
        records: per_scan.into_iter().flatten().collect(),
    };
    log::info!("{report}");
    Ok(report)
}

/// Training and test scans plus the supervision to start from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub num_classes: usize,
    pub train: Vec<Scan>,
    pub test: Vec<Scan>,
    pub supervision: Vec<ScanSupervision>,
    /// `(name, bytes)` of every input file, for the run manifest.
    pub inputs: Vec<(String, Vec<u8>)>,
}

fn phantom_scan(config: &PipelineConfig, id: String) -> Result<Scan> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ stable_hash(id.as_bytes()));
    let spec = config.phantom.layout.sample(&mut rng)?;
    let (image, truth) = generate_phantom(&spec, rng.gen())?;
    Ok(Scan {
        id,
        image,
        truth: Some(truth),
    })
}

/// Phantom suite: `train_NNN` and `test_NNN` scans sampled from the layout,
/// with partial labels simulated at `keep_fraction`.
pub fn phantom_dataset(config: &PipelineConfig) -> Result<Dataset> {
    let ph = &config.phantom;
    let train: Vec<Scan> = (0..ph.train_scans)
        .into_par_iter()
        .map(|i| phantom_scan(config, format!("train_{i:03}")))
        .collect::<Result<_>>()?;
    let test: Vec<Scan> = (0..ph.test_scans)
        .into_par_iter()
        .map(|i| phantom_scan(config, format!("test_{i:03}")))
        .collect::<Result<_>>()?;
    let supervision = train
        .iter()
        .map(|s| {
            simulate_partial_labels(
                &s.id,
                s.truth.as_ref().unwrap(),
                config.keep_fraction,
                config.seed,
            )
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        num_classes: ph.layout.num_organs.max(1) + 1,
        train,
        test,
        supervision,
        inputs: Vec::new(),
    })
}

fn scan_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()?
                .strip_suffix(".img.nii")
                .map(str::to_owned)
        })
        .collect();
    ids.sort();
    Ok(ids)
}

fn read_input(path: &Path, root: &Path, inputs: &mut Vec<(String, Vec<u8>)>) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .strip_prefix(root)
        .unwrap_or(path)
        .display()
        .to_string();
    inputs.push((name, bytes.clone()));
    Ok(bytes)
}

/// Scans on disk for the file oracle.
///
/// `train/<id>.img.nii` comes with either `<id>.labels.nii` plus
/// `<id>.manifest` (real partial labels) or `<id>.gt.nii`, from which partial
/// labels are simulated. `test/<id>.img.nii` needs `<id>.gt.nii`.
pub fn file_dataset(config: &PipelineConfig) -> Result<Dataset> {
    let root = config
        .data_dir
        .as_deref()
        .ok_or_else(|| Error::Config("data_dir is required with oracle=file".into()))?;
    let mut inputs = Vec::new();
    let mut num_classes = 0usize;
    let mut load = |split: &str,
                    need_gt: bool|
     -> Result<Vec<(Scan, Option<(LabelMap, ScanManifest)>)>> {
        let dir = root.join(split);
        let mut out = Vec::new();
        for id in scan_ids(&dir)? {
            let img = nifti::decode(&read_input(
                &dir.join(format!("{id}.img.nii")),
                root,
                &mut inputs,
            )?)?
            .into_volume()?;
            let gt_path = dir.join(format!("{id}.gt.nii"));
            let truth = if gt_path.exists() {
                let gt = nifti::decode(&read_input(&gt_path, root, &mut inputs)?)?.into_labels()?;
                num_classes = num_classes.max(gt.num_classes());
                Some(gt)
            } else if need_gt {
                return Err(Error::InvalidInput(format!(
                    "{} is missing",
                    gt_path.display()
                )));
            } else {
                None
            };
            let labels_path = dir.join(format!("{id}.labels.nii"));
            let partial = if !need_gt && labels_path.exists() {
                let labels =
                    nifti::decode(&read_input(&labels_path, root, &mut inputs)?)?.into_labels()?;
                let text = read_input(&dir.join(format!("{id}.manifest")), root, &mut inputs)?;
                let manifest = ScanManifest::parse(&String::from_utf8_lossy(&text))?;
                num_classes = num_classes.max(manifest.num_classes.unwrap_or(0));
                Some((labels, manifest))
            } else if truth.is_none() {
                return Err(Error::InvalidInput(format!(
                    "{id} has neither labels nor ground truth"
                )));
            } else {
                None
            };
            out.push((
                Scan {
                    id,
                    image: img,
                    truth,
                },
                partial,
            ));
        }
        Ok(out)
    };
    let train = load("train", false)?;
    let test = load("test", true)?;
    let mut scans = Vec::with_capacity(train.len());
    let mut supervision = Vec::with_capacity(train.len());
    for (mut scan, partial) in train {
        if let Some(t) = scan.truth.take() {
            scan.truth = Some(t.with_num_classes(num_classes)?);
        }
        let sup = match partial {
            Some((labels, manifest)) => ScanSupervision::new(
                scan.id.clone(),
                labels.with_num_classes(num_classes)?,
                manifest.classes_with(ClassStatus::Labeled),
            )?,
            None => simulate_partial_labels(
                &scan.id,
                scan.truth.as_ref().unwrap(),
                config.keep_fraction,
                config.seed,
            )?,
        };
        scans.push(scan);
        supervision.push(sup);
    }
    let test = test
        .into_iter()
        .map(|(mut s, _)| {
            s.truth = s
                .truth
                .map(|t| t.with_num_classes(num_classes))
                .transpose()?;
            Ok(s)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        num_classes,
        train: scans,
        test,
        supervision,
        inputs,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rounds: Vec<RoundReport>,
    pub supervision: Vec<ScanSupervision>,
    pub test_metrics: Vec<(String, ScanMetrics)>,
    /// Mean over test scans of the per-scan mean organ DSC.
    pub mean_dsc: Option<f64>,
    pub mean_hd95: Option<f64>,
}

fn git_blob_sha1(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// Config echo followed by one git blob hash per input and a combined hash
/// over those lines.
pub fn run_manifest(config: &PipelineConfig, inputs: &[(String, Vec<u8>)]) -> String {
    let config_text = config.render();
    let mut listing = format!("{} config\n", git_blob_sha1(config_text.as_bytes()));
    for (name, bytes) in inputs {
        let _ = writeln!(listing, "{} {name}", git_blob_sha1(bytes));
    }
    let mut out = config_text;
    let _ = writeln!(out, "inputs_sha1={}", git_blob_sha1(listing.as_bytes()));
    for line in listing.lines() {
        let _ = writeln!(out, "input={line}");
    }
    out
}

struct Artifacts {
    dir: Option<PathBuf>,
    log: String,
}

impl Artifacts {
    fn new(dir: Option<PathBuf>) -> Result<Self> {
        if let Some(d) = &dir {
            for sub in ["", "pred", "targets"] {
                let p = d.join(sub);
                fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(Artifacts {
            dir,
            log: String::new(),
        })
    }

    fn note(&mut self, line: impl AsRef<str>) -> Result<()> {
        self.log.push_str(line.as_ref());
        self.log.push('\n');
        self.file("run.log", self.log.clone().as_bytes())
    }

    fn file(&self, name: &str, bytes: &[u8]) -> Result<()> {
        match &self.dir {
            Some(d) => {
                let p = d.join(name);
                fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
            }
            None => Ok(()),
        }
    }

    fn nifti(&self, name: String, grid: GridRef<'_>, image: &Volume) -> Result<()> {
        match &self.dir {
            Some(d) => nifti::write(d.join(name), grid, image.spacing()),
            None => Ok(()),
        }
    }
}

/// Runs stages 1 → (2 → 3 → 4) × R on a prepared dataset with the given
/// oracles, then evaluates the specialist on the test split.
pub fn run_with(
    config: &PipelineConfig,
    mut data: Dataset,
    specialist: &mut dyn Specialist,
    generalist: &dyn Generalist,
) -> Result<RunOutcome> {
    config.validate()?;
    let mut art = Artifacts::new(config.output_dir.clone())?;
    art.file(
        "run.manifest",
        run_manifest(config, &data.inputs).as_bytes(),
    )?;
    art.note(format!(
        "{} training scans, {} test scans, {} classes",
        data.train.len(),
        data.test.len(),
        data.num_classes
    ))?;

    initial_training(&data.train, &data.supervision, specialist, config.base_mode)?;
    art.note(format!(
        "initial training done ({})",
        config.base_mode.as_str()
    ))?;

    let mut rounds = Vec::with_capacity(config.rounds);
    for t in 1..=config.rounds {
        let report = pseudo_label_round(
            &data.train,
            &mut data.supervision,
            &*specialist,
            generalist,
            config,
            t,
        )?;
        art.file(&format!("round_{t}.csv"), report.to_csv().as_bytes())?;
        art.note(report.to_string())?;
        rounds.push(report);
        retrain(
            &data.train,
            &data.supervision,
            specialist,
            config.base_mode,
            config.use_vls,
        )?;
        art.note(format!("round {t}: re-trained"))?;
    }

    for (scan, sup) in data.train.iter().zip(&data.supervision) {
        art.nifti(
            format!("targets/{}.nii", scan.id),
            GridRef::Labels(sup.target.labels()),
            &scan.image,
        )?;
        art.file(
            &format!("targets/{}.manifest", scan.id),
            sup.manifest().render().as_bytes(),
        )?;
    }

    let model: &dyn Specialist = specialist;
    let evaluated: Vec<(String, LabelMap, Option<ScanMetrics>)> = data
        .test
        .par_iter()
        .map(|s| {
            let pred = argmax_labelmap(&model.predict(&s.id, &s.image)?);
            let m = s
                .truth
                .as_ref()
                .map(|gt| evaluate_scan(&pred, gt, s.image.spacing(), config.hd95_missing_policy))
                .transpose()?;
            Ok((s.id.clone(), pred, m))
        })
        .collect::<Result<_>>()?;

    let mut csv = String::from("scan,class,dsc,hd95\n");
    let mut summary = String::from("scan,mean_dsc,mean_hd95\n");
    let mut test_metrics = Vec::new();
    for ((id, pred, m), scan) in evaluated.into_iter().zip(&data.test) {
        art.nifti(
            format!("pred/{id}.nii"),
            GridRef::Labels(&pred),
            &scan.image,
        )?;
        if let Some(m) = m {
            for c in &m.per_class {
                let _ = writeln!(csv, "{id},{},{:.6},{}", c.class_id, c.dsc, fmt_opt(c.hd95));
            }
            let _ = writeln!(summary, "{id},{:.6},{}", m.mean_dsc, fmt_opt(m.mean_hd95));
            test_metrics.push((id, m));
        }
    }
    let mean_dsc = (!test_metrics.is_empty()).then(|| {
        test_metrics.iter().map(|(_, m)| m.mean_dsc).sum::<f64>() / test_metrics.len() as f64
    });
    let hds: Vec<f64> = test_metrics
        .iter()
        .filter_map(|(_, m)| m.mean_hd95)
        .collect();
    let mean_hd95 = (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64);
    let _ = writeln!(summary, "all,{},{}", fmt_opt(mean_dsc), fmt_opt(mean_hd95));
    art.file("final_metrics.csv", csv.as_bytes())?;
    art.file("final_summary.csv", summary.as_bytes())?;
    art.note(format!(
        "final: mean DSC {} mean HD95 {}",
        fmt_opt(mean_dsc),
        fmt_opt(mean_hd95)
    ))?;

    Ok(RunOutcome {
        rounds,
        supervision: data.supervision,
        test_metrics,
        mean_dsc,
        mean_hd95,
    })
}

/// Builds the dataset and oracles named by `config` and runs the pipeline.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunOutcome> {
    config.validate()?;
    match config.oracle {
        OracleKind::Phantom => {
            let data = phantom_dataset(config)?;
            let ph = &config.phantom;
            let mut specialist = PhantomSpecialist::untrained(
                data.num_classes,
                crate::oracles::SpecialistParams {
                    seed: ph.specialist.seed ^ config.seed,
                    ..ph.specialist
                },
            );
            let mut generalist = PhantomGeneralist::new(crate::oracles::GeneralistParams {
                seed: ph.generalist.seed ^ config.seed,
                ..ph.generalist
            });
            for s in data.train.iter().chain(&data.test) {
                let truth = s.truth.clone().expect("phantom scans carry truth");
                specialist.register(s.id.clone(), truth.clone());
                generalist.register(s.id.clone(), truth);
            }
            run_with(config, data, &mut specialist, &generalist)
        }
        OracleKind::File => {
            let data = file_dataset(config)?;
            let open = |c| match &config.exchange_dir {
                Some(d) => FileOracle::new(d.clone(), c, config.oracle_timeout),
                None => FileOracle::from_env(c, config.oracle_timeout),
            };
            let mut specialist = open(data.num_classes)?;
            let generalist = open(2)?;
            run_with(config, data, &mut specialist, &generalist)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{GeneralistParams, NoiseGeneralist, SpecialistParams};
    use crate::volgrid::Dims;

    fn labels_16() -> LabelMap {
        let dims = Dims::new(16, 4, 4).unwrap();
        let data = (0..dims.len()).map(|i| (i % 16) as u8).collect();
        LabelMap::new(16, dims, data).unwrap()
    }

    #[test]
    fn keep_counts() {
        let gt = labels_16();
        for (f, k) in [(0.67, 10), (0.33, 5), (1.0, 15)] {
            let s = simulate_partial_labels("scan", &gt, f, 3).unwrap();
            assert_eq!(s.labeled.len(), k);
            assert_eq!(s.unlabeled.len(), 15 - k);
            assert!(s.labeled.is_disjoint(&s.unlabeled));
        }
        let full = simulate_partial_labels("scan", &gt, 1.0, 3).unwrap();
        assert_eq!(full.target.labels(), &gt);
    }

    #[test]
    fn zero_kept_is_config_error() {
        assert!(matches!(
            simulate_partial_labels("s", &labels_16(), 0.01, 0),
            Err(Error::Config(_))
        ));
        assert!(simulate_partial_labels("s", &labels_16(), 0.0, 0).is_err());
    }

    #[test]
    fn simulation_is_keyed_by_scan_and_seed() {
        let gt = labels_16();
        let a = simulate_partial_labels("a", &gt, 0.33, 9).unwrap();
        assert_eq!(a, simulate_partial_labels("a", &gt, 0.33, 9).unwrap());
        let others: Vec<_> = (0..8)
            .map(|s| simulate_partial_labels("a", &gt, 0.33, s).unwrap().labeled)
            .collect();
        assert!(others.iter().any(|l| *l != a.labeled));
    }

    #[test]
    fn merge_keeps_labeled_voxels_and_prefers_confidence() {
        let dims = Dims::new(4, 1, 1).unwrap();
        let partial = LabelMap::new(4, dims, vec![1, 0, 0, 0]).unwrap();
        let mut s = ScanSupervision::new("s", partial, [1].into()).unwrap();
        let all = Mask::full(dims);
        for (c, conf) in [
            (2u8, vec![0.9, 0.9, 0.5, 0.6]),
            (3u8, vec![0.9, 0.8, 0.5, 0.7]),
        ] {
            let st = s.organs.get_mut(&c).unwrap();
            st.current_pseudo = Some(all.clone());
            st.current_confidence = Some(conf);
            s.pseudo.insert(c);
        }
        s.merge_pseudo_labels().unwrap();
        assert_eq!(s.target.labels().data(), &[1, 2, 2, 3]);
        assert_eq!(
            s.manifest().classes_with(ClassStatus::Pseudo),
            [2, 3].into()
        );
    }

    fn small_config() -> PipelineConfig {
        PipelineConfig::parse(
            "phantom.train_scans=4\nphantom.test_scans=2\nphantom.dims=40,24,24\nphantom.cells=2,1,1\n\
             phantom.organs=2\nphantom.radius_xy=6,7\nphantom.radius_z=6,8\nkeep_fraction=0.5\nrounds=2\n",
        )
        .unwrap()
    }

    #[test]
    fn cooperative_round_recovers_organs() {
        let cfg = small_config();
        let data = phantom_dataset(&cfg).unwrap();
        let mut spec =
            PhantomSpecialist::with_quality(data.num_classes, SpecialistParams::default(), 1.0);
        let mut gen = PhantomGeneralist::new(GeneralistParams {
            cooperativeness: 1.0,
            ..Default::default()
        });
        for s in &data.train {
            spec.register(s.id.clone(), s.truth.clone().unwrap());
            gen.register(s.id.clone(), s.truth.clone().unwrap());
        }
        let mut sups = data.supervision.clone();
        let report = pseudo_label_round(&data.train, &mut sups, &spec, &gen, &cfg, 1).unwrap();
        assert!(!report.records.is_empty());
        for r in &report.records {
            assert_eq!(r.outcome, OrganOutcome::Accepted, "{r:?}");
            assert_eq!(r.pseudo_dsc, Some(1.0));
        }
        for (s, scan) in sups.iter().zip(&data.train) {
            assert_eq!(s.target.labels(), scan.truth.as_ref().unwrap());
        }
    }

    #[test]
    fn noise_generalist_is_rejected_when_gated() {
        let cfg = small_config();
        let data = phantom_dataset(&cfg).unwrap();
        let mut spec =
            PhantomSpecialist::with_quality(data.num_classes, SpecialistParams::default(), 1.0);
        let mut gen = PhantomGeneralist::new(GeneralistParams::default());
        for s in &data.train {
            spec.register(s.id.clone(), s.truth.clone().unwrap());
            gen.register(s.id.clone(), s.truth.clone().unwrap());
        }
        let mut sups = data.supervision.clone();
        pseudo_label_round(&data.train, &mut sups, &spec, &gen, &cfg, 1).unwrap();
        let before = sups.clone();
        let report = pseudo_label_round(
            &data.train,
            &mut sups,
            &spec,
            &NoiseGeneralist { seed: 1 },
            &cfg,
            2,
        )
        .unwrap();
        assert_eq!(report.accepted(), 0);
        for (a, b) in sups.iter().zip(&before) {
            assert_eq!(a.target, b.target);
            assert_eq!(a.pseudo, b.pseudo);
        }
    }

    #[test]
    fn missing_organ_is_skipped() {
        let cfg = small_config();
        let data = phantom_dataset(&cfg).unwrap();
        // untrained specialist predicts background everywhere
        let spec = PhantomSpecialist::untrained(data.num_classes, SpecialistParams::default());
        let gen = NoiseGeneralist { seed: 0 };
        let mut sups = data.supervision.clone();
        let report = pseudo_label_round(&data.train, &mut sups, &spec, &gen, &cfg, 1).unwrap();
        assert!(report
            .records
            .iter()
            .all(|r| r.outcome.reason() == "no-prediction"));
    }

    #[test]
    fn zero_rounds_is_baseline() {
        let mut cfg = small_config();
        cfg.rounds = 0;
        let out = run_pipeline(&cfg).unwrap();
        assert!(out.rounds.is_empty());
        assert!(out.supervision.iter().all(|s| s.pseudo.is_empty()));
        assert!(out.mean_dsc.is_some());
    }

    #[test]
    fn manifest_hash_tracks_inputs() {
        let cfg = small_config();
        let a = run_manifest(&cfg, &[("x".into(), b"1".to_vec())]);
        let b = run_manifest(&cfg, &[("x".into(), b"2".to_vec())]);
        assert_ne!(a, b);
        assert!(a.contains("inputs_sha1="));
        assert_eq!(
            git_blob_sha1(b""),
            "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
        );
    }
}
