//! Directory-based exchange with external model processes.
//!
//! Each request gets a fresh id `<uuid>`. The oracle writes its inputs and
//! then, last, a `req_<uuid>.task` file; a responder should treat the task
//! file as the signal that the request is complete. All files are written
//! to a temporary name and renamed into place, and responders are expected
//! to do the same.
//!
//! | task | request files | response files |
//! |------|---------------|----------------|
//! | `segment` | `req_<uuid>.nii` (float32 image), `req_<uuid>.prompts` | `resp_<uuid>.nii` (uint8 mask), `resp_<uuid>.prob.nii` (float32, 2 channels) |
//! | `predict` | `req_<uuid>.nii` | `resp_<uuid>.prob.nii` (float32, C channels) |
//! | `fit` | `req_<uuid>.fit/<scan>.{img,target,vls}.nii`, `<scan>.manifest` | `resp_<uuid>.done` |
//!
//! The task file holds the task name on its first line and `scan=<id>` on
//! the second (absent for `fit`). A `resp_<uuid>.done` whose first line
//! starts with `error` fails the fit.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use uuid::Uuid;

use super::{Generalist, Segmentation, Specialist, TrainingItem};
use crate::error::{Error, Result};
use crate::manifest::{ClassStatus, ScanManifest};
use crate::nifti::{self, GridRef};
use crate::prompting::BoxPromptPair;
use crate::volgrid::{ProbVolume, Volume};

/// Environment variable naming the default exchange root.
pub const EXCHANGE_DIR_ENV: &str = "IPNP_EXCHANGE_DIR";

#[derive(Debug)]
pub struct FileOracle {
    root: PathBuf,
    num_classes: usize,
    timeout: Duration,
    poll_interval: Duration,
    lock: Mutex<()>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl FileOracle {
    pub fn new(root: impl Into<PathBuf>, num_classes: usize, timeout: Duration) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(FileOracle {
            root,
            num_classes,
            timeout,
            poll_interval: Duration::from_millis(20),
            lock: Mutex::new(()),
        })
    }

    /// Uses `$IPNP_EXCHANGE_DIR` as the exchange root.
    pub fn from_env(num_classes: usize, timeout: Duration) -> Result<Self> {
        let root = std::env::var_os(EXCHANGE_DIR_ENV)
            .ok_or_else(|| Error::Config(format!("{EXCHANGE_DIR_ENV} is not set")))?;
        FileOracle::new(PathBuf::from(root), num_classes, timeout)
    }

    pub fn with_poll_interval(mut self, interval: Duration) -> Self {
        self.poll_interval = interval;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, name: String) -> PathBuf {
        self.root.join(name)
    }

    fn wait_for(&self, paths: &[PathBuf]) -> Result<()> {
        let start = Instant::now();
        while !paths.iter().all(|p| p.exists()) {
            if start.elapsed() >= self.timeout {
                return Err(Error::OracleUnavailable(format!(
                    "no response in {:?} under {}",
                    self.timeout,
                    self.root.display()
                )));
            }
            thread::sleep(self.poll_interval);
        }
        Ok(())
    }

    fn cleanup(&self, id: &str) {
        let Ok(entries) = fs::read_dir(&self.root) else {
            return;
        };
        for entry in entries.flatten() {
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if name.starts_with(&format!("req_{id}")) || name.starts_with(&format!("resp_{id}")) {
                let p = entry.path();
                let _ = if p.is_dir() {
                    fs::remove_dir_all(&p)
                } else {
                    fs::remove_file(&p)
                };
            }
        }
    }

    fn request(
        &self,
        task: &str,
        scan_id: Option<&str>,
        write_inputs: impl FnOnce(&str) -> Result<()>,
    ) -> Result<String> {
        let id = Uuid::new_v4().simple().to_string();
        write_inputs(&id)?;
        let mut body = format!("{task}\n");
        if let Some(s) = scan_id {
            body.push_str(&format!("scan={s}\n"));
        }
        write_atomic(&self.path(format!("req_{id}.task")), body.as_bytes())?;
        Ok(id)
    }

    fn read_probs(&self, path: &Path, image: &Volume, channels: usize) -> Result<ProbVolume> {
        let probs = nifti::read(path)
            .and_then(|f| f.into_probs())
            .map_err(|e| Error::Protocol(format!("{}: {e}", path.display())))?;
        if probs.dims() != image.dims() || probs.num_classes() != channels {
            return Err(Error::Protocol(format!(
                "{}: expected {channels} channels on {:?}, got {} on {:?}",
                path.display(),
                image.dims().0,
                probs.num_classes(),
                probs.dims().0
            )));
        }
        Ok(probs)
    }
}

impl Generalist for FileOracle {
    fn segment(
        &self,
        scan_id: &str,
        image: &Volume,
        prompts: &BoxPromptPair,
    ) -> Result<Segmentation> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let id = self.request("segment", Some(scan_id), |id| {
            write_atomic(
                &self.path(format!("req_{id}.nii")),
                &nifti::encode(GridRef::Volume(image), image.spacing())?,
            )?;
            write_atomic(
                &self.path(format!("req_{id}.prompts")),
                prompts.to_prompt_file().as_bytes(),
            )
        })?;
        let mask_path = self.path(format!("resp_{id}.nii"));
        let prob_path = self.path(format!("resp_{id}.prob.nii"));
        let result = self
            .wait_for(&[mask_path.clone(), prob_path.clone()])
            .and_then(|_| {
                let labels = nifti::read(&mask_path)
                    .and_then(|f| f.into_labels())
                    .map_err(|e| Error::Protocol(format!("{}: {e}", mask_path.display())))?;
                if labels.dims() != image.dims() || labels.data().iter().any(|&l| l > 1) {
                    return Err(Error::Protocol(format!(
                        "{}: mask must be 0/1 on {:?}",
                        mask_path.display(),
                        image.dims().0
                    )));
                }
                let mask = crate::volgrid::class_mask(&labels, 1)?;
                let probs = self.read_probs(&prob_path, image, 2)?;
                Ok(Segmentation { mask, probs })
            });
        self.cleanup(&id);
        result
    }
}

impl Specialist for FileOracle {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict(&self, scan_id: &str, image: &Volume) -> Result<ProbVolume> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let id = self.request("predict", Some(scan_id), |id| {
            write_atomic(
                &self.path(format!("req_{id}.nii")),
                &nifti::encode(GridRef::Volume(image), image.spacing())?,
            )
        })?;
        let prob_path = self.path(format!("resp_{id}.prob.nii"));
        let result = self
            .wait_for(std::slice::from_ref(&prob_path))
            .and_then(|_| self.read_probs(&prob_path, image, self.num_classes));
        self.cleanup(&id);
        result
    }

    fn fit(&mut self, items: &[TrainingItem<'_>]) -> Result<()> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let id = self.request("fit", None, |id| {
            let dir = self.path(format!("req_{id}.fit"));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for item in items {
                let spacing = item.image.spacing();
                let labels = item.target.labels();
                nifti::write(
                    dir.join(format!("{}.img.nii", item.scan_id)),
                    GridRef::Volume(item.image),
                    spacing,
                )?;
                nifti::write(
                    dir.join(format!("{}.target.nii", item.scan_id)),
                    GridRef::Labels(labels),
                    spacing,
                )?;
                if let Some(sel) = item.selection {
                    nifti::write(
                        dir.join(format!("{}.vls.nii", item.scan_id)),
                        GridRef::Mask(sel),
                        spacing,
                    )?;
                }
                let mut m = ScanManifest::new(item.scan_id, labels.num_classes());
                for c in 1..labels.num_classes() as u8 {
                    let status = if item.target.pseudo_classes().contains(&c) {
                        ClassStatus::Pseudo
                    } else if item.supervised.contains(&c) {
                        ClassStatus::Labeled
                    } else {
                        ClassStatus::Unlabeled
                    };
                    m.set_status(c, status);
                }
                m.write(dir.join(format!("{}.manifest", item.scan_id)))?;
            }
            Ok(())
        })?;
        let done = self.path(format!("resp_{id}.done"));
        let result = self.wait_for(std::slice::from_ref(&done)).and_then(|_| {
            let text = fs::read_to_string(&done).map_err(|e| Error::io(&done, e))?;
            match text.lines().next() {
                Some(l) if l.starts_with("error") => {
                    Err(Error::Protocol(format!("fit failed: {l}")))
                }
                _ => Ok(()),
            }
        });
        self.cleanup(&id);
        result
    }
}
