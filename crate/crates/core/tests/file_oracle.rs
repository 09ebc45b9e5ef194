//! Exchange-directory protocol against a stub responder thread.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use ipnp::nifti::{self, GridRef};
use ipnp::oracles::{FileOracle, Generalist, Specialist, TrainingItem};
use ipnp::prompting::{prompts_from_mask, BoxPromptPair};
use ipnp::vls::SupervisionTarget;
use ipnp::volgrid::{Dims, LabelMap, Mask, ProbVolume, Spacing, Volume};
use ipnp::Error;

#[derive(Clone, Copy)]
enum Reply {
    Echo,
    WrongDims,
    Silent,
    FitError,
}

struct Responder {
    stop: Arc<AtomicBool>,
    handle: Option<thread::JoinHandle<()>>,
}

impl Drop for Responder {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn write_atomic(path: PathBuf, bytes: &[u8]) {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).unwrap();
    fs::rename(tmp, path).unwrap();
}

fn answer(root: &Path, id: &str, task: &str, mask: &Mask, reply: Reply) {
    let dims = match reply {
        Reply::WrongDims => Dims::new(2, 2, 2).unwrap(),
        _ => mask.dims(),
    };
    let spacing = Spacing::default();
    match task {
        "segment" => {
            let m = if dims == mask.dims() {
                mask.clone()
            } else {
                Mask::empty(dims)
            };
            let n = dims.len();
            let mut p = vec![0.1f32; n];
            p.extend(std::iter::repeat(0.9).take(n));
            for v in 0..n {
                if !m.data()[v] {
                    p[v] = 0.8;
                    p[n + v] = 0.2;
                }
            }
            let probs = ProbVolume::new(2, dims, p).unwrap();
            write_atomic(
                root.join(format!("resp_{id}.nii")),
                &nifti::encode(GridRef::Mask(&m), spacing).unwrap(),
            );
            write_atomic(
                root.join(format!("resp_{id}.prob.nii")),
                &nifti::encode(GridRef::Probs(&probs), spacing).unwrap(),
            );
        }
        "predict" => {
            let probs = ProbVolume::uniform(3, dims).unwrap();
            write_atomic(
                root.join(format!("resp_{id}.prob.nii")),
                &nifti::encode(GridRef::Probs(&probs), spacing).unwrap(),
            );
        }
        "fit" => {
            let dir = root.join(format!("req_{id}.fit"));
            let n = fs::read_dir(&dir).unwrap().count();
            let body = match reply {
                Reply::FitError => "error: stub refuses\n".to_string(),
                _ => format!("ok {n}\n"),
            };
            write_atomic(root.join(format!("resp_{id}.done")), body.as_bytes());
        }
        other => panic!("unknown task {other}"),
    }
}

fn responder(root: PathBuf, mask: Mask, reply: Reply) -> Responder {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let handle = thread::spawn(move || {
        while !flag.load(Ordering::SeqCst) {
            for entry in fs::read_dir(&root).unwrap().flatten() {
                let name = entry.file_name().to_string_lossy().into_owned();
                let Some(id) = name
                    .strip_prefix("req_")
                    .and_then(|s| s.strip_suffix(".task"))
                else {
                    continue;
                };
                let text = fs::read_to_string(entry.path()).unwrap();
                let task = text.lines().next().unwrap().to_string();
                fs::remove_file(entry.path()).unwrap();
                if !matches!(reply, Reply::Silent) {
                    answer(&root, id, &task, &mask, reply);
                }
            }
            thread::sleep(Duration::from_millis(5));
        }
    });
    Responder {
        stop,
        handle: Some(handle),
    }
}

fn fixture() -> (Volume, Mask, BoxPromptPair) {
    let dims = Dims::new(12, 10, 8).unwrap();
    let image = Volume::new(
        dims,
        Spacing::default(),
        (0..dims.len()).map(|i| i as f32).collect(),
    )
    .unwrap();
    let mask = Mask::from_fn(dims, |[x, y, z]| {
        (3..8).contains(&x) && (2..7).contains(&y) && (2..6).contains(&z)
    });
    let prompts = prompts_from_mask(&mask, 1, 2).unwrap();
    (image, mask, prompts)
}

fn oracle(root: &Path, timeout_ms: u64) -> FileOracle {
    FileOracle::new(root, 3, Duration::from_millis(timeout_ms))
        .unwrap()
        .with_poll_interval(Duration::from_millis(2))
}

#[test]
fn segment_round_trip_returns_the_stub_mask() {
    let dir = tempfile::tempdir().unwrap();
    let (image, mask, prompts) = fixture();
    let _r = responder(dir.path().to_path_buf(), mask.clone(), Reply::Echo);
    let seg = oracle(dir.path(), 5000)
        .segment("s0", &image, &prompts)
        .unwrap();
    assert_eq!(seg.mask, mask);
    assert_eq!(seg.probs.num_classes(), 2);
    // request and response files are cleaned up
    thread::sleep(Duration::from_millis(20));
    let left: Vec<_> = fs::read_dir(dir.path()).unwrap().flatten().collect();
    assert!(left.is_empty(), "{left:?}");
}

#[test]
fn predict_and_fit_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (image, mask, _) = fixture();
    let _r = responder(dir.path().to_path_buf(), mask.clone(), Reply::Echo);
    let mut o = oracle(dir.path(), 5000);
    let p = o.predict("s0", &image).unwrap();
    assert_eq!(p.num_classes(), 3);
    let labels = LabelMap::new(
        3,
        image.dims(),
        mask.data().iter().map(|&b| b as u8).collect(),
    )
    .unwrap();
    let target = SupervisionTarget::ground_truth(labels);
    let supervised = [1u8].into();
    o.fit(&[TrainingItem {
        scan_id: "s0",
        image: &image,
        target: &target,
        supervised: &supervised,
        selection: Some(&mask),
    }])
    .unwrap();
}

#[test]
fn fit_error_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (image, mask, _) = fixture();
    let _r = responder(dir.path().to_path_buf(), mask.clone(), Reply::FitError);
    let target = SupervisionTarget::ground_truth(LabelMap::background(3, image.dims()).unwrap());
    let supervised = Default::default();
    let err = oracle(dir.path(), 5000)
        .fit(&[TrainingItem {
            scan_id: "s0",
            image: &image,
            target: &target,
            supervised: &supervised,
            selection: None,
        }])
        .unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err:?}");
}

#[test]
fn silence_times_out() {
    let dir = tempfile::tempdir().unwrap();
    let (image, mask, prompts) = fixture();
    let _r = responder(dir.path().to_path_buf(), mask, Reply::Silent);
    let err = oracle(dir.path(), 100)
        .segment("s0", &image, &prompts)
        .unwrap_err();
    assert!(matches!(err, Error::OracleUnavailable(_)), "{err:?}");
}

#[test]
fn wrong_grid_is_a_protocol_error() {
    let dir = tempfile::tempdir().unwrap();
    let (image, mask, prompts) = fixture();
    let _r = responder(dir.path().to_path_buf(), mask, Reply::WrongDims);
    let o = oracle(dir.path(), 5000);
    assert!(matches!(
        o.segment("s0", &image, &prompts),
        Err(Error::Protocol(_))
    ));
    assert!(matches!(o.predict("s0", &image), Err(Error::Protocol(_))));
}
