use std::fs;
use std::time::Duration;

use ipnp::oracles::{FileOracle, PhantomGeneralist, PhantomSpecialist};
use ipnp::pipeline::{
    initial_training, phantom_dataset, pseudo_label_round, retrain, run_pipeline, OrganOutcome,
    PipelineConfig, SupervisionMode,
};

fn config(extra: &str) -> PipelineConfig {
    let base = "phantom.train_scans=6\nphantom.test_scans=2\nkeep_fraction=0.33\nrounds=3\n";
    PipelineConfig::parse(&format!("{base}{extra}")).unwrap()
}

#[test]
fn supervision_invariants_hold_across_rounds() {
    let cfg = config("");
    let data = phantom_dataset(&cfg).unwrap();
    let mut spec = PhantomSpecialist::untrained(data.num_classes, cfg.phantom.specialist);
    let mut gen = PhantomGeneralist::new(cfg.phantom.generalist);
    for s in &data.train {
        spec.register(s.id.clone(), s.truth.clone().unwrap());
        gen.register(s.id.clone(), s.truth.clone().unwrap());
    }
    let mut sups = data.supervision.clone();
    initial_training(&data.train, &sups, &mut spec, SupervisionMode::PartialSup).unwrap();
    for t in 1..=cfg.rounds {
        let before = sups.clone();
        pseudo_label_round(&data.train, &mut sups, &spec, &gen, &cfg, t).unwrap();
        for (now, was) in sups.iter().zip(&before) {
            assert!(was.pseudo.is_subset(&now.pseudo));
            assert!(now.pseudo.is_subset(&now.unlabeled));
            let all: Vec<u8> = now.labeled.union(&now.unlabeled).copied().collect();
            assert_eq!(all, (1..data.num_classes as u8).collect::<Vec<_>>());
            for (v, &l) in now.partial_labels.data().iter().enumerate() {
                if l != 0 {
                    assert_eq!(now.target.labels().data()[v], l);
                }
            }
            for (v, &y) in now.target.labels().data().iter().enumerate() {
                assert!(
                    y == 0 || now.labeled.contains(&y) || now.pseudo.contains(&y),
                    "voxel {v}"
                );
            }
        }
        retrain(
            &data.train,
            &sups,
            &mut spec,
            SupervisionMode::PartialSup,
            true,
        )
        .unwrap();
    }
}

#[test]
fn without_pseudo_labels_retrain_matches_initial_training() {
    let cfg = config("");
    let data = phantom_dataset(&cfg).unwrap();
    let mut a = PhantomSpecialist::untrained(data.num_classes, cfg.phantom.specialist);
    for s in &data.train {
        a.register(s.id.clone(), s.truth.clone().unwrap());
    }
    let mut b = a.clone();
    initial_training(
        &data.train,
        &data.supervision,
        &mut a,
        SupervisionMode::PartialSup,
    )
    .unwrap();
    retrain(
        &data.train,
        &data.supervision,
        &mut b,
        SupervisionMode::PartialSup,
        false,
    )
    .unwrap();
    for c in 0..data.num_classes as u8 {
        assert_eq!(a.quality(c), b.quality(c));
    }
    let labeled: std::collections::BTreeSet<u8> = data
        .supervision
        .iter()
        .flat_map(|s| s.labeled.clone())
        .collect();
    for c in 1..data.num_classes as u8 {
        assert_eq!(a.quality(c).is_some(), labeled.contains(&c));
    }
}

#[test]
fn unreachable_generalist_skips_organs() {
    let cfg = config("");
    let data = phantom_dataset(&cfg).unwrap();
    let mut spec = PhantomSpecialist::with_quality(data.num_classes, cfg.phantom.specialist, 1.0);
    for s in &data.train {
        spec.register(s.id.clone(), s.truth.clone().unwrap());
    }
    let dir = tempfile::tempdir().unwrap();
    let gen = FileOracle::new(dir.path(), 2, Duration::from_millis(30)).unwrap();
    let mut sups = data.supervision.clone();
    let report = pseudo_label_round(&data.train, &mut sups, &spec, &gen, &cfg, 1).unwrap();
    assert!(!report.records.is_empty());
    assert!(report.records.iter().all(|r| matches!(
        r.outcome,
        OrganOutcome::Skipped {
            reason: "oracle-error",
            ..
        }
    )));
    assert_eq!(sups, data.supervision);
}

#[test]
fn gate_keeps_accepted_entropy_decreasing() {
    let cfg = config("entropy_gate_from_round=1");
    let out = run_pipeline(&cfg).unwrap();
    let mut later = 0;
    for s in &out.supervision {
        for st in s.organs.values() {
            for w in st.history.windows(2) {
                assert!(w[1].mean_entropy < w[0].mean_entropy, "{:?}", st.history);
                later += 1;
            }
            assert!(st.rounds_completed <= cfg.rounds);
        }
    }
    assert!(later > 0, "no organ was accepted twice");
}

#[test]
fn runs_write_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let mut cfg = config("");
        cfg.output_dir = Some(d.path().to_path_buf());
        run_pipeline(&cfg).unwrap();
    }
    let mut names: Vec<_> = walk(a.path());
    names.sort();
    assert!(names.iter().any(|n| n.ends_with("round_3.csv")));
    assert!(names.iter().any(|n| n.starts_with("pred/")));
    for n in &names {
        assert_eq!(
            fs::read(a.path().join(n)).unwrap(),
            fs::read(b.path().join(n)).unwrap(),
            "{n}"
        );
    }
    assert_eq!(names, {
        let mut m = walk(b.path());
        m.sort();
        m
    });
}

fn walk(root: &std::path::Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().flatten() {
            if e.path().is_dir() {
                stack.push(e.path());
            } else {
                out.push(e.path().strip_prefix(root).unwrap().display().to_string());
            }
        }
    }
    out
}

#[test]
fn cooperative_pipeline_beats_baseline() {
    let coop = "generalist.cooperativeness=1\n";
    let ipnp = run_pipeline(&config(coop)).unwrap().mean_dsc.unwrap();
    let base = run_pipeline(&config(&format!("{coop}rounds=0")))
        .unwrap()
        .mean_dsc
        .unwrap();
    assert!(ipnp > base, "{ipnp} vs {base}");
}
