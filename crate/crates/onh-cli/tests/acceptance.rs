//! Acceptance criterion 11: format round trips are byte-stable and
//! repeated CLI runs with the same seed produce byte-identical artifacts
//! (the run log, which carries timestamps, is excluded). Criteria 1-10
//! live in the core crate's acceptance suite.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use onh_core::phantom::{generate, PhantomConfig};
use onh_core::pointnet::{load_model, save_model, NetDims, PointNetModel, TrainConfig};
use onh_core::volume::{load_volume, save_volume, SubjectMeta};

fn onh(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_onh"))
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "onh {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// All files under `dir` except run.log, keyed by relative name.
fn artifact_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name() != "run.log")
        .map(|e| (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap()))
        .collect()
}

fn assert_dirs_match(a: &Path, b: &Path, what: &str) {
    let (fa, fb) = (artifact_bytes(a), artifact_bytes(b));
    assert_eq!(
        fa.keys().collect::<Vec<_>>(),
        fb.keys().collect::<Vec<_>>(),
        "{what}: different artifact sets"
    );
    for (name, bytes) in &fa {
        assert_eq!(bytes, &fb[name], "{what}: {name} differs between runs");
    }
}

fn phantom_cfg(id: &str, seed: u64, diseased: bool) -> PhantomConfig {
    let mut cfg = PhantomConfig::default().with_scan_grid(96, 33, 256);
    if diseased {
        cfg.lcd_um = 520.0;
        cfg.pld_um = 420.0;
        cfg.rnfl_base_um = 70.0;
    }
    cfg.noise_sigma_um = 2.0;
    cfg.seed = seed;
    cfg.subject = Some(SubjectMeta {
        id: id.to_string(),
        age: None,
        sex: None,
        md_db: Some(if diseased { -20.0 } else { -0.5 }),
        cohort: if diseased { None } else { Some("normal".into()) },
    });
    cfg
}

#[test]
fn criterion_11_round_trips_and_cli_idempotence() {
    let dir = tempfile::tempdir().unwrap();

    // volume round trip: save -> load -> save is byte-stable
    let volume = generate(&phantom_cfg("rt", 77, false)).unwrap();
    let (v1, v2) = (dir.path().join("a.onhv"), dir.path().join("b.onhv"));
    save_volume(&volume, &v1).unwrap();
    save_volume(&load_volume(&v1).unwrap(), &v2).unwrap();
    assert_eq!(fs::read(&v1).unwrap(), fs::read(&v2).unwrap(), "onhv round trip");

    // model round trip
    let model = PointNetModel::init(&NetDims::default(), 5).unwrap();
    let (m1, m2) = (dir.path().join("a.onhpn"), dir.path().join("b.onhpn"));
    save_model(&model, &m1).unwrap();
    save_model(&load_model(&m1).unwrap(), &m2).unwrap();
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap(), "onhpn round trip");

    // a small labeled cohort shared by the CLI runs
    let data = dir.path().join("data");
    fs::create_dir_all(&data).unwrap();
    for k in 0..10u64 {
        for diseased in [false, true] {
            let name = format!("{}-{k:02}", if diseased { "adv" } else { "nrm" });
            let cfg = phantom_cfg(&name, 300 + 2 * k + u64::from(diseased), diseased);
            save_volume(&generate(&cfg).unwrap(), data.join(format!("{name}.onhv"))).unwrap();
        }
    }
    let mut train_cfg = TrainConfig::default();
    train_cfg.dims = NetDims::tiny();
    train_cfg.epochs = 2;
    train_cfg.folds = 2;
    train_cfg.batch_size = 8;
    train_cfg.augment.sample_n = 64;
    let cfg_path = dir.path().join("train.json");
    fs::write(&cfg_path, serde_json::to_string(&train_cfg).unwrap()).unwrap();

    let data_s = data.to_str().unwrap();
    let cfg_s = cfg_path.to_str().unwrap();
    let run = |out: &Path, step: &str| {
        let out_s = out.to_str().unwrap().to_string();
        match step {
            "train" => onh(&[
                "train", "--data", data_s, "--task", "normal-advanced", "--out", &out_s,
                "--config", cfg_s, "--seed", "11",
            ]),
            "eval" => onh(&[
                "eval", "--model",
                dir.path().join("train-1").join("model.onhpn").to_str().unwrap(),
                "--data", data_s, "--task", "normal-advanced", "--out", &out_s,
            ]),
            "criticals" => onh(&[
                "criticals", "--model",
                dir.path().join("train-1").join("model.onhpn").to_str().unwrap(),
                "--data", data_s, "--task", "normal-advanced", "--out", &out_s,
            ]),
            "stats" => onh(&["stats", "--data", data_s, "--out", &out_s]),
            _ => unreachable!(),
        }
    };
    for step in ["train", "eval", "criticals", "stats"] {
        let (a, b) = (
            dir.path().join(format!("{step}-1")),
            dir.path().join(format!("{step}-2")),
        );
        run(&a, step);
        run(&b, step);
        assert_dirs_match(&a, &b, step);
    }

    // phantom + params + cloud idempotence through the binary
    for sub in ["ph-1", "ph-2"] {
        let out = dir.path().join(sub);
        onh(&[
            "phantom", "--out", out.to_str().unwrap(), "--per-group", "1", "--seed", "9",
        ]);
        let vol = fs::read_dir(&out)
            .unwrap()
            .filter_map(|e| e.ok().map(|e| e.path()))
            .find(|p| p.extension().is_some_and(|e| e == "onhv"))
            .unwrap();
        onh(&[
            "params", "--in", out.to_str().unwrap(), "--out",
            out.join("params.csv").to_str().unwrap(),
        ]);
        onh(&[
            "cloud", "--in", vol.to_str().unwrap(), "--out",
            out.join("cloud.onhpc").to_str().unwrap(), "--seed", "9",
        ]);
    }
    assert_dirs_match(&dir.path().join("ph-1"), &dir.path().join("ph-2"), "phantom");

    println!(
        "criterion 11 [PASS] format round trips: .onhv and .onhpn byte-stable; \
         phantom/params/cloud/train/eval/criticals/stats reruns byte-identical \
         excluding run.log"
    );
}
