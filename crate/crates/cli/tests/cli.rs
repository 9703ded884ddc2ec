use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chisep_core::io::{load_volume, save_labels, save_mask, save_volume};
use chisep_core::roi::RoiTable;
use chisep_core::volume::{BinaryMask, LabelVolume, ScalarVolume, Unit};

fn chisep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chisep"))
        .args(args)
        .output()
        .expect("failed to spawn chisep")
}

fn ok(args: &[&str]) -> String {
    let out = chisep(args);
    assert!(
        out.status.success(),
        "chisep {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn run_all_matches_stagewise_run() {
    let tmp = tempfile::tempdir().unwrap();
    let all = tmp.path().join("all");
    ok(&["run-all", "--seed", "5", "--out", s(&all)]);
    for f in [
        "gre/gre.json",
        "gre/mag_e1.nii",
        "gre/phase_e5.nii",
        "mask.nii",
        "field.nii",
        "tissue_field.nii",
        "vsharp_mask.nii",
        "r2star.nii",
        "r2prime.nii",
        "chi_para.nii",
        "chi_dia.nii",
        "qsm.nii",
        "chisep.provenance.json",
    ] {
        assert!(all.join(f).is_file(), "missing {f}");
    }
    let prov = read_json(&all.join("chisep.provenance.json"));
    assert_eq!(prov["stage"], "chisep");
    assert!(prov["config_hash"].as_str().unwrap().len() == 64);

    let st = tmp.path().join("stages");
    let p = |f: &str| st.join(f).to_str().unwrap().to_string();
    ok(&["simulate", "--seed", "5", "--out", s(&st)]);
    ok(&["unwrap-combine", "--gre", &p("gre"), "--mask", &p("mask.nii"), "--out", s(&st)]);
    ok(&["vsharp", "--field", &p("field.nii"), "--mask", &p("field_mask.nii"), "--out", s(&st)]);
    ok(&["r2star", "--gre", &p("gre"), "--mask", &p("mask.nii"), "--out", s(&st)]);
    ok(&[
        "chisep",
        "--field",
        &p("tissue_field.nii"),
        "--r2prime",
        &p("r2prime.nii"),
        "--mask",
        &p("vsharp_mask.nii"),
        "--mask",
        &p("r2star_valid.nii"),
        "--gre",
        &p("gre"),
        "--out",
        s(&st),
    ]);
    for f in ["tissue_field.nii", "r2prime.nii", "chi_para.nii", "chi_dia.nii", "qsm.nii"] {
        assert_eq!(fs::read(all.join(f)).unwrap(), fs::read(st.join(f)).unwrap(), "{f} differs");
    }

    let para = load_volume(all.join("chi_para.nii")).unwrap();
    let dia = load_volume(all.join("chi_dia.nii")).unwrap();
    assert!(para.data().iter().all(|&v| v >= 0.0));
    assert!(dia.data().iter().all(|&v| v <= 0.0));
}

#[test]
fn missing_input_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let gone = tmp.path().join("nowhere").join("field.nii");
    let mask = tmp.path().join("mask.nii");
    save_mask(&BinaryMask::full([4, 4, 4]), [1.0; 3], &mask).unwrap();
    let out = chisep(&["vsharp", "--field", s(&gone), "--mask", s(&mask), "--out", s(tmp.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(s(&gone)), "stderr does not name the file: {err}");
    assert!(!tmp.path().join("vsharp.provenance.json").exists());
}

#[test]
fn regress_reference_nuclei_and_replay() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["regress", "--out", s(tmp.path())]);
    let r = read_json(&tmp.path().join("regression.json"));
    assert!((r["slope"].as_f64().unwrap() - 6.822408831762185).abs() < 1e-9);
    assert!((r["intercept"].as_f64().unwrap() + 14.789187758283461).abs() < 1e-9);
    assert_eq!(r["n"], 5);

    let prov = tmp.path().join("regress.provenance.json");
    let before = fs::read(tmp.path().join("regression.json")).unwrap();
    ok(&["replay", s(&prov)]);
    assert_eq!(before, fs::read(tmp.path().join("regression.json")).unwrap());
}

#[test]
fn regress_from_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("pts.csv");
    fs::write(&csv, "iron,chi_para\n1,3\n2,5\n3,7\n4,9.5\n").unwrap();
    ok(&["regress", "--input", s(&csv), "--out", s(tmp.path())]);
    let r = read_json(&tmp.path().join("regression.json"));
    assert!((r["slope"].as_f64().unwrap() - 2.15).abs() < 1e-12);
    assert!((r["intercept"].as_f64().unwrap() - 0.75).abs() < 1e-12);
}

#[test]
fn config_file_round_trip_and_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&["show-config"]);
    let path = tmp.path().join("pipeline.toml");
    fs::write(&path, &text).unwrap();
    assert_eq!(ok(&["--config", s(&path), "show-config"]), text);

    fs::write(&path, text.replace("r_max_mm = 12.0", "r_max_mm = -1.0")).unwrap();
    let out = chisep(&["--config", s(&path), "show-config"]);
    assert!(!out.status.success());

    fs::write(&path, "[vsharp]\nradius = 3\n").unwrap();
    let out = chisep(&["--config", s(&path), "show-config"]);
    assert!(!out.status.success(), "unknown key accepted");
}

fn write_cohort(dir: &Path) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    let dims = [6, 5, 4];
    let vs = [1.0; 3];
    let mut rows = String::from("id,age,sex,site,chi_para,chi_dia,qsm,t1\n");
    for s in 0..3 {
        let off = s as f64;
        let para = ScalarVolume::from_fn(dims, vs, Unit::Ppb, |i, _, _| 10.0 * (i as f64 + 1.0) + off);
        let dia = ScalarVolume::from_fn(dims, vs, Unit::Ppb, |_, j, _| -(j as f64) - off);
        let qsm = para.with_data(
            para.data().iter().zip(dia.data()).map(|(a, b)| a + b).collect(),
            Unit::Ppb,
        )
        .unwrap();
        let t1 = ScalarVolume::from_fn(dims, vs, Unit::Dimensionless, |i, j, k| {
            (100 + 7 * i + 3 * j + 11 * k) as f64 * (1.0 + 0.1 * off)
        });
        for (name, v) in [("para", &para), ("dia", &dia), ("qsm", &qsm), ("t1", &t1)] {
            save_volume(v, dir.join(format!("s{s}_{name}.nii"))).unwrap();
        }
        rows.push_str(&format!(
            "s{s},{},{},{},s{s}_para.nii,s{s}_dia.nii,s{s}_qsm.nii,s{s}_t1.nii\n",
            60 + s,
            if s % 2 == 0 { "F" } else { "M" },
            "A"
        ));
    }
    let manifest = dir.join("subjects.csv");
    fs::write(&manifest, rows).unwrap();
    let mask = dir.join("mask.nii");
    save_mask(&BinaryMask::full(dims), vs, &mask).unwrap();

    // two label sets overlapping on the x = 2 plane
    let labels_a = LabelVolume::new(
        dims,
        vs,
        (0..120).map(|v| if v % 6 <= 2 { 1 } else { 0 }).collect(),
        BTreeMap::from([(1, "Putamen".to_string())]),
    )
    .unwrap();
    let labels_b = LabelVolume::new(
        dims,
        vs,
        (0..120).map(|v| if v % 6 >= 2 { 2 } else { 0 }).collect(),
        BTreeMap::from([(2, "Caudate".to_string())]),
    )
    .unwrap();
    let (la, lb) = (dir.join("a.nii"), dir.join("b.nii"));
    save_labels(&labels_a, &la, dir.join("a.csv")).unwrap();
    save_labels(&labels_b, &lb, dir.join("b.csv")).unwrap();
    (manifest, mask, la, lb)
}

#[test]
fn atlas_and_roi_on_small_cohort() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, mask, la, lb) = write_cohort(tmp.path());
    let out = tmp.path().join("out");
    ok(&["atlas", "--manifest", s(&manifest), "--mask", s(&mask), "--out", s(&out)]);
    let mean = load_volume(out.join("chi_para_mean.nii")).unwrap();
    // subjects add 0, 1, 2 to 10 * (i + 1)
    assert!((mean.get(0, 0, 0) - 11.0).abs() < 1e-12);
    assert!((mean.get(5, 4, 3) - 61.0).abs() < 1e-12);
    let sd = load_volume(out.join("chi_para_sd.nii")).unwrap();
    assert!((sd.get(3, 2, 1) - 1.0).abs() < 1e-12);
    for name in ["hybrid_mean.nii", "hybrid/s0.nii", "qsm_rsd.nii", "chi_dia_rsd_undefined.nii"] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    let prov = read_json(&out.join("atlas.provenance.json"));
    assert_eq!(prov["details"]["cohort"]["n_subjects"], 3);

    let a_names = tmp.path().join("a.csv");
    let b_names = tmp.path().join("b.csv");
    ok(&[
        "roi",
        "--manifest",
        s(&manifest),
        "--labels",
        s(&la),
        "--names",
        s(&a_names),
        "--labels",
        s(&lb),
        "--names",
        s(&b_names),
        "--out",
        s(&out),
    ]);
    let table = RoiTable::read_csv(&out.join("roi_table.csv")).unwrap();
    let names: Vec<&str> = table.rows.iter().map(|r| r.roi_name.as_str()).collect();
    assert_eq!(names, ["Caudate", "Putamen"]);
    // x = 2 is shared, so Putamen keeps x in {0, 1}: chi_para medians 15 + s
    let put = &table.rows[1];
    assert_eq!(put.n_subjects, 3);
    assert!((put.chi_para_mean - 16.0).abs() < 1e-12);
    assert!((put.chi_para_sd - 1.0).abs() < 1e-12);
    // Caudate keeps x in {3, 4, 5}: median 50 + s
    assert!((table.rows[0].chi_para_mean - 51.0).abs() < 1e-12);
}

#[test]
fn phantom_spec_output_is_accepted_by_simulate() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = ok(&["phantom-spec"]);
    let mut v: serde_json::Value = serde_json::from_str(&spec).unwrap();
    v["dims"] = serde_json::json!([24, 24, 24]);
    v["shapes"] = serde_json::json!([]);
    let path = tmp.path().join("spec.json");
    fs::write(&path, v.to_string()).unwrap();
    ok(&["simulate", "--spec", s(&path), "--out", s(tmp.path())]);
    let m = load_volume(tmp.path().join("gre/mag_e1.nii")).unwrap();
    assert_eq!(m.dims(), [24, 24, 24]);
}
