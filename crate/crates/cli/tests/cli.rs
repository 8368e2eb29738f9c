use std::path::Path;
use std::process::Command;

fn diti() -> Command {
    Command::new(env!("CARGO_BIN_EXE_diti"))
}

fn write_tiny_config(path: &Path, out: &Path) {
    let status = diti()
        .args(["init-config", "--seed", "3", "--config"])
        .arg(path)
        .arg("--out")
        .arg(out)
        .status()
        .unwrap();
    assert!(status.success());
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v["dataset"]["n_samples"] = 100.into();
    for net in ["/dm/net", "/diti/encoder", "/diti/decoder"] {
        *v.pointer_mut(&format!("{net}/hidden")).unwrap() = serde_json::json!([16]);
    }
    v["dm"]["optim"]["iterations"] = 10.into();
    v["diti"]["optim"]["iterations"] = 10.into();
    v["theory"]["n_pairs"] = 20.into();
    v["theory"]["mc_per_pair"] = 1.into();
    v["generate"]["sampling_steps"] = 4.into();
    v["generate"]["n_images"] = 1.into();
    v["probe"]["iterations"] = 20.into();
    std::fs::write(path, v.to_string()).unwrap();
}

#[test]
fn stages_run_in_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let out = dir.path().join("run");
    write_tiny_config(&cfg, &out);
    for args in [
        vec!["gen-data"],
        vec!["train-dm"],
        vec!["train-diti"],
        vec!["verify-theory"],
        vec!["probe"],
        vec!["generate", "--mode", "interpolate"],
        vec!["generate", "--mode", "manipulate"],
        vec!["report"],
    ] {
        let o = diti().args(&args).arg("--config").arg(&cfg).output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["dm.ckpt", "diti.ckpt", "probe_diti.csv", "acceptance_summary.csv", "report.manifest.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn out_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write_tiny_config(&cfg, &dir.path().join("unused"));
    let other = dir.path().join("elsewhere");
    let o = diti().arg("gen-data").arg("--config").arg(&cfg).arg("--out").arg(&other).output().unwrap();
    assert!(o.status.success());
    assert!(other.join("images.bin").is_file());
    assert!(!dir.path().join("unused").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(diti().arg("bogus").output().unwrap().status.code(), Some(1));
    assert_eq!(diti().arg("gen-data").output().unwrap().status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"seed\": 1,\n  \"schedule\": 5\n}\n").unwrap();
    let o = diti().arg("gen-data").arg("--config").arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&o.stderr);
    assert!(msg.contains("line 3"), "{msg}");

    let cfg = dir.path().join("cfg.json");
    write_tiny_config(&cfg, &dir.path().join("empty"));
    let o = diti().arg("train-dm").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
