use std::io::Write;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hpstudy"))
}

fn write_config(dir: &std::path::Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    let mut f = std::fs::File::create(&path).unwrap();
    f.write_all(body.as_bytes()).unwrap();
    path
}

#[test]
fn list_experiments_names_all_kinds() {
    let out = bin().arg("list-experiments").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for kind in [
        "reproduction",
        "stability",
        "approximation",
        "zero_bc",
        "bem_single_layer",
        "bem_hypersingular",
        "embedding_scaling",
        "faa_check",
        "mollifier_audit",
    ] {
        assert!(text.contains(kind), "missing {kind} in: {text}");
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let tmp = std::env::temp_dir().join("hpstudy_unknown_key");
    std::fs::create_dir_all(&tmp).unwrap();
    let cfg = write_config(
        &tmp,
        "[[experiment]]\nkind = \"mollifier_audit\"\nbogus_key = 1\n",
    );
    let out = bin().arg("validate").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("bogus_key"), "{err}");
}

#[test]
fn invalid_indices_name_the_assumption() {
    let tmp = std::env::temp_dir().join("hpstudy_bad_indices");
    std::fs::create_dir_all(&tmp).unwrap();
    let cfg = write_config(
        &tmp,
        "[[experiment]]\nkind = \"approximation\"\ns = 1.0\nr = 0.5\n",
    );
    let out = bin().arg("validate").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("r = s+mu"), "{err}");
}

#[test]
fn run_writes_reports_and_exits_zero() {
    let tmp = std::env::temp_dir().join("hpstudy_run_ok");
    let _ = std::fs::remove_dir_all(&tmp);
    std::fs::create_dir_all(&tmp).unwrap();
    let cfg = write_config(
        &tmp,
        "[[experiment]]\nkind = \"embedding_scaling\"\nname = \"scale\"\ns = 0.5\n\n\
         [[experiment]]\nkind = \"mollifier_audit\"\nname = \"moll\"\nk_max = 2\n",
    );
    let out = bin().arg("run").arg(&cfg).env("HPSTUDY_WORKERS", "2").output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.join("scale.csv")).unwrap();
    assert!(csv.starts_with("level,p,h,label,value\n"));
    assert!(tmp.join("moll.csv").exists());
    let md = std::fs::read_to_string(tmp.join("summary.md")).unwrap();
    assert!(md.contains("embedding_scaling") && md.contains("mollifier_audit"));
    assert!(md.contains("result: pass"));

    // Same config again: byte-identical reports.
    let _ = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(csv, std::fs::read_to_string(tmp.join("scale.csv")).unwrap());
}

#[test]
fn missing_config_exits_two() {
    let out = bin().arg("run").arg("/nonexistent/cfg.toml").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
