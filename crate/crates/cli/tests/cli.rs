use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn hsmae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsmae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

fn synth(dir: &TempDir, name: &str, dims: [&str; 3], classes: &str, seed: &str) -> String {
    let path = p(dir, name);
    let out = hsmae(&[
        "gen-synth", "--h", dims[0], "--w", dims[1], "--b", dims[2], "--classes", classes, "--seed",
        seed, "--out", &path,
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    path
}

fn micro_pretrain(dir: &TempDir, cube: &str, extra: &[&str]) -> (String, String) {
    let ck = p(dir, "model.ckpt");
    let log = p(dir, "model.jsonl");
    let mut args = vec![
        "pretrain", cube, "--out", &ck, "--log", &log, "--preset", "micro", "--steps", "3", "--seed",
        "5",
    ];
    args.extend_from_slice(extra);
    let out = hsmae(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    (ck, log)
}

#[test]
fn help_for_every_command() {
    for cmd in ["gen-synth", "pretrain", "finetune", "eval", "reconstruct", "inspect"] {
        let out = hsmae(&[cmd, "--help"]);
        assert_eq!(code(&out), 0, "{cmd}");
        assert!(stdout(&out).contains("Usage"), "{cmd}");
    }
    assert_eq!(code(&hsmae(&["--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&hsmae(&[])), 1);
    assert_eq!(code(&hsmae(&["inspect", "--bogus"])), 1);
    assert_eq!(code(&hsmae(&["frobnicate"])), 1);
}

#[test]
fn gen_synth_is_loadable_and_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = synth(&dir, "a.hsc", ["27", "27", "24"], "3", "7");
    let b = synth(&dir, "b.hsc", ["27", "27", "24"], "3", "7");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let split = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert!(split.starts_with("i,j,label,split\n"));

    let out = hsmae(&["inspect", &a]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("H 27\n") && text.contains("W 27\n") && text.contains("B 24\n"));
    assert!(text.contains("wavelengths 0.4000 - 2.5000 um"), "{text}");
    assert!(text.contains("tokens 3 x 3 x 3 = 27"), "{text}");
}

#[test]
fn gen_synth_rejects_bad_dims() {
    let dir = TempDir::new().unwrap();
    let out = hsmae(&["gen-synth", "--h", "4", "--w", "27", "--b", "24", "--out", &p(&dir, "x.hsc")]);
    assert_ne!(code(&out), 0);
    assert!(stderr(&out).contains("H, W >= 9"), "{}", stderr(&out));
}

#[test]
fn pretrain_writes_log_and_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cube = synth(&dir, "c.hsc", ["18", "18", "16"], "2", "1");
    let (ck, log) = micro_pretrain(&dir, &cube, &["--alpha", "1.0"]);
    let lines: Vec<serde_json::Value> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    for (n, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], n as u64 + 1);
        assert_eq!(l["l_rec"], l["l_mse"]);
        assert!(l["seed"].is_u64() && l["l_sam"].is_f64());
    }
    let out = hsmae(&["inspect", &ck]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("model d_model 16"), "{}", stdout(&out));
}

#[test]
fn pretrain_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cube = synth(&dir, "c.hsc", ["18", "18", "16"], "2", "1");
    let (ck, log) = micro_pretrain(&dir, &cube, &[]);
    let (a_ck, a_log) = (fs::read(&ck).unwrap(), fs::read(&log).unwrap());
    micro_pretrain(&dir, &cube, &["--threads", "2"]);
    assert_eq!(fs::read(&ck).unwrap(), a_ck);
    assert_eq!(fs::read(&log).unwrap(), a_log);
}

#[test]
fn pretrain_input_errors() {
    let dir = TempDir::new().unwrap();
    let missing = hsmae(&["pretrain", &p(&dir, "nope.hsc"), "--out", &p(&dir, "m.ckpt")]);
    assert_eq!(code(&missing), 2);

    let cube = synth(&dir, "c.hsc", ["18", "18", "16"], "2", "1");
    let zero = hsmae(&[
        "pretrain", &cube, "--out", &p(&dir, "m.ckpt"), "--mask-spatial", "0", "--mask-spectral", "0",
    ]);
    assert_eq!(code(&zero), 1);
    assert!(stderr(&zero).contains("no voxel would be masked"), "{}", stderr(&zero));
}

#[test]
fn pretrain_divergence_exits_three() {
    let dir = TempDir::new().unwrap();
    let cube = synth(&dir, "c.hsc", ["18", "18", "16"], "2", "1");
    let out = hsmae(&[
        "pretrain", &cube, "--out", &p(&dir, "m.ckpt"), "--preset", "micro", "--steps", "5", "--lr",
        "1e300", "--weight-decay", "0",
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn config_file_with_flag_override() {
    let dir = TempDir::new().unwrap();
    let cube = synth(&dir, "c.hsc", ["18", "18", "16"], "2", "1");
    let cfg = p(&dir, "run.json");
    fs::write(
        &cfg,
        r#"{"seed": 3, "pretrain": {"model": {"d_model": 16, "n_enc_layers": 1, "n_dec_layers": 1,
            "n_heads": 2, "d_ff": 32}, "steps": 2, "alpha": 0.0}}"#,
    )
    .unwrap();
    let log = p(&dir, "m.jsonl");
    let out = hsmae(&["pretrain", &cube, "--out", &p(&dir, "m.ckpt"), "--config", &cfg, "--steps", "4"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["l_rec"], first["l_sam"]);

    fs::write(&cfg, r#"{"pretrain": {"stepz": 2}}"#).unwrap();
    let bad = hsmae(&["pretrain", &cube, "--out", &p(&dir, "m.ckpt"), "--config", &cfg]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn finetune_then_eval() {
    let dir = TempDir::new().unwrap();
    let cube = synth(&dir, "c.hsc", ["18", "18", "16"], "2", "1");
    let (ck, _) = micro_pretrain(&dir, &cube, &[]);
    let split = dir.path().join("c.csv");
    let (report, preds) = (p(&dir, "report.json"), p(&dir, "pred.csv"));
    let out = hsmae(&[
        "finetune", "--checkpoint", &ck, "--cube", &cube, "--split", split.to_str().unwrap(),
        "--mode", "probe", "--steps", "30", "--report", &report, "--predictions", &preds,
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).starts_with("OA "));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["kappa"].as_f64().unwrap() <= 1.0);
    assert!(fs::read_to_string(&preds).unwrap().starts_with("i,j,label,predicted\n"));

    // truth against itself
    let same = hsmae(&["eval", "--pred", split.to_str().unwrap(), "--truth", split.to_str().unwrap()]);
    assert_eq!(code(&same), 0);
    assert!(stdout(&same).contains("OA 100.00%") && stdout(&same).contains("kappa 1.0000"));
    let vs = hsmae(&["eval", "--pred", &preds, "--truth", &preds]);
    assert_eq!(code(&vs), 0);
}

#[test]
fn finetune_rejects_degenerate_split() {
    let dir = TempDir::new().unwrap();
    let cube = synth(&dir, "c.hsc", ["18", "18", "16"], "2", "1");
    let (ck, _) = micro_pretrain(&dir, &cube, &[]);
    let split = p(&dir, "train_only.csv");
    fs::write(&split, "i,j,label,split\n0,0,1,train\n").unwrap();
    let out = hsmae(&["finetune", "--checkpoint", &ck, "--cube", &cube, "--split", &split]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_mismatch_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (p(&dir, "a.csv"), p(&dir, "b.csv"));
    fs::write(&a, "label\n1\n2\n").unwrap();
    fs::write(&b, "label\n1\n").unwrap();
    assert_eq!(code(&hsmae(&["eval", "--pred", &a, "--truth", &b])), 1);
    fs::write(&b, "label\nx\n2\n").unwrap();
    assert_eq!(code(&hsmae(&["eval", "--pred", &a, "--truth", &b])), 2);
}

#[test]
fn reconstruct_dumps_and_guards_empty_mask() {
    let dir = TempDir::new().unwrap();
    let cube = synth(&dir, "c.hsc", ["20", "18", "17"], "2", "1");
    let (ck, _) = micro_pretrain(&dir, &cube, &[]);
    let (recon, sam) = (p(&dir, "recon.hsc"), p(&dir, "sam.csv"));
    let out = hsmae(&[
        "reconstruct", "--checkpoint", &ck, "--cube", &cube, "--seed", "4", "--out", &recon,
        "--sam-map", &sam,
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["n_masked"], 6 * 648);
    let info = stdout(&hsmae(&["inspect", &recon]));
    assert!(info.contains("H 18\n") && info.contains("W 18\n") && info.contains("B 16\n"), "{info}");
    assert_eq!(fs::read_to_string(&sam).unwrap().lines().count(), 1 + 18 * 18);
    assert!(Path::new(&recon).exists());

    let zero = hsmae(&[
        "reconstruct", "--checkpoint", &ck, "--cube", &cube, "--mask-spatial", "0", "--mask-spectral",
        "0",
    ]);
    assert_eq!(code(&zero), 1);
    let msg = stderr(&zero);
    assert!(msg.contains("l_mse") && msg.contains("empty M") && msg.contains("e.g. 0.5"), "{msg}");
}

#[test]
fn inspect_rejects_unknown_files() {
    let dir = TempDir::new().unwrap();
    let f = p(&dir, "junk.bin");
    fs::write(&f, b"not a cube").unwrap();
    assert_eq!(code(&hsmae(&["inspect", &f])), 2);
}
