//! End-to-end tests against the built binary: the generate/split/train/
//! probe/report pipeline, figure and analysis commands, exit codes, and
//! determinism of everything that claims it.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_hubprobe")
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn hubprobe_env(dir: &Path, envs: &[(&str, &str)], args: &[&str]) -> Run {
    let mut cmd = Command::new(bin());
    cmd.current_dir(dir).env_remove("HUBPROBE_SEED").args(args);
    for (key, value) in envs {
        cmd.env(key, value);
    }
    let out = cmd.output().expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn hubprobe(dir: &Path, args: &[&str]) -> Run {
    hubprobe_env(dir, &[], args)
}

fn ok(dir: &Path, args: &[&str]) -> Run {
    let run = hubprobe(dir, args);
    assert_eq!(run.code, 0, "command {args:?} failed:\n{}{}", run.stdout, run.stderr);
    run
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
        .lines()
        .map(str::to_owned)
        .collect()
}

// ── Shared corpus, splits, and trained runs ──

/// Built once; tests treat it as read-only and write to their own dirs.
struct Fixture {
    root: PathBuf,
}

impl Fixture {
    fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    fn splits(&self) -> PathBuf {
        self.root.join("splits")
    }
    fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }
    fn visual_bank(&self) -> String {
        self.corpus().join("visual_bank.bin").display().to_string()
    }
    fn language_bank(&self) -> String {
        self.corpus().join("language_bank.bin").display().to_string()
    }
    fn foil(&self, part: &str) -> String {
        self.splits().join(format!("foil_{part}.jsonl")).display().to_string()
    }
    fn vqa_checkpoint(&self) -> String {
        self.runs().join("pre-vqa/checkpoint.bin").display().to_string()
    }
    fn probe_checkpoint(&self) -> String {
        self.runs().join("probe-vqa/checkpoint.bin").display().to_string()
    }

    fn build() -> Fixture {
        let dir = tempfile::TempDir::new().expect("tempdir");
        let root = dir.path().to_path_buf();
        // keep the artifacts alive for every test in the process
        std::mem::forget(dir);
        let f = Fixture { root: root.clone() };
        ok(
            &root,
            &[
                "gen",
                "--seed",
                "7",
                "--images",
                "60",
                "--visual-dim",
                "24",
                "--language-dim",
                "12",
                "--out",
                "corpus",
            ],
        );
        ok(
            &root,
            &[
                "build-dataset",
                "--seed",
                "7",
                "--vqa",
                "corpus/vqa.jsonl",
                "--referit",
                "corpus/referit.jsonl",
                "--guesswhat",
                "corpus/guesswhat.jsonl",
                "--out",
                "common",
            ],
        );
        ok(&root, &["split", "--seed", "7", "--data", "common/vqa_common.jsonl", "--out", "splits"]);
        ok(&root, &["split", "--seed", "7", "--data", "corpus/foil.jsonl", "--out", "splits"]);
        ok(
            &root,
            &[
                "train",
                "--seed",
                "7",
                "--setting",
                "pretrained",
                "--task",
                "vqa",
                "--train",
                "splits/vqa_common_train.jsonl",
                "--validation",
                "splits/vqa_common_validation.jsonl",
                "--visual-bank",
                &f.visual_bank(),
                "--language-bank",
                &f.language_bank(),
                "--batch-size",
                "16",
                "--max-epochs",
                "4",
                "--out",
                "runs/pre-vqa",
            ],
        );
        for (setting, extra, out) in [
            ("pretrained-vqa", Some(f.vqa_checkpoint()), "runs/probe-vqa"),
            ("random", None, "runs/probe-random"),
        ] {
            let mut args = vec![
                "probe".into(),
                "--seed".into(),
                "7".into(),
                "--setting".into(),
                setting.to_string(),
                "--train".into(),
                f.foil("train"),
                "--validation".into(),
                f.foil("validation"),
                "--test".into(),
                f.foil("test"),
                "--visual-bank".into(),
                f.visual_bank(),
                "--language-bank".into(),
                f.language_bank(),
                "--max-epochs".into(),
                "6".into(),
                "--out".into(),
                out.to_string(),
            ];
            if let Some(ckpt) = extra {
                args.push("--from".into());
                args.push(ckpt);
            }
            let refs: Vec<&str> = args.iter().map(String::as_str).collect();
            ok(&root, &refs);
        }
        f
    }

    fn get() -> &'static Fixture {
        static FIXTURE: OnceLock<Fixture> = OnceLock::new();
        FIXTURE.get_or_init(Fixture::build)
    }
}

fn scratch() -> tempfile::TempDir {
    tempfile::TempDir::new().expect("tempdir")
}

// ── gen ──

#[test]
fn gen_is_deterministic_and_validates_its_spec() {
    let tmp = scratch();
    let args = |out: &str| -> Vec<String> {
        ["gen", "--seed", "3", "--images", "20", "--visual-dim", "8", "--language-dim", "6", "--out", out]
            .iter()
            .map(|s| s.to_string())
            .collect()
    };
    for out in ["a", "b"] {
        let argv = args(out);
        let refs: Vec<&str> = argv.iter().map(String::as_str).collect();
        let run = ok(tmp.path(), &refs);
        assert!(run.stdout.contains("gen: 20 images"), "summary line: {}", run.stdout);
    }
    let mut names: Vec<_> = fs::read_dir(tmp.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        let a = fs::read(tmp.path().join("a").join(&name)).unwrap();
        let b = fs::read(tmp.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs between identical gens");
    }

    let bad = hubprobe(tmp.path(), &["gen", "--seed", "3", "--images", "20", "--visual-dim", "1", "--out", "c"]);
    assert_eq!(bad.code, 2, "invalid dim should be a config error: {}", bad.stderr);
    assert!(bad.stderr.contains("error:"), "stderr: {}", bad.stderr);
}

// ── pipeline ──

#[test]
fn pipeline_produces_checkpoints_metrics_and_reports() {
    let f = Fixture::get();
    for run in ["pre-vqa", "probe-vqa", "probe-random"] {
        for file in ["checkpoint.bin", "metrics.csv", "report.json"] {
            assert!(f.runs().join(run).join(file).exists(), "{run}/{file} missing");
        }
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.runs().join("probe-vqa/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["setting"], "pretrained-vqa");
    assert!(report["metrics"]["accuracy_overall"].is_f64());
    let files: Vec<_> = report["files"].as_array().unwrap().iter().collect();
    assert!(files.iter().any(|v| v == &"checkpoint.bin"));
    assert!(files.iter().any(|v| v == &"report.json"));
}

#[test]
fn report_consolidates_runs_and_is_deterministic() {
    let f = Fixture::get();
    let tmp = scratch();
    let runs = f.runs().display().to_string();
    for out in ["r1", "r2"] {
        let run = ok(tmp.path(), &["report", "--dir", &runs, "--out", out]);
        assert!(run.stdout.contains("setting"), "table header: {}", run.stdout);
    }
    for file in ["report.csv", "report.txt"] {
        let a = fs::read(tmp.path().join("r1").join(file)).unwrap();
        let b = fs::read(tmp.path().join("r2").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between reruns");
    }
    let csv = lines(&tmp.path().join("r1/report.csv"));
    assert_eq!(csv[0], "setting,overall,original,foiled");
    // random sorts before pretrained-vqa in the canonical setting order
    assert!(csv[1].starts_with("random,"), "{csv:?}");
    assert!(csv[2].starts_with("pretrained-vqa,"), "{csv:?}");

    let empty = scratch();
    let none = hubprobe(empty.path(), &["report", "--dir", "."]);
    assert_eq!(none.code, 4, "no runs should be a data error: {}", none.stderr);
}

#[test]
fn random2_completes_without_optimizer_steps() {
    let f = Fixture::get();
    let tmp = scratch();
    let run = ok(
        tmp.path(),
        &[
            "train",
            "--seed",
            "7",
            "--setting",
            "random2",
            "--train",
            &f.foil("train"),
            "--validation",
            &f.foil("validation"),
            "--visual-bank",
            &f.visual_bank(),
            "--language-bank",
            &f.language_bank(),
            "--out",
            ".",
        ],
    );
    assert!(run.stdout.contains("0 optimizer steps"), "stdout: {}", run.stdout);
    let metrics = fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics, "epoch,train_loss,val_loss,val_metric\n", "no epochs should be logged");
}

// ── exit codes and seed resolution ──

#[test]
fn missing_bank_path_is_an_io_error_naming_the_path() {
    let f = Fixture::get();
    let tmp = scratch();
    let run = hubprobe(
        tmp.path(),
        &[
            "train",
            "--seed",
            "7",
            "--setting",
            "random",
            "--train",
            &f.foil("train"),
            "--validation",
            &f.foil("validation"),
            "--visual-bank",
            "nowhere/visual.bin",
            "--language-bank",
            &f.language_bank(),
        ],
    );
    assert_eq!(run.code, 3, "stderr: {}", run.stderr);
    assert!(run.stderr.contains("nowhere/visual.bin"), "stderr: {}", run.stderr);
}

#[test]
fn seed_comes_from_flag_config_or_environment() {
    let f = Fixture::get();
    let tmp = scratch();
    let bank = f.visual_bank();
    let no_seed = hubprobe(tmp.path(), &["density", "--bank", &bank]);
    assert_eq!(no_seed.code, 2, "stderr: {}", no_seed.stderr);
    assert!(no_seed.stderr.contains("HUBPROBE_SEED"), "stderr: {}", no_seed.stderr);

    let from_env = hubprobe_env(
        tmp.path(),
        &[("HUBPROBE_SEED", "9")],
        &["density", "--bank", &bank, "--sample", "30", "--out", "env"],
    );
    assert_eq!(from_env.code, 0, "stderr: {}", from_env.stderr);

    let from_flag = ok(tmp.path(), &["density", "--seed", "9", "--bank", &bank, "--sample", "30", "--out", "flag"]);
    assert_eq!(from_flag.code, 0);
    assert_eq!(
        fs::read(tmp.path().join("env/density.csv")).unwrap(),
        fs::read(tmp.path().join("flag/density.csv")).unwrap(),
        "env seed and flag seed should agree"
    );

    let bad_env = hubprobe_env(
        tmp.path(),
        &[("HUBPROBE_SEED", "not-a-number")],
        &["density", "--bank", &bank, "--sample", "30"],
    );
    assert_eq!(bad_env.code, 2, "stderr: {}", bad_env.stderr);
}

#[test]
fn config_file_drives_runs_and_flags_override_it() {
    let f = Fixture::get();
    let tmp = scratch();
    let manifest = format!(
        "seed = 11\nmax_epochs = 2\nvisual_bank = {:?}\nlanguage_bank = {:?}\ntrain_data = {:?}\nvalidation_data = {:?}\n",
        f.visual_bank(),
        f.language_bank(),
        f.foil("train"),
        f.foil("validation"),
    );
    fs::write(tmp.path().join("run.toml"), manifest).unwrap();

    let from_config = ok(tmp.path(), &["train", "--config", "run.toml", "--setting", "random", "--out", "a"]);
    assert!(from_config.stdout.contains("2 epochs"), "stdout: {}", from_config.stdout);

    let rerun = ok(tmp.path(), &["train", "--config", "run.toml", "--setting", "random", "--out", "b"]);
    assert!(rerun.stdout.contains("2 epochs"));
    assert_eq!(
        fs::read(tmp.path().join("a/checkpoint.bin")).unwrap(),
        fs::read(tmp.path().join("b/checkpoint.bin")).unwrap(),
        "identical config should reproduce the checkpoint bit-exactly"
    );

    let overridden = ok(
        tmp.path(),
        &["train", "--config", "run.toml", "--setting", "random", "--max-epochs", "3", "--out", "c"],
    );
    assert!(overridden.stdout.contains("3 epochs"), "stdout: {}", overridden.stdout);

    let unknown = fs::write(tmp.path().join("bad.toml"), "max_epoch = 2\n");
    unknown.unwrap();
    let bad = hubprobe(tmp.path(), &["train", "--config", "bad.toml", "--seed", "1", "--setting", "random"]);
    assert_eq!(bad.code, 2, "unknown config key should fail: {}", bad.stderr);
}

#[test]
fn probe_requires_a_checkpoint_for_pretrained_settings() {
    let f = Fixture::get();
    let tmp = scratch();
    let run = hubprobe(
        tmp.path(),
        &[
            "probe",
            "--seed",
            "7",
            "--setting",
            "pretrained",
            "--task",
            "vqa",
            "--train",
            &f.foil("train"),
            "--validation",
            &f.foil("validation"),
            "--visual-bank",
            &f.visual_bank(),
            "--language-bank",
            &f.language_bank(),
        ],
    );
    assert_eq!(run.code, 2, "stderr: {}", run.stderr);
    assert!(run.stderr.contains("--from"), "stderr: {}", run.stderr);
}

// ── figure commands ──

#[test]
fn curve_emits_epoch_zero_through_horizon_per_setting() {
    let f = Fixture::get();
    let tmp = scratch();
    ok(
        tmp.path(),
        &[
            "curve",
            "--seed",
            "7",
            "--settings",
            "random,pretrained-vqa",
            "--from-vqa",
            &f.vqa_checkpoint(),
            "--train",
            &f.foil("train"),
            "--test",
            &f.foil("test"),
            "--visual-bank",
            &f.visual_bank(),
            "--language-bank",
            &f.language_bank(),
            "--horizon",
            "2",
            "--jobs",
            "2",
            "--out",
            ".",
        ],
    );
    let rows = lines(&tmp.path().join("epochs.csv"));
    assert_eq!(rows[0], "series,x,y");
    assert_eq!(rows.len(), 1 + 2 * 3, "two settings, epochs 0..=2");
    assert!(rows[1].starts_with("random,0,"));
    assert!(rows[4].starts_with("pretrained-vqa,0,"));
    for row in &rows[1..] {
        let y: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&y), "accuracy out of range: {row}");
    }
}

#[test]
fn ablate_sweeps_fractions_and_rejects_bad_lists() {
    let f = Fixture::get();
    let tmp = scratch();
    ok(
        tmp.path(),
        &[
            "ablate",
            "--seed",
            "7",
            "--settings",
            "random",
            "--train",
            &f.foil("train"),
            "--validation",
            &f.foil("validation"),
            "--test",
            &f.foil("test"),
            "--visual-bank",
            &f.visual_bank(),
            "--language-bank",
            &f.language_bank(),
            "--fractions",
            "0.5,1.0",
            "--max-epochs",
            "3",
            "--jobs",
            "2",
            "--out",
            ".",
        ],
    );
    let rows = lines(&tmp.path().join("datasize.csv"));
    assert_eq!(rows[0], "series,x,y");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("random,0.5,"));
    assert!(rows[2].starts_with("random,1,"));

    let bad = hubprobe(
        tmp.path(),
        &[
            "ablate",
            "--seed",
            "7",
            "--settings",
            "random",
            "--train",
            &f.foil("train"),
            "--validation",
            &f.foil("validation"),
            "--test",
            &f.foil("test"),
            "--visual-bank",
            &f.visual_bank(),
            "--language-bank",
            &f.language_bank(),
            "--fractions",
            "1.0,0.5",
        ],
    );
    assert_eq!(bad.code, 2, "descending fractions should fail: {}", bad.stderr);
}

#[test]
fn confidence_emits_twenty_one_thresholds() {
    let f = Fixture::get();
    let tmp = scratch();
    ok(
        tmp.path(),
        &[
            "confidence",
            "--checkpoint",
            &f.probe_checkpoint(),
            "--data",
            &f.foil("test"),
            "--visual-bank",
            &f.visual_bank(),
            "--language-bank",
            &f.language_bank(),
            "--out",
            ".",
        ],
    );
    let rows = lines(&tmp.path().join("confidence.csv"));
    assert_eq!(rows[0], "threshold,accuracy");
    assert_eq!(rows.len(), 22);
    assert!(rows[1].starts_with("0.5,"));
    assert!(rows[21].starts_with("0.7,"));
}

// ── space commands ──

#[test]
fn rsa_builds_a_unit_diagonal_matrix_over_spaces_and_modes() {
    let f = Fixture::get();
    let tmp = scratch();
    let foil = f.corpus().join("foil.jsonl").display().to_string();
    ok(
        tmp.path(),
        &[
            "rsa",
            "--seed",
            "7",
            "--checkpoint",
            &f.probe_checkpoint(),
            "--data",
            &foil,
            "--visual-bank",
            &f.visual_bank(),
            "--language-bank",
            &f.language_bank(),
            "--modes",
            "foil-pair,mismatched-language",
            "--sample",
            "30",
            "--out",
            ".",
        ],
    );
    let rows = lines(&tmp.path().join("rsa_matrix.csv"));
    let labels: Vec<&str> = rows[0].split(',').skip(1).collect();
    assert_eq!(labels.len(), 5, "base + 2 modes + 2 input spaces: {labels:?}");
    assert_eq!(rows.len(), 1 + labels.len());
    for (i, row) in rows[1..].iter().enumerate() {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[0], labels[i], "row order matches header");
        let diagonal: f64 = cells[i + 1].parse().unwrap();
        assert_eq!(diagonal, 1.0, "self-similarity pins the diagonal");
    }

    let bad = hubprobe(
        tmp.path(),
        &[
            "rsa",
            "--seed",
            "7",
            "--checkpoint",
            &f.probe_checkpoint(),
            "--data",
            &foil,
            "--visual-bank",
            &f.visual_bank(),
            "--language-bank",
            &f.language_bank(),
            "--modes",
            "upside-down",
        ],
    );
    assert_eq!(bad.code, 2, "unknown mode should fail: {}", bad.stderr);
}

#[test]
fn nn_overlap_reports_each_requested_k() {
    let f = Fixture::get();
    let tmp = scratch();
    let lang = f.corpus().join("category_language_bank.bin").display().to_string();
    let vis = f.corpus().join("category_visual_bank.bin").display().to_string();
    ok(
        tmp.path(),
        &[
            "nn-overlap",
            "--checkpoint",
            &f.probe_checkpoint(),
            "--category-language-bank",
            &lang,
            "--category-visual-bank",
            &vis,
            "--k",
            "1,10",
            "--out",
            ".",
        ],
    );
    let rows = lines(&tmp.path().join("nn_overlap.csv"));
    assert_eq!(rows[0], "space_a,space_b,k,overlap");
    assert_eq!(rows.len(), 5, "two spaces x two ks");
    for row in &rows[1..] {
        let overlap: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&overlap), "overlap out of range: {row}");
    }
}

#[test]
fn density_labels_rows_by_bank_stem() {
    let f = Fixture::get();
    let tmp = scratch();
    ok(
        tmp.path(),
        &[
            "density",
            "--seed",
            "5",
            "--bank",
            &f.visual_bank(),
            "--bank",
            &f.language_bank(),
            "--sample",
            "40",
            "--out",
            ".",
        ],
    );
    let rows = lines(&tmp.path().join("density.csv"));
    assert_eq!(rows[0], "space,density");
    assert!(rows[1].starts_with("visual_bank,"));
    assert!(rows[2].starts_with("language_bank,"));
}

// ── statistics commands ──

#[test]
fn correlate_discovers_varying_covariates() {
    let f = Fixture::get();
    let tmp = scratch();
    let run = ok(
        tmp.path(),
        &[
            "correlate",
            "--checkpoint",
            &f.probe_checkpoint(),
            "--data",
            &f.foil("test"),
            "--visual-bank",
            &f.visual_bank(),
            "--language-bank",
            &f.language_bank(),
            "--out",
            ".",
        ],
    );
    // the corpus marks every caption as having a scrambled twin, so the
    // flag is constant and must be skipped rather than erroring
    assert!(run.stderr.contains("has_scrambled"), "stderr: {}", run.stderr);
    let rows = lines(&tmp.path().join("correlations.csv"));
    assert_eq!(rows[0], "covariate,pearson,spearman,n");
    assert!(rows.len() > 1);
    assert!(rows.iter().skip(1).all(|r| !r.starts_with("has_scrambled,")));
}

#[test]
fn regress_fits_the_requested_covariates() {
    let f = Fixture::get();
    let tmp = scratch();
    let foil = f.corpus().join("foil.jsonl").display().to_string();
    ok(
        tmp.path(),
        &[
            "regress",
            "--checkpoint",
            &f.probe_checkpoint(),
            "--data",
            &foil,
            "--visual-bank",
            &f.visual_bank(),
            "--language-bank",
            &f.language_bank(),
            "--covariates",
            "caption_length,num_objects",
            "--out",
            ".",
        ],
    );
    let rows = lines(&tmp.path().join("regression.csv"));
    assert_eq!(rows[0], "term,coefficient");
    assert!(rows[1].starts_with("intercept,"));
    assert!(rows[2].starts_with("caption_length,"));
    assert!(rows[3].starts_with("num_objects,"));
    assert_eq!(rows.len(), 4);
}
