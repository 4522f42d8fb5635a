//! Runs the built binary end to end on tiny synthetic data.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mscloudcam::datapipe::{load_mst, save_mst, synth_dataset, Payload, SplitManifest};
use mscloudcam::metrics::ConfusionMatrix;
use mscloudcam::model::load_checkpoint;
use mscloudcam_cli::render::decode_ppm;

const TINY: &str = "\
model.preset = tiny
encoder.in_channels = 13
train.batch_size = 2
train.epochs = 2
data.source = synthetic
data.synthetic_train = 4
data.synthetic_val = 2
data.synthetic_size = 32
";

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mscloudcam"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(dir: &Path, cfg: &Path, out: &str, extra: &[&str]) -> Output {
    let out = dir.join(out);
    let mut args = vec![
        "train",
        "--config",
        s(cfg),
        "--out",
        s(&out),
        "--threads",
        "1",
    ];
    args.extend_from_slice(extra);
    bin(&args)
}

fn log_lines(dir: &Path, run: &str) -> Vec<String> {
    std::fs::read_to_string(dir.join(run).join("train.log"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn summary_reports_totals_against_the_reference() {
    let o = bin(&["summary"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("reference 47.44M; delta"), "{text}");
    assert!(text.contains("256x256:") && text.contains("512x512:"));
    assert!(text.contains("bracketed by the sweep"));
    assert_eq!(text, stdout(&bin(&["summary"])), "summary must be stable");

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "desk.cfg", "model.preset = desk\n");
    let text = stdout(&bin(&["summary", "--config", s(&cfg)]));
    let total_line = text
        .lines()
        .find(|l| l.trim_start().starts_with("total"))
        .unwrap();
    let total: usize = total_line
        .split_whitespace()
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(total < 5_000_000, "desk preset has {total} parameters");
}

#[test]
fn gradcheck_passes_and_names_a_broken_op() {
    let o = bin(&["gradcheck", "--scope", "context"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("aspp") && stdout(&o).contains("worst"));

    let o = bin(&["gradcheck", "--scope", "context", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(4));
    let err = stderr(&o);
    assert!(err.contains("corrupted_backward"), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "single-line error: {err}");
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.cfg", "model.preset = huge\n");
    let o = bin(&["summary", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[config]"));

    let unknown = write_config(
        dir.path(),
        "unknown.cfg",
        "train.lr = 1e-4\ntrain.momentum = 0.9\n",
    );
    assert_eq!(
        bin(&["summary", "--config", s(&unknown)]).status.code(),
        Some(2)
    );

    // manifest source whose split file is missing: the error names the path
    let cfg = write_config(
        dir.path(),
        "manifest.cfg",
        "model.preset = tiny\ndata.source = manifest\ndata.manifest = nowhere/splits.txt\n",
    );
    let o = bin(&["eval", "--config", s(&cfg), "--oracle"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("splits.txt"), "{}", stderr(&o));
}

#[test]
fn train_resume_and_output_directory_rules() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let o = train(dir.path(), &cfg, "full", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.txt", "train.log", "checkpoint.msck"] {
        assert!(dir.path().join("full").join(f).exists(), "{f}");
    }
    let echo = std::fs::read_to_string(dir.path().join("full/config.txt")).unwrap();
    assert!(echo.contains("encoder.embed_dim = 4") && echo.contains("train.lambda_aux1 = 0.4"));
    let full = log_lines(dir.path(), "full");
    assert_eq!(
        full[0],
        "epoch step loss_final loss_aux1 loss_aux2 val_miou"
    );
    assert_eq!(full.len(), 3);

    // refusing to reuse a run directory
    assert_eq!(train(dir.path(), &cfg, "full", &[]).status.code(), Some(2));

    // one epoch, then resume to two: identical log to the uninterrupted run
    let one = write_config(
        dir.path(),
        "one.cfg",
        &TINY.replace("train.epochs = 2", "train.epochs = 1"),
    );
    assert!(train(dir.path(), &one, "split", &[]).status.success());
    let o = train(dir.path(), &cfg, "split", &["--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(log_lines(dir.path(), "split"), full);
    let a = load_checkpoint(&dir.path().join("full/checkpoint.msck")).unwrap();
    let b = load_checkpoint(&dir.path().join("split/checkpoint.msck")).unwrap();
    assert_eq!(a, b);

    // identical config, identical log
    assert!(train(dir.path(), &cfg, "again", &[]).status.success());
    assert_eq!(log_lines(dir.path(), "again"), full);
}

#[test]
fn loss_weights_reach_the_training_log() {
    let dir = tempfile::tempdir().unwrap();
    let base = TINY.replace("train.epochs = 2", "train.epochs = 3");
    let cfg = write_config(dir.path(), "a.cfg", &base);
    let off = write_config(
        dir.path(),
        "b.cfg",
        &format!("{base}train.lambda_aux1 = 0\ntrain.lambda_aux2 = 0\n"),
    );
    assert!(train(dir.path(), &cfg, "with", &[]).status.success());
    assert!(train(dir.path(), &off, "without", &[]).status.success());
    let column = |run: &str, c: usize| -> Vec<f64> {
        log_lines(dir.path(), run)[1..]
            .iter()
            .map(|l| l.split(' ').nth(c).unwrap().parse().unwrap())
            .collect()
    };
    // with zero weight the aux1 head is never trained, so its logged loss
    // follows a different trajectory
    assert_ne!(column("with", 3), column("without", 3));
    let echo = std::fs::read_to_string(dir.path().join("without/config.txt")).unwrap();
    assert!(echo.contains("train.lambda_aux1 = 0\n"));
}

#[test]
fn non_finite_loss_aborts_and_keeps_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    // one step per epoch, so the first epoch's checkpoint lands before the blow-up
    let hot = TINY.replace("train.batch_size = 2", "train.batch_size = 4");
    let cfg = write_config(dir.path(), "hot.cfg", &format!("{hot}train.lr = 1e30\n"));
    let o = train(dir.path(), &cfg, "hot", &[]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite loss"));
    let ckpt = load_checkpoint(&dir.path().join("hot/checkpoint.msck")).unwrap();
    assert!(ckpt.step >= 1);
}

#[test]
fn eval_oracle_is_perfect_and_csv_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let out = dir.path().join("eval");
    let o = bin(&[
        "eval",
        "--config",
        s(&cfg),
        "--oracle",
        "--split",
        "val",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "val");
    assert!(row[1..17].iter().all(|v| *v == "100.00"), "{csv}");
}

#[test]
fn eval_and_infer_from_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    std::fs::create_dir(&scenes).unwrap();
    let samples = synth_dataset(3, 32, 13, 9);
    for smp in &samples {
        save_mst(&smp.to_mst(), &scenes.join(format!("{}.mst", smp.id))).unwrap();
    }
    let ids: Vec<String> = samples.iter().map(|x| x.id.clone()).collect();
    let manifest = SplitManifest {
        splits: vec![
            ("train".into(), ids[..2].to_vec()),
            ("test".into(), ids[2..].to_vec()),
        ],
    };
    std::fs::write(dir.path().join("splits.txt"), manifest.to_text()).unwrap();
    let cfg = write_config(
        dir.path(),
        "m.cfg",
        "model.preset = tiny\ntrain.batch_size = 2\ntrain.epochs = 1\ntrain.val_every = 0\n\
         data.source = manifest\ndata.manifest = splits.txt\ndata.dir = scenes\n",
    );
    assert!(train(dir.path(), &cfg, "run", &[]).status.success());
    let ckpt = dir.path().join("run/checkpoint.msck");

    let o = bin(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("test"));

    let input = scenes.join(format!("{}.mst", ids[2]));
    let out = dir.path().join("infer");
    let o = bin(&[
        "infer",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&input),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let labels = load_mst(&out.join("labels.mst")).unwrap();
    let Payload::U8(map) = &labels.payload else {
        panic!("label map expected")
    };
    assert_eq!((labels.height, labels.width), (32, 32));
    // the written map scores perfectly against itself
    let mut cm = ConfusionMatrix::new();
    cm.accumulate(map, map, 32, 255).unwrap();
    let r = cm.report().unwrap();
    assert!(r.classes.iter().all(|c| c.absent || c.iou == 1.0));
    assert_eq!(r.aacc, 1.0);
    let (h, w, px) = decode_ppm(&std::fs::read(out.join("labels.ppm")).unwrap()).unwrap();
    assert_eq!((h, w), (32, 32));
    for (p, &l) in px.iter().zip(map) {
        assert_eq!(*p, mscloudcam_cli::render::CLASS_COLORS[l as usize]);
    }

    // an 11-band scene cannot go through a 13-band checkpoint
    let l8 = synth_dataset(1, 32, 11, 3).remove(0);
    let l8_path = dir.path().join("l8.mst");
    save_mst(&l8.to_mst(), &l8_path).unwrap();
    let o = bin(&[
        "infer",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&l8_path),
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("channels"), "{}", stderr(&o));
    assert!(
        !dir.path().join("x").exists(),
        "no output directory on failure"
    );
}
