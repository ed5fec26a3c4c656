use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn geobev(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geobev"))
        .args(args)
        .env("GEOBEV_THREADS", "1")
        .output()
        .expect("spawn geobev")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY: &str = "\
scene_frames = 3
window = 2
cameras = 2
img_h = 16
img_w = 32
grid_extent = 16
grid_resolution = 1
depth_min = 2
depth_max = 10
depth_bins = 4
spawn_r_min = 3
spawn_r_max = 8
max_speed = 2
vehicles_min = 1
vehicles_max = 2
channels = 3
hidden = 3
gru_units = 1
encoder_channels = 3
head_hidden = 4
epochs = 1
";

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    fs::write(&path, TINY).unwrap();
    path
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_scenes_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = geobev(&["gen-scenes", "--config", p(&cfg), "--seed", "7", "--count", "2", "--out", p(dir)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert!(String::from_utf8_lossy(&out.stdout).contains("4 samples"));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.iter().any(|(name, _)| name.ends_with("manifest.txt")));
    assert_eq!(ta, tb);
}

#[test]
fn zero_scenes_give_an_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let dir = tmp.path().join("empty");
    let out = geobev(&["gen-scenes", "--config", p(&cfg), "--count", "0", "--out", p(&dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(dir.join("manifest.txt")).unwrap().trim(), "");
}

#[test]
fn unwritable_output_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let blocker = tmp.path().join("plain-file");
    fs::write(&blocker, "x").unwrap();
    let target = blocker.join("data");
    let out = geobev(&["gen-scenes", "--config", p(&cfg), "--out", p(&target)]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("plain-file"), "{}", stderr(&out));
}

#[test]
fn config_problems_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "seed = 7\nwarp_factor = 9\n").unwrap();
    let out = geobev(&["gen-scenes", "--config", p(&bad), "--out", p(&tmp.path().join("d"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("warp_factor"));

    let out = geobev(&["gen-scenes", "--frobnicate", "--out", "x"]);
    assert_eq!(code(&out), 2);

    let missing = tmp.path().join("nope.cfg");
    let out = geobev(&["train", "--config", p(&missing), "--data", "d", "--out", "o"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn help_lists_flags() {
    for (cmd, flags) in [
        ("gen-scenes", &["--seed", "--count", "--out", "--config"][..]),
        ("train", &["--config", "--data", "--out"]),
        ("eval", &["--checkpoint", "--data"]),
        ("mask", &["--rig", "--grid", "--out", "--stride"]),
        ("ablate", &["--config", "--data", "--out"]),
    ] {
        let out = geobev(&[cmd, "--help"]);
        assert_eq!(code(&out), 0);
        let text = String::from_utf8_lossy(&out.stdout);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn gradcheck_passes_and_catches_a_fault() {
    let out = geobev(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let report = String::from_utf8_lossy(&out.stdout);
    for c in ["conv2d", "convgru_cell", "bptt", "lift-splat", "encoder", "loss"] {
        assert!(report.contains(c), "report lacks {c}");
    }
    let out = geobev(&["gradcheck", "--inject-fault", "convgru_cell"]);
    assert_eq!(code(&out), 1);
}

fn read_metric(csv: &Path, name: &str) -> f64 {
    let text = fs::read_to_string(csv).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{name},")))
        .unwrap_or_else(|| panic!("{name} missing from {text}"))
        .parse()
        .unwrap()
}

#[test]
fn train_eval_and_version_check() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    assert_eq!(code(&geobev(&["gen-scenes", "--config", p(&cfg), "--count", "1", "--out", p(&data)])), 0);
    let out = geobev(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,step,loss,val_iou\n"));
    assert_eq!(metrics.lines().count(), 2);

    let ckpt = run.join("checkpoint.gcgr");
    let out = geobev(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PQ"));
    let iou = read_metric(&run.join("eval.csv"), "iou_class1");
    assert!((0.0..=1.0).contains(&iou));

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[5..9].copy_from_slice(&2u32.to_le_bytes());
    let stale = tmp.path().join("v2.gcgr");
    fs::write(&stale, bytes).unwrap();
    let out = geobev(&["eval", "--checkpoint", p(&stale), "--data", p(&data), "--config", p(&run.join("config.txt"))]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn overfit_one_scene_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let cfg = tmp.path().join("overfit.cfg");
    let text = fs::read_to_string(configs.join("overfit.cfg")).unwrap();
    fs::write(&cfg, text.replace("epochs = 8", "epochs = 40")).unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    assert_eq!(code(&geobev(&["gen-scenes", "--config", p(&cfg), "--count", "1", "--out", p(&data)])), 0);
    let out = geobev(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = geobev(&["eval", "--checkpoint", p(&run.join("checkpoint.gcgr")), "--data", p(&data)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let iou = read_metric(&run.join("eval.csv"), "iou_class1");
    assert!(iou > 0.5, "vehicle IoU {iou}");
}

fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let mut lines = bytes.splitn(4, |&b| b == b'\n');
    let mut text = || String::from_utf8(lines.next().unwrap().to_vec()).unwrap();
    assert_eq!(text(), "P5");
    let size = text();
    let (w, h) = size.split_once(' ').unwrap();
    assert_eq!(text(), "255");
    let (w, h): (usize, usize) = (w.parse().unwrap(), h.parse().unwrap());
    let px = lines.next().unwrap().to_vec();
    assert_eq!(px.len(), w * h);
    (w, h, px)
}

#[test]
fn default_mask_is_an_annulus() {
    let tmp = tempfile::tempdir().unwrap();
    let pgm = tmp.path().join("mask.pgm");
    let out = geobev(&["mask", "--out", p(&pgm)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (w, h, px) = read_pgm(&pgm);
    assert_eq!((w, h), (200, 200));
    let at = |x: f64, y: f64| {
        // Metres from the ego to a pixel (column 0 is +y, row 0 is +x).
        let col = (100.0 - y / 0.5) as usize;
        let row = (100.0 - x / 0.5) as usize;
        px[row * w + col]
    };
    assert!(at(0.1, 0.1) < 255, "ego cell should be invalid");
    assert!(at(49.0, 49.0) < 255 && at(-49.0, -49.0) < 255, "far corners should be invalid");
    for sector in 0..36 {
        let a = (sector as f64 * 10.0).to_radians();
        let white = (10..=50).any(|r2| {
            let r = r2 as f64 * 0.5;
            at(r * a.cos(), r * a.sin()) == 255
        });
        assert!(white, "no valid cell between 5 and 25 m at {}°", sector * 10);
    }
}

#[test]
fn mask_flags_are_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let pgm = tmp.path().join("m.pgm");
    let out = geobev(&["mask", "--grid", "banana", "--out", p(&pgm)]);
    assert_eq!(code(&out), 2);
    let out = geobev(&["mask", "--grid", "20:0.5", "--epsilon", "0.5", "--out", p(&pgm)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (w, h, px) = read_pgm(&pgm);
    assert_eq!((w, h), (40, 40));
    assert!(px.iter().all(|&v| v == 255 || v == 128));
}
