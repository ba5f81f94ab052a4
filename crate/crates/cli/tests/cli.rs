use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use wsbs_core::data::{format_label, format_manifest, ManifestEntry, Split};
use wsbs_core::synth::dataset::sample_rng;
use wsbs_core::synth::{render, RenderSpec};
use wsbs_core::{GrayImage, Vocabulary};

fn wsbs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsbs"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
grammar = "compact"
block_layers = [1, 1]
growth_rate = 4
stem_channels = 8
attn_channels = 8
score_conv_kernel = 3
coverage_conv_kernel = 5
coverage_channels = 4
embed_dim = 8
hidden_dim = 16
epochs = 1
initial_lr = 0.02
"#;

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let path = dir.join("config.toml");
    let mut table: toml::Table = TINY.parse().unwrap();
    table.extend(extra.parse::<toml::Table>().unwrap());
    fs::write(&path, toml::to_string(&table).unwrap()).unwrap();
    path
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
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
fn synth_writes_requested_count_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = wsbs(&["synth", "--config", p(&cfg), "--out", p(dir), "--n", "100", "--seed", "5"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 100);
    // the echoed run.toml records the differing output path
    let tree = |d: &Path| {
        let mut t = read_tree(d);
        t.retain(|(name, _)| name != Path::new("run.toml"));
        t
    };
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 100 + 3);
    assert!(ta == tb, "dataset trees differ");
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = wsbs(&["synth", "--out", p(&tmp.path().join("d")), "--n", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = write_config(tmp.path(), "epochz = 4\n");
    let o = wsbs(&["synth", "--config", p(&cfg), "--out", p(&tmp.path().join("d")), "--n", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
}

#[test]
fn missing_dataset_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let o = wsbs(&["train", "--config", p(&cfg), "--data-dir", p(&tmp.path().join("none")), "--out", p(&tmp.path().join("r"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn one_epoch_run_resume_and_coverage_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let data = tmp.path().join("data");
    assert!(wsbs(&["synth", "--config", p(&cfg), "--out", p(&data), "--n", "12"]).status.success());

    let run = tmp.path().join("run");
    let o = wsbs(&["train", "--config", p(&cfg), "--data-dir", p(&data), "--out", p(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(run.join("last.ckpt").exists());

    let zero = write_config(&tmp.path().join("zero"), "epochs = 0\n");
    let resumed = tmp.path().join("resumed");
    let o = wsbs(&[
        "train", "--config", p(&zero), "--data-dir", p(&data), "--out", p(&resumed),
        "--resume", p(&run.join("best.ckpt")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(resumed.join("last.ckpt")).unwrap(), fs::read(run.join("best.ckpt")).unwrap());

    let nc = tmp.path().join("nocov");
    let o = wsbs(&["train", "--config", p(&cfg), "--data-dir", p(&data), "--out", p(&nc), "--no-coverage"]);
    assert!(o.status.success());
    assert!(fs::read_to_string(nc.join("run.toml")).unwrap().contains("use_coverage = false"));

    let wide = write_config(&tmp.path().join("wide"), "hidden_dim = 12\n");
    let o = wsbs(&[
        "train", "--config", p(&wide), "--data-dir", p(&data), "--out", p(&tmp.path().join("w")),
        "--resume", p(&run.join("best.ckpt")),
    ]);
    assert_eq!(o.status.code(), Some(4));
}

const FIT_LABELS: [&str; 5] = [
    "t ^ { 2 } + t + x",
    "\\sin \\theta",
    "\\frac { 1 } { n }",
    "\\sqrt { 7 } - y",
    "x _ { 3 } = 0",
];

fn tokens(label: &str) -> Vec<String> {
    label.split(' ').map(String::from).chain(["<eol>".to_string()]).collect()
}

/// Trains through the binary until the five fixed expressions are recognized exactly.
fn fitted() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        fs::create_dir_all(data.join("images")).unwrap();
        let spec = RenderSpec { jitter: None, ..RenderSpec::default() };
        let labels: Vec<Vec<String>> = FIT_LABELS.iter().map(|l| tokens(l)).collect();
        let vocab = Vocabulary::from_tokens(labels.iter().flatten().map(String::as_str)).unwrap();
        let (mut entries, mut text) = (Vec::new(), String::new());
        for (i, l) in labels.iter().enumerate() {
            let img = render(l, &spec, &mut sample_rng(0, i as u64)).unwrap().image;
            for (prefix, split) in [("f", Split::Train), ("v", Split::Test)] {
                let id = format!("{prefix}{i}");
                let rel = PathBuf::from("images").join(format!("{id}.pgm"));
                img.write_pgm(&data.join(&rel)).unwrap();
                text.push_str(&format_label(&id, l));
                entries.push(ManifestEntry { id, split, image: rel });
            }
        }
        fs::write(data.join("labels.txt"), text).unwrap();
        fs::write(data.join("manifest.txt"), format_manifest(&entries)).unwrap();
        fs::write(data.join("vocab.txt"), vocab.to_text()).unwrap();

        let cfg = write_config(
            tmp.path(),
            "stem_channels = 16\nhidden_dim = 32\nembed_dim = 16\nattn_channels = 16\n\
             epochs = 150\nbatch_size = 5\ninitial_lr = 0.05\nlr_drop_epochs = [120]\n\
             dropout_rate = 0.0\nrotation_max_deg = 0.0\nl2_lambda = 0.0\ngrad_clip = 5.0\n",
        );
        let o = wsbs(&["train", "--config", p(&cfg), "--data-dir", p(&data), "--out", p(&tmp.path().join("run"))]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        tmp
    })
    .path()
}

fn fit_ckpt() -> PathBuf {
    fitted().join("run").join("best.ckpt")
}

fn fit_image(i: usize) -> PathBuf {
    fitted().join("data").join("images").join(format!("f{i}.pgm"))
}

#[test]
fn eval_of_fitted_model_is_perfect() {
    let out = fitted().join("eval");
    let o = wsbs(&["eval", "--checkpoint", p(&fit_ckpt()), "--data-dir", p(&fitted().join("data")), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let header: Vec<&str> = text.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(&header[..4], &["ExpRate(%)", "≤1(%)", "≤2(%)", "≤3(%)"]);
    let row: Vec<f64> = text.lines().nth(1).unwrap().split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[0], 100.0);
    assert!(row[0] <= row[1] && row[1] <= row[2] && row[2] <= row[3]);
    let csv = fs::read_to_string(out.join("eval_test.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",1")));
}

#[test]
fn recognize_prints_the_fitted_label() {
    let o = wsbs(&["recognize", "--checkpoint", p(&fit_ckpt()), "--image", p(&fit_image(0))]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim_end(), "t ^ { 2 } + t + x");
}

#[test]
fn attend_writes_one_map_per_token() {
    let out = fitted().join("attend");
    let o = wsbs(&["attend", "--checkpoint", p(&fit_ckpt()), "--image", p(&fit_image(1)), "--out-dir", p(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let printed = stdout(&o);
    assert_eq!(printed.trim_end(), "\\sin \\theta");
    assert_eq!(printed.split_whitespace().filter(|t| *t == "\\theta").count(), 1);
    let maps = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".pgm"))
        .count();
    // the body tokens plus the closing <eol> step
    assert_eq!(maps, 3);
    let csv = fs::read_to_string(out.join("alphas.csv")).unwrap();
    assert_eq!(csv.lines().count(), maps);
    for line in csv.lines() {
        let sum: f64 = line.split(',').skip(2).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
    }
    let img = GrayImage::read_pgm(&fit_image(1)).unwrap();
    let map = GrayImage::read_pgm(&out.join("step_1_theta.pgm")).unwrap();
    assert_eq!((map.width(), map.height()), (img.width(), img.height()));
}

#[test]
fn blank_image_decodes_without_crashing() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("blank.pgm");
    GrayImage::blank(80, 40).write_pgm(&path).unwrap();
    let o = wsbs(&["recognize", "--checkpoint", p(&fit_ckpt()), "--image", p(&path)]);
    assert!(matches!(o.status.code(), Some(0) | Some(5)));
    assert!(stdout(&o).split_whitespace().count() <= 48);
}

#[test]
fn oversized_image_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("big.pgm");
    GrayImage::blank(500, 401).write_pgm(&path).unwrap();
    let o = wsbs(&["recognize", "--checkpoint", p(&fit_ckpt()), "--image", p(&path)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("area"));
}

#[test]
fn bad_checkpoints_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let run = fitted().join("run");
    for f in ["run.toml", "vocab.txt"] {
        fs::copy(run.join(f), tmp.path().join(f)).unwrap();
    }
    let mut bytes = fs::read(run.join("best.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let o = wsbs(&["recognize", "--checkpoint", p(&bad), "--image", p(&fit_image(0))]);
    assert_eq!(o.status.code(), Some(4));
    let o = wsbs(&["recognize", "--checkpoint", p(&tmp.path().join("none.ckpt")), "--image", p(&fit_image(0))]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn unreadable_image_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("junk.pgm");
    fs::write(&path, b"not an image").unwrap();
    let o = wsbs(&["recognize", "--checkpoint", p(&fit_ckpt()), "--image", p(&path)]);
    assert_eq!(o.status.code(), Some(3));
}
