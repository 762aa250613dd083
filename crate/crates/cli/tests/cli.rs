use std::path::Path;
use std::process::Command;

use lowlight_core::imaging::{save_image, ColorSpace, ImageTensor, ValueRange};

const TOY: &str = r#"
epochs = 2
decay_epochs = 1
max_steps = 3
patch = 32
flip = false

[model.nrn]
feat_channels = 8
hidden = 32

[model.generator]
ngf = 4
n_down = 2
n_blocks = 1

[model.mask]
width = 8

[model.discriminator]
ndf = 8
n_strided = 2
kernel = 4
"#;

fn lowlight(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lowlight")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_images(dir: &Path, gain: f64) {
    std::fs::create_dir_all(dir).unwrap();
    for k in 0..2 {
        let img = ImageTensor::from_fn(ColorSpace::Rgb, 40, 36 + 4 * k, ValueRange::Unit, |c, y, x| {
            gain * ((x * 7 + y * 3 + c * 11) % 17) as f64 / 16.0
        })
        .unwrap();
        save_image(&img, dir.join(format!("{k}.png"))).unwrap();
    }
}

#[test]
fn train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_images(&root.join("data/low"), 0.2);
    write_images(&root.join("data/high"), 1.0);
    std::fs::write(root.join("toy.toml"), TOY).unwrap();

    let out = lowlight(&["train", "--config", path(&root.join("toy.toml")), "--data", path(&root.join("data")), "--out", path(&root.join("run"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = root.join("run/latest.safetensors");
    let log = std::fs::read_to_string(root.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let out = lowlight(&["infer", "--ckpt", path(&ckpt), "--in", path(&root.join("data/low")), "--out", path(&root.join("enhanced")), "--pe-levels", "8"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let enhanced = lowlight_core::imaging::load_image(root.join("enhanced/1.png")).unwrap();
    assert_eq!(enhanced.shape(), (3, 40, 40));

    let out = lowlight(&["infer", "--ckpt", path(&ckpt), "--in", path(&root.join("data/low")), "--out", path(&root.join("x")), "--pe-levels", "4"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("pe_levels"));

    let report = root.join("report.csv");
    let out = lowlight(&["eval", "--ckpt", path(&ckpt), "--low", path(&root.join("data/low")), "--ref", path(&root.join("data/high")), "--report", path(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&report).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "name,psnr,ssim,loe,niqe,semantic_score");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "0.png");
    // Too small for NIQE, everything else present.
    assert!(row[4].is_empty());
    assert!(row[1].parse::<f64>().is_ok() && row[5].parse::<f64>().is_ok());
}

#[test]
fn missing_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = lowlight(&["train", "--data", path(&dir.path().join("nowhere")), "--out", path(&dir.path().join("run"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = lowlight(&["infer", "--ckpt", path(&dir.path().join("none.safetensors")), "--in", ".", "--out", "o"]);
    assert!(!out.status.success());
}
