#![allow(dead_code)]

use std::path::{Path, PathBuf};

use lowlight_core::imaging::{load_image, save_image, ImageTensor};

pub const SCENES: [&str; 4] = ["astronaut", "coffee", "chelsea", "rocket"];

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

pub fn fixture(name: &str) -> ImageTensor {
    load_image(data_dir().join(name)).unwrap()
}

pub fn scene(name: &str) -> ImageTensor {
    fixture(&format!("scene_{name}.png"))
}

/// Scales every value by `gain` after raising it to `gamma`, clamped to [0, 1].
pub fn expose(img: &ImageTensor, gain: f64, gamma: f64) -> ImageTensor {
    ImageTensor::from_fn(img.color_space(), img.height(), img.width(), img.range(), |c, y, x| {
        (gain * img.get(c, y, x).powf(gamma)).clamp(0.0, 1.0)
    })
    .unwrap()
}

/// Eight dark and eight bright 64x64 images built from the scene fixtures.
pub fn write_toy_corpus(root: &Path) {
    let low = root.join("low");
    let high = root.join("high");
    std::fs::create_dir_all(&low).unwrap();
    std::fs::create_dir_all(&high).unwrap();
    for (i, name) in SCENES.iter().enumerate() {
        let img = scene(name);
        let flipped = img.flip_horizontal();
        save_image(&expose(&img, 0.25, 1.2), low.join(format!("{i}a.png"))).unwrap();
        save_image(&expose(&flipped, 0.15, 1.0), low.join(format!("{i}b.png"))).unwrap();
        save_image(&expose(&img, 1.0, 0.9), high.join(format!("{i}a.png"))).unwrap();
        save_image(&expose(&flipped, 1.1, 1.0), high.join(format!("{i}b.png"))).unwrap();
    }
}
