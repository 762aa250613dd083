"""Regenerate the bundled NIQE model and test fixtures.

Needs numpy, Pillow, scikit-image, and an unpacked BasicSR 1.4.2 source
distribution (for niqe_pris_params.npz and its reference NIQE code):

    python3 tools/export_assets.py /path/to/basicsr-1.4.2
"""
import json
import pathlib
import sys

import numpy as np
from PIL import Image
import skimage.data

ROOT = pathlib.Path(__file__).resolve().parent.parent
ASSETS = ROOT / "crates/core/assets"
DATA = ROOT / "crates/core/tests/data"


def export_niqe(basicsr: pathlib.Path):
    p = np.load(basicsr / "basicsr/metrics/niqe_pris_params.npz")
    out = {
        "source": "niqe_pris_params.npz from BasicSR 1.4.2 (Apache-2.0), a conversion of "
        "modelparameters.mat from the LIVE NIQE reference release",
        "block_size": 96,
        "mu": [float(v) for v in p["mu_pris_param"].ravel()],
        "cov": [[float(v) for v in row] for row in p["cov_pris_param"]],
    }
    (ASSETS / "niqe_pristine.json").write_text(json.dumps(out, indent=1) + "\n")
    return p


def square(img, size):
    h, w = img.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    pil = Image.fromarray(img[top : top + s, left : left + s])
    return np.asarray(pil.resize((size, size), Image.LANCZOS))


def rgb(img):
    return np.stack([img] * 3, axis=-1) if img.ndim == 2 else img[..., :3]


def export_fixtures():
    scenes = {
        "astronaut": skimage.data.astronaut(),
        "coffee": skimage.data.coffee(),
        "chelsea": skimage.data.chelsea(),
        "rocket": skimage.data.rocket(),
    }
    for name, img in scenes.items():
        Image.fromarray(square(rgb(img), 64)).save(DATA / f"scene_{name}.png")
    Image.fromarray(rgb(skimage.data.chelsea())[100:164, 150:214]).save(DATA / "texture.png")
    Image.fromarray(square(rgb(skimage.data.astronaut()), 288)).save(DATA / "natural_288.png")


def luma255(path):
    a = np.asarray(Image.open(path).convert("RGB")).astype(np.float64) / 255.0
    r, g, b = a[..., 0], a[..., 1], a[..., 2]
    return (g + 0.299 * (r - g) + 0.114 * (b - g)) * 255.0


def reference_niqe(basicsr, params):
    import importlib.util

    spec = importlib.util.spec_from_file_location("mf", basicsr / "basicsr/utils/matlab_functions.py")
    mf = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mf)
    src = (basicsr / "basicsr/metrics/niqe.py").read_text()
    src = "\n".join(l for l in src.splitlines() if not l.startswith("from basicsr"))
    ns = {"imresize": mf.imresize, "METRIC_REGISTRY": type("R", (), {"register": lambda self: (lambda f: f)})()}
    exec(src, ns)
    niqe = ns["niqe"]

    args = (params["mu_pris_param"], params["cov_pris_param"], params["gaussian_window"])
    print("natural_288", niqe(luma255(DATA / "natural_288.png"), *args))
    print("natural_288 x 0.2", niqe(luma255(DATA / "natural_288.png") * 0.2, *args))
    print("lcg_noise_192", niqe(lcg_noise(192, 192), *args))
    print("gaussian window max err vs sigma 7/6:", window_err(params["gaussian_window"]))


def lcg_noise(h, w, seed=12345):
    """Uniform noise in [0, 255) from a 32-bit LCG, reproducible in any language."""
    x = seed
    out = np.empty(h * w)
    for k in range(h * w):
        x = (1664525 * x + 1013904223) % 2**32
        out[k] = (x >> 8) / 2**24 * 255.0
    return out.reshape(h, w)


def window_err(win):
    ax = np.arange(-3, 4)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * (7 / 6) ** 2))
    return np.abs(g / g.sum() - win).max()


if __name__ == "__main__":
    basicsr = pathlib.Path(sys.argv[1])
    params = export_niqe(basicsr)
    export_fixtures()
    reference_niqe(basicsr, params)
