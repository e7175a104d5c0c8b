"""Procedural periocular-proxy benchmark: identity textures, spoof variants,
dataset splits and image-quality degradations.

Each (user, eye side) owns a sinusoidal texture rendered inside an iris
ring; spoofs overlay a lens grid or quantize to a two-level print. All
randomness is derived from the bundle seed through named sub-seeds, so a
bundle regenerates bit-identically from its manifest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

EYE_SIDES = ("L", "R")
LIVENESS = ("live", "spoof_lens", "spoof_print")
SPLITS = ("ea_train", "ea_query", "ea_gallery", "pad_train", "pad_test")
DEGRADATIONS = ("clean", "blur", "noise")

# sigma of the paper-style additive noise, stated on the 0..255 pixel scale
NOISE_SIGMA_255 = 3.0
TEST_BLUR_KERNEL = 5
TRAIN_BLUR_KERNELS = (1, 3, 5)


class DataError(Exception):
    pass


@dataclass(frozen=True)
class IdentityLatent:
    """Sinusoid parameters of one (user, side) plus the user's ring radius."""

    freq: tuple       # (cycles along texture axis 1, axis 2)
    orientation: float
    phase: float
    ring_radius: float


@dataclass
class EyeSample:
    patch: np.ndarray
    user_id: int
    eye_side: str
    liveness: str
    split: str


@dataclass
class BundleConfig:
    n_train_users: int = 60
    n_test_users: int = 40
    images_per_side: int = 20
    query_per_side: int = 10
    gallery_per_side: int = 5
    n_pad_train_users: int = 30
    n_pad_test_users: int = 30
    pad_live_per_user: int = 20
    pad_lens_per_user: int = 10
    pad_print_per_user: int = 10
    patch_size: int = 32
    render_noise: float = 0.05
    degradation: str = "clean"
    seed: int = 0

    def to_dict(self):
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d):
        return BundleConfig(**d)


@dataclass
class DatasetBundle:
    config: BundleConfig
    samples: list = field(default_factory=list)

    def split(self, name):
        return [s for s in self.samples if s.split == name]

    def ea_train_arrays(self):
        """EA training patches with (user, side) class ids."""
        subset = self.split("ea_train")
        x = np.stack([s.patch for s in subset])
        sides = {"L": 0, "R": 1}
        y = np.array([s.user_id * 2 + sides[s.eye_side] for s in subset])
        return x, y

    def pad_arrays(self, split_name):
        """PAD patches with binary labels (live=0, spoof=1)."""
        subset = self.split(split_name)
        x = np.stack([s.patch for s in subset])
        y = np.array([0 if s.liveness == "live" else 1 for s in subset])
        return x, y

    def eye_images(self, split_name):
        """{(user_id, side): stacked patches} for a query/gallery split."""
        out = {}
        for s in self.split(split_name):
            out.setdefault((s.user_id, s.eye_side), []).append(s.patch)
        return {k: np.stack(v) for k, v in out.items()}

    def test_user_ids(self):
        return sorted({s.user_id for s in self.split("ea_query")})


def _rng(*keys):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def generate_users(n_train_users, n_test_users, seed, delta=0.2, max_tries=2000):
    """Distinct identity latents for every (user, side); train ids come first.

    Two latents are accepted as distinct when at least one parameter differs
    by >= delta. Raises if rejection sampling cannot achieve the separation.
    """
    if n_train_users < 2 or n_test_users < 2:
        raise DataError("need at least 2 train and 2 test users")
    n = n_train_users + n_test_users
    latents = _sample_latents(n, seed, delta, max_tries, id_offset=0)
    train_ids = list(range(n_train_users))
    test_ids = list(range(n_train_users, n))
    return latents, train_ids, test_ids


def _latent_params(lat):
    return np.array([lat.freq[0], lat.freq[1], lat.orientation, lat.phase])


def _separated(cand, accepted, delta):
    p = _latent_params(cand)
    for other in accepted:
        if np.max(np.abs(p - _latent_params(other))) < delta:
            return False
    return True


def _sample_latents(n_users, seed, delta, max_tries, id_offset, existing=None):
    rng = _rng(seed, 0xA11)
    accepted = list(existing) if existing else []
    latents = {}
    for uid in range(id_offset, id_offset + n_users):
        ring = rng.uniform(9.0, 14.0)
        for side in EYE_SIDES:
            for attempt in range(max_tries):
                cand = IdentityLatent(
                    freq=(rng.uniform(2.5, 6.5), rng.uniform(2.5, 6.5)),
                    orientation=rng.uniform(0.0, np.pi),
                    phase=rng.uniform(0.0, 2.0 * np.pi),
                    ring_radius=ring,
                )
                if _separated(cand, accepted, delta):
                    break
            else:
                raise DataError(
                    f"could not place {n_users} users with separation {delta}"
                )
            accepted.append(cand)
            latents[(uid, side)] = cand
    return latents


def render_sample(latent, liveness, noise_scale, rng, patch_size=32):
    """Render one patch: texture in an iris ring, spoof artifact, jitter.

    The pre-jitter image is fully determined by the latent and liveness;
    spoof_print has exactly two pre-jitter gray levels.
    """
    if liveness not in LIVENESS:
        raise DataError(f"unknown liveness '{liveness}'")
    n = patch_size
    coords = (np.arange(n) + 0.5) / n - 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    c, s = np.cos(latent.orientation), np.sin(latent.orientation)
    u = xx * c + yy * s
    v = -xx * s + yy * c
    tex = 0.5 + 0.35 * np.sin(
        2.0 * np.pi * (latent.freq[0] * u + latent.freq[1] * v) + latent.phase
    )
    rho = np.hypot(xx, yy) * n
    pupil = 0.35 * latent.ring_radius
    base = np.where(rho < pupil, 0.15, np.where(rho <= latent.ring_radius, tex, 0.75))
    if liveness == "spoof_lens":
        px = np.arange(n)
        grid = ((px[None, :] % 3 == 0) | (px[:, None] % 3 == 0)).astype(np.float64)
        base = np.clip(base + 0.04 * grid, 0.0, 1.0)
    elif liveness == "spoof_print":
        base = np.where(base < 0.5, 0.42, 0.58)
    if noise_scale > 0:
        base = base + rng.normal(0.0, noise_scale, size=base.shape)
    return np.clip(base, 0.0, 1.0)


def _gaussian_kernel(size):
    # OpenCV's default sigma-for-kernel-size rule
    sigma = 0.3 * ((size - 1) * 0.5 - 1.0) + 0.8
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def degrade_blur(patch, kernel_size):
    """2-D Gaussian blur with a reflective border; kernel 1 is the identity."""
    if kernel_size % 2 == 0:
        raise DataError(f"blur kernel size must be odd, got {kernel_size}")
    if kernel_size == 1:
        return np.asarray(patch, dtype=np.float64).copy()
    k1 = _gaussian_kernel(kernel_size)
    kern = np.outer(k1, k1)
    return ndimage.correlate(np.asarray(patch, dtype=np.float64), kern, mode="reflect")


def degrade_noise(patch, sigma, rng):
    """Additive white Gaussian noise, clipped back to [0, 1]."""
    if sigma < 0:
        raise DataError(f"sigma must be >= 0, got {sigma}")
    arr = np.asarray(patch, dtype=np.float64)
    if sigma == 0:
        return arr.copy()
    return np.clip(arr + rng.normal(0.0, sigma, size=arr.shape), 0.0, 1.0)


_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}
_LIVE_CODE = {name: i for i, name in enumerate(LIVENESS)}
_SIDE_CODE = {side: i for i, side in enumerate(EYE_SIDES)}


def _emit(cfg, latent, uid, side, liveness, split, index):
    """Render one sample plus its split-dependent degradation, seeded per sample."""
    rng = _rng(
        cfg.seed,
        _SPLIT_CODE[split],
        uid,
        _SIDE_CODE[side],
        _LIVE_CODE[liveness],
        index,
    )
    patch = render_sample(latent, liveness, cfg.render_noise, rng, cfg.patch_size)
    is_test = split in ("ea_query", "ea_gallery", "pad_test")
    if cfg.degradation == "blur":
        if is_test:
            k = TEST_BLUR_KERNEL
        else:
            k = TRAIN_BLUR_KERNELS[rng.integers(len(TRAIN_BLUR_KERNELS))]
        patch = np.clip(degrade_blur(patch, k), 0.0, 1.0)
    elif cfg.degradation == "noise":
        patch = degrade_noise(patch, NOISE_SIGMA_255 / 255.0, rng)
    # store at the on-disk precision so in-memory and reloaded bundles agree
    patch = patch.astype(np.float32).astype(np.float64)
    return EyeSample(patch, uid, side, liveness, split)


def build_bundle(cfg):
    """Generate every split of the benchmark for one config."""
    if cfg.degradation not in DEGRADATIONS:
        raise DataError(f"unknown degradation '{cfg.degradation}'")
    ea_latents, train_ids, test_ids = generate_users(
        cfg.n_train_users, cfg.n_test_users, cfg.seed
    )
    n_ea = cfg.n_train_users + cfg.n_test_users
    n_pad = cfg.n_pad_train_users + cfg.n_pad_test_users
    pad_latents = _sample_latents(
        n_pad,
        cfg.seed + 1,
        delta=0.2,
        max_tries=2000,
        id_offset=n_ea,
        existing=ea_latents.values(),
    )
    pad_train_ids = list(range(n_ea, n_ea + cfg.n_pad_train_users))
    pad_test_ids = list(range(n_ea + cfg.n_pad_train_users, n_ea + n_pad))

    samples = []
    for uid in train_ids:
        for side in EYE_SIDES:
            lat = ea_latents[(uid, side)]
            for i in range(cfg.images_per_side):
                samples.append(_emit(cfg, lat, uid, side, "live", "ea_train", i))
    for uid in test_ids:
        for side in EYE_SIDES:
            lat = ea_latents[(uid, side)]
            for i in range(cfg.query_per_side):
                samples.append(_emit(cfg, lat, uid, side, "live", "ea_query", i))
            for i in range(cfg.gallery_per_side):
                samples.append(_emit(cfg, lat, uid, side, "live", "ea_gallery", i))
    pad_plan = (
        ("live", "pad_live_per_user"),
        ("spoof_lens", "pad_lens_per_user"),
        ("spoof_print", "pad_print_per_user"),
    )
    for split, ids in (("pad_train", pad_train_ids), ("pad_test", pad_test_ids)):
        for uid in ids:
            for side in EYE_SIDES:
                lat = pad_latents[(uid, side)]
                for liveness, count_field in pad_plan:
                    # split images across the two sides
                    count = getattr(cfg, count_field) // 2
                    for i in range(count):
                        samples.append(_emit(cfg, lat, uid, side, liveness, split, i))
    return DatasetBundle(config=cfg, samples=samples)


def save_bundle(bundle, directory):
    """Write manifest.json + samples.bin (little-endian float32 patches)."""
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "config": bundle.config.to_dict(),
        "patch_size": bundle.config.patch_size,
        "counts": {name: len(bundle.split(name)) for name in SPLITS},
        "samples": [
            {
                "user_id": s.user_id,
                "eye_side": s.eye_side,
                "liveness": s.liveness,
                "split": s.split,
            }
            for s in bundle.samples
        ],
    }
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    blob = np.stack([s.patch for s in bundle.samples]).astype("<f4")
    blob.tofile(os.path.join(directory, "samples.bin"))
    return manifest


def load_bundle(directory):
    manifest_path = os.path.join(directory, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(manifest_path)
    with open(manifest_path) as f:
        manifest = json.load(f)
    cfg = BundleConfig.from_dict(manifest["config"])
    n = cfg.patch_size
    flat = np.fromfile(os.path.join(directory, "samples.bin"), dtype="<f4")
    patches = flat.astype(np.float64).reshape(-1, n, n)
    if patches.shape[0] != len(manifest["samples"]):
        raise DataError("samples.bin does not match the manifest sample list")
    samples = [
        EyeSample(patches[i], m["user_id"], m["eye_side"], m["liveness"], m["split"])
        for i, m in enumerate(manifest["samples"])
    ]
    return DatasetBundle(config=cfg, samples=samples)
