"""Dataset persistence, augmentation, filtering, splitting, batch assembly.

Layout on disk:
    root/episodes/<episode>/<frame>_<cam>.pgm     8-bit grayscale rasters
    root/index.jsonl                              one JSON record per sample
Index fields: {episode, frame, cam, steering, command, condition, t}.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .seeding import substream
from .simtown import EpisodeLog

STEERING_LIMIT = 0.8
TRAIN_FRACTION = 0.7
BATCH_SIZE = 120


class DatasetError(RuntimeError):
    pass


def save_pgm(path, image: np.ndarray) -> None:
    """Write a [0,1] float image as an 8-bit binary PGM."""
    data = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_pgm(path) -> np.ndarray:
    """Read a binary PGM back to float64 in [0,1]."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise DatasetError(f"{path}: not a binary PGM")
        line = fh.readline()
        while line.startswith(b"#"):
            line = fh.readline()
        w, h = (int(v) for v in line.split())
        maxval = int(fh.readline())
        raw = fh.read(w * h)
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w) / float(maxval)


def persist_episode(log: EpisodeLog, root, episode_id: str) -> list[dict]:
    """Write one episode's images and append its index rows. Returns the rows."""
    root = Path(root)
    ep_dir = root / "episodes" / episode_id
    if ep_dir.exists():
        raise DatasetError(f"duplicate episode id {episode_id}")
    ep_dir.mkdir(parents=True)
    rows = []
    for k, frame in enumerate(log.frames):
        for cam in frame.images:
            save_pgm(ep_dir / f"{k:04d}_{cam}.pgm", frame.images[cam])
            rows.append({
                "episode": episode_id,
                "frame": k,
                "cam": cam,
                "steering": float(frame.labels.get(cam, frame.executed)),
                "command": frame.command,
                "condition": log.condition,
                "t": round(frame.t, 3),
            })
    with open(root / "index.jsonl", "a", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return rows


def load_index(root) -> list[dict]:
    path = Path(root) / "index.jsonl"
    if not path.exists():
        raise DatasetError(f"no dataset index at {path}")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def image_path(root, row: dict) -> Path:
    return Path(root) / "episodes" / row["episode"] / f"{row['frame']:04d}_{row['cam']}.pgm"


def load_sample_image(root, row: dict) -> np.ndarray:
    return load_pgm(image_path(root, row))


def filter_steering(rows: list[dict], limit: float = STEERING_LIMIT) -> list[dict]:
    """Keep only |steering| <= limit (endpoints inclusive)."""
    return [r for r in rows if abs(r["steering"]) <= limit]


def split(rows: list[dict], ratio: float = TRAIN_FRACTION,
          seed: int = 0) -> tuple[list[dict], list[dict]]:
    """Deterministic train/val partition stratified by command."""
    if not rows:
        raise DatasetError("cannot split an empty index")
    by_command: dict[str, list[int]] = {}
    for i, r in enumerate(rows):
        by_command.setdefault(r["command"], []).append(i)
    train_idx, val_idx = [], []
    for command in sorted(by_command):
        idx = by_command[command]
        if len(idx) < 2:
            raise DatasetError(f"command {command!r} has fewer than 2 samples")
        rng = substream(seed, "split", command)
        perm = rng.permutation(len(idx))
        cut = int(round(ratio * len(idx)))
        cut = min(max(cut, 1), len(idx) - 1)
        train_idx += [idx[p] for p in perm[:cut]]
        val_idx += [idx[p] for p in perm[cut:]]
    train_idx.sort()
    val_idx.sort()
    return [rows[i] for i in train_idx], [rows[i] for i in val_idx]


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Randomized subset and order of noise / brightness / crop-resize."""
    ops = [_aug_noise, _aug_brightness, _aug_crop]
    chosen = [op for op in ops if rng.random() < 0.5]
    rng.shuffle(chosen)
    out = image
    for op in chosen:
        out = op(out, rng)
    return np.clip(out, 0.0, 1.0)


def _aug_noise(image, rng):
    sigma = rng.uniform(0.0, 0.05)
    return image + rng.normal(0.0, 1.0, size=image.shape) * sigma


def _aug_brightness(image, rng):
    return image * rng.uniform(0.8, 1.2)


def _aug_crop(image, rng):
    h, w = image.shape
    fh = int(rng.uniform(0.0, 0.10) * h)
    fw = int(rng.uniform(0.0, 0.10) * w)
    top = rng.integers(0, fh + 1)
    leftc = rng.integers(0, fw + 1)
    cropped = image[top:h - (fh - top), leftc:w - (fw - leftc)]
    return _resize_bilinear(cropped, (h, w))


def _resize_bilinear(image: np.ndarray, shape: tuple) -> np.ndarray:
    h, w = image.shape
    oh, ow = shape
    if (h, w) == (oh, ow):
        return image
    ys = (np.arange(oh) + 0.5) * h / oh - 0.5
    xs = (np.arange(ow) + 0.5) * w / ow - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    a = image[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
    b = image[np.ix_(y0, x1)] * (1 - wy) * wx
    c = image[np.ix_(y1, x0)] * wy * (1 - wx)
    d = image[np.ix_(y1, x1)] * wy * wx
    return a + b + c + d


class SampleCache:
    """In-memory uint8 image cache keyed by index row identity."""

    def __init__(self, root):
        self.root = Path(root)
        self._cache: dict[tuple, np.ndarray] = {}

    def get(self, row: dict) -> np.ndarray:
        key = (row["episode"], row["frame"], row["cam"])
        img = self._cache.get(key)
        if img is None:
            img = (load_sample_image(self.root, row) * 255.0 + 0.5).astype(np.uint8)
            self._cache[key] = img
        return img / 255.0


# steering-magnitude bin edges within one command stratum: lane keeping,
# moderate correction, hard steering. Most "follow" frames sit near zero,
# so without this split a regressor collapses toward timid outputs and
# never learns the strong corrections the recovery frames demonstrate.
STEER_BINS = (0.15, 0.5)


def _steer_bin(row: dict) -> int:
    mag = abs(row["steering"])
    for i, edge in enumerate(STEER_BINS):
        if mag < edge:
            return i
    return len(STEER_BINS)


def balanced_batches(rows: list[dict], commands: tuple, batch_size: int = BATCH_SIZE,
                     seed: int = 0, epoch: int = 0):
    """Yield batches with an equal per-command sample count.

    Commands are balanced exactly. Within a command the draws spread evenly
    over the steering-magnitude bins that have samples, so rare hard-steering
    frames (turn apexes, recovery corrections) are oversampled. Every stratum
    is shuffled per (seed, epoch) and wraps with reshuffling when exhausted.
    """
    if batch_size % len(commands) != 0:
        raise DatasetError(f"batch size {batch_size} not divisible by "
                           f"{len(commands)} commands")
    per = batch_size // len(commands)
    for c in commands:
        if not any(r["command"] == c for r in rows):
            raise DatasetError(f"no samples for command {c!r}")
    n_batches = max(1, len(rows) // batch_size)

    strata: dict[str, list[list[dict]]] = {}
    cursors: dict[tuple, list] = {}
    for c in commands:
        bins: dict[int, list[dict]] = {}
        for r in rows:
            if r["command"] == c:
                bins.setdefault(_steer_bin(r), []).append(r)
        strata[c] = [bins[k] for k in sorted(bins)]
        for k, items in enumerate(strata[c]):
            rng = substream(seed, "batches", c, f"bin{k}", f"e{epoch}")
            cursors[(c, k)] = [rng, rng.permutation(len(items)), 0]

    for _ in range(n_batches):
        batch = []
        for c in commands:
            n_bins = len(strata[c])
            for slot in range(per):
                k = slot % n_bins
                rng, order, pos = cursors[(c, k)]
                items = strata[c][k]
                if pos >= len(order):
                    order = rng.permutation(len(items))
                    pos = 0
                batch.append(items[order[pos]])
                cursors[(c, k)] = [rng, order, pos + 1]
        yield batch


def command_counts(rows: list[dict]) -> dict[str, int]:
    out: dict[str, int] = {}
    for r in rows:
        out[r["command"]] = out.get(r["command"], 0) + 1
    return out
