"""Episode sources: a deterministic synthetic desk renderer and a RoboTwin-layout reader.

Synthetic scenes are made of flat axis-aligned rectangles whose positions follow
piecewise-linear keyframe programs over normalized episode time ``u = t / (n - 1)``.
No anti-aliasing is applied, so every frame is reproducible bit-for-bit.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from PIL import Image as PILImage

logger = logging.getLogger(__name__)

TASKS = ("hammer_beat", "handover", "stack")

# RoboTwin task names and the prompts used for them.
ROBOTWIN_LABELS = {
    "hammer_beat": "block_hammer_beat",
    "handover": "block_handover",
    "stack": "blocks_stack_easy",
}
TASK_PROMPTS = {
    "hammer_beat": "beat the block with the hammer",
    "handover": "handover the blocks",
    "stack": "stack blocks",
}
MIN_INGEST_RESOLUTION = 128
MIN_RENDER_RESOLUTION = 32
FRAME_SUFFIXES = (".png", ".jpg", ".jpeg")
TASK_LABEL_FILE = "task.txt"
EPISODE_META_FILE = "episode.json"


class EpisodeError(ValueError):
    """Raised for invalid scene specs or malformed episode directories."""


def normalize_task(label: str) -> str:
    """Map either a short task id or a RoboTwin task label to the short id."""
    label = label.strip()
    if label in TASKS:
        return label
    for task, robotwin in ROBOTWIN_LABELS.items():
        if label == robotwin:
            return task
    raise EpisodeError(f"unknown task label {label!r}; expected one of "
                       f"{sorted(TASKS) + sorted(ROBOTWIN_LABELS.values())}")


@dataclass(frozen=True)
class SyntheticSceneSpec:
    task: str
    seed: int
    num_frames: int = 400
    resolution: int = 128

    def __post_init__(self):
        if self.task not in TASKS:
            raise EpisodeError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.resolution < MIN_RENDER_RESOLUTION:
            raise EpisodeError(
                f"resolution {self.resolution} is below the renderer minimum of "
                f"{MIN_RENDER_RESOLUTION} pixels")
        if self.num_frames < 2:
            raise EpisodeError("num_frames must be at least 2")

    @property
    def episode_id(self) -> str:
        return f"{self.task}_s{self.seed:05d}"


class FrameSequence(Sequence):
    """Lazy, indexable view over the frames of an episode."""

    def __init__(self, num_frames: int, loader: Callable[[int], np.ndarray]):
        self._n = num_frames
        self._loader = loader

    def __len__(self) -> int:
        return self._n

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(self._n))]
        if index < 0:
            index += self._n
        if not 0 <= index < self._n:
            raise IndexError(f"frame index {index} out of range for {self._n} frames")
        return self._loader(index)

    def __iter__(self) -> Iterator[np.ndarray]:
        for i in range(self._n):
            yield self._loader(i)


@dataclass
class Episode:
    """An ordered run of RGB frames (H x W x 3 float32 in [0, 1]) with its instruction."""

    episode_id: str
    task: str
    instruction: str
    frames: FrameSequence
    source: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def frame(self, index: int) -> np.ndarray:
        return self.frames[index]


# --------------------------------------------------------------------------- renderer

Rect = tuple  # (cx, cy, w, h, rgb)

_WALL = (196, 204, 212)
_TABLE = (150, 118, 86)
_TABLE_EDGE = 0.45
_ARM = (60, 64, 72)


def _lerp(u: float, keys: Sequence[tuple]) -> np.ndarray:
    """Piecewise-linear interpolation over ``(u, value...)`` keyframes."""
    us = [k[0] for k in keys]
    vals = np.array([k[1:] for k in keys], dtype=np.float64)
    return np.array([np.interp(u, us, vals[:, j]) for j in range(vals.shape[1])])


def _jitter(seed: int, task: str) -> np.random.Generator:
    return np.random.default_rng([seed, TASKS.index(task)])


def _hammer_program(rng: np.random.Generator) -> Callable[[float], list]:
    bx = 0.5 + rng.uniform(-0.08, 0.08)
    start_x = rng.choice([0.18, 0.82]) + rng.uniform(-0.04, 0.04)
    block_w, block_h0 = 0.18, 0.16
    floor = 0.86
    lift, strike = 0.32, floor - block_h0 - 0.05
    # Hammer head y over time: travel, then three strikes, then retreat.
    head_keys = [(0.0, start_x, lift), (0.22, bx, lift)]
    strike_times = (0.34, 0.54, 0.74)
    for ts in strike_times:
        head_keys += [(ts, bx, strike), (ts + 0.1, bx, lift)]
    head_keys += [(1.0, 1.0 - start_x, lift)]

    def scene(u: float) -> list:
        hx, hy = _lerp(u, head_keys)
        hits = sum(u >= ts for ts in strike_times)
        bh = block_h0 * (1.0 - 0.22 * hits)
        # A hit in progress flattens the block against the hammer face.
        bh = min(bh, max(floor - (hy + 0.05), 0.03))
        return [
            (bx, floor - bh / 2, block_w, bh, (200, 40, 40)),
            (hx, (hy - 0.03) / 2, 0.035, hy - 0.03, _ARM),
            (hx, hy, 0.2, 0.08, (110, 110, 120)),
            (hx + 0.12, hy, 0.06, 0.025, (120, 80, 40)),
        ]

    return scene


def _handover_program(rng: np.random.Generator) -> Callable[[float], list]:
    lx = 0.2 + rng.uniform(-0.05, 0.05)
    rx = 0.8 + rng.uniform(-0.05, 0.05)
    mid = 0.5 + rng.uniform(-0.05, 0.05)
    carry, rest = 0.5, 0.82
    size = 0.14
    left = [(0.0, lx, rest - 0.12), (0.15, lx, carry), (0.4, mid - 0.04, carry),
            (0.55, mid - 0.04, carry), (0.8, lx, rest - 0.25), (1.0, lx, rest - 0.25)]
    right = [(0.0, rx, 0.25), (0.3, rx, 0.25), (0.48, mid + 0.04, carry),
             (0.55, mid + 0.04, carry), (0.85, rx, rest - 0.12), (1.0, rx, rest - 0.12)]
    block = [(0.0, lx, rest - 0.12 + 0.09), (0.15, lx, carry + 0.09),
             (0.4, mid, carry + 0.09), (0.55, mid, carry + 0.09),
             (0.85, rx, rest - 0.12 + 0.09), (1.0, rx, rest - 0.12 + 0.09)]

    def scene(u: float) -> list:
        lx_, ly = _lerp(u, left)
        rx_, ry = _lerp(u, right)
        bx, by = _lerp(u, block)
        return [
            (0.5, 0.95, 1.0, 0.1, (120, 96, 70)),
            (lx_, ly / 2, 0.04, ly, (40, 90, 160)),
            (lx_, ly, 0.1, 0.04, (40, 90, 160)),
            (rx_, ry / 2, 0.04, ry, (40, 140, 70)),
            (rx_, ry, 0.1, 0.04, (40, 140, 70)),
            (bx, by, size, size, (230, 200, 40)),
        ]

    return scene


def _stack_program(rng: np.random.Generator) -> Callable[[float], list]:
    xs = np.sort(np.array([0.22, 0.5, 0.78]) + rng.uniform(-0.04, 0.04, size=3))
    order = rng.permutation(3)
    base, second, third = (float(xs[i]) for i in order)
    size = 0.14
    floor = 0.88
    y1 = floor - size / 2
    y2, y3 = y1 - size, y1 - 2 * size
    hover = 0.3
    b2 = [(0.0, second, y1), (0.1, second, y1), (0.2, second, hover),
          (0.32, base, hover), (0.42, base, y2), (1.0, base, y2)]
    b3 = [(0.0, third, y1), (0.55, third, y1), (0.65, third, hover),
          (0.77, base, hover), (0.87, base, y3), (1.0, base, y3)]
    arm = [(0.0, 0.5, 0.12), (0.1, second, y1 - size / 2), (0.2, second, hover - size / 2),
           (0.32, base, hover - size / 2), (0.42, base, y2 - size / 2),
           (0.5, 0.5, 0.2), (0.55, third, y1 - size / 2), (0.65, third, hover - size / 2),
           (0.77, base, hover - size / 2), (0.87, base, y3 - size / 2), (1.0, 0.5, 0.12)]

    def scene(u: float) -> list:
        ax, ay = _lerp(u, arm)
        x2, yy2 = _lerp(u, b2)
        x3, yy3 = _lerp(u, b3)
        return [
            (base, y1, size, size, (200, 50, 50)),
            (x2, yy2, size, size, (50, 160, 60)),
            (x3, yy3, size, size, (50, 80, 200)),
            (ax, ay / 2, 0.035, ay, _ARM),
            (ax, ay, 0.12, 0.03, _ARM),
        ]

    return scene


_PROGRAMS = {
    "hammer_beat": _hammer_program,
    "handover": _handover_program,
    "stack": _stack_program,
}


def _px(v: float, res: int) -> int:
    return int(np.floor(v * res + 0.5))


def _draw(canvas: np.ndarray, rect: Rect) -> None:
    res = canvas.shape[0]
    cx, cy, w, h, rgb = rect
    x0 = max(_px(cx - w / 2, res), 0)
    x1 = min(_px(cx + w / 2, res), res)
    y0 = max(_px(cy - h / 2, res), 0)
    y1 = min(_px(cy + h / 2, res), res)
    if x1 > x0 and y1 > y0:
        canvas[y0:y1, x0:x1] = rgb


def render_frame_uint8(spec: SyntheticSceneSpec, t: int) -> np.ndarray:
    """Render frame ``t`` of ``spec`` as an (R, R, 3) uint8 array."""
    if not 0 <= t < spec.num_frames:
        raise IndexError(f"frame {t} outside [0, {spec.num_frames})")
    res = spec.resolution
    scene = _PROGRAMS[spec.task](_jitter(spec.seed, spec.task))
    canvas = np.empty((res, res, 3), dtype=np.uint8)
    edge = _px(_TABLE_EDGE, res)
    canvas[:edge] = _WALL
    canvas[edge:] = _TABLE
    u = t / (spec.num_frames - 1)
    for rect in scene(u):
        _draw(canvas, rect)
    return canvas


def render_frame(spec: SyntheticSceneSpec, t: int) -> np.ndarray:
    return render_frame_uint8(spec, t).astype(np.float32) / np.float32(255.0)


def render_synthetic_episode(spec: SyntheticSceneSpec) -> Episode:
    """Build a lazily-rendered synthetic episode for ``spec``.

    Frame ``t`` is a pure function of ``(spec, t)``; re-rendering any single frame with
    :func:`render_frame` gives the same array as indexing the episode.
    """
    return Episode(
        episode_id=spec.episode_id,
        task=spec.task,
        instruction=TASK_PROMPTS[spec.task],
        frames=FrameSequence(spec.num_frames, lambda t: render_frame(spec, t)),
        source={"kind": "synthetic", "task": spec.task, "seed": spec.seed,
                "num_frames": spec.num_frames, "resolution": spec.resolution},
    )


# --------------------------------------------------------------------------- disk layout

def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(pixels: np.ndarray, path: Path) -> None:
    PILImage.fromarray(to_uint8(pixels), mode="RGB").save(path)


def load_image(path: Path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise EpisodeError(f"unreadable image {path}: {exc}") from exc
    return arr.astype(np.float32) / np.float32(255.0)


def write_robotwin_episode(episode: Episode, out_dir: Path, ext: str = "png") -> Path:
    """Write ``episode`` as ``<out_dir>/<episode_id>/<i>.<ext>`` plus a task label sidecar."""
    ep_dir = Path(out_dir) / episode.episode_id
    ep_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(episode.frames):
        save_image(frame, ep_dir / f"{i}.{ext}")
    (ep_dir / TASK_LABEL_FILE).write_text(ROBOTWIN_LABELS[episode.task] + "\n")
    meta = {"episode_id": episode.episode_id, "num_frames": episode.num_frames,
            "source": episode.source}
    (ep_dir / EPISODE_META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return ep_dir


_FRAME_RE = re.compile(r"^(\d+)$")


def ingest_robotwin_episode(path: Path, min_resolution: int = MIN_INGEST_RESOLUTION) -> Episode:
    """Read a RoboTwin-style episode directory of numerically named frames.

    Every frame header is checked up front (size, contiguity, readability); pixel data
    is decoded lazily on access.
    """
    path = Path(path)
    if not path.is_dir():
        raise EpisodeError(f"episode directory not found: {path}")
    label_file = path / TASK_LABEL_FILE
    if label_file.exists():
        task = normalize_task(label_file.read_text())
    elif (path / EPISODE_META_FILE).exists():
        meta = json.loads((path / EPISODE_META_FILE).read_text())
        task = normalize_task(meta.get("task") or meta["source"]["task"])
    else:
        raise EpisodeError(f"{path} has no {TASK_LABEL_FILE} task label")

    files: dict[int, Path] = {}
    for p in path.iterdir():
        if p.suffix.lower() not in FRAME_SUFFIXES:
            continue
        m = _FRAME_RE.match(p.stem)
        if not m:
            continue
        idx = int(m.group(1))
        if idx in files:
            raise EpisodeError(f"duplicate frame index {idx} in {path}: "
                               f"{files[idx].name}, {p.name}")
        files[idx] = p
    if not files:
        raise EpisodeError(f"no frames found in {path}")
    n = max(files) + 1
    gaps = [i for i in range(n) if i not in files]
    if gaps:
        raise EpisodeError(f"episode {path.name} is missing frame indices {gaps}")

    size = None
    for i in range(n):
        try:
            with PILImage.open(files[i]) as im:
                w, h = im.size
        except (OSError, ValueError) as exc:
            raise EpisodeError(f"unreadable image {files[i]}: {exc}") from exc
        if w < min_resolution or h < min_resolution:
            raise EpisodeError(
                f"frame {files[i].name} is {w}x{h}; frames must be at least "
                f"{min_resolution}x{min_resolution}")
        if size is None:
            size = (w, h)
        elif (w, h) != size:
            raise EpisodeError(f"frame {files[i].name} is {w}x{h}, expected {size[0]}x{size[1]}")

    ordered = [files[i] for i in range(n)]
    return Episode(
        episode_id=path.name,
        task=task,
        instruction=TASK_PROMPTS[task],
        frames=FrameSequence(n, lambda t: load_image(ordered[t])),
        source={"kind": "robotwin", "path": str(path)},
    )


def discover_episodes(root: Path) -> list[Path]:
    """Episode subdirectories of ``root`` (those carrying a task label), sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"episodes directory not found: {root}")
    return sorted(p for p in root.iterdir()
                  if p.is_dir() and ((p / TASK_LABEL_FILE).exists()
                                     or (p / EPISODE_META_FILE).exists()))
