"""Pairing episodes into (input, target, instruction) samples and the on-disk sample layout.

Dataset root layout::

    manifest.json
    samples/<sample_id>/<sample_id>_0.<ext>   input frame t
    samples/<sample_id>/<sample_id>_1.<ext>   target frame t + delta_t
    samples/<sample_id>/prompt.json           {"instruction", "task", "input_frame", "target_frame"}
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .episodes import Episode, load_image, save_image

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_FILE = "manifest.json"
PROMPT_FILE = "prompt.json"
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SamplePair:
    episode_id: str
    task: str
    instruction: str
    input_frame: int
    target_frame: int
    delta_t: int
    sample_id: str = ""

    def __post_init__(self):
        if self.target_frame != self.input_frame + self.delta_t:
            raise DatasetError(
                f"target frame {self.target_frame} != input frame {self.input_frame} "
                f"+ delta_t {self.delta_t}")


@dataclass
class DatasetManifest:
    samples: list[SamplePair]
    splits: dict[str, str] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    delta_t: int = 100
    stride: int = 10
    ext: str = "png"

    def ids(self, split: str | None = None) -> list[str]:
        if split is None:
            return [s.sample_id for s in self.samples]
        return [s.sample_id for s in self.samples if self.splits.get(s.sample_id) == split]

    def by_id(self) -> dict[str, SamplePair]:
        return {s.sample_id: s for s in self.samples}

    def to_json(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "delta_t": self.delta_t,
            "stride": self.stride,
            "ext": self.ext,
            "provenance": self.provenance,
            "samples": [asdict(s) for s in self.samples],
            "splits": dict(sorted(self.splits.items())),
        }

    @classmethod
    def from_json(cls, data: dict) -> "DatasetManifest":
        if data.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"manifest version {data.get('version')} is not supported "
                               f"(expected {MANIFEST_VERSION})")
        return cls(
            samples=[SamplePair(**s) for s in data["samples"]],
            splits=dict(data.get("splits", {})),
            provenance=data.get("provenance", {}),
            delta_t=data["delta_t"],
            stride=data["stride"],
            ext=data.get("ext", "png"),
        )

    def save(self, root: Path) -> Path:
        path = Path(root) / MANIFEST_FILE
        path.write_text(json.dumps(self.to_json(), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, root: Path) -> "DatasetManifest":
        path = Path(root) / MANIFEST_FILE
        if not path.exists():
            raise FileNotFoundError(f"dataset manifest not found: {path}")
        return cls.from_json(json.loads(path.read_text()))


def apply_prompt_template(raw_instruction: str) -> str:
    """Wrap an action instruction in the future-scene prompt template."""
    raw = raw_instruction.strip()
    if not raw:
        raise DatasetError("instruction must be non-empty")
    return f"Scene after executing '{raw}'."


def pair_count(num_frames: int, delta_t: int, stride: int) -> int:
    """Closed form for the number of pairs :func:`build_pairs` returns."""
    if stride == 0:
        return int(num_frames > delta_t)
    if num_frames <= delta_t:
        return 0
    return (num_frames - 1 - delta_t) // stride + 1


def build_pairs(episode: Episode, delta_t: int = 100, stride: int = 10) -> list[SamplePair]:
    """Pair frame ``t`` with ``t + delta_t`` for ``t = 0, stride, 2*stride, ...``.

    ``stride=0`` yields the single pair starting at frame 0. Episodes too short for any
    pair produce an empty list and a logged warning.
    """
    if delta_t < 1:
        raise DatasetError(f"delta_t must be >= 1, got {delta_t}")
    if stride < 0:
        raise DatasetError(f"stride must be >= 0, got {stride}")
    n = episode.num_frames
    if n <= delta_t:
        logger.warning("episode %s has %d frames; no pairs at delta_t=%d",
                       episode.episode_id, n, delta_t)
        return []
    starts = [0] if stride == 0 else range(0, n - delta_t, stride)
    instruction = apply_prompt_template(episode.instruction)
    return [SamplePair(episode.episode_id, episode.task, instruction, t, t + delta_t, delta_t)
            for t in starts]


def assign_sample_ids(pairs: Sequence[SamplePair], start: int = 0) -> list[SamplePair]:
    out = []
    for i, p in enumerate(pairs, start):
        d = asdict(p)
        d["sample_id"] = f"{i:06d}"
        out.append(SamplePair(**d))
    return out


def sample_dir(root: Path, sample_id: str) -> Path:
    return Path(root) / "samples" / sample_id


def write_instructpix2pix_layout(pairs: Sequence[SamplePair], episodes: Mapping[str, Episode],
                                 out: Path, ext: str = "png",
                                 provenance: dict | None = None,
                                 delta_t: int | None = None,
                                 stride: int | None = None) -> DatasetManifest:
    """Write one directory per sample plus ``manifest.json`` under ``out``.

    Pairs without a ``sample_id`` are numbered in order. Lossless ``png`` is the default;
    ``jpg`` is accepted for layout compatibility.
    """
    out = Path(out)
    if pairs and not all(p.sample_id for p in pairs):
        pairs = assign_sample_ids(pairs)
    seen: set[str] = set()
    for p in pairs:
        if p.sample_id in seen:
            raise DatasetError(f"duplicate sample_id {p.sample_id}")
        if not re.fullmatch(r"\d{6}", p.sample_id):
            raise DatasetError(f"sample_id {p.sample_id!r} is not a 6-digit string")
        seen.add(p.sample_id)
        if p.episode_id not in episodes:
            raise DatasetError(f"sample {p.sample_id} references unknown episode {p.episode_id}")

    out.mkdir(parents=True, exist_ok=True)
    for p in sorted(pairs, key=lambda s: s.sample_id):
        ep = episodes[p.episode_id]
        d = sample_dir(out, p.sample_id)
        d.mkdir(parents=True, exist_ok=True)
        save_image(ep.frame(p.input_frame), d / f"{p.sample_id}_0.{ext}")
        save_image(ep.frame(p.target_frame), d / f"{p.sample_id}_1.{ext}")
        prompt = {"instruction": p.instruction, "task": p.task,
                  "input_frame": p.input_frame, "target_frame": p.target_frame}
        (d / PROMPT_FILE).write_text(json.dumps(prompt, indent=2) + "\n")

    manifest = DatasetManifest(
        samples=sorted(pairs, key=lambda s: s.sample_id),
        provenance=provenance or {},
        delta_t=delta_t if delta_t is not None else (pairs[0].delta_t if pairs else 100),
        stride=stride if stride is not None else 10,
        ext=ext,
    )
    manifest.save(out)
    return manifest


def split_dataset(manifest: DatasetManifest, fractions: Sequence[float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> DatasetManifest:
    """Assign whole episodes to train/val/test.

    Episode counts per split are ``floor(f * n)`` with leftovers handed out by largest
    remainder, then bumped so every split with a positive fraction gets an episode when
    enough exist.
    """
    if len(fractions) != len(SPLITS):
        raise DatasetError(f"expected {len(SPLITS)} split fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"split fractions must be non-negative and sum to 1, got {fractions}")

    episodes = sorted({s.episode_id for s in manifest.samples})
    n = len(episodes)
    raw = [f * n for f in fractions]
    counts = [math.floor(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    # Steal from the largest split for any positive-fraction split left empty.
    for i, f in enumerate(fractions):
        if f > 0 and counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: counts[j])
            if counts[donor] > 1:
                counts[donor] -= 1
                counts[i] += 1
    for name, f, c in zip(SPLITS, fractions, counts):
        if f > 0 and c == 0 and n > 0:
            raise DatasetError(f"split {name!r} has fraction {f} but received no episodes "
                               f"({n} available)")

    perm = np.random.default_rng(seed).permutation(n)
    assignment: dict[str, str] = {}
    pos = 0
    for name, c in zip(SPLITS, counts):
        for k in perm[pos:pos + c]:
            assignment[episodes[k]] = name
        pos += c
    splits = {s.sample_id: assignment[s.episode_id] for s in manifest.samples}
    prov = dict(manifest.provenance, split_seed=seed, split_fractions=list(fractions))
    return DatasetManifest(samples=list(manifest.samples), splits=splits, provenance=prov,
                           delta_t=manifest.delta_t, stride=manifest.stride, ext=manifest.ext)


def load_sample(root: Path, sample: SamplePair, ext: str = "png") -> tuple[np.ndarray, np.ndarray, str]:
    """Return ``(input_image, target_image, instruction)`` for one written sample."""
    d = sample_dir(root, sample.sample_id)
    prompt = json.loads((d / PROMPT_FILE).read_text())
    return (load_image(d / f"{sample.sample_id}_0.{ext}"),
            load_image(d / f"{sample.sample_id}_1.{ext}"),
            prompt["instruction"])
