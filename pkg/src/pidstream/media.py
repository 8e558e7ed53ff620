"""Synthetic VBR video library standing in for a real encoded corpus."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import substream

DEFAULT_LADDER = (0.5e6, 1.0e6, 1.5e6, 2.25e6, 3.25e6, 4.5e6)


class OutOfRange(IndexError):
    pass


@dataclass(frozen=True)
class SegmentRef:
    video: int
    segment: int
    representation: int


@dataclass
class Video:
    id: int
    duration: float
    ladder: np.ndarray  # bit/s, ascending
    sizes: np.ndarray  # (n_segments, n_representations) bits

    @property
    def n_segments(self) -> int:
        return self.sizes.shape[0]


@dataclass
class VideoLibrary:
    tau: float
    videos: list[Video] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.videos)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "videos": [
                {
                    "id": v.id,
                    "duration": v.duration,
                    "ladder": [float(r) for r in v.ladder],
                    "sizes": [[float(s) for s in row] for row in v.sizes],
                }
                for v in self.videos
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VideoLibrary":
        videos = [
            Video(
                id=int(v["id"]),
                duration=float(v["duration"]),
                ladder=np.asarray(v["ladder"], dtype=float),
                sizes=np.asarray(v["sizes"], dtype=float),
            )
            for v in data["videos"]
        ]
        lib = cls(tau=float(data["tau"]), videos=videos)
        lib.check()
        return lib

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "VideoLibrary":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def check(self) -> None:
        for v in self.videos:
            if np.any(np.diff(v.ladder) <= 0):
                raise ValueError(f"video {v.id}: ladder not strictly ascending")
            if v.sizes.ndim != 2 or v.sizes.shape[1] != len(v.ladder):
                raise ValueError(f"video {v.id}: size table does not match ladder")
            if np.any(v.sizes <= 0):
                raise ValueError(f"video {v.id}: non-positive segment size")


def build_library(
    n_videos: int = 6,
    duration: float = 600.0,
    tau: float = 2.0,
    ladder=DEFAULT_LADDER,
    vbr_sigma: float = 0.25,
    seed: int = 0,
) -> VideoLibrary:
    """Per-segment sizes ``rate * tau * m`` with a unit-mean lognormal ``m``.

    The multiplier is drawn once per segment and shared by all
    representations, so sizes are monotone in the representation index.
    """
    ladder = np.asarray(ladder, dtype=float)
    if np.any(np.diff(ladder) <= 0):
        raise ValueError("ladder must be strictly ascending")
    if vbr_sigma < 0:
        raise ValueError("vbr_sigma must be non-negative")
    n_seg = max(1, int(round(duration / tau)))
    videos = []
    for vid in range(n_videos):
        rng = substream(seed, "media", vid)
        if vbr_sigma > 0:
            m = rng.lognormal(mean=-0.5 * vbr_sigma**2, sigma=vbr_sigma, size=n_seg)
        else:
            m = np.ones(n_seg)
        videos.append(Video(id=vid, duration=n_seg * tau, ladder=ladder.copy(), sizes=np.outer(m, ladder * tau)))
    return VideoLibrary(tau=tau, videos=videos)


def segment_size(lib: VideoLibrary, ref: SegmentRef, wrap: bool = False) -> float:
    if not 0 <= ref.video < len(lib.videos):
        raise OutOfRange(f"no video {ref.video}")
    v = lib.videos[ref.video]
    if not 0 <= ref.representation < len(v.ladder):
        raise OutOfRange(f"no representation {ref.representation}")
    seg = ref.segment
    if wrap:
        seg %= v.n_segments
    elif not 0 <= seg < v.n_segments:
        raise OutOfRange(f"segment {seg} outside video {ref.video}")
    return float(v.sizes[seg, ref.representation])
