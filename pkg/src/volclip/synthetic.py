"""Synthetic desk-scale corpus: geometric patterns keyed to four synthetic
abnormalities, with templated reports that name each finding and its zone.

Every study gets at least one finding, every label has both classes in each
split, and report texts are unique (zone wording distinguishes studies), so
report-to-volume retrieval has a well-defined ground truth.

Run as a module to materialize a corpus on disk:
    python -m volclip.synthetic --out data/synth --seed 0
"""

from __future__ import annotations

import argparse
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from . import volio
from .corpus import AbnormalityVocab, labels_to_text, write_manifest
from .volume import VolumeGrid

ABNORMALITIES = ("sphere sign", "band sign", "checker sign", "cavity sign")
ZONE_WORDS_X = ("left", "right")
ZONE_WORDS_Y = ("anterior", "posterior")
ZONE_WORDS_Z = ("upper", "lower")
COUNT_WORDS = ("Zero", "One", "Two", "Three", "Four")


@dataclass(frozen=True)
class SyntheticConfig:
    n_train: int = 64
    n_valid: int = 32
    shape: Tuple[int, int, int] = (48, 48, 24)
    spacing_mm: Tuple[float, float, float] = (1.5, 1.5, 3.0)
    seed: int = 0


def _zone_grid(shape):
    return (2, 2, 2)


def _body_margin(shape):
    return tuple(max(2, n // 12) for n in shape)


def _zone_center(shape, zone):
    margin = _body_margin(shape)
    zones = _zone_grid(shape)
    center = []
    for axis in range(3):
        inner = shape[axis] - 2 * margin[axis]
        center.append(margin[axis] + (zone[axis] + 0.5) * inner / zones[axis])
    return center


def build_volume(shape, labels, zones, rng: np.random.Generator) -> np.ndarray:
    """Hounsfield-valued grid with the patterns of the active labels.

    Patterns add onto the body rather than overwrite it, so co-occurring
    findings stay individually detectable.
    """
    mx, my, mz = _body_margin(shape)
    hu = np.full(shape, -1000.0, dtype=np.float32)
    body = (slice(mx, shape[0] - mx), slice(my, shape[1] - my), slice(mz, shape[2] - mz))
    noise = rng.normal(0.0, 5.0, size=hu[body].shape).astype(np.float32)
    hu[body] = -400.0 + noise
    xs = np.arange(shape[0], dtype=np.float32)[:, None, None]
    ys = np.arange(shape[1], dtype=np.float32)[None, :, None]
    zs = np.arange(shape[2], dtype=np.float32)[None, None, :]

    def ball_mask(center, radius):
        d2 = (xs - center[0]) ** 2 + (ys - center[1]) ** 2 + (2.0 * (zs - center[2])) ** 2
        return d2 <= radius ** 2

    r_sphere = max(4, round(min(shape[0], shape[1]) / 6))
    r_cavity = max(4, round(min(shape[0], shape[1]) / 5))
    band_half = max(1, shape[2] // 12)
    checker_half = max(4, round(min(shape[0], shape[1]) / 8))
    cell = max(2, checker_half // 2)
    bump = np.zeros(shape, dtype=np.float32)

    for i, name in enumerate(ABNORMALITIES):
        if not labels[i]:
            continue
        center = _zone_center(shape, zones[i])
        if name == "sphere sign":
            bump[ball_mask(center, r_sphere)] += 500.0
        elif name == "band sign":
            z0 = int(round(center[2]))
            lo = max(mz, z0 - band_half)
            hi = min(shape[2] - mz, z0 + band_half + 1)
            bump[mx:shape[0] - mx, my:shape[1] - my, lo:hi] += 250.0
        elif name == "checker sign":
            cx, cy, cz = (int(round(c)) for c in center)
            x0, x1 = max(0, cx - checker_half), min(shape[0], cx + checker_half)
            y0, y1 = max(0, cy - checker_half), min(shape[1], cy + checker_half)
            z0, z1 = max(0, cz - checker_half // 2), min(shape[2], cz + checker_half // 2)
            gx = (np.arange(x0, x1)[:, None, None] // cell)
            gy = (np.arange(y0, y1)[None, :, None] // cell)
            gz = (np.arange(z0, z1)[None, None, :] // cell)
            parity = ((gx + gy + gz) % 2).astype(np.float32)
            bump[x0:x1, y0:y1, z0:z1] += np.where(parity == 0, 500.0, -450.0)
        elif name == "cavity sign":
            bump[ball_mask(center, r_cavity)] -= 450.0
    hu += bump
    np.clip(hu, -1000.0, 200.0, out=hu)
    return hu


def _findings(labels, zones) -> str:
    sentences = []
    for i, name in enumerate(ABNORMALITIES):
        cap = name[:1].upper() + name[1:]
        if labels[i]:
            zx, zy, zz = zones[i]
            sentences.append(
                f"{cap} is seen in the {ZONE_WORDS_X[zx]} {ZONE_WORDS_Y[zy]} "
                f"{ZONE_WORDS_Z[zz]} region."
            )
        else:
            sentences.append(f"No {name}.")
    return " ".join(sentences)


def _impression(labels) -> str:
    count = int(sum(labels))
    present = [n for n, l in zip(ABNORMALITIES, labels) if l]
    head = f"{COUNT_WORDS[count]} abnormal signs."
    if present:
        listing = " ".join(n[:1].upper() + n[1:] + "." for n in present)
        return f"{head} {listing}"
    return head


def _draw_labels(rng: np.random.Generator, n: int) -> np.ndarray:
    """Bernoulli(1/2) labels, resampled so every study has a finding and
    every label has both classes."""
    v = len(ABNORMALITIES)
    for _ in range(1000):
        labels = (rng.random((n, v)) < 0.5).astype(np.int64)
        empty = labels.sum(axis=1) == 0
        while empty.any():
            labels[empty] = (rng.random((int(empty.sum()), v)) < 0.5).astype(np.int64)
            empty = labels.sum(axis=1) == 0
        if ((labels.sum(axis=0) > 0) & (labels.sum(axis=0) < n)).all():
            return labels
    raise RuntimeError("could not draw balanced synthetic labels")


@dataclass
class SyntheticData:
    manifest_path: Path
    vocab_path: Path
    volumes_dir: Path
    config: SyntheticConfig
    rows: list


def generate(out_dir, config: SyntheticConfig = SyntheticConfig()) -> SyntheticData:
    """Write volumes, manifest.jsonl, and vocab.txt under out_dir."""
    out_dir = Path(out_dir)
    volumes_dir = out_dir / "volumes"
    volumes_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    zones_grid = _zone_grid(config.shape)
    rows = []
    seen_findings = set()
    for split, n, tag in (("train", config.n_train, "TR"), ("valid", config.n_valid, "VA")):
        labels = _draw_labels(rng, n)
        for i in range(n):
            for attempt in range(200):
                zones = [
                    tuple(int(rng.integers(0, zones_grid[a])) for a in range(3))
                    for _ in ABNORMALITIES
                ]
                findings = _findings(labels[i], zones)
                if findings not in seen_findings:
                    seen_findings.add(findings)
                    break
            else:
                raise RuntimeError("could not make report text unique")
            hu = build_volume(config.shape, labels[i], zones, rng)
            raw = (hu + 1024.0).astype(np.int16)
            study_id = f"S{tag}{i:03d}"
            vol_path = volumes_dir / f"{study_id}.vol"
            volio.save_volume(
                VolumeGrid(raw, config.spacing_mm, rescale_slope=1.0,
                           rescale_intercept=-1024.0, unit="raw"),
                vol_path,
            )
            rows.append({
                "study_id": study_id,
                "patient_id": f"P{tag}{i:03d}",
                "volume_path": str(vol_path),
                "findings": findings,
                "impression": _impression(labels[i]),
                "clinical_information": "Synthetic phantom study.",
                "technique": "Synthetic grid protocol.",
                "labels": labels_to_text(labels[i]),
                "split": split,
            })
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(rows, manifest_path)
    vocab_path = out_dir / "vocab.txt"
    AbnormalityVocab(ABNORMALITIES).to_file(vocab_path)
    return SyntheticData(manifest_path, vocab_path, volumes_dir, config, rows)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="generate a synthetic desk-scale corpus")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n-train", type=int, default=64)
    parser.add_argument("--n-valid", type=int, default=32)
    parser.add_argument("--shape", default="48,48,24", help="X,Y,Z voxels")
    args = parser.parse_args(argv)
    shape = tuple(int(v) for v in args.shape.split(","))
    cfg = SyntheticConfig(n_train=args.n_train, n_valid=args.n_valid,
                          shape=shape, seed=args.seed)
    data = generate(args.out, cfg)
    print(f"wrote {len(data.rows)} studies under {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
