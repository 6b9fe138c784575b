"""Desk-scale synthetic IR dataset generator.

Renders two-domain thermal imagery of PV modules: a module is a grid of
cells_y x cells_x cells separated by cooler gap lines, with a warm
junction box at the top edge and an ambient background band around it.
Per-plant base temperature, sensor noise and image resolution create a
controllable domain shift between generated plants.

Faults are rendered as temperature offsets on top of the normal module:

    Mh   whole module strongly hot, hotter towards the junction box
    Mp   whole module mildly and uniformly warm
    Sh   one of three substrings strongly hot
    Sp   one substring mildly warm
    Pid  warm cells concentrated in the bottom rows
    Cm+  3..6 hot cells
    Cs+  one hot cell
    C    one or two mildly warm cells
    D    small hot rectangle at a substring boundary (bypass diode)
    Chs  hot disc at most one cell wide

Every anomalous class except Mp places its hottest pixel at least
``hot_margin_c`` degrees above the image median by construction.
Generation is fully deterministic for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ThermoscanError
from .manifest import (
    DEFAULT_GAIN,
    DEFAULT_OFFSET,
    FAULT_CLASSES,
    IRImage,
    ManifestEntry,
    write_manifest,
    write_png16,
)

# Relative temperatures of normal module structure, degrees C.
MODULE_WARMUP = 1.5
GAP_DROP = 1.2
JUNCTION_WARMUP = 1.0
CELL_SIGMA = 0.25
CELL_OFFSET_CLIP = 0.5
VIEW_DRIFT_SIGMA = 0.2

MAX_MODULES = 100_000
MAX_VIEWS = 1_000


@dataclass
class SynthConfig:
    plant_id: int = 0
    base_temp_c: float = 30.0
    noise_sigma: float = 0.25
    cells_x: int = 10
    cells_y: int = 6
    image_height: int = 40
    image_width: int = 64
    fault_mix: dict[str, float] = field(default_factory=dict)
    images_per_module: int = 8
    module_count: int = 50
    seed: int = 0
    hot_margin_c: float = 2.0
    gain: float = DEFAULT_GAIN
    offset: float = DEFAULT_OFFSET

    def __post_init__(self):
        for name in self.fault_mix:
            if name not in FAULT_CLASSES:
                raise ThermoscanError(f"unknown fault class in mix: {name!r}")
        total = sum(self.fault_mix.values())
        if total > 1.0 + 1e-12 or any(p < 0 for p in self.fault_mix.values()):
            raise ThermoscanError("fault probabilities must be >= 0 and sum to <= 1")
        if self.images_per_module < 1 or self.images_per_module >= MAX_VIEWS:
            raise ThermoscanError("images_per_module must be in [1, 999]")
        if self.module_count < 1 or self.module_count >= MAX_MODULES:
            raise ThermoscanError("module_count must be in [1, 99999]")
        if min(self.image_height, self.image_width) < 8:
            raise ThermoscanError("image resolution must be at least 8x8")
        if self.cells_x < 3 or self.cells_y < 2:
            raise ThermoscanError("module grid must be at least 3x2 cells")
        if not self.noise_sigma >= 0:
            raise ThermoscanError("noise sigma must be >= 0")
        if not self.gain > 0:
            raise ThermoscanError("gain must be > 0")

    def to_text(self) -> str:
        mix = ",".join(f"{k}:{v:g}" for k, v in self.fault_mix.items())
        lines = [
            f"plant_id = {self.plant_id}",
            f"base_temp_c = {self.base_temp_c:g}",
            f"noise_sigma = {self.noise_sigma:g}",
            f"cells_x = {self.cells_x}",
            f"cells_y = {self.cells_y}",
            f"image_height = {self.image_height}",
            f"image_width = {self.image_width}",
            f"fault_mix = {mix}",
            f"images_per_module = {self.images_per_module}",
            f"module_count = {self.module_count}",
            f"seed = {self.seed}",
            f"hot_margin_c = {self.hot_margin_c:g}",
            f"gain = {self.gain:g}",
            f"offset = {self.offset:g}",
        ]
        return "\n".join(lines) + "\n"


def parse_synth_config(path: Path | str) -> SynthConfig:
    """Parse a `key = value` config file into a SynthConfig."""
    ints = {"plant_id", "cells_x", "cells_y", "image_height", "image_width",
            "images_per_module", "module_count", "seed"}
    floats = {"base_temp_c", "noise_sigma", "hot_margin_c", "gain", "offset"}
    kwargs: dict = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ThermoscanError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ThermoscanError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in ints:
            kwargs[key] = int(value)
        elif key in floats:
            kwargs[key] = float(value)
        elif key == "fault_mix":
            mix = {}
            if value:
                for item in value.split(","):
                    name, _, prob = item.partition(":")
                    mix[name.strip()] = float(prob)
            kwargs["fault_mix"] = mix
        else:
            raise ThermoscanError(f"{path}:{lineno}: unknown key {key!r}")
    return SynthConfig(**kwargs)


def _cell_edges(n_px: int, n_cells: int) -> np.ndarray:
    return np.round(np.linspace(0, n_px, n_cells + 1)).astype(int)


class _ModuleRenderer:
    """Draws the per-module temperature canvas and its fault overlay."""

    def __init__(self, config: SynthConfig):
        self.cfg = config
        h, w = config.image_height, config.image_width
        self.border = max(2, min(h, w) // 10)
        self.jitter = max(1, self.border // 2)
        self.canvas_h = h + 2 * self.jitter
        self.canvas_w = w + 2 * self.jitter
        # Module rectangle in canvas coordinates; stays fully inside every
        # jittered crop window.
        self.top = self.jitter + self.border
        self.left = self.jitter + self.border
        self.mod_h = h - 2 * self.border
        self.mod_w = w - 2 * self.border
        self.row_edges = _cell_edges(self.mod_h, config.cells_y)
        self.col_edges = _cell_edges(self.mod_w, config.cells_x)
        self.substrings = np.array_split(np.arange(config.cells_x), 3)

    def _cell_slice(self, row: int, col: int) -> tuple[slice, slice]:
        r0, r1 = self.row_edges[row], self.row_edges[row + 1]
        c0, c1 = self.col_edges[col], self.col_edges[col + 1]
        return slice(r0, r1), slice(c0, c1)

    def normal_module(self, rng: np.random.Generator) -> np.ndarray:
        """Relative temperature map of a fault-free module area."""
        cfg = self.cfg
        mod = np.full((self.mod_h, self.mod_w), MODULE_WARMUP)
        offsets = np.clip(
            rng.normal(0.0, CELL_SIGMA, size=(cfg.cells_y, cfg.cells_x)),
            -CELL_OFFSET_CLIP,
            CELL_OFFSET_CLIP,
        )
        for r in range(cfg.cells_y):
            for c in range(cfg.cells_x):
                rs, cs = self._cell_slice(r, c)
                mod[rs, cs] += offsets[r, c]
        for edge in self.row_edges[1:-1]:
            mod[max(edge - 1, 0):edge + 1, :] = MODULE_WARMUP - GAP_DROP
        for edge in self.col_edges[1:-1]:
            mod[:, max(edge - 1, 0):edge + 1] = MODULE_WARMUP - GAP_DROP
        # Junction box: warm patch at the top-centre edge.
        jb_w = max(2, self.mod_w // 6)
        jb_h = max(1, self.row_edges[1] // 2)
        c0 = (self.mod_w - jb_w) // 2
        mod[0:jb_h, c0:c0 + jb_w] = MODULE_WARMUP + JUNCTION_WARMUP
        return mod

    def apply_fault(self, mod: np.ndarray, fault: str, rng: np.random.Generator) -> None:
        """Overlay one fault class onto the module map, in place."""
        cfg = self.cfg

        def heat_cells(cells: list[tuple[int, int]], low: float, high: float) -> None:
            for r, c in cells:
                rs, cs = self._cell_slice(r, c)
                mod[rs, cs] += rng.uniform(low, high)

        if fault == "Mh":
            peak = rng.uniform(7.0, 10.0)
            rows = np.arange(self.mod_h)
            factor = 1.0 - 0.6 * rows / max(self.mod_h - 1, 1)
            mod += peak * factor[:, None]
        elif fault == "Mp":
            mod += rng.uniform(1.8, 2.6)
        elif fault in ("Sh", "Sp"):
            band = self.substrings[int(rng.integers(0, 3))]
            delta = rng.uniform(6.0, 9.0) if fault == "Sh" else rng.uniform(2.5, 4.0)
            c0 = self.col_edges[band[0]]
            c1 = self.col_edges[band[-1] + 1]
            mod[:, c0:c1] += delta
        elif fault == "Pid":
            cells = []
            for r in (cfg.cells_y - 1, cfg.cells_y - 2):
                for c in range(cfg.cells_x):
                    if rng.random() < 0.7:
                        cells.append((r, c))
            if not cells:
                cells = [(cfg.cells_y - 1, int(rng.integers(0, cfg.cells_x)))]
            heat_cells(cells, 3.5, 6.0)
        elif fault == "Cm+":
            count = int(rng.integers(3, 7))
            picks = rng.choice(cfg.cells_y * cfg.cells_x, size=count, replace=False)
            heat_cells([(int(p) // cfg.cells_x, int(p) % cfg.cells_x) for p in picks], 6.0, 9.0)
        elif fault == "Cs+":
            p = int(rng.integers(0, cfg.cells_y * cfg.cells_x))
            heat_cells([(p // cfg.cells_x, p % cfg.cells_x)], 6.0, 9.0)
        elif fault == "C":
            count = int(rng.integers(1, 3))
            picks = rng.choice(cfg.cells_y * cfg.cells_x, size=count, replace=False)
            heat_cells([(int(p) // cfg.cells_x, int(p) % cfg.cells_x) for p in picks], 2.8, 3.8)
        elif fault == "D":
            boundary = int(rng.integers(1, 3))
            centre = self.col_edges[self.substrings[boundary][0]]
            half_w = max(1, self.col_edges[1] // 2)
            height = max(2, self.row_edges[1] * 2 // 3)
            c0 = max(centre - half_w, 0)
            c1 = min(centre + half_w, self.mod_w)
            mod[0:height, c0:c1] += rng.uniform(5.0, 8.0)
        elif fault == "Chs":
            cell_px = min(self.row_edges[1] - self.row_edges[0],
                          self.col_edges[1] - self.col_edges[0])
            radius = rng.uniform(0.25, 0.5) * cell_px
            cy = rng.uniform(radius, self.mod_h - radius)
            cx = rng.uniform(radius, self.mod_w - radius)
            yy, xx = np.mgrid[0:self.mod_h, 0:self.mod_w]
            disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
            if not disc.any():
                disc[int(cy), int(cx)] = True
            mod[disc] += rng.uniform(7.0, 11.0)
        else:
            raise ThermoscanError(f"unknown fault class {fault!r}")

    def canvas(self, mod: np.ndarray) -> np.ndarray:
        out = np.zeros((self.canvas_h, self.canvas_w))
        out[self.top:self.top + self.mod_h, self.left:self.left + self.mod_w] = mod
        return out


def _draw_fault(rng: np.random.Generator, mix: dict[str, float]) -> str | None:
    u = rng.random()
    acc = 0.0
    for name in FAULT_CLASSES:
        acc += mix.get(name, 0.0)
        if u < acc:
            return name
    return None


def synth_generate(config: SynthConfig) -> list[IRImage]:
    """Generate the full image collection for one synthetic plant."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    renderer = _ModuleRenderer(config)
    h, w = config.image_height, config.image_width
    jit = renderer.jitter
    images: list[IRImage] = []
    for m in range(config.module_count):
        fault = _draw_fault(rng, config.fault_mix)
        mod = renderer.normal_module(rng)
        if fault is not None:
            renderer.apply_fault(mod, fault, rng)
        canvas = renderer.canvas(mod)
        module_id = config.plant_id * MAX_MODULES + m
        for v in range(config.images_per_module):
            dy = int(rng.integers(0, 2 * jit + 1))
            dx = int(rng.integers(0, 2 * jit + 1))
            drift = rng.normal(0.0, VIEW_DRIFT_SIGMA)
            crop = canvas[dy:dy + h, dx:dx + w] + config.base_temp_c + drift
            noisy = crop + rng.normal(0.0, config.noise_sigma, size=crop.shape)
            orientation = int(rng.integers(0, 4))
            counts = np.floor((noisy - config.offset) / config.gain + 0.5)
            raw = np.clip(counts, 0, 65535).astype(np.uint16)
            raw = np.rot90(raw, k=(4 - orientation) % 4).copy()
            images.append(
                IRImage(
                    image_id=module_id * MAX_VIEWS + v,
                    plant_id=config.plant_id,
                    module_id=module_id,
                    raw=raw,
                    orientation=orientation,
                    binary_label="anomalous" if fault else "normal",
                    fault_class=fault,
                    gain=config.gain,
                    offset=config.offset,
                )
            )
    return images


def write_dataset(images: list[IRImage], out_dir: Path | str) -> Path:
    """Write images as 16-bit PNGs plus a manifest.jsonl; returns the manifest path."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for im in images:
        rel = f"images/{im.image_id}.png"
        write_png16(out_dir / rel, im.raw)
        entries.append(
            ManifestEntry(
                image_id=im.image_id,
                plant_id=im.plant_id,
                module_id=im.module_id,
                path=rel,
                orientation=im.orientation,
                binary_label=im.binary_label,
                fault_class=im.fault_class,
                gain=im.gain,
                offset=im.offset,
            )
        )
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest_path, entries)
    return manifest_path
