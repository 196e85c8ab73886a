"""Evaluation harness: defense x mask x attack grids, accuracy and TAR@FAR, plots."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attack import AttackSpec, pgd_patch_attack
from .data import LabeledImages, make_pairs
from .defense import DefensePipeline, defend_with_ground_truth
from .errors import DependencyError
from .fmask import make_mask
from .models import CLOSED_SET, DataError, FaceNet, batched, calibrate_threshold, pair_scores
from .utils import derive_seed, fingerprint

log = logging.getLogger(__name__)

DEFENSES = ("undefended", "gt", "ours-", "ours+")
ATTACKS = ("clean", "pgd", "bpda")


def closed_set_accuracy(model, data: LabeledImages) -> float:
    """Percentage of argmax-correct predictions of ``model`` (any callable returning logits)."""
    if len(data) == 0:
        raise DataError("cannot compute accuracy on an empty set")
    logits = model(data.images)
    return 100.0 * (logits.argmax(1) == data.labels).double().mean().item()


def tar_at_far(genuine_scores, impostor_scores, far: float = 1e-3) -> float:
    """Genuine acceptance percentage at the threshold calibrated on impostor scores."""
    genuine_scores = np.asarray(genuine_scores)
    if len(genuine_scores) == 0:
        raise DataError("no genuine pairs")
    accepted = int((genuine_scores > calibrate_threshold(impostor_scores, far)).sum())
    return 100.0 * accepted / len(genuine_scores)


def open_set_tar_at_far(embed, genuine_pairs, impostor_pairs, far: float = 1e-3,
                        images: torch.Tensor | None = None) -> float:
    """TAR@FAR in percent over index pairs.

    ``embed`` is either a precomputed (N, D) embedding tensor or a callable
    (model or pipeline) applied to ``images``.
    """
    if isinstance(embed, torch.Tensor):
        emb = embed
    else:
        if images is None:
            raise ValueError("images are required when embed is a model")
        emb = embed(images)
    return tar_at_far(pair_scores(emb, genuine_pairs), pair_scores(emb, impostor_pairs), far)


def parse_defense(name: str) -> tuple[str, int | None]:
    """``'ours+:4'`` -> ``('ours+', 4)``; other names carry no subgrid count."""
    base, _, n = name.partition(":")
    if base not in DEFENSES:
        raise ValueError(f"unknown defense {name!r}; choose from {DEFENSES}")
    if n and base != "ours+":
        raise ValueError(f"only ours+ takes a subgrid count, got {name!r}")
    return base, int(n) if n else None


@dataclass
class ExperimentGrid:
    """Axes of an evaluation run plus everything needed to reproduce it.

    ``defenses`` holds names from :data:`DEFENSES` (``ours+:n`` picks the SAF
    subgrid count); ``masks`` holds ``fmask``, ``rmask`` or stencil names;
    ``attacks`` holds ``clean``, ``pgd`` (non-adaptive, on the bare model)
    and ``bpda`` (adaptive, through the defense).
    """

    defenses: list[str]
    masks: list[str]
    attacks: list[str]
    system: str = CLOSED_SET
    samples_per_cell: int = 500
    seed: int = 0
    saf_n: int = 8
    alpha: float = 0.007
    steps: int = 100
    eps: float = 0.3
    temperature: float = 10.0
    fill_value: float = 0.0
    far: float = 1e-3
    num_genuine: int = 500
    num_impostor: int = 5000
    fr_checkpoint: str | None = None
    segmenter_checkpoint: str | None = None
    mask_options: dict = field(default_factory=dict)

    def __post_init__(self):
        for axis in ("defenses", "masks", "attacks"):
            if not getattr(self, axis):
                raise ValueError(f"grid axis {axis!r} is empty")
        for d in self.defenses:
            parse_defense(d)
        for a in self.attacks:
            if a not in ATTACKS:
                raise ValueError(f"unknown attack {a!r}; choose from {ATTACKS}")
        if self.samples_per_cell < 1:
            raise ValueError("samples_per_cell must be >= 1")

    def cells(self) -> list[tuple[str, str, str]]:
        return [(d, m, a) for m in self.masks for a in self.attacks for d in self.defenses]

    def fingerprint(self) -> str:
        return fingerprint(asdict(self))


@dataclass
class EvaluationReport:
    cells: list[dict]
    fingerprint: str

    def metric(self, defense: str, mask: str, attack: str) -> float:
        for c in self.cells:
            if (c["defense"], c["mask"], c["attack"]) == (defense, mask, attack):
                return c["metric"]
        raise KeyError((defense, mask, attack))

    def table(self) -> str:
        """Tab-separated summary: one row per (mask, attack), one column per defense."""
        defenses = list(dict.fromkeys(c["defense"] for c in self.cells))
        rows = defaultdict(dict)
        for c in self.cells:
            rows[(c["mask"], c["attack"])][c["defense"]] = c["metric"]
        lines = ["\t".join(["mask", "attack", *defenses])]
        for (mask, attack), vals in rows.items():
            lines.append("\t".join([mask, attack, *(f"{vals[d]:.2f}" if d in vals else "" for d in defenses)]))
        return "\n".join(lines) + "\n"


def _read_records(path: Path, fp: str) -> dict:
    done = {}
    if not path.exists():
        return done
    for line in path.read_text().splitlines():
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            continue  # torn final line from an interrupted run
        if rec.get("fingerprint") == fp:
            done[(rec["defense"], rec["mask"], rec["attack"])] = rec
    return done


def _append_record(path: Path, rec: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


class _Cell:
    """Shared state for evaluating one grid: models, data, masks and attack caches."""

    def __init__(self, grid: ExperimentGrid, fr_model, segmenter, data: LabeledImages):
        self.grid = grid
        self.fr = fr_model
        self.seg = segmenter
        n = min(grid.samples_per_cell, len(data))
        pick = np.random.default_rng(derive_seed(grid.seed, 0x5EED)).permutation(len(data))[:n]
        self.data = data[torch.from_numpy(np.sort(pick))]
        self._masks = {}
        self._attacked = {}
        if grid.system != CLOSED_SET:
            rng = np.random.default_rng(derive_seed(grid.seed, 0x9A15))
            self.genuine, self.impostor = make_pairs(self.data.labels.numpy(), grid.num_genuine,
                                                     grid.num_impostor, rng)

    def masks(self, name: str) -> torch.Tensor:
        """Per-image masks for a mask family, shared by every cell in its row."""
        if name not in self._masks:
            h, w = self.data.images.shape[-2:]
            rng = np.random.default_rng(derive_seed(self.grid.seed, self.grid.masks.index(name) + 1))
            opts = self.grid.mask_options.get(name, {})
            self._masks[name] = torch.from_numpy(
                np.stack([make_mask(name, h, w, rng, **opts) for _ in range(len(self.data))]))
        return self._masks[name]

    def pipeline(self, defense: str) -> DefensePipeline | None:
        base, n = parse_defense(defense)
        if base in ("undefended", "gt"):
            return None
        if self.seg is None:
            raise DependencyError(f"defense {defense!r} needs a segmenter checkpoint")
        return DefensePipeline(self.seg, self.fr, saf_n=(n or self.grid.saf_n) if base == "ours+" else None,
                               fill_value=self.grid.fill_value)

    def attack(self, defense: str, mask: str, attack: str, seed: int) -> torch.Tensor:
        x = self.data.images
        if attack == "clean":
            return x
        pipe = self.pipeline(defense) if attack == "bpda" else None
        key = (mask, attack, defense if pipe is not None else None)
        if key in self._attacked:
            return self._attacked[key]
        g = self.grid
        spec = AttackSpec(source=x, mask=self.masks(mask), system=g.system, alpha=g.alpha, steps=g.steps,
                          eps=g.eps, source_labels=self.data.labels, adaptive=pipe is not None,
                          temperature=g.temperature, seed=seed)
        self._attacked[key] = pgd_patch_attack(spec, self.fr, pipe)
        return self._attacked[key]

    def outputs(self, defense: str, images: torch.Tensor, mask: str, attack: str) -> torch.Tensor:
        base, _ = parse_defense(defense)
        if base == "undefended":
            return batched(self.fr, images)
        if base == "gt":
            m = self.masks(mask) if attack != "clean" else torch.zeros(len(images), *images.shape[-2:])
            return defend_with_ground_truth(images, m, self.fr, self.grid.fill_value)
        return self.pipeline(defense)(images)

    def metric(self, defense: str, mask: str, attack: str, seed: int) -> float:
        images = self.attack(defense, mask, attack, seed)
        out = self.outputs(defense, images, mask, attack)
        if self.grid.system == CLOSED_SET:
            return closed_set_accuracy(lambda _: out, LabeledImages(images, self.data.labels))
        # probes (first of each genuine pair) are attacked; references and impostors stay clean
        clean = self.outputs(defense, self.data.images, mask, "clean")
        gen = (out[self.genuine[:, 0]] * clean[self.genuine[:, 1]]).sum(1).double().numpy()
        return tar_at_far(gen, pair_scores(clean, self.impostor), self.grid.far)


def _load_checkpoints(grid: ExperimentGrid, fr_model, segmenter):
    from .models import load_model
    from .segmenter import load_segmenter
    needs_seg = any(parse_defense(d)[0] in ("ours-", "ours+") for d in grid.defenses)
    if fr_model is None:
        if not grid.fr_checkpoint or not Path(grid.fr_checkpoint).exists():
            raise DependencyError(f"cell {grid.cells()[0]}: FR checkpoint {grid.fr_checkpoint!r} not found; "
                                  "run `radap train-fr` first")
        fr_model = load_model(grid.fr_checkpoint)
    if segmenter is None and needs_seg:
        cell = next(c for c in grid.cells() if parse_defense(c[0])[0] in ("ours-", "ours+"))
        if not grid.segmenter_checkpoint or not Path(grid.segmenter_checkpoint).exists():
            raise DependencyError(f"cell {cell}: segmenter checkpoint {grid.segmenter_checkpoint!r} not found; "
                                  "run `radap train-segmenter` first")
        segmenter = load_segmenter(grid.segmenter_checkpoint)
    return fr_model, segmenter


def run_grid(grid: ExperimentGrid, data: LabeledImages, out_dir=None,
             fr_model: FaceNet | None = None, segmenter=None) -> EvaluationReport:
    """Evaluate every cell of ``grid`` on ``data``.

    Models are taken from the arguments or loaded from the grid's checkpoint
    paths. With ``out_dir`` each finished cell is appended to
    ``cells.jsonl``; a rerun with the same grid skips cells already recorded
    there. Cell ``i`` draws its randomness from ``derive_seed(grid.seed, i)``.
    """
    fr_model, segmenter = _load_checkpoints(grid, fr_model, segmenter)
    if len(data) == 0:
        raise DataError("evaluation set is empty")
    fp = grid.fingerprint()
    path = None
    done = {}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "cells.jsonl"
        done = _read_records(path, fp)
    state = _Cell(grid, fr_model, segmenter, data)
    records = []
    for i, (d, m, a) in enumerate(grid.cells()):
        if (d, m, a) in done:
            records.append(done[(d, m, a)])
            continue
        seed = derive_seed(grid.seed, i)
        start = time.perf_counter()
        value = state.metric(d, m, a, seed)
        if not (0 <= value <= 100 and math.isfinite(value)):
            raise RuntimeError(f"cell {(d, m, a)} produced out-of-range metric {value}")
        base, n = parse_defense(d)
        rec = {"defense": d, "mask": m, "attack": a, "metric": value,
               "metric_name": "acc" if grid.system == CLOSED_SET else f"tar@{grid.far:g}far",
               "count": len(state.data), "seed": seed, "seconds": round(time.perf_counter() - start, 3),
               "saf_n": (n or grid.saf_n) if base == "ours+" else None, "fingerprint": fp}
        log.info("cell %s/%s/%s -> %.2f", d, m, a, value)
        records.append(rec)
        if path is not None:
            _append_record(path, rec)
    report = EvaluationReport(records, fp)
    if out_dir is not None:
        (out_dir / "summary.tsv").write_text(report.table())
    return report


def emit_plots(cells: list[dict], out_dir, x: str = "saf_n", group: str = "mask",
               series: str = "attack") -> list[Path]:
    """One chart per ``group`` value plotting the metric against ``x``.

    Numeric ``x`` values give line charts, others bar charts. Each chart gets
    a JSON sidecar holding the exact plotted series. Cells without a value
    for ``x`` are ignored; if none remain, nothing is written.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    usable = [c for c in cells if c.get(x) is not None]
    if not usable:
        log.warning("no cells carry %r; no plots written", x)
        return []
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for key in sorted({c[group] for c in usable}):
        lines = defaultdict(dict)
        for c in usable:
            if c[group] == key:
                lines[c[series]][c[x]] = c["metric"]
        data = {s: sorted(v.items(), key=lambda kv: (str(type(kv[0])), kv[0])) for s, v in sorted(lines.items())}
        numeric = all(isinstance(k, (int, float)) for pts in data.values() for k, _ in pts)
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for i, (s, pts) in enumerate(data.items()):
            xs, ys = zip(*pts)
            if numeric:
                ax.plot(xs, ys, marker="o", label=str(s))
            else:
                width = 0.8 / len(data)
                ax.bar(np.arange(len(xs)) + i * width, ys, width, label=str(s))
                ax.set_xticks(np.arange(len(xs)) + 0.4 - width / 2, [str(v) for v in xs])
        ax.set_xlabel(x)
        ax.set_ylabel(usable[0].get("metric_name", "metric"))
        ax.set_ylim(0, 100)
        ax.set_title(f"{group} = {key}")
        ax.legend(fontsize=8)
        fig.tight_layout()
        stem = out_dir / f"{x}-{group}-{key}"
        fig.savefig(stem.with_suffix(".png"))
        plt.close(fig)
        stem.with_suffix(".json").write_text(json.dumps({"x": x, "group": group, "key": key, "series": data},
                                                        indent=2, sort_keys=True))
        written.append(stem.with_suffix(".png"))
    return written


def load_cells(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
