"""Plain-JSON files for game forms, datasets and run summaries.

Every file carries ``format_version``. Floats are written with full
precision, so loading a file and writing it back gives the same bytes.

Form file::

    {"format_version": 1, "kind": "form", "game": "cournot", "n": 5}
    {"format_version": 1, "kind": "form", "game": "congestion", "n_nodes": 8,
     "edges": [[u, v, L_e1, ..., L_ep], ...], "commodities": [[s, t], ...]}
    {"format_version": 1, "kind": "form", "game": "<other>", "n": .., "m": .., "p": ..,
     "maps": {"R0": {"const": .., "coef": ..}, ...}, "eq_rows": [..],
     "row_agent": [..], "box": {"lower": [..], "upper": [..]}}

Infinite box bounds are stored as null.

Dataset file::

    {"format_version": 1, "kind": "dataset", "game": .., "n": .., "m": .., "p": ..,
     "sigma": .., "seed": .., "theta_true": [..] or null, "form": "<form file>",
     "points": [{"mu": [..], "x": [..], "split": "train" | "test"}, ...]}
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from potlearn.games import CongestionSpec, Dataset, congestion_form, cournot_form
from potlearn.model import AffineGameForm, AffineMap, Box, Datapoint

FORMAT_VERSION = 1
MAP_NAMES = ("R0", "Ri", "c0", "C", "A", "b")


class FormatError(ValueError):
    """A file does not follow the expected layout."""


def _dump(obj: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")


def _load(path: str | Path, kind: str) -> dict:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(obj, dict) or obj.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind} file")
    if obj.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {obj.get('format_version')!r}")
    return obj


def _bounds(values) -> list:
    return [None if not np.isfinite(v) else float(v) for v in values]


def _unbounds(values, fill: float) -> np.ndarray:
    return np.array([fill if v is None else v for v in values], dtype=float)


def form_to_dict(form: AffineGameForm) -> dict:
    head = {"format_version": FORMAT_VERSION, "kind": "form", "game": form.name}
    if form.name == "cournot":
        return {**head, "n": form.n}
    if form.name == "congestion":
        L = np.asarray(form.meta["L"], dtype=float)
        return {
            **head,
            "n_nodes": int(form.meta["n_nodes"]),
            "edges": [[int(u), int(v), *map(float, L[e])] for e, (u, v) in enumerate(form.meta["edges"])],
            "commodities": [[int(s), int(t)] for s, t in form.meta["commodities"]],
        }
    maps = {}
    for name in MAP_NAMES:
        mp = getattr(form, name)
        maps[name] = {"const": mp.const.tolist(), "coef": None if mp.coef is None else mp.coef.tolist()}
    box = None if form.box is None else {"lower": _bounds(form.box.lower), "upper": _bounds(form.box.upper)}
    return {
        **head, "n": form.n, "m": form.m, "p": form.p, "maps": maps,
        "eq_rows": form.eq_rows.tolist(), "row_agent": form.row_agent.tolist(), "box": box,
    }


def form_from_dict(obj: dict) -> AffineGameForm:
    try:
        game = obj["game"]
        if game == "cournot":
            return cournot_form(int(obj["n"]))
        if game == "congestion":
            edges = [(int(r[0]), int(r[1])) for r in obj["edges"]]
            L = np.array([r[2:] for r in obj["edges"]], dtype=float)
            spec = CongestionSpec(int(obj["n_nodes"]), edges, L, [tuple(c) for c in obj["commodities"]],
                                  np.ones(L.shape[1]))
            return congestion_form(spec)
        maps = {name: AffineMap(np.array(m["const"], dtype=float),
                                None if m["coef"] is None else np.array(m["coef"], dtype=float))
                for name, m in obj["maps"].items()}
        box = obj.get("box")
        if box is not None:
            box = Box(_unbounds(box["lower"], -np.inf), _unbounds(box["upper"], np.inf))
        return AffineGameForm(
            n=int(obj["n"]), m=int(obj["m"]), p=int(obj["p"]), **maps,
            eq_rows=np.array(obj.get("eq_rows", []), dtype=int),
            row_agent=None if obj.get("row_agent") is None else np.array(obj["row_agent"], dtype=int),
            box=box, name=game,
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed form description: {exc!r}") from exc


def save_form(form: AffineGameForm, path: str | Path) -> None:
    _dump(form_to_dict(form), path)


def load_form(path: str | Path) -> AffineGameForm:
    return form_from_dict(_load(path, "form"))


def save_dataset(dataset: Dataset, path: str | Path, form_file: str | None = None, seed: int | None = None) -> None:
    test = set(dataset.test_idx.tolist())
    meta = dataset.meta
    obj = {
        "format_version": FORMAT_VERSION,
        "kind": "dataset",
        "game": meta.get("game"),
        "n": meta.get("n"),
        "m": meta.get("m"),
        "p": meta.get("p"),
        "sigma": dataset.sigma,
        "seed": seed if seed is not None else meta.get("seed"),
        "theta_true": meta.get("theta_true"),
        "form": form_file if form_file is not None else meta.get("form"),
        "points": [
            {
                "mu": None if dp.mu is None else np.asarray(dp.mu).tolist(),
                "x": np.asarray(dp.x).tolist(),
                "split": "test" if k in test else "train",
            }
            for k, dp in enumerate(dataset.points)
        ],
    }
    _dump(obj, path)


def load_dataset(path: str | Path) -> Dataset:
    obj = _load(path, "dataset")
    try:
        points, train_idx, test_idx = [], [], []
        for k, rec in enumerate(obj["points"]):
            mu = None if rec["mu"] is None else np.array(rec["mu"], dtype=float)
            points.append(Datapoint(x=np.array(rec["x"], dtype=float), mu=mu))
            if rec["split"] == "train":
                train_idx.append(k)
            elif rec["split"] == "test":
                test_idx.append(k)
            else:
                raise FormatError(f"{path}: point {k} has unknown split {rec['split']!r}")
        meta = {key: obj.get(key) for key in ("game", "n", "m", "p", "seed", "theta_true", "form")}
        return Dataset(points=points, sigma=float(obj["sigma"]), train_idx=train_idx, test_idx=test_idx, meta=meta)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed dataset ({exc!r})") from exc


def resolve_form_path(dataset_path: str | Path, dataset: Dataset) -> Path:
    """Form file named in a dataset header, relative to the dataset's directory."""
    name = dataset.meta.get("form")
    if not name:
        raise FormatError(f"{dataset_path}: dataset does not name a form file; pass --form")
    p = Path(name)
    return p if p.is_absolute() else Path(dataset_path).parent / p


def save_json(obj: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
