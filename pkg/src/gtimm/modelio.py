"""Plain-text model files.

A model file is a sectioned text block: [meta], [family], [variance],
[beta_star] (p rows by M columns), [b_hat], [tree] (one node per line),
plus optional [groups], [schema], and [standardization] sections carrying
what prediction on a fresh CSV needs.  Every float is written with repr,
so a round trip reproduces the model to full precision.  Baselines share
the container via the kind tag in [meta].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baselines import ForestModel, LmmModel
from .data import StandardizationParams
from .errors import GtimmError
from .mixedmodel import GtimmModel, get_family
from .tree import RegressionTree, tree_from_lines, tree_to_lines

_HEADER = "gtimm-model-file v1"


@dataclass
class ModelFile:
    """A deserialized model plus the metadata needed to apply it to a CSV."""

    kind: str
    model: object
    y_col: str | None = None
    x_cols: tuple[str, ...] | None = None
    group_col: str | None = None
    z_cols: tuple[str, ...] | None = None
    group_names: tuple[str, ...] | None = None
    standardization: StandardizationParams | None = None


def _kind_of(model) -> str:
    if isinstance(model, GtimmModel):
        return "gtimm"
    if isinstance(model, LmmModel):
        return "lmm"
    if isinstance(model, RegressionTree):
        return "tree"
    if isinstance(model, ForestModel):
        return "forest"
    raise TypeError(f"cannot serialize model of type {type(model).__name__}")


def _matrix_lines(a: np.ndarray) -> list[str]:
    return [" ".join(repr(float(v)) for v in row) for row in np.atleast_2d(a)]


def save_model(path, model, *, y_col=None, x_cols=None, group_col=None,
               z_cols=None, group_names=None, standardization=None) -> None:
    kind = _kind_of(model)
    lines = [_HEADER, "[meta]", f"kind={kind}"]

    if kind == "gtimm":
        fam = get_family(model.family)
        lines += ["[family]", f"name={fam.name}", f"dispersion={fam.dispersion!r}"]
        lines += ["[variance]", f"sigma_b2={model.sigma_b2!r}", f"sigma_eps2={model.sigma_eps2!r}"]
        lines += ["[beta_star]"] + _matrix_lines(model.beta_star)
        lines += ["[b_hat]"] + [repr(float(v)) for v in model.b_hat]
        lines += ["[tree]"] + tree_to_lines(model.tree)
    elif kind == "lmm":
        lines += ["[family]", "name=gaussian", "dispersion=1.0"]
        lines += ["[variance]", f"sigma_b2={model.sigma_b2!r}", f"sigma_eps2={model.sigma_eps2!r}"]
        lines += ["[beta_star]"] + _matrix_lines(model.beta[:, None])
        lines += ["[b_hat]"] + [repr(float(v)) for v in model.b_tilde]
    elif kind == "tree":
        lines += ["[tree]"] + tree_to_lines(model)
    else:  # forest
        lines += ["[forest]", f"n_trees={model.n_trees}", f"max_leaves={model.max_leaves}",
                  f"bootstrap={model.bootstrap}", f"feature_subsample={model.feature_subsample}",
                  f"seed={model.seed}"]
        for i, t in enumerate(model.trees):
            lines += [f"[tree {i}]"] + tree_to_lines(t)

    if group_names:
        lines += ["[groups]"] + list(group_names)
    if any(v is not None for v in (y_col, x_cols, group_col, z_cols)):
        lines += ["[schema]"]
        if y_col is not None:
            lines.append(f"y_col={y_col}")
        if x_cols is not None:
            lines.append("x_cols=" + ",".join(x_cols))
        if group_col is not None:
            lines.append(f"group_col={group_col}")
        if z_cols is not None:
            lines.append("z_cols=" + ",".join(z_cols))
    if standardization is not None:
        s = standardization
        lines += ["[standardization]",
                  "x_mean=" + ",".join(repr(float(v)) for v in s.x_mean),
                  "x_sd=" + ",".join(repr(float(v)) for v in s.x_sd),
                  f"y_mean={s.y_mean!r}",
                  f"y_sd={s.y_sd!r}"]

    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _split_sections(text: str) -> dict[str, list[str]]:
    lines = [ln.rstrip("\n") for ln in text.splitlines()]
    if not lines or lines[0] != _HEADER:
        raise GtimmError(f"not a model file (expected header {_HEADER!r})")
    sections: dict[str, list[str]] = {}
    current = None
    for ln in lines[1:]:
        if not ln.strip():
            continue
        if ln.startswith("[") and ln.endswith("]"):
            current = ln[1:-1]
            sections[current] = []
        elif current is None:
            raise GtimmError(f"content before first section: {ln!r}")
        else:
            sections[current].append(ln)
    return sections


def _kv(lines) -> dict[str, str]:
    out = {}
    for ln in lines:
        key, _, value = ln.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_model(path) -> ModelFile:
    with open(path, encoding="utf-8") as fh:
        sections = _split_sections(fh.read())
    meta = _kv(sections.get("meta", []))
    kind = meta.get("kind")
    if kind not in {"gtimm", "lmm", "tree", "forest"}:
        raise GtimmError(f"unknown model kind {kind!r}")

    if kind == "gtimm":
        fam = _kv(sections["family"])
        var = _kv(sections["variance"])
        beta = np.array([[float(v) for v in ln.split()] for ln in sections["beta_star"]])
        b_hat = np.array([float(ln) for ln in sections["b_hat"]])
        tree = tree_from_lines(sections["tree"])
        model = GtimmModel(beta, b_hat, float(var["sigma_b2"]), float(var["sigma_eps2"]),
                           tree, fam["name"])
    elif kind == "lmm":
        var = _kv(sections["variance"])
        beta = np.array([float(ln.split()[0]) for ln in sections["beta_star"]])
        b_tilde = np.array([float(ln) for ln in sections["b_hat"]])
        model = LmmModel(beta, b_tilde, float(var["sigma_b2"]), float(var["sigma_eps2"]))
    elif kind == "tree":
        model = tree_from_lines(sections["tree"])
    else:
        info = _kv(sections["forest"])
        n_trees = int(info["n_trees"])
        trees = [tree_from_lines(sections[f"tree {i}"]) for i in range(n_trees)]
        model = ForestModel(trees, n_trees, int(info["max_leaves"]),
                            info["bootstrap"] == "True",
                            info["feature_subsample"] == "True", int(info["seed"]))

    schema = _kv(sections.get("schema", []))
    std = None
    if "standardization" in sections:
        s = _kv(sections["standardization"])
        std = StandardizationParams(
            np.array([float(v) for v in s["x_mean"].split(",")] if s["x_mean"] else []),
            np.array([float(v) for v in s["x_sd"].split(",")] if s["x_sd"] else []),
            float(s["y_mean"]),
            float(s["y_sd"]),
        )
    group_names = tuple(sections["groups"]) if "groups" in sections else None
    x_cols = tuple(schema["x_cols"].split(",")) if "x_cols" in schema else None
    z_cols = tuple(schema["z_cols"].split(",")) if "z_cols" in schema else None
    return ModelFile(kind, model, schema.get("y_col"), x_cols, schema.get("group_col"),
                     z_cols, group_names, std)
