"""Reduced model container, reduced-model JSON and scenario validation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from feederkron.errors import ValidationError
from feederkron.grid import PHASES, Network, PhaseMask, decode_block, encode_block
from feederkron.kron import KronResult, solve_kept
from feederkron.scenario import ScenarioLibrary

FORMAT = "feederkron.reduced/1"


@dataclass
class ReducedModel:
    """Kron-reduced feeder plus the node-to-super-node bookkeeping.

    ``injection_owner[j]`` is the kept node that carries node ``j``'s load;
    ``voltage_owner[j]`` is the kept node whose voltage stands in for ``j``.
    They differ only for nodes reinserted by radialization, which are kept
    with zero injection.
    """

    n_original: int
    kron: KronResult
    clusters: dict[int, tuple[int, ...]]
    injection_owner: np.ndarray
    voltage_owner: np.ndarray
    e_bar: float
    objective: str
    scenario_ids: list[str]
    train_max_err: dict[str, float] = field(default_factory=dict)
    radial: bool = False
    reinserted: tuple[int, ...] = ()
    trace: list = field(default_factory=list, repr=False, compare=False)

    @property
    def kept(self) -> np.ndarray:
        return self.kron.keep

    @property
    def reduction(self) -> float:
        """Fraction of original nodes eliminated."""
        return 1.0 - len(self.kept) / self.n_original

    def aggregate(self, injections: np.ndarray) -> np.ndarray:
        """Map full (L, 3n) injections onto kept nodes (L, 3k)."""
        inj = np.atleast_2d(np.asarray(injections, dtype=complex))
        pos = np.array([self.kron.keep_index_map[int(o)] for o in self.injection_owner])
        out = np.zeros((inj.shape[0], self.kron.k, 3), dtype=complex)
        np.add.at(out, (slice(None), pos), inj.reshape(inj.shape[0], -1, 3))
        return out.reshape(inj.shape[0], -1)

    def node_voltages(self, injections: np.ndarray, present: np.ndarray) -> np.ndarray:
        """Per-node voltages (L, 3n) implied by the reduced model for full injections."""
        v_kept = np.atleast_2d(solve_kept(self.kron, self.aggregate(injections)))
        pos = np.array([self.kron.keep_index_map[int(o)] for o in self.voltage_owner])
        v = v_kept.reshape(v_kept.shape[0], -1, 3)[:, pos, :].reshape(v_kept.shape[0], -1)
        return v * np.asarray(present, dtype=bool).reshape(-1)

    def supernode_voltages(self, injections: np.ndarray) -> np.ndarray:
        return np.atleast_2d(solve_kept(self.kron, self.aggregate(injections)))


@dataclass
class ValidationResult:
    scenario_ids: list[str]
    max_err: np.ndarray
    argmax_node: np.ndarray
    argmax_phase: np.ndarray
    training: np.ndarray

    def histogram(self, bins: int = 20):
        return np.histogram(self.max_err, bins=bins)


def magnitude_errors(net: Network, model: ReducedModel, lib: ScenarioLibrary) -> np.ndarray:
    """| |V_full| - |V_reduced| | at every node-phase, shape (L, n, 3)."""
    if lib.network.n != model.n_original or net.n != model.n_original:
        raise ValidationError(f"reduced model expects {model.n_original} nodes, "
                              f"network has {net.n}")
    v = model.node_voltages(lib.injections, net.present_flat)
    err = np.abs(np.abs(lib.voltages) - np.abs(v))
    err[:, ~net.present_flat] = 0.0
    return err.reshape(len(lib), net.n, 3)


def validate_model(net: Network, model: ReducedModel, lib: ScenarioLibrary) -> ValidationResult:
    err = magnitude_errors(net, model, lib)
    flat = err.reshape(len(lib), -1)
    arg = flat.argmax(axis=1) if flat.size else np.zeros(len(lib), dtype=int)
    train = set(model.scenario_ids)
    return ValidationResult(
        scenario_ids=lib.ids,
        max_err=flat.max(axis=1, initial=0.0),
        argmax_node=arg // 3,
        argmax_phase=arg % 3,
        training=np.array([sid in train for sid in lib.ids], dtype=bool),
    )


def write_validation_report(result: ValidationResult, path: str | Path, bins: int = 20) -> Path:
    """Per-scenario max errors to ``path``; histogram to ``<stem>_hist.csv``."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario_id", "max_err", "node", "phase", "training"])
        for k, sid in enumerate(result.scenario_ids):
            w.writerow([sid, repr(float(result.max_err[k])), int(result.argmax_node[k]),
                        PHASES[int(result.argmax_phase[k])], int(result.training[k])])
    hist_path = path.with_name(path.stem + "_hist.csv")
    with open(hist_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        if len(result.max_err):
            counts, edges = result.histogram(bins)
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    return hist_path


# --------------------------------------------------------------------------
# JSON
# --------------------------------------------------------------------------

def model_to_dict(model: ReducedModel) -> dict[str, Any]:
    kr = model.kron
    keep = [int(k) for k in kr.keep]
    blocks = [
        {"row": keep[i], "col": keep[j], "y_block": encode_block(b)}
        for (i, j), b in sorted(kr.blocks().items())
    ]
    moved = {str(j): int(o) for j, o in enumerate(model.injection_owner)
             if o != model.voltage_owner[j]}
    return {
        "format": FORMAT,
        "n_original": model.n_original,
        "kept": [{"id": keep[p], "phases": str(PhaseMask.from_flags(kr.present[p]))}
                 for p in range(kr.k)],
        "slack": kr.slack,
        "slack_voltage": [[float(z.real), float(z.imag)] for z in kr.slack_voltage],
        "y_kron": blocks,
        "clusters": {str(s): [int(m) for m in members]
                     for s, members in sorted(model.clusters.items())},
        "injection_owner": moved,
        "radial": model.radial,
        "reinserted": [int(r) for r in model.reinserted],
        "provenance": {
            "e_bar": model.e_bar,
            "objective": model.objective,
            "scenario_ids": list(model.scenario_ids),
            "train_max_err": {k: float(v) for k, v in model.train_max_err.items()},
            "reduction": model.reduction,
        },
    }


def model_from_dict(data: dict[str, Any]) -> ReducedModel:
    if data.get("format") != FORMAT:
        raise ValidationError(f"not a reduced model file (format={data.get('format')!r})")
    keep = np.array([d["id"] for d in data["kept"]], dtype=int)
    present = np.array([PhaseMask.parse(d["phases"]).flags for d in data["kept"]],
                       dtype=bool).reshape(-1, 3)
    pos = {int(k): p for p, k in enumerate(keep)}
    k = len(keep)
    y = np.zeros((k, 3, k, 3), dtype=complex)
    for blk in data["y_kron"]:
        try:
            i, j = pos[int(blk["row"])], pos[int(blk["col"])]
        except KeyError as exc:
            raise ValidationError(f"y_kron block references non-kept node {exc}") from exc
        y[i, :, j, :] = decode_block(blk["y_block"], "y_kron block")
    kron = KronResult(
        y_kron=y.reshape(3 * k, 3 * k),
        keep=keep,
        present=present,
        slack=data.get("slack"),
        slack_voltage=np.array([complex(re, im) for re, im in data["slack_voltage"]]),
    )
    n = int(data["n_original"])
    voltage_owner = np.full(n, -1, dtype=int)
    clusters = {}
    for s, members in data["clusters"].items():
        clusters[int(s)] = tuple(int(m) for m in members)
        voltage_owner[list(clusters[int(s)])] = int(s)
    if np.any(voltage_owner < 0):
        missing = np.flatnonzero(voltage_owner < 0)[:10].tolist()
        raise ValidationError(f"clusters do not cover nodes {missing}")
    injection_owner = voltage_owner.copy()
    for j, o in data.get("injection_owner", {}).items():
        injection_owner[int(j)] = int(o)
    prov = data.get("provenance", {})
    return ReducedModel(
        n_original=n,
        kron=kron,
        clusters=clusters,
        injection_owner=injection_owner,
        voltage_owner=voltage_owner,
        e_bar=float(prov.get("e_bar", np.nan)),
        objective=prov.get("objective", "magnitude"),
        scenario_ids=list(prov.get("scenario_ids", [])),
        train_max_err={k: float(v) for k, v in prov.get("train_max_err", {}).items()},
        radial=bool(data.get("radial", False)),
        reinserted=tuple(int(r) for r in data.get("reinserted", [])),
    )


def save_model(model: ReducedModel, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)


def load_model(path: str | Path) -> ReducedModel:
    with open(path) as fh:
        try:
            return model_from_dict(json.load(fh))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}: malformed reduced model ({exc})") from exc
