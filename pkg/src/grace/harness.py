"""Experiment configuration, runs and report writing behind the command line.

Every function here is importable on its own; :mod:`grace.cli` only parses
arguments and maps exceptions to exit codes. Output files are written with
sorted keys and ``repr`` floats so identical runs give identical bytes.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .baseline import MeanPoolBaseline
from .convergence import audit_assumptions, measure_contraction
from .entanglement import build_graph, certificate
from .feature_context import MASK_MODES, GeneratorConfig, Manifest, make_manifest, materialize
from .gcn import GraceModel, Hyper, TrainConfig, evaluate, l1_features, load_checkpoint, save_checkpoint, train

# Table-4 style configurations: name -> (glspr_enabled, sc_enabled)
ABLATIONS = {
    "gcn": (False, False),
    "gcn+glspr": (True, False),
    "gcn+sc": (False, True),
    "gcn+glspr+sc": (True, True),
}
FULL = "gcn+glspr+sc"
HYPER_AXES = ("N", "g_n", "alpha", "g_dim", "n_out")
DEFAULT_M_R = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
METRIC_FIELDS = ["model", "ablation", "m_r", "mode", "accuracy", "macro_f1", "auc", "n_samples", "seed", "fingerprint"]


class HarnessError(RuntimeError):
    """User-facing failure with a stable machine-readable ``code``."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def desk_generator() -> GeneratorConfig:
    return GeneratorConfig(signal_amplitude=0.5, background_scale=0.5)


def desk_train() -> TrainConfig:
    return TrainConfig(learning_rate=3e-3, epochs=20, decay_every=10, batch_size=8)


@dataclass
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=desk_generator)
    hyper: Hyper = field(default_factory=Hyper)
    train: TrainConfig = field(default_factory=desk_train)
    n_samples: int = 500
    baseline_c: int = 8
    eval_m_r_list: list[float] = field(default_factory=lambda: list(DEFAULT_M_R))
    modes: list[str] = field(default_factory=lambda: list(MASK_MODES))
    ablations: list[str] = field(default_factory=lambda: [FULL])
    seed: int = 42

    def __post_init__(self):
        if any(not 0.0 <= m <= 1.0 for m in self.eval_m_r_list):
            raise HarnessError("invalid_config", "eval_m_r_list values must lie in [0, 1]")
        bad = [m for m in self.modes if m not in MASK_MODES]
        if bad:
            raise HarnessError("invalid_config", f"unknown mask modes {bad}")
        bad = [a for a in self.ablations if a not in ABLATIONS]
        if bad:
            raise HarnessError("invalid_config", f"unknown ablations {bad}; choose from {sorted(ABLATIONS)}")
        if self.n_samples < 10:
            raise HarnessError("invalid_config", "n_samples must be at least 10")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["generator"] = self.generator.to_dict()
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise HarnessError("invalid_config", f"unknown config keys {sorted(extra)}")
        obj = dict(obj)
        try:
            if "generator" in obj:
                obj["generator"] = replace(desk_generator(), **obj["generator"])
            if "hyper" in obj:
                obj["hyper"] = Hyper(**obj["hyper"])
            if "train" in obj:
                obj["train"] = replace(desk_train(), **obj["train"])
        except (TypeError, ValueError) as exc:
            raise HarnessError("invalid_config", str(exc)) from exc
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError as exc:
            raise HarnessError("missing_file", f"config not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise HarnessError("invalid_config", f"{path}: {exc}") from exc

    def fingerprint(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()[:16]


def hyper_for(cfg: ExperimentConfig, ablation: str) -> Hyper:
    glspr, sc = ABLATIONS[ablation]
    return replace(cfg.hyper, glspr_enabled=glspr, sc_enabled=sc)


# ---------------------------------------------------------------------------
# serialization helpers
# ---------------------------------------------------------------------------


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def load_schema(name: str) -> dict:
    return json.loads(resources.files("grace").joinpath("schemas", f"{name}.json").read_text())


def validate(obj, schema: str) -> None:
    try:
        jsonschema.validate(obj, load_schema(schema))
    except jsonschema.ValidationError as exc:
        raise HarnessError("schema_violation", f"{schema}: {exc.message}") from exc


def write_json(path: Path, obj, schema: str | None = None) -> None:
    if schema is not None:
        validate(obj, schema)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj))


def write_csv(path: Path, rows: list[dict], header: list[str], schema: str | None = None) -> None:
    if schema is not None:
        for row in rows:
            validate(row, schema)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if row[k] is None else row[k]) for k in header})
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


@dataclass
class Datasets:
    train: list
    val: list
    test: list


def materialize_splits(manifest: Manifest) -> Datasets:
    g = manifest.generator
    return Datasets(*[[materialize(g, e) for e in manifest.split(k)] for k in ("train", "val", "test")])


def gen_data(cfg: ExperimentConfig, out: Path) -> Manifest:
    m = make_manifest(cfg.generator, cfg.n_samples, cfg.seed, cfg.train.train_m_r, cfg.generator.mask_mode)
    write_json(Path(out) / "manifest.json", m.to_json(), "manifest")
    return m


def _load_manifest(out: Path) -> Manifest:
    path = Path(out) / "manifest.json"
    if not path.exists():
        raise HarnessError("missing_file", f"manifest not found: {path} (run gen-data first)")
    obj = json.loads(path.read_text())
    validate(obj, "manifest")
    return Manifest.from_json(obj)


def _trace_rows(trace, model: str, ablation: str, cfg: ExperimentConfig) -> list[dict]:
    fp = cfg.fingerprint()
    return [
        {"model": model, "ablation": ablation, "epoch": r["epoch"], "train_loss": r["train_loss"],
         "val_acc": r["val_acc"], "seed": cfg.seed, "fingerprint": fp}
        for r in trace
    ]


TRACE_FIELDS = ["model", "ablation", "epoch", "train_loss", "val_acc", "seed", "fingerprint"]


def train_models(cfg: ExperimentConfig, data: Datasets) -> dict:
    """Train one GRACE head per ablation plus the mean-pool baseline."""
    c_in = cfg.generator.c_in
    runs = {}
    for name in cfg.ablations:
        model = GraceModel(hyper_for(cfg, name), c_in, seed=cfg.seed)
        runs[name] = train(model, data.train, cfg.train, data.val)
    base = MeanPoolBaseline(c_in, cfg.baseline_c, seed=cfg.seed)
    runs["baseline"] = train(base, data.train, cfg.train, data.val)
    return runs


def metric_row(model: str, ablation: str, m_r: float, mode: str, rep: dict, cfg: ExperimentConfig) -> dict:
    return {"model": model, "ablation": ablation, "m_r": m_r, "mode": mode, **rep, "seed": cfg.seed,
            "fingerprint": cfg.fingerprint()}


def cmd_train(cfg: ExperimentConfig, out: Path) -> dict:
    out = Path(out)
    data = materialize_splits(_load_manifest(out))
    runs = train_models(cfg, data)
    summary = {"config": cfg.to_dict(), "fingerprint": cfg.fingerprint(), "seed": cfg.seed, "models": {}}
    trace = []
    for name, r in runs.items():
        kind = "baseline" if name == "baseline" else "grace"
        ablation = "none" if name == "baseline" else name
        save_checkpoint(out / "checkpoints" / f"{name}.json", r.model, r.optimizer, r.epoch, cfg.train,
                        {"ablation": ablation, "fingerprint": cfg.fingerprint(), "seed": cfg.seed})
        trace += _trace_rows(r.trace, kind, ablation, cfg)
        rep = evaluate(r.model, data.test, 0.0, cfg.generator.mask_mode, seed=cfg.seed,
                       background_scale=cfg.generator.background_scale)
        summary["models"][name] = {"steps": len(r.steps), "test": metric_row(kind, ablation, 0.0,
                                                                             cfg.generator.mask_mode, rep, cfg)}
    write_csv(out / "trace.csv", trace, TRACE_FIELDS)
    write_json(out / "train_summary.json", summary, "train_summary")
    return summary


def _load_runs(out: Path, cfg: ExperimentConfig) -> dict:
    models = {}
    for name in list(cfg.ablations) + ["baseline"]:
        path = Path(out) / "checkpoints" / f"{name}.json"
        if not path.exists():
            raise HarnessError("missing_file", f"checkpoint not found: {path} (run train first)")
        models[name] = load_checkpoint(path)["model"]
    return models


def evaluate_grid(models: dict, test: list, cfg: ExperimentConfig) -> tuple[list[dict], list[dict]]:
    rows, base_rows = [], []
    for name, model in models.items():
        kind = "baseline" if name == "baseline" else "grace"
        ablation = "none" if name == "baseline" else name
        for mode in cfg.modes:
            for m_r in cfg.eval_m_r_list:
                rep = evaluate(model, test, m_r, mode, seed=cfg.seed, background_scale=cfg.generator.background_scale)
                row = metric_row(kind, ablation, m_r, mode, rep, cfg)
                (base_rows if kind == "baseline" else rows).append(row)
    return rows, base_rows


def _auc_at(rows, ablation, mode, m_r):
    for r in rows:
        if r["ablation"] == ablation and r["mode"] == mode and r["m_r"] == m_r:
            return r["auc"]
    return None


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> dict:
    """Evaluate every trained head over ``eval_m_r_list x modes``."""
    out = Path(out)
    data = materialize_splits(_load_manifest(out))
    rows, base_rows = evaluate_grid(_load_runs(out, cfg), data.test, cfg)
    write_csv(out / "metrics.csv", rows, METRIC_FIELDS, "metric_row")
    write_csv(out / "baseline_metrics.csv", base_rows, METRIC_FIELDS, "metric_row")
    lo, hi = min(cfg.eval_m_r_list), max(cfg.eval_m_r_list)
    trend = []
    for mode in cfg.modes:
        b0, b1 = _auc_at(base_rows, "none", mode, lo), _auc_at(base_rows, "none", mode, hi)
        for name in cfg.ablations:
            g0, g1 = _auc_at(rows, name, mode, lo), _auc_at(rows, name, mode, hi)
            trend.append({
                "ablation": name, "mode": mode, "m_r_low": lo, "m_r_high": hi,
                "grace_auc_low": g0, "grace_auc_high": g1, "baseline_auc_low": b0, "baseline_auc_high": b1,
                "grace_drop": None if None in (g0, g1) else g0 - g1,
                "baseline_drop": None if None in (b0, b1) else b0 - b1,
            })
    report = {"fingerprint": cfg.fingerprint(), "seed": cfg.seed, "rows": rows, "baseline_rows": base_rows,
              "trend": trend}
    write_json(out / "sweep.json", report, "eval_report")
    return report


def _set_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "N":
        return replace(cfg, generator=replace(cfg.generator, N=int(value)))
    if axis == "alpha":
        return replace(cfg, hyper=replace(cfg.hyper, alpha=float(value)))
    return replace(cfg, hyper=replace(cfg.hyper, **{axis: int(value)}))


HYPER_FIELDS = ["axis", "value", "m_r", "mode", "accuracy", "macro_f1", "auc", "n_samples", "l1", "seed",
                "fingerprint"]


def cmd_hyper_sweep(cfg: ExperimentConfig, out: Path, axis: str, values: list) -> list[dict]:
    """Train and evaluate the full head once per axis value."""
    if axis not in HYPER_AXES:
        raise HarnessError("invalid_axis", f"axis must be one of {HYPER_AXES}, got {axis!r}")
    if not values:
        raise HarnessError("invalid_axis", "no values given")
    rows = []
    for value in values:
        point = _set_axis(replace(cfg, ablations=[FULL]), axis, value)
        data = materialize_splits(make_manifest(point.generator, point.n_samples, point.seed,
                                                point.train.train_m_r, point.generator.mask_mode))
        model = train(GraceModel(hyper_for(point, FULL), point.generator.c_in, seed=point.seed),
                      data.train, point.train, data.val).model
        l1 = l1_features(model, data.test)
        for mode in point.modes:
            for m_r in point.eval_m_r_list:
                rep = evaluate(model, data.test, m_r, mode, seed=point.seed,
                               background_scale=point.generator.background_scale)
                rows.append({"axis": axis, "value": value, "m_r": m_r, "mode": mode, **rep, "l1": l1,
                             "seed": point.seed, "fingerprint": point.fingerprint()})
    write_csv(Path(out) / f"hyper_{axis}.csv", rows, HYPER_FIELDS)
    return rows


def cmd_audit(cfg: ExperimentConfig, out: Path, checkpoint: Path | None = None, weight_scale: float = 1.0,
              iters: int = 500) -> dict:
    """Spectral certificate and contraction audits for one sample graph.

    The graph comes from the first generated sample passed through the
    checkpoint's projector (or a freshly initialized model). Contraction is
    measured for every square layer weight ``W_l`` (``l >= 1``) under the
    fixed-map reading, with ``Z0`` the layer input of the forward pass.
    """
    if checkpoint is not None:
        if not Path(checkpoint).exists():
            raise HarnessError("missing_file", f"checkpoint not found: {checkpoint}")
        model = load_checkpoint(checkpoint)["model"]
        if not isinstance(model, GraceModel):
            raise HarnessError("invalid_checkpoint", "audit needs a GRACE checkpoint")
    else:
        model = GraceModel(hyper_for(cfg, FULL), cfg.generator.c_in, seed=cfg.seed)
    if weight_scale != 1.0:
        model = GraceModel(model.hyper, model.c_in, {
            k: (v * weight_scale if k.startswith("W") and k[1:].isdigit() else v) for k, v in model.params.items()
        })
    sample = materialize(cfg.generator, make_manifest(cfg.generator, 10, cfg.seed).entries[0])
    X = model.features(model.as_vars(), sample.frames).value
    g = build_graph(X, model.hyper.q)
    cert = certificate(g)
    theorem = audit_assumptions(g, model)
    layers = []
    Z = X
    for l, W in enumerate(model.gcn_weights):
        if W.shape[0] == W.shape[1]:
            a = measure_contraction(g, W, Z, iters=iters)
            layers.append({"layer": l, "L_f": a.L_f, "verdict": a.verdict, "iterations": a.iterations,
                           "converged_at": a.converged_at, "residual_reached_at": a.residual_reached_at,
                           "diverged_at": a.diverged_at, "max_ratio": a.max_ratio,
                           "bound_violations": len(a.bound_violations), "ratios": a.contraction_trace})
        Z = np.maximum(g.M @ Z @ W, 0.0)
    report = {
        "fingerprint": cfg.fingerprint(),
        "seed": cfg.seed,
        "weight_scale": weight_scale,
        "certificate": cert,
        "assumptions": {k: v for k, v in theorem.to_dict().items()
                        if k in ("lambda_max_M", "lambda_interval_Lnorm", "interval_ok", "B_W", "B_W_per_layer",
                                 "L_f", "L_f_paper_bound", "L_sigma", "verdict")},
        "contraction": layers,
    }
    out = Path(out)
    write_json(out / "audit.json", report, "audit")
    ratio_rows = [{"layer": L["layer"], "step": i, "ratio": r, "seed": cfg.seed, "fingerprint": cfg.fingerprint()}
                  for L in layers for i, r in enumerate(L["ratios"])]
    write_csv(out / "ratios.csv", ratio_rows, ["layer", "step", "ratio", "seed", "fingerprint"])
    return report
