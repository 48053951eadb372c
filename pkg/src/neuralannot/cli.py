"""Command-line interface: generate models and data, fit, train, annotate,
run the whole annotation pipeline, integrate parts, evaluate, export meshes.

Options may come from ``--config`` (TOML or JSON; either flat or with one
table per subcommand); explicit flags override the file. Failures print one
JSON object on stderr and exit 2 for usage errors, 1 for data errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bodymodel import ModelParams, load_model, model_forward, save_model, write_obj
from .dataset import load_dataset, load_ground_truth, load_with_ground_truth, save_dataset
from .errors import AnnotError

SEED_ENV = "MOCAP_ANNOT_SEED"
PARAMS_FORMAT = "neuralannot.params"
EXPRESSIVE_FORMAT = "neuralannot.expressive"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


# ----------------------------------------------------------------------------
# config handling

# per-subcommand built-in defaults; flags default to None so the merge can
# tell "not given" from "given"
DEFAULTS = {
    "gen-model": {"part": "body"},
    "gen-data": {"n": 100, "kind": "aux", "noise3d": 0.0, "missing3d": 0.0, "noise2d": 0.0,
                 "truncation": 0.0, "shape_std": 1.0},
    "fit": {"mode": "3d", "sigma": None, "wdata": 1e6, "iters": 200, "jobs": 1},
    "train": {"mode": "ax", "epochs": 100, "lr": 1e-3, "batch_size": 32, "hidden": 256, "input_kind": "feature"},
    "annotate": {"mode": None, "test_batch_size": 1},
    "pipeline": {"epochs_aux": 100, "epochs_target": 100, "lr": 1e-3, "batch_size": 32, "hidden": 256,
                 "input_kind": "feature", "latent_dim": None, "test_batch_size": 1, "jobs": 1,
                 "deterministic": False, "self_retrain_epochs": 0},
    "integrate": {},
    "eval": {},
    "export-mesh": {"index": 0},
}


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    text = path.read_text()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    return tomllib.loads(text)


def merge_options(command: str, args: argparse.Namespace, config: dict) -> dict:
    """Built-in defaults, then config values, then explicit flags."""
    opts = dict(DEFAULTS.get(command, {}))
    section = config.get(command, config.get(command.replace("-", "_"), None))
    flat = {k: v for k, v in config.items() if not isinstance(v, dict)}
    for source in (flat, section or {}):
        for k, v in source.items():
            opts[k.replace("-", "_")] = v
    for k, v in vars(args).items():
        if k in ("command", "config", "func"):
            continue
        if v is not None:
            opts[k] = v
        else:
            opts.setdefault(k, None)
    if opts.get("seed") is None:
        opts["seed"] = _default_seed()
    return opts


def _require(opts: dict, *names):
    missing = [n for n in names if opts.get(n) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


# ----------------------------------------------------------------------------
# parameter files


def save_params(params: list, path, extra: dict | None = None) -> None:
    d = {"format": PARAMS_FORMAT, "version": 1, "params": [p.to_dict() for p in params]}
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d))


def load_params(path) -> list:
    """Parameter sets from a params file, an annotated dataset, a list, or a
    single parameter record."""
    d = json.loads(Path(path).read_text())
    if isinstance(d, list):
        return [ModelParams.from_dict(p) for p in d]
    if d.get("format") == PARAMS_FORMAT:
        return [ModelParams.from_dict(p) for p in d["params"]]
    if "samples" in d:
        ds = load_dataset(path)
        if not ds.annotated:
            raise ValueError(f"{path}: dataset carries no pseudo ground truth")
        return [s.params_star for s in ds.samples]
    if "part" in d:
        return [ModelParams.from_dict(d)]
    raise ValueError(f"{path}: no parameter sets found")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_model(o):
    from .synthdata import gen_model

    _require(o, "out")
    model = gen_model(int(o["seed"]), o["part"])
    save_model(model, o["out"])
    return {"out": str(o["out"]), "part": model.part_kind, "digest": model.digest()}


def cmd_gen_data(o):
    from .synthdata import Corruption, gen_dataset

    _require(o, "model", "out")
    model = load_model(o["model"])
    corr = Corruption(noise3d=float(o["noise3d"]), missing3d=float(o["missing3d"]), noise2d=float(o["noise2d"]),
                      truncation=float(o["truncation"]))
    for name in ("missing3d", "truncation"):
        if not 0.0 <= float(o[name]) <= 1.0:
            raise UsageError(f"--{name} must lie in [0, 1]")
    ds = gen_dataset(model, int(o["n"]), o["kind"], corr, seed=int(o["seed"]), shape_std=float(o["shape_std"]))
    save_dataset(ds, o["out"])
    return {"out": str(o["out"]), "n": len(ds), "kind": ds.kind}


def cmd_fit(o):
    from .fitter import FitConfig, fit_dataset
    from .priors import LossWeights, PcaEmbedding

    _require(o, "model", "dataset", "out")
    model = load_model(o["model"])
    ds = load_dataset(o["dataset"])
    mode = o["mode"]
    sigma = o["sigma"]
    kw = {"weights": LossWeights(w_data=float(o["wdata"])), "stage_iters": (60, int(o["iters"]))}
    if sigma is not None:
        kw["sigma" if mode == "3d" else "sigma_2d"] = float(sigma)
    if o.get("embedding"):
        kw["embedding"] = PcaEmbedding.load(o["embedding"])
    t = time.perf_counter()
    params = fit_dataset(model, ds, mode, FitConfig(**kw), jobs=int(o["jobs"]))
    elapsed = time.perf_counter() - t
    save_params(params, o["out"])
    if o.get("annotated_out"):
        save_dataset(ds.with_params(params), o["annotated_out"])
    return {"out": str(o["out"]), "n": len(params), "seconds": elapsed}


def _train_config(o, epochs_key="epochs"):
    from .annotator import TrainConfig

    return TrainConfig(batch_size=int(o["batch_size"]), lr=float(o["lr"]), epochs=int(o[epochs_key]),
                       seed=int(o["seed"]))


def cmd_train(o):
    from .annotator import NetConfig, RegressorNet, pose_embedding, train

    _require(o, "model", "dataset", "out")
    model = load_model(o["model"])
    datasets = [load_dataset(p) for p in _split(o["dataset"])]
    feat = len(datasets[0].samples[0].feature) if datasets[0].samples else 0
    emb = None
    kw = {"hidden": int(o["hidden"]), "input_kind": o["input_kind"]}
    if o["mode"] == "tg":
        aux_star = [d for d in datasets if d.kind == "aux" and d.annotated]
        if not aux_star:
            raise ValueError("image-only training needs at least one annotated auxiliary dataset")
        emb = pose_embedding(model, aux_star, o.get("latent_dim"))
        kw["latent_dim"] = emb.dim
    elif o["mode"] != "ax":
        raise UsageError("--mode must be 'ax' or 'tg'")
    net = RegressorNet(NetConfig.for_model(model, feat, **kw), emb, seed=int(o["seed"]))
    res = train(net, model, datasets, o["mode"], _train_config(o))
    net.save(o["out"])
    return {"out": str(o["out"]), "final_loss": res.curve[-1] if res.curve else None,
            "lr_decays": res.lr_decays, "seconds": res.seconds}


def cmd_annotate(o):
    from .annotator import RegressorNet, annotate_dataset

    _require(o, "checkpoint", "dataset", "out")
    net = RegressorNet.load(o["checkpoint"])
    ds = load_dataset(o["dataset"])
    out = annotate_dataset(net, ds, o["mode"], int(o["test_batch_size"]))
    # the sealed block is copied through unread so the output stays evaluable
    out.sealed = load_ground_truth(o["dataset"])
    save_dataset(out, o["out"])
    return {"out": str(o["out"]), "n": len(out)}


def _split(value) -> list:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [v for v in str(value).split(",") if v]


def _metrics_rows(model, ds) -> list:
    from .evalmetrics import report

    return [(name, round(float(v), 9), int(n)) for name, v, n in report(model, ds)]


def cmd_pipeline(o):
    from .annotator import TrainConfig, neural_annotation, self_retrain

    _require(o, "model", "aux", "target", "out")
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    model = load_model(o["model"])
    aux_paths = _split(o["aux"])
    # sealed blocks ride along so annotated files stay evaluable; training
    # only ever sees the training view
    aux = [load_with_ground_truth(p) for p in aux_paths]
    target = load_with_ground_truth(o["target"])
    seed = int(o["seed"])
    ax_cfg = TrainConfig(batch_size=int(o["batch_size"]), lr=float(o["lr"]), epochs=int(o["epochs_aux"]), seed=seed)
    tg_cfg = TrainConfig(batch_size=int(o["batch_size"]), lr=float(o["lr"]), epochs=int(o["epochs_target"]),
                         seed=seed)
    t0 = time.perf_counter()
    run = neural_annotation(model, [a.training_view() for a in aux], target.training_view(), ax_cfg, tg_cfg,
                            latent_dim=o.get("latent_dim"), input_kind=o["input_kind"], seed=seed,
                            hidden=int(o["hidden"]), test_batch_size=int(o["test_batch_size"]))
    aux_star = [a.with_params([s.params_star for s in r.samples]) for a, r in zip(aux, run.aux)]
    target_star = target.with_params([s.params_star for s in run.target.samples])
    files = {}
    for i, a in enumerate(aux_star):
        files[f"aux{i}"] = f"aux{i}_star.json"
        save_dataset(a, out / files[f"aux{i}"])
    files["target"] = "target_star.json"
    save_dataset(target_star, out / files["target"])
    metrics = {f"aux{i}": _metrics_rows(model, a) for i, a in enumerate(aux_star)}
    metrics["target"] = _metrics_rows(model, target_star)
    if int(o["self_retrain_epochs"]) > 0:
        r2_cfg = TrainConfig(batch_size=int(o["batch_size"]), lr=float(o["lr"]),
                             epochs=int(o["self_retrain_epochs"]), seed=seed)
        _, t2 = self_retrain(model, run.aux, run.target, run.embedding, r2_cfg, seed=seed,
                             input_kind=o["input_kind"], hidden=int(o["hidden"]),
                             test_batch_size=int(o["test_batch_size"]))
        t2 = target.with_params([s.params_star for s in t2.samples])
        files["target_round2"] = "target_round2_star.json"
        save_dataset(t2, out / files["target_round2"])
        metrics["target_round2"] = _metrics_rows(model, t2)
    metrics_doc = {"metrics": metrics, "seed": seed}
    _write_json(out / "metrics.json", metrics_doc)
    manifest = {
        "version": __version__,
        "seed": seed,
        "deterministic": bool(o["deterministic"]),
        "model": {"path": str(o["model"]), "digest": model.digest()},
        "inputs": {"aux": aux_paths, "target": str(o["target"])},
        "config": {k: o[k] for k in sorted(DEFAULTS["pipeline"]) if k in o},
        "outputs": files,
        "metrics": metrics,
        "timings": {**{k: round(v, 3) for k, v in run.timings.items()},
                    "wall": round(time.perf_counter() - t0, 3)},
    }
    _write_json(out / "manifest.json", manifest)
    return {"out": str(out), "outputs": files}


def cmd_integrate(o):
    from .integrate import assemble_expressive

    _require(o, "model", "body", "out")
    model = load_model(o["model"])
    if model.part_kind != "body":
        raise ValueError("--model must be a body model")
    body = load_params(o["body"])
    n = len(body)
    parts = {}
    for name in ("rhand", "lhand", "face"):
        parts[name] = load_params(o[name]) if o.get(name) else [None] * n
        if len(parts[name]) != n:
            raise ValueError(f"--{name} has {len(parts[name])} parameter sets, --body has {n}")
    records, accepted = [], {"right": 0, "left": 0}
    for i in range(n):
        ex, reps = assemble_expressive(model, body[i], parts["rhand"][i], parts["lhand"][i], parts["face"][i],
                                       lhand_mirrored=not o.get("lhand_unmirrored"))
        records.append(ex.to_dict())
        for r in reps:
            accepted[r.side] += int(r.accepted)
    _write_json(o["out"], {"format": EXPRESSIVE_FORMAT, "version": 1, "params": records})
    return {"out": str(o["out"]), "n": n, "accepted": accepted}


def cmd_eval(o):
    from .evalmetrics import report

    _require(o, "annotated", "model")
    model = load_model(o["model"])
    ds = load_with_ground_truth(o["annotated"])
    if not ds.annotated:
        raise ValueError(f"{o['annotated']}: dataset carries no pseudo ground truth")
    rows = report(model, ds)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value", "count"])
    for name, v, n in rows:
        w.writerow([name, f"{v:.6f}", n])
    doc = {"dataset": str(o["annotated"]), "metrics": {name: {"value": v, "count": n} for name, v, n in rows}}
    if o.get("out"):
        base = Path(o["out"])
        base = base.with_suffix("") if base.suffix in (".csv", ".json") else base
        base.with_suffix(".csv").write_text(buf.getvalue())
        _write_json(base.with_suffix(".json"), doc)
        return {"csv": str(base.with_suffix(".csv")), "json": str(base.with_suffix(".json"))}
    sys.stdout.write(buf.getvalue())
    return None


def cmd_export_mesh(o):
    _require(o, "model", "params", "out")
    model = load_model(o["model"])
    params = load_params(o["params"])
    i = int(o["index"])
    if not 0 <= i < len(params):
        raise UsageError(f"--index {i} out of range for {len(params)} parameter sets")
    if params[i].part != model.part_kind:
        raise ValueError(f"parameters are for a {params[i].part}, model is a {model.part_kind}")
    verts = model_forward(model, params[i]).vertices
    write_obj(o["out"], verts, model.faces)
    return {"out": str(o["out"]), "vertices": len(verts), "faces": len(model.faces)}


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neuralannot", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, func, help_):
        s = sub.add_parser(name, help=help_, description=help_)
        s.set_defaults(func=func)
        s.add_argument("--config", help="TOML or JSON file with option defaults (flags win)")
        s.add_argument("--seed", type=int, help=f"random seed (default: ${SEED_ENV} or 0)")
        return s

    s = command("gen-model", cmd_gen_model, "generate a synthetic kinematic model")
    s.add_argument("--part", choices=["body", "hand", "face"])
    s.add_argument("--out", help="model JSON to write")

    s = command("gen-data", cmd_gen_data, "generate a synthetic dataset with hidden ground truth")
    s.add_argument("--model")
    s.add_argument("--n", type=int, help="number of samples")
    s.add_argument("--kind", choices=["aux", "target"])
    s.add_argument("--noise3d", type=float, help="3D joint noise std (m)")
    s.add_argument("--missing3d", type=float, help="fraction of dropped 3D joints")
    s.add_argument("--noise2d", type=float, help="2D joint noise std (px)")
    s.add_argument("--truncation", type=float, help="fraction of truncated 2D joints (target)")
    s.add_argument("--shape-std", dest="shape_std", type=float)
    s.add_argument("--out")

    s = command("fit", cmd_fit, "per-sample optimization baseline")
    s.add_argument("--model")
    s.add_argument("--dataset")
    s.add_argument("--mode", choices=["2d", "3d"])
    s.add_argument("--out", help="params JSON to write")
    s.add_argument("--annotated-out", dest="annotated_out", help="also write the dataset with fits attached")
    s.add_argument("--sigma", type=float, help="robust scale (m for 3d, px for 2d)")
    s.add_argument("--wdata", type=float, help="data-term weight")
    s.add_argument("--iters", type=int, help="Adam iterations of the all-parameter stage")
    s.add_argument("--embedding", help="PCA pose embedding JSON for 2d fits")
    s.add_argument("--jobs", type=int, help="worker processes")

    s = command("train", cmd_train, "train a regressor network and save a checkpoint")
    s.add_argument("--model")
    s.add_argument("--dataset", help="dataset path(s), comma separated")
    s.add_argument("--mode", choices=["ax", "tg"])
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--hidden", type=int)
    s.add_argument("--latent-dim", dest="latent_dim", type=int)
    s.add_argument("--input-kind", dest="input_kind", choices=["feature", "p2d"])
    s.add_argument("--out", help="checkpoint path (writes .npz and .json)")

    s = command("annotate", cmd_annotate, "annotate a dataset with a trained checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--dataset")
    s.add_argument("--mode", choices=["ax", "tg"])
    s.add_argument("--test-batch-size", dest="test_batch_size", type=int)
    s.add_argument("--out")

    s = command("pipeline", cmd_pipeline, "annotate auxiliary datasets, then the target dataset")
    s.add_argument("--model")
    s.add_argument("--aux", help="auxiliary dataset paths, comma separated")
    s.add_argument("--target")
    s.add_argument("--out", help="run directory")
    s.add_argument("--epochs-aux", dest="epochs_aux", type=int)
    s.add_argument("--epochs-target", dest="epochs_target", type=int)
    s.add_argument("--self-retrain-epochs", dest="self_retrain_epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--hidden", type=int)
    s.add_argument("--latent-dim", dest="latent_dim", type=int)
    s.add_argument("--input-kind", dest="input_kind", choices=["feature", "p2d"])
    s.add_argument("--test-batch-size", dest="test_batch_size", type=int)
    s.add_argument("--jobs", type=int)
    s.add_argument("--deterministic", action="store_const", const=True,
                   help="single-worker training and reproducible metric output")

    s = command("integrate", cmd_integrate, "merge body, hand and face parameters")
    s.add_argument("--model", help="body model JSON")
    s.add_argument("--body")
    s.add_argument("--rhand")
    s.add_argument("--lhand")
    s.add_argument("--lhand-unmirrored", dest="lhand_unmirrored", action="store_const", const=True,
                   help="left-hand parameters are already in left-hand convention")
    s.add_argument("--face")
    s.add_argument("--out")

    s = command("eval", cmd_eval, "evaluate an annotated dataset")
    s.add_argument("--annotated")
    s.add_argument("--model")
    s.add_argument("--out", help="report base path (writes .csv and .json); CSV to stdout if omitted")

    s = command("export-mesh", cmd_export_mesh, "write the posed mesh of a parameter set as OBJ")
    s.add_argument("--model")
    s.add_argument("--params")
    s.add_argument("--index", type=int)
    s.add_argument("--out")
    return p


def _fail(kind: str, exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        config = load_config(args.config) if args.config else {}
        opts = merge_options(args.command, args, config)
    except UsageError as e:
        return _fail("usage", e, 2)
    except (OSError, ValueError) as e:
        return _fail("data", e, 1)
    try:
        result = args.func(opts)
    except UsageError as e:
        return _fail("usage", e, 2)
    except (AnnotError, OSError, ValueError, KeyError, TypeError) as e:
        return _fail("data", e, 1)
    if result is not None:
        sys.stderr.write(json.dumps({"ok": True, **result}) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
