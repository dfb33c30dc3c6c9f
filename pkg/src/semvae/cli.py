"""Command-line front end.

Every subcommand takes ``--key value`` options. Values are resolved from, in
increasing priority: built-in defaults, a flat ``key = value`` file given by
``--config``, the ``SEMVAE_SEED`` environment variable (seed only), and the
command-line flags. All outputs are text files written deterministically.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluation as E
from .encoding import GmmModel, SemanticMatrix, gmm_fit, hybrid_concat, visual_encoding
from .model import MODES, SemanticVAE, WsciConfig, outlier_scores, predict, train

log = logging.getLogger("semvae")

SEED_ENV = "SEMVAE_SEED"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _csv_list(kind):
    def parse(text: str):
        return [kind(v) for v in str(text).split(",") if v.strip()]
    return parse


# name -> (type, help). Defaults live with the code that consumes each value.
KEYS: dict[str, tuple] = {
    # synthetic data
    "C": (int, "number of categories"),
    "d": (int, "feature dimension"),
    "per_class": (int, "instances per category"),
    "outlier_ratio": (float, "fraction of outliers"),
    "flip_ratio": (float, "fraction of label flips"),
    "scale": (float, "per-coordinate cluster std"),
    "separation": (float, "distance of class means from the origin"),
    "box": (float, "half-width of the outlier box"),
    "outlier_margin": (float, "min outlier distance to any mean, in cluster stds"),
    "proposals": (int, "jittered proposals per instance"),
    "proposal_scale": (float, "proposal jitter std"),
    "seed": (int, "global seed"),
    # model / training
    "mode": (str, "one of " + ", ".join(MODES)),
    "hidden": (int, "hidden width (default round((d+m)/2))"),
    "lam": (float, "reconstruction trade-off"),
    "L_predict": (int, "latent samples at prediction time"),
    "batch": (int, "mini-batch size"),
    "epochs": (int, "training epochs"),
    "lr": (float, "initial Adam learning rate"),
    "decay": (float, "per-epoch learning-rate decay"),
    "logvar_bias": (float, "initial bias of the log-variance head"),
    # category encoding
    "K": (int, "GMM components"),
    "K_tilde": (int, "rows of the transform W"),
    "beta": (float, "orthonormality penalty"),
    "gmm_iters": (int, "max EM iterations"),
    # experiments
    "attr_dim": (int, "synthetic attribute block height"),
    "attr_noise": (float, "noise on synthetic attributes"),
    "word_dim": (int, "synthetic word-vector block height"),
    "test_per_class": (int, "clean held-out instances per category"),
    "top_k": (int, "k for precision@k"),
    "modes": (_csv_list(str), "comma-separated modes"),
    "seeds": (_csv_list(int), "comma-separated seeds"),
    "starts": (_csv_list(int), "comma-separated 1-based window starts"),
    "window": (int, "instances per class in each window"),
    # paths
    "out": (str, "output path"),
    "features": (str, "feature file"),
    "test_features": (str, "held-out feature file with truth columns"),
    "test_out": (str, "where gen-data writes a clean held-out set"),
    "matrix": (str, "semantic-matrix file(s), comma-separated blocks"),
    "model": (str, "checkpoint file"),
    "gmm": (str, "GMM file"),
    "metrics": (str, "per-epoch JSON-lines metrics"),
    "csv": (str, "CSV summary"),
    "log_level": (str, "logging level"),
}

SPEC_KEYS = [f.name for f in fields(D.SyntheticSpec) if f.name != "means"]
EXP_KEYS = [f.name for f in fields(E.ExperimentConfig)]
TRAIN_KEYS = ["mode", "hidden", "lam", "L_predict", "batch", "epochs", "lr", "decay",
              "logvar_bias", "seed"]
ENC_KEYS = ["K", "K_tilde", "beta", "gmm_iters", "proposals", "proposal_scale", "seed"]
COMMON = ["log_level"]

COMMANDS: dict[str, tuple[str, list[str]]] = {
    "gen-data": ("write a synthetic feature file",
                 SPEC_KEYS + ["test_per_class", "out", "test_out"]),
    "fit-gmm": ("fit the GMM codebook on proposals of a feature file",
                ["features", "out"] + ENC_KEYS),
    "encode": ("write the visual-encoding block of the semantic matrix",
               ["features", "gmm", "out"] + ENC_KEYS),
    "train": ("train a model; writes checkpoint and per-epoch metrics",
              ["features", "matrix", "test_features", "out", "metrics"] + TRAIN_KEYS),
    "predict": ("category probabilities for a feature file",
                ["features", "matrix", "model", "out", "L_predict", "seed"]),
    "detect": ("rank instances by normalised reconstruction density",
               ["features", "model", "out", "batch"]),
    "ablate": ("compare modes over seeds on synthetic data",
               SPEC_KEYS + EXP_KEYS + ["modes", "seeds", "out", "csv"]),
    "sweep": ("accuracy over rank-ordered noise windows",
              SPEC_KEYS + EXP_KEYS + ["mode", "starts", "window", "seeds", "out", "csv"]),
}


# -- config resolution ------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semvae", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (help_text, keys) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat key = value file")
        for key in dict.fromkeys(keys + COMMON):
            p.add_argument(f"--{key}", dest=key, default=None, metavar="VALUE",
                           help=KEYS[key][1])
    return parser


def read_config(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def resolve(args: argparse.Namespace, env=os.environ) -> dict:
    raw: dict = {}
    if args.config:
        raw.update(read_config(args.config))
    if env.get(SEED_ENV, "").strip():
        raw["seed"] = env[SEED_ENV]
    for key in KEYS:
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    cfg = {}
    for key, value in raw.items():
        kind = KEYS[key][0]
        try:
            cfg[key] = kind(value)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {value!r} ({exc})") from exc
    return cfg


def _need(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k for k in missing))


def _pick(cfg: dict, keys) -> dict:
    return {k: cfg[k] for k in keys if k in cfg}


def _spec(cfg: dict) -> D.SyntheticSpec:
    return D.SyntheticSpec(**_pick(cfg, SPEC_KEYS))


def _load_matrix(spec: str) -> SemanticMatrix:
    paths = [p for p in spec.split(",") if p]
    mats = [SemanticMatrix.load(p) for p in paths]
    if len(mats) == 1:
        return mats[0]
    blocks = []
    for path, mat in zip(paths, mats):
        for (name, width), off in zip(mat.blocks, mat.offsets):
            blocks.append((name, mat.A[off:off + width]))
    return hybrid_concat(blocks)


def _proposal_groups(ds: D.Dataset, cfg: dict) -> dict[int, np.ndarray]:
    count = cfg.get("proposals", D.SyntheticSpec.proposals)
    scale = cfg.get("proposal_scale", D.SyntheticSpec.proposal_scale)
    props = D.make_proposals(ds.x, count, scale, cfg.get("seed", 0))
    plabels = np.repeat(ds.label, count)
    return {c: props[plabels == c] for c in range(ds.C)}


# -- commands -------------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> None:
    _need(cfg, "out")
    spec = _spec(cfg)
    ds, _ = D.generate(spec)
    D.save_features(ds, cfg["out"])
    print(f"wrote {len(ds)} instances ({int(np.sum(ds.h == 0))} noisy) to {cfg['out']}")
    if "test_out" in cfg:
        test = D.clean_test_set(spec, cfg.get("test_per_class", E.ExperimentConfig.test_per_class),
                                spec.seed + 1_000_003)
        D.save_features(test, cfg["test_out"])
        print(f"wrote {len(test)} clean held-out instances to {cfg['test_out']}")


def cmd_fit_gmm(cfg: dict) -> None:
    _need(cfg, "features", "out")
    ds = D.load_features(cfg["features"])
    pool = np.vstack(list(_proposal_groups(ds, cfg).values()))
    gmm = gmm_fit(pool, cfg.get("K", 256), seed=cfg.get("seed", 0),
                  max_iters=cfg.get("gmm_iters", 200))
    gmm.save(cfg["out"])
    print(f"K={gmm.K} EM iterations={len(gmm.log_likelihood)} "
          f"mean log-likelihood={gmm.log_likelihood[-1]:.6g}")


def cmd_encode(cfg: dict) -> None:
    _need(cfg, "features", "out")
    ds = D.load_features(cfg["features"])
    groups = _proposal_groups(ds, cfg)
    gmm = GmmModel.load(cfg["gmm"]) if "gmm" in cfg else None
    K = gmm.K if gmm is not None else cfg.get("K", 256)
    if gmm is None:
        pool = np.vstack([groups[c] for c in range(ds.C)])
        gmm = gmm_fit(pool, K, seed=cfg.get("seed", 0), max_iters=cfg.get("gmm_iters", 200))
    block, gmm, tm = visual_encoding(groups, ds.C, K, cfg.get("K_tilde", K // 2),
                                     cfg.get("beta", 100.0), cfg.get("seed", 0), gmm=gmm)
    mat = SemanticMatrix(block, [("visual", block.shape[0])])
    mat.save(cfg["out"])
    orth = np.linalg.norm(tm.W @ tm.W.T - np.eye(len(tm.W)))
    print(f"visual block {mat.m}x{mat.C}; ||WW^T - I||_F = {orth:.3g}")


def _train_config(cfg: dict, d: int, A: SemanticMatrix) -> WsciConfig:
    kw = _pick(cfg, [k for k in TRAIN_KEYS if k != "mode"])
    kw.setdefault("decay", E.ExperimentConfig.decay)
    return WsciConfig(d=d, m=A.m, C=A.C, **kw)


def cmd_train(cfg: dict) -> None:
    _need(cfg, "features", "matrix", "out")
    mode = cfg.get("mode", "wsci")
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    ds = D.load_features(cfg["features"])
    A = _load_matrix(cfg["matrix"])
    if ds.C > A.C:
        raise ValueError(f"features use {ds.C} categories but the matrix has {A.C}")
    wcfg = _train_config(cfg, ds.d, A)
    test = D.load_features(cfg["test_features"]) if "test_features" in cfg else None
    if test is not None:
        test.require_truth()
    h = ds.h

    def on_epoch(model, epoch, weights):
        rec = {"accuracy": None}
        if test is not None:
            known = test.true_label >= 0
            probs = predict(model, test.x[known], A, seed=wcfg.seed)
            rec["accuracy"] = E.accuracy(probs, test.true_label[known])
        if h is not None:
            rec["mean_p_clean"] = float(weights[h == 1].mean()) if np.any(h == 1) else None
            rec["mean_p_noisy"] = float(weights[h == 0].mean()) if np.any(h == 0) else None
        return rec

    result = train(ds.x, ds.label, A, wcfg, mode, on_epoch=on_epoch)
    Path(cfg["out"]).write_text(result.model.to_text())
    if "metrics" in cfg:
        Path(cfg["metrics"]).write_text(
            "".join(json.dumps(r, sort_keys=True) + "\n" for r in result.history))
    last = result.history[-1] if result.history else {}
    print(f"trained {mode} for {wcfg.epochs} epochs; final loss {last.get('loss')}")


def _load_model(path: str) -> SemanticVAE:
    try:
        return SemanticVAE.from_text(Path(path).read_text())
    except (KeyError, IndexError) as exc:
        raise ValueError(f"{path}: malformed checkpoint ({exc})") from exc


def cmd_predict(cfg: dict) -> None:
    _need(cfg, "features", "model", "out")
    ds = D.load_features(cfg["features"])
    model = _load_model(cfg["model"])
    A = _load_matrix(cfg["matrix"]) if "matrix" in cfg else None
    if A is None and model.mode in ("wsci", "unweighted"):
        raise UsageError("--matrix is required for this model")
    probs = predict(model, ds.x, A, L=cfg.get("L_predict"), seed=cfg.get("seed", 0))
    with open(cfg["out"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "pred"] + [f"p{c}" for c in range(probs.shape[1])])
        for i, row in enumerate(probs):
            w.writerow([i, int(np.argmax(row))] + [repr(float(v)) for v in row])
    if ds.has_truth:
        known = ds.true_label >= 0
        acc = E.accuracy(probs[known], ds.true_label[known])
        print(f"accuracy={acc!r} n={int(known.sum())}")


def cmd_detect(cfg: dict) -> None:
    _need(cfg, "features", "model", "out")
    ds = D.load_features(cfg["features"])
    model = _load_model(cfg["model"])
    scores = outlier_scores(model, ds.x, cfg.get("batch"))
    order = np.lexsort((np.arange(len(scores)), -scores))
    with open(cfg["out"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "p_tilde"])
        for i in order:
            w.writerow([int(i), int(ds.label[i]), repr(float(scores[i]))])
    if ds.has_truth and 0 < ds.h.sum() < len(ds):
        print(f"auc={E.outlier_auc(scores, ds.h)!r}")


def _exp(cfg: dict) -> E.ExperimentConfig:
    return E.ExperimentConfig(**_pick(cfg, EXP_KEYS))


def _emit_reports(reports, cfg: dict) -> None:
    E.write_reports(reports, cfg["out"], cfg.get("csv"))
    for key, row in E.summarize(reports).items():
        extra = f" auc {row['auc_mean']:.4f} +- {row['auc_std']:.4f}" if "auc_mean" in row else ""
        print(f"{key:16s} n={row['n']} acc {row['accuracy_mean']:.4f} +- {row['accuracy_std']:.4f}{extra}")


def cmd_ablate(cfg: dict) -> None:
    _need(cfg, "out")
    modes = cfg.get("modes", list(MODES))
    reports = E.run_ablation(modes, _spec(cfg), cfg.get("seeds", [0, 1, 2, 3, 4]), _exp(cfg))
    _emit_reports(reports, cfg)


def cmd_sweep(cfg: dict) -> None:
    _need(cfg, "out")
    spec_kw = _pick(cfg, SPEC_KEYS)
    spec_kw.setdefault("per_class", 900)
    reports = []
    for mode in [m.strip() for m in cfg.get("mode", "wsci,unweighted").split(",")]:
        reports += E.noise_sweep(mode, cfg.get("starts", [1, 201, 401]), D.SyntheticSpec(**spec_kw),
                                 cfg.get("seeds", [0, 1, 2, 3, 4]), cfg.get("window", 500), _exp(cfg))
    _emit_reports(reports, cfg)


HANDLERS = {
    "gen-data": cmd_gen_data, "fit-gmm": cmd_fit_gmm, "encode": cmd_encode, "train": cmd_train,
    "predict": cmd_predict, "detect": cmd_detect, "ablate": cmd_ablate, "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None, env=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        cfg = resolve(args, os.environ if env is None else env)
        logging.basicConfig(level=cfg.get("log_level", "WARNING").upper(),
                            format="%(levelname)s %(name)s: %(message)s")
        HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except ArithmeticError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
