"""Command-line drivers for every experiment.

Subcommands: train | toy | approx | props | gradcheck | variance | opcount.

Conventions shared by all of them:

* every run takes an explicit --seed and is bitwise reproducible: CSV and
  PGM outputs are byte-identical across reruns of the same config,
* each CSV starts with a comment block holding the resolved config,
* wall-clock timings go to a sidecar run.log, never into the CSVs,
* a config file of key=value lines can supply any flag; explicit flags win.

Exit status is 0 on success and nonzero with an ``error: ...`` line on
stderr otherwise.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, approx, netgraph
from .data import TOY_BOUNDS, TOY_TASKS, load_mnist_idx
from .netgraph import (LayerSpec, NetworkSpec, build_network, count_ops,
                       lenet5_bn, predict_grid, save_checkpoint, spec_from_dict,
                       two_layer_classifier)
from .tensor import RngState, rand_uniform
from .training import FitConfig, fit_epochs, fit_iterations
from .optim import PSchedule, p_at_epoch


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, command: str, config: dict, header, rows):
    lines = [f"# addernet {command}"]
    for key in sorted(config):
        lines.append(f"# {key}={_fmt(config[key])}")
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def write_pgm(path, labels: np.ndarray, n_classes: int = 2):
    """Binary PGM (P5, maxval 255); class c maps to gray 255*c/(n_classes-1).

    Row 0 of the label matrix is the first (top) image row.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.size == 0:
        raise ValueError("label grid must be a non-empty 2-D array")
    h, w = labels.shape
    span = max(n_classes - 1, 1)
    gray = np.clip((labels * 255) // span, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.tobytes())


def _write_log(path, timings):
    with open(path, "w") as f:
        for label, seconds in timings:
            f.write(f"{label} wall_time_s={seconds:.3f}\n")


# ---------------------------------------------------------------------------
# config resolution: flags > config file > builtin defaults
# ---------------------------------------------------------------------------

def _load_config_file(path) -> dict:
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {line!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(raw: str, like):
    if isinstance(like, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def resolve_config(ns: argparse.Namespace, defaults: dict) -> dict:
    """Merge parsed flags (None = not given) with config file and defaults."""
    file_cfg = _load_config_file(ns.config) if getattr(ns, "config", None) else {}
    resolved = {}
    for key, dflt in defaults.items():
        val = getattr(ns, key, None)
        if val is None or (isinstance(dflt, bool) and val is False):
            if key in file_cfg:
                val = _coerce(file_cfg[key], dflt)
            elif val is None:
                val = dflt
        resolved[key] = val
    return resolved


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_DEFAULTS = dict(
    images="", labels="", test_images="", test_labels="",
    arch="lenet5bn", mode="adder-lp", epochs=10, batch_size=256, lr=0.1,
    schedule="cosine", eta=0.2, e_decay=0, momentum=0.9, weight_decay=5e-4,
    grad_mode="full", subset=0, first_layer_conv=False, seed=0,
    outdir="runs/train",
)


def _mlp_spec(input_shape, n_hidden, kind, n_classes=10) -> NetworkSpec:
    w = "adder" if kind == "adder" else "conv"
    layer_list = [LayerSpec("flatten"),
                  LayerSpec(w, out_channels=n_hidden, kernel=1),
                  LayerSpec("bn"), LayerSpec("relu"),
                  LayerSpec(w, out_channels=n_classes, kernel=1),
                  LayerSpec("bn")]
    return NetworkSpec(input_shape=input_shape, layers=layer_list, loss="softmax_ce")


def _build_arch(arch: str, mode: str, first_layer_conv: bool,
                input_shape) -> NetworkSpec:
    kind = "conv" if mode == "conv" else "adder"
    if arch == "lenet5bn":
        return lenet5_bn(kind, first_layer_conv=first_layer_conv)
    if arch.startswith("mlp:"):
        return _mlp_spec(input_shape, int(arch.split(":", 1)[1]), "conv")
    if arch.startswith("adder-mlp:"):
        return _mlp_spec(input_shape, int(arch.split(":", 1)[1]), "adder")
    path = Path(arch)
    if path.suffix == ".json" and path.exists():
        return spec_from_dict(json.loads(path.read_text()))
    raise ValueError(f"unknown architecture {arch!r}")


def cmd_train(ns) -> int:
    cfg = resolve_config(ns, _TRAIN_DEFAULTS)
    if not cfg["images"] or not cfg["labels"]:
        raise ValueError("train needs --images and --labels IDX paths")
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)

    train_ds = load_mnist_idx(cfg["images"], cfg["labels"])
    stats = train_ds.metadata
    test_ds = None
    if cfg["test_images"] and cfg["test_labels"]:
        test_ds = load_mnist_idx(cfg["test_images"], cfg["test_labels"],
                                 mean=stats["mean"], std=stats["std"])
    if cfg["subset"]:
        n = min(cfg["subset"], len(train_ds))
        train_ds = type(train_ds)(train_ds.inputs[:n], train_ds.labels[:n],
                                  train_ds.name, train_ds.n_classes,
                                  train_ds.metadata)

    rng = RngState(cfg["seed"])
    spec = _build_arch(cfg["arch"], cfg["mode"], cfg["first_layer_conv"],
                       train_ds.inputs.shape[1:])
    initial_p = 2.0 if cfg["mode"] in ("adder-l2", "adder-lp") else 1.0
    net = build_network(spec, rng, initial_p=initial_p)

    fit = FitConfig(mode=cfg["mode"], epochs=cfg["epochs"],
                    batch_size=cfg["batch_size"], lr0=cfg["lr"],
                    schedule=cfg["schedule"], momentum=cfg["momentum"],
                    weight_decay=cfg["weight_decay"], eta=cfg["eta"],
                    e_decay=cfg["e_decay"], grad_mode=cfg["grad_mode"])
    rows, header, timings = fit_epochs(net, train_ds, fit, rng, test_ds)

    write_csv(outdir / "metrics.csv", "train", cfg, header, rows)
    save_checkpoint(net, outdir / "checkpoint.ckpt")
    _write_log(outdir / "run.log", timings)
    print(f"train: wrote {outdir}/metrics.csv "
          f"(final test_acc={_fmt(rows[-1][-1])})")
    return 0


# ---------------------------------------------------------------------------
# toy tasks
# ---------------------------------------------------------------------------

_TOY_DEFAULTS = dict(
    task="ball", net="adder", hidden=1, iterations=10000, batch_size=256,
    train_size=200, lr=0.1, schedule="cosine", eta=0.2, momentum=0.9,
    weight_decay=5e-4, mode="", resolution=201, log_every=500, seed=0,
    outdir="runs/toy",
)


def cmd_toy(ns) -> int:
    cfg = resolve_config(ns, _TOY_DEFAULTS)
    if cfg["task"] not in TOY_TASKS:
        raise ValueError(f"unknown toy task {cfg['task']!r}")
    if cfg["net"] not in ("adder", "mlp"):
        raise ValueError(f"net kind must be adder or mlp, got {cfg['net']!r}")
    if cfg["hidden"] < 1:
        raise ValueError("need at least one hidden unit")
    mode = cfg["mode"] or ("adder-l1" if cfg["net"] == "adder" else "conv")
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)

    rng = RngState(cfg["seed"])
    ds = TOY_TASKS[cfg["task"]](cfg["train_size"], rng)
    net = build_network(two_layer_classifier(cfg["hidden"], cfg["net"]), rng,
                        initial_p=2.0 if mode in ("adder-l2", "adder-lp") else 1.0)
    fit = FitConfig(mode=mode, iterations=cfg["iterations"],
                    batch_size=cfg["batch_size"], lr0=cfg["lr"],
                    schedule=cfg["schedule"], momentum=cfg["momentum"],
                    weight_decay=cfg["weight_decay"], eta=cfg["eta"],
                    log_every=cfg["log_every"])
    rows, header, timings = fit_iterations(net, ds, fit, rng)

    bound = TOY_BOUNDS[cfg["task"]]
    grid = predict_grid(net, (-bound, bound), cfg["resolution"])
    write_csv(outdir / "metrics.csv", "toy", cfg, header, rows)
    write_pgm(outdir / "boundary.pgm", grid, n_classes=2)
    save_checkpoint(net, outdir / "checkpoint.ckpt")
    _write_log(outdir / "run.log", timings)
    print(f"toy: wrote {outdir}/metrics.csv "
          f"(final train_acc={_fmt(rows[-1][-1])})")
    return 0


# ---------------------------------------------------------------------------
# approximation constructions
# ---------------------------------------------------------------------------

_APPROX_DEFAULTS = dict(
    checks="realization,masked,bumps", targets="tent1d,gauss2d,sineprod2d",
    n_list="16,64,256", instances=50, eval_points=2000, sweep_seeds=5,
    mc_samples=4000, epsilon=0.0, seed=0, outdir="runs/approx",
)


def _random_distance_relu_sum(rng, n_terms, dim, coeff_span=2.0):
    coeffs = rand_uniform(rng, (n_terms,), -coeff_span, coeff_span)
    centers = rand_uniform(rng, (n_terms, dim), -2.0, 2.0)
    offsets = rand_uniform(rng, (n_terms,), -6.0, 2.0)
    return approx.DistanceReluSum(coeffs, centers, offsets)


def _realization_residual(rng, instances, eval_points) -> float:
    worst = 0.0
    bounds = [(-3.0, 3.0), (-3.0, 3.0)]
    for _ in range(instances):
        n_terms = 1 + int(rand_uniform(rng, (1,))[0] * 6)
        g = _random_distance_relu_sum(rng, n_terms, 2)
        net = approx.realize_two_layer_adder(g, bounds)
        pts = rand_uniform(rng, (eval_points, 2), -3.0, 3.0)
        worst = max(worst, float(np.abs(net.evaluate(pts) - g.evaluate(pts)).max()))
    return worst


def _masked_residual(rng, instances, eval_points) -> float:
    worst = 0.0
    for _ in range(instances):
        m = 1 + int(rand_uniform(rng, (1,))[0] * 5)
        d = 2 + int(rand_uniform(rng, (1,))[0] * 3)
        bounds = [(-3.0, 3.0)] * d
        mask = (rand_uniform(rng, (m, d)) > 0.5).astype(np.float64)
        scales = rand_uniform(rng, (m,), -2.0, 2.0)
        pair = approx.masked_linear_as_adders(mask, scales, bounds)
        pts = rand_uniform(rng, (eval_points, d), -3.0, 3.0)
        target = pts @ mask.T * scales[None, :]
        worst = max(worst, float(np.abs(pair.evaluate(pts) - target).max()))
    return worst


def cmd_approx(ns) -> int:
    cfg = resolve_config(ns, _APPROX_DEFAULTS)
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    checks = [c for c in cfg["checks"].split(",") if c]
    rows = []
    if "realization" in checks:
        rng = RngState(cfg["seed"])
        res = _realization_residual(rng, cfg["instances"], cfg["eval_points"])
        rows.append(["realization", "distance_relu_sum", cfg["instances"], res, 0.0])
    if "masked" in checks:
        rng = RngState(cfg["seed"] + 1)
        res = _masked_residual(rng, cfg["instances"], cfg["eval_points"])
        rows.append(["masked", "masked_linear", cfg["instances"], res, 0.0])
    if "bumps" in checks:
        for name in [t for t in cfg["targets"].split(",") if t]:
            if name not in approx.TARGETS:
                raise ValueError(f"unknown target function {name!r}")
            target = approx.TARGETS[name]
            eps = cfg["epsilon"] or target.epsilon
            for n_terms in [int(v) for v in cfg["n_list"].split(",") if v]:
                errs = []
                for s in range(cfg["sweep_seeds"]):
                    rng = RngState(cfg["seed"] + 1000 * s + n_terms)
                    phi = approx.build_bump_approximator(
                        target.fn, n_terms, eps, rng, target.bounds)
                    est, _ = approx.measure_l1_error(
                        phi.evaluate, target.fn, target.bounds,
                        cfg["mc_samples"], rng)
                    errs.append(est)
                errs = np.asarray(errs)
                stderr = float(errs.std(ddof=1) / np.sqrt(len(errs))) if len(errs) > 1 else 0.0
                rows.append(["bumps", name, n_terms, float(errs.mean()), stderr])
    write_csv(outdir / "approx.csv", "approx", cfg,
              ["check", "target", "n", "value", "stderr"], rows)
    print(f"approx: wrote {outdir}/approx.csv ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# descent-convergence simulations
# ---------------------------------------------------------------------------

_PROPS_DEFAULTS = dict(
    mode="both", scale=8, x_count=20, alpha_count=10, max_iters=400,
    seed=0, outdir="runs/props",
)


def cmd_props(ns) -> int:
    cfg = resolve_config(ns, _PROPS_DEFAULTS)
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    scale = cfg["scale"]
    rows = []
    if cfg["mode"] in ("both", "sign"):
        for i in range(1, cfg["x_count"] + 1):
            for j in range(1, cfg["alpha_count"] + 1):
                x, f0, alpha = i / scale, 0.0, j / scale
                trace = analysis.simulate_sign_descent(
                    [x], [f0], y=-1.0, alpha=alpha, max_iters=cfg["max_iters"])
                criterion = analysis.sign_convergence_criterion(x, f0, j, scale,
                                                                scale=scale)
                rows.append(["sign", x, f0, alpha, trace.verdict,
                             "integer" if criterion else "non-integer",
                             trace.final_gap, trace.amplitude])
    if cfg["mode"] in ("both", "full"):
        for j in range(1, cfg["alpha_count"] + 1):
            alpha = j / (cfg["alpha_count"] + 1)
            trace = analysis.simulate_full_descent(
                [1.0], [0.0], y=-1.0, alpha=alpha, max_iters=cfg["max_iters"])
            rows.append(["full", 1.0, 0.0, alpha, trace.verdict, "",
                         trace.final_gap, trace.amplitude])
    write_csv(outdir / "props.csv", "props", cfg,
              ["mode", "x", "f0", "alpha", "verdict", "criterion",
               "final_gap", "amplitude"], rows)
    print(f"props: wrote {outdir}/props.csv ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# gradient oracle, variance, op counting
# ---------------------------------------------------------------------------

_GRADCHECK_DEFAULTS = dict(coords=100, seed=0, outdir="runs/gradcheck")


def cmd_gradcheck(ns) -> int:
    cfg = resolve_config(ns, _GRADCHECK_DEFAULTS)
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    rows = analysis.gradient_oracle_suite(cfg["seed"], coords=cfg["coords"])
    write_csv(outdir / "gradcheck.csv", "gradcheck", cfg,
              ["component", "max_rel_error", "n_checked", "tolerance", "passed"],
              rows)
    failed = [r[0] for r in rows if not r[4]]
    print(f"gradcheck: wrote {outdir}/gradcheck.csv "
          f"({'all passed' if not failed else 'FAILED: ' + ','.join(failed)})")
    return 0 if not failed else 1


_VARIANCE_DEFAULTS = dict(d=3, c_in=512, c_out=8, var_x=1.0, var_f=1e-3,
                          batch=2000, seed=0, outdir="runs/variance")


def cmd_variance(ns) -> int:
    cfg = resolve_config(ns, _VARIANCE_DEFAULTS)
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    report = analysis.variance_report(cfg["d"], cfg["c_in"], cfg["c_out"],
                                      cfg["var_x"], cfg["var_f"], cfg["batch"],
                                      RngState(cfg["seed"]))
    rows = [[cfg["d"], cfg["c_in"], cfg["c_out"], cfg["var_x"], cfg["var_f"],
             report.conv_empirical, report.conv_predicted,
             report.conv_relative_error, report.adder_empirical,
             report.adder_heuristic, report.ratio]]
    write_csv(outdir / "variance.csv", "variance", cfg,
              ["d", "c_in", "c_out", "var_x", "var_f", "conv_empirical",
               "conv_predicted", "conv_rel_err", "adder_empirical",
               "adder_heuristic", "ratio"], rows)
    print(f"variance: wrote {outdir}/variance.csv (ratio={report.ratio:.1f})")
    return 0


_OPCOUNT_DEFAULTS = dict(arch="lenet5bn", mode="adder", first_layer_conv=False,
                         seed=0, outdir="runs/opcount")


def cmd_opcount(ns) -> int:
    cfg = resolve_config(ns, _OPCOUNT_DEFAULTS)
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    spec = _build_arch(cfg["arch"], cfg["mode"], cfg["first_layer_conv"],
                       (32, 32, 1))
    report = count_ops(spec)
    rows = [[r.layer_index, r.kind, r.muls, r.adds, r.xnor] for r in report.rows]
    rows.append(["total", "", report.total_muls, report.total_adds,
                 report.total_xnor])
    write_csv(outdir / "opcount.csv", "opcount", cfg,
              ["layer", "kind", "muls", "adds", "xnor"], rows)
    print(f"opcount: wrote {outdir}/opcount.csv "
          f"(muls={report.total_muls}, adds={report.total_adds})")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--seed", type=int)
    p.add_argument("--outdir")
    p.add_argument("--config", help="key=value file; explicit flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="addernet")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a classifier on IDX image files")
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--test-images", dest="test_images")
    p.add_argument("--test-labels", dest="test_labels")
    p.add_argument("--arch", help="lenet5bn | mlp:N | adder-mlp:N | spec.json")
    p.add_argument("--mode", choices=["adder-l1", "adder-l2", "adder-lp", "conv"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--schedule", choices=["cosine", "poly", "constant"])
    p.add_argument("--eta", type=float)
    p.add_argument("--e-decay", dest="e_decay", type=int,
                   help="epoch at which p reaches 1 (default: 75%% of epochs)")
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--grad-mode", dest="grad_mode", choices=["full", "sign"])
    p.add_argument("--subset", type=int, help="train on the first N samples")
    p.add_argument("--first-layer-conv", dest="first_layer_conv",
                   action="store_true", default=False)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("toy", help="2-D toy classification experiments")
    p.add_argument("--task", choices=sorted(TOY_TASKS))
    p.add_argument("--net", choices=["adder", "mlp"])
    p.add_argument("--hidden", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--train-size", dest="train_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--schedule", choices=["cosine", "poly", "constant"])
    p.add_argument("--eta", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--mode", choices=["adder-l1", "adder-l2", "adder-lp", "conv"])
    p.add_argument("--resolution", type=int)
    p.add_argument("--log-every", dest="log_every", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("approx", help="approximation-construction checks")
    p.add_argument("--checks", help="comma list: realization,masked,bumps")
    p.add_argument("--targets", help="comma list from: "
                   + ",".join(sorted(approx.TARGETS)))
    p.add_argument("--n-list", dest="n_list")
    p.add_argument("--instances", type=int)
    p.add_argument("--eval-points", dest="eval_points", type=int)
    p.add_argument("--sweep-seeds", dest="sweep_seeds", type=int)
    p.add_argument("--mc-samples", dest="mc_samples", type=int)
    p.add_argument("--epsilon", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_approx)

    p = sub.add_parser("props", help="descent-convergence simulations")
    p.add_argument("--mode", choices=["both", "sign", "full"])
    p.add_argument("--scale", type=int)
    p.add_argument("--x-count", dest="x_count", type=int)
    p.add_argument("--alpha-count", dest="alpha_count", type=int)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_props)

    p = sub.add_parser("gradcheck", help="central-difference gradient oracle")
    p.add_argument("--coords", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("variance", help="conv vs adder output-variance report")
    p.add_argument("--d", type=int)
    p.add_argument("--c-in", dest="c_in", type=int)
    p.add_argument("--c-out", dest="c_out", type=int)
    p.add_argument("--var-x", dest="var_x", type=float)
    p.add_argument("--var-f", dest="var_f", type=float)
    p.add_argument("--batch", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_variance)

    p = sub.add_parser("opcount", help="multiplication/addition counts")
    p.add_argument("--arch")
    p.add_argument("--mode", choices=["adder", "conv"])
    p.add_argument("--first-layer-conv", dest="first_layer_conv",
                   action="store_true", default=False)
    _add_common(p)
    p.set_defaults(func=cmd_opcount)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        return ns.func(ns)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
