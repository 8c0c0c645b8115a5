"""Batch command-line driver: ``python -m mslesion <command> [options]``.

Every command reads an optional JSON run configuration (``--config``), applies
flag overrides, logs the effective configuration to stderr and either exits 0
or prints a single JSON error line to stderr and exits nonzero.

Configuration document (every key optional, unknown keys rejected)::

    {
      "seed": 0,
      "train": {"max_epochs": 400, "patience": 50, "batch_size": 128,
                "validation_fraction": 0.25, "negative_resample_period": 10,
                "rho": 0.95, "eps": 1e-6, "frozen_bn": "infer"},
      "freeze": {"mode": "auto", "retrain_head": true},
      "postprocess": {"t_bin": 0.5, "l_min": 10, "connectivity": 26, "gate": 0.5},
      "phantom": {"preset": "default", "domain": "source", "n_cases": 10, ...PhantomSpec fields},
      "grid": {"modes": ["fc3", "fc2_fc3", "fc1_fc2_fc3"], "sizes": [1, 2, 5, 10]},
      "evaluate": {"connectivity": null, "min_overlap": 0.0},
      "paths": {"cases": null, "test_cases": null, "model": null,
                "reference": "expert", "output": null}
    }

The top-level seed drives training, adaptation, phantom generation and the
grid. ``MSLESION_THREADS`` caps BLAS threads; ``--deterministic`` forces one.
"""

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import fields

from . import cascade as cs
from .adapt import recommend_freeze, run_adaptation_grid, adapt
from .metrics import evaluate
from .network import FormatError, FreezeConfig, FreezeMode
from .phantom import PhantomSpec, derive_seeds, generate_case, shifted_domain, small_phantom_spec, source_domain
from .training import TrainConfig
from .volume_io import CASE_FILES, NiftiError, load_case_dir, load_case_set, load_nifti, save_case_dir, save_mask, \
    save_nifti

log = logging.getLogger("mslesion")

THREADS_ENV = "MSLESION_THREADS"

_PHANTOM_FIELDS = [f.name for f in fields(PhantomSpec)]
_TUPLE_FIELDS = {"shape", "brain_radii", "lesion_count", "lesion_radius", "lesion_volume_ml", "spacing"}

DEFAULTS = {
    "seed": 0,
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
    "freeze": {"mode": "auto", "retrain_head": True},
    "postprocess": {"t_bin": 0.5, "l_min": 10, "connectivity": 26, "gate": 0.5},
    "phantom": {"preset": "default", "domain": "source", "n_cases": 10},
    "grid": {"modes": ["fc3", "fc2_fc3", "fc1_fc2_fc3"], "sizes": [1, 2, 5, 10]},
    "evaluate": {"connectivity": None, "min_overlap": 0.0},
    "paths": {"cases": None, "test_cases": None, "model": None, "reference": "expert", "output": None},
}
_EXTRA_KEYS = {"phantom": set(_PHANTOM_FIELDS)}


class ConfigError(ValueError):
    """Invalid configuration document or command-line usage."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def load_config(path=None):
    """Defaults merged with the document at ``path``; unknown keys raise."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for key, value in doc.items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            allowed = set(cfg[key]) | _EXTRA_KEYS.get(key, set())
            for sub, v in value.items():
                if sub not in allowed:
                    raise ConfigError(f"unknown config key {key}.{sub!r}")
                cfg[key][sub] = v
        else:
            cfg[key] = value
    return cfg


def train_config(cfg):
    try:
        return TrainConfig(**cfg["train"], seed=int(cfg["seed"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None


def post_config(cfg):
    try:
        return cs.PostprocessConfig(**cfg["postprocess"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"postprocess: {exc}") from None


def phantom_spec(cfg):
    p = cfg["phantom"]
    preset = p["preset"]
    if preset not in ("default", "small"):
        raise ConfigError(f"phantom.preset must be 'default' or 'small', got {preset!r}")
    base = small_phantom_spec() if preset == "small" else PhantomSpec()
    over = {k: (tuple(v) if k in _TUPLE_FIELDS and v is not None else v)
            for k, v in p.items() if k in _PHANTOM_FIELDS}
    try:
        return PhantomSpec(**{**{f: getattr(base, f) for f in _PHANTOM_FIELDS}, **over})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"phantom: {exc}") from None


def _domain(name):
    domains = {"source": source_domain, "shifted": shifted_domain}
    if name not in domains:
        raise ConfigError(f"phantom.domain must be one of {sorted(domains)}, got {name!r}")
    return domains[name]()


def set_threads(n):
    """Cap BLAS threads at ``n``; ``None`` leaves the defaults. The compiled
    kernels are serial, so BLAS is the only threaded code."""
    if n is None:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _thread_count(deterministic):
    if deterministic:
        return 1
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _require(cfg, key, flag):
    value = cfg["paths"][key]
    if value is None:
        raise ConfigError(f"missing {flag} (or paths.{key} in the config)")
    return value


def _existing(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file or directory: {path}")
    return path


def _cases(path):
    """A single case directory or a directory of case directories."""
    _existing(path)
    if os.path.exists(os.path.join(path, CASE_FILES["flair"])):
        return [load_case_dir(path)]
    cases = load_case_set(path)
    if not cases:
        raise FileNotFoundError(f"no case directories under {path}")
    return cases


def _train_logger(stage, record):
    log.info("%s epoch %d train_loss %.4f val_loss %.4f val_acc %.3f (%.1fs)", stage, record.epoch,
             record.train_loss, record.val_loss, record.val_accuracy, record.seconds)


def _parent(path):
    d = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(d):
        raise FileNotFoundError(f"output directory does not exist: {d}")
    return path


def cmd_phantom(cfg):
    out = _require(cfg, "output", "--out")
    spec, domain = phantom_spec(cfg), _domain(cfg["phantom"]["domain"])
    n = cfg["phantom"]["n_cases"]
    if not isinstance(n, int) or n < 1:
        raise ConfigError(f"phantom.n_cases must be a positive integer, got {n!r}")
    os.makedirs(out, exist_ok=True)
    for i, seed in enumerate(derive_seeds(cfg["seed"], n)):
        case, raw = generate_case(spec, domain, seed, f"{domain.id}-{i:03d}", return_raw=True)
        save_case_dir(case, out, raw)
        log.info("wrote %s (%d lesion voxels)", case.id, case.lesion_voxels)
    print(out)
    return 0


def cmd_train_source(cfg):
    cases = _cases(_require(cfg, "cases", "--cases"))
    out = _parent(_require(cfg, "output", "--out"))
    model = cs.train_cascade(cases, train_config(cfg), post_config(cfg), log=_train_logger)
    cs.save_cascade(model, out)
    print(out)
    return 0


def choose_freeze(cfg, cases):
    mode = cfg["freeze"]["mode"]
    if mode == "auto":
        mm3 = sum(c.lesion_volume_ml() for c in cases) * 1000.0
        chosen = recommend_freeze(mm3).mode
        log.info("auto freeze: %.3f ml of lesion -> %s", mm3 / 1000.0, chosen.value)
    else:
        try:
            chosen = FreezeMode(mode)
        except ValueError:
            raise ConfigError(f"unknown freeze mode {mode!r}") from None
        if chosen is FreezeMode.NONE:
            raise ConfigError("freeze mode 'none' retrains everything; use train-source")
    return FreezeConfig(chosen, bool(cfg["freeze"]["retrain_head"]))


def cmd_adapt(cfg):
    source = cs.load_cascade(_existing(_require(cfg, "model", "--model")))
    cases = _cases(_require(cfg, "cases", "--cases"))
    out = _parent(_require(cfg, "output", "--out"))
    freeze = choose_freeze(cfg, cases)
    model = adapt(source, cases, freeze, train_config(cfg), cs.FeatureStore(), log=_train_logger)
    cs.save_cascade(model, out)
    print(out)
    return 0


def cmd_infer(cfg):
    model = cs.load_cascade(_existing(_require(cfg, "model", "--model")))
    cases = _cases(_require(cfg, "cases", "--cases"))
    out = _require(cfg, "output", "--out")
    os.makedirs(out, exist_ok=True)
    for case in cases:
        prob = cs.infer(model, case)
        mask = cs.postprocess(prob, model.post)
        d = os.path.join(out, case.id)
        os.makedirs(d, exist_ok=True)
        save_nifti(prob, os.path.join(d, "prob.nii"))
        save_mask(mask, os.path.join(d, "mask.nii"))
        log.info("%s: %d lesion voxels", case.id, int(mask.data.sum()))
    print(out)
    return 0


def _reference(spec, cases):
    """``expert``, a cascade file, or a directory of ``<case>/mask.nii`` files."""
    if spec == "expert":
        return "expert"
    _existing(spec)
    if os.path.isfile(spec):
        return cs.load_cascade(spec)
    masks = {}
    for case in cases:
        for name in (os.path.join(spec, case.id, "mask.nii"), os.path.join(spec, f"{case.id}.nii")):
            if os.path.exists(name):
                masks[case.id] = load_nifti(name).data != 0
                break
        else:
            raise FileNotFoundError(f"no reference mask for case {case.id} under {spec}")
    return masks


def cmd_evaluate(cfg):
    model = cs.load_cascade(_existing(_require(cfg, "model", "--model")))
    cases = _cases(_require(cfg, "cases", "--cases"))
    ref = _reference(cfg["paths"]["reference"], cases)
    ev = cfg["evaluate"]
    report = evaluate(model, cases, ref, cs.FeatureStore(), ev["connectivity"], float(ev["min_overlap"]))
    out = cfg["paths"]["output"]
    if out is not None:
        with open(_parent(out), "w") as fh:
            fh.write(report.to_dsv("\t"))
    print(report.to_table())
    return 0


def cmd_grid(cfg):
    model = cs.load_cascade(_existing(_require(cfg, "model", "--model")))
    train_cases = _cases(_require(cfg, "cases", "--cases"))
    test_cases = _cases(_require(cfg, "test_cases", "--test-cases"))
    modes, sizes = cfg["grid"]["modes"], cfg["grid"]["sizes"]
    try:
        modes = [FreezeMode(m).value for m in modes]
    except ValueError as exc:
        raise ConfigError(f"grid.modes: {exc}") from None
    report = run_adaptation_grid(model, train_cases, test_cases, modes, [int(s) for s in sizes],
                                 train_config(cfg), cfg["seed"], cs.FeatureStore(), log=_train_logger)
    out = cfg["paths"]["output"]
    if out is not None:
        with open(_parent(out), "w") as fh:
            fh.write(report.to_dsv("\t"))
    print(report.to_table())
    return 0


def cmd_inspect(cfg):
    print(cs.inspect_cascade(cs.load_cascade(_existing(_require(cfg, "model", "--model")))))
    return 0


COMMANDS = {"phantom": cmd_phantom, "train-source": cmd_train_source, "adapt": cmd_adapt,
            "infer": cmd_infer, "evaluate": cmd_evaluate, "grid": cmd_grid, "inspect": cmd_inspect}

# Flags each command accepts, mapped onto config paths.
_FLAGS = {
    "phantom": ["out", "domain", "n_cases", "preset"],
    "train-source": ["cases", "out"],
    "adapt": ["model", "cases", "out", "mode"],
    "infer": ["model", "cases", "out"],
    "evaluate": ["model", "cases", "reference", "out"],
    "grid": ["model", "cases", "test_cases", "out"],
    "inspect": ["model"],
}


def build_parser():
    parser = _Parser(prog="python -m mslesion", description="Cascaded patch CNN lesion segmentation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, flags in _FLAGS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the configuration seed")
        p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")
        p.add_argument("-v", "--verbose", action="store_true")
        for flag in flags:
            kind = int if flag == "n_cases" else str
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=kind)
    return parser


def _apply_flags(cfg, args):
    paths = {"out": "output", "cases": "cases", "test_cases": "test_cases", "model": "model",
             "reference": "reference"}
    for flag, key in paths.items():
        if getattr(args, flag, None) is not None:
            cfg["paths"][key] = getattr(args, flag)
    for flag in ("domain", "n_cases", "preset"):
        if getattr(args, flag, None) is not None:
            cfg["phantom"][flag] = getattr(args, flag)
    if getattr(args, "mode", None) is not None:
        cfg["freeze"]["mode"] = args.mode
    if args.seed is not None:
        cfg["seed"] = args.seed
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    return cfg


_EXIT = [(ConfigError, 2, "config"), (FileNotFoundError, 3, "missing-file"), (FormatError, 4, "format"),
         (NiftiError, 4, "format")]


def _fail(exc):
    for kind, code, label in _EXIT:
        if isinstance(exc, kind):
            break
    else:
        code, label = 1, "runtime"
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(json.dumps({"error": label, "type": type(exc).__name__, "message": msg}), file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        cfg = _apply_flags(load_config(args.config), args)
        # Fail on bad values before any file is touched.
        train_config(cfg)
        post_config(cfg)
        phantom_spec(cfg)
        _domain(cfg["phantom"]["domain"])
        threads = _thread_count(args.deterministic)
        limiter = set_threads(threads)
        # The effective configuration is always recorded, even when quiet.
        print("config " + json.dumps({"command": args.command, "threads": threads,
                                      "deterministic": args.deterministic, **cfg}, sort_keys=True),
              file=sys.stderr)
        try:
            return COMMANDS[args.command](cfg)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line
        return _fail(exc)
