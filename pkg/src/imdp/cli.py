"""Operator surface: train / generate / evaluate / accountant subcommands.

Configuration is flat key=value text (optionally grouped under
[section] headers that prefix the keys); command-line flags override
file keys.  Every run writes a manifest plus a resolved-config file
that replays the run exactly, byte for byte in the metrics log.
"""
from __future__ import annotations

import argparse
import hashlib
import math
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__, privacy
from .data import Dataset, load_idx_images, load_idx_labels, subset_by_label, synth_mixture
from .evaluation import code_sweep, dataset_sha256, utility_privacy_curve
from .latent import LatentSpec
from .nets import load_checkpoint, save_checkpoint
from .privacy import AccountantState, accumulate, calibrate_sigma, spent_epsilon
from .train import TrainConfig, train

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class ConfigError(ValueError):
    """Invalid configuration key, value, or combination."""


_DEFAULTS = {
    "train.ng": "1000",
    "train.batch": "64",
    "train.nd": "5",
    "train.lr_critic": "5e-5",
    "train.lr_gen": "1e-4",
    "train.lambda_cat": "1.0",
    "train.lambda_cont": "0.1",
    "train.seed": "0",
    "train.dataset": "mixture:k=8,n=8192,radius=0.75,std=0.05,seed=0",
    "train.checkpoint_every": "0",
    "privacy.epsilon": "inf",
    "privacy.delta": "1e-5",
    "privacy.clip": "0.01",
    "latent.z_dim": "62",
    "latent.cat": "10",
    "latent.cont": "-1:1",
    "net.gen_hidden": "128,128",
    "net.trunk_hidden": "128,128",
}

_FLAG_KEYS = {
    "seed": "train.seed",
    "epsilon": "privacy.epsilon",
    "delta": "privacy.delta",
    "clip": "privacy.clip",
    "nd": "train.nd",
    "ng": "train.ng",
    "batch": "train.batch",
    "dataset": "train.dataset",
}


def _parse_kv_text(text: str, where: str) -> dict[str, str]:
    out: dict[str, str] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{where}:{lineno}: expected key=value, got {raw!r}")
        key = key.strip()
        if section:
            key = f"{section}.{key}"
        out[key] = value.strip()
    return out


def _to_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected integer, got {value!r}") from exc


def _to_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected number, got {value!r}") from exc


def _to_int_tuple(key: str, value: str) -> tuple[int, ...]:
    if not value.strip():
        return ()
    return tuple(_to_int(key, part) for part in value.split(","))


@dataclass(frozen=True)
class ResolvedConfig:
    """All keys materialized; hashable canonical text for the manifest."""

    values: tuple[tuple[str, str], ...]

    def get(self, key: str) -> str:
        for k, v in self.values:
            if k == key:
                return v
        raise KeyError(key)

    def canonical_text(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.values) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    def latent_spec(self) -> LatentSpec:
        cats = _to_int_tuple("latent.cat", self.get("latent.cat"))
        conts = []
        raw = self.get("latent.cont").strip()
        if raw:
            for part in raw.split(","):
                lo, sep, hi = part.partition(":")
                if not sep:
                    raise ConfigError(f"latent.cont: expected low:high, got {part!r}")
                conts.append((_to_float("latent.cont", lo), _to_float("latent.cont", hi)))
        try:
            return LatentSpec(z_dim=_to_int("latent.z_dim", self.get("latent.z_dim")),
                              categorical=cats, continuous=tuple(conts))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        eps_raw = self.get("privacy.epsilon")
        epsilon = privacy.INF if eps_raw in ("inf", "INF", "Infinity") else _to_float(
            "privacy.epsilon", eps_raw)
        delta = _to_float("privacy.delta", self.get("privacy.delta"))
        if not 0.0 < delta < 1.0:
            raise ConfigError("privacy.delta must lie in (0, 1)")
        if epsilon != privacy.INF and epsilon <= 0.0:
            raise ConfigError("privacy.epsilon must be positive or inf")
        clip = _to_float("privacy.clip", self.get("privacy.clip"))
        if clip <= 0.0:
            raise ConfigError("privacy.clip must be positive")
        try:
            return TrainConfig(
                n_g=_to_int("train.ng", self.get("train.ng")),
                batch=_to_int("train.batch", self.get("train.batch")),
                n_d=_to_int("train.nd", self.get("train.nd")),
                lr_critic=_to_float("train.lr_critic", self.get("train.lr_critic")),
                lr_gen=_to_float("train.lr_gen", self.get("train.lr_gen")),
                lambda_cat=_to_float("train.lambda_cat", self.get("train.lambda_cat")),
                lambda_cont=_to_float("train.lambda_cont", self.get("train.lambda_cont")),
                epsilon=epsilon, delta=delta, c_p=clip,
                seed=_to_int("train.seed", self.get("train.seed")),
                dataset=self.get("train.dataset"),
                latent=self.latent_spec(),
                gen_hidden=_to_int_tuple("net.gen_hidden", self.get("net.gen_hidden")),
                trunk_hidden=_to_int_tuple("net.trunk_hidden", self.get("net.trunk_hidden")),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def checkpoint_every(self) -> int:
        return _to_int("train.checkpoint_every", self.get("train.checkpoint_every"))


def parse_config(path: str | None, overrides: dict[str, str] | None = None) -> ResolvedConfig:
    """Merge defaults, optional config file, and flag overrides; validate keys."""
    merged = dict(_DEFAULTS)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
        file_kv = _parse_kv_text(text, path)
        unknown = set(file_kv) - set(_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_kv)
    for key, value in (overrides or {}).items():
        if key not in _DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = value
    resolved = ResolvedConfig(values=tuple(sorted(merged.items())))
    resolved.train_config()  # validate eagerly
    return resolved


def load_dataset(descriptor: str) -> Dataset:
    """`mixture:k=..,n=..[,radius=..,std=..,seed=..]` or `idx:<images>[,labels=<path>]`."""
    kind, sep, rest = descriptor.partition(":")
    if not sep:
        raise ConfigError(f"dataset descriptor needs a kind prefix: {descriptor!r}")
    if kind == "mixture":
        params = {"radius": "0.75", "std": "0.05", "seed": "0"}
        for part in rest.split(","):
            key, psep, value = part.partition("=")
            if not psep or key not in ("k", "n", "radius", "std", "seed"):
                raise ConfigError(f"bad mixture parameter {part!r}")
            params[key] = value
        if "k" not in params or "n" not in params:
            raise ConfigError("mixture dataset needs k= and n=")
        return synth_mixture(k=_to_int("k", params["k"]), n=_to_int("n", params["n"]),
                             radius=_to_float("radius", params["radius"]),
                             std=_to_float("std", params["std"]),
                             seed=_to_int("seed", params["seed"]))
    if kind == "idx":
        images, _, labels_part = rest.partition(",")
        ds = load_idx_images(images)
        if labels_part:
            key, psep, value = labels_part.partition("=")
            if key != "labels" or not psep:
                raise ConfigError(f"bad idx parameter {labels_part!r}")
            labels = load_idx_labels(value)
            if labels.shape[0] != ds.n:
                raise ConfigError("label count does not match image count")
            ds = Dataset(x=ds.x, y=labels, source=ds.source)
        return ds
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _out_root(flag_value: str | None) -> str:
    return flag_value or os.environ.get("IMDP_OUT") or "runs"


def _make_run_dir(root: str, config_hash: str) -> str:
    base = os.path.join(root, config_hash[:12])
    path = base
    suffix = 0
    while os.path.exists(path):
        suffix += 1
        path = f"{base}-{suffix}"
    os.makedirs(path)
    return path


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def _manifest_text(resolved: ResolvedConfig, entries: dict[str, str]) -> str:
    lines = [f"tool_version=imdp-{__version__}",
             f"config_hash={resolved.config_hash()}"]
    lines += [f"{k}={v}" for k, v in entries.items()]
    lines.append("")
    lines.append("# resolved configuration (replay with: imdp train --config config.resolved)")
    lines += [f"config.{k}={v}" for k, v in resolved.values]
    return "\n".join(lines) + "\n"


def cmd_train(args) -> int:
    resolved = parse_config(args.config, _flag_overrides(args))
    cfg = resolved.train_config()
    data = load_dataset(cfg.dataset)
    run_dir = _make_run_dir(_out_root(args.out), resolved.config_hash())
    _write(os.path.join(run_dir, "config.resolved"), resolved.canonical_text())
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    every = resolved.checkpoint_every()
    result_holder = {}

    def hook(i, trainer):
        if every and i % every == 0:
            save_checkpoint(os.path.join(run_dir, f"checkpoint-{i:06d}.ckpt"),
                            trainer.gen, trainer.critic, trainer.spec)

    result = train(cfg, data, on_iteration=hook)
    result_holder["result"] = result
    _write(os.path.join(run_dir, "metrics.log"), result.log.to_text())
    save_checkpoint(os.path.join(run_dir, "checkpoint.ckpt"),
                    result.gen, result.critic, result.privacy)
    wall_lines = ["# per-iteration wall clock (ms); non-deterministic, kept out of metrics.log"]
    wall_lines += [f"{r.iteration} {r.wall_ms:.3f}" for r in result.log.records]
    _write(os.path.join(run_dir, "timing.txt"), "\n".join(wall_lines) + "\n")
    eps_final = (repr(result.log.records[-1].eps_spent)
                 if len(result.log) else "inf")
    _write(os.path.join(run_dir, "manifest.txt"), _manifest_text(resolved, {
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "wall_seconds": f"{result.wall_seconds:.3f}",
        "dataset_source": data.source,
        "dataset_sha256": dataset_sha256(data),
        "sigma": repr(result.privacy.sigma),
        "accountant_eps_spent": eps_final,
        "metrics": "metrics.log",
        "checkpoint": "checkpoint.ckpt",
        "timing": "timing.txt",
    }))
    print(run_dir)
    return EXIT_OK


def cmd_generate(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    seed = int(args.seed)
    grid = code_sweep(bundle.gen, bundle.latent, seed=seed,
                      cont_steps=int(args.cont_steps))
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    d = bundle.gen.data_dim
    side = int(math.isqrt(d))
    if side * side == d and d >= 16:
        path = os.path.join(out_dir, "sweep.pgm")
        grid.to_pgm(path, side)
    else:
        path = os.path.join(out_dir, "sweep.csv")
        _write(path, grid.to_table())
    print(path)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    models = {}
    for item in args.model:
        eps_raw, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--model expects EPS=PATH, got {item!r}")
        eps = privacy.INF if eps_raw == "inf" else _to_float("model epsilon", eps_raw)
        bundle = load_checkpoint(path)
        models[eps] = (bundle.gen, bundle.critic)
    if not models:
        raise ConfigError("at least one --model EPS=PATH is required")
    a, sep, b = args.pair.partition(",")
    if not sep:
        raise ConfigError("--pair expects two labels, e.g. 3,8")
    pair = (_to_int("pair", a), _to_int("pair", b))
    real = load_dataset(args.dataset)
    if real.y is None:
        raise ConfigError("evaluation dataset needs labels")
    rng = np.random.default_rng(int(args.seed))
    order = rng.permutation(real.n)
    n_map = min(int(args.map_samples), real.n // 2)
    map_data = Dataset(x=real.x[order[:n_map]], y=real.y[order[:n_map]],
                       source=f"{real.source}|map")
    test_data = Dataset(x=real.x[order[n_map:]], y=real.y[order[n_map:]],
                        source=f"{real.source}|test")
    report = utility_privacy_curve(models, pair=pair, real_test=test_data,
                                   map_data=map_data,
                                   per_class=int(args.per_class),
                                   epochs=int(args.epochs), seed=int(args.seed))
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "utility.csv")
    _write(path, report.to_csv())
    _write(os.path.join(out_dir, "utility-manifest.txt"),
           f"tool_version=imdp-{__version__}\n"
           f"test_split_sha256={report.test_split_sha256}\n"
           f"spearman={report.spearman()!r}\n")
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_accountant(args) -> int:
    delta = _to_float("delta", args.delta)
    q = _to_float("q", args.q)
    n_d = _to_int("nd", args.nd)
    steps = _to_int("steps", args.steps)
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    if args.sigma is not None:
        sigma = _to_float("sigma", args.sigma)
        if sigma <= 0.0:
            raise ConfigError("sigma must be positive")
        print(f"sigma = {sigma:.6g}")
    else:
        if args.epsilon is None:
            raise ConfigError("accountant needs --sigma or --epsilon")
        eps_raw = args.epsilon
        epsilon = privacy.INF if eps_raw == "inf" else _to_float("epsilon", eps_raw)
        try:
            sigma = calibrate_sigma(epsilon, delta, q, n_d)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        print(f"sigma = {sigma:.6g}")
        if sigma == 0.0:
            print("non-private configuration; nothing to account")
            return EXIT_OK
    state = AccountantState.create(q, sigma)
    state = accumulate(state, steps)
    print(f"steps = {state.steps}")
    alphas = " ".join(f"{a:.6g}" for a in state.log_moments)
    print(f"alpha(1..{state.lambda_max}) = {alphas}")
    print(f"spent_epsilon(delta={delta:g}) = {spent_epsilon(state, delta):.6g}")
    return EXIT_OK


def _flag_overrides(args) -> dict[str, str]:
    out = {}
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = str(value)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="imdp",
        description="Train and probe differentially private code-conditioned generators.")
    parser.add_argument("--version", action="version", version=f"imdp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training loop")
    p_train.add_argument("--config", default=None, help="key=value config file")
    for flag in _FLAG_KEYS:
        p_train.add_argument(f"--{flag}", default=None)
    p_train.add_argument("--out", default=None, help="output root (default runs/ or $IMDP_OUT)")
    p_train.set_defaults(func=cmd_train)

    p_gen = sub.add_parser("generate", help="render a latent-code sweep from a checkpoint")
    p_gen.add_argument("--checkpoint", required=True)
    p_gen.add_argument("--cont-steps", default="10", dest="cont_steps")
    p_gen.add_argument("--seed", default="0")
    p_gen.add_argument("--out", default=None)
    p_gen.set_defaults(func=cmd_generate)

    p_eval = sub.add_parser("evaluate", help="utility-vs-privacy classification report")
    p_eval.add_argument("--model", action="append", default=[],
                        help="EPS=CHECKPOINT, repeatable")
    p_eval.add_argument("--pair", required=True, help="two labels, e.g. 3,8")
    p_eval.add_argument("--dataset", required=True, help="labeled real dataset descriptor")
    p_eval.add_argument("--per-class", default="2000", dest="per_class")
    p_eval.add_argument("--map-samples", default="1000", dest="map_samples")
    p_eval.add_argument("--epochs", default="100")
    p_eval.add_argument("--seed", default="0")
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_evaluate)

    p_acct = sub.add_parser("accountant", help="print noise scale and privacy spend")
    p_acct.add_argument("--q", required=True)
    p_acct.add_argument("--sigma", default=None)
    p_acct.add_argument("--epsilon", default=None)
    p_acct.add_argument("--delta", default="1e-5")
    p_acct.add_argument("--nd", default="5")
    p_acct.add_argument("--steps", default="0")
    p_acct.set_defaults(func=cmd_accountant)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        sys.stderr.write(f"imdp: error: validation: {exc}\n")
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - single operator-facing boundary
        sys.stderr.write(f"imdp: error: runtime: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
